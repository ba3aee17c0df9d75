//! One config file of flat dotted keys, plus `--set key=value` overrides.
//!
//! Values are kept as text until resolution; the resolved set is echoed next to
//! the outputs of every run so the run can be repeated exactly.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ccdf::ingest::{ParseLimits, SplitSpec};
use ccdf::model::HyperParams;
use ccdf::samples::{NegativePool, SampleConfig};
use ccdf::synth::daily_split;
use ccdf::train::{TiePolicy, TrainConfig};

use crate::error::CliError;

/// Every accepted key with its default and meaning. Empty defaults mean "unset".
pub const KEYS: &[(&str, &str, &str)] = &[
    (
        "paths.log",
        "",
        "interaction log CSV (user,item,category,behavior,timestamp); needed by ingest",
    ),
    ("paths.work_dir", "work", "directory holding every artifact"),
    (
        "paths.checkpoint",
        "",
        "model checkpoint; default <work_dir>/model.ckpt",
    ),
    ("paths.index", "", "category index; default <work_dir>/index.bin"),
    ("paths.reports", "", "report directory; default <work_dir>/reports"),
    ("data.max_users", "0", "keep only the most active users; 0 keeps all"),
    ("data.max_rows", "0", "stop reading after this many rows; 0 reads all"),
    (
        "split.train_end",
        "",
        "first timestamp of the validation day; default 2017-12-02 00:00 UTC+8",
    ),
    (
        "split.valid_end",
        "",
        "first timestamp of the test day; default 2017-12-03 00:00 UTC+8",
    ),
    (
        "split.test_end",
        "",
        "end of the test day (exclusive); default 2017-12-04 00:00 UTC+8",
    ),
    ("model.max_history", "20", "T, items in the user history"),
    ("model.d_model", "64", "item embedding width"),
    ("model.d_cat", "32", "category embedding width"),
    ("model.d_cross", "8", "crossing-feature embedding width"),
    ("model.d_prof", "8", "profile embedding width"),
    ("model.heads", "8", "attention heads"),
    ("model.d_head", "8", "per-head width; heads * d_head must equal d_model"),
    ("model.d_match", "32", "width of the user and category vectors"),
    ("model.ffn_hidden", "64", "hidden width of both towers"),
    ("samples.per_user", "5", "training targets drawn per user"),
    ("samples.min_history", "3", "events that must precede a training target"),
    (
        "samples.negative_pool",
        "non-interacted",
        "non-interacted | all-except-target",
    ),
    ("samples.seed", "42", "seed of the sample draw"),
    ("train.batch_size", "100", "samples per Adam step"),
    ("train.learning_rate", "0.001", "Adam step size"),
    ("train.n_neg", "500", "softmax negatives per sample"),
    ("train.n_nei", "5", "triplet neighbors per sample"),
    ("train.margin", "0.4", "triplet margin"),
    ("train.lambda", "1", "triplet loss weight"),
    ("train.epochs", "5", "training epochs"),
    ("train.beta1", "0.9", "Adam beta1"),
    ("train.beta2", "0.999", "Adam beta2"),
    ("train.epsilon", "1e-8", "Adam epsilon"),
    ("train.seed", "42", "seed of initialization and shuffling"),
    (
        "train.tie_policy",
        "literal",
        "literal (equal counts count as a loss) | skip-ties",
    ),
    (
        "train.logq_correction",
        "false",
        "subtract ln(k/pool) from negative logits",
    ),
    (
        "train.select_k",
        "5",
        "validation HR cutoff used to keep the best epoch",
    ),
    ("eval.ks", "5,15,30", "HR cutoffs reported by eval"),
    ("index.n", "300", "items kept per category"),
    ("index.alpha", "10", "smoothing added to view counts in item rates"),
    (
        "pipeline.ks",
        "10,20,30",
        "trigger-category counts used by recommend and report",
    ),
    ("pipeline.m", "50", "items recommended per user"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub log: Option<PathBuf>,
    pub work_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub index: PathBuf,
    pub reports: PathBuf,
    pub limits: ParseLimits,
    pub split: SplitSpec,
    pub hparams: HyperParams,
    pub samples: SampleConfig,
    pub train: TrainConfig,
    pub eval_ks: Vec<usize>,
    pub index_n: usize,
    pub alpha: f64,
    pub pipeline_ks: Vec<usize>,
    pub m: usize,
    /// Fully resolved key/value text, as echoed.
    pub resolved: BTreeMap<String, String>,
}

fn flatten(prefix: &str, value: &toml::Value, out: &mut BTreeMap<String, String>) -> Result<(), CliError> {
    let key = |k: &str| {
        if prefix.is_empty() {
            k.to_string()
        } else {
            format!("{prefix}.{k}")
        }
    };
    match value {
        toml::Value::Table(t) => {
            for (k, v) in t {
                flatten(&key(k), v, out)?;
            }
        }
        toml::Value::Array(items) => {
            let parts = items.iter().map(scalar_text).collect::<Option<Vec<_>>>();
            let parts = parts.ok_or_else(|| CliError::Config(format!("{prefix}: arrays may hold only scalars")))?;
            out.insert(prefix.to_string(), parts.join(","));
        }
        v => {
            out.insert(prefix.to_string(), scalar_text(v).expect("scalar"));
        }
    }
    Ok(())
}

fn scalar_text(v: &toml::Value) -> Option<String> {
    match v {
        toml::Value::String(s) => Some(s.clone()),
        toml::Value::Integer(i) => Some(i.to_string()),
        toml::Value::Float(f) => Some(f.to_string()),
        toml::Value::Boolean(b) => Some(b.to_string()),
        toml::Value::Datetime(d) => Some(d.to_string()),
        _ => None,
    }
}

/// Parses config text into flat `key → text` pairs.
pub fn parse_text(text: &str) -> Result<BTreeMap<String, String>, CliError> {
    let table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| CliError::Config(e.message().to_string()))?;
    let mut out = BTreeMap::new();
    flatten("", &toml::Value::Table(table), &mut out)?;
    Ok(out)
}

fn parse<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<T, CliError> {
    let raw = &map[key];
    raw.trim()
        .parse()
        .map_err(|_| CliError::Config(format!("{key}: cannot parse {raw:?}")))
}

fn parse_list(map: &BTreeMap<String, String>, key: &str) -> Result<Vec<usize>, CliError> {
    let raw = &map[key];
    let ks = raw
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| CliError::Config(format!("{key}: expected comma-separated integers, got {raw:?}")))?;
    if ks.is_empty() || ks.contains(&0) {
        return Err(CliError::Config(format!("{key}: values must be >= 1")));
    }
    Ok(ks)
}

fn optional(n: usize) -> Option<usize> {
    (n > 0).then_some(n)
}

impl Config {
    /// Defaults, then the file, then `overrides`. Relative paths resolve against
    /// the config file's directory, or the current directory without a file.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Config, CliError> {
        let mut map: BTreeMap<String, String> = KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect();
        let mut layers = Vec::new();
        let base = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
                layers.push(parse_text(&text)?);
                path.parent().map(Path::to_path_buf).unwrap_or_default()
            }
            None => PathBuf::new(),
        };
        let mut cli = BTreeMap::new();
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("--set expects key=value, got {o:?}")))?;
            cli.insert(k.trim().to_string(), v.trim().to_string());
        }
        layers.push(cli);
        for layer in layers {
            for (k, v) in layer {
                if !map.contains_key(&k) {
                    return Err(CliError::Config(format!("unknown key {k}")));
                }
                map.insert(k, v);
            }
        }
        Self::resolve(map, &base)
    }

    fn resolve(mut map: BTreeMap<String, String>, base: &Path) -> Result<Config, CliError> {
        let path = |s: &str| {
            let p = PathBuf::from(s);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };
        let work_dir = path(&map["paths.work_dir"]);
        for (key, file) in [
            ("paths.checkpoint", "model.ckpt"),
            ("paths.index", "index.bin"),
            ("paths.reports", "reports"),
        ] {
            if map[key].is_empty() {
                map.insert(key.to_string(), work_dir.join(file).display().to_string());
            }
        }
        let taobao = daily_split(9);
        for (key, value) in [
            ("split.train_end", taobao.train_end),
            ("split.valid_end", taobao.valid_end),
            ("split.test_end", taobao.test_end),
        ] {
            if map[key].is_empty() {
                map.insert(key.to_string(), value.to_string());
            }
        }
        map.insert("paths.work_dir".into(), work_dir.display().to_string());
        if !map["paths.log"].is_empty() {
            let log = path(&map["paths.log"]);
            map.insert("paths.log".into(), log.display().to_string());
        }

        let split = SplitSpec::new(
            parse(&map, "split.train_end")?,
            parse(&map, "split.valid_end")?,
            parse(&map, "split.test_end")?,
        )?;
        let hparams = HyperParams {
            max_history: parse(&map, "model.max_history")?,
            d_model: parse(&map, "model.d_model")?,
            d_cat: parse(&map, "model.d_cat")?,
            d_cross: parse(&map, "model.d_cross")?,
            d_prof: parse(&map, "model.d_prof")?,
            heads: parse(&map, "model.heads")?,
            d_head: parse(&map, "model.d_head")?,
            d_match: parse(&map, "model.d_match")?,
            ffn_hidden: parse(&map, "model.ffn_hidden")?,
        };
        hparams.validate()?;
        let negative_pool = match map["samples.negative_pool"].as_str() {
            "non-interacted" => NegativePool::NonInteracted,
            "all-except-target" => NegativePool::AllExceptTarget,
            other => {
                return Err(CliError::Config(format!(
                    "samples.negative_pool: unknown value {other:?}"
                )))
            }
        };
        let tie_policy = match map["train.tie_policy"].as_str() {
            "literal" => TiePolicy::Literal,
            "skip-ties" => TiePolicy::SkipTies,
            other => return Err(CliError::Config(format!("train.tie_policy: unknown value {other:?}"))),
        };
        let train = TrainConfig {
            batch_size: parse(&map, "train.batch_size")?,
            learning_rate: parse(&map, "train.learning_rate")?,
            n_neg: parse(&map, "train.n_neg")?,
            n_nei: parse(&map, "train.n_nei")?,
            margin: parse(&map, "train.margin")?,
            lambda: parse(&map, "train.lambda")?,
            max_epochs: parse(&map, "train.epochs")?,
            beta1: parse(&map, "train.beta1")?,
            beta2: parse(&map, "train.beta2")?,
            epsilon: parse(&map, "train.epsilon")?,
            seed: parse(&map, "train.seed")?,
            tie_policy,
            logq_correction: parse(&map, "train.logq_correction")?,
            select_k: parse(&map, "train.select_k")?,
        };
        train.validate()?;
        let samples = SampleConfig {
            max_history: hparams.max_history,
            per_user: parse(&map, "samples.per_user")?,
            min_history: parse(&map, "samples.min_history")?,
            n_neg: train.n_neg,
            n_nei: train.n_nei,
            negative_pool,
            seed: parse(&map, "samples.seed")?,
        };
        samples.validate()?;
        let index_n: usize = parse(&map, "index.n")?;
        let alpha: f64 = parse(&map, "index.alpha")?;
        let m: usize = parse(&map, "pipeline.m")?;
        if index_n == 0 || m == 0 {
            return Err(CliError::Config("index.n and pipeline.m must be >= 1".into()));
        }
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(CliError::Config("index.alpha must be positive".into()));
        }
        let log = (!map["paths.log"].is_empty()).then(|| PathBuf::from(&map["paths.log"]));
        Ok(Config {
            log,
            checkpoint: PathBuf::from(&map["paths.checkpoint"]),
            index: PathBuf::from(&map["paths.index"]),
            reports: PathBuf::from(&map["paths.reports"]),
            work_dir,
            limits: ParseLimits {
                max_users: optional(parse(&map, "data.max_users")?),
                max_rows: optional(parse(&map, "data.max_rows")?),
            },
            split,
            hparams,
            samples,
            train,
            eval_ks: parse_list(&map, "eval.ks")?,
            index_n,
            alpha,
            pipeline_ks: parse_list(&map, "pipeline.ks")?,
            m,
            resolved: map,
        })
    }

    /// The resolved keys as a config file that reproduces this run.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.resolved {
            out.push_str(&format!("{k} = {}\n", toml::Value::String(v.clone())));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn load_text(text: &str, overrides: &[&str]) -> Result<Config, CliError> {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, text).unwrap();
        let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
        Config::load(Some(&path), &o)
    }

    #[test]
    fn defaults_follow_the_documented_values() {
        let c = Config::load(None, &[]).unwrap();
        assert_eq!(c.hparams, HyperParams::default());
        assert_eq!(c.train, TrainConfig::default());
        assert_eq!(c.eval_ks, [5, 15, 30]);
        assert_eq!(c.pipeline_ks, [10, 20, 30]);
        assert_eq!((c.index_n, c.m, c.alpha), (300, 50, 10.0));
        assert_eq!(c.checkpoint, PathBuf::from("work/model.ckpt"));
        assert_eq!(c.split, daily_split(9));
    }

    #[test]
    fn tables_and_dotted_keys_flatten_alike() {
        let dir = tempfile::tempdir().unwrap();
        let load = |name: &str, text: &str| {
            let path = dir.path().join(name);
            std::fs::write(&path, text).unwrap();
            Config::load(Some(&path), &[]).unwrap()
        };
        let a = load("a.toml", "[train]\nepochs = 2\n[eval]\nks = [1, 2]\n");
        let b = load("b.toml", "\"train.epochs\" = \"2\"\n\"eval.ks\" = \"1,2\"\n");
        assert_eq!(a.train.max_epochs, 2);
        assert_eq!(a.eval_ks, [1, 2]);
        assert_eq!(a.resolved, b.resolved);
    }

    #[test]
    fn overrides_win_and_unknown_keys_fail() {
        let c = load_text("[train]\nepochs = 2\n", &["train.epochs=7"]).unwrap();
        assert_eq!(c.train.max_epochs, 7);
        assert!(matches!(
            load_text("[train]\nepoch = 2\n", &[]),
            Err(CliError::Config(_))
        ));
        assert!(matches!(load_text("", &["nope=1"]), Err(CliError::Config(_))));
        assert!(matches!(load_text("", &["train.epochs=x"]), Err(CliError::Config(_))));
        assert!(load_text("", &["model.heads=3"]).is_err());
    }

    #[test]
    fn relative_paths_resolve_against_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "[paths]\nlog = \"data/x.csv\"\nwork_dir = \"out\"\n").unwrap();
        let c = Config::load(Some(&path), &[]).unwrap();
        assert_eq!(c.log.unwrap(), dir.path().join("data/x.csv"));
        assert_eq!(c.index, dir.path().join("out/index.bin"));
    }

    #[test]
    fn echo_reloads_to_the_same_config() {
        let c = load_text("[model]\nmax_history = 7\n", &["pipeline.ks=3,4"]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("echo.toml");
        std::fs::write(&path, c.echo()).unwrap();
        let again = Config::load(Some(&path), &[]).unwrap();
        assert_eq!(again, c);
    }
}
