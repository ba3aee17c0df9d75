use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use ccdf::dataset::{read_catalog, read_events, write_catalog, write_events, write_graph};
use ccdf::eval::{diversity_report, evaluate_model, evaluate_statistics, rank_categories};
use ccdf::ingest::{ParseReport, Split};
use ccdf::itemmatch::{
    build_index, compute_item_stats, read_recommendations, retrieve_items, score_items, write_recommendations,
    CategoryIndex, Recommendation,
};
use ccdf::model::{load_checkpoint, save_checkpoint, CategoryTable, ModelParams, Vocab};
use ccdf::samples::{read_samples_tsv, write_samples_tsv, Task};
use ccdf::train::{prepare_samples, train, write_epoch_metrics, TrainStatus};
use ccdf::{Dataset, Error};

use crate::config::Config;
use crate::error::CliError;
use crate::workdir::Staged;

pub const CATALOG: &str = "catalog.tsv";
pub const EVENTS: &str = "events.tsv";
pub const GRAPH: &str = "graph.tsv";
pub const SAMPLES: &str = "samples.tsv";
pub const INGEST_SUMMARY: &str = "ingest.json";
pub const TRAIN_METRICS: &str = "train_metrics.jsonl";
pub const EVAL_TABLE: &str = "eval.txt";
pub const EVAL_RECORDS: &str = "eval.jsonl";
pub const DIVERSITY_TABLE: &str = "diversity.txt";
pub const DIVERSITY_RECORDS: &str = "diversity.jsonl";

pub fn recommend_file(k: usize) -> String {
    format!("recommend_k{k}.tsv")
}

type Res<T> = Result<T, CliError>;

fn open(path: &Path, stage: &'static str) -> Res<BufReader<File>> {
    match File::open(path) {
        Ok(f) => Ok(BufReader::new(f)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(CliError::MissingArtifact {
            path: path.to_path_buf(),
            stage,
        }),
        Err(e) => Err(Error::io(path, e).into()),
    }
}

fn echo(cfg: &Config, staged: &mut Staged, command: &str) -> Res<()> {
    staged.write_str(&cfg.work_dir.join(format!("config.{command}.toml")), &cfg.echo())
}

fn load_dataset(cfg: &Config) -> Res<Dataset> {
    let catalog = read_catalog(open(&cfg.work_dir.join(CATALOG), "ingest")?)?;
    let splits = read_events(open(&cfg.work_dir.join(EVENTS), "ingest")?)?;
    let summary: serde_json::Value = serde_json::from_reader(open(&cfg.work_dir.join(INGEST_SUMMARY), "ingest")?)
        .map_err(|e| Error::Corrupt {
            what: "ingest summary",
            line: e.line(),
            msg: e.to_string(),
        })?;
    let report: ParseReport = serde_json::from_value(summary["report"].clone()).unwrap_or_default();
    Ok(Dataset::from_parts(catalog, splits, report))
}

fn load_model(cfg: &Config, ds: &Dataset) -> Res<ModelParams> {
    if !cfg.checkpoint.exists() {
        return Err(CliError::MissingCheckpoint(cfg.checkpoint.clone()));
    }
    let params = load_checkpoint(&cfg.checkpoint)?;
    let want = Vocab::new(ds.catalog.num_items(), ds.catalog.num_categories());
    if params.vocab != want {
        return Err(Error::ShapeMismatch {
            name: "vocabulary (items, categories)".into(),
            expected: vec![want.items, want.categories],
            found: vec![params.vocab.items, params.vocab.categories],
        }
        .into());
    }
    Ok(params)
}

pub fn ingest(cfg: &Config, staged: &mut Staged) -> Res<()> {
    let log = cfg
        .log
        .as_ref()
        .ok_or_else(|| CliError::Config("paths.log is not set".into()))?;
    let ds = Dataset::from_log(log, cfg.limits, cfg.split)?;
    let samples = ds.training_samples(&cfg.samples)?;
    let test = ds.eval_samples(Split::Test, cfg.hparams.max_history)?;
    let count = |f: fn(&ccdf::ingest::UserSplit) -> usize| ds.splits.values().map(f).sum::<usize>();
    let summary = serde_json::json!({
        "report": ds.report,
        "users": ds.splits.len(),
        "items": ds.catalog.num_items(),
        "categories": ds.catalog.num_categories(),
        "events": {
            "train": count(|s| s.train.len()),
            "valid": count(|s| s.valid.len()),
            "test": count(|s| s.test.len()),
            "dropped": count(|s| s.dropped),
        },
        "graph_edges": ds.graph.edges().len(),
        "training_samples": samples.len(),
        "test_samples": {
            "U": test.iter().filter(|s| s.task == Task::U).count(),
            "N": test.iter().filter(|s| s.task == Task::N).count(),
        },
    });
    log::info!(
        "ingested {} rows ({} malformed): {} users, {} items, {} categories, {} training samples",
        ds.report.rows,
        ds.report.malformed,
        ds.splits.len(),
        ds.catalog.num_items(),
        ds.catalog.num_categories(),
        samples.len()
    );
    let dir = &cfg.work_dir;
    staged.write(&dir.join(CATALOG), |w| write_catalog(&ds.catalog, w))?;
    staged.write(&dir.join(EVENTS), |w| write_events(&ds.splits, w))?;
    staged.write(&dir.join(GRAPH), |w| write_graph(&ds.graph, w))?;
    staged.write(&dir.join(SAMPLES), |w| write_samples_tsv(&samples, w))?;
    staged.write_str(&dir.join(INGEST_SUMMARY), &format!("{:#}\n", summary))?;
    echo(cfg, staged, "ingest")
}

pub fn train_model(cfg: &Config, staged: &mut Staged) -> Res<()> {
    let ds = load_dataset(cfg)?;
    let samples = read_samples_tsv(open(&cfg.work_dir.join(SAMPLES), "ingest")?)?;
    if let Some(s) = samples.iter().find(|s| s.history.len() > cfg.hparams.max_history) {
        return Err(CliError::Config(format!(
            "samples hold histories of {} items but model.max_history is {}; rerun ingest",
            s.history.len(),
            cfg.hparams.max_history
        )));
    }
    let ctx = ds.context();
    let prepared = prepare_samples(&samples, &ctx, cfg.train.logq_correction)?;
    let valid = ds.eval_samples(Split::Valid, cfg.hparams.max_history)?;
    log::info!("training on {} samples, validating on {}", prepared.len(), valid.len());
    let outcome = train(&prepared, &valid, &ctx, cfg.hparams, &cfg.train)?;
    if let TrainStatus::Diverged { epoch, batch } = outcome.status {
        return Err(Error::NonFinite(format!("training loss at epoch {epoch} batch {batch}")).into());
    }
    log::info!("kept epoch {}", outcome.best_epoch);
    let tmp = staged.reserve(&cfg.checkpoint)?;
    save_checkpoint(&outcome.params, &tmp)?;
    staged.write(&cfg.reports.join(TRAIN_METRICS), |w| {
        write_epoch_metrics(&outcome.epochs, w)
    })?;
    echo(cfg, staged, "train")
}

pub fn eval(cfg: &Config, staged: &mut Staged) -> Res<()> {
    let ds = load_dataset(cfg)?;
    let params = load_model(cfg, &ds)?;
    let test = ds.eval_samples(Split::Test, params.hparams.max_history)?;
    let model = evaluate_model(&params, &test, &ds.context(), &cfg.eval_ks)?;
    let stats = evaluate_statistics(&test, &ds.catalog, &cfg.eval_ks);
    let table = format!("{}\n{}", model.to_table(), stats.to_table());
    print!("{table}");
    staged.write_str(&cfg.reports.join(EVAL_TABLE), &table)?;
    staged.write_str(
        &cfg.reports.join(EVAL_RECORDS),
        &(model.to_records() + &stats.to_records()),
    )?;
    echo(cfg, staged, "eval")
}

pub fn build(cfg: &Config, staged: &mut Staged) -> Res<()> {
    let ds = load_dataset(cfg)?;
    let stats = compute_item_stats(&ds.serving_events());
    let scores = score_items(&stats, &ds.catalog, cfg.alpha);
    let index = build_index(&scores, &ds.catalog, cfg.index_n)?;
    log::info!("indexed {} categories, N = {}", index.lists.len(), index.n);
    let tmp = staged.reserve(&cfg.index)?;
    index.save(&tmp)?;
    echo(cfg, staged, "build-index")
}

fn load_index(cfg: &Config) -> Res<CategoryIndex> {
    if !cfg.index.exists() {
        return Err(CliError::MissingIndex(cfg.index.clone()));
    }
    Ok(CategoryIndex::load(&cfg.index)?)
}

pub fn recommend(cfg: &Config, staged: &mut Staged) -> Res<()> {
    let ds = load_dataset(cfg)?;
    let params = load_model(cfg, &ds)?;
    let index = load_index(cfg)?;
    let ctx = ds.context();
    let table = CategoryTable::build(&params);
    let histories = ds.serving_histories(params.hparams.max_history);
    let ranked = histories
        .iter()
        .map(|(&u, h)| Ok((u, rank_categories(u, h, &params, &ctx, &table)?)))
        .collect::<Result<Vec<_>, Error>>()?;
    for &k in &cfg.pipeline_ks {
        let recs: Vec<Recommendation> = ranked
            .iter()
            .map(|(u, r)| retrieve_items(*u, r, k, &index, cfg.m))
            .collect();
        staged.write(&cfg.reports.join(recommend_file(k)), |w| {
            write_recommendations(&recs, w)
        })?;
    }
    log::info!("recommended for {} users at K = {:?}", ranked.len(), cfg.pipeline_ks);
    echo(cfg, staged, "recommend")
}

pub fn report(cfg: &Config, staged: &mut Staged) -> Res<()> {
    let ds = load_dataset(cfg)?;
    let histories: HashMap<u64, Vec<u64>> = ds.serving_histories(cfg.hparams.max_history).into_iter().collect();
    let mut table = format!(
        "{:<6}{:>8}{:>6}{:>16}{:>16}\n",
        "K", "users", "M", "avg_exposed", "avg_exposed_N"
    );
    let mut records = String::new();
    for &k in &cfg.pipeline_ks {
        let recs = read_recommendations(open(&cfg.reports.join(recommend_file(k)), "recommend")?, k)?;
        let d = diversity_report(&recs, &histories, &ds.catalog);
        table.push_str(&format!(
            "{:<6}{:>8}{:>6}{:>16.4}{:>16.4}\n",
            k, d.users, cfg.m, d.avg_exposed, d.avg_exposed_new
        ));
        let line = serde_json::json!({
            "k": k,
            "m": cfg.m,
            "users": d.users,
            "avg_exposed": d.avg_exposed,
            "avg_exposed_new": d.avg_exposed_new,
        });
        records.push_str(&format!("{line}\n"));
    }
    print!("{table}");
    staged.write_str(&cfg.reports.join(DIVERSITY_TABLE), &table)?;
    staged.write_str(&cfg.reports.join(DIVERSITY_RECORDS), &records)?;
    echo(cfg, staged, "report")
}

/// Writes a synthetic log in the interaction CSV format.
pub fn synth(out: &Path, kind: &str, users: usize, seed: u64) -> Res<PathBuf> {
    use ccdf::synth::{cyclic_dataset, shop_dataset, to_csv, CyclicConfig, ShopConfig};
    let events = match kind {
        "shop" => shop_dataset(&ShopConfig {
            users,
            seed,
            ..ShopConfig::default()
        }),
        "cyclic" => {
            cyclic_dataset(&CyclicConfig {
                users,
                seed,
                ..CyclicConfig::default()
            })
            .0
        }
        other => return Err(CliError::Config(format!("unknown synthetic log kind {other:?}"))),
    };
    let mut staged = Staged::default();
    staged.write(out, |w| w.write_all(to_csv(&events).as_bytes()))?;
    staged.commit()?;
    Ok(out.to_path_buf())
}
