//! A parsed log with its splits and interaction graph, the shared starting
//! point of every pipeline stage, plus its tab-separated on-disk form.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::features::FeatureContext;
use crate::ingest::{
    build_histories, parse_log, split_by_day, train_events, Behavior, Catalog, Interaction, ParseLimits, ParseReport,
    ParsedLog, Split, SplitSpec, Splits, UserSplit,
};
use crate::samples::{
    make_eval_samples, make_training_samples, EvalSample, SampleConfig, TrainingSample, UserCategoryGraph,
};

#[derive(Debug, Clone)]
pub struct Dataset {
    pub catalog: Catalog,
    pub splits: Splits,
    pub graph: UserCategoryGraph,
    pub report: ParseReport,
}

impl Dataset {
    pub fn from_parsed(parsed: ParsedLog, spec: SplitSpec) -> Result<Self> {
        let histories = build_histories(&parsed.interactions);
        let splits = split_by_day(&histories, spec)?;
        Ok(Self::from_parts(parsed.catalog, splits, parsed.report))
    }

    /// The graph is rebuilt from the train split only.
    pub fn from_parts(catalog: Catalog, splits: Splits, report: ParseReport) -> Self {
        let graph = UserCategoryGraph::build(&train_events(&splits), &catalog);
        Dataset {
            catalog,
            splits,
            graph,
            report,
        }
    }

    pub fn from_log(path: &Path, limits: ParseLimits, spec: SplitSpec) -> Result<Self> {
        Self::from_parsed(parse_log(path, limits)?, spec)
    }

    pub fn context(&self) -> FeatureContext<'_> {
        FeatureContext::new(&self.catalog, &self.graph)
    }

    pub fn training_samples(&self, cfg: &SampleConfig) -> Result<Vec<TrainingSample>> {
        make_training_samples(&self.splits, &self.catalog, &self.graph, cfg)
    }

    pub fn eval_samples(&self, split: Split, max_history: usize) -> Result<Vec<EvalSample>> {
        make_eval_samples(&self.splits, split, &self.catalog, max_history)
    }

    /// Train and validation events: everything observable before the test day.
    pub fn serving_events(&self) -> Vec<Interaction> {
        self.splits
            .values()
            .flat_map(|s| s.train.iter().chain(&s.valid).copied())
            .collect()
    }

    /// Last `max_history` train and validation items per user: the history
    /// available when recommending for the test day. Users without any are left out.
    pub fn serving_histories(&self, max_history: usize) -> BTreeMap<u64, Vec<u64>> {
        self.splits
            .values()
            .filter_map(|s| {
                let items: Vec<u64> = s.train.iter().chain(&s.valid).map(|e| e.item_id).collect();
                if items.is_empty() {
                    return None;
                }
                Some((s.user_id, items[items.len().saturating_sub(max_history)..].to_vec()))
            })
            .collect()
    }
}

fn corrupt(what: &'static str, line: usize, msg: impl Into<String>) -> Error {
    Error::Corrupt {
        what,
        line,
        msg: msg.into(),
    }
}

fn lines<R: BufRead>(r: R, what: &'static str) -> impl Iterator<Item = Result<(usize, String)>> {
    r.lines()
        .enumerate()
        .map(move |(i, l)| l.map(|l| (i + 1, l)).map_err(|e| corrupt(what, i + 1, e.to_string())))
}

fn field<T: std::str::FromStr>(parts: &[&str], i: usize, what: &'static str, line: usize) -> Result<T> {
    parts
        .get(i)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| corrupt(what, line, format!("bad field {}", i + 1)))
}

/// `item_id category_id` per line, ascending item id.
pub fn write_catalog<W: Write>(catalog: &Catalog, mut w: W) -> std::io::Result<()> {
    for (item, cat) in catalog.item_to_category() {
        writeln!(w, "{item}\t{cat}")?;
    }
    Ok(())
}

pub fn read_catalog<R: BufRead>(r: R) -> Result<Catalog> {
    let mut map = BTreeMap::new();
    for l in lines(r, "catalog") {
        let (n, l) = l?;
        let parts: Vec<&str> = l.split('\t').collect();
        if parts.len() != 2 {
            return Err(corrupt("catalog", n, "expected 2 fields"));
        }
        map.insert(field(&parts, 0, "catalog", n)?, field(&parts, 1, "catalog", n)?);
    }
    Ok(Catalog::from_mapping(map))
}

fn split_name(s: Option<Split>) -> &'static str {
    match s {
        Some(Split::Train) => "train",
        Some(Split::Valid) => "valid",
        Some(Split::Test) => "test",
        None => "dropped",
    }
}

/// `user_id split item_id category_id behavior timestamp`, users ascending,
/// chronological within a split. Dropped events appear as a per-user count
/// line `user_id dropped n`.
pub fn write_events<W: Write>(splits: &Splits, mut w: W) -> std::io::Result<()> {
    for s in splits.values() {
        for split in [Split::Train, Split::Valid, Split::Test] {
            for e in s.events(split) {
                writeln!(
                    w,
                    "{}\t{}\t{}\t{}\t{}\t{}",
                    e.user_id,
                    split_name(Some(split)),
                    e.item_id,
                    e.category_id,
                    e.behavior.code(),
                    e.timestamp
                )?;
            }
        }
        if s.dropped > 0 {
            writeln!(w, "{}\t{}\t{}", s.user_id, split_name(None), s.dropped)?;
        }
    }
    Ok(())
}

pub fn read_events<R: BufRead>(r: R) -> Result<Splits> {
    const WHAT: &str = "events";
    let mut splits = Splits::new();
    for l in lines(r, WHAT) {
        let (n, l) = l?;
        let parts: Vec<&str> = l.split('\t').collect();
        let user_id: u64 = field(&parts, 0, WHAT, n)?;
        let us = splits.entry(user_id).or_insert_with(|| UserSplit {
            user_id,
            ..Default::default()
        });
        if parts.get(1) == Some(&"dropped") {
            us.dropped += field::<usize>(&parts, 2, WHAT, n)?;
            continue;
        }
        if parts.len() != 6 {
            return Err(corrupt(WHAT, n, "expected 6 fields"));
        }
        let ev = Interaction {
            user_id,
            item_id: field(&parts, 2, WHAT, n)?,
            category_id: field(&parts, 3, WHAT, n)?,
            behavior: Behavior::from_code(parts[4]).ok_or_else(|| corrupt(WHAT, n, "unknown behavior"))?,
            timestamp: field(&parts, 5, WHAT, n)?,
        };
        match parts[1] {
            "train" => us.train.push(ev),
            "valid" => us.valid.push(ev),
            "test" => us.test.push(ev),
            other => return Err(corrupt(WHAT, n, format!("unknown split {other}"))),
        }
    }
    if splits.values().all(|s| s.train.is_empty()) {
        return Err(Error::EmptyTrainSplit);
    }
    Ok(splits)
}

/// `user_id category_id s_uc` per edge.
pub fn write_graph<W: Write>(graph: &UserCategoryGraph, mut w: W) -> std::io::Result<()> {
    for (&(u, c), n) in graph.edges() {
        writeln!(w, "{u}\t{c}\t{n}")?;
    }
    Ok(())
}
