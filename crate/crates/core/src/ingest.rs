//! Interaction-log parsing, per-user chronological histories and day-based splits.
//!
//! The log is the five-column UserBehavior CSV:
//! `user_id,item_id,category_id,behavior,timestamp` with behavior one of
//! `pv|cart|fav|buy`. A header row is tolerated.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Behavior {
    View,
    Cart,
    Favorite,
    Purchase,
}

impl Behavior {
    pub const ALL: [Behavior; 4] = [Behavior::View, Behavior::Cart, Behavior::Favorite, Behavior::Purchase];

    pub fn from_code(code: &str) -> Option<Self> {
        match code {
            "pv" => Some(Behavior::View),
            "cart" => Some(Behavior::Cart),
            "fav" => Some(Behavior::Favorite),
            "buy" => Some(Behavior::Purchase),
            _ => None,
        }
    }

    pub fn code(self) -> &'static str {
        match self {
            Behavior::View => "pv",
            Behavior::Cart => "cart",
            Behavior::Favorite => "fav",
            Behavior::Purchase => "buy",
        }
    }
}

/// One logged user/item event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub user_id: u64,
    pub item_id: u64,
    pub category_id: u64,
    pub behavior: Behavior,
    pub timestamp: i64,
}

/// Item → category mapping plus the dense orderings used for embedding tables.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Catalog {
    item_to_category: BTreeMap<u64, u64>,
    categories: Vec<u64>,
    items: Vec<u64>,
    items_by_category: BTreeMap<u64, Vec<u64>>,
    item_pos: HashMap<u64, usize>,
    category_pos: HashMap<u64, usize>,
}

impl Catalog {
    /// Builds a catalog from an already-resolved item → category map.
    pub fn from_mapping(item_to_category: BTreeMap<u64, u64>) -> Self {
        let items: Vec<u64> = item_to_category.keys().copied().collect();
        let mut items_by_category: BTreeMap<u64, Vec<u64>> = BTreeMap::new();
        for (&item, &cat) in &item_to_category {
            items_by_category.entry(cat).or_default().push(item);
        }
        let categories: Vec<u64> = items_by_category.keys().copied().collect();
        let item_pos = items.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let category_pos = categories.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        Catalog {
            item_to_category,
            categories,
            items,
            items_by_category,
            item_pos,
            category_pos,
        }
    }

    pub fn category_of(&self, item: u64) -> Option<u64> {
        self.item_to_category.get(&item).copied()
    }

    pub fn item_to_category(&self) -> &BTreeMap<u64, u64> {
        &self.item_to_category
    }

    /// All category ids, ascending.
    pub fn categories(&self) -> &[u64] {
        &self.categories
    }

    /// All item ids, ascending.
    pub fn items(&self) -> &[u64] {
        &self.items
    }

    pub fn items_in(&self, category: u64) -> &[u64] {
        self.items_by_category.get(&category).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn items_by_category(&self) -> &BTreeMap<u64, Vec<u64>> {
        &self.items_by_category
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    pub fn num_categories(&self) -> usize {
        self.categories.len()
    }

    /// Dense row of `item` in the item embedding table.
    pub fn item_index(&self, item: u64) -> Option<usize> {
        self.item_pos.get(&item).copied()
    }

    /// Dense row of `category` in the category embedding table.
    pub fn category_index(&self, category: u64) -> Option<usize> {
        self.category_pos.get(&category).copied()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ParseLimits {
    /// Keep only the `max_users` users with the most rows (ties: smaller id).
    pub max_users: Option<usize>,
    /// Stop reading after this many data rows.
    pub max_rows: Option<usize>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseReport {
    pub rows: usize,
    pub malformed: usize,
    pub kept: usize,
    /// Items observed with more than one category id.
    pub category_conflicts: usize,
}

#[derive(Debug, Clone)]
pub struct ParsedLog {
    pub interactions: Vec<Interaction>,
    pub catalog: Catalog,
    pub report: ParseReport,
}

fn parse_row(record: &csv::StringRecord) -> Option<Interaction> {
    if record.len() != 5 {
        return None;
    }
    let field = |i: usize| record.get(i).map(str::trim);
    let user_id = field(0)?.parse().ok()?;
    let item_id = field(1)?.parse().ok()?;
    let category_id = field(2)?.parse().ok()?;
    let behavior = Behavior::from_code(field(3)?)?;
    let timestamp: i64 = field(4)?.parse().ok()?;
    if timestamp <= 0 {
        return None;
    }
    Some(Interaction {
        user_id,
        item_id,
        category_id,
        behavior,
        timestamp,
    })
}

fn is_header(record: &csv::StringRecord) -> bool {
    record.get(0).map(str::trim) == Some("user_id")
}

struct RawScan {
    rows: usize,
    malformed: usize,
    interactions: Vec<Interaction>,
}

fn scan<R: Read>(
    reader: R,
    max_rows: Option<usize>,
    mut keep: impl FnMut(&Interaction) -> bool,
) -> std::result::Result<RawScan, csv::Error> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let mut out = RawScan {
        rows: 0,
        malformed: 0,
        interactions: Vec::new(),
    };
    let mut record = csv::StringRecord::new();
    let mut first = true;
    loop {
        if max_rows.is_some_and(|cap| out.rows >= cap) {
            break;
        }
        match rdr.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) if e.is_io_error() => return Err(e),
            Err(_) => {
                out.rows += 1;
                out.malformed += 1;
                first = false;
                continue;
            }
        }
        if std::mem::take(&mut first) && is_header(&record) {
            continue;
        }
        out.rows += 1;
        match parse_row(&record) {
            Some(ev) => {
                if keep(&ev) {
                    out.interactions.push(ev);
                }
            }
            None => out.malformed += 1,
        }
    }
    Ok(out)
}

/// Users with the most rows, ties broken by smaller id.
pub fn most_active_users(counts: &HashMap<u64, usize>, max_users: usize) -> HashSet<u64> {
    let mut ranked: Vec<(u64, usize)> = counts.iter().map(|(&u, &n)| (u, n)).collect();
    ranked.sort_unstable_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.into_iter().take(max_users).map(|(u, _)| u).collect()
}

fn finish(scan: RawScan) -> Result<ParsedLog> {
    if scan.rows > 0 && scan.malformed * 2 > scan.rows {
        return Err(Error::MostlyMalformed {
            malformed: scan.malformed,
            total: scan.rows,
        });
    }
    let mut interactions = scan.interactions;
    if interactions.is_empty() {
        return Err(Error::EmptyLog);
    }

    let mut votes: BTreeMap<u64, BTreeMap<u64, usize>> = BTreeMap::new();
    for ev in &interactions {
        *votes.entry(ev.item_id).or_default().entry(ev.category_id).or_default() += 1;
    }
    let mut conflicts = 0;
    let mapping: BTreeMap<u64, u64> = votes
        .into_iter()
        .map(|(item, cats)| {
            if cats.len() > 1 {
                conflicts += 1;
            }
            // BTreeMap iterates ascending, so the first maximum is the smallest id.
            let (mut best, mut best_n) = (0, 0);
            for (cat, n) in cats {
                if n > best_n {
                    best = cat;
                    best_n = n;
                }
            }
            (item, best)
        })
        .collect();
    if conflicts > 0 {
        log::warn!("{conflicts} items carry more than one category id; majority kept");
    }
    for ev in &mut interactions {
        ev.category_id = mapping[&ev.item_id];
    }
    let report = ParseReport {
        rows: scan.rows,
        malformed: scan.malformed,
        kept: interactions.len(),
        category_conflicts: conflicts,
    };
    Ok(ParsedLog {
        interactions,
        catalog: Catalog::from_mapping(mapping),
        report,
    })
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::io(path, std::io::Error::other(format!("{other:?}"))),
    }
}

/// Parses a log file. With a user cap the file is read twice so that only the
/// kept users' rows are ever held in memory.
pub fn parse_log(path: &Path, limits: ParseLimits) -> Result<ParsedLog> {
    let open = || File::open(path).map(BufReader::new).map_err(|e| Error::io(path, e));
    let keep: Option<HashSet<u64>> = match limits.max_users {
        Some(cap) => {
            let mut counts: HashMap<u64, usize> = HashMap::new();
            // Counting pass; rows are discarded as they are read.
            scan(open()?, limits.max_rows, |ev| {
                *counts.entry(ev.user_id).or_default() += 1;
                false
            })
            .map_err(|e| csv_err(path, e))?;
            Some(most_active_users(&counts, cap))
        }
        None => None,
    };
    let raw = scan(open()?, limits.max_rows, |ev| {
        keep.as_ref().is_none_or(|k| k.contains(&ev.user_id))
    })
    .map_err(|e| csv_err(path, e))?;
    let parsed = finish(raw)?;
    log::info!(
        "parsed {}: rows={} malformed={} kept={} conflicts={}",
        path.display(),
        parsed.report.rows,
        parsed.report.malformed,
        parsed.report.kept,
        parsed.report.category_conflicts
    );
    Ok(parsed)
}

/// In-memory variant of [`parse_log`].
pub fn parse_str(text: &str, limits: ParseLimits) -> Result<ParsedLog> {
    let to_err = |e: csv::Error| Error::io("<memory>", std::io::Error::other(e.to_string()));
    let keep = match limits.max_users {
        Some(cap) => {
            let raw = scan(text.as_bytes(), limits.max_rows, |_| true).map_err(to_err)?;
            let mut counts: HashMap<u64, usize> = HashMap::new();
            for ev in &raw.interactions {
                *counts.entry(ev.user_id).or_default() += 1;
            }
            Some(most_active_users(&counts, cap))
        }
        None => None,
    };
    let raw = scan(text.as_bytes(), limits.max_rows, |ev| {
        keep.as_ref().is_none_or(|k| k.contains(&ev.user_id))
    })
    .map_err(to_err)?;
    finish(raw)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserHistory {
    pub user_id: u64,
    /// Ascending by timestamp; equal timestamps keep input order.
    pub events: Vec<Interaction>,
}

pub fn build_histories(interactions: &[Interaction]) -> BTreeMap<u64, UserHistory> {
    let mut out: BTreeMap<u64, UserHistory> = BTreeMap::new();
    for ev in interactions {
        out.entry(ev.user_id)
            .or_insert_with(|| UserHistory {
                user_id: ev.user_id,
                events: Vec::new(),
            })
            .events
            .push(*ev);
    }
    for h in out.values_mut() {
        // stable
        h.events.sort_by_key(|e| e.timestamp);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Valid,
    Test,
}

/// Half-open boundaries `[.., train_end) [train_end, valid_end) [valid_end, test_end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_end: i64,
    pub valid_end: i64,
    pub test_end: i64,
}

impl SplitSpec {
    pub fn new(train_end: i64, valid_end: i64, test_end: i64) -> Result<Self> {
        if !(train_end < valid_end && valid_end < test_end) {
            return Err(Error::InvalidSplit {
                train_end,
                valid_end,
                test_end,
            });
        }
        Ok(SplitSpec {
            train_end,
            valid_end,
            test_end,
        })
    }

    /// `None` means the event falls at or after `test_end` and is dropped.
    pub fn assign(&self, timestamp: i64) -> Option<Split> {
        if timestamp < self.train_end {
            Some(Split::Train)
        } else if timestamp < self.valid_end {
            Some(Split::Valid)
        } else if timestamp < self.test_end {
            Some(Split::Test)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct UserSplit {
    pub user_id: u64,
    pub train: Vec<Interaction>,
    pub valid: Vec<Interaction>,
    pub test: Vec<Interaction>,
    pub dropped: usize,
}

impl UserSplit {
    pub fn events(&self, split: Split) -> &[Interaction] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }
}

pub type Splits = BTreeMap<u64, UserSplit>;

pub fn split_by_day(histories: &BTreeMap<u64, UserHistory>, spec: SplitSpec) -> Result<Splits> {
    let mut out = Splits::new();
    let mut train_total = 0;
    for (&user_id, history) in histories {
        let mut us = UserSplit {
            user_id,
            ..Default::default()
        };
        for ev in &history.events {
            match spec.assign(ev.timestamp) {
                Some(Split::Train) => us.train.push(*ev),
                Some(Split::Valid) => us.valid.push(*ev),
                Some(Split::Test) => us.test.push(*ev),
                None => us.dropped += 1,
            }
        }
        train_total += us.train.len();
        out.insert(user_id, us);
    }
    if train_total == 0 {
        return Err(Error::EmptyTrainSplit);
    }
    Ok(out)
}

/// All train events across users, user-major, chronological within a user.
pub fn train_events(splits: &Splits) -> Vec<Interaction> {
    splits.values().flat_map(|s| s.train.iter().copied()).collect()
}
