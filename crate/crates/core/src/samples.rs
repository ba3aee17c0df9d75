//! User–category interaction graph and next-category sample construction.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::{BufRead, Write};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{Catalog, Interaction, Split, Splits};

/// Bipartite user ↔ category adjacency weighted by interaction counts.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct UserCategoryGraph {
    edges: BTreeMap<(u64, u64), u32>,
    per_user: BTreeMap<u64, BTreeSet<u64>>,
}

impl UserCategoryGraph {
    /// Counts train events per (user, category of the event's item).
    pub fn build(events: &[Interaction], catalog: &Catalog) -> Self {
        let mut g = UserCategoryGraph::default();
        for ev in events {
            let cat = catalog.category_of(ev.item_id).unwrap_or(ev.category_id);
            *g.edges.entry((ev.user_id, cat)).or_default() += 1;
            g.per_user.entry(ev.user_id).or_default().insert(cat);
        }
        g
    }

    /// `s_uc`; zero when there is no edge.
    pub fn count(&self, user: u64, category: u64) -> u32 {
        self.edges.get(&(user, category)).copied().unwrap_or(0)
    }

    pub fn categories_of(&self, user: u64) -> Option<&BTreeSet<u64>> {
        self.per_user.get(&user)
    }

    pub fn has_edge(&self, user: u64, category: u64) -> bool {
        self.edges.contains_key(&(user, category))
    }

    pub fn edges(&self) -> &BTreeMap<(u64, u64), u32> {
        &self.edges
    }

    pub fn num_users(&self) -> usize {
        self.per_user.len()
    }
}

pub fn build_graph(train_events: &[Interaction], catalog: &Catalog) -> UserCategoryGraph {
    UserCategoryGraph::build(train_events, catalog)
}

pub const COUNT_BUCKETS: usize = 6;
pub const RECENCY_BUCKETS: usize = 5;
/// Rows in the crossing-token embedding table.
pub const CROSS_VOCAB: usize = COUNT_BUCKETS + RECENCY_BUCKETS;
/// The public log has no demographics, so every user gets this profile token.
pub const UNKNOWN_PROFILE: usize = 0;
pub const PROFILE_VOCAB: usize = 1;

/// Buckets `{0, 1, 2, 3–5, 6–10, >10}`.
pub fn count_bucket(s_uc: u32) -> usize {
    match s_uc {
        0 => 0,
        1 => 1,
        2 => 2,
        3..=5 => 3,
        6..=10 => 4,
        _ => 5,
    }
}

/// Buckets `{absent, last-1, last-2..3, last-4..7, older}` where `last-j` means the
/// most recent occurrence is the j-th item counted from the end of the history.
pub fn recency_bucket(from_end: Option<usize>) -> usize {
    match from_end {
        None => 0,
        Some(1) => 1,
        Some(2..=3) => 2,
        Some(4..=7) => 3,
        Some(_) => 4,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CrossingTokens {
    pub count: usize,
    pub recency: usize,
}

impl CrossingTokens {
    /// Rows of the crossing embedding table these tokens select.
    pub fn rows(&self) -> [usize; 2] {
        [self.count, COUNT_BUCKETS + self.recency]
    }
}

/// 1-based distance from the end of `history_categories` to the last occurrence
/// of `category`.
pub fn last_occurrence(history_categories: &[u64], category: u64) -> Option<usize> {
    history_categories
        .iter()
        .rev()
        .position(|&c| c == category)
        .map(|p| p + 1)
}

/// Last-occurrence distance for every category in a history, for batch scoring.
pub fn recency_map(history_categories: &[u64]) -> HashMap<u64, usize> {
    let mut out = HashMap::new();
    for (j, &c) in history_categories.iter().rev().enumerate() {
        out.entry(c).or_insert(j + 1);
    }
    out
}

pub fn crossing_features(
    user: u64,
    category: u64,
    graph: &UserCategoryGraph,
    history_categories: &[u64],
) -> CrossingTokens {
    CrossingTokens {
        count: count_bucket(graph.count(user, category)),
        recency: recency_bucket(last_occurrence(history_categories, category)),
    }
}

pub fn history_categories(history: &[u64], catalog: &Catalog) -> Vec<u64> {
    history.iter().filter_map(|&i| catalog.category_of(i)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    Positive,
    Negative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub user_id: u64,
    /// Item ids, oldest first, at most `max_history` long.
    pub history: Vec<u64>,
    pub profile: usize,
    pub crossing: CrossingTokens,
    pub target_category: u64,
    pub target_count: u32,
    pub label: Label,
    pub negatives: Vec<u64>,
    /// (category, s_uc) pairs.
    pub neighbors: Vec<(u64, u32)>,
}

/// Where softmax negatives are drawn from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum NegativePool {
    /// Categories the user never interacted with in the training window.
    #[default]
    NonInteracted,
    /// Every category except the target. Needed when users touch the whole
    /// category set and the non-interacted pool is empty.
    AllExceptTarget,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    pub max_history: usize,
    pub per_user: usize,
    pub min_history: usize,
    pub n_neg: usize,
    pub n_nei: usize,
    pub negative_pool: NegativePool,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            max_history: 20,
            per_user: 5,
            min_history: 3,
            n_neg: 500,
            n_nei: 5,
            negative_pool: NegativePool::NonInteracted,
            seed: 42,
        }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_history == 0 {
            return Err(Error::Config("max_history must be >= 1".into()));
        }
        if self.min_history == 0 {
            return Err(Error::Config("min_history must be >= 1".into()));
        }
        Ok(())
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed of the per-user generator derived from the global seed.
pub fn user_seed(global: u64, user: u64) -> u64 {
    splitmix64(global ^ splitmix64(user))
}

pub fn user_rng(global: u64, user: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(user_seed(global, user))
}

/// Uniform draw of `min(n, pool.len())` distinct entries, in draw order.
pub fn sample_without_replacement<T: Copy, R: Rng + ?Sized>(pool: &[T], n: usize, rng: &mut R) -> Vec<T> {
    let k = n.min(pool.len());
    index::sample(rng, pool.len(), k).into_iter().map(|i| pool[i]).collect()
}

/// Negatives from the user's non-interacted categories. An empty result means
/// the sample must be excluded.
pub fn sample_negatives<R: Rng + ?Sized>(
    user: u64,
    catalog: &Catalog,
    graph: &UserCategoryGraph,
    n_neg: usize,
    rng: &mut R,
) -> Vec<u64> {
    let pool: Vec<u64> = catalog
        .categories()
        .iter()
        .copied()
        .filter(|&c| !graph.has_edge(user, c))
        .collect();
    sample_without_replacement(&pool, n_neg, rng)
}

pub fn sample_negatives_except<R: Rng + ?Sized>(target: u64, catalog: &Catalog, n_neg: usize, rng: &mut R) -> Vec<u64> {
    let pool: Vec<u64> = catalog.categories().iter().copied().filter(|&c| c != target).collect();
    sample_without_replacement(&pool, n_neg, rng)
}

/// Up to `n_nei` interacted categories other than the target, with their counts.
pub fn sample_neighbors<R: Rng + ?Sized>(
    user: u64,
    target: u64,
    graph: &UserCategoryGraph,
    n_nei: usize,
    rng: &mut R,
) -> Vec<(u64, u32)> {
    let pool: Vec<u64> = graph
        .categories_of(user)
        .map(|s| s.iter().copied().filter(|&c| c != target).collect())
        .unwrap_or_default();
    sample_without_replacement(&pool, n_nei, rng)
        .into_iter()
        .map(|c| (c, graph.count(user, c)))
        .collect()
}

fn user_training_samples(
    user: u64,
    events: &[Interaction],
    catalog: &Catalog,
    graph: &UserCategoryGraph,
    cfg: &SampleConfig,
) -> Vec<TrainingSample> {
    if events.len() <= cfg.min_history {
        return Vec::new();
    }
    let mut rng = user_rng(cfg.seed, user);
    let eligible = events.len() - cfg.min_history;
    let mut picks = index::sample(&mut rng, eligible, cfg.per_user.min(eligible)).into_vec();
    picks.sort_unstable();

    let items: Vec<u64> = events.iter().map(|e| e.item_id).collect();
    let mut out = Vec::with_capacity(picks.len());
    for pick in picks {
        let p = pick + cfg.min_history;
        let target = catalog.category_of(items[p]).unwrap_or(events[p].category_id);
        let history = items[p.saturating_sub(cfg.max_history)..p].to_vec();
        let negatives = match cfg.negative_pool {
            NegativePool::NonInteracted => sample_negatives(user, catalog, graph, cfg.n_neg, &mut rng),
            NegativePool::AllExceptTarget => sample_negatives_except(target, catalog, cfg.n_neg, &mut rng),
        };
        let neighbors = sample_neighbors(user, target, graph, cfg.n_nei, &mut rng);
        if negatives.is_empty() {
            continue;
        }
        let hist_cats = history_categories(&history, catalog);
        out.push(TrainingSample {
            user_id: user,
            crossing: crossing_features(user, target, graph, &hist_cats),
            history,
            profile: UNKNOWN_PROFILE,
            target_category: target,
            target_count: graph.count(user, target),
            label: Label::Positive,
            negatives,
            neighbors,
        });
    }
    out
}

/// Draws up to `per_user` target positions per user from the train split.
///
/// A position is eligible when at least `min_history` events precede it. Each
/// user gets an independent generator seeded from `(seed, user_id)`, so the
/// result does not depend on thread scheduling.
pub fn make_training_samples(
    splits: &Splits,
    catalog: &Catalog,
    graph: &UserCategoryGraph,
    cfg: &SampleConfig,
) -> Result<Vec<TrainingSample>> {
    cfg.validate()?;
    let users: Vec<_> = splits.values().collect();
    let per_user: Vec<Vec<TrainingSample>> = users
        .par_iter()
        .map(|s| user_training_samples(s.user_id, &s.train, catalog, graph, cfg))
        .collect();
    Ok(per_user.into_iter().flatten().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Task {
    /// Target category already present in the history.
    U,
    /// Target category new to the history.
    N,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalSample {
    pub user_id: u64,
    pub history: Vec<u64>,
    pub target_category: u64,
    pub task: Task,
}

pub fn task_of(target: u64, history: &[u64], catalog: &Catalog) -> Task {
    if history.iter().any(|&i| catalog.category_of(i) == Some(target)) {
        Task::U
    } else {
        Task::N
    }
}

/// One sample per (user, target category) in the chosen split, keeping the
/// earliest event. The history is the last `max_history` events strictly before
/// the target across all earlier splits; events with no history are skipped.
pub fn make_eval_samples(
    splits: &Splits,
    split: Split,
    catalog: &Catalog,
    max_history: usize,
) -> Result<Vec<EvalSample>> {
    if split == Split::Train {
        return Err(Error::Config("evaluation split must be valid or test".into()));
    }
    let mut out = Vec::new();
    for us in splits.values() {
        let mut timeline: Vec<u64> = us.train.iter().map(|e| e.item_id).collect();
        if split == Split::Test {
            timeline.extend(us.valid.iter().map(|e| e.item_id));
        }
        let mut seen = HashSet::new();
        for ev in us.events(split) {
            let target = catalog.category_of(ev.item_id).unwrap_or(ev.category_id);
            if !timeline.is_empty() && seen.insert(target) {
                let history = timeline[timeline.len().saturating_sub(max_history)..].to_vec();
                out.push(EvalSample {
                    user_id: us.user_id,
                    task: task_of(target, &history, catalog),
                    history,
                    target_category: target,
                });
            }
            timeline.push(ev.item_id);
        }
    }
    Ok(out)
}

fn join<T: ToString>(xs: impl IntoIterator<Item = T>) -> String {
    xs.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Tab-separated dump, one sample per line:
/// `user history profile count_bucket recency_bucket target s_uc label negatives neighbors`.
/// Lists are comma-joined; neighbors are `category:count`.
pub fn write_samples_tsv<W: Write>(samples: &[TrainingSample], mut w: W) -> std::io::Result<()> {
    for s in samples {
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            s.user_id,
            join(&s.history),
            s.profile,
            s.crossing.count,
            s.crossing.recency,
            s.target_category,
            s.target_count,
            match s.label {
                Label::Positive => 1,
                Label::Negative => 0,
            },
            join(&s.negatives),
            join(s.neighbors.iter().map(|(c, n)| format!("{c}:{n}"))),
        )?;
    }
    Ok(())
}

fn parse_list<T: std::str::FromStr>(s: &str) -> Option<Vec<T>> {
    if s.is_empty() {
        return Some(Vec::new());
    }
    s.split(',').map(|x| x.parse().ok()).collect()
}

fn parse_sample(line: &str) -> Option<TrainingSample> {
    let f: Vec<&str> = line.split('\t').collect();
    if f.len() != 10 {
        return None;
    }
    let neighbors = if f[9].is_empty() {
        Vec::new()
    } else {
        f[9].split(',')
            .map(|p| {
                let (c, n) = p.split_once(':')?;
                Some((c.parse().ok()?, n.parse().ok()?))
            })
            .collect::<Option<Vec<_>>>()?
    };
    let count: usize = f[3].parse().ok()?;
    let recency: usize = f[4].parse().ok()?;
    if count >= COUNT_BUCKETS || recency >= RECENCY_BUCKETS {
        return None;
    }
    Some(TrainingSample {
        user_id: f[0].parse().ok()?,
        history: parse_list(f[1])?,
        profile: f[2].parse().ok()?,
        crossing: CrossingTokens { count, recency },
        target_category: f[5].parse().ok()?,
        target_count: f[6].parse().ok()?,
        label: match f[7] {
            "1" => Label::Positive,
            "0" => Label::Negative,
            _ => return None,
        },
        negatives: parse_list(f[8])?,
        neighbors,
    })
}

/// Inverse of [`write_samples_tsv`].
pub fn read_samples_tsv<R: BufRead>(r: R) -> Result<Vec<TrainingSample>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let corrupt = |msg: String| Error::Corrupt {
            what: "samples",
            line: i + 1,
            msg,
        };
        let line = line.map_err(|e| corrupt(e.to_string()))?;
        out.push(parse_sample(&line).ok_or_else(|| corrupt("malformed sample".into()))?);
    }
    Ok(out)
}
