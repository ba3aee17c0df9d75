//! Category ranking, hit ratio on the U/N tasks, the statistics baseline and
//! exposure-diversity reporting.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::features::FeatureContext;
use crate::ingest::Catalog;
use crate::itemmatch::Recommendation;
use crate::model::{check_user, user_forward, CategoryTable, ModelParams};
use crate::samples::{history_categories, EvalSample, Task};

/// Categories in descending score order, ties by ascending id.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedCategories {
    pub entries: Vec<(u64, f64)>,
    /// Only the first `eligible` entries may count as hits.
    pub eligible: usize,
}

impl RankedCategories {
    /// Sorts `(category, score)` pairs by score descending, then id ascending.
    pub fn from_scores(mut entries: Vec<(u64, f64)>) -> Self {
        entries.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let eligible = entries.len();
        RankedCategories { entries, eligible }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn top(&self, k: usize) -> impl Iterator<Item = u64> + '_ {
        self.entries.iter().take(k).map(|e| e.0)
    }

    /// 0-based position of `category` within the eligible prefix.
    pub fn rank_of(&self, category: u64) -> Option<usize> {
        self.entries[..self.eligible].iter().position(|e| e.0 == category)
    }

    pub fn hit(&self, category: u64, k: usize) -> bool {
        self.rank_of(category).is_some_and(|r| r < k)
    }
}

/// Scores every catalog category for one user with the trained model.
pub fn rank_categories(
    user_id: u64,
    history: &[u64],
    params: &ModelParams,
    ctx: &FeatureContext<'_>,
    table: &CategoryTable,
) -> Result<RankedCategories> {
    let user = ctx.user(history)?;
    check_user(&user, params)?;
    let e_u = user_forward(&user, params).e_u;
    let cands = ctx.all_candidates(user_id, history);
    let entries = ctx
        .catalog
        .categories()
        .iter()
        .zip(&cands)
        .map(|(&c, cand)| (c, table.score(e_u.view(), cand, params)))
        .collect();
    Ok(RankedCategories::from_scores(entries))
}

/// Historical categories by (count desc, most recent position desc, id asc),
/// then every other category by ascending id. Only the historical prefix is
/// eligible for hits.
pub fn statistics_baseline(history: &[u64], catalog: &Catalog) -> RankedCategories {
    let cats = history_categories(history, catalog);
    let mut stats: HashMap<u64, (usize, usize)> = HashMap::new();
    for (pos, &c) in cats.iter().enumerate() {
        let e = stats.entry(c).or_insert((0, 0));
        e.0 += 1;
        e.1 = pos;
    }
    let mut hist: Vec<(u64, usize, usize)> = stats.into_iter().map(|(c, (n, p))| (c, n, p)).collect();
    hist.sort_unstable_by(|a, b| b.1.cmp(&a.1).then(b.2.cmp(&a.2)).then(a.0.cmp(&b.0)));
    let eligible = hist.len();
    let seen: HashSet<u64> = hist.iter().map(|h| h.0).collect();
    let mut entries: Vec<(u64, f64)> = hist.into_iter().map(|(c, n, _)| (c, n as f64)).collect();
    entries.extend(
        catalog
            .categories()
            .iter()
            .filter(|c| !seen.contains(c))
            .map(|&c| (c, 0.0)),
    );
    RankedCategories { entries, eligible }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskFilter {
    All,
    Only(Task),
}

impl TaskFilter {
    fn accepts(self, task: Task) -> bool {
        match self {
            TaskFilter::All => true,
            TaskFilter::Only(t) => t == task,
        }
    }
}

/// Fraction of filtered samples whose target is in that sample's top `k`.
/// `None` when no sample passes the filter.
pub fn hr_at_k(ranked: &[RankedCategories], samples: &[EvalSample], k: usize, filter: TaskFilter) -> Option<f64> {
    let (mut hits, mut n) = (0usize, 0usize);
    for (r, s) in ranked.iter().zip(samples) {
        if filter.accepts(s.task) {
            n += 1;
            hits += r.hit(s.target_category, k) as usize;
        }
    }
    (n > 0).then(|| hits as f64 / n as f64)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub samples: usize,
    pub hits: BTreeMap<usize, usize>,
}

impl TaskMetrics {
    pub fn hr(&self, k: usize) -> Option<f64> {
        if self.samples == 0 {
            return None;
        }
        self.hits.get(&k).map(|&h| h as f64 / self.samples as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub ks: Vec<usize>,
    pub u: TaskMetrics,
    pub n: TaskMetrics,
    pub all: TaskMetrics,
}

impl EvalReport {
    fn from_ranks(model: &str, ks: &[usize], ranks: &[(Task, Option<usize>)]) -> Self {
        let mut report = EvalReport {
            model: model.to_string(),
            ks: ks.to_vec(),
            u: TaskMetrics::default(),
            n: TaskMetrics::default(),
            all: TaskMetrics::default(),
        };
        for &(task, rank) in ranks {
            let slot = match task {
                Task::U => &mut report.u,
                Task::N => &mut report.n,
            };
            for m in [slot, &mut report.all] {
                m.samples += 1;
                for &k in ks {
                    *m.hits.entry(k).or_default() += rank.is_some_and(|r| r < k) as usize;
                }
            }
        }
        for m in [&mut report.u, &mut report.n, &mut report.all] {
            for &k in ks {
                m.hits.entry(k).or_default();
            }
        }
        report
    }

    pub fn task(&self, task: Task) -> &TaskMetrics {
        match task {
            Task::U => &self.u,
            Task::N => &self.n,
        }
    }

    /// Fixed-width table: `model task samples HR@k...`, N/A for empty tasks.
    pub fn to_table(&self) -> String {
        let mut out = format!("{:<12} {:<4} {:>8}", "model", "task", "samples");
        for k in &self.ks {
            let _ = write!(out, " {:>8}", format!("HR@{k}"));
        }
        out.push('\n');
        for (name, m) in [("U", &self.u), ("N", &self.n), ("all", &self.all)] {
            let _ = write!(out, "{:<12} {:<4} {:>8}", self.model, name, m.samples);
            for &k in &self.ks {
                let cell = m.hr(k).map_or("N/A".to_string(), |v| format!("{v:.4}"));
                let _ = write!(out, " {cell:>8}");
            }
            out.push('\n');
        }
        out
    }

    /// One JSON object per (task, k) with keys `model, task, samples, k, hits, hr`;
    /// `hr` is null when the task has no samples.
    pub fn to_records(&self) -> String {
        let mut out = String::new();
        for (name, m) in [("U", &self.u), ("N", &self.n), ("all", &self.all)] {
            for &k in &self.ks {
                let rec = serde_json::json!({
                    "model": self.model,
                    "task": name,
                    "samples": m.samples,
                    "k": k,
                    "hits": m.hits.get(&k).copied().unwrap_or(0),
                    "hr": m.hr(k),
                });
                out.push_str(&rec.to_string());
                out.push('\n');
            }
        }
        out
    }
}

/// Evaluates an arbitrary ranker over the samples in parallel.
pub fn evaluate<F>(model: &str, samples: &[EvalSample], ks: &[usize], rank: F) -> Result<EvalReport>
where
    F: Fn(&EvalSample) -> Result<RankedCategories> + Sync,
{
    let ranks = samples
        .par_iter()
        .map(|s| Ok((s.task, rank(s)?.rank_of(s.target_category))))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_ranks(model, ks, &ranks))
}

pub fn evaluate_model(
    params: &ModelParams,
    samples: &[EvalSample],
    ctx: &FeatureContext<'_>,
    ks: &[usize],
) -> Result<EvalReport> {
    let table = CategoryTable::build(params);
    evaluate("DeepU2C", samples, ks, |s| {
        rank_categories(s.user_id, &s.history, params, ctx, &table)
    })
}

pub fn evaluate_statistics(samples: &[EvalSample], catalog: &Catalog, ks: &[usize]) -> EvalReport {
    evaluate("Statistics", samples, ks, |s| {
        Ok(statistics_baseline(&s.history, catalog))
    })
    .expect("baseline ranking is infallible")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UserDiversity {
    pub user_id: u64,
    pub exposed: usize,
    pub exposed_new: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub users: usize,
    pub avg_exposed: f64,
    pub avg_exposed_new: f64,
    pub per_user: Vec<UserDiversity>,
}

/// Distinct categories per recommendation list, and how many of them are absent
/// from the user's history.
pub fn diversity_report(
    recs: &[Recommendation],
    histories: &HashMap<u64, Vec<u64>>,
    catalog: &Catalog,
) -> DiversityReport {
    let per_user: Vec<UserDiversity> = recs
        .iter()
        .map(|r| {
            let exposed: HashSet<u64> = r.items.iter().map(|i| i.category_id).collect();
            let known: HashSet<u64> = histories
                .get(&r.user_id)
                .map(|h| history_categories(h, catalog).into_iter().collect())
                .unwrap_or_default();
            UserDiversity {
                user_id: r.user_id,
                exposed: exposed.len(),
                exposed_new: exposed.difference(&known).count(),
            }
        })
        .collect();
    let n = per_user.len();
    let avg = |f: fn(&UserDiversity) -> usize| {
        if n == 0 {
            0.0
        } else {
            per_user.iter().map(f).sum::<usize>() as f64 / n as f64
        }
    };
    DiversityReport {
        users: n,
        avg_exposed: avg(|u| u.exposed),
        avg_exposed_new: avg(|u| u.exposed_new),
        per_user,
    }
}
