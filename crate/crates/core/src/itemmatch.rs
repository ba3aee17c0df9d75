//! Posterior-weighted item scores, the per-category top-N inverted index and
//! retrieval constrained to the top-K categories.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{rank_categories, RankedCategories};
use crate::features::FeatureContext;
use crate::ingest::{Behavior, Catalog, Interaction};
use crate::model::{CategoryTable, ModelParams};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemStats {
    pub item_id: u64,
    pub views: u64,
    pub carts: u64,
    pub favorites: u64,
    pub purchases: u64,
}

pub fn compute_item_stats(events: &[Interaction]) -> BTreeMap<u64, ItemStats> {
    let mut out: BTreeMap<u64, ItemStats> = BTreeMap::new();
    for ev in events {
        let s = out.entry(ev.item_id).or_insert(ItemStats {
            item_id: ev.item_id,
            ..Default::default()
        });
        match ev.behavior {
            Behavior::View => s.views += 1,
            Behavior::Cart => s.carts += 1,
            Behavior::Favorite => s.favorites += 1,
            Behavior::Purchase => s.purchases += 1,
        }
    }
    out
}

pub const CTR_WEIGHT: f64 = 1.0;
pub const CVR_WEIGHT: f64 = 10.0;
pub const CPR_WEIGHT: f64 = 100.0;

/// `1·CTR + 10·CVR + 100·CPR`.
pub fn weighted_score(ctr: f64, cvr: f64, cpr: f64) -> f64 {
    CTR_WEIGHT * ctr + CVR_WEIGHT * cvr + CPR_WEIGHT * cpr
}

/// Smoothed log proxies `(views, carts+favorites, purchases) / (views + α)`.
/// A zero denominator yields zero rates.
pub fn posterior_rates(stats: &ItemStats, alpha: f64) -> (f64, f64, f64) {
    let denom = stats.views as f64 + alpha;
    if denom <= 0.0 {
        return (0.0, 0.0, 0.0);
    }
    (
        stats.views as f64 / denom,
        (stats.carts + stats.favorites) as f64 / denom,
        stats.purchases as f64 / denom,
    )
}

pub fn posterior_score(stats: &ItemStats, alpha: f64) -> f64 {
    let (ctr, cvr, cpr) = posterior_rates(stats, alpha);
    weighted_score(ctr, cvr, cpr)
}

/// Scores for every catalog item; items without stats score zero.
pub fn score_items(stats: &BTreeMap<u64, ItemStats>, catalog: &Catalog, alpha: f64) -> BTreeMap<u64, f64> {
    catalog
        .items()
        .iter()
        .map(|&i| (i, stats.get(&i).map_or(0.0, |s| posterior_score(s, alpha))))
        .collect()
}

fn by_score_then_id(a: &(u64, f32), b: &(u64, f32)) -> std::cmp::Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// Exact top `n` by (score desc, id asc) via partial selection.
pub fn top_n(mut items: Vec<(u64, f32)>, n: usize) -> Vec<(u64, f32)> {
    if items.len() > n && n > 0 {
        items.select_nth_unstable_by(n - 1, by_score_then_id);
        items.truncate(n);
    }
    items.truncate(n);
    items.sort_unstable_by(by_score_then_id);
    items
}

pub const INDEX_VERSION: u32 = 1;
const INDEX_MAGIC: [u8; 4] = *b"CIDX";

/// Per-category top-N item lists. Scores are stored as `f32` and ordering is
/// decided on the stored value.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryIndex {
    pub n: usize,
    pub lists: BTreeMap<u64, Vec<(u64, f32)>>,
}

impl CategoryIndex {
    pub fn list(&self, category: u64) -> &[(u64, f32)] {
        self.lists.get(&category).map(Vec::as_slice).unwrap_or(&[])
    }

    /// ```text
    /// magic "CIDX" | version u32 | N u64 | categories u64
    /// per category: category_id u64 | length u64 | (item_id u64, score f32) * length
    /// ```
    /// All integers and floats little-endian.
    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(&INDEX_MAGIC)?;
        w.write_all(&INDEX_VERSION.to_le_bytes())?;
        w.write_all(&(self.n as u64).to_le_bytes())?;
        w.write_all(&(self.lists.len() as u64).to_le_bytes())?;
        for (&c, list) in &self.lists {
            w.write_all(&c.to_le_bytes())?;
            w.write_all(&(list.len() as u64).to_le_bytes())?;
            for &(item, score) in list {
                w.write_all(&item.to_le_bytes())?;
                w.write_all(&score.to_le_bytes())?;
            }
        }
        w.flush()
    }

    pub fn read<R: Read>(r: R) -> Result<Self> {
        let mut r = BufReader::new(r);
        let short = |_| Error::SizeMismatch("index truncated".into());
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(short)?;
        if magic != INDEX_MAGIC {
            return Err(Error::BadMagic("index".into()));
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b4).map_err(short)?;
        let version = u32::from_le_bytes(b4);
        if version != INDEX_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: INDEX_VERSION,
            });
        }
        let mut u64_at = |r: &mut BufReader<R>| -> Result<u64> {
            r.read_exact(&mut b8).map_err(short)?;
            Ok(u64::from_le_bytes(b8))
        };
        let n = u64_at(&mut r)? as usize;
        let count = u64_at(&mut r)?;
        let mut lists = BTreeMap::new();
        for _ in 0..count {
            let c = u64_at(&mut r)?;
            let len = u64_at(&mut r)? as usize;
            if len > n {
                return Err(Error::SizeMismatch(format!("category {c} lists {len} items, N = {n}")));
            }
            let mut list = Vec::with_capacity(len);
            for _ in 0..len {
                let item = u64_at(&mut r)?;
                r.read_exact(&mut b4).map_err(short)?;
                list.push((item, f32::from_le_bytes(b4)));
            }
            lists.insert(c, list);
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).map_err(|e| Error::io("<index>", e))?;
        if !rest.is_empty() {
            return Err(Error::SizeMismatch(format!("{} trailing bytes in index", rest.len())));
        }
        Ok(CategoryIndex { n, lists })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write(BufWriter::new(f)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(f)
    }
}

/// Keeps the top `n` items of every catalog category.
pub fn build_index(scores: &BTreeMap<u64, f64>, catalog: &Catalog, n: usize) -> Result<CategoryIndex> {
    if n == 0 {
        return Err(Error::Config("index N must be >= 1".into()));
    }
    let groups: Vec<(u64, &Vec<u64>)> = catalog.items_by_category().iter().map(|(&c, v)| (c, v)).collect();
    let lists = groups
        .par_iter()
        .map(|&(c, items)| {
            let scored = items
                .iter()
                .map(|&i| (i, scores.get(&i).copied().unwrap_or(0.0) as f32))
                .collect();
            (c, top_n(scored, n))
        })
        .collect();
    Ok(CategoryIndex { n, lists })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecommendedItem {
    pub item_id: u64,
    pub category_id: u64,
    pub score: f32,
    /// 1-based rank of the item's category among the triggers.
    pub category_rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub user_id: u64,
    pub k: usize,
    pub items: Vec<RecommendedItem>,
}

impl Recommendation {
    pub fn categories(&self) -> HashSet<u64> {
        self.items.iter().map(|i| i.category_id).collect()
    }
}

/// Round-robin merge of the top-`k` categories' index lists, in category-rank
/// order, until `m` items are taken or every list is exhausted. Categories with
/// empty lists are skipped and not replaced.
pub fn retrieve_items(
    user_id: u64,
    ranked: &RankedCategories,
    k: usize,
    index: &CategoryIndex,
    m: usize,
) -> Recommendation {
    let triggers: Vec<(usize, u64, &[(u64, f32)])> = ranked
        .top(k)
        .enumerate()
        .map(|(r, c)| (r + 1, c, index.list(c)))
        .filter(|t| !t.2.is_empty())
        .collect();
    let mut cursors = vec![0usize; triggers.len()];
    let mut seen = HashSet::new();
    let mut items = Vec::new();
    'outer: loop {
        let mut progressed = false;
        for (t, &(rank, cat, list)) in triggers.iter().enumerate() {
            while let Some(&(item, score)) = list.get(cursors[t]) {
                cursors[t] += 1;
                if seen.insert(item) {
                    items.push(RecommendedItem {
                        item_id: item,
                        category_id: cat,
                        score,
                        category_rank: rank,
                    });
                    progressed = true;
                    break;
                }
            }
            if items.len() >= m {
                break 'outer;
            }
        }
        if !progressed {
            break;
        }
    }
    Recommendation { user_id, k, items }
}

/// Stage I ranking followed by constrained retrieval.
#[allow(clippy::too_many_arguments)]
pub fn recommend_pipeline(
    user_id: u64,
    history: &[u64],
    params: &ModelParams,
    ctx: &FeatureContext<'_>,
    table: &CategoryTable,
    index: &CategoryIndex,
    k: usize,
    m: usize,
) -> Result<Recommendation> {
    if k == 0 || m == 0 {
        return Err(Error::Config("K and M must be >= 1".into()));
    }
    let ranked = rank_categories(user_id, history, params, ctx, table)?;
    Ok(retrieve_items(user_id, &ranked, k, index, m))
}

/// Tab-separated `user_id rank item_id category_id score`, rank 1-based.
pub fn write_recommendations<W: Write>(recs: &[Recommendation], mut w: W) -> std::io::Result<()> {
    for r in recs {
        for (i, it) in r.items.iter().enumerate() {
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}",
                r.user_id,
                i + 1,
                it.item_id,
                it.category_id,
                it.score
            )?;
        }
    }
    Ok(())
}

/// Inverse of [`write_recommendations`] for lists of cutoff `k`. Category
/// ranks are not stored and come back as 0.
pub fn read_recommendations<R: BufRead>(r: R, k: usize) -> Result<Vec<Recommendation>> {
    let mut out: Vec<Recommendation> = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let corrupt = |msg: &str| Error::Corrupt {
            what: "recommendations",
            line: i + 1,
            msg: msg.to_string(),
        };
        let line = line.map_err(|e| corrupt(&e.to_string()))?;
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 5 {
            return Err(corrupt("expected 5 fields"));
        }
        let user_id: u64 = f[0].parse().map_err(|_| corrupt("bad user id"))?;
        let item = RecommendedItem {
            item_id: f[2].parse().map_err(|_| corrupt("bad item id"))?,
            category_id: f[3].parse().map_err(|_| corrupt("bad category id"))?,
            score: f[4].parse().map_err(|_| corrupt("bad score"))?,
            category_rank: 0,
        };
        match out.last_mut() {
            Some(r) if r.user_id == user_id => r.items.push(item),
            _ => out.push(Recommendation {
                user_id,
                k,
                items: vec![item],
            }),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(item: u64, b: Behavior) -> Interaction {
        Interaction {
            user_id: 1,
            item_id: item,
            category_id: 1,
            behavior: b,
            timestamp: 1,
        }
    }

    #[test]
    fn stats_count_behaviors() {
        let evs = [
            ev(1, Behavior::View),
            ev(1, Behavior::View),
            ev(1, Behavior::View),
            ev(1, Behavior::Purchase),
        ];
        let s = compute_item_stats(&evs);
        assert_eq!(s[&1].views, 3);
        assert_eq!(s[&1].purchases, 1);
        assert!(!s.contains_key(&2));
    }

    #[test]
    fn score_weights() {
        assert_eq!(posterior_score(&ItemStats::default(), 10.0), 0.0);
        assert_eq!(posterior_score(&ItemStats::default(), 0.0), 0.0);
        assert!((weighted_score(0.1, 0.01, 0.001) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn index_orders_and_breaks_ties() {
        let cat = Catalog::from_mapping([(5, 1), (3, 1), (9, 1)].into_iter().collect());
        let scores = BTreeMap::from([(5, 2.0), (3, 1.0), (9, 1.0)]);
        let idx = build_index(&scores, &cat, 300).unwrap();
        assert_eq!(idx.list(1), &[(5, 2.0), (3, 1.0), (9, 1.0)]);
        assert!(build_index(&scores, &cat, 0).is_err());
    }

    fn ranked(cats: &[u64]) -> RankedCategories {
        RankedCategories::from_scores(cats.iter().enumerate().map(|(i, &c)| (c, -(i as f64))).collect())
    }

    #[test]
    fn round_robin_merge() {
        let index = CategoryIndex {
            n: 10,
            lists: BTreeMap::from([(1, vec![(11, 2.0), (12, 1.0)]), (2, vec![(21, 3.0)])]),
        };
        let r = retrieve_items(7, &ranked(&[1, 2]), 2, &index, 3);
        let ids: Vec<u64> = r.items.iter().map(|i| i.item_id).collect();
        assert_eq!(ids, vec![11, 21, 12]);
        let r = retrieve_items(7, &ranked(&[1, 2]), 1, &index, 10);
        let ids: Vec<u64> = r.items.iter().map(|i| i.item_id).collect();
        assert_eq!(ids, vec![11, 12]);
    }

    #[test]
    fn empty_triggers_are_not_replaced() {
        let index = CategoryIndex {
            n: 10,
            lists: BTreeMap::from([(2, vec![(21, 3.0)])]),
        };
        let r = retrieve_items(7, &ranked(&[1, 3, 2]), 2, &index, 10);
        assert!(r.items.is_empty());
    }

    #[test]
    fn index_round_trip_and_truncation() {
        let index = CategoryIndex {
            n: 3,
            lists: BTreeMap::from([(1, vec![(11, 2.5), (12, 1.25)]), (4, vec![])]),
        };
        let mut buf = Vec::new();
        index.write(&mut buf).unwrap();
        assert_eq!(CategoryIndex::read(buf.as_slice()).unwrap(), index);
        buf.truncate(buf.len() - 2);
        assert!(matches!(
            CategoryIndex::read(buf.as_slice()),
            Err(Error::SizeMismatch(_))
        ));
    }

    #[test]
    fn recommendation_lines() {
        let r = Recommendation {
            user_id: 3,
            k: 1,
            items: vec![RecommendedItem {
                item_id: 8,
                category_id: 2,
                score: 0.5,
                category_rank: 1,
            }],
        };
        let mut buf = Vec::new();
        write_recommendations(&[r], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "3\t1\t8\t2\t0.5\n");
    }

    #[test]
    fn recommendations_round_trip() {
        let item = |i, c, s| RecommendedItem {
            item_id: i,
            category_id: c,
            score: s,
            category_rank: 0,
        };
        let recs = vec![
            Recommendation {
                user_id: 1,
                k: 2,
                items: vec![item(10, 1, 0.25), item(20, 2, 1.0 / 3.0)],
            },
            Recommendation {
                user_id: 4,
                k: 2,
                items: vec![item(11, 1, 7.5)],
            },
        ];
        let mut buf = Vec::new();
        write_recommendations(&recs, &mut buf).unwrap();
        assert_eq!(read_recommendations(&buf[..], 2).unwrap(), recs);
    }
}
