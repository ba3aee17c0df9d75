//! Deterministic synthetic interaction logs.

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ingest::{Behavior, Interaction, SplitSpec};

/// 2017-11-25 00:00:00 UTC+8, the first day of the public UserBehavior log.
pub const LOG_START: i64 = 1_511_539_200;
pub const DAY: i64 = 86_400;

/// Boundaries putting day `days-2` in validation and day `days-1` in test.
pub fn daily_split(days: i64) -> SplitSpec {
    SplitSpec::new(
        LOG_START + (days - 2) * DAY,
        LOG_START + (days - 1) * DAY,
        LOG_START + days * DAY,
    )
    .expect("days >= 3")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CyclicConfig {
    pub users: usize,
    pub events_per_user: usize,
    pub categories: usize,
    pub items_per_category: usize,
    /// Events that fall on the validation day and on the test day.
    pub valid_events: usize,
    pub test_events: usize,
    pub seed: u64,
}

impl Default for CyclicConfig {
    fn default() -> Self {
        CyclicConfig {
            users: 500,
            events_per_user: 50,
            categories: 10,
            items_per_category: 5,
            valid_events: 5,
            test_events: 5,
            seed: 7,
        }
    }
}

/// Every user walks the categories in order: the category at step k is
/// `(category at k−1 + 1) mod categories`, starting from a random category.
/// Items are drawn uniformly within the category. Returns the log and the
/// split placing the last events on the validation and test days.
pub fn cyclic_dataset(cfg: &CyclicConfig) -> (Vec<Interaction>, SplitSpec) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.events_per_user;
    let train_events = n - cfg.valid_events - cfg.test_events;
    let mut out = Vec::with_capacity(cfg.users * n);
    for u in 0..cfg.users {
        let mut cat = rng.random_range(0..cfg.categories);
        for k in 0..n {
            let day = if k < train_events {
                0
            } else if k < train_events + cfg.valid_events {
                1
            } else {
                2
            };
            let item = cat * cfg.items_per_category + rng.random_range(0..cfg.items_per_category);
            out.push(Interaction {
                user_id: u as u64 + 1,
                item_id: item as u64 + 1,
                category_id: cat as u64 + 1,
                behavior: Behavior::View,
                timestamp: LOG_START + day * DAY + 60 * k as i64 + 1,
            });
            cat = (cat + 1) % cfg.categories;
        }
    }
    (out, daily_split(3))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShopConfig {
    pub users: usize,
    pub groups: usize,
    pub categories_per_group: usize,
    pub items_per_category: usize,
    pub days: i64,
    pub min_events: usize,
    pub max_events: usize,
    /// Probability that the next event revisits a recently used category.
    pub revisit: f64,
    pub seed: u64,
}

impl Default for ShopConfig {
    fn default() -> Self {
        ShopConfig {
            users: 1000,
            groups: 12,
            categories_per_group: 8,
            items_per_category: 40,
            days: 9,
            min_events: 20,
            max_events: 60,
            revisit: 0.6,
            seed: 2017,
        }
    }
}

/// Shopping-style log in the UserBehavior format.
///
/// Categories are clustered into interest groups; each user prefers two groups
/// and drifts between their categories, so categories new to a user are still
/// predictable from the group structure. Item popularity is Zipf-like within a
/// category and each item has its own conversion propensity.
pub fn shop_dataset(cfg: &ShopConfig) -> Vec<Interaction> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_cats = cfg.groups * cfg.categories_per_group;
    let cat_id = |c: usize| 1_000 + 37 * c as u64;
    let item_id = |c: usize, i: usize| 100_000 + (c * cfg.items_per_category + i) as u64 * 13;
    let popularity = WeightedIndex::new((0..cfg.items_per_category).map(|i| 1.0 / (i as f64 + 1.0))).expect("weights");
    let propensity: Vec<f64> = (0..n_cats * cfg.items_per_category)
        .map(|_| rng.random_range(0.2..1.8))
        .collect();

    let mut out = Vec::new();
    for u in 0..cfg.users {
        let g1 = rng.random_range(0..cfg.groups);
        let g2 = (g1 + rng.random_range(1..cfg.groups)) % cfg.groups;
        let events = rng.random_range(cfg.min_events..=cfg.max_events);
        let mut times: Vec<i64> = (0..events)
            .map(|_| LOG_START + rng.random_range(0..cfg.days * DAY))
            .collect();
        times.sort_unstable();
        let mut recent: Vec<usize> = Vec::new();
        for t in times {
            let cat = if !recent.is_empty() && rng.random_bool(cfg.revisit) {
                recent[rng.random_range(0..recent.len())]
            } else {
                let g = if rng.random_bool(0.7) { g1 } else { g2 };
                g * cfg.categories_per_group + rng.random_range(0..cfg.categories_per_group)
            };
            recent.push(cat);
            if recent.len() > 5 {
                recent.remove(0);
            }
            let i = popularity.sample(&mut rng);
            let p = propensity[cat * cfg.items_per_category + i];
            let roll: f64 = rng.random();
            let behavior = if roll < 0.02 * p {
                Behavior::Purchase
            } else if roll < 0.05 * p {
                Behavior::Cart
            } else if roll < 0.08 * p {
                Behavior::Favorite
            } else {
                Behavior::View
            };
            out.push(Interaction {
                user_id: u as u64 + 1,
                item_id: item_id(cat, i),
                category_id: cat_id(cat),
                behavior,
                timestamp: t,
            });
        }
    }
    out
}

/// Renders interactions as UserBehavior CSV rows.
pub fn to_csv(events: &[Interaction]) -> String {
    let mut s = String::with_capacity(events.len() * 32);
    for e in events {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            e.user_id,
            e.item_id,
            e.category_id,
            e.behavior.code(),
            e.timestamp
        ));
    }
    s
}
