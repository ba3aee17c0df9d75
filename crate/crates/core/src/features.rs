//! Maps ids and histories onto embedding-table rows.

use crate::error::{Error, Result};
use crate::ingest::Catalog;
use crate::model::{CandidateFeatures, UserFeatures};
use crate::samples::{
    count_bucket, crossing_features, history_categories, recency_bucket, recency_map, CrossingTokens,
    UserCategoryGraph, UNKNOWN_PROFILE,
};

#[derive(Debug, Clone, Copy)]
pub struct FeatureContext<'a> {
    pub catalog: &'a Catalog,
    pub graph: &'a UserCategoryGraph,
}

impl<'a> FeatureContext<'a> {
    pub fn new(catalog: &'a Catalog, graph: &'a UserCategoryGraph) -> Self {
        FeatureContext { catalog, graph }
    }

    pub fn user(&self, history: &[u64]) -> Result<UserFeatures> {
        let rows = history
            .iter()
            .map(|&i| {
                self.catalog
                    .item_index(i)
                    .ok_or(Error::UnknownId { kind: "item", id: i })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(UserFeatures {
            history: rows,
            profile: UNKNOWN_PROFILE,
        })
    }

    pub fn category_row(&self, category: u64) -> Result<usize> {
        self.catalog.category_index(category).ok_or(Error::UnknownId {
            kind: "category",
            id: category,
        })
    }

    pub fn candidate(&self, user: u64, category: u64, history_cats: &[u64]) -> Result<CandidateFeatures> {
        let tokens = crossing_features(user, category, self.graph, history_cats);
        Ok(CandidateFeatures {
            category: self.category_row(category)?,
            crossing: tokens.rows(),
        })
    }

    pub fn candidate_from_tokens(&self, category: u64, tokens: CrossingTokens) -> Result<CandidateFeatures> {
        Ok(CandidateFeatures {
            category: self.category_row(category)?,
            crossing: tokens.rows(),
        })
    }

    /// Candidates for every catalog category, in catalog order.
    pub fn all_candidates(&self, user: u64, history: &[u64]) -> Vec<CandidateFeatures> {
        let cats = history_categories(history, self.catalog);
        let recency = recency_map(&cats);
        self.catalog
            .categories()
            .iter()
            .enumerate()
            .map(|(row, &c)| {
                let tokens = CrossingTokens {
                    count: count_bucket(self.graph.count(user, c)),
                    recency: recency_bucket(recency.get(&c).copied()),
                };
                CandidateFeatures {
                    category: row,
                    crossing: tokens.rows(),
                }
            })
            .collect()
    }
}
