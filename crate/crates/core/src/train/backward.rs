//! Batch forward/backward over prepared training samples.

use std::collections::BTreeMap;

use ndarray::Array1;
use rayon::prelude::*;

use super::loss::{sampled_ce, triplet};
use super::TrainConfig;
use crate::error::{Error, Result};
use crate::features::FeatureContext;
use crate::model::{
    category_backward, category_forward, check_candidate, check_user, user_backward, user_forward, wide_backward,
    wide_score, CandidateFeatures, CategoryCache, Gradients, ModelParams, UserFeatures,
};
use crate::samples::{history_categories, TrainingSample};

/// A training sample resolved to embedding rows.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub user: UserFeatures,
    pub target: CandidateFeatures,
    pub target_count: u32,
    pub negatives: Vec<CandidateFeatures>,
    pub neighbors: Vec<(CandidateFeatures, u32)>,
    /// Added to every negative logit; `−ln(k/|pool|)` with the sampling
    /// correction enabled, otherwise 0.
    pub negative_offset: f64,
}

pub fn prepare_samples(
    samples: &[TrainingSample],
    ctx: &FeatureContext<'_>,
    logq_correction: bool,
) -> Result<Vec<PreparedSample>> {
    samples
        .iter()
        .map(|s| {
            let cats = history_categories(&s.history, ctx.catalog);
            let negatives = s
                .negatives
                .iter()
                .map(|&c| ctx.candidate(s.user_id, c, &cats))
                .collect::<Result<Vec<_>>>()?;
            let neighbors = s
                .neighbors
                .iter()
                .map(|&(c, n)| Ok((ctx.candidate(s.user_id, c, &cats)?, n)))
                .collect::<Result<Vec<_>>>()?;
            let negative_offset = if logq_correction {
                let interacted = ctx.graph.categories_of(s.user_id).map_or(0, |c| c.len());
                let pool = ctx.catalog.num_categories().saturating_sub(interacted).max(1);
                -(negatives.len() as f64 / pool as f64).ln()
            } else {
                0.0
            };
            Ok(PreparedSample {
                user: ctx.user(&s.history)?,
                target: ctx.candidate_from_tokens(s.target_category, s.crossing)?,
                target_count: s.target_count,
                negatives,
                neighbors,
                negative_offset,
            })
        })
        .collect()
}

/// Batch means of the loss terms.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub ce: f64,
    pub triplet: f64,
}

struct SampleGrad {
    ce: f64,
    triplet: f64,
    grads: Gradients,
    /// (slot of category cache, ∂L/∂e'_c)
    d_cats: Vec<(usize, Array1<f64>)>,
}

fn validate(batch: &[PreparedSample], params: &ModelParams) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::NoSamples);
    }
    for s in batch {
        check_user(&s.user, params)?;
        for c in std::iter::once(&s.target)
            .chain(&s.negatives)
            .chain(s.neighbors.iter().map(|(c, _)| c))
        {
            check_candidate(c, params)?;
        }
    }
    Ok(())
}

fn category_caches(batch: &[PreparedSample], params: &ModelParams) -> (BTreeMap<usize, usize>, Vec<CategoryCache>) {
    let mut slots = BTreeMap::new();
    for s in batch {
        for c in std::iter::once(&s.target)
            .chain(&s.negatives)
            .chain(s.neighbors.iter().map(|(c, _)| c))
        {
            let next = slots.len();
            slots.entry(c.category).or_insert(next);
        }
    }
    let mut rows: Vec<(usize, usize)> = slots.iter().map(|(&r, &s)| (s, r)).collect();
    rows.sort_unstable();
    let caches = rows.par_iter().map(|&(_, row)| category_forward(row, params)).collect();
    (slots, caches)
}

fn sample_grad(
    s: &PreparedSample,
    params: &ModelParams,
    slots: &BTreeMap<usize, usize>,
    caches: &[CategoryCache],
    cfg: &TrainConfig,
    scale: f64,
) -> Result<SampleGrad> {
    let user = user_forward(&s.user, params);
    let e_u = user.e_u.view();
    let slot = |c: &CandidateFeatures| slots[&c.category];
    let score = |c: &CandidateFeatures| wide_score(e_u, caches[slot(c)].out.view(), c.crossing, params);

    let f_t = score(&s.target);
    let f_neg: Vec<f64> = s.negatives.iter().map(|c| score(c) + s.negative_offset).collect();
    let f_nei: Vec<(f64, u32)> = s.neighbors.iter().map(|(c, n)| (score(c), *n)).collect();
    let ce = sampled_ce(f_t, &f_neg)?;
    let tr = triplet(f_t, &f_nei, s.target_count, cfg.margin, cfg.tie_policy);

    let mut grads = Gradients::zeros(params);
    let mut d_e_u = Array1::zeros(params.hparams.d_match);
    let mut d_cats = Vec::new();
    let mut push = |c: &CandidateFeatures, g: f64, grads: &mut Gradients| {
        if g == 0.0 {
            return;
        }
        let cache = &caches[slot(c)];
        let (du, dc) = wide_backward(g * scale, e_u, cache.out.view(), c.crossing, params, grads);
        d_e_u += &du;
        d_cats.push((slot(c), dc));
    };
    push(&s.target, ce.d_target + cfg.lambda * tr.d_target, &mut grads);
    for (c, g) in s.negatives.iter().zip(&ce.d_negatives) {
        push(c, *g, &mut grads);
    }
    for ((c, _), g) in s.neighbors.iter().zip(&tr.d_neighbors) {
        push(c, cfg.lambda * g, &mut grads);
    }
    user_backward(&s.user, &user, &d_e_u, params, &mut grads);
    Ok(SampleGrad {
        ce: ce.loss,
        triplet: tr.loss,
        grads,
        d_cats,
    })
}

/// Mean batch loss and its exact gradient with respect to every parameter.
///
/// Samples run in parallel; their contributions are summed in sample order so
/// the result does not depend on the thread count.
pub fn backward(batch: &[PreparedSample], params: &ModelParams, cfg: &TrainConfig) -> Result<(LossParts, Gradients)> {
    validate(batch, params)?;
    let scale = 1.0 / batch.len() as f64;
    let (slots, caches) = category_caches(batch, params);
    let per_sample: Vec<Result<SampleGrad>> = batch
        .par_iter()
        .map(|s| sample_grad(s, params, &slots, &caches, cfg, scale))
        .collect();

    let mut grads = Gradients::zeros(params);
    let mut d_cats: Vec<Array1<f64>> = vec![Array1::zeros(params.hparams.d_match); caches.len()];
    let (mut ce, mut tr) = (0.0, 0.0);
    for sg in per_sample {
        let sg = sg?;
        ce += sg.ce;
        tr += sg.triplet;
        grads.add_assign(&sg.grads);
        for (slot, d) in sg.d_cats {
            d_cats[slot] += &d;
        }
    }
    for (cache, d) in caches.iter().zip(&d_cats) {
        category_backward(cache, d, params, &mut grads);
    }
    if let Some(name) = grads.first_non_finite(params) {
        return Err(Error::NonFinite(format!("gradient of {name}")));
    }
    let (ce, tr) = (ce * scale, tr * scale);
    Ok((
        LossParts {
            total: ce + cfg.lambda * tr,
            ce,
            triplet: tr,
        },
        grads,
    ))
}

/// Forward-only mean batch loss, sharing no code path with [`backward`]'s
/// gradient bookkeeping.
pub fn batch_loss(batch: &[PreparedSample], params: &ModelParams, cfg: &TrainConfig) -> Result<LossParts> {
    validate(batch, params)?;
    let (mut ce, mut tr) = (0.0, 0.0);
    for s in batch {
        let e_u = user_forward(&s.user, params).e_u;
        let score = |c: &CandidateFeatures| {
            let e_c = category_forward(c.category, params).out;
            wide_score(e_u.view(), e_c.view(), c.crossing, params)
        };
        let f_t = score(&s.target);
        let f_neg: Vec<f64> = s.negatives.iter().map(|c| score(c) + s.negative_offset).collect();
        let f_nei: Vec<(f64, u32)> = s.neighbors.iter().map(|(c, n)| (score(c), *n)).collect();
        ce += sampled_ce(f_t, &f_neg)?.loss;
        tr += triplet(f_t, &f_nei, s.target_count, cfg.margin, cfg.tie_policy).loss;
    }
    let n = batch.len() as f64;
    Ok(LossParts {
        total: (ce + cfg.lambda * tr) / n,
        ce: ce / n,
        triplet: tr / n,
    })
}
