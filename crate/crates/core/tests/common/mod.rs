#![allow(dead_code)]

use ccdf::model::{CandidateFeatures, HyperParams, ModelParams, UserFeatures, Vocab};
use ccdf::train::{batch_loss, PreparedSample, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// T=4, d_model=8, H=2, d=4.
pub fn tiny_hparams() -> HyperParams {
    HyperParams {
        max_history: 4,
        d_model: 8,
        d_cat: 5,
        d_cross: 3,
        d_prof: 2,
        heads: 2,
        d_head: 4,
        d_match: 4,
        ffn_hidden: 6,
    }
}

/// Initialized parameters with non-zero biases so that no ReLU sits on its kink.
pub fn tiny_params(seed: u64) -> ModelParams {
    let mut p = ModelParams::init(tiny_hparams(), Vocab::new(12, 7), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB1A5);
    for b in [&mut p.b1, &mut p.b2, &mut p.b3, &mut p.b4] {
        b.mapv_inplace(|_| rng.random_range(0.05..0.3));
    }
    p.wide_b[0] = 0.1;
    p
}

fn cand(rng: &mut ChaCha8Rng, category: usize) -> CandidateFeatures {
    CandidateFeatures {
        category,
        crossing: [rng.random_range(0..6), 6 + rng.random_range(0..5)],
    }
}

/// Batch of samples with 3 negatives and 2 neighbors each.
pub fn tiny_batch(seed: u64, n: usize) -> Vec<PreparedSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let len = rng.random_range(1..=4);
            // item 11 and category 6 never appear
            let history = (0..len).map(|_| rng.random_range(0..11)).collect();
            let mut cats: Vec<usize> = (0..6).collect();
            for i in (1..cats.len()).rev() {
                cats.swap(i, rng.random_range(0..=i));
            }
            PreparedSample {
                user: UserFeatures { history, profile: 0 },
                target: cand(&mut rng, cats[0]),
                target_count: rng.random_range(1..5),
                negatives: (1..4).map(|i| cand(&mut rng, cats[i])).collect(),
                neighbors: (4..6)
                    .map(|i| (cand(&mut rng, cats[i]), rng.random_range(1..5)))
                    .collect(),
                negative_offset: 0.0,
            }
        })
        .collect()
}

pub struct GradCheck {
    pub checked: usize,
    pub failures: Vec<String>,
    pub worst_rel: f64,
}

/// Central differences on every scalar of every tensor.
pub fn finite_difference_check(
    batch: &[PreparedSample],
    params: &ModelParams,
    cfg: &TrainConfig,
    analytic: &[(String, Vec<f64>)],
    step: f64,
    rel_tol: f64,
    abs_tol: f64,
) -> GradCheck {
    let mut out = GradCheck {
        checked: 0,
        failures: Vec::new(),
        worst_rel: 0.0,
    };
    let mut p = params.clone();
    let n_tensors = analytic.len();
    for t in 0..n_tensors {
        let (name, grad) = &analytic[t];
        for i in 0..grad.len() {
            let orig = p.tensors()[t].2[i];
            p.tensors_mut()[t].2[i] = orig + step;
            let up = batch_loss(batch, &p, cfg).unwrap().total;
            p.tensors_mut()[t].2[i] = orig - step;
            let down = batch_loss(batch, &p, cfg).unwrap().total;
            p.tensors_mut()[t].2[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = grad[i];
            let diff = (a - numeric).abs();
            let rel = diff / a.abs().max(numeric.abs()).max(f64::MIN_POSITIVE);
            out.checked += 1;
            if diff > abs_tol {
                out.worst_rel = out.worst_rel.max(rel);
                if rel > rel_tol {
                    out.failures
                        .push(format!("{name}[{i}]: analytic {a:e} numeric {numeric:e} rel {rel:e}"));
                }
            }
        }
    }
    out
}
