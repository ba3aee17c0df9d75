//! Losses, exact gradients, Adam and the epoch loop with validation-driven
//! model selection.

mod adam;
mod backward;
mod loss;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use backward::{backward, batch_loss, prepare_samples, LossParts, PreparedSample};
pub use loss::{
    combined_loss, count_sign, sampled_ce, sampled_ce_loss, softmax_probs, triplet, triplet_loss, CeOutput, TiePolicy,
    TripletOutput,
};

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::evaluate_model;
use crate::features::FeatureContext;
use crate::model::{HyperParams, ModelParams, Vocab};
use crate::samples::EvalSample;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub n_neg: usize,
    pub n_nei: usize,
    pub margin: f64,
    pub lambda: f64,
    pub max_epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub tie_policy: TiePolicy,
    pub logq_correction: bool,
    /// Cutoff of the validation hit ratio used for model selection.
    pub select_k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 100,
            learning_rate: 0.001,
            n_neg: 500,
            n_nei: 5,
            margin: 0.4,
            lambda: 1.0,
            max_epochs: 5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 42,
            tie_policy: TiePolicy::Literal,
            logq_correction: false,
            select_k: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.learning_rate > 0.0) || !(self.epsilon > 0.0) {
            return bad("learning_rate and epsilon must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(self.margin >= 0.0) || !(self.lambda >= 0.0) {
            return bad("margin and lambda must be >= 0");
        }
        if self.select_k == 0 {
            return bad("select_k must be >= 1");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_ce: f64,
    pub mean_triplet: f64,
    pub mean_loss: f64,
    /// `None` when the validation set has no sample of that task.
    pub valid_hr_u: Option<f64>,
    pub valid_hr_n: Option<f64>,
    pub valid_hr_all: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainStatus {
    Completed,
    /// A non-finite loss or gradient stopped training; the returned parameters
    /// are the last good ones.
    Diverged {
        epoch: usize,
        batch: usize,
    },
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// Epoch (1-based) whose parameters were kept; 0 means the initial ones.
    pub best_epoch: usize,
    pub epochs: Vec<EpochMetrics>,
    pub status: TrainStatus,
    pub first_batch: LossParts,
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ epoch as u64)
}

/// Trains from a seeded initialization.
pub fn train(
    samples: &[PreparedSample],
    valid: &[EvalSample],
    ctx: &FeatureContext<'_>,
    hparams: HyperParams,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let vocab = Vocab::new(ctx.catalog.num_items(), ctx.catalog.num_categories());
    let params = ModelParams::init(hparams, vocab, cfg.seed)?;
    train_from(params, samples, valid, ctx, cfg)
}

/// Trains starting from `params`.
///
/// Samples are reshuffled every epoch; after each epoch the pooled validation
/// HR@`select_k` decides whether the parameters become the new best. With an
/// empty validation set the last epoch wins.
pub fn train_from(
    mut params: ModelParams,
    samples: &[PreparedSample],
    valid: &[EvalSample],
    ctx: &FeatureContext<'_>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::NoSamples);
    }
    let adam = cfg.adam();
    let mut state = AdamState::new(&params);
    let mut best = params.clone();
    let mut best_hr: Option<f64> = None;
    let mut best_epoch = 0;
    let mut epochs = Vec::new();
    let mut first_batch = None;
    let mut order: Vec<usize> = (0..samples.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut epoch_rng(cfg.seed, epoch));
        let (mut ce, mut tr, mut total) = (0.0, 0.0, 0.0);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<PreparedSample> = chunk.iter().map(|&i| samples[i].clone()).collect();
            let step = backward(&batch, &params, cfg);
            let (loss, grads) = match step {
                Ok(r) if r.0.total.is_finite() => r,
                Ok(_) | Err(Error::NonFinite(_)) => {
                    log::error!("training diverged at epoch {epoch} batch {b}");
                    return Ok(TrainOutcome {
                        params: best,
                        best_epoch,
                        epochs,
                        status: TrainStatus::Diverged { epoch, batch: b },
                        first_batch: first_batch.unwrap_or_default(),
                    });
                }
                Err(e) => return Err(e),
            };
            first_batch.get_or_insert(loss);
            let w = chunk.len() as f64;
            ce += loss.ce * w;
            tr += loss.triplet * w;
            total += loss.total * w;
            state.apply(&mut params, &grads, &adam);
        }
        let n = samples.len() as f64;
        let report = evaluate_model(&params, valid, ctx, &[cfg.select_k])?;
        let metrics = EpochMetrics {
            epoch,
            mean_ce: ce / n,
            mean_triplet: tr / n,
            mean_loss: total / n,
            valid_hr_u: report.u.hr(cfg.select_k),
            valid_hr_n: report.n.hr(cfg.select_k),
            valid_hr_all: report.all.hr(cfg.select_k),
        };
        log::info!(
            "epoch {epoch}: loss={:.5} ce={:.5} triplet={:.5} valid HR@{}={:?}",
            metrics.mean_loss,
            metrics.mean_ce,
            metrics.mean_triplet,
            cfg.select_k,
            metrics.valid_hr_all
        );
        let improved = match (metrics.valid_hr_all, best_hr) {
            (Some(hr), Some(b)) => hr > b,
            (Some(_), None) => true,
            (None, _) => true,
        };
        if improved {
            best = params.clone();
            best_hr = metrics.valid_hr_all.or(best_hr);
            best_epoch = epoch;
        }
        epochs.push(metrics);
    }
    Ok(TrainOutcome {
        params: best,
        best_epoch,
        epochs,
        status: TrainStatus::Completed,
        first_batch: first_batch.unwrap_or_default(),
    })
}

fn opt(v: Option<f64>) -> serde_json::Value {
    v.map_or(serde_json::Value::Null, serde_json::Value::from)
}

/// One JSON object per line with keys
/// `epoch, mean_ce, mean_triplet, mean_loss, valid_hr_u, valid_hr_n, valid_hr_all`.
pub fn write_epoch_metrics<W: Write>(epochs: &[EpochMetrics], mut w: W) -> std::io::Result<()> {
    for m in epochs {
        let line = serde_json::json!({
            "epoch": m.epoch,
            "mean_ce": m.mean_ce,
            "mean_triplet": m.mean_triplet,
            "mean_loss": m.mean_loss,
            "valid_hr_u": opt(m.valid_hr_u),
            "valid_hr_n": opt(m.valid_hr_n),
            "valid_hr_all": opt(m.valid_hr_all),
        });
        writeln!(w, "{line}")?;
    }
    Ok(())
}
