//! Sampled-softmax cross entropy, count-ordered triplet loss and their sum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cross entropy of the target against sampled negatives, with its gradient
/// with respect to every logit.
#[derive(Debug, Clone, PartialEq)]
pub struct CeOutput {
    pub loss: f64,
    pub d_target: f64,
    pub d_negatives: Vec<f64>,
}

/// Softmax over `[target, negatives...]`.
pub fn softmax_probs(target: f64, negatives: &[f64]) -> Vec<f64> {
    let max = negatives.iter().fold(target, |m, &v| m.max(v));
    let exps: Vec<f64> = std::iter::once(target)
        .chain(negatives.iter().copied())
        .map(|v| (v - max).exp())
        .collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn sampled_ce(target: f64, negatives: &[f64]) -> Result<CeOutput> {
    if negatives.is_empty() {
        return Err(Error::Config("sampled softmax needs at least one negative".into()));
    }
    if !target.is_finite() || negatives.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("score".into()));
    }
    let max = negatives.iter().fold(target, |m, &v| m.max(v));
    let sum: f64 = (target - max).exp() + negatives.iter().map(|v| (v - max).exp()).sum::<f64>();
    let log_z = max + sum.ln();
    let loss = log_z - target;
    let d_negatives = negatives.iter().map(|v| (v - log_z).exp()).collect();
    Ok(CeOutput {
        loss,
        d_target: (target - log_z).exp() - 1.0,
        d_negatives,
    })
}

/// `−log(e^{f_t} / (e^{f_t} + Σ_j e^{f_j}))`.
pub fn sampled_ce_loss(target: f64, negatives: &[f64]) -> Result<f64> {
    sampled_ce(target, negatives).map(|o| o.loss)
}

/// How equal interaction counts are treated in the triplet loss.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum TiePolicy {
    /// `sign(0) = −1`: a tie pushes the neighbor above the target by the margin.
    #[default]
    Literal,
    /// Tied pairs are left out of the sum and the average.
    SkipTies,
}

/// `sign(s) = 1` for `s > 0`, otherwise `−1`.
pub fn count_sign(s_target: u32, s_neighbor: u32) -> f64 {
    if s_target > s_neighbor {
        1.0
    } else {
        -1.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletOutput {
    pub loss: f64,
    pub d_target: f64,
    pub d_neighbors: Vec<f64>,
}

/// Mean over neighbors of `max(sign(s_t − s_j)·(f_j − f_t) + m, 0)`.
/// `neighbors` holds `(f(u, c_j), s_uc_j)`; no neighbors gives zero.
pub fn triplet(target: f64, neighbors: &[(f64, u32)], s_target: u32, margin: f64, ties: TiePolicy) -> TripletOutput {
    let used: Vec<bool> = neighbors
        .iter()
        .map(|&(_, s)| !(ties == TiePolicy::SkipTies && s == s_target))
        .collect();
    let n = used.iter().filter(|&&u| u).count();
    let mut out = TripletOutput {
        loss: 0.0,
        d_target: 0.0,
        d_neighbors: vec![0.0; neighbors.len()],
    };
    if n == 0 {
        return out;
    }
    let inv = 1.0 / n as f64;
    for (j, (&(f_j, s_j), &keep)) in neighbors.iter().zip(&used).enumerate() {
        if !keep {
            continue;
        }
        let sign = count_sign(s_target, s_j);
        let hinge = sign * (f_j - target) + margin;
        if hinge > 0.0 {
            out.loss += hinge * inv;
            out.d_neighbors[j] = sign * inv;
            out.d_target -= sign * inv;
        }
    }
    out
}

pub fn triplet_loss(target: f64, neighbors: &[(f64, u32)], s_target: u32, margin: f64) -> f64 {
    triplet(target, neighbors, s_target, margin, TiePolicy::Literal).loss
}

/// `L = L_c + λ·L_t`.
pub fn combined_loss(ce: f64, triplet: f64, lambda: f64) -> f64 {
    ce + lambda * triplet
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_logits_one_negative() {
        let l = sampled_ce_loss(0.3, &[0.3]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn dominant_target_has_vanishing_loss() {
        let l = sampled_ce_loss(800.0, &[0.0, 1.0]).unwrap();
        assert!((0.0..1e-300).contains(&l));
    }

    #[test]
    fn stable_for_large_logits() {
        let l = sampled_ce_loss(1000.0, &[1000.0]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn ce_rejects_bad_input() {
        assert!(sampled_ce_loss(0.0, &[]).is_err());
        assert!(matches!(sampled_ce_loss(f64::NAN, &[0.0]), Err(Error::NonFinite(_))));
    }

    #[test]
    fn ce_gradient_is_softmax_residual() {
        let o = sampled_ce(0.2, &[0.5, -1.0]).unwrap();
        let p = softmax_probs(0.2, &[0.5, -1.0]);
        assert!((o.d_target - (p[0] - 1.0)).abs() < 1e-15);
        assert!((o.d_negatives[0] - p[1]).abs() < 1e-15);
        let total: f64 = o.d_target + o.d_negatives.iter().sum::<f64>();
        assert!(total.abs() < 1e-15);
    }

    #[test]
    fn triplet_arithmetic() {
        assert!((triplet_loss(0.5, &[(0.3, 1)], 2, 0.4) - 0.2).abs() < 1e-15);
        assert_eq!(triplet_loss(0.5, &[(0.3, 1)], 2, 0.1), 0.0);
        assert_eq!(triplet_loss(0.5, &[], 2, 0.4), 0.0);
    }

    #[test]
    fn tie_sign_is_negative() {
        assert_eq!(count_sign(3, 3), -1.0);
        assert_eq!(count_sign(2, 3), -1.0);
        assert_eq!(count_sign(4, 3), 1.0);
        // a tie asks the neighbor to beat the target: f_t − f_j + m
        let l = triplet_loss(0.5, &[(0.3, 2)], 2, 0.4);
        assert!((l - 0.6).abs() < 1e-15);
        let skip = triplet(0.5, &[(0.3, 2)], 2, 0.4, TiePolicy::SkipTies);
        assert_eq!(skip.loss, 0.0);
    }

    #[test]
    fn combined() {
        assert_eq!(combined_loss(0.7, 0.2, 0.0), 0.7);
        assert!((combined_loss(0.7, 0.2, 1.0) - 0.9).abs() < 1e-15);
    }
}
