mod common;

use ccdf::train::{backward, batch_loss, sampled_ce, TiePolicy, TrainConfig};
use common::*;

fn cfg(lambda: f64) -> TrainConfig {
    TrainConfig {
        lambda,
        margin: 0.4,
        ..TrainConfig::default()
    }
}

#[test]
fn every_parameter_matches_central_differences() {
    for seed in [1, 2] {
        let params = tiny_params(seed);
        let batch = tiny_batch(seed + 100, 3);
        let cfg = cfg(1.0);
        let (_, grads) = backward(&batch, &params, &cfg).unwrap();
        let dense = grads.to_dense(&params);
        let res = finite_difference_check(&batch, &params, &cfg, &dense, 1e-5, 1e-4, 1e-7);
        assert!(res.failures.is_empty(), "seed {seed}: {:#?}", res.failures);
        assert_eq!(res.checked, params.num_parameters());
    }
}

#[test]
fn skip_ties_variant_matches_central_differences() {
    let params = tiny_params(5);
    let mut batch = tiny_batch(9, 3);
    for s in &mut batch {
        s.neighbors[0].1 = s.target_count;
    }
    let cfg = TrainConfig {
        tie_policy: TiePolicy::SkipTies,
        ..cfg(1.5)
    };
    let (_, grads) = backward(&batch, &params, &cfg).unwrap();
    let res = finite_difference_check(&batch, &params, &cfg, &grads.to_dense(&params), 1e-5, 1e-4, 1e-7);
    assert!(res.failures.is_empty(), "{:#?}", res.failures);
}

#[test]
fn wide_bias_gradient_is_softmax_residual_mean() {
    let mut params = tiny_params(3);
    params.wide_w.fill(0.0);
    params.wide_b[0] = 0.7;
    let batch = tiny_batch(4, 5);
    let cfg = cfg(0.0);
    let (_, grads) = backward(&batch, &params, &cfg).unwrap();
    // all scores equal b, so the residual of each sample sums to zero
    let mut expected = 0.0;
    for s in &batch {
        let ce = sampled_ce(0.7, &vec![0.7; s.negatives.len()]).unwrap();
        expected += ce.d_target + ce.d_negatives.iter().sum::<f64>();
    }
    expected /= batch.len() as f64;
    let h = 1e-5;
    let mut p = params.clone();
    p.wide_b[0] += h;
    let up = batch_loss(&batch, &p, &cfg).unwrap().total;
    p.wide_b[0] -= 2.0 * h;
    let down = batch_loss(&batch, &p, &cfg).unwrap().total;
    let numeric = (up - down) / (2.0 * h);
    assert!((grads.wide_b[0] - expected).abs() < 1e-12);
    assert!((grads.wide_b[0] - numeric).abs() < 1e-7);
}

#[test]
fn untouched_rows_have_no_gradient() {
    let params = tiny_params(6);
    let batch = tiny_batch(7, 4);
    let (_, grads) = backward(&batch, &params, &cfg(1.0)).unwrap();
    assert!(!grads.item_emb.rows.contains_key(&11));
    assert!(!grads.cat_emb.rows.contains_key(&6));
    let dense = grads.to_dense(&params);
    let item = &dense[0].1;
    assert!(item[11 * 8..12 * 8].iter().all(|&g| g == 0.0));
}

#[test]
fn backward_loss_equals_forward_loss() {
    let params = tiny_params(8);
    let batch = tiny_batch(8, 6);
    let cfg = cfg(1.0);
    let (a, _) = backward(&batch, &params, &cfg).unwrap();
    let b = batch_loss(&batch, &params, &cfg).unwrap();
    assert!((a.total - b.total).abs() < 1e-12);
    assert!((a.ce - b.ce).abs() < 1e-12);
    assert!((a.triplet - b.triplet).abs() < 1e-12);
}
