//! Trains on the cyclic synthetic log and prints test hit ratios.
//! Usage: cargo run --release --example cyclic -- [max_history] [per_user] [epochs]
//! Set `TIES=skip` to ignore tied neighbor counts, `LAMBDA=<x>` to reweight the triplet term.

use std::time::Instant;

use ccdf::eval::evaluate_model;
use ccdf::ingest::{parse_str, ParseLimits, Split};
use ccdf::model::HyperParams;
use ccdf::samples::{NegativePool, SampleConfig};
use ccdf::synth::{cyclic_dataset, to_csv, CyclicConfig};
use ccdf::train::{prepare_samples, train, TiePolicy, TrainConfig};
use ccdf::Dataset;

fn main() -> ccdf::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse().expect("integer")).collect();
    let t = args.first().copied().unwrap_or(5);
    let per_user = args.get(1).copied().unwrap_or(40);
    let epochs = args.get(2).copied().unwrap_or(5);
    let start = Instant::now();
    let (events, spec) = cyclic_dataset(&CyclicConfig::default());
    let ds = Dataset::from_parsed(parse_str(&to_csv(&events), ParseLimits::default())?, spec)?;
    let scfg = SampleConfig {
        max_history: t,
        per_user,
        negative_pool: NegativePool::AllExceptTarget,
        ..SampleConfig::default()
    };
    let samples = ds.training_samples(&scfg)?;
    let ctx = ds.context();
    let prepared = prepare_samples(&samples, &ctx, false)?;
    let valid = ds.eval_samples(Split::Valid, t)?;
    let test = ds.eval_samples(Split::Test, t)?;
    let hp = HyperParams {
        max_history: t,
        ..HyperParams::default()
    };
    let policy = std::env::var("TIES").unwrap_or_default();
    let lambda: f64 = std::env::var("LAMBDA").ok().map_or(1.0, |v| v.parse().unwrap());
    let tie_policy = if policy == "skip" {
        TiePolicy::SkipTies
    } else {
        TiePolicy::Literal
    };
    let cfg = TrainConfig {
        max_epochs: epochs,
        select_k: 1,
        tie_policy,
        lambda,
        ..TrainConfig::default()
    };
    let out = train(&prepared, &valid, &ctx, hp, &cfg)?;
    for e in &out.epochs {
        println!(
            "epoch {} loss {:.4} valid HR@1 {:?}",
            e.epoch, e.mean_loss, e.valid_hr_all
        );
    }
    let rep = evaluate_model(&out.params, &test, &ctx, &[1, 5])?;
    println!(
        "samples {} test {} HR@1 {:?} ({:.1}s)",
        samples.len(),
        test.len(),
        rep.all.hr(1),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
