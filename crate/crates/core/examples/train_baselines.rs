//! Trains a linear classifier on a long-tailed task with plain, reweighted
//! and logit-adjusted cross-entropy and prints held-out class errors.

use imbalance_lab::losses::LossSpec;
use imbalance_lab::taskgen::generate;
use imbalance_lab::trainer::{train, TrainConfig};
use imbalance_lab::{GaussianTaskSpec, Purpose, RngStream};

fn main() -> imbalance_lab::Result<()> {
    let task = |ratio| GaussianTaskSpec::LongTailMulticlass {
        c: 5,
        d: 5,
        imbalance_ratio: ratio,
        separation: 2.0,
        sigma: 1.0,
        sigma_scale: None,
    };
    let ds = generate(
        &task(50.0),
        3000,
        &mut RngStream::with_index(0, Purpose::TaskGen, 0),
    )?;
    let test = generate(
        &task(1.0),
        2000,
        &mut RngStream::with_index(0, Purpose::TaskGen, 1),
    )?;
    for loss in [
        LossSpec::CrossEntropy,
        LossSpec::Reweighted,
        LossSpec::LogitAdjusted { lambda: 1.0 },
    ] {
        let mut cfg = TrainConfig::new(20, 0);
        cfg.lr = 0.05;
        cfg.milestones = vec![15];
        cfg.loss = loss.clone();
        let (_, report) = train(&ds, Some(&test), &cfg)?;
        println!(
            "{loss:?}: errors {:.3?} gap {:.3}",
            report.final_errors(),
            report.final_gap()
        );
    }
    Ok(())
}
