//! The perturbation family on one fixed classifier: fixed logit adjustment,
//! the unnormalised and normalised variance terms, the distance term and the
//! combined form, with the loss each gives for one sample per class.

use imbalance_lab::losses::{la_delta, perturbed_ce, PerturbationContext, PerturbationParams};
use imbalance_lab::taskgen::true_stats;
use imbalance_lab::{DenseMatrix, GaussianTaskSpec};

fn main() -> imbalance_lab::Result<()> {
    let spec = GaussianTaskSpec::LongTailMulticlass {
        c: 3,
        d: 3,
        imbalance_ratio: 10.0,
        separation: 2.0,
        sigma: 1.0,
        sigma_scale: Some(vec![1.0, 1.5, 2.5]),
    };
    let stats = true_stats(&spec)?;
    let priors: Vec<f64> = stats.iter().map(|s| s.proportion).collect();
    let w = DenseMatrix::from_rows(&[
        vec![1.0, 0.0, 0.0],
        vec![0.0, 0.8, 0.0],
        vec![0.0, 0.0, 0.5],
    ])?;
    let ctx = PerturbationContext::new(stats, w)?;

    let deltas = [
        ("logit adjusted", la_delta(&priors, 1.0)?),
        ("variance", ctx.isda_delta(0.5)),
        ("normalised variance", ctx.nisda_delta(0.5)),
        ("distance", ctx.distance_delta(1.0)),
        (
            "combined",
            ctx.metalad_delta(&PerturbationParams::global(3, [-1.0, 0.5, 1.0]))?,
        ),
    ];
    let logits = [0.5, 0.2, -0.1];
    for (name, delta) in &deltas {
        let losses: Vec<f64> = (0..3)
            .map(|y| perturbed_ce(&logits, y, delta.row(y)).0)
            .collect();
        println!("{name:>20}: loss per target class {losses:.4?}");
    }
    Ok(())
}
