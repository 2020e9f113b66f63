//! Proportion, variance-ratio and distance measures for a sampled dataset,
//! with and without classifier directions.

use imbalance_lab::metrics::{report, report_dataset, variance_imbalance_nu};
use imbalance_lab::taskgen::{generate, true_stats};
use imbalance_lab::{DenseMatrix, GaussianTaskSpec, Purpose, RngStream};

fn main() -> imbalance_lab::Result<()> {
    let a = DenseMatrix::diagonal(&[8.0, 2.0]);
    let b = DenseMatrix::diagonal(&[2.0, 8.0]);
    println!(
        "ν along e1: {}",
        variance_imbalance_nu(&a, &b, &[1.0, 0.0])?
    );
    println!(
        "ν along e2: {}",
        variance_imbalance_nu(&a, &b, &[0.0, 1.0])?
    );

    let spec = GaussianTaskSpec::LongTailMulticlass {
        c: 4,
        d: 4,
        imbalance_ratio: 20.0,
        separation: 2.0,
        sigma: 1.0,
        sigma_scale: Some(vec![1.0, 1.0, 2.0, 3.0]),
    };
    let exact = report(&true_stats(&spec)?, None)?;
    let ds = generate(&spec, 4000, &mut RngStream::new(0, Purpose::TaskGen))?;
    let sampled = report_dataset(&ds, None)?;
    println!("proportions {:.3?}", sampled.proportions);
    println!(
        "mean distance per class {:.3?}",
        sampled.distances.per_class
    );
    for (e, s) in exact.pairs.iter().zip(&sampled.pairs) {
        println!(
            "pair ({}, {}): ν exact {:.3} sampled {:.3}",
            e.a, e.b, e.nu, s.nu
        );
    }
    Ok(())
}
