//! Samples each synthetic task family and prints per-class counts and
//! sample means next to the generating parameters.

use imbalance_lab::taskgen::{generate, true_stats};
use imbalance_lab::{CovarianceMode, GaussianTaskSpec, Purpose, RngStream};

fn main() -> imbalance_lab::Result<()> {
    let tasks = [
        GaussianTaskSpec::BinaryVariance {
            d: 2,
            eta: 1.0,
            sigma: 1.0,
            k: 2.0,
        },
        GaussianTaskSpec::ThreeClassDistance {
            d: 2,
            eta: 4.0,
            sigma: 4.0,
        },
        GaussianTaskSpec::FeatureNoise {
            d: 2,
            eta: 1.0,
            sigma: 1.0,
            eps1: 0.5,
            eps2: 2.0,
        },
        GaussianTaskSpec::MixedPropVar {
            d: 5,
            eta: 1.0,
            sigma: 1.0,
            k: 3.0,
            v: 3.0,
        },
        GaussianTaskSpec::LocalTwoCluster {
            sigma: 1.0,
            alpha: 0.2,
        },
        GaussianTaskSpec::LongTailMulticlass {
            c: 5,
            d: 5,
            imbalance_ratio: 50.0,
            separation: 2.0,
            sigma: 1.0,
            sigma_scale: None,
        },
    ];
    for spec in &tasks {
        let ds = generate(spec, 2000, &mut RngStream::new(0, Purpose::TaskGen))?;
        let est = ds.class_stats(CovarianceMode::Full)?;
        println!("{spec:?}");
        for (c, (e, t)) in est.iter().zip(true_stats(spec)?).enumerate() {
            println!(
                "  class {c}: n={:5}  proportion {:.3} (true {:.3})  mean[0] {:+.3} (true {:+.3})",
                ds.class_counts()[c],
                e.proportion,
                t.proportion,
                e.mean[0],
                t.mean[0]
            );
        }
    }
    Ok(())
}
