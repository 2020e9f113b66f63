//! Analytic optimal rules for the binary and three-class tasks, checked
//! against Monte Carlo simulation.

use imbalance_lab::oracle::{
    bayes_three_class, monte_carlo_error, optimal_binary_variance, optimal_mixed,
};
use imbalance_lab::GaussianTaskSpec;

fn main() -> imbalance_lab::Result<()> {
    for sigma in [2.0, 4.0, 8.0] {
        let spec = GaussianTaskSpec::ThreeClassDistance {
            d: 2,
            eta: 4.0,
            sigma,
        };
        let r = bayes_three_class(&spec)?;
        let mc = monte_carlo_error(&r.classifier, &spec, 200_000, 1)?;
        println!(
            "three-class σ={sigma}: analytic {:.4?}  simulated {:.4?}",
            r.per_class_error, mc.per_class_error
        );
    }

    let spec = GaussianTaskSpec::BinaryVariance {
        d: 2,
        eta: 1.0,
        sigma: 1.0,
        k: 3.0,
    };
    let r = optimal_binary_variance(&spec)?;
    println!(
        "unequal spread: errors {:.4?}, gap {:.4}",
        r.per_class_error, r.gap
    );

    let spec = GaussianTaskSpec::MixedPropVar {
        d: 2,
        eta: 1.0,
        sigma: 1.0,
        k: 2.0,
        v: 4.0,
    };
    let r = optimal_mixed(&spec)?;
    let mc = monte_carlo_error(&r.classifier, &spec, 200_000, 2)?;
    println!(
        "mixed K=2 V=4: threshold closed form {:?} numeric {:?}",
        r.intermediates.b_closed_form, r.intermediates.b_numeric
    );
    println!(
        "  analytic {:.4?}  simulated {:.4?}",
        r.per_class_error, mc.per_class_error
    );
    Ok(())
}
