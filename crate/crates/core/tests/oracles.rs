//! Library oracles against independent reimplementations: Simpson
//! quadrature of Gaussian densities for error rates and bisection on the
//! log-density balance for thresholds. Frozen constants were produced once by
//! a separate double-precision script built on `erfc`.

use imbalance_lab::metrics::{distance_stats, report, variance_imbalance_nu};
use imbalance_lab::oracle::{
    local_gap, mixed_bias_closed_form, mixed_bias_numeric, optimal_mixed, three_class_accuracies,
};
use imbalance_lab::taskgen::{class_mixtures, true_stats};
use imbalance_lab::GaussianTaskSpec;

/// `P(N(mean, sd²) > t)` by composite Simpson on `[t, mean + 40 sd]`.
fn upper_tail(mean: f64, sd: f64, t: f64) -> f64 {
    let hi = (mean + 40.0 * sd).max(t);
    let n = 20_000;
    let h = (hi - t) / n as f64;
    if h == 0.0 {
        return 0.0;
    }
    let pdf = |x: f64| {
        (-0.5 * ((x - mean) / sd).powi(2)).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt())
    };
    let mut s = pdf(t) + pdf(hi);
    for i in 1..n {
        s += pdf(t + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

fn lower_tail(mean: f64, sd: f64, t: f64) -> f64 {
    upper_tail(-mean, sd, -t)
}

/// Threshold minimizing `E0 + v E1` found as the best sign change of the
/// log-density balance, each refined by bisection.
fn threshold_by_bisection(d: usize, eta: f64, sigma: f64, k: f64, v: f64) -> (f64, [f64; 2]) {
    let df = d as f64;
    let (m, s0, s1) = (df * eta, df.sqrt() * sigma, df.sqrt() * k * sigma);
    // class 0 is wrong when s + b ≤ 0, class 1 when s + b > 0
    let errs = |b: f64| [lower_tail(m, s0, -b), upper_tail(-m, s1, -b)];
    let balance = |b: f64| {
        let z0 = (-b - m) / s0;
        let z1 = (-b + m) / s1;
        v.ln() - k.ln() - 0.5 * z1 * z1 + 0.5 * z0 * z0
    };
    let reach = 10.0 * m;
    let n = 20_001;
    let mut best: Option<(f64, f64)> = None;
    for i in 0..n {
        let mut lo = -reach + 2.0 * reach * i as f64 / n as f64;
        let mut hi = -reach + 2.0 * reach * (i + 1) as f64 / n as f64;
        if balance(lo) * balance(hi) >= 0.0 {
            continue;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if balance(lo) * balance(mid) <= 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let b = 0.5 * (lo + hi);
        let e = errs(b);
        let obj = e[0] + v * e[1];
        if best.is_none_or(|(_, o)| obj < o) {
            best = Some((b, obj));
        }
    }
    let b = best.expect("no interior optimum").0;
    (b, errs(b))
}

#[test]
fn three_class_accuracies_match_quadrature_and_frozen_values() {
    let frozen = [
        (2.0, 0.9213503964748574, 0.8427007929497149),
        (4.0, 0.7602499389065233, 0.5204998778130465),
        (8.0, 0.6381631950841185, 0.2763263901682369),
    ];
    let (d, eta) = (2usize, 4.0);
    for (sigma, outer, middle) in frozen {
        let acc = three_class_accuracies(d, eta, sigma);
        // projection on the unit diagonal: centres at ±√d η and 0, cuts at ±√d η / 2
        let c = (d as f64).sqrt() * eta;
        let q_outer = upper_tail(c, sigma, c / 2.0);
        let q_middle = 1.0 - upper_tail(0.0, sigma, c / 2.0) - lower_tail(0.0, sigma, -c / 2.0);
        assert!((acc[0] - q_outer).abs() < 1e-10 && (acc[2] - q_outer).abs() < 1e-10);
        assert!((acc[1] - q_middle).abs() < 1e-10);
        assert!((acc[0] - outer).abs() < 1e-14 && (acc[1] - middle).abs() < 1e-14);
    }
}

#[test]
fn mixed_threshold_and_errors_match_bisection_oracle() {
    // (d, η, σ, K, V) -> (b*, E0, E1)
    let frozen = [
        (
            (2, 5.0, 1.0, 3.0, 5.0),
            (
                -5.15484617635185,
                0.00030622382285606725,
                0.00017711139639198237,
            ),
        ),
        (
            (5, 1.0, 1.0, 3.0, 3.0),
            (-2.5, 0.13177623864148638, 0.13177623864148635),
        ),
        (
            (2, 1.0, 2.0, 2.0, 1.0),
            (1.3462233724943258, 0.1183909767476474, 0.4539956905495931),
        ),
        (
            (2, 1.0, 1.0, 1.5, 2.0),
            (
                -0.6208418810498391,
                0.16472754100368855,
                0.10832656935277729,
            ),
        ),
    ];
    for ((d, eta, sigma, k, v), (b_ref, e0_ref, e1_ref)) in frozen {
        let (b_bis, e_quad) = threshold_by_bisection(d, eta, sigma, k, v);
        assert!(
            (b_bis - b_ref).abs() < 1e-9,
            "bisection drifted from frozen value"
        );
        let b_closed = mixed_bias_closed_form(d, eta, sigma, k, v).unwrap();
        let b_num = mixed_bias_numeric(d, eta, sigma, k, v);
        assert!(
            (b_closed - b_ref).abs() < 1e-9,
            "closed form {b_closed} vs {b_ref}"
        );
        assert!((b_num - b_ref).abs() < 1e-6, "numeric {b_num} vs {b_ref}");

        let r = optimal_mixed(&GaussianTaskSpec::MixedPropVar {
            d,
            eta,
            sigma,
            k,
            v,
        })
        .unwrap();
        for (got, want, quad) in [
            (r.per_class_error[0], e0_ref, e_quad[0]),
            (r.per_class_error[1], e1_ref, e_quad[1]),
        ] {
            assert!((got - want).abs() < 1e-9, "{got} vs frozen {want}");
            assert!((got - quad).abs() < 1e-9, "{got} vs quadrature {quad}");
        }
    }
}

#[test]
fn equal_ratios_close_the_gap() {
    for d in [2, 5] {
        for k in [1.5, 2.0, 3.0, 5.0] {
            let r = optimal_mixed(&GaussianTaskSpec::MixedPropVar {
                d,
                eta: 5.0,
                sigma: 1.0,
                k,
                v: k,
            })
            .unwrap();
            assert!(r.gap <= 1e-10, "d={d} K={k}: gap {}", r.gap);
        }
    }
}

#[test]
fn local_threshold_matches_quadrature() {
    let sigma = 1.0;
    let r2 = std::f64::consts::SQRT_2;
    let (other, near, far) = (-4.0 * r2, r2, 3.0 * r2);
    for g in local_gap(sigma, &[0.05, 0.2, 0.45]).unwrap() {
        let t = g.threshold;
        assert!((g.error_other - upper_tail(other, sigma, t)).abs() < 1e-10);
        assert!((g.error_near - lower_tail(near, sigma, t)).abs() < 1e-10);
        assert!((g.error_far - lower_tail(far, sigma, t)).abs() < 1e-10);
        // stationarity of the weighted error at the reported threshold
        let h = 1e-4;
        let obj = |t: f64| {
            upper_tail(other, sigma, t)
                + g.alpha * lower_tail(near, sigma, t)
                + (1.0 - g.alpha) * lower_tail(far, sigma, t)
        };
        assert!(obj(t) <= obj(t - h) + 1e-12 && obj(t) <= obj(t + h) + 1e-12);
    }
}

#[test]
fn variance_ratio_is_square_of_spread_ratio() {
    for k in [1.0, 2.0, 3.0, 5.0] {
        let spec = GaussianTaskSpec::MixedPropVar {
            d: 3,
            eta: 1.0,
            sigma: 1.3,
            k,
            v: 2.0,
        };
        let stats = true_stats(&spec).unwrap();
        // wider class over narrower class along the centre direction
        let nu = variance_imbalance_nu(&stats[1].cov, &stats[0].cov, &[1.0; 3]).unwrap();
        let rep = report(&stats, None).unwrap();
        assert!((rep.pairs[0].nu * nu - 1.0).abs() < 1e-12);
        assert!((nu - k * k).abs() <= 1e-12 * k * k, "K={k}: ν={nu}");
    }
}

#[test]
fn outer_three_class_centres_are_farthest() {
    let eta = 1.7;
    let spec = GaussianTaskSpec::ThreeClassDistance {
        d: 2,
        eta,
        sigma: 1.0,
    };
    let centres: Vec<Vec<f64>> = class_mixtures(&spec)
        .iter()
        .map(|c| c[0].1.clone())
        .collect();
    let ds = distance_stats(&centres).unwrap();
    let want = 3.0 * 2f64.sqrt() * eta / 2.0;
    assert!((ds.per_class[0] - want).abs() < 1e-12);
    assert!((ds.per_class[2] - want).abs() < 1e-12);
    assert!(ds.per_class[1] < ds.per_class[0]);
}
