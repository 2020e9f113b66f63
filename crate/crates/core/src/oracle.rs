//! Reference classifiers for the synthetic tasks, with exact per-class
//! errors and a Monte-Carlo cross-check.
//!
//! All binary tasks reduce to the one-dimensional statistic `s = 1ᵀx`, which
//! is `N(dη, d σ₊²)` for class 0 and `N(-dη, d σ₋²)` for class 1. A linear
//! rule predicts class 0 when `w·x + b > 0`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, std_normal_cdf, GaussianFactor, Purpose, RngStream};
use crate::taskgen::{GaussianTaskSpec, LOCAL_FAR, LOCAL_NEAR, LOCAL_OTHER};

/// Grid points scanned before golden-section refinement.
pub const SCAN_POINTS: usize = 4001;
/// Final bracket width of the golden-section search.
pub const GOLDEN_TOL: f64 = 1e-10;
/// Samples per Monte-Carlo work unit; each unit has its own substream.
pub const MC_CHUNK: usize = 1 << 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Classifier {
    /// Class 0 if `w·x + b > 0`, else class 1.
    Linear { w: Vec<f64>, b: f64 },
    /// Three ordered bands along `w`: class 0 above `upper`, class 2 below
    /// `lower`, class 1 in between (boundaries included).
    Bands { w: Vec<f64>, lower: f64, upper: f64 },
}

impl Classifier {
    pub fn predict(&self, x: &[f64]) -> usize {
        match self {
            Self::Linear { w, b } => usize::from(dot(w, x) + b <= 0.0),
            Self::Bands { w, lower, upper } => {
                let s = dot(w, x);
                if s > *upper {
                    0
                } else if s < *lower {
                    2
                } else {
                    1
                }
            }
        }
    }
}

/// Values computed on the way to a result, kept for reporting.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Intermediates {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub b_closed_form: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub b_numeric: Option<f64>,
    /// `B = -2dη / (√d σ (K² - 1))`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub big_b: Option<f64>,
    /// `q = 2 log(K/V) / (K² - 1)`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub q: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub classifier: Classifier,
    pub per_class_error: Vec<f64>,
    pub gap: f64,
    pub intermediates: Intermediates,
}

/// Largest pairwise difference of per-class errors.
pub fn performance_gap(errors: &[f64]) -> f64 {
    let max = errors.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = errors.iter().copied().fold(f64::INFINITY, f64::min);
    if errors.is_empty() {
        0.0
    } else {
        max - min
    }
}

/// Minimizes `f` on `[lo, hi]`: dense scan, then golden-section search on
/// the two cells around the best grid point, then bisection on the sign of a
/// central-difference slope. The last stage matters on flat minima, where
/// comparing function values alone stalls near `√ε` relative precision.
pub fn minimize_scalar(f: impl Fn(f64) -> f64, lo: f64, hi: f64) -> f64 {
    let step = (hi - lo) / (SCAN_POINTS - 1) as f64;
    let mut best = 0;
    let mut best_val = f64::INFINITY;
    for i in 0..SCAN_POINTS {
        let v = f(lo + step * i as f64);
        if v < best_val {
            best_val = v;
            best = i;
        }
    }
    let a = lo + step * best.saturating_sub(1) as f64;
    let b = lo + step * (best + 1).min(SCAN_POINTS - 1) as f64;
    let x = golden_section(&f, a, b);
    polish_stationary(&f, x, step)
}

fn polish_stationary(f: impl Fn(f64) -> f64, x: f64, scale: f64) -> f64 {
    let h = 1e-5 * scale.max(1e-3);
    let slope = |t: f64| f(t + h) - f(t - h);
    let width = 1e-4 * scale.max(1e-3);
    let (mut a, mut b) = (x - width, x + width);
    let (sa, sb) = (slope(a), slope(b));
    if !(sa < 0.0 && sb > 0.0) {
        return x;
    }
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        if m <= a || m >= b {
            break;
        }
        if slope(m) < 0.0 {
            a = m;
        } else {
            b = m;
        }
    }
    0.5 * (a + b)
}

fn golden_section(f: &impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > GOLDEN_TOL {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
        // the bracket stops shrinking once c and d collide in floating point
        if c >= d {
            break;
        }
    }
    0.5 * (a + b)
}

/// Per-class errors of `1ᵀx + b > 0 ⇒ class 0` when the two classes have
/// means `±dη` on the statistic and per-axis deviations `sd0`, `sd1`.
pub fn binary_threshold_errors(d: usize, eta: f64, sd0: f64, sd1: f64, b: f64) -> [f64; 2] {
    let df = d as f64;
    let mean = df * eta;
    let root_d = df.sqrt();
    [
        std_normal_cdf(-(mean + b) / (root_d * sd0)),
        std_normal_cdf((b - mean) / (root_d * sd1)),
    ]
}

fn all_ones_linear(d: usize, b: f64) -> Classifier {
    Classifier::Linear { w: vec![1.0; d], b }
}

fn binary_result(d: usize, errors: [f64; 2], b: f64, intermediates: Intermediates) -> OracleResult {
    OracleResult {
        classifier: all_ones_linear(d, b),
        per_class_error: errors.to_vec(),
        gap: (errors[0] - errors[1]).abs(),
        intermediates,
    }
}

/// Best all-ones linear rule for equal-prior classes with unequal spread,
/// from numeric minimization of the mean per-class error.
pub fn optimal_binary_variance(spec: &GaussianTaskSpec) -> Result<OracleResult> {
    spec.validate()?;
    let (d, eta, sd0, sd1) = match *spec {
        GaussianTaskSpec::BinaryVariance { d, eta, sigma, k } => (d, eta, k * sigma, sigma),
        GaussianTaskSpec::FeatureNoise {
            d,
            eta,
            sigma,
            eps1,
            eps2,
        } => (
            d,
            eta,
            (sigma * sigma + eps1 * eps1).sqrt(),
            (sigma * sigma + eps2 * eps2).sqrt(),
        ),
        _ => {
            return Err(Error::invalid(
                "expected a binary_variance or feature_noise task",
            ))
        }
    };
    let reach = 10.0 * d as f64 * eta;
    let objective = |b: f64| {
        let e = binary_threshold_errors(d, eta, sd0, sd1, b);
        e[0] + e[1]
    };
    let b = minimize_scalar(objective, -reach, reach);
    let errors = binary_threshold_errors(d, eta, sd0, sd1, b);
    Ok(binary_result(
        d,
        errors,
        b,
        Intermediates {
            b_numeric: Some(b),
            ..Default::default()
        },
    ))
}

/// Accuracies of the band rule with thresholds `±dη/2` on the three-class
/// distance task. The outer classes cross one boundary at distance
/// `√d η / (2σ)` standard deviations, the middle class two.
pub fn three_class_accuracies(d: usize, eta: f64, sigma: f64) -> [f64; 3] {
    let tail = std_normal_cdf(-(d as f64).sqrt() * eta / (2.0 * sigma));
    [1.0 - tail, 1.0 - 2.0 * tail, 1.0 - tail]
}

/// Bayes rule for the three-class distance task: project on `θ/η` and cut at
/// `±dη/2`.
pub fn bayes_three_class(spec: &GaussianTaskSpec) -> Result<OracleResult> {
    spec.validate()?;
    let GaussianTaskSpec::ThreeClassDistance { d, eta, sigma } = *spec else {
        return Err(Error::invalid("expected a three_class_distance task"));
    };
    let half = d as f64 * eta / 2.0;
    let acc = three_class_accuracies(d, eta, sigma);
    let errors: Vec<f64> = acc.iter().map(|a| 1.0 - a).collect();
    Ok(OracleResult {
        classifier: Classifier::Bands {
            w: vec![1.0; d],
            lower: -half,
            upper: half,
        },
        gap: performance_gap(&errors),
        per_class_error: errors,
        intermediates: Intermediates::default(),
    })
}

/// Prior-weighted error of the mixed task as a function of the bias, with
/// class 1 weighted by `v` and class 0 by 1.
pub fn mixed_objective(d: usize, eta: f64, sigma: f64, k: f64, v: f64, b: f64) -> f64 {
    let e = binary_threshold_errors(d, eta, sigma, k * sigma, b);
    v * e[1] + e[0]
}

/// Stationary bias of [`mixed_objective`] from the quadratic in `b`.
///
/// Returns `None` when the discriminant is negative (no interior optimum).
/// The whole numerator, square-root term included, is divided by `K² - 1`.
pub fn mixed_bias_closed_form(d: usize, eta: f64, sigma: f64, k: f64, v: f64) -> Option<f64> {
    let df = d as f64;
    if k == 1.0 {
        return Some(-sigma * sigma * v.ln() / (2.0 * eta));
    }
    let k2 = k * k;
    let disc = 4.0 * df * df * eta * eta + 2.0 * df * (k2 - 1.0) * sigma * sigma * (k / v).ln();
    if disc < 0.0 {
        return None;
    }
    Some((-df * eta * (k2 + 1.0) + k * disc.sqrt()) / (k2 - 1.0))
}

/// `(B, q)` for `K > 1`.
pub fn mixed_intermediates(d: usize, eta: f64, sigma: f64, k: f64, v: f64) -> (f64, f64) {
    let df = d as f64;
    let k2m1 = k * k - 1.0;
    let big_b = -2.0 * df * eta / (df.sqrt() * sigma * k2m1);
    let q = 2.0 * (k / v).ln() / k2m1;
    (big_b, q)
}

/// Per-class errors at the optimum expressed through `B` and `q`:
/// `E₀ = Φ(-K√(B²+q) - B)`, `E₁ = Φ(KB + √(B²+q))`. These signs agree with
/// direct evaluation at the closed-form bias and with Monte Carlo.
pub fn mixed_errors_from_intermediates(k: f64, big_b: f64, q: f64) -> Option<[f64; 2]> {
    let r = big_b * big_b + q;
    if r < 0.0 {
        return None;
    }
    let root = r.sqrt();
    Some([
        std_normal_cdf(-k * root - big_b),
        std_normal_cdf(k * big_b + root),
    ])
}

/// Numeric minimizer of [`mixed_objective`] over `[-10dη, 10dη]`.
pub fn mixed_bias_numeric(d: usize, eta: f64, sigma: f64, k: f64, v: f64) -> f64 {
    let reach = 10.0 * d as f64 * eta;
    minimize_scalar(|b| mixed_objective(d, eta, sigma, k, v, b), -reach, reach)
}

/// Optimal all-ones linear rule for the mixed proportion/variance task.
///
/// Uses the closed-form bias when it exists and falls back to the numeric
/// minimizer otherwise; both are recorded.
pub fn optimal_mixed(spec: &GaussianTaskSpec) -> Result<OracleResult> {
    spec.validate()?;
    let GaussianTaskSpec::MixedPropVar {
        d,
        eta,
        sigma,
        k,
        v,
    } = *spec
    else {
        return Err(Error::invalid("expected a mixed_prop_var task"));
    };
    let closed = mixed_bias_closed_form(d, eta, sigma, k, v);
    let numeric = mixed_bias_numeric(d, eta, sigma, k, v);
    let (big_b, q) = if k > 1.0 {
        let (bb, q) = mixed_intermediates(d, eta, sigma, k, v);
        (Some(bb), Some(q))
    } else {
        (None, None)
    };
    let b = closed.unwrap_or(numeric);
    let errors = match (big_b, q) {
        (Some(bb), Some(q)) if closed.is_some() => {
            mixed_errors_from_intermediates(k, bb, q).expect("discriminant checked")
        }
        _ => binary_threshold_errors(d, eta, sigma, k * sigma, b),
    };
    Ok(binary_result(
        d,
        errors,
        b,
        Intermediates {
            b_closed_form: closed,
            b_numeric: Some(numeric),
            big_b,
            q,
        },
    ))
}

/// Gap of the optimal mixed-task rule over a `K × V` grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapGrid {
    pub ks: Vec<f64>,
    pub vs: Vec<f64>,
    /// `gaps[i][j]` for `ks[i]`, `vs[j]`; `None` where no interior optimum exists.
    pub gaps: Vec<Vec<Option<f64>>>,
}

/// One failed check of the expected gap pattern.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridViolation {
    pub rule: String,
    pub detail: String,
}

pub fn corollary_grid(ks: &[f64], vs: &[f64], d: usize, eta: f64, sigma: f64) -> Result<GapGrid> {
    let mut gaps = Vec::with_capacity(ks.len());
    for &k in ks {
        let mut row = Vec::with_capacity(vs.len());
        for &v in vs {
            let spec = GaussianTaskSpec::MixedPropVar {
                d,
                eta,
                sigma,
                k,
                v,
            };
            spec.validate()?;
            let defined = mixed_bias_closed_form(d, eta, sigma, k, v).is_some();
            row.push(if defined {
                Some(optimal_mixed(&spec)?.gap)
            } else {
                None
            });
        }
        gaps.push(row);
    }
    Ok(GapGrid {
        ks: ks.to_vec(),
        vs: vs.to_vec(),
        gaps,
    })
}

impl GapGrid {
    pub fn get(&self, ki: usize, vi: usize) -> Option<f64> {
        self.gaps[ki][vi]
    }

    /// Cell holding the largest defined gap.
    pub fn argmax(&self) -> Option<(usize, usize)> {
        let mut best: Option<((usize, usize), f64)> = None;
        for (i, row) in self.gaps.iter().enumerate() {
            for (j, g) in row.iter().enumerate() {
                if let Some(g) = *g {
                    if best.is_none_or(|(_, b)| g > b) {
                        best = Some(((i, j), g));
                    }
                }
            }
        }
        best.map(|(ij, _)| ij)
    }

    /// Checks the expected pattern at every adjacent pair of defined cells:
    /// zero gap where `K = V`; for fixed `K`, gap decreasing in `V` below `K`
    /// and increasing above; for fixed `V`, gap increasing in `K` above `V`
    /// and rising then falling (no interior dip) below.
    pub fn violations(&self, zero_tol: f64) -> Vec<GridViolation> {
        let mut out = Vec::new();
        let mut push = |rule: &str, detail: String| {
            out.push(GridViolation {
                rule: rule.into(),
                detail,
            })
        };
        for (i, &k) in self.ks.iter().enumerate() {
            for (j, &v) in self.vs.iter().enumerate() {
                if k == v {
                    match self.get(i, j) {
                        Some(g) if g <= zero_tol => {}
                        other => push("equal", format!("K = V = {k}: gap {other:?}")),
                    }
                }
            }
        }
        // fixed K, sweep V
        for (i, &k) in self.ks.iter().enumerate() {
            for j in 1..self.vs.len() {
                let (v0, v1) = (self.vs[j - 1], self.vs[j]);
                let (Some(g0), Some(g1)) = (self.get(i, j - 1), self.get(i, j)) else {
                    continue;
                };
                if v1 <= k && g1 >= g0 {
                    push(
                        "v_below_k",
                        format!("K={k}: gap(V={v0})={g0} <= gap(V={v1})={g1}"),
                    );
                }
                if v0 >= k && g1 <= g0 {
                    push(
                        "v_above_k",
                        format!("K={k}: gap(V={v0})={g0} >= gap(V={v1})={g1}"),
                    );
                }
            }
        }
        // fixed V, sweep K
        for (j, &v) in self.vs.iter().enumerate() {
            for i in 1..self.ks.len() {
                let (k0, k1) = (self.ks[i - 1], self.ks[i]);
                let (Some(g0), Some(g1)) = (self.get(i - 1, j), self.get(i, j)) else {
                    continue;
                };
                if k0 >= v && g1 <= g0 {
                    push(
                        "k_above_v",
                        format!("V={v}: gap(K={k0})={g0} >= gap(K={k1})={g1}"),
                    );
                }
            }
            let below: Vec<f64> = (0..self.ks.len())
                .filter(|&i| self.ks[i] <= v)
                .filter_map(|i| self.get(i, j))
                .collect();
            for w in below.windows(3) {
                if w[1] < w[0] && w[1] < w[2] {
                    push("k_below_v", format!("V={v}: interior dip in {w:?}"));
                }
            }
        }
        out
    }
}

/// Optimal threshold along `[1,1]` for the local two-cluster task and the
/// resulting errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalGap {
    pub alpha: f64,
    /// Threshold on `u·x` with `u = [1,1]/√2`; class 1 above.
    pub threshold: f64,
    pub error_other: f64,
    pub error_near: f64,
    pub error_far: f64,
    /// `|error_near - error_far|`.
    pub gap: f64,
}

impl LocalGap {
    pub fn classifier(&self) -> Classifier {
        let u = std::f64::consts::FRAC_1_SQRT_2;
        Classifier::Linear {
            w: vec![-u, -u],
            b: self.threshold,
        }
    }
}

fn along_diagonal(p: [f64; 2]) -> f64 {
    (p[0] + p[1]) * std::f64::consts::FRAC_1_SQRT_2
}

/// Errors at threshold `t` on the diagonal projection: (class 0, near
/// sub-cluster, far sub-cluster).
pub fn local_errors(sigma: f64, t: f64) -> [f64; 3] {
    [
        std_normal_cdf((along_diagonal(LOCAL_OTHER) - t) / sigma),
        std_normal_cdf((t - along_diagonal(LOCAL_NEAR)) / sigma),
        std_normal_cdf((t - along_diagonal(LOCAL_FAR)) / sigma),
    ]
}

/// For each `α`, the error-minimizing threshold for equal class weights and
/// the error difference between the two sub-clusters of class 1.
pub fn local_gap(sigma: f64, alphas: &[f64]) -> Result<Vec<LocalGap>> {
    alphas
        .iter()
        .map(|&alpha| {
            GaussianTaskSpec::LocalTwoCluster { sigma, alpha }.validate()?;
            let lo = along_diagonal(LOCAL_OTHER) - 10.0 * sigma;
            let hi = along_diagonal(LOCAL_FAR) + 10.0 * sigma;
            let objective = |t: f64| {
                let e = local_errors(sigma, t);
                e[0] + alpha * e[1] + (1.0 - alpha) * e[2]
            };
            let threshold = minimize_scalar(objective, lo, hi);
            let e = local_errors(sigma, threshold);
            Ok(LocalGap {
                alpha,
                threshold,
                error_other: e[0],
                error_near: e[1],
                error_far: e[2],
                gap: (e[1] - e[2]).abs(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloErrors {
    pub per_class_error: Vec<f64>,
    pub per_class_n: Vec<usize>,
}

impl MonteCarloErrors {
    /// Binomial standard error of each estimate at probability `p`.
    pub fn standard_error(&self, class: usize, p: f64) -> f64 {
        (p * (1.0 - p) / self.per_class_n[class] as f64).sqrt()
    }
}

/// Class-conditional error estimates from `n` draws per class (the
/// sub-clusters of a mixture class are drawn by their weights).
///
/// Work is split into [`MC_CHUNK`]-sized units, each on its own substream
/// of `(seed, MonteCarlo)`, and reduced as integer counts, so the result does
/// not depend on the thread count.
pub fn monte_carlo_error(
    classifier: &Classifier,
    spec: &GaussianTaskSpec,
    n: usize,
    seed: u64,
) -> Result<MonteCarloErrors> {
    spec.validate()?;
    let c = spec.n_classes();
    let mixture = crate::taskgen::class_mixtures(spec);
    let factors = mixture
        .iter()
        .map(|cls| {
            cls.iter()
                .map(|(_, _, cov)| GaussianFactor::new(cov))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let chunks = n.div_ceil(MC_CHUNK);
    let mut wrong = vec![0usize; c];
    for class in 0..c {
        let comps = &mixture[class];
        wrong[class] = (0..chunks)
            .into_par_iter()
            .map(|chunk| {
                let index = ((class as u64) << 32) | chunk as u64;
                let mut rng = RngStream::with_index(seed, Purpose::MonteCarlo, index);
                let len = MC_CHUNK.min(n - chunk * MC_CHUNK);
                let d = spec.dim();
                let mut z = vec![0.0; d];
                let mut x = vec![0.0; d];
                let mut count = 0usize;
                for _ in 0..len {
                    let pick = if comps.len() == 1 {
                        0
                    } else {
                        let u = rng.uniform();
                        let mut acc = 0.0;
                        let mut idx = comps.len() - 1;
                        for (i, (w, _, _)) in comps.iter().enumerate() {
                            acc += w;
                            if u < acc {
                                idx = i;
                                break;
                            }
                        }
                        idx
                    };
                    factors[class][pick].draw_into(&comps[pick].1, &mut rng, &mut z, &mut x);
                    if classifier.predict(&x) != class {
                        count += 1;
                    }
                }
                count
            })
            .sum();
    }
    Ok(MonteCarloErrors {
        per_class_error: wrong.iter().map(|&w| w as f64 / n as f64).collect(),
        per_class_n: vec![n; c],
    })
}
