//! Synthetic imbalance tasks with known population parameters.
//!
//! Binary tasks use class index 0 for the "+1" class and index 1 for "-1".
//! The three-class distance task keeps its natural order: index 0 is centred
//! on `θ`, index 1 on the origin, index 2 on `-θ`, where `θ = [η, ..., η]`.

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Graph};
use crate::error::{Error, Result};
use crate::numerics::{ClassStats, DenseMatrix, GaussianFactor, RngStream};

/// Target expected node degree for [`toy_graph`].
pub const TOY_GRAPH_DEGREE: f64 = 20.0;

/// One synthetic task family and its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case", deny_unknown_fields)]
pub enum GaussianTaskSpec {
    /// `+1 ~ N(θ, (kσ)² I)`, `-1 ~ N(-θ, σ² I)`, equal priors.
    BinaryVariance {
        d: usize,
        eta: f64,
        sigma: f64,
        k: f64,
    },
    /// Three classes centred on `θ`, `0`, `-θ` with shared `σ² I`.
    ThreeClassDistance { d: usize, eta: f64, sigma: f64 },
    /// `+1 ~ N(θ, (σ² + ε1²) I)`, `-1 ~ N(-θ, (σ² + ε2²) I)`, equal priors.
    FeatureNoise {
        d: usize,
        eta: f64,
        sigma: f64,
        eps1: f64,
        eps2: f64,
    },
    /// Priors `1 : v`, `+1 ~ N(θ, σ² I)`, `-1 ~ N(-θ, (kσ)² I)`.
    MixedPropVar {
        d: usize,
        eta: f64,
        sigma: f64,
        k: f64,
        v: f64,
    },
    /// Two-dimensional. `+1 ~ N([-4,-4], σ² I)`; `-1` is the mixture
    /// `α N([1,1], σ² I) + (1-α) N([3,3], σ² I)`. Equal class totals.
    LocalTwoCluster { sigma: f64, alpha: f64 },
    /// `c` classes with geometric priors `π_0 / π_{c-1} = imbalance_ratio`,
    /// centres `separation · e_j` in `R^d` (`d ≥ c`) and per-class standard
    /// deviation `sigma · sigma_scale[j]` (all ones when omitted).
    LongTailMulticlass {
        c: usize,
        d: usize,
        imbalance_ratio: f64,
        separation: f64,
        sigma: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sigma_scale: Option<Vec<f64>>,
    },
}

/// Centres of the two sub-clusters of the local task, nearer one first.
pub const LOCAL_NEAR: [f64; 2] = [1.0, 1.0];
pub const LOCAL_FAR: [f64; 2] = [3.0, 3.0];
pub const LOCAL_OTHER: [f64; 2] = [-4.0, -4.0];

impl GaussianTaskSpec {
    pub fn n_classes(&self) -> usize {
        match self {
            Self::ThreeClassDistance { .. } => 3,
            Self::LongTailMulticlass { c, .. } => *c,
            _ => 2,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::BinaryVariance { d, .. }
            | Self::ThreeClassDistance { d, .. }
            | Self::FeatureNoise { d, .. }
            | Self::MixedPropVar { d, .. }
            | Self::LongTailMulticlass { d, .. } => *d,
            Self::LocalTwoCluster { .. } => 2,
        }
    }

    /// `true` when `generate` interprets its count per class.
    pub fn counts_per_class(&self) -> bool {
        !matches!(
            self,
            Self::MixedPropVar { .. } | Self::LongTailMulticlass { .. }
        )
    }

    pub fn validate(&self) -> Result<()> {
        fn positive(name: &str, v: f64) -> Result<()> {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::invalid(format!(
                    "{name} must be positive and finite, got {v}"
                )))
            }
        }
        fn at_least_one(name: &str, v: f64) -> Result<()> {
            if v.is_finite() && v >= 1.0 {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} must be >= 1, got {v}")))
            }
        }
        fn dim(d: usize) -> Result<()> {
            if d == 0 {
                Err(Error::invalid("dimension must be >= 1"))
            } else {
                Ok(())
            }
        }
        match *self {
            Self::BinaryVariance { d, eta, sigma, k } => {
                dim(d)?;
                positive("eta", eta)?;
                positive("sigma", sigma)?;
                at_least_one("k", k)
            }
            Self::ThreeClassDistance { d, eta, sigma } => {
                dim(d)?;
                positive("eta", eta)?;
                positive("sigma", sigma)
            }
            Self::FeatureNoise {
                d,
                eta,
                sigma,
                eps1,
                eps2,
            } => {
                dim(d)?;
                positive("eta", eta)?;
                positive("sigma", sigma)?;
                if !(eps1 >= 0.0 && eps2 >= 0.0 && eps1.is_finite() && eps2.is_finite()) {
                    return Err(Error::invalid("noise deviations must be finite and >= 0"));
                }
                Ok(())
            }
            Self::MixedPropVar {
                d,
                eta,
                sigma,
                k,
                v,
            } => {
                dim(d)?;
                positive("eta", eta)?;
                positive("sigma", sigma)?;
                at_least_one("k", k)?;
                at_least_one("v", v)
            }
            Self::LocalTwoCluster { sigma, alpha } => {
                positive("sigma", sigma)?;
                if !(alpha > 0.0 && alpha < 1.0) {
                    return Err(Error::invalid(format!(
                        "alpha must lie in (0, 1), got {alpha}"
                    )));
                }
                Ok(())
            }
            Self::LongTailMulticlass {
                c,
                d,
                imbalance_ratio,
                separation,
                sigma,
                ref sigma_scale,
            } => {
                if c < 2 {
                    return Err(Error::invalid("need at least two classes"));
                }
                if d < c {
                    return Err(Error::invalid(format!(
                        "simplex centres need d >= c (d = {d}, c = {c})"
                    )));
                }
                at_least_one("imbalance_ratio", imbalance_ratio)?;
                positive("separation", separation)?;
                positive("sigma", sigma)?;
                if let Some(s) = sigma_scale {
                    if s.len() != c {
                        return Err(Error::DimensionMismatch {
                            expected: c,
                            found: s.len(),
                        });
                    }
                    for &v in s {
                        positive("sigma_scale entry", v)?;
                    }
                }
                Ok(())
            }
        }
    }

    /// Population priors.
    pub fn priors(&self) -> Vec<f64> {
        match *self {
            Self::MixedPropVar { v, .. } => vec![1.0 / (1.0 + v), v / (1.0 + v)],
            Self::LongTailMulticlass {
                c, imbalance_ratio, ..
            } => geometric_priors(c, imbalance_ratio),
            _ => {
                let c = self.n_classes();
                vec![1.0 / c as f64; c]
            }
        }
    }
}

/// `π_j ∝ ratio^{-j/(c-1)}`, normalized.
pub fn geometric_priors(c: usize, ratio: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..c)
        .map(|j| ratio.powf(-(j as f64) / (c - 1).max(1) as f64))
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Integer class counts summing to `n` by largest remainder, ties to the
/// lower class index.
pub fn apportion(n: usize, priors: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = priors.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|v| v.floor() as usize).collect();
    let mut left = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..priors.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &j in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[j] += 1;
        left -= 1;
    }
    counts
}

/// One Gaussian component of a class-conditional distribution.
struct Component {
    weight: f64,
    mean: Vec<f64>,
    cov: DenseMatrix,
}

fn iso(mean: Vec<f64>, var: f64) -> Component {
    let d = mean.len();
    Component {
        weight: 1.0,
        mean,
        cov: DenseMatrix::scaled_identity(d, var),
    }
}

/// Class-conditional mixtures, one list per class.
fn class_components(spec: &GaussianTaskSpec) -> Vec<Vec<Component>> {
    let theta = |d: usize, eta: f64| vec![eta; d];
    let neg = |v: Vec<f64>| v.into_iter().map(|x| -x).collect::<Vec<_>>();
    match *spec {
        GaussianTaskSpec::BinaryVariance { d, eta, sigma, k } => vec![
            vec![iso(theta(d, eta), (k * sigma).powi(2))],
            vec![iso(neg(theta(d, eta)), sigma * sigma)],
        ],
        GaussianTaskSpec::ThreeClassDistance { d, eta, sigma } => vec![
            vec![iso(theta(d, eta), sigma * sigma)],
            vec![iso(vec![0.0; d], sigma * sigma)],
            vec![iso(neg(theta(d, eta)), sigma * sigma)],
        ],
        GaussianTaskSpec::FeatureNoise {
            d,
            eta,
            sigma,
            eps1,
            eps2,
        } => vec![
            vec![iso(theta(d, eta), sigma * sigma + eps1 * eps1)],
            vec![iso(neg(theta(d, eta)), sigma * sigma + eps2 * eps2)],
        ],
        GaussianTaskSpec::MixedPropVar {
            d, eta, sigma, k, ..
        } => vec![
            vec![iso(theta(d, eta), sigma * sigma)],
            vec![iso(neg(theta(d, eta)), (k * sigma).powi(2))],
        ],
        GaussianTaskSpec::LocalTwoCluster { sigma, alpha } => {
            let var = sigma * sigma;
            let mut near = iso(LOCAL_NEAR.to_vec(), var);
            near.weight = alpha;
            let mut far = iso(LOCAL_FAR.to_vec(), var);
            far.weight = 1.0 - alpha;
            vec![vec![iso(LOCAL_OTHER.to_vec(), var)], vec![near, far]]
        }
        GaussianTaskSpec::LongTailMulticlass {
            c,
            d,
            separation,
            sigma,
            ref sigma_scale,
            ..
        } => (0..c)
            .map(|j| {
                let mut mean = vec![0.0; d];
                mean[j] = separation;
                let s = sigma * sigma_scale.as_ref().map_or(1.0, |v| v[j]);
                vec![iso(mean, s * s)]
            })
            .collect(),
    }
}

/// Class-conditional distributions as `(weight, mean, covariance)`
/// components, one list per class.
pub fn class_mixtures(spec: &GaussianTaskSpec) -> Vec<Vec<(f64, Vec<f64>, DenseMatrix)>> {
    class_components(spec)
        .into_iter()
        .map(|cls| cls.into_iter().map(|c| (c.weight, c.mean, c.cov)).collect())
        .collect()
}

/// Population statistics of every class. Mixture classes report the mixture
/// mean and covariance.
pub fn true_stats(spec: &GaussianTaskSpec) -> Result<Vec<ClassStats>> {
    spec.validate()?;
    let priors = spec.priors();
    Ok(class_components(spec)
        .into_iter()
        .zip(priors)
        .map(|(comps, proportion)| {
            let d = comps[0].mean.len();
            let mut mean = vec![0.0; d];
            for comp in &comps {
                for (m, v) in mean.iter_mut().zip(&comp.mean) {
                    *m += comp.weight * v;
                }
            }
            // E[xxᵀ] - mean meanᵀ, expanded per component
            let mut cov = DenseMatrix::zeros(d, d);
            for comp in &comps {
                for i in 0..d {
                    for j in 0..d {
                        let shift = (comp.mean[i] - mean[i]) * (comp.mean[j] - mean[j]);
                        let v = cov.get(i, j) + comp.weight * (comp.cov.get(i, j) + shift);
                        cov.set(i, j, v);
                    }
                }
            }
            ClassStats {
                proportion,
                mean,
                cov,
            }
        })
        .collect())
}

/// Draws a dataset.
///
/// `n` is per class for balanced families and the total sample count for
/// [`GaussianTaskSpec::MixedPropVar`] (labels drawn i.i.d. from the priors)
/// and [`GaussianTaskSpec::LongTailMulticlass`] (counts apportioned
/// deterministically from the priors). Samples are grouped by class except in
/// the i.i.d.-label case.
pub fn generate(spec: &GaussianTaskSpec, n: usize, rng: &mut RngStream) -> Result<Dataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::invalid("sample count must be >= 1"));
    }
    let comps = class_components(spec);
    let factors = comps
        .iter()
        .map(|cls| cls.iter().map(|c| GaussianFactor::new(&c.cov)).collect())
        .collect::<Result<Vec<Vec<_>>>>()?;
    let d = spec.dim();
    let c = spec.n_classes();

    let labels: Vec<usize> = match spec {
        GaussianTaskSpec::MixedPropVar { .. } => {
            let p_minus = spec.priors()[1];
            (0..n)
                .map(|_| usize::from(rng.bernoulli(p_minus)))
                .collect()
        }
        GaussianTaskSpec::LongTailMulticlass { .. } => {
            let counts = apportion(n, &spec.priors());
            if let Some(j) = counts.iter().position(|&k| k == 0) {
                return Err(Error::EmptyClass(j));
            }
            counts
                .iter()
                .enumerate()
                .flat_map(|(j, &k)| std::iter::repeat_n(j, k))
                .collect()
        }
        _ => (0..c).flat_map(|j| std::iter::repeat_n(j, n)).collect(),
    };

    let mut features = DenseMatrix::zeros(labels.len(), d);
    let mut z = vec![0.0; d];
    for (r, &y) in labels.iter().enumerate() {
        let cls = &comps[y];
        let pick = if cls.len() == 1 {
            0
        } else {
            pick_component(cls, rng.uniform())
        };
        factors[y][pick].draw_into(&cls[pick].mean, rng, &mut z, features.row_mut(r));
    }
    Dataset::new(features, labels, c)
}

fn pick_component(cls: &[Component], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, comp) in cls.iter().enumerate() {
        acc += comp.weight;
        if u < acc {
            return i;
        }
    }
    cls.len() - 1
}

/// Random labelled graph whose expected per-class fraction of
/// different-class neighbors equals `heterophily[c]`.
///
/// Undirected, one Bernoulli draw per node pair. A cross-class pair `(a, b)`
/// connects with probability `q · min(h_a, h_b)`; a same-class pair in class
/// `c` with the probability that makes the expected same-class degree
/// `X_c (1 - h_c) / h_c`, where `X_c` is the expected cross-class degree.
/// `q` puts the largest expected degree at [`TOY_GRAPH_DEGREE`]. Classes with
/// zero heterophily get same-class edges only, at that degree.
///
/// Node features are `N(e_c, I)` in `R^C`, so the result also works with
/// the feature-space measures.
pub fn toy_graph(n_per_class: usize, heterophily: &[f64], rng: &mut RngStream) -> Result<Dataset> {
    let c = heterophily.len();
    if c < 2 {
        return Err(Error::invalid("toy graph needs at least two classes"));
    }
    if n_per_class < 1 {
        return Err(Error::invalid(
            "toy graph needs at least one node per class",
        ));
    }
    if heterophily.iter().any(|h| !(0.0..=1.0).contains(h)) {
        return Err(Error::invalid("heterophily values must lie in [0, 1]"));
    }
    let n = n_per_class as f64;
    let h = heterophily;

    // expected degree per unit q for each class with h > 0
    let unit_degree = |a: usize| -> f64 {
        let cross: f64 = (0..c).filter(|&b| b != a).map(|b| n * h[a].min(h[b])).sum();
        cross / h[a]
    };
    let max_unit = (0..c)
        .filter(|&a| h[a] > 0.0)
        .map(unit_degree)
        .fold(0.0_f64, f64::max);
    let q = if max_unit > 0.0 {
        TOY_GRAPH_DEGREE / max_unit
    } else {
        0.0
    };
    let cross_p = |a: usize, b: usize| (q * h[a].min(h[b])).min(1.0);
    let same_p: Vec<f64> = (0..c)
        .map(|a| {
            if n_per_class < 2 {
                return 0.0;
            }
            let target = if h[a] > 0.0 {
                let cross: f64 = (0..c).filter(|&b| b != a).map(|b| n * cross_p(a, b)).sum();
                cross * (1.0 - h[a]) / h[a]
            } else {
                TOY_GRAPH_DEGREE
            };
            (target / (n - 1.0)).min(1.0)
        })
        .collect();

    let total = n_per_class * c;
    let labels: Vec<usize> = (0..total).map(|i| i / n_per_class).collect();
    let mut edges = Vec::new();
    for i in 0..total {
        for j in (i + 1)..total {
            let (a, b) = (labels[i], labels[j]);
            let p = if a == b { same_p[a] } else { cross_p(a, b) };
            if p > 0.0 && rng.bernoulli(p) {
                edges.push((i, j));
            }
        }
    }

    let mut features = DenseMatrix::zeros(total, c);
    for (r, &y) in labels.iter().enumerate() {
        let row = features.row_mut(r);
        for (j, v) in row.iter_mut().enumerate() {
            *v = f64::from(u8::from(j == y)) + rng.normal();
        }
    }
    Dataset::new(features, labels, c)?.with_graph(Graph {
        edges,
        directed: false,
    })
}

/// Nine-node, three-class neighborhood fixture.
///
/// Red nodes 0..3, blue 3..6, green 6..9. Edges are directed: `(a, b)` puts
/// `b` in the neighborhood of `a`. Red nodes see ½, ⅓, ⅓ of their neighbors
/// from other classes and blue nodes see 1, 1, ½, which a symmetric graph on
/// three blue nodes cannot produce (two blue nodes with only foreign
/// neighbors leave the third blue node no blue neighbor).
pub fn neighborhood_fixture() -> Dataset {
    const NEIGHBORS: [&[usize]; 9] = [
        &[1, 3],
        &[0, 2, 6],
        &[0, 1, 7],
        &[0, 6],
        &[1, 8],
        &[3, 8],
        &[7, 8],
        &[6, 8],
        &[6, 7],
    ];
    let edges = NEIGHBORS
        .iter()
        .enumerate()
        .flat_map(|(a, ns)| ns.iter().map(move |&b| (a, b)))
        .collect();
    let labels: Vec<usize> = (0..9).map(|i| i / 3).collect();
    let mut features = DenseMatrix::zeros(9, 3);
    for (r, &y) in labels.iter().enumerate() {
        features.set(r, y, 1.0);
    }
    Dataset::new(features, labels, 3)
        .and_then(|ds| {
            ds.with_graph(Graph {
                edges,
                directed: true,
            })
        })
        .expect("fixture is well formed")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{CovarianceMode, Purpose};

    fn rng(seed: u64) -> RngStream {
        RngStream::new(seed, Purpose::TaskGen)
    }

    #[test]
    fn binary_variance_ratio_is_k_squared() {
        let spec = GaussianTaskSpec::BinaryVariance {
            d: 2,
            eta: 1.0,
            sigma: 1.0,
            k: 3.0,
        };
        let ds = generate(&spec, 100_000, &mut rng(1)).unwrap();
        let stats = ds.class_stats(CovarianceMode::Full).unwrap();
        for axis in 0..2 {
            let ratio = stats[0].cov.get(axis, axis) / stats[1].cov.get(axis, axis);
            assert!((ratio / 9.0 - 1.0).abs() < 0.05, "ratio {ratio}");
        }
    }

    #[test]
    fn mixed_balanced_case_is_balanced() {
        let spec = GaussianTaskSpec::MixedPropVar {
            d: 3,
            eta: 1.0,
            sigma: 1.0,
            k: 1.0,
            v: 1.0,
        };
        let n = 100_000;
        let ds = generate(&spec, n, &mut rng(2)).unwrap();
        let counts = ds.class_counts();
        let se = (n as f64 * 0.25).sqrt();
        assert!((counts[0] as f64 - n as f64 / 2.0).abs() < 3.0 * se);
        let stats = ds.class_stats(CovarianceMode::Full).unwrap();
        let (a, b) = (stats[0].cov.trace(), stats[1].cov.trace());
        assert!((a / b - 1.0).abs() < 0.03);
    }

    #[test]
    fn mixed_proportions_follow_v() {
        let spec = GaussianTaskSpec::MixedPropVar {
            d: 2,
            eta: 1.0,
            sigma: 1.0,
            k: 2.0,
            v: 4.0,
        };
        let n = 50_000;
        let ds = generate(&spec, n, &mut rng(3)).unwrap();
        let frac = ds.class_counts()[1] as f64 / n as f64;
        let se = (0.8 * 0.2 / n as f64).sqrt();
        assert!((frac - 0.8).abs() < 4.0 * se, "{frac}");
    }

    #[test]
    fn local_two_cluster_near_fraction() {
        let spec = GaussianTaskSpec::LocalTwoCluster {
            sigma: 0.5,
            alpha: 0.1,
        };
        let n = 100_000;
        let ds = generate(&spec, n, &mut rng(4)).unwrap();
        let near = ds
            .features
            .iter_rows()
            .zip(&ds.labels)
            .filter(|(_, &y)| y == 1)
            .filter(|(x, _)| x[0] + x[1] < 4.0)
            .count();
        let frac = near as f64 / n as f64;
        // the cut at x0 + x1 = 4 misassigns a N(0, 2σ²) tail beyond distance 2
        let mis = crate::numerics::std_normal_cdf(-2.0 / (0.5 * 2f64.sqrt()));
        let expected = 0.1 * (1.0 - mis) + 0.9 * mis;
        let se = (expected * (1.0 - expected) / n as f64).sqrt();
        assert!((frac - expected).abs() < 5.0 * se, "{frac} vs {expected}");
    }

    #[test]
    fn true_stats_of_three_class_task() {
        let spec = GaussianTaskSpec::ThreeClassDistance {
            d: 2,
            eta: 4.0,
            sigma: 1.0,
        };
        let stats = true_stats(&spec).unwrap();
        assert_eq!(stats[0].mean, vec![4.0, 4.0]);
        assert_eq!(stats[1].mean, vec![0.0, 0.0]);
        assert_eq!(stats[2].mean, vec![-4.0, -4.0]);
        for s in &stats {
            assert_eq!(s.proportion, 1.0 / 3.0);
        }
    }

    #[test]
    fn true_stats_variance_and_noise() {
        let bv = true_stats(&GaussianTaskSpec::BinaryVariance {
            d: 3,
            eta: 1.0,
            sigma: 2.0,
            k: 1.0,
        })
        .unwrap();
        assert_eq!(bv[0].cov, bv[1].cov);

        let fnz = true_stats(&GaussianTaskSpec::FeatureNoise {
            d: 2,
            eta: 1.0,
            sigma: 1.0,
            eps1: 2.0,
            eps2: 0.0,
        })
        .unwrap();
        assert_eq!(fnz[0].cov.get(0, 0), 5.0);
        assert_eq!(fnz[1].cov.get(1, 1), 1.0);
    }

    #[test]
    fn local_mixture_moments() {
        let spec = GaussianTaskSpec::LocalTwoCluster {
            sigma: 1.0,
            alpha: 0.25,
        };
        let stats = true_stats(&spec).unwrap();
        // mean 0.25·1 + 0.75·3, covariance I + α(1-α)·[2,2][2,2]ᵀ
        assert_eq!(stats[1].mean, vec![2.5, 2.5]);
        assert!((stats[1].cov.get(0, 1) - 0.75).abs() < 1e-15);
        assert!((stats[1].cov.get(0, 0) - 1.75).abs() < 1e-15);
    }

    #[test]
    fn long_tail_counts_and_priors() {
        let priors = geometric_priors(10, 100.0);
        assert!((priors[0] / priors[9] - 100.0).abs() < 1e-9);
        let counts = apportion(5000, &priors);
        assert_eq!(counts.iter().sum::<usize>(), 5000);
        assert!(counts.windows(2).all(|w| w[0] >= w[1]));

        let spec = GaussianTaskSpec::LongTailMulticlass {
            c: 10,
            d: 10,
            imbalance_ratio: 100.0,
            separation: 3.0,
            sigma: 1.0,
            sigma_scale: None,
        };
        let ds = generate(&spec, 5000, &mut rng(5)).unwrap();
        assert_eq!(ds.class_counts(), counts);
    }

    #[test]
    fn long_tail_rejects_empty_classes() {
        let spec = GaussianTaskSpec::LongTailMulticlass {
            c: 10,
            d: 10,
            imbalance_ratio: 100.0,
            separation: 3.0,
            sigma: 1.0,
            sigma_scale: None,
        };
        assert!(matches!(
            generate(&spec, 20, &mut rng(5)),
            Err(Error::EmptyClass(_))
        ));
    }

    #[test]
    fn invalid_specs_rejected() {
        let bad = [
            GaussianTaskSpec::BinaryVariance {
                d: 2,
                eta: 0.0,
                sigma: 1.0,
                k: 2.0,
            },
            GaussianTaskSpec::MixedPropVar {
                d: 2,
                eta: 1.0,
                sigma: 1.0,
                k: 0.5,
                v: 1.0,
            },
            GaussianTaskSpec::LocalTwoCluster {
                sigma: 1.0,
                alpha: 1.0,
            },
        ];
        for spec in bad {
            assert!(generate(&spec, 10, &mut rng(0)).is_err(), "{spec:?}");
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = GaussianTaskSpec::MixedPropVar {
            d: 5,
            eta: 1.0,
            sigma: 1.0,
            k: 3.0,
            v: 3.0,
        };
        let a = generate(&spec, 500, &mut rng(11)).unwrap();
        let b = generate(&spec, 500, &mut rng(11)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn spec_parses_from_toml() {
        let spec: GaussianTaskSpec = toml::from_str(
            "variant = \"mixed_prop_var\"\nd = 5\neta = 1.0\nsigma = 1.0\nk = 3.0\nv = 3.0\n",
        )
        .unwrap();
        assert_eq!(spec.n_classes(), 2);
        let err = toml::from_str::<GaussianTaskSpec>(
            "variant = \"local_two_cluster\"\nsigma = 1.0\nalpha = 0.2\nbogus = 1\n",
        );
        assert!(err.is_err());
    }

    #[test]
    fn toy_graph_homophilous() {
        let ds = toy_graph(50, &[0.0, 0.0], &mut RngStream::new(1, Purpose::Graph)).unwrap();
        let g = ds.graph.as_ref().unwrap();
        assert!(!g.edges.is_empty());
        assert!(g.edges.iter().all(|&(a, b)| ds.labels[a] == ds.labels[b]));
    }

    #[test]
    fn toy_graph_rejects_bad_input() {
        let mut r = RngStream::new(1, Purpose::Graph);
        assert!(toy_graph(0, &[0.1, 0.2], &mut r).is_err());
        assert!(toy_graph(5, &[1.5, 0.2], &mut r).is_err());
        assert!(toy_graph(5, &[0.5], &mut r).is_err());
    }
}
