//! Softmax cross-entropy with class-pair logit offsets, and the builders of
//! the offset matrix `δ` for each loss in the family.
//!
//! `δ` is a `C × C` matrix; row `y` is added to the logits of every sample
//! whose label is `y`. Plain cross-entropy is `δ = 0`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::distance_stats;
use crate::numerics::{norm_sq, sub, ClassStats, DenseMatrix};

/// Bound on `|log(Δ̄ / Δ_yc)|`; coincident centres would otherwise give ∞.
pub const DISTANCE_CLAMP: f64 = 20.0;

/// Number of perturbation terms per class pair.
pub const TERMS: usize = 3;

/// The three perturbation terms, in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    /// `log(π_y / π_c)`.
    Proportion = 0,
    /// `Δwᵀ Σ_y Δw / ‖Δw‖²`.
    Variance = 1,
    /// `log(Δ̄ / Δ_yc)`.
    Distance = 2,
}

impl Term {
    pub const ALL: [Term; 3] = [Term::Proportion, Term::Variance, Term::Distance];

    pub fn name(self) -> &'static str {
        match self {
            Term::Proportion => "proportion",
            Term::Variance => "variance",
            Term::Distance => "distance",
        }
    }
}

/// Loss applied to `log_sum_exp(z + δ_y) - (z_y + δ_yy)`; returns the loss and
/// writes `softmax(z + δ_y)` into `probs`. Max-subtraction keeps it finite for
/// any finite input.
pub fn perturbed_ce_probs(
    logits: &[f64],
    y: usize,
    delta_row: Option<&[f64]>,
    probs: &mut [f64],
) -> f64 {
    let c = logits.len();
    for j in 0..c {
        probs[j] = logits[j] + delta_row.map_or(0.0, |d| d[j]);
    }
    let max = probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let target = probs[y] - max;
    let mut total = 0.0;
    for p in probs.iter_mut() {
        *p = (*p - max).exp();
        total += *p;
    }
    for p in probs.iter_mut() {
        *p /= total;
    }
    total.ln() - target
}

/// Loss and gradient with respect to the logits (`softmax - onehot`).
pub fn perturbed_ce(logits: &[f64], y: usize, delta_row: &[f64]) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; logits.len()];
    let loss = perturbed_ce_probs(logits, y, Some(delta_row), &mut grad);
    grad[y] -= 1.0;
    (loss, grad)
}

/// `δ_yc = λ log π_c` for every entry.
pub fn la_delta(priors: &[f64], lambda: f64) -> Result<DenseMatrix> {
    if let Some(p) = priors.iter().find(|&&p| p.is_nan() || p <= 0.0) {
        return Err(Error::invalid(format!(
            "class prior must be positive, got {p}"
        )));
    }
    let c = priors.len();
    let mut m = DenseMatrix::zeros(c, c);
    for y in 0..c {
        for (j, p) in priors.iter().enumerate() {
            m.set(y, j, lambda * p.ln());
        }
    }
    Ok(m)
}

/// Hyper-parameters of the unified loss: one weight per term shared by all
/// pairs, or one weight per term and ordered pair `y ≠ c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationParams {
    pub n_classes: usize,
    pub per_pair: bool,
    /// `[λ_prop, λ_var, λ_dist]` when shared; otherwise `TERMS` values for
    /// each `(y, c ≠ y)` in row-major order over `y`, then `c`.
    pub values: Vec<f64>,
}

impl PerturbationParams {
    pub fn global(n_classes: usize, lambdas: [f64; 3]) -> Self {
        Self {
            n_classes,
            per_pair: false,
            values: lambdas.to_vec(),
        }
    }

    pub fn per_pair(n_classes: usize, init: [f64; 3]) -> Self {
        let pairs = n_classes * (n_classes - 1);
        Self {
            n_classes,
            per_pair: true,
            values: init.iter().copied().cycle().take(pairs * TERMS).collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            values: vec![0.0; self.values.len()],
            ..self.clone()
        }
    }

    pub fn expected_len(&self) -> usize {
        if self.per_pair {
            self.n_classes * (self.n_classes - 1) * TERMS
        } else {
            TERMS
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::invalid("perturbation needs at least two classes"));
        }
        if self.values.len() != self.expected_len() {
            return Err(Error::DimensionMismatch {
                expected: self.expected_len(),
                found: self.values.len(),
            });
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence("non-finite perturbation weight".into()));
        }
        Ok(())
    }

    /// Storage index of `λ_{y c, term}` (`y ≠ c`).
    #[inline]
    pub fn slot(&self, y: usize, c: usize, term: usize) -> usize {
        if !self.per_pair {
            return term;
        }
        debug_assert_ne!(y, c);
        let rank = if c < y { c } else { c - 1 };
        (y * (self.n_classes - 1) + rank) * TERMS + term
    }

    #[inline]
    pub fn lambda(&self, y: usize, c: usize, term: Term) -> f64 {
        self.values[self.slot(y, c, term as usize)]
    }

    /// Zeroes every weight of the given term.
    pub fn clear_term(&mut self, term: Term) {
        let t = term as usize;
        for (i, v) in self.values.iter_mut().enumerate() {
            if i % TERMS == t {
                *v = 0.0;
            }
        }
    }
}

/// Snapshot of class statistics and classifier rows from which `δ` is built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationContext {
    pub n_classes: usize,
    pub stats: Vec<ClassStats>,
    pub weights: DenseMatrix,
    /// `Δwᵀ Σ_y Δw` per `(y, c)`, zero on the diagonal.
    pub mapped: DenseMatrix,
    /// Per-term multipliers, `[(y * C + c) * TERMS + term]`, zero for `y = c`.
    pub multipliers: Vec<f64>,
    pub mean_distance: f64,
    /// Incremented by the trainer on every refresh.
    pub generation: u64,
}

impl PerturbationContext {
    /// `weights` holds one classifier row per class in the feature space of
    /// `stats`.
    pub fn new(stats: Vec<ClassStats>, weights: DenseMatrix) -> Result<Self> {
        let c = stats.len();
        if c < 2 {
            return Err(Error::invalid(
                "perturbation context needs at least two classes",
            ));
        }
        if weights.rows() != c {
            return Err(Error::DimensionMismatch {
                expected: c,
                found: weights.rows(),
            });
        }
        if let Some(s) = stats.iter().find(|s| s.mean.len() != weights.cols()) {
            return Err(Error::DimensionMismatch {
                expected: weights.cols(),
                found: s.mean.len(),
            });
        }
        let centers: Vec<Vec<f64>> = stats.iter().map(|s| s.mean.clone()).collect();
        let dist = distance_stats(&centers)?;
        let mut mapped = DenseMatrix::zeros(c, c);
        let mut multipliers = vec![0.0; c * c * TERMS];
        for y in 0..c {
            for j in 0..c {
                if y == j {
                    continue;
                }
                let dw = sub(weights.row(y), weights.row(j));
                let q = stats[y].cov.quad_form(&dw)?;
                mapped.set(y, j, q);
                let nn = norm_sq(&dw);
                let base = (y * c + j) * TERMS;
                multipliers[base] = (stats[y].proportion / stats[j].proportion).ln();
                multipliers[base + 1] = if nn > 0.0 { q / nn } else { 0.0 };
                multipliers[base + 2] = distance_term(dist.mean, dist.matrix.get(y, j));
            }
        }
        if multipliers.iter().any(|m| !m.is_finite()) {
            return Err(Error::Divergence(
                "non-finite perturbation multiplier".into(),
            ));
        }
        Ok(Self {
            n_classes: c,
            stats,
            weights,
            mapped,
            multipliers,
            mean_distance: dist.mean,
            generation: 0,
        })
    }

    #[inline]
    pub fn multiplier(&self, y: usize, c: usize, term: Term) -> f64 {
        self.multipliers[(y * self.n_classes + c) * TERMS + term as usize]
    }

    fn term_delta(&self, term: Term, lambda: f64) -> DenseMatrix {
        let c = self.n_classes;
        let mut m = DenseMatrix::zeros(c, c);
        for y in 0..c {
            for j in 0..c {
                if y != j {
                    m.set(y, j, lambda * self.multiplier(y, j, term));
                }
            }
        }
        m
    }

    /// `δ_yc = λ Δwᵀ Σ_y Δw` off the diagonal.
    pub fn isda_delta(&self, lambda: f64) -> DenseMatrix {
        let mut m = self.mapped.clone();
        m.scale_in_place(lambda);
        m
    }

    /// `δ_yc = λ Δwᵀ Σ_y Δw / ‖Δw‖²` off the diagonal; 0 where `Δw = 0`.
    pub fn nisda_delta(&self, lambda: f64) -> DenseMatrix {
        self.term_delta(Term::Variance, lambda)
    }

    /// `δ_yc = λ log(Δ̄ / Δ_yc)` off the diagonal.
    pub fn distance_delta(&self, lambda: f64) -> DenseMatrix {
        self.term_delta(Term::Distance, lambda)
    }

    /// Sum of the three weighted terms off the diagonal.
    pub fn metalad_delta(&self, omega: &PerturbationParams) -> Result<DenseMatrix> {
        if omega.n_classes != self.n_classes {
            return Err(Error::DimensionMismatch {
                expected: self.n_classes,
                found: omega.n_classes,
            });
        }
        omega.validate()?;
        let c = self.n_classes;
        let mut m = DenseMatrix::zeros(c, c);
        for y in 0..c {
            for j in 0..c {
                if y == j {
                    continue;
                }
                let v: f64 = Term::ALL
                    .iter()
                    .map(|&t| omega.lambda(y, j, t) * self.multiplier(y, j, t))
                    .sum();
                m.set(y, j, v);
            }
        }
        Ok(m)
    }

    /// Mean over the batch of `∂l/∂Ω`. For a sample of class `y` the
    /// derivative with respect to `λ_{y c, t}` is `p_c · M_{y c, t}`, with `p`
    /// the perturbed softmax.
    pub fn omega_gradient(
        &self,
        logits: &DenseMatrix,
        labels: &[usize],
        omega: &PerturbationParams,
    ) -> Result<Vec<f64>> {
        let delta = self.metalad_delta(omega)?;
        let c = self.n_classes;
        let mut grad = vec![0.0; omega.values.len()];
        let mut probs = vec![0.0; c];
        for (z, &y) in logits.iter_rows().zip(labels) {
            perturbed_ce_probs(z, y, Some(delta.row(y)), &mut probs);
            self.accumulate_omega(y, &probs, 1.0, omega, &mut grad);
        }
        let n = labels.len().max(1) as f64;
        grad.iter_mut().for_each(|g| *g /= n);
        Ok(grad)
    }

    /// Adds `scale · s_c · M_{y c, t}` to the slot of every `λ_{y c, t}`.
    #[inline]
    pub fn accumulate_omega(
        &self,
        y: usize,
        per_class: &[f64],
        scale: f64,
        omega: &PerturbationParams,
        grad: &mut [f64],
    ) {
        for (j, &s) in per_class.iter().enumerate() {
            if j == y {
                continue;
            }
            for t in Term::ALL {
                grad[omega.slot(y, j, t as usize)] += scale * s * self.multiplier(y, j, t);
            }
        }
    }
}

fn distance_term(mean: f64, dist: f64) -> f64 {
    if mean == 0.0 && dist == 0.0 {
        return 0.0;
    }
    (mean / dist).ln().clamp(-DISTANCE_CLAMP, DISTANCE_CLAMP)
}

/// Loss selection for training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LossSpec {
    CrossEntropy,
    /// Cross-entropy with sample weight `1 / (C π_y)`.
    Reweighted,
    LogitAdjusted {
        lambda: f64,
    },
    Isda {
        lambda: f64,
    },
    Nisda {
        lambda: f64,
    },
    DistanceOnly {
        lambda: f64,
    },
    /// Unified loss with fixed weights.
    MetaLad {
        omega: PerturbationParams,
    },
}

impl LossSpec {
    /// `true` when `δ` depends on the classifier rows or class statistics.
    pub fn needs_context(&self) -> bool {
        !matches!(
            self,
            Self::CrossEntropy | Self::Reweighted | Self::LogitAdjusted { .. }
        )
    }

    /// `δ` for this loss, or `None` for plain cross-entropy.
    pub fn delta(
        &self,
        priors: &[f64],
        ctx: Option<&PerturbationContext>,
    ) -> Result<Option<DenseMatrix>> {
        let need = || ctx.ok_or_else(|| Error::invalid("loss needs a perturbation context"));
        Ok(match self {
            Self::CrossEntropy | Self::Reweighted => None,
            Self::LogitAdjusted { lambda } => Some(la_delta(priors, *lambda)?),
            Self::Isda { lambda } => Some(need()?.isda_delta(*lambda)),
            Self::Nisda { lambda } => Some(need()?.nisda_delta(*lambda)),
            Self::DistanceOnly { lambda } => Some(need()?.distance_delta(*lambda)),
            Self::MetaLad { omega } => Some(need()?.metalad_delta(omega)?),
        })
    }

    /// Per-class sample weights, or `None` for unit weights.
    pub fn class_weights(&self, priors: &[f64]) -> Option<Vec<f64>> {
        match self {
            Self::Reweighted => {
                let c = priors.len() as f64;
                Some(priors.iter().map(|p| 1.0 / (c * p)).collect())
            }
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    use crate::numerics::{Purpose, RngStream};

    fn stats2(cov0: DenseMatrix, cov1: DenseMatrix, p0: f64) -> Vec<ClassStats> {
        vec![
            ClassStats {
                proportion: p0,
                mean: vec![1.0, 0.0],
                cov: cov0,
            },
            ClassStats {
                proportion: 1.0 - p0,
                mean: vec![-1.0, 0.0],
                cov: cov1,
            },
        ]
    }

    fn random_context(rng: &mut RngStream, c: usize, d: usize) -> PerturbationContext {
        let mut raw: Vec<f64> = (0..c).map(|_| rng.uniform() + 0.1).collect();
        let total: f64 = raw.iter().sum();
        raw.iter_mut().for_each(|p| *p /= total);
        let stats = raw
            .iter()
            .map(|&p| {
                let a = DenseMatrix::from_vec(d, d, (0..d * d).map(|_| rng.normal()).collect())
                    .unwrap();
                let mut cov = DenseMatrix::zeros(d, d);
                for i in 0..d {
                    for j in 0..d {
                        let v: f64 = (0..d).map(|k| a.get(i, k) * a.get(j, k)).sum();
                        cov.set(i, j, v);
                    }
                }
                ClassStats {
                    proportion: p,
                    mean: (0..d).map(|_| 2.0 * rng.normal()).collect(),
                    cov,
                }
            })
            .collect();
        let w = DenseMatrix::from_vec(c, d, (0..c * d).map(|_| rng.normal()).collect()).unwrap();
        PerturbationContext::new(stats, w).unwrap()
    }

    #[test]
    fn zero_delta_is_cross_entropy() {
        let z = [0.3, -1.2, 2.0];
        let (loss, grad) = perturbed_ce(&z, 2, &[0.0; 3]);
        let lse = z.iter().map(|v: &f64| v.exp()).sum::<f64>().ln();
        assert!((loss - (lse - 2.0)).abs() < 1e-15);
        assert!(grad.iter().sum::<f64>().abs() < 1e-15);
    }

    #[test]
    fn hand_computed_binary_loss() {
        let (loss, _) = perturbed_ce(&[0.0, 0.0], 0, &[0.0, 3f64.ln()]);
        assert!((loss - 4f64.ln()).abs() < 1e-15);
        assert!((loss - 1.386294).abs() < 1e-6);
    }

    #[test]
    fn large_logits_stay_finite() {
        let (loss, grad) = perturbed_ce(&[1000.0, -1000.0, 0.0], 1, &[0.0; 3]);
        assert!((loss - 2000.0).abs() < 1e-9);
        assert!(grad.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn la_uniform_priors_is_a_shift() {
        let d = la_delta(&[0.25; 4], 1.7).unwrap();
        let z = [0.1, 0.5, -0.3, 2.0];
        for y in 0..4 {
            let a = perturbed_ce(&z, y, d.row(y)).0;
            let b = perturbed_ce(&z, y, &[0.0; 4]).0;
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(
            la_delta(&[0.5, 0.5], 0.0).unwrap(),
            DenseMatrix::zeros(2, 2)
        );
        assert!(la_delta(&[1.0, 0.0], 1.0).is_err());
    }

    #[test]
    fn la_penalizes_tail_samples_more() {
        // the tail target faces a head competitor offset that is larger than
        // its own, so its loss rises; the head sample's loss falls
        let d = la_delta(&[0.9, 0.1], 1.0).unwrap();
        assert!(d.get(1, 1) - d.get(1, 0) < 0.0);
        let z = [0.0, 0.0];
        let base = perturbed_ce(&z, 1, &[0.0, 0.0]).0;
        assert!(perturbed_ce(&z, 1, d.row(1)).0 > base);
        assert!(perturbed_ce(&z, 0, d.row(0)).0 < base);
    }

    #[test]
    fn isda_and_nisda_identity_covariance() {
        let stats = stats2(DenseMatrix::identity(2), DenseMatrix::identity(2), 0.5);
        let w = DenseMatrix::from_rows(&[vec![2.0, 1.0], vec![-1.0, 3.0]]).unwrap();
        let ctx = PerturbationContext::new(stats, w).unwrap();
        let nn = 9.0 + 4.0;
        assert!((ctx.isda_delta(0.5).get(0, 1) - 0.5 * nn).abs() < 1e-12);
        assert!((ctx.nisda_delta(0.5).get(1, 0) - 0.5).abs() < 1e-12);
        assert_eq!(ctx.isda_delta(0.5).get(0, 0), 0.0);
    }

    #[test]
    fn isda_nisda_hand_fixture() {
        let cov0 = DenseMatrix::from_rows(&[vec![4.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let stats = stats2(cov0, DenseMatrix::identity(2), 0.5);
        let w = DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let ctx = PerturbationContext::new(stats, w).unwrap();
        assert_eq!(ctx.isda_delta(1.5).get(0, 1), 6.0);
        assert_eq!(ctx.nisda_delta(1.5).get(0, 1), 6.0);
    }

    #[test]
    fn nisda_zero_when_rows_coincide() {
        let stats = stats2(DenseMatrix::identity(2), DenseMatrix::identity(2), 0.5);
        let w = DenseMatrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let ctx = PerturbationContext::new(stats, w).unwrap();
        assert_eq!(ctx.nisda_delta(3.0), DenseMatrix::zeros(2, 2));
    }

    #[test]
    fn distance_term_is_clamped() {
        let mut stats = stats2(DenseMatrix::identity(2), DenseMatrix::identity(2), 0.5);
        stats.push(ClassStats {
            proportion: 0.0,
            mean: vec![1.0, 0.0],
            cov: DenseMatrix::identity(2),
        });
        for s in &mut stats {
            s.proportion = 1.0 / 3.0;
        }
        let w = DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let ctx = PerturbationContext::new(stats, w).unwrap();
        assert_eq!(ctx.multiplier(0, 2, Term::Distance), DISTANCE_CLAMP);
    }

    #[test]
    fn per_pair_slots_are_distinct() {
        let p = PerturbationParams::per_pair(4, [1.0, 2.0, 3.0]);
        assert_eq!(p.values.len(), 36);
        let mut seen = std::collections::HashSet::new();
        for y in 0..4 {
            for c in (0..4).filter(|&c| c != y) {
                for t in 0..3 {
                    assert!(seen.insert(p.slot(y, c, t)));
                    assert_eq!(p.values[p.slot(y, c, t)], [1.0, 2.0, 3.0][t]);
                }
            }
        }
    }

    #[test]
    fn omega_gradient_matches_finite_differences() {
        let mut rng = RngStream::new(5, Purpose::Init);
        for trial in 0..20 {
            let c = 2 + trial % 3;
            let ctx = random_context(&mut rng, c, 3);
            let mut omega = PerturbationParams::per_pair(c, [0.0; 3]);
            omega
                .values
                .iter_mut()
                .for_each(|v| *v = 0.5 * rng.normal());
            let n = 6;
            let logits =
                DenseMatrix::from_vec(n, c, (0..n * c).map(|_| 2.0 * rng.normal()).collect())
                    .unwrap();
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
            let grad = ctx.omega_gradient(&logits, &labels, &omega).unwrap();
            let loss = |om: &PerturbationParams| {
                let delta = ctx.metalad_delta(om).unwrap();
                logits
                    .iter_rows()
                    .zip(&labels)
                    .map(|(z, &y)| perturbed_ce(z, y, delta.row(y)).0)
                    .sum::<f64>()
                    / n as f64
            };
            let h = 1e-5;
            for (i, gi) in grad.iter().enumerate() {
                let mut plus = omega.clone();
                plus.values[i] += h;
                let mut minus = omega.clone();
                minus.values[i] -= h;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let err = (fd - gi).abs() / fd.abs().max(gi.abs()).max(1e-3);
                assert!(err < 1e-5, "slot {i}: {fd} vs {gi}");
            }
        }
    }
}
