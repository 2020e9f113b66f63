//! Imbalance measures: proportions, mapped and projected variance along a
//! direction, centre distances, an equidistance penalty and the local
//! heterophily index of graph nodes.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::numerics::{norm_sq, sub, ClassStats, CovarianceMode, DenseMatrix};

/// `wᵀ Σ w`.
pub fn mapped_variance(w: &[f64], cov: &DenseMatrix) -> Result<f64> {
    if norm_sq(w) == 0.0 {
        return Err(Error::DegenerateDirection("zero direction vector"));
    }
    cov.quad_form(w)
}

/// `wᵀ Σ w / wᵀ w`, invariant to rescaling `w`.
pub fn projected_variance(w: &[f64], cov: &DenseMatrix) -> Result<f64> {
    Ok(mapped_variance(w, cov)? / norm_sq(w))
}

/// Ratio of mapped variances `wᵀΣ_a w / wᵀΣ_b w`.
pub fn variance_imbalance_nu(cov_a: &DenseMatrix, cov_b: &DenseMatrix, w: &[f64]) -> Result<f64> {
    let den = mapped_variance(w, cov_b)?;
    if den <= 0.0 {
        return Err(Error::DegenerateDirection("zero variance along direction"));
    }
    Ok(mapped_variance(w, cov_a)? / den)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceStats {
    /// `Δ[y][c] = ‖μ_y - μ_c‖`.
    pub matrix: DenseMatrix,
    /// Mean of `Δ` over unordered pairs.
    pub mean: f64,
    /// Mean distance from each class to the others.
    pub per_class: Vec<f64>,
}

pub fn distance_stats(centers: &[Vec<f64>]) -> Result<DistanceStats> {
    let c = centers.len();
    if c < 2 {
        return Err(Error::invalid(
            "distance statistics need at least two classes",
        ));
    }
    let mut matrix = DenseMatrix::zeros(c, c);
    let mut total = 0.0;
    for a in 0..c {
        for b in (a + 1)..c {
            let dist = norm_sq(&sub(&centers[a], &centers[b])).sqrt();
            matrix.set(a, b, dist);
            matrix.set(b, a, dist);
            total += dist;
        }
    }
    let per_class = (0..c)
        .map(|a| matrix.row(a).iter().sum::<f64>() / (c - 1) as f64)
        .collect();
    Ok(DistanceStats {
        matrix,
        mean: total / (c * (c - 1) / 2) as f64,
        per_class,
    })
}

/// `Σ_{a<b} (‖μ_a - μ_b‖² - u)²` with `u` the mean squared pairwise distance.
pub fn equidistance_penalty(centers: &[Vec<f64>]) -> Result<f64> {
    let c = centers.len();
    if c < 2 {
        return Err(Error::invalid(
            "equidistance penalty needs at least two classes",
        ));
    }
    let mut sq = Vec::with_capacity(c * (c - 1) / 2);
    for a in 0..c {
        for b in (a + 1)..c {
            sq.push(norm_sq(&sub(&centers[a], &centers[b])));
        }
    }
    let u = sq.iter().sum::<f64>() / sq.len() as f64;
    Ok(sq.iter().map(|s| (s - u).powi(2)).sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LdiReport {
    /// Fraction of each node's neighbors carrying a different label; 0 for
    /// isolated nodes.
    pub per_node: Vec<f64>,
    /// Mean node value per class.
    pub per_class: Vec<f64>,
}

pub fn ldi(ds: &Dataset) -> Result<LdiReport> {
    let graph = ds
        .graph
        .as_ref()
        .ok_or_else(|| Error::invalid("dataset has no graph"))?;
    let n = ds.len();
    let per_node: Vec<f64> = graph
        .neighbors(n)
        .iter()
        .enumerate()
        .map(|(i, ns)| {
            if ns.is_empty() {
                0.0
            } else {
                let other = ns.iter().filter(|&&j| ds.labels[j] != ds.labels[i]).count();
                other as f64 / ns.len() as f64
            }
        })
        .collect();
    let mut sums = vec![0.0; ds.n_classes];
    for (v, &y) in per_node.iter().zip(&ds.labels) {
        sums[y] += v;
    }
    let per_class = sums
        .into_iter()
        .zip(ds.class_counts())
        .map(|(s, k)| if k == 0 { 0.0 } else { s / k as f64 })
        .collect();
    Ok(LdiReport {
        per_node,
        per_class,
    })
}

/// Measures for one ordered class pair `(a, b)`, `a < b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairReport {
    pub a: usize,
    pub b: usize,
    pub mapped_var_a: f64,
    pub mapped_var_b: f64,
    pub projected_var_a: f64,
    pub projected_var_b: f64,
    /// `ν = mapped_var_a / mapped_var_b`.
    pub nu: f64,
    pub distance: f64,
    /// `log(Δ̄ / Δ_ab)`.
    pub log_distance_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceReport {
    pub proportions: Vec<f64>,
    pub pairs: Vec<PairReport>,
    pub distances: DistanceStats,
    pub equidistance_penalty: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ldi: Option<LdiReport>,
}

/// Aggregates every measure. The direction for pair `(a, b)` is
/// `weights[a] - weights[b]` when classifier weight rows are supplied and
/// `μ_a - μ_b` otherwise.
pub fn report(stats: &[ClassStats], weights: Option<&DenseMatrix>) -> Result<ImbalanceReport> {
    let c = stats.len();
    if c < 2 {
        return Err(Error::invalid(format!(
            "imbalance measures need at least two classes, found {c}"
        )));
    }
    if let Some(w) = weights {
        if w.rows() != c {
            return Err(Error::DimensionMismatch {
                expected: c,
                found: w.rows(),
            });
        }
    }
    let centers: Vec<Vec<f64>> = stats.iter().map(|s| s.mean.clone()).collect();
    let distances = distance_stats(&centers)?;
    let mut pairs = Vec::new();
    for a in 0..c {
        for b in (a + 1)..c {
            let dir = match weights {
                Some(w) => sub(w.row(a), w.row(b)),
                None => sub(&centers[a], &centers[b]),
            };
            let mapped_a = mapped_variance(&dir, &stats[a].cov)?;
            let mapped_b = mapped_variance(&dir, &stats[b].cov)?;
            let nn = norm_sq(&dir);
            let dist = distances.matrix.get(a, b);
            pairs.push(PairReport {
                a,
                b,
                mapped_var_a: mapped_a,
                mapped_var_b: mapped_b,
                projected_var_a: mapped_a / nn,
                projected_var_b: mapped_b / nn,
                nu: variance_imbalance_nu(&stats[a].cov, &stats[b].cov, &dir)?,
                distance: dist,
                log_distance_ratio: (distances.mean / dist).ln(),
            });
        }
    }
    Ok(ImbalanceReport {
        proportions: stats.iter().map(|s| s.proportion).collect(),
        pairs,
        equidistance_penalty: equidistance_penalty(&centers)?,
        distances,
        ldi: None,
    })
}

/// [`report`] on empirical statistics, plus LDI when the dataset has a graph.
pub fn report_dataset(ds: &Dataset, weights: Option<&DenseMatrix>) -> Result<ImbalanceReport> {
    if ds.n_classes < 2 {
        return Err(Error::invalid(
            "dataset has a single class; nothing to compare",
        ));
    }
    let stats = ds.class_stats(CovarianceMode::Auto)?;
    let mut r = report(&stats, weights)?;
    if ds.graph.is_some() {
        r.ldi = Some(ldi(ds)?);
    }
    Ok(r)
}

impl ImbalanceReport {
    /// One CSV row per class pair.
    pub fn write_pairs_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "a",
            "b",
            "proportion_a",
            "proportion_b",
            "mapped_var_a",
            "mapped_var_b",
            "projected_var_a",
            "projected_var_b",
            "nu",
            "distance",
            "log_distance_ratio",
        ])?;
        for p in &self.pairs {
            out.write_record([
                p.a.to_string(),
                p.b.to_string(),
                format!("{:?}", self.proportions[p.a]),
                format!("{:?}", self.proportions[p.b]),
                format!("{:?}", p.mapped_var_a),
                format!("{:?}", p.mapped_var_b),
                format!("{:?}", p.projected_var_a),
                format!("{:?}", p.projected_var_b),
                format!("{:?}", p.nu),
                format!("{:?}", p.distance),
                format!("{:?}", p.log_distance_ratio),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}
