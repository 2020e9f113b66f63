//! Small differentiable models, SGD with momentum, and the epoch loop used by
//! every baseline and by the inner step of the bilevel trainer.
//!
//! Parameters live in one flat vector. The "feature" a model hands to the
//! perturbation context is its input to the last layer: the raw input for
//! the linear model, the hidden activation for the MLP. The last layer's
//! weight rows are the per-class classifier rows.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::losses::{perturbed_ce_probs, LossSpec, PerturbationContext, PerturbationParams, Term};
use crate::numerics::{estimate_class_stats, CovarianceMode, DenseMatrix, Purpose, RngStream};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ILABCK01";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Self::Relu => x.max(0.0),
            Self::Tanh => x.tanh(),
            Self::Identity => x,
        }
    }

    /// Derivative from the pre-activation `x` and the output `y`.
    #[inline]
    fn slope(self, x: f64, y: f64) -> f64 {
        match self {
            Self::Relu => f64::from(u8::from(x > 0.0)),
            Self::Tanh => 1.0 - y * y,
            Self::Identity => 1.0,
        }
    }

    fn code(self) -> u8 {
        self as u8
    }

    fn from_code(c: u8) -> Result<Self> {
        Ok(match c {
            0 => Self::Relu,
            1 => Self::Tanh,
            2 => Self::Identity,
            _ => return Err(Error::Format(format!("unknown activation code {c}"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    Linear {
        d: usize,
        c: usize,
    },
    Mlp {
        d: usize,
        h: usize,
        c: usize,
        activation: Activation,
    },
}

impl Architecture {
    pub fn input_dim(&self) -> usize {
        match *self {
            Self::Linear { d, .. } | Self::Mlp { d, .. } => d,
        }
    }

    pub fn n_classes(&self) -> usize {
        match *self {
            Self::Linear { c, .. } | Self::Mlp { c, .. } => c,
        }
    }

    /// Width of the representation fed to the last layer.
    pub fn feature_dim(&self) -> usize {
        match *self {
            Self::Linear { d, .. } => d,
            Self::Mlp { h, .. } => h,
        }
    }

    pub fn n_params(&self) -> usize {
        match *self {
            Self::Linear { d, c } => c * d + c,
            Self::Mlp { d, h, c, .. } => h * d + h + c * h + c,
        }
    }
}

/// Model choice in configuration files.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    #[default]
    Linear,
    Mlp {
        hidden: usize,
        #[serde(default)]
        activation: Activation,
    },
}

impl ModelSpec {
    pub fn architecture(&self, d: usize, c: usize) -> Architecture {
        match *self {
            Self::Linear => Architecture::Linear { d, c },
            Self::Mlp { hidden, activation } => Architecture::Mlp {
                d,
                h: hidden,
                c,
                activation,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub arch: Architecture,
    pub params: Vec<f64>,
}

/// Activations kept from a forward pass for the backward and tangent passes.
#[derive(Debug, Clone)]
pub struct Forward {
    /// MLP hidden pre-activations (`n × h`); empty for the linear model.
    pub hidden_pre: DenseMatrix,
    /// Input to the last layer (`n × feature_dim`).
    pub features: DenseMatrix,
    pub logits: DenseMatrix,
}

impl Model {
    pub fn zeros(arch: Architecture) -> Self {
        Self {
            arch,
            params: vec![0.0; arch.n_params()],
        }
    }

    /// Weights `N(0, 1/fan_in)`, biases zero.
    pub fn init(arch: Architecture, rng: &mut RngStream) -> Self {
        let mut m = Self::zeros(arch);
        match arch {
            Architecture::Linear { d, c } => {
                let s = 1.0 / (d as f64).sqrt();
                m.params[..c * d]
                    .iter_mut()
                    .for_each(|p| *p = s * rng.normal());
            }
            Architecture::Mlp { d, h, c, .. } => {
                let s1 = 1.0 / (d as f64).sqrt();
                m.params[..h * d]
                    .iter_mut()
                    .for_each(|p| *p = s1 * rng.normal());
                let s2 = 1.0 / (h as f64).sqrt();
                let off = h * d + h;
                m.params[off..off + c * h]
                    .iter_mut()
                    .for_each(|p| *p = s2 * rng.normal());
            }
        }
        m
    }

    /// Offset of the last layer's weight block and its shape `(c, p)`.
    fn head(&self) -> (usize, usize, usize) {
        match self.arch {
            Architecture::Linear { d, c } => (0, c, d),
            Architecture::Mlp { d, h, c, .. } => (h * d + h, c, h),
        }
    }

    /// Classifier rows `w_c` of the last layer (`C × feature_dim`).
    pub fn classifier_rows(&self) -> DenseMatrix {
        let (off, c, p) = self.head();
        DenseMatrix::from_vec(c, p, self.params[off..off + c * p].to_vec()).expect("shape")
    }

    fn check_input(&self, x: &DenseMatrix) -> Result<()> {
        if x.cols() != self.arch.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.arch.input_dim(),
                found: x.cols(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &DenseMatrix) -> Result<Forward> {
        self.check_input(x)?;
        let n = x.rows();
        match self.arch {
            Architecture::Linear { d, c } => {
                let (w, b) = self.params.split_at(c * d);
                let mut logits = DenseMatrix::zeros(n, c);
                affine(x, w, b, &mut logits);
                Ok(Forward {
                    hidden_pre: DenseMatrix::zeros(0, 0),
                    features: x.clone(),
                    logits,
                })
            }
            Architecture::Mlp {
                d,
                h,
                c,
                activation,
                ..
            } => {
                let (w1, rest) = self.params.split_at(h * d);
                let (b1, rest) = rest.split_at(h);
                let (w2, b2) = rest.split_at(c * h);
                let mut pre = DenseMatrix::zeros(n, h);
                affine(x, w1, b1, &mut pre);
                let mut act = pre.clone();
                act.data_mut()
                    .iter_mut()
                    .for_each(|v| *v = activation.apply(*v));
                let mut logits = DenseMatrix::zeros(n, c);
                affine(&act, w2, b2, &mut logits);
                Ok(Forward {
                    hidden_pre: pre,
                    features: act,
                    logits,
                })
            }
        }
    }

    /// Last-layer inputs for a batch.
    pub fn features(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        Ok(self.forward(x)?.features)
    }

    /// `Σ_i J_iᵀ g_i` where `J_i = ∂z_i/∂Θ` and `g_i` is row `i` of `dlogits`.
    pub fn backward(&self, x: &DenseMatrix, fwd: &Forward, dlogits: &DenseMatrix) -> Vec<f64> {
        let mut grad = vec![0.0; self.params.len()];
        match self.arch {
            Architecture::Linear { d, c } => {
                let (gw, gb) = grad.split_at_mut(c * d);
                outer_accumulate(dlogits, x, gw, gb);
            }
            Architecture::Mlp {
                d,
                h,
                c,
                activation,
                ..
            } => {
                let w2 = &self.params[h * d + h..h * d + h + c * h];
                let (g1, rest) = grad.split_at_mut(h * d);
                let (gb1, rest) = rest.split_at_mut(h);
                let (g2, gb2) = rest.split_at_mut(c * h);
                outer_accumulate(dlogits, &fwd.features, g2, gb2);
                // back through the last layer and the nonlinearity
                let n = x.rows();
                let mut dpre = DenseMatrix::zeros(n, h);
                for i in 0..n {
                    let gz = dlogits.row(i);
                    let pre = fwd.hidden_pre.row(i);
                    let act = fwd.features.row(i);
                    let out = dpre.row_mut(i);
                    for (k, o) in out.iter_mut().enumerate() {
                        let mut s = 0.0;
                        for (j, g) in gz.iter().enumerate() {
                            s += g * w2[j * h + k];
                        }
                        *o = s * activation.slope(pre[k], act[k]);
                    }
                }
                outer_accumulate(&dpre, x, g1, gb1);
            }
        }
        grad
    }

    /// Directional derivative of the logits: row `i` is `J_i v`.
    pub fn jvp(&self, x: &DenseMatrix, fwd: &Forward, v: &[f64]) -> DenseMatrix {
        let n = x.rows();
        match self.arch {
            Architecture::Linear { d, c } => {
                let (vw, vb) = v.split_at(c * d);
                let mut out = DenseMatrix::zeros(n, c);
                affine(x, vw, vb, &mut out);
                out
            }
            Architecture::Mlp {
                d,
                h,
                c,
                activation,
                ..
            } => {
                let w2 = &self.params[h * d + h..h * d + h + c * h];
                let (v1, rest) = v.split_at(h * d);
                let (vb1, rest) = rest.split_at(h);
                let (v2, vb2) = rest.split_at(c * h);
                let mut dpre = DenseMatrix::zeros(n, h);
                affine(x, v1, vb1, &mut dpre);
                for i in 0..n {
                    let pre = fwd.hidden_pre.row(i);
                    let act = fwd.features.row(i);
                    for (k, dp) in dpre.row_mut(i).iter_mut().enumerate() {
                        *dp *= activation.slope(pre[k], act[k]);
                    }
                }
                // d(W2 a + b2) = V2 a + W2 da + vb2
                let mut out = DenseMatrix::zeros(n, c);
                affine(&fwd.features, v2, vb2, &mut out);
                for i in 0..n {
                    let da = dpre.row(i);
                    for (j, o) in out.row_mut(i).iter_mut().enumerate() {
                        *o += crate::numerics::dot(&w2[j * h..(j + 1) * h], da);
                    }
                }
                out
            }
        }
    }

    pub fn predict(&self, x: &DenseMatrix) -> Result<Vec<usize>> {
        let fwd = self.forward(x)?;
        Ok(fwd.logits.iter_rows().map(argmax).collect())
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        let (variant, act, d, h, c) = match self.arch {
            Architecture::Linear { d, c } => (0u8, 0u8, d, 0, c),
            Architecture::Mlp {
                d,
                h,
                c,
                activation,
                ..
            } => (1, activation.code(), d, h, c),
        };
        w.write_all(&[variant, act])?;
        for v in [d, h, c, self.params.len()] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        for p in &self.params {
            w.write_all(&p.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let mut head = [0u8; 2];
        r.read_exact(&mut head)?;
        let mut dims = [0usize; 4];
        for v in &mut dims {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            *v = u64::from_le_bytes(b) as usize;
        }
        let [d, h, c, n] = dims;
        let arch = match head[0] {
            0 => Architecture::Linear { d, c },
            1 => Architecture::Mlp {
                d,
                h,
                c,
                activation: Activation::from_code(head[1])?,
            },
            v => return Err(Error::Format(format!("unknown model variant {v}"))),
        };
        if arch.n_params() != n {
            return Err(Error::DimensionMismatch {
                expected: arch.n_params(),
                found: n,
            });
        }
        let mut params = Vec::with_capacity(n);
        let mut b = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut b)?;
            params.push(f64::from_le_bytes(b));
        }
        Ok(Self { arch, params })
    }
}

/// `out[i] = W x_i + b` for `W` stored row-major with `out.cols()` rows.
fn affine(x: &DenseMatrix, w: &[f64], b: &[f64], out: &mut DenseMatrix) {
    let p = x.cols();
    for i in 0..x.rows() {
        let xi = x.row(i);
        for (j, o) in out.row_mut(i).iter_mut().enumerate() {
            *o = b[j] + crate::numerics::dot(&w[j * p..(j + 1) * p], xi);
        }
    }
}

/// `gw += Σ_i g_i x_iᵀ`, `gb += Σ_i g_i`.
fn outer_accumulate(g: &DenseMatrix, x: &DenseMatrix, gw: &mut [f64], gb: &mut [f64]) {
    let p = x.cols();
    for i in 0..g.rows() {
        let xi = x.row(i);
        for (j, &gij) in g.row(i).iter().enumerate() {
            if gij == 0.0 {
                continue;
            }
            gb[j] += gij;
            for (w, xv) in gw[j * p..(j + 1) * p].iter_mut().zip(xi) {
                *w += gij * xv;
            }
        }
    }
}

/// Index of the largest entry; ties go to the lower index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Heavy-ball SGD: `g ← g + wd·θ; v ← μv + g; θ ← θ - lr·v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(n: usize) -> Self {
        Self {
            velocity: vec![0.0; n],
        }
    }

    pub fn step(
        &mut self,
        params: &mut [f64],
        grad: &[f64],
        lr: f64,
        momentum: f64,
        weight_decay: f64,
    ) {
        for ((p, v), g) in params.iter_mut().zip(&mut self.velocity).zip(grad) {
            let g = g + weight_decay * *p;
            *v = momentum * *v + g;
            *p -= lr * *v;
        }
    }
}

/// When the perturbation context is rebuilt.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Refresh {
    #[default]
    Epoch,
    Batch,
}

fn default_batch() -> usize {
    64
}
fn default_lr() -> f64 {
    0.1
}
fn default_momentum() -> f64 {
    0.9
}
fn default_wd() -> f64 {
    5e-4
}
fn default_decay() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    /// Epochs at which the step size is multiplied by `lr_decay`.
    #[serde(default)]
    pub milestones: Vec<usize>,
    #[serde(default = "default_decay")]
    pub lr_decay: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "LossSpec::default_ce")]
    pub loss: LossSpec,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub refresh: Refresh,
}

impl LossSpec {
    fn default_ce() -> Self {
        LossSpec::CrossEntropy
    }
}

impl TrainConfig {
    pub fn new(epochs: usize, seed: u64) -> Self {
        Self {
            epochs,
            batch_size: default_batch(),
            lr: default_lr(),
            momentum: default_momentum(),
            weight_decay: default_wd(),
            milestones: Vec::new(),
            lr_decay: default_decay(),
            seed,
            loss: LossSpec::CrossEntropy,
            model: ModelSpec::Linear,
            refresh: Refresh::Epoch,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("lr must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        if self.milestones.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::invalid("milestones must be sorted"));
        }
        if let ModelSpec::Mlp { hidden: 0, .. } = self.model {
            return Err(Error::invalid("hidden width must be >= 1"));
        }
        Ok(())
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.lr * self.lr_decay.powi(passed as i32)
    }
}

/// Shuffled mini-batches for one epoch, from substream `epoch` of the
/// shuffle stream.
pub fn epoch_batches(seed: u64, epoch: usize, n: usize, batch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    RngStream::with_index(seed, Purpose::Shuffle, epoch as u64).shuffle(&mut idx);
    idx.chunks(batch).map(<[usize]>::to_vec).collect()
}

/// Class statistics in the model's feature space plus its classifier rows.
pub fn build_context(model: &Model, ds: &Dataset) -> Result<PerturbationContext> {
    let feats = model.features(&ds.features)?;
    let stats = estimate_class_stats(&feats, &ds.labels, ds.n_classes, CovarianceMode::Auto)?;
    PerturbationContext::new(stats, model.classifier_rows())
}

/// Mean loss over a batch and its parameter gradient.
pub struct BatchGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub forward: Forward,
    /// Perturbed softmax per sample.
    pub probs: DenseMatrix,
}

/// Weighted mean of the perturbed cross-entropy over the batch.
pub fn batch_loss_grad(
    model: &Model,
    x: &DenseMatrix,
    labels: &[usize],
    delta: Option<&DenseMatrix>,
    class_weights: Option<&[f64]>,
) -> Result<BatchGrad> {
    let forward = model.forward(x)?;
    let n = labels.len();
    let c = model.arch.n_classes();
    let mut probs = DenseMatrix::zeros(n, c);
    let mut dlogits = DenseMatrix::zeros(n, c);
    let mut loss = 0.0;
    let inv_n = 1.0 / n.max(1) as f64;
    for (i, &y) in labels.iter().enumerate() {
        let w = class_weights.map_or(1.0, |cw| cw[y]);
        let l = perturbed_ce_probs(
            forward.logits.row(i),
            y,
            delta.map(|d| d.row(y)),
            probs.row_mut(i),
        );
        loss += w * l;
        let g = dlogits.row_mut(i);
        g.copy_from_slice(probs.row(i));
        g[y] -= 1.0;
        g.iter_mut().for_each(|v| *v *= w * inv_n);
    }
    let grad = model.backward(x, &forward, &dlogits);
    Ok(BatchGrad {
        loss: loss * inv_n,
        grad,
        forward,
        probs,
    })
}

/// Per-class error rates under argmax; classes absent from `ds` report 0.
pub fn evaluate(model: &Model, ds: &Dataset) -> Result<Vec<f64>> {
    let pred = model.predict(&ds.features)?;
    let mut wrong = vec![0usize; ds.n_classes];
    for (&p, &y) in pred.iter().zip(&ds.labels) {
        if p != y {
            wrong[y] += 1;
        }
    }
    Ok(wrong
        .iter()
        .zip(ds.class_counts())
        .map(|(&w, n)| if n == 0 { 0.0 } else { w as f64 / n as f64 })
        .collect())
}

pub fn error_spread(errors: &[f64]) -> f64 {
    crate::oracle::performance_gap(errors)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    /// Per-class error on the evaluation set.
    pub errors: Vec<f64>,
    /// Largest minus smallest class error.
    pub gap: f64,
    /// Per class `(l' - l) / l` on the training set, `l'` the training loss
    /// and `l` plain cross-entropy. Zero vector for plain cross-entropy.
    pub loss_variation: Vec<f64>,
    /// Per class, mean over `c ≠ y` of each weighted perturbation term
    /// (proportion, variance, distance). Empty without a context.
    pub delta_terms: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
}

impl TrainReport {
    pub fn final_errors(&self) -> &[f64] {
        self.epochs.last().map_or(&[], |e| &e.errors)
    }

    pub fn final_gap(&self) -> f64 {
        self.epochs.last().map_or(0.0, |e| e.gap)
    }

    /// Long-format CSV rows: `epoch,class,error`.
    pub fn write_errors_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["epoch", "class", "error"])?;
        for e in &self.epochs {
            for (c, err) in e.errors.iter().enumerate() {
                out.write_record([e.epoch.to_string(), c.to_string(), format!("{err:?}")])?;
            }
        }
        out.flush()?;
        Ok(())
    }

    /// `epoch,class,loss_variation,prop,var,dist`.
    pub fn write_terms_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "epoch",
            "class",
            "loss_variation",
            "proportion",
            "variance",
            "distance",
        ])?;
        for e in &self.epochs {
            for (c, lv) in e.loss_variation.iter().enumerate() {
                let t = e.delta_terms.get(c).copied().unwrap_or([0.0; 3]);
                out.write_record([
                    e.epoch.to_string(),
                    c.to_string(),
                    format!("{lv:?}"),
                    format!("{:?}", t[0]),
                    format!("{:?}", t[1]),
                    format!("{:?}", t[2]),
                ])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Per-class `(l' - l) / l` over `ds`.
pub fn loss_variation(
    model: &Model,
    ds: &Dataset,
    delta: Option<&DenseMatrix>,
) -> Result<Vec<f64>> {
    let c = ds.n_classes;
    let Some(delta) = delta else {
        return Ok(vec![0.0; c]);
    };
    let fwd = model.forward(&ds.features)?;
    let mut perturbed = vec![0.0; c];
    let mut plain = vec![0.0; c];
    let mut probs = vec![0.0; c];
    for (z, &y) in fwd.logits.iter_rows().zip(&ds.labels) {
        perturbed[y] += perturbed_ce_probs(z, y, Some(delta.row(y)), &mut probs);
        plain[y] += perturbed_ce_probs(z, y, None, &mut probs);
    }
    Ok(perturbed
        .iter()
        .zip(&plain)
        .map(|(p, l)| if *l > 0.0 { (p - l) / l } else { 0.0 })
        .collect())
}

/// Mean weighted term per class; `omega` of `None` weighs each term by 1.
pub fn delta_terms(ctx: &PerturbationContext, omega: Option<&PerturbationParams>) -> Vec<[f64; 3]> {
    let c = ctx.n_classes;
    (0..c)
        .map(|y| {
            let mut acc = [0.0; 3];
            for j in (0..c).filter(|&j| j != y) {
                for t in Term::ALL {
                    let lam = omega.map_or(1.0, |o| o.lambda(y, j, t));
                    acc[t as usize] += lam * ctx.multiplier(y, j, t);
                }
            }
            acc.map(|v| v / (c - 1) as f64)
        })
        .collect()
}

/// Shared epoch-end bookkeeping for [`train`] and the bilevel trainer.
#[allow(clippy::too_many_arguments)]
pub(crate) fn epoch_record(
    epoch: usize,
    lr: f64,
    mean_loss: f64,
    model: &Model,
    train: &Dataset,
    eval: &Dataset,
    delta: Option<&DenseMatrix>,
    ctx: Option<&PerturbationContext>,
    omega: Option<&PerturbationParams>,
) -> Result<EpochRecord> {
    if !mean_loss.is_finite() {
        return Err(Error::Divergence(format!(
            "non-finite loss in epoch {epoch}"
        )));
    }
    let errors = evaluate(model, eval)?;
    Ok(EpochRecord {
        epoch,
        lr,
        mean_loss,
        gap: error_spread(&errors),
        errors,
        loss_variation: loss_variation(model, train, delta)?,
        delta_terms: ctx.map(|c| delta_terms(c, omega)).unwrap_or_default(),
    })
}

/// Plain SGD training with the configured loss. Per-class errors are
/// reported on `eval` (the training set when `None`) after every epoch.
pub fn train(
    ds: &Dataset,
    eval: Option<&Dataset>,
    config: &TrainConfig,
) -> Result<(Model, TrainReport)> {
    config.validate()?;
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let eval = eval.unwrap_or(ds);
    let arch = config.model.architecture(ds.dim(), ds.n_classes);
    let mut model = Model::init(arch, &mut RngStream::new(config.seed, Purpose::Init));
    let mut opt = Sgd::new(model.params.len());
    let priors: Vec<f64> = ds
        .class_counts()
        .iter()
        .map(|&k| k as f64 / ds.len() as f64)
        .collect();
    let class_weights = config.loss.class_weights(&priors);
    let mut report = TrainReport::default();
    let mut ctx: Option<PerturbationContext> = None;
    let mut generation = 0;

    let mut refresh =
        |model: &Model, ctx: &mut Option<PerturbationContext>| -> Result<Option<DenseMatrix>> {
            if config.loss.needs_context() {
                let mut fresh = build_context(model, ds)?;
                generation += 1;
                fresh.generation = generation;
                *ctx = Some(fresh);
            }
            config.loss.delta(&priors, ctx.as_ref())
        };

    for epoch in 0..config.epochs {
        let lr = config.lr_at_epoch(epoch);
        let mut delta = refresh(&model, &mut ctx)?;
        let mut total = 0.0;
        for batch in epoch_batches(config.seed, epoch, ds.len(), config.batch_size) {
            if config.refresh == Refresh::Batch && config.loss.needs_context() {
                delta = refresh(&model, &mut ctx)?;
            }
            let sub = ds.subset(&batch);
            let bg = batch_loss_grad(
                &model,
                &sub.features,
                &sub.labels,
                delta.as_ref(),
                class_weights.as_deref(),
            )?;
            if !bg.loss.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite batch loss in epoch {epoch}"
                )));
            }
            total += bg.loss * batch.len() as f64;
            opt.step(
                &mut model.params,
                &bg.grad,
                lr,
                config.momentum,
                config.weight_decay,
            );
        }
        let omega = match &config.loss {
            LossSpec::MetaLad { omega } => Some(omega),
            _ => None,
        };
        report.epochs.push(epoch_record(
            epoch,
            lr,
            total / ds.len() as f64,
            &model,
            ds,
            eval,
            delta.as_ref(),
            ctx.as_ref(),
            omega,
        )?);
    }
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taskgen::{generate, GaussianTaskSpec};

    fn random_model(arch: Architecture, seed: u64) -> Model {
        let mut rng = RngStream::new(seed, Purpose::Init);
        let mut m = Model::init(arch, &mut rng);
        m.params.iter_mut().for_each(|p| *p += 0.3 * rng.normal());
        m
    }

    fn random_batch(n: usize, d: usize, c: usize, seed: u64) -> (DenseMatrix, Vec<usize>) {
        let mut rng = RngStream::new(seed, Purpose::TaskGen);
        let x = DenseMatrix::from_vec(n, d, (0..n * d).map(|_| rng.normal()).collect()).unwrap();
        let y = (0..n).map(|_| rng.below(c)).collect();
        (x, y)
    }

    #[test]
    fn zero_model_gives_uniform_softmax() {
        let m = Model::zeros(Architecture::Linear { d: 3, c: 4 });
        let (x, y) = random_batch(5, 3, 4, 1);
        let bg = batch_loss_grad(&m, &x, &y, None, None).unwrap();
        assert!(bg.forward.logits.data().iter().all(|&v| v == 0.0));
        assert!(bg.probs.data().iter().all(|&p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn linear_forward_by_hand() {
        let mut m = Model::zeros(Architecture::Linear { d: 2, c: 2 });
        m.params = vec![1.0, 2.0, -1.0, 0.5, 0.1, -0.2];
        let x = DenseMatrix::from_rows(&[vec![1.0, 1.0], vec![0.0, 2.0], vec![-1.0, 3.0]]).unwrap();
        let z = m.forward(&x).unwrap().logits;
        let want = [[3.1, -0.7], [4.1, 0.8], [5.1, 2.3]];
        for (i, row) in want.iter().enumerate() {
            for (j, w) in row.iter().enumerate() {
                assert!((z.get(i, j) - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_mlp_is_linear() {
        let arch = Architecture::Mlp {
            d: 3,
            h: 3,
            c: 2,
            activation: Activation::Identity,
        };
        let mut m = Model::zeros(arch);
        // W1 = I, b1 = 0, then a linear head
        for i in 0..3 {
            m.params[i * 3 + i] = 1.0;
        }
        let head = [0.5, -1.0, 2.0, 1.5, 0.0, -0.5, 0.25, -0.75];
        m.params[12..].copy_from_slice(&head);
        let mut lin = Model::zeros(Architecture::Linear { d: 3, c: 2 });
        lin.params.copy_from_slice(&head);
        let (x, _) = random_batch(4, 3, 2, 2);
        assert_eq!(
            m.forward(&x).unwrap().logits,
            lin.forward(&x).unwrap().logits
        );
    }

    fn check_backward(arch: Architecture, delta: Option<&DenseMatrix>, seed: u64) {
        let m = random_model(arch, seed);
        let c = arch.n_classes();
        let (x, y) = random_batch(7, arch.input_dim(), c, seed + 100);
        let bg = batch_loss_grad(&m, &x, &y, delta, None).unwrap();
        let h = 1e-6;
        for k in 0..m.params.len() {
            let mut plus = m.clone();
            plus.params[k] += h;
            let mut minus = m.clone();
            minus.params[k] -= h;
            let lp = batch_loss_grad(&plus, &x, &y, delta, None).unwrap().loss;
            let lm = batch_loss_grad(&minus, &x, &y, delta, None).unwrap().loss;
            let fd = (lp - lm) / (2.0 * h);
            let err = (fd - bg.grad[k]).abs() / fd.abs().max(bg.grad[k].abs()).max(1e-4);
            assert!(err < 1e-4, "{arch:?} param {k}: fd {fd} vs {}", bg.grad[k]);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        for seed in 0..25 {
            check_backward(Architecture::Linear { d: 3, c: 3 }, None, seed);
            let mlp = Architecture::Mlp {
                d: 3,
                h: 4,
                c: 3,
                activation: Activation::Tanh,
            };
            let mut rng = RngStream::new(seed, Purpose::MetaSet);
            let delta =
                DenseMatrix::from_vec(3, 3, (0..9).map(|_| rng.normal()).collect()).unwrap();
            check_backward(mlp, Some(&delta), seed);
        }
    }

    #[test]
    fn single_sample_linear_gradient_is_outer_product() {
        let m = random_model(Architecture::Linear { d: 2, c: 3 }, 4);
        let x = DenseMatrix::from_rows(&[vec![0.7, -1.3]]).unwrap();
        let bg = batch_loss_grad(&m, &x, &[1], None, None).unwrap();
        let mut r = bg.probs.row(0).to_vec();
        r[1] -= 1.0;
        for (j, rj) in r.iter().enumerate() {
            for k in 0..2 {
                assert!((bg.grad[j * 2 + k] - rj * x.get(0, k)).abs() < 1e-15);
            }
            assert!((bg.grad[6 + j] - rj).abs() < 1e-15);
        }
    }

    #[test]
    fn jvp_matches_finite_differences() {
        let arch = Architecture::Mlp {
            d: 3,
            h: 5,
            c: 2,
            activation: Activation::Tanh,
        };
        let m = random_model(arch, 9);
        let (x, _) = random_batch(4, 3, 2, 9);
        let mut rng = RngStream::new(1, Purpose::MetaSet);
        let v: Vec<f64> = (0..m.params.len()).map(|_| rng.normal()).collect();
        let fwd = m.forward(&x).unwrap();
        let u = m.jvp(&x, &fwd, &v);
        let h = 1e-6;
        let shifted = |s: f64| {
            let mut mm = m.clone();
            mm.params
                .iter_mut()
                .zip(&v)
                .for_each(|(p, vi)| *p += s * vi);
            mm.forward(&x).unwrap().logits
        };
        let (zp, zm) = (shifted(h), shifted(-h));
        for i in 0..u.data().len() {
            let fd = (zp.data()[i] - zm.data()[i]) / (2.0 * h);
            assert!((fd - u.data()[i]).abs() < 1e-6 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn sgd_steps() {
        let mut p = vec![1.0, -2.0];
        let mut opt = Sgd::new(2);
        opt.step(&mut p, &[0.0, 0.0], 0.1, 0.9, 0.0);
        assert_eq!(p, vec![1.0, -2.0]);

        let mut p = vec![1.0];
        let mut opt = Sgd::new(1);
        opt.step(&mut p, &[0.5], 0.1, 0.9, 0.0);
        assert!((p[0] - 0.95).abs() < 1e-15);
        opt.step(&mut p, &[0.5], 0.1, 0.9, 0.0);
        // v = 0.9·0.5 + 0.5 = 0.95
        assert!((p[0] - 0.855).abs() < 1e-15);

        let mut p = vec![3.0, 4.0];
        let mut opt = Sgd::new(2);
        opt.step(&mut p, &[0.0, 0.0], 0.1, 0.0, 0.5);
        assert!(p[0].hypot(p[1]) < 5.0);
    }

    #[test]
    fn argmax_prefers_lower_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    #[test]
    fn constant_model_errors_follow_tie_rule() {
        let m = Model::zeros(Architecture::Linear { d: 2, c: 3 });
        let ds = Dataset::new(DenseMatrix::zeros(6, 2), vec![0, 0, 1, 1, 2, 2], 3).unwrap();
        assert_eq!(evaluate(&m, &ds).unwrap(), vec![0.0, 1.0, 1.0]);
    }

    #[test]
    fn separable_task_is_learned() {
        let spec = GaussianTaskSpec::BinaryVariance {
            d: 2,
            eta: 5.0,
            sigma: 0.5,
            k: 1.0,
        };
        let ds = generate(&spec, 200, &mut RngStream::new(1, Purpose::TaskGen)).unwrap();
        let (_, report) = train(&ds, None, &TrainConfig::new(5, 3)).unwrap();
        assert_eq!(report.final_errors(), &[0.0, 0.0]);
    }

    #[test]
    fn training_is_deterministic() {
        let spec = GaussianTaskSpec::ThreeClassDistance {
            d: 2,
            eta: 1.0,
            sigma: 1.0,
        };
        let ds = generate(&spec, 100, &mut RngStream::new(1, Purpose::TaskGen)).unwrap();
        let mut cfg = TrainConfig::new(3, 7);
        cfg.loss = LossSpec::Nisda { lambda: 0.5 };
        cfg.model = ModelSpec::Mlp {
            hidden: 8,
            activation: Activation::Relu,
        };
        let a = train(&ds, None, &cfg).unwrap();
        let b = train(&ds, None, &cfg).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn context_uses_hidden_features_for_mlp() {
        let arch = Architecture::Mlp {
            d: 2,
            h: 6,
            c: 2,
            activation: Activation::Relu,
        };
        let m = random_model(arch, 3);
        let spec = GaussianTaskSpec::BinaryVariance {
            d: 2,
            eta: 1.0,
            sigma: 1.0,
            k: 2.0,
        };
        let ds = generate(&spec, 50, &mut RngStream::new(1, Purpose::TaskGen)).unwrap();
        let ctx = build_context(&m, &ds).unwrap();
        assert_eq!(ctx.stats[0].mean.len(), 6);
        assert_eq!(ctx.weights.cols(), 6);
        let lin = build_context(&Model::zeros(Architecture::Linear { d: 2, c: 2 }), &ds).unwrap();
        assert_eq!(lin.stats[0].mean.len(), 2);
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = random_model(
            Architecture::Mlp {
                d: 3,
                h: 2,
                c: 4,
                activation: Activation::Tanh,
            },
            1,
        );
        let mut buf = Vec::new();
        m.write_checkpoint(&mut buf).unwrap();
        assert_eq!(Model::read_checkpoint(buf.as_slice()).unwrap(), m);
    }

    #[test]
    fn milestones_decay_lr() {
        let mut cfg = TrainConfig::new(10, 0);
        cfg.milestones = vec![4, 8];
        assert_eq!(cfg.lr_at_epoch(3), 0.1);
        assert!((cfg.lr_at_epoch(4) - 0.01).abs() < 1e-15);
        assert!((cfg.lr_at_epoch(9) - 0.001).abs() < 1e-15);
    }
}
