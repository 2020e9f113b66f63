//! Bilevel training of the perturbation weights `Ω`.
//!
//! After a plain cross-entropy warmup, every step runs three stages on a
//! training batch and a small class-balanced meta batch:
//!
//! 1. a temporary SGD step `Θ̂(Ω) = Θ - η₁ ∇_Θ L_train(Θ, Ω)` without momentum,
//! 2. a gradient step on `Ω` for the meta loss evaluated at `Θ̂(Ω)`,
//! 3. the real momentum step on `Θ` with the updated `Ω`.
//!
//! The hypergradient is exact for one unrolled step. `Ω` enters the training
//! loss only through the logit offsets, so
//! `∂/∂Ω ⟨v, ∇_Θ L_train⟩ = (1/n) Σ_i Σ_c p_ic (u_ic - ⟨u_i, p_i⟩) ∂δ_{y_i c}/∂Ω`
//! where `u_i = J_i v` is the logit tangent along `v = ∇_Θ̂ L_meta`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::losses::{PerturbationContext, PerturbationParams, Term, TERMS};
use crate::numerics::{DenseMatrix, Purpose, RngStream};
use crate::trainer::{
    batch_loss_grad, build_context, epoch_batches, epoch_record, Model, Sgd, TrainConfig,
    TrainReport,
};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HypergradMethod {
    #[default]
    Exact,
    FiniteDifference,
}

/// Loss applied to the meta batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaObjective {
    /// The perturbed loss with the current `Ω`, so `Ω` also acts directly.
    #[default]
    Perturbed,
    /// Plain cross-entropy; only the path through `Θ̂` carries gradient.
    CrossEntropy,
}

fn default_meta_batch() -> usize {
    32
}
/// Half the smallest class count, capped at 100 and at least 1.
pub fn default_meta_per_class(ds: &Dataset) -> usize {
    let smallest = ds.class_counts().into_iter().min().unwrap_or(0);
    (smallest / 2).clamp(1, 100)
}
fn default_init() -> [f64; 3] {
    [1.0, 1.0, 1.0]
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaConfig {
    /// Inner loop settings; `loss` is ignored.
    pub train: TrainConfig,
    /// Step size for `Ω`; defaults to `100 / batch_size`.
    #[serde(default)]
    pub meta_lr: Option<f64>,
    #[serde(default = "default_meta_batch")]
    pub meta_batch: usize,
    /// Meta samples drawn per class from the training set; defaults to
    /// half the smallest class, at most 100.
    #[serde(default)]
    pub meta_per_class: Option<usize>,
    /// Plain cross-entropy steps before `Ω` is trained.
    #[serde(default)]
    pub warmup_steps: Option<usize>,
    /// Warmup as a fraction of all steps when `warmup_steps` is unset;
    /// defaults to two thirds.
    #[serde(default)]
    pub warmup_fraction: Option<f64>,
    #[serde(default = "default_init")]
    pub omega_init: [f64; 3],
    /// One weight triple per ordered class pair instead of a shared one.
    #[serde(default = "default_true")]
    pub per_pair: bool,
    #[serde(default)]
    pub method: HypergradMethod,
    #[serde(default)]
    pub objective: MetaObjective,
    /// Terms held at zero throughout.
    #[serde(default)]
    pub ablate: Vec<Term>,
    /// Accept a meta set with fewer than `meta_per_class` samples in some class.
    #[serde(default)]
    pub allow_imbalanced_meta: bool,
}

impl MetaConfig {
    pub fn new(train: TrainConfig) -> Self {
        Self {
            train,
            meta_lr: None,
            meta_batch: default_meta_batch(),
            meta_per_class: None,
            warmup_steps: None,
            warmup_fraction: None,
            omega_init: default_init(),
            per_pair: true,
            method: HypergradMethod::Exact,
            objective: MetaObjective::Perturbed,
            ablate: Vec::new(),
            allow_imbalanced_meta: false,
        }
    }

    pub fn meta_lr(&self) -> f64 {
        self.meta_lr.unwrap_or(100.0 / self.train.batch_size as f64)
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.train.batch_size)
    }

    /// `(T1, T2)`.
    pub fn phases(&self, n: usize) -> (usize, usize) {
        let total = self.train.epochs * self.steps_per_epoch(n);
        let warmup = self
            .warmup_steps
            .unwrap_or_else(|| match self.warmup_fraction {
                Some(f) => (f * total as f64) as usize,
                None => 2 * total / 3,
            });
        (warmup, total)
    }

    pub fn initial_omega(&self, n_classes: usize) -> PerturbationParams {
        let mut omega = if self.per_pair {
            PerturbationParams::per_pair(n_classes, self.omega_init)
        } else {
            PerturbationParams::global(n_classes, self.omega_init)
        };
        for &t in &self.ablate {
            omega.clear_term(t);
        }
        omega
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        self.train.validate()?;
        let lr = self.meta_lr();
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::invalid("meta_lr must be finite and non-negative"));
        }
        if self.meta_batch == 0 || self.meta_per_class == Some(0) {
            return Err(Error::invalid("meta_batch and meta_per_class must be >= 1"));
        }
        if let Some(f) = self.warmup_fraction {
            if !(0.0..1.0).contains(&f) {
                return Err(Error::invalid("warmup_fraction must lie in [0, 1)"));
            }
        }
        let (t1, t2) = self.phases(n);
        if t1 >= t2 {
            return Err(Error::invalid(format!(
                "warmup ({t1} steps) must end before training ({t2} steps)"
            )));
        }
        Ok(())
    }
}

/// `k` indices per class drawn uniformly from `ds`; one substream per class.
pub fn meta_set_indices(
    ds: &Dataset,
    k: usize,
    seed: u64,
    allow_imbalanced: bool,
) -> Result<Vec<usize>> {
    let by_class = ds.indices_by_class();
    let counts: Vec<usize> = by_class.iter().map(|v| v.len().min(k)).collect();
    if !allow_imbalanced && counts.iter().any(|&c| c < k) {
        return Err(Error::ImbalancedMetaSet(counts));
    }
    let base = RngStream::new(seed, Purpose::MetaSet);
    let mut out = Vec::with_capacity(counts.iter().sum());
    for (c, mut idx) in by_class.into_iter().enumerate() {
        base.substream(c as u64).shuffle(&mut idx);
        idx.truncate(k);
        idx.sort_unstable();
        out.extend(idx);
    }
    Ok(out)
}

/// `Θ - η₁ g` where `g` is the mean batch gradient under offsets `delta`.
pub fn temp_update(
    model: &Model,
    x: &DenseMatrix,
    labels: &[usize],
    delta: Option<&DenseMatrix>,
    eta1: f64,
) -> Result<Model> {
    let bg = batch_loss_grad(model, x, labels, delta, None)?;
    Ok(step_copy(model, &bg.grad, eta1))
}

fn step_copy(model: &Model, grad: &[f64], eta1: f64) -> Model {
    let mut out = model.clone();
    out.params
        .iter_mut()
        .zip(grad)
        .for_each(|(p, g)| *p -= eta1 * g);
    out
}

/// Total derivative after one unrolled step: `direct - η₁ · mixed`, where
/// `mixed = ∂/∂Ω ⟨∇_Θ̂ L_meta, ∇_Θ L_train⟩` with the first factor held fixed.
pub fn unrolled_hypergradient(eta1: f64, direct: &[f64], mixed: &[f64]) -> Vec<f64> {
    direct
        .iter()
        .zip(mixed)
        .map(|(d, m)| d - eta1 * m)
        .collect()
}

/// Everything one hypergradient evaluation needs.
pub struct MetaProblem<'a> {
    pub model: &'a Model,
    pub ctx: &'a PerturbationContext,
    pub omega: &'a PerturbationParams,
    pub train_x: &'a DenseMatrix,
    pub train_y: &'a [usize],
    pub meta_x: &'a DenseMatrix,
    pub meta_y: &'a [usize],
    pub eta1: f64,
    pub objective: MetaObjective,
}

impl MetaProblem<'_> {
    fn meta_delta(&self, delta: &DenseMatrix) -> Option<DenseMatrix> {
        match self.objective {
            MetaObjective::Perturbed => Some(delta.clone()),
            MetaObjective::CrossEntropy => None,
        }
    }

    /// Meta loss at `Θ̂(omega)`.
    pub fn meta_loss(&self, omega: &PerturbationParams) -> Result<f64> {
        let delta = self.ctx.metalad_delta(omega)?;
        let hat = temp_update(
            self.model,
            self.train_x,
            self.train_y,
            Some(&delta),
            self.eta1,
        )?;
        let md = self.meta_delta(&delta);
        Ok(batch_loss_grad(&hat, self.meta_x, self.meta_y, md.as_ref(), None)?.loss)
    }

    /// `∇_Ω` of [`Self::meta_loss`] at the problem's `Ω`.
    pub fn hypergradient(&self, method: HypergradMethod) -> Result<Vec<f64>> {
        let g = match method {
            HypergradMethod::Exact => self.exact()?,
            HypergradMethod::FiniteDifference => self.finite_difference()?,
        };
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence("non-finite hypergradient".into()));
        }
        Ok(g)
    }

    fn exact(&self) -> Result<Vec<f64>> {
        let omega = self.omega;
        let delta = self.ctx.metalad_delta(omega)?;
        let inner = batch_loss_grad(self.model, self.train_x, self.train_y, Some(&delta), None)?;
        let hat = step_copy(self.model, &inner.grad, self.eta1);
        let md = self.meta_delta(&delta);
        let outer = batch_loss_grad(&hat, self.meta_x, self.meta_y, md.as_ref(), None)?;
        if !outer.loss.is_finite() {
            return Err(Error::Divergence("non-finite meta loss".into()));
        }

        let direct = match self.objective {
            MetaObjective::Perturbed => {
                self.ctx
                    .omega_gradient(&outer.forward.logits, self.meta_y, omega)?
            }
            MetaObjective::CrossEntropy => vec![0.0; omega.values.len()],
        };

        let u = self.model.jvp(self.train_x, &inner.forward, &outer.grad);
        let n = self.train_y.len().max(1) as f64;
        let mut mixed = vec![0.0; omega.values.len()];
        let mut s = vec![0.0; self.ctx.n_classes];
        for (i, &y) in self.train_y.iter().enumerate() {
            let p = inner.probs.row(i);
            let ui = u.row(i);
            let up = crate::numerics::dot(ui, p);
            for ((sc, pc), uc) in s.iter_mut().zip(p).zip(ui) {
                *sc = pc * (uc - up);
            }
            self.ctx.accumulate_omega(y, &s, 1.0 / n, omega, &mut mixed);
        }
        Ok(unrolled_hypergradient(self.eta1, &direct, &mixed))
    }

    fn finite_difference(&self) -> Result<Vec<f64>> {
        let mut probe = self.omega.clone();
        let mut out = Vec::with_capacity(probe.values.len());
        for k in 0..probe.values.len() {
            let v = probe.values[k];
            let h = 1e-5 * v.abs().max(1.0);
            probe.values[k] = v + h;
            let up = self.meta_loss(&probe)?;
            probe.values[k] = v - h;
            let down = self.meta_loss(&probe)?;
            probe.values[k] = v;
            out.push((up - down) / (2.0 * h));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OmegaRecord {
    pub step: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct MetaRun {
    pub model: Model,
    pub report: TrainReport,
    pub omega: PerturbationParams,
    /// `Ω` after every update; the first record is the initial value.
    pub omega_log: Vec<OmegaRecord>,
    pub meta_indices: Vec<usize>,
}

impl MetaRun {
    /// Long format `step,y,c,proportion,variance,distance` over ordered pairs.
    pub fn write_omega_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["step", "y", "c", "proportion", "variance", "distance"])?;
        let c = self.omega.n_classes;
        let mut probe = self.omega.clone();
        for rec in &self.omega_log {
            probe.values.clone_from(&rec.values);
            for y in 0..c {
                for j in (0..c).filter(|&j| j != y) {
                    let mut row = vec![rec.step.to_string(), y.to_string(), j.to_string()];
                    row.extend(
                        (0..TERMS).map(|t| format!("{:?}", probe.values[probe.slot(y, j, t)])),
                    );
                    out.write_record(&row)?;
                }
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Warmup with cross-entropy, then the three-stage cycle until the step
/// budget is spent. Errors are reported on `eval` (the training set when
/// `None`). The meta set is drawn from `ds` itself.
pub fn run_metalad(ds: &Dataset, eval: Option<&Dataset>, config: &MetaConfig) -> Result<MetaRun> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    config.validate(ds.len())?;
    let tc = &config.train;
    let eval = eval.unwrap_or(ds);
    let k = config
        .meta_per_class
        .unwrap_or_else(|| default_meta_per_class(ds));
    let meta_indices = meta_set_indices(ds, k, tc.seed, config.allow_imbalanced_meta)?;
    let meta = ds.subset(&meta_indices);
    let (warmup, total) = config.phases(ds.len());
    let eta2 = config.meta_lr();
    let mut ablated = [false; TERMS];
    for &t in &config.ablate {
        ablated[t as usize] = true;
    }

    let arch = tc.model.architecture(ds.dim(), ds.n_classes);
    let mut model = Model::init(arch, &mut RngStream::new(tc.seed, Purpose::Init));
    let mut opt = Sgd::new(model.params.len());
    let mut omega = config.initial_omega(ds.n_classes);
    let mut omega_log = vec![OmegaRecord {
        step: 0,
        values: omega.values.clone(),
    }];
    let mut report = TrainReport::default();
    let meta_stream = RngStream::new(tc.seed, Purpose::MetaBatch);
    let mut ctx: Option<PerturbationContext> = None;
    let mut generation = 0;
    let mut refresh = |model: &Model, ctx: &mut Option<PerturbationContext>| -> Result<()> {
        let mut fresh = build_context(model, ds)?;
        generation += 1;
        fresh.generation = generation;
        *ctx = Some(fresh);
        Ok(())
    };

    let mut step = 0;
    for epoch in 0..tc.epochs {
        let lr = tc.lr_at_epoch(epoch);
        let epoch_end = step + config.steps_per_epoch(ds.len());
        if epoch_end > warmup {
            refresh(&model, &mut ctx)?;
        }
        let mut total_loss = 0.0;
        let mut delta = None;
        for batch in epoch_batches(tc.seed, epoch, ds.len(), tc.batch_size) {
            let sub = ds.subset(&batch);
            if step >= warmup {
                if tc.refresh == crate::trainer::Refresh::Batch {
                    refresh(&model, &mut ctx)?;
                }
                let c = ctx
                    .as_ref()
                    .expect("context refreshed before the meta phase");
                let mb = meta_batch(&meta_stream, step, meta.len(), config.meta_batch);
                let msub = meta.subset(&mb);
                let problem = MetaProblem {
                    model: &model,
                    ctx: c,
                    omega: &omega,
                    train_x: &sub.features,
                    train_y: &sub.labels,
                    meta_x: &msub.features,
                    meta_y: &msub.labels,
                    eta1: lr,
                    objective: config.objective,
                };
                let g = problem.hypergradient(config.method)?;
                for (k, (w, gk)) in omega.values.iter_mut().zip(&g).enumerate() {
                    if !ablated[k % TERMS] {
                        *w -= eta2 * gk;
                    }
                }
                omega.validate()?;
                omega_log.push(OmegaRecord {
                    step: step + 1,
                    values: omega.values.clone(),
                });
                delta = Some(c.metalad_delta(&omega)?);
            }
            let bg = batch_loss_grad(&model, &sub.features, &sub.labels, delta.as_ref(), None)?;
            if !bg.loss.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite batch loss at step {step}"
                )));
            }
            total_loss += bg.loss * batch.len() as f64;
            opt.step(
                &mut model.params,
                &bg.grad,
                lr,
                tc.momentum,
                tc.weight_decay,
            );
            step += 1;
        }
        let in_meta = step > warmup;
        report.epochs.push(epoch_record(
            epoch,
            lr,
            total_loss / ds.len() as f64,
            &model,
            ds,
            eval,
            delta.as_ref(),
            ctx.as_ref().filter(|_| in_meta),
            in_meta.then_some(&omega),
        )?);
    }
    debug_assert_eq!(step, total);
    Ok(MetaRun {
        model,
        report,
        omega,
        omega_log,
        meta_indices,
    })
}

/// Held-out gaps of plain cross-entropy, fixed logit adjustment, the full
/// bilevel run and one run per ablated term, all from the same seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapComparison {
    pub cross_entropy: f64,
    pub logit_adjusted: f64,
    pub metalad: f64,
    /// Indexed by [`Term`].
    pub ablated: [f64; TERMS],
}

impl GapComparison {
    pub fn best_ablation(&self) -> f64 {
        self.ablated.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

pub fn compare_gaps(ds: &Dataset, test: &Dataset, config: &MetaConfig) -> Result<GapComparison> {
    let mut tc = config.train.clone();
    tc.loss = crate::losses::LossSpec::CrossEntropy;
    let (_, ce) = crate::trainer::train(ds, Some(test), &tc)?;
    tc.loss = crate::losses::LossSpec::LogitAdjusted { lambda: 1.0 };
    let (_, la) = crate::trainer::train(ds, Some(test), &tc)?;
    let full = run_metalad(ds, Some(test), config)?;
    let mut ablated = [0.0; TERMS];
    for t in Term::ALL {
        let mut c = config.clone();
        c.ablate = vec![t];
        ablated[t as usize] = run_metalad(ds, Some(test), &c)?.report.final_gap();
    }
    Ok(GapComparison {
        cross_entropy: ce.final_gap(),
        logit_adjusted: la.final_gap(),
        metalad: full.report.final_gap(),
        ablated,
    })
}

/// Meta batch for `step`: a fresh permutation of the meta set, truncated.
fn meta_batch(stream: &RngStream, step: usize, n: usize, m: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    if m >= n {
        return idx;
    }
    stream.substream(step as u64).shuffle(&mut idx);
    idx.truncate(m);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taskgen::{generate, GaussianTaskSpec};
    use crate::trainer::{train, Activation, Architecture, ModelSpec};

    fn task(seed: u64) -> Dataset {
        let spec = GaussianTaskSpec::MixedPropVar {
            d: 3,
            eta: 1.0,
            sigma: 1.0,
            k: 2.0,
            v: 3.0,
        };
        generate(&spec, 300, &mut RngStream::new(seed, Purpose::TaskGen)).unwrap()
    }

    fn three_class(seed: u64) -> Dataset {
        let spec = GaussianTaskSpec::LongTailMulticlass {
            c: 3,
            d: 3,
            imbalance_ratio: 5.0,
            separation: 1.5,
            sigma: 1.0,
            sigma_scale: Some(vec![1.0, 1.5, 0.7]),
        };
        generate(&spec, 120, &mut RngStream::new(seed, Purpose::TaskGen)).unwrap()
    }

    struct Fixture {
        model: Model,
        ctx: PerturbationContext,
        omega: PerturbationParams,
        train: Dataset,
        meta: Dataset,
    }

    fn fixture(seed: u64, mlp: bool) -> Fixture {
        let ds = three_class(seed);
        let arch = if mlp {
            Architecture::Mlp {
                d: 3,
                h: 4,
                c: 3,
                activation: Activation::Tanh,
            }
        } else {
            Architecture::Linear { d: 3, c: 3 }
        };
        let model = Model::init(arch, &mut RngStream::new(seed, Purpose::Init));
        let ctx = build_context(&model, &ds).unwrap();
        let mut rng = RngStream::with_index(seed, Purpose::MetaSet, 99);
        let mut omega = PerturbationParams::per_pair(3, [0.0; 3]);
        omega
            .values
            .iter_mut()
            .for_each(|v| *v = 0.5 * rng.normal());
        let train = ds.subset(&(0..16).map(|i| i * 3 % ds.len()).collect::<Vec<_>>());
        let idx = meta_set_indices(&ds, 3, seed, false).unwrap();
        Fixture {
            model,
            ctx,
            omega,
            train,
            meta: ds.subset(&idx),
        }
    }

    fn problem<'a>(f: &'a Fixture, eta1: f64, objective: MetaObjective) -> MetaProblem<'a> {
        MetaProblem {
            model: &f.model,
            ctx: &f.ctx,
            omega: &f.omega,
            train_x: &f.train.features,
            train_y: &f.train.labels,
            meta_x: &f.meta.features,
            meta_y: &f.meta.labels,
            eta1,
            objective,
        }
    }

    #[test]
    fn scalar_unrolled_chain_rule() {
        // inner (θ - λ)², meta θ̂², θ = 1, η₁ = 0.1, λ = 0
        let (theta, lambda, eta1): (f64, f64, f64) = (1.0, 0.0, 0.1);
        let hat = theta - eta1 * 2.0 * (theta - lambda);
        assert!((hat - 0.8).abs() < 1e-15);
        let g_meta = 2.0 * hat;
        // ∂/∂λ [g_meta · 2(θ - λ)] = -2 g_meta
        let mixed = [-2.0 * g_meta];
        let g = unrolled_hypergradient(eta1, &[0.0], &mixed);
        assert!((g[0] - 0.32).abs() < 1e-15);
    }

    #[test]
    fn zero_step_temp_update_is_identity() {
        let f = fixture(1, true);
        let delta = f.ctx.metalad_delta(&f.omega).unwrap();
        let hat = temp_update(
            &f.model,
            &f.train.features,
            &f.train.labels,
            Some(&delta),
            0.0,
        )
        .unwrap();
        assert_eq!(hat, f.model);
    }

    #[test]
    fn zero_step_hypergradient_is_direct_term() {
        let f = fixture(2, false);
        let p = problem(&f, 0.0, MetaObjective::Perturbed);
        let g = p.hypergradient(HypergradMethod::Exact).unwrap();
        let logits = f.model.forward(&f.meta.features).unwrap().logits;
        let direct = f
            .ctx
            .omega_gradient(&logits, &f.meta.labels, &f.omega)
            .unwrap();
        for (a, b) in g.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn exact_matches_finite_differences() {
        let mut worst: f64 = 0.0;
        for seed in 0..20 {
            for (mlp, objective) in [
                (false, MetaObjective::Perturbed),
                (true, MetaObjective::Perturbed),
                (true, MetaObjective::CrossEntropy),
            ] {
                let f = fixture(seed, mlp);
                let p = problem(&f, 0.5, objective);
                let exact = p.hypergradient(HypergradMethod::Exact).unwrap();
                let fd = p.hypergradient(HypergradMethod::FiniteDifference).unwrap();
                let scale = fd.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-8);
                for (a, b) in exact.iter().zip(&fd) {
                    worst = worst.max((a - b).abs() / scale);
                }
            }
        }
        assert!(worst < 1e-3, "worst relative error {worst}");
    }

    #[test]
    fn small_meta_step_decreases_meta_loss() {
        let f = fixture(5, true);
        let p = problem(&f, 0.5, MetaObjective::Perturbed);
        let g = p.hypergradient(HypergradMethod::Exact).unwrap();
        let gg: f64 = g.iter().map(|v| v * v).sum();
        let base = p.meta_loss(&f.omega).unwrap();
        for eta2 in [1e-2, 1e-3, 1e-4] {
            let mut moved = f.omega.clone();
            moved
                .values
                .iter_mut()
                .zip(&g)
                .for_each(|(w, gk)| *w -= eta2 * gk);
            let after = p.meta_loss(&moved).unwrap();
            // first-order decrease -η₂‖g‖², second-order remainder bounded
            assert!(
                after - base <= -eta2 * gg + 10.0 * eta2 * eta2 * gg.max(1.0),
                "η₂ = {eta2}"
            );
            assert!(after < base);
        }
    }

    #[test]
    fn frozen_zero_weights_reproduce_plain_training() {
        let ds = task(3);
        let mut tc = TrainConfig::new(4, 11);
        tc.batch_size = 50;
        tc.milestones = vec![3];
        tc.model = ModelSpec::Mlp {
            hidden: 6,
            activation: Activation::Relu,
        };
        let (plain, report) = train(&ds, None, &tc).unwrap();
        let mut mc = MetaConfig::new(tc);
        mc.meta_lr = Some(0.0);
        mc.omega_init = [0.0; 3];
        mc.warmup_steps = Some(5);
        let run = run_metalad(&ds, None, &mc).unwrap();
        assert_eq!(run.model.params, plain.params);
        for (a, b) in run.report.epochs.iter().zip(&report.epochs) {
            assert_eq!(a.errors, b.errors);
            assert_eq!(a.mean_loss.to_bits(), b.mean_loss.to_bits());
        }
        assert!(run
            .omega_log
            .iter()
            .all(|r| r.values.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn warmup_matches_plain_training() {
        let ds = task(4);
        let mut tc = TrainConfig::new(3, 2);
        tc.batch_size = 60;
        let mut mc = MetaConfig::new(tc);
        mc.train.epochs = 6;
        mc.warmup_steps = Some(3 * mc.steps_per_epoch(ds.len()));
        let run = run_metalad(&ds, None, &mc).unwrap();
        let (plain_long, rep) = train(&ds, None, &mc.train).unwrap();
        assert_ne!(plain_long.params, run.model.params);
        // the first three epochs are pure warmup
        for e in 0..3 {
            assert_eq!(run.report.epochs[e].errors, rep.epochs[e].errors);
            assert_eq!(
                run.report.epochs[e].mean_loss.to_bits(),
                rep.epochs[e].mean_loss.to_bits()
            );
        }
    }

    #[test]
    fn omega_logged_every_meta_step_and_finite() {
        let ds = task(5);
        let mut tc = TrainConfig::new(3, 1);
        tc.batch_size = 100;
        let mut mc = MetaConfig::new(tc);
        mc.warmup_steps = Some(2);
        let run = run_metalad(&ds, None, &mc).unwrap();
        let (t1, t2) = mc.phases(ds.len());
        assert_eq!(run.omega_log.len(), 1 + t2 - t1);
        assert!(run
            .omega_log
            .iter()
            .all(|r| r.values.iter().all(|v| v.is_finite())));
        let mut buf = Vec::new();
        run.write_omega_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + run.omega_log.len() * 2);
    }

    #[test]
    fn ablated_term_stays_zero() {
        let ds = three_class(6);
        let mut tc = TrainConfig::new(2, 1);
        tc.batch_size = 40;
        let mut mc = MetaConfig::new(tc);
        mc.meta_per_class = Some(5);
        mc.warmup_steps = Some(1);
        mc.ablate = vec![Term::Variance];
        let run = run_metalad(&ds, None, &mc).unwrap();
        for (k, v) in run.omega.values.iter().enumerate() {
            if k % TERMS == Term::Variance as usize {
                assert_eq!(*v, 0.0);
            }
        }
        assert!(run.omega.values.iter().any(|&v| v != 1.0 && v != 0.0));
    }

    #[test]
    fn meta_set_is_balanced_and_drawn_from_training_data() {
        let ds = three_class(7);
        let idx = meta_set_indices(&ds, 4, 3, false).unwrap();
        assert_eq!(ds.subset(&idx).class_counts(), vec![4, 4, 4]);
        assert_eq!(idx, meta_set_indices(&ds, 4, 3, false).unwrap());
        let smallest = *ds.class_counts().iter().min().unwrap();
        assert!(matches!(
            meta_set_indices(&ds, smallest + 1, 3, false),
            Err(Error::ImbalancedMetaSet(_))
        ));
        assert!(meta_set_indices(&ds, smallest + 1, 3, true).is_ok());
    }

    #[test]
    fn config_checks_phase_order() {
        let mut mc = MetaConfig::new(TrainConfig::new(2, 0));
        mc.warmup_steps = Some(100);
        assert!(mc.validate(64).is_err());
    }
}
