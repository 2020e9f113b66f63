//! Config-driven command-line runner.
//!
//! Each verb reads one TOML file (`--config`), rejects unknown keys before
//! doing any work, and writes CSV and JSON under `--out`. Every CSV starts
//! with a `# schema=imbalance-lab/<kind>/v1` line; a creation-time line
//! follows unless `--deterministic` is given, in which case repeated runs
//! produce byte-identical files.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 numeric
//! divergence, 4 validation failure.

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::Error;
use crate::losses::{PerturbationContext, Term};
use crate::meta::{compare_gaps, run_metalad, GapComparison, MetaConfig, MetaProblem, MetaRun};
use crate::metrics::{ldi, report_dataset, variance_imbalance_nu};
use crate::numerics::{DenseMatrix, Purpose, RngStream};
use crate::oracle::{
    bayes_three_class, corollary_grid, local_gap, mixed_bias_closed_form, mixed_bias_numeric,
    monte_carlo_error, optimal_binary_variance, optimal_mixed, three_class_accuracies, Classifier,
};
use crate::taskgen::{generate, neighborhood_fixture, toy_graph, GaussianTaskSpec};
use crate::trainer::{train, Model, TrainConfig, TrainReport};

pub const SEED_ENV: &str = "IMBALANCE_LAB_SEED";
pub const OUT_ENV: &str = "IMBALANCE_LAB_OUT";
pub const SCHEMA_PREFIX: &str = "imbalance-lab";

#[derive(Debug, Parser)]
#[command(
    name = "imbalance-lab",
    version,
    about = "Class-imbalance experiments on synthetic tasks"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true, env = SEED_ENV)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, env = OUT_ENV, default_value = "out")]
    pub out: PathBuf,
    /// Overwrite existing output files.
    #[arg(long, global = true)]
    pub force: bool,
    /// Omit the creation-time line from CSV headers.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Worker threads for seed lists and Monte Carlo.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Sample a synthetic dataset.
    Gen,
    /// Optimal-classifier errors with Monte-Carlo checks.
    Oracle,
    /// Imbalance measures of a dataset file.
    Measure {
        /// Dataset file; overrides the configuration.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Train with a fixed loss.
    Train,
    /// Bilevel training of the perturbation weights.
    Metalad,
    /// Gap grids over task parameters.
    Sweep {
        /// Check the expected monotone pattern and fail on violations.
        #[arg(long)]
        verify: bool,
    },
    /// Built-in numerical self-checks.
    Verify,
}

/// A command failure with its exit code.
#[derive(Debug)]
pub enum Failure {
    Config(String),
    Divergence(String),
    Validation(String),
}

impl Failure {
    pub fn code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Divergence(_) => 3,
            Self::Validation(_) => 4,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Config(m) => write!(f, "configuration error: {m}"),
            Self::Divergence(m) => write!(f, "numeric divergence: {m}"),
            Self::Validation(m) => write!(f, "validation failed: {m}"),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Divergence(_) => Self::Divergence(e.to_string()),
            Error::InvalidInput(_)
            | Error::Format(_)
            | Error::Io(_)
            | Error::Csv(_)
            | Error::Json(_) => Self::Config(e.to_string()),
            _ => Self::Validation(e.to_string()),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
            0
        }
        Err(f) => {
            eprintln!("error: {f}");
            f.code()
        }
    }
}

/// Runs a parsed command and returns the files it wrote.
pub fn execute(cli: &Cli) -> CliResult<Vec<PathBuf>> {
    if let Some(n) = cli.common.threads {
        if n == 0 {
            return Err(Failure::Config("--threads must be >= 1".into()));
        }
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    let mut out = Output::new(&cli.common)?;
    match &cli.command {
        Command::Gen => cmd_gen(&cli.common, &mut out)?,
        Command::Oracle => cmd_oracle(&cli.common, &mut out)?,
        Command::Measure { dataset } => cmd_measure(&cli.common, dataset.as_deref(), &mut out)?,
        Command::Train => cmd_train(&cli.common, &mut out)?,
        Command::Metalad => cmd_metalad(&cli.common, &mut out)?,
        Command::Sweep { verify } => cmd_sweep(&cli.common, *verify, &mut out)?,
        Command::Verify => cmd_verify(&mut out)?,
    }
    Ok(out.written)
}

/// Reads and validates a TOML configuration.
pub fn load_config<T: for<'de> Deserialize<'de>>(path: Option<&Path>) -> CliResult<T> {
    let path =
        path.ok_or_else(|| Failure::Config("--config is required for this command".into()))?;
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

struct Output {
    dir: PathBuf,
    force: bool,
    deterministic: bool,
    written: Vec<PathBuf>,
}

impl Output {
    fn new(common: &Common) -> CliResult<Self> {
        Ok(Self {
            dir: common.out.clone(),
            force: common.force,
            deterministic: common.deterministic,
            written: Vec::new(),
        })
    }

    fn target(&self, name: &str) -> CliResult<PathBuf> {
        let path = self.dir.join(name);
        if path.exists() && !self.force {
            return Err(Failure::Config(format!(
                "{} exists; pass --force to overwrite",
                path.display()
            )));
        }
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)
                .map_err(|e| Failure::Config(format!("{}: {e}", parent.display())))?;
        }
        Ok(path)
    }

    fn bytes(&mut self, name: &str, data: &[u8]) -> CliResult<()> {
        let path = self.target(name)?;
        fs::write(&path, data).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
        self.written.push(path);
        Ok(())
    }

    fn csv(
        &mut self,
        name: &str,
        kind: &str,
        body: impl FnOnce(&mut Vec<u8>) -> crate::Result<()>,
    ) -> CliResult<()> {
        let mut buf = format!("# schema={SCHEMA_PREFIX}/{kind}/v1\n").into_bytes();
        if !self.deterministic {
            let secs = std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map_or(0, |d| d.as_secs());
            buf.extend(format!("# created_unix={secs}\n").bytes());
        }
        body(&mut buf)?;
        self.bytes(name, &buf)
    }

    fn rows(
        &mut self,
        name: &str,
        kind: &str,
        header: &[&str],
        rows: &[Vec<String>],
    ) -> CliResult<()> {
        self.csv(name, kind, |buf| {
            let mut w = csv::Writer::from_writer(buf);
            w.write_record(header)?;
            for r in rows {
                w.write_record(r)?;
            }
            w.flush()?;
            Ok(())
        })
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(value).map_err(Error::from)?;
        text.push('\n');
        self.bytes(name, text.as_bytes())
    }
}

fn num(v: f64) -> String {
    format!("{v:?}")
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), num)
}

fn variant_name(spec: &GaussianTaskSpec) -> String {
    serde_json::to_value(spec)
        .ok()
        .and_then(|v| v.get("variant").and_then(|s| s.as_str().map(str::to_owned)))
        .unwrap_or_default()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

// ---------------------------------------------------------------- gen

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataFormat {
    #[default]
    Csv,
    Binary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyGraphConfig {
    /// Target fraction of different-class neighbours per class.
    pub heterophily: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    /// Sample count (per class for balanced families and the toy graph).
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub format: DataFormat,
    #[serde(default)]
    pub task: Option<GaussianTaskSpec>,
    #[serde(default)]
    pub toy_graph: Option<ToyGraphConfig>,
}

fn cmd_gen(common: &Common, out: &mut Output) -> CliResult<()> {
    let cfg: GenConfig = load_config(common.config.as_deref())?;
    let seed = common.seed.unwrap_or(cfg.seed);
    let ds = match (&cfg.task, &cfg.toy_graph) {
        (Some(spec), None) => generate(spec, cfg.n, &mut RngStream::new(seed, Purpose::TaskGen))?,
        (None, Some(g)) => toy_graph(
            cfg.n,
            &g.heterophily,
            &mut RngStream::new(seed, Purpose::Graph),
        )?,
        _ => {
            return Err(Failure::Config(
                "set exactly one of [task] or [toy_graph]".into(),
            ))
        }
    };
    let mut buf = Vec::new();
    let name = match cfg.format {
        DataFormat::Csv => {
            ds.write_csv(&mut buf)?;
            "dataset.csv"
        }
        DataFormat::Binary => {
            ds.write_binary(&mut buf)?;
            "dataset.bin"
        }
    };
    out.bytes(name, &buf)
}

// ---------------------------------------------------------------- oracle

fn default_mc() -> usize {
    100_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    #[serde(default)]
    pub tasks: Vec<GaussianTaskSpec>,
    #[serde(default = "default_mc")]
    pub mc_samples: usize,
    #[serde(default)]
    pub seed: u64,
}

/// Analytic rule and class errors for one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRow {
    pub variant: String,
    pub classifier: Classifier,
    pub analytic_error: Vec<f64>,
    pub mc_error: Vec<f64>,
    pub mc_standard_error: Vec<f64>,
    pub gap: f64,
    pub intermediates: serde_json::Value,
}

fn analytic(spec: &GaussianTaskSpec) -> CliResult<(Classifier, Vec<f64>, f64, serde_json::Value)> {
    let r = match spec {
        GaussianTaskSpec::BinaryVariance { .. } | GaussianTaskSpec::FeatureNoise { .. } => {
            optimal_binary_variance(spec)?
        }
        GaussianTaskSpec::ThreeClassDistance { .. } => bayes_three_class(spec)?,
        GaussianTaskSpec::MixedPropVar { .. } => optimal_mixed(spec)?,
        GaussianTaskSpec::LocalTwoCluster { sigma, alpha } => {
            let g = local_gap(*sigma, &[*alpha])?.remove(0);
            let class1 = alpha * g.error_near + (1.0 - alpha) * g.error_far;
            let extra = serde_json::to_value(&g).map_err(Error::from)?;
            return Ok((g.classifier(), vec![g.error_other, class1], g.gap, extra));
        }
        GaussianTaskSpec::LongTailMulticlass { .. } => {
            return Err(Failure::Config(
                "no analytic oracle for long_tail_multiclass".into(),
            ))
        }
    };
    let extra = serde_json::to_value(&r.intermediates).map_err(Error::from)?;
    Ok((r.classifier, r.per_class_error, r.gap, extra))
}

pub fn oracle_row(spec: &GaussianTaskSpec, mc_samples: usize, seed: u64) -> CliResult<OracleRow> {
    spec.validate()?;
    let (classifier, analytic_error, gap, intermediates) = analytic(spec)?;
    let mc = monte_carlo_error(&classifier, spec, mc_samples, seed)?;
    let se = analytic_error
        .iter()
        .enumerate()
        .map(|(c, &p)| mc.standard_error(c, p))
        .collect();
    Ok(OracleRow {
        variant: variant_name(spec),
        classifier,
        analytic_error,
        mc_error: mc.per_class_error,
        mc_standard_error: se,
        gap,
        intermediates,
    })
}

fn cmd_oracle(common: &Common, out: &mut Output) -> CliResult<()> {
    let cfg: OracleConfig = load_config(common.config.as_deref())?;
    let seed = common.seed.unwrap_or(cfg.seed);
    let results = cfg
        .tasks
        .iter()
        .map(|s| oracle_row(s, cfg.mc_samples, seed))
        .collect::<CliResult<Vec<_>>>()?;
    let mut rows = Vec::new();
    for (i, r) in results.iter().enumerate() {
        for c in 0..r.analytic_error.len() {
            let (a, m, se) = (r.analytic_error[c], r.mc_error[c], r.mc_standard_error[c]);
            rows.push(vec![
                i.to_string(),
                r.variant.clone(),
                c.to_string(),
                num(a),
                num(m),
                num(se),
                num(if se > 0.0 { (m - a) / se } else { 0.0 }),
                num(r.gap),
            ]);
        }
    }
    out.rows(
        "oracle.csv",
        "oracle",
        &[
            "case",
            "variant",
            "class",
            "analytic_error",
            "mc_error",
            "mc_se",
            "z",
            "gap",
        ],
        &rows,
    )?;
    out.json("oracle.json", &results)
}

// ---------------------------------------------------------------- measure

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasureConfig {
    pub dataset: PathBuf,
    /// Checkpoint whose last-layer rows give the pair directions; class
    /// statistics are then taken in that model's feature space.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

fn cmd_measure(common: &Common, dataset: Option<&Path>, out: &mut Output) -> CliResult<()> {
    let cfg = match (dataset, common.config.as_deref()) {
        (Some(p), None) => MeasureConfig {
            dataset: p.to_path_buf(),
            checkpoint: None,
        },
        (d, Some(c)) => {
            let mut cfg: MeasureConfig = load_config(Some(c))?;
            if let Some(p) = d {
                cfg.dataset = p.to_path_buf();
            }
            cfg
        }
        (None, None) => return Err(Failure::Config("pass --dataset or --config".into())),
    };
    let mut ds = Dataset::load(&cfg.dataset)?;
    let weights = match &cfg.checkpoint {
        Some(p) => {
            let f =
                fs::File::open(p).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?;
            let model = Model::read_checkpoint(std::io::BufReader::new(f))?;
            ds.features = model.features(&ds.features)?;
            Some(model.classifier_rows())
        }
        None => None,
    };
    let report = report_dataset(&ds, weights.as_ref())?;
    let mut pairs = Vec::new();
    report.write_pairs_csv(&mut pairs)?;
    out.csv("measure_pairs.csv", "measure-pairs", |buf| {
        buf.extend(pairs);
        Ok(())
    })?;
    let class_rows: Vec<Vec<String>> = (0..ds.n_classes)
        .map(|c| {
            vec![
                c.to_string(),
                num(report.proportions[c]),
                num(report.distances.per_class[c]),
                opt(report.ldi.as_ref().map(|l| l.per_class[c])),
            ]
        })
        .collect();
    out.rows(
        "measure_classes.csv",
        "measure-classes",
        &["class", "proportion", "mean_distance", "ldi"],
        &class_rows,
    )?;
    if let Some(l) = &report.ldi {
        let rows: Vec<Vec<String>> = l
            .per_node
            .iter()
            .enumerate()
            .map(|(i, v)| vec![i.to_string(), ds.labels[i].to_string(), num(*v)])
            .collect();
        out.rows(
            "ldi_nodes.csv",
            "ldi-nodes",
            &["node", "class", "ldi"],
            &rows,
        )?;
    }
    out.json("measure.json", &report)
}

// ---------------------------------------------------------------- train / metalad

/// A dataset file or a task to sample with the run seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub task: Option<GaussianTaskSpec>,
    #[serde(default)]
    pub n: Option<usize>,
}

impl DataConfig {
    /// Training data use substream 0 of the task-generation stream, held-out
    /// data substream 1.
    pub fn load(&self, seed: u64, substream: u64) -> CliResult<Dataset> {
        match (&self.path, &self.task) {
            (Some(p), None) => Ok(Dataset::load(p)?),
            (None, Some(spec)) => {
                let n = self
                    .n
                    .ok_or_else(|| Failure::Config("a sampled dataset needs `n`".into()))?;
                let mut rng = RngStream::with_index(seed, Purpose::TaskGen, substream);
                Ok(generate(spec, n, &mut rng)?)
            }
            _ => Err(Failure::Config(
                "set exactly one of `path` or `task`".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRunConfig {
    pub data: DataConfig,
    #[serde(default)]
    pub test: Option<DataConfig>,
    pub train: TrainConfig,
    /// Replaces `train.seed` with each listed seed in turn.
    #[serde(default)]
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaRunConfig {
    pub data: DataConfig,
    #[serde(default)]
    pub test: Option<DataConfig>,
    pub meta: MetaConfig,
    #[serde(default)]
    pub seeds: Vec<u64>,
    /// Also train plain cross-entropy, fixed logit adjustment and one run per
    /// ablated term, and emit their held-out gaps.
    #[serde(default)]
    pub compare: bool,
}

fn seed_list(common: &Common, listed: &[u64], fallback: u64) -> Vec<u64> {
    match common.seed {
        Some(s) => vec![s],
        None if listed.is_empty() => vec![fallback],
        None => listed.to_vec(),
    }
}

fn load_pair(
    data: &DataConfig,
    test: Option<&DataConfig>,
    seed: u64,
) -> CliResult<(Dataset, Option<Dataset>)> {
    let ds = data.load(seed, 0)?;
    let test = test.map(|t| t.load(seed, 1)).transpose()?;
    Ok((ds, test))
}

#[derive(Debug, Clone, Serialize)]
struct RunSummary {
    seed: u64,
    final_errors: Vec<f64>,
    final_gap: f64,
    mean_error: f64,
}

fn summary(seed: u64, report: &TrainReport) -> RunSummary {
    let e = report.final_errors().to_vec();
    RunSummary {
        seed,
        mean_error: e.iter().sum::<f64>() / e.len().max(1) as f64,
        final_gap: report.final_gap(),
        final_errors: e,
    }
}

fn write_report(out: &mut Output, dir: &str, model: &Model, report: &TrainReport) -> CliResult<()> {
    out.csv(&format!("{dir}/errors.csv"), "errors", |b| {
        report.write_errors_csv(b)
    })?;
    out.csv(&format!("{dir}/terms.csv"), "terms", |b| {
        report.write_terms_csv(b)
    })?;
    let mut ck = Vec::new();
    model.write_checkpoint(&mut ck)?;
    out.bytes(&format!("{dir}/model.ckpt"), &ck)
}

fn write_summaries(out: &mut Output, kind: &str, runs: &[RunSummary]) -> CliResult<()> {
    let rows: Vec<Vec<String>> = runs
        .iter()
        .map(|r| {
            let errs = r
                .final_errors
                .iter()
                .map(|e| num(*e))
                .collect::<Vec<_>>()
                .join(";");
            vec![
                r.seed.to_string(),
                num(r.final_gap),
                num(r.mean_error),
                errs,
            ]
        })
        .collect();
    out.rows(
        &format!("{kind}_summary.csv"),
        &format!("{kind}-summary"),
        &["seed", "gap", "mean_error", "class_errors"],
        &rows,
    )?;
    out.json(&format!("{kind}_summary.json"), &runs)
}

fn cmd_train(common: &Common, out: &mut Output) -> CliResult<()> {
    let cfg: TrainRunConfig = load_config(common.config.as_deref())?;
    cfg.train.validate()?;
    let seeds = seed_list(common, &cfg.seeds, cfg.train.seed);
    let results = seeds
        .par_iter()
        .map(|&seed| {
            let (ds, test) = load_pair(&cfg.data, cfg.test.as_ref(), seed)?;
            let mut tc = cfg.train.clone();
            tc.seed = seed;
            Ok((seed, train(&ds, test.as_ref(), &tc)?))
        })
        .collect::<CliResult<Vec<_>>>()?;
    let mut runs = Vec::new();
    for (seed, (model, report)) in &results {
        write_report(out, &format!("seed-{seed}"), model, report)?;
        runs.push(summary(*seed, report));
    }
    write_summaries(out, "train", &runs)
}

fn write_omega(out: &mut Output, dir: &str, run: &MetaRun) -> CliResult<()> {
    out.csv(&format!("{dir}/omega.csv"), "omega", |b| {
        run.write_omega_csv(b)
    })
}

fn cmd_metalad(common: &Common, out: &mut Output) -> CliResult<()> {
    let cfg: MetaRunConfig = load_config(common.config.as_deref())?;
    cfg.meta.train.validate()?;
    let seeds = seed_list(common, &cfg.seeds, cfg.meta.train.seed);
    type SeedResult = (u64, MetaRun, Option<GapComparison>);
    let results = seeds
        .par_iter()
        .map(|&seed| -> CliResult<SeedResult> {
            let (ds, test) = load_pair(&cfg.data, cfg.test.as_ref(), seed)?;
            let mut mc = cfg.meta.clone();
            mc.train.seed = seed;
            let run = run_metalad(&ds, test.as_ref(), &mc)?;
            let cmp = if cfg.compare {
                Some(compare_gaps(&ds, test.as_ref().unwrap_or(&ds), &mc)?)
            } else {
                None
            };
            Ok((seed, run, cmp))
        })
        .collect::<CliResult<Vec<_>>>()?;
    let mut runs = Vec::new();
    for (seed, run, _) in &results {
        let dir = format!("seed-{seed}");
        write_report(out, &dir, &run.model, &run.report)?;
        write_omega(out, &dir, run)?;
        runs.push(summary(*seed, &run.report));
    }
    write_summaries(out, "metalad", &runs)?;
    if cfg.compare {
        let cmps: Vec<(u64, &GapComparison)> = results
            .iter()
            .filter_map(|(s, _, c)| c.as_ref().map(|c| (*s, c)))
            .collect();
        let mut methods: Vec<(String, Vec<f64>)> = vec![
            (
                "cross_entropy".into(),
                cmps.iter().map(|(_, c)| c.cross_entropy).collect(),
            ),
            (
                "logit_adjusted".into(),
                cmps.iter().map(|(_, c)| c.logit_adjusted).collect(),
            ),
            (
                "metalad".into(),
                cmps.iter().map(|(_, c)| c.metalad).collect(),
            ),
        ];
        for t in Term::ALL {
            methods.push((
                format!("without_{}", t.name()),
                cmps.iter().map(|(_, c)| c.ablated[t as usize]).collect(),
            ));
        }
        let mut rows = Vec::new();
        for (name, gaps) in methods {
            for ((seed, _), g) in cmps.iter().zip(&gaps) {
                rows.push(vec![seed.to_string(), name.clone(), num(*g)]);
            }
            rows.push(vec!["median".into(), name, num(median(gaps))]);
        }
        out.rows(
            "comparison.csv",
            "comparison",
            &["seed", "method", "gap"],
            &rows,
        )?;
    }
    Ok(())
}

// ---------------------------------------------------------------- sweep

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixedSweep {
    pub ks: Vec<f64>,
    pub vs: Vec<f64>,
    pub dims: Vec<usize>,
    pub eta: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalSweep {
    pub sigmas: Vec<f64>,
    pub alphas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default)]
    pub mixed: Option<MixedSweep>,
    #[serde(default)]
    pub local: Option<LocalSweep>,
}

fn cmd_sweep(common: &Common, verify: bool, out: &mut Output) -> CliResult<()> {
    let cfg: SweepConfig = load_config(common.config.as_deref())?;
    if cfg.mixed.is_none() && cfg.local.is_none() {
        return Err(Failure::Config("set [mixed] and/or [local]".into()));
    }
    let mut problems: Vec<Vec<String>> = Vec::new();
    if let Some(m) = &cfg.mixed {
        let mut rows = Vec::new();
        for &d in &m.dims {
            for &k in &m.ks {
                for &v in &m.vs {
                    let spec = GaussianTaskSpec::MixedPropVar {
                        d,
                        eta: m.eta,
                        sigma: m.sigma,
                        k,
                        v,
                    };
                    spec.validate()?;
                    let mut row = vec![d.to_string(), num(k), num(v)];
                    if mixed_bias_closed_form(d, m.eta, m.sigma, k, v).is_some() {
                        let r = optimal_mixed(&spec)?;
                        row.extend([
                            opt(r.intermediates.b_closed_form),
                            opt(r.intermediates.b_numeric),
                            num(r.per_class_error[0]),
                            num(r.per_class_error[1]),
                            num(r.gap),
                        ]);
                    } else {
                        row.extend([
                            "NA".into(),
                            num(mixed_bias_numeric(d, m.eta, m.sigma, k, v)),
                            "NA".into(),
                            "NA".into(),
                            "NA".into(),
                        ]);
                    }
                    rows.push(row);
                }
            }
            if verify && !m.ks.is_empty() && !m.vs.is_empty() {
                let grid = corollary_grid(&m.ks, &m.vs, d, m.eta, m.sigma)?;
                for viol in grid.violations(1e-10) {
                    problems.push(vec![d.to_string(), viol.rule, viol.detail]);
                }
                let kmax = (0..m.ks.len()).max_by(|&a, &b| m.ks[a].total_cmp(&m.ks[b]));
                let vmin = (0..m.vs.len()).min_by(|&a, &b| m.vs[a].total_cmp(&m.vs[b]));
                if let (Some(at), Some(ki), Some(vi)) = (grid.argmax(), kmax, vmin) {
                    if at != (ki, vi) {
                        problems.push(vec![
                            d.to_string(),
                            "argmax".into(),
                            format!("largest gap at K={} V={}", m.ks[at.0], m.vs[at.1]),
                        ]);
                    }
                }
            }
        }
        out.rows(
            "gap_grid.csv",
            "gap-grid",
            &[
                "d",
                "k",
                "v",
                "b_closed_form",
                "b_numeric",
                "error_0",
                "error_1",
                "gap",
            ],
            &rows,
        )?;
    }
    if let Some(l) = &cfg.local {
        let mut rows = Vec::new();
        for &sigma in &l.sigmas {
            let gaps = local_gap(sigma, &l.alphas)?;
            for g in &gaps {
                rows.push(vec![
                    num(sigma),
                    num(g.alpha),
                    num(g.threshold),
                    num(g.error_other),
                    num(g.error_near),
                    num(g.error_far),
                    num(g.gap),
                ]);
            }
            if verify {
                let mut sorted = gaps.clone();
                sorted.sort_by(|a, b| a.alpha.total_cmp(&b.alpha));
                for w in sorted.windows(2) {
                    if w[1].gap > w[0].gap + 1e-12 {
                        problems.push(vec![
                            num(sigma),
                            "local_non_increasing".into(),
                            format!(
                                "alpha {} -> {}: {} -> {}",
                                w[0].alpha, w[1].alpha, w[0].gap, w[1].gap
                            ),
                        ]);
                    }
                }
            }
        }
        out.rows(
            "local_gap.csv",
            "local-gap",
            &[
                "sigma",
                "alpha",
                "threshold",
                "error_other",
                "error_near",
                "error_far",
                "gap",
            ],
            &rows,
        )?;
    }
    if verify {
        out.rows(
            "sweep_violations.csv",
            "sweep-violations",
            &["scope", "rule", "detail"],
            &problems,
        )?;
        if !problems.is_empty() {
            return Err(Failure::Validation(format!(
                "{} pattern violations",
                problems.len()
            )));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- verify

/// One built-in check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

fn check(name: &'static str, pass: bool, detail: String) -> Check {
    Check { name, pass, detail }
}

/// Fast numerical self-checks over the library.
pub fn self_checks() -> crate::Result<Vec<Check>> {
    let mut out = Vec::new();

    // three-class analytic accuracies against simulation
    let spec = GaussianTaskSpec::ThreeClassDistance {
        d: 2,
        eta: 4.0,
        sigma: 4.0,
    };
    let acc = three_class_accuracies(2, 4.0, 4.0);
    let r = bayes_three_class(&spec)?;
    let mc = monte_carlo_error(&r.classifier, &spec, 200_000, 1)?;
    let worst = (0..3)
        .map(|c| {
            ((1.0 - mc.per_class_error[c]) - acc[c]).abs() / mc.standard_error(c, 1.0 - acc[c])
        })
        .fold(0.0, f64::max);
    out.push(check(
        "three_class_monte_carlo",
        worst < 5.0,
        format!("max |z| = {worst:.2}"),
    ));

    // closed-form and numeric thresholds
    let mut db: f64 = 0.0;
    for d in [2, 5] {
        for k in [1.5, 2.0, 3.0, 5.0] {
            for v in [1.0, 2.0, 5.0, 10.0] {
                if let Some(b) = mixed_bias_closed_form(d, 5.0, 1.0, k, v) {
                    db = db.max((b - mixed_bias_numeric(d, 5.0, 1.0, k, v)).abs());
                }
            }
        }
    }
    out.push(check(
        "threshold_closed_form",
        db <= 1e-6,
        format!("max |Δb| = {db:.2e}"),
    ));

    // gap pattern over K and V
    let ks = [1.5, 2.0, 3.0, 5.0];
    let vs = [1.0, 2.0, 5.0, 10.0];
    let mut n_viol = 0;
    let mut argmax_ok = true;
    for d in [2, 5] {
        let g = corollary_grid(&ks, &vs, d, 5.0, 1.0)?;
        n_viol += g.violations(1e-10).len();
        argmax_ok &= g.argmax() == Some((3, 0));
    }
    out.push(check(
        "gap_grid_pattern",
        n_viol == 0 && argmax_ok,
        format!("{n_viol} violations, largest gap at K=5 V=1: {argmax_ok}"),
    ));

    // variance ratio on axis-aligned covariances
    let diag = |a: f64, b: f64| DenseMatrix::diagonal(&[a, b]);
    let nu_same = variance_imbalance_nu(&diag(2.0, 8.0), &diag(2.0, 4.0), &[1.0, 0.0])?;
    let nu_four = variance_imbalance_nu(&diag(8.0, 2.0), &diag(2.0, 8.0), &[1.0, 0.0])?;
    out.push(check(
        "variance_ratio_fixtures",
        nu_same == 1.0 && nu_four == 4.0,
        format!("ν = {nu_same}, {nu_four}"),
    ));

    // neighbourhood fixture
    let l = ldi(&neighborhood_fixture())?;
    let want = [0.5, 1.0 / 3.0, 1.0 / 3.0, 1.0, 1.0, 0.5];
    let ok = l.per_node[..6].iter().zip(want).all(|(a, b)| a == &b);
    out.push(check(
        "neighbourhood_fixture",
        ok,
        format!("{:?}", &l.per_node[..6]),
    ));

    // local task: gap non-increasing in the near-cluster weight
    let alphas = [0.05, 0.1, 0.2, 0.3, 0.45];
    let gaps = local_gap(1.0, &alphas)?;
    let ok = gaps.windows(2).all(|w| w[1].gap <= w[0].gap);
    out.push(check(
        "local_gap_monotone",
        ok,
        gaps.iter()
            .map(|g| format!("{:.4}", g.gap))
            .collect::<Vec<_>>()
            .join(" "),
    ));

    // normalised variance term ignores the classifier scale
    let stats = crate::taskgen::true_stats(&GaussianTaskSpec::BinaryVariance {
        d: 3,
        eta: 1.0,
        sigma: 1.0,
        k: 2.0,
    })?;
    let w = DenseMatrix::from_rows(&[vec![0.3, -0.2, 0.9], vec![-0.5, 0.4, 0.1]])?;
    let mut w3 = w.clone();
    w3.scale_in_place(3.0);
    let a = PerturbationContext::new(stats.clone(), w)?;
    let b = PerturbationContext::new(stats, w3)?;
    let nisda = (a.nisda_delta(1.0).get(0, 1) - b.nisda_delta(1.0).get(0, 1)).abs();
    let isda = (b.isda_delta(1.0).get(0, 1) - 9.0 * a.isda_delta(1.0).get(0, 1)).abs();
    out.push(check(
        "variance_term_scaling",
        nisda < 1e-12 && isda < 1e-12 * b.isda_delta(1.0).get(0, 1).abs().max(1.0),
        format!("normalised drift {nisda:.1e}, unnormalised c² drift {isda:.1e}"),
    ));

    // one unrolled hypergradient against finite differences
    let ds = generate(
        &GaussianTaskSpec::LongTailMulticlass {
            c: 3,
            d: 3,
            imbalance_ratio: 4.0,
            separation: 1.5,
            sigma: 1.0,
            sigma_scale: Some(vec![1.0, 1.5, 0.7]),
        },
        90,
        &mut RngStream::new(3, Purpose::TaskGen),
    )?;
    let arch = crate::trainer::ModelSpec::Mlp {
        hidden: 4,
        activation: crate::trainer::Activation::Tanh,
    }
    .architecture(3, 3);
    let model = Model::init(arch, &mut RngStream::new(3, Purpose::Init));
    let ctx = crate::trainer::build_context(&model, &ds)?;
    let omega = crate::losses::PerturbationParams::per_pair(3, [0.3, -0.2, 0.5]);
    let idx: Vec<usize> = (0..ds.len()).step_by(7).collect();
    let meta_idx = crate::meta::meta_set_indices(&ds, 3, 3, false)?;
    let (tr, me) = (ds.subset(&idx), ds.subset(&meta_idx));
    let p = MetaProblem {
        model: &model,
        ctx: &ctx,
        omega: &omega,
        train_x: &tr.features,
        train_y: &tr.labels,
        meta_x: &me.features,
        meta_y: &me.labels,
        eta1: 0.5,
        objective: crate::meta::MetaObjective::Perturbed,
    };
    let ex = p.hypergradient(crate::meta::HypergradMethod::Exact)?;
    let fd = p.hypergradient(crate::meta::HypergradMethod::FiniteDifference)?;
    let scale = fd.iter().fold(1e-12f64, |m, v| m.max(v.abs()));
    let rel = ex
        .iter()
        .zip(&fd)
        .map(|(a, b)| (a - b).abs() / scale)
        .fold(0.0, f64::max);
    out.push(check(
        "hypergradient_finite_difference",
        rel < 1e-3,
        format!("max rel err {rel:.2e}"),
    ));

    Ok(out)
}

fn cmd_verify(out: &mut Output) -> CliResult<()> {
    let checks = self_checks()?;
    let rows: Vec<Vec<String>> = checks
        .iter()
        .map(|c| {
            vec![
                c.name.to_string(),
                if c.pass { "PASS" } else { "FAIL" }.to_string(),
                c.detail.clone(),
            ]
        })
        .collect();
    out.rows(
        "verify.csv",
        "verify",
        &["check", "status", "detail"],
        &rows,
    )?;
    let failed: Vec<&str> = checks.iter().filter(|c| !c.pass).map(|c| c.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Validation(format!(
            "failed checks: {}",
            failed.join(", ")
        )))
    }
}
