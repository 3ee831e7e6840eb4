//! Seeded experiments on synthetic tasks and their on-disk artifacts.
//!
//! A run writes, into its output directory:
//!
//! * `manifest.toml`: code version plus an echo of the config,
//! * one per-seed CSV (`train_seed{N}.csv`, `powerlaw_seed{N}.csv`, ...),
//! * `summary.csv`: one row per seed followed by `min`, `median`, `max` rows.
//!
//! Every number written is a function of `(config, seed)` only; wall-clock time
//! is logged only when `log_wall_time = true`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alice::{naq_exactness_check, Alice, AliceConfig, AliceError};
use crate::glass::{self, Density, GlassError, GradientVariationMeasurement, Partition, PowerLawReport};
use crate::netkit::{self, Batch, LossKind, ModelSpec, NetError, ParamVector, Targets};
use crate::objective::{Counted, EvalError, Objective, Quadratic};
use crate::oracles::{self, EstimatorKernel, OracleError, SyntheticGlass1D, TestMatrix};
use crate::report::{write_csv_with_header, write_oracle_csv, OracleRow};
use crate::rng::{child_seed, seeded, SeededRng};

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error("could not parse config: {0}")]
    Parse(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Glass(#[from] GlassError),
    #[error(transparent)]
    Alice(#[from] AliceError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("empty input")]
    Empty,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    SyntheticClassification,
    SyntheticRegression,
    LeastSquares,
    PowerlawProbe,
    NaqExactness,
    EstimatorSuite,
    GlassWalkSuite,
}

/// Alice or one of the baselines it can reproduce.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OptimizerSpec {
    Alice(AliceConfig),
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
    Sgdm { lr: f64, beta1: f64 },
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        OptimizerSpec::Adam { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Synthetic data shape. The data itself depends only on `seed`, not on the run seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_train: usize,
    pub input_dim: usize,
    /// Classes for classification, outputs for regression.
    pub n_outputs: usize,
    /// Within-blob standard deviation, or target noise for regression.
    pub noise: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { n_train: 512, input_dim: 16, n_outputs: 10, noise: 1.0, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeTarget {
    Mlp,
    Quadratic,
    GlassField,
}

/// Settings for the probe and oracle-suite tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub target: ProbeTarget,
    pub lambda: f64,
    pub n_samples: usize,
    /// Optimizer steps before probing (MLP target).
    pub warmup_steps: u64,
    /// Samples in each probe minibatch (MLP target).
    pub probe_batch: usize,
    /// Independent probe minibatches whose variations are averaged (MLP target).
    pub probe_batches: usize,
    /// Parameter dimension for the quadratic, glass-field, NAQ and estimator tasks.
    pub dim: usize,
    /// Hyperplanes in the glass field.
    pub hyperplanes: usize,
    /// Half-width of the glass-field threshold range.
    pub threshold: f64,
    pub rho: f64,
    /// Kicks per glass walk.
    pub walk_n: usize,
    pub trials: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            target: ProbeTarget::Mlp,
            lambda: 0.002,
            n_samples: 8000,
            warmup_steps: 200,
            probe_batch: 16,
            probe_batches: 32,
            dim: 50,
            hyperplanes: 4000,
            threshold: 1.0,
            rho: 1.0,
            walk_n: 1000,
            trials: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub task: Task,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelSpec>,
    #[serde(default)]
    pub optimizer: OptimizerSpec,
    pub seeds: Vec<u64>,
    #[serde(default = "default_steps")]
    pub steps: u64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub probe: ProbeConfig,
    #[serde(default)]
    pub log_wall_time: bool,
}

fn default_steps() -> u64 {
    100
}

fn default_batch() -> usize {
    64
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            HarnessError::Parse(m) => HarnessError::Parse(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        if self.steps == 0 {
            return bad("steps must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if let OptimizerSpec::Alice(a) = &self.optimizer {
            a.validate()?;
        }
        match self.task {
            Task::SyntheticClassification | Task::SyntheticRegression => {
                let Some(model) = &self.model else {
                    return bad(format!("task {:?} needs a [model] table", self.task));
                };
                model.validate()?;
                if model.input_width() != self.data.input_dim {
                    return bad(format!(
                        "model input width {} does not match data.input_dim {}",
                        model.input_width(),
                        self.data.input_dim
                    ));
                }
                if model.output_width() != self.data.n_outputs {
                    return bad(format!(
                        "model output width {} does not match data.n_outputs {}",
                        model.output_width(),
                        self.data.n_outputs
                    ));
                }
                let want = if self.task == Task::SyntheticClassification {
                    LossKind::SoftmaxCrossEntropy
                } else {
                    LossKind::MeanSquaredError
                };
                if model.loss != want {
                    return bad(format!("task {:?} needs loss {:?}", self.task, want));
                }
            }
            Task::PowerlawProbe => {
                if self.probe.target == ProbeTarget::Mlp {
                    let Some(model) = &self.model else {
                        return bad("an mlp probe needs a [model] table".into());
                    };
                    model.validate()?;
                    if model.input_width() != self.data.input_dim || model.output_width() != self.data.n_outputs {
                        return bad("model widths must match data.input_dim and data.n_outputs".into());
                    }
                }
                if !(self.probe.lambda > 0.0) || self.probe.n_samples == 0 {
                    return bad("probe needs lambda > 0 and n_samples >= 1".into());
                }
            }
            _ => {}
        }
        if self.data.n_train == 0 || self.data.input_dim == 0 || self.data.n_outputs == 0 {
            return bad("data sizes must be positive".into());
        }
        Ok(())
    }
}

/// Version stamp plus config echo.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub code_version: String,
    pub config: ExperimentConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainRow {
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
    pub mean_rho: f64,
    pub mean_hbar: f64,
    pub clamp_lo: f64,
    pub clamp_hi: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub final_metric: f64,
    /// Gradient evaluations requested by the optimizer (probes and oracles excluded).
    pub grad_evals: u64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub per_seed: Vec<SeedResult>,
    pub min: f64,
    pub median: f64,
    pub max: f64,
}

/// `(min, median, max)`; an even count takes the mean of the middle pair.
pub fn aggregate(values: &[f64]) -> Result<(f64, f64, f64), HarnessError> {
    if values.is_empty() {
        return Err(HarnessError::Empty);
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let median = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
    Ok((v[0], median, v[n - 1]))
}

/// Gaussian blobs with `k` classes; centres are drawn with standard deviation 2.
pub fn blob_classification(data: &DataConfig) -> Result<Batch, NetError> {
    let mut rng = seeded(data.seed);
    let (m, k) = (data.input_dim, data.n_outputs);
    let centers: Vec<f64> = (0..k * m).map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal)).collect();
    let mut inputs = Vec::with_capacity(data.n_train * m);
    let mut labels = Vec::with_capacity(data.n_train);
    for s in 0..data.n_train {
        let c = s % k;
        for j in 0..m {
            inputs.push(centers[c * m + j] + data.noise * rng.sample::<f64, _>(StandardNormal));
        }
        labels.push(c);
    }
    Batch::new(inputs, m, Targets::Classes(labels))
}

/// Regression targets from a random ReLU teacher plus Gaussian noise.
pub fn teacher_regression(data: &DataConfig) -> Result<Batch, NetError> {
    let mut rng = seeded(data.seed);
    let m = data.input_dim;
    let teacher = ModelSpec::new(vec![m, 32, data.n_outputs], LossKind::MeanSquaredError);
    let tp = netkit::build_model(&teacher, child_seed(data.seed, 7))?;
    let inputs: Vec<f64> = (0..data.n_train * m).map(|_| rng.sample(StandardNormal)).collect();
    let probe = Batch::new(inputs.clone(), m, Targets::Values(vec![0.0; data.n_train * data.n_outputs]))?;
    let mut y = netkit::forward(&teacher, &tp, &probe)?;
    for v in &mut y {
        *v += data.noise * rng.sample::<f64, _>(StandardNormal);
    }
    Batch::new(inputs, m, Targets::Values(y))
}

/// Linear least squares `½‖Ax − b‖²` with standard normal `A` (`n_train × input_dim`) and `b`.
#[derive(Debug, Clone)]
pub struct LeastSquares {
    pub rows: usize,
    pub cols: usize,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl LeastSquares {
    pub fn random(data: &DataConfig) -> Self {
        let mut rng = seeded(data.seed);
        let (rows, cols) = (data.n_train, data.input_dim);
        let a = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
        let b = (0..rows).map(|_| rng.sample(StandardNormal)).collect();
        Self { rows, cols, a, b }
    }

    fn residual(&self, x: &[f64]) -> Vec<f64> {
        (0..self.rows)
            .map(|r| self.a[r * self.cols..(r + 1) * self.cols].iter().zip(x).map(|(p, q)| p * q).sum::<f64>() - self.b[r])
            .collect()
    }

    pub fn loss(&self, x: &[f64]) -> f64 {
        0.5 * self.residual(x).iter().map(|r| r * r).sum::<f64>()
    }
}

impl Objective for LeastSquares {
    fn gradient_into(&mut self, theta: &[f64], grad: &mut [f64]) -> Result<(), EvalError> {
        if theta.len() != self.cols {
            return Err(EvalError(format!("expected {} parameters, got {}", self.cols, theta.len())));
        }
        let r = self.residual(theta);
        for (j, g) in grad.iter_mut().enumerate() {
            *g = (0..self.rows).map(|i| self.a[i * self.cols + j] * r[i]).sum();
        }
        Ok(())
    }
}

/// Piecewise-constant gradient field: each of `K` random hyperplanes adds a
/// fixed jump vector on its positive side, `g(θ) = Σₖ cₖ 1[nₖ·θ > tₖ]`.
#[derive(Debug, Clone)]
pub struct GlassField {
    pub dim: usize,
    normals: Vec<f64>,
    thresholds: Vec<f64>,
    jumps: Vec<f64>,
}

impl GlassField {
    pub fn random(dim: usize, hyperplanes: usize, threshold: f64, seed: u64) -> Self {
        let mut rng = seeded(seed);
        let mut normals = Vec::with_capacity(hyperplanes * dim);
        for _ in 0..hyperplanes {
            let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            normals.extend(v.iter().map(|x| x / norm));
        }
        let thresholds = (0..hyperplanes).map(|_| rng.random_range(-threshold..threshold)).collect();
        let scale = 1.0 / (hyperplanes as f64).sqrt();
        let jumps = (0..hyperplanes * dim).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
        Self { dim, normals, thresholds, jumps }
    }
}

impl Objective for GlassField {
    fn gradient_into(&mut self, theta: &[f64], grad: &mut [f64]) -> Result<(), EvalError> {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let d = self.dim;
        for (k, t) in self.thresholds.iter().enumerate() {
            let proj: f64 = self.normals[k * d..(k + 1) * d].iter().zip(theta).map(|(a, b)| a * b).sum();
            if proj > *t {
                for (g, c) in grad.iter_mut().zip(&self.jumps[k * d..(k + 1) * d]) {
                    *g += c;
                }
            }
        }
        Ok(())
    }
}

/// Random symmetric `d × d` matrix with standard normal entries.
pub fn random_symmetric(d: usize, rng: &mut SeededRng) -> Vec<f64> {
    let mut h = vec![0.0; d * d];
    for i in 0..d {
        for j in i..d {
            let v: f64 = rng.sample(StandardNormal);
            h[i * d + j] = v;
            h[j * d + i] = v;
        }
    }
    h
}

/// Random symmetric positive definite `BᵀB/d + I/10` with standard normal `B`.
pub fn random_spd(d: usize, rng: &mut SeededRng) -> Vec<f64> {
    let b: Vec<f64> = (0..d * d).map(|_| rng.sample(StandardNormal)).collect();
    let mut h = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            h[i * d + j] = (0..d).map(|k| b[k * d + i] * b[k * d + j]).sum::<f64>() / d as f64;
        }
        h[i * d + i] += 0.1;
    }
    h
}

/// Adam as a stepper (bias corrected).
#[derive(Debug, Clone)]
pub struct AdamBaseline {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamBaseline {
    pub fn new(d: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { lr, beta1, beta2, eps, m: vec![0.0; d], v: vec![0.0; d], t: 0 }
    }

    pub fn step(&mut self, theta: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..theta.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            theta[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
    }
}

/// SGD with averaged momentum as a stepper.
#[derive(Debug, Clone)]
pub struct SgdmBaseline {
    pub lr: f64,
    pub beta1: f64,
    m: Vec<f64>,
}

impl SgdmBaseline {
    pub fn new(d: usize, lr: f64, beta1: f64) -> Self {
        Self { lr, beta1, m: vec![0.0; d] }
    }

    pub fn step(&mut self, theta: &mut [f64], grad: &[f64]) {
        for i in 0..theta.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            theta[i] -= self.lr * self.m[i];
        }
    }
}

#[derive(Debug, Clone, Default)]
struct StepDiag {
    mean_rho: f64,
    mean_hbar: f64,
    clamp_lo: f64,
    clamp_hi: f64,
}

enum Runner {
    Alice(Box<Alice>),
    Adam(AdamBaseline, Vec<f64>, Vec<f64>),
    Sgdm(SgdmBaseline, Vec<f64>, Vec<f64>),
}

impl Runner {
    fn new(spec: &OptimizerSpec, init: Vec<f64>, seed: u64) -> Result<Self, HarnessError> {
        let d = init.len();
        Ok(match spec {
            OptimizerSpec::Alice(cfg) => Runner::Alice(Box::new(Alice::new(cfg.clone(), init, seed)?)),
            OptimizerSpec::Adam { lr, beta1, beta2, eps } => {
                Runner::Adam(AdamBaseline::new(d, *lr, *beta1, *beta2, *eps), init, vec![0.0; d])
            }
            OptimizerSpec::Sgdm { lr, beta1 } => Runner::Sgdm(SgdmBaseline::new(d, *lr, *beta1), init, vec![0.0; d]),
        })
    }

    fn params(&self) -> &[f64] {
        match self {
            Runner::Alice(a) => a.params(),
            Runner::Adam(_, p, _) | Runner::Sgdm(_, p, _) => p,
        }
    }

    fn step<O: Objective + ?Sized>(&mut self, obj: &mut O) -> Result<StepDiag, HarnessError> {
        match self {
            Runner::Alice(a) => {
                let rec = a.step(obj)?;
                let d = rec.h_mod.len().max(1) as f64;
                Ok(StepDiag {
                    mean_rho: a.state.rho.iter().sum::<f64>() / d,
                    mean_hbar: rec.h_mod.iter().sum::<f64>() / d,
                    clamp_lo: rec.clamp_lo,
                    clamp_hi: rec.clamp_hi,
                })
            }
            Runner::Adam(opt, p, g) => {
                obj.gradient_into(p, g)?;
                opt.step(p, g);
                Ok(StepDiag::default())
            }
            Runner::Sgdm(opt, p, g) => {
                obj.gradient_into(p, g)?;
                opt.step(p, g);
                Ok(StepDiag::default())
            }
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Trains an MLP with minibatches drawn by a per-seed stream; returns final full-data loss.
fn train_mlp(
    cfg: &ExperimentConfig,
    model: &ModelSpec,
    data: &Batch,
    seed: u64,
    steps: u64,
    log: Option<&mut Vec<TrainRow>>,
) -> Result<(ParamVector, f64, u64), HarnessError> {
    let init = netkit::build_model(model, child_seed(seed, 0))?;
    let mut runner = Runner::new(&cfg.optimizer, init.into_inner(), child_seed(seed, 1))?;
    let mut rng = seeded(child_seed(seed, 2));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let bs = cfg.batch_size.min(data.len());
    let mut evals = 0u64;
    let mut log = log;
    let start = Instant::now();
    for step in 0..steps {
        if cursor + bs > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let batch = data.select(&order[cursor..cursor + bs]);
        cursor += bs;
        let mut obj = Counted::new(netkit::MlpObjective::new(model.clone(), batch));
        let diag = runner.step(&mut obj)?;
        evals += obj.evaluations;
        if let Some(rows) = log.as_deref_mut() {
            let (loss, grad) = netkit::gradient(model, runner.params(), &obj.inner.batch)?;
            rows.push(TrainRow {
                step: step + 1,
                loss,
                grad_norm: norm(&grad),
                mean_rho: diag.mean_rho,
                mean_hbar: diag.mean_hbar,
                clamp_lo: diag.clamp_lo,
                clamp_hi: diag.clamp_hi,
                wall_ms: if cfg.log_wall_time { start.elapsed().as_secs_f64() * 1e3 } else { 0.0 },
            });
        }
    }
    let params = ParamVector(runner.params().to_vec());
    let final_loss = netkit::loss(model, &params, data)?;
    Ok((params, final_loss, evals))
}

fn train_least_squares(cfg: &ExperimentConfig, seed: u64, rows: &mut Vec<TrainRow>) -> Result<(f64, u64), HarnessError> {
    let problem = LeastSquares::random(&cfg.data);
    let mut rng = seeded(child_seed(seed, 0));
    let init: Vec<f64> = (0..problem.cols).map(|_| rng.sample(StandardNormal)).collect();
    let mut runner = Runner::new(&cfg.optimizer, init, child_seed(seed, 1))?;
    let mut obj = Counted::new(problem);
    let start = Instant::now();
    let mut grad = vec![0.0; obj.inner.cols];
    for step in 0..cfg.steps {
        let diag = runner.step(&mut obj)?;
        obj.inner.gradient_into(runner.params(), &mut grad)?;
        rows.push(TrainRow {
            step: step + 1,
            loss: obj.inner.loss(runner.params()),
            grad_norm: norm(&grad),
            mean_rho: diag.mean_rho,
            mean_hbar: diag.mean_hbar,
            clamp_lo: diag.clamp_lo,
            clamp_hi: diag.clamp_hi,
            wall_ms: if cfg.log_wall_time { start.elapsed().as_secs_f64() * 1e3 } else { 0.0 },
        });
    }
    Ok((obj.inner.loss(runner.params()), obj.evaluations))
}

/// Partitions for a probe target: per layer for MLPs, one `all` partition otherwise.
fn probe_partitions(cfg: &ExperimentConfig, d: usize) -> Vec<Partition> {
    match (cfg.probe.target, &cfg.model) {
        (ProbeTarget::Mlp, Some(model)) => Partition::per_layer(model),
        _ => Partition::whole(d),
    }
}

/// Measures `v(λ)` and `v(2λ)` with shared Rademacher draws and computes the
/// power-law exponent per partition.
pub fn powerlaw_experiment<O: Objective + ?Sized>(
    obj: &mut O,
    mu: &[f64],
    lambda: f64,
    n_samples: usize,
    partitions: &[Partition],
    seed: u64,
) -> Result<PowerLawReport, HarnessError> {
    let (v1, v2) = glass::measure_variations_paired(obj, mu, lambda, n_samples, seed)?;
    Ok(glass::power_law(&v1, &v2, partitions)?)
}

/// Sample-weighted mean of two variation measurements at the same `λ`.
fn pool(a: GradientVariationMeasurement, b: &GradientVariationMeasurement) -> GradientVariationMeasurement {
    let (na, nb) = (a.n_samples as f64, b.n_samples as f64);
    let w = (na / (na + nb), nb / (na + nb));
    GradientVariationMeasurement {
        lambda: a.lambda,
        v: a.v.iter().zip(&b.v).map(|(x, y)| w.0 * x + w.1 * y).collect(),
        std_error: a.std_error.iter().zip(&b.std_error).map(|(x, y)| ((w.0 * x).powi(2) + (w.1 * y).powi(2)).sqrt()).collect(),
        n_samples: a.n_samples + b.n_samples,
    }
}

/// Builds the configured probe target, warms it up where applicable, and probes it.
pub fn run_probe(cfg: &ExperimentConfig, seed: u64) -> Result<PowerLawReport, HarnessError> {
    let p = &cfg.probe;
    match p.target {
        ProbeTarget::Mlp => {
            let model = cfg.model.as_ref().ok_or_else(|| HarnessError::Config("an mlp probe needs a model".into()))?;
            let data = match model.loss {
                LossKind::SoftmaxCrossEntropy => blob_classification(&cfg.data)?,
                LossKind::MeanSquaredError => teacher_regression(&cfg.data)?,
            };
            let (params, _, _) = train_mlp(cfg, model, &data, seed, p.warmup_steps, None)?;
            let mut rng = seeded(child_seed(seed, 3));
            let nb = p.probe_batches.max(1);
            let per_batch = p.n_samples.div_ceil(nb);
            let mut idx: Vec<usize> = (0..data.len()).collect();
            let mut acc: Option<(GradientVariationMeasurement, GradientVariationMeasurement)> = None;
            for b in 0..nb {
                idx.shuffle(&mut rng);
                let mut obj = netkit::MlpObjective::new(model.clone(), data.select(&idx[..p.probe_batch.min(data.len())]));
                let (v1, v2) = glass::measure_variations_paired(&mut obj, &params, p.lambda, per_batch, child_seed(seed, 4 + b as u64))?;
                acc = Some(match acc {
                    None => (v1, v2),
                    Some((a1, a2)) => (pool(a1, &v1), pool(a2, &v2)),
                });
            }
            let (v1, v2) = acc.expect("at least one batch");
            Ok(glass::power_law(&v1, &v2, &Partition::per_layer(model))?)
        }
        ProbeTarget::Quadratic => {
            let mut rng = seeded(child_seed(seed, 0));
            let h = random_symmetric(p.dim, &mut rng);
            let mu: Vec<f64> = (0..p.dim).map(|_| rng.sample(StandardNormal)).collect();
            let mut q = Quadratic::new(p.dim, h);
            powerlaw_experiment(&mut q, &mu, p.lambda, p.n_samples, &probe_partitions(cfg, p.dim), child_seed(seed, 4))
        }
        ProbeTarget::GlassField => {
            let mut field = GlassField::random(p.dim, p.hyperplanes, p.threshold, child_seed(seed, 0));
            let mu = vec![0.0; p.dim];
            powerlaw_experiment(&mut field, &mu, p.lambda, p.n_samples, &probe_partitions(cfg, p.dim), child_seed(seed, 4))
        }
    }
}

#[derive(Serialize)]
struct NaqRow {
    step: usize,
    error_norm: f64,
    predicted_norm: f64,
    relative_residual: f64,
    model_residual: f64,
}

fn run_naq(cfg: &ExperimentConfig, seed: u64, dir: &Path) -> Result<f64, HarnessError> {
    let d = cfg.probe.dim;
    let beta1 = match &cfg.optimizer {
        OptimizerSpec::Alice(a) => a.beta1,
        OptimizerSpec::Adam { beta1, .. } | OptimizerSpec::Sgdm { beta1, .. } => *beta1,
    };
    let mut rng = seeded(child_seed(seed, 0));
    let h = random_spd(d, &mut rng);
    // Gershgorin bound keeps the damped recursion stable
    let h_mod: Vec<f64> = (0..d).map(|i| h[i * d..(i + 1) * d].iter().map(|v| v.abs()).sum()).collect();
    let g0: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let gamma: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let rep = naq_exactness_check(&h, &g0, &gamma, beta1, &h_mod, cfg.steps as usize, None)?;
    let rows: Vec<NaqRow> = rep
        .steps
        .iter()
        .map(|s| NaqRow {
            step: s.step,
            error_norm: s.error_norm,
            predicted_norm: s.predicted_norm,
            relative_residual: s.relative_residual,
            model_residual: s.model_residual,
        })
        .collect();
    let path = dir.join(format!("naq_seed{seed}.csv"));
    write_csv_with_header(&path, &["step", "error_norm", "predicted_norm", "relative_residual", "model_residual"], &rows)
        .map_err(io_err(&path))?;
    Ok(rep.max_relative_residual())
}

fn run_estimator_suite(cfg: &ExperimentConfig, seed: u64, dir: &Path) -> Result<f64, HarnessError> {
    let m = TestMatrix::random_dominant(cfg.probe.dim.max(2), child_seed(seed, 0))?;
    let n = cfg.probe.n_samples.max(1000);
    let rad = oracles::mc_estimator(&m, Density::Rademacher, EstimatorKernel::Identity, None, n, child_seed(seed, 1))?;
    let nrm = oracles::mc_estimator(
        &m,
        Density::StandardNormal,
        EstimatorKernel::Optimal { restrict: 0.0 },
        None,
        n,
        child_seed(seed, 2),
    )?;
    let res = oracles::mc_estimator(
        &m,
        Density::StandardNormal,
        EstimatorKernel::Optimal { restrict: 1.0 },
        None,
        n,
        child_seed(seed, 3),
    )?;
    let mut rows = Vec::new();
    for (name, r) in [("rademacher", &rad), ("normal", &nrm), ("normal_restricted", &res)] {
        let se = r.variance_se.iter().map(|s| s * s).sum::<f64>().sqrt();
        rows.push(OracleRow::new(
            format!("{name}_total_variance"),
            r.total_variance(),
            r.total_predicted_variance(),
            se,
            r.n_samples as u64,
        ));
        rows.push(OracleRow::new(format!("{name}_fraction_within_3se"), r.fraction_unbiased(3.0), 0.9973, 0.0, r.rows.len() as u64));
    }
    let path = dir.join(format!("estimator_seed{seed}.csv"));
    write_oracle_csv(&path, &rows).map_err(io_err(&path))?;
    Ok(rad.total_variance() / nrm.total_variance())
}

fn run_walk_suite(cfg: &ExperimentConfig, seed: u64, dir: &Path) -> Result<f64, HarnessError> {
    let p = &cfg.probe;
    let sim = SyntheticGlass1D::new(p.rho, p.lambda, p.walk_n, p.trials, seed);
    let rep = oracles::glass_walk_expectation(&sim)?;
    let path = dir.join(format!("walk_seed{seed}.csv"));
    write_oracle_csv(&path, &rep.rows()).map_err(io_err(&path))?;
    Ok(rep.mean_abs / rep.predicted_abs)
}

fn write_train_log(dir: &Path, seed: u64, rows: &[TrainRow]) -> Result<(), HarnessError> {
    let path = dir.join(format!("train_seed{seed}.csv"));
    write_csv_with_header(
        &path,
        &["step", "loss", "grad_norm", "mean_rho", "mean_hbar", "clamp_lo", "clamp_hi", "wall_ms"],
        rows,
    )
    .map_err(io_err(&path))
}

/// Runs one seed and writes its per-seed artifact; returns `(final_metric, grad_evals)`.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64, dir: &Path) -> Result<(f64, u64), HarnessError> {
    match cfg.task {
        Task::SyntheticClassification | Task::SyntheticRegression => {
            let model = cfg.model.as_ref().expect("validated");
            let data = if cfg.task == Task::SyntheticClassification {
                blob_classification(&cfg.data)?
            } else {
                teacher_regression(&cfg.data)?
            };
            let mut rows = Vec::with_capacity(cfg.steps as usize);
            let result = train_mlp(cfg, model, &data, seed, cfg.steps, Some(&mut rows));
            write_train_log(dir, seed, &rows)?;
            let (_, loss, evals) = result?;
            Ok((loss, evals))
        }
        Task::LeastSquares => {
            let mut rows = Vec::with_capacity(cfg.steps as usize);
            let result = train_least_squares(cfg, seed, &mut rows);
            write_train_log(dir, seed, &rows)?;
            result
        }
        Task::PowerlawProbe => {
            let report = run_probe(cfg, seed)?;
            let path = dir.join(format!("powerlaw_seed{seed}.csv"));
            report.write_csv(&path).map_err(io_err(&path))?;
            let p = report.rows.iter().map(|r| r.p.unwrap_or(f64::NAN)).fold(f64::INFINITY, f64::min);
            Ok((p, 0))
        }
        Task::NaqExactness => Ok((run_naq(cfg, seed, dir)?, 0)),
        Task::EstimatorSuite => Ok((run_estimator_suite(cfg, seed, dir)?, 0)),
        Task::GlassWalkSuite => Ok((run_walk_suite(cfg, seed, dir)?, 0)),
    }
}

#[derive(Serialize)]
struct SummaryRow {
    seed: String,
    final_metric: f64,
    grad_evals: u64,
    status: String,
}

/// Runs every seed (in parallel), then writes `summary.csv` and `manifest.toml`.
/// A failing seed is recorded with a NaN metric and its error; the others still run.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<RunSummary, HarnessError> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let manifest = Manifest { code_version: CODE_VERSION.to_string(), config: cfg.clone() };
    let mpath = out.join("manifest.toml");
    fs::write(&mpath, toml::to_string(&manifest).expect("serializable")).map_err(io_err(&mpath))?;

    let per_seed: Vec<SeedResult> = cfg
        .seeds
        .par_iter()
        .map(|&seed| match run_seed(cfg, seed, out) {
            Ok((final_metric, grad_evals)) => SeedResult { seed, final_metric, grad_evals, error: None },
            Err(e) => SeedResult { seed, final_metric: f64::NAN, grad_evals: 0, error: Some(e.to_string()) },
        })
        .collect();
    let metrics: Vec<f64> = per_seed.iter().map(|r| r.final_metric).collect();
    let (min, median, max) = aggregate(&metrics)?;

    let mut rows: Vec<SummaryRow> = per_seed
        .iter()
        .map(|r| SummaryRow {
            seed: r.seed.to_string(),
            final_metric: r.final_metric,
            grad_evals: r.grad_evals,
            status: r.error.clone().unwrap_or_else(|| "ok".into()),
        })
        .collect();
    for (name, v) in [("min", min), ("median", median), ("max", max)] {
        rows.push(SummaryRow { seed: name.into(), final_metric: v, grad_evals: 0, status: "aggregate".into() });
    }
    let spath = out.join("summary.csv");
    write_csv_with_header(&spath, &["seed", "final_metric", "grad_evals", "status"], &rows).map_err(io_err(&spath))?;
    Ok(RunSummary { per_seed, min, median, max })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn least_squares_cfg(optimizer: OptimizerSpec, seeds: Vec<u64>) -> ExperimentConfig {
        ExperimentConfig {
            name: "ls".into(),
            task: Task::LeastSquares,
            model: None,
            optimizer,
            seeds,
            steps: 20,
            batch_size: 8,
            output_dir: None,
            data: DataConfig { n_train: 30, input_dim: 8, ..DataConfig::default() },
            probe: ProbeConfig::default(),
            log_wall_time: false,
        }
    }

    #[test]
    fn aggregate_cases() {
        assert_eq!(aggregate(&[3.0]).unwrap(), (3.0, 3.0, 3.0));
        assert_eq!(aggregate(&[4.0, 1.0, 3.0, 2.0]).unwrap(), (1.0, 2.5, 4.0));
        assert!(aggregate(&[]).is_err());
    }

    proptest! {
        #[test]
        fn aggregate_is_permutation_invariant(mut v in proptest::collection::vec(-1e6f64..1e6, 1..20), k in 0usize..100) {
            let a = aggregate(&v).unwrap();
            let n = v.len();
            v.rotate_left(k % n);
            v.reverse();
            prop_assert_eq!(aggregate(&v).unwrap(), a);
        }
    }

    #[test]
    fn manifest_round_trip() {
        let mut cfg = least_squares_cfg(OptimizerSpec::Alice(AliceConfig::default()), vec![1, 2]);
        cfg.model = Some(ModelSpec::new(vec![8, 4, 2], LossKind::MeanSquaredError));
        let text = cfg.to_toml_string();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        let m = Manifest { code_version: CODE_VERSION.into(), config: cfg.clone() };
        let back: Manifest = toml::from_str(&toml::to_string(&m).unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn config_errors_are_reported() {
        assert!(ExperimentConfig::from_toml_str("name = 'x'\ntask = 'least-squares'\nseeds = []\n").is_err());
        let err = ExperimentConfig::from_toml_str("name = 'x'\ntask = 'least-squares'\nseeds = [1]\nstepz = 3\n").unwrap_err();
        assert!(err.to_string().contains("stepz"), "{err}");
        let err = ExperimentConfig::from_toml_str("name = 'x'\ntask = 'synthetic-classification'\nseeds = [1]\n").unwrap_err();
        assert!(matches!(err, HarnessError::Config(_)));
    }

    #[test]
    fn single_seed_summary() {
        let dir = tempfile::tempdir().unwrap();
        let s = run_experiment(&least_squares_cfg(OptimizerSpec::default(), vec![5]), dir.path()).unwrap();
        assert_eq!(s.min, s.median);
        assert_eq!(s.median, s.max);
        assert!(dir.path().join("train_seed5.csv").exists());
        let summary = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        assert!(summary.starts_with("seed,final_metric,grad_evals,status"));
        assert_eq!(summary.lines().count(), 5);
    }

    #[test]
    fn reruns_are_bit_identical() {
        let cfg = least_squares_cfg(OptimizerSpec::Alice(AliceConfig { quick_steps: 2, ..AliceConfig::default() }), vec![1, 2]);
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        run_experiment(&cfg, a.path()).unwrap();
        run_experiment(&cfg, b.path()).unwrap();
        for f in ["train_seed1.csv", "train_seed2.csv", "summary.csv", "manifest.toml"] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
        }
    }

    #[test]
    fn probe_flags_zero_variation() {
        // a linear objective has constant gradient, so both sums vanish
        let mut constant = |_: &[f64], g: &mut [f64]| {
            g.iter_mut().for_each(|v| *v = 1.0);
            Ok(())
        };
        let rep = powerlaw_experiment(&mut constant, &[0.0; 4], 0.01, 10, &Partition::whole(4), 1).unwrap();
        assert_eq!(rep.rows[0].p, None);
    }

    #[test]
    fn glass_field_is_piecewise_constant() {
        let mut f = GlassField::random(5, 100, 1.0, 3);
        let a = f.gradient(&[0.0; 5]).unwrap();
        let b = f.gradient(&[1e-12; 5]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn classification_trains() {
        let cfg = ExperimentConfig {
            name: "c".into(),
            task: Task::SyntheticClassification,
            model: Some(ModelSpec::new(vec![4, 16, 3], LossKind::SoftmaxCrossEntropy)),
            optimizer: OptimizerSpec::Adam { lr: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8 },
            seeds: vec![0],
            steps: 100,
            batch_size: 32,
            output_dir: None,
            data: DataConfig { n_train: 120, input_dim: 4, n_outputs: 3, noise: 0.5, seed: 1 },
            probe: ProbeConfig::default(),
            log_wall_time: false,
        };
        let dir = tempfile::tempdir().unwrap();
        let s = run_experiment(&cfg, dir.path()).unwrap();
        assert!(s.median < 3f64.ln() * 0.5, "{}", s.median);
    }
}
