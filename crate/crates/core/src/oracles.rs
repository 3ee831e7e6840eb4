//! Brute-force and Monte-Carlo reference computations.
//!
//! These rebuild each quantity from its defining construction (random walks,
//! sampled matrix-vector products, explicit minimization) rather than calling
//! the closed forms they are used to check. Sampling fans out over a fixed
//! number of chunks with derived seeds and reduces in chunk order, so results
//! do not depend on the thread count.

use std::f64::consts::PI;
use std::ops::Range;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

use crate::glass::{Density, KernelSpec};
use crate::netkit::{self, Batch, LossKind, ModelSpec, NetError, Targets};
use crate::report::OracleRow;
use crate::rng::{child_seed, fill_rademacher, seeded, SeededRng};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum OracleError {
    #[error("invalid oracle input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Glass(#[from] crate::glass::GlassError),
}

const CHUNKS: usize = 16;

fn chunk_sizes(total: usize) -> Vec<usize> {
    let base = total / CHUNKS;
    let extra = total % CHUNKS;
    (0..CHUNKS).map(|c| base + usize::from(c < extra)).collect()
}

/// Kick distribution for the one-dimensional glass walk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Kick {
    #[default]
    Gaussian,
    Rademacher,
}

/// `n` equally spaced gradient kicks along a walk of length `λ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticGlass1D {
    pub rho: f64,
    pub lambda: f64,
    pub n: usize,
    pub trials: usize,
    pub seed: u64,
    pub kick: Kick,
}

impl SyntheticGlass1D {
    pub fn new(rho: f64, lambda: f64, n: usize, trials: usize, seed: u64) -> Self {
        Self { rho, lambda, n, trials, seed, kick: Kick::Gaussian }
    }

    pub fn validate(&self) -> Result<(), OracleError> {
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return Err(OracleError::Invalid(format!("rho must be finite and nonnegative, got {}", self.rho)));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(OracleError::Invalid(format!("lambda must be positive, got {}", self.lambda)));
        }
        if self.n == 0 || self.trials < 2 {
            return Err(OracleError::Invalid("need n >= 1 and trials >= 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlassWalkReport {
    /// Mean of the reflected loss change `|Δ|`.
    pub mean_abs: f64,
    pub mean_abs_se: f64,
    /// Variance of the unreflected `Δ`.
    pub variance: f64,
    pub variance_se: f64,
    /// `√(2ρλ³/(3π))`.
    pub predicted_abs: f64,
    /// `ρλ³/3`.
    pub predicted_variance: f64,
    pub trials: usize,
}

impl GlassWalkReport {
    pub fn rows(&self) -> Vec<OracleRow> {
        let n = self.trials as u64;
        vec![
            OracleRow::new("mean_abs_delta", self.mean_abs, self.predicted_abs, self.mean_abs_se, n),
            OracleRow::new("variance_delta", self.variance, self.predicted_variance, self.variance_se, n),
        ]
    }
}

/// Simulates `Δ = Σⱼ ((n−j)/n) γⱼ λ` with `E[γ²] = ρλ/n` and reports `E|Δ|`
/// and `Var Δ` next to their infinite-`n` limits.
pub fn glass_walk_expectation(sim: &SyntheticGlass1D) -> Result<GlassWalkReport, OracleError> {
    sim.validate()?;
    let n = sim.n;
    let sigma = (sim.rho * sim.lambda / n as f64).sqrt();
    let weights: Vec<f64> = (1..=n).map(|j| (n - j) as f64 / n as f64 * sim.lambda).collect();
    let sizes = chunk_sizes(sim.trials);
    // per chunk: Σ|Δ|, Σ|Δ|², Σ Δ, Σ Δ², Σ Δ⁴
    let parts: Vec<[f64; 5]> = sizes
        .par_iter()
        .enumerate()
        .map(|(c, &count)| {
            let mut rng = seeded(child_seed(sim.seed, c as u64));
            let mut acc = [0.0; 5];
            for _ in 0..count {
                let mut delta = 0.0;
                for w in &weights {
                    let gamma = match sim.kick {
                        Kick::Gaussian => sigma * rng.sample::<f64, _>(StandardNormal),
                        Kick::Rademacher => {
                            if rng.random::<bool>() {
                                sigma
                            } else {
                                -sigma
                            }
                        }
                    };
                    delta += w * gamma;
                }
                let a = delta.abs();
                let sq = delta * delta;
                acc[0] += a;
                acc[1] += sq;
                acc[2] += delta;
                acc[3] += sq;
                acc[4] += sq * sq;
            }
            acc
        })
        .collect();
    let mut tot = [0.0; 5];
    for p in &parts {
        for k in 0..5 {
            tot[k] += p[k];
        }
    }
    let t = sim.trials as f64;
    let mean_abs = tot[0] / t;
    let abs_var = (tot[1] / t - mean_abs * mean_abs).max(0.0) * t / (t - 1.0);
    let mean = tot[2] / t;
    let m2 = tot[3] / t;
    let variance = (m2 - mean * mean) * t / (t - 1.0);
    let m4 = tot[4] / t;
    let lam3 = sim.lambda.powi(3);
    Ok(GlassWalkReport {
        mean_abs,
        mean_abs_se: (abs_var / t).sqrt(),
        variance,
        variance_se: ((m4 - m2 * m2).max(0.0) / t).sqrt(),
        predicted_abs: (2.0 * sim.rho * lam3 / (3.0 * PI)).sqrt(),
        predicted_variance: sim.rho * lam3 / 3.0,
        trials: sim.trials,
    })
}

/// Dense square matrix with per-row off-diagonal dominance `ω²ᵢ = Σ_{j≠i} M²ᵢⱼ / M²ᵢᵢ`.
#[derive(Debug, Clone, PartialEq)]
pub struct TestMatrix {
    pub dim: usize,
    pub values: Vec<f64>,
    pub dominance: Vec<f64>,
}

impl TestMatrix {
    pub fn new(dim: usize, values: Vec<f64>) -> Result<Self, OracleError> {
        if dim < 2 || values.len() != dim * dim {
            return Err(OracleError::Invalid(format!("need a d x d matrix with d >= 2, got {} values for d={dim}", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(OracleError::Invalid("matrix entries must be finite".into()));
        }
        let dominance = (0..dim)
            .map(|i| {
                let row = &values[i * dim..(i + 1) * dim];
                let off: f64 = row.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, v)| v * v).sum();
                off / (row[i] * row[i])
            })
            .collect();
        Ok(Self { dim, values, dominance })
    }

    /// Random matrix with `|Mᵢᵢ| ∈ [0.5, 2]` and row dominance `ω²ᵢ` uniform in `[0.1, 1]`.
    pub fn random_dominant(dim: usize, seed: u64) -> Result<Self, OracleError> {
        let mut rng = seeded(seed);
        let mut values = vec![0.0; dim * dim];
        for i in 0..dim {
            let diag = rng.random_range(0.5..2.0) * if rng.random::<bool>() { 1.0 } else { -1.0 };
            let omega2: f64 = rng.random_range(0.1..1.0);
            let row = &mut values[i * dim..(i + 1) * dim];
            let mut off = 0.0;
            for (j, v) in row.iter_mut().enumerate() {
                if j != i {
                    *v = rng.sample::<f64, _>(StandardNormal);
                    off += *v * *v;
                }
            }
            let scale = (omega2 * diag * diag / off).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = if j == i { diag } else { *v * scale };
            }
        }
        Self::new(dim, values)
    }

    pub fn diag(&self, i: usize) -> f64 {
        self.values[i * self.dim + i]
    }
}

/// Sample weighting for the diagonal estimator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EstimatorKernel {
    /// `κ(δ) = δ`.
    Identity,
    /// `κ*(δ) = c⁻¹δ/(δ² + ω²)` with the row's own `ω²`, rejecting `|δ| < restrict`.
    Optimal { restrict: f64 },
}

/// Per-row Monte-Carlo statistics of `κ(δᵢ) yᵢ`, `y = Mδ`.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorReport {
    pub rows: Vec<usize>,
    pub diag: Vec<f64>,
    pub bias: Vec<f64>,
    pub bias_se: Vec<f64>,
    /// Variance per accepted sample.
    pub variance: Vec<f64>,
    pub variance_se: Vec<f64>,
    /// Closed-form variance from direct integration of `m²[∫κ²(δ²+ω²)dp − 1]`.
    pub predicted_variance: Vec<f64>,
    /// Accepted samples per row.
    pub accepted: Vec<u64>,
    pub n_samples: usize,
    /// Mean over rows of `(κyᵢ − mᵢ)/|mᵢ|`, with its standard error over samples.
    /// Only defined when every sample is accepted.
    pub pooled_rel_bias: Option<(f64, f64)>,
}

impl EstimatorReport {
    pub fn total_variance(&self) -> f64 {
        self.variance.iter().sum()
    }

    pub fn total_predicted_variance(&self) -> f64 {
        self.predicted_variance.iter().sum()
    }

    /// Fraction of rows whose bias lies within `k` standard errors of zero.
    pub fn fraction_unbiased(&self, k: f64) -> f64 {
        let ok = self.bias.iter().zip(&self.bias_se).filter(|(b, s)| b.abs() <= k * **s).count();
        ok as f64 / self.rows.len().max(1) as f64
    }
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Composite Simpson rule on `[a, b]` with `n` (even) panels.
fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let n = n + n % 2;
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for k in 1..n {
        let w = if k % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + k as f64 * h);
    }
    s * h / 3.0
}

/// `∫ κ²(δ)(δ² + ω²) dp(δ) − 1` over the accepted region, with `p` conditioned on acceptance.
pub fn var_full_factor(density: Density, kappa: impl Fn(f64) -> f64, omega2: f64, restrict: f64) -> f64 {
    match density {
        Density::Rademacher => {
            if restrict > 1.0 {
                return f64::NAN;
            }
            let k = kappa(1.0);
            k * k * (1.0 + omega2) - 1.0
        }
        Density::StandardNormal => {
            let lo = restrict.max(0.0);
            let hi = 12.0;
            let panels = 20_000;
            let num = simpson(|x| { let k = kappa(x); k * k * (x * x + omega2) * normal_pdf(x) }, lo, hi, panels);
            let mass = simpson(normal_pdf, lo, hi, panels);
            num / mass - 1.0
        }
    }
}

/// Per-row Monte-Carlo study of the diagonal estimator on `rows` (all rows when `None`).
pub fn mc_estimator(
    m: &TestMatrix,
    density: Density,
    kernel: EstimatorKernel,
    rows: Option<&[usize]>,
    n_samples: usize,
    seed: u64,
) -> Result<EstimatorReport, OracleError> {
    if n_samples < 1000 {
        return Err(OracleError::Invalid(format!("need at least 1000 samples, got {n_samples}")));
    }
    let d = m.dim;
    let rows: Vec<usize> = rows.map(|r| r.to_vec()).unwrap_or_else(|| (0..d).collect());
    if let Some(&bad) = rows.iter().find(|&&i| i >= d) {
        return Err(OracleError::Invalid(format!("row {bad} out of range for d={d}")));
    }
    let specs: Vec<Option<KernelSpec>> = rows
        .iter()
        .map(|&i| match kernel {
            EstimatorKernel::Identity => Ok(None),
            EstimatorKernel::Optimal { restrict } => KernelSpec::new(density, m.dominance[i], restrict).map(Some),
        })
        .collect::<Result<_, _>>()?;
    let restricted = matches!(kernel, EstimatorKernel::Optimal { restrict } if restrict > 0.0);
    let nr = rows.len();
    let diag: Vec<f64> = rows.iter().map(|&i| m.diag(i)).collect();

    struct Acc {
        count: Vec<u64>,
        s1: Vec<f64>,
        s2: Vec<f64>,
        s4: Vec<f64>,
        pooled: f64,
        pooled2: f64,
    }
    let sizes = chunk_sizes(n_samples);
    let parts: Vec<Acc> = sizes
        .par_iter()
        .enumerate()
        .map(|(c, &count)| {
            let mut rng: SeededRng = seeded(child_seed(seed, c as u64));
            let mut acc = Acc {
                count: vec![0; nr],
                s1: vec![0.0; nr],
                s2: vec![0.0; nr],
                s4: vec![0.0; nr],
                pooled: 0.0,
                pooled2: 0.0,
            };
            let mut delta = vec![0.0; d];
            for _ in 0..count {
                match density {
                    Density::Rademacher => fill_rademacher(&mut rng, &mut delta),
                    Density::StandardNormal => delta.iter_mut().for_each(|x| *x = rng.sample(StandardNormal)),
                }
                let mut q = 0.0;
                for (r, &i) in rows.iter().enumerate() {
                    let w = match &specs[r] {
                        None => delta[i],
                        Some(k) => k.weight(delta[i]),
                    };
                    if restricted && w == 0.0 {
                        continue;
                    }
                    let row = &m.values[i * d..(i + 1) * d];
                    let y: f64 = row.iter().zip(&delta).map(|(a, b)| a * b).sum();
                    let e = w * y - diag[r];
                    acc.count[r] += 1;
                    acc.s1[r] += e;
                    let e2 = e * e;
                    acc.s2[r] += e2;
                    acc.s4[r] += e2 * e2;
                    q += e / diag[r].abs();
                }
                q /= nr as f64;
                acc.pooled += q;
                acc.pooled2 += q * q;
            }
            acc
        })
        .collect();

    let mut count = vec![0u64; nr];
    let (mut s1, mut s2, mut s4) = (vec![0.0; nr], vec![0.0; nr], vec![0.0; nr]);
    let (mut pooled, mut pooled2) = (0.0, 0.0);
    for p in &parts {
        for r in 0..nr {
            count[r] += p.count[r];
            s1[r] += p.s1[r];
            s2[r] += p.s2[r];
            s4[r] += p.s4[r];
        }
        pooled += p.pooled;
        pooled2 += p.pooled2;
    }
    let mut bias = Vec::with_capacity(nr);
    let mut bias_se = Vec::with_capacity(nr);
    let mut variance = Vec::with_capacity(nr);
    let mut variance_se = Vec::with_capacity(nr);
    for r in 0..nr {
        let n = count[r].max(2) as f64;
        let b = s1[r] / n;
        let m2 = s2[r] / n;
        let var = (m2 - b * b) * n / (n - 1.0);
        bias.push(b);
        bias_se.push((var.max(0.0) / n).sqrt());
        variance.push(var);
        variance_se.push(((s4[r] / n - m2 * m2).max(0.0) / n).sqrt());
    }
    let predicted_variance: Vec<f64> = rows
        .iter()
        .enumerate()
        .map(|(r, &i)| {
            let omega2 = m.dominance[i];
            let factor = match (&specs[r], kernel) {
                (None, _) => var_full_factor(density, |x| x, omega2, 0.0),
                (Some(k), EstimatorKernel::Optimal { restrict }) => {
                    let c = k.c;
                    var_full_factor(density, |x| x / (c * (x * x + omega2)), omega2, restrict)
                }
                (Some(_), EstimatorKernel::Identity) => unreachable!(),
            };
            diag[r] * diag[r] * factor
        })
        .collect();
    let pooled_rel_bias = if restricted {
        None
    } else {
        let n = n_samples as f64;
        let mean = pooled / n;
        let var = (pooled2 / n - mean * mean).max(0.0) * n / (n - 1.0);
        Some((mean, (var / n).sqrt()))
    };
    Ok(EstimatorReport {
        rows,
        diag,
        bias,
        bias_se,
        variance,
        variance_se,
        predicted_variance,
        accepted: count,
        n_samples,
        pooled_rel_bias,
    })
}

/// One-hidden-layer MSE network with a single input sample, laid out so the
/// hidden pre-activations can be placed anywhere by choosing biases.
#[derive(Debug, Clone)]
pub struct UniformPreactivationNet {
    pub spec: ModelSpec,
    pub params: Vec<f64>,
    pub batch: Batch,
    /// Index of the first hidden bias in `params`.
    pub bias_offset: usize,
    pub hidden: usize,
    /// Parameters feeding the hidden units (first-layer weights and biases).
    pub first_layer: Range<usize>,
}

impl UniformPreactivationNet {
    pub fn new(input_dim: usize, hidden: usize, seed: u64) -> Result<Self, OracleError> {
        let spec = ModelSpec::new(vec![input_dim, hidden, 1], LossKind::MeanSquaredError);
        let params = netkit::build_model(&spec, seed)?.into_inner();
        let mut rng = seeded(child_seed(seed, 1));
        let x: Vec<f64> = (0..input_dim).map(|_| rng.sample(StandardNormal)).collect();
        let t: f64 = rng.sample(StandardNormal);
        let batch = Batch::new(x, input_dim, Targets::Values(vec![t + 1.0]))?;
        let first_layer = spec.layer_ranges()[0].clone();
        let bias_offset = first_layer.end - hidden;
        Ok(Self { spec, params, batch, bias_offset, hidden, first_layer })
    }

    /// Sets hidden biases so that pre-activations equal `targets`.
    pub fn place_preactivations(&mut self, targets: &[f64]) {
        let m = self.batch.input_dim;
        let x = self.batch.sample(0).to_vec();
        for (k, y) in targets.iter().enumerate() {
            let w = &self.params[k * m..(k + 1) * m];
            let wx: f64 = w.iter().zip(&x).map(|(a, b)| a * b).sum();
            self.params[self.bias_offset + k] = y - wx;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoverageReport {
    /// Mean squared gradient change per coordinate.
    pub empirical: Vec<f64>,
    /// Mean of `R|δ|` per coordinate.
    pub bound: Vec<f64>,
    /// Coordinates with a nonzero bound (reachable by some near-threshold unit).
    pub glass_coords: usize,
    pub within_glass: usize,
    pub within_all: usize,
    /// (sample, unit) pairs violating `|δᵀ∇y| < ψ`.
    pub precondition_violations: u64,
    pub unit_checks: u64,
    pub n_samples: usize,
}

impl CoverageReport {
    pub fn fraction_glass(&self) -> f64 {
        self.within_glass as f64 / self.glass_coords.max(1) as f64
    }

    pub fn fraction_all(&self) -> f64 {
        self.within_all as f64 / self.empirical.len().max(1) as f64
    }

    pub fn precondition_rate(&self) -> f64 {
        self.precondition_violations as f64 / self.unit_checks.max(1) as f64
    }
}

/// Compares sampled gradient variations with `R|δ|` on a network whose hidden
/// pre-activations are redrawn uniformly on `[−ψ, ψ]` for every sample; `δ` is
/// `δ_scale` times a Rademacher vector on `support` (all parameters when `None`)
/// and zero elsewhere.
pub fn mc_variation(
    net: &UniformPreactivationNet,
    psi: f64,
    delta_scale: f64,
    support: Option<Range<usize>>,
    n_samples: usize,
    seed: u64,
) -> Result<CoverageReport, OracleError> {
    if !(psi > 0.0) || !(delta_scale >= 0.0) || n_samples == 0 {
        return Err(OracleError::Invalid("need psi > 0, delta_scale >= 0 and at least one sample".into()));
    }
    let d = net.params.len();
    let support = support.unwrap_or(0..d);
    if support.end > d {
        return Err(OracleError::Invalid(format!("support {support:?} exceeds {d} parameters")));
    }
    let sizes = chunk_sizes(n_samples);
    type Part = (Vec<f64>, Vec<f64>, u64, u64);
    let parts: Vec<Result<Part, OracleError>> = sizes
        .par_iter()
        .enumerate()
        .map(|(c, &count)| {
            let mut rng = seeded(child_seed(seed, c as u64));
            let mut local = net.clone();
            let mut emp = vec![0.0; d];
            let mut bnd = vec![0.0; d];
            let (mut viol, mut checks) = (0u64, 0u64);
            let mut delta = vec![0.0; d];
            let mut g0 = vec![0.0; d];
            let mut g1 = vec![0.0; d];
            let mut theta = vec![0.0; d];
            let mut ys = vec![0.0; local.hidden];
            for _ in 0..count {
                ys.iter_mut().for_each(|y| *y = rng.random_range(-psi..psi));
                local.place_preactivations(&ys);
                delta.iter_mut().for_each(|x| *x = 0.0);
                fill_rademacher(&mut rng, &mut delta[support.clone()]);
                delta.iter_mut().for_each(|x| *x *= delta_scale);
                netkit::gradient_into(&local.spec, &local.params, &local.batch, &mut g0)?;
                for ((t, p), dl) in theta.iter_mut().zip(&local.params).zip(&delta) {
                    *t = p + dl;
                }
                netkit::gradient_into(&local.spec, &theta, &local.batch, &mut g1)?;
                for i in 0..d {
                    let dg = g1[i] - g0[i];
                    emp[i] += dg * dg;
                }
                let records = netkit::relu_introspect(&local.spec, &local.params, &local.batch, psi)?;
                for rec in &records {
                    checks += 1;
                    let proj: f64 = rec.grad_y.iter().zip(&delta).map(|(a, b)| a * b).sum();
                    if proj.abs() >= psi {
                        viol += 1;
                    }
                    let reach: f64 = rec.grad_y.iter().zip(&delta).map(|(a, b)| (a * b).abs()).sum();
                    let scale = rec.dl_dz * rec.dl_dz * reach / (2.0 * psi);
                    for (b, gy) in bnd.iter_mut().zip(&rec.grad_y) {
                        *b += gy * gy * scale;
                    }
                }
            }
            Ok((emp, bnd, viol, checks))
        })
        .collect();
    let mut empirical = vec![0.0; d];
    let mut bound = vec![0.0; d];
    let (mut violations, mut checks) = (0u64, 0u64);
    for p in parts {
        let (e, b, v, c) = p?;
        for i in 0..d {
            empirical[i] += e[i];
            bound[i] += b[i];
        }
        violations += v;
        checks += c;
    }
    let n = n_samples as f64;
    empirical.iter_mut().for_each(|x| *x /= n);
    bound.iter_mut().for_each(|x| *x /= n);
    let glass_coords = bound.iter().filter(|b| **b > 0.0).count();
    let within_glass = empirical.iter().zip(&bound).filter(|(e, b)| **b > 0.0 && e <= b).count();
    let within_all = empirical.iter().zip(&bound).filter(|(e, b)| e <= b).count();
    Ok(CoverageReport {
        empirical,
        bound,
        glass_coords,
        within_glass,
        within_all,
        precondition_violations: violations,
        unit_checks: checks,
        n_samples,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeastSquaresReport {
    pub loss_initial: f64,
    pub loss_full_step: f64,
    pub loss_damped_step: f64,
    pub norm_full_step: f64,
    pub norm_min_solution: f64,
}

impl LeastSquaresReport {
    pub fn rows(&self) -> Vec<OracleRow> {
        vec![
            OracleRow::new("loss_initial", self.loss_initial, f64::NAN, 0.0, 1),
            OracleRow::new("loss_full_step", self.loss_full_step, f64::NAN, 0.0, 1),
            OracleRow::new("loss_damped_step", self.loss_damped_step, f64::NAN, 0.0, 1),
            OracleRow::new("norm_full_step", self.norm_full_step, f64::NAN, 0.0, 1),
            OracleRow::new("norm_min_solution", self.norm_min_solution, f64::NAN, 0.0, 1),
        ]
    }
}

/// Solves a small dense system by Gaussian elimination with partial pivoting.
fn solve_dense(mut a: Vec<f64>, mut b: Vec<f64>, n: usize) -> Option<Vec<f64>> {
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))?;
        if a[piv * n + col] == 0.0 {
            return None;
        }
        if piv != col {
            for k in 0..n {
                a.swap(piv * n + k, col * n + k);
            }
            b.swap(piv, col);
        }
        for r in col + 1..n {
            let f = a[r * n + col] / a[col * n + col];
            for k in col..n {
                a[r * n + k] -= f * a[col * n + k];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| a[r * n + k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r * n + r];
    }
    Some(x)
}

/// Diagonal quasi-Newton steps from zero on `½‖Ax − b‖²`.
pub fn least_squares_scenario(a: &[f64], b: &[f64], rows: usize, cols: usize) -> Result<LeastSquaresReport, OracleError> {
    if a.len() != rows * cols || b.len() != rows {
        return Err(OracleError::Invalid("matrix or right-hand side has the wrong size".into()));
    }
    let loss = |x: &[f64]| -> f64 {
        (0..rows)
            .map(|r| {
                let ax: f64 = a[r * cols..(r + 1) * cols].iter().zip(x).map(|(p, q)| p * q).sum();
                0.5 * (ax - b[r]) * (ax - b[r])
            })
            .sum()
    };
    // g(0) = −Aᵀb, h = diag(AᵀA)
    let mut x_full = vec![0.0; cols];
    for (j, x) in x_full.iter_mut().enumerate() {
        let atb: f64 = (0..rows).map(|r| a[r * cols + j] * b[r]).sum();
        let h: f64 = (0..rows).map(|r| a[r * cols + j] * a[r * cols + j]).sum();
        *x = if h > 0.0 { atb / h } else { 0.0 };
    }
    let x_damped: Vec<f64> = x_full.iter().map(|x| 0.1 * x).collect();
    let mut aat = vec![0.0; rows * rows];
    for r in 0..rows {
        for s in 0..rows {
            aat[r * rows + s] = (0..cols).map(|j| a[r * cols + j] * a[s * cols + j]).sum();
        }
    }
    let norm_min_solution = match solve_dense(aat, b.to_vec(), rows) {
        Some(z) => {
            let x: Vec<f64> = (0..cols).map(|j| (0..rows).map(|r| a[r * cols + j] * z[r]).sum()).collect();
            x.iter().map(|v| v * v).sum::<f64>().sqrt()
        }
        None => f64::NAN,
    };
    Ok(LeastSquaresReport {
        loss_initial: loss(&vec![0.0; cols]),
        loss_full_step: loss(&x_full),
        loss_damped_step: loss(&x_damped),
        norm_full_step: x_full.iter().map(|v| v * v).sum::<f64>().sqrt(),
        norm_min_solution,
    })
}

/// Random `10 × 100` instance with standard normal `A` and `b`.
pub fn underdetermined_ls(seed: u64) -> Result<LeastSquaresReport, OracleError> {
    let (rows, cols) = (10, 100);
    let mut rng = seeded(seed);
    let a: Vec<f64> = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    let b: Vec<f64> = (0..rows).map(|_| rng.sample(StandardNormal)).collect();
    least_squares_scenario(&a, &b, rows, cols)
}

/// `vᵢ(λ) = λ² Σⱼ H²ᵢⱼ`, exact for Rademacher probes of a quadratic.
pub fn quadratic_powerlaw_oracle(h: &[f64], dim: usize, lambda: f64) -> Result<Vec<f64>, OracleError> {
    if h.len() != dim * dim {
        return Err(OracleError::Invalid(format!("expected {} entries, got {}", dim * dim, h.len())));
    }
    Ok((0..dim).map(|i| lambda * lambda * h[i * dim..(i + 1) * dim].iter().map(|v| v * v).sum::<f64>()).collect())
}

/// Per-coordinate upper model of the loss change for a step `δ`:
/// `gδ + ½hδ² + √(2ρ/(3π)) |δ|^{3/2}`.
pub fn step_objective(g: f64, h: f64, rho: f64, delta: f64) -> f64 {
    g * delta + 0.5 * h * delta * delta + (2.0 * rho / (3.0 * PI)).sqrt() * delta.abs().powf(1.5)
}

/// Golden-section minimizer of a unimodal function on `[a, b]`.
pub fn golden_section_min(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a).abs() > tol * (a.abs() + b.abs()).max(f64::MIN_POSITIVE) {
        if fc < fd {
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
    }
    0.5 * (a + b)
}

/// Minimizer of [`step_objective`] found by direct search along the descent direction.
pub fn brute_force_step(g: f64, h: f64, rho: f64) -> f64 {
    if g == 0.0 {
        return 0.0;
    }
    let glass = 3.0 * rho / (4.0 * PI * g.abs());
    let curv = h.max(2.0 * glass);
    let upper = 2.0 * g.abs() / curv;
    let s = -g.signum();
    let x = golden_section_min(|x| step_objective(g, h, rho, s * x), 0.0, upper, 1e-13);
    s * x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glass_walk_zero_density() {
        let r = glass_walk_expectation(&SyntheticGlass1D::new(0.0, 1.0, 50, 100, 1)).unwrap();
        assert_eq!(r.mean_abs, 0.0);
        assert!(glass_walk_expectation(&SyntheticGlass1D::new(-1.0, 1.0, 50, 100, 1)).is_err());
    }

    #[test]
    fn glass_walk_kicks_agree() {
        let mut sim = SyntheticGlass1D::new(2.0, 0.5, 200, 20_000, 3);
        let g = glass_walk_expectation(&sim).unwrap();
        sim.kick = Kick::Rademacher;
        let r = glass_walk_expectation(&sim).unwrap();
        assert!((g.mean_abs / g.predicted_abs - 1.0).abs() < 0.03);
        assert!((r.mean_abs / r.predicted_abs - 1.0).abs() < 0.03);
    }

    #[test]
    fn glass_walk_is_deterministic() {
        let sim = SyntheticGlass1D::new(1.0, 1.0, 100, 1000, 7);
        assert_eq!(glass_walk_expectation(&sim).unwrap(), glass_walk_expectation(&sim).unwrap());
    }

    #[test]
    fn standard_error_halves_with_four_times_trials() {
        let a = glass_walk_expectation(&SyntheticGlass1D::new(1.0, 1.0, 50, 4000, 1)).unwrap();
        let b = glass_walk_expectation(&SyntheticGlass1D::new(1.0, 1.0, 50, 16000, 1)).unwrap();
        let ratio = a.mean_abs_se / b.mean_abs_se;
        assert!((ratio / 2.0 - 1.0).abs() < 0.2, "{ratio}");
    }

    #[test]
    fn diagonal_matrix_is_recovered_exactly() {
        let d = 5;
        let mut v = vec![0.0; d * d];
        for i in 0..d {
            v[i * d + i] = (i + 1) as f64;
        }
        let m = TestMatrix::new(d, v).unwrap();
        let r = mc_estimator(&m, Density::Rademacher, EstimatorKernel::Identity, None, 1000, 2).unwrap();
        assert!(r.bias.iter().all(|b| *b == 0.0));
        assert!(r.variance.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn identity_kernel_variance_closed_forms() {
        assert!((var_full_factor(Density::Rademacher, |x| x, 0.5, 0.0) - 0.5).abs() < 1e-15);
        assert!((var_full_factor(Density::StandardNormal, |x| x, 0.5, 0.0) - 2.5).abs() < 1e-9);
    }

    #[test]
    fn least_squares_zero_rhs() {
        let a = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let r = least_squares_scenario(&a, &[0.0, 0.0], 2, 3).unwrap();
        assert_eq!(r.loss_initial, 0.0);
        assert_eq!(r.norm_full_step, 0.0);
        assert_eq!(r.loss_full_step, 0.0);
    }

    #[test]
    fn min_norm_solution_solves_system() {
        let a = vec![1.0, 0.0, 1.0, 0.0, 1.0, 1.0];
        let r = least_squares_scenario(&a, &[2.0, 2.0], 2, 3).unwrap();
        // x = Aᵀ(AAᵀ)⁻¹b = (2/3)(1, 1, 2)
        assert!((r.norm_min_solution - (2.0 / 3.0) * 6f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn quadratic_oracle_cases() {
        let eye = vec![1.0, 0.0, 0.0, 1.0];
        assert_eq!(quadratic_powerlaw_oracle(&eye, 2, 0.1).unwrap(), vec![0.1 * 0.1; 2]);
        assert_eq!(quadratic_powerlaw_oracle(&[0.0; 4], 2, 0.1).unwrap(), vec![0.0; 2]);
    }

    #[test]
    fn golden_section_finds_parabola_minimum() {
        let x = golden_section_min(|x| (x - 0.3) * (x - 0.3), 0.0, 1.0, 1e-12);
        assert!((x - 0.3).abs() < 1e-7);
        // pure quadratic model: −g/h
        assert!((brute_force_step(2.0, 4.0, 0.0) + 0.5).abs() < 1e-7);
    }

    #[test]
    fn variation_coverage_zero_step() {
        let net = UniformPreactivationNet::new(4, 8, 1).unwrap();
        let r = mc_variation(&net, 1.0, 0.0, None, 50, 2).unwrap();
        assert!(r.empirical.iter().all(|v| *v == 0.0));
        assert_eq!(r.within_all, r.empirical.len());
    }

    #[test]
    fn preactivations_are_placed() {
        let mut net = UniformPreactivationNet::new(3, 5, 4).unwrap();
        let ys = [0.1, -0.2, 0.3, -0.4, 0.05];
        net.place_preactivations(&ys);
        let pre = netkit::hidden_preactivations(&net.spec, &net.params, &net.batch).unwrap();
        for (a, b) in pre[0].iter().zip(ys) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
