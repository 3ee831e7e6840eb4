//! The Alice optimizer.
//!
//! Each full step draws one Rademacher probe `t` and evaluates the gradient at
//! `ν + λt`, `ν − λt` and `ν`, folding the results into running averages of the
//! gradient, the glass density `ρ`, two Hessian-diagonal surrogates and the raw
//! second moment. The step itself is the glass-modified quasi-Newton step
//! `−g / h̄`, clamped by one of three limit families and split between the
//! actual position `μ` (fraction `φ`) and the next evaluation centre `ν`
//! (fraction `ω`).

use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::objective::{EvalError, Objective};
use crate::rng::{fill_rademacher, seeded, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Evaluation {
    Plus,
    Minus,
    Center,
}

impl fmt::Display for Evaluation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Evaluation::Plus => "g(nu + lambda t)",
            Evaluation::Minus => "g(nu - lambda t)",
            Evaluation::Center => "g(nu)",
        })
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum AliceError {
    #[error("invalid optimizer configuration: {0}")]
    Config(String),
    #[error("non-finite gradient from {0}")]
    NonFinite(Evaluation),
    #[error("{which}: {source}")]
    Eval {
        which: Evaluation,
        #[source]
        source: EvalError,
    },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("negative curvature input at index {0}")]
    NegativeCurvature(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LimitMethod {
    /// Bounds are the constants `λ_min`, `λ_max`.
    Fixed,
    /// Bounds scale with `|g|`.
    Sgdm,
    /// Bounds scale with `|ĝ| / (√ŝ + ε)`, bias corrected.
    Adam,
}

/// Which curvature estimates enter the step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct CurvatureTerms {
    pub rho: bool,
    pub h_abs: bool,
    pub h_rms: bool,
}

impl CurvatureTerms {
    pub const RHO: Self = Self { rho: true, h_abs: false, h_rms: false };
    pub const H_ABS: Self = Self { rho: false, h_abs: true, h_rms: false };
    pub const RHO_H_ABS: Self = Self { rho: true, h_abs: true, h_rms: false };
    pub const H_RMS: Self = Self { rho: false, h_abs: false, h_rms: true };
}

impl TryFrom<Vec<String>> for CurvatureTerms {
    type Error = String;
    fn try_from(v: Vec<String>) -> Result<Self, String> {
        let mut t = CurvatureTerms::default();
        for name in v {
            match name.as_str() {
                "rho" => t.rho = true,
                "h_abs" => t.h_abs = true,
                "h_rms" => t.h_rms = true,
                other => return Err(format!("unknown curvature term '{other}' (expected rho, h_abs, h_rms)")),
            }
        }
        Ok(t)
    }
}

impl From<CurvatureTerms> for Vec<String> {
    fn from(t: CurvatureTerms) -> Self {
        let mut v = Vec::new();
        if t.rho {
            v.push("rho".to_string());
        }
        if t.h_abs {
            v.push("h_abs".to_string());
        }
        if t.h_rms {
            v.push("h_rms".to_string());
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AliceConfig {
    /// Probe distance (also the usual learning-rate scale).
    pub lambda: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Fraction of the step applied to the actual position.
    pub phi: f64,
    /// Fraction of the step applied to the next evaluation centre.
    pub omega: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub limit_method: LimitMethod,
    /// Quick steps between consecutive full steps.
    pub quick_steps: u32,
    pub terms: CurvatureTerms,
    /// Use `φ = 1 − β₁`, `ω = 1` regardless of `phi`/`omega`.
    pub naq: bool,
}

impl Default for AliceConfig {
    fn default() -> Self {
        Self {
            lambda: 0.002,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            phi: 0.1,
            omega: 1.0,
            lambda_min: 0.0,
            lambda_max: 0.002,
            limit_method: LimitMethod::Adam,
            quick_steps: 0,
            terms: CurvatureTerms::RHO_H_ABS,
            naq: false,
        }
    }
}

impl AliceConfig {
    /// Settings under which Alice reproduces Adam with learning rate `lr`.
    pub fn adam_pinned(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lambda: lr,
            beta1,
            beta2,
            eps,
            phi: 1.0,
            omega: 1.0,
            lambda_min: lr,
            lambda_max: lr,
            limit_method: LimitMethod::Adam,
            ..Self::default()
        }
    }

    /// Settings under which Alice reproduces SGD with momentum `(1−β₁)`-averaged gradients.
    pub fn sgdm_pinned(lr: f64, beta1: f64) -> Self {
        Self { limit_method: LimitMethod::Sgdm, ..Self::adam_pinned(lr, beta1, 0.999, 1e-8) }
    }

    /// `(φ, ω)` actually used.
    pub fn fractions(&self) -> (f64, f64) {
        if self.naq {
            naq_coefficients(self.beta1)
        } else {
            (self.phi, self.omega)
        }
    }

    pub fn validate(&self) -> Result<(), AliceError> {
        let bad = |m: String| Err(AliceError::Config(m));
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be positive, got {}", self.lambda));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps must be positive, got {}", self.eps));
        }
        if !(self.lambda_min >= 0.0 && self.lambda_max > 0.0 && self.lambda_min <= self.lambda_max) {
            return bad(format!(
                "need 0 <= lambda_min <= lambda_max and lambda_max > 0, got {} and {}",
                self.lambda_min, self.lambda_max
            ));
        }
        let (phi, omega) = self.fractions();
        if !(phi > 0.0 && phi <= omega && omega <= 1.0) {
            return bad(format!("need 0 < phi <= omega <= 1, got phi={phi}, omega={omega}"));
        }
        Ok(())
    }
}

/// Running topography statistics plus the two positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopographyState {
    pub g: Vec<f64>,
    pub rho: Vec<f64>,
    pub h_abs: Vec<f64>,
    pub h_rms2: Vec<f64>,
    pub s: Vec<f64>,
    /// Number of gradient-average updates so far.
    pub step_count: u64,
    /// Actual position.
    pub mu: Vec<f64>,
    /// Next evaluation centre.
    pub nu: Vec<f64>,
}

impl TopographyState {
    pub fn new(mu: Vec<f64>) -> Self {
        let d = mu.len();
        Self {
            g: vec![0.0; d],
            rho: vec![0.0; d],
            h_abs: vec![0.0; d],
            h_rms2: vec![0.0; d],
            s: vec![0.0; d],
            step_count: 0,
            nu: mu.clone(),
            mu,
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// Checks nonnegativity and finiteness of every statistic.
    pub fn is_valid(&self) -> bool {
        let nonneg = |v: &[f64]| v.iter().all(|x| *x >= 0.0 && x.is_finite());
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        nonneg(&self.rho)
            && nonneg(&self.h_abs)
            && nonneg(&self.h_rms2)
            && nonneg(&self.s)
            && finite(&self.g)
            && finite(&self.mu)
            && finite(&self.nu)
            && self.mu.len() == self.nu.len()
    }
}

/// Diagnostics of one applied step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub delta: Vec<f64>,
    /// Glass term `ĥ`.
    pub h_glass: Vec<f64>,
    /// Modified Hessian `h̄`.
    pub h_mod: Vec<f64>,
    /// Share of coordinates raised to the lower bound.
    pub clamp_lo: f64,
    /// Share of coordinates cut to the upper bound.
    pub clamp_hi: f64,
    pub interior: f64,
}

/// Parameter and gradient buffers standing in for the model's own storage.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub theta: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Workspace {
    pub fn new(d: usize) -> Self {
        Self { theta: vec![0.0; d], grad: vec![0.0; d] }
    }
}

fn evaluate<O: Objective + ?Sized>(obj: &mut O, ws: &mut Workspace, which: Evaluation) -> Result<(), AliceError> {
    obj.gradient_into(&ws.theta, &mut ws.grad).map_err(|source| AliceError::Eval { which, source })?;
    if ws.grad.iter().any(|v| !v.is_finite()) {
        return Err(AliceError::NonFinite(which));
    }
    Ok(())
}

/// Full topography update. Allocates exactly one parameter-length temporary.
#[allow(clippy::needless_range_loop)]
pub fn topography_update<O: Objective + ?Sized>(
    state: &mut TopographyState,
    obj: &mut O,
    cfg: &AliceConfig,
    rng: &mut SeededRng,
    ws: &mut Workspace,
) -> Result<(), AliceError> {
    let d = state.dim();
    if ws.theta.len() != d || ws.grad.len() != d {
        return Err(AliceError::Dimension { expected: d, got: ws.theta.len() });
    }
    let (lambda, b1, b2) = (cfg.lambda, cfg.beta1, cfg.beta2);

    let mut t = vec![0.0; d];
    fill_rademacher(rng, &mut t);
    for ((th, nu), ti) in ws.theta.iter_mut().zip(&state.nu).zip(&t) {
        *th = nu + lambda * ti;
    }
    evaluate(obj, ws, Evaluation::Plus)?;

    for ((th, nu), ti) in ws.theta.iter_mut().zip(&state.nu).zip(&t) {
        *th = nu - lambda * ti;
    }
    t.copy_from_slice(&ws.grad);
    evaluate(obj, ws, Evaluation::Minus)?;

    let inv_2l = 1.0 / (2.0 * lambda);
    let inv_4l2 = 1.0 / (4.0 * lambda * lambda);
    for i in 0..d {
        let diff = t[i] - ws.grad[i];
        state.h_abs[i] = b2 * state.h_abs[i] + (1.0 - b2) * inv_2l * diff.abs();
        state.h_rms2[i] = b2 * state.h_rms2[i] + (1.0 - b2) * inv_4l2 * diff * diff;
        t[i] = 0.5 * (t[i] + ws.grad[i]);
    }

    ws.theta.copy_from_slice(&state.nu);
    evaluate(obj, ws, Evaluation::Center)?;

    let glass_scale = 2.0 / lambda;
    for i in 0..d {
        let g0 = ws.grad[i];
        state.g[i] = b1 * state.g[i] + (1.0 - b1) * g0;
        let jump = t[i] - g0;
        state.rho[i] = b2 * state.rho[i] + (1.0 - b2) * glass_scale * jump * jump;
        state.s[i] = b2 * state.s[i] + (1.0 - b2) * g0 * g0;
    }
    state.step_count += 1;
    Ok(())
}

/// Single-evaluation update of `g` and `s`; curvature statistics stay frozen.
pub fn quick_update<O: Objective + ?Sized>(
    state: &mut TopographyState,
    obj: &mut O,
    cfg: &AliceConfig,
    ws: &mut Workspace,
) -> Result<(), AliceError> {
    let d = state.dim();
    if ws.theta.len() != d || ws.grad.len() != d {
        return Err(AliceError::Dimension { expected: d, got: ws.theta.len() });
    }
    ws.theta.copy_from_slice(&state.nu);
    evaluate(obj, ws, Evaluation::Center)?;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    for i in 0..d {
        let g0 = ws.grad[i];
        state.g[i] = b1 * state.g[i] + (1.0 - b1) * g0;
        state.s[i] = b2 * state.s[i] + (1.0 - b2) * g0 * g0;
    }
    state.step_count += 1;
    Ok(())
}

/// `ĥ = 3ρ / (4π|g| + ε)`.
pub fn glass_term(rho: &[f64], g: &[f64], eps: f64) -> Vec<f64> {
    rho.iter().zip(g).map(|(r, gi)| 3.0 * r / (4.0 * PI * gi.abs() + eps)).collect()
}

/// `h̄ = ĥ + h + √(ĥ(ĥ + 2h)) + ε`; both inputs must be nonnegative.
pub fn modified_hessian(h_glass: &[f64], h: &[f64], eps: f64) -> Result<Vec<f64>, AliceError> {
    if h_glass.len() != h.len() {
        return Err(AliceError::Dimension { expected: h_glass.len(), got: h.len() });
    }
    h_glass
        .iter()
        .zip(h)
        .enumerate()
        .map(|(i, (&hg, &hh))| {
            if !(hg >= 0.0 && hh >= 0.0) {
                return Err(AliceError::NegativeCurvature(i));
            }
            Ok(hg + hh + (hg * (hg + 2.0 * hh)).sqrt() + eps)
        })
        .collect()
}

/// Unsigned quasi-Newton step lengths `|g| / h̄`.
pub fn qn_scale(g: &[f64], h_mod: &[f64]) -> Vec<f64> {
    g.iter().zip(h_mod).map(|(gi, h)| gi.abs() / h).collect()
}

/// Per-coordinate `(δ_min, δ_max)` for the configured limit family.
pub fn step_limits(g: &[f64], s: &[f64], cfg: &AliceConfig, step_count: u64) -> (Vec<f64>, Vec<f64>) {
    let (lo, hi) = (cfg.lambda_min, cfg.lambda_max);
    match cfg.limit_method {
        LimitMethod::Fixed => (vec![lo; g.len()], vec![hi; g.len()]),
        LimitMethod::Sgdm => (g.iter().map(|x| lo * x.abs()).collect(), g.iter().map(|x| hi * x.abs()).collect()),
        LimitMethod::Adam => {
            let t = step_count.max(1).min(i32::MAX as u64) as i32;
            let c1 = 1.0 - cfg.beta1.powi(t);
            let c2 = 1.0 - cfg.beta2.powi(t);
            let mut dmin = Vec::with_capacity(g.len());
            let mut dmax = Vec::with_capacity(g.len());
            for (gi, si) in g.iter().zip(s) {
                let g_hat = gi / c1;
                let s_hat = si / c2;
                let denom = s_hat.sqrt() + cfg.eps;
                dmin.push(lo * g_hat.abs() / denom);
                dmax.push(hi * g_hat.abs() / denom);
            }
            (dmin, dmax)
        }
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Curvature pieces `(ĥ, h̄)` for the active terms.
pub fn curvature(state: &TopographyState, cfg: &AliceConfig) -> Result<(Vec<f64>, Vec<f64>), AliceError> {
    let d = state.dim();
    let h_glass = if cfg.terms.rho { glass_term(&state.rho, &state.g, cfg.eps) } else { vec![0.0; d] };
    let h: Vec<f64> = if cfg.terms.h_abs {
        state.h_abs.clone()
    } else if cfg.terms.h_rms {
        state.h_rms2.iter().map(|v| v.sqrt()).collect()
    } else {
        vec![0.0; d]
    };
    let h_mod = modified_hessian(&h_glass, &h, cfg.eps)?;
    Ok((h_glass, h_mod))
}

/// Clamps, signs and applies a step of unsigned lengths `scale`.
pub fn apply_step(
    state: &mut TopographyState,
    scale: &[f64],
    cfg: &AliceConfig,
) -> Result<(Vec<f64>, f64, f64, f64), AliceError> {
    let d = state.dim();
    if scale.len() != d {
        return Err(AliceError::Dimension { expected: d, got: scale.len() });
    }
    let (dmin, dmax) = step_limits(&state.g, &state.s, cfg, state.step_count);
    let (phi, omega) = cfg.fractions();
    let mut delta = vec![0.0; d];
    let (mut n_lo, mut n_hi) = (0usize, 0usize);
    for i in 0..d {
        let x = scale[i];
        let clamped = dmin[i].max(dmax[i].min(x));
        if x > dmax[i] {
            n_hi += 1;
        } else if x < dmin[i] {
            n_lo += 1;
        }
        delta[i] = -sign(state.g[i]) * clamped;
        state.nu[i] = state.mu[i] + omega * delta[i];
        state.mu[i] += phi * delta[i];
    }
    let df = d.max(1) as f64;
    let (lo, hi) = (n_lo as f64 / df, n_hi as f64 / df);
    Ok((delta, lo, hi, 1.0 - lo - hi))
}

/// `(φ, ω) = (1 − β₁, 1)`.
pub fn naq_coefficients(beta1: f64) -> (f64, f64) {
    (1.0 - beta1, 1.0)
}

/// Optimizer instance owning its topography state.
#[derive(Debug, Clone)]
pub struct Alice {
    pub cfg: AliceConfig,
    pub state: TopographyState,
    rng: SeededRng,
    ws: Workspace,
    /// Gradient evaluations requested so far.
    pub evaluations: u64,
    /// Optimizer steps taken so far.
    pub steps: u64,
}

impl Alice {
    pub fn new(cfg: AliceConfig, mu: Vec<f64>, seed: u64) -> Result<Self, AliceError> {
        cfg.validate()?;
        let d = mu.len();
        Ok(Self { cfg, state: TopographyState::new(mu), rng: seeded(seed), ws: Workspace::new(d), evaluations: 0, steps: 0 })
    }

    /// Position `μ`.
    pub fn params(&self) -> &[f64] {
        &self.state.mu
    }

    /// Whether the next step refreshes the curvature statistics.
    pub fn next_is_full(&self) -> bool {
        self.steps.is_multiple_of(self.cfg.quick_steps as u64 + 1)
    }

    /// One optimizer step: a full or quick topography update, then the clamped modified-QN step.
    pub fn step<O: Objective + ?Sized>(&mut self, obj: &mut O) -> Result<StepRecord, AliceError> {
        if self.next_is_full() {
            topography_update(&mut self.state, obj, &self.cfg, &mut self.rng, &mut self.ws)?;
            self.evaluations += 3;
        } else {
            quick_update(&mut self.state, obj, &self.cfg, &mut self.ws)?;
            self.evaluations += 1;
        }
        self.steps += 1;
        let (h_glass, h_mod) = curvature(&self.state, &self.cfg)?;
        let scale = qn_scale(&self.state.g, &h_mod);
        let (delta, clamp_lo, clamp_hi, interior) = apply_step(&mut self.state, &scale, &self.cfg)?;
        Ok(StepRecord { delta, h_glass, h_mod, clamp_lo, clamp_hi, interior })
    }
}

/// One step of the NAQ exactness simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct NaqStep {
    pub step: usize,
    /// `‖g^(s) − g*(μ^(s))‖`.
    pub error_norm: f64,
    /// `β₁ˢ ‖γ₀‖`.
    pub predicted_norm: f64,
    /// `‖(g^(s) − g*(μ^(s))) − β₁ˢ γ₀‖`, relative to `β₁ˢ‖γ₀‖` (or to `‖g*‖` when that is zero).
    pub relative_residual: f64,
    /// Relative mismatch between the model gradient after the actual step and `β₁ g^(s)`.
    pub model_residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NaqReport {
    pub phi: f64,
    pub omega: f64,
    pub steps: Vec<NaqStep>,
    pub diverged: bool,
}

impl NaqReport {
    pub fn max_relative_residual(&self) -> f64 {
        self.steps.iter().map(|s| s.relative_residual).fold(0.0, f64::max)
    }

    pub fn max_model_residual(&self) -> f64 {
        self.steps.iter().map(|s| s.model_residual).fold(0.0, f64::max)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Runs the running-gradient recursion against a hidden linear gradient
/// `g*(x) = g*₀ + H x` (dense row-major `H`) and records how the error in the
/// running gradient evolves. `fractions` overrides `(φ, ω)`; by default the
/// NAQ coefficients are used.
pub fn naq_exactness_check(
    h_hidden: &[f64],
    g_star0: &[f64],
    gamma0: &[f64],
    beta1: f64,
    h_mod: &[f64],
    n_steps: usize,
    fractions: Option<(f64, f64)>,
) -> Result<NaqReport, AliceError> {
    let d = g_star0.len();
    if h_hidden.len() != d * d {
        return Err(AliceError::Dimension { expected: d * d, got: h_hidden.len() });
    }
    for v in [gamma0, h_mod] {
        if v.len() != d {
            return Err(AliceError::Dimension { expected: d, got: v.len() });
        }
    }
    let (phi, omega) = fractions.unwrap_or_else(|| naq_coefficients(beta1));
    let g_star = |x: &[f64]| -> Vec<f64> {
        (0..d).map(|i| g_star0[i] + h_hidden[i * d..(i + 1) * d].iter().zip(x).map(|(h, v)| h * v).sum::<f64>()).collect()
    };
    let gamma_norm = norm(gamma0);
    let mut mu = vec![0.0; d];
    let mut g: Vec<f64> = g_star0.iter().zip(gamma0).map(|(a, b)| a + b).collect();
    let mut steps = Vec::with_capacity(n_steps);
    let mut diverged = false;
    let mut decay = 1.0;
    for s in 1..=n_steps {
        let delta: Vec<f64> = g.iter().zip(h_mod).map(|(gi, h)| -gi / h).collect();
        // model gradient at the new actual position versus β₁ g
        let model_after: Vec<f64> = (0..d).map(|i| g[i] + h_mod[i] * phi * delta[i]).collect();
        let model_gap: Vec<f64> = (0..d).map(|i| model_after[i] - beta1 * g[i]).collect();
        let model_residual = norm(&model_gap) / norm(&g).max(f64::MIN_POSITIVE);

        let nu: Vec<f64> = mu.iter().zip(&delta).map(|(m, dl)| m + omega * dl).collect();
        for (m, dl) in mu.iter_mut().zip(&delta) {
            *m += phi * dl;
        }
        let g_eval = g_star(&nu);
        for (gi, ge) in g.iter_mut().zip(&g_eval) {
            *gi = beta1 * *gi + (1.0 - beta1) * ge;
        }
        decay *= beta1;
        let truth = g_star(&mu);
        let err: Vec<f64> = g.iter().zip(&truth).map(|(a, b)| a - b).collect();
        let gap: Vec<f64> = err.iter().zip(gamma0).map(|(e, g0)| e - decay * g0).collect();
        let predicted_norm = decay * gamma_norm;
        let scale = if predicted_norm > 0.0 { predicted_norm } else { norm(&truth).max(1.0) };
        let rec = NaqStep {
            step: s,
            error_norm: norm(&err),
            predicted_norm,
            relative_residual: norm(&gap) / scale,
            model_residual,
        };
        let finite = rec.error_norm.is_finite() && g.iter().all(|v| v.is_finite());
        steps.push(rec);
        if !finite {
            diverged = true;
            break;
        }
    }
    Ok(NaqReport { phi, omega, steps, diverged })
}

/// Textbook Adam with bias correction; returns every iterate including the start.
pub fn reference_adam<O: Objective + ?Sized>(
    params: &[f64],
    obj: &mut O,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    n_steps: usize,
) -> Result<Vec<Vec<f64>>, EvalError> {
    let d = params.len();
    let mut theta = params.to_vec();
    let (mut m, mut v, mut grad) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    let mut traj = vec![theta.clone()];
    for t in 1..=n_steps {
        obj.gradient_into(&theta, &mut grad)?;
        let c1 = 1.0 - beta1.powi(t as i32);
        let c2 = 1.0 - beta2.powi(t as i32);
        for i in 0..d {
            m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            theta[i] -= lr * m_hat.abs() / (v_hat.sqrt() + eps) * sign(m_hat);
        }
        traj.push(theta.clone());
    }
    Ok(traj)
}

/// SGD with momentum in the averaged form `v ← β v + (1−β) g`, `θ ← θ − lr v`.
pub fn reference_sgdm<O: Objective + ?Sized>(
    params: &[f64],
    obj: &mut O,
    lr: f64,
    beta1: f64,
    n_steps: usize,
) -> Result<Vec<Vec<f64>>, EvalError> {
    let d = params.len();
    let mut theta = params.to_vec();
    let (mut m, mut grad) = (vec![0.0; d], vec![0.0; d]);
    let mut traj = vec![theta.clone()];
    for _ in 0..n_steps {
        obj.gradient_into(&theta, &mut grad)?;
        for i in 0..d {
            m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
            theta[i] -= lr * m[i].abs() * sign(m[i]);
        }
        traj.push(theta.clone());
    }
    Ok(traj)
}
