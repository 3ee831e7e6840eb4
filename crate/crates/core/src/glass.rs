//! Gradient glass: density of gradient variations induced by ReLU flips, the
//! expected-loss bound it implies, optimal kernels for diagonal estimation from
//! matrix-vector samples, and the gradient-variation power-law probe.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use thiserror::Error;

use crate::netkit::{ModelSpec, ReluUnitRecord};
use crate::objective::{EvalError, Objective};
use crate::report::write_csv_with_header;
use crate::rng::{fill_rademacher, seeded};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum GlassError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("unsupported density '{0}' (expected rademacher or standard-normal)")]
    UnknownDensity(String),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Dense `d x d` glass density matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GlassDensityMatrix {
    pub dim: usize,
    pub values: Vec<f64>,
    pub psi: f64,
}

impl GlassDensityMatrix {
    pub fn zeros(dim: usize, psi: f64) -> Self {
        Self { dim, values: vec![0.0; dim * dim], psi }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.dim + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }
}

/// Diagonal of the glass density, `ρ`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GlassDensityDiag(pub Vec<f64>);

/// `R_ij = (1/2ψ) Σ_k γ̂_i² (dL/dz)² |γ̂_j|` over the supplied records.
pub fn density_matrix(records: &[ReluUnitRecord], dim: usize, psi: f64) -> Result<GlassDensityMatrix, GlassError> {
    if !(psi > 0.0) {
        return Err(GlassError::Invalid(format!("psi must be positive, got {psi}")));
    }
    let mut r = GlassDensityMatrix::zeros(dim, psi);
    let scale = 1.0 / (2.0 * psi);
    let mut abs = vec![0.0; dim];
    for rec in records {
        if rec.grad_y.len() != dim {
            return Err(GlassError::Dimension { expected: dim, got: rec.grad_y.len() });
        }
        let w = rec.dl_dz * rec.dl_dz * scale;
        for (a, g) in abs.iter_mut().zip(&rec.grad_y) {
            *a = g.abs();
        }
        for (i, gi) in rec.grad_y.iter().enumerate() {
            if *gi == 0.0 {
                continue;
            }
            let wi = w * gi * gi;
            let row = &mut r.values[i * dim..(i + 1) * dim];
            for (rv, a) in row.iter_mut().zip(&abs) {
                *rv += wi * a;
            }
        }
    }
    Ok(r)
}

pub fn density_diag(r: &GlassDensityMatrix) -> GlassDensityDiag {
    GlassDensityDiag((0..r.dim).map(|i| r.get(i, i)).collect())
}

/// Upper bound `R |δ|` on gradient variations.
pub fn variation_bound(r: &GlassDensityMatrix, delta: &[f64]) -> Result<Vec<f64>, GlassError> {
    if delta.len() != r.dim {
        return Err(GlassError::Dimension { expected: r.dim, got: delta.len() });
    }
    Ok((0..r.dim)
        .map(|i| r.row(i).iter().zip(delta).map(|(a, d)| a * d.abs()).sum())
        .collect())
}

/// Expected loss-increase bound for a displacement.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBound {
    /// `√((2/3π) ρ_i |δ_i|³)` per coordinate.
    pub per_coordinate: Vec<f64>,
    /// Sum of the per-coordinate terms; the form minimized coordinatewise by the modified Hessian.
    pub total: f64,
    /// `√((2/3π) Σ ρ_i |δ_i|³)`, the bound for the summed Gaussian walk.
    pub aggregate: f64,
}

pub fn loss_increase_bound(rho: &GlassDensityDiag, delta: &[f64]) -> Result<LossBound, GlassError> {
    if delta.len() != rho.0.len() {
        return Err(GlassError::Dimension { expected: rho.0.len(), got: delta.len() });
    }
    if let Some(bad) = rho.0.iter().find(|r| !(**r >= 0.0)) {
        return Err(GlassError::Invalid(format!("glass density must be nonnegative, got {bad}")));
    }
    let k = 2.0 / (3.0 * PI);
    let cubes: Vec<f64> = rho.0.iter().zip(delta).map(|(r, d)| r * d.abs().powi(3)).collect();
    let per_coordinate: Vec<f64> = cubes.iter().map(|c| (k * c).sqrt()).collect();
    Ok(LossBound {
        total: per_coordinate.iter().sum(),
        aggregate: (k * cubes.iter().sum::<f64>()).sqrt(),
        per_coordinate,
    })
}

/// Perturbation density with zero mean and unit variance per coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Density {
    Rademacher,
    StandardNormal,
}

impl FromStr for Density {
    type Err = GlassError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rademacher" => Ok(Density::Rademacher),
            "standard-normal" | "normal" => Ok(Density::StandardNormal),
            other => Err(GlassError::UnknownDensity(other.to_string())),
        }
    }
}

impl fmt::Display for Density {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Density::Rademacher => "rademacher",
            Density::StandardNormal => "standard-normal",
        })
    }
}

/// Optimal zero-bias kernel for one diagonal coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSpec {
    pub density: Density,
    /// Off-diagonal scale `ω²` of the row being estimated.
    pub omega2: f64,
    /// Samples with `|δ_i|` below this are rejected (0 = unrestricted).
    pub restrict: f64,
    /// Normalization constant `c`.
    pub c: f64,
}

impl KernelSpec {
    pub fn new(density: Density, omega2: f64, restrict: f64) -> Result<Self, GlassError> {
        let c = kernel_constant(density, omega2, restrict)?;
        Ok(Self { density, omega2, restrict, c })
    }

    pub fn unrestricted(density: Density, omega2: f64) -> Result<Self, GlassError> {
        Self::new(density, omega2, 0.0)
    }

    /// Kernel value `κ*(δ)` at one sample coordinate.
    pub fn weight(&self, delta: f64) -> f64 {
        optimal_kernel_weight(delta, self)
    }
}

/// `κ*(δ) = c⁻¹ δ / (δ² + ω²)`, zero for rejected (restricted) samples and at `δ = 0`.
pub fn optimal_kernel_weight(delta: f64, k: &KernelSpec) -> f64 {
    if delta.abs() < k.restrict || delta == 0.0 {
        return 0.0;
    }
    delta / (k.c * (delta * delta + k.omega2))
}

/// Probability that a sample coordinate passes the restriction `|δ| ≥ restrict`.
pub fn update_probability(density: Density, restrict: f64) -> f64 {
    if restrict <= 0.0 {
        return 1.0;
    }
    match density {
        Density::Rademacher => {
            if restrict <= 1.0 {
                1.0
            } else {
                0.0
            }
        }
        Density::StandardNormal => erfc(restrict / std::f64::consts::SQRT_2),
    }
}

const NORMAL_SUPPORT: f64 = 8.0;
const QUAD_REL_TOL: f64 = 1e-8;

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// `c = ∫ δ²/(δ²+ω²) dp(δ)` under the (possibly restricted and renormalized) density.
pub fn kernel_constant(density: Density, omega2: f64, restrict: f64) -> Result<f64, GlassError> {
    if !(omega2 >= 0.0) || !omega2.is_finite() {
        return Err(GlassError::Invalid(format!("omega^2 must be finite and nonnegative, got {omega2}")));
    }
    if !(restrict >= 0.0) {
        return Err(GlassError::Invalid(format!("restriction must be nonnegative, got {restrict}")));
    }
    if update_probability(density, restrict) <= 0.0 {
        return Err(GlassError::Invalid(format!("restriction {restrict} rejects every {density} sample")));
    }
    if omega2 == 0.0 {
        return Ok(1.0);
    }
    match density {
        Density::Rademacher => Ok(1.0 / (1.0 + omega2)),
        Density::StandardNormal => {
            let lo = restrict.min(NORMAL_SUPPORT);
            let num = integrate(|x| x * x / (x * x + omega2) * std_normal_pdf(x), lo, NORMAL_SUPPORT, QUAD_REL_TOL);
            let mass = integrate(std_normal_pdf, lo, NORMAL_SUPPORT, QUAD_REL_TOL);
            Ok(num / mass)
        }
    }
}

/// Adaptive Simpson quadrature with relative tolerance.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, rel_tol: f64) -> f64 {
    fn simpson<F: Fn(f64) -> f64>(f: &F, a: f64, fa: f64, b: f64, fb: f64) -> (f64, f64, f64) {
        let m = 0.5 * (a + b);
        let fm = f(m);
        (m, fm, (b - a) / 6.0 * (fa + 4.0 * fm + fb))
    }
    #[allow(clippy::too_many_arguments)]
    fn recurse<F: Fn(f64) -> f64>(
        f: &F,
        a: f64,
        fa: f64,
        b: f64,
        fb: f64,
        m: f64,
        fm: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let (lm, flm, left) = simpson(f, a, fa, m, fm);
        let (rm, frm, right) = simpson(f, m, fm, b, fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        recurse(f, a, fa, m, fm, lm, flm, left, tol / 2.0, depth - 1)
            + recurse(f, m, fm, b, fb, rm, frm, right, tol / 2.0, depth - 1)
    }
    if a == b {
        return 0.0;
    }
    let (fa, fb) = (f(a), f(b));
    let (m, fm, whole) = simpson(&f, a, fa, b, fb);
    // coarse pass to set an absolute tolerance from the integral's size
    let coarse = recurse(&f, a, fa, b, fb, m, fm, whole, whole.abs().max(1e-300) * 1e-3, 12);
    let tol = coarse.abs().max(1e-300) * rel_tol;
    recurse(&f, a, fa, b, fb, m, fm, whole, tol, 50)
}

/// Closed-form variance of the optimal single-sample diagonal estimator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimatorVariance {
    /// `m_i² (c⁻¹ − 1)` per accepted sample.
    pub single_sample: f64,
    pub update_probability: f64,
    /// Per drawn sample, accounting for rejected ones.
    pub effective: f64,
}

pub fn estimator_variance(k: &KernelSpec, m_i: f64) -> EstimatorVariance {
    let single_sample = m_i * m_i * (1.0 / k.c - 1.0);
    let p = update_probability(k.density, k.restrict);
    EstimatorVariance { single_sample, update_probability: p, effective: single_sample / p }
}

/// Second moments of gradient changes under Rademacher perturbations of size `λ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientVariationMeasurement {
    pub lambda: f64,
    pub v: Vec<f64>,
    /// Standard error of each `v_i`.
    pub std_error: Vec<f64>,
    pub n_samples: usize,
}

impl GradientVariationMeasurement {
    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        #[derive(Serialize)]
        struct Row {
            index: usize,
            v: f64,
        }
        let rows: Vec<Row> = self.v.iter().enumerate().map(|(index, &v)| Row { index, v }).collect();
        write_csv_with_header(path, &["index", "v"], &rows)
    }
}

struct MomentAccumulator {
    sum: Vec<f64>,
    sumsq: Vec<f64>,
}

impl MomentAccumulator {
    fn new(d: usize) -> Self {
        Self { sum: vec![0.0; d], sumsq: vec![0.0; d] }
    }

    fn push_squared_difference(&mut self, a: &[f64], b: &[f64]) {
        for ((s, q), (x, y)) in self.sum.iter_mut().zip(self.sumsq.iter_mut()).zip(a.iter().zip(b)) {
            let g2 = (x - y) * (x - y);
            *s += g2;
            *q += g2 * g2;
        }
    }

    fn finish(self, lambda: f64, n: usize) -> GradientVariationMeasurement {
        let nf = n as f64;
        let v: Vec<f64> = self.sum.iter().map(|s| s / nf).collect();
        let std_error = if n > 1 {
            v.iter()
                .zip(&self.sumsq)
                .map(|(m, q)| ((q / nf - m * m).max(0.0) * nf / (nf - 1.0) / nf).sqrt())
                .collect()
        } else {
            vec![f64::NAN; v.len()]
        };
        GradientVariationMeasurement { lambda, v, std_error, n_samples: n }
    }
}

fn check_probe(lambda: f64, n_samples: usize) -> Result<(), GlassError> {
    if !(lambda > 0.0) {
        return Err(GlassError::Invalid(format!("probe distance must be positive, got {lambda}")));
    }
    if n_samples == 0 {
        return Err(GlassError::Invalid("need at least one sample".into()));
    }
    Ok(())
}

/// `v(λ) = E[(g(μ + λδ) − g(μ))²]` with Rademacher `δ`, averaged over `n_samples` draws.
pub fn measure_variations<O: Objective + ?Sized>(
    obj: &mut O,
    mu: &[f64],
    lambda: f64,
    n_samples: usize,
    seed: u64,
) -> Result<GradientVariationMeasurement, GlassError> {
    check_probe(lambda, n_samples)?;
    let d = mu.len();
    let mut g0 = vec![0.0; d];
    obj.gradient_into(mu, &mut g0)?;
    let mut rng = seeded(seed);
    let mut delta = vec![0.0; d];
    let mut theta = vec![0.0; d];
    let mut g = vec![0.0; d];
    let mut acc = MomentAccumulator::new(d);
    for _ in 0..n_samples {
        fill_rademacher(&mut rng, &mut delta);
        for ((t, m), s) in theta.iter_mut().zip(mu).zip(&delta) {
            *t = m + lambda * s;
        }
        obj.gradient_into(&theta, &mut g)?;
        acc.push_squared_difference(&g, &g0);
    }
    Ok(acc.finish(lambda, n_samples))
}

/// `v(λ)` and `v(2λ)` from the same Rademacher draws.
pub fn measure_variations_paired<O: Objective + ?Sized>(
    obj: &mut O,
    mu: &[f64],
    lambda: f64,
    n_samples: usize,
    seed: u64,
) -> Result<(GradientVariationMeasurement, GradientVariationMeasurement), GlassError> {
    check_probe(lambda, n_samples)?;
    let d = mu.len();
    let mut g0 = vec![0.0; d];
    obj.gradient_into(mu, &mut g0)?;
    let mut rng = seeded(seed);
    let mut delta = vec![0.0; d];
    let mut theta = vec![0.0; d];
    let mut g = vec![0.0; d];
    let mut acc1 = MomentAccumulator::new(d);
    let mut acc2 = MomentAccumulator::new(d);
    for _ in 0..n_samples {
        fill_rademacher(&mut rng, &mut delta);
        for (scale, acc) in [(lambda, &mut acc1), (2.0 * lambda, &mut acc2)] {
            for ((t, m), s) in theta.iter_mut().zip(mu).zip(&delta) {
                *t = m + scale * s;
            }
            obj.gradient_into(&theta, &mut g)?;
            acc.push_squared_difference(&g, &g0);
        }
    }
    Ok((acc1.finish(lambda, n_samples), acc2.finish(2.0 * lambda, n_samples)))
}

/// Named subset of parameter indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub name: String,
    pub indices: Vec<usize>,
}

impl Partition {
    pub fn new(name: impl Into<String>, indices: Vec<usize>) -> Self {
        Self { name: name.into(), indices }
    }

    /// One partition per affine layer; the last one is named `output`.
    pub fn per_layer(spec: &ModelSpec) -> Vec<Partition> {
        let ranges = spec.layer_ranges();
        let last = ranges.len() - 1;
        ranges
            .into_iter()
            .enumerate()
            .map(|(l, r)| {
                let name = if l == last { "output".to_string() } else { format!("layer{}", l + 1) };
                Partition::new(name, r.collect())
            })
            .collect()
    }

    pub fn whole(d: usize) -> Vec<Partition> {
        vec![Partition::new("all", (0..d).collect())]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerLawRow {
    pub partition: String,
    pub sum_v_lambda: f64,
    pub sum_v_2lambda: f64,
    /// `None` when either sum is zero (exponent undefined).
    pub p: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerLawReport {
    pub lambda: f64,
    pub rows: Vec<PowerLawRow>,
}

impl PowerLawReport {
    pub fn get(&self, name: &str) -> Option<&PowerLawRow> {
        self.rows.iter().find(|r| r.partition == name)
    }

    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        write_csv_with_header(path, &["partition", "sum_v_l", "sum_v_2l", "p"], &self.rows)
    }
}

/// `p(P) = log₂ Σ_P v(2λ) − log₂ Σ_P v(λ)` for every partition.
pub fn power_law(
    at_lambda: &GradientVariationMeasurement,
    at_2lambda: &GradientVariationMeasurement,
    partitions: &[Partition],
) -> Result<PowerLawReport, GlassError> {
    let d = at_lambda.v.len();
    if at_2lambda.v.len() != d {
        return Err(GlassError::Dimension { expected: d, got: at_2lambda.v.len() });
    }
    let mut seen = vec![false; d];
    for part in partitions {
        for &i in &part.indices {
            if i >= d {
                return Err(GlassError::Invalid(format!("partition '{}' index {i} out of range", part.name)));
            }
            if seen[i] {
                return Err(GlassError::Invalid(format!("index {i} appears in more than one partition")));
            }
            seen[i] = true;
        }
    }
    let rows = partitions
        .iter()
        .map(|part| {
            let s1: f64 = part.indices.iter().map(|&i| at_lambda.v[i]).sum();
            let s2: f64 = part.indices.iter().map(|&i| at_2lambda.v[i]).sum();
            let p = (s1 > 0.0 && s2 > 0.0 && s1.is_finite() && s2.is_finite()).then(|| s2.log2() - s1.log2());
            PowerLawRow { partition: part.name.clone(), sum_v_lambda: s1, sum_v_2lambda: s2, p }
        })
        .collect();
    Ok(PowerLawReport { lambda: at_lambda.lambda, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::Quadratic;
    use proptest::prelude::*;
    use rand::Rng;

    fn record(grad_y: Vec<f64>, dl_dz: f64) -> ReluUnitRecord {
        ReluUnitRecord { layer: 0, neuron: 0, sample: 0, y: 0.0, dl_dz, grad_y }
    }

    fn naive_r(records: &[ReluUnitRecord], d: usize, psi: f64) -> Vec<f64> {
        let mut out = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                let mut s = 0.0;
                for r in records.iter().rev() {
                    s += r.grad_y[i].powi(2) * r.dl_dz.powi(2) * r.grad_y[j].abs() / (2.0 * psi);
                }
                out[i * d + j] = s;
            }
        }
        out
    }

    fn random_records(n: usize, d: usize, seed: u64) -> Vec<ReluUnitRecord> {
        let mut rng = seeded(seed);
        (0..n)
            .map(|_| record((0..d).map(|_| rng.random_range(-1.0..1.0)).collect(), rng.random_range(-2.0..2.0)))
            .collect()
    }

    #[test]
    fn empty_records_give_zero_matrix() {
        let r = density_matrix(&[], 4, 0.5).unwrap();
        assert!(r.values.iter().all(|&v| v == 0.0));
        assert_eq!(density_diag(&r).0, vec![0.0; 4]);
    }

    #[test]
    fn single_record_single_entry() {
        let (a, b, psi) = (-1.5, 0.7, 0.25);
        let r = density_matrix(&[record(vec![a, 0.0, 0.0], b)], 3, psi).unwrap();
        let want = a * a * b * b * a.abs() / (2.0 * psi);
        assert!((r.get(0, 0) - want).abs() < 1e-15);
        assert_eq!(r.values.iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn matches_naive_sum() {
        let recs = random_records(10, 6, 1);
        let r = density_matrix(&recs, 6, 0.3).unwrap();
        for (x, y) in r.values.iter().zip(naive_r(&recs, 6, 0.3)) {
            assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0));
        }
    }

    #[test]
    fn diag_extracts_diagonal() {
        let mut eye = GlassDensityMatrix::zeros(3, 1.0);
        for i in 0..3 {
            eye.values[i * 3 + i] = 1.0;
        }
        assert_eq!(density_diag(&eye).0, vec![1.0; 3]);
        let recs = random_records(5, 4, 2);
        let r = density_matrix(&recs, 4, 1.0).unwrap();
        let diag = density_diag(&r);
        for i in 0..4 {
            assert_eq!(diag.0[i], r.values[i * 4 + i]);
        }
    }

    #[test]
    fn variation_bound_basics() {
        let recs = random_records(5, 4, 3);
        let r = density_matrix(&recs, 4, 1.0).unwrap();
        assert_eq!(variation_bound(&r, &[0.0; 4]).unwrap(), vec![0.0; 4]);
        let b1 = variation_bound(&r, &[0.1, -0.2, 0.3, 0.0]).unwrap();
        let b3 = variation_bound(&r, &[0.3, -0.6, 0.9, 0.0]).unwrap();
        for (x, y) in b1.iter().zip(&b3) {
            assert!((3.0 * x - y).abs() < 1e-12);
        }
        assert!(variation_bound(&r, &[0.0; 3]).is_err());
    }

    #[test]
    fn loss_bound_cases() {
        let zero = loss_increase_bound(&GlassDensityDiag(vec![0.0; 3]), &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(zero.total, 0.0);
        let rho = GlassDensityDiag(vec![1.0]);
        let b = loss_increase_bound(&rho, &[1.0]).unwrap();
        assert!((b.total - (2.0 / (3.0 * PI)).sqrt()).abs() < 1e-15);
        assert_eq!(b.total, b.aggregate);
        let b2 = loss_increase_bound(&rho, &[2.0]).unwrap();
        assert!((b2.total / b.total - 2f64.powf(1.5)).abs() < 1e-12);
        assert!(loss_increase_bound(&GlassDensityDiag(vec![-1.0]), &[1.0]).is_err());
    }

    #[test]
    fn kernel_constants() {
        assert_eq!(kernel_constant(Density::Rademacher, 1.0, 0.0).unwrap(), 0.5);
        assert_eq!(kernel_constant(Density::StandardNormal, 0.0, 0.0).unwrap(), 1.0);
        assert_eq!(kernel_constant(Density::Rademacher, 0.0, 0.0).unwrap(), 1.0);
        let c = kernel_constant(Density::StandardNormal, 1.0, 0.0).unwrap();
        assert!(c > 0.0 && c < 0.5, "normal is worse than Rademacher: {c}");
        assert!(kernel_constant(Density::Rademacher, -1.0, 0.0).is_err());
        assert!(kernel_constant(Density::Rademacher, 1.0, 1.5).is_err());
        assert!("uniform".parse::<Density>().is_err());
    }

    #[test]
    fn normal_kernel_constant_matches_closed_form() {
        // E[1/(1+x²)] = √(π/2) e^{1/2} erfc(1/√2) for x ~ N(0,1)
        let inv = (PI / 2.0).sqrt() * 0.5f64.exp() * erfc(1.0 / std::f64::consts::SQRT_2);
        let c = kernel_constant(Density::StandardNormal, 1.0, 0.0).unwrap();
        assert!(((c - (1.0 - inv)) / c).abs() < 1e-8, "{c} vs {}", 1.0 - inv);
    }

    #[test]
    fn restricted_update_probability() {
        let p = update_probability(Density::StandardNormal, 1.0);
        assert!((p - 0.3173).abs() < 0.002);
        assert_eq!(update_probability(Density::Rademacher, 1.0), 1.0);
    }

    #[test]
    fn kernel_weights() {
        for w2 in [0.0, 0.3, 1.0, 4.0] {
            let k = KernelSpec::unrestricted(Density::Rademacher, w2).unwrap();
            for d in [-1.0, 1.0] {
                assert!((k.weight(d) - d).abs() < 1e-15);
            }
        }
        let k = KernelSpec::unrestricted(Density::StandardNormal, 0.0).unwrap();
        assert_eq!(k.weight(0.5), 2.0);
        let kr = KernelSpec::new(Density::StandardNormal, 1.0, 1.0).unwrap();
        assert_eq!(kr.weight(0.5), 0.0);
        assert!(kr.weight(1.5) > 0.0);
    }

    #[test]
    fn estimator_variance_cases() {
        let k0 = KernelSpec::unrestricted(Density::Rademacher, 0.0).unwrap();
        assert_eq!(estimator_variance(&k0, 3.0).single_sample, 0.0);
        let k1 = KernelSpec::unrestricted(Density::Rademacher, 1.0).unwrap();
        assert_eq!(estimator_variance(&k1, 3.0).single_sample, 9.0);
        let kn = KernelSpec::unrestricted(Density::StandardNormal, 1.0).unwrap();
        let kr = KernelSpec::new(Density::StandardNormal, 1.0, 1.0).unwrap();
        assert!(estimator_variance(&kr, 1.0).effective < estimator_variance(&kn, 1.0).effective);
    }

    #[test]
    fn integrate_polynomial_and_gaussian() {
        assert!((integrate(|x| x * x, 0.0, 3.0, 1e-10) - 9.0).abs() < 1e-9);
        let mass = 2.0 * integrate(std_normal_pdf, 0.0, 8.0, 1e-10);
        assert!((mass - 1.0).abs() < 1e-9);
    }

    #[test]
    fn linear_model_has_no_variation() {
        let mut constant = |_: &[f64], g: &mut [f64]| {
            g.iter_mut().for_each(|v| *v = 1.5);
            Ok(())
        };
        let m = measure_variations(&mut constant, &[0.0; 5], 0.1, 20, 1).unwrap();
        assert!(m.v.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn quadratic_variation_matches_closed_form() {
        let d = 8;
        let mut rng = seeded(17);
        let mut h = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..=i {
                let x = rng.random_range(-1.0..1.0);
                h[i * d + j] = x;
                h[j * d + i] = x;
            }
        }
        let lambda = 0.01;
        let mut q = Quadratic::new(d, h.clone());
        let m = measure_variations(&mut q, &vec![0.3; d], lambda, 4000, 2).unwrap();
        for i in 0..d {
            let want: f64 = lambda * lambda * (0..d).map(|j| h[i * d + j].powi(2)).sum::<f64>();
            assert!((m.v[i] - want).abs() <= 3.0 * m.std_error[i] + 1e-18, "{i}: {} vs {want}", m.v[i]);
        }
        let (a, b) = measure_variations_paired(&mut q, &vec![0.3; d], lambda, 100, 3).unwrap();
        let rep = power_law(&a, &b, &Partition::whole(d)).unwrap();
        assert!((rep.rows[0].p.unwrap() - 2.0).abs() < 1e-9, "shared draws make the quadratic ratio exact");
    }

    #[test]
    fn invalid_probe_arguments() {
        let mut q = Quadratic::new(2, vec![1.0, 0.0, 0.0, 1.0]);
        assert!(measure_variations(&mut q, &[0.0; 2], 0.0, 10, 1).is_err());
        assert!(measure_variations(&mut q, &[0.0; 2], 0.1, 0, 1).is_err());
    }

    fn meas(v: Vec<f64>, lambda: f64) -> GradientVariationMeasurement {
        let n = v.len();
        GradientVariationMeasurement { lambda, v, std_error: vec![0.0; n], n_samples: 1 }
    }

    #[test]
    fn power_law_exponents() {
        let a = meas(vec![1.0, 2.0, 1.0, 0.0], 0.1);
        let b = meas(vec![4.0, 8.0, 2.0, 0.0], 0.2);
        let parts = vec![
            Partition::new("quad", vec![0, 1]),
            Partition::new("glass", vec![2]),
            Partition::new("flat", vec![3]),
        ];
        let rep = power_law(&a, &b, &parts).unwrap();
        assert_eq!(rep.get("quad").unwrap().p, Some(2.0));
        assert_eq!(rep.get("glass").unwrap().p, Some(1.0));
        assert_eq!(rep.get("flat").unwrap().p, None);
        let overlapping = vec![Partition::new("a", vec![0, 1]), Partition::new("b", vec![1])];
        assert!(power_law(&a, &b, &overlapping).is_err());
    }

    #[test]
    fn power_law_csv_schema() {
        let dir = tempfile::tempdir().unwrap();
        let a = meas(vec![1.0, 0.0], 0.1);
        let b = meas(vec![2.0, 0.0], 0.2);
        let rep = power_law(&a, &b, &[Partition::new("x", vec![0]), Partition::new("y", vec![1])]).unwrap();
        let path = dir.path().join("p.csv");
        rep.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "partition,sum_v_l,sum_v_2l,p");
        assert_eq!(lines[1], "x,1.0,2.0,1.0");
        assert_eq!(lines[2], "y,0.0,0.0,");
    }

    proptest! {
        #[test]
        fn density_matrix_is_permutation_invariant(seed in 0u64..1000, shift in 1usize..9) {
            let recs = random_records(9, 5, seed);
            let mut rotated = recs.clone();
            rotated.rotate_left(shift);
            let a = density_matrix(&recs, 5, 0.7).unwrap();
            let b = density_matrix(&rotated, 5, 0.7).unwrap();
            for (x, y) in a.values.iter().zip(&b.values) {
                prop_assert!((x - y).abs() <= 1e-13 * x.abs().max(1e-300));
                prop_assert!(*x >= 0.0);
            }
        }

        #[test]
        fn bounds_are_homogeneous(seed in 0u64..1000, t in 0.01f64..10.0) {
            let recs = random_records(4, 4, seed);
            let r = density_matrix(&recs, 4, 1.0).unwrap();
            let delta = [0.3, -0.1, 0.0, 1.2];
            let scaled: Vec<f64> = delta.iter().map(|d| d * t).collect();
            let b1 = variation_bound(&r, &delta).unwrap();
            let bt = variation_bound(&r, &scaled).unwrap();
            for (x, y) in b1.iter().zip(&bt) {
                prop_assert!((x * t - y).abs() <= 1e-12 * y.abs().max(1e-12));
            }
            let rho = density_diag(&r);
            let l1 = loss_increase_bound(&rho, &delta).unwrap();
            let lt = loss_increase_bound(&rho, &scaled).unwrap();
            prop_assert!((l1.total * t.powf(1.5) - lt.total).abs() <= 1e-12 * lt.total.max(1e-12));
            prop_assert!((l1.aggregate * t.powf(1.5) - lt.aggregate).abs() <= 1e-12 * lt.aggregate.max(1e-12));
        }
    }
}
