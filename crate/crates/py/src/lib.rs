//! Python bindings for the glassopt core: network gradients, glass-density
//! quantities, diagonal-estimator kernels, the Alice optimizer and the oracle
//! simulations. Vectors cross the boundary as plain `list[float]`.

use glassopt::alice::{self, Alice, AliceConfig, AliceError, CurvatureTerms, LimitMethod};
use glassopt::glass::{self, Density, GlassDensityDiag, KernelSpec, Partition};
use glassopt::harness::{self, ExperimentConfig};
use glassopt::netkit::{self, Batch, LossKind, ModelSpec, Targets};
use glassopt::oracles::{self, SyntheticGlass1D};
use glassopt::EvalError;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn parse_density(name: &str) -> PyResult<Density> {
    match name {
        "rademacher" => Ok(Density::Rademacher),
        "normal" | "standard-normal" => Ok(Density::StandardNormal),
        other => Err(PyValueError::new_err(format!("unknown density '{other}' (expected rademacher or normal)"))),
    }
}

/// Gradient oracle backed by a Python callable `f(theta: list[float]) -> list[float]`.
/// The first Python exception is kept so it can be re-raised unchanged.
struct PyObjective<'py> {
    f: Bound<'py, PyAny>,
    error: Option<PyErr>,
}

impl<'py> PyObjective<'py> {
    fn new(f: Bound<'py, PyAny>) -> Self {
        Self { f, error: None }
    }

    fn finish<T, E: std::fmt::Display>(mut self, r: Result<T, E>) -> PyResult<T> {
        match (r, self.error.take()) {
            (_, Some(err)) => Err(err),
            (Ok(v), None) => Ok(v),
            (Err(e), None) => Err(runtime_err(e)),
        }
    }
}

impl glassopt::Objective for PyObjective<'_> {
    fn gradient_into(&mut self, theta: &[f64], grad: &mut [f64]) -> Result<(), EvalError> {
        let out = self.f.call1((theta.to_vec(),)).and_then(|v| v.extract::<Vec<f64>>());
        match out {
            Ok(g) if g.len() == grad.len() => {
                grad.copy_from_slice(&g);
                Ok(())
            }
            Ok(g) => Err(EvalError(format!("callback returned {} values, expected {}", g.len(), grad.len()))),
            Err(e) => {
                let msg = e.to_string();
                self.error.get_or_insert(e);
                Err(EvalError(msg))
            }
        }
    }
}

/// Layer widths and loss of a fully connected ReLU network.
#[pyclass(name = "ModelSpec", module = "glassopt_py", from_py_object)]
#[derive(Clone)]
struct PyModelSpec {
    inner: ModelSpec,
}

#[pymethods]
impl PyModelSpec {
    /// `loss` is "mse" or "cross-entropy".
    #[new]
    #[pyo3(signature = (layer_widths, loss = "mse"))]
    fn new(layer_widths: Vec<usize>, loss: &str) -> PyResult<Self> {
        let loss = match loss {
            "mse" | "mean-squared-error" => LossKind::MeanSquaredError,
            "cross-entropy" | "softmax-cross-entropy" => LossKind::SoftmaxCrossEntropy,
            other => return Err(PyValueError::new_err(format!("unknown loss '{other}'"))),
        };
        let inner = ModelSpec::new(layer_widths, loss);
        inner.validate().map_err(value_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn layer_widths(&self) -> Vec<usize> {
        self.inner.layer_widths.clone()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    /// `(start, end)` parameter index range of each layer.
    fn layer_ranges(&self) -> Vec<(usize, usize)> {
        self.inner.layer_ranges().into_iter().map(|r| (r.start, r.end)).collect()
    }

    fn __repr__(&self) -> String {
        format!("ModelSpec({:?}, {:?})", self.inner.layer_widths, self.inner.loss)
    }
}

fn make_batch(spec: &ModelSpec, inputs: Vec<Vec<f64>>, targets: &Bound<'_, PyAny>) -> PyResult<Batch> {
    let width = spec.input_width();
    if inputs.iter().any(|row| row.len() != width) {
        return Err(PyValueError::new_err(format!("every input row needs {width} values")));
    }
    let targets = match spec.loss {
        LossKind::SoftmaxCrossEntropy => Targets::Classes(targets.extract::<Vec<usize>>()?),
        LossKind::MeanSquaredError => Targets::Values(targets.extract::<Vec<Vec<f64>>>()?.concat()),
    };
    Batch::new(inputs.concat(), width, targets).map_err(value_err)
}

/// He-initialized parameters for `spec`.
#[pyfunction]
#[pyo3(signature = (spec, seed = 0))]
fn build_model(spec: &PyModelSpec, seed: u64) -> PyResult<Vec<f64>> {
    Ok(netkit::build_model(&spec.inner, seed).map_err(value_err)?.into_inner())
}

/// Mean loss over a batch. `targets` are class indices for cross-entropy, rows otherwise.
#[pyfunction]
fn loss(spec: &PyModelSpec, params: Vec<f64>, inputs: Vec<Vec<f64>>, targets: &Bound<'_, PyAny>) -> PyResult<f64> {
    let batch = make_batch(&spec.inner, inputs, targets)?;
    netkit::loss(&spec.inner, &params, &batch).map_err(value_err)
}

/// `(loss, gradient)` by backpropagation.
#[pyfunction]
fn gradient(spec: &PyModelSpec, params: Vec<f64>, inputs: Vec<Vec<f64>>, targets: &Bound<'_, PyAny>) -> PyResult<(f64, Vec<f64>)> {
    let batch = make_batch(&spec.inner, inputs, targets)?;
    let (l, g) = netkit::gradient(&spec.inner, &params, &batch).map_err(value_err)?;
    Ok((l, g.0))
}

/// Per-coordinate, total and aggregate expected loss increase for a displacement.
#[pyfunction]
fn loss_increase_bound<'py>(py: Python<'py>, rho: Vec<f64>, delta: Vec<f64>) -> PyResult<Bound<'py, PyDict>> {
    let b = glass::loss_increase_bound(&GlassDensityDiag(rho), &delta).map_err(value_err)?;
    let d = PyDict::new(py);
    d.set_item("per_coordinate", b.per_coordinate)?;
    d.set_item("total", b.total)?;
    d.set_item("aggregate", b.aggregate)?;
    Ok(d)
}

/// Normalizing constant `c` of the optimal kernel.
#[pyfunction]
#[pyo3(signature = (density, omega2, restrict = 0.0))]
fn kernel_constant(density: &str, omega2: f64, restrict: f64) -> PyResult<f64> {
    glass::kernel_constant(parse_density(density)?, omega2, restrict).map_err(value_err)
}

/// Probability that a coordinate of the perturbation clears `restrict`.
#[pyfunction]
fn update_probability(density: &str, restrict: f64) -> PyResult<f64> {
    Ok(glass::update_probability(parse_density(density)?, restrict))
}

/// Optimal kernel weight `κ*(δ)` for one row.
#[pyfunction]
#[pyo3(signature = (delta, density, omega2, restrict = 0.0))]
fn optimal_kernel(delta: f64, density: &str, omega2: f64, restrict: f64) -> PyResult<f64> {
    let k = KernelSpec::new(parse_density(density)?, omega2, restrict).map_err(value_err)?;
    Ok(k.weight(delta))
}

/// Closed-form single-sample and effective variance of the optimal estimator.
#[pyfunction]
#[pyo3(signature = (density, omega2, restrict = 0.0, diag = 1.0))]
fn estimator_variance<'py>(py: Python<'py>, density: &str, omega2: f64, restrict: f64, diag: f64) -> PyResult<Bound<'py, PyDict>> {
    let k = KernelSpec::new(parse_density(density)?, omega2, restrict).map_err(value_err)?;
    let v = glass::estimator_variance(&k, diag);
    let d = PyDict::new(py);
    d.set_item("c", k.c)?;
    d.set_item("single_sample", v.single_sample)?;
    d.set_item("update_probability", v.update_probability)?;
    d.set_item("effective", v.effective)?;
    Ok(d)
}

#[pyfunction]
#[pyo3(signature = (rho, g, eps = 1e-8))]
fn glass_term(rho: Vec<f64>, g: Vec<f64>, eps: f64) -> PyResult<Vec<f64>> {
    if rho.len() != g.len() {
        return Err(PyValueError::new_err("rho and g differ in length"));
    }
    Ok(alice::glass_term(&rho, &g, eps))
}

#[pyfunction]
#[pyo3(signature = (h_glass, h, eps = 1e-8))]
fn modified_hessian(h_glass: Vec<f64>, h: Vec<f64>, eps: f64) -> PyResult<Vec<f64>> {
    alice::modified_hessian(&h_glass, &h, eps).map_err(value_err)
}

/// Power-law exponent of a gradient callable around `mu`, over the whole vector
/// or over named index partitions.
#[pyfunction]
#[pyo3(signature = (grad_fn, mu, lam, n_samples = 1000, seed = 0, partitions = None))]
fn power_law<'py>(
    py: Python<'py>,
    grad_fn: Bound<'py, PyAny>,
    mu: Vec<f64>,
    lam: f64,
    n_samples: usize,
    seed: u64,
    partitions: Option<Vec<(String, Vec<usize>)>>,
) -> PyResult<Bound<'py, PyDict>> {
    let parts = match partitions {
        Some(p) => p.into_iter().map(|(n, idx)| Partition::new(n, idx)).collect(),
        None => Partition::whole(mu.len()),
    };
    let mut obj = PyObjective::new(grad_fn);
    let r = glass::measure_variations_paired(&mut obj, &mu, lam, n_samples, seed);
    let (v1, v2) = obj.finish(r)?;
    let rep = glass::power_law(&v1, &v2, &parts).map_err(value_err)?;
    let d = PyDict::new(py);
    for row in rep.rows {
        d.set_item(row.partition, row.p)?;
    }
    Ok(d)
}

fn parse_limit(name: &str) -> PyResult<LimitMethod> {
    match name {
        "fixed" => Ok(LimitMethod::Fixed),
        "sgdm" => Ok(LimitMethod::Sgdm),
        "adam" => Ok(LimitMethod::Adam),
        other => Err(PyValueError::new_err(format!("unknown limit method '{other}'"))),
    }
}

/// Alice optimizer over a Python gradient callable.
#[pyclass(name = "Alice", module = "glassopt_py", unsendable)]
struct PyAlice {
    inner: Alice,
}

#[pymethods]
impl PyAlice {
    #[new]
    #[pyo3(signature = (
        params, *, seed = 0, lambda_ = 0.002, beta1 = 0.9, beta2 = 0.999, eps = 1e-8, phi = 0.1, omega = 1.0,
        lambda_min = 0.0, lambda_max = 0.002, limit_method = "adam", quick_steps = 0,
        terms = vec!["rho".to_string(), "h_abs".to_string()], naq = false
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        params: Vec<f64>,
        seed: u64,
        lambda_: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        phi: f64,
        omega: f64,
        lambda_min: f64,
        lambda_max: f64,
        limit_method: &str,
        quick_steps: u32,
        terms: Vec<String>,
        naq: bool,
    ) -> PyResult<Self> {
        let cfg = AliceConfig {
            lambda: lambda_,
            beta1,
            beta2,
            eps,
            phi,
            omega,
            lambda_min,
            lambda_max,
            limit_method: parse_limit(limit_method)?,
            quick_steps,
            terms: CurvatureTerms::try_from(terms).map_err(PyValueError::new_err)?,
            naq,
        };
        Ok(Self { inner: Alice::new(cfg, params, seed).map_err(value_err)? })
    }

    /// Alice configured to follow Adam exactly.
    #[staticmethod]
    #[pyo3(signature = (params, lr, beta1 = 0.9, beta2 = 0.999, eps = 1e-8, seed = 0))]
    fn adam(params: Vec<f64>, lr: f64, beta1: f64, beta2: f64, eps: f64, seed: u64) -> PyResult<Self> {
        let cfg = AliceConfig::adam_pinned(lr, beta1, beta2, eps);
        Ok(Self { inner: Alice::new(cfg, params, seed).map_err(value_err)? })
    }

    /// One step; `grad_fn(theta)` must return the gradient at `theta`.
    fn step<'py>(&mut self, py: Python<'py>, grad_fn: Bound<'py, PyAny>) -> PyResult<Bound<'py, PyDict>> {
        let mut obj = PyObjective::new(grad_fn);
        let r = self.inner.step(&mut obj);
        let rec = obj.finish::<_, AliceError>(r)?;
        let d = PyDict::new(py);
        d.set_item("delta", rec.delta)?;
        d.set_item("h_glass", rec.h_glass)?;
        d.set_item("h_mod", rec.h_mod)?;
        d.set_item("clamp_lo", rec.clamp_lo)?;
        d.set_item("clamp_hi", rec.clamp_hi)?;
        Ok(d)
    }

    #[getter]
    fn params(&self) -> Vec<f64> {
        self.inner.params().to_vec()
    }

    #[getter]
    fn rho(&self) -> Vec<f64> {
        self.inner.state.rho.clone()
    }

    #[getter]
    fn evaluations(&self) -> u64 {
        self.inner.evaluations
    }

    #[getter]
    fn steps(&self) -> u64 {
        self.inner.steps
    }
}

/// Relative residuals of the running-gradient error against `β₁ˢγ₀` on a
/// quadratic with row-major Hessian `h`.
#[pyfunction]
#[pyo3(signature = (h, g_star0, gamma0, beta1, h_mod, n_steps = 50, phi = None, omega = None))]
#[allow(clippy::too_many_arguments)]
fn naq_exactness(
    h: Vec<f64>,
    g_star0: Vec<f64>,
    gamma0: Vec<f64>,
    beta1: f64,
    h_mod: Vec<f64>,
    n_steps: usize,
    phi: Option<f64>,
    omega: Option<f64>,
) -> PyResult<Vec<f64>> {
    let fractions = match (phi, omega) {
        (None, None) => None,
        (p, o) => Some((p.unwrap_or(1.0 - beta1), o.unwrap_or(1.0))),
    };
    let rep = alice::naq_exactness_check(&h, &g_star0, &gamma0, beta1, &h_mod, n_steps, fractions).map_err(value_err)?;
    Ok(rep.steps.iter().map(|s| s.relative_residual).collect())
}

/// Reflected glass walk against its closed forms.
#[pyfunction]
#[pyo3(signature = (rho, lam, n = 1000, trials = 100_000, seed = 0))]
fn glass_walk<'py>(py: Python<'py>, rho: f64, lam: f64, n: usize, trials: usize, seed: u64) -> PyResult<Bound<'py, PyDict>> {
    let r = oracles::glass_walk_expectation(&SyntheticGlass1D::new(rho, lam, n, trials, seed)).map_err(value_err)?;
    let d = PyDict::new(py);
    d.set_item("mean_abs", r.mean_abs)?;
    d.set_item("predicted_abs", r.predicted_abs)?;
    d.set_item("variance", r.variance)?;
    d.set_item("predicted_variance", r.predicted_variance)?;
    Ok(d)
}

/// Full and damped diagonal quasi-Newton steps on a random 10 x 100 least-squares problem.
#[pyfunction]
#[pyo3(signature = (seed = 0))]
fn underdetermined_ls<'py>(py: Python<'py>, seed: u64) -> PyResult<Bound<'py, PyDict>> {
    let r = oracles::underdetermined_ls(seed).map_err(value_err)?;
    let d = PyDict::new(py);
    d.set_item("loss_initial", r.loss_initial)?;
    d.set_item("loss_full_step", r.loss_full_step)?;
    d.set_item("loss_damped_step", r.loss_damped_step)?;
    Ok(d)
}

/// `(min, median, max)`.
#[pyfunction]
fn aggregate(values: Vec<f64>) -> PyResult<(f64, f64, f64)> {
    harness::aggregate(&values).map_err(value_err)
}

/// Runs a TOML experiment config, writing artifacts to `out_dir`; returns
/// `(seed, final_metric, grad_evals)` per successful seed.
#[pyfunction]
fn run_experiment(config: &str, out_dir: &str) -> PyResult<Vec<(u64, f64, u64)>> {
    let cfg = ExperimentConfig::from_toml_str(config).map_err(value_err)?;
    let summary = harness::run_experiment(&cfg, std::path::Path::new(out_dir)).map_err(runtime_err)?;
    Ok(summary.per_seed.iter().filter(|r| r.error.is_none()).map(|r| (r.seed, r.final_metric, r.grad_evals)).collect())
}

#[pymodule]
fn glassopt_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModelSpec>()?;
    m.add_class::<PyAlice>()?;
    m.add_function(wrap_pyfunction!(build_model, m)?)?;
    m.add_function(wrap_pyfunction!(loss, m)?)?;
    m.add_function(wrap_pyfunction!(gradient, m)?)?;
    m.add_function(wrap_pyfunction!(loss_increase_bound, m)?)?;
    m.add_function(wrap_pyfunction!(kernel_constant, m)?)?;
    m.add_function(wrap_pyfunction!(update_probability, m)?)?;
    m.add_function(wrap_pyfunction!(optimal_kernel, m)?)?;
    m.add_function(wrap_pyfunction!(estimator_variance, m)?)?;
    m.add_function(wrap_pyfunction!(glass_term, m)?)?;
    m.add_function(wrap_pyfunction!(modified_hessian, m)?)?;
    m.add_function(wrap_pyfunction!(power_law, m)?)?;
    m.add_function(wrap_pyfunction!(naq_exactness, m)?)?;
    m.add_function(wrap_pyfunction!(glass_walk, m)?)?;
    m.add_function(wrap_pyfunction!(underdetermined_ls, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
