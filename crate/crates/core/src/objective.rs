//! Gradient oracles consumed by the probes and the optimizer.

use thiserror::Error;

/// Failure reported by a gradient oracle.
#[derive(Debug, Clone, Error, PartialEq)]
#[error("gradient evaluation failed: {0}")]
pub struct EvalError(pub String);

/// Anything that can write a gradient for a parameter vector into a caller-owned buffer.
///
/// The buffer-passing form lets the optimizer run its topography update with a
/// fixed workspace; implementations should not assume `grad` is zeroed.
pub trait Objective {
    fn gradient_into(&mut self, theta: &[f64], grad: &mut [f64]) -> Result<(), EvalError>;

    /// Convenience wrapper that allocates the output.
    fn gradient(&mut self, theta: &[f64]) -> Result<Vec<f64>, EvalError> {
        let mut out = vec![0.0; theta.len()];
        self.gradient_into(theta, &mut out)?;
        Ok(out)
    }
}

impl<F> Objective for F
where
    F: FnMut(&[f64], &mut [f64]) -> Result<(), EvalError>,
{
    fn gradient_into(&mut self, theta: &[f64], grad: &mut [f64]) -> Result<(), EvalError> {
        self(theta, grad)
    }
}

/// Wraps an objective and counts gradient evaluations.
#[derive(Debug)]
pub struct Counted<O> {
    pub inner: O,
    pub evaluations: u64,
}

impl<O> Counted<O> {
    pub fn new(inner: O) -> Self {
        Self { inner, evaluations: 0 }
    }
}

impl<O: Objective> Objective for Counted<O> {
    fn gradient_into(&mut self, theta: &[f64], grad: &mut [f64]) -> Result<(), EvalError> {
        self.evaluations += 1;
        self.inner.gradient_into(theta, grad)
    }
}

/// Quadratic objective `g(θ) = H (θ - center)` with a dense row-major `H`.
#[derive(Debug, Clone)]
pub struct Quadratic {
    pub dim: usize,
    pub hessian: Vec<f64>,
    pub center: Vec<f64>,
}

impl Quadratic {
    pub fn new(dim: usize, hessian: Vec<f64>) -> Self {
        assert_eq!(hessian.len(), dim * dim, "hessian must be dim x dim");
        Self { dim, hessian, center: vec![0.0; dim] }
    }

    pub fn loss(&self, theta: &[f64]) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.dim {
            let row = &self.hessian[i * self.dim..(i + 1) * self.dim];
            let hx: f64 = row
                .iter()
                .zip(theta.iter().zip(&self.center))
                .map(|(h, (t, c))| h * (t - c))
                .sum();
            acc += (theta[i] - self.center[i]) * hx;
        }
        0.5 * acc
    }
}

impl Objective for Quadratic {
    fn gradient_into(&mut self, theta: &[f64], grad: &mut [f64]) -> Result<(), EvalError> {
        if theta.len() != self.dim || grad.len() != self.dim {
            return Err(EvalError(format!(
                "quadratic of dimension {} given {} parameters",
                self.dim,
                theta.len()
            )));
        }
        for (i, g) in grad.iter_mut().enumerate() {
            let row = &self.hessian[i * self.dim..(i + 1) * self.dim];
            *g = row
                .iter()
                .zip(theta.iter().zip(&self.center))
                .map(|(h, (t, c))| h * (t - c))
                .sum();
        }
        Ok(())
    }
}
