//! Dense reverse-mode autodiff for fully connected ReLU networks.
//!
//! Parameters are flattened layer by layer; within a layer the weight matrix
//! (shape `w_out x w_in`) comes first in row-major order, followed by the
//! `w_out` biases. Hidden layers use ReLU with derivative 0 at exactly `y = 0`;
//! the output layer is the identity.

use std::ops::{Deref, DerefMut, Range};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::objective::{EvalError, Objective};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum NetError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("dimension mismatch: expected {expected}, got {got} ({what})")]
    Dimension { what: &'static str, expected: usize, got: usize },
    #[error("non-finite value in layer {layer}")]
    NonFinite { layer: usize },
    #[error("invalid batch: {0}")]
    Batch(String),
}

impl From<NetError> for EvalError {
    fn from(e: NetError) -> Self {
        EvalError(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    /// `(1/n) Σ ½‖out − target‖²`
    MeanSquaredError,
    /// `(1/n) Σ −log softmax(out)[class]`
    SoftmaxCrossEntropy,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Input width, hidden widths..., output width.
    pub layer_widths: Vec<usize>,
    pub loss: LossKind,
}

impl ModelSpec {
    pub fn new(layer_widths: Vec<usize>, loss: LossKind) -> Self {
        Self { layer_widths, loss }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.layer_widths.len() < 3 {
            return Err(NetError::Config(format!(
                "need input, at least one hidden and an output width, got {:?}",
                self.layer_widths
            )));
        }
        if let Some(pos) = self.layer_widths.iter().position(|&w| w == 0) {
            return Err(NetError::Config(format!("layer width at position {pos} is zero")));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.layer_widths.last().expect("validated spec")
    }

    /// Number of affine layers (hidden layers + output layer).
    pub fn n_layers(&self) -> usize {
        self.layer_widths.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.layer_widths.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }

    /// Flat index range of every layer's parameters (weights then biases).
    pub fn layer_ranges(&self) -> Vec<Range<usize>> {
        let mut start = 0;
        self.layer_widths
            .windows(2)
            .map(|w| {
                let len = (w[0] + 1) * w[1];
                let r = start..start + len;
                start += len;
                r
            })
            .collect()
    }

    fn layout(&self) -> Vec<LayerLayout> {
        let mut offset = 0;
        self.layer_widths
            .windows(2)
            .map(|w| {
                let l = LayerLayout { w_in: w[0], w_out: w[1], weights: offset, biases: offset + w[0] * w[1] };
                offset += (w[0] + 1) * w[1];
                l
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerLayout {
    w_in: usize,
    w_out: usize,
    weights: usize,
    biases: usize,
}

impl LayerLayout {
    fn w<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.weights..self.weights + self.w_in * self.w_out]
    }
    fn b<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.biases..self.biases + self.w_out]
    }
}

/// Flat model parameters.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn zeros(d: usize) -> Self {
        Self(vec![0.0; d])
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for ParamVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    /// Row-major `n x w_out` regression targets.
    Values(Vec<f64>),
    /// One class index per sample.
    Classes(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// Row-major `n x input_dim`.
    pub inputs: Vec<f64>,
    pub input_dim: usize,
    pub targets: Targets,
}

impl Batch {
    pub fn new(inputs: Vec<f64>, input_dim: usize, targets: Targets) -> Result<Self, NetError> {
        if input_dim == 0 || inputs.is_empty() || !inputs.len().is_multiple_of(input_dim) {
            return Err(NetError::Batch(format!(
                "{} input values do not form rows of width {input_dim}",
                inputs.len()
            )));
        }
        if inputs.iter().any(|v| !v.is_finite()) {
            return Err(NetError::Batch("non-finite input".into()));
        }
        let n = inputs.len() / input_dim;
        match &targets {
            Targets::Values(t) => {
                if t.is_empty() || t.len() % n != 0 {
                    return Err(NetError::Batch(format!("{} targets for {n} samples", t.len())));
                }
                if t.iter().any(|v| !v.is_finite()) {
                    return Err(NetError::Batch("non-finite target".into()));
                }
            }
            Targets::Classes(c) => {
                if c.len() != n {
                    return Err(NetError::Batch(format!("{} labels for {n} samples", c.len())));
                }
            }
        }
        Ok(Self { inputs, input_dim, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.len() / self.input_dim
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn sample(&self, s: usize) -> &[f64] {
        &self.inputs[s * self.input_dim..(s + 1) * self.input_dim]
    }

    /// Rows `idx` gathered into a new batch.
    pub fn select(&self, idx: &[usize]) -> Batch {
        let mut inputs = Vec::with_capacity(idx.len() * self.input_dim);
        for &s in idx {
            inputs.extend_from_slice(self.sample(s));
        }
        let targets = match &self.targets {
            Targets::Values(t) => {
                let w = t.len() / self.len();
                let mut out = Vec::with_capacity(idx.len() * w);
                for &s in idx {
                    out.extend_from_slice(&t[s * w..(s + 1) * w]);
                }
                Targets::Values(out)
            }
            Targets::Classes(c) => Targets::Classes(idx.iter().map(|&s| c[s]).collect()),
        };
        Batch { inputs, input_dim: self.input_dim, targets }
    }
}

/// One near-threshold ReLU unit for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ReluUnitRecord {
    /// Hidden layer index (0 = first hidden layer).
    pub layer: usize,
    pub neuron: usize,
    pub sample: usize,
    /// Pre-activation value.
    pub y: f64,
    /// Derivative of the batch loss with respect to the post-activation `z = max(y, 0)`.
    pub dl_dz: f64,
    /// Gradient of `y` with respect to every parameter.
    pub grad_y: Vec<f64>,
}

impl ReluUnitRecord {
    pub fn unit_id(&self) -> (usize, usize, usize) {
        (self.layer, self.neuron, self.sample)
    }
}

/// Deterministic He-style initialization. First-layer weights have variance
/// `1/w_in`, deeper layers `2/w_in` (ReLU inputs); biases start at zero.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<ParamVector, NetError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = vec![0.0; spec.param_count()];
    for (l, lay) in spec.layout().iter().enumerate() {
        let gain = if l == 0 { 1.0 } else { 2.0 };
        let dist = Normal::new(0.0, (gain / lay.w_in as f64).sqrt()).expect("positive std");
        for w in &mut p[lay.weights..lay.weights + lay.w_in * lay.w_out] {
            *w = dist.sample(&mut rng);
        }
    }
    Ok(ParamVector(p))
}

fn check_dims(spec: &ModelSpec, params: &[f64], batch: &Batch) -> Result<(), NetError> {
    spec.validate()?;
    if params.len() != spec.param_count() {
        return Err(NetError::Dimension { what: "parameters", expected: spec.param_count(), got: params.len() });
    }
    if batch.input_dim != spec.input_width() {
        return Err(NetError::Dimension { what: "input width", expected: spec.input_width(), got: batch.input_dim });
    }
    match &batch.targets {
        Targets::Values(t) => {
            let want = batch.len() * spec.output_width();
            if t.len() != want {
                return Err(NetError::Dimension { what: "targets", expected: want, got: t.len() });
            }
        }
        Targets::Classes(c) => {
            if spec.loss != LossKind::SoftmaxCrossEntropy {
                return Err(NetError::Batch("class labels require softmax-cross-entropy".into()));
            }
            if let Some(&bad) = c.iter().find(|&&k| k >= spec.output_width()) {
                return Err(NetError::Batch(format!("class {bad} out of range")));
            }
        }
    }
    Ok(())
}

/// Forward pass keeping every layer's pre-activations (`n x w_out` each).
struct Tape {
    pre: Vec<Vec<f64>>,
}

fn forward_tape(spec: &ModelSpec, params: &[f64], inputs: &[f64], n: usize) -> Result<Tape, NetError> {
    let layout = spec.layout();
    let last = layout.len() - 1;
    let mut pre = Vec::with_capacity(layout.len());
    let mut act: Vec<f64> = inputs.to_vec();
    for (l, lay) in layout.iter().enumerate() {
        let w = lay.w(params);
        let b = lay.b(params);
        let mut y = vec![0.0; n * lay.w_out];
        for s in 0..n {
            let a = &act[s * lay.w_in..(s + 1) * lay.w_in];
            for o in 0..lay.w_out {
                let row = &w[o * lay.w_in..(o + 1) * lay.w_in];
                y[s * lay.w_out + o] = b[o] + dot(row, a);
            }
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(NetError::NonFinite { layer: l });
        }
        act = if l < last { y.iter().map(|&v| relu(v)).collect() } else { Vec::new() };
        pre.push(y);
    }
    Ok(Tape { pre })
}

#[inline]
fn relu(y: f64) -> f64 {
    if y > 0.0 {
        y
    } else {
        0.0
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Loss value and derivative of the mean loss with respect to the outputs.
fn output_loss(spec: &ModelSpec, out: &[f64], batch: &Batch) -> (f64, Vec<f64>) {
    let n = batch.len();
    let k = spec.output_width();
    let inv_n = 1.0 / n as f64;
    let mut d_out = vec![0.0; n * k];
    let mut total = 0.0;
    match (&batch.targets, spec.loss) {
        (Targets::Values(t), LossKind::MeanSquaredError) => {
            for ((o, t), d) in out.iter().zip(t).zip(d_out.iter_mut()) {
                let r = o - t;
                total += 0.5 * r * r;
                *d = r * inv_n;
            }
        }
        (targets, LossKind::SoftmaxCrossEntropy) => {
            for s in 0..n {
                let logits = &out[s * k..(s + 1) * k];
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|v| (v - m).exp()).sum();
                let lse = m + z.ln();
                let d = &mut d_out[s * k..(s + 1) * k];
                match targets {
                    Targets::Classes(c) => {
                        total += lse - logits[c[s]];
                        for j in 0..k {
                            d[j] = ((logits[j] - lse).exp() - if j == c[s] { 1.0 } else { 0.0 }) * inv_n;
                        }
                    }
                    Targets::Values(t) => {
                        // soft labels
                        let t = &t[s * k..(s + 1) * k];
                        let tsum: f64 = t.iter().sum();
                        for j in 0..k {
                            total += t[j] * (lse - logits[j]);
                            d[j] = ((logits[j] - lse).exp() * tsum - t[j]) * inv_n;
                        }
                    }
                }
            }
        }
        (Targets::Classes(_), LossKind::MeanSquaredError) => unreachable!("rejected by check_dims"),
    }
    (total * inv_n, d_out)
}

/// Network outputs, row-major `n x w_out`.
pub fn forward(spec: &ModelSpec, params: &[f64], batch: &Batch) -> Result<Vec<f64>, NetError> {
    check_dims(spec, params, batch)?;
    let mut tape = forward_tape(spec, params, &batch.inputs, batch.len())?;
    Ok(tape.pre.pop().expect("at least one layer"))
}

/// Pre-activations of every hidden layer, each row-major `n x width`.
pub fn hidden_preactivations(spec: &ModelSpec, params: &[f64], batch: &Batch) -> Result<Vec<Vec<f64>>, NetError> {
    check_dims(spec, params, batch)?;
    let mut tape = forward_tape(spec, params, &batch.inputs, batch.len())?;
    tape.pre.pop();
    Ok(tape.pre)
}

/// Mean loss over the batch.
pub fn loss(spec: &ModelSpec, params: &[f64], batch: &Batch) -> Result<f64, NetError> {
    let out = forward(spec, params, batch)?;
    let (l, _) = output_loss(spec, &out, batch);
    if !l.is_finite() {
        return Err(NetError::NonFinite { layer: spec.n_layers() - 1 });
    }
    Ok(l)
}

/// Backward sweep. Returns the parameter gradient and, for each hidden layer,
/// `dL/dz` (before the ReLU mask).
fn backward(
    spec: &ModelSpec,
    params: &[f64],
    batch: &Batch,
    tape: &Tape,
    d_out: Vec<f64>,
    grad: &mut [f64],
    keep_dz: bool,
) -> Result<Vec<Vec<f64>>, NetError> {
    let layout = spec.layout();
    let n = batch.len();
    grad.iter_mut().for_each(|g| *g = 0.0);
    let mut dz_hidden: Vec<Vec<f64>> = vec![Vec::new(); layout.len() - 1];
    let mut dy = d_out;
    for l in (0..layout.len()).rev() {
        let lay = layout[l];
        let w = lay.w(params);
        // activations feeding this layer
        let input_act = |s: usize, i: usize| -> f64 {
            if l == 0 {
                batch.inputs[s * lay.w_in + i]
            } else {
                relu(tape.pre[l - 1][s * lay.w_in + i])
            }
        };
        {
            let (gw, gb) = grad[lay.weights..lay.biases + lay.w_out].split_at_mut(lay.w_in * lay.w_out);
            for s in 0..n {
                for o in 0..lay.w_out {
                    let d = dy[s * lay.w_out + o];
                    if d == 0.0 {
                        continue;
                    }
                    gb[o] += d;
                    let row = &mut gw[o * lay.w_in..(o + 1) * lay.w_in];
                    for (i, g) in row.iter_mut().enumerate() {
                        *g += d * input_act(s, i);
                    }
                }
            }
        }
        if l == 0 {
            break;
        }
        let mut dz = vec![0.0; n * lay.w_in];
        for s in 0..n {
            let dzs = &mut dz[s * lay.w_in..(s + 1) * lay.w_in];
            for o in 0..lay.w_out {
                let d = dy[s * lay.w_out + o];
                if d == 0.0 {
                    continue;
                }
                let row = &w[o * lay.w_in..(o + 1) * lay.w_in];
                for (z, wv) in dzs.iter_mut().zip(row) {
                    *z += d * wv;
                }
            }
        }
        if dz.iter().any(|v| !v.is_finite()) {
            return Err(NetError::NonFinite { layer: l - 1 });
        }
        let prev = &tape.pre[l - 1];
        dy = dz.iter().zip(prev).map(|(&d, &y)| if y > 0.0 { d } else { 0.0 }).collect();
        if keep_dz {
            dz_hidden[l - 1] = dz;
        }
    }
    if grad.iter().any(|v| !v.is_finite()) {
        return Err(NetError::NonFinite { layer: 0 });
    }
    Ok(dz_hidden)
}

/// Mean loss and its gradient.
pub fn gradient(spec: &ModelSpec, params: &[f64], batch: &Batch) -> Result<(f64, ParamVector), NetError> {
    let mut grad = vec![0.0; params.len()];
    let l = gradient_into(spec, params, batch, &mut grad)?;
    Ok((l, ParamVector(grad)))
}

pub fn gradient_into(spec: &ModelSpec, params: &[f64], batch: &Batch, grad: &mut [f64]) -> Result<f64, NetError> {
    check_dims(spec, params, batch)?;
    if grad.len() != params.len() {
        return Err(NetError::Dimension { what: "gradient buffer", expected: params.len(), got: grad.len() });
    }
    let tape = forward_tape(spec, params, &batch.inputs, batch.len())?;
    let (l, d_out) = output_loss(spec, tape.pre.last().expect("layers"), batch);
    if !l.is_finite() {
        return Err(NetError::NonFinite { layer: spec.n_layers() - 1 });
    }
    backward(spec, params, batch, &tape, d_out, grad, false)?;
    Ok(l)
}

/// Every hidden unit (per sample) whose pre-activation satisfies `|y| < psi`,
/// sorted by `(layer, neuron, sample)`, each with its own `∇θ y`.
pub fn relu_introspect(
    spec: &ModelSpec,
    params: &[f64],
    batch: &Batch,
    psi: f64,
) -> Result<Vec<ReluUnitRecord>, NetError> {
    if !(psi > 0.0) {
        return Err(NetError::Config(format!("threshold psi must be positive, got {psi}")));
    }
    check_dims(spec, params, batch)?;
    let n = batch.len();
    let tape = forward_tape(spec, params, &batch.inputs, n)?;
    let (_, d_out) = output_loss(spec, tape.pre.last().expect("layers"), batch);
    let mut scratch = vec![0.0; params.len()];
    let dz = backward(spec, params, batch, &tape, d_out, &mut scratch, true)?;

    let layout = spec.layout();
    let mut units = Vec::new();
    for (l, lay) in layout.iter().enumerate().take(layout.len() - 1) {
        for j in 0..lay.w_out {
            for s in 0..n {
                let y = tape.pre[l][s * lay.w_out + j];
                if y.abs() < psi {
                    units.push((l, j, s, y, dz[l][s * lay.w_out + j]));
                }
            }
        }
    }
    let records = units
        .par_iter()
        .map(|&(l, j, s, y, dl_dz)| ReluUnitRecord {
            layer: l,
            neuron: j,
            sample: s,
            y,
            dl_dz,
            grad_y: preactivation_gradient(&layout, params, batch, &tape, l, j, s),
        })
        .collect();
    Ok(records)
}

/// `∇θ y` for hidden unit `(l, j)` on sample `s`, by a single-sample backward sweep.
fn preactivation_gradient(
    layout: &[LayerLayout],
    params: &[f64],
    batch: &Batch,
    tape: &Tape,
    l: usize,
    j: usize,
    s: usize,
) -> Vec<f64> {
    let mut g = vec![0.0; params.len()];
    let mut dy = vec![0.0; layout[l].w_out];
    dy[j] = 1.0;
    for k in (0..=l).rev() {
        let lay = layout[k];
        let w = lay.w(params);
        for o in 0..lay.w_out {
            let d = dy[o];
            if d == 0.0 {
                continue;
            }
            g[lay.biases + o] += d;
            for i in 0..lay.w_in {
                let a = if k == 0 {
                    batch.inputs[s * lay.w_in + i]
                } else {
                    relu(tape.pre[k - 1][s * lay.w_in + i])
                };
                g[lay.weights + o * lay.w_in + i] += d * a;
            }
        }
        if k == 0 {
            break;
        }
        let mut next = vec![0.0; lay.w_in];
        for o in 0..lay.w_out {
            let d = dy[o];
            if d == 0.0 {
                continue;
            }
            for (i, nv) in next.iter_mut().enumerate() {
                *nv += d * w[o * lay.w_in + i];
            }
        }
        let prev = &tape.pre[k - 1];
        for (i, nv) in next.iter_mut().enumerate() {
            if prev[s * lay.w_in + i] <= 0.0 {
                *nv = 0.0;
            }
        }
        dy = next;
    }
    g
}

/// An MLP on a fixed batch, usable as a gradient oracle.
#[derive(Debug, Clone)]
pub struct MlpObjective {
    pub spec: ModelSpec,
    pub batch: Batch,
}

impl MlpObjective {
    pub fn new(spec: ModelSpec, batch: Batch) -> Self {
        Self { spec, batch }
    }

    pub fn loss(&self, params: &[f64]) -> Result<f64, NetError> {
        loss(&self.spec, params, &self.batch)
    }
}

impl Objective for MlpObjective {
    fn gradient_into(&mut self, theta: &[f64], grad: &mut [f64]) -> Result<(), EvalError> {
        gradient_into(&self.spec, theta, &self.batch, grad)?;
        Ok(())
    }
}
