//! Curvature estimation for loss landscapes with dense gradient discontinuities,
//! and the Alice optimizer built on it.
//!
//! * [`netkit`] – reverse-mode gradients for ReLU MLPs plus per-unit introspection.
//! * [`glass`] – glass density, loss bounds, optimal diagonal kernels and the
//!   gradient-variation power-law probe.
//! * [`alice`] – topography updates, the glass-modified quasi-Newton step,
//!   Nesterov coefficients, step limits and reference Adam / SGD-M.
//! * [`oracles`] – independent Monte-Carlo and brute-force checks.
//! * [`harness`] – seeded experiments, CSV artifacts and min/median/max summaries.
//! * [`cli`] – the `glassopt` command line.

// `!(x > 0.0)` style checks are there to reject NaN as well
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod alice;
pub mod cli;
pub mod glass;
pub mod harness;
pub mod netkit;
pub mod objective;
pub mod oracles;
pub mod report;
pub mod rng;

pub use objective::{EvalError, Objective};
