//! Signal propagation theory and principled initialisation for input-convex
//! neural networks (ICNNs).
//!
//! ICNNs keep every output convex in the input by using convex non-decreasing
//! activations and non-negative weight matrices after the first layer. Because
//! the constrained weights cannot be centred, the usual variance-scaling
//! initialisations break down. This crate tracks the mean, variance and
//! feature correlation of pre-activations through layers with non-centred
//! weights, solves the resulting fixed-point equations for the weight and bias
//! distribution, and samples that distribution (log-normal, or Gaussian
//! log-weights under an exponential reparameterisation).
//!
//! The crate is organised around the derivation pipeline:
//!
//! * [`numerics`] — deterministic splittable RNG and dense linear algebra.
//! * [`kernels`] — closed-form Gaussian expectations of (leaky-)ReLU and its
//!   derivative, the correlation-propagation function `f_c`, and a Monte-Carlo
//!   oracle that independently checks every closed form.
//! * [`init`] — the initialisation parameters, the variance/correlation
//!   fixed-point map and its Jacobian stability analysis.
//! * [`network`] — ICNN and baseline construction, forward/backward with full
//!   traces, non-negativity mechanisms, convexity verification, checkpoints.
//! * [`propagation`] — analytic layerwise moment recursions (forward and
//!   backward) next to empirical per-layer probes.
//! * [`training`] — IDX/synthetic data, cross-entropy, Adam, training loops
//!   with learning-curve export.
//! * [`levelset`] — level-set traversal between two inputs of a convex output.
//! * [`cli`] — the `convexinit` command-line front end and SVG rendering.

pub mod cli;
pub mod error;
pub mod init;
pub mod kernels;
pub mod levelset;
pub mod network;
pub mod numerics;
pub mod propagation;
pub mod training;

pub use error::{Error, Result};
