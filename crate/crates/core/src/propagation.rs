//! Layerwise moment propagation: analytic recursions for the mean, variance
//! and feature correlation of pre-activations (forward) and of the deltas
//! (backward), next to empirical probes that measure the same statistics on a
//! realised network.
//!
//! The analytic recursion treats its input as the pre-activations of a
//! previous layer: every step applies the activation and then one affine
//! layer. The closed forms assume centred Gaussian pre-activations; layers
//! whose input mean is large relative to its standard deviation are flagged.

use crate::error::{Error, Result};
use crate::init::InitParams;
use crate::kernels::{lrelu_deriv_kernel, lrelu_kernel, lrelu_mean, lrelu_sqmean};
use crate::network::Network;
use crate::numerics::{gaussian_sample, Matrix, RngState};

/// Analytic (mean, variance, correlation) of one layer of pre-activations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentState {
    pub mean: f64,
    pub var: f64,
    pub rho: f64,
}

impl MomentState {
    pub fn new(mean: f64, var: f64, rho: f64) -> Result<Self> {
        if !(var >= 0.0) {
            return Err(Error::Parameter(format!("variance must be >= 0, got {var}")));
        }
        if !(rho.abs() <= 1.0) {
            return Err(Error::Parameter(format!("correlation must be in [-1, 1], got {rho}")));
        }
        Ok(Self { mean, var, rho })
    }
}

/// Result of the analytic forward recursion.
#[derive(Debug, Clone)]
pub struct ForwardStats {
    /// One state per layer, in propagation order.
    pub layers: Vec<MomentState>,
    /// Indices of layers whose *input* violated the centred-Gaussian regime
    /// (|mean| > 0.1 sqrt(var)); the closed forms are approximations there.
    pub noncentred_layers: Vec<usize>,
}

/// Analytic moments of the backward-propagated deltas at one layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeltaMomentState {
    /// E[delta_j]
    pub mean: f64,
    /// E[delta_j^2]
    pub sqmean: f64,
    /// E[delta_i delta_j] for i != j
    pub mixed: f64,
}

/// Empirically measured statistics of one layer's pre-activations.
#[derive(Debug, Clone)]
pub struct LayerStats {
    pub layer: usize,
    pub mean: f64,
    pub var: f64,
    /// Mean off-diagonal entry of the feature correlation matrix.
    pub mean_offdiag_corr: f64,
    /// Raw pooled second moment E[s^2] over all entries (no centering).
    pub second_moment: f64,
    /// Raw pooled mixed moment E[s_i s_j], i != j, over batch and pairs.
    /// `mixed_moment / second_moment` estimates the ensemble correlation the
    /// analytic recursion tracks; the Pearson estimator above instead
    /// conditions on the realised weights and can sit far higher when
    /// per-feature loadings are heterogeneous.
    pub mixed_moment: f64,
    /// Features with (numerically) zero variance; their correlation entries
    /// are reported as 0.
    pub degenerate_features: usize,
    /// Fixed-range histogram: underflow bin, `n_bins` interior bins over
    /// [-3 sigma, +3 sigma], overflow bin. Counts sum to batch x width.
    pub histogram: Vec<u64>,
    pub hist_lo: f64,
    pub hist_hi: f64,
    /// Full correlation matrix, retained only for widths <= 64.
    pub corr_matrix: Option<Matrix>,
}

/// One step of the forward recursion: activation then affine layer.
fn forward_step(state: MomentState, p: &InitParams) -> Result<(MomentState, bool)> {
    let MomentState { mean, var, rho } = state;
    let noncentred = mean.abs() > 0.1 * var.sqrt();
    let n = p.fan_in as f64;
    let e_phi = lrelu_mean(var, p.alpha)?;
    let e_phi_sq = lrelu_sqmean(var, p.alpha)?;
    let e_phi1_phi2 = lrelu_kernel(rho, var, p.alpha)?;
    let var_phi = e_phi_sq - e_phi * e_phi;
    let cov_phi = e_phi1_phi2 - e_phi * e_phi;
    let mean_next = n * p.mu_w * e_phi + p.mu_b;
    let cov_next = p.mu_w * p.mu_w * n * (var_phi + (n - 1.0) * cov_phi);
    let var_next = p.var_b + p.var_w * n * e_phi_sq + cov_next;
    if !(var_next > 0.0) || !var_next.is_finite() {
        return Err(Error::Degenerate(format!(
            "propagated variance {var_next} is not positive"
        )));
    }
    let rho_next = cov_next / var_next;
    Ok((
        MomentState {
            mean: mean_next,
            var: var_next,
            rho: rho_next,
        },
        noncentred,
    ))
}

/// Propagate (mean, variance, correlation) through a stack of layers.
///
/// `params[i]` describes layer i; its `fan_in` must equal the width feeding
/// that layer. The input state describes the pre-activations entering the
/// first listed layer.
pub fn analytic_forward_stats(params: &[InitParams], input: MomentState) -> Result<ForwardStats> {
    let mut layers = Vec::with_capacity(params.len());
    let mut noncentred_layers = Vec::new();
    let mut state = input;
    for (i, p) in params.iter().enumerate() {
        let (next, noncentred) = forward_step(state, p)?;
        if noncentred {
            noncentred_layers.push(i);
        }
        layers.push(next);
        state = next;
    }
    Ok(ForwardStats {
        layers,
        noncentred_layers,
    })
}

/// Propagate delta moments from the output layer down to the first.
///
/// * `params[i]` are layer i's weight statistics, `stack_widths` the widths
///   [input, w_1, .., w_L] of the same stack,
/// * `forward_states` is the analytic forward result for the stack (used for
///   the correlation entering each layer's derivative kernel),
/// * `output_delta` describes the deltas injected at the output.
///
/// Returns one state per layer in output-to-input order; the first entry is
/// the injected state, matching [`Network::backward_deltas`].
pub fn analytic_backward_stats(
    params: &[InitParams],
    stack_widths: &[usize],
    forward_states: &[MomentState],
    output_delta: DeltaMomentState,
) -> Result<Vec<DeltaMomentState>> {
    let depth = params.len();
    if stack_widths.len() != depth + 1 {
        return Err(Error::Shape("stack_widths must have one more entry than params".into()));
    }
    if forward_states.len() != depth {
        return Err(Error::Shape("forward_states must match params length".into()));
    }
    let mut out = Vec::with_capacity(depth);
    out.push(output_delta);
    let mut delta = output_delta;
    // Delta at pre-activation j comes from layer j+1; phi' acts on the
    // pre-activations at j, whose correlation is forward_states[j].rho.
    for j in (0..depth - 1).rev() {
        let p = &params[j + 1];
        let m = stack_widths[j + 2] as f64;
        let rho_below = forward_states[j].rho;
        let k1 = lrelu_deriv_kernel(1.0, p.alpha)?;
        let k_rho = lrelu_deriv_kernel(rho_below, p.alpha)?;
        let e_phi_prime = (1.0 + p.alpha) / 2.0;
        let w = stack_widths[j + 1] as f64; // fan-in of layer j+1 = width at j
        debug_assert_eq!(p.fan_in, stack_widths[j + 1]);
        let sum_all = m * delta.sqmean + m * (m - 1.0) * delta.mixed;
        let mean_next = m * p.mu_w * e_phi_prime * delta.mean;
        let sq_next = k1 * (p.var_w * m * delta.sqmean + p.mu_w * p.mu_w * sum_all);
        let mixed_next = if w > 1.0 {
            p.mu_w * p.mu_w * k_rho * sum_all
        } else {
            0.0
        };
        delta = DeltaMomentState {
            mean: mean_next,
            sqmean: sq_next,
            mixed: mixed_next,
        };
        out.push(delta);
    }
    // The delta at the stack input would require the activation below the
    // first layer, which is outside the stack; like the empirical probe, the
    // recursion stops at the first layer's pre-activations.
    if depth == 0 {
        out.clear();
    }
    Ok(out)
}

/// Equicorrelated Gaussian batch: every row is a sample whose features share
/// pairwise correlation `rho` (via a common factor) with the given mean and
/// variance.
pub fn sample_equicorrelated(
    state: &mut RngState,
    rows: usize,
    cols: usize,
    mean: f64,
    var: f64,
    rho: f64,
) -> Result<Matrix> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::Parameter(format!(
            "equicorrelated construction needs rho in [0, 1], got {rho}"
        )));
    }
    if !(var >= 0.0) {
        return Err(Error::Parameter(format!("variance must be >= 0, got {var}")));
    }
    let sd = var.sqrt();
    let shared_w = (rho).sqrt();
    let indep_w = (1.0 - rho).sqrt();
    let mut m = gaussian_sample(state, 0.0, 1.0, (rows, cols))?;
    for mut row in m.rows_mut() {
        let g = state.next_gaussian();
        for v in row.iter_mut() {
            *v = mean + sd * (shared_w * g + indep_w * *v);
        }
    }
    Ok(m)
}

fn column_means(m: &Matrix) -> Vec<f64> {
    let b = m.nrows() as f64;
    m.columns().into_iter().map(|c| c.sum() / b).collect()
}

/// Measure per-layer pre-activation statistics of a forward pass.
pub fn empirical_layer_stats(net: &Network, batch: &Matrix, n_bins: usize) -> Result<Vec<LayerStats>> {
    if batch.nrows() < 100 {
        return Err(Error::Parameter(format!(
            "empirical statistics need at least 100 rows, got {}",
            batch.nrows()
        )));
    }
    if n_bins == 0 {
        return Err(Error::Parameter("histogram needs at least one bin".into()));
    }
    let trace = net.forward(batch)?;
    let mut out = Vec::with_capacity(trace.pre_activations.len());
    for (layer, s) in trace.pre_activations.iter().enumerate() {
        let n_entries = s.len() as f64;
        let mean = s.sum() / n_entries;
        let var = s.mapv(|v| (v - mean) * (v - mean)).sum() / n_entries;
        let sd = var.sqrt();
        let second_moment = s.mapv(|v| v * v).sum() / n_entries;
        let wcols = s.ncols() as f64;
        let mixed_moment = if wcols > 1.0 {
            let mut acc = 0.0;
            for row in s.rows() {
                let rs: f64 = row.sum();
                let rsq: f64 = row.iter().map(|v| v * v).sum();
                acc += (rs * rs - rsq) / (wcols * (wcols - 1.0));
            }
            acc / s.nrows() as f64
        } else {
            0.0
        };

        // Feature covariance across the batch.
        let b = s.nrows() as f64;
        let mu = column_means(s);
        let mut centred = s.clone();
        for (mut col, m) in centred.columns_mut().into_iter().zip(mu.iter()) {
            col.mapv_inplace(|v| v - m);
        }
        let cov = centred.t().dot(&centred) / b;
        let w = cov.nrows();
        let scale = var.max(1e-300);
        let mut degenerate = 0usize;
        let sds: Vec<f64> = (0..w)
            .map(|i| {
                let d = cov[[i, i]];
                if d <= 1e-12 * scale {
                    degenerate += 1;
                    0.0
                } else {
                    d.sqrt()
                }
            })
            .collect();
        let mut corr_sum = 0.0;
        let mut corr_matrix = if w <= 64 { Some(Matrix::eye(w)) } else { None };
        for i in 0..w {
            for j in 0..w {
                if i == j {
                    continue;
                }
                let denom = sds[i] * sds[j];
                let c = if denom > 0.0 { cov[[i, j]] / denom } else { 0.0 };
                corr_sum += c;
                if let Some(cm) = corr_matrix.as_mut() {
                    cm[[i, j]] = c;
                }
            }
        }
        let pairs = (w * (w - 1)) as f64;
        let mean_offdiag_corr = if pairs > 0.0 { corr_sum / pairs } else { 0.0 };

        // Histogram over [-3 sigma, +3 sigma] plus overflow bins.
        let (lo, hi) = if sd > 0.0 {
            (-3.0 * sd, 3.0 * sd)
        } else {
            (mean - 1.0, mean + 1.0)
        };
        let mut histogram = vec![0u64; n_bins + 2];
        let width = (hi - lo) / n_bins as f64;
        for &v in s.iter() {
            let idx = if v < lo {
                0
            } else if v >= hi {
                n_bins + 1
            } else {
                1 + ((v - lo) / width) as usize
            };
            histogram[idx.min(n_bins + 1)] += 1;
        }

        out.push(LayerStats {
            layer,
            mean,
            var,
            mean_offdiag_corr,
            second_moment,
            mixed_moment,
            degenerate_features: degenerate,
            histogram,
            hist_lo: lo,
            hist_hi: hi,
            corr_matrix,
        });
    }
    Ok(out)
}

/// Inject unit-variance uncorrelated Gaussian deltas at the output and
/// measure the delta moments at every layer, output-to-input.
pub fn empirical_backward_stats(
    net: &Network,
    batch: &Matrix,
    rng: &mut RngState,
) -> Result<Vec<DeltaMomentState>> {
    let trace = net.forward(batch)?;
    let grad_out = gaussian_sample(rng, 0.0, 1.0, (batch.nrows(), net.output_width()))?;
    let deltas = net.backward_deltas(&trace, &grad_out)?;
    Ok(deltas.iter().map(|d| measure_delta_moments(d)).collect())
}

/// Empirical (mean, square mean, mixed moment) of a delta matrix.
pub fn measure_delta_moments(delta: &Matrix) -> DeltaMomentState {
    let n_entries = delta.len() as f64;
    let mean = delta.sum() / n_entries;
    let sqmean = delta.mapv(|v| v * v).sum() / n_entries;
    let w = delta.ncols() as f64;
    let mixed = if w > 1.0 {
        let mut acc = 0.0;
        for row in delta.rows() {
            let s: f64 = row.sum();
            let sq: f64 = row.iter().map(|v| v * v).sum();
            acc += (s * s - sq) / (w * (w - 1.0));
        }
        acc / delta.nrows() as f64
    } else {
        0.0
    };
    DeltaMomentState { mean, sqmean, mixed }
}
