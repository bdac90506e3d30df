//! Initialisation parameters for layers with non-negative weights, the
//! variance/correlation fixed-point map they solve, and its stability.
//!
//! For a constrained layer with fan-in `N` and leaky-ReLU slope `alpha`, the
//! principled parameters keep the pre-activation moments at a chosen joint
//! fixed point (var_star, rho_star):
//!
//! ```text
//! mu_w   = sqrt(rho_star / f_c(rho_star))
//! var_w  = 2 / (1 + alpha^2) / N * (1 - rho_star) * (1 - beta)
//! mu_b   = -N mu_w (1 - alpha) sqrt(var_star / 2pi)
//! var_b  = beta * (1 - rho_star) * var_star
//! ```
//!
//! `beta = 0` gives constant biases; `beta > 0` trades weight variance for
//! Gaussian bias noise while preserving the same fixed point.

use crate::error::{Error, Result};
use crate::kernels::{f_c, f_c_prime};
use crate::numerics::lognormal_params;

const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

/// Distribution parameters for one layer's weights and biases.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitParams {
    pub mu_w: f64,
    pub var_w: f64,
    pub mu_b: f64,
    pub var_b: f64,
    pub fan_in: usize,
    pub alpha: f64,
    pub rho_star: f64,
    pub var_star: f64,
    pub beta: f64,
}

impl InitParams {
    /// Log-normal parameters (mu_tilde, var_tilde) whose exp-samples have
    /// mean `mu_w` and variance `var_w`. Requires `mu_w > 0`.
    pub fn lognormal(&self) -> Result<(f64, f64)> {
        lognormal_params(self.mu_w, self.var_w)
    }
}

/// A joint (variance, correlation) state of the layerwise moment map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedPoint {
    pub var: f64,
    pub rho: f64,
}

impl FixedPoint {
    pub fn new(var: f64, rho: f64) -> Result<Self> {
        if !(var > 0.0) || !var.is_finite() {
            return Err(Error::Parameter(format!("variance must be > 0, got {var}")));
        }
        if !(rho.abs() <= 1.0) {
            return Err(Error::Parameter(format!(
                "correlation must be in [-1, 1], got {rho}"
            )));
        }
        Ok(Self { var, rho })
    }
}

/// Baseline variance-scaling schemes for unconstrained layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineScheme {
    Lecun,
    He,
}

fn check_convex_inputs(
    fan_in: usize,
    alpha: f64,
    rho_star: f64,
    var_star: f64,
    beta: f64,
) -> Result<()> {
    if fan_in < 1 {
        return Err(Error::Parameter("fan-in must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Parameter(format!("alpha must be in [0, 1], got {alpha}")));
    }
    if !(0.0..1.0).contains(&rho_star) {
        return Err(Error::Parameter(format!(
            "rho_star must be in [0, 1), got {rho_star}"
        )));
    }
    if !(var_star > 0.0) {
        return Err(Error::Parameter(format!("var_star must be > 0, got {var_star}")));
    }
    if !(0.0..1.0).contains(&beta) {
        return Err(Error::Parameter(format!("beta must be in [0, 1), got {beta}")));
    }
    Ok(())
}

/// Principled parameters for a constrained (non-negative weight) layer.
pub fn convex_init_params(
    fan_in: usize,
    alpha: f64,
    rho_star: f64,
    var_star: f64,
    beta: f64,
) -> Result<InitParams> {
    check_convex_inputs(fan_in, alpha, rho_star, var_star, beta)?;
    let fc = f_c(rho_star, fan_in, alpha)?;
    if rho_star > 0.0 && fc <= 0.0 {
        return Err(Error::Infeasible(format!(
            "f_c({rho_star}) = {fc} <= 0 admits no real weight mean"
        )));
    }
    let n = fan_in as f64;
    let mu_w = if rho_star == 0.0 { 0.0 } else { (rho_star / fc).sqrt() };
    let var_w = 2.0 / (1.0 + alpha * alpha) / n * (1.0 - rho_star) * (1.0 - beta);
    // Sign fixed negative: centring requires mu_b = -N mu_w E[phi(s^-)] and
    // constrained layers need mu_w > 0.
    let mu_b = -n * mu_w * (1.0 - alpha) * (var_star / TWO_PI).sqrt();
    let var_b = beta * (1.0 - rho_star) * var_star;
    Ok(InitParams {
        mu_w,
        var_w,
        mu_b,
        var_b,
        fan_in,
        alpha,
        rho_star,
        var_star,
        beta,
    })
}

/// LeCun or He parameters for unconstrained layers (centred weights, zero bias).
pub fn baseline_init_params(scheme: BaselineScheme, fan_in: usize, alpha: f64) -> Result<InitParams> {
    if fan_in < 1 {
        return Err(Error::Parameter("fan-in must be >= 1".into()));
    }
    let n = fan_in as f64;
    let var_w = match scheme {
        BaselineScheme::Lecun => 1.0 / n,
        BaselineScheme::He => 2.0 / ((1.0 + alpha * alpha) * n),
    };
    Ok(InitParams {
        mu_w: 0.0,
        var_w,
        mu_b: 0.0,
        var_b: 0.0,
        fan_in,
        alpha,
        rho_star: 0.0,
        var_star: 1.0,
        beta: 0.0,
    })
}

/// One layer of the joint (variance, correlation) moment map:
///
/// ```text
/// cov' = mu_w^2 var f_c(rho)
/// var' = var_b + var_w N (1 + alpha^2) var / 2 + cov'
/// rho' = cov' / var
/// ```
///
/// The correlation update is normalised by the input variance (the layer's
/// second-moment scale), which makes the map the one whose Jacobian has the
/// closed-form eigenvalues of [`jacobian_eigenvalues`]; at the fixed point
/// `var' = var`, so both normalisations coincide there.
pub fn fixed_point_map(state: FixedPoint, params: &InitParams) -> Result<FixedPoint> {
    let FixedPoint { var, rho } = state;
    let fc = f_c(rho, params.fan_in, params.alpha)?;
    let n = params.fan_in as f64;
    let cov_next = params.mu_w * params.mu_w * var * fc;
    let var_next = params.var_b
        + params.var_w * n * (1.0 + params.alpha * params.alpha) * var / 2.0
        + cov_next;
    if !(var_next > 0.0) || !var_next.is_finite() {
        return Err(Error::Degenerate(format!(
            "propagated variance {var_next} is not positive"
        )));
    }
    let rho_next = cov_next / var;
    if rho_next.abs() > 1.0 {
        return Err(Error::Degenerate(format!(
            "propagated correlation {rho_next} left [-1, 1]"
        )));
    }
    FixedPoint::new(var_next, rho_next)
}

/// Eigenvalues of the moment-map Jacobian at the fixed point:
/// `lambda_1 = rho_star`, `lambda_2 = rho_star f_c'(rho_star) / f_c(rho_star)`.
pub fn jacobian_eigenvalues(rho_star: f64, fan_in: usize, alpha: f64) -> Result<(f64, f64)> {
    let fc = f_c(rho_star, fan_in, alpha)?;
    if fc <= 0.0 {
        return Err(Error::Degenerate(format!(
            "f_c({rho_star}) = {fc} is not positive"
        )));
    }
    let lambda2 = rho_star * f_c_prime(rho_star, fan_in, alpha)? / fc;
    Ok((rho_star, lambda2))
}

/// Largest fan-in for which the rho_star = 1/2, alpha = 0 fixed point is
/// stable: 1 + (2 pi - 2) / (2 - sqrt(3)), about 17.
pub fn stability_threshold() -> f64 {
    1.0 + (TWO_PI - 2.0) / (2.0 - 3.0f64.sqrt())
}
