//! Gaussian expectation kernels of the leaky-ReLU family.
//!
//! For zero-mean bivariate Gaussian pre-activations with variance `var` and
//! correlation `rho`, these closed forms give E[phi(s1) phi(s2)] and friends,
//! plus the correlation-propagation function `f_c` that drives the
//! fixed-point analysis in [`crate::init`]. A Monte-Carlo oracle estimates the
//! same quantities from samples so every closed form can be verified
//! independently.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::RngState;

const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

/// Leaky ReLU with slope `alpha` on the negative half-line.
#[inline]
pub fn lrelu(x: f64, alpha: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        alpha * x
    }
}

/// Derivative of the leaky ReLU (1 at x = 0 by convention).
#[inline]
pub fn lrelu_deriv(x: f64, alpha: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        alpha
    }
}

fn check_rho(rho: f64) -> Result<()> {
    if !(rho.abs() <= 1.0) {
        return Err(Error::Parameter(format!("correlation must be in [-1, 1], got {rho}")));
    }
    Ok(())
}

fn check_var(var: f64) -> Result<()> {
    if !(var >= 0.0) || !var.is_finite() {
        return Err(Error::Parameter(format!("variance must be >= 0, got {var}")));
    }
    Ok(())
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Parameter(format!(
            "leaky-ReLU slope must be in [0, 1], got {alpha}"
        )));
    }
    Ok(())
}

/// arccos with the argument clamped to [-1, 1] to absorb floating-point drift.
#[inline]
fn acos_clamped(x: f64) -> f64 {
    x.clamp(-1.0, 1.0).acos()
}

/// E[relu(s1) relu(s2)] = (var / 2pi) (sqrt(1 - rho^2) + rho arccos(-rho)).
pub fn relu_kernel(rho: f64, var: f64) -> Result<f64> {
    check_rho(rho)?;
    check_var(var)?;
    let root = (1.0 - rho * rho).max(0.0).sqrt();
    Ok(var / TWO_PI * (root + rho * acos_clamped(-rho)))
}

/// E[lrelu(s1) lrelu(s2)]; reduces to [`relu_kernel`] at alpha = 0 and to
/// `var * rho` for the identity activation (alpha = 1).
pub fn lrelu_kernel(rho: f64, var: f64, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    let relu = relu_kernel(rho, var)?;
    Ok((1.0 - alpha) * (1.0 - alpha) * relu + alpha * var * rho)
}

/// E[lrelu(s)] = (1 - alpha) sqrt(var / 2pi) for centred Gaussian input.
pub fn lrelu_mean(var: f64, alpha: f64) -> Result<f64> {
    check_var(var)?;
    check_alpha(alpha)?;
    Ok((1.0 - alpha) * (var / TWO_PI).sqrt())
}

/// Second raw moment E[lrelu(s)^2] = (1 + alpha^2) var / 2; equals the kernel
/// at rho = 1.
pub fn lrelu_sqmean(var: f64, alpha: f64) -> Result<f64> {
    check_var(var)?;
    check_alpha(alpha)?;
    Ok(0.5 * (1.0 + alpha * alpha) * var)
}

/// E[lrelu'(s1) lrelu'(s2)] = (1 - alpha)^2 arccos(-rho) / 2pi + alpha.
pub fn lrelu_deriv_kernel(rho: f64, alpha: f64) -> Result<f64> {
    check_rho(rho)?;
    check_alpha(alpha)?;
    Ok((1.0 - alpha) * (1.0 - alpha) * acos_clamped(-rho) / TWO_PI + alpha)
}

/// Correlation-propagation function: the off-diagonal second moment of the
/// next layer is `mu_w^2 * E[(s^-)^2] * f_c(corr)`.
pub fn f_c(rho: f64, fan_in: usize, alpha: f64) -> Result<f64> {
    check_rho(rho)?;
    check_alpha(alpha)?;
    if fan_in < 1 {
        return Err(Error::Parameter("f_c requires fan-in >= 1".into()));
    }
    let n = fan_in as f64;
    let one_m_a2 = (1.0 - alpha) * (1.0 - alpha);
    let root = (1.0 - rho * rho).max(0.0).sqrt();
    let kernel_term = one_m_a2 * (root + rho * acos_clamped(-rho)) + TWO_PI * alpha * rho;
    Ok(n / TWO_PI
        * ((1.0 + alpha * alpha) * std::f64::consts::PI - n * one_m_a2 + (n - 1.0) * kernel_term))
}

/// Derivative of [`f_c`] in rho:
/// (N / 2pi) (N - 1) (1 - alpha)^2 arccos(-rho) + N (N - 1) alpha.
pub fn f_c_prime(rho: f64, fan_in: usize, alpha: f64) -> Result<f64> {
    check_rho(rho)?;
    check_alpha(alpha)?;
    if fan_in < 1 {
        return Err(Error::Parameter("f_c_prime requires fan-in >= 1".into()));
    }
    let n = fan_in as f64;
    Ok(n / TWO_PI * (n - 1.0) * (1.0 - alpha) * (1.0 - alpha) * acos_clamped(-rho)
        + n * (n - 1.0) * alpha)
}

/// Which expectation the Monte-Carlo oracle estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum McMode {
    /// E[phi(s1) phi(s2)]
    Value,
    /// E[phi'(s1) phi'(s2)]
    Derivative,
    /// E[phi(s1)]
    Mean,
}

/// Neumaier-compensated accumulator; shard sums stay exact enough that the
/// merge order (fixed by shard index) is the only ordering that matters.
#[derive(Debug, Clone, Copy, Default)]
struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    fn add(&mut self, value: f64) {
        let t = self.sum + value;
        if self.sum.abs() >= value.abs() {
            self.comp += (self.sum - t) + value;
        } else {
            self.comp += (value - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

const MC_SHARD: usize = 1 << 18;

/// Monte-Carlo estimate of a kernel expectation with its standard error.
///
/// Samples (s1, s2) from a bivariate normal with variance `var` and
/// correlation `rho`, sharded over child RNG streams and merged in shard
/// order, so the result is independent of thread count.
pub fn kernel_mc_oracle(
    state: &mut RngState,
    rho: f64,
    var: f64,
    alpha: f64,
    n_samples: usize,
    mode: McMode,
) -> Result<(f64, f64)> {
    check_rho(rho)?;
    check_var(var)?;
    check_alpha(alpha)?;
    if n_samples < 1000 {
        return Err(Error::Parameter(format!(
            "kernel_mc_oracle requires n_samples >= 1000, got {n_samples}"
        )));
    }
    let sd = var.sqrt();
    let cross = (1.0 - rho * rho).max(0.0).sqrt();
    let n_shards = n_samples.div_ceil(MC_SHARD);
    let shards: Vec<(RngState, usize)> = (0..n_shards)
        .map(|i| {
            let count = MC_SHARD.min(n_samples - i * MC_SHARD);
            (state.fork(i as u64), count)
        })
        .collect();

    let partials: Vec<(CompensatedSum, CompensatedSum)> = shards
        .into_par_iter()
        .map(|(mut rng, count)| {
            let mut sum = CompensatedSum::default();
            let mut sumsq = CompensatedSum::default();
            for _ in 0..count {
                let (z1, z2) = rng.next_gaussian_pair();
                let s1 = sd * z1;
                let s2 = sd * (rho * z1 + cross * z2);
                let stat = match mode {
                    McMode::Value => lrelu(s1, alpha) * lrelu(s2, alpha),
                    McMode::Derivative => lrelu_deriv(s1, alpha) * lrelu_deriv(s2, alpha),
                    McMode::Mean => lrelu(s1, alpha),
                };
                sum.add(stat);
                sumsq.add(stat * stat);
            }
            (sum, sumsq)
        })
        .collect();

    let mut total = CompensatedSum::default();
    let mut total_sq = CompensatedSum::default();
    for (s, sq) in partials {
        total.add(s.value());
        total_sq.add(sq.value());
    }
    let n = n_samples as f64;
    let estimate = total.value() / n;
    let sample_var = ((total_sq.value() - n * estimate * estimate) / (n - 1.0)).max(0.0);
    Ok((estimate, (sample_var / n).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;

    const PI: f64 = std::f64::consts::PI;

    /// Retry-once wrapper for 3-sigma Monte-Carlo agreement checks.
    fn assert_mc_agrees(closed: f64, rho: f64, var: f64, alpha: f64, mode: McMode, seed: u64) {
        for attempt in 0..2 {
            let mut rng = RngState::new(seed.wrapping_add(attempt * 0x9E37));
            let (est, se) = kernel_mc_oracle(&mut rng, rho, var, alpha, 1_000_000, mode).unwrap();
            if (closed - est).abs() <= 3.0 * se.max(1e-15) {
                return;
            }
            if attempt == 1 {
                panic!(
                    "MC disagreement after retry: closed {closed}, est {est}, se {se} \
                     (rho={rho}, var={var}, alpha={alpha}, mode={mode:?})"
                );
            }
        }
    }

    #[test]
    fn relu_kernel_analytic_points() {
        assert!((relu_kernel(1.0, 2.0).unwrap() - 1.0).abs() < 1e-15);
        assert!((relu_kernel(0.0, 1.0).unwrap() - 1.0 / TWO_PI).abs() < 1e-15);
        // frozen: (1/2pi)(sqrt(3)/2 + arccos(-1/2)/2)
        assert!((relu_kernel(0.5, 1.0).unwrap() - 0.304498890522114679).abs() < 1e-15);
        assert!(relu_kernel(1.5, 1.0).is_err());
        assert!(relu_kernel(0.0, -1.0).is_err());
    }

    #[test]
    fn relu_kernel_mc_agreement() {
        assert_mc_agrees(relu_kernel(0.5, 1.0).unwrap(), 0.5, 1.0, 0.0, McMode::Value, 100);
    }

    #[test]
    fn lrelu_kernel_analytic_points() {
        for &rho in &[-0.7, 0.0, 0.3, 1.0] {
            for &var in &[0.5, 1.0, 2.0] {
                let k = lrelu_kernel(rho, var, 1.0).unwrap();
                assert!((k - var * rho).abs() < 1e-15, "identity activation");
            }
        }
        assert!(lrelu_kernel(-1.0, 1.0, 0.0).unwrap().abs() < 1e-15);
        assert!(lrelu_kernel(0.0, 1.0, 1.5).is_err());
    }

    #[test]
    fn lrelu_kernel_mc_grid() {
        let mut seed = 2000;
        for &rho in &[-0.9, -0.3, 0.0, 0.4, 0.9] {
            for &alpha in &[0.01, 0.2] {
                for &var in &[0.5, 2.0] {
                    seed += 1;
                    let k = lrelu_kernel(rho, var, alpha).unwrap();
                    assert_mc_agrees(k, rho, var, alpha, McMode::Value, seed);
                }
            }
        }
    }

    #[test]
    fn lrelu_mean_analytic_points() {
        assert!((lrelu_mean(TWO_PI, 0.0).unwrap() - 1.0).abs() < 1e-15);
        assert!(lrelu_mean(3.7, 1.0).unwrap().abs() < 1e-15);
        // frozen: 0.99 / sqrt(2 pi)
        assert!((lrelu_mean(1.0, 0.01).unwrap() - 0.394952857597418351).abs() < 1e-15);
        assert_mc_agrees(lrelu_mean(1.0, 0.01).unwrap(), 0.0, 1.0, 0.01, McMode::Mean, 300);
    }

    #[test]
    fn lrelu_sqmean_analytic_and_kernel_consistency() {
        assert!((lrelu_sqmean(2.0, 0.0).unwrap() - 1.0).abs() < 1e-15);
        assert!((lrelu_sqmean(1.0, 1.0).unwrap() - 1.0).abs() < 1e-15);
        for &var in &[0.25, 1.0, 4.0] {
            for &alpha in &[0.0, 0.1, 0.5, 1.0] {
                let a = lrelu_sqmean(var, alpha).unwrap();
                let b = lrelu_kernel(1.0, var, alpha).unwrap();
                assert!((a - b).abs() < 1e-13, "sqmean {a} vs kernel at rho=1 {b}");
            }
        }
    }

    #[test]
    fn deriv_kernel_analytic_points() {
        assert!((lrelu_deriv_kernel(1.0, 0.0).unwrap() - 0.5).abs() < 1e-15);
        for &rho in &[-1.0, -0.2, 0.6, 1.0] {
            assert!((lrelu_deriv_kernel(rho, 1.0).unwrap() - 1.0).abs() < 1e-15);
        }
        assert!((lrelu_deriv_kernel(0.0, 0.0).unwrap() - 0.25).abs() < 1e-15);
        assert_mc_agrees(0.25, 0.0, 1.0, 0.0, McMode::Derivative, 400);
    }

    #[test]
    fn f_c_analytic_points() {
        for &n in &[1usize, 2, 10, 100] {
            let nf = n as f64;
            let at0 = f_c(0.0, n, 0.0).unwrap();
            assert!((at0 - nf * (PI - 1.0) / TWO_PI).abs() < 1e-12 * nf);
            let at1 = f_c(1.0, n, 0.0).unwrap();
            assert!((at1 - nf * nf * (PI - 1.0) / TWO_PI).abs() < 1e-12 * nf * nf);
        }
        assert!(f_c(0.0, 0, 0.0).is_err());
    }

    /// Independent route for f_c at rho = 1/2 (general alpha).
    fn f_c_half_reference(fan_in: usize, alpha: f64) -> f64 {
        let n = fan_in as f64;
        let a2 = (1.0 - alpha) * (1.0 - alpha);
        n / (12.0 * PI)
            * (a2 * (6.0 * (PI - 1.0) + (n - 1.0) * (3.0 * 3.0f64.sqrt() + 2.0 * PI - 6.0))
                + 6.0 * (n + 1.0) * PI * alpha)
    }

    #[test]
    fn f_c_matches_half_point_reference() {
        let got = f_c(0.5, 2, 0.0).unwrap();
        assert!((got - 0.972378008676648015).abs() < 1e-14);
        for &n in &[2usize, 5, 17, 100, 784] {
            for &alpha in &[0.0, 0.1, 0.3, 1.0] {
                let general = f_c(0.5, n, alpha).unwrap();
                let reference = f_c_half_reference(n, alpha);
                assert!(
                    (general - reference).abs() <= 1e-11 * reference.abs().max(1.0),
                    "N={n} alpha={alpha}: {general} vs {reference}"
                );
            }
        }
    }

    #[test]
    fn f_c_prime_matches_finite_differences() {
        let h = 1e-6;
        for &n in &[2usize, 8, 64] {
            for &alpha in &[0.0, 0.25, 0.9] {
                for &rho in &[-0.9, -0.4, 0.0, 0.5, 0.9] {
                    let fd = (f_c(rho + h, n, alpha).unwrap() - f_c(rho - h, n, alpha).unwrap())
                        / (2.0 * h);
                    let an = f_c_prime(rho, n, alpha).unwrap();
                    assert!(
                        (fd - an).abs() <= 1e-6 * an.abs().max(1.0),
                        "N={n} alpha={alpha} rho={rho}: fd {fd} vs {an}"
                    );
                }
            }
        }
    }

    #[test]
    fn kernel_monotone_and_continuous_in_rho() {
        for &alpha in &[0.0, 0.3, 1.0] {
            for &var in &[0.5, 1.0, 2.0] {
                let mut prev = lrelu_kernel(-1.0, var, alpha).unwrap();
                let mut rho: f64 = -1.0;
                while rho < 1.0 {
                    rho = (rho + 1e-3).min(1.0);
                    let cur = lrelu_kernel(rho, var, alpha).unwrap();
                    assert!(cur + 1e-12 >= prev, "kernel decreased at rho={rho}");
                    assert!((cur - prev).abs() < 5e-3 * var, "jump at rho={rho}");
                    prev = cur;
                }
            }
        }
    }

    #[test]
    fn kernel_at_zero_rho_equals_squared_mean() {
        for &alpha in &[0.0, 0.2, 0.7, 1.0] {
            for &var in &[0.1, 1.0, 5.0] {
                let k0 = lrelu_kernel(0.0, var, alpha).unwrap();
                let m = lrelu_mean(var, alpha).unwrap();
                assert!((k0 - m * m).abs() < 1e-12, "alpha={alpha} var={var}");
            }
        }
    }

    #[test]
    fn mc_oracle_trivial_targets() {
        let mut rng = RngState::new(5);
        let (est, se) = kernel_mc_oracle(&mut rng, 1.0, 1.0, 0.0, 1_000_000, McMode::Value).unwrap();
        assert!((est - 0.5).abs() <= 3.0 * se);
        let mut rng = RngState::new(6);
        let (est, se) = kernel_mc_oracle(&mut rng, 0.0, 1.0, 0.0, 1_000_000, McMode::Mean).unwrap();
        assert!((est - 1.0 / TWO_PI.sqrt()).abs() <= 3.0 * se);
        assert!(kernel_mc_oracle(&mut rng, 0.0, 1.0, 0.0, 10, McMode::Mean).is_err());
        assert!(kernel_mc_oracle(&mut rng, 1.5, 1.0, 0.0, 10_000, McMode::Mean).is_err());
    }

    #[test]
    fn mc_stderr_scales_as_inverse_sqrt_n() {
        let mut ses = Vec::new();
        for (i, &n) in [10_000usize, 100_000, 1_000_000].iter().enumerate() {
            let mut rng = RngState::new(70 + i as u64);
            let (_, se) = kernel_mc_oracle(&mut rng, 0.3, 1.0, 0.0, n, McMode::Value).unwrap();
            ses.push(se);
        }
        let r1 = ses[0] / ses[1];
        let r2 = ses[1] / ses[2];
        let root10 = 10.0f64.sqrt();
        assert!((r1 / root10 - 1.0).abs() < 0.15, "ratio {r1}");
        assert!((r2 / root10 - 1.0).abs() < 0.15, "ratio {r2}");
    }

    #[test]
    fn mc_oracle_deterministic_given_state() {
        let mut a = RngState::new(99);
        let mut b = RngState::new(99);
        let ra = kernel_mc_oracle(&mut a, 0.4, 1.5, 0.1, 50_000, McMode::Value).unwrap();
        let rb = kernel_mc_oracle(&mut b, 0.4, 1.5, 0.1, 50_000, McMode::Value).unwrap();
        assert_eq!(ra.0.to_bits(), rb.0.to_bits());
        assert_eq!(ra.1.to_bits(), rb.1.to_bits());
    }
}
