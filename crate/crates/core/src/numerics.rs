//! Deterministic random number generation and dense linear-algebra plumbing.
//!
//! The generator is xoshiro256++ seeded through splitmix64, with Gaussian
//! variates produced by the Box–Muller transform. Identical seeds and call
//! sequences give bit-identical streams on every platform; child streams for
//! layers and repetitions are derived with [`RngState::fork`]. Reproducibility
//! is a per-build guarantee, not a cross-algorithm one.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

/// Row-major dense 64-bit matrix.
pub type Matrix = Array2<f64>;
/// Dense 64-bit vector.
pub type Vector = Array1<f64>;

const SPLITMIX_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;
const FORK_TAG_SALT: u64 = 0xA076_1D64_78BD_642F;

fn splitmix_mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Splittable deterministic generator (xoshiro256++ core).
#[derive(Debug, Clone)]
pub struct RngState {
    s: [u64; 4],
    /// Spare Gaussian from the last Box–Muller pair, part of the stream state.
    spare: Option<f64>,
}

impl RngState {
    /// Seed a fresh stream from a 64-bit seed.
    pub fn new(seed: u64) -> Self {
        let mut x = seed;
        let mut s = [0u64; 4];
        for slot in &mut s {
            x = x.wrapping_add(SPLITMIX_GAMMA);
            *slot = splitmix_mix(x);
        }
        // xoshiro state must never be all zero.
        if s == [0, 0, 0, 0] {
            s[0] = 1;
        }
        Self { s, spare: None }
    }

    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.s;
        let result = s[0]
            .wrapping_add(s[3])
            .rotate_left(23)
            .wrapping_add(s[0]);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform sample in [0, 1) with 53-bit resolution.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform sample in (0, 1]; safe as a logarithm argument.
    fn next_f64_open(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal variate (Box–Muller; the sine twin is kept as spare).
    pub fn next_gaussian(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let (z0, z1) = self.next_gaussian_pair();
        self.spare = Some(z1);
        z0
    }

    /// Independent pair of standard normal variates. Does not touch the spare.
    pub fn next_gaussian_pair(&mut self) -> (f64, f64) {
        let u1 = self.next_f64_open();
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        (r * theta.cos(), r * theta.sin())
    }

    /// Derive a reproducible child stream. Consumes one draw from the parent,
    /// so repeated forks (even with the same tag) yield distinct streams while
    /// an identical (seed, call sequence, tag) always yields the same child.
    pub fn fork(&mut self, tag: u64) -> RngState {
        let base = self.next_u64();
        RngState::new(base ^ splitmix_mix(tag ^ FORK_TAG_SALT))
    }
}

fn ensure_finite(values: &[f64], op: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Degenerate(format!("non-finite value produced by {op}")))
    }
}

/// Matrix of i.i.d. Normal(mean, var) entries; `var = 0` gives a constant fill.
pub fn gaussian_sample(
    state: &mut RngState,
    mean: f64,
    var: f64,
    shape: (usize, usize),
) -> Result<Matrix> {
    if !(var >= 0.0) || !mean.is_finite() || !var.is_finite() {
        return Err(Error::Parameter(format!(
            "gaussian_sample requires finite mean and var >= 0, got mean={mean}, var={var}"
        )));
    }
    let (rows, cols) = shape;
    if var == 0.0 {
        return Ok(Matrix::from_elem(shape, mean));
    }
    let sd = var.sqrt();
    let mut data = Vec::with_capacity(rows * cols);
    while data.len() + 1 < rows * cols {
        let (z0, z1) = state.next_gaussian_pair();
        data.push(mean + sd * z0);
        data.push(mean + sd * z1);
    }
    if data.len() < rows * cols {
        data.push(mean + sd * state.next_gaussian());
    }
    Matrix::from_shape_vec(shape, data)
        .map_err(|e| Error::Shape(format!("gaussian_sample: {e}")))
}

/// Parameters (mu_tilde, var_tilde) of the log-normal distribution whose
/// exp-samples have mean `mu_w` and variance `var_w`.
pub fn lognormal_params(mu_w: f64, var_w: f64) -> Result<(f64, f64)> {
    if !(mu_w > 0.0) {
        return Err(Error::Parameter(format!(
            "lognormal_params requires mu_w > 0, got {mu_w}"
        )));
    }
    if !(var_w >= 0.0) {
        return Err(Error::Parameter(format!(
            "lognormal_params requires var_w >= 0, got {var_w}"
        )));
    }
    let second = var_w + mu_w * mu_w;
    let mu_tilde = (mu_w * mu_w).ln() - 0.5 * second.ln();
    let var_tilde = second.ln() - (mu_w * mu_w).ln();
    Ok((mu_tilde, var_tilde.max(0.0)))
}

/// Matrix of i.i.d. exp(Normal(mu_tilde, var_tilde)) entries; strictly positive.
pub fn lognormal_sample(
    state: &mut RngState,
    mu_tilde: f64,
    var_tilde: f64,
    shape: (usize, usize),
) -> Result<Matrix> {
    if !(var_tilde >= 0.0) {
        return Err(Error::Parameter(format!(
            "lognormal_sample requires var_tilde >= 0, got {var_tilde}"
        )));
    }
    let mut m = gaussian_sample(state, mu_tilde, var_tilde, shape)?;
    m.mapv_inplace(f64::exp);
    ensure_finite(m.as_slice().expect("contiguous"), "lognormal_sample")?;
    Ok(m)
}

/// Dense product `a * b` with explicit shape checking.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.ncols() != b.nrows() {
        return Err(Error::Shape(format!(
            "matmul: inner dimensions disagree ({}x{} * {}x{})",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    Ok(a.dot(b))
}

/// Matrix-vector product `w * x`.
pub fn matvec(w: &Matrix, x: &Vector) -> Result<Vector> {
    if w.ncols() != x.len() {
        return Err(Error::Shape(format!(
            "matvec: {}x{} * len-{}",
            w.nrows(),
            w.ncols(),
            x.len()
        )));
    }
    Ok(w.dot(x))
}

/// Affine map `w * x + b` for a single vector.
pub fn affine(w: &Matrix, x: &Vector, b: &Vector) -> Result<Vector> {
    if b.len() != w.nrows() {
        return Err(Error::Shape(format!(
            "affine: bias len {} vs {} rows",
            b.len(),
            w.nrows()
        )));
    }
    let mut y = matvec(w, x)?;
    y += b;
    ensure_finite(y.as_slice().expect("contiguous"), "affine")?;
    Ok(y)
}

/// Affine map for a batch stored row-wise: returns `x * w^T + b` (batch x M).
pub fn affine_batch(w: &Matrix, x: &Matrix, b: &Vector) -> Result<Matrix> {
    if x.ncols() != w.ncols() {
        return Err(Error::Shape(format!(
            "affine_batch: input width {} vs weight fan-in {}",
            x.ncols(),
            w.ncols()
        )));
    }
    if b.len() != w.nrows() {
        return Err(Error::Shape(format!(
            "affine_batch: bias len {} vs {} rows",
            b.len(),
            w.nrows()
        )));
    }
    let mut y = x.dot(&w.t());
    y += b;
    ensure_finite(y.as_slice().expect("contiguous"), "affine_batch")?;
    Ok(y)
}

/// Closed-form mean and variance of exp(Normal(mu_tilde, var_tilde)).
pub fn lognormal_moments(mu_tilde: f64, var_tilde: f64) -> (f64, f64) {
    let mean = (mu_tilde + 0.5 * var_tilde).exp();
    let var = (var_tilde.exp() - 1.0) * (2.0 * mu_tilde + var_tilde).exp();
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_variance_is_constant() {
        let mut rng = RngState::new(7);
        let m = gaussian_sample(&mut rng, 0.0, 0.0, (2, 2)).unwrap();
        assert!(m.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn negative_variance_rejected() {
        let mut rng = RngState::new(7);
        assert!(gaussian_sample(&mut rng, 0.0, -1.0, (2, 2)).is_err());
        assert!(lognormal_sample(&mut rng, 0.0, -1.0, (2, 2)).is_err());
        assert!(lognormal_params(0.0, 1.0).is_err());
        assert!(lognormal_params(-1.0, 1.0).is_err());
    }

    #[test]
    fn gaussian_large_sample_moments() {
        let mut rng = RngState::new(7);
        let m = gaussian_sample(&mut rng, 0.0, 1.0, (1000, 1000)).unwrap();
        let n = m.len() as f64;
        let mean = m.sum() / n;
        let var = m.mapv(|v| (v - mean) * (v - mean)).sum() / n;
        assert!(mean.abs() < 4e-3, "sample mean {mean}");
        assert!((var - 1.0).abs() < 0.01, "sample var {var}");
    }

    #[test]
    fn identical_seed_identical_stream() {
        let mut a = RngState::new(123);
        let mut b = RngState::new(123);
        for _ in 0..64 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let ma = gaussian_sample(&mut a, 0.5, 2.0, (3, 5)).unwrap();
        let mb = gaussian_sample(&mut b, 0.5, 2.0, (3, 5)).unwrap();
        for (x, y) in ma.iter().zip(mb.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn forked_streams_reproducible_and_distinct() {
        let mut parent_a = RngState::new(9);
        let mut parent_b = RngState::new(9);
        let mut child_a = parent_a.fork(1);
        let mut child_b = parent_b.fork(1);
        assert_eq!(child_a.next_u64(), child_b.next_u64());
        let mut other = parent_a.fork(1);
        assert_ne!(child_a.next_u64(), other.next_u64());
    }

    #[test]
    fn lognormal_params_analytic_cases() {
        let (mt, vt) = lognormal_params(1.0, 0.0).unwrap();
        assert_eq!((mt, vt), (0.0, 0.0));
        let (mt, vt) = lognormal_params(1.0, std::f64::consts::E - 1.0).unwrap();
        assert!((mt + 0.5).abs() < 1e-15 && (vt - 1.0).abs() < 1e-15);
    }

    #[test]
    fn lognormal_roundtrip_closed_form_grid() {
        for &mu in &[1e-3, 0.0184, 0.5, 1.0, 3.0, 25.0] {
            for &var in &[0.0, 1e-6, 0.01, 1.0, 10.0] {
                let (mt, vt) = lognormal_params(mu, var).unwrap();
                let (m, v) = lognormal_moments(mt, vt);
                assert!((m - mu).abs() <= 1e-12 * mu.max(1.0), "mean {m} vs {mu}");
                assert!((v - var).abs() <= 1e-12 * var.max(1.0), "var {v} vs {var}");
            }
        }
    }

    #[test]
    fn lognormal_sample_unit_and_positive() {
        let mut rng = RngState::new(11);
        let m = lognormal_sample(&mut rng, 0.0, 0.0, (3, 3)).unwrap();
        assert!(m.iter().all(|&v| v == 1.0));
        let m = lognormal_sample(&mut rng, -1.0, 2.0, (50, 50)).unwrap();
        assert!(m.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn lognormal_sample_mc_moments() {
        // Target mean/variance from the derived parameters; 1e7 draws.
        let (mu, var) = (0.0184, 0.01);
        let (mt, vt) = lognormal_params(mu, var).unwrap();
        let mut rng = RngState::new(42);
        let m = lognormal_sample(&mut rng, mt, vt, (2000, 5000)).unwrap();
        let n = m.len() as f64;
        let mean = m.sum() / n;
        let sample_var = m.mapv(|v| (v - mean) * (v - mean)).sum() / n;
        // std error of the mean is sqrt(var/n); variance of the sample variance
        // is (m4 - var^2)/n, bounded loosely via the 4th moment of the sample.
        let se_mean = (var / n).sqrt();
        assert!((mean - mu).abs() < 3.0 * se_mean, "mean {mean} vs {mu}");
        let m4 = m.mapv(|v| (v - mean).powi(4)).sum() / n;
        let se_var = ((m4 - sample_var * sample_var) / n).sqrt();
        assert!((sample_var - var).abs() < 3.0 * se_var, "var {sample_var} vs {var}");
    }

    #[test]
    fn affine_trivial_cases() {
        let ident: Matrix = Matrix::eye(3);
        let x: Vector = array![1.0, -2.0, 3.0];
        let zero_b: Vector = Vector::zeros(3);
        assert_eq!(affine(&ident, &x, &zero_b).unwrap(), x);
        let w = Matrix::zeros((3, 3));
        let b: Vector = array![4.0, 5.0, 6.0];
        assert_eq!(affine(&w, &x, &b).unwrap(), b);
    }

    #[test]
    fn affine_matches_triple_loop_reference() {
        let mut rng = RngState::new(3);
        let w = gaussian_sample(&mut rng, 0.0, 1.0, (5, 4)).unwrap();
        let xm = gaussian_sample(&mut rng, 0.0, 1.0, (1, 4)).unwrap();
        let x: Vector = xm.row(0).to_owned();
        let bm = gaussian_sample(&mut rng, 0.0, 1.0, (1, 5)).unwrap();
        let b: Vector = bm.row(0).to_owned();
        let y = affine(&w, &x, &b).unwrap();
        for i in 0..5 {
            let mut acc = b[i];
            for k in 0..4 {
                acc += w[[i, k]] * x[k];
            }
            assert!((y[i] - acc).abs() < 1e-12);
        }
        // batch form agrees with the vector form row by row
        let batch = gaussian_sample(&mut rng, 0.0, 1.0, (6, 4)).unwrap();
        let yb = affine_batch(&w, &batch, &b).unwrap();
        for r in 0..6 {
            let yr = affine(&w, &batch.row(r).to_owned(), &b).unwrap();
            for i in 0..5 {
                assert!((yb[[r, i]] - yr[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_mismatch_errors() {
        let w = Matrix::zeros((3, 4));
        let x: Vector = Vector::zeros(3);
        let b: Vector = Vector::zeros(3);
        assert!(matvec(&w, &x).is_err());
        assert!(affine(&w, &x, &b).is_err());
        let a = Matrix::zeros((2, 3));
        let c = Matrix::zeros((2, 3));
        assert!(matmul(&a, &c).is_err());
    }
}
