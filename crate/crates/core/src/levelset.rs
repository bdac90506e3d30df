//! Level-set traversal for convex network outputs.
//!
//! A convex output restricted to a ray from its global minimiser is
//! non-decreasing, so every point of the level set {x : f(x) = c} with
//! c > f_min is found by bisection along a ray. A trajectory between two
//! inputs on the same level interpolates ray directions spherically between
//! (x_ref - x_min) and (x_tgt - x_min).

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::network::Network;
use crate::numerics::{Matrix, Vector};

/// A scalar convex function of a vector input.
pub trait ConvexObjective: Sync {
    fn dim(&self) -> usize;
    fn value(&self, x: &Vector) -> Result<f64>;
    fn gradient(&self, x: &Vector) -> Result<Vector>;
}

/// One output neuron of an ICNN as a convex objective.
pub struct IcnnOutput<'a> {
    net: &'a Network,
    output_index: usize,
}

impl<'a> IcnnOutput<'a> {
    pub fn new(net: &'a Network, output_index: usize) -> Result<Self> {
        if !net.variant.is_icnn() {
            return Err(Error::Variant(format!(
                "level-set operations need an icnn variant, not {}",
                net.variant
            )));
        }
        if output_index >= net.output_width() {
            return Err(Error::Parameter(format!(
                "output index {output_index} out of range for {} outputs",
                net.output_width()
            )));
        }
        Ok(Self { net, output_index })
    }
}

impl ConvexObjective for IcnnOutput<'_> {
    fn dim(&self) -> usize {
        self.net.input_width()
    }

    fn value(&self, x: &Vector) -> Result<f64> {
        let batch = x.view().insert_axis(ndarray::Axis(0)).to_owned();
        let trace = self.net.forward(&batch)?;
        Ok(trace.output()[[0, self.output_index]])
    }

    fn gradient(&self, x: &Vector) -> Result<Vector> {
        let batch = x.view().insert_axis(ndarray::Axis(0)).to_owned();
        let trace = self.net.forward(&batch)?;
        let mut grad_out = Matrix::zeros((1, self.net.output_width()));
        grad_out[[0, self.output_index]] = 1.0;
        let gx = self.net.input_gradients(&trace, &grad_out)?;
        Ok(gx.row(0).to_owned())
    }
}

/// A level-set traversal result.
#[derive(Debug, Clone)]
pub struct LevelTrajectory {
    pub output_index: usize,
    /// The traversed level c = f(x_ref).
    pub level: f64,
    pub points: Vec<Vector>,
    /// |f(x_i) - c| for each point.
    pub residuals: Vec<f64>,
}

fn norm(v: &Vector) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Gradient descent with Armijo backtracking. Returns the best iterate and
/// its value; stops when the gradient norm drops below `grad_tol` or after
/// `max_iters` steps.
pub fn find_minimum(
    f: &dyn ConvexObjective,
    x0: &Vector,
    lr: f64,
    max_iters: usize,
    grad_tol: f64,
) -> Result<(Vector, f64)> {
    if x0.len() != f.dim() {
        return Err(Error::Shape(format!(
            "start point has dim {}, objective needs {}",
            x0.len(),
            f.dim()
        )));
    }
    let mut x = x0.clone();
    let mut fx = f.value(&x)?;
    if !fx.is_finite() {
        return Err(Error::Degenerate(format!("objective is {fx} at the start point")));
    }
    let mut best = (x.clone(), fx);
    for _ in 0..max_iters {
        let g = f.gradient(&x)?;
        let gnorm = norm(&g);
        if gnorm < grad_tol {
            break;
        }
        let gsq = gnorm * gnorm;
        let mut t = lr;
        let mut advanced = false;
        while t > 1e-20 {
            let candidate = &x - &(&g * t);
            let fc = f.value(&candidate)?;
            if !fc.is_finite() {
                return Err(Error::Degenerate(format!("objective became {fc}")));
            }
            if fc <= fx - 1e-4 * t * gsq {
                x = candidate;
                fx = fc;
                advanced = true;
                break;
            }
            t *= 0.5;
        }
        if fx < best.1 {
            best = (x.clone(), fx);
        }
        if !advanced {
            break;
        }
    }
    Ok(best)
}

const BRACKET_DOUBLINGS: usize = 60;
const CROSS_TOL: f64 = 1e-6;

/// Distance t >= 0 along `direction` from `center` at which f crosses
/// `level`, found by geometric bracket expansion and bisection.
/// Requires f(center) < level (or equal, which returns 0).
pub fn level_cross(
    f: &dyn ConvexObjective,
    center: &Vector,
    direction: &Vector,
    level: f64,
    t_max: f64,
) -> Result<f64> {
    let tol = CROSS_TOL * (1.0 + level.abs());
    let f0 = f.value(center)?;
    if (f0 - level).abs() <= tol {
        return Ok(0.0);
    }
    if f0 > level {
        return Err(Error::Parameter(format!(
            "level_cross needs f(center) <= level, got {f0} > {level}"
        )));
    }
    let eval = |t: f64| -> Result<f64> { f.value(&(center + &(direction * t))) };
    let mut hi = if t_max > 0.0 { t_max } else { 1.0 };
    let mut lo = 0.0;
    let mut doublings = 0;
    loop {
        let fhi = eval(hi)?;
        if fhi > level {
            break;
        }
        lo = hi;
        hi *= 2.0;
        doublings += 1;
        if doublings > BRACKET_DOUBLINGS {
            return Err(Error::UnreachableLevel { level, doublings });
        }
    }
    // Bisect until the residual meets the tolerance.
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let fmid = eval(mid)?;
        if (fmid - level).abs() <= tol {
            return Ok(mid);
        }
        if fmid > level {
            hi = mid;
        } else {
            lo = mid;
        }
        if (hi - lo) <= f64::EPSILON * hi.max(1.0) {
            break;
        }
    }
    let mid = 0.5 * (lo + hi);
    let fmid = eval(mid)?;
    if (fmid - level).abs() <= tol {
        Ok(mid)
    } else {
        Err(Error::Degenerate(format!(
            "bisection stalled with residual {} at level {level}",
            (fmid - level).abs()
        )))
    }
}

/// Spherically interpolated unit directions between u and v.
fn slerp_directions(u: &Vector, v: &Vector, n_points: usize) -> Vec<Vector> {
    let nu = norm(u);
    let nv = norm(v);
    let uhat = u / nu;
    let vhat = v / nv;
    let cosw = uhat.dot(&vhat).clamp(-1.0, 1.0);
    let omega = cosw.acos();
    let mut out = Vec::with_capacity(n_points);
    if n_points == 1 {
        out.push(uhat);
        return out;
    }
    if omega.sin() < 1e-9 {
        if cosw > 0.0 {
            // parallel: constant direction
            for _ in 0..n_points {
                out.push(uhat.clone());
            }
        } else {
            // antipodal: rotate through an arbitrary orthonormal companion
            let mut w = Vector::zeros(u.len());
            let pivot = uhat
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
                .map(|(i, _)| i)
                .unwrap_or(0);
            w[pivot] = 1.0;
            let proj = uhat.dot(&w);
            w = &w - &(&uhat * proj);
            let wn = norm(&w).max(1e-12);
            w /= wn;
            for i in 0..n_points {
                let tau = i as f64 / (n_points - 1) as f64;
                let ang = tau * std::f64::consts::PI;
                out.push(&uhat * ang.cos() + &w * ang.sin());
            }
        }
        return out;
    }
    let sinw = omega.sin();
    for i in 0..n_points {
        let tau = i as f64 / (n_points - 1) as f64;
        let a = ((1.0 - tau) * omega).sin() / sinw;
        let b = (tau * omega).sin() / sinw;
        let mut d = &uhat * a + &vhat * b;
        let dn = norm(&d).max(1e-12);
        d /= dn;
        out.push(d);
    }
    out
}

/// Default optimiser settings for the inner minimisation.
#[derive(Debug, Clone, Copy)]
pub struct TraversalOptions {
    pub lr: f64,
    pub max_iters: usize,
    pub grad_tol: f64,
}

impl Default for TraversalOptions {
    fn default() -> Self {
        Self {
            lr: 0.5,
            max_iters: 2000,
            grad_tol: 1e-10,
        }
    }
}

/// Trace the level set {f = f(x_ref)} from x_ref toward x_tgt.
pub fn level_trajectory_for(
    f: &dyn ConvexObjective,
    output_index: usize,
    x_ref: &Vector,
    x_tgt: &Vector,
    n_points: usize,
    opts: TraversalOptions,
) -> Result<LevelTrajectory> {
    if n_points == 0 {
        return Err(Error::Parameter("trajectory needs at least one point".into()));
    }
    if x_ref.len() != f.dim() || x_tgt.len() != f.dim() {
        return Err(Error::Shape("endpoint dimensions do not match the objective".into()));
    }
    if x_ref == x_tgt {
        return Err(Error::Parameter("reference and target inputs coincide".into()));
    }
    let level = f.value(x_ref)?;
    let (x_min, f_min) = find_minimum(f, x_ref, opts.lr, opts.max_iters, opts.grad_tol)?;
    if level <= f_min + 1e-8 * (1.0 + level.abs()) {
        return Err(Error::DegenerateLevel(format!(
            "level {level} is at or below the minimum {f_min}; the level set is empty or a point"
        )));
    }
    let u = x_ref - &x_min;
    let v = x_tgt - &x_min;
    let (nu, nv) = (norm(&u), norm(&v));
    if nu < 1e-12 {
        return Err(Error::DegenerateLevel("reference point sits at the minimiser".into()));
    }
    let directions = if nv < 1e-12 {
        vec![u / nu; n_points]
    } else {
        slerp_directions(&u, &v, n_points)
    };
    let t0 = nu.max(nv);
    let crossings: Vec<Result<(Vector, f64)>> = directions
        .par_iter()
        .map(|d| {
            let t = level_cross(f, &x_min, d, level, t0)?;
            let point = &x_min + &(d * t);
            let residual = (f.value(&point)? - level).abs();
            Ok((point, residual))
        })
        .collect();
    let mut points = Vec::with_capacity(n_points);
    let mut residuals = Vec::with_capacity(n_points);
    for c in crossings {
        let (p, r) = c?;
        points.push(p);
        residuals.push(r);
    }
    Ok(LevelTrajectory {
        output_index,
        level,
        points,
        residuals,
    })
}

/// Trace the level set of one ICNN output between two inputs.
pub fn level_trajectory(
    net: &Network,
    output_index: usize,
    x_ref: &Vector,
    x_tgt: &Vector,
    n_points: usize,
) -> Result<LevelTrajectory> {
    let objective = IcnnOutput::new(net, output_index)?;
    level_trajectory_for(
        &objective,
        output_index,
        x_ref,
        x_tgt,
        n_points,
        TraversalOptions::default(),
    )
}
