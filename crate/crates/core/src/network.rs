//! ICNN and baseline network construction, evaluation and verification.
//!
//! A network is a stack of affine layers with leaky-ReLU activations between
//! them. Convexity of every output in the input is obtained by keeping the
//! weights of every layer after the first non-negative, either by projection
//! (clamping after updates) or by an exponential reparameterisation where the
//! stored parameters are log-weights. The first layer and any skip connection
//! from the input stay unconstrained.

use std::fmt;
use std::path::Path;

use ndarray::Axis;

use crate::error::{Error, Result};
use crate::init::{baseline_init_params, convex_init_params, BaselineScheme, InitParams};
use crate::kernels::{lrelu, lrelu_deriv};
use crate::numerics::{gaussian_sample, lognormal_sample, Matrix, RngState, Vector};

/// How non-negativity of constrained weights is maintained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Unconstrained baseline network.
    Nonconvex,
    /// Constrained weights clamped to zero after every update.
    IcnnProjection,
    /// Stored parameters are log-weights; effective weights are their exp.
    IcnnExpReparam,
}

impl Variant {
    pub fn is_icnn(self) -> bool {
        !matches!(self, Variant::Nonconvex)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Variant::Nonconvex => "nonconvex",
            Variant::IcnnProjection => "icnn_projection",
            Variant::IcnnExpReparam => "icnn_exp_reparam",
        };
        f.write_str(name)
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nonconvex" => Ok(Variant::Nonconvex),
            "icnn_projection" => Ok(Variant::IcnnProjection),
            "icnn_exp_reparam" => Ok(Variant::IcnnExpReparam),
            other => Err(Error::Format(format!("unknown variant '{other}'"))),
        }
    }
}

/// Weight initialisation scheme for the constrained layers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitScheme {
    DefaultHe,
    Lecun,
    ConvexInit {
        rho_star: f64,
        var_star: f64,
        beta: f64,
    },
}

/// Architecture description.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    /// Input width, hidden widths, output width.
    pub layer_widths: Vec<usize>,
    pub alpha: f64,
    pub variant: Variant,
    pub skip_connections: bool,
    pub init_scheme: InitScheme,
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 3 {
            return Err(Error::Parameter(
                "layer_widths must list input, at least one hidden, and output width".into(),
            ));
        }
        if self.layer_widths.iter().any(|&w| w == 0) {
            return Err(Error::Parameter("layer widths must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Parameter(format!(
                "alpha must be in [0, 1], got {}",
                self.alpha
            )));
        }
        if self.skip_connections && !self.variant.is_icnn() {
            return Err(Error::Parameter(
                "skip connections are only defined for icnn variants".into(),
            ));
        }
        Ok(())
    }
}

/// One affine layer; `skip` maps the raw input into this layer's output.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// Stored parameters: plain weights, or log-weights for constrained
    /// layers of the exp-reparameterised variant.
    pub weight: Matrix,
    pub bias: Vector,
    pub skip: Option<Matrix>,
}

/// Realised parameter tensors plus the variant flags needed to use them.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub layers: Vec<Layer>,
    pub variant: Variant,
    pub alpha: f64,
}

/// Per-layer pre-activations of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub input: Matrix,
    /// s_1 .. s_L, each batch x width.
    pub pre_activations: Vec<Matrix>,
}

impl ForwardTrace {
    pub fn output(&self) -> &Matrix {
        self.pre_activations.last().expect("at least one layer")
    }
}

/// Gradients with respect to the stored parameters, shaped like the network.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub layers: Vec<LayerGradients>,
}

#[derive(Debug, Clone)]
pub struct LayerGradients {
    pub weight: Matrix,
    pub bias: Vector,
    pub skip: Option<Matrix>,
}

/// Result of a convexity search over random chords.
#[derive(Debug, Clone, Copy)]
pub struct ConvexityReport {
    pub trials: usize,
    pub lambdas: usize,
    /// Chord points where f(mid) exceeded the interpolated bound plus slack.
    pub violations: usize,
    /// Largest raw excess f(mid) - (lambda f(x) + (1-lambda) f(y)); negative
    /// when the inequality holds strictly everywhere.
    pub worst_excess: f64,
}

fn lrelu_map(m: &Matrix, alpha: f64) -> Matrix {
    m.mapv(|v| lrelu(v, alpha))
}

fn lrelu_deriv_map(m: &Matrix, alpha: f64) -> Matrix {
    m.mapv(|v| lrelu_deriv(v, alpha))
}

impl Network {
    /// Assemble a network from realised layers, checking the variant
    /// invariants (non-negative constrained weights for the projection
    /// variant; finite parameters everywhere).
    pub fn from_layers(layers: Vec<Layer>, variant: Variant, alpha: f64) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Parameter("network needs at least one layer".into()));
        }
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Parameter(format!("alpha must be in [0, 1], got {alpha}")));
        }
        let mut prev_out = layers[0].weight.nrows();
        for (i, layer) in layers.iter().enumerate() {
            if i > 0 && layer.weight.ncols() != prev_out {
                return Err(Error::Shape(format!(
                    "layer {i} fan-in {} does not match previous width {prev_out}",
                    layer.weight.ncols()
                )));
            }
            if layer.bias.len() != layer.weight.nrows() {
                return Err(Error::Shape(format!("layer {i} bias length mismatch")));
            }
            if let Some(skip) = &layer.skip {
                if skip.nrows() != layer.weight.nrows()
                    || skip.ncols() != layers[0].weight.ncols()
                {
                    return Err(Error::Shape(format!("layer {i} skip shape mismatch")));
                }
            }
            let finite = layer.weight.iter().all(|v| v.is_finite())
                && layer.bias.iter().all(|v| v.is_finite())
                && layer
                    .skip
                    .as_ref()
                    .is_none_or(|s| s.iter().all(|v| v.is_finite()));
            if !finite {
                return Err(Error::Degenerate(format!("layer {i} has non-finite parameters")));
            }
            if variant == Variant::IcnnProjection && i > 0 && layer.weight.iter().any(|&v| v < 0.0)
            {
                return Err(Error::Parameter(format!(
                    "constrained layer {i} has negative weights"
                )));
            }
            prev_out = layer.weight.nrows();
        }
        Ok(Self { layers, variant, alpha })
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().expect("nonempty").weight.nrows()
    }

    /// Widths as [input, hidden.., output].
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_width()];
        w.extend(self.layers.iter().map(|l| l.weight.nrows()));
        w
    }

    /// True when layer `idx` carries the non-negativity constraint.
    pub fn is_constrained(&self, idx: usize) -> bool {
        idx > 0 && self.variant.is_icnn()
    }

    /// Effective weight matrix of layer `idx` (exp of the stored log-weights
    /// for constrained exp-reparameterised layers).
    pub fn effective_weight(&self, idx: usize) -> Matrix {
        let stored = &self.layers[idx].weight;
        if self.variant == Variant::IcnnExpReparam && self.is_constrained(idx) {
            stored.mapv(f64::exp)
        } else {
            stored.clone()
        }
    }

    /// Forward pass over a batch stored row-wise (batch x input_width).
    pub fn forward(&self, batch: &Matrix) -> Result<ForwardTrace> {
        if batch.ncols() != self.input_width() {
            return Err(Error::Shape(format!(
                "batch width {} does not match input width {}",
                batch.ncols(),
                self.input_width()
            )));
        }
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut activation = batch.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let w = self.effective_weight(i);
            let mut s = activation.dot(&w.t());
            if let Some(skip) = &layer.skip {
                s = s + batch.dot(&skip.t());
            }
            s += &layer.bias;
            if i + 1 < self.layers.len() {
                activation = lrelu_map(&s, self.alpha);
            }
            pre_activations.push(s);
        }
        Ok(ForwardTrace {
            input: batch.clone(),
            pre_activations,
        })
    }

    fn check_trace(&self, trace: &ForwardTrace, grad_out: &Matrix) -> Result<()> {
        if trace.pre_activations.len() != self.layers.len() {
            return Err(Error::Shape("trace depth does not match network".into()));
        }
        for (i, s) in trace.pre_activations.iter().enumerate() {
            if s.ncols() != self.layers[i].weight.nrows() || s.nrows() != trace.input.nrows() {
                return Err(Error::Shape(format!("trace layer {i} shape mismatch")));
            }
        }
        if grad_out.dim() != trace.output().dim() {
            return Err(Error::Shape("grad_out shape does not match output".into()));
        }
        Ok(())
    }

    /// Backward pass: gradients of a scalar loss with output-gradient
    /// `grad_out` with respect to every stored parameter.
    pub fn backward(&self, trace: &ForwardTrace, grad_out: &Matrix) -> Result<Gradients> {
        self.check_trace(trace, grad_out)?;
        let mut grads: Vec<Option<LayerGradients>> = vec![None; self.layers.len()];
        let mut delta = grad_out.clone();
        for i in (0..self.layers.len()).rev() {
            let prev_act: Matrix = if i == 0 {
                trace.input.clone()
            } else {
                lrelu_map(&trace.pre_activations[i - 1], self.alpha)
            };
            let mut gw = delta.t().dot(&prev_act);
            if self.variant == Variant::IcnnExpReparam && self.is_constrained(i) {
                // d/dW~ = d/dW_eff * exp(W~)
                gw = gw * self.layers[i].weight.mapv(f64::exp);
            }
            let gb = delta.sum_axis(Axis(0));
            let gskip = self.layers[i]
                .skip
                .as_ref()
                .map(|_| delta.t().dot(&trace.input));
            grads[i] = Some(LayerGradients {
                weight: gw,
                bias: gb,
                skip: gskip,
            });
            if i > 0 {
                let w = self.effective_weight(i);
                let back = delta.dot(&w);
                delta = back * lrelu_deriv_map(&trace.pre_activations[i - 1], self.alpha);
            }
        }
        Ok(Gradients {
            layers: grads.into_iter().map(|g| g.expect("filled")).collect(),
        })
    }

    /// Backward pass that only tracks the per-layer deltas dL/ds_l, ordered
    /// from the output layer down to the first.
    pub fn backward_deltas(&self, trace: &ForwardTrace, grad_out: &Matrix) -> Result<Vec<Matrix>> {
        self.check_trace(trace, grad_out)?;
        let mut deltas = Vec::with_capacity(self.layers.len());
        let mut delta = grad_out.clone();
        for i in (1..self.layers.len()).rev() {
            deltas.push(delta.clone());
            let w = self.effective_weight(i);
            let back = delta.dot(&w);
            delta = back * lrelu_deriv_map(&trace.pre_activations[i - 1], self.alpha);
        }
        deltas.push(delta);
        Ok(deltas)
    }

    /// Gradient of the loss with respect to the raw input batch.
    pub fn input_gradients(&self, trace: &ForwardTrace, grad_out: &Matrix) -> Result<Matrix> {
        let deltas = self.backward_deltas(trace, grad_out)?;
        // deltas are ordered output..input; deltas[last] is dL/ds_1.
        let delta_first = deltas.last().expect("nonempty");
        let mut gx = delta_first.dot(&self.effective_weight(0));
        for (back_idx, delta) in deltas.iter().enumerate() {
            let layer_idx = self.layers.len() - 1 - back_idx;
            if let Some(skip) = &self.layers[layer_idx].skip {
                gx = gx + delta.dot(skip);
            }
        }
        Ok(gx)
    }

    /// Clamp negative constrained weights to zero; returns how many entries
    /// were clamped. Idempotent.
    pub fn project_nonneg(&mut self) -> Result<usize> {
        if self.variant != Variant::IcnnProjection {
            return Err(Error::Variant(format!(
                "project_nonneg applies to icnn_projection, not {}",
                self.variant
            )));
        }
        let mut clamped = 0usize;
        for layer in self.layers.iter_mut().skip(1) {
            for v in layer.weight.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                    clamped += 1;
                }
            }
        }
        Ok(clamped)
    }
}

fn sample_weights(
    params: &InitParams,
    shape: (usize, usize),
    variant: Variant,
    constrained: bool,
    rng: &mut RngState,
) -> Result<Matrix> {
    if !constrained {
        return gaussian_sample(rng, params.mu_w, params.var_w, shape);
    }
    match variant {
        Variant::Nonconvex => gaussian_sample(rng, params.mu_w, params.var_w, shape),
        Variant::IcnnProjection => {
            if params.mu_w > 0.0 {
                let (mt, vt) = params.lognormal()?;
                lognormal_sample(rng, mt, vt, shape)
            } else {
                // Centred target (He/LeCun or rho* = 0): draw Gaussian and
                // clamp, the classical projection-at-build initialisation.
                let mut w = gaussian_sample(rng, params.mu_w, params.var_w, shape)?;
                w.mapv_inplace(|v| v.max(0.0));
                Ok(w)
            }
        }
        Variant::IcnnExpReparam => {
            if params.mu_w > 0.0 {
                // Gaussian log-weights so the effective weights have the
                // target mean and variance.
                let (mt, vt) = params.lognormal()?;
                gaussian_sample(rng, mt, vt, shape)
            } else {
                // Reference variant: the log-weights themselves get the
                // centred baseline initialisation.
                gaussian_sample(rng, params.mu_w, params.var_w, shape)
            }
        }
    }
}

fn layer_params(config: &NetworkConfig, layer_idx: usize, fan_in: usize) -> Result<InitParams> {
    if layer_idx == 0 {
        // The first layer is unconstrained and always uses LeCun.
        return baseline_init_params(BaselineScheme::Lecun, fan_in, config.alpha);
    }
    match config.init_scheme {
        InitScheme::DefaultHe => baseline_init_params(BaselineScheme::He, fan_in, config.alpha),
        InitScheme::Lecun => baseline_init_params(BaselineScheme::Lecun, fan_in, config.alpha),
        InitScheme::ConvexInit {
            rho_star,
            var_star,
            beta,
        } => convex_init_params(fan_in, config.alpha, rho_star, var_star, beta),
    }
}

/// Realise a network from its configuration.
pub fn build_network(config: &NetworkConfig, rng: &mut RngState) -> Result<Network> {
    config.validate()?;
    let widths = &config.layer_widths;
    let input_width = widths[0];
    let mut layers = Vec::with_capacity(widths.len() - 1);
    for i in 0..widths.len() - 1 {
        let (fan_in, fan_out) = (widths[i], widths[i + 1]);
        let mut lrng = rng.fork(i as u64);
        let params = layer_params(config, i, fan_in)?;
        let constrained = i > 0 && config.variant.is_icnn();
        let weight =
            sample_weights(&params, (fan_out, fan_in), config.variant, constrained, &mut lrng)?;
        let bias = if params.var_b > 0.0 {
            let noise = gaussian_sample(&mut lrng, 0.0, params.var_b, (1, fan_out))?;
            Vector::from_iter(noise.iter().map(|z| params.mu_b + z))
        } else {
            Vector::from_elem(fan_out, params.mu_b)
        };
        let skip = if config.skip_connections && i > 0 {
            let lecun = baseline_init_params(BaselineScheme::Lecun, input_width, config.alpha)?;
            Some(gaussian_sample(&mut lrng, 0.0, lecun.var_w, (fan_out, input_width))?)
        } else {
            None
        };
        layers.push(Layer { weight, bias, skip });
    }
    Network::from_layers(layers, config.variant, config.alpha)
}

/// Build a stack whose every layer (including the first) is constrained and
/// initialised per `scheme`. Used by the propagation probes, where the input
/// plays the role of post-activation features.
pub fn build_constrained_stack(
    widths: &[usize],
    alpha: f64,
    scheme: InitScheme,
    rng: &mut RngState,
) -> Result<Network> {
    if widths.len() < 2 {
        return Err(Error::Parameter("stack needs at least one layer".into()));
    }
    let mut layers = Vec::with_capacity(widths.len() - 1);
    for i in 0..widths.len() - 1 {
        let (fan_in, fan_out) = (widths[i], widths[i + 1]);
        let mut lrng = rng.fork(i as u64);
        let params = match scheme {
            InitScheme::DefaultHe => baseline_init_params(BaselineScheme::He, fan_in, alpha)?,
            InitScheme::Lecun => baseline_init_params(BaselineScheme::Lecun, fan_in, alpha)?,
            InitScheme::ConvexInit {
                rho_star,
                var_star,
                beta,
            } => convex_init_params(fan_in, alpha, rho_star, var_star, beta)?,
        };
        let weight =
            sample_weights(&params, (fan_out, fan_in), Variant::IcnnProjection, true, &mut lrng)?;
        let bias = if params.var_b > 0.0 {
            let noise = gaussian_sample(&mut lrng, 0.0, params.var_b, (1, fan_out))?;
            Vector::from_iter(noise.iter().map(|z| params.mu_b + z))
        } else {
            Vector::from_elem(fan_out, params.mu_b)
        };
        layers.push(Layer {
            weight,
            bias,
            skip: None,
        });
    }
    Network::from_layers(layers, Variant::IcnnProjection, alpha)
}

/// Search for violations of per-output convexity over random chords.
///
/// Draws `n_trials` pairs (x, y) of standard normal inputs and checks
/// f(lambda x + (1 - lambda) y) <= lambda f(x) + (1 - lambda) f(y) on an
/// interior lambda grid, with slack 1e-9 scaled by the output magnitude.
pub fn convexity_check(
    net: &Network,
    rng: &mut RngState,
    n_trials: usize,
    n_lambdas: usize,
) -> Result<ConvexityReport> {
    if n_trials == 0 || n_lambdas == 0 {
        return Err(Error::Parameter("convexity_check needs trials and lambdas".into()));
    }
    let dim = net.input_width();
    let outputs = net.output_width();
    let mut violations = 0usize;
    let mut worst = f64::NEG_INFINITY;
    for trial in 0..n_trials {
        let mut trng = rng.fork(trial as u64);
        let ends = gaussian_sample(&mut trng, 0.0, 1.0, (2, dim))?;
        let x = ends.row(0).to_owned();
        let y = ends.row(1).to_owned();
        let mut batch = Matrix::zeros((2 + n_lambdas, dim));
        batch.row_mut(0).assign(&x);
        batch.row_mut(1).assign(&y);
        let mut lambdas = Vec::with_capacity(n_lambdas);
        for j in 0..n_lambdas {
            let lambda = (j + 1) as f64 / (n_lambdas + 1) as f64;
            lambdas.push(lambda);
            let mid = &x * lambda + &y * (1.0 - lambda);
            batch.row_mut(2 + j).assign(&mid);
        }
        let out = net.forward(&batch)?;
        let f = out.output();
        for (j, &lambda) in lambdas.iter().enumerate() {
            for k in 0..outputs {
                let fx = f[[0, k]];
                let fy = f[[1, k]];
                let fmid = f[[2 + j, k]];
                let bound = lambda * fx + (1.0 - lambda) * fy;
                let scale = 1.0 + fx.abs().max(fy.abs()).max(fmid.abs());
                let excess = fmid - bound;
                if excess > 1e-9 * scale {
                    violations += 1;
                }
                if excess > worst {
                    worst = excess;
                }
            }
        }
    }
    Ok(ConvexityReport {
        trials: n_trials,
        lambdas: n_lambdas,
        violations,
        worst_excess: worst,
    })
}

const CKPT_HEADER: &str = "ICNN-CKPT v1";

/// Serialise the network in the line-oriented text checkpoint format.
pub fn checkpoint_to_string(net: &Network) -> String {
    let mut out = String::new();
    out.push_str(CKPT_HEADER);
    out.push('\n');
    let widths: Vec<String> = net.widths().iter().map(|w| w.to_string()).collect();
    let has_skips = net.layers.iter().any(|l| l.skip.is_some());
    out.push_str(&format!(
        "config widths={} alpha={} variant={} skips={}\n",
        widths.join(","),
        net.alpha,
        net.variant,
        has_skips
    ));
    fn write_tensor(out: &mut String, name: String, rows: usize, cols: usize, data: &mut dyn Iterator<Item = f64>) {
        out.push_str(&format!("tensor {name} {rows} {cols}\n"));
        for _ in 0..rows {
            let row: Vec<String> =
                (0..cols).map(|_| data.next().expect("size").to_string()).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
    }
    for (i, layer) in net.layers.iter().enumerate() {
        write_tensor(
            &mut out,
            format!("w{i}"),
            layer.weight.nrows(),
            layer.weight.ncols(),
            &mut layer.weight.iter().copied(),
        );
        write_tensor(
            &mut out,
            format!("b{i}"),
            1,
            layer.bias.len(),
            &mut layer.bias.iter().copied(),
        );
        if let Some(skip) = &layer.skip {
            write_tensor(
                &mut out,
                format!("d{i}"),
                skip.nrows(),
                skip.ncols(),
                &mut skip.iter().copied(),
            );
        }
    }
    out
}

pub fn save_checkpoint(net: &Network, path: &Path) -> Result<()> {
    crate::cli::write_atomic(path, checkpoint_to_string(net).as_bytes())
}

fn parse_config_line(line: &str) -> Result<(Vec<usize>, f64, Variant, bool)> {
    let mut widths = None;
    let mut alpha = None;
    let mut variant = None;
    let mut skips = None;
    let rest = line
        .strip_prefix("config ")
        .ok_or_else(|| Error::Format("expected config line".into()))?;
    for field in rest.split_whitespace() {
        let (key, value) = field
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("malformed config field '{field}'")))?;
        match key {
            "widths" => {
                let parsed: std::result::Result<Vec<usize>, _> =
                    value.split(',').map(str::parse).collect();
                widths = Some(parsed.map_err(|e| Error::Format(format!("widths: {e}")))?);
            }
            "alpha" => {
                alpha = Some(value.parse().map_err(|e| Error::Format(format!("alpha: {e}")))?)
            }
            "variant" => variant = Some(value.parse()?),
            "skips" => {
                skips = Some(value.parse().map_err(|e| Error::Format(format!("skips: {e}")))?)
            }
            other => return Err(Error::Format(format!("unknown config key '{other}'"))),
        }
    }
    match (widths, alpha, variant, skips) {
        (Some(w), Some(a), Some(v), Some(s)) => Ok((w, a, v, s)),
        _ => Err(Error::Format("incomplete config line".into())),
    }
}

/// Parse a checkpoint from its text form. Unknown versions are rejected.
pub fn checkpoint_from_str(text: &str) -> Result<Network> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Format("empty checkpoint".into()))?;
    if header != CKPT_HEADER {
        return Err(Error::Format(format!(
            "unsupported checkpoint version '{header}' (expected '{CKPT_HEADER}')"
        )));
    }
    let config_line =
        lines.next().ok_or_else(|| Error::Format("missing config line".into()))?;
    let (widths, alpha, variant, _skips) = parse_config_line(config_line)?;

    let mut tensors: Vec<(String, Matrix)> = Vec::new();
    let mut lines = lines.peekable();
    while let Some(line) = lines.next() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        if parts.next() != Some("tensor") {
            return Err(Error::Format(format!("expected tensor block, got '{line}'")));
        }
        let name = parts
            .next()
            .ok_or_else(|| Error::Format("tensor block missing name".into()))?
            .to_string();
        let rows: usize = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Format("tensor block missing rows".into()))?;
        let cols: usize = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Format("tensor block missing cols".into()))?;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let row_line = lines
                .next()
                .ok_or_else(|| Error::Format(format!("tensor {name}: truncated data")))?;
            for tok in row_line.split_whitespace() {
                let v: f64 = tok
                    .parse()
                    .map_err(|e| Error::Format(format!("tensor {name}: {e}")))?;
                if !v.is_finite() {
                    return Err(Error::Format(format!("tensor {name}: non-finite entry")));
                }
                data.push(v);
            }
        }
        if data.len() != rows * cols {
            return Err(Error::Format(format!(
                "tensor {name}: expected {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        let m = Matrix::from_shape_vec((rows, cols), data)
            .map_err(|e| Error::Format(format!("tensor {name}: {e}")))?;
        tensors.push((name, m));
    }

    let find = |name: &str| -> Option<Matrix> {
        tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m.clone())
    };
    let mut layers = Vec::new();
    for i in 0..widths.len().saturating_sub(1) {
        let weight = find(&format!("w{i}"))
            .ok_or_else(|| Error::Format(format!("missing tensor w{i}")))?;
        let bias_m = find(&format!("b{i}"))
            .ok_or_else(|| Error::Format(format!("missing tensor b{i}")))?;
        if weight.nrows() != widths[i + 1] || weight.ncols() != widths[i] {
            return Err(Error::Format(format!(
                "tensor w{i} shape disagrees with config widths"
            )));
        }
        let bias = bias_m.row(0).to_owned();
        let skip = find(&format!("d{i}"));
        layers.push(Layer { weight, bias, skip });
    }
    Network::from_layers(layers, variant, alpha)
}

pub fn load_checkpoint(path: &Path) -> Result<Network> {
    let text = std::fs::read_to_string(path)?;
    checkpoint_from_str(&text)
}
