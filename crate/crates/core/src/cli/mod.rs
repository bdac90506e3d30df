//! The `convexinit` command line: every experiment behind one executable.
//!
//! Exit codes: 0 on success, 1 on a domain error, 2 on a usage error. All
//! randomness is controlled by `--seed` (train runs take theirs from the
//! config file instead). CSV output uses '.' decimals, '\n' line endings and
//! always carries a header row.

pub mod config;
pub mod svg;

use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use crate::error::{Error, Result};
use crate::init::{baseline_init_params, convex_init_params, jacobian_eigenvalues, BaselineScheme, InitParams};
use crate::kernels::{f_c, kernel_mc_oracle, lrelu_deriv_kernel, lrelu_kernel, lrelu_mean, lrelu_sqmean, relu_kernel, McMode};
use crate::levelset::level_trajectory;
use crate::network::{load_checkpoint, save_checkpoint, Layer, Network, Variant};
use crate::numerics::{gaussian_sample, lognormal_sample, RngState, Vector};
use crate::propagation::{analytic_forward_stats, empirical_layer_stats, sample_equicorrelated, MomentState};
use crate::training::train;

/// Write a file atomically: write to a sibling temp path, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Parser)]
#[command(
    name = "convexinit",
    version,
    about = "Signal-propagation diagnostics and principled initialisation for input-convex networks"
)]
struct Cli {
    /// Seed for all randomness in this invocation
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum SchemeArg {
    Convex,
    He,
    Lecun,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum WeightsArg {
    /// Log-normal samples with the derived mean/variance (the ICNN scheme)
    Lognormal,
    /// Gaussian samples with the same mean/variance (the regime the moment
    /// recursion models; useful to separate theory error from tail noise)
    Gaussian,
}

#[derive(Subcommand)]
enum Command {
    /// Closed-form activation kernels next to their Monte-Carlo estimates
    Kernels {
        #[arg(long, allow_hyphen_values = true)]
        rho: f64,
        #[arg(long, default_value_t = 1.0)]
        var: f64,
        #[arg(long, default_value_t = 0.0)]
        alpha: f64,
        /// Monte-Carlo sample count
        #[arg(long, default_value_t = 1_000_000)]
        samples: usize,
        /// Fan-in for the correlation-propagation function f_c
        #[arg(long, default_value_t = 100)]
        fan_in: usize,
    },
    /// Initialisation parameters (and their log-normal form) as CSV
    InitParams {
        #[arg(long)]
        fan_in: usize,
        #[arg(long, default_value_t = 0.0)]
        alpha: f64,
        #[arg(long, default_value_t = 0.5)]
        rho_star: f64,
        #[arg(long, default_value_t = 1.0)]
        var_star: f64,
        #[arg(long, default_value_t = 0.0)]
        beta: f64,
        #[arg(long, value_enum, default_value_t = SchemeArg::Convex)]
        scheme: SchemeArg,
    },
    /// Jacobian eigenvalues of the moment map over a fan-in range
    Stability {
        #[arg(long, default_value_t = 0.5)]
        rho_star: f64,
        #[arg(long, default_value_t = 0.0)]
        alpha: f64,
        #[arg(long, default_value_t = 2)]
        n_min: usize,
        #[arg(long, default_value_t = 64)]
        n_max: usize,
    },
    /// Analytic vs empirical per-layer moments of a constrained stack
    Propagate {
        /// Stack widths: input,layer1,layer2,...
        #[arg(long, value_delimiter = ',')]
        widths: Vec<usize>,
        #[arg(long, default_value_t = 0.0)]
        alpha: f64,
        #[arg(long, value_enum, default_value_t = SchemeArg::Convex)]
        scheme: SchemeArg,
        #[arg(long, default_value_t = 0.5)]
        rho_star: f64,
        #[arg(long, default_value_t = 1.0)]
        var_star: f64,
        #[arg(long, default_value_t = 0.0)]
        beta: f64,
        /// Mean of the synthetic pre-activations fed to the stack
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        input_mean: f64,
        #[arg(long, default_value_t = 1.0)]
        input_var: f64,
        #[arg(long, default_value_t = 0.5)]
        input_rho: f64,
        #[arg(long, default_value_t = 4096)]
        batch: usize,
        #[arg(long, default_value_t = 61)]
        bins: usize,
        #[arg(long, value_enum, default_value_t = WeightsArg::Lognormal)]
        weights: WeightsArg,
        /// Write per-layer histogram small-multiples to this SVG file
        #[arg(long)]
        svg: Option<PathBuf>,
    },
    /// Train a network from a config manifest
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory for curve.csv and model.ckpt
        #[arg(long)]
        out: PathBuf,
    },
    /// Trace a level set of a trained ICNN between two inputs
    Levelset {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 0)]
        output_index: usize,
        /// Reference input as comma-separated numbers
        #[arg(long = "ref", allow_hyphen_values = true)]
        reference: String,
        /// Target input as comma-separated numbers
        #[arg(long, allow_hyphen_values = true)]
        target: String,
        #[arg(long, default_value_t = 16)]
        points: usize,
        /// Write the trajectory CSV here instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate several curve.csv files into a median +- IQR band SVG
    Report {
        /// curve.csv files from repeated runs
        #[arg(long, num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Logarithmic loss axis
        #[arg(long, default_value_t = false)]
        log_y: bool,
    },
}

/// Parse and run; returns the process exit code.
pub fn run(args: &[String]) -> i32 {
    let mut argv = vec!["convexinit".to_string()];
    argv.extend_from_slice(args);
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    return 0;
                }
                _ => 2,
            };
            eprint!("{e}");
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(Usage(message)) => {
            eprintln!("{message}");
            2
        }
        Err(Domain(e)) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Errors surfaced by subcommands, split by exit code.
enum RunError {
    Usage(String),
    Domain(Error),
}
use RunError::{Domain, Usage};

impl From<Error> for RunError {
    fn from(e: Error) -> Self {
        Domain(e)
    }
}

fn dispatch(cli: Cli) -> std::result::Result<(), RunError> {
    match cli.command {
        Command::Kernels {
            rho,
            var,
            alpha,
            samples,
            fan_in,
        } => cmd_kernels(cli.seed, rho, var, alpha, samples, fan_in).map_err(Into::into),
        Command::InitParams {
            fan_in,
            alpha,
            rho_star,
            var_star,
            beta,
            scheme,
        } => cmd_init_params(fan_in, alpha, rho_star, var_star, beta, scheme).map_err(Into::into),
        Command::Stability {
            rho_star,
            alpha,
            n_min,
            n_max,
        } => cmd_stability(rho_star, alpha, n_min, n_max).map_err(Into::into),
        Command::Propagate {
            widths,
            alpha,
            scheme,
            rho_star,
            var_star,
            beta,
            input_mean,
            input_var,
            input_rho,
            batch,
            bins,
            weights,
            svg,
        } => cmd_propagate(
            cli.seed, &widths, alpha, scheme, rho_star, var_star, beta, input_mean, input_var,
            input_rho, batch, bins, weights, svg.as_deref(),
        )
        .map_err(Into::into),
        Command::Train { config, out } => cmd_train(&config, &out),
        Command::Levelset {
            model,
            output_index,
            reference,
            target,
            points,
            out,
        } => cmd_levelset(&model, output_index, &reference, &target, points, out.as_deref())
            .map_err(Into::into),
        Command::Report { inputs, out, log_y } => {
            cmd_report(&inputs, &out, log_y).map_err(Into::into)
        }
    }
}

fn cmd_kernels(
    seed: u64,
    rho: f64,
    var: f64,
    alpha: f64,
    samples: usize,
    fan_in: usize,
) -> Result<()> {
    let mut rng = RngState::new(seed);
    let mut rows = String::from("quantity,rho,var,alpha,closed_form,mc_estimate,mc_stderr\n");
    let mut push = |name: &str, closed: f64, mc: Option<(f64, f64)>| {
        let (est, se) = match mc {
            Some((e, s)) => (e.to_string(), s.to_string()),
            None => (String::new(), String::new()),
        };
        rows.push_str(&format!("{name},{rho},{var},{alpha},{closed},{est},{se}\n"));
    };
    let mc_value = kernel_mc_oracle(&mut rng.fork(0), rho, var, 0.0, samples, McMode::Value)?;
    push("relu_kernel", relu_kernel(rho, var)?, Some(mc_value));
    let mc_value = kernel_mc_oracle(&mut rng.fork(1), rho, var, alpha, samples, McMode::Value)?;
    push("lrelu_kernel", lrelu_kernel(rho, var, alpha)?, Some(mc_value));
    let mc_mean = kernel_mc_oracle(&mut rng.fork(2), rho, var, alpha, samples, McMode::Mean)?;
    push("lrelu_mean", lrelu_mean(var, alpha)?, Some(mc_mean));
    let mc_sq = kernel_mc_oracle(&mut rng.fork(3), 1.0, var, alpha, samples, McMode::Value)?;
    push("lrelu_sqmean", lrelu_sqmean(var, alpha)?, Some(mc_sq));
    let mc_deriv =
        kernel_mc_oracle(&mut rng.fork(4), rho, var, alpha, samples, McMode::Derivative)?;
    push("lrelu_deriv_kernel", lrelu_deriv_kernel(rho, alpha)?, Some(mc_deriv));
    push("f_c", f_c(rho, fan_in, alpha)?, None);
    print!("{rows}");
    Ok(())
}

fn cmd_init_params(
    fan_in: usize,
    alpha: f64,
    rho_star: f64,
    var_star: f64,
    beta: f64,
    scheme: SchemeArg,
) -> Result<()> {
    let params = match scheme {
        SchemeArg::Convex => convex_init_params(fan_in, alpha, rho_star, var_star, beta)?,
        SchemeArg::He => baseline_init_params(BaselineScheme::He, fan_in, alpha)?,
        SchemeArg::Lecun => baseline_init_params(BaselineScheme::Lecun, fan_in, alpha)?,
    };
    let (lmu, lvar) = match params.lognormal() {
        Ok(pair) => (pair.0.to_string(), pair.1.to_string()),
        Err(_) => (String::new(), String::new()),
    };
    println!("fan_in,alpha,rho_star,var_star,beta,mu_w,var_w,mu_b,var_b,lognormal_mu,lognormal_var");
    println!(
        "{},{},{},{},{},{},{},{},{},{lmu},{lvar}",
        params.fan_in,
        params.alpha,
        params.rho_star,
        params.var_star,
        params.beta,
        params.mu_w,
        params.var_w,
        params.mu_b,
        params.var_b
    );
    Ok(())
}

fn cmd_stability(rho_star: f64, alpha: f64, n_min: usize, n_max: usize) -> Result<()> {
    if n_min < 1 || n_min > n_max {
        return Err(Error::Parameter(format!("invalid fan-in range {n_min}..{n_max}")));
    }
    println!("n,lambda1,lambda2,stable");
    for n in n_min..=n_max {
        let (l1, l2) = jacobian_eigenvalues(rho_star, n, alpha)?;
        println!("{n},{l1},{l2},{}", l1.abs() < 1.0 && l2.abs() < 1.0);
    }
    Ok(())
}

fn scheme_params(
    scheme: SchemeArg,
    fan_in: usize,
    alpha: f64,
    rho_star: f64,
    var_star: f64,
    beta: f64,
) -> Result<InitParams> {
    match scheme {
        SchemeArg::Convex => convex_init_params(fan_in, alpha, rho_star, var_star, beta),
        SchemeArg::He => baseline_init_params(BaselineScheme::He, fan_in, alpha),
        SchemeArg::Lecun => baseline_init_params(BaselineScheme::Lecun, fan_in, alpha),
    }
}

/// Build one constrained stack layer, optionally forcing Gaussian sampling.
fn stack_layer(params: &InitParams, fan_out: usize, gaussian: bool, rng: &mut RngState) -> Result<Layer> {
    let shape = (fan_out, params.fan_in);
    let weight = if gaussian || params.mu_w == 0.0 {
        let mut w = gaussian_sample(rng, params.mu_w, params.var_w, shape)?;
        if !gaussian {
            w.mapv_inplace(|v| v.max(0.0));
        }
        w
    } else {
        let (mt, vt) = params.lognormal()?;
        lognormal_sample(rng, mt, vt, shape)?
    };
    let bias = if params.var_b > 0.0 {
        let noise = gaussian_sample(rng, 0.0, params.var_b, (1, fan_out))?;
        Vector::from_iter(noise.iter().map(|z| params.mu_b + z))
    } else {
        Vector::from_elem(fan_out, params.mu_b)
    };
    Ok(Layer {
        weight,
        bias,
        skip: None,
    })
}

#[allow(clippy::too_many_arguments)]
fn cmd_propagate(
    seed: u64,
    widths: &[usize],
    alpha: f64,
    scheme: SchemeArg,
    rho_star: f64,
    var_star: f64,
    beta: f64,
    input_mean: f64,
    input_var: f64,
    input_rho: f64,
    batch: usize,
    bins: usize,
    weights: WeightsArg,
    svg_path: Option<&Path>,
) -> Result<()> {
    if widths.len() < 2 {
        return Err(Error::Parameter(
            "--widths needs an input width and at least one layer".into(),
        ));
    }
    let gaussian = matches!(weights, WeightsArg::Gaussian);
    let mut rng = RngState::new(seed);
    let mut params = Vec::new();
    let mut layers = Vec::new();
    for i in 0..widths.len() - 1 {
        let p = scheme_params(scheme, widths[i], alpha, rho_star, var_star, beta)?;
        let mut lrng = rng.fork(i as u64);
        layers.push(stack_layer(&p, widths[i + 1], gaussian, &mut lrng)?);
        params.push(p);
    }
    let variant = if gaussian {
        Variant::Nonconvex
    } else {
        Variant::IcnnProjection
    };
    let net = Network::from_layers(layers, variant, alpha)?;

    let input = MomentState::new(input_mean, input_var, input_rho)?;
    let analytic = analytic_forward_stats(&params, input)?;
    let synth = sample_equicorrelated(
        &mut rng.fork(u64::MAX),
        batch,
        widths[0],
        input_mean,
        input_var,
        input_rho,
    )?;
    let fed = synth.mapv(|v| crate::kernels::lrelu(v, alpha));
    let empirical = empirical_layer_stats(&net, &fed, bins)?;

    println!("layer,analytic_mean,analytic_var,analytic_rho,empirical_mean,empirical_var,empirical_rho");
    for (i, (a, e)) in analytic.layers.iter().zip(empirical.iter()).enumerate() {
        println!(
            "{i},{},{},{},{},{},{}",
            a.mean, a.var, a.rho, e.mean, e.var, e.mean_offdiag_corr
        );
    }
    for i in &analytic.noncentred_layers {
        eprintln!("note: layer {i} input violates the centred-Gaussian regime");
    }
    if let Some(path) = svg_path {
        let svg = svg::histogram_svg(&empirical)?;
        write_atomic(path, svg.as_bytes())?;
    }
    Ok(())
}

fn cmd_train(config_path: &Path, out_dir: &Path) -> std::result::Result<(), RunError> {
    let text = std::fs::read_to_string(config_path).map_err(|e| {
        Usage(format!(
            "cannot read config '{}': {e}\nusage: convexinit train --config <path> --out <dir>",
            config_path.display()
        ))
    })?;
    let config = config::parse_train_config(&text)?;
    let started = std::time::Instant::now();
    let (net, curve) = train(&config)?;
    std::fs::create_dir_all(out_dir).map_err(Error::from)?;
    write_atomic(&out_dir.join("curve.csv"), curve.to_csv().as_bytes())?;
    save_checkpoint(&net, &out_dir.join("model.ckpt"))?;
    let final_loss = curve.epochs.last().map(|e| e.mean_loss);
    eprintln!(
        "trained {} steps in {:.1}s; final epoch loss {}",
        curve.steps.len(),
        started.elapsed().as_secs_f64(),
        final_loss.map(|l| l.to_string()).unwrap_or_else(|| "n/a".into())
    );
    Ok(())
}

fn parse_vector(text: &str, what: &str) -> Result<Vector> {
    let values: Result<Vec<f64>> = text
        .split(',')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|e| Error::Parameter(format!("{what}: {e}")))
        })
        .collect();
    Ok(Vector::from_vec(values?))
}

fn cmd_levelset(
    model: &Path,
    output_index: usize,
    reference: &str,
    target: &str,
    points: usize,
    out: Option<&Path>,
) -> Result<()> {
    let net = load_checkpoint(model)?;
    let x_ref = parse_vector(reference, "--ref")?;
    let x_tgt = parse_vector(target, "--target")?;
    let traj = level_trajectory(&net, output_index, &x_ref, &x_tgt, points)?;
    let objective = crate::levelset::IcnnOutput::new(&net, output_index)?;
    use crate::levelset::ConvexObjective;
    let dim = x_ref.len();
    let mut csv = String::new();
    let mut header: Vec<String> = (0..dim).map(|d| format!("x{d}")).collect();
    header.push("f".into());
    header.push("residual".into());
    csv.push_str(&header.join(","));
    csv.push('\n');
    for (p, r) in traj.points.iter().zip(traj.residuals.iter()) {
        let mut row: Vec<String> = p.iter().map(|v| v.to_string()).collect();
        row.push(objective.value(p)?.to_string());
        row.push(r.to_string());
        csv.push_str(&row.join(","));
        csv.push('\n');
    }
    match out {
        Some(path) => write_atomic(path, csv.as_bytes())?,
        None => print!("{csv}"),
    }
    Ok(())
}

/// One parsed curve.csv: step -> loss.
fn read_curve(path: &Path) -> Result<Vec<(usize, f64)>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format(format!("{}: empty file", path.display())))?;
    if !header.starts_with("step,epoch,loss") {
        return Err(Error::Format(format!(
            "{}: expected a curve.csv header, got '{header}'",
            path.display()
        )));
    }
    let mut out = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 3 {
            return Err(Error::Format(format!("{}: malformed row '{line}'", path.display())));
        }
        let step: usize = fields[0]
            .parse()
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let loss: f64 = fields[2]
            .parse()
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        out.push((step, loss));
    }
    Ok(out)
}

/// Linear-interpolated quantile of a sorted slice.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.len() == 1 {
        return sorted[0];
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

fn cmd_report(inputs: &[PathBuf], out: &Path, log_y: bool) -> Result<()> {
    let curves: Result<Vec<_>> = inputs.iter().map(|p| read_curve(p)).collect();
    let curves = curves?;
    if curves.iter().any(|c| c.is_empty()) {
        return Err(Error::Parameter("a curve file has no data rows".into()));
    }
    // group losses by step across runs
    let mut by_step: std::collections::BTreeMap<usize, Vec<f64>> = std::collections::BTreeMap::new();
    for curve in &curves {
        for &(step, loss) in curve {
            by_step.entry(step).or_default().push(loss);
        }
    }
    let mut median = Vec::new();
    let mut low = Vec::new();
    let mut high = Vec::new();
    for (&step, losses) in &by_step {
        let mut sorted = losses.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite losses"));
        let x = step as f64;
        median.push((x, quantile(&sorted, 0.5)));
        low.push((x, quantile(&sorted, 0.25)));
        high.push((x, quantile(&sorted, 0.75)));
    }
    let series = [svg::Series {
        name: format!("median of {} runs", curves.len()),
        points: median,
    }];
    let band = svg::Band { low, high };
    let chart = svg::ChartSpec {
        title: "training loss (median, inter-quartile band)".into(),
        x_label: "step".into(),
        y_label: "loss".into(),
        log_y,
    };
    let rendered = svg::render_svg(&series, Some(&band), &chart)?;
    write_atomic(out, rendered.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantile_interpolation() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert_eq!(quantile(&v, 1.0), 4.0);
        assert_eq!(quantile(&v, 0.5), 2.5);
        assert_eq!(quantile(&[7.0], 0.5), 7.0);
    }

    #[test]
    fn vector_parsing() {
        let v = parse_vector("1.0, -2.5,3", "test").unwrap();
        assert_eq!(v.len(), 3);
        assert_eq!(v[1], -2.5);
        assert!(parse_vector("1.0,abc", "test").is_err());
    }
}
