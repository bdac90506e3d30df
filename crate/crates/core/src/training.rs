//! Training at desk scale: IDX and synthetic datasets, softmax cross-entropy,
//! Adam with the projection / reparameterisation mechanics, and learning-curve
//! export.

use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Axis;

use crate::error::{Error, Result};
use crate::network::{build_network, Gradients, Network, NetworkConfig, Variant};
use crate::numerics::{gaussian_sample, Matrix, RngState, Vector};

/// A classification dataset: one flattened sample per row, labels in 0..C.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Matrix,
    pub labels: Vec<u8>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.images.ncols()
    }

    pub fn n_classes(&self) -> usize {
        self.labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0)
    }

    /// Keep only the first `n` samples.
    pub fn truncate(&mut self, n: usize) {
        if n < self.len() {
            self.images = self.images.slice(ndarray::s![..n, ..]).to_owned();
            self.labels.truncate(n);
        }
    }
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32_be(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format(format!("{what}: file truncated in header")))
}

/// Parse a big-endian IDX image/label pair; pixels are scaled into [0, 1].
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let mut image_bytes = Vec::new();
    std::fs::File::open(images_path)?.read_to_end(&mut image_bytes)?;
    let magic = read_u32_be(&image_bytes, 0, "images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "images: bad magic {magic:#010x} (expected {IDX_IMAGES_MAGIC:#010x})"
        )));
    }
    let count = read_u32_be(&image_bytes, 4, "images")? as usize;
    let rows = read_u32_be(&image_bytes, 8, "images")? as usize;
    let cols = read_u32_be(&image_bytes, 12, "images")? as usize;
    let dim = rows * cols;
    let pixels = &image_bytes[16..];
    if pixels.len() != count * dim {
        return Err(Error::Format(format!(
            "images: expected {} pixel bytes, found {}",
            count * dim,
            pixels.len()
        )));
    }

    let mut label_bytes = Vec::new();
    std::fs::File::open(labels_path)?.read_to_end(&mut label_bytes)?;
    let magic = read_u32_be(&label_bytes, 0, "labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "labels: bad magic {magic:#010x} (expected {IDX_LABELS_MAGIC:#010x})"
        )));
    }
    let label_count = read_u32_be(&label_bytes, 4, "labels")? as usize;
    let labels = label_bytes[8..].to_vec();
    if labels.len() != label_count {
        return Err(Error::Format(format!(
            "labels: expected {label_count} bytes, found {}",
            labels.len()
        )));
    }
    if label_count != count {
        return Err(Error::Format(format!(
            "count mismatch: {count} images vs {label_count} labels"
        )));
    }

    let data: Vec<f64> = pixels.iter().map(|&b| b as f64 / 255.0).collect();
    let images = Matrix::from_shape_vec((count, dim), data)
        .map_err(|e| Error::Format(format!("images: {e}")))?;
    Ok(Dataset { images, labels })
}

/// Write a dataset as an IDX pair (pixels quantised to bytes; values are
/// clamped into [0, 1] first).
pub fn write_idx(dataset: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let count = dataset.len() as u32;
    let dim = dataset.dim() as u32;
    let mut image_bytes = Vec::with_capacity(16 + dataset.images.len());
    image_bytes.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    image_bytes.extend_from_slice(&count.to_be_bytes());
    // store as a dim x 1 raster so rows * cols matches the flattened width
    image_bytes.extend_from_slice(&dim.to_be_bytes());
    image_bytes.extend_from_slice(&1u32.to_be_bytes());
    for &v in dataset.images.iter() {
        image_bytes.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    let mut label_bytes = Vec::with_capacity(8 + dataset.labels.len());
    label_bytes.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    label_bytes.extend_from_slice(&count.to_be_bytes());
    label_bytes.extend_from_slice(&dataset.labels);
    crate::cli::write_atomic(images_path, &image_bytes)?;
    crate::cli::write_atomic(labels_path, &label_bytes)?;
    Ok(())
}

/// Gaussian class blobs with means `separation` apart, standardised to zero
/// mean and unit variance per feature.
pub fn synthetic_dataset(
    state: &mut RngState,
    n_classes: usize,
    dim: usize,
    n_per_class: usize,
    separation: f64,
) -> Result<Dataset> {
    if n_classes == 0 || dim == 0 || n_per_class == 0 {
        return Err(Error::Parameter("synthetic dataset sizes must be positive".into()));
    }
    if n_classes > 255 {
        return Err(Error::Parameter("labels are bytes; at most 255 classes".into()));
    }
    if !(separation >= 0.0) {
        return Err(Error::Parameter(format!("separation must be >= 0, got {separation}")));
    }
    let n = n_classes * n_per_class;
    // Class means on scaled basis vectors give exact pairwise distance
    // `separation`; extra classes fall back to random directions.
    let scale = separation / 2.0f64.sqrt();
    let mut means = Matrix::zeros((n_classes, dim));
    let mut mean_rng = state.fork(0);
    for c in 0..n_classes {
        if c < dim {
            means[[c, c]] = scale;
        } else {
            let dir = gaussian_sample(&mut mean_rng, 0.0, 1.0, (1, dim))?;
            let norm = dir.mapv(|v| v * v).sum().sqrt().max(1e-12);
            for d in 0..dim {
                means[[c, d]] = dir[[0, d]] / norm * scale;
            }
        }
    }
    let mut images = gaussian_sample(state, 0.0, 1.0, (n, dim))?;
    let mut labels = Vec::with_capacity(n);
    for c in 0..n_classes {
        for i in 0..n_per_class {
            let row = c * n_per_class + i;
            for d in 0..dim {
                images[[row, d]] += means[[c, d]];
            }
            labels.push(c as u8);
        }
    }
    // Standardise each feature to zero mean and unit variance.
    let nf = n as f64;
    for mut col in images.columns_mut() {
        let mean = col.sum() / nf;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nf;
        let sd = var.sqrt();
        if sd > 1e-12 {
            col.mapv_inplace(|v| (v - mean) / sd);
        } else {
            col.mapv_inplace(|v| v - mean);
        }
    }
    Ok(Dataset { images, labels })
}

/// Mean softmax cross-entropy with log-sum-exp stabilisation; returns the
/// loss and its gradient with respect to the logits.
pub fn cross_entropy(logits: &Matrix, labels: &[u8]) -> Result<(f64, Matrix)> {
    let (b, c) = logits.dim();
    if labels.len() != b {
        return Err(Error::Shape(format!(
            "{} logit rows vs {} labels",
            b,
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| (l as usize) >= c) {
        return Err(Error::Parameter(format!("label {bad} out of range for {c} classes")));
    }
    let mut grad = Matrix::zeros((b, c));
    let mut loss = 0.0;
    for (r, row) in logits.rows().into_iter().enumerate() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for &v in row.iter() {
            z += (v - max).exp();
        }
        let log_z = max + z.ln();
        let label = labels[r] as usize;
        loss += log_z - row[label];
        for (k, &v) in row.iter().enumerate() {
            let softmax = (v - log_z).exp();
            grad[[r, k]] = (softmax - if k == label { 1.0 } else { 0.0 }) / b as f64;
        }
    }
    Ok((loss / b as f64, grad))
}

/// Fraction of rows whose argmax logit equals the label.
pub fn accuracy(logits: &Matrix, labels: &[u8]) -> f64 {
    let mut hits = 0usize;
    for (r, row) in logits.rows().into_iter().enumerate() {
        let mut best = 0usize;
        let mut best_v = f64::NEG_INFINITY;
        for (k, &v) in row.iter().enumerate() {
            if v > best_v {
                best_v = v;
                best = k;
            }
        }
        hits += (best == labels[r] as usize) as usize;
    }
    hits as f64 / labels.len().max(1) as f64
}

/// Adam hyper-parameters; `l2` is added to the gradient (penalty form).
#[derive(Debug, Clone, Copy)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub l2: f64,
}

impl AdamParams {
    pub fn new(lr: f64, l2: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            l2,
        }
    }
}

/// One Adam update on a flat parameter tensor with its moment buffers.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: usize,
    opts: &AdamParams,
) -> Result<()> {
    if t < 1 {
        return Err(Error::Parameter("adam step index starts at 1".into()));
    }
    if params.len() != grads.len() || params.len() != m.len() || params.len() != v.len() {
        return Err(Error::Shape("adam buffers must match parameter length".into()));
    }
    let bc1 = 1.0 - opts.beta1.powi(t as i32);
    let bc2 = 1.0 - opts.beta2.powi(t as i32);
    for i in 0..params.len() {
        let g = grads[i] + opts.l2 * params[i];
        m[i] = opts.beta1 * m[i] + (1.0 - opts.beta1) * g;
        v[i] = opts.beta2 * v[i] + (1.0 - opts.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        params[i] -= opts.lr * m_hat / (v_hat.sqrt() + opts.eps);
    }
    Ok(())
}

/// Adam moment buffers shaped like a network.
#[derive(Debug, Clone)]
pub struct AdamState {
    layers: Vec<LayerMoments>,
    t: usize,
}

#[derive(Debug, Clone)]
struct LayerMoments {
    w_m: Matrix,
    w_v: Matrix,
    b_m: Vector,
    b_v: Vector,
    skip_m: Option<Matrix>,
    skip_v: Option<Matrix>,
}

impl AdamState {
    pub fn new(net: &Network) -> Self {
        let layers = net
            .layers
            .iter()
            .map(|l| LayerMoments {
                w_m: Matrix::zeros(l.weight.dim()),
                w_v: Matrix::zeros(l.weight.dim()),
                b_m: Vector::zeros(l.bias.len()),
                b_v: Vector::zeros(l.bias.len()),
                skip_m: l.skip.as_ref().map(|s| Matrix::zeros(s.dim())),
                skip_v: l.skip.as_ref().map(|s| Matrix::zeros(s.dim())),
            })
            .collect();
        Self { layers, t: 0 }
    }

    /// Apply one optimiser step. L2 acts on weights and skip matrices only.
    pub fn update(&mut self, net: &mut Network, grads: &Gradients, lr: f64, l2: f64) -> Result<()> {
        self.t += 1;
        let with_l2 = AdamParams::new(lr, l2);
        let no_l2 = AdamParams::new(lr, 0.0);
        for (i, lg) in grads.layers.iter().enumerate() {
            let layer = &mut net.layers[i];
            let mom = &mut self.layers[i];
            adam_step(
                layer.weight.as_slice_mut().expect("contiguous"),
                lg.weight.as_slice().expect("contiguous"),
                mom.w_m.as_slice_mut().expect("contiguous"),
                mom.w_v.as_slice_mut().expect("contiguous"),
                self.t,
                &with_l2,
            )?;
            adam_step(
                layer.bias.as_slice_mut().expect("contiguous"),
                lg.bias.as_slice().expect("contiguous"),
                mom.b_m.as_slice_mut().expect("contiguous"),
                mom.b_v.as_slice_mut().expect("contiguous"),
                self.t,
                &no_l2,
            )?;
            if let (Some(skip), Some(gs)) = (layer.skip.as_mut(), lg.skip.as_ref()) {
                adam_step(
                    skip.as_slice_mut().expect("contiguous"),
                    gs.as_slice().expect("contiguous"),
                    mom.skip_m.as_mut().unwrap().as_slice_mut().expect("contiguous"),
                    mom.skip_v.as_mut().unwrap().as_slice_mut().expect("contiguous"),
                    self.t,
                    &with_l2,
                )?;
            }
        }
        Ok(())
    }
}

/// Where training data comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSpec {
    IdxPair {
        images: PathBuf,
        labels: PathBuf,
    },
    Synthetic {
        n_classes: usize,
        dim: usize,
        n_per_class: usize,
        separation: f64,
    },
}

/// Full training-run description.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub network: NetworkConfig,
    pub learning_rate: f64,
    pub l2: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub dataset: DatasetSpec,
    /// Optional cap on the number of samples used.
    pub limit: Option<usize>,
}

/// One recorded optimisation step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    /// Measured wall time; excluded from the CSV so runs stay byte-identical.
    pub wall_ms: f64,
}

/// Per-epoch mean loss and accuracy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_accuracy: f64,
}

/// Per-step and per-epoch training records.
#[derive(Debug, Clone, Default)]
pub struct LearningCurve {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl LearningCurve {
    /// CSV with one row per step. The wall_ms column is written as 0: wall
    /// time is not reproducible and the CSV contract is byte-determinism for
    /// identical (config, seed); timings live on [`StepRecord::wall_ms`].
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,epoch,loss,accuracy,wall_ms\n");
        for s in &self.steps {
            out.push_str(&format!("{},{},{},{},0\n", s.step, s.epoch, s.loss, s.accuracy));
        }
        out
    }
}

/// Fisher-Yates shuffle driven by the run's RNG stream.
fn shuffled_indices(n: usize, rng: &mut RngState) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        idx.swap(i, j);
    }
    idx
}

/// Resolve a dataset path, falling back to `CONVEXINIT_DATA_DIR`.
pub fn resolve_data_path(path: &Path) -> PathBuf {
    if path.exists() {
        return path.to_path_buf();
    }
    if let Ok(dir) = std::env::var("CONVEXINIT_DATA_DIR") {
        let candidate = Path::new(&dir).join(path);
        if candidate.exists() {
            return candidate;
        }
    }
    path.to_path_buf()
}

/// Materialise the dataset named by a config.
pub fn load_dataset(config: &TrainConfig) -> Result<Dataset> {
    let mut data = match &config.dataset {
        DatasetSpec::IdxPair { images, labels } => {
            load_idx(&resolve_data_path(images), &resolve_data_path(labels))?
        }
        DatasetSpec::Synthetic {
            n_classes,
            dim,
            n_per_class,
            separation,
        } => {
            // Data generation draws from a stream decoupled from training.
            let mut rng = RngState::new(config.seed ^ 0x5EED_DA7A);
            synthetic_dataset(&mut rng, *n_classes, *dim, *n_per_class, *separation)?
        }
    };
    if let Some(limit) = config.limit {
        data.truncate(limit);
    }
    Ok(data)
}

/// Run the training loop described by the config.
pub fn train(config: &TrainConfig) -> Result<(Network, LearningCurve)> {
    config.network.validate()?;
    let data = load_dataset(config)?;
    train_on(config, &data)
}

/// Training loop on an already-loaded dataset.
pub fn train_on(config: &TrainConfig, data: &Dataset) -> Result<(Network, LearningCurve)> {
    let n = data.len();
    if n == 0 {
        return Err(Error::Parameter("dataset is empty".into()));
    }
    if config.batch_size == 0 || config.batch_size > n {
        return Err(Error::Parameter(format!(
            "batch size {} must be in 1..={n}",
            config.batch_size
        )));
    }
    if data.dim() != config.network.layer_widths[0] {
        return Err(Error::Shape(format!(
            "dataset dim {} vs input width {}",
            data.dim(),
            config.network.layer_widths[0]
        )));
    }
    let classes = *config.network.layer_widths.last().expect("validated");
    if data.n_classes() > classes {
        return Err(Error::Parameter(format!(
            "dataset has labels up to {} but the network has {classes} outputs",
            data.n_classes() - 1
        )));
    }

    let mut root = RngState::new(config.seed);
    let mut net_rng = root.fork(0);
    let mut shuffle_root = root.fork(1);
    let mut net = build_network(&config.network, &mut net_rng)?;
    let mut curve = LearningCurve::default();
    if config.epochs == 0 {
        return Ok((net, curve));
    }

    let mut adam = AdamState::new(&net);
    let started = Instant::now();
    let mut step = 0usize;
    for epoch in 0..config.epochs {
        let order = shuffled_indices(n, &mut shuffle_root.fork(epoch as u64));
        let mut epoch_loss = 0.0;
        let mut epoch_acc = 0.0;
        let mut epoch_steps = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch = data.images.select(Axis(0), chunk);
            let labels: Vec<u8> = chunk.iter().map(|&i| data.labels[i]).collect();
            let trace = net.forward(&batch)?;
            let (loss, grad_logits) = cross_entropy(trace.output(), &labels)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { step });
            }
            let acc = accuracy(trace.output(), &labels);
            let grads = net.backward(&trace, &grad_logits)?;
            adam.update(&mut net, &grads, config.learning_rate, config.l2)?;
            if net.variant == Variant::IcnnProjection {
                net.project_nonneg()?;
            }
            step += 1;
            epoch_loss += loss;
            epoch_acc += acc;
            epoch_steps += 1;
            curve.steps.push(StepRecord {
                step,
                epoch,
                loss,
                accuracy: acc,
                wall_ms: started.elapsed().as_secs_f64() * 1e3,
            });
        }
        curve.epochs.push(EpochRecord {
            epoch,
            mean_loss: epoch_loss / epoch_steps as f64,
            mean_accuracy: epoch_acc / epoch_steps as f64,
        });
    }
    Ok((net, curve))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::InitScheme;

    fn tmpdir() -> tempfile::TempDir {
        tempfile::tempdir().expect("tempdir")
    }

    #[test]
    fn idx_roundtrip_and_pixel_scaling() {
        let dir = tmpdir();
        let images = dir.path().join("img");
        let labels = dir.path().join("lab");
        let mut rng = RngState::new(1);
        let raw = gaussian_sample(&mut rng, 0.5, 0.05, (40, 12))
            .unwrap()
            .mapv(|v| v.clamp(0.0, 1.0));
        let data = Dataset {
            images: raw,
            labels: (0..40).map(|i| (i % 4) as u8).collect(),
        };
        write_idx(&data, &images, &labels).unwrap();
        let loaded = load_idx(&images, &labels).unwrap();
        assert_eq!(loaded.len(), 40);
        assert_eq!(loaded.dim(), 12);
        assert_eq!(loaded.labels, data.labels);
        for (a, b) in loaded.images.iter().zip(data.images.iter()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12, "quantisation bound");
        }
        // a full-intensity pixel decodes to exactly 1.0
        let ones = Dataset {
            images: Matrix::from_elem((3, 2), 1.0),
            labels: vec![0, 1, 2],
        };
        write_idx(&ones, &images, &labels).unwrap();
        let loaded = load_idx(&images, &labels).unwrap();
        assert!(loaded.images.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn idx_error_paths() {
        let dir = tmpdir();
        let images = dir.path().join("img");
        let labels = dir.path().join("lab");
        let data = Dataset {
            images: Matrix::from_elem((2, 3), 0.5),
            labels: vec![0, 1],
        };
        write_idx(&data, &images, &labels).unwrap();

        // wrong magic, and the message names the offending value
        let mut bad = std::fs::read(&images).unwrap();
        bad[3] = 0x99;
        let bad_path = dir.path().join("bad");
        std::fs::write(&bad_path, &bad).unwrap();
        let err = load_idx(&bad_path, &labels).unwrap_err();
        assert!(err.to_string().contains("0x00000899"), "{err}");

        // truncated pixel payload
        let good = std::fs::read(&images).unwrap();
        std::fs::write(&bad_path, &good[..good.len() - 2]).unwrap();
        assert!(load_idx(&bad_path, &labels).is_err());

        // count mismatch between images and labels
        let extra = Dataset {
            images: Matrix::from_elem((3, 3), 0.5),
            labels: vec![0, 1, 2],
        };
        let images3 = dir.path().join("img3");
        let labels3 = dir.path().join("lab3");
        write_idx(&extra, &images3, &labels3).unwrap();
        let err = load_idx(&images3, &labels).unwrap_err();
        assert!(err.to_string().contains("mismatch"), "{err}");
    }

    /// One-vs-all ridge regression on 2-D features, solved in closed form;
    /// used as the reference linear classifier.
    fn linear_fit_accuracy(data: &Dataset) -> f64 {
        let n = data.len();
        let d = data.dim();
        assert!(d <= 3, "reference solver is for tiny dims");
        let k = d + 1;
        let classes = data.n_classes();
        // normal equations A = X^T X + lambda I (X augmented with bias)
        let mut a = vec![vec![0.0f64; k]; k];
        let mut bt = vec![vec![0.0f64; classes]; k];
        for r in 0..n {
            let mut x = Vec::with_capacity(k);
            for c in 0..d {
                x.push(data.images[[r, c]]);
            }
            x.push(1.0);
            for i in 0..k {
                for j in 0..k {
                    a[i][j] += x[i] * x[j];
                }
                bt[i][data.labels[r] as usize] += x[i];
            }
        }
        for (i, row) in a.iter_mut().enumerate() {
            row[i] += 1e-6;
        }
        // Gaussian elimination for W (k x classes)
        let mut w = bt;
        for col in 0..k {
            let pivot = (col..k)
                .max_by(|&p, &q| a[p][col].abs().partial_cmp(&a[q][col].abs()).unwrap())
                .unwrap();
            a.swap(col, pivot);
            w.swap(col, pivot);
            let p = a[col][col];
            for r in 0..k {
                if r == col {
                    continue;
                }
                let f = a[r][col] / p;
                for c in 0..k {
                    a[r][c] -= f * a[col][c];
                }
                for c in 0..classes {
                    w[r][c] -= f * w[col][c];
                }
            }
        }
        for r in 0..k {
            let p = a[r][r];
            for c in 0..classes {
                w[r][c] /= p;
            }
        }
        let mut hits = 0usize;
        for r in 0..n {
            let mut best = 0;
            let mut best_v = f64::NEG_INFINITY;
            for c in 0..classes {
                let mut v = w[d][c];
                for j in 0..d {
                    v += w[j][c] * data.images[[r, j]];
                }
                if v > best_v {
                    best_v = v;
                    best = c;
                }
            }
            hits += (best == data.labels[r] as usize) as usize;
        }
        hits as f64 / n as f64
    }

    #[test]
    fn synthetic_dataset_properties() {
        let mut rng = RngState::new(2);
        let data = synthetic_dataset(&mut rng, 2, 2, 600, 10.0).unwrap();
        assert_eq!(data.len(), 1200);
        let n = data.len() as f64;
        for col in data.images.columns() {
            let mean = col.sum() / n;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-12);
        }
        assert!(linear_fit_accuracy(&data) > 0.99);

        let mut rng = RngState::new(3);
        let blob = synthetic_dataset(&mut rng, 4, 2, 300, 0.0).unwrap();
        let acc = linear_fit_accuracy(&blob);
        assert!(acc < 0.40, "separation 0 should be near chance, got {acc}");
    }

    #[test]
    fn cross_entropy_analytic_cases() {
        let logits = Matrix::zeros((5, 7));
        let labels = vec![0, 1, 2, 3, 4];
        let (loss, _) = cross_entropy(&logits, &labels).unwrap();
        assert!((loss - (7.0f64).ln()).abs() < 1e-12);

        let mut hot = Matrix::zeros((1, 4));
        hot[[0, 2]] = 50.0;
        let (loss, _) = cross_entropy(&hot, &[2]).unwrap();
        assert!(loss < 1e-12, "matching huge logit loss {loss}");

        assert!(cross_entropy(&hot, &[4]).is_err());
        assert!(cross_entropy(&hot, &[0, 1]).is_err());
    }

    #[test]
    fn cross_entropy_gradient_finite_difference() {
        let mut rng = RngState::new(4);
        let logits = gaussian_sample(&mut rng, 0.0, 1.0, (4, 5)).unwrap();
        let labels = vec![1, 0, 4, 2];
        let (_, grad) = cross_entropy(&logits, &labels).unwrap();
        let eps = 1e-6;
        for r in 0..4 {
            for c in 0..5 {
                let mut up = logits.clone();
                up[[r, c]] += eps;
                let mut down = logits.clone();
                down[[r, c]] -= eps;
                let fu = cross_entropy(&up, &labels).unwrap().0;
                let fd = cross_entropy(&down, &labels).unwrap().0;
                let want = (fu - fd) / (2.0 * eps);
                assert!(
                    (grad[[r, c]] - want).abs() < 1e-6 * want.abs().max(1.0),
                    "grad ({r},{c})"
                );
            }
        }
    }

    #[test]
    fn adam_analytic_cases() {
        let opts = AdamParams::new(0.01, 0.0);
        // first step moves by ~ -lr * sign(g)
        let mut p = [1.0];
        let mut m = [0.0];
        let mut v = [0.0];
        adam_step(&mut p, &[3.7], &mut m, &mut v, 1, &opts).unwrap();
        assert!((p[0] - (1.0 - 0.01)).abs() < 1e-6);
        // zero gradient leaves parameters unchanged
        let mut p = [2.5];
        let mut m = [0.0];
        let mut v = [0.0];
        adam_step(&mut p, &[0.0], &mut m, &mut v, 1, &opts).unwrap();
        assert_eq!(p[0], 2.5);
        assert!(adam_step(&mut p, &[0.0], &mut m, &mut v, 0, &opts).is_err());
    }

    #[test]
    fn adam_converges_on_scalar_quadratic() {
        // 100 steps of f(x) = x^2 from x = 1, lr = 0.1 (recursion lands at
        // |x| ~ 3e-3, well under the 0.1 budget).
        let opts = AdamParams::new(0.1, 0.0);
        let mut p = [1.0];
        let mut m = [0.0];
        let mut v = [0.0];
        for t in 1..=100 {
            let g = [2.0 * p[0]];
            adam_step(&mut p, &g, &mut m, &mut v, t, &opts).unwrap();
        }
        assert!(p[0].abs() < 0.1, "|x| = {}", p[0].abs());
        assert!(p[0].abs() < 0.01, "recursion oracle gives ~3e-3, got {}", p[0].abs());
    }

    fn tiny_config(variant: Variant, scheme: InitScheme, epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            network: NetworkConfig {
                layer_widths: vec![6, 16, 16, 3],
                alpha: 0.0,
                variant,
                skip_connections: false,
                init_scheme: scheme,
            },
            learning_rate: 3e-3,
            l2: 0.0,
            batch_size: 32,
            epochs,
            seed,
            dataset: DatasetSpec::Synthetic {
                n_classes: 3,
                dim: 6,
                n_per_class: 100,
                separation: 4.0,
            },
            limit: None,
        }
    }

    const CONVEX: InitScheme = InitScheme::ConvexInit {
        rho_star: 0.5,
        var_star: 1.0,
        beta: 0.0,
    };

    #[test]
    fn zero_epochs_returns_initial_network() {
        let config = tiny_config(Variant::IcnnProjection, CONVEX, 0, 7);
        let (net, curve) = train(&config).unwrap();
        assert!(curve.steps.is_empty() && curve.epochs.is_empty());
        let mut rng = RngState::new(7);
        let mut net_rng = rng.fork(0);
        let fresh = build_network(&config.network, &mut net_rng).unwrap();
        assert_eq!(net, fresh);
    }

    #[test]
    fn training_decreases_loss_and_keeps_constraints() {
        let config = tiny_config(Variant::IcnnProjection, CONVEX, 5, 8);
        let (net, curve) = train(&config).unwrap();
        let first = curve.epochs.first().unwrap().mean_loss;
        let last = curve.epochs.last().unwrap().mean_loss;
        assert!(last < first, "loss did not decrease: {first} -> {last}");
        for i in 1..net.layers.len() {
            assert!(net.layers[i].weight.iter().all(|&v| v >= 0.0));
        }
        let mut rng = RngState::new(9);
        let report = crate::network::convexity_check(&net, &mut rng, 200, 9).unwrap();
        assert_eq!(report.violations, 0);
        assert!(curve.steps.iter().all(|s| s.loss.is_finite()));
    }

    #[test]
    fn training_is_bit_deterministic() {
        let config = tiny_config(Variant::IcnnExpReparam, CONVEX, 2, 11);
        let (net_a, curve_a) = train(&config).unwrap();
        let (net_b, curve_b) = train(&config).unwrap();
        assert_eq!(curve_a.to_csv(), curve_b.to_csv());
        assert_eq!(
            crate::network::checkpoint_to_string(&net_a),
            crate::network::checkpoint_to_string(&net_b)
        );
        for (a, b) in curve_a.steps.iter().zip(curve_b.steps.iter()) {
            assert_eq!(a.loss.to_bits(), b.loss.to_bits());
            assert_eq!(a.accuracy.to_bits(), b.accuracy.to_bits());
        }
    }

    #[test]
    fn divergence_guard_fires() {
        let mut config = tiny_config(Variant::Nonconvex, InitScheme::DefaultHe, 3, 12);
        config.learning_rate = 1e200;
        match train(&config) {
            Err(Error::Divergence { .. }) | Err(Error::Degenerate(_)) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn config_validation_errors() {
        let mut config = tiny_config(Variant::Nonconvex, InitScheme::DefaultHe, 1, 0);
        config.batch_size = 100_000;
        assert!(matches!(train(&config), Err(Error::Parameter(_))));
        let mut config = tiny_config(Variant::Nonconvex, InitScheme::DefaultHe, 1, 0);
        config.network.layer_widths[0] = 5;
        assert!(train(&config).is_err());
    }

    #[test]
    fn curve_csv_format() {
        let curve = LearningCurve {
            steps: vec![StepRecord {
                step: 1,
                epoch: 0,
                loss: 0.5,
                accuracy: 0.25,
                wall_ms: 123.4,
            }],
            epochs: vec![],
        };
        assert_eq!(curve.to_csv(), "step,epoch,loss,accuracy,wall_ms\n1,0,0.5,0.25,0\n");
    }
}
