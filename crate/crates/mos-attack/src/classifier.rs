//! A small fully-connected classifier with rectified-linear hidden layers,
//! deterministic seeded training (optionally adversarial), analytic
//! forward/backward passes, and a versioned binary weight format.
//!
//! The attack stack only ever needs logits and input gradients, so this is
//! the entire model zoo: dense layers, ReLU, nothing else. The ReLU
//! subgradient at exactly zero is defined as 0 so gradients are
//! deterministic.

use crate::losses::{self, LogitContext, LossId};
use crate::numerics::Mat;
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const WEIGHT_MAGIC: &[u8; 8] = b"MOSMODEL";
const WEIGHT_VERSION: u32 = 1;

/// Immutable parameters of the classifier: `layer_dims = [d, h1, .., C]`,
/// one weight matrix (`dims[l+1] x dims[l]`) and bias per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierWeights {
    layer_dims: Vec<usize>,
    weights: Vec<Mat>,
    biases: Vec<Vec<f64>>,
}

impl ClassifierWeights {
    pub fn new(layer_dims: Vec<usize>, weights: Vec<Mat>, biases: Vec<Vec<f64>>) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(Error::InvalidArgument(
                "need at least input and output layer dims".into(),
            ));
        }
        if *layer_dims.last().unwrap() < 2 {
            return Err(Error::InvalidArgument(
                "classifier needs at least 2 output classes".into(),
            ));
        }
        if layer_dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument("zero-width layer".into()));
        }
        let layers = layer_dims.len() - 1;
        if weights.len() != layers || biases.len() != layers {
            return Err(Error::ShapeMismatch(format!(
                "{} layer dims imply {layers} weight/bias pairs, got {}/{}",
                layer_dims.len(),
                weights.len(),
                biases.len()
            )));
        }
        for l in 0..layers {
            let (fan_in, fan_out) = (layer_dims[l], layer_dims[l + 1]);
            if weights[l].rows() != fan_out || weights[l].cols() != fan_in {
                return Err(Error::ShapeMismatch(format!(
                    "layer {l}: expected {fan_out}x{fan_in} weights, got {}x{}",
                    weights[l].rows(),
                    weights[l].cols()
                )));
            }
            if biases[l].len() != fan_out {
                return Err(Error::ShapeMismatch(format!(
                    "layer {l}: expected bias of length {fan_out}, got {}",
                    biases[l].len()
                )));
            }
            if weights[l].as_slice().iter().any(|v| !v.is_finite())
                || biases[l].iter().any(|v| !v.is_finite())
            {
                return Err(Error::InvalidArgument(format!(
                    "layer {l} contains non-finite parameters"
                )));
            }
        }
        Ok(Self {
            layer_dims,
            weights,
            biases,
        })
    }

    /// Glorot-uniform initialization, deterministic per seed.
    pub fn seeded_init(layer_dims: &[usize], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in layer_dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            weights.push(Mat::from_fn(fan_out, fan_in, |_, _| {
                rng.random_range(-limit..limit)
            }));
            biases.push(vec![0.0; fan_out]);
        }
        Self::new(layer_dims.to_vec(), weights, biases)
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    fn num_layers(&self) -> usize {
        self.weights.len()
    }

    /// Forward pass returning all post-activation values per layer
    /// (`acts[0]` is the input itself, `acts.last()` the logits).
    fn forward_trace(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        if x.len() != self.input_dim() {
            return Err(Error::ShapeMismatch(format!(
                "input has {} features, model expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        let mut acts = Vec::with_capacity(self.num_layers() + 1);
        acts.push(x.to_vec());
        for l in 0..self.num_layers() {
            let mut z = self.weights[l].matvec(acts.last().unwrap())?;
            for (zi, bi) in z.iter_mut().zip(&self.biases[l]) {
                *zi += bi;
            }
            if l + 1 < self.num_layers() {
                for zi in z.iter_mut() {
                    if *zi <= 0.0 {
                        *zi = 0.0;
                    }
                }
            }
            acts.push(z);
        }
        Ok(acts)
    }

    /// Logits for input `x`.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_trace(x)?.pop().unwrap())
    }

    /// Reverse-accumulated `(dh/dx)^T * grad_logits`.
    pub fn backward_input(&self, x: &[f64], grad_logits: &[f64]) -> Result<Vec<f64>> {
        if grad_logits.len() != self.num_classes() {
            return Err(Error::ShapeMismatch(format!(
                "gradient has {} entries, model has {} classes",
                grad_logits.len(),
                self.num_classes()
            )));
        }
        let acts = self.forward_trace(x)?;
        let mut g = grad_logits.to_vec();
        for l in (0..self.num_layers()).rev() {
            if l + 1 < self.num_layers() {
                // ReLU mask; subgradient at 0 is 0.
                for (gi, ai) in g.iter_mut().zip(&acts[l + 1]) {
                    if *ai <= 0.0 {
                        *gi = 0.0;
                    }
                }
            }
            g = self.weights[l].matvec_t(&g)?;
        }
        Ok(g)
    }

    /// Argmax of the logits, ties broken toward the lowest index.
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        let logits = self.forward(x)?;
        let mut best = 0;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        Ok(best)
    }

    /// One SGD step on mean cross entropy over the batch, mutating weights.
    fn sgd_step(&mut self, batch: &[(&[f64], usize)], step_size: f64) -> Result<f64> {
        let layers = self.num_layers();
        let mut gw: Vec<Mat> = self
            .weights
            .iter()
            .map(|w| Mat::zeros(w.rows(), w.cols()))
            .collect();
        let mut gb: Vec<Vec<f64>> = self.biases.iter().map(|b| vec![0.0; b.len()]).collect();
        let scale = 1.0 / batch.len() as f64;
        let mut total_loss = 0.0;
        for &(x, y) in batch {
            let acts = self.forward_trace(x)?;
            let logits = acts.last().unwrap();
            let p = losses::softmax(logits);
            total_loss += -p[y].max(1e-300).ln();
            let mut g: Vec<f64> = p
                .iter()
                .enumerate()
                .map(|(i, &pi)| (pi - if i == y { 1.0 } else { 0.0 }) * scale)
                .collect();
            for l in (0..layers).rev() {
                if l + 1 < layers {
                    for (gi, ai) in g.iter_mut().zip(&acts[l + 1]) {
                        if *ai <= 0.0 {
                            *gi = 0.0;
                        }
                    }
                }
                for r in 0..gw[l].rows() {
                    let gr = g[r];
                    for c in 0..gw[l].cols() {
                        let cur = gw[l].get(r, c);
                        gw[l].set(r, c, cur + gr * acts[l][c]);
                    }
                }
                for (b, gi) in gb[l].iter_mut().zip(&g) {
                    *b += gi;
                }
                g = self.weights[l].matvec_t(&g)?;
            }
        }
        for l in 0..layers {
            let w = self.weights[l].as_mut_slice();
            for (wi, gi) in w.iter_mut().zip(gw[l].as_slice()) {
                *wi -= step_size * gi;
            }
            for (bi, gi) in self.biases[l].iter_mut().zip(&gb[l]) {
                *bi -= step_size * gi;
            }
        }
        Ok(total_loss / batch.len() as f64)
    }

    /// Fraction of the dataset classified correctly.
    pub fn accuracy(&self, data: &Dataset) -> Result<f64> {
        let mut correct = 0usize;
        for p in &data.points {
            if self.predict(&p.x)? == p.y {
                correct += 1;
            }
        }
        Ok(correct as f64 / data.points.len().max(1) as f64)
    }

    /// Write the weights in the versioned binary format: magic, version,
    /// layer dims, then little-endian f64 parameters (weights row-major,
    /// then bias, per layer).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        w.write_all(WEIGHT_MAGIC)?;
        w.write_all(&WEIGHT_VERSION.to_le_bytes())?;
        w.write_all(&(self.layer_dims.len() as u32).to_le_bytes())?;
        for &d in &self.layer_dims {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for l in 0..self.num_layers() {
            for v in self.weights[l].as_slice() {
                w.write_all(&v.to_le_bytes())?;
            }
            for v in &self.biases[l] {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Read weights written by [`ClassifierWeights::save`]. Malformed input
    /// is reported with the byte offset at which parsing failed.
    pub fn load(path: &Path) -> Result<Self> {
        let mut r = OffsetReader {
            inner: BufReader::new(std::fs::File::open(path)?),
            offset: 0,
        };
        let mut magic = [0u8; 8];
        r.read_exact_at(&mut magic, "magic")?;
        if &magic != WEIGHT_MAGIC {
            return Err(Error::Parse {
                offset: 0,
                detail: format!("bad magic {magic:?}, expected {WEIGHT_MAGIC:?}"),
            });
        }
        let version = r.read_u32("format version")?;
        if version != WEIGHT_VERSION {
            return Err(Error::Parse {
                offset: 8,
                detail: format!("unsupported format version {version}"),
            });
        }
        let n_dims = r.read_u32("layer count")? as usize;
        if !(2..=64).contains(&n_dims) {
            return Err(Error::Parse {
                offset: 12,
                detail: format!("implausible layer count {n_dims}"),
            });
        }
        let mut layer_dims = Vec::with_capacity(n_dims);
        for _ in 0..n_dims {
            let d = r.read_u64("layer dim")? as usize;
            layer_dims.push(d);
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in layer_dims.clone().windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let mut data = Vec::with_capacity(fan_in * fan_out);
            for _ in 0..fan_in * fan_out {
                data.push(r.read_f64("weight")?);
            }
            weights.push(Mat::from_vec(fan_out, fan_in, data)?);
            let mut b = Vec::with_capacity(fan_out);
            for _ in 0..fan_out {
                b.push(r.read_f64("bias")?);
            }
            biases.push(b);
        }
        let offset = r.offset;
        let mut trailing = [0u8; 1];
        if r.inner.read(&mut trailing)? != 0 {
            return Err(Error::Parse {
                offset,
                detail: "trailing bytes after parameters".into(),
            });
        }
        Self::new(layer_dims, weights, biases).map_err(|e| Error::Parse {
            offset,
            detail: e.to_string(),
        })
    }
}

struct OffsetReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> OffsetReader<R> {
    fn read_exact_at(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let at = self.offset;
        self.inner.read_exact(buf).map_err(|e| Error::Parse {
            offset: at,
            detail: format!("reading {what}: {e}"),
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn read_u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact_at(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn read_u64(&mut self, what: &str) -> Result<u64> {
        let mut b = [0u8; 8];
        self.read_exact_at(&mut b, what)?;
        Ok(u64::from_le_bytes(b))
    }

    fn read_f64(&mut self, what: &str) -> Result<f64> {
        let mut b = [0u8; 8];
        self.read_exact_at(&mut b, what)?;
        Ok(f64::from_le_bytes(b))
    }
}

/// One feature vector in `[0,1]^d` with its class label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPoint {
    pub x: Vec<f64>,
    pub y: usize,
}

/// A labeled dataset with a fixed feature dimension and class count.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub points: Vec<LabeledPoint>,
    pub dim: usize,
    pub classes: usize,
}

impl Dataset {
    pub fn new(points: Vec<LabeledPoint>, dim: usize, classes: usize) -> Result<Self> {
        if classes < 2 {
            return Err(Error::InvalidArgument("need at least 2 classes".into()));
        }
        for (i, p) in points.iter().enumerate() {
            if p.x.len() != dim {
                return Err(Error::ShapeMismatch(format!(
                    "point {i} has {} features, dataset dim is {dim}",
                    p.x.len()
                )));
            }
            if p.x.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::InvalidArgument(format!(
                    "point {i} has a feature outside [0,1]"
                )));
            }
            if p.y >= classes {
                return Err(Error::InvalidArgument(format!(
                    "point {i} has label {} >= {classes}",
                    p.y
                )));
            }
        }
        Ok(Self {
            points,
            dim,
            classes,
        })
    }

    /// Gaussian blobs clipped to the unit box; class labels cycle
    /// round-robin so the dataset is balanced.
    ///
    /// The `dim == 2, classes == 3` case is the attack benchmark: the first
    /// axis separates the classes robustly (means 0.15/0.50/0.85, noise
    /// `sigma`) while the second axis separates them perfectly but with a
    /// brittle margin (means 0.44/0.50/0.56, noise 0.01) that sits inside a
    /// typical perturbation budget. A plainly trained classifier leans on
    /// the brittle axis and is easy to attack; an adversarially trained one
    /// has to fall back to the robust axis. Other shapes use isotropic
    /// blobs with seeded means in `[0.3, 0.7]^dim`.
    pub fn gaussian_blobs(seed: u64, n: usize, dim: usize, classes: usize, sigma: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (means, sigmas): (Vec<Vec<f64>>, Vec<Vec<f64>>) = if dim == 2 && classes == 3 {
            (
                vec![vec![0.15, 0.44], vec![0.50, 0.50], vec![0.85, 0.56]],
                vec![vec![sigma, 0.01]; 3],
            )
        } else {
            (
                (0..classes)
                    .map(|_| (0..dim).map(|_| rng.random_range(0.3..0.7)).collect())
                    .collect(),
                vec![vec![sigma; dim]; classes],
            )
        };
        let unit = Normal::new(0.0, 1.0).expect("unit normal");
        let mut points = Vec::with_capacity(n);
        for i in 0..n {
            let y = i % classes;
            let x = means[y]
                .iter()
                .zip(&sigmas[y])
                .map(|(&m, &s)| (m + s * unit.sample(&mut rng)).clamp(0.0, 1.0))
                .collect();
            points.push(LabeledPoint { x, y });
        }
        Self {
            points,
            dim,
            classes,
        }
    }

    /// Write as CSV: feature columns `f0..f{d-1}` then a `label` column.
    pub fn to_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        let mut header: Vec<String> = (0..self.dim).map(|i| format!("f{i}")).collect();
        header.push("label".into());
        w.write_record(&header).map_err(csv_err)?;
        for p in &self.points {
            let mut rec: Vec<String> = p.x.iter().map(|v| v.to_string()).collect();
            rec.push(p.y.to_string());
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Read CSV written by [`Dataset::to_csv`]. The class count is taken as
    /// `max label + 1`, but at least 2.
    pub fn from_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
        let headers = r.headers().map_err(csv_err)?.clone();
        if headers.len() < 2 || headers.iter().last() != Some("label") {
            return Err(Error::Parse {
                offset: 0,
                detail: "expected feature columns followed by a `label` column".into(),
            });
        }
        let dim = headers.len() - 1;
        let mut points = Vec::new();
        let mut classes = 2usize;
        for rec in r.records() {
            let rec = rec.map_err(csv_err)?;
            let offset = rec.position().map(|p| p.byte()).unwrap_or(0);
            if rec.len() != dim + 1 {
                return Err(Error::Parse {
                    offset,
                    detail: format!("expected {} fields, got {}", dim + 1, rec.len()),
                });
            }
            let mut x = Vec::with_capacity(dim);
            for v in rec.iter().take(dim) {
                x.push(v.parse::<f64>().map_err(|e| Error::Parse {
                    offset,
                    detail: format!("bad feature value {v:?}: {e}"),
                })?);
            }
            let y = rec[dim].parse::<usize>().map_err(|e| Error::Parse {
                offset,
                detail: format!("bad label {:?}: {e}", &rec[dim]),
            })?;
            classes = classes.max(y + 1);
            points.push(LabeledPoint { x, y });
        }
        Self::new(points, dim, classes)
    }
}

fn csv_err(e: csv::Error) -> Error {
    match e.kind() {
        csv::ErrorKind::Io(_) => {
            if let csv::ErrorKind::Io(io) = e.into_kind() {
                Error::Io(io)
            } else {
                unreachable!()
            }
        }
        _ => Error::Parse {
            offset: e.position().map(|p| p.byte()).unwrap_or(0),
            detail: e.to_string(),
        },
    }
}

/// Training hyperparameters for [`train_toy`].
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    /// Full layer dims `[d, hidden.., C]`.
    pub layer_dims: Vec<usize>,
    pub seed: u64,
    pub epochs: usize,
    pub step_size: f64,
    pub batch_size: usize,
    /// Perturbation budget used when training adversarially.
    pub adversarial_epsilon: f64,
    /// Inner PGD steps per batch when training adversarially.
    pub adversarial_steps: usize,
}

impl TrainConfig {
    pub fn new(layer_dims: Vec<usize>, seed: u64) -> Self {
        Self {
            layer_dims,
            seed,
            epochs: 40,
            step_size: 0.25,
            batch_size: 32,
            adversarial_epsilon: 0.1,
            adversarial_steps: 10,
        }
    }
}

/// Trained weights plus the final clean accuracy on the training data.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub weights: ClassifierWeights,
    pub clean_accuracy: f64,
}

/// Deterministic minibatch SGD on cross entropy. With `adversarial` set,
/// the first quarter of the epochs trains on clean batches (warmup), after
/// which every batch is replaced by its PGD-CE perturbation (sign steps,
/// seeded) inside the `adversarial_epsilon` box and the step size decays
/// linearly to a tenth of its initial value.
///
/// `epochs == 0` returns the seeded initialization untouched.
pub fn train_toy(cfg: &TrainConfig, data: &Dataset, adversarial: bool) -> Result<TrainOutcome> {
    if data.points.is_empty() {
        return Err(Error::InvalidArgument("training dataset is empty".into()));
    }
    if cfg.layer_dims.first() != Some(&data.dim) || cfg.layer_dims.last() != Some(&data.classes) {
        return Err(Error::ShapeMismatch(format!(
            "layer dims {:?} do not match dataset d={} C={}",
            cfg.layer_dims, data.dim, data.classes
        )));
    }
    let mut model = ClassifierWeights::seeded_init(&cfg.layer_dims, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let n = data.points.len();
    let mut order: Vec<usize> = (0..n).collect();
    let warmup = if adversarial { cfg.epochs / 4 } else { 0 };
    for epoch in 0..cfg.epochs {
        let perturb = adversarial && epoch >= warmup;
        let step_size = if perturb && cfg.epochs > warmup {
            let progress = (epoch - warmup) as f64 / (cfg.epochs - warmup) as f64;
            cfg.step_size * (1.0 - 0.9 * progress)
        } else {
            cfg.step_size
        };
        // Fisher-Yates with the epoch rng state; deterministic per seed.
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let batch_owned: Vec<(Vec<f64>, usize)> = if perturb {
                chunk
                    .iter()
                    .map(|&i| {
                        let p = &data.points[i];
                        pgd_ce_perturb(
                            &model,
                            &p.x,
                            p.y,
                            cfg.adversarial_epsilon,
                            cfg.adversarial_steps,
                            &mut rng,
                        )
                        .map(|x| (x, p.y))
                    })
                    .collect::<Result<_>>()?
            } else {
                chunk
                    .iter()
                    .map(|&i| (data.points[i].x.clone(), data.points[i].y))
                    .collect()
            };
            let batch: Vec<(&[f64], usize)> = batch_owned
                .iter()
                .map(|(x, y)| (x.as_slice(), *y))
                .collect();
            let loss = model.sgd_step(&batch, step_size)?;
            if !loss.is_finite() {
                return Err(Error::TrainingFailure(format!(
                    "non-finite loss {loss} at epoch {epoch}"
                )));
            }
        }
    }
    let clean_accuracy = model.accuracy(data)?;
    Ok(TrainOutcome {
        weights: model,
        clean_accuracy,
    })
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Sign-PGD on cross entropy for adversarial training: uniform seeded start
/// inside the epsilon box, fixed step `epsilon / 4`, projection onto the
/// epsilon box intersected with `[0,1]^d` after every step.
fn pgd_ce_perturb(
    model: &ClassifierWeights,
    x: &[f64],
    y: usize,
    epsilon: f64,
    steps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let clamp = |v: f64, xi: f64| v.clamp((xi - epsilon).max(0.0), (xi + epsilon).min(1.0));
    let mut adv: Vec<f64> = x
        .iter()
        .map(|&xi| clamp(xi + rng.random_range(-epsilon..=epsilon), xi))
        .collect();
    let step = epsilon / 4.0;
    let ce = LossId::new(0).expect("cross entropy id");
    for _ in 0..steps {
        let logits = model.forward(&adv)?;
        let ctx = LogitContext::new(logits, y)?;
        let g_logits = losses::grad_loss_logits(ce, &ctx)?;
        let g = model.backward_input(&adv, &g_logits)?;
        for (ai, (gi, xi)) in adv.iter_mut().zip(g.iter().zip(x)) {
            *ai = clamp(*ai + step * sign(*gi), *xi);
        }
    }
    Ok(adv)
}
