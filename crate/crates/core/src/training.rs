//! Datasets, optimizer, schedule and the training loop.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::engine::{Scalar, Tape, Tensor};
use crate::error::{Error, Result};
use crate::model::{save_checkpoint, Model, ParamStore};
use crate::points::Image;

/// Labeled images with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Vec<Image>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.is_empty() || images.len() != labels.len() {
            return Err(Error::Format(format!(
                "{} images with {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Format(format!("label {bad} outside {classes} classes")));
        }
        Ok(Self { images, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// The first `n` examples.
    pub fn take(&self, n: usize) -> Result<Self> {
        let n = n.min(self.len());
        Self::new(self.images[..n].to_vec(), self.labels[..n].to_vec(), self.classes)
    }

    /// Splits off the last `n` examples.
    pub fn split_tail(mut self, n: usize) -> Result<(Self, Self)> {
        let at = self.len().saturating_sub(n);
        let images = self.images.split_off(at);
        let labels = self.labels.split_off(at);
        let tail = Self::new(images, labels, self.classes)?;
        Ok((Self::new(self.images, self.labels, self.classes)?, tail))
    }
}

// ----- CIFAR-10 binary format -------------------------------------------------

const CIFAR_SIDE: usize = 32;
const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;
const CIFAR_PER_FILE: usize = 10_000;

/// Parses one CIFAR-10 batch: records of a label byte and three 32×32 planes.
pub fn parse_cifar_batch(bytes: &[u8]) -> Result<Dataset> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::Format(format!(
            "{} bytes is not a whole number of {CIFAR_RECORD}-byte records",
            bytes.len()
        )));
    }
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let mut images = Vec::with_capacity(bytes.len() / CIFAR_RECORD);
    let mut labels = Vec::with_capacity(images.capacity());
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        labels.push(rec[0] as usize);
        let px = &rec[1..];
        let data = (0..plane)
            .flat_map(|i| (0..3).map(move |ch| px[ch * plane + i] as f32 / 255.0))
            .collect();
        images.push(Image::new(CIFAR_SIDE, CIFAR_SIDE, 3, data)?);
    }
    Dataset::new(images, labels, 10)
}

/// Encodes 32×32 images in the CIFAR-10 batch layout.
pub fn encode_cifar_batch(data: &Dataset) -> Result<Vec<u8>> {
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let mut out = Vec::with_capacity(data.len() * CIFAR_RECORD);
    for (img, &label) in data.images.iter().zip(&data.labels) {
        if (img.height, img.width) != (CIFAR_SIDE, CIFAR_SIDE) || label > 255 {
            return Err(Error::Format(format!(
                "cannot encode a {}x{} image with label {label}",
                img.height, img.width
            )));
        }
        out.push(label as u8);
        for ch in 0..3 {
            out.extend((0..plane).map(|i| (img.data[i * 3 + ch] * 255.0).round().clamp(0.0, 255.0) as u8));
        }
    }
    Ok(out)
}

/// Reads one full 10000-record batch file.
pub fn read_cifar_batch(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    if bytes.len() != CIFAR_PER_FILE * CIFAR_RECORD {
        return Err(Error::Format(format!(
            "{}: {} bytes, expected {}",
            path.display(),
            bytes.len(),
            CIFAR_PER_FILE * CIFAR_RECORD
        )));
    }
    parse_cifar_batch(&bytes)
}

/// Loads `data_batch_{1..5}.bin` and `test_batch.bin` from `dir`.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    let mut train: Option<Dataset> = None;
    for i in 1..=5 {
        let part = read_cifar_batch(&dir.join(format!("data_batch_{i}.bin")))?;
        match &mut train {
            Some(t) => {
                t.images.extend(part.images);
                t.labels.extend(part.labels);
            }
            None => train = Some(part),
        }
    }
    let test = read_cifar_batch(&dir.join("test_batch.bin"))?;
    Ok((train.expect("five batches read"), test))
}

// ----- synthetic quadrant task ------------------------------------------------

/// Noise images with one bright square; the label is the quadrant holding it.
///
/// Background pixels are `U[0, 0.5)`, patch pixels `U[0.9, 1]`, and the patch
/// (side `image_size / 4`) lies entirely inside its quadrant.
pub fn synthetic_quadrant_dataset(n: usize, image_size: usize, seed: u64) -> Result<Dataset> {
    if image_size < 4 || !image_size.is_multiple_of(2) {
        return Err(Error::Domain(format!("image size {image_size} must be even and at least 4")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = image_size / 2;
    let patch = (image_size / 4).max(1);
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let label = rng.gen_range(0..4);
        let mut data: Vec<f32> = (0..image_size * image_size * 3).map(|_| rng.gen_range(0.0..0.5)).collect();
        let r0 = (label / 2) * half + rng.gen_range(0..=half - patch);
        let c0 = (label % 2) * half + rng.gen_range(0..=half - patch);
        for r in r0..r0 + patch {
            for c in c0..c0 + patch {
                for ch in 0..3 {
                    data[(r * image_size + c) * 3 + ch] = rng.gen_range(0.9..=1.0);
                }
            }
        }
        images.push(Image::new(image_size, image_size, 3, data)?);
        labels.push(label);
    }
    Dataset::new(images, labels, 4)
}

// ----- optimizer --------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.05,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter plus the step count.
#[derive(Clone, Debug)]
pub struct OptimState<T> {
    pub hyper: AdamWConfig,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(params: &ParamStore<T>, hyper: AdamWConfig) -> Self {
        let zeros = || params.iter().map(|p| vec![T::zero(); p.value.numel()]).collect();
        Self {
            hyper,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// One AdamW update with decoupled weight decay and bias correction.
pub fn adamw_step<T: Scalar>(params: &mut ParamStore<T>, grads: &[Tensor<T>], state: &mut OptimState<T>, lr: f64) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Dimension(format!(
            "{} gradients and {} moment buffers for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    state.step += 1;
    let h = state.hyper;
    let c1 = 1.0 - h.beta1.powf(state.step as f64);
    let c2 = 1.0 - h.beta2.powf(state.step as f64);
    let (b1, b2) = (T::of(h.beta1), T::of(h.beta2));
    let (one, decay) = (T::one(), T::of(1.0 - lr * h.weight_decay));
    let (step_size, inv_c2, eps) = (T::of(lr / c1), T::of(1.0 / c2), T::of(h.eps));
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        if p.value.shape() != g.shape() {
            return Err(Error::Dimension(format!(
                "gradient for {} has shape {:?}, parameter {:?}",
                p.name,
                g.shape(),
                p.value.shape()
            )));
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (one - b1) * gi;
            *vi = b2 * *vi + (one - b2) * gi * gi;
            *w = *w * decay - step_size * *mi / ((*vi * inv_c2).sqrt() + eps);
        }
    }
    Ok(())
}

/// Linear warmup to `base_lr`, then half-cosine decay to zero at `total`.
pub fn cosine_lr(step: usize, total: usize, base_lr: f64, warmup: usize) -> f64 {
    if step < warmup {
        return base_lr * step as f64 / warmup as f64;
    }
    if step >= total {
        return 0.0;
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    0.5 * base_lr * (1.0 + (PI * progress).cos())
}

/// Seeded permutation of `0..n` for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

// ----- training loop ----------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Examples per independent tape; batches are split into these and run in parallel.
    pub micro_batch: usize,
    pub lr: f64,
    pub warmup_epochs: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    /// Stop once an epoch's training accuracy reaches this value.
    pub target_accuracy: Option<f64>,
    pub checkpoint_dir: Option<PathBuf>,
    /// Save `epoch{n}.ckpt` every this many epochs (0 disables); `final.ckpt` is always written.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            micro_batch: 16,
            lr: 1e-3,
            warmup_epochs: 2,
            optimizer: AdamWConfig::default(),
            seed: 0,
            target_accuracy: None,
            checkpoint_dir: None,
            checkpoint_every: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    /// `key: value` lines written as `#` comments above the CSV.
    pub header: Vec<(String, String)>,
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.header {
            let _ = writeln!(out, "# {k}: {v}");
        }
        out.push_str("epoch,split,loss,accuracy,lr,seconds\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{:.6},{:.6},{:.6e},{:.3}",
                r.epoch, r.split, r.loss, r.accuracy, r.lr, r.seconds
            );
        }
        out
    }

    pub fn last(&self, split: &str) -> Option<&EpochRecord> {
        self.records.iter().rev().find(|r| r.split == split)
    }
}

struct MicroResult<T> {
    loss_sum: f64,
    correct: usize,
    grads: Vec<Tensor<T>>,
}

fn argmax_row<T: Scalar>(row: &[T]) -> usize {
    (1..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b })
}

fn run_micro<T: Scalar + Send + Sync>(model: &Model<T>, data: &Dataset, idx: &[usize], with_grads: bool) -> Result<MicroResult<T>> {
    let images: Vec<&Image> = idx.iter().map(|&i| &data.images[i]).collect();
    let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, with_grads);
    let logits = model.forward_bound(&mut tape, &vars, &images, None)?;
    let loss = tape.cross_entropy(logits, &labels)?;
    let lv = tape.value(logits);
    let k = lv.shape()[1];
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(r, &l)| argmax_row(&lv.data()[r * k..(r + 1) * k]) == l)
        .count();
    let loss_sum = tape.value(loss).data()[0].as_f64() * idx.len() as f64;
    let grads = if with_grads {
        let g = tape.backward(loss)?;
        vars.iter().map(|&v| g.wrt(v)).collect()
    } else {
        Vec::new()
    };
    Ok(MicroResult { loss_sum, correct, grads })
}

/// Mean loss and accuracy over a dataset.
pub fn evaluate<T: Scalar + Send + Sync>(model: &Model<T>, data: &Dataset, micro_batch: usize) -> Result<(f64, f64)> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let parts: Vec<MicroResult<T>> = idx
        .par_chunks(micro_batch.max(1))
        .map(|chunk| run_micro(model, data, chunk, false))
        .collect::<Result<_>>()?;
    let loss: f64 = parts.iter().map(|p| p.loss_sum).sum();
    let correct: usize = parts.iter().map(|p| p.correct).sum();
    Ok((loss / data.len() as f64, correct as f64 / data.len() as f64))
}

fn numerical(step: usize, lr: f64, grad_norm: f64, e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::NumericalAbort {
            step,
            lr,
            grad_norm,
            reason: format!("non-finite value produced by {op}"),
        },
        other => other,
    }
}

/// Trains `model` in place; `on_epoch` sees every record as it is produced.
pub fn train<T: Scalar + Send + Sync>(
    model: &mut Model<T>,
    data: &Dataset,
    eval: Option<&Dataset>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainLog> {
    if cfg.batch_size == 0 || cfg.micro_batch == 0 {
        return Err(Error::Config("batch sizes must be positive".into()));
    }
    if data.classes > model.config().num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model head has {}",
            data.classes,
            model.config().num_classes
        )));
    }
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let warmup = (steps_per_epoch * cfg.warmup_epochs).min(total);
    let mut state = OptimState::new(model.params(), cfg.optimizer);
    let mut log = TrainLog::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let order = epoch_order(data.len(), cfg.seed, epoch);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        let mut lr = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            lr = cosine_lr(step, total, cfg.lr, warmup);
            let parts: Vec<MicroResult<T>> = batch
                .par_chunks(cfg.micro_batch)
                .map(|chunk| run_micro(model, data, chunk, true))
                .collect::<Result<_>>()
                .map_err(|e| numerical(step, lr, f64::NAN, e))?;
            let b = batch.len() as f64;
            let mut grads: Vec<Tensor<T>> = Vec::new();
            let mut batch_loss = 0.0;
            for (part, chunk) in parts.into_iter().zip(batch.chunks(cfg.micro_batch)) {
                let w = T::of(chunk.len() as f64 / b);
                batch_loss += part.loss_sum;
                correct += part.correct;
                if grads.is_empty() {
                    grads = part.grads.into_iter().map(|g| g.map(|v| v * w)).collect();
                } else {
                    for (acc, g) in grads.iter_mut().zip(part.grads) {
                        for (a, &v) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += v * w;
                        }
                    }
                }
            }
            let grad_norm = grads.iter().map(|g| g.norm().as_f64().powi(2)).sum::<f64>().sqrt();
            if !batch_loss.is_finite() || !grad_norm.is_finite() {
                return Err(Error::NumericalAbort {
                    step,
                    lr,
                    grad_norm,
                    reason: format!("loss {} is not finite", batch_loss / b),
                });
            }
            loss_sum += batch_loss;
            adamw_step(model.params_mut(), &grads, &mut state, lr)?;
            step += 1;
        }
        let accuracy = correct as f64 / data.len() as f64;
        let rec = EpochRecord {
            epoch: epoch + 1,
            split: "train".into(),
            loss: loss_sum / data.len() as f64,
            accuracy,
            lr,
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&rec);
        log.records.push(rec);
        if let Some(ev) = eval {
            let started = Instant::now();
            let (loss, acc) = evaluate(model, ev, cfg.micro_batch)?;
            let rec = EpochRecord {
                epoch: epoch + 1,
                split: "test".into(),
                loss,
                accuracy: acc,
                lr,
                seconds: started.elapsed().as_secs_f64(),
            };
            on_epoch(&rec);
            log.records.push(rec);
        }
        if let Some(dir) = &cfg.checkpoint_dir {
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
                save_checkpoint(model, &dir.join(format!("epoch{}.ckpt", epoch + 1)))?;
            }
        }
        if cfg.target_accuracy.is_some_and(|t| accuracy >= t) {
            break;
        }
    }
    if let Some(dir) = &cfg.checkpoint_dir {
        save_checkpoint(model, &dir.join("final.ckpt"))?;
    }
    Ok(log)
}
