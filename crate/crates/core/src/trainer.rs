//! Loss, metrics, and the train/evaluate loops.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{Checkpoint, CheckpointHeader};
use crate::data::{make_batch, AugmentConfig, ClipSpec, Manifest, Split, VideoRecord};
use crate::error::{Error, Result};
use crate::layers::{Layer, Mode};
use crate::model::Model;
use crate::optim::{Decision, EarlyStop, Sgd, SgdConfig};
use crate::tensor::{Scalar, Tensor};

/// Mean cross-entropy of `softmax(logits)` against `labels`, and its
/// gradient with respect to the logits.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>)> {
    let [n, k] = *logits.dims() else {
        return Err(Error::Shape(format!("logits must be [N, K], got {:?}", logits.dims())));
    };
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} logits rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Data(format!("label {bad} out of range for {k} classes")));
    }
    let mut grad = Vec::with_capacity(n * k);
    let mut loss = 0.0;
    for (row, &y) in logits.data().chunks(k).zip(labels) {
        let m = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v.as_f64() - m).exp()).sum();
        loss += z.ln() - (row[y].as_f64() - m);
        for (j, v) in row.iter().enumerate() {
            let p = (v.as_f64() - m).exp() / z;
            let onehot = if j == y { 1.0 } else { 0.0 };
            grad.push(T::of((p - onehot) / n as f64));
        }
    }
    Ok((loss / n as f64, Tensor::new(vec![n, k], grad)?))
}

/// Row-wise softmax probabilities in f64.
pub fn softmax(logits: &Tensor) -> Result<Vec<Vec<f64>>> {
    let [_, k] = *logits.dims() else {
        return Err(Error::Shape(format!("logits must be [N, K], got {:?}", logits.dims())));
    };
    Ok(logits
        .data()
        .chunks(k)
        .map(|row| {
            let m = row.iter().map(|&v| v as f64).fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|&v| (v as f64 - m).exp()).collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(|v| v / z).collect()
        })
        .collect())
}

fn argmax(row: &[f32]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

impl EpochMetrics {
    pub fn samples(&self) -> usize {
        self.confusion.iter().flatten().sum()
    }
}

/// Sample-weighted running totals, so results do not depend on batching.
#[derive(Clone, Debug)]
pub struct MetricsAccumulator {
    loss_sum: f64,
    confusion: Vec<Vec<usize>>,
}

impl MetricsAccumulator {
    pub fn new(classes: usize) -> Self {
        Self {
            loss_sum: 0.0,
            confusion: vec![vec![0; classes]; classes],
        }
    }

    /// Adds a batch given its mean loss.
    pub fn add(&mut self, logits: &Tensor, labels: &[usize], mean_loss: f64) {
        let k = self.confusion.len();
        self.loss_sum += mean_loss * labels.len() as f64;
        for (row, &y) in logits.data().chunks(k).zip(labels) {
            self.confusion[y][argmax(row)] += 1;
        }
    }

    pub fn finish(self, epoch: usize) -> Result<EpochMetrics> {
        let n: usize = self.confusion.iter().flatten().sum();
        if n == 0 {
            return Err(Error::Data("no samples were evaluated".into()));
        }
        let correct: usize = (0..self.confusion.len()).map(|i| self.confusion[i][i]).sum();
        Ok(EpochMetrics {
            epoch,
            loss: self.loss_sum / n as f64,
            accuracy: correct as f64 / n as f64,
            confusion: self.confusion,
        })
    }
}

/// Eval-mode pass over `records` with centered clips and no augmentation.
/// Running statistics are never touched.
pub fn evaluate(
    model: &mut Model,
    root: &Path,
    records: &[&VideoRecord],
    clip: &ClipSpec,
    batch_size: usize,
) -> Result<EpochMetrics> {
    if records.is_empty() {
        return Err(Error::Data("cannot evaluate an empty split".into()));
    }
    let mut acc = MetricsAccumulator::new(model.config().num_classes);
    for chunk in records.chunks(batch_size.max(1)) {
        let batch = make_batch(root, chunk, clip, Mode::Eval, None, 0)?;
        let logits = model.forward(&batch.clips, Mode::Eval)?;
        let (loss, _) = softmax_cross_entropy(&logits, &batch.labels)?;
        acc.add(&logits, &batch.labels, loss);
    }
    acc.finish(0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub sgd: SgdConfig,
    pub patience: usize,
    pub seed: u64,
    pub clip: ClipSpec,
    /// `None` disables train-time augmentation.
    pub augment: Option<AugmentConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            eval_batch_size: 32,
            sgd: SgdConfig::default(),
            patience: 10,
            seed: 0,
            clip: ClipSpec::default(),
            augment: Some(AugmentConfig::default()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutputs {
    pub checkpoint: PathBuf,
    pub metrics_csv: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub train: EpochMetrics,
    pub val: EpochMetrics,
    pub decision: Decision,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub history: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
    pub steps: u64,
    /// SHA-256 of the best checkpoint file, verified when it was restored.
    pub checkpoint_sha256: String,
}

pub const METRICS_HEADER: &str = "epoch,split,loss,accuracy";

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn metrics_csv(history: &[EpochLog]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for log in history {
        for (split, m) in [("train", &log.train), ("val", &log.val)] {
            let _ = writeln!(s, "{},{split},{:.6},{:.6}", m.epoch, m.loss, m.accuracy);
        }
    }
    s
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Drives epochs of SGD with early stopping, keeping the best checkpoint on
/// disk and restoring it into the model at the end.
pub struct Trainer<'a> {
    pub config: TrainConfig,
    pub root: &'a Path,
    pub train: Vec<&'a VideoRecord>,
    pub outputs: TrainOutputs,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, root: &'a Path, train: Vec<&'a VideoRecord>, outputs: TrainOutputs) -> Self {
        Self {
            config,
            root,
            train,
            outputs,
        }
    }

    /// Standard run: validation is [`evaluate`] on `manifest`'s val split.
    pub fn train(
        model: &mut Model,
        root: &Path,
        manifest: &Manifest,
        config: &TrainConfig,
        outputs: &TrainOutputs,
        progress: &mut dyn FnMut(&EpochLog),
    ) -> Result<TrainReport> {
        let train = manifest.split(Split::Train);
        let val = manifest.split(Split::Val);
        if train.is_empty() || val.is_empty() {
            return Err(Error::Data("manifest needs non-empty train and val splits".into()));
        }
        let trainer = Trainer::new(config.clone(), root, train, outputs.clone());
        let (clip, eval_batch) = (config.clip, config.eval_batch_size);
        trainer.fit_with_validator(
            model,
            &mut |m: &mut Model| evaluate(m, root, &val, &clip, eval_batch),
            progress,
        )
    }

    fn header(&self, model: &Model, epoch: usize, stop: &EarlyStop, val: Option<&EpochMetrics>) -> CheckpointHeader {
        CheckpointHeader {
            model: model.config().clone(),
            step: 0,
            epoch,
            seed: self.config.seed,
            best_val_loss: val.map(|m| m.loss),
            best_val_accuracy: val.map(|m| m.accuracy),
            early_stop: Some(stop.clone()),
            sgd: Some(self.config.sgd),
            clip: Some(self.config.clip),
        }
    }

    fn save_checkpoint(&self, ck: &Checkpoint) -> Result<String> {
        let bytes = ck.to_bytes()?;
        write(&self.outputs.checkpoint, &bytes)?;
        Ok(sha256_hex(&bytes))
    }

    fn train_epoch(&self, model: &mut Model, sgd: &mut Sgd, epoch: usize) -> Result<EpochMetrics> {
        let cfg = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut order = self.train.clone();
        order.shuffle(&mut rng);
        let mut acc = MetricsAccumulator::new(model.config().num_classes);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let batch = make_batch(self.root, chunk, &cfg.clip, Mode::Train, cfg.augment.as_ref(), rng.random())?;
            let logits = model.forward(&batch.clips, Mode::Train)?;
            let (loss, dlogits) = softmax_cross_entropy(&logits, &batch.labels)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { step: sgd.step + 1 });
            }
            model.backward(&dlogits)?;
            sgd.step(model)?;
            acc.add(&logits, &batch.labels, loss);
        }
        acc.finish(epoch)
    }

    /// Like [`Trainer::train`] but with a caller-supplied validation pass.
    pub fn fit_with_validator(
        &self,
        model: &mut Model,
        validate: &mut dyn FnMut(&mut Model) -> Result<EpochMetrics>,
        progress: &mut dyn FnMut(&EpochLog),
    ) -> Result<TrainReport> {
        let cfg = &self.config;
        if cfg.batch_size == 0 || cfg.eval_batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.train.is_empty() {
            return Err(Error::Data("training split is empty".into()));
        }
        let mut sgd = Sgd::new(cfg.sgd)?;
        let mut stop = EarlyStop::new(cfg.patience);
        let mut history = Vec::new();
        write(&self.outputs.metrics_csv, metrics_csv(&history).as_bytes())?;

        let initial = Checkpoint::capture(model, Some(&sgd), self.header(model, 0, &stop, None));
        let mut best_hash = self.save_checkpoint(&initial)?;
        let mut stopped_early = false;

        for epoch in 1..=cfg.epochs {
            let train = self.train_epoch(model, &mut sgd, epoch)?;
            let mut val = validate(model)?;
            val.epoch = epoch;
            let decision = stop.update(epoch, val.loss)?;
            if decision == Decision::Improved {
                let ck = Checkpoint::capture(model, Some(&sgd), self.header(model, epoch, &stop, Some(&val)));
                best_hash = self.save_checkpoint(&ck)?;
            }
            history.push(EpochLog { train, val, decision });
            write(&self.outputs.metrics_csv, metrics_csv(&history).as_bytes())?;
            progress(history.last().unwrap());
            if decision == Decision::Stop {
                stopped_early = true;
                break;
            }
        }

        // Restore the best weights, checking the file is the one we wrote.
        let path = &self.outputs.checkpoint;
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let found = sha256_hex(&bytes);
        if found != best_hash {
            return Err(Error::Malformed(format!(
                "{}: checkpoint hash {found} does not match the saved best {best_hash}",
                path.display()
            )));
        }
        let best = Checkpoint::from_bytes(&bytes)?;
        model.load_named(&best.tensors)?;

        Ok(TrainReport {
            history,
            best_epoch: stop.best_epoch,
            stopped_early,
            steps: sgd.step,
            checkpoint_sha256: best_hash,
        })
    }
}
