//! Training loop: Nadam, reduce-on-plateau, early stopping and checkpointing.

mod checkpoint;
mod optim;
mod schedule;

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use self::checkpoint::{
    load_checkpoint, load_weights, read_model_info, save_checkpoint, CheckpointMeta, ModelInfo, TensorInfo, MANIFEST_FILE, MODEL_FILE,
    WEIGHTS_FILE,
};
pub use self::optim::{nadam_step, NadamConfig, OptimizerState};
pub use self::schedule::{early_stop, plateau_scheduler, EarlyStopping, PlateauScheduler, MIN_DELTA};
use crate::autodiff::Tape;
use crate::backbone::Model;
use crate::data::{augment, to_tensor, Image, LoadedSet};
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::metrics::{MetricsReport, FOCAL_GAMMA};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub initial_lr: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub early_stop_patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub gamma: f64,
    pub augment: bool,
    /// Record wall-clock seconds per epoch. Off makes logs reproducible byte for byte.
    pub record_time: bool,
    pub nadam: NadamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            initial_lr: 1e-3,
            plateau_factor: 0.25,
            plateau_patience: 5,
            early_stop_patience: 10,
            batch_size: 32,
            seed: 0,
            gamma: FOCAL_GAMMA,
            augment: true,
            record_time: true,
            nadam: NadamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return bad("plateau factor must be in (0, 1)");
        }
        if self.plateau_patience == 0 || self.early_stop_patience == 0 {
            return bad("patience must be ≥ 1");
        }
        if self.batch_size == 0 {
            return bad("batch size must be ≥ 1");
        }
        if !(self.initial_lr > 0.0) || !self.initial_lr.is_finite() {
            return bad("learning rate must be positive");
        }
        if !(self.gamma >= 0.0) {
            return bad("gamma must be ≥ 0");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub val_macro_f1: f64,
    pub val_macro_auc: Option<f64>,
    /// Learning rate used during the epoch.
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Free-form `key: value` lines describing the run.
    pub header: Vec<String>,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
    pub stop_reason: String,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for h in &self.header {
            let _ = writeln!(out, "# {h}");
        }
        out.push_str("epoch,train_loss,val_loss,val_acc,lr,seconds\n");
        for e in &self.epochs {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                e.epoch, e.train_loss, e.val_loss, e.val_acc, e.lr, e.seconds
            );
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Write `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        let csv = dir.join(format!("{stem}.csv"));
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let json = dir.join(format!("{stem}.json"));
        std::fs::write(&json, self.to_json()?).map_err(|e| Error::io(&json, e))
    }
}

/// Loss, class probabilities and metrics of a model on a labelled set.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub loss: f64,
    /// Softmax probabilities, row-major `(n, classes)`.
    pub probs: Vec<f64>,
    pub report: MetricsReport,
}

/// Evaluation-mode pass over `set` in chunks of `batch`.
pub fn evaluate<T: Scalar>(model: &Model<T>, set: &LoadedSet, batch: usize, gamma: f64) -> Result<Evaluation> {
    if set.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate an empty set".into()));
    }
    let classes = model.num_classes();
    let labels = set.labels();
    let mut loss_sum = 0.0;
    let mut probs = Vec::with_capacity(set.len() * classes);
    for (chunk, ys) in set.samples.chunks(batch.max(1)).zip(labels.chunks(batch.max(1))) {
        let images: Vec<&Image> = chunk.iter().map(|s| &s.pixels).collect();
        let mut tape = Tape::new();
        let x = tape.constant(to_tensor::<T>(&images)?);
        let fp = model.forward(&mut tape, x, Mode::Eval)?;
        let loss = tape.focal_loss(fp.logits, ys, T::from_f64_lossy(gamma))?;
        loss_sum += tape.value(loss).data()[0].to_f64_lossy() * ys.len() as f64;
        let p = tape.softmax(fp.logits);
        probs.extend(tape.value(p).data().iter().map(|v| v.to_f64_lossy()));
    }
    let report = MetricsReport::evaluate(&probs, &labels, &set.class_names)?;
    Ok(Evaluation {
        loss: loss_sum / set.len() as f64,
        probs,
        report,
    })
}

#[derive(Clone, Debug)]
pub struct FitResult<T> {
    /// Parameters from the epoch with the lowest validation loss.
    pub model: Model<T>,
    pub log: TrainLog,
}

/// One optimizer step on a batch; returns the batch loss.
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    opt: &mut OptimizerState<T>,
    images: Tensor<T>,
    labels: &[usize],
    gamma: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(images);
    let fp = model.forward(&mut tape, x, Mode::Train)?;
    let loss = tape.focal_loss(fp.logits, labels, T::from_f64_lossy(gamma))?;
    let value = tape.value(loss).data()[0].to_f64_lossy();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("training loss {value}")));
    }
    tape.backward(loss)?;
    let grads: Vec<Option<Tensor<T>>> = model
        .store()
        .trainable_ids()
        .map(|id| tape.grad(fp.bindings.var(id)))
        .collect();
    opt.step_store(model.store_mut(), &grads)?;
    model.apply_stats(&fp.stats);
    Ok(value)
}

/// Train `model` and return the best-validation-loss parameters with the log.
pub fn fit<T: Scalar>(model: Model<T>, train: &LoadedSet, val: &LoadedSet, config: &TrainConfig) -> Result<FitResult<T>> {
    fit_with(model, train, val, config, |_| {})
}

/// [`fit`] with a callback after every epoch.
pub fn fit_with<T: Scalar>(
    model: Model<T>,
    train: &LoadedSet,
    val: &LoadedSet,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<FitResult<T>> {
    config.validate()?;
    if config.epochs > 0 && (train.is_empty() || val.is_empty()) {
        return Err(Error::InvalidArgument("training and validation sets must be non-empty".into()));
    }
    let mut model = model;
    let mut best = model.clone();
    let mut best_loss = f64::INFINITY;
    let mut log = TrainLog {
        stop_reason: "completed".into(),
        ..TrainLog::default()
    };
    let mut opt = OptimizerState::for_store(model.store(), config.initial_lr, config.nadam);
    let mut plateau = PlateauScheduler::new(config.initial_lr, config.plateau_factor, config.plateau_patience);
    let mut stopper = EarlyStopping::new(config.early_stop_patience);

    'epochs: for epoch in 0..config.epochs {
        let start = Instant::now();
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut crate::seed::rng(config.seed, "shuffle", &[epoch as u64]));
        let lr = opt.lr;
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let pixels: Vec<Image> = batch
                .iter()
                .map(|&i| {
                    let s = &train.samples[i];
                    if config.augment {
                        augment(s, train.sample_seed(config.seed, i, epoch)).pixels
                    } else {
                        s.pixels.clone()
                    }
                })
                .collect();
            let refs: Vec<&Image> = pixels.iter().collect();
            let labels: Vec<usize> = batch.iter().map(|&i| train.samples[i].class_index).collect();
            match train_step(&mut model, &mut opt, to_tensor(&refs)?, &labels, config.gamma) {
                Ok(l) => loss_sum += l * batch.len() as f64,
                Err(Error::NonFinite(msg)) => {
                    log.stop_reason = format!("non-finite at epoch {epoch}: {msg}");
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        let eval = evaluate(&model, val, config.batch_size.max(64), config.gamma)?;
        if !eval.loss.is_finite() {
            log.stop_reason = format!("non-finite validation loss at epoch {epoch}");
            break;
        }
        if eval.loss < best_loss {
            best_loss = eval.loss;
            best = model.clone();
            log.best_epoch = Some(epoch);
        }
        opt.lr = plateau.observe(eval.loss);
        log.epochs.push(EpochLog {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_loss: eval.loss,
            val_acc: eval.report.top1_accuracy,
            val_macro_f1: eval.report.macro_avg.f1,
            val_macro_auc: eval.report.macro_avg.auc,
            lr,
            seconds: if config.record_time { start.elapsed().as_secs_f64() } else { 0.0 },
        });
        on_epoch(log.epochs.last().expect("just pushed"));
        if stopper.observe(eval.loss) {
            log.stop_reason = format!("early stop after epoch {epoch}");
            break;
        }
    }
    Ok(FitResult { model: best, log })
}
