//! Optimization loop: cross-entropy objective, Adam, plateau learning-rate
//! decay and augmentation.

mod augment;
mod optim;

use std::fmt::Write as _;
use std::ops::ControlFlow;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{collate, DataError, Sample};
use crate::metrics::{MetricsError, ThresholdSweep, DEFAULT_LEVELS};
use crate::model::{ModelError, SkipcrossNet};
use crate::tensor::{Element, Tape, TensorError, Var};

pub use augment::{
    augment, mean_fill, scale_brightness, AugmentFlags, BRIGHTNESS_RANGE, REMOVAL_AREA,
    REMOVAL_PROBABILITY, SCALE_RANGE,
};
pub use optim::{Adam, BETA1, BETA2, EPSILON};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("non-finite loss {loss} at step {step}")]
    NonFinite { step: u64, loss: f64 },
    #[error("empty {0} set")]
    EmptySet(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub plateau_patience: usize,
    pub lr_decay: f64,
    pub min_lr: f64,
    /// Smallest validation MaxF gain that resets the plateau counter.
    pub min_improvement: f64,
    pub augment: AugmentFlags,
    /// `(height, width)` of training crops.
    pub crop_size: (usize, usize),
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 4,
            max_epochs: 100,
            plateau_patience: 10,
            lr_decay: 0.1,
            min_lr: 1e-6,
            min_improvement: 1e-4,
            augment: AugmentFlags::ALL,
            crop_size: (48, 48),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay < 1.0) {
            return bad("lr_decay must lie in (0, 1)");
        }
        if !(self.min_lr >= 0.0 && self.min_lr <= self.lr) {
            return bad("min_lr must lie in [0, lr]");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.min_improvement.is_nan() || self.min_improvement < 0.0 {
            return bad("min_improvement must be nonnegative");
        }
        let (h, w) = self.crop_size;
        if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
            return bad("crop_size must be positive multiples of 16");
        }
        Ok(())
    }
}

/// Runs `loss` on a fresh tape, backpropagates, applies one optimizer step
/// and resets the gradients. Returns the loss value.
pub fn step_with<T, F>(opt: &mut Adam<T>, loss: F) -> Result<f64>
where
    T: Element,
    F: for<'t> FnOnce(&'t Tape<T>) -> Result<Var<'t, T>>,
{
    let tape = Tape::new();
    let l = loss(&tape)?;
    let value = l.value().item().as_f64();
    if !value.is_finite() {
        opt.zero_grad();
        return Err(TrainError::NonFinite {
            step: opt.steps() + 1,
            loss: value,
        });
    }
    tape.backward(l)?;
    opt.step();
    opt.zero_grad();
    Ok(value)
}

pub fn train_step<T: Element>(
    net: &SkipcrossNet<T>,
    batch: &[&Sample],
    opt: &mut Adam<T>,
) -> Result<f64> {
    let b = collate::<T>(batch)?;
    let r = step_with(opt, |tape| {
        let logits = net.forward(tape, &b.rgb, &b.adi)?;
        Ok(logits.softmax_cross_entropy(&b.mask)?)
    });
    net.zero_grad();
    r
}

/// Validation summary of one pass over a sample set.
#[derive(Clone, Debug)]
pub struct Validation {
    pub sweep: ThresholdSweep,
    /// Pixel accuracy of the arg-max prediction.
    pub accuracy: f64,
}

impl Validation {
    pub fn maxf(&self) -> f64 {
        self.sweep.maxf().0
    }
}

/// Confidence maps for `samples`, evaluated in batches.
pub fn predict_set<T: Element>(
    net: &SkipcrossNet<T>,
    samples: &[Sample],
    batch_size: usize,
) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let b = collate::<T>(&refs)?;
        let conf = net.predict(&b.rgb, &b.adi)?.confidence;
        let plane = conf.numel() / chunk.len();
        out.extend(
            conf.data()
                .chunks(plane)
                .map(|c| c.iter().map(|v| v.as_f64() as f32).collect()),
        );
    }
    Ok(out)
}

pub fn validate<T: Element>(
    net: &SkipcrossNet<T>,
    samples: &[Sample],
    batch_size: usize,
) -> Result<Validation> {
    let mut sweep = ThresholdSweep::new(DEFAULT_LEVELS)?;
    let (mut correct, mut total) = (0usize, 0usize);
    for (conf, s) in predict_set(net, samples, batch_size)?.iter().zip(samples) {
        sweep.accumulate(conf, s.mask.data())?;
        correct += conf
            .iter()
            .zip(s.mask.data())
            .filter(|(&c, &g)| (c > 0.5) == (g == 1))
            .count();
        total += conf.len();
    }
    Ok(Validation {
        sweep,
        accuracy: correct as f64 / total as f64,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch's batches.
    pub loss: f64,
    pub val_maxf: f64,
    pub val_acc: f64,
    /// Learning rate used during the epoch.
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss,val_maxf,lr,seconds\n");
        for r in &self.epochs {
            writeln!(
                s,
                "{},{},{},{},{:.3}",
                r.epoch, r.loss, r.val_maxf, r.lr, r.seconds
            )
            .unwrap();
        }
        s
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs
            .iter()
            .fold(None, |best: Option<&EpochRecord>, r| match best {
                Some(b) if b.val_maxf >= r.val_maxf => Some(b),
                _ => Some(r),
            })
    }
}

/// Plateau rule: after `patience` consecutive epochs without a gain above
/// `min_improvement`, multiply the rate by `decay`, never going below
/// `min_lr`.
#[derive(Clone, Debug)]
pub struct PlateauScheduler {
    pub lr: f64,
    decay: f64,
    min_lr: f64,
    patience: usize,
    min_improvement: f64,
    reference: f64,
    bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.lr,
            decay: cfg.lr_decay,
            min_lr: cfg.min_lr,
            patience: cfg.plateau_patience,
            min_improvement: cfg.min_improvement,
            reference: f64::NEG_INFINITY,
            bad_epochs: 0,
        }
    }

    /// Feeds one validation score and returns the rate for the next epoch.
    pub fn observe(&mut self, score: f64) -> f64 {
        if score > self.reference + self.min_improvement {
            self.reference = score;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                self.lr = (self.lr * self.decay).max(self.min_lr);
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}

pub struct FitOutcome<T> {
    pub history: TrainHistory,
    /// Parameter values at the epoch with the highest validation MaxF.
    pub best: Option<(usize, Vec<crate::tensor::Tensor<T>>)>,
}

/// Trains `net` in place. `on_epoch` sees each finished epoch and may stop
/// training early by returning `ControlFlow::Break`.
pub fn fit<T: Element>(
    net: &SkipcrossNet<T>,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &SkipcrossNet<T>) -> ControlFlow<()>,
) -> Result<FitOutcome<T>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptySet("training"));
    }
    if val.is_empty() {
        return Err(TrainError::EmptySet("validation"));
    }
    for s in train.iter().chain(val) {
        s.check_aligned()?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(
        net.params().iter().map(|(_, p)| p.clone()).collect(),
        cfg.lr,
    );
    let mut sched = PlateauScheduler::new(cfg);
    let mut history = TrainHistory::default();
    let mut best: Option<(usize, Vec<_>)> = None;
    let mut best_maxf = f64::NEG_INFINITY;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        let start = Instant::now();
        opt.lr = sched.lr;
        order.shuffle(&mut rng);
        let mut losses = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            let batch = chunk
                .iter()
                .map(|&i| augment(&train[i], cfg.augment, cfg.crop_size, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&Sample> = batch.iter().collect();
            losses.push(train_step(net, &refs, &mut opt)?);
        }
        let v = validate(net, val, cfg.batch_size)?;
        let record = EpochRecord {
            epoch,
            loss: losses.iter().sum::<f64>() / losses.len() as f64,
            val_maxf: v.maxf(),
            val_acc: v.accuracy,
            lr: opt.lr,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.5} val MaxF {:.4} acc {:.4} lr {:e}",
            record.loss,
            record.val_maxf,
            record.val_acc,
            record.lr
        );
        if record.val_maxf > best_maxf {
            best_maxf = record.val_maxf;
            best = Some((epoch, net.snapshot()));
        }
        sched.observe(record.val_maxf);
        let flow = on_epoch(&record, net);
        history.epochs.push(record);
        if flow.is_break() {
            break;
        }
    }
    Ok(FitOutcome { history, best })
}
