//! Mini-batch training: zero-padded batching, Adam with L2 weight decay,
//! reduce-on-plateau learning rate and early stopping on validation loss.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{awgn, spec_augment, AugmentConfig, Awgn};
use crate::autodiff::Tape;
use crate::dsp::{melspectrogram, LogMelSpectrogram, MelConfig, Waveform};
use crate::error::{arg_err, shape_err, Error, Result};
use crate::model::EmotionNet;
use crate::rng::{self, tag};
use crate::tensor::Tensor;

/// Improvement below this (absolute) counts as a plateau epoch.
pub const PLATEAU_THRESHOLD: f64 = 1e-4;
pub const MIN_LR: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub adam_eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub scheduler_factor: f64,
    pub scheduler_patience: usize,
    pub early_stop_patience: usize,
    /// Set by the caller from the run seed; not part of the serialized form.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-5,
            betas: [0.9, 0.999],
            adam_eps: 1e-8,
            batch_size: 32,
            max_epochs: 100,
            scheduler_factor: 0.5,
            scheduler_patience: 5,
            early_stop_patience: 15,
            seed: 0,
        }
    }
}

impl TrainConfig {
    #[allow(clippy::neg_cmp_op_on_partial_ord)] // rejects NaN
    pub fn validate(&self) -> Result<()> {
        let bad = |detail: alloc::string::String| Err(arg_err("train config", detail));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!(
                "weight_decay {} must be non-negative",
                self.weight_decay
            ));
        }
        if !self.betas.iter().all(|b| (0.0..1.0).contains(b)) {
            return bad(format!("betas {:?} outside [0, 1)", self.betas));
        }
        if !(self.adam_eps > 0.0) {
            return bad(format!("adam_eps {} must be positive", self.adam_eps));
        }
        if !(self.scheduler_factor > 0.0 && self.scheduler_factor < 1.0) {
            return bad(format!(
                "scheduler_factor {} outside (0, 1)",
                self.scheduler_factor
            ));
        }
        if self.batch_size == 0
            || self.max_epochs == 0
            || self.scheduler_patience == 0
            || self.early_stop_patience == 0
        {
            return bad("batch_size, max_epochs and patiences must be at least 1".into());
        }
        Ok(())
    }
}

/// One labelled utterance. The waveform is kept when available so that noise
/// augmentation can be applied before feature extraction.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub features: LogMelSpectrogram,
    pub waveform: Option<Waveform>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[B, 1, n_mels, T_max]`
    pub features: Tensor,
    /// Frame count of each sample before padding.
    pub lengths: Vec<usize>,
    pub labels: Vec<usize>,
    /// Position of each sample in the list given to [`make_batches`].
    pub indices: Vec<usize>,
}

impl Batch {
    fn assemble(
        samples: &[(&LogMelSpectrogram, usize)],
        indices: Vec<usize>,
        min_frames: usize,
    ) -> Result<Self> {
        let n_mels = samples[indices[0]].0.n_mels();
        let t_max = indices
            .iter()
            .map(|&i| samples[i].0.frames())
            .max()
            .unwrap_or(0)
            .max(min_frames);
        let mut data = vec![0.0; indices.len() * n_mels * t_max];
        let mut lengths = Vec::with_capacity(indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for (row, &i) in indices.iter().enumerate() {
            let (s, label) = samples[i];
            if s.n_mels() != n_mels {
                return Err(shape_err(
                    "make_batches",
                    format!("{} mel bands vs {n_mels}", s.n_mels()),
                ));
            }
            let t = s.frames();
            let base = row * n_mels * t_max;
            for (m, src) in s.values().chunks(t.max(1)).enumerate().take(n_mels) {
                data[base + m * t_max..base + m * t_max + t].copy_from_slice(&src[..t]);
            }
            lengths.push(t);
            labels.push(label);
        }
        let features = Tensor::new(&[indices.len(), 1, n_mels, t_max], data)?;
        Ok(Self {
            features,
            lengths,
            labels,
            indices,
        })
    }
}

/// Chunks `samples` (optionally shuffled) into batches, each zero-padded on
/// the time axis to its longest member. The last batch may be partial.
pub fn make_batches<R: Rng + ?Sized>(
    samples: &[(&LogMelSpectrogram, usize)],
    batch_size: usize,
    shuffle: Option<&mut R>,
) -> Result<Vec<Batch>> {
    make_batches_padded(samples, batch_size, shuffle, 0)
}

/// As [`make_batches`], additionally padding every batch to at least
/// `min_frames` frames.
pub fn make_batches_padded<R: Rng + ?Sized>(
    samples: &[(&LogMelSpectrogram, usize)],
    batch_size: usize,
    shuffle: Option<&mut R>,
    min_frames: usize,
) -> Result<Vec<Batch>> {
    if samples.is_empty() {
        return Err(Error::Empty("make_batches"));
    }
    if batch_size == 0 {
        return Err(arg_err("make_batches", "batch_size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    if let Some(rng) = shuffle {
        order.shuffle(rng);
    }
    order
        .chunks(batch_size)
        .map(|c| Batch::assemble(samples, c.to_vec(), min_frames))
        .collect()
}

/// First and second moment estimates for every parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new<I: IntoIterator<Item = usize>>(sizes: I) -> Self {
        let m: Vec<Vec<f64>> = sizes.into_iter().map(|n| vec![0.0; n]).collect();
        Self {
            v: m.clone(),
            m,
            step: 0,
        }
    }
}

/// One Adam update with bias correction. Weight decay is added to the
/// gradient (`g + wd * theta`) before the moment updates.
pub fn adam_step(
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    state: &mut AdamState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(shape_err(
            "adam_step",
            format!(
                "{} params, {} grads, {} moment buffers",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.m[i].len() {
            return Err(shape_err(
                "adam_step",
                format!(
                    "tensor {i}: {} values, {} grads, {} moments",
                    p.len(),
                    g.len(),
                    state.m[i].len()
                ),
            ));
        }
    }
    state.step += 1;
    let [b1, b2] = cfg.betas;
    let t = state.step as f64;
    let c1 = 1.0 - libm::pow(b1, t);
    let c2 = 1.0 - libm::pow(b2, t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..p.len() {
            let g = g[j] + cfg.weight_decay * p[j];
            m[j] = b1 * m[j] + (1.0 - b1) * g;
            v[j] = b2 * v[j] + (1.0 - b2) * g * g;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            p[j] -= lr * m_hat / (libm::sqrt(v_hat) + cfg.adam_eps);
        }
    }
    Ok(())
}

/// Multiplies the learning rate by `factor` once validation loss has failed
/// to improve by more than [`PLATEAU_THRESHOLD`] for `patience` consecutive
/// epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauScheduler {
    pub lr: f64,
    factor: f64,
    patience: usize,
    best: f64,
    bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize) -> Self {
        Self {
            lr,
            factor,
            patience,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    /// Records one epoch's validation loss and returns the learning rate for
    /// the next epoch.
    pub fn step(&mut self, val_loss: f64) -> f64 {
        if val_loss < self.best - PLATEAU_THRESHOLD {
            self.best = val_loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                self.lr = (self.lr * self.factor).max(MIN_LR);
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    /// Learning rate used during this epoch.
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose weights were returned.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Mean loss, accuracy and predicted labels in evaluation mode.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    pub predictions: Vec<usize>,
}

fn pairs(set: &[Example]) -> Vec<(&LogMelSpectrogram, usize)> {
    set.iter().map(|e| (&e.features, e.label)).collect()
}

/// Evaluation-mode loss and predictions over `set`, batched in order.
pub fn evaluate(model: &EmotionNet, set: &[Example], batch_size: usize) -> Result<Evaluation> {
    let samples = pairs(set);
    let batches = make_batches_padded::<rng::StreamRng>(
        &samples,
        batch_size,
        None,
        model.config().min_frames(),
    )?;
    let mut predictions = vec![0; set.len()];
    let mut loss_sum = 0.0;
    for (bi, batch) in batches.iter().enumerate() {
        let mut tape = Tape::new();
        let numeric = |e: Error| match e {
            Error::NonFinite(_) => Error::NonFiniteLoss {
                epoch: 0,
                batch: bi,
            },
            other => other,
        };
        let f = model
            .forward_eval(&mut tape, &batch.features)
            .map_err(numeric)?;
        let loss = tape
            .cross_entropy(f.logits, &batch.labels)
            .map_err(numeric)?;
        let l = tape.value(loss).data()[0];
        if !l.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch: 0,
                batch: bi,
            });
        }
        loss_sum += l * batch.labels.len() as f64;
        for (&i, p) in batch.indices.iter().zip(tape.value(f.logits).argmax_rows()) {
            predictions[i] = p;
        }
    }
    let correct = predictions
        .iter()
        .zip(set)
        .filter(|(p, e)| **p == e.label)
        .count();
    Ok(Evaluation {
        loss: loss_sum / set.len() as f64,
        accuracy: correct as f64 / set.len() as f64,
        predictions,
    })
}

/// Features for one training sample in one epoch. With probability
/// `apply_probability` the sample is augmented: noise at an SNR drawn
/// uniformly from the configured range is added to the waveform (features
/// are then recomputed), followed by spectrogram masking.
pub fn augment_example(
    ex: &Example,
    aug: &AugmentConfig,
    mel: &MelConfig,
    seed: u64,
    epoch: usize,
    index: usize,
) -> Result<LogMelSpectrogram> {
    if !aug.enabled {
        return Ok(ex.features.clone());
    }
    let mut r = rng::stream(seed, &[tag::AUGMENT, epoch as u64, index as u64]);
    if r.random::<f64>() >= aug.apply_probability {
        return Ok(ex.features.clone());
    }
    let mut features = ex.features.clone();
    if aug.awgn_enabled {
        if let Some(w) = &ex.waveform {
            let [lo, hi] = aug.snr_db_range;
            let snr = if hi > lo { r.random_range(lo..hi) } else { lo };
            if let Awgn::Applied(noisy) = awgn(w, snr, &mut r)? {
                features = melspectrogram(&noisy, mel)?;
            }
        }
    }
    if aug.spec_augment_enabled {
        features = spec_augment(&features, aug, &mut r).0;
    }
    Ok(features)
}

/// Trains `model` and returns the weights of the epoch with the lowest
/// validation loss together with the per-epoch history.
pub fn train(
    model: EmotionNet,
    train_set: &[Example],
    val_set: &[Example],
    aug: &AugmentConfig,
    mel: &MelConfig,
    cfg: &TrainConfig,
) -> Result<(EmotionNet, History)> {
    train_with(model, train_set, val_set, aug, mel, cfg, &mut |_| {})
}

/// As [`train`], calling `on_epoch` after every epoch.
pub fn train_with(
    mut model: EmotionNet,
    train_set: &[Example],
    val_set: &[Example],
    aug: &AugmentConfig,
    mel: &MelConfig,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<(EmotionNet, History)> {
    cfg.validate()?;
    aug.validate()?;
    if train_set.is_empty() {
        return Err(Error::Empty("train: training set"));
    }
    if val_set.is_empty() {
        return Err(Error::Empty("train: validation set"));
    }
    let classes = model.config().num_classes;
    if let Some(e) = train_set.iter().chain(val_set).find(|e| e.label >= classes) {
        return Err(arg_err(
            "train",
            format!("label {} out of range for {classes} classes", e.label),
        ));
    }
    let min_frames = model.config().min_frames();
    let mut adam = AdamState::new(model.params().iter().map(|p| p.value.numel()));
    let mut sched = PlateauScheduler::new(cfg.lr, cfg.scheduler_factor, cfg.scheduler_patience);
    let mut history = History::default();
    let mut best = (f64::INFINITY, model.clone());
    let mut stale = 0;

    for epoch in 0..cfg.max_epochs {
        let lr = sched.lr;
        let features = train_set
            .iter()
            .enumerate()
            .map(|(i, ex)| augment_example(ex, aug, mel, cfg.seed, epoch, i))
            .collect::<Result<Vec<_>>>()?;
        let samples: Vec<_> = features
            .iter()
            .zip(train_set)
            .map(|(f, e)| (f, e.label))
            .collect();
        let mut shuffle = rng::stream(cfg.seed, &[tag::SHUFFLE, epoch as u64]);
        let batches =
            make_batches_padded(&samples, cfg.batch_size, Some(&mut shuffle), min_frames)?;

        let (mut loss_sum, mut correct) = (0.0, 0);
        for (bi, batch) in batches.iter().enumerate() {
            let mut tape = Tape::new();
            let mut drop = rng::stream(cfg.seed, &[tag::DROPOUT, epoch as u64, bi as u64]);
            let numeric = |e: Error| match e {
                Error::NonFinite(_) => Error::NonFiniteLoss { epoch, batch: bi },
                other => other,
            };
            let f = model
                .forward(&mut tape, &batch.features, true, &mut drop)
                .map_err(numeric)?;
            let loss = tape
                .cross_entropy(f.logits, &batch.labels)
                .map_err(numeric)?;
            let l = tape.value(loss).data()[0];
            if !l.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: bi });
            }
            loss_sum += l * batch.labels.len() as f64;
            correct += tape
                .value(f.logits)
                .argmax_rows()
                .iter()
                .zip(&batch.labels)
                .filter(|(p, l)| p == l)
                .count();
            tape.backward(loss)?;
            let grads: Vec<Vec<f64>> = f
                .params
                .iter()
                .zip(model.params())
                .map(|(&v, p)| {
                    tape.grad(v)
                        .map(<[f64]>::to_vec)
                        .unwrap_or_else(|| vec![0.0; p.value.numel()])
                })
                .collect();
            let grad_refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
            let mut values: Vec<&mut [f64]> = model
                .params_mut()
                .iter_mut()
                .map(|p| p.value.data_mut())
                .collect();
            adam_step(&mut values, &grad_refs, &mut adam, lr, cfg)?;
        }

        let val = evaluate(&model, val_set, cfg.batch_size).map_err(|e| match e {
            Error::NonFiniteLoss { batch, .. } => Error::NonFiniteLoss { epoch, batch },
            other => other,
        })?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            train_acc: correct as f64 / train_set.len() as f64,
            val_loss: val.loss,
            val_acc: val.accuracy,
            lr,
        };
        on_epoch(&record);
        history.epochs.push(record);
        sched.step(val.loss);
        if val.loss < best.0 {
            best = (val.loss, model.clone());
            history.best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.early_stop_patience {
                history.stopped_early = true;
                break;
            }
        }
    }
    Ok((best.1, history))
}
