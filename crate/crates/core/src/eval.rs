//! Stratified k-fold cross-validation and classification metrics.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::dsp::MelConfig;
use crate::error::{arg_err, Error, Result};
use crate::model::{EmotionNet, ModelConfig};
use crate::rng::{self, tag};
use crate::train::{evaluate, train_with, EpochRecord, Example, History, TrainConfig};

/// Share of each class's training portion held out for validation.
pub const VALIDATION_FRACTION: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    /// Fold of each sample, in `0..k`.
    pub folds: Vec<usize>,
    pub k: usize,
    pub seed: u64,
}

impl FoldAssignment {
    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.folds.len())
            .filter(|&i| self.folds[i] == fold)
            .collect()
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.folds.len())
            .filter(|&i| self.folds[i] != fold)
            .collect()
    }
}

fn by_class(
    labels: &[usize],
    indices: impl IntoIterator<Item = usize>,
) -> BTreeMap<usize, Vec<usize>> {
    let mut classes: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in indices {
        classes.entry(labels[i]).or_default().push(i);
    }
    classes
}

/// Shuffles each class by `seed` and deals its members round-robin to the
/// folds. Each class continues the deal where the previous class stopped so
/// fold sizes also stay within one of each other.
pub fn stratified_kfold(labels: &[usize], k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(arg_err(
            "stratified_kfold",
            format!("k = {k}, need at least 2"),
        ));
    }
    let classes = by_class(labels, 0..labels.len());
    if let Some((c, members)) = classes.iter().find(|(_, m)| m.len() < k) {
        return Err(arg_err(
            "stratified_kfold",
            format!(
                "class {c} has {} members, fewer than k = {k}",
                members.len()
            ),
        ));
    }
    let mut folds = vec![0; labels.len()];
    let mut next = 0;
    for (&c, members) in &classes {
        let mut members = members.clone();
        members.shuffle(&mut rng::stream(seed, &[tag::FOLDS, c as u64]));
        for i in members {
            folds[i] = next;
            next = (next + 1) % k;
        }
    }
    Ok(FoldAssignment { folds, k, seed })
}

/// Splits `indices` into (train, validation), taking `max(1, round(10%))` of
/// each class with at least two members for validation.
pub fn validation_split(
    labels: &[usize],
    indices: &[usize],
    seed: u64,
    fold: usize,
) -> (Vec<usize>, Vec<usize>) {
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (c, mut members) in by_class(labels, indices.iter().copied()) {
        members.shuffle(&mut rng::stream(
            seed,
            &[tag::VALIDATION_SPLIT, fold as u64, c as u64],
        ));
        let n_val = if members.len() < 2 {
            0
        } else {
            (libm::round(members.len() as f64 * VALIDATION_FRACTION) as usize)
                .clamp(1, members.len() - 1)
        };
        val.extend_from_slice(&members[..n_val]);
        train.extend_from_slice(&members[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// `[true][pred]` counts.
pub type ConfusionMatrix = Vec<Vec<u64>>;

pub fn confusion_matrix(
    preds: &[usize],
    labels: &[usize],
    classes: usize,
) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(arg_err(
            "confusion_matrix",
            format!("{} predictions for {} labels", preds.len(), labels.len()),
        ));
    }
    let mut m = vec![vec![0u64; classes]; classes];
    for (&p, &l) in preds.iter().zip(labels) {
        if p >= classes || l >= classes {
            return Err(arg_err(
                "confusion_matrix",
                format!("class pair ({l}, {p}) out of range for {classes} classes"),
            ));
        }
        m[l][p] += 1;
    }
    Ok(m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub per_class_f1: Vec<f64>,
}

/// `2tp / (2tp + fp + fn)`, zero when the class never occurs.
fn f1(tp: u64, fp: u64, fn_: u64) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        (2 * tp) as f64 / denom as f64
    }
}

pub fn metrics(conf: &ConfusionMatrix) -> Result<Metrics> {
    let c = conf.len();
    if conf.iter().any(|row| row.len() != c) {
        return Err(arg_err("metrics", "confusion matrix must be square"));
    }
    let total: u64 = conf.iter().flatten().sum();
    if total == 0 {
        return Err(Error::Empty("metrics"));
    }
    let trace: u64 = (0..c).map(|i| conf[i][i]).sum();
    let per_class_f1: Vec<f64> = (0..c)
        .map(|i| {
            let tp = conf[i][i];
            let fp = (0..c).map(|r| conf[r][i]).sum::<u64>() - tp;
            let fn_ = conf[i].iter().sum::<u64>() - tp;
            f1(tp, fp, fn_)
        })
        .collect();
    Ok(Metrics {
        accuracy: trace as f64 / total as f64,
        micro_f1: f1(trace, total - trace, total - trace),
        macro_f1: per_class_f1.iter().sum::<f64>() / c as f64,
        per_class_f1,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub test_size: usize,
    pub accuracy: f64,
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub confusion: ConfusionMatrix,
    pub best_epoch: usize,
    pub epochs_run: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub accuracy: f64,
    pub micro_f1: f64,
    pub macro_f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub k: usize,
    pub seed: u64,
    pub num_classes: usize,
    pub folds: Vec<FoldMetrics>,
    pub mean: Summary,
    /// Population standard deviation across folds.
    pub std: Summary,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, libm::sqrt(var))
}

impl FoldReport {
    pub fn from_folds(
        k: usize,
        seed: u64,
        num_classes: usize,
        folds: Vec<FoldMetrics>,
    ) -> Result<Self> {
        if folds.is_empty() {
            return Err(Error::Empty("fold report"));
        }
        let stat = |f: fn(&FoldMetrics) -> f64| mean_std(&folds.iter().map(f).collect::<Vec<_>>());
        let (acc, micro, macro_) = (
            stat(|f| f.accuracy),
            stat(|f| f.micro_f1),
            stat(|f| f.macro_f1),
        );
        Ok(Self {
            k,
            seed,
            num_classes,
            mean: Summary {
                accuracy: acc.0,
                micro_f1: micro.0,
                macro_f1: macro_.0,
            },
            std: Summary {
                accuracy: acc.1,
                micro_f1: micro.1,
                macro_f1: macro_.1,
            },
            folds,
        })
    }
}

/// Everything needed to train and score the folds of one experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct Experiment<'a> {
    pub dataset: &'a [Example],
    pub model: &'a ModelConfig,
    pub train: &'a TrainConfig,
    pub augment: &'a AugmentConfig,
    pub mel: &'a MelConfig,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct FoldOutcome {
    pub metrics: FoldMetrics,
    pub history: History,
    /// Best-validation-loss weights.
    pub model: EmotionNet,
}

impl Experiment<'_> {
    pub fn labels(&self) -> Vec<usize> {
        self.dataset.iter().map(|e| e.label).collect()
    }

    pub fn assign(&self, k: usize) -> Result<FoldAssignment> {
        stratified_kfold(&self.labels(), k, self.seed)
    }

    /// Trains on every fold but `fold` (minus a stratified validation split)
    /// and scores the held-out fold in evaluation mode.
    pub fn run_fold(
        &self,
        folds: &FoldAssignment,
        fold: usize,
        on_epoch: &mut dyn FnMut(&EpochRecord),
    ) -> Result<FoldOutcome> {
        let labels = self.labels();
        let (train_idx, val_idx) =
            validation_split(&labels, &folds.train_indices(fold), self.seed, fold);
        let test_idx = folds.test_indices(fold);
        if val_idx.is_empty() {
            return Err(arg_err(
                "cross_validate",
                format!("fold {fold}: no class is large enough for a validation split"),
            ));
        }
        let pick = |idx: &[usize]| {
            idx.iter()
                .map(|&i| self.dataset[i].clone())
                .collect::<Vec<_>>()
        };
        let fold_seed = rng::derive_seed(self.seed, &[fold as u64]);
        let model = EmotionNet::build(self.model, fold_seed)?;
        let cfg = TrainConfig {
            seed: fold_seed,
            ..self.train.clone()
        };
        let (model, history) = train_with(
            model,
            &pick(&train_idx),
            &pick(&val_idx),
            self.augment,
            self.mel,
            &cfg,
            on_epoch,
        )?;
        let test = pick(&test_idx);
        let eval = evaluate(&model, &test, cfg.batch_size)?;
        let truth: Vec<usize> = test.iter().map(|e| e.label).collect();
        let confusion = confusion_matrix(&eval.predictions, &truth, self.model.num_classes)?;
        let m = metrics(&confusion)?;
        let metrics = FoldMetrics {
            fold,
            test_size: test.len(),
            accuracy: m.accuracy,
            micro_f1: m.micro_f1,
            macro_f1: m.macro_f1,
            confusion,
            best_epoch: history.best_epoch,
            epochs_run: history.epochs.len(),
        };
        Ok(FoldOutcome {
            metrics,
            history,
            model,
        })
    }

    /// Runs all `k` folds in order.
    pub fn cross_validate(&self, k: usize) -> Result<(FoldReport, Vec<FoldOutcome>)> {
        let folds = self.assign(k)?;
        let outcomes = (0..k)
            .map(|f| self.run_fold(&folds, f, &mut |_| {}))
            .collect::<Result<Vec<_>>>()?;
        let report = self.report(k, &outcomes)?;
        Ok((report, outcomes))
    }

    pub fn report(&self, k: usize, outcomes: &[FoldOutcome]) -> Result<FoldReport> {
        FoldReport::from_folds(
            k,
            self.seed,
            self.model.num_classes,
            outcomes.iter().map(|o| o.metrics.clone()).collect(),
        )
    }
}
