//! Joint prediction/prior training, plain baselines trainers, evaluation and
//! experiment sweeps.

mod sweep;
mod trainer;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attribution::{fmt_f64, Comparison};
use crate::autodiff::sigmoid;
use crate::datagen::{Dataset, Split, TaskKind};
use crate::error::{Error, Result};
use crate::models::Model;

pub use sweep::{
    run_sweep, run_trial, Aggregate, ExperimentSpec, GeneratorSpec, HyperGrid, MetaSource, PredictionArch, PriorArch,
    SweepResults, TrialOutcome, TrialRow, Variant,
};
pub use trainer::{train_dapr, train_dapr_from, train_standard, DaprOutcome, DaprTrainer, StepStats};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    BinaryCrossEntropy,
}

impl LossKind {
    pub fn for_task(task: TaskKind) -> Self {
        match task {
            TaskKind::Regression => LossKind::Mse,
            TaskKind::Classification => LossKind::BinaryCrossEntropy,
        }
    }

    /// Mean loss of raw outputs (logits for cross-entropy) against labels.
    pub fn mean(self, outputs: &[f64], labels: &[f64]) -> f64 {
        let total: f64 = outputs
            .iter()
            .zip(labels)
            .map(|(&z, &y)| match self {
                LossKind::Mse => (z - y).powi(2),
                LossKind::BinaryCrossEntropy => crate::autodiff::softplus(z) - y * z,
            })
            .sum();
        total / outputs.len() as f64
    }
}

/// Penalty on the prediction model's own parameters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "strength", rename_all = "lowercase")]
pub enum WeightReg {
    #[default]
    None,
    /// `λ′·Σ|θ|`
    L1(f64),
    /// `λ′·Σθ²`
    L2(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DaprConfig {
    /// Attribution penalty weight.
    pub lambda: f64,
    pub lr_f: f64,
    /// Defaults to `0.1 · lr_f`.
    pub lr_g: Option<f64>,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// (reference, α) draws per training sample per step.
    pub eg_samples_per_step: usize,
    pub seed: u64,
    /// Defaults to the task's natural loss.
    pub loss: Option<LossKind>,
    pub comparison: Comparison,
    /// Keep the prior's initial parameters fixed.
    pub freeze_prior: bool,
    /// [`train_dapr`] starts the prior with a zeroed output layer.
    pub zero_prior_output: bool,
}

impl Default for DaprConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            lr_f: 1e-3,
            lr_g: None,
            batch_size: 32,
            max_epochs: 200,
            patience: 10,
            eg_samples_per_step: 1,
            seed: 0,
            loss: None,
            comparison: Comparison::default(),
            freeze_prior: false,
            zero_prior_output: true,
        }
    }
}

impl DaprConfig {
    pub fn lr_g(&self) -> f64 {
        self.lr_g.unwrap_or(0.1 * self.lr_f)
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: &str| if ok { Ok(()) } else { Err(Error::invalid(msg.to_string())) };
        check(self.lambda >= 0.0 && self.lambda.is_finite(), "lambda must be finite and ≥ 0")?;
        check(self.lr_f > 0.0 && self.lr_f.is_finite(), "lr_f must be positive")?;
        check(self.lr_g() > 0.0 && self.lr_g().is_finite(), "lr_g must be positive")?;
        check(self.batch_size >= 1, "batch_size must be ≥ 1")?;
        check(self.patience >= 1, "patience must be ≥ 1")?;
        check(self.max_epochs >= 1, "max_epochs must be ≥ 1")?;
        check(self.eg_samples_per_step >= 1, "eg_samples_per_step must be ≥ 1")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean prediction loss over the epoch's batches.
    pub train_loss: f64,
    /// Mean attribution penalty over the epoch's batches (0 without a prior).
    pub penalty: f64,
    pub val_loss: f64,
    /// Validation accuracy (classification) or MSE (regression).
    pub val_metric: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Index into `epochs` of the returned parameters.
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn best(&self) -> &EpochRecord {
        &self.epochs[self.best_epoch]
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("epoch,train_loss,penalty,val_loss,val_metric,best\n");
        for r in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.epoch,
                fmt_f64(r.train_loss),
                fmt_f64(r.penalty),
                fmt_f64(r.val_loss),
                fmt_f64(r.val_metric),
                u8::from(r.epoch == self.best_epoch)
            ));
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Split-level metrics: accuracy at a 0.5 sigmoid threshold for
/// classification, MSE for regression.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub task: TaskKind,
    /// Mean prediction loss (MSE or cross-entropy).
    pub loss: f64,
    /// Accuracy or MSE.
    pub value: f64,
}

impl Metrics {
    pub fn from_outputs(task: TaskKind, outputs: &[f64], labels: &[f64]) -> Result<Self> {
        if outputs.is_empty() {
            return Err(Error::invalid("cannot evaluate an empty split"));
        }
        if outputs.len() != labels.len() {
            return Err(Error::invalid(format!("{} outputs for {} labels", outputs.len(), labels.len())));
        }
        let loss = LossKind::for_task(task).mean(outputs, labels);
        let value = match task {
            TaskKind::Regression => loss,
            TaskKind::Classification => {
                let correct = outputs
                    .iter()
                    .zip(labels)
                    .filter(|(&z, &y)| (sigmoid(z) >= 0.5) == (y == 1.0))
                    .count();
                correct as f64 / outputs.len() as f64
            }
        };
        Ok(Self { task, loss, value })
    }

    /// Whether `self` beats `other` on the task's metric.
    pub fn better_than(&self, other: &Metrics) -> bool {
        match self.task {
            TaskKind::Regression => self.value < other.value,
            TaskKind::Classification => self.value > other.value,
        }
    }
}

pub fn evaluate<M: Model>(model: &M, dataset: &Dataset, split: Split) -> Result<Metrics> {
    let rows = dataset.splits.get(split);
    if rows.is_empty() {
        return Err(Error::invalid(format!("split {split:?} is empty")));
    }
    let outputs = model.predict(&dataset.x_split(split))?;
    Metrics::from_outputs(dataset.task, &outputs, &dataset.y_split(split))
}
