//! Experiment sweeps: every (variant, setting, seed) trial with
//! validation-selected hyperparameters, plus mean/standard-error summaries.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{evaluate, train_dapr, train_standard, DaprConfig, Metrics, WeightReg};
use crate::attribution::fmt_f64;
use crate::baselines::{lasso_fit, merge_fit, naive_metafeature_mlp, LinearModel, MergeConfig};
use crate::datagen::{gen_meta_regression, gen_noise_metafeatures, gen_two_moons, Dataset, MetaFeatureMatrix, Split, TaskKind};
use crate::error::{Error, Result};
use crate::models::{Activation, MlpSpec};
use crate::rng::derive_seed;
use crate::stats;

/// Data source of a sweep; each setting value fills in the free size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GeneratorSpec {
    /// Setting = number of nuisance features.
    TwoMoons { n: usize },
    /// Setting = number of features p.
    MetaRegression { n: usize, k: usize, noise_std: f64 },
}

impl GeneratorSpec {
    fn generate(&self, setting: usize, seed: u64) -> Result<(Dataset, MetaFeatureMatrix)> {
        let data_seed = derive_seed(seed, "data");
        match *self {
            GeneratorSpec::TwoMoons { n } => gen_two_moons(n, setting, data_seed),
            GeneratorSpec::MetaRegression { n, k, noise_std } => {
                let (d, m, _) = gen_meta_regression(n, setting, k, noise_std, data_seed)?;
                Ok((d, m))
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PredictionArch {
    /// `[p, p/2, p/4, 1]`.
    #[default]
    HalfQuarter,
    Hidden { layers: Vec<usize> },
}

impl PredictionArch {
    pub fn spec(&self, p: usize, activation: Activation) -> MlpSpec {
        match self {
            PredictionArch::HalfQuarter => MlpSpec::half_quarter(p, activation),
            PredictionArch::Hidden { layers } => MlpSpec::with_hidden(p, layers, activation),
        }
    }

    fn hidden(&self, p: usize) -> Vec<usize> {
        match self {
            PredictionArch::HalfQuarter => vec![p / 2, p / 4],
            PredictionArch::Hidden { layers } => layers.clone(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PriorArch {
    #[default]
    Linear,
    Hidden { layers: Vec<usize> },
}

impl PriorArch {
    pub fn spec(&self, k: usize, activation: Activation) -> MlpSpec {
        match self {
            PriorArch::Linear => MlpSpec::linear(k),
            PriorArch::Hidden { layers } => MlpSpec::with_hidden(k, layers, activation),
        }
    }

    fn label(&self) -> String {
        match self {
            PriorArch::Linear => "linear".into(),
            PriorArch::Hidden { layers } => {
                format!("mlp{}", layers.iter().map(|l| format!("_{l}")).collect::<String>())
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaSource {
    /// The generator's meta-features.
    #[default]
    Informative,
    /// Standard normal meta-features of the same shape.
    Noise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Variant {
    Mlp,
    MlpL1,
    MlpL2,
    Dapr {
        #[serde(default)]
        prior: PriorArch,
        #[serde(default)]
        meta: MetaSource,
    },
    NaiveMetaMlp,
    Lasso,
    Merge,
}

impl Variant {
    pub fn name(&self) -> String {
        match self {
            Variant::Mlp => "mlp".into(),
            Variant::MlpL1 => "mlp_l1".into(),
            Variant::MlpL2 => "mlp_l2".into(),
            Variant::Dapr { prior, meta } => {
                let source = match meta {
                    MetaSource::Informative => "",
                    MetaSource::Noise => "_noise",
                };
                format!("dapr_{}{source}", prior.label())
            }
            Variant::NaiveMetaMlp => "naive_meta_mlp".into(),
            Variant::Lasso => "lasso".into(),
            Variant::Merge => "merge".into(),
        }
    }
}

/// Candidate values searched on the validation split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperGrid {
    /// Attribution penalty weights (DAPr).
    pub lambda: Vec<f64>,
    /// Learning rates of the prediction network (all MLP variants).
    pub lr_f: Vec<f64>,
    /// L1/L2 weight penalty strengths.
    pub weight_reg: Vec<f64>,
    pub lasso: Vec<f64>,
    /// MERGE coupling weights.
    pub merge_coupling: Vec<f64>,
}

impl Default for HyperGrid {
    fn default() -> Self {
        Self {
            lambda: vec![0.01, 0.1, 1.0, 10.0],
            lr_f: vec![1e-3, 1e-4],
            weight_reg: vec![1e-4, 1e-3, 1e-2],
            lasso: vec![1e-3, 1e-2, 1e-1],
            merge_coupling: vec![1e-2, 1e-1, 1.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub generator: GeneratorSpec,
    pub settings: Vec<usize>,
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
    #[serde(default)]
    pub grid: HyperGrid,
    /// Shared trainer settings; `seed`, `lambda` and `lr_f` are set per trial.
    #[serde(default)]
    pub trainer: DaprConfig,
    #[serde(default)]
    pub prediction: PredictionArch,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default = "default_prior_activation")]
    pub prior_activation: Activation,
    #[serde(default)]
    pub merge: MergeConfig,
    /// Upper bound on the naive model's input width `p + p·k`.
    #[serde(default = "default_naive_width")]
    pub max_naive_width: usize,
}

fn default_activation() -> Activation {
    Activation::Relu
}

fn default_prior_activation() -> Activation {
    Activation::Relu
}

fn default_naive_width() -> usize {
    100_000
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        let nonempty = |ok: bool, what: &str| if ok { Ok(()) } else { Err(Error::invalid(format!("{what} must not be empty"))) };
        nonempty(!self.settings.is_empty(), "settings")?;
        nonempty(!self.seeds.is_empty(), "seeds")?;
        nonempty(!self.variants.is_empty(), "variants")?;
        let mut names: Vec<String> = self.variants.iter().map(Variant::name).collect();
        names.sort();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::invalid(format!("variant `{}` listed twice", w[0])));
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return Err(Error::invalid("seeds must be distinct"));
        }
        let grid = &self.grid;
        let used = |v: &Variant| self.variants.iter().any(|x| std::mem::discriminant(x) == std::mem::discriminant(v));
        let dapr = Variant::Dapr { prior: PriorArch::Linear, meta: MetaSource::Informative };
        let mlp_like = [Variant::Mlp, Variant::MlpL1, Variant::MlpL2, Variant::NaiveMetaMlp, dapr.clone()];
        nonempty(!used(&dapr) || !grid.lambda.is_empty(), "grid.lambda")?;
        nonempty(!mlp_like.iter().any(used) || !grid.lr_f.is_empty(), "grid.lr_f")?;
        nonempty(!(used(&Variant::MlpL1) || used(&Variant::MlpL2)) || !grid.weight_reg.is_empty(), "grid.weight_reg")?;
        nonempty(!used(&Variant::Lasso) || !grid.lasso.is_empty(), "grid.lasso")?;
        nonempty(!used(&Variant::Merge) || !grid.merge_coupling.is_empty(), "grid.merge_coupling")?;
        for &l in &grid.lambda {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::invalid(format!("grid.lambda value {l} must be finite and ≥ 0")));
            }
        }
        for &l in &grid.lr_f {
            if !(l > 0.0 && l.is_finite()) {
                return Err(Error::invalid(format!("grid.lr_f value {l} must be positive")));
            }
        }
        self.trainer.validate()
    }
}

/// One (variant, setting, seed) result. `error` is set when the trial failed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    pub variant: String,
    pub setting: usize,
    pub seed: u64,
    pub val_metric: Option<f64>,
    pub test_metric: Option<f64>,
    pub best_epoch: Option<usize>,
    /// Selected hyperparameters.
    pub hyperparameters: serde_json::Value,
    pub error: Option<String>,
}

/// Summary over seeds of one (variant, setting) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub variant: String,
    pub setting: usize,
    pub n_trials: usize,
    pub n_failed: usize,
    pub mean_val: f64,
    pub mean_test: f64,
    /// Sample standard deviation / √n over successful trials.
    pub se_test: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrialOutcome {
    pub metrics_val: Metrics,
    pub metrics_test: Metrics,
    pub best_epoch: Option<usize>,
    pub hyperparameters: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResults {
    pub task: Option<TaskKind>,
    pub trials: Vec<TrialRow>,
    pub aggregates: Vec<Aggregate>,
}

struct Candidate {
    val: Metrics,
    test: Metrics,
    best_epoch: Option<usize>,
    hyper: serde_json::Value,
}

fn pick(best: &mut Option<Candidate>, c: Candidate) {
    if best.as_ref().is_none_or(|b| c.val.better_than(&b.val)) {
        *best = Some(c);
    }
}

fn linear_metrics(model: &LinearModel, dataset: &Dataset, split: Split) -> Result<Metrics> {
    let out = model.predict(&dataset.x_split(split))?;
    Metrics::from_outputs(dataset.task, &out, &dataset.y_split(split))
}

fn require_regression(dataset: &Dataset, name: &str) -> Result<()> {
    if dataset.task != TaskKind::Regression {
        return Err(Error::invalid(format!("{name} is a regression baseline")));
    }
    Ok(())
}

/// Trains `variant` on one generated dataset, selecting hyperparameters by
/// validation metric (first candidate wins ties).
pub fn run_trial(spec: &ExperimentSpec, variant: &Variant, setting: usize, seed: u64) -> Result<TrialOutcome> {
    let (dataset, meta) = spec.generator.generate(setting, seed)?;
    let p = dataset.p();
    let f_spec = spec.prediction.spec(p, spec.activation);
    let base = DaprConfig { seed, ..spec.trainer.clone() };
    let grid = &spec.grid;
    let mut best: Option<Candidate> = None;

    match variant {
        Variant::Mlp | Variant::MlpL1 | Variant::MlpL2 => {
            let strengths: Vec<Option<f64>> = match variant {
                Variant::Mlp => vec![None],
                _ => grid.weight_reg.iter().copied().map(Some).collect(),
            };
            for &lr_f in &grid.lr_f {
                for &s in &strengths {
                    let reg = match (variant, s) {
                        (Variant::MlpL1, Some(s)) => WeightReg::L1(s),
                        (Variant::MlpL2, Some(s)) => WeightReg::L2(s),
                        _ => WeightReg::None,
                    };
                    let cfg = DaprConfig { lr_f, ..base.clone() };
                    let (f, history) = train_standard(&dataset, &f_spec, &cfg, reg)?;
                    let hyper = serde_json::json!({ "lr_f": lr_f, "weight_reg": reg });
                    pick(&mut best, Candidate {
                        val: evaluate(&f, &dataset, Split::Val)?,
                        test: evaluate(&f, &dataset, Split::Test)?,
                        best_epoch: Some(history.best_epoch),
                        hyper,
                    });
                }
            }
        }
        Variant::Dapr { prior, meta: source } => {
            let meta = match source {
                MetaSource::Informative => meta,
                MetaSource::Noise => gen_noise_metafeatures(&meta.feature_names, meta.k(), derive_seed(seed, "noise_meta"))?,
            };
            let g_spec = prior.spec(meta.k(), spec.prior_activation);
            for &lr_f in &grid.lr_f {
                for &lambda in &grid.lambda {
                    let cfg = DaprConfig { lr_f, lambda, ..base.clone() };
                    let out = train_dapr(&dataset, &meta, &f_spec, &g_spec, &cfg)?;
                    let hyper = serde_json::json!({ "lr_f": lr_f, "lambda": lambda });
                    pick(&mut best, Candidate {
                        val: evaluate(&out.f, &dataset, Split::Val)?,
                        test: evaluate(&out.f, &dataset, Split::Test)?,
                        best_epoch: Some(out.history.best_epoch),
                        hyper,
                    });
                }
            }
        }
        Variant::NaiveMetaMlp => {
            let hidden = spec.prediction.hidden(p);
            for &lr_f in &grid.lr_f {
                let cfg = DaprConfig { lr_f, ..base.clone() };
                let model = naive_metafeature_mlp(&dataset, &meta, &hidden, spec.activation, &cfg, spec.max_naive_width)?;
                let metrics = |split: Split| -> Result<Metrics> {
                    let out = model.predict(&dataset.x_split(split))?;
                    Metrics::from_outputs(dataset.task, &out, &dataset.y_split(split))
                };
                pick(&mut best, Candidate {
                    val: metrics(Split::Val)?,
                    test: metrics(Split::Test)?,
                    best_epoch: Some(model.history.best_epoch),
                    hyper: serde_json::json!({ "lr_f": lr_f }),
                });
            }
        }
        Variant::Lasso => {
            require_regression(&dataset, "lasso")?;
            let x = dataset.x_split(Split::Train);
            let y = dataset.y_split(Split::Train);
            for &lambda in &grid.lasso {
                let model = lasso_fit(&x, &y, lambda)?;
                pick(&mut best, Candidate {
                    val: linear_metrics(&model, &dataset, Split::Val)?,
                    test: linear_metrics(&model, &dataset, Split::Test)?,
                    best_epoch: None,
                    hyper: serde_json::json!({ "lambda": lambda }),
                });
            }
        }
        Variant::Merge => {
            require_regression(&dataset, "merge")?;
            let x = dataset.x_split(Split::Train);
            let y = dataset.y_split(Split::Train);
            for &coupling in &grid.merge_coupling {
                let fit = merge_fit(&x, &y, &meta, &MergeConfig { coupling, ..spec.merge })?;
                pick(&mut best, Candidate {
                    val: linear_metrics(&fit.model, &dataset, Split::Val)?,
                    test: linear_metrics(&fit.model, &dataset, Split::Test)?,
                    best_epoch: None,
                    hyper: serde_json::json!({ "coupling": coupling }),
                });
            }
        }
    }

    let best = best.ok_or_else(|| Error::invalid(format!("empty hyperparameter grid for {}", variant.name())))?;
    Ok(TrialOutcome { metrics_val: best.val, metrics_test: best.test, best_epoch: best.best_epoch, hyperparameters: best.hyper })
}

/// Runs every trial on up to `jobs` threads. Failed trials are recorded and
/// the sweep continues; rows are ordered by (variant, setting, seed) as
/// listed in the spec regardless of scheduling.
pub fn run_sweep(spec: &ExperimentSpec, jobs: usize) -> Result<SweepResults> {
    spec.validate()?;
    let mut cells = Vec::new();
    for variant in &spec.variants {
        for &setting in &spec.settings {
            for &seed in &spec.seeds {
                cells.push((variant, setting, seed));
            }
        }
    }
    let run = |&(variant, setting, seed): &(&Variant, usize, u64)| -> (TrialRow, Option<TaskKind>) {
        let mut row = TrialRow {
            variant: variant.name(),
            setting,
            seed,
            val_metric: None,
            test_metric: None,
            best_epoch: None,
            hyperparameters: serde_json::Value::Null,
            error: None,
        };
        match run_trial(spec, variant, setting, seed) {
            Ok(out) => {
                row.val_metric = Some(out.metrics_val.value);
                row.test_metric = Some(out.metrics_test.value);
                row.best_epoch = out.best_epoch;
                row.hyperparameters = out.hyperparameters;
                (row, Some(out.metrics_test.task))
            }
            Err(e) => {
                row.error = Some(e.to_string());
                (row, None)
            }
        }
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("cannot start worker threads: {e}")))?;
    let results: Vec<(TrialRow, Option<TaskKind>)> = pool.install(|| cells.par_iter().map(run).collect());
    let task = results.iter().find_map(|(_, t)| *t);
    let trials: Vec<TrialRow> = results.into_iter().map(|(r, _)| r).collect();
    let aggregates = aggregate(spec, &trials);
    Ok(SweepResults { task, trials, aggregates })
}

fn aggregate(spec: &ExperimentSpec, trials: &[TrialRow]) -> Vec<Aggregate> {
    let mut out = Vec::new();
    for variant in &spec.variants {
        let name = variant.name();
        for &setting in &spec.settings {
            let rows: Vec<&TrialRow> = trials.iter().filter(|r| r.variant == name && r.setting == setting).collect();
            let ok: Vec<&TrialRow> = rows.iter().copied().filter(|r| r.error.is_none()).collect();
            let test: Vec<f64> = ok.iter().filter_map(|r| r.test_metric).collect();
            let val: Vec<f64> = ok.iter().filter_map(|r| r.val_metric).collect();
            out.push(Aggregate {
                variant: name.clone(),
                setting,
                n_trials: rows.len(),
                n_failed: rows.len() - ok.len(),
                mean_val: if val.is_empty() { f64::NAN } else { stats::mean(&val) },
                mean_test: if test.is_empty() { f64::NAN } else { stats::mean(&test) },
                se_test: if test.is_empty() { f64::NAN } else { stats::standard_error(&test) },
            });
        }
    }
    out
}

impl SweepResults {
    pub fn failures(&self) -> usize {
        self.trials.iter().filter(|r| r.error.is_some()).count()
    }

    pub fn aggregate(&self, variant: &str, setting: usize) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.variant == variant && a.setting == setting)
    }

    /// Trial rows followed by aggregate rows (flagged by `row_type`).
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
        let csv_err = |e: csv::Error| Error::invalid(format!("cannot format results: {e}"));
        w.write_record([
            "row_type", "variant", "setting", "seed", "n_trials", "n_failed", "val_metric", "test_metric", "test_se",
            "best_epoch", "hyperparameters", "error",
        ])
        .map_err(csv_err)?;
        for r in &self.trials {
            w.write_record([
                "trial".to_string(),
                r.variant.clone(),
                r.setting.to_string(),
                r.seed.to_string(),
                "1".into(),
                u8::from(r.error.is_some()).to_string(),
                opt(r.val_metric),
                opt(r.test_metric),
                String::new(),
                r.best_epoch.map(|e| e.to_string()).unwrap_or_default(),
                if r.hyperparameters.is_null() { String::new() } else { r.hyperparameters.to_string() },
                r.error.clone().unwrap_or_default(),
            ])
            .map_err(csv_err)?;
        }
        for a in &self.aggregates {
            w.write_record([
                "aggregate".to_string(),
                a.variant.clone(),
                a.setting.to_string(),
                String::new(),
                a.n_trials.to_string(),
                a.n_failed.to_string(),
                fmt_f64(a.mean_val),
                fmt_f64(a.mean_test),
                fmt_f64(a.se_test),
                String::new(),
                String::new(),
                String::new(),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(format!("cannot format results: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }
}
