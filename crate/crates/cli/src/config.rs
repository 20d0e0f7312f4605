//! The `train` run configuration: schema, typed form and loading.

use std::path::{Path, PathBuf};

use dapr_core::baselines::MergeConfig;
use dapr_core::datagen::TaskKind;
use dapr_core::models::Activation;
use dapr_core::training::{DaprConfig, MetaSource, PredictionArch, PriorArch};
use serde::{Deserialize, Serialize};

use crate::schema::{opt, req, Field, Kind};
use crate::CliError;

const POSITIVE: Kind = Kind::Number { min: 0.0, strict: true };
const NON_NEGATIVE: Kind = Kind::Number { min: 0.0, strict: false };
const COUNT: Kind = Kind::Integer { min: 1 };
const ACTIVATION: Kind = Kind::Str(&["relu", "softplus", "tanh", "identity"]);
const LAYERS: Kind = Kind::Array { item: &COUNT, min_len: 1 };

const DATA: Kind = Kind::Tagged {
    tag: "source",
    variants: &[
        ("two_moons", &[req("n", Kind::Integer { min: 50 }), req("n_nuisance", Kind::Integer { min: 0 })]),
        (
            "meta_regression",
            &[req("n", Kind::Integer { min: 5 }), req("p", COUNT), req("k", Kind::Integer { min: 2 }), req("noise_std", NON_NEGATIVE)],
        ),
        ("files", &[req("dir", Kind::Text), req("task", Kind::Str(&["regression", "classification"]))]),
    ],
};

const PREDICTION: Kind = Kind::Tagged { tag: "kind", variants: &[("half_quarter", &[]), ("hidden", &[req("layers", LAYERS)])] };
const PRIOR: Kind = Kind::Tagged { tag: "kind", variants: &[("linear", &[]), ("hidden", &[req("layers", LAYERS)])] };

const MODEL: Kind = Kind::Object(&[
    req("prediction", PREDICTION),
    opt("activation", ACTIVATION),
    opt("prior", PRIOR),
    opt("prior_activation", ACTIVATION),
]);

const DAPR_CONFIG: &[Field] = &[
    opt("lambda", NON_NEGATIVE),
    opt("lr_f", POSITIVE),
    opt("lr_g", Kind::Nullable(&POSITIVE)),
    opt("batch_size", COUNT),
    opt("max_epochs", COUNT),
    opt("patience", COUNT),
    opt("eg_samples_per_step", COUNT),
    opt("loss", Kind::Nullable(&Kind::Str(&["mse", "binary_cross_entropy"]))),
    opt("comparison", Kind::Str(&["signed", "magnitude"])),
    opt("freeze_prior", Kind::Bool),
    opt("zero_prior_output", Kind::Bool),
];

const MERGE: &[Field] = &[
    opt("coupling", NON_NEGATIVE),
    opt("ridge", NON_NEGATIVE),
    opt("max_iter", COUNT),
    opt("tol", POSITIVE),
];

const TRAINER: Kind = Kind::Object(&[
    req("variant", Kind::Str(&["mlp", "mlp_l1", "mlp_l2", "dapr", "naive_meta_mlp", "lasso", "merge"])),
    opt("config", Kind::Object(DAPR_CONFIG)),
    opt("weight_reg_strength", NON_NEGATIVE),
    opt("meta", Kind::Str(&["informative", "noise"])),
    opt("lasso_lambda", NON_NEGATIVE),
    opt("merge", Kind::Object(MERGE)),
    opt("max_naive_width", COUNT),
]);

const EXPLAIN: Kind = Kind::Object(&[
    opt("n_samples", COUNT),
    opt("pdp_grid", Kind::Integer { min: 2 }),
    opt("pdp", Kind::Array { item: &Kind::Text, min_len: 0 }),
    opt("top_n", COUNT),
]);

pub const RUN_CONFIG: Kind = Kind::Object(&[
    req("data", DATA),
    req("model", MODEL),
    req("trainer", TRAINER),
    opt("explain", EXPLAIN),
    opt("output", Kind::Text),
    opt("seed", Kind::Integer { min: 0 }),
]);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSpec {
    TwoMoons { n: usize, n_nuisance: usize },
    MetaRegression { n: usize, p: usize, k: usize, noise_std: f64 },
    Files { dir: PathBuf, task: TaskKind },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub prediction: PredictionArch,
    #[serde(default = "relu")]
    pub activation: Activation,
    #[serde(default)]
    pub prior: PriorArch,
    #[serde(default = "relu")]
    pub prior_activation: Activation,
}

fn relu() -> Activation {
    Activation::Relu
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantName {
    Mlp,
    MlpL1,
    MlpL2,
    Dapr,
    NaiveMetaMlp,
    Lasso,
    Merge,
}

impl VariantName {
    pub fn as_str(self) -> &'static str {
        match self {
            VariantName::Mlp => "mlp",
            VariantName::MlpL1 => "mlp_l1",
            VariantName::MlpL2 => "mlp_l2",
            VariantName::Dapr => "dapr",
            VariantName::NaiveMetaMlp => "naive_meta_mlp",
            VariantName::Lasso => "lasso",
            VariantName::Merge => "merge",
        }
    }
}

/// Trainer settings; the seed lives at the top level of the run config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub lambda: f64,
    pub lr_f: f64,
    pub lr_g: Option<f64>,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub eg_samples_per_step: usize,
    pub loss: Option<dapr_core::training::LossKind>,
    pub comparison: dapr_core::attribution::Comparison,
    pub freeze_prior: bool,
    pub zero_prior_output: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        let d = DaprConfig::default();
        Self {
            lambda: d.lambda,
            lr_f: d.lr_f,
            lr_g: d.lr_g,
            batch_size: d.batch_size,
            max_epochs: d.max_epochs,
            patience: d.patience,
            eg_samples_per_step: d.eg_samples_per_step,
            loss: d.loss,
            comparison: d.comparison,
            freeze_prior: d.freeze_prior,
            zero_prior_output: d.zero_prior_output,
        }
    }
}

impl TrainerConfig {
    pub fn with_seed(&self, seed: u64) -> DaprConfig {
        DaprConfig {
            lambda: self.lambda,
            lr_f: self.lr_f,
            lr_g: self.lr_g,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            eg_samples_per_step: self.eg_samples_per_step,
            seed,
            loss: self.loss,
            comparison: self.comparison,
            freeze_prior: self.freeze_prior,
            zero_prior_output: self.zero_prior_output,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerSpec {
    pub variant: VariantName,
    #[serde(default)]
    pub config: TrainerConfig,
    #[serde(default)]
    pub weight_reg_strength: f64,
    #[serde(default)]
    pub meta: MetaSource,
    #[serde(default = "default_lasso")]
    pub lasso_lambda: f64,
    #[serde(default)]
    pub merge: MergeConfig,
    #[serde(default = "default_naive_width")]
    pub max_naive_width: usize,
}

fn default_lasso() -> f64 {
    0.01
}

fn default_naive_width() -> usize {
    100_000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExplainSpec {
    pub n_samples: usize,
    pub pdp_grid: usize,
    /// Meta-feature names to plot; empty means every non-constant column.
    pub pdp: Vec<String>,
    /// Features listed in importance.csv; `None` lists all.
    pub top_n: Option<usize>,
}

impl Default for ExplainSpec {
    fn default() -> Self {
        Self { n_samples: 200, pdp_grid: 50, pdp: Vec::new(), top_n: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSpec,
    pub model: ModelSpec,
    pub trainer: TrainerSpec,
    /// When present, `train` also exports attributions and prior explanations.
    #[serde(default)]
    pub explain: Option<ExplainSpec>,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub seed: Option<u64>,
}

/// Parses and checks a run config, reporting every schema violation.
pub fn parse_run_config(text: &str, origin: &Path) -> Result<RunConfig, CliError> {
    let value: serde_json::Value = serde_json::from_str(text)
        .map_err(|e| CliError::Config(format!("{}: invalid JSON: {e}", origin.display())))?;
    let mut errors = Vec::new();
    crate::schema::check(&value, &RUN_CONFIG, "", &mut errors);
    if !errors.is_empty() {
        return Err(CliError::Config(format!("{} has {} problem(s):\n  {}", origin.display(), errors.len(), errors.join("\n  "))));
    }
    let config: RunConfig =
        serde_json::from_value(value).map_err(|e| CliError::Config(format!("{}: {e}", origin.display())))?;
    let lr_g = config.trainer.config.lr_g.unwrap_or(0.1 * config.trainer.config.lr_f);
    if lr_g <= 0.0 || !lr_g.is_finite() {
        return Err(CliError::Config(format!("{}: trainer.config.lr_g must be positive", origin.display())));
    }
    Ok(config)
}

pub fn load_run_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_run_config(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "data": {"source": "two_moons", "n": 100, "n_nuisance": 3},
        "model": {"prediction": {"kind": "half_quarter"}},
        "trainer": {"variant": "mlp"}
    }"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let c = parse_run_config(MINIMAL, Path::new("run.json")).unwrap();
        assert_eq!(c.trainer.config.with_seed(4), DaprConfig { seed: 4, ..DaprConfig::default() });
        assert_eq!(c.explain, None);
        assert_eq!(c.model.activation, Activation::Relu);
    }

    #[test]
    fn missing_model_names_path() {
        let text = MINIMAL.replace(r#""model": {"prediction": {"kind": "half_quarter"}},"#, "");
        let err = parse_run_config(&text, Path::new("run.json")).unwrap_err().to_string();
        assert!(err.contains("model: required key is missing"), "{err}");
    }

    #[test]
    fn every_violation_listed() {
        let text = r#"{
            "data": {"source": "two_moons", "n": 10, "n_nuisance": -1},
            "model": {"prediction": {"kind": "hidden", "layers": []}, "colour": 1},
            "trainer": {"variant": "mlp", "config": {"lambda": -1, "seed": 3}}
        }"#;
        let err = parse_run_config(text, Path::new("run.json")).unwrap_err().to_string();
        for path in ["data.n:", "data.n_nuisance:", "model.prediction.layers:", "model.colour:", "trainer.config.lambda:", "trainer.config.seed:"] {
            assert!(err.contains(path), "{path} missing from {err}");
        }
        assert!(err.contains("6 problem(s)"), "{err}");
    }
}
