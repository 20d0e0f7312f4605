use std::path::{Path, PathBuf};

use dapr_core::attribution::{expected_gradients_batch, fmt_f64, write_attributions_csv, AttributionConfig};
use dapr_core::baselines::{lasso_fit, merge_fit, naive_metafeature_mlp, LinearModel, MergeConfig};
use dapr_core::datagen::{
    gen_meta_regression, gen_noise_metafeatures, gen_two_moons, load_csv, load_metafeatures, save_csv, DataPaths, Dataset,
    MetaFeatureMatrix, Split, TaskKind,
};
use dapr_core::explain::{pdp, rank_features, second_order_explanations, write_explanations_csv, write_importance_csv, write_pdp_csv};
use dapr_core::models::{Mlp, Model};
use dapr_core::rng::derive_seed;
use dapr_core::training::{
    evaluate, run_sweep, train_dapr, train_standard, ExperimentSpec, MetaSource, Metrics, TrainHistory, WeightReg,
};
use dapr_core::Error;
use serde::Serialize;

use crate::config::{load_run_config, DataSpec, ExplainSpec, RunConfig, VariantName};
use crate::{Cli, CliError, Command, ExplainArgs, Generator, GlobalArgs};

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let g = &cli.global;
    match &cli.command {
        Command::Gen { generator } => cmd_gen(g, generator),
        Command::Train { config } => cmd_train(g, config),
        Command::Sweep { spec } => cmd_sweep(g, spec),
        Command::Explain(args) => cmd_explain(g, args),
    }
}

fn log(g: &GlobalArgs, msg: impl AsRef<str>) {
    if g.verbose {
        eprintln!("{}", msg.as_ref());
    }
}

fn output_dir(flag: Option<&PathBuf>, config: Option<&PathBuf>) -> Result<PathBuf, CliError> {
    let dir = flag
        .or(config)
        .cloned()
        .ok_or_else(|| CliError::Config("no output directory: pass --out or set \"output\" in the config".into()))?;
    std::fs::create_dir_all(&dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
    Ok(dir)
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::Runtime(Error::Io { path: path.into(), source: e }))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("serialisable") + "\n";
    write_file(path, &text)
}

fn cmd_gen(g: &GlobalArgs, generator: &Generator) -> Result<(), CliError> {
    let out = output_dir(g.out.as_ref(), None)?;
    let seed = derive_seed(g.seed.unwrap_or(0), "data");
    let paths = DataPaths::in_dir(&out);
    match *generator {
        Generator::TwoMoons { n, nuisance } => {
            let (dataset, meta) = gen_two_moons(n, nuisance, seed)?;
            save_csv(&paths, &dataset, &meta)?;
            log(g, format!("wrote {} samples × {} features to {}", dataset.n(), dataset.p(), out.display()));
        }
        Generator::MetaRegression { n, p, k, noise_std } => {
            let (dataset, meta, w) = gen_meta_regression(n, p, k, noise_std, seed)?;
            save_csv(&paths, &dataset, &meta)?;
            let mut text = String::from("feature,weight\n");
            for (name, v) in dataset.feature_names.iter().zip(&w) {
                text.push_str(&format!("{name},{}\n", fmt_f64(*v)));
            }
            write_file(&out.join("true_weights.csv"), &text)?;
            log(g, format!("wrote {} samples × {} features to {}", dataset.n(), dataset.p(), out.display()));
        }
    }
    Ok(())
}

fn load_data(spec: &DataSpec, seed: u64) -> Result<(Dataset, MetaFeatureMatrix), CliError> {
    let data_seed = derive_seed(seed, "data");
    Ok(match spec {
        DataSpec::TwoMoons { n, n_nuisance } => gen_two_moons(*n, *n_nuisance, data_seed)?,
        DataSpec::MetaRegression { n, p, k, noise_std } => {
            let (d, m, _) = gen_meta_regression(*n, *p, *k, *noise_std, data_seed)?;
            (d, m)
        }
        DataSpec::Files { dir, task } => load_csv(&DataPaths::in_dir(dir), *task)?,
    })
}

#[derive(Serialize)]
struct RunMetrics<'a> {
    variant: &'a str,
    seed: u64,
    metric: &'static str,
    config: &'a RunConfig,
    val_metric: f64,
    test_metric: f64,
    best_epoch: Option<usize>,
}

#[derive(Serialize)]
struct Diagnostics {
    epoch: usize,
    batch: usize,
    term: String,
    message: String,
}

fn metric_name(task: TaskKind) -> &'static str {
    match task {
        TaskKind::Classification => "accuracy",
        TaskKind::Regression => "mse",
    }
}

fn linear_metrics(model: &LinearModel, dataset: &Dataset, split: Split) -> Result<Metrics, CliError> {
    let out = model.predict(&dataset.x_split(split))?;
    Ok(Metrics::from_outputs(dataset.task, &out, &dataset.y_split(split))?)
}

fn write_importance_in_order(path: &Path, names: &[String], importance: &[f64]) -> Result<(), CliError> {
    let rows: Vec<(String, f64)> = names.iter().cloned().zip(importance.iter().copied()).collect();
    Ok(write_importance_csv(path, &rows)?)
}

struct Trained {
    val: Metrics,
    test: Metrics,
    best_epoch: Option<usize>,
}

/// Test-split attributions of `f` against training-split references.
fn export_attributions(out: &Path, f: &Mlp, dataset: &Dataset, explain: &ExplainSpec, seed: u64) -> Result<(), CliError> {
    let cfg = AttributionConfig::new(explain.n_samples, derive_seed(seed, "explain"));
    let phi = expected_gradients_batch(f, &dataset.x_split(Split::Test), &dataset.x_split(Split::Train), &cfg)?;
    Ok(write_attributions_csv(&out.join("attributions.csv"), &dataset.feature_names, &phi)?)
}

fn mlp_outputs(out: &Path, f: &Mlp, history: &TrainHistory, dataset: &Dataset, explain: Option<(&ExplainSpec, u64)>) -> Result<Trained, CliError> {
    f.save(&out.join("model.json"))?;
    history.write_csv(&out.join("history.csv"))?;
    if let Some((spec, seed)) = explain {
        export_attributions(out, f, dataset, spec, seed)?;
    }
    Ok(Trained {
        val: evaluate(f, dataset, Split::Val)?,
        test: evaluate(f, dataset, Split::Test)?,
        best_epoch: Some(history.best_epoch),
    })
}

fn train_variant(config: &RunConfig, seed: u64, out: &Path, dataset: &Dataset, meta: &MetaFeatureMatrix) -> Result<Trained, CliError> {
    let trainer = &config.trainer;
    let cfg = trainer.config.with_seed(seed);
    let model = &config.model;
    let f_spec = model.prediction.spec(dataset.p(), model.activation);
    let strength = trainer.weight_reg_strength;
    let explain = config.explain.as_ref().map(|e| (e, seed));
    match trainer.variant {
        VariantName::Mlp | VariantName::MlpL1 | VariantName::MlpL2 => {
            let reg = match trainer.variant {
                VariantName::MlpL1 => WeightReg::L1(strength),
                VariantName::MlpL2 => WeightReg::L2(strength),
                _ => WeightReg::None,
            };
            let (f, history) = train_standard(dataset, &f_spec, &cfg, reg)?;
            mlp_outputs(out, &f, &history, dataset, explain)
        }
        VariantName::Dapr => {
            let meta = match trainer.meta {
                MetaSource::Informative => meta.clone(),
                MetaSource::Noise => gen_noise_metafeatures(&meta.feature_names, meta.k(), derive_seed(seed, "noise_meta"))?,
            };
            let g_spec = model.prior.spec(meta.k(), model.prior_activation);
            let outcome = train_dapr(dataset, &meta, &f_spec, &g_spec, &cfg)?;
            outcome.g.save(&out.join("prior.json"))?;
            let importance = outcome.g.predict(&meta.values)?;
            write_importance_in_order(&out.join("importance.csv"), &meta.feature_names, &importance)?;
            if let Some(spec) = &config.explain {
                let dir = out.join("explain");
                std::fs::create_dir_all(&dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
                let selected = pdp_columns(&meta, &spec.pdp, "explain.pdp")?;
                let settings = PriorExport { n_samples: spec.n_samples, grid: spec.pdp_grid, top: spec.top_n, seed };
                export_prior(&dir, &outcome.g, &meta, &selected, &settings)?;
            }
            mlp_outputs(out, &outcome.f, &outcome.history, dataset, explain)
        }
        VariantName::NaiveMetaMlp => {
            let hidden = &f_spec.layer_sizes[1..f_spec.layer_sizes.len() - 1];
            let trained = naive_metafeature_mlp(dataset, meta, hidden, model.activation, &cfg, trainer.max_naive_width)?;
            trained.mlp.save(&out.join("model.json"))?;
            trained.history.write_csv(&out.join("history.csv"))?;
            let metrics = |split: Split| -> Result<Metrics, CliError> {
                let outputs = trained.predict(&dataset.x_split(split))?;
                Ok(Metrics::from_outputs(dataset.task, &outputs, &dataset.y_split(split))?)
            };
            Ok(Trained { val: metrics(Split::Val)?, test: metrics(Split::Test)?, best_epoch: Some(trained.history.best_epoch) })
        }
        VariantName::Lasso | VariantName::Merge => {
            if dataset.task != TaskKind::Regression {
                return Err(CliError::Config(format!("{} needs a regression dataset", trainer.variant.as_str())));
            }
            let x = dataset.x_split(Split::Train);
            let y = dataset.y_split(Split::Train);
            let linear = if trainer.variant == VariantName::Lasso {
                let m = lasso_fit(&x, &y, trainer.lasso_lambda)?;
                write_json(&out.join("linear_model.json"), &m)?;
                m
            } else {
                let merge: MergeConfig = trainer.merge;
                let fit = merge_fit(&x, &y, meta, &merge)?;
                write_json(&out.join("linear_model.json"), &fit.model)?;
                let mut text = String::from("meta_feature,beta\n");
                for (name, b) in meta.meta_names.iter().zip(&fit.beta) {
                    text.push_str(&format!("{name},{}\n", fmt_f64(*b)));
                }
                write_file(&out.join("meta_coefficients.csv"), &text)?;
                fit.model
            };
            Ok(Trained {
                val: linear_metrics(&linear, dataset, Split::Val)?,
                test: linear_metrics(&linear, dataset, Split::Test)?,
                best_epoch: None,
            })
        }
    }
}

fn cmd_train(g: &GlobalArgs, path: &Path) -> Result<(), CliError> {
    let mut config = load_run_config(path)?;
    let seed = g.seed.or(config.seed).unwrap_or(0);
    config.seed = Some(seed);
    let out = output_dir(g.out.as_ref(), config.output.as_ref())?;
    let (dataset, meta) = load_data(&config.data, seed)?;
    if let (Some(spec), MetaSource::Informative) = (&config.explain, config.trainer.meta) {
        pdp_columns(&meta, &spec.pdp, "explain.pdp")?;
    }
    log(g, format!("training {} on {} samples × {} features", config.trainer.variant.as_str(), dataset.n(), dataset.p()));

    let trained = match train_variant(&config, seed, &out, &dataset, &meta) {
        Err(CliError::Runtime(Error::Diverged { epoch, batch, term })) => {
            let err = Error::Diverged { epoch, batch, term: term.clone() };
            let diag = Diagnostics { epoch, batch, term, message: err.to_string() };
            write_json(&out.join("diagnostics.json"), &diag)?;
            return Err(CliError::Runtime(err));
        }
        other => other?,
    };
    let metrics = RunMetrics {
        variant: config.trainer.variant.as_str(),
        seed,
        metric: metric_name(dataset.task),
        config: &config,
        val_metric: trained.val.value,
        test_metric: trained.test.value,
        best_epoch: trained.best_epoch,
    };
    write_json(&out.join("metrics.json"), &metrics)?;
    log(g, format!("test {} {}", metrics.metric, fmt_f64(metrics.test_metric)));
    Ok(())
}

fn cmd_sweep(g: &GlobalArgs, path: &Path) -> Result<(), CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let spec: ExperimentSpec =
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    spec.validate().map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let out = output_dir(g.out.as_ref(), None)?;
    log(g, format!("running {} trials on {} thread(s)", spec.variants.len() * spec.settings.len() * spec.seeds.len(), g.jobs));
    let results = run_sweep(&spec, g.jobs as usize)?;
    results.write_csv(&out.join("results.csv"))?;
    match results.failures() {
        0 => Ok(()),
        n => Err(CliError::Failed(format!("{n} of {} trials failed; see results.csv", results.trials.len()))),
    }
}

fn file_stem(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' }).collect()
}

fn cmd_explain(g: &GlobalArgs, args: &ExplainArgs) -> Result<(), CliError> {
    let out = output_dir(g.out.as_ref(), None)?;
    let prior = Mlp::load(&args.prior)?;
    let meta = load_metafeatures(&args.meta)?;
    if prior.input_width() != meta.k() {
        return Err(CliError::Runtime(Error::Alignment {
            path: args.meta.clone(),
            message: format!("{} meta-feature columns, but the prior takes {} inputs", meta.k(), prior.input_width()),
        }));
    }
    if let Some(features) = &args.features {
        let mut reader = csv::Reader::from_path(features).map_err(|e| CliError::Failed(format!("{}: {e}", features.display())))?;
        let header: Vec<String> = reader
            .headers()
            .map_err(|e| CliError::Failed(format!("{}: {e}", features.display())))?
            .iter()
            .map(str::to_string)
            .collect();
        if header != meta.feature_names {
            return Err(CliError::Runtime(Error::Alignment {
                path: args.meta.clone(),
                message: format!("meta-feature rows do not match the feature columns of {}", features.display()),
            }));
        }
    }
    let selected = pdp_columns(&meta, &args.pdp, "--pdp")?;
    let settings = PriorExport {
        n_samples: args.samples as usize,
        grid: args.grid as usize,
        top: args.top,
        seed: g.seed.unwrap_or(0),
    };
    export_prior(&out, &prior, &meta, &selected, &settings)?;
    log(g, format!("wrote explanations for {} features to {}", meta.p(), out.display()));
    Ok(())
}

/// Meta-feature columns to plot: the named ones, or every non-constant column.
fn pdp_columns(meta: &MetaFeatureMatrix, names: &[String], origin: &str) -> Result<Vec<usize>, CliError> {
    if names.is_empty() {
        return Ok((0..meta.k())
            .filter(|&j| {
                let col = meta.values.column(j);
                col.iter().any(|v| *v != col[0])
            })
            .collect());
    }
    names
        .iter()
        .map(|name| {
            meta.meta_names.iter().position(|m| m == name).ok_or_else(|| {
                CliError::Config(format!("{origin} {name}: no such meta-feature (have: {})", meta.meta_names.join(", ")))
            })
        })
        .collect()
}

struct PriorExport {
    n_samples: usize,
    grid: usize,
    top: Option<usize>,
    /// Master seed; draws come from its "explain" substream.
    seed: u64,
}

/// Writes explanations.csv, importance.csv (ranked) and one pdp_<name>.csv per selected column.
fn export_prior(out: &Path, prior: &Mlp, meta: &MetaFeatureMatrix, selected: &[usize], settings: &PriorExport) -> Result<(), CliError> {
    let cfg = AttributionConfig::new(settings.n_samples, derive_seed(settings.seed, "explain"));
    let explanation = second_order_explanations(prior, meta, &cfg)?;
    write_explanations_csv(&out.join("explanations.csv"), &explanation)?;
    let ranked = rank_features(prior, meta, settings.top.unwrap_or(meta.p()))?;
    write_importance_csv(&out.join("importance.csv"), &ranked)?;
    for &j in selected {
        let curve = pdp(prior, meta, j, settings.grid)?;
        write_pdp_csv(&out.join(format!("pdp_{}.csv", file_stem(&curve.meta_name))), &curve)?;
    }
    Ok(())
}
