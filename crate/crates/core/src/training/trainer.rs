use rand::seq::SliceRandom;

use super::{DaprConfig, EpochRecord, LossKind, Metrics, TrainHistory, WeightReg};
use crate::attribution::{eg_node, penalty_node, sample_draws, Draw};
use crate::autodiff::{Adam, AdamState, AutodiffError, Bindings, Graph, NodeId, Tensor};
use crate::datagen::{Dataset, MetaFeatureMatrix, Split};
use crate::error::{Error, Result};
use crate::models::{Mlp, MlpSpec, Model};
use crate::rng::{self, Rng};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub penalty: f64,
}

#[derive(Clone, Debug)]
pub struct DaprOutcome {
    pub f: Mlp,
    pub g: Mlp,
    pub history: TrainHistory,
}

struct Prior {
    g: Mlp,
    meta: Tensor,
    opt: AdamState,
}

/// Minibatch Adam trainer for a prediction model, optionally coupled to a
/// prior network through the attribution penalty.
///
/// Each step first updates `f` on `loss + λ·penalty` with `g(M)` held fixed,
/// then updates `g` on `λ·penalty` with `f`'s attributions held fixed.
pub struct DaprTrainer<'a> {
    dataset: &'a Dataset,
    config: DaprConfig,
    reg: WeightReg,
    loss: LossKind,
    x_train: Tensor,
    y_train: Vec<f64>,
    f: Mlp,
    opt_f: AdamState,
    prior: Option<Prior>,
    shuffle_rng: Rng,
    eg_rng: Rng,
}

/// Node-id boundaries used to attribute a non-finite value to a term.
struct Sections {
    loss_end: usize,
    reg_end: usize,
    penalty_end: usize,
}

impl Sections {
    fn term(&self, err: &AutodiffError) -> String {
        match err {
            AutodiffError::NonFinite { op: "input", .. } => "parameters".into(),
            AutodiffError::NonFinite { node, .. } if *node < self.loss_end => "prediction loss".into(),
            AutodiffError::NonFinite { node, .. } if *node < self.reg_end => "weight penalty".into(),
            AutodiffError::NonFinite { node, .. } if *node < self.penalty_end => "attribution penalty".into(),
            _ => "gradient".into(),
        }
    }
}

impl<'a> DaprTrainer<'a> {
    /// A trainer for `f` alone (no attribution penalty).
    pub fn standard(dataset: &'a Dataset, f: Mlp, config: &DaprConfig, reg: WeightReg) -> Result<Self> {
        Self::build(dataset, f, None, config, reg)
    }

    pub fn with_prior(dataset: &'a Dataset, meta: &MetaFeatureMatrix, f: Mlp, g: Mlp, config: &DaprConfig) -> Result<Self> {
        if meta.p() != dataset.p() {
            return Err(Error::invalid(format!("{} meta-feature rows for {} features", meta.p(), dataset.p())));
        }
        if g.input_width() != meta.k() {
            return Err(Error::invalid(format!("prior takes {} inputs but M has {} columns", g.input_width(), meta.k())));
        }
        let opt = AdamState::new(g.parameters());
        let prior = Prior { g, meta: meta.values.clone(), opt };
        Self::build(dataset, f, Some(prior), config, WeightReg::None)
    }

    fn build(dataset: &'a Dataset, f: Mlp, prior: Option<Prior>, config: &DaprConfig, reg: WeightReg) -> Result<Self> {
        config.validate()?;
        if f.input_width() != dataset.p() {
            return Err(Error::invalid(format!("model takes {} inputs, dataset has {} features", f.input_width(), dataset.p())));
        }
        if dataset.splits.train.is_empty() || dataset.splits.val.is_empty() {
            return Err(Error::invalid("training needs non-empty train and validation splits"));
        }
        Ok(Self {
            dataset,
            config: config.clone(),
            reg,
            loss: config.loss.unwrap_or(LossKind::for_task(dataset.task)),
            x_train: dataset.x_split(Split::Train),
            y_train: dataset.y_split(Split::Train),
            opt_f: AdamState::new(f.parameters()),
            f,
            prior,
            shuffle_rng: rng::substream(config.seed, "shuffle"),
            eg_rng: rng::substream(config.seed, "eg"),
        })
    }

    pub fn f(&self) -> &Mlp {
        &self.f
    }

    pub fn g(&self) -> Option<&Mlp> {
        self.prior.as_ref().map(|p| &p.g)
    }

    fn penalty_active(&self) -> bool {
        self.prior.is_some() && self.config.lambda > 0.0
    }

    /// Predicted importance `G(M)`, one value per feature.
    pub fn importance(&self) -> Result<Vec<f64>> {
        let prior = self.prior.as_ref().ok_or_else(|| Error::invalid("trainer has no prior"))?;
        prior.g.predict(&prior.meta)
    }

    /// Draws for a batch of `rows` training samples.
    pub fn sample_draws(&mut self, rows: usize) -> Vec<Draw> {
        sample_draws(&mut self.eg_rng, self.x_train.rows(), rows * self.config.eg_samples_per_step)
    }

    /// Updates `f` on the training rows `batch` (positions in the train split).
    pub fn f_step(&mut self, batch: &[usize], draws: &[Draw]) -> std::result::Result<StepStats, (String, AutodiffError)> {
        let x = self.x_train.select_rows(batch);
        let y: Vec<f64> = batch.iter().map(|&i| self.y_train[i]).collect();
        let importance = if self.penalty_active() {
            Some(self.importance().map_err(|e| ("prior output".to_string(), to_autodiff(e)))?)
        } else {
            None
        };

        let mut graph = Graph::new();
        let mut sections = Sections { loss_end: 0, reg_end: 0, penalty_end: 0 };
        let built = (|| -> std::result::Result<_, AutodiffError> {
            let params = self.f.declare_parameters(&mut graph);
            let xin = graph.constant(x);
            let out = self.f.build(&mut graph, &params, xin)?;
            let out = graph.reshape(out, &[batch.len()])?;
            let labels = graph.constant(Tensor::vector(y));
            let loss = loss_node(&mut graph, self.loss, out, labels)?;
            sections.loss_end = graph.len();

            let mut total = loss;
            if let Some(reg) = weight_penalty_node(&mut graph, &params, self.reg)? {
                total = graph.add(total, reg)?;
            }
            sections.reg_end = graph.len();

            let mut penalty = None;
            if let Some(importance) = importance {
                let phi = eg_node(
                    &mut graph,
                    &self.f,
                    &params,
                    &self.x_train.select_rows(batch),
                    &self.x_train,
                    draws,
                    self.config.eg_samples_per_step,
                )?;
                let g = graph.constant(Tensor::vector(importance));
                let pen = penalty_node(&mut graph, phi, g, self.config.comparison)?;
                let scaled = graph.scale(pen, self.config.lambda)?;
                total = graph.add(total, scaled)?;
                penalty = Some(pen);
            }
            sections.penalty_end = graph.len();
            let grads = graph.gradient(total, &params)?;
            Ok((params, loss, penalty, grads))
        })();
        let (params, loss, penalty, grads) = built.map_err(|e| ("graph".to_string(), e))?;

        let mut outputs = vec![loss];
        outputs.extend(penalty);
        outputs.extend(&grads);
        let values = self.f.parameters();
        let mut bindings = Bindings::new();
        bindings.bind_all(&params, &values);
        let mut evaluated = graph.eval(&bindings, &outputs).map_err(|e| (sections.term(&e), e))?;
        let grads = evaluated.split_off(outputs.len() - grads.len());
        let stats = StepStats { loss: evaluated[0].item(), penalty: evaluated.get(1).map_or(0.0, Tensor::item) };

        let mut params = self.f.parameters_mut();
        self.opt_f
            .step(&Adam::new(self.config.lr_f), &mut params, &grads)
            .map_err(|e| ("optimizer".to_string(), e))?;
        Ok(stats)
    }

    /// Updates `g` on `λ·penalty` with attributions of the current `f`.
    /// Returns the penalty before the update.
    pub fn g_step(&mut self, batch: &[usize], draws: &[Draw]) -> std::result::Result<f64, (String, AutodiffError)> {
        let Some(prior) = self.prior.as_mut() else {
            return Ok(0.0);
        };
        let phi = {
            let mut graph = Graph::new();
            let params = self.f.declare_parameters(&mut graph);
            let node = eg_node(
                &mut graph,
                &self.f,
                &params,
                &self.x_train.select_rows(batch),
                &self.x_train,
                draws,
                self.config.eg_samples_per_step,
            )
            .map_err(|e| ("graph".to_string(), e))?;
            let values = self.f.parameters();
            let mut bindings = Bindings::new();
            bindings.bind_all(&params, &values);
            graph.forward(&bindings, node).map_err(|e| ("attributions".to_string(), e))?
        };

        let mut graph = Graph::new();
        let built = (|| -> std::result::Result<_, AutodiffError> {
            let params = prior.g.declare_parameters(&mut graph);
            let m = graph.constant(prior.meta.clone());
            let importance = prior.g.build(&mut graph, &params, m)?;
            let phi = graph.constant(phi);
            let pen = penalty_node(&mut graph, phi, importance, self.config.comparison)?;
            let objective = graph.scale(pen, self.config.lambda)?;
            let grads = graph.gradient(objective, &params)?;
            Ok((params, pen, grads))
        })();
        let (params, pen, grads) = built.map_err(|e| ("graph".to_string(), e))?;
        let mut outputs = vec![pen];
        outputs.extend(&grads);
        let values = prior.g.parameters();
        let mut bindings = Bindings::new();
        bindings.bind_all(&params, &values);
        let mut evaluated = graph.eval(&bindings, &outputs).map_err(|e| ("prior penalty".to_string(), e))?;
        let grads = evaluated.split_off(1);
        let mut params = prior.g.parameters_mut();
        prior
            .opt
            .step(&Adam::new(self.config.lr_g()), &mut params, &grads)
            .map_err(|e| ("optimizer".to_string(), e))?;
        Ok(evaluated[0].item())
    }

    fn validation(&self) -> Result<Metrics> {
        super::evaluate(&self.f, self.dataset, Split::Val)
    }

    /// Trains until early stopping and returns the best-epoch parameters of
    /// `f` and, when present, the prior.
    pub fn run(mut self) -> Result<(Mlp, Option<Mlp>, TrainHistory)> {
        let n_train = self.x_train.rows();
        let mut order: Vec<usize> = (0..n_train).collect();
        let mut history = TrainHistory::default();
        let mut best: Option<(f64, Mlp, Option<Mlp>)> = None;

        for epoch in 0..self.config.max_epochs {
            order.shuffle(&mut self.shuffle_rng);
            let (mut loss_sum, mut pen_sum, mut batches) = (0.0, 0.0, 0usize);
            for (b, batch) in order.chunks(self.config.batch_size).enumerate() {
                let diverged = |(term, _): (String, AutodiffError)| Error::Diverged { epoch, batch: b, term };
                let draws = if self.penalty_active() { self.sample_draws(batch.len()) } else { Vec::new() };
                let stats = self.f_step(batch, &draws).map_err(diverged)?;
                if self.penalty_active() && !self.config.freeze_prior {
                    self.g_step(batch, &draws).map_err(diverged)?;
                }
                loss_sum += stats.loss;
                pen_sum += stats.penalty;
                batches += 1;
            }

            let val = self.validation().map_err(|e| match e {
                Error::Autodiff(err) => Error::Diverged { epoch, batch: batches, term: format!("validation output ({err})") },
                other => other,
            })?;
            history.epochs.push(EpochRecord {
                epoch,
                train_loss: loss_sum / batches as f64,
                penalty: pen_sum / batches as f64,
                val_loss: val.loss,
                val_metric: val.value,
            });
            if best.as_ref().is_none_or(|(b, _, _)| val.loss < *b) {
                history.best_epoch = epoch;
                best = Some((val.loss, self.f.clone(), self.g().cloned()));
            } else if epoch - history.best_epoch >= self.config.patience {
                break;
            }
        }

        let (_, f, g) = best.expect("at least one epoch");
        Ok((f, g, history))
    }
}

fn to_autodiff(e: Error) -> AutodiffError {
    match e {
        Error::Autodiff(a) => a,
        other => AutodiffError::InvalidTensor(other.to_string()),
    }
}

fn loss_node(graph: &mut Graph, kind: LossKind, out: NodeId, labels: NodeId) -> std::result::Result<NodeId, AutodiffError> {
    match kind {
        LossKind::Mse => {
            let d = graph.sub(out, labels)?;
            let sq = graph.mul(d, d)?;
            graph.mean(sq)
        }
        LossKind::BinaryCrossEntropy => {
            // softplus(z) − y·z
            let sp = graph.softplus(out)?;
            let yz = graph.mul(labels, out)?;
            let l = graph.sub(sp, yz)?;
            graph.mean(l)
        }
    }
}

fn weight_penalty_node(graph: &mut Graph, params: &[NodeId], reg: WeightReg) -> std::result::Result<Option<NodeId>, AutodiffError> {
    let (strength, l1) = match reg {
        WeightReg::None => return Ok(None),
        WeightReg::L1(s) => (s, true),
        WeightReg::L2(s) => (s, false),
    };
    if strength == 0.0 {
        return Ok(None);
    }
    let mut total: Option<NodeId> = None;
    for &p in params {
        let term = if l1 { graph.abs(p)? } else { graph.mul(p, p)? };
        let s = graph.sum(term)?;
        total = Some(match total {
            Some(t) => graph.add(t, s)?,
            None => s,
        });
    }
    let total = total.expect("models have parameters");
    Ok(Some(graph.scale(total, strength)?))
}

/// Trains `f` with minibatch Adam, an optional weight penalty and early
/// stopping on validation loss.
pub fn train_standard(dataset: &Dataset, f_spec: &MlpSpec, config: &DaprConfig, reg: WeightReg) -> Result<(Mlp, TrainHistory)> {
    check_reg(reg)?;
    let f = f_spec.build(rng::derive_seed(config.seed, "init_f"))?;
    let (f, _, history) = DaprTrainer::standard(dataset, f, config, reg)?.run()?;
    Ok((f, history))
}

fn check_reg(reg: WeightReg) -> Result<()> {
    match reg {
        WeightReg::L1(s) | WeightReg::L2(s) if !(s >= 0.0 && s.is_finite()) => {
            Err(Error::invalid(format!("weight penalty strength must be finite and ≥ 0, got {s}")))
        }
        _ => Ok(()),
    }
}

/// Jointly trains a prediction network and a prior network over `meta`.
pub fn train_dapr(
    dataset: &Dataset,
    meta: &MetaFeatureMatrix,
    f_spec: &MlpSpec,
    g_spec: &MlpSpec,
    config: &DaprConfig,
) -> Result<DaprOutcome> {
    let f = f_spec.build(rng::derive_seed(config.seed, "init_f"))?;
    let mut g = g_spec.build(rng::derive_seed(config.seed, "init_g"))?;
    if config.zero_prior_output {
        g.zero_output_layer();
    }
    train_dapr_from(dataset, meta, f, g, config)
}

/// [`train_dapr`] from given initial networks.
pub fn train_dapr_from(dataset: &Dataset, meta: &MetaFeatureMatrix, f: Mlp, g: Mlp, config: &DaprConfig) -> Result<DaprOutcome> {
    let (f, g, history) = DaprTrainer::with_prior(dataset, meta, f, g, config)?.run()?;
    Ok(DaprOutcome { f, g: g.expect("trainer was built with a prior"), history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::gen_meta_regression;
    use crate::models::Activation;

    fn small() -> (Dataset, MetaFeatureMatrix) {
        let (d, m, _) = gen_meta_regression(60, 8, 2, 0.1, 4).unwrap();
        (d, m)
    }

    fn specs() -> (MlpSpec, MlpSpec) {
        (MlpSpec::with_hidden(8, &[6], Activation::Softplus), MlpSpec::with_hidden(2, &[3], Activation::Relu))
    }

    #[test]
    fn zero_lambda_reduces_to_standard_training() {
        let (d, m) = small();
        let (fs, gs) = specs();
        let cfg = DaprConfig { lambda: 0.0, max_epochs: 12, seed: 7, zero_prior_output: false, ..DaprConfig::default() };
        let (f_std, h_std) = train_standard(&d, &fs, &cfg, WeightReg::None).unwrap();
        let out = train_dapr(&d, &m, &fs, &gs, &cfg).unwrap();
        assert_eq!(out.f, f_std);
        assert_eq!(out.history, h_std);
        assert_eq!(out.g, gs.build(rng::derive_seed(7, "init_g")).unwrap());
    }

    #[test]
    fn each_step_updates_only_its_own_network() {
        let (d, m) = small();
        let (fs, gs) = specs();
        let cfg = DaprConfig { lambda: 1.0, seed: 2, ..DaprConfig::default() };
        let f = fs.build(1).unwrap();
        let g = gs.build(2).unwrap();
        let mut t = DaprTrainer::with_prior(&d, &m, f.clone(), g.clone(), &cfg).unwrap();
        let batch = [0, 3, 5, 9];
        let draws = t.sample_draws(batch.len());

        let stats = t.f_step(&batch, &draws).unwrap();
        assert!(stats.penalty > 0.0);
        assert_ne!(t.f(), &f);
        assert_eq!(t.g(), Some(&g));

        let f_after = t.f().clone();
        t.g_step(&batch, &draws).unwrap();
        assert_eq!(t.f(), &f_after);
        assert_ne!(t.g(), Some(&g));
    }

    #[test]
    fn g_step_reports_penalty_of_current_attributions() {
        let (d, m) = small();
        let (fs, gs) = specs();
        let cfg = DaprConfig { lambda: 0.5, comparison: crate::attribution::Comparison::Magnitude, ..DaprConfig::default() };
        let mut t = DaprTrainer::with_prior(&d, &m, fs.build(3).unwrap(), gs.build(4).unwrap(), &cfg).unwrap();
        let batch = [1, 2, 8];
        let draws = t.sample_draws(batch.len());
        let x = d.x_split(Split::Train);
        let mut phi = Vec::new();
        for (r, &i) in batch.iter().enumerate() {
            phi.extend(crate::attribution::eg_draws(t.f(), x.row(i), &x, &draws[r..r + 1]).unwrap().into_data());
        }
        let phi = Tensor::matrix(batch.len(), 8, phi).unwrap();
        let expected =
            crate::attribution::attribution_penalty_with(&phi, &t.importance().unwrap(), cfg.comparison).unwrap();
        let got = t.g_step(&batch, &draws).unwrap();
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn weight_penalty_gradients() {
        let theta = [Tensor::matrix(2, 2, vec![0.5, -1.5, 2.0, -0.25]).unwrap(), Tensor::vector(vec![-3.0, 0.75])];
        for (reg, grad) in [
            (WeightReg::L2(0.3), (|v: f64| 2.0 * 0.3 * v) as fn(f64) -> f64),
            (WeightReg::L1(0.2), |v: f64| 0.2 * v.signum()),
        ] {
            let mut g = Graph::new();
            let params: Vec<NodeId> = theta.iter().map(|t| g.input(t.shape())).collect();
            let pen = weight_penalty_node(&mut g, &params, reg).unwrap().unwrap();
            let grads = g.gradient(pen, &params).unwrap();
            let mut b = Bindings::new();
            b.bind_all(&params, &theta.iter().collect::<Vec<_>>());
            for (t, v) in theta.iter().zip(g.eval(&b, &grads).unwrap()) {
                assert_eq!(v, t.map(grad), "{reg:?}");
            }
        }
        let mut g = Graph::new();
        assert!(weight_penalty_node(&mut g, &[], WeightReg::L2(0.0)).unwrap().is_none());
    }

    #[test]
    fn early_stopping_keeps_best_validation_epoch() {
        let (d, _) = small();
        let (fs, _) = specs();
        let cfg = DaprConfig { lr_f: 0.05, patience: 3, max_epochs: 200, seed: 1, ..DaprConfig::default() };
        let (f, h) = train_standard(&d, &fs, &cfg, WeightReg::None).unwrap();
        let losses: Vec<f64> = h.epochs.iter().map(|e| e.val_loss).collect();
        let best = h.best_epoch;
        assert!(losses[..best].iter().all(|&l| l > losses[best]));
        assert!(losses[best + 1..].iter().all(|&l| l >= losses[best]));
        if h.epochs.len() < cfg.max_epochs {
            assert_eq!(h.epochs.len(), best + cfg.patience + 1);
        }
        assert_eq!(crate::training::evaluate(&f, &d, Split::Val).unwrap().loss, losses[best]);
    }

    #[test]
    fn divergence_names_epoch_and_term() {
        let (d, _) = small();
        let (fs, _) = specs();
        let cfg = DaprConfig { lr_f: 1e300, max_epochs: 5, ..DaprConfig::default() };
        match train_standard(&d, &fs, &cfg, WeightReg::None) {
            Err(Error::Diverged { epoch, term, .. }) => {
                assert!(epoch < 5);
                assert!(!term.is_empty());
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
