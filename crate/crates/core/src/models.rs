//! Prediction and prior networks.
//!
//! Both the prediction model `f` and the deep prior `g` are plain [`Mlp`]s;
//! the linear prior is the one-layer case and has its own [`LinearPrior`]
//! view for reading coefficients.

use std::fs;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Bindings, Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Softplus,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, graph: &mut Graph, x: NodeId) -> Result<NodeId, AutodiffError> {
        match self {
            Activation::Relu => graph.relu(x),
            Activation::Softplus => graph.softplus(x),
            Activation::Tanh => graph.tanh(x),
            Activation::Identity => Ok(x),
        }
    }
}

/// A differentiable model with a scalar output per input row.
pub trait Model {
    fn input_width(&self) -> usize;

    fn parameters(&self) -> Vec<&Tensor>;

    fn parameters_mut(&mut self) -> Vec<&mut Tensor>;

    /// Appends the forward pass for the batch `x` (rows × `input_width`) and
    /// returns the rows × 1 output node. `params` are the nodes returned by
    /// [`Model::declare_parameters`].
    fn build(&self, graph: &mut Graph, params: &[NodeId], x: NodeId) -> Result<NodeId, AutodiffError>;

    /// One input node per parameter tensor, in [`Model::parameters`] order.
    fn declare_parameters(&self, graph: &mut Graph) -> Vec<NodeId> {
        self.parameters().iter().map(|p| graph.input(p.shape())).collect()
    }

    /// Outputs for every row of `x`.
    fn predict(&self, x: &Tensor) -> Result<Vec<f64>> {
        if x.rank() != 2 || x.cols() != self.input_width() {
            return Err(Error::invalid(format!(
                "model expects {} input columns, batch has shape {:?}",
                self.input_width(),
                x.shape()
            )));
        }
        let mut graph = Graph::new();
        let params = self.declare_parameters(&mut graph);
        let input = graph.input(x.shape());
        let out = self.build(&mut graph, &params, input)?;
        let values = self.parameters();
        let mut bindings = Bindings::new();
        bindings.bind_all(&params, &values).bind(input, x);
        Ok(graph.forward(&bindings, out)?.into_data())
    }
}

/// Layer sizes and hidden activation of an [`Mlp`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation) -> Self {
        Self { layer_sizes, activation }
    }

    /// `[p, ⌊p/2⌋, ⌊p/4⌋, 1]`, the two-moons sizing rule.
    pub fn half_quarter(p: usize, activation: Activation) -> Self {
        Self::new(vec![p, p / 2, p / 4, 1], activation)
    }

    /// `[input, hidden..., 1]`.
    pub fn with_hidden(input: usize, hidden: &[usize], activation: Activation) -> Self {
        let mut sizes = vec![input];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        Self::new(sizes, activation)
    }

    /// `[k, 1]`, a linear model.
    pub fn linear(input: usize) -> Self {
        Self::new(vec![input, 1], Activation::Identity)
    }

    pub fn build(&self, seed: u64) -> Result<Mlp> {
        Mlp::build(&self.layer_sizes, self.activation, seed)
    }
}

/// Fully connected network; identity on the output layer.
///
/// Weight `l` is `d_{l+1} × d_l`, bias `l` has length `d_{l+1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layer_sizes: Vec<usize>,
    activation: Activation,
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
}

/// On-disk form of an [`Mlp`].
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpCheckpoint {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub weights: Vec<Vec<Vec<f64>>>,
    pub biases: Vec<Vec<f64>>,
}

fn validate_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.len() < 2 {
        return Err(Error::invalid(format!("an MLP needs at least two layer sizes, got {sizes:?}")));
    }
    if sizes.contains(&0) {
        return Err(Error::invalid(format!("layer sizes must be positive, got {sizes:?}")));
    }
    Ok(())
}

impl Mlp {
    /// Random initialisation reproducible from `seed`.
    ///
    /// Weights are normal draws truncated at two standard deviations, with
    /// std `sqrt(2 / fan_in)` for relu and `sqrt(2 / (fan_in + fan_out))`
    /// otherwise. Biases start at zero.
    pub fn build(layer_sizes: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        validate_sizes(layer_sizes)?;
        let mut rng = rng::seeded(seed);
        let mut weights = Vec::with_capacity(layer_sizes.len() - 1);
        let mut biases = Vec::with_capacity(layer_sizes.len() - 1);
        for pair in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let std = match activation {
                Activation::Relu => (2.0 / fan_in as f64).sqrt(),
                _ => (2.0 / (fan_in + fan_out) as f64).sqrt(),
            };
            let data = (0..fan_in * fan_out).map(|_| std * truncated_normal(&mut rng)).collect();
            weights.push(Tensor::matrix(fan_out, fan_in, data)?);
            biases.push(Tensor::zeros(&[fan_out]));
        }
        Ok(Self { layer_sizes: layer_sizes.to_vec(), activation, weights, biases })
    }

    pub fn from_parts(layer_sizes: Vec<usize>, activation: Activation, weights: Vec<Tensor>, biases: Vec<Tensor>) -> Result<Self> {
        validate_sizes(&layer_sizes)?;
        let layers = layer_sizes.len() - 1;
        if weights.len() != layers || biases.len() != layers {
            return Err(Error::invalid(format!(
                "{layers} layers need {layers} weights and biases, got {} and {}",
                weights.len(),
                biases.len()
            )));
        }
        for (l, pair) in layer_sizes.windows(2).enumerate() {
            if weights[l].shape() != [pair[1], pair[0]] || biases[l].shape() != [pair[1]] {
                return Err(Error::invalid(format!(
                    "layer {l}: weight {:?} / bias {:?} do not match sizes {pair:?}",
                    weights[l].shape(),
                    biases[l].shape()
                )));
            }
            if !weights[l].is_finite() || !biases[l].is_finite() {
                return Err(Error::invalid(format!("layer {l} has non-finite parameters")));
            }
        }
        Ok(Self { layer_sizes, activation, weights, biases })
    }

    pub fn spec(&self) -> MlpSpec {
        MlpSpec::new(self.layer_sizes.clone(), self.activation)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self) -> &[Tensor] {
        &self.weights
    }

    pub fn biases(&self) -> &[Tensor] {
        &self.biases
    }

    /// Sets the last layer's weights and bias to zero, so the network outputs 0 everywhere.
    pub fn zero_output_layer(&mut self) {
        self.weights.last_mut().expect("at least one layer").data_mut().fill(0.0);
        self.biases.last_mut().expect("at least one layer").data_mut().fill(0.0);
    }

    pub fn to_checkpoint(&self) -> MlpCheckpoint {
        MlpCheckpoint {
            layer_sizes: self.layer_sizes.clone(),
            activation: self.activation,
            weights: self.weights.iter().map(|w| (0..w.rows()).map(|i| w.row(i).to_vec()).collect()).collect(),
            biases: self.biases.iter().map(|b| b.data().to_vec()).collect(),
        }
    }

    pub fn from_checkpoint(ckpt: MlpCheckpoint) -> Result<Self> {
        let weights = ckpt.weights.iter().map(|rows| Tensor::from_rows(rows)).collect::<Result<Vec<_>, _>>()?;
        let biases = ckpt.biases.into_iter().map(Tensor::vector).collect();
        Self::from_parts(ckpt.layer_sizes, ckpt.activation, weights, biases)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_checkpoint()).expect("checkpoint serialises")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: MlpCheckpoint =
            serde_json::from_str(&text).map_err(|source| Error::Json { path: path.to_path_buf(), source })?;
        Self::from_checkpoint(ckpt)
    }
}

fn truncated_normal(rng: &mut rng::Rng) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z;
        }
    }
}

impl Model for Mlp {
    fn input_width(&self) -> usize {
        self.layer_sizes[0]
    }

    fn parameters(&self) -> Vec<&Tensor> {
        self.weights.iter().zip(&self.biases).flat_map(|(w, b)| [w, b]).collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.weights.iter_mut().zip(self.biases.iter_mut()).flat_map(|(w, b)| [w, b]).collect()
    }

    fn build(&self, graph: &mut Graph, params: &[NodeId], x: NodeId) -> Result<NodeId, AutodiffError> {
        let layers = self.weights.len();
        let mut h = x;
        for l in 0..layers {
            let pre = graph.matmul_t(h, params[2 * l], false, true)?;
            let pre = graph.add_row(pre, params[2 * l + 1])?;
            h = if l + 1 < layers { self.activation.apply(graph, pre)? } else { pre };
        }
        Ok(h)
    }
}

/// `g(m) = β·m + β₀`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearPrior {
    pub coefficients: Vec<f64>,
    pub intercept: f64,
}

impl LinearPrior {
    pub fn new(coefficients: Vec<f64>, intercept: f64) -> Self {
        Self { coefficients, intercept }
    }

    pub fn predict_row(&self, m: &[f64]) -> f64 {
        self.intercept + self.coefficients.iter().zip(m).map(|(b, x)| b * x).sum::<f64>()
    }

    /// Reads a `[k, 1]` network as a linear prior.
    pub fn from_mlp(mlp: &Mlp) -> Option<Self> {
        (mlp.layer_sizes.len() == 2 && mlp.layer_sizes[1] == 1)
            .then(|| Self::new(mlp.weights[0].data().to_vec(), mlp.biases[0].data()[0]))
    }

    pub fn to_mlp(&self) -> Mlp {
        let k = self.coefficients.len();
        Mlp {
            layer_sizes: vec![k, 1],
            activation: Activation::Identity,
            weights: vec![Tensor::matrix(1, k, self.coefficients.clone()).expect("1×k")],
            biases: vec![Tensor::vector(vec![self.intercept])],
        }
    }
}

impl LinearPrior {
    pub fn predict(&self, m: &Tensor) -> Result<Vec<f64>> {
        if m.rank() != 2 || m.cols() != self.coefficients.len() {
            return Err(Error::invalid(format!(
                "linear prior expects {} columns, got shape {:?}",
                self.coefficients.len(),
                m.shape()
            )));
        }
        Ok((0..m.rows()).map(|i| self.predict_row(m.row(i))).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Variance of a standard normal truncated to [−2, 2].
    fn truncated_variance() -> f64 {
        let phi2 = (-2.0f64).exp() / (2.0 * std::f64::consts::PI).sqrt();
        // P(|Z| ≤ 2)
        let mass = 0.954_499_736_103_641_6;
        1.0 - 2.0 * 2.0 * phi2 / mass
    }

    #[test]
    fn initial_weight_variance_follows_fan_rule() {
        for (activation, expected) in [(Activation::Relu, 2.0 / 400.0), (Activation::Tanh, 2.0 / 600.0)] {
            let mlp = Mlp::build(&[400, 200, 1], activation, 11).unwrap();
            let w = mlp.weights()[0].data();
            let var = w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
            let target = expected * truncated_variance();
            // 80000 draws: relative SE of the variance estimate is about 0.4%.
            assert!((var / target - 1.0).abs() < 0.03, "{activation:?}: {var} vs {target}");
            let std = expected.sqrt();
            assert!(w.iter().all(|v| v.abs() <= 2.0 * std));
            assert!(mlp.biases().iter().all(|b| b.data().iter().all(|&v| v == 0.0)));
        }
    }

    #[test]
    fn build_is_seeded() {
        let a = Mlp::build(&[5, 4, 1], Activation::Softplus, 3).unwrap();
        assert_eq!(a, Mlp::build(&[5, 4, 1], Activation::Softplus, 3).unwrap());
        assert_ne!(a, Mlp::build(&[5, 4, 1], Activation::Softplus, 4).unwrap());
    }

    #[test]
    fn predict_matches_hand_forward_pass() {
        let w0 = Tensor::matrix(2, 3, vec![0.5, -1.0, 0.25, 1.5, 0.0, -0.5]).unwrap();
        let b0 = Tensor::vector(vec![0.1, -0.2]);
        let w1 = Tensor::matrix(1, 2, vec![2.0, -3.0]).unwrap();
        let b1 = Tensor::vector(vec![0.7]);
        let mlp = Mlp::from_parts(vec![3, 2, 1], Activation::Tanh, vec![w0.clone(), w1.clone()], vec![b0.clone(), b1]).unwrap();
        let x = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.0]).unwrap();
        let got = mlp.predict(&x).unwrap();
        for (i, g) in got.iter().enumerate() {
            let h: Vec<f64> = (0..2)
                .map(|j| ((0..3).map(|c| w0.get(j, c) * x.get(i, c)).sum::<f64>() + b0.data()[j]).tanh())
                .collect();
            let expected = 2.0 * h[0] - 3.0 * h[1] + 0.7;
            assert!((g - expected).abs() < 1e-15);
        }
        assert!(mlp.predict(&Tensor::zeros(&[1, 4])).is_err());
    }

    #[test]
    fn checkpoint_restores_identical_network() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.json");
        let mlp = Mlp::build(&[6, 3, 1], Activation::Relu, 9).unwrap();
        mlp.save(&path).unwrap();
        assert_eq!(Mlp::load(&path).unwrap(), mlp);
        std::fs::write(&path, "{\"layer_sizes\": [2, 1]}").unwrap();
        assert!(Mlp::load(&path).is_err());
    }

    #[test]
    fn malformed_parts_rejected() {
        let w = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        let b = Tensor::vector(vec![0.0]);
        assert!(Mlp::from_parts(vec![3, 1], Activation::Identity, vec![w.clone()], vec![b.clone()]).is_err());
        assert!(Mlp::from_parts(vec![2], Activation::Identity, vec![], vec![]).is_err());
        let nan = Tensor::matrix(1, 2, vec![f64::NAN, 2.0]).unwrap();
        assert!(Mlp::from_parts(vec![2, 1], Activation::Identity, vec![nan], vec![b]).is_err());
    }

    #[test]
    fn linear_prior_round_trips_through_network() {
        let prior = LinearPrior::new(vec![1.5, -2.0], 0.25);
        let mlp = prior.to_mlp();
        assert_eq!(LinearPrior::from_mlp(&mlp), Some(prior.clone()));
        let m = Tensor::matrix(2, 2, vec![1.0, 1.0, -2.0, 0.5]).unwrap();
        assert_eq!(mlp.predict(&m).unwrap(), prior.predict(&m).unwrap());
        assert!(LinearPrior::from_mlp(&Mlp::build(&[2, 3, 1], Activation::Relu, 0).unwrap()).is_none());
    }

    #[test]
    fn zeroed_output_layer_predicts_zero() {
        let mut mlp = Mlp::build(&[3, 4, 1], Activation::Relu, 5).unwrap();
        let hidden = mlp.weights()[0].clone();
        mlp.zero_output_layer();
        assert_eq!(mlp.weights()[0], hidden);
        assert_eq!(mlp.predict(&Tensor::filled(&[2, 3], 1.3)).unwrap(), vec![0.0, 0.0]);
    }
}
