//! Expected Gradients attributions and the attribution-prior penalty.
//!
//! For an input `x`, a reference `x'` drawn from the training rows and
//! `α ~ U(0, 1)`, one draw contributes `(x_i − x'_i) · ∂f/∂x_i(x' + α(x − x'))`
//! to feature `i`; the estimate is the mean over draws.

use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Bindings, Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::models::Model;
use crate::rng::{self, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionConfig {
    /// (reference, α) draws per explained input.
    pub n_samples: usize,
    pub seed: u64,
}

impl AttributionConfig {
    pub fn new(n_samples: usize, seed: u64) -> Self {
        Self { n_samples, seed }
    }

    fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::invalid("attribution n_samples must be at least 1"));
        }
        Ok(())
    }
}

/// Per-feature attributions for one input, in feature order.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributionVector(pub Vec<f64>);

impl AttributionVector {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }
}

/// How attributions are compared with the prior's predicted importance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Comparison {
    /// `|Φ_i − G_i|`
    #[default]
    Signed,
    /// `||Φ_i| − G_i|`
    Magnitude,
}

/// One Monte Carlo draw: a reference row and an interpolation coefficient.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Draw {
    pub reference: usize,
    pub alpha: f64,
}

pub fn sample_draws(rng: &mut Rng, n_references: usize, count: usize) -> Vec<Draw> {
    (0..count)
        .map(|_| Draw { reference: rng.random_range(0..n_references), alpha: rng.random::<f64>() })
        .collect()
}

/// Interpolated points and input-minus-reference differences for `draws`,
/// where draw `d` explains row `d / per_row` of `inputs`.
fn interpolate(inputs: &Tensor, references: &Tensor, draws: &[Draw], per_row: usize) -> (Tensor, Tensor) {
    let p = inputs.cols();
    let mut points = Vec::with_capacity(draws.len() * p);
    let mut deltas = Vec::with_capacity(draws.len() * p);
    for (d, draw) in draws.iter().enumerate() {
        let x = inputs.row(d / per_row);
        let r = references.row(draw.reference);
        for (&xi, &ri) in x.iter().zip(r) {
            let delta = xi - ri;
            points.push(ri + draw.alpha * delta);
            deltas.push(delta);
        }
    }
    let shape = vec![draws.len(), p];
    (Tensor::new(shape.clone(), points).expect("sized"), Tensor::new(shape, deltas).expect("sized"))
}

fn check_inputs<M: Model>(model: &M, inputs: &Tensor, references: &Tensor) -> Result<()> {
    let p = model.input_width();
    if references.rows() == 0 || references.is_empty() {
        return Err(Error::invalid("the reference set is empty"));
    }
    if inputs.cols() != p || references.cols() != p {
        return Err(Error::invalid(format!(
            "model takes {p} features; inputs have {}, references have {}",
            inputs.cols(),
            references.cols()
        )));
    }
    Ok(())
}

/// Per-draw attribution rows (draws × p) for the single input `x`.
///
/// Row `d` is `(x − x'_d) ⊙ ∇f(x'_d + α_d(x − x'_d))`; their mean is the
/// Expected Gradients estimate.
pub fn eg_draws<M: Model>(model: &M, x: &[f64], references: &Tensor, draws: &[Draw]) -> Result<Tensor> {
    let input = Tensor::matrix(1, x.len(), x.to_vec())?;
    check_inputs(model, &input, references)?;
    const CHUNK: usize = 2048;
    let p = x.len();
    let mut out = Vec::with_capacity(draws.len() * p);
    for chunk in draws.chunks(CHUNK) {
        let (points, deltas) = interpolate(&input, references, chunk, chunk.len());
        let grads = input_gradients(model, &points)?;
        out.extend(grads.data().iter().zip(deltas.data()).map(|(g, d)| g * d));
    }
    Ok(Tensor::matrix(draws.len(), p, out)?)
}

/// Expected Gradients attributions of `model` at `x`.
pub fn expected_gradients<M: Model>(
    model: &M,
    x: &[f64],
    references: &Tensor,
    config: &AttributionConfig,
) -> Result<AttributionVector> {
    config.validate()?;
    if references.rows() == 0 {
        return Err(Error::invalid("the reference set is empty"));
    }
    let mut rng = rng::seeded(config.seed);
    let draws = sample_draws(&mut rng, references.rows(), config.n_samples);
    let rows = eg_draws(model, x, references, &draws)?;
    Ok(AttributionVector(column_means(&rows)))
}

/// Expected Gradients for every row of `inputs`, one rng stream shared in
/// row order.
pub fn expected_gradients_batch<M: Model>(
    model: &M,
    inputs: &Tensor,
    references: &Tensor,
    config: &AttributionConfig,
) -> Result<Tensor> {
    config.validate()?;
    check_inputs(model, inputs, references)?;
    let mut rng = rng::seeded(config.seed);
    let mut data = Vec::with_capacity(inputs.len());
    for i in 0..inputs.rows() {
        let draws = sample_draws(&mut rng, references.rows(), config.n_samples);
        let rows = eg_draws(model, inputs.row(i), references, &draws)?;
        data.extend(column_means(&rows));
    }
    Ok(Tensor::matrix(inputs.rows(), inputs.cols(), data)?)
}

fn column_means(rows: &Tensor) -> Vec<f64> {
    let mut acc = vec![0.0; rows.cols()];
    for i in 0..rows.rows() {
        for (a, v) in acc.iter_mut().zip(rows.row(i)) {
            *a += v;
        }
    }
    let n = rows.rows() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

/// `∇_x Σ_rows f(x)` for a batch of points, i.e. each row's input gradient.
pub fn input_gradients<M: Model>(model: &M, points: &Tensor) -> Result<Tensor> {
    let mut graph = Graph::new();
    let params = model.declare_parameters(&mut graph);
    let input = graph.input(points.shape());
    let out = model.build(&mut graph, &params, input)?;
    let total = graph.sum(out)?;
    let grad = graph.gradient(total, &[input])?[0];
    let values = model.parameters();
    let mut bindings = Bindings::new();
    bindings.bind_all(&params, &values).bind(input, points);
    Ok(graph.forward(&bindings, grad)?)
}

/// Appends batch Expected Gradients to `graph`.
///
/// `draws` holds `per_row` consecutive draws for each row of `inputs`. The
/// returned rows × p node stays differentiable with respect to `params`.
pub fn eg_node<M: Model>(
    graph: &mut Graph,
    model: &M,
    params: &[NodeId],
    inputs: &Tensor,
    references: &Tensor,
    draws: &[Draw],
    per_row: usize,
) -> Result<NodeId, AutodiffError> {
    debug_assert_eq!(draws.len(), inputs.rows() * per_row);
    let (points, deltas) = interpolate(inputs, references, draws, per_row);
    let points = graph.constant(points);
    let out = model.build(graph, params, points)?;
    let total = graph.sum(out)?;
    let grad = graph.gradient(total, &[points])?[0];
    let deltas = graph.constant(deltas);
    let phi = graph.mul(deltas, grad)?;
    if per_row == 1 {
        return Ok(phi);
    }
    let rows = inputs.rows();
    let mut avg = vec![0.0; rows * draws.len()];
    for r in 0..rows {
        for d in 0..per_row {
            avg[r * draws.len() + r * per_row + d] = 1.0 / per_row as f64;
        }
    }
    let avg = graph.constant(Tensor::matrix(rows, draws.len(), avg)?);
    graph.matmul(avg, phi)
}

/// Appends `mean_rows Σ_i |Φ_ri − G_i|` (or its magnitude form).
pub fn penalty_node(
    graph: &mut Graph,
    attributions: NodeId,
    importance: NodeId,
    comparison: Comparison,
) -> Result<NodeId, AutodiffError> {
    let rows = graph.shape(attributions)[0];
    let g = match graph.shape(importance).len() {
        1 => importance,
        _ => {
            let p = graph.shape(importance).iter().product::<usize>();
            graph.reshape(importance, &[p])?
        }
    };
    let g = graph.broadcast_rows(g, rows)?;
    let phi = match comparison {
        Comparison::Signed => attributions,
        Comparison::Magnitude => graph.abs(attributions)?,
    };
    let diff = graph.sub(phi, g)?;
    let abs = graph.abs(diff)?;
    let total = graph.sum(abs)?;
    graph.scale(total, 1.0 / rows as f64)
}

/// Batch-averaged L1 distance between attribution rows and `importance`.
pub fn attribution_penalty(attributions: &Tensor, importance: &[f64]) -> Result<f64> {
    attribution_penalty_with(attributions, importance, Comparison::Signed)
}

pub fn attribution_penalty_with(attributions: &Tensor, importance: &[f64], comparison: Comparison) -> Result<f64> {
    if attributions.rank() != 2 || attributions.cols() != importance.len() {
        return Err(Error::invalid(format!(
            "attributions of shape {:?} do not match {} importance values",
            attributions.shape(),
            importance.len()
        )));
    }
    let rows = attributions.rows();
    if rows == 0 {
        return Err(Error::invalid("empty attribution batch"));
    }
    let total: f64 = (0..rows)
        .map(|r| {
            attributions
                .row(r)
                .iter()
                .zip(importance)
                .map(|(&phi, &g)| match comparison {
                    Comparison::Signed => (phi - g).abs(),
                    Comparison::Magnitude => (phi.abs() - g).abs(),
                })
                .sum::<f64>()
        })
        .sum();
    Ok(total / rows as f64)
}

/// Writes one row per explained sample under a header of feature names.
pub fn write_attributions_csv(path: &Path, feature_names: &[String], attributions: &Tensor) -> Result<()> {
    if attributions.cols() != feature_names.len() {
        return Err(Error::invalid("attribution width does not match feature names"));
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    w.write_record(feature_names).map_err(|e| csv_io(path, e))?;
    for r in 0..attributions.rows() {
        w.write_record(attributions.row(r).iter().map(|v| fmt_f64(*v))).map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn csv_io(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

/// Seventeen significant digits; parses back to the identical `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Activation, Mlp};

    fn linear(w: &[f64], b: f64) -> Mlp {
        Mlp::from_parts(
            vec![w.len(), 1],
            Activation::Identity,
            vec![Tensor::matrix(1, w.len(), w.to_vec()).unwrap()],
            vec![Tensor::vector(vec![b])],
        )
        .unwrap()
    }

    #[test]
    fn linear_model_with_fixed_reference_is_exact() {
        let model = linear(&[2.0, -1.0, 0.5], 0.3);
        let refs = Tensor::from_rows(&[vec![1.0, 1.0, 1.0]]).unwrap();
        let x = [3.0, -2.0, 5.0];
        let phi = expected_gradients(&model, &x, &refs, &AttributionConfig::new(7, 3)).unwrap();
        let expected = [2.0 * 2.0, -1.0 * -3.0, 0.5 * 4.0];
        for (a, e) in phi.values().iter().zip(expected) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }

    #[test]
    fn constant_model_gives_zero() {
        let model = linear(&[0.0, 0.0], 4.0);
        let refs = Tensor::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5]]).unwrap();
        let phi = expected_gradients(&model, &[0.3, 9.0], &refs, &AttributionConfig::new(50, 1)).unwrap();
        assert!(phi.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn empty_references_rejected() {
        let model = linear(&[1.0], 0.0);
        let refs = Tensor::zeros(&[0, 1]);
        assert!(expected_gradients(&model, &[1.0], &refs, &AttributionConfig::new(1, 0)).is_err());
        assert!(expected_gradients(&model, &[1.0], &Tensor::zeros(&[1, 1]), &AttributionConfig::new(0, 0)).is_err());
    }

    #[test]
    fn penalty_examples() {
        let g = [0.5, -1.0];
        let same = Tensor::from_rows(&[g.to_vec(), g.to_vec()]).unwrap();
        assert_eq!(attribution_penalty(&same, &g).unwrap(), 0.0);
        let one = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert_eq!(attribution_penalty(&one, &[0.0, 0.0]).unwrap(), 3.0);
        let two = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(attribution_penalty(&two, &[1.0, 1.0]).unwrap(), 1.0);
        assert!(attribution_penalty(&two, &[1.0]).is_err());
    }

    #[test]
    fn penalty_node_matches_numeric() {
        let phi = Tensor::from_rows(&[vec![1.0, -2.0, 0.5], vec![-0.3, 0.0, 2.0]]).unwrap();
        let imp = [0.2, 0.7, -0.1];
        for comparison in [Comparison::Signed, Comparison::Magnitude] {
            let mut g = Graph::new();
            let a = g.constant(phi.clone());
            let b = g.constant(Tensor::vector(imp.to_vec()));
            let pen = penalty_node(&mut g, a, b, comparison).unwrap();
            let v = g.forward(&Bindings::new(), pen).unwrap().item();
            let expected = attribution_penalty_with(&phi, &imp, comparison).unwrap();
            assert!((v - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn seeded_draws_repeat() {
        let model = Mlp::build(&[3, 4, 1], Activation::Softplus, 9).unwrap();
        let refs = Tensor::from_rows(&[vec![0.1, 0.2, 0.3], vec![-1.0, 0.0, 1.0]]).unwrap();
        let cfg = AttributionConfig::new(16, 42);
        let a = expected_gradients(&model, &[1.0, 2.0, 3.0], &refs, &cfg).unwrap();
        let b = expected_gradients(&model, &[1.0, 2.0, 3.0], &refs, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn graph_eg_matches_direct_estimate() {
        let model = Mlp::build(&[3, 5, 1], Activation::Softplus, 2).unwrap();
        let refs = Tensor::from_rows(&[vec![0.1, 0.2, 0.3], vec![-1.0, 0.0, 1.0], vec![0.5, 0.5, -0.5]]).unwrap();
        let inputs = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![-0.5, 0.4, 0.0]]).unwrap();
        let mut rng = rng::seeded(5);
        let draws = sample_draws(&mut rng, 3, 6);
        let mut g = Graph::new();
        let params = model.declare_parameters(&mut g);
        let phi = eg_node(&mut g, &model, &params, &inputs, &refs, &draws, 3).unwrap();
        let values = model.parameters();
        let mut b = Bindings::new();
        b.bind_all(&params, &values);
        let batch = g.forward(&b, phi).unwrap();
        for r in 0..2 {
            let direct = eg_draws(&model, inputs.row(r), &refs, &draws[r * 3..(r + 1) * 3]).unwrap();
            let mean = column_means(&direct);
            for (a, e) in batch.row(r).iter().zip(&mean) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }
}
