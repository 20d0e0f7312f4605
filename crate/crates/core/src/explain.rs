//! Explanations of a trained prior: Expected Gradients of the prior with
//! respect to meta-features, importance rankings and partial dependence.

use std::path::Path;

use crate::attribution::{expected_gradients_batch, fmt_f64, AttributionConfig};
use crate::autodiff::Tensor;
use crate::datagen::MetaFeatureMatrix;
use crate::error::{Error, Result};
use crate::models::Model;

/// Attributions of the prior's output to each meta-feature, one row per
/// feature (p × k).
#[derive(Clone, Debug, PartialEq)]
pub struct SecondOrderExplanation {
    pub values: Tensor,
    pub feature_names: Vec<String>,
    pub meta_names: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PdpCurve {
    pub meta_index: usize,
    pub meta_name: String,
    /// Strictly increasing.
    pub grid: Vec<f64>,
    /// Mean prior output at each grid value.
    pub values: Vec<f64>,
    /// Number of rows averaged at each grid value.
    pub counts: Vec<usize>,
}

fn check_prior<M: Model>(g: &M, meta: &MetaFeatureMatrix) -> Result<()> {
    if g.input_width() != meta.k() {
        return Err(Error::invalid(format!("prior takes {} inputs but M has {} columns", g.input_width(), meta.k())));
    }
    Ok(())
}

/// Expected Gradients of `g` at every row of `M`, with the rows of `M` as
/// references.
pub fn second_order_explanations<M: Model>(
    g: &M,
    meta: &MetaFeatureMatrix,
    config: &AttributionConfig,
) -> Result<SecondOrderExplanation> {
    check_prior(g, meta)?;
    let values = expected_gradients_batch(g, &meta.values, &meta.values, config)?;
    Ok(SecondOrderExplanation { values, feature_names: meta.feature_names.clone(), meta_names: meta.meta_names.clone() })
}

/// The `top_n` features by `|g(m_i)|`, largest first; ties are ordered by
/// feature name. `top_n` is capped at p.
pub fn rank_features<M: Model>(g: &M, meta: &MetaFeatureMatrix, top_n: usize) -> Result<Vec<(String, f64)>> {
    check_prior(g, meta)?;
    let importance = g.predict(&meta.values)?;
    Ok(rank_importance(&meta.feature_names, &importance, top_n))
}

/// Ranking rule of [`rank_features`] applied to precomputed importances.
pub fn rank_importance(names: &[String], importance: &[f64], top_n: usize) -> Vec<(String, f64)> {
    let mut order: Vec<usize> = (0..names.len()).collect();
    order.sort_by(|&a, &b| importance[b].abs().total_cmp(&importance[a].abs()).then_with(|| names[a].cmp(&names[b])));
    order.into_iter().take(top_n).map(|i| (names[i].clone(), importance[i])).collect()
}

/// `grid_size` equally spaced values from the column's minimum to maximum.
pub fn pdp_grid(meta: &MetaFeatureMatrix, j: usize, grid_size: usize) -> Result<Vec<f64>> {
    if j >= meta.k() {
        return Err(Error::invalid(format!("meta-feature index {j} out of range for {} columns", meta.k())));
    }
    if grid_size < 2 {
        return Err(Error::invalid("a partial dependence grid needs at least 2 points"));
    }
    let column = meta.values.column(j);
    let lo = column.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = column.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Err(Error::invalid(format!("meta-feature `{}` is constant; its grid is degenerate", meta.meta_names[j])));
    }
    let step = (hi - lo) / (grid_size - 1) as f64;
    let mut grid: Vec<f64> = (0..grid_size).map(|t| lo + step * t as f64).collect();
    grid[grid_size - 1] = hi;
    Ok(grid)
}

/// Mean of `g` over all rows of `M` with column `j` set to each grid value.
pub fn pdp<M: Model>(g: &M, meta: &MetaFeatureMatrix, j: usize, grid_size: usize) -> Result<PdpCurve> {
    check_prior(g, meta)?;
    let grid = pdp_grid(meta, j, grid_size)?;
    let (p, k) = (meta.p(), meta.k());
    let mut data = Vec::with_capacity(grid.len() * p * k);
    for &v in &grid {
        for i in 0..p {
            let start = data.len();
            data.extend_from_slice(meta.values.row(i));
            data[start + j] = v;
        }
    }
    let outputs = g.predict(&Tensor::matrix(grid.len() * p, k, data)?)?;
    let values: Vec<f64> = outputs.chunks(p).map(|c| c.iter().sum::<f64>() / p as f64).collect();
    Ok(PdpCurve {
        meta_index: j,
        meta_name: meta.meta_names[j].clone(),
        counts: vec![p; grid.len()],
        grid,
        values,
    })
}

fn write(path: &Path, contents: String) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// `feature,<meta names...>`, one row per feature.
pub fn write_explanations_csv(path: &Path, explanation: &SecondOrderExplanation) -> Result<()> {
    let mut out = String::from("feature");
    for m in &explanation.meta_names {
        out.push(',');
        out.push_str(m);
    }
    out.push('\n');
    for (i, name) in explanation.feature_names.iter().enumerate() {
        out.push_str(name);
        for v in explanation.values.row(i) {
            out.push(',');
            out.push_str(&fmt_f64(*v));
        }
        out.push('\n');
    }
    write(path, out)
}

/// `feature,importance` in the given order.
pub fn write_importance_csv(path: &Path, ranked: &[(String, f64)]) -> Result<()> {
    let mut out = String::from("feature,importance\n");
    for (name, v) in ranked {
        out.push_str(&format!("{name},{}\n", fmt_f64(*v)));
    }
    write(path, out)
}

/// `grid_value,mean_output,count`.
pub fn write_pdp_csv(path: &Path, curve: &PdpCurve) -> Result<()> {
    let mut out = String::from("grid_value,mean_output,count\n");
    for ((g, v), c) in curve.grid.iter().zip(&curve.values).zip(&curve.counts) {
        out.push_str(&format!("{},{},{c}\n", fmt_f64(*g), fmt_f64(*v)));
    }
    write(path, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Activation, LinearPrior, Mlp};

    fn meta(rows: &[Vec<f64>]) -> MetaFeatureMatrix {
        let names = (1..=rows.len()).map(|i| format!("f{i}")).collect();
        let metas = (1..=rows[0].len()).map(|j| format!("m{j}")).collect();
        MetaFeatureMatrix::new(Tensor::from_rows(rows).unwrap(), names, metas).unwrap()
    }

    #[test]
    fn ranking_by_absolute_value() {
        let m = meta(&[vec![3.0], vec![-5.0], vec![1.0]]);
        let g = LinearPrior::new(vec![1.0], 0.0).to_mlp();
        let ranked = rank_features(&g, &m, 3).unwrap();
        let names: Vec<&str> = ranked.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, ["f2", "f1", "f3"]);
        assert_eq!(ranked[0].1, -5.0);
    }

    #[test]
    fn constant_prior_ranks_by_name() {
        let names: Vec<String> = ["b", "c", "a"].iter().map(|s| s.to_string()).collect();
        let ranked = rank_importance(&names, &[2.0, 2.0, -2.0], 2);
        assert_eq!(ranked.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>(), ["a", "b"]);
    }

    #[test]
    fn constant_column_has_no_grid() {
        let m = meta(&[vec![1.0, 2.0], vec![1.0, 3.0]]);
        assert!(pdp_grid(&m, 0, 10).is_err());
        assert!(pdp_grid(&m, 1, 1).is_err());
        let grid = pdp_grid(&m, 1, 3).unwrap();
        assert_eq!(grid, vec![2.0, 2.5, 3.0]);
    }

    #[test]
    fn constant_prior_explanations_are_zero() {
        let m = meta(&[vec![1.0, 2.0], vec![0.5, 3.0], vec![-1.0, 0.0]]);
        let g = LinearPrior::new(vec![0.0, 0.0], 0.7).to_mlp();
        let e = second_order_explanations(&g, &m, &AttributionConfig::new(50, 3)).unwrap();
        assert!(e.values.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn prior_width_checked() {
        let m = meta(&[vec![1.0, 2.0], vec![0.5, 3.0]]);
        let g = Mlp::build(&[3, 1], Activation::Identity, 0).unwrap();
        assert!(pdp(&g, &m, 0, 5).is_err());
    }
}
