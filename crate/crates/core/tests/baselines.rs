use dapr_core::autodiff::{Bindings, Graph, Tensor};
use dapr_core::baselines::{lasso_fit, merge_fit, naive_augmented, MergeConfig};
use dapr_core::datagen::{gen_meta_regression, Split};
use dapr_core::models::{Activation, Mlp, Model};

#[test]
fn appended_constants_act_as_a_reparametrised_bias() {
    let (d, m, _) = gen_meta_regression(30, 5, 2, 0.1, 1).unwrap();
    let aug = naive_augmented(&d, &m).unwrap();
    assert_eq!(aug.p(), 5 + 10);
    let constants = m.values.data();
    let mlp = Mlp::build(&[15, 6, 1], Activation::Tanh, 2).unwrap();
    let x = aug.x_split(Split::Train).select_rows(&[0, 4, 7]);
    for row in 0..3 {
        assert_eq!(&x.row(row)[5..], constants);
    }

    let mut graph = Graph::new();
    let params = mlp.declare_parameters(&mut graph);
    let input = graph.constant(x);
    let out = mlp.build(&mut graph, &params, input).unwrap();
    let sq = graph.mul(out, out).unwrap();
    let loss = graph.mean(sq).unwrap();
    let grads = graph.gradient(loss, &params[..2]).unwrap();
    let values = mlp.parameters();
    let mut b = Bindings::new();
    b.bind_all(&params, &values);
    let g = graph.eval(&b, &grads).unwrap();
    let (w_grad, b_grad) = (&g[0], &g[1]);
    for h in 0..6 {
        for (j, c) in constants.iter().enumerate() {
            let got = w_grad.get(h, 5 + j);
            let expected = c * b_grad.data()[h];
            assert!((got - expected).abs() <= 1e-14 * (1.0 + expected.abs()), "unit {h}, constant {j}");
        }
    }
}

#[test]
fn lasso_with_large_penalty_predicts_the_mean() {
    let (d, _, _) = gen_meta_regression(60, 8, 2, 0.1, 2).unwrap();
    let x = d.x_split(Split::Train);
    let y = d.y_split(Split::Train);
    let model = lasso_fit(&x, &y, 1e6).unwrap();
    assert!(model.weights.iter().all(|&w| w == 0.0));
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    assert!((model.intercept - mean).abs() < 1e-12);
}

#[test]
fn stronger_merge_coupling_pulls_weights_toward_meta_model() {
    let (d, m, _) = gen_meta_regression(80, 10, 2, 0.1, 3).unwrap();
    let x = d.x_split(Split::Train);
    let y = d.y_split(Split::Train);
    let gap = |coupling: f64| {
        let cfg = MergeConfig { coupling, ridge: 1e-3, max_iter: 100_000, tol: 1e-12 };
        let fit = merge_fit(&x, &y, &m, &cfg).unwrap();
        assert!(fit.converged, "coupling {coupling}");
        let meta = Tensor::matrix(10, 2, m.values.data().to_vec()).unwrap();
        fit.model
            .weights
            .iter()
            .enumerate()
            .map(|(i, w)| (w - meta.row(i).iter().zip(&fit.beta).map(|(a, b)| a * b).sum::<f64>()).abs())
            .fold(0.0, f64::max)
    };
    let (weak, strong) = (gap(0.01), gap(10.0));
    assert!(strong < 0.1 * weak, "{strong} vs {weak}");
}

#[test]
fn merge_requires_aligned_metafeatures() {
    let (d, m, _) = gen_meta_regression(40, 6, 2, 0.1, 4).unwrap();
    let x = d.x_split(Split::Train).select_rows(&[0, 1, 2]);
    let narrow = Tensor::matrix(3, 5, x.data()[..15].to_vec()).unwrap();
    assert!(merge_fit(&narrow, &[1.0, 2.0, 3.0], &m, &MergeConfig::default()).is_err());
}
