mod common;

use entres_core::PriorKind;

#[test]
fn every_op_matches_central_differences() {
    let errors = common::op_gradient_errors(20, 7);
    let bad: Vec<_> = errors.iter().filter(|(_, e)| !(*e <= 1e-3)).collect();
    assert!(bad.is_empty(), "{bad:?}");
}

#[test]
fn factorized_model_gradients_match_reference() {
    let (err, n) = common::model_gradient_error(PriorKind::Fp, 3);
    assert!(n > 1000);
    assert!(err <= 1e-3, "max relative error {err}");
}

#[test]
fn hyperprior_model_gradients_match_reference() {
    let (err, n) = common::model_gradient_error(PriorKind::Mshp, 4);
    assert!(n > 2000);
    assert!(err <= 1e-3, "max relative error {err}");
}

#[test]
fn reference_reproduces_graph_loss() {
    for prior in [PriorKind::Fp, PriorKind::Mshp] {
        let model = common::tiny_model(prior, 5);
        let (_, reference) = common::model_gradients(&model, 5);
        let values: Vec<Vec<f64>> =
            model.params().iter().map(|(_, t)| t.data().iter().map(|&v| v as f64).collect()).collect();
        let want = reference.loss(&values);
        assert!((want - reference.graph_loss).abs() <= 1e-5 * want.abs(), "{prior}: {want} vs {}", reference.graph_loss);
    }
}
