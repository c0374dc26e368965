mod common;

use common::{linear_model, mlp_model, worst_gradient_error};
use dualdice::model::CorrectionModel;

#[test]
fn tabular_gradients() {
    let err = worst_gradient_error(|_| CorrectionModel::tabular(10), 2.0);
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn linear_gradients() {
    let err = worst_gradient_error(linear_model, 1.0);
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn mlp_gradients() {
    let err = worst_gradient_error(mlp_model, 1.0);
    assert!(err <= 1e-4, "{err}");
}
