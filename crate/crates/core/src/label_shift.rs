//! Label-shift correction: estimate class importance weights w(y) =
//! p_target(y) / p_source(y) from source-domain confusion frequencies and the
//! classifier's predicted label distribution on unlabeled target data.

use thiserror::Error;

use crate::model::LinearModel;
use crate::numerics::{solve_linear_system, Matrix, NumericsError};
use crate::scm::Dataset;

#[derive(Debug, Error)]
pub enum LabelShiftError {
    #[error("confusion matrix is singular or weights have zero mass")]
    SingularConfusion,
    #[error("dataset is empty")]
    EmptyData,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Joint empirical frequencies c[k,y] = (1/n) #{i : predict(x_i) = k+1 and
/// y_i = y+1} on one labeled dataset, plus the sample count.
#[derive(Debug, Clone)]
pub struct ConfusionMatrix {
    pub c: Matrix,
    pub n: usize,
}

pub fn confusion_matrix(model: &LinearModel, data: &Dataset) -> Result<ConfusionMatrix, LabelShiftError> {
    let n = data.len();
    if n == 0 {
        return Err(LabelShiftError::EmptyData);
    }
    let classes = model.classes();
    let preds = model.predict(&data.x);
    let mut c = Matrix::zeros(classes, classes);
    for (pred, &truth) in preds.iter().zip(&data.y) {
        let cur = c.get(pred - 1, truth - 1);
        c.set(pred - 1, truth - 1, cur + 1.0 / n as f64);
    }
    Ok(ConfusionMatrix { c, n })
}

/// Empirical distribution of predicted labels on (typically unlabeled)
/// target rows: mu[k] = (1/n) #{i : predict(x_i) = k+1}.
pub fn predicted_target_distribution(model: &LinearModel, target_x: &Matrix) -> Result<Vec<f64>, LabelShiftError> {
    let n = target_x.rows();
    if n == 0 {
        return Err(LabelShiftError::EmptyData);
    }
    let mut mu = vec![0.0; model.classes()];
    for pred in model.predict(target_x) {
        mu[pred - 1] += 1.0 / n as f64;
    }
    Ok(mu)
}

/// Solve c * w = mu for the class weights, then project onto the feasible
/// set: negative entries are clipped to zero and the result is rescaled so
/// that sum_y w[y] * p_source(y) = 1, where p_source(y) = sum_k c[k,y] is the
/// source class mass. Errors if the clipped weights carry no mass.
pub fn estimate_weights(confusion: &ConfusionMatrix, mu: &[f64]) -> Result<Vec<f64>, LabelShiftError> {
    let classes = confusion.c.rows();
    assert_eq!(mu.len(), classes, "target distribution length mismatch");
    let raw = solve_linear_system(&confusion.c, mu).map_err(|e| match e {
        NumericsError::SingularMatrix { .. } => LabelShiftError::SingularConfusion,
        other => LabelShiftError::Numerics(other),
    })?;
    let mut w: Vec<f64> = raw.iter().map(|&v| v.max(0.0)).collect();
    let mut mass = 0.0;
    for y in 0..classes {
        let mut col_sum = 0.0;
        for k in 0..classes {
            col_sum += confusion.c.get(k, y);
        }
        mass += w[y] * col_sum;
    }
    if mass <= 0.0 || !mass.is_finite() {
        return Err(LabelShiftError::SingularConfusion);
    }
    for v in &mut w {
        *v /= mass;
    }
    Ok(w)
}

/// Full pipeline: confusion on a labeled source split, predicted label
/// distribution on target rows, then the weight solve.
pub fn estimate_weights_from_data(
    model: &LinearModel,
    source: &Dataset,
    target_x: &Matrix,
) -> Result<Vec<f64>, LabelShiftError> {
    let confusion = confusion_matrix(model, source)?;
    let mu = predicted_target_distribution(model, target_x)?;
    estimate_weights(&confusion, &mu)
}
