//! The trainable object: a single linear layer producing one score per class
//! (feature map and classifier head fused), with a weighted cross-entropy
//! surrogate loss, analytic gradients, Adam, and 0-1 risk metrics.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::numerics::{softmax, Matrix, Rng};
use crate::scm::Dataset;

/// Linear scorer: row i of `scores` is `a * x_i + b` (a is L x p, b length L).
/// The score vector doubles as the feature representation that the
/// distribution-matching penalties operate on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub a: Matrix,
    pub b: Vec<f64>,
}

/// Estimated label-ratio weights, one length-L vector per source domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceWeights {
    pub per_domain: Vec<Vec<f64>>,
}

/// Gradient (or gradient accumulator) with the same shapes as a model.
#[derive(Debug, Clone)]
pub struct Grads {
    pub a: Matrix,
    pub b: Vec<f64>,
}

impl Grads {
    pub fn zeros(classes: usize, dim: usize) -> Self {
        Grads { a: Matrix::zeros(classes, dim), b: vec![0.0; classes] }
    }

    pub fn add_scaled(&mut self, other: &Grads, factor: f64) {
        self.a.add_scaled(&other.a, factor);
        for (g, o) in self.b.iter_mut().zip(&other.b) {
            *g += factor * o;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.a.scale(factor);
        for g in &mut self.b {
            *g *= factor;
        }
    }
}

impl LinearModel {
    /// Small-Gaussian initialization, entries ~ N(0, 0.01^2).
    pub fn init(dim: usize, classes: usize, rng: &mut Rng) -> Self {
        let a = crate::numerics::gaussian_matrix(rng, classes, dim, 0.0, 0.01);
        let b = (0..classes).map(|_| rng.normal(0.0, 0.01)).collect();
        LinearModel { a, b }
    }

    pub fn zeros(dim: usize, classes: usize) -> Self {
        LinearModel { a: Matrix::zeros(classes, dim), b: vec![0.0; classes] }
    }

    pub fn dim(&self) -> usize {
        self.a.cols()
    }

    pub fn classes(&self) -> usize {
        self.a.rows()
    }

    /// Score matrix, one row per sample: scores[i] = a * x_i + b.
    pub fn scores(&self, x: &Matrix) -> Matrix {
        assert_eq!(x.cols(), self.dim(), "covariate dimension mismatch");
        let (n, l, p) = (x.rows(), self.classes(), self.dim());
        let mut out = Matrix::zeros(n, l);
        for i in 0..n {
            let xi = x.row(i);
            let row = out.row_mut(i);
            for c in 0..l {
                let ac = self.a.row(c);
                let mut s = self.b[c];
                for j in 0..p {
                    s += ac[j] * xi[j];
                }
                row[c] = s;
            }
        }
        out
    }

    /// Argmax labels in 1..=L; ties break toward the smaller class index.
    pub fn predict(&self, x: &Matrix) -> Vec<usize> {
        let scores = self.scores(x);
        (0..scores.rows()).map(|i| argmax_label(scores.row(i))).collect()
    }

    pub fn save_json(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_json())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&ModelJson {
            a: (0..self.classes()).map(|i| self.a.row(i).to_vec()).collect(),
            b: self.b.clone(),
            p: self.dim(),
            l: self.classes(),
        })
        .unwrap()
    }

    pub fn load_json(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| e.to_string())?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, String> {
        let parsed: ModelJson = serde_json::from_str(text).map_err(|e| e.to_string())?;
        let a = Matrix::from_rows(parsed.a);
        if a.rows() != parsed.l || a.cols() != parsed.p || parsed.b.len() != parsed.l {
            return Err("inconsistent model shape fields".into());
        }
        Ok(LinearModel { a, b: parsed.b })
    }
}

#[derive(Serialize, Deserialize)]
struct ModelJson {
    a: Vec<Vec<f64>>,
    b: Vec<f64>,
    p: usize,
    #[serde(rename = "L")]
    l: usize,
}

pub(crate) fn argmax_label(scores: &[f64]) -> usize {
    let mut best = 0;
    for (c, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = c;
        }
    }
    best + 1
}

/// Per-sample weighted multinomial cross-entropy and its analytic gradient:
/// loss = (1/n) * sum_i w_i * (-log softmax(scores_i)[y_i]).
pub fn weighted_cross_entropy_and_grad(
    model: &LinearModel,
    x: &Matrix,
    y: &[usize],
    sample_weights: &[f64],
) -> (f64, Grads) {
    let n = x.rows();
    assert_eq!(y.len(), n, "label count mismatch");
    assert_eq!(sample_weights.len(), n, "weight count mismatch");
    assert!(sample_weights.iter().all(|&w| w >= 0.0), "negative sample weight");

    let scores = model.scores(x);
    let l = model.classes();
    let mut loss = 0.0;
    // d(loss)/d(scores): filled row by row, then mapped back to parameters.
    let mut dscores = Matrix::zeros(n, l);
    for i in 0..n {
        let w = sample_weights[i];
        let row = scores.row(i);
        let probs = softmax(row);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_denom: f64 = row.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
        let target = y[i] - 1;
        loss += w * (log_denom - (row[target] - max));
        if w != 0.0 {
            let d = dscores.row_mut(i);
            for c in 0..l {
                let indicator = if c == target { 1.0 } else { 0.0 };
                d[c] = w * (probs[c] - indicator) / n as f64;
            }
        }
    }
    loss /= n as f64;

    let mut grads = Grads::zeros(l, model.dim());
    accumulate_score_grad(x, &dscores, &mut grads, 1.0);
    (loss, grads)
}

/// Chain a gradient with respect to the score matrix back to the model
/// parameters: d/da[c,j] += factor * sum_i dscores[i,c] * x[i,j], and the
/// bias receives the column sums.
pub fn accumulate_score_grad(x: &Matrix, dscores: &Matrix, grads: &mut Grads, factor: f64) {
    let (n, l, p) = (x.rows(), dscores.cols(), x.cols());
    assert_eq!(dscores.rows(), n);
    assert_eq!(grads.a.rows(), l);
    assert_eq!(grads.a.cols(), p);
    for i in 0..n {
        let xi = x.row(i);
        let di = dscores.row(i);
        for c in 0..l {
            let d = factor * di[c];
            if d == 0.0 {
                continue;
            }
            let row = grads.a.row_mut(c);
            for j in 0..p {
                row[j] += d * xi[j];
            }
            grads.b[c] += d;
        }
    }
}

/// Adam optimizer state with bias-corrected moment estimates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub step: usize,
    pub first_moment_a: Matrix,
    pub second_moment_a: Matrix,
    pub first_moment_b: Vec<f64>,
    pub second_moment_b: Vec<f64>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(dim: usize, classes: usize, lr: f64) -> Self {
        AdamState {
            step: 0,
            first_moment_a: Matrix::zeros(classes, dim),
            second_moment_a: Matrix::zeros(classes, dim),
            first_moment_b: vec![0.0; classes],
            second_moment_b: vec![0.0; classes],
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam update, in place.
pub fn adam_step(state: &mut AdamState, model: &mut LinearModel, grads: &Grads) {
    assert_eq!(model.a.rows(), grads.a.rows());
    assert_eq!(model.a.cols(), grads.a.cols());
    state.step += 1;
    let t = state.step as i32;
    let corr1 = 1.0 - state.beta1.powi(t);
    let corr2 = 1.0 - state.beta2.powi(t);
    let update = |param: &mut f64, g: f64, m: &mut f64, v: &mut f64, s: &AdamState| {
        *m = s.beta1 * *m + (1.0 - s.beta1) * g;
        *v = s.beta2 * *v + (1.0 - s.beta2) * g * g;
        let m_hat = *m / corr1;
        let v_hat = *v / corr2;
        *param -= s.lr * m_hat / (v_hat.sqrt() + s.eps);
    };
    for idx in 0..model.a.as_slice().len() {
        let g = grads.a.as_slice()[idx];
        let mut param = model.a.as_slice()[idx];
        let mut m = state.first_moment_a.as_slice()[idx];
        let mut v = state.second_moment_a.as_slice()[idx];
        update(&mut param, g, &mut m, &mut v, state);
        model.a.as_mut_slice()[idx] = param;
        state.first_moment_a.as_mut_slice()[idx] = m;
        state.second_moment_a.as_mut_slice()[idx] = v;
    }
    for c in 0..model.b.len() {
        let g = grads.b[c];
        let mut param = model.b[c];
        let mut m = state.first_moment_b[c];
        let mut v = state.second_moment_b[c];
        update(&mut param, g, &mut m, &mut v, state);
        model.b[c] = param;
        state.first_moment_b[c] = m;
        state.second_moment_b[c] = v;
    }
}

/// Misclassification fraction under `predict`.
pub fn zero_one_risk(model: &LinearModel, dataset: &Dataset) -> f64 {
    if dataset.is_empty() {
        return 0.0;
    }
    let preds = model.predict(&dataset.x);
    let wrong = preds.iter().zip(&dataset.y).filter(|(p, y)| p != y).count();
    wrong as f64 / dataset.len() as f64
}

/// Class-weighted misclassification: (1/n) * sum_i w[y_i] * 1{predict != y_i}.
pub fn weighted_zero_one_risk(model: &LinearModel, dataset: &Dataset, w: &[f64]) -> f64 {
    assert!(w.iter().all(|&v| v >= 0.0), "negative class weight");
    if dataset.is_empty() {
        return 0.0;
    }
    let preds = model.predict(&dataset.x);
    let total: f64 = preds
        .iter()
        .zip(&dataset.y)
        .filter(|(p, y)| p != y)
        .map(|(_, &y)| w[y - 1])
        .sum();
    total / dataset.len() as f64
}
