//! Distribution-distance penalties over feature batches, with analytic
//! gradients with respect to the feature entries: squared mean distance and
//! weighted Gaussian-kernel MMD (biased V-statistic), assembled into the
//! conditional-invariance (CIP), marginal-matching (DIP), and joint-matching
//! (JointDIP) penalty terms.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{median_pairwise_sq_distance, sq_distance, Matrix};

#[derive(Debug, Error, PartialEq)]
pub enum PenaltyError {
    #[error("empty feature batch")]
    EmptyBatch,
    #[error("feature batches have mismatched shapes")]
    ShapeMismatch,
    #[error("batch weights sum to zero")]
    ZeroWeightMass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceKind {
    Mean,
    Mmd,
}

impl std::str::FromStr for DistanceKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "mean" => Ok(DistanceKind::Mean),
            "mmd" => Ok(DistanceKind::Mmd),
            other => Err(format!("unknown distance kind `{other}` (expected mean|mmd)")),
        }
    }
}

/// Kernel bandwidth choice for MMD. `Fixed` carries sigma^2 directly;
/// `MedianHeuristic` recomputes sigma^2 as the median pairwise squared
/// distance of the pooled batch on every evaluation. The bandwidth is treated
/// as a constant when differentiating.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthPolicy {
    MedianHeuristic,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltySpec {
    pub kind: DistanceKind,
    pub bandwidth: BandwidthPolicy,
    /// Multiplier applied by the training objective; the penalty functions
    /// themselves return unscaled values.
    pub lambda: f64,
}

impl PenaltySpec {
    pub fn mean(lambda: f64) -> Self {
        PenaltySpec { kind: DistanceKind::Mean, bandwidth: BandwidthPolicy::MedianHeuristic, lambda }
    }

    pub fn mmd(lambda: f64) -> Self {
        PenaltySpec { kind: DistanceKind::Mmd, bandwidth: BandwidthPolicy::MedianHeuristic, lambda }
    }

    pub fn with_kind(kind: DistanceKind, lambda: f64) -> Self {
        PenaltySpec { kind, bandwidth: BandwidthPolicy::MedianHeuristic, lambda }
    }
}

/// A batch of feature rows with optional non-negative per-row weights
/// (uniform when absent). Weights are normalized to sum 1 internally, so
/// only their proportions matter.
#[derive(Debug, Clone)]
pub struct FeatureBatch {
    pub values: Matrix,
    pub weights: Option<Vec<f64>>,
}

impl FeatureBatch {
    pub fn unweighted(values: Matrix) -> Self {
        FeatureBatch { values, weights: None }
    }

    pub fn weighted(values: Matrix, weights: Vec<f64>) -> Self {
        assert_eq!(values.rows(), weights.len(), "weight count mismatch");
        assert!(weights.iter().all(|&w| w >= 0.0), "negative batch weight");
        FeatureBatch { values, weights: Some(weights) }
    }

    pub fn rows(&self) -> usize {
        self.values.rows()
    }

    pub fn width(&self) -> usize {
        self.values.cols()
    }

    fn normalized_weights(&self) -> Result<Vec<f64>, PenaltyError> {
        let n = self.rows();
        if n == 0 {
            return Err(PenaltyError::EmptyBatch);
        }
        match &self.weights {
            None => Ok(vec![1.0 / n as f64; n]),
            Some(w) => {
                let total: f64 = w.iter().sum();
                if total <= 0.0 || !total.is_finite() {
                    return Err(PenaltyError::ZeroWeightMass);
                }
                Ok(w.iter().map(|v| v / total).collect())
            }
        }
    }
}

/// Penalty value plus gradients with respect to the entries of each batch.
#[derive(Debug, Clone)]
pub struct PairPenalty {
    pub value: f64,
    pub grad_src: Matrix,
    pub grad_tgt: Matrix,
}

/// Squared Euclidean distance between the weighted feature means.
pub fn mean_penalty(src: &FeatureBatch, tgt: &FeatureBatch) -> Result<PairPenalty, PenaltyError> {
    if src.width() != tgt.width() {
        return Err(PenaltyError::ShapeMismatch);
    }
    let ws = src.normalized_weights()?;
    let wt = tgt.normalized_weights()?;
    let q = src.width();

    let weighted_mean = |batch: &FeatureBatch, w: &[f64]| {
        let mut mean = vec![0.0; q];
        for i in 0..batch.rows() {
            let row = batch.values.row(i);
            for j in 0..q {
                mean[j] += w[i] * row[j];
            }
        }
        mean
    };
    let ms = weighted_mean(src, &ws);
    let mt = weighted_mean(tgt, &wt);
    let diff: Vec<f64> = ms.iter().zip(&mt).map(|(a, b)| a - b).collect();
    let value: f64 = diff.iter().map(|d| d * d).sum();

    let mut grad_src = Matrix::zeros(src.rows(), q);
    for i in 0..src.rows() {
        let row = grad_src.row_mut(i);
        for j in 0..q {
            row[j] = 2.0 * ws[i] * diff[j];
        }
    }
    let mut grad_tgt = Matrix::zeros(tgt.rows(), q);
    for i in 0..tgt.rows() {
        let row = grad_tgt.row_mut(i);
        for j in 0..q {
            row[j] = -2.0 * wt[i] * diff[j];
        }
    }
    Ok(PairPenalty { value, grad_src, grad_tgt })
}

fn resolve_bandwidth(spec: &PenaltySpec, src: &Matrix, tgt: &Matrix) -> f64 {
    match spec.bandwidth {
        BandwidthPolicy::Fixed(sigma_sq) => {
            assert!(sigma_sq > 0.0, "fixed bandwidth must be positive");
            sigma_sq
        }
        BandwidthPolicy::MedianHeuristic => median_pairwise_sq_distance(src, tgt),
    }
}

/// Squared MMD with Gaussian kernel k(u,v) = exp(-|u-v|^2 / (2 sigma^2)),
/// estimated by the biased V-statistic with normalized weights:
///   sum_ij w_i w_j k(s_i,s_j) + sum_ij v_i v_j k(t_i,t_j)
///     - 2 sum_ij w_i v_j k(s_i,t_j).
/// Always >= 0 up to rounding. Gradients are exact for fixed bandwidth; the
/// median-heuristic bandwidth is treated as a constant.
pub fn mmd_penalty(
    src: &FeatureBatch,
    tgt: &FeatureBatch,
    spec: &PenaltySpec,
) -> Result<PairPenalty, PenaltyError> {
    if src.width() != tgt.width() {
        return Err(PenaltyError::ShapeMismatch);
    }
    let ws = src.normalized_weights()?;
    let wt = tgt.normalized_weights()?;
    let (ns, nt, q) = (src.rows(), tgt.rows(), src.width());
    let sigma_sq = resolve_bandwidth(spec, &src.values, &tgt.values);

    let kernel = |a: &[f64], b: &[f64]| (-sq_distance(a, b) / (2.0 * sigma_sq)).exp();

    let mut grad_src = Matrix::zeros(ns, q);
    let mut grad_tgt = Matrix::zeros(nt, q);

    // Source-source block. d/ds_i picks up the pair (i,j) twice by symmetry.
    let mut term_ss = 0.0;
    for i in 0..ns {
        let si = src.values.row(i);
        for j in 0..ns {
            let sj = src.values.row(j);
            let k = kernel(si, sj);
            term_ss += ws[i] * ws[j] * k;
            if i != j {
                let coeff = 2.0 * ws[i] * ws[j] * k / sigma_sq;
                let gi = grad_src.row_mut(i);
                for d in 0..q {
                    gi[d] += coeff * (sj[d] - si[d]);
                }
            }
        }
    }

    let mut term_tt = 0.0;
    for i in 0..nt {
        let ti = tgt.values.row(i);
        for j in 0..nt {
            let tj = tgt.values.row(j);
            let k = kernel(ti, tj);
            term_tt += wt[i] * wt[j] * k;
            if i != j {
                let coeff = 2.0 * wt[i] * wt[j] * k / sigma_sq;
                let gi = grad_tgt.row_mut(i);
                for d in 0..q {
                    gi[d] += coeff * (tj[d] - ti[d]);
                }
            }
        }
    }

    let mut term_st = 0.0;
    for i in 0..ns {
        let si = src.values.row(i);
        for j in 0..nt {
            let tj = tgt.values.row(j);
            let k = kernel(si, tj);
            term_st += ws[i] * wt[j] * k;
            let coeff = 2.0 * ws[i] * wt[j] * k / sigma_sq;
            let gi = grad_src.row_mut(i);
            for d in 0..q {
                gi[d] -= coeff * (tj[d] - si[d]);
            }
            let gj = grad_tgt.row_mut(j);
            for d in 0..q {
                gj[d] -= coeff * (si[d] - tj[d]);
            }
        }
    }

    let value = term_ss + term_tt - 2.0 * term_st;
    Ok(PairPenalty { value, grad_src, grad_tgt })
}

/// Base distance dispatch used by the composite penalties.
pub fn distance(
    src: &FeatureBatch,
    tgt: &FeatureBatch,
    spec: &PenaltySpec,
) -> Result<PairPenalty, PenaltyError> {
    match spec.kind {
        DistanceKind::Mean => mean_penalty(src, tgt),
        DistanceKind::Mmd => mmd_penalty(src, tgt, spec),
    }
}

/// Conditional-invariance penalty: per-class base distances summed over all
/// ordered pairs of distinct domains, scaled by 1/(L*M^2). `domains[m][y-1]`
/// is domain m's class-y feature batch. Pairs where either batch holds fewer
/// than 2 rows contribute nothing. Returns the value and gradients nested the
/// same way as the input.
pub fn cip_penalty(
    domains: &[Vec<FeatureBatch>],
    spec: &PenaltySpec,
) -> Result<(f64, Vec<Vec<Matrix>>), PenaltyError> {
    let m = domains.len();
    assert!(m >= 2, "conditional invariance needs at least two domains");
    let classes = domains[0].len();
    assert!(domains.iter().all(|d| d.len() == classes), "ragged class batches");

    let scale = 1.0 / (classes as f64 * (m * m) as f64);
    let mut value = 0.0;
    let mut grads: Vec<Vec<Matrix>> = domains
        .iter()
        .map(|per_class| {
            per_class
                .iter()
                .map(|b| Matrix::zeros(b.rows(), b.width()))
                .collect()
        })
        .collect();

    for y in 0..classes {
        for d1 in 0..m {
            for d2 in d1 + 1..m {
                let (b1, b2) = (&domains[d1][y], &domains[d2][y]);
                if b1.rows() < 2 || b2.rows() < 2 {
                    continue;
                }
                let pair = distance(b1, b2, spec)?;
                // Both ordered pairs (d1,d2) and (d2,d1); the distance is
                // symmetric, so each contributes the same value and gradient.
                value += 2.0 * scale * pair.value;
                grads[d1][y].add_scaled(&pair.grad_src, 2.0 * scale);
                grads[d2][y].add_scaled(&pair.grad_tgt, 2.0 * scale);
            }
        }
    }
    Ok((value, grads))
}

/// Marginal matching penalty between one source batch and the target batch.
/// For the importance-weighted variant the source batch carries w(y_i) row
/// weights, which reweight its empirical feature distribution.
pub fn dip_penalty(
    src: &FeatureBatch,
    tgt: &FeatureBatch,
    spec: &PenaltySpec,
) -> Result<PairPenalty, PenaltyError> {
    distance(src, tgt, spec)
}

/// Joint matching penalty: concatenates the current features with frozen
/// conditionally-invariant reference features column-wise on each side, then
/// applies the MMD penalty (always the kernel distance, whatever spec.kind
/// says). Gradients flow only into the current features; the reference
/// features are constants. Source row weights are honored as in dip_penalty.
pub fn joint_dip_penalty(
    src_feat: &FeatureBatch,
    tgt_feat: &FeatureBatch,
    src_cic: &Matrix,
    tgt_cic: &Matrix,
    spec: &PenaltySpec,
) -> Result<PairPenalty, PenaltyError> {
    if src_feat.rows() != src_cic.rows() || tgt_feat.rows() != tgt_cic.rows() {
        return Err(PenaltyError::ShapeMismatch);
    }
    if src_feat.width() != tgt_feat.width() || src_cic.cols() != tgt_cic.cols() {
        return Err(PenaltyError::ShapeMismatch);
    }
    let width = src_feat.width();
    let src_joint = FeatureBatch {
        values: src_feat.values.hcat(src_cic),
        weights: src_feat.weights.clone(),
    };
    let tgt_joint = FeatureBatch {
        values: tgt_feat.values.hcat(tgt_cic),
        weights: tgt_feat.weights.clone(),
    };
    let mmd_spec = PenaltySpec { kind: DistanceKind::Mmd, ..*spec };
    let joint = mmd_penalty(&src_joint, &tgt_joint, &mmd_spec)?;
    Ok(PairPenalty {
        value: joint.value,
        grad_src: joint.grad_src.left_cols(width),
        grad_tgt: joint.grad_tgt.left_cols(width),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(rows: Vec<Vec<f64>>) -> FeatureBatch {
        FeatureBatch::unweighted(Matrix::from_rows(rows))
    }

    #[test]
    fn mean_penalty_identical_batches_is_zero() {
        let a = batch(vec![vec![1.0, 2.0], vec![3.0, -1.0]]);
        let out = mean_penalty(&a, &a).unwrap();
        assert_eq!(out.value, 0.0);
        assert!(out.grad_src.as_slice().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn mean_penalty_hand_euclidean() {
        let a = batch(vec![vec![0.0, 0.0], vec![0.0, 0.0]]);
        let b = batch(vec![vec![3.0, 4.0]]);
        let out = mean_penalty(&a, &b).unwrap();
        assert!((out.value - 25.0).abs() < 1e-12);
    }

    #[test]
    fn mean_penalty_weight_scale_invariance() {
        let v = Matrix::from_rows(vec![vec![1.0], vec![2.0], vec![5.0]]);
        let t = batch(vec![vec![0.0]]);
        let w1 = FeatureBatch::weighted(v.clone(), vec![1.0, 2.0, 3.0]);
        let w2 = FeatureBatch::weighted(v, vec![2.0, 4.0, 6.0]);
        let a = mean_penalty(&w1, &t).unwrap();
        let b = mean_penalty(&w2, &t).unwrap();
        assert_eq!(a.value, b.value);
    }

    #[test]
    fn mean_penalty_empty_batch_errors() {
        let a = batch(vec![]);
        let b = batch(vec![vec![1.0]]);
        // zero-row batch has width 0 vs 1: construct explicitly with matching width
        let empty = FeatureBatch::unweighted(Matrix::zeros(0, 1));
        assert_eq!(mean_penalty(&empty, &b).unwrap_err(), PenaltyError::EmptyBatch);
        assert!(matches!(
            mean_penalty(&a, &b),
            Err(PenaltyError::ShapeMismatch | PenaltyError::EmptyBatch)
        ));
    }

    #[test]
    fn mmd_identical_batches_is_exactly_zero() {
        let a = batch(vec![vec![0.3, -0.7], vec![1.4, 0.2], vec![-2.0, 0.9]]);
        let spec = PenaltySpec::mmd(1.0);
        let out = mmd_penalty(&a, &a, &spec).unwrap();
        assert_eq!(out.value, 0.0);
    }

    #[test]
    fn mmd_two_point_kernel_sum() {
        let a = batch(vec![vec![0.0]]);
        let b = batch(vec![vec![1.0]]);
        let spec = PenaltySpec {
            kind: DistanceKind::Mmd,
            bandwidth: BandwidthPolicy::Fixed(1.0),
            lambda: 1.0,
        };
        let out = mmd_penalty(&a, &b, &spec).unwrap();
        // 1 + 1 - 2 exp(-1/2)
        let expected = 2.0 - 2.0 * (-0.5_f64).exp();
        assert!((out.value - expected).abs() < 1e-12, "{} vs {expected}", out.value);
    }

    #[test]
    fn mmd_uniform_weights_equal_unweighted() {
        let vals = Matrix::from_rows(vec![vec![0.1], vec![0.9], vec![-0.4]]);
        let t = batch(vec![vec![0.5], vec![0.2]]);
        let spec = PenaltySpec::mmd(1.0);
        let unweighted = mmd_penalty(&FeatureBatch::unweighted(vals.clone()), &t, &spec).unwrap();
        let weighted =
            mmd_penalty(&FeatureBatch::weighted(vals, vec![2.5, 2.5, 2.5]), &t, &spec).unwrap();
        assert!((unweighted.value - weighted.value).abs() < 1e-15);
    }

    #[test]
    fn mmd_is_symmetric() {
        let a = batch(vec![vec![0.0, 1.0], vec![2.0, -1.0]]);
        let b = batch(vec![vec![0.5, 0.5], vec![1.5, 1.5], vec![-0.5, 2.0]]);
        let spec = PenaltySpec::mmd(1.0);
        let ab = mmd_penalty(&a, &b, &spec).unwrap();
        let ba = mmd_penalty(&b, &a, &spec).unwrap();
        assert!((ab.value - ba.value).abs() < 1e-12);
    }

    #[test]
    fn zero_weight_mass_is_rejected() {
        let v = Matrix::from_rows(vec![vec![1.0], vec![2.0]]);
        let z = FeatureBatch::weighted(v, vec![0.0, 0.0]);
        let t = batch(vec![vec![0.0]]);
        assert_eq!(mean_penalty(&z, &t).unwrap_err(), PenaltyError::ZeroWeightMass);
    }

    #[test]
    fn cip_identical_domains_zero() {
        let per_class = vec![
            batch(vec![vec![1.0], vec![1.2]]),
            batch(vec![vec![-1.0], vec![-0.8]]),
        ];
        let domains = vec![per_class.clone(), per_class.clone(), per_class];
        let (value, _) = cip_penalty(&domains, &PenaltySpec::mean(1.0)).unwrap();
        assert_eq!(value, 0.0);
    }

    #[test]
    fn cip_two_domain_hand_expansion() {
        // M=2, L=1, class means differ by (1,0):
        // two ordered pairs, each distance 1, scaled by 1/(1*4) -> 0.5
        let d1 = vec![batch(vec![vec![0.0, 0.0], vec![0.0, 0.0]])];
        let d2 = vec![batch(vec![vec![1.0, 0.0], vec![1.0, 0.0]])];
        let (value, grads) = cip_penalty(&[d1, d2], &PenaltySpec::mean(1.0)).unwrap();
        assert!((value - 0.5).abs() < 1e-12);
        assert_eq!(grads.len(), 2);
        assert_eq!(grads[0][0].rows(), 2);
    }

    #[test]
    fn cip_skips_thin_classes() {
        let d1 = vec![
            batch(vec![vec![0.0], vec![0.1]]),
            batch(vec![vec![5.0], vec![5.1]]),
        ];
        // domain 2 has a single class-2 row: class-2 terms are skipped
        let d2 = vec![batch(vec![vec![1.0], vec![1.1]]), batch(vec![vec![9.0]])];
        let (value, _) = cip_penalty(&[d1.clone(), d2], &PenaltySpec::mean(1.0)).unwrap();
        let d2e = vec![
            batch(vec![vec![1.0], vec![1.1]]),
            FeatureBatch::unweighted(Matrix::zeros(0, 1)),
        ];
        let (value_empty, _) = cip_penalty(&[d1, d2e], &PenaltySpec::mean(1.0)).unwrap();
        assert!(value.is_finite());
        assert_eq!(value, value_empty);
    }

    #[test]
    fn cip_invariant_under_domain_permutation() {
        let mk = |offset: f64| {
            vec![
                batch(vec![vec![offset], vec![offset + 0.3]]),
                batch(vec![vec![-offset], vec![0.2 - offset]]),
            ]
        };
        let domains = vec![mk(0.0), mk(1.0), mk(-0.5)];
        let permuted = vec![domains[2].clone(), domains[0].clone(), domains[1].clone()];
        let spec = PenaltySpec::mean(1.0);
        let (v1, _) = cip_penalty(&domains, &spec).unwrap();
        let (v2, _) = cip_penalty(&permuted, &spec).unwrap();
        assert!((v1 - v2).abs() < 1e-12);
    }

    #[test]
    fn dip_reduces_to_mean_penalty() {
        let a = batch(vec![vec![0.0, 1.0], vec![1.0, 1.0]]);
        let b = batch(vec![vec![2.0, 0.0]]);
        let spec = PenaltySpec::mean(1.0);
        let dip = dip_penalty(&a, &b, &spec).unwrap();
        let mean = mean_penalty(&a, &b).unwrap();
        assert_eq!(dip.value, mean.value);
    }

    #[test]
    fn dip_class_weights_match_subset() {
        // classes (1,1,2,2) with w-hat = (0, 2): identical to using only the
        // class-2 rows unweighted.
        let vals = Matrix::from_rows(vec![vec![0.0], vec![0.4], vec![2.0], vec![2.6]]);
        let w = vec![0.0, 0.0, 2.0, 2.0];
        let spec = PenaltySpec {
            kind: DistanceKind::Mmd,
            bandwidth: BandwidthPolicy::Fixed(1.0),
            lambda: 1.0,
        };
        let tgt = batch(vec![vec![2.2], vec![2.4]]);
        let weighted = dip_penalty(&FeatureBatch::weighted(vals, w), &tgt, &spec).unwrap();
        let subset = dip_penalty(&batch(vec![vec![2.0], vec![2.6]]), &tgt, &spec).unwrap();
        assert!((weighted.value - subset.value).abs() < 1e-12);
    }

    #[test]
    fn joint_identical_sides_zero() {
        let feat = batch(vec![vec![0.5], vec![-0.5]]);
        let cic = Matrix::from_rows(vec![vec![1.0], vec![-1.0]]);
        let spec = PenaltySpec::mmd(1.0);
        let out = joint_dip_penalty(&feat, &feat, &cic, &cic, &spec).unwrap();
        assert_eq!(out.value, 0.0);
    }

    #[test]
    fn joint_zero_width_reference_reduces_to_marginal_mmd() {
        let a = batch(vec![vec![0.0], vec![1.0]]);
        let b = batch(vec![vec![0.5], vec![1.5]]);
        let none_a = Matrix::zeros(2, 0);
        let none_b = Matrix::zeros(2, 0);
        let spec = PenaltySpec {
            kind: DistanceKind::Mmd,
            bandwidth: BandwidthPolicy::Fixed(2.0),
            lambda: 1.0,
        };
        let joint = joint_dip_penalty(&a, &b, &none_a, &none_b, &spec).unwrap();
        let plain = mmd_penalty(&a, &b, &spec).unwrap();
        assert_eq!(joint.value, plain.value);
        assert_eq!(joint.grad_src, plain.grad_src);
    }

    #[test]
    fn joint_detects_dependence_marginals_miss() {
        // Feature marginals match ({-1,+1} both sides) but the pairing with
        // the reference features differs, so the joint penalty is positive.
        let src_feat = batch(vec![vec![-1.0], vec![1.0]]);
        let tgt_feat = batch(vec![vec![1.0], vec![-1.0]]);
        let cic = Matrix::from_rows(vec![vec![-1.0], vec![1.0]]);
        let spec = PenaltySpec {
            kind: DistanceKind::Mmd,
            bandwidth: BandwidthPolicy::Fixed(1.0),
            lambda: 1.0,
        };
        let marginal = mmd_penalty(&src_feat, &tgt_feat, &spec).unwrap();
        assert!(marginal.value.abs() < 1e-12);
        let joint = joint_dip_penalty(&src_feat, &tgt_feat, &cic, &cic, &spec).unwrap();
        // Joint rows: src {(-1,-1),(1,1)}, tgt {(1,-1),(-1,1)}. Within-side
        // squared distances are 8, all four cross distances are 4, so the
        // V-statistic is 1 + e^{-4} - 2 e^{-2} = (1 - e^{-2})^2.
        let expected = (1.0 - (-2.0_f64).exp()).powi(2);
        assert!((joint.value - expected).abs() < 1e-12);
    }

    #[test]
    fn joint_shape_mismatch_errors() {
        let a = batch(vec![vec![0.0], vec![1.0]]);
        let cic_short = Matrix::from_rows(vec![vec![0.0]]);
        let cic_ok = Matrix::from_rows(vec![vec![0.0], vec![1.0]]);
        let spec = PenaltySpec::mmd(1.0);
        assert_eq!(
            joint_dip_penalty(&a, &a, &cic_short, &cic_ok, &spec).unwrap_err(),
            PenaltyError::ShapeMismatch
        );
    }
}
