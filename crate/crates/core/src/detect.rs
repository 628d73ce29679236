//! Target-risk failure detection from an (approximately) conditionally
//! invariant proxy classifier: an empirical lower bound on the target risk of
//! any candidate model using only labeled source data and unlabeled target
//! covariates, plus a high-confidence-region refinement that tightens the
//! bound on the subset where the proxy is most certain.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::LinearModel;
use crate::numerics::{quantile, softmax, Matrix};
use crate::scm::Dataset;

#[derive(Debug, Error, PartialEq)]
pub enum DetectError {
    #[error("empty dataset")]
    EmptyDataset,
    #[error("restricted region is empty on the {0} side")]
    EmptyRegion(&'static str),
}

/// One bound evaluation. `risk_lower_bound` may be negative (a vacuous but
/// valid bound) and `accuracy_upper_bound` is always exactly its complement,
/// so it may exceed 1. The region fields are set by the restricted variant;
/// `actual_target_acc` is filled only when target labels are supplied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub candidate_source_acc: f64,
    pub proxy_source_risk: f64,
    pub disagreement_source: f64,
    pub disagreement_target: f64,
    pub risk_lower_bound: f64,
    pub accuracy_upper_bound: f64,
    pub region_alpha: Option<f64>,
    pub region_fraction_target: Option<f64>,
    pub actual_target_acc: Option<f64>,
}

/// Row subsets whose proxy confidence reaches the target alpha-quantile.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionSplit {
    pub source_rows: Vec<usize>,
    pub target_rows: Vec<usize>,
    pub threshold: f64,
}

/// Maximum softmax probability of each row, the proxy's confidence score.
pub fn max_softmax_probs(model: &LinearModel, x: &Matrix) -> Vec<f64> {
    let scores = model.scores(x);
    (0..scores.rows())
        .map(|i| {
            softmax(scores.row(i)).into_iter().fold(f64::NEG_INFINITY, f64::max)
        })
        .collect()
}

/// Empirical target-risk lower bound:
///   R_T(candidate) >= R_S(candidate) - 2 R_S(proxy)
///                     + (disagreement_T - disagreement_S),
/// where the disagreements are the fractions of rows on which candidate and
/// proxy predict differently. Valid up to finite-sample error whenever the
/// proxy's features are conditionally invariant and there is no label shift.
pub fn target_risk_lower_bound(
    candidate: &LinearModel,
    proxy: &LinearModel,
    source: &Dataset,
    target_x: &Matrix,
) -> Result<DetectionReport, DetectError> {
    if source.is_empty() || target_x.rows() == 0 {
        return Err(DetectError::EmptyDataset);
    }
    let n_src = source.len() as f64;
    let n_tgt = target_x.rows() as f64;

    let cand_src = candidate.predict(&source.x);
    let proxy_src = proxy.predict(&source.x);
    let cand_tgt = candidate.predict(target_x);
    let proxy_tgt = proxy.predict(target_x);

    let cand_src_risk =
        cand_src.iter().zip(&source.y).filter(|(p, y)| p != y).count() as f64 / n_src;
    let proxy_source_risk =
        proxy_src.iter().zip(&source.y).filter(|(p, y)| p != y).count() as f64 / n_src;
    let disagreement_source =
        cand_src.iter().zip(&proxy_src).filter(|(a, b)| a != b).count() as f64 / n_src;
    let disagreement_target =
        cand_tgt.iter().zip(&proxy_tgt).filter(|(a, b)| a != b).count() as f64 / n_tgt;

    let risk_lower_bound =
        cand_src_risk - 2.0 * proxy_source_risk + (disagreement_target - disagreement_source);
    Ok(DetectionReport {
        candidate_source_acc: 1.0 - cand_src_risk,
        proxy_source_risk,
        disagreement_source,
        disagreement_target,
        risk_lower_bound,
        accuracy_upper_bound: 1.0 - risk_lower_bound,
        region_alpha: None,
        region_fraction_target: None,
        actual_target_acc: None,
    })
}

/// Restrict source and target to the rows where the proxy's confidence is at
/// least the lower empirical alpha-quantile of the target confidences. At
/// alpha = 0 no filtering happens at all, so the region is everything on
/// both sides regardless of where source confidences fall.
pub fn restrict_region(
    proxy: &LinearModel,
    source: &Dataset,
    target_x: &Matrix,
    alpha: f64,
) -> Result<RegionSplit, DetectError> {
    assert!((0.0..1.0).contains(&alpha), "alpha must be in [0,1)");
    if source.is_empty() || target_x.rows() == 0 {
        return Err(DetectError::EmptyDataset);
    }
    let tgt_probs = max_softmax_probs(proxy, target_x);
    let threshold = quantile(&tgt_probs, alpha).expect("non-empty by the check above");
    if alpha == 0.0 {
        return Ok(RegionSplit {
            source_rows: (0..source.len()).collect(),
            target_rows: (0..target_x.rows()).collect(),
            threshold,
        });
    }
    let src_probs = max_softmax_probs(proxy, &source.x);
    let source_rows: Vec<usize> =
        (0..source.len()).filter(|&i| src_probs[i] >= threshold).collect();
    let target_rows: Vec<usize> =
        (0..target_x.rows()).filter(|&i| tgt_probs[i] >= threshold).collect();
    if source_rows.is_empty() {
        return Err(DetectError::EmptyRegion("source"));
    }
    if target_rows.is_empty() {
        return Err(DetectError::EmptyRegion("target"));
    }
    Ok(RegionSplit { source_rows, target_rows, threshold })
}

/// The lower bound evaluated on the restricted high-confidence region.
pub fn restricted_bound(
    candidate: &LinearModel,
    proxy: &LinearModel,
    source: &Dataset,
    target_x: &Matrix,
    alpha: f64,
) -> Result<DetectionReport, DetectError> {
    let region = restrict_region(proxy, source, target_x, alpha)?;
    let source_sub = source.select(&region.source_rows);
    let target_sub = target_x.select_rows(&region.target_rows);
    let mut report = target_risk_lower_bound(candidate, proxy, &source_sub, &target_sub)?;
    report.region_alpha = Some(alpha);
    report.region_fraction_target =
        Some(region.target_rows.len() as f64 / target_x.rows() as f64);
    Ok(report)
}

/// Full-service variant for labeled-target experiments: the restricted bound
/// plus the candidate's actual accuracy on the restricted target rows.
/// Alpha = 0 gives the unrestricted bound with the plain target accuracy.
pub fn detection_report(
    candidate: &LinearModel,
    proxy: &LinearModel,
    source: &Dataset,
    target: &Dataset,
    alpha: f64,
) -> Result<DetectionReport, DetectError> {
    let region = restrict_region(proxy, source, &target.x, alpha)?;
    let source_sub = source.select(&region.source_rows);
    let target_sub = target.select(&region.target_rows);
    let mut report = target_risk_lower_bound(candidate, proxy, &source_sub, &target_sub.x)?;
    report.region_alpha = Some(alpha);
    report.region_fraction_target =
        Some(region.target_rows.len() as f64 / target.len() as f64);
    let preds = candidate.predict(&target_sub.x);
    let correct = preds.iter().zip(&target_sub.y).filter(|(a, b)| a == b).count();
    report.actual_target_acc = Some(correct as f64 / target_sub.len() as f64);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Matrix;

    /// Binary model predicting class 2 iff w . x + b > 0.
    fn threshold_model(w: Vec<f64>, b: f64) -> LinearModel {
        let p = w.len();
        let mut a = Matrix::zeros(2, p);
        for (j, v) in w.into_iter().enumerate() {
            a.set(1, j, v);
        }
        LinearModel { a, b: vec![0.0, b] }
    }

    fn column(values: &[f64]) -> Matrix {
        Matrix::from_rows(values.iter().map(|&v| vec![v]).collect())
    }

    #[test]
    fn self_comparison_gives_negative_source_risk() {
        let model = threshold_model(vec![1.0], 0.0);
        let source = Dataset {
            x: column(&[1.0, 2.0, -1.0, -2.0]),
            // one mislabeled row: risk 0.25
            y: vec![2, 1, 1, 1],
            domain_id: 1,
        };
        let target_x = column(&[0.5, -0.5]);
        let report = target_risk_lower_bound(&model, &model, &source, &target_x).unwrap();
        assert_eq!(report.disagreement_source, 0.0);
        assert_eq!(report.disagreement_target, 0.0);
        assert!((report.risk_lower_bound + 0.25).abs() < 1e-15);
        assert!((report.accuracy_upper_bound - 1.25).abs() < 1e-15);
        assert!((report.candidate_source_acc - 0.75).abs() < 1e-15);
    }

    #[test]
    fn constructed_target_disagreement_shifts_the_bound() {
        // Proxy ignores x2; candidate subtracts 2 x2. On the source (x2 = 0)
        // they agree and are perfect; on the target they disagree exactly on
        // the 4 rows out of 10 with x2 = 1.
        let proxy = threshold_model(vec![1.0, 0.0], 0.0);
        let candidate = threshold_model(vec![1.0, -2.0], 0.0);
        let source = Dataset {
            x: Matrix::from_rows(vec![
                vec![1.0, 0.0],
                vec![-1.0, 0.0],
                vec![2.0, 0.0],
                vec![-2.0, 0.0],
            ]),
            y: vec![2, 1, 2, 1],
            domain_id: 1,
        };
        let mut rows = vec![vec![1.0, 0.0]; 6];
        rows.extend(vec![vec![1.0, 1.0]; 4]);
        let target_x = Matrix::from_rows(rows);
        let report = target_risk_lower_bound(&candidate, &proxy, &source, &target_x).unwrap();
        assert_eq!(report.proxy_source_risk, 0.0);
        assert_eq!(report.disagreement_source, 0.0);
        assert!((report.disagreement_target - 0.4).abs() < 1e-15);
        assert!((report.risk_lower_bound - 0.4).abs() < 1e-15);
    }

    #[test]
    fn empty_inputs_are_rejected() {
        let model = threshold_model(vec![1.0], 0.0);
        let empty = Dataset { x: Matrix::zeros(0, 1), y: vec![], domain_id: 1 };
        let ok = Dataset { x: column(&[1.0]), y: vec![2], domain_id: 1 };
        assert_eq!(
            target_risk_lower_bound(&model, &model, &empty, &column(&[1.0])).unwrap_err(),
            DetectError::EmptyDataset
        );
        assert_eq!(
            target_risk_lower_bound(&model, &model, &ok, &Matrix::zeros(0, 1)).unwrap_err(),
            DetectError::EmptyDataset
        );
    }

    #[test]
    fn region_hand_quantile_case() {
        // Max-softmax probabilities 0.5, 0.6, 0.9, 0.95 on the target:
        // alpha = 0.5 puts the threshold at 0.6 and keeps the top three.
        let proxy = threshold_model(vec![1.0], 0.0);
        let logit = |p: f64| (p / (1.0 - p)).ln();
        let target_x = column(&[0.0, logit(0.6), logit(0.9), logit(0.95)]);
        let source = Dataset {
            x: column(&[logit(0.7), 0.0, logit(0.99)]),
            y: vec![2, 1, 2],
            domain_id: 1,
        };
        let region = restrict_region(&proxy, &source, &target_x, 0.5).unwrap();
        assert_eq!(region.target_rows, vec![1, 2, 3]);
        assert!((region.threshold - 0.6).abs() < 1e-12);
        // source rows 0 and 2 have confidence 0.7 and 0.99, row 1 only 0.5
        assert_eq!(region.source_rows, vec![0, 2]);
    }

    #[test]
    fn alpha_zero_keeps_everything_even_low_confidence_sources() {
        let proxy = threshold_model(vec![1.0], 0.0);
        // source confidence 0.5 is below every target confidence
        let source = Dataset { x: column(&[0.0, 0.0]), y: vec![1, 2], domain_id: 1 };
        let logit = |p: f64| (p / (1.0 - p)).ln();
        let target_x = column(&[logit(0.9), logit(0.8)]);
        let region = restrict_region(&proxy, &source, &target_x, 0.0).unwrap();
        assert_eq!(region.source_rows, vec![0, 1]);
        assert_eq!(region.target_rows, vec![0, 1]);

        let unrestricted =
            target_risk_lower_bound(&proxy, &proxy, &source, &target_x).unwrap();
        let restricted = restricted_bound(&proxy, &proxy, &source, &target_x, 0.0).unwrap();
        assert_eq!(restricted.risk_lower_bound, unrestricted.risk_lower_bound);
        assert_eq!(restricted.region_alpha, Some(0.0));
        assert_eq!(restricted.region_fraction_target, Some(1.0));
    }

    #[test]
    fn empty_source_region_is_reported() {
        let proxy = threshold_model(vec![1.0], 0.0);
        let source = Dataset { x: column(&[0.0, 0.0]), y: vec![1, 2], domain_id: 1 };
        let logit = |p: f64| (p / (1.0 - p)).ln();
        let target_x = column(&[logit(0.9); 4]);
        assert_eq!(
            restrict_region(&proxy, &source, &target_x, 0.25).unwrap_err(),
            DetectError::EmptyRegion("source")
        );
    }

    #[test]
    fn region_fraction_is_monotone_in_alpha() {
        let proxy = threshold_model(vec![1.0], 0.0);
        let mut rng = crate::numerics::Rng::new(3);
        let source = Dataset {
            x: column(&(0..50).map(|_| rng.normal(0.0, 2.0)).collect::<Vec<_>>()),
            y: (0..50).map(|i| 1 + i % 2).collect(),
            domain_id: 1,
        };
        let target_x = column(&(0..80).map(|_| rng.normal(0.5, 2.0)).collect::<Vec<_>>());
        let mut last = f64::INFINITY;
        for alpha in [0.0, 0.25, 0.5, 0.75, 0.9] {
            let report = restricted_bound(&proxy, &proxy, &source, &target_x, alpha).unwrap();
            let frac = report.region_fraction_target.unwrap();
            assert!(frac <= last + 1e-15, "fraction grew at alpha {alpha}");
            assert!(
                (report.accuracy_upper_bound - (1.0 - report.risk_lower_bound)).abs() == 0.0
            );
            last = frac;
        }
    }

    #[test]
    fn perfect_proxy_on_region_bounds_itself_at_one() {
        // Candidate = proxy, proxy perfectly labels the region: the bound
        // collapses to accuracy_upper_bound = 1 exactly.
        let proxy = threshold_model(vec![1.0], 0.0);
        let logit = |p: f64| (p / (1.0 - p)).ln();
        let source = Dataset {
            x: column(&[logit(0.95), -logit(0.95), 0.0]),
            // the low-confidence row is mislabeled, but it falls outside the region
            y: vec![2, 1, 2],
            domain_id: 1,
        };
        let target_x = column(&[logit(0.9), -logit(0.9)]);
        let report = restricted_bound(&proxy, &proxy, &source, &target_x, 0.25).unwrap();
        assert_eq!(report.proxy_source_risk, 0.0);
        assert_eq!(report.accuracy_upper_bound, 1.0);
    }

    #[test]
    fn labeled_report_carries_actual_region_accuracy() {
        let proxy = threshold_model(vec![1.0], 0.0);
        let logit = |p: f64| (p / (1.0 - p)).ln();
        let target = Dataset {
            x: column(&[logit(0.9), -logit(0.9), 0.0, logit(0.8)]),
            y: vec![2, 1, 2, 1],
            domain_id: 2,
        };
        let source = Dataset {
            x: column(&[logit(0.9), -logit(0.9)]),
            y: vec![2, 1],
            domain_id: 1,
        };
        // alpha = 0: actual accuracy over all four target rows; the proxy
        // gets rows 0, 1 right, row 2 wrong (tie goes to class 1, label 2)
        // and row 3 wrong.
        let report = detection_report(&proxy, &proxy, &source, &target, 0.0).unwrap();
        assert_eq!(report.actual_target_acc, Some(0.5));
        // alpha = 0.5: threshold is the second-smallest confidence; rows with
        // confidence 0.5 (x = 0) drop out.
        let report = detection_report(&proxy, &proxy, &source, &target, 0.5).unwrap();
        let frac = report.region_fraction_target.unwrap();
        assert!(frac <= 0.75 + 1e-15);
        assert!(report.actual_target_acc.unwrap() > 0.5);
    }
}
