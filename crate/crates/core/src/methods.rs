//! Training orchestration for all the domain-adaptation objectives: plain and
//! pooled risk minimization, conditional and marginal distribution matching,
//! joint matching with frozen reference features, importance-weighted
//! multi-stage variants, and the IRM / V-REx / groupDRO baselines.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::label_shift::{
    confusion_matrix, estimate_weights, predicted_target_distribution, LabelShiftError,
};
use crate::model::{
    accumulate_score_grad, adam_step, weighted_cross_entropy_and_grad, zero_one_risk, AdamState,
    Grads, ImportanceWeights, LinearModel,
};
use crate::numerics::{softmax, Matrix, Rng};
use crate::penalty::{
    cip_penalty, dip_penalty, joint_dip_penalty, FeatureBatch, PenaltyError, PenaltySpec,
};
use crate::scm::{Dataset, ScenarioSpec};
use crate::stream;

#[derive(Debug, Error)]
pub enum MethodError {
    #[error("penalty evaluation failed: {0}")]
    Penalty(#[from] PenaltyError),
    #[error("importance weight estimation failed: {0}")]
    LabelShift(#[from] LabelShiftError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("class {class} degenerate in domain {domain}")]
    DegenerateClass { class: usize, domain: usize },
}

/// Every trainable objective. Single-source methods train on the scenario's
/// designated source domain; pooled and invariance methods use all sources.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    Tar,
    #[serde(rename = "ERM")]
    Erm,
    #[serde(rename = "ERM-Pool")]
    ErmPool,
    #[serde(rename = "DIP")]
    Dip,
    #[serde(rename = "DIP-Pool")]
    DipPool,
    #[serde(rename = "CIP")]
    Cip,
    #[serde(rename = "IW-ERM")]
    IwErm,
    #[serde(rename = "IW-CIP")]
    IwCip,
    #[serde(rename = "IW-DIP")]
    IwDip,
    #[serde(rename = "JointDIP")]
    JointDip,
    #[serde(rename = "JointDIP-Pool")]
    JointDipPool,
    #[serde(rename = "IW-JointDIP")]
    IwJointDip,
    #[serde(rename = "IRM")]
    Irm,
    #[serde(rename = "V-REx")]
    Vrex,
    #[serde(rename = "groupDRO")]
    GroupDro,
}

impl Method {
    pub const ALL: [Method; 15] = [
        Method::Tar,
        Method::Erm,
        Method::ErmPool,
        Method::Dip,
        Method::DipPool,
        Method::Cip,
        Method::IwErm,
        Method::IwCip,
        Method::IwDip,
        Method::JointDip,
        Method::JointDipPool,
        Method::IwJointDip,
        Method::Irm,
        Method::Vrex,
        Method::GroupDro,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Tar => "Tar",
            Method::Erm => "ERM",
            Method::ErmPool => "ERM-Pool",
            Method::Dip => "DIP",
            Method::DipPool => "DIP-Pool",
            Method::Cip => "CIP",
            Method::IwErm => "IW-ERM",
            Method::IwCip => "IW-CIP",
            Method::IwDip => "IW-DIP",
            Method::JointDip => "JointDIP",
            Method::JointDipPool => "JointDIP-Pool",
            Method::IwJointDip => "IW-JointDIP",
            Method::Irm => "IRM",
            Method::Vrex => "V-REx",
            Method::GroupDro => "groupDRO",
        }
    }

    /// Pre-stage whose trained model feeds the main stage: the reference
    /// feature provider for joint matching, or the weight-estimation proxy.
    pub fn proxy(&self) -> Option<Method> {
        match self {
            Method::IwErm => Some(Method::ErmPool),
            Method::IwCip | Method::IwDip | Method::IwJointDip => Some(Method::Cip),
            Method::JointDip | Method::JointDipPool => Some(Method::Cip),
            _ => None,
        }
    }

    /// Methods whose risk terms are reweighted by estimated label ratios.
    pub fn uses_importance_weights(&self) -> bool {
        matches!(self, Method::IwErm | Method::IwCip | Method::IwDip | Method::IwJointDip)
    }

    /// Methods that train on a single designated source domain.
    pub fn single_source(&self) -> bool {
        matches!(
            self,
            Method::Erm | Method::Dip | Method::JointDip | Method::IwDip | Method::IwJointDip
        )
    }

    /// Methods whose objective includes a lambda-scaled penalty term.
    pub fn uses_lambda(&self) -> bool {
        matches!(
            self,
            Method::Dip
                | Method::DipPool
                | Method::Cip
                | Method::IwCip
                | Method::IwDip
                | Method::JointDip
                | Method::JointDipPool
                | Method::IwJointDip
                | Method::Irm
                | Method::Vrex
        )
    }

    pub fn uses_eta(&self) -> bool {
        matches!(self, Method::GroupDro)
    }

    /// Methods that draw target covariate batches during training.
    fn matches_target(&self) -> bool {
        matches!(
            self,
            Method::Dip
                | Method::DipPool
                | Method::JointDip
                | Method::JointDipPool
                | Method::IwDip
                | Method::IwJointDip
        )
    }

    /// Methods whose main-stage penalty needs at least two source domains.
    fn needs_multi_source(&self) -> bool {
        matches!(self, Method::Cip | Method::IwCip)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        for m in Method::ALL {
            let canon: String =
                m.name().chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
            if key == canon {
                return Ok(m);
            }
        }
        Err(format!("unknown method `{s}`"))
    }
}

/// Full recipe for one training run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub method: Method,
    /// Distance kind, bandwidth policy, and lambda of the main-stage penalty.
    pub penalty: PenaltySpec,
    /// Lambda used by the conditional-invariance pre-stage of staged methods.
    pub lambda_cip: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub groupdro_eta: f64,
    /// Split each source into contiguous thirds (proxy / weight estimation /
    /// final stage) for importance-weighted methods. Off by default: reusing
    /// the full dataset across stages performs better in practice.
    pub split: bool,
}

impl MethodSpec {
    pub fn defaults(method: Method) -> Self {
        MethodSpec {
            method,
            penalty: PenaltySpec::mean(1.0),
            lambda_cip: 1.0,
            epochs: 50,
            batch_size: 100,
            lr: 0.01,
            groupdro_eta: 0.01,
            split: false,
        }
    }
}

/// Frozen models from earlier pipeline stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageModels {
    pub proxy: LinearModel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub src_acc: f64,
    pub tar_acc: f64,
    pub src_risk: f64,
    pub tar_risk: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStat {
    /// Mean surrogate risk part of the objective over the epoch's steps.
    pub loss: f64,
    /// Mean lambda-scaled penalty part over the epoch's steps.
    pub penalty: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainedRun {
    pub model: LinearModel,
    pub stage_models: Option<StageModels>,
    pub weights: Option<ImportanceWeights>,
    pub metrics: RunMetrics,
    pub history: Vec<EpochStat>,
}

/// One optimization step's worth of minibatches. `sources` holds the involved
/// source domains in scenario order; `source_pos` is each domain's 0-based
/// position among all M sources (used to look up its importance weights).
pub struct StepBatches {
    pub sources: Vec<SourceBatch>,
    pub target_x: Option<Matrix>,
    /// Target labels, consumed only by the oracle method.
    pub target_y: Option<Vec<usize>>,
}

pub struct SourceBatch {
    pub x: Matrix,
    pub y: Vec<usize>,
    pub source_pos: usize,
}

/// Objective value and gradient of one step, split into the surrogate risk
/// part and the lambda-scaled penalty part.
pub struct StepEval {
    pub surrogate: f64,
    pub penalty: f64,
    pub grads: Grads,
    /// Raw per-domain surrogate risks, in `batches.sources` order (filled by
    /// the multi-source objectives; used for the multiplicative-weights
    /// update and variance penalties).
    pub source_risks: Vec<f64>,
}

fn risk_weights(
    spec: &MethodSpec,
    weights: Option<&ImportanceWeights>,
    source_pos: usize,
    y: &[usize],
) -> Result<Vec<f64>, MethodError> {
    if spec.method.uses_importance_weights() {
        let iw = weights.ok_or_else(|| {
            MethodError::Config(format!("{} needs estimated importance weights", spec.method))
        })?;
        let w = &iw.per_domain[source_pos];
        Ok(y.iter().map(|&label| w[label - 1]).collect())
    } else {
        Ok(vec![1.0; y.len()])
    }
}

/// Evaluate one method's objective and analytic gradient on fixed minibatches.
/// This is the exact computation the training loop performs at each step,
/// exposed so gradients can be verified against finite differences.
pub fn step_objective(
    spec: &MethodSpec,
    model: &LinearModel,
    batches: &StepBatches,
    weights: Option<&ImportanceWeights>,
    proxy: Option<&LinearModel>,
    dro_q: Option<&[f64]>,
) -> Result<StepEval, MethodError> {
    let l = model.classes();
    let p = model.dim();
    let lambda = spec.penalty.lambda;
    let mut grads = Grads::zeros(l, p);
    let mut surrogate = 0.0;
    let mut penalty = 0.0;
    let mut source_risks = Vec::new();
    let m_count = batches.sources.len();
    let m_inv = if m_count > 0 { 1.0 / m_count as f64 } else { 0.0 };

    let need_target = |ctx: &str| -> Result<&Matrix, MethodError> {
        batches
            .target_x
            .as_ref()
            .ok_or_else(|| MethodError::Data(format!("{ctx} requires a target covariate batch")))
    };

    match spec.method {
        Method::Tar => {
            let tx = need_target("oracle training")?;
            let ty = batches
                .target_y
                .as_ref()
                .ok_or_else(|| MethodError::Data("oracle training requires target labels".into()))?;
            let (loss, g) = weighted_cross_entropy_and_grad(model, tx, ty, &vec![1.0; ty.len()]);
            surrogate = loss;
            grads.add_scaled(&g, 1.0);
        }
        Method::Erm => {
            let sb = &batches.sources[0];
            let w = risk_weights(spec, weights, sb.source_pos, &sb.y)?;
            let (loss, g) = weighted_cross_entropy_and_grad(model, &sb.x, &sb.y, &w);
            surrogate = loss;
            grads.add_scaled(&g, 1.0);
        }
        Method::ErmPool | Method::IwErm => {
            for sb in &batches.sources {
                let w = risk_weights(spec, weights, sb.source_pos, &sb.y)?;
                let (loss, g) = weighted_cross_entropy_and_grad(model, &sb.x, &sb.y, &w);
                surrogate += m_inv * loss;
                grads.add_scaled(&g, m_inv);
                source_risks.push(loss);
            }
        }
        Method::Cip | Method::IwCip => {
            // Pooled (possibly reweighted) risk plus the conditional penalty.
            let mut per_domain: Vec<Vec<FeatureBatch>> = Vec::with_capacity(m_count);
            let mut class_rows: Vec<Vec<Vec<usize>>> = Vec::with_capacity(m_count);
            for sb in &batches.sources {
                let w = risk_weights(spec, weights, sb.source_pos, &sb.y)?;
                let (loss, g) = weighted_cross_entropy_and_grad(model, &sb.x, &sb.y, &w);
                surrogate += m_inv * loss;
                grads.add_scaled(&g, m_inv);
                source_risks.push(loss);

                let scores = model.scores(&sb.x);
                let mut batches_by_class = Vec::with_capacity(l);
                let mut rows_by_class = Vec::with_capacity(l);
                for label in 1..=l {
                    let rows: Vec<usize> =
                        (0..sb.y.len()).filter(|&i| sb.y[i] == label).collect();
                    batches_by_class
                        .push(FeatureBatch::unweighted(scores.select_rows(&rows)));
                    rows_by_class.push(rows);
                }
                per_domain.push(batches_by_class);
                class_rows.push(rows_by_class);
            }
            let (value, pen_grads) = cip_penalty(&per_domain, &spec.penalty)?;
            penalty = lambda * value;
            for (di, sb) in batches.sources.iter().enumerate() {
                let mut dscores = Matrix::zeros(sb.y.len(), l);
                for (label_idx, rows) in class_rows[di].iter().enumerate() {
                    let g = &pen_grads[di][label_idx];
                    for (j, &row) in rows.iter().enumerate() {
                        let src = g.row(j);
                        dscores.row_mut(row).copy_from_slice(src);
                    }
                }
                accumulate_score_grad(&sb.x, &dscores, &mut grads, lambda);
            }
        }
        Method::Dip | Method::IwDip | Method::JointDip | Method::IwJointDip => {
            let sb = &batches.sources[0];
            let w = risk_weights(spec, weights, sb.source_pos, &sb.y)?;
            let (loss, g) = weighted_cross_entropy_and_grad(model, &sb.x, &sb.y, &w);
            surrogate = loss;
            grads.add_scaled(&g, 1.0);

            let tx = need_target("marginal matching")?;
            let feats_src = model.scores(&sb.x);
            let feats_tgt = model.scores(tx);
            let src_fb = if spec.method.uses_importance_weights() {
                FeatureBatch::weighted(feats_src, w.clone())
            } else {
                FeatureBatch::unweighted(feats_src)
            };
            let tgt_fb = FeatureBatch::unweighted(feats_tgt);

            let pair = if matches!(spec.method, Method::JointDip | Method::IwJointDip) {
                let proxy = proxy.ok_or_else(|| {
                    MethodError::Config("joint matching requires a frozen reference model".into())
                })?;
                let cic_src = proxy.scores(&sb.x);
                let cic_tgt = proxy.scores(tx);
                joint_dip_penalty(&src_fb, &tgt_fb, &cic_src, &cic_tgt, &spec.penalty)?
            } else {
                dip_penalty(&src_fb, &tgt_fb, &spec.penalty)?
            };
            penalty = lambda * pair.value;
            accumulate_score_grad(&sb.x, &pair.grad_src, &mut grads, lambda);
            accumulate_score_grad(tx, &pair.grad_tgt, &mut grads, lambda);
        }
        Method::DipPool | Method::JointDipPool => {
            let tx = need_target("marginal matching")?;
            let feats_tgt = model.scores(tx);
            let joint = spec.method == Method::JointDipPool;
            let cic_tgt = if joint {
                let proxy = proxy.ok_or_else(|| {
                    MethodError::Config("joint matching requires a frozen reference model".into())
                })?;
                Some(proxy.scores(tx))
            } else {
                None
            };
            for sb in &batches.sources {
                let w = risk_weights(spec, weights, sb.source_pos, &sb.y)?;
                let (loss, g) = weighted_cross_entropy_and_grad(model, &sb.x, &sb.y, &w);
                surrogate += m_inv * loss;
                grads.add_scaled(&g, m_inv);
                source_risks.push(loss);

                let src_fb = FeatureBatch::unweighted(model.scores(&sb.x));
                let tgt_fb = FeatureBatch::unweighted(feats_tgt.clone());
                let pair = if joint {
                    let proxy = proxy.unwrap();
                    let cic_src = proxy.scores(&sb.x);
                    joint_dip_penalty(&src_fb, &tgt_fb, &cic_src, cic_tgt.as_ref().unwrap(), &spec.penalty)?
                } else {
                    dip_penalty(&src_fb, &tgt_fb, &spec.penalty)?
                };
                penalty += lambda * m_inv * pair.value;
                accumulate_score_grad(&sb.x, &pair.grad_src, &mut grads, lambda * m_inv);
                accumulate_score_grad(tx, &pair.grad_tgt, &mut grads, lambda * m_inv);
            }
        }
        Method::Irm => {
            for sb in &batches.sources {
                let n = sb.y.len();
                let (loss, g) = weighted_cross_entropy_and_grad(model, &sb.x, &sb.y, &vec![1.0; n]);
                surrogate += m_inv * loss;
                grads.add_scaled(&g, m_inv);
                source_risks.push(loss);

                // Scalar-multiplier penalty: D = d/dw R(w * scores) at w = 1,
                // which is the batch mean of (sum_l p_l s_l - s_y).
                let scores = model.scores(&sb.x);
                let mut d_value = 0.0;
                let mut d_grad = Matrix::zeros(n, l);
                for i in 0..n {
                    let row = scores.row(i);
                    let probs = softmax(row);
                    let target = sb.y[i] - 1;
                    let sbar: f64 = probs.iter().zip(row).map(|(p, s)| p * s).sum();
                    d_value += (sbar - row[target]) / n as f64;
                    let dg = d_grad.row_mut(i);
                    for k in 0..l {
                        let indicator = if k == target { 1.0 } else { 0.0 };
                        dg[k] = ((probs[k] - indicator) + probs[k] * (row[k] - sbar)) / n as f64;
                    }
                }
                penalty += lambda * m_inv * d_value * d_value;
                accumulate_score_grad(&sb.x, &d_grad, &mut grads, lambda * m_inv * 2.0 * d_value);
            }
        }
        Method::Vrex => {
            let mut per: Vec<(f64, Grads)> = Vec::with_capacity(m_count);
            for sb in &batches.sources {
                let n = sb.y.len();
                let pair = weighted_cross_entropy_and_grad(model, &sb.x, &sb.y, &vec![1.0; n]);
                source_risks.push(pair.0);
                per.push(pair);
            }
            let mean: f64 = per.iter().map(|(r, _)| r).sum::<f64>() * m_inv;
            let var: f64 = per.iter().map(|(r, _)| (r - mean) * (r - mean)).sum::<f64>() * m_inv;
            surrogate = mean;
            penalty = lambda * var;
            for (r, g) in &per {
                let coeff = m_inv + lambda * 2.0 * m_inv * (r - mean);
                grads.add_scaled(g, coeff);
            }
        }
        Method::GroupDro => {
            let q = dro_q.ok_or_else(|| {
                MethodError::Config("multiplicative domain weights state missing".into())
            })?;
            if q.len() != m_count {
                return Err(MethodError::Config("domain weight count mismatch".into()));
            }
            for (sb, &qm) in batches.sources.iter().zip(q) {
                let n = sb.y.len();
                let (loss, g) = weighted_cross_entropy_and_grad(model, &sb.x, &sb.y, &vec![1.0; n]);
                surrogate += qm * loss;
                grads.add_scaled(&g, qm);
                source_risks.push(loss);
            }
        }
    }

    Ok(StepEval { surrogate, penalty, grads, source_risks })
}

/// Multiplicative-weights update: q_m <- q_m * exp(eta * risk_m), then
/// normalize back onto the simplex. The shared exponent shift keeps the
/// update overflow-safe without changing the result.
pub fn groupdro_update(q: &mut [f64], risks: &[f64], eta: f64) {
    assert_eq!(q.len(), risks.len());
    let max = risks.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for (qm, &r) in q.iter_mut().zip(risks) {
        *qm *= (eta * (r - max)).exp();
    }
    let total: f64 = q.iter().sum();
    for qm in q.iter_mut() {
        *qm /= total;
    }
}

fn validate_inputs(
    spec: &MethodSpec,
    scenario: &ScenarioSpec,
    data: &[Dataset],
) -> Result<(), MethodError> {
    scenario.validate().map_err(|e| MethodError::Config(e.to_string()))?;
    if !(spec.penalty.lambda >= 0.0 && spec.penalty.lambda.is_finite()) {
        return Err(MethodError::Config("penalty lambda must be finite and >= 0".into()));
    }
    if !(spec.lambda_cip >= 0.0 && spec.lambda_cip.is_finite()) {
        return Err(MethodError::Config("lambda_cip must be finite and >= 0".into()));
    }
    if spec.batch_size == 0 {
        return Err(MethodError::Config("batch_size must be >= 1".into()));
    }
    if !(spec.lr > 0.0 && spec.lr.is_finite()) {
        return Err(MethodError::Config("learning rate must be finite and > 0".into()));
    }
    if spec.method.uses_eta() && !(spec.groupdro_eta > 0.0 && spec.groupdro_eta.is_finite()) {
        return Err(MethodError::Config("groupdro_eta must be finite and > 0".into()));
    }

    let m = scenario.num_source_domains;
    if data.len() != m + 1 {
        return Err(MethodError::Data(format!(
            "expected {} datasets (sources plus target), got {}",
            m + 1,
            data.len()
        )));
    }
    let mut seen = vec![false; m + 1];
    for ds in data {
        if ds.domain_id < 1 || ds.domain_id > m + 1 {
            return Err(MethodError::Data(format!("domain id {} out of range", ds.domain_id)));
        }
        if seen[ds.domain_id - 1] {
            return Err(MethodError::Data(format!("duplicate domain id {}", ds.domain_id)));
        }
        seen[ds.domain_id - 1] = true;
        if ds.is_empty() {
            return Err(MethodError::Data(format!("domain {} is empty", ds.domain_id)));
        }
        if ds.x.cols() != scenario.dimension {
            return Err(MethodError::Data(format!(
                "domain {} has dimension {}, scenario says {}",
                ds.domain_id,
                ds.x.cols(),
                scenario.dimension
            )));
        }
        if ds.y.iter().any(|&y| y < 1 || y > scenario.classes) {
            return Err(MethodError::Data(format!("domain {} has out-of-range labels", ds.domain_id)));
        }
    }

    let needs_multi =
        spec.method.needs_multi_source() || spec.method.proxy() == Some(Method::Cip);
    if needs_multi && m < 2 {
        return Err(MethodError::Config(format!(
            "{} needs at least two source domains",
            spec.method
        )));
    }
    if spec.split && spec.method.uses_importance_weights() {
        for ds in data.iter().filter(|d| d.domain_id != scenario.target_domain_id()) {
            if ds.len() < 3 {
                return Err(MethodError::Data(format!(
                    "domain {} too small to split into thirds",
                    ds.domain_id
                )));
            }
        }
    }
    Ok(())
}

/// Row indices of the k-th contiguous third (k in 0..3) of an n-row dataset.
fn third_rows(n: usize, k: usize) -> Vec<usize> {
    let bounds = [0, n / 3, 2 * n / 3, n];
    (bounds[k]..bounds[k + 1]).collect()
}

/// Train one method end to end. Deterministic given (spec, scenario, data,
/// seed): staged methods re-enter this function for their pre-stage with the
/// same seed, so the frozen proxy inside the result is bit-identical to a
/// standalone run of the proxy method.
pub fn train_method(
    spec: &MethodSpec,
    scenario: &ScenarioSpec,
    data: &[Dataset],
    seed: u64,
) -> Result<TrainedRun, MethodError> {
    train_method_with_proxy(spec, scenario, data, seed, None)
}

/// `train_method` with an optional pre-trained proxy model. Passing the model
/// a standalone pre-stage run would have produced (same proxy method, seed,
/// penalty kind, and lambda_cip) skips the redundant retrain and leaves every
/// downstream draw untouched, so results are bit-identical either way. The
/// frozen model is ignored under `split`, where the pre-stage must see only
/// its own third of each source.
pub fn train_method_with_proxy(
    spec: &MethodSpec,
    scenario: &ScenarioSpec,
    data: &[Dataset],
    seed: u64,
    frozen_proxy: Option<&LinearModel>,
) -> Result<TrainedRun, MethodError> {
    validate_inputs(spec, scenario, data)?;
    let target_id = scenario.target_domain_id();
    let target = data.iter().find(|d| d.domain_id == target_id).unwrap();
    let mut sources: Vec<&Dataset> =
        data.iter().filter(|d| d.domain_id != target_id).collect();
    sources.sort_by_key(|d| d.domain_id);

    let split_active = spec.split && spec.method.uses_importance_weights();

    // Pre-stage: train the proxy on the same seed (and, when splitting, on
    // the first third of each source).
    let mut proxy_model = None;
    if let Some(proxy_method) = spec.method.proxy() {
        if let (Some(frozen), false) = (frozen_proxy, split_active) {
            proxy_model = Some(frozen.clone());
        } else {
            let proxy_spec = MethodSpec {
                method: proxy_method,
                penalty: PenaltySpec { lambda: spec.lambda_cip, ..spec.penalty },
                lambda_cip: 0.0,
                split: false,
                ..*spec
            };
            let proxy_run = if split_active {
                let mut staged: Vec<Dataset> =
                    sources.iter().map(|s| s.select(&third_rows(s.len(), 0))).collect();
                staged.push(target.clone());
                train_method(&proxy_spec, scenario, &staged, seed)?
            } else {
                train_method(&proxy_spec, scenario, data, seed)?
            };
            proxy_model = Some(proxy_run.model);
        }
    }

    // Weight-estimation stage for the importance-weighted methods.
    let mut weights = None;
    if spec.method.uses_importance_weights() {
        let proxy = proxy_model.as_ref().unwrap();
        let mu = predicted_target_distribution(proxy, &target.x)?;
        let mut per_domain = Vec::with_capacity(sources.len());
        for src in &sources {
            let conf = if split_active {
                confusion_matrix(proxy, &src.select(&third_rows(src.len(), 1)))?
            } else {
                confusion_matrix(proxy, src)?
            };
            per_domain.push(estimate_weights(&conf, &mu)?);
        }
        weights = Some(ImportanceWeights { per_domain });
    }

    // Main stage. Staged methods get a fresh rng substream so their training
    // randomness is independent of the pre-stage's.
    let stage_label =
        if spec.method.proxy().is_some() { stream::TRAIN_FINAL } else { stream::TRAIN_MAIN };
    let mut rng = Rng::new(seed).substream(stage_label);

    let final_sources_owned: Option<Vec<Dataset>> = if split_active {
        Some(sources.iter().map(|s| s.select(&third_rows(s.len(), 2))).collect())
    } else {
        None
    };
    let train_sources: Vec<&Dataset> = match &final_sources_owned {
        Some(owned) => owned.iter().collect(),
        None => sources.clone(),
    };

    let (model, history) = run_loop(
        spec,
        scenario,
        &train_sources,
        target,
        weights.as_ref(),
        proxy_model.as_ref(),
        &mut rng,
    )?;

    let metrics = compute_metrics(spec.method, scenario, &model, &sources, target);
    Ok(TrainedRun {
        model,
        stage_models: proxy_model.map(|proxy| StageModels { proxy }),
        weights,
        metrics,
        history,
    })
}

fn run_loop(
    spec: &MethodSpec,
    scenario: &ScenarioSpec,
    sources: &[&Dataset],
    target: &Dataset,
    weights: Option<&ImportanceWeights>,
    proxy: Option<&LinearModel>,
    rng: &mut Rng,
) -> Result<(LinearModel, Vec<EpochStat>), MethodError> {
    let method = spec.method;
    let (l, p) = (scenario.classes, scenario.dimension);
    let dip_idx = scenario.dip_source_index - 1;

    let involved: Vec<usize> = if method == Method::Tar {
        Vec::new()
    } else if method.single_source() {
        vec![dip_idx]
    } else {
        (0..sources.len()).collect()
    };
    let target_involved = method.matches_target() || method == Method::Tar;

    struct Batcher {
        perm: Vec<usize>,
        batch: usize,
    }
    let make_batcher = |n: usize| Batcher {
        perm: (0..n).collect(),
        batch: spec.batch_size.min(n),
    };
    let mut source_batchers: Vec<Batcher> =
        involved.iter().map(|&pos| make_batcher(sources[pos].len())).collect();
    let mut target_batcher =
        if target_involved { Some(make_batcher(target.len())) } else { None };

    let steps = {
        let mut s = usize::MAX;
        for b in &source_batchers {
            s = s.min(b.perm.len() / b.batch);
        }
        if let Some(b) = &target_batcher {
            s = s.min(b.perm.len() / b.batch);
        }
        s.max(1)
    };

    let mut model = LinearModel::init(p, l, rng);
    let mut adam = AdamState::new(p, l, spec.lr);
    let mut dro_q = vec![1.0 / sources.len().max(1) as f64; sources.len()];
    let mut history = Vec::with_capacity(spec.epochs);

    for _epoch in 0..spec.epochs {
        for b in &mut source_batchers {
            rng.shuffle(&mut b.perm);
        }
        if let Some(b) = &mut target_batcher {
            rng.shuffle(&mut b.perm);
        }

        let mut loss_sum = 0.0;
        let mut pen_sum = 0.0;
        for step in 0..steps {
            let mut step_sources = Vec::with_capacity(involved.len());
            for (bi, &pos) in involved.iter().enumerate() {
                let b = &source_batchers[bi];
                let rows = &b.perm[step * b.batch..step * b.batch + b.batch];
                step_sources.push(SourceBatch {
                    x: sources[pos].x.select_rows(rows),
                    y: rows.iter().map(|&i| sources[pos].y[i]).collect(),
                    source_pos: pos,
                });
            }
            let (target_x, target_y) = match &target_batcher {
                Some(b) => {
                    let rows = &b.perm[step * b.batch..step * b.batch + b.batch];
                    let x = target.x.select_rows(rows);
                    let y = if method == Method::Tar {
                        Some(rows.iter().map(|&i| target.y[i]).collect())
                    } else {
                        None
                    };
                    (Some(x), y)
                }
                None => (None, None),
            };
            let batches = StepBatches { sources: step_sources, target_x, target_y };

            let eval = if method == Method::GroupDro {
                let probe = step_objective(spec, &model, &batches, weights, proxy, Some(&dro_q))?;
                groupdro_update(&mut dro_q, &probe.source_risks, spec.groupdro_eta);
                step_objective(spec, &model, &batches, weights, proxy, Some(&dro_q))?
            } else {
                step_objective(spec, &model, &batches, weights, proxy, None)?
            };
            adam_step(&mut adam, &mut model, &eval.grads);
            loss_sum += eval.surrogate;
            pen_sum += eval.penalty;
        }
        history.push(EpochStat {
            loss: loss_sum / steps as f64,
            penalty: pen_sum / steps as f64,
        });
    }

    Ok((model, history))
}

fn pooled_accuracy(model: &LinearModel, datasets: &[&Dataset]) -> f64 {
    let mut correct = 0usize;
    let mut total = 0usize;
    for ds in datasets {
        let preds = model.predict(&ds.x);
        correct += preds.iter().zip(&ds.y).filter(|(a, b)| a == b).count();
        total += ds.len();
    }
    correct as f64 / total as f64
}

fn compute_metrics(
    method: Method,
    scenario: &ScenarioSpec,
    model: &LinearModel,
    sources: &[&Dataset],
    target: &Dataset,
) -> RunMetrics {
    let src_acc = if method.single_source() {
        pooled_accuracy(model, &sources[scenario.dip_source_index - 1..scenario.dip_source_index])
    } else {
        pooled_accuracy(model, sources)
    };
    let tar_risk = zero_one_risk(model, target);
    RunMetrics { src_acc, tar_acc: 1.0 - tar_risk, src_risk: 1.0 - src_acc, tar_risk }
}

/// Cross-domain conditional-mean deviation diagnostic. For each class y it
/// averages, over domains m >= 2, the Mahalanobis-type statistic
/// delta' Sigma^{-1} delta where delta is the class-y feature-mean difference
/// between domain m and domain 1 and Sigma is the class-y feature covariance
/// in domain m (ridge 1e-8 * trace/q added to the diagonal). Values near zero
/// indicate the features are close to conditionally invariant.
pub fn deviation_diagnostic(
    features: &[Matrix],
    labels: &[Vec<usize>],
    classes: usize,
) -> Result<Vec<f64>, MethodError> {
    let m = features.len();
    if m < 2 {
        return Err(MethodError::Config("diagnostic needs at least two domains".into()));
    }
    if labels.len() != m {
        return Err(MethodError::Data("feature/label domain count mismatch".into()));
    }
    let q = features[0].cols();
    for (f, y) in features.iter().zip(labels) {
        if f.cols() != q {
            return Err(MethodError::Data("feature width mismatch across domains".into()));
        }
        if f.rows() != y.len() {
            return Err(MethodError::Data("feature/label row count mismatch".into()));
        }
    }

    let class_mean = |f: &Matrix, rows: &[usize]| -> Vec<f64> {
        let mut mean = vec![0.0; q];
        for &i in rows {
            for (acc, v) in mean.iter_mut().zip(f.row(i)) {
                *acc += v;
            }
        }
        for v in &mut mean {
            *v /= rows.len() as f64;
        }
        mean
    };

    let mut out = Vec::with_capacity(classes);
    for label in 1..=classes {
        let rows_per_domain: Vec<Vec<usize>> = labels
            .iter()
            .map(|ys| (0..ys.len()).filter(|&i| ys[i] == label).collect())
            .collect();
        for (d, rows) in rows_per_domain.iter().enumerate() {
            if rows.len() < 2 {
                return Err(MethodError::DegenerateClass { class: label, domain: d + 1 });
            }
        }
        let base_mean = class_mean(&features[0], &rows_per_domain[0]);
        let mut acc = 0.0;
        for d in 1..m {
            let rows = &rows_per_domain[d];
            let mean = class_mean(&features[d], rows);
            let delta: Vec<f64> = mean.iter().zip(&base_mean).map(|(a, b)| a - b).collect();

            // Sample covariance of the class rows in domain d.
            let mut cov = Matrix::zeros(q, q);
            for &i in rows {
                let row = features[d].row(i);
                for a in 0..q {
                    let da = row[a] - mean[a];
                    for b in 0..q {
                        let v = cov.get(a, b) + da * (row[b] - mean[b]);
                        cov.set(a, b, v);
                    }
                }
            }
            cov.scale(1.0 / (rows.len() - 1) as f64);
            let trace: f64 = (0..q).map(|i| cov.get(i, i)).sum();
            let ridge = 1e-8 * trace / q as f64;
            for i in 0..q {
                cov.set(i, i, cov.get(i, i) + ridge);
            }
            let v = crate::numerics::solve_linear_system(&cov, &delta).map_err(|e| {
                MethodError::Data(format!("class {label} covariance in domain {} : {e}", d + 1))
            })?;
            acc += delta.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>();
        }
        out.push(acc / (m - 1) as f64);
    }
    Ok(out)
}

/// Diagnostic evaluated on a model's score features over labeled datasets.
pub fn deviation_diagnostic_for_model(
    model: &LinearModel,
    domains: &[Dataset],
) -> Result<Vec<f64>, MethodError> {
    let features: Vec<Matrix> = domains.iter().map(|d| model.scores(&d.x)).collect();
    let labels: Vec<Vec<usize>> = domains.iter().map(|d| d.y.clone()).collect();
    deviation_diagnostic(&features, &labels, model.classes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scm::{generate_scenario_data, DomainMechanism, NoiseBlock};

    fn tiny_scenario(num_sources: usize, n: usize) -> (ScenarioSpec, Vec<Dataset>) {
        let mechanisms = (0..=num_sources)
            .map(|d| DomainMechanism {
                label_probs: vec![0.5, 0.5],
                mean_fn: Matrix::from_rows(vec![
                    vec![-1.0 + 0.1 * d as f64, -1.0],
                    vec![1.0 + 0.1 * d as f64, 1.0],
                ]),
                noise_sd_per_block: vec![NoiseBlock { lo: 1, hi: 2, sd: 0.3 }],
            })
            .collect();
        let spec = ScenarioSpec {
            name: "tiny".into(),
            num_source_domains: num_sources,
            samples_per_domain: n,
            dimension: 2,
            classes: 2,
            mechanisms,
            coordinate_groups: vec![],
            dip_source_index: num_sources,
        };
        spec.validate().unwrap();
        let data = generate_scenario_data(&spec, 7);
        (spec, data)
    }

    fn quick_spec(method: Method) -> MethodSpec {
        MethodSpec { epochs: 3, batch_size: 25, ..MethodSpec::defaults(method) }
    }

    #[test]
    fn names_round_trip() {
        for m in Method::ALL {
            let parsed: Method = m.name().parse().unwrap();
            assert_eq!(parsed, m);
            let relaxed: Method = m.name().to_lowercase().parse().unwrap();
            assert_eq!(relaxed, m);
        }
        assert_eq!("iw_cip".parse::<Method>().unwrap(), Method::IwCip);
        assert_eq!("vrex".parse::<Method>().unwrap(), Method::Vrex);
        assert!("iw-everything".parse::<Method>().is_err());
    }

    #[test]
    fn injected_proxy_reproduces_the_internal_pre_stage_exactly() {
        let (scenario, data) = tiny_scenario(3, 60);
        let mut spec = quick_spec(Method::JointDip);
        spec.penalty = PenaltySpec::mmd(0.1);
        spec.lambda_cip = 0.1;

        let internal = train_method(&spec, &scenario, &data, 9).unwrap();

        let cip_spec = MethodSpec {
            penalty: PenaltySpec { lambda: spec.lambda_cip, ..spec.penalty },
            ..quick_spec(Method::Cip)
        };
        let cip = train_method(&cip_spec, &scenario, &data, 9).unwrap();
        let injected =
            train_method_with_proxy(&spec, &scenario, &data, 9, Some(&cip.model)).unwrap();

        assert_eq!(internal.model.to_json(), injected.model.to_json());
        assert_eq!(
            internal.stage_models.as_ref().unwrap().proxy.to_json(),
            injected.stage_models.as_ref().unwrap().proxy.to_json()
        );
    }

    #[test]
    fn proxy_assignments() {
        assert_eq!(Method::IwErm.proxy(), Some(Method::ErmPool));
        for m in [Method::IwCip, Method::IwDip, Method::IwJointDip, Method::JointDip, Method::JointDipPool] {
            assert_eq!(m.proxy(), Some(Method::Cip));
        }
        for m in [Method::Tar, Method::Erm, Method::Dip, Method::Cip, Method::Irm, Method::GroupDro] {
            assert_eq!(m.proxy(), None);
        }
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let (scenario, data) = tiny_scenario(2, 30);
        let spec = MethodSpec { epochs: 0, ..MethodSpec::defaults(Method::ErmPool) };
        let run = train_method(&spec, &scenario, &data, 11).unwrap();
        let mut rng = Rng::new(11).substream(stream::TRAIN_MAIN);
        let expected = LinearModel::init(2, 2, &mut rng);
        assert_eq!(run.model, expected);
        assert!(run.history.is_empty());
        assert!(run.metrics.tar_acc >= 0.0 && run.metrics.tar_acc <= 1.0);
    }

    #[test]
    fn runs_are_deterministic() {
        let (scenario, data) = tiny_scenario(2, 60);
        let spec = quick_spec(Method::Cip);
        let a = train_method(&spec, &scenario, &data, 3).unwrap();
        let b = train_method(&spec, &scenario, &data, 3).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.metrics, b.metrics);
    }

    #[test]
    fn staged_proxy_is_bit_identical_to_standalone() {
        let (scenario, data) = tiny_scenario(2, 60);
        let iw = quick_spec(Method::IwErm);
        let run = train_method(&iw, &scenario, &data, 5).unwrap();
        let standalone =
            train_method(&quick_spec(Method::ErmPool), &scenario, &data, 5).unwrap();
        assert_eq!(run.stage_models.unwrap().proxy, standalone.model);

        let jd = quick_spec(Method::JointDip);
        let run = train_method(&jd, &scenario, &data, 5).unwrap();
        let cip_spec = MethodSpec {
            penalty: PenaltySpec::mean(jd.lambda_cip),
            ..quick_spec(Method::Cip)
        };
        let standalone = train_method(&cip_spec, &scenario, &data, 5).unwrap();
        assert_eq!(run.stage_models.unwrap().proxy, standalone.model);
    }

    #[test]
    fn importance_weights_are_estimated_for_every_source() {
        let (scenario, data) = tiny_scenario(3, 60);
        let run = train_method(&quick_spec(Method::IwErm), &scenario, &data, 2).unwrap();
        let w = run.weights.unwrap();
        assert_eq!(w.per_domain.len(), 3);
        for per in &w.per_domain {
            assert_eq!(per.len(), 2);
            assert!(per.iter().all(|&v| v >= 0.0 && v.is_finite()));
        }
    }

    #[test]
    fn every_method_trains_on_the_tiny_scenario() {
        let (scenario, data) = tiny_scenario(2, 45);
        for method in Method::ALL {
            // enough steps that the weight-estimation proxies of the
            // importance-weighted methods separate the classes
            let mut spec = MethodSpec { epochs: 6, batch_size: 15, ..MethodSpec::defaults(method) };
            if matches!(method, Method::JointDip | Method::JointDipPool | Method::IwJointDip) {
                spec.penalty = PenaltySpec::mmd(0.1);
                spec.lambda_cip = 0.1;
            }
            let run = train_method(&spec, &scenario, &data, 1)
                .unwrap_or_else(|e| panic!("{method} failed: {e}"));
            assert_eq!(run.history.len(), 6, "{method}");
            for stat in &run.history {
                assert!(stat.loss.is_finite() && stat.penalty.is_finite(), "{method}");
            }
            let m = run.metrics;
            for v in [m.src_acc, m.tar_acc, m.src_risk, m.tar_risk] {
                assert!((0.0..=1.0).contains(&v), "{method} metric {v}");
            }
        }
    }

    #[test]
    fn oracle_method_learns_the_target() {
        // Target class means are separable, so the oracle should fit well.
        let (scenario, data) = tiny_scenario(2, 120);
        let spec = MethodSpec { epochs: 15, batch_size: 30, ..MethodSpec::defaults(Method::Tar) };
        let run = train_method(&spec, &scenario, &data, 4).unwrap();
        assert!(run.metrics.tar_acc > 0.9, "tar_acc = {}", run.metrics.tar_acc);
    }

    #[test]
    fn groupdro_update_hand_case_and_simplex() {
        let mut q = vec![0.5, 0.5];
        groupdro_update(&mut q, &[0.0, 3f64.ln()], 1.0);
        assert!((q[0] - 0.25).abs() < 1e-12);
        assert!((q[1] - 0.75).abs() < 1e-12);

        let mut rng = Rng::new(17);
        let mut q = vec![0.25; 4];
        for _ in 0..200 {
            let risks: Vec<f64> = (0..4).map(|_| rng.uniform() * 5.0).collect();
            groupdro_update(&mut q, &risks, 10.0);
            assert!(q.iter().all(|&v| v >= 0.0));
            assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn groupdro_needs_state_in_step_objective() {
        let (scenario, data) = tiny_scenario(2, 30);
        let spec = MethodSpec::defaults(Method::GroupDro);
        let model = LinearModel::zeros(scenario.dimension, scenario.classes);
        let batches = StepBatches {
            sources: vec![
                SourceBatch { x: data[0].x.clone(), y: data[0].y.clone(), source_pos: 0 },
                SourceBatch { x: data[1].x.clone(), y: data[1].y.clone(), source_pos: 1 },
            ],
            target_x: None,
            target_y: None,
        };
        assert!(matches!(
            step_objective(&spec, &model, &batches, None, None, None),
            Err(MethodError::Config(_))
        ));
    }

    #[test]
    fn validation_rejects_malformed_inputs() {
        let (scenario, data) = tiny_scenario(2, 30);
        let spec = MethodSpec::defaults(Method::Erm);

        let missing = &data[..2];
        assert!(matches!(
            train_method(&spec, &scenario, missing, 0),
            Err(MethodError::Data(_))
        ));

        let mut bad_lambda = spec;
        bad_lambda.penalty.lambda = -1.0;
        assert!(matches!(
            train_method(&bad_lambda, &scenario, &data, 0),
            Err(MethodError::Config(_))
        ));

        let mut dup = data.clone();
        dup[1].domain_id = 1;
        assert!(matches!(train_method(&spec, &scenario, &dup, 0), Err(MethodError::Data(_))));
    }

    #[test]
    fn diagnostic_identical_domains_is_zero() {
        let f = Matrix::from_rows(vec![
            vec![0.1, 1.0],
            vec![-0.3, 0.5],
            vec![0.7, -0.2],
            vec![0.4, 0.9],
            vec![-0.6, 0.1],
            vec![0.2, -0.8],
        ]);
        let y = vec![1, 2, 1, 2, 1, 2];
        let out = deviation_diagnostic(&[f.clone(), f], &[y.clone(), y], 2).unwrap();
        for v in out {
            assert!(v.abs() < 1e-10, "{v}");
        }
    }

    #[test]
    fn diagnostic_matches_closed_form_mean_shift() {
        // 1-D features, class-1 means 0 vs delta with unit variance:
        // the statistic approaches delta^2 / sigma^2 = 1.
        let n = 100_000;
        let mut rng = Rng::new(23);
        let mut build = |shift: f64| {
            let mut rows = Vec::with_capacity(n);
            let mut ys = Vec::with_capacity(n);
            for i in 0..n {
                let label = 1 + (i % 2);
                let mean = if label == 1 { shift } else { 10.0 };
                rows.push(vec![rng.normal(mean, 1.0)]);
                ys.push(label);
            }
            (Matrix::from_rows(rows), ys)
        };
        let (f1, y1) = build(0.0);
        let (f2, y2) = build(1.0);
        let out = deviation_diagnostic(&[f1, f2], &[y1, y2], 2).unwrap();
        assert!((out[0] - 1.0).abs() < 0.05, "class 1: {}", out[0]);
        assert!(out[1].abs() < 0.05, "class 2: {}", out[1]);
    }

    #[test]
    fn diagnostic_rejects_missing_class() {
        let f1 = Matrix::from_rows(vec![vec![0.0], vec![1.0], vec![0.5], vec![1.5]]);
        let f2 = f1.clone();
        let y1 = vec![1, 2, 1, 2];
        let y2 = vec![1, 1, 1, 1];
        let err = deviation_diagnostic(&[f1, f2], &[y1, y2], 2).unwrap_err();
        assert!(matches!(err, MethodError::DegenerateClass { class: 2, domain: 2 }));
    }

    #[test]
    fn diagnostic_for_model_runs_on_scenario_data() {
        let (_, data) = tiny_scenario(3, 80);
        let model = LinearModel {
            a: Matrix::from_rows(vec![vec![0.0, 0.0], vec![1.0, 1.0]]),
            b: vec![0.0, 0.0],
        };
        let out = deviation_diagnostic_for_model(&model, &data[..3]).unwrap();
        assert_eq!(out.len(), 2);
        assert!(out.iter().all(|v| v.is_finite() && *v >= -1e-12));
    }

    #[test]
    fn split_mode_uses_disjoint_thirds() {
        assert_eq!(third_rows(9, 0), vec![0, 1, 2]);
        assert_eq!(third_rows(9, 1), vec![3, 4, 5]);
        assert_eq!(third_rows(9, 2), vec![6, 7, 8]);
        assert_eq!(third_rows(10, 0).len() + third_rows(10, 1).len() + third_rows(10, 2).len(), 10);

        let (scenario, data) = tiny_scenario(2, 60);
        let spec = MethodSpec { split: true, ..quick_spec(Method::IwErm) };
        let run = train_method(&spec, &scenario, &data, 9).unwrap();
        let unsplit = train_method(&quick_spec(Method::IwErm), &scenario, &data, 9).unwrap();
        // Different training subsets must produce different parameters.
        assert_ne!(run.model, unsplit.model);
    }

    #[test]
    fn trained_run_serializes() {
        let (scenario, data) = tiny_scenario(2, 30);
        let run = train_method(&quick_spec(Method::IwCip), &scenario, &data, 8).unwrap();
        let text = serde_json::to_string(&run).unwrap();
        let back: TrainedRun = serde_json::from_str(&text).unwrap();
        assert_eq!(back.model, run.model);
        assert_eq!(back.weights, run.weights);
    }
}
