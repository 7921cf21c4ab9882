//! Head ensembles: HEC-V, HEC-T, their fusion, and the alternative
//! combination rules (voting, logit averaging, learned weights).
//!
//! Sums over heads always run in ascending head-index order so that results
//! are bitwise reproducible regardless of how the selection was ordered.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{HecError, Result};
use crate::feature_store::FeatureBank;
use crate::gda::{self, HeadGda};
use crate::head_ranking::{self, HeadKind, HeadSelection};

/// Grid used when sweeping the fusion weight α.
pub const ALPHA_GRID: [f64; 7] = [0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleMethod {
    ProbaMean,
    ProbaScoreWeighted,
    ProbaOptimal,
    LogitMean,
    LogitScoreWeighted,
    LogitOptimal,
    MajorityVote,
    WeightedVote,
}

impl EnsembleMethod {
    pub const ALL: [EnsembleMethod; 8] = [
        EnsembleMethod::ProbaMean,
        EnsembleMethod::ProbaScoreWeighted,
        EnsembleMethod::ProbaOptimal,
        EnsembleMethod::LogitMean,
        EnsembleMethod::LogitScoreWeighted,
        EnsembleMethod::LogitOptimal,
        EnsembleMethod::MajorityVote,
        EnsembleMethod::WeightedVote,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EnsembleMethod::ProbaMean => "proba_mean",
            EnsembleMethod::ProbaScoreWeighted => "proba_score_weighted",
            EnsembleMethod::ProbaOptimal => "proba_optimal",
            EnsembleMethod::LogitMean => "logit_mean",
            EnsembleMethod::LogitScoreWeighted => "logit_score_weighted",
            EnsembleMethod::LogitOptimal => "logit_optimal",
            EnsembleMethod::MajorityVote => "majority_vote",
            EnsembleMethod::WeightedVote => "weighted_vote",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == name)
    }

    /// Whether the method learns per-head weights on the support set.
    pub fn needs_weights(self) -> bool {
        matches!(self, EnsembleMethod::ProbaOptimal | EnsembleMethod::LogitOptimal)
    }

    /// Whether the output is a probability distribution.
    pub fn outputs_distribution(self) -> bool {
        matches!(self, EnsembleMethod::ProbaMean | EnsembleMethod::ProbaScoreWeighted)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub method: EnsembleMethod,
    pub tau: f64,
    pub top_k: usize,
    pub alpha: f64,
    pub ridge_lambda: f64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            method: EnsembleMethod::ProbaMean,
            tau: 10.0,
            top_k: 20,
            alpha: 1.0,
            ridge_lambda: 1.0,
        }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(HecError::InvalidTemperature(self.tau));
        }
        if self.top_k == 0 {
            return Err(HecError::InvalidParameter("top_k must be ≥ 1".into()));
        }
        if !(self.alpha > 0.0) {
            return Err(HecError::InvalidParameter(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if !(self.ridge_lambda >= 0.0) {
            return Err(HecError::InvalidParameter(format!(
                "ridge_lambda must be ≥ 0, got {}",
                self.ridge_lambda
            )));
        }
        Ok(())
    }
}

fn check_selection(selection: &HeadSelection, kind: HeadKind, heads: usize) -> Result<()> {
    if selection.kind != kind {
        return Err(HecError::InvalidParameter(format!(
            "expected a {kind:?} selection, got {:?}",
            selection.kind
        )));
    }
    if selection.is_empty() {
        return Err(HecError::Empty("head selection"));
    }
    if let Some(&bad) = selection.indices.iter().find(|&&m| m >= heads) {
        return Err(HecError::ShapeMismatch(format!("selected head {bad} but only {heads} heads")));
    }
    Ok(())
}

fn head_slice(query: &[f32], head: usize, dim: usize) -> Vec<f64> {
    query[head * dim..(head + 1) * dim].iter().map(|&v| v as f64).collect()
}

/// HEC-V for one query given as `M·D` values: mean class probabilities of the
/// selected vision heads.
pub fn hec_v(query: &[f32], models: &[HeadGda], selection: &HeadSelection, tau: f64) -> Result<Vec<f64>> {
    check_selection(selection, HeadKind::Vision, models.len())?;
    let dim = models[0].dim();
    if query.len() != models.len() * dim {
        return Err(HecError::ShapeMismatch(format!(
            "query has {} values, expected {}·{}",
            query.len(),
            models.len(),
            dim
        )));
    }
    let per_head = selection
        .ascending()
        .into_iter()
        .map(|m| gda::class_probs(&models[m].logits(&head_slice(query, m, dim))?.0, tau))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_rows(&per_head))
}

/// HEC-T for one query: mean softmax of dot products with the class-text
/// vectors over the selected text heads.
pub fn hec_t(query: &[f32], class_bank: &FeatureBank, selection: &HeadSelection) -> Result<Vec<f64>> {
    check_selection(selection, HeadKind::Text, class_bank.heads())?;
    let dim = class_bank.dim();
    if query.len() != class_bank.heads() * dim {
        return Err(HecError::ShapeMismatch(format!(
            "query has {} values, class bank expects {}",
            query.len(),
            class_bank.heads() * dim
        )));
    }
    let per_head: Vec<Vec<f64>> = selection
        .ascending()
        .into_iter()
        .map(|m| {
            let x = head_slice(query, m, dim);
            let logits: Vec<f64> = (0..class_bank.samples())
                .map(|c| {
                    class_bank.slice(c, m).iter().zip(&x).map(|(&t, &v)| t as f64 * v).sum()
                })
                .collect();
            gda::softmax_scaled(&logits, 1.0)
        })
        .collect();
    Ok(mean_rows(&per_head))
}

/// HEC-VT: `(α·p_v + p_t) / (α + 1)`.
pub fn hec_vt(p_v: &[f64], p_t: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if !(alpha > 0.0) {
        return Err(HecError::InvalidParameter(format!("alpha must be > 0, got {alpha}")));
    }
    if p_v.len() != p_t.len() {
        return Err(HecError::ShapeMismatch(format!("{} vs {} classes", p_v.len(), p_t.len())));
    }
    Ok(p_v.iter().zip(p_t).map(|(&v, &t)| (alpha * v + t) / (alpha + 1.0)).collect())
}

/// `[n × C]` HEC-V probabilities for the samples `rows` of `bank`.
pub fn hec_v_batch(
    bank: &FeatureBank,
    rows: &[usize],
    models: &[HeadGda],
    selection: &HeadSelection,
    tau: f64,
) -> Result<DMatrix<f64>> {
    check_selection(selection, HeadKind::Vision, models.len())?;
    let heads = selection.ascending();
    let mut total: Option<DMatrix<f64>> = None;
    for &m in &heads {
        let p = head_ranking::vision_head_probs(&models[m], bank, m, rows, tau)?;
        total = Some(match total {
            None => p,
            Some(acc) => acc + p,
        });
    }
    Ok(total.expect("selection is non-empty") / heads.len() as f64)
}

/// `[n × C]` HEC-T probabilities for the samples `rows` of `bank`.
pub fn hec_t_batch(
    bank: &FeatureBank,
    rows: &[usize],
    class_bank: &FeatureBank,
    selection: &HeadSelection,
) -> Result<DMatrix<f64>> {
    check_selection(selection, HeadKind::Text, bank.heads())?;
    let heads = selection.ascending();
    let mut total: Option<DMatrix<f64>> = None;
    for &m in &heads {
        let logits = head_ranking::text_head_logits(bank, m, rows, class_bank);
        let p = head_ranking::row_softmax(&logits, 1.0)?;
        total = Some(match total {
            None => p,
            Some(acc) => acc + p,
        });
    }
    Ok(total.expect("selection is non-empty") / heads.len() as f64)
}

fn mean_rows(rows: &[Vec<f64>]) -> Vec<f64> {
    let c = rows[0].len();
    let mut out = vec![0.0; c];
    for r in rows {
        for (o, v) in out.iter_mut().zip(r) {
            *o += v;
        }
    }
    let n = rows.len() as f64;
    out.iter_mut().for_each(|v| *v /= n);
    out
}

fn weighted_rows(rows: &[Vec<f64>], weights: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rows[0].len()];
    for (r, &w) in rows.iter().zip(weights) {
        for (o, v) in out.iter_mut().zip(r) {
            *o += w * v;
        }
    }
    out
}

/// Subtracts each row's mean across classes.
///
/// Logits are only defined up to an additive constant per sample, so the
/// learned-weight logit ensemble regresses on centered logits.
pub fn center_logits(logits: &[f64]) -> Vec<f64> {
    let mean = logits.iter().sum::<f64>() / logits.len() as f64;
    logits.iter().map(|v| v - mean).collect()
}

/// Row-wise [`center_logits`] for a `[B × C]` matrix.
pub fn center_logit_rows(logits: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = logits.clone();
    for i in 0..out.nrows() {
        let mean = out.row(i).sum() / out.ncols() as f64;
        out.row_mut(i).add_scalar_mut(-mean);
    }
    out
}

/// Ridge least-squares head weights against one-hot support targets:
/// `min_w Σ_i ‖y_i − Σ_m w_m o_{i,m}‖² + λ‖w‖²`, solved by normal equations.
///
/// `support_outputs[j]` is the `[B × C]` output of the j-th head (in the same
/// order the weights will be applied).
pub fn optimal_weights(support_outputs: &[DMatrix<f64>], labels: &[usize], lambda: f64) -> Result<Vec<f64>> {
    let k = support_outputs.len();
    if k == 0 {
        return Err(HecError::Empty("head outputs"));
    }
    let (b, c) = support_outputs[0].shape();
    if support_outputs.iter().any(|o| o.shape() != (b, c)) || labels.len() != b {
        return Err(HecError::ShapeMismatch("support outputs disagree in shape".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(HecError::InvalidParameter(format!("label {bad} ≥ {c} classes")));
    }
    if !(lambda >= 0.0) {
        return Err(HecError::InvalidParameter(format!("lambda must be ≥ 0, got {lambda}")));
    }
    let mut gram = DMatrix::<f64>::zeros(k, k);
    for a in 0..k {
        for bb in a..k {
            let v = support_outputs[a].dot(&support_outputs[bb]);
            gram[(a, bb)] = v;
            gram[(bb, a)] = v;
        }
        gram[(a, a)] += lambda;
    }
    let rhs = DVector::from_fn(k, |m, _| {
        labels.iter().enumerate().map(|(i, &y)| support_outputs[m][(i, y)]).sum::<f64>()
    });
    let chol = gram
        .cholesky()
        .ok_or_else(|| HecError::InvalidParameter("singular normal equations; use lambda > 0".into()))?;
    Ok(chol.solve(&rhs).iter().copied().collect())
}

/// Per-head outputs for one query, aligned with the selected heads in
/// ascending head order.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutputs {
    pub probs: Vec<Vec<f64>>,
    pub logits: Vec<Vec<f64>>,
}

/// Support-set statistics a method may need, aligned like [`HeadOutputs`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SupportStats {
    /// Ranking score of each head.
    pub scores: Vec<f64>,
    /// Learned weights, for the optimal-weight methods.
    pub weights: Option<Vec<f64>>,
}

/// Combines per-head outputs into class scores; the prediction is their
/// argmax (ties to the lowest class).
///
/// Vote methods return (weighted) vote tallies, `proba_mean` and
/// `proba_score_weighted` return distributions, the rest return scores.
pub fn ensemble_predict(method: EnsembleMethod, outputs: &HeadOutputs, stats: &SupportStats) -> Result<Vec<f64>> {
    let k = outputs.probs.len();
    if k == 0 {
        return Err(HecError::Empty("head outputs"));
    }
    let uses_logits = matches!(
        method,
        EnsembleMethod::LogitMean | EnsembleMethod::LogitScoreWeighted | EnsembleMethod::LogitOptimal
    );
    let rows = if uses_logits { &outputs.logits } else { &outputs.probs };
    if rows.len() != k {
        return Err(HecError::InvalidMethod(format!("{} needs logits for every head", method.name())));
    }
    let c = rows[0].len();
    if c == 0 || rows.iter().any(|r| r.len() != c) {
        return Err(HecError::ShapeMismatch("heads disagree on class count".into()));
    }
    let scores = || -> Result<&[f64]> {
        if stats.scores.len() != k {
            return Err(HecError::InvalidMethod(format!(
                "{} needs one ranking score per head",
                method.name()
            )));
        }
        Ok(&stats.scores)
    };
    let weights = || -> Result<&[f64]> {
        match &stats.weights {
            Some(w) if w.len() == k => Ok(w),
            _ => Err(HecError::InvalidMethod(format!("{} needs learned weights per head", method.name()))),
        }
    };
    let score_weighted = |rows: &[Vec<f64>]| -> Result<Vec<f64>> {
        let s = scores()?;
        let total: f64 = s.iter().sum();
        if s.iter().all(|&v| v == s[0]) || total <= 0.0 {
            return Ok(mean_rows(rows));
        }
        let mut out = weighted_rows(rows, s);
        out.iter_mut().for_each(|v| *v /= total);
        Ok(out)
    };
    let votes = |weights: Option<&[f64]>| -> Vec<f64> {
        let mut tally = vec![0.0; c];
        for (j, r) in rows.iter().enumerate() {
            tally[gda::argmax(r)] += weights.map_or(1.0, |w| w[j]);
        }
        tally
    };

    match method {
        EnsembleMethod::ProbaMean | EnsembleMethod::LogitMean => Ok(mean_rows(rows)),
        EnsembleMethod::ProbaScoreWeighted | EnsembleMethod::LogitScoreWeighted => score_weighted(rows),
        EnsembleMethod::ProbaOptimal => Ok(weighted_rows(rows, weights()?)),
        EnsembleMethod::LogitOptimal => {
            let centered: Vec<Vec<f64>> = rows.iter().map(|r| center_logits(r)).collect();
            Ok(weighted_rows(&centered, weights()?))
        }
        EnsembleMethod::MajorityVote => Ok(votes(None)),
        EnsembleMethod::WeightedVote => {
            let s = scores()?;
            if s.iter().all(|&v| v == s[0]) {
                Ok(votes(None))
            } else {
                Ok(votes(Some(s)))
            }
        }
    }
}

/// Learns the weights an optimal-weight method needs from `[B × C]` support
/// outputs per head (probabilities and raw logits); `None` for other methods.
pub fn support_weights(
    method: EnsembleMethod,
    support_probs: &[DMatrix<f64>],
    support_logits: &[DMatrix<f64>],
    labels: &[usize],
    lambda: f64,
) -> Result<Option<Vec<f64>>> {
    match method {
        EnsembleMethod::ProbaOptimal => optimal_weights(support_probs, labels, lambda).map(Some),
        EnsembleMethod::LogitOptimal => {
            let centered: Vec<DMatrix<f64>> = support_logits.iter().map(center_logit_rows).collect();
            optimal_weights(&centered, labels, lambda).map(Some)
        }
        _ => Ok(None),
    }
}
