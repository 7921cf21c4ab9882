//! Head scoring and top-k selection.
//!
//! Vision heads are scored by the soft accuracy of their own GDA model on the
//! support set it was fitted on; text heads by the zero-shot soft accuracy of
//! dot products against class-text attention vectors. Both scores live in
//! `[0, 1]`.

use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{HecError, Result};
use crate::feature_store::{FeatureBank, SampleKind};
use crate::gda::{self, HeadGda};
use crate::parallel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Vision,
    Text,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadScores {
    pub scores: Vec<f64>,
    pub kind: HeadKind,
    /// Softmax temperature used for vision scores.
    pub tau: Option<f64>,
}

/// Ordered top-k heads, best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSelection {
    pub kind: HeadKind,
    pub k: usize,
    pub indices: Vec<usize>,
    /// Score of each selected head, aligned with `indices`.
    pub scores: Vec<f64>,
}

impl HeadSelection {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Selected heads in ascending index order, for fixed-order reductions.
    pub fn ascending(&self) -> Vec<usize> {
        let mut v = self.indices.clone();
        v.sort_unstable();
        v
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        fs::write(path, json).map_err(|e| HecError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| HecError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// `[n × C]` temperature-softmax probabilities of one vision head on `rows`.
pub fn vision_head_probs(
    model: &HeadGda,
    bank: &FeatureBank,
    head: usize,
    rows: &[usize],
    tau: f64,
) -> Result<DMatrix<f64>> {
    let logits = model.logits_batch(&bank.head_matrix(head, rows))?;
    row_softmax(&logits, tau)
}

/// `[n × C]` dot-product logits of one text head: support vectors against
/// class-text vectors (rows of `class_bank` in class order).
pub fn text_head_logits(
    bank: &FeatureBank,
    head: usize,
    rows: &[usize],
    class_bank: &FeatureBank,
) -> DMatrix<f64> {
    let classes: Vec<usize> = (0..class_bank.samples()).collect();
    bank.head_matrix(head, rows) * class_bank.head_matrix(head, &classes).transpose()
}

pub fn row_softmax(logits: &DMatrix<f64>, tau: f64) -> Result<DMatrix<f64>> {
    if !(tau > 0.0) {
        return Err(HecError::InvalidTemperature(tau));
    }
    let mut out = logits.clone();
    for i in 0..out.nrows() {
        let row: Vec<f64> = logits.row(i).iter().copied().collect();
        for (c, p) in gda::softmax_scaled(&row, tau).into_iter().enumerate() {
            out[(i, c)] = p;
        }
    }
    Ok(out)
}

fn mean_true_class(probs: &DMatrix<f64>, labels: &[usize]) -> f64 {
    let total: f64 = labels.iter().enumerate().map(|(i, &y)| probs[(i, y)]).sum();
    total / labels.len() as f64
}

fn hard_accuracy(scores: &DMatrix<f64>, labels: &[usize]) -> f64 {
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| {
            let row: Vec<f64> = scores.row(i).iter().copied().collect();
            gda::argmax(&row) == y
        })
        .count();
    hits as f64 / labels.len() as f64
}

fn check_rows(bank: &FeatureBank, rows: &[usize], labels: &[usize], heads: usize) -> Result<()> {
    if rows.is_empty() {
        return Err(HecError::Empty("support set"));
    }
    if rows.len() != labels.len() {
        return Err(HecError::ShapeMismatch(format!("{} rows for {} labels", rows.len(), labels.len())));
    }
    if bank.heads() != heads {
        return Err(HecError::ShapeMismatch(format!("{heads} models for a bank of {} heads", bank.heads())));
    }
    Ok(())
}

/// Soft support accuracy of every vision head at temperature `tau`.
///
/// `models[m]` must have been fitted on the same `rows`; in-sample scoring is
/// the intended behaviour.
pub fn vision_head_scores(
    models: &[HeadGda],
    bank: &FeatureBank,
    rows: &[usize],
    labels: &[usize],
    tau: f64,
) -> Result<HeadScores> {
    if !(tau > 0.0) {
        return Err(HecError::InvalidTemperature(tau));
    }
    check_rows(bank, rows, labels, models.len())?;
    let scores = parallel::try_map_indexed(models.len(), |m| {
        let probs = vision_head_probs(&models[m], bank, m, rows, tau)?;
        Ok(mean_true_class(&probs, labels))
    })?;
    Ok(HeadScores { scores, kind: HeadKind::Vision, tau: Some(tau) })
}

fn check_class_bank(bank: &FeatureBank, labels: &[usize], class_bank: &FeatureBank) -> Result<()> {
    if class_bank.kind() != SampleKind::ClassText {
        return Err(HecError::InvalidParameter(format!(
            "text heads need a class_text bank, got {:?}",
            class_bank.kind()
        )));
    }
    if class_bank.heads() != bank.heads() || class_bank.dim() != bank.dim() {
        return Err(HecError::ShapeMismatch(format!(
            "class bank is {}×{}, image bank is {}×{}",
            class_bank.heads(),
            class_bank.dim(),
            bank.heads(),
            bank.dim()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= class_bank.samples()) {
        return Err(HecError::ShapeMismatch(format!(
            "label {bad} but only {} class vectors",
            class_bank.samples()
        )));
    }
    Ok(())
}

/// Zero-shot soft support accuracy of every text head (plain softmax, no temperature).
pub fn text_head_scores(
    bank: &FeatureBank,
    rows: &[usize],
    labels: &[usize],
    class_bank: &FeatureBank,
) -> Result<HeadScores> {
    check_rows(bank, rows, labels, bank.heads())?;
    check_class_bank(bank, labels, class_bank)?;
    let scores = parallel::try_map_indexed(bank.heads(), |m| {
        let probs = row_softmax(&text_head_logits(bank, m, rows, class_bank), 1.0)?;
        Ok(mean_true_class(&probs, labels))
    })?;
    Ok(HeadScores { scores, kind: HeadKind::Text, tau: None })
}

/// How heads are scored when ranking by query-set performance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OracleMetric {
    /// Top-1 accuracy.
    Hard,
    /// Mean true-class probability at the given temperature.
    Soft(f64),
}

/// Query-set score of every vision head. Uses query labels, so only for
/// oracle analyses; never feed it into a test-time prediction.
pub fn oracle_vision_scores(
    models: &[HeadGda],
    bank: &FeatureBank,
    query_rows: &[usize],
    query_labels: &[usize],
    metric: OracleMetric,
) -> Result<HeadScores> {
    check_rows(bank, query_rows, query_labels, models.len())?;
    let scores = parallel::try_map_indexed(models.len(), |m| {
        let logits = models[m].logits_batch(&bank.head_matrix(m, query_rows))?;
        Ok(match metric {
            OracleMetric::Hard => hard_accuracy(&logits, query_labels),
            OracleMetric::Soft(tau) => mean_true_class(&row_softmax(&logits, tau)?, query_labels),
        })
    })?;
    let tau = match metric {
        OracleMetric::Soft(t) => Some(t),
        OracleMetric::Hard => None,
    };
    Ok(HeadScores { scores, kind: HeadKind::Vision, tau })
}

/// Query-set score of every text head; oracle analyses only.
pub fn oracle_text_scores(
    bank: &FeatureBank,
    query_rows: &[usize],
    query_labels: &[usize],
    class_bank: &FeatureBank,
    metric: OracleMetric,
) -> Result<HeadScores> {
    check_rows(bank, query_rows, query_labels, bank.heads())?;
    check_class_bank(bank, query_labels, class_bank)?;
    let scores = parallel::try_map_indexed(bank.heads(), |m| {
        let logits = text_head_logits(bank, m, query_rows, class_bank);
        Ok(match metric {
            OracleMetric::Hard => hard_accuracy(&logits, query_labels),
            OracleMetric::Soft(tau) => mean_true_class(&row_softmax(&logits, tau)?, query_labels),
        })
    })?;
    Ok(HeadScores { scores, kind: HeadKind::Text, tau: None })
}

/// Heads ordered by descending score, ties broken by ascending index,
/// truncated to `k`.
pub fn select_top_k(scores: &HeadScores, k: usize) -> Result<HeadSelection> {
    if k == 0 {
        return Err(HecError::InvalidParameter("k must be ≥ 1".into()));
    }
    let mut order: Vec<usize> = (0..scores.scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores.scores[b]
            .partial_cmp(&scores.scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(k);
    Ok(HeadSelection {
        kind: scores.kind,
        k,
        scores: order.iter().map(|&i| scores.scores[i]).collect(),
        indices: order,
    })
}

/// Element-wise mean of scores from several tasks.
pub fn aggregate_scores(task_scores: &[HeadScores]) -> Result<HeadScores> {
    let first = task_scores.first().ok_or(HecError::Empty("task scores"))?;
    let m = first.scores.len();
    for s in task_scores {
        if s.kind != first.kind {
            return Err(HecError::InvalidParameter("cannot aggregate vision and text scores".into()));
        }
        if s.scores.len() != m {
            return Err(HecError::ShapeMismatch(format!("{} vs {m} heads", s.scores.len())));
        }
    }
    let n = task_scores.len() as f64;
    let scores = (0..m)
        .map(|h| task_scores.iter().map(|s| s.scores[h]).sum::<f64>() / n)
        .collect();
    let tau = if task_scores.iter().all(|s| s.tau == first.tau) { first.tau } else { None };
    Ok(HeadScores { scores, kind: first.kind, tau })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gda::fit_all_heads;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scores(v: &[f64]) -> HeadScores {
        HeadScores { scores: v.to_vec(), kind: HeadKind::Vision, tau: Some(10.0) }
    }

    #[test]
    fn top_k_orders_by_score() {
        assert_eq!(select_top_k(&scores(&[0.9, 0.1, 0.5]), 2).unwrap().indices, vec![0, 2]);
    }

    #[test]
    fn top_k_ties_take_lowest_index() {
        assert_eq!(select_top_k(&scores(&[0.5, 0.5, 0.2]), 1).unwrap().indices, vec![0]);
        assert_eq!(select_top_k(&scores(&[0.2, 0.5, 0.5]), 2).unwrap().indices, vec![1, 2]);
    }

    #[test]
    fn top_k_truncates() {
        let sel = select_top_k(&scores(&[0.1, 0.3, 0.2]), 10).unwrap();
        assert_eq!(sel.indices, vec![1, 2, 0]);
        assert_eq!(sel.scores, vec![0.3, 0.2, 0.1]);
        assert_eq!(sel.k, 10);
        assert!(select_top_k(&scores(&[0.1]), 0).is_err());
    }

    #[test]
    fn aggregate_means() {
        let agg = aggregate_scores(&[scores(&[0.2, 0.8]), scores(&[0.4, 0.6])]).unwrap();
        assert!((agg.scores[0] - 0.3).abs() < 1e-15);
        assert!((agg.scores[1] - 0.7).abs() < 1e-15);
        assert_eq!(aggregate_scores(&[scores(&[0.1, 0.9])]).unwrap(), scores(&[0.1, 0.9]));
    }

    #[test]
    fn aggregate_errors() {
        assert!(aggregate_scores(&[]).is_err());
        let text = HeadScores { scores: vec![0.5, 0.5], kind: HeadKind::Text, tau: None };
        assert!(aggregate_scores(&[scores(&[0.1, 0.2]), text]).is_err());
        assert!(aggregate_scores(&[scores(&[0.1, 0.2]), scores(&[0.1])]).is_err());
    }

    fn image_bank(data: Vec<f64>, s: usize, m: usize, d: usize) -> FeatureBank {
        FeatureBank::from_f64(&data, s, m, d, false, SampleKind::Image).unwrap()
    }

    fn class_bank(data: Vec<f64>, c: usize, m: usize, d: usize) -> FeatureBank {
        FeatureBank::from_f64(&data, c, m, d, false, SampleKind::ClassText).unwrap()
    }

    #[test]
    fn text_score_single_support() {
        let bank = image_bank(vec![1.0, 0.0], 1, 1, 2);
        let classes = class_bank(vec![1.0, 0.0, 0.0, 1.0], 2, 1, 2);
        let s = text_head_scores(&bank, &[0], &[0], &classes).unwrap();
        let expected = std::f64::consts::E / (1.0 + std::f64::consts::E);
        assert!((s.scores[0] - expected).abs() < 1e-12);
        assert!((s.scores[0] - 0.73106).abs() < 1e-5);
    }

    #[test]
    fn text_score_identical_classes_is_chance() {
        let bank = image_bank(vec![0.3, 0.7, -0.2, 0.9], 2, 1, 2);
        let classes = class_bank(vec![0.6, 0.8, 0.6, 0.8, 0.6, 0.8], 3, 1, 2);
        let s = text_head_scores(&bank, &[0, 1], &[0, 2], &classes).unwrap();
        assert!((s.scores[0] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn text_score_orthogonal_query_is_chance() {
        let bank = image_bank(vec![0.0, 0.0, 1.0], 1, 1, 3);
        let classes = class_bank(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0], 2, 1, 3);
        let s = text_head_scores(&bank, &[0], &[1], &classes).unwrap();
        assert!((s.scores[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn text_score_rejects_label_beyond_classes() {
        let bank = image_bank(vec![1.0, 0.0], 1, 1, 2);
        let classes = class_bank(vec![1.0, 0.0, 0.0, 1.0], 2, 1, 2);
        assert!(text_head_scores(&bank, &[0], &[2], &classes).is_err());
        assert!(text_head_scores(&bank, &[0], &[0], &bank).is_err());
    }

    #[test]
    fn vision_score_one_dim_example_matches_per_sample_oracle() {
        let bank = image_bank(vec![-1.0, 1.0, 2.0, 4.0], 4, 1, 1);
        let rows = [0, 1, 2, 3];
        let labels = [0, 0, 1, 1];
        let models = fit_all_heads(&bank, &rows, &labels, 2).unwrap();
        let s = vision_head_scores(&models, &bank, &rows, &labels, 1.0).unwrap();
        // μ = [0, 3], precision 3/16: logit gap ℓ_y − ℓ_other = ±(3/32)((x−μ_o)² − (x−μ_y)²).
        let p = 3.0 / 16.0;
        let truth = |x: f64, my: f64, mo: f64| {
            let gap = 0.5 * p * ((x - mo).powi(2) - (x - my).powi(2));
            1.0 / (1.0 + (-gap).exp())
        };
        let expected =
            (truth(-1.0, 0.0, 3.0) + truth(1.0, 0.0, 3.0) + truth(2.0, 3.0, 0.0) + truth(4.0, 3.0, 0.0)) / 4.0;
        assert!((s.scores[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn vision_score_identical_classes_is_near_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 400;
        // Every class gets the same points, so class means coincide.
        let base: Vec<f64> = (0..n / 2).flat_map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
        let data: Vec<f64> = base.iter().chain(base.iter()).copied().collect();
        let bank = image_bank(data, n, 1, 2);
        let rows: Vec<usize> = (0..n).collect();
        let labels: Vec<usize> = (0..n).map(|i| i / (n / 2)).collect();
        let models = fit_all_heads(&bank, &rows, &labels, 2).unwrap();
        let s = vision_head_scores(&models, &bank, &rows, &labels, 10.0).unwrap();
        assert!((s.scores[0] - 0.5).abs() < 0.02);
    }

    #[test]
    fn vision_score_separated_head_at_low_temperature() {
        let bank = image_bank(vec![0.0, 0.1, 0.2, 5.0, 5.1, 5.2], 6, 1, 1);
        let rows: Vec<usize> = (0..6).collect();
        let labels = [0, 0, 0, 1, 1, 1];
        let models = fit_all_heads(&bank, &rows, &labels, 2).unwrap();
        let s = vision_head_scores(&models, &bank, &rows, &labels, 1e-4).unwrap();
        assert!(s.scores[0] >= 0.999 && s.scores[0] <= 1.0);
        assert!(vision_head_scores(&models, &bank, &rows, &labels, 0.0).is_err());
    }

    #[test]
    fn class_relabelling_leaves_scores_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (s, m, d) = (12, 3, 3);
        let data: Vec<f64> = (0..s * m * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let bank = image_bank(data, s, m, d);
        let rows: Vec<usize> = (0..s).collect();
        let labels: Vec<usize> = (0..s).map(|i| i % 3).collect();
        let perm = [2, 0, 1];
        let relabelled: Vec<usize> = labels.iter().map(|&y| perm[y]).collect();
        let a = vision_head_scores(&fit_all_heads(&bank, &rows, &labels, 3).unwrap(), &bank, &rows, &labels, 2.0)
            .unwrap();
        let b = vision_head_scores(
            &fit_all_heads(&bank, &rows, &relabelled, 3).unwrap(),
            &bank,
            &rows,
            &relabelled,
            2.0,
        )
        .unwrap();
        for (x, y) in a.scores.iter().zip(&b.scores) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn selection_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sel.json");
        let sel = select_top_k(&scores(&[0.3, 0.9, 0.5]), 2).unwrap();
        sel.save(&path).unwrap();
        assert_eq!(HeadSelection::load(&path).unwrap(), sel);
    }
}
