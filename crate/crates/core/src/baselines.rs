//! Closed-form comparison classifiers: ridge linear probe, nearest centroid
//! and summary-token zero-shot.

use nalgebra::{DMatrix, DVector};

use crate::error::{HecError, Result};
use crate::gda::argmax;

/// Grid used when sweeping the ridge penalty.
pub const LAMBDA_GRID: [f64; 5] = [0.001, 0.01, 0.1, 1.0, 10.0];

/// One-vs-all ridge regression onto one-hot targets, with intercept.
#[derive(Debug, Clone, PartialEq)]
pub struct RidgeProbe {
    /// `[F × C]`
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub lambda: f64,
}

impl RidgeProbe {
    pub fn feature_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.weights.ncols()
    }
}

/// Centered normal equations `(XcᵀXc + λI, XcᵀYc)` plus the feature and
/// target means used for the intercept.
pub(crate) struct NormalEquations {
    pub gram: DMatrix<f64>,
    pub rhs: DMatrix<f64>,
    pub feature_mean: DVector<f64>,
    pub target_mean: DVector<f64>,
}

pub(crate) fn normal_equations(
    features: &DMatrix<f64>,
    labels: &[usize],
    num_classes: usize,
    lambda: f64,
) -> Result<NormalEquations> {
    let (b, f) = features.shape();
    if b == 0 {
        return Err(HecError::Empty("training features"));
    }
    if labels.len() != b {
        return Err(HecError::ShapeMismatch(format!("{} labels for {b} samples", labels.len())));
    }
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(HecError::InvalidParameter(format!("lambda must be > 0, got {lambda}")));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(HecError::NonFinite("ridge features"));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
        return Err(HecError::InvalidParameter(format!("label {bad} ≥ {num_classes} classes")));
    }

    let feature_mean = DVector::from_fn(f, |j, _| features.column(j).mean());
    let mut target_mean = DVector::zeros(num_classes);
    for &y in labels {
        target_mean[y] += 1.0;
    }
    target_mean.unscale_mut(b as f64);

    let mut xc = features.clone();
    for mut row in xc.row_iter_mut() {
        row -= feature_mean.transpose();
    }
    let yc = DMatrix::from_fn(b, num_classes, |i, c| (labels[i] == c) as u8 as f64 - target_mean[c]);

    // An explicit transpose routes the product through the blocked GEMM kernel.
    let xt = xc.transpose();
    let mut gram = &xt * &xc;
    for k in 0..f {
        gram[(k, k)] += lambda;
    }
    let rhs = &xt * &yc;
    Ok(NormalEquations { gram, rhs, feature_mean, target_mean })
}

/// Fits the probe by solving `(XcᵀXc + λI) W = XcᵀYc` with a Cholesky
/// factorization; the intercept is `ȳ − Wᵀx̄`.
pub fn ridge_fit(features: &DMatrix<f64>, labels: &[usize], num_classes: usize, lambda: f64) -> Result<RidgeProbe> {
    let ne = normal_equations(features, labels, num_classes, lambda)?;
    let chol = ne
        .gram
        .cholesky()
        .ok_or_else(|| HecError::InvalidParameter("ridge normal equations are not positive definite".into()))?;
    let weights = chol.solve(&ne.rhs);
    let bias = &ne.target_mean - weights.tr_mul(&ne.feature_mean);
    Ok(RidgeProbe { weights, bias, lambda })
}

/// Affine class scores `Wᵀx + b`.
pub fn ridge_predict(probe: &RidgeProbe, query: &[f64]) -> Result<Vec<f64>> {
    if query.len() != probe.feature_dim() {
        return Err(HecError::ShapeMismatch(format!(
            "query has {} features, probe expects {}",
            query.len(),
            probe.feature_dim()
        )));
    }
    let x = DVector::from_column_slice(query);
    Ok((probe.weights.tr_mul(&x) + &probe.bias).iter().copied().collect())
}

/// `[n × C]` scores for the rows of `queries`.
pub fn ridge_predict_batch(probe: &RidgeProbe, queries: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if queries.ncols() != probe.feature_dim() {
        return Err(HecError::ShapeMismatch(format!(
            "queries have {} features, probe expects {}",
            queries.ncols(),
            probe.feature_dim()
        )));
    }
    let mut scores = queries * &probe.weights;
    for mut row in scores.row_iter_mut() {
        row += probe.bias.transpose();
    }
    Ok(scores)
}

/// `[C × F]` class centroids of `support`.
pub fn class_centroids(support: &DMatrix<f64>, labels: &[usize], num_classes: usize) -> Result<DMatrix<f64>> {
    if labels.len() != support.nrows() {
        return Err(HecError::ShapeMismatch(format!(
            "{} labels for {} samples",
            labels.len(),
            support.nrows()
        )));
    }
    let mut sums = DMatrix::zeros(num_classes, support.ncols());
    let mut counts = vec![0usize; num_classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= num_classes {
            return Err(HecError::InvalidParameter(format!("label {y} ≥ {num_classes} classes")));
        }
        counts[y] += 1;
        let mut row = sums.row_mut(y);
        row += support.row(i);
    }
    for (c, &n) in counts.iter().enumerate() {
        if n == 0 {
            return Err(HecError::EmptyClass(c));
        }
        sums.row_mut(c).unscale_mut(n as f64);
    }
    Ok(sums)
}

/// Class whose centroid is nearest in Euclidean distance; ties to the lowest class.
pub fn nearest_centroid(centroids: &DMatrix<f64>, query: &[f64]) -> Result<usize> {
    if query.len() != centroids.ncols() {
        return Err(HecError::ShapeMismatch(format!(
            "query has {} features, centroids have {}",
            query.len(),
            centroids.ncols()
        )));
    }
    let neg_dist: Vec<f64> = centroids
        .row_iter()
        .map(|c| -c.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .collect();
    Ok(argmax(&neg_dist))
}

/// Fits centroids on `support` and classifies `query` in one go.
pub fn nearest_centroid_predict(
    support: &DMatrix<f64>,
    labels: &[usize],
    num_classes: usize,
    query: &[f64],
) -> Result<usize> {
    nearest_centroid(&class_centroids(support, labels, num_classes)?, query)
}

/// Summary-token zero-shot logits: dot products with each class embedding.
pub fn st_zero_shot(query: &[f64], class_embeddings: &DMatrix<f64>) -> Result<Vec<f64>> {
    if query.len() != class_embeddings.ncols() {
        return Err(HecError::ShapeMismatch(format!(
            "query has {} features, class embeddings have {}",
            query.len(),
            class_embeddings.ncols()
        )));
    }
    Ok(class_embeddings
        .row_iter()
        .map(|c| c.iter().zip(query).map(|(a, b)| a * b).sum())
        .collect())
}
