//! Per-head Gaussian discriminant analysis with a shared, shrunken precision.
//!
//! Each head is modelled as class-conditional Gaussians `N(μ_c, Σ)` with one
//! covariance shared by all classes. The precision is the empirical-Bayes
//! ridge estimator
//!
//! ```text
//! Σ⁻¹ ≈ D · ((B − 1)·Σ̂ + tr(Σ̂)·I)⁻¹
//! ```
//!
//! where `Σ̂` is the pooled within-class covariance over `B` support samples.
//! Logits are the negative half squared Mahalanobis distance to each class
//! mean; the uniform-prior constant is dropped since it cancels in softmax.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{HecError, Result};
use crate::feature_store::{FeatureBank, SampleKind};
use crate::parallel;

/// Precision used for a head whose features are all identical (`tr Σ̂ = 0`):
/// `(1/ε)·I`, which turns the model into a nearest-mean classifier.
pub const DEGENERATE_EPSILON: f64 = 1e-6;

/// Fitted model for one head.
///
/// The precision is kept in factored form `P = s·L⁻ᵀL⁻¹`, where `L` is the
/// Cholesky factor of the shrunken scatter matrix (identity for degenerate
/// heads) and `s` the scalar in front. Logits only need triangular solves
/// against `L`; the dense precision matrix is formed on first request.
#[derive(Debug, Clone)]
pub struct HeadGda {
    means: DMatrix<f64>,
    pooled_cov: DMatrix<f64>,
    factor: Option<DMatrix<f64>>,
    scale: f64,
    precision: OnceLock<DMatrix<f64>>,
    num_support: usize,
    // Whitened means L⁻¹μ_c as rows, and their squared norms.
    white_means: DMatrix<f64>,
    white_sq: DVector<f64>,
}

/// Class logits of a single query under one head.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassLogits(pub Vec<f64>);

impl ClassLogits {
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

impl HeadGda {
    /// `[C × D]` class means.
    pub fn means(&self) -> &DMatrix<f64> {
        &self.means
    }

    pub fn pooled_cov(&self) -> &DMatrix<f64> {
        &self.pooled_cov
    }

    /// Dense `[D × D]` precision matrix.
    pub fn precision(&self) -> &DMatrix<f64> {
        self.precision.get_or_init(|| match &self.factor {
            Some(l) => {
                let mut p = lower_factor_inverse_gram(l);
                p.scale_mut(self.scale);
                p
            }
            None => DMatrix::identity(self.dim(), self.dim()).scale(self.scale),
        })
    }

    pub fn num_support(&self) -> usize {
        self.num_support
    }

    pub fn num_classes(&self) -> usize {
        self.means.nrows()
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    /// Whitens the columns of `[D × n]` in place: `L⁻¹X`.
    fn whiten_mut(&self, x: &mut DMatrix<f64>) {
        if let Some(l) = &self.factor {
            let solved = l.solve_lower_triangular_mut(x);
            debug_assert!(solved, "Cholesky factor has a positive diagonal");
        }
    }

    /// Logits for one query via the expanded form `xᵀPx − 2xᵀPμ_c + μ_cᵀPμ_c`,
    /// each term evaluated in whitened coordinates.
    pub fn logits(&self, query: &[f64]) -> Result<ClassLogits> {
        if query.len() != self.dim() {
            return Err(HecError::ShapeMismatch(format!(
                "query has {} dims, model has {}",
                query.len(),
                self.dim()
            )));
        }
        let mut z = DMatrix::from_column_slice(query.len(), 1, query);
        self.whiten_mut(&mut z);
        let zz = z.norm_squared();
        let cross = &self.white_means * &z;
        Ok(ClassLogits(
            (0..self.num_classes())
                .map(|c| -0.5 * self.scale * (zz - 2.0 * cross[c] + self.white_sq[c]))
                .collect(),
        ))
    }

    /// `[Q × C]` logits for a batch of queries given as rows of `[Q × D]`.
    pub fn logits_batch(&self, queries: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if queries.ncols() != self.dim() {
            return Err(HecError::ShapeMismatch(format!(
                "queries have {} dims, model has {}",
                queries.ncols(),
                self.dim()
            )));
        }
        let mut z = queries.transpose();
        self.whiten_mut(&mut z);
        let cross = z.transpose() * self.white_means.transpose();
        let c = self.num_classes();
        Ok(DMatrix::from_fn(queries.nrows(), c, |i, k| {
            let zz = z.column(i).norm_squared();
            -0.5 * self.scale * (zz - 2.0 * cross[(i, k)] + self.white_sq[k])
        }))
    }

    /// Debug view of the fitted parameters.
    pub fn dump(&self) -> HeadGdaDump {
        let rows = |m: &DMatrix<f64>| (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect();
        HeadGdaDump {
            num_support: self.num_support,
            means: rows(&self.means),
            precision: rows(self.precision()),
        }
    }
}

/// JSON-friendly copy of a model, for inspection only.
#[derive(Debug, Clone, Serialize)]
pub struct HeadGdaDump {
    pub num_support: usize,
    pub means: Vec<Vec<f64>>,
    pub precision: Vec<Vec<f64>>,
}

/// Fits one head from `[B × D]` support features.
pub fn fit_head(support: &DMatrix<f64>, labels: &[usize], num_classes: usize) -> Result<HeadGda> {
    let (b, d) = support.shape();
    if labels.len() != b {
        return Err(HecError::ShapeMismatch(format!("{} labels for {b} samples", labels.len())));
    }
    if b < 2 {
        return Err(HecError::TooFewSamples(b));
    }
    if support.iter().any(|v| !v.is_finite()) {
        return Err(HecError::NonFinite("support features"));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
        return Err(HecError::InvalidParameter(format!("label {bad} ≥ {num_classes} classes")));
    }

    let mut counts = vec![0usize; num_classes];
    let mut means = DMatrix::<f64>::zeros(num_classes, d);
    for (i, &y) in labels.iter().enumerate() {
        counts[y] += 1;
        let mut row = means.row_mut(y);
        row += support.row(i);
    }
    for (c, &n) in counts.iter().enumerate() {
        if n == 0 {
            return Err(HecError::EmptyClass(c));
        }
        means.row_mut(c).unscale_mut(n as f64);
    }

    let mut centered = support.clone();
    for (i, &y) in labels.iter().enumerate() {
        let mut row = centered.row_mut(i);
        row -= means.row(y);
    }
    // An explicit transpose routes the product through the blocked GEMM kernel.
    let mut pooled_cov = centered.transpose() * &centered;
    pooled_cov.unscale_mut((b - 1) as f64);
    symmetrize(&mut pooled_cov);

    let trace = pooled_cov.trace();
    let (factor, scale) = if trace > 0.0 {
        let mut shrunk = pooled_cov.scale((b - 1) as f64);
        for k in 0..d {
            shrunk[(k, k)] += trace;
        }
        let chol = shrunk.cholesky().ok_or_else(|| {
            HecError::InvalidParameter("ridge-regularized covariance is not positive definite".into())
        })?;
        (Some(chol.unpack()), d as f64)
    } else {
        (None, 1.0 / DEGENERATE_EPSILON)
    };

    let mut model = HeadGda {
        means,
        pooled_cov,
        factor,
        scale,
        precision: OnceLock::new(),
        num_support: b,
        white_means: DMatrix::zeros(0, 0),
        white_sq: DVector::zeros(0),
    };
    let mut w = model.means.transpose();
    model.whiten_mut(&mut w);
    model.white_sq = DVector::from_fn(num_classes, |c, _| w.column(c).norm_squared());
    model.white_means = w.transpose();
    Ok(model)
}

/// `L⁻ᵀL⁻¹` for a lower-triangular `L` with positive diagonal, i.e. the
/// inverse of `LLᵀ`. Both steps touch only one triangle and the result is
/// exactly symmetric.
fn lower_factor_inverse_gram(factor: &DMatrix<f64>) -> DMatrix<f64> {
    let n = factor.nrows();
    let mut l = factor.clone();

    // Lower-triangular inverse in place, one column at a time. Column j of
    // L⁻¹ solves L x = e_j and is zero above the diagonal.
    let mut x = vec![0.0; n];
    for j in 0..n {
        x[j..].iter_mut().for_each(|v| *v = 0.0);
        x[j] = 1.0;
        for i in j..n {
            let col = &l.as_slice()[i * n..(i + 1) * n];
            let xi = x[i] / col[i];
            x[i] = xi;
            if xi != 0.0 {
                for (xk, &lk) in x[i + 1..].iter_mut().zip(&col[i + 1..]) {
                    *xk -= lk * xi;
                }
            }
        }
        // Solves for later columns only read columns > j of L.
        l.as_mut_slice()[j * n + j..(j + 1) * n].copy_from_slice(&x[j..]);
    }
    let linv = l;

    // (L⁻ᵀL⁻¹)_{ij} = Σ_{k ≥ max(i,j)} L⁻¹_{ki} L⁻¹_{kj}; columns are contiguous.
    let data = linv.as_slice();
    let mut p = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let cj = &data[j * n + j..(j + 1) * n];
        for i in 0..=j {
            let ci = &data[i * n + j..(i + 1) * n];
            let v = dot(ci, cj);
            p[(i, j)] = v;
            p[(j, i)] = v;
        }
    }
    p
}

/// Dot product with independent partial sums so the loop vectorizes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    const LANES: usize = 8;
    let mut acc = [0.0; LANES];
    let (a_chunks, b_chunks) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let tail: f64 = a_chunks.remainder().iter().zip(b_chunks.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in a_chunks.zip(b_chunks) {
        for k in 0..LANES {
            acc[k] += x[k] * y[k];
        }
    }
    acc.iter().sum::<f64>() + tail
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Temperature softmax `softmax(ℓ/τ)` with max-subtraction.
pub fn class_probs(logits: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(HecError::InvalidTemperature(tau));
    }
    Ok(softmax_scaled(logits, tau))
}

/// Softmax of `values / tau`; `tau` must already be validated.
pub(crate) fn softmax_scaled(values: &[f64], tau: f64) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = values.iter().map(|&v| ((v - max) / tau).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= total);
    out
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Fits every head of `bank` on the samples `rows` (labels are episode-local).
/// Heads are fitted in parallel; element `m` is the model for head `m`.
pub fn fit_all_heads(
    bank: &FeatureBank,
    rows: &[usize],
    labels: &[usize],
    num_classes: usize,
) -> Result<Vec<HeadGda>> {
    if bank.kind() != SampleKind::Image {
        return Err(HecError::InvalidParameter(format!(
            "vision heads need an image bank, got {:?}",
            bank.kind()
        )));
    }
    if rows.len() != labels.len() {
        return Err(HecError::ShapeMismatch(format!("{} rows for {} labels", rows.len(), labels.len())));
    }
    parallel::try_map_indexed(bank.heads(), |m| fit_head(&bank.head_matrix(m, rows), labels, num_classes))
}

/// Serializes fitted models for debugging.
pub fn dump_models_json(models: &[HeadGda]) -> Result<String> {
    let dumps: Vec<HeadGdaDump> = models.iter().map(HeadGda::dump).collect();
    Ok(serde_json::to_string_pretty(&dumps)?)
}
