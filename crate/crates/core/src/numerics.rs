//! Numerically stable kernels shared by every other module.
//!
//! Everything here is a pure function over `f64` arrays. Logarithms of
//! probabilities are always clamped at [`LOG_EPS`].

use std::ops::Deref;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Feature embeddings or logits, one row per sample.
pub type FeatureMatrix = Array2<f64>;

/// Lower clamp applied to every probability before taking its log.
pub const LOG_EPS: f64 = 1e-12;

/// Row sums and simplex sums must match 1 within this tolerance.
pub const STOCHASTIC_TOL: f64 = 1e-9;

#[inline]
pub fn safe_ln(p: f64) -> f64 {
    p.max(LOG_EPS).ln()
}

/// A row-stochastic `N x C` matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityMatrix(Array2<f64>);

impl ProbabilityMatrix {
    /// Validates entries in `[0, 1]` and unit row sums.
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.ncols() == 0 {
            return Err(Error::invalid("probability matrix needs at least one column"));
        }
        for (j, row) in values.outer_iter().enumerate() {
            if row.iter().any(|&v| !v.is_finite() || !(0.0..=1.0 + STOCHASTIC_TOL).contains(&v)) {
                return Err(Error::invalid(format!("row {j} has an entry outside [0, 1]")));
            }
            let s = row.sum();
            if (s - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::invalid(format!("row {j} sums to {s}")));
            }
        }
        Ok(Self(values))
    }

    /// Wraps values the caller has just normalized.
    pub(crate) fn from_normalized(values: Array2<f64>) -> Self {
        debug_assert!(values
            .outer_iter()
            .all(|r| (r.sum() - 1.0).abs() <= STOCHASTIC_TOL));
        Self(values)
    }

    pub fn uniform(rows: usize, cols: usize) -> Self {
        Self(Array2::from_elem((rows, cols), 1.0 / cols as f64))
    }

    pub fn one_hot(labels: &[usize], cols: usize) -> Result<Self> {
        let mut m = Array2::zeros((labels.len(), cols));
        for (j, &c) in labels.iter().enumerate() {
            if c >= cols {
                return Err(Error::invalid(format!("label {c} out of range for {cols} classes")));
            }
            m[[j, c]] = 1.0;
        }
        Ok(Self(m))
    }

    pub fn n_classes(&self) -> usize {
        self.0.ncols()
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    pub fn column_sums(&self) -> Array1<f64> {
        self.0.sum_axis(Axis(0))
    }

    /// Column means; uniform for an empty matrix.
    pub fn column_means(&self) -> Simplex {
        if self.0.nrows() == 0 {
            return Simplex::uniform(self.n_classes());
        }
        Simplex(self.column_sums() / self.0.nrows() as f64)
    }

    /// Per-row argmax, ties broken toward the smaller class index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        self.0.outer_iter().map(|r| argmax(r)).collect()
    }

    pub fn select_rows(&self, indices: &[usize]) -> Self {
        Self(self.0.select(Axis(0), indices))
    }

    /// Largest deviation of any row sum from 1.
    pub fn max_row_sum_error(&self) -> f64 {
        self.0
            .outer_iter()
            .map(|r| (r.sum() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

impl Deref for ProbabilityMatrix {
    type Target = Array2<f64>;

    fn deref(&self) -> &Array2<f64> {
        &self.0
    }
}

/// A probability vector over `C` classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Simplex(Array1<f64>);

impl Simplex {
    pub fn new(values: Array1<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("simplex needs at least one entry"));
        }
        if values.iter().any(|&v| !v.is_finite() || v < 0.0) {
            return Err(Error::invalid("simplex entries must be finite and nonnegative"));
        }
        let s = values.sum();
        if (s - 1.0).abs() > STOCHASTIC_TOL {
            return Err(Error::invalid(format!("simplex sums to {s}")));
        }
        Ok(Self(values))
    }

    pub fn uniform(n: usize) -> Self {
        Self(Array1::from_elem(n, 1.0 / n as f64))
    }

    /// Divides nonnegative weights by their sum.
    pub fn normalized(weights: Array1<f64>) -> Result<Self> {
        let s = weights.sum();
        if !(s.is_finite() && s > 0.0) || weights.iter().any(|&w| w < 0.0) {
            return Err(Error::invalid("weights cannot be normalized onto the simplex"));
        }
        Ok(Self(weights / s))
    }

    pub fn as_array(&self) -> &Array1<f64> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn sum_error(&self) -> f64 {
        (self.0.sum() - 1.0).abs()
    }
}

impl Deref for Simplex {
    type Target = Array1<f64>;

    fn deref(&self) -> &Array1<f64> {
        &self.0
    }
}

/// Index of the largest entry; first one wins on ties.
pub fn argmax(row: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (c, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = c;
        }
    }
    best
}

/// Stable softmax of one row in place. `row` must be finite.
pub(crate) fn softmax_in_place(mut row: ndarray::ArrayViewMut1<f64>) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    row.mapv_inplace(|v| (v - max).exp());
    let s = row.sum();
    row.mapv_inplace(|v| v / s);
}

/// Row-wise `softmax(logits / temperature)`, log-sum-exp stabilized.
pub fn softmax_rows(logits: ArrayView2<f64>, temperature: f64) -> Result<ProbabilityMatrix> {
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {temperature}")));
    }
    if logits.ncols() == 0 {
        return Err(Error::invalid("softmax over zero classes"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite logit"));
    }
    let mut out = logits.mapv(|v| v / temperature);
    for row in out.outer_iter_mut() {
        softmax_in_place(row);
    }
    Ok(ProbabilityMatrix::from_normalized(out))
}

pub fn cosine_similarity(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!("length mismatch {} vs {}", a.len(), b.len())));
    }
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::degenerate("cosine similarity of a zero vector"));
    }
    Ok((a.dot(&b) / (na * nb)).clamp(-1.0, 1.0))
}

/// `N x C` cosine similarities between the rows of `features` and `prototypes`.
pub fn cosine_matrix(features: ArrayView2<f64>, prototypes: ArrayView2<f64>) -> Result<Array2<f64>> {
    if features.ncols() != prototypes.ncols() {
        return Err(Error::invalid(format!(
            "feature dim {} does not match prototype dim {}",
            features.ncols(),
            prototypes.ncols()
        )));
    }
    let f = l2_normalize_rows(features)?;
    let p = l2_normalize_rows(prototypes)?;
    Ok(f.dot(&p.t()).mapv(|v| v.clamp(-1.0, 1.0)))
}

/// `sum_j KL(q_j || p_j)` with `p` clamped at [`LOG_EPS`].
pub fn kl_rows(q: &ProbabilityMatrix, p: &ProbabilityMatrix) -> Result<f64> {
    if q.dim() != p.dim() {
        return Err(Error::invalid(format!("shape mismatch {:?} vs {:?}", q.dim(), p.dim())));
    }
    Ok(q
        .iter()
        .zip(p.iter())
        .filter(|(&qv, _)| qv > 0.0)
        .map(|(&qv, &pv)| qv * (qv.ln() - safe_ln(pv)))
        .sum())
}

/// `KL(p || q)` between two probability vectors, clamping `q` at [`LOG_EPS`].
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pv, _)| pv > 0.0)
        .map(|(&pv, &qv)| pv * (pv.ln() - safe_ln(qv)))
        .sum()
}

/// Shannon entropy in nats.
pub fn entropy(dist: &Simplex) -> f64 {
    -dist
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

pub fn l2_normalize_rows(m: ArrayView2<f64>) -> Result<Array2<f64>> {
    let mut out = m.to_owned();
    for (j, mut row) in out.outer_iter_mut().enumerate() {
        let n = row.dot(&row).sqrt();
        if !(n > 0.0 && n.is_finite()) {
            return Err(Error::degenerate(format!("row {j} has zero or non-finite norm")));
        }
        row.mapv_inplace(|v| v / n);
    }
    Ok(out)
}

/// `-(1/normalizer) sum_j sum_c y_jc log softmax(z_j)_c` and its gradient with
/// respect to the logits. Target rows may have any nonnegative mass; all-zero
/// rows contribute nothing.
pub fn cross_entropy_with_logits(
    logits: ArrayView2<f64>,
    targets: ArrayView2<f64>,
    normalizer: f64,
) -> Result<(f64, Array2<f64>)> {
    if logits.dim() != targets.dim() {
        return Err(Error::invalid(format!(
            "logits {:?} and targets {:?} differ in shape",
            logits.dim(),
            targets.dim()
        )));
    }
    if logits.nrows() == 0 {
        return Ok((0.0, Array2::zeros(logits.raw_dim())));
    }
    let p = softmax_rows(logits, 1.0)?;
    let mut value = 0.0;
    let mut grad = Array2::zeros(logits.raw_dim());
    for ((p_row, y_row), mut g_row) in p.outer_iter().zip(targets.outer_iter()).zip(grad.outer_iter_mut()) {
        let mass = y_row.sum();
        if mass == 0.0 {
            continue;
        }
        for c in 0..p_row.len() {
            if y_row[c] > 0.0 {
                value -= y_row[c] * safe_ln(p_row[c]);
            }
            g_row[c] = (mass * p_row[c] - y_row[c]) / normalizer;
        }
    }
    Ok((value / normalizer, grad))
}
