//! Comparison labelers sharing the trainer harness: plain pseudo-labeling,
//! entropy minimization and a nearest-centroid target classifier.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{argmax, cosine_matrix, safe_ln, softmax_rows, ProbabilityMatrix};

/// Which training method a run uses: the full pipeline or one baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Get,
    Pl,
    #[serde(rename = "minent")]
    MinEnt,
    Nc,
    SourceOnly,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Get, Method::Pl, Method::MinEnt, Method::Nc, Method::SourceOnly];

    pub fn name(self) -> &'static str {
        match self {
            Method::Get => "get",
            Method::Pl => "pl",
            Method::MinEnt => "minent",
            Method::Nc => "nc",
            Method::SourceOnly => "source_only",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::invalid(format!("unknown method {s:?}")))
    }
}

/// Hard argmax labels from the network's own softmax, masked by confidence.
///
/// Returns the one-hot labels and a mask that is true where the top softmax
/// probability reaches `threshold`.
pub fn pl_labels(logits: ArrayView2<f64>, threshold: f64) -> Result<(ProbabilityMatrix, Vec<bool>)> {
    if !(0.0..1.0).contains(&threshold) {
        return Err(Error::invalid(format!("threshold must be in [0, 1), got {threshold}")));
    }
    let p = softmax_rows(logits, 1.0)?;
    let labels = p.argmax_rows();
    let mask = labels
        .iter()
        .zip(p.outer_iter())
        .map(|(&c, row)| row[c] >= threshold)
        .collect();
    Ok((ProbabilityMatrix::one_hot(&labels, logits.ncols())?, mask))
}

/// Mean Shannon entropy of `softmax(logits)` and its gradient with respect to the logits.
pub fn minent_loss(logits: ArrayView2<f64>) -> Result<(f64, Array2<f64>)> {
    let n = logits.nrows();
    if n == 0 {
        return Ok((0.0, Array2::zeros(logits.raw_dim())));
    }
    let p = softmax_rows(logits, 1.0)?;
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut total = 0.0;
    for (row, mut g) in p.outer_iter().zip(grad.outer_iter_mut()) {
        let h: f64 = -row.iter().map(|&v| v * safe_ln(v)).sum::<f64>();
        total += h;
        // dH/dz_k = -p_k (log p_k + H)
        for (k, &pk) in row.iter().enumerate() {
            g[k] = -pk * (safe_ln(pk) + h) / n as f64;
        }
    }
    Ok((total / n as f64, grad))
}

/// One-hot labels at the most cosine-similar centroid; ties go to the smaller index.
pub fn nc_labels(features: ArrayView2<f64>, centroids: ArrayView2<f64>) -> Result<ProbabilityMatrix> {
    for (c, row) in centroids.outer_iter().enumerate() {
        if (row.dot(&row).sqrt() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("centroid {c} is not unit-norm")));
        }
    }
    let sims = cosine_matrix(features, centroids)?;
    let labels: Vec<usize> = sims.outer_iter().map(argmax).collect();
    ProbabilityMatrix::one_hot(&labels, centroids.nrows())
}
