//! Structure-similarity regularization.
//!
//! Builds predictive label distributions from cosine similarity to the
//! classifier prototypes (`P_g`) or to learnable embedding prototypes
//! (`P_f`), turns them into class-balanced auxiliary distributions `Q`, and
//! provides the soft cross-entropy used to fit the network to fixed targets.
//!
//! The auxiliary distribution rescales every column of `P` by the inverse
//! square root of its total mass and renormalizes each row:
//!
//! ```text
//! Q(c|j) = [P(c|j) / sqrt(sum_j P(c|j))] / sum_c' [P(c'|j) / sqrt(sum_j P(c'|j))]
//! ```

use ndarray::{Array1, Array2, ArrayView2, ArrayViewMut2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generative::{prototype_posterior, MemoryBank};
use crate::numerics::{kl_rows, l2_normalize_rows, safe_ln, FeatureMatrix, ProbabilityMatrix, Simplex, LOG_EPS};

/// `P_g`: posterior over classes from similarity to the classifier prototypes.
pub fn predictive_g(
    features: ArrayView2<f64>,
    classifier_prototypes: ArrayView2<f64>,
    prior: &Simplex,
    temperature: f64,
) -> Result<ProbabilityMatrix> {
    prototype_posterior(features, classifier_prototypes, prior, temperature)
}

/// `P_f`: posterior over classes from similarity to the embedding prototypes.
pub fn predictive_f(
    features: ArrayView2<f64>,
    embedding: &EmbeddingPrototypes,
    prior: &Simplex,
    temperature: f64,
) -> Result<ProbabilityMatrix> {
    prototype_posterior(features, embedding.view(), prior, temperature)
}

/// Closed-form balanced auxiliary distribution over the rows of `p`.
///
/// Column sums are taken over every row of `p`, so callers should pass the
/// full unlabeled target set. A class with no mass is treated as having
/// [`LOG_EPS`] mass.
pub fn auxiliary_distribution(p: &ProbabilityMatrix) -> ProbabilityMatrix {
    auxiliary_with_column_mass(p, &p.column_sums())
}

/// Same reweighting as [`auxiliary_distribution`] with externally supplied
/// column masses (the streaming variant keeps these as a running average).
pub fn auxiliary_with_column_mass(p: &ProbabilityMatrix, column_mass: &Array1<f64>) -> ProbabilityMatrix {
    assert_eq!(column_mass.len(), p.n_classes(), "column mass length mismatch");
    let weights = column_mass.mapv(|m| {
        if m <= 0.0 {
            log::warn!("class column has zero mass; treating it as {LOG_EPS}");
        }
        1.0 / m.max(LOG_EPS).sqrt()
    });
    let mut q = p.as_array() * &weights;
    for mut row in q.outer_iter_mut() {
        let s = row.sum();
        if s > 0.0 {
            row.mapv_inplace(|v| v / s);
        } else {
            let k = row.len() as f64;
            row.fill(1.0 / k);
        }
    }
    ProbabilityMatrix::from_normalized(q)
}

/// Exact minimizer of [`objective_value`] for fixed `p`.
///
/// The stationarity condition is `Q(c|j) ∝ P(c|j) v_c` with `v_c = 1 / Q_bar(c)`.
/// Iterating it directly oscillates, so each step moves `log v` halfway to
/// `-log Q_bar`, which contracts. Not used by the default pipeline.
pub fn auxiliary_fixed_point(p: &ProbabilityMatrix, max_iterations: usize, tolerance: f64) -> ProbabilityMatrix {
    let n = p.nrows().max(1) as f64;
    let mut log_v = Array1::<f64>::zeros(p.n_classes());
    let mut q = p.clone();
    for _ in 0..max_iterations {
        let mass = q.column_sums() / n;
        log_v.zip_mut_with(&mass, |u, &m| *u = 0.5 * (*u - m.max(LOG_EPS).ln()));
        let top = log_v.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let next = auxiliary_reweight(p, &log_v.mapv(|u| (u - top).exp()));
        let delta = (next.as_array() - q.as_array()).mapv(f64::abs).fold(0.0, |a: f64, &v| a.max(v));
        q = next;
        if delta < tolerance {
            break;
        }
    }
    q
}

fn auxiliary_reweight(p: &ProbabilityMatrix, weights: &Array1<f64>) -> ProbabilityMatrix {
    let mut q = p.as_array() * weights;
    for mut row in q.outer_iter_mut() {
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    ProbabilityMatrix::from_normalized(q)
}

/// `(1/N) KL(Q || P) + sum_c Q_bar_c log Q_bar_c`, with `Q_bar` the column means of `Q`.
pub fn objective_value(q: &ProbabilityMatrix, p: &ProbabilityMatrix) -> Result<f64> {
    let kl = kl_rows(q, p)?;
    let n = q.nrows();
    if n == 0 {
        return Ok(0.0);
    }
    let neg_entropy: f64 = q
        .column_means()
        .iter()
        .filter(|&&m| m > 0.0)
        .map(|&m| m * m.ln())
        .sum();
    Ok(kl / n as f64 + neg_entropy)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegularizerOutput {
    pub p: ProbabilityMatrix,
    pub q: ProbabilityMatrix,
    pub objective_value: f64,
    pub class_proportions: Simplex,
}

/// Solves for `Q` given `P` and reports the objective at `(Q, P)`.
pub fn regularize(p: ProbabilityMatrix) -> Result<RegularizerOutput> {
    let q = auxiliary_distribution(&p);
    let objective_value = objective_value(&q, &p)?;
    let class_proportions = q.column_means();
    Ok(RegularizerOutput {
        p,
        q,
        objective_value,
        class_proportions,
    })
}

/// Running average of per-sample column mass for the streaming `Q` variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamingColumnMass {
    mean_mass: Array1<f64>,
    decay: f64,
}

impl StreamingColumnMass {
    /// Starts from the column means of `initial` (typically the epoch-start `P`).
    pub fn new(initial: &ProbabilityMatrix, decay: f64) -> Self {
        Self {
            mean_mass: initial.column_means().as_array().clone(),
            decay,
        }
    }

    pub fn observe(&mut self, batch: &ProbabilityMatrix) {
        if batch.nrows() == 0 {
            return;
        }
        let m = batch.column_means();
        self.mean_mass = &self.mean_mass * (1.0 - self.decay) + m.as_array() * self.decay;
    }

    /// `Q` for a batch; only the relative column masses matter.
    pub fn auxiliary(&self, batch: &ProbabilityMatrix) -> ProbabilityMatrix {
        auxiliary_with_column_mass(batch, &self.mean_mass)
    }
}

/// Learnable embedding prototypes `mu^f`, re-seeded from the memory bank every epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingPrototypes {
    values: Array2<f64>,
}

impl EmbeddingPrototypes {
    /// Value copy of the bank prototypes; later gradient steps never write back.
    pub fn from_bank(bank: &MemoryBank) -> Self {
        Self {
            values: bank.prototypes().to_owned(),
        }
    }

    pub fn from_values(values: Array2<f64>) -> Result<Self> {
        Ok(Self {
            values: l2_normalize_rows(values.view())?,
        })
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn values_mut(&mut self) -> &mut Array2<f64> {
        &mut self.values
    }

    pub fn values_view_mut(&mut self) -> ArrayViewMut2<'_, f64> {
        self.values.view_mut()
    }
}

/// Value and gradients of `-(1/B) sum_j sum_c y_jc log P(c | f_j)` where `P`
/// is the prior-weighted cosine posterior over `prototypes`.
#[derive(Clone, Debug)]
pub struct PrototypeLoss {
    pub value: f64,
    pub grad_features: FeatureMatrix,
    pub grad_prototypes: Array2<f64>,
    pub posterior: ProbabilityMatrix,
}

pub fn prototype_soft_cross_entropy(
    features: ArrayView2<f64>,
    prototypes: ArrayView2<f64>,
    prior: &Simplex,
    temperature: f64,
    targets: &ProbabilityMatrix,
) -> Result<PrototypeLoss> {
    if targets.dim() != (features.nrows(), prototypes.nrows()) {
        return Err(Error::invalid("soft targets do not match the batch shape"));
    }
    let b = features.nrows();
    if b == 0 {
        return Ok(PrototypeLoss {
            value: 0.0,
            grad_features: Array2::zeros(features.raw_dim()),
            grad_prototypes: Array2::zeros(prototypes.raw_dim()),
            posterior: targets.clone(),
        });
    }
    let posterior = prototype_posterior(features, prototypes, prior, temperature)?;
    let value = -targets
        .iter()
        .zip(posterior.iter())
        .map(|(&y, &p)| if y > 0.0 { y * safe_ln(p) } else { 0.0 })
        .sum::<f64>()
        / b as f64;

    let feature_norms = features.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    let proto_norms = prototypes.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    let f_hat = &features / &feature_norms.view().insert_axis(Axis(1));
    let w_hat = &prototypes / &proto_norms.view().insert_axis(Axis(1));
    let sims = f_hat.dot(&w_hat.t());

    // d loss / d similarity
    let target_mass = targets.sum_axis(Axis(1));
    let mut g = posterior.as_array() * &target_mass.view().insert_axis(Axis(1)) - targets.as_array();
    g.mapv_inplace(|v| v / (b as f64 * temperature));

    let gs = &g * &sims;
    let row_weight = gs.sum_axis(Axis(1));
    let col_weight = gs.sum_axis(Axis(0));
    let grad_features = (g.dot(&w_hat) - &f_hat * &row_weight.view().insert_axis(Axis(1)))
        / feature_norms.view().insert_axis(Axis(1));
    let grad_prototypes = (g.t().dot(&f_hat) - &w_hat * &col_weight.view().insert_axis(Axis(1)))
        / proto_norms.view().insert_axis(Axis(1));
    Ok(PrototypeLoss {
        value,
        grad_features,
        grad_prototypes,
        posterior,
    })
}
