//! Online target-domain generative classifier.
//!
//! A `C`-component mixture over target features with posterior
//! `p(c | f) = softmax_c(log pi_c + cos(f, mu_c) / tau)`. The prior `pi` and
//! the unit-norm prototypes `mu` live in a [`MemoryBank`] that is updated by
//! exponential moving averages after every target mini-batch.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    argmax, cosine_matrix, l2_normalize_rows, safe_ln, softmax_in_place, ProbabilityMatrix, Simplex,
};

/// How the batch prior estimate is turned into a probability vector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorUpdate {
    /// Softmax each sample's scaled similarities, then average over the batch.
    #[default]
    SoftmaxThenMean,
    /// Average the scaled similarities over the batch, then softmax the average.
    MeanThenNormalize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BankConfig {
    pub temperature: f64,
    /// `gamma_pi`
    pub prior_decay: f64,
    /// `gamma_mu`
    pub prototype_decay: f64,
    #[serde(default)]
    pub prior_update: PriorUpdate,
}

impl Default for BankConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            prior_decay: 0.1,
            prototype_decay: 0.9,
            prior_update: PriorUpdate::default(),
        }
    }
}

impl BankConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::invalid("temperature must be positive"));
        }
        for (name, v) in [("prior_decay", self.prior_decay), ("prototype_decay", self.prototype_decay)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("{name} must be in [0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

/// `log pi_c + cos(f_j, mu_c) / tau` for every sample and class.
pub fn prototype_scores(
    features: ArrayView2<f64>,
    prototypes: ArrayView2<f64>,
    prior: &Simplex,
    temperature: f64,
) -> Result<Array2<f64>> {
    if prototypes.nrows() != prior.len() {
        return Err(Error::invalid(format!(
            "{} prototypes but a prior over {} classes",
            prototypes.nrows(),
            prior.len()
        )));
    }
    let log_prior = prior.mapv(safe_ln);
    let mut scores = cosine_matrix(features, prototypes)?;
    scores.mapv_inplace(|s| s / temperature);
    scores += &log_prior;
    Ok(scores)
}

/// Prior-weighted cosine posterior; the kernel behind `P_g`, `P_f` and the bank posterior.
pub fn prototype_posterior(
    features: ArrayView2<f64>,
    prototypes: ArrayView2<f64>,
    prior: &Simplex,
    temperature: f64,
) -> Result<ProbabilityMatrix> {
    let mut p = prototype_scores(features, prototypes, prior, temperature)?;
    for row in p.outer_iter_mut() {
        softmax_in_place(row);
    }
    Ok(ProbabilityMatrix::from_normalized(p))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryBank {
    prior: Simplex,
    prototypes: Array2<f64>,
    config: BankConfig,
}

impl MemoryBank {
    /// Uniform prior; prototypes are unit-normalized copies of `initial_prototypes`.
    pub fn new(config: BankConfig, initial_prototypes: ArrayView2<f64>) -> Result<Self> {
        config.validate()?;
        let c = initial_prototypes.nrows();
        if c == 0 {
            return Err(Error::DegenerateInit("no prototypes supplied".into()));
        }
        let prototypes = l2_normalize_rows(initial_prototypes)
            .map_err(|e| Error::DegenerateInit(format!("zero prototype: {e}")))?;
        for a in 0..c {
            for b in a + 1..c {
                if prototypes.row(a).dot(&prototypes.row(b)) >= 1.0 - 1e-12 {
                    return Err(Error::DegenerateInit(format!(
                        "prototypes {a} and {b} point in the same direction"
                    )));
                }
            }
        }
        Ok(Self {
            prior: Simplex::uniform(c),
            prototypes,
            config,
        })
    }

    pub fn prior(&self) -> &Simplex {
        &self.prior
    }

    pub fn prototypes(&self) -> ArrayView2<'_, f64> {
        self.prototypes.view()
    }

    pub fn config(&self) -> &BankConfig {
        &self.config
    }

    pub fn class_count(&self) -> usize {
        self.prototypes.nrows()
    }

    /// Overrides the prior; used by tests and checkpoint tooling.
    pub fn set_prior(&mut self, prior: Simplex) -> Result<()> {
        if prior.len() != self.class_count() {
            return Err(Error::invalid("prior has the wrong number of classes"));
        }
        self.prior = prior;
        Ok(())
    }

    pub fn posterior(&self, features: ArrayView2<f64>) -> Result<ProbabilityMatrix> {
        prototype_posterior(features, self.prototypes.view(), &self.prior, self.config.temperature)
    }

    /// Argmax-posterior class of every row; ties go to the smaller index.
    pub fn assign(&self, features: ArrayView2<f64>) -> Result<Vec<usize>> {
        let scores = prototype_scores(features, self.prototypes.view(), &self.prior, self.config.temperature)?;
        Ok(scores.outer_iter().map(argmax).collect())
    }

    /// One-hot pseudo-labels `Y_M`.
    pub fn pseudo_labels(&self, features: ArrayView2<f64>) -> Result<ProbabilityMatrix> {
        ProbabilityMatrix::one_hot(&self.assign(features)?, self.class_count())
    }

    /// One row per class: `class,prior,p0..p{d-1}`.
    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        let header: Vec<String> = (0..self.prototypes.ncols()).map(|i| format!("p{i}")).collect();
        writeln!(out, "class,prior,{}", header.join(","))?;
        for (c, row) in self.prototypes.outer_iter().enumerate() {
            let coords: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(out, "{c},{},{}", self.prior[c], coords.join(","))?;
        }
        Ok(())
    }

    /// Batch prior estimate from similarities to the classifier prototypes.
    pub fn batch_prior_estimate(
        &self,
        batch_features: ArrayView2<f64>,
        classifier_prototypes: ArrayView2<f64>,
    ) -> Result<Array1<f64>> {
        if classifier_prototypes.nrows() != self.class_count() {
            return Err(Error::invalid("classifier prototype count does not match the bank"));
        }
        let mut s = cosine_matrix(batch_features, classifier_prototypes)?;
        s.mapv_inplace(|v| v / self.config.temperature);
        match self.config.prior_update {
            PriorUpdate::SoftmaxThenMean => {
                for row in s.outer_iter_mut() {
                    softmax_in_place(row);
                }
                Ok(s.mean_axis(Axis(0)).expect("batch is nonempty"))
            }
            PriorUpdate::MeanThenNormalize => {
                let mut mean = s.mean_axis(Axis(0)).expect("batch is nonempty");
                softmax_in_place(mean.view_mut());
                Ok(mean)
            }
        }
    }

    /// `pi <- (1 - gamma_pi) pi + gamma_pi P_bar`, renormalized. Empty batches are a no-op.
    pub fn update_prior(
        &mut self,
        batch_features: ArrayView2<f64>,
        classifier_prototypes: ArrayView2<f64>,
    ) -> Result<()> {
        if batch_features.nrows() == 0 {
            return Ok(());
        }
        let estimate = self.batch_prior_estimate(batch_features, classifier_prototypes)?;
        let g = self.config.prior_decay;
        if g == 0.0 {
            return Ok(());
        }
        let mixed = self.prior.as_array() * (1.0 - g) + estimate * g;
        self.prior = Simplex::normalized(mixed)?;
        Ok(())
    }

    /// Moves each prototype toward the mean of the batch features assigned to
    /// it, then renormalizes. Classes with no assignee keep their prototype.
    pub fn update_prototypes(&mut self, batch_features: ArrayView2<f64>) -> Result<()> {
        if batch_features.nrows() == 0 {
            return Ok(());
        }
        let assignment = self.assign(batch_features)?;
        let g = self.config.prototype_decay;
        if g == 0.0 {
            return Ok(());
        }
        let (c, d) = self.prototypes.dim();
        let mut sums = Array2::<f64>::zeros((c, d));
        let mut counts = vec![0usize; c];
        for (row, &k) in batch_features.outer_iter().zip(&assignment) {
            sums.row_mut(k).scaled_add(1.0, &row);
            counts[k] += 1;
        }
        for k in (0..c).filter(|&k| counts[k] > 0) {
            let mean = sums.row(k).mapv(|v| v / counts[k] as f64);
            let mixed = self.prototypes.row(k).mapv(|v| v * (1.0 - g)) + mean * g;
            let norm = mixed.dot(&mixed).sqrt();
            // an exactly cancelling update has no direction; keep the old prototype
            if norm > 0.0 && norm.is_finite() {
                self.prototypes.row_mut(k).assign(&(mixed / norm));
            }
        }
        Ok(())
    }
}
