//! Label mixup of auxiliary soft labels with generative pseudo-labels.

use crate::error::{Error, Result};
use crate::numerics::ProbabilityMatrix;

pub const DEFAULT_GAMMA_Q: f64 = 0.2;

/// Row-wise `(1 - gamma_q) Q + gamma_q Y_M`.
pub fn mixup_labels(q: &ProbabilityMatrix, generative: &ProbabilityMatrix, gamma_q: f64) -> Result<ProbabilityMatrix> {
    if q.dim() != generative.dim() {
        return Err(Error::invalid(format!(
            "cannot mix {:?} soft labels with {:?} pseudo-labels",
            q.dim(),
            generative.dim()
        )));
    }
    if !(0.0..=1.0).contains(&gamma_q) {
        return Err(Error::invalid(format!("gamma_q must be in [0, 1], got {gamma_q}")));
    }
    let mixed = q.as_array() * (1.0 - gamma_q) + generative.as_array() * gamma_q;
    Ok(ProbabilityMatrix::from_normalized(mixed))
}

/// The pair of fused targets for the classifier branch and the embedding branch.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedLabels {
    pub classifier: ProbabilityMatrix,
    pub embedding: ProbabilityMatrix,
    pub gamma_q: f64,
}

impl FusedLabels {
    pub fn new(
        q_classifier: &ProbabilityMatrix,
        q_embedding: &ProbabilityMatrix,
        generative: &ProbabilityMatrix,
        gamma_q: f64,
    ) -> Result<Self> {
        Ok(Self {
            classifier: mixup_labels(q_classifier, generative, gamma_q)?,
            embedding: mixup_labels(q_embedding, generative, gamma_q)?,
            gamma_q,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use proptest::prelude::*;

    fn stochastic(v: Vec<f64>, rows: usize, cols: usize) -> ProbabilityMatrix {
        let mut m = Array2::from_shape_vec((rows, cols), v).unwrap();
        for mut r in m.outer_iter_mut() {
            let s = r.sum();
            r.mapv_inplace(|x| x / s);
        }
        ProbabilityMatrix::new(m).unwrap()
    }

    #[test]
    fn endpoints_and_arithmetic() {
        let q = ProbabilityMatrix::new(array![[0.6, 0.4]]).unwrap();
        let y = ProbabilityMatrix::one_hot(&[0], 2).unwrap();
        assert_eq!(mixup_labels(&q, &y, 0.0).unwrap(), q);
        assert_eq!(mixup_labels(&q, &y, 1.0).unwrap(), y);
        let m = mixup_labels(&q, &y, 0.2).unwrap();
        assert!((m[[0, 0]] - 0.68).abs() < 1e-15 && (m[[0, 1]] - 0.32).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_arguments() {
        let q = ProbabilityMatrix::uniform(2, 3);
        assert!(mixup_labels(&q, &ProbabilityMatrix::uniform(3, 3), 0.5).is_err());
        assert!(mixup_labels(&q, &q, 1.5).is_err());
    }

    proptest! {
        #[test]
        fn mix_is_convex(
            qv in proptest::collection::vec(0.01f64..1.0, 12),
            labels in proptest::collection::vec(0usize..4, 3),
            g in 0.0f64..=1.0,
        ) {
            let q = stochastic(qv, 3, 4);
            let y = ProbabilityMatrix::one_hot(&labels, 4).unwrap();
            let m = mixup_labels(&q, &y, g).unwrap();
            prop_assert!(m.max_row_sum_error() < 1e-12);
            for ((&a, &b), &v) in q.iter().zip(y.iter()).zip(m.iter()) {
                prop_assert!(v >= a.min(b) - 1e-15 && v <= a.max(b) + 1e-15);
            }
        }
    }
}
