//! Target-domain evaluation. The only module that reads hidden target labels.

use serde::{Deserialize, Serialize};

use crate::datasynth::DomainPair;
use crate::error::Result;
use crate::network::Network;
use crate::numerics::{argmax, kl_divergence, ProbabilityMatrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    /// Mean of the per-class recalls.
    pub balanced_accuracy: f64,
    /// Recall of every class in the target label space, in that order.
    pub per_class_recall: Vec<f64>,
}

/// Scores predictions over `class_set`; classes without samples are skipped
/// in the balanced mean.
pub fn evaluate_predictions(predictions: &[usize], truth: &[usize], class_set: &[usize]) -> Evaluation {
    assert_eq!(predictions.len(), truth.len(), "prediction/truth length mismatch");
    let n = truth.len();
    let correct = predictions.iter().zip(truth).filter(|(p, t)| p == t).count();
    let mut recalls = Vec::with_capacity(class_set.len());
    let mut balanced = Vec::new();
    for &c in class_set {
        let members = truth.iter().filter(|&&t| t == c).count();
        let hits = predictions.iter().zip(truth).filter(|(&p, &t)| t == c && p == c).count();
        let recall = if members == 0 { 0.0 } else { hits as f64 / members as f64 };
        if members > 0 {
            balanced.push(recall);
        }
        recalls.push(recall);
    }
    Evaluation {
        accuracy: if n == 0 { 0.0 } else { correct as f64 / n as f64 },
        balanced_accuracy: if balanced.is_empty() {
            0.0
        } else {
            balanced.iter().sum::<f64>() / balanced.len() as f64
        },
        per_class_recall: recalls,
    }
}

/// Network argmax predictions on the unlabeled target set.
pub fn predict(net: &Network, pair: &DomainPair) -> Result<Vec<usize>> {
    let (_, logits) = net.infer(pair.target_unlabeled.view())?;
    Ok(logits.outer_iter().map(argmax).collect())
}

pub fn evaluate(net: &Network, pair: &DomainPair) -> Result<Evaluation> {
    Ok(evaluate_predictions(
        &predict(net, pair)?,
        pair.target_truth(),
        &pair.target_class_set,
    ))
}

/// Accuracy of a label matrix's row argmax against the hidden target labels.
pub fn pseudo_label_accuracy(labels: &ProbabilityMatrix, pair: &DomainPair) -> f64 {
    let truth = pair.target_truth();
    if truth.is_empty() {
        return 0.0;
    }
    let hits = labels
        .argmax_rows()
        .iter()
        .zip(truth)
        .filter(|(a, b)| a == b)
        .count();
    hits as f64 / truth.len() as f64
}

/// Empirical class frequencies of the unlabeled target set.
pub fn target_class_frequencies(pair: &DomainPair) -> Vec<f64> {
    let counts = pair.target_class_counts();
    let total: usize = counts.iter().sum();
    counts.iter().map(|&n| n as f64 / total.max(1) as f64).collect()
}

/// `KL(prior || true target frequencies)`, restricted to the target label
/// space with the prior renormalized over it.
pub fn prior_kl(prior: &[f64], pair: &DomainPair) -> f64 {
    let freq = target_class_frequencies(pair);
    let set = &pair.target_class_set;
    let mass: f64 = set.iter().map(|&c| prior[c]).sum();
    let p: Vec<f64> = set.iter().map(|&c| prior[c] / mass).collect();
    let q: Vec<f64> = set.iter().map(|&c| freq[c]).collect();
    kl_divergence(&p, &q)
}

/// Per-epoch scoring of training-time label matrices, built from the pair so
/// the trainer never touches the hidden labels itself.
pub struct Evaluator<'a> {
    pair: &'a DomainPair,
}

impl<'a> Evaluator<'a> {
    pub fn new(pair: &'a DomainPair) -> Self {
        Self { pair }
    }

    pub fn network(&self, net: &Network) -> Result<Evaluation> {
        evaluate(net, self.pair)
    }

    pub fn labels(&self, labels: &ProbabilityMatrix) -> f64 {
        pseudo_label_accuracy(labels, self.pair)
    }

    pub fn prior(&self, prior: &[f64]) -> f64 {
        prior_kl(prior, self.pair)
    }
}
