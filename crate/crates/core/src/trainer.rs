//! Classification-EM training loop.
//!
//! Every epoch runs three steps:
//!
//! * **E-step**: embed the whole unlabeled target set and compute `P_g`
//!   (classifier prototypes) and `P_f` (embedding prototypes) under the
//!   memory-bank prior.
//! * **C-step**: solve the balanced auxiliary distributions `Q_g`, `Q_f`,
//!   take the bank's pseudo-labels `Y_M`, and mix them into the fused targets.
//! * **M-step**: one pass of mini-batch SGD on the source cross-entropy plus
//!   the soft cross-entropies of the fused targets against `P_g` and `P_f`,
//!   updating the memory bank after every target batch.
//!
//! The baselines reuse the same network, schedule and batching and differ
//! only in how target batches are supervised.

use std::collections::VecDeque;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{minent_loss, nc_labels, pl_labels, Method};
use crate::datasynth::{minibatches, LabeledDataset, TrainingView};
use crate::error::{Error, Result};
use crate::fusion::{mixup_labels, FusedLabels, DEFAULT_GAMMA_Q};
use crate::generative::{BankConfig, MemoryBank, PriorUpdate};
use crate::metrics::{Evaluation, Evaluator};
use crate::network::{Gradients, Network, ParamGroup, ParamSlot, SgdConfig, SgdState, DEFAULT_HIDDEN};
use crate::numerics::{cross_entropy_with_logits, l2_normalize_rows, FeatureMatrix, ProbabilityMatrix, Simplex};
use crate::regularizer::{
    auxiliary_distribution, objective_value, predictive_f, predictive_g, prototype_soft_cross_entropy,
    EmbeddingPrototypes, StreamingColumnMass,
};

/// Component switches for ablation runs of the full method.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    /// Drop the embedding-prototype term.
    pub disable_kl_f: bool,
    /// Drop the classifier-prototype term.
    pub disable_kl_g: bool,
    /// Supervise with the auxiliary distributions only (`gamma_q = 0`).
    pub disable_fusion: bool,
    /// Supervise the classifier output with the generative pseudo-labels only:
    /// both prototype terms off and `gamma_q = 1`.
    pub generative_labels_only: bool,
}

/// When the auxiliary distributions are recomputed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QRefresh {
    /// Once per epoch over the full unlabeled target set.
    #[default]
    Epoch,
    /// Per batch, with running-average column masses.
    Streaming,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub method: Method,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub hidden: Vec<usize>,
    pub temperature: f64,
    pub gamma_pi: f64,
    pub gamma_mu: f64,
    pub gamma_q: f64,
    pub prior_update: PriorUpdate,
    pub sgd: SgdConfig,
    pub seed: u64,
    pub ablation: Ablation,
    /// Mix the soft bank posterior instead of its one-hot argmax.
    pub soft_generative_labels: bool,
    pub q_refresh: QRefresh,
    pub streaming_decay: f64,
    pub pl_threshold: f64,
    /// Record column means of `P_g`, `Q_g`, `P_f`, `Q_f` every epoch.
    pub dump_balancing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Get,
            epochs: 30,
            warmup_epochs: 1,
            batch_size: 32,
            hidden: DEFAULT_HIDDEN.to_vec(),
            temperature: 1.0,
            gamma_pi: 0.01,
            gamma_mu: 0.9,
            gamma_q: DEFAULT_GAMMA_Q,
            prior_update: PriorUpdate::default(),
            sgd: SgdConfig::default(),
            seed: 0,
            ablation: Ablation::default(),
            soft_generative_labels: false,
            q_refresh: QRefresh::default(),
            streaming_decay: 0.1,
            pl_threshold: 0.0,
            dump_balancing: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        for (name, v) in [
            ("gamma_pi", self.gamma_pi),
            ("gamma_mu", self.gamma_mu),
            ("gamma_q", self.gamma_q),
            ("streaming_decay", self.streaming_decay),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("{name} must be in [0, 1], got {v}")));
            }
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::invalid("temperature must be positive"));
        }
        if !(0.0..1.0).contains(&self.pl_threshold) {
            return Err(Error::invalid("pl_threshold must be in [0, 1)"));
        }
        if self.ablation.disable_fusion && self.ablation.generative_labels_only {
            return Err(Error::invalid(
                "disable_fusion and generative_labels_only select opposite label sources",
            ));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::invalid("hidden layer widths must be positive"));
        }
        Ok(())
    }

    /// Mixup weight after applying the ablation switches.
    pub fn effective_gamma_q(&self) -> f64 {
        if self.ablation.generative_labels_only {
            1.0
        } else if self.ablation.disable_fusion {
            0.0
        } else {
            self.gamma_q
        }
    }

    pub fn kl_g_enabled(&self) -> bool {
        !(self.ablation.disable_kl_g || self.ablation.generative_labels_only)
    }

    pub fn kl_f_enabled(&self) -> bool {
        !(self.ablation.disable_kl_f || self.ablation.generative_labels_only)
    }

    pub fn bank_config(&self) -> BankConfig {
        BankConfig {
            temperature: self.temperature,
            prior_decay: if self.method == Method::Nc { 0.0 } else { self.gamma_pi },
            prototype_decay: self.gamma_mu,
            prior_update: self.prior_update,
        }
    }

    /// SHA-256 of the canonical (key-sorted) JSON encoding.
    pub fn content_hash(&self) -> String {
        content_hash(self)
    }
}

/// Hex SHA-256 of a value's JSON encoding with keys sorted.
pub fn content_hash<T: Serialize>(value: &T) -> String {
    let canonical = serde_json::to_value(value)
        .and_then(|v| serde_json::to_string(&v))
        .expect("config serializes");
    Sha256::digest(canonical.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Column means of the regularizer distributions for balancing diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalancingDiagnostics {
    pub p_g: Vec<f64>,
    pub q_g: Vec<f64>,
    pub p_f: Vec<f64>,
    pub q_f: Vec<f64>,
}

/// Metrics after one epoch; epoch 0 is the state right after warm-up.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    pub per_class_recall: Vec<f64>,
    /// Accuracy of the labels the target batches were trained on this epoch.
    pub pseudo_label_accuracy: Option<f64>,
    /// Accuracy of the memory bank's pseudo-labels this epoch.
    pub generative_label_accuracy: Option<f64>,
    pub prior: Option<Vec<f64>>,
    pub prior_kl: Option<f64>,
    pub objective_g: Option<f64>,
    pub objective_f: Option<f64>,
    pub source_loss: Option<f64>,
    pub target_loss: Option<f64>,
    pub balancing: Option<BalancingDiagnostics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: Method,
    pub config_hash: String,
    pub epochs: Vec<EpochRecord>,
}

impl RunRecord {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

/// A failed run with whatever was recorded before the failure.
#[derive(Debug, thiserror::Error)]
#[error("{error}")]
pub struct TrainFailure {
    #[source]
    pub error: Error,
    pub partial: RunRecord,
}

impl From<TrainFailure> for Error {
    fn from(f: TrainFailure) -> Self {
        f.error
    }
}

/// Borrowed view of the mutable training state, for checkpointing.
pub struct TrainerSnapshot<'a> {
    pub network: &'a Network,
    pub sgd: &'a SgdState,
    pub bank: Option<&'a MemoryBank>,
}

/// Hooks into the training loop. All methods default to no-ops.
pub trait TrainObserver {
    /// The target labels a batch is supervised with, before the SGD step.
    fn on_batch_labels(&mut self, _epoch: usize, _batch: usize, _indices: &[usize], _labels: &ProbabilityMatrix) {}

    fn on_epoch_end(&mut self, _record: &EpochRecord, _state: &TrainerSnapshot<'_>) -> Result<()> {
        Ok(())
    }
}

pub struct NoopObserver;

impl TrainObserver for NoopObserver {}

fn derive_seed(seed: u64, tag: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const TAG_NETWORK: u64 = 1;
const TAG_WARMUP: u64 = 2;
const TAG_SOURCE: u64 = 3;
const TAG_TARGET: u64 = 4;

/// Endless sequence of batches: consecutive seeded permutations.
struct BatchStream {
    n: usize,
    batch_size: usize,
    seed: u64,
    pass: u64,
    pending: VecDeque<Vec<usize>>,
}

impl BatchStream {
    fn new(n: usize, batch_size: usize, seed: u64) -> Self {
        Self {
            n,
            batch_size,
            seed,
            pass: 0,
            pending: VecDeque::new(),
        }
    }

    fn next_batch(&mut self) -> Result<Vec<usize>> {
        if self.n == 0 {
            return Ok(Vec::new());
        }
        if self.pending.is_empty() {
            self.pending.extend(minibatches(self.n, self.batch_size, self.seed, self.pass)?);
            self.pass += 1;
        }
        Ok(self.pending.pop_front().expect("refilled"))
    }
}

/// Which prototype terms the target objective includes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ObjectiveTerms {
    pub kl_g: bool,
    pub kl_f: bool,
}

/// One lockstep mini-batch for the full objective.
pub struct ObjectiveBatch<'a> {
    pub source_x: ArrayView2<'a, f64>,
    pub source_labels: &'a [usize],
    pub target_x: ArrayView2<'a, f64>,
    /// Fused targets for the classifier branch.
    pub target_g: &'a ProbabilityMatrix,
    /// Fused targets for the embedding branch.
    pub target_f: &'a ProbabilityMatrix,
}

pub struct ObjectiveGradients {
    /// Negated mini-batch objective (minimized).
    pub value: f64,
    pub source_loss: f64,
    pub target_loss: f64,
    pub network: Gradients,
    pub embedding: Array2<f64>,
    pub target_features: FeatureMatrix,
}

/// Value and exact gradients of the negated CEM objective on one batch:
/// source cross-entropy, plus soft cross-entropy of the fused targets against
/// `P_g` (through features and classifier weights) and `P_f` (through features
/// and embedding prototypes). With both prototype terms off the classifier
/// branch targets supervise the network's softmax output instead.
pub fn cem_objective(
    net: &mut Network,
    embedding: &EmbeddingPrototypes,
    prior: &Simplex,
    temperature: f64,
    batch: &ObjectiveBatch<'_>,
    terms: ObjectiveTerms,
) -> Result<ObjectiveGradients> {
    let (bs, bt) = (batch.source_x.nrows(), batch.target_x.nrows());
    let c = net.class_count();
    let x = concatenate(Axis(0), &[batch.source_x, batch.target_x]).map_err(|e| Error::invalid(e.to_string()))?;
    let (features, logits) = net.forward(x.view())?;
    let mut grad_logits = Array2::<f64>::zeros((bs + bt, c));
    let mut grad_features = Array2::<f64>::zeros(features.raw_dim());
    let mut extra_classifier = Array2::<f64>::zeros((c, net.feature_dim()));
    let mut grad_embedding = Array2::<f64>::zeros(embedding.view().raw_dim());

    let source_loss = if bs > 0 {
        let targets = ProbabilityMatrix::one_hot(batch.source_labels, c)?;
        let (v, g) = cross_entropy_with_logits(logits.slice(s![..bs, ..]), targets.view(), bs as f64)?;
        grad_logits.slice_mut(s![..bs, ..]).assign(&g);
        v
    } else {
        0.0
    };

    let target_features = features.slice(s![bs.., ..]).to_owned();
    let mut target_loss = 0.0;
    if bt > 0 {
        if terms.kl_g {
            let weights = net.classifier.prototypes().to_owned();
            let l = prototype_soft_cross_entropy(target_features.view(), weights.view(), prior, temperature, batch.target_g)?;
            target_loss += l.value;
            grad_features.slice_mut(s![bs.., ..]).scaled_add(1.0, &l.grad_features);
            extra_classifier += &l.grad_prototypes;
        }
        if terms.kl_f {
            let l = prototype_soft_cross_entropy(target_features.view(), embedding.view(), prior, temperature, batch.target_f)?;
            target_loss += l.value;
            grad_features.slice_mut(s![bs.., ..]).scaled_add(1.0, &l.grad_features);
            grad_embedding += &l.grad_prototypes;
        }
        if !terms.kl_g && !terms.kl_f {
            let (v, g) = cross_entropy_with_logits(logits.slice(s![bs.., ..]), batch.target_g.view(), bt as f64)?;
            target_loss += v;
            grad_logits.slice_mut(s![bs.., ..]).assign(&g);
        }
    }
    let mut network = net.backward(grad_logits.view(), Some(grad_features.view()))?;
    network.classifier.weights += &extra_classifier;
    Ok(ObjectiveGradients {
        value: source_loss + target_loss,
        source_loss,
        target_loss,
        network,
        embedding: grad_embedding,
        target_features,
    })
}

/// Output of the E-step over the full unlabeled target set.
pub struct EStep {
    pub features: FeatureMatrix,
    pub p_g: ProbabilityMatrix,
    pub p_f: ProbabilityMatrix,
}

pub fn e_step(net: &Network, bank: &MemoryBank, embedding: &EmbeddingPrototypes, target: ArrayView2<f64>) -> Result<EStep> {
    let (features, _) = net.infer(target)?;
    let tau = bank.config().temperature;
    let p_g = predictive_g(features.view(), net.classifier.prototypes(), bank.prior(), tau)?;
    let p_f = predictive_f(features.view(), embedding, bank.prior(), tau)?;
    Ok(EStep { features, p_g, p_f })
}

/// Output of the C-step.
pub struct CStep {
    pub q_g: ProbabilityMatrix,
    pub q_f: ProbabilityMatrix,
    pub generative: ProbabilityMatrix,
    pub fused: FusedLabels,
    pub objective_g: f64,
    pub objective_f: f64,
}

pub fn c_step(
    p_g: &ProbabilityMatrix,
    p_f: &ProbabilityMatrix,
    bank: &MemoryBank,
    target_features: ArrayView2<f64>,
    gamma_q: f64,
    soft_generative_labels: bool,
) -> Result<CStep> {
    let q_g = auxiliary_distribution(p_g);
    let q_f = auxiliary_distribution(p_f);
    let generative = if soft_generative_labels {
        bank.posterior(target_features)?
    } else {
        bank.pseudo_labels(target_features)?
    };
    let fused = FusedLabels::new(&q_g, &q_f, &generative, gamma_q)?;
    Ok(CStep {
        objective_g: objective_value(&q_g, p_g)?,
        objective_f: objective_value(&q_f, p_f)?,
        q_g,
        q_f,
        generative,
        fused,
    })
}

/// Supervised cross-entropy epochs on `source`, then per-class mean features
/// (unit-normalized) as initial prototypes.
pub fn warmup(
    net: &mut Network,
    sgd: &mut SgdState,
    source: &LabeledDataset,
    batch_size: usize,
    epochs: usize,
    seed: u64,
) -> Result<Array2<f64>> {
    if source.is_empty() {
        return Err(Error::invalid("warm-up needs source samples"));
    }
    let counts = source.class_counts();
    if let Some(missing) = counts.iter().position(|&n| n == 0) {
        return Err(Error::DegenerateInit(format!("class {missing} has no source samples")));
    }
    let c = source.class_count;
    for epoch in 0..epochs {
        for (b, idx) in minibatches(source.len(), batch_size, seed, epoch as u64)?.iter().enumerate() {
            let x = source.features.select(Axis(0), idx);
            let labels: Vec<usize> = idx.iter().map(|&j| source.labels[j]).collect();
            let (_, logits) = net.forward(x.view())?;
            let targets = ProbabilityMatrix::one_hot(&labels, c)?;
            let (loss, g) = cross_entropy_with_logits(logits.view(), targets.view(), idx.len() as f64)?;
            if !loss.is_finite() {
                return Err(diverged(epoch, b, "non-finite warm-up loss"));
            }
            let grads = net.backward(g.view(), None)?;
            sgd.step(&mut net.param_slots(&grads)).map_err(|e| with_context(e, epoch, b))?;
        }
    }
    let (features, _) = net.infer(source.features.view())?;
    let mut means = Array2::<f64>::zeros((c, net.feature_dim()));
    for (row, &l) in features.outer_iter().zip(&source.labels) {
        means.row_mut(l).scaled_add(1.0 / counts[l] as f64, &row);
    }
    l2_normalize_rows(means.view()).map_err(|e| Error::DegenerateInit(format!("zero class mean: {e}")))
}

fn diverged(epoch: usize, batch: usize, reason: &str) -> Error {
    Error::TrainingDiverged {
        epoch,
        batch,
        reason: reason.into(),
    }
}

fn with_context(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::TrainingDiverged { reason, .. } => Error::TrainingDiverged { epoch, batch, reason },
        other => other,
    }
}

/// Per-epoch target supervision decided before the M-step.
enum EpochPlan {
    None,
    /// Fixed per-sample targets for the whole epoch.
    Fixed {
        classifier: ProbabilityMatrix,
        embedding: ProbabilityMatrix,
    },
    /// Targets recomputed per batch from running column masses.
    Streaming {
        classifier: StreamingColumnMass,
        embedding: StreamingColumnMass,
    },
    /// Pseudo-labels from the network itself, per batch.
    SelfLabels,
    Entropy,
}

#[derive(Default)]
struct EpochStats {
    pseudo_label_accuracy: Option<f64>,
    generative_label_accuracy: Option<f64>,
    objective_g: Option<f64>,
    objective_f: Option<f64>,
    balancing: Option<BalancingDiagnostics>,
    source_loss: f64,
    target_loss: f64,
    batches: usize,
}

struct Trainer<'a> {
    config: &'a TrainConfig,
    view: TrainingView<'a>,
    supervised: LabeledDataset,
    net: Network,
    sgd: SgdState,
    bank: Option<MemoryBank>,
    embedding: Option<EmbeddingPrototypes>,
    sources: BatchStream,
    targets: BatchStream,
    steps_per_epoch: usize,
}

impl<'a> Trainer<'a> {
    fn new(config: &'a TrainConfig, view: TrainingView<'a>) -> Result<Self> {
        let supervised = view.source.concat(view.target_labeled)?;
        let net = Network::new(
            supervised.features.ncols(),
            &config.hidden,
            supervised.class_count,
            derive_seed(config.seed, TAG_NETWORK),
        )?;
        let source_steps = supervised.len().div_ceil(config.batch_size);
        let target_steps = view.target_unlabeled.nrows().div_ceil(config.batch_size);
        // lockstep pairing: the shorter side cycles; SourceOnly never looks at the target
        let steps_per_epoch = if config.method == Method::SourceOnly {
            source_steps
        } else {
            source_steps.max(target_steps)
        };
        let horizon = (config.warmup_epochs * source_steps + config.epochs * steps_per_epoch) as u64;
        let sources = BatchStream::new(supervised.len(), config.batch_size, derive_seed(config.seed, TAG_SOURCE));
        Ok(Self {
            config,
            view,
            sgd: SgdState::new(config.sgd.clone(), horizon)?,
            net,
            supervised,
            bank: None,
            embedding: None,
            sources,
            targets: BatchStream::new(
                view.target_unlabeled.nrows(),
                config.batch_size,
                derive_seed(config.seed, TAG_TARGET),
            ),
            steps_per_epoch,
        })
    }

    fn uses_target(&self) -> bool {
        self.config.method != Method::SourceOnly && self.view.target_unlabeled.nrows() > 0
    }

    fn embedding_slot(&self) -> usize {
        2 * (self.net.extractor.layers.len() + 1)
    }

    fn snapshot(&self) -> TrainerSnapshot<'_> {
        TrainerSnapshot {
            network: &self.net,
            sgd: &self.sgd,
            bank: self.bank.as_ref(),
        }
    }

    fn plan_epoch(&mut self, evaluator: &Evaluator<'_>, stats: &mut EpochStats) -> Result<EpochPlan> {
        if !self.uses_target() {
            return Ok(EpochPlan::None);
        }
        let cfg = self.config;
        match cfg.method {
            Method::SourceOnly => Ok(EpochPlan::None),
            Method::MinEnt => Ok(EpochPlan::Entropy),
            Method::Pl => {
                let (_, logits) = self.net.infer(self.view.target_unlabeled.view())?;
                let (labels, _) = pl_labels(logits.view(), cfg.pl_threshold)?;
                stats.pseudo_label_accuracy = Some(evaluator.labels(&labels));
                Ok(EpochPlan::SelfLabels)
            }
            Method::Nc => {
                let bank = self.bank.as_ref().expect("bank initialized after warm-up");
                let (features, _) = self.net.infer(self.view.target_unlabeled.view())?;
                let labels = nc_labels(features.view(), bank.prototypes())?;
                self.embedding = Some(EmbeddingPrototypes::from_bank(bank));
                let acc = evaluator.labels(&labels);
                stats.pseudo_label_accuracy = Some(acc);
                stats.generative_label_accuracy = Some(acc);
                Ok(EpochPlan::Fixed {
                    embedding: labels.clone(),
                    classifier: labels,
                })
            }
            Method::Get => {
                let bank = self.bank.as_ref().expect("bank initialized after warm-up");
                let embedding = EmbeddingPrototypes::from_bank(bank);
                let slot = self.embedding_slot();
                self.sgd.reset_slot(slot);
                let e = e_step(&self.net, bank, &embedding, self.view.target_unlabeled.view())?;
                let c = c_step(
                    &e.p_g,
                    &e.p_f,
                    bank,
                    e.features.view(),
                    cfg.effective_gamma_q(),
                    cfg.soft_generative_labels,
                )?;
                self.embedding = Some(embedding);
                stats.objective_g = Some(c.objective_g);
                stats.objective_f = Some(c.objective_f);
                stats.generative_label_accuracy = Some(evaluator.labels(&c.generative));
                if cfg.dump_balancing {
                    let means = |m: &ProbabilityMatrix| m.column_means().to_vec();
                    stats.balancing = Some(BalancingDiagnostics {
                        p_g: means(&e.p_g),
                        q_g: means(&c.q_g),
                        p_f: means(&e.p_f),
                        q_f: means(&c.q_f),
                    });
                }
                match cfg.q_refresh {
                    QRefresh::Epoch => {
                        stats.pseudo_label_accuracy = Some(evaluator.labels(&c.fused.classifier));
                        Ok(EpochPlan::Fixed {
                            classifier: c.fused.classifier,
                            embedding: c.fused.embedding,
                        })
                    }
                    QRefresh::Streaming => {
                        stats.pseudo_label_accuracy = Some(evaluator.labels(&c.fused.classifier));
                        Ok(EpochPlan::Streaming {
                            classifier: StreamingColumnMass::new(&e.p_g, cfg.streaming_decay),
                            embedding: StreamingColumnMass::new(&e.p_f, cfg.streaming_decay),
                        })
                    }
                }
            }
        }
    }

    /// Labels for one target batch, from the epoch plan.
    fn batch_targets(
        &self,
        plan: &mut EpochPlan,
        target_idx: &[usize],
    ) -> Result<Option<(ProbabilityMatrix, ProbabilityMatrix)>> {
        match plan {
            EpochPlan::Fixed { classifier, embedding } => {
                Ok(Some((classifier.select_rows(target_idx), embedding.select_rows(target_idx))))
            }
            EpochPlan::Streaming { classifier, embedding } => {
                let bank = self.bank.as_ref().expect("bank initialized");
                let emb = self.embedding.as_ref().expect("embedding initialized");
                let x = self.view.target_unlabeled.select(Axis(0), target_idx);
                let (features, _) = self.net.infer(x.view())?;
                let tau = self.config.temperature;
                let p_g = predictive_g(features.view(), self.net.classifier.prototypes(), bank.prior(), tau)?;
                let p_f = predictive_f(features.view(), emb, bank.prior(), tau)?;
                classifier.observe(&p_g);
                embedding.observe(&p_f);
                let generative = if self.config.soft_generative_labels {
                    bank.posterior(features.view())?
                } else {
                    bank.pseudo_labels(features.view())?
                };
                let g = self.config.effective_gamma_q();
                Ok(Some((
                    mixup_labels(&classifier.auxiliary(&p_g), &generative, g)?,
                    mixup_labels(&embedding.auxiliary(&p_f), &generative, g)?,
                )))
            }
            EpochPlan::None | EpochPlan::SelfLabels | EpochPlan::Entropy => Ok(None),
        }
    }

    fn step(
        &mut self,
        epoch: usize,
        batch: usize,
        plan: &mut EpochPlan,
        source_idx: &[usize],
        target_idx: &[usize],
        observer: &mut dyn TrainObserver,
        stats: &mut EpochStats,
    ) -> Result<()> {
        let c = self.supervised.class_count;
        let source_x = self.supervised.features.select(Axis(0), source_idx);
        let source_labels: Vec<usize> = source_idx.iter().map(|&j| self.supervised.labels[j]).collect();
        let target_x = self.view.target_unlabeled.select(Axis(0), target_idx);

        let (source_loss, target_loss, grads, embedding_grad, target_features) = match plan {
            EpochPlan::Fixed { .. } | EpochPlan::Streaming { .. } => {
                let (target_g, target_f) = self.batch_targets(plan, target_idx)?.expect("label plan");
                observer.on_batch_labels(epoch, batch, target_idx, &target_g);
                let terms = if self.config.method == Method::Get {
                    ObjectiveTerms {
                        kl_g: self.config.kl_g_enabled(),
                        kl_f: self.config.kl_f_enabled(),
                    }
                } else {
                    ObjectiveTerms { kl_g: false, kl_f: false }
                };
                let prior = self.bank.as_ref().map_or_else(|| Simplex::uniform(c), |b| b.prior().clone());
                let embedding = self.embedding.as_ref().expect("embedding initialized");
                let batch_in = ObjectiveBatch {
                    source_x: source_x.view(),
                    source_labels: &source_labels,
                    target_x: target_x.view(),
                    target_g: &target_g,
                    target_f: &target_f,
                };
                let out = cem_objective(&mut self.net, embedding, &prior, self.config.temperature, &batch_in, terms)?;
                let emb_grad = terms.kl_f.then_some(out.embedding);
                (out.source_loss, out.target_loss, out.network, emb_grad, Some(out.target_features))
            }
            EpochPlan::None | EpochPlan::SelfLabels | EpochPlan::Entropy => {
                let with_target = !matches!(plan, EpochPlan::None);
                let x = if with_target {
                    concatenate(Axis(0), &[source_x.view(), target_x.view()]).map_err(|e| Error::invalid(e.to_string()))?
                } else {
                    source_x.clone()
                };
                let (_, logits) = self.net.forward(x.view())?;
                let bs = source_idx.len();
                let mut grad_logits = Array2::<f64>::zeros(logits.raw_dim());
                let targets = ProbabilityMatrix::one_hot(&source_labels, c)?;
                let (sl, g) = cross_entropy_with_logits(logits.slice(s![..bs, ..]), targets.view(), bs as f64)?;
                grad_logits.slice_mut(s![..bs, ..]).assign(&g);
                let mut tl = 0.0;
                if with_target && !target_idx.is_empty() {
                    let tlogits = logits.slice(s![bs.., ..]);
                    let bt = target_idx.len() as f64;
                    let (v, g) = if matches!(plan, EpochPlan::SelfLabels) {
                        let (labels, mask) = pl_labels(tlogits, self.config.pl_threshold)?;
                        observer.on_batch_labels(epoch, batch, target_idx, &labels);
                        let mut masked = labels.into_inner();
                        for (mut row, keep) in masked.outer_iter_mut().zip(mask) {
                            if !keep {
                                row.fill(0.0);
                            }
                        }
                        cross_entropy_with_logits(tlogits, masked.view(), bt)?
                    } else {
                        minent_loss(tlogits)?
                    };
                    tl = v;
                    grad_logits.slice_mut(s![bs.., ..]).assign(&g);
                }
                let grads = self.net.backward(grad_logits.view(), None)?;
                (sl, tl, grads, None, None)
            }
        };

        if !(source_loss.is_finite() && target_loss.is_finite()) {
            return Err(diverged(epoch, batch, "non-finite loss"));
        }
        stats.source_loss += source_loss;
        stats.target_loss += target_loss;
        stats.batches += 1;

        if let (Some(bank), Some(features)) = (self.bank.as_mut(), target_features.as_ref()) {
            if self.config.method == Method::Get {
                bank.update_prior(features.view(), self.net.classifier.prototypes())?;
            }
            bank.update_prototypes(features.view())?;
        }

        let mut slots = self.net.param_slots(&grads);
        if let (Some(g), Some(emb)) = (embedding_grad.as_ref(), self.embedding.as_mut()) {
            slots.push(ParamSlot::new(emb.values_mut(), g, ParamGroup::Head));
        }
        self.sgd.step(&mut slots).map_err(|e| with_context(e, epoch, batch))
    }

    fn run_epoch(
        &mut self,
        epoch: usize,
        evaluator: &Evaluator<'_>,
        observer: &mut dyn TrainObserver,
    ) -> Result<EpochStats> {
        let mut stats = EpochStats::default();
        let mut plan = self.plan_epoch(evaluator, &mut stats)?;
        for b in 0..self.steps_per_epoch {
            let source_idx = self.sources.next_batch()?;
            let target_idx = if matches!(plan, EpochPlan::None) {
                Vec::new()
            } else {
                self.targets.next_batch()?
            };
            self.step(epoch, b, &mut plan, &source_idx, &target_idx, observer, &mut stats)?;
        }
        Ok(stats)
    }

    fn record(&self, epoch: usize, stats: Option<EpochStats>, evaluator: &Evaluator<'_>) -> Result<EpochRecord> {
        let Evaluation {
            accuracy,
            balanced_accuracy,
            per_class_recall,
        } = evaluator.network(&self.net)?;
        let prior = self.bank.as_ref().map(|b| b.prior().to_vec());
        let stats = stats.unwrap_or_default();
        let mean = |total: f64| (stats.batches > 0).then(|| total / stats.batches as f64);
        Ok(EpochRecord {
            epoch,
            accuracy,
            balanced_accuracy,
            per_class_recall,
            pseudo_label_accuracy: stats.pseudo_label_accuracy,
            generative_label_accuracy: stats.generative_label_accuracy,
            prior_kl: prior.as_deref().map(|p| evaluator.prior(p)),
            prior,
            objective_g: stats.objective_g,
            objective_f: stats.objective_f,
            source_loss: mean(stats.source_loss),
            target_loss: mean(stats.target_loss).filter(|_| self.uses_target()),
            balancing: stats.balancing,
        })
    }
}

pub fn train(config: &TrainConfig, pair: &crate::datasynth::DomainPair) -> Result<RunRecord, TrainFailure> {
    train_with_observer(config, pair, &mut NoopObserver)
}

/// Warm-up, then `config.epochs` CEM epochs. Deterministic for a fixed config.
pub fn train_with_observer(
    config: &TrainConfig,
    pair: &crate::datasynth::DomainPair,
    observer: &mut dyn TrainObserver,
) -> Result<RunRecord, TrainFailure> {
    let mut record = RunRecord {
        method: config.method,
        config_hash: config.content_hash(),
        epochs: Vec::new(),
    };
    match run(config, pair, observer, &mut record) {
        Ok(()) => Ok(record),
        Err(error) => Err(TrainFailure { error, partial: record }),
    }
}

fn run(
    config: &TrainConfig,
    pair: &crate::datasynth::DomainPair,
    observer: &mut dyn TrainObserver,
    record: &mut RunRecord,
) -> Result<()> {
    config.validate()?;
    let evaluator = Evaluator::new(pair);
    let mut trainer = Trainer::new(config, pair.training_view())?;
    let prototypes = warmup(
        &mut trainer.net,
        &mut trainer.sgd,
        &trainer.supervised,
        config.batch_size,
        config.warmup_epochs,
        derive_seed(config.seed, TAG_WARMUP),
    )?;
    if matches!(config.method, Method::Get | Method::Nc) {
        trainer.bank = Some(MemoryBank::new(config.bank_config(), prototypes.view())?);
    }
    let first = trainer.record(0, None, &evaluator)?;
    observer.on_epoch_end(&first, &trainer.snapshot())?;
    record.epochs.push(first);
    for epoch in 1..=config.epochs {
        let stats = trainer.run_epoch(epoch, &evaluator, observer)?;
        let entry = trainer.record(epoch, Some(stats), &evaluator)?;
        observer.on_epoch_end(&entry, &trainer.snapshot())?;
        record.epochs.push(entry);
    }
    Ok(())
}

/// Trains and also returns the final network, for callers that need the model.
pub fn train_model(
    config: &TrainConfig,
    pair: &crate::datasynth::DomainPair,
) -> Result<(RunRecord, Network, Option<MemoryBank>), TrainFailure> {
    struct Capture {
        net: Option<Network>,
        bank: Option<MemoryBank>,
    }
    impl TrainObserver for Capture {
        fn on_epoch_end(&mut self, _record: &EpochRecord, state: &TrainerSnapshot<'_>) -> Result<()> {
            self.net = Some(state.network.clone());
            self.bank = state.bank.cloned();
            Ok(())
        }
    }
    let mut capture = Capture { net: None, bank: None };
    let record = train_with_observer(config, pair, &mut capture)?;
    Ok((record, capture.net.expect("at least the warm-up epoch"), capture.bank))
}
