//! Generative balanced pseudo-labeling for domain adaptation on synthetic
//! shifted Gaussian domains.

pub mod baselines;
pub mod datasynth;
pub mod error;
pub mod fusion;
pub mod generative;
pub mod harness;
pub mod metrics;
pub mod network;
pub mod numerics;
pub mod regularizer;
pub mod trainer;

pub use baselines::Method;
pub use datasynth::{DomainPair, LabeledDataset, Scenario, ShiftSpec, TrainingView};
pub use error::{Error, Result};
pub use fusion::FusedLabels;
pub use generative::{BankConfig, MemoryBank, PriorUpdate};
pub use metrics::Evaluation;
pub use network::{Network, SgdConfig, SgdState};
pub use numerics::{FeatureMatrix, ProbabilityMatrix, Simplex};
pub use regularizer::RegularizerOutput;
pub use trainer::{Ablation, EpochRecord, QRefresh, RunRecord, TrainConfig, TrainFailure};
