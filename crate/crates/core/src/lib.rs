//! Corruption-robust offline reinforcement learning with distributional
//! critics, Gaussian observation models and entropy-based loss weighting.

pub mod attacker;
pub mod bayes;
pub mod config;
pub mod critic;
pub mod corruption;
pub mod dataset;
pub mod entropy;
pub mod env;
pub mod eval;
pub mod error;
pub mod nn;
pub mod policy;
pub mod seeding;
pub mod trainer;

pub use error::{Error, Result};

pub use attacker::{pretrain_attacker, AttackerConfig, AttackerCritic, AttackerReport};
pub use bayes::{EtaMode, FirstLoss, ObservationHeads};
pub use config::{Algorithm, TrainConfig};
pub use corruption::{
    corrupt, corrupt_adversarial, corrupt_random, corrupt_simultaneous, parse_elements,
    CorruptionMode, CorruptionSpec, Element,
};
pub use critic::{CriticEnsemble, QuantileNet};
pub use dataset::{collect_dataset, Batch, BehaviorPolicy, CorruptionLabels, Dataset, TrainingView};
pub use entropy::EntropyVariant;
pub use env::{EnvId, ReferenceReturns};
pub use eval::{
    entropy_probe, evaluate_policy, probe_run, report, EvalReport, ProbeConfig, ProbeResult, Report,
    EVAL_FILE,
};
pub use policy::GaussianPolicy;
pub use trainer::{list_checkpoints, run_training, RunOptions, RunSummary, StepTelemetry, TrainState};
