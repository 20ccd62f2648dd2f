//! Dropout classifiers with Monte Carlo uncertainty, classification with
//! rejection, and uncertainty-guided active learning.

pub mod active;
pub mod data;
pub mod error;
pub mod nn;
pub mod queue;
pub mod rejection;
pub mod rng;
pub mod tensor;
pub mod uncertainty;

pub use active::{
    acquire, al_run, compare_strategies, ALConfig, ALData, ALRun, ALState, Fallback, HumanOracle,
    IterationRecord, LabelRequest, Oracle, OracleError, RunManifest, SimulatedOracle, StopReason,
    Strategy,
};
pub use data::{Dataset, SampleId};
pub use error::{Error, Result};
pub use nn::{Network, NetworkConfig, TrainConfig};
pub use queue::{LabelSubmission, LoopStatus, QueueError, QueueItem, ReferralQueue};
pub use rejection::{
    partition_counts, prf1, prf1_with_total, rejection_metrics, ConfusionCounts, PartitionCounts,
    RejectionMetrics, RejectionPolicy,
};
pub use tensor::Tensor;
pub use uncertainty::{mc_predict, McConfig, PosteriorSummary, SigmaFormula};
