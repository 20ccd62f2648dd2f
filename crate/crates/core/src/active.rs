//! Pool-based active learning driven by Monte Carlo dropout uncertainty.
//!
//! The loop trains on a small labelled seed set, scores the unlabelled pool,
//! asks an oracle for labels on the κ most informative samples, fine-tunes
//! and repeats until validation accuracy holds at a target or the pool runs
//! out.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;
use std::time::Duration;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{checksum, Dataset, SampleId, Splits};
use crate::error::{Error, Result};
use crate::nn::{train_on, Network, NetworkConfig, TrainConfig, Trainer};
use crate::queue::{ItemStatus, QueueItem, ReferralQueue, DEFAULT_HISTOGRAM_BINS};
use crate::rejection::Aggregate;
use crate::rng;
use crate::uncertainty::{mc_predict_rows, posterior_histogram, McConfig, PosteriorSummary};

pub const DEFAULT_INITIAL_LABELLED_FRACTION: f64 = 0.06;
pub const DEFAULT_PATIENCE: usize = 2;
pub const DEFAULT_TAU: f64 = 0.1;
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum OracleError {
    #[error("no labels arrived within {0:?}")]
    Timeout(Duration),
    #[error("labelling was cancelled")]
    Cancelled,
    #[error("no label known for sample {0}")]
    Unknown(SampleId),
    #[error("invalid oracle response: {0}")]
    InvalidResponse(String),
    #[error("oracle unavailable: {0}")]
    Unavailable(String),
}

/// What the oracle is shown for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelRequest {
    pub sample_id: SampleId,
    pub features: Vec<f64>,
    pub summary: Option<PosteriorSummary>,
    pub iteration: usize,
}

pub trait Oracle {
    /// Labels for `requests`, in the same order.
    fn label(&mut self, requests: &[LabelRequest]) -> std::result::Result<Vec<usize>, OracleError>;
}

/// Answers from held-out ground truth.
#[derive(Debug, Clone, Default)]
pub struct SimulatedOracle {
    truth: HashMap<SampleId, usize>,
    queries: usize,
}

impl SimulatedOracle {
    pub fn new(truth: HashMap<SampleId, usize>) -> Self {
        Self { truth, queries: 0 }
    }

    pub fn from_dataset(data: &Dataset) -> Self {
        Self::new(
            data.ids()
                .iter()
                .copied()
                .zip(data.labels().iter().copied())
                .collect(),
        )
    }

    /// Number of samples labelled so far.
    pub fn queries(&self) -> usize {
        self.queries
    }
}

impl Oracle for SimulatedOracle {
    fn label(&mut self, requests: &[LabelRequest]) -> std::result::Result<Vec<usize>, OracleError> {
        let labels = requests
            .iter()
            .map(|r| {
                self.truth
                    .get(&r.sample_id)
                    .copied()
                    .ok_or(OracleError::Unknown(r.sample_id))
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        self.queries += labels.len();
        Ok(labels)
    }
}

/// Publishes requests to a [`ReferralQueue`] and blocks until every item is
/// labelled or the timeout passes. On timeout the batch is expired.
pub struct HumanOracle {
    queue: Arc<ReferralQueue>,
    timeout: Duration,
    bins: usize,
}

impl HumanOracle {
    pub fn new(queue: Arc<ReferralQueue>, timeout: Duration) -> Self {
        Self {
            queue,
            timeout,
            bins: DEFAULT_HISTOGRAM_BINS,
        }
    }

    pub fn queue(&self) -> &Arc<ReferralQueue> {
        &self.queue
    }

    fn item(&self, r: &LabelRequest) -> std::result::Result<QueueItem, OracleError> {
        let (mu, sigma, scalar, histogram) = match &r.summary {
            Some(s) => (
                s.mu.clone(),
                s.sigma.clone(),
                s.scalar_uncertainty,
                Some(
                    posterior_histogram(s, self.bins)
                        .map_err(|e| OracleError::InvalidResponse(e.to_string()))?,
                ),
            ),
            None => (Vec::new(), Vec::new(), 0.0, None),
        };
        Ok(QueueItem {
            sample_id: r.sample_id,
            payload: r.features.clone(),
            mu,
            sigma,
            scalar_uncertainty: scalar,
            histogram,
            enqueue_iteration: r.iteration,
            status: ItemStatus::Pending,
            label: None,
            annotator_id: None,
            submitted_at: None,
        })
    }
}

impl Oracle for HumanOracle {
    fn label(&mut self, requests: &[LabelRequest]) -> std::result::Result<Vec<usize>, OracleError> {
        if requests.is_empty() {
            return Ok(Vec::new());
        }
        let items = requests
            .iter()
            .map(|r| self.item(r))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let rx = self
            .queue
            .open_batch(items)
            .map_err(|e| OracleError::Unavailable(e.to_string()))?;
        match rx.recv_timeout(self.timeout) {
            Ok(labels) => Ok(labels),
            Err(std::sync::mpsc::RecvTimeoutError::Timeout) => {
                self.queue.expire_batch();
                Err(OracleError::Timeout(self.timeout))
            }
            Err(std::sync::mpsc::RecvTimeoutError::Disconnected) => {
                self.queue.expire_batch();
                Err(OracleError::Cancelled)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    McDropoutVariance,
    LeastConfidence,
    Random,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::McDropoutVariance => "mc_dropout_variance",
            Strategy::LeastConfidence => "least_confidence",
            Strategy::Random => "random",
        }
    }
}

/// What the variance strategy does when no pool sample exceeds `tau`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fallback {
    /// Take the κ most uncertain samples regardless of `tau`.
    #[default]
    TopKappa,
    /// Acquire nothing; the run stops as stalled.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ALConfig {
    /// Per-round budget; `None` means `ceil(|pool| / 40)`.
    pub kappa: Option<usize>,
    pub tau: f64,
    pub strategy: Strategy,
    pub fallback: Fallback,
    pub target_accuracy: f64,
    pub patience: usize,
    pub initial_labelled_fraction: f64,
    /// Epochs per fine-tuning round; `None` means `max(5, max_epochs / 5)`.
    pub fine_tune_epochs: Option<usize>,
    pub retrain_from_scratch: bool,
    pub max_iterations: Option<usize>,
    pub mc: McConfig,
    pub train: TrainConfig,
    pub seed: u64,
}

impl Default for ALConfig {
    fn default() -> Self {
        Self {
            kappa: None,
            tau: DEFAULT_TAU,
            strategy: Strategy::McDropoutVariance,
            fallback: Fallback::TopKappa,
            target_accuracy: 0.9,
            patience: DEFAULT_PATIENCE,
            initial_labelled_fraction: DEFAULT_INITIAL_LABELLED_FRACTION,
            fine_tune_epochs: None,
            retrain_from_scratch: false,
            max_iterations: None,
            mc: McConfig::default(),
            train: TrainConfig::default(),
            seed: 0,
        }
    }
}

impl ALConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kappa == Some(0) {
            return Err(Error::validation("kappa must be positive"));
        }
        if self.tau.is_nan() || self.tau < 0.0 {
            return Err(Error::validation(format!(
                "tau must be non-negative, got {}",
                self.tau
            )));
        }
        if !(self.target_accuracy > 0.0 && self.target_accuracy <= 1.0)
            && self.target_accuracy != 0.0
        {
            return Err(Error::validation(format!(
                "target accuracy {} outside [0, 1]",
                self.target_accuracy
            )));
        }
        if !(self.initial_labelled_fraction > 0.0 && self.initial_labelled_fraction <= 1.0) {
            return Err(Error::validation(format!(
                "initial labelled fraction {} outside (0, 1]",
                self.initial_labelled_fraction
            )));
        }
        if self.fine_tune_epochs == Some(0) {
            return Err(Error::validation("fine-tuning needs at least one epoch"));
        }
        self.mc.validate()?;
        self.train.validate()
    }

    pub fn default_kappa(pool: usize) -> usize {
        pool.div_ceil(40).max(1)
    }

    pub fn fine_tune_epochs(&self) -> usize {
        self.fine_tune_epochs
            .unwrap_or_else(|| (self.train.max_epochs / 5).max(5))
    }
}

/// The data an active-learning run sees. `candidates` is the union of the
/// initial labelled set and the pool; its labels are used only for the seed
/// set and by simulated oracles.
#[derive(Debug, Clone, PartialEq)]
pub struct ALData {
    pub candidates: Dataset,
    pub validation: Dataset,
    pub test: Option<Dataset>,
}

impl ALData {
    pub fn new(candidates: Dataset, validation: Dataset, test: Option<Dataset>) -> Result<Self> {
        let c: BTreeSet<SampleId> = candidates.ids().iter().copied().collect();
        let v: BTreeSet<SampleId> = validation.ids().iter().copied().collect();
        if !c.is_disjoint(&v) {
            return Err(Error::validation("validation ids overlap the candidates"));
        }
        if let Some(t) = &test {
            if t.ids().iter().any(|id| c.contains(id) || v.contains(id)) {
                return Err(Error::validation(
                    "test ids overlap the candidates or validation set",
                ));
            }
            if t.input_dim() != candidates.input_dim() {
                return Err(Error::dimension("test set has a different input dimension"));
            }
        }
        if validation.input_dim() != candidates.input_dim() {
            return Err(Error::dimension(
                "validation set has a different input dimension",
            ));
        }
        if validation.is_empty() {
            return Err(Error::validation("validation set is empty"));
        }
        Ok(Self {
            candidates,
            validation,
            test,
        })
    }

    /// Candidates are `train ∪ pool`.
    pub fn from_splits(splits: &Splits) -> Result<Self> {
        Self::new(
            splits.train.concat(&splits.pool)?,
            splits.val.clone(),
            (!splits.test.is_empty()).then(|| splits.test.clone()),
        )
    }

    pub fn checksums(&self) -> BTreeMap<String, String> {
        let mut out = BTreeMap::new();
        out.insert("candidates".to_owned(), checksum(&self.candidates));
        out.insert("validation".to_owned(), checksum(&self.validation));
        if let Some(t) = &self.test {
            out.insert("test".to_owned(), checksum(t));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub labelled: usize,
    pub labelled_fraction: f64,
    pub validation_accuracy: f64,
    pub test_accuracy: Option<f64>,
    pub acquired: Vec<SampleId>,
    /// The variance strategy had no sample above `tau`.
    pub fallback_used: bool,
    /// Fine-tuning diverged and the previous weights were kept.
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ALState {
    pub labelled: BTreeMap<SampleId, usize>,
    pub pool: BTreeSet<SampleId>,
    pub validation: BTreeSet<SampleId>,
    pub iteration: usize,
    pub history: Vec<IterationRecord>,
    /// `|initial D_l ∪ initial D_u|`.
    pub total: usize,
}

impl ALState {
    pub fn labelled_fraction(&self) -> f64 {
        if self.total == 0 {
            return 1.0;
        }
        self.labelled.len() as f64 / self.total as f64
    }

    /// Disjointness of the three sets and conservation of the candidates.
    pub fn check_invariants(&self) -> Result<()> {
        if self.labelled.keys().any(|id| self.pool.contains(id)) {
            return Err(Error::State("labelled and pool sets overlap".into()));
        }
        if self
            .validation
            .iter()
            .any(|id| self.pool.contains(id) || self.labelled.contains_key(id))
        {
            return Err(Error::State(
                "validation set overlaps labelled or pool".into(),
            ));
        }
        if self.labelled.len() + self.pool.len() != self.total {
            return Err(Error::State(
                "labelled and pool do not cover the candidates".into(),
            ));
        }
        Ok(())
    }

    /// Order-independent digest of the labelled set, pool and iteration.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update((self.iteration as u64).to_le_bytes());
        for (id, label) in &self.labelled {
            h.update(id.0.to_le_bytes());
            h.update((*label as u64).to_le_bytes());
        }
        h.update(u64::MAX.to_le_bytes());
        for id in &self.pool {
            h.update(id.0.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Picks at most `kappa` pool samples. Returns ids in acquisition order.
///
/// - variance: σ > τ, most uncertain first
/// - least confidence: smallest max-class μ first
/// - random: seeded shuffle of the pool ordered by id
///
/// Ties go to the smaller id.
pub fn acquire(
    summaries: &[PosteriorSummary],
    strategy: Strategy,
    kappa: usize,
    tau: f64,
    seed: u64,
) -> Vec<SampleId> {
    match strategy {
        Strategy::McDropoutVariance => {
            let mut q: Vec<&PosteriorSummary> = summaries
                .iter()
                .filter(|s| s.scalar_uncertainty > tau)
                .collect();
            q.sort_by(|a, b| {
                b.scalar_uncertainty
                    .total_cmp(&a.scalar_uncertainty)
                    .then(a.sample_id.cmp(&b.sample_id))
            });
            q.into_iter().take(kappa).map(|s| s.sample_id).collect()
        }
        Strategy::LeastConfidence => {
            let confidence =
                |s: &PosteriorSummary| s.mu.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut q: Vec<(f64, SampleId)> = summaries
                .iter()
                .map(|s| (confidence(s), s.sample_id))
                .collect();
            q.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            q.into_iter().take(kappa).map(|(_, id)| id).collect()
        }
        Strategy::Random => {
            let ids: Vec<SampleId> = summaries.iter().map(|s| s.sample_id).collect();
            acquire_random(&ids, kappa, seed)
        }
    }
}

/// Uniform choice of `kappa` ids without replacement.
pub fn acquire_random(pool: &[SampleId], kappa: usize, seed: u64) -> Vec<SampleId> {
    let mut ids = pool.to_vec();
    ids.sort_unstable();
    let k = kappa.min(ids.len());
    let mut r = rng::stream(seed, &[0xac0]);
    let (picked, _) = ids.partial_shuffle(&mut r, k);
    picked.to_vec()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    TargetReached,
    PoolExhausted,
    /// An acquisition came back empty.
    Stalled,
    MaxIterations,
}

/// Outcome of one [`ALRun::step`].
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub acquired: Vec<SampleId>,
    pub record: Option<IterationRecord>,
    pub stop: Option<StopReason>,
}

/// Serialisable snapshot from which a run can resume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub network_config: NetworkConfig,
    /// With `kappa` resolved.
    pub config: ALConfig,
    pub split_checksums: BTreeMap<String, String>,
    pub state: ALState,
    pub target_streak: usize,
    pub stop_reason: Option<StopReason>,
}

impl RunManifest {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: RunManifest = serde_json::from_str(text)?;
        if m.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::validation(format!(
                "unsupported manifest schema_version {}",
                m.schema_version
            )));
        }
        Ok(m)
    }
}

/// A running active-learning loop.
#[derive(Debug, Clone)]
pub struct ALRun {
    data: ALData,
    net_config: NetworkConfig,
    config: ALConfig,
    kappa: usize,
    state: ALState,
    network: Network,
    position: HashMap<SampleId, usize>,
    target_streak: usize,
    stop: Option<StopReason>,
}

/// Stratified seed set: `round(fraction · n_c)` of each class, at least one.
fn initial_labelled(data: &Dataset, fraction: f64, seed: u64) -> Vec<usize> {
    let mut by_class = vec![Vec::new(); data.num_classes()];
    for i in 0..data.len() {
        by_class[data.label(i)].push(i);
    }
    let mut out = Vec::new();
    for (c, mut members) in by_class.into_iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        members.shuffle(&mut rng::stream(seed, &[0x5eed, c as u64]));
        let k = ((fraction * members.len() as f64).round() as usize).clamp(1, members.len());
        out.extend_from_slice(&members[..k]);
    }
    out.sort_unstable();
    out
}

impl ALRun {
    /// Draws the seed set, trains the first model for `train.max_epochs`
    /// and records iteration 0.
    pub fn start(data: ALData, net_config: NetworkConfig, config: ALConfig) -> Result<Self> {
        config.validate()?;
        net_config.validate()?;
        if net_config.input_dim != data.candidates.input_dim()
            || net_config.num_classes < data.candidates.num_classes()
        {
            return Err(Error::dimension("network does not fit the dataset"));
        }
        let seed_rows = initial_labelled(
            &data.candidates,
            config.initial_labelled_fraction,
            config.seed,
        );
        let labelled: BTreeMap<SampleId, usize> = seed_rows
            .iter()
            .map(|&i| (data.candidates.id(i), data.candidates.label(i)))
            .collect();
        let pool: BTreeSet<SampleId> = data
            .candidates
            .ids()
            .iter()
            .filter(|id| !labelled.contains_key(id))
            .copied()
            .collect();
        let kappa = config
            .kappa
            .unwrap_or_else(|| ALConfig::default_kappa(pool.len()));
        if !pool.is_empty() && kappa > pool.len() {
            return Err(Error::validation(format!(
                "kappa {kappa} exceeds the pool of {}",
                pool.len()
            )));
        }
        let mut config = config;
        config.kappa = Some(kappa);

        let position = data
            .candidates
            .ids()
            .iter()
            .enumerate()
            .map(|(i, id)| (*id, i))
            .collect();
        let state = ALState {
            labelled,
            pool,
            validation: data.validation.ids().iter().copied().collect(),
            iteration: 0,
            history: Vec::new(),
            total: data.candidates.len(),
        };
        let network = Network::new(net_config.clone())?;
        let mut run = Self {
            data,
            net_config,
            config,
            kappa,
            state,
            network,
            position,
            target_streak: 0,
            stop: None,
        };
        let training = run.labelled_dataset(&run.state.labelled)?;
        let all: Vec<usize> = (0..training.len()).collect();
        let cfg = run.round_train_config(0);
        run.network = train_on(run.network.clone(), &training, &all, &cfg)?.network;
        let record = run.record(Vec::new(), false, false);
        run.push(record);
        Ok(run)
    }

    /// Restores a run from its manifest and the network saved with it.
    pub fn resume(manifest: RunManifest, data: ALData, network: Network) -> Result<Self> {
        if manifest.split_checksums != data.checksums() {
            return Err(Error::validation(
                "data does not match the manifest checksums",
            ));
        }
        if network.config() != &manifest.network_config {
            return Err(Error::validation("network does not match the manifest"));
        }
        manifest.state.check_invariants()?;
        let kappa = manifest
            .config
            .kappa
            .ok_or_else(|| Error::validation("manifest lacks a resolved kappa"))?;
        let position = data
            .candidates
            .ids()
            .iter()
            .enumerate()
            .map(|(i, id)| (*id, i))
            .collect();
        Ok(Self {
            data,
            net_config: manifest.network_config,
            config: manifest.config,
            kappa,
            state: manifest.state,
            network,
            position,
            target_streak: manifest.target_streak,
            stop: manifest.stop_reason,
        })
    }

    pub fn manifest(&self) -> RunManifest {
        RunManifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            network_config: self.net_config.clone(),
            config: self.config.clone(),
            split_checksums: self.data.checksums(),
            state: self.state.clone(),
            target_streak: self.target_streak,
            stop_reason: self.stop,
        }
    }

    pub fn state(&self) -> &ALState {
        &self.state
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn config(&self) -> &ALConfig {
        &self.config
    }

    pub fn data(&self) -> &ALData {
        &self.data
    }

    pub fn kappa(&self) -> usize {
        self.kappa
    }

    pub fn stop_reason(&self) -> Option<StopReason> {
        self.stop
    }

    pub fn is_finished(&self) -> bool {
        self.stop.is_some()
    }

    fn round_train_config(&self, iteration: usize) -> TrainConfig {
        TrainConfig {
            seed: rng::derive_seed(
                self.config.train.seed,
                &[self.config.seed, iteration as u64],
            ),
            ..self.config.train.clone()
        }
    }

    fn labelled_dataset(&self, labelled: &BTreeMap<SampleId, usize>) -> Result<Dataset> {
        let rows: Vec<usize> = labelled.keys().map(|id| self.position[id]).collect();
        let labels = labelled.values().copied().collect();
        self.data.candidates.subset(&rows).with_labels(labels)
    }

    fn record(
        &self,
        acquired: Vec<SampleId>,
        fallback_used: bool,
        diverged: bool,
    ) -> IterationRecord {
        IterationRecord {
            iteration: self.state.iteration,
            labelled: self.state.labelled.len(),
            labelled_fraction: self.state.labelled_fraction(),
            validation_accuracy: self.network.accuracy(&self.data.validation),
            test_accuracy: self.data.test.as_ref().map(|t| self.network.accuracy(t)),
            acquired,
            fallback_used,
            diverged,
        }
    }

    fn push(&mut self, record: IterationRecord) {
        if record.validation_accuracy >= self.config.target_accuracy {
            self.target_streak += 1;
        } else {
            self.target_streak = 0;
        }
        self.state.history.push(record);
        self.stop = if self.target_streak >= self.config.patience.max(1) {
            Some(StopReason::TargetReached)
        } else if self.state.pool.is_empty() {
            Some(StopReason::PoolExhausted)
        } else if self
            .config
            .max_iterations
            .is_some_and(|m| self.state.iteration >= m)
        {
            Some(StopReason::MaxIterations)
        } else {
            None
        };
    }

    fn pool_rows(&self) -> Vec<usize> {
        self.state.pool.iter().map(|id| self.position[id]).collect()
    }

    /// Scores the pool and selects the next acquisition without touching
    /// the state. The flag is set when the fallback supplied the ids.
    pub fn propose(&self) -> Result<(Vec<SampleId>, Vec<PosteriorSummary>, bool)> {
        let rows = self.pool_rows();
        let seed = rng::derive_seed(self.config.seed, &[0xac9, self.state.iteration as u64]);
        if self.config.strategy == Strategy::Random {
            let ids: Vec<SampleId> = self.state.pool.iter().copied().collect();
            return Ok((acquire_random(&ids, self.kappa, seed), Vec::new(), false));
        }
        let mc = McConfig {
            base_seed: rng::derive_seed(self.config.mc.base_seed, &[self.state.iteration as u64]),
            ..self.config.mc.clone()
        };
        let summaries = mc_predict_rows(&self.network, &self.data.candidates, &rows, &mc)?;
        let mut ids = acquire(
            &summaries,
            self.config.strategy,
            self.kappa,
            self.config.tau,
            seed,
        );
        let mut fallback = false;
        if ids.is_empty()
            && !summaries.is_empty()
            && self.config.strategy == Strategy::McDropoutVariance
            && self.config.fallback == Fallback::TopKappa
        {
            ids = acquire(
                &summaries,
                Strategy::McDropoutVariance,
                self.kappa,
                f64::NEG_INFINITY,
                seed,
            );
            fallback = true;
        }
        Ok((ids, summaries, fallback))
    }

    /// One acquire → label → fine-tune round. An oracle failure returns an
    /// error and leaves the run untouched.
    pub fn step(&mut self, oracle: &mut dyn Oracle) -> Result<StepReport> {
        if let Some(reason) = self.stop {
            return Err(Error::State(format!("run already stopped: {reason:?}")));
        }
        let (acquired, summaries, fallback_used) = self.propose()?;
        if acquired.is_empty() {
            self.state.iteration += 1;
            self.stop = Some(StopReason::Stalled);
            return Ok(StepReport {
                acquired,
                record: None,
                stop: self.stop,
            });
        }

        let by_id: HashMap<SampleId, &PosteriorSummary> =
            summaries.iter().map(|s| (s.sample_id, s)).collect();
        let requests: Vec<LabelRequest> = acquired
            .iter()
            .map(|id| LabelRequest {
                sample_id: *id,
                features: self.data.candidates.row(self.position[id]).to_vec(),
                summary: by_id.get(id).map(|s| (*s).clone()),
                iteration: self.state.iteration + 1,
            })
            .collect();
        let labels = oracle.label(&requests)?;
        if labels.len() != acquired.len() {
            return Err(OracleError::InvalidResponse(format!(
                "{} labels for {} requests",
                labels.len(),
                acquired.len()
            ))
            .into());
        }
        let num_classes = self.net_config.num_classes;
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(OracleError::InvalidResponse(format!(
                "label {bad} outside 0..{num_classes}"
            ))
            .into());
        }

        let mut labelled = self.state.labelled.clone();
        for (id, &label) in acquired.iter().zip(&labels) {
            labelled.insert(*id, label);
        }
        let training = self.labelled_dataset(&labelled)?;
        let all: Vec<usize> = (0..training.len()).collect();
        let iteration = self.state.iteration + 1;
        let cfg = self.round_train_config(iteration);
        let tuned = if self.config.retrain_from_scratch {
            let fresh = Network::new(
                self.net_config
                    .clone()
                    .with_seed(rng::derive_seed(self.net_config.seed, &[iteration as u64])),
            )?;
            train_on(fresh, &training, &all, &cfg).map(|t| t.network)
        } else {
            let mut net = self.network.clone();
            let mut trainer = Trainer::new(&net, cfg)?;
            trainer
                .run(&mut net, &training, &all, self.config.fine_tune_epochs())
                .map(|_| net)
        };
        let diverged = match tuned {
            Ok(net) => {
                self.network = net;
                false
            }
            Err(Error::Diverged { .. }) => true,
            Err(e) => return Err(e),
        };

        for id in &acquired {
            self.state.pool.remove(id);
        }
        self.state.labelled = labelled;
        self.state.iteration = iteration;
        self.state.check_invariants()?;
        let record = self.record(acquired.clone(), fallback_used, diverged);
        self.push(record.clone());
        Ok(StepReport {
            acquired,
            record: Some(record),
            stop: self.stop,
        })
    }

    /// Steps until a stop condition holds.
    pub fn run_to_end(&mut self, oracle: &mut dyn Oracle) -> Result<StopReason> {
        while self.stop.is_none() {
            self.step(oracle)?;
        }
        Ok(self.stop.expect("loop exits on stop"))
    }
}

/// Result of [`al_run`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ALOutcome {
    pub strategy: Strategy,
    pub seed: u64,
    pub kappa: usize,
    pub stop_reason: StopReason,
    pub history: Vec<IterationRecord>,
    pub final_state_digest: String,
}

/// Runs a loop to completion with a simulated oracle over the candidate
/// labels.
pub fn al_run(data: &ALData, net_config: &NetworkConfig, config: &ALConfig) -> Result<ALOutcome> {
    let mut oracle = SimulatedOracle::from_dataset(&data.candidates);
    let mut run = ALRun::start(data.clone(), net_config.clone(), config.clone())?;
    let stop_reason = run.run_to_end(&mut oracle)?;
    Ok(ALOutcome {
        strategy: config.strategy,
        seed: config.seed,
        kappa: run.kappa,
        stop_reason,
        final_state_digest: run.state.digest(),
        history: run.state.history,
    })
}

/// Labelled fraction at the first record whose test accuracy (validation
/// accuracy when there is no test set) reaches `target`.
pub fn labels_to_target(history: &[IterationRecord], target: f64) -> Option<f64> {
    history
        .iter()
        .find(|r| r.test_accuracy.unwrap_or(r.validation_accuracy) >= target)
        .map(|r| r.labelled_fraction)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySummary {
    pub strategy: Strategy,
    pub runs: Vec<ALOutcome>,
    /// Per seed; a run that never reaches the target counts as 1.0.
    pub labels_to_target: Vec<f64>,
    pub reached: usize,
    pub labels_to_target_stats: Aggregate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyComparison {
    pub target_accuracy: f64,
    pub seeds: Vec<u64>,
    pub strategies: Vec<StrategySummary>,
}

/// Runs every strategy for every seed. For a given seed all strategies share
/// the seed set, initial weights and training randomness, so they differ
/// only in what they acquire.
pub fn compare_strategies(
    data: &ALData,
    net_config: &NetworkConfig,
    base: &ALConfig,
    strategies: &[Strategy],
    seeds: &[u64],
    target_accuracy: f64,
) -> Result<StrategyComparison> {
    if strategies.is_empty() {
        return Err(Error::validation("no strategies to compare"));
    }
    if seeds.is_empty() {
        return Err(Error::validation("no seeds given"));
    }
    let jobs: Vec<(usize, u64)> = (0..strategies.len())
        .flat_map(|s| seeds.iter().map(move |&seed| (s, seed)))
        .collect();
    let outcomes: Vec<ALOutcome> = jobs
        .par_iter()
        .map(|&(s, seed)| {
            let cfg = ALConfig {
                strategy: strategies[s],
                seed,
                mc: McConfig {
                    base_seed: rng::derive_seed(base.mc.base_seed, &[seed]),
                    ..base.mc.clone()
                },
                train: TrainConfig {
                    seed: rng::derive_seed(base.train.seed, &[seed]),
                    ..base.train.clone()
                },
                ..base.clone()
            };
            let net = net_config
                .clone()
                .with_seed(rng::derive_seed(net_config.seed, &[seed]));
            al_run(data, &net, &cfg)
        })
        .collect::<Result<_>>()?;

    let mut summaries = Vec::with_capacity(strategies.len());
    for (s, runs) in outcomes.chunks(seeds.len()).enumerate() {
        let hits: Vec<Option<f64>> = runs
            .iter()
            .map(|r| labels_to_target(&r.history, target_accuracy))
            .collect();
        let fractions: Vec<f64> = hits.iter().map(|h| h.unwrap_or(1.0)).collect();
        summaries.push(StrategySummary {
            strategy: strategies[s],
            reached: hits.iter().filter(|h| h.is_some()).count(),
            labels_to_target_stats: Aggregate::of(fractions.iter().map(|&f| Some(f))),
            labels_to_target: fractions,
            runs: runs.to_vec(),
        });
    }
    Ok(StrategyComparison {
        target_accuracy,
        seeds: seeds.to_vec(),
        strategies: summaries,
    })
}
