//! Mini-batch SGD with momentum and a step learning-rate schedule.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::network::{Batch, GradientTape, Gradients, MaskSource, Network};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::{self, StreamRng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every_epochs: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            momentum: 0.9,
            lr_decay_factor: 0.1,
            lr_decay_every_epochs: 5,
            batch_size: 64,
            max_epochs: 25,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::validation("learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::validation("momentum must lie in [0, 1)"));
        }
        if !(self.lr_decay_factor.is_finite() && self.lr_decay_factor > 0.0) {
            return Err(Error::validation("lr_decay_factor must be positive"));
        }
        if self.lr_decay_every_epochs == 0 {
            return Err(Error::validation(
                "lr_decay_every_epochs must be at least 1",
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size must be at least 1"));
        }
        Ok(())
    }

    /// Learning rate during zero-based epoch `epoch`: the base rate decayed
    /// once per completed block of `lr_decay_every_epochs` epochs.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let steps = (epoch / self.lr_decay_every_epochs) as i32;
        self.learning_rate * self.lr_decay_factor.powi(steps)
    }
}

/// Momentum buffers, one per parameter tensor in `[W0, b0, …]` order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdMomentum {
    pub velocity: Vec<Vec<f64>>,
}

impl SgdMomentum {
    pub fn for_network(net: &Network) -> Self {
        Self {
            velocity: net
                .parameters()
                .iter()
                .map(|p| vec![0.0; p.len()])
                .collect(),
        }
    }

    /// `v ← μ v + g`, `w ← w − lr v`.
    pub fn step(&mut self, net: &mut Network, grads: &Gradients, lr: f64, momentum: f64) {
        let grads = grads.as_slices();
        for ((param, vel), g) in net
            .parameters_mut()
            .into_iter()
            .zip(&mut self.velocity)
            .zip(grads)
        {
            for ((w, v), g) in param.as_mut_slice().iter_mut().zip(vel.iter_mut()).zip(g) {
                *v = momentum * *v + g;
                *w -= lr * *v;
            }
        }
    }

    pub fn tensors(&self, net: &Network) -> Vec<Tensor> {
        self.velocity
            .iter()
            .zip(net.parameters())
            .map(|(v, p)| Tensor::new(p.shape().to_vec(), v.clone()).expect("finite velocity"))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    /// Mean mini-batch loss with dropout active.
    pub loss: f64,
    /// Deterministic accuracy on the training rows after the epoch.
    pub accuracy: f64,
}

/// Optimiser and random state carried across epochs, so training can be
/// resumed or continued (fine-tuning).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trainer {
    pub config: TrainConfig,
    pub optimizer: SgdMomentum,
    pub rng: StreamRng,
    pub epochs_done: usize,
}

impl Trainer {
    pub fn new(net: &Network, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            optimizer: SgdMomentum::for_network(net),
            rng: rng::stream(config.seed, &[0x7a1]),
            epochs_done: 0,
            config,
        })
    }

    /// Runs one epoch over `indices` of `data`.
    pub fn epoch(
        &mut self,
        net: &mut Network,
        data: &Dataset,
        indices: &[usize],
    ) -> Result<EpochRecord> {
        let epoch = self.epochs_done;
        let lr = self.config.learning_rate_at(epoch);
        let mut order = indices.to_vec();
        order.shuffle(&mut self.rng);

        let mut tape = GradientTape::new();
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(self.config.batch_size) {
            let batch = Batch::from_dataset(data, chunk);
            let loss = tape.forward(net, &batch, MaskSource::Sample(&mut self.rng))?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            let grads = tape.backward(net)?;
            if !grads.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    loss: f64::NAN,
                });
            }
            self.optimizer.step(net, &grads, lr, self.config.momentum);
            loss_sum += loss;
            batches += 1;
        }
        if net.parameters().iter().any(|p| !p.is_finite()) {
            return Err(Error::Diverged {
                epoch,
                loss: f64::NAN,
            });
        }
        self.epochs_done += 1;
        Ok(EpochRecord {
            epoch,
            learning_rate: lr,
            loss: loss_sum / batches as f64,
            accuracy: net.accuracy_on(data, indices),
        })
    }

    /// Runs `epochs` epochs, stopping at the first divergence.
    pub fn run(
        &mut self,
        net: &mut Network,
        data: &Dataset,
        indices: &[usize],
        epochs: usize,
    ) -> Result<Vec<EpochRecord>> {
        if indices.is_empty() {
            return Err(Error::validation("cannot train on an empty dataset"));
        }
        if data.input_dim() != net.input_dim() || data.num_classes() > net.num_classes() {
            return Err(Error::dimension(format!(
                "dataset ({} features, {} classes) does not fit network ({} features, {} classes)",
                data.input_dim(),
                data.num_classes(),
                net.input_dim(),
                net.num_classes()
            )));
        }
        (0..epochs)
            .map(|_| self.epoch(net, data, indices))
            .collect()
    }
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct Trained {
    pub network: Network,
    pub trace: Vec<EpochRecord>,
    pub trainer: Trainer,
}

/// Trains `net` on every row of `data` for `cfg.max_epochs` epochs.
pub fn train(net: Network, data: &Dataset, cfg: &TrainConfig) -> Result<Trained> {
    let indices: Vec<usize> = (0..data.len()).collect();
    train_on(net, data, &indices, cfg)
}

/// As [`train`], restricted to `indices`.
pub fn train_on(
    mut net: Network,
    data: &Dataset,
    indices: &[usize],
    cfg: &TrainConfig,
) -> Result<Trained> {
    let mut trainer = Trainer::new(&net, cfg.clone())?;
    let trace = trainer.run(&mut net, data, indices, cfg.max_epochs)?;
    Ok(Trained {
        network: net,
        trace,
        trainer,
    })
}
