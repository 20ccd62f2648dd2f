//! Versioned JSON checkpoints of a network and its optimiser state.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::NetworkConfig;
use super::network::Network;
use super::train::{SgdMomentum, TrainConfig, Trainer};
use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub train_config: TrainConfig,
    /// Momentum buffers shaped like the weights.
    pub optimizer_state: Vec<Tensor>,
    pub rng_state: StreamRng,
    pub epochs_done: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub network_config: NetworkConfig,
    /// `[W0, b0, W1, b1, …]`, row-major.
    pub weights: Vec<Tensor>,
    pub trainer: Option<TrainerState>,
}

impl Checkpoint {
    pub fn capture(net: &Network, trainer: Option<&Trainer>) -> Self {
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            network_config: net.config().clone(),
            weights: net.parameters().into_iter().cloned().collect(),
            trainer: trainer.map(|t| TrainerState {
                train_config: t.config.clone(),
                optimizer_state: t.optimizer.tensors(net),
                rng_state: t.rng.clone(),
                epochs_done: t.epochs_done,
            }),
        }
    }

    pub fn network(&self) -> Result<Network> {
        Network::from_parameters(self.network_config.clone(), self.weights.clone())
    }

    pub fn restore(&self) -> Result<(Network, Option<Trainer>)> {
        let net = self.network()?;
        let trainer = match &self.trainer {
            None => None,
            Some(state) => {
                if state.optimizer_state.len() != self.weights.len()
                    || state
                        .optimizer_state
                        .iter()
                        .zip(&self.weights)
                        .any(|(v, w)| v.shape() != w.shape())
                {
                    return Err(Error::dimension("optimizer buffers do not match weights"));
                }
                state.train_config.validate()?;
                Some(Trainer {
                    config: state.train_config.clone(),
                    optimizer: SgdMomentum {
                        velocity: state
                            .optimizer_state
                            .iter()
                            .map(|t| t.as_slice().to_vec())
                            .collect(),
                    },
                    rng: state.rng_state.clone(),
                    epochs_done: state.epochs_done,
                })
            }
        };
        Ok((net, trainer))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Parses a checkpoint, rejecting any `format_version` other than
    /// [`CHECKPOINT_FORMAT_VERSION`].
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        match value
            .get("format_version")
            .and_then(serde_json::Value::as_u64)
        {
            Some(v) if v == u64::from(CHECKPOINT_FORMAT_VERSION) => {}
            Some(v) => {
                return Err(Error::validation(format!(
                    "unsupported checkpoint format_version {v}"
                )))
            }
            None => return Err(Error::validation("checkpoint lacks format_version")),
        }
        let ckpt: Checkpoint = serde_json::from_value(value)?;
        ckpt.network()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};
    use crate::nn::{train, ForwardMode, LayerSpec};

    fn trained() -> (Network, Trainer) {
        let data = generate_synthetic(&SyntheticSpec::two_class(80, 3, 0.1, 1).unwrap()).unwrap();
        let cfg = NetworkConfig::new(3, 2, vec![LayerSpec::relu(6)])
            .with_dropout(0.3, 0.3)
            .with_seed(2);
        let tc = TrainConfig {
            learning_rate: 0.05,
            max_epochs: 3,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let out = train(Network::new(cfg).unwrap(), &data, &tc).unwrap();
        (out.network, out.trainer)
    }

    #[test]
    fn round_trip_is_bitwise() {
        let (net, trainer) = trained();
        let ckpt = Checkpoint::capture(&net, Some(&trainer));
        let text = ckpt.to_json().unwrap();
        let back = Checkpoint::from_json(&text).unwrap();
        assert_eq!(back, ckpt);
        let (net2, trainer2) = back.restore().unwrap();
        assert_eq!(net2, net);
        assert_eq!(trainer2.clone().unwrap(), trainer);
        let x = Tensor::vector(vec![0.1, -0.7, 1.3]).unwrap();
        for mode in [
            ForwardMode::Deterministic,
            ForwardMode::Stochastic { pass_seed: 5 },
        ] {
            let a = net.forward(&x, mode).unwrap();
            let b = net2.forward(&x, mode).unwrap();
            assert_eq!(
                a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
        assert_eq!(
            Checkpoint::capture(&net2, trainer2.as_ref())
                .to_json()
                .unwrap(),
            text
        );
    }

    #[test]
    fn unknown_version_rejected() {
        let (net, _) = trained();
        let mut v: serde_json::Value =
            serde_json::from_str(&Checkpoint::capture(&net, None).to_json().unwrap()).unwrap();
        v["format_version"] = 2.into();
        let err = Checkpoint::from_json(&v.to_string()).unwrap_err();
        assert!(err.to_string().contains("format_version"));
        v.as_object_mut().unwrap().remove("format_version");
        assert!(Checkpoint::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn mismatched_weights_rejected() {
        let (net, _) = trained();
        let mut ckpt = Checkpoint::capture(&net, None);
        ckpt.weights.pop();
        assert!(Checkpoint::from_json(&ckpt.to_json().unwrap()).is_err());
    }
}
