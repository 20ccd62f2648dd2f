use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub width: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn relu(width: usize) -> Self {
        Self {
            width,
            activation: Activation::Relu,
        }
    }
}

/// Default L2 weight penalty.
pub const DEFAULT_L2_LAMBDA: f64 = 5e-4;

/// Architecture and regularisation of a feed-forward classifier.
///
/// Dropout sits on the input of every dense layer after the first: hidden
/// activations feeding another hidden layer are dropped with rate `alpha`,
/// and the activations feeding the classification head with rate `beta`.
/// A network without hidden layers drops its raw inputs with rate `beta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub input_dim: usize,
    pub num_classes: usize,
    pub hidden_layers: Vec<LayerSpec>,
    pub alpha: f64,
    pub beta: f64,
    pub l2_lambda: f64,
    pub seed: u64,
}

impl NetworkConfig {
    pub fn new(input_dim: usize, num_classes: usize, hidden_layers: Vec<LayerSpec>) -> Self {
        Self {
            input_dim,
            num_classes,
            hidden_layers,
            alpha: 0.0,
            beta: 0.0,
            l2_lambda: DEFAULT_L2_LAMBDA,
            seed: 0,
        }
    }

    pub fn with_dropout(mut self, alpha: f64, beta: f64) -> Self {
        self.alpha = alpha;
        self.beta = beta;
        self
    }

    pub fn with_l2(mut self, lambda: f64) -> Self {
        self.l2_lambda = lambda;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.num_classes == 0 {
            return Err(Error::validation(
                "input_dim and num_classes must be positive",
            ));
        }
        if self.hidden_layers.iter().any(|l| l.width == 0) {
            return Err(Error::validation("hidden layer widths must be positive"));
        }
        for (name, rate) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::validation(format!(
                    "{name} must lie in [0, 1), got {rate}"
                )));
            }
        }
        if !(self.l2_lambda.is_finite() && self.l2_lambda >= 0.0) {
            return Err(Error::validation(
                "l2_lambda must be finite and non-negative",
            ));
        }
        Ok(())
    }

    /// Dropout rate applied to the input of each dense layer.
    pub fn dropout_rates(&self) -> Vec<f64> {
        let layers = self.hidden_layers.len() + 1;
        (0..layers)
            .map(|k| {
                if k == layers - 1 {
                    self.beta
                } else if k == 0 {
                    0.0
                } else {
                    self.alpha
                }
            })
            .collect()
    }
}
