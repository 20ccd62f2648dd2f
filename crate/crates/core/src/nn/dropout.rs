//! Bernoulli dropout with inverted scaling.
//!
//! A kept unit is multiplied by `1/p` so the expected activation matches the
//! deterministic pass, which therefore uses the raw weights. Dropping unit
//! `j` of the input to a dense layer is the same as zeroing column `j` of
//! that layer's weight matrix.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropoutLayer {
    keep_probability: f64,
}

impl DropoutLayer {
    pub fn from_rate(rate: f64) -> Self {
        assert!(
            (0.0..1.0).contains(&rate),
            "dropout rate {rate} outside [0, 1)"
        );
        Self {
            keep_probability: 1.0 - rate,
        }
    }

    pub fn keep_probability(&self) -> f64 {
        self.keep_probability
    }

    pub fn is_active(&self) -> bool {
        self.keep_probability < 1.0
    }

    /// Draws a fresh mask for `width` units. Inactive layers consume no
    /// randomness.
    pub fn sample<R: Rng + ?Sized>(&self, width: usize, rng: &mut R) -> Mask {
        let keep = if self.is_active() {
            (0..width)
                .map(|_| rng.random_bool(self.keep_probability))
                .collect()
        } else {
            vec![true; width]
        };
        Mask {
            keep,
            scale: 1.0 / self.keep_probability,
        }
    }
}

/// One draw of `z ~ Bernoulli(p)` per unit, plus the inverted-dropout scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mask {
    pub keep: Vec<bool>,
    pub scale: f64,
}

impl Mask {
    /// The identity mask.
    pub fn all(width: usize) -> Self {
        Self {
            keep: vec![true; width],
            scale: 1.0,
        }
    }

    #[inline]
    pub fn factor(&self, j: usize) -> f64 {
        if self.keep[j] {
            self.scale
        } else {
            0.0
        }
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }
}
