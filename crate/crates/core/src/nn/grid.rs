//! Cross-validated search over the two dropout rates.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::NetworkConfig;
use super::network::Network;
use super::train::{train_on, TrainConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearchResult {
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    /// `accuracy[i][j]` is the mean validation accuracy at
    /// `(alphas[i], betas[j])`.
    pub accuracy: Vec<Vec<f64>>,
    pub folds: usize,
    pub best_alpha: f64,
    pub best_beta: f64,
    pub best_accuracy: f64,
}

/// Seeded k-fold assignment: fold `k` holds every `folds`-th position of a
/// shuffled order.
pub fn kfold_indices(n: usize, folds: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &[0xf01d]));
    (0..folds)
        .map(|k| order.iter().skip(k).step_by(folds).copied().collect())
        .collect()
}

/// Mean k-fold validation accuracy of `net_cfg` trained with `train_cfg`.
pub fn cross_validate(
    data: &Dataset,
    net_cfg: &NetworkConfig,
    train_cfg: &TrainConfig,
    folds: usize,
) -> Result<f64> {
    let split = kfold_indices(data.len(), folds, train_cfg.seed);
    let mut total = 0.0;
    for (k, held_out) in split.iter().enumerate() {
        let fit: Vec<usize> = split
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != k)
            .flat_map(|(_, f)| f.iter().copied())
            .collect();
        let net = Network::new(net_cfg.clone())?;
        let trained = train_on(net, data, &fit, train_cfg)?;
        total += trained.network.accuracy_on(data, held_out);
    }
    Ok(total / folds as f64)
}

/// Evaluates every `(α, β)` pair with the same initial seed and folds. The
/// best pair is the highest accuracy, ties going to the lexicographically
/// smaller `(α, β)`.
pub fn grid_search_dropout(
    data: &Dataset,
    base: &NetworkConfig,
    train_cfg: &TrainConfig,
    alphas: &[f64],
    betas: &[f64],
    folds: usize,
) -> Result<GridSearchResult> {
    if folds < 2 {
        return Err(Error::validation("need at least two folds"));
    }
    if data.len() < folds {
        return Err(Error::validation(format!(
            "{} samples cannot fill {folds} folds",
            data.len()
        )));
    }
    if alphas.is_empty() || betas.is_empty() {
        return Err(Error::validation("alpha and beta grids must be non-empty"));
    }
    for &r in alphas.iter().chain(betas) {
        if !(0.0..1.0).contains(&r) {
            return Err(Error::validation(format!(
                "dropout rate {r} outside [0, 1)"
            )));
        }
    }
    base.validate()?;
    train_cfg.validate()?;

    let cells: Vec<(usize, usize)> = (0..alphas.len())
        .flat_map(|i| (0..betas.len()).map(move |j| (i, j)))
        .collect();
    let scores: Vec<f64> = cells
        .par_iter()
        .map(|&(i, j)| {
            let cfg = base.clone().with_dropout(alphas[i], betas[j]);
            cross_validate(data, &cfg, train_cfg, folds)
        })
        .collect::<Result<_>>()?;

    let mut accuracy = vec![vec![0.0; betas.len()]; alphas.len()];
    let mut best: Option<(f64, f64, f64)> = None;
    for (&(i, j), &acc) in cells.iter().zip(&scores) {
        accuracy[i][j] = acc;
        let (a, b) = (alphas[i], betas[j]);
        let better = match best {
            None => true,
            Some((ba, bb, bacc)) => {
                acc > bacc
                    || (acc == bacc
                        && (a, b).partial_cmp(&(ba, bb)) == Some(std::cmp::Ordering::Less))
            }
        };
        if better {
            best = Some((a, b, acc));
        }
    }
    let (best_alpha, best_beta, best_accuracy) = best.expect("non-empty grid");
    Ok(GridSearchResult {
        alphas: alphas.to_vec(),
        betas: betas.to_vec(),
        accuracy,
        folds,
        best_alpha,
        best_beta,
        best_accuracy,
    })
}
