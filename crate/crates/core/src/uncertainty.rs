//! Monte Carlo dropout posterior estimation.
//!
//! `T` stochastic forward passes are run with dropout left on. Their softmax
//! outputs are averaged into the predictive mean `μ`, and their spread gives
//! a per-class dispersion `σ` that serves as the model's uncertainty.

use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SampleId};
use crate::error::{Error, Result};
use crate::nn::{argmax, Network};
use crate::rng;
use crate::tensor::Tensor;

pub const DEFAULT_PASSES: usize = 100;

/// How the per-class dispersion is computed from the `T` samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaFormula {
    /// `σ = sqrt(Σ (y_t − μ)²) / (T − 1)`.
    #[default]
    PaperLiteral,
    /// `σ = sqrt(Σ (y_t − μ)² / (T − 1))`, the sample standard deviation.
    SampleStd,
}

impl SigmaFormula {
    fn apply(self, sum_sq: f64, passes: usize) -> f64 {
        let denom = (passes - 1) as f64;
        match self {
            SigmaFormula::PaperLiteral => sum_sq.sqrt() / denom,
            SigmaFormula::SampleStd => (sum_sq / denom).sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    /// Number of stochastic forward passes `T`.
    pub passes: usize,
    pub base_seed: u64,
    pub sigma_formula: SigmaFormula,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            passes: DEFAULT_PASSES,
            base_seed: 0,
            sigma_formula: SigmaFormula::default(),
        }
    }
}

impl McConfig {
    pub fn validate(&self) -> Result<()> {
        if self.passes < 2 {
            return Err(Error::validation(format!(
                "need at least 2 stochastic passes to estimate sigma, got {}",
                self.passes
            )));
        }
        Ok(())
    }
}

/// The `T` softmax samples for one input and their summary statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub sample_id: SampleId,
    pub passes: usize,
    /// `T × d_y`, one softmax vector per pass.
    pub samples: Vec<Vec<f64>>,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub predicted_class: usize,
    /// `σ` of the predicted class.
    pub scalar_uncertainty: f64,
}

impl PosteriorSummary {
    /// Summarises a `T × d_y` matrix of softmax rows.
    pub fn from_samples(
        sample_id: SampleId,
        samples: Vec<Vec<f64>>,
        formula: SigmaFormula,
    ) -> Result<Self> {
        let passes = samples.len();
        if passes < 2 {
            return Err(Error::validation(
                "need at least 2 samples to estimate sigma",
            ));
        }
        let classes = samples[0].len();
        if classes == 0 || samples.iter().any(|r| r.len() != classes) {
            return Err(Error::dimension("sample rows must share a positive width"));
        }
        for (t, row) in samples.iter().enumerate() {
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(Error::validation(format!(
                    "sample {t} has invalid probabilities"
                )));
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::validation(format!(
                    "sample {t} sums to {total}, expected 1"
                )));
            }
        }
        let n = passes as f64;
        // Shifted by the first sample, so identical samples give an exact
        // mean and a zero sigma.
        let mu: Vec<f64> = (0..classes)
            .map(|c| {
                let origin = samples[0][c];
                origin + samples.iter().map(|r| r[c] - origin).sum::<f64>() / n
            })
            .collect();
        let sigma: Vec<f64> = (0..classes)
            .map(|c| {
                let ss: f64 = samples.iter().map(|r| (r[c] - mu[c]).powi(2)).sum();
                formula.apply(ss, passes)
            })
            .collect();
        let predicted_class = argmax(&mu);
        Ok(Self {
            sample_id,
            passes,
            scalar_uncertainty: sigma[predicted_class],
            samples,
            mu,
            sigma,
            predicted_class,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.mu.len()
    }
}

/// Runs `cfg.passes` stochastic passes on `x`. Pass `t` draws its masks from
/// the stream `(base_seed, sample_id, t)`, so the result depends only on the
/// network, the input and those three values.
pub fn mc_predict(
    net: &Network,
    sample_id: SampleId,
    x: &Tensor,
    cfg: &McConfig,
) -> Result<PosteriorSummary> {
    if x.shape() != [net.input_dim()] {
        return Err(Error::dimension(format!(
            "input shape {:?}, network expects [{}]",
            x.shape(),
            net.input_dim()
        )));
    }
    predict_slice(net, sample_id, x.as_slice(), cfg)
}

fn predict_slice(
    net: &Network,
    sample_id: SampleId,
    x: &[f64],
    cfg: &McConfig,
) -> Result<PosteriorSummary> {
    cfg.validate()?;
    if x.len() != net.input_dim() {
        return Err(Error::dimension(format!(
            "input has {} features, network expects {}",
            x.len(),
            net.input_dim()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation("input contains non-finite values"));
    }
    let samples = (0..cfg.passes as u64)
        .map(|t| {
            let mut r = rng::stream(cfg.base_seed, &[sample_id.0, t]);
            net.stochastic_probabilities(x, &mut r)
        })
        .collect();
    PosteriorSummary::from_samples(sample_id, samples, cfg.sigma_formula)
}

/// [`mc_predict`] over many inputs, in parallel, preserving input order.
pub fn mc_predict_batch(
    net: &Network,
    inputs: &[(SampleId, &[f64])],
    cfg: &McConfig,
) -> Result<Vec<PosteriorSummary>> {
    cfg.validate()?;
    inputs
        .par_iter()
        .map(|(id, x)| predict_slice(net, *id, x, cfg))
        .collect()
}

/// [`mc_predict_batch`] over the rows of `data` at `indices`.
pub fn mc_predict_rows(
    net: &Network,
    data: &Dataset,
    indices: &[usize],
    cfg: &McConfig,
) -> Result<Vec<PosteriorSummary>> {
    let inputs: Vec<(SampleId, &[f64])> =
        indices.iter().map(|&i| (data.id(i), data.row(i))).collect();
    mc_predict_batch(net, &inputs, cfg)
}

/// Per-class histogram of the softmax samples on uniform bins over `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorHistogram {
    /// `bins + 1` edges; the last bin is closed on the right.
    pub edges: Vec<f64>,
    /// `counts[class][bin]`.
    pub counts: Vec<Vec<usize>>,
}

fn bin_index(v: f64, bins: usize) -> usize {
    let edge = |k: usize| k as f64 / bins as f64;
    let mut idx = ((v * bins as f64).floor().max(0.0) as usize).min(bins - 1);
    if idx > 0 && v < edge(idx) {
        idx -= 1;
    } else if idx + 1 < bins && v >= edge(idx + 1) {
        idx += 1;
    }
    idx
}

pub fn posterior_histogram(summary: &PosteriorSummary, bins: usize) -> Result<PosteriorHistogram> {
    if bins == 0 {
        return Err(Error::validation("need at least one bin"));
    }
    let edges = (0..=bins).map(|k| k as f64 / bins as f64).collect();
    let mut counts = vec![vec![0usize; bins]; summary.num_classes()];
    for row in &summary.samples {
        for (c, &p) in row.iter().enumerate() {
            counts[c][bin_index(p, bins)] += 1;
        }
    }
    Ok(PosteriorHistogram { edges, counts })
}

/// Correct/incorrect × certain/uncertain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    CorrectCertain,
    CorrectUncertain,
    IncorrectCertain,
    IncorrectUncertain,
}

/// A prediction is certain when its uncertainty is at most `tau`.
pub fn classify_outcome(summary: &PosteriorSummary, true_label: usize, tau: f64) -> Outcome {
    let correct = summary.predicted_class == true_label;
    let certain = summary.scalar_uncertainty <= tau;
    match (correct, certain) {
        (true, true) => Outcome::CorrectCertain,
        (true, false) => Outcome::CorrectUncertain,
        (false, true) => Outcome::IncorrectCertain,
        (false, false) => Outcome::IncorrectUncertain,
    }
}

/// One line of a posterior dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorRecord {
    pub sample_id: SampleId,
    #[serde(rename = "T")]
    pub passes: usize,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub predicted_class: usize,
    pub scalar_uncertainty: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<Vec<Vec<f64>>>,
}

impl PosteriorRecord {
    pub fn from_summary(s: &PosteriorSummary, full: bool) -> Self {
        Self {
            sample_id: s.sample_id,
            passes: s.passes,
            mu: s.mu.clone(),
            sigma: s.sigma.clone(),
            predicted_class: s.predicted_class,
            scalar_uncertainty: s.scalar_uncertainty,
            samples: full.then(|| s.samples.clone()),
        }
    }
}

/// Writes one JSON object per line; the sample matrix only when `full`.
pub fn write_posterior_jsonl<W: Write>(
    summaries: &[PosteriorSummary],
    full: bool,
    mut out: W,
) -> Result<()> {
    for s in summaries {
        serde_json::to_writer(&mut out, &PosteriorRecord::from_summary(s, full))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_posterior_jsonl<R: BufRead>(input: R) -> Result<Vec<PosteriorRecord>> {
    input
        .lines()
        .filter(|l| l.as_ref().map_or(true, |s| !s.trim().is_empty()))
        .map(|l| Ok(serde_json::from_str(&l?)?))
        .collect()
}
