//! Classification with rejection and informed referral.
//!
//! A prediction is accepted when its uncertainty is at most `τ` and referred
//! to an expert otherwise. Quality of the split is measured on the partition
//! of samples into correctly classified (A) / misclassified (M) and
//! non-rejected (N) / rejected (R):
//!
//! - NRA = |A∩N| / |N|
//! - CQ  = (|A∩N| + |M∩R|) / (|N| + |R|)
//! - RQ  = (|M∩R| · |A|) / (|A∩R| · |M|)

use std::collections::{BTreeSet, HashMap};
use std::io::Write;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::data::SampleId;
use crate::error::{Error, Result};
use crate::rng;
use crate::uncertainty::PosteriorSummary;

/// Class treated as positive by default.
pub const DEFAULT_POSITIVE_CLASS: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RejectionPolicy {
    /// Refer every sample with uncertainty `> tau`.
    Threshold { tau: f64 },
    /// Refer the `round(fraction · n)` most uncertain samples.
    InformedFraction { fraction: f64 },
    /// Refer `round(fraction · n)` samples chosen uniformly at random.
    RandomFraction { fraction: f64, seed: u64 },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Referral {
    /// Sorted by id.
    pub retained: Vec<SampleId>,
    /// Sorted by id.
    pub referred: Vec<SampleId>,
}

/// `round(fraction · n)`, rounding halves away from zero.
pub fn referral_count(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64).round() as usize).min(n)
}

fn check_fraction(fraction: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::validation(format!(
            "referral fraction {fraction} outside [0, 1]"
        )));
    }
    Ok(())
}

/// Ranks summaries by uncertainty, highest first; ties go to the smaller id.
pub fn rank_by_uncertainty(summaries: &[PosteriorSummary]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..summaries.len()).collect();
    order.sort_by(|&a, &b| {
        summaries[b]
            .scalar_uncertainty
            .total_cmp(&summaries[a].scalar_uncertainty)
            .then(summaries[a].sample_id.cmp(&summaries[b].sample_id))
    });
    order
}

/// Positions of the summaries referred by `policy`.
fn referred_positions(
    summaries: &[PosteriorSummary],
    policy: &RejectionPolicy,
) -> Result<Vec<usize>> {
    let n = summaries.len();
    match *policy {
        RejectionPolicy::Threshold { tau } => {
            if !(tau.is_finite() && tau >= 0.0) && tau != f64::INFINITY {
                return Err(Error::validation(format!(
                    "tau must be non-negative, got {tau}"
                )));
            }
            Ok((0..n)
                .filter(|&i| summaries[i].scalar_uncertainty > tau)
                .collect())
        }
        RejectionPolicy::InformedFraction { fraction } => {
            check_fraction(fraction)?;
            if n == 0 {
                return Err(Error::validation(
                    "fraction referral needs at least one sample",
                ));
            }
            let k = referral_count(fraction, n);
            Ok(rank_by_uncertainty(summaries).into_iter().take(k).collect())
        }
        RejectionPolicy::RandomFraction { fraction, seed } => {
            check_fraction(fraction)?;
            if n == 0 {
                return Err(Error::validation(
                    "fraction referral needs at least one sample",
                ));
            }
            let k = referral_count(fraction, n);
            // Canonical order first, so the draw does not depend on input order.
            let mut by_id: Vec<usize> = (0..n).collect();
            by_id.sort_by_key(|&i| summaries[i].sample_id);
            let mut r = rng::stream(seed, &[0x4e7e]);
            Ok(index::sample(&mut r, n, k)
                .into_iter()
                .map(|j| by_id[j])
                .collect())
        }
    }
}

pub fn apply_policy(summaries: &[PosteriorSummary], policy: &RejectionPolicy) -> Result<Referral> {
    let referred: BTreeSet<usize> = referred_positions(summaries, policy)?.into_iter().collect();
    let mut out = Referral::default();
    for (i, s) in summaries.iter().enumerate() {
        if referred.contains(&i) {
            out.referred.push(s.sample_id);
        } else {
            out.retained.push(s.sample_id);
        }
    }
    out.referred.sort_unstable();
    out.retained.sort_unstable();
    Ok(out)
}

/// Cardinalities of the A/M × N/R partition.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionCounts {
    pub correct: usize,
    pub misclassified: usize,
    pub retained: usize,
    pub rejected: usize,
    pub correct_retained: usize,
    pub correct_rejected: usize,
    pub misclassified_retained: usize,
    pub misclassified_rejected: usize,
}

impl PartitionCounts {
    pub fn total(&self) -> usize {
        self.correct + self.misclassified
    }

    /// Checks the partition identities.
    pub fn is_consistent(&self) -> bool {
        self.correct + self.misclassified == self.retained + self.rejected
            && self.correct_retained + self.correct_rejected == self.correct
            && self.misclassified_retained + self.misclassified_rejected == self.misclassified
            && self.correct_retained + self.misclassified_retained == self.retained
    }
}

/// Counts the partition for aligned `predictions` and `labels`, where
/// `referred` holds positions into those arrays.
pub fn partition_counts(
    predictions: &[usize],
    labels: &[usize],
    referred: &[usize],
) -> Result<PartitionCounts> {
    if predictions.len() != labels.len() {
        return Err(Error::dimension(format!(
            "{} predictions but {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let n = labels.len();
    let mut is_referred = vec![false; n];
    for &i in referred {
        if i >= n {
            return Err(Error::validation(format!(
                "referred position {i} out of range {n}"
            )));
        }
        is_referred[i] = true;
    }
    let mut pc = PartitionCounts::default();
    for i in 0..n {
        let ok = predictions[i] == labels[i];
        match (ok, is_referred[i]) {
            (true, false) => pc.correct_retained += 1,
            (true, true) => pc.correct_rejected += 1,
            (false, false) => pc.misclassified_retained += 1,
            (false, true) => pc.misclassified_rejected += 1,
        }
    }
    pc.correct = pc.correct_retained + pc.correct_rejected;
    pc.misclassified = pc.misclassified_retained + pc.misclassified_rejected;
    pc.retained = pc.correct_retained + pc.misclassified_retained;
    pc.rejected = pc.correct_rejected + pc.misclassified_rejected;
    Ok(pc)
}

/// NRA, CQ and RQ. `None` marks an undefined value; RQ is `+∞` when errors
/// are rejected but no correct sample is.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RejectionMetrics {
    pub nra: Option<f64>,
    pub cq: Option<f64>,
    #[serde(with = "extended_float")]
    pub rq: Option<f64>,
}

pub fn rejection_metrics(pc: &PartitionCounts) -> RejectionMetrics {
    let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    let nra = ratio(pc.correct_retained, pc.retained);
    let cq = ratio(
        pc.correct_retained + pc.misclassified_rejected,
        pc.retained + pc.rejected,
    );
    let rq = if pc.misclassified == 0 || pc.correct == 0 {
        None
    } else if pc.correct_rejected == 0 {
        (pc.misclassified_rejected > 0).then_some(f64::INFINITY)
    } else {
        Some(
            (pc.misclassified_rejected * pc.correct) as f64
                / (pc.correct_rejected * pc.misclassified) as f64,
        )
    };
    RejectionMetrics { nra, cq, rq }
}

/// Binary confusion counts for one positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionCounts {
    /// Counts over the positions where `keep` is true.
    pub fn tally(predictions: &[usize], labels: &[usize], keep: &[bool], positive: usize) -> Self {
        let mut cc = ConfusionCounts::default();
        for ((&p, &y), &k) in predictions.iter().zip(labels).zip(keep) {
            if !k {
                continue;
            }
            match (p == positive, y == positive) {
                (true, true) => cc.tp += 1,
                (false, false) => cc.tn += 1,
                (true, false) => cc.fp += 1,
                (false, true) => cc.fn_ += 1,
            }
        }
        cc
    }

    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }

    /// The same counts with the roles of the two classes swapped.
    pub fn swapped(&self) -> Self {
        Self {
            tp: self.tn,
            tn: self.tp,
            fp: self.fn_,
            fn_: self.fp,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub accuracy: Option<f64>,
    /// Unweighted mean over the positive and negative class.
    pub macro_precision: Option<f64>,
    pub macro_recall: Option<f64>,
    pub macro_f1: Option<f64>,
}

fn positive_class_scores(cc: &ConfusionCounts) -> (Option<f64>, Option<f64>, Option<f64>) {
    let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    let precision = ratio(cc.tp, cc.tp + cc.fp);
    let recall = ratio(cc.tp, cc.tp + cc.fn_);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        _ => None,
    };
    (precision, recall, f1)
}

fn mean2(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    Some((a? + b?) / 2.0)
}

pub fn prf1(cc: &ConfusionCounts) -> ClassificationMetrics {
    let (precision, recall, f1) = positive_class_scores(cc);
    let (np, nr, nf) = positive_class_scores(&cc.swapped());
    let total = cc.total();
    ClassificationMetrics {
        precision,
        recall,
        f1,
        accuracy: (total > 0).then(|| (cc.tp + cc.tn) as f64 / total as f64),
        macro_precision: mean2(precision, np),
        macro_recall: mean2(recall, nr),
        macro_f1: mean2(f1, nf),
    }
}

/// As [`prf1`], with accuracy taken over `samples` rather than the sum of
/// the four counts. Published tables sometimes report the sample count
/// separately from the confusion counts.
pub fn prf1_with_total(cc: &ConfusionCounts, samples: usize) -> ClassificationMetrics {
    ClassificationMetrics {
        accuracy: (samples > 0).then(|| (cc.tp + cc.tn) as f64 / samples as f64),
        ..prf1(cc)
    }
}

/// Rounds to two decimals, as in published tables.
pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferralMode {
    Informed,
    Random,
}

/// Metrics of one referral decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferralPoint {
    pub fraction: f64,
    pub mode: ReferralMode,
    pub seed: Option<u64>,
    pub referred: usize,
    pub counts: PartitionCounts,
    pub confusion: ConfusionCounts,
    pub rejection: RejectionMetrics,
    pub classification: ClassificationMetrics,
}

/// Mean and sample standard deviation of the defined values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    #[serde(with = "extended_float")]
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub defined: usize,
}

impl Aggregate {
    pub fn of(values: impl IntoIterator<Item = Option<f64>>) -> Self {
        let vals: Vec<f64> = values.into_iter().flatten().collect();
        let defined = vals.len();
        if defined == 0 {
            return Self {
                mean: None,
                std: None,
                defined,
            };
        }
        if vals.iter().any(|v| v.is_infinite()) {
            return Self {
                mean: Some(f64::INFINITY),
                std: None,
                defined,
            };
        }
        let mean = vals.iter().sum::<f64>() / defined as f64;
        let std = if defined > 1 {
            (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (defined - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self {
            mean: Some(mean),
            std: Some(std),
            defined,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferralCurveRow {
    pub fraction: f64,
    pub mode: ReferralMode,
    pub referred: usize,
    pub nra: Aggregate,
    pub cq: Aggregate,
    pub rq: Aggregate,
    /// Accuracy on the retained samples.
    pub accuracy: Aggregate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferralCurve {
    pub rows: Vec<ReferralCurveRow>,
    /// One entry per (fraction, seed); informed mode has a single seedless
    /// entry per fraction.
    pub points: Vec<ReferralPoint>,
}

fn check_aligned(summaries: &[PosteriorSummary], labels: &[usize]) -> Result<()> {
    if summaries.len() != labels.len() {
        return Err(Error::dimension(format!(
            "{} summaries but {} labels",
            summaries.len(),
            labels.len()
        )));
    }
    Ok(())
}

/// Evaluates the retained set after referring `positions`.
pub fn evaluate_referral(
    summaries: &[PosteriorSummary],
    labels: &[usize],
    positions: &[usize],
    positive_class: usize,
) -> Result<(PartitionCounts, ConfusionCounts)> {
    check_aligned(summaries, labels)?;
    let predictions: Vec<usize> = summaries.iter().map(|s| s.predicted_class).collect();
    let counts = partition_counts(&predictions, labels, positions)?;
    let mut keep = vec![true; labels.len()];
    for &i in positions {
        keep[i] = false;
    }
    let confusion = ConfusionCounts::tally(&predictions, labels, &keep, positive_class);
    Ok((counts, confusion))
}

fn point(
    summaries: &[PosteriorSummary],
    labels: &[usize],
    fraction: f64,
    mode: ReferralMode,
    seed: Option<u64>,
    positive_class: usize,
) -> Result<ReferralPoint> {
    let policy = match mode {
        ReferralMode::Informed => RejectionPolicy::InformedFraction { fraction },
        ReferralMode::Random => RejectionPolicy::RandomFraction {
            fraction,
            seed: seed.unwrap_or(0),
        },
    };
    let positions = referred_positions(summaries, &policy)?;
    let (counts, confusion) = evaluate_referral(summaries, labels, &positions, positive_class)?;
    Ok(ReferralPoint {
        fraction,
        mode,
        seed,
        referred: positions.len(),
        rejection: rejection_metrics(&counts),
        classification: prf1(&confusion),
        counts,
        confusion,
    })
}

/// Referral metrics as a function of the referred fraction. Informed mode is
/// deterministic and evaluated once per fraction; random mode is evaluated
/// once per seed and aggregated.
pub fn referral_curve(
    summaries: &[PosteriorSummary],
    labels: &[usize],
    fractions: &[f64],
    mode: ReferralMode,
    seeds: &[u64],
    positive_class: usize,
) -> Result<ReferralCurve> {
    check_aligned(summaries, labels)?;
    for &f in fractions {
        check_fraction(f)?;
    }
    if mode == ReferralMode::Random && seeds.is_empty() {
        return Err(Error::validation("random referral needs at least one seed"));
    }
    let mut rows = Vec::with_capacity(fractions.len());
    let mut points = Vec::new();
    for &fraction in fractions {
        let pts: Vec<ReferralPoint> = match mode {
            ReferralMode::Informed => vec![point(
                summaries,
                labels,
                fraction,
                mode,
                None,
                positive_class,
            )?],
            ReferralMode::Random => seeds
                .iter()
                .map(|&s| point(summaries, labels, fraction, mode, Some(s), positive_class))
                .collect::<Result<_>>()?,
        };
        rows.push(ReferralCurveRow {
            fraction,
            mode,
            referred: pts[0].referred,
            nra: Aggregate::of(pts.iter().map(|p| p.rejection.nra)),
            cq: Aggregate::of(pts.iter().map(|p| p.rejection.cq)),
            rq: Aggregate::of(pts.iter().map(|p| p.rejection.rq)),
            accuracy: Aggregate::of(pts.iter().map(|p| p.rejection.nra)),
        });
        points.extend(pts);
    }
    Ok(ReferralCurve { rows, points })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRow {
    pub tau: f64,
    pub rejected: usize,
    pub retained: usize,
    pub confusion: ConfusionCounts,
    pub metrics: ClassificationMetrics,
    pub counts: PartitionCounts,
    pub rejection: RejectionMetrics,
}

/// One row per threshold in ascending `taus`.
pub fn threshold_sweep(
    summaries: &[PosteriorSummary],
    labels: &[usize],
    taus: &[f64],
    positive_class: usize,
) -> Result<Vec<ThresholdRow>> {
    check_aligned(summaries, labels)?;
    if taus.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::validation("thresholds must be sorted ascending"));
    }
    taus.iter()
        .map(|&tau| {
            let positions = referred_positions(summaries, &RejectionPolicy::Threshold { tau })?;
            let (counts, confusion) =
                evaluate_referral(summaries, labels, &positions, positive_class)?;
            Ok(ThresholdRow {
                tau,
                rejected: counts.rejected,
                retained: counts.retained,
                metrics: prf1(&confusion),
                rejection: rejection_metrics(&counts),
                confusion,
                counts,
            })
        })
        .collect()
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Report for a single policy plus an optional referral curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub policy: RejectionPolicy,
    pub counts: PartitionCounts,
    pub confusion: ConfusionCounts,
    pub metrics: RejectionMetrics,
    pub classification: ClassificationMetrics,
    pub per_fraction: Vec<ReferralCurveRow>,
    #[serde(default)]
    pub points: Vec<ReferralPoint>,
}

impl MetricsReport {
    pub fn build(
        summaries: &[PosteriorSummary],
        labels: &[usize],
        policy: RejectionPolicy,
        curves: &[ReferralCurve],
        positive_class: usize,
    ) -> Result<Self> {
        let positions = referred_positions(summaries, &policy)?;
        let (counts, confusion) = evaluate_referral(summaries, labels, &positions, positive_class)?;
        Ok(Self {
            schema_version: REPORT_SCHEMA_VERSION,
            policy,
            metrics: rejection_metrics(&counts),
            classification: prf1(&confusion),
            counts,
            confusion,
            per_fraction: curves.iter().flat_map(|c| c.rows.clone()).collect(),
            points: curves.iter().flat_map(|c| c.points.clone()).collect(),
        })
    }
}

fn opt(v: Option<f64>) -> String {
    match v {
        None => String::new(),
        Some(x) if x == f64::INFINITY => "inf".to_owned(),
        Some(x) => x.to_string(),
    }
}

/// One CSV row per (fraction, mode, seed).
pub fn write_points_csv<W: Write>(points: &[ReferralPoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Io(e.into());
    w.write_record([
        "fraction",
        "mode",
        "seed",
        "referred",
        "nra",
        "cq",
        "rq",
        "accuracy",
        "tp",
        "tn",
        "fp",
        "fn",
        "precision",
        "recall",
        "f1",
    ])
    .map_err(io)?;
    for p in points {
        let mode = match p.mode {
            ReferralMode::Informed => "informed",
            ReferralMode::Random => "random",
        };
        w.write_record([
            p.fraction.to_string(),
            mode.to_owned(),
            p.seed.map(|s| s.to_string()).unwrap_or_default(),
            p.referred.to_string(),
            opt(p.rejection.nra),
            opt(p.rejection.cq),
            opt(p.rejection.rq),
            opt(p.classification.accuracy),
            p.confusion.tp.to_string(),
            p.confusion.tn.to_string(),
            p.confusion.fp.to_string(),
            p.confusion.fn_.to_string(),
            opt(p.classification.precision),
            opt(p.classification.recall),
            opt(p.classification.f1),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

/// One CSV row per threshold.
pub fn write_threshold_csv<W: Write>(rows: &[ThresholdRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Io(e.into());
    w.write_record([
        "tau",
        "rejected",
        "retained",
        "tp",
        "tn",
        "fp",
        "fn",
        "precision",
        "recall",
        "f1",
        "accuracy",
        "nra",
        "cq",
        "rq",
    ])
    .map_err(io)?;
    for r in rows {
        w.write_record([
            r.tau.to_string(),
            r.rejected.to_string(),
            r.retained.to_string(),
            r.confusion.tp.to_string(),
            r.confusion.tn.to_string(),
            r.confusion.fp.to_string(),
            r.confusion.fn_.to_string(),
            opt(r.metrics.precision),
            opt(r.metrics.recall),
            opt(r.metrics.f1),
            opt(r.metrics.accuracy),
            opt(r.rejection.nra),
            opt(r.rejection.cq),
            opt(r.rejection.rq),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

/// Lookup from sample id to position, for callers holding ids.
pub fn positions_of(summaries: &[PosteriorSummary], ids: &[SampleId]) -> Result<Vec<usize>> {
    let map: HashMap<SampleId, usize> = summaries
        .iter()
        .enumerate()
        .map(|(i, s)| (s.sample_id, i))
        .collect();
    ids.iter()
        .map(|id| {
            map.get(id)
                .copied()
                .ok_or_else(|| Error::validation(format!("unknown sample id {id}")))
        })
        .collect()
}

/// JSON has no infinity: `+∞` is written as the string `"inf"`.
mod extended_float {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            None => s.serialize_none(),
            Some(x) if x.is_infinite() => s.serialize_str(if *x > 0.0 { "inf" } else { "-inf" }),
            Some(x) => s.serialize_f64(*x),
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        match Option::<Repr>::deserialize(d)? {
            None => Ok(None),
            Some(Repr::Num(x)) => Ok(Some(x)),
            Some(Repr::Text(t)) => match t.as_str() {
                "inf" => Ok(Some(f64::INFINITY)),
                "-inf" => Ok(Some(f64::NEG_INFINITY)),
                other => Err(serde::de::Error::custom(format!(
                    "invalid number `{other}`"
                ))),
            },
        }
    }
}
