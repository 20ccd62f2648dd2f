use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng;

/// Fractions of a dataset assigned to each split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub pool: f64,
    pub stratified: bool,
    pub seed: u64,
}

impl SplitSpec {
    fn fractions(&self) -> [f64; 4] {
        [self.train, self.val, self.test, self.pool]
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.fractions();
        if f.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::validation(format!(
                "split fractions must be non-negative, got {f:?}"
            )));
        }
        let sum: f64 = f.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::validation(format!(
                "split fractions sum to {sum}, expected 1"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub pool: Dataset,
}

impl Splits {
    pub fn checksums(&self) -> BTreeMap<String, String> {
        [
            ("train", &self.train),
            ("val", &self.val),
            ("test", &self.test),
            ("pool", &self.pool),
        ]
        .into_iter()
        .map(|(k, d)| (k.to_owned(), checksum(d)))
        .collect()
    }
}

/// SHA-256 over the ids, labels and feature bits of `data`, in row order.
pub fn checksum(data: &Dataset) -> String {
    let mut h = Sha256::new();
    for i in 0..data.len() {
        h.update(data.id(i).0.to_le_bytes());
        h.update((data.label(i) as u64).to_le_bytes());
        for v in data.row(i) {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Largest-remainder apportionment of `n` items over `fractions`.
fn apportion(n: usize, fractions: &[f64; 4]) -> [usize; 4] {
    let mut counts = [0usize; 4];
    let mut rema = [(0.0f64, 0usize); 4];
    for (j, f) in fractions.iter().enumerate() {
        let exact = f * n as f64;
        counts[j] = exact.floor() as usize;
        rema[j] = (exact - exact.floor(), j);
    }
    let assigned: usize = counts.iter().sum();
    let mut left = n.saturating_sub(assigned);
    rema.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(r, j) in rema.iter().cycle() {
        if left == 0 {
            break;
        }
        if fractions[j] > 0.0 || r > 0.0 {
            counts[j] += 1;
            left -= 1;
        }
    }
    counts
}

/// Splits `data` into disjoint train/val/test/pool subsets.
pub fn split(data: &Dataset, spec: &SplitSpec) -> Result<Splits> {
    spec.validate()?;
    let fractions = spec.fractions();
    let wanted = fractions.iter().filter(|f| **f > 0.0).count();

    let strata: Vec<Vec<usize>> = if spec.stratified {
        let mut by_class = vec![Vec::new(); data.num_classes()];
        for i in 0..data.len() {
            by_class[data.label(i)].push(i);
        }
        by_class.into_iter().filter(|s| !s.is_empty()).collect()
    } else {
        vec![(0..data.len()).collect()]
    };

    let mut buckets: [Vec<usize>; 4] = Default::default();
    for (s, mut members) in strata.into_iter().enumerate() {
        if members.len() < wanted {
            return Err(Error::validation(format!(
                "stratum of {} samples cannot fill {wanted} splits",
                members.len()
            )));
        }
        let mut rng = rng::stream(spec.seed, &[s as u64]);
        members.shuffle(&mut rng);
        let counts = apportion(members.len(), &fractions);
        let mut start = 0;
        for (j, c) in counts.iter().enumerate() {
            buckets[j].extend_from_slice(&members[start..start + c]);
            start += c;
        }
    }
    let [train, val, test, pool] = buckets.map(|idx| data.subset(&idx));
    Ok(Splits {
        train,
        val,
        test,
        pool,
    })
}

/// Per-feature z-score transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Checksum of the split the statistics were computed on.
    pub fitted_on: String,
}

impl Standardizer {
    /// Population mean and standard deviation of each feature. Constant
    /// features get a unit scale.
    pub fn fit(train: &Dataset) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::validation(
                "cannot fit normalisation on an empty split",
            ));
        }
        let d = train.input_dim();
        let n = train.len() as f64;
        let mut mean = vec![0.0; d];
        for i in 0..train.len() {
            for (m, v) in mean.iter_mut().zip(train.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for i in 0..train.len() {
            for ((s, v), m) in var.iter_mut().zip(train.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self {
            mean,
            std,
            fitted_on: checksum(train),
        })
    }

    pub fn transform(&self, data: &Dataset) -> Result<Dataset> {
        if data.input_dim() != self.mean.len() {
            return Err(Error::dimension(format!(
                "normaliser fitted on {} features, data has {}",
                self.mean.len(),
                data.input_dim()
            )));
        }
        let mut out = data.clone();
        let d = self.mean.len();
        for (k, v) in out.features_mut().iter_mut().enumerate() {
            let j = k % d;
            *v = (*v - self.mean[j]) / self.std[j];
        }
        Ok(out)
    }
}

/// Descriptive manifest for a dataset and its splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub name: String,
    pub input_dim: usize,
    pub num_classes: usize,
    pub size: usize,
    pub checksum: String,
    pub split_checksums: BTreeMap<String, String>,
    pub normalisation: Option<Standardizer>,
}

impl DatasetMeta {
    pub fn describe(data: &Dataset, splits: Option<&Splits>, norm: Option<&Standardizer>) -> Self {
        Self {
            name: data.name.clone(),
            input_dim: data.input_dim(),
            num_classes: data.num_classes(),
            size: data.len(),
            checksum: checksum(data),
            split_checksums: splits.map(Splits::checksums).unwrap_or_default(),
            normalisation: norm.cloned(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}
