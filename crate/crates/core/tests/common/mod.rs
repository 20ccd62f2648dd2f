//! Independent reference implementations used as test oracles.

#![allow(dead_code, clippy::needless_range_loop)]

use std::collections::BTreeSet;

/// A plain dense network: `weights[k]` is `[out, in]` row-major.
pub struct RefNet {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub shapes: Vec<(usize, usize)>,
    /// `relu[k]` is true when layer `k` applies ReLU.
    pub relu: Vec<bool>,
    pub lambda: f64,
}

/// Per-layer input multipliers: 0 for a dropped unit, `1/keep` otherwise.
pub type RefMasks = Vec<Vec<f64>>;

impl RefNet {
    pub fn logits(&self, x: &[f64], masks: &RefMasks) -> (Vec<f64>, Vec<Vec<f64>>) {
        let mut a = x.to_vec();
        let mut pre_acts = Vec::new();
        for k in 0..self.weights.len() {
            let (out, inp) = self.shapes[k];
            let input: Vec<f64> = a.iter().zip(&masks[k]).map(|(v, m)| v * m).collect();
            let mut z = vec![0.0; out];
            for o in 0..out {
                let mut acc = self.biases[k][o];
                for i in 0..inp {
                    acc += self.weights[k][o * inp + i] * input[i];
                }
                z[o] = acc;
            }
            pre_acts.push(z.clone());
            a = if self.relu[k] {
                z.iter().map(|v| v.max(0.0)).collect()
            } else {
                z
            };
        }
        (a, pre_acts)
    }

    /// Mean cross-entropy plus `λ Σ w²`.
    pub fn loss(&self, xs: &[Vec<f64>], ys: &[usize], masks: &[RefMasks]) -> f64 {
        let mut total = 0.0;
        for ((x, &y), m) in xs.iter().zip(ys).zip(masks) {
            let (z, _) = self.logits(x, m);
            let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = zmax + z.iter().map(|v| (v - zmax).exp()).sum::<f64>().ln();
            total += lse - z[y];
        }
        let reg: f64 = self.weights.iter().flatten().map(|w| w * w).sum();
        total / xs.len() as f64 + self.lambda * reg
    }

    /// Smallest |pre-activation| at a ReLU unit; small values put a finite
    /// difference across a kink.
    pub fn min_relu_margin(&self, xs: &[Vec<f64>], masks: &[RefMasks]) -> f64 {
        let mut m = f64::INFINITY;
        for (x, mk) in xs.iter().zip(masks) {
            let (_, pre) = self.logits(x, mk);
            for (k, z) in pre.iter().enumerate() {
                if self.relu[k] {
                    for v in z {
                        m = m.min(v.abs());
                    }
                }
            }
        }
        m
    }

    /// Central differences of [`RefNet::loss`], in `[W0, b0, W1, b1, …]` order.
    pub fn numeric_gradient(
        &mut self,
        xs: &[Vec<f64>],
        ys: &[usize],
        masks: &[RefMasks],
        h: f64,
    ) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        for k in 0..self.weights.len() {
            for which in 0..2 {
                let len = if which == 0 {
                    self.weights[k].len()
                } else {
                    self.biases[k].len()
                };
                let mut g = vec![0.0; len];
                for i in 0..len {
                    let orig = self.param(k, which, i);
                    self.set_param(k, which, i, orig + h);
                    let up = self.loss(xs, ys, masks);
                    self.set_param(k, which, i, orig - h);
                    let down = self.loss(xs, ys, masks);
                    self.set_param(k, which, i, orig);
                    g[i] = (up - down) / (2.0 * h);
                }
                out.push(g);
            }
        }
        out
    }

    fn param(&self, k: usize, which: usize, i: usize) -> f64 {
        if which == 0 {
            self.weights[k][i]
        } else {
            self.biases[k][i]
        }
    }

    fn set_param(&mut self, k: usize, which: usize, i: usize, v: f64) {
        if which == 0 {
            self.weights[k][i] = v;
        } else {
            self.biases[k][i] = v;
        }
    }
}

/// `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Partition metrics computed from explicit id sets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SetMetrics {
    pub a: usize,
    pub m: usize,
    pub n: usize,
    pub r: usize,
    pub a_n: usize,
    pub a_r: usize,
    pub m_n: usize,
    pub m_r: usize,
    pub nra: Option<f64>,
    pub cq: Option<f64>,
    /// `Some(f64::INFINITY)` for the unbounded case.
    pub rq: Option<f64>,
}

pub fn set_oracle(correct: &[bool], referred: &BTreeSet<usize>) -> SetMetrics {
    let all: BTreeSet<usize> = (0..correct.len()).collect();
    let a: BTreeSet<usize> = all.iter().copied().filter(|&i| correct[i]).collect();
    let m: BTreeSet<usize> = all.difference(&a).copied().collect();
    let r: BTreeSet<usize> = referred.clone();
    let n: BTreeSet<usize> = all.difference(&r).copied().collect();
    let a_n = a.intersection(&n).count();
    let a_r = a.intersection(&r).count();
    let m_n = m.intersection(&n).count();
    let m_r = m.intersection(&r).count();
    let nra = if n.is_empty() {
        None
    } else {
        Some(a_n as f64 / n.len() as f64)
    };
    let cq = if all.is_empty() {
        None
    } else {
        Some((a_n + m_r) as f64 / (n.len() + r.len()) as f64)
    };
    let rq = if m.is_empty() || a.is_empty() {
        None
    } else if a_r == 0 {
        if m_r > 0 {
            Some(f64::INFINITY)
        } else {
            None
        }
    } else {
        Some((m_r * a.len()) as f64 / (a_r * m.len()) as f64)
    };
    SetMetrics {
        a: a.len(),
        m: m.len(),
        n: n.len(),
        r: r.len(),
        a_n,
        a_r,
        m_n,
        m_r,
        nra,
        cq,
        rq,
    }
}

/// Two-class Fisher discriminant fitted by closed form; returns the
/// accuracy on `test`.
pub fn lda_accuracy(
    train_x: &[Vec<f64>],
    train_y: &[usize],
    test_x: &[Vec<f64>],
    test_y: &[usize],
) -> f64 {
    let d = train_x[0].len();
    let mut mean = [vec![0.0; d], vec![0.0; d]];
    let mut count = [0usize; 2];
    for (x, &y) in train_x.iter().zip(train_y) {
        count[y] += 1;
        for j in 0..d {
            mean[y][j] += x[j];
        }
    }
    for c in 0..2 {
        for v in &mut mean[c] {
            *v /= count[c] as f64;
        }
    }
    let mut cov = vec![vec![0.0; d]; d];
    for (x, &y) in train_x.iter().zip(train_y) {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += (x[i] - mean[y][i]) * (x[j] - mean[y][j]);
            }
        }
    }
    let n = (train_x.len() - 2) as f64;
    for row in &mut cov {
        for v in row.iter_mut() {
            *v /= n;
        }
    }
    let diff: Vec<f64> = (0..d).map(|j| mean[1][j] - mean[0][j]).collect();
    let w = solve(cov, diff);
    let mid: Vec<f64> = (0..d).map(|j| 0.5 * (mean[0][j] + mean[1][j])).collect();
    let correct = test_x
        .iter()
        .zip(test_y)
        .filter(|(x, &y)| {
            let s: f64 = (0..d).map(|j| w[j] * (x[j] - mid[j])).sum();
            (s > 0.0) as usize == y
        })
        .count();
    correct as f64 / test_x.len() as f64
}

/// Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x
}

use mcref_core::nn::{
    Activation, Batch, GradientTape, LayerSpec, Mask, MaskSource, Network, NetworkConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Builds a random small network, batch and dropout masks, and returns the
/// largest relative error between the tape gradient and central differences
/// of the reference loss. Cases with a ReLU unit near its kink are redrawn.
pub fn gradient_check_case(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let input_dim = rng.random_range(1..=5);
        let classes = rng.random_range(2..=4);
        let hidden: Vec<LayerSpec> = (0..rng.random_range(0..=2))
            .map(|_| LayerSpec::relu(rng.random_range(1..=6)))
            .collect();
        let alpha = if rng.random_bool(0.5) {
            rng.random_range(0.0..0.6)
        } else {
            0.0
        };
        let beta = if rng.random_bool(0.5) {
            rng.random_range(0.0..0.6)
        } else {
            0.0
        };
        let cfg = NetworkConfig::new(input_dim, classes, hidden)
            .with_dropout(alpha, beta)
            .with_l2(rng.random_range(0.0..1e-2))
            .with_seed(rng.random());
        let mut net = Network::new(cfg.clone()).unwrap();
        for p in net.parameters_mut() {
            for v in p.as_mut_slice() {
                *v += rng.random_range(-0.5..0.5);
            }
        }
        let n = rng.random_range(1..=5);
        let xs: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                (0..input_dim)
                    .map(|_| rng.random_range(-2.0..2.0))
                    .collect()
            })
            .collect();
        let ys: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();

        let rates = cfg.dropout_rates();
        let widths: Vec<usize> = net.layers().iter().map(|l| l.in_dim()).collect();
        let mut core_masks = Vec::new();
        let mut ref_masks = Vec::new();
        for _ in 0..n {
            let mut cm = Vec::new();
            let mut rm = Vec::new();
            for (k, &w) in widths.iter().enumerate() {
                let p = 1.0 - rates[k];
                let keep: Vec<bool> = (0..w)
                    .map(|_| rates[k] == 0.0 || rng.random_bool(p))
                    .collect();
                rm.push(
                    keep.iter()
                        .map(|&b| if b { 1.0 / p } else { 0.0 })
                        .collect(),
                );
                cm.push(Mask {
                    keep,
                    scale: 1.0 / p,
                });
            }
            core_masks.push(cm);
            ref_masks.push(rm);
        }

        let mut reference = RefNet {
            weights: net
                .layers()
                .iter()
                .map(|l| l.weights.as_slice().to_vec())
                .collect(),
            biases: net
                .layers()
                .iter()
                .map(|l| l.bias.as_slice().to_vec())
                .collect(),
            shapes: net
                .layers()
                .iter()
                .map(|l| (l.out_dim(), l.in_dim()))
                .collect(),
            relu: net
                .layers()
                .iter()
                .map(|l| l.activation == Activation::Relu)
                .collect(),
            lambda: cfg.l2_lambda,
        };
        if reference.min_relu_margin(&xs, &ref_masks) < 1e-3 {
            continue;
        }

        let inputs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let batch = Batch::new(inputs, ys.clone()).unwrap();
        let mut tape = GradientTape::new();
        let loss = tape
            .forward(&net, &batch, MaskSource::Fixed(&core_masks))
            .unwrap();
        let reference_loss = reference.loss(&xs, &ys, &ref_masks);
        assert!(
            relative_error(loss, reference_loss) < 1e-12,
            "loss {loss} vs reference {reference_loss}"
        );
        let analytic = tape.backward(&net).unwrap();
        let numeric = reference.numeric_gradient(&xs, &ys, &ref_masks, 1e-5);
        let mut worst = 0.0f64;
        for (a, nvec) in analytic.as_slices().iter().zip(&numeric) {
            assert_eq!(a.len(), nvec.len());
            for (&x, &y) in a.iter().zip(nvec) {
                worst = worst.max(relative_error(x, y));
            }
        }
        return worst;
    }
}

/// Compares the library partition and metrics to [`set_oracle`] for one
/// instance. Predictions are built so that `correct[i]` holds.
pub fn check_partition_instance(
    correct: &[bool],
    referred: &BTreeSet<usize>,
) -> Result<(), String> {
    use mcref_core::rejection::{partition_counts, rejection_metrics};
    let labels: Vec<usize> = (0..correct.len()).map(|i| i % 3).collect();
    let predictions: Vec<usize> = labels
        .iter()
        .zip(correct)
        .map(|(&y, &ok)| if ok { y } else { (y + 1) % 3 })
        .collect();
    let positions: Vec<usize> = referred.iter().copied().collect();
    let pc = partition_counts(&predictions, &labels, &positions).map_err(|e| e.to_string())?;
    let m = rejection_metrics(&pc);
    let o = set_oracle(correct, referred);
    let counts = (
        pc.correct,
        pc.misclassified,
        pc.retained,
        pc.rejected,
        pc.correct_retained,
        pc.correct_rejected,
        pc.misclassified_retained,
        pc.misclassified_rejected,
    );
    let expected = (o.a, o.m, o.n, o.r, o.a_n, o.a_r, o.m_n, o.m_r);
    if counts != expected {
        return Err(format!("counts {counts:?} != oracle {expected:?}"));
    }
    if (m.nra, m.cq, m.rq) != (o.nra, o.cq, o.rq) {
        return Err(format!(
            "metrics {:?} != oracle {:?}",
            (m.nra, m.cq, m.rq),
            (o.nra, o.cq, o.rq)
        ));
    }
    Ok(())
}

/// Spread of μ over 50 independent `mc_predict` calls at T=25 divided by the
/// spread at T=100, for a fixed input and a dropout-active network.
pub fn mc_concentration_ratio(seed: u64) -> f64 {
    use mcref_core::uncertainty::{mc_predict, McConfig};
    use mcref_core::{SampleId, Tensor};
    let net = Network::new(
        NetworkConfig::new(2, 2, vec![LayerSpec::relu(16), LayerSpec::relu(16)])
            .with_dropout(0.5, 0.4)
            .with_seed(seed),
    )
    .unwrap();
    let x = Tensor::vector(vec![0.7, -0.4]).unwrap();
    let spread = |passes: usize| {
        let mus: Vec<f64> = (0..50u64)
            .map(|k| {
                let cfg = McConfig {
                    passes,
                    base_seed: seed.wrapping_mul(1000).wrapping_add(k),
                    ..McConfig::default()
                };
                mc_predict(&net, SampleId(0), &x, &cfg).unwrap().mu[0]
            })
            .collect();
        let mean = mus.iter().sum::<f64>() / mus.len() as f64;
        (mus.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (mus.len() - 1) as f64).sqrt()
    };
    spread(25) / spread(100)
}
