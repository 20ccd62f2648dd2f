use rand::distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::config::{Activation, NetworkConfig};
use super::dropout::{DropoutLayer, Mask};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::{self, StreamRng};
use crate::tensor::Tensor;

/// Dense affine layer `z = W a + b` followed by an activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    /// Shape `[out, in]`.
    pub weights: Tensor,
    /// Shape `[out]`.
    pub bias: Tensor,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn in_dim(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weights.shape()[0]
    }

    fn affine(&self, input: &[f64], out: &mut Vec<f64>) {
        let w = self.weights.as_slice();
        let n_in = self.in_dim();
        out.clear();
        out.extend(self.bias.as_slice().iter().enumerate().map(|(o, b)| {
            let row = &w[o * n_in..(o + 1) * n_in];
            b + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>()
        }));
    }
}

/// How a forward pass treats dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// No masks; raw weights.
    Deterministic,
    /// Fresh masks drawn from the stream seeded by `pass_seed`.
    Stochastic { pass_seed: u64 },
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / total).collect()
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Feed-forward classifier with per-layer Bernoulli dropout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    config: NetworkConfig,
    layers: Vec<DenseLayer>,
    dropout: Vec<DropoutLayer>,
}

impl Network {
    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero
    /// biases, drawn from `config.seed`.
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(config.seed, &[0x1417]);
        let layers = Self::shapes(&config)
            .into_iter()
            .map(|(n_in, n_out, activation)| {
                let limit = (6.0 / (n_in + n_out) as f64).sqrt();
                let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
                let w = (0..n_in * n_out).map(|_| dist.sample(&mut rng)).collect();
                DenseLayer {
                    weights: Tensor::new(vec![n_out, n_in], w).expect("finite init"),
                    bias: Tensor::zeros(vec![n_out]),
                    activation,
                }
            })
            .collect();
        Ok(Self::assemble(config, layers))
    }

    /// All weights and biases zero.
    pub fn zeros(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let layers = Self::shapes(&config)
            .into_iter()
            .map(|(n_in, n_out, activation)| DenseLayer {
                weights: Tensor::zeros(vec![n_out, n_in]),
                bias: Tensor::zeros(vec![n_out]),
                activation,
            })
            .collect();
        Ok(Self::assemble(config, layers))
    }

    /// Rebuilds a network from `[W0, b0, W1, b1, …]`.
    pub fn from_parameters(config: NetworkConfig, params: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let shapes = Self::shapes(&config);
        if params.len() != 2 * shapes.len() {
            return Err(Error::dimension(format!(
                "expected {} parameter tensors, got {}",
                2 * shapes.len(),
                params.len()
            )));
        }
        let mut it = params.into_iter();
        let mut layers = Vec::with_capacity(shapes.len());
        for (n_in, n_out, activation) in shapes {
            let weights = it.next().expect("length checked");
            let bias = it.next().expect("length checked");
            if weights.shape() != [n_out, n_in] || bias.shape() != [n_out] {
                return Err(Error::dimension(format!(
                    "layer expects [{n_out}, {n_in}] weights and [{n_out}] bias, got {:?} and {:?}",
                    weights.shape(),
                    bias.shape()
                )));
            }
            layers.push(DenseLayer {
                weights,
                bias,
                activation,
            });
        }
        Ok(Self::assemble(config, layers))
    }

    fn shapes(config: &NetworkConfig) -> Vec<(usize, usize, Activation)> {
        let mut shapes = Vec::new();
        let mut n_in = config.input_dim;
        for spec in &config.hidden_layers {
            shapes.push((n_in, spec.width, spec.activation));
            n_in = spec.width;
        }
        shapes.push((n_in, config.num_classes, Activation::Identity));
        shapes
    }

    fn assemble(config: NetworkConfig, layers: Vec<DenseLayer>) -> Self {
        let dropout = config
            .dropout_rates()
            .into_iter()
            .map(DropoutLayer::from_rate)
            .collect();
        Self {
            config,
            layers,
            dropout,
        }
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn dropout_layers(&self) -> &[DropoutLayer] {
        &self.dropout
    }

    pub fn has_active_dropout(&self) -> bool {
        self.dropout.iter().any(DropoutLayer::is_active)
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    /// Parameters in `[W0, b0, W1, b1, …]` order.
    pub fn parameters(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weights, &l.bias])
            .collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weights, &mut l.bias])
            .collect()
    }

    /// `Σ w²` over weight matrices (biases are not penalised).
    pub fn weight_sum_of_squares(&self) -> f64 {
        self.layers.iter().map(|l| l.weights.sum_of_squares()).sum()
    }

    pub fn l2_penalty(&self) -> f64 {
        self.config.l2_lambda * self.weight_sum_of_squares()
    }

    /// One mask per dense layer input.
    pub fn sample_masks(&self, rng: &mut StreamRng) -> Vec<Mask> {
        self.dropout
            .iter()
            .zip(&self.layers)
            .map(|(d, l)| d.sample(l.in_dim(), rng))
            .collect()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.config.input_dim {
            return Err(Error::dimension(format!(
                "input has {} features, network expects {}",
                x.len(),
                self.config.input_dim
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("input contains non-finite values"));
        }
        Ok(())
    }

    /// Softmax output for `x` (shape `[input_dim]`).
    pub fn forward(&self, x: &Tensor, mode: ForwardMode) -> Result<Vec<f64>> {
        if x.shape() != [self.config.input_dim] {
            return Err(Error::dimension(format!(
                "input shape {:?}, network expects [{}]",
                x.shape(),
                self.config.input_dim
            )));
        }
        match mode {
            ForwardMode::Deterministic => Ok(self.probabilities(x.as_slice(), None)),
            ForwardMode::Stochastic { pass_seed } => {
                let mut rng = rng::seeded(pass_seed);
                Ok(self.stochastic_probabilities(x.as_slice(), &mut rng))
            }
        }
    }

    /// Softmax output with fresh masks from `rng`. `x` must already be
    /// validated.
    pub(crate) fn stochastic_probabilities(&self, x: &[f64], rng: &mut StreamRng) -> Vec<f64> {
        if self.has_active_dropout() {
            let masks = self.sample_masks(rng);
            self.probabilities(x, Some(&masks))
        } else {
            self.probabilities(x, None)
        }
    }

    pub(crate) fn probabilities(&self, x: &[f64], masks: Option<&[Mask]>) -> Vec<f64> {
        softmax(&self.logits(x, masks))
    }

    fn logits(&self, x: &[f64], masks: Option<&[Mask]>) -> Vec<f64> {
        let mut input: Vec<f64> = x.to_vec();
        let mut z = Vec::new();
        for (k, layer) in self.layers.iter().enumerate() {
            if let Some(m) = masks {
                for (j, v) in input.iter_mut().enumerate() {
                    *v *= m[k].factor(j);
                }
            }
            layer.affine(&input, &mut z);
            input.clear();
            input.extend(z.iter().map(|&v| layer.activation.apply(v)));
        }
        input
    }

    /// Deterministic class prediction.
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        self.check_input(x)?;
        Ok(argmax(&self.logits(x, None)))
    }

    /// Deterministic accuracy over `data` (0 for an empty dataset).
    pub fn accuracy(&self, data: &Dataset) -> f64 {
        self.accuracy_on(data, &(0..data.len()).collect::<Vec<_>>())
    }

    pub fn accuracy_on(&self, data: &Dataset, indices: &[usize]) -> f64 {
        if indices.is_empty() {
            return 0.0;
        }
        let correct = indices
            .iter()
            .filter(|&&i| argmax(&self.logits(data.row(i), None)) == data.label(i))
            .count();
        correct as f64 / indices.len() as f64
    }

    /// Mean cross-entropy plus `λ Σ w²`, without dropout.
    pub fn loss(&self, batch: &Batch<'_>) -> Result<f64> {
        self.loss_impl(batch, None)
    }

    /// As [`Network::loss`], with one fixed mask set per sample.
    pub fn loss_with_masks(&self, batch: &Batch<'_>, masks: &[Vec<Mask>]) -> Result<f64> {
        if masks.len() != batch.len() {
            return Err(Error::dimension(format!(
                "{} mask sets for {} samples",
                masks.len(),
                batch.len()
            )));
        }
        self.loss_impl(batch, Some(masks))
    }

    fn loss_impl(&self, batch: &Batch<'_>, masks: Option<&[Vec<Mask>]>) -> Result<f64> {
        self.check_batch(batch)?;
        let mut total = 0.0;
        for (i, (x, &y)) in batch.inputs.iter().zip(&batch.labels).enumerate() {
            let z = self.logits(x, masks.map(|m| m[i].as_slice()));
            total += log_sum_exp(&z) - z[y];
        }
        Ok(total / batch.len() as f64 + self.l2_penalty())
    }

    fn check_batch(&self, batch: &Batch<'_>) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::validation("empty batch"));
        }
        for x in &batch.inputs {
            self.check_input(x)?;
        }
        if let Some(&y) = batch.labels.iter().find(|&&y| y >= self.config.num_classes) {
            return Err(Error::validation(format!(
                "label {y} outside 0..{}",
                self.config.num_classes
            )));
        }
        Ok(())
    }
}

/// Inputs and labels of one mini-batch, borrowed from a dataset.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    inputs: Vec<&'a [f64]>,
    labels: Vec<usize>,
}

impl<'a> Batch<'a> {
    pub fn new(inputs: Vec<&'a [f64]>, labels: Vec<usize>) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(Error::dimension(format!(
                "{} inputs but {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        Ok(Self { inputs, labels })
    }

    pub fn from_dataset(data: &'a Dataset, indices: &[usize]) -> Self {
        Self {
            inputs: indices.iter().map(|&i| data.row(i)).collect(),
            labels: indices.iter().map(|&i| data.label(i)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn inputs(&self) -> &[&'a [f64]] {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }
}

/// Gradient of the loss with respect to one dense layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradient {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGradient>,
}

impl Gradients {
    /// Gradients in `[W0, b0, W1, b1, …]` order, matching
    /// [`Network::parameters`].
    pub fn as_slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.as_slices()
            .iter()
            .all(|s| s.iter().all(|v| v.is_finite()))
    }
}

/// Where the dropout masks of a recorded forward pass come from.
pub enum MaskSource<'r> {
    /// No dropout.
    Off,
    /// A fresh mask set per sample.
    Sample(&'r mut StreamRng),
    /// Caller-supplied masks, one set per sample.
    Fixed(&'r [Vec<Mask>]),
}

struct SampleTrace {
    /// Masked input to each dense layer.
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of each dense layer.
    pre: Vec<Vec<f64>>,
    masks: Vec<Mask>,
    probs: Vec<f64>,
    label: usize,
}

struct TapeRecord {
    samples: Vec<SampleTrace>,
    shapes: Vec<[usize; 2]>,
}

/// Records the activations and masks of a batch forward pass so that
/// [`GradientTape::backward`] can replay them.
#[derive(Default)]
pub struct GradientTape {
    record: Option<TapeRecord>,
}

impl GradientTape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Runs the batch forward, records it, and returns the loss
    /// (mean cross-entropy plus the L2 penalty).
    pub fn forward(
        &mut self,
        net: &Network,
        batch: &Batch<'_>,
        masks: MaskSource<'_>,
    ) -> Result<f64> {
        self.record = None;
        net.check_batch(batch)?;
        if let MaskSource::Fixed(m) = &masks {
            if m.len() != batch.len() {
                return Err(Error::dimension(format!(
                    "{} mask sets for {} samples",
                    m.len(),
                    batch.len()
                )));
            }
        }
        let mut masks = masks;
        let mut samples = Vec::with_capacity(batch.len());
        let mut total = 0.0;
        for (i, (x, &label)) in batch.inputs.iter().zip(&batch.labels).enumerate() {
            let sample_masks = match &mut masks {
                MaskSource::Off => net.layers.iter().map(|l| Mask::all(l.in_dim())).collect(),
                MaskSource::Sample(rng) => net.sample_masks(rng),
                MaskSource::Fixed(m) => m[i].clone(),
            };
            let trace = trace_sample(net, x, sample_masks, label)?;
            let logits = trace.pre.last().expect("at least one layer");
            total += log_sum_exp(logits) - logits[label];
            samples.push(trace);
        }
        let shapes = net
            .layers
            .iter()
            .map(|l| [l.out_dim(), l.in_dim()])
            .collect();
        self.record = Some(TapeRecord { samples, shapes });
        Ok(total / batch.len() as f64 + net.l2_penalty())
    }

    /// Gradient of the recorded loss with respect to every parameter.
    pub fn backward(&self, net: &Network) -> Result<Gradients> {
        let record = self
            .record
            .as_ref()
            .ok_or_else(|| Error::State("backward called before forward".into()))?;
        let shapes: Vec<[usize; 2]> = net
            .layers
            .iter()
            .map(|l| [l.out_dim(), l.in_dim()])
            .collect();
        if shapes != record.shapes {
            return Err(Error::State(
                "network architecture differs from the recorded forward pass".into(),
            ));
        }

        let mut grads: Vec<LayerGradient> = net
            .layers
            .iter()
            .map(|l| LayerGradient {
                weights: vec![0.0; l.weights.len()],
                bias: vec![0.0; l.bias.len()],
            })
            .collect();
        let inv_n = 1.0 / record.samples.len() as f64;

        for s in &record.samples {
            // d(loss)/d(logits) for softmax cross-entropy.
            let mut delta: Vec<f64> = s.probs.iter().map(|p| p * inv_n).collect();
            delta[s.label] -= inv_n;

            for k in (0..net.layers.len()).rev() {
                let layer = &net.layers[k];
                let n_in = layer.in_dim();
                let input = &s.inputs[k];
                let g = &mut grads[k];
                for (o, d) in delta.iter().enumerate() {
                    g.bias[o] += d;
                    let row = &mut g.weights[o * n_in..(o + 1) * n_in];
                    for (gw, a) in row.iter_mut().zip(input) {
                        *gw += d * a;
                    }
                }
                if k == 0 {
                    break;
                }
                let w = layer.weights.as_slice();
                let prev = &net.layers[k - 1];
                let mask = &s.masks[k];
                delta = (0..n_in)
                    .map(|j| {
                        let back: f64 = delta
                            .iter()
                            .enumerate()
                            .map(|(o, d)| d * w[o * n_in + j])
                            .sum();
                        back * mask.factor(j) * prev.activation.derivative(s.pre[k - 1][j])
                    })
                    .collect();
            }
        }

        let two_lambda = 2.0 * net.config.l2_lambda;
        if two_lambda > 0.0 {
            for (g, l) in grads.iter_mut().zip(&net.layers) {
                for (gw, w) in g.weights.iter_mut().zip(l.weights.as_slice()) {
                    *gw += two_lambda * w;
                }
            }
        }
        Ok(Gradients { layers: grads })
    }
}

fn trace_sample(net: &Network, x: &[f64], masks: Vec<Mask>, label: usize) -> Result<SampleTrace> {
    if masks.len() != net.layers.len()
        || masks
            .iter()
            .zip(&net.layers)
            .any(|(m, l)| m.len() != l.in_dim())
    {
        return Err(Error::dimension("mask widths do not match the layers"));
    }
    let mut inputs = Vec::with_capacity(net.layers.len());
    let mut pre = Vec::with_capacity(net.layers.len());
    let mut a: Vec<f64> = x.to_vec();
    for (k, layer) in net.layers.iter().enumerate() {
        for (j, v) in a.iter_mut().enumerate() {
            *v *= masks[k].factor(j);
        }
        let mut z = Vec::new();
        layer.affine(&a, &mut z);
        let next = z.iter().map(|&v| layer.activation.apply(v)).collect();
        inputs.push(std::mem::replace(&mut a, next));
        pre.push(z);
    }
    Ok(SampleTrace {
        inputs,
        pre,
        masks,
        probs: softmax(&a),
        label,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::config::LayerSpec;

    fn linear_identity() -> Network {
        let cfg = NetworkConfig::new(2, 2, vec![]).with_l2(0.0);
        Network::from_parameters(
            cfg,
            vec![
                Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
                Tensor::zeros(vec![2]),
            ],
        )
        .unwrap()
    }

    #[test]
    fn zero_network_is_uniform() {
        let cfg = NetworkConfig::new(3, 4, vec![LayerSpec::relu(5)]).with_dropout(0.5, 0.3);
        let net = Network::zeros(cfg).unwrap();
        let x = Tensor::vector(vec![0.3, -2.0, 7.0]).unwrap();
        for mode in [
            ForwardMode::Deterministic,
            ForwardMode::Stochastic { pass_seed: 9 },
        ] {
            for p in net.forward(&x, mode).unwrap() {
                assert!((p - 0.25).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn hand_computed_softmax() {
        let net = linear_identity();
        let x = Tensor::vector(vec![3f64.ln(), 0.0]).unwrap();
        let p = net.forward(&x, ForwardMode::Deterministic).unwrap();
        assert!((p[0] - 0.75).abs() < 1e-12);
        assert!((p[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn no_dropout_means_no_randomness() {
        let cfg =
            NetworkConfig::new(3, 3, vec![LayerSpec::relu(6), LayerSpec::relu(4)]).with_seed(4);
        let net = Network::new(cfg).unwrap();
        let x = Tensor::vector(vec![0.5, -1.0, 2.0]).unwrap();
        let a = net
            .forward(&x, ForwardMode::Stochastic { pass_seed: 1 })
            .unwrap();
        let b = net
            .forward(&x, ForwardMode::Stochastic { pass_seed: 2 })
            .unwrap();
        assert_eq!(a, b);
        assert_eq!(a, net.forward(&x, ForwardMode::Deterministic).unwrap());
    }

    #[test]
    fn stochastic_passes_differ_with_dropout() {
        let cfg = NetworkConfig::new(3, 2, vec![LayerSpec::relu(16)])
            .with_dropout(0.5, 0.5)
            .with_seed(4);
        let net = Network::new(cfg).unwrap();
        let x = Tensor::vector(vec![0.5, -1.0, 2.0]).unwrap();
        let a = net
            .forward(&x, ForwardMode::Stochastic { pass_seed: 1 })
            .unwrap();
        let b = net
            .forward(&x, ForwardMode::Stochastic { pass_seed: 2 })
            .unwrap();
        let again = net
            .forward(&x, ForwardMode::Stochastic { pass_seed: 1 })
            .unwrap();
        assert_ne!(a, b);
        assert_eq!(a, again);
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn forward_errors() {
        let net = linear_identity();
        let wrong = Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(
            net.forward(&wrong, ForwardMode::Deterministic),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            net.predict(&[f64::NAN, 0.0]),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn loss_reference_values() {
        // Huge logits make the correct class certain.
        let cfg = NetworkConfig::new(1, 2, vec![]).with_l2(0.0);
        let confident = Network::from_parameters(
            cfg.clone(),
            vec![
                Tensor::new(vec![2, 1], vec![1000.0, -1000.0]).unwrap(),
                Tensor::zeros(vec![2]),
            ],
        )
        .unwrap();
        let xs = [[1.0], [-1.0]];
        let batch = Batch::new(xs.iter().map(|x| x.as_slice()).collect(), vec![0, 1]).unwrap();
        assert_eq!(confident.loss(&batch).unwrap(), 0.0);

        let uniform = Network::zeros(cfg).unwrap();
        let l = uniform.loss(&batch).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);

        let empty = Batch::new(vec![], vec![]).unwrap();
        assert!(matches!(uniform.loss(&empty), Err(Error::Validation(_))));
    }

    #[test]
    fn loss_matches_scalar_reimplementation() {
        // Second evaluator written out longhand for a 2-3-2 relu net.
        let cfg = NetworkConfig::new(2, 2, vec![LayerSpec::relu(3)]).with_l2(0.01);
        let w1 = [0.2, -0.4, 0.7, 0.1, -0.3, 0.5];
        let b1 = [0.05, -0.1, 0.0];
        let w2 = [0.3, -0.6, 0.2, -0.1, 0.4, 0.9];
        let b2 = [0.01, -0.02];
        let net = Network::from_parameters(
            cfg,
            vec![
                Tensor::new(vec![3, 2], w1.to_vec()).unwrap(),
                Tensor::vector(b1.to_vec()).unwrap(),
                Tensor::new(vec![2, 3], w2.to_vec()).unwrap(),
                Tensor::vector(b2.to_vec()).unwrap(),
            ],
        )
        .unwrap();
        let xs = [[1.0, 2.0], [-0.5, 0.3], [0.0, -1.5]];
        let ys = [1usize, 0, 1];

        let mut ce = 0.0;
        for (x, &y) in xs.iter().zip(&ys) {
            let mut h = [0.0; 3];
            for o in 0..3 {
                let z = w1[2 * o] * x[0] + w1[2 * o + 1] * x[1] + b1[o];
                h[o] = if z > 0.0 { z } else { 0.0 };
            }
            let mut logit = [0.0; 2];
            for o in 0..2 {
                logit[o] = w2[3 * o] * h[0] + w2[3 * o + 1] * h[1] + w2[3 * o + 2] * h[2] + b2[o];
            }
            let denom = logit[0].exp() + logit[1].exp();
            ce -= (logit[y].exp() / denom).ln();
        }
        let sq: f64 = w1.iter().chain(&w2).map(|w| w * w).sum();
        let expected = ce / 3.0 + 0.01 * sq;

        let batch = Batch::new(xs.iter().map(|x| x.as_slice()).collect(), ys.to_vec()).unwrap();
        assert!((net.loss(&batch).unwrap() - expected).abs() < 1e-12);
        let mut tape = GradientTape::new();
        let taped = tape.forward(&net, &batch, MaskSource::Off).unwrap();
        assert!((taped - expected).abs() < 1e-12);
    }

    #[test]
    fn backward_before_forward_is_state_error() {
        let net = linear_identity();
        assert!(matches!(
            GradientTape::new().backward(&net),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn zero_weight_gradient_closed_form() {
        // At zero weights the output is uniform, so dL/dW = mean((p - onehot) xᵀ).
        let cfg = NetworkConfig::new(2, 2, vec![]).with_l2(0.0);
        let net = Network::zeros(cfg).unwrap();
        let xs = [[1.0, 2.0], [-1.0, -2.0]];
        let batch = Batch::new(xs.iter().map(|x| x.as_slice()).collect(), vec![0, 1]).unwrap();
        let mut tape = GradientTape::new();
        tape.forward(&net, &batch, MaskSource::Off).unwrap();
        let g = tape.backward(&net).unwrap();
        // sample 0: (p - e0) = [-0.5, 0.5], x = [1, 2]
        // sample 1: (p - e1) = [0.5, -0.5], x = [-1, -2]
        // mean: row0 = [-0.5, -1.0], row1 = [0.5, 1.0]
        assert_eq!(g.layers[0].weights, vec![-0.5, -1.0, 0.5, 1.0]);
        assert_eq!(g.layers[0].bias, vec![0.0, 0.0]);
    }

    #[test]
    fn regulariser_only_gradient() {
        // Zero input and zero bias: the data term has no weight gradient.
        let cfg = NetworkConfig::new(2, 2, vec![]).with_l2(0.3);
        let w = vec![0.5, -1.0, 2.0, 0.25];
        let net = Network::from_parameters(
            cfg,
            vec![
                Tensor::new(vec![2, 2], w.clone()).unwrap(),
                Tensor::zeros(vec![2]),
            ],
        )
        .unwrap();
        let x = [0.0, 0.0];
        let batch = Batch::new(vec![&x[..]], vec![1]).unwrap();
        let mut tape = GradientTape::new();
        tape.forward(&net, &batch, MaskSource::Off).unwrap();
        let g = tape.backward(&net).unwrap();
        let expected: Vec<f64> = w.iter().map(|w| 2.0 * 0.3 * w).collect();
        assert_eq!(g.layers[0].weights, expected);
    }

    #[test]
    fn gradient_shapes_mirror_weights() {
        let cfg = NetworkConfig::new(3, 4, vec![LayerSpec::relu(5), LayerSpec::relu(2)])
            .with_dropout(0.3, 0.2)
            .with_seed(1);
        let net = Network::new(cfg).unwrap();
        let x = [0.1, 0.2, 0.3];
        let batch = Batch::new(vec![&x[..]], vec![2]).unwrap();
        let mut tape = GradientTape::new();
        let mut r = rng::seeded(0);
        tape.forward(&net, &batch, MaskSource::Sample(&mut r))
            .unwrap();
        let g = tape.backward(&net).unwrap();
        for (gs, p) in g.as_slices().iter().zip(net.parameters()) {
            assert_eq!(gs.len(), p.len());
        }
    }

    #[test]
    fn dropped_units_get_no_gradient() {
        let cfg = NetworkConfig::new(2, 2, vec![LayerSpec::relu(3)])
            .with_dropout(0.0, 0.5)
            .with_l2(0.0)
            .with_seed(3);
        let net = Network::new(cfg).unwrap();
        let x = [1.0, -1.0];
        let batch = Batch::new(vec![&x[..]], vec![0]).unwrap();
        let masks = vec![vec![
            Mask::all(2),
            Mask {
                keep: vec![true, false, true],
                scale: 2.0,
            },
        ]];
        let mut tape = GradientTape::new();
        tape.forward(&net, &batch, MaskSource::Fixed(&masks))
            .unwrap();
        let g = tape.backward(&net).unwrap();
        // Column 1 of the head and row 1 of the hidden layer see nothing.
        assert_eq!(g.layers[1].weights[1], 0.0);
        assert_eq!(g.layers[1].weights[4], 0.0);
        assert_eq!(&g.layers[0].weights[2..4], &[0.0, 0.0]);
        assert_eq!(g.layers[0].bias[1], 0.0);
    }
}
