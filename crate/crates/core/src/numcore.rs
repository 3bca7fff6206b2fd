//! Dense network kernel: explicit forward/backward passes, softmax,
//! cross-entropy, ADAM and central-difference gradient checking.
//!
//! Parameters of a [`DenseNet`] live in one flat vector (per layer: weights
//! row-major `outputs x inputs`, then biases) with a gradient vector of the
//! same layout, which keeps the optimizer and checkpoints trivial.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
}

impl LayerShape {
    fn param_count(&self) -> usize {
        self.inputs * self.outputs + self.outputs
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    layers: Vec<LayerShape>,
    offsets: Vec<usize>,
    pub params: Vec<f64>,
    pub grads: Vec<f64>,
}

/// Activations recorded by [`DenseNet::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer, followed by the network output.
    acts: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("cache holds at least the input")
    }
}

impl DenseNet {
    /// Relu hidden layers and an identity output layer, zero-initialised.
    pub fn mlp(sizes: &[usize]) -> DenseNet {
        assert!(sizes.len() >= 2, "an mlp needs input and output sizes");
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| LayerShape {
                inputs: w[0],
                outputs: w[1],
                activation: if i + 2 == sizes.len() {
                    Activation::Identity
                } else {
                    Activation::Relu
                },
            })
            .collect();
        DenseNet::from_layers(layers).expect("windowed sizes are compatible")
    }

    pub fn from_layers(layers: Vec<LayerShape>) -> Result<DenseNet> {
        if layers.is_empty() {
            return Err(Error::InvalidParams("network needs at least one layer".into()));
        }
        for w in layers.windows(2) {
            if w[0].outputs != w[1].inputs {
                return Err(Error::Dimension {
                    expected: w[0].outputs,
                    got: w[1].inputs,
                });
            }
        }
        let mut offsets = Vec::with_capacity(layers.len());
        let mut total = 0;
        for l in &layers {
            offsets.push(total);
            total += l.param_count();
        }
        Ok(DenseNet {
            layers,
            offsets,
            params: vec![0.0; total],
            grads: vec![0.0; total],
        })
    }

    /// Uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn init_glorot<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        for (l, &off) in self.layers.iter().zip(&self.offsets) {
            let limit = (6.0 / (l.inputs + l.outputs) as f64).sqrt();
            let nw = l.inputs * l.outputs;
            for p in &mut self.params[off..off + nw] {
                *p = rng.random_range(-limit..limit);
            }
            self.params[off + nw..off + l.param_count()].fill(0.0);
        }
    }

    pub fn layers(&self) -> &[LayerShape] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn zero_grad(&mut self) {
        self.grads.fill(0.0);
    }

    pub fn forward(&self, input: &[f64]) -> Result<ForwardCache> {
        if input.len() != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                got: input.len(),
            });
        }
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(input.to_vec());
        for (l, &off) in self.layers.iter().zip(&self.offsets) {
            let x = acts.last().unwrap();
            let (w, b) = self.params[off..off + l.param_count()].split_at(l.inputs * l.outputs);
            let mut y: Vec<f64> = b.to_vec();
            for (o, yo) in y.iter_mut().enumerate() {
                let row = &w[o * l.inputs..(o + 1) * l.inputs];
                *yo += dot(row, x);
            }
            if l.activation == Activation::Relu {
                y.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            acts.push(y);
        }
        Ok(ForwardCache { acts })
    }

    /// Output only.
    pub fn predict(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(input)?.acts.pop().unwrap())
    }

    /// Accumulates parameter gradients for one sample and returns the
    /// gradient with respect to the input.
    pub fn backward(&mut self, cache: &ForwardCache, grad_out: &[f64]) -> Vec<f64> {
        assert_eq!(grad_out.len(), self.output_dim());
        let mut g = grad_out.to_vec();
        for li in (0..self.layers.len()).rev() {
            let l = self.layers[li];
            let off = self.offsets[li];
            let x = &cache.acts[li];
            let y = &cache.acts[li + 1];
            if l.activation == Activation::Relu {
                for (gi, &yi) in g.iter_mut().zip(y) {
                    if yi <= 0.0 {
                        *gi = 0.0;
                    }
                }
            }
            let nw = l.inputs * l.outputs;
            let mut gx = vec![0.0; l.inputs];
            for (o, &go) in g.iter().enumerate() {
                if go == 0.0 {
                    continue;
                }
                let row = off + o * l.inputs;
                axpy(go, x, &mut self.grads[row..row + l.inputs]);
                axpy(go, &self.params[row..row + l.inputs], &mut gx);
                self.grads[off + nw + o] += go;
            }
            g = gx;
        }
        g
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Numerically stable softmax (max-shifted).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= sum);
    out
}

/// Vector-Jacobian product of softmax: maps `dL/dp` to `dL/dz`.
pub fn softmax_backward(probs: &[f64], grad_probs: &[f64]) -> Vec<f64> {
    let inner = dot(probs, grad_probs);
    probs.iter().zip(grad_probs).map(|(p, g)| p * (g - inner)).collect()
}

/// Floor applied to the labelled probability before the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// `-log p[label]` and its gradient with respect to `p`.
pub fn cross_entropy(probs: &[f64], label: usize) -> (f64, Vec<f64>) {
    let p = probs[label].max(PROB_FLOOR);
    let mut grad = vec![0.0; probs.len()];
    grad[label] = -1.0 / p;
    (-p.ln(), grad)
}

/// Cross-entropy of `softmax(logits)`: returns the loss, the probabilities
/// and the gradient with respect to the logits (`p - onehot`).
pub fn cross_entropy_logits(logits: &[f64], label: usize) -> (f64, Vec<f64>, Vec<f64>) {
    let probs = softmax(logits);
    let loss = -probs[label].max(PROB_FLOOR).ln();
    let mut grad = probs.clone();
    grad[label] -= 1.0;
    (loss, probs, grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment accumulators for one parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        AdamState {
            config,
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    /// One bias-corrected ADAM update of `params` with learning rate `lr`.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// Step schedule: `base * factor^(milestones passed)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: f64,
    pub milestones: Vec<usize>,
    pub factor: f64,
}

impl LrSchedule {
    pub fn lr_at(&self, iteration: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| iteration >= m).count();
        self.base * self.factor.powi(passed as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub checked: usize,
}

/// Finite-difference step used by [`grad_check`].
pub const FD_STEP: f64 = 1e-5;

/// Relative error `|a - n| / max(|a|, |n|, 1e-6)`. The floor keeps
/// near-zero gradients from amplifying round-off.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_scaled(analytic, numeric, 1.0)
}

/// [`relative_error`] with the floor multiplied by `scale` (at least 1),
/// typically the loss magnitude, since central-difference round-off grows
/// with it.
pub fn relative_error_scaled(analytic: f64, numeric: f64, scale: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6 * scale.max(1.0))
}

/// Compares `analytic` with central differences of `loss` around `params`.
pub fn grad_check<F>(mut loss: F, params: &[f64], analytic: &[f64]) -> GradCheckReport
where
    F: FnMut(&[f64]) -> f64,
{
    grad_check_with(|p, _| loss(p), params, analytic)
}

/// Like [`grad_check`], but the objective may depend on which coordinate is
/// being perturbed. Used where a stop-gradient boundary makes different
/// parameter groups follow different objectives.
pub fn grad_check_with<F>(mut loss: F, params: &[f64], analytic: &[f64]) -> GradCheckReport
where
    F: FnMut(&[f64], usize) -> f64,
{
    assert_eq!(params.len(), analytic.len());
    let mut x = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_index: 0,
        checked: params.len(),
    };
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + FD_STEP;
        let up = loss(&x, i);
        x[i] = orig - FD_STEP;
        let down = loss(&x, i);
        x[i] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        let err = relative_error_scaled(analytic[i], numeric, 0.5 * (up.abs() + down.abs()));
        if err > report.max_rel_err || err.is_nan() {
            report.max_rel_err = err;
            report.worst_index = i;
        }
    }
    report
}

/// Writes parameters as little-endian 64-bit floats.
pub fn write_param_blob(path: &Path, params: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(params.len() * 8);
    for p in params {
        bytes.extend_from_slice(&p.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_param_blob(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::InvalidParams(format!(
            "{}: blob length {} is not a multiple of 8",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_layer_passes_input_through() {
        let mut net = DenseNet::mlp(&[2, 2]);
        net.params.copy_from_slice(&[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        assert_eq!(net.predict(&[3.5, -2.0]).unwrap(), vec![3.5, -2.0]);
    }

    #[test]
    fn relu_clips_negatives() {
        let mut net = DenseNet::from_layers(vec![LayerShape {
            inputs: 2,
            outputs: 2,
            activation: Activation::Relu,
        }])
        .unwrap();
        net.params.copy_from_slice(&[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        assert_eq!(net.predict(&[-1.0, 2.0]).unwrap(), vec![0.0, 2.0]);
    }

    #[test]
    fn two_layer_matches_hand_arithmetic() {
        // h = relu([[1, -1], [2, 0.5]] x + [0, -1]), y = [3, -2] h + 0.5
        let mut net = DenseNet::mlp(&[2, 2, 1]);
        net.params
            .copy_from_slice(&[1.0, -1.0, 2.0, 0.5, 0.0, -1.0, 3.0, -2.0, 0.5]);
        // x = [1, 2]: pre = [-1, 2 + 1 - 1] = [-1, 2]; h = [0, 2]; y = -4 + 0.5
        assert_eq!(net.predict(&[1.0, 2.0]).unwrap(), vec![-3.5]);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let net = DenseNet::mlp(&[3, 2]);
        assert!(matches!(
            net.forward(&[1.0]),
            Err(Error::Dimension { expected: 3, got: 1 })
        ));
        let bad = vec![
            LayerShape {
                inputs: 2,
                outputs: 3,
                activation: Activation::Relu,
            },
            LayerShape {
                inputs: 4,
                outputs: 1,
                activation: Activation::Identity,
            },
        ];
        assert!(DenseNet::from_layers(bad).is_err());
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&[0.0, 0.0, 0.0]);
        for x in p {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = softmax(&[2f64.ln(), 0.0, 0.0]);
        assert!((p[0] - 0.5).abs() < 1e-15);
        assert!((p[1] - 0.25).abs() < 1e-15);
        let p = softmax(&[1000.0, 0.0]);
        assert_eq!(p[0], 1.0);
        assert!(p[1] >= 0.0 && p[1] < 1e-300);
    }

    #[test]
    fn cross_entropy_examples() {
        let (l, _) = cross_entropy(&[0.0, 1.0, 0.0], 1);
        assert_eq!(l, 0.0);
        let uniform = vec![1.0 / 9.0; 9];
        let (l, _) = cross_entropy(&uniform, 4);
        assert!((l - 9f64.ln()).abs() < 1e-12);
        let (l, _) = cross_entropy(&[1.0, 0.0], 1);
        assert!((l + PROB_FLOOR.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_logit_gradient_matches_finite_differences() {
        let logits = [0.3, -1.2, 2.0, 0.0, 0.7, -0.4, 1.1, -2.2, 0.5];
        let (_, _, grad) = cross_entropy_logits(&logits, 3);
        let r = grad_check(|z| cross_entropy_logits(z, 3).0, &logits, &grad);
        assert!(r.max_rel_err < 1e-4, "{r:?}");
        let probs = softmax(&logits);
        let (_, gp) = cross_entropy(&probs, 3);
        let via_probs = softmax_backward(&probs, &gp);
        for (a, b) in via_probs.iter().zip(&grad) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        for g in [3.0, -0.002, 1e4] {
            let mut s = AdamState::new(1, AdamConfig::default());
            let mut p = [1.0];
            s.update(&mut p, &[g], 0.01);
            let delta = p[0] - 1.0;
            let expected = -0.01 * g / (g.abs() + 1e-8);
            assert!((delta - expected).abs() < 1e-15, "g={g} delta={delta}");
            assert!((delta.abs() - 0.01).abs() < 1e-7);
        }
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut s = AdamState::new(3, AdamConfig::default());
        let mut p = [1.0, -2.0, 0.5];
        s.update(&mut p, &[0.0; 3], 0.1);
        assert_eq!(p, [1.0, -2.0, 0.5]);
    }

    #[test]
    fn adam_descends_quadratic() {
        // Independent scalar recurrence for ADAM on f(x) = x^2.
        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8, 0.1);
        let (mut x, mut m, mut v) = (1.0f64, 0.0, 0.0);
        let mut expected = Vec::new();
        for t in 1..=10 {
            let g = 2.0 * x;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            x -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
            expected.push(x);
        }
        let mut s = AdamState::new(1, AdamConfig::default());
        let mut p = [1.0];
        let mut prev = 1.0f64;
        for e in expected {
            let g = [2.0 * p[0]];
            s.update(&mut p, &g, lr);
            assert!((p[0] - e).abs() < 1e-15);
            assert!(p[0].abs() < prev.abs());
            prev = p[0];
        }
    }

    #[test]
    fn lr_schedule_steps() {
        let s = LrSchedule {
            base: 1e-3,
            milestones: vec![1000, 1600],
            factor: 0.1,
        };
        assert_eq!(s.lr_at(0), 1e-3);
        assert_eq!(s.lr_at(999), 1e-3);
        assert_eq!(s.lr_at(1000), 1e-3 * 0.1);
        assert_eq!(s.lr_at(1600), 1e-3 * 0.1f64.powi(2));
    }

    fn net_loss(net: &DenseNet, x: &[f64], label: usize) -> f64 {
        cross_entropy_logits(&net.predict(x).unwrap(), label).0
    }

    #[test]
    fn linear_layer_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = DenseNet::mlp(&[4, 3]);
        net.init_glorot(&mut rng);
        let x = [0.5, -1.0, 0.25, 2.0];
        let cache = net.forward(&x).unwrap();
        let (_, _, g) = cross_entropy_logits(cache.output(), 2);
        net.backward(&cache, &g);
        let mut probe = net.clone();
        let r = grad_check(
            |p| {
                probe.params.copy_from_slice(p);
                net_loss(&probe, &x, 2)
            },
            &net.params,
            &net.grads,
        );
        assert!(r.max_rel_err < 1e-6, "{r:?}");
    }

    #[test]
    fn deep_net_and_input_gradients_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut net = DenseNet::mlp(&[5, 8, 6, 4]);
        net.init_glorot(&mut rng);
        let x: Vec<f64> = (0..5).map(|i| (i as f64 - 2.0) * 0.7).collect();
        let cache = net.forward(&x).unwrap();
        let (_, _, g) = cross_entropy_logits(cache.output(), 1);
        let gx = net.backward(&cache, &g);
        let mut probe = net.clone();
        let r = grad_check(
            |p| {
                probe.params.copy_from_slice(p);
                net_loss(&probe, &x, 1)
            },
            &net.params,
            &net.grads,
        );
        assert!(r.max_rel_err < 1e-4, "{r:?}");
        let r = grad_check(|xi| net_loss(&net, xi, 1), &x, &gx);
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut net = DenseNet::mlp(&[3, 3]);
        net.init_glorot(&mut rng);
        let x = [1.0, -0.5, 0.3];
        let cache = net.forward(&x).unwrap();
        let (_, _, g) = cross_entropy_logits(cache.output(), 0);
        net.backward(&cache, &g);
        net.grads[1] *= 1.5;
        let mut probe = net.clone();
        let r = grad_check(
            |p| {
                probe.params.copy_from_slice(p);
                net_loss(&probe, &x, 0)
            },
            &net.params,
            &net.grads,
        );
        assert!(r.max_rel_err > 0.1);
        assert_eq!(r.worst_index, 1);
    }

    #[test]
    fn blob_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bin");
        let params = vec![1.5, -0.0, f64::MIN_POSITIVE, 1e300];
        write_param_blob(&path, &params).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 32);
        let back = read_param_blob(&path).unwrap();
        assert_eq!(
            back.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            params.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }

    proptest! {
        #[test]
        fn softmax_on_simplex_and_shift_invariant(
            logits in prop::collection::vec(-50.0f64..50.0, 1..12),
            shift in -100.0f64..100.0,
        ) {
            let p = softmax(&logits);
            prop_assert!(p.iter().all(|&x| x >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let shifted: Vec<f64> = logits.iter().map(|z| z + shift).collect();
            let q = softmax(&shifted);
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
