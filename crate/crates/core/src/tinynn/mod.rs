//! Minimal dense networks with exact reverse-mode gradients.
//!
//! Networks work on row-major batches: `rows × width` slices. A forward pass
//! records a [`MlpTape`] of post-activation values which `backward` consumes.
//! Gradients accumulate into a value of the same type as the model.

mod adam;
pub mod checkpoint;
pub mod gradcheck;
mod params;

pub use adam::Adam;
pub use params::{
    add_scaled, all_finite, fill, flatten, l2_norm, param_count, scalar_owner, set_scalar, zeros_like, Parameters,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation output.
    #[inline]
    fn grad_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

/// Dot product with four independent accumulators so the loop vectorises.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    /// `outputs × inputs`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Self { inputs, outputs, weight: vec![0.0; inputs * outputs], bias: vec![0.0; outputs], activation }
    }

    /// Uniform fan-in scaled weights, zero bias.
    pub fn init<R: Rng + ?Sized>(inputs: usize, outputs: usize, activation: Activation, rng: &mut R) -> Self {
        let gain = match activation {
            Activation::Relu => 6.0,
            _ => 3.0,
        };
        let bound = (gain / inputs.max(1) as f64).sqrt();
        let weight = (0..inputs * outputs).map(|_| rng.random_range(-bound..bound)).collect();
        Self { inputs, outputs, weight, bias: vec![0.0; outputs], activation }
    }

    fn forward_into(&self, x: &[f64], rows: usize, out: &mut Vec<f64>) {
        out.clear();
        out.resize(rows * self.outputs, 0.0);
        for r in 0..rows {
            let xr = &x[r * self.inputs..(r + 1) * self.inputs];
            let yr = &mut out[r * self.outputs..(r + 1) * self.outputs];
            for (o, y) in yr.iter_mut().enumerate() {
                let w = &self.weight[o * self.inputs..(o + 1) * self.inputs];
                *y = self.activation.apply(self.bias[o] + dot(w, xr));
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
}

/// Post-activation values of every layer; `acts[0]` is the input.
#[derive(Clone, Debug)]
pub struct MlpTape {
    pub rows: usize,
    acts: Vec<Vec<f64>>,
}

impl MlpTape {
    pub fn output(&self) -> &[f64] {
        self.acts.last().map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn input(&self) -> &[f64] {
        &self.acts[0]
    }
}

impl Mlp {
    /// Builds a network with the given layer widths; hidden layers use `hidden`,
    /// the last layer uses `output`.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], hidden: Activation, output: Activation, rng: &mut R) -> Result<Self> {
        Self::check_widths(widths)?;
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { output } else { hidden };
                Dense::init(widths[i], widths[i + 1], act, rng)
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn zeros(widths: &[usize], hidden: Activation, output: Activation) -> Result<Self> {
        Self::check_widths(widths)?;
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| Dense::zeros(widths[i], widths[i + 1], if i + 1 == n { output } else { hidden }))
            .collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(shape_err("network needs at least one layer"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.weight.len() != l.inputs * l.outputs || l.bias.len() != l.outputs {
                return Err(shape_err(format!("layer {i} tensor sizes disagree with its widths")));
            }
            if i > 0 && layers[i - 1].outputs != l.inputs {
                return Err(shape_err(format!(
                    "layer {i} expects {} inputs but layer {} produces {}",
                    l.inputs,
                    i - 1,
                    layers[i - 1].outputs
                )));
            }
        }
        Ok(Self { layers })
    }

    fn check_widths(widths: &[usize]) -> Result<()> {
        if widths.len() < 2 || widths.iter().any(|&w| w == 0) {
            return Err(shape_err(format!("invalid layer widths {widths:?}")));
        }
        Ok(())
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_width(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.input_width()).chain(self.layers.iter().map(|l| l.outputs)).collect()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.forward_batch(x, 1)
    }

    pub fn forward_batch(&self, x: &[f64], rows: usize) -> Result<Vec<f64>> {
        self.check_input(x, rows)?;
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        for l in &self.layers {
            l.forward_into(&cur, rows, &mut next);
            std::mem::swap(&mut cur, &mut next);
        }
        Ok(cur)
    }

    pub fn forward_tape(&self, x: &[f64], rows: usize) -> Result<MlpTape> {
        self.check_input(x, rows)?;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        for l in &self.layers {
            let mut out = Vec::new();
            l.forward_into(acts.last().unwrap(), rows, &mut out);
            acts.push(out);
        }
        Ok(MlpTape { rows, acts })
    }

    fn check_input(&self, x: &[f64], rows: usize) -> Result<()> {
        if x.len() != rows * self.input_width() {
            return Err(shape_err(format!(
                "network input has {} values, expected {rows} rows × {}",
                x.len(),
                self.input_width()
            )));
        }
        Ok(())
    }

    /// Reverse pass. Accumulates parameter gradients into `grads` and returns the
    /// gradient with respect to the input batch.
    pub fn backward(&self, tape: &MlpTape, upstream: &[f64], grads: &mut Mlp) -> Result<Vec<f64>> {
        self.backward_impl(tape, upstream, Some(grads), true)
    }

    /// Like [`Mlp::backward`] but skips computing the input gradient.
    pub fn backward_params(&self, tape: &MlpTape, upstream: &[f64], grads: &mut Mlp) -> Result<()> {
        self.backward_impl(tape, upstream, Some(grads), false).map(|_| ())
    }

    /// Input gradient only, for differentiating through a frozen network.
    pub fn backward_input(&self, tape: &MlpTape, upstream: &[f64]) -> Result<Vec<f64>> {
        self.backward_impl(tape, upstream, None, true)
    }

    fn backward_impl(
        &self,
        tape: &MlpTape,
        upstream: &[f64],
        mut grads: Option<&mut Mlp>,
        need_input: bool,
    ) -> Result<Vec<f64>> {
        let rows = tape.rows;
        if upstream.len() != rows * self.output_width() {
            return Err(shape_err(format!(
                "upstream gradient has {} values, expected {rows} × {}",
                upstream.len(),
                self.output_width()
            )));
        }
        if grads.as_ref().is_some_and(|g| g.layers.len() != self.layers.len())
            || tape.acts.len() != self.layers.len() + 1
        {
            return Err(shape_err("gradient container or tape does not match network"));
        }
        let mut delta = upstream.to_vec();
        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            let y = &tape.acts[li + 1];
            let x = &tape.acts[li];
            let (ni, no) = (layer.inputs, layer.outputs);
            for (d, &yv) in delta.iter_mut().zip(y) {
                *d *= layer.activation.grad_from_output(yv);
            }
            if let Some(g) = grads.as_deref_mut() {
                let g = &mut g.layers[li];
                for r in 0..rows {
                    let dr = &delta[r * no..(r + 1) * no];
                    let xr = &x[r * ni..(r + 1) * ni];
                    for (o, &dv) in dr.iter().enumerate() {
                        if dv == 0.0 {
                            continue;
                        }
                        g.bias[o] += dv;
                        let gw = &mut g.weight[o * ni..(o + 1) * ni];
                        for (gwi, xi) in gw.iter_mut().zip(xr) {
                            *gwi += dv * xi;
                        }
                    }
                }
            }
            if li == 0 && !need_input {
                return Ok(Vec::new());
            }
            let mut dx = vec![0.0; rows * ni];
            for r in 0..rows {
                let dr = &delta[r * no..(r + 1) * no];
                let dxr = &mut dx[r * ni..(r + 1) * ni];
                for (o, &dv) in dr.iter().enumerate() {
                    if dv == 0.0 {
                        continue;
                    }
                    let w = &layer.weight[o * ni..(o + 1) * ni];
                    for (dxi, wi) in dxr.iter_mut().zip(w) {
                        *dxi += dv * wi;
                    }
                }
            }
            delta = dx;
        }
        Ok(delta)
    }
}

impl Parameters for Mlp {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        for (i, l) in self.layers.iter().enumerate() {
            f(&format!("layers.{i}.weight"), &[l.outputs, l.inputs], &l.weight);
            f(&format!("layers.{i}.bias"), &[l.outputs], &l.bias);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            f(&format!("layers.{i}.weight"), &mut l.weight);
            f(&format!("layers.{i}.bias"), &mut l.bias);
        }
    }
}

/// Visits `inner` with every tensor name prefixed by `prefix.`.
pub fn visit_prefixed(prefix: &str, inner: &dyn Parameters, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
    inner.visit(&mut |name, dims, data| f(&format!("{prefix}.{name}"), dims, data));
}

pub fn visit_prefixed_mut(prefix: &str, inner: &mut dyn Parameters, f: &mut dyn FnMut(&str, &mut [f64])) {
    inner.visit_mut(&mut |name, data| f(&format!("{prefix}.{name}"), data));
}

/// Max-subtracted softmax.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Pulls a gradient on softmax outputs back onto its logits.
pub fn softmax_backward(probs: &[f64], grad_probs: &[f64]) -> Vec<f64> {
    let dot: f64 = probs.iter().zip(grad_probs).map(|(p, g)| p * g).sum();
    probs.iter().zip(grad_probs).map(|(p, g)| p * (g - dot)).collect()
}

/// Mean squared error and its gradient with respect to `pred`.
pub fn mse(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(shape_err(format!("mse over {} vs {} values", pred.len(), target.len())));
    }
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = p - t;
            loss += d * d;
            2.0 * d / n
        })
        .collect();
    Ok((loss / n, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_network_outputs_zero() {
        let net = Mlp::zeros(&[3, 4, 2], Activation::Relu, Activation::Identity).unwrap();
        assert_eq!(net.forward(&[1.0, -2.0, 3.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let mut l = Dense::zeros(3, 3, Activation::Identity);
        for i in 0..3 {
            l.weight[i * 3 + i] = 1.0;
        }
        let net = Mlp::from_layers(vec![l]).unwrap();
        assert_eq!(net.forward(&[0.5, -1.5, 2.0]).unwrap(), vec![0.5, -1.5, 2.0]);
    }

    #[test]
    fn hand_set_relu_net() {
        // 2-3-1: h = relu(W1 x + b1), y = w2·h + b2
        let l1 = Dense {
            inputs: 2,
            outputs: 3,
            weight: vec![1.0, 2.0, -1.0, 1.0, 0.5, -0.5],
            bias: vec![0.0, -1.0, 0.75],
            activation: Activation::Relu,
        };
        let l2 = Dense {
            inputs: 3,
            outputs: 1,
            weight: vec![1.0, -2.0, 4.0],
            bias: vec![0.5],
            activation: Activation::Identity,
        };
        let net = Mlp::from_layers(vec![l1, l2]).unwrap();
        // x = (1, 2): pre = (5, 0, 0.25) -> h = (5, 0, 0.25); y = 5 + 0 + 1 + 0.5
        assert_eq!(net.forward(&[1.0, 2.0]).unwrap(), vec![6.5]);
    }

    #[test]
    fn width_mismatch_is_shape_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Mlp::new(&[3, 2], Activation::Tanh, Activation::Identity, &mut rng).unwrap();
        assert!(net.forward(&[1.0, 2.0]).is_err());
        assert!(Mlp::new(&[3], Activation::Tanh, Activation::Identity, &mut rng).is_err());
        let bad = vec![Dense::zeros(2, 3, Activation::Relu), Dense::zeros(4, 1, Activation::Relu)];
        assert!(Mlp::from_layers(bad).is_err());
    }

    #[test]
    fn linear_mse_gradient_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Mlp::new(&[3, 2], Activation::Identity, Activation::Identity, &mut rng).unwrap();
        let x = [0.3, -0.7, 1.1];
        let y = [0.2, -0.4];
        let tape = net.forward_tape(&x, 1).unwrap();
        // sum-of-squares loss so the gradient is exactly 2(Wx+b-y)x^T
        let pred = tape.output().to_vec();
        let up: Vec<f64> = pred.iter().zip(&y).map(|(p, t)| 2.0 * (p - t)).collect();
        let mut g = zeros_like(&net);
        net.backward(&tape, &up, &mut g).unwrap();
        let l = &g.layers()[0];
        for o in 0..2 {
            for i in 0..3 {
                let want = 2.0 * (pred[o] - y[o]) * x[i];
                assert!((l.weight[o * 3 + i] - want).abs() < 1e-14);
            }
            assert!((l.bias[o] - 2.0 * (pred[o] - y[o])).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = Mlp::new(&[4, 8, 2], Activation::Tanh, Activation::Identity, &mut rng).unwrap();
        let tape = net.forward_tape(&[0.1, 0.2, 0.3, 0.4], 1).unwrap();
        let mut g = zeros_like(&net);
        let dx = net.backward(&tape, &[0.0, 0.0], &mut g).unwrap();
        assert!(flatten(&g).iter().all(|&v| v == 0.0));
        assert!(dx.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_cases() {
        let p = softmax(&[0.0, 0.0, 0.0]);
        assert!(p.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        let p = softmax(&[1000.0, 0.0]);
        assert_eq!(p[0], 1.0);
        assert!(p[1] >= 0.0 && p[1] < 1e-300);
        let p = softmax(&[1.0, 2.0, 3.0]);
        for (a, b) in p.iter().zip([0.09003, 0.24473, 0.66524]) {
            assert!((a - b).abs() < 1e-5);
        }
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn adam_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = Mlp::new(&[2, 2], Activation::Identity, Activation::Identity, &mut rng).unwrap();
        let before = net.clone();
        let mut opt = Adam::new(0.1);
        opt.step(&mut net, &zeros_like(&before)).unwrap();
        assert_eq!(net, before);

        let mut ones = zeros_like(&before);
        fill(&mut ones, 1.0);
        let mut opt = Adam::new(0.1);
        opt.step(&mut net, &ones).unwrap();
        let want = -0.1 / (1.0 + 1e-8);
        for (a, b) in flatten(&net).iter().zip(flatten(&before)) {
            assert!((a - b - want).abs() < 1e-15);
        }

        let mut bad = ones.clone();
        set_scalar(&mut bad, 0, f64::NAN);
        assert!(opt.step(&mut net, &bad).is_err());
    }

    #[test]
    fn adam_constant_gradient_decreases_monotonically() {
        let mut p = Mlp::zeros(&[1, 1], Activation::Identity, Activation::Identity).unwrap();
        let mut g = p.clone();
        fill(&mut g, 1.0);
        let mut opt = Adam::new(0.01);
        let mut last = flatten(&p)[0];
        for _ in 0..100 {
            opt.step(&mut p, &g).unwrap();
            let now = flatten(&p)[0];
            assert!(now < last);
            last = now;
        }
        assert_eq!(opt.steps(), 100);
    }

    #[test]
    fn mse_values() {
        let (l, g) = mse(&[1.0, 3.0], &[0.0, 1.0]).unwrap();
        assert_eq!(l, 2.5);
        assert_eq!(g, vec![1.0, 2.0]);
        assert!(mse(&[1.0], &[1.0, 2.0]).is_err());
    }
}
