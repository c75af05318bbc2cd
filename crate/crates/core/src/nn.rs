//! Small dense networks with hand-written backprop.
//!
//! Every learned component in the crate is a two-layer tanh network whose
//! parameters live in one flat `Vec<f64>`. Keeping the parameters flat makes
//! anchoring, hashing and checkpointing trivial.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Two-layer perceptron: `out = W2 · tanh(W1 · x + b1) + b2`.
///
/// Layout of `params`: `W1` as `[input][hidden]`, `b1`, `W2` as
/// `[hidden][output]`, `b2`. Row-per-input storage lets the forward pass skip
/// zero inputs, which dominate the one-hot observation features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    input: usize,
    hidden: usize,
    output: usize,
    params: Vec<f64>,
}

/// Per-sample activations kept for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct MlpTrace {
    pub hidden: Vec<f64>,
    pub output: Vec<f64>,
}

impl MlpTrace {
    pub fn new(mlp: &Mlp) -> Self {
        Self {
            hidden: vec![0.0; mlp.hidden],
            output: vec![0.0; mlp.output],
        }
    }
}

impl Mlp {
    /// Glorot-uniform weights, zero biases. `output_scale` shrinks the last
    /// layer (policy heads start near uniform).
    pub fn new<R: Rng>(input: usize, hidden: usize, output: usize, output_scale: f64, rng: &mut R) -> Self {
        let mut params = vec![0.0; Self::param_count(input, hidden, output)];
        let a1 = (6.0 / (input + hidden) as f64).sqrt();
        let a2 = (6.0 / (hidden + output) as f64).sqrt() * output_scale;
        let w1_end = input * hidden;
        for p in &mut params[..w1_end] {
            *p = rng.gen_range(-a1..a1);
        }
        let w2_start = w1_end + hidden;
        let w2_end = w2_start + hidden * output;
        for p in &mut params[w2_start..w2_end] {
            *p = rng.gen_range(-a2..a2);
        }
        Self {
            input,
            hidden,
            output,
            params,
        }
    }

    pub fn param_count(input: usize, hidden: usize, output: usize) -> usize {
        input * hidden + hidden + hidden * output + output
    }

    pub fn input_dim(&self) -> usize {
        self.input
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden
    }

    pub fn output_dim(&self) -> usize {
        self.output
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    fn offsets(&self) -> (usize, usize, usize) {
        let b1 = self.input * self.hidden;
        let w2 = b1 + self.hidden;
        let b2 = w2 + self.hidden * self.output;
        (b1, w2, b2)
    }

    pub fn forward(&self, x: &[f64], trace: &mut MlpTrace) {
        debug_assert_eq!(x.len(), self.input);
        let (b1, w2, b2) = self.offsets();
        let h = &mut trace.hidden;
        h.resize(self.hidden, 0.0);
        h.copy_from_slice(&self.params[b1..w2]);
        for (i, &xi) in x.iter().enumerate() {
            if xi != 0.0 {
                let row = &self.params[i * self.hidden..(i + 1) * self.hidden];
                axpy(xi, row, h);
            }
        }
        for v in h.iter_mut() {
            *v = v.tanh();
        }
        let y = &mut trace.output;
        y.resize(self.output, 0.0);
        y.copy_from_slice(&self.params[b2..]);
        for (j, &hj) in h.iter().enumerate() {
            let row = &self.params[w2 + j * self.output..w2 + (j + 1) * self.output];
            axpy(hj, row, y);
        }
    }

    /// Convenience forward returning the output only.
    pub fn predict(&self, x: &[f64]) -> Vec<f64> {
        let mut trace = MlpTrace::new(self);
        self.forward(x, &mut trace);
        trace.output
    }

    /// Accumulates `d loss / d params` into `grad` given `d loss / d output`.
    pub fn backward(&self, x: &[f64], trace: &MlpTrace, d_out: &[f64], grad: &mut [f64], scratch: &mut Vec<f64>) {
        debug_assert_eq!(grad.len(), self.params.len());
        debug_assert_eq!(d_out.len(), self.output);
        let (b1, w2, b2) = self.offsets();
        axpy(1.0, d_out, &mut grad[b2..]);
        scratch.resize(self.hidden, 0.0);
        let d_pre = scratch;
        for j in 0..self.hidden {
            let hj = trace.hidden[j];
            let range = w2 + j * self.output..w2 + (j + 1) * self.output;
            let dh = dot(&self.params[range.clone()], d_out);
            axpy(hj, d_out, &mut grad[range]);
            d_pre[j] = dh * (1.0 - hj * hj);
        }
        axpy(1.0, d_pre, &mut grad[b1..w2]);
        for (i, &xi) in x.iter().enumerate() {
            if xi != 0.0 {
                axpy(xi, d_pre, &mut grad[i * self.hidden..(i + 1) * self.hidden]);
            }
        }
    }
}

#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    out
}

/// Adam with optional gradient-norm clipping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(100.0),
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        if self.lr == 0.0 {
            return;
        }
        let mut scale = 1.0;
        if let Some(max) = self.clip_norm {
            let norm = dot(grad, grad).sqrt();
            if norm > max {
                scale = max / norm;
            }
        }
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t.min(i32::MAX as u64) as i32);
        let b2t = 1.0 - self.beta2.powi(self.t.min(i32::MAX as u64) as i32);
        let step = self.lr * b2t.sqrt() / b1t;
        for i in 0..params.len() {
            let g = grad[i] * scale;
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            params[i] -= step * self.m[i] / (self.v[i].sqrt() + self.eps);
        }
    }
}

/// Stable digest of parameter bits, used to prove a network was not touched.
pub fn param_hash<'a>(parts: impl IntoIterator<Item = &'a [f64]>) -> String {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        for p in part {
            hasher.update(p.to_bits().to_le_bytes());
        }
    }
    hex(&hasher.finalize())
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
