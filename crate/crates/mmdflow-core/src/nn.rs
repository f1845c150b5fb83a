//! Feed-forward feature networks with exact reverse-mode gradients.
//!
//! A [`FeatureNet`] maps `(x, t)` to a feature vector by concatenating `x`
//! with a sinusoidal embedding of the noise level `t` and applying an MLP.
//! Every pass is generic over [`Scalar`], so the same code produces plain
//! gradients (`f64`) and tangents of gradients (`Dual`) for the nested
//! differentiation needed by the gradient penalty.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use rand::Rng;

/// Per-layer activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Elu,
    Gelu,
    /// Linear output layer.
    Identity,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

impl Activation {
    #[inline]
    pub fn apply<S: Scalar>(self, z: S) -> S {
        match self {
            Activation::Relu => {
                if z.value() > 0.0 {
                    z
                } else {
                    S::zero()
                }
            }
            Activation::Elu => {
                if z.value() > 0.0 {
                    z
                } else {
                    z.exp() - S::one()
                }
            }
            Activation::Gelu => {
                // tanh form of GELU
                let c = S::from_f64(GELU_C);
                let k = S::from_f64(GELU_K);
                let u = c * (z + k * z * z * z);
                S::from_f64(0.5) * z * (S::one() + u.tanh())
            }
            Activation::Identity => z,
        }
    }

    /// Derivative at pre-activation `z` (subgradient 0 at the ReLU kink).
    #[inline]
    pub fn deriv<S: Scalar>(self, z: S) -> S {
        match self {
            Activation::Relu => {
                if z.value() > 0.0 {
                    S::one()
                } else {
                    S::zero()
                }
            }
            Activation::Elu => {
                if z.value() > 0.0 {
                    S::one()
                } else {
                    z.exp()
                }
            }
            Activation::Gelu => {
                let c = S::from_f64(GELU_C);
                let k = S::from_f64(GELU_K);
                let u = c * (z + k * z * z * z);
                let t = u.tanh();
                let du = c * (S::one() + S::from_f64(3.0 * GELU_K) * z * z);
                S::from_f64(0.5) * (S::one() + t)
                    + S::from_f64(0.5) * z * (S::one() - t * t) * du
            }
            Activation::Identity => S::one(),
        }
    }
}

/// Sinusoidal embedding of a noise level `t in [0, 1]`.
///
/// Returns `[sin(s w_0), ..., sin(s w_{h-1}), cos(s w_0), ..., cos(s w_{h-1})]`
/// with `s = 1000 t`, `w_i = 10000^(-2i/dim)` and `h = dim / 2`.
pub fn time_embedding(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim % 2 != 0 {
        return Err(Error::Config(format!(
            "time embedding dim must be even, got {dim}"
        )));
    }
    if !t.is_finite() {
        return Err(Error::Numeric(format!("non-finite noise level t={t}")));
    }
    let half = dim / 2;
    let s = 1000.0 * t;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let omega = 10000f64.powf(-2.0 * i as f64 / dim as f64);
        let (sin, cos) = (s * omega).sin_cos();
        out[i] = sin;
        out[half + i] = cos;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

/// MLP over the concatenation of a data vector and a time embedding.
///
/// Parameters are stored flat as `[W0 (row-major out x in), b0, W1, b1, ...]`
/// so the optimizer and checkpoints treat the network as one vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureNet {
    input_dim: usize,
    embed_dim: usize,
    layers: Vec<LayerSpec>,
    params: Vec<f64>,
}

/// Activations recorded by a forward pass, consumed by [`FeatureNet::backward`].
#[derive(Debug, Clone)]
pub struct Trace<S> {
    /// Concatenated `(x, embed(t))` input.
    input: Vec<S>,
    /// Pre-activations per layer.
    pre: Vec<Vec<S>>,
    /// Post-activations per layer; the last entry is the network output.
    post: Vec<Vec<S>>,
}

impl<S: Scalar> Trace<S> {
    #[inline]
    pub fn output(&self) -> &[S] {
        self.post.last().expect("net has at least one layer")
    }
}

impl FeatureNet {
    /// Build from explicit layer specs. Layer 0 must accept `input_dim + embed_dim`.
    pub fn new(input_dim: usize, embed_dim: usize, layers: Vec<LayerSpec>) -> Result<Self> {
        if embed_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "embed dim must be even, got {embed_dim}"
            )));
        }
        if layers.is_empty() {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        let mut expect = input_dim + embed_dim;
        for (i, l) in layers.iter().enumerate() {
            if l.in_dim != expect {
                return Err(Error::Shape(format!(
                    "layer {i} expects input {}, previous produces {expect}",
                    l.in_dim
                )));
            }
            expect = l.out_dim;
        }
        let n_params = layers
            .iter()
            .map(|l| l.in_dim * l.out_dim + l.out_dim)
            .sum();
        Ok(FeatureNet {
            input_dim,
            embed_dim,
            layers,
            params: vec![0.0; n_params],
        })
    }

    /// Standard MLP: hidden widths with one activation, linear output layer.
    pub fn mlp(
        input_dim: usize,
        embed_dim: usize,
        hidden: &[usize],
        out_dim: usize,
        activation: Activation,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut prev = input_dim + embed_dim;
        for &h in hidden {
            layers.push(LayerSpec {
                in_dim: prev,
                out_dim: h,
                activation,
            });
            prev = h;
        }
        layers.push(LayerSpec {
            in_dim: prev,
            out_dim,
            activation: Activation::Identity,
        });
        FeatureNet::new(input_dim, embed_dim, layers)
    }

    /// He-style fan-in uniform init for weights, zero biases.
    pub fn init<R: Rng>(&mut self, rng: &mut R) {
        let mut off = 0;
        for l in &self.layers.clone() {
            let limit = (6.0 / l.in_dim as f64).sqrt();
            for w in &mut self.params[off..off + l.in_dim * l.out_dim] {
                *w = rng.gen_range(-limit..limit);
            }
            off += l.in_dim * l.out_dim;
            for b in &mut self.params[off..off + l.out_dim] {
                *b = 0.0;
            }
            off += l.out_dim;
        }
    }

    #[inline]
    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    #[inline]
    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    #[inline]
    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim
    }

    #[inline]
    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    #[inline]
    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    #[inline]
    pub fn params(&self) -> &[f64] {
        &self.params
    }

    #[inline]
    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "expected {} params, got {}",
                self.params.len(),
                params.len()
            )));
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    fn build_input<S: Scalar>(&self, x: &[S], t: f64) -> Result<Vec<S>> {
        if x.len() != self.input_dim {
            return Err(Error::Shape(format!(
                "input has dim {}, net expects {}",
                x.len(),
                self.input_dim
            )));
        }
        let mut input = Vec::with_capacity(self.input_dim + self.embed_dim);
        input.extend_from_slice(x);
        if self.embed_dim > 0 {
            for e in time_embedding(t, self.embed_dim)? {
                input.push(S::from_f64(e));
            }
        }
        Ok(input)
    }

    /// Forward pass keeping all intermediate activations.
    pub fn forward_trace<S: Scalar>(&self, x: &[S], t: f64) -> Result<Trace<S>> {
        let input = self.build_input(x, t)?;
        let mut pre: Vec<Vec<S>> = Vec::with_capacity(self.layers.len());
        let mut post: Vec<Vec<S>> = Vec::with_capacity(self.layers.len());
        let mut off = 0;
        for (li, l) in self.layers.iter().enumerate() {
            let src: &[S] = if li == 0 { &input } else { &post[li - 1] };
            let w = &self.params[off..off + l.in_dim * l.out_dim];
            off += l.in_dim * l.out_dim;
            let b = &self.params[off..off + l.out_dim];
            off += l.out_dim;
            let mut z = Vec::with_capacity(l.out_dim);
            for o in 0..l.out_dim {
                let mut acc = S::from_f64(b[o]);
                let row = &w[o * l.in_dim..(o + 1) * l.in_dim];
                for (wi, si) in row.iter().zip(src.iter()) {
                    acc = acc + S::from_f64(*wi) * *si;
                }
                z.push(acc);
            }
            let a: Vec<S> = z.iter().map(|&v| l.activation.apply(v)).collect();
            pre.push(z);
            post.push(a);
        }
        Ok(Trace { input, pre, post })
    }

    /// Plain forward pass: `phi(x, t)`.
    pub fn forward(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        Ok(self.forward_trace::<f64>(x, t)?.output().to_vec())
    }

    /// Reverse pass from an output cotangent.
    ///
    /// Accumulates parameter gradients into `dparams` (same flat layout as
    /// [`FeatureNet::params`]) when provided, and returns the cotangent with
    /// respect to the data part `x` of the input (the time embedding is a
    /// constant of `t`, so its cotangent is dropped).
    pub fn backward<S: Scalar>(
        &self,
        trace: &Trace<S>,
        cotangent: &[S],
        mut dparams: Option<&mut [S]>,
    ) -> Result<Vec<S>> {
        if cotangent.len() != self.output_dim() {
            return Err(Error::Shape(format!(
                "cotangent has dim {}, output has {}",
                cotangent.len(),
                self.output_dim()
            )));
        }
        if let Some(ref dp) = dparams {
            if dp.len() != self.params.len() {
                return Err(Error::Shape("dparams length mismatch".into()));
            }
        }
        // Offsets of each layer's weights in the flat buffer.
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut off = 0;
        for l in &self.layers {
            offsets.push(off);
            off += l.in_dim * l.out_dim + l.out_dim;
        }

        let mut grad_out: Vec<S> = cotangent.to_vec();
        for li in (0..self.layers.len()).rev() {
            let l = &self.layers[li];
            let w_off = offsets[li];
            let b_off = w_off + l.in_dim * l.out_dim;
            let src: &[S] = if li == 0 {
                &trace.input
            } else {
                &trace.post[li - 1]
            };
            // dz = grad_out * act'(pre)
            let mut dz = Vec::with_capacity(l.out_dim);
            for o in 0..l.out_dim {
                dz.push(grad_out[o] * l.activation.deriv(trace.pre[li][o]));
            }
            if let Some(dp) = dparams.as_deref_mut() {
                for o in 0..l.out_dim {
                    let row = &mut dp[w_off + o * l.in_dim..w_off + (o + 1) * l.in_dim];
                    for (slot, si) in row.iter_mut().zip(src.iter()) {
                        *slot = *slot + dz[o] * *si;
                    }
                    dp[b_off + o] = dp[b_off + o] + dz[o];
                }
            }
            // grad wrt layer input = W^T dz
            let w = &self.params[w_off..w_off + l.in_dim * l.out_dim];
            let mut dsrc = vec![S::zero(); l.in_dim];
            for o in 0..l.out_dim {
                let row = &w[o * l.in_dim..(o + 1) * l.in_dim];
                for (ds, wi) in dsrc.iter_mut().zip(row.iter()) {
                    *ds = *ds + S::from_f64(*wi) * dz[o];
                }
            }
            grad_out = dsrc;
        }
        grad_out.truncate(self.input_dim);
        Ok(grad_out)
    }
}

/// `phi(x, t)` with input validation; see [`FeatureNet::forward`].
pub fn feature_forward(net: &FeatureNet, x: &[f64], t: f64) -> Result<Vec<f64>> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite input".into()));
    }
    net.forward(x, t)
}

/// Pullback `J^T c` where `J = d phi / d x` at `(x, t)`.
pub fn feature_grad_input(
    net: &FeatureNet,
    x: &[f64],
    t: f64,
    cotangent: &[f64],
) -> Result<Vec<f64>> {
    if x.iter().chain(cotangent.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite input".into()));
    }
    let trace = net.forward_trace::<f64>(x, t)?;
    net.backward(&trace, cotangent, None)
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction; moments mirror the flat parameter vector.
#[derive(Debug, Clone)]
pub struct AdamState {
    cfg: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(n_params: usize, cfg: AdamConfig) -> Self {
        AdamState {
            cfg,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
        }
    }

    #[inline]
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "adam state sized {}, got params {} grads {}",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - self.cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            self.m[i] = self.cfg.beta1 * self.m[i] + (1.0 - self.cfg.beta1) * grads[i];
            self.v[i] = self.cfg.beta2 * self.v[i] + (1.0 - self.cfg.beta2) * grads[i] * grads[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.cfg.lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
        }
        Ok(())
    }
}
