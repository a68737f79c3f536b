//! Parameterized building blocks shared by the model families.

use rand::Rng;
use remission_nn::graph::Graph;
use remission_nn::{init, ParamId, ParamStore, Scalar, Var};

/// Std of the truncated normal used for attention projections, embeddings
/// and transformer MLPs.
pub const PROJ_STD: f64 = 0.02;
/// Std for the final classifier layer; keeps initial logits near zero.
pub const HEAD_STD: f64 = 0.01;
pub const LN_EPS: f64 = 1e-5;

/// Registers parameters in a store, drawing initial values from one RNG so
/// that the build order fully determines the weights.
pub struct Builder<'a, T: Scalar, R: Rng> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut R,
}

impl<T: Scalar, R: Rng> Builder<'_, T, R> {
    pub fn conv(&mut self, name: &str, k: usize, cin: usize, cout: usize, bias: bool) -> Conv {
        let w = self.store.add(format!("{name}.w"), init::he_normal(self.rng, &[k, k, cin, cout], k * k * cin));
        let b = bias.then(|| self.store.add(format!("{name}.b"), init::zeros(&[cout])));
        Conv { w, b }
    }

    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, std: Option<f64>) -> Linear {
        let value = match std {
            Some(s) => init::trunc_normal(self.rng, &[fan_in, fan_out], s),
            None => init::he_normal(self.rng, &[fan_in, fan_out], fan_in),
        };
        let w = self.store.add(format!("{name}.w"), value);
        let b = self.store.add(format!("{name}.b"), init::zeros(&[fan_out]));
        Linear { w, b }
    }

    pub fn norm(&mut self, name: &str, dim: usize) -> Norm {
        let gamma = self.store.add(format!("{name}.gamma"), init::ones(&[dim]));
        let beta = self.store.add(format!("{name}.beta"), init::zeros(&[dim]));
        Norm { gamma, beta }
    }

    pub fn embedding(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.store.add(name, init::trunc_normal(self.rng, shape, PROJ_STD))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Conv {
    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, x: Var, stride: usize, pad: usize) -> Var {
        let w = g.param(self.w);
        let b = self.b.map(|b| g.param(b));
        g.conv2d(x, w, b, stride, pad)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let w = g.param(self.w);
        let b = g.param(self.b);
        g.linear(x, w, Some(b))
    }
}

/// Layer normalization over the trailing axis (channels for NHWC maps).
#[derive(Debug, Clone, PartialEq)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta, LN_EPS)
    }
}

/// Hidden layers with GELU followed by a linear output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<T: Scalar, R: Rng>(b: &mut Builder<T, R>, name: &str, dims: &[usize], out_std: f64) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let last = i + 2 == dims.len();
                b.linear(&format!("{name}.{i}"), w[0], w[1], Some(if last { out_std } else { PROJ_STD }))
            })
            .collect();
        Self { layers }
    }

    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, mut x: Var) -> Var {
        for (i, l) in self.layers.iter().enumerate() {
            x = l.apply(g, x);
            if i + 1 < self.layers.len() {
                x = g.gelu(x);
            }
        }
        x
    }
}

/// Squeeze-excitation channel attention: `x * sigmoid(W2 relu(W1 gap(x)))`.
#[derive(Debug, Clone, PartialEq)]
pub struct SqueezeExcite {
    pub reduce: Linear,
    pub expand: Linear,
}

impl SqueezeExcite {
    pub fn new<T: Scalar, R: Rng>(b: &mut Builder<T, R>, name: &str, channels: usize, reduction: usize) -> Self {
        let hidden = (channels / reduction).max(1);
        Self { reduce: b.linear(&format!("{name}.reduce"), channels, hidden, None), expand: b.linear(&format!("{name}.expand"), hidden, channels, Some(PROJ_STD)) }
    }

    /// Channel gates in `(0, 1)`, shape `[B, C]`.
    pub fn gates<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let s = g.mean_tokens(x);
        let h = self.reduce.apply(g, s);
        let h = g.relu(h);
        let e = self.expand.apply(g, h);
        g.sigmoid(e)
    }

    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let gate = self.gates(g, x);
        g.mul_channels(x, gate)
    }
}

/// Spatial attention: a 3x3 conv to one channel, squashed to a `(0, 1)` mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialGate {
    pub conv: Conv,
}

impl SpatialGate {
    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let m = self.conv.apply(g, x, 1, 1);
        let m = g.sigmoid(m);
        g.mul_positions(x, m)
    }
}

/// Multi-head self-attention over `[B, N, D]` tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfAttention {
    pub heads: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

impl SelfAttention {
    pub fn new<T: Scalar, R: Rng>(b: &mut Builder<T, R>, name: &str, dim: usize, heads: usize) -> Self {
        let mut proj = |p: &str| b.linear(&format!("{name}.{p}"), dim, dim, Some(PROJ_STD));
        Self { heads, q: proj("q"), k: proj("k"), v: proj("v"), out: proj("out") }
    }

    fn split_heads<T: Scalar>(&self, g: &mut Graph<T>, x: Var, b: usize, n: usize, d: usize) -> Var {
        let dh = d / self.heads;
        let x = g.reshape(x, &[b, n, self.heads, dh]);
        let x = g.permute(x, &[0, 2, 1, 3]);
        g.reshape(x, &[b * self.heads, n, dh])
    }

    /// Returns the block output and the attention weights `[B*heads, N, N]`.
    pub fn apply_with_weights<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> (Var, Var) {
        let s = g.shape(x).to_vec();
        let (b, n, d) = (s[0], s[1], s[2]);
        let dh = d / self.heads;
        let q = self.q.apply(g, x);
        let k = self.k.apply(g, x);
        let v = self.v.apply(g, x);
        let q = self.split_heads(g, q, b, n, d);
        let k = self.split_heads(g, k, b, n, d);
        let v = self.split_heads(g, v, b, n, d);
        let scores = g.batch_matmul(q, k, false, true);
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let weights = g.softmax_last(scores);
        let ctx = g.batch_matmul(weights, v, false, false);
        let ctx = g.reshape(ctx, &[b, self.heads, n, dh]);
        let ctx = g.permute(ctx, &[0, 2, 1, 3]);
        let ctx = g.reshape(ctx, &[b, n, d]);
        (self.out.apply(g, ctx), weights)
    }

    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Var {
        self.apply_with_weights(g, x).0
    }
}

/// Pre-norm transformer encoder block:
/// `h = x + attn(ln1(x))`, `out = h + mlp(ln2(h))`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerBlock {
    pub ln1: Norm,
    pub attn: SelfAttention,
    pub ln2: Norm,
    pub mlp: Mlp,
}

impl TransformerBlock {
    pub fn new<T: Scalar, R: Rng>(b: &mut Builder<T, R>, name: &str, dim: usize, heads: usize, mlp_ratio: usize) -> Self {
        Self {
            ln1: b.norm(&format!("{name}.ln1"), dim),
            attn: SelfAttention::new(b, &format!("{name}.attn"), dim, heads),
            ln2: b.norm(&format!("{name}.ln2"), dim),
            mlp: Mlp::new(b, &format!("{name}.mlp"), &[dim, dim * mlp_ratio, dim], PROJ_STD),
        }
    }

    /// Attention branch `attn(ln1(x))`, without the skip.
    pub fn attention_branch<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let y = self.ln1.apply(g, x);
        self.attn.apply(g, y)
    }

    /// MLP branch `mlp(ln2(h))`, without the skip.
    pub fn mlp_branch<T: Scalar>(&self, g: &mut Graph<T>, h: Var) -> Var {
        let y = self.ln2.apply(g, h);
        self.mlp.apply(g, y)
    }

    /// Full block. With `skip = false` both identity connections are dropped,
    /// which only exists so tests can probe the residual structure.
    pub fn apply_skip<T: Scalar>(&self, g: &mut Graph<T>, x: Var, skip: bool) -> Var {
        let a = self.attention_branch(g, x);
        let h = if skip { g.add(x, a) } else { a };
        let m = self.mlp_branch(g, h);
        if skip {
            g.add(h, m)
        } else {
            m
        }
    }

    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Var {
        self.apply_skip(g, x, true)
    }
}
