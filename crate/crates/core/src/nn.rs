//! Layers shared by the encoders, the prompt generators and the head.

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::params::{Init, ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

/// Affine map `x · W + b` with `W` stored as `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        group: ParamGroup,
        in_dim: usize,
        out_dim: usize,
        std: f64,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), group, init.normal(&[in_dim, out_dim], std));
        let bias = store.add(format!("{name}.bias"), group, Tensor::zeros(&[out_dim]));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// Fan-in scaled initialization.
    pub fn lecun(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        group: ParamGroup,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        Self::new(store, init, name, group, in_dim, out_dim, (in_dim as f64).powf(-0.5))
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }

    pub fn numel(in_dim: usize, out_dim: usize) -> usize {
        in_dim * out_dim + out_dim
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), group, Tensor::full(&[dim], 1.0)),
            beta: store.add(format!("{name}.beta"), group, Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta, LN_EPS)
    }

    pub fn numel(dim: usize) -> usize {
        2 * dim
    }
}

/// Multi-head scaled dot-product attention with input and output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

/// Output of an attention call together with the per-head weights
/// (each `[queries, keys]`).
pub struct Attended {
    pub output: Var,
    pub weights: Vec<Var>,
}

impl MultiHeadAttention {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        group: ParamGroup,
        query_dim: usize,
        key_dim: usize,
        dim: usize,
        out_dim: usize,
        heads: usize,
    ) -> Self {
        assert!(heads > 0 && dim.is_multiple_of(heads), "width {dim} not divisible by {heads} heads");
        Self {
            q: Linear::lecun(store, init, &format!("{name}.q"), group, query_dim, dim),
            k: Linear::lecun(store, init, &format!("{name}.k"), group, key_dim, dim),
            v: Linear::lecun(store, init, &format!("{name}.v"), group, key_dim, dim),
            out: Linear::lecun(store, init, &format!("{name}.out"), group, dim, out_dim),
            heads,
        }
    }

    pub fn numel(query_dim: usize, key_dim: usize, dim: usize, out_dim: usize) -> usize {
        Linear::numel(query_dim, dim) + 2 * Linear::numel(key_dim, dim) + Linear::numel(dim, out_dim)
    }

    /// Attends from `queries[nq, dq]` to `keys[nk, dk]`. `mask`, if given, is
    /// added to the `[nq, nk]` logits of every head.
    pub fn forward(&self, g: &mut Graph, queries: Var, keys: Var, mask: Option<&Tensor>) -> Result<Attended> {
        let q = self.q.forward(g, queries)?;
        let k = self.k.forward(g, keys)?;
        let v = self.v.forward(g, keys)?;
        let dim = self.q.out_dim;
        let hd = dim / self.heads;
        let scale = (hd as f64).powf(-0.5);
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * hd, hd)?;
            let kh = g.slice_cols(k, h * hd, hd)?;
            let vh = g.slice_cols(v, h * hd, hd)?;
            let kt = g.transpose(kh)?;
            let logits = g.matmul(qh, kt)?;
            let mut logits = g.scale(logits, scale);
            if let Some(m) = mask {
                logits = g.add_const(logits, m)?;
            }
            let a = g.softmax_rows(logits)?;
            outs.push(g.matmul(a, vh)?);
            weights.push(a);
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
        let output = self.out.forward(g, cat)?;
        Ok(Attended { output, weights })
    }
}

/// Two-layer MLP with QuickGELU.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, group: ParamGroup, dim: usize, hidden: usize) -> Self {
        Self {
            fc1: Linear::lecun(store, init, &format!("{name}.fc1"), group, dim, hidden),
            fc2: Linear::lecun(store, init, &format!("{name}.fc2"), group, hidden, dim),
        }
    }

    pub fn numel(dim: usize, hidden: usize) -> usize {
        Linear::numel(dim, hidden) + Linear::numel(hidden, dim)
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.quick_gelu(h);
        self.fc2.forward(g, h)
    }
}

/// Square-kernel convolution over `[c, h, w]` inputs.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        group: ParamGroup,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        gain: f64,
    ) -> Self {
        let std = gain * (2.0 / (cin * k * k) as f64).sqrt();
        Self {
            weight: store.add(format!("{name}.weight"), group, init.normal(&[cout, cin, k, k], std)),
            bias: store.add(format!("{name}.bias"), group, Tensor::zeros(&[cout])),
            stride,
            pad: k / 2,
        }
    }

    pub fn numel(cin: usize, cout: usize, k: usize) -> usize {
        cout * cin * k * k + cout
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}
