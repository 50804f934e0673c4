//! A small reverse-mode automatic differentiation tape.
//!
//! Every forward pass records its operations on a [`Graph`]; calling
//! [`Graph::backward`] walks the tape in reverse and returns the gradient of
//! a scalar with respect to every node that needs one. Graphs are built per
//! image and discarded after the step, so nodes own their values.
//!
//! Summation orders are fixed, which makes a forward/backward pass bitwise
//! reproducible.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{matmul, matmul_nt, matmul_tn, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    DivScalar(Var, Var),
    Exp(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Relu(Var),
    QuickGelu(Var),
    Sigmoid(Var),
    Clamp(Var, f64, f64),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    SoftmaxRows(Var),
    Reshape(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    MeanRows(Var),
    Mean(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        cols: Vec<f64>,
        geom: ConvGeom,
    },
    ResizeBilinear {
        x: Var,
        rows: Vec<Tap>,
        cols: Vec<Tap>,
    },
    Bce {
        p: Var,
        target: Vec<f64>,
        weight: Vec<f64>,
        eps: f64,
    },
    Dice {
        p: Var,
        target: Vec<f64>,
        weight: Vec<f64>,
        smooth: f64,
    },
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

/// One output coordinate of a linear interpolation: two source indices and weights.
#[derive(Clone, Copy, Debug)]
struct Tap {
    i0: usize,
    i1: usize,
    w0: f64,
    w1: f64,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Operation tape. Borrowing a [`ParamStore`] lets modules pull their
/// parameters in lazily with [`Graph::param`].
#[derive(Debug)]
pub struct Graph<'p> {
    nodes: Vec<Node>,
    store: Option<&'p ParamStore>,
    bound: Vec<Option<Var>>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

impl Default for Graph<'static> {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph<'static> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            store: None,
            bound: Vec::new(),
        }
    }
}

impl<'p> Graph<'p> {
    pub fn with_params(store: &'p ParamStore) -> Self {
        Graph {
            nodes: Vec::new(),
            store: Some(store),
            bound: vec![None; store.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds (once) and returns the node holding parameter `id`.
    ///
    /// Panics if the graph was created without a parameter store.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.index()] {
            return v;
        }
        let store = self.store.expect("graph has no parameter store bound");
        let v = self.input(store.get(id).clone());
        self.bound[id.index()] = Some(v);
        v
    }

    /// Gradients of every bound parameter, indexed by [`ParamId`].
    pub fn param_grads(&self, grads: &Grads) -> Vec<Option<Tensor>> {
        self.bound
            .iter()
            .map(|b| b.and_then(|v| grads.get(v).cloned()))
            .collect()
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::ShapeMismatch(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn dims2(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let s = self.value(v).shape();
        if s.len() != 2 {
            return Err(Error::ShapeMismatch(format!("{what}: expected 2-D, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(a).map(f);
        let n = self.needs(a);
        self.push(v, op, n)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let v = Tensor::new(self.value(a).shape(), data)?;
        let n = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Add(a, b), n))
    }

    /// `a[m,n] + row[n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "add_row")?;
        if self.value(row).numel() != n {
            return Err(Error::dim("add_row broadcast", n, self.value(row).numel()));
        }
        let r = self.value(row).data();
        let mut data = self.value(a).data().to_vec();
        for i in 0..m {
            for (x, y) in data[i * n..(i + 1) * n].iter_mut().zip(r) {
                *x += y;
            }
        }
        let v = Tensor::new(&[m, n], data)?;
        let nd = self.needs(a) || self.needs(row);
        Ok(self.push(v, Op::AddRow(a, row), nd))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let v = Tensor::new(self.value(a).shape(), data)?;
        let n = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Mul(a, b), n))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, |x| x * k, Op::Scale(a, k))
    }

    /// Adds a constant tensor (e.g. an attention mask); no gradient flows into it.
    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        if self.value(a).shape() != c.shape() {
            return Err(Error::ShapeMismatch(format!(
                "add_const: {:?} vs {:?}",
                self.value(a).shape(),
                c.shape()
            )));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(c.data())
            .map(|(x, y)| x + y)
            .collect();
        let v = Tensor::new(c.shape(), data)?;
        let n = self.needs(a);
        Ok(self.push(v, Op::AddConst(a), n))
    }

    /// `a / s` for a single-element `s`.
    pub fn div_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::dim("div_scalar divisor", 1, self.value(s).numel()));
        }
        let d = self.value(s).data()[0];
        let v = self.value(a).map(|x| x / d);
        let n = self.needs(a) || self.needs(s);
        Ok(self.push(v, Op::DivScalar(a, s), n))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul lhs")?;
        let (k2, n) = self.dims2(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::dim("matmul inner dimension", k, k2));
        }
        let data = matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let v = Tensor::new(&[m, n], data)?;
        let nd = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::MatMul(a, b), nd))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.dims2(a, "transpose")?;
        let v = self.value(a).transpose2();
        let n = self.needs(a);
        Ok(self.push(v, Op::Transpose(a), n))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// `x · sigmoid(1.702 x)`, the GELU approximation used by CLIP.
    pub fn quick_gelu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * sigmoid(1.702 * x), Op::QuickGelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    /// Layer normalization over the last axis of a 2-D tensor.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims2(x, "layer_norm")?;
        for p in [gamma, beta] {
            if self.value(p).numel() != n {
                return Err(Error::dim("layer_norm affine", n, self.value(p).numel()));
            }
        }
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xs[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite layer norm output".into()));
        }
        let v = Tensor::new(&[m, n], out)?;
        let nd = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            nd,
        ))
    }

    /// Softmax along each row.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "softmax")?;
        let mut data = self.value(a).data().to_vec();
        for i in 0..m {
            let row = &mut data[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let v = Tensor::new(&[m, n], data)?;
        let nd = self.needs(a);
        Ok(self.push(v, Op::SoftmaxRows(a), nd))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        let n = self.needs(a);
        Ok(self.push(v, Op::Reshape(a), n))
    }

    /// Rows `start..start + len` of a 2-D tensor.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(a, "slice_rows")?;
        if start + len > m {
            return Err(Error::dim("slice_rows end", m, start + len));
        }
        let data = self.value(a).data()[start * n..(start + len) * n].to_vec();
        let v = Tensor::new(&[len, n], data)?;
        let nd = self.needs(a);
        Ok(self.push(v, Op::SliceRows(a, start), nd))
    }

    /// Columns `start..start + len` of a 2-D tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(a, "slice_cols")?;
        if start + len > n {
            return Err(Error::dim("slice_cols end", n, start + len));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let v = Tensor::new(&[m, len], data)?;
        let nd = self.needs(a);
        Ok(self.push(v, Op::SliceCols(a, start), nd))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let (_, n) = self.dims2(parts[0], "concat_rows")?;
        let mut m = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (pm, pn) = self.dims2(p, "concat_rows")?;
            if pn != n {
                return Err(Error::dim("concat_rows columns", n, pn));
            }
            m += pm;
            data.extend_from_slice(self.value(p).data());
        }
        let v = Tensor::new(&[m, n], data)?;
        let nd = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(v, Op::ConcatRows(parts.to_vec()), nd))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let (m, _) = self.dims2(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.dims2(p, "concat_cols")?;
            if pm != m {
                return Err(Error::dim("concat_cols rows", m, pm));
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let v = Tensor::new(&[m, n], data)?;
        let nd = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), nd))
    }

    /// Column means of a 2-D tensor as a `[1, n]` row.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "mean_rows")?;
        let src = self.value(a).data();
        let mut out = vec![0.0; n];
        for i in 0..m {
            for (o, x) in out.iter_mut().zip(&src[i * n..(i + 1) * n]) {
                *o += x;
            }
        }
        for o in &mut out {
            *o /= m as f64;
        }
        let v = Tensor::new(&[1, n], out)?;
        let nd = self.needs(a);
        Ok(self.push(v, Op::MeanRows(a), nd))
    }

    /// Mean of all elements as a single-element tensor.
    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = t.sum() / t.numel() as f64;
        let n = self.needs(a);
        self.push(Tensor::scalar(m), Op::Mean(a), n)
    }

    /// 2-D convolution of `x[cin, h, w]` with `w[cout, cin, k, k]` plus bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 3 || ws.len() != 4 || ws[2] != ws[3] {
            return Err(Error::ShapeMismatch(format!("conv2d: input {xs:?}, kernel {ws:?}")));
        }
        let (cin, h, wd) = (xs[0], xs[1], xs[2]);
        let (cout, k) = (ws[0], ws[2]);
        if ws[1] != cin {
            return Err(Error::dim("conv2d input channels", ws[1], cin));
        }
        if self.value(b).numel() != cout {
            return Err(Error::dim("conv2d bias", cout, self.value(b).numel()));
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::InvalidInput(format!(
                "conv2d input {h}x{wd} smaller than kernel {k}"
            )));
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let geom = ConvGeom {
            cin,
            h,
            w: wd,
            k,
            stride,
            pad,
            ho,
            wo,
        };
        let cols = im2col(self.value(x).data(), &geom);
        let mut out = matmul(self.value(w).data(), &cols, cout, cin * k * k, ho * wo);
        let bias = self.value(b).data();
        for (c, &bv) in bias.iter().enumerate() {
            for o in &mut out[c * ho * wo..(c + 1) * ho * wo] {
                *o += bv;
            }
        }
        let v = Tensor::new(&[cout, ho, wo], out)?;
        let nd = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(v, Op::Conv2d { x, w, b, cols, geom }, nd))
    }

    /// Bilinear resize of `x[c, h, w]` to `[c, ho, wo]` with half-pixel
    /// centers (`align_corners = false`).
    pub fn resize_bilinear(&mut self, x: Var, ho: usize, wo: usize) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 3 || ho == 0 || wo == 0 {
            return Err(Error::ShapeMismatch(format!("resize_bilinear: input {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let rows = taps(h, ho);
        let cols = taps(w, wo);
        let src = self.value(x).data();
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            let plane = &src[ch * h * w..(ch + 1) * h * w];
            for (oy, ry) in rows.iter().enumerate() {
                for (ox, rx) in cols.iter().enumerate() {
                    let v = ry.w0 * (rx.w0 * plane[ry.i0 * w + rx.i0] + rx.w1 * plane[ry.i0 * w + rx.i1])
                        + ry.w1 * (rx.w0 * plane[ry.i1 * w + rx.i0] + rx.w1 * plane[ry.i1 * w + rx.i1]);
                    out[ch * ho * wo + oy * wo + ox] = v;
                }
            }
        }
        let v = Tensor::new(&[c, ho, wo], out)?;
        let nd = self.needs(x);
        Ok(self.push(v, Op::ResizeBilinear { x, rows, cols }, nd))
    }

    /// Weighted mean binary cross-entropy of probabilities `p` against `target`.
    ///
    /// Probabilities are clamped into `[eps, 1 - eps]`; elements with zero
    /// weight are excluded. When every weight is zero the loss is zero.
    pub fn bce(&mut self, p: Var, target: &[f64], weight: &[f64], eps: f64) -> Result<Var> {
        let n = self.value(p).numel();
        if target.len() != n || weight.len() != n {
            return Err(Error::dim("bce target", n, target.len().min(weight.len())));
        }
        let loss = bce_value(self.value(p).data(), target, weight, eps);
        let nd = self.needs(p);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                p,
                target: target.to_vec(),
                weight: weight.to_vec(),
                eps,
            },
            nd,
        ))
    }

    /// Weighted soft Dice loss `1 - (2 Σ w p y + s) / (Σ w p + Σ w y + s)`.
    pub fn dice(&mut self, p: Var, target: &[f64], weight: &[f64], smooth: f64) -> Result<Var> {
        let n = self.value(p).numel();
        if target.len() != n || weight.len() != n {
            return Err(Error::dim("dice target", n, target.len().min(weight.len())));
        }
        let loss = dice_value(self.value(p).data(), target, weight, smooth);
        let nd = self.needs(p);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Dice {
                p,
                target: target.to_vec(),
                weight: weight.to_vec(),
                smooth,
            },
            nd,
        ))
    }

    /// Reverse pass from a single-element node.
    pub fn backward(&self, root: Var) -> Result<Grads> {
        if self.value(root).numel() != 1 {
            return Err(Error::dim("backward root", 1, self.value(root).numel()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));
        for idx in (0..=root.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(node, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        Ok(Grads { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Vec<f64>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => {
                for (a, b) in t.data_mut().iter_mut().zip(&g) {
                    *a += b;
                }
            }
            slot @ None => {
                *slot = Some(Tensor::new(self.value(v).shape(), g).expect("gradient shape"));
            }
        }
    }

    fn backprop_node(&self, node: &Node, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        let go = gout.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, go.to_vec());
                self.acc(grads, *b, go.to_vec());
            }
            Op::AddRow(a, row) => {
                self.acc(grads, *a, go.to_vec());
                if self.needs(*row) {
                    let n = self.value(*row).numel();
                    let mut g = vec![0.0; n];
                    for chunk in go.chunks(n) {
                        for (gi, c) in g.iter_mut().zip(chunk) {
                            *gi += c;
                        }
                    }
                    self.acc(grads, *row, g);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    self.acc(grads, *a, go.iter().zip(bv).map(|(g, y)| g * y).collect());
                }
                if self.needs(*b) {
                    self.acc(grads, *b, go.iter().zip(av).map(|(g, x)| g * x).collect());
                }
            }
            Op::Scale(a, k) => self.acc(grads, *a, go.iter().map(|g| g * k).collect()),
            Op::AddConst(a) => self.acc(grads, *a, go.to_vec()),
            Op::DivScalar(a, s) => {
                let d = self.value(*s).data()[0];
                if self.needs(*a) {
                    self.acc(grads, *a, go.iter().map(|g| g / d).collect());
                }
                if self.needs(*s) {
                    let av = self.value(*a).data();
                    let gs: f64 = go.iter().zip(av).map(|(g, x)| -g * x / (d * d)).sum();
                    self.acc(grads, *s, vec![gs]);
                }
            }
            Op::Exp(a) => {
                let y = node.value.data();
                self.acc(grads, *a, go.iter().zip(y).map(|(g, y)| g * y).collect());
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2();
                let (_, n) = self.value(*b).dims2();
                if self.needs(*a) {
                    self.acc(grads, *a, matmul_nt(go, self.value(*b).data(), m, n, k));
                }
                if self.needs(*b) {
                    self.acc(grads, *b, matmul_tn(self.value(*a).data(), go, m, k, n));
                }
            }
            Op::Transpose(a) => {
                let g = gout.transpose2();
                self.acc(grads, *a, g.into_data());
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                self.acc(
                    grads,
                    *a,
                    go.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect(),
                );
            }
            Op::QuickGelu(a) => {
                let x = self.value(*a).data();
                self.acc(
                    grads,
                    *a,
                    go.iter()
                        .zip(x)
                        .map(|(g, &x)| {
                            let s = sigmoid(1.702 * x);
                            g * (s + 1.702 * x * s * (1.0 - s))
                        })
                        .collect(),
                );
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                self.acc(grads, *a, go.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect());
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a).data();
                self.acc(
                    grads,
                    *a,
                    go.iter()
                        .zip(x)
                        .map(|(g, &x)| if x > *lo && x < *hi { *g } else { 0.0 })
                        .collect(),
                );
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (m, n) = node.value.dims2();
                let gv = self.value(*gamma).data();
                if self.needs(*x) {
                    let mut dx = vec![0.0; m * n];
                    for i in 0..m {
                        let gr = &go[i * n..(i + 1) * n];
                        let xh = &xhat[i * n..(i + 1) * n];
                        let dxh: Vec<f64> = gr.iter().zip(gv).map(|(g, w)| g * w).collect();
                        let mean_d = dxh.iter().sum::<f64>() / n as f64;
                        let mean_dx = dxh.iter().zip(xh).map(|(d, h)| d * h).sum::<f64>() / n as f64;
                        for j in 0..n {
                            dx[i * n + j] = rstd[i] * (dxh[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                    self.acc(grads, *x, dx);
                }
                if self.needs(*gamma) {
                    let mut dg = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            dg[j] += go[i * n + j] * xhat[i * n + j];
                        }
                    }
                    self.acc(grads, *gamma, dg);
                }
                if self.needs(*beta) {
                    let mut db = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            db[j] += go[i * n + j];
                        }
                    }
                    self.acc(grads, *beta, db);
                }
            }
            Op::SoftmaxRows(a) => {
                let (m, n) = node.value.dims2();
                let y = node.value.data();
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    let yr = &y[i * n..(i + 1) * n];
                    let gr = &go[i * n..(i + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..n {
                        dx[i * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.acc(grads, *a, dx);
            }
            Op::Reshape(a) => self.acc(grads, *a, go.to_vec()),
            Op::SliceRows(a, start) => {
                let (m, n) = self.value(*a).dims2();
                let mut g = vec![0.0; m * n];
                g[start * n..start * n + go.len()].copy_from_slice(go);
                self.acc(grads, *a, g);
            }
            Op::SliceCols(a, start) => {
                let (m, n) = self.value(*a).dims2();
                let (_, len) = node.value.dims2();
                let mut g = vec![0.0; m * n];
                for i in 0..m {
                    g[i * n + start..i * n + start + len].copy_from_slice(&go[i * len..(i + 1) * len]);
                }
                self.acc(grads, *a, g);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    self.acc(grads, p, go[off..off + len].to_vec());
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (m, n) = node.value.dims2();
                let mut off = 0;
                for &p in parts {
                    let (_, w) = self.value(p).dims2();
                    if self.needs(p) {
                        let mut g = Vec::with_capacity(m * w);
                        for i in 0..m {
                            g.extend_from_slice(&go[i * n + off..i * n + off + w]);
                        }
                        self.acc(grads, p, g);
                    }
                    off += w;
                }
            }
            Op::MeanRows(a) => {
                let (m, n) = self.value(*a).dims2();
                let mut g = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        g[i * n + j] = go[j] / m as f64;
                    }
                }
                self.acc(grads, *a, g);
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                self.acc(grads, *a, vec![go[0] / n as f64; n]);
            }
            Op::Conv2d { x, w, b, cols, geom } => {
                let cout = self.value(*w).shape()[0];
                let kk = geom.cin * geom.k * geom.k;
                let hw = geom.ho * geom.wo;
                if self.needs(*w) {
                    self.acc(grads, *w, matmul_nt(go, cols, cout, hw, kk));
                }
                if self.needs(*b) {
                    let db = (0..cout).map(|c| go[c * hw..(c + 1) * hw].iter().sum()).collect();
                    self.acc(grads, *b, db);
                }
                if self.needs(*x) {
                    let dcols = matmul_tn(self.value(*w).data(), go, cout, kk, hw);
                    self.acc(grads, *x, col2im(&dcols, geom));
                }
            }
            Op::ResizeBilinear { x, rows, cols } => {
                let s = self.value(*x).shape();
                let (c, h, w) = (s[0], s[1], s[2]);
                let (ho, wo) = (rows.len(), cols.len());
                let mut g = vec![0.0; c * h * w];
                for ch in 0..c {
                    let plane = &mut g[ch * h * w..(ch + 1) * h * w];
                    for (oy, ry) in rows.iter().enumerate() {
                        for (ox, rx) in cols.iter().enumerate() {
                            let d = go[ch * ho * wo + oy * wo + ox];
                            plane[ry.i0 * w + rx.i0] += d * ry.w0 * rx.w0;
                            plane[ry.i0 * w + rx.i1] += d * ry.w0 * rx.w1;
                            plane[ry.i1 * w + rx.i0] += d * ry.w1 * rx.w0;
                            plane[ry.i1 * w + rx.i1] += d * ry.w1 * rx.w1;
                        }
                    }
                }
                self.acc(grads, *x, g);
            }
            Op::Bce {
                p,
                target,
                weight,
                eps,
            } => {
                let pv = self.value(*p).data();
                let denom: f64 = weight.iter().sum();
                let g = if denom > 0.0 {
                    pv.iter()
                        .zip(target)
                        .zip(weight)
                        .map(|((&p, &y), &w)| {
                            if w == 0.0 || p <= *eps || p >= 1.0 - eps {
                                0.0
                            } else {
                                go[0] * w * (-y / p + (1.0 - y) / (1.0 - p)) / denom
                            }
                        })
                        .collect()
                } else {
                    vec![0.0; pv.len()]
                };
                self.acc(grads, *p, g);
            }
            Op::Dice {
                p,
                target,
                weight,
                smooth,
            } => {
                let pv = self.value(*p).data();
                let (inter, total) = dice_sums(pv, target, weight);
                let num = 2.0 * inter + smooth;
                let den = total + smooth;
                let g = target
                    .iter()
                    .zip(weight)
                    .map(|(&y, &w)| -go[0] * (2.0 * w * y * den - num * w) / (den * den))
                    .collect();
                self.acc(grads, *p, g);
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Weighted mean clamped binary cross-entropy.
pub fn bce_value(p: &[f64], target: &[f64], weight: &[f64], eps: f64) -> f64 {
    let denom: f64 = weight.iter().sum();
    if denom <= 0.0 {
        return 0.0;
    }
    let s: f64 = p
        .iter()
        .zip(target)
        .zip(weight)
        .map(|((&p, &y), &w)| {
            if w == 0.0 {
                return 0.0;
            }
            let pc = p.clamp(eps, 1.0 - eps);
            -w * (y * pc.ln() + (1.0 - y) * (1.0 - pc).ln())
        })
        .sum();
    s / denom
}

fn dice_sums(p: &[f64], target: &[f64], weight: &[f64]) -> (f64, f64) {
    let mut inter = 0.0;
    let mut total = 0.0;
    for ((&p, &y), &w) in p.iter().zip(target).zip(weight) {
        inter += w * p * y;
        total += w * (p + y);
    }
    (inter, total)
}

pub fn dice_value(p: &[f64], target: &[f64], weight: &[f64], smooth: f64) -> f64 {
    let (inter, total) = dice_sums(p, target, weight);
    1.0 - (2.0 * inter + smooth) / (total + smooth)
}

fn taps(n_in: usize, n_out: usize) -> Vec<Tap> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let w1 = src - i0 as f64;
            Tap {
                i0,
                i1,
                w0: 1.0 - w1,
                w1,
            }
        })
        .collect()
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let hw = g.ho * g.wo;
    let mut cols = vec![0.0; g.cin * g.k * g.k * hw];
    for c in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.wo + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let hw = g.ho * g.wo;
    let mut x = vec![0.0; g.cin * g.h * g.w];
    for c in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            x[base + ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    /// Central-difference check of `f` at `x0`, with `f` building a fresh graph.
    fn check(x0: Tensor, f: impl Fn(&mut Graph<'static>, Var) -> Var) {
        let mut g = Graph::new();
        let x = g.input(x0.clone());
        let y = f(&mut g, x);
        let grads = g.backward(y).unwrap();
        let analytic = grads.get(x).unwrap().clone();
        let h = 1e-6;
        for i in 0..x0.numel() {
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp.data_mut()[i] += delta;
                let mut g = Graph::new();
                let x = g.input(xp);
                let y = f(&mut g, x);
                g.value(y).data()[0]
            };
            let num = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[i];
            let err = (a - num).abs() / a.abs().max(num.abs()).max(1e-8);
            assert!(err < 1e-5, "element {i}: analytic {a}, numeric {num}");
        }
    }

    fn weights(n: usize) -> Tensor {
        Tensor::new(&[n], (0..n).map(|i| 0.3 + 0.17 * (i as f64 * 1.3).sin()).collect()).unwrap()
    }

    #[test]
    fn grad_layer_norm_softmax() {
        let x0 = t(&[2, 4], &[0.3, -1.2, 0.8, 0.1, 2.0, 0.5, -0.7, 1.1]);
        check(x0, |g, x| {
            let gamma = g.constant(t(&[4], &[1.0, 0.5, -0.3, 2.0]));
            let beta = g.constant(t(&[4], &[0.1, 0.0, 0.2, -0.1]));
            let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
            let s = g.softmax_rows(y).unwrap();
            let w = g.constant(t(&[2, 4], &[1.0, 2.0, 3.0, 4.0, -1.0, 0.5, 0.2, 0.9]));
            let p = g.mul(s, w).unwrap();
            g.mean(p)
        });
    }

    #[test]
    fn grad_conv_and_resize() {
        let x0 = Tensor::new(&[2, 5, 4], (0..40).map(|i| ((i * 7 % 11) as f64 - 5.0) / 4.0).collect()).unwrap();
        check(x0, |g, x| {
            let w = g.constant(weights(3 * 2 * 9).reshape(&[3, 2, 3, 3]).unwrap());
            let b = g.constant(t(&[3], &[0.1, -0.2, 0.3]));
            let y = g.conv2d(x, w, b, 2, 1).unwrap();
            let r = g.resize_bilinear(y, 7, 5).unwrap();
            let q = g.quick_gelu(r);
            let m = g.constant(weights(3 * 7 * 5).reshape(&[3, 7, 5]).unwrap());
            let p = g.mul(q, m).unwrap();
            g.mean(p)
        });
    }

    #[test]
    fn grad_conv_kernel() {
        let w0 = weights(2 * 3 * 9).reshape(&[2, 3, 3, 3]).unwrap();
        check(w0, |g, w| {
            let x = g.constant(Tensor::new(&[3, 4, 4], (0..48).map(|i| (i as f64 * 0.37).cos()).collect()).unwrap());
            let b = g.constant(t(&[2], &[0.0, 0.1]));
            let y = g.conv2d(x, w, b, 1, 1).unwrap();
            let s = g.sigmoid(y);
            g.mean(s)
        });
    }

    #[test]
    fn grad_bce_dice_and_slices() {
        let x0 = t(&[2, 3], &[0.2, -0.4, 1.3, 0.7, -2.0, 0.05]);
        check(x0, |g, x| {
            let a = g.slice_cols(x, 1, 2).unwrap();
            let b = g.slice_rows(x, 0, 1).unwrap();
            let bt = g.transpose(b).unwrap();
            let xb = g.matmul(x, bt).unwrap();
            let col = g.constant(t(&[2, 1], &[0.5, -1.5]));
            let ac = g.matmul(a, col).unwrap();
            let c = g.concat_cols(&[xb, ac]).unwrap();
            let cat = g.concat_rows(&[a, a]).unwrap();
            let p = g.sigmoid(cat);
            let y = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0];
            let w = [1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0];
            let l1 = g.bce(p, &y, &w, 1e-7).unwrap();
            let l2 = g.dice(p, &y, &w, 1.0).unwrap();
            let s = g.add(l1, l2).unwrap();
            let m = g.mean(c);
            g.add(s, m).unwrap()
        });
    }

    #[test]
    fn grad_div_scalar_exp() {
        let x0 = t(&[1], &[-0.4]);
        check(x0, |g, s| {
            let e = g.exp(s);
            let a = g.constant(t(&[1, 3], &[0.3, -0.2, 0.9]));
            let d = g.div_scalar(a, e).unwrap();
            let p = g.sigmoid(d);
            g.mean(p)
        });
    }

    #[test]
    fn bilinear_identity_when_same_size() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[1, 3, 3], (0..9).map(f64::from).collect()).unwrap());
        let y = g.resize_bilinear(x, 3, 3).unwrap();
        assert_eq!(g.value(x).data(), g.value(y).data());
    }

    #[test]
    fn softmax_singleton_is_exactly_one() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3, 1], &[-3.0, 0.0, 1e6]));
        let y = g.softmax_rows(x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 1.0));
    }
}
