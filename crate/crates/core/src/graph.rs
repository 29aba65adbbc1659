//! Reverse-mode automatic differentiation over small dense matrices.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value.
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients
//! into the parameters that were registered as trainable. Parameters that
//! are not trainable enter the tape as constants, and [`Graph::detach`]
//! cuts gradient flow explicitly; nodes that depend only on constants are
//! skipped during the backward pass altogether.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::math::{sigmoid, softplus};
use crate::params::{ModelParams, ParamGrads, ParamId};
use crate::tensor::{axpy, dot, matmul_at_acc, matmul_bt_acc, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(u32);

impl Var {
    #[inline]
    fn idx(self) -> usize {
        self.0 as usize
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

struct AttnCache {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    causal: bool,
    /// Per key position; `None` means every key is valid.
    mask: Option<Vec<bool>>,
    /// `probs[(i * heads + h) * n + j]`, exactly zero where masked.
    probs: Vec<f64>,
}

struct LnCache {
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: Tensor,
    rstd: Vec<f64>,
}

enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    Sigmoid(Var),
    Concat(Vec<Var>),
    StackRows(Vec<Var>),
    Reshape(Var),
    RowOf(Var, usize),
    Gather(Var, Vec<u32>),
    MaskedMean(Var, Vec<bool>),
    Attention(Box<AttnCache>),
    LayerNorm(Box<LnCache>),
    SoftBce(Var, f64),
    Cosine(Var, Var, f64),
    SqDist(Var, Var),
    Sum(Vec<Var>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'p> {
    params: &'p ModelParams,
    trainable: Option<&'p [bool]>,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl<'p> Graph<'p> {
    /// A tape where no parameter receives gradients (inference).
    pub fn inference(params: &'p ModelParams) -> Self {
        Graph {
            params,
            trainable: None,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    /// A tape where parameter `i` is differentiable iff `trainable[i]`.
    pub fn training(params: &'p ModelParams, trainable: &'p [bool]) -> Self {
        assert_eq!(trainable.len(), params.len());
        Graph {
            params,
            trainable: Some(trainable),
            nodes: Vec::with_capacity(1024),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ModelParams {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.idx()];
        match node.op {
            Op::Param(id) => &self.params.value(ParamId(id)),
            _ => &node.value,
        }
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        debug_assert_eq!(t.shape(), (1, 1));
        t.data()[0]
    }

    #[inline]
    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.idx()].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let id = self.nodes.len();
        assert!(id < u32::MAX as usize, "tape overflow");
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(id as u32)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.needs_grad(*v))
    }

    /// A constant input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// The node for a parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let trainable = self.trainable.map(|t| t[id.0]).unwrap_or(false);
        let v = self.push(Tensor::zeros(0, 0), Op::Param(id.0), trainable);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// Stop-gradient: same value, no gradient flows back through it.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let g = self.any_grad(&[a, b]);
        self.push(value, Op::MatMul(a, b), g)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let g = self.any_grad(&[a, b]);
        self.push(value, Op::Add(a, b), g)
    }

    /// `a (n x c) + b (1 x c)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let bv = self.value(b);
        assert_eq!(bv.rows(), 1, "add_row expects a row vector");
        assert_eq!(bv.cols(), self.value(a).cols(), "add_row width mismatch");
        let mut value = self.value(a).clone();
        let bdata = bv.data();
        for r in 0..value.rows() {
            for (x, y) in value.row_mut(r).iter_mut().zip(bdata) {
                *x += *y;
            }
        }
        let g = self.any_grad(&[a, b]);
        self.push(value, Op::AddRow(a, b), g)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mul shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::from_vec(av.rows(), av.cols(), data);
        let g = self.any_grad(&[a, b]);
        self.push(value, Op::Mul(a, b), g)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        let g = self.needs_grad(a);
        self.push(value, Op::Scale(a, s), g)
    }

    /// `x · sigmoid(x)`
    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * sigmoid(x));
        let g = self.needs_grad(a);
        self.push(value, Op::Silu(a), g)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let g = self.needs_grad(a);
        self.push(value, Op::Sigmoid(a), g)
    }

    /// Column-wise concatenation of inputs with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut value = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for p in parts {
            let pv = self.value(*p);
            assert_eq!(pv.rows(), rows, "concat row mismatch");
            for r in 0..rows {
                value.row_mut(r)[offset..offset + pv.cols()].copy_from_slice(pv.row(r));
            }
            offset += pv.cols();
        }
        let g = self.any_grad(parts);
        self.push(value, Op::Concat(parts.to_vec()), g)
    }

    /// Row-wise stacking of inputs with equal column counts.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let pv = self.value(*p);
            assert_eq!(pv.cols(), cols, "stack_rows column mismatch");
            data.extend_from_slice(pv.data());
            rows += pv.rows();
        }
        let g = self.any_grad(parts);
        self.push(Tensor::from_vec(rows, cols, data), Op::StackRows(parts.to_vec()), g)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let av = self.value(a);
        assert_eq!(av.len(), rows * cols, "reshape size mismatch");
        let value = Tensor::from_vec(rows, cols, av.data().to_vec());
        let g = self.needs_grad(a);
        self.push(value, Op::Reshape(a), g)
    }

    /// Flattens to a single row.
    pub fn flatten(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        self.reshape(a, 1, n)
    }

    pub fn row_of(&mut self, a: Var, r: usize) -> Var {
        let value = Tensor::row_vector(self.value(a).row(r).to_vec());
        let g = self.needs_grad(a);
        self.push(value, Op::RowOf(a, r), g)
    }

    /// Rows `idx` of `table`, in order.
    pub fn gather(&mut self, table: Var, idx: &[u32]) -> Var {
        let tv = self.value(table);
        let cols = tv.cols();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(tv.row(i as usize));
        }
        let value = Tensor::from_vec(idx.len(), cols, data);
        let g = self.needs_grad(table);
        self.push(value, Op::Gather(table, idx.to_vec()), g)
    }

    /// Mean over rows where `mask` is true; a zero row when none is.
    pub fn masked_mean(&mut self, a: Var, mask: &[bool]) -> Var {
        let av = self.value(a);
        assert_eq!(av.rows(), mask.len(), "mask length mismatch");
        let mut out = Tensor::zeros(1, av.cols());
        let count = mask.iter().filter(|m| **m).count();
        if count > 0 {
            for (r, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
                for (o, x) in out.data_mut().iter_mut().zip(av.row(r)) {
                    *o += *x;
                }
            }
            out.scale(1.0 / count as f64);
        }
        let g = self.needs_grad(a);
        self.push(out, Op::MaskedMean(a, mask.to_vec()), g)
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q` is `m x d`, `k` and `v` are `n x d`; the model width `d` is split
    /// into `heads` contiguous slices. Keys with `mask[j] == false` are
    /// skipped entirely and receive a weight of exactly zero. With `causal`,
    /// query `i` attends to keys `j <= i` only. Every query must see at
    /// least one valid key.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        mask: Option<&[bool]>,
        heads: usize,
        causal: bool,
    ) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (m, d) = qv.shape();
        let n = kv.rows();
        assert_eq!(kv.cols(), d, "key width mismatch");
        assert_eq!(vv.shape(), (n, d), "value shape mismatch");
        assert!(heads >= 1 && d % heads == 0, "width not divisible by heads");
        if let Some(mask) = mask {
            assert_eq!(mask.len(), n, "mask length mismatch");
        }
        if causal {
            assert_eq!(m, n, "causal attention requires square inputs");
        }
        let dh = d / heads;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let valid = |i: usize, j: usize| -> bool {
            mask.map(|mk| mk[j]).unwrap_or(true) && (!causal || j <= i)
        };

        let mut probs = vec![0.0; m * heads * n];
        let mut out = Tensor::zeros(m, d);
        for i in 0..m {
            for h in 0..heads {
                let lo = h * dh;
                let hi = lo + dh;
                let qi = &qv.row(i)[lo..hi];
                let p = &mut probs[(i * heads + h) * n..(i * heads + h + 1) * n];
                let mut max = f64::NEG_INFINITY;
                let mut any = false;
                for j in 0..n {
                    if valid(i, j) {
                        let s = dot(qi, &kv.row(j)[lo..hi]) * scale;
                        p[j] = s;
                        if s > max {
                            max = s;
                        }
                        any = true;
                    }
                }
                assert!(any, "attention query {i} has no valid key");
                let mut z = 0.0;
                for j in 0..n {
                    if valid(i, j) {
                        let e = libm::exp(p[j] - max);
                        p[j] = e;
                        z += e;
                    }
                }
                let o = &mut out.row_mut(i)[lo..hi];
                for j in 0..n {
                    if valid(i, j) {
                        p[j] /= z;
                        axpy(p[j], &vv.row(j)[lo..hi], o);
                    }
                }
            }
        }
        let g = self.any_grad(&[q, k, v]);
        let cache = AttnCache {
            q,
            k,
            v,
            heads,
            causal,
            mask: mask.map(|m| m.to_vec()),
            probs,
        };
        self.push(out, Op::Attention(Box::new(cache)), g)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (`1 x c`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        assert_eq!(gv.len(), cols);
        assert_eq!(bv.len(), cols);
        let mut xhat = Tensor::zeros(rows, cols);
        let mut out = Tensor::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / libm::sqrt(var + LAYER_NORM_EPS);
            rstd.push(rs);
            for c in 0..cols {
                let xh = (row[c] - mean) * rs;
                xhat.set(r, c, xh);
                out.set(r, c, xh * gv[c] + bv[c]);
            }
        }
        let g = self.any_grad(&[x, gamma, beta]);
        let cache = LnCache {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        };
        self.push(out, Op::LayerNorm(Box::new(cache)), g)
    }

    /// Binary cross-entropy of `sigmoid(logit)` against a soft target in `[0, 1]`.
    pub fn soft_bce(&mut self, logit: Var, target: f64) -> Var {
        let z = self.scalar(logit);
        let value = softplus(z) - target * z;
        let g = self.needs_grad(logit);
        self.push(Tensor::from_vec(1, 1, vec![value]), Op::SoftBce(logit, target), g)
    }

    /// `1 - cos(a, b)` with norms floored at `eps`.
    pub fn cosine_loss(&mut self, a: Var, b: Var, eps: f64) -> Var {
        let c = cosine(self.value(a).data(), self.value(b).data(), eps);
        let g = self.any_grad(&[a, b]);
        self.push(Tensor::from_vec(1, 1, vec![1.0 - c]), Op::Cosine(a, b, eps), g)
    }

    /// Squared Euclidean distance.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape());
        let s = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let g = self.any_grad(&[a, b]);
        self.push(Tensor::from_vec(1, 1, vec![s]), Op::SqDist(a, b), g)
    }

    /// Elementwise sum of same-shaped inputs, accumulated left to right.
    pub fn sum(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let mut value = self.value(parts[0]).clone();
        for p in &parts[1..] {
            value.add_assign(self.value(*p));
        }
        let g = self.any_grad(parts);
        self.push(value, Op::Sum(parts.to_vec()), g)
    }

    /// Gradients of the scalar `root` with respect to every trainable parameter.
    pub fn backward(&self, root: Var) -> ParamGrads {
        let mut out = ParamGrads::new(self.params.len());
        self.backward_into(root, &mut out);
        out
    }

    /// Like [`Graph::backward`], accumulating into existing buffers.
    pub fn backward_into(&self, root: Var, out: &mut ParamGrads) {
        assert_eq!(self.value(root).shape(), (1, 1), "backward needs a scalar root");
        if !self.needs_grad(root) {
            return;
        }
        let mut grads: Vec<Option<Tensor>> = (0..=root.idx()).map(|_| None).collect();
        grads[root.idx()] = Some(Tensor::filled(1, 1, 1.0));

        for i in (0..=root.idx()).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(dout) = grads[i].take() else {
                continue;
            };
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => match out.slot(*id) {
                    Some(acc) => acc.add_assign(&dout),
                    slot @ None => *slot = Some(dout),
                },
                Op::MatMul(a, b) => {
                    if self.needs_grad(*a) {
                        let ga = self.grad_slot(&mut grads, *a);
                        matmul_bt_acc(&dout, self.value(*b), ga);
                    }
                    if self.needs_grad(*b) {
                        let gb = self.grad_slot(&mut grads, *b);
                        matmul_at_acc(self.value(*a), &dout, gb);
                    }
                }
                Op::Add(a, b) => {
                    for x in [*a, *b] {
                        if self.needs_grad(x) {
                            self.grad_slot(&mut grads, x).add_assign(&dout);
                        }
                    }
                }
                Op::AddRow(a, b) => {
                    if self.needs_grad(*a) {
                        self.grad_slot(&mut grads, *a).add_assign(&dout);
                    }
                    if self.needs_grad(*b) {
                        let gb = self.grad_slot(&mut grads, *b);
                        for r in 0..dout.rows() {
                            for (g, d) in gb.data_mut().iter_mut().zip(dout.row(r)) {
                                *g += *d;
                            }
                        }
                    }
                }
                Op::Mul(a, b) => {
                    for (x, other) in [(*a, *b), (*b, *a)] {
                        if self.needs_grad(x) {
                            let ov = self.value(other).data();
                            let gx = self.grad_slot(&mut grads, x);
                            for ((g, d), o) in gx.data_mut().iter_mut().zip(dout.data()).zip(ov) {
                                *g += d * o;
                            }
                        }
                    }
                }
                Op::Scale(a, s) => {
                    let ga = self.grad_slot(&mut grads, *a);
                    axpy(*s, dout.data(), ga.data_mut());
                }
                Op::Silu(a) => {
                    let xv = self.value(*a).data();
                    let ga = self.grad_slot(&mut grads, *a);
                    for ((g, d), x) in ga.data_mut().iter_mut().zip(dout.data()).zip(xv) {
                        let s = sigmoid(*x);
                        *g += d * s * (1.0 + x * (1.0 - s));
                    }
                }
                Op::Sigmoid(a) => {
                    let yv = node.value.data();
                    let ga = self.grad_slot(&mut grads, *a);
                    for ((g, d), y) in ga.data_mut().iter_mut().zip(dout.data()).zip(yv) {
                        *g += d * y * (1.0 - y);
                    }
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = self.value(*p).cols();
                        if self.needs_grad(*p) {
                            let gp = self.grad_slot(&mut grads, *p);
                            for r in 0..dout.rows() {
                                for (g, d) in gp
                                    .row_mut(r)
                                    .iter_mut()
                                    .zip(&dout.row(r)[offset..offset + w])
                                {
                                    *g += *d;
                                }
                            }
                        }
                        offset += w;
                    }
                }
                Op::StackRows(parts) => {
                    let cols = dout.cols();
                    let mut offset = 0;
                    for p in parts {
                        let n = self.value(*p).len();
                        if self.needs_grad(*p) {
                            let gp = self.grad_slot(&mut grads, *p);
                            for (g, d) in gp
                                .data_mut()
                                .iter_mut()
                                .zip(&dout.data()[offset..offset + n])
                            {
                                *g += *d;
                            }
                        }
                        offset += n;
                        debug_assert_eq!(n % cols, 0);
                    }
                }
                Op::Reshape(a) => {
                    let ga = self.grad_slot(&mut grads, *a);
                    for (g, d) in ga.data_mut().iter_mut().zip(dout.data()) {
                        *g += *d;
                    }
                }
                Op::RowOf(a, r) => {
                    let ga = self.grad_slot(&mut grads, *a);
                    for (g, d) in ga.row_mut(*r).iter_mut().zip(dout.data()) {
                        *g += *d;
                    }
                }
                Op::Gather(table, idx) => {
                    let gt = self.grad_slot(&mut grads, *table);
                    for (r, &i) in idx.iter().enumerate() {
                        for (g, d) in gt.row_mut(i as usize).iter_mut().zip(dout.row(r)) {
                            *g += *d;
                        }
                    }
                }
                Op::MaskedMean(a, mask) => {
                    let count = mask.iter().filter(|m| **m).count();
                    if count > 0 {
                        let inv = 1.0 / count as f64;
                        let ga = self.grad_slot(&mut grads, *a);
                        for (r, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
                            axpy(inv, dout.data(), ga.row_mut(r));
                        }
                    }
                }
                Op::Attention(c) => self.attention_backward(c, &dout, &mut grads),
                Op::LayerNorm(c) => self.layer_norm_backward(c, &dout, &mut grads),
                Op::SoftBce(logit, target) => {
                    let z = self.scalar(*logit);
                    let d = dout.data()[0] * (sigmoid(z) - target);
                    self.grad_slot(&mut grads, *logit).data_mut()[0] += d;
                }
                Op::Cosine(a, b, eps) => {
                    let d = dout.data()[0];
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    // loss = 1 - cos, so d loss = -d cos
                    if self.needs_grad(*a) {
                        let g = cosine_grad(av, bv, *eps);
                        axpy(-d, &g, self.grad_slot(&mut grads, *a).data_mut());
                    }
                    if self.needs_grad(*b) {
                        let g = cosine_grad(bv, av, *eps);
                        axpy(-d, &g, self.grad_slot(&mut grads, *b).data_mut());
                    }
                }
                Op::SqDist(a, b) => {
                    let d = dout.data()[0];
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    let diff: Vec<f64> = av.iter().zip(bv).map(|(x, y)| x - y).collect();
                    if self.needs_grad(*a) {
                        axpy(2.0 * d, &diff, self.grad_slot(&mut grads, *a).data_mut());
                    }
                    if self.needs_grad(*b) {
                        axpy(-2.0 * d, &diff, self.grad_slot(&mut grads, *b).data_mut());
                    }
                }
                Op::Sum(parts) => {
                    for p in parts {
                        if self.needs_grad(*p) {
                            self.grad_slot(&mut grads, *p).add_assign(&dout);
                        }
                    }
                }
            }
        }
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> &'g mut Tensor {
        let (r, c) = self.value(v).shape();
        grads[v.idx()].get_or_insert_with(|| Tensor::zeros(r, c))
    }

    fn attention_backward(&self, c: &AttnCache, dout: &Tensor, grads: &mut [Option<Tensor>]) {
        let (qv, kv, vv) = (self.value(c.q), self.value(c.k), self.value(c.v));
        let (m, d) = qv.shape();
        let n = kv.rows();
        let heads = c.heads;
        let dh = d / heads;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let mask = c.mask.as_deref();
        let causal = c.causal;
        let valid = |i: usize, j: usize| -> bool {
            mask.map(|mk| mk[j]).unwrap_or(true) && (!causal || j <= i)
        };

        let mut dq = Tensor::zeros(m, d);
        let mut dk = Tensor::zeros(n, d);
        let mut dv = Tensor::zeros(n, d);
        let mut dp = vec![0.0; n];
        for i in 0..m {
            for h in 0..heads {
                let lo = h * dh;
                let hi = lo + dh;
                let p = &c.probs[(i * heads + h) * n..(i * heads + h + 1) * n];
                let douti = &dout.row(i)[lo..hi];
                let mut weighted = 0.0;
                for j in 0..n {
                    if valid(i, j) {
                        dp[j] = dot(douti, &vv.row(j)[lo..hi]);
                        weighted += p[j] * dp[j];
                        axpy(p[j], douti, &mut dv.row_mut(j)[lo..hi]);
                    }
                }
                let qi = &qv.row(i)[lo..hi];
                for j in 0..n {
                    if valid(i, j) {
                        let ds = p[j] * (dp[j] - weighted) * scale;
                        axpy(ds, &kv.row(j)[lo..hi], &mut dq.row_mut(i)[lo..hi]);
                        axpy(ds, qi, &mut dk.row_mut(j)[lo..hi]);
                    }
                }
            }
        }
        for (var, g) in [(c.q, dq), (c.k, dk), (c.v, dv)] {
            if self.needs_grad(var) {
                self.grad_slot(grads, var).add_assign(&g);
            }
        }
    }

    fn layer_norm_backward(&self, c: &LnCache, dout: &Tensor, grads: &mut [Option<Tensor>]) {
        let (rows, cols) = c.xhat.shape();
        let gamma = self.value(c.gamma).data();
        if self.needs_grad(c.gamma) {
            let gg = self.grad_slot(grads, c.gamma);
            for r in 0..rows {
                for (k, g) in gg.data_mut().iter_mut().enumerate() {
                    *g += dout.get(r, k) * c.xhat.get(r, k);
                }
            }
        }
        if self.needs_grad(c.beta) {
            let gb = self.grad_slot(grads, c.beta);
            for r in 0..rows {
                for (g, d) in gb.data_mut().iter_mut().zip(dout.row(r)) {
                    *g += *d;
                }
            }
        }
        if self.needs_grad(c.x) {
            let mut dx = Tensor::zeros(rows, cols);
            for r in 0..rows {
                let xh = c.xhat.row(r);
                let dxhat: Vec<f64> = dout.row(r).iter().zip(gamma).map(|(d, g)| d * g).collect();
                let mean_d = dxhat.iter().sum::<f64>() / cols as f64;
                let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                for k in 0..cols {
                    dx.set(r, k, c.rstd[r] * (dxhat[k] - mean_d - xh[k] * mean_dx));
                }
            }
            self.grad_slot(grads, c.x).add_assign(&dx);
        }
    }
}

/// Cosine similarity with both norms floored at `eps`.
pub fn cosine(a: &[f64], b: &[f64], eps: f64) -> f64 {
    assert_eq!(a.len(), b.len(), "cosine width mismatch");
    let na = libm::sqrt(dot(a, a)).max(eps);
    let nb = libm::sqrt(dot(b, b)).max(eps);
    dot(a, b) / (na * nb)
}

/// `∂ cos(a, b) / ∂a` under the same norm floor.
fn cosine_grad(a: &[f64], b: &[f64], eps: f64) -> Vec<f64> {
    let raw_a = libm::sqrt(dot(a, a));
    let na = raw_a.max(eps);
    let nb = libm::sqrt(dot(b, b)).max(eps);
    let ab = dot(a, b);
    let floored = raw_a <= eps;
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let direct = y / (na * nb);
            if floored {
                direct
            } else {
                direct - ab * x / (na * na * na * nb)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Group;
    use alloc::vec::Vec;

    fn store(shapes: &[(usize, usize)], seed: u64) -> ModelParams {
        let mut p = ModelParams::new();
        let mut x = seed as f64 * 0.37 + 0.1;
        for (i, (r, c)) in shapes.iter().enumerate() {
            let data = (0..r * c)
                .map(|_| {
                    x = libm::sin(x * 12.9898 + 78.233) * 43758.5453;
                    x -= libm::floor(x);
                    x * 2.0 - 1.0
                })
                .collect();
            let name = alloc::format!("p{i}");
            p.insert(&name, Group::Backbone, Tensor::from_vec(*r, *c, data));
        }
        p
    }

    /// Central differences against the tape gradient for every entry of every
    /// param; the last param is reserved for `to_scalar` weights.
    fn check(shapes: &[(usize, usize)], f: impl Fn(&mut Graph<'_>, &[Var]) -> Var) {
        let params = store(shapes, 3);
        let trainable = vec![true; params.len()];
        let mut g = Graph::training(&params, &trainable);
        let vars: Vec<Var> = (0..params.len()).map(|i| g.param(ParamId(i))).collect();
        let root = f(&mut g, &vars);
        let grads = g.backward(root);
        let h = 1e-5;
        for i in 0..params.len() - 1 {
            for k in 0..params.value(ParamId(i)).len() {
                let eval = |delta: f64| {
                    let mut p = params.clone();
                    p.value_mut(ParamId(i)).data_mut()[k] += delta;
                    let mut g = Graph::inference(&p);
                    let vars: Vec<Var> = (0..p.len()).map(|i| g.param(ParamId(i))).collect();
                    let r = f(&mut g, &vars);
                    g.scalar(r)
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = grads.get(ParamId(i)).map(|t| t.data()[k]).unwrap_or(0.0);
                let err = libm::fabs(fd - an) / (1e-8 + libm::fabs(fd).max(libm::fabs(an)));
                assert!(err < 1e-6 || libm::fabs(fd - an) < 1e-9, "param {i}[{k}]: fd {fd} vs {an}");
            }
        }
    }

    fn to_scalar(g: &mut Graph<'_>, x: Var, w: Var) -> Var {
        // contract with a fixed weight pattern so every output entry matters
        let flat = g.flatten(x);
        let n = g.value(flat).len();
        let wv = g.value(w).clone();
        let wflat = Tensor::from_vec(n, 1, (0..n).map(|i| wv.data()[i % wv.len()]).collect());
        let wc = g.constant(wflat);
        g.matmul(flat, wc)
    }

    #[test]
    fn grad_dense_ops() {
        check(&[(2, 3), (3, 4), (1, 4), (8, 1)], |g, v| {
            let h = g.matmul(v[0], v[1]);
            let h = g.add_row(h, v[2]);
            let a = g.silu(h);
            let b = g.sigmoid(h);
            let m = g.mul(a, b);
            let s = g.scale(m, 0.7);
            let t = g.sum(&[s, a]);
            to_scalar(g, t, v[3])
        });
    }

    #[test]
    fn grad_shape_ops() {
        check(&[(3, 2), (3, 3), (5, 2), (7, 1)], |g, v| {
            let c = g.concat(&[v[0], v[1]]);
            let r = g.row_of(c, 1);
            let st = g.stack_rows(&[r, r]);
            let gath = g.gather(v[2], &[4, 0, 4]);
            let mm = g.masked_mean(gath, &[true, false, true]);
            let f = g.flatten(st);
            let parts = g.concat(&[f, mm]);
            to_scalar(g, parts, v[3])
        });
    }

    #[test]
    fn grad_attention_and_norm() {
        check(&[(2, 4), (5, 4), (5, 4), (1, 4), (1, 4), (9, 1)], |g, v| {
            let a = g.attention(v[0], v[1], v[2], Some(&[true, false, true, true, false]), 2, false);
            let kk = g.row_of(v[1], 0);
            let sq = g.stack_rows(&[kk, a]);
            let ln = g.layer_norm(sq, v[3], v[4]);
            let c = g.attention(ln, ln, ln, None, 2, true);
            to_scalar(g, c, v[5])
        });
    }

    #[test]
    fn grad_losses() {
        check(&[(1, 5), (1, 5), (1, 1)], |g, v| {
            let c = g.cosine_loss(v[0], v[1], 1e-8);
            let d = g.sq_dist(v[0], v[1]);
            let b = g.soft_bce(v[2], 0.3);
            g.sum(&[c, d, b])
        });
    }

    #[test]
    fn detach_blocks_gradient() {
        let params = store(&[(1, 3), (1, 3)], 1);
        let trainable = vec![true; 2];
        let mut g = Graph::training(&params, &trainable);
        let a = g.param(ParamId(0));
        let b = g.param(ParamId(1));
        let bd = g.detach(b);
        let l = g.cosine_loss(a, bd, 1e-8);
        let grads = g.backward(l);
        assert!(grads.get(ParamId(0)).is_some());
        assert!(grads.get(ParamId(1)).is_none());
    }

    #[test]
    fn masked_keys_get_zero_weight_and_padding_is_inert() {
        let params = store(&[(1, 4), (3, 4), (3, 4)], 9);
        let mut g = Graph::inference(&params);
        let q = g.param(ParamId(0));
        let k = g.param(ParamId(1));
        let v = g.param(ParamId(2));
        let short = g.attention(q, k, v, Some(&[true, true, false]), 2, false);

        let k2 = g.row_of(k, 0);
        let k3 = g.row_of(k, 1);
        let junk = g.constant(Tensor::filled(1, 4, 1e6));
        let kp = g.stack_rows(&[k2, k3, junk, junk]);
        let v2 = g.row_of(v, 0);
        let v3 = g.row_of(v, 1);
        let vp = g.stack_rows(&[v2, v3, junk, junk]);
        let padded = g.attention(q, kp, vp, Some(&[true, true, false, false]), 2, false);
        assert!(g.value(short).bit_eq(g.value(padded)));
    }
}
