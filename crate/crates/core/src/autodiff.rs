//! Tape-based reverse-mode differentiation over a small fixed op set.
//!
//! Every op records its output value on the tape; `backward` walks the
//! tape in reverse creation order and accumulates adjoints.

use crate::error::{Error, Result};
use crate::mamba::ssm::{zoh, zoh_gain_grad_a};
use crate::tensor::{
    broadcast_strides, concat_data, concat_shape, for_each_offset, gemm, inverse_permutation,
    numel, permute_data, row_moments, Tensor,
};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct ScanCache {
    delta: Var,
    a: Var,
    b: Var,
    c: Var,
    u: Var,
    d: Var,
    /// Hidden state after every step, `[G, L, Di, Ds]`.
    states: Vec<f64>,
}

struct LayerNormCache {
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    BroadcastTo(Var),
    Concat(Vec<Var>, usize),
    Slice { x: Var, axis: usize, start: usize },
    Gather { table: Var, indices: Vec<usize> },
    Exp(Var),
    Softplus(Var),
    Relu(Var),
    Abs(Var),
    Softmax(Var),
    LayerNorm(Box<LayerNormCache>),
    Sum(Var),
    Mean(Var),
    Scan(Box<ScanCache>),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// A recording tape. Build one per forward pass.
pub struct Graph {
    nodes: Vec<Node>,
    record: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Adjoints produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients(Vec<Option<Tensor>>);

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.0.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.0.get_mut(v.0).and_then(|g| g.take())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn accumulate_with(grads: &mut [Option<Tensor>], v: Var, like: &Tensor, f: impl FnOnce(&mut [f64])) {
    let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(like.shape()));
    f(slot.data_mut());
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            record: true,
        }
    }

    /// A tape that keeps values only; `backward` is unavailable and the scan
    /// op skips its state cache.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            record: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).scale(c);
        self.push(out, Op::Scale(a, c))
    }

    /// `x[.., n] + row[n]`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(row));
        let n = xv.last_dim();
        if rv.len() != n || xv.ndim() == 0 {
            return Err(Error::shape("add_row", xv.shape(), rv.shape()));
        }
        let mut out = xv.clone();
        for chunk in out.data_mut().chunks_mut(n) {
            for (o, r) in chunk.iter_mut().zip(rv.data()) {
                *o += r;
            }
        }
        Ok(self.push(out, Op::AddRow(x, row)))
    }

    /// `x[.., n] ⊙ row[n]`.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(row));
        let n = xv.last_dim();
        if rv.len() != n || xv.ndim() == 0 {
            return Err(Error::shape("mul_row", xv.shape(), rv.shape()));
        }
        let mut out = xv.clone();
        for chunk in out.data_mut().chunks_mut(n) {
            for (o, r) in chunk.iter_mut().zip(rv.data()) {
                *o *= r;
            }
        }
        Ok(self.push(out, Op::MulRow(x, row)))
    }

    /// `x[.., k] · w[k, n]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let out = self.value(x).matmul(self.value(w))?;
        Ok(self.push(out, Op::MatMul(x, w)))
    }

    /// Batched product `a[G, m, k] · b[G, k, n]`, or `a · bᵀ` with
    /// `b[G, n, k]` when `trans_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::shape("batch_matmul", sa, sb));
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(Error::shape("batch_matmul", sa, sb));
        }
        let mut out = vec![0.0; g * m * n];
        for i in 0..g {
            gemm(
                m,
                k,
                n,
                &av.data()[i * m * k..(i + 1) * m * k],
                false,
                &bv.data()[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let out = Tensor::new(vec![g, m, n], out)?;
        Ok(self.push(out, Op::BatchMatMul { a, b, trans_b }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let out = self.value(x).permute(axes)?;
        Ok(self.push(out, Op::Permute(x, axes.to_vec())))
    }

    /// Right-aligned broadcast of `x` to `shape` (size-1 or missing axes
    /// are repeated).
    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let strides = broadcast_strides(xv.shape(), shape)?;
        let mut out = vec![0.0; numel(shape)];
        let src = xv.data();
        for_each_offset(shape, &strides, |o, s| out[o] = src[s]);
        let out = Tensor::new(shape.to_vec(), out)?;
        Ok(self.push(out, Op::BroadcastTo(x)))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat of zero tensors".into()));
        }
        let shapes: Vec<&[usize]> = parts.iter().map(|&p| self.shape(p)).collect();
        let shape = concat_shape(&shapes, axis)?;
        let datas: Vec<&[f64]> = parts.iter().map(|&p| self.value(p).data()).collect();
        let out = Tensor::new(shape, concat_data(&shapes, &datas, axis))?;
        Ok(self.push(out, Op::Concat(parts.to_vec(), axis)))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).slice_axis(axis, start, len)?;
        Ok(self.push(out, Op::Slice { x, axis, start }))
    }

    /// Row lookup: `table[V, d]` indexed by `indices` gives `[len, d]`.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.ndim() != 2 {
            return Err(Error::InvalidShape(format!(
                "gather table must be a matrix, got {:?}",
                tv.shape()
            )));
        }
        let (rows, d) = (tv.shape()[0], tv.shape()[1]);
        if indices.is_empty() {
            return Err(Error::InvalidArgument("gather with no indices".into()));
        }
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= rows {
                return Err(Error::Index {
                    what: "embedding table",
                    index: i,
                    len: rows,
                });
            }
            out.extend_from_slice(&tv.data()[i * d..(i + 1) * d]);
        }
        let out = Tensor::new(vec![indices.len(), d], out)?;
        Ok(self.push(
            out,
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
        ))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::exp);
        self.push(out, Op::Exp(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let out = self.value(x).map(softplus);
        self.push(out, Op::Softplus(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::abs);
        self.push(out, Op::Abs(x))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).softmax_rows()?;
        Ok(self.push(out, Op::Softmax(x)))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::InvalidArgument(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let xv = self.value(x);
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let d = xv.last_dim();
        if gv.len() != d || bv.len() != d {
            return Err(Error::shape("layer_norm", xv.shape(), gv.shape()));
        }
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let (mean, is) = row_moments(row, eps);
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = gv.data()[j] * h + bv.data()[j];
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let (xhat, inv_std) = if self.record { (xhat, inv_std) } else { (Vec::new(), Vec::new()) };
        Ok(self.push(
            out,
            Op::LayerNorm(Box::new(LayerNormCache {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            })),
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).mean());
        self.push(out, Op::Mean(x))
    }

    /// Selective scan with zero-order-hold discretization.
    ///
    /// Shapes: `delta[G, L, Di]`, `a[Di, Ds]`, `b[G, L, Ds]`, `c[G, L, Ds]`,
    /// `u[G, L, Di]`, `d[Di]`; output `y[G, L, Di]` with
    /// `h_k = exp(Δ_k a) ⊙ h_{k-1} + (exp(Δ_k a) − 1)/a · b_k u_k` and
    /// `y_k = Σ_state c_k ⊙ h_k + d ⊙ u_k`, starting from `h_0 = 0`.
    pub fn selective_scan(&mut self, delta: Var, a: Var, b: Var, c: Var, u: Var, d: Var) -> Result<Var> {
        let (dv, av, bv, cv, uv, skip) = (
            self.value(delta),
            self.value(a),
            self.value(b),
            self.value(c),
            self.value(u),
            self.value(d),
        );
        if dv.ndim() != 3 || av.ndim() != 2 {
            return Err(Error::shape("selective_scan", dv.shape(), av.shape()));
        }
        let (g, l, di) = (dv.shape()[0], dv.shape()[1], dv.shape()[2]);
        let ds = av.shape()[1];
        if av.shape()[0] != di {
            return Err(Error::shape("selective_scan a", dv.shape(), av.shape()));
        }
        if bv.shape() != [g, l, ds] {
            return Err(Error::shape("selective_scan b", dv.shape(), bv.shape()));
        }
        if cv.shape() != [g, l, ds] {
            return Err(Error::shape("selective_scan c", dv.shape(), cv.shape()));
        }
        if uv.shape() != dv.shape() {
            return Err(Error::shape("selective_scan u", dv.shape(), uv.shape()));
        }
        if skip.len() != di {
            return Err(Error::shape("selective_scan d", dv.shape(), skip.shape()));
        }
        // softplus can underflow to exactly 0, which is the identity step
        if let Some(&bad) = dv.data().iter().find(|&&x| !(x >= 0.0 && x.is_finite())) {
            return Err(Error::InvalidArgument(format!("step size must be finite and ≥ 0, got {bad}")));
        }
        let (dd, ad, bd, cd, ud, sd) = (dv.data(), av.data(), bv.data(), cv.data(), uv.data(), skip.data());
        let state_len = di * ds;
        let mut y = vec![0.0; g * l * di];
        let mut states = if self.record { vec![0.0; g * l * state_len] } else { Vec::new() };
        let mut h = vec![0.0; state_len];
        for gi in 0..g {
            h.fill(0.0);
            for k in 0..l {
                let row = gi * l + k;
                let bk = &bd[row * ds..(row + 1) * ds];
                let ck = &cd[row * ds..(row + 1) * ds];
                for i in 0..di {
                    let dl = dd[row * di + i];
                    let ui = ud[row * di + i];
                    let mut acc = sd[i] * ui;
                    for j in 0..ds {
                        let (abar, gain) = zoh(dl, ad[i * ds + j]);
                        let hv = abar * h[i * ds + j] + gain * bk[j] * ui;
                        h[i * ds + j] = hv;
                        acc += ck[j] * hv;
                    }
                    y[row * di + i] = acc;
                }
                if self.record {
                    states[row * state_len..(row + 1) * state_len].copy_from_slice(&h);
                }
            }
        }
        let out = Tensor::new(vec![g, l, di], y)?;
        Ok(self.push(
            out,
            Op::Scan(Box::new(ScanCache {
                delta,
                a,
                b,
                c,
                u,
                d,
                states,
            })),
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.record {
            return Err(Error::InvalidArgument("backward on an inference tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients(grads))
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, g.mul(val(*b)).expect("shape"));
                accumulate(grads, *b, g.mul(val(*a)).expect("shape"));
            }
            Op::Scale(a, c) => accumulate(grads, *a, g.scale(*c)),
            Op::AddRow(x, row) => {
                accumulate(grads, *x, g.clone());
                let n = g.last_dim();
                accumulate_with(grads, *row, val(*row), |dst| {
                    for chunk in g.data().chunks(n) {
                        for (d, v) in dst.iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                });
            }
            Op::MulRow(x, row) => {
                let (xv, rv) = (val(*x), val(*row));
                let n = g.last_dim();
                let mut gx = g.clone();
                for chunk in gx.data_mut().chunks_mut(n) {
                    for (o, r) in chunk.iter_mut().zip(rv.data()) {
                        *o *= r;
                    }
                }
                accumulate(grads, *x, gx);
                accumulate_with(grads, *row, rv, |dst| {
                    for (gc, xc) in g.data().chunks(n).zip(xv.data().chunks(n)) {
                        for j in 0..n {
                            dst[j] += gc[j] * xc[j];
                        }
                    }
                });
            }
            Op::MatMul(x, w) => {
                let (xv, wv) = (val(*x), val(*w));
                let (k, n) = (wv.shape()[0], wv.shape()[1]);
                let m = xv.len() / k;
                accumulate_with(grads, *x, xv, |dst| {
                    gemm(m, n, k, g.data(), false, wv.data(), true, dst, true)
                });
                accumulate_with(grads, *w, wv, |dst| {
                    gemm(k, m, n, xv.data(), true, g.data(), false, dst, true)
                });
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (av, bv) = (val(*a), val(*b));
                let (bn, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = g.shape()[2];
                accumulate_with(grads, *a, av, |dst| {
                    for i in 0..bn {
                        gemm(
                            m,
                            n,
                            k,
                            &g.data()[i * m * n..(i + 1) * m * n],
                            false,
                            &bv.data()[i * k * n..(i + 1) * k * n],
                            !*trans_b,
                            &mut dst[i * m * k..(i + 1) * m * k],
                            true,
                        );
                    }
                });
                accumulate_with(grads, *b, bv, |dst| {
                    for i in 0..bn {
                        let ga = &g.data()[i * m * n..(i + 1) * m * n];
                        let aa = &av.data()[i * m * k..(i + 1) * m * k];
                        let out = &mut dst[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            gemm(n, m, k, ga, true, aa, false, out, true);
                        } else {
                            gemm(k, m, n, aa, true, ga, false, out, true);
                        }
                    }
                });
            }
            Op::Reshape(x) => {
                accumulate(grads, *x, g.reshape(val(*x).shape()).expect("shape"));
            }
            Op::Permute(x, axes) => {
                let inv = inverse_permutation(axes);
                let (shape, data) = permute_data(g.shape(), g.data(), &inv);
                accumulate(grads, *x, Tensor::new(shape, data).expect("shape"));
            }
            Op::BroadcastTo(x) => {
                let xv = val(*x);
                let strides = broadcast_strides(xv.shape(), g.shape()).expect("shape");
                accumulate_with(grads, *x, xv, |dst| {
                    let src = g.data();
                    for_each_offset(g.shape(), &strides, |o, s| dst[s] += src[o]);
                });
            }
            Op::Concat(parts, axis) => {
                let mut start = 0;
                for &p in parts {
                    let len = val(p).shape()[*axis];
                    accumulate(grads, p, g.slice_axis(*axis, start, len).expect("shape"));
                    start += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let xv = val(*x);
                let outer = numel(&xv.shape()[..*axis]);
                let inner = numel(&xv.shape()[*axis + 1..]);
                let block = xv.shape()[*axis] * inner;
                let len = g.shape()[*axis] * inner;
                accumulate_with(grads, *x, xv, |dst| {
                    for o in 0..outer {
                        let base = o * block + start * inner;
                        for (d, v) in dst[base..base + len].iter_mut().zip(&g.data()[o * len..(o + 1) * len]) {
                            *d += v;
                        }
                    }
                });
            }
            Op::Gather { table, indices } => {
                let tv = val(*table);
                let d = tv.shape()[1];
                accumulate_with(grads, *table, tv, |dst| {
                    for (r, &i) in indices.iter().enumerate() {
                        for j in 0..d {
                            dst[i * d + j] += g.data()[r * d + j];
                        }
                    }
                });
            }
            Op::Exp(x) => accumulate(grads, *x, g.mul(&node.value).expect("shape")),
            Op::Softplus(x) => {
                let s = val(*x).map(sigmoid);
                accumulate(grads, *x, g.mul(&s).expect("shape"));
            }
            Op::Relu(x) => {
                let mask = val(*x).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                accumulate(grads, *x, g.mul(&mask).expect("shape"));
            }
            Op::Abs(x) => {
                let sign = val(*x).map(|v| {
                    if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                accumulate(grads, *x, g.mul(&sign).expect("shape"));
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let n = y.last_dim();
                let mut gx = vec![0.0; y.len()];
                for ((dst, yr), gr) in gx.chunks_mut(n).zip(y.data().chunks(n)).zip(g.data().chunks(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dst[j] = yr[j] * (gr[j] - dot);
                    }
                }
                accumulate(grads, *x, Tensor::new(y.shape().to_vec(), gx).expect("shape"));
            }
            Op::LayerNorm(cache) => {
                let gv = val(cache.gamma);
                let d = gv.len();
                let rows = g.len() / d;
                let mut gx = vec![0.0; g.len()];
                let mut ggamma = vec![0.0; d];
                let mut gbeta = vec![0.0; d];
                let mut gh = vec![0.0; d];
                for r in 0..rows {
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let xh = &cache.xhat[r * d..(r + 1) * d];
                    let mut mean_gh = 0.0;
                    let mut mean_ghx = 0.0;
                    for j in 0..d {
                        ggamma[j] += gr[j] * xh[j];
                        gbeta[j] += gr[j];
                        gh[j] = gr[j] * gv.data()[j];
                        mean_gh += gh[j];
                        mean_ghx += gh[j] * xh[j];
                    }
                    mean_gh /= d as f64;
                    mean_ghx /= d as f64;
                    let is = cache.inv_std[r];
                    for j in 0..d {
                        gx[r * d + j] = is * (gh[j] - mean_gh - xh[j] * mean_ghx);
                    }
                }
                accumulate(grads, cache.x, Tensor::new(g.shape().to_vec(), gx).expect("shape"));
                accumulate(grads, cache.gamma, Tensor::new(gv.shape().to_vec(), ggamma).expect("shape"));
                accumulate(grads, cache.beta, Tensor::new(gv.shape().to_vec(), gbeta).expect("shape"));
            }
            Op::Sum(x) => {
                let xv = val(*x);
                accumulate(grads, *x, Tensor::full(xv.shape(), g.data()[0]));
            }
            Op::Mean(x) => {
                let xv = val(*x);
                let v = g.data()[0] / xv.len() as f64;
                accumulate(grads, *x, Tensor::full(xv.shape(), v));
            }
            Op::Scan(cache) => self.backprop_scan(cache, g, grads),
        }
    }

    fn backprop_scan(&self, cache: &ScanCache, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let (dv, av, bv, cv, uv, sv) = (
            val(cache.delta),
            val(cache.a),
            val(cache.b),
            val(cache.c),
            val(cache.u),
            val(cache.d),
        );
        let (g, l, di) = (dv.shape()[0], dv.shape()[1], dv.shape()[2]);
        let ds = av.shape()[1];
        let state_len = di * ds;
        let (dd, ad, bd, cd, ud, sd) = (dv.data(), av.data(), bv.data(), cv.data(), uv.data(), sv.data());
        let gyd = gy.data();

        let mut g_delta = vec![0.0; dd.len()];
        let mut g_a = vec![0.0; ad.len()];
        let mut g_b = vec![0.0; bd.len()];
        let mut g_c = vec![0.0; cd.len()];
        let mut g_u = vec![0.0; ud.len()];
        let mut g_d = vec![0.0; sd.len()];
        let zeros = vec![0.0; state_len];
        let mut gh = vec![0.0; state_len];

        for gi in 0..g {
            gh.fill(0.0);
            for k in (0..l).rev() {
                let row = gi * l + k;
                let h_k = &cache.states[row * state_len..(row + 1) * state_len];
                let h_prev = if k > 0 {
                    &cache.states[(row - 1) * state_len..row * state_len]
                } else {
                    &zeros[..]
                };
                let bk = &bd[row * ds..(row + 1) * ds];
                let ck = &cd[row * ds..(row + 1) * ds];
                for i in 0..di {
                    let gyi = gyd[row * di + i];
                    let dl = dd[row * di + i];
                    let ui = ud[row * di + i];
                    g_d[i] += gyi * ui;
                    let mut gu_acc = gyi * sd[i];
                    let mut gdl_acc = 0.0;
                    for j in 0..ds {
                        let s = i * ds + j;
                        let aij = ad[s];
                        g_c[row * ds + j] += gyi * h_k[s];
                        let ghv = gh[s] + gyi * ck[j];
                        let (abar, gain) = zoh(dl, aij);
                        let g_abar = ghv * h_prev[s];
                        let g_bbar = ghv * ui;
                        gu_acc += ghv * gain * bk[j];
                        g_b[row * ds + j] += g_bbar * gain;
                        gdl_acc += g_abar * aij * abar + g_bbar * bk[j] * abar;
                        g_a[s] += g_abar * dl * abar + g_bbar * bk[j] * zoh_gain_grad_a(dl, aij);
                        gh[s] = ghv * abar;
                    }
                    g_u[row * di + i] += gu_acc;
                    g_delta[row * di + i] += gdl_acc;
                }
            }
        }
        let wrap = |t: &Tensor, d: Vec<f64>| Tensor::new(t.shape().to_vec(), d).expect("shape");
        accumulate(grads, cache.delta, wrap(dv, g_delta));
        accumulate(grads, cache.a, wrap(av, g_a));
        accumulate(grads, cache.b, wrap(bv, g_b));
        accumulate(grads, cache.c, wrap(cv, g_c));
        accumulate(grads, cache.u, wrap(uv, g_u));
        accumulate(grads, cache.d, wrap(sv, g_d));
    }
}
