//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation in execution order, so walking the
//! node list backwards is a reverse topological order: each recorded input
//! receives its adjoint contribution exactly once per use. Parameter leaves
//! borrow their storage, which keeps inference passes allocation-light.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which keys each query may attend to, for one packed batch.
#[derive(Debug, Clone)]
pub struct AttentionSpec {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
    /// Valid key count per batch element; keys at or past it are padding.
    pub key_lengths: Vec<usize>,
    pub causal: bool,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, a_t: bool, b_t: bool },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddRow { x: Var, bias: Var },
    Scale { x: Var, factor: f64 },
    Relu { x: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, rstd: Vec<f64> },
    Softmax { x: Var, axis: usize },
    Embedding { table: Var, ids: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spec: AttentionSpec,
        probs: Vec<f64>,
        dropout: Option<Vec<f64>>,
    },
    LabelSmoothedNll {
        logits: Var,
        targets: Vec<usize>,
        epsilon: f64,
        pad_id: usize,
        count: usize,
        probs: Vec<f64>,
    },
    Sum { x: Var },
}

#[derive(Debug)]
struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Leaf adjoints produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Debug, Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf borrowing `t`.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(t),
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf borrowing `t`; no gradient flows into it.
    pub fn constant_ref(&mut self, t: &'a Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(t),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// `a · bᵀ` with `b` stored row-major as `n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, true)
    }

    fn matmul_t(&mut self, a: Var, a_t: bool, b: Var, b_t: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 {
            return Err(Error::shape("matmul", av.shape(), bv.shape()));
        }
        let (m, k) = if a_t {
            (av.shape()[1], av.shape()[0])
        } else {
            (av.shape()[0], av.shape()[1])
        };
        let (k2, n) = if b_t {
            (bv.shape()[1], bv.shape()[0])
        } else {
            (bv.shape()[0], bv.shape()[1])
        };
        if k != k2 {
            return Err(Error::shape("matmul", av.shape(), bv.shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), a_t, bv.data(), b_t, &mut out, 0.0);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, a_t, b_t }, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape("add", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Add { a, b }, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape("mul", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Mul { a, b }, ng))
    }

    /// Adds a length-`cols` bias to every row of a matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let cols = xv.cols();
        if bv.numel() != cols {
            return Err(Error::shape("add_row", xv.shape(), bv.shape()));
        }
        let b = bv.data();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(cols) {
            row.iter_mut().zip(b).for_each(|(r, b)| *r += b);
        }
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        let ng = self.ng(x) || self.ng(bias);
        Ok(self.push(t, Op::AddRow { x, bias }, ng))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let t = self.value(x).scale(factor);
        let ng = self.ng(x);
        self.push(t, Op::Scale { x, factor }, ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let t = Tensor::from_fn(xv.shape(), |i| xv.data()[i].max(0.0));
        let ng = self.ng(x);
        self.push(t, Op::Relu { x }, ng)
    }

    /// Row-wise layer normalization over the last dimension.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::invalid("layer_norm eps must be positive"));
        }
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let cols = *xv.shape().last().unwrap();
        if gv.numel() != cols || bv.numel() != cols {
            return Err(Error::shape("layer_norm", xv.shape(), gv.shape()));
        }
        let (g, b) = (gv.data(), bv.data());
        let rows = xv.numel() / cols;
        let mut out = vec![0.0; xv.numel()];
        let mut rstd = Vec::with_capacity(rows);
        for (r, (xr, or)) in xv
            .data()
            .chunks(cols)
            .zip(out.chunks_mut(cols))
            .enumerate()
        {
            let mean = xr.iter().sum::<f64>() / cols as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + eps).sqrt();
            for j in 0..cols {
                or[j] = (xr[j] - mean) * rs * g[j] + b[j];
            }
            rstd.push(rs);
            debug_assert_eq!(rstd.len(), r + 1);
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(t, Op::LayerNorm { x, gain, bias, rstd }, ng))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let rank = xv.rank();
        if axis >= rank {
            return Err(Error::Axis { axis, rank });
        }
        let shape = xv.shape();
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = xv.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[at(j)] /= sum;
                }
            }
        }
        let t = Tensor::new(shape.to_vec(), out)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Softmax { x, axis }, ng))
    }

    /// Gathers rows of `table`; gradients scatter-add back into those rows.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (size, dim) = (tv.rows(), tv.cols());
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= size {
                return Err(Error::IdRange { id, size });
            }
            data.extend_from_slice(tv.row(id));
        }
        if ids.is_empty() {
            return Err(Error::invalid("embedding lookup of zero ids"));
        }
        let t = Tensor::new(vec![ids.len(), dim], data)?;
        let ng = self.ng(table);
        Ok(self.push(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let t = Tensor::concat(&values, axis)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            t,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, ng)
    }

    /// Multi-head scaled dot-product attention over a packed batch.
    ///
    /// `q` is `(batch·q_len)×d`, `k` and `v` are `(batch·k_len)×d`. When
    /// given, `dropout` multiplies the attention probabilities elementwise and
    /// must hold `batch·heads·q_len·k_len` entries.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        spec: AttentionSpec,
        dropout: Option<Vec<f64>>,
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        let AttentionSpec {
            batch,
            q_len,
            k_len,
            heads,
            ..
        } = spec;
        if qv.rows() != batch * q_len || kv.rows() != batch * k_len || kv.shape() != vv.shape()
        {
            return Err(Error::shape("attention", qv.shape(), kv.shape()));
        }
        if kv.cols() != d || heads == 0 || d % heads != 0 || spec.key_lengths.len() != batch {
            return Err(Error::invalid("attention head/width configuration"));
        }
        let plen = batch * heads * q_len * k_len;
        if let Some(m) = &dropout {
            if m.len() != plen {
                return Err(Error::invalid("dropout mask size"));
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut probs = vec![0.0; plen];
        let mut out = vec![0.0; batch * q_len * d];
        let mut scores = vec![0.0; k_len];
        for b in 0..batch {
            let klen = spec.key_lengths[b].min(k_len);
            for h in 0..heads {
                let off = h * dh;
                for i in 0..q_len {
                    let limit = if spec.causal { klen.min(i + 1) } else { klen };
                    let qrow = &qd[(b * q_len + i) * d + off..][..dh];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..limit {
                        let krow = &kd[(b * k_len + j) * d + off..][..dh];
                        let s = dot(qrow, krow) * scale;
                        scores[j] = s;
                        max = max.max(s);
                    }
                    let pbase = ((b * heads + h) * q_len + i) * k_len;
                    let prow = &mut probs[pbase..pbase + k_len];
                    let mut sum = 0.0;
                    for j in 0..limit {
                        let e = (scores[j] - max).exp();
                        prow[j] = e;
                        sum += e;
                    }
                    for p in prow[..limit].iter_mut() {
                        *p /= sum;
                    }
                    let orow = &mut out[(b * q_len + i) * d + off..][..dh];
                    for j in 0..limit {
                        let mut p = prow[j];
                        if let Some(m) = &dropout {
                            p *= m[pbase + j];
                        }
                        if p != 0.0 {
                            let vrow = &vd[(b * k_len + j) * d + off..][..dh];
                            orow.iter_mut().zip(vrow).for_each(|(o, v)| *o += p * v);
                        }
                    }
                }
            }
        }
        let t = Tensor::new(vec![batch * q_len, d], out)?;
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
                dropout,
            },
            ng,
        ))
    }

    /// Mean over non-pad rows of `(1−ε)·NLL(target) + ε·mean_v NLL(v)`.
    ///
    /// Returns the scalar loss and the number of non-pad targets; an all-pad
    /// batch yields loss 0 and count 0.
    pub fn label_smoothed_nll(
        &mut self,
        logits: Var,
        targets: &[usize],
        epsilon: f64,
        pad_id: usize,
    ) -> Result<(Var, usize)> {
        if !(0.0..1.0).contains(&epsilon) {
            return Err(Error::invalid(format!(
                "label smoothing epsilon {epsilon} outside [0, 1)"
            )));
        }
        let lv = self.value(logits);
        let (n, vocab) = (lv.rows(), lv.cols());
        if targets.len() != n {
            return Err(Error::shape("label_smoothed_nll", lv.shape(), &[targets.len()]));
        }
        let mut probs = vec![0.0; n * vocab];
        let mut total = 0.0;
        let mut count = 0;
        for (r, (&t, row)) in targets.iter().zip(lv.data().chunks(vocab)).enumerate() {
            if t == pad_id {
                continue;
            }
            if t >= vocab {
                return Err(Error::IdRange { id: t, size: vocab });
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            let nll_target = lse - row[t];
            let nll_mean = lse - row.iter().sum::<f64>() / vocab as f64;
            total += (1.0 - epsilon) * nll_target + epsilon * nll_mean;
            for (p, z) in probs[r * vocab..(r + 1) * vocab].iter_mut().zip(row) {
                *p = (z - lse).exp();
            }
            count += 1;
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let ng = self.ng(logits);
        let var = self.push(
            Tensor::scalar(loss),
            Op::LabelSmoothedNll {
                logits,
                targets: targets.to_vec(),
                epsilon,
                pad_id,
                count,
                probs,
            },
            ng,
        );
        Ok((var, count))
    }

    /// Adjoints of `sum(output)` with respect to every recorded value that
    /// needs a gradient.
    pub fn backward(&self, output: Var) -> Gradients {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[output.0].needs_grad {
            return Gradients { grads };
        }
        grads[output.0] = Some(vec![1.0; self.nodes[output.0].value.numel()]);
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Gradients { grads }
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, a_t, b_t } => {
                let (av, bv) = (self.value(a), self.value(b));
                let (m, n) = (node.value.shape()[0], node.value.shape()[1]);
                let k = if a_t { av.shape()[0] } else { av.shape()[1] };
                if let Some(ga) = self.acc(grads, a) {
                    match (a_t, b_t) {
                        // dA = dC·Bᵀ
                        (false, false) => gemm(m, n, k, g, false, bv.data(), true, ga, 1.0),
                        // dA = dC·B
                        (false, true) => gemm(m, n, k, g, false, bv.data(), false, ga, 1.0),
                        // dA(k×m) = B·dCᵀ
                        (true, false) => gemm(k, n, m, bv.data(), false, g, true, ga, 1.0),
                        (true, true) => unreachable!("matmul with both operands transposed"),
                    }
                }
                if let Some(gb) = self.acc(grads, b) {
                    match (a_t, b_t) {
                        // dB = Aᵀ·dC
                        (false, false) => gemm(k, m, n, av.data(), true, g, false, gb, 1.0),
                        // dB(n×k) = dCᵀ·A
                        (false, true) => gemm(n, m, k, g, true, av.data(), false, gb, 1.0),
                        // dB = A·dC
                        (true, false) => gemm(k, m, n, av.data(), false, g, false, gb, 1.0),
                        (true, true) => unreachable!("matmul with both operands transposed"),
                    }
                }
            }
            &Op::Add { a, b } => {
                for v in [a, b] {
                    if let Some(gv) = self.acc(grads, v) {
                        gv.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            &Op::Mul { a, b } => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                if let Some(ga) = self.acc(grads, a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                }
                if let Some(gb) = self.acc(grads, b) {
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
            }
            &Op::AddRow { x, bias } => {
                let cols = self.value(bias).numel();
                if let Some(gx) = self.acc(grads, x) {
                    gx.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = self.acc(grads, bias) {
                    for row in g.chunks(cols) {
                        gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                }
            }
            &Op::Scale { x, factor } => {
                if let Some(gx) = self.acc(grads, x) {
                    gx.iter_mut().zip(g).for_each(|(x, y)| *x += factor * y);
                }
            }
            &Op::Relu { x } => {
                let xv = self.value(x).data();
                if let Some(gx) = self.acc(grads, x) {
                    for i in 0..g.len() {
                        if xv[i] > 0.0 {
                            gx[i] += g[i];
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                rstd,
            } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let xv = self.value(x).data();
                let gv = self.value(gain).data();
                let cols = gv.len();
                let rows = xv.len() / cols;
                let mut xhat = vec![0.0; cols];
                let mut dxhat = vec![0.0; cols];
                let mut dgain = vec![0.0; cols];
                let mut dbias = vec![0.0; cols];
                let mut dx = vec![0.0; xv.len()];
                for r in 0..rows {
                    let xr = &xv[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let mean = xr.iter().sum::<f64>() / cols as f64;
                    let rs = rstd[r];
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..cols {
                        xhat[j] = (xr[j] - mean) * rs;
                        dxhat[j] = gr[j] * gv[j];
                        dgain[j] += gr[j] * xhat[j];
                        dbias[j] += gr[j];
                        m1 += dxhat[j];
                        m2 += dxhat[j] * xhat[j];
                    }
                    m1 /= cols as f64;
                    m2 /= cols as f64;
                    for j in 0..cols {
                        dx[r * cols + j] = rs * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                for (v, d) in [(x, dx), (gain, dgain), (bias, dbias)] {
                    if let Some(gv) = self.acc(grads, v) {
                        gv.iter_mut().zip(&d).for_each(|(a, b)| *a += b);
                    }
                }
            }
            &Op::Softmax { x, axis } => {
                let y = node.value.data();
                let shape = node.value.shape();
                let outer: usize = shape[..axis].iter().product();
                let len = shape[axis];
                let inner: usize = shape[axis + 1..].iter().product();
                if let Some(gx) = self.acc(grads, x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + i;
                            let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..len {
                                gx[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let dim = self.value(*table).cols();
                if let Some(gt) = self.acc(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        let src = &g[r * dim..(r + 1) * dim];
                        gt[id * dim..(id + 1) * dim]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let full = shape[*axis] * inner;
                let mut start = 0;
                for &p in parts {
                    let block = self.value(p).shape()[*axis] * inner;
                    if let Some(gp) = self.acc(grads, p) {
                        for o in 0..outer {
                            let src = &g[o * full + start..o * full + start + block];
                            gp[o * block..(o + 1) * block]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(a, b)| *a += b);
                        }
                    }
                    start += block;
                }
            }
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
                dropout,
            } => self.attention_backward(*q, *k, *v, spec, probs, dropout.as_deref(), g, grads),
            Op::LabelSmoothedNll {
                logits,
                targets,
                epsilon,
                pad_id,
                count,
                probs,
            } => {
                if *count == 0 {
                    return;
                }
                let vocab = self.value(*logits).cols();
                let scale = g[0] / *count as f64;
                let smooth = epsilon / vocab as f64;
                if let Some(gl) = self.acc(grads, *logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        if t == *pad_id {
                            continue;
                        }
                        let base = r * vocab;
                        for j in 0..vocab {
                            let mut d = probs[base + j] - smooth;
                            if j == t {
                                d -= 1.0 - epsilon;
                            }
                            gl[base + j] += scale * d;
                        }
                    }
                }
            }
            &Op::Sum { x } => {
                if let Some(gx) = self.acc(grads, x) {
                    gx.iter_mut().for_each(|a| *a += g[0]);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        spec: &AttentionSpec,
        probs: &[f64],
        dropout: Option<&[f64]>,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let d = self.value(q).cols();
        let (batch, q_len, k_len, heads) = (spec.batch, spec.q_len, spec.k_len, spec.heads);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = vec![0.0; qd.len()];
        let mut dk = vec![0.0; kd.len()];
        let mut dv = vec![0.0; vd.len()];
        let mut dp = vec![0.0; k_len];
        for b in 0..batch {
            let klen = spec.key_lengths[b].min(k_len);
            for h in 0..heads {
                let off = h * dh;
                for i in 0..q_len {
                    let limit = if spec.causal { klen.min(i + 1) } else { klen };
                    let pbase = ((b * heads + h) * q_len + i) * k_len;
                    let grow = &g[(b * q_len + i) * d + off..][..dh];
                    let mut rowdot = 0.0;
                    for j in 0..limit {
                        let p = probs[pbase + j];
                        let mask = dropout.map_or(1.0, |m| m[pbase + j]);
                        let vrow = &vd[(b * k_len + j) * d + off..][..dh];
                        let dpd = dot(grow, vrow);
                        let pd = p * mask;
                        if pd != 0.0 {
                            let dvrow = &mut dv[(b * k_len + j) * d + off..][..dh];
                            dvrow.iter_mut().zip(grow).for_each(|(a, x)| *a += pd * x);
                        }
                        dp[j] = dpd * mask;
                        rowdot += dp[j] * p;
                    }
                    let qrow = &qd[(b * q_len + i) * d + off..][..dh];
                    for j in 0..limit {
                        let ds = probs[pbase + j] * (dp[j] - rowdot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let krow = &kd[(b * k_len + j) * d + off..][..dh];
                        let dqrow = &mut dq[(b * q_len + i) * d + off..][..dh];
                        dqrow.iter_mut().zip(krow).for_each(|(a, x)| *a += ds * x);
                        let dkrow = &mut dk[(b * k_len + j) * d + off..][..dh];
                        dkrow.iter_mut().zip(qrow).for_each(|(a, x)| *a += ds * x);
                    }
                }
            }
        }
        for (var, d) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(gv) = self.acc(grads, var) {
                gv.iter_mut().zip(&d).for_each(|(a, b)| *a += b);
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Largest relative disagreement between an analytic gradient and central
/// differences: `max_i |g_i − fd_i| / (|fd_i| + 1e-8)`.
///
/// `value_and_grad` returns the scalar value and its gradient at a point.
pub fn grad_check_flat<F>(value_and_grad: F, x: &[f64], step: f64) -> f64
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let (_, analytic) = value_and_grad(x);
    let mut probe = x.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let (up, _) = value_and_grad(&probe);
        probe[i] = x[i] - step;
        let (down, _) = value_and_grad(&probe);
        probe[i] = x[i];
        let fd = (up - down) / (2.0 * step);
        let err = (analytic[i] - fd).abs() / (fd.abs() + 1e-8);
        if err.is_nan() {
            return f64::INFINITY;
        }
        worst = worst.max(err);
    }
    worst
}

/// Gradient check of a tape-built function `f` at `x`; non-scalar outputs
/// are summed.
pub fn grad_check<'a, F>(f: F, x: &Tensor, step: f64) -> f64
where
    F: Fn(&mut Tape<'a>, Var) -> Result<Var>,
{
    let shape = x.shape().to_vec();
    let eval = |data: &[f64]| -> (f64, Vec<f64>) {
        let t = match Tensor::new(shape.clone(), data.to_vec()) {
            Ok(t) => t,
            Err(_) => return (f64::NAN, vec![f64::NAN; data.len()]),
        };
        let mut tape = Tape::new();
        let xv = tape.leaf(t, true);
        let out = match f(&mut tape, xv) {
            Ok(v) => v,
            Err(_) => return (f64::NAN, vec![f64::NAN; data.len()]),
        };
        let value = tape.value(out).data().iter().sum();
        let mut grads = tape.backward(out);
        let g = grads.take(xv).unwrap_or_else(|| vec![0.0; data.len()]);
        (value, g)
    };
    grad_check_flat(eval, x.data(), step)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Central differences of `f` at `x`, independent of the tape.
    fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
        let mut p = x.to_vec();
        (0..x.len())
            .map(|i| {
                p[i] = x[i] + step;
                let up = f(&p);
                p[i] = x[i] - step;
                let down = f(&p);
                p[i] = x[i];
                (up - down) / (2.0 * step)
            })
            .collect()
    }

    #[test]
    fn matmul_grad_is_ones_times_b_transpose() {
        let mut r = rng(7);
        let a = Tensor::randn(&[3, 4], 1.0, &mut r);
        let b = Tensor::randn(&[4, 2], 1.0, &mut r);
        let mut tape = Tape::new();
        let av = tape.param(&a);
        let bv = tape.constant_ref(&b);
        let c = tape.matmul(av, bv).unwrap();
        let s = tape.sum(c);
        let grads = tape.backward(s);
        let expected = Tensor::ones(&[3, 2]).matmul(&b.transpose().unwrap()).unwrap();
        let ga = grads.get(av).unwrap();
        for (x, y) in ga.iter().zip(expected.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        // and against finite differences
        let fd = central_diff(
            |x| {
                let a = Tensor::new(vec![3, 4], x.to_vec()).unwrap();
                a.matmul(&b).unwrap().data().iter().sum()
            },
            a.data(),
            1e-6,
        );
        for (x, y) in ga.iter().zip(&fd) {
            assert!((x - y).abs() < 1e-6, "{x} vs {y}");
        }
    }

    #[test]
    fn transposed_matmul_variants_check() {
        let mut r = rng(11);
        let a = Tensor::randn(&[3, 4], 1.0, &mut r);
        let b = Tensor::randn(&[5, 4], 1.0, &mut r);
        let w = Tensor::randn(&[3, 5], 1.0, &mut r);
        let err = grad_check(
            |t, x| {
                let bv = t.constant_ref(&b);
                let wv = t.constant_ref(&w);
                let c = t.matmul_nt(x, bv)?;
                let c = t.mul(c, wv)?;
                Ok(t.sum(c))
            },
            &a,
            1e-6,
        );
        assert!(err < 1e-6, "{err}");
        let err = grad_check(
            |t, x| {
                let av = t.constant_ref(&a);
                let wv = t.constant_ref(&w);
                let c = t.matmul_nt(av, x)?;
                let c = t.mul(c, wv)?;
                Ok(t.sum(c))
            },
            &b,
            1e-6,
        );
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let x = Tensor::filled(&[1, 4], 3.7);
        let mut tape = Tape::new();
        let xv = tape.constant_ref(&x);
        let y = tape.softmax(xv, 1).unwrap();
        assert_eq!(tape.value(y).data(), &[0.25; 4]);
    }

    #[test]
    fn softmax_non_last_axis_gradient() {
        let mut r = rng(3);
        let x = Tensor::randn(&[3, 4, 2], 1.0, &mut r);
        let w = Tensor::randn(&[3, 4, 2], 1.0, &mut r);
        let err = grad_check(
            |t, x| {
                let s = t.softmax(x, 1)?;
                let wv = t.constant_ref(&w);
                let p = t.mul(s, wv)?;
                Ok(t.sum(p))
            },
            &x,
            1e-5,
        );
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn softmax_axis_out_of_range() {
        let x = Tensor::zeros(&[2, 2]);
        let mut tape = Tape::new();
        let xv = tape.constant_ref(&x);
        assert!(matches!(tape.softmax(xv, 2), Err(Error::Axis { .. })));
    }

    #[test]
    fn layer_norm_fixed_point() {
        // zero mean, unit (population) variance
        let x = Tensor::new(vec![1, 4], vec![1.0, -1.0, 1.0, -1.0]).unwrap();
        let g = Tensor::ones(&[4]);
        let b = Tensor::zeros(&[4]);
        let mut tape = Tape::new();
        let (xv, gv, bv) = (tape.constant_ref(&x), tape.constant_ref(&g), tape.constant_ref(&b));
        let y = tape.layer_norm(xv, gv, bv, 1e-12).unwrap();
        assert!(tape.value(y).max_abs_diff(&x) < 1e-11);
    }

    #[test]
    fn layer_norm_gradients() {
        let mut r = rng(5);
        let x = Tensor::randn(&[3, 5], 1.0, &mut r);
        let g = Tensor::randn(&[5], 1.0, &mut r);
        let b = Tensor::randn(&[5], 1.0, &mut r);
        let w = Tensor::randn(&[3, 5], 1.0, &mut r);
        let run = |which: usize| {
            grad_check(
                |t, p| {
                    let xs = [&x, &g, &b];
                    let mut vars = xs.map(|v| t.constant_ref(v));
                    vars[which] = p;
                    let y = t.layer_norm(vars[0], vars[1], vars[2], 1e-5)?;
                    let wv = t.constant_ref(&w);
                    let y = t.mul(y, wv)?;
                    Ok(t.sum(y))
                },
                [&x, &g, &b][which],
                1e-5,
            )
        };
        for which in 0..3 {
            let err = run(which);
            assert!(err < 1e-5, "input {which}: {err}");
        }
    }

    #[test]
    fn layer_norm_rejects_nonpositive_eps() {
        let x = Tensor::zeros(&[1, 2]);
        let mut tape = Tape::new();
        let xv = tape.constant_ref(&x);
        assert!(tape.layer_norm(xv, xv, xv, 0.0).is_err());
    }

    #[test]
    fn relu_gradient_away_from_kink() {
        let x = Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.param(&x);
        let y = tape.relu(xv);
        let s = tape.sum(y);
        let g = tape.backward(s);
        assert_eq!(g.get(xv).unwrap(), &[0.0, 1.0]);
        let fd = central_diff(|p| p.iter().map(|v| v.max(0.0)).sum(), x.data(), 1e-6);
        assert!((fd[0] - 0.0).abs() < 1e-9 && (fd[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn embedding_accumulates_repeated_rows() {
        let table = Tensor::from_fn(&[3, 2], |i| i as f64);
        let mut tape = Tape::new();
        let tv = tape.param(&table);
        let e = tape.embedding(tv, &[2, 0, 2]).unwrap();
        assert_eq!(tape.value(e).data(), &[4.0, 5.0, 0.0, 1.0, 4.0, 5.0]);
        let s = tape.sum(e);
        let g = tape.backward(s);
        assert_eq!(g.get(tv).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn embedding_rejects_out_of_range_id() {
        let table = Tensor::zeros(&[3, 2]);
        let mut tape = Tape::new();
        let tv = tape.param(&table);
        assert!(matches!(
            tape.embedding(tv, &[3]),
            Err(Error::IdRange { id: 3, size: 3 })
        ));
    }

    #[test]
    fn concat_gradient_routes_to_parts() {
        let mut r = rng(9);
        let a = Tensor::randn(&[2, 3], 1.0, &mut r);
        let b = Tensor::randn(&[2, 2], 1.0, &mut r);
        let w = Tensor::randn(&[2, 5], 1.0, &mut r);
        let err = grad_check(
            |t, x| {
                let bv = t.constant_ref(&b);
                let c = t.concat(&[x, bv], 1)?;
                let wv = t.constant_ref(&w);
                let c = t.mul(c, wv)?;
                Ok(t.sum(c))
            },
            &a,
            1e-6,
        );
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn attention_gradients_all_inputs() {
        let mut r = rng(21);
        let spec = AttentionSpec {
            batch: 2,
            q_len: 3,
            k_len: 4,
            heads: 2,
            key_lengths: vec![4, 2],
            causal: false,
        };
        let q = Tensor::randn(&[6, 4], 1.0, &mut r);
        let k = Tensor::randn(&[8, 4], 1.0, &mut r);
        let v = Tensor::randn(&[8, 4], 1.0, &mut r);
        let w = Tensor::randn(&[6, 4], 1.0, &mut r);
        let mask: Vec<f64> = (0..2 * 2 * 3 * 4)
            .map(|i| if i % 5 == 0 { 0.0 } else { 1.25 })
            .collect();
        for causal in [false, true] {
            for with_mask in [false, true] {
                for which in 0..3 {
                    let mut spec = spec.clone();
                    spec.causal = causal;
                    if causal {
                        spec.k_len = 3;
                    }
                    let kk = k.slice_axis(0, 0, spec.batch * spec.k_len).unwrap();
                    let vv = v.slice_axis(0, 0, spec.batch * spec.k_len).unwrap();
                    let m = with_mask.then(|| {
                        mask[..spec.batch * spec.heads * spec.q_len * spec.k_len].to_vec()
                    });
                    let inputs = [&q, &kk, &vv];
                    let err = grad_check(
                        |t, p| {
                            let mut vars = inputs.map(|x| t.constant_ref(x));
                            vars[which] = p;
                            let o =
                                t.attention(vars[0], vars[1], vars[2], spec.clone(), m.clone())?;
                            let wv = t.constant_ref(&w);
                            let o = t.mul(o, wv)?;
                            Ok(t.sum(o))
                        },
                        inputs[which],
                        1e-5,
                    );
                    assert!(err < 1e-5, "causal={causal} mask={with_mask} input={which}: {err}");
                }
            }
        }
    }

    #[test]
    fn attention_ignores_padded_keys() {
        let spec = AttentionSpec {
            batch: 1,
            q_len: 1,
            k_len: 2,
            heads: 1,
            key_lengths: vec![1],
            causal: false,
        };
        let q = Tensor::ones(&[1, 2]);
        let k = Tensor::ones(&[2, 2]);
        let v = Tensor::new(vec![2, 2], vec![1.0, 2.0, 100.0, 100.0]).unwrap();
        let mut tape = Tape::new();
        let (qv, kv, vv) = (tape.constant_ref(&q), tape.constant_ref(&k), tape.constant_ref(&v));
        let o = tape.attention(qv, kv, vv, spec, None).unwrap();
        assert_eq!(tape.value(o).data(), &[1.0, 2.0]);
    }

    /// Direct per-class summation, independent of the tape's log-sum-exp path.
    fn smoothed_nll_oracle(logits: &[f64], target: usize, eps: f64) -> f64 {
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        let nll = |j: usize| -(logits[j].exp() / z).ln();
        let v = logits.len() as f64;
        (1.0 - eps) * nll(target) + eps * (0..logits.len()).map(nll).sum::<f64>() / v
    }

    #[test]
    fn label_smoothing_matches_direct_summation() {
        let logits = Tensor::new(vec![1, 3], vec![2.0, 0.0, 0.0]).unwrap();
        let mut tape = Tape::new();
        let lv = tape.constant_ref(&logits);
        let (loss, count) = tape.label_smoothed_nll(lv, &[0], 0.1, 99).unwrap();
        assert_eq!(count, 1);
        let expected = smoothed_nll_oracle(&[2.0, 0.0, 0.0], 0, 0.1);
        assert!((tape.value(loss).data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn label_smoothing_uniform_logits_give_ln_v() {
        let logits = Tensor::zeros(&[2, 4]);
        let mut tape = Tape::new();
        let lv = tape.constant_ref(&logits);
        let (loss, _) = tape.label_smoothed_nll(lv, &[1, 3], 0.1, 0).unwrap();
        assert!((tape.value(loss).data()[0] - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn zero_epsilon_is_cross_entropy() {
        let logits = Tensor::new(vec![1, 3], vec![0.5, -1.0, 2.0]).unwrap();
        let mut tape = Tape::new();
        let lv = tape.constant_ref(&logits);
        let (loss, _) = tape.label_smoothed_nll(lv, &[2], 0.0, 99).unwrap();
        let z: f64 = logits.data().iter().map(|l| l.exp()).sum();
        let ce = -(2f64.exp() / z).ln();
        assert!((tape.value(loss).data()[0] - ce).abs() < 1e-14);
    }

    #[test]
    fn label_smoothing_rejects_bad_epsilon() {
        let logits = Tensor::zeros(&[1, 3]);
        let mut tape = Tape::new();
        let lv = tape.constant_ref(&logits);
        assert!(tape.label_smoothed_nll(lv, &[0], 1.0, 9).is_err());
        assert!(tape.label_smoothed_nll(lv, &[0], -0.1, 9).is_err());
    }

    #[test]
    fn label_smoothing_excludes_pad_and_checks_gradient() {
        let mut r = rng(13);
        let logits = Tensor::randn(&[4, 5], 1.0, &mut r);
        let targets = [1, 0, 4, 0];
        let err = grad_check(
            |t, x| Ok(t.label_smoothed_nll(x, &targets, 0.1, 0)?.0),
            &logits,
            1e-5,
        );
        assert!(err < 1e-6, "{err}");
        let mut tape = Tape::new();
        let lv = tape.constant_ref(&logits);
        let (loss, count) = tape.label_smoothed_nll(lv, &targets, 0.1, 0).unwrap();
        assert_eq!(count, 2);
        let expected = (smoothed_nll_oracle(logits.row(0), 1, 0.1)
            + smoothed_nll_oracle(logits.row(2), 4, 0.1))
            / 2.0;
        assert!((tape.value(loss).data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn grad_check_quadratic() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.param(&x);
        let sq = tape.mul(xv, xv).unwrap();
        let s = tape.sum(sq);
        assert_eq!(tape.backward(s).get(xv).unwrap(), &[2.0, 4.0]);
        let err = grad_check(
            |t, x| {
                let sq = t.mul(x, x)?;
                Ok(t.sum(sq))
            },
            &x,
            1e-5,
        );
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn constant_function_has_exact_zero_gradient() {
        let x = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let c = Tensor::scalar(4.0);
        let mut tape = Tape::new();
        let xv = tape.param(&x);
        let cv = tape.constant_ref(&c);
        let zero = tape.scale(xv, 0.0);
        let s = tape.sum(zero);
        let out = tape.add(s, cv).unwrap();
        let g = tape.backward(out);
        assert!(g.get(xv).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_deterministic() {
        let mut r = rng(1);
        let a = Tensor::randn(&[5, 7], 1.0, &mut r);
        let b = Tensor::randn(&[7, 3], 1.0, &mut r);
        let run = || {
            let mut t = Tape::new();
            let (av, bv) = (t.constant_ref(&a), t.constant_ref(&b));
            let c = t.matmul(av, bv).unwrap();
            let s = t.softmax(c, 1).unwrap();
            t.value(s).clone()
        };
        assert!(run().bitwise_eq(&run()));
    }
}
