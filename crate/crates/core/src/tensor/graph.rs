use std::collections::HashMap;
use std::rc::Rc;

use super::kernels::{self, gemm};
use super::{Gradients, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Additive score used for disallowed attention entries.
const MASKED_SCORE: f64 = -1e30;

enum Op {
    Leaf,
    Param,
    MatMul {
        a: Var,
        b: Var,
        tb: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow {
        x: Var,
        bias: Var,
    },
    Scale(Var, f64),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    Transpose(Var),
    Softmax(Var),
    AddMask(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Relu(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    Attention {
        qkv: Var,
        heads: usize,
        visible: Rc<Vec<Vec<usize>>>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of recorded operations over a borrowed [`ParamStore`].
///
/// A graph is single-use: once [`Graph::backward`] has run, a second call
/// is rejected. Build a fresh graph for every step.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    backward_done: bool,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            backward_done: false,
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = match op {
            Op::Param => true,
            Op::Leaf => false,
            _ => inputs.iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Records a constant (no gradient).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, &[])
    }

    /// Records a parameter leaf; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(self.params.get(id).clone(), Op::Param, &[]);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, tb: bool) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (br, bc) = self.dims(b);
        let (bk, n) = if tb { (bc, br) } else { (br, bc) };
        if k != bk {
            let op = if tb { "matmul_t" } else { "matmul" };
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(a), false, self.data(b), tb, &mut out, 0.0);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMul { a, b, tb }, &[a, b]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        Tensor {
            shape: self.shape(a).to_vec(),
            data,
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a `1×c` row to every row of an `r×c` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, c) = self.dims(x);
        if self.dims(bias) != (1, c) {
            return Err(Error::shape("add_row", self.shape(x), self.shape(bias)));
        }
        let b = self.data(bias).to_vec();
        let mut t = self.value(x).clone();
        for row in t.data.chunks_mut(c) {
            row.iter_mut().zip(&b).for_each(|(v, bb)| *v += bb);
        }
        Ok(self.push(t, Op::AddRow { x, bias }, &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let mut t = self.value(x).clone();
        t.data.iter_mut().for_each(|v| *v *= s);
        self.push(t, Op::Scale(x, s), &[x])
    }

    /// Row gather; doubles as embedding lookup.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(x);
        if idx.is_empty() {
            return Err(Error::Invalid("gather_rows: empty index list".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::shape("gather_rows", self.shape(x), &[bad]));
        }
        let src = self.data(x);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let t = Tensor::new(vec![idx.len(), c], out)?;
        Ok(self.push(t, Op::GatherRows { x, idx: idx.to_vec() }, &[x]))
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::Invalid("concat_rows: no inputs".into()))?;
        let c = self.dims(first).1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &x in xs {
            let (r, cc) = self.dims(x);
            if cc != c {
                return Err(Error::shape("concat_rows", self.shape(first), self.shape(x)));
            }
            rows += r;
            out.extend_from_slice(self.data(x));
        }
        let t = Tensor::new(vec![rows, c], out)?;
        Ok(self.push(t, Op::ConcatRows(xs.to_vec()), xs))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if start >= end || end > r {
            return Err(Error::shape("slice_rows", self.shape(x), &[start, end]));
        }
        let t = Tensor::new(vec![end - start, c], self.data(x)[start * c..end * c].to_vec())?;
        Ok(self.push(t, Op::SliceRows { x, start }, &[x]))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if start >= end || end > c {
            return Err(Error::shape("slice_cols", self.shape(x), &[start, end]));
        }
        let src = self.data(x);
        let mut out = Vec::with_capacity(r * (end - start));
        for row in src.chunks(c) {
            out.extend_from_slice(&row[start..end]);
        }
        let t = Tensor::new(vec![r, end - start], out)?;
        Ok(self.push(t, Op::SliceCols { x, start }, &[x]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        let src = self.data(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let t = Tensor::new(vec![c, r], out)?;
        Ok(self.push(t, Op::Transpose(x), &[x]))
    }

    /// Row-wise, max-subtracted softmax.
    pub fn softmax(&mut self, x: Var) -> Var {
        let c = self.dims(x).1;
        let mut t = self.value(x).clone();
        t.data.chunks_mut(c).for_each(kernels::softmax_in_place);
        self.push(t, Op::Softmax(x), &[x])
    }

    /// Adds a large negative score wherever `allowed` is false.
    pub fn add_mask(&mut self, scores: Var, allowed: &[bool]) -> Result<Var> {
        if allowed.len() != self.value(scores).len() {
            return Err(Error::shape("add_mask", self.shape(scores), &[allowed.len()]));
        }
        let mut t = self.value(scores).clone();
        for (v, &ok) in t.data.iter_mut().zip(allowed) {
            if !ok {
                *v += MASKED_SCORE;
            }
        }
        Ok(self.push(t, Op::AddMask(scores), &[scores]))
    }

    /// Row-wise layer normalization with affine `gamma`/`beta` (`1×c`).
    ///
    /// Zero-variance rows normalize to exactly zero before the affine step.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.dims(x);
        for p in [gamma, beta] {
            if self.dims(p) != (1, c) {
                return Err(Error::shape("layer_norm", self.shape(x), self.shape(p)));
            }
        }
        let src = self.data(x);
        let g = self.data(gamma);
        let b = self.data(beta);
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            // shifted by the first element so a constant row has an exact mean
            let shift = row[0];
            let mean = shift + row.iter().map(|v| v - shift).sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let xh = (row[j] - mean) * rs;
                xhat[i * c + j] = xh;
                out[i * c + j] = xh * g[j] + b[j];
            }
        }
        let t = Tensor::new(vec![r, c], out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let mut t = self.value(x).clone();
        t.data.iter_mut().for_each(|v| *v = kernels::gelu(*v));
        self.push(t, Op::Gelu(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut t = self.value(x).clone();
        t.data.iter_mut().for_each(|v| *v = v.max(0.0));
        self.push(t, Op::Relu(x), &[x])
    }

    /// Mean cross-entropy of each logit row against its target class.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(logits);
        if targets.len() != r {
            return Err(Error::shape("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::shape("cross_entropy", self.shape(logits), &[bad]));
        }
        let mut probs = self.data(logits).to_vec();
        let mut loss = 0.0;
        for (row, &t) in probs.chunks_mut(c).zip(targets) {
            loss += kernels::log_sum_exp(row) - row[t];
            kernels::softmax_in_place(row);
        }
        let t = Tensor::scalar(loss / r as f64);
        Ok(self.push(
            t,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Fused multi-head scaled dot-product attention.
    ///
    /// `qkv` is `T×3d` holding queries, keys and values side by side; head
    /// `h` uses columns `h·d/heads..(h+1)·d/heads` of each block.
    /// `visible[i]` lists the key positions query `i` may attend to and
    /// must be nonempty. Output is `T×d`.
    pub fn attention(&mut self, qkv: Var, heads: usize, visible: Rc<Vec<Vec<usize>>>) -> Result<Var> {
        let (t, c3) = self.dims(qkv);
        if c3 % 3 != 0 || heads == 0 || (c3 / 3) % heads != 0 {
            return Err(Error::shape("attention", self.shape(qkv), &[heads]));
        }
        if visible.len() != t {
            return Err(Error::shape("attention", self.shape(qkv), &[visible.len()]));
        }
        if visible.iter().any(|v| v.is_empty() || v.iter().any(|&j| j >= t)) {
            return Err(Error::Invalid(
                "attention: every query needs at least one in-range visible key".into(),
            ));
        }
        let d = c3 / 3;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let src = self.data(qkv);
        let total: usize = visible.iter().map(Vec::len).sum();
        let mut probs = vec![0.0; total * heads];
        let mut out = vec![0.0; t * d];
        let mut scores = Vec::new();
        for h in 0..heads {
            let mut off = h * total;
            for (i, vis) in visible.iter().enumerate() {
                let q = &src[i * c3 + h * dh..i * c3 + (h + 1) * dh];
                scores.clear();
                scores.extend(vis.iter().map(|&j| {
                    let k = &src[j * c3 + d + h * dh..j * c3 + d + (h + 1) * dh];
                    kernels::dot(q, k) * scale
                }));
                kernels::softmax_in_place(&mut scores);
                let o = &mut out[i * d + h * dh..i * d + (h + 1) * dh];
                for (&j, &p) in vis.iter().zip(&scores) {
                    let v = &src[j * c3 + 2 * d + h * dh..j * c3 + 2 * d + (h + 1) * dh];
                    o.iter_mut().zip(v).for_each(|(a, b)| *a += p * b);
                }
                probs[off..off + vis.len()].copy_from_slice(&scores);
                off += vis.len();
            }
        }
        let value = Tensor::new(vec![t, d], out)?;
        Ok(self.push(
            value,
            Op::Attention {
                qkv,
                heads,
                visible,
                probs,
            },
            &[qkv],
        ))
    }

    /// Reverse-mode pass from a `1×1` loss.
    ///
    /// Returns one gradient per parameter of the store; parameters the loss
    /// does not depend on receive zeros.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.backward_done {
            return Err(Error::Backward(
                "backward already ran on this graph; build a new graph".into(),
            ));
        }
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::Backward(format!(
                "loss must be a scalar, got shape {:?}",
                lt.shape()
            )));
        }
        if !lt.item().is_finite() {
            return Err(Error::Numerical(format!("loss is {}", lt.item())));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Param = self.nodes[i].op {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }

        let out = self
            .params
            .iter()
            .map(|(id, _, t)| {
                let g = self.param_vars.get(&id).and_then(|v| grads[v.0].take());
                match g {
                    Some(data) => Tensor {
                        shape: t.shape().to_vec(),
                        data,
                    },
                    None => Tensor::zeros(t.shape()),
                }
            })
            .collect();
        Ok(Gradients::from_vec(out))
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let needs = |v: Var| nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        match &nodes[i].op {
            Op::Leaf | Op::Param => {}
            Op::MatMul { a, b, tb } => {
                let (m, k) = self.dims(*a);
                let n = nodes[i].value.cols();
                let (ad, bd) = (self.data(*a), self.data(*b));
                if needs(*a) {
                    // dA = G · op(B)ᵀ
                    acc(*a, &mut |s| gemm(m, n, k, g, false, bd, !*tb, s, 1.0));
                }
                if needs(*b) {
                    if *tb {
                        // B is n×k: dB = Gᵀ · A
                        acc(*b, &mut |s| gemm(n, m, k, g, true, ad, false, s, 1.0));
                    } else {
                        // dB = Aᵀ · G
                        acc(*b, &mut |s| gemm(k, m, n, ad, true, g, false, s, 1.0));
                    }
                }
            }
            Op::Add(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                acc(*a, &mut |s| {
                    for j in 0..s.len() {
                        s[j] += g[j] * bd[j];
                    }
                });
                acc(*b, &mut |s| {
                    for j in 0..s.len() {
                        s[j] += g[j] * ad[j];
                    }
                });
            }
            Op::AddRow { x, bias } => {
                acc(*x, &mut |s| add_into(s, g));
                let c = self.dims(*x).1;
                acc(*bias, &mut |s| {
                    for row in g.chunks(c) {
                        add_into(s, row);
                    }
                });
            }
            Op::Scale(x, k) => {
                acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(a, b)| *a += k * b));
            }
            Op::GatherRows { x, idx } => {
                let c = self.dims(*x).1;
                acc(*x, &mut |s| {
                    for (r, &src) in idx.iter().enumerate() {
                        add_into(&mut s[src * c..(src + 1) * c], &g[r * c..(r + 1) * c]);
                    }
                });
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &x in xs {
                    let n = nodes[x.0].value.len();
                    acc(x, &mut |s| add_into(s, &g[off..off + n]));
                    off += n;
                }
            }
            Op::SliceRows { x, start } => {
                let c = self.dims(*x).1;
                acc(*x, &mut |s| add_into(&mut s[start * c..start * c + g.len()], g));
            }
            Op::SliceCols { x, start } => {
                let c = self.dims(*x).1;
                let w = nodes[i].value.cols();
                acc(*x, &mut |s| {
                    for (r, gr) in g.chunks(w).enumerate() {
                        add_into(&mut s[r * c + start..r * c + start + w], gr);
                    }
                });
            }
            Op::Transpose(x) => {
                let (r, c) = self.dims(*x);
                acc(*x, &mut |s| {
                    for a in 0..r {
                        for b in 0..c {
                            s[a * c + b] += g[b * r + a];
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let y = nodes[i].value.data();
                let c = nodes[i].value.cols();
                acc(*x, &mut |s| {
                    for ((sr, yr), gr) in s.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                        let inner = kernels::dot(yr, gr);
                        for j in 0..c {
                            sr[j] += yr[j] * (gr[j] - inner);
                        }
                    }
                });
            }
            Op::AddMask(x) => acc(*x, &mut |s| add_into(s, g)),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = self.dims(*x).1;
                let gm = self.data(*gamma);
                acc(*gamma, &mut |s| {
                    for (gr, xr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            s[j] += gr[j] * xr[j];
                        }
                    }
                });
                acc(*beta, &mut |s| {
                    for gr in g.chunks(c) {
                        add_into(s, gr);
                    }
                });
                acc(*x, &mut |s| {
                    let mut dxh = vec![0.0; c];
                    for (r, ((sr, gr), xr)) in s.chunks_mut(c).zip(g.chunks(c)).zip(xhat.chunks(c)).enumerate() {
                        for j in 0..c {
                            dxh[j] = gr[j] * gm[j];
                        }
                        let m1 = dxh.iter().sum::<f64>() / c as f64;
                        let m2 = kernels::dot(&dxh, xr) / c as f64;
                        for j in 0..c {
                            sr[j] += rstd[r] * (dxh[j] - m1 - xr[j] * m2);
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xd = self.data(*x);
                acc(*x, &mut |s| {
                    for j in 0..s.len() {
                        s[j] += g[j] * kernels::gelu_grad(xd[j]);
                    }
                });
            }
            Op::Relu(x) => {
                let xd = self.data(*x);
                acc(*x, &mut |s| {
                    for j in 0..s.len() {
                        if xd[j] > 0.0 {
                            s[j] += g[j];
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let c = self.dims(*logits).1;
                let k = g[0] / targets.len() as f64;
                acc(*logits, &mut |s| {
                    for (r, &t) in targets.iter().enumerate() {
                        let row = &mut s[r * c..(r + 1) * c];
                        for j in 0..c {
                            row[j] += k * probs[r * c + j];
                        }
                        row[t] -= k;
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |s| s.iter_mut().for_each(|v| *v += g[0])),
            Op::Mean(x) => {
                let n = nodes[x.0].value.len() as f64;
                acc(*x, &mut |s| s.iter_mut().for_each(|v| *v += g[0] / n));
            }
            Op::Attention {
                qkv,
                heads,
                visible,
                probs,
            } => {
                let src = self.data(*qkv);
                let c3 = self.dims(*qkv).1;
                let d = c3 / 3;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let total: usize = visible.iter().map(Vec::len).sum();
                acc(*qkv, &mut |s| {
                    let mut dp = Vec::new();
                    for h in 0..*heads {
                        let mut off = h * total;
                        for (qi, vis) in visible.iter().enumerate() {
                            let p = &probs[off..off + vis.len()];
                            off += vis.len();
                            let go = &g[qi * d + h * dh..qi * d + (h + 1) * dh];
                            dp.clear();
                            for (&j, &pj) in vis.iter().zip(p) {
                                let vo = j * c3 + 2 * d + h * dh;
                                dp.push(kernels::dot(go, &src[vo..vo + dh]));
                                let dv = &mut s[vo..vo + dh];
                                dv.iter_mut().zip(go).for_each(|(a, b)| *a += pj * b);
                            }
                            let inner = kernels::dot(p, &dp);
                            let qo = qi * c3 + h * dh;
                            for (n, &j) in vis.iter().enumerate() {
                                let ds = p[n] * (dp[n] - inner) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let ko = j * c3 + d + h * dh;
                                for e in 0..dh {
                                    s[qo + e] += ds * src[ko + e];
                                    s[ko + e] += ds * src[qo + e];
                                }
                            }
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}
