//! Define-by-run computation graph with reverse-mode gradients.
//!
//! Every op appends a node holding its forward value. Parameters are pulled
//! from a [`ParamStore`] on first use and cached per graph, so a parameter
//! used twice accumulates both contributions. A graph lives for exactly one
//! forward/backward pass.

use super::kernels::{self, gemm};
use super::params::{ParamId, ParamStore};
use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Exp,
    Log,
    Sqrt,
    Square,
    Silu,
    Gelu,
    Softplus,
    Tanh,
}

/// Which keys of an attention score tensor are visible.
///
/// `keep` has `groups * keys` entries; rows of the scores tensor are split
/// into `groups` consecutive runs (one per batch element).
#[derive(Clone, Debug)]
pub struct KeyMask {
    pub keep: Vec<bool>,
    pub groups: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
pub(crate) struct MatMulPlan {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub a_batched: bool,
    pub b_batched: bool,
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Param(ParamId),
    Binary {
        kind: Binary,
        a: Var,
        b: Var,
        ia: Option<Vec<u32>>,
        ib: Option<Vec<u32>>,
    },
    Scale(Var, f64),
    Unary(Var, Unary),
    MatMul(Var, Var, MatMulPlan),
    Conv1d {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
        cols: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    SumAll(Var),
    SumAxis(Var, usize),
    Concat(Vec<Var>, usize),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Upsample2(Var),
}

pub(crate) struct Node {
    pub value: Tensor,
    pub op: Op,
    pub needs_grad: bool,
}

pub struct Graph<'s> {
    store: Option<&'s ParamStore>,
    pub(crate) nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    track: bool,
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

impl<'s> Graph<'s> {
    /// Graph that records gradients for trainable parameters of `store`.
    pub fn new(store: &'s ParamStore) -> Self {
        Graph { store: Some(store), nodes: Vec::new(), param_vars: vec![None; store.len()], track: true }
    }

    /// Forward-only graph; nothing is recorded for backward.
    pub fn inference(store: &'s ParamStore) -> Self {
        Graph { store: Some(store), nodes: Vec::new(), param_vars: vec![None; store.len()], track: false }
    }

    /// Graph with no parameter store (inputs only).
    pub fn detached() -> Graph<'static> {
        Graph { store: None, nodes: Vec::new(), param_vars: Vec::new(), track: true }
    }

    pub fn is_tracking(&self) -> bool {
        self.track
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let needs_grad = needs_grad && self.track;
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    // ---- leaves ----

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that receives a gradient (for tests and probes).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let store = self.store.expect("graph has no parameter store");
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Param(id), p.trainable);
        self.param_vars[id.0] = Some(v);
        v
    }

    // ---- elementwise ----

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = kernels::broadcast_shape(&sa, &sb)?;
        let ia = kernels::broadcast_index(&out_shape, &sa);
        let ib = kernels::broadcast_index(&out_shape, &sb);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let n = numel(&out_shape);
        let f: fn(f64, f64) -> f64 = match kind {
            Binary::Add => |x: f64, y: f64| x + y,
            Binary::Sub => |x: f64, y: f64| x - y,
            Binary::Mul => |x: f64, y: f64| x * y,
            Binary::Div => |x: f64, y: f64| x / y,
        };
        let data: Vec<f64> = match (&ia, &ib) {
            (None, None) => av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
            (None, Some(ib)) => av.iter().zip(ib).map(|(&x, &j)| f(x, bv[j as usize])).collect(),
            (Some(ia), None) => ia.iter().zip(bv).map(|(&i, &y)| f(av[i as usize], y)).collect(),
            (Some(ia), Some(ib)) => (0..n).map(|e| f(av[ia[e] as usize], bv[ib[e] as usize])).collect(),
        };
        let ng = self.ng(a) || self.ng(b);
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.push(value, Op::Binary { kind, a, b, ia, ib }, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|v| v * c);
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, c), ng)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// `a + c` for a scalar constant.
    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let s = self.scalar(c);
        self.add(a, s)
    }

    pub fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let f: fn(f64) -> f64 = match kind {
            Unary::Exp => f64::exp,
            Unary::Log => f64::ln,
            Unary::Sqrt => f64::sqrt,
            Unary::Square => |x| x * x,
            Unary::Silu => |x| x * kernels::sigmoid(x),
            Unary::Gelu => kernels::gelu,
            Unary::Softplus => kernels::softplus,
            Unary::Tanh => f64::tanh,
        };
        let value = self.value(a).map(f);
        let ng = self.ng(a);
        self.push(value, Op::Unary(a, kind), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Log)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sqrt)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Silu)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Gelu)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }

    // ---- linear algebra ----

    /// Matrix product over the last two axes. Leading (batch) axes must match,
    /// or one operand must be rank 2 and is shared across the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}: operands need rank >= 2")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let ba = &sa[..sa.len() - 2];
        let bb = &sb[..sb.len() - 2];
        if k != k2 {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}: inner dims differ")));
        }
        let (batch_shape, a_batched, b_batched) = if ba == bb {
            (ba.to_vec(), !ba.is_empty(), !bb.is_empty())
        } else if bb.is_empty() {
            (ba.to_vec(), true, false)
        } else if ba.is_empty() {
            (bb.to_vec(), false, true)
        } else {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}: batch dims differ")));
        };
        let batch: usize = batch_shape.iter().product();
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; batch * m * n];
        if !b_batched {
            // one GEMM over the stacked rows of a
            let rows = batch * m;
            gemm(rows, k, n, av, k as isize, 1, bv, n as isize, 1, 0.0, &mut out);
        } else {
            for i in 0..batch {
                let a_off = if a_batched { i * m * k } else { 0 };
                gemm(
                    m,
                    k,
                    n,
                    &av[a_off..a_off + m * k],
                    k as isize,
                    1,
                    &bv[i * k * n..(i + 1) * k * n],
                    n as isize,
                    1,
                    0.0,
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        let mut shape = batch_shape;
        shape.extend([m, n]);
        let ng = self.ng(a) || self.ng(b);
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::MatMul(a, b, MatMulPlan { batch, m, k, n, a_batched, b_batched }), ng))
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(shape_err("transpose_last2", format!("rank {r}")));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err("permute", format!("{perm:?} on {shape:?}")));
        }
        let idx = kernels::permute_index(&shape, perm);
        let src = self.value(a).data();
        let data = idx.iter().map(|&i| src[i]).collect();
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let ng = self.ng(a);
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.push(value, Op::Permute(a, perm.to_vec()), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let ng = self.ng(a);
        Ok(self.push(value, Op::Reshape(a), ng))
    }

    /// 1-D convolution over channels-last input `x: [B, T, Cin]` with weight
    /// `w: [K, Cin, Cout]`, zero padding `pad` on both sides.
    pub fn conv1d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 3 || sw.len() != 3 || sx[2] != sw[1] || stride == 0 {
            return Err(shape_err("conv1d", format!("x {sx:?}, w {sw:?}, stride {stride}")));
        }
        let (b, t, cin) = (sx[0], sx[1], sx[2]);
        let (kw, cout) = (sw[0], sw[2]);
        if t + 2 * pad < kw {
            return Err(shape_err("conv1d", format!("input length {t} shorter than kernel {kw}")));
        }
        let to = (t + 2 * pad - kw) / stride + 1;
        let kc = kw * cin;
        let xv = self.value(x).data();
        let mut cols = vec![0.0; b * to * kc];
        for bi in 0..b {
            for o in 0..to {
                let row = &mut cols[(bi * to + o) * kc..(bi * to + o + 1) * kc];
                for j in 0..kw {
                    let ti = (o * stride + j) as isize - pad as isize;
                    if ti >= 0 && (ti as usize) < t {
                        let src = &xv[(bi * t + ti as usize) * cin..(bi * t + ti as usize + 1) * cin];
                        row[j * cin..(j + 1) * cin].copy_from_slice(src);
                    }
                }
            }
        }
        let mut out = vec![0.0; b * to * cout];
        gemm(b * to, kc, cout, &cols, kc as isize, 1, self.value(w).data(), cout as isize, 1, 0.0, &mut out);
        let ng = self.ng(x) || self.ng(w);
        let value = Tensor::new(&[b, to, cout], out)?;
        let cols = if ng && self.track { cols } else { Vec::new() };
        Ok(self.push(value, Op::Conv1d { x, w, stride, pad, cols }, ng))
    }

    // ---- normalization / softmax ----

    /// Normalizes over the last axis (no affine; eps 1e-5).
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| shape_err("layer_norm", "scalar input".into()))?;
        let xv = self.value(x).data();
        let rows = xv.len() / d;
        let mut out = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + EPS).sqrt();
            rstd[r] = rs;
            for (o, v) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
        }
        let ng = self.ng(x);
        let xhat = if ng { out.clone() } else { Vec::new() };
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::LayerNorm { x, xhat, rstd }, ng))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.masked_softmax(x, None)
    }

    /// Softmax over the last axis where hidden keys get exactly zero weight.
    /// A row with no visible key is all zeros.
    pub fn masked_softmax(&mut self, x: Var, mask: Option<&KeyMask>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| shape_err("softmax", "scalar input".into()))?;
        let xv = self.value(x).data();
        let rows = xv.len() / d;
        let rows_per_group = match mask {
            Some(m) => {
                if m.groups == 0 || m.keep.len() != m.groups * d || rows % m.groups != 0 {
                    return Err(shape_err(
                        "masked_softmax",
                        format!("mask of {} keys x {} groups vs scores {shape:?}", m.keep.len(), m.groups),
                    ));
                }
                rows / m.groups
            }
            None => rows.max(1),
        };
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let keep = mask.map(|m| &m.keep[(r / rows_per_group) * d..(r / rows_per_group + 1) * d]);
            let visible = |j: usize| keep.is_none_or(|k| k[j]);
            let mut max = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if visible(j) && v > max {
                    max = v;
                }
            }
            if max == f64::NEG_INFINITY {
                continue;
            }
            let o = &mut out[r * d..(r + 1) * d];
            let mut sum = 0.0;
            for j in 0..d {
                if visible(j) {
                    let e = (row[j] - max).exp();
                    o[j] = e;
                    sum += e;
                }
            }
            for v in o.iter_mut() {
                *v /= sum;
            }
        }
        let ng = self.ng(x);
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::Softmax(x), ng))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| shape_err("log_softmax", "scalar input".into()))?;
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        for (row, o) in xv.chunks(d).zip(out.chunks_mut(d)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (oo, v) in o.iter_mut().zip(row) {
                *oo = v - lse;
            }
        }
        let ng = self.ng(x);
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::LogSoftmax(x), ng))
    }

    // ---- reductions ----

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(shape_err("sum_axis", format!("axis {axis} of {shape:?}")));
        }
        let (outer, len, inner) = kernels::axis_split(&shape, axis);
        let xv = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &xv[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let ng = self.ng(x);
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.push(value, Op::SumAxis(x, axis), ng))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let len = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| shape_err("mean_axis", format!("axis {axis}")))?;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / len as f64))
    }

    // ---- structure ----

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| shape_err("concat", "no inputs".into()))?).to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat", format!("axis {axis} of {first:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i]) {
                return Err(shape_err("concat", format!("{first:?} vs {s:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = kernels::axis_split(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                let src = self.value(p).data();
                out.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let ng = parts.iter().any(|&p| self.ng(p));
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::Concat(parts.to_vec(), axis), ng))
    }

    /// Elements `start..start + len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(shape_err("slice", format!("{start}..{} on axis {axis} of {shape:?}", start + len)));
        }
        let (outer, full, inner) = kernels::axis_split(&shape, axis);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&xv[(o * full + start) * inner..(o * full + start + len) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let ng = self.ng(x);
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.push(value, Op::Slice { x, axis, start }, ng))
    }

    /// Rows of `table: [V, D]` gathered by `ids`; output shape `[..ids_shape, D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], ids_shape: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 || numel(ids_shape) != ids.len() {
            return Err(shape_err("embedding", format!("table {st:?}, ids shape {ids_shape:?}")));
        }
        let (v, d) = (st[0], st[1]);
        if let Some(bad) = ids.iter().find(|&&i| i >= v) {
            return Err(shape_err("embedding", format!("id {bad} out of vocabulary {v}")));
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let mut shape = ids_shape.to_vec();
        shape.push(d);
        let ng = self.ng(table);
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::Embedding { table, ids: ids.to_vec() }, ng))
    }

    /// Nearest-neighbour x2 upsampling along the time axis of `[B, T, C]`.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(shape_err("upsample2", format!("{s:?}")));
        }
        let (b, t, c) = (s[0], s[1], s[2]);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(b * 2 * t * c);
        for bi in 0..b {
            for ti in 0..t {
                let row = &xv[(bi * t + ti) * c..(bi * t + ti + 1) * c];
                out.extend_from_slice(row);
                out.extend_from_slice(row);
            }
        }
        let ng = self.ng(x);
        let value = Tensor::new(&[b, 2 * t, c], out)?;
        Ok(self.push(value, Op::Upsample2(x), ng))
    }
}
