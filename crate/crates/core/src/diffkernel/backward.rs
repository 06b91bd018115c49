use super::graph::{Binary, Graph, Op, Unary, Var};
use super::kernels::{self, gemm};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Gradients of one scalar with respect to every node that needed them.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of each parameter that took part in the graph.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().filter_map(|&(id, node)| self.grads[node].as_ref().map(|g| (id, g)))
    }

    /// Adds parameter gradients into the store's accumulators.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (id, g) in self.params() {
            store.accumulate_grad(id, g);
        }
    }
}

fn slot<'a>(grads: &'a mut [Option<Tensor>], g: &Graph<'_>, v: Var) -> Option<&'a mut Tensor> {
    if !g.nodes[v.0].needs_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(g.nodes[v.0].value.shape())))
}

/// Adds `src` reduced through the broadcast index map into `dst`.
fn reduce_into(dst: &mut [f64], idx: &Option<Vec<u32>>, src: impl Iterator<Item = f64>) {
    match idx {
        None => dst.iter_mut().zip(src).for_each(|(d, s)| *d += s),
        Some(idx) => idx.iter().zip(src).for_each(|(&i, s)| dst[i as usize] += s),
    }
}

fn at(v: &[f64], idx: &Option<Vec<u32>>, e: usize) -> f64 {
    match idx {
        None => v[e],
        Some(idx) => v[idx[e] as usize],
    }
}

impl Graph<'_> {
    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let n = self.nodes.len();
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Shape {
                op: "backward",
                detail: format!("loss must be a scalar, got {:?}", self.nodes[loss.0].value.shape()),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), 1.0));
        }
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            self.backward_node(i, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, node)| match node.op {
                Op::Param(id) => Some((id, i)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }

    fn backward_node(&self, i: usize, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let g = gout.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Binary { kind, a, b, ia, ib } => {
                let (av, bv) = (val(*a), val(*b));
                match kind {
                    Binary::Add | Binary::Sub => {
                        if let Some(ga) = slot(grads, self, *a) {
                            reduce_into(ga.data_mut(), ia, g.iter().copied());
                        }
                        let sign = if *kind == Binary::Add { 1.0 } else { -1.0 };
                        if let Some(gb) = slot(grads, self, *b) {
                            reduce_into(gb.data_mut(), ib, g.iter().map(|v| sign * v));
                        }
                    }
                    Binary::Mul => {
                        if let Some(ga) = slot(grads, self, *a) {
                            reduce_into(ga.data_mut(), ia, g.iter().enumerate().map(|(e, v)| v * at(bv, ib, e)));
                        }
                        if let Some(gb) = slot(grads, self, *b) {
                            reduce_into(gb.data_mut(), ib, g.iter().enumerate().map(|(e, v)| v * at(av, ia, e)));
                        }
                    }
                    Binary::Div => {
                        if let Some(ga) = slot(grads, self, *a) {
                            reduce_into(ga.data_mut(), ia, g.iter().enumerate().map(|(e, v)| v / at(bv, ib, e)));
                        }
                        if let Some(gb) = slot(grads, self, *b) {
                            let out = node.value.data();
                            reduce_into(
                                gb.data_mut(),
                                ib,
                                g.iter().enumerate().map(|(e, v)| -v * out[e] / at(bv, ib, e)),
                            );
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = slot(grads, self, *a) {
                    ga.data_mut().iter_mut().zip(g).for_each(|(d, v)| *d += c * v);
                }
            }
            Op::Unary(a, kind) => {
                let x = val(*a);
                let y = node.value.data();
                if let Some(ga) = slot(grads, self, *a) {
                    let d = ga.data_mut();
                    for e in 0..d.len() {
                        let local = match kind {
                            Unary::Exp => y[e],
                            Unary::Log => 1.0 / x[e],
                            Unary::Sqrt => 0.5 / y[e],
                            Unary::Square => 2.0 * x[e],
                            Unary::Silu => {
                                let s = kernels::sigmoid(x[e]);
                                s * (1.0 + x[e] * (1.0 - s))
                            }
                            Unary::Gelu => kernels::gelu_grad(x[e]),
                            Unary::Softplus => kernels::sigmoid(x[e]),
                            Unary::Tanh => 1.0 - y[e] * y[e],
                        };
                        d[e] += g[e] * local;
                    }
                }
            }
            Op::MatMul(a, b, p) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (p.m, p.k, p.n);
                if let Some(ga) = slot(grads, self, *a) {
                    let d = ga.data_mut();
                    if !p.b_batched {
                        // dA = dC · Bᵀ over stacked rows
                        gemm(p.batch * m, n, k, g, n as isize, 1, bv, 1, n as isize, 1.0, d);
                    } else {
                        for bi in 0..p.batch {
                            let a_off = if p.a_batched { bi * m * k } else { 0 };
                            gemm(
                                m,
                                n,
                                k,
                                &g[bi * m * n..(bi + 1) * m * n],
                                n as isize,
                                1,
                                &bv[bi * k * n..(bi + 1) * k * n],
                                1,
                                n as isize,
                                1.0,
                                &mut d[a_off..a_off + m * k],
                            );
                        }
                    }
                }
                if let Some(gb) = slot(grads, self, *b) {
                    let d = gb.data_mut();
                    if !p.b_batched {
                        // dB = Aᵀ · dC summed over the batch
                        let rows = p.batch * m;
                        gemm(k, rows, n, av, 1, k as isize, g, n as isize, 1, 1.0, d);
                    } else {
                        for bi in 0..p.batch {
                            let a_off = if p.a_batched { bi * m * k } else { 0 };
                            gemm(
                                k,
                                m,
                                n,
                                &av[a_off..a_off + m * k],
                                1,
                                k as isize,
                                &g[bi * m * n..(bi + 1) * m * n],
                                n as isize,
                                1,
                                1.0,
                                &mut d[bi * k * n..(bi + 1) * k * n],
                            );
                        }
                    }
                }
            }
            Op::Conv1d { x, w, stride, pad, cols } => {
                let sx = self.nodes[x.0].value.shape();
                let sw = self.nodes[w.0].value.shape();
                let (b, t, cin) = (sx[0], sx[1], sx[2]);
                let (kw, cout) = (sw[0], sw[2]);
                let to = node.value.shape()[1];
                let kc = kw * cin;
                if let Some(gw) = slot(grads, self, *w) {
                    gemm(kc, b * to, cout, cols, 1, kc as isize, g, cout as isize, 1, 1.0, gw.data_mut());
                }
                if let Some(gx) = slot(grads, self, *x) {
                    let mut dcols = vec![0.0; b * to * kc];
                    let wv = val(*w);
                    gemm(b * to, cout, kc, g, cout as isize, 1, wv, 1, cout as isize, 0.0, &mut dcols);
                    let d = gx.data_mut();
                    for bi in 0..b {
                        for o in 0..to {
                            let row = &dcols[(bi * to + o) * kc..(bi * to + o + 1) * kc];
                            for j in 0..kw {
                                let ti = (o * stride + j) as isize - *pad as isize;
                                if ti >= 0 && (ti as usize) < t {
                                    let dst = &mut d[(bi * t + ti as usize) * cin..(bi * t + ti as usize + 1) * cin];
                                    for (dd, s) in dst.iter_mut().zip(&row[j * cin..(j + 1) * cin]) {
                                        *dd += s;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, xhat, rstd } => {
                if let Some(gx) = slot(grads, self, *x) {
                    let d = *node.value.shape().last().unwrap();
                    let dx = gx.data_mut();
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mean_g = gr.iter().sum::<f64>() / d as f64;
                        let mean_gx = gr.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            dx[r * d + j] += rs * (gr[j] - mean_g - xh[j] * mean_gx);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                if let Some(gx) = slot(grads, self, *x) {
                    let d = *node.value.shape().last().unwrap();
                    let y = node.value.data();
                    let dx = gx.data_mut();
                    for ((yr, gr), dr) in y.chunks(d).zip(g.chunks(d)).zip(dx.chunks_mut(d)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                if let Some(gx) = slot(grads, self, *x) {
                    let d = *node.value.shape().last().unwrap();
                    let y = node.value.data();
                    let dx = gx.data_mut();
                    for ((yr, gr), dr) in y.chunks(d).zip(g.chunks(d)).zip(dx.chunks_mut(d)) {
                        let gsum: f64 = gr.iter().sum();
                        for j in 0..d {
                            dr[j] += gr[j] - yr[j].exp() * gsum;
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                if let Some(gx) = slot(grads, self, *x) {
                    let s = g[0];
                    gx.data_mut().iter_mut().for_each(|d| *d += s);
                }
            }
            Op::SumAxis(x, axis) => {
                if let Some(gx) = slot(grads, self, *x) {
                    let shape = self.nodes[x.0].value.shape().to_vec();
                    let (outer, len, inner) = kernels::axis_split(&shape, *axis);
                    let d = gx.data_mut();
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for l in 0..len {
                            let dst = &mut d[(o * len + l) * inner..(o * len + l + 1) * inner];
                            dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                        }
                    }
                }
            }
            Op::Concat(parts, axis) => {
                let shape = node.value.shape();
                let (outer, total, inner) = kernels::axis_split(shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.shape()[*axis];
                    if let Some(gp) = slot(grads, self, p) {
                        let d = gp.data_mut();
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            let dst = &mut d[o * len * inner..(o + 1) * len * inner];
                            dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                if let Some(gx) = slot(grads, self, *x) {
                    let full_shape = self.nodes[x.0].value.shape().to_vec();
                    let (outer, full, inner) = kernels::axis_split(&full_shape, *axis);
                    let len = node.value.shape()[*axis];
                    let d = gx.data_mut();
                    for o in 0..outer {
                        let dst = &mut d[(o * full + start) * inner..(o * full + start + len) * inner];
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Permute(x, perm) => {
                if let Some(gx) = slot(grads, self, *x) {
                    let in_shape = self.nodes[x.0].value.shape().to_vec();
                    let idx = kernels::permute_index(&in_shape, perm);
                    let d = gx.data_mut();
                    for (e, &src) in idx.iter().enumerate() {
                        d[src] += g[e];
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = slot(grads, self, *x) {
                    gx.data_mut().iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
            Op::Embedding { table, ids } => {
                if let Some(gt) = slot(grads, self, *table) {
                    let d = *node.value.shape().last().unwrap();
                    let dt = gt.data_mut();
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut dt[id * d..(id + 1) * d];
                        dst.iter_mut().zip(&g[r * d..(r + 1) * d]).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Upsample2(x) => {
                if let Some(gx) = slot(grads, self, *x) {
                    let s = self.nodes[x.0].value.shape();
                    let (b, t, c) = (s[0], s[1], s[2]);
                    let d = gx.data_mut();
                    for bi in 0..b {
                        for ti in 0..t {
                            let dst = &mut d[(bi * t + ti) * c..(bi * t + ti + 1) * c];
                            let r0 = (bi * 2 * t + 2 * ti) * c;
                            for j in 0..c {
                                dst[j] += g[r0 + j] + g[r0 + c + j];
                            }
                        }
                    }
                }
            }
        }
    }
}
