//! Parameterized building blocks shared by the denoiser, anchors and MoCLIP.

use rand::Rng;

use crate::diffkernel::{Graph, KeyMask, ParamBuilder, ParamId, Tensor, Var};
use crate::error::{Error, Result};

/// `y = x W + b` over the last axis; `W` is `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let mut s = pb.sub(name);
        let w = s.kaiming("w", &[d_in, d_out], d_in)?;
        let b = Some(s.zeros("b", &[d_out])?);
        Ok(Linear { w, b, d_in, d_out })
    }

    /// Weight and bias start at zero.
    pub fn zeroed<R: Rng>(pb: &mut ParamBuilder<'_, R>, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let mut s = pb.sub(name);
        let w = s.zeros("w", &[d_in, d_out])?;
        let b = Some(s.zeros("b", &[d_out])?);
        Ok(Linear { w, b, d_in, d_out })
    }

    pub fn without_bias<R: Rng>(pb: &mut ParamBuilder<'_, R>, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let w = pb.sub(name).kaiming("w", &[d_in, d_out], d_in)?;
        Ok(Linear { w, b: None, d_in, d_out })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.last() != Some(&self.d_in) {
            return Err(Error::Shape { op: "linear", detail: format!("input {shape:?}, expected last dim {}", self.d_in) });
        }
        let flat = if shape.len() == 1 { g.reshape(x, &[1, self.d_in])? } else { x };
        let w = g.param(self.w);
        let mut y = g.matmul(flat, w)?;
        if let Some(b) = self.b {
            let b = g.param(b);
            y = g.add(y, b)?;
        }
        if shape.len() == 1 {
            y = g.reshape(y, &[self.d_out])?;
        }
        Ok(y)
    }
}

/// Layer norm over the last axis with learned scale and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, name: &str, d: usize) -> Result<Self> {
        let mut s = pb.sub(name);
        Ok(LayerNorm { gamma: s.ones("gamma", &[d])?, beta: s.zeros("beta", &[d])? })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let n = g.layer_norm(x)?;
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        let y = g.mul(n, gamma)?;
        g.add(y, beta)
    }
}

/// Channels-last 1-D convolution with "same" padding for odd kernels.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv1d {
    pub fn new<R: Rng>(
        pb: &mut ParamBuilder<'_, R>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        let mut s = pb.sub(name);
        let w = s.kaiming("w", &[kernel, c_in, c_out], kernel * c_in)?;
        let b = s.zeros("b", &[c_out])?;
        Ok(Conv1d { w, b, kernel, stride })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let y = g.conv1d(x, w, self.stride, self.kernel / 2)?;
        let b = g.param(self.b);
        g.add(y, b)
    }
}

/// Multi-head attention; queries from `x`, keys and values from `ctx`.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub d_model: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(
        pb: &mut ParamBuilder<'_, R>,
        name: &str,
        d_model: usize,
        d_ctx: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::invalid(format!("{heads} heads do not divide width {d_model}")));
        }
        let mut s = pb.sub(name);
        Ok(MultiHeadAttention {
            q: Linear::new(&mut s, "q", d_model, d_model)?,
            k: Linear::without_bias(&mut s, "k", d_ctx, d_model)?,
            v: Linear::new(&mut s, "v", d_ctx, d_model)?,
            o: Linear::new(&mut s, "o", d_model, d_model)?,
            heads,
            d_model,
        })
    }

    fn split_heads(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let (b, t) = (s[0], s[1]);
        let x = g.reshape(x, &[b, t, self.heads, self.d_model / self.heads])?;
        g.permute(x, &[0, 2, 1, 3])
    }

    /// `x: [B, Tq, D]`, `ctx: [B, Tk, Dc]`; `mask` hides keys per batch element.
    pub fn forward(&self, g: &mut Graph, x: Var, ctx: Var, mask: Option<&KeyMask>) -> Result<Var> {
        let sx = g.shape(x).to_vec();
        let sc = g.shape(ctx).to_vec();
        if sx.len() != 3 || sc.len() != 3 || sx[0] != sc[0] {
            return Err(Error::Shape { op: "attention", detail: format!("queries {sx:?}, context {sc:?}") });
        }
        let (b, tq) = (sx[0], sx[1]);
        let dh = self.d_model / self.heads;
        let q = self.q.forward(g, x)?;
        let k = self.k.forward(g, ctx)?;
        let v = self.v.forward(g, ctx)?;
        let q = self.split_heads(g, q)?;
        let k = self.split_heads(g, k)?;
        let v = self.split_heads(g, v)?;
        let kt = g.transpose_last2(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = g.masked_softmax(scores, mask)?;
        let y = g.matmul(attn, v)?;
        let y = g.permute(y, &[0, 2, 1, 3])?;
        let y = g.reshape(y, &[b, tq, self.d_model])?;
        self.o.forward(g, y)
    }
}

/// Two-layer perceptron with a GELU between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, name: &str, d_in: usize, hidden: usize, d_out: usize) -> Result<Self> {
        let mut s = pb.sub(name);
        Ok(Mlp { fc1: Linear::new(&mut s, "fc1", d_in, hidden)?, fc2: Linear::new(&mut s, "fc2", hidden, d_out)? })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }
}

/// Pre-norm transformer encoder layer with masked self-attention.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl TransformerLayer {
    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, name: &str, d: usize, heads: usize) -> Result<Self> {
        let mut s = pb.sub(name);
        Ok(TransformerLayer {
            ln1: LayerNorm::new(&mut s, "ln1", d)?,
            attn: MultiHeadAttention::new(&mut s, "attn", d, d, heads)?,
            ln2: LayerNorm::new(&mut s, "ln2", d)?,
            mlp: Mlp::new(&mut s, "mlp", d, 2 * d, d)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var, mask: Option<&KeyMask>) -> Result<Var> {
        let h = self.ln1.forward(g, x)?;
        let a = self.attn.forward(g, h, h, mask)?;
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, x)?;
        let m = self.mlp.forward(g, h)?;
        g.add(x, m)
    }
}

/// Sinusoidal positional table `[len, d]`: first half sines, second half cosines.
pub fn positional_encoding(len: usize, d: usize) -> Tensor {
    let half = d / 2;
    let mut data = vec![0.0; len * d];
    for p in 0..len {
        for i in 0..half {
            let freq = 10000f64.powf(-(i as f64) / half.max(1) as f64);
            let a = p as f64 * freq;
            data[p * d + i] = a.sin();
            data[p * d + half + i] = a.cos();
        }
    }
    Tensor::new(&[len, d], data).expect("shape matches")
}

/// Mean over the time axis of `[B, T, D]` counting only frames with `keep`.
pub fn masked_mean_time(g: &mut Graph, x: Var, keep: &[bool]) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 || keep.len() != s[0] * s[1] {
        return Err(Error::Shape { op: "masked_mean_time", detail: format!("{s:?} with {} mask entries", keep.len()) });
    }
    let (b, t) = (s[0], s[1]);
    let mut w = vec![0.0; b * t];
    for bi in 0..b {
        let n = keep[bi * t..(bi + 1) * t].iter().filter(|&&k| k).count();
        if n == 0 {
            return Err(Error::invalid("masked mean over an all-masked sequence"));
        }
        for ti in 0..t {
            if keep[bi * t + ti] {
                w[bi * t + ti] = 1.0 / n as f64;
            }
        }
    }
    let w = g.constant(Tensor::new(&[b, 1, t], w)?);
    let y = g.matmul(w, x)?;
    g.reshape(y, &[b, s[2]])
}

/// Rows scaled to unit L2 norm (last axis).
pub fn l2_normalize(g: &mut Graph, x: Var) -> Result<Var> {
    let sq = g.square(x);
    let r = g.shape(x).len();
    let ss = g.sum_axis(sq, r - 1)?;
    let ss = g.add_scalar(ss, 1e-20)?;
    let n = g.sqrt(ss);
    let mut shape = g.shape(n).to_vec();
    shape.push(1);
    let n = g.reshape(n, &shape)?;
    g.div(x, n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffkernel::{grad_check, GradCheckOptions, ParamStore};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn transformer_layer_gradients() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layer = TransformerLayer::new(&mut ParamBuilder::new(&mut store, &mut rng), "tl", 4, 2).unwrap();
        let x: Vec<f64> = (0..2 * 3 * 4).map(|i| ((i * 7 % 11) as f64 - 5.0) / 5.0).collect();
        let x = Tensor::new(&[2, 3, 4], x).unwrap();
        let mask = KeyMask { keep: vec![true, true, false, true, true, true], groups: 2 };
        let opts = GradCheckOptions { eps: 1e-5, tol: 1e-5, ..Default::default() };
        let report = grad_check(&mut store, &opts, |g| {
            let xv = g.constant(x.clone());
            let y = layer.forward(g, xv, Some(&mask))?;
            let y = g.square(y);
            let y = masked_mean_time(g, y, &[true, true, false, true, false, true])?;
            Ok(g.mean(y))
        })
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn masked_keys_do_not_leak() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mha = MultiHeadAttention::new(&mut ParamBuilder::new(&mut store, &mut rng), "a", 4, 3, 2).unwrap();
        let q = Tensor::full(&[1, 2, 4], 0.3);
        let run = |last: f64| {
            let mut g = Graph::inference(&store);
            let qv = g.constant(q.clone());
            let c = g.constant(Tensor::new(&[1, 2, 3], vec![0.1, 0.2, 0.3, last, last, last]).unwrap());
            let mask = KeyMask { keep: vec![true, false], groups: 1 };
            let y = mha.forward(&mut g, qv, c, Some(&mask)).unwrap();
            g.value(y).clone()
        };
        assert_eq!(run(1.0), run(-7.0));
    }

    #[test]
    fn normalized_rows_have_unit_norm() {
        let mut g = Graph::detached();
        let x = g.constant(Tensor::new(&[2, 2], vec![3.0, 4.0, 0.5, 0.0]).unwrap());
        let y = l2_normalize(&mut g, x).unwrap();
        let v = g.value(y).data();
        assert!((v[0] - 0.6).abs() < 1e-12 && (v[2] - 1.0).abs() < 1e-12, "{v:?}");
    }
}
