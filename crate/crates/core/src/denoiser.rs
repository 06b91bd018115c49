//! Conditional 1-D UNet over motion frames: sinusoidal timestep embedding,
//! three down blocks, a middle block and a mirrored up path, with
//! cross-attention to text tokens in every block and a tappable feature.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffkernel::{Graph, KeyMask, LayerPath, ParamBuilder, ParamId, Tensor, Var};
use crate::error::{Error, Result};
use crate::layers::{Conv1d, LayerNorm, Linear, MultiHeadAttention};

pub const DEPTH: usize = 3;

/// Where the anchor feature `h` is read from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TapSite {
    Down1,
    Down2,
    Down3,
    Bottleneck,
}

impl TapSite {
    /// Number of stride-2 stages before the tap.
    pub fn depth(self) -> usize {
        match self {
            TapSite::Down1 => 1,
            TapSite::Down2 => 2,
            TapSite::Down3 | TapSite::Bottleneck => 3,
        }
    }
}

impl fmt::Display for TapSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TapSite::Down1 => "down1",
            TapSite::Down2 => "down2",
            TapSite::Down3 => "down3",
            TapSite::Bottleneck => "bottleneck",
        })
    }
}

impl FromStr for TapSite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "down1" => Ok(TapSite::Down1),
            "down2" => Ok(TapSite::Down2),
            "down3" => Ok(TapSite::Down3),
            "bottleneck" => Ok(TapSite::Bottleneck),
            _ => Err(Error::invalid(format!("unknown tap site `{s}` (down1|down2|down3|bottleneck)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub d_motion: usize,
    pub base_channels: usize,
    pub multipliers: [usize; DEPTH],
    pub heads: usize,
    pub d_emb: usize,
    pub d_c: usize,
    pub tap: TapSite,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            d_motion: 56,
            base_channels: 32,
            multipliers: [1, 2, 2],
            heads: 2,
            d_emb: 64,
            d_c: 64,
            tap: TapSite::Down3,
        }
    }
}

impl DenoiserConfig {
    pub fn channels(&self) -> [usize; DEPTH] {
        self.multipliers.map(|m| m * self.base_channels)
    }

    /// Channel count of the tap feature.
    pub fn tap_channels(&self) -> usize {
        self.channels()[self.tap.depth() - 1]
    }

    /// Frame count of the tap feature for an `n`-frame input.
    pub fn tap_frames(&self, n: usize) -> usize {
        n.div_ceil(1 << DEPTH) * (1 << DEPTH) >> self.tap.depth()
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_emb == 0 || self.d_emb % 2 != 0 {
            return Err(Error::invalid(format!("d_emb must be even and positive, got {}", self.d_emb)));
        }
        if self.d_motion == 0 || self.base_channels == 0 || self.multipliers.contains(&0) || self.d_c == 0 {
            return Err(Error::invalid("denoiser widths must be positive"));
        }
        for c in self.channels() {
            if self.heads == 0 || c % self.heads != 0 {
                return Err(Error::invalid(format!("{} heads do not divide {c} channels", self.heads)));
            }
        }
        Ok(())
    }
}

/// Sinusoidal embedding: `sin(t w_i)` then `cos(t w_i)`, `w_i = 10000^(-i / (d/2))`.
pub fn timestep_embed(t: usize, d_emb: usize) -> Result<Vec<f64>> {
    if d_emb == 0 || d_emb % 2 != 0 {
        return Err(Error::invalid(format!("timestep embedding width must be even, got {d_emb}")));
    }
    let half = d_emb / 2;
    let mut out = vec![0.0; d_emb];
    for i in 0..half {
        let a = t as f64 * 10000f64.powf(-(i as f64) / half as f64);
        out[i] = a.sin();
        out[half + i] = a.cos();
    }
    Ok(out)
}

/// `[B, d_emb]` embeddings for a batch of timesteps.
pub fn timestep_embed_batch(ts: &[usize], d_emb: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(ts.len() * d_emb);
    for &t in ts {
        data.extend(timestep_embed(t, d_emb)?);
    }
    Tensor::new(&[ts.len(), d_emb], data)
}

#[derive(Clone, Debug)]
struct ResBlock {
    ln1: LayerNorm,
    conv1: Conv1d,
    time: Linear,
    ln2: LayerNorm,
    conv2: Conv1d,
    skip: Option<Conv1d>,
}

impl ResBlock {
    fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, c_in: usize, c_out: usize, d_t: usize) -> Result<Self> {
        let mut s = pb.sub("res");
        Ok(ResBlock {
            ln1: LayerNorm::new(&mut s, "ln1", c_in)?,
            conv1: Conv1d::new(&mut s, "conv1", c_in, c_out, 3, 1)?,
            time: Linear::new(&mut s, "time", d_t, c_out)?,
            ln2: LayerNorm::new(&mut s, "ln2", c_out)?,
            conv2: Conv1d::new(&mut s, "conv2", c_out, c_out, 3, 1)?,
            skip: if c_in != c_out { Some(Conv1d::new(&mut s, "skip", c_in, c_out, 1, 1)?) } else { None },
        })
    }

    /// `temb: [B, 1, d_t]`.
    fn forward(&self, g: &mut Graph, x: Var, temb: Var) -> Result<Var> {
        let h = self.ln1.forward(g, x)?;
        let h = g.silu(h);
        let h = self.conv1.forward(g, h)?;
        let tt = self.time.forward(g, temb)?;
        let h = g.add(h, tt)?;
        let h = self.ln2.forward(g, h)?;
        let h = g.silu(h);
        let h = self.conv2.forward(g, h)?;
        let s = match &self.skip {
            Some(c) => c.forward(g, x)?,
            None => x,
        };
        g.add(s, h)
    }
}

#[derive(Clone, Debug)]
struct CrossAttn {
    ln: LayerNorm,
    attn: MultiHeadAttention,
}

impl CrossAttn {
    fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, c: usize, d_c: usize, heads: usize) -> Result<Self> {
        let mut s = pb.sub("xattn");
        Ok(CrossAttn { ln: LayerNorm::new(&mut s, "ln", c)?, attn: MultiHeadAttention::new(&mut s, "mha", c, d_c, heads)? })
    }

    fn forward(&self, g: &mut Graph, x: Var, ctx: Var, mask: &KeyMask) -> Result<Var> {
        let h = self.ln.forward(g, x)?;
        let a = self.attn.forward(g, h, ctx, Some(mask))?;
        g.add(x, a)
    }
}

#[derive(Clone, Debug)]
struct Block {
    res: ResBlock,
    xattn: CrossAttn,
}

impl Block {
    fn forward(&self, g: &mut Graph, x: Var, temb: Var, ctx: Var, mask: &KeyMask) -> Result<Var> {
        let h = self.res.forward(g, x, temb)?;
        self.xattn.forward(g, h, ctx, mask)
    }
}

/// Conditioning context for one batch: per-token text features `[B, L, d_c]`
/// and which tokens are real. The learned null token is always prepended.
#[derive(Clone, Debug)]
pub struct TextContext {
    pub tokens: Tensor,
    pub keep: Vec<bool>,
}

impl TextContext {
    /// Context with every text token hidden, leaving only the null token.
    pub fn null(batch: usize, d_c: usize) -> Self {
        TextContext { tokens: Tensor::zeros(&[batch, 1, d_c]), keep: vec![false; batch] }
    }

    pub fn batch(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Hides every token of batch row `b`.
    pub fn drop_row(&mut self, b: usize) {
        let l = self.len();
        self.keep[b * l..(b + 1) * l].fill(false);
    }
}

pub struct DenoiseOutput {
    /// Predicted noise, same shape as the input.
    pub eps: Var,
    /// Tap feature `[B, T, C]`.
    pub tap: Var,
}

#[derive(Clone, Debug)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    time1: Linear,
    time2: Linear,
    null_token: ParamId,
    input: Conv1d,
    down: Vec<(Block, Conv1d)>,
    mid: Block,
    up: Vec<(Conv1d, Block)>,
    out_ln: LayerNorm,
    output: Conv1d,
}

impl Denoiser {
    /// Registers parameters under `pb`'s prefix. Blocks are tagged
    /// `in`, `down1..3`, `mid`, `up3..1`, `out` for the gradient probe.
    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let ch = config.channels();
        let d_t = config.d_emb;
        let time1 = Linear::new(pb, "time.fc1", config.d_emb, d_t)?;
        let time2 = Linear::new(pb, "time.fc2", d_t, d_t)?;
        let null_token = pb.normal("null_token", &[config.d_c], 1.0)?;
        let input = Conv1d::new(&mut pb.tagged("in", LayerPath::Down, 0), "conv", config.d_motion, ch[0], 3, 1)?;
        let mut down = Vec::with_capacity(DEPTH);
        let mut c_prev = ch[0];
        for (i, &c) in ch.iter().enumerate() {
            let mut s = pb.tagged(&format!("down{}", i + 1), LayerPath::Down, i + 1);
            let res = ResBlock::new(&mut s, c_prev, c, d_t)?;
            let xattn = CrossAttn::new(&mut s, c, config.d_c, config.heads)?;
            let ds = Conv1d::new(&mut s, "downsample", c, c, 3, 2)?;
            down.push((Block { res, xattn }, ds));
            c_prev = c;
        }
        let mid = {
            let mut s = pb.tagged("mid", LayerPath::Mid, 0);
            Block { res: ResBlock::new(&mut s, c_prev, c_prev, d_t)?, xattn: CrossAttn::new(&mut s, c_prev, config.d_c, config.heads)? }
        };
        let mut up = Vec::with_capacity(DEPTH);
        for i in (0..DEPTH).rev() {
            let mut s = pb.tagged(&format!("up{}", i + 1), LayerPath::Up, i + 1);
            let us = Conv1d::new(&mut s, "upsample", c_prev, c_prev, 3, 1)?;
            let res = ResBlock::new(&mut s, c_prev + ch[i], ch[i], d_t)?;
            let xattn = CrossAttn::new(&mut s, ch[i], config.d_c, config.heads)?;
            up.push((us, Block { res, xattn }));
            c_prev = ch[i];
        }
        let mut s = pb.tagged("out", LayerPath::Up, 0);
        let out_ln = LayerNorm::new(&mut s, "ln", ch[0])?;
        let output = Conv1d::new(&mut s, "conv", ch[0], config.d_motion, 3, 1)?;
        Ok(Denoiser { config, time1, time2, null_token, input, down, mid, up, out_ln, output })
    }

    /// `x_t: [B, N, d_m]`, one timestep per batch row. `N` is zero-padded on
    /// the right to a multiple of 8 and the output cropped back.
    pub fn forward(&self, g: &mut Graph, x_t: Var, ts: &[usize], text: &TextContext) -> Result<DenoiseOutput> {
        let sx = g.shape(x_t).to_vec();
        let cfg = &self.config;
        if sx.len() != 3 || sx[2] != cfg.d_motion || sx[0] != ts.len() || sx[1] == 0 {
            return Err(Error::Shape {
                op: "denoise",
                detail: format!("x_t {sx:?} with {} timesteps, expected [B, N, {}]", ts.len(), cfg.d_motion),
            });
        }
        let (b, n) = (sx[0], sx[1]);
        let ts_shape = text.tokens.shape();
        if ts_shape.len() != 3 || ts_shape[0] != b || ts_shape[2] != cfg.d_c || text.keep.len() != b * ts_shape[1] {
            return Err(Error::Shape {
                op: "denoise",
                detail: format!("text context {ts_shape:?} with {} mask entries for batch {b}", text.keep.len()),
            });
        }

        // timestep MLP -> [B, 1, d_t]
        let e = g.constant(timestep_embed_batch(ts, cfg.d_emb)?);
        let e = self.time1.forward(g, e)?;
        let e = g.silu(e);
        let e = self.time2.forward(g, e)?;
        let temb = g.reshape(e, &[b, 1, cfg.d_emb])?;

        // context = [null, tokens...]
        let l = ts_shape[1];
        let ones = g.constant(Tensor::full(&[b, 1, 1], 1.0));
        let null = g.param(self.null_token);
        let null = g.mul(ones, null)?;
        let toks = g.constant(text.tokens.clone());
        let ctx = g.concat(&[null, toks], 1)?;
        let mut keep = Vec::with_capacity(b * (l + 1));
        for bi in 0..b {
            keep.push(true);
            keep.extend_from_slice(&text.keep[bi * l..(bi + 1) * l]);
        }
        let mask = KeyMask { keep, groups: b };

        let padded = n.div_ceil(1 << DEPTH) * (1 << DEPTH);
        let mut x = x_t;
        if padded != n {
            let z = g.constant(Tensor::zeros(&[b, padded - n, cfg.d_motion]));
            x = g.concat(&[x_t, z], 1)?;
        }

        let mut h = self.input.forward(g, x)?;
        let mut skips = Vec::with_capacity(DEPTH);
        let mut tap = None;
        for (i, (block, ds)) in self.down.iter().enumerate() {
            h = block.forward(g, h, temb, ctx, &mask)?;
            skips.push(h);
            h = ds.forward(g, h)?;
            if cfg.tap.depth() == i + 1 && cfg.tap != TapSite::Bottleneck {
                tap = Some(h);
            }
        }
        h = self.mid.forward(g, h, temb, ctx, &mask)?;
        let tap = tap.unwrap_or(h);
        for (us, block) in &self.up {
            h = g.upsample2(h)?;
            h = us.forward(g, h)?;
            let skip = skips.pop().expect("one skip per level");
            h = g.concat(&[h, skip], 2)?;
            h = block.forward(g, h, temb, ctx, &mask)?;
        }
        h = self.out_ln.forward(g, h)?;
        h = g.silu(h);
        let mut eps = self.output.forward(g, h)?;
        if padded != n {
            eps = g.slice(eps, 1, 0, n)?;
        }
        Ok(DenoiseOutput { eps, tap })
    }
}
