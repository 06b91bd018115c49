//! Dual anchor heads: frequency and temporal projectors of the tap feature,
//! timestep-conditioned FiLM, the two anchor losses, the annealing factor and
//! the three ways of weighting the anchors against the denoising loss.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::timestep_embed_batch;
use crate::diffkernel::{Graph, ParamBuilder, ParamId, Tensor, Var};
use crate::error::{Error, Result};
use crate::layers::{Linear, Mlp};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightingStrategy {
    #[serde(alias = "dynamic")]
    DynamicCosine,
    #[serde(alias = "static")]
    StaticFixed,
    #[serde(alias = "learnable")]
    LearnableGlobal,
}

impl fmt::Display for WeightingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WeightingStrategy::DynamicCosine => "dynamic_cosine",
            WeightingStrategy::StaticFixed => "static_fixed",
            WeightingStrategy::LearnableGlobal => "learnable_global",
        })
    }
}

impl FromStr for WeightingStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dynamic" | "dynamic_cosine" => Ok(WeightingStrategy::DynamicCosine),
            "static" | "static_fixed" => Ok(WeightingStrategy::StaticFixed),
            "learnable" | "learnable_global" => Ok(WeightingStrategy::LearnableGlobal),
            _ => Err(Error::invalid(format!("unknown strategy `{s}` (dynamic|static|learnable)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnchorConfig {
    /// Number of retained DCT coefficients, also the frequency anchor length F.
    pub k: usize,
    /// Temporal anchor width D_a; must match the motion encoder's embedding width.
    pub d_a: usize,
    /// Hidden width of the projector and FiLM MLPs.
    pub hidden: usize,
    pub lambda_fre: f64,
    pub lambda_tem: f64,
    pub strategy: WeightingStrategy,
    /// Annealing horizon; `None` means the total number of training steps.
    pub n_decay: Option<u64>,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        AnchorConfig {
            k: 64,
            d_a: 64,
            hidden: 128,
            lambda_fre: 0.1,
            lambda_tem: 0.5,
            strategy: WeightingStrategy::DynamicCosine,
            n_decay: None,
        }
    }
}

impl AnchorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.d_a == 0 || self.hidden == 0 {
            return Err(Error::invalid("anchor k, d_a and hidden must be positive"));
        }
        if !(self.lambda_fre >= 0.0 && self.lambda_tem >= 0.0) {
            return Err(Error::invalid(format!(
                "anchor weights must be >= 0, got ({}, {})",
                self.lambda_fre, self.lambda_tem
            )));
        }
        if self.n_decay == Some(0) {
            return Err(Error::invalid("n_decay must be at least 1"));
        }
        Ok(())
    }
}

/// `½[1 + cos(π·min(n/N, 1))]`.
pub fn zeta(n: u64, n_decay: u64) -> Result<f64> {
    if n_decay == 0 {
        return Err(Error::invalid("n_decay must be at least 1"));
    }
    let r = (n as f64 / n_decay as f64).min(1.0);
    Ok(0.5 * (1.0 + (PI * r).cos()))
}

/// Inverse of softplus, used to start learnable weights at the static values.
fn softplus_inv(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// FiLM coefficients for one batch, each `[B, width]`.
pub struct FilmCoeffs {
    pub gamma_f: Var,
    pub beta_f: Var,
    pub gamma_t: Var,
    pub beta_t: Var,
}

/// Anchors of one step: `z_fre: [B, F, d_m]`, `z_tem: [B, D_a]`.
pub struct AnchorBundle {
    pub z_fre: Var,
    pub z_tem: Var,
    pub film: FilmCoeffs,
    pub tap: Var,
}

#[derive(Clone, Debug)]
struct Film {
    fc1: Linear,
    fc2: Linear,
    width: usize,
}

impl Film {
    fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, name: &str, d_emb: usize, hidden: usize, width: usize) -> Result<Self> {
        let mut s = pb.sub(name);
        Ok(Film { fc1: Linear::new(&mut s, "fc1", d_emb, hidden)?, fc2: Linear::zeroed(&mut s, "fc2", hidden, 2 * width)?, width })
    }

    fn forward(&self, g: &mut Graph, e: Var) -> Result<(Var, Var)> {
        let h = self.fc1.forward(g, e)?;
        let h = g.silu(h);
        let out = self.fc2.forward(g, h)?;
        let gamma = g.slice(out, 1, 0, self.width)?;
        let beta = g.slice(out, 1, self.width, self.width)?;
        Ok((gamma, beta))
    }
}

/// Projectors `P`, `Q`, FiLM networks and (for the learnable strategy) the
/// global weight logits.
#[derive(Clone, Debug)]
pub struct AnchorHeads {
    pub config: AnchorConfig,
    pub d_motion: usize,
    pub d_emb: usize,
    pub tap_shape: (usize, usize),
    p: Mlp,
    q: Mlp,
    film_f: Film,
    film_t: Film,
    weight_logits: Option<ParamId>,
}

impl AnchorHeads {
    /// `tap_shape` is `(T, C)` of the tap feature for the training window.
    pub fn new<R: Rng>(
        pb: &mut ParamBuilder<'_, R>,
        config: AnchorConfig,
        d_motion: usize,
        d_emb: usize,
        tap_shape: (usize, usize),
    ) -> Result<Self> {
        config.validate()?;
        let (t, c) = tap_shape;
        let hidden = config.hidden;
        let p = Mlp::new(pb, "p", t * c, hidden, d_motion * config.k)?;
        let q = Mlp::new(pb, "q", c, hidden, config.d_a)?;
        let film_f = Film::new(pb, "film_f", d_emb, hidden, d_motion)?;
        let film_t = Film::new(pb, "film_t", d_emb, hidden, config.d_a)?;
        let weight_logits = if config.strategy == WeightingStrategy::LearnableGlobal {
            let init = [config.lambda_fre, config.lambda_tem].map(|l| if l > 0.0 { softplus_inv(l) } else { 0.0 });
            Some(pb.tensor("weight_logits", Tensor::new(&[2], init.to_vec())?)?)
        } else {
            None
        };
        Ok(AnchorHeads { config, d_motion, d_emb, tap_shape, p, q, film_f, film_t, weight_logits })
    }

    /// `P(h)` as `[B, d_m, F]`.
    pub fn project_freq(&self, g: &mut Graph, h: Var) -> Result<Var> {
        let s = g.shape(h).to_vec();
        let (t, c) = self.tap_shape;
        if s.len() != 3 || s[1] != t || s[2] != c {
            return Err(Error::Shape { op: "project_freq", detail: format!("tap {s:?}, expected [B, {t}, {c}]") });
        }
        let flat = g.reshape(h, &[s[0], t * c])?;
        let y = self.p.forward(g, flat)?;
        g.reshape(y, &[s[0], self.d_motion, self.config.k])
    }

    /// `Q(mean_T h)` as `[B, D_a]`.
    pub fn project_temp(&self, g: &mut Graph, h: Var) -> Result<Var> {
        let s = g.shape(h).to_vec();
        if s.len() != 3 || s[2] != self.tap_shape.1 {
            return Err(Error::Shape { op: "project_temp", detail: format!("tap {s:?}, expected [B, T, {}]", self.tap_shape.1) });
        }
        let pooled = g.mean_axis(h, 1)?;
        self.q.forward(g, pooled)
    }

    pub fn film(&self, g: &mut Graph, ts: &[usize]) -> Result<FilmCoeffs> {
        let e = g.constant(timestep_embed_batch(ts, self.d_emb)?);
        let (gamma_f, beta_f) = self.film_f.forward(g, e)?;
        let (gamma_t, beta_t) = self.film_t.forward(g, e)?;
        Ok(FilmCoeffs { gamma_f, beta_f, gamma_t, beta_t })
    }

    pub fn forward(&self, g: &mut Graph, tap: Var, ts: &[usize]) -> Result<AnchorBundle> {
        let pf = self.project_freq(g, tap)?;
        let pt = self.project_temp(g, tap)?;
        let film = self.film(g, ts)?;
        let (z_fre, z_tem) = film_modulate(g, pf, pt, &film)?;
        Ok(AnchorBundle { z_fre, z_tem, film, tap })
    }

    /// `(λ_fre, λ_tem)` as graph scalars: constants, or softplus of the
    /// learned logits. A configured weight of zero stays exactly zero.
    pub fn weights(&self, g: &mut Graph) -> Result<(Var, Var)> {
        let fixed = [self.config.lambda_fre, self.config.lambda_tem];
        match self.weight_logits {
            Some(id) => {
                let w = g.param(id);
                let sp = g.softplus(w);
                let mut out = [sp; 2];
                for (i, o) in out.iter_mut().enumerate() {
                    let s = g.slice(sp, 0, i, 1)?;
                    let s = g.reshape(s, &[])?;
                    *o = if fixed[i] > 0.0 { s } else { g.scalar(0.0) };
                }
                Ok((out[0], out[1]))
            }
            None => Ok((g.scalar(fixed[0]), g.scalar(fixed[1]))),
        }
    }
}

/// `z_fre = ((1+γ_f)⊙P + β_f)` with γ, β broadcast along F, then the last two
/// axes swapped; `z_tem = (1+γ_t)⊙Q + β_t`.
pub fn film_modulate(g: &mut Graph, proj_f: Var, proj_t: Var, film: &FilmCoeffs) -> Result<(Var, Var)> {
    let s = g.shape(film.gamma_f).to_vec();
    if s.len() != 2 {
        return Err(Error::Shape { op: "film_modulate", detail: format!("gamma_f {s:?}") });
    }
    let col = [s[0], s[1], 1];
    let gf = g.reshape(film.gamma_f, &col)?;
    let bf = g.reshape(film.beta_f, &col)?;
    let scale = g.add_scalar(gf, 1.0)?;
    let m = g.mul(scale, proj_f)?;
    let m = g.add(m, bf)?;
    let z_fre = g.transpose_last2(m)?;
    let scale = g.add_scalar(film.gamma_t, 1.0)?;
    let t = g.mul(scale, proj_t)?;
    let z_tem = g.add(t, film.beta_t)?;
    Ok((z_fre, z_tem))
}

/// Mean squared difference over every element.
pub fn loss_fre(g: &mut Graph, z_fre: Var, target: &Tensor) -> Result<Var> {
    if g.shape(z_fre) != target.shape() {
        return Err(Error::Shape {
            op: "loss_fre",
            detail: format!("anchor {:?} vs target {:?}", g.shape(z_fre), target.shape()),
        });
    }
    let t = g.constant(target.clone());
    let d = g.sub(z_fre, t)?;
    let d = g.square(d);
    Ok(g.mean(d))
}

/// Batch mean of `1 - cos(z, f)`. A row where either vector has zero norm
/// contributes exactly 1 and no gradient.
pub fn loss_tem(g: &mut Graph, z_tem: Var, target: &Tensor) -> Result<Var> {
    let zs = g.shape(z_tem).to_vec();
    if zs != target.shape() || zs.len() != 2 {
        return Err(Error::Shape { op: "loss_tem", detail: format!("anchor {zs:?} vs target {:?}", target.shape()) });
    }
    let (b, d) = (zs[0], zs[1]);
    let zv = g.value(z_tem).data();
    let valid: Vec<f64> = (0..b)
        .map(|i| {
            let zn = zv[i * d..(i + 1) * d].iter().any(|&v| v != 0.0);
            let fnz = target.data()[i * d..(i + 1) * d].iter().any(|&v| v != 0.0);
            if zn && fnz { 1.0 } else { 0.0 }
        })
        .collect();
    let fnorm: Vec<f64> = target.data().chunks(d).map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let denom_f: Vec<f64> = fnorm.iter().zip(&valid).map(|(n, v)| if *v > 0.0 { *n } else { 1.0 }).collect();
    let f = g.constant(target.clone());
    let dot = g.mul(z_tem, f)?;
    let dot = g.sum_axis(dot, 1)?;
    let zz = g.square(z_tem);
    let zz = g.sum_axis(zz, 1)?;
    let pad = g.constant(Tensor::new(&[b], valid.iter().map(|v| 1.0 - v).collect())?);
    let zz = g.add(zz, pad)?;
    let zn = g.sqrt(zz);
    let fnorm = g.constant(Tensor::new(&[b], denom_f)?);
    let den = g.mul(zn, fnorm)?;
    let cos = g.div(dot, den)?;
    let mask = g.constant(Tensor::new(&[b], valid)?);
    let cos = g.mul(cos, mask)?;
    let one_minus = g.neg(cos);
    let one_minus = g.add_scalar(one_minus, 1.0)?;
    Ok(g.mean(one_minus))
}

/// Component values of one evaluation of the total objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_ddpm: f64,
    pub l_fre: f64,
    pub l_tem: f64,
    pub zeta: f64,
    pub lambda_fre: f64,
    pub lambda_tem: f64,
    pub total: f64,
}

impl LossReport {
    /// Recomputes the weighted total from the components.
    pub fn recombine(&self) -> f64 {
        self.l_ddpm + self.zeta * (self.lambda_fre * self.l_fre + self.lambda_tem * self.l_tem)
    }
}

/// Plain-number form of the weighted objective.
pub fn total_loss_value(
    l_ddpm: f64,
    l_fre: f64,
    l_tem: f64,
    strategy: WeightingStrategy,
    lambdas: (f64, f64),
    n: u64,
    n_decay: u64,
) -> Result<f64> {
    let z = match strategy {
        WeightingStrategy::DynamicCosine => zeta(n, n_decay)?,
        _ => 1.0,
    };
    Ok(l_ddpm + z * (lambdas.0 * l_fre + lambdas.1 * l_tem))
}

/// Graph form of the weighted objective: `l_ddpm + ζ(λ_fre l_fre + λ_tem l_tem)`
/// with ζ fixed at 1 for the static and learnable strategies.
pub fn total_loss(
    g: &mut Graph,
    heads: &AnchorHeads,
    l_ddpm: Var,
    l_fre: Var,
    l_tem: Var,
    n: u64,
    n_decay: u64,
) -> Result<(Var, LossReport)> {
    let z = match heads.config.strategy {
        WeightingStrategy::DynamicCosine => zeta(n, n_decay)?,
        _ => 1.0,
    };
    let (lf, lt) = heads.weights(g)?;
    let a = g.mul(lf, l_fre)?;
    let b = g.mul(lt, l_tem)?;
    let s = g.add(a, b)?;
    let s = g.scale(s, z);
    let total = g.add(l_ddpm, s)?;
    let report = LossReport {
        l_ddpm: g.scalar_value(l_ddpm),
        l_fre: g.scalar_value(l_fre),
        l_tem: g.scalar_value(l_tem),
        zeta: z,
        lambda_fre: g.scalar_value(lf),
        lambda_tem: g.scalar_value(lt),
        total: g.scalar_value(total),
    };
    Ok((total, report))
}
