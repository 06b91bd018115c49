//! Linear-β DDPM: schedule, forward corruption, the anchored training step,
//! classifier-free guidance and ancestral sampling.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::anchors::{loss_fre, loss_tem, total_loss, AnchorConfig, AnchorHeads, LossReport};
use crate::denoiser::{Denoiser, DenoiserConfig, TextContext};
use crate::diffkernel::{Adam, AdamConfig, Graph, ParamBuilder, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::moclip::MoClipModel;
use crate::motiondata::{format::encode_clip, CaptionTokens, MotionClip, NormStats};
use crate::seed::{rng_for, Rng as SeedRng};
use crate::spectral::dct_truncate_values;

/// Noise schedule over `t = 1..=T`; `alpha_bar(0) = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl Schedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::invalid("every beta must lie in (0, 1)"));
        }
        let mut alpha_bar = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        Ok(Schedule { betas, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 { 1.0 } else { self.alpha_bar[t - 1] }
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::invalid(format!("timestep {t} outside [1, {}]", self.steps())));
        }
        Ok(())
    }
}

/// β linear from `beta_start` to `beta_end` over `t_steps` steps.
pub fn make_schedule(t_steps: usize, beta_start: f64, beta_end: f64) -> Result<Schedule> {
    if t_steps == 0 || !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::invalid(format!(
            "need T >= 1 and 0 < beta_start <= beta_end < 1, got T={t_steps}, [{beta_start}, {beta_end}]"
        )));
    }
    let betas = (0..t_steps)
        .map(|i| if t_steps == 1 { beta_start } else { beta_start + (beta_end - beta_start) * i as f64 / (t_steps - 1) as f64 })
        .collect();
    Schedule::from_betas(betas)
}

/// `x_t = √ᾱ_t·x₀ + √(1−ᾱ_t)·ε`.
pub fn forward_diffuse(x0: &[f64], t: usize, eps: &[f64], schedule: &Schedule) -> Result<Vec<f64>> {
    schedule.check_t(t)?;
    if x0.len() != eps.len() {
        return Err(Error::Shape { op: "forward_diffuse", detail: format!("x0 has {} values, noise {}", x0.len(), eps.len()) });
    }
    let ab = schedule.alpha_bar(t);
    let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + s * e).collect())
}

/// `uncond + ω·(cond − uncond)`.
pub fn cfg_combine(uncond: &[f64], cond: &[f64], omega: f64) -> Result<Vec<f64>> {
    if uncond.len() != cond.len() {
        return Err(Error::Shape { op: "cfg_combine", detail: format!("{} vs {}", uncond.len(), cond.len()) });
    }
    Ok(uncond.iter().zip(cond).map(|(u, c)| u + omega * (c - u)).collect())
}

/// What the denoiser output regresses onto.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Predict {
    #[default]
    Eps,
    X0,
}

impl fmt::Display for Predict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Predict::Eps => "eps",
            Predict::X0 => "x0",
        })
    }
}

impl FromStr for Predict {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eps" => Ok(Predict::Eps),
            "x0" => Ok(Predict::X0),
            _ => Err(Error::invalid(format!("unknown prediction target `{s}` (eps|x0)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub batch: usize,
    /// Training window in frames; shorter clips are padded and masked.
    pub window: usize,
    pub p_drop: f64,
    pub lr: f64,
    pub predict: Predict,
    /// Adds measured milliseconds to the training log; off keeps logs reproducible.
    pub record_wall_time: bool,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            batch: 16,
            window: 64,
            p_drop: 0.1,
            lr: 2e-4,
            predict: Predict::Eps,
            record_wall_time: false,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.window == 0 {
            return Err(Error::invalid("batch and window must be positive"));
        }
        if !(0.0..=1.0).contains(&self.p_drop) {
            return Err(Error::invalid(format!("p_drop must lie in [0, 1], got {}", self.p_drop)));
        }
        if !(self.lr > 0.0) {
            return Err(Error::invalid(format!("lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<Schedule> {
        make_schedule(self.timesteps, self.beta_start, self.beta_end)
    }
}

/// Normalized clips with their frozen per-token caption features.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub clips: Vec<MotionClip>,
    pub captions: Vec<CaptionTokens>,
    /// Per clip `[L_i, d_c]`.
    pub contexts: Vec<Tensor>,
}

impl TrainingSet {
    pub fn new(clips: Vec<MotionClip>, captions: Vec<CaptionTokens>, moclip: &MoClipModel) -> Result<Self> {
        if clips.is_empty() || clips.len() != captions.len() {
            return Err(Error::invalid(format!("{} clips with {} captions", clips.len(), captions.len())));
        }
        let d_c = moclip.config().d_model;
        let mut contexts = Vec::with_capacity(captions.len());
        for c in &captions {
            let ctx = moclip.text_context(&[c])?;
            contexts.push(ctx.tokens.reshape(&[c.length, d_c])?);
        }
        Ok(TrainingSet { clips, captions, contexts })
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    /// Batched context for clip indices, right-padded.
    pub fn context(&self, idx: &[usize]) -> Result<TextContext> {
        let d_c = self.contexts[idx[0]].shape()[1];
        let l = idx.iter().map(|&i| self.contexts[i].shape()[0]).max().unwrap_or(1);
        let mut data = vec![0.0; idx.len() * l * d_c];
        let mut keep = vec![false; idx.len() * l];
        for (b, &i) in idx.iter().enumerate() {
            let c = &self.contexts[i];
            let li = c.shape()[0];
            data[b * l * d_c..(b * l + li) * d_c].copy_from_slice(c.data());
            keep[b * l..b * l + li].fill(true);
        }
        Ok(TextContext { tokens: Tensor::new(&[idx.len(), l, d_c], data)?, keep })
    }
}

/// Everything random about one step, drawn before the graph is built.
#[derive(Clone, Debug)]
pub struct StepInputs {
    pub clips: Vec<usize>,
    /// `[B, W, d]`, zero past each clip's end.
    pub x0: Tensor,
    /// Valid frames, `B·W` entries.
    pub keep: Vec<bool>,
    pub frames: Vec<usize>,
    pub t: usize,
    pub noise: Tensor,
    pub x_t: Tensor,
    pub context: TextContext,
    pub dropped: usize,
    /// `[B, k, d]` truncated DCT of each valid window.
    pub dct_target: Option<Tensor>,
    /// `[B, D_a]` frozen motion-encoder embedding of each window.
    pub f_tem: Option<Tensor>,
}

/// Denoiser plus optional anchor heads, sharing one parameter store.
#[derive(Clone, Debug)]
pub struct DiffusionModel {
    pub denoiser: Denoiser,
    pub anchors: Option<AnchorHeads>,
    pub predict: Predict,
}

impl DiffusionModel {
    /// The denoiser and anchor heads draw their initial values from separate
    /// streams, so the denoiser starts identical with or without anchors.
    pub fn new(
        store: &mut ParamStore,
        denoiser: DenoiserConfig,
        anchors: Option<AnchorConfig>,
        window: usize,
        predict: Predict,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = rng_for(seed, "denoiser/init");
        let net = Denoiser::new(&mut ParamBuilder::new(store, &mut rng).sub("unet"), denoiser.clone())?;
        let anchors = match anchors {
            Some(cfg) => {
                let mut rng = rng_for(seed, "anchors/init");
                let tap = (denoiser.tap_frames(window), denoiser.tap_channels());
                Some(AnchorHeads::new(
                    &mut ParamBuilder::new(store, &mut rng).sub("anchors"),
                    cfg,
                    denoiser.d_motion,
                    denoiser.d_emb,
                    tap,
                )?)
            }
            None => None,
        };
        Ok(DiffusionModel { denoiser: net, anchors, predict })
    }

    /// Total objective for one step; `n` is the 1-based step index.
    pub fn loss(&self, g: &mut Graph, inp: &StepInputs, n: u64, n_decay: u64) -> Result<(Var, LossReport)> {
        let s = inp.x0.shape();
        let (b, w, d) = (s[0], s[1], s[2]);
        let x_t = g.constant(inp.x_t.clone());
        let out = self.denoiser.forward(g, x_t, &vec![inp.t; b], &inp.context)?;
        let target = match self.predict {
            Predict::Eps => &inp.noise,
            Predict::X0 => &inp.x0,
        };
        let tgt = g.constant(target.clone());
        let diff = g.sub(out.eps, tgt)?;
        let sq = g.square(diff);
        let mask = g.constant(Tensor::new(&[b, w, 1], inp.keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect())?);
        let sq = g.mul(sq, mask)?;
        let sq = g.sum(sq);
        let count = inp.keep.iter().filter(|&&k| k).count() * d;
        let l_ddpm = g.scale(sq, 1.0 / count.max(1) as f64);
        match &self.anchors {
            None => {
                let v = g.scalar_value(l_ddpm);
                Ok((l_ddpm, LossReport { l_ddpm: v, total: v, zeta: 0.0, ..Default::default() }))
            }
            Some(heads) => {
                let bundle = heads.forward(g, out.tap, &vec![inp.t; b])?;
                let dct = inp.dct_target.as_ref().ok_or_else(|| Error::MissingInput("frequency anchor target".into()))?;
                let f_tem = inp.f_tem.as_ref().ok_or_else(|| Error::MissingInput("temporal anchor target".into()))?;
                let l_fre = loss_fre(g, bundle.z_fre, dct)?;
                let l_tem = loss_tem(g, bundle.z_tem, f_tem)?;
                total_loss(g, heads, l_ddpm, l_fre, l_tem, n, n_decay)
            }
        }
    }
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainStepRecord {
    pub step: u64,
    pub t: usize,
    pub l_ddpm: f64,
    pub l_fre: f64,
    pub l_tem: f64,
    pub zeta: f64,
    pub total: f64,
    /// Batch rows whose caption was replaced by the null context.
    pub cond_dropped: usize,
    pub wall_ms: u64,
}

pub const TRAIN_LOG_HEADER: &str = "step,t,l_ddpm,l_fre,l_tem,zeta,total,cond_dropped,wall_ms";

impl TrainStepRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step, self.t, self.l_ddpm, self.l_fre, self.l_tem, self.zeta, self.total, self.cond_dropped, self.wall_ms
        )
    }
}

pub fn write_train_log(path: &Path, records: &[TrainStepRecord]) -> Result<()> {
    let mut s = String::from(TRAIN_LOG_HEADER);
    s.push('\n');
    for r in records {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Owns the model, optimizer and data streams for one training run.
pub struct Trainer {
    pub config: DiffusionConfig,
    pub model: DiffusionModel,
    pub store: ParamStore,
    pub schedule: Schedule,
    adam: Adam,
    data: Arc<TrainingSet>,
    moclip: Arc<MoClipModel>,
    rng: SeedRng,
    step: u64,
    n_decay: u64,
}

impl Trainer {
    /// `total_steps` is the annealing horizon when the anchor config leaves it unset.
    pub fn new(
        config: DiffusionConfig,
        denoiser: DenoiserConfig,
        anchors: Option<AnchorConfig>,
        data: Arc<TrainingSet>,
        moclip: Arc<MoClipModel>,
        seed: u64,
        total_steps: u64,
    ) -> Result<Self> {
        config.validate()?;
        if denoiser.d_c != moclip.config().d_model {
            return Err(Error::ConfigMismatch(format!(
                "denoiser context width {} differs from text width {}",
                denoiser.d_c,
                moclip.config().d_model
            )));
        }
        if let Some(a) = &anchors {
            if a.d_a != moclip.config().d_embed {
                return Err(Error::ConfigMismatch(format!(
                    "temporal anchor width {} differs from motion embedding width {}",
                    a.d_a,
                    moclip.config().d_embed
                )));
            }
        }
        let n_decay = anchors.as_ref().and_then(|a| a.n_decay).unwrap_or(total_steps).max(1);
        let mut store = ParamStore::new();
        let model = DiffusionModel::new(&mut store, denoiser, anchors, config.window, config.predict, seed)?;
        let adam = Adam::new(AdamConfig { lr: config.lr, ..Default::default() }, &store);
        let schedule = config.schedule()?;
        Ok(Trainer { config, model, store, schedule, adam, data, moclip, rng: rng_for(seed, "train/steps"), step: 0, n_decay })
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn n_decay(&self) -> u64 {
        self.n_decay
    }

    /// Draws the next step's batch, timestep, noise and condition drops.
    pub fn draw_inputs(&mut self) -> Result<StepInputs> {
        let (b, w) = (self.config.batch, self.config.window);
        let d = self.data.clips[0].dims();
        let clips: Vec<usize> = (0..b).map(|_| self.rng.random_range(0..self.data.len())).collect();
        let starts: Vec<usize> = clips
            .iter()
            .map(|&i| {
                let f = self.data.clips[i].frames();
                if f > w { self.rng.random_range(0..=f - w) } else { 0 }
            })
            .collect();
        let t = self.rng.random_range(1..=self.schedule.steps());
        let noise: Vec<f64> = (0..b * w * d).map(|_| self.rng.sample(StandardNormal)).collect();
        let drop: Vec<bool> = (0..b).map(|_| self.rng.random_bool(self.config.p_drop)).collect();
        let anchors = self.model.anchors.as_ref().map(|h| (h.config.k, &*self.moclip));
        assemble(&self.data, w, &self.schedule, anchors, clips, &starts, t, Tensor::new(&[b, w, d], noise)?, &drop)
    }

    /// Runs one optimizer step.
    pub fn train_step(&mut self) -> Result<TrainStepRecord> {
        self.train_step_observed(|_, _| {})
    }

    /// Like [`Trainer::train_step`], calling `observe` with the accumulated
    /// gradients after backward and before the optimizer update.
    pub fn train_step_observed(&mut self, observe: impl FnOnce(&ParamStore, &TrainStepRecord)) -> Result<TrainStepRecord> {
        let clock = Instant::now();
        let inputs = self.draw_inputs()?;
        let n = self.step + 1;
        let (report, grads) = {
            let mut g = Graph::new(&self.store);
            let (loss, report) = self.model.loss(&mut g, &inputs, n, self.n_decay)?;
            if !report.total.is_finite() {
                return Err(Error::Diverged {
                    step: n,
                    detail: format!(
                        "total {} (l_ddpm {}, l_fre {}, l_tem {}) at t={}",
                        report.total, report.l_ddpm, report.l_fre, report.l_tem, inputs.t
                    ),
                });
            }
            (report, g.backward(loss)?)
        };
        self.store.zero_grads();
        grads.accumulate_into(&mut self.store);
        let mut rec = TrainStepRecord {
            step: n,
            t: inputs.t,
            l_ddpm: report.l_ddpm,
            l_fre: report.l_fre,
            l_tem: report.l_tem,
            zeta: report.zeta,
            total: report.total,
            cond_dropped: inputs.dropped,
            wall_ms: 0,
        };
        observe(&self.store, &rec);
        self.adam.step(&mut self.store).map_err(|e| match e {
            Error::NonFinite { what } => Error::Diverged { step: n, detail: what },
            e => e,
        })?;
        self.step = n;
        if self.config.record_wall_time {
            rec.wall_ms = clock.elapsed().as_millis() as u64;
        }
        Ok(rec)
    }

    /// Conditional denoising loss on fixed seeded draws over `set`: window
    /// from frame 0, `draws` timesteps per clip.
    pub fn validation_loss(&self, set: &TrainingSet, draws: usize, seed: u64) -> Result<f64> {
        let mut rng = rng_for(seed, "validation");
        let (w, d) = (self.config.window, set.clips[0].dims());
        let plain = DiffusionModel { anchors: None, ..self.model.clone() };
        let all: Vec<usize> = (0..set.len()).collect();
        let (mut total, mut count) = (0.0, 0usize);
        for _ in 0..draws {
            for chunk in all.chunks(self.config.batch * 2) {
                let b = chunk.len();
                let t = rng.random_range(1..=self.schedule.steps());
                let noise: Vec<f64> = (0..b * w * d).map(|_| rng.sample(StandardNormal)).collect();
                let noise = Tensor::new(&[b, w, d], noise)?;
                let inp = assemble(set, w, &self.schedule, None, chunk.to_vec(), &vec![0; b], t, noise, &vec![false; b])?;
                let mut g = Graph::inference(&self.store);
                let (_, rep) = plain.loss(&mut g, &inp, 1, 1)?;
                let valid = inp.keep.iter().filter(|&&k| k).count();
                total += rep.l_ddpm * valid as f64;
                count += valid;
            }
        }
        Ok(total / count.max(1) as f64)
    }
}

/// Builds step inputs from clip indices and pre-drawn randomness. `anchors`
/// carries the DCT length and the frozen encoder when anchor targets are needed.
#[allow(clippy::too_many_arguments)]
pub fn assemble(
    set: &TrainingSet,
    window: usize,
    schedule: &Schedule,
    anchors: Option<(usize, &MoClipModel)>,
    clips: Vec<usize>,
    starts: &[usize],
    t: usize,
    noise: Tensor,
    drop: &[bool],
) -> Result<StepInputs> {
    let (b, w, d) = (clips.len(), window, set.clips[0].dims());
    let mut x0 = vec![0.0; b * w * d];
    let mut keep = vec![false; b * w];
    let mut frames = Vec::with_capacity(b);
    for (r, (&i, &s)) in clips.iter().zip(starts).enumerate() {
        let clip = &set.clips[i];
        let n = clip.frames().saturating_sub(s).min(w);
        x0[r * w * d..(r * w + n) * d].copy_from_slice(&clip.values()[s * d..(s + n) * d]);
        keep[r * w..r * w + n].fill(true);
        frames.push(n);
    }
    let x_t = forward_diffuse(&x0, t, noise.data(), schedule)?;
    let mut context = set.context(&clips)?;
    for (r, &dr) in drop.iter().enumerate() {
        if dr {
            context.drop_row(r);
        }
    }
    let (dct_target, f_tem) = match anchors {
        Some((k, moclip)) => {
            let mut dct = Vec::with_capacity(b * k * d);
            for (r, &n) in frames.iter().enumerate() {
                let spec = dct_truncate_values(&x0[r * w * d..(r * w + n) * d], n, d, k)?;
                dct.extend_from_slice(spec.coefficients.data());
            }
            let x0t = Tensor::new(&[b, w, d], x0.clone())?;
            (Some(Tensor::new(&[b, k, d], dct)?), Some(moclip.embed_windows(&x0t, &keep)?))
        }
        None => (None, None),
    };
    Ok(StepInputs {
        clips,
        x0: Tensor::new(&[b, w, d], x0)?,
        keep,
        frames,
        t,
        noise,
        x_t: Tensor::new(&[b, w, d], x_t)?,
        context,
        dropped: drop.iter().filter(|&&x| x).count(),
        dct_target,
        f_tem,
    })
}

/// Guided ancestral sampling request.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRequest {
    pub frames: usize,
    pub fps: f64,
    pub omega: f64,
    /// Timestep stride; 1 runs the full chain.
    pub stride: usize,
    pub seed: u64,
}

/// Bound on the sampler's clean-motion estimate, in normalized (z-score) units.
pub const X0_CLAMP: f64 = 5.0;

/// Timesteps visited by the sampler, from `T` down to at least 1.
pub fn sampling_timesteps(t_max: usize, stride: usize) -> Result<Vec<usize>> {
    if stride == 0 || t_max == 0 {
        return Err(Error::invalid("sampling stride and T must be positive"));
    }
    let mut ts: Vec<usize> = (1..=t_max).rev().step_by(stride).collect();
    if ts.last() != Some(&1) {
        ts.push(1);
    }
    Ok(ts)
}

/// Samples one clip per caption, denormalized with `stats`.
pub fn sample(
    model: &DiffusionModel,
    store: &ParamStore,
    moclip: &MoClipModel,
    schedule: &Schedule,
    captions: &[&CaptionTokens],
    req: &SampleRequest,
    stats: &NormStats,
) -> Result<Vec<MotionClip>> {
    let d = model.denoiser.config.d_motion;
    if stats.dims() != d {
        return Err(Error::ConfigMismatch(format!("corpus statistics have width {}, model {}", stats.dims(), d)));
    }
    let clips = sample_normalized(model, store, moclip, schedule, captions, req)?;
    Ok(clips.iter().map(|c| stats.denormalize(c)).collect())
}

/// Samples in the normalized feature space. Each step runs the conditional
/// and unconditional passes as one batch and combines them with
/// [`cfg_combine`].
pub fn sample_normalized(
    model: &DiffusionModel,
    store: &ParamStore,
    moclip: &MoClipModel,
    schedule: &Schedule,
    captions: &[&CaptionTokens],
    req: &SampleRequest,
) -> Result<Vec<MotionClip>> {
    if captions.is_empty() || req.frames == 0 {
        return Err(Error::invalid("sampling needs at least one caption and one frame"));
    }
    let d = model.denoiser.config.d_motion;
    let (b, n) = (captions.len(), req.frames);
    let cond = moclip.text_context(captions)?;
    let l = cond.len();
    let mut tokens = cond.tokens.data().to_vec();
    tokens.extend_from_slice(cond.tokens.data());
    let mut keep = cond.keep.clone();
    keep.extend(std::iter::repeat_n(false, b * l));
    let ctx = TextContext { tokens: Tensor::new(&[2 * b, l, cond.tokens.shape()[2]], tokens)?, keep };

    let mut rng = rng_for(req.seed, "sample");
    let size = b * n * d;
    let mut x: Vec<f64> = (0..size).map(|_| rng.sample(StandardNormal)).collect();
    let ts = sampling_timesteps(schedule.steps(), req.stride)?;
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(i + 1).copied().unwrap_or(0);
        let pred = {
            let mut g = Graph::inference(store);
            let mut both = x.clone();
            both.extend_from_slice(&x);
            let xv = g.constant(Tensor::new(&[2 * b, n, d], both)?);
            let out = model.denoiser.forward(&mut g, xv, &vec![t; 2 * b], &ctx)?;
            let v = g.value(out.eps).data();
            cfg_combine(&v[size..], &v[..size], req.omega)?
        };
        let ab = schedule.alpha_bar(t);
        let ab_prev = schedule.alpha_bar(t_prev);
        let x0_hat: Vec<f64> = match model.predict {
            Predict::Eps => x.iter().zip(&pred).map(|(xt, e)| (xt - (1.0 - ab).sqrt() * e) / ab.sqrt()).collect(),
            Predict::X0 => pred,
        };
        let x0_hat: Vec<f64> = x0_hat.into_iter().map(|v| v.clamp(-X0_CLAMP, X0_CLAMP)).collect();
        let a_step = ab / ab_prev;
        let b_step = 1.0 - a_step;
        let c0 = ab_prev.sqrt() * b_step / (1.0 - ab);
        let ct = a_step.sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let var = (1.0 - ab_prev) / (1.0 - ab) * b_step;
        for (xi, x0) in x.iter_mut().zip(&x0_hat) {
            *xi = c0 * x0 + ct * *xi;
        }
        if t_prev > 0 {
            let sd = var.sqrt();
            for xi in x.iter_mut() {
                *xi += sd * rng.sample::<f64, _>(StandardNormal);
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: format!("sample at t={t}") });
        }
    }
    (0..b)
        .map(|r| MotionClip::new(format!("sample{r:03}"), req.fps, n, d, x[r * n * d..(r + 1) * n * d].to_vec()))
        .collect()
}

/// Provenance written next to sampled clips.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleSidecar {
    pub captions: Vec<String>,
    pub seed: u64,
    pub omega: f64,
    pub steps: usize,
    pub stride: usize,
    pub frames: usize,
    pub checkpoint: String,
}

/// Writes `<stem>.lmb` (concatenated LMB1 records) and `<stem>.json`.
pub fn save_samples(dir: &Path, stem: &str, clips: &[MotionClip], sidecar: &SampleSidecar) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut bytes = Vec::new();
    for c in clips {
        encode_clip(c, &mut bytes);
    }
    let bin = dir.join(format!("{stem}.lmb"));
    std::fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
    let json = dir.join(format!("{stem}.json"));
    let mut text = serde_json::to_string_pretty(sidecar)?;
    text.push('\n');
    std::fs::write(&json, text).map_err(|e| Error::io(&json, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::diffkernel::{grad_check, GradCheckOptions};
    use crate::pipeline;

    fn tiny_trainer(cfg: &RunConfig) -> Trainer {
        let corpus = pipeline::generate(cfg).unwrap();
        let moclip = MoClipModel::new(cfg.moclip.clone(), 1).unwrap();
        let (train, _) = pipeline::training_sets(&corpus, &moclip).unwrap();
        pipeline::new_trainer(cfg, Arc::new(train), Arc::new(moclip)).unwrap()
    }

    #[test]
    fn schedule_examples() {
        let s = Schedule::from_betas(vec![0.5, 0.5]).unwrap();
        assert_eq!((s.alpha_bar(1), s.alpha_bar(2)), (0.5, 0.25));
        assert_eq!(s.alpha_bar(0), 1.0);
        let s = make_schedule(3, 0.1, 0.1).unwrap();
        assert!((s.alpha_bar(3) - 0.729).abs() < 1e-15);
        assert!(make_schedule(3, 0.0, 0.0).is_err());
        assert!(make_schedule(3, 0.2, 0.1).is_err());
        assert!(make_schedule(3, 0.1, 1.0).is_err());
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        // independent oracle: exp of the summed logs
        let log_sum: f64 = (0..1000).map(|i| (1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0)).ln()).sum();
        assert!((s.alpha_bar(1000) / log_sum.exp() - 1.0).abs() < 1e-10);
        assert!((s.alpha_bar(1000) - 4.04e-5).abs() < 0.01e-5);
        for t in 1..=1000 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert!((s.alpha_bar(t).sqrt().powi(2) + (1.0 - s.alpha_bar(t)).sqrt().powi(2) - 1.0).abs() < 1e-12);
            if t > 1 {
                assert!(s.beta(t) > s.beta(t - 1));
            }
        }
    }

    #[test]
    fn forward_and_guidance_examples() {
        let s = Schedule::from_betas(vec![0.5, 0.5]).unwrap();
        let eps = [0.3, -1.2];
        let xt = forward_diffuse(&[0.0, 0.0], 2, &eps, &s).unwrap();
        assert_eq!(xt, vec![0.75f64.sqrt() * 0.3, 0.75f64.sqrt() * -1.2]);
        assert!(forward_diffuse(&[0.0], 3, &[0.0], &s).is_err());
        assert!(forward_diffuse(&[0.0], 1, &[0.0, 1.0], &s).is_err());
        assert_eq!(cfg_combine(&[1.0], &[3.0], 2.5).unwrap(), vec![6.0]);
        assert_eq!(cfg_combine(&[1.0, 2.0], &[3.0, -4.0], 0.0).unwrap(), vec![1.0, 2.0]);
        assert_eq!(cfg_combine(&[1.0, 2.0], &[3.0, -4.0], 1.0).unwrap(), vec![3.0, -4.0]);
        assert_eq!(sampling_timesteps(10, 1).unwrap(), (1..=10).rev().collect::<Vec<_>>());
        assert_eq!(sampling_timesteps(10, 4).unwrap(), vec![10, 6, 2, 1]);
        assert_eq!("x0".parse::<Predict>().unwrap(), Predict::X0);
    }

    #[test]
    fn step_records_recombine() {
        let cfg = RunConfig::tiny();
        let mut t = tiny_trainer(&cfg);
        for _ in 0..3 {
            let r = t.train_step().unwrap();
            let want = r.l_ddpm + r.zeta * (cfg.anchors.lambda_fre * r.l_fre + cfg.anchors.lambda_tem * r.l_tem);
            assert!((r.total - want).abs() < 1e-12);
            assert!(r.t >= 1 && r.t <= cfg.diffusion.timesteps);
            assert_eq!(r.wall_ms, 0);
        }
        assert_eq!(t.steps_done(), 3);
    }

    #[test]
    fn zero_weights_match_baseline() {
        let mut cfg = RunConfig::tiny();
        cfg.anchors.lambda_fre = 0.0;
        cfg.anchors.lambda_tem = 0.0;
        let mut on = tiny_trainer(&cfg);
        cfg.dal = false;
        let mut off = tiny_trainer(&cfg);
        for _ in 0..5 {
            let a = on.train_step().unwrap();
            let b = off.train_step().unwrap();
            assert_eq!(a.l_ddpm.to_bits(), b.l_ddpm.to_bits());
            assert_eq!(a.total.to_bits(), b.total.to_bits());
        }
        assert_eq!(on.store.snapshot_prefix("unet."), off.store.snapshot_prefix("unet."));
    }

    #[test]
    fn full_loss_gradients() {
        let cfg = RunConfig::tiny();
        let mut t = tiny_trainer(&cfg);
        let inputs = t.draw_inputs().unwrap();
        let model = t.model.clone();
        let opts = GradCheckOptions { eps: 1e-4, tol: 1e-4, max_entries: Some(150), seed: 3, ..Default::default() };
        let report = grad_check(&mut t.store, &opts, |g| Ok(model.loss(g, &inputs, 2, 10)?.0)).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn sampling_is_seeded() {
        let cfg = RunConfig::tiny();
        let corpus = pipeline::generate(&cfg).unwrap();
        let t = tiny_trainer(&cfg);
        let moclip = MoClipModel::new(cfg.moclip.clone(), 1).unwrap();
        let cap = corpus.caption(0);
        let req = SampleRequest { frames: 13, fps: 20.0, omega: 2.5, stride: 10, seed: 4 };
        let run = |r: &SampleRequest| sample(&t.model, &t.store, &moclip, &t.schedule, &[&cap, &cap], r, corpus.stats()).unwrap();
        let a = run(&req);
        assert_eq!(a.len(), 2);
        assert_eq!((a[0].frames(), a[0].dims()), (13, 56));
        assert_eq!(a[0].values(), run(&req)[0].values());
        assert_ne!(a[0].values(), a[1].values());
        let other = run(&SampleRequest { seed: 5, ..req.clone() });
        assert_ne!(a[0].values(), other[0].values());
    }
}
