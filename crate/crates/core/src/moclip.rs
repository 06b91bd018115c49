//! Contrastive motion–text dual encoder trained from scratch.
//!
//! The motion side projects frames, adds sinusoidal positions, runs masked
//! transformer layers, mean-pools valid frames and projects to the joint
//! space. The text side does the same over caption tokens; its per-token
//! outputs also condition the denoiser.

use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::TextContext;
use crate::diffkernel::{
    load_into, read_meta, save_checkpoint, Adam, AdamConfig, CheckpointMeta, Graph, KeyMask, ParamBuilder, ParamId,
    ParamStore, Tensor, Var,
};
use crate::error::{Error, Result};
use crate::layers::{l2_normalize, masked_mean_time, positional_encoding, LayerNorm, Linear, TransformerLayer};
use crate::motiondata::{CaptionTokens, MotionClip, PAD};
use crate::seed::{rng_for, Rng as SeedRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MoClipConfig {
    pub d_motion: usize,
    pub vocab_size: usize,
    /// Transformer width of both encoders; also the per-token text width fed to the denoiser.
    pub d_model: usize,
    /// Joint embedding width.
    pub d_embed: usize,
    pub motion_layers: usize,
    pub text_layers: usize,
    pub heads: usize,
    pub tau_init: f64,
    pub batch: usize,
    pub lr: f64,
    pub stage1_steps: u64,
    pub stage2_steps: u64,
    /// Learning-rate multiplier for stage 2.
    pub stage2_lr_scale: f64,
}

impl Default for MoClipConfig {
    fn default() -> Self {
        MoClipConfig {
            d_motion: 56,
            vocab_size: 32,
            d_model: 64,
            d_embed: 64,
            motion_layers: 2,
            text_layers: 2,
            heads: 2,
            tau_init: 0.07,
            batch: 32,
            lr: 1e-3,
            stage1_steps: 2000,
            stage2_steps: 1000,
            stage2_lr_scale: 0.1,
        }
    }
}

impl MoClipConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_embed == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::invalid(format!("{} heads must divide width {}", self.heads, self.d_model)));
        }
        if self.text_layers == 0 {
            return Err(Error::invalid("text encoder needs at least one layer"));
        }
        if !(self.tau_init > 0.0) || self.batch < 2 {
            return Err(Error::invalid("tau_init must be positive and batch at least 2"));
        }
        Ok(())
    }
}

/// Parameter handles of the dual encoder.
#[derive(Clone, Debug)]
pub struct MoClip {
    pub config: MoClipConfig,
    w_p: Linear,
    motion_layers: Vec<TransformerLayer>,
    motion_ln: LayerNorm,
    w_o: Linear,
    tok_embed: ParamId,
    text_layers: Vec<TransformerLayer>,
    text_ln: LayerNorm,
    text_proj: Linear,
    pub log_tau: ParamId,
}

/// Right-pads clips into `[B, T, d]` with a per-frame validity mask.
pub fn pad_motion_batch(clips: &[&MotionClip]) -> Result<(Tensor, Vec<bool>)> {
    let first = clips.first().ok_or_else(|| Error::invalid("empty motion batch"))?;
    let d = first.dims();
    let t = clips.iter().map(|c| c.frames()).max().unwrap_or(0);
    let mut data = vec![0.0; clips.len() * t * d];
    let mut keep = vec![false; clips.len() * t];
    for (b, c) in clips.iter().enumerate() {
        if c.dims() != d {
            return Err(Error::Shape { op: "pad_motion_batch", detail: format!("clip {} has width {}", c.id, c.dims()) });
        }
        data[b * t * d..b * t * d + c.frames() * d].copy_from_slice(c.values());
        keep[b * t..b * t + c.frames()].fill(true);
    }
    Ok((Tensor::new(&[clips.len(), t, d], data)?, keep))
}

/// Right-pads captions with PAD; returns ids, shape `[B, L]` and validity mask.
pub fn pad_caption_batch(captions: &[&CaptionTokens]) -> Result<(Vec<usize>, usize, Vec<bool>)> {
    if captions.is_empty() || captions.iter().any(|c| c.length == 0) {
        return Err(Error::invalid("caption batch must be nonempty with nonempty captions"));
    }
    let l = captions.iter().map(|c| c.length).max().unwrap_or(0);
    let mut ids = Vec::with_capacity(captions.len() * l);
    let mut keep = Vec::with_capacity(captions.len() * l);
    for c in captions {
        let p = c.padded(l, PAD);
        ids.extend(p.tokens);
        keep.extend(p.pad_mask);
    }
    Ok((ids, l, keep))
}

fn broadcast_positions(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let pe = g.constant(positional_encoding(s[1], s[2]));
    g.add(x, pe)
}

impl MoClip {
    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, config: MoClipConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut m = pb.sub("motion");
        let w_p = Linear::new(&mut m, "w_p", config.d_motion, d)?;
        let motion_layers = (0..config.motion_layers)
            .map(|i| TransformerLayer::new(&mut m, &format!("layer{i}"), d, config.heads))
            .collect::<Result<Vec<_>>>()?;
        let motion_ln = LayerNorm::new(&mut m, "ln_f", d)?;
        let w_o = Linear::new(&mut m, "w_o", d, config.d_embed)?;
        drop(m);
        let mut t = pb.sub("text");
        let tok_embed = t.normal("tok_embed", &[config.vocab_size, d], 1.0)?;
        let text_layers = (0..config.text_layers)
            .map(|i| TransformerLayer::new(&mut t, &format!("layer{i}"), d, config.heads))
            .collect::<Result<Vec<_>>>()?;
        let text_ln = LayerNorm::new(&mut t, "ln_f", d)?;
        let text_proj = Linear::new(&mut t, "proj", d, config.d_embed)?;
        drop(t);
        let log_tau = pb.tensor("log_tau", Tensor::scalar(config.tau_init.ln()))?;
        Ok(MoClip { config, w_p, motion_layers, motion_ln, w_o, tok_embed, text_layers, text_ln, text_proj, log_tau })
    }

    /// Unit-norm motion embeddings `[B, d_embed]` from padded `x: [B, T, d_motion]`.
    pub fn encode_motion(&self, g: &mut Graph, x: Var, keep: &[bool]) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.config.d_motion || keep.len() != s[0] * s[1] {
            return Err(Error::Shape { op: "encode_motion", detail: format!("{s:?} with {} mask entries", keep.len()) });
        }
        let mut h = self.w_p.forward(g, x)?;
        h = broadcast_positions(g, h)?;
        let mask = KeyMask { keep: keep.to_vec(), groups: s[0] };
        for layer in &self.motion_layers {
            h = layer.forward(g, h, Some(&mask))?;
        }
        h = self.motion_ln.forward(g, h)?;
        let pooled = masked_mean_time(g, h, keep)?;
        let z = self.w_o.forward(g, pooled)?;
        l2_normalize(g, z)
    }

    /// Per-token text features `[B, L, d_model]`.
    pub fn text_tokens(&self, g: &mut Graph, ids: &[usize], len: usize, keep: &[bool]) -> Result<Var> {
        if len == 0 || ids.len() % len != 0 || keep.len() != ids.len() {
            return Err(Error::Shape { op: "text_tokens", detail: format!("{} ids, length {len}", ids.len()) });
        }
        if let Some(t) = ids.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::invalid(format!("token id {t} outside vocabulary of {}", self.config.vocab_size)));
        }
        let b = ids.len() / len;
        let table = g.param(self.tok_embed);
        let mut h = g.embedding(table, ids, &[b, len])?;
        h = broadcast_positions(g, h)?;
        let mask = KeyMask { keep: keep.to_vec(), groups: b };
        for layer in &self.text_layers {
            h = layer.forward(g, h, Some(&mask))?;
        }
        self.text_ln.forward(g, h)
    }

    /// Unit-norm caption embeddings `[B, d_embed]`.
    pub fn encode_text(&self, g: &mut Graph, ids: &[usize], len: usize, keep: &[bool]) -> Result<Var> {
        let h = self.text_tokens(g, ids, len, keep)?;
        let pooled = masked_mean_time(g, h, keep)?;
        let z = self.text_proj.forward(g, pooled)?;
        l2_normalize(g, z)
    }

    /// Symmetric cross-entropy over the similarity matrix scaled by `1/τ`.
    pub fn loss(&self, g: &mut Graph, motion: Var, text: Var) -> Result<Var> {
        let lt = g.param(self.log_tau);
        contrastive_loss(g, motion, text, lt)
    }

    /// Name prefix of the text parameters unfrozen in stage 2.
    pub fn stage2_prefixes(&self) -> Vec<String> {
        let last = self.config.text_layers - 1;
        vec![format!("text.layer{last}."), "text.ln_f.".into(), "text.proj.".into()]
    }
}

/// `½(CE(S/τ) + CE(Sᵀ/τ))` with diagonal targets, `τ = exp(log_tau)`.
pub fn contrastive_loss(g: &mut Graph, motion: Var, text: Var, log_tau: Var) -> Result<Var> {
    let sm = g.shape(motion).to_vec();
    if sm.len() != 2 || g.shape(text) != sm.as_slice() || sm[0] < 2 {
        return Err(Error::Shape {
            op: "contrastive_loss",
            detail: format!("motion {sm:?}, text {:?}; need matching [B>=2, D]", g.shape(text)),
        });
    }
    let b = sm[0];
    let tt = g.transpose_last2(text)?;
    let s = g.matmul(motion, tt)?;
    let neg = g.neg(log_tau);
    let inv_tau = g.exp(neg);
    let logits = g.mul(s, inv_tau)?;
    let eye = g.constant(Tensor::eye(b));
    let rows = g.log_softmax(logits)?;
    let rows = g.mul(rows, eye)?;
    let rows = g.sum(rows);
    let lt = g.transpose_last2(logits)?;
    let cols = g.log_softmax(lt)?;
    let cols = g.mul(cols, eye)?;
    let cols = g.sum(cols);
    let both = g.add(rows, cols)?;
    Ok(g.scale(both, -0.5 / b as f64))
}

/// Top-k retrieval: each motion ranks every caption by cosine similarity; ties
/// go to the lower caption index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub ks: Vec<usize>,
    pub accuracy: Vec<f64>,
    /// Captions whose token sequence also appears at a lower index.
    pub duplicate_captions: usize,
}

/// `motion[i]` is paired with `text[i]`; both are `[P, D]`.
pub fn retrieval_topk(motion: &Tensor, text: &Tensor, ks: &[usize], captions: Option<&[CaptionTokens]>) -> Result<RetrievalReport> {
    if motion.rank() != 2 || motion.shape()[0] < 2 || text.shape() != motion.shape() {
        return Err(Error::invalid(format!("retrieval needs >= 2 matched pairs, got {:?} vs {:?}", motion.shape(), text.shape())));
    }
    let p = motion.shape()[0];
    let norm = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
    let mut hits = vec![0usize; ks.len()];
    for i in 0..p {
        let m = motion.row(i);
        let mn = norm(m);
        let sims: Vec<f64> = (0..p)
            .map(|j| {
                let t = text.row(j);
                m.iter().zip(t).map(|(a, b)| a * b).sum::<f64>() / (mn * norm(t))
            })
            .collect();
        let rank = (0..p).filter(|&j| sims[j] > sims[i] || (sims[j] == sims[i] && j < i)).count();
        for (h, &k) in hits.iter_mut().zip(ks) {
            if rank < k {
                *h += 1;
            }
        }
    }
    let duplicate_captions = captions.map_or(0, |cs| (0..cs.len()).filter(|&j| cs[..j].iter().any(|c| c.valid() == cs[j].valid())).count());
    Ok(RetrievalReport {
        ks: ks.to_vec(),
        accuracy: hits.iter().map(|&h| h as f64 / p as f64).collect(),
        duplicate_captions,
    })
}

/// Dual encoder with its own parameter store.
#[derive(Clone, Debug)]
pub struct MoClipModel {
    pub net: MoClip,
    pub store: ParamStore,
}

/// One logged contrastive step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MoClipStep {
    pub stage: u8,
    pub step: u64,
    pub loss: f64,
    pub tau: f64,
}

impl MoClipModel {
    pub fn new(config: MoClipConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = rng_for(seed, "moclip/init");
        let net = MoClip::new(&mut ParamBuilder::new(&mut store, &mut rng), config)?;
        Ok(MoClipModel { net, store })
    }

    pub fn config(&self) -> &MoClipConfig {
        &self.net.config
    }

    pub fn tau(&self) -> f64 {
        self.store.value(self.net.log_tau).item().exp()
    }

    /// Embeddings of clips, computed 64 at a time.
    pub fn embed_motions(&self, clips: &[&MotionClip]) -> Result<Tensor> {
        let d = self.net.config.d_embed;
        let mut out = Vec::with_capacity(clips.len() * d);
        for chunk in clips.chunks(64) {
            let (x, keep) = pad_motion_batch(chunk)?;
            let mut g = Graph::inference(&self.store);
            let xv = g.constant(x);
            let z = self.net.encode_motion(&mut g, xv, &keep)?;
            out.extend_from_slice(g.value(z).data());
        }
        Tensor::new(&[clips.len(), d], out)
    }

    /// Embeddings of padded windows `[B, T, d]` with frame mask.
    pub fn embed_windows(&self, x: &Tensor, keep: &[bool]) -> Result<Tensor> {
        let mut g = Graph::inference(&self.store);
        let xv = g.constant(x.clone());
        let z = self.net.encode_motion(&mut g, xv, keep)?;
        Ok(g.value(z).clone())
    }

    pub fn embed_captions(&self, captions: &[&CaptionTokens]) -> Result<Tensor> {
        let d = self.net.config.d_embed;
        let mut out = Vec::with_capacity(captions.len() * d);
        for chunk in captions.chunks(64) {
            let (ids, l, keep) = pad_caption_batch(chunk)?;
            let mut g = Graph::inference(&self.store);
            let z = self.net.encode_text(&mut g, &ids, l, &keep)?;
            out.extend_from_slice(g.value(z).data());
        }
        Tensor::new(&[captions.len(), d], out)
    }

    /// Frozen per-token features for conditioning the denoiser.
    pub fn text_context(&self, captions: &[&CaptionTokens]) -> Result<TextContext> {
        let (ids, l, keep) = pad_caption_batch(captions)?;
        let mut g = Graph::inference(&self.store);
        let h = self.net.text_tokens(&mut g, &ids, l, &keep)?;
        Ok(TextContext { tokens: g.value(h).clone(), keep })
    }

    fn step(&mut self, adam: &mut Adam, clips: &[&MotionClip], caps: &[&CaptionTokens]) -> Result<f64> {
        let (x, mkeep) = pad_motion_batch(clips)?;
        let (ids, l, tkeep) = pad_caption_batch(caps)?;
        let (loss, grads) = {
            let mut g = Graph::new(&self.store);
            let xv = g.constant(x);
            let m = self.net.encode_motion(&mut g, xv, &mkeep)?;
            let t = self.net.encode_text(&mut g, &ids, l, &tkeep)?;
            let loss = self.net.loss(&mut g, m, t)?;
            (g.scalar_value(loss), g.backward(loss)?)
        };
        self.store.zero_grads();
        grads.accumulate_into(&mut self.store);
        adam.step(&mut self.store)?;
        Ok(loss)
    }

    /// Stage 1 trains the motion side and τ with the text encoder frozen;
    /// stage 2 additionally unfreezes the last text layer, final norm and
    /// projection, all at `lr * stage2_lr_scale`. Calls `on_step` after
    /// every step.
    pub fn train_two_stage(
        &mut self,
        clips: &[&MotionClip],
        captions: &[&CaptionTokens],
        seed: u64,
        mut on_step: impl FnMut(&MoClipStep),
    ) -> Result<Vec<MoClipStep>> {
        if clips.len() != captions.len() || clips.len() < 2 {
            return Err(Error::invalid("contrastive training needs >= 2 paired clips"));
        }
        let cfg = self.net.config.clone();
        let batch = cfg.batch.min(clips.len());
        let mut rng: SeedRng = rng_for(seed, "moclip/batches");
        let mut log = Vec::new();
        let stages = [(1u8, cfg.stage1_steps, cfg.lr), (2u8, cfg.stage2_steps, cfg.lr * cfg.stage2_lr_scale)];
        for (stage, steps, lr) in stages {
            self.store.set_trainable("", true);
            self.store.set_trainable("text.", false);
            if stage == 2 {
                for p in self.net.stage2_prefixes() {
                    self.store.set_trainable(&p, true);
                }
            }
            let mut adam = Adam::new(AdamConfig { lr, ..Default::default() }, &self.store);
            for step in 1..=steps {
                let idx = sample(&mut rng, clips.len(), batch);
                let bc: Vec<&MotionClip> = idx.iter().map(|i| clips[i]).collect();
                let bt: Vec<&CaptionTokens> = idx.iter().map(|i| captions[i]).collect();
                let loss = self.step(&mut adam, &bc, &bt)?;
                if !loss.is_finite() {
                    return Err(Error::Diverged { step, detail: format!("contrastive loss {loss} in stage {stage}") });
                }
                let rec = MoClipStep { stage, step, loss, tau: self.tau() };
                on_step(&rec);
                log.push(rec);
            }
        }
        self.store.set_trainable("", true);
        Ok(log)
    }

    pub fn save(&self, dir: &Path, step: u64, config_hash: &str, corpus_hash: Option<&str>) -> Result<()> {
        let mut meta = CheckpointMeta::new(step, config_hash);
        meta.role = Some("moclip".into());
        meta.corpus_hash = corpus_hash.map(str::to_string);
        save_checkpoint(dir, &self.store, meta).map(|_| ())
    }

    pub fn load(dir: &Path, config: MoClipConfig) -> Result<(Self, CheckpointMeta)> {
        let meta = read_meta(dir)?;
        if meta.role.as_deref() != Some("moclip") {
            return Err(Error::ConfigMismatch(format!("checkpoint at {} is not a moclip checkpoint", dir.display())));
        }
        let mut model = MoClipModel::new(config, 0)?;
        let meta = load_into(dir, &mut model.store)?;
        Ok((model, meta))
    }
}

/// Writes `stage,step,loss,tau` rows.
pub fn write_loss_csv(path: &Path, log: &[MoClipStep]) -> Result<()> {
    let mut s = String::from("stage,step,loss,tau\n");
    for r in log {
        s.push_str(&format!("{},{},{},{}\n", r.stage, r.step, r.loss, r.tau));
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}
