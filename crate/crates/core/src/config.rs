//! One JSON document holding every knob of a run, with presets and hashes.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::anchors::AnchorConfig;
use crate::denoiser::DenoiserConfig;
use crate::diffusion::DiffusionConfig;
use crate::error::{Error, Result};
use crate::moclip::MoClipConfig;
use crate::motiondata::{CorpusConfig, Vocabulary};
use crate::seed::sha256_hex;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Classifier-free guidance scale.
    pub omega: f64,
    /// Sampler timestep stride; 1 runs all T steps.
    pub sample_stride: usize,
    /// Prompts that each get 20 generations for MultiModality; 0 skips it.
    pub mm_prompts: usize,
    pub r_precision_pool: usize,
    pub diversity_pairs: usize,
    pub repeats: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { omega: 2.5, sample_stride: 1, mm_prompts: 2, r_precision_pool: 32, diversity_pairs: 300, repeats: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub enabled: bool,
    pub flush_every: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { enabled: true, flush_every: 50 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root seed; every subsystem derives its stream from it by label.
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub moclip: MoClipConfig,
    pub denoiser: DenoiserConfig,
    pub anchors: AnchorConfig,
    /// Trains with the dual anchor loss; off is the plain DDPM baseline.
    pub dal: bool,
    pub diffusion: DiffusionConfig,
    pub train_steps: u64,
    pub eval: EvalConfig,
    pub probe: ProbeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            corpus: CorpusConfig::default(),
            moclip: MoClipConfig::default(),
            denoiser: DenoiserConfig::default(),
            anchors: AnchorConfig::default(),
            dal: true,
            diffusion: DiffusionConfig::default(),
            train_steps: 2000,
            eval: EvalConfig::default(),
            probe: ProbeConfig::default(),
        }
    }
}

/// Which artifacts a hash covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Data,
    MoClip,
    Train,
}

impl RunConfig {
    /// Smaller networks and schedules sized for a single CPU core.
    pub fn desk() -> Self {
        RunConfig {
            moclip: MoClipConfig { stage1_steps: 200, stage2_steps: 100, ..Default::default() },
            denoiser: DenoiserConfig { base_channels: 16, ..Default::default() },
            diffusion: DiffusionConfig { batch: 8, ..Default::default() },
            ..Default::default()
        }
    }

    /// Seconds-scale configuration for smoke tests.
    pub fn tiny() -> Self {
        RunConfig {
            seed: 11,
            corpus: CorpusConfig { seed: 11, clip_count: 40, min_frames: 16, max_frames: 24, ..Default::default() },
            moclip: MoClipConfig {
                d_model: 8,
                d_embed: 8,
                motion_layers: 1,
                text_layers: 1,
                batch: 4,
                stage1_steps: 3,
                stage2_steps: 2,
                ..Default::default()
            },
            denoiser: DenoiserConfig { base_channels: 4, d_emb: 8, d_c: 8, ..Default::default() },
            anchors: AnchorConfig { k: 8, d_a: 8, hidden: 8, ..Default::default() },
            diffusion: DiffusionConfig { timesteps: 50, batch: 2, window: 16, ..Default::default() },
            train_steps: 5,
            eval: EvalConfig { omega: 2.5, sample_stride: 10, mm_prompts: 1, r_precision_pool: 4, diversity_pairs: 10, repeats: 1 },
            ..Default::default()
        }
    }

    /// Sets the root seed, which the corpus generator shares.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.corpus.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.moclip.validate()?;
        self.denoiser.validate()?;
        self.anchors.validate()?;
        self.diffusion.validate()?;
        let dims = self.corpus.layout.dims;
        let vocab = Vocabulary::default().len();
        let checks = [
            (self.moclip.d_motion == dims, format!("moclip.d_motion {} != frame width {dims}", self.moclip.d_motion)),
            (self.denoiser.d_motion == dims, format!("denoiser.d_motion {} != frame width {dims}", self.denoiser.d_motion)),
            (self.moclip.vocab_size == vocab, format!("moclip.vocab_size {} != vocabulary size {vocab}", self.moclip.vocab_size)),
            (self.denoiser.d_c == self.moclip.d_model, format!("denoiser.d_c {} != moclip.d_model {}", self.denoiser.d_c, self.moclip.d_model)),
            (self.anchors.d_a == self.moclip.d_embed, format!("anchors.d_a {} != moclip.d_embed {}", self.anchors.d_a, self.moclip.d_embed)),
            (self.corpus.seed == self.seed, format!("corpus.seed {} must equal the root seed {}", self.corpus.seed, self.seed)),
            (self.train_steps > 0, "train_steps must be positive".to_string()),
            (self.eval.sample_stride > 0 && self.eval.repeats > 0, "eval stride and repeats must be positive".to_string()),
            (self.eval.omega.is_finite(), format!("omega must be finite, got {}", self.eval.omega)),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::invalid(msg));
            }
        }
        Ok(())
    }

    /// Hash of the fields that determine the artifacts of `stage`.
    pub fn stage_hash(&self, stage: Stage) -> String {
        let doc = match stage {
            Stage::Data => json!({ "corpus": self.corpus }),
            Stage::MoClip => json!({ "seed": self.seed, "corpus": self.corpus, "moclip": self.moclip }),
            Stage::Train => json!({
                "seed": self.seed,
                "corpus": self.corpus,
                "moclip": self.moclip,
                "denoiser": self.denoiser,
                "anchors": self.anchors,
                "dal": self.dal,
                "diffusion": self.diffusion,
                "train_steps": self.train_steps,
            }),
        };
        sha256_hex(doc.to_string().as_bytes())
    }

    /// Hash of the whole document.
    pub fn hash(&self) -> String {
        sha256_hex(&self.to_bytes())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s.into_bytes()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}
