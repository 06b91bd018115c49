use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::clip::{CaptionTokens, MotionClip, MotionFrameLayout};
use super::format::{decode_clip, encode_clip};
use super::templates::synthesize;
use super::vocab::{ActionTemplate, Vocabulary};
use crate::error::{Error, Result};
use crate::seed::{rng_for, rng_indexed, sha256_hex};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CLIPS_FILE: &str = "clips.lmb";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios { train: 0.8, val: 0.15, test: 0.05 }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let r = [self.train, self.val, self.test];
        if r.iter().any(|&x| !(0.0..=1.0).contains(&x)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("split ratios {r:?} must be in [0,1] and sum to 1")));
        }
        Ok(())
    }
}

/// Disjoint clip index sets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    pub fn of(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Seeded shuffle, then `floor(ratio * n)` to val and test with the remainder to train.
pub fn split(n: usize, ratios: &SplitRatios, seed: u64) -> Result<Splits> {
    ratios.validate()?;
    let val_n = (ratios.val * n as f64 + 1e-9).floor() as usize;
    let test_n = (ratios.test * n as f64 + 1e-9).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, "split"));
    let mut val = order[..val_n].to_vec();
    let mut test = order[val_n..val_n + test_n].to_vec();
    let mut train = order[val_n + test_n..].to_vec();
    for s in [&mut train, &mut val, &mut test] {
        s.sort_unstable();
    }
    Ok(Splits { train, val, test })
}

/// Per-dimension z-score statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Population mean and std over every frame of `clips`; zero-variance
    /// dimensions get divisor 1.
    pub fn fit<'a>(clips: impl IntoIterator<Item = &'a MotionClip>) -> Result<Self> {
        let clips: Vec<&MotionClip> = clips.into_iter().collect();
        let first = clips.first().ok_or_else(|| Error::invalid("cannot fit statistics on an empty corpus"))?;
        let d = first.dims();
        if clips.iter().any(|c| c.dims() != d) {
            return Err(Error::invalid("clips disagree on feature width"));
        }
        let count: usize = clips.iter().map(|c| c.frames()).sum();
        let mut mean = vec![0.0; d];
        for c in &clips {
            for row in c.values().chunks_exact(d) {
                mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
            }
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        let mut var = vec![0.0; d];
        for c in &clips {
            for row in c.values().chunks_exact(d) {
                for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
        }
        let std = var
            .iter()
            .map(|s| {
                let sd = (s / count as f64).sqrt();
                if sd > 1e-12 { sd } else { 1.0 }
            })
            .collect();
        Ok(NormStats { mean, std })
    }

    pub fn dims(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, clip: &MotionClip) -> MotionClip {
        let mut out = clip.clone();
        let d = self.dims();
        for row in out.values_mut().chunks_exact_mut(d) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        out
    }

    pub fn denormalize(&self, clip: &MotionClip) -> MotionClip {
        let mut out = clip.clone();
        let d = self.dims();
        for row in out.values_mut().chunks_exact_mut(d) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = *v * s + m;
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipRecord {
    pub id: String,
    /// Byte offset of the clip's record inside `clips.lmb`.
    pub offset: u64,
    pub frames: usize,
    pub caption: Vec<usize>,
    pub templates: Vec<ActionTemplate>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub format: String,
    pub seed: u64,
    pub fps: f64,
    pub layout: MotionFrameLayout,
    pub vocab: Vocabulary,
    pub ratios: SplitRatios,
    pub stats: NormStats,
    pub clips: Vec<ClipRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub seed: u64,
    pub clip_count: usize,
    pub layout: MotionFrameLayout,
    pub min_frames: usize,
    pub max_frames: usize,
    pub fps: f64,
    pub ratios: SplitRatios,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            seed: 7,
            clip_count: 320,
            layout: MotionFrameLayout::default(),
            min_frames: 32,
            max_frames: 96,
            fps: 20.0,
            ratios: SplitRatios::default(),
        }
    }
}

/// Raw (unnormalized) clips plus their manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub manifest: CorpusManifest,
    pub clips: Vec<MotionClip>,
}

fn template_sequence<R: Rng>(rng: &mut R) -> Vec<ActionTemplate> {
    // one template half the time, two a third, three a sixth
    let count = match rng.random_range(0..6) {
        0..=2 => 1,
        3 | 4 => 2,
        _ => 3,
    };
    let mut seq: Vec<ActionTemplate> = Vec::with_capacity(count);
    while seq.len() < count {
        let t = ActionTemplate::ALL[rng.random_range(0..ActionTemplate::ALL.len())];
        if seq.last() != Some(&t) {
            seq.push(t);
        }
    }
    seq
}

/// Generates one clip from its own `(seed, index)` stream.
pub fn generate_clip(
    config: &CorpusConfig,
    vocab: &Vocabulary,
    index: usize,
) -> Result<(MotionClip, CaptionTokens, Vec<ActionTemplate>)> {
    let mut rng = rng_indexed(config.seed, "clip", index as u64);
    let templates = template_sequence(&mut rng);
    let frames = rng.random_range(config.min_frames..=config.max_frames);
    let caption = vocab.caption_for(&templates, &mut rng)?;
    let data = synthesize(&config.layout, &templates, frames, config.fps, &mut rng);
    let clip = MotionClip::new(format!("clip{index:05}"), config.fps, frames, config.layout.dims, data)?;
    Ok((clip, caption, templates))
}

/// Builds the synthetic paired corpus: clips, captions, split and train-split statistics.
pub fn generate_corpus(config: &CorpusConfig, vocab: &Vocabulary) -> Result<Corpus> {
    config.layout.validate()?;
    config.ratios.validate()?;
    if config.clip_count < 4 {
        return Err(Error::invalid(format!("clip_count must be at least 4 to split, got {}", config.clip_count)));
    }
    if config.min_frames < 2 || config.min_frames > config.max_frames {
        return Err(Error::invalid(format!(
            "frame range [{}, {}] is invalid; need 2 <= min <= max",
            config.min_frames, config.max_frames
        )));
    }
    let splits = split(config.clip_count, &config.ratios, config.seed)?;
    let mut assignment = vec![Split::Train; config.clip_count];
    for &i in &splits.val {
        assignment[i] = Split::Val;
    }
    for &i in &splits.test {
        assignment[i] = Split::Test;
    }
    let mut clips = Vec::with_capacity(config.clip_count);
    let mut records = Vec::with_capacity(config.clip_count);
    let mut offset = 0u64;
    for (i, &split) in assignment.iter().enumerate() {
        let (clip, caption, templates) = generate_clip(config, vocab, i)?;
        records.push(ClipRecord {
            id: clip.id.clone(),
            offset,
            frames: clip.frames(),
            caption: caption.tokens,
            templates,
            split,
        });
        offset += super::format::record_len(clip.frames(), clip.dims()) as u64;
        clips.push(clip);
    }
    let stats = NormStats::fit(splits.train.iter().map(|&i| &clips[i]))?;
    let manifest = CorpusManifest {
        format: "LMB1".into(),
        seed: config.seed,
        fps: config.fps,
        layout: config.layout,
        vocab: vocab.clone(),
        ratios: config.ratios,
        stats,
        clips: records,
    };
    Ok(Corpus { manifest, clips })
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn stats(&self) -> &NormStats {
        &self.manifest.stats
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.manifest.vocab
    }

    pub fn layout(&self) -> &MotionFrameLayout {
        &self.manifest.layout
    }

    pub fn caption(&self, i: usize) -> CaptionTokens {
        CaptionTokens::new(self.manifest.clips[i].caption.clone())
    }

    pub fn templates(&self, i: usize) -> &[ActionTemplate] {
        &self.manifest.clips[i].templates
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.manifest.clips[i].split == split).collect()
    }

    /// Every clip z-scored with the stored train statistics.
    pub fn normalized(&self) -> Vec<MotionClip> {
        self.clips.iter().map(|c| self.manifest.stats.normalize(c)).collect()
    }

    pub fn manifest_bytes(&self) -> Result<Vec<u8>> {
        let mut s = serde_json::to_string_pretty(&self.manifest)?;
        s.push('\n');
        Ok(s.into_bytes())
    }

    pub fn clip_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        for c in &self.clips {
            encode_clip(c, &mut buf);
        }
        buf
    }

    /// Hex SHA-256 over the manifest bytes followed by the clip bytes.
    pub fn hash(&self) -> Result<String> {
        let mut bytes = self.manifest_bytes()?;
        bytes.extend(self.clip_bytes());
        Ok(sha256_hex(&bytes))
    }

    pub fn save(&self, dir: &Path) -> Result<String> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = self.manifest_bytes()?;
        let clips = self.clip_bytes();
        let mp = dir.join(MANIFEST_FILE);
        std::fs::write(&mp, &manifest).map_err(|e| Error::io(&mp, e))?;
        let cp = dir.join(CLIPS_FILE);
        std::fs::write(&cp, &clips).map_err(|e| Error::io(&cp, e))?;
        let mut all = manifest;
        all.extend(clips);
        Ok(sha256_hex(&all))
    }

    pub fn load(dir: &Path) -> Result<Corpus> {
        let mp = dir.join(MANIFEST_FILE);
        if !mp.exists() {
            return Err(Error::MissingInput(format!("no corpus manifest at {}", mp.display())));
        }
        let text = std::fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
        let manifest: CorpusManifest = serde_json::from_str(&text)?;
        manifest.layout.validate()?;
        let cp: PathBuf = dir.join(CLIPS_FILE);
        let bytes = std::fs::read(&cp).map_err(|e| Error::io(&cp, e))?;
        let mut clips = Vec::with_capacity(manifest.clips.len());
        for r in &manifest.clips {
            let (clip, _) = decode_clip(&bytes, r.offset as usize, &r.id, manifest.fps, &cp)?;
            if clip.frames() != r.frames || clip.dims() != manifest.layout.dims {
                return Err(Error::Format {
                    format: "LMB1",
                    path: cp.clone(),
                    detail: format!("clip {} disagrees with its manifest record", r.id),
                });
            }
            clips.push(clip);
        }
        Ok(Corpus { manifest, clips })
    }
}

/// Hash of a saved corpus directory, byte-for-byte as [`Corpus::hash`].
pub fn corpus_dir_hash(dir: &Path) -> Result<String> {
    let mut all = Vec::new();
    for name in [MANIFEST_FILE, CLIPS_FILE] {
        let p = dir.join(name);
        all.extend(std::fs::read(&p).map_err(|e| Error::io(&p, e))?);
    }
    Ok(sha256_hex(&all))
}
