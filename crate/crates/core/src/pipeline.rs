//! End-to-end stages shared by the command line, examples and tests.

use std::sync::Arc;

use crate::config::RunConfig;
use crate::diffkernel::{ParamStore, Tensor};
use crate::diffusion::{sample_normalized, DiffusionModel, SampleRequest, Schedule, Trainer, TrainStepRecord, TrainingSet};
use crate::error::{Error, Result};
use crate::evalprobe::{diversity, fid, mm_dist, multimodality, r_precision, GradProbe, MetricsReport, MULTIMODALITY_SAMPLES};
use crate::moclip::{MoClipModel, MoClipStep};
use crate::motiondata::{generate_corpus, ActionTemplate, CaptionTokens, Corpus, MotionClip, Split, Vocabulary};
use crate::seed::{derive_seed, rng_for};

pub fn generate(cfg: &RunConfig) -> Result<Corpus> {
    cfg.validate()?;
    generate_corpus(&cfg.corpus, &Vocabulary::default())
}

/// Normalized clips and captions of the given splits, in corpus order.
pub fn split_data(corpus: &Corpus, splits: &[Split]) -> (Vec<usize>, Vec<MotionClip>, Vec<CaptionTokens>) {
    let idx: Vec<usize> = (0..corpus.len()).filter(|&i| splits.contains(&corpus.manifest.clips[i].split)).collect();
    let clips = idx.iter().map(|&i| corpus.stats().normalize(&corpus.clips[i])).collect();
    let caps = idx.iter().map(|&i| corpus.caption(i)).collect();
    (idx, clips, caps)
}

/// Builds and trains the dual encoder on the train split.
pub fn train_moclip(cfg: &RunConfig, corpus: &Corpus, on_step: impl FnMut(&MoClipStep)) -> Result<(MoClipModel, Vec<MoClipStep>)> {
    let (_, clips, caps) = split_data(corpus, &[Split::Train]);
    let mut model = MoClipModel::new(cfg.moclip.clone(), derive_seed(cfg.seed, "moclip"))?;
    let log = model.train_two_stage(&clips.iter().collect::<Vec<_>>(), &caps.iter().collect::<Vec<_>>(), cfg.seed, on_step)?;
    Ok((model, log))
}

/// Labels used to pick mismatched captions: the template sequence of each clip.
pub fn caption_labels(corpus: &Corpus) -> Vec<Vec<ActionTemplate>> {
    (0..corpus.len()).map(|i| corpus.templates(i).to_vec()).collect()
}

/// Top-1/2/3 retrieval of held-out motions against `pool`-way caption pools
/// drawn from every corpus caption with a different template sequence.
pub fn moclip_retrieval(model: &MoClipModel, corpus: &Corpus, pool: usize, seed: u64) -> Result<[f64; 3]> {
    let (idx, clips, _) = split_data(corpus, &[Split::Val, Split::Test]);
    let motion = model.embed_motions(&clips.iter().collect::<Vec<_>>())?;
    let all_caps: Vec<CaptionTokens> = (0..corpus.len()).map(|i| corpus.caption(i)).collect();
    let text = model.embed_captions(&all_caps.iter().collect::<Vec<_>>())?;
    let labels = caption_labels(corpus);
    r_precision(&motion, &text, &idx, Some(&labels), pool, &mut rng_for(seed, "moclip/retrieval"))
}

/// Train and validation sets with frozen caption features.
pub fn training_sets(corpus: &Corpus, moclip: &MoClipModel) -> Result<(TrainingSet, TrainingSet)> {
    let (_, tc, tcap) = split_data(corpus, &[Split::Train]);
    let (_, vc, vcap) = split_data(corpus, &[Split::Val]);
    Ok((TrainingSet::new(tc, tcap, moclip)?, TrainingSet::new(vc, vcap, moclip)?))
}

pub fn new_trainer(cfg: &RunConfig, train: Arc<TrainingSet>, moclip: Arc<MoClipModel>) -> Result<Trainer> {
    cfg.validate()?;
    let anchors = cfg.dal.then(|| cfg.anchors.clone());
    Trainer::new(cfg.diffusion.clone(), cfg.denoiser.clone(), anchors, train, moclip, cfg.seed, cfg.train_steps)
}

/// Runs `cfg.train_steps` steps, feeding the probe after every backward.
pub fn train(
    cfg: &RunConfig,
    trainer: &mut Trainer,
    mut probe: Option<&mut GradProbe>,
    mut on_record: impl FnMut(&Trainer, &TrainStepRecord) -> Result<()>,
) -> Result<Vec<TrainStepRecord>> {
    let mut log = Vec::with_capacity(cfg.train_steps as usize);
    while trainer.steps_done() < cfg.train_steps {
        let mut probe_err = Ok(());
        let rec = trainer.train_step_observed(|store, rec| {
            if let Some(p) = probe.as_deref_mut() {
                probe_err = p.record(rec.step, rec.t, store);
            }
        })?;
        probe_err?;
        on_record(trainer, &rec)?;
        log.push(rec);
    }
    if let Some(p) = probe {
        p.finish()?;
    }
    Ok(log)
}

/// Samples `captions` in batches of at most `chunk`.
pub fn sample_captions(
    model: &DiffusionModel,
    store: &ParamStore,
    moclip: &MoClipModel,
    schedule: &Schedule,
    captions: &[CaptionTokens],
    req: &SampleRequest,
    chunk: usize,
) -> Result<Vec<MotionClip>> {
    let mut out = Vec::with_capacity(captions.len());
    for (c, part) in captions.chunks(chunk.max(1)).enumerate() {
        let r = SampleRequest { seed: derive_seed(req.seed, &format!("chunk{c}")), ..req.clone() };
        out.extend(sample_normalized(model, store, moclip, schedule, &part.iter().collect::<Vec<_>>(), &r)?);
    }
    Ok(out)
}

/// Everything `evaluate` needs from a trained run.
pub struct EvalInputs<'a> {
    pub cfg: &'a RunConfig,
    pub corpus: &'a Corpus,
    pub moclip: &'a MoClipModel,
    pub model: &'a DiffusionModel,
    pub store: &'a ParamStore,
    pub checkpoint_hash: String,
}

/// Generates one motion per held-out caption and scores it in the motion
/// encoder's feature space; `repeat` selects the sampling seed.
pub fn evaluate(inp: &EvalInputs<'_>, repeat: usize) -> Result<MetricsReport> {
    let cfg = inp.cfg;
    let seed = derive_seed(cfg.seed, &format!("eval/{repeat}"));
    let schedule = cfg.diffusion.schedule()?;
    let (idx, real, caps) = split_data(inp.corpus, &[Split::Val, Split::Test]);
    if idx.is_empty() {
        return Err(Error::MissingInput("corpus has no held-out clips".into()));
    }
    let req = SampleRequest {
        frames: cfg.diffusion.window,
        fps: inp.corpus.manifest.fps,
        omega: cfg.eval.omega,
        stride: cfg.eval.sample_stride,
        seed,
    };
    let chunk = cfg.diffusion.batch.max(8);
    let generated = sample_captions(inp.model, inp.store, inp.moclip, &schedule, &caps, &req, chunk)?;
    let real_f = inp.moclip.embed_motions(&real.iter().collect::<Vec<_>>())?;
    let gen_f = inp.moclip.embed_motions(&generated.iter().collect::<Vec<_>>())?;
    let all_caps: Vec<CaptionTokens> = (0..inp.corpus.len()).map(|i| inp.corpus.caption(i)).collect();
    let text_f = inp.moclip.embed_captions(&all_caps.iter().collect::<Vec<_>>())?;
    let paired = Tensor::new(
        gen_f.shape(),
        idx.iter().flat_map(|&i| text_f.row(i).to_vec()).collect(),
    )?;
    let labels = caption_labels(inp.corpus);
    let rp = r_precision(&gen_f, &text_f, &idx, Some(&labels), cfg.eval.r_precision_pool, &mut rng_for(seed, "rprecision"))?;
    let div = diversity(&gen_f, cfg.eval.diversity_pairs, &mut rng_for(seed, "diversity"))?;
    let mm = mm_dist(&gen_f, &paired)?;
    let prompts = cfg.eval.mm_prompts.min(caps.len());
    let multimod = if prompts > 0 {
        let mut per_prompt = Vec::with_capacity(prompts);
        for (p, cap) in caps.iter().take(prompts).enumerate() {
            let batch = vec![cap.clone(); MULTIMODALITY_SAMPLES];
            let r = SampleRequest { seed: derive_seed(seed, &format!("multimodality/{p}")), ..req.clone() };
            let clips = sample_captions(inp.model, inp.store, inp.moclip, &schedule, &batch, &r, MULTIMODALITY_SAMPLES)?;
            per_prompt.push(inp.moclip.embed_motions(&clips.iter().collect::<Vec<_>>())?);
        }
        Some(multimodality(&per_prompt)?)
    } else {
        None
    };
    Ok(MetricsReport {
        fid: fid(&real_f, &gen_f)?,
        r_precision: rp,
        diversity: div,
        mm_dist: mm,
        multimodality: multimod,
        real_count: real.len(),
        generated_count: generated.len(),
        multimodality_prompts: prompts,
        seed,
        checkpoint_hash: inp.checkpoint_hash.clone(),
        config_hash: cfg.stage_hash(crate::config::Stage::Train),
    })
}
