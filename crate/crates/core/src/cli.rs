//! The `anchordiff` command line: run directories, config overrides, staged artifacts.

use std::ffi::OsString;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use crate::anchors::WeightingStrategy;
use crate::config::{RunConfig, Stage};
use crate::denoiser::TapSite;
use crate::diffkernel::{load_into, read_meta, save_checkpoint, CheckpointMeta, ParamStore};
use crate::diffusion::{sample, save_samples, write_train_log, DiffusionModel, Predict, SampleRequest, SampleSidecar};
use crate::error::{Error, Result};
use crate::evalprobe::{min_down_ratio, read_probe_csv, summarize, GradProbe};
use crate::moclip::{write_loss_csv, MoClipModel};
use crate::motiondata::{corpus_dir_hash, Corpus, Split};
use crate::pipeline;
use crate::seed::{derive_seed, sha256_hex};
use crate::spectral::energy_spectrum;

pub const RUNS_DIR_ENV: &str = "ANCHORDIFF_RUNS_DIR";

#[derive(Parser, Debug)]
#[command(name = "anchordiff", version, about = "Text-to-motion diffusion with dual semantic anchors")]
pub struct Cli {
    /// Run root; defaults to $ANCHORDIFF_RUNS_DIR, then ./runs.
    #[arg(long, global = true)]
    pub runs_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic motion corpus.
    GenData(Common),
    /// Train the motion-text dual encoder.
    MoclipTrain(Common),
    /// Train the denoiser, with or without the anchor losses.
    Train {
        #[command(flatten)]
        common: Common,
        /// Validation l_ddpm every this many steps into logs/val.csv; 0 disables.
        #[arg(long, default_value_t = 0)]
        val_every: u64,
    },
    /// Generate motions for captions.
    Sample {
        #[command(flatten)]
        common: Common,
        /// Caption text; repeatable. Defaults to the first four test captions.
        #[arg(long = "caption")]
        captions: Vec<String>,
        /// Frames per motion; defaults to the training window.
        #[arg(long)]
        frames: Option<usize>,
        /// Output file stem under samples/.
        #[arg(long, default_value = "sample")]
        name: String,
    },
    /// Score generations on held-out captions.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Corpus directory to evaluate against; defaults to the run's own.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Summarize the per-layer gradient log of a training run.
    GradprobeReport(Common),
    /// DCT energy spectrum of the corpus.
    DctAnalyze(Common),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Preset {
    Default,
    Desk,
    Tiny,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Run name; artifacts go to <runs-dir>/<run>/.
    #[arg(long, default_value = "default")]
    pub run: String,
    /// Base config file; otherwise the run's config.json, otherwise the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "default")]
    pub preset: Preset,
    #[command(flatten)]
    pub overrides: Overrides,
}

/// Flags that override config fields; flags win over the file.
#[derive(Args, Debug, Clone, Default)]
pub struct Overrides {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lambda_fre: Option<f64>,
    #[arg(long)]
    pub lambda_tem: Option<f64>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub tap: Option<TapSite>,
    #[arg(long)]
    pub omega: Option<f64>,
    #[arg(long)]
    pub strategy: Option<WeightingStrategy>,
    #[arg(long)]
    pub n_decay: Option<u64>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub predict: Option<Predict>,
    /// Enables or disables the anchor losses.
    #[arg(long)]
    pub dal: Option<bool>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(s) = self.seed {
            cfg.set_seed(s);
        }
        if let Some(v) = self.lambda_fre {
            cfg.anchors.lambda_fre = v;
        }
        if let Some(v) = self.lambda_tem {
            cfg.anchors.lambda_tem = v;
        }
        if let Some(v) = self.k {
            cfg.anchors.k = v;
        }
        if let Some(v) = self.tap {
            cfg.denoiser.tap = v;
        }
        if let Some(v) = self.omega {
            cfg.eval.omega = v;
        }
        if let Some(v) = self.strategy {
            cfg.anchors.strategy = v;
        }
        if let Some(v) = self.n_decay {
            cfg.anchors.n_decay = Some(v);
        }
        if let Some(v) = self.steps {
            cfg.train_steps = v;
        }
        if let Some(v) = self.predict {
            cfg.diffusion.predict = v;
        }
        if let Some(v) = self.dal {
            cfg.dal = v;
        }
    }
}

/// Exclusive hold on a run directory, released on drop.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(RunLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(run_dir.to_path_buf())),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// A resolved run directory with its effective config.
pub struct Run {
    pub dir: PathBuf,
    pub config: RunConfig,
    _lock: RunLock,
}

impl Run {
    pub fn open(runs_dir: &Path, common: &Common) -> Result<Self> {
        if common.run.is_empty() || common.run.contains(['/', '\\']) || common.run.starts_with('.') {
            return Err(Error::invalid(format!("bad run name {:?}", common.run)));
        }
        let dir = runs_dir.join(&common.run);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let lock = RunLock::acquire(&dir)?;
        let existing = dir.join("config.json");
        let mut config = if let Some(p) = &common.config {
            RunConfig::load(p)?
        } else if existing.exists() {
            RunConfig::load(&existing)?
        } else {
            match common.preset {
                Preset::Default => RunConfig::default(),
                Preset::Desk => RunConfig::desk(),
                Preset::Tiny => RunConfig::tiny(),
            }
        };
        common.overrides.apply(&mut config);
        config.validate()?;
        config.save(&existing)?;
        Ok(Run { dir, config, _lock: lock })
    }

    pub fn path(&self, rel: &str) -> Result<PathBuf> {
        let p = self.dir.join(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        Ok(p)
    }

    fn write_json(&self, rel: &str, value: &Value) -> Result<()> {
        let p = self.path(rel)?;
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    }

    /// The run's corpus, refused if it was generated from other corpus settings.
    fn corpus(&self) -> Result<(Corpus, String)> {
        let dir = self.dir.join("corpus");
        let report = self.dir.join("reports/corpus.json");
        if !report.exists() {
            return Err(Error::MissingInput(format!("no corpus in {}; run gen-data first", self.dir.display())));
        }
        let recorded: Value = serde_json::from_str(&fs::read_to_string(&report).map_err(|e| Error::io(&report, e))?)?;
        if recorded["data_hash"].as_str() != Some(self.config.stage_hash(Stage::Data).as_str()) {
            return Err(Error::ConfigMismatch("corpus was generated from different corpus settings; rerun gen-data".into()));
        }
        let corpus = Corpus::load(&dir)?;
        let hash = corpus_dir_hash(&dir)?;
        Ok((corpus, hash))
    }

    fn moclip(&self, corpus_hash: &str) -> Result<MoClipModel> {
        let dir = self.dir.join("moclip");
        if !dir.join("meta.json").exists() {
            return Err(Error::MissingInput(format!("no moclip checkpoint in {}; run moclip-train first", self.dir.display())));
        }
        let (model, meta) = MoClipModel::load(&dir, self.config.moclip.clone())?;
        if meta.config_hash != self.config.stage_hash(Stage::MoClip) {
            return Err(Error::ConfigMismatch("moclip checkpoint was trained with a different config".into()));
        }
        if meta.corpus_hash.as_deref() != Some(corpus_hash) {
            return Err(Error::ConfigMismatch("moclip checkpoint was trained on a different corpus".into()));
        }
        Ok(model)
    }

    /// The trained denoiser, refused unless its train-stage hash matches.
    fn denoiser(&self) -> Result<(DiffusionModel, ParamStore, CheckpointMeta, String)> {
        let dir = self.dir.join("checkpoint");
        if !dir.join("meta.json").exists() {
            return Err(Error::MissingInput(format!("no denoiser checkpoint in {}; run train first", self.dir.display())));
        }
        let meta = read_meta(&dir)?;
        if meta.role.as_deref() != Some("denoiser") {
            return Err(Error::ConfigMismatch(format!("checkpoint at {} is not a denoiser checkpoint", dir.display())));
        }
        if meta.config_hash != self.config.stage_hash(Stage::Train) {
            return Err(Error::ConfigMismatch("denoiser checkpoint was trained with a different config".into()));
        }
        let cfg = &self.config;
        let mut store = ParamStore::new();
        let model = DiffusionModel::new(
            &mut store,
            cfg.denoiser.clone(),
            cfg.dal.then(|| cfg.anchors.clone()),
            cfg.diffusion.window,
            cfg.diffusion.predict,
            cfg.seed,
        )?;
        load_into(&dir, &mut store)?;
        let bin = dir.join("params.bin");
        let hash = sha256_hex(&fs::read(&bin).map_err(|e| Error::io(&bin, e))?);
        Ok((model, store, meta, hash))
    }
}

pub fn runs_root(flag: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| std::env::var_os(RUNS_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn progress(msg: impl AsRef<str>) {
    eprintln!("{}", msg.as_ref());
}

fn gen_data(run: &Run) -> Result<Value> {
    let corpus = pipeline::generate(&run.config)?;
    let hash = corpus.save(&run.dir.join("corpus"))?;
    let sizes: Vec<usize> = [Split::Train, Split::Val, Split::Test].iter().map(|&s| corpus.indices(s).len()).collect();
    let report = json!({
        "corpus_hash": hash,
        "data_hash": run.config.stage_hash(Stage::Data),
        "clips": corpus.len(),
        "train": sizes[0],
        "val": sizes[1],
        "test": sizes[2],
    });
    run.write_json("reports/corpus.json", &report)?;
    Ok(report)
}

fn moclip_train(run: &Run) -> Result<Value> {
    let (corpus, corpus_hash) = run.corpus()?;
    let total = run.config.moclip.stage1_steps + run.config.moclip.stage2_steps;
    let (model, log) = pipeline::train_moclip(&run.config, &corpus, |s| {
        if s.step % 100 == 0 {
            progress(format!("moclip stage {} step {} loss {:.4}", s.stage, s.step, s.loss));
        }
    })?;
    write_loss_csv(&run.path("logs/moclip_loss.csv")?, &log)?;
    model.save(&run.dir.join("moclip"), total, &run.config.stage_hash(Stage::MoClip), Some(&corpus_hash))?;
    let pool = run.config.eval.r_precision_pool;
    let top = pipeline::moclip_retrieval(&model, &corpus, pool, derive_seed(run.config.seed, "moclip/eval"))?;
    let report = json!({
        "steps": total,
        "final_loss": log.last().map(|s| s.loss),
        "tau": model.tau(),
        "pool": pool,
        "top1": top[0],
        "top2": top[1],
        "top3": top[2],
        "config_hash": run.config.stage_hash(Stage::MoClip),
    });
    run.write_json("reports/moclip.json", &report)?;
    Ok(report)
}

fn train(run: &Run, val_every: u64) -> Result<Value> {
    let cfg = &run.config;
    let (corpus, corpus_hash) = run.corpus()?;
    let moclip = Arc::new(run.moclip(&corpus_hash)?);
    let (train_set, val_set) = pipeline::training_sets(&corpus, &moclip)?;
    let mut trainer = pipeline::new_trainer(cfg, Arc::new(train_set), moclip)?;
    let mut probe = if cfg.probe.enabled {
        Some(GradProbe::to_csv(&run.path("logs/gradprobe.csv")?, cfg.probe.flush_every)?)
    } else {
        None
    };
    let val_seed = derive_seed(cfg.seed, "validation");
    let mut val_log = String::from("step,val_l_ddpm\n");
    let log = pipeline::train(cfg, &mut trainer, probe.as_mut(), |tr, rec| {
        if rec.step % 100 == 0 {
            progress(format!("train step {} l_ddpm {:.4} total {:.4}", rec.step, rec.l_ddpm, rec.total));
        }
        if val_every > 0 && rec.step % val_every == 0 {
            let v = tr.validation_loss(&val_set, 1, val_seed)?;
            val_log.push_str(&format!("{},{v}\n", rec.step));
        }
        Ok(())
    })?;
    write_train_log(&run.path("logs/train.csv")?, &log)?;
    if val_every > 0 {
        let p = run.path("logs/val.csv")?;
        fs::write(&p, &val_log).map_err(|e| Error::io(&p, e))?;
    }
    let mut meta = CheckpointMeta::new(trainer.steps_done(), cfg.stage_hash(Stage::Train));
    meta.role = Some("denoiser".into());
    meta.corpus_hash = Some(corpus_hash);
    save_checkpoint(&run.dir.join("checkpoint"), &trainer.store, meta)?;
    let val = trainer.validation_loss(&val_set, 1, val_seed)?;
    let last = log.last().ok_or_else(|| Error::invalid("no training steps ran"))?;
    let dropped: u64 = log.iter().map(|r| r.cond_dropped as u64).sum();
    let report = json!({
        "steps": trainer.steps_done(),
        "dal": cfg.dal,
        "final_l_ddpm": last.l_ddpm,
        "final_total": last.total,
        "val_l_ddpm": val,
        "cond_drop_fraction": dropped as f64 / (log.len() * cfg.diffusion.batch) as f64,
        "config_hash": cfg.stage_hash(Stage::Train),
    });
    run.write_json("reports/train.json", &report)?;
    Ok(report)
}

fn sample_cmd(run: &Run, captions: &[String], frames: Option<usize>, name: &str) -> Result<Value> {
    if name.is_empty() || name.contains(['/', '\\']) {
        return Err(Error::invalid(format!("bad sample name {name:?}")));
    }
    let cfg = &run.config;
    let (corpus, corpus_hash) = run.corpus()?;
    let moclip = run.moclip(&corpus_hash)?;
    let (model, store, _, ckpt_hash) = run.denoiser()?;
    let caps: Vec<_> = if captions.is_empty() {
        corpus.indices(Split::Test).into_iter().take(4).map(|i| corpus.caption(i)).collect()
    } else {
        captions.iter().map(|c| corpus.vocab().encode_text(c)).collect()
    };
    let text: Vec<String> = caps.iter().map(|c| corpus.vocab().decode_text(c)).collect();
    let req = SampleRequest {
        frames: frames.unwrap_or(cfg.diffusion.window),
        fps: corpus.manifest.fps,
        omega: cfg.eval.omega,
        stride: cfg.eval.sample_stride,
        seed: derive_seed(cfg.seed, &format!("sample/{name}")),
    };
    let schedule = cfg.diffusion.schedule()?;
    let clips = sample(&model, &store, &moclip, &schedule, &caps.iter().collect::<Vec<_>>(), &req, corpus.stats())?;
    let sidecar = SampleSidecar {
        captions: text,
        seed: req.seed,
        omega: req.omega,
        steps: crate::diffusion::sampling_timesteps(schedule.steps(), req.stride)?.len(),
        stride: req.stride,
        frames: req.frames,
        checkpoint: ckpt_hash,
    };
    save_samples(&run.dir.join("samples"), name, &clips, &sidecar)?;
    Ok(serde_json::to_value(&sidecar)?)
}

fn eval(run: &Run, corpus_dir: Option<&Path>) -> Result<Value> {
    let (model, store, meta, ckpt_hash) = run.denoiser()?;
    let (corpus, corpus_hash) = match corpus_dir {
        Some(d) => (Corpus::load(d)?, corpus_dir_hash(d)?),
        None => run.corpus()?,
    };
    if meta.corpus_hash.as_deref() != Some(corpus_hash.as_str()) {
        return Err(Error::ConfigMismatch("checkpoint was trained on a corpus with different statistics".into()));
    }
    let moclip = run.moclip(&corpus_hash)?;
    let inputs = pipeline::EvalInputs {
        cfg: &run.config,
        corpus: &corpus,
        moclip: &moclip,
        model: &model,
        store: &store,
        checkpoint_hash: ckpt_hash,
    };
    let mut reports = Vec::with_capacity(run.config.eval.repeats);
    for r in 0..run.config.eval.repeats {
        progress(format!("eval repeat {}/{}", r + 1, run.config.eval.repeats));
        reports.push(pipeline::evaluate(&inputs, r)?);
    }
    let stat = |f: &dyn Fn(&crate::evalprobe::MetricsReport) -> f64| {
        let v: Vec<f64> = reports.iter().map(f).collect();
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let sd = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
        json!({ "mean": m, "std": sd })
    };
    let summary = json!({
        "repeats": reports.len(),
        "fid": stat(&|r| r.fid),
        "top1": stat(&|r| r.r_precision[0]),
        "top2": stat(&|r| r.r_precision[1]),
        "top3": stat(&|r| r.r_precision[2]),
        "diversity": stat(&|r| r.diversity),
        "mm_dist": stat(&|r| r.mm_dist),
        "runs": reports,
    });
    run.write_json("reports/metrics.json", &summary)?;
    Ok(summary)
}

fn gradprobe_report(run: &Run) -> Result<Value> {
    let p = run.dir.join("logs/gradprobe.csv");
    if !p.exists() {
        return Err(Error::MissingInput(format!("no gradient log at {}", p.display())));
    }
    let rows = read_probe_csv(&p)?;
    let report = json!({
        "rows": rows.len(),
        "min_down_ratio": min_down_ratio(&rows),
        "layers": summarize(&rows),
    });
    run.write_json("reports/gradprobe.json", &report)?;
    Ok(report)
}

fn dct_analyze(run: &Run) -> Result<Value> {
    let (corpus, _) = run.corpus()?;
    let k = run.config.anchors.k;
    let spec = energy_spectrum(&corpus.normalized(), k)?;
    spec.write_csv(&run.path("reports/dct_energy.csv")?)?;
    let report = json!({ "k": k, "retained_ratio": spec.retained_ratio, "clips": corpus.len() });
    run.write_json("reports/dct_energy.json", &report)?;
    Ok(report)
}

pub fn execute(cli: &Cli) -> Result<Value> {
    let root = runs_root(cli.runs_dir.as_deref());
    let (name, common) = match &cli.command {
        Command::GenData(c) => ("gen-data", c),
        Command::MoclipTrain(c) => ("moclip-train", c),
        Command::Train { common, .. } => ("train", common),
        Command::Sample { common, .. } => ("sample", common),
        Command::Eval { common, .. } => ("eval", common),
        Command::GradprobeReport(c) => ("gradprobe-report", c),
        Command::DctAnalyze(c) => ("dct-analyze", c),
    };
    let run = Run::open(&root, common)?;
    let mut out = match &cli.command {
        Command::GenData(_) => gen_data(&run)?,
        Command::MoclipTrain(_) => moclip_train(&run)?,
        Command::Train { val_every, .. } => train(&run, *val_every)?,
        Command::Sample { captions, frames, name, .. } => sample_cmd(&run, captions, *frames, name)?,
        Command::Eval { corpus, .. } => eval(&run, corpus.as_deref())?,
        Command::GradprobeReport(_) => gradprobe_report(&run)?,
        Command::DctAnalyze(_) => dct_analyze(&run)?,
    };
    if let Value::Object(m) = &mut out {
        if name != "eval" {
            m.insert("command".into(), json!(name));
            m.insert("run".into(), json!(run.dir.display().to_string()));
        }
    }
    Ok(out)
}

fn error_json(code: &str, message: &str) -> String {
    json!({ "error": code, "message": message }).to_string()
}

/// Parses `args`, runs the command, prints its JSON result, and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            eprintln!("{}", error_json("usage", e.to_string().trim()));
            return 2;
        }
    };
    match execute(&cli) {
        Ok(v) => {
            use std::io::Write;
            let _ = writeln!(std::io::stdout(), "{v}");
            0
        }
        Err(e) => {
            eprintln!("{}", error_json(e.code(), &e.to_string()));
            1
        }
    }
}
