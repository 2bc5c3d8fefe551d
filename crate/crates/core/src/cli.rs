//! `textsr` subcommands: `gen`, `train`, `sample`, `eval`.
//!
//! Every command resolves a [`RunConfig`], writes it to `<out>/config.txt`
//! and derives all randomness from the root seed through named substreams.

use std::ffi::OsString;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use clap::{Args, Parser, Subcommand};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::{self, EvalItem};
use crate::mmformer::{MmFormer, ModelConfig};
use crate::rng;
use crate::sampler::{sample_batch, ModelDenoiser};
use crate::synthdata::{self, BatchSource, ManifestSource, OnlineSource};
use crate::textdiff::Vocab;
use crate::trainer::{train_step, TrainState};

pub const CONFIG_FILE: &str = "config.txt";
pub const FINAL_CHECKPOINT: &str = "checkpoint.safetensors";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const REPORT_FILE: &str = "report.tsv";

#[derive(Debug, Parser)]
#[command(name = "textsr", about = "Joint image/text diffusion for text-line super-resolution")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (overrides `out_dir` and the environment).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Extra `key=value` overrides, applied in order.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render and degrade a paired dataset.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        count: Option<usize>,
        /// Degradation factor (2 or 4).
        #[arg(long)]
        scale: Option<usize>,
    },
    /// Train the joint model.
    Train {
        #[command(flatten)]
        common: Common,
        /// Total step count.
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long = "guidance.w")]
        guidance_w: Option<f64>,
        /// Training manifest; without it batches are rendered on the fly.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Continue from a checkpoint, keeping its step count.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Super-resolve one LR image and read its text.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        lr: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        /// Sampling-time guidance scale.
        #[arg(long = "guidance.w")]
        guidance_w: Option<f64>,
        /// Write the image and tokens after every step.
        #[arg(long)]
        dump_trajectory: bool,
    },
    /// Sample every record of a manifest and score it.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long = "guidance.w")]
        guidance_w: Option<f64>,
    },
}

fn overrides(common: &Common, extra: Vec<(&str, Option<String>)>) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for s in &common.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {s:?}")))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(seed) = common.seed {
        out.push(("seed".into(), seed.to_string()));
    }
    if let Some(dir) = &common.out {
        out.push(("out_dir".into(), dir.display().to_string()));
    }
    for (k, v) in extra {
        if let Some(v) = v {
            out.push((k.to_string(), v));
        }
    }
    Ok(out)
}

fn resolve(common: &Common, env: &dyn Fn(&str) -> Option<String>, extra: Vec<(&str, Option<String>)>) -> Result<RunConfig> {
    RunConfig::resolve(common.config.as_deref(), env, &overrides(common, extra)?)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return Ok(());
        }
        Err(e) => return Err(Error::Config(e.to_string())),
    };
    run_command(cli.command, &|k| std::env::var(k).ok())
}

pub fn run_command(command: Command, env: &dyn Fn(&str) -> Option<String>) -> Result<()> {
    match command {
        Command::Gen { common, count, scale } => {
            let cfg = resolve(
                &common,
                env,
                vec![
                    ("data.count", count.map(|c| c.to_string())),
                    ("model.lr_scale", scale.map(|s| s.to_string())),
                ],
            )?;
            cmd_gen(&cfg)
        }
        Command::Train {
            common,
            steps,
            guidance_w,
            manifest,
            resume,
        } => {
            let cfg = resolve(
                &common,
                env,
                vec![
                    ("train.steps", steps.map(|s| s.to_string())),
                    ("guidance.w", guidance_w.map(|w| w.to_string())),
                    ("data.manifest", manifest.map(|m| m.display().to_string())),
                ],
            )?;
            cmd_train(&cfg, resume.as_deref()).map(|_| ())
        }
        Command::Sample {
            common,
            checkpoint,
            lr,
            steps,
            guidance_w,
            dump_trajectory,
        } => {
            let cfg = resolve_for_checkpoint(&common, env, &checkpoint, steps, guidance_w)?;
            let text = cmd_sample(&cfg, &checkpoint, &lr, dump_trajectory)?;
            println!("{text}");
            Ok(())
        }
        Command::Eval {
            common,
            checkpoint,
            manifest,
            steps,
            guidance_w,
        } => {
            let cfg = resolve_for_checkpoint(&common, env, &checkpoint, steps, guidance_w)?;
            let report = cmd_eval(&cfg, &checkpoint, &manifest)?;
            println!("{}", report.summary());
            Ok(())
        }
    }
}

/// Without a config file the model section is taken from the checkpoint;
/// with one, the two must agree (checked at load time).
fn resolve_for_checkpoint(
    common: &Common,
    env: &dyn Fn(&str) -> Option<String>,
    checkpoint: &Path,
    steps: Option<usize>,
    w: Option<f64>,
) -> Result<RunConfig> {
    let mut extra = vec![
        ("sample.steps", steps.map(|s| s.to_string())),
        ("sample.w", w.map(|w| w.to_string())),
    ];
    if common.config.is_none() {
        let header = checkpoint::read(checkpoint, DType::F32, &Device::Cpu)?.header;
        let owned: Vec<(&'static str, String)> = model_entries(&header.model);
        let mut pre: Vec<(&str, Option<String>)> = owned.into_iter().map(|(k, v)| (k, Some(v))).collect();
        pre.append(&mut extra);
        extra = pre;
    }
    // Model keys go first so explicit --set values still win.
    let mut all = Vec::new();
    let user = overrides(common, Vec::new())?;
    for (k, v) in extra {
        if let Some(v) = v {
            all.push((k.to_string(), v));
        }
    }
    all.extend(user);
    RunConfig::resolve(common.config.as_deref(), env, &all)
}

fn model_entries(m: &ModelConfig) -> Vec<(&'static str, String)> {
    let mut c = RunConfig::default();
    c.model = m.clone();
    c.entries().into_iter().filter(|(k, _)| k.starts_with("model.")).collect()
}

pub fn cmd_gen(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let files = synthdata::make_dataset(
        &cfg.out_dir,
        cfg.data.count,
        cfg.data.test_count,
        &cfg.render_spec(),
        &cfg.degrade_spec(),
        rng::derive_seed(cfg.seed, "data", 0),
    )?;
    cfg.write(&cfg.out_dir.join(CONFIG_FILE))?;
    eprintln!("wrote {} records to {}", files.count, files.manifest.display());
    Ok(())
}

fn batch_source(cfg: &RunConfig) -> Result<Box<dyn BatchSource>> {
    let seed = rng::derive_seed(cfg.seed, "data", 1);
    if cfg.data.manifest.is_empty() {
        Ok(Box::new(OnlineSource::new(
            cfg.render_spec(),
            cfg.degrade_spec(),
            cfg.model.seq_len,
            seed,
        )?))
    } else {
        let records = synthdata::read_manifest(Path::new(&cfg.data.manifest))?;
        let vocab = Vocab::new(&cfg.data.charset)?;
        Ok(Box::new(ManifestSource::load(&records, &vocab, cfg.model.seq_len, seed)?))
    }
}

/// Trains until `train.steps`, writing checkpoints and the metric log.
/// Returns the path of the final checkpoint.
pub fn cmd_train(cfg: &RunConfig, resume: Option<&Path>) -> Result<PathBuf> {
    cfg.validate()?;
    create_dir(&cfg.out_dir)?;
    cfg.write(&cfg.out_dir.join(CONFIG_FILE))?;
    let device = Device::Cpu;
    let mut state = match resume {
        Some(path) => checkpoint::read(path, DType::F32, &device)?.into_train_state(&cfg.model)?,
        None => {
            let model = MmFormer::new(cfg.model.clone(), rng::derive_seed(cfg.seed, "init", 0), DType::F32, &device)?;
            TrainState::new(model, rng::derive_seed(cfg.seed, "train", 0))?
        }
    };
    let source = batch_source(cfg)?;
    let log_path = cfg.out_dir.join(METRICS_FILE);
    let mut log = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume.is_some())
        .truncate(resume.is_none())
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let hp = cfg.train.hyper;
    let every = cfg.train.checkpoint_every;
    while state.step < hp.total_steps {
        let items = source.batch(state.step, cfg.train.batch_size)?;
        let m = train_step(&mut state, &items, &cfg.guidance, &hp)?;
        let line = serde_json::to_string(&m).map_err(|e| Error::Config(e.to_string()))?;
        writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
        if m.step % 50 == 0 || state.step == hp.total_steps {
            eprintln!(
                "step {:>6}  img {:.4}  txt {:.4}  joint {:.4}  lr {:.2e}",
                m.step, m.loss_img, m.loss_txt, m.loss_joint, m.lr
            );
        }
        if every > 0 && state.step % every == 0 && state.step < hp.total_steps {
            let p = cfg.out_dir.join("checkpoints").join(format!("step_{:07}.safetensors", state.step));
            checkpoint::save(&state, &p)?;
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    let path = cfg.out_dir.join(FINAL_CHECKPOINT);
    checkpoint::save(&state, &path)?;
    Ok(path)
}

fn load_model(cfg: &RunConfig, path: &Path) -> Result<MmFormer> {
    checkpoint::read(path, DType::F32, &Device::Cpu)?.into_model(&cfg.model, cfg.sample.use_ema)
}

/// Writes `sr.png` and `text.txt` (plus `trajectory/` when asked) and
/// returns the decoded text.
pub fn cmd_sample(cfg: &RunConfig, ckpt: &Path, lr_path: &Path, dump_trajectory: bool) -> Result<String> {
    cfg.validate()?;
    let model = load_model(cfg, ckpt)?;
    let lr = synthdata::read_png(lr_path)?;
    let vocab = Vocab::new(&cfg.data.charset)?;
    create_dir(&cfg.out_dir)?;
    cfg.write(&cfg.out_dir.join(CONFIG_FILE))?;
    let traj = cfg.out_dir.join("trajectory");
    let mut token_log = String::new();
    let grid = crate::sampler::time_grid(cfg.sample.steps);
    let m = &cfg.model;
    let out = sample_batch(
        &ModelDenoiser::new(&model),
        std::slice::from_ref(&lr),
        (m.image_height, m.image_width, m.channels),
        m.seq_len,
        m.vocab_size,
        cfg.sample_config(),
        &[rng::derive_seed(cfg.seed, "sample", 0)],
        |k, states| {
            if dump_trajectory {
                synthdata::write_png(&states[0].x_img, &traj.join(format!("step_{k:04}.png")))?;
                token_log.push_str(&format!("{k}\t{}\t{}\n", grid[k], vocab.decode(&states[0].x_txt)));
            }
            Ok(())
        },
    )?
    .pop()
    .expect("one output per input");
    if dump_trajectory {
        let p = traj.join("tokens.tsv");
        std::fs::write(&p, token_log).map_err(|e| Error::io(&p, e))?;
    }
    synthdata::write_png(&out.image, &cfg.out_dir.join("sr.png"))?;
    let text = vocab.decode(&out.text);
    let p = cfg.out_dir.join("text.txt");
    std::fs::write(&p, format!("{text}\n")).map_err(|e| Error::io(&p, e))?;
    Ok(text)
}

/// Writes `report.tsv` and `sr/<id>.png` for every record.
pub fn cmd_eval(cfg: &RunConfig, ckpt: &Path, manifest: &Path) -> Result<metrics::Report> {
    cfg.validate()?;
    let model = load_model(cfg, ckpt)?;
    let records = synthdata::read_manifest(manifest)?;
    let items = records.iter().map(EvalItem::load).collect::<Result<Vec<_>>>()?;
    let vocab = Vocab::new(&cfg.data.charset)?;
    create_dir(&cfg.out_dir)?;
    cfg.write(&cfg.out_dir.join(CONFIG_FILE))?;
    let sr_dir = cfg.out_dir.join("sr");
    let report = metrics::evaluate(
        &ModelDenoiser::new(&model),
        &items,
        &vocab,
        cfg.model.seq_len,
        cfg.sample_config(),
        rng::derive_seed(cfg.seed, "sample", 1),
        cfg.sample.batch,
        |it, img| synthdata::write_png(img, &sr_dir.join(format!("{}.png", it.id))),
    )?;
    let p = cfg.out_dir.join(REPORT_FILE);
    std::fs::write(&p, report.to_tsv()).map_err(|e| Error::io(&p, e))?;
    Ok(report)
}
