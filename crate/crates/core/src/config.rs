//! Flat `key = value` run configuration.
//!
//! Lines starting with `#` and blank lines are ignored. Ranges are written
//! `lo,hi`. Unknown and repeated keys are errors. Precedence, lowest first:
//! built-in defaults, config file, `TEXTSR_OUT_ROOT` (replaces `out_dir`),
//! command-line flags.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::imageflow::GuidanceConfig;
use crate::mmformer::ModelConfig;
use crate::sampler::SampleConfig;
use crate::synthdata::{DegradeSpec, RenderSpec, Severity, DEFAULT_CHARSET};
use crate::trainer::TrainHyper;

pub const OUT_ROOT_ENV: &str = "TEXTSR_OUT_ROOT";

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub count: usize,
    pub test_count: usize,
    pub charset: String,
    pub min_len: usize,
    pub max_len: usize,
    pub glyph_scale: usize,
    pub jitter: usize,
    pub foreground: (f64, f64),
    pub background: (f64, f64),
    pub mild: Severity,
    pub severe: Severity,
    pub severe_prob: f64,
    pub shuffle_order: bool,
    /// Training manifest; empty means render batches on the fly.
    pub manifest: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        let r = RenderSpec::default();
        let d = DegradeSpec::default();
        Self {
            count: 1024,
            test_count: 256,
            charset: DEFAULT_CHARSET.to_string(),
            min_len: r.min_len,
            max_len: r.max_len,
            glyph_scale: r.glyph_scale,
            jitter: r.jitter,
            foreground: r.foreground,
            background: r.background,
            mild: d.mild,
            severe: d.severe,
            severe_prob: d.severe_prob,
            shuffle_order: d.shuffle_order,
            manifest: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub hyper: TrainHyper,
    pub batch_size: usize,
    /// 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hyper: TrainHyper::default(),
            batch_size: 32,
            checkpoint_every: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSettings {
    pub steps: usize,
    pub w: f64,
    pub use_ema: bool,
    /// Items per batched forward during evaluation.
    pub batch: usize,
}

impl Default for SampleSettings {
    fn default() -> Self {
        let s = SampleConfig::default();
        Self {
            steps: s.steps,
            w: s.w,
            use_ema: true,
            batch: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub guidance: GuidanceConfig,
    pub sample: SampleSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            model: ModelConfig::default(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            guidance: GuidanceConfig::default(),
            sample: SampleSettings::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_range(key: &str, value: &str) -> Result<(f64, f64)> {
    let (a, b) = value
        .split_once(',')
        .ok_or_else(|| Error::Config(format!("{key}: expected lo,hi, got {value:?}")))?;
    Ok((parse(key, a.trim())?, parse(key, b.trim())?))
}

fn range(r: (f64, f64)) -> String {
    format!("{},{}", r.0, r.1)
}

impl RunConfig {
    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let d = &self.data;
        let h = &self.train.hyper;
        let g = &self.guidance;
        let s = &self.sample;
        vec![
            ("seed", self.seed.to_string()),
            ("out_dir", self.out_dir.display().to_string()),
            ("model.image_height", m.image_height.to_string()),
            ("model.image_width", m.image_width.to_string()),
            ("model.channels", m.channels.to_string()),
            ("model.patch_size", m.patch_size.to_string()),
            ("model.lr_scale", m.lr_scale.to_string()),
            ("model.lr_patch_size", m.lr_patch_size.to_string()),
            ("model.embed_dim", m.embed_dim.to_string()),
            ("model.depth", m.depth.to_string()),
            ("model.heads", m.heads.to_string()),
            ("model.mlp_ratio", m.mlp_ratio.to_string()),
            ("model.vocab_size", m.vocab_size.to_string()),
            ("model.seq_len", m.seq_len.to_string()),
            ("model.time_freq_dim", m.time_freq_dim.to_string()),
            ("data.count", d.count.to_string()),
            ("data.test_count", d.test_count.to_string()),
            ("data.charset", d.charset.clone()),
            ("data.min_len", d.min_len.to_string()),
            ("data.max_len", d.max_len.to_string()),
            ("data.glyph_scale", d.glyph_scale.to_string()),
            ("data.jitter", d.jitter.to_string()),
            ("data.foreground", range(d.foreground)),
            ("data.background", range(d.background)),
            ("data.mild.blur_sigma", range(d.mild.blur_sigma)),
            ("data.mild.noise_std", range(d.mild.noise_std)),
            ("data.mild.quality", range(d.mild.quality)),
            ("data.severe.blur_sigma", range(d.severe.blur_sigma)),
            ("data.severe.noise_std", range(d.severe.noise_std)),
            ("data.severe.quality", range(d.severe.quality)),
            ("data.severe_prob", d.severe_prob.to_string()),
            ("data.shuffle_order", d.shuffle_order.to_string()),
            ("data.manifest", d.manifest.clone()),
            ("train.lr", h.lr.to_string()),
            ("train.weight_decay", h.weight_decay.to_string()),
            ("train.beta1", h.beta1.to_string()),
            ("train.beta2", h.beta2.to_string()),
            ("train.eps", h.eps.to_string()),
            ("train.warmup_steps", h.warmup_steps.to_string()),
            ("train.steps", h.total_steps.to_string()),
            ("train.grad_clip", h.grad_clip.to_string()),
            ("train.batch_size", self.train.batch_size.to_string()),
            ("train.checkpoint_every", self.train.checkpoint_every.to_string()),
            ("text.K", h.text_k.to_string()),
            ("guidance.w", g.w.to_string()),
            ("guidance.psi", g.psi.to_string()),
            ("guidance.ema_decay", g.ema_decay.to_string()),
            ("schedule.delta", g.delta.to_string()),
            ("sample.steps", s.steps.to_string()),
            ("sample.w", s.w.to_string()),
            ("sample.use_ema", s.use_ema.to_string()),
            ("sample.batch", s.batch.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let m = &mut self.model;
        let d = &mut self.data;
        let h = &mut self.train.hyper;
        let g = &mut self.guidance;
        let s = &mut self.sample;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "model.image_height" => m.image_height = parse(key, v)?,
            "model.image_width" => m.image_width = parse(key, v)?,
            "model.channels" => m.channels = parse(key, v)?,
            "model.patch_size" => m.patch_size = parse(key, v)?,
            "model.lr_scale" => m.lr_scale = parse(key, v)?,
            "model.lr_patch_size" => m.lr_patch_size = parse(key, v)?,
            "model.embed_dim" => m.embed_dim = parse(key, v)?,
            "model.depth" => m.depth = parse(key, v)?,
            "model.heads" => m.heads = parse(key, v)?,
            "model.mlp_ratio" => m.mlp_ratio = parse(key, v)?,
            "model.vocab_size" => m.vocab_size = parse(key, v)?,
            "model.seq_len" => m.seq_len = parse(key, v)?,
            "model.time_freq_dim" => m.time_freq_dim = parse(key, v)?,
            "data.count" => d.count = parse(key, v)?,
            "data.test_count" => d.test_count = parse(key, v)?,
            "data.charset" => d.charset = v.to_string(),
            "data.min_len" => d.min_len = parse(key, v)?,
            "data.max_len" => d.max_len = parse(key, v)?,
            "data.glyph_scale" => d.glyph_scale = parse(key, v)?,
            "data.jitter" => d.jitter = parse(key, v)?,
            "data.foreground" => d.foreground = parse_range(key, v)?,
            "data.background" => d.background = parse_range(key, v)?,
            "data.mild.blur_sigma" => d.mild.blur_sigma = parse_range(key, v)?,
            "data.mild.noise_std" => d.mild.noise_std = parse_range(key, v)?,
            "data.mild.quality" => d.mild.quality = parse_range(key, v)?,
            "data.severe.blur_sigma" => d.severe.blur_sigma = parse_range(key, v)?,
            "data.severe.noise_std" => d.severe.noise_std = parse_range(key, v)?,
            "data.severe.quality" => d.severe.quality = parse_range(key, v)?,
            "data.severe_prob" => d.severe_prob = parse(key, v)?,
            "data.shuffle_order" => d.shuffle_order = parse(key, v)?,
            "data.manifest" => d.manifest = v.to_string(),
            "train.lr" => h.lr = parse(key, v)?,
            "train.weight_decay" => h.weight_decay = parse(key, v)?,
            "train.beta1" => h.beta1 = parse(key, v)?,
            "train.beta2" => h.beta2 = parse(key, v)?,
            "train.eps" => h.eps = parse(key, v)?,
            "train.warmup_steps" => h.warmup_steps = parse(key, v)?,
            "train.steps" => h.total_steps = parse(key, v)?,
            "train.grad_clip" => h.grad_clip = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.checkpoint_every" => self.train.checkpoint_every = parse(key, v)?,
            "text.K" => h.text_k = parse(key, v)?,
            "guidance.w" => g.w = parse(key, v)?,
            "guidance.psi" => g.psi = parse(key, v)?,
            "guidance.ema_decay" => g.ema_decay = parse(key, v)?,
            "schedule.delta" => g.delta = parse(key, v)?,
            "sample.steps" => s.steps = parse(key, v)?,
            "sample.w" => s.w = parse(key, v)?,
            "sample.use_ema" => s.use_ema = parse(key, v)?,
            "sample.batch" => s.batch = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{origin}:{}: expected key = value", i + 1)))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("{origin}:{}: key {k:?} repeated", i + 1)));
            }
            self.set(k, v)
                .map_err(|e| Error::Config(format!("{origin}:{}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text, "<config>")?;
        Ok(c)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c = Self::default();
        c.apply_text(&text, &path.display().to_string())?;
        Ok(c)
    }

    /// Defaults, then `file`, then the output-root variable from `env`,
    /// then `overrides` in order.
    pub fn resolve(
        file: Option<&Path>,
        env: impl Fn(&str) -> Option<String>,
        overrides: &[(String, String)],
    ) -> Result<Self> {
        let mut c = match file {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        if let Some(root) = env(OUT_ROOT_ENV).filter(|r| !r.is_empty()) {
            c.out_dir = PathBuf::from(root);
        }
        for (k, v) in overrides {
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }

    /// The resolved config as parseable text.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn render_spec(&self) -> RenderSpec {
        RenderSpec {
            charset: self.data.charset.clone(),
            height: self.model.image_height,
            width: self.model.image_width,
            channels: self.model.channels,
            min_len: self.data.min_len,
            max_len: self.data.max_len,
            glyph_scale: self.data.glyph_scale,
            foreground: self.data.foreground,
            background: self.data.background,
            jitter: self.data.jitter,
        }
    }

    pub fn degrade_spec(&self) -> DegradeSpec {
        DegradeSpec {
            scale: self.model.lr_scale,
            mild: self.data.mild,
            severe: self.data.severe,
            severe_prob: self.data.severe_prob,
            shuffle_order: self.data.shuffle_order,
        }
    }

    pub fn sample_config(&self) -> SampleConfig {
        SampleConfig {
            steps: self.sample.steps,
            w: self.sample.w,
        }
    }

    /// Cross-checks the sections against each other.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.guidance.validate()?;
        let render = self.render_spec();
        render.validate()?;
        self.degrade_spec().validate()?;
        let vocab = render.vocab()?;
        if vocab.size() != self.model.vocab_size {
            return Err(Error::Config(format!(
                "model.vocab_size {} must be the charset size plus PAD ({})",
                self.model.vocab_size,
                vocab.size()
            )));
        }
        if self.data.max_len > self.model.seq_len {
            return Err(Error::Config(format!(
                "data.max_len {} exceeds model.seq_len {}",
                self.data.max_len, self.model.seq_len
            )));
        }
        if self.train.hyper.text_k == 0 || self.train.batch_size == 0 {
            return Err(Error::Config("text.K and train.batch_size must be positive".into()));
        }
        if self.sample.steps == 0 {
            return Err(Error::Config("sample.steps must be positive".into()));
        }
        if self.data.test_count > self.data.count {
            return Err(Error::Config("data.test_count exceeds data.count".into()));
        }
        Ok(())
    }
}
