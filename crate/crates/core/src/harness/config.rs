//! Line-based `key = value` experiment configuration.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::classifier::{ClassifierConfig, Fusion};
use crate::codebook::CodebookConfig;
use crate::diffusion::{DenoiserConfig, DiffusionConfig, DEFAULT_SAMPLE_STEPS};
use crate::error::{Error, Result};
use crate::synthdata::{parse_classes, PoseClass, SynthConfig};

/// Which adapters a diffusion run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AblationFlags {
    pub kb: bool,
    pub dm: bool,
    pub dc: bool,
}

impl AblationFlags {
    pub const BASELINE: Self = Self::new(false, false, false);
    pub const KB: Self = Self::new(true, false, false);
    pub const KB_DM: Self = Self::new(true, true, false);
    pub const KB_DM_DC: Self = Self::new(true, true, true);

    pub const fn new(kb: bool, dm: bool, dc: bool) -> Self {
        Self { kb, dm, dc }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dc && !self.kb {
            return Err(Error::Config("dc = true requires kb = true".into()));
        }
        Ok(())
    }

    /// Row label used in ablation tables.
    pub fn label(&self) -> &'static str {
        match (self.kb, self.dm, self.dc) {
            (false, false, _) => "baseline",
            (false, true, _) => "+DM",
            (true, false, false) => "+KB",
            (true, false, true) => "+KB+D&C",
            (true, true, false) => "+KB+DM",
            (true, true, true) => "+KB+DM+D&C",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Diffusion training corpus.
    pub synth: SynthConfig,
    /// Size of the jitter-free corpus the classifier learns label → indices from.
    pub kb_count: usize,
    /// Number of held-out conditions evaluated per ablation cell.
    pub eval_count: usize,
    pub patch: usize,
    pub feature_dim: usize,
    pub codebook: CodebookConfig,
    pub classifier: ClassifierConfig,
    pub diffusion: DiffusionConfig,
    pub denoiser: DenoiserConfig,
    pub flags: AblationFlags,
    pub fusion: Fusion,
    pub sample_steps: usize,
    pub guidance: f64,
    pub pck_threshold: f64,
    /// Seeds averaged by the ablation runner, starting at `seed`.
    pub repeats: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            synth: SynthConfig::default(),
            kb_count: 240,
            eval_count: 32,
            patch: 4,
            feature_dim: 16,
            codebook: CodebookConfig::default(),
            classifier: ClassifierConfig::default(),
            diffusion: DiffusionConfig::default(),
            denoiser: DenoiserConfig::default(),
            flags: AblationFlags::KB_DM_DC,
            fusion: Fusion::Mean,
            sample_steps: DEFAULT_SAMPLE_STEPS,
            guidance: 1.0,
            pck_threshold: 2.0,
            repeats: 3,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for key {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {value:?} for key {key}"))),
    }
}

impl ExperimentConfig {
    /// Sets one key. Unknown keys are configuration errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        match key {
            "seed" => self.seed = parse_value(key, v)?,
            "count" => self.synth.count = parse_value(key, v)?,
            "jitter" => self.synth.jitter = parse_value(key, v)?,
            "classes" => self.synth.classes = parse_classes(v)?,
            "kb_count" => self.kb_count = parse_value(key, v)?,
            "eval_count" => self.eval_count = parse_value(key, v)?,
            "patch" => self.patch = parse_value(key, v)?,
            "feature_dim" => self.feature_dim = parse_value(key, v)?,
            "codebook_entries" => self.codebook.entries = parse_value(key, v)?,
            "codebook_epochs" => self.codebook.epochs = parse_value(key, v)?,
            "codebook_lr" => self.codebook.lr = parse_value(key, v)?,
            "codebook_batch" => self.codebook.batch_size = parse_value(key, v)?,
            "codebook_weight_decay" => self.codebook.weight_decay = parse_value(key, v)?,
            "classifier_hidden" => self.classifier.hidden = parse_value(key, v)?,
            "classifier_epochs" => self.classifier.epochs = parse_value(key, v)?,
            "classifier_lr" => self.classifier.lr = parse_value(key, v)?,
            "classifier_batch" => self.classifier.batch_size = parse_value(key, v)?,
            "classifier_weight_decay" => self.classifier.weight_decay = parse_value(key, v)?,
            "diffusion_epochs" => self.diffusion.epochs = parse_value(key, v)?,
            "diffusion_lr" => self.diffusion.lr = parse_value(key, v)?,
            "diffusion_batch" => self.diffusion.batch_size = parse_value(key, v)?,
            "prompt_dropout" => self.diffusion.prompt_dropout = parse_value(key, v)?,
            "timesteps" => self.diffusion.timesteps = parse_value(key, v)?,
            "beta_start" => self.diffusion.beta_start = parse_value(key, v)?,
            "beta_end" => self.diffusion.beta_end = parse_value(key, v)?,
            "model_dim" => self.denoiser.model_dim = parse_value(key, v)?,
            "head_hidden" => self.denoiser.head_hidden = parse_value(key, v)?,
            "gate_hidden" => self.denoiser.gate_hidden = parse_value(key, v)?,
            "time_dim" => self.denoiser.time_dim = parse_value(key, v)?,
            "pos_dim" => self.denoiser.pos_dim = parse_value(key, v)?,
            "mask_mode" => self.denoiser.mask_mode = v.parse()?,
            "kb" => self.flags.kb = parse_bool(key, v)?,
            "dm" => self.flags.dm = parse_bool(key, v)?,
            "dc" => self.flags.dc = parse_bool(key, v)?,
            "fusion" => self.fusion = v.parse()?,
            "sample_steps" => self.sample_steps = parse_value(key, v)?,
            "guidance" => self.guidance = parse_value(key, v)?,
            "pck_threshold" => self.pck_threshold = parse_value(key, v)?,
            "repeats" => self.repeats = parse_value(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines on top of the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            config
                .set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.flags.validate()?;
        let positive = [
            ("count", self.synth.count),
            ("kb_count", self.kb_count),
            ("eval_count", self.eval_count),
            ("patch", self.patch),
            ("feature_dim", self.feature_dim),
            ("codebook_batch", self.codebook.batch_size),
            ("classifier_batch", self.classifier.batch_size),
            ("diffusion_batch", self.diffusion.batch_size),
            ("sample_steps", self.sample_steps),
            ("repeats", self.repeats),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(0.0..=1.0).contains(&self.diffusion.prompt_dropout) {
            return Err(Error::Config("prompt_dropout must lie in [0, 1]".into()));
        }
        if self.sample_steps > self.diffusion.timesteps {
            return Err(Error::Config(format!(
                "sample_steps {} exceeds timesteps {}",
                self.sample_steps, self.diffusion.timesteps
            )));
        }
        if self.pck_threshold.is_nan() || self.pck_threshold < 0.0 {
            return Err(Error::Config("pck_threshold must be nonnegative".into()));
        }
        Ok(())
    }

    /// Denoiser shape implied by the image size, patch and feature settings.
    pub fn denoiser_config(&self) -> DenoiserConfig {
        let side = crate::synthdata::IMAGE_SIZE / self.patch;
        DenoiserConfig {
            latent_dim: self.patch * self.patch,
            kb_dim: self.feature_dim,
            grid: (side, side),
            ..self.denoiser.clone()
        }
    }

    pub fn classes(&self) -> &[PoseClass] {
        &self.synth.classes
    }

    /// Serializes back to the file format; `parse(render())` round-trips.
    pub fn render(&self) -> String {
        let classes = self.synth.classes.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("seed", self.seed.to_string());
        put("count", self.synth.count.to_string());
        put("jitter", self.synth.jitter.to_string());
        put("classes", classes);
        put("kb_count", self.kb_count.to_string());
        put("eval_count", self.eval_count.to_string());
        put("patch", self.patch.to_string());
        put("feature_dim", self.feature_dim.to_string());
        put("codebook_entries", self.codebook.entries.to_string());
        put("codebook_epochs", self.codebook.epochs.to_string());
        put("codebook_lr", self.codebook.lr.to_string());
        put("codebook_batch", self.codebook.batch_size.to_string());
        put("codebook_weight_decay", self.codebook.weight_decay.to_string());
        put("classifier_hidden", self.classifier.hidden.to_string());
        put("classifier_epochs", self.classifier.epochs.to_string());
        put("classifier_lr", self.classifier.lr.to_string());
        put("classifier_batch", self.classifier.batch_size.to_string());
        put("classifier_weight_decay", self.classifier.weight_decay.to_string());
        put("diffusion_epochs", self.diffusion.epochs.to_string());
        put("diffusion_lr", self.diffusion.lr.to_string());
        put("diffusion_batch", self.diffusion.batch_size.to_string());
        put("prompt_dropout", self.diffusion.prompt_dropout.to_string());
        put("timesteps", self.diffusion.timesteps.to_string());
        put("beta_start", self.diffusion.beta_start.to_string());
        put("beta_end", self.diffusion.beta_end.to_string());
        put("model_dim", self.denoiser.model_dim.to_string());
        put("head_hidden", self.denoiser.head_hidden.to_string());
        put("gate_hidden", self.denoiser.gate_hidden.to_string());
        put("time_dim", self.denoiser.time_dim.to_string());
        put("pos_dim", self.denoiser.pos_dim.to_string());
        put("mask_mode", self.denoiser.mask_mode.to_string());
        put("kb", self.flags.kb.to_string());
        put("dm", self.flags.dm.to_string());
        put("dc", self.flags.dc.to_string());
        put("fusion", self.fusion.to_string());
        put("sample_steps", self.sample_steps.to_string());
        put("guidance", self.guidance.to_string());
        put("pck_threshold", self.pck_threshold.to_string());
        put("repeats", self.repeats.to_string());
        s
    }
}
