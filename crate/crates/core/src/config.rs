//! Line-oriented `key = value` run configuration.
//!
//! `#` starts a comment, blank lines are ignored, every key may appear at
//! most once and unknown keys are rejected. Keys that are absent keep their
//! defaults.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::baselines::DEFAULT_CUTOFF_RADIUS;
use crate::error::{Error, Result};
use crate::flow::FlowArchitecture;
use crate::harmonize::HarmonizeConfig;
use crate::train::TrainConfig;

/// How the harmonizer picks its starting image when driven from a file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InitChoice {
    #[default]
    Mean,
    Source,
    /// Use the image at `init_image`.
    Custom,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub arch: FlowArchitecture,
    pub harmonize: HarmonizeConfig,
    pub init: InitChoice,
    pub init_image: Option<PathBuf>,
    pub data_dir: Option<PathBuf>,
    pub cutoff_radius: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            arch: FlowArchitecture::default(),
            harmonize: HarmonizeConfig::default(),
            init: InitChoice::Mean,
            init_image: None,
            data_dir: None,
            cutoff_radius: DEFAULT_CUTOFF_RADIUS,
        }
    }
}

pub const KEYS: &[&str] = &[
    "learning_rate",
    "total_steps",
    "batch_size",
    "dequant_noise_scale",
    "seed",
    "checkpoint_every",
    "grad_clip",
    "levels",
    "steps_per_level",
    "coupling_hidden_width",
    "coupling_hidden_layers",
    "input_height",
    "input_width",
    "alpha",
    "beta1",
    "beta2",
    "iterations",
    "mask_quantile",
    "init",
    "init_image",
    "data_dir",
    "cutoff_radius",
];

fn parse<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("line {line}: invalid value {value:?} for {key}")))
}

impl RunConfig {
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = HashSet::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {line}: expected `key = value`")))?;
            let key = key.trim();
            let value = value.trim();
            if !KEYS.contains(&key) {
                return Err(Error::Config(format!("line {line}: unknown key {key:?}")));
            }
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {line}: duplicate key {key:?}")));
            }
            cfg.set(line, key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    fn set(&mut self, line: usize, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        let a = &mut self.arch;
        let h = &mut self.harmonize;
        match key {
            "learning_rate" => t.learning_rate = parse(line, key, value)?,
            "total_steps" => t.total_steps = parse(line, key, value)?,
            "batch_size" => t.batch_size = parse(line, key, value)?,
            "dequant_noise_scale" => t.dequant_noise_scale = parse(line, key, value)?,
            "seed" => t.seed = parse(line, key, value)?,
            "checkpoint_every" => t.checkpoint_every = parse(line, key, value)?,
            "grad_clip" => t.grad_clip = parse(line, key, value)?,
            "levels" => a.levels = parse(line, key, value)?,
            "steps_per_level" => a.steps_per_level = parse(line, key, value)?,
            "coupling_hidden_width" => a.coupling_hidden_width = parse(line, key, value)?,
            "coupling_hidden_layers" => a.coupling_hidden_layers = parse(line, key, value)?,
            "input_height" => a.input_height = parse(line, key, value)?,
            "input_width" => a.input_width = parse(line, key, value)?,
            "alpha" => h.alpha = parse(line, key, value)?,
            "beta1" => h.beta1 = parse(line, key, value)?,
            "beta2" => h.beta2 = parse(line, key, value)?,
            "iterations" => h.iterations = parse(line, key, value)?,
            "mask_quantile" => h.mask_quantile = parse(line, key, value)?,
            "init" => {
                self.init = match value {
                    "mean" => InitChoice::Mean,
                    "source" => InitChoice::Source,
                    "custom" => InitChoice::Custom,
                    _ => {
                        return Err(Error::Config(format!(
                            "line {line}: init must be mean, source or custom, got {value:?}"
                        )))
                    }
                }
            }
            "init_image" => self.init_image = Some(PathBuf::from(value)),
            "data_dir" => self.data_dir = Some(PathBuf::from(value)),
            "cutoff_radius" => self.cutoff_radius = parse(line, key, value)?,
            _ => unreachable!("key list and match arms agree"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.arch.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.harmonize.validate()?;
        if self.init == InitChoice::Custom && self.init_image.is_none() {
            return Err(Error::Config("init = custom requires init_image".into()));
        }
        if !(self.cutoff_radius > 0.0) {
            return Err(Error::Config("cutoff_radius must be positive".into()));
        }
        Ok(())
    }

    /// Serializes every key; parsing the result yields an equal config.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let a = &self.arch;
        let h = &self.harmonize;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("learning_rate", format!("{:?}", t.learning_rate));
        kv("total_steps", t.total_steps.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("dequant_noise_scale", format!("{:?}", t.dequant_noise_scale));
        kv("seed", t.seed.to_string());
        kv("checkpoint_every", t.checkpoint_every.to_string());
        kv("grad_clip", format!("{:?}", t.grad_clip));
        kv("levels", a.levels.to_string());
        kv("steps_per_level", a.steps_per_level.to_string());
        kv("coupling_hidden_width", a.coupling_hidden_width.to_string());
        kv("coupling_hidden_layers", a.coupling_hidden_layers.to_string());
        kv("input_height", a.input_height.to_string());
        kv("input_width", a.input_width.to_string());
        kv("alpha", format!("{:?}", h.alpha));
        kv("beta1", format!("{:?}", h.beta1));
        kv("beta2", format!("{:?}", h.beta2));
        kv("iterations", h.iterations.to_string());
        kv("mask_quantile", format!("{:?}", h.mask_quantile));
        kv(
            "init",
            match self.init {
                InitChoice::Mean => "mean",
                InitChoice::Source => "source",
                InitChoice::Custom => "custom",
            }
            .into(),
        );
        if let Some(p) = &self.init_image {
            kv("init_image", p.display().to_string());
        }
        if let Some(p) = &self.data_dir {
            kv("data_dir", p.display().to_string());
        }
        kv("cutoff_radius", format!("{:?}", self.cutoff_radius));
        out
    }
}
