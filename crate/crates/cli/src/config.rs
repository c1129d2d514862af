//! Run configuration as a flat `key = value` text file.
//!
//! Blank lines and `#` comments are ignored. Every key is optional and falls
//! back to its default; unknown keys are rejected. Relative paths are taken
//! relative to the directory holding the file.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ctxnet_core::data::AugmentSpec;
use ctxnet_core::optim::StepDecaySchedule;
use ctxnet_core::{NetworkConfig, UpsampleMode};

use crate::error::{io, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub schedule: StepDecaySchedule,
    pub augment: AugmentSpec,
    pub batch_size: usize,
    pub seed: u64,
    pub data_root: PathBuf,
    /// Held-out pairs for `ablate`; the training pairs when unset.
    pub eval_root: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            network: NetworkConfig::default(),
            schedule: StepDecaySchedule::default(),
            augment: AugmentSpec::default(),
            batch_size: 1,
            seed: 0,
            data_root: PathBuf::from("data"),
            eval_root: None,
            output_dir: PathBuf::from("runs"),
            checkpoint_every: 10_000,
            log_every: 100,
            workers: 2,
        }
    }
}

pub const KEYS: &[&str] = &[
    "stages",
    "base_channels",
    "global_context",
    "local_context",
    "extra_global_context_levels",
    "upsample",
    "learning_rate",
    "decay_factor",
    "decay_every",
    "total_iters",
    "crop_size",
    "flip",
    "rotation",
    "batch_size",
    "seed",
    "data_root",
    "eval_root",
    "output_dir",
    "checkpoint_every",
    "log_every",
    "workers",
];

fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "true" | "yes" | "on" | "1" => Some(true),
        "false" | "no" | "off" | "0" => Some(false),
        _ => None,
    }
}

impl RunConfig {
    /// Small network and short schedule that trains in minutes on a CPU.
    pub fn desk() -> Self {
        let mut c = RunConfig::default();
        c.network.num_stages = 2;
        c.network.base_channels = 8;
        c.schedule = StepDecaySchedule {
            initial_lr: 2e-3,
            decay_factor: 2.0,
            decay_every: 500,
            total_iters: 2000,
        };
        c.augment.crop_size = 64;
        c.checkpoint_every = 500;
        c.log_every = 10;
        c.output_dir = PathBuf::from("runs/desk");
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(RunConfig::default()),
            "desk" => Ok(RunConfig::desk()),
            other => Err(Error::InvalidConfig(format!(
                "unknown preset `{other}` (expected `default` or `desk`)"
            ))),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| io(path, e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        RunConfig::parse(&text, base)
    }

    /// Parses on top of the defaults.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut c = RunConfig::default();
        c.apply(text, base_dir)?;
        c.validate()?;
        Ok(c)
    }

    /// Overrides fields with the keys present in `text`.
    pub fn apply(&mut self, text: &str, base_dir: &Path) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| Error::Config {
                line,
                message: format!("expected `key = value`, got `{content}`"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |what: &str| Error::Config {
                line,
                message: format!("`{key}` expects {what}, got `{value}`"),
            };
            let int = || value.parse::<u64>().map_err(|_| bad("a non-negative integer"));
            let real = || value.parse::<f64>().map_err(|_| bad("a number"));
            let flag = || parse_bool(value).ok_or_else(|| bad("true or false"));
            let path = || {
                let p = PathBuf::from(value);
                if p.is_relative() {
                    base_dir.join(p)
                } else {
                    p
                }
            };
            match key {
                "stages" => self.network.num_stages = int()? as usize,
                "base_channels" => self.network.base_channels = int()? as usize,
                "global_context" => self.network.use_global_context = flag()?,
                "local_context" => self.network.use_local_context = flag()?,
                "extra_global_context_levels" => {
                    self.network.extra_global_context_levels = value
                        .split(',')
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(|s| s.parse::<usize>().map_err(|_| bad("a comma-separated list of levels")))
                        .collect::<Result<_>>()?
                }
                "upsample" => {
                    self.network.upsample = value
                        .parse::<UpsampleMode>()
                        .map_err(|_| bad("`nearest` or `bilinear`"))?
                }
                "learning_rate" => self.schedule.initial_lr = real()?,
                "decay_factor" => self.schedule.decay_factor = real()?,
                "decay_every" => self.schedule.decay_every = int()?,
                "total_iters" => self.schedule.total_iters = int()?,
                "crop_size" => self.augment.crop_size = int()? as usize,
                "flip" => self.augment.enable_flip = flag()?,
                "rotation" => self.augment.enable_rotation = flag()?,
                "batch_size" => self.batch_size = int()? as usize,
                "seed" => self.seed = int()?,
                "data_root" => self.data_root = path(),
                "eval_root" => self.eval_root = (!value.is_empty()).then(path),
                "output_dir" => self.output_dir = path(),
                "checkpoint_every" => self.checkpoint_every = int()?,
                "log_every" => self.log_every = int()?,
                "workers" => self.workers = int()? as usize,
                other => {
                    return Err(Error::Config {
                        line,
                        message: format!("unknown key `{other}`"),
                    })
                }
            }
        }
        Ok(())
    }

    /// Checks values; paths are checked separately by [`RunConfig::check_paths`].
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.schedule.validate()?;
        self.augment.validate()?;
        let d = self.network.divisor();
        if self.augment.crop_size % d != 0 {
            return Err(Error::InvalidConfig(format!(
                "crop_size {} must be a multiple of {d} for {} stages",
                self.augment.crop_size, self.network.num_stages
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if self.checkpoint_every == 0 || self.log_every == 0 {
            return Err(Error::InvalidConfig("checkpoint_every and log_every must be positive".into()));
        }
        Ok(())
    }

    pub fn check_paths(&self) -> Result<()> {
        for dir in std::iter::once(&self.data_root).chain(&self.eval_root) {
            if !dir.is_dir() {
                return Err(Error::InvalidConfig(format!("`{}` is not a directory", dir.display())));
            }
        }
        if self.output_dir.exists() && !self.output_dir.is_dir() {
            return Err(Error::InvalidConfig(format!(
                "output_dir `{}` exists and is not a directory",
                self.output_dir.display()
            )));
        }
        Ok(())
    }

    /// Absolute paths are written as-is, so the text can be reloaded from any
    /// directory when the paths were absolute.
    pub fn to_text(&self) -> String {
        let n = &self.network;
        let s = &self.schedule;
        let a = &self.augment;
        let levels: Vec<String> = n.extra_global_context_levels.iter().map(|l| l.to_string()).collect();
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("stages", n.num_stages.to_string());
        kv("base_channels", n.base_channels.to_string());
        kv("global_context", n.use_global_context.to_string());
        kv("local_context", n.use_local_context.to_string());
        kv("extra_global_context_levels", levels.join(","));
        kv("upsample", n.upsample.to_string());
        kv("learning_rate", format!("{:e}", s.initial_lr));
        kv("decay_factor", s.decay_factor.to_string());
        kv("decay_every", s.decay_every.to_string());
        kv("total_iters", s.total_iters.to_string());
        kv("crop_size", a.crop_size.to_string());
        kv("flip", a.enable_flip.to_string());
        kv("rotation", a.enable_rotation.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("seed", self.seed.to_string());
        kv("data_root", self.data_root.display().to_string());
        kv(
            "eval_root",
            self.eval_root.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
        );
        kv("output_dir", self.output_dir.display().to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        kv("log_every", self.log_every.to_string());
        kv("workers", self.workers.to_string());
        out
    }

    /// Augmentation settings with the run seed.
    pub fn augment_spec(&self) -> AugmentSpec {
        AugmentSpec {
            seed: self.seed,
            ..self.augment.clone()
        }
    }
}
