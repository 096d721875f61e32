//! Pipeline configuration and its `key = value` text form.
//!
//! Every setting can come from a config file or from the command line; both
//! go through [`PipelineConfig::set`], so they accept the same keys and
//! values. Later assignments win, which is how command-line flags override
//! the file.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::grouping::{GroupLearnConfig, NormVariant};

/// Which phase 1/phase 2 pair the pipeline runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    /// Learned filter groups, then per-group channel pruning.
    Grouped,
    /// One group, all-ones assignment, plain input-channel pruning.
    ChannelBaseline,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Grouped => "grouped",
            Method::ChannelBaseline => "channel-baseline",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "grouped" => Ok(Method::Grouped),
            "channel-baseline" | "baseline" => Ok(Method::ChannelBaseline),
            other => Err(Error::Config(format!("unknown method {other:?} (grouped | channel-baseline)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub group: GroupLearnConfig,
    pub method: Method,
    pub beta: f64,
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Optional caps on split sizes, for quick runs.
    pub train_limit: Option<usize>,
    pub validation_limit: Option<usize>,
    pub test_limit: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            group: GroupLearnConfig::default(),
            method: Method::Grouped,
            beta: 0.3,
            finetune_epochs: 10,
            finetune_lr: 0.01,
            data_dir: PathBuf::from("data/mnist"),
            out_dir: PathBuf::from("runs/default"),
            train_limit: None,
            validation_limit: None,
            test_limit: None,
        }
    }
}

/// Keys accepted by [`PipelineConfig::set`].
pub const KEYS: &[&str] = &[
    "method",
    "groups",
    "lambda",
    "tau",
    "beta",
    "epochs",
    "lr",
    "momentum",
    "lr_decay",
    "batch_size",
    "seed",
    "alpha_lr",
    "alpha_beta1",
    "alpha_beta2",
    "unroll_lr",
    "norm",
    "pi_floor",
    "freeze_noise",
    "finetune_epochs",
    "finetune_lr",
    "data_dir",
    "out",
    "train_limit",
    "validation_limit",
    "test_limit",
];

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn limit(key: &str, value: &str) -> Result<Option<usize>> {
    match value {
        "none" | "all" => Ok(None),
        v => num(key, v).map(Some),
    }
}

impl PipelineConfig {
    /// Applies one setting. Unknown keys and unparsable values are config
    /// errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let g = &mut self.group;
        match key {
            "method" => self.method = Method::parse(value)?,
            "groups" => g.groups = num(key, value)?,
            "lambda" => g.lambda = num(key, value)?,
            "tau" => g.tau = num(key, value)?,
            "beta" => self.beta = num(key, value)?,
            "epochs" => g.epochs = num(key, value)?,
            "lr" => g.weight_lr = num(key, value)?,
            "momentum" => g.momentum = num(key, value)?,
            "lr_decay" => g.lr_decay = num(key, value)?,
            "batch_size" => g.batch_size = num(key, value)?,
            "seed" => g.seed = num(key, value)?,
            "alpha_lr" => g.alpha_lr = num(key, value)?,
            "alpha_beta1" => g.alpha_betas.0 = num(key, value)?,
            "alpha_beta2" => g.alpha_betas.1 = num(key, value)?,
            "unroll_lr" => {
                g.unroll_lr = match value {
                    "lr" | "auto" => None,
                    v => Some(num(key, v)?),
                }
            }
            "norm" => g.norm = NormVariant::parse(value)?,
            "pi_floor" => g.pi_floor = num(key, value)?,
            "freeze_noise" => g.freeze_noise = num(key, value)?,
            "finetune_epochs" => self.finetune_epochs = num(key, value)?,
            "finetune_lr" => self.finetune_lr = num(key, value)?,
            "data_dir" => self.data_dir = PathBuf::from(value),
            "out" => self.out_dir = PathBuf::from(value),
            "train_limit" => self.train_limit = limit(key, value)?,
            "validation_limit" => self.validation_limit = limit(key, value)?,
            "test_limit" => self.test_limit = limit(key, value)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Applies every `key = value` line of `text`. Blank lines and lines
    /// starting with `#` are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", n + 1, e.to_string().trim_start_matches("config error: "))))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.group.validate()?;
        if !(0.0..1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta must lie in [0, 1), got {}", self.beta)));
        }
        if !(self.finetune_lr > 0.0 && self.finetune_lr.is_finite()) {
            return Err(Error::Config(format!("finetune_lr must be positive, got {}", self.finetune_lr)));
        }
        if self.method == Method::ChannelBaseline && self.group.groups != 1 {
            return Err(Error::Config("the channel baseline uses exactly one group".into()));
        }
        Ok(())
    }

    /// Canonical text form; [`PipelineConfig::apply_text`] reads it back.
    pub fn to_text(&self) -> String {
        let g = &self.group;
        let opt = |v: Option<usize>| v.map_or("none".to_string(), |v| v.to_string());
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("method", self.method.name().into());
        kv("groups", g.groups.to_string());
        kv("lambda", g.lambda.to_string());
        kv("tau", g.tau.to_string());
        kv("beta", self.beta.to_string());
        kv("epochs", g.epochs.to_string());
        kv("lr", g.weight_lr.to_string());
        kv("momentum", g.momentum.to_string());
        kv("lr_decay", g.lr_decay.to_string());
        kv("batch_size", g.batch_size.to_string());
        kv("seed", g.seed.to_string());
        kv("alpha_lr", g.alpha_lr.to_string());
        kv("alpha_beta1", g.alpha_betas.0.to_string());
        kv("alpha_beta2", g.alpha_betas.1.to_string());
        kv("unroll_lr", g.unroll_lr.map_or("lr".to_string(), |v| v.to_string()));
        kv("norm", g.norm.name().into());
        kv("pi_floor", g.pi_floor.to_string());
        kv("freeze_noise", g.freeze_noise.to_string());
        kv("finetune_epochs", self.finetune_epochs.to_string());
        kv("finetune_lr", self.finetune_lr.to_string());
        kv("data_dir", self.data_dir.display().to_string());
        kv("out", self.out_dir.display().to_string());
        kv("train_limit", opt(self.train_limit));
        kv("validation_limit", opt(self.validation_limit));
        kv("test_limit", opt(self.test_limit));
        s
    }
}
