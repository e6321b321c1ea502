//! Run configuration: defaults, `key = value` files and command-line overrides.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use uuseg::losses::LossConfig;
use uuseg::optim::{SamConfig, ZeroGradPolicy};
use uuseg::segnet::{ModelConfig, OptimizerKind, TrainConfig};

/// Learning rate used by the harness unless overridden.
pub const DEFAULT_TRAIN_LR: f64 = 0.02;

/// Which combination of losses the model trains on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossPreset {
    /// Dice, cross-entropy and focal under learned uncertainty weights.
    Uncertainty,
    /// Cross-entropy alone.
    CrossEntropy,
}

impl LossPreset {
    pub fn name(self) -> &'static str {
        match self {
            LossPreset::Uncertainty => "ua",
            LossPreset::CrossEntropy => "ce",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "ua" => Ok(LossPreset::Uncertainty),
            "ce" => Ok(LossPreset::CrossEntropy),
            other => bail!("unknown loss {other:?} (expected ua or ce)"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train_data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    pub train_size: usize,
    pub test_size: usize,
    pub image_size: usize,
    pub train_seed: u64,
    pub test_seed: u64,
    pub stages: usize,
    pub width: usize,
    pub d_state: usize,
    pub loss: LossPreset,
    pub gamma: f64,
    pub optimizer: OptimizerKind,
    pub rho: f64,
    pub lr: f64,
    pub zero_grad_policy: ZeroGradPolicy,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub checkpoint: Option<PathBuf>,
    pub seeds: Vec<u64>,
    /// Ablation variants this process trains; see [`crate::ablate::VARIANTS`].
    pub variants: Vec<String>,
    pub sharpness_rho: f64,
    pub sharpness_samples: usize,
    pub sharpness_ascent: usize,
    pub sharpness_dirs: usize,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let sam = SamConfig::default();
        Self {
            train_data: None,
            test_data: None,
            train_size: 200,
            test_size: 50,
            image_size: 64,
            train_seed: 1,
            test_seed: 2,
            stages: model.stages,
            width: model.width,
            d_state: model.d_state,
            loss: LossPreset::Uncertainty,
            gamma: uuseg::losses::DEFAULT_GAMMA,
            optimizer: OptimizerKind::Sam,
            rho: sam.rho,
            lr: DEFAULT_TRAIN_LR,
            zero_grad_policy: sam.zero_grad_policy,
            epochs: 50,
            batch_size: uuseg::segnet::DEFAULT_BATCH,
            seed: 0,
            checkpoint: None,
            seeds: (0..5).collect(),
            variants: crate::ablate::VARIANTS.iter().map(|v| v.name.to_string()).collect(),
            sharpness_rho: 0.05,
            sharpness_samples: 16,
            sharpness_ascent: 3,
            sharpness_dirs: 4,
            out: PathBuf::from("runs"),
        }
    }
}

/// Every recognized key, in echo order.
pub const KEYS: &[&str] = &[
    "train_data",
    "test_data",
    "train_size",
    "test_size",
    "image_size",
    "train_seed",
    "test_seed",
    "stages",
    "width",
    "d_state",
    "loss",
    "gamma",
    "optimizer",
    "rho",
    "lr",
    "zero_grad_policy",
    "epochs",
    "batch_size",
    "seed",
    "checkpoint",
    "seeds",
    "variants",
    "sharpness_rho",
    "sharpness_samples",
    "sharpness_ascent",
    "sharpness_dirs",
    "out",
];

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| anyhow::anyhow!("{key}: cannot parse {value:?}: {e}"))
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    /// Sets one field from its textual form. Dashes in `key` read as
    /// underscores.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let value = value.trim();
        match key.as_str() {
            "train_data" => self.train_data = opt_path(value),
            "test_data" => self.test_data = opt_path(value),
            "train_size" => self.train_size = num(&key, value)?,
            "test_size" => self.test_size = num(&key, value)?,
            "image_size" => self.image_size = num(&key, value)?,
            "train_seed" => self.train_seed = num(&key, value)?,
            "test_seed" => self.test_seed = num(&key, value)?,
            "stages" => self.stages = num(&key, value)?,
            "width" => self.width = num(&key, value)?,
            "d_state" => self.d_state = num(&key, value)?,
            "loss" => self.loss = LossPreset::parse(value)?,
            "gamma" => self.gamma = num(&key, value)?,
            "optimizer" => self.optimizer = value.parse()?,
            "rho" => self.rho = num(&key, value)?,
            "lr" => self.lr = num(&key, value)?,
            "zero_grad_policy" => {
                self.zero_grad_policy = match value {
                    "plain_step" => ZeroGradPolicy::PlainStep,
                    "skip" => ZeroGradPolicy::Skip,
                    other => bail!("unknown zero_grad_policy {other:?} (expected plain_step or skip)"),
                }
            }
            "epochs" => self.epochs = num(&key, value)?,
            "batch_size" => self.batch_size = num(&key, value)?,
            "seed" => self.seed = num(&key, value)?,
            "checkpoint" => self.checkpoint = opt_path(value),
            "seeds" => {
                self.seeds = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| num("seeds", s.trim()))
                    .collect::<Result<_>>()?
            }
            "variants" => {
                self.variants = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(str::to_string)
                    .collect()
            }
            "sharpness_rho" => self.sharpness_rho = num(&key, value)?,
            "sharpness_samples" => self.sharpness_samples = num(&key, value)?,
            "sharpness_ascent" => self.sharpness_ascent = num(&key, value)?,
            "sharpness_dirs" => self.sharpness_dirs = num(&key, value)?,
            "out" => self.out = PathBuf::from(value),
            other => bail!("unknown config key {other:?}"),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let f = |v: f64| v.to_string();
        Some(match key {
            "train_data" => show_path(&self.train_data),
            "test_data" => show_path(&self.test_data),
            "train_size" => self.train_size.to_string(),
            "test_size" => self.test_size.to_string(),
            "image_size" => self.image_size.to_string(),
            "train_seed" => self.train_seed.to_string(),
            "test_seed" => self.test_seed.to_string(),
            "stages" => self.stages.to_string(),
            "width" => self.width.to_string(),
            "d_state" => self.d_state.to_string(),
            "loss" => self.loss.name().to_string(),
            "gamma" => f(self.gamma),
            "optimizer" => self.optimizer.name().to_string(),
            "rho" => f(self.rho),
            "lr" => f(self.lr),
            "zero_grad_policy" => match self.zero_grad_policy {
                ZeroGradPolicy::PlainStep => "plain_step".into(),
                ZeroGradPolicy::Skip => "skip".into(),
            },
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "seed" => self.seed.to_string(),
            "checkpoint" => show_path(&self.checkpoint),
            "seeds" => self.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","),
            "variants" => self.variants.join(","),
            "sharpness_rho" => f(self.sharpness_rho),
            "sharpness_samples" => self.sharpness_samples.to_string(),
            "sharpness_ascent" => self.sharpness_ascent.to_string(),
            "sharpness_dirs" => self.sharpness_dirs.to_string(),
            "out" => self.out.display().to_string(),
            _ => return None,
        })
    }

    /// `(key, value)` for every field, in [`KEYS`] order.
    pub fn echo(&self) -> Vec<(&'static str, String)> {
        KEYS.iter().map(|&k| (k, self.get(k).expect("listed key"))).collect()
    }

    /// The echo in config-file syntax; reading it back reproduces `self`.
    pub fn to_file_text(&self) -> String {
        self.echo().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .with_context(|| format!("line {}: expected `key = value`", lineno + 1))?;
            self.set(key, value).with_context(|| format!("line {}", lineno + 1))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        self.apply_text(&text)
            .with_context(|| format!("in config {}", path.display()))
    }

    /// Applies `--key value` and `--key=value` pairs in order.
    pub fn apply_overrides(&mut self, args: &[String]) -> Result<()> {
        let mut it = args.iter();
        while let Some(arg) = it.next() {
            let Some(flag) = arg.strip_prefix("--") else {
                bail!("unexpected argument {arg:?}; overrides take the form --key value");
            };
            match flag.split_once('=') {
                Some((k, v)) => self.set(k, v)?,
                None => {
                    let value = it.next().with_context(|| format!("--{flag} needs a value"))?;
                    self.set(flag, value)?;
                }
            }
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            stages: self.stages,
            width: self.width,
            d_state: self.d_state,
            seed: self.seed,
            ..ModelConfig::default()
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        let base = match self.loss {
            LossPreset::Uncertainty => LossConfig::default(),
            LossPreset::CrossEntropy => LossConfig::cross_entropy_only(),
        };
        LossConfig { gamma: self.gamma, ..base }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            optimizer: self.optimizer,
            sam: SamConfig {
                rho: self.rho,
                lr: self.lr,
                zero_grad_policy: self.zero_grad_policy,
            },
            batch_size: self.batch_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.loss_config().validate()?;
        self.train_config().validate()?;
        if self.image_size % self.model_config().divisor() != 0 {
            bail!(
                "image_size {} must be divisible by {}",
                self.image_size,
                self.model_config().divisor()
            );
        }
        if !(self.sharpness_rho > 0.0 && self.sharpness_rho.is_finite()) {
            bail!("sharpness_rho must be positive");
        }
        if self.sharpness_samples == 0 || self.sharpness_ascent == 0 || self.sharpness_dirs == 0 {
            bail!("sharpness probe counts must be at least 1");
        }
        Ok(())
    }
}
