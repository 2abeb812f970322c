//! Resolved run configuration and its flat `key = value` text form.
//!
//! ```text
//! # comments run to end of line
//! clahe.clip_limit = 0.02
//! mlp.hidden = 10
//! ```
//!
//! Unknown and duplicate keys are rejected. [`PipelineConfig::to_text`]
//! writes every key, and parsing that output yields an identical config.

use std::collections::HashSet;
use std::fmt::Display;
use std::str::FromStr;

use thiserror::Error;

use crate::enhance::{ClaheParams, Distribution, KernelSpec};
use crate::mlp::TrainConfig;
use crate::morphbin::HatCombination;
use crate::synth::SynthConfig;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("key `{0}` given twice")]
    DuplicateKey(String),
    #[error("bad value `{value}` for `{key}`")]
    BadValue { key: String, value: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThresholdMode {
    Otsu,
    /// Use `threshold.level`.
    Fixed,
}

impl FromStr for ThresholdMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "otsu" => Ok(Self::Otsu),
            "fixed" => Ok(Self::Fixed),
            other => Err(format!("unknown threshold mode `{other}`")),
        }
    }
}

impl Display for ThresholdMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Otsu => "otsu",
            Self::Fixed => "fixed",
        })
    }
}

/// Which images the evaluation report covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EvalSplit {
    /// Every image, including the one the network was trained on.
    #[default]
    All,
    /// Every image except the training image.
    HeldOut,
}

impl FromStr for EvalSplit {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "all" => Ok(Self::All),
            "held-out" => Ok(Self::HeldOut),
            other => Err(format!("unknown eval split `{other}`")),
        }
    }
}

impl Display for EvalSplit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::All => "all",
            Self::HeldOut => "held-out",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub clahe: ClaheParams,
    pub stretch_low: f64,
    pub stretch_high: f64,
    pub median_window: usize,
    pub matched_sigma: f64,
    /// Kernel half-width; `None` means `ceil(3σ)`.
    pub matched_radius: Option<usize>,
    pub se_radius: usize,
    pub hat_combination: HatCombination,
    pub threshold: ThresholdMode,
    pub threshold_level: u8,
    pub mlp_window: usize,
    pub train: TrainConfig,
    pub use_mask: bool,
    pub train_index: usize,
    pub eval_split: EvalSplit,
    pub synth: SynthConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            clahe: ClaheParams::default(),
            stretch_low: 0.01,
            stretch_high: 0.99,
            median_window: 3,
            matched_sigma: 1.0,
            matched_radius: None,
            se_radius: 8,
            hat_combination: HatCombination::BothatMinusTophat,
            threshold: ThresholdMode::Otsu,
            threshold_level: 128,
            mlp_window: 1,
            train: TrainConfig::default(),
            use_mask: false,
            train_index: 0,
            eval_split: EvalSplit::All,
            synth: SynthConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
    })
}

pub const KEYS: &[&str] = &[
    "clahe.tiles_x",
    "clahe.tiles_y",
    "clahe.bins",
    "clahe.clip_limit",
    "clahe.distribution",
    "clahe.rayleigh_alpha",
    "stretch.low",
    "stretch.high",
    "median.window",
    "matched.sigma",
    "matched.radius",
    "morph.se_radius",
    "morph.combine",
    "threshold.mode",
    "threshold.level",
    "mlp.window",
    "mlp.hidden",
    "mlp.seed",
    "mlp.max_epochs",
    "mlp.patience",
    "mlp.eta_plus",
    "mlp.eta_minus",
    "mlp.delta0",
    "mlp.delta_min",
    "mlp.delta_max",
    "eval.use_mask",
    "pipeline.train_index",
    "pipeline.eval_split",
    "synth.seed",
    "synth.width",
    "synth.height",
    "synth.n_trees",
    "synth.vessel_width_min",
    "synth.vessel_width_max",
    "synth.background_level",
    "synth.vessel_contrast",
    "synth.noise_std",
    "synth.fov_margin",
    "synth.generations",
    "synth.width_decay",
];

impl PipelineConfig {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let k = key;
        match k {
            "clahe.tiles_x" => self.clahe.tiles_x = parse(k, value)?,
            "clahe.tiles_y" => self.clahe.tiles_y = parse(k, value)?,
            "clahe.bins" => self.clahe.bins = parse(k, value)?,
            "clahe.clip_limit" => self.clahe.clip_limit = parse(k, value)?,
            "clahe.distribution" => self.clahe.distribution = parse::<Distribution>(k, value)?,
            "clahe.rayleigh_alpha" => self.clahe.rayleigh_alpha = parse(k, value)?,
            "stretch.low" => self.stretch_low = parse(k, value)?,
            "stretch.high" => self.stretch_high = parse(k, value)?,
            "median.window" => self.median_window = parse(k, value)?,
            "matched.sigma" => self.matched_sigma = parse(k, value)?,
            "matched.radius" => {
                self.matched_radius = if value == "auto" {
                    None
                } else {
                    Some(parse(k, value)?)
                }
            }
            "morph.se_radius" => self.se_radius = parse(k, value)?,
            "morph.combine" => self.hat_combination = parse(k, value)?,
            "threshold.mode" => self.threshold = parse(k, value)?,
            "threshold.level" => self.threshold_level = parse(k, value)?,
            "mlp.window" => self.mlp_window = parse(k, value)?,
            "mlp.hidden" => self.train.hidden_dim = parse(k, value)?,
            "mlp.seed" => self.train.seed = parse(k, value)?,
            "mlp.max_epochs" => self.train.max_epochs = parse(k, value)?,
            "mlp.patience" => self.train.patience = parse(k, value)?,
            "mlp.eta_plus" => self.train.rprop.eta_plus = parse(k, value)?,
            "mlp.eta_minus" => self.train.rprop.eta_minus = parse(k, value)?,
            "mlp.delta0" => self.train.rprop.delta0 = parse(k, value)?,
            "mlp.delta_min" => self.train.rprop.delta_min = parse(k, value)?,
            "mlp.delta_max" => self.train.rprop.delta_max = parse(k, value)?,
            "eval.use_mask" => self.use_mask = parse(k, value)?,
            "pipeline.train_index" => self.train_index = parse(k, value)?,
            "pipeline.eval_split" => self.eval_split = parse(k, value)?,
            "synth.seed" => self.synth.seed = parse(k, value)?,
            "synth.width" => self.synth.width = parse(k, value)?,
            "synth.height" => self.synth.height = parse(k, value)?,
            "synth.n_trees" => self.synth.n_trees = parse(k, value)?,
            "synth.vessel_width_min" => self.synth.vessel_width_range.0 = parse(k, value)?,
            "synth.vessel_width_max" => self.synth.vessel_width_range.1 = parse(k, value)?,
            "synth.background_level" => self.synth.background_level = parse(k, value)?,
            "synth.vessel_contrast" => self.synth.vessel_contrast = parse(k, value)?,
            "synth.noise_std" => self.synth.noise_std = parse(k, value)?,
            "synth.fov_margin" => self.synth.fov_margin = parse(k, value)?,
            "synth.generations" => self.synth.generations = parse(k, value)?,
            "synth.width_decay" => self.synth.width_decay = parse(k, value)?,
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Current value of `key` in its textual form.
    pub fn get(&self, key: &str) -> Option<String> {
        fn s(v: impl Display) -> Option<String> {
            Some(v.to_string())
        }
        match key {
            "clahe.tiles_x" => s(self.clahe.tiles_x),
            "clahe.tiles_y" => s(self.clahe.tiles_y),
            "clahe.bins" => s(self.clahe.bins),
            "clahe.clip_limit" => s(self.clahe.clip_limit),
            "clahe.distribution" => s(self.clahe.distribution),
            "clahe.rayleigh_alpha" => s(self.clahe.rayleigh_alpha),
            "stretch.low" => s(self.stretch_low),
            "stretch.high" => s(self.stretch_high),
            "median.window" => s(self.median_window),
            "matched.sigma" => s(self.matched_sigma),
            "matched.radius" => match self.matched_radius {
                None => s("auto"),
                Some(r) => s(r),
            },
            "morph.se_radius" => s(self.se_radius),
            "morph.combine" => s(self.hat_combination),
            "threshold.mode" => s(self.threshold),
            "threshold.level" => s(self.threshold_level),
            "mlp.window" => s(self.mlp_window),
            "mlp.hidden" => s(self.train.hidden_dim),
            "mlp.seed" => s(self.train.seed),
            "mlp.max_epochs" => s(self.train.max_epochs),
            "mlp.patience" => s(self.train.patience),
            "mlp.eta_plus" => s(self.train.rprop.eta_plus),
            "mlp.eta_minus" => s(self.train.rprop.eta_minus),
            "mlp.delta0" => s(self.train.rprop.delta0),
            "mlp.delta_min" => s(self.train.rprop.delta_min),
            "mlp.delta_max" => s(self.train.rprop.delta_max),
            "eval.use_mask" => s(self.use_mask),
            "pipeline.train_index" => s(self.train_index),
            "pipeline.eval_split" => s(self.eval_split),
            "synth.seed" => s(self.synth.seed),
            "synth.width" => s(self.synth.width),
            "synth.height" => s(self.synth.height),
            "synth.n_trees" => s(self.synth.n_trees),
            "synth.vessel_width_min" => s(self.synth.vessel_width_range.0),
            "synth.vessel_width_max" => s(self.synth.vessel_width_range.1),
            "synth.background_level" => s(self.synth.background_level),
            "synth.vessel_contrast" => s(self.synth.vessel_contrast),
            "synth.noise_std" => s(self.synth.noise_std),
            "synth.fov_margin" => s(self.synth.fov_margin),
            "synth.generations" => s(self.synth.generations),
            "synth.width_decay" => s(self.synth.width_decay),
            _ => None,
        }
    }

    /// Parses config text on top of the defaults.
    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Applies config text on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or(ConfigError::Syntax { line: i + 1 })?;
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() {
                return Err(ConfigError::Syntax { line: i + 1 });
            }
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::DuplicateKey(key.to_string()));
            }
            self.set(key, value)?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# retseg pipeline configuration\n");
        for key in KEYS {
            let value = self.get(key).expect("every listed key has a value");
            out.push_str(&format!("{key} = {value}\n"));
        }
        out
    }

    pub fn kernel_spec(&self) -> KernelSpec {
        let auto = KernelSpec::for_sigma(self.matched_sigma);
        KernelSpec {
            radius: self.matched_radius.unwrap_or(auto.radius),
            ..auto
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn Display| ConfigError::Invalid(e.to_string());
        self.clahe.validate().map_err(|e| invalid(&e))?;
        if !(0.0 <= self.stretch_low
            && self.stretch_low < self.stretch_high
            && self.stretch_high <= 1.0)
        {
            return Err(ConfigError::Invalid(
                "need 0 <= stretch.low < stretch.high <= 1".into(),
            ));
        }
        if self.median_window < 3 || self.median_window.is_multiple_of(2) {
            return Err(ConfigError::Invalid(
                "median.window must be odd and >= 3".into(),
            ));
        }
        if !(self.matched_sigma > 0.0 && self.matched_sigma.is_finite()) {
            return Err(ConfigError::Invalid(
                "matched.sigma must be positive".into(),
            ));
        }
        if self.matched_radius == Some(0) {
            return Err(ConfigError::Invalid("matched.radius must be >= 1".into()));
        }
        if self.mlp_window.is_multiple_of(2) {
            return Err(ConfigError::Invalid("mlp.window must be odd".into()));
        }
        if self.train.hidden_dim == 0 {
            return Err(ConfigError::Invalid("mlp.hidden must be >= 1".into()));
        }
        self.train.rprop.validate().map_err(|e| invalid(&e))?;
        self.synth.validate().map_err(|e| invalid(&e))?;
        Ok(())
    }
}
