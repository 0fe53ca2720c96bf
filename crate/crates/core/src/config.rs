//! Experiment configuration: a flat key/value TOML file plus `key=value`
//! overrides.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};

/// Keys that are absent from a serialized config while unset.
const OPTIONAL_KEYS: [&str; 2] = ["train_snr", "init_checkpoint"];

/// Number of selectable rate levels in the rate allocator.
pub const RATE_LEVELS: usize = 5;

/// Backward rule used for the non-differentiable quantizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    /// Gumbel-Softmax position + soft quantization surrogate.
    GumbelSoftq,
    /// Straight-through on the initial position.
    Ste,
    /// Identity on the initial position plus uniform cell noise.
    UniformNoise,
}

impl Estimator {
    pub const ALL: [Estimator; 3] = [Estimator::GumbelSoftq, Estimator::Ste, Estimator::UniformNoise];
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::GumbelSoftq => "gumbel-softq",
            Self::Ste => "ste",
            Self::UniformNoise => "uniform-noise",
        })
    }
}

impl FromStr for Estimator {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gumbel-softq" | "gumbel" => Ok(Self::GumbelSoftq),
            "ste" => Ok(Self::Ste),
            "uniform-noise" | "uniform" => Ok(Self::UniformNoise),
            other => Err(CoreError::Argument(format!("unknown estimator `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChannelKind {
    Awgn,
    Rayleigh,
}

impl FromStr for ChannelKind {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "awgn" => Ok(Self::Awgn),
            "rayleigh" => Ok(Self::Rayleigh),
            other => Err(CoreError::Argument(format!("unknown channel `{other}`"))),
        }
    }
}

/// Orientation of the rate term in the training loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RateLoss {
    /// `N_send / N_mod`: grows with the number of transmitted symbols.
    Penalty,
    /// `N_mod / N_send`, as literally written in the source formulation.
    Verbatim,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FpsMode {
    Fixed,
    Random,
}

/// Architecture settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Points per cloud (N); must be divisible by 16.
    pub n_points: usize,
    /// Tokens from the point tokenizer (N′).
    pub n_tokens: usize,
    /// Centroids of the main encoder's second set abstraction (N″).
    pub n_tokens_main: usize,
    /// Token embedding width (C′).
    pub token_dim: usize,
    /// QAM order M ∈ {4, 16, 64, 256}.
    pub order: usize,
    /// Modulated symbols before rate allocation (N_mod.).
    pub n_mod: usize,
    /// Main:auxiliary symbol split, e.g. "4:1"; "auto" picks 2:1 at
    /// N_mod. = 300 and 4:1 otherwise.
    pub branch_ratio: String,
    pub temperature: f64,
    pub estimator: Estimator,
    pub rate_allocator: bool,
    pub channel_adapter: bool,
    pub radius_tokenizer: f64,
    pub radius_main: f64,
    pub group_k: usize,
    pub attention_k: usize,
    pub sa_hidden: usize,
    pub mlp_hidden: usize,
    pub adapter_hidden: usize,
    /// Feature width after demodulation (N_demod.).
    pub demod_dim: usize,
    pub upsample_hidden: usize,
    /// Offset range r of the de-tokenizer.
    pub offset_range: f64,
    pub fps: FpsMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_points: 256,
            n_tokens: 64,
            n_tokens_main: 16,
            token_dim: 32,
            order: 16,
            n_mod: 40,
            branch_ratio: "auto".into(),
            temperature: 1.5,
            estimator: Estimator::GumbelSoftq,
            rate_allocator: false,
            channel_adapter: true,
            radius_tokenizer: 0.2,
            radius_main: 0.4,
            group_k: 16,
            attention_k: 8,
            sa_hidden: 32,
            mlp_hidden: 128,
            adapter_hidden: 128,
            demod_dim: 32,
            upsample_hidden: 32,
            offset_range: 0.1,
            fps: FpsMode::Fixed,
        }
    }
}

impl ModelConfig {
    /// Settings of the full-size system (N = 2048, N′ = 512, N″ = 128, 64-QAM).
    pub fn full_scale(n_mod: usize) -> Self {
        Self {
            n_points: 2048,
            n_tokens: 512,
            n_tokens_main: 128,
            token_dim: 128,
            order: 64,
            n_mod,
            attention_k: 16,
            demod_dim: 128,
            upsample_hidden: 128,
            sa_hidden: 64,
            ..Self::default()
        }
    }

    pub fn sqrt_order(&self) -> usize {
        match self.order {
            4 => 2,
            16 => 4,
            64 => 8,
            256 => 16,
            _ => 0,
        }
    }

    /// Logit row width 2√M.
    pub fn logit_width(&self) -> usize {
        2 * self.sqrt_order()
    }

    pub fn ratio(&self) -> Result<(usize, usize)> {
        if self.branch_ratio == "auto" {
            return Ok(if self.n_mod == 300 { (2, 1) } else { (4, 1) });
        }
        let parse = |s: &str| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| CoreError::Config(format!("bad branch ratio `{}`", self.branch_ratio)))
        };
        let (a, b) = self
            .branch_ratio
            .split_once(':')
            .ok_or_else(|| CoreError::Config(format!("bad branch ratio `{}`", self.branch_ratio)))?;
        let ratio = (parse(a)?, parse(b)?);
        if ratio.0 == 0 {
            return Err(CoreError::Config("main branch share must be positive".into()));
        }
        Ok(ratio)
    }

    /// (N_main, N_auxi.) with N_main + N_auxi. = N_mod.
    pub fn branch_sizes(&self) -> Result<(usize, usize)> {
        let (a, b) = self.ratio()?;
        let n_main = (self.n_mod * a + (a + b) / 2) / (a + b);
        Ok((n_main, self.n_mod - n_main))
    }

    /// Points per decoded token set (N/16).
    pub fn decoded_tokens(&self) -> usize {
        self.n_points / 16
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(CoreError::Config(m));
        if self.n_points == 0 || self.n_points % 16 != 0 {
            return err(format!("n_points = {} must be a positive multiple of 16", self.n_points));
        }
        if self.n_tokens == 0 || self.n_tokens > self.n_points {
            return err(format!("n_tokens = {} must lie in 1..=n_points", self.n_tokens));
        }
        if self.n_tokens_main == 0 || self.n_tokens_main > self.n_tokens {
            return err(format!("n_tokens_main = {} must lie in 1..=n_tokens", self.n_tokens_main));
        }
        if self.sqrt_order() == 0 {
            return err(format!("order M = {} must be one of 4, 16, 64, 256", self.order));
        }
        if self.n_mod == 0 {
            return err("n_mod must be positive".into());
        }
        let (main, _) = self.branch_sizes()?;
        if main == 0 {
            return err("main branch would carry no symbols".into());
        }
        if !(self.temperature > 0.0) {
            return err(format!("temperature {} must be positive", self.temperature));
        }
        if !(self.radius_tokenizer > 0.0 && self.radius_main > 0.0) {
            return err("ball-query radii must be positive".into());
        }
        if self.group_k == 0 || self.attention_k == 0 {
            return err("neighbour counts must be positive".into());
        }
        if !(self.offset_range >= 0.0) {
            return err("offset_range must be non-negative".into());
        }
        Ok(())
    }
}

/// Training, channel and evaluation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda: f64,
    pub rate_loss: RateLoss,
    pub channel: ChannelKind,
    pub snr_min: f64,
    pub snr_max: f64,
    /// When set, every batch trains at this SNR instead of a uniform draw.
    pub train_snr: Option<f64>,
    /// Variance of the complex Gaussian error added to the CSI estimate.
    pub csi_noise: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// The learning rate halves every this many epochs.
    pub lr_halving: usize,
    pub seed: u64,
    /// Synthetic dataset size (clouds across all splits).
    pub dataset_size: usize,
    /// Train/validation/test fractions in percent.
    pub split: [usize; 3],
    pub eval_snrs: Vec<f64>,
    pub eval_trials: usize,
    /// Optional checkpoint to start from (e.g. fine-tuning on Rayleigh).
    pub init_checkpoint: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 2e-4,
            rate_loss: RateLoss::Penalty,
            channel: ChannelKind::Awgn,
            snr_min: -0.5,
            snr_max: 10.5,
            train_snr: None,
            csi_noise: 0.0,
            epochs: 200,
            batch_size: 8,
            lr: 1e-3,
            weight_decay: 1e-4,
            lr_halving: 20,
            seed: 0,
            dataset_size: 32,
            split: [70, 10, 20],
            eval_snrs: vec![0.0, 5.0, 10.0, 15.0],
            eval_trials: 1,
            init_checkpoint: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(CoreError::Config(m));
        if !(self.lambda >= 0.0) {
            return err(format!("lambda {} must be non-negative", self.lambda));
        }
        if !(self.snr_min <= self.snr_max) || !self.snr_min.is_finite() || !self.snr_max.is_finite() {
            return err("snr_min must not exceed snr_max".into());
        }
        if self.batch_size == 0 {
            return err("batch_size must be positive".into());
        }
        if !(self.lr > 0.0) {
            return err(format!("lr {} must be positive", self.lr));
        }
        if self.lr_halving == 0 {
            return err("lr_halving must be positive".into());
        }
        if self.split.iter().sum::<usize>() != 100 {
            return err(format!("split {:?} must sum to 100", self.split));
        }
        if !(self.csi_noise >= 0.0) {
            return err("csi_noise must be non-negative".into());
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * 0.5_f64.powi((epoch / self.lr_halving) as i32)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(flatten)]
    pub model: ModelConfig,
    #[serde(flatten)]
    pub train: TrainConfig,
}

impl ExperimentConfig {
    /// Reduced CPU-sized configuration.
    pub fn desk() -> Self {
        Self::default()
    }

    pub fn full_scale(n_mod: usize) -> Self {
        Self {
            model: ModelConfig::full_scale(n_mod),
            train: TrainConfig {
                batch_size: 256,
                ..TrainConfig::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CoreError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CoreError::Parse(e.to_string()))
    }

    /// Applies `key=value` overrides; values use TOML syntax, bare words are
    /// taken as strings.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(&self.to_toml()?).map_err(|e| CoreError::Parse(e.to_string()))?;
        for item in overrides {
            let item = item.as_ref();
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| CoreError::Argument(format!("override `{item}` is not key=value")))?;
            let (key, raw) = (key.trim(), raw.trim());
            if !table.contains_key(key) && !OPTIONAL_KEYS.contains(&key) {
                return Err(CoreError::Argument(format!("unknown config key `{key}`")));
            }
            let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            table.insert(key.to_string(), value);
        }
        let text = toml::to_string(&table).map_err(|e| CoreError::Parse(e.to_string()))?;
        Self::from_toml(&text)
    }

    /// Stable hash of the serialized configuration.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(&Sha256::digest(text.as_bytes())[..8])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn branch_split_follows_ratio_rules() {
        let mut m = ModelConfig::full_scale(300);
        assert_eq!(m.branch_sizes().unwrap(), (200, 100));
        m.n_mod = 50;
        assert_eq!(m.branch_sizes().unwrap(), (40, 10));
        m.n_mod = 150;
        assert_eq!(m.branch_sizes().unwrap(), (120, 30));
        let desk = ModelConfig::default();
        assert_eq!(desk.branch_sizes().unwrap(), (32, 8));
        m.branch_ratio = "1:0".into();
        assert_eq!(m.branch_sizes().unwrap(), (150, 0));
    }

    #[test]
    fn full_scale_preserves_published_settings() {
        let c = ExperimentConfig::full_scale(300);
        assert_eq!(c.model.n_points, 2048);
        assert_eq!(c.model.n_tokens, 512);
        assert_eq!(c.model.n_tokens_main, 128);
        assert_eq!(c.model.temperature, 1.5);
        assert_eq!(c.train.lambda, 2e-4);
        assert_eq!(c.train.lr, 1e-3);
        assert_eq!(c.train.weight_decay, 1e-4);
        assert_eq!(c.train.lr_halving, 20);
        assert_eq!(c.train.batch_size, 256);
        assert_eq!((c.train.snr_min, c.train.snr_max), (-0.5, 10.5));
        assert_eq!(c.train.split, [70, 10, 20]);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut m = ModelConfig::default();
        m.n_points = 250;
        assert!(m.validate().is_err());
        let mut m = ModelConfig::default();
        m.order = 32;
        assert!(m.validate().is_err());
    }

    #[test]
    fn toml_round_trip_and_overrides() {
        let cfg = ExperimentConfig::desk();
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
        let o = cfg
            .with_overrides(&["epochs=3", "estimator=ste", "eval_snrs=[0.0, 5.0]", "train_snr=10.0"])
            .unwrap();
        assert_eq!(o.train.epochs, 3);
        assert_eq!(o.model.estimator, Estimator::Ste);
        assert_eq!(o.train.eval_snrs, vec![0.0, 5.0]);
        assert_eq!(o.train.train_snr, Some(10.0));
        assert!(cfg.with_overrides(&["epochs"]).is_err());
        assert_ne!(o.hash(), cfg.hash());
    }

    #[test]
    fn lr_halves_on_schedule() {
        let t = TrainConfig::default();
        assert_eq!(t.lr_at(0), 1e-3);
        assert_eq!(t.lr_at(19), 1e-3);
        assert_eq!(t.lr_at(20), 5e-4);
        assert_eq!(t.lr_at(45), 2.5e-4);
    }
}
