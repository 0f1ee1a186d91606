//! Model and training configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 3;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["NC", "MCI", "AD"];

/// Every tunable of the model and the training loop. Serialized as TOML;
/// unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    // tabular encoder
    pub d_model: usize,
    pub tab_layers: usize,
    pub tab_heads: usize,
    pub ff_mult: usize,
    pub remove_first_norm: bool,

    // temporal encoder
    pub k_top: usize,
    pub times_blocks: usize,
    pub inception_kernels: Vec<usize>,
    /// Let gradients flow through the amplitude weights.
    pub amplitude_grad: bool,

    // imaging encoder
    pub growth_rate: usize,
    pub dense_layers: usize,
    pub dense_blocks: usize,

    // fusion head
    pub eeg3d_channels: usize,
    pub eeg3d_dims: [usize; 3],
    pub fusion_dim: usize,
    pub fusion_heads: usize,
    pub agg_hidden: usize,

    // training
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub dropout: f64,
    pub epochs: usize,
    /// Capped at the training split size; the default trains full-batch.
    pub batch_size: usize,
    pub seed: u64,
    pub eval_every: usize,

    // ablations
    pub no_denseblock: bool,
    pub no_timesblock: bool,
    pub no_cmaa: bool,
    pub no_feature_biases: bool,

    // paths (excluded from the config hash and from checkpoints)
    pub data: String,
    pub run_dir: String,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            tab_layers: 2,
            tab_heads: 4,
            ff_mult: 2,
            remove_first_norm: true,
            k_top: 3,
            times_blocks: 2,
            inception_kernels: vec![1, 3, 5],
            amplitude_grad: false,
            growth_rate: 8,
            dense_layers: 2,
            dense_blocks: 2,
            eeg3d_channels: 4,
            eeg3d_dims: [2, 2, 2],
            fusion_dim: 32,
            fusion_heads: 4,
            agg_hidden: 64,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            dropout: 0.1,
            epochs: 200,
            batch_size: 100,
            seed: 0,
            eval_every: 1,
            no_denseblock: false,
            no_timesblock: false,
            no_cmaa: false,
            no_feature_biases: false,
            data: "data/manifest.toml".into(),
            run_dir: "runs/default".into(),
        }
    }
}

/// One row of the ablation table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Ablation {
    Full,
    NoDenseBlock,
    NoTimesBlock,
    NoCmaa,
    NoFeatureBiases,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::NoDenseBlock,
        Ablation::NoTimesBlock,
        Ablation::NoCmaa,
        Ablation::NoFeatureBiases,
        Ablation::Full,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Ablation::Full => "full model",
            Ablation::NoDenseBlock => "w/o DenseBlock",
            Ablation::NoTimesBlock => "w/o TimesBlock",
            Ablation::NoCmaa => "w/o CMAA",
            Ablation::NoFeatureBiases => "w/o Feature Biases",
        }
    }

    /// Directory-safe name.
    pub fn slug(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoDenseBlock => "no_denseblock",
            Ablation::NoTimesBlock => "no_timesblock",
            Ablation::NoCmaa => "no_cmaa",
            Ablation::NoFeatureBiases => "no_feature_biases",
        }
    }

    /// The configuration for this row, derived from a full-model config.
    pub fn apply(self, base: &ModelConfig) -> ModelConfig {
        let mut c = base.clone();
        c.no_denseblock = false;
        c.no_timesblock = false;
        c.no_cmaa = false;
        c.no_feature_biases = false;
        match self {
            Ablation::Full => {}
            Ablation::NoDenseBlock => c.no_denseblock = true,
            Ablation::NoTimesBlock => c.no_timesblock = true,
            Ablation::NoCmaa => c.no_cmaa = true,
            Ablation::NoFeatureBiases => c.no_feature_biases = true,
        }
        c
    }
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl ModelConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| bad(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("tab_layers", self.tab_layers),
            ("tab_heads", self.tab_heads),
            ("ff_mult", self.ff_mult),
            ("k_top", self.k_top),
            ("times_blocks", self.times_blocks),
            ("growth_rate", self.growth_rate),
            ("dense_layers", self.dense_layers),
            ("dense_blocks", self.dense_blocks),
            ("eeg3d_channels", self.eeg3d_channels),
            ("fusion_dim", self.fusion_dim),
            ("fusion_heads", self.fusion_heads),
            ("agg_hidden", self.agg_hidden),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("eval_every", self.eval_every),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(bad(format!("{name} must be positive")));
            }
        }
        if self.eeg3d_dims.contains(&0) {
            return Err(bad("eeg3d_dims must be positive"));
        }
        if self.d_model % self.tab_heads != 0 {
            return Err(bad(format!("d_model {} not divisible by tab_heads {}", self.d_model, self.tab_heads)));
        }
        if self.fusion_dim % self.fusion_heads != 0 {
            return Err(bad(format!(
                "fusion_dim {} not divisible by fusion_heads {}",
                self.fusion_dim, self.fusion_heads
            )));
        }
        if self.inception_kernels.is_empty() || self.inception_kernels.iter().any(|k| k % 2 == 0) {
            return Err(bad("inception_kernels must be a non-empty list of odd sizes"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(bad("dropout must lie in [0, 1)"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(bad("learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(bad("Adam moments need beta in [0,1) and eps > 0"));
        }
        Ok(())
    }

    /// Sets one field from a `--key value` style override. The value is
    /// parsed as a TOML literal, falling back to a bare string.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut table = toml::Table::try_from(&*self).map_err(|e| bad(e.to_string()))?;
        if !table.contains_key(key) {
            return Err(bad(format!("unknown key `{key}`")));
        }
        let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        table.insert(key.to_string(), parsed);
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| bad(format!("`{key}`: {e}")))?;
        cfg.validate()?;
        *self = cfg;
        Ok(())
    }

    /// The configuration with path fields blanked.
    pub fn without_paths(&self) -> Self {
        Self {
            data: String::new(),
            run_dir: String::new(),
            ..self.clone()
        }
    }

    /// Short digest over every non-path field.
    pub fn hash(&self) -> String {
        let text = self.without_paths().to_toml();
        hex::encode(&Sha256::digest(text.as_bytes())[..8])
    }
}
