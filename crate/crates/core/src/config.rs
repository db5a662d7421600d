//! Model and training configuration.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::AttentionConfig;
use crate::decoder::DecoderConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::optim::OptimizerKind;

/// Adam step size for desk-scale training. Plain SGD (`kind: "sgd"`) stays
/// available; with a zero-initialized head it barely moves within a few
/// dozen epochs.
pub const DEFAULT_LEARNING_RATE: f64 = 3e-3;
pub const DEFAULT_WEIGHT_DECAY: f64 = 3e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Precision {
    F32,
    F64,
}

impl TryFrom<u8> for Precision {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            32 => Ok(Precision::F32),
            64 => Ok(Precision::F64),
            other => Err(format!("precision must be 32 or 64, got {other}")),
        }
    }
}

impl From<Precision> for u8 {
    fn from(p: Precision) -> u8 {
        match p {
            Precision::F32 => 32,
            Precision::F64 => 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Heavy-ball coefficient for SGD; 0 is plain SGD.
    pub momentum: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate: DEFAULT_LEARNING_RATE,
            weight_decay: DEFAULT_WEIGHT_DECAY,
            batch_size: 4,
            epochs: 100,
            momentum: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self, errors: &mut Vec<String>) {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            errors.push(format!("optimizer.learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            errors.push(format!("optimizer.weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            errors.push(format!("optimizer.momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.batch_size == 0 {
            errors.push("optimizer.batch_size must be >= 1".into());
        }
        if self.epochs == 0 {
            errors.push("optimizer.epochs must be >= 1".into());
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub attention: AttentionConfig,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            attention: AttentionConfig::default(),
            loss: LossConfig::default(),
            optimizer: OptimizerConfig::default(),
            seed: 0,
            precision: Precision::F32,
        }
    }
}

impl ModelConfig {
    /// Every problem found, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut errors = Vec::new();
        self.encoder.validate(&mut errors);
        self.decoder.validate(&self.encoder, &mut errors);
        let a = &self.attention;
        if !a.efficient && !a.channel {
            errors.push("attention: at least one of efficient/channel must be enabled".into());
        }
        if a.heads == 0 {
            errors.push("attention.heads must be >= 1".into());
        } else {
            for (i, &c) in self.encoder.stage_channels.iter().enumerate() {
                if c % a.heads != 0 {
                    errors.push(format!(
                        "stage {i}: {c} channels not divisible by {} heads",
                        a.heads
                    ));
                }
            }
        }
        if a.ffn_kernel == 0 {
            errors.push("attention.ffn_kernel must be >= 1".into());
        }
        self.loss.validate(&mut errors);
        self.optimizer.validate(&mut errors);
        errors
    }

    pub fn validate(&self) -> Result<()> {
        let errors = self.problems();
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errors))
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Hex SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Tiny configuration for gradient checks and quick tests: 8³ inputs,
    /// channels `[2, 4, 6, 8]`, one head, stride-2 stages with a final
    /// stride-1 stage.
    pub fn tiny() -> Self {
        Self {
            encoder: EncoderConfig {
                stage_strides: vec![2, 2, 2, 1],
                patch_kernels: vec![3, 3, 3, 3],
                stage_channels: vec![2, 4, 6, 8],
                blocks_per_stage: 1,
            },
            attention: AttentionConfig {
                heads: 1,
                ..Default::default()
            },
            loss: LossConfig {
                ncc_window: 3,
                ..Default::default()
            },
            precision: Precision::F64,
            ..Default::default()
        }
    }
}
