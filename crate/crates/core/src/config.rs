//! Run configuration. Every struct rejects unknown keys when parsed from JSON.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Pattern;
use crate::metrics::MetricConfig;
use crate::objective::LossWeights;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("config parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    Parallel,
    Autoregressive,
}

impl std::fmt::Display for GeneratorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GeneratorKind::Parallel => "parallel",
            GeneratorKind::Autoregressive => "autoregressive",
        })
    }
}

/// Which knowledge encodings feed the transformer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Encodings {
    pub oenc: bool,
    pub renc: bool,
    pub senc: bool,
}

impl Encodings {
    pub const ALL: Encodings = Encodings {
        oenc: true,
        renc: true,
        senc: true,
    };
    pub const NONE: Encodings = Encodings {
        oenc: false,
        renc: false,
        senc: false,
    };

    /// Short label such as `O+R+S` or `vanilla`.
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.oenc {
            parts.push("O");
        }
        if self.renc {
            parts.push("R");
        }
        if self.senc {
            parts.push("S");
        }
        if parts.is_empty() {
            "vanilla".into()
        } else {
            parts.join("+")
        }
    }
}

impl Default for Encodings {
    fn default() -> Self {
        Self::ALL
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Transformer width.
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    /// Capacity of the order one-hot.
    pub n_max: usize,
    /// Capacity of the symmetry one-hot.
    pub m_max: usize,
    pub ff_mult: usize,
    /// Per-point widths of the part encoder; the last one is the feature width.
    pub enc_widths: Vec<usize>,
    /// Points per part fed to the encoder.
    pub points: usize,
    pub generator: GeneratorKind,
    pub rotary_base: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 512,
            layers: 6,
            heads: 8,
            n_max: 20,
            m_max: 20,
            ff_mult: 4,
            enc_widths: vec![64, 128, 512],
            points: 1000,
            generator: GeneratorKind::Parallel,
            rotary_base: crate::knowledge::DEFAULT_ROTARY_BASE,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.into()));
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return bad("model.d must be a positive multiple of model.heads");
        }
        if (self.d / self.heads) % 2 != 0 {
            return bad("model.d / model.heads must be even for rotary encoding");
        }
        if self.generator == GeneratorKind::Autoregressive && self.d % 2 != 0 {
            return bad("model.d must be even for the autoregressive generator");
        }
        if self.layers == 0 || self.ff_mult == 0 {
            return bad("model.layers and model.ff_mult must be positive");
        }
        if self.n_max == 0 || self.m_max == 0 {
            return bad("model.n_max and model.m_max must be positive");
        }
        if self.enc_widths.is_empty() || self.enc_widths.contains(&0) {
            return bad("model.enc_widths must be nonempty and positive");
        }
        if self.points == 0 {
            return bad("model.points must be positive");
        }
        if !(self.rotary_base > 1.0) {
            return bad("model.rotary_base must exceed 1");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn d_enc(&self) -> usize {
        *self.enc_widths.last().expect("validated")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub decay: f64,
    pub decay_every: usize,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Validation PA is computed every this many epochs (and at the last one).
    pub val_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1.5e-4,
            decay: 0.8,
            decay_every: 80,
            batch: 128,
            epochs: 800,
            seed: 0,
            val_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(ConfigError::Invalid("train.lr must be positive".into()));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(ConfigError::Invalid("train.decay must be in (0, 1]".into()));
        }
        if self.batch == 0 || self.epochs == 0 || self.val_every == 0 {
            return Err(ConfigError::Invalid(
                "train.batch, train.epochs and train.val_every must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub encodings: Encodings,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub metrics: MetricConfig,
    pub pattern: Pattern,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate()?;
        self.train.validate()?;
        self.loss.validate().map_err(ConfigError::Invalid)?;
        self.metrics.validate().map_err(ConfigError::Invalid)?;
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
