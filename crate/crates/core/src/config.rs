//! Experiment configuration: TOML files with `[model]` and `[train]`
//! tables. Unknown keys are hard errors (deny_unknown_fields) so typos
//! cannot silently fall back to defaults. Defaults follow the documented
//! training recipe: lr 3e-4, dropout 0.1, causal weight 0.8, KD alpha 0.02,
//! KD temperature 1.0.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

fn default_feat_dim() -> usize {
    80
}
fn default_subsample() -> usize {
    4
}
fn default_heads() -> usize {
    4
}
fn default_kernel() -> usize {
    7
}
fn default_expansion() -> usize {
    4
}
fn default_lstm_layers() -> usize {
    2
}
fn default_context() -> usize {
    5
}
fn default_tied() -> bool {
    true
}
fn default_seed() -> u64 {
    1
}
fn default_batch() -> usize {
    16
}
fn default_lr() -> f64 {
    3e-4
}
fn default_warmup() -> usize {
    500
}
fn default_weight_decay() -> f64 {
    1e-6
}
fn default_dropout() -> f64 {
    0.1
}
fn default_causal_weight() -> f64 {
    0.8
}
fn default_alpha() -> f64 {
    0.02
}
fn default_temperature() -> f64 {
    1.0
}
fn default_log_every() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Raw feature width before frame stacking.
    #[serde(default = "default_feat_dim")]
    pub feat_dim: usize,
    /// Frame-stacking factor; encoder sees ceil(T/factor) frames of width
    /// feat_dim * factor.
    #[serde(default = "default_subsample")]
    pub subsample_factor: usize,
    pub d_model: usize,
    #[serde(default = "default_heads")]
    pub num_heads: usize,
    #[serde(default = "default_kernel")]
    pub conv_kernel: usize,
    #[serde(default = "default_expansion")]
    pub ffn_expansion: usize,
    pub causal_layers: usize,
    pub noncausal_layers: usize,
    /// Output vocabulary including blank id 0.
    pub vocab_size: usize,
    pub decoder: DecoderConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "lowercase")]
pub enum DecoderConfig {
    /// Recurrent baseline predictor: embedding -> stacked LSTM -> projection.
    Lstm {
        embed_dim: usize,
        hidden_dim: usize,
        #[serde(default = "default_lstm_layers")]
        layers: usize,
        joint_dim: usize,
    },
    /// Tied-and-reduced predictor: weighted average of the last `context`
    /// label embeddings; embedding matrix doubles as the joint output layer
    /// when tied (joint width == embed_dim).
    Tar {
        embed_dim: usize,
        #[serde(default = "default_context")]
        context: usize,
        #[serde(default = "default_heads")]
        heads: usize,
        #[serde(default = "default_tied")]
        tied: bool,
    },
}

impl DecoderConfig {
    pub fn kind_name(&self) -> &'static str {
        match self {
            DecoderConfig::Lstm { .. } => "lstm",
            DecoderConfig::Tar { .. } => "tar",
        }
    }

    /// Width of the predictor output / joint hidden layer.
    pub fn joint_dim(&self) -> usize {
        match self {
            DecoderConfig::Lstm { joint_dim, .. } => *joint_dim,
            DecoderConfig::Tar { embed_dim, .. } => *embed_dim,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum KdMode {
    Full,
    Efficient,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum KdBranches {
    Both,
    Causal,
    Noncausal,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct KdConfig {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_kd_mode")]
    pub mode: KdMode,
    #[serde(default = "default_kd_branches")]
    pub branches: KdBranches,
}

fn default_kd_mode() -> KdMode {
    KdMode::Efficient
}
fn default_kd_branches() -> KdBranches {
    KdBranches::Both
}

impl Default for KdConfig {
    fn default() -> Self {
        KdConfig {
            alpha: default_alpha(),
            temperature: default_temperature(),
            mode: default_kd_mode(),
            branches: default_kd_branches(),
        }
    }
}

/// Optional train-time feature masking (zeroed time spans / frequency bands).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub time_masks: usize,
    pub time_width: usize,
    pub freq_masks: usize,
    pub freq_width: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_warmup")]
    pub warmup_steps: usize,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default = "default_causal_weight")]
    pub causal_weight: f64,
    #[serde(default)]
    pub kd: Option<KdConfig>,
    #[serde(default)]
    pub augment: Option<AugmentConfig>,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must be >= 2 (blank plus one label)".into()));
        }
        if self.d_model == 0 || self.num_heads == 0 {
            return Err(Error::Config("d_model and num_heads must be positive".into()));
        }
        if self.d_model % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if self.conv_kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "conv_kernel must be odd, got {}",
                self.conv_kernel
            )));
        }
        if self.causal_layers < 1 {
            return Err(Error::Config("causal_layers must be >= 1".into()));
        }
        if self.subsample_factor < 1 {
            return Err(Error::Config("subsample_factor must be >= 1".into()));
        }
        if self.feat_dim < 1 {
            return Err(Error::Config("feat_dim must be >= 1".into()));
        }
        if self.ffn_expansion < 1 {
            return Err(Error::Config("ffn_expansion must be >= 1".into()));
        }
        match &self.decoder {
            DecoderConfig::Lstm { embed_dim, hidden_dim, layers, joint_dim } => {
                if *embed_dim == 0 || *hidden_dim == 0 || *layers == 0 || *joint_dim == 0 {
                    return Err(Error::Config("lstm decoder dims must be positive".into()));
                }
            }
            DecoderConfig::Tar { embed_dim, context, heads, .. } => {
                if *embed_dim == 0 || *context == 0 || *heads == 0 {
                    return Err(Error::Config("tar decoder dims must be positive".into()));
                }
            }
        }
        Ok(())
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0,1), got {}", self.dropout)));
        }
        if !(0.0..=1.0).contains(&self.causal_weight) {
            return Err(Error::Config(format!(
                "causal_weight must be in [0,1], got {}",
                self.causal_weight
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be >= 1".into()));
        }
        if let Some(kd) = &self.kd {
            if !(0.0..=1.0).contains(&kd.alpha) {
                return Err(Error::Config(format!("kd.alpha must be in [0,1], got {}", kd.alpha)));
            }
            if !(kd.temperature > 0.0) {
                return Err(Error::Config(format!(
                    "kd.temperature must be positive, got {}",
                    kd.temperature
                )));
            }
        }
        Ok(())
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(s).map_err(|e| Error::Config(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(&path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("config serialize: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str = r#"
[model]
d_model = 32
causal_layers = 2
noncausal_layers = 1
vocab_size = 16

[model.decoder]
kind = "tar"
embed_dim = 24

[train]
steps = 100
"#;

    #[test]
    fn parses_with_defaults() {
        let cfg = ExperimentConfig::from_toml_str(GOOD).unwrap();
        assert_eq!(cfg.model.feat_dim, 80);
        assert_eq!(cfg.model.subsample_factor, 4);
        assert_eq!(cfg.model.num_heads, 4);
        assert_eq!(cfg.model.conv_kernel, 7);
        assert!((cfg.train.learning_rate - 3e-4).abs() < 1e-12);
        assert!((cfg.train.dropout - 0.1).abs() < 1e-12);
        assert!((cfg.train.causal_weight - 0.8).abs() < 1e-7);
        assert!(cfg.train.kd.is_none());
        match cfg.model.decoder {
            DecoderConfig::Tar { context, heads, tied, .. } => {
                assert_eq!(context, 5);
                assert_eq!(heads, 4);
                assert!(tied);
            }
            _ => panic!("expected tar decoder"),
        }
    }

    #[test]
    fn unknown_key_is_hard_error() {
        let bad = GOOD.replace("steps = 100", "steps = 100\nstepz = 5");
        let err = ExperimentConfig::from_toml_str(&bad).unwrap_err();
        assert!(format!("{err}").contains("stepz"), "{err}");
    }

    #[test]
    fn kd_defaults() {
        let with_kd = GOOD.replace("steps = 100", "steps = 100\n[train.kd]");
        let cfg = ExperimentConfig::from_toml_str(&with_kd).unwrap();
        let kd = cfg.train.kd.unwrap();
        assert!((kd.alpha - 0.02).abs() < 1e-7);
        assert!((kd.temperature - 1.0).abs() < 1e-7);
        assert_eq!(kd.mode, KdMode::Efficient);
        assert_eq!(kd.branches, KdBranches::Both);
    }

    #[test]
    fn invalid_values_rejected() {
        let bad = GOOD.replace("d_model = 32", "d_model = 30"); // not divisible by 4 heads
        assert!(ExperimentConfig::from_toml_str(&bad).is_err());
        let bad = GOOD.replace("vocab_size = 16", "vocab_size = 1");
        assert!(ExperimentConfig::from_toml_str(&bad).is_err());
        let bad = GOOD.replace("steps = 100", "steps = 0");
        assert!(ExperimentConfig::from_toml_str(&bad).is_err());
    }

    #[test]
    fn roundtrips_through_toml() {
        let cfg = ExperimentConfig::from_toml_str(GOOD).unwrap();
        let text = cfg.to_toml_string().unwrap();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg, back);
    }
}
