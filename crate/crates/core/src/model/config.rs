use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::MemoryMode;

/// Output activation for every classification layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    /// Single-label streams; adds an implicit background column.
    Softmax,
    /// Multi-label streams with co-occurring actions.
    Sigmoid,
}

/// How the online prediction is read out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OnlineHead {
    /// Causal temporal convolution and an encoder layer over past + current,
    /// concatenated and classified by a linear layer.
    #[default]
    Fused,
    /// A linear layer on the updated current-frame embedding only.
    Fc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PastBlock {
    #[default]
    Transformer,
    /// Stacked LSTM baseline.
    Lstm,
}

macro_rules! str_enum {
    ($ty:ty { $($s:literal => $v:expr),+ $(,)? }) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok($v),)+
                    other => Err(Error::Config(format!(
                        "unknown {} `{other}`", stringify!($ty)
                    ))),
                }
            }
        }
    };
}

str_enum!(HeadMode { "softmax" => HeadMode::Softmax, "sigmoid" => HeadMode::Sigmoid });
str_enum!(OnlineHead { "fused" => OnlineHead::Fused, "fc" => OnlineHead::Fc });
str_enum!(PastBlock { "transformer" => PastBlock::Transformer, "lstm" => PastBlock::Lstm });

impl fmt::Display for OnlineHead {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OnlineHead::Fused => "fused",
            OnlineHead::Fc => "fc",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub num_encoder_layers: usize,
    pub num_decoder_layers: usize,
    pub num_head_encoder_layers: usize,
    /// Number of future frames anticipated beyond the upcoming one.
    pub anticipation_horizon: usize,
    pub num_classes: usize,
    pub head_mode: HeadMode,
    pub tcn_kernel_size: usize,
    pub dropout: f64,
    pub memory_mode: MemoryMode,
    pub online_head: OnlineHead,
    pub past_block: PastBlock,
    pub lstm_layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_dim: 1024,
            hidden_dim: 1024,
            num_heads: 16,
            ffn_dim: 2048,
            num_encoder_layers: 2,
            num_decoder_layers: 2,
            num_head_encoder_layers: 1,
            anticipation_horizon: 6,
            num_classes: 20,
            head_mode: HeadMode::Sigmoid,
            tcn_kernel_size: 3,
            dropout: 0.1,
            memory_mode: MemoryMode::LongShort,
            online_head: OnlineHead::Fused,
            past_block: PastBlock::Transformer,
            lstm_layers: 3,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.feature_dim == 0 || self.hidden_dim == 0 || self.ffn_dim == 0 {
            return fail("feature_dim, hidden_dim and ffn_dim must be positive".into());
        }
        if self.num_heads == 0 || !self.hidden_dim.is_multiple_of(self.num_heads) {
            return fail(format!(
                "hidden_dim {} must be divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            ));
        }
        if self.tcn_kernel_size == 0 || self.tcn_kernel_size.is_multiple_of(2) {
            return fail(format!(
                "tcn_kernel_size must be odd, got {}",
                self.tcn_kernel_size
            ));
        }
        if self.num_classes < 2 {
            return fail("num_classes must be at least 2".into());
        }
        if self.num_decoder_layers == 0 {
            return fail("num_decoder_layers must be at least 1".into());
        }
        if self.past_block == PastBlock::Lstm && self.lstm_layers == 0 {
            return fail("lstm_layers must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }

    /// `N_q = 1 + N_f`: the upcoming frame plus the anticipated future.
    pub fn num_queries(&self) -> usize {
        1 + self.anticipation_horizon
    }

    /// Width of every logit row; softmax heads carry a trailing background column.
    pub fn output_dim(&self) -> usize {
        match self.head_mode {
            HeadMode::Softmax => self.num_classes + 1,
            HeadMode::Sigmoid => self.num_classes,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    /// Closed-form trainable parameter count; see the README for the derivation.
    pub fn parameter_count(&self) -> usize {
        let (d, h, f, k) = (
            self.feature_dim,
            self.hidden_dim,
            self.ffn_dim,
            self.output_dim(),
        );
        let ffn = h * f + f + f * h + h;
        let encoder_layer = 4 * h * h + ffn + 4 * h;
        let decoder_layer = 8 * h * h + ffn + 6 * h;
        let classifier = h * k + k;
        let past = match self.past_block {
            PastBlock::Transformer => self.num_encoder_layers * encoder_layer,
            PastBlock::Lstm => self.lstm_layers * (8 * h * h + 4 * h),
        };
        let head = match self.online_head {
            OnlineHead::Fused => {
                self.tcn_kernel_size * h * h
                    + h
                    + self.num_head_encoder_layers * encoder_layer
                    + 2 * h * k
                    + k
            }
            OnlineHead::Fc => classifier,
        };
        d * h
            + h
            + past
            + self.num_decoder_layers * decoder_layer
            + 2 * classifier
            + self.num_queries() * h
            + head
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_reference_recipe() {
        let c = ModelConfig::default();
        assert_eq!(c.num_heads, 16);
        assert_eq!(c.hidden_dim, 1024);
        c.validate().unwrap();
    }

    #[test]
    fn query_count() {
        let mut c = ModelConfig {
            anticipation_horizon: 6,
            ..ModelConfig::default()
        };
        assert_eq!(c.num_queries(), 7);
        c.anticipation_horizon = 0;
        assert_eq!(c.num_queries(), 1);
    }

    #[test]
    fn invalid_configs() {
        let base = ModelConfig::default();
        let mut c = base.clone();
        c.hidden_dim = 30;
        c.num_heads = 4;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.tcn_kernel_size = 2;
        assert!(c.validate().is_err());
        let mut c = base;
        c.dropout = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<ModelConfig>("hidden_dim = 8\nbogus = 1").is_err());
        let c: ModelConfig = toml::from_str("hidden_dim = 8\nnum_heads = 2").unwrap();
        assert_eq!(c.hidden_dim, 8);
        assert_eq!(c.num_encoder_layers, 2);
    }
}
