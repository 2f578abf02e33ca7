//! Model hyperparameters.
//!
//! `mel_bands` here is the model's output width. The synthesis pipeline pins
//! it to the analysis mel band count, but test models may shrink it to keep
//! parameter counts tiny.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const POSTNET_LAYERS: usize = 5;
pub const REFERENCE_CONV_LAYERS: usize = 6;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct EncoderConfig {
    pub embedding_dim: usize,
    /// Conv bank covers widths 1..=bank_k.
    pub bank_k: usize,
    pub bank_channels: usize,
    pub proj_channels: usize,
    pub highway_layers: usize,
    /// Per direction; memory width is twice this.
    pub rnn_units: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            embedding_dim: 256,
            bank_k: 16,
            bank_channels: 128,
            proj_channels: 256,
            highway_layers: 4,
            rnn_units: 128,
        }
    }
}

impl EncoderConfig {
    pub fn memory_dim(&self) -> usize {
        2 * self.rnn_units
    }
}

/// The style path: token bank shared by the reference (training) and
/// text-predicted (inference) acoustic embeddings.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct StyleConfig {
    /// Acoustic embedding width D.
    pub dim: usize,
    pub tokens: usize,
    pub heads: usize,
    /// Text-side predictor head.
    pub predictor_conv_width: usize,
    pub predictor_conv_channels: usize,
    pub predictor_gru_units: usize,
}

impl Default for StyleConfig {
    fn default() -> Self {
        StyleConfig {
            dim: 256,
            tokens: 10,
            heads: 4,
            predictor_conv_width: 3,
            predictor_conv_channels: 256,
            predictor_gru_units: 128,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ReferenceConfig {
    /// Exactly six stride-2 3x3 conv layers.
    pub conv_channels: Vec<usize>,
    pub gru_units: usize,
    /// Shorter spectrograms are zero-padded up to this frame count so six
    /// halvings always leave at least one step.
    pub min_frames: usize,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        ReferenceConfig {
            conv_channels: vec![32, 32, 64, 64, 128, 128],
            gru_units: 128,
            min_frames: 64,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DecoderConfig {
    pub prenet_dims: Vec<usize>,
    pub prenet_dropout: f64,
    pub attention_rnn_units: usize,
    pub decoder_rnn_units: usize,
    pub attention_dim: usize,
    pub postnet_channels: usize,
    pub postnet_width: usize,
    /// Frames emitted per decoder step.
    pub reduction: usize,
    pub gate_threshold: f64,
    pub max_steps: usize,
    /// Std-dev of pre-sigmoid Gaussian noise on move probabilities during
    /// soft (training) attention; hard inference uses none.
    pub sma_noise: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            prenet_dims: vec![256, 256],
            prenet_dropout: 0.5,
            attention_rnn_units: 1024,
            decoder_rnn_units: 1024,
            attention_dim: 128,
            postnet_channels: 512,
            postnet_width: 5,
            reduction: 1,
            gate_threshold: 0.5,
            max_steps: 1000,
            sma_noise: 2.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ModelConfig {
    pub mel_bands: usize,
    pub encoder: EncoderConfig,
    pub style: StyleConfig,
    pub reference: ReferenceConfig,
    pub decoder: DecoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            mel_bands: 80,
            encoder: EncoderConfig::default(),
            style: StyleConfig::default(),
            reference: ReferenceConfig::default(),
            decoder: DecoderConfig::default(),
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reference encoder needs exactly {REFERENCE_CONV_LAYERS} conv layers, got {0}")]
    ReferenceLayers(usize),
    #[error("style dim {dim} not divisible by {heads} heads")]
    HeadSplit { dim: usize, heads: usize },
    #[error("{0} must be positive")]
    ZeroField(&'static str),
    #[error("gate threshold {0} outside (0, 1)")]
    GateThreshold(f64),
    #[error("prenet dropout {0} outside [0, 1)")]
    PrenetDropout(f64),
    #[error("reduction factor must be >= 1")]
    Reduction,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.reference.conv_channels.len() != REFERENCE_CONV_LAYERS {
            return Err(ConfigError::ReferenceLayers(self.reference.conv_channels.len()));
        }
        if self.style.heads == 0 || self.style.dim % self.style.heads != 0 {
            return Err(ConfigError::HeadSplit { dim: self.style.dim, heads: self.style.heads });
        }
        for (name, v) in [
            ("mel_bands", self.mel_bands),
            ("embedding_dim", self.encoder.embedding_dim),
            ("bank_k", self.encoder.bank_k),
            ("bank_channels", self.encoder.bank_channels),
            ("proj_channels", self.encoder.proj_channels),
            ("rnn_units", self.encoder.rnn_units),
            ("style.dim", self.style.dim),
            ("style.tokens", self.style.tokens),
            ("attention_dim", self.decoder.attention_dim),
            ("attention_rnn_units", self.decoder.attention_rnn_units),
            ("decoder_rnn_units", self.decoder.decoder_rnn_units),
            ("max_steps", self.decoder.max_steps),
        ] {
            if v == 0 {
                return Err(ConfigError::ZeroField(name));
            }
        }
        if !(self.decoder.gate_threshold > 0.0 && self.decoder.gate_threshold < 1.0) {
            return Err(ConfigError::GateThreshold(self.decoder.gate_threshold));
        }
        if !(0.0..1.0).contains(&self.decoder.prenet_dropout) {
            return Err(ConfigError::PrenetDropout(self.decoder.prenet_dropout));
        }
        if self.decoder.reduction == 0 {
            return Err(ConfigError::Reduction);
        }
        Ok(())
    }

    /// Small enough to overfit a handful of fixture utterances in minutes on
    /// a laptop core, still wide enough to align and stop properly.
    pub fn compact() -> Self {
        ModelConfig {
            mel_bands: 80,
            encoder: EncoderConfig {
                embedding_dim: 32,
                bank_k: 4,
                bank_channels: 16,
                proj_channels: 32,
                highway_layers: 1,
                rnn_units: 16,
            },
            style: StyleConfig {
                dim: 16,
                tokens: 4,
                heads: 2,
                predictor_conv_width: 3,
                predictor_conv_channels: 16,
                predictor_gru_units: 16,
            },
            reference: ReferenceConfig {
                conv_channels: vec![4, 4, 8, 8, 16, 16],
                gru_units: 16,
                min_frames: 64,
            },
            decoder: DecoderConfig {
                prenet_dims: vec![32, 32],
                prenet_dropout: 0.5,
                attention_rnn_units: 48,
                decoder_rnn_units: 48,
                attention_dim: 32,
                postnet_channels: 16,
                postnet_width: 5,
                reduction: 1,
                gate_threshold: 0.5,
                max_steps: 1000,
                sma_noise: 2.0,
            },
        }
    }

    /// Smallest coherent instance, used for exhaustive finite-difference
    /// gradient checks. Every structural piece is present at width 1-2.
    pub fn micro() -> Self {
        ModelConfig {
            mel_bands: 4,
            encoder: EncoderConfig {
                embedding_dim: 2,
                bank_k: 2,
                bank_channels: 2,
                proj_channels: 2,
                highway_layers: 1,
                rnn_units: 2,
            },
            style: StyleConfig {
                dim: 2,
                tokens: 2,
                heads: 1,
                predictor_conv_width: 3,
                predictor_conv_channels: 2,
                predictor_gru_units: 2,
            },
            reference: ReferenceConfig {
                conv_channels: vec![1, 1, 1, 1, 1, 1],
                gru_units: 2,
                min_frames: 64,
            },
            decoder: DecoderConfig {
                prenet_dims: vec![2, 2],
                prenet_dropout: 0.5,
                attention_rnn_units: 2,
                decoder_rnn_units: 2,
                attention_dim: 2,
                postnet_channels: 1,
                postnet_width: 5,
                reduction: 1,
                gate_threshold: 0.5,
                max_steps: 50,
                sma_noise: 2.0,
            },
        }
    }

    /// Mid-size gradient-check configuration: wide enough that every slice
    /// boundary and head split is non-trivial.
    pub fn grad_check() -> Self {
        ModelConfig {
            mel_bands: 6,
            encoder: EncoderConfig {
                embedding_dim: 8,
                bank_k: 2,
                bank_channels: 4,
                proj_channels: 8,
                highway_layers: 1,
                rnn_units: 8,
            },
            style: StyleConfig {
                dim: 4,
                tokens: 3,
                heads: 2,
                predictor_conv_width: 3,
                predictor_conv_channels: 4,
                predictor_gru_units: 4,
            },
            reference: ReferenceConfig {
                conv_channels: vec![2, 2, 2, 2, 2, 2],
                gru_units: 4,
                min_frames: 64,
            },
            decoder: DecoderConfig {
                prenet_dims: vec![4, 4],
                prenet_dropout: 0.5,
                attention_rnn_units: 6,
                decoder_rnn_units: 6,
                attention_dim: 4,
                postnet_channels: 2,
                postnet_width: 5,
                reduction: 1,
                gate_threshold: 0.5,
                max_steps: 50,
                sma_noise: 2.0,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::compact().validate().unwrap();
        ModelConfig::micro().validate().unwrap();
        ModelConfig::grad_check().validate().unwrap();
    }

    #[test]
    fn bad_configs_are_rejected() {
        let mut c = ModelConfig::micro();
        c.reference.conv_channels.pop();
        assert!(matches!(c.validate(), Err(ConfigError::ReferenceLayers(5))));

        let mut c = ModelConfig::micro();
        c.style.dim = 3;
        c.style.heads = 2;
        assert!(matches!(c.validate(), Err(ConfigError::HeadSplit { .. })));

        let mut c = ModelConfig::micro();
        c.decoder.gate_threshold = 1.0;
        assert!(matches!(c.validate(), Err(ConfigError::GateThreshold(_))));
    }

    #[test]
    fn memory_dim_is_twice_per_direction_units() {
        assert_eq!(EncoderConfig::default().memory_dim(), 256);
        assert_eq!(ModelConfig::micro().encoder.memory_dim(), 4);
    }

    #[test]
    fn config_round_trips_through_json() {
        let c = ModelConfig::compact();
        let s = serde_json::to_string(&c).unwrap();
        let back: ModelConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back, c);
    }
}
