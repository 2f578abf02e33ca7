//! Glue shared by training and the command-line tools: the combined config,
//! its content digest, and the text-marking front end.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio::{MelConfig, MelError};
use crate::model::{ConfigError, ModelConfig};
use crate::syntax::{extract_boundaries, inject_pipes, parse_bracketed, SyntaxError};
use crate::text::{normalize_text, SymbolTable};
use crate::train::{TrainConfig, TrainConfigError};

/// Constituent categories whose right edges receive a boundary pipe. Noun
/// and verb phrases are the default prosodic break candidates.
pub const BOUNDARY_CATEGORIES: [&str; 2] = ["NP", "VP"];

/// Everything one run needs, in one serializable bundle. The TOML config
/// file deserializes into this; unspecified fields keep their defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub mel: MelConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Mel(#[from] MelError),
    #[error(transparent)]
    Model(#[from] ConfigError),
    #[error(transparent)]
    Train(#[from] TrainConfigError),
    #[error("model expects {model} mel bands but the mel config produces {mel}")]
    BandMismatch { model: usize, mel: usize },
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        self.mel.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.model.mel_bands != self.mel.mel_bands {
            return Err(PipelineError::BandMismatch {
                model: self.model.mel_bands,
                mel: self.mel.mel_bands,
            });
        }
        Ok(())
    }

    /// Paper-scale mel settings with the small overfit-scale model.
    pub fn compact() -> Self {
        PipelineConfig { model: ModelConfig::compact(), ..Default::default() }
    }
}

/// SHA-256 over the canonical JSON form; any config change, however small,
/// invalidates caches and checkpoint compatibility checks keyed on it.
pub fn config_hash(cfg: &PipelineConfig) -> [u8; 32] {
    let json = serde_json::to_vec(cfg).expect("config serializes");
    let digest = Sha256::digest(&json);
    digest.into()
}

/// Digest of everything that shapes cached features: the mel geometry, the
/// boundary categories, and the symbol inventory. Training-only settings
/// (batch size, seed, schedule) and model width deliberately stay out, so
/// retuning them reuses the same cache.
pub fn feature_hash(mel: &MelConfig, table: &SymbolTable) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(mel).expect("config serializes"));
    for c in BOUNDARY_CATEGORIES {
        h.update(c.as_bytes());
        h.update([0]);
    }
    h.update(table.to_text().as_bytes());
    h.finalize().into()
}

pub fn hash_hex(hash: &[u8; 32]) -> String {
    hash.iter().map(|b| format!("{b:02x}")).collect()
}

/// Transcript after normalization and boundary markup.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkedText {
    /// Normalized text with boundary pipes when a parse was supplied.
    pub marked: String,
    /// Characters dropped by normalization.
    pub stripped: usize,
    pub used_parse: bool,
}

/// Normalizes a transcript and, when a bracketed parse is supplied, injects
/// boundary pipes at the right edges of [`BOUNDARY_CATEGORIES`]
/// constituents. The parse's token sequence must detokenize to the
/// normalized transcript for the offsets to land.
pub fn mark_text(
    text: &str,
    parse: Option<&str>,
    table: &SymbolTable,
) -> Result<MarkedText, SyntaxError> {
    let normalized = normalize_text(text, table);
    let marked = match parse {
        Some(tree_text) => {
            let tree = parse_bracketed(tree_text)?;
            let boundaries = extract_boundaries(&tree, &BOUNDARY_CATEGORIES);
            inject_pipes(&normalized.text, &boundaries)?
        }
        None => normalized.text,
    };
    Ok(MarkedText { marked, stripped: normalized.stripped.len(), used_parse: parse.is_some() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_is_stable_and_sensitive_to_any_field() {
        let a = PipelineConfig::default();
        let b = PipelineConfig::default();
        assert_eq!(config_hash(&a), config_hash(&b));

        let mut c = PipelineConfig::default();
        c.train.lambda = 0.31;
        assert_ne!(config_hash(&a), config_hash(&c));

        let mut d = PipelineConfig::default();
        d.mel.hop = 255;
        assert_ne!(config_hash(&a), config_hash(&d));
    }

    #[test]
    fn marking_injects_pipes_at_phrase_ends() {
        let table = SymbolTable::standard();
        let m = mark_text(
            "아버지가 방에 들어가신다",
            Some("(S (NP 아버지가) (VP (NP 방에) (VP 들어가신다)))"),
            &table,
        )
        .unwrap();
        assert_eq!(m.marked, "아버지가| 방에| 들어가신다|");
        assert!(m.used_parse);
    }

    #[test]
    fn marking_without_a_parse_is_the_normalized_text() {
        let table = SymbolTable::standard();
        let m = mark_text("하늘이  맑다", None, &table).unwrap();
        assert_eq!(m.marked, "하늘이 맑다");
        assert!(!m.used_parse);
    }

    #[test]
    fn band_mismatch_is_rejected() {
        let mut cfg = PipelineConfig::default();
        cfg.model.mel_bands = 64;
        assert!(matches!(cfg.validate(), Err(PipelineError::BandMismatch { .. })));
    }

    #[test]
    fn toml_round_trip_preserves_the_config() {
        let cfg = PipelineConfig::compact();
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: PipelineConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn partial_toml_overrides_only_named_fields() {
        let cfg: PipelineConfig =
            toml::from_str("[train]\nbatch_size = 4\nlambda = 0.0\n").unwrap();
        assert_eq!(cfg.train.batch_size, 4);
        assert_eq!(cfg.train.lambda, 0.0);
        assert_eq!(cfg.mel, MelConfig::default());
        assert_eq!(cfg.train.seed, TrainConfig::default().seed);
    }
}
