//! The synthesis model: text encoder, acoustic-embedding paths, and the
//! attention decoder, assembled over one flat parameter set.
//!
//! Training conditions the decoder memory on the reference-derived
//! embedding; inference substitutes the text-predicted one, so no audio is
//! needed at synthesis time.

pub mod config;
pub mod decoder;
pub mod encoder;
pub mod loss;
pub mod reference;

use std::ops::Range;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use config::{ConfigError, DecoderConfig, EncoderConfig, ModelConfig, ReferenceConfig, StyleConfig};
pub use decoder::{DecodeOutput, Decoder, SmaAttention, StopReason};
pub use encoder::{condition_memory, pad_memory_rows, EncodeError, StylePredictor, TextEncoder, TextMemory};
pub use loss::{utterance_loss, GateLoss, LossBreakdown, LossError, LossNodes};
pub use reference::{ReferenceEncoder, ReferenceError, StyleTokens};

use crate::nn::{Graph, NodeId, ParamId, ParamSet};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Reference(#[from] ReferenceError),
    #[error(transparent)]
    Decode(#[from] decoder::DecodeError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub encoder: TextEncoder,
    pub predictor: StylePredictor,
    pub reference: ReferenceEncoder,
    pub tokens: StyleTokens,
    pub decoder: Decoder,
    /// Parameter ids owned by the reference path (reference encoder plus
    /// token bank); the style loss term must never reach these.
    pub reference_params: Range<ParamId>,
    pub vocab: usize,
}

/// Everything the loss needs from one training forward pass.
pub struct TrainForward {
    pub decode: DecodeOutput,
    /// Reference-derived acoustic embedding (1, D).
    pub reference_style: NodeId,
    /// Text-predicted acoustic embedding (1, D).
    pub predicted_style: NodeId,
    pub memory_length: usize,
}

pub struct InferForward {
    pub decode: DecodeOutput,
    pub predicted_style: NodeId,
    pub memory_length: usize,
}

impl Model {
    /// Builds a model with freshly initialized parameters in a new set.
    pub fn new(cfg: &ModelConfig, vocab: usize, seed: u64) -> Result<(Model, ParamSet), ModelError> {
        cfg.validate()?;
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = TextEncoder::new(&mut ps, &mut rng, &cfg.encoder, vocab);
        let predictor =
            StylePredictor::new(&mut ps, &mut rng, &cfg.style, cfg.encoder.memory_dim());
        let ref_start = ps.len();
        let reference = ReferenceEncoder::new(&mut ps, &mut rng, &cfg.reference, cfg.mel_bands);
        let tokens = StyleTokens::new(&mut ps, &mut rng, &cfg.style, cfg.reference.gru_units);
        let ref_end = ps.len();
        let decoder = Decoder::new(
            &mut ps,
            &mut rng,
            &cfg.decoder,
            cfg.mel_bands,
            cfg.encoder.memory_dim() + cfg.style.dim,
        );
        Ok((
            Model {
                cfg: cfg.clone(),
                encoder,
                predictor,
                reference,
                tokens,
                decoder,
                reference_params: ref_start..ref_end,
                vocab,
            },
            ps,
        ))
    }

    /// Teacher-forced pass for training: the target mel drives both the
    /// decoder inputs and the reference embedding.
    pub fn train_forward(
        &self,
        g: &mut Graph,
        ps: &ParamSet,
        ids: &[usize],
        target: &Array2<f64>,
        rng: &mut ChaCha8Rng,
    ) -> Result<TrainForward, ModelError> {
        let memory = self.encoder.encode(g, ps, ids)?;
        let predicted_style = self.predictor.forward(g, ps, &memory);
        let summary = self.reference.encode(g, ps, target)?;
        let (reference_style, _) = self.tokens.attend(g, ps, summary);
        let conditioned = condition_memory(g, &memory, reference_style)?;
        let decode = self.decoder.teacher_forced(g, ps, &conditioned, target, rng)?;
        Ok(TrainForward { decode, reference_style, predicted_style, memory_length: memory.length })
    }

    /// Inference pass: text in, spectrogram out, style from text alone.
    pub fn infer_forward(
        &self,
        g: &mut Graph,
        ps: &ParamSet,
        ids: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<InferForward, ModelError> {
        let memory = self.encoder.encode(g, ps, ids)?;
        let predicted_style = self.predictor.forward(g, ps, &memory);
        let conditioned = condition_memory(g, &memory, predicted_style)?;
        let decode = self.decoder.free_running(g, ps, &conditioned, rng)?;
        Ok(InferForward { decode, predicted_style, memory_length: memory.length })
    }

    /// Derives the per-step RNG used for dropout masks and attention noise.
    /// Keyed by (seed, iteration, item) so a resumed run replays identical
    /// randomness.
    pub fn step_rng(seed: u64, iteration: u64, item: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(iteration.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ item);
        rng
    }
}
