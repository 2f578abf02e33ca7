//! Reference path: compresses a mel-spectrogram into a fixed acoustic
//! embedding during training.
//!
//! A stack of six stride-2 convolutions shrinks time and band axes 64-fold,
//! a GRU aggregates what is left, and multi-head attention over a small bank
//! of learned style tokens turns the summary into the target embedding. The
//! token values enter attention through tanh and the head outputs are convex
//! combinations of them, so every component of the result lies strictly in
//! (-1, 1), the same range the text-side predictor produces.

use ndarray::{Array2, ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::nn::{xavier, Conv2dLayer, Graph, GruCell, Linear, NodeId, ParamId, ParamSet};

use super::config::{ReferenceConfig, StyleConfig};

#[derive(Debug, Error)]
pub enum ReferenceError {
    #[error("reference spectrogram is empty")]
    Empty,
    #[error("reference spectrogram contains non-finite values")]
    NonFinite,
}

#[derive(Debug, Clone)]
pub struct ReferenceEncoder {
    convs: Vec<Conv2dLayer>,
    gru: GruCell,
    mel_bands: usize,
    min_frames: usize,
}

impl ReferenceEncoder {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        cfg: &ReferenceConfig,
        mel_bands: usize,
    ) -> Self {
        let mut convs = Vec::with_capacity(cfg.conv_channels.len());
        let mut in_ch = 1;
        for (i, &out_ch) in cfg.conv_channels.iter().enumerate() {
            convs.push(Conv2dLayer::new(ps, rng, &format!("reference.conv{i}"), in_ch, out_ch));
            in_ch = out_ch;
        }
        // Six ceil-halvings of the band axis, times final channel count.
        let mut bands = mel_bands;
        for _ in 0..cfg.conv_channels.len() {
            bands = bands.div_ceil(2);
        }
        let gru_in = bands * in_ch;
        let gru = GruCell::new(ps, rng, "reference.gru", gru_in, cfg.gru_units);
        ReferenceEncoder { convs, gru, mel_bands, min_frames: cfg.min_frames }
    }

    /// (frames, bands) log-mel -> (1, gru_units) summary. Inputs shorter
    /// than `min_frames` are zero-padded so six halvings leave at least one
    /// timestep.
    pub fn encode(
        &self,
        g: &mut Graph,
        ps: &ParamSet,
        mel: &Array2<f64>,
    ) -> Result<NodeId, ReferenceError> {
        if mel.nrows() == 0 {
            return Err(ReferenceError::Empty);
        }
        if mel.iter().any(|v| !v.is_finite()) {
            return Err(ReferenceError::NonFinite);
        }
        assert_eq!(mel.ncols(), self.mel_bands, "reference mel band count");
        let frames = mel.nrows().max(self.min_frames);
        let mut image = ArrayD::zeros(IxDyn(&[1, frames, self.mel_bands]));
        for t in 0..mel.nrows() {
            for b in 0..self.mel_bands {
                image[[0, t, b]] = mel[[t, b]];
            }
        }
        let mut x = g.constant(image);
        for conv in &self.convs {
            x = conv.forward(g, ps, x);
            x = g.relu(x);
        }
        let seq = g.flatten_time(x);
        Ok(self.gru.run_final(g, ps, seq))
    }
}

/// Learned style tokens with multi-head attention. The reference summary is
/// projected to a query; tanh(tokens) supply both keys and values, sliced
/// evenly across heads.
#[derive(Debug, Clone)]
pub struct StyleTokens {
    pub tokens: ParamId,
    query_proj: Linear,
    pub num_tokens: usize,
    pub dim: usize,
    pub heads: usize,
}

impl StyleTokens {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        cfg: &StyleConfig,
        summary_dim: usize,
    ) -> Self {
        assert_eq!(cfg.dim % cfg.heads, 0, "heads must split the style dim");
        let tokens = ps.add(
            "style.tokens",
            xavier(rng, cfg.tokens, cfg.dim, &[cfg.tokens, cfg.dim]),
        );
        let query_proj = Linear::new(ps, rng, "style.query", summary_dim, cfg.dim, true);
        StyleTokens { tokens, query_proj, num_tokens: cfg.tokens, dim: cfg.dim, heads: cfg.heads }
    }

    /// summary (1, S) -> embedding (1, D) plus per-head attention weights
    /// (heads, num_tokens).
    pub fn attend(
        &self,
        g: &mut Graph,
        ps: &ParamSet,
        summary: NodeId,
    ) -> (NodeId, Vec<Vec<f64>>) {
        let slice = self.dim / self.heads;
        let tokens = g.param(ps, self.tokens);
        let keys = g.tanh(tokens);
        let query = self.query_proj.forward(g, ps, summary);
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let lo = h * slice;
            let hi = lo + slice;
            let kh = g.slice_cols(keys, lo, hi);
            let qh = g.slice_cols(query, lo, hi);
            let kt = g.transpose2(kh);
            let scores = g.matmul(qh, kt);
            let scaled = g.scale(scores, 1.0 / (slice as f64).sqrt());
            let attn = g.softmax_rows(scaled);
            weights.push(g.value(attn).iter().copied().collect());
            outs.push(g.matmul(attn, kh));
        }
        let emb = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        (emb, weights)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::ModelConfig;
    use crate::nn::finite_difference_report;
    use rand::{RngExt, SeedableRng};

    fn build(cfg: &ModelConfig, seed: u64) -> (ReferenceEncoder, StyleTokens, ParamSet) {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = ReferenceEncoder::new(&mut ps, &mut rng, &cfg.reference, cfg.mel_bands);
        let tokens = StyleTokens::new(&mut ps, &mut rng, &cfg.style, cfg.reference.gru_units);
        (enc, tokens, ps)
    }

    fn random_mel(rng: &mut ChaCha8Rng, frames: usize, bands: usize) -> Array2<f64> {
        Array2::from_shape_fn((frames, bands), |_| rng.random::<f64>() * 10.0 - 11.0)
    }

    #[test]
    fn summary_dim_is_fixed_across_lengths() {
        let mut cfg = ModelConfig::grad_check();
        cfg.mel_bands = 80;
        let (enc, _, ps) = build(&cfg, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for frames in [5usize, 64, 256] {
            let mel = random_mel(&mut rng, frames, 80);
            let mut g = Graph::new();
            let s = enc.encode(&mut g, &ps, &mel).unwrap();
            assert_eq!(g.value(s).shape(), &[1, cfg.reference.gru_units]);
        }
    }

    #[test]
    fn six_halvings_of_eighty_bands_feed_the_gru() {
        // 80 -> 40 -> 20 -> 10 -> 5 -> 3 -> 2 bands; 256 -> 4 frames.
        let mut cfg = ModelConfig::grad_check();
        cfg.mel_bands = 80;
        let (_, _, _) = build(&cfg, 2);
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = ReferenceEncoder::new(&mut ps, &mut rng, &cfg.reference, 80);
        assert_eq!(enc.gru.in_dim, 2 * cfg.reference.conv_channels[5]);

        // Walk the conv stack manually to observe the time axis.
        let mel = random_mel(&mut rng, 256, 80);
        let mut g = Graph::new();
        let mut image = ArrayD::zeros(IxDyn(&[1, 256, 80]));
        for t in 0..256 {
            for b in 0..80 {
                image[[0, t, b]] = mel[[t, b]];
            }
        }
        let mut x = g.constant(image);
        for conv in &enc.convs {
            x = conv.forward(&mut g, &ps, x);
        }
        assert_eq!(g.value(x).shape()[1], 4, "256 frames / 2^6");
        assert_eq!(g.value(x).shape()[2], 2, "80 bands ceil-halved six times");
    }

    #[test]
    fn attention_weights_are_distributions_and_output_is_bounded() {
        let cfg = ModelConfig::grad_check();
        let (enc, tokens, ps) = build(&cfg, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mel = random_mel(&mut rng, 40, cfg.mel_bands);
        let mut g = Graph::new();
        let summary = enc.encode(&mut g, &ps, &mel).unwrap();
        let (emb, weights) = tokens.attend(&mut g, &ps, summary);
        assert_eq!(weights.len(), cfg.style.heads);
        for head in &weights {
            assert_eq!(head.len(), cfg.style.tokens);
            let sum: f64 = head.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6, "head weights sum {sum}");
            assert!(head.iter().all(|&w| w >= 0.0));
        }
        let v = g.value(emb);
        assert_eq!(v.shape(), &[1, cfg.style.dim]);
        for &x in v.iter() {
            assert!(x > -1.0 && x < 1.0);
        }
    }

    #[test]
    fn single_token_attention_collapses_to_tanh_token() {
        let mut cfg = ModelConfig::micro();
        cfg.style.tokens = 1;
        let (enc, tokens, ps) = build(&cfg, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mel = random_mel(&mut rng, 20, cfg.mel_bands);
        let mut g = Graph::new();
        let summary = enc.encode(&mut g, &ps, &mel).unwrap();
        let (emb, _) = tokens.attend(&mut g, &ps, summary);
        let expected = ps.value(tokens.tokens).mapv(f64::tanh);
        let got = g.value(emb);
        for j in 0..cfg.style.dim {
            assert!((got[[0, j]] - expected[[0, j]]).abs() < 1e-12);
        }
    }

    #[test]
    fn embedding_is_deterministic_given_mel_and_params() {
        let cfg = ModelConfig::grad_check();
        let (enc, tokens, ps) = build(&cfg, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mel = random_mel(&mut rng, 30, cfg.mel_bands);
        let run = || {
            let mut g = Graph::new();
            let s = enc.encode(&mut g, &ps, &mel).unwrap();
            let (emb, _) = tokens.attend(&mut g, &ps, s);
            g.value(emb).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn rejects_empty_and_non_finite_input() {
        let cfg = ModelConfig::micro();
        let (enc, _, ps) = build(&cfg, 6);
        let mut g = Graph::new();
        let empty = Array2::<f64>::zeros((0, cfg.mel_bands));
        assert!(matches!(enc.encode(&mut g, &ps, &empty), Err(ReferenceError::Empty)));
        let mut bad = Array2::<f64>::zeros((4, cfg.mel_bands));
        bad[[1, 2]] = f64::NAN;
        assert!(matches!(enc.encode(&mut g, &ps, &bad), Err(ReferenceError::NonFinite)));
    }

    #[test]
    fn reference_path_gradients_match_fd() {
        let cfg = ModelConfig::micro();
        let (enc, tokens, mut ps) = build(&cfg, 7);
        // Move off relu kinks: zero biases over the zero-padded tail are not
        // differentiable points.
        crate::nn::check::jitter_params(&mut ps, 70, 0.05);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mel = random_mel(&mut rng, 8, cfg.mel_bands);
        let report = finite_difference_report(
            &|g, ps| {
                let s = enc.encode(g, ps, &mel).unwrap();
                let (emb, _) = tokens.attend(g, ps, s);
                let sq = g.mul(emb, emb);
                g.mean_all(sq)
            },
            &mut ps,
            1e-5,
            0,
            0,
        );
        assert!(report.worst_rel < 1e-3, "{report:?}");
    }
}
