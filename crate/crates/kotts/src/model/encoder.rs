//! Text side of the model.
//!
//! Symbol ids pass through an embedding, a convolution-bank encoder (widths
//! 1..=K over time, max-pooled, projected with a residual, refined by highway
//! layers, then a bidirectional LSTM), yielding the memory the decoder
//! attends over. A small head on top of the memory predicts the acoustic
//! embedding from text alone, so inference needs no reference audio.
//!
//! Trailing padding ids are trimmed up front and every layer runs on the
//! valid prefix only; padded positions are appended back as exact zeros.
//! That makes padding invariance a construction property instead of a
//! masking discipline spread across layers.

use ndarray::{Array2, ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::nn::{
    BiLstm, Conv1dLayer, Embedding, Graph, GruCell, Highway, Linear, NodeId, ParamSet,
};

use super::config::{EncoderConfig, StyleConfig};

#[derive(Debug, Error)]
pub enum EncodeError {
    #[error("empty symbol sequence (no non-padding ids)")]
    Empty,
    #[error("symbol id {id} out of range for vocabulary of {vocab}")]
    IdOutOfRange { id: usize, vocab: usize },
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),
}

/// Encoder memory over the valid (non-padding) prefix.
#[derive(Debug, Clone, Copy)]
pub struct TextMemory {
    /// (length, memory_dim) node; rows are valid timesteps only.
    pub node: NodeId,
    pub length: usize,
    pub dim: usize,
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub embedding: Embedding,
    bank: Vec<Conv1dLayer>,
    proj1: Conv1dLayer,
    proj2: Conv1dLayer,
    highways: Vec<Highway>,
    rnn: BiLstm,
    cfg: EncoderConfig,
}

impl TextEncoder {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        cfg: &EncoderConfig,
        vocab: usize,
    ) -> Self {
        let embedding = Embedding::new(ps, rng, "encoder.embedding", vocab, cfg.embedding_dim);
        let bank = (1..=cfg.bank_k)
            .map(|w| {
                Conv1dLayer::new(
                    ps,
                    rng,
                    &format!("encoder.bank{w}"),
                    w,
                    cfg.embedding_dim,
                    cfg.bank_channels,
                )
            })
            .collect();
        let proj1 = Conv1dLayer::new(
            ps,
            rng,
            "encoder.proj1",
            3,
            cfg.bank_k * cfg.bank_channels,
            cfg.proj_channels,
        );
        let proj2 = Conv1dLayer::new(
            ps,
            rng,
            "encoder.proj2",
            3,
            cfg.proj_channels,
            cfg.embedding_dim,
        );
        let highways = (0..cfg.highway_layers)
            .map(|i| Highway::new(ps, rng, &format!("encoder.highway{i}"), cfg.embedding_dim))
            .collect();
        let rnn = BiLstm::new(ps, rng, "encoder.rnn", cfg.embedding_dim, cfg.rnn_units);
        TextEncoder { embedding, bank, proj1, proj2, highways, rnn, cfg: cfg.clone() }
    }

    /// Length of the valid prefix (ids before the first trailing pad run).
    fn valid_length(ids: &[usize]) -> usize {
        ids.iter().rposition(|&id| id != 0).map_or(0, |i| i + 1)
    }

    /// Encodes ids into memory over the valid prefix. Trailing padding is
    /// ignored; interior padding is treated as data (it never occurs in
    /// encoded text).
    pub fn encode(
        &self,
        g: &mut Graph,
        ps: &ParamSet,
        ids: &[usize],
    ) -> Result<TextMemory, EncodeError> {
        let length = Self::valid_length(ids);
        if length == 0 {
            return Err(EncodeError::Empty);
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= self.embedding.vocab) {
            return Err(EncodeError::IdOutOfRange { id: bad, vocab: self.embedding.vocab });
        }
        let embedded = self.embedding.forward(g, ps, &ids[..length]);

        let mut bank_outs = Vec::with_capacity(self.bank.len());
        for conv in &self.bank {
            let y = conv.forward(g, ps, embedded);
            bank_outs.push(g.relu(y));
        }
        let stacked = if bank_outs.len() == 1 {
            bank_outs[0]
        } else {
            g.concat_cols(&bank_outs)
        };
        let pooled = g.maxpool_pairs(stacked);
        let p1 = self.proj1.forward(g, ps, pooled);
        let p1 = g.relu(p1);
        let p2 = self.proj2.forward(g, ps, p1);
        let mut x = g.add(p2, embedded);
        for hw in &self.highways {
            x = hw.forward(g, ps, x);
        }
        let memory = self.rnn.forward(g, ps, x);
        ensure_finite(g, memory, "encoder memory")?;
        Ok(TextMemory { node: memory, length, dim: self.cfg.memory_dim() })
    }
}

/// Predicts the acoustic embedding from the text memory: one conv layer,
/// a time-aggregating GRU, a single fully-connected layer, and tanh. The
/// output is a fixed-size vector whatever the input length, each component
/// strictly inside (-1, 1).
#[derive(Debug, Clone)]
pub struct StylePredictor {
    conv: Conv1dLayer,
    gru: GruCell,
    fc: Linear,
}

impl StylePredictor {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        cfg: &StyleConfig,
        memory_dim: usize,
    ) -> Self {
        let conv = Conv1dLayer::new(
            ps,
            rng,
            "predictor.conv",
            cfg.predictor_conv_width,
            memory_dim,
            cfg.predictor_conv_channels,
        );
        let gru = GruCell::new(
            ps,
            rng,
            "predictor.gru",
            cfg.predictor_conv_channels,
            cfg.predictor_gru_units,
        );
        let fc = Linear::new(ps, rng, "predictor.fc", cfg.predictor_gru_units, cfg.dim, true);
        StylePredictor { conv, gru, fc }
    }

    /// memory -> (1, D) with components in (-1, 1).
    pub fn forward(&self, g: &mut Graph, ps: &ParamSet, memory: &TextMemory) -> NodeId {
        let c = self.conv.forward(g, ps, memory.node);
        let c = g.relu(c);
        let h = self.gru.run_final(g, ps, c);
        let y = self.fc.forward(g, ps, h);
        g.tanh(y)
    }
}

/// Broadcast-concatenates the (1, D) acoustic embedding onto every memory
/// row: output is (length, M + D).
pub fn condition_memory(
    g: &mut Graph,
    memory: &TextMemory,
    style: NodeId,
) -> Result<TextMemory, EncodeError> {
    let d = {
        let sv = g.value(style);
        assert_eq!(sv.shape().len(), 2, "style embedding is a row vector");
        assert_eq!(sv.shape()[0], 1, "style embedding is a single row");
        sv.shape()[1]
    };
    ensure_finite(g, style, "acoustic embedding")?;
    let ones = g.constant(
        ArrayD::from_elem(IxDyn(&[memory.length, 1]), 1.0),
    );
    let tiled = g.matmul(ones, style);
    let node = g.concat_cols(&[memory.node, tiled]);
    Ok(TextMemory { node, length: memory.length, dim: memory.dim + d })
}

/// Appends zero rows so the memory covers `total` timesteps; rows past the
/// valid length are exactly zero.
pub fn pad_memory_rows(g: &mut Graph, memory: &TextMemory, total: usize) -> NodeId {
    assert!(total >= memory.length, "cannot pad below valid length");
    if total == memory.length {
        return memory.node;
    }
    let zeros = g.constant(Array2::<f64>::zeros((total - memory.length, memory.dim)).into_dyn());
    g.concat_rows(&[memory.node, zeros])
}

pub(crate) fn ensure_finite(
    g: &Graph,
    node: NodeId,
    what: &'static str,
) -> Result<(), EncodeError> {
    if g.value(node).iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(EncodeError::NonFinite(what))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::ModelConfig;
    use crate::nn::finite_difference_report;
    use rand::SeedableRng;

    fn build(cfg: &ModelConfig, vocab: usize, seed: u64) -> (TextEncoder, StylePredictor, ParamSet) {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = TextEncoder::new(&mut ps, &mut rng, &cfg.encoder, vocab);
        let pred = StylePredictor::new(&mut ps, &mut rng, &cfg.style, cfg.encoder.memory_dim());
        (enc, pred, ps)
    }

    #[test]
    fn memory_preserves_length_and_width() {
        let cfg = ModelConfig::grad_check();
        let (enc, _, ps) = build(&cfg, 12, 1);
        let mut g = Graph::new();
        let mem = enc.encode(&mut g, &ps, &[3, 5, 2, 7, 1]).unwrap();
        assert_eq!(mem.length, 5);
        assert_eq!(g.value(mem.node).shape(), &[5, cfg.encoder.memory_dim()]);
    }

    #[test]
    fn trailing_padding_changes_nothing_and_padded_rows_are_zero() {
        let cfg = ModelConfig::grad_check();
        let (enc, pred, ps) = build(&cfg, 12, 2);
        let ids = [3usize, 5, 2, 7, 1];
        let mut padded_ids = ids.to_vec();
        padded_ids.extend([0usize; 6]);

        let mut g1 = Graph::new();
        let m1 = enc.encode(&mut g1, &ps, &ids).unwrap();
        let s1 = pred.forward(&mut g1, &ps, &m1);

        let mut g2 = Graph::new();
        let m2 = enc.encode(&mut g2, &ps, &padded_ids).unwrap();
        let s2 = pred.forward(&mut g2, &ps, &m2);

        assert_eq!(m1.length, m2.length);
        assert_eq!(g1.value(m1.node), g2.value(m2.node));
        assert_eq!(g1.value(s1), g2.value(s2), "prediction must ignore padding");

        let full = pad_memory_rows(&mut g2, &m2, padded_ids.len());
        let v = g2.value(full);
        assert_eq!(v.shape(), &[11, cfg.encoder.memory_dim()]);
        for t in 5..11 {
            for j in 0..cfg.encoder.memory_dim() {
                assert_eq!(v[[t, j]], 0.0, "masked row must be exactly zero");
            }
        }
    }

    #[test]
    fn all_padding_input_is_an_error() {
        let cfg = ModelConfig::micro();
        let (enc, _, ps) = build(&cfg, 8, 3);
        let mut g = Graph::new();
        assert!(matches!(enc.encode(&mut g, &ps, &[0, 0, 0]), Err(EncodeError::Empty)));
        assert!(matches!(
            enc.encode(&mut g, &ps, &[1, 99]),
            Err(EncodeError::IdOutOfRange { id: 99, vocab: 8 })
        ));
    }

    #[test]
    fn style_prediction_is_fixed_size_and_bounded() {
        let cfg = ModelConfig::grad_check();
        let (enc, pred, ps) = build(&cfg, 40, 4);
        for len in [3usize, 12, 300] {
            let ids: Vec<usize> = (0..len).map(|i| 1 + (i % 39)).collect();
            let mut g = Graph::new();
            let mem = enc.encode(&mut g, &ps, &ids).unwrap();
            let style = pred.forward(&mut g, &ps, &mem);
            let v = g.value(style);
            assert_eq!(v.shape(), &[1, cfg.style.dim]);
            for &x in v.iter() {
                assert!(x > -1.0 && x < 1.0, "component {x} escaped (-1, 1)");
            }
        }
    }

    #[test]
    fn conditioning_appends_the_same_slice_to_every_row() {
        let cfg = ModelConfig::grad_check();
        let (enc, pred, ps) = build(&cfg, 12, 5);
        let mut g = Graph::new();
        let mem = enc.encode(&mut g, &ps, &[4, 2, 9]).unwrap();
        let style = pred.forward(&mut g, &ps, &mem);
        let cond = condition_memory(&mut g, &mem, style).unwrap();
        assert_eq!(cond.dim, cfg.encoder.memory_dim() + cfg.style.dim);
        let mv = g.value(mem.node).clone();
        let sv = g.value(style).clone();
        let cv = g.value(cond.node);
        for t in 0..3 {
            for j in 0..mem.dim {
                assert_eq!(cv[[t, j]], mv[[t, j]]);
            }
            for j in 0..cfg.style.dim {
                assert_eq!(cv[[t, mem.dim + j]], sv[[0, j]]);
            }
        }
    }

    #[test]
    fn distinct_symbols_give_distinct_memory() {
        // The boundary pipe must be information-bearing: swapping one symbol
        // for another changes the encoded rows.
        let cfg = ModelConfig::grad_check();
        let (enc, _, ps) = build(&cfg, 12, 6);
        let mut ga = Graph::new();
        let ma = enc.encode(&mut ga, &ps, &[3, 5, 2, 7, 1]).unwrap();
        let mut gb = Graph::new();
        let mb = enc.encode(&mut gb, &ps, &[3, 5, 11, 7, 1]).unwrap();
        assert_ne!(ga.value(ma.node), gb.value(mb.node));
    }

    #[test]
    fn encoder_and_predictor_gradients_match_fd() {
        let cfg = ModelConfig::micro();
        let (enc, pred, mut ps) = build(&cfg, 6, 7);
        let report = finite_difference_report(
            &|g, ps| {
                let mem = enc.encode(g, ps, &[1, 3, 2, 5, 4, 1]).unwrap();
                let style = pred.forward(g, ps, &mem);
                let sq = g.mul(style, style);
                let a = g.mean_all(sq);
                let msq = g.mul(mem.node, mem.node);
                let b = g.mean_all(msq);
                g.add(a, b)
            },
            &mut ps,
            1e-5,
            0,
            0,
        );
        assert!(report.worst_rel < 1e-3, "{report:?}");
    }
}
