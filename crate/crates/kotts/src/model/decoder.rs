//! Autoregressive mel decoder with stepwise monotonic attention.
//!
//! Each step: the pre-net digests the previous frame group, an attention
//! LSTM produces the query, the alignment either stays put or advances by
//! one memory position, and a decoder LSTM emits the next frame group plus
//! a stop logit. A five-layer convolutional post-net adds a residual over
//! the whole utterance at the end.
//!
//! Attention has two modes. Soft (training) propagates the expected
//! alignment: alpha'_i = alpha_i (1 - p_i) + alpha_{i-1} p_{i-1}, with
//! Gaussian noise on the pre-sigmoid move probabilities pressing them toward
//! 0/1. The move probability at the last position is clamped to zero, so
//! probability mass is conserved exactly rather than leaking off the end.
//! Hard (inference) keeps an integer position that advances when the move
//! probability crosses 1/2: monotone by construction, at most one step per
//! frame.

use ndarray::{Array2, ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::nn::{dropout_mask, stable_sigmoid, Conv1dLayer, Graph, Linear, LstmCell, NodeId, ParamId, ParamSet};

use super::config::{DecoderConfig, POSTNET_LAYERS};
use super::encoder::TextMemory;

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("memory width {found} does not match decoder build width {expected}")]
    MemoryDim { expected: usize, found: usize },
    #[error("target mel width {found} does not match model mel bands {expected}")]
    TargetWidth { expected: usize, found: usize },
    #[error("target has {frames} frames, not a positive multiple of reduction {r}")]
    BadFrameCount { frames: usize, r: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    /// Stop-gate sigmoid crossed the threshold.
    Gate,
    /// Frame cap reached before the gate fired.
    MaxSteps,
    /// Length was dictated by the target (training path).
    TeacherForced,
}

#[derive(Debug)]
pub struct DecodeOutput {
    /// (frames, mel_bands) before the post-net.
    pub mel_pre: NodeId,
    /// (frames, mel_bands) = mel_pre + post-net residual.
    pub mel_post: NodeId,
    /// (steps, 1) raw stop logits, one per frame group.
    pub gate_logits: NodeId,
    /// (steps, memory length) alignment weights, soft rows or one-hot.
    pub alignments: Array2<f64>,
    pub stop: StopReason,
    pub frames: usize,
}

#[derive(Debug, Clone)]
struct Prenet {
    layers: Vec<Linear>,
    dropout: f64,
}

impl Prenet {
    fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        in_dim: usize,
        dims: &[usize],
        dropout: f64,
    ) -> Self {
        let mut layers = Vec::with_capacity(dims.len());
        let mut d = in_dim;
        for (i, &out) in dims.iter().enumerate() {
            layers.push(Linear::new(ps, rng, &format!("decoder.prenet{i}"), d, out, true));
            d = out;
        }
        Prenet { layers, dropout }
    }

    /// Dropout stays active at inference too: the sampling noise it injects
    /// is the decoder's only source of output variation.
    fn forward(&self, g: &mut Graph, ps: &ParamSet, x: NodeId, rng: &mut ChaCha8Rng) -> NodeId {
        let mut x = x;
        for layer in &self.layers {
            let y = layer.forward(g, ps, x);
            let r = g.relu(y);
            x = match dropout_mask(rng, g.value(r).shape(), self.dropout) {
                Some(mask) => g.dropout(r, mask),
                None => r,
            };
        }
        x
    }

    fn out_dim(&self) -> usize {
        self.layers.last().map(|l| l.out_dim).unwrap_or(0)
    }
}

/// Additive-energy stepwise monotonic attention.
#[derive(Debug, Clone)]
pub struct SmaAttention {
    query_proj: Linear,
    memory_proj: Linear,
    bias: ParamId,
    score: Linear,
    pub attention_dim: usize,
}

#[derive(Debug, Clone, Copy)]
pub enum AttentionMode {
    /// Expected-alignment recurrence with pre-sigmoid noise (training).
    Soft,
    /// One-hot alignment, advance on p > 1/2 (inference).
    Hard,
}

impl SmaAttention {
    fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        query_dim: usize,
        memory_dim: usize,
        attention_dim: usize,
    ) -> Self {
        let query_proj = Linear::new(ps, rng, "decoder.sma.query", query_dim, attention_dim, false);
        let memory_proj =
            Linear::new(ps, rng, "decoder.sma.memory", memory_dim, attention_dim, false);
        let bias = ps.add("decoder.sma.bias", crate::nn::zeros(&[attention_dim]));
        let score = Linear::new(ps, rng, "decoder.sma.score", attention_dim, 1, false);
        SmaAttention { query_proj, memory_proj, bias, score, attention_dim }
    }

    /// Precomputed per-utterance key projection of the memory.
    fn keys(&self, g: &mut Graph, ps: &ParamSet, memory: NodeId) -> NodeId {
        self.memory_proj.forward(g, ps, memory)
    }

    /// Move-probability energies for one query: (1, L).
    fn energies(&self, g: &mut Graph, ps: &ParamSet, query: NodeId, keys: NodeId) -> NodeId {
        let qw = self.query_proj.forward(g, ps, query);
        let sum = g.add_bias(keys, qw);
        let bias = g.param(ps, self.bias);
        let sum = g.add_bias(sum, bias);
        let t = g.tanh(sum);
        let e = self.score.forward(g, ps, t);
        g.transpose2(e)
    }
}

/// One soft-attention update. `noise` is an optional (1, L) pre-sigmoid
/// perturbation; the final position's move probability is zeroed so the row
/// keeps exactly the mass it started with.
pub fn sma_step_soft(
    g: &mut Graph,
    alpha: NodeId,
    energies: NodeId,
    noise: Option<&[f64]>,
) -> NodeId {
    let len = g.value(alpha).shape()[1];
    let pre = match noise {
        Some(n) => {
            assert_eq!(n.len(), len);
            let nc = g.constant(
                ArrayD::from_shape_vec(IxDyn(&[1, len]), n.to_vec()).unwrap(),
            );
            g.add(energies, nc)
        }
        None => energies,
    };
    let p = g.sigmoid(pre);
    let mut end_mask = vec![1.0; len];
    end_mask[len - 1] = 0.0;
    let p = g.mul_const(p, ArrayD::from_shape_vec(IxDyn(&[1, len]), end_mask).unwrap());
    let ones = g.constant(ArrayD::from_elem(IxDyn(&[1, len]), 1.0));
    let stay_p = g.sub(ones, p);
    let stay = g.mul(alpha, stay_p);
    if len == 1 {
        return stay;
    }
    let moving = g.mul(alpha, p);
    let head = g.constant(ArrayD::zeros(IxDyn(&[1, 1])));
    let tail = g.slice_cols(moving, 0, len - 1);
    let shifted = g.concat_cols(&[head, tail]);
    g.add(stay, shifted)
}

#[derive(Debug, Clone)]
pub struct Decoder {
    prenet: Prenet,
    attention_rnn: LstmCell,
    pub sma: SmaAttention,
    decoder_rnn: LstmCell,
    frame_proj: Linear,
    gate_proj: Linear,
    postnet: Vec<Conv1dLayer>,
    pub cfg: DecoderConfig,
    pub mel_bands: usize,
    pub memory_dim: usize,
}

impl Decoder {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        cfg: &DecoderConfig,
        mel_bands: usize,
        memory_dim: usize,
    ) -> Self {
        let prenet = Prenet::new(
            ps,
            rng,
            cfg.reduction * mel_bands,
            &cfg.prenet_dims,
            cfg.prenet_dropout,
        );
        let attention_rnn = LstmCell::new(
            ps,
            rng,
            "decoder.attention_rnn",
            prenet.out_dim() + memory_dim,
            cfg.attention_rnn_units,
        );
        let sma = SmaAttention::new(
            ps,
            rng,
            cfg.attention_rnn_units,
            memory_dim,
            cfg.attention_dim,
        );
        let decoder_rnn = LstmCell::new(
            ps,
            rng,
            "decoder.rnn",
            cfg.attention_rnn_units + memory_dim,
            cfg.decoder_rnn_units,
        );
        let out_in = cfg.decoder_rnn_units + memory_dim;
        let frame_proj = Linear::new(
            ps,
            rng,
            "decoder.frame",
            out_in,
            cfg.reduction * mel_bands,
            true,
        );
        let gate_proj = Linear::new(ps, rng, "decoder.gate", out_in, 1, true);
        let mut postnet = Vec::with_capacity(POSTNET_LAYERS);
        let mut ch = mel_bands;
        for i in 0..POSTNET_LAYERS {
            let out = if i + 1 == POSTNET_LAYERS { mel_bands } else { cfg.postnet_channels };
            postnet.push(Conv1dLayer::new(
                ps,
                rng,
                &format!("decoder.postnet{i}"),
                cfg.postnet_width,
                ch,
                out,
            ));
            ch = out;
        }
        Decoder {
            prenet,
            attention_rnn,
            sma,
            decoder_rnn,
            frame_proj,
            gate_proj,
            postnet,
            cfg: cfg.clone(),
            mel_bands,
            memory_dim,
        }
    }

    /// Five conv layers, tanh after all but the last; shape-preserving.
    pub fn postnet_residual(&self, g: &mut Graph, ps: &ParamSet, mel: NodeId) -> NodeId {
        let mut x = mel;
        for (i, conv) in self.postnet.iter().enumerate() {
            x = conv.forward(g, ps, x);
            if i + 1 < self.postnet.len() {
                x = g.tanh(x);
            }
        }
        x
    }

    fn check_memory(&self, memory: &TextMemory) -> Result<(), DecodeError> {
        if memory.dim != self.memory_dim {
            return Err(DecodeError::MemoryDim { expected: self.memory_dim, found: memory.dim });
        }
        Ok(())
    }

    /// Teacher-forced decode over a target spectrogram. Output length equals
    /// the target length; gate labels for the loss live with the loss code.
    pub fn teacher_forced(
        &self,
        g: &mut Graph,
        ps: &ParamSet,
        memory: &TextMemory,
        target: &Array2<f64>,
        rng: &mut ChaCha8Rng,
    ) -> Result<DecodeOutput, DecodeError> {
        self.check_memory(memory)?;
        if target.ncols() != self.mel_bands {
            return Err(DecodeError::TargetWidth {
                expected: self.mel_bands,
                found: target.ncols(),
            });
        }
        let r = self.cfg.reduction;
        if target.nrows() == 0 || target.nrows() % r != 0 {
            return Err(DecodeError::BadFrameCount { frames: target.nrows(), r });
        }
        let steps = target.nrows() / r;
        let len = memory.length;
        let target_node = g.constant(target.clone().into_dyn());
        let keys = self.sma.keys(g, ps, memory.node);
        let noise_dist = Normal::new(0.0, self.cfg.sma_noise).expect("noise scale >= 0");

        let mut alpha = g.constant(one_hot_row(len, 0));
        let mut context = g.matmul(alpha, memory.node);
        let (mut h_a, mut c_a) = self.attention_rnn.zero_state(g);
        let (mut h_d, mut c_d) = self.decoder_rnn.zero_state(g);
        let mut prev_group = g.constant(ArrayD::zeros(IxDyn(&[1, r * self.mel_bands])));

        let mut frame_nodes = Vec::with_capacity(steps);
        let mut gate_nodes = Vec::with_capacity(steps);
        let mut alignments = Array2::zeros((steps, len));

        for s in 0..steps {
            let pn = self.prenet.forward(g, ps, prev_group, rng);
            let x_a = g.concat_cols(&[pn, context]);
            let (ha2, ca2) = self.attention_rnn.step(g, ps, x_a, h_a, c_a);
            h_a = ha2;
            c_a = ca2;
            let energies = self.sma.energies(g, ps, h_a, keys);
            let noise: Vec<f64> = if self.cfg.sma_noise > 0.0 {
                (0..len).map(|_| noise_dist.sample(rng)).collect()
            } else {
                vec![0.0; len]
            };
            alpha = sma_step_soft(g, alpha, energies, Some(&noise));
            for (j, w) in g.value(alpha).iter().enumerate() {
                alignments[[s, j]] = *w;
            }
            context = g.matmul(alpha, memory.node);
            let x_d = g.concat_cols(&[h_a, context]);
            let (hd2, cd2) = self.decoder_rnn.step(g, ps, x_d, h_d, c_d);
            h_d = hd2;
            c_d = cd2;
            let hc = g.concat_cols(&[h_d, context]);
            let flat = self.frame_proj.forward(g, ps, hc);
            frame_nodes.push(g.reshape(flat, &[r, self.mel_bands]));
            gate_nodes.push(self.gate_proj.forward(g, ps, hc));
            // Next pre-net input: this group's target frames.
            prev_group = g.slice_rows(target_node, s * r, (s + 1) * r);
            prev_group = g.reshape(prev_group, &[1, r * self.mel_bands]);
        }

        let mel_pre = g.concat_rows(&frame_nodes);
        let residual = self.postnet_residual(g, ps, mel_pre);
        let mel_post = g.add(mel_pre, residual);
        let gate_logits = g.concat_rows(&gate_nodes);
        Ok(DecodeOutput {
            mel_pre,
            mel_post,
            gate_logits,
            alignments,
            stop: StopReason::TeacherForced,
            frames: target.nrows(),
        })
    }

    /// Free-running decode with hard monotonic attention. Feeds back its own
    /// pre-net predictions; stops when the gate fires or the frame cap hits.
    pub fn free_running(
        &self,
        g: &mut Graph,
        ps: &ParamSet,
        memory: &TextMemory,
        rng: &mut ChaCha8Rng,
    ) -> Result<DecodeOutput, DecodeError> {
        self.check_memory(memory)?;
        let r = self.cfg.reduction;
        let len = memory.length;
        let keys = self.sma.keys(g, ps, memory.node);

        let mut position = 0usize;
        let mut context = g.slice_rows(memory.node, 0, 1);
        let (mut h_a, mut c_a) = self.attention_rnn.zero_state(g);
        let (mut h_d, mut c_d) = self.decoder_rnn.zero_state(g);
        let mut prev_group = g.constant(ArrayD::zeros(IxDyn(&[1, r * self.mel_bands])));

        let mut frame_nodes = Vec::new();
        let mut gate_nodes = Vec::new();
        let mut align_rows: Vec<usize> = Vec::new();
        let mut stop = StopReason::MaxSteps;
        let mut frames = 0usize;

        while frames < self.cfg.max_steps {
            let pn = self.prenet.forward(g, ps, prev_group, rng);
            let x_a = g.concat_cols(&[pn, context]);
            let (ha2, ca2) = self.attention_rnn.step(g, ps, x_a, h_a, c_a);
            h_a = ha2;
            c_a = ca2;
            let energies = self.sma.energies(g, ps, h_a, keys);
            let move_p = stable_sigmoid(g.value(energies)[[0, position]]);
            if move_p > 0.5 && position + 1 < len {
                position += 1;
            }
            align_rows.push(position);
            context = g.slice_rows(memory.node, position, position + 1);
            let x_d = g.concat_cols(&[h_a, context]);
            let (hd2, cd2) = self.decoder_rnn.step(g, ps, x_d, h_d, c_d);
            h_d = hd2;
            c_d = cd2;
            let hc = g.concat_cols(&[h_d, context]);
            let flat = self.frame_proj.forward(g, ps, hc);
            let group = g.reshape(flat, &[r, self.mel_bands]);
            frame_nodes.push(group);
            let gate = self.gate_proj.forward(g, ps, hc);
            gate_nodes.push(gate);
            frames += r;
            if stable_sigmoid(g.value(gate)[[0, 0]]) > self.cfg.gate_threshold {
                stop = StopReason::Gate;
                break;
            }
            prev_group = g.reshape(group, &[1, r * self.mel_bands]);
        }

        let mel_pre = g.concat_rows(&frame_nodes);
        let residual = self.postnet_residual(g, ps, mel_pre);
        let mel_post = g.add(mel_pre, residual);
        let gate_logits = g.concat_rows(&gate_nodes);
        let mut alignments = Array2::zeros((align_rows.len(), len));
        for (s, &pos) in align_rows.iter().enumerate() {
            alignments[[s, pos]] = 1.0;
        }
        Ok(DecodeOutput {
            mel_pre,
            mel_post,
            gate_logits,
            alignments,
            stop,
            frames,
        })
    }
}

fn one_hot_row(len: usize, index: usize) -> ArrayD<f64> {
    let mut v = ArrayD::zeros(IxDyn(&[1, len]));
    v[[0, index]] = 1.0;
    v
}
