//! Composite training loss.
//!
//! total = mel_pre + mel_post + gate + lambda * style, where the mel terms
//! are MSE against the target spectrogram before and after the post-net,
//! the gate term scores the stop logits, and the style term is the L1 gap
//! between the reference-derived embedding and the text-side prediction.
//! The reference embedding enters the style term through a detach node, so
//! that term trains only the text-side predictor; the reference path still
//! learns through the decoder's conditioning on it.
//!
//! The breakdown's `recomposed` uses the same association order as the graph
//! construction, so logged components recombine to the logged total bitwise.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{Graph, NodeId};

use super::decoder::DecodeOutput;

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GateLoss {
    /// Cross-entropy on logits with a weight on the positive (stop) frame,
    /// which is outnumbered ~100:1 by continue frames.
    WeightedBce { pos_weight: f64 },
    /// Squared error on the gate sigmoid.
    Mse,
}

impl Default for GateLoss {
    fn default() -> Self {
        GateLoss::WeightedBce { pos_weight: 6.0 }
    }
}

#[derive(Debug, Error)]
pub enum LossError {
    #[error("target mel is {found:?} but decoder produced {expected:?}")]
    ShapeMismatch { expected: (usize, usize), found: (usize, usize) },
    #[error("{0} loss term is non-finite")]
    NonFinite(&'static str),
}

/// Graph nodes for each term; `total` is the backward root.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub mel_pre: NodeId,
    pub mel_post: NodeId,
    pub gate: NodeId,
    pub style: NodeId,
    pub total: NodeId,
}

/// Scalar values of one loss evaluation.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LossBreakdown {
    pub mel_pre: f64,
    pub mel_post: f64,
    pub gate: f64,
    pub style: f64,
    pub lambda: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Recombines the components exactly as the graph did.
    pub fn recomposed(&self) -> f64 {
        ((self.mel_pre + self.mel_post) + self.gate) + self.style * self.lambda
    }
}

fn mse(g: &mut Graph, a: NodeId, b: NodeId) -> NodeId {
    let d = g.sub(a, b);
    let sq = g.mul(d, d);
    g.mean_all(sq)
}

/// Builds the full loss for one utterance.
///
/// `reference_style` is the reference-path embedding (detached here), `predicted_style` the
/// text-predicted one. Gate labels are 0 everywhere except the final step.
pub fn utterance_loss(
    g: &mut Graph,
    decode: &DecodeOutput,
    target: &Array2<f64>,
    reference_style: NodeId,
    predicted_style: NodeId,
    lambda: f64,
    gate_loss: GateLoss,
) -> Result<(LossNodes, LossBreakdown), LossError> {
    let produced = g.value(decode.mel_pre).shape().to_vec();
    if (target.nrows(), target.ncols()) != (produced[0], produced[1]) {
        return Err(LossError::ShapeMismatch {
            expected: (produced[0], produced[1]),
            found: (target.nrows(), target.ncols()),
        });
    }
    let target_node = g.constant(target.clone().into_dyn());
    let mel_pre = mse(g, decode.mel_pre, target_node);
    let mel_post = mse(g, decode.mel_post, target_node);

    let steps = g.value(decode.gate_logits).shape()[0];
    let gate = match gate_loss {
        GateLoss::WeightedBce { pos_weight } => {
            // Stable BCE from logits: y=1 costs softplus(-x), y=0 softplus(x).
            let mut pos_mask = Array2::zeros((steps, 1));
            let mut neg_mask = Array2::from_elem((steps, 1), 1.0);
            pos_mask[[steps - 1, 0]] = pos_weight;
            neg_mask[[steps - 1, 0]] = 0.0;
            let neg_logits = g.neg(decode.gate_logits);
            let sp_pos = g.softplus(neg_logits);
            let sp_neg = g.softplus(decode.gate_logits);
            let wp = g.mul_const(sp_pos, pos_mask.into_dyn());
            let wn = g.mul_const(sp_neg, neg_mask.into_dyn());
            let sum = g.add(wp, wn);
            g.mean_all(sum)
        }
        GateLoss::Mse => {
            let mut labels = Array2::zeros((steps, 1));
            labels[[steps - 1, 0]] = 1.0;
            let labels_node = g.constant(labels.into_dyn());
            let probs = g.sigmoid(decode.gate_logits);
            mse(g, probs, labels_node)
        }
    };

    let frozen_reference = g.detach(reference_style);
    let d = g.sub(frozen_reference, predicted_style);
    let a = g.abs(d);
    let style = g.mean_all(a);

    let mel_sum = g.add(mel_pre, mel_post);
    let with_gate = g.add(mel_sum, gate);
    let scaled_style = g.scale(style, lambda);
    let total = g.add(with_gate, scaled_style);

    let nodes = LossNodes { mel_pre, mel_post, gate, style, total };
    let breakdown = LossBreakdown {
        mel_pre: g.scalar(mel_pre),
        mel_post: g.scalar(mel_post),
        gate: g.scalar(gate),
        style: g.scalar(style),
        lambda,
        total: g.scalar(total),
    };
    for (name, v) in [
        ("mel_pre", breakdown.mel_pre),
        ("mel_post", breakdown.mel_post),
        ("gate", breakdown.gate),
        ("style", breakdown.style),
    ] {
        if !v.is_finite() {
            return Err(LossError::NonFinite(name));
        }
    }
    Ok((nodes, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};

    /// Hand-built DecodeOutput around constant nodes.
    fn fake_decode(
        g: &mut Graph,
        mel_pre: Array2<f64>,
        mel_post: Array2<f64>,
        gates: Vec<f64>,
    ) -> DecodeOutput {
        let frames = mel_pre.nrows();
        let steps = gates.len();
        DecodeOutput {
            mel_pre: g.constant(mel_pre.into_dyn()),
            mel_post: g.constant(mel_post.into_dyn()),
            gate_logits: g.constant(
                ArrayD::from_shape_vec(IxDyn(&[steps, 1]), gates).unwrap(),
            ),
            alignments: Array2::zeros((steps, 1)),
            stop: super::super::decoder::StopReason::TeacherForced,
            frames,
        }
    }

    fn vec_node(g: &mut Graph, v: &[f64]) -> NodeId {
        g.constant(ArrayD::from_shape_vec(IxDyn(&[1, v.len()]), v.to_vec()).unwrap())
    }

    #[test]
    fn perfect_fit_with_saturated_gate_is_almost_zero() {
        let mut g = Graph::new();
        let target = Array2::from_shape_fn((4, 3), |(i, j)| (i + j) as f64);
        let decode = fake_decode(
            &mut g,
            target.clone(),
            target.clone(),
            vec![-30.0, -30.0, -30.0, 30.0],
        );
        let reference_style = vec_node(&mut g, &[0.3, -0.2]);
        let predicted_style = vec_node(&mut g, &[0.3, -0.2]);
        let (_, b) =
            utterance_loss(&mut g, &decode, &target, reference_style, predicted_style, 0.3, GateLoss::default())
                .unwrap();
        assert!(b.total < 1e-6, "perfect fit gave {}", b.total);
    }

    #[test]
    fn total_composes_from_parts_bitwise() {
        let mut g = Graph::new();
        let target = Array2::from_shape_fn((3, 2), |(i, j)| (2 * i + j) as f64 * 0.31);
        let pre = target.mapv(|v| v + 0.7);
        let post = target.mapv(|v| v + 0.3);
        let decode = fake_decode(&mut g, pre, post, vec![0.4, -0.3, 1.2]);
        let reference_style = vec_node(&mut g, &[0.5, -0.5, 0.25]);
        let predicted_style = vec_node(&mut g, &[0.1, 0.2, -0.3]);
        let (_, b) =
            utterance_loss(&mut g, &decode, &target, reference_style, predicted_style, 0.3, GateLoss::default())
                .unwrap();
        assert_eq!(b.total.to_bits(), b.recomposed().to_bits());
        assert!(b.mel_pre > 0.0 && b.mel_post > 0.0 && b.gate > 0.0 && b.style > 0.0);
    }

    #[test]
    fn lambda_zero_ignores_the_style_gap() {
        let mut g = Graph::new();
        let target = Array2::zeros((2, 2));
        let decode = fake_decode(&mut g, target.clone(), target.clone(), vec![-5.0, 5.0]);
        let near = vec_node(&mut g, &[0.1, 0.1]);
        let far = vec_node(&mut g, &[0.9, -0.9]);
        let predicted_style = vec_node(&mut g, &[0.0, 0.0]);
        let (_, b1) =
            utterance_loss(&mut g, &decode, &target, near, predicted_style, 0.0, GateLoss::default())
                .unwrap();
        let (_, b2) =
            utterance_loss(&mut g, &decode, &target, far, predicted_style, 0.0, GateLoss::default())
                .unwrap();
        assert_eq!(b1.total, b2.total);
        assert_ne!(b1.style, b2.style, "style is still reported");
    }

    #[test]
    fn gate_mse_variant_scores_probabilities() {
        let mut g = Graph::new();
        let target = Array2::zeros((2, 2));
        let decode = fake_decode(&mut g, target.clone(), target.clone(), vec![-30.0, 30.0]);
        let e = vec_node(&mut g, &[0.0]);
        let (_, b) = utterance_loss(&mut g, &decode, &target, e, e, 0.0, GateLoss::Mse).unwrap();
        assert!(b.gate < 1e-12, "saturated logits give zero MSE, got {}", b.gate);
    }

    #[test]
    fn style_term_trains_prediction_not_reference() {
        use crate::nn::ParamSet;
        let mut ps = ParamSet::new();
        let reference_param = ps.add("ref.fake", crate::nn::arr2(1, 2, vec![0.9, -0.9]));
        let predicted_param = ps.add("pred.fake", crate::nn::arr2(1, 2, vec![0.0, 0.0]));
        let mut g = Graph::new();
        let target = Array2::zeros((2, 2));
        let decode = fake_decode(&mut g, target.clone(), target.clone(), vec![0.0, 0.0]);
        let reference_style = g.param(&ps, reference_param);
        let predicted_style = g.param(&ps, predicted_param);
        let (nodes, _) =
            utterance_loss(&mut g, &decode, &target, reference_style, predicted_style, 0.3, GateLoss::default())
                .unwrap();
        let grads = g.backward(nodes.total);
        assert!(grads.param(reference_param).is_none(), "reference side must see no style gradient");
        let gp = grads.param(predicted_param).expect("prediction side trains");
        assert!(gp.iter().any(|&v| v != 0.0));
        assert!(!g.reachable_params(nodes.style).contains(&reference_param));
        assert!(g.reachable_params(nodes.style).contains(&predicted_param));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut g = Graph::new();
        let decode = fake_decode(&mut g, Array2::zeros((3, 2)), Array2::zeros((3, 2)), vec![0.0]);
        let e = vec_node(&mut g, &[0.0]);
        let wrong = Array2::zeros((4, 2));
        assert!(matches!(
            utterance_loss(&mut g, &decode, &wrong, e, e, 0.3, GateLoss::default()),
            Err(LossError::ShapeMismatch { .. })
        ));
    }
}
