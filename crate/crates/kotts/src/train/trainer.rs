//! The training loop: deterministic batch order, one optimizer step per
//! batch, and structured per-step logs.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::config::{TrainConfig, TrainConfigError};
use super::data::PreparedUtterance;
use crate::model::{utterance_loss, LossBreakdown, Model, ModelError};
use crate::nn::{Adam, Gradients, Graph, ParamSet};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] TrainConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("training set is empty")]
    NoTrainingData,
    #[error("utterance {stem} has an empty mel target")]
    EmptyTarget { stem: String },
}

/// One line of the training log; serialized as JSON per step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub iteration: u64,
    pub lr: f64,
    pub mel_pre: f64,
    pub mel_post: f64,
    pub gate: f64,
    pub style: f64,
    pub lambda: f64,
    pub total: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// True when a non-finite gradient made the step a no-op.
    pub skipped: bool,
}

/// Batch membership for `iteration`, as a pure function of the corpus size
/// and seed: epochs are seeded shuffles, batches are consecutive chunks.
/// Resuming at iteration k therefore replays exactly the batch a straight
/// run would have seen.
pub fn batch_for_iteration(n: usize, batch_size: usize, seed: u64, iteration: u64) -> Vec<usize> {
    assert!(n > 0 && batch_size > 0);
    let per_epoch = n.div_ceil(batch_size) as u64;
    let epoch = iteration / per_epoch;
    let slot = (iteration % per_epoch) as usize;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    let start = slot * batch_size;
    let end = (start + batch_size).min(n);
    order[start..end].to_vec()
}

pub struct Trainer {
    pub model: Model,
    pub params: ParamSet,
    pub opt: Adam,
    pub cfg: TrainConfig,
    /// Iterations completed so far; also the index of the next step.
    pub iteration: u64,
    items: Vec<PreparedUtterance>,
    /// Targets padded up to a multiple of the decoder reduction factor.
    targets: Vec<Array2<f64>>,
}

impl Trainer {
    pub fn new(
        model: Model,
        params: ParamSet,
        items: Vec<PreparedUtterance>,
        cfg: TrainConfig,
    ) -> Result<Self, TrainError> {
        cfg.validate()?;
        if items.is_empty() {
            return Err(TrainError::NoTrainingData);
        }
        let r = model.cfg.decoder.reduction;
        let mut targets = Vec::with_capacity(items.len());
        for item in &items {
            if item.mel.nrows() == 0 {
                return Err(TrainError::EmptyTarget { stem: item.stem.clone() });
            }
            targets.push(pad_to_multiple(&item.mel, r));
        }
        let opt = Adam::new(cfg.adam, &params);
        Ok(Trainer { model, params, opt, cfg, iteration: 0, items, targets })
    }

    pub fn train_items(&self) -> &[PreparedUtterance] {
        &self.items
    }

    /// The padded decoder target for item `i`.
    pub fn target(&self, i: usize) -> &Array2<f64> {
        &self.targets[i]
    }

    /// Runs one batch: forward every member, average the losses, one
    /// optimizer update. A non-finite gradient skips the update and is
    /// reported in the log line rather than killing the run.
    pub fn step(&mut self) -> Result<StepLog, TrainError> {
        let iteration = self.iteration;
        let lr = self.cfg.lr_at(iteration);
        let batch = batch_for_iteration(
            self.items.len(),
            self.cfg.batch_size.min(self.items.len()),
            self.cfg.seed,
            iteration,
        );
        let mut g = Graph::new();
        let mut sum_nodes = None;
        let mut agg = [0.0f64; 5]; // mel_pre, mel_post, gate, style, total
        for &i in &batch {
            let item = &self.items[i];
            let mut rng = Model::step_rng(self.cfg.seed, iteration, i as u64);
            let fwd =
                self.model.train_forward(&mut g, &self.params, &item.ids, &self.targets[i], &mut rng)?;
            let (nodes, bd) = utterance_loss(
                &mut g,
                &fwd.decode,
                &self.targets[i],
                fwd.reference_style,
                fwd.predicted_style,
                self.cfg.lambda,
                self.cfg.gate_loss,
            )
            .map_err(ModelError::from)?;
            agg[0] += bd.mel_pre;
            agg[1] += bd.mel_post;
            agg[2] += bd.gate;
            agg[3] += bd.style;
            agg[4] += bd.total;
            sum_nodes = Some(match sum_nodes {
                None => nodes.total,
                Some(acc) => g.add(acc, nodes.total),
            });
        }
        let k = batch.len() as f64;
        let batch_loss = g.scale(sum_nodes.expect("batch is non-empty"), 1.0 / k);
        let mut grads = g.backward(batch_loss);
        let (grad_norm, skipped) = self.apply(&mut grads, lr);
        self.iteration += 1;
        Ok(StepLog {
            iteration,
            lr,
            mel_pre: agg[0] / k,
            mel_post: agg[1] / k,
            gate: agg[2] / k,
            style: agg[3] / k,
            lambda: self.cfg.lambda,
            total: agg[4] / k,
            grad_norm,
            skipped,
        })
    }

    fn apply(&mut self, grads: &mut Gradients, lr: f64) -> (f64, bool) {
        if !grads.is_finite() {
            log::warn!("iteration {}: non-finite gradient, step skipped", self.iteration);
            return (f64::NAN, true);
        }
        let norm = self.opt.clip_global_norm(grads);
        self.opt.step(&mut self.params, grads, lr);
        (norm, false)
    }

    /// Teacher-forced loss over `items` without touching parameters; for
    /// validation monitoring. Randomness is keyed to the current iteration.
    pub fn evaluate(&self, items: &[PreparedUtterance]) -> Result<LossBreakdown, TrainError> {
        let r = self.model.cfg.decoder.reduction;
        let mut agg = LossBreakdown {
            mel_pre: 0.0,
            mel_post: 0.0,
            gate: 0.0,
            style: 0.0,
            lambda: self.cfg.lambda,
            total: 0.0,
        };
        if items.is_empty() {
            return Ok(agg);
        }
        for (i, item) in items.iter().enumerate() {
            let target = pad_to_multiple(&item.mel, r);
            let mut g = Graph::new();
            let mut rng = Model::step_rng(self.cfg.seed ^ 0x5eed, self.iteration, i as u64);
            let fwd = self.model.train_forward(&mut g, &self.params, &item.ids, &target, &mut rng)?;
            let (_, bd) = utterance_loss(
                &mut g,
                &fwd.decode,
                &target,
                fwd.reference_style,
                fwd.predicted_style,
                self.cfg.lambda,
                self.cfg.gate_loss,
            )
            .map_err(ModelError::from)?;
            agg.mel_pre += bd.mel_pre;
            agg.mel_post += bd.mel_post;
            agg.gate += bd.gate;
            agg.style += bd.style;
            agg.total += bd.total;
        }
        let k = items.len() as f64;
        agg.mel_pre /= k;
        agg.mel_post /= k;
        agg.gate /= k;
        agg.style /= k;
        agg.total /= k;
        Ok(agg)
    }
}

/// Pads rows up to a multiple of `r` by repeating the final frame, so the
/// decoder's frame groups divide evenly.
pub fn pad_to_multiple(mel: &Array2<f64>, r: usize) -> Array2<f64> {
    let frames = mel.nrows();
    let rem = frames % r;
    if rem == 0 {
        return mel.clone();
    }
    let extra = r - rem;
    let mut out = Array2::zeros((frames + extra, mel.ncols()));
    out.slice_mut(ndarray::s![..frames, ..]).assign(mel);
    for k in 0..extra {
        out.row_mut(frames + k).assign(&mel.row(frames - 1));
    }
    out
}
