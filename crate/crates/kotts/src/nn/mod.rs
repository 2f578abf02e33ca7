//! Minimal reverse-mode autodiff, layers, and an Adam optimizer.
//!
//! Deliberately desk-scale: single-threaded f64, explicit graphs rebuilt per
//! step, no broadcasting beyond row-vector biases. The payoff is exact
//! reproducibility and a gradient story small enough to verify end to end
//! with finite differences.

pub mod check;
pub mod graph;
pub mod layers;
pub mod optim;

pub use check::{finite_difference_report, finite_difference_report_filtered, jitter_params, FdReport};
pub use graph::{arr1, arr2, stable_sigmoid, stable_softplus, Gradients, Graph, NodeId, ParamId, ParamSet};
pub use layers::{
    dropout_mask, xavier, zeros, BiLstm, Conv1dLayer, Conv2dLayer, Embedding, GruCell, Highway,
    Linear, LstmCell,
};
pub use optim::{learning_rate_at, Adam, AdamConfig};
