//! Corpus preparation, the teacher-forced training loop, and checkpointing.
//!
//! The loop is deterministic end to end: batch composition is a pure
//! function of (corpus size, batch size, seed, iteration), per-item noise
//! comes from a counter-keyed stream, and resuming from a checkpoint
//! replays the exact run an uninterrupted trainer would have produced.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod trainer;

pub use checkpoint::{
    checkpoint_file_name, latest_checkpoint, Checkpoint, CheckpointError, CHECKPOINT_VERSION,
};
pub use config::{LrStage, TrainConfig, TrainConfigError};
pub use data::{
    attach_parses, load_cached_corpus, load_metadata, load_parse_sidecar, preprocess_corpus,
    split_dataset, CachedFeatures, DataError, PreparedUtterance, PreprocessReport,
    UtteranceError, UtteranceRecord,
};
pub use trainer::{batch_for_iteration, pad_to_multiple, StepLog, TrainError, Trainer};
