//! Korean text front-end: Hangul decomposition to positional jamo, transcript
//! normalization, and the symbol/id mapping consumed by the encoder.

pub mod jamo;
pub mod normalize;
pub mod table;

pub use jamo::{
    compose_jamo, decompose_hangul, ComposeError, JamoKind, JamoSequence, Symbol, SYLLABLE_COUNT,
};
pub use normalize::{normalize_text, Normalized};
pub use table::{SymbolTable, TableError, EOS_TOKEN, PAD_TOKEN, PIPE_CHAR};
