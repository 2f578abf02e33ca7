//! Transcript normalization ahead of decomposition.
//!
//! Canonical Hangul composition is algorithmic (L+V(+T) jamo runs fold into
//! precomposed syllables), so no Unicode table data is needed for the script
//! this front-end targets.

use super::jamo::{self, Symbol};
use super::table::SymbolTable;

/// Normalization outcome: the cleaned text plus everything that was dropped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Normalized {
    pub text: String,
    /// Characters stripped because the symbol table cannot represent them.
    pub stripped: Vec<char>,
}

/// Folds positional jamo runs into precomposed syllables (canonical
/// composition for Hangul), including attaching a tail jamo to a preceding
/// open syllable.
fn compose_precomposed(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let chars: Vec<char> = text.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if let Some(Symbol::Jamo { kind: jamo::JamoKind::Lead, index: lead }) =
            Symbol::from_jamo_char(c)
        {
            if let Some(Symbol::Jamo { kind: jamo::JamoKind::Vowel, index: vowel }) =
                chars.get(i + 1).copied().and_then(Symbol::from_jamo_char)
            {
                let tail = match chars.get(i + 2).copied().and_then(Symbol::from_jamo_char) {
                    Some(Symbol::Jamo { kind: jamo::JamoKind::Tail, index }) => Some(index),
                    _ => None,
                };
                let consumed = if tail.is_some() { 3 } else { 2 };
                out.push(jamo::join_syllable(lead, vowel, tail).expect("indices from inventory"));
                i += consumed;
                continue;
            }
        }
        // An open syllable followed by a tail jamo also composes canonically.
        if let Some(Symbol::Jamo { kind: jamo::JamoKind::Tail, index: tail }) =
            Symbol::from_jamo_char(c)
        {
            if let Some(prev) = out.chars().last() {
                if let Some((lead, vowel, None)) = jamo::split_syllable(prev) {
                    out.pop();
                    out.push(
                        jamo::join_syllable(lead, vowel, Some(tail))
                            .expect("indices from inventory"),
                    );
                    i += 1;
                    continue;
                }
            }
        }
        out.push(c);
        i += 1;
    }
    out
}

/// True when the table can represent `c`, either directly or through
/// syllable decomposition.
fn representable(c: char, table: &SymbolTable) -> bool {
    if jamo::is_precomposed_syllable(c) {
        return true;
    }
    table.contains(Symbol::Char(c))
}

/// Composes to precomposed form, strips unrepresentable characters
/// (reporting them), then collapses whitespace runs to single spaces and
/// trims the ends.
pub fn normalize_text(text: &str, table: &SymbolTable) -> Normalized {
    let composed = compose_precomposed(text);
    let mut kept = String::with_capacity(composed.len());
    let mut stripped = Vec::new();
    for c in composed.chars() {
        if c.is_whitespace() {
            kept.push(' ');
        } else if representable(c, table) {
            kept.push(c);
        } else {
            stripped.push(c);
        }
    }
    let mut out = String::with_capacity(kept.len());
    for c in kept.chars() {
        if c == ' ' && out.ends_with(' ') {
            continue;
        }
        out.push(c);
    }
    let text = out.trim().to_string();
    Normalized { text, stripped }
}
