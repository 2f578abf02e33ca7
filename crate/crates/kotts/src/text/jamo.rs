//! Hangul syllable decomposition and composition via Unicode arithmetic.
//!
//! Precomposed syllables live in U+AC00..=U+D7A3 and factor as
//! `code = 0xAC00 + lead * 588 + vowel * 28 + tail_slot`, where `tail_slot`
//! 0 means "no tail". Positional jamo (distinct lead/vowel/tail inventories)
//! are used throughout so that lead ㄴ and tail ㄴ stay distinct symbols and
//! composition is unambiguous.

use thiserror::Error;

/// First precomposed syllable, 가.
pub const SYLLABLE_BASE: u32 = 0xAC00;
/// First lead consonant, ᄀ (U+1100).
pub const LEAD_BASE: u32 = 0x1100;
/// First vowel, ᅡ (U+1161).
pub const VOWEL_BASE: u32 = 0x1161;
/// First tail consonant, ᆨ (U+11A8). The Unicode tail slot is offset by one
/// because slot 0 encodes "absent".
pub const TAIL_BASE: u32 = 0x11A8;

pub const LEAD_COUNT: usize = 19;
pub const VOWEL_COUNT: usize = 21;
pub const TAIL_COUNT: usize = 27;
/// Number of precomposed syllables: 19 * 21 * 28.
pub const SYLLABLE_COUNT: usize = 11_172;

const VOWEL_SPAN: u32 = 28; // tail slots per vowel (27 tails + absent)
const LEAD_SPAN: u32 = 588; // 21 vowels * 28

/// Which positional inventory a jamo belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum JamoKind {
    Lead,
    Vowel,
    Tail,
}

impl JamoKind {
    /// Size of this kind's inventory.
    pub fn inventory_len(self) -> usize {
        match self {
            JamoKind::Lead => LEAD_COUNT,
            JamoKind::Vowel => VOWEL_COUNT,
            JamoKind::Tail => TAIL_COUNT,
        }
    }
}

/// One front-end symbol: a positional jamo or a passthrough character
/// (space, punctuation, the boundary pipe, Latin, digits).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Symbol {
    /// Positional jamo. `index` is the 0-based position within the kind's
    /// inventory; for tails that is the dense 0..=26 index (ᆨ = 0), one less
    /// than the Unicode tail slot.
    Jamo { kind: JamoKind, index: u8 },
    /// Any non-Hangul code point, passed through unchanged.
    Char(char),
}

impl Symbol {
    /// Unicode code point this symbol renders as.
    pub fn literal(self) -> char {
        match self {
            Symbol::Jamo { kind, index } => {
                let base = match kind {
                    JamoKind::Lead => LEAD_BASE,
                    JamoKind::Vowel => VOWEL_BASE,
                    JamoKind::Tail => TAIL_BASE,
                };
                char::from_u32(base + index as u32).expect("jamo index in inventory range")
            }
            Symbol::Char(c) => c,
        }
    }

    pub fn lead(index: u8) -> Self {
        debug_assert!((index as usize) < LEAD_COUNT);
        Symbol::Jamo { kind: JamoKind::Lead, index }
    }

    pub fn vowel(index: u8) -> Self {
        debug_assert!((index as usize) < VOWEL_COUNT);
        Symbol::Jamo { kind: JamoKind::Vowel, index }
    }

    pub fn tail(index: u8) -> Self {
        debug_assert!((index as usize) < TAIL_COUNT);
        Symbol::Jamo { kind: JamoKind::Tail, index }
    }

    /// Reads a positional jamo back from its literal, if it is one.
    pub fn from_jamo_char(c: char) -> Option<Self> {
        let code = c as u32;
        if (LEAD_BASE..LEAD_BASE + LEAD_COUNT as u32).contains(&code) {
            Some(Symbol::lead((code - LEAD_BASE) as u8))
        } else if (VOWEL_BASE..VOWEL_BASE + VOWEL_COUNT as u32).contains(&code) {
            Some(Symbol::vowel((code - VOWEL_BASE) as u8))
        } else if (TAIL_BASE..TAIL_BASE + TAIL_COUNT as u32).contains(&code) {
            Some(Symbol::tail((code - TAIL_BASE) as u8))
        } else {
            None
        }
    }
}

/// Ordered jamo/passthrough symbols for one piece of text.
pub type JamoSequence = Vec<Symbol>;

/// True for precomposed syllables in U+AC00..=U+D7A3.
pub fn is_precomposed_syllable(c: char) -> bool {
    (c as u32) >= SYLLABLE_BASE && (c as u32) < SYLLABLE_BASE + SYLLABLE_COUNT as u32
}

/// Splits one precomposed syllable into (lead, vowel, dense tail index or None).
pub fn split_syllable(c: char) -> Option<(u8, u8, Option<u8>)> {
    if !is_precomposed_syllable(c) {
        return None;
    }
    let offset = c as u32 - SYLLABLE_BASE;
    let lead = offset / LEAD_SPAN;
    let vowel = (offset % LEAD_SPAN) / VOWEL_SPAN;
    let tail_slot = offset % VOWEL_SPAN;
    let tail = if tail_slot == 0 { None } else { Some((tail_slot - 1) as u8) };
    Some((lead as u8, vowel as u8, tail))
}

/// Rebuilds a precomposed syllable from inventory indices.
pub fn join_syllable(lead: u8, vowel: u8, tail: Option<u8>) -> Option<char> {
    if lead as usize >= LEAD_COUNT || vowel as usize >= VOWEL_COUNT {
        return None;
    }
    let tail_slot = match tail {
        None => 0,
        Some(t) if (t as usize) < TAIL_COUNT => t as u32 + 1,
        Some(_) => return None,
    };
    char::from_u32(SYLLABLE_BASE + lead as u32 * LEAD_SPAN + vowel as u32 * VOWEL_SPAN + tail_slot)
}

/// Replaces every precomposed syllable with its 2-3 positional jamo; every
/// other code point passes through in order. Total over Unicode input.
pub fn decompose_hangul(text: &str) -> JamoSequence {
    let mut out = Vec::with_capacity(text.chars().count());
    for c in text.chars() {
        match split_syllable(c) {
            Some((lead, vowel, tail)) => {
                out.push(Symbol::lead(lead));
                out.push(Symbol::vowel(vowel));
                if let Some(t) = tail {
                    out.push(Symbol::tail(t));
                }
            }
            None => out.push(Symbol::Char(c)),
        }
    }
    out
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ComposeError {
    #[error("vowel at symbol {index} has no preceding lead consonant")]
    VowelWithoutLead { index: usize },
    #[error("tail consonant at symbol {index} has no preceding lead+vowel")]
    DanglingTail { index: usize },
    #[error("lead consonant at symbol {index} is not followed by a vowel")]
    LeadWithoutVowel { index: usize },
}

/// Exact left inverse of [`decompose_hangul`] on its image: maximal
/// (lead, vowel, optional tail) runs become precomposed syllables, passthrough
/// symbols become their literal.
pub fn compose_jamo(seq: &[Symbol]) -> Result<String, ComposeError> {
    let mut out = String::new();
    let mut i = 0;
    while i < seq.len() {
        match seq[i] {
            Symbol::Char(c) => {
                out.push(c);
                i += 1;
            }
            Symbol::Jamo { kind: JamoKind::Vowel, .. } => {
                return Err(ComposeError::VowelWithoutLead { index: i });
            }
            Symbol::Jamo { kind: JamoKind::Tail, .. } => {
                return Err(ComposeError::DanglingTail { index: i });
            }
            Symbol::Jamo { kind: JamoKind::Lead, index: lead } => {
                let vowel = match seq.get(i + 1) {
                    Some(Symbol::Jamo { kind: JamoKind::Vowel, index }) => *index,
                    _ => return Err(ComposeError::LeadWithoutVowel { index: i }),
                };
                let tail = match seq.get(i + 2) {
                    Some(Symbol::Jamo { kind: JamoKind::Tail, index }) => Some(*index),
                    _ => None,
                };
                let consumed = if tail.is_some() { 3 } else { 2 };
                let syl = join_syllable(lead, vowel, tail)
                    .expect("inventory indices validated by construction");
                out.push(syl);
                i += consumed;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn greeting_decomposes_to_twelve_symbols() {
        let seq = decompose_hangul("안녕하세요");
        assert_eq!(seq.len(), 12);
        let kinds: Vec<JamoKind> = seq
            .iter()
            .map(|s| match s {
                Symbol::Jamo { kind, .. } => *kind,
                Symbol::Char(_) => panic!("pure hangul input"),
            })
            .collect();
        use JamoKind::*;
        assert_eq!(
            kinds,
            vec![Lead, Vowel, Tail, Lead, Vowel, Tail, Lead, Vowel, Lead, Vowel, Lead, Vowel]
        );
    }

    #[test]
    fn han_decomposes_by_unicode_arithmetic() {
        // 한 = U+D55C: offset 10588 = 18*588 + 0*28 + 4, so tail slot 4 (ㄴ)
        // stores as dense tail index 3 and renders as U+11AB.
        let seq = decompose_hangul("한");
        assert_eq!(
            seq,
            vec![Symbol::lead(18), Symbol::vowel(0), Symbol::tail(3)]
        );
        assert_eq!(seq[0].literal(), '\u{1112}');
        assert_eq!(seq[1].literal(), '\u{1161}');
        assert_eq!(seq[2].literal(), '\u{11AB}');
    }

    #[test]
    fn non_hangul_passes_through() {
        let seq = decompose_hangul("a!");
        assert_eq!(seq, vec![Symbol::Char('a'), Symbol::Char('!')]);
        assert_eq!(decompose_hangul(""), vec![]);
    }

    #[test]
    fn single_syllable_length_is_two_without_tail_else_three() {
        assert_eq!(decompose_hangul("하").len(), 2);
        assert_eq!(decompose_hangul("한").len(), 3);
    }

    #[test]
    fn compose_inverts_decompose_for_every_syllable() {
        for code in SYLLABLE_BASE..SYLLABLE_BASE + SYLLABLE_COUNT as u32 {
            let c = char::from_u32(code).unwrap();
            let s = c.to_string();
            let seq = decompose_hangul(&s);
            assert!(seq.len() == 2 || seq.len() == 3, "length law for {c}");
            assert_eq!(compose_jamo(&seq).unwrap(), s, "round trip for {c}");
        }
    }

    #[test]
    fn compose_reports_offending_index() {
        assert_eq!(
            compose_jamo(&[Symbol::vowel(0)]),
            Err(ComposeError::VowelWithoutLead { index: 0 })
        );
        assert_eq!(
            compose_jamo(&[Symbol::Char('x'), Symbol::tail(3)]),
            Err(ComposeError::DanglingTail { index: 1 })
        );
        assert_eq!(
            compose_jamo(&[Symbol::lead(18), Symbol::Char(' ')]),
            Err(ComposeError::LeadWithoutVowel { index: 0 })
        );
    }

    #[test]
    fn mixed_text_round_trips() {
        let text = "한국어 TTS, 1-2-3 | test!";
        assert_eq!(compose_jamo(&decompose_hangul(text)).unwrap(), text);
    }
}
