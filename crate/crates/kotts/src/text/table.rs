//! Symbol table: bijective mapping between front-end symbols and integer ids.
//!
//! Id 0 is reserved for padding and id 1 for end-of-sequence; neither is ever
//! produced by decomposition. The table is fixed when a corpus is preprocessed
//! and serialized with checkpoints so ids cannot drift between runs.

use std::collections::BTreeSet;
use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use super::jamo::{JamoKind, Symbol};

/// Rendering of the padding entry in the table file.
pub const PAD_TOKEN: &str = "<pad>";
/// Rendering of the end-of-sequence entry in the table file.
pub const EOS_TOKEN: &str = "<eos>";
/// The syntactic boundary marker carried through as an input symbol.
pub const PIPE_CHAR: char = '|';

/// Table entry: the two specials or a concrete symbol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Entry {
    Pad,
    Eos,
    Sym(Symbol),
}

#[derive(Debug, Error)]
pub enum TableError {
    #[error("symbol {symbol:?} at position {position} is not in the symbol table")]
    UnknownSymbol { symbol: char, position: usize },
    #[error("id {id} is out of table range (size {size})")]
    UnknownId { id: usize, size: usize },
    #[error("id {id} at position {position} is {kind}, which carries no symbol")]
    SpecialInBody { id: usize, position: usize, kind: &'static str },
    #[error("table file line {line} is not a single symbol: {content:?}")]
    BadLine { line: usize, content: String },
    #[error("table file does not begin with the padding placeholder")]
    MissingPad,
    #[error("duplicate entry {entry:?} in table")]
    Duplicate { entry: String },
    #[error("table must contain exactly one boundary pipe symbol")]
    PipeCount,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Ordered, bijective symbol/id mapping.
#[derive(Debug, Clone)]
pub struct SymbolTable {
    entries: Vec<Entry>,
    ids: HashMap<Entry, usize>,
}

impl PartialEq for SymbolTable {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries
    }
}

impl SymbolTable {
    /// Builds a table from concrete symbols; padding and end-of-sequence are
    /// prepended automatically. Duplicates and missing/extra pipes are errors.
    pub fn new(symbols: impl IntoIterator<Item = Symbol>) -> Result<Self, TableError> {
        let mut entries = vec![Entry::Pad, Entry::Eos];
        entries.extend(symbols.into_iter().map(Entry::Sym));
        let mut ids = HashMap::with_capacity(entries.len());
        for (id, &e) in entries.iter().enumerate() {
            if ids.insert(e, id).is_some() {
                return Err(TableError::Duplicate { entry: format!("{e:?}") });
            }
        }
        let table = SymbolTable { entries, ids };
        if table.pipe_count() != 1 {
            return Err(TableError::PipeCount);
        }
        Ok(table)
    }

    /// Default table: boundary pipe, space, ASCII punctuation, digits, Latin
    /// letters, then the full positional jamo inventories.
    pub fn standard() -> Self {
        let mut symbols = vec![Symbol::Char(PIPE_CHAR), Symbol::Char(' ')];
        symbols.extend(".,!?;:'\"()-".chars().map(Symbol::Char));
        symbols.extend(('0'..='9').map(Symbol::Char));
        symbols.extend(('A'..='Z').map(Symbol::Char));
        symbols.extend(('a'..='z').map(Symbol::Char));
        for kind in [JamoKind::Lead, JamoKind::Vowel, JamoKind::Tail] {
            for index in 0..kind.inventory_len() {
                symbols.push(Symbol::Jamo { kind, index: index as u8 });
            }
        }
        Self::new(symbols).expect("standard inventory is duplicate-free")
    }

    /// Minimal table covering exactly the symbols of the given decomposed
    /// texts (plus pipe and space). Useful for small test models.
    pub fn covering(seqs: &[Vec<Symbol>]) -> Result<Self, TableError> {
        let mut set: BTreeSet<Symbol> = BTreeSet::new();
        set.insert(Symbol::Char(PIPE_CHAR));
        set.insert(Symbol::Char(' '));
        for seq in seqs {
            set.extend(seq.iter().copied());
        }
        Self::new(set)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn pad_id(&self) -> usize {
        0
    }

    pub fn eos_id(&self) -> usize {
        1
    }

    pub fn pipe_id(&self) -> usize {
        self.ids[&Entry::Sym(Symbol::Char(PIPE_CHAR))]
    }

    fn pipe_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| matches!(e, Entry::Sym(Symbol::Char(PIPE_CHAR))))
            .count()
    }

    pub fn id_of(&self, symbol: Symbol) -> Option<usize> {
        self.ids.get(&Entry::Sym(symbol)).copied()
    }

    pub fn contains(&self, symbol: Symbol) -> bool {
        self.id_of(symbol).is_some()
    }

    pub fn entry(&self, id: usize) -> Option<Entry> {
        self.entries.get(id).copied()
    }

    /// One id per symbol, in order, with the end-of-sequence id appended.
    pub fn encode(&self, seq: &[Symbol]) -> Result<Vec<usize>, TableError> {
        let mut ids = Vec::with_capacity(seq.len() + 1);
        for (position, &s) in seq.iter().enumerate() {
            match self.id_of(s) {
                Some(id) => ids.push(id),
                None => {
                    return Err(TableError::UnknownSymbol { symbol: s.literal(), position })
                }
            }
        }
        ids.push(self.eos_id());
        Ok(ids)
    }

    /// Inverse of [`encode`](Self::encode): strips one trailing end-of-sequence
    /// id and maps the rest back to symbols. Padding or interior
    /// end-of-sequence ids are errors.
    pub fn decode(&self, ids: &[usize]) -> Result<Vec<Symbol>, TableError> {
        let body = match ids.split_last() {
            Some((&last, body)) if last == self.eos_id() => body,
            _ => ids,
        };
        let mut seq = Vec::with_capacity(body.len());
        for (position, &id) in body.iter().enumerate() {
            match self.entry(id) {
                None => return Err(TableError::UnknownId { id, size: self.len() }),
                Some(Entry::Pad) => {
                    return Err(TableError::SpecialInBody { id, position, kind: "padding" })
                }
                Some(Entry::Eos) => {
                    return Err(TableError::SpecialInBody {
                        id,
                        position,
                        kind: "end-of-sequence",
                    })
                }
                Some(Entry::Sym(s)) => seq.push(s),
            }
        }
        Ok(seq)
    }

    /// Renders the table as text, one symbol per line, line number = id.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            match e {
                Entry::Pad => out.push_str(PAD_TOKEN),
                Entry::Eos => out.push_str(EOS_TOKEN),
                Entry::Sym(s) => {
                    let _ = write!(out, "{}", s.literal());
                }
            }
            out.push('\n');
        }
        out
    }

    /// Parses the one-symbol-per-line rendering produced by
    /// [`to_text`](Self::to_text).
    pub fn from_text(text: &str) -> Result<Self, TableError> {
        let mut entries = Vec::new();
        for (i, raw) in text.split('\n').enumerate() {
            let line = raw.strip_suffix('\r').unwrap_or(raw);
            if line.is_empty() && i + 1 == text.split('\n').count() {
                break; // trailing newline
            }
            let entry = match line {
                PAD_TOKEN => Entry::Pad,
                EOS_TOKEN => Entry::Eos,
                _ => {
                    let mut chars = line.chars();
                    match (chars.next(), chars.next()) {
                        (Some(c), None) => {
                            Entry::Sym(Symbol::from_jamo_char(c).unwrap_or(Symbol::Char(c)))
                        }
                        _ => {
                            return Err(TableError::BadLine {
                                line: i,
                                content: line.to_string(),
                            })
                        }
                    }
                }
            };
            entries.push(entry);
        }
        if entries.first() != Some(&Entry::Pad) {
            return Err(TableError::MissingPad);
        }
        let mut ids = HashMap::with_capacity(entries.len());
        for (id, &e) in entries.iter().enumerate() {
            if ids.insert(e, id).is_some() {
                return Err(TableError::Duplicate { entry: format!("{e:?}") });
            }
        }
        let table = SymbolTable { entries, ids };
        if table.pipe_count() != 1 {
            return Err(TableError::PipeCount);
        }
        Ok(table)
    }

    pub fn save(&self, path: &Path) -> Result<(), TableError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TableError> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::jamo::decompose_hangul;

    #[test]
    fn encode_appends_eos_and_uses_nonzero_ids() {
        let table = SymbolTable::standard();
        let ids = table.encode(&decompose_hangul("안")).unwrap();
        assert_eq!(ids.len(), 4);
        assert_eq!(*ids.last().unwrap(), table.eos_id());
        assert!(ids.iter().all(|&id| id != table.pad_id()));
    }

    #[test]
    fn pipe_has_a_dedicated_id() {
        let table = SymbolTable::standard();
        let ids = table.encode(&decompose_hangul("가| 나")).unwrap();
        assert!(ids.contains(&table.pipe_id()));
    }

    #[test]
    fn encoding_is_deterministic() {
        let table = SymbolTable::standard();
        let seq = decompose_hangul("안녕하세요, 1 2!");
        assert_eq!(table.encode(&seq).unwrap(), table.encode(&seq).unwrap());
    }

    #[test]
    fn unknown_symbol_error_names_symbol_and_position() {
        let table = SymbolTable::standard();
        let err = table.encode(&decompose_hangul("가★")).unwrap_err();
        match err {
            TableError::UnknownSymbol { symbol, position } => {
                assert_eq!(symbol, '★');
                assert_eq!(position, 2);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn decode_inverts_encode() {
        let table = SymbolTable::standard();
        let seq = decompose_hangul("아버지가| 방에 들어가신다");
        let ids = table.encode(&seq).unwrap();
        let back = table.decode(&ids).unwrap();
        assert_eq!(back, seq);
        assert_eq!(table.encode(&back).unwrap(), ids);
    }

    #[test]
    fn text_round_trip_preserves_ids_and_pad_first_line() {
        let table = SymbolTable::standard();
        let text = table.to_text();
        assert!(text.starts_with("<pad>\n<eos>\n"));
        let reloaded = SymbolTable::from_text(&text).unwrap();
        assert_eq!(reloaded, table);
        assert_eq!(reloaded.pipe_id(), table.pipe_id());
    }

    #[test]
    fn table_requires_exactly_one_pipe() {
        let err = SymbolTable::new([Symbol::Char(' ')]).unwrap_err();
        assert!(matches!(err, TableError::PipeCount));
    }
}
