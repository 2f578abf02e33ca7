//! Bracketed constituency parses and boundary-pipe markup.
//!
//! An external parser supplies Penn-style bracketed trees. This module reads
//! them, finds where selected phrasal categories end, and injects the
//! boundary pipe into the sentence text so the marker reaches the encoder as
//! an ordinary input symbol.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::text::PIPE_CHAR;

/// Character span [start, end) into the detokenized sentence.
pub type Span = (usize, usize);

/// One tree node: a labeled phrase or a terminal token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseTree {
    Phrase { label: String, children: Vec<ParseTree>, span: Span },
    Token { text: String, span: Span },
}

impl ParseTree {
    pub fn span(&self) -> Span {
        match self {
            ParseTree::Phrase { span, .. } | ParseTree::Token { span, .. } => *span,
        }
    }

    /// Terminal tokens joined with single spaces: the sentence the spans
    /// index into.
    pub fn sentence(&self) -> String {
        let mut tokens = Vec::new();
        self.collect_tokens(&mut tokens);
        tokens.join(" ")
    }

    fn collect_tokens<'a>(&'a self, out: &mut Vec<&'a str>) {
        match self {
            ParseTree::Token { text, .. } => out.push(text),
            ParseTree::Phrase { children, .. } => {
                for c in children {
                    c.collect_tokens(out);
                }
            }
        }
    }

    fn visit_phrases<'a>(&'a self, f: &mut impl FnMut(&'a str, Span)) {
        if let ParseTree::Phrase { label, children, span } = self {
            f(label, *span);
            for c in children {
                c.visit_phrases(f);
            }
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SyntaxError {
    #[error("unbalanced tree: expected {expected} at character {position}")]
    Unbalanced { expected: &'static str, position: usize },
    #[error("empty constituent label at character {position}")]
    EmptyLabel { position: usize },
    #[error("constituent {label:?} at character {position} has no children")]
    NoChildren { label: String, position: usize },
    #[error("trailing content after tree at character {position}")]
    TrailingContent { position: usize },
    #[error("boundary offset {offset} exceeds text length {len}")]
    OffsetOutOfRange { offset: usize, len: usize },
}

/// End offsets of selected constituents, deduplicated across nesting.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BoundarySet {
    positions: BTreeSet<usize>,
    categories_at: BTreeMap<usize, BTreeSet<String>>,
}

impl BoundarySet {
    pub fn positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.positions.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn categories_at(&self, offset: usize) -> Option<&BTreeSet<String>> {
        self.categories_at.get(&offset)
    }

    pub fn contains(&self, offset: usize) -> bool {
        self.positions.contains(&offset)
    }
}

struct Reader<'a> {
    chars: Vec<char>,
    pos: usize,
    _src: &'a str,
}

impl<'a> Reader<'a> {
    fn new(s: &'a str) -> Self {
        Reader { chars: s.chars().collect(), pos: 0, _src: s }
    }

    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).copied()
    }

    fn skip_ws(&mut self) {
        while matches!(self.peek(), Some(c) if c.is_whitespace()) {
            self.pos += 1;
        }
    }

    fn word(&mut self) -> String {
        let start = self.pos;
        while matches!(self.peek(), Some(c) if !c.is_whitespace() && c != '(' && c != ')') {
            self.pos += 1;
        }
        self.chars[start..self.pos].iter().collect()
    }

    /// Parses one "(LABEL child ...)" node; `offset` is the running character
    /// position in the detokenized sentence and returns advanced past this
    /// node's yield.
    fn node(&mut self, offset: usize) -> Result<(ParseTree, usize), SyntaxError> {
        self.skip_ws();
        match self.peek() {
            Some('(') => self.pos += 1,
            _ => return Err(SyntaxError::Unbalanced { expected: "'('", position: self.pos }),
        }
        self.skip_ws();
        let label_pos = self.pos;
        let label = self.word();
        if label.is_empty() {
            return Err(SyntaxError::EmptyLabel { position: label_pos });
        }
        let mut children = Vec::new();
        let mut cursor = offset;
        loop {
            self.skip_ws();
            match self.peek() {
                None => {
                    return Err(SyntaxError::Unbalanced { expected: "')'", position: self.pos })
                }
                Some(')') => {
                    self.pos += 1;
                    break;
                }
                Some('(') => {
                    if !children.is_empty() {
                        cursor += 1; // single space separates sibling yields
                    }
                    let (child, next) = self.node(cursor)?;
                    cursor = next;
                    children.push(child);
                }
                Some(_) => {
                    if !children.is_empty() {
                        cursor += 1;
                    }
                    let text = self.word();
                    let len = text.chars().count();
                    children.push(ParseTree::Token { text, span: (cursor, cursor + len) });
                    cursor += len;
                }
            }
        }
        if children.is_empty() {
            return Err(SyntaxError::NoChildren { label, position: self.pos });
        }
        let span = (children[0].span().0, children[children.len() - 1].span().1);
        Ok((ParseTree::Phrase { label, children, span }, cursor))
    }
}

/// Reads one balanced Penn-style bracketed tree, computing character spans.
pub fn parse_bracketed(s: &str) -> Result<ParseTree, SyntaxError> {
    let mut r = Reader::new(s);
    let (tree, _) = r.node(0)?;
    r.skip_ws();
    if r.peek().is_some() {
        return Err(SyntaxError::TrailingContent { position: r.pos });
    }
    Ok(tree)
}

/// End offsets of every constituent whose label is in `categories`,
/// deduplicated. Offsets index the tree's detokenized sentence.
pub fn extract_boundaries<S: AsRef<str>>(tree: &ParseTree, categories: &[S]) -> BoundarySet {
    let wanted: BTreeSet<&str> = categories.iter().map(|s| s.as_ref()).collect();
    let mut set = BoundarySet::default();
    tree.visit_phrases(&mut |label, span| {
        if wanted.contains(label) {
            set.positions.insert(span.1);
            set.categories_at.entry(span.1).or_default().insert(label.to_string());
        }
    });
    set
}

/// Inserts the boundary pipe immediately after each boundary offset.
///
/// Offsets are measured against the pipe-free view of `text`, so re-applying
/// the same boundaries to already-marked text changes nothing and stripping
/// all pipes from the output recovers the pipe-free input exactly.
pub fn inject_pipes(text: &str, boundaries: &BoundarySet) -> Result<String, SyntaxError> {
    let mut base: Vec<char> = Vec::with_capacity(text.chars().count());
    let mut marks: BTreeSet<usize> = BTreeSet::new();
    for c in text.chars() {
        if c == PIPE_CHAR {
            marks.insert(base.len());
        } else {
            base.push(c);
        }
    }
    for offset in boundaries.positions() {
        if offset > base.len() {
            return Err(SyntaxError::OffsetOutOfRange { offset, len: base.len() });
        }
        marks.insert(offset);
    }
    let mut out = String::with_capacity(base.len() + marks.len());
    if marks.contains(&0) {
        out.push(PIPE_CHAR);
    }
    for (i, c) in base.iter().enumerate() {
        out.push(*c);
        if marks.contains(&(i + 1)) {
            out.push(PIPE_CHAR);
        }
    }
    Ok(out)
}

/// Drops every boundary pipe from `text`.
pub fn strip_pipes(text: &str) -> String {
    text.chars().filter(|&c| c != PIPE_CHAR).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIXTURE: &str = "(S (NP 아버지가) (VP (NP 방에) (VP 들어가신다)))";

    #[test]
    fn reads_tree_with_spans() {
        let tree = parse_bracketed("(S (NP 아버지가) (VP 방에 들어가신다))").unwrap();
        assert_eq!(tree.sentence(), "아버지가 방에 들어가신다");
        let ParseTree::Phrase { label, children, span } = &tree else {
            panic!("root is a phrase")
        };
        assert_eq!(label, "S");
        assert_eq!(*span, (0, 13));
        assert_eq!(children[0].span(), (0, 4));
        assert_eq!(children[1].span(), (5, 13));
    }

    #[test]
    fn single_node_tree() {
        let tree = parse_bracketed("(NP 사과)").unwrap();
        assert_eq!(tree.span(), (0, 2));
        assert_eq!(tree.sentence(), "사과");
    }

    #[test]
    fn truncated_input_errors_with_position() {
        assert_eq!(
            parse_bracketed("(S"),
            Err(SyntaxError::Unbalanced { expected: "')'", position: 2 })
        );
    }

    #[test]
    fn rejects_empty_label_and_empty_constituent() {
        assert!(matches!(parse_bracketed("(( 가))"), Err(SyntaxError::EmptyLabel { .. })));
        assert!(matches!(
            parse_bracketed("(S (NP))"),
            Err(SyntaxError::NoChildren { .. })
        ));
        assert!(matches!(
            parse_bracketed("(NP 사과) x"),
            Err(SyntaxError::TrailingContent { .. })
        ));
    }

    #[test]
    fn nested_ends_merge_to_one_boundary() {
        let tree = parse_bracketed(FIXTURE).unwrap();
        let set = extract_boundaries(&tree, &["NP", "VP"]);
        // Ends after 아버지가 (4), 방에 (7), 들어가신다 (13); outer and inner
        // VP both end at 13 and merge.
        assert_eq!(set.positions().collect::<Vec<_>>(), vec![4, 7, 13]);
        assert_eq!(
            set.categories_at(13).unwrap().iter().collect::<Vec<_>>(),
            vec!["VP"]
        );
    }

    #[test]
    fn unmatched_categories_give_empty_set() {
        let tree = parse_bracketed(FIXTURE).unwrap();
        assert!(extract_boundaries(&tree, &["ADJP"]).is_empty());
    }

    #[test]
    fn single_constituent_boundary_at_sentence_end() {
        let tree = parse_bracketed("(NP 사과)").unwrap();
        let set = extract_boundaries(&tree, &["NP"]);
        assert_eq!(set.positions().collect::<Vec<_>>(), vec![2]);
    }

    #[test]
    fn enlarging_categories_never_removes_boundaries() {
        let tree = parse_bracketed(FIXTURE).unwrap();
        let small = extract_boundaries(&tree, &["NP"]);
        let large = extract_boundaries(&tree, &["NP", "VP", "S"]);
        for p in small.positions() {
            assert!(large.contains(p));
        }
    }

    #[test]
    fn injects_pipes_after_selected_ends() {
        let tree = parse_bracketed(FIXTURE).unwrap();
        let set = extract_boundaries(&tree, &["NP", "VP"]);
        let marked = inject_pipes("아버지가 방에 들어가신다", &set).unwrap();
        assert_eq!(marked, "아버지가| 방에| 들어가신다|");
        assert_eq!(marked.matches('|').count(), set.len());
        assert_eq!(strip_pipes(&marked), "아버지가 방에 들어가신다");
    }

    #[test]
    fn empty_boundaries_leave_text_unchanged() {
        let text = "아버지가 방에 들어가신다";
        assert_eq!(inject_pipes(text, &BoundarySet::default()).unwrap(), text);
    }

    #[test]
    fn reinjection_is_idempotent() {
        let tree = parse_bracketed(FIXTURE).unwrap();
        let set = extract_boundaries(&tree, &["NP", "VP"]);
        let once = inject_pipes("아버지가 방에 들어가신다", &set).unwrap();
        let twice = inject_pipes(&once, &set).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn out_of_range_offset_is_an_error() {
        let tree = parse_bracketed("(NP 사과나무밭)").unwrap();
        let set = extract_boundaries(&tree, &["NP"]);
        assert_eq!(
            inject_pipes("사과", &set),
            Err(SyntaxError::OffsetOutOfRange { offset: 5, len: 2 })
        );
    }
}
