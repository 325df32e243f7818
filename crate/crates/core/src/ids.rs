//! Ideographic Description Sequences.
//!
//! An IDS writes a character's spatial composition in prefix notation:
//! an Ideographic Description Character (U+2FF0..U+2FFB) followed by its
//! two or three operands, each of which is a component or another IDS.
//! `慧` is `⿱彗心`, `彗` is `⿱⿰丰丰彐`.
//!
//! The dictionary files this module reads use the cjkvi layout:
//!
//! ```text
//! U+6167	慧	⿱彗心
//! U+4E30	丰	⿻三丨[GJK]	⿻丿⿻二丨[TV]
//! ```
#![allow(clippy::tabs_in_doc_comments)]

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;
use std::path::Path;

use thiserror::Error;

use crate::error::{Error, Result};

/// Nesting cap for parsed trees.
pub const MAX_DEPTH: usize = 32;

/// Longest span accepted for `&ENTITY;` and `{NN}` placeholder references.
const MAX_REF_LEN: usize = 32;

/// One of the twelve Ideographic Description Characters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct IdcOperator(char);

impl IdcOperator {
    pub const FIRST: char = '\u{2FF0}';
    pub const LAST: char = '\u{2FFB}';

    pub fn from_char(c: char) -> Option<Self> {
        (Self::FIRST..=Self::LAST).contains(&c).then_some(IdcOperator(c))
    }

    pub fn all() -> impl Iterator<Item = IdcOperator> {
        (Self::FIRST..=Self::LAST).map(IdcOperator)
    }

    pub fn codepoint(self) -> char {
        self.0
    }

    /// ⿲ and ⿳ take three operands, the rest take two.
    pub fn arity(self) -> usize {
        match self.0 {
            '\u{2FF2}' | '\u{2FF3}' => 3,
            _ => 2,
        }
    }
}

impl fmt::Display for IdcOperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A leaf of a decomposition: an encoded character, or an opaque placeholder
/// the dictionary uses for components with no codepoint of their own.
///
/// The derived ordering puts every `Char` before every `Opaque`, chars by
/// scalar value and opaque spans lexicographically.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Component {
    Char(char),
    Opaque(String),
}

impl Component {
    /// Classifies a lone character the same way the tokenizer would.
    pub fn from_char(c: char) -> Self {
        if is_opaque_char(c) {
            Component::Opaque(c.to_string())
        } else {
            Component::Char(c)
        }
    }

    /// Parses the text of a single component (as written in a bank file).
    pub fn from_text(text: &str) -> Option<Self> {
        let tokens = tokenize_ids(text);
        match tokens.as_slice() {
            [tok] => match &tok.kind {
                TokenKind::Component(c) => Some(Component::Char(*c)),
                TokenKind::Opaque(s) => Some(Component::Opaque(s.clone())),
                TokenKind::Operator(_) => None,
            },
            _ => None,
        }
    }

    pub fn as_char(&self) -> Option<char> {
        match self {
            Component::Char(c) => Some(*c),
            Component::Opaque(_) => None,
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Component::Char(c) => write!(f, "{c}"),
            Component::Opaque(s) => f.write_str(s),
        }
    }
}

/// Placeholders for unencoded components: fullwidth question mark,
/// circled numbers, and private-use codepoints.
pub fn is_opaque_char(c: char) -> bool {
    matches!(c,
        '\u{FF1F}'
        | '\u{2460}'..='\u{24FF}'
        | '\u{E000}'..='\u{F8FF}'
        | '\u{F0000}'..='\u{FFFFD}'
        | '\u{100000}'..='\u{10FFFD}')
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TokenKind {
    Operator(IdcOperator),
    Component(char),
    Opaque(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdsToken {
    pub kind: TokenKind,
    /// Byte range of the token in the tokenized text.
    pub span: Range<usize>,
}

/// Splits an IDS string into operators, components and opaque spans.
///
/// Never fails: anything that is not an operator or a recognised
/// placeholder is a component. The spans tile the input exactly.
pub fn tokenize_ids(text: &str) -> Vec<IdsToken> {
    let mut tokens = Vec::new();
    let mut pos = 0;
    while let Some(c) = text[pos..].chars().next() {
        let start = pos;
        let (kind, len) = if let Some(op) = IdcOperator::from_char(c) {
            (TokenKind::Operator(op), c.len_utf8())
        } else if let Some(len) = reference_len(&text[pos..]) {
            (TokenKind::Opaque(text[pos..pos + len].to_string()), len)
        } else if is_opaque_char(c) {
            (TokenKind::Opaque(c.to_string()), c.len_utf8())
        } else {
            (TokenKind::Component(c), c.len_utf8())
        };
        pos += len;
        tokens.push(IdsToken { kind, span: start..pos });
    }
    tokens
}

/// Length of an `&CDP-8B7C;` or `{12}` reference at the start of `s`.
fn reference_len(s: &str) -> Option<usize> {
    let close = match s.as_bytes().first()? {
        b'&' => b';',
        b'{' => b'}',
        _ => return None,
    };
    let body = s.as_bytes().iter().skip(1).take(MAX_REF_LEN);
    for (i, &b) in body.enumerate() {
        if b == close {
            return (i > 0).then_some(i + 2);
        }
        if !(b.is_ascii_alphanumeric() || b == b'-' || b == b'_' || b == b'+') {
            return None;
        }
    }
    None
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum IdsNode {
    Leaf(Component),
    Internal { op: IdcOperator, children: Vec<IdsNode> },
}

impl IdsNode {
    pub fn leaf(c: char) -> Self {
        IdsNode::Leaf(Component::from_char(c))
    }

    pub fn depth(&self) -> usize {
        match self {
            IdsNode::Leaf(_) => 1,
            IdsNode::Internal { children, .. } => 1 + children.iter().map(IdsNode::depth).max().unwrap_or(0),
        }
    }

    /// Every leaf in prefix order, duplicates included.
    pub fn leaves(&self) -> Vec<&Component> {
        let mut out = Vec::new();
        self.collect_leaves(&mut out);
        out
    }

    fn collect_leaves<'a>(&'a self, out: &mut Vec<&'a Component>) {
        match self {
            IdsNode::Leaf(c) => out.push(c),
            IdsNode::Internal { children, .. } => {
                for child in children {
                    child.collect_leaves(out);
                }
            }
        }
    }

    /// Checks arity, depth, and that every leaf is written canonically.
    pub fn validate(&self) -> std::result::Result<(), IdsError> {
        self.validate_at(1)
    }

    fn validate_at(&self, depth: usize) -> std::result::Result<(), IdsError> {
        if depth > MAX_DEPTH {
            return Err(IdsError::DepthExceeded);
        }
        match self {
            IdsNode::Leaf(Component::Char(c)) => {
                if IdcOperator::from_char(*c).is_some() || is_opaque_char(*c) {
                    return Err(IdsError::InvalidLeaf(c.to_string()));
                }
            }
            IdsNode::Leaf(Component::Opaque(s)) => {
                let toks = tokenize_ids(s);
                if !matches!(toks.as_slice(), [t] if matches!(t.kind, TokenKind::Opaque(_))) {
                    return Err(IdsError::InvalidLeaf(s.clone()));
                }
            }
            IdsNode::Internal { op, children } => {
                if children.len() != op.arity() {
                    return Err(IdsError::ArityMismatch {
                        op: *op,
                        found: children.len(),
                    });
                }
                for child in children {
                    child.validate_at(depth + 1)?;
                }
            }
        }
        Ok(())
    }
}

impl fmt::Display for IdsNode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IdsNode::Leaf(c) => write!(f, "{c}"),
            IdsNode::Internal { op, children } => {
                write!(f, "{op}")?;
                children.iter().try_for_each(|c| write!(f, "{c}"))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum IdsError {
    #[error("empty IDS")]
    Empty,
    #[error("operator `{op}` at token {at} is missing operands")]
    UnexpectedEnd { op: IdcOperator, at: usize },
    #[error("{count} trailing token(s) after a complete IDS, starting at token {at}")]
    TrailingTokens { at: usize, count: usize },
    #[error("IDS nesting deeper than {MAX_DEPTH}")]
    DepthExceeded,
    #[error("operator `{op}` expects {} operands, found {found}", .op.arity())]
    ArityMismatch { op: IdcOperator, found: usize },
    #[error("`{0}` is not a valid leaf component")]
    InvalidLeaf(String),
}

/// Prefix-notation parse that must consume every token.
pub fn parse_ids(tokens: &[IdsToken]) -> std::result::Result<IdsNode, IdsError> {
    if tokens.is_empty() {
        return Err(IdsError::Empty);
    }
    let mut pos = 0;
    let node = parse_node(tokens, &mut pos, 1)?;
    if pos < tokens.len() {
        return Err(IdsError::TrailingTokens {
            at: pos,
            count: tokens.len() - pos,
        });
    }
    Ok(node)
}

fn parse_node(tokens: &[IdsToken], pos: &mut usize, depth: usize) -> std::result::Result<IdsNode, IdsError> {
    if depth > MAX_DEPTH {
        return Err(IdsError::DepthExceeded);
    }
    let at = *pos;
    // Callers only recurse while tokens remain.
    let token = &tokens[at];
    *pos += 1;
    match &token.kind {
        TokenKind::Component(c) => Ok(IdsNode::Leaf(Component::Char(*c))),
        TokenKind::Opaque(s) => Ok(IdsNode::Leaf(Component::Opaque(s.clone()))),
        TokenKind::Operator(op) => {
            let mut children = Vec::with_capacity(op.arity());
            for _ in 0..op.arity() {
                if *pos >= tokens.len() {
                    return Err(IdsError::UnexpectedEnd { op: *op, at });
                }
                children.push(parse_node(tokens, pos, depth + 1)?);
            }
            Ok(IdsNode::Internal { op: *op, children })
        }
    }
}

pub fn parse_ids_str(text: &str) -> std::result::Result<IdsNode, IdsError> {
    parse_ids(&tokenize_ids(text))
}

pub fn serialize_ids(node: &IdsNode) -> String {
    node.to_string()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdsEntry {
    pub codepoint: u32,
    pub ch: char,
    pub ids: IdsNode,
    pub source_tags: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LoadWarning {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for LoadWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

/// Character → decompositions, in file order. Only the first entry of each
/// character drives radical extraction; the rest are kept for inspection.
#[derive(Clone, Debug, Default)]
pub struct DecompositionTable {
    entries: BTreeMap<char, Vec<IdsEntry>>,
    warnings: Vec<LoadWarning>,
}

impl DecompositionTable {
    pub fn get(&self, c: char) -> Option<&[IdsEntry]> {
        self.entries.get(&c).map(Vec::as_slice)
    }

    pub fn first(&self, c: char) -> Option<&IdsEntry> {
        self.entries.get(&c).and_then(|v| v.first())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (char, &[IdsEntry])> {
        self.entries.iter().map(|(c, v)| (*c, v.as_slice()))
    }

    pub fn warnings(&self) -> &[LoadWarning] {
        &self.warnings
    }

    pub fn insert(&mut self, entry: IdsEntry) {
        self.entries.entry(entry.ch).or_default().push(entry);
    }

    /// Parses dictionary text. Bad lines become warnings; a table with no
    /// valid entry at all is an error.
    pub fn parse(text: &str) -> Result<Self> {
        let mut table = DecompositionTable::default();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') || line.starts_with(";;") {
                continue;
            }
            match parse_line(line) {
                Ok((entries, field_warnings)) => {
                    for message in field_warnings {
                        table.warnings.push(LoadWarning { line: line_no, message });
                    }
                    for e in entries {
                        table.insert(e);
                    }
                }
                Err(message) => table.warnings.push(LoadWarning { line: line_no, message }),
            }
        }
        if table.is_empty() {
            return Err(Error::EmptyTable);
        }
        Ok(table)
    }
}

pub fn load_ids_table(path: impl AsRef<Path>) -> Result<DecompositionTable> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::unreadable(path, e))?;
    DecompositionTable::parse(&text)
}

type ParsedLine = (Vec<IdsEntry>, Vec<String>);

fn parse_line(line: &str) -> std::result::Result<ParsedLine, String> {
    let mut fields = line.split('\t');
    let cp_field = fields.next().unwrap_or_default();
    let char_field = fields.next().ok_or("missing character column")?;
    let codepoint = cp_field
        .strip_prefix("U+")
        .and_then(|hex| u32::from_str_radix(hex, 16).ok())
        .ok_or_else(|| format!("bad codepoint `{cp_field}`"))?;
    let mut chars = char_field.chars();
    let ch = match (chars.next(), chars.next()) {
        (Some(c), None) => c,
        _ => return Err(format!("expected one character, got `{char_field}`")),
    };
    if ch as u32 != codepoint {
        return Err(format!("character `{ch}` does not match {cp_field}"));
    }

    let mut entries = Vec::new();
    let mut warnings = Vec::new();
    let mut saw_field = false;
    for field in fields.filter(|f| !f.trim().is_empty()) {
        saw_field = true;
        let (ids_text, source_tags) = split_source_tags(field.trim());
        match parse_ids_str(ids_text) {
            Ok(ids) => entries.push(IdsEntry {
                codepoint,
                ch,
                ids,
                source_tags,
            }),
            Err(e) => warnings.push(format!("`{ch}` IDS `{field}`: {e}")),
        }
    }
    if !saw_field {
        return Err(format!("`{ch}` has no IDS column"));
    }
    if entries.is_empty() {
        return Err(warnings.join("; "));
    }
    Ok((entries, warnings))
}

/// Strips `^…$` wrappers and a trailing `[GTK]` or `(GTK)` region tag.
fn split_source_tags(field: &str) -> (&str, Option<String>) {
    let mut body = field;
    let mut tags = None;
    for (open, close) in [('[', ']'), ('(', ')')] {
        if body.ends_with(close) {
            if let Some(start) = body.rfind(open) {
                tags = Some(body[start + 1..body.len() - 1].to_string());
                body = &body[..start];
                break;
            }
        }
    }
    let body = body.strip_prefix('^').unwrap_or(body);
    let body = body.strip_suffix('$').unwrap_or(body);
    (body, tags)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn op(c: char) -> IdcOperator {
        IdcOperator::from_char(c).unwrap()
    }

    fn kinds(text: &str) -> Vec<TokenKind> {
        tokenize_ids(text).into_iter().map(|t| t.kind).collect()
    }

    #[test]
    fn arity_table() {
        let three: Vec<char> = IdcOperator::all()
            .filter(|o| o.arity() == 3)
            .map(IdcOperator::codepoint)
            .collect();
        assert_eq!(three, vec!['⿲', '⿳']);
        assert_eq!(IdcOperator::all().count(), 12);
        assert!(IdcOperator::from_char('\u{2FFC}').is_none());
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(
            kinds("⿱彗心"),
            vec![
                TokenKind::Operator(op('⿱')),
                TokenKind::Component('彗'),
                TokenKind::Component('心'),
            ]
        );
        assert_eq!(kinds("心"), vec![TokenKind::Component('心')]);
        let toks = kinds("⿳亠口冋");
        assert_eq!(toks.len(), 4);
        assert_eq!(toks[0], TokenKind::Operator(op('⿳')));
        let tree = parse_ids_str("⿳亠口冋").unwrap();
        match tree {
            IdsNode::Internal { children, .. } => assert_eq!(children.len(), 3),
            _ => panic!("expected internal node"),
        }
    }

    #[test]
    fn tokenize_placeholders() {
        assert_eq!(
            kinds("⿰？&CDP-8B7C;"),
            vec![
                TokenKind::Operator(op('⿰')),
                TokenKind::Opaque("？".into()),
                TokenKind::Opaque("&CDP-8B7C;".into()),
            ]
        );
        assert_eq!(kinds("⿹②一")[1], TokenKind::Opaque("②".into()));
        assert_eq!(kinds("{12}"), vec![TokenKind::Opaque("{12}".into())]);
        // unterminated references fall back to plain components
        assert_eq!(kinds("&ab").len(), 3);
        assert_eq!(kinds("{}").len(), 2);
    }

    #[test]
    fn parse_examples() {
        assert_eq!(
            parse_ids_str("⿱彗心").unwrap(),
            IdsNode::Internal {
                op: op('⿱'),
                children: vec![IdsNode::leaf('彗'), IdsNode::leaf('心')],
            }
        );
        assert_eq!(parse_ids_str("一").unwrap(), IdsNode::leaf('一'));
        assert!(matches!(
            parse_ids_str("⿰口"),
            Err(IdsError::UnexpectedEnd { at: 0, .. })
        ));
        assert!(matches!(
            parse_ids_str("⿰口口口"),
            Err(IdsError::TrailingTokens { at: 3, count: 1 })
        ));
        assert_eq!(parse_ids(&[]), Err(IdsError::Empty));
    }

    #[test]
    fn depth_cap() {
        let ok = format!("{}一", "⿰一".repeat(MAX_DEPTH - 1));
        assert_eq!(parse_ids_str(&ok).unwrap().depth(), MAX_DEPTH);
        let deep = format!("{}一", "⿰一".repeat(MAX_DEPTH));
        assert_eq!(parse_ids_str(&deep), Err(IdsError::DepthExceeded));
        let runaway = "⿰".repeat(10_000);
        assert_eq!(parse_ids_str(&runaway), Err(IdsError::DepthExceeded));
    }

    #[test]
    fn serialize_examples() {
        let n = parse_ids_str("⿱彗心").unwrap();
        assert_eq!(serialize_ids(&n), "⿱彗心");
        assert_eq!(serialize_ids(&IdsNode::leaf('心')), "心");
    }

    #[test]
    fn source_tag_stripping() {
        assert_eq!(split_source_tags("⿻三丨[GJK]"), ("⿻三丨", Some("GJK".into())));
        assert_eq!(
            split_source_tags("^⿱一⿸丿丶$(GTJKV)"),
            ("⿱一⿸丿丶", Some("GTJKV".into()))
        );
        assert_eq!(split_source_tags("⿱彗心"), ("⿱彗心", None));
    }

    #[test]
    fn table_parse() {
        let text = "# header\nU+6167\t慧\t⿱彗心\n;; note\nU+4E30\t丰\t⿻三丨[GJK]\t⿻丿⿻二丨[TV]\n";
        let table = DecompositionTable::parse(text).unwrap();
        assert_eq!(table.len(), 2);
        assert_eq!(serialize_ids(&table.first('慧').unwrap().ids), "⿱彗心");
        let feng = table.get('丰').unwrap();
        assert_eq!(feng.len(), 2);
        assert_eq!(feng[0].source_tags.as_deref(), Some("GJK"));
        assert_eq!(feng[1].source_tags.as_deref(), Some("TV"));
        assert!(table.warnings().is_empty());
    }

    #[test]
    fn table_collects_bad_lines() {
        let text = "U+6167\t慧\t⿱彗心\nU+4E2D\t中\t⿰口\nU+4E2D\t丰\t⿻三丨\ngarbage\n";
        let table = DecompositionTable::parse(text).unwrap();
        assert_eq!(table.len(), 1);
        let lines: Vec<usize> = table.warnings().iter().map(|w| w.line).collect();
        assert_eq!(lines, vec![2, 3, 4]);
    }

    #[test]
    fn empty_table_is_an_error() {
        assert!(matches!(
            DecompositionTable::parse("# nothing\n"),
            Err(Error::EmptyTable)
        ));
        assert!(matches!(
            load_ids_table("/nonexistent/ids.txt"),
            Err(Error::FileUnreadable { .. })
        ));
    }

    #[test]
    fn component_from_text() {
        assert_eq!(Component::from_text("彐"), Some(Component::Char('彐')));
        assert_eq!(Component::from_text("？"), Some(Component::Opaque("？".into())));
        assert_eq!(
            Component::from_text("&CDP-8B7C;"),
            Some(Component::Opaque("&CDP-8B7C;".into()))
        );
        assert_eq!(Component::from_text("⿰"), None);
        assert_eq!(Component::from_text("ab"), None);
    }

    fn arb_leaf() -> impl Strategy<Value = IdsNode> {
        prop_oneof![
            8 => (0x4E00u32..0x9FFF).prop_map(|cp| IdsNode::leaf(char::from_u32(cp).unwrap())),
            1 => Just(IdsNode::Leaf(Component::Opaque("？".into()))),
            1 => (1u32..20).prop_map(|n| IdsNode::Leaf(Component::Opaque(format!("&CDP-{n:04X};")))),
        ]
    }

    fn arb_tree() -> impl Strategy<Value = IdsNode> {
        arb_leaf().prop_recursive(6, 64, 3, |inner| {
            (0u32..12, prop::collection::vec(inner, 3)).prop_map(|(k, mut kids)| {
                let op = IdcOperator::from_char(char::from_u32(0x2FF0 + k).unwrap()).unwrap();
                kids.truncate(op.arity());
                IdsNode::Internal { op, children: kids }
            })
        })
    }

    proptest! {
        #[test]
        fn round_trip(tree in arb_tree()) {
            prop_assert!(tree.validate().is_ok());
            let text = serialize_ids(&tree);
            let back = parse_ids(&tokenize_ids(&text)).unwrap();
            prop_assert_eq!(back, tree);
        }

        #[test]
        fn spans_tile_input(text in "\\PC{0,40}") {
            let toks = tokenize_ids(&text);
            let mut rebuilt = String::new();
            let mut expected_start = 0;
            for t in &toks {
                prop_assert_eq!(t.span.start, expected_start);
                rebuilt.push_str(&text[t.span.clone()]);
                expected_start = t.span.end;
            }
            prop_assert_eq!(rebuilt, text.clone());
            let _ = parse_ids(&toks);
        }
    }
}
