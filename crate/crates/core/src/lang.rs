//! Program language: a 16-token vocabulary of typed operators serialized in
//! Polish (prefix) order. Programs are rooted arity-typed trees; a prefix
//! sequence is complete exactly when its pending-operand counter returns to
//! zero. The same counter drives feasibility masks for constrained decoding.

use std::fmt;
use thiserror::Error;

/// Hard cap on serialized program length, decoder specials excluded.
pub const MAX_PROGRAM_LEN: usize = 16;

pub const VOCAB_SIZE: usize = 16;

pub const TOK_NULL: u8 = 0;
pub const TOK_START: u8 = 1;
pub const TOK_END: u8 = 2;
pub const TOK_UNK: u8 = 3;
pub const TOK_SCENE: u8 = 4;
pub const TOK_AND: u8 = 5;
pub const TOK_COLOR_RED: u8 = 6;
pub const TOK_COLOR_GREEN: u8 = 7;
pub const TOK_COLOR_BLUE: u8 = 8;
pub const TOK_SHAPE_CIRCLE: u8 = 9;
pub const TOK_SHAPE_TRIANGLE: u8 = 10;
pub const TOK_SHAPE_SQUARE: u8 = 11;
pub const TOK_ABOVE: u8 = 12;
pub const TOK_BELOW: u8 = 13;
pub const TOK_LEFT_OF: u8 = 14;
pub const TOK_RIGHT_OF: u8 = 15;

/// First non-special token id. Ids below this are <NULL>/<START>/<END>/<UNK>.
pub const FIRST_OPERATOR: u8 = TOK_SCENE;

/// One vocabulary entry: display name plus operand count (None for specials,
/// which never appear inside a serialized program).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenInfo {
    pub id: u8,
    pub name: &'static str,
    pub arity: Option<u8>,
}

const VOCAB: [TokenInfo; VOCAB_SIZE] = [
    TokenInfo { id: TOK_NULL, name: "<NULL>", arity: None },
    TokenInfo { id: TOK_START, name: "<START>", arity: None },
    TokenInfo { id: TOK_END, name: "<END>", arity: None },
    TokenInfo { id: TOK_UNK, name: "<UNK>", arity: None },
    TokenInfo { id: TOK_SCENE, name: "scene", arity: Some(0) },
    TokenInfo { id: TOK_AND, name: "and", arity: Some(2) },
    TokenInfo { id: TOK_COLOR_RED, name: "color[red]", arity: Some(1) },
    TokenInfo { id: TOK_COLOR_GREEN, name: "color[green]", arity: Some(1) },
    TokenInfo { id: TOK_COLOR_BLUE, name: "color[blue]", arity: Some(1) },
    TokenInfo { id: TOK_SHAPE_CIRCLE, name: "shape[circle]", arity: Some(1) },
    TokenInfo { id: TOK_SHAPE_TRIANGLE, name: "shape[triangle]", arity: Some(1) },
    TokenInfo { id: TOK_SHAPE_SQUARE, name: "shape[square]", arity: Some(1) },
    TokenInfo { id: TOK_ABOVE, name: "transform[above]", arity: Some(1) },
    TokenInfo { id: TOK_BELOW, name: "transform[below]", arity: Some(1) },
    TokenInfo { id: TOK_LEFT_OF, name: "transform[left_of]", arity: Some(1) },
    TokenInfo { id: TOK_RIGHT_OF, name: "transform[right_of]", arity: Some(1) },
];

pub fn vocabulary() -> &'static [TokenInfo; VOCAB_SIZE] {
    &VOCAB
}

/// Operand count of a token, or None for specials.
pub fn arity(tok: u8) -> Option<u8> {
    VOCAB.get(tok as usize).and_then(|t| t.arity)
}

pub fn token_name(tok: u8) -> &'static str {
    VOCAB.get(tok as usize).map(|t| t.name).unwrap_or("<?>")
}

pub fn token_by_name(name: &str) -> Option<u8> {
    VOCAB.iter().find(|t| t.name == name).map(|t| t.id)
}

/// A serialized program: operator ids in prefix order, no specials.
pub type ProgramSeq = Vec<u8>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProgramTree {
    pub token: u8,
    pub children: Vec<ProgramTree>,
}

impl ProgramTree {
    pub fn leaf(token: u8) -> Self {
        ProgramTree { token, children: Vec::new() }
    }

    pub fn node(token: u8, children: Vec<ProgramTree>) -> Self {
        ProgramTree { token, children }
    }

    /// Token count of the serialized form.
    pub fn len(&self) -> usize {
        1 + self.children.iter().map(|c| c.len()).sum::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("empty token sequence")]
    EmptySequence,
    #[error("special token {} at position {at} inside a program body", token_name(*.token))]
    SpecialToken { at: usize, token: u8 },
    #[error("unknown token id {token} at position {at}")]
    UnknownToken { at: usize, token: u8 },
    #[error("sequence ends with {missing} operand(s) still pending")]
    Underflow { missing: usize },
    #[error("trailing tokens start at position {at}: program already complete")]
    TrailingTokens { at: usize },
    #[error("sequence length {len} exceeds the {MAX_PROGRAM_LEN}-token cap")]
    TooLong { len: usize },
}

/// Parse a prefix-serialized sequence into its tree.
pub fn parse_prefix(seq: &[u8]) -> Result<ProgramTree, ParseError> {
    if seq.is_empty() {
        return Err(ParseError::EmptySequence);
    }
    if seq.len() > MAX_PROGRAM_LEN {
        return Err(ParseError::TooLong { len: seq.len() });
    }
    let mut pos = 0usize;
    let tree = parse_at(seq, &mut pos)?;
    if pos != seq.len() {
        return Err(ParseError::TrailingTokens { at: pos });
    }
    Ok(tree)
}

fn parse_at(seq: &[u8], pos: &mut usize) -> Result<ProgramTree, ParseError> {
    let at = *pos;
    let Some(&tok) = seq.get(at) else {
        // Ran out of tokens while an operator still wanted operands. The
        // caller computes the precise pending count for the error message.
        return Err(ParseError::Underflow { missing: remaining_pending(seq) });
    };
    if tok as usize >= VOCAB_SIZE {
        return Err(ParseError::UnknownToken { at, token: tok });
    }
    let Some(a) = arity(tok) else {
        return Err(ParseError::SpecialToken { at, token: tok });
    };
    *pos += 1;
    let mut children = Vec::with_capacity(a as usize);
    for _ in 0..a {
        children.push(parse_at(seq, pos)?);
    }
    Ok(ProgramTree { token: tok, children })
}

/// Pending-operand count after consuming the whole sequence (for Underflow
/// reporting): start at 1, each operator of arity a maps p to p - 1 + a.
fn remaining_pending(seq: &[u8]) -> usize {
    let mut p = 1i64;
    for &tok in seq {
        let a = arity(tok).unwrap_or(0) as i64;
        p = p - 1 + a;
        if p <= 0 {
            // TrailingTokens or special-token errors fire before this is used.
            break;
        }
    }
    p.max(0) as usize
}

/// Serialize a tree back to prefix order.
pub fn serialize(tree: &ProgramTree) -> ProgramSeq {
    let mut out = Vec::with_capacity(tree.len());
    push_prefix(tree, &mut out);
    out
}

fn push_prefix(tree: &ProgramTree, out: &mut Vec<u8>) {
    out.push(tree.token);
    for c in &tree.children {
        push_prefix(c, out);
    }
}

pub fn validate_prefix(seq: &[u8]) -> bool {
    parse_prefix(seq).is_ok()
}

pub fn exact_match(a: &[u8], b: &[u8]) -> bool {
    a == b
}

/// Incremental prefix-decode state. Tracks the pending-operand counter so a
/// decoder can mask infeasible tokens before sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecodeState {
    pending: usize,
    len: usize,
}

impl Default for DecodeState {
    fn default() -> Self {
        Self::new()
    }
}

impl DecodeState {
    pub fn new() -> Self {
        DecodeState { pending: 1, len: 0 }
    }

    /// True once the sequence parses as a complete program.
    pub fn complete(&self) -> bool {
        self.pending == 0 && self.len > 0
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn pending(&self) -> usize {
        self.pending
    }

    /// Whether emitting `tok` next keeps the sequence completable within
    /// `max_len` operator tokens. Specials are never feasible except <END>,
    /// which is feasible exactly when the program is complete.
    pub fn token_feasible(&self, tok: u8, max_len: usize) -> bool {
        if tok == TOK_END {
            return self.complete();
        }
        let Some(a) = arity(tok) else { return false };
        if self.pending == 0 || self.len >= max_len {
            return false;
        }
        let after = self.pending - 1 + a as usize;
        // Completing needs one more token per pending operand.
        after <= max_len - self.len - 1
    }

    /// Feasibility mask over all 16 token ids.
    pub fn feasible_mask(&self, max_len: usize) -> [bool; VOCAB_SIZE] {
        let mut mask = [false; VOCAB_SIZE];
        for t in 0..VOCAB_SIZE as u8 {
            mask[t as usize] = self.token_feasible(t, max_len);
        }
        mask
    }

    /// Advance past one token. Panics if the token is not feasible at any
    /// length (specials); length feasibility is the caller's contract.
    pub fn step(&mut self, tok: u8) {
        let a = arity(tok).unwrap_or_else(|| panic!("step on special token {tok}")) as usize;
        assert!(self.pending > 0, "step after completion");
        self.pending = self.pending - 1 + a;
        self.len += 1;
    }
}

/// Feasible continuations of `prefix` under the `max_len` cap. Returns None
/// when the prefix itself is not a valid strict prefix (counter dead).
pub fn feasible_next(prefix: &[u8], max_len: usize) -> Option<[bool; VOCAB_SIZE]> {
    let mut st = DecodeState::new();
    for &tok in prefix {
        if !st.token_feasible(tok, max_len) {
            return None;
        }
        st.step(tok);
    }
    Some(st.feasible_mask(max_len))
}

/// Human-readable serialization: token names joined by single spaces.
pub fn to_text(seq: &[u8]) -> String {
    seq.iter().map(|&t| token_name(t)).collect::<Vec<_>>().join(" ")
}

/// Inverse of `to_text`; whitespace-separated token names.
pub fn from_text(text: &str) -> Result<ProgramSeq, UnknownName> {
    text.split_whitespace()
        .map(|w| token_by_name(w).ok_or_else(|| UnknownName(w.to_string())))
        .collect()
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("unknown token name {0:?}")]
pub struct UnknownName(pub String);

impl fmt::Display for ProgramTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", to_text(&serialize(self)))
    }
}
