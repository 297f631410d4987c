//! Token vocabularies for the three streams: I/O characters, program tokens and latent codes.
//!
//! Ids 0, 1 and 2 are PAD, BOS and EOS in every stream. Program tokens are built from the
//! grammar, never from data, so a dialect always yields the same vocabulary.
//!
//! Program tokenization (the `|` separator is not a token):
//! - `Const(c)` is `Const` followed by the character token `c`.
//! - toy `GetSpan` is a single token.
//! - full `SubStr` and `GetSpan` are a start token and an end token.
//! - a standalone nesting op is one token; a composed one is an `op(` token followed by the inner tokens.

use std::collections::HashMap;
use std::fmt;

use super::{Task, VocabError};
use crate::dsl::*;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
/// Number of reserved ids at the start of every stream.
pub const RESERVED: usize = 3;

const RESERVED_NAMES: [&str; RESERVED] = ["<pad>", "<bos>", "<eos>"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stream {
    Char,
    Program,
    Latent,
}

impl fmt::Display for Stream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stream::Char => "character",
            Stream::Program => "program",
            Stream::Latent => "latent",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ProgramToken {
    Const,
    Char(char),
    ToySpan(Span),
    SubStrStart(Position),
    SubStrEnd(Position),
    SpanStart(RegexToken, Index, Boundary),
    SpanEnd(RegexToken, Index, Boundary),
    Op(NestingOp),
    /// Outer operation of a composition; the inner expression follows.
    Outer(NestingOp),
}

impl fmt::Display for ProgramToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProgramToken::Const => f.write_str("Const"),
            ProgramToken::Char(c) => write!(f, "{c}"),
            ProgramToken::ToySpan(s) => write!(f, "{}", Expression::GetSpan(*s)),
            ProgramToken::SubStrStart(k) => write!(f, "SubStr_{}", k.get()),
            ProgramToken::SubStrEnd(k) => write!(f, "SubStrEnd_{}", k.get()),
            ProgramToken::SpanStart(r, i, b) => write!(f, "GetSpan_{r}_{}_{}", i.get(), b.name()),
            ProgramToken::SpanEnd(r, i, b) => write!(f, "GetSpanEnd_{r}_{}_{}", i.get(), b.name()),
            ProgramToken::Op(n) => write!(f, "{}", Expression::Nesting(*n)),
            ProgramToken::Outer(n) => write!(f, "{}(", Expression::Nesting(*n)),
        }
    }
}

fn all_nesting_ops() -> Vec<NestingOp> {
    let mut ops = Vec::new();
    for t in TypeToken::ALL {
        ops.extend(Index::all().map(|i| NestingOp::GetToken(t, i)));
    }
    ops.extend(CaseKind::ALL.map(NestingOp::ToCase));
    for d1 in Delimiter::all() {
        ops.extend(Delimiter::all().map(|d2| NestingOp::Replace(d1, d2)));
    }
    ops.push(NestingOp::Trim);
    ops.extend(RegexToken::all().into_iter().map(NestingOp::GetUpto));
    ops.extend(RegexToken::all().into_iter().map(NestingOp::GetFrom));
    for t in TypeToken::ALL {
        ops.extend(Index::all().map(|i| NestingOp::GetFirst(t, i)));
    }
    ops.extend(TypeToken::ALL.map(NestingOp::GetAll));
    ops
}

fn grammar_tokens(dialect: Dialect) -> Vec<ProgramToken> {
    let mut out = Vec::new();
    match dialect {
        Dialect::Toy => {
            let regexes = RegexToken::toy();
            let indices: Vec<Index> = TOY_INDICES.iter().map(|&i| Index::new(i).unwrap()).collect();
            for &r1 in &regexes {
                for &i1 in &indices {
                    for &r2 in &regexes {
                        for &i2 in &indices {
                            out.push(ProgramToken::ToySpan(Span::toy(r1, i1, r2, i2)));
                        }
                    }
                }
            }
        }
        Dialect::Full => {
            out.push(ProgramToken::Const);
            out.extend(
                ('A'..='Z').chain('a'..='z').chain('0'..='9').chain(DELIMITERS).map(ProgramToken::Char),
            );
            out.extend(Position::all().map(ProgramToken::SubStrStart));
            out.extend(Position::all().map(ProgramToken::SubStrEnd));
            for end in [false, true] {
                for r in RegexToken::all() {
                    for i in Index::all() {
                        for b in [Boundary::Start, Boundary::End] {
                            out.push(if end {
                                ProgramToken::SpanEnd(r, i, b)
                            } else {
                                ProgramToken::SpanStart(r, i, b)
                            });
                        }
                    }
                }
            }
            let ops = all_nesting_ops();
            out.extend(ops.iter().copied().map(ProgramToken::Op));
            out.extend(ops.into_iter().map(ProgramToken::Outer));
        }
    }
    out
}

/// Id maps for the character, program and latent streams of one dialect and codebook size.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    dialect: Dialect,
    n_codes: usize,
    program: Vec<ProgramToken>,
    program_ids: HashMap<ProgramToken, usize>,
}

/// Printable ASCII, the only characters allowed in I/O strings.
const FIRST_CHAR: u32 = 32;
const LAST_CHAR: u32 = 126;

impl Vocabulary {
    pub fn new(dialect: Dialect, n_codes: usize) -> Self {
        let program = grammar_tokens(dialect);
        let program_ids = program.iter().enumerate().map(|(i, &t)| (t, i + RESERVED)).collect();
        Vocabulary { dialect, n_codes, program, program_ids }
    }

    pub fn dialect(&self) -> Dialect {
        self.dialect
    }

    pub fn n_codes(&self) -> usize {
        self.n_codes
    }

    pub fn size(&self, stream: Stream) -> usize {
        RESERVED
            + match stream {
                Stream::Char => (LAST_CHAR - FIRST_CHAR + 1) as usize,
                Stream::Program => self.program.len(),
                Stream::Latent => self.n_codes,
            }
    }

    pub fn char_id(&self, c: char) -> Result<usize, VocabError> {
        let u = c as u32;
        if (FIRST_CHAR..=LAST_CHAR).contains(&u) {
            Ok(RESERVED + (u - FIRST_CHAR) as usize)
        } else {
            Err(VocabError::UnknownToken { stream: Stream::Char, token: c.to_string() })
        }
    }

    pub fn id_char(&self, id: usize) -> Option<char> {
        let off = id.checked_sub(RESERVED)? as u32;
        char::from_u32(FIRST_CHAR + off).filter(|_| off <= LAST_CHAR - FIRST_CHAR)
    }

    pub fn program_id(&self, t: &ProgramToken) -> Result<usize, VocabError> {
        self.program_ids
            .get(t)
            .copied()
            .ok_or_else(|| VocabError::UnknownToken { stream: Stream::Program, token: t.to_string() })
    }

    pub fn program_token(&self, id: usize) -> Option<ProgramToken> {
        id.checked_sub(RESERVED).and_then(|i| self.program.get(i)).copied()
    }

    /// Latent id of codebook row `k`.
    pub fn latent_id(&self, k: usize) -> usize {
        RESERVED + k
    }

    /// Codebook row of a latent id, if it is not reserved.
    pub fn code_of(&self, id: usize) -> Option<usize> {
        id.checked_sub(RESERVED).filter(|&k| k < self.n_codes)
    }

    /// Display name of an id in `stream`.
    pub fn token_name(&self, stream: Stream, id: usize) -> String {
        if id < RESERVED {
            return RESERVED_NAMES[id].to_string();
        }
        match stream {
            Stream::Char => self.id_char(id).map(String::from),
            Stream::Program => self.program_token(id).map(|t| t.to_string()),
            Stream::Latent => self.code_of(id).map(|_| format!("TOK_{id}")),
        }
        .unwrap_or_else(|| format!("<unk:{id}>"))
    }

    /// All tokens of `stream`, one per line in id order.
    pub fn dump(&self, stream: Stream) -> String {
        let mut out = String::new();
        for id in 0..self.size(stream) {
            out.push_str(&self.token_name(stream, id));
            out.push('\n');
        }
        out
    }
}

/// BOS/EOS framed character ids of every example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedIo {
    pub inputs: Vec<Vec<usize>>,
    pub outputs: Vec<Vec<usize>>,
}

fn encode_chars(s: &str, vocab: &Vocabulary) -> Result<Vec<usize>, VocabError> {
    let mut ids = vec![BOS];
    for c in s.chars() {
        ids.push(vocab.char_id(c)?);
    }
    ids.push(EOS);
    Ok(ids)
}

pub fn encode_io(task: &Task, vocab: &Vocabulary) -> Result<EncodedIo, VocabError> {
    Ok(EncodedIo {
        inputs: task.inputs.iter().map(|s| encode_chars(s, vocab)).collect::<Result<_, _>>()?,
        outputs: task.outputs.iter().map(|s| encode_chars(s, vocab)).collect::<Result<_, _>>()?,
    })
}

/// Inverse of the character encoding of one string; reserved ids are skipped.
pub fn decode_io(ids: &[usize], vocab: &Vocabulary) -> Result<String, VocabError> {
    ids.iter()
        .filter(|&&id| id >= RESERVED)
        .map(|&id| {
            vocab
                .id_char(id)
                .ok_or_else(|| VocabError::UnknownToken { stream: Stream::Char, token: id.to_string() })
        })
        .collect()
}

/// Token sequence of `p` under the vocabulary's dialect.
pub fn program_tokens(p: &Program, vocab: &Vocabulary) -> Vec<ProgramToken> {
    program_tokens_with_offsets(p, vocab.dialect).0
}

/// Tokens of `p` and the token offset at which each expression starts.
pub fn program_tokens_with_offsets(p: &Program, dialect: Dialect) -> (Vec<ProgramToken>, Vec<usize>) {
    let mut out = Vec::new();
    let mut offsets = Vec::with_capacity(p.len());
    let span = |s: &Span, out: &mut Vec<ProgramToken>| match dialect {
        Dialect::Toy => out.push(ProgramToken::ToySpan(*s)),
        Dialect::Full => {
            out.push(ProgramToken::SpanStart(s.r1, s.i1, s.b1));
            out.push(ProgramToken::SpanEnd(s.r2, s.i2, s.b2));
        }
    };
    let substr = |k1: Position, k2: Position, out: &mut Vec<ProgramToken>| {
        out.push(ProgramToken::SubStrStart(k1));
        out.push(ProgramToken::SubStrEnd(k2));
    };
    for e in p.expressions() {
        offsets.push(out.len());
        match e {
            Expression::ConstStr(c) => {
                out.push(ProgramToken::Const);
                out.push(ProgramToken::Char(*c));
            }
            Expression::SubStr(k1, k2) => substr(*k1, *k2, &mut out),
            Expression::GetSpan(s) => span(s, &mut out),
            Expression::Nesting(n) => out.push(ProgramToken::Op(*n)),
            Expression::Compose(outer, inner) => {
                out.push(ProgramToken::Outer(*outer));
                match inner {
                    Inner::Nesting(n) => out.push(ProgramToken::Op(*n)),
                    Inner::SubStr(k1, k2) => substr(*k1, *k2, &mut out),
                    Inner::GetSpan(s) => span(s, &mut out),
                }
            }
        }
    }
    (out, offsets)
}

/// `[BOS, tokens.., EOS]`.
pub fn encode_program(p: &Program, vocab: &Vocabulary) -> Result<Vec<usize>, VocabError> {
    let mut ids = vec![BOS];
    for t in program_tokens(p, vocab) {
        ids.push(vocab.program_id(&t)?);
    }
    ids.push(EOS);
    Ok(ids)
}

/// Rebuilds a program from ids. Leading BOS is skipped and decoding stops at the first EOS.
pub fn decode_program(ids: &[usize], vocab: &Vocabulary) -> Result<Program, VocabError> {
    let malformed = |reason: &str| VocabError::Malformed { stream: Stream::Program, reason: reason.to_string() };
    let body = ids.strip_prefix(&[BOS]).unwrap_or(ids);
    let body = &body[..body.iter().position(|&id| id == EOS).unwrap_or(body.len())];
    let mut tokens = Vec::with_capacity(body.len());
    for &id in body {
        match vocab.program_token(id) {
            Some(t) => tokens.push(t),
            None => return Err(malformed(&format!("reserved or unknown id {id} inside program"))),
        }
    }
    let mut it = tokens.into_iter().peekable();
    let mut expressions = Vec::new();
    while let Some(t) = it.next() {
        let e = match t {
            ProgramToken::Const => match it.next() {
                Some(ProgramToken::Char(c)) => Expression::ConstStr(c),
                _ => return Err(malformed("Const must be followed by a character")),
            },
            ProgramToken::ToySpan(s) => Expression::GetSpan(s),
            ProgramToken::SubStrStart(k1) => match it.next() {
                Some(ProgramToken::SubStrEnd(k2)) => Expression::SubStr(k1, k2),
                _ => return Err(malformed("SubStr start without end")),
            },
            ProgramToken::SpanStart(r1, i1, b1) => match it.next() {
                Some(ProgramToken::SpanEnd(r2, i2, b2)) => Expression::GetSpan(Span { r1, i1, b1, r2, i2, b2 }),
                _ => return Err(malformed("GetSpan start without end")),
            },
            ProgramToken::Op(n) => Expression::Nesting(n),
            ProgramToken::Outer(outer) => {
                let inner = match it.next() {
                    Some(ProgramToken::Op(n)) => Inner::Nesting(n),
                    Some(ProgramToken::SubStrStart(k1)) => match it.next() {
                        Some(ProgramToken::SubStrEnd(k2)) => Inner::SubStr(k1, k2),
                        _ => return Err(malformed("SubStr start without end")),
                    },
                    Some(ProgramToken::SpanStart(r1, i1, b1)) => match it.next() {
                        Some(ProgramToken::SpanEnd(r2, i2, b2)) => Inner::GetSpan(Span { r1, i1, b1, r2, i2, b2 }),
                        _ => return Err(malformed("GetSpan start without end")),
                    },
                    _ => return Err(malformed("composition without an inner expression")),
                };
                Expression::Compose(outer, inner)
            }
            ProgramToken::Char(_) | ProgramToken::SubStrEnd(_) | ProgramToken::SpanEnd(_, _, _) => {
                return Err(malformed(&format!("unexpected token {t}")))
            }
        };
        expressions.push(e);
    }
    Program::new(expressions).map_err(|e| malformed(&e.to_string()))
}

/// Right-pads every sequence with PAD to the longest length.
pub fn pad_batch(seqs: &[Vec<usize>]) -> Vec<Vec<usize>> {
    let max = seqs.iter().map(Vec::len).max().unwrap_or(0);
    seqs.iter()
        .map(|s| {
            let mut s = s.clone();
            s.resize(max, PAD);
            s
        })
        .collect()
}
