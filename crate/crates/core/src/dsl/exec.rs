use std::fmt;

use super::ast::*;
use super::regex::{match_spans_chars, occurrence};
use crate::taskgen::Task;

/// Why an expression has no value on a given input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ExecFailure {
    /// Occurrence `index` of the regex does not exist.
    MissingOccurrence { regex: String, index: i64 },
    /// Substring positions select nothing after clamping.
    EmptySubstring,
    /// A span's start lies after its end.
    InvertedSpan,
}

impl fmt::Display for ExecFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExecFailure::MissingOccurrence { regex, index } => {
                write!(f, "occurrence {index} of {regex} not found")
            }
            ExecFailure::EmptySubstring => f.write_str("substring is empty after clamping"),
            ExecFailure::InvertedSpan => f.write_str("span start lies after its end"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("expression {expr_index} failed: {reason}")]
pub struct ExecError {
    pub expr_index: usize,
    pub reason: ExecFailure,
}

/// Runs `p` on `input`, concatenating the value of every expression.
pub fn execute(p: &Program, input: &str) -> Result<String, ExecError> {
    let chars: Vec<char> = input.chars().collect();
    let mut out = String::new();
    for (expr_index, e) in p.expressions().iter().enumerate() {
        let value = eval_expression(e, &chars).map_err(|reason| ExecError { expr_index, reason })?;
        out.extend(value);
    }
    Ok(out)
}

/// True iff `p` maps every example input to its output.
pub fn is_consistent(p: &Program, task: &Task) -> bool {
    task.inputs
        .iter()
        .zip(&task.outputs)
        .all(|(i, o)| matches!(execute(p, i), Ok(ref out) if out == o))
}

type Chars = Vec<char>;

pub(crate) fn eval_expression(e: &Expression, s: &[char]) -> Result<Chars, ExecFailure> {
    match e {
        Expression::ConstStr(c) => Ok(vec![*c]),
        Expression::SubStr(k1, k2) => substr(s, *k1, *k2),
        Expression::GetSpan(span) => get_span(s, span),
        Expression::Nesting(n) => apply_nesting(*n, s),
        Expression::Compose(outer, inner) => {
            let v = match inner {
                Inner::Nesting(n) => apply_nesting(*n, s)?,
                Inner::SubStr(k1, k2) => substr(s, *k1, *k2)?,
                Inner::GetSpan(span) => get_span(s, span)?,
            };
            apply_nesting(*outer, &v)
        }
    }
}

fn substr(s: &[char], k1: Position, k2: Position) -> Result<Chars, ExecFailure> {
    let len = s.len() as i64;
    if len == 0 {
        return Err(ExecFailure::EmptySubstring);
    }
    let resolve = |k: i64| {
        let p = if k > 0 { k } else { len + k + 1 };
        p.clamp(1, len)
    };
    let (p1, p2) = (resolve(k1.get()), resolve(k2.get()));
    if p1 > p2 {
        return Err(ExecFailure::EmptySubstring);
    }
    Ok(s[(p1 - 1) as usize..p2 as usize].to_vec())
}

fn find(s: &[char], r: RegexToken, i: i64) -> Result<(usize, usize), ExecFailure> {
    occurrence(&match_spans_chars(s, r), i)
        .ok_or_else(|| ExecFailure::MissingOccurrence { regex: r.to_string(), index: i })
}

fn get_span(s: &[char], span: &Span) -> Result<Chars, ExecFailure> {
    let pick = |(a, b): (usize, usize), boundary: Boundary| match boundary {
        Boundary::Start => a,
        Boundary::End => b,
    };
    let p = pick(find(s, span.r1, span.i1.get())?, span.b1);
    let q = pick(find(s, span.r2, span.i2.get())?, span.b2);
    if p > q {
        return Err(ExecFailure::InvertedSpan);
    }
    Ok(s[p..q].to_vec())
}

fn apply_nesting(n: NestingOp, s: &[char]) -> Result<Chars, ExecFailure> {
    match n {
        NestingOp::GetToken(t, i) => {
            let (a, b) = find(s, RegexToken::Type(t), i.get())?;
            Ok(s[a..b].to_vec())
        }
        NestingOp::ToCase(kind) => Ok(to_case(s, kind)),
        NestingOp::Replace(d1, d2) => {
            let (from, to) = (d1.as_char(), d2.as_char());
            Ok(s.iter().map(|&c| if c == from { to } else { c }).collect())
        }
        NestingOp::Trim => {
            let start = s.iter().position(|&c| c != ' ').unwrap_or(s.len());
            let end = s.iter().rposition(|&c| c != ' ').map_or(start, |p| p + 1);
            Ok(s[start..end].to_vec())
        }
        NestingOp::GetUpto(r) => {
            let (_, b) = find(s, r, 1)?;
            Ok(s[..b].to_vec())
        }
        NestingOp::GetFrom(r) => {
            let (_, b) = find(s, r, 1)?;
            Ok(s[b..].to_vec())
        }
        NestingOp::GetFirst(t, i) => {
            let spans = match_spans_chars(s, RegexToken::Type(t));
            let want = i.get().unsigned_abs() as usize;
            if spans.len() < want {
                return Err(ExecFailure::MissingOccurrence { regex: t.name().into(), index: i.get() });
            }
            let chosen = if i.get() > 0 { &spans[..want] } else { &spans[spans.len() - want..] };
            Ok(chosen.iter().flat_map(|&(a, b)| s[a..b].iter().copied()).collect())
        }
        NestingOp::GetAll(t) => {
            let spans = match_spans_chars(s, RegexToken::Type(t));
            if spans.is_empty() {
                return Err(ExecFailure::MissingOccurrence { regex: t.name().into(), index: 1 });
            }
            let mut out = Vec::new();
            for (j, &(a, b)) in spans.iter().enumerate() {
                if j > 0 {
                    out.push(' ');
                }
                out.extend_from_slice(&s[a..b]);
            }
            Ok(out)
        }
    }
}

fn to_case(s: &[char], kind: CaseKind) -> Chars {
    match kind {
        CaseKind::AllCaps => s.iter().map(|c| c.to_ascii_uppercase()).collect(),
        CaseKind::Lower => s.iter().map(|c| c.to_ascii_lowercase()).collect(),
        CaseKind::Proper => {
            // First letter of each [A-Za-z]+ run upper, the rest lower.
            let mut out = Vec::with_capacity(s.len());
            let mut in_word = false;
            for &c in s {
                if c.is_ascii_alphabetic() {
                    out.push(if in_word { c.to_ascii_lowercase() } else { c.to_ascii_uppercase() });
                    in_word = true;
                } else {
                    out.push(c);
                    in_word = false;
                }
            }
            out
        }
    }
}
