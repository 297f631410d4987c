use super::ast::*;
use super::DslError;

/// Parses canonical program text, rejecting constructs outside `cfg`'s dialect.
pub fn parse_program(text: &str, cfg: DialectConfig) -> Result<Program, DslError> {
    if text.is_empty() {
        return Err(DslError::Parse { position: 0, reason: "empty program text".into() });
    }
    let pieces: Vec<&str> = text.split('|').collect();
    let n = pieces.len();
    let mut offset = 0usize;
    let mut expressions = Vec::with_capacity(n);
    for (j, piece) in pieces.iter().enumerate() {
        let mut body = *piece;
        let mut start = offset;
        if j > 0 {
            body = body.strip_prefix(' ').ok_or_else(|| DslError::Parse {
                position: start,
                reason: "expected a space after `|`".into(),
            })?;
            start += 1;
        }
        if j + 1 < n {
            body = body.strip_suffix(' ').ok_or_else(|| DslError::Parse {
                position: offset + piece.chars().count(),
                reason: "expected a space before `|`".into(),
            })?;
        }
        let e = parse_expression_at(body, start)?;
        if !cfg.admits(&e) {
            return Err(DslError::Dialect { position: start, construct: e.to_string() });
        }
        expressions.push(e);
        offset += piece.chars().count() + 1;
    }
    if expressions.len() > MAX_EXPRESSIONS {
        return Err(DslError::Length(expressions.len()));
    }
    Program::new(expressions)
}

/// Parses a single expression in canonical form.
pub fn parse_expression(text: &str) -> Result<Expression, DslError> {
    parse_expression_at(text, 0)
}

fn parse_expression_at(text: &str, base: usize) -> Result<Expression, DslError> {
    let chars: Vec<char> = text.chars().collect();
    let mut cur = Cursor { chars: &chars, pos: 0, base };
    let e = cur.expression()?;
    if !cur.at_end() {
        return Err(cur.err("trailing characters after expression"));
    }
    Ok(e)
}

struct Cursor<'a> {
    chars: &'a [char],
    pos: usize,
    base: usize,
}

impl Cursor<'_> {
    fn err(&self, reason: &str) -> DslError {
        DslError::Parse { position: self.base + self.pos, reason: reason.to_string() }
    }

    fn at_end(&self) -> bool {
        self.pos >= self.chars.len()
    }

    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).copied()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek()?;
        self.pos += 1;
        Some(c)
    }

    fn eat(&mut self, s: &str) -> bool {
        let n = s.chars().count();
        if self.pos + n <= self.chars.len() && self.chars[self.pos..self.pos + n].iter().copied().eq(s.chars()) {
            self.pos += n;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: char) -> Result<(), DslError> {
        if self.peek() == Some(c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.err(&format!("expected `{c}`")))
        }
    }

    fn int(&mut self) -> Result<i64, DslError> {
        let start = self.pos;
        let negative = self.eat("-");
        let mut value: i64 = 0;
        let mut digits = 0;
        while let Some(c) = self.peek().filter(char::is_ascii_digit) {
            if digits >= 4 {
                return Err(self.err("integer literal too long"));
            }
            value = value * 10 + c.to_digit(10).unwrap() as i64;
            digits += 1;
            self.pos += 1;
        }
        if digits == 0 {
            self.pos = start;
            return Err(self.err("expected an integer"));
        }
        Ok(if negative { -value } else { value })
    }

    fn index(&mut self) -> Result<Index, DslError> {
        let at = self.pos;
        let i = self.int()?;
        Index::new(i).ok_or_else(|| {
            self.pos = at;
            self.err(&format!("index {i} outside -5..-1 and 1..5"))
        })
    }

    fn position(&mut self) -> Result<Position, DslError> {
        let at = self.pos;
        let k = self.int()?;
        Position::new(k).ok_or_else(|| {
            self.pos = at;
            self.err(&format!("position {k} outside -100..-1 and 1..100"))
        })
    }

    fn type_token(&mut self) -> Result<TypeToken, DslError> {
        for t in TypeToken::ALL {
            if self.eat(t.name()) {
                return Ok(t);
            }
        }
        Err(self.err("unknown type token"))
    }

    fn delimiter(&mut self) -> Result<Delimiter, DslError> {
        match self.peek().and_then(Delimiter::new) {
            Some(d) => {
                self.pos += 1;
                Ok(d)
            }
            None => Err(self.err("expected a delimiter")),
        }
    }

    fn regex(&mut self) -> Result<RegexToken, DslError> {
        if let Some(d) = self.peek().and_then(Delimiter::new) {
            self.pos += 1;
            return Ok(RegexToken::Delim(d));
        }
        self.type_token().map(RegexToken::Type).map_err(|_| self.err("unknown regex token"))
    }

    fn boundary(&mut self) -> Option<Boundary> {
        if self.eat("START") {
            Some(Boundary::Start)
        } else if self.eat("END") {
            Some(Boundary::End)
        } else {
            None
        }
    }

    fn case_kind(&mut self) -> Result<CaseKind, DslError> {
        for s in CaseKind::ALL {
            if self.eat(s.name()) {
                return Ok(s);
            }
        }
        Err(self.err("unknown case"))
    }

    fn substr_args(&mut self) -> Result<(Position, Position), DslError> {
        let k1 = self.position()?;
        self.expect('_')?;
        let k2 = self.position()?;
        Ok((k1, k2))
    }

    fn span_args(&mut self) -> Result<Span, DslError> {
        let r1 = self.regex()?;
        self.expect('_')?;
        let i1 = self.index()?;
        self.expect('_')?;
        match self.boundary() {
            Some(b1) => {
                self.expect('_')?;
                let r2 = self.regex()?;
                self.expect('_')?;
                let i2 = self.index()?;
                self.expect('_')?;
                let b2 = self.boundary().ok_or_else(|| self.err("expected START or END"))?;
                Ok(Span { r1, i1, b1, r2, i2, b2 })
            }
            None => {
                let r2 = self.regex()?;
                self.expect('_')?;
                let i2 = self.index()?;
                Ok(Span::toy(r1, i1, r2, i2))
            }
        }
    }

    fn nesting(&mut self) -> Result<NestingOp, DslError> {
        if self.eat("GetToken_") {
            let t = self.type_token()?;
            self.expect('_')?;
            Ok(NestingOp::GetToken(t, self.index()?))
        } else if self.eat("ToCase_") {
            Ok(NestingOp::ToCase(self.case_kind()?))
        } else if self.eat("Replace_") {
            let d1 = self.delimiter()?;
            self.expect('_')?;
            Ok(NestingOp::Replace(d1, self.delimiter()?))
        } else if self.eat("Trim") {
            Ok(NestingOp::Trim)
        } else if self.eat("GetUpto_") {
            Ok(NestingOp::GetUpto(self.regex()?))
        } else if self.eat("GetFrom_") {
            Ok(NestingOp::GetFrom(self.regex()?))
        } else if self.eat("GetFirst_") {
            let t = self.type_token()?;
            self.expect('_')?;
            Ok(NestingOp::GetFirst(t, self.index()?))
        } else if self.eat("GetAll_") {
            Ok(NestingOp::GetAll(self.type_token()?))
        } else {
            Err(self.err("unknown expression constructor"))
        }
    }

    fn inner(&mut self) -> Result<Inner, DslError> {
        if self.eat("SubStr_") {
            let (k1, k2) = self.substr_args()?;
            Ok(Inner::SubStr(k1, k2))
        } else if self.eat("GetSpan_") {
            Ok(Inner::GetSpan(self.span_args()?))
        } else {
            Ok(Inner::Nesting(self.nesting()?))
        }
    }

    fn expression(&mut self) -> Result<Expression, DslError> {
        if self.eat("Const(") {
            let c = self.bump().ok_or_else(|| self.err("expected a constant character"))?;
            if !is_const_char(c) {
                self.pos -= 1;
                return Err(self.err(&format!("`{c}` is not a valid constant character")));
            }
            self.expect(')')?;
            return Ok(Expression::ConstStr(c));
        }
        if self.eat("SubStr_") {
            let (k1, k2) = self.substr_args()?;
            return Ok(Expression::SubStr(k1, k2));
        }
        if self.eat("GetSpan_") {
            return Ok(Expression::GetSpan(self.span_args()?));
        }
        let outer = self.nesting()?;
        if self.peek() == Some('(') {
            self.pos += 1;
            let inner = self.inner()?;
            self.expect(')')?;
            Ok(Expression::Compose(outer, inner))
        } else {
            Ok(Expression::Nesting(outer))
        }
    }
}
