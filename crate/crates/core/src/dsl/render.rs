use std::fmt::{self, Write};

use super::ast::*;

/// Canonical text of a program: expressions joined by `" | "`.
pub fn render_program(p: &Program) -> String {
    p.to_string()
}

pub fn render_expression(e: &Expression) -> String {
    e.to_string()
}

impl fmt::Display for Program {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.expressions().iter().enumerate() {
            if i > 0 {
                f.write_str(" | ")?;
            }
            write!(f, "{e}")?;
        }
        Ok(())
    }
}

impl fmt::Display for Expression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expression::ConstStr(c) => write!(f, "Const({c})"),
            Expression::SubStr(k1, k2) => write!(f, "SubStr_{}_{}", k1.get(), k2.get()),
            Expression::GetSpan(span) => write!(f, "{span}"),
            Expression::Nesting(n) => write!(f, "{n}"),
            Expression::Compose(outer, inner) => write!(f, "{outer}({inner})"),
        }
    }
}

impl fmt::Display for Inner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Inner::Nesting(n) => write!(f, "{n}"),
            Inner::SubStr(k1, k2) => write!(f, "SubStr_{}_{}", k1.get(), k2.get()),
            Inner::GetSpan(span) => write!(f, "{span}"),
        }
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // START/END is the implicit default, which keeps toy programs in their short form.
        if self.has_default_boundaries() {
            write!(f, "GetSpan_{}_{}_{}_{}", self.r1, self.i1.get(), self.r2, self.i2.get())
        } else {
            write!(
                f,
                "GetSpan_{}_{}_{}_{}_{}_{}",
                self.r1,
                self.i1.get(),
                self.b1.name(),
                self.r2,
                self.i2.get(),
                self.b2.name()
            )
        }
    }
}

impl fmt::Display for NestingOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NestingOp::GetToken(t, i) => write!(f, "GetToken_{}_{}", t.name(), i.get()),
            NestingOp::ToCase(s) => write!(f, "ToCase_{}", s.name()),
            NestingOp::Replace(d1, d2) => {
                f.write_str("Replace_")?;
                f.write_char(d1.as_char())?;
                f.write_char('_')?;
                f.write_char(d2.as_char())
            }
            NestingOp::Trim => f.write_str("Trim"),
            NestingOp::GetUpto(r) => write!(f, "GetUpto_{r}"),
            NestingOp::GetFrom(r) => write!(f, "GetFrom_{r}"),
            NestingOp::GetFirst(t, i) => write!(f, "GetFirst_{}_{}", t.name(), i.get()),
            NestingOp::GetAll(t) => write!(f, "GetAll_{}", t.name()),
        }
    }
}
