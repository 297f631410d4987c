use std::fmt;

use super::DslError;

/// Token classes a regex can name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TypeToken {
    Number,
    Word,
    Alphanum,
    AllCaps,
    PropCase,
    Lower,
    Digit,
    Char,
}

impl TypeToken {
    pub const ALL: [TypeToken; 8] = [
        TypeToken::Number,
        TypeToken::Word,
        TypeToken::Alphanum,
        TypeToken::AllCaps,
        TypeToken::PropCase,
        TypeToken::Lower,
        TypeToken::Digit,
        TypeToken::Char,
    ];

    pub const TOY: [TypeToken; 3] = [TypeToken::Number, TypeToken::Word, TypeToken::Alphanum];

    pub fn name(self) -> &'static str {
        match self {
            TypeToken::Number => "NUMBER",
            TypeToken::Word => "WORD",
            TypeToken::Alphanum => "ALPHANUM",
            TypeToken::AllCaps => "ALL_CAPS",
            TypeToken::PropCase => "PROP_CASE",
            TypeToken::Lower => "LOWER",
            TypeToken::Digit => "DIGIT",
            TypeToken::Char => "CHAR",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == name)
    }
}

/// Delimiter characters usable in regexes, `Replace` and constants.
pub const DELIMITERS: [char; 20] = [
    '&', ',', '.', '?', '@', '(', ')', '[', ']', '%', '{', '}', '/', ':', ';', '$', '#', '"', '\'',
    ' ',
];

/// The delimiter subset of the toy dialect.
pub const TOY_DELIMITERS: [char; 4] = ['&', ',', '.', ' '];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Delimiter(char);

impl Delimiter {
    pub fn new(c: char) -> Option<Self> {
        DELIMITERS.contains(&c).then_some(Delimiter(c))
    }

    pub fn as_char(self) -> char {
        self.0
    }

    pub fn all() -> impl Iterator<Item = Delimiter> {
        DELIMITERS.into_iter().map(Delimiter)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RegexToken {
    Type(TypeToken),
    Delim(Delimiter),
}

impl RegexToken {
    /// Every regex of the full dialect: type tokens first, then delimiters.
    pub fn all() -> Vec<RegexToken> {
        TypeToken::ALL
            .into_iter()
            .map(RegexToken::Type)
            .chain(Delimiter::all().map(RegexToken::Delim))
            .collect()
    }

    pub fn toy() -> Vec<RegexToken> {
        TypeToken::TOY
            .into_iter()
            .map(RegexToken::Type)
            .chain(TOY_DELIMITERS.into_iter().map(|c| RegexToken::Delim(Delimiter(c))))
            .collect()
    }
}

impl fmt::Display for RegexToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RegexToken::Type(t) => f.write_str(t.name()),
            RegexToken::Delim(d) => write!(f, "{}", d.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CaseKind {
    Proper,
    AllCaps,
    Lower,
}

impl CaseKind {
    pub const ALL: [CaseKind; 3] = [CaseKind::Proper, CaseKind::AllCaps, CaseKind::Lower];

    pub fn name(self) -> &'static str {
        match self {
            CaseKind::Proper => "PROPER",
            CaseKind::AllCaps => "ALL_CAPS",
            CaseKind::Lower => "LOWER",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Boundary {
    Start,
    End,
}

impl Boundary {
    pub fn name(self) -> &'static str {
        match self {
            Boundary::Start => "START",
            Boundary::End => "END",
        }
    }
}

/// Occurrence index: `-5..=-1` or `1..=5`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Index(i8);

impl Index {
    pub const MAX: i8 = 5;

    pub fn new(i: i64) -> Option<Self> {
        (i != 0 && i.abs() <= Self::MAX as i64).then_some(Index(i as i8))
    }

    pub fn get(self) -> i64 {
        self.0 as i64
    }

    pub fn all() -> impl Iterator<Item = Index> {
        (-Self::MAX..=Self::MAX).filter(|&i| i != 0).map(Index)
    }
}

/// Character position for `SubStr`: `-100..=-1` or `1..=100`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Position(i8);

impl Position {
    pub const MAX: i8 = 100;

    pub fn new(k: i64) -> Option<Self> {
        (k != 0 && k.abs() <= Self::MAX as i64).then_some(Position(k as i8))
    }

    pub fn get(self) -> i64 {
        self.0 as i64
    }

    pub fn all() -> impl Iterator<Item = Position> {
        (-Self::MAX..=Self::MAX).filter(|&k| k != 0).map(Position)
    }
}

/// Arguments of `GetSpan(r1, i1, b1, r2, i2, b2)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Span {
    pub r1: RegexToken,
    pub i1: Index,
    pub b1: Boundary,
    pub r2: RegexToken,
    pub i2: Index,
    pub b2: Boundary,
}

impl Span {
    /// Span with the boundaries the toy dialect fixes: start of the first match to end of the second.
    pub fn toy(r1: RegexToken, i1: Index, r2: RegexToken, i2: Index) -> Self {
        Span { r1, i1, b1: Boundary::Start, r2, i2, b2: Boundary::End }
    }

    pub fn has_default_boundaries(&self) -> bool {
        self.b1 == Boundary::Start && self.b2 == Boundary::End
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NestingOp {
    GetToken(TypeToken, Index),
    ToCase(CaseKind),
    Replace(Delimiter, Delimiter),
    Trim,
    GetUpto(RegexToken),
    GetFrom(RegexToken),
    GetFirst(TypeToken, Index),
    GetAll(TypeToken),
}

/// The argument of a composed expression `n(inner)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Inner {
    Nesting(NestingOp),
    SubStr(Position, Position),
    GetSpan(Span),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Expression {
    ConstStr(char),
    SubStr(Position, Position),
    GetSpan(Span),
    Nesting(NestingOp),
    Compose(NestingOp, Inner),
}

/// Characters a `ConstStr` may hold: letters, digits and delimiters.
pub fn is_const_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || DELIMITERS.contains(&c)
}

/// Maximum number of expressions in a program.
pub const MAX_EXPRESSIONS: usize = 10;

/// A top-level `Concat` of expressions.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Program {
    expressions: Vec<Expression>,
}

impl Program {
    pub fn new(expressions: Vec<Expression>) -> Result<Self, DslError> {
        if expressions.is_empty() || expressions.len() > MAX_EXPRESSIONS {
            return Err(DslError::Length(expressions.len()));
        }
        for e in &expressions {
            if let Expression::ConstStr(c) = e {
                if !is_const_char(*c) {
                    return Err(DslError::ConstChar(*c));
                }
            }
        }
        Ok(Program { expressions })
    }

    pub fn expressions(&self) -> &[Expression] {
        &self.expressions
    }

    pub fn len(&self) -> usize {
        self.expressions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.expressions.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dialect {
    #[default]
    Full,
    Toy,
}

impl fmt::Display for Dialect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Dialect::Full => "full",
            Dialect::Toy => "toy",
        })
    }
}

impl std::str::FromStr for Dialect {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(Dialect::Full),
            "toy" => Ok(Dialect::Toy),
            other => Err(format!("unknown dialect `{other}` (expected full or toy)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DialectConfig {
    pub dialect: Dialect,
}

impl DialectConfig {
    pub const FULL: DialectConfig = DialectConfig { dialect: Dialect::Full };
    pub const TOY: DialectConfig = DialectConfig { dialect: Dialect::Toy };

    pub fn new(dialect: Dialect) -> Self {
        DialectConfig { dialect }
    }

    /// Toy dialect: `GetSpan` only, over a reduced regex and index set, default boundaries.
    pub fn admits(&self, e: &Expression) -> bool {
        match self.dialect {
            Dialect::Full => true,
            Dialect::Toy => match e {
                Expression::GetSpan(span) => {
                    span.has_default_boundaries()
                        && is_toy_regex(span.r1)
                        && is_toy_regex(span.r2)
                        && is_toy_index(span.i1)
                        && is_toy_index(span.i2)
                }
                _ => false,
            },
        }
    }
}

pub(crate) fn is_toy_regex(r: RegexToken) -> bool {
    match r {
        RegexToken::Type(t) => TypeToken::TOY.contains(&t),
        RegexToken::Delim(d) => TOY_DELIMITERS.contains(&d.as_char()),
    }
}

pub(crate) fn is_toy_index(i: Index) -> bool {
    matches!(i.get(), -1 | 1 | 2)
}

pub const TOY_INDICES: [i64; 3] = [-1, 1, 2];
