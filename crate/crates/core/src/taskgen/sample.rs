use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{GenError, Task, MAX_STRING_LEN};
use crate::dsl::*;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub dialect: Dialect,
    pub n_examples: usize,
    pub max_expressions: usize,
    pub max_string_len: usize,
    /// Upper bound of the sampled input length (inputs may exceed it to fit required tokens).
    pub max_input_len: usize,
    /// Input resamples per example before the program is thrown away.
    pub max_retries: usize,
    /// Program samples per task before giving up.
    pub max_program_attempts: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            dialect: Dialect::Full,
            n_examples: 4,
            max_expressions: MAX_EXPRESSIONS,
            max_string_len: MAX_STRING_LEN,
            max_input_len: 20,
            max_retries: 10,
            max_program_attempts: 1000,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn toy(seed: u64) -> Self {
        GenConfig { dialect: Dialect::Toy, seed, ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), GenError> {
        let bad = |m: &str| Err(GenError::Config(m.to_string()));
        if self.n_examples == 0 {
            return bad("n_examples must be at least 1");
        }
        if !(1..=MAX_EXPRESSIONS).contains(&self.max_expressions) {
            return bad("max_expressions must be in 1..=10");
        }
        if self.max_string_len == 0 || self.max_string_len > MAX_STRING_LEN {
            return bad("max_string_len must be in 1..=100");
        }
        if self.max_input_len == 0 || self.max_input_len > self.max_string_len {
            return bad("max_input_len must be in 1..=max_string_len");
        }
        if self.max_retries == 0 || self.max_program_attempts == 0 {
            return bad("retry budgets must be positive");
        }
        Ok(())
    }
}

/// Independent stream for task `index`, so output does not depend on generation order.
pub fn task_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Resampling effort spent on one accepted task.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SampleStats {
    pub program_attempts: usize,
    /// Input resamples for the accepted program.
    pub input_resamples: usize,
}

pub fn sample_program<R: Rng + ?Sized>(rng: &mut R, cfg: &GenConfig) -> Program {
    let n = rng.gen_range(1..=cfg.max_expressions);
    let expressions = (0..n).map(|_| sample_expression(rng, cfg.dialect)).collect();
    Program::new(expressions).expect("sampled program is valid")
}

fn sample_expression<R: Rng + ?Sized>(rng: &mut R, dialect: Dialect) -> Expression {
    match dialect {
        Dialect::Toy => {
            let regexes = RegexToken::toy();
            let mut pick_idx = || Index::new(*TOY_INDICES.choose(rng).unwrap()).unwrap();
            let (i1, i2) = (pick_idx(), pick_idx());
            let r1 = *regexes.choose(rng).unwrap();
            let r2 = *regexes.choose(rng).unwrap();
            Expression::GetSpan(Span::toy(r1, i1, r2, i2))
        }
        Dialect::Full => match rng.gen_range(0..5) {
            0 => match sample_substring(rng) {
                Inner::SubStr(k1, k2) => Expression::SubStr(k1, k2),
                Inner::GetSpan(s) => Expression::GetSpan(s),
                Inner::Nesting(_) => unreachable!(),
            },
            1 => Expression::Nesting(sample_nesting(rng)),
            2 => Expression::Compose(sample_nesting(rng), Inner::Nesting(sample_nesting(rng))),
            3 => Expression::Compose(sample_nesting(rng), sample_substring(rng)),
            _ => {
                let chars: Vec<char> = const_chars().collect();
                Expression::ConstStr(*chars.choose(rng).unwrap())
            }
        },
    }
}

fn const_chars() -> impl Iterator<Item = char> {
    ('A'..='Z').chain('a'..='z').chain('0'..='9').chain(DELIMITERS)
}

fn sample_index<R: Rng + ?Sized>(rng: &mut R) -> Index {
    let all: Vec<Index> = Index::all().collect();
    *all.choose(rng).unwrap()
}

fn sample_position<R: Rng + ?Sized>(rng: &mut R) -> Position {
    let k = rng.gen_range(1..=Position::MAX as i64);
    Position::new(if rng.gen_bool(0.5) { k } else { -k }).unwrap()
}

fn sample_type<R: Rng + ?Sized>(rng: &mut R) -> TypeToken {
    *TypeToken::ALL.choose(rng).unwrap()
}

fn sample_regex<R: Rng + ?Sized>(rng: &mut R) -> RegexToken {
    *RegexToken::all().choose(rng).unwrap()
}

fn sample_delimiter<R: Rng + ?Sized>(rng: &mut R) -> Delimiter {
    Delimiter::new(*DELIMITERS.choose(rng).unwrap()).unwrap()
}

fn sample_boundary<R: Rng + ?Sized>(rng: &mut R) -> Boundary {
    if rng.gen_bool(0.5) {
        Boundary::Start
    } else {
        Boundary::End
    }
}

fn sample_substring<R: Rng + ?Sized>(rng: &mut R) -> Inner {
    if rng.gen_bool(0.5) {
        Inner::SubStr(sample_position(rng), sample_position(rng))
    } else {
        Inner::GetSpan(Span {
            r1: sample_regex(rng),
            i1: sample_index(rng),
            b1: sample_boundary(rng),
            r2: sample_regex(rng),
            i2: sample_index(rng),
            b2: sample_boundary(rng),
        })
    }
}

fn sample_nesting<R: Rng + ?Sized>(rng: &mut R) -> NestingOp {
    match rng.gen_range(0..8) {
        0 => NestingOp::GetToken(sample_type(rng), sample_index(rng)),
        1 => NestingOp::ToCase(*CaseKind::ALL.choose(rng).unwrap()),
        2 => NestingOp::Replace(sample_delimiter(rng), sample_delimiter(rng)),
        3 => NestingOp::Trim,
        4 => NestingOp::GetUpto(sample_regex(rng)),
        5 => NestingOp::GetFrom(sample_regex(rng)),
        6 => NestingOp::GetFirst(sample_type(rng), sample_index(rng)),
        _ => NestingOp::GetAll(sample_type(rng)),
    }
}

/// A regex occurrence the program refers to. `bias` is negative for span starts and
/// positive for span ends.
#[derive(Debug, Clone, Copy)]
struct Ref {
    regex: RegexToken,
    index: i64,
    bias: f64,
    expr: usize,
}

/// Occurrence references of `p`, in program order.
fn references(p: &Program) -> Vec<Ref> {
    let mut refs = Vec::new();
    for (expr, e) in p.expressions().iter().enumerate() {
        let mut push = |regex: RegexToken, index: i64, bias: f64| refs.push(Ref { regex, index, bias, expr });
        let nesting = |n: &NestingOp, push: &mut dyn FnMut(RegexToken, i64, f64)| match *n {
            NestingOp::GetToken(t, i) | NestingOp::GetFirst(t, i) => push(RegexToken::Type(t), i.get(), 0.0),
            NestingOp::GetUpto(r) | NestingOp::GetFrom(r) => push(r, 1, 0.0),
            NestingOp::GetAll(t) => push(RegexToken::Type(t), 1, 0.0),
            NestingOp::Replace(d, _) => push(RegexToken::Delim(d), 1, 0.0),
            NestingOp::ToCase(_) | NestingOp::Trim => {}
        };
        let span = |s: &Span, push: &mut dyn FnMut(RegexToken, i64, f64)| {
            push(s.r1, s.i1.get(), -0.3);
            push(s.r2, s.i2.get(), 0.3);
        };
        match e {
            Expression::GetSpan(s) => span(s, &mut push),
            Expression::Nesting(n) => nesting(n, &mut push),
            Expression::Compose(outer, inner) => {
                nesting(outer, &mut push);
                match inner {
                    Inner::Nesting(n) => nesting(n, &mut push),
                    Inner::GetSpan(s) => span(s, &mut push),
                    Inner::SubStr(..) => {}
                }
            }
            Expression::ConstStr(_) | Expression::SubStr(..) => {}
        }
    }
    refs
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Class {
    Upper,
    Lower,
    Digit,
}

impl Class {
    fn pick<R: Rng + ?Sized>(self, rng: &mut R) -> char {
        let (lo, n) = match self {
            Class::Upper => (b'A', 26),
            Class::Lower => (b'a', 26),
            Class::Digit => (b'0', 10),
        };
        (lo + rng.gen_range(0..n)) as char
    }
}

/// Character-class shape of one run. A shape fixes every regex match inside the run
/// except through its length.
#[derive(Debug, Clone, PartialEq, Eq)]
enum Shape {
    Uniform(Class, usize),
    Proper(usize),
    Pattern(Vec<Class>),
}

impl Shape {
    fn sample<R: Rng + ?Sized>(rng: &mut R, t: TypeToken) -> Self {
        let pattern = |rng: &mut R, classes: &[Class]| {
            let n = rng.gen_range(1..=5);
            Shape::Pattern((0..n).map(|_| *classes.choose(rng).unwrap()).collect())
        };
        match t {
            TypeToken::Number => Shape::Uniform(Class::Digit, 4),
            TypeToken::Digit => Shape::Uniform(Class::Digit, 2),
            TypeToken::AllCaps => Shape::Uniform(Class::Upper, 4),
            TypeToken::Lower => Shape::Uniform(Class::Lower, 5),
            TypeToken::PropCase => Shape::Proper(5),
            TypeToken::Word => match rng.gen_range(0..3) {
                0 => Shape::Proper(5),
                1 => Shape::Uniform(Class::Lower, 5),
                _ => pattern(rng, &[Class::Upper, Class::Lower]),
            },
            TypeToken::Alphanum | TypeToken::Char => pattern(rng, &[Class::Upper, Class::Lower, Class::Digit]),
        }
    }

    /// A fresh run of this shape; uniform runs get a random length up to their maximum
    /// unless `len` fixes it. Returns the length of the variable part.
    fn fill<R: Rng + ?Sized>(&self, rng: &mut R, len: Option<usize>, out: &mut String) -> usize {
        match self {
            Shape::Uniform(c, max) => {
                let n = len.unwrap_or_else(|| rng.gen_range(1..=*max));
                for _ in 0..n {
                    out.push(c.pick(rng));
                }
                n
            }
            Shape::Proper(max) => {
                let n = len.unwrap_or_else(|| rng.gen_range(1..=*max));
                out.push(Class::Upper.pick(rng));
                for _ in 0..n {
                    out.push(Class::Lower.pick(rng));
                }
                n
            }
            Shape::Pattern(classes) => {
                out.extend(classes.iter().map(|c| c.pick(rng)));
                classes.len()
            }
        }
    }
}

fn delimiter_pool(dialect: Dialect) -> &'static [char] {
    match dialect {
        Dialect::Toy => &TOY_DELIMITERS,
        Dialect::Full => &DELIMITERS,
    }
}

fn separator<R: Rng + ?Sized>(rng: &mut R, dialect: Dialect) -> char {
    // Spaces, commas and periods dominate real inputs.
    if rng.gen_bool(0.5) {
        *[' ', ',', '.'].choose(rng).unwrap()
    } else {
        *delimiter_pool(dialect).choose(rng).unwrap()
    }
}

#[derive(Debug, Clone)]
enum Item {
    Run(Shape),
    Sep(char),
}

/// Layout shared by the inputs of one task: token runs and delimiters ordered by a sort key.
/// Items placed for a reference remember the expression that asked for them.
#[derive(Debug, Clone)]
struct Layout {
    keyed: Vec<(f64, Item, Option<usize>)>,
    items: Vec<Item>,
}

const KEY_RANGE: std::ops::Range<f64> = 0.0..6.0;

impl Layout {
    /// Holds at least `|i|` occurrences of every referenced `(r, i)`. Half of the layouts place
    /// each occurrence by its index (first occurrences early, last ones late, span starts
    /// before span ends); the rest are shuffled uniformly.
    fn sample<R: Rng + ?Sized>(rng: &mut R, cfg: &GenConfig, refs: &[Ref]) -> Self {
        let target = rng.gen_range(1..=cfg.max_input_len);
        let types: &[TypeToken] = match cfg.dialect {
            Dialect::Toy => &TypeToken::TOY,
            Dialect::Full => &TypeToken::ALL,
        };
        let ordered = rng.gen_bool(0.5);
        let mut by_key: Vec<(f64, Ref)> = refs
            .iter()
            .map(|r| {
                let key = if ordered {
                    let slot = if r.index > 0 { r.index } else { 6 + r.index };
                    slot as f64 + r.bias + rng.gen_range(-0.5..0.5)
                } else {
                    rng.gen_range(KEY_RANGE)
                };
                (key, *r)
            })
            .collect();
        by_key.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut counts: BTreeMap<RegexToken, usize> = BTreeMap::new();
        let mut keyed = Vec::new();
        for (key, r) in by_key {
            let c = counts.entry(r.regex).or_default();
            let need = if ordered && r.index < 0 { *c + 1 } else { r.index.unsigned_abs() as usize };
            while *c < need {
                let item = match r.regex {
                    RegexToken::Type(t) => Item::Run(Shape::sample(rng, t)),
                    RegexToken::Delim(d) => Item::Sep(d.as_char()),
                };
                keyed.push((key, item, Some(r.expr)));
                *c += 1;
            }
        }
        // Expected characters per run, for sizing only.
        const RUN_LEN: usize = 4;
        let runs = |k: &[(f64, Item, Option<usize>)]| k.iter().filter(|(_, i, _)| matches!(i, Item::Run(_))).count();
        while runs(&keyed) == 0 || keyed.len() + runs(&keyed) * RUN_LEN < target {
            let t = *types.choose(rng).unwrap();
            keyed.push((rng.gen_range(KEY_RANGE), Item::Run(Shape::sample(rng, t)), None));
        }
        let mut layout = Layout { keyed, items: Vec::new() };
        layout.arrange(rng, cfg.dialect);
        layout
    }

    /// Moves the items placed for expression `expr` to new random positions. An expression that
    /// placed nothing and selected an empty substring gets
    /// a shorter input: one filler run is dropped.
    /// Returns false when neither applies.
    fn repair<R: Rng + ?Sized>(&mut self, rng: &mut R, dialect: Dialect, err: &ExecError) -> bool {
        let mut moved = false;
        for (key, _, owner) in &mut self.keyed {
            if *owner == Some(err.expr_index) {
                *key = rng.gen_range(KEY_RANGE);
                moved = true;
            }
        }
        if !moved && err.reason == ExecFailure::EmptySubstring {
            let fillers: Vec<usize> = (0..self.keyed.len()).filter(|&i| self.keyed[i].2.is_none()).collect();
            if !fillers.is_empty() {
                self.keyed.remove(*fillers.choose(rng).unwrap());
                moved = true;
            }
        }
        if moved {
            self.arrange(rng, dialect);
        }
        moved
    }

    fn arrange<R: Rng + ?Sized>(&mut self, rng: &mut R, dialect: Dialect) {
        self.keyed.sort_by(|a, b| a.0.total_cmp(&b.0));
        self.items.clear();
        if rng.gen_bool(0.5) {
            self.items.push(Item::Sep(separator(rng, dialect)));
        }
        for (_, it, _) in &self.keyed {
            if let (Some(Item::Run(_)), Item::Run(_)) = (self.items.last(), it) {
                self.items.push(Item::Sep(separator(rng, dialect)));
            }
            self.items.push(it.clone());
        }
    }

    /// A fresh input and its run lengths. `lengths` fixes the run lengths of a previous input.
    fn instantiate<R: Rng + ?Sized>(&self, rng: &mut R, cfg: &GenConfig, lengths: Option<&[usize]>) -> (String, Vec<usize>) {
        let mut out = String::new();
        let mut used = Vec::new();
        for item in &self.items {
            match item {
                Item::Run(shape) => {
                    let fixed = lengths.map(|l| l[used.len()]);
                    used.push(shape.fill(rng, fixed, &mut out));
                }
                Item::Sep(c) => out.push(*c),
            }
        }
        (out.chars().take(cfg.max_string_len).collect(), used)
    }
}

/// Samples one task whose program is consistent with every example and yields nonempty outputs.
pub fn sample_task<R: Rng + ?Sized>(rng: &mut R, cfg: &GenConfig) -> Result<Task, GenError> {
    sample_task_with_stats(rng, cfg).map(|(t, _)| t)
}

pub fn sample_task_with_stats<R: Rng + ?Sized>(rng: &mut R, cfg: &GenConfig) -> Result<(Task, SampleStats), GenError> {
    cfg.validate()?;
    'program: for attempt in 1..=cfg.max_program_attempts {
        let program = sample_program(rng, cfg);
        let refs = references(&program);
        let mut inputs = Vec::with_capacity(cfg.n_examples);
        let mut outputs = Vec::with_capacity(cfg.n_examples);
        let mut resamples = 0;
        let mut layout = Layout::sample(rng, cfg, &refs);
        // Until one input has worked, a failure reshapes the layout; afterwards it is kept, and
        // retries alternate between fresh run lengths and those of the first accepted input.
        let mut settled: Option<Vec<usize>> = None;
        for _ in 0..cfg.n_examples {
            let mut accepted = false;
            for retry in 0..cfg.max_retries {
                let reuse = settled.as_deref().filter(|_| retry % 2 == 1);
                let (input, lengths) = layout.instantiate(rng, cfg, reuse);
                match execute(&program, &input) {
                    Ok(out) if !out.is_empty() && out.chars().count() <= cfg.max_string_len => {
                        inputs.push(input);
                        outputs.push(out);
                        accepted = true;
                        settled.get_or_insert(lengths);
                        break;
                    }
                    failure => {
                        resamples += 1;
                        if settled.is_none() {
                            let repaired = match failure {
                                Err(e) => rng.gen_bool(0.75) && layout.repair(rng, cfg.dialect, &e),
                                Ok(_) => false,
                            };
                            if !repaired {
                                layout = Layout::sample(rng, cfg, &refs);
                            }
                        }
                    }
                }
            }
            if !accepted {
                continue 'program;
            }
        }
        let task = Task::new(inputs, outputs, Some(program)).expect("generated task is well formed");
        return Ok((task, SampleStats { program_attempts: attempt, input_resamples: resamples }));
    }
    Err(GenError::GenerationExhausted { attempts: cfg.max_program_attempts })
}

/// `n_tasks` tasks, task `i` drawn from `task_rng(cfg.seed, i)`.
pub fn generate_dataset(cfg: &GenConfig, n_tasks: usize) -> Result<Vec<Task>, GenError> {
    cfg.validate()?;
    (0..n_tasks as u64).map(|i| sample_task(&mut task_rng(cfg.seed, i), cfg)).collect()
}
