//! The string-transformation language: AST, canonical text form, parser and interpreter.
//!
//! A program is a concatenation of up to ten expressions. Each expression either
//! extracts part of the input (by character positions or by regex occurrences),
//! applies a nesting operation (optionally composed with one inner expression),
//! or emits a constant character. The toy dialect keeps only `GetSpan` over a
//! reduced regex set and is a strict subset of the full dialect.

mod ast;
mod exec;
mod parse;
pub mod regex;
mod render;

pub use ast::*;
pub use exec::{execute, is_consistent, ExecError, ExecFailure};
pub use parse::{parse_expression, parse_program};
pub use regex::match_spans;
pub use render::{render_expression, render_program};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DslError {
    #[error("parse error at offset {position}: {reason}")]
    Parse { position: usize, reason: String },
    #[error("`{construct}` at offset {position} is outside the toy dialect")]
    Dialect { position: usize, construct: String },
    #[error("a program holds 1..=10 expressions, got {0}")]
    Length(usize),
    #[error("{0:?} is not a valid constant character")]
    ConstChar(char),
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taskgen::Task;

    fn idx(i: i64) -> Index {
        Index::new(i).unwrap()
    }

    fn pos(k: i64) -> Position {
        Position::new(k).unwrap()
    }

    fn name_program() -> Program {
        Program::new(vec![
            Expression::Nesting(NestingOp::GetToken(TypeToken::PropCase, idx(2))),
            Expression::ConstStr(' '),
            Expression::Nesting(NestingOp::GetToken(TypeToken::AllCaps, idx(1))),
        ])
        .unwrap()
    }

    #[test]
    fn render_name_program() {
        assert_eq!(
            render_program(&name_program()),
            "GetToken_PROP_CASE_2 | Const( ) | GetToken_ALL_CAPS_1"
        );
        let dot = Program::new(vec![Expression::ConstStr('.')]).unwrap();
        assert_eq!(render_program(&dot), "Const(.)");
    }

    #[test]
    fn parse_toy_getspan() {
        let p = parse_program("GetSpan_ALPHANUM_1_ALPHANUM_1", DialectConfig::TOY).unwrap();
        let alnum = RegexToken::Type(TypeToken::Alphanum);
        assert_eq!(p.expressions(), &[Expression::GetSpan(Span::toy(alnum, idx(1), alnum, idx(1)))]);
    }

    #[test]
    fn parse_const_and_errors() {
        let p = parse_program("Const(.)", DialectConfig::FULL).unwrap();
        assert_eq!(p.expressions(), &[Expression::ConstStr('.')]);
        assert!(matches!(parse_program("GetToken_BOGUS_1", DialectConfig::FULL), Err(DslError::Parse { .. })));
        assert!(matches!(parse_program("", DialectConfig::FULL), Err(DslError::Parse { .. })));
        assert!(matches!(parse_program("GetToken_WORD_0", DialectConfig::FULL), Err(DslError::Parse { .. })));
        assert!(matches!(parse_program("SubStr_1_101", DialectConfig::FULL), Err(DslError::Parse { .. })));
        assert!(matches!(parse_program("Trim |Trim", DialectConfig::FULL), Err(DslError::Parse { .. })));
        assert!(matches!(parse_program("Trim(Trim)x", DialectConfig::FULL), Err(DslError::Parse { .. })));
    }

    #[test]
    fn toy_rejects_full_constructs() {
        for text in [
            "Const(.)",
            "GetToken_WORD_1",
            "GetSpan_DIGIT_1_WORD_1",
            "GetSpan_WORD_3_WORD_1",
            "GetSpan_WORD_1_END_WORD_1_END",
            "GetSpan_?_1_WORD_1",
        ] {
            assert!(
                matches!(parse_program(text, DialectConfig::TOY), Err(DslError::Dialect { .. })),
                "{text}"
            );
            assert!(parse_program(text, DialectConfig::FULL).is_ok(), "{text}");
        }
    }

    #[test]
    fn parses_tricky_delimiters() {
        for text in [
            "Replace_(_((SubStr_-8_-1)",
            "Replace_(_)(SubStr_-8_-1)",
            "GetUpto_((Trim)",
            "GetFrom_)",
            "Const())",
            "Const(() | Const( ) | Replace_ _.",
            "Replace_._  | Trim",
            "GetSpan_(_-1_START_)_2_START",
            "GetToken_CHAR_1(GetToken_PROP_CASE_1)",
            "ToCase_LOWER(SubStr_1_3)",
            "GetFirst_DIGIT_-2(GetSpan_WORD_1_END_ _1_START)",
        ] {
            let p = parse_program(text, DialectConfig::FULL).unwrap_or_else(|e| panic!("{text}: {e}"));
            assert_eq!(render_program(&p), text);
        }
    }

    #[test]
    fn length_limits() {
        assert_eq!(Program::new(vec![]), Err(DslError::Length(0)));
        let eleven = vec!["Trim"; 11].join(" | ");
        assert!(matches!(parse_program(&eleven, DialectConfig::FULL), Err(DslError::Length(11))));
    }

    #[test]
    fn execute_name_program() {
        assert_eq!(execute(&name_program(), "Mason Smith").unwrap(), "Smith M");
    }

    #[test]
    fn execute_phone_program() {
        let p = parse_program("GetToken_NUMBER_1 | Const(.) | Replace_ _.(SubStr_-8_-1)", DialectConfig::FULL)
            .unwrap();
        assert_eq!(execute(&p, "(321) 704 3331").unwrap(), "321.704.3331");
    }

    #[test]
    fn execute_toy_span() {
        let p = parse_program("GetSpan_ALPHANUM_1_ALPHANUM_1", DialectConfig::TOY).unwrap();
        assert_eq!(execute(&p, ",C,XoC").unwrap(), "C");
    }

    #[test]
    fn substr_clamps_and_fails_when_empty() {
        let p = Program::new(vec![Expression::SubStr(pos(2), pos(50))]).unwrap();
        assert_eq!(execute(&p, "abc").unwrap(), "bc");
        let p = Program::new(vec![Expression::SubStr(pos(-100), pos(1))]).unwrap();
        assert_eq!(execute(&p, "abc").unwrap(), "a");
        let p = Program::new(vec![Expression::SubStr(pos(3), pos(1))]).unwrap();
        assert_eq!(
            execute(&p, "abc").unwrap_err().reason,
            ExecFailure::EmptySubstring
        );
        let p = Program::new(vec![Expression::SubStr(pos(1), pos(1))]).unwrap();
        assert!(execute(&p, "").is_err());
    }

    #[test]
    fn nesting_ops() {
        let run = |text: &str, input: &str| {
            execute(&parse_program(text, DialectConfig::FULL).unwrap(), input)
        };
        assert_eq!(run("ToCase_PROPER", "hELLO wORLD 9x").unwrap(), "Hello World 9X");
        assert_eq!(run("ToCase_ALL_CAPS", "ab1").unwrap(), "AB1");
        assert_eq!(run("ToCase_LOWER", "AB1").unwrap(), "ab1");
        assert_eq!(run("Trim", "  a b  ").unwrap(), "a b");
        assert_eq!(run("Trim", "   ").unwrap(), "");
        assert_eq!(run("GetUpto_,", "ab,cd,e").unwrap(), "ab,");
        assert_eq!(run("GetFrom_,", "ab,cd,e").unwrap(), "cd,e");
        assert_eq!(run("GetFirst_NUMBER_2", "1 a 22 b 333").unwrap(), "122");
        assert_eq!(run("GetFirst_NUMBER_-2", "1 a 22 b 333").unwrap(), "22333");
        assert!(run("GetFirst_NUMBER_4", "1 a 22 b 333").is_err());
        assert_eq!(run("GetAll_NUMBER", "1 a 22 b 333").unwrap(), "1 22 333");
        assert!(run("GetAll_NUMBER", "abc").is_err());
        assert_eq!(run("GetToken_CHAR_-1(GetAll_ALL_CAPS)", "Milk 4, Yoghurt 12, Juice 2, Egg 5").unwrap(), "E");
        assert_eq!(run("GetSpan_WORD_1_END_NUMBER_1_START", "ab 12").unwrap(), " ");
        assert_eq!(
            run("GetSpan_NUMBER_1_WORD_1", "ab 12").unwrap_err().reason,
            ExecFailure::InvertedSpan
        );
    }

    #[test]
    fn consistency() {
        let task = Task::new(
            vec!["Mason Smith".into(), "Henry Myers".into(), "Barry Underwood".into(), "Sandy Jones".into()],
            vec!["Smith M".into(), "Myers H".into(), "Underwood B".into(), "Jones S".into()],
            None,
        )
        .unwrap();
        assert!(is_consistent(&name_program(), &task));
        let x = Program::new(vec![Expression::ConstStr('x')]).unwrap();
        assert!(!is_consistent(&x, &task));
        let failing = parse_program("GetToken_NUMBER_1", DialectConfig::FULL).unwrap();
        assert!(!is_consistent(&failing, &task));
    }

    #[test]
    fn toy_programs_are_full_programs() {
        let text = "GetSpan_WORD_1_NUMBER_1 | GetSpan_WORD_1_,_-1 | GetSpan_NUMBER_2_NUMBER_2";
        let toy = parse_program(text, DialectConfig::TOY).unwrap();
        let full = parse_program(text, DialectConfig::FULL).unwrap();
        assert_eq!(toy, full);
        assert_eq!(
            execute(&toy, ",CNBA,uJke.00 Hm 6938").unwrap(),
            "CNBA,uJke.00CNBA,6938"
        );
    }
}
