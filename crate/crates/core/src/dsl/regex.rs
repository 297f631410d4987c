//! Token-class matching.
//!
//! Classes are scanned left to right with maximal munch and never overlap:
//!
//! | class       | pattern          |
//! |-------------|------------------|
//! | `NUMBER`    | `[0-9]+`         |
//! | `WORD`      | `[A-Za-z]+`      |
//! | `ALPHANUM`  | `[A-Za-z0-9]+`   |
//! | `ALL_CAPS`  | `[A-Z]+`         |
//! | `PROP_CASE` | `[A-Z][a-z]*`    |
//! | `LOWER`     | `[a-z]+`         |
//! | `DIGIT`     | `[0-9]`          |
//! | `CHAR`      | any non-space    |
//!
//! A delimiter matches each of its single occurrences.

use super::ast::{RegexToken, TypeToken};

/// Half-open character span `[start, end)`.
pub type CharSpan = (usize, usize);

/// All matches of `r` in `input`, as character offsets.
pub fn match_spans(input: &str, r: RegexToken) -> Vec<CharSpan> {
    let chars: Vec<char> = input.chars().collect();
    match_spans_chars(&chars, r)
}

pub fn match_spans_chars(chars: &[char], r: RegexToken) -> Vec<CharSpan> {
    match r {
        RegexToken::Delim(d) => {
            let d = d.as_char();
            chars.iter().enumerate().filter(|(_, &c)| c == d).map(|(i, _)| (i, i + 1)).collect()
        }
        RegexToken::Type(t) => scan(chars, t),
    }
}

fn scan(chars: &[char], t: TypeToken) -> Vec<CharSpan> {
    let (head, tail, single): (fn(char) -> bool, fn(char) -> bool, bool) = match t {
        TypeToken::Number => (is_digit, is_digit, false),
        TypeToken::Word => (is_letter, is_letter, false),
        TypeToken::Alphanum => (is_alnum, is_alnum, false),
        TypeToken::AllCaps => (is_upper, is_upper, false),
        TypeToken::PropCase => (is_upper, is_lower, false),
        TypeToken::Lower => (is_lower, is_lower, false),
        TypeToken::Digit => (is_digit, is_digit, true),
        TypeToken::Char => (is_non_space, is_non_space, true),
    };
    let mut out = Vec::new();
    let mut p = 0;
    while p < chars.len() {
        if head(chars[p]) {
            let mut q = p + 1;
            if !single {
                while q < chars.len() && tail(chars[q]) {
                    q += 1;
                }
            }
            out.push((p, q));
            p = q;
        } else {
            p += 1;
        }
    }
    out
}

fn is_digit(c: char) -> bool {
    c.is_ascii_digit()
}
fn is_letter(c: char) -> bool {
    c.is_ascii_alphabetic()
}
fn is_alnum(c: char) -> bool {
    c.is_ascii_alphanumeric()
}
fn is_upper(c: char) -> bool {
    c.is_ascii_uppercase()
}
fn is_lower(c: char) -> bool {
    c.is_ascii_lowercase()
}
fn is_non_space(c: char) -> bool {
    c != ' '
}

/// Selects occurrence `i` (1-based, negative counts from the end).
pub fn occurrence(spans: &[CharSpan], i: i64) -> Option<CharSpan> {
    let m = spans.len() as i64;
    let idx = if i > 0 { i - 1 } else { m + i };
    (0..m).contains(&idx).then(|| spans[idx as usize])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::ast::Delimiter;

    #[test]
    fn all_caps_in_name() {
        assert_eq!(match_spans("Mason Smith", RegexToken::Type(TypeToken::AllCaps)), vec![(0, 1), (6, 7)]);
    }

    #[test]
    fn numbers_in_phone() {
        assert_eq!(
            match_spans("(321) 704 3331", RegexToken::Type(TypeToken::Number)),
            vec![(1, 4), (6, 9), (10, 14)]
        );
    }

    #[test]
    fn empty_input() {
        for t in TypeToken::ALL {
            assert!(match_spans("", RegexToken::Type(t)).is_empty());
        }
    }

    #[test]
    fn delimiter_each_occurrence() {
        let comma = RegexToken::Delim(Delimiter::new(',').unwrap());
        assert_eq!(match_spans(",a,,b", comma), vec![(0, 1), (2, 3), (3, 4)]);
    }

    #[test]
    fn prop_case_single_capitals() {
        let spans = match_spans("US:38 China", RegexToken::Type(TypeToken::PropCase));
        assert_eq!(spans, vec![(0, 1), (1, 2), (6, 11)]);
    }

    #[test]
    fn digit_and_char_are_single() {
        assert_eq!(match_spans("a12", RegexToken::Type(TypeToken::Digit)), vec![(1, 2), (2, 3)]);
        assert_eq!(match_spans("a b", RegexToken::Type(TypeToken::Char)), vec![(0, 1), (2, 3)]);
    }

    #[test]
    fn occurrence_negative_indices() {
        let spans = vec![(0, 1), (2, 3), (4, 5)];
        assert_eq!(occurrence(&spans, 1), Some((0, 1)));
        assert_eq!(occurrence(&spans, -1), Some((4, 5)));
        assert_eq!(occurrence(&spans, -3), Some((0, 1)));
        assert_eq!(occurrence(&spans, 4), None);
        assert_eq!(occurrence(&spans, -4), None);
    }
}
