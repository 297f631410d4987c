//! Execution accuracy, diversity, BLEU, length buckets and latent/operation co-occurrence.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::hash::Hash;

use serde::Serialize;

use crate::dsl::{is_consistent, Boundary, Dialect, Expression, RegexToken, Span};
use crate::model::Model;
use crate::search::{two_level_synthesize, Candidate, SearchConfig, SearchError};
use crate::taskgen::{program_tokens_with_offsets, Task, RESERVED};
use crate::Scalar;

/// Anything that turns a task into ranked candidates.
pub trait Synthesizer: Sync {
    fn synthesize(&self, task: &Task) -> Result<Vec<Candidate>, SearchError>;
}

/// Two-level search over a trained model.
pub struct Searcher<'a, T> {
    pub model: &'a Model<T>,
    pub config: SearchConfig,
}

impl<T: Scalar> Synthesizer for Searcher<'_, T> {
    fn synthesize(&self, task: &Task) -> Result<Vec<Candidate>, SearchError> {
        two_level_synthesize(self.model, task, &self.config)
    }
}

/// Search result for one task. A failed search leaves no candidates.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub candidates: Vec<Candidate>,
    /// Rank of the first consistent candidate.
    pub solved_at: Option<usize>,
    pub error: Option<SearchError>,
}

impl Outcome {
    pub fn solved(&self) -> bool {
        self.solved_at.is_some()
    }

    /// First consistent candidate, else the top one.
    pub fn chosen(&self) -> Option<&Candidate> {
        self.solved_at.map(|i| &self.candidates[i]).or(self.candidates.first())
    }
}

/// Runs the synthesizer on every task, spreading tasks over `workers` threads.
/// The result order follows `tasks` whatever the worker count.
pub fn run<S: Synthesizer>(synth: &S, tasks: &[Task], workers: usize) -> Vec<Outcome> {
    let one = |task: &Task| match synth.synthesize(task) {
        Ok(candidates) => {
            let solved_at = candidates.iter().position(|c| c.program.as_ref().is_some_and(|p| is_consistent(p, task)));
            Outcome { candidates, solved_at, error: None }
        }
        Err(e) => Outcome { candidates: vec![], solved_at: None, error: Some(e) },
    };
    let workers = workers.clamp(1, tasks.len().max(1));
    if workers == 1 {
        return tasks.iter().map(one).collect();
    }
    let mut slots: Vec<Option<Outcome>> = vec![None; tasks.len()];
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let one = &one;
                s.spawn(move || tasks.iter().enumerate().skip(w).step_by(workers).map(|(i, t)| (i, one(t))).collect::<Vec<_>>())
            })
            .collect();
        for h in handles {
            for (i, o) in h.join().expect("search worker panicked") {
                slots[i] = Some(o);
            }
        }
    });
    slots.into_iter().map(|o| o.expect("every task searched")).collect()
}

/// Proportion with a 95% Wilson score interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Accuracy {
    pub solved: usize,
    pub total: usize,
    pub estimate: f64,
    pub low: f64,
    pub high: f64,
}

impl Accuracy {
    pub fn new(solved: usize, total: usize) -> Self {
        assert!(solved <= total);
        if total == 0 {
            return Accuracy { solved, total, estimate: 0.0, low: 0.0, high: 1.0 };
        }
        let z = 1.959_963_984_540_054;
        let n = total as f64;
        let p = solved as f64 / n;
        let denom = 1.0 + z * z / n;
        let centre = (p + z * z / (2.0 * n)) / denom;
        let half = z * (p * (1.0 - p) / n + z * z / (4.0 * n * n)).sqrt() / denom;
        Accuracy { solved, total, estimate: p, low: (centre - half).max(0.0), high: (centre + half).min(1.0) }
    }

    pub fn of(outcomes: &[Outcome]) -> Self {
        Accuracy::new(outcomes.iter().filter(|o| o.solved()).count(), outcomes.len())
    }
}

/// Fraction of tasks whose candidates contain a consistent program.
pub fn accuracy_at_b<S: Synthesizer>(synth: &S, tasks: &[Task], workers: usize) -> Accuracy {
    Accuracy::of(&run(synth, tasks, workers))
}

/// Distinct n-grams across all sequences over the total token count.
pub fn distinct_ngrams<T: Hash + Eq>(beams: &[Vec<T>], n: usize) -> f64 {
    assert!(n >= 1, "n-grams need n >= 1");
    let total: usize = beams.iter().map(Vec::len).sum();
    if total == 0 {
        return 0.0;
    }
    let mut seen = std::collections::HashSet::new();
    for b in beams {
        for w in b.windows(n) {
            seen.insert(w);
        }
    }
    seen.len() as f64 / total as f64
}

/// Mean distinct-n ratio of the candidate programs, one beam per task.
pub fn mean_diversity(outcomes: &[Outcome], n: usize) -> f64 {
    let searched: Vec<&Outcome> = outcomes.iter().filter(|o| !o.candidates.is_empty()).collect();
    if searched.is_empty() {
        return 0.0;
    }
    let sum: f64 = searched
        .iter()
        .map(|o| distinct_ngrams(&o.candidates.iter().map(|c| c.tokens.clone()).collect::<Vec<_>>(), n))
        .sum();
    sum / searched.len() as f64
}

fn ngram_counts<T: Hash + Eq>(s: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    for w in s.windows(n) {
        *m.entry(w).or_insert(0) += 1;
    }
    m
}

pub const BLEU_SMOOTHING: f64 = 1e-9;

/// Geometric mean of clipped n-gram precisions for n = 1..4, without a brevity penalty.
/// A zero match count becomes `BLEU_SMOOTHING`. An order neither sequence is long enough
/// to contain counts as a perfect match.
pub fn bleu<T: Hash + Eq>(candidate: &[T], reference: &[T]) -> f64 {
    assert!(!candidate.is_empty() && !reference.is_empty(), "bleu of an empty sequence");
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let cand = ngram_counts(candidate, n);
        let refs = ngram_counts(reference, n);
        let total: usize = cand.values().sum();
        let p = if total == 0 {
            if refs.is_empty() {
                1.0
            } else {
                BLEU_SMOOTHING
            }
        } else {
            let matched: usize = cand.iter().map(|(g, &c)| c.min(refs.get(g).copied().unwrap_or(0))).sum();
            if matched == 0 {
                BLEU_SMOOTHING / total as f64
            } else {
                matched as f64 / total as f64
            }
        };
        log_sum += p.ln();
    }
    (log_sum / 4.0).exp()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BucketRow {
    /// Expression count of the ground-truth program.
    pub length: usize,
    #[serde(flatten)]
    pub accuracy: Accuracy,
}

/// Accuracy grouped by ground-truth program length; tasks without a program are skipped
/// and lengths with no tasks are omitted.
pub fn length_buckets(tasks: &[Task], outcomes: &[Outcome]) -> Vec<BucketRow> {
    assert_eq!(tasks.len(), outcomes.len(), "one outcome per task");
    let mut buckets: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (t, o) in tasks.iter().zip(outcomes) {
        if let Some(p) = &t.program {
            let e = buckets.entry(p.len()).or_default();
            e.0 += usize::from(o.solved());
            e.1 += 1;
        }
    }
    buckets.into_iter().map(|(length, (s, n))| BucketRow { length, accuracy: Accuracy::new(s, n) }).collect()
}

pub fn length_bucket_report<S: Synthesizer>(synth: &S, tasks: &[Task], workers: usize) -> Vec<BucketRow> {
    length_buckets(tasks, &run(synth, tasks, workers))
}

/// Operation family of an expression. In the toy dialect only first/last same-type spans
/// have a family; the full dialect uses the constructor.
pub fn operation_family(e: &Expression, dialect: Dialect) -> Option<String> {
    match dialect {
        Dialect::Toy => match e {
            Expression::GetSpan(Span { r1: RegexToken::Type(t1), i1, b1: Boundary::Start, r2: RegexToken::Type(t2), i2, b2: Boundary::End })
                if t1 == t2 && i1 == i2 =>
            {
                let which = match i1.get() {
                    1 => "First",
                    -1 => "Last",
                    _ => return None,
                };
                let kind = match t1.name() {
                    "NUMBER" => "Number",
                    "WORD" => "Word",
                    "ALPHANUM" => "Alphanum",
                    _ => return None,
                };
                Some(format!("Get {which} {kind}"))
            }
            _ => None,
        },
        Dialect::Full => Some(
            match e {
                Expression::ConstStr(_) => "ConstStr",
                Expression::SubStr(..) => "SubStr",
                Expression::GetSpan(_) => "GetSpan",
                Expression::Nesting(_) => "Nesting",
                Expression::Compose(..) => "Compose",
            }
            .to_string(),
        ),
    }
}

/// Counts of (operation family, latent code) pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct Cooccurrence {
    pub k: usize,
    pub counts: BTreeMap<String, Vec<usize>>,
}

impl Cooccurrence {
    pub fn new(k: usize) -> Self {
        Cooccurrence { k, counts: BTreeMap::new() }
    }

    pub fn add(&mut self, family: &str, code: usize) {
        self.counts.entry(family.to_string()).or_insert_with(|| vec![0; self.k])[code] += 1;
    }

    /// Each row as percentages of its total.
    pub fn percentages(&self) -> Vec<(String, Vec<f64>)> {
        self.counts
            .iter()
            .map(|(name, row)| {
                let n: usize = row.iter().sum();
                (name.clone(), row.iter().map(|&c| 100.0 * c as f64 / n as f64).collect())
            })
            .collect()
    }

    /// Share (0..1) of the most frequent code in each row.
    pub fn modal_shares(&self) -> Vec<(String, usize, f64)> {
        self.counts
            .iter()
            .map(|(name, row)| {
                let n: usize = row.iter().sum();
                let (code, &c) = row.iter().enumerate().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0))).expect("k >= 1");
                (name.clone(), code, c as f64 / n as f64)
            })
            .collect()
    }
}

/// Aligns each expression of the chosen program with the latent position holding its first
/// token (`offset / 2^compression`). Expressions past the end of the latent are not counted.
pub fn cooccurrence_from(outcomes: &[Outcome], dialect: Dialect, compression: usize, k: usize) -> Cooccurrence {
    let mut m = Cooccurrence::new(k);
    for o in outcomes {
        let Some(c) = o.chosen() else { continue };
        let Some(p) = &c.program else { continue };
        let (_, offsets) = program_tokens_with_offsets(p, dialect);
        for (e, &off) in p.expressions().iter().zip(&offsets) {
            let (Some(family), Some(&id)) = (operation_family(e, dialect), c.latent.get(off >> compression)) else {
                continue;
            };
            m.add(&family, id - RESERVED);
        }
    }
    m
}

pub fn latent_cooccurrence<T: Scalar>(model: &Model<T>, tasks: &[Task], config: SearchConfig, workers: usize) -> Cooccurrence {
    if model.config.dialect == Dialect::Full {
        log::warn!("co-occurrence on the full dialect is harder to interpret than on the toy dialect");
    }
    let outcomes = run(&Searcher { model, config }, tasks, workers);
    cooccurrence_from(&outcomes, model.config.dialect, model.config.compression, model.config.codes)
}

fn csv_string(write: impl FnOnce(&mut csv::Writer<Vec<u8>>) -> csv::Result<()>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    write(&mut w).expect("writing to memory");
    String::from_utf8(w.into_inner().expect("flush to memory")).expect("csv is utf-8")
}

pub fn accuracy_csv(a: &Accuracy) -> String {
    csv_string(|w| w.serialize(a))
}

pub fn buckets_csv(rows: &[BucketRow]) -> String {
    csv_string(|w| {
        w.write_record(["length", "solved", "total", "estimate", "low", "high"])?;
        for r in rows {
            let a = &r.accuracy;
            w.write_record([r.length.to_string(), a.solved.to_string(), a.total.to_string(), a.estimate.to_string(), a.low.to_string(), a.high.to_string()])?;
        }
        Ok(())
    })
}

pub fn cooccurrence_csv(m: &Cooccurrence) -> String {
    csv_string(|w| {
        let mut header = vec!["operation".to_string()];
        header.extend((0..m.k).map(|k| format!("TOK_{k}")));
        w.write_record(&header)?;
        for (name, row) in m.percentages() {
            let mut rec = vec![name];
            rec.extend(row.iter().map(|p| format!("{p:.2}")));
            w.write_record(&rec)?;
        }
        Ok(())
    })
}

/// Left-aligned first column, right-aligned rest.
pub fn text_table(header: &[String], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(String::len).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    for r in std::iter::once(header).chain(rows.iter().map(Vec::as_slice)) {
        let cells: Vec<String> = r
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, &w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        let _ = writeln!(out, "{}", cells.join("  ").trim_end());
    }
    out
}

pub fn cooccurrence_text(m: &Cooccurrence) -> String {
    let mut header = vec!["operation".to_string()];
    header.extend((0..m.k).map(|k| format!("TOK_{k}")));
    let rows: Vec<Vec<String>> = m
        .percentages()
        .into_iter()
        .map(|(name, row)| std::iter::once(name).chain(row.iter().map(|p| format!("{p:.1}"))).collect())
        .collect();
    text_table(&header, &rows)
}

pub fn buckets_text(rows: &[BucketRow]) -> String {
    let header: Vec<String> = ["length", "solved", "total", "accuracy", "95% interval"].map(String::from).to_vec();
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let a = &r.accuracy;
            vec![
                r.length.to_string(),
                a.solved.to_string(),
                a.total.to_string(),
                format!("{:.3}", a.estimate),
                format!("[{:.3}, {:.3}]", a.low, a.high),
            ]
        })
        .collect();
    text_table(&header, &body)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::{parse_program, DialectConfig, Program};
    use crate::taskgen::{generate_dataset, GenConfig};
    use proptest::prelude::*;

    fn words(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn distinct_ngram_fixtures() {
        assert_eq!(distinct_ngrams(&[words("a b"), words("a b")], 1), 0.5);
        let ten: Vec<Vec<usize>> = vec![(0..10).collect(); 10];
        assert_eq!(distinct_ngrams(&ten, 2), 0.09);
        assert_eq!(distinct_ngrams(&[words("a")], 2), 0.0);
        assert_eq!(distinct_ngrams::<usize>(&[], 1), 0.0);
    }

    #[test]
    fn bleu_fixtures() {
        assert_eq!(bleu(&words("a b c d e"), &words("a b c d e")), 1.0);
        let want = (0.8f64 * 0.75 * (2.0 / 3.0) * 0.5).powf(0.25);
        assert!((bleu(&words("a b c d e"), &words("a b c d f")) - want).abs() < 1e-12);
        assert!(bleu(&words("a b c"), &words("x y z")) < 1e-6);
        assert_eq!(bleu(&words("a b"), &words("a b")), 1.0);
        // The reference has a trigram the candidate cannot match; neither has a 4-gram.
        assert!((bleu(&words("a b"), &words("a b c")) - BLEU_SMOOTHING.powf(0.25)).abs() < 1e-12);
    }

    #[test]
    fn wilson_interval() {
        // 8 of 10 gives the textbook interval [0.490, 0.943].
        let a = Accuracy::new(8, 10);
        assert!((a.low - 0.4902).abs() < 1e-3 && (a.high - 0.9433).abs() < 1e-3, "{a:?}");
        let z = Accuracy::new(0, 100);
        assert!(z.low.abs() < 1e-12);
        assert!(z.high > 0.03 && z.high < 0.04);
    }

    /// Returns the ground truth first, behind a decoy.
    struct Oracle {
        decoy: bool,
    }

    impl Synthesizer for Oracle {
        fn synthesize(&self, task: &Task) -> Result<Vec<Candidate>, SearchError> {
            let p = task.program.clone().ok_or(SearchError::EmptyBeam)?;
            let mut out = Vec::new();
            if self.decoy {
                out.push(cand(None, vec![]));
            }
            out.push(cand(Some(p), vec![]));
            Ok(out)
        }
    }

    fn cand(program: Option<Program>, latent: Vec<usize>) -> Candidate {
        Candidate { latent, tokens: vec![], latent_score: 0.0, program_score: 0.0, score: 0.0, program }
    }

    #[test]
    fn oracle_synthesizer_scores_one() {
        let tasks = generate_dataset(&GenConfig::toy(11), 20).unwrap();
        for workers in [1, 3] {
            let a = accuracy_at_b(&Oracle { decoy: true }, &tasks, workers);
            assert_eq!((a.solved, a.total, a.estimate), (20, 20, 1.0));
        }
        let outcomes = run(&Oracle { decoy: true }, &tasks, 2);
        assert!(outcomes.iter().all(|o| o.solved_at == Some(1)));
        let mut stripped = tasks.clone();
        stripped[0].program = None;
        let o = run(&Oracle { decoy: false }, &stripped, 1);
        assert!(o[0].error.is_some() && !o[0].solved());
        assert_eq!(Accuracy::of(&o).solved, 19);
    }

    #[test]
    fn buckets_by_length() {
        let mut tasks = generate_dataset(&GenConfig { max_expressions: 1, ..GenConfig::toy(5) }, 6).unwrap();
        let outcomes = run(&Oracle { decoy: false }, &tasks, 1);
        let rows = length_buckets(&tasks, &outcomes);
        assert_eq!(rows.len(), 1);
        assert_eq!((rows[0].length, rows[0].accuracy.total), (1, 6));
        tasks.extend(generate_dataset(&GenConfig { max_expressions: 4, ..GenConfig::toy(6) }, 30).unwrap());
        let rows = length_buckets(&tasks, &run(&Oracle { decoy: false }, &tasks, 1));
        let lens: Vec<usize> = rows.iter().map(|r| r.length).collect();
        assert!(lens.windows(2).all(|w| w[0] < w[1]));
        assert!(rows.iter().all(|r| r.accuracy.total > 0));
        assert_eq!(rows.iter().map(|r| r.accuracy.total).sum::<usize>(), 36);
        let text = buckets_text(&rows);
        assert_eq!(text.lines().count(), rows.len() + 1);
        assert_eq!(buckets_csv(&rows).lines().count(), rows.len() + 1);
    }

    #[test]
    fn toy_families() {
        let p = parse_program(
            "GetSpan_NUMBER_1_NUMBER_1 | GetSpan_WORD_-1_WORD_-1 | GetSpan_ALPHANUM_2_ALPHANUM_2 | GetSpan_WORD_1_NUMBER_1",
            DialectConfig::TOY,
        )
        .unwrap();
        let fams: Vec<_> = p.expressions().iter().map(|e| operation_family(e, Dialect::Toy)).collect();
        assert_eq!(fams, vec![Some("Get First Number".into()), Some("Get Last Word".into()), None, None]);
    }

    #[test]
    fn cooccurrence_alignment_and_rows() {
        // Toy tokens: one per expression, so with compression 1 expressions 0,1 share latent 0.
        let p = parse_program("GetSpan_NUMBER_1_NUMBER_1 | GetSpan_WORD_-1_WORD_-1 | GetSpan_WORD_1_WORD_1", DialectConfig::TOY).unwrap();
        let latent = vec![RESERVED + 2, RESERVED];
        let o = Outcome { candidates: vec![cand(Some(p.clone()), latent)], solved_at: None, error: None };
        let m = cooccurrence_from(&[o.clone(), o], Dialect::Toy, 1, 3);
        assert_eq!(m.counts["Get First Number"], vec![0, 0, 2]);
        assert_eq!(m.counts["Get Last Word"], vec![0, 0, 2]);
        assert_eq!(m.counts["Get First Word"], vec![2, 0, 0]);
        for (_, row) in m.percentages() {
            assert!((row.iter().sum::<f64>() - 100.0).abs() < 0.1);
        }
        // A short latent drops the unaligned expression.
        let o = Outcome { candidates: vec![cand(Some(p), vec![RESERVED + 1])], solved_at: None, error: None };
        let m = cooccurrence_from(&[o], Dialect::Toy, 1, 3);
        assert!(!m.counts.contains_key("Get First Word"));
        assert!(m.modal_shares().iter().all(|(_, code, share)| *code == 1 && *share == 1.0));
        assert_eq!(cooccurrence_csv(&m).lines().count(), m.counts.len() + 1);
        assert!(cooccurrence_text(&m).starts_with("operation"));
    }

    proptest! {
        #[test]
        fn distinct_in_unit_interval_and_order_free(beams in prop::collection::vec(prop::collection::vec(0u8..4, 0..8), 0..6), n in 1usize..4) {
            let d = distinct_ngrams(&beams, n);
            prop_assert!((0.0..=1.0).contains(&d));
            let mut rev = beams.clone();
            rev.reverse();
            prop_assert_eq!(d, distinct_ngrams(&rev, n));
        }

        #[test]
        fn bleu_relabel_and_identity(a in prop::collection::vec(0u8..5, 1..12), b in prop::collection::vec(0u8..5, 1..12), shift in 1u8..50) {
            let relabel = |s: &[u8]| s.iter().map(|&x| x.wrapping_mul(3).wrapping_add(shift)).collect::<Vec<_>>();
            let s = bleu(&a, &b);
            prop_assert!((0.0..=1.0 + 1e-12).contains(&s));
            prop_assert!((s - bleu(&relabel(&a), &relabel(&b))).abs() < 1e-12);
            prop_assert_eq!(bleu(&a, &a), 1.0);
        }
    }
}
