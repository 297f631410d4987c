//! Beam search and two-level synthesis.

use std::cmp::Ordering;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::dsl::{is_consistent, render_program, Program};
use crate::model::{Model, ModelError};
use crate::taskgen::{decode_program, Task, BOS, EOS, PAD, RESERVED};
use crate::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// BOS first; ends with EOS when finished.
    pub tokens: Vec<usize>,
    pub score: f64,
    pub finished: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SearchError {
    #[error("no hypothesis finished within the length limit")]
    EmptyBeam,
    #[error("invalid search config: {0}")]
    Config(String),
    #[error("model error: {0}")]
    Model(String),
}

impl From<ModelError> for SearchError {
    fn from(e: ModelError) -> Self {
        SearchError::Model(e.to_string())
    }
}

/// Higher score first, then lexicographically smaller tokens.
fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal).then_with(|| a.tokens.cmp(&b.tokens))
}

/// Beam search scored by summed log-probabilities. `scorer` gets the token lists of all
/// live hypotheses and returns one log-distribution over token ids for each; `-inf` entries
/// are never expanded. Finished hypotheses stay in the beam without being extended.
/// Returns the finished hypotheses, best first.
pub fn beam_search<F>(mut scorer: F, beam: usize, max_len: usize) -> Result<Vec<Hypothesis>, SearchError>
where
    F: FnMut(&[Vec<usize>]) -> Vec<Vec<f64>>,
{
    if beam == 0 {
        return Err(SearchError::Config("beam size must be positive".into()));
    }
    let mut beams = vec![Hypothesis { tokens: vec![BOS], score: 0.0, finished: false }];
    for _ in 0..max_len {
        let live: Vec<&Hypothesis> = beams.iter().filter(|h| !h.finished).collect();
        if live.is_empty() {
            break;
        }
        let prefixes: Vec<Vec<usize>> = live.iter().map(|h| h.tokens.clone()).collect();
        let dists = scorer(&prefixes);
        assert_eq!(dists.len(), prefixes.len(), "one distribution per hypothesis");
        let mut next: Vec<Hypothesis> = beams.iter().filter(|h| h.finished).cloned().collect();
        for (h, dist) in live.iter().zip(&dists) {
            for (tok, &lp) in dist.iter().enumerate() {
                if lp == f64::NEG_INFINITY || lp.is_nan() {
                    continue;
                }
                let mut tokens = h.tokens.clone();
                tokens.push(tok);
                next.push(Hypothesis { tokens, score: h.score + lp, finished: tok == EOS });
            }
        }
        next.sort_by(rank);
        next.truncate(beam);
        beams = next;
    }
    let mut done: Vec<Hypothesis> = beams.into_iter().filter(|h| h.finished).collect();
    if done.is_empty() {
        return Err(SearchError::EmptyBeam);
    }
    done.sort_by(rank);
    Ok(done)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ranking {
    /// Latent plus program log-probability.
    Joint,
    /// Program log-probability only.
    Program,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub beam: usize,
    pub latent_beams: usize,
    pub max_latent_len: usize,
    pub max_program_len: usize,
    pub ranking: Ranking,
}

impl SearchConfig {
    /// Length limits sized for `model`'s dialect.
    pub fn for_model<T: Scalar>(model: &Model<T>, beam: usize, latent_beams: usize) -> Self {
        let max_program_len = match model.config.dialect {
            crate::dsl::Dialect::Toy => 10,
            crate::dsl::Dialect::Full => 30,
        } + 1;
        SearchConfig {
            beam,
            latent_beams,
            max_latent_len: model.config.latent_len(max_program_len - 1) + 1,
            max_program_len,
            ranking: Ranking::Joint,
        }
    }

    pub fn validate(&self) -> Result<(), SearchError> {
        if self.latent_beams == 0 || self.latent_beams > self.beam {
            return Err(SearchError::Config(format!(
                "need 1 <= latent beams ({}) <= beam ({})",
                self.latent_beams, self.beam
            )));
        }
        if self.max_latent_len == 0 || self.max_program_len == 0 {
            return Err(SearchError::Config("length limits must be positive".into()));
        }
        Ok(())
    }

    pub fn programs_per_code(&self) -> usize {
        self.beam / self.latent_beams
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    /// Latent ids between BOS and EOS; empty for the baseline decoder.
    pub latent: Vec<usize>,
    /// Program ids between BOS and EOS.
    pub tokens: Vec<usize>,
    pub latent_score: f64,
    pub program_score: f64,
    pub score: f64,
    /// `None` when the tokens do not form a program.
    pub program: Option<Program>,
}

impl Candidate {
    pub fn text(&self) -> Option<String> {
        self.program.as_ref().map(render_program)
    }
}

fn strip(tokens: &[usize]) -> Vec<usize> {
    let end = if tokens.last() == Some(&EOS) { tokens.len() - 1 } else { tokens.len() };
    tokens[1..end].to_vec()
}

/// Latent codes from the predictor: `(latent ids, log-probability)`, best first.
pub fn latent_beam<T: Scalar>(
    model: &Model<T>,
    spec: &crate::model::SpecCache<T>,
    beam: usize,
    max_len: usize,
) -> Result<Vec<(Vec<usize>, f64)>, SearchError> {
    let k = model.config.codes;
    let hyps = beam_search(
        |prefixes| {
            let codes: Vec<Vec<usize>> = prefixes.iter().map(|p| p[1..].iter().map(|&t| t - RESERVED).collect()).collect();
            model
                .latent_next(spec, &codes)
                .into_iter()
                .map(|d| {
                    let mut full = vec![f64::NEG_INFINITY; RESERVED + k];
                    full[EOS] = d[k];
                    full[RESERVED..].copy_from_slice(&d[..k]);
                    full
                })
                .collect()
        },
        beam,
        max_len,
    )?;
    Ok(hyps.into_iter().map(|h| (strip(&h.tokens), h.score)).collect())
}

/// Programs from the decoder given latent ids (or none for the baseline), best first.
pub fn program_beam<T: Scalar>(
    model: &Model<T>,
    spec: &crate::model::SpecCache<T>,
    latent: Option<&[usize]>,
    beam: usize,
    max_len: usize,
) -> Result<Vec<Hypothesis>, SearchError> {
    let codes: Option<Vec<usize>> = latent.map(|l| l.iter().map(|&t| t - RESERVED).collect());
    beam_search(
        |prefixes| {
            let mut d = model.program_next(spec, codes.as_deref(), prefixes);
            for row in &mut d {
                row[PAD] = f64::NEG_INFINITY;
                row[BOS] = f64::NEG_INFINITY;
            }
            d
        },
        beam,
        max_len,
    )
}

/// Latent beam of width `L`, then a program beam of width `B / L` under each code.
/// Candidates are deduplicated by program text and ranked by the configured score.
pub fn two_level_synthesize<T: Scalar>(
    model: &Model<T>,
    task: &Task,
    cfg: &SearchConfig,
) -> Result<Vec<Candidate>, SearchError> {
    two_level_candidates(model, task, cfg).map(dedup_and_rank)
}

/// Every finished program of every latent beam, in search order and without deduplication.
pub fn two_level_candidates<T: Scalar>(
    model: &Model<T>,
    task: &Task,
    cfg: &SearchConfig,
) -> Result<Vec<Candidate>, SearchError> {
    cfg.validate()?;
    let enc = model.encode(task)?;
    let spec = model.spec_cache(&enc.io);
    let mut out = Vec::new();
    if model.config.baseline {
        for h in program_beam(model, &spec, None, cfg.beam, cfg.max_program_len)? {
            out.push(candidate(model, vec![], 0.0, &h, cfg.ranking));
        }
    } else {
        let codes = latent_beam(model, &spec, cfg.latent_beams, cfg.max_latent_len)?;
        let per_code = cfg.programs_per_code();
        for (latent, f) in codes.into_iter().take(cfg.latent_beams) {
            match program_beam(model, &spec, Some(&latent), per_code, cfg.max_program_len) {
                Ok(hyps) => {
                    for h in hyps.iter().take(per_code) {
                        out.push(candidate(model, latent.clone(), f, h, cfg.ranking));
                    }
                }
                Err(SearchError::EmptyBeam) => log::debug!("no program finished under latent {latent:?}"),
                Err(e) => return Err(e),
            }
        }
    }
    if out.is_empty() {
        return Err(SearchError::EmptyBeam);
    }
    Ok(out)
}

fn candidate<T: Scalar>(model: &Model<T>, latent: Vec<usize>, f: f64, h: &Hypothesis, ranking: Ranking) -> Candidate {
    let tokens = strip(&h.tokens);
    let program = decode_program(&h.tokens, &model.vocab).ok();
    let score = match ranking {
        Ranking::Joint => f + h.score,
        Ranking::Program => h.score,
    };
    Candidate { latent, tokens, latent_score: f, program_score: h.score, score, program }
}

fn dedup_and_rank(mut cands: Vec<Candidate>) -> Vec<Candidate> {
    cands.sort_by(|a, b| {
        b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal).then_with(|| a.tokens.cmp(&b.tokens)).then_with(|| a.latent.cmp(&b.latent))
    });
    let mut seen: HashMap<String, ()> = HashMap::new();
    cands
        .into_iter()
        .filter(|c| {
            let key = c.text().unwrap_or_else(|| format!("{:?}", c.tokens));
            seen.insert(key, ()).is_none()
        })
        .collect()
}

/// First candidate that parses and solves every example.
pub fn first_consistent<'a>(candidates: &'a [Candidate], task: &Task) -> Option<&'a Candidate> {
    candidates.iter().find(|c| c.program.as_ref().is_some_and(|p| is_consistent(p, task)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::{parse_program, DialectConfig};
    use crate::model::ModelConfig;
    use crate::taskgen::{generate_dataset, GenConfig};
    use proptest::prelude::*;

    /// Fixed next-token table depending on the previous token only.
    fn table_scorer(table: Vec<Vec<f64>>) -> impl FnMut(&[Vec<usize>]) -> Vec<Vec<f64>> {
        move |prefixes| prefixes.iter().map(|p| table[*p.last().unwrap()].iter().map(|x| x.ln()).collect()).collect()
    }

    /// All sequences ending in EOS within `max_len` steps, by exhaustive enumeration.
    fn enumerate(table: &[Vec<f64>], max_len: usize) -> Vec<Hypothesis> {
        let mut out = Vec::new();
        let mut frontier = vec![(vec![BOS], 0.0)];
        for _ in 0..max_len {
            let mut next = Vec::new();
            for (toks, s) in frontier {
                let last = *toks.last().unwrap();
                for (t, &p) in table[last].iter().enumerate() {
                    if p == 0.0 {
                        continue;
                    }
                    let mut nt = toks.clone();
                    nt.push(t);
                    let ns = s + p.ln();
                    if t == EOS {
                        out.push(Hypothesis { tokens: nt, score: ns, finished: true });
                    } else {
                        next.push((nt, ns));
                    }
                }
            }
            frontier = next;
        }
        out.sort_by(rank);
        out
    }

    fn three_state_table() -> Vec<Vec<f64>> {
        // Tokens: 0 unused, 1 BOS, 2 EOS, 3 A.
        vec![
            vec![0.0, 0.0, 0.5, 0.5],
            vec![0.0, 0.0, 0.3, 0.7],
            vec![0.0, 0.0, 1.0, 0.0],
            vec![0.0, 0.0, 0.4, 0.6],
        ]
    }

    #[test]
    fn matches_enumeration() {
        let table = three_state_table();
        for max_len in 1..=5 {
            let beam = 4usize.pow(max_len as u32);
            let got = beam_search(table_scorer(table.clone()), beam, max_len).unwrap();
            let want = enumerate(&table, max_len);
            assert_eq!(got.len(), want.len());
            for (a, b) in got.iter().zip(&want) {
                assert_eq!(a.tokens, b.tokens);
                assert!((a.score - b.score).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn beam_one_is_greedy() {
        let table = vec![
            vec![0.0, 0.0, 0.5, 0.5, 0.0],
            vec![0.0, 0.0, 0.1, 0.5, 0.4],
            vec![0.0, 0.0, 1.0, 0.0, 0.0],
            vec![0.0, 0.0, 0.2, 0.1, 0.7],
            vec![0.0, 0.0, 0.9, 0.05, 0.05],
        ];
        let got = beam_search(table_scorer(table), 1, 6).unwrap();
        assert_eq!(got[0].tokens, vec![BOS, 3, 4, EOS]);
    }

    #[test]
    fn max_len_one_gives_top_single_tokens() {
        let got = beam_search(table_scorer(three_state_table()), 3, 1).unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].tokens, vec![BOS, EOS]);
        assert!(matches!(
            beam_search(|p: &[Vec<usize>]| vec![vec![f64::NEG_INFINITY, 0.0, f64::NEG_INFINITY, 0.0]; p.len()], 2, 1),
            Err(SearchError::EmptyBeam)
        ));
    }

    #[test]
    fn ties_break_lexicographically() {
        let uniform = |p: &[Vec<usize>]| vec![vec![f64::NEG_INFINITY, f64::NEG_INFINITY, 0.5f64.ln(), 0.25f64.ln(), 0.25f64.ln()]; p.len()];
        let got = beam_search(uniform, 10, 2).unwrap();
        let toks: Vec<_> = got.iter().map(|h| h.tokens.clone()).collect();
        assert_eq!(toks[0], vec![BOS, EOS]);
        assert_eq!(toks[1], vec![BOS, 3, EOS]);
        assert_eq!(toks[2], vec![BOS, 4, EOS]);
    }

    proptest! {
        #[test]
        fn random_tables_match_enumeration(seed in 0u64..500, vocab in 3usize..=4, max_len in 1usize..=5) {
            use rand::{Rng, SeedableRng};
            let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let table: Vec<Vec<f64>> = (0..vocab)
                .map(|_| {
                    let mut row: Vec<f64> = (0..vocab).map(|t| if t < 2 { 0.0 } else { r.gen_range(0.05..1.0) }).collect();
                    let z: f64 = row.iter().sum();
                    row.iter_mut().for_each(|x| *x /= z);
                    row
                })
                .collect();
            let got = beam_search(table_scorer(table.clone()), vocab.pow(max_len as u32), max_len).unwrap();
            let want = enumerate(&table, max_len);
            prop_assert_eq!(got.len(), want.len());
            for (a, b) in got.iter().zip(&want) {
                prop_assert_eq!(&a.tokens, &b.tokens);
                prop_assert!((a.score - b.score).abs() < 1e-5);
            }
            for w in got.windows(2) {
                prop_assert!(w[0].score >= w[1].score);
            }
        }
    }

    /// Untrained model biased towards EOS at both levels so beams finish.
    fn tiny_model() -> Model<f32> {
        let mut m: Model<f32> =
            Model::new(ModelConfig { embed_dim: 8, hidden: 8, layers: 1, heads: 2, codes: 4, seed: 1, ..ModelConfig::toy() }).unwrap();
        let bias = m.params.id("dec_out.b").unwrap();
        m.params.value_mut(bias).data_mut()[EOS] = 3.0;
        let bias = m.params.id("lp_out.b").unwrap();
        m.params.value_mut(bias).data_mut()[4] = 3.0;
        m
    }

    #[test]
    fn candidate_budget_and_l1_reduction() {
        let m = tiny_model();
        let task = generate_dataset(&GenConfig::toy(3), 1).unwrap().remove(0);
        for (b, l) in [(10, 3), (4, 1), (9, 9), (7, 2)] {
            let cfg = SearchConfig::for_model(&m, b, l);
            let c = two_level_synthesize(&m, &task, &cfg).unwrap();
            assert!(c.len() <= l * (b / l));
        }
        let cfg = SearchConfig::for_model(&m, 5, 1);
        let two = two_level_synthesize(&m, &task, &cfg).unwrap();
        let spec = m.spec_cache(&m.encode(&task).unwrap().io);
        let (top, _) = latent_beam(&m, &spec, 1, cfg.max_latent_len).unwrap().remove(0);
        let single = program_beam(&m, &spec, Some(&top), 5, cfg.max_program_len).unwrap();
        let a: Vec<_> = two.iter().map(|c| c.tokens.clone()).collect();
        let b: Vec<_> = single.iter().map(|h| strip(&h.tokens)).collect();
        assert_eq!(a, b);
        assert!(matches!(two_level_synthesize(&m, &task, &SearchConfig::for_model(&m, 2, 3)), Err(SearchError::Config(_))));
    }

    #[test]
    fn first_consistent_cases() {
        let task = generate_dataset(&GenConfig::toy(4), 1).unwrap().remove(0);
        let truth = task.program.clone().unwrap();
        let wrong = parse_program("GetSpan_WORD_1_WORD_1 | GetSpan_NUMBER_1_NUMBER_1", DialectConfig::TOY).unwrap();
        let mk = |p: Option<Program>, s: f64| Candidate { latent: vec![], tokens: vec![], latent_score: 0.0, program_score: s, score: s, program: p };
        let cands = vec![mk(None, -1.0), mk(Some(wrong.clone()), -2.0), mk(Some(truth.clone()), -3.0)];
        let wrong_is_right = is_consistent(&wrong, &task);
        let found = first_consistent(&cands, &task).unwrap();
        assert_eq!(found.program.as_ref().unwrap(), if wrong_is_right { &wrong } else { &truth });
        assert!(first_consistent(&cands[..2], &task).is_none() || wrong_is_right);
        assert!(first_consistent(&[], &task).is_none());
    }
}
