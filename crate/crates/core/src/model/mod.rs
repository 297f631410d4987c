//! The spec encoder, program encoder, latent predictor and program decoder.

mod loss;
#[cfg(test)]
mod tests;

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsl::Dialect;
use crate::nn::{
    log_softmax, positions, uniform, Conv1d, Embedding, Graph, LayerDims, Linear, Mask, ParamId, ParamStore,
    ShapeError, Tensor, TransformerStack, Var,
};
use crate::taskgen::{encode_io, encode_program, EncodedIo, Stream, Task, VocabError, Vocabulary, BOS, EOS};
use crate::vq::{Codebook, VqConfig};
use crate::Scalar;

pub use loss::{LossOutput, LossParts, QuantMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub dialect: Dialect,
    pub embed_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    /// Number of stride-2 convolutions in the program encoder.
    pub compression: usize,
    pub codes: usize,
    /// Decoder without latent codes.
    pub baseline: bool,
    pub vq: VqConfig,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dialect: Dialect::Full,
            embed_dim: 128,
            hidden: 512,
            layers: 3,
            heads: 4,
            compression: 2,
            codes: 40,
            baseline: false,
            vq: VqConfig::default(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn toy() -> Self {
        ModelConfig { dialect: Dialect::Toy, codes: 10, ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(format!("embed_dim {} is not divisible by {} heads", self.embed_dim, self.heads));
        }
        if self.codes < 2 {
            return Err("at least two latent codes are needed".into());
        }
        if self.layers == 0 || self.hidden == 0 {
            return Err("layers and hidden width must be positive".into());
        }
        Ok(())
    }

    /// Latent length for a program of `t` tokens.
    pub fn latent_len(&self, t: usize) -> usize {
        t.div_ceil(1 << self.compression)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("task has no program")]
    MissingProgram,
    #[error("invalid model config: {0}")]
    Config(String),
}

/// A task turned into ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoded {
    pub io: EncodedIo,
    /// Program ids without BOS/EOS, when the task has a program.
    pub program: Option<Vec<usize>>,
}

/// Spec encodings of a set of tasks, stacked by example.
pub struct SpecBatch {
    pub enc: Var,
    /// Rows of each example's encoding.
    pub lens: Vec<usize>,
    pub offsets: Vec<usize>,
    /// Examples of each task.
    pub tasks: Vec<Range<usize>>,
}

/// Spec encoding of one task kept outside any graph, for search.
#[derive(Debug, Clone, PartialEq)]
pub struct SpecCache<T> {
    pub enc: Tensor<T>,
    pub lens: Vec<usize>,
}

#[derive(Debug, Clone)]
struct Parts {
    char_emb: Embedding,
    program_emb: Embedding,
    spec_in: TransformerStack,
    spec_out: TransformerStack,
    prog_enc: TransformerStack,
    convs: Vec<Conv1d>,
    lp_bos: ParamId,
    lp_stack: TransformerStack,
    lp_out: Linear,
    dec_spec: TransformerStack,
    dec_latent: TransformerStack,
    dec_out: Linear,
}

/// All parameters and the codebook.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore<T>,
    pub codebook: Codebook<T>,
    parts: Parts,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate().map_err(ModelError::Config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let vocab = Vocabulary::new(config.dialect, config.codes);
        let d = config.embed_dim;
        let dims = LayerDims { d, hidden: config.hidden, heads: config.heads };
        let n = config.layers;
        let mut s = ParamStore::new();
        let r = &mut rng;
        let parts = Parts {
            char_emb: Embedding::new(&mut s, r, "char_emb", vocab.size(Stream::Char), d),
            program_emb: Embedding::new(&mut s, r, "program_emb", vocab.size(Stream::Program), d),
            spec_in: TransformerStack::new(&mut s, r, "spec_in", dims, n, false),
            spec_out: TransformerStack::new(&mut s, r, "spec_out", dims, n, true),
            prog_enc: TransformerStack::new(&mut s, r, "prog_enc", dims, n, false),
            convs: (0..config.compression).map(|i| Conv1d::new(&mut s, r, &format!("conv.{i}"), d, 3, 2)).collect(),
            lp_bos: s.add("lp_bos", uniform(r, 1, d, (3.0 / d as f64).sqrt())),
            lp_stack: TransformerStack::new(&mut s, r, "lp", dims, n, true),
            lp_out: Linear::new(&mut s, r, "lp_out", d, config.codes + 1, true),
            dec_spec: TransformerStack::new(&mut s, r, "dec_spec", dims, n, true),
            dec_latent: TransformerStack::new(&mut s, r, "dec_latent", dims, n, true),
            dec_out: Linear::new(&mut s, r, "dec_out", 2 * d, vocab.size(Stream::Program), true),
        };
        let codebook = Codebook::new(r, config.codes, d, config.vq);
        Ok(Model { config, vocab, params: s, codebook, parts })
    }

    pub fn d(&self) -> usize {
        self.config.embed_dim
    }

    /// Rebuilds a model from stored tensors; names and shapes must match a fresh model.
    pub fn from_tensors(
        config: ModelConfig,
        tensors: Vec<(String, Tensor<T>)>,
        codebook: Codebook<T>,
    ) -> Result<Self, ModelError> {
        let mut model = Self::new(config)?;
        if tensors.len() != model.params.len() {
            return Err(ShapeError(format!("expected {} tensors, found {}", model.params.len(), tensors.len())).into());
        }
        for (name, t) in tensors {
            let id = model.params.id(&name).ok_or_else(|| ShapeError(format!("unknown tensor {name}")))?;
            if !t.same_shape(model.params.value(id)) {
                return Err(ShapeError(format!("tensor {name} has shape {:?}", t.shape())).into());
            }
            *model.params.value_mut(id) = t;
        }
        if codebook.k() != model.codebook.k() || codebook.d() != model.codebook.d() {
            return Err(ShapeError("codebook shape does not match the config".into()).into());
        }
        model.codebook = codebook;
        Ok(model)
    }

    pub fn encode(&self, task: &Task) -> Result<Encoded, ModelError> {
        let io = encode_io(task, &self.vocab)?;
        let program = match &task.program {
            Some(p) => {
                let ids = encode_program(p, &self.vocab)?;
                Some(ids[1..ids.len() - 1].to_vec())
            }
            None => None,
        };
        Ok(Encoded { io, program })
    }

    fn embed(&self, g: &mut Graph<T>, emb: &Embedding, ids: &[usize], lens: &[usize]) -> Var {
        let x = emb.forward(g, &self.params, ids);
        let pos = g.constant(positions(lens, self.d()));
        g.add(x, pos)
    }

    /// Per-example encodings: an encoder over the input characters, then a stack over the
    /// output characters attending to that input.
    pub fn encode_spec(&self, g: &mut Graph<T>, ios: &[&EncodedIo]) -> SpecBatch {
        let p = &self.parts;
        let (mut in_ids, mut in_lens, mut out_ids, mut out_lens, mut tasks) = (vec![], vec![], vec![], vec![], vec![]);
        for io in ios {
            let start = in_lens.len();
            for (i, o) in io.inputs.iter().zip(&io.outputs) {
                in_ids.extend_from_slice(i);
                in_lens.push(i.len());
                out_ids.extend_from_slice(o);
                out_lens.push(o.len());
            }
            tasks.push(start..in_lens.len());
        }
        let x = self.embed(g, &p.char_emb, &in_ids, &in_lens);
        let inputs = p.spec_in.forward(g, &self.params, x, &Mask::segments(&in_lens, &in_lens), None);
        let y = self.embed(g, &p.char_emb, &out_ids, &out_lens);
        let cross = Mask::segments(&out_lens, &in_lens);
        let enc = p.spec_out.forward(g, &self.params, y, &Mask::segments(&out_lens, &out_lens), Some((inputs, &cross)));
        SpecBatch { enc, offsets: offsets(&out_lens), lens: out_lens, tasks }
    }

    /// Spec encoding of one task as plain values.
    pub fn spec_cache(&self, io: &EncodedIo) -> SpecCache<T> {
        let mut g = Graph::new();
        let spec = self.encode_spec(&mut g, &[io]);
        SpecCache { enc: g.value(spec.enc).clone(), lens: spec.lens }
    }

    /// Places cached encodings into `g`; task `i` of the batch is `caches[i]`.
    pub fn spec_from_cache(&self, g: &mut Graph<T>, caches: &[&SpecCache<T>]) -> SpecBatch {
        let mut lens = Vec::new();
        let mut tasks = Vec::new();
        let mut parts = Vec::new();
        for c in caches {
            let start = lens.len();
            lens.extend_from_slice(&c.lens);
            tasks.push(start..lens.len());
            parts.push(g.constant(c.enc.clone()));
        }
        let enc = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts) };
        SpecBatch { enc, offsets: offsets(&lens), lens, tasks }
    }

    /// Program encoder output before quantization, `S_i` rows per program.
    pub fn program_encode(&self, g: &mut Graph<T>, programs: &[&[usize]]) -> (Var, Vec<usize>) {
        let p = &self.parts;
        let mut lens: Vec<usize> = programs.iter().map(|q| q.len()).collect();
        assert!(lens.iter().all(|&n| n > 0), "programs must be nonempty");
        let ids: Vec<usize> = programs.iter().flat_map(|q| q.iter().copied()).collect();
        let x = self.embed(g, &p.program_emb, &ids, &lens);
        let mut h = p.prog_enc.forward(g, &self.params, x, &Mask::segments(&lens, &lens), None);
        for (i, conv) in p.convs.iter().enumerate() {
            if i > 0 {
                h = g.relu(h);
            }
            h = conv.forward(g, &self.params, h, &lens);
            lens = lens.iter().map(|&n| conv.out_len(n)).collect();
        }
        (h, lens)
    }

    /// Program embeddings averaged over blocks of `2^compression` tokens, EOS-padded.
    pub fn averaged_embeddings(&self, g: &mut Graph<T>, programs: &[&[usize]]) -> (Var, Vec<usize>) {
        let block = 1 << self.config.compression;
        let mut lens = Vec::new();
        let mut columns: Vec<Vec<usize>> = vec![Vec::new(); block];
        for prog in programs {
            let s = self.config.latent_len(prog.len());
            lens.push(s);
            for slot in 0..s * block {
                columns[slot % block].push(prog.get(slot).copied().unwrap_or(EOS));
            }
        }
        let mut acc: Option<Var> = None;
        for ids in &columns {
            let e = self.parts.program_emb.forward(g, &self.params, ids);
            acc = Some(match acc {
                Some(a) => g.add(a, e),
                None => e,
            });
        }
        let sum = acc.expect("at least one block column");
        (g.scale(sum, T::of(1.0 / block as f64)), lens)
    }

    /// Latent predictor logits (`K` codes then EOS) for every prefix position.
    /// `items[j] = (task, codes)` feeds `[BOS, codes...]`; rows are stacked per item.
    pub fn latent_logits(&self, g: &mut Graph<T>, spec: &SpecBatch, items: &[(usize, &[usize])]) -> Var {
        let p = &self.parts;
        let bos = g.param(&self.params, p.lp_bos);
        let book = g.constant(self.codebook.embeddings().clone());
        let table = g.concat_rows(&[bos, book]);
        let mut ids = Vec::new();
        let mut lens = Vec::new();
        let mut keys = Vec::new();
        let mut blocks = Vec::new();
        let mut item_lens = Vec::new();
        for &(task, codes) in items {
            let n = codes.len() + 1;
            item_lens.push(n);
            let mut starts = Vec::new();
            for ex in spec.tasks[task].clone() {
                starts.push(ids.len());
                ids.push(0);
                ids.extend(codes.iter().map(|&k| k + 1));
                lens.push(n);
                keys.push((spec.offsets[ex], spec.offsets[ex] + spec.lens[ex]));
            }
            blocks.push(starts);
        }
        let x = g.gather(table, &ids);
        let pos = g.constant(positions(&lens, self.d()));
        let x = g.add(x, pos);
        let cross = segment_ranges(&lens, &keys);
        let h = p.lp_stack.forward(g, &self.params, x, &Mask::causal_segments(&lens), Some((spec.enc, &cross)));
        let pooled = pool_examples(g, h, &blocks, &item_lens);
        p.lp_out.forward(g, &self.params, pooled)
    }

    /// Decoder logits over program tokens for every prefix position. `items[j] = (task, prefix)`
    /// where the prefix starts with BOS; `latent` holds stacked code rows with one segment per
    /// item, or `None` for the baseline decoder.
    pub fn decoder_logits(
        &self,
        g: &mut Graph<T>,
        spec: &SpecBatch,
        items: &[(usize, &[usize])],
        latent: Option<(Var, &[usize])>,
    ) -> Var {
        let p = &self.parts;
        let mut ids = Vec::new();
        let mut lens = Vec::new();
        let mut keys = Vec::new();
        let mut blocks = Vec::new();
        let mut item_lens = Vec::new();
        for &(task, prefix) in items {
            item_lens.push(prefix.len());
            let mut starts = Vec::new();
            for ex in spec.tasks[task].clone() {
                starts.push(ids.len());
                ids.extend_from_slice(prefix);
                lens.push(prefix.len());
                keys.push((spec.offsets[ex], spec.offsets[ex] + spec.lens[ex]));
            }
            blocks.push(starts);
        }
        let x = self.embed(g, &p.program_emb, &ids, &lens);
        let cross = segment_ranges(&lens, &keys);
        let h = p.dec_spec.forward(g, &self.params, x, &Mask::causal_segments(&lens), Some((spec.enc, &cross)));
        let pooled = pool_examples(g, h, &blocks, &item_lens);
        let z = match latent {
            Some((codes, code_lens)) => {
                assert_eq!(code_lens.len(), items.len(), "one latent segment per item");
                let prefix_ids: Vec<usize> = items.iter().flat_map(|(_, q)| q.iter().copied()).collect();
                let y = self.embed(g, &p.program_emb, &prefix_ids, &item_lens);
                let pos = g.constant(positions(code_lens, self.d()));
                let mem = g.add(codes, pos);
                let offs = offsets(code_lens);
                let keys: Vec<(usize, usize)> = code_lens.iter().zip(&offs).map(|(&n, &o)| (o, o + n)).collect();
                let cross = segment_ranges(&item_lens, &keys);
                p.dec_latent.forward(g, &self.params, y, &Mask::causal_segments(&item_lens), Some((mem, &cross)))
            }
            None => g.constant(Tensor::zeros(item_lens.iter().sum(), self.d())),
        };
        let h = g.concat_cols(&[pooled, z]);
        p.dec_out.forward(g, &self.params, h)
    }

    /// Next-token log-probabilities over `[codes..., EOS]` after each prefix.
    pub fn latent_next(&self, spec: &SpecCache<T>, prefixes: &[Vec<usize>]) -> Vec<Vec<f64>> {
        let mut g = Graph::new();
        let batch = self.spec_from_cache(&mut g, &[spec]);
        let items: Vec<(usize, &[usize])> = prefixes.iter().map(|q| (0, q.as_slice())).collect();
        let logits = self.latent_logits(&mut g, &batch, &items);
        last_rows(g.value(logits), prefixes.iter().map(|q| q.len() + 1))
    }

    /// Next-token log-probabilities over the program vocabulary after each prefix (BOS first),
    /// conditioned on the code rows `codes` (None for the baseline).
    pub fn program_next(&self, spec: &SpecCache<T>, codes: Option<&[usize]>, prefixes: &[Vec<usize>]) -> Vec<Vec<f64>> {
        let mut g = Graph::new();
        let batch = self.spec_from_cache(&mut g, &[spec]);
        let items: Vec<(usize, &[usize])> = prefixes.iter().map(|q| (0, q.as_slice())).collect();
        let latent = codes.map(|c| {
            let rows: Vec<usize> = prefixes.iter().flat_map(|_| c.iter().copied()).collect();
            let lens = vec![c.len(); prefixes.len()];
            (g.constant(self.codebook.lookup(&rows)), lens)
        });
        let logits = self.decoder_logits(&mut g, &batch, &items, latent.as_ref().map(|(v, l)| (*v, l.as_slice())));
        last_rows(g.value(logits), prefixes.iter().map(Vec::len))
    }

    /// Nearest codes of the encoded program; used for analysis.
    pub fn encode_latents(&self, program: &[usize]) -> Vec<usize> {
        let mut g = Graph::new();
        let (e, _) = self.program_encode(&mut g, &[program]);
        self.codebook.quantize_rows(g.value(e)).0
    }

    pub fn bos_prefix() -> Vec<usize> {
        vec![BOS]
    }
}

fn offsets(lens: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(lens.len());
    let mut acc = 0;
    for &n in lens {
        out.push(acc);
        acc += n;
    }
    out
}

/// Every row of query segment `s` sees the key range `keys[s]`.
fn segment_ranges(q_lens: &[usize], keys: &[(usize, usize)]) -> Mask {
    let mut r = Vec::with_capacity(q_lens.iter().sum());
    for (&n, &k) in q_lens.iter().zip(keys) {
        r.extend(std::iter::repeat(k).take(n));
    }
    Mask::Ranges(r)
}

/// Max over examples: `blocks[j]` holds the first row of each example copy of item `j`,
/// each copy `lens[j]` rows long. Items with fewer examples repeat their first one.
fn pool_examples<T: Scalar>(g: &mut Graph<T>, h: Var, blocks: &[Vec<usize>], lens: &[usize]) -> Var {
    let widest = blocks.iter().map(Vec::len).max().unwrap_or(0);
    let mut pooled = Vec::with_capacity(widest);
    for e in 0..widest {
        let mut ids = Vec::new();
        for (starts, &n) in blocks.iter().zip(lens) {
            let s = starts.get(e).copied().unwrap_or(starts[0]);
            ids.extend(s..s + n);
        }
        pooled.push(g.gather(h, &ids));
    }
    if pooled.len() == 1 {
        pooled[0]
    } else {
        g.max_pool(&pooled)
    }
}

/// Log-softmax of the last row of each consecutive block.
fn last_rows<T: Scalar>(logits: &Tensor<T>, lens: impl Iterator<Item = usize>) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    let mut end = 0;
    for n in lens {
        end += n;
        let row: Vec<f64> = logits.row(end - 1).iter().map(|x| x.f64()).collect();
        out.push(log_softmax(&row));
    }
    out
}
