//! Training loop, learning-rate schedule, metrics and checkpoints.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::dsl::DialectConfig;
use crate::eval::{accuracy_at_b, Accuracy, Searcher};
use crate::model::{Encoded, LossParts, Model, ModelConfig, ModelError, QuantMode};
use crate::nn::{Adam, AdamConfig, Graph, Tensor};
use crate::search::SearchConfig;
use crate::taskgen::{task_rng, Task};
use crate::vq::{usage_entropy, Codebook};
use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Linear warmup length in steps.
    pub warmup: usize,
    /// Steps at the start during which the decoder reads averaged program embeddings.
    pub pretrain_steps: usize,
    /// Evaluate every this many steps; 0 only evaluates at the end.
    pub eval_every: usize,
    /// Cap on held-out tasks used per evaluation.
    pub eval_tasks: usize,
    pub eval_beam: usize,
    pub eval_latent_beams: usize,
    /// Global gradient-norm clip; 0 disables it.
    pub clip: f64,
    /// Save a checkpoint every this many steps when a path is given; 0 only saves at the end.
    pub checkpoint_every: usize,
    pub seed: u64,
    pub train_data: Option<PathBuf>,
    pub eval_data: Option<PathBuf>,
    pub model: ModelConfig,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 100_000,
            batch_size: 32,
            lr: 1e-3,
            warmup: 1000,
            pretrain_steps: 10_000,
            eval_every: 5000,
            eval_tasks: 200,
            eval_beam: 10,
            eval_latent_beams: 3,
            clip: 1.0,
            checkpoint_every: 0,
            seed: 0,
            train_data: None,
            eval_data: None,
            model: ModelConfig::default(),
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.steps == 0 || self.batch_size == 0 {
            return bad("steps and batch_size must be positive".into());
        }
        if self.pretrain_steps > self.steps {
            return bad(format!("pretrain_steps {} exceeds steps {}", self.pretrain_steps, self.steps));
        }
        if !(self.lr > 0.0) || !(self.clip >= 0.0) {
            return bad("lr must be positive and clip non-negative".into());
        }
        if self.eval_latent_beams == 0 || self.eval_latent_beams > self.eval_beam {
            return bad("need 1 <= eval_latent_beams <= eval_beam".into());
        }
        self.model.validate().map_err(TrainError::Config)
    }

    /// Learning rate at `step` (0-based) after linear warmup.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup == 0 {
            self.lr
        } else {
            self.lr * ((step + 1) as f64 / self.warmup as f64).min(1.0)
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("loss diverged at step {step}: {parts:?}")]
    Divergence { step: usize, parts: LossParts },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("dataset does not fit the model: {0}")]
    Dataset(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("metrics log: {0}")]
    Metrics(#[from] csv::Error),
}

/// Fails when a task uses characters or constructs outside the dialect.
pub fn check_dataset<T: Scalar>(model: &Model<T>, tasks: &[Task], need_programs: bool) -> Result<(), TrainError> {
    let dialect = DialectConfig::new(model.config.dialect);
    for (i, t) in tasks.iter().enumerate() {
        let fail = |m: String| TrainError::Dataset(format!("task {i}: {m}"));
        match &t.program {
            Some(p) => {
                if let Some(e) = p.expressions().iter().find(|e| !dialect.admits(e)) {
                    return Err(fail(format!("{e:?} is not in the {} dialect", model.config.dialect)));
                }
            }
            None if need_programs => return Err(fail("no program".into())),
            None => {}
        }
        model.encode(t).map_err(|e| fail(e.to_string()))?;
    }
    Ok(())
}

/// One row of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metrics {
    pub step: usize,
    pub lr: f64,
    pub pretraining: bool,
    pub total: f64,
    pub autoencoder: f64,
    pub latent: f64,
    pub end_to_end: f64,
    pub commitment: f64,
    /// Entropy (nats) of the codes assigned in the batch.
    pub code_entropy: f64,
    pub eval_accuracy: Option<f64>,
}

/// Model, optimizer and step counter.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub config: TrainConfig,
    pub model: Model<T>,
    pub adam: Adam<T>,
    pub step: usize,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let model = Model::new(config.model.clone())?;
        let adam = Adam::new(&model.params, config.adam);
        Ok(Trainer { config, model, adam, step: 0 })
    }

    pub fn pretraining(&self) -> bool {
        self.step < self.config.pretrain_steps
    }

    /// Batch for `step`; depends only on the seed, the step and the dataset size.
    pub fn batch_indices(&self, step: usize, n: usize) -> Vec<usize> {
        let mut rng = task_rng(self.config.seed ^ 0x5eed_ba7c, step as u64);
        let mut ids = sample(&mut rng, n, self.config.batch_size.min(n)).into_vec();
        ids.sort_unstable();
        ids
    }

    /// One optimizer step plus the codebook update.
    pub fn train_step(&mut self, batch: &[&Encoded]) -> Result<Metrics, TrainError> {
        let pretraining = self.pretraining();
        let mut g = Graph::new();
        let out = self.model.compute_loss(&mut g, batch, pretraining, &QuantMode::Nearest)?;
        if !out.parts.total.is_finite() {
            return Err(TrainError::Divergence { step: self.step, parts: out.parts });
        }
        let grads = g.backward(out.loss);
        self.model.params.zero_grads();
        g.accumulate_param_grads(&grads, &mut self.model.params);
        let norm = self.model.params.grad_norm().f64();
        if !norm.is_finite() {
            return Err(TrainError::Divergence { step: self.step, parts: out.parts });
        }
        if self.config.clip > 0.0 && norm > self.config.clip {
            self.model.params.scale_grads(T::of(self.config.clip / norm));
        }
        let lr = self.config.lr_at(self.step);
        self.adam.update(&mut self.model.params, lr).map_err(ModelError::from)?;
        self.model.codebook.ema_update(&out.encodings, &out.codes);
        let p = out.parts;
        let metrics = Metrics {
            step: self.step,
            lr,
            pretraining,
            total: p.total,
            autoencoder: p.autoencoder,
            latent: p.latent,
            end_to_end: p.end_to_end,
            commitment: p.commitment,
            code_entropy: usage_entropy(&out.codes, self.model.config.codes),
            eval_accuracy: None,
        };
        self.step += 1;
        Ok(metrics)
    }

    pub fn evaluate(&self, tasks: &[Task], workers: usize) -> Accuracy {
        let n = tasks.len().min(self.config.eval_tasks);
        let config = SearchConfig::for_model(&self.model, self.config.eval_beam, self.config.eval_latent_beams);
        accuracy_at_b(&Searcher { model: &self.model, config }, &tasks[..n], workers)
    }
}

/// Where `train` sends its side outputs.
pub struct TrainIo<'a, W: Write> {
    pub metrics: Option<&'a mut csv::Writer<W>>,
    pub checkpoint: Option<&'a Path>,
    pub workers: usize,
}

impl TrainIo<'_, io::Sink> {
    pub fn none() -> Self {
        TrainIo { metrics: None, checkpoint: None, workers: 1 }
    }
}

/// Trains from the current step up to `config.steps`. Returns the metrics of every step run;
/// the last one carries a final evaluation when `eval_set` is nonempty.
pub fn train<T: Scalar, W: Write>(
    trainer: &mut Trainer<T>,
    train_set: &[Task],
    eval_set: &[Task],
    out: TrainIo<'_, W>,
) -> Result<Vec<Metrics>, TrainError> {
    trainer.config.validate()?;
    check_dataset(&trainer.model, train_set, true)?;
    check_dataset(&trainer.model, eval_set, false)?;
    if train_set.is_empty() {
        return Err(TrainError::Dataset("training set is empty".into()));
    }
    let encoded: Vec<Encoded> = train_set.iter().map(|t| trainer.model.encode(t)).collect::<Result<_, _>>()?;
    let TrainIo { mut metrics, checkpoint, workers } = out;
    let mut log = Vec::new();
    while trainer.step < trainer.config.steps {
        let ids = trainer.batch_indices(trainer.step, encoded.len());
        let batch: Vec<&Encoded> = ids.iter().map(|&i| &encoded[i]).collect();
        let mut m = trainer.train_step(&batch)?;
        let every = trainer.config.eval_every;
        let last = trainer.step == trainer.config.steps;
        if !eval_set.is_empty() && (last || (every > 0 && trainer.step % every == 0)) {
            let acc = trainer.evaluate(eval_set, workers);
            log::info!("step {}: eval accuracy {:.3} [{:.3}, {:.3}]", trainer.step, acc.estimate, acc.low, acc.high);
            m.eval_accuracy = Some(acc.estimate);
        }
        if trainer.step % 100 == 0 || last {
            log::info!(
                "step {} loss {:.4} (ae {:.4} lp {:.4} e2e {:.4} commit {:.4}) entropy {:.3}",
                trainer.step,
                m.total,
                m.autoencoder,
                m.latent,
                m.end_to_end,
                m.commitment,
                m.code_entropy
            );
        }
        if let Some(w) = metrics.as_mut() {
            w.serialize(m)?;
        }
        if let Some(path) = checkpoint {
            let every = trainer.config.checkpoint_every;
            if last || (every > 0 && trainer.step % every == 0) {
                save_checkpoint(path, trainer)?;
            }
        }
        log.push(m);
    }
    if let Some(w) = metrics.as_mut() {
        w.flush().map_err(csv::Error::from)?;
    }
    Ok(log)
}

pub const MAGIC: &[u8; 4] = b"LPCK";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] io::Error),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corruption(String),
}

#[derive(Debug, Serialize, Deserialize)]
struct Trailer {
    config: TrainConfig,
    step: usize,
    adam_step: u64,
}

fn write_tensor<T: Scalar>(w: &mut impl Write, name: &str, t: &Tensor<T>) -> io::Result<()> {
    let name_len = u16::try_from(name.len()).map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "tensor name too long"))?;
    w.write_all(&name_len.to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&[t.shape().len() as u8])?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &x in t.data() {
        w.write_all(&(x.f64() as f32).to_le_bytes())?;
    }
    Ok(())
}

/// Writes the trainer to a temporary file next to `path`, then renames it into place.
/// Payloads are 32-bit, so a 64-bit model is rounded on the way out.
pub fn save_checkpoint<T: Scalar>(path: &Path, trainer: &Trainer<T>) -> Result<(), CheckpointError> {
    let model = &trainer.model;
    let mut tensors: Vec<(String, Tensor<T>)> = Vec::new();
    for id in model.params.ids() {
        tensors.push((model.params.name(id).to_string(), model.params.value(id).clone()));
    }
    let book = &model.codebook;
    tensors.push(("codebook.embeddings".into(), book.embeddings().clone()));
    tensors.push(("codebook.ema_counts".into(), Tensor::from_rows(1, book.k(), book.ema_counts().to_vec())));
    tensors.push(("codebook.ema_sums".into(), book.ema_sums().clone()));
    for (i, id) in model.params.ids().enumerate() {
        let name = model.params.name(id);
        tensors.push((format!("adam.m.{name}"), trainer.adam.m[i].clone()));
        tensors.push((format!("adam.v.{name}"), trainer.adam.v[i].clone()));
    }

    let mut file_name = path.file_name().ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "checkpoint path has no file name"))?.to_os_string();
    file_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(file_name);
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &tensors {
            write_tensor(&mut w, name, t)?;
        }
        let trailer = Trailer { config: trainer.config.clone(), step: trainer.step, adam_step: trainer.adam.step };
        let json = serde_json::to_vec(&trailer).map_err(io::Error::other)?;
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(&json)?;
        w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>, CheckpointError> {
        let mut buf = vec![0; n];
        self.inner.read_exact(&mut buf).map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof => CheckpointError::Corruption(format!("file ends inside {what}")),
            _ => CheckpointError::Io(e),
        })?;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.bytes(4, what)?.try_into().expect("4 bytes")))
    }
}

fn read_tensor<T: Scalar, R: Read>(r: &mut Reader<R>) -> Result<(String, Tensor<T>), CheckpointError> {
    let name_len = u16::from_le_bytes(r.bytes(2, "a tensor name length")?.try_into().expect("2 bytes"));
    let name = String::from_utf8(r.bytes(name_len as usize, "a tensor name")?)
        .map_err(|_| CheckpointError::Corruption("tensor name is not UTF-8".into()))?;
    let rank = r.bytes(1, "a tensor rank")?[0] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u32("tensor dims")? as usize);
    }
    let n: usize = shape.iter().product();
    if rank == 0 || n > (1 << 30) {
        return Err(CheckpointError::Corruption(format!("tensor {name} has implausible shape {shape:?}")));
    }
    let raw = r.bytes(4 * n, &format!("tensor {name}"))?;
    let data = raw.chunks_exact(4).map(|c| T::of(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)).collect();
    let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Corruption(e.to_string()))?;
    Ok((name, t))
}

/// Reads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Trainer<T>, CheckpointError> {
    let mut r = Reader { inner: BufReader::new(File::open(path)?) };
    if r.bytes(4, "the magic number")? != MAGIC {
        return Err(CheckpointError::Corruption("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32("the version")?;
    if version != VERSION {
        return Err(CheckpointError::Version { found: version, expected: VERSION });
    }
    let count = r.u32("the tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        tensors.push(read_tensor::<T, _>(&mut r)?);
    }
    let json_len = r.u32("the trailer length")? as usize;
    let json = r.bytes(json_len, "the trailer")?;
    let mut rest = Vec::new();
    r.inner.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(CheckpointError::Corruption(format!("{} unexpected bytes after the trailer", rest.len())));
    }
    let trailer: Trailer = serde_json::from_slice(&json).map_err(|e| CheckpointError::Corruption(format!("trailer: {e}")))?;

    let corrupt = |m: String| CheckpointError::Corruption(m);
    let mut take = |name: &str| -> Result<Tensor<T>, CheckpointError> {
        let i = tensors.iter().position(|(n, _)| n == name).ok_or_else(|| corrupt(format!("missing tensor {name}")))?;
        Ok(tensors.swap_remove(i).1)
    };
    let fresh: Model<T> = Model::new(trailer.config.model.clone()).map_err(|e| corrupt(e.to_string()))?;
    let names: Vec<String> = fresh.params.ids().map(|id| fresh.params.name(id).to_string()).collect();
    let mut params = Vec::with_capacity(names.len());
    for n in &names {
        params.push((n.clone(), take(n)?));
    }
    let emb = take("codebook.embeddings")?;
    let counts = take("codebook.ema_counts")?.into_data();
    let sums = take("codebook.ema_sums")?;
    let codebook = Codebook::from_parts(trailer.config.model.vq, emb, counts, sums).map_err(|e| corrupt(e.to_string()))?;
    let mut m = Vec::with_capacity(names.len());
    let mut v = Vec::with_capacity(names.len());
    for n in &names {
        m.push(take(&format!("adam.m.{n}"))?);
        v.push(take(&format!("adam.v.{n}"))?);
    }
    if let Some((extra, _)) = tensors.first() {
        return Err(corrupt(format!("unexpected tensor {extra}")));
    }
    let model = Model::from_tensors(trailer.config.model.clone(), params, codebook).map_err(|e| corrupt(e.to_string()))?;
    for (i, id) in model.params.ids().enumerate() {
        if !m[i].same_shape(model.params.value(id)) || !v[i].same_shape(model.params.value(id)) {
            return Err(corrupt(format!("optimizer state for {} has the wrong shape", model.params.name(id))));
        }
    }
    let adam = Adam { config: trailer.config.adam, step: trailer.adam_step, m, v };
    Ok(Trainer { config: trailer.config, model, adam, step: trailer.step })
}
