//! Synthetic tasks: program sampling, example generation, datasets and vocabularies.

mod dataset;
mod sample;
mod vocab;

pub use dataset::{read_dataset, write_dataset, TaskRecord};
pub use sample::{
    generate_dataset, sample_program, sample_task, sample_task_with_stats, task_rng, GenConfig, SampleStats,
};
pub use vocab::{
    decode_io, decode_program, encode_io, encode_program, pad_batch, program_tokens,
    program_tokens_with_offsets, EncodedIo,
    ProgramToken, Stream, Vocabulary, BOS, EOS, PAD, RESERVED,
};

use crate::dsl::Program;

/// Longest string allowed in any example.
pub const MAX_STRING_LEN: usize = 100;

/// An input/output specification, optionally with the program that produced it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Task {
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub program: Option<Program>,
}

impl Task {
    pub fn new(inputs: Vec<String>, outputs: Vec<String>, program: Option<Program>) -> Result<Self, TaskError> {
        if inputs.is_empty() {
            return Err(TaskError::NoExamples);
        }
        if inputs.len() != outputs.len() {
            return Err(TaskError::Mismatch { inputs: inputs.len(), outputs: outputs.len() });
        }
        if let Some(s) = inputs.iter().chain(&outputs).find(|s| s.chars().count() > MAX_STRING_LEN) {
            return Err(TaskError::TooLong(s.chars().count()));
        }
        Ok(Task { inputs, outputs, program })
    }

    pub fn n_examples(&self) -> usize {
        self.inputs.len()
    }

    pub fn examples(&self) -> impl Iterator<Item = (&str, &str)> {
        self.inputs.iter().map(String::as_str).zip(self.outputs.iter().map(String::as_str))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TaskError {
    #[error("a task needs at least one example")]
    NoExamples,
    #[error("{inputs} inputs but {outputs} outputs")]
    Mismatch { inputs: usize, outputs: usize },
    #[error("example string of length {0} exceeds the 100 character limit")]
    TooLong(usize),
}

#[derive(Debug, thiserror::Error)]
pub enum GenError {
    #[error("generation budget exhausted after {attempts} program samples")]
    GenerationExhausted { attempts: usize },
    #[error("invalid generation config: {0}")]
    Config(String),
}

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {reason}")]
    Format { line: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum VocabError {
    #[error("unknown {stream} token {token:?}")]
    UnknownToken { stream: Stream, token: String },
    #[error("malformed {stream} sequence: {reason}")]
    Malformed { stream: Stream, reason: String },
}
