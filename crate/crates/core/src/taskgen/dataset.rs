use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DatasetError, Task};
use crate::dsl::{parse_program, render_program, DialectConfig};

/// One JSONL line. `program` holds the canonical text form and may be absent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub program: Option<String>,
}

impl From<&Task> for TaskRecord {
    fn from(t: &Task) -> Self {
        TaskRecord {
            inputs: t.inputs.clone(),
            outputs: t.outputs.clone(),
            program: t.program.as_ref().map(render_program),
        }
    }
}

impl TaskRecord {
    pub fn into_task(self) -> Result<Task, String> {
        let program = match &self.program {
            Some(text) => Some(parse_program(text, DialectConfig::FULL).map_err(|e| e.to_string())?),
            None => None,
        };
        Task::new(self.inputs, self.outputs, program).map_err(|e| e.to_string())
    }

    /// Parses one JSON object; `line` is only used for error reporting.
    pub fn parse_task(text: &str, line: usize) -> Result<Task, DatasetError> {
        let format = |reason: String| DatasetError::Format { line, reason };
        let record: TaskRecord = serde_json::from_str(text).map_err(|e| format(e.to_string()))?;
        record.into_task().map_err(format)
    }
}

pub fn write_dataset(tasks: &[Task], path: &Path) -> Result<(), DatasetError> {
    let mut w = BufWriter::new(File::create(path)?);
    for t in tasks {
        let line = serde_json::to_string(&TaskRecord::from(t)).expect("records serialize");
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a JSONL dataset. Blank lines are skipped; line numbers in errors are 1-based.
pub fn read_dataset(path: &Path) -> Result<Vec<Task>, DatasetError> {
    let reader = BufReader::new(File::open(path)?);
    let mut tasks = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        tasks.push(TaskRecord::parse_task(&line, i + 1)?);
    }
    Ok(tasks)
}
