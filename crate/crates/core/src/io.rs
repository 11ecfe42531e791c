//! Reading and writing the canonical JSON files.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use crate::model::{
    validate_task, AlignmentMatrix, Belief, GroundTruthAnnotation, ModelError, TaskRecord, TaskSpec,
};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Invalid {
        path: PathBuf,
        #[source]
        source: ModelError,
    },
}

impl IoError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        IoError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let bytes = fs::read(path).map_err(|e| IoError::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|source| IoError::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes pretty JSON through a temporary sibling file and a rename, so a
/// reader never observes a partially written file.
pub fn write_json_atomic<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|source| IoError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| IoError::io(parent, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut file = fs::File::create(&tmp).map_err(|e| IoError::io(&tmp, e))?;
    file.write_all(bytes).map_err(|e| IoError::io(&tmp, e))?;
    file.sync_all().map_err(|e| IoError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| IoError::io(path, e))
}

pub fn load_task(path: &Path) -> Result<TaskSpec, IoError> {
    let record: TaskRecord = read_json(path)?;
    validate_task(record).map_err(|source| IoError::Invalid {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads an annotation and validates it against the task's step count.
pub fn load_annotation(path: &Path, num_steps: usize) -> Result<GroundTruthAnnotation, IoError> {
    let ann: GroundTruthAnnotation = read_json(path)?;
    ann.validate(num_steps).map_err(|source| IoError::Invalid {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(ann)
}

#[derive(Serialize)]
struct AlignmentLine<'a> {
    t: usize,
    belief: &'a [f64],
}

/// One `{"t": .., "belief": [..]}` object per segment.
pub fn alignment_jsonl(matrix: &AlignmentMatrix) -> Vec<u8> {
    let mut out = Vec::new();
    for (t, row) in matrix.rows().iter().enumerate() {
        let line = AlignmentLine {
            t,
            belief: row.as_slice(),
        };
        serde_json::to_writer(&mut out, &line).expect("beliefs serialize");
        out.push(b'\n');
    }
    out
}

/// Header `t,step_0,..,step_{S-1},none`, one row per segment.
pub fn alignment_csv(matrix: &AlignmentMatrix) -> Result<Vec<u8>, csv::Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let steps = matrix.num_states().saturating_sub(1);
    let mut header = vec!["t".to_string()];
    header.extend((0..steps).map(|s| format!("step_{s}")));
    header.push("none".into());
    w.write_record(&header)?;
    for (t, row) in matrix.rows().iter().enumerate() {
        let mut record = vec![t.to_string()];
        record.extend(row.as_slice().iter().map(f64::to_string));
        w.write_record(&record)?;
    }
    w.into_inner().map_err(|e| e.into_error().into())
}

/// Reads a file written by [`alignment_jsonl`].
pub fn read_alignment_jsonl(path: &Path) -> Result<AlignmentMatrix, IoError> {
    #[derive(serde::Deserialize)]
    struct Line {
        belief: Belief,
    }
    let text = fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
    let rows = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str::<Line>(l)
                .map(|line| line.belief)
                .map_err(|source| IoError::Json {
                    path: path.to_path_buf(),
                    source,
                })
        })
        .collect::<Result<Vec<_>, _>>()?;
    AlignmentMatrix::from_rows(rows).map_err(|source| IoError::Invalid {
        path: path.to_path_buf(),
        source,
    })
}
