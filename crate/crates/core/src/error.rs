use std::path::PathBuf;

use chrono::{DateTime, Utc};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("timestamp {time} is outside every split range")]
    OutOfSplit { time: DateTime<Utc> },
    #[error("LR/HR series are misaligned; unmatched timestamps: {}", format_times(.gaps))]
    Alignment { gaps: Vec<DateTime<Utc>> },
    #[error("non-finite value in `{variable}` at time {time}, cell ({i}, {j})")]
    NonFinite { variable: String, time: DateTime<Utc>, i: usize, j: usize },
    #[error("ingestion error: {0}")]
    Ingestion(String),
    #[error("{} HR cells are not covered by any patch, first: {:?}", .cells.len(), .cells.first())]
    Coverage { cells: Vec<(usize, usize)> },
    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Divergence { epoch: usize },
    #[error("netcdf error in {path}: {msg}")]
    NetCdf { path: PathBuf, msg: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("image encoding error: {0}")]
    Image(String),
    #[error(transparent)]
    Tensor(#[from] gridsr_tensor::TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn format_times(times: &[DateTime<Utc>]) -> String {
    const SHOWN: usize = 5;
    let mut s: Vec<String> = times.iter().take(SHOWN).map(|t| t.to_rfc3339()).collect();
    if times.len() > SHOWN {
        s.push(format!("... ({} total)", times.len()));
    }
    s.join(", ")
}

pub type Result<T> = std::result::Result<T, Error>;
