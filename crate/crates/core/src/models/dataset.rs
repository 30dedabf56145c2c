use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ModelError;

/// One simulated `(theta, x)` pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub run_id: String,
    pub round: usize,
    pub theta: Vec<f64>,
    pub x: Vec<f64>,
    pub seed: u64,
}

pub fn write_jsonl(path: &Path, records: &[DatasetRecord]) -> Result<(), ModelError> {
    let io = |e: std::io::Error| ModelError::Dataset(format!("{}: {e}", path.display()));
    let mut w = BufWriter::new(std::fs::File::create(path).map_err(io)?);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| ModelError::Dataset(e.to_string()))?;
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_jsonl(path: &Path) -> Result<Vec<DatasetRecord>, ModelError> {
    let io = |e: std::io::Error| ModelError::Dataset(format!("{}: {e}", path.display()));
    let r = BufReader::new(std::fs::File::open(path).map_err(io)?);
    let mut out = Vec::new();
    for (k, line) in r.lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| ModelError::Dataset(format!("line {}: {e}", k + 1)))?;
        out.push(rec);
    }
    Ok(out)
}
