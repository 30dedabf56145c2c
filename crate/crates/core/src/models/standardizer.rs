use serde::{Deserialize, Serialize};

use super::ModelError;

/// Fraction trimmed from each tail.
pub const TRIM_FRACTION: f64 = 0.0125;
const MIN_PILOT: usize = 100;

/// Values dropped from each tail of a sample of size `n`.
pub fn trim_count(n: usize) -> usize {
    (TRIM_FRACTION * n as f64).floor() as usize
}

/// Per-coordinate trimmed location and scale from a pilot run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PilotStandardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Coordinates whose trimmed std was zero and was replaced by 1.
    pub degenerate: Vec<usize>,
    fitted: bool,
}

impl PilotStandardizer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn fitted(rows: &[Vec<f64>]) -> Result<Self, ModelError> {
        let mut s = Self::new();
        s.fit(rows)?;
        Ok(s)
    }

    pub fn is_fitted(&self) -> bool {
        self.fitted
    }

    /// Fitting happens once; a second call is an error.
    pub fn fit(&mut self, rows: &[Vec<f64>]) -> Result<(), ModelError> {
        if self.fitted {
            return Err(ModelError::Standardizer("already fitted"));
        }
        if rows.len() < MIN_PILOT {
            return Err(ModelError::TooFewRows {
                need: MIN_PILOT,
                got: rows.len(),
            });
        }
        let d = rows[0].len();
        if let Some(bad) = rows.iter().find(|r| r.len() != d) {
            return Err(ModelError::DimMismatch {
                what: "pilot row",
                expected: d,
                found: bad.len(),
            });
        }
        let k = trim_count(rows.len());
        for j in 0..d {
            let mut col: Vec<f64> = rows.iter().map(|r| r[j]).collect();
            col.sort_by(|a, b| a.total_cmp(b));
            let kept = &col[k..col.len() - k];
            let n = kept.len() as f64;
            let m = kept.iter().sum::<f64>() / n;
            let var = kept.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0);
            let mut sd = var.sqrt();
            if !(sd > 0.0) || !sd.is_finite() {
                sd = 1.0;
                self.degenerate.push(j);
            }
            self.mean.push(m);
            self.std.push(sd);
        }
        self.fitted = true;
        Ok(())
    }

    pub fn transform(&self, s: &[f64]) -> Result<Vec<f64>, ModelError> {
        if !self.fitted {
            return Err(ModelError::Standardizer("used before fitting"));
        }
        if s.len() != self.mean.len() {
            return Err(ModelError::DimMismatch {
                what: "summary",
                expected: self.mean.len(),
                found: s.len(),
            });
        }
        Ok(s.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, sd))| (v - m) / sd)
            .collect())
    }
}
