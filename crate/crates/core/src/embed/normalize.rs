use serde::{Deserialize, Serialize};

use crate::model::IntervalSequence;

/// `log1p` followed by a z-score with statistics from the training set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: f64,
    pub std: f64,
}

impl Default for Normalizer {
    fn default() -> Self {
        Normalizer { mean: 0.0, std: 1.0 }
    }
}

impl Normalizer {
    pub fn fit(seqs: &[IntervalSequence]) -> Self {
        let logs: Vec<f64> = seqs.iter().flat_map(|s| s.intervals.iter().map(|v| v.ln_1p())).collect();
        if logs.is_empty() {
            return Normalizer::default();
        }
        let n = logs.len() as f64;
        let mean = logs.iter().sum::<f64>() / n;
        let var = logs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let std = if var.sqrt() > 1e-8 { var.sqrt() } else { 1.0 };
        Normalizer { mean, std }
    }

    pub fn apply(&self, minutes: f64) -> f64 {
        (minutes.ln_1p() - self.mean) / self.std
    }

    /// Normalizes a value list, passing padding (NaN) through unchanged.
    pub fn apply_all(&self, values: &[f64]) -> Vec<f64> {
        values
            .iter()
            .map(|v| if v.is_nan() { f64::NAN } else { self.apply(*v) })
            .collect()
    }
}
