use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BrierScores {
    /// Mean over examples of the squared error, divided by C.
    pub normalized: f64,
    /// Mean over examples of the squared error summed over classes.
    pub unnormalized: f64,
}

/// The class-normalized Brier score.
pub fn brier_score(predictions: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    Ok(brier_scores(predictions, labels)?.normalized)
}

pub fn brier_scores(predictions: &[Vec<f64>], labels: &[usize]) -> Result<BrierScores> {
    if predictions.is_empty() {
        return Err(Error::Input("brier score of an empty set".into()));
    }
    if predictions.len() != labels.len() {
        return Err(Error::dim("brier_score", &[predictions.len()], &[labels.len()]));
    }
    let (mut norm, mut raw) = (0.0, 0.0);
    for (p, &label) in predictions.iter().zip(labels) {
        if label >= p.len() {
            return Err(Error::Index {
                what: "brier label",
                index: label,
                len: p.len(),
            });
        }
        let se: f64 = p
            .iter()
            .enumerate()
            .map(|(c, &v)| (v - if c == label { 1.0 } else { 0.0 }).powi(2))
            .sum();
        raw += se;
        norm += se / p.len() as f64;
    }
    let n = predictions.len() as f64;
    Ok(BrierScores {
        normalized: norm / n,
        unnormalized: raw / n,
    })
}
