use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MARGIN_CLAMP: f64 = 1e-6;
pub const HISTOGRAM_BINS: usize = 50;

/// Top-minus-second probability and its clamped logit.
pub fn confidence_margin(p: &[f64]) -> Result<(f64, f64)> {
    if p.len() < 2 {
        return Err(Error::Input(format!("margin needs at least 2 classes, got {}", p.len())));
    }
    let (mut first, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &v in p {
        if v > first {
            second = first;
            first = v;
        } else if v > second {
            second = v;
        }
    }
    let m = (first - second).clamp(0.0, 1.0);
    let mc = m.clamp(MARGIN_CLAMP, 1.0 - MARGIN_CLAMP);
    Ok((m, (mc / (1.0 - mc)).ln()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` ascending edges; the last bin is closed.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// Uniform bins over the observed range of `values`.
    pub fn uniform(values: &[f64], bins: usize) -> Self {
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if values.is_empty() || bins == 0 {
            return Self {
                edges: Vec::new(),
                counts: Vec::new(),
            };
        }
        let span = if hi > lo { hi - lo } else { 1.0 };
        let edges: Vec<f64> = (0..=bins).map(|i| lo + span * i as f64 / bins as f64).collect();
        let mut counts = vec![0; bins];
        for &v in values {
            let b = (((v - lo) / span) * bins as f64).floor() as usize;
            counts[b.min(bins - 1)] += 1;
        }
        Self { edges, counts }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginSummary {
    pub example_ids: Vec<String>,
    pub margins: Vec<f64>,
    pub logit_margins: Vec<f64>,
    pub mean_margin: f64,
    pub mean_logit_margin: f64,
    /// Over the logit margins.
    pub histogram: Histogram,
}

pub fn margin_summary(example_ids: &[String], probabilities: &[Vec<f64>]) -> Result<MarginSummary> {
    if example_ids.len() != probabilities.len() {
        return Err(Error::dim("margin_summary", &[example_ids.len()], &[probabilities.len()]));
    }
    let (margins, logit_margins): (Vec<f64>, Vec<f64>) = probabilities
        .iter()
        .map(|p| confidence_margin(p))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .unzip();
    let n = margins.len().max(1) as f64;
    Ok(MarginSummary {
        example_ids: example_ids.to_vec(),
        mean_margin: margins.iter().sum::<f64>() / n,
        mean_logit_margin: logit_margins.iter().sum::<f64>() / n,
        histogram: Histogram::uniform(&logit_margins, HISTOGRAM_BINS),
        margins,
        logit_margins,
    })
}

impl MarginSummary {
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["example_id", "margin", "logit_margin"])?;
        for ((id, m), lm) in self.example_ids.iter().zip(&self.margins).zip(&self.logit_margins) {
            w.write_record([id.clone(), format!("{m:.6}"), format!("{lm:.6}")])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn write_histogram_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["bin_low", "bin_high", "count"])?;
        for (i, c) in self.histogram.counts.iter().enumerate() {
            w.write_record([
                format!("{:.6}", self.histogram.edges[i]),
                format!("{:.6}", self.histogram.edges[i + 1]),
                c.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn margin_examples() {
        let (m, lm) = confidence_margin(&[0.25; 4]).unwrap();
        assert_eq!(m, 0.0);
        assert!((lm - (-13.815509557963773)).abs() < 1e-9);
        let (m, lm) = confidence_margin(&[0.75, 0.25]).unwrap();
        assert_eq!((m, lm), (0.5, 0.0));
        let (m, lm) = confidence_margin(&[0.9, 0.05, 0.05]).unwrap();
        assert!((m - 0.85).abs() < 1e-12);
        assert!((lm - (0.85f64 / 0.15).ln()).abs() < 1e-9);
        let (_, lm) = confidence_margin(&[1.0, 0.0]).unwrap();
        assert!(lm.is_finite());
    }

    #[test]
    fn single_class_is_input_error() {
        assert!(matches!(confidence_margin(&[1.0]), Err(Error::Input(_))));
    }

    #[test]
    fn histogram_counts_everything() {
        let v: Vec<f64> = (0..101).map(|i| i as f64).collect();
        let h = Histogram::uniform(&v, 50);
        assert_eq!(h.counts.iter().sum::<usize>(), 101);
        assert_eq!(h.edges.len(), 51);
        assert_eq!(h.counts[49], 3);
        let flat = Histogram::uniform(&[2.0, 2.0], 50);
        assert_eq!(flat.counts[0], 2);
    }

    #[test]
    fn summary_csv() {
        let s = margin_summary(&["a".into()], &[vec![0.75, 0.25]]).unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "example_id,margin,logit_margin\na,0.500000,0.000000\n");
    }
}
