use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetManifest, HiddenRecord};
use crate::error::{Error, Result};
use crate::tensor::argmax;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerAccuracyCurve {
    /// 1-based layer indices.
    pub layers: Vec<usize>,
    pub accuracy: Vec<f64>,
}

impl LayerAccuracyCurve {
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["layer", "accuracy"])?;
        for (l, a) in self.layers.iter().zip(&self.accuracy) {
            w.write_record([l.to_string(), format!("{a:.6}")])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// Decodes every layer through the LLM's own head and scores the argmax.
/// Logits are rounded to 32-bit first, as stored final logits are.
pub fn logit_lens_curve(records: &[HiddenRecord], manifest: &DatasetManifest) -> Result<LayerAccuracyCurve> {
    let head = manifest.head()?;
    if records.is_empty() {
        return Err(Error::Input("logit lens over an empty record set".into()));
    }
    let layers = manifest.num_layers;
    let hits: Vec<Vec<bool>> = records
        .par_iter()
        .map(|r| {
            if r.hidden.shape() != [layers, manifest.hidden_dim] {
                return Err(Error::dim("logit lens", r.hidden.shape(), &[layers, manifest.hidden_dim]));
            }
            Ok((0..layers)
                .map(|l| {
                    let logits: Vec<f32> = head.logits(r.layer(l)).into_iter().map(|v| v as f32).collect();
                    argmax(&logits) == r.gold_label
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let accuracy = (0..layers)
        .map(|l| hits.iter().filter(|h| h[l]).count() as f64 / records.len() as f64)
        .collect();
    Ok(LayerAccuracyCurve {
        layers: (1..=layers).collect(),
        accuracy,
    })
}
