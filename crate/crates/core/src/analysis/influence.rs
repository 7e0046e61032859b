use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::HiddenRecord;
use crate::error::{Error, Result};
use crate::predictor::{build_graph, InputSelector, PredictorParams};
use crate::tensor::{argmax, Tensor};

const CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceProfile {
    /// 1-based layer indices.
    pub layers: Vec<usize>,
    /// Mean over the sample of `sum_k (df/dh_lk)^2`.
    pub scores: Vec<f64>,
    pub samples: usize,
}

impl InfluenceProfile {
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["layer", "score"])?;
        for (l, s) in self.layers.iter().zip(&self.scores) {
            w.write_record([l.to_string(), format!("{s:.9e}")])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// Per-layer influence with `f` the log-probability of the predicted class.
pub fn influence_per_layer(predictor: &PredictorParams, records: &[HiddenRecord]) -> Result<InfluenceProfile> {
    if predictor.config.selector != InputSelector::AllLayers {
        return Err(Error::Capability(format!(
            "influence needs an all-layers predictor, got selector {:?}",
            predictor.config.selector
        )));
    }
    if records.is_empty() {
        return Err(Error::Input("influence over an empty record set".into()));
    }
    let (layers, dim) = (predictor.layers, predictor.dim);
    let inputs: Vec<Tensor> = records.iter().map(|r| predictor.prepare(r)).collect::<Result<_>>()?;
    let per_chunk: Vec<Vec<f64>> = inputs
        .par_chunks(CHUNK)
        .map(|chunk| chunk_scores(predictor, chunk, layers, dim))
        .collect::<Result<_>>()?;
    let mut scores = vec![0.0; layers];
    for s in &per_chunk {
        for (acc, v) in scores.iter_mut().zip(s) {
            *acc += v;
        }
    }
    for s in &mut scores {
        *s /= records.len() as f64;
    }
    Ok(InfluenceProfile {
        layers: (1..=layers).collect(),
        scores,
        samples: records.len(),
    })
}

fn chunk_scores(predictor: &PredictorParams, chunk: &[Tensor], layers: usize, dim: usize) -> Result<Vec<f64>> {
    let refs: Vec<&Tensor> = chunk.iter().collect();
    let mut pg = build_graph(predictor, &refs, true)?;
    pg.graph.forward()?;
    let c = predictor.config.classes;
    let predicted: Vec<usize> = pg.graph.value(pg.probs)?.chunks(c).map(argmax).collect();
    // mean cross-entropy on the predictions is -(1/B) sum_i f_i, and each
    // f_i depends only on its own input
    let loss = pg.graph.cross_entropy(pg.probs, &predicted)?;
    pg.graph.forward()?;
    pg.graph.backward(loss)?;
    let grad = pg
        .graph
        .grad(pg.input)
        .ok_or_else(|| Error::State("input gradient missing".into()))?;
    let b = chunk.len() as f64;
    let mut scores = vec![0.0; layers];
    for g in grad.chunks(layers * dim) {
        for (l, row) in g.chunks(dim).enumerate() {
            scores[l] += row.iter().map(|v| (v * b).powi(2)).sum::<f64>();
        }
    }
    Ok(scores)
}
