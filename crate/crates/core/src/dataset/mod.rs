//! Hidden-state datasets: records, manifest, the `ITHD` file format,
//! seeded splits and the planted-signal generator.

mod format;
mod split;
mod synth;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use format::{
    read_dataset, validate_dataset, write_dataset, CheckResult, DatasetReader, DatasetWriter,
    ValidationReport, ValidationStatus, FORMAT_VERSION, MAGIC,
};
pub use split::{split_dataset, SplitSpec};
pub use synth::{generate_synthetic, SyntheticConfig};

use crate::baselines::CalibrationVector;
use crate::error::{Error, Result};
use crate::tensor::{kernels, NormKind, Tensor, NORM_EPSILON};

/// One question: last-token hidden states of every layer, the label
/// logits the LLM head produced, and the gold answer.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenRecord {
    pub example_id: String,
    /// `[L, d]`, layer-major.
    pub hidden: Tensor,
    /// `[C]`.
    pub final_logits: Tensor,
    pub gold_label: usize,
}

impl HiddenRecord {
    pub fn num_layers(&self) -> usize {
        self.hidden.shape().first().copied().unwrap_or(0)
    }

    pub fn layer(&self, l: usize) -> &[f32] {
        self.hidden.row(l)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub model: String,
    pub dataset: String,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
    pub labels: Vec<String>,
    /// Normalization used by the LLM head before unembedding.
    pub norm_kind: Option<NormKind>,
    #[serde(default = "default_eps")]
    pub norm_epsilon: f64,
    pub final_norm_gain: Option<Vec<f32>>,
    pub final_norm_shift: Option<Vec<f32>>,
    /// Label-token rows of the unembedding matrix, `[C, d]` row-major.
    pub label_unembedding: Option<Vec<f32>>,
    pub calibration: Option<CalibrationVector>,
    pub split_sizes: Option<Vec<usize>>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

fn default_eps() -> f64 {
    NORM_EPSILON
}

impl DatasetManifest {
    /// A manifest with no LLM head or calibration attached.
    pub fn bare(model: &str, dataset: &str, num_layers: usize, hidden_dim: usize, num_classes: usize) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            model: model.to_string(),
            dataset: dataset.to_string(),
            num_layers,
            hidden_dim,
            num_classes,
            labels: (0..num_classes).map(label_name).collect(),
            norm_kind: None,
            norm_epsilon: NORM_EPSILON,
            final_norm_gain: None,
            final_norm_shift: None,
            label_unembedding: None,
            calibration: None,
            split_sizes: None,
            metadata: BTreeMap::new(),
        }
    }

    /// Canonical JSON text as embedded in dataset files.
    pub fn to_canonical_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    /// Structural problems with the manifest, empty when consistent.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.num_layers == 0 || self.hidden_dim == 0 || self.num_classes == 0 {
            out.push(format!(
                "L, d, C must be positive (got {}, {}, {})",
                self.num_layers, self.hidden_dim, self.num_classes
            ));
        }
        if self.num_classes > 256 {
            out.push(format!("C = {} does not fit a u8 label", self.num_classes));
        }
        if self.labels.len() != self.num_classes {
            out.push(format!("{} label strings for C = {}", self.labels.len(), self.num_classes));
        }
        let d = self.hidden_dim;
        if let Some(u) = &self.label_unembedding {
            if u.len() != self.num_classes * d {
                out.push(format!(
                    "label_unembedding has {} entries, expected C*d = {}",
                    u.len(),
                    self.num_classes * d
                ));
            }
            if !u.iter().all(|v| v.is_finite()) {
                out.push("label_unembedding has non-finite entries".into());
            }
        }
        for (name, v) in [("final_norm_gain", &self.final_norm_gain), ("final_norm_shift", &self.final_norm_shift)] {
            if let Some(v) = v {
                if v.len() != d {
                    out.push(format!("{name} has {} entries, expected d = {d}", v.len()));
                }
            }
        }
        if let Some(cal) = &self.calibration {
            if let Err(e) = cal.check(self.num_classes) {
                out.push(e.to_string());
            }
        }
        out
    }

    /// Missing pieces needed to rebuild the LLM head, empty when complete.
    pub fn missing_head_fields(&self) -> Vec<&'static str> {
        let mut missing = Vec::new();
        if self.norm_kind.is_none() {
            missing.push("norm_kind");
        }
        if self.final_norm_gain.is_none() {
            missing.push("final_norm_gain");
        }
        if self.label_unembedding.is_none() {
            missing.push("label_unembedding");
        }
        missing
    }

    /// The LLM's own answer head (final norm + label unembedding).
    pub fn head(&self) -> Result<LlmHead> {
        let missing = self.missing_head_fields();
        if !missing.is_empty() {
            return Err(Error::Capability(format!(
                "manifest lacks LLM head data: {}",
                missing.join(", ")
            )));
        }
        let d = self.hidden_dim;
        let unembedding = Tensor::matrix(
            self.num_classes,
            d,
            self.label_unembedding.clone().unwrap_or_default(),
        )?;
        let gain = Tensor::new(vec![d], self.final_norm_gain.clone().unwrap_or_default())?;
        let shift = match &self.final_norm_shift {
            Some(s) => Some(Tensor::new(vec![d], s.clone())?),
            None => None,
        };
        Ok(LlmHead {
            norm_kind: self.norm_kind.unwrap_or(NormKind::RmsNorm),
            epsilon: self.norm_epsilon,
            gain,
            shift,
            unembedding,
        })
    }
}

/// Final normalization followed by the label rows of the unembedding.
#[derive(Debug, Clone, PartialEq)]
pub struct LlmHead {
    pub norm_kind: NormKind,
    pub epsilon: f64,
    pub gain: Tensor,
    pub shift: Option<Tensor>,
    /// `[C, d]`.
    pub unembedding: Tensor,
}

impl LlmHead {
    /// Label logits for one hidden state of length `d`.
    pub fn logits(&self, hidden: &[f32]) -> Vec<f64> {
        let d = self.gain.len();
        let x: Vec<f64> = hidden.iter().map(|&v| f64::from(v)).collect();
        let shift = self.shift.as_ref().map(Tensor::to_f64);
        let (normed, _) = kernels::normalize(
            &x,
            1,
            d,
            self.norm_kind,
            &self.gain.to_f64(),
            shift.as_deref(),
            self.epsilon,
        );
        let u = self.unembedding.data();
        (0..self.unembedding.shape()[0])
            .map(|c| {
                u[c * d..(c + 1) * d]
                    .iter()
                    .zip(&normed)
                    .map(|(&w, &h)| f64::from(w) * h)
                    .sum()
            })
            .collect()
    }
}

/// `A`, `B`, ... `Z`, then `L26`, `L27`, ...
pub fn label_name(i: usize) -> String {
    if i < 26 {
        char::from(b'A' + i as u8).to_string()
    } else {
        format!("L{i}")
    }
}

/// Checks one record against the manifest's shapes and label range.
pub fn check_record(manifest: &DatasetManifest, record: &HiddenRecord) -> Result<()> {
    let (l, d, c) = (manifest.num_layers, manifest.hidden_dim, manifest.num_classes);
    if record.hidden.shape() != [l, d] {
        return Err(Error::dim("record hidden", record.hidden.shape(), &[l, d]));
    }
    if record.final_logits.shape() != [c] {
        return Err(Error::dim("record logits", record.final_logits.shape(), &[c]));
    }
    if record.gold_label >= c {
        return Err(Error::Index {
            what: "gold label classes",
            index: record.gold_label,
            len: c,
        });
    }
    if record.example_id.len() > u32::MAX as usize {
        return Err(Error::Input("example id too long".into()));
    }
    Ok(())
}
