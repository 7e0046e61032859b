//! Predictor heads over hidden states.
//!
//! * `Mixer`: the two-axis block network. Block 1 normalizes each layer's
//!   state, maps `d -> n1` and activates; block 2 does the same across the
//!   layer axis (`L -> n2`); the `n1 x n2` result is flattened and sent
//!   through a normalized linear head and a softmax.
//! * `Mlp` / `Logistic`: flat baselines on logits, the last state, or the
//!   (optionally PCA-reduced) last few states.
//! * `SelfAttention`: single-head attention over projected layer states
//!   with a learned classification token.

mod arch;
mod checkpoint;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use arch::{build_graph, PredictorGraph};
pub use checkpoint::{
    load_pca, load_predictor, read_named_tensors, save_pca, save_predictor, write_named_tensors,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};

use crate::baselines::PcaBasis;
use crate::dataset::{DatasetManifest, HiddenRecord};
use crate::error::{Error, Result};
use crate::tensor::{Activation, NormKind, Tensor, NORM_EPSILON};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Mixer,
    Mlp,
    Logistic,
    SelfAttention,
}

impl Architecture {
    /// Whether the architecture consumes a flat feature vector.
    pub fn is_flat(self) -> bool {
        matches!(self, Architecture::Mlp | Architecture::Logistic)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputSelector {
    AllLayers,
    LastLayer,
    LastK { k: usize },
    Logits,
    DiffAllLayers,
}

impl InputSelector {
    /// Whether the selection is a `(layers, d)` matrix.
    pub fn is_2d(self) -> bool {
        matches!(
            self,
            InputSelector::AllLayers | InputSelector::LastK { .. } | InputSelector::DiffAllLayers
        )
    }

    pub fn check(self, layers: usize) -> Result<()> {
        match self {
            InputSelector::LastK { k } if k == 0 || k > layers => Err(Error::Config(format!(
                "last_k selector needs 1 <= k <= L = {layers}, got k = {k}"
            ))),
            InputSelector::DiffAllLayers if layers < 2 => Err(Error::Config(
                "diff_all_layers needs at least 2 stored layers".into(),
            )),
            _ => Ok(()),
        }
    }

    /// Shape produced by [`select_inputs`].
    pub fn shape(self, layers: usize, dim: usize, classes: usize) -> Vec<usize> {
        match self {
            InputSelector::AllLayers | InputSelector::DiffAllLayers => vec![layers, dim],
            InputSelector::LastK { k } => vec![k, dim],
            InputSelector::LastLayer => vec![dim],
            InputSelector::Logits => vec![classes],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorConfig {
    pub architecture: Architecture,
    pub selector: InputSelector,
    pub n1: usize,
    pub n2: usize,
    /// Width of the MLP hidden layer.
    pub hidden: usize,
    /// Projection width of the self-attention variant.
    pub attn_dim: usize,
    /// Normalization inside mixer blocks 1 and 2.
    pub norm: Option<NormKind>,
    /// Normalization ahead of the output linear layer (mixer head).
    pub head_norm: Option<NormKind>,
    pub activation: Option<Activation>,
    pub norm_epsilon: f64,
    pub classes: usize,
    /// Components kept by the PCA preprocessing of flat inputs, if any.
    pub pca_components: Option<usize>,
    pub seed: u64,
}

impl PredictorConfig {
    pub fn new(architecture: Architecture, selector: InputSelector, classes: usize) -> Self {
        Self {
            architecture,
            selector,
            n1: 32,
            n2: 8,
            hidden: 32,
            attn_dim: 32,
            norm: Some(NormKind::LayerNorm),
            head_norm: Some(NormKind::LayerNorm),
            activation: Some(Activation::Relu),
            norm_epsilon: NORM_EPSILON,
            classes,
            pca_components: None,
            seed: 0,
        }
    }

    /// The mixer on all layers with `n1 = 32`, `n2 = 8`, LayerNorm and ReLU.
    pub fn innerthoughts(classes: usize) -> Self {
        Self::new(Architecture::Mixer, InputSelector::AllLayers, classes)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self, layers: usize) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        self.selector.check(layers)?;
        match self.architecture {
            Architecture::Mixer | Architecture::SelfAttention if !self.selector.is_2d() => {
                Err(Error::Config(format!(
                    "{:?} needs a (layers, d) input, selector {:?} is flat",
                    self.architecture, self.selector
                )))
            }
            Architecture::Mixer if self.n1 == 0 || self.n2 == 0 => {
                Err(Error::Config("mixer needs positive n1 and n2".into()))
            }
            Architecture::Mlp if self.hidden == 0 => Err(Error::Config("mlp needs hidden > 0".into())),
            Architecture::SelfAttention if self.attn_dim == 0 => {
                Err(Error::Config("self-attention needs attn_dim > 0".into()))
            }
            arch if self.pca_components.is_some() && !arch.is_flat() => Err(Error::Config(
                "PCA preprocessing applies to flat architectures only".into(),
            )),
            _ if self.norm_epsilon <= 0.0 => Err(Error::Config("norm epsilon must be positive".into())),
            _ => Ok(()),
        }
    }

    /// Per-example input shape fed to the network.
    pub fn input_shape(&self, layers: usize, dim: usize) -> Vec<usize> {
        let shape = self.selector.shape(layers, dim, self.classes);
        if self.architecture.is_flat() {
            vec![self.pca_components.unwrap_or_else(|| shape.iter().product())]
        } else {
            shape
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorParams {
    pub config: PredictorConfig,
    /// Layer count of the dataset the predictor was built for.
    pub layers: usize,
    pub dim: usize,
    pub tensors: BTreeMap<String, Tensor>,
    pub pca: Option<PcaBasis>,
}

impl PredictorParams {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn input_shape(&self) -> Vec<usize> {
        self.config.input_shape(self.layers, self.dim)
    }

    /// Turns a record into the network input: selection, flattening for
    /// flat architectures, then PCA when configured.
    pub fn prepare(&self, record: &HiddenRecord) -> Result<Tensor> {
        let selected = select_inputs(record, self.config.selector)?;
        if !self.config.architecture.is_flat() {
            return Ok(selected);
        }
        let n = selected.len();
        let flat = selected.reshape(vec![n])?;
        match (&self.pca, self.config.pca_components) {
            (Some(basis), Some(_)) => basis.project(flat.data()),
            (None, Some(_)) => Err(Error::Config("predictor expects a fitted PCA basis".into())),
            _ => Ok(flat),
        }
    }

    /// Probability vector for one prepared input.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let probs = self.forward_batch(&[input])?;
        Ok(probs.into_iter().next().expect("one row"))
    }

    /// Probability vectors for a batch of prepared inputs.
    pub fn forward_batch(&self, inputs: &[&Tensor]) -> Result<Vec<Tensor>> {
        let mut pg = build_graph(self, inputs, false)?;
        pg.graph.forward()?;
        let c = self.config.classes;
        let values = pg.graph.value(pg.probs)?;
        Ok(values
            .chunks(c)
            .map(|row| Tensor::from_f64(vec![c], row))
            .collect())
    }

    pub fn predict_record(&self, record: &HiddenRecord) -> Result<Tensor> {
        self.forward(&self.prepare(record)?)
    }
}

/// Picks the hidden states (or logits) a predictor consumes.
pub fn select_inputs(record: &HiddenRecord, selector: InputSelector) -> Result<Tensor> {
    let layers = record.num_layers();
    let dim = record.hidden.last_dim();
    match selector {
        InputSelector::AllLayers => Ok(record.hidden.clone()),
        InputSelector::LastLayer => Ok(Tensor::vector(record.layer(layers - 1).to_vec())),
        InputSelector::LastK { k } => {
            if k == 0 || k > layers {
                return Err(Error::Config(format!(
                    "last_k selector needs 1 <= k <= L = {layers}, got k = {k}"
                )));
            }
            let data = record.hidden.data()[(layers - k) * dim..].to_vec();
            Tensor::new(vec![k, dim], data)
        }
        InputSelector::Logits => Ok(record.final_logits.clone()),
        InputSelector::DiffAllLayers => {
            if layers < 2 {
                return Err(Error::Config("diff_all_layers needs at least 2 stored layers".into()));
            }
            let h = record.hidden.data();
            let mut out = h[..dim].to_vec();
            out.extend((dim..h.len()).map(|i| h[i] - h[i - dim]));
            Tensor::new(vec![layers, dim], out)
        }
    }
}

struct Init {
    rng: ChaCha8Rng,
    tensors: BTreeMap<String, Tensor>,
}

impl Init {
    fn uniform(&mut self, name: &str, shape: Vec<usize>, bound: f64) {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| self.rng.random_range(-bound..=bound) as f32)
            .collect();
        self.tensors
            .insert(name.to_string(), Tensor::new(shape, data).expect("shape"));
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        self.uniform(&format!("{prefix}.weight"), vec![fan_in, fan_out], bound);
        self.uniform(&format!("{prefix}.bias"), vec![fan_out], bound);
    }

    fn norm(&mut self, prefix: &str, kind: Option<NormKind>, width: usize) {
        if let Some(kind) = kind {
            self.tensors
                .insert(format!("{prefix}.gain"), Tensor::filled(vec![width], 1.0));
            if kind == NormKind::LayerNorm {
                self.tensors
                    .insert(format!("{prefix}.shift"), Tensor::zeros(vec![width]));
            }
        }
    }
}

/// Fresh parameters for `config` on a dataset with `layers` x `dim` states.
/// Linear weights and biases are uniform in `±1/sqrt(fan_in)`; norm gains
/// start at one and shifts at zero.
pub fn build_predictor(config: &PredictorConfig, layers: usize, dim: usize) -> Result<PredictorParams> {
    config.validate(layers)?;
    let mut init = Init {
        rng: ChaCha8Rng::seed_from_u64(config.seed),
        tensors: BTreeMap::new(),
    };
    let c = config.classes;
    let input = config.input_shape(layers, dim);
    match config.architecture {
        Architecture::Mixer => {
            let (rows, width) = (input[0], input[1]);
            let (n1, n2) = (config.n1, config.n2);
            init.norm("block1.norm", config.norm, width);
            init.linear("block1.linear", width, n1);
            init.norm("block2.norm", config.norm, rows);
            init.linear("block2.linear", rows, n2);
            init.norm("head.norm", config.head_norm, n1 * n2);
            init.linear("head.linear", n1 * n2, c);
        }
        Architecture::Mlp => {
            init.linear("mlp.hidden", input[0], config.hidden);
            init.linear("mlp.out", config.hidden, c);
        }
        Architecture::Logistic => init.linear("logistic", input[0], c),
        Architecture::SelfAttention => {
            let a = config.attn_dim;
            init.linear("attn.proj", input[1], a);
            init.uniform("attn.cls", vec![a], 1.0 / (a as f64).sqrt());
            init.norm("attn.norm", Some(NormKind::LayerNorm), a);
            init.linear("attn.query", a, a);
            init.linear("attn.key", a, a);
            init.linear("attn.value", a, a);
            init.linear("attn.out", a, c);
        }
    }
    Ok(PredictorParams {
        config: config.clone(),
        layers,
        dim,
        tensors: init.tensors,
        pca: None,
    })
}

/// A mixer whose forward pass reproduces the LLM's own head: block 1 is
/// the identity on `d`, block 2 selects the last layer, and the head is the
/// LLM's final norm followed by the label rows of the unembedding.
pub fn init_identity_head(manifest: &DatasetManifest) -> Result<PredictorParams> {
    let head = manifest.head()?;
    let (l, d, c) = (manifest.num_layers, manifest.hidden_dim, manifest.num_classes);
    let config = PredictorConfig {
        n1: d,
        n2: 1,
        norm: None,
        head_norm: Some(head.norm_kind),
        activation: None,
        norm_epsilon: head.epsilon,
        ..PredictorConfig::innerthoughts(c)
    };
    config.validate(l)?;
    let mut tensors = BTreeMap::new();
    let mut eye = Tensor::zeros(vec![d, d]);
    for i in 0..d {
        eye.data_mut()[i * d + i] = 1.0;
    }
    tensors.insert("block1.linear.weight".into(), eye);
    tensors.insert("block1.linear.bias".into(), Tensor::zeros(vec![d]));
    let mut select_last = Tensor::zeros(vec![l, 1]);
    select_last.data_mut()[l - 1] = 1.0;
    tensors.insert("block2.linear.weight".into(), select_last);
    tensors.insert("block2.linear.bias".into(), Tensor::zeros(vec![1]));
    tensors.insert("head.norm.gain".into(), head.gain.clone());
    if let Some(shift) = &head.shift {
        tensors.insert("head.norm.shift".into(), shift.clone());
    }
    // unembedding is [C, d]; the linear layer wants [d, C]
    let u = head.unembedding.data();
    let mut w = Tensor::zeros(vec![d, c]);
    for ci in 0..c {
        for j in 0..d {
            w.data_mut()[j * c + ci] = u[ci * d + j];
        }
    }
    tensors.insert("head.linear.weight".into(), w);
    tensors.insert("head.linear.bias".into(), Tensor::zeros(vec![c]));
    Ok(PredictorParams {
        config,
        layers: l,
        dim: d,
        tensors,
        pca: None,
    })
}

/// Logistic regression on the logits with `A = I`, `b = 0`.
pub fn identity_logistic(classes: usize, layers: usize) -> Result<PredictorParams> {
    let config = PredictorConfig::new(Architecture::Logistic, InputSelector::Logits, classes);
    config.validate(layers)?;
    let mut eye = Tensor::zeros(vec![classes, classes]);
    for i in 0..classes {
        eye.data_mut()[i * classes + i] = 1.0;
    }
    let mut tensors = BTreeMap::new();
    tensors.insert("logistic.weight".into(), eye);
    tensors.insert("logistic.bias".into(), Tensor::zeros(vec![classes]));
    Ok(PredictorParams {
        config,
        layers,
        dim: 0,
        tensors,
        pca: None,
    })
}

/// Standard sinusoidal position encodings, `[positions, width]`.
pub fn sinusoidal_positions(positions: usize, width: usize) -> Tensor {
    let mut data = vec![0.0f64; positions * width];
    for pos in 0..positions {
        for i in 0..width {
            let pair = (i / 2) as f64;
            let freq = 1.0 / 10000f64.powf(2.0 * pair / width as f64);
            let angle = pos as f64 * freq;
            data[pos * width + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::from_f64(vec![positions, width], &data)
}
