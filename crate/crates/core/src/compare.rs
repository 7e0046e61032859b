//! The baseline-versus-predictor method matrix on one dataset: split,
//! train, score on the test split, attach bootstrap CIs and Wilcoxon
//! p-values against Direct, and write the report.

use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{
    bootstrap_ci, report_table, wilcoxon_one_sided, BootstrapCi, MethodResult, ReportTable, WilcoxonResult,
};
use crate::baselines::{calibrate_before_use, direct_predict, fit_pca};
use crate::dataset::{split_dataset, DatasetManifest, HiddenRecord, SplitSpec};
use crate::error::{Error, Result};
use crate::predictor::{build_predictor, select_inputs, Architecture, InputSelector, PredictorConfig, PredictorParams};
use crate::tensor::Tensor;
use crate::training::{evaluate, prepare_examples, train, EvalResult, TrainConfig, TrainHistory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Direct,
    Calibrate,
    LogisticLogits,
    NnLogits,
    LogisticLast,
    NnLast,
    LogisticLast10,
    NnLast10,
    Innerthoughts,
    DiffInnerthoughts,
    SelfAttention,
}

impl Method {
    pub const ALL: [Method; 11] = [
        Method::Direct,
        Method::Calibrate,
        Method::LogisticLogits,
        Method::NnLogits,
        Method::LogisticLast,
        Method::NnLast,
        Method::LogisticLast10,
        Method::NnLast10,
        Method::Innerthoughts,
        Method::DiffInnerthoughts,
        Method::SelfAttention,
    ];

    /// The nine rows of the standard comparison table.
    pub const STANDARD: [Method; 9] = [
        Method::Direct,
        Method::Calibrate,
        Method::LogisticLogits,
        Method::NnLogits,
        Method::LogisticLast,
        Method::NnLast,
        Method::LogisticLast10,
        Method::NnLast10,
        Method::Innerthoughts,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Method::Direct => "direct",
            Method::Calibrate => "calibrate",
            Method::LogisticLogits => "logistic_logits",
            Method::NnLogits => "nn_logits",
            Method::LogisticLast => "logistic_last",
            Method::NnLast => "nn_last",
            Method::LogisticLast10 => "logistic_last10",
            Method::NnLast10 => "nn_last10",
            Method::Innerthoughts => "innerthoughts",
            Method::DiffInnerthoughts => "diff_innerthoughts",
            Method::SelfAttention => "self_attention",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Method::Direct => "Direct",
            Method::Calibrate => "Calibrate before use",
            Method::LogisticLogits => "Logistic on logits",
            Method::NnLogits => "Neural net on logits",
            Method::LogisticLast => "Logistic on last",
            Method::NnLast => "Neural net on last",
            Method::LogisticLast10 => "Logistic on last 10",
            Method::NnLast10 => "Neural net on last 10",
            Method::Innerthoughts => "InnerThoughts",
            Method::DiffInnerthoughts => "DiffInnerThoughts",
            Method::SelfAttention => "Self-attention",
        }
    }

    pub fn is_trained(self) -> bool {
        !matches!(self, Method::Direct | Method::Calibrate)
    }

    /// Predictor configuration for trained methods.
    pub fn predictor_config(self, cfg: &CompareConfig, layers: usize, classes: usize) -> Option<PredictorConfig> {
        let last_k = InputSelector::LastK {
            k: cfg.last_k.min(layers),
        };
        let (arch, selector) = match self {
            Method::Direct | Method::Calibrate => return None,
            Method::LogisticLogits => (Architecture::Logistic, InputSelector::Logits),
            Method::NnLogits => (Architecture::Mlp, InputSelector::Logits),
            Method::LogisticLast => (Architecture::Logistic, InputSelector::LastLayer),
            Method::NnLast => (Architecture::Mlp, InputSelector::LastLayer),
            Method::LogisticLast10 => (Architecture::Logistic, last_k),
            Method::NnLast10 => (Architecture::Mixer, last_k),
            Method::Innerthoughts => (Architecture::Mixer, InputSelector::AllLayers),
            Method::DiffInnerthoughts => (Architecture::Mixer, InputSelector::DiffAllLayers),
            Method::SelfAttention => (Architecture::SelfAttention, InputSelector::AllLayers),
        };
        let mut pc = PredictorConfig::new(arch, selector, classes).with_seed(method_seed(cfg.seed, self));
        pc.n1 = cfg.n1;
        pc.n2 = cfg.n2;
        if self == Method::LogisticLast10 {
            pc.pca_components = Some(cfg.pca_components);
        }
        Some(pc)
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.key() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

/// Comma-separated method keys; Direct is always included and listed first.
pub fn parse_methods(list: &str) -> Result<Vec<Method>> {
    let mut methods = vec![Method::Direct];
    for part in list.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let m: Method = part.parse()?;
        if !methods.contains(&m) {
            methods.push(m);
        }
    }
    Ok(methods)
}

/// Distinct, stable seed per method.
fn method_seed(seed: u64, method: Method) -> u64 {
    let index = Method::ALL.iter().position(|m| *m == method).unwrap_or(0) as u64;
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index + 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareConfig {
    pub methods: Vec<Method>,
    pub fractions: [f64; 3],
    pub seed: u64,
    pub train: TrainConfig,
    pub n1: usize,
    pub n2: usize,
    /// Layers used by the last-k variants (capped at L).
    pub last_k: usize,
    /// PCA components for the last-k logistic (capped at the data size).
    pub pca_components: usize,
    pub n_boot: usize,
    pub level: f64,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            methods: Method::STANDARD.to_vec(),
            fractions: [0.7, 0.15, 0.15],
            seed: 0,
            train: TrainConfig::default(),
            n1: 32,
            n2: 8,
            last_k: 10,
            pca_components: 512,
            n_boot: 2000,
            level: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodOutcome {
    pub method: Method,
    pub name: String,
    pub accuracy: f64,
    pub ci: BootstrapCi,
    pub wilcoxon: Option<WilcoxonResult>,
    pub parameters: usize,
    pub history: Option<TrainHistory>,
    #[serde(skip)]
    pub eval: Option<EvalResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareOutput {
    pub dataset: String,
    pub seed: u64,
    pub split_sizes: [usize; 3],
    pub results: Vec<MethodResult>,
    pub methods: Vec<MethodOutcome>,
}

impl CompareOutput {
    pub fn table(&self) -> Result<ReportTable> {
        report_table(&self.results)
    }

    /// Writes `report.csv`, `report.md`, `results.json` and one training
    /// history per trained method.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let table = self.table()?;
        let write = |name: &str, text: String| {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        write("report.csv", table.to_csv()?)?;
        write("report.md", table.to_markdown())?;
        write("results.json", serde_json::to_string_pretty(self)? + "\n")?;
        for m in &self.methods {
            if let Some(h) = &m.history {
                let mut buf = Vec::new();
                h.write_csv(&mut buf)?;
                write(&format!("history_{}.csv", m.method.key()), String::from_utf8_lossy(&buf).into_owned())?;
            }
        }
        Ok(())
    }
}

/// A trained predictor together with its training history.
#[derive(Debug, Clone, PartialEq)]
pub struct Fitted {
    pub params: PredictorParams,
    pub history: TrainHistory,
}

/// Builds, (for PCA configs) fits the basis on the training records, and
/// trains a predictor.
pub fn fit_predictor(
    config: &PredictorConfig,
    train_cfg: &TrainConfig,
    manifest: &DatasetManifest,
    train_records: &[HiddenRecord],
    validation_records: &[HiddenRecord],
) -> Result<Fitted> {
    let mut config = config.clone();
    let mut basis = None;
    if let Some(k) = config.pca_components {
        let rows: Vec<Tensor> = train_records
            .iter()
            .map(|r| select_inputs(r, config.selector))
            .collect::<Result<_>>()?;
        let d = rows.first().map_or(0, Tensor::len);
        let k = k.min(rows.len()).min(d);
        let data: Vec<f32> = rows.iter().flat_map(|t| t.data().iter().copied()).collect();
        basis = Some(fit_pca(&Tensor::matrix(rows.len(), d, data)?, k)?);
        config.pca_components = Some(k);
    }
    let mut params = build_predictor(&config, manifest.num_layers, manifest.hidden_dim)?;
    params.pca = basis;
    let tr = prepare_examples(&params, train_records)?;
    let va = prepare_examples(&params, validation_records)?;
    let (params, history) = train(train_cfg, params, &tr, &va)?;
    Ok(Fitted { params, history })
}

fn pick(records: &[HiddenRecord], idx: &[usize]) -> Vec<HiddenRecord> {
    idx.iter().map(|&i| records[i].clone()).collect()
}

/// Runs the configured methods on `records` and collects the table inputs.
pub fn run_compare(cfg: &CompareConfig, manifest: &DatasetManifest, records: &[HiddenRecord]) -> Result<CompareOutput> {
    let split = split_dataset(records.len(), cfg.fractions, cfg.seed)?;
    run_compare_with_split(cfg, manifest, records, &split)
}

pub fn run_compare_with_split(
    cfg: &CompareConfig,
    manifest: &DatasetManifest,
    records: &[HiddenRecord],
    split: &SplitSpec,
) -> Result<CompareOutput> {
    if split.validation.is_empty() || split.test.is_empty() {
        return Err(Error::Input("compare needs nonempty validation and test splits".into()));
    }
    let mut methods = cfg.methods.clone();
    if !methods.contains(&Method::Direct) {
        methods.insert(0, Method::Direct);
    }
    let train_records = pick(records, &split.train);
    let val_records = pick(records, &split.validation);
    let test_records = pick(records, &split.test);
    let labels: Vec<usize> = test_records.iter().map(|r| r.gold_label).collect();

    let evals: Vec<(EvalResult, Option<TrainHistory>, usize)> = methods
        .par_iter()
        .map(|&m| {
            log::info!("running {}", m.key());
            run_method(cfg, m, manifest, &train_records, &val_records, &test_records, &labels)
        })
        .collect::<Result<_>>()?;

    let direct = evals[methods.iter().position(|m| *m == Method::Direct).unwrap_or(0)]
        .0
        .correct
        .clone();
    let mut outcomes = Vec::with_capacity(methods.len());
    let mut results = Vec::with_capacity(methods.len());
    for (&m, (eval, history, parameters)) in methods.iter().zip(evals) {
        let ci = bootstrap_ci(&eval.correct, cfg.n_boot, cfg.level, cfg.seed)?;
        let wilcoxon = if m == Method::Direct {
            None
        } else {
            Some(wilcoxon_one_sided(&eval.correct, &direct)?)
        };
        results.push(MethodResult {
            method: m.display_name().to_string(),
            dataset: manifest.dataset.clone(),
            accuracy: eval.accuracy,
            ci_half_width: ci.half_width(),
            p_value: wilcoxon.map(|w| w.p_value),
            reference: false,
        });
        outcomes.push(MethodOutcome {
            method: m,
            name: m.display_name().to_string(),
            accuracy: eval.accuracy,
            ci,
            wilcoxon,
            parameters,
            history,
            eval: Some(eval),
        });
    }
    let (a, b, c) = split.sizes();
    Ok(CompareOutput {
        dataset: manifest.dataset.clone(),
        seed: cfg.seed,
        split_sizes: [a, b, c],
        results,
        methods: outcomes,
    })
}

fn run_method(
    cfg: &CompareConfig,
    method: Method,
    manifest: &DatasetManifest,
    train_records: &[HiddenRecord],
    val_records: &[HiddenRecord],
    test_records: &[HiddenRecord],
    labels: &[usize],
) -> Result<(EvalResult, Option<TrainHistory>, usize)> {
    let direct_probs = || -> Vec<Vec<f64>> {
        test_records
            .iter()
            .map(|r| direct_predict(&r.final_logits).to_f64())
            .collect()
    };
    match method {
        Method::Direct => Ok((EvalResult::from_probabilities(direct_probs(), labels), None, 0)),
        Method::Calibrate => {
            let cal = manifest
                .calibration
                .as_ref()
                .ok_or_else(|| Error::Capability("manifest carries no calibration vector".into()))?;
            cal.check(manifest.num_classes)?;
            let probs = direct_probs()
                .iter()
                .map(|p| calibrate_before_use(p, cal))
                .collect::<Result<Vec<_>>>()?;
            Ok((EvalResult::from_probabilities(probs, labels), None, 0))
        }
        _ => {
            let pc = method
                .predictor_config(cfg, manifest.num_layers, manifest.num_classes)
                .ok_or_else(|| Error::State(format!("{} is not a trained method", method.key())))?;
            let train_cfg = TrainConfig {
                seed: method_seed(cfg.seed, method),
                ..cfg.train.clone()
            };
            let fitted = fit_predictor(&pc, &train_cfg, manifest, train_records, val_records)?;
            let test = prepare_examples(&fitted.params, test_records)?;
            let eval = evaluate(&fitted.params, &test)?;
            Ok((eval, Some(fitted.history), fitted.params.num_parameters()))
        }
    }
}
