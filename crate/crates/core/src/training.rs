//! Adam training with validation-accuracy early stopping, and evaluation.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::HiddenRecord;
use crate::error::{Error, Result};
use crate::predictor::{build_graph, PredictorParams};
use crate::tensor::{argmax, Tensor};

const EVAL_BATCH: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            learning_rate: 1e-5,
            batch_size: 256,
            patience: 5,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            seed: 0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.patience == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs, patience and batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        Ok(())
    }
}

/// A prepared network input with its gold label.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub input: Tensor,
    pub label: usize,
}

pub fn prepare_examples(params: &PredictorParams, records: &[HiddenRecord]) -> Result<Vec<Example>> {
    records
        .iter()
        .map(|r| {
            Ok(Example {
                input: params.prepare(r)?,
                label: r.gold_label,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Epoch 0 is the untrained initialization.
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainHistory {
    pub fn best(&self) -> &EpochRecord {
        &self.epochs[self.best_epoch]
    }

    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "train_loss", "val_accuracy"])?;
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                format!("{:.6}", e.train_loss),
                format!("{:.6}", e.val_accuracy),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// Adam with bias correction; moments are kept in 64-bit.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_epsilon,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut BTreeMap<String, Tensor>, grads: &BTreeMap<String, Vec<f64>>) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for (i, (pv, &gi)) in p.data_mut().iter_mut().zip(g).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let update = self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                *pv = (f64::from(*pv) - update) as f32;
            }
        }
    }
}

/// One Adam step on a batch; returns the batch loss before the update.
pub fn train_step(
    params: &mut PredictorParams,
    optimizer: &mut Adam,
    batch: &[&Example],
) -> Result<f64> {
    let inputs: Vec<&Tensor> = batch.iter().map(|e| &e.input).collect();
    let labels: Vec<usize> = batch.iter().map(|e| e.label).collect();
    let mut pg = build_graph(params, &inputs, false)?;
    let loss = pg.graph.cross_entropy(pg.probs, &labels)?;
    pg.graph.forward()?;
    let value = pg.graph.scalar(loss)?;
    // the probability floor can mask a NaN forward pass, so check upstream too
    if !value.is_finite() || pg.graph.value(pg.probs)?.iter().any(|v| !v.is_finite()) {
        return Ok(f64::NAN);
    }
    pg.graph.backward(loss)?;
    let grads: BTreeMap<String, Vec<f64>> = pg
        .graph
        .params()
        .map(|(name, id)| (name.to_string(), pg.graph.grad(id).unwrap_or_default().to_vec()))
        .collect();
    if grads.values().flatten().any(|g| !g.is_finite()) {
        return Ok(f64::NAN);
    }
    optimizer.step(&mut params.tensors, &grads);
    Ok(value)
}

/// Trains with Adam on cross-entropy and returns the parameters of the
/// epoch with the best validation accuracy (ties to the earliest, epoch 0
/// being the initialization).
pub fn train(
    config: &TrainConfig,
    predictor: PredictorParams,
    train_set: &[Example],
    validation: &[Example],
) -> Result<(PredictorParams, TrainHistory)> {
    config.validate()?;
    if train_set.is_empty() || validation.is_empty() {
        return Err(Error::Input("training and validation sets must be nonempty".into()));
    }
    let mut params = predictor;
    let mut history = TrainHistory {
        epochs: vec![EpochRecord {
            epoch: 0,
            train_loss: mean_loss(&params, train_set)?,
            val_accuracy: evaluate(&params, validation)?.accuracy,
        }],
        best_epoch: 0,
        stopped_early: false,
    };
    let mut best = params.clone();
    let mut since_best = 0;
    let mut optimizer = Adam::new(config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=config.epochs {
        if config.shuffle {
            order.shuffle(&mut rng);
        }
        let mut total = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train_set[i]).collect();
            let loss = train_step(&mut params, &mut optimizer, &batch)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, batch: b });
            }
            total += loss * chunk.len() as f64;
        }
        let val_accuracy = evaluate(&params, validation)?.accuracy;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: total / train_set.len() as f64,
            val_accuracy,
        });
        log::debug!("epoch {epoch}: loss {:.5} val {:.4}", total / train_set.len() as f64, val_accuracy);
        if val_accuracy > history.best().val_accuracy {
            history.best_epoch = epoch;
            best = params.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                history.stopped_early = epoch < config.epochs;
                break;
            }
        }
    }
    Ok((best, history))
}

/// Cross-entropy of `params` over a set, without updating anything.
pub fn mean_loss(params: &PredictorParams, examples: &[Example]) -> Result<f64> {
    let mut total = 0.0;
    for chunk in examples.chunks(EVAL_BATCH) {
        let inputs: Vec<&Tensor> = chunk.iter().map(|e| &e.input).collect();
        let labels: Vec<usize> = chunk.iter().map(|e| e.label).collect();
        let mut pg = build_graph(params, &inputs, false)?;
        let loss = pg.graph.cross_entropy(pg.probs, &labels)?;
        pg.graph.forward()?;
        total += pg.graph.scalar(loss)? * chunk.len() as f64;
    }
    Ok(total / examples.len().max(1) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub accuracy: f64,
    pub predictions: Vec<usize>,
    pub probabilities: Vec<Vec<f64>>,
    pub correct: Vec<bool>,
}

impl EvalResult {
    /// Builds a result from probability vectors; argmax ties go low.
    pub fn from_probabilities(probabilities: Vec<Vec<f64>>, labels: &[usize]) -> Self {
        let predictions: Vec<usize> = probabilities.iter().map(|p| argmax(p)).collect();
        let correct: Vec<bool> = predictions.iter().zip(labels).map(|(p, l)| p == l).collect();
        let accuracy = correct.iter().filter(|c| **c).count() as f64 / correct.len().max(1) as f64;
        Self {
            accuracy,
            predictions,
            probabilities,
            correct,
        }
    }
}

pub fn evaluate(params: &PredictorParams, examples: &[Example]) -> Result<EvalResult> {
    if examples.is_empty() {
        return Err(Error::Input("cannot evaluate on an empty set".into()));
    }
    let mut probabilities = Vec::with_capacity(examples.len());
    let c = params.config.classes;
    for chunk in examples.chunks(EVAL_BATCH) {
        let inputs: Vec<&Tensor> = chunk.iter().map(|e| &e.input).collect();
        let mut pg = build_graph(params, &inputs, false)?;
        pg.graph.forward()?;
        // round through f32 so results match single-example forward calls
        probabilities.extend(
            pg.graph
                .value(pg.probs)?
                .chunks(c)
                .map(|row| row.iter().map(|&v| f64::from(v as f32)).collect::<Vec<f64>>()),
        );
    }
    let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
    Ok(EvalResult::from_probabilities(probabilities, &labels))
}

pub fn evaluate_records(params: &PredictorParams, records: &[HiddenRecord]) -> Result<EvalResult> {
    evaluate(params, &prepare_examples(params, records)?)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::predictor::{build_predictor, Architecture, InputSelector, PredictorConfig};

    fn separable(n: usize, seed: u64) -> Vec<Example> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let label = rng.random_range(0..2usize);
                let sign = if label == 1 { 1.0 } else { -1.0 };
                let x0: f32 = sign * rng.random_range(0.5..2.0f32);
                let x1: f32 = rng.random_range(-1.0..1.0);
                Example {
                    input: Tensor::vector(vec![x0, x1]),
                    label,
                }
            })
            .collect()
    }

    fn logistic() -> PredictorParams {
        let cfg = PredictorConfig::new(Architecture::Logistic, InputSelector::Logits, 2).with_seed(1);
        build_predictor(&cfg, 1, 0).unwrap()
    }

    #[test]
    fn separable_data_is_learned() {
        let data = separable(200, 0);
        let cfg = TrainConfig {
            learning_rate: 1e-2,
            batch_size: 32,
            patience: 50,
            ..TrainConfig::default()
        };
        let (p, _) = train(&cfg, logistic(), &data, &data).unwrap();
        assert_eq!(evaluate(&p, &data).unwrap().accuracy, 1.0);
    }

    #[test]
    fn best_snapshot_never_worse_than_init() {
        let tr = separable(100, 1);
        let va = separable(40, 2);
        let init = logistic();
        let before = evaluate(&init, &va).unwrap().accuracy;
        let cfg = TrainConfig {
            learning_rate: 0.5,
            epochs: 5,
            ..TrainConfig::default()
        };
        let (p, h) = train(&cfg, init, &tr, &va).unwrap();
        assert!(evaluate(&p, &va).unwrap().accuracy >= before);
        assert_eq!(h.best().val_accuracy, evaluate(&p, &va).unwrap().accuracy);
    }

    #[test]
    fn training_is_deterministic() {
        let tr = separable(100, 3);
        let va = separable(30, 4);
        let cfg = TrainConfig {
            learning_rate: 1e-2,
            epochs: 10,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let a = train(&cfg, logistic(), &tr, &va).unwrap();
        let b = train(&cfg, logistic(), &tr, &va).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn early_stop_respects_patience() {
        let tr = separable(60, 5);
        let va = separable(20, 6);
        let cfg = TrainConfig {
            learning_rate: 1e-2,
            epochs: 50,
            patience: 2,
            ..TrainConfig::default()
        };
        let (_, h) = train(&cfg, logistic(), &tr, &va).unwrap();
        let last = h.epochs.last().unwrap().epoch;
        assert!(last <= h.best_epoch + cfg.patience);
        for e in &h.epochs[..=h.best_epoch] {
            assert!(e.val_accuracy <= h.best().val_accuracy);
        }
        for e in &h.epochs[h.best_epoch + 1..] {
            assert!(e.val_accuracy <= h.best().val_accuracy);
        }
    }

    #[test]
    fn empty_split_is_input_error() {
        let tr = separable(10, 7);
        let err = train(&TrainConfig::default(), logistic(), &tr, &[]).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }

    #[test]
    fn divergence_names_the_batch() {
        let tr = vec![Example {
            input: Tensor::vector(vec![f32::NAN, 0.0]),
            label: 0,
        }];
        let err = train(&TrainConfig::default(), logistic(), &tr, &tr).unwrap_err();
        assert!(matches!(err, Error::Divergence { epoch: 1, batch: 0 }), "{err}");
    }

    #[test]
    fn uniform_predictor_takes_class_zero() {
        let cfg = PredictorConfig::new(Architecture::Logistic, InputSelector::Logits, 4);
        let mut p = build_predictor(&cfg, 1, 0).unwrap();
        for t in p.tensors.values_mut() {
            t.data_mut().fill(0.0);
        }
        let data: Vec<Example> = (0..8)
            .map(|i| Example {
                input: Tensor::zeros(vec![4]),
                label: i % 4,
            })
            .collect();
        let r = evaluate(&p, &data).unwrap();
        assert!(r.predictions.iter().all(|&p| p == 0));
        assert_eq!(r.accuracy, 0.25);
    }

    #[test]
    fn history_csv_layout() {
        let h = TrainHistory {
            epochs: vec![EpochRecord {
                epoch: 0,
                train_loss: 0.5,
                val_accuracy: 0.25,
            }],
            best_epoch: 0,
            stopped_early: false,
        };
        let mut buf = Vec::new();
        h.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "epoch,train_loss,val_accuracy\n0,0.500000,0.250000\n");
    }

    #[test]
    fn mixer_loss_falls_over_first_adam_steps() {
        use crate::dataset::{generate_synthetic, SyntheticConfig};
        let (_, records) = generate_synthetic(&SyntheticConfig {
            layers: 4,
            dim: 16,
            n: 64,
            signal_layer: 2,
            ..SyntheticConfig::default()
        })
        .unwrap();
        for seed in 0..10 {
            let mut p = build_predictor(&PredictorConfig::innerthoughts(4).with_seed(seed), 4, 16).unwrap();
            let ex = prepare_examples(&p, &records).unwrap();
            let batch: Vec<&Example> = ex.iter().collect();
            let cfg = TrainConfig {
                learning_rate: 1e-3,
                ..TrainConfig::default()
            };
            let mut opt = Adam::new(&cfg);
            let mut losses = Vec::new();
            for _ in 0..5 {
                losses.push(train_step(&mut p, &mut opt, &batch).unwrap());
            }
            losses.push(mean_loss(&p, &ex).unwrap());
            for w in losses.windows(2) {
                assert!(w[1] < w[0], "seed {seed}: {losses:?}");
            }
        }
    }

    #[test]
    fn evaluate_is_pure_and_matches_forward() {
        let data = separable(30, 8);
        let p = logistic();
        let a = evaluate(&p, &data).unwrap();
        assert_eq!(a, evaluate(&p, &data).unwrap());
        for (e, probs) in data.iter().zip(&a.probabilities) {
            let single: Vec<f64> = p.forward(&e.input).unwrap().to_f64();
            assert_eq!(&single, probs);
        }
    }

    #[test]
    fn single_correct_record_scores_one() {
        let p = logistic();
        let e = separable(1, 9).pop().unwrap();
        let pred = evaluate(&p, std::slice::from_ref(&e)).unwrap().predictions[0];
        let r = evaluate(&p, &[Example { label: pred, ..e }]).unwrap();
        assert_eq!(r.accuracy, 1.0);
    }

    #[test]
    fn identity_head_evaluates_to_direct_accuracy() {
        use crate::baselines::direct_predict;
        use crate::dataset::{generate_synthetic, SyntheticConfig};
        use crate::predictor::init_identity_head;
        let (m, records) = generate_synthetic(&SyntheticConfig {
            n: 300,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let p = init_identity_head(&m).unwrap();
        let direct = records
            .iter()
            .filter(|r| direct_predict(&r.final_logits).argmax() == r.gold_label)
            .count() as f64
            / records.len() as f64;
        assert_eq!(evaluate_records(&p, &records).unwrap().accuracy, direct);
    }
}
