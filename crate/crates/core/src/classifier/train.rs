use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::embedding::EmbeddingSet;
use super::mlp::{MlpModel, DEFAULT_HIDDEN};
use crate::aggregate::AggregateLabel;
use crate::{Error, Reaction, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Fraction of examples used for training; the rest is the test set.
    pub split: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub rng_seed: u64,
    pub hidden: [usize; 3],
    /// Weight each class by total / (3 * class support) in the loss.
    pub class_weighting: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            split: 0.8,
            epochs: 50,
            batch_size: 32,
            learning_rate: 0.01,
            rng_seed: 0,
            hidden: DEFAULT_HIDDEN,
            class_weighting: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.split > 0.0 && self.split < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "split {} outside (0, 1)",
                self.split
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning rate {}",
                self.learning_rate
            )));
        }
        if self.hidden.contains(&0) {
            return Err(Error::InvalidConfig("hidden sizes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub prompt_id: String,
    pub x: Vec<f64>,
    pub label: Reaction,
}

/// Joins retained prompt labels with their combined embeddings.
pub fn build_dataset(
    embeddings: &EmbeddingSet,
    labels: &[AggregateLabel],
) -> Result<Vec<LabeledExample>> {
    let mut out = Vec::new();
    for l in labels.iter().filter(|l| l.retained) {
        let Some(label) = l.label.as_reaction() else {
            continue;
        };
        let emb = embeddings.get(&l.prompt_id).ok_or_else(|| {
            Error::InvalidConfig(format!("no embedding for prompt {}", l.prompt_id))
        })?;
        out.push(LabeledExample {
            prompt_id: l.prompt_id.clone(),
            x: emb.combined(),
            label,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub total: usize,
    pub accuracy: f64,
    /// Rows are true classes, columns predicted, in (ethical, unethical, unclear) order.
    pub confusion: [[usize; 3]; 3],
    pub support: [usize; 3],
    /// `None` for a class absent from the data.
    pub recall: [Option<f64>; 3],
    pub unclear_prediction_rate: f64,
}

impl Evaluation {
    pub fn from_pairs<I: IntoIterator<Item = (Reaction, Reaction)>>(pairs: I) -> Self {
        let mut confusion = [[0usize; 3]; 3];
        for (truth, pred) in pairs {
            confusion[truth.index()][pred.index()] += 1;
        }
        let support = confusion.map(|row| row.iter().sum::<usize>());
        let total: usize = support.iter().sum();
        let correct: usize = (0..3).map(|i| confusion[i][i]).sum();
        let unclear_pred: usize = (0..3)
            .map(|i| confusion[i][Reaction::Unclear.index()])
            .sum();
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        Self {
            total,
            accuracy: ratio(correct, total),
            confusion,
            support,
            recall: std::array::from_fn(|i| {
                (support[i] > 0).then(|| confusion[i][i] as f64 / support[i] as f64)
            }),
            unclear_prediction_rate: ratio(unclear_pred, total),
        }
    }
}

pub fn evaluate(model: &MlpModel, examples: &[LabeledExample]) -> Result<Evaluation> {
    if examples.is_empty() {
        return Err(Error::DegenerateDataset("empty evaluation set".into()));
    }
    let pairs = examples
        .iter()
        .map(|e| Ok((e.label, model.predict(&e.x)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Evaluation::from_pairs(pairs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub train_size: usize,
    pub test_size: usize,
    pub epochs: usize,
    /// Mean training loss after each epoch.
    pub loss_history: Vec<f64>,
    pub train: Evaluation,
    pub test: Option<Evaluation>,
    /// Only one class was present.
    pub degenerate: bool,
}

/// Seeded shuffle of `0..n`, split into train and test index sets.
pub fn split_indices(n: usize, split: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = ((n as f64 * split).round() as usize).clamp(n.min(1), n);
    let test = idx.split_off(cut);
    (idx, test)
}

/// Splits, initializes and trains with minibatch SGD. Deterministic for a
/// given seed, config and example order.
pub fn train(
    examples: &[LabeledExample],
    config: &TrainConfig,
) -> Result<(MlpModel, TrainMetrics)> {
    config.validate()?;
    let (train_idx, test_idx) = split_indices(examples.len(), config.split, config.rng_seed);
    let train_set: Vec<&LabeledExample> = train_idx.iter().map(|&i| &examples[i]).collect();
    let test_set: Vec<LabeledExample> = test_idx.iter().map(|&i| examples[i].clone()).collect();
    let (model, loss_history) = fit(&train_set, config)?;
    let mut seen = [false; 3];
    for e in examples {
        seen[e.label.index()] = true;
    }
    let degenerate = seen.iter().filter(|s| **s).count() < 2;
    if degenerate {
        log::warn!(
            "{}",
            Error::DegenerateDataset("only one class present".into())
        );
    }
    let train_owned: Vec<LabeledExample> = train_set.iter().map(|e| (*e).clone()).collect();
    let metrics = TrainMetrics {
        train_size: train_set.len(),
        test_size: test_set.len(),
        epochs: config.epochs,
        loss_history,
        train: evaluate(&model, &train_owned)?,
        test: if test_set.is_empty() {
            None
        } else {
            Some(evaluate(&model, &test_set)?)
        },
        degenerate,
    };
    Ok((model, metrics))
}

fn fit(train_set: &[&LabeledExample], config: &TrainConfig) -> Result<(MlpModel, Vec<f64>)> {
    let first = train_set
        .first()
        .ok_or_else(|| Error::DegenerateDataset("empty training set".into()))?;
    let dim = first.x.len();
    for e in train_set {
        if e.x.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: e.x.len(),
            });
        }
    }
    let class_weights = config.class_weighting.then(|| {
        let mut support = [0usize; 3];
        for e in train_set {
            support[e.label.index()] += 1;
        }
        let n = train_set.len() as f64;
        support.map(|s| if s == 0 { 0.0 } else { n / (3.0 * s as f64) })
    });

    let mut model = MlpModel::new(dim, config.hidden, config.rng_seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed ^ 0x5eed_5eed_5eed_5eed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut batch: Vec<(&[f64], Reaction)> = Vec::with_capacity(config.batch_size);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            batch.clear();
            batch.extend(
                chunk
                    .iter()
                    .map(|&i| (train_set[i].x.as_slice(), train_set[i].label)),
            );
            let g = model.gradients(&batch, class_weights)?;
            model.apply_gradients(&g, config.learning_rate);
        }
        let all: Vec<(&[f64], Reaction)> = train_set
            .iter()
            .map(|e| (e.x.as_slice(), e.label))
            .collect();
        history.push(model.loss(&all, class_weights)?);
    }
    Ok((model, history))
}
