//! The probing classifier and its training loop.
//!
//! Architecture: attention pooling with one learned query over the input
//! sequence, a sigmoid hidden layer and a softmax output, trained with Adam
//! on mean cross-entropy. Training stops when dev accuracy has not improved
//! for `tenacity` epochs; the best-epoch parameters are restored before the
//! single test evaluation.

mod adam;
mod model;

use std::path::PathBuf;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use adam::{adam_step, AdamState};
pub use model::{attention_pool, dropout_mask, sigmoid, Gradients, ProbeModel, CHECKPOINT_MAGIC, PARAM_GROUPS};

use crate::corpus::Split;
use crate::embedstore::EmbeddingSource;
use crate::features::{materialize, FeatureError, Materialized, SequenceSet};
use crate::taskgen::ProbingDataset;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("attention pooling over an empty sequence")]
    EmptyInput,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite loss {0}")]
    NonFiniteLoss(f64),
    #[error("non-finite parameters after epoch {epoch}, step {step}")]
    NonFiniteParameters { epoch: usize, step: usize },
    #[error("the {0} split is empty")]
    EmptySplit(Split),
    #[error("invalid probe configuration: {0}")]
    InvalidConfig(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub nhid: usize,
    pub dropout: f64,
    pub batch_size: usize,
    pub max_epoch: usize,
    pub tenacity: usize,
    pub attention_heads: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            nhid: 400,
            dropout: 0.0,
            batch_size: 8,
            max_epoch: 1000,
            tenacity: 10,
            attention_heads: 1,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<(), ProbeError> {
        let bad = |msg: &str| Err(ProbeError::InvalidConfig(msg.to_string()));
        if self.nhid == 0 {
            return bad("nhid must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.tenacity == 0 {
            return bad("tenacity must be at least 1");
        }
        if self.max_epoch == 0 {
            return bad("max_epoch must be at least 1");
        }
        if self.attention_heads != 1 {
            return bad("only a single attention head is supported");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad("learning_rate must be finite and non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Tenacity,
    MaxEpoch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// 0-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub dev_accuracy_curve: Vec<f64>,
    pub train_loss_curve: Vec<f64>,
    pub test_accuracy: f64,
    pub stopped_reason: StopReason,
}

impl TrainReport {
    pub fn epochs_run(&self) -> usize {
        self.dev_accuracy_curve.len()
    }

    pub fn best_dev_accuracy(&self) -> f64 {
        self.dev_accuracy_curve[self.best_epoch]
    }
}

const EVAL_BATCH: usize = 64;

/// Fraction of argmax-correct predictions (ties to the lowest class).
pub fn evaluate(model: &ProbeModel, set: &SequenceSet) -> Result<f64, ProbeError> {
    if set.is_empty() {
        return Err(ProbeError::EmptyInput);
    }
    let mut correct = 0usize;
    for (inputs, labels) in set.inputs.chunks(EVAL_BATCH).zip(set.labels.chunks(EVAL_BATCH)) {
        let views: Vec<ArrayView2<'_, f32>> = inputs.iter().map(|x| x.view()).collect();
        let predicted = model.predict(&views)?;
        correct += predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / set.len() as f64)
}

/// Trains a probe on materialized splits.
pub fn train(config: &ProbeConfig, data: &Materialized) -> Result<(ProbeModel, TrainReport), ProbeError> {
    config.validate()?;
    for split in Split::ALL {
        if data.split(split).is_empty() {
            return Err(ProbeError::EmptySplit(split));
        }
    }
    if data.n_classes < 2 {
        return Err(ProbeError::InvalidConfig(format!("{} classes; need at least 2", data.n_classes)));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = ProbeModel::init(data.hidden_dim, config.nhid, data.n_classes, &mut rng);
    let lens: Vec<usize> = model.groups().iter().map(|g| g.len()).collect();
    let mut adam = AdamState::new(&lens);
    let mut step: u64 = 0;

    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut best_acc = f64::NEG_INFINITY;
    let mut since_best = 0;
    let mut dev_curve = Vec::new();
    let mut loss_curve = Vec::new();
    let mut stopped_reason = StopReason::MaxEpoch;

    for epoch in 0..config.max_epoch {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<(ArrayView2<'_, f32>, usize)> =
                chunk.iter().map(|&i| (data.train.inputs[i].view(), data.train.labels[i])).collect();
            let masks: Option<Array2<f64>> =
                (config.dropout > 0.0).then(|| dropout_mask(batch.len(), config.nhid, config.dropout, &mut rng));
            let (loss, grads) = model.loss_and_grads(&batch, masks.as_ref())?;
            epoch_loss += loss * batch.len() as f64;
            step += 1;
            adam_step(&mut model.groups_mut(), &grads.groups(), &mut adam, config.learning_rate, step);
            if !model.is_finite() {
                return Err(ProbeError::NonFiniteParameters { epoch, step: bi });
            }
        }
        loss_curve.push(epoch_loss / data.train.len() as f64);

        let dev_acc = evaluate(&model, &data.dev)?;
        dev_curve.push(dev_acc);
        if dev_acc > best_acc {
            best_acc = dev_acc;
            best_epoch = epoch;
            best = model.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.tenacity {
                stopped_reason = StopReason::Tenacity;
                break;
            }
        }
    }

    let test_accuracy = evaluate(&best, &data.test)?;
    Ok((
        best,
        TrainReport {
            best_epoch,
            dev_accuracy_curve: dev_curve,
            train_loss_curve: loss_curve,
            test_accuracy,
            stopped_reason,
        },
    ))
}

/// Materializes `dataset` at `layer` and trains a probe on it.
pub fn train_probe(
    config: &ProbeConfig,
    dataset: &ProbingDataset,
    source: &dyn EmbeddingSource,
    layer: u32,
) -> Result<(ProbeModel, TrainReport), ProbeError> {
    let data = materialize(dataset, source, layer)?;
    train(config, &data)
}
