//! Resolves dataset vector references into dense input sequences for one
//! encoder layer.

use std::collections::BTreeMap;

use ndarray::{s, Array2, Axis};
use thiserror::Error;

use crate::corpus::Split;
use crate::embedstore::{EmbedError, EmbeddingSource};
use crate::taskgen::{ProbingDataset, ProbingExample, RefKind};

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("document {doc_id:?}: word {word} has no token in this bundle")]
    StaleReference { doc_id: String, word: usize },
    #[error("example references more than one document")]
    MixedDocuments,
    #[error("example has no inputs")]
    EmptyExample,
    #[error("document {0:?} has no tokens")]
    EmptyDocument(String),
}

/// Input sequences (`T x d`, one per example) with their labels.
#[derive(Debug, Clone, Default)]
pub struct SequenceSet {
    pub inputs: Vec<Array2<f32>>,
    pub labels: Vec<usize>,
}

impl SequenceSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn push(&mut self, input: Array2<f32>, label: usize) {
        self.inputs.push(input);
        self.labels.push(label);
    }
}

#[derive(Debug, Clone)]
pub struct Materialized {
    pub n_classes: usize,
    pub hidden_dim: usize,
    pub train: SequenceSet,
    pub dev: SequenceSet,
    pub test: SequenceSet,
}

impl Materialized {
    pub fn split(&self, split: Split) -> &SequenceSet {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }
}

/// Builds the input sequences of `examples` from `layer`. Whole-document
/// inputs are cut to `doc_token_budget` rows when given.
pub fn materialize_examples(
    examples: &[ProbingExample],
    source: &dyn EmbeddingSource,
    layer: u32,
    doc_token_budget: Option<usize>,
) -> Result<SequenceSet, FeatureError> {
    let mut by_doc: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, ex) in examples.iter().enumerate() {
        let doc = ex.inputs.first().ok_or(FeatureError::EmptyExample)?.doc.as_str();
        if ex.inputs.iter().any(|r| r.doc != doc) {
            return Err(FeatureError::MixedDocuments);
        }
        by_doc.entry(doc).or_default().push(i);
    }

    let mut slots: Vec<Option<Array2<f32>>> = vec![None; examples.len()];
    for (doc_id, indices) in by_doc {
        let (matrix, alignment) = source.layer_matrix(doc_id, layer)?;
        for i in indices {
            let mut rows: Vec<Array2<f32>> = Vec::with_capacity(examples[i].inputs.len());
            for r in &examples[i].inputs {
                match (r.kind, r.word) {
                    (RefKind::Token, Some(word)) => {
                        let row = alignment.first_token(word)?.ok_or_else(|| FeatureError::StaleReference {
                            doc_id: doc_id.to_string(),
                            word,
                        })?;
                        rows.push(matrix.slice(s![row..row + 1, ..]).to_owned());
                    }
                    _ => {
                        let keep = doc_token_budget.map_or(matrix.nrows(), |b| b.min(matrix.nrows()));
                        if keep == 0 {
                            return Err(FeatureError::EmptyDocument(doc_id.to_string()));
                        }
                        rows.push(matrix.slice(s![..keep, ..]).to_owned());
                    }
                }
            }
            let seq = if rows.len() == 1 {
                rows.pop().unwrap()
            } else {
                let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
                ndarray::concatenate(Axis(0), &views).expect("same hidden_dim")
            };
            slots[i] = Some(seq);
        }
    }

    let mut set = SequenceSet::default();
    for (slot, ex) in slots.into_iter().zip(examples) {
        set.push(slot.expect("every example resolved"), ex.label);
    }
    Ok(set)
}

pub fn materialize(ds: &ProbingDataset, source: &dyn EmbeddingSource, layer: u32) -> Result<Materialized, FeatureError> {
    Ok(Materialized {
        n_classes: ds.n_classes,
        hidden_dim: source.hidden_dim(),
        train: materialize_examples(ds.split(Split::Train), source, layer, None)?,
        dev: materialize_examples(ds.split(Split::Dev), source, layer, None)?,
        test: materialize_examples(ds.split(Split::Test), source, layer, None)?,
    })
}
