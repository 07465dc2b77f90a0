//! Synthetic corpora and embedding bundles shared by the integration tests.
#![allow(dead_code)]

pub mod gradcheck;
pub mod oracle;
pub mod strategies;

use std::collections::BTreeMap;

use docprobe::corpus::{split_documents, Corpus, Document, Entity, MentionSpan, Schema, Split, Template};
use docprobe::embedstore::{AlignmentMap, DocEmbedding, EmbeddingMode, InMemoryBundle};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct CorpusShape {
    pub n_docs: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub min_templates: usize,
    pub max_templates: usize,
    /// Probability that a template re-uses an entity of an earlier template.
    pub share_prob: f64,
    pub seed: u64,
}

impl Default for CorpusShape {
    fn default() -> Self {
        CorpusShape {
            n_docs: 10,
            min_words: 20,
            max_words: 60,
            min_templates: 0,
            max_templates: 3,
            share_prob: 0.3,
            seed: 0,
        }
    }
}

fn random_span(rng: &mut ChaCha8Rng, used: &mut [bool]) -> Option<(usize, usize)> {
    for _ in 0..30 {
        let len = rng.random_range(1..=3usize).min(used.len());
        let start = rng.random_range(0..=used.len() - len);
        if used[start..start + len].iter().all(|u| !u) {
            used[start..start + len].iter_mut().for_each(|u| *u = true);
            return Some((start, start + len));
        }
    }
    None
}

fn mention(words: &[String], (s, e): (usize, usize)) -> MentionSpan {
    MentionSpan {
        start_word: s,
        end_word: e,
        surface: words[s..e].join(" "),
    }
}

/// A random document with disjoint mention spans.
pub fn random_document(doc_id: &str, shape: &CorpusShape, rng: &mut ChaCha8Rng) -> Document {
    let schema = Schema::muc();
    let n_words = rng.random_range(shape.min_words..=shape.max_words);
    let words: Vec<String> = (0..n_words).map(|_| format!("w{}", rng.random_range(0..40))).collect();
    let mut sentence_bounds = Vec::new();
    let mut cursor = 0;
    while cursor < n_words {
        let end = (cursor + rng.random_range(3..=12)).min(n_words);
        sentence_bounds.push((cursor, end));
        cursor = end;
    }

    let mut used = vec![false; n_words];
    let n_templates = rng.random_range(shape.min_templates..=shape.max_templates);
    let mut templates: Vec<Template> = Vec::new();
    let mut pool: Vec<Entity> = Vec::new();
    for _ in 0..n_templates {
        let mut roles: BTreeMap<String, Vec<Entity>> = BTreeMap::new();
        for role in &schema.roles {
            let n_entities = rng.random_range(0..=2);
            let mut entities = Vec::new();
            for _ in 0..n_entities {
                if !pool.is_empty() && rng.random_bool(shape.share_prob) {
                    let e = pool[rng.random_range(0..pool.len())].clone();
                    if !entities.contains(&e) {
                        entities.push(e);
                    }
                    continue;
                }
                let n_mentions = rng.random_range(1..=3);
                let mut mentions: Vec<MentionSpan> = (0..n_mentions)
                    .filter_map(|_| random_span(rng, &mut used))
                    .map(|span| mention(&words, span))
                    .collect();
                mentions.sort();
                if !mentions.is_empty() {
                    let e = Entity { mentions };
                    pool.push(e.clone());
                    entities.push(e);
                }
            }
            if !entities.is_empty() {
                roles.insert(role.clone(), entities);
            }
        }
        if roles.is_empty() {
            continue;
        }
        let incident = schema.incident_types[rng.random_range(0..schema.incident_types.len())].clone();
        templates.push(Template {
            incident_type: incident,
            roles,
        });
    }
    Document {
        doc_id: doc_id.to_string(),
        words,
        sentence_bounds,
        templates,
    }
}

/// A corpus split 80/10/10 by `split_documents`.
pub fn synthetic_corpus(shape: &CorpusShape) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(shape.seed);
    let docs = (0..shape.n_docs)
        .map(|i| random_document(&format!("doc-{i:04}"), shape, &mut rng))
        .collect();
    let corpus = Corpus::new(Schema::muc(), docs).expect("fixture documents are valid");
    split_documents(corpus, (0.8, 0.1, 0.1), shape.seed).expect("fixture corpus splits")
}

/// Assigns splits by an explicit list, in document order.
pub fn with_splits(mut corpus: Corpus, splits: &[Split]) -> Corpus {
    corpus.split_assignment = corpus
        .documents
        .iter()
        .zip(splits)
        .map(|(d, &s)| (d.doc_id.clone(), s))
        .collect();
    corpus
}

/// Random word-piece alignment: an optional leading special token, then one
/// or two tokens per word.
pub fn random_alignment(n_words: usize, rng: &mut ChaCha8Rng) -> AlignmentMap {
    let mut offsets = Vec::with_capacity(n_words + 1);
    let mut t = rng.random_range(0..=1u32);
    for _ in 0..n_words {
        offsets.push(t);
        t += rng.random_range(1..=2u32);
    }
    offsets.push(t);
    AlignmentMap::from_offsets(offsets, t as usize).unwrap()
}

pub fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f32> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0f32..1.0))
}

/// Uniform random embeddings for every document, optionally truncated.
pub fn random_bundle(corpus: &Corpus, layers: &[u32], dim: usize, max_tokens: Option<usize>, seed: u64) -> InMemoryBundle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bundle = InMemoryBundle::new(dim, layers.to_vec(), EmbeddingMode::FullText);
    for doc in &corpus.documents {
        let alignment = random_alignment(doc.word_count(), &mut rng);
        let n_tokens = alignment.n_tokens();
        let tensors = layers.iter().map(|&l| (l, random_matrix(n_tokens, dim, &mut rng))).collect();
        let mut emb = DocEmbedding::new(doc.doc_id.clone(), tensors, alignment).unwrap();
        if let Some(max) = max_tokens {
            emb = docprobe::embedstore::truncate(&emb, max);
        }
        bundle.insert(emb).unwrap();
    }
    bundle
}

/// A sample from N(0, 1).
pub fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    use rand_distr::{Distribution, StandardNormal};
    StandardNormal.sample(rng)
}
