//! Brute-force enumerations of what each task builder should produce, written
//! directly against the corpus structure and alignment offsets.

use std::collections::{BTreeMap, BTreeSet};

use docprobe::corpus::{Corpus, Document, Split};
use docprobe::embedstore::EmbeddingSource;
use docprobe::taskgen::ProbingDataset;

pub type Span = (usize, usize);

/// Candidate total and, for binary tasks, surviving (positive, negative)
/// counts per split.
#[derive(Debug, Clone, Default)]
pub struct Expectation {
    pub total: usize,
    pub per_split: BTreeMap<Split, (usize, usize)>,
}

impl Expectation {
    /// Checks accounting and exact class balance of a binary dataset.
    pub fn check_balanced(&self, ds: &ProbingDataset) -> Result<(), String> {
        self.check_total(ds)?;
        for split in Split::ALL {
            let (p, n) = self.per_split.get(&split).copied().unwrap_or_default();
            let m = p.min(n);
            let counts = ds.class_counts(split);
            if counts != vec![m, m] {
                return Err(format!("{} {split}: class counts {counts:?}, expected [{m}, {m}]", ds.task));
            }
        }
        Ok(())
    }

    pub fn check_total(&self, ds: &ProbingDataset) -> Result<(), String> {
        let a = ds.accounting;
        if a.candidates != self.total || a.emitted + a.dropped + a.skipped != self.total || a.emitted != ds.len() {
            return Err(format!("{}: accounting {a:?} vs enumeration total {}", ds.task, self.total));
        }
        Ok(())
    }
}

/// Whether `word` still has a token row, read straight from the offsets.
pub fn survives(source: &dyn EmbeddingSource, doc: &str, word: usize) -> bool {
    let a = source.alignment(doc).unwrap();
    let off = a.offsets();
    off[word] < off[word + 1] && (off[word] as usize) < a.n_tokens()
}

pub fn all_spans(doc: &Document) -> BTreeSet<Span> {
    let mut out = BTreeSet::new();
    for t in &doc.templates {
        for entities in t.roles.values() {
            for e in entities {
                for m in &e.mentions {
                    out.insert((m.start_word, m.end_word));
                }
            }
        }
    }
    out
}

pub fn docs_in(corpus: &Corpus, split: Split) -> Vec<&Document> {
    corpus
        .documents
        .iter()
        .filter(|d| corpus.split_assignment[&d.doc_id] == split)
        .collect()
}

fn entity_span_sets(doc: &Document) -> Vec<(usize, BTreeSet<Span>)> {
    doc.templates
        .iter()
        .enumerate()
        .flat_map(|(ti, t)| {
            t.roles
                .values()
                .flatten()
                .map(move |e| (ti, e.mentions.iter().map(|m| (m.start_word, m.end_word)).collect()))
        })
        .collect()
}

pub fn isarg(corpus: &Corpus, source: &dyn EmbeddingSource) -> Expectation {
    let mut exp = Expectation::default();
    for split in Split::ALL {
        let (mut pos, mut neg) = (0, 0);
        for doc in docs_in(corpus, split) {
            let spans = all_spans(doc);
            exp.total += spans.len();
            let surviving = spans.iter().filter(|s| survives(source, &doc.doc_id, s.0)).count();
            pos += surviving;
            if surviving == 0 {
                continue;
            }
            for w in 0..doc.words.len() {
                if spans.iter().any(|&(s, e)| s <= w && w < e) {
                    continue;
                }
                exp.total += 1;
                neg += survives(source, &doc.doc_id, w) as usize;
            }
        }
        exp.per_split.insert(split, (pos, neg));
    }
    exp
}

/// Total distinct (span, role) pairs and how many keep their first token.
pub fn argtyp(corpus: &Corpus, source: &dyn EmbeddingSource) -> (usize, usize) {
    let (mut total, mut emitted) = (0, 0);
    for doc in &corpus.documents {
        let mut pairs: BTreeSet<(Span, &str)> = BTreeSet::new();
        for t in &doc.templates {
            for (role, entities) in &t.roles {
                for e in entities {
                    for m in &e.mentions {
                        pairs.insert(((m.start_word, m.end_word), role.as_str()));
                    }
                }
            }
        }
        total += pairs.len();
        emitted += pairs.iter().filter(|(s, _)| survives(source, &doc.doc_id, s.0)).count();
    }
    (total, emitted)
}

pub fn coref(corpus: &Corpus, source: &dyn EmbeddingSource) -> Expectation {
    let mut exp = Expectation::default();
    for split in Split::ALL {
        let (mut pos, mut neg) = (0, 0);
        for doc in docs_in(corpus, split) {
            let entities = entity_span_sets(doc);
            let spans: Vec<Span> = all_spans(doc).into_iter().collect();
            for i in 0..spans.len() {
                for j in i + 1..spans.len() {
                    exp.total += 1;
                    let (a, b) = (spans[i], spans[j]);
                    if !(survives(source, &doc.doc_id, a.0) && survives(source, &doc.doc_id, b.0)) {
                        continue;
                    }
                    if entities.iter().any(|(_, e)| e.contains(&a) && e.contains(&b)) {
                        pos += 1;
                    } else {
                        neg += 1;
                    }
                }
            }
        }
        exp.per_split.insert(split, (pos, neg));
    }
    exp
}

pub fn coevnt(corpus: &Corpus, source: &dyn EmbeddingSource) -> Expectation {
    let mut exp = Expectation::default();
    for split in Split::ALL {
        let (mut pos, mut neg) = (0, 0);
        for doc in docs_in(corpus, split) {
            let per_template: Vec<BTreeSet<Span>> = doc
                .templates
                .iter()
                .map(|t| {
                    t.roles
                        .values()
                        .flatten()
                        .flat_map(|e| e.mentions.iter().map(|m| (m.start_word, m.end_word)))
                        .collect()
                })
                .collect();
            // an entity is shared when the same mention set fills slots in two templates
            let sets = entity_span_sets(doc);
            let shared: Vec<&BTreeSet<Span>> = sets
                .iter()
                .filter(|(ti, set)| sets.iter().any(|(tj, other)| tj != ti && other == set))
                .map(|(_, set)| set)
                .collect();
            let spans: Vec<Span> = all_spans(doc).into_iter().collect();
            for i in 0..spans.len() {
                for j in i + 1..spans.len() {
                    exp.total += 1;
                    let (a, b) = (spans[i], spans[j]);
                    if shared.iter().any(|s| s.contains(&a) && s.contains(&b)) {
                        continue;
                    }
                    if !(survives(source, &doc.doc_id, a.0) && survives(source, &doc.doc_id, b.0)) {
                        continue;
                    }
                    if per_template.iter().any(|t| t.contains(&a) && t.contains(&b)) {
                        pos += 1;
                    } else {
                        neg += 1;
                    }
                }
            }
        }
        exp.per_split.insert(split, (pos, neg));
    }
    exp
}

/// `(total, emitted, dropped, skipped)` for event typing from `n` mentions.
pub fn evnttyp(corpus: &Corpus, source: &dyn EmbeddingSource, n: usize) -> (usize, usize, usize, usize) {
    let (mut total, mut emitted, mut dropped, mut skipped) = (0, 0, 0, 0);
    for doc in &corpus.documents {
        for t in &doc.templates {
            total += 1;
            let mut chosen: Vec<Span> = Vec::new();
            for entities in t.roles.values() {
                let mut spans: Vec<Span> = entities
                    .iter()
                    .flat_map(|e| e.mentions.iter().map(|m| (m.start_word, m.end_word)))
                    .collect();
                spans.sort();
                for s in spans {
                    if chosen.len() < n && !chosen.contains(&s) {
                        chosen.push(s);
                    }
                }
            }
            if chosen.len() < n {
                skipped += 1;
            } else if chosen.iter().all(|s| survives(source, &doc.doc_id, s.0)) {
                emitted += 1;
            } else {
                dropped += 1;
            }
        }
    }
    (total, emitted, dropped, skipped)
}

/// Bucket sizes obtained by binning `counts` with right-open cut points.
pub fn bucket_sizes(counts: &[usize], cuts: &[usize]) -> Vec<usize> {
    let mut sizes = vec![0; cuts.len() + 1];
    for &c in counts {
        sizes[cuts.iter().filter(|&&b| c >= b).count()] += 1;
    }
    sizes
}
