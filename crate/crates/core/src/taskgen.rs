//! Probing datasets built from a split corpus and an embedding source.
//!
//! Every builder is a pure function of `(corpus, source, options)`. Token
//! references always point at the first token of a mention; references to
//! words that lost their tokens to truncation are dropped and counted, never
//! padded.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::corpus::{coref_chains, enumerate_role_fillers, Corpus, Document, Split};
use crate::embedstore::{AlignmentMap, EmbedError, EmbeddingSource};

#[derive(Debug, Error)]
pub enum TaskError {
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("document {0:?} has no split assignment")]
    UnassignedDocument(String),
    #[error("document {doc_id:?}: corpus has {corpus_words} words, bundle alignment has {bundle_words}")]
    AlignmentMismatch {
        doc_id: String,
        corpus_words: usize,
        bundle_words: usize,
    },
    #[error("cannot form {k} buckets from {n} counts")]
    InvalidBucketCount { k: usize, n: usize },
    #[error("only {distinct} distinct values for {requested} buckets")]
    DegenerateDistribution { requested: usize, distinct: usize },
    #[error("no document has two or more templates")]
    NoMultiTemplateDocs,
    #[error("{task}: precondition failed: {reason}")]
    Precondition { task: Task, reason: String },
    #[error("unknown task {0:?}")]
    UnknownTask(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("JSON error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T, E = TaskError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Task {
    WordCt,
    SentCt,
    Coref,
    IsArg,
    ArgTyp,
    CoEvnt,
    EvntTyp(usize),
    EvntCt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskFamily {
    Surface,
    Semantic,
    Event,
}

impl TaskFamily {
    pub fn title(self) -> &'static str {
        match self {
            TaskFamily::Surface => "Surface information",
            TaskFamily::Semantic => "Semantic information",
            TaskFamily::Event => "Event understanding",
        }
    }
}

impl Task {
    pub const DEFAULT_SET: [Task; 8] = [
        Task::WordCt,
        Task::SentCt,
        Task::Coref,
        Task::IsArg,
        Task::ArgTyp,
        Task::CoEvnt,
        Task::EvntTyp(2),
        Task::EvntCt,
    ];

    pub fn family(self) -> TaskFamily {
        match self {
            Task::WordCt | Task::SentCt => TaskFamily::Surface,
            Task::Coref | Task::IsArg | Task::ArgTyp => TaskFamily::Semantic,
            Task::CoEvnt | Task::EvntTyp(_) | Task::EvntCt => TaskFamily::Event,
        }
    }

    /// Whether the input is the whole document rather than mention tokens.
    pub fn is_document_level(self) -> bool {
        matches!(self, Task::WordCt | Task::SentCt | Task::EvntCt)
    }

    fn stream_id(self) -> u64 {
        match self {
            Task::WordCt => 0,
            Task::SentCt => 1,
            Task::Coref => 2,
            Task::IsArg => 3,
            Task::ArgTyp => 4,
            Task::CoEvnt => 5,
            Task::EvntCt => 6,
            Task::EvntTyp(n) => 7 + n as u64,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Task::WordCt => f.write_str("WordCt"),
            Task::SentCt => f.write_str("SentCt"),
            Task::Coref => f.write_str("Coref"),
            Task::IsArg => f.write_str("IsArg"),
            Task::ArgTyp => f.write_str("ArgTyp"),
            Task::CoEvnt => f.write_str("CoEvnt"),
            Task::EvntTyp(n) => write!(f, "EvntTyp_{n}"),
            Task::EvntCt => f.write_str("EvntCt"),
        }
    }
}

impl FromStr for Task {
    type Err = TaskError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "WordCt" => Task::WordCt,
            "SentCt" => Task::SentCt,
            "Coref" => Task::Coref,
            "IsArg" => Task::IsArg,
            "ArgTyp" => Task::ArgTyp,
            "CoEvnt" => Task::CoEvnt,
            "EvntCt" => Task::EvntCt,
            "EvntTyp" => Task::EvntTyp(2),
            other => {
                let n = other
                    .strip_prefix("EvntTyp")
                    .map(|rest| rest.trim_start_matches('_'))
                    .and_then(|rest| rest.parse::<usize>().ok())
                    .filter(|&n| n >= 1)
                    .ok_or_else(|| TaskError::UnknownTask(other.to_string()))?;
                Task::EvntTyp(n)
            }
        })
    }
}

impl From<Task> for String {
    fn from(t: Task) -> String {
        t.to_string()
    }
}

impl TryFrom<String> for Task {
    type Error = TaskError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RefKind {
    Token,
    Doc,
}

/// Pointer to an input vector: a first-token row or a whole document.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VectorRef {
    pub doc: String,
    pub kind: RefKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub word: Option<usize>,
}

impl VectorRef {
    pub fn token(doc: &str, word: usize) -> Self {
        VectorRef {
            doc: doc.to_string(),
            kind: RefKind::Token,
            word: Some(word),
        }
    }

    pub fn document(doc: &str) -> Self {
        VectorRef {
            doc: doc.to_string(),
            kind: RefKind::Doc,
            word: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbingExample {
    pub inputs: Vec<VectorRef>,
    pub label: usize,
    #[serde(default)]
    pub meta: BTreeMap<String, Value>,
}

impl ProbingExample {
    pub fn doc_id(&self) -> &str {
        &self.inputs[0].doc
    }

    pub fn word_count(&self) -> Option<usize> {
        self.meta.get("word_count").and_then(Value::as_u64).map(|v| v as usize)
    }
}

/// Right-open count intervals given by their interior cut points.
///
/// `k - 1` boundaries define `k` buckets: `(-inf, b0)`, `[b0, b1)`, …,
/// `[b_last, +inf)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BucketSpec {
    pub boundaries: Vec<usize>,
}

impl BucketSpec {
    pub fn n_buckets(&self) -> usize {
        self.boundaries.len() + 1
    }

    pub fn bucket_of(&self, count: usize) -> usize {
        self.boundaries.partition_point(|&b| b <= count)
    }

    pub fn label(&self, bucket: usize) -> String {
        let k = self.n_buckets();
        if k == 1 {
            return "all".into();
        }
        if bucket == 0 {
            format!("≤{}", self.boundaries[0].saturating_sub(1))
        } else if bucket + 1 == k {
            format!("≥{}", self.boundaries[k - 2])
        } else {
            format!("{}–{}", self.boundaries[bucket - 1], self.boundaries[bucket] - 1)
        }
    }
}

/// Balanced count buckets at empirical quantiles.
///
/// Cuts are only placed between distinct values, so tied counts always
/// share a bucket. Among all such placements the one with the smallest
/// squared deviation from `n / k` per bucket is chosen; ties prefer earlier
/// cuts. On tie-free data this is exactly the quantile split.
pub fn quantile_buckets(counts: &[usize], k: usize) -> Result<BucketSpec> {
    let n = counts.len();
    if k < 2 || n < k {
        return Err(TaskError::InvalidBucketCount { k, n });
    }
    let mut sorted = counts.to_vec();
    sorted.sort_unstable();
    let mut values: Vec<usize> = Vec::new();
    let mut prefix: Vec<usize> = vec![0];
    for (i, &c) in sorted.iter().enumerate() {
        if values.last() != Some(&c) {
            if i > 0 {
                prefix.push(i);
            }
            values.push(c);
        }
    }
    prefix.push(n);
    let m = values.len();
    if m < k {
        return Err(TaskError::DegenerateDistribution {
            requested: k,
            distinct: m,
        });
    }

    // cost of one bucket holding `size` items, scaled by k to stay integral
    let cost = |size: usize| -> u128 {
        let diff = (k * size) as i128 - n as i128;
        (diff * diff) as u128
    };
    // best[j][e]: first j buckets cover distinct values [0, e)
    let mut best = vec![vec![u128::MAX; m + 1]; k + 1];
    let mut back = vec![vec![0usize; m + 1]; k + 1];
    best[0][0] = 0;
    for j in 1..=k {
        // bucket j must leave at least k - j distinct values for the rest
        for e in j..=(m - (k - j)) {
            for s in (j - 1)..e {
                if best[j - 1][s] == u128::MAX {
                    continue;
                }
                let c = best[j - 1][s] + cost(prefix[e] - prefix[s]);
                if c < best[j][e] {
                    best[j][e] = c;
                    back[j][e] = s;
                }
            }
        }
    }
    let mut cuts = Vec::with_capacity(k - 1);
    let mut e = m;
    for j in (2..=k).rev() {
        let s = back[j][e];
        cuts.push(values[s]);
        e = s;
    }
    cuts.reverse();
    Ok(BucketSpec { boundaries: cuts })
}

/// Word-count strata for length-stratified evaluation.
///
/// With bounds `[a, b, c]` the strata are `≤a`, `a+1..=b` and `≥c`; counts
/// strictly between `b` and `c` belong to no stratum.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Strata {
    pub bounds: Vec<usize>,
}

impl Default for Strata {
    fn default() -> Self {
        Strata {
            bounds: vec![209, 420, 431],
        }
    }
}

impl Strata {
    pub fn new(bounds: Vec<usize>) -> Option<Self> {
        (bounds.len() >= 2 && bounds.windows(2).all(|w| w[0] < w[1])).then_some(Strata { bounds })
    }

    pub fn len(&self) -> usize {
        self.bounds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bounds.is_empty()
    }

    pub fn stratum_of(&self, count: usize) -> Option<usize> {
        let m = self.bounds.len();
        if count <= self.bounds[0] {
            return Some(0);
        }
        if count >= self.bounds[m - 1] {
            return Some(m - 1);
        }
        (1..m - 1).find(|&i| count <= self.bounds[i])
    }

    pub fn label(&self, stratum: usize) -> String {
        let m = self.bounds.len();
        if stratum == 0 {
            format!("≤{}", self.bounds[0])
        } else if stratum + 1 == m {
            format!("≥{}", self.bounds[m - 1])
        } else {
            format!("{}–{}", self.bounds[stratum - 1] + 1, self.bounds[stratum])
        }
    }

    pub fn labels(&self) -> Vec<String> {
        (0..self.len()).map(|i| self.label(i)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildOptions {
    pub seed: u64,
    /// Bucket count for WordCt and SentCt.
    pub count_buckets: usize,
    /// Bucket count for EvntCt.
    pub event_count_buckets: usize,
    pub strata: Strata,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions {
            seed: 0,
            count_buckets: 10,
            event_count_buckets: 3,
            strata: Strata::default(),
        }
    }
}

impl BuildOptions {
    pub fn with_seed(seed: u64) -> Self {
        BuildOptions {
            seed,
            ..Self::default()
        }
    }
}

/// Bookkeeping over every candidate a builder considered:
/// `candidates == emitted + dropped + skipped`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Accounting {
    pub candidates: usize,
    pub emitted: usize,
    /// Lost to truncation.
    pub dropped: usize,
    /// Removed by down-sampling or unmet per-example preconditions.
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbingDataset {
    pub task: Task,
    pub n_classes: usize,
    pub class_names: Vec<String>,
    pub splits: BTreeMap<Split, Vec<ProbingExample>>,
    pub bucket_spec: Option<BucketSpec>,
    pub seed: u64,
    pub accounting: Accounting,
    pub warnings: Vec<String>,
}

impl ProbingDataset {
    fn empty(task: Task, seed: u64) -> Self {
        ProbingDataset {
            task,
            n_classes: 0,
            class_names: Vec::new(),
            splits: Split::ALL.iter().map(|&s| (s, Vec::new())).collect(),
            bucket_spec: None,
            seed,
            accounting: Accounting::default(),
            warnings: Vec::new(),
        }
    }

    pub fn split(&self, split: Split) -> &[ProbingExample] {
        self.splits.get(&split).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn dropped_count(&self) -> usize {
        self.accounting.dropped
    }

    pub fn skipped_count(&self) -> usize {
        self.accounting.skipped
    }

    pub fn len(&self) -> usize {
        self.splits.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn class_counts(&self, split: Split) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for ex in self.split(split) {
            counts[ex.label] += 1;
        }
        counts
    }

    fn push(&mut self, split: Split, example: ProbingExample) {
        self.splits.entry(split).or_default().push(example);
        self.accounting.emitted += 1;
    }
}

fn split_rng(seed: u64, task: Task, split: Split) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(task.stream_id() * 3 + split as u64);
    rng
}

/// Seeded choice of `amount` items, returned in their original order.
fn sample_in_order<T: Clone>(items: &[T], amount: usize, rng: &mut ChaCha8Rng) -> Vec<T> {
    if amount >= items.len() {
        return items.to_vec();
    }
    let mut picked = index::sample(rng, items.len(), amount).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| items[i].clone()).collect()
}

struct DocContext<'a> {
    doc: &'a Document,
    split: Split,
    alignment: AlignmentMap,
}

impl DocContext<'_> {
    fn first_token(&self, word: usize) -> Result<Option<usize>> {
        Ok(self.alignment.first_token(word)?)
    }

    fn base_meta(&self) -> BTreeMap<String, Value> {
        let mut meta = BTreeMap::new();
        meta.insert("word_count".into(), Value::from(self.doc.word_count()));
        meta
    }
}

fn doc_contexts<'a>(corpus: &'a Corpus, source: &dyn EmbeddingSource) -> Result<Vec<DocContext<'a>>> {
    corpus
        .documents
        .iter()
        .map(|doc| {
            let split = corpus
                .split_of(&doc.doc_id)
                .ok_or_else(|| TaskError::UnassignedDocument(doc.doc_id.clone()))?;
            let alignment = source.alignment(&doc.doc_id)?;
            if alignment.n_words() != doc.word_count() {
                return Err(TaskError::AlignmentMismatch {
                    doc_id: doc.doc_id.clone(),
                    corpus_words: doc.word_count(),
                    bundle_words: alignment.n_words(),
                });
            }
            Ok(DocContext { doc, split, alignment })
        })
        .collect()
}

/// Builds the dataset for any task.
pub fn build_task(task: Task, corpus: &Corpus, source: &dyn EmbeddingSource, opts: &BuildOptions) -> Result<ProbingDataset> {
    match task {
        Task::WordCt => build_wordct(corpus, source, opts),
        Task::SentCt => build_sentct(corpus, source, opts),
        Task::Coref => build_coref(corpus, source, opts),
        Task::IsArg => build_isarg(corpus, source, opts),
        Task::ArgTyp => build_argtyp(corpus, source, opts),
        Task::CoEvnt => build_coevnt(corpus, source, opts),
        Task::EvntTyp(n) => build_evnttyp(corpus, source, n, opts),
        Task::EvntCt => build_evntct(corpus, source, opts),
    }
}

/// Quantile buckets that degrade to fewer buckets when the training counts
/// cannot support `k`; every fallback is recorded in `warnings`.
fn buckets_with_fallback(counts: &[usize], k: usize, warnings: &mut Vec<String>) -> Result<BucketSpec> {
    let mut k_eff = k.min(counts.len());
    if k_eff < k {
        warnings.push(format!("only {} training documents; using {k_eff} buckets instead of {k}", counts.len()));
    }
    if k_eff < 2 {
        return Err(TaskError::InvalidBucketCount { k, n: counts.len() });
    }
    loop {
        match quantile_buckets(counts, k_eff) {
            Err(TaskError::DegenerateDistribution { requested, distinct }) if distinct >= 2 => {
                warnings.push(format!(
                    "degenerate distribution: {distinct} distinct values for {requested} buckets; using {distinct}"
                ));
                k_eff = distinct;
            }
            other => return other,
        }
    }
}

fn build_document_count_task(
    task: Task,
    corpus: &Corpus,
    source: &dyn EmbeddingSource,
    opts: &BuildOptions,
    k: usize,
    count_of: impl Fn(&Document) -> usize,
) -> Result<ProbingDataset> {
    let contexts = doc_contexts(corpus, source)?;
    let mut ds = ProbingDataset::empty(task, opts.seed);
    let mut kept = Vec::new();
    for ctx in &contexts {
        ds.accounting.candidates += 1;
        if ctx.alignment.n_tokens() == 0 {
            ds.accounting.dropped += 1;
            continue;
        }
        kept.push(ctx);
    }
    let train_counts: Vec<usize> = kept
        .iter()
        .filter(|c| c.split == Split::Train)
        .map(|c| count_of(c.doc))
        .collect();
    let spec = buckets_with_fallback(&train_counts, k, &mut ds.warnings)?;
    ds.n_classes = spec.n_buckets();
    ds.class_names = (0..spec.n_buckets()).map(|b| spec.label(b)).collect();

    for ctx in kept {
        let count = count_of(ctx.doc);
        let label = spec.bucket_of(count);
        let mut meta = ctx.base_meta();
        meta.insert("count".into(), Value::from(count));
        meta.insert("bucket".into(), Value::from(spec.label(label)));
        if let Some(s) = opts.strata.stratum_of(ctx.doc.word_count()) {
            meta.insert("stratum".into(), Value::from(opts.strata.label(s)));
        }
        ds.push(
            ctx.split,
            ProbingExample {
                inputs: vec![VectorRef::document(&ctx.doc.doc_id)],
                label,
                meta,
            },
        );
    }
    ds.bucket_spec = Some(spec);
    Ok(ds)
}

/// Whitespace word count, bucketed into balanced quantile buckets.
pub fn build_wordct(corpus: &Corpus, source: &dyn EmbeddingSource, opts: &BuildOptions) -> Result<ProbingDataset> {
    build_document_count_task(Task::WordCt, corpus, source, opts, opts.count_buckets, Document::word_count)
}

pub fn build_sentct(corpus: &Corpus, source: &dyn EmbeddingSource, opts: &BuildOptions) -> Result<ProbingDataset> {
    build_document_count_task(Task::SentCt, corpus, source, opts, opts.count_buckets, Document::sentence_count)
}

/// Number of templates (events) per document, in `event_count_buckets`
/// buckets.
pub fn build_evntct(corpus: &Corpus, source: &dyn EmbeddingSource, opts: &BuildOptions) -> Result<ProbingDataset> {
    build_document_count_task(Task::EvntCt, corpus, source, opts, opts.event_count_buckets, |d| d.templates.len())
}

type Span = (usize, usize);

fn filler_spans(doc: &Document) -> BTreeSet<Span> {
    enumerate_role_fillers(doc).iter().map(|f| f.span.bounds()).collect()
}

fn pair_example(ctx: &DocContext<'_>, a: Span, b: Span, label: usize) -> ProbingExample {
    let mut meta = ctx.base_meta();
    meta.insert("spans".into(), serde_json::json!([[a.0, a.1], [b.0, b.1]]));
    ProbingExample {
        inputs: vec![VectorRef::token(&ctx.doc.doc_id, a.0), VectorRef::token(&ctx.doc.doc_id, b.0)],
        label,
        meta,
    }
}

/// Binary task with count-matched classes per split.
fn balanced_binary(
    ds: &mut ProbingDataset,
    split: Split,
    positives: Vec<ProbingExample>,
    negatives: Vec<ProbingExample>,
    rng: &mut ChaCha8Rng,
) {
    let n = positives.len().min(negatives.len());
    if negatives.len() < positives.len() {
        ds.warnings.push(format!(
            "insufficient negatives in {split}: {} negatives for {} positives; positives under-sampled",
            negatives.len(),
            positives.len()
        ));
    }
    ds.accounting.skipped += positives.len() - n + negatives.len() - n;
    let pos = sample_in_order(&positives, n, rng);
    let neg = sample_in_order(&negatives, n, rng);
    for ex in pos.into_iter().chain(neg) {
        ds.push(split, ex);
    }
}

fn binary_classes(ds: &mut ProbingDataset, negative: &str, positive: &str) {
    ds.n_classes = 2;
    ds.class_names = vec![negative.to_string(), positive.to_string()];
}

/// Role-filler detection: first tokens of filler mentions against randomly
/// drawn words outside every filler span of the same documents.
pub fn build_isarg(corpus: &Corpus, source: &dyn EmbeddingSource, opts: &BuildOptions) -> Result<ProbingDataset> {
    let task = Task::IsArg;
    let contexts = doc_contexts(corpus, source)?;
    let mut ds = ProbingDataset::empty(task, opts.seed);
    binary_classes(&mut ds, "other", "argument");

    for split in Split::ALL {
        let mut positives = Vec::new();
        let mut negatives = Vec::new();
        let mut split_candidates = 0;
        for ctx in contexts.iter().filter(|c| c.split == split) {
            let spans = filler_spans(ctx.doc);
            split_candidates += spans.len();
            let mut doc_positives = Vec::new();
            for &(start, end) in &spans {
                ds.accounting.candidates += 1;
                if ctx.first_token(start)?.is_none() {
                    ds.accounting.dropped += 1;
                    continue;
                }
                let mut meta = ctx.base_meta();
                meta.insert("span".into(), serde_json::json!([start, end]));
                doc_positives.push(ProbingExample {
                    inputs: vec![VectorRef::token(&ctx.doc.doc_id, start)],
                    label: 1,
                    meta,
                });
            }
            if doc_positives.is_empty() {
                continue;
            }
            positives.extend(doc_positives);
            for word in 0..ctx.doc.word_count() {
                if spans.iter().any(|&(s, e)| s <= word && word < e) {
                    continue;
                }
                ds.accounting.candidates += 1;
                if ctx.first_token(word)?.is_none() {
                    ds.accounting.dropped += 1;
                    continue;
                }
                let mut meta = ctx.base_meta();
                meta.insert("span".into(), serde_json::json!([word, word + 1]));
                negatives.push(ProbingExample {
                    inputs: vec![VectorRef::token(&ctx.doc.doc_id, word)],
                    label: 0,
                    meta,
                });
            }
        }
        if split_candidates == 0 {
            return Err(TaskError::Precondition {
                task,
                reason: format!("no role fillers in the {split} split"),
            });
        }
        let mut rng = split_rng(opts.seed, task, split);
        balanced_binary(&mut ds, split, positives, negatives, &mut rng);
    }
    Ok(ds)
}

/// Role typing: one example per distinct (mention span, role) pair.
pub fn build_argtyp(corpus: &Corpus, source: &dyn EmbeddingSource, opts: &BuildOptions) -> Result<ProbingDataset> {
    let task = Task::ArgTyp;
    let contexts = doc_contexts(corpus, source)?;
    let mut ds = ProbingDataset::empty(task, opts.seed);
    ds.n_classes = corpus.schema.roles.len();
    ds.class_names = corpus.schema.roles.clone();

    for ctx in &contexts {
        let mut seen: BTreeSet<(Span, &str)> = BTreeSet::new();
        for filler in enumerate_role_fillers(ctx.doc) {
            if !seen.insert((filler.span.bounds(), filler.role)) {
                continue;
            }
            ds.accounting.candidates += 1;
            let label = corpus.schema.role_index(filler.role).ok_or_else(|| TaskError::Precondition {
                task,
                reason: format!("role {:?} is not in the corpus schema", filler.role),
            })?;
            if ctx.first_token(filler.span.start_word)?.is_none() {
                ds.accounting.dropped += 1;
                continue;
            }
            let mut meta = ctx.base_meta();
            meta.insert("span".into(), serde_json::json!([filler.span.start_word, filler.span.end_word]));
            meta.insert("role".into(), Value::from(filler.role));
            ds.push(
                ctx.split,
                ProbingExample {
                    inputs: vec![VectorRef::token(&ctx.doc.doc_id, filler.span.start_word)],
                    label,
                    meta,
                },
            );
        }
    }
    let train_classes = ds.class_counts(Split::Train).iter().filter(|&&c| c > 0).count();
    if train_classes < 2 {
        return Err(TaskError::Precondition {
            task,
            reason: format!("{train_classes} role classes present in train, need at least 2"),
        });
    }
    Ok(ds)
}

fn unordered(a: Span, b: Span) -> (Span, Span) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Coreference: unordered pairs of distinct filler mentions of one
/// document, positive when some coreference chain holds both.
pub fn build_coref(corpus: &Corpus, source: &dyn EmbeddingSource, opts: &BuildOptions) -> Result<ProbingDataset> {
    let task = Task::Coref;
    let contexts = doc_contexts(corpus, source)?;
    let mut ds = ProbingDataset::empty(task, opts.seed);
    binary_classes(&mut ds, "different entity", "same entity");
    let mut any_positive = false;

    for split in Split::ALL {
        let mut positives = Vec::new();
        let mut negatives = Vec::new();
        for ctx in contexts.iter().filter(|c| c.split == split) {
            let chains: Vec<BTreeSet<Span>> = coref_chains(ctx.doc)
                .iter()
                .map(|c| c.iter().map(|m| m.bounds()).collect())
                .collect();
            let spans: Vec<Span> = chains.iter().flatten().copied().collect::<BTreeSet<_>>().into_iter().collect();
            for (i, &a) in spans.iter().enumerate() {
                for &b in &spans[i + 1..] {
                    ds.accounting.candidates += 1;
                    let same = chains.iter().any(|c| c.contains(&a) && c.contains(&b));
                    any_positive |= same;
                    if ctx.first_token(a.0)?.is_none() || ctx.first_token(b.0)?.is_none() {
                        ds.accounting.dropped += 1;
                        continue;
                    }
                    let (a, b) = unordered(a, b);
                    let ex = pair_example(ctx, a, b, same as usize);
                    if same {
                        positives.push(ex);
                    } else {
                        negatives.push(ex);
                    }
                }
            }
        }
        let mut rng = split_rng(opts.seed, task, split);
        balanced_binary(&mut ds, split, positives, negatives, &mut rng);
    }
    if !any_positive {
        return Err(TaskError::Precondition {
            task,
            reason: "no entity has two or more mentions".into(),
        });
    }
    Ok(ds)
}

/// Co-event: pairs of filler mentions from one template (positive) or from
/// different templates of the same document (negative). Pairs that are both
/// mentions of an entity filling slots in several templates are excluded.
pub fn build_coevnt(corpus: &Corpus, source: &dyn EmbeddingSource, opts: &BuildOptions) -> Result<ProbingDataset> {
    let task = Task::CoEvnt;
    if !corpus.documents.iter().any(|d| d.templates.len() >= 2) {
        return Err(TaskError::NoMultiTemplateDocs);
    }
    let contexts = doc_contexts(corpus, source)?;
    let mut ds = ProbingDataset::empty(task, opts.seed);
    binary_classes(&mut ds, "different event", "same event");

    for split in Split::ALL {
        let mut positives = Vec::new();
        let mut negatives = Vec::new();
        for ctx in contexts.iter().filter(|c| c.split == split) {
            let per_template: Vec<BTreeSet<Span>> = ctx
                .doc
                .templates
                .iter()
                .map(|t| {
                    t.roles
                        .values()
                        .flatten()
                        .flat_map(|e| e.mentions.iter().map(|m| m.bounds()))
                        .collect()
                })
                .collect();
            // entities whose mention set fills slots in two or more templates
            let mut entity_templates: BTreeMap<BTreeSet<Span>, BTreeSet<usize>> = BTreeMap::new();
            for (ti, t) in ctx.doc.templates.iter().enumerate() {
                for e in t.roles.values().flatten() {
                    entity_templates.entry(e.span_set()).or_default().insert(ti);
                }
            }
            let shared: Vec<&BTreeSet<Span>> = entity_templates
                .iter()
                .filter(|(_, ts)| ts.len() >= 2)
                .map(|(spans, _)| spans)
                .collect();

            let spans: Vec<Span> = per_template.iter().flatten().copied().collect::<BTreeSet<_>>().into_iter().collect();
            for (i, &a) in spans.iter().enumerate() {
                for &b in &spans[i + 1..] {
                    ds.accounting.candidates += 1;
                    if shared.iter().any(|s| s.contains(&a) && s.contains(&b)) {
                        ds.accounting.skipped += 1;
                        continue;
                    }
                    if ctx.first_token(a.0)?.is_none() || ctx.first_token(b.0)?.is_none() {
                        ds.accounting.dropped += 1;
                        continue;
                    }
                    let same = per_template.iter().any(|t| t.contains(&a) && t.contains(&b));
                    let ex = pair_example(ctx, a, b, same as usize);
                    if same {
                        positives.push(ex);
                    } else {
                        negatives.push(ex);
                    }
                }
            }
        }
        let mut rng = split_rng(opts.seed, task, split);
        balanced_binary(&mut ds, split, positives, negatives, &mut rng);
    }
    Ok(ds)
}

/// Event typing from the first `n` distinct filler mentions of a template.
pub fn build_evnttyp(corpus: &Corpus, source: &dyn EmbeddingSource, n: usize, opts: &BuildOptions) -> Result<ProbingDataset> {
    let task = Task::EvntTyp(n);
    if n == 0 {
        return Err(TaskError::Precondition {
            task,
            reason: "n must be at least 1".into(),
        });
    }
    let contexts = doc_contexts(corpus, source)?;
    let mut ds = ProbingDataset::empty(task, opts.seed);
    ds.n_classes = corpus.schema.incident_types.len();
    ds.class_names = corpus.schema.incident_types.clone();
    let mut too_few = 0;

    for ctx in &contexts {
        let fillers = enumerate_role_fillers(ctx.doc);
        for (ti, template) in ctx.doc.templates.iter().enumerate() {
            ds.accounting.candidates += 1;
            let mut chosen: Vec<Span> = Vec::with_capacity(n);
            for f in fillers.iter().filter(|f| f.template_index == ti) {
                if chosen.len() == n {
                    break;
                }
                if !chosen.contains(&f.span.bounds()) {
                    chosen.push(f.span.bounds());
                }
            }
            if chosen.len() < n {
                ds.accounting.skipped += 1;
                too_few += 1;
                continue;
            }
            let mut truncated = false;
            for &(start, _) in &chosen {
                truncated |= ctx.first_token(start)?.is_none();
            }
            if truncated {
                ds.accounting.dropped += 1;
                continue;
            }
            let label = corpus
                .schema
                .incident_index(&template.incident_type)
                .ok_or_else(|| TaskError::Precondition {
                    task,
                    reason: format!("incident type {:?} is not in the corpus schema", template.incident_type),
                })?;
            let mut meta = ctx.base_meta();
            meta.insert("template".into(), Value::from(ti));
            meta.insert(
                "spans".into(),
                Value::Array(chosen.iter().map(|&(s, e)| serde_json::json!([s, e])).collect()),
            );
            ds.push(
                ctx.split,
                ProbingExample {
                    inputs: chosen.iter().map(|&(s, _)| VectorRef::token(&ctx.doc.doc_id, s)).collect(),
                    label,
                    meta,
                },
            );
        }
    }
    if too_few > 0 {
        ds.warnings.push(format!("{too_few} templates with fewer than {n} fillers skipped"));
    }
    Ok(ds)
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetManifest {
    task: Task,
    n_classes: usize,
    class_names: Vec<String>,
    bucket_boundaries: Option<Vec<usize>>,
    seed: u64,
    dropped_count: usize,
    skipped_count: usize,
    accounting: Accounting,
    class_counts: BTreeMap<Split, Vec<usize>>,
    warnings: Vec<String>,
    files: BTreeMap<Split, String>,
}

pub fn manifest_path(dir: &Path, task: Task) -> PathBuf {
    dir.join(format!("{task}.manifest.json"))
}

/// Writes one JSON-lines file per split plus a sidecar manifest; returns the
/// manifest path.
pub fn write_dataset(ds: &ProbingDataset, dir: &Path) -> Result<PathBuf> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| TaskError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let mut files = BTreeMap::new();
    for split in Split::ALL {
        let name = format!("{}.{split}.jsonl", ds.task);
        let path = dir.join(&name);
        let mut out = Vec::new();
        for ex in ds.split(split) {
            serde_json::to_writer(&mut out, ex).expect("example serializes");
            out.push(b'\n');
        }
        fs::File::create(&path)
            .and_then(|mut f| f.write_all(&out))
            .map_err(io(&path))?;
        files.insert(split, name);
    }
    let manifest = DatasetManifest {
        task: ds.task,
        n_classes: ds.n_classes,
        class_names: ds.class_names.clone(),
        bucket_boundaries: ds.bucket_spec.as_ref().map(|b| b.boundaries.clone()),
        seed: ds.seed,
        dropped_count: ds.dropped_count(),
        skipped_count: ds.skipped_count(),
        accounting: ds.accounting,
        class_counts: Split::ALL.iter().map(|&s| (s, ds.class_counts(s))).collect(),
        warnings: ds.warnings.clone(),
        files,
    };
    let path = manifest_path(dir, ds.task);
    fs::write(&path, serde_json::to_string_pretty(&manifest).expect("manifest serializes")).map_err(io(&path))?;
    Ok(path)
}

/// Reads a dataset given its manifest file, or a directory holding exactly
/// one dataset manifest.
pub fn read_dataset(path: &Path) -> Result<ProbingDataset> {
    let manifest_file = if path.is_dir() {
        let entries = fs::read_dir(path).map_err(|source| TaskError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut found: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.to_string_lossy().ends_with(".manifest.json"))
            .collect();
        found.sort();
        if found.len() != 1 {
            return Err(TaskError::Io {
                path: path.to_path_buf(),
                source: std::io::Error::new(
                    std::io::ErrorKind::InvalidInput,
                    format!("expected one dataset manifest, found {}", found.len()),
                ),
            });
        }
        found.pop().unwrap()
    } else {
        path.to_path_buf()
    };
    let dir = manifest_file.parent().unwrap_or(Path::new("."));
    let read = |p: &Path| {
        fs::read_to_string(p).map_err(|source| TaskError::Io {
            path: p.to_path_buf(),
            source,
        })
    };
    let manifest: DatasetManifest = serde_json::from_str(&read(&manifest_file)?).map_err(|source| TaskError::Json {
        path: manifest_file.clone(),
        source,
    })?;
    let mut splits = BTreeMap::new();
    for (split, name) in &manifest.files {
        let path = dir.join(name);
        let text = read(&path)?;
        let examples = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l))
            .collect::<std::result::Result<Vec<ProbingExample>, _>>()
            .map_err(|source| TaskError::Json { path: path.clone(), source })?;
        splits.insert(*split, examples);
    }
    Ok(ProbingDataset {
        task: manifest.task,
        n_classes: manifest.n_classes,
        class_names: manifest.class_names,
        splits,
        bucket_spec: manifest.bucket_boundaries.map(|boundaries| BucketSpec { boundaries }),
        seed: manifest.seed,
        accounting: manifest.accounting,
        warnings: manifest.warnings,
    })
}
