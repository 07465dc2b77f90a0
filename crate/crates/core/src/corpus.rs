//! Template-filling corpora: documents, event templates, role fillers and
//! their coreferent mentions.
//!
//! Two on-disk formats are understood:
//!
//! * `muc-json`: a JSON array of `{"docid", "doctext", "sentences"?,
//!   "templates", "split"?}` objects. Each template carries an
//!   `"incident_type"` and one key per role whose value is a list of
//!   entities, each entity being a list of coreferent mention strings.
//! * `wikievents-json`: JSON lines in the WikiEvents layout (`tokens`,
//!   `sentences`, `entity_mentions`, `event_mentions`).
//!
//! A path may name a single file or a directory holding `train`, `dev` and
//! `test` files, in which case the split is taken from the file names.
//!
//! Mention strings are resolved to half-open word intervals once, at parse
//! time. Everything downstream works on word indices.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("malformed input in document {doc_id:?} at {field}: {reason}")]
    MalformedInput {
        doc_id: String,
        field: String,
        reason: String,
    },
    #[error("document {doc_id:?}: mention {mention:?} not found in document text")]
    OffsetResolution { doc_id: String, mention: String },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("{0} documents cannot fill three non-empty splits")]
    TooFewDocuments(usize),
    #[error("split ratios must be positive and sum to 1, got {0:?}")]
    InvalidRatios((f64, f64, f64)),
    #[error("duplicate document id {0:?}")]
    DuplicateDocId(String),
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

pub type Result<T, E = CorpusError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "train" | "training" => Ok(Split::Train),
            "dev" | "valid" | "validation" => Ok(Split::Dev),
            "test" | "testing" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    MucJson,
    WikiEventsJson,
}

impl FromStr for CorpusFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "muc-json" | "muc" => Ok(CorpusFormat::MucJson),
            "wikievents-json" | "wikievents" => Ok(CorpusFormat::WikiEventsJson),
            other => Err(format!("unknown corpus format {other:?}")),
        }
    }
}

/// Label inventory of a corpus: event (incident) types and role names.
///
/// Roles are kept in lexicographic order; their position is the class index
/// used by role-typing probes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub incident_types: Vec<String>,
    pub roles: Vec<String>,
}

impl Schema {
    pub fn muc() -> Self {
        Schema {
            incident_types: [
                "kidnapping",
                "attack",
                "bombing",
                "robbery",
                "forced work stoppage",
                "arson",
            ]
            .map(String::from)
            .to_vec(),
            roles: ["PerpInd", "PerpOrg", "Target", "Victim", "Weapon"]
                .map(String::from)
                .to_vec(),
        }
    }

    pub fn role_index(&self, role: &str) -> Option<usize> {
        self.roles.iter().position(|r| r == role)
    }

    pub fn incident_index(&self, incident: &str) -> Option<usize> {
        self.incident_types.iter().position(|t| t == incident)
    }
}

/// A mention as a half-open word interval `[start_word, end_word)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MentionSpan {
    pub start_word: usize,
    pub end_word: usize,
    pub surface: String,
}

impl MentionSpan {
    pub fn bounds(&self) -> (usize, usize) {
        (self.start_word, self.end_word)
    }

    pub fn contains_word(&self, word: usize) -> bool {
        self.start_word <= word && word < self.end_word
    }
}

/// One role filler: the coreferent mentions of a single entity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub mentions: Vec<MentionSpan>,
}

impl Entity {
    pub fn span_set(&self) -> BTreeSet<(usize, usize)> {
        self.mentions.iter().map(MentionSpan::bounds).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Template {
    pub incident_type: String,
    /// Role name to fillers; iteration is in lexicographic role order.
    pub roles: BTreeMap<String, Vec<Entity>>,
}

impl Template {
    pub fn filler_count(&self) -> usize {
        self.roles.values().map(Vec::len).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub words: Vec<String>,
    /// Half-open word intervals partitioning `[0, words.len())`.
    pub sentence_bounds: Vec<(usize, usize)>,
    pub templates: Vec<Template>,
}

impl Document {
    pub fn word_count(&self) -> usize {
        self.words.len()
    }

    pub fn sentence_count(&self) -> usize {
        self.sentence_bounds.len()
    }

    pub fn span_text(&self, start: usize, end: usize) -> String {
        self.words[start..end].join(" ")
    }

    /// Checks the structural invariants of a document.
    pub fn validate(&self) -> Result<()> {
        let malformed = |field: String, reason: String| CorpusError::MalformedInput {
            doc_id: self.doc_id.clone(),
            field,
            reason,
        };
        let mut cursor = 0;
        for (i, &(start, end)) in self.sentence_bounds.iter().enumerate() {
            if start != cursor || end <= start {
                return Err(malformed(
                    format!("sentences[{i}]"),
                    format!("[{start}, {end}) does not continue the partition at {cursor}"),
                ));
            }
            cursor = end;
        }
        if cursor != self.words.len() {
            return Err(malformed(
                "sentences".into(),
                format!("partition ends at {cursor}, document has {} words", self.words.len()),
            ));
        }
        for (t, template) in self.templates.iter().enumerate() {
            for (role, entities) in &template.roles {
                for (e, entity) in entities.iter().enumerate() {
                    if entity.mentions.is_empty() {
                        return Err(malformed(
                            format!("templates[{t}].{role}[{e}]"),
                            "entity without mentions".into(),
                        ));
                    }
                    for m in &entity.mentions {
                        if m.start_word >= m.end_word || m.end_word > self.words.len() {
                            return Err(malformed(
                                format!("templates[{t}].{role}[{e}]"),
                                format!("span [{}, {}) out of range", m.start_word, m.end_word),
                            ));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Warnings accumulated while parsing.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseStats {
    pub duplicate_templates: usize,
    pub empty_templates: usize,
    pub surface_mismatches: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub schema: Schema,
    pub documents: Vec<Document>,
    pub split_assignment: BTreeMap<String, Split>,
    #[serde(default)]
    pub stats: ParseStats,
}

impl Corpus {
    pub fn new(schema: Schema, documents: Vec<Document>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for doc in &documents {
            if !seen.insert(doc.doc_id.as_str()) {
                return Err(CorpusError::DuplicateDocId(doc.doc_id.clone()));
            }
            doc.validate()?;
        }
        Ok(Corpus {
            schema,
            documents,
            split_assignment: BTreeMap::new(),
            stats: ParseStats::default(),
        })
    }

    pub fn split_of(&self, doc_id: &str) -> Option<Split> {
        self.split_assignment.get(doc_id).copied()
    }

    pub fn is_split(&self) -> bool {
        !self.documents.is_empty() && self.documents.iter().all(|d| self.split_assignment.contains_key(&d.doc_id))
    }

    pub fn documents_in(&self, split: Split) -> impl Iterator<Item = &Document> {
        self.documents
            .iter()
            .filter(move |d| self.split_of(&d.doc_id) == Some(split))
    }

    pub fn split_sizes(&self) -> [usize; 3] {
        let mut sizes = [0; 3];
        for split in self.split_assignment.values() {
            sizes[*split as usize] += 1;
        }
        sizes
    }

    pub fn document(&self, doc_id: &str) -> Option<&Document> {
        self.documents.iter().find(|d| d.doc_id == doc_id)
    }
}

/// Role-filler mention occurrence produced by [`enumerate_role_fillers`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoleFiller<'a> {
    pub span: &'a MentionSpan,
    pub role: &'a str,
    pub template_index: usize,
    pub entity_index: usize,
}

/// Every (mention, role, template) occurrence of a document, ordered by
/// template index, role name and start word.
pub fn enumerate_role_fillers(doc: &Document) -> Vec<RoleFiller<'_>> {
    let mut out = Vec::new();
    for (template_index, template) in doc.templates.iter().enumerate() {
        for (role, entities) in &template.roles {
            let mut fillers: Vec<RoleFiller<'_>> = entities
                .iter()
                .enumerate()
                .flat_map(|(entity_index, entity)| {
                    entity.mentions.iter().map(move |span| RoleFiller {
                        span,
                        role: role.as_str(),
                        template_index,
                        entity_index,
                    })
                })
                .collect();
            fillers.sort_by_key(|f| (f.span.start_word, f.span.end_word, f.entity_index));
            out.extend(fillers);
        }
    }
    out
}

/// Coreference chains of the role fillers: one chain per entity, with
/// entities that recur (same mention set) across templates merged.
pub fn coref_chains(doc: &Document) -> Vec<BTreeSet<MentionSpan>> {
    let mut chains: Vec<BTreeSet<MentionSpan>> = Vec::new();
    for template in &doc.templates {
        for entities in template.roles.values() {
            for entity in entities {
                let chain: BTreeSet<MentionSpan> = entity.mentions.iter().cloned().collect();
                if !chains.contains(&chain) {
                    chains.push(chain);
                }
            }
        }
    }
    chains
}

/// Assigns every document to train/dev/test by a seeded shuffle.
///
/// Split sizes are `round(n * ratio)` for train and dev with the remainder
/// going to test, then nudged so that no split is empty.
pub fn split_documents(mut corpus: Corpus, ratios: (f64, f64, f64), seed: u64) -> Result<Corpus> {
    let (r_train, r_dev, r_test) = ratios;
    if !(r_train > 0.0 && r_dev > 0.0 && r_test > 0.0) || (r_train + r_dev + r_test - 1.0).abs() > 1e-6 {
        return Err(CorpusError::InvalidRatios(ratios));
    }
    let n = corpus.documents.len();
    if n == 0 {
        return Err(CorpusError::EmptyCorpus);
    }
    if n < 3 {
        return Err(CorpusError::TooFewDocuments(n));
    }
    let mut sizes = [
        (n as f64 * r_train).round() as usize,
        (n as f64 * r_dev).round() as usize,
        0,
    ];
    sizes[0] = sizes[0].min(n);
    sizes[1] = sizes[1].min(n - sizes[0]);
    sizes[2] = n - sizes[0] - sizes[1];
    for i in 0..3 {
        if sizes[i] == 0 {
            let largest = (0..3).max_by_key(|&j| (sizes[j], j)).unwrap();
            sizes[largest] -= 1;
            sizes[i] += 1;
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    corpus.split_assignment.clear();
    for (rank, &doc_idx) in order.iter().enumerate() {
        let split = if rank < sizes[0] {
            Split::Train
        } else if rank < sizes[0] + sizes[1] {
            Split::Dev
        } else {
            Split::Test
        };
        corpus
            .split_assignment
            .insert(corpus.documents[doc_idx].doc_id.clone(), split);
    }
    Ok(corpus)
}

/// Parses a corpus file or split directory.
pub fn parse_corpus(path: &Path, format: CorpusFormat) -> Result<Corpus> {
    let mut stats = ParseStats::default();
    let mut parts: Vec<(Option<Split>, Vec<Document>, Vec<Option<Split>>)> = Vec::new();
    let mut wiki_labels = (BTreeSet::new(), BTreeSet::new());

    if path.is_dir() {
        for split in Split::ALL {
            let file = split_file(path, split, format)?;
            let (docs, splits) = parse_file(&file, format, &mut stats, &mut wiki_labels)?;
            parts.push((Some(split), docs, splits));
        }
    } else {
        let (docs, splits) = parse_file(path, format, &mut stats, &mut wiki_labels)?;
        parts.push((None, docs, splits));
    }

    let schema = match format {
        CorpusFormat::MucJson => Schema::muc(),
        CorpusFormat::WikiEventsJson => Schema {
            incident_types: wiki_labels.0.into_iter().collect(),
            roles: wiki_labels.1.into_iter().collect(),
        },
    };

    let mut documents = Vec::new();
    let mut split_assignment = BTreeMap::new();
    for (file_split, docs, doc_splits) in parts {
        for (doc, doc_split) in docs.into_iter().zip(doc_splits) {
            if let Some(split) = file_split.or(doc_split) {
                split_assignment.insert(doc.doc_id.clone(), split);
            }
            documents.push(doc);
        }
    }

    let mut corpus = Corpus::new(schema, documents)?;
    corpus.split_assignment = split_assignment;
    if stats.duplicate_templates + stats.empty_templates + stats.surface_mismatches > 0 {
        warn!(
            "{}: {} duplicate templates collapsed, {} empty templates dropped, {} surface mismatches",
            path.display(),
            stats.duplicate_templates,
            stats.empty_templates,
            stats.surface_mismatches
        );
    }
    corpus.stats = stats;
    Ok(corpus)
}

fn split_file(dir: &Path, split: Split, format: CorpusFormat) -> Result<PathBuf> {
    let ext = match format {
        CorpusFormat::MucJson => "json",
        CorpusFormat::WikiEventsJson => "jsonl",
    };
    let names: &[&str] = match split {
        Split::Train => &["train"],
        Split::Dev => &["dev", "valid", "validation"],
        Split::Test => &["test"],
    };
    for name in names {
        let candidate = dir.join(format!("{name}.{ext}"));
        if candidate.is_file() {
            return Ok(candidate);
        }
    }
    Err(CorpusError::Io {
        path: dir.join(format!("{}.{ext}", names[0])),
        source: std::io::Error::new(std::io::ErrorKind::NotFound, "split file missing"),
    })
}

type LabelSets = (BTreeSet<String>, BTreeSet<String>);

fn parse_file(
    path: &Path,
    format: CorpusFormat,
    stats: &mut ParseStats,
    labels: &mut LabelSets,
) -> Result<(Vec<Document>, Vec<Option<Split>>)> {
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    match format {
        CorpusFormat::MucJson => {
            let raw: Vec<RawMucDoc> = serde_json::from_str(&text).map_err(|source| CorpusError::Json {
                path: path.to_path_buf(),
                source,
            })?;
            let schema = Schema::muc();
            let mut docs = Vec::with_capacity(raw.len());
            let mut splits = Vec::with_capacity(raw.len());
            for doc in raw {
                let split = match &doc.split {
                    Some(s) => Some(s.parse::<Split>().map_err(|reason| CorpusError::MalformedInput {
                        doc_id: doc.docid.clone(),
                        field: "split".into(),
                        reason,
                    })?),
                    None => None,
                };
                docs.push(parse_muc_doc(doc, &schema, stats)?);
                splits.push(split);
            }
            Ok((docs, splits))
        }
        CorpusFormat::WikiEventsJson => {
            let mut docs = Vec::new();
            for (lineno, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let raw: RawWikiDoc = serde_json::from_str(line).map_err(|source| CorpusError::Json {
                    path: path.join(format!("line {}", lineno + 1)),
                    source,
                })?;
                docs.push(parse_wiki_doc(raw, stats, labels)?);
            }
            let n = docs.len();
            Ok((docs, vec![None; n]))
        }
    }
}

#[derive(Debug, Deserialize)]
struct RawMucDoc {
    docid: String,
    doctext: String,
    #[serde(default)]
    sentences: Option<Vec<(usize, usize)>>,
    #[serde(default)]
    templates: Vec<Map<String, Value>>,
    #[serde(default)]
    split: Option<String>,
}

fn normalize_incident(raw: &str) -> String {
    raw.trim()
        .to_lowercase()
        .replace(['-', '_'], " ")
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

fn parse_muc_doc(raw: RawMucDoc, schema: &Schema, stats: &mut ParseStats) -> Result<Document> {
    let doc_id = raw.docid;
    let words: Vec<String> = raw.doctext.split_whitespace().map(String::from).collect();
    let sentence_bounds = match raw.sentences {
        Some(bounds) => bounds,
        None => derive_sentence_bounds(&words),
    };
    let malformed = |field: String, reason: String| CorpusError::MalformedInput {
        doc_id: doc_id.clone(),
        field,
        reason,
    };

    let mut templates: Vec<Template> = Vec::new();
    let mut seen_keys = Vec::new();
    for (t, obj) in raw.templates.iter().enumerate() {
        let incident_raw = obj
            .get("incident_type")
            .and_then(Value::as_str)
            .ok_or_else(|| malformed(format!("templates[{t}].incident_type"), "missing or not a string".into()))?;
        let incident_type = normalize_incident(incident_raw);
        if schema.incident_index(&incident_type).is_none() {
            return Err(malformed(
                format!("templates[{t}].incident_type"),
                format!("unknown incident type {incident_raw:?}"),
            ));
        }

        let mut roles: BTreeMap<String, Vec<Entity>> = BTreeMap::new();
        for (key, value) in obj {
            if key == "incident_type" {
                continue;
            }
            if schema.role_index(key).is_none() {
                return Err(malformed(format!("templates[{t}].{key}"), "unknown role".into()));
            }
            let entities = value
                .as_array()
                .ok_or_else(|| malformed(format!("templates[{t}].{key}"), "expected a list of entities".into()))?;
            let mut resolved = Vec::new();
            for (e, entity) in entities.iter().enumerate() {
                let field = format!("templates[{t}].{key}[{e}]");
                let mentions = entity
                    .as_array()
                    .ok_or_else(|| malformed(field.clone(), "expected a list of mention strings".into()))?;
                if mentions.is_empty() {
                    return Err(malformed(field, "entity without mentions".into()));
                }
                let mut strings = Vec::with_capacity(mentions.len());
                for (m, mention) in mentions.iter().enumerate() {
                    let s = mention
                        .as_str()
                        .ok_or_else(|| malformed(format!("{field}[{m}]"), "mention is not a string".into()))?;
                    if s.split_whitespace().next().is_none() {
                        return Err(malformed(format!("{field}[{m}]"), "empty mention".into()));
                    }
                    strings.push(s);
                }
                resolved.push(resolve_entity(&doc_id, &words, &strings, stats)?);
            }
            if !resolved.is_empty() {
                roles.insert(key.clone(), resolved);
            }
        }

        if roles.is_empty() {
            stats.empty_templates += 1;
            continue;
        }
        let template = Template { incident_type, roles };
        let key = template_key(&template);
        if seen_keys.contains(&key) {
            stats.duplicate_templates += 1;
            continue;
        }
        seen_keys.push(key);
        templates.push(template);
    }

    let doc = Document {
        doc_id,
        words,
        sentence_bounds,
        templates,
    };
    doc.validate()?;
    Ok(doc)
}

type TemplateKey = (String, BTreeMap<String, BTreeSet<BTreeSet<String>>>);

/// Canonical content of a template used for duplicate detection.
fn template_key(template: &Template) -> TemplateKey {
    let roles = template
        .roles
        .iter()
        .map(|(role, entities)| {
            let fillers = entities
                .iter()
                .map(|e| {
                    e.mentions
                        .iter()
                        .map(|m| m.surface.split_whitespace().collect::<Vec<_>>().join(" "))
                        .collect()
                })
                .collect();
            (role.clone(), fillers)
        })
        .collect();
    (template.incident_type.clone(), roles)
}

/// Sentence bounds from terminal punctuation: a word ending in `.`, `!` or
/// `?` closes a sentence.
pub fn derive_sentence_bounds(words: &[String]) -> Vec<(usize, usize)> {
    let mut bounds = Vec::new();
    let mut start = 0;
    for (i, word) in words.iter().enumerate() {
        if word.ends_with(['.', '!', '?']) {
            bounds.push((start, i + 1));
            start = i + 1;
        }
    }
    if start < words.len() {
        bounds.push((start, words.len()));
    }
    bounds
}

fn normalize_token(token: &str) -> String {
    let trimmed = token.trim_matches(|c: char| !c.is_alphanumeric());
    if trimmed.is_empty() {
        token.to_lowercase()
    } else {
        trimmed.to_lowercase()
    }
}

fn find_occurrences(words: &[String], needle: &[&str], normalized: bool) -> Vec<usize> {
    let len = needle.len();
    if len == 0 || len > words.len() {
        return Vec::new();
    }
    let needle_norm: Vec<String> = needle.iter().map(|t| normalize_token(t)).collect();
    (0..=words.len() - len)
        .filter(|&i| {
            if normalized {
                words[i..i + len]
                    .iter()
                    .zip(&needle_norm)
                    .all(|(w, n)| normalize_token(w) == *n)
            } else {
                words[i..i + len].iter().zip(needle).all(|(w, n)| w == n)
            }
        })
        .collect()
}

/// Resolves the mention strings of one entity to word spans. A string that
/// occurs several times maps to its first occurrence not already taken by
/// this entity.
fn resolve_entity(doc_id: &str, words: &[String], mentions: &[&str], stats: &mut ParseStats) -> Result<Entity> {
    let mut claimed: Vec<MentionSpan> = Vec::new();
    for mention in mentions {
        let tokens: Vec<&str> = mention.split_whitespace().collect();
        let mut hits = find_occurrences(words, &tokens, false);
        if hits.is_empty() {
            hits = find_occurrences(words, &tokens, true);
        }
        let start = hits
            .iter()
            .copied()
            .find(|&s| !claimed.iter().any(|c| c.start_word == s && c.end_word == s + tokens.len()))
            .or_else(|| hits.first().copied())
            .ok_or_else(|| CorpusError::OffsetResolution {
                doc_id: doc_id.to_string(),
                mention: mention.to_string(),
            })?;
        let end = start + tokens.len();
        if claimed.iter().any(|c| c.start_word == start && c.end_word == end) {
            continue;
        }
        let normalized = tokens.join(" ");
        if words[start..end].join(" ") != normalized {
            stats.surface_mismatches += 1;
        }
        claimed.push(MentionSpan {
            start_word: start,
            end_word: end,
            surface: normalized,
        });
    }
    Ok(Entity { mentions: claimed })
}

#[derive(Debug, Deserialize)]
struct RawWikiDoc {
    doc_id: String,
    tokens: Vec<String>,
    #[serde(default)]
    sentences: Vec<(Vec<Value>, Value)>,
    #[serde(default)]
    entity_mentions: Vec<RawWikiEntity>,
    #[serde(default)]
    event_mentions: Vec<RawWikiEvent>,
    #[serde(default)]
    clusters: Vec<Vec<String>>,
}

#[derive(Debug, Deserialize)]
struct RawWikiEntity {
    id: String,
    start: usize,
    end: usize,
    #[serde(default)]
    text: String,
}

#[derive(Debug, Deserialize)]
struct RawWikiEvent {
    event_type: String,
    #[serde(default)]
    arguments: Vec<RawWikiArgument>,
}

#[derive(Debug, Deserialize)]
struct RawWikiArgument {
    entity_id: String,
    role: String,
}

fn parse_wiki_doc(raw: RawWikiDoc, stats: &mut ParseStats, labels: &mut LabelSets) -> Result<Document> {
    let doc_id = raw.doc_id;
    let words = raw.tokens;
    let sentence_bounds = if raw.sentences.is_empty() {
        derive_sentence_bounds(&words)
    } else {
        let mut bounds = Vec::with_capacity(raw.sentences.len());
        let mut cursor = 0;
        for (tokens, _) in &raw.sentences {
            if tokens.is_empty() {
                continue;
            }
            bounds.push((cursor, cursor + tokens.len()));
            cursor += tokens.len();
        }
        bounds
    };

    let mentions: HashMap<&str, &RawWikiEntity> = raw.entity_mentions.iter().map(|m| (m.id.as_str(), m)).collect();
    let cluster_of: HashMap<&str, usize> = raw
        .clusters
        .iter()
        .enumerate()
        .flat_map(|(c, ids)| ids.iter().map(move |id| (id.as_str(), c)))
        .collect();

    let mut templates = Vec::new();
    let mut seen_keys = Vec::new();
    for (t, event) in raw.event_mentions.iter().enumerate() {
        let mut roles: BTreeMap<String, Vec<Entity>> = BTreeMap::new();
        let mut entity_cluster: BTreeMap<String, Vec<Option<usize>>> = BTreeMap::new();
        for (a, arg) in event.arguments.iter().enumerate() {
            let m = mentions.get(arg.entity_id.as_str()).ok_or_else(|| CorpusError::MalformedInput {
                doc_id: doc_id.clone(),
                field: format!("event_mentions[{t}].arguments[{a}].entity_id"),
                reason: format!("unknown entity {:?}", arg.entity_id),
            })?;
            if m.start >= m.end || m.end > words.len() {
                return Err(CorpusError::MalformedInput {
                    doc_id: doc_id.clone(),
                    field: format!("entity_mentions.{}", m.id),
                    reason: format!("span [{}, {}) out of range", m.start, m.end),
                });
            }
            let surface = if m.text.trim().is_empty() {
                words[m.start..m.end].join(" ")
            } else {
                m.text.split_whitespace().collect::<Vec<_>>().join(" ")
            };
            if surface != words[m.start..m.end].join(" ") {
                stats.surface_mismatches += 1;
            }
            let span = MentionSpan {
                start_word: m.start,
                end_word: m.end,
                surface,
            };
            let cluster = cluster_of.get(arg.entity_id.as_str()).copied();
            let entities = roles.entry(arg.role.clone()).or_default();
            let clusters = entity_cluster.entry(arg.role.clone()).or_default();
            let existing = cluster.and_then(|c| clusters.iter().position(|&x| x == Some(c)));
            match existing {
                Some(idx) => {
                    if !entities[idx].mentions.contains(&span) {
                        entities[idx].mentions.push(span);
                    }
                }
                None => {
                    entities.push(Entity { mentions: vec![span] });
                    clusters.push(cluster);
                }
            }
        }
        if roles.is_empty() {
            stats.empty_templates += 1;
            continue;
        }
        for role in roles.keys() {
            labels.1.insert(role.clone());
        }
        labels.0.insert(event.event_type.clone());
        let template = Template {
            incident_type: event.event_type.clone(),
            roles,
        };
        let key = template_key(&template);
        if seen_keys.contains(&key) {
            stats.duplicate_templates += 1;
            continue;
        }
        seen_keys.push(key);
        templates.push(template);
    }

    let doc = Document {
        doc_id,
        words,
        sentence_bounds,
        templates,
    };
    doc.validate()?;
    Ok(doc)
}

/// Writes a corpus in the `muc-json` layout. Sentence bounds and split
/// assignment are written explicitly so that re-parsing is lossless.
pub fn write_muc_json(corpus: &Corpus, path: &Path) -> Result<()> {
    let docs: Vec<Value> = corpus
        .documents
        .iter()
        .map(|doc| {
            let templates: Vec<Value> = doc
                .templates
                .iter()
                .map(|t| {
                    let mut obj = Map::new();
                    obj.insert("incident_type".into(), Value::String(t.incident_type.clone()));
                    for (role, entities) in &t.roles {
                        let fillers: Vec<Value> = entities
                            .iter()
                            .map(|e| Value::Array(e.mentions.iter().map(|m| Value::String(m.surface.clone())).collect()))
                            .collect();
                        obj.insert(role.clone(), Value::Array(fillers));
                    }
                    Value::Object(obj)
                })
                .collect();
            let mut obj = Map::new();
            obj.insert("docid".into(), Value::String(doc.doc_id.clone()));
            obj.insert("doctext".into(), Value::String(doc.words.join(" ")));
            obj.insert("sentences".into(), serde_json::to_value(&doc.sentence_bounds).expect("bounds serialize"));
            obj.insert("templates".into(), Value::Array(templates));
            if let Some(split) = corpus.split_of(&doc.doc_id) {
                obj.insert("split".into(), Value::String(split.as_str().into()));
            }
            Value::Object(obj)
        })
        .collect();
    let text = serde_json::to_string_pretty(&docs).expect("corpus serializes");
    fs::write(path, text).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })
}
