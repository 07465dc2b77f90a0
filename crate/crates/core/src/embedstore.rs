//! On-disk bundles of per-token encoder outputs.
//!
//! A bundle directory holds `manifest.json` and one tensor file per
//! document. Tensor file layout, all integers little-endian `u32`:
//!
//! ```text
//! "DPE1"
//! n_layers  n_tokens  hidden_dim
//! layer_id[n_layers]
//! n_words
//! word_offset[n_words + 1]      word i owns tokens [off[i], off[i+1])
//! f32 payload[n_layers][n_tokens][hidden_dim]
//! ```
//!
//! Only the start of each word interval is consumed downstream (first-token
//! convention). A word whose start is at or past `n_tokens` was cut by
//! truncation.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{Read, Seek, SeekFrom};
use std::ops::Range;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const TENSOR_MAGIC: &[u8; 4] = b"DPE1";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("corrupt tensor file {path}: {reason}")]
    CorruptFile { path: PathBuf, reason: String },
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error("document {0:?} is not in the bundle")]
    UnknownDoc(String),
    #[error("layer {0} is not in the bundle")]
    LayerNotInBundle(u32),
    #[error("word {word} out of range for alignment with {n_words} words")]
    WordOutOfRange { word: usize, n_words: usize },
    #[error("non-finite value in document {doc_id:?}, layer {layer}")]
    NonFinite { doc_id: String, layer: u32 },
    #[error("invalid alignment: {0}")]
    InvalidAlignment(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = EmbedError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EmbedError + '_ {
    move |source| EmbedError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EmbeddingMode {
    FullText,
    SentCat,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub encoder_name: String,
    pub mode: EmbeddingMode,
    pub hidden_dim: usize,
    pub layer_ids: Vec<u32>,
    pub max_tokens: usize,
    #[serde(default)]
    pub doc_index: BTreeMap<String, String>,
}

impl BundleManifest {
    pub fn new(encoder_name: impl Into<String>, mode: EmbeddingMode, hidden_dim: usize, layer_ids: Vec<u32>, max_tokens: usize) -> Self {
        BundleManifest {
            encoder_name: encoder_name.into(),
            mode,
            hidden_dim,
            layer_ids,
            max_tokens,
            doc_index: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 {
            return Err(EmbedError::InvalidManifest("hidden_dim must be positive".into()));
        }
        if self.max_tokens == 0 {
            return Err(EmbedError::InvalidManifest("max_tokens must be positive".into()));
        }
        if self.layer_ids.is_empty() {
            return Err(EmbedError::InvalidManifest("no layers".into()));
        }
        if self.layer_ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(EmbedError::InvalidManifest("layer_ids must be strictly increasing".into()));
        }
        Ok(())
    }
}

/// Word-to-token alignment stored as `n_words + 1` token offsets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignmentMap {
    offsets: Vec<u32>,
    n_tokens: usize,
}

impl AlignmentMap {
    /// `offsets[i]..offsets[i + 1]` is the token interval of word `i`.
    pub fn from_offsets(offsets: Vec<u32>, n_tokens: usize) -> Result<Self> {
        if offsets.is_empty() {
            return Err(EmbedError::InvalidAlignment("offset list is empty".into()));
        }
        if offsets.windows(2).any(|w| w[0] > w[1]) {
            return Err(EmbedError::InvalidAlignment("offsets decrease".into()));
        }
        if *offsets.last().unwrap() as usize > n_tokens {
            return Err(EmbedError::InvalidAlignment(format!(
                "offset {} exceeds {n_tokens} tokens",
                offsets.last().unwrap()
            )));
        }
        Ok(AlignmentMap { offsets, n_tokens })
    }

    /// Builds an alignment from per-word first-token positions; `end` closes
    /// the last word.
    pub fn from_starts(starts: &[u32], end: u32, n_tokens: usize) -> Result<Self> {
        let mut offsets = starts.to_vec();
        offsets.push(end);
        Self::from_offsets(offsets, n_tokens)
    }

    /// One token per word, no special tokens.
    pub fn identity(n_words: usize) -> Self {
        AlignmentMap {
            offsets: (0..=n_words as u32).collect(),
            n_tokens: n_words,
        }
    }

    pub fn n_words(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn offsets(&self) -> &[u32] {
        &self.offsets
    }

    pub fn word_to_tokens(&self, word: usize) -> Result<Range<usize>> {
        if word >= self.n_words() {
            return Err(EmbedError::WordOutOfRange {
                word,
                n_words: self.n_words(),
            });
        }
        Ok(self.offsets[word] as usize..self.offsets[word + 1] as usize)
    }

    /// First word with no surviving token, if any word was cut.
    pub fn truncated_from_word(&self) -> Option<usize> {
        self.offsets[..self.n_words()]
            .iter()
            .position(|&o| o as usize >= self.n_tokens)
    }

    /// Row of the word's first token, or `None` when the word has no token
    /// (cut by truncation or emitted empty by the tokenizer).
    pub fn first_token(&self, word: usize) -> Result<Option<usize>> {
        let range = self.word_to_tokens(word)?;
        if range.is_empty() || range.start >= self.n_tokens {
            Ok(None)
        } else {
            Ok(Some(range.start))
        }
    }

    fn truncated(&self, max_tokens: usize) -> Self {
        let n_tokens = self.n_tokens.min(max_tokens);
        AlignmentMap {
            offsets: self.offsets.iter().map(|&o| o.min(n_tokens as u32)).collect(),
            n_tokens,
        }
    }
}

/// Per-token encoder outputs of one document for a set of layers.
#[derive(Debug, Clone, PartialEq)]
pub struct DocEmbedding {
    pub doc_id: String,
    n_tokens: usize,
    layer_ids: Vec<u32>,
    tensors: Vec<Array2<f32>>,
    alignment: AlignmentMap,
}

impl DocEmbedding {
    pub fn new(doc_id: impl Into<String>, layers: Vec<(u32, Array2<f32>)>, alignment: AlignmentMap) -> Result<Self> {
        let doc_id = doc_id.into();
        let Some(first) = layers.first() else {
            return Err(EmbedError::DimensionMismatch(format!("{doc_id}: no layers")));
        };
        let (n_tokens, dim) = first.1.dim();
        for (id, m) in &layers {
            if m.dim() != (n_tokens, dim) {
                return Err(EmbedError::DimensionMismatch(format!(
                    "{doc_id}: layer {id} has shape {:?}, expected {:?}",
                    m.dim(),
                    (n_tokens, dim)
                )));
            }
        }
        if alignment.n_tokens != n_tokens {
            return Err(EmbedError::DimensionMismatch(format!(
                "{doc_id}: alignment covers {} tokens, tensors have {n_tokens}",
                alignment.n_tokens
            )));
        }
        let (layer_ids, tensors) = layers.into_iter().unzip();
        Ok(DocEmbedding {
            doc_id,
            n_tokens,
            layer_ids,
            tensors,
            alignment,
        })
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn hidden_dim(&self) -> usize {
        self.tensors[0].ncols()
    }

    pub fn layer_ids(&self) -> &[u32] {
        &self.layer_ids
    }

    pub fn alignment(&self) -> &AlignmentMap {
        &self.alignment
    }

    pub fn layer(&self, layer: u32) -> Result<ArrayView2<'_, f32>> {
        self.layer_ids
            .iter()
            .position(|&l| l == layer)
            .map(|i| self.tensors[i].view())
            .ok_or(EmbedError::LayerNotInBundle(layer))
    }

    fn check_finite(&self) -> Result<()> {
        for (id, m) in self.layer_ids.iter().zip(&self.tensors) {
            if m.iter().any(|v| !v.is_finite()) {
                return Err(EmbedError::NonFinite {
                    doc_id: self.doc_id.clone(),
                    layer: *id,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FirstToken<'a> {
    Row(ArrayView1<'a, f32>),
    /// The word has no token left after truncation; the caller drops the
    /// example.
    Dropped,
}

pub fn first_token_vector(doc: &DocEmbedding, layer: u32, word: usize) -> Result<FirstToken<'_>> {
    let matrix = doc.layer(layer)?;
    Ok(match doc.alignment.first_token(word)? {
        Some(row) => FirstToken::Row(matrix.index_axis_move(Axis(0), row)),
        None => FirstToken::Dropped,
    })
}

/// Keeps the first `max_tokens` rows of every layer and clips the alignment.
pub fn truncate(doc: &DocEmbedding, max_tokens: usize) -> DocEmbedding {
    assert!(max_tokens >= 1, "max_tokens must be at least 1");
    if max_tokens >= doc.n_tokens {
        return doc.clone();
    }
    DocEmbedding {
        doc_id: doc.doc_id.clone(),
        n_tokens: max_tokens,
        layer_ids: doc.layer_ids.clone(),
        tensors: doc.tensors.iter().map(|m| m.slice(s![..max_tokens, ..]).to_owned()).collect(),
        alignment: doc.alignment.truncated(max_tokens),
    }
}

/// Row-wise concatenation of per-sentence embeddings of one document.
pub fn concat_doc_embeddings(parts: &[DocEmbedding]) -> Result<DocEmbedding> {
    let first = parts
        .first()
        .ok_or_else(|| EmbedError::DimensionMismatch("nothing to concatenate".into()))?;
    if parts.len() == 1 {
        return Ok(first.clone());
    }
    let dim = first.hidden_dim();
    for p in parts {
        if p.layer_ids != first.layer_ids || p.hidden_dim() != dim {
            return Err(EmbedError::DimensionMismatch(format!(
                "part of {:?} has layers {:?} / dim {}, expected {:?} / {dim}",
                p.doc_id,
                p.layer_ids,
                p.hidden_dim(),
                first.layer_ids
            )));
        }
    }

    let n_tokens: usize = parts.iter().map(|p| p.n_tokens).sum();
    let mut offsets = Vec::new();
    let mut base = 0u32;
    for p in parts {
        let words = p.alignment.n_words();
        offsets.extend(p.alignment.offsets[..words].iter().map(|&o| o + base));
        base += p.n_tokens as u32;
    }
    let last = parts.last().unwrap();
    offsets.push(last.alignment.offsets[last.alignment.n_words()] + base - last.n_tokens as u32);

    let tensors = (0..first.layer_ids.len())
        .map(|li| {
            let views: Vec<ArrayView2<'_, f32>> = parts.iter().map(|p| p.tensors[li].view()).collect();
            ndarray::concatenate(Axis(0), &views).expect("shapes checked")
        })
        .collect();
    Ok(DocEmbedding {
        doc_id: first.doc_id.clone(),
        n_tokens,
        layer_ids: first.layer_ids.clone(),
        tensors,
        alignment: AlignmentMap::from_offsets(offsets, n_tokens)?,
    })
}

pub fn encode_tensor_file(doc: &DocEmbedding) -> Vec<u8> {
    let words = doc.alignment.n_words();
    let payload = doc.layer_ids.len() * doc.n_tokens * doc.hidden_dim();
    let mut out = Vec::with_capacity(4 * (5 + doc.layer_ids.len() + words + 1 + payload));
    out.extend_from_slice(TENSOR_MAGIC);
    for v in [doc.layer_ids.len(), doc.n_tokens, doc.hidden_dim()] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for id in &doc.layer_ids {
        out.extend_from_slice(&id.to_le_bytes());
    }
    out.extend_from_slice(&(words as u32).to_le_bytes());
    for o in &doc.alignment.offsets {
        out.extend_from_slice(&o.to_le_bytes());
    }
    for m in &doc.tensors {
        for v in m.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Header {
    layer_ids: Vec<u32>,
    n_tokens: usize,
    hidden_dim: usize,
    alignment: AlignmentMap,
    byte_len: usize,
}

impl Header {
    fn payload_len(&self) -> usize {
        self.layer_ids.len() * self.n_tokens * self.hidden_dim * 4
    }
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_header(r: &mut impl Read, path: &Path) -> Result<Header> {
    let corrupt = |reason: String| EmbedError::CorruptFile {
        path: path.to_path_buf(),
        reason,
    };
    let short = |_| corrupt("file ends inside header".into());
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(short)?;
    if &magic != TENSOR_MAGIC {
        return Err(corrupt(format!("bad magic {magic:?}")));
    }
    let n_layers = read_u32(r).map_err(short)? as usize;
    let n_tokens = read_u32(r).map_err(short)? as usize;
    let hidden_dim = read_u32(r).map_err(short)? as usize;
    if n_layers == 0 || hidden_dim == 0 {
        return Err(corrupt("zero layers or zero hidden_dim".into()));
    }
    let layer_ids = (0..n_layers).map(|_| read_u32(r)).collect::<std::io::Result<Vec<_>>>().map_err(short)?;
    let n_words = read_u32(r).map_err(short)? as usize;
    let offsets = (0..=n_words).map(|_| read_u32(r)).collect::<std::io::Result<Vec<_>>>().map_err(short)?;
    let alignment = AlignmentMap::from_offsets(offsets, n_tokens).map_err(|e| corrupt(e.to_string()))?;
    Ok(Header {
        layer_ids,
        n_tokens,
        hidden_dim,
        alignment,
        byte_len: 4 * (5 + n_layers + n_words + 1),
    })
}

fn decode_payload(bytes: &[u8], rows: usize, cols: usize) -> Array2<f32> {
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Array2::from_shape_vec((rows, cols), data).expect("payload length checked")
}

/// Decodes a whole tensor file, checking magic, lengths and finiteness.
pub fn decode_tensor_file(bytes: &[u8], doc_id: &str, path: &Path) -> Result<DocEmbedding> {
    let mut cursor = bytes;
    let header = read_header(&mut cursor, path)?;
    if bytes.len() != header.byte_len + header.payload_len() {
        return Err(EmbedError::CorruptFile {
            path: path.to_path_buf(),
            reason: format!(
                "expected {} bytes, found {}",
                header.byte_len + header.payload_len(),
                bytes.len()
            ),
        });
    }
    let block = header.n_tokens * header.hidden_dim * 4;
    let layers = header
        .layer_ids
        .iter()
        .enumerate()
        .map(|(i, &id)| {
            let start = header.byte_len + i * block;
            (id, decode_payload(&bytes[start..start + block], header.n_tokens, header.hidden_dim))
        })
        .collect();
    let doc = DocEmbedding::new(doc_id, layers, header.alignment)?;
    doc.check_finite()?;
    Ok(doc)
}

/// Writes `docs` and the manifest into `out_dir`. The returned manifest
/// has `doc_index` filled in; the manifest file is written last.
pub fn write_bundle<I>(manifest: &BundleManifest, docs: I, out_dir: &Path) -> Result<BundleManifest>
where
    I: IntoIterator<Item = DocEmbedding>,
{
    manifest.validate()?;
    let tensor_dir = out_dir.join("tensors");
    fs::create_dir_all(&tensor_dir).map_err(io_err(&tensor_dir))?;
    let mut written = manifest.clone();
    written.doc_index.clear();
    for doc in docs {
        if doc.layer_ids != manifest.layer_ids {
            return Err(EmbedError::DimensionMismatch(format!(
                "{}: layers {:?} differ from manifest {:?}",
                doc.doc_id, doc.layer_ids, manifest.layer_ids
            )));
        }
        if doc.hidden_dim() != manifest.hidden_dim {
            return Err(EmbedError::DimensionMismatch(format!(
                "{}: hidden_dim {} differs from manifest {}",
                doc.doc_id,
                doc.hidden_dim(),
                manifest.hidden_dim
            )));
        }
        if manifest.mode == EmbeddingMode::FullText && doc.n_tokens > manifest.max_tokens {
            return Err(EmbedError::DimensionMismatch(format!(
                "{}: {} tokens exceed max_tokens {}",
                doc.doc_id, doc.n_tokens, manifest.max_tokens
            )));
        }
        if written.doc_index.contains_key(&doc.doc_id) {
            return Err(EmbedError::InvalidManifest(format!("document {:?} written twice", doc.doc_id)));
        }
        doc.check_finite()?;
        let rel = format!("tensors/{}.dpe", file_stem(&doc.doc_id));
        let path = out_dir.join(&rel);
        fs::write(&path, encode_tensor_file(&doc)).map_err(io_err(&path))?;
        written.doc_index.insert(doc.doc_id.clone(), rel);
    }
    let manifest_path = out_dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&written).expect("manifest serializes");
    fs::write(&manifest_path, json).map_err(io_err(&manifest_path))?;
    Ok(written)
}

fn file_stem(doc_id: &str) -> String {
    let digest = Sha256::digest(doc_id.as_bytes());
    hex::encode(&digest[..8])
}

/// Read access to per-document embeddings, on disk or in memory.
pub trait EmbeddingSource: Sync {
    fn hidden_dim(&self) -> usize;
    fn layer_ids(&self) -> &[u32];
    fn mode(&self) -> EmbeddingMode;
    fn alignment(&self, doc_id: &str) -> Result<AlignmentMap>;
    /// The `n_tokens x hidden_dim` matrix of one layer plus the alignment.
    fn layer_matrix(&self, doc_id: &str, layer: u32) -> Result<(Array2<f32>, AlignmentMap)>;
}

/// A bundle directory opened for lazy, per-document reads.
#[derive(Debug, Clone)]
pub struct Bundle {
    dir: PathBuf,
    manifest: BundleManifest,
}

pub fn read_bundle(dir: &Path) -> Result<Bundle> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: BundleManifest =
        serde_json::from_str(&text).map_err(|e| EmbedError::InvalidManifest(format!("{}: {e}", path.display())))?;
    manifest.validate()?;
    for (doc_id, rel) in &manifest.doc_index {
        if !dir.join(rel).is_file() {
            return Err(EmbedError::InvalidManifest(format!("tensor file {rel:?} of {doc_id:?} is missing")));
        }
    }
    Ok(Bundle {
        dir: dir.to_path_buf(),
        manifest,
    })
}

impl Bundle {
    pub fn manifest(&self) -> &BundleManifest {
        &self.manifest
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn doc_path(&self, doc_id: &str) -> Result<PathBuf> {
        self.manifest
            .doc_index
            .get(doc_id)
            .map(|rel| self.dir.join(rel))
            .ok_or_else(|| EmbedError::UnknownDoc(doc_id.to_string()))
    }

    fn open_checked(&self, doc_id: &str) -> Result<(File, Header, PathBuf)> {
        let path = self.doc_path(doc_id)?;
        let mut file = File::open(&path).map_err(io_err(&path))?;
        let len = file.metadata().map_err(io_err(&path))?.len() as usize;
        let header = read_header(&mut file, &path)?;
        let corrupt = |reason: String| EmbedError::CorruptFile {
            path: path.clone(),
            reason,
        };
        if len != header.byte_len + header.payload_len() {
            return Err(corrupt(format!(
                "expected {} bytes, found {len}",
                header.byte_len + header.payload_len()
            )));
        }
        if header.hidden_dim != self.manifest.hidden_dim {
            return Err(corrupt(format!(
                "hidden_dim {} differs from manifest {}",
                header.hidden_dim, self.manifest.hidden_dim
            )));
        }
        if header.layer_ids != self.manifest.layer_ids {
            return Err(corrupt(format!(
                "layers {:?} differ from manifest {:?}",
                header.layer_ids, self.manifest.layer_ids
            )));
        }
        Ok((file, header, path))
    }

    /// Loads and validates every layer of one document.
    pub fn load(&self, doc_id: &str) -> Result<DocEmbedding> {
        let path = self.doc_path(doc_id)?;
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        let doc = decode_tensor_file(&bytes, doc_id, &path)?;
        if doc.hidden_dim() != self.manifest.hidden_dim || doc.layer_ids != self.manifest.layer_ids {
            return Err(EmbedError::CorruptFile {
                path,
                reason: "shape differs from manifest".into(),
            });
        }
        Ok(doc)
    }

    pub fn doc_ids(&self) -> impl Iterator<Item = &str> {
        self.manifest.doc_index.keys().map(String::as_str)
    }
}

impl EmbeddingSource for Bundle {
    fn hidden_dim(&self) -> usize {
        self.manifest.hidden_dim
    }

    fn layer_ids(&self) -> &[u32] {
        &self.manifest.layer_ids
    }

    fn mode(&self) -> EmbeddingMode {
        self.manifest.mode
    }

    fn alignment(&self, doc_id: &str) -> Result<AlignmentMap> {
        Ok(self.open_checked(doc_id)?.1.alignment)
    }

    fn layer_matrix(&self, doc_id: &str, layer: u32) -> Result<(Array2<f32>, AlignmentMap)> {
        let index = self
            .manifest
            .layer_ids
            .iter()
            .position(|&l| l == layer)
            .ok_or(EmbedError::LayerNotInBundle(layer))?;
        let (mut file, header, path) = self.open_checked(doc_id)?;
        let block = header.n_tokens * header.hidden_dim * 4;
        file.seek(SeekFrom::Start((header.byte_len + index * block) as u64))
            .map_err(io_err(&path))?;
        let mut bytes = vec![0u8; block];
        file.read_exact(&mut bytes).map_err(io_err(&path))?;
        let matrix = decode_payload(&bytes, header.n_tokens, header.hidden_dim);
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(EmbedError::NonFinite {
                doc_id: doc_id.to_string(),
                layer,
            });
        }
        Ok((matrix, header.alignment))
    }
}

/// Embeddings held in memory; used for synthetic fixtures and tests.
#[derive(Debug, Clone)]
pub struct InMemoryBundle {
    hidden_dim: usize,
    layer_ids: Vec<u32>,
    mode: EmbeddingMode,
    docs: BTreeMap<String, DocEmbedding>,
}

impl InMemoryBundle {
    pub fn new(hidden_dim: usize, layer_ids: Vec<u32>, mode: EmbeddingMode) -> Self {
        InMemoryBundle {
            hidden_dim,
            layer_ids,
            mode,
            docs: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, doc: DocEmbedding) -> Result<()> {
        if doc.layer_ids != self.layer_ids || doc.hidden_dim() != self.hidden_dim {
            return Err(EmbedError::DimensionMismatch(format!(
                "{}: layers {:?} / dim {} do not match bundle",
                doc.doc_id,
                doc.layer_ids,
                doc.hidden_dim()
            )));
        }
        doc.check_finite()?;
        self.docs.insert(doc.doc_id.clone(), doc);
        Ok(())
    }

    pub fn get(&self, doc_id: &str) -> Result<&DocEmbedding> {
        self.docs.get(doc_id).ok_or_else(|| EmbedError::UnknownDoc(doc_id.to_string()))
    }

    pub fn docs(&self) -> impl Iterator<Item = &DocEmbedding> {
        self.docs.values()
    }

    pub fn manifest(&self, encoder_name: &str, max_tokens: usize) -> BundleManifest {
        BundleManifest::new(encoder_name, self.mode, self.hidden_dim, self.layer_ids.clone(), max_tokens)
    }
}

impl EmbeddingSource for InMemoryBundle {
    fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    fn layer_ids(&self) -> &[u32] {
        &self.layer_ids
    }

    fn mode(&self) -> EmbeddingMode {
        self.mode
    }

    fn alignment(&self, doc_id: &str) -> Result<AlignmentMap> {
        Ok(self.get(doc_id)?.alignment.clone())
    }

    fn layer_matrix(&self, doc_id: &str, layer: u32) -> Result<(Array2<f32>, AlignmentMap)> {
        let doc = self.get(doc_id)?;
        Ok((doc.layer(layer)?.to_owned(), doc.alignment.clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    fn ramp(n_tokens: usize, dim: usize, offset: f32) -> Array2<f32> {
        Array::from_shape_fn((n_tokens, dim), |(t, d)| offset + (t * dim + d) as f32)
    }

    fn doc(id: &str, layers: &[u32], n_tokens: usize, dim: usize) -> DocEmbedding {
        DocEmbedding::new(
            id,
            layers.iter().map(|&l| (l, ramp(n_tokens, dim, l as f32 * 1000.0))).collect(),
            AlignmentMap::identity(n_tokens),
        )
        .unwrap()
    }

    #[test]
    fn tensor_file_size() {
        let d = doc("a", &[0, 1], 3, 4);
        let bytes = encode_tensor_file(&d);
        // header: magic + 3 dims + 2 layer ids + n_words + 4 offsets
        let header = 4 * (1 + 3 + 2 + 1 + 4);
        assert_eq!(bytes.len() - header, 96);
    }

    #[test]
    fn write_read_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = BundleManifest::new("enc", EmbeddingMode::FullText, 4, vec![0, 1], 512);
        let docs = vec![doc("a", &[0, 1], 3, 4), doc("b", &[0, 1], 5, 4)];
        let written = write_bundle(&manifest, docs.clone(), dir.path()).unwrap();
        let bundle = read_bundle(dir.path()).unwrap();
        assert_eq!(bundle.manifest(), &written);
        for d in &docs {
            assert_eq!(&bundle.load(&d.doc_id).unwrap(), d);
            let (m, align) = bundle.layer_matrix(&d.doc_id, 1).unwrap();
            assert_eq!(m.view(), d.layer(1).unwrap());
            assert_eq!(&align, d.alignment());
        }
    }

    #[test]
    fn layer_set_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = BundleManifest::new("enc", EmbeddingMode::FullText, 4, vec![0, 1], 512);
        let err = write_bundle(&manifest, vec![doc("a", &[0, 2], 3, 4)], dir.path()).unwrap_err();
        assert!(matches!(err, EmbedError::DimensionMismatch(_)));
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = BundleManifest::new("enc", EmbeddingMode::FullText, 4, vec![0], 512);
        let written = write_bundle(&manifest, vec![doc("a", &[0], 3, 4)], dir.path()).unwrap();
        let path = dir.path().join(&written.doc_index["a"]);
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        let bundle = read_bundle(dir.path()).unwrap();
        assert!(matches!(bundle.load("a"), Err(EmbedError::CorruptFile { .. })));
        assert!(matches!(bundle.layer_matrix("a", 0), Err(EmbedError::CorruptFile { .. })));

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        fs::write(&path, bad_magic).unwrap();
        assert!(matches!(bundle.load("a"), Err(EmbedError::CorruptFile { .. })));
    }

    #[test]
    fn unknown_doc() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = BundleManifest::new("enc", EmbeddingMode::FullText, 4, vec![0], 512);
        write_bundle(&manifest, vec![doc("a", &[0], 3, 4)], dir.path()).unwrap();
        let bundle = read_bundle(dir.path()).unwrap();
        assert!(matches!(bundle.load("zzz"), Err(EmbedError::UnknownDoc(_))));
    }

    #[test]
    fn nan_is_a_read_error() {
        let mut d = doc("a", &[0], 3, 4);
        d.tensors[0][[1, 2]] = f32::NAN;
        let bytes = encode_tensor_file(&d);
        let err = decode_tensor_file(&bytes, "a", Path::new("a.dpe")).unwrap_err();
        assert!(matches!(err, EmbedError::NonFinite { layer: 0, .. }));
    }

    #[test]
    fn first_token_rows() {
        let align = AlignmentMap::from_offsets(vec![0, 1, 3, 4], 4).unwrap();
        let m = ramp(4, 2, 0.0);
        let d = DocEmbedding::new("a", vec![(0, m.clone())], align).unwrap();
        match first_token_vector(&d, 0, 2).unwrap() {
            FirstToken::Row(r) => assert_eq!(r, m.row(3)),
            FirstToken::Dropped => panic!("word 2 has tokens"),
        }
        match first_token_vector(&d, 0, 1).unwrap() {
            FirstToken::Row(r) => assert_eq!(r, m.row(1)),
            FirstToken::Dropped => panic!(),
        }
        assert!(matches!(first_token_vector(&d, 7, 0), Err(EmbedError::LayerNotInBundle(7))));
        assert!(matches!(first_token_vector(&d, 0, 3), Err(EmbedError::WordOutOfRange { .. })));
    }

    #[test]
    fn truncation_clips_alignment() {
        // words 0..5 take two tokens each from 500, word 5 spans [510, 514)
        let mut offsets: Vec<u32> = vec![0];
        offsets.extend([500, 502, 504, 506, 508, 510, 514, 590, 600].iter());
        let n_words = offsets.len() - 1;
        let align = AlignmentMap::from_offsets(offsets, 600).unwrap();
        let d = DocEmbedding::new("a", vec![(0, Array2::zeros((600, 2)))], align).unwrap();
        let t = truncate(&d, 512);
        assert_eq!(t.n_tokens(), 512);
        assert_eq!(t.alignment().word_to_tokens(6).unwrap(), 510..512);
        assert_eq!(t.alignment().truncated_from_word(), Some(7));
        assert_eq!(t.alignment().n_words(), n_words);
        assert!(matches!(first_token_vector(&t, 0, 7).unwrap(), FirstToken::Dropped));
        assert_eq!(truncate(&d, 600), d);
        assert_eq!(truncate(&t, 512), t);
        assert_eq!(d.alignment().truncated_from_word(), None);
    }

    #[test]
    fn concat_rebases_alignment() {
        let a = DocEmbedding::new(
            "d",
            vec![(0, ramp(3, 2, 0.0))],
            AlignmentMap::from_offsets(vec![1, 2, 2], 3).unwrap(),
        )
        .unwrap();
        let b = DocEmbedding::new(
            "d",
            vec![(0, ramp(5, 2, 100.0))],
            AlignmentMap::from_offsets(vec![1, 3, 4], 5).unwrap(),
        )
        .unwrap();
        let c = concat_doc_embeddings(&[a.clone(), b]).unwrap();
        assert_eq!(c.n_tokens(), 8);
        assert_eq!(c.alignment().offsets(), &[1, 2, 4, 6, 7]);
        assert_eq!(concat_doc_embeddings(&[a.clone()]).unwrap(), a);
    }

    #[test]
    fn concat_dimension_mismatch() {
        let a = doc("d", &[0], 2, 2);
        let b = doc("d", &[0], 2, 3);
        assert!(matches!(concat_doc_embeddings(&[a, b]), Err(EmbedError::DimensionMismatch(_))));
    }

    #[test]
    fn manifest_validation() {
        let mut m = BundleManifest::new("enc", EmbeddingMode::SentCat, 4, vec![0, 0], 512);
        assert!(m.validate().is_err());
        m.layer_ids = vec![0, 3];
        assert!(m.validate().is_ok());
        m.hidden_dim = 0;
        assert!(m.validate().is_err());
    }
}
