//! Sweeps over tasks, bundles, layers and seeds, with per-cell result caching
//! and aggregated report tables.
//!
//! A *cell* is one `(task, bundle, layer, seed)` combination. Each finished
//! cell is written to `output_dir/cells/<hash>.json`, where the hash covers
//! everything that influences its result, so an interrupted sweep resumes by
//! skipping cells whose file already exists.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{parse_corpus, split_documents, Corpus, CorpusError, CorpusFormat, Split};
use crate::embedstore::{read_bundle, EmbedError, EmbeddingSource};
use crate::features::{materialize, materialize_examples};
use crate::probe::{evaluate, train, ProbeConfig};
use crate::taskgen::{build_task, BuildOptions, ProbingDataset, Strata, Task, TaskError, TaskFamily};

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("invalid experiment spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error("result table is empty")]
    EmptyTable,
    #[error("tables cover different keys: {0}")]
    KeyMismatch(String),
    #[error("malformed results file {path}: {reason}")]
    MalformedResults { path: PathBuf, reason: String },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = RunnerError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunnerError + '_ {
    move |source| RunnerError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Which encoder layers a sweep covers.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "LayersRepr", into = "LayersRepr")]
pub enum LayerSelection {
    #[default]
    All,
    List(Vec<u32>),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum LayersRepr {
    Keyword(String),
    List(Vec<u32>),
}

impl TryFrom<LayersRepr> for LayerSelection {
    type Error = String;

    fn try_from(repr: LayersRepr) -> std::result::Result<Self, String> {
        match repr {
            LayersRepr::Keyword(k) if k == "all" => Ok(LayerSelection::All),
            LayersRepr::Keyword(k) => Err(format!("layers must be \"all\" or a list of layer ids, got {k:?}")),
            LayersRepr::List(list) => Ok(LayerSelection::List(list)),
        }
    }
}

impl From<LayerSelection> for LayersRepr {
    fn from(sel: LayerSelection) -> Self {
        match sel {
            LayerSelection::All => LayersRepr::Keyword("all".into()),
            LayerSelection::List(list) => LayersRepr::List(list),
        }
    }
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

fn default_ratios() -> (f64, f64, f64) {
    (0.8, 0.1, 0.1)
}

fn default_token_budget() -> usize {
    512
}

fn default_format() -> CorpusFormat {
    CorpusFormat::MucJson
}

/// A sweep description, usually read from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub corpus_path: PathBuf,
    #[serde(default = "default_format", with = "format_serde")]
    pub corpus_format: CorpusFormat,
    /// Used only when the corpus carries no split of its own.
    #[serde(default = "default_ratios")]
    pub split_ratios: (f64, f64, f64),
    #[serde(default)]
    pub split_seed: u64,
    /// Each bundle is labelled by its last path component.
    pub bundle_paths: Vec<PathBuf>,
    pub tasks: Vec<Task>,
    #[serde(default)]
    pub layers: LayerSelection,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub probe: ProbeConfig,
    /// Word-count boundaries for stratified evaluation.
    #[serde(default)]
    pub strata: Option<Vec<usize>>,
    /// Token budget applied to whole-document inputs of the longest stratum.
    #[serde(default = "default_token_budget")]
    pub token_budget: usize,
    pub output_dir: PathBuf,
    /// Worker threads; defaults to the available parallelism.
    #[serde(default)]
    pub workers: Option<usize>,
}

mod format_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    use crate::corpus::CorpusFormat;

    pub fn serialize<S: Serializer>(format: &CorpusFormat, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(match format {
            CorpusFormat::MucJson => "muc",
            CorpusFormat::WikiEventsJson => "wikievents",
        })
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<CorpusFormat, D::Error> {
        let raw = String::deserialize(d)?;
        raw.parse().map_err(serde::de::Error::custom)
    }
}

impl ExperimentSpec {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut spec: ExperimentSpec = serde_json::from_str(&text).map_err(|e| RunnerError::InvalidSpec(format!("{}: {e}", path.display())))?;
        // Relative paths in a spec file are relative to the file.
        if let Some(base) = path.parent() {
            let rebase = |p: &mut PathBuf| {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            };
            rebase(&mut spec.corpus_path);
            rebase(&mut spec.output_dir);
            spec.bundle_paths.iter_mut().for_each(rebase);
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(RunnerError::InvalidSpec(msg));
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return bad("seeds must be distinct".into());
        }
        if self.tasks.is_empty() {
            return bad("no tasks requested".into());
        }
        if self.tasks.iter().collect::<BTreeSet<_>>().len() != self.tasks.len() {
            return bad("tasks must be distinct".into());
        }
        if self.bundle_paths.is_empty() {
            return bad("no bundles given".into());
        }
        let labels: Vec<String> = self.bundle_paths.iter().map(|p| bundle_label(p)).collect();
        if labels.iter().collect::<BTreeSet<_>>().len() != labels.len() {
            return bad(format!("bundle labels must be distinct, got {labels:?}"));
        }
        if let LayerSelection::List(list) = &self.layers {
            if list.is_empty() {
                return bad("layer list is empty".into());
            }
        }
        if let Some(bounds) = &self.strata {
            if Strata::new(bounds.clone()).is_none() {
                return bad(format!("strata boundaries {bounds:?} must be strictly increasing"));
            }
        }
        if self.token_budget == 0 {
            return bad("token_budget must be positive".into());
        }
        if self.workers == Some(0) {
            return bad("workers must be positive".into());
        }
        self.probe.validate().map_err(|e| RunnerError::InvalidSpec(e.to_string()))
    }

    pub fn strata(&self) -> Strata {
        self.strata.clone().and_then(Strata::new).unwrap_or_default()
    }

    pub fn cells_dir(&self) -> PathBuf {
        self.output_dir.join("cells")
    }
}

/// Label of a bundle path: its final component.
pub fn bundle_label(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

pub struct NamedSource {
    pub label: String,
    /// Identifies the bundle contents in cell hashes (normally its path).
    pub fingerprint: String,
    pub source: Box<dyn EmbeddingSource>,
}

/// The loaded corpus and bundles a sweep runs against.
pub struct Workspace {
    pub corpus: Corpus,
    pub bundles: Vec<NamedSource>,
}

impl Workspace {
    pub fn load(spec: &ExperimentSpec) -> Result<Self> {
        let mut corpus = parse_corpus(&spec.corpus_path, spec.corpus_format)?;
        if !corpus.is_split() {
            corpus = split_documents(corpus, spec.split_ratios, spec.split_seed)?;
        }
        let mut bundles = Vec::with_capacity(spec.bundle_paths.len());
        for path in &spec.bundle_paths {
            let bundle = read_bundle(path)?;
            bundles.push(NamedSource {
                label: bundle_label(path),
                fingerprint: path.display().to_string(),
                source: Box::new(bundle),
            });
        }
        Ok(Workspace { corpus, bundles })
    }

    fn layers_for(&self, spec: &ExperimentSpec, bundle: &NamedSource) -> Result<Vec<u32>> {
        let available = bundle.source.layer_ids();
        match &spec.layers {
            LayerSelection::All => Ok(available.to_vec()),
            LayerSelection::List(list) => {
                if let Some(missing) = list.iter().find(|l| !available.contains(l)) {
                    return Err(RunnerError::InvalidSpec(format!(
                        "layer {missing} is not stored in bundle {:?} (has {available:?})",
                        bundle.label
                    )));
                }
                Ok(list.clone())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Stop after this many newly trained cells, leaving the rest pending.
    pub max_new_cells: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum CellKind {
    Plain,
    Stratified,
}

/// Everything a cell's outcome depends on; hashed into its cache file name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CellIdentity {
    kind: CellKind,
    corpus: String,
    corpus_format: String,
    split_ratios: (f64, f64, f64),
    split_seed: u64,
    task: Task,
    bundle: String,
    bundle_fingerprint: String,
    layer: u32,
    seed: u64,
    probe: ProbeConfig,
    strata: Option<Vec<usize>>,
    token_budget: Option<usize>,
}

impl CellIdentity {
    fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("cell identity serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CellRecord {
    identity: CellIdentity,
    test_accuracy: f64,
    best_epoch: usize,
    epochs_run: usize,
    /// Per-stratum accuracy; `None` marks an empty stratum.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    strata: Option<Vec<(String, Option<f64>)>>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellFailure {
    pub task: Task,
    pub bundle: String,
    pub layer: Option<u32>,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedAccuracy {
    pub seed: u64,
    pub accuracy: f64,
}

pub const ALL_STRATA: &str = "all";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub task: Task,
    pub bundle: String,
    pub layer: u32,
    pub stratum: String,
    pub mean_accuracy: f64,
    /// Population standard deviation (divides by `n_seeds`).
    pub std_accuracy: f64,
    pub n_seeds: usize,
    pub per_seed: Vec<SeedAccuracy>,
}

impl ResultRow {
    pub fn from_seeds(task: Task, bundle: &str, layer: u32, stratum: &str, per_seed: Vec<SeedAccuracy>) -> Self {
        let values: Vec<f64> = per_seed.iter().map(|s| s.accuracy).collect();
        let (mean, std) = mean_std(&values);
        ResultRow {
            task,
            bundle: bundle.to_string(),
            layer,
            stratum: stratum.to_string(),
            mean_accuracy: mean,
            std_accuracy: std,
            n_seeds: per_seed.len(),
            per_seed,
        }
    }

    pub fn key(&self) -> (Task, &str, u32, &str) {
        (self.task, &self.bundle, self.layer, &self.stratum)
    }
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Aggregated accuracies in a deterministic row order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
}

impl ResultTable {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, task: Task, bundle: &str, layer: u32, stratum: &str) -> Option<&ResultRow> {
        self.rows.iter().find(|r| r.key() == (task, bundle, layer, stratum))
    }

    /// Sorted, de-duplicated seeds appearing in any row.
    pub fn seeds(&self) -> Vec<u64> {
        let set: BTreeSet<u64> = self.rows.iter().flat_map(|r| r.per_seed.iter().map(|s| s.seed)).collect();
        set.into_iter().collect()
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("table serializes");
        fs::write(path, json).map_err(io_err(path))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| RunnerError::MalformedResults {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

/// Result of a sweep: the aggregated table plus what could not be computed.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub table: ResultTable,
    pub failures: Vec<CellFailure>,
    /// Cells left untouched because of [`RunOptions::max_new_cells`].
    pub pending: usize,
    pub computed: usize,
    pub cached: usize,
    pub warnings: Vec<String>,
}

impl SweepOutcome {
    pub fn is_complete(&self) -> bool {
        self.failures.is_empty() && self.pending == 0
    }
}

pub const RESULTS_FILE: &str = "results.json";
pub const FAILURES_FILE: &str = "failures.json";

/// Loads the spec's corpus and bundles, then runs every cell.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<SweepOutcome> {
    spec.validate()?;
    let ws = Workspace::load(spec)?;
    run_experiment_with(spec, &ws, RunOptions::default())
}

pub fn run_experiment_with(spec: &ExperimentSpec, ws: &Workspace, opts: RunOptions) -> Result<SweepOutcome> {
    execute(spec, ws, opts, CellKind::Plain)
}

/// A single-bundle sweep over every stored layer.
pub fn layer_sweep(spec: &ExperimentSpec) -> Result<SweepOutcome> {
    check_layer_sweep(spec)?;
    run_experiment(spec)
}

pub fn layer_sweep_with(spec: &ExperimentSpec, ws: &Workspace, opts: RunOptions) -> Result<SweepOutcome> {
    check_layer_sweep(spec)?;
    run_experiment_with(spec, ws, opts)
}

fn check_layer_sweep(spec: &ExperimentSpec) -> Result<()> {
    if spec.bundle_paths.len() != 1 {
        return Err(RunnerError::InvalidSpec(format!(
            "a layer sweep takes exactly one bundle, got {}",
            spec.bundle_paths.len()
        )));
    }
    if spec.layers != LayerSelection::All {
        return Err(RunnerError::InvalidSpec("a layer sweep covers all layers".into()));
    }
    Ok(())
}

/// Trains on the full train split and reports test accuracy per word-count
/// stratum. Inputs in the last stratum are cut to `spec.token_budget` tokens.
pub fn stratified_eval(spec: &ExperimentSpec) -> Result<SweepOutcome> {
    spec.validate()?;
    let ws = Workspace::load(spec)?;
    stratified_eval_with(spec, &ws, RunOptions::default())
}

pub fn stratified_eval_with(spec: &ExperimentSpec, ws: &Workspace, opts: RunOptions) -> Result<SweepOutcome> {
    if let Some(task) = spec.tasks.iter().find(|t| !t.is_document_level()) {
        return Err(RunnerError::InvalidSpec(format!(
            "stratified evaluation needs document-level tasks; {task} is not"
        )));
    }
    execute(spec, ws, opts, CellKind::Stratified)
}

struct Group<'a> {
    task: Task,
    bundle_index: usize,
    bundle: &'a NamedSource,
    seed: u64,
    cells: Vec<(u32, CellIdentity)>,
}

enum CellOutcome {
    Done(CellRecord, bool),
    Failed(CellFailure),
    Pending,
}

fn execute(spec: &ExperimentSpec, ws: &Workspace, opts: RunOptions, kind: CellKind) -> Result<SweepOutcome> {
    spec.validate()?;
    if ws.bundles.len() != spec.bundle_paths.len() {
        return Err(RunnerError::InvalidSpec(format!(
            "spec lists {} bundles, workspace holds {}",
            spec.bundle_paths.len(),
            ws.bundles.len()
        )));
    }
    let cells_dir = spec.cells_dir();
    fs::create_dir_all(&cells_dir).map_err(io_err(&cells_dir))?;

    let mut groups = Vec::new();
    for &task in &spec.tasks {
        for (bundle_index, bundle) in ws.bundles.iter().enumerate() {
            let layers = ws.layers_for(spec, bundle)?;
            for &seed in &spec.seeds {
                let cells = layers
                    .iter()
                    .map(|&layer| (layer, cell_identity(spec, kind, task, bundle, layer, seed)))
                    .collect();
                groups.push(Group {
                    task,
                    bundle_index,
                    bundle,
                    seed,
                    cells,
                });
            }
        }
    }

    let budget = AtomicUsize::new(opts.max_new_cells.unwrap_or(usize::MAX));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.workers.unwrap_or(0))
        .build()
        .map_err(|e| RunnerError::InvalidSpec(format!("worker pool: {e}")))?;
    let results: Vec<(Vec<CellOutcome>, Vec<String>)> = pool.install(|| {
        groups
            .par_iter()
            .map(|g| run_group(spec, ws, g, &cells_dir, &budget))
            .collect()
    });

    let mut outcome = SweepOutcome::default();
    let mut per_key: BTreeMap<(usize, usize, u32, usize), (String, Vec<SeedAccuracy>)> = BTreeMap::new();
    for (group, (cells, warnings)) in groups.iter().zip(results) {
        let task_index = spec.tasks.iter().position(|t| *t == group.task).expect("task from spec");
        outcome.warnings.extend(warnings);
        for ((layer, _), cell) in group.cells.iter().zip(cells) {
            match cell {
                CellOutcome::Pending => outcome.pending += 1,
                CellOutcome::Failed(f) => outcome.failures.push(f),
                CellOutcome::Done(record, fresh) => {
                    if fresh {
                        outcome.computed += 1;
                    } else {
                        outcome.cached += 1;
                    }
                    let strata = match &record.strata {
                        None => vec![(ALL_STRATA.to_string(), Some(record.test_accuracy))],
                        Some(s) => s.clone(),
                    };
                    for (si, (label, acc)) in strata.into_iter().enumerate() {
                        let Some(accuracy) = acc else {
                            outcome.warnings.push(format!(
                                "{} / {} / layer {layer} / seed {}: stratum {label} is empty",
                                group.task, group.bundle.label, group.seed
                            ));
                            continue;
                        };
                        per_key
                            .entry((task_index, group.bundle_index, *layer, si))
                            .or_insert_with(|| (label, Vec::new()))
                            .1
                            .push(SeedAccuracy {
                                seed: group.seed,
                                accuracy,
                            });
                    }
                }
            }
        }
    }
    outcome.failures.sort();
    outcome.failures.dedup();
    outcome.warnings.sort();
    outcome.warnings.dedup();

    for ((ti, bi, layer, _), (stratum, mut per_seed)) in per_key {
        per_seed.sort_by_key(|s| s.seed);
        outcome
            .table
            .rows
            .push(ResultRow::from_seeds(spec.tasks[ti], &ws.bundles[bi].label, layer, &stratum, per_seed));
    }

    let results_path = spec.output_dir.join(RESULTS_FILE);
    outcome.table.write_json(&results_path)?;
    let failures_path = spec.output_dir.join(FAILURES_FILE);
    let json = serde_json::to_string_pretty(&outcome.failures).expect("failures serialize");
    fs::write(&failures_path, json).map_err(io_err(&failures_path))?;
    Ok(outcome)
}

fn cell_identity(spec: &ExperimentSpec, kind: CellKind, task: Task, bundle: &NamedSource, layer: u32, seed: u64) -> CellIdentity {
    let stratified = kind == CellKind::Stratified;
    CellIdentity {
        kind,
        corpus: spec.corpus_path.display().to_string(),
        corpus_format: format!("{:?}", spec.corpus_format),
        split_ratios: spec.split_ratios,
        split_seed: spec.split_seed,
        task,
        bundle: bundle.label.clone(),
        bundle_fingerprint: bundle.fingerprint.clone(),
        layer,
        seed,
        probe: ProbeConfig {
            seed,
            ..spec.probe.clone()
        },
        strata: stratified.then(|| spec.strata().bounds.clone()),
        token_budget: stratified.then_some(spec.token_budget),
    }
}

fn cell_path(cells_dir: &Path, identity: &CellIdentity) -> PathBuf {
    cells_dir.join(format!("{}.json", identity.digest()))
}

fn read_cached(path: &Path, identity: &CellIdentity) -> Option<CellRecord> {
    let text = fs::read_to_string(path).ok()?;
    let record: CellRecord = serde_json::from_str(&text).ok()?;
    (record.identity == *identity).then_some(record)
}

fn write_cell(path: &Path, record: &CellRecord) -> Result<()> {
    // Write-then-rename so a killed run never leaves a half-written cell.
    let tmp = path.with_extension("json.tmp");
    let json = serde_json::to_string_pretty(record).expect("cell serializes");
    fs::write(&tmp, json).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn run_group(
    spec: &ExperimentSpec,
    ws: &Workspace,
    group: &Group<'_>,
    cells_dir: &Path,
    budget: &AtomicUsize,
) -> (Vec<CellOutcome>, Vec<String>) {
    let mut outcomes: Vec<Option<CellOutcome>> = group
        .cells
        .iter()
        .map(|(_, id)| read_cached(&cell_path(cells_dir, id), id).map(|r| CellOutcome::Done(r, false)))
        .collect();
    if outcomes.iter().all(Option::is_some) {
        return (outcomes.into_iter().map(Option::unwrap).collect(), Vec::new());
    }

    let failure = |layer: Option<u32>, error: String| {
        CellOutcome::Failed(CellFailure {
            task: group.task,
            bundle: group.bundle.label.clone(),
            layer,
            seed: group.seed,
            error,
        })
    };

    let opts = BuildOptions {
        strata: spec.strata(),
        ..BuildOptions::with_seed(group.seed)
    };
    let dataset = match build_task(group.task, &ws.corpus, group.bundle.source.as_ref(), &opts) {
        Ok(ds) => ds,
        Err(e) => {
            let filled = outcomes
                .into_iter()
                .zip(&group.cells)
                .map(|(o, (layer, _))| o.unwrap_or_else(|| failure(Some(*layer), e.to_string())))
                .collect();
            return (filled, Vec::new());
        }
    };
    let warnings: Vec<String> = dataset
        .warnings
        .iter()
        .map(|w| format!("{} / {} / seed {}: {w}", group.task, group.bundle.label, group.seed))
        .collect();

    // Layers of one group share the dataset and train concurrently.
    outcomes
        .par_iter_mut()
        .zip(group.cells.par_iter())
        .filter(|(slot, _)| slot.is_none())
        .for_each(|(slot, (layer, identity))| {
            let granted = budget.fetch_update(Ordering::SeqCst, Ordering::SeqCst, |b| b.checked_sub(1)).is_ok();
            if !granted {
                *slot = Some(CellOutcome::Pending);
                return;
            }
            let result = match identity.kind {
                CellKind::Plain => run_plain_cell(&dataset, group.bundle.source.as_ref(), identity),
                CellKind::Stratified => run_stratified_cell(spec, &dataset, group.bundle.source.as_ref(), identity),
            };
            *slot = Some(match result.and_then(|record| {
                write_cell(&cell_path(cells_dir, identity), &record).map_err(|e| e.to_string())?;
                Ok(record)
            }) {
                Ok(record) => CellOutcome::Done(record, true),
                Err(e) => failure(Some(*layer), e),
            });
        });
    (outcomes.into_iter().map(Option::unwrap).collect(), warnings)
}

fn run_plain_cell(ds: &ProbingDataset, source: &dyn EmbeddingSource, identity: &CellIdentity) -> std::result::Result<CellRecord, String> {
    let data = materialize(ds, source, identity.layer).map_err(|e| e.to_string())?;
    let (_, report) = train(&identity.probe, &data).map_err(|e| e.to_string())?;
    Ok(CellRecord {
        identity: identity.clone(),
        test_accuracy: report.test_accuracy,
        best_epoch: report.best_epoch,
        epochs_run: report.epochs_run(),
        strata: None,
    })
}

fn run_stratified_cell(
    spec: &ExperimentSpec,
    ds: &ProbingDataset,
    source: &dyn EmbeddingSource,
    identity: &CellIdentity,
) -> std::result::Result<CellRecord, String> {
    let data = materialize(ds, source, identity.layer).map_err(|e| e.to_string())?;
    let (model, report) = train(&identity.probe, &data).map_err(|e| e.to_string())?;
    let strata = spec.strata();
    let parts = partition_by_stratum(ds, &strata)?;
    let last = strata.len() - 1;
    let mut per_stratum = Vec::with_capacity(strata.len());
    for (si, examples) in parts.into_iter().enumerate() {
        let label = strata.label(si);
        if examples.is_empty() {
            per_stratum.push((label, None));
            continue;
        }
        let budget = (si == last).then_some(spec.token_budget);
        let set = materialize_examples(&examples, source, identity.layer, budget).map_err(|e| e.to_string())?;
        let acc = evaluate(&model, &set).map_err(|e| e.to_string())?;
        per_stratum.push((label, Some(acc)));
    }
    Ok(CellRecord {
        identity: identity.clone(),
        test_accuracy: report.test_accuracy,
        best_epoch: report.best_epoch,
        epochs_run: report.epochs_run(),
        strata: Some(per_stratum),
    })
}

/// Test examples grouped by word-count stratum; counts between strata are left out.
pub fn partition_by_stratum(
    ds: &ProbingDataset,
    strata: &Strata,
) -> std::result::Result<Vec<Vec<crate::taskgen::ProbingExample>>, String> {
    let mut parts = vec![Vec::new(); strata.len()];
    for ex in ds.split(Split::Test) {
        let words = ex
            .word_count()
            .ok_or_else(|| format!("example from {:?} carries no word count", ex.doc_id()))?;
        if let Some(s) = strata.stratum_of(words) {
            parts[s].push(ex.clone());
        }
    }
    Ok(parts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Markdown,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(format!("unknown report format {other:?}")),
        }
    }
}

impl fmt::Display for ReportFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReportFormat::Markdown => "markdown",
            ReportFormat::Csv => "csv",
        })
    }
}

const FAMILIES: [TaskFamily; 3] = [TaskFamily::Surface, TaskFamily::Semantic, TaskFamily::Event];

/// Writes `results.md` or `results.csv` into `out_dir`.
pub fn render_report(table: &ResultTable, format: ReportFormat, out_dir: &Path) -> Result<PathBuf> {
    if table.is_empty() {
        return Err(RunnerError::EmptyTable);
    }
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let (name, body) = match format {
        ReportFormat::Markdown => ("results.md", markdown_report(table)),
        ReportFormat::Csv => ("results.csv", csv_report(table)),
    };
    let path = out_dir.join(name);
    fs::write(&path, body).map_err(io_err(&path))?;
    Ok(path)
}

pub fn markdown_report(table: &ResultTable) -> String {
    let mut out = String::from("# Probing results\n");
    for family in FAMILIES {
        let rows: Vec<&ResultRow> = table.rows.iter().filter(|r| r.task.family() == family).collect();
        if rows.is_empty() {
            continue;
        }
        out.push_str(&format!("\n## {}\n\n", family.title()));
        out.push_str("| Task | Bundle | Layer | Stratum | Accuracy (%) | Seeds |\n");
        out.push_str("|---|---|---:|---|---:|---:|\n");
        for r in rows {
            out.push_str(&format!(
                "| {} | {} | {} | {} | {:.2} ± {:.2} | {} |\n",
                r.task,
                r.bundle,
                r.layer,
                r.stratum,
                100.0 * r.mean_accuracy,
                100.0 * r.std_accuracy,
                r.n_seeds
            ));
        }
    }
    out
}

const CSV_FIXED: [&str; 7] = ["task", "bundle", "layer", "stratum", "mean_accuracy", "std_accuracy", "n_seeds"];

/// One row per cell with a `seed_<n>` column per seed; floats use the
/// shortest representation that parses back to the same value.
pub fn csv_report(table: &ResultTable) -> String {
    let seeds = table.seeds();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = CSV_FIXED.iter().map(|s| s.to_string()).collect();
    header.extend(seeds.iter().map(|s| format!("seed_{s}")));
    w.write_record(&header).expect("in-memory write");
    for r in &table.rows {
        let by_seed: BTreeMap<u64, f64> = r.per_seed.iter().map(|s| (s.seed, s.accuracy)).collect();
        let mut record = vec![
            r.task.to_string(),
            r.bundle.clone(),
            r.layer.to_string(),
            r.stratum.clone(),
            r.mean_accuracy.to_string(),
            r.std_accuracy.to_string(),
            r.n_seeds.to_string(),
        ];
        record.extend(seeds.iter().map(|s| by_seed.get(s).map(f64::to_string).unwrap_or_default()));
        w.write_record(&record).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

/// Parses a file written by [`csv_report`]; mean and std are recomputed from
/// the per-seed columns.
pub fn read_csv_report(path: &Path) -> Result<ResultTable> {
    let malformed = |reason: String| RunnerError::MalformedResults {
        path: path.to_path_buf(),
        reason,
    };
    let mut reader = csv::Reader::from_path(path).map_err(|e| malformed(e.to_string()))?;
    let header = reader.headers().map_err(|e| malformed(e.to_string()))?.clone();
    if header.len() < CSV_FIXED.len() || header.iter().zip(CSV_FIXED).any(|(a, b)| a != b) {
        return Err(malformed(format!("unexpected header {header:?}")));
    }
    let seeds: Vec<u64> = header
        .iter()
        .skip(CSV_FIXED.len())
        .map(|h| h.strip_prefix("seed_").and_then(|s| s.parse().ok()))
        .collect::<Option<_>>()
        .ok_or_else(|| malformed("seed columns must be named seed_<n>".into()))?;

    let mut table = ResultTable::default();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| malformed(e.to_string()))?;
        let field = |i: usize| record.get(i).unwrap_or("");
        let bad = |what: &str| malformed(format!("row {}: bad {what}", line + 1));
        let task: Task = field(0).parse().map_err(|_| bad("task"))?;
        let layer: u32 = field(2).parse().map_err(|_| bad("layer"))?;
        let mut per_seed = Vec::new();
        for (i, &seed) in seeds.iter().enumerate() {
            let cell = field(CSV_FIXED.len() + i);
            if !cell.is_empty() {
                let accuracy = cell.parse().map_err(|_| bad("accuracy"))?;
                per_seed.push(SeedAccuracy { seed, accuracy });
            }
        }
        table.rows.push(ResultRow::from_seeds(task, field(1), layer, field(3), per_seed));
    }
    Ok(table)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub task: Task,
    pub layer: u32,
    pub stratum: String,
    pub fulltext_mean: f64,
    pub sentcat_mean: f64,
    /// SentCat minus FullText.
    pub delta: f64,
    /// Root-sum-square of the two standard deviations.
    pub delta_std: f64,
}

/// Per-key accuracy difference between a SentCat and a FullText table.
/// Each table must hold at most one bundle per `(task, layer, stratum)`.
pub fn compare_modes(fulltext: &ResultTable, sentcat: &ResultTable) -> Result<Vec<DeltaRow>> {
    type Key = (Task, u32, String);
    fn index(table: &ResultTable, name: &str) -> Result<BTreeMap<Key, (f64, f64)>> {
        let mut map = BTreeMap::new();
        for r in &table.rows {
            let key = (r.task, r.layer, r.stratum.clone());
            if map.insert(key, (r.mean_accuracy, r.std_accuracy)).is_some() {
                return Err(RunnerError::KeyMismatch(format!(
                    "{name} table has several bundles for {} layer {} stratum {}",
                    r.task, r.layer, r.stratum
                )));
            }
        }
        Ok(map)
    }
    let full = index(fulltext, "FullText")?;
    let sent = index(sentcat, "SentCat")?;
    if let Some((t, l, s)) = full.keys().find(|k| !sent.contains_key(*k)) {
        return Err(RunnerError::KeyMismatch(format!("{t} layer {l} stratum {s} missing from SentCat")));
    }
    if let Some((t, l, s)) = sent.keys().find(|k| !full.contains_key(*k)) {
        return Err(RunnerError::KeyMismatch(format!("{t} layer {l} stratum {s} missing from FullText")));
    }
    // Follow the FullText table's row order.
    Ok(fulltext
        .rows
        .iter()
        .map(|r| {
            let (fm, fs) = full[&(r.task, r.layer, r.stratum.clone())];
            let (sm, ss) = sent[&(r.task, r.layer, r.stratum.clone())];
            DeltaRow {
                task: r.task,
                layer: r.layer,
                stratum: r.stratum.clone(),
                fulltext_mean: fm,
                sentcat_mean: sm,
                delta: sm - fm,
                delta_std: (fs * fs + ss * ss).sqrt(),
            }
        })
        .collect())
}

pub fn delta_csv(rows: &[DeltaRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["task", "layer", "stratum", "fulltext_mean", "sentcat_mean", "delta", "delta_std"])
        .expect("in-memory write");
    for r in rows {
        w.write_record([
            r.task.to_string(),
            r.layer.to_string(),
            r.stratum.clone(),
            r.fulltext_mean.to_string(),
            r.sentcat_mean.to_string(),
            r.delta.to_string(),
            r.delta_std.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(task: Task, layer: u32, accs: &[f64]) -> ResultRow {
        let per_seed = accs
            .iter()
            .enumerate()
            .map(|(i, &a)| SeedAccuracy {
                seed: i as u64,
                accuracy: a,
            })
            .collect();
        ResultRow::from_seeds(task, "b", layer, ALL_STRATA, per_seed)
    }

    #[test]
    fn constant_seeds_have_zero_std() {
        let r = row(Task::WordCt, 0, &[0.6, 0.6, 0.6]);
        assert!((r.mean_accuracy - 0.6).abs() < 1e-12);
        assert_eq!(r.std_accuracy, 0.0);
        assert_eq!(r.n_seeds, 3);
    }

    #[test]
    fn two_seed_population_std() {
        let r = row(Task::WordCt, 0, &[0.5, 0.7]);
        assert!((r.mean_accuracy - 0.6).abs() < 1e-12);
        assert!((r.std_accuracy - 0.1).abs() < 1e-12);
    }

    #[test]
    fn layers_keyword() {
        let all: LayerSelection = serde_json::from_str("\"all\"").unwrap();
        assert_eq!(all, LayerSelection::All);
        let list: LayerSelection = serde_json::from_str("[0, 7]").unwrap();
        assert_eq!(list, LayerSelection::List(vec![0, 7]));
        assert!(serde_json::from_str::<LayerSelection>("\"some\"").is_err());
        assert_eq!(serde_json::to_string(&LayerSelection::All).unwrap(), "\"all\"");
    }

    #[test]
    fn one_row_one_markdown_line() {
        let table = ResultTable {
            rows: vec![row(Task::IsArg, 7, &[0.8])],
        };
        let md = markdown_report(&table);
        assert_eq!(md.lines().filter(|l| l.starts_with("| IsArg")).count(), 1);
        assert!(md.contains("## Semantic information"));
    }

    #[test]
    fn identical_tables_have_zero_delta() {
        let table = ResultTable {
            rows: vec![row(Task::EvntCt, 12, &[0.4, 0.5]), row(Task::WordCt, 12, &[0.9])],
        };
        for d in compare_modes(&table, &table).unwrap() {
            assert_eq!(d.delta, 0.0);
        }
    }

    #[test]
    fn delta_of_means() {
        let full = ResultTable {
            rows: vec![row(Task::EvntCt, 12, &[0.65])],
        };
        let sent = ResultTable {
            rows: vec![row(Task::EvntCt, 12, &[0.70])],
        };
        let d = compare_modes(&full, &sent).unwrap();
        assert!((d[0].delta - 0.05).abs() < 1e-12);
    }

    #[test]
    fn missing_key_is_mismatch() {
        let full = ResultTable {
            rows: vec![row(Task::EvntCt, 12, &[0.65])],
        };
        let sent = ResultTable {
            rows: vec![row(Task::EvntCt, 11, &[0.70])],
        };
        assert!(matches!(compare_modes(&full, &sent), Err(RunnerError::KeyMismatch(_))));
    }

    #[test]
    fn spec_validation() {
        let json = r#"{"corpus_path": "c.json", "bundle_paths": ["a/ft"], "tasks": ["WordCt"], "output_dir": "out"}"#;
        let spec: ExperimentSpec = serde_json::from_str(json).unwrap();
        assert_eq!(spec.seeds, vec![0, 1, 2, 3, 4]);
        assert_eq!(spec.layers, LayerSelection::All);
        spec.validate().unwrap();
        let dup = ExperimentSpec {
            seeds: vec![1, 1],
            ..spec.clone()
        };
        assert!(dup.validate().is_err());
        let none = ExperimentSpec { seeds: vec![], ..spec };
        assert!(none.validate().is_err());
    }
}
