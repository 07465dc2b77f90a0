use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use docprobe::corpus::{parse_corpus, split_documents, CorpusFormat};
use docprobe::embedstore::{read_bundle, EmbeddingSource};
use docprobe::probe::{train_probe, ProbeConfig};
use docprobe::runner::{
    compare_modes, delta_csv, render_report, run_experiment_with, stratified_eval_with, ExperimentSpec, ReportFormat,
    ResultTable, RunOptions, SweepOutcome, Workspace, RESULTS_FILE,
};
use docprobe::taskgen::{build_task, read_dataset, write_dataset, BuildOptions, Task};

#[derive(Parser)]
#[command(name = "docprobe", version, about = "Probe document-level encoder representations for IE information")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build probing datasets from a corpus and an embedding bundle.
    BuildTasks(BuildTasksArgs),
    /// Train one probe on a built dataset.
    Train(TrainArgs),
    /// Run every (task, bundle, layer, seed) cell of an experiment spec.
    Sweep(SweepArgs),
    /// Evaluate document-level tasks per word-count stratum.
    Stratify(StratifyArgs),
    /// Render a results directory as markdown or CSV.
    Report(ReportArgs),
    /// Difference between a SentCat and a FullText result table.
    Compare(CompareArgs),
}

#[derive(Args)]
struct BuildTasksArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = "muc")]
    format: CorpusFormat,
    #[arg(long)]
    bundle: PathBuf,
    /// Task name; repeat for several. Defaults to all eight tasks.
    #[arg(long = "task")]
    tasks: Vec<Task>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Seed for splitting corpora that carry no split.
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset manifest or the directory holding it.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    bundle: PathBuf,
    /// Encoder layer; defaults to the last stored layer.
    #[arg(long)]
    layer: Option<u32>,
    #[arg(long, default_value_t = 400)]
    nhid: usize,
    #[arg(long, default_value_t = 0.0)]
    dropout: f64,
    #[arg(long = "batch", default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 1000)]
    max_epoch: usize,
    #[arg(long, default_value_t = 10)]
    tenacity: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Where to write the checkpoint and report.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    spec: PathBuf,
    /// Stop after training this many new cells.
    #[arg(long)]
    max_new_cells: Option<usize>,
}

#[derive(Args)]
struct StratifyArgs {
    #[arg(long)]
    spec: PathBuf,
    /// Comma-separated word-count boundaries.
    #[arg(long, value_delimiter = ',', default_value = "209,420,431")]
    bounds: Vec<usize>,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory holding results.json.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value = "markdown")]
    format: ReportFormat,
    /// Output directory; defaults to the input directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    fulltext: PathBuf,
    #[arg(long)]
    sentcat: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

type AnyError = Box<dyn std::error::Error>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::BuildTasks(a) => build_tasks(a),
        Command::Train(a) => train_cmd(a),
        Command::Sweep(a) => sweep(a),
        Command::Stratify(a) => stratify(a),
        Command::Report(a) => report(a),
        Command::Compare(a) => compare(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn build_tasks(a: BuildTasksArgs) -> Result<bool, AnyError> {
    let mut corpus = parse_corpus(&a.corpus, a.format)?;
    if !corpus.is_split() {
        corpus = split_documents(corpus, (0.8, 0.1, 0.1), a.split_seed)?;
    }
    let bundle = read_bundle(&a.bundle)?;
    let tasks = if a.tasks.is_empty() { Task::DEFAULT_SET.to_vec() } else { a.tasks };
    let opts = BuildOptions::with_seed(a.seed);
    let mut all_ok = true;
    for task in tasks {
        match build_task(task, &corpus, &bundle, &opts) {
            Ok(ds) => {
                for w in &ds.warnings {
                    warn!("{task}: {w}");
                }
                let path = write_dataset(&ds, &a.out)?;
                info!(
                    "{task}: {} examples ({} dropped, {} skipped) -> {}",
                    ds.len(),
                    ds.dropped_count(),
                    ds.skipped_count(),
                    path.display()
                );
            }
            Err(e) => {
                warn!("{task}: {e}");
                all_ok = false;
            }
        }
    }
    Ok(all_ok)
}

fn train_cmd(a: TrainArgs) -> Result<bool, AnyError> {
    let dataset = read_dataset(&a.dataset)?;
    let bundle = read_bundle(&a.bundle)?;
    let layer = match a.layer {
        Some(l) => l,
        None => *bundle.layer_ids().last().ok_or("bundle stores no layers")?,
    };
    let config = ProbeConfig {
        nhid: a.nhid,
        dropout: a.dropout,
        batch_size: a.batch_size,
        max_epoch: a.max_epoch,
        tenacity: a.tenacity,
        learning_rate: a.lr,
        seed: a.seed,
        ..ProbeConfig::default()
    };
    let (model, report) = train_probe(&config, &dataset, &bundle, layer)?;
    let json = serde_json::to_string_pretty(&report)?;
    if let Some(out) = &a.out {
        std::fs::create_dir_all(out)?;
        let stem = format!("{}.layer{layer}.seed{}", dataset.task, a.seed);
        model.save(&out.join(format!("{stem}.dpm")))?;
        std::fs::write(out.join(format!("{stem}.report.json")), &json)?;
    }
    println!("{json}");
    Ok(true)
}

fn finish_sweep(outcome: &SweepOutcome, out_dir: &Path) -> Result<bool, AnyError> {
    for w in &outcome.warnings {
        warn!("{w}");
    }
    for f in &outcome.failures {
        warn!("failed cell {} / {} / layer {:?} / seed {}: {}", f.task, f.bundle, f.layer, f.seed, f.error);
    }
    info!(
        "{} cells computed, {} cached, {} failed, {} pending",
        outcome.computed,
        outcome.cached,
        outcome.failures.len(),
        outcome.pending
    );
    if !outcome.table.is_empty() {
        for format in [ReportFormat::Markdown, ReportFormat::Csv] {
            let path = render_report(&outcome.table, format, out_dir)?;
            info!("wrote {}", path.display());
        }
    }
    Ok(outcome.is_complete())
}

fn sweep(a: SweepArgs) -> Result<bool, AnyError> {
    let spec = ExperimentSpec::from_json_file(&a.spec)?;
    let ws = Workspace::load(&spec)?;
    let opts = RunOptions {
        max_new_cells: a.max_new_cells,
    };
    let outcome = run_experiment_with(&spec, &ws, opts)?;
    finish_sweep(&outcome, &spec.output_dir)
}

fn stratify(a: StratifyArgs) -> Result<bool, AnyError> {
    let mut spec = ExperimentSpec::from_json_file(&a.spec)?;
    spec.strata = Some(a.bounds);
    spec.output_dir = spec.output_dir.join("stratified");
    spec.validate()?;
    let ws = Workspace::load(&spec)?;
    let outcome = stratified_eval_with(&spec, &ws, RunOptions::default())?;
    finish_sweep(&outcome, &spec.output_dir)
}

fn report(a: ReportArgs) -> Result<bool, AnyError> {
    let table = ResultTable::read_json(&a.input.join(RESULTS_FILE))?;
    let out = a.out.unwrap_or(a.input);
    let path = render_report(&table, a.format, &out)?;
    info!("wrote {}", path.display());
    Ok(true)
}

fn compare(a: CompareArgs) -> Result<bool, AnyError> {
    let full = ResultTable::read_json(&a.fulltext)?;
    let sent = ResultTable::read_json(&a.sentcat)?;
    let rows = compare_modes(&full, &sent)?;
    std::fs::write(&a.out, delta_csv(&rows))?;
    info!("wrote {} rows to {}", rows.len(), a.out.display());
    Ok(true)
}
