//! Workbench binary for budgeted dataset assemblage.
//!
//! Exit codes: 0 on success, 2 for configuration mistakes (bad flags,
//! missing required options, invalid parameter ranges), 3 for data problems
//! (unreadable files, malformed CSV, format violations).

mod experiment;
mod ingest;
mod workfiles;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use assemblage_core::exact::{exact_distinctiveness, exact_greedy};
use assemblage_core::metrics;
use assemblage_core::mlgreedy::{ml_greedy, ml_greedy_incremental, sce_aggregate_greedy};
use assemblage_core::nn::{EstimatorBundle, HyperParams, TrainConfig};
use assemblage_core::pipeline::{report_text, run_training, PipelineConfig};
use assemblage_core::summary::{summarize, SummaryParams};
use assemblage_core::tabular::Dataset;
use assemblage_core::workload::{synthetic_pool, PoolConfig};

use experiment::{CellConfig, CellMetrics, CellRecord};

#[derive(Parser)]
#[command(
    name = "assemblage",
    version,
    about = "Budgeted dataset assemblage: summarize datasets, train the estimator, \
             generate workloads, run selectors, and sweep experiment grids"
)]
struct Cli {
    /// Seed for every randomized step (pool synthesis, sampling, training).
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Pool CSV; its `name=numeric|categorical` sidecar is expected at the
    /// same path with a .schema extension unless a subcommand overrides it.
    #[arg(long, global = true)]
    pool: Option<PathBuf>,

    /// Output directory (created if absent).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a compact summary (.dsum) of the --pool dataset.
    Summarize(SummarizeArgs),
    /// Train an estimator bundle; writes bundle.dmdl, corpus.dcrp, report.txt.
    Train(TrainArgs),
    /// Generate a synthetic workload directory (owned + candidates + queries).
    GenWorkload(GenWorkloadArgs),
    /// Run one selector over a workload; writes selection.json.
    Assemble(AssembleArgs),
    /// Run every selector over a workload; writes report CSVs + manifest.
    Evaluate(EvaluateArgs),
    /// Run a grid of synthetic cells in parallel; writes report CSVs + manifest.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct SummarizeArgs {
    /// Trained estimator bundle (.dmdl).
    #[arg(long)]
    bundle: PathBuf,
    /// Schema sidecar; defaults to the pool path with a .schema extension.
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Storage cap in bytes for the summary's column-set projections.
    #[arg(long, default_value_t = 4096)]
    storage_limit: usize,
    /// Rows sampled when scoring column associations.
    #[arg(long, default_value_t = 2000)]
    correlation_rows: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Synthetic training pools to generate when no --pool is given.
    #[arg(long, default_value_t = 3)]
    pools: usize,
    /// Rows per synthetic training pool.
    #[arg(long, default_value_t = 50_000)]
    rows: usize,
    /// Schema sidecar for --pool; defaults to its .schema neighbor.
    #[arg(long)]
    schema: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    learning_rate: f64,
    /// Width of the per-tuple quantized code.
    #[arg(long, default_value_t = 256)]
    code_bits: u32,
    /// Bits granted to one column within a code.
    #[arg(long, default_value_t = 6)]
    max_col_bits: u32,
    /// Embedding width eta.
    #[arg(long, default_value_t = 32)]
    embed_dim: u32,
    /// Column sets kept per query during estimation.
    #[arg(long, default_value_t = 4)]
    max_sets: u32,
    /// Random queries drawn per pool before keeping the best-supported ones.
    #[arg(long, default_value_t = 300)]
    random_queries: usize,
    /// Examples for the merge-layer phase.
    #[arg(long, default_value_t = 1500)]
    merge_examples: usize,
}

#[derive(Args)]
struct GenWorkloadArgs {
    #[arg(long, default_value_t = 10_000)]
    rows: usize,
    #[arg(long, default_value_t = 20)]
    num_datasets: usize,
    #[arg(long, default_value_t = 20)]
    num_queries: usize,
    /// Minimum fraction of each dataset a query must match.
    #[arg(long, default_value_t = 0.05)]
    overlap: f64,
    /// Candidate size range as fractions of the pool.
    #[arg(long, default_value_t = 0.05)]
    s_min: f64,
    #[arg(long, default_value_t = 0.1)]
    s_max: f64,
    /// Budget as a fraction of the total candidate price.
    #[arg(long, default_value_t = 0.5)]
    b_ratio: f64,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum Algo {
    /// Exact greedy over raw tuples (ground truth).
    Exact,
    /// Greedy on the learned estimator with summary merging.
    Ml,
    /// Greedy on the learned estimator with exact summary re-extraction.
    MlIu,
    /// Greedy on the additive per-query baseline.
    SceAgg,
}

impl Algo {
    fn label(self) -> &'static str {
        match self {
            Algo::Exact => "exact",
            Algo::Ml => "ml",
            Algo::MlIu => "ml-iu",
            Algo::SceAgg => "sce-agg",
        }
    }
}

#[derive(Args)]
struct AssembleArgs {
    /// Workload directory produced by gen-workload.
    #[arg(long)]
    workload: PathBuf,
    #[arg(long, value_enum)]
    algo: Algo,
    /// Estimator bundle; required for every algorithm except exact.
    #[arg(long)]
    bundle: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    workload: PathBuf,
    #[arg(long)]
    bundle: PathBuf,
    /// Timing repetitions per selector; runtimes are the mean.
    #[arg(long, default_value_t = 5)]
    timing_runs: usize,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    bundle: PathBuf,
    /// Pool rows for every cell.
    #[arg(long, default_value_t = 10_000)]
    rows: usize,
    /// Grid axes; commas separate the values of one axis.
    #[arg(long, value_delimiter = ',', default_value = "0.5")]
    b_ratio: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "20")]
    num_datasets: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0.05")]
    overlap: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "20")]
    num_queries: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0.1")]
    s_max: Vec<f64>,
    /// Lower candidate-size fraction, shared by all cells.
    #[arg(long, default_value_t = 0.05)]
    s_min: f64,
    #[arg(long, default_value_t = 5)]
    timing_runs: usize,
}

/// Marker wrapped in anyhow for mistakes in how the tool was invoked, as
/// opposed to problems with the data it read. Decides the exit code.
#[derive(Debug)]
pub(crate) struct ConfigError(String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub(crate) fn config_error(message: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(ConfigError(message.into()))
}

struct Globals {
    seed: u64,
    pool: Option<PathBuf>,
    out: Option<PathBuf>,
}

impl Globals {
    fn out(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| config_error("--out is required for this command"))
    }

    fn pool(&self) -> Result<&Path> {
        self.pool
            .as_deref()
            .ok_or_else(|| config_error("--pool is required for this command"))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let config = e.chain().any(|c| c.downcast_ref::<ConfigError>().is_some());
            ExitCode::from(if config { 2 } else { 3 })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let Cli { seed, pool, out, command } = cli;
    let globals = Globals { seed, pool, out };
    match command {
        Command::Summarize(args) => cmd_summarize(&globals, args),
        Command::Train(args) => cmd_train(&globals, args),
        Command::GenWorkload(args) => cmd_gen_workload(&globals, args),
        Command::Assemble(args) => cmd_assemble(&globals, args),
        Command::Evaluate(args) => cmd_evaluate(&globals, args),
        Command::Sweep(args) => cmd_sweep(&globals, args),
    }
}

fn load_bundle(path: &Path) -> Result<EstimatorBundle> {
    let file = File::open(path)
        .with_context(|| format!("opening estimator bundle {}", path.display()))?;
    Ok(EstimatorBundle::load(&mut BufReader::new(file))?)
}

/// Loads a CSV dataset plus its schema sidecar; the dataset id is the file
/// stem.
fn load_pool(path: &Path, schema_override: Option<&Path>) -> Result<Dataset> {
    let sidecar = match schema_override {
        Some(p) => p.to_path_buf(),
        None => path.with_extension("schema"),
    };
    let id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .map(str::to_string)
        .ok_or_else(|| config_error(format!("{} has no usable file name", path.display())))?;
    let schema = Arc::new(ingest::read_sidecar(&sidecar)?);
    ingest::ingest_csv(path, schema, &id, 0.0)
}

fn cmd_summarize(globals: &Globals, args: SummarizeArgs) -> Result<()> {
    let pool_path = globals.pool()?;
    let out = globals.out()?;
    let dataset = load_pool(pool_path, args.schema.as_deref())?;
    let bundle = load_bundle(&args.bundle)?;
    let params = SummaryParams {
        storage_limit_bytes: args.storage_limit,
        correlation_sample_rows: args.correlation_rows,
        seed: globals.seed,
    };
    let summary = summarize(&dataset, &bundle, &params)?;

    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let path = out.join(format!("{}.dsum", dataset.id));
    let mut writer = BufWriter::new(File::create(&path)?);
    summary.save(&mut writer)?;
    println!(
        "wrote {} ({} tuples, {} column sets)",
        path.display(),
        summary.tuple_count,
        summary.entries().len()
    );
    Ok(())
}

fn cmd_train(globals: &Globals, args: TrainArgs) -> Result<()> {
    let out = globals.out()?;
    let pools: Vec<Dataset> = match globals.pool.as_deref() {
        Some(path) => vec![load_pool(path, args.schema.as_deref())?],
        None => {
            if args.pools == 0 {
                return Err(config_error("--pools must be positive"));
            }
            let mut pools = Vec::with_capacity(args.pools);
            for i in 0..args.pools {
                pools.push(synthetic_pool(&PoolConfig {
                    rows: args.rows,
                    seed: globals.seed.wrapping_add(i as u64),
                    ..PoolConfig::default()
                })?);
            }
            pools
        }
    };

    let hyper = HyperParams {
        code_bits: args.code_bits,
        max_col_bits: args.max_col_bits,
        embed_dim: args.embed_dim,
        max_sets: args.max_sets,
    };
    let pipeline_cfg = PipelineConfig {
        random_queries: args.random_queries,
        merge_examples: args.merge_examples,
        seed: globals.seed,
        ..PipelineConfig::default()
    };
    let train_cfg = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch_size,
        learning_rate: args.learning_rate,
        seed: globals.seed,
        ..TrainConfig::default()
    };
    let trained = run_training(&pools, hyper, &train_cfg, &pipeline_cfg)?;

    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut writer = BufWriter::new(File::create(out.join("bundle.dmdl"))?);
    trained.bundle.save(&mut writer)?;
    let mut writer = BufWriter::new(File::create(out.join("corpus.dcrp"))?);
    trained.corpus.save(&mut writer)?;
    let report = report_text(&trained);
    fs::write(out.join("report.txt"), &report)?;
    print!("{report}");
    println!("wrote bundle.dmdl, corpus.dcrp, report.txt to {}", out.display());
    Ok(())
}

fn cmd_gen_workload(globals: &Globals, args: GenWorkloadArgs) -> Result<()> {
    let out = globals.out()?;
    let cfg = CellConfig {
        rows: args.rows,
        b_ratio: args.b_ratio,
        num_datasets: args.num_datasets,
        overlap: args.overlap,
        num_queries: args.num_queries,
        s_min: args.s_min,
        s_max: args.s_max,
        seed: globals.seed,
    };
    let data = experiment::synthesize(&cfg)?;
    workfiles::save_workload(out, &data, globals.seed, args.b_ratio, args.overlap)?;
    println!(
        "wrote workload to {} ({} candidates, {} queries, budget {:.2})",
        out.display(),
        data.candidates.len(),
        data.queries.queries().len(),
        data.budget
    );
    Ok(())
}

#[derive(Serialize)]
struct TraceEntry<'a> {
    dataset: &'a str,
    gain_per_price: f64,
}

#[derive(Serialize)]
struct SelectionReport<'a> {
    algo: &'a str,
    budget: f64,
    selected: &'a [String],
    total_price: f64,
    /// The selector's own value for its selection: exact for `exact`,
    /// estimated for the learned algorithms.
    reported_value: f64,
    /// Exact distinctiveness of the selection, recomputed from raw tuples.
    exact_value: f64,
    trace: Vec<TraceEntry<'a>>,
}

fn cmd_assemble(globals: &Globals, args: AssembleArgs) -> Result<()> {
    let out = globals.out()?;
    if args.algo != Algo::Exact && args.bundle.is_none() {
        return Err(config_error(format!(
            "--bundle is required for --algo {}",
            args.algo.label()
        )));
    }
    let data = workfiles::load_workload(&args.workload)?;

    let result = match args.algo {
        Algo::Exact => exact_greedy(&data.candidates, &data.owned, &data.queries, data.budget)?,
        learned => {
            let bundle = load_bundle(args.bundle.as_deref().expect("checked above"))?;
            let params = experiment::experiment_summary_params(globals.seed);
            let (owned_summary, candidates) =
                experiment::summarize_candidates(&data, &bundle, &params)?;
            match learned {
                Algo::Ml => {
                    ml_greedy(&bundle, &data.queries, &owned_summary, &candidates, data.budget)?
                        .result
                }
                Algo::MlIu => {
                    let refs: Vec<&Dataset> = data.candidates.iter().collect();
                    ml_greedy_incremental(
                        &bundle,
                        &data.queries,
                        &data.owned,
                        &owned_summary,
                        &candidates,
                        &refs,
                        data.budget,
                    )?
                    .result
                }
                Algo::SceAgg => sce_aggregate_greedy(
                    &bundle,
                    &data.queries,
                    &owned_summary,
                    &candidates,
                    data.budget,
                )?,
                Algo::Exact => unreachable!("handled by the outer match"),
            }
        }
    };

    let selection: Vec<&Dataset> = data
        .candidates
        .iter()
        .filter(|d| result.selected.contains(&d.id))
        .collect();
    let exact_value = exact_distinctiveness(&selection, &data.owned, &data.queries)? as f64;

    let report = SelectionReport {
        algo: args.algo.label(),
        budget: data.budget,
        selected: &result.selected,
        total_price: result.total_price,
        reported_value: result.distinctiveness,
        exact_value,
        trace: result
            .trace
            .iter()
            .map(|t| TraceEntry { dataset: &t.dataset_id, gain_per_price: t.gain_per_price })
            .collect(),
    };
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let json = serde_json::to_string_pretty(&report)?;
    fs::write(out.join("selection.json"), json + "\n")?;
    println!(
        "{}: selected {:?}, price {:.2} of budget {:.2}, exact distinctiveness {}",
        args.algo.label(),
        result.selected,
        result.total_price,
        data.budget,
        exact_value
    );
    Ok(())
}

fn cmd_evaluate(globals: &Globals, args: EvaluateArgs) -> Result<()> {
    let out = globals.out()?;
    if args.timing_runs == 0 {
        return Err(config_error("--timing-runs must be positive"));
    }
    let bundle = load_bundle(&args.bundle)?;
    let data = workfiles::load_workload(&args.workload)?;
    let metrics = experiment::run_cell(&data, &bundle, args.timing_runs, globals.seed)?;

    let config = serde_json::json!({
        "workload": args.workload.display().to_string(),
        "budget": data.budget,
        "num_datasets": data.candidates.len(),
        "num_queries": data.queries.queries().len(),
    });
    let record = CellRecord { config, metrics };
    experiment::write_reports(out, "evaluate", globals.seed, &[record])?;
    println!("wrote dratio.csv, qerror.csv, runtime.csv, manifest.json to {}", out.display());
    Ok(())
}

fn cmd_sweep(globals: &Globals, args: SweepArgs) -> Result<()> {
    let out = globals.out()?;
    if args.timing_runs == 0 {
        return Err(config_error("--timing-runs must be positive"));
    }
    let bundle = load_bundle(&args.bundle)?;

    let mut configs = Vec::new();
    for &b_ratio in &args.b_ratio {
        for &num_datasets in &args.num_datasets {
            for &overlap in &args.overlap {
                for &num_queries in &args.num_queries {
                    for &s_max in &args.s_max {
                        configs.push(CellConfig {
                            rows: args.rows,
                            b_ratio,
                            num_datasets,
                            overlap,
                            num_queries,
                            s_min: args.s_min,
                            s_max,
                            seed: globals.seed,
                        });
                    }
                }
            }
        }
    }
    // Reject bad axis values before any cell starts computing.
    for cfg in &configs {
        cfg.validate()?;
    }

    let timing_runs = args.timing_runs;
    let results: Vec<Result<CellMetrics>> = std::thread::scope(|scope| {
        let bundle = &bundle;
        let handles: Vec<_> = configs
            .iter()
            .map(|cfg| {
                scope.spawn(move || -> Result<CellMetrics> {
                    let data = experiment::synthesize(cfg)?;
                    experiment::run_cell(&data, bundle, timing_runs, cfg.seed)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("cell thread panicked"))
            .collect()
    });

    let mut records = Vec::with_capacity(configs.len());
    for (cfg, result) in configs.iter().zip(results) {
        records.push(CellRecord { config: serde_json::to_value(cfg)?, metrics: result? });
    }
    experiment::write_reports(out, "sweep", globals.seed, &records)?;

    let mut by_algo: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for record in &records {
        for (algo, value) in &record.metrics.dratio {
            by_algo.entry(algo).or_default().push(*value);
        }
    }
    for (algo, values) in &by_algo {
        if let Some(mean) = metrics::mean(values) {
            println!("{algo}: mean dratio {mean:.4} over {} cells", values.len());
        }
    }
    println!("wrote {} cells to {}", records.len(), out.display());
    Ok(())
}
