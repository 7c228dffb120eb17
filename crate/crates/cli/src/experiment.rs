//! Experiment cells: run every selector over one workload, compare each
//! selection's exact distinctiveness against the exact-greedy ground truth,
//! profile estimation q-errors, and time the selectors.

use std::fs;
use std::path::Path;
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use assemblage_core::estimator::EstimationContext;
use assemblage_core::exact::{exact_distinctiveness, exact_greedy};
use assemblage_core::metrics::{error_profile, q_error, quality_ratio, ErrorProfile};
use assemblage_core::mlgreedy::{
    ml_greedy, ml_greedy_incremental, sce_aggregate_greedy, CandidateSummary,
};
use assemblage_core::nn::EstimatorBundle;
use assemblage_core::summary::{summarize, DataSummary, SummaryParams};
use assemblage_core::tabular::Dataset;
use assemblage_core::workload::{
    draw_query_set, generate_candidates, generate_query_pool, synthetic_pool, CandidateGenConfig,
    ExperimentConfig, PoolConfig, QueryGenConfig,
};

use crate::workfiles::WorkloadData;

/// Knobs for one synthetic experiment cell. A single `evaluate` run uses the
/// same machinery with one cell.
#[derive(Debug, Clone, Serialize)]
pub struct CellConfig {
    pub rows: usize,
    pub b_ratio: f64,
    pub num_datasets: usize,
    pub overlap: f64,
    pub num_queries: usize,
    pub s_min: f64,
    pub s_max: f64,
    pub seed: u64,
}

impl CellConfig {
    pub fn to_experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            b_ratio: self.b_ratio,
            num_queries: self.num_queries,
            num_datasets: self.num_datasets,
            ol: self.overlap,
            s_min: self.s_min,
            s_max: self.s_max,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.to_experiment()
            .validate()
            .map_err(|e| crate::config_error(e.to_string()))?;
        if self.rows == 0 {
            return Err(crate::config_error("rows must be positive"));
        }
        Ok(())
    }
}

/// Builds the cell's pool, candidate split, query set, and budget.
pub fn synthesize(cfg: &CellConfig) -> Result<WorkloadData> {
    cfg.validate()?;
    let exp = cfg.to_experiment();
    let pool = synthetic_pool(&PoolConfig {
        rows: cfg.rows,
        seed: cfg.seed,
        ..PoolConfig::default()
    })?;
    let (owned, candidates) = generate_candidates(
        &pool,
        &CandidateGenConfig {
            num_datasets: cfg.num_datasets,
            s_min: cfg.s_min,
            s_max: cfg.s_max,
            seed: cfg.seed,
        },
    )?;
    let budget = exp.budget_for(&candidates);

    let mut all: Vec<&Dataset> = Vec::with_capacity(candidates.len() + 1);
    all.push(&owned);
    all.extend(candidates.iter());
    let pairs = generate_query_pool(
        &all,
        &QueryGenConfig {
            ol: cfg.overlap,
            pool_pairs: (cfg.num_queries / 2).max(1) * 3,
            max_attempts: 100_000,
            seed: cfg.seed,
        },
    )?;
    let queries = draw_query_set(&pairs, cfg.num_queries, cfg.seed)?;

    Ok(WorkloadData { owned, candidates, queries, budget })
}

/// Summarization settings for selection experiments. The storage cap is
/// lifted so every identified column set is kept; the 4 KB default exists
/// for grounding summaries at warehouse scale and would starve desk-scale
/// experiments of the column sets their queries touch.
pub fn experiment_summary_params(seed: u64) -> SummaryParams {
    SummaryParams {
        storage_limit_bytes: usize::MAX,
        correlation_sample_rows: 2000,
        seed,
    }
}

pub fn summarize_candidates(
    data: &WorkloadData,
    bundle: &EstimatorBundle,
    params: &SummaryParams,
) -> Result<(DataSummary, Vec<CandidateSummary>)> {
    let owned = summarize(&data.owned, bundle, params)
        .with_context(|| format!("summarizing {}", data.owned.id))?;
    let mut candidates = Vec::with_capacity(data.candidates.len());
    for d in &data.candidates {
        candidates.push(CandidateSummary {
            id: d.id.clone(),
            price: d.price,
            summary: summarize(d, bundle, params).with_context(|| format!("summarizing {}", d.id))?,
        });
    }
    Ok((owned, candidates))
}

/// All metrics from one cell. Algorithm and estimator labels are the rows of
/// the report CSVs.
pub struct CellMetrics {
    pub dratio: Vec<(String, f64)>,
    /// (estimator label, sample count, five-number q-error summary).
    pub qerror: Vec<(String, usize, ErrorProfile)>,
    pub runtime_ms: Vec<(String, f64)>,
    /// Candidates whose exact matched-union count is zero are excluded from
    /// q-error (the metric needs a positive truth).
    pub zero_truth_skipped: usize,
}

pub fn run_cell(
    data: &WorkloadData,
    bundle: &EstimatorBundle,
    timing_runs: usize,
    seed: u64,
) -> Result<CellMetrics> {
    let runs = timing_runs.max(1);
    let params = experiment_summary_params(seed);
    let (owned_summary, cand_summaries) = summarize_candidates(data, bundle, &params)?;
    let dataset_refs: Vec<&Dataset> = data.candidates.iter().collect();

    let (exact_result, t_exact) = timed(runs, || {
        exact_greedy(&data.candidates, &data.owned, &data.queries, data.budget)
    })?;
    let ground_truth = exact_result.distinctiveness;

    let (ml_out, t_ml) = timed(runs, || {
        ml_greedy(bundle, &data.queries, &owned_summary, &cand_summaries, data.budget)
    })?;
    let (iu_out, t_iu) = timed(runs, || {
        ml_greedy_incremental(
            bundle,
            &data.queries,
            &data.owned,
            &owned_summary,
            &cand_summaries,
            &dataset_refs,
            data.budget,
        )
    })?;
    let (sce_result, t_sce) = timed(runs, || {
        sce_aggregate_greedy(bundle, &data.queries, &owned_summary, &cand_summaries, data.budget)
    })?;

    let exact_value_of = |ids: &[String]| -> Result<f64> {
        let selection: Vec<&Dataset> = data
            .candidates
            .iter()
            .filter(|d| ids.contains(&d.id))
            .collect();
        Ok(exact_distinctiveness(&selection, &data.owned, &data.queries)? as f64)
    };
    let dratio = vec![
        ("exact".to_string(), quality_ratio(ground_truth, ground_truth)?),
        (
            "ml".to_string(),
            quality_ratio(exact_value_of(&ml_out.result.selected)?, ground_truth)?,
        ),
        (
            "ml-iu".to_string(),
            quality_ratio(exact_value_of(&iu_out.result.selected)?, ground_truth)?,
        ),
        (
            "sce-agg".to_string(),
            quality_ratio(exact_value_of(&sce_result.selected)?, ground_truth)?,
        ),
    ];

    // Per-candidate estimation error against the candidate's exact matched
    // union, for the learned estimator and the additive per-query baseline.
    let summary_refs: Vec<&DataSummary> = cand_summaries.iter().map(|c| &c.summary).collect();
    let ctx = EstimationContext::new(bundle, &data.queries, &owned_summary, &summary_refs)?;
    let mut learned_errors = Vec::new();
    let mut baseline_errors = Vec::new();
    let mut zero_truth_skipped = 0usize;
    for (dataset, cand) in data.candidates.iter().zip(&cand_summaries) {
        let truth = exact_distinctiveness(&[], dataset, &data.queries)? as f64;
        if truth <= 0.0 {
            zero_truth_skipped += 1;
            continue;
        }
        let learned = ctx.estimate(&cand.summary, cand.summary.tuple_count as f64)?;
        let baseline = ctx.baseline_sce_aggregate(&[&cand.summary])?;
        learned_errors.push(q_error(learned, truth)?);
        baseline_errors.push(q_error(baseline, truth)?);
    }
    let mut qerror = Vec::new();
    if let Some(profile) = error_profile(&mut learned_errors) {
        qerror.push(("learned".to_string(), learned_errors.len(), profile));
    }
    if let Some(profile) = error_profile(&mut baseline_errors) {
        qerror.push(("sce-aggregate".to_string(), baseline_errors.len(), profile));
    }

    let runtime_ms = vec![
        ("exact".to_string(), t_exact),
        ("ml".to_string(), t_ml),
        ("ml-iu".to_string(), t_iu),
        ("sce-agg".to_string(), t_sce),
    ];
    Ok(CellMetrics { dratio, qerror, runtime_ms, zero_truth_skipped })
}

/// Runs `f` the given number of times, returning the last value and the mean
/// wall-clock milliseconds. Only the selector call sits inside the timer.
fn timed<T, E>(runs: usize, mut f: impl FnMut() -> Result<T, E>) -> Result<(T, f64)>
where
    E: std::error::Error + Send + Sync + 'static,
{
    let mut total_ms = 0.0;
    let mut last = None;
    for _ in 0..runs {
        let start = Instant::now();
        let value = f()?;
        total_ms += start.elapsed().as_secs_f64() * 1e3;
        last = Some(value);
    }
    Ok((last.expect("runs >= 1"), total_ms / runs as f64))
}

/// One finished cell paired with the configuration that produced it, as it
/// should appear in the report manifest.
pub struct CellRecord {
    pub config: serde_json::Value,
    pub metrics: CellMetrics,
}

#[derive(Serialize)]
struct FileDigest {
    file: String,
    sha256: String,
}

#[derive(Serialize)]
struct ReportManifest<'a> {
    command: &'a str,
    seed: u64,
    cells: Vec<&'a serde_json::Value>,
    zero_truth_skipped: Vec<usize>,
    /// Deterministic outputs: byte-identical given the same pool, manifest
    /// configuration, and seed.
    metric_files: Vec<FileDigest>,
    /// Wall-clock measurements, excluded from the reproducibility guarantee.
    runtime_files: Vec<String>,
}

/// Writes dratio.csv, qerror.csv, runtime.csv, and manifest.json into `out`.
pub fn write_reports(out: &Path, command: &str, seed: u64, cells: &[CellRecord]) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    let dratio_path = out.join("dratio.csv");
    let mut w = csv::Writer::from_path(&dratio_path)?;
    w.write_record(["cell", "algo", "dratio"])?;
    for (i, cell) in cells.iter().enumerate() {
        for (algo, value) in &cell.metrics.dratio {
            w.write_record([&i.to_string(), algo, &value.to_string()])?;
        }
    }
    w.flush()?;

    let qerror_path = out.join("qerror.csv");
    let mut w = csv::Writer::from_path(&qerror_path)?;
    w.write_record(["cell", "estimator", "count", "min", "p25", "median", "p75", "max"])?;
    for (i, cell) in cells.iter().enumerate() {
        for (estimator, count, p) in &cell.metrics.qerror {
            w.write_record([
                &i.to_string(),
                estimator,
                &count.to_string(),
                &p.min.to_string(),
                &p.p25.to_string(),
                &p.median.to_string(),
                &p.p75.to_string(),
                &p.max.to_string(),
            ])?;
        }
    }
    w.flush()?;

    let runtime_path = out.join("runtime.csv");
    let mut w = csv::Writer::from_path(&runtime_path)?;
    w.write_record(["cell", "algo", "mean_ms"])?;
    for (i, cell) in cells.iter().enumerate() {
        for (algo, ms) in &cell.metrics.runtime_ms {
            w.write_record([&i.to_string(), algo, &format!("{ms:.3}")])?;
        }
    }
    w.flush()?;

    let manifest = ReportManifest {
        command,
        seed,
        cells: cells.iter().map(|c| &c.config).collect(),
        zero_truth_skipped: cells.iter().map(|c| c.metrics.zero_truth_skipped).collect(),
        metric_files: vec![
            FileDigest {
                file: "dratio.csv".to_string(),
                sha256: sha256_hex(&fs::read(&dratio_path)?),
            },
            FileDigest {
                file: "qerror.csv".to_string(),
                sha256: sha256_hex(&fs::read(&qerror_path)?),
            },
        ],
        runtime_files: vec!["runtime.csv".to_string()],
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(out.join("manifest.json"), json + "\n")
        .with_context(|| format!("writing {}", out.join("manifest.json").display()))?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
