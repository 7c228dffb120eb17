//! Budget-constrained selection over data summaries.
//!
//! The main selector mirrors the exact greedy loop but never touches raw
//! tuples: candidate summaries are speculatively merged into the running
//! summary, estimated, and the best gain-per-price candidate is kept. The
//! running distinctiveness is reconstructed additively from accepted gains,
//! and a best-single-dataset fallback from the first pass guards the result.
//!
//! Two baseline selectors share the loop: one merges summaries exactly by
//! re-averaging row embeddings over the deduplicated union (slow, touches
//! tuples), the other scores datasets by overlap-blind per-query sums.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use crate::estimator::{merge_summaries, EstimationContext, EstimatorError};
use crate::exact::{AssemblageResult, TraceStep};
use crate::nn::EstimatorBundle;
use crate::summary::{DataSummary, SummaryEntry};
use crate::tabular::{Dataset, QuerySet, TupleSet};

/// A candidate as the pure selector sees it: identity, price, and summary —
/// no rows.
#[derive(Debug, Clone)]
pub struct CandidateSummary {
    pub id: String,
    pub price: f64,
    pub summary: DataSummary,
}

/// Selector output plus diagnostics that only the summary path can provide.
#[derive(Debug, Clone)]
pub struct MlOutcome {
    pub result: AssemblageResult,
    /// First-pass estimate of each candidate merged alone into the owned
    /// summary (the fallback pool).
    pub single_estimates: BTreeMap<String, f64>,
    /// Re-estimate of the final greedy summary state, for measuring how far
    /// the additive running value drifts from direct estimation.
    pub direct_estimate: f64,
}

/// Running selection state; `union` is only maintained by the exact-merge
/// variant.
#[derive(Clone)]
struct SelectionState {
    summary: DataSummary,
    count: f64,
    union: Option<TupleSet>,
}

fn validate(candidates: &[CandidateSummary]) -> Result<(), MlGreedyError> {
    if candidates.is_empty() {
        return Err(MlGreedyError::EmptyCandidates);
    }
    let mut seen = BTreeMap::new();
    for c in candidates {
        if !(c.price > 0.0) {
            return Err(MlGreedyError::NonPositivePrice(c.id.clone()));
        }
        if seen.insert(c.id.as_str(), ()).is_some() {
            return Err(MlGreedyError::DuplicateId(c.id.clone()));
        }
    }
    Ok(())
}

/// The greedy skeleton shared by every summary-driven selector. Per
/// iteration every remaining candidate is merged (speculatively) and
/// estimated; the strictly best positive gain per price wins, lexicographic
/// smaller id on ties (scan order). The winner is added when affordable and
/// removed from contention either way; no positive gain ends the loop. The
/// final answer falls back to the best affordable first-pass singleton when
/// that strictly beats the accumulated value.
fn greedy_loop<M, E>(
    candidates: &[CandidateSummary],
    init: SelectionState,
    budget: f64,
    mut merge: M,
    mut estimate: E,
) -> Result<MlOutcome, MlGreedyError>
where
    M: FnMut(&SelectionState, &str) -> Result<SelectionState, MlGreedyError>,
    E: FnMut(&SelectionState) -> Result<f64, MlGreedyError>,
{
    validate(candidates)?;
    let prices: BTreeMap<&str, f64> = candidates.iter().map(|c| (c.id.as_str(), c.price)).collect();

    let mut running = estimate(&init)?;
    let mut state = init;
    let mut spent = 0.0;
    let mut selected: Vec<String> = Vec::new();
    let mut trace = Vec::new();
    let mut first_pass: BTreeMap<String, f64> = BTreeMap::new();
    let mut remaining: Vec<&str> = prices.keys().copied().collect();

    while !remaining.is_empty() {
        let mut g_star = 0.0;
        let mut best: Option<(usize, SelectionState)> = None;
        for (pos, id) in remaining.iter().enumerate() {
            let merged = merge(&state, id)?;
            let value = estimate(&merged)?;
            if selected.is_empty() {
                first_pass.insert((*id).to_string(), value);
            }
            let gain = (value - running) / prices[id];
            if gain > g_star {
                g_star = gain;
                best = Some((pos, merged));
            }
        }
        let Some((pos, merged)) = best else {
            break;
        };
        let id = remaining.remove(pos);
        trace.push(TraceStep {
            dataset_id: id.to_string(),
            gain_per_price: g_star,
        });
        let price = prices[id];
        if spent + price <= budget {
            state = merged;
            spent += price;
            selected.push(id.to_string());
            running += g_star * price;
        }
    }

    let direct_estimate = estimate(&state)?;

    let fallback = candidates
        .iter()
        .filter(|c| c.price <= budget)
        .filter_map(|c| first_pass.get(&c.id).map(|&v| (c, v)))
        .max_by(|(a, va), (b, vb)| {
            va.partial_cmp(vb)
                .expect("estimates are finite")
                .then_with(|| b.id.cmp(&a.id))
        });
    let result = match fallback {
        Some((best_single, value)) if running < value => AssemblageResult {
            selected: vec![best_single.id.clone()],
            total_price: best_single.price,
            distinctiveness: value,
            trace,
        },
        _ => AssemblageResult {
            selected,
            total_price: spent,
            distinctiveness: running,
            trace,
        },
    };
    Ok(MlOutcome {
        result,
        single_estimates: first_pass,
        direct_estimate,
    })
}

/// The summary-only selector: learned merging, learned estimation, running
/// tuple counts that add candidate sizes without deduplication.
pub fn ml_greedy(
    bundle: &EstimatorBundle,
    queries: &QuerySet,
    owned: &DataSummary,
    candidates: &[CandidateSummary],
    budget: f64,
) -> Result<MlOutcome, MlGreedyError> {
    validate(candidates)?;
    let refs: Vec<&DataSummary> = candidates.iter().map(|c| &c.summary).collect();
    let ctx = EstimationContext::new(bundle, queries, owned, &refs)?;
    let by_id: BTreeMap<&str, &CandidateSummary> =
        candidates.iter().map(|c| (c.id.as_str(), c)).collect();
    let init = SelectionState {
        summary: owned.clone(),
        count: owned.tuple_count as f64,
        union: None,
    };
    greedy_loop(
        candidates,
        init,
        budget,
        |state, id| {
            let cand = by_id[id];
            let summary = merge_summaries(
                &state.summary,
                &cand.summary,
                ctx.lookup().union(),
                bundle,
            )?;
            Ok(SelectionState {
                summary,
                count: state.count + cand.summary.tuple_count as f64,
                union: None,
            })
        },
        |state| Ok(ctx.estimate(&state.summary, state.count)?),
    )
}

/// The exact-merge variant: summaries of the growing union are maintained
/// by re-averaging row embeddings over rows not seen before, so estimates
/// see exact means and deduplicated counts. Slow by design — it scans every
/// candidate's tuples on every speculative merge.
pub fn ml_greedy_incremental(
    bundle: &EstimatorBundle,
    queries: &QuerySet,
    owned_dataset: &Dataset,
    owned: &DataSummary,
    candidates: &[CandidateSummary],
    datasets: &[&Dataset],
    budget: f64,
) -> Result<MlOutcome, MlGreedyError> {
    validate(candidates)?;
    let refs: Vec<&DataSummary> = candidates.iter().map(|c| &c.summary).collect();
    let ctx = EstimationContext::new(bundle, queries, owned, &refs)?;
    let by_id: BTreeMap<&str, &Dataset> = datasets.iter().map(|d| (d.id.as_str(), *d)).collect();
    for c in candidates {
        if !by_id.contains_key(c.id.as_str()) {
            return Err(MlGreedyError::UnknownDataset(c.id.clone()));
        }
    }
    let union = owned_dataset.distinct_tuples();
    let init = SelectionState {
        summary: owned.clone(),
        count: union.len() as f64,
        union: Some(union),
    };
    greedy_loop(
        candidates,
        init,
        budget,
        |state, id| incremental_merge(state, by_id[id], bundle),
        |state| Ok(ctx.estimate(&state.summary, state.count)?),
    )
}

/// Folds the rows of `d` that are not yet in the union into every summary
/// entry: `e' = (n·e + Σ ψ(r_new)) / (n + |new|)`.
fn incremental_merge(
    state: &SelectionState,
    d: &Dataset,
    bundle: &EstimatorBundle,
) -> Result<SelectionState, MlGreedyError> {
    let mut union = state
        .union
        .clone()
        .expect("incremental state carries the union");
    let mut new_rows = Vec::new();
    for row in &d.rows {
        if union.insert(row) {
            new_rows.push(row);
        }
    }
    let n_old = state.count;
    let n_new = new_rows.len() as f64;
    let mut entries = Vec::with_capacity(state.summary.entries().len());
    for e in state.summary.entries() {
        let idxs: Vec<usize> = e
            .columns
            .names()
            .iter()
            .map(|n| {
                d.schema
                    .index_of(n)
                    .ok_or_else(|| MlGreedyError::SchemaMismatch(d.id.clone()))
            })
            .collect::<Result<_, _>>()?;
        let mut acc = &e.embedding * n_old;
        let mut codes = Vec::with_capacity(idxs.len());
        let mut bits = Vec::new();
        for row in &new_rows {
            codes.clear();
            for (k, &ci) in idxs.iter().enumerate() {
                codes.push(e.quantizer.code(k, &row[ci]));
            }
            e.quantizer.active_bits(&codes, &mut bits);
            acc += &bundle.phi_r.forward_bits(&bits);
        }
        acc /= n_old + n_new;
        entries.push(SummaryEntry {
            columns: e.columns.clone(),
            quantizer: Arc::clone(&e.quantizer),
            embedding: acc,
        });
    }
    let summary = DataSummary::from_entries(
        state.summary.id.clone(),
        (n_old + n_new) as u64,
        state.summary.embed_dim,
        entries,
    )
    .expect("entry structure is preserved");
    Ok(SelectionState {
        summary,
        count: n_old + n_new,
        union: Some(union),
    })
}

/// Overlap-blind baseline: each candidate is scored once by the sum of its
/// single-query estimates, then taken greedily by score per price while the
/// budget allows. The reported distinctiveness is the baseline's own belief:
/// the sum of the selected scores.
pub fn sce_aggregate_greedy(
    bundle: &EstimatorBundle,
    queries: &QuerySet,
    owned: &DataSummary,
    candidates: &[CandidateSummary],
    budget: f64,
) -> Result<AssemblageResult, MlGreedyError> {
    validate(candidates)?;
    let refs: Vec<&DataSummary> = candidates.iter().map(|c| &c.summary).collect();
    let ctx = EstimationContext::new(bundle, queries, owned, &refs)?;
    let mut scored: Vec<(&CandidateSummary, f64)> = Vec::with_capacity(candidates.len());
    for c in candidates {
        let mut score = 0.0;
        for qi in 0..queries.len() {
            score += ctx.estimate_single_query(&c.summary, qi, c.summary.tuple_count as f64)?;
        }
        scored.push((c, score));
    }
    scored.sort_by(|(a, sa), (b, sb)| {
        let ra = sa / a.price;
        let rb = sb / b.price;
        rb.partial_cmp(&ra)
            .expect("scores are finite")
            .then_with(|| a.id.cmp(&b.id))
    });
    let mut selected = Vec::new();
    let mut trace = Vec::new();
    let mut spent = 0.0;
    let mut total = 0.0;
    for (c, score) in scored {
        if spent + c.price <= budget {
            spent += c.price;
            total += score;
            selected.push(c.id.clone());
            trace.push(TraceStep {
                dataset_id: c.id.clone(),
                gain_per_price: score / c.price,
            });
        }
    }
    Ok(AssemblageResult {
        selected,
        total_price: spent,
        distinctiveness: total,
        trace,
    })
}

#[derive(Debug)]
pub enum MlGreedyError {
    EmptyCandidates,
    NonPositivePrice(String),
    DuplicateId(String),
    UnknownDataset(String),
    SchemaMismatch(String),
    Estimator(EstimatorError),
}

impl fmt::Display for MlGreedyError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MlGreedyError::EmptyCandidates => write!(f, "no candidate datasets"),
            MlGreedyError::NonPositivePrice(id) => {
                write!(f, "dataset {id} has a non-positive price")
            }
            MlGreedyError::DuplicateId(id) => write!(f, "duplicate dataset id {id}"),
            MlGreedyError::UnknownDataset(id) => {
                write!(f, "no raw dataset supplied for candidate {id}")
            }
            MlGreedyError::SchemaMismatch(id) => {
                write!(f, "dataset {id} lacks a summarized column")
            }
            MlGreedyError::Estimator(e) => write!(f, "estimation failed: {e}"),
        }
    }
}

impl std::error::Error for MlGreedyError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            MlGreedyError::Estimator(e) => Some(e),
            _ => None,
        }
    }
}

impl From<EstimatorError> for MlGreedyError {
    fn from(e: EstimatorError) -> Self {
        MlGreedyError::Estimator(e)
    }
}
