//! Online distinctiveness estimation over data summaries.
//!
//! Given summaries for the owned dataset and every candidate, a query set is
//! embedded once (bound rows per column set, folded through the query layer)
//! and each candidate's summary is folded into a query-aware embedding; the
//! estimation head turns the two into a matching fraction that scales with
//! the tuple count. Summaries of selected sets are combined with the learned
//! merge layer instead of touching rows.

use std::fmt;
use std::sync::Arc;

use ndarray::{concatenate, s, Array1, Array2, Axis};

use crate::nn::EstimatorBundle;
use crate::summary::{ColumnSet, DataSummary, QuantizerSpec, SummaryEntry};
use crate::tabular::{ColumnKind, Predicate, Query, QuerySet, Value};

/// Column sets relevant to each query: the sets shared by every summary that
/// touch at least one of the query's columns, in column-name order, capped
/// at the slot budget.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryLookup {
    per_query: Vec<Vec<ColumnSet>>,
    union: Vec<ColumnSet>,
}

impl QueryLookup {
    /// `summaries` must cover the owned dataset and every candidate; a query
    /// that intersects none of the shared column sets is an error because no
    /// embedding could represent it.
    pub fn build(
        queries: &QuerySet,
        summaries: &[&DataSummary],
        max_sets: usize,
    ) -> Result<QueryLookup, EstimatorError> {
        let mut shared: Vec<ColumnSet> = match summaries.split_first() {
            Some((first, rest)) => {
                let mut acc: Vec<ColumnSet> = first.column_sets().cloned().collect();
                for s in rest {
                    acc.retain(|set| s.entry(set).is_some());
                }
                acc
            }
            None => Vec::new(),
        };
        shared.sort();

        let mut per_query = Vec::with_capacity(queries.len());
        let mut union = Vec::new();
        for q in queries.queries() {
            let cols = q.columns();
            let mut sets: Vec<ColumnSet> = shared
                .iter()
                .filter(|set| set.intersects(cols.iter().copied()))
                .cloned()
                .collect();
            if sets.is_empty() {
                return Err(EstimatorError::NoCommonColumnSets {
                    query: q.id.clone(),
                });
            }
            sets.truncate(max_sets);
            for set in &sets {
                if let Err(pos) = union.binary_search(set) {
                    union.insert(pos, set.clone());
                }
            }
            per_query.push(sets);
        }
        Ok(QueryLookup { per_query, union })
    }

    pub fn query_count(&self) -> usize {
        self.per_query.len()
    }

    pub fn sets_for(&self, query_index: usize) -> &[ColumnSet] {
        &self.per_query[query_index]
    }

    /// All column sets any query relies on, sorted; these are the entries a
    /// merge has to update.
    pub fn union(&self) -> &[ColumnSet] {
        &self.union
    }
}

/// Low/high identifier rows for `q` against one column-set quantizer, in set
/// order. A numeric column constrained by a range uses the range endpoints;
/// every other column spans its whole quantizer domain — including
/// equality-constrained categorical columns, whose bound rows deliberately
/// run from the first to the last known token.
pub fn query_bound_codes(q: &Query, spec: &QuantizerSpec) -> (Vec<u32>, Vec<u32>) {
    let mut low = Vec::with_capacity(spec.columns().len());
    let mut high = Vec::with_capacity(spec.columns().len());
    for (idx, col) in spec.columns().iter().enumerate() {
        let range = q.predicates().iter().find_map(|p| match p {
            Predicate::Range {
                column,
                low,
                high,
            } if column == &col.name && col.kind == ColumnKind::Numeric => Some((*low, *high)),
            _ => None,
        });
        match range {
            Some((l, u)) => {
                low.push(spec.code(idx, &Value::Num(l)));
                high.push(spec.code(idx, &Value::Num(u)));
            }
            None => {
                let (lo, hi) = spec.domain(idx);
                low.push(spec.code(idx, &lo));
                high.push(spec.code(idx, &hi));
            }
        }
    }
    (low, high)
}

fn psi(bundle: &EstimatorBundle, entry: &SummaryEntry, codes: &[u32]) -> Array1<f64> {
    let mut bits = Vec::new();
    entry.quantizer.active_bits(codes, &mut bits);
    bundle.phi_r.forward_bits(&bits)
}

fn concat2(a: &Array1<f64>, b: &Array1<f64>) -> Array1<f64> {
    concatenate![Axis(0), a.view(), b.view()]
}

/// Concatenates `blocks` and zero-pads the result to `len`.
fn pad_concat(blocks: &[Array1<f64>], len: usize) -> Array1<f64> {
    let mut out = Array1::zeros(len);
    let mut at = 0;
    for b in blocks {
        out.slice_mut(ndarray::s![at..at + b.len()]).assign(b);
        at += b.len();
    }
    out
}

/// Left fold used for both the dataset and the query stacks: the first two
/// blocks are combined as `[b_1, b_2]`, every later block is prepended to
/// the accumulator as `[b_j, acc]`. A single block passes through unfolded.
fn fold_blocks(layer: &crate::nn::DenseLayer, blocks: &[Array1<f64>]) -> Array1<f64> {
    match blocks {
        [] => unreachable!("query sets are nonempty"),
        [only] => only.clone(),
        [first, second, rest @ ..] => {
            let mut acc = layer.forward(&concat2(first, second));
            for b in rest {
                acc = layer.forward(&concat2(b, &acc));
            }
            acc
        }
    }
}

/// Everything that is fixed across candidates for one selection run: the
/// lookup, the per-query and folded query-set embeddings (built from the
/// owned dataset's quantizers), and the query side of the estimation head.
pub struct EstimationContext<'a> {
    bundle: &'a EstimatorBundle,
    lookup: QueryLookup,
    per_query: Vec<Array1<f64>>,
    query_set: Array1<f64>,
    /// `δ(φ_2(e_Q))`, reused by every candidate estimate.
    query_gate: Array1<f64>,
}

impl<'a> EstimationContext<'a> {
    pub fn new(
        bundle: &'a EstimatorBundle,
        queries: &QuerySet,
        owned: &DataSummary,
        candidates: &[&DataSummary],
    ) -> Result<EstimationContext<'a>, EstimatorError> {
        let mut all: Vec<&DataSummary> = Vec::with_capacity(candidates.len() + 1);
        all.push(owned);
        all.extend_from_slice(candidates);
        let lookup = QueryLookup::build(queries, &all, bundle.hyper.max_sets as usize)?;

        let slot = bundle.hyper.slot();
        let mut per_query = Vec::with_capacity(queries.len());
        for (qi, q) in queries.queries().iter().enumerate() {
            let mut blocks = Vec::new();
            for set in lookup.sets_for(qi) {
                let entry = owned
                    .entry(set)
                    .ok_or_else(|| EstimatorError::MissingColumnSet {
                        dataset: owned.id.clone(),
                        set: set.to_string(),
                    })?;
                let (lo, hi) = query_bound_codes(q, &entry.quantizer);
                blocks.push(psi(bundle, entry, &lo));
                blocks.push(psi(bundle, entry, &hi));
            }
            per_query.push(pad_concat(&blocks, 2 * slot));
        }
        let query_set = fold_blocks(&bundle.phi_q, &per_query);
        let query_gate = bundle.phi_2.forward(&query_set);
        Ok(EstimationContext {
            bundle,
            lookup,
            per_query,
            query_set,
            query_gate,
        })
    }

    pub fn lookup(&self) -> &QueryLookup {
        &self.lookup
    }

    pub fn bundle(&self) -> &EstimatorBundle {
        self.bundle
    }

    /// The padded, unfolded embedding of one query.
    pub fn per_query_embedding(&self, query_index: usize) -> &Array1<f64> {
        &self.per_query[query_index]
    }

    /// The folded query-set embedding `e_Q`.
    pub fn query_set_embedding(&self) -> &Array1<f64> {
        &self.query_set
    }

    /// Folds `summary`'s column-set embeddings into the query-aware dataset
    /// embedding (one padded block per query, left fold through `phi_d`).
    pub fn query_aware_embedding(
        &self,
        summary: &DataSummary,
    ) -> Result<Array1<f64>, EstimatorError> {
        let slot = self.bundle.hyper.slot();
        let mut blocks = Vec::with_capacity(self.lookup.query_count());
        for qi in 0..self.lookup.query_count() {
            let mut parts = Vec::new();
            for set in self.lookup.sets_for(qi) {
                let entry =
                    summary
                        .entry(set)
                        .ok_or_else(|| EstimatorError::MissingColumnSet {
                            dataset: summary.id.clone(),
                            set: set.to_string(),
                        })?;
                parts.push(entry.embedding.clone());
            }
            blocks.push(pad_concat(&parts, slot));
        }
        Ok(fold_blocks(&self.bundle.phi_d, &blocks))
    }

    /// The estimated fraction of `summary`'s tuples matched by the query
    /// set, clamped to [0, 1].
    pub fn estimate_fraction(&self, summary: &DataSummary) -> Result<f64, EstimatorError> {
        let e_dq = self.query_aware_embedding(summary)?;
        Ok(self.head(&e_dq, &self.query_gate))
    }

    /// Batched [`Self::estimate_fraction`] over many summaries: one matrix
    /// product per fold step and head layer instead of a vector product per
    /// summary, which is what keeps per-round selection scoring fast. Same
    /// arithmetic graph; only the summation order inside the products may
    /// differ from the single-summary path.
    pub fn estimate_fractions(
        &self,
        summaries: &[&DataSummary],
    ) -> Result<Vec<f64>, EstimatorError> {
        let m = summaries.len();
        if m == 0 {
            return Ok(Vec::new());
        }
        let slot = self.bundle.hyper.slot();
        let nq = self.lookup.query_count();
        let mut blocks: Vec<Array2<f64>> = Vec::with_capacity(nq);
        for qi in 0..nq {
            let mut b = Array2::zeros((m, slot));
            for (r, summary) in summaries.iter().enumerate() {
                let mut at = 0usize;
                for set in self.lookup.sets_for(qi) {
                    let entry =
                        summary
                            .entry(set)
                            .ok_or_else(|| EstimatorError::MissingColumnSet {
                                dataset: summary.id.clone(),
                                set: set.to_string(),
                            })?;
                    let e = &entry.embedding;
                    b.slice_mut(s![r, at..at + e.len()]).assign(e);
                    at += e.len();
                }
            }
            blocks.push(b);
        }
        let e_dq = match blocks.as_slice() {
            [] => unreachable!("query sets are nonempty"),
            [only] => only.clone(),
            [first, second, rest @ ..] => {
                let x = concatenate![Axis(1), first.view(), second.view()];
                let mut acc = self.bundle.phi_d.forward_batch(&x);
                for b in rest {
                    let x = concatenate![Axis(1), b.view(), acc.view()];
                    acc = self.bundle.phi_d.forward_batch(&x);
                }
                acc
            }
        };
        let a = self.bundle.phi_1.forward_batch(&e_dq);
        let h = a * &self.query_gate;
        let z = self.bundle.phi_3_hidden.forward_batch(&h);
        let y = self.bundle.phi_3_out.affine_batch(&z);
        Ok(y.column(0).iter().map(|v| v.clamp(0.0, 1.0)).collect())
    }

    /// Estimated distinctiveness: fraction times the supplied tuple count
    /// (callers pass their own running count when estimating merged sets).
    pub fn estimate(&self, summary: &DataSummary, tuple_count: f64) -> Result<f64, EstimatorError> {
        Ok(self.estimate_fraction(summary)? * tuple_count)
    }

    /// Single-query estimate (no folds on either side), the building block
    /// of the aggregate baseline.
    pub fn estimate_single_query(
        &self,
        summary: &DataSummary,
        query_index: usize,
        tuple_count: f64,
    ) -> Result<f64, EstimatorError> {
        let slot = self.bundle.hyper.slot();
        let mut parts = Vec::new();
        for set in self.lookup.sets_for(query_index) {
            let entry = summary
                .entry(set)
                .ok_or_else(|| EstimatorError::MissingColumnSet {
                    dataset: summary.id.clone(),
                    set: set.to_string(),
                })?;
            parts.push(entry.embedding.clone());
        }
        let e_dq = pad_concat(&parts, slot);
        let gate = self.bundle.phi_2.forward(&self.per_query[query_index]);
        Ok(self.head(&e_dq, &gate) * tuple_count)
    }

    fn head(&self, e_dq: &Array1<f64>, gate: &Array1<f64>) -> f64 {
        let a = self.bundle.phi_1.forward(e_dq);
        let h = a * gate;
        let z = self.bundle.phi_3_hidden.forward(&h);
        let y = self.bundle.phi_3_out.affine(&z)[0];
        y.clamp(0.0, 1.0)
    }

    /// The overlap-blind baseline: per-dataset, per-query estimates summed
    /// as if every match were distinct.
    pub fn baseline_sce_aggregate(
        &self,
        summaries: &[&DataSummary],
    ) -> Result<f64, EstimatorError> {
        let mut total = 0.0;
        for s in summaries {
            for qi in 0..self.lookup.query_count() {
                total += self.estimate_single_query(s, qi, s.tuple_count as f64)?;
            }
        }
        Ok(total)
    }
}

/// Combines two summaries with the learned merge layer: every entry of
/// `accumulated` whose column set appears in `relevant` (sorted) is replaced
/// by `δ(φ_e([accumulated, incoming]))`; all other entries are copied
/// unchanged. The merged tuple count is the plain sum, matching the
/// running-count convention of the greedy selector.
pub fn merge_summaries(
    accumulated: &DataSummary,
    incoming: &DataSummary,
    relevant: &[ColumnSet],
    bundle: &EstimatorBundle,
) -> Result<DataSummary, EstimatorError> {
    debug_assert!(relevant.windows(2).all(|w| w[0] < w[1]));
    let mut entries = Vec::with_capacity(accumulated.entries().len());
    for e in accumulated.entries() {
        if relevant.binary_search(&e.columns).is_ok() {
            let other =
                incoming
                    .entry(&e.columns)
                    .ok_or_else(|| EstimatorError::MissingColumnSet {
                        dataset: incoming.id.clone(),
                        set: e.columns.to_string(),
                    })?;
            let joined = concat2(&e.embedding, &other.embedding);
            entries.push(SummaryEntry {
                columns: e.columns.clone(),
                quantizer: Arc::clone(&e.quantizer),
                embedding: bundle.phi_e.forward(&joined),
            });
        } else {
            entries.push(e.clone());
        }
    }
    DataSummary::from_entries(
        accumulated.id.clone(),
        accumulated.tuple_count + incoming.tuple_count,
        accumulated.embed_dim,
        entries,
    )
    .map_err(|e| EstimatorError::Internal(e.to_string()))
}

#[derive(Debug)]
pub enum EstimatorError {
    /// A query touches none of the column sets shared by every summary; the
    /// workload cannot be represented against these summaries.
    NoCommonColumnSets { query: String },
    /// A summary lacks an entry the lookup promises.
    MissingColumnSet { dataset: String, set: String },
    Internal(String),
}

impl fmt::Display for EstimatorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EstimatorError::NoCommonColumnSets { query } => {
                write!(f, "query {query} matches no shared column set")
            }
            EstimatorError::MissingColumnSet { dataset, set } => {
                write!(f, "summary {dataset} has no entry for column set {set}")
            }
            EstimatorError::Internal(what) => write!(f, "estimator invariant broken: {what}"),
        }
    }
}

impl std::error::Error for EstimatorError {}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::HyperParams;
    use crate::summary::{ColumnCoder, ColumnQuantizer, QuantizerSpec};
    use crate::tabular::Predicate;

    fn tiny_hyper() -> HyperParams {
        HyperParams {
            code_bits: 16,
            max_col_bits: 4,
            embed_dim: 4,
            max_sets: 2,
        }
    }

    /// A summary whose entries carry one-bit numeric pair quantizers; the
    /// embedding of entry `i` is a constant vector of `base + i`.
    fn flat_summary(id: &str, pairs: &[(&str, &str)], n: u64, base: f64) -> DataSummary {
        let entries = pairs
            .iter()
            .enumerate()
            .map(|(i, (a, b))| {
                let cols = [a, b].map(|name| ColumnQuantizer {
                    name: name.to_string(),
                    kind: ColumnKind::Numeric,
                    bits: 1,
                    coder: ColumnCoder::Numeric {
                        edges: vec![0.5],
                        min: 0.0,
                        max: 1.0,
                    },
                });
                SummaryEntry {
                    columns: ColumnSet::pair(a, b).unwrap(),
                    quantizer: Arc::new(QuantizerSpec::from_columns(cols.to_vec())),
                    embedding: Array1::from_elem(4, base + i as f64),
                }
            })
            .collect();
        DataSummary::from_entries(id, n, 4, entries).unwrap()
    }

    fn range(col: &str, lo: f64, hi: f64) -> Predicate {
        Predicate::range(col, lo, hi).unwrap()
    }

    #[test]
    fn housing_bound_rows_span_the_categorical_domain() {
        let ex = crate::sample_data::housing_example();
        let d1 = &ex.candidates[0];
        let set = ColumnSet::pair("city", "price").unwrap();
        let spec = QuantizerSpec::build(d1, &set, 3, 6).unwrap();
        let entry = SummaryEntry {
            columns: set,
            quantizer: Arc::new(spec),
            embedding: Array1::zeros(4),
        };
        // The second workload query: price between 500k and 800k, city
        // equal to Melbourne. The categorical bound row still spans
        // Melbourne..Sydney, so the high row picks up Sydney's identifier.
        let q = ex.queries.queries()[1].clone();
        let (lo, hi) = query_bound_codes(&q, &entry.quantizer);
        assert_eq!(lo, vec![0, 0]);
        assert_eq!(hi, vec![1, 2]);
        let mut bits = Vec::new();
        entry.quantizer.active_bits(&lo, &mut bits);
        assert!(bits.is_empty(), "low code is all zeros");
        entry.quantizer.active_bits(&hi, &mut bits);
        assert_eq!(bits, vec![0, 2], "high code reads 1,0,1");
    }

    #[test]
    fn unconstrained_and_point_bounds() {
        let ex = crate::sample_data::housing_example();
        let set = ColumnSet::pair("city", "price").unwrap();
        let spec = QuantizerSpec::build(&ex.candidates[0], &set, 3, 6).unwrap();
        let entry = SummaryEntry {
            columns: set,
            quantizer: Arc::new(spec),
            embedding: Array1::zeros(4),
        };
        let open = Query::new("open", vec![range("type", 0.0, 1.0)]).unwrap();
        let (lo, hi) = query_bound_codes(&open, &entry.quantizer);
        assert_eq!(lo, vec![0, 0]);
        assert_eq!(hi, vec![1, 3], "domain max: Sydney and the top bucket");

        // A point range pins only the constrained coordinate; the
        // unconstrained categorical column still spans its whole domain.
        let point = Query::new("pt", vec![range("price", 790_000.0, 790_000.0)]).unwrap();
        let (lo, hi) = query_bound_codes(&point, &entry.quantizer);
        assert_eq!(lo, vec![0, 2]);
        assert_eq!(hi, vec![1, 2]);
    }

    #[test]
    fn lookup_intersects_caps_and_errors() {
        let owned = flat_summary("d_u", &[("a", "b"), ("b", "c"), ("c", "d")], 10, 0.0);
        let cand = flat_summary("d_1", &[("a", "b"), ("b", "c")], 10, 1.0);
        let queries = QuerySet::new(vec![
            Query::new("q1", vec![range("b", 0.0, 1.0)]).unwrap(),
            Query::new("q2", vec![range("a", 0.0, 1.0)]).unwrap(),
        ])
        .unwrap();
        let lookup = QueryLookup::build(&queries, &[&owned, &cand], 4).unwrap();
        // Shared sets are a+b and b+c; q1 touches both, q2 only a+b.
        assert_eq!(
            lookup.sets_for(0),
            &[
                ColumnSet::pair("a", "b").unwrap(),
                ColumnSet::pair("b", "c").unwrap()
            ]
        );
        assert_eq!(lookup.sets_for(1), &[ColumnSet::pair("a", "b").unwrap()]);
        assert_eq!(lookup.union().len(), 2);

        let capped = QueryLookup::build(&queries, &[&owned, &cand], 1).unwrap();
        assert_eq!(capped.sets_for(0).len(), 1);

        let stranger = QuerySet::new(vec![Query::new("qz", vec![range("z", 0.0, 1.0)]).unwrap()])
            .unwrap();
        assert!(matches!(
            QueryLookup::build(&stranger, &[&owned, &cand], 4),
            Err(EstimatorError::NoCommonColumnSets { query }) if query == "qz"
        ));
    }

    #[test]
    fn two_query_fold_is_one_layer_application() {
        let bundle = EstimatorBundle::new_random(tiny_hyper(), 3);
        let owned = flat_summary("d_u", &[("a", "b"), ("b", "c")], 10, 0.2);
        let cand = flat_summary("d_1", &[("a", "b"), ("b", "c")], 20, 0.7);
        let q1 = Query::new("q1", vec![range("a", 0.0, 1.0)]).unwrap();
        let q2 = Query::new("q2", vec![range("c", 0.0, 1.0)]).unwrap();

        let single = |q: &Query| {
            let qs = QuerySet::new(vec![q.clone()]).unwrap();
            EstimationContext::new(&bundle, &qs, &owned, &[&cand]).unwrap()
        };
        let ctx1 = single(&q1);
        let ctx2 = single(&q2);
        let both = QuerySet::new(vec![q1.clone(), q2.clone()]).unwrap();
        let ctx12 = EstimationContext::new(&bundle, &both, &owned, &[&cand]).unwrap();

        // Dataset side: fold([e1, e2]) in one application.
        let e1 = ctx1.query_aware_embedding(&cand).unwrap();
        let e2 = ctx2.query_aware_embedding(&cand).unwrap();
        let expect = bundle.phi_d.forward(&concat2(&e1, &e2));
        assert_eq!(ctx12.query_aware_embedding(&cand).unwrap(), expect);

        // Query side: same shape with phi_q.
        let expect_q = bundle
            .phi_q
            .forward(&concat2(ctx1.query_set_embedding(), ctx2.query_set_embedding()));
        assert_eq!(ctx12.query_set_embedding(), &expect_q);
    }

    #[test]
    fn three_query_fold_prepends_the_newcomer() {
        let bundle = EstimatorBundle::new_random(tiny_hyper(), 4);
        let owned = flat_summary("d_u", &[("a", "b")], 10, 0.4);
        let cand = flat_summary("d_1", &[("a", "b")], 20, 0.9);
        let qs: Vec<Query> = (0..3)
            .map(|i| {
                Query::new(format!("q{i}"), vec![range("a", 0.0, 1.0 + f64::from(i))]).unwrap()
            })
            .collect();
        let singles: Vec<EstimationContext> = qs
            .iter()
            .map(|q| {
                let set = QuerySet::new(vec![q.clone()]).unwrap();
                EstimationContext::new(&bundle, &set, &owned, &[&cand]).unwrap()
            })
            .collect();
        let all = QuerySet::new(qs.clone()).unwrap();
        let ctx = EstimationContext::new(&bundle, &all, &owned, &[&cand]).unwrap();

        let e: Vec<Array1<f64>> = singles
            .iter()
            .map(|c| c.query_set_embedding().clone())
            .collect();
        let f2 = bundle.phi_q.forward(&concat2(&e[0], &e[1]));
        let f3 = bundle.phi_q.forward(&concat2(&e[2], &f2));
        assert_eq!(ctx.query_set_embedding(), &f3);
    }

    #[test]
    fn estimate_scales_with_count_and_respects_clamp() {
        let bundle = EstimatorBundle::new_random(tiny_hyper(), 5);
        let owned = flat_summary("d_u", &[("a", "b")], 10, 0.3);
        let cand = flat_summary("d_1", &[("a", "b")], 50, 0.8);
        let q = QuerySet::new(vec![Query::new("q", vec![range("a", 0.0, 1.0)]).unwrap()]).unwrap();
        let ctx = EstimationContext::new(&bundle, &q, &owned, &[&cand]).unwrap();
        let frac = ctx.estimate_fraction(&cand).unwrap();
        assert!((0.0..=1.0).contains(&frac));
        assert_eq!(ctx.estimate(&cand, 0.0).unwrap(), 0.0);
        let e = ctx.estimate(&cand, 1000.0).unwrap();
        assert!((e - frac * 1000.0).abs() < 1e-12);
        assert!(e <= 1000.0);

        // A zeroed head estimates zero no matter the inputs.
        let mut dead = bundle.clone();
        dead.phi_3_out.weight.fill(0.0);
        dead.phi_3_out.bias.fill(0.0);
        let ctx = EstimationContext::new(&dead, &q, &owned, &[&cand]).unwrap();
        assert_eq!(ctx.estimate(&cand, 1000.0).unwrap(), 0.0);
    }

    #[test]
    fn merge_replaces_only_relevant_entries() {
        let bundle = EstimatorBundle::new_random(tiny_hyper(), 6);
        let acc = flat_summary("d_u", &[("a", "b"), ("b", "c")], 10, 0.1);
        let inc = flat_summary("d_1", &[("a", "b"), ("b", "c")], 20, 0.6);
        let relevant = vec![ColumnSet::pair("a", "b").unwrap()];
        let merged = merge_summaries(&acc, &inc, &relevant, &bundle).unwrap();
        assert_eq!(merged.tuple_count, 30);

        let ab = ColumnSet::pair("a", "b").unwrap();
        let bc = ColumnSet::pair("b", "c").unwrap();
        let expect = bundle.phi_e.forward(&concat2(
            &acc.entry(&ab).unwrap().embedding,
            &inc.entry(&ab).unwrap().embedding,
        ));
        assert_eq!(merged.entry(&ab).unwrap().embedding, expect);
        // The untouched entry is bitwise identical.
        assert_eq!(
            merged.entry(&bc).unwrap().embedding,
            acc.entry(&bc).unwrap().embedding
        );

        // No relevant sets: the output is the accumulated summary plus count.
        let untouched = merge_summaries(&acc, &inc, &[], &bundle).unwrap();
        for (a, b) in untouched.entries().iter().zip(acc.entries()) {
            assert_eq!(a.embedding, b.embedding);
        }

        // The incoming summary is missing a relevant set.
        let small = flat_summary("d_2", &[("b", "c")], 5, 0.0);
        assert!(matches!(
            merge_summaries(&acc, &small, &relevant, &bundle),
            Err(EstimatorError::MissingColumnSet { dataset, .. }) if dataset == "d_2"
        ));
    }

    #[test]
    fn baseline_is_the_sum_of_singleton_estimates() {
        let bundle = EstimatorBundle::new_random(tiny_hyper(), 7);
        let owned = flat_summary("d_u", &[("a", "b"), ("b", "c")], 10, 0.2);
        let c1 = flat_summary("d_1", &[("a", "b"), ("b", "c")], 30, 0.5);
        let c2 = flat_summary("d_2", &[("a", "b"), ("b", "c")], 40, 0.9);
        let qs: Vec<Query> = vec![
            Query::new("q1", vec![range("a", 0.0, 0.6)]).unwrap(),
            Query::new("q2", vec![range("c", 0.2, 1.0)]).unwrap(),
        ];
        let all = QuerySet::new(qs.clone()).unwrap();
        let ctx = EstimationContext::new(&bundle, &all, &owned, &[&c1, &c2]).unwrap();
        let total = ctx.baseline_sce_aggregate(&[&c1, &c2]).unwrap();

        let mut manual = 0.0;
        for q in &qs {
            let single = QuerySet::new(vec![q.clone()]).unwrap();
            let sctx = EstimationContext::new(&bundle, &single, &owned, &[&c1, &c2]).unwrap();
            for s in [&c1, &c2] {
                manual += sctx.estimate(s, s.tuple_count as f64).unwrap();
            }
        }
        assert!((total - manual).abs() < 1e-9, "{total} vs {manual}");
        // Each constituent term is nonnegative, so the sum dominates any one.
        let one = ctx.estimate_single_query(&c1, 0, c1.tuple_count as f64).unwrap();
        assert!(total >= one);
    }
}
