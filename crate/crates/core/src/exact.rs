//! Ground-truth distinctiveness and the exact budgeted greedy selector.
//!
//! Distinctiveness of a selection `S` given an owned dataset `d_u` and a query
//! set `Q` is the number of distinct tuples, across `S` and `d_u` together,
//! matching at least one query. Maximizing it under a price budget contains
//! budgeted maximum coverage, so the selector here is the classic greedy by
//! marginal gain per unit price with a best-single-dataset fallback, which
//! carries a `(1 - 1/e) / 2` approximation guarantee.

use std::collections::BTreeMap;
use std::fmt;

use crate::tabular::{query_set_union, Dataset, QuerySet, TabularError, TupleSet};

/// Per-dataset matching-tuple sets, built once per `(D, d_u, Q)` and reused by
/// gain computations.
#[derive(Debug)]
pub struct DistinctivenessCache {
    sets: BTreeMap<String, TupleSet>,
    owned_id: String,
}

impl DistinctivenessCache {
    /// Evaluates the query set over every candidate and the owned dataset.
    pub fn build(
        candidates: &[Dataset],
        owned: &Dataset,
        queries: &QuerySet,
    ) -> Result<DistinctivenessCache, ExactError> {
        let mut sets = BTreeMap::new();
        for d in candidates {
            if d.schema != owned.schema {
                return Err(ExactError::SchemaMismatch(d.id.clone()));
            }
            if sets
                .insert(d.id.clone(), query_set_union(d, queries)?)
                .is_some()
            {
                return Err(ExactError::DuplicateDatasetId(d.id.clone()));
            }
        }
        if sets.contains_key(&owned.id) {
            return Err(ExactError::DuplicateDatasetId(owned.id.clone()));
        }
        sets.insert(owned.id.clone(), query_set_union(owned, queries)?);
        Ok(DistinctivenessCache {
            sets,
            owned_id: owned.id.clone(),
        })
    }

    pub fn matching_tuples(&self, dataset_id: &str) -> Result<&TupleSet, ExactError> {
        self.sets
            .get(dataset_id)
            .ok_or_else(|| ExactError::CacheMiss(dataset_id.to_string()))
    }

    pub fn owned_id(&self) -> &str {
        &self.owned_id
    }

    /// Union of matching tuples over the owned dataset and the given ids.
    pub fn union_of(&self, selection: &[&str]) -> Result<TupleSet, ExactError> {
        let mut out = self.matching_tuples(&self.owned_id)?.clone();
        for id in selection {
            out.union_with(self.matching_tuples(id)?);
        }
        Ok(out)
    }
}

/// Exact distinctiveness of a selection: `|Q(d_u) ∪ ⋃_{d ∈ S} Q(d)|`.
pub fn exact_distinctiveness(
    selection: &[&Dataset],
    owned: &Dataset,
    queries: &QuerySet,
) -> Result<usize, ExactError> {
    let mut union = query_set_union(owned, queries)?;
    for d in selection {
        if d.schema != owned.schema {
            return Err(ExactError::SchemaMismatch(d.id.clone()));
        }
        union.union_with(&query_set_union(d, queries)?);
    }
    Ok(union.len())
}

/// Marginal gain of adding `dataset_id` to a selection whose matching-tuple
/// union is `current`: returns the gain and the grown union.
pub fn exact_marginal_gain(
    current: &TupleSet,
    dataset_id: &str,
    cache: &DistinctivenessCache,
) -> Result<(usize, TupleSet), ExactError> {
    let tuples = cache.matching_tuples(dataset_id)?;
    let gain = current.count_new(tuples);
    let mut grown = current.clone();
    grown.union_with(tuples);
    Ok((gain, grown))
}

/// One greedy iteration: the candidate that maximized gain per unit price,
/// whether or not it fit the remaining budget.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    pub dataset_id: String,
    pub gain_per_price: f64,
}

/// Outcome of a selection run.
#[derive(Debug, Clone)]
pub struct AssemblageResult {
    /// Ids of purchased datasets, in selection order.
    pub selected: Vec<String>,
    pub total_price: f64,
    /// Achieved distinctiveness: exact for this module's selector, estimated
    /// for the learned selector.
    pub distinctiveness: f64,
    /// Greedy iterations in order. When the single-dataset fallback wins the
    /// final comparison, `selected` holds just that dataset while the trace
    /// still documents the greedy pass.
    pub trace: Vec<TraceStep>,
}

/// Budgeted greedy selection by exact marginal gain per unit price.
///
/// Each iteration scores every remaining candidate, picks the maximizer
/// (ties broken toward the lexicographically smaller id; zero-gain candidates
/// stay eligible), adds it if it fits the budget, and removes it either way.
/// Afterwards the result is compared against the best single affordable
/// dataset and replaced only if that dataset is strictly better.
pub fn exact_greedy(
    candidates: &[Dataset],
    owned: &Dataset,
    queries: &QuerySet,
    budget: f64,
) -> Result<AssemblageResult, ExactError> {
    if candidates.is_empty() {
        return Err(ExactError::EmptyCandidates);
    }
    let mut prices = BTreeMap::new();
    for d in candidates {
        if !(d.price > 0.0) {
            return Err(ExactError::NonPositivePrice(d.id.clone()));
        }
        prices.insert(d.id.clone(), d.price);
    }
    let cache = DistinctivenessCache::build(candidates, owned, queries)?;

    let mut covered = cache.matching_tuples(&owned.id)?.clone();
    let mut remaining: Vec<&str> = prices.keys().map(|s| s.as_str()).collect();
    let mut selected = Vec::new();
    let mut spent = 0.0;
    let mut trace = Vec::new();

    while !remaining.is_empty() {
        let mut best: Option<(usize, f64)> = None; // (index into remaining, gain/price)
        for (i, id) in remaining.iter().enumerate() {
            let gain = covered.count_new(cache.matching_tuples(id)?) as f64;
            let score = gain / prices[*id];
            // Strict comparison keeps the first (lexicographically smallest,
            // since `remaining` stays sorted) candidate on ties.
            match best {
                Some((_, s)) if score <= s => {}
                _ => best = Some((i, score)),
            }
        }
        let (idx, score) = best.expect("remaining is nonempty");
        let id = remaining.remove(idx);
        trace.push(TraceStep {
            dataset_id: id.to_string(),
            gain_per_price: score,
        });
        if spent + prices[id] <= budget {
            covered.union_with(cache.matching_tuples(id)?);
            spent += prices[id];
            selected.push(id.to_string());
        }
    }

    // Fallback: the greedy result must beat every affordable single dataset.
    let owned_matches = cache.matching_tuples(&owned.id)?;
    let mut single_best: Option<(&str, usize)> = None;
    for (id, price) in &prices {
        if *price <= budget {
            let value = owned_matches.len() + owned_matches.count_new(cache.matching_tuples(id)?);
            match single_best {
                Some((_, v)) if value <= v => {}
                _ => single_best = Some((id, value)),
            }
        }
    }
    if let Some((id, value)) = single_best {
        if covered.len() < value {
            return Ok(AssemblageResult {
                selected: vec![id.to_string()],
                total_price: prices[id],
                distinctiveness: value as f64,
                trace,
            });
        }
    }

    Ok(AssemblageResult {
        selected,
        total_price: spent,
        distinctiveness: covered.len() as f64,
        trace,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExactError {
    Tabular(TabularError),
    EmptyCandidates,
    NonPositivePrice(String),
    CacheMiss(String),
    SchemaMismatch(String),
    DuplicateDatasetId(String),
}

impl fmt::Display for ExactError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExactError::Tabular(e) => write!(f, "{e}"),
            ExactError::EmptyCandidates => write!(f, "no candidate datasets"),
            ExactError::NonPositivePrice(id) => {
                write!(f, "candidate {id:?} must have a positive price")
            }
            ExactError::CacheMiss(id) => write!(f, "dataset {id:?} not in cache"),
            ExactError::SchemaMismatch(id) => {
                write!(f, "dataset {id:?} does not share the owned dataset's schema")
            }
            ExactError::DuplicateDatasetId(id) => write!(f, "duplicate dataset id {id:?}"),
        }
    }
}

impl std::error::Error for ExactError {}

impl From<TabularError> for ExactError {
    fn from(e: TabularError) -> Self {
        ExactError::Tabular(e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sample_data::housing_example;
    use crate::tabular::{ColumnKind, Predicate, Query, Schema, Value};
    use std::sync::Arc;

    #[test]
    fn housing_distinctiveness_values() {
        let ex = housing_example();
        let refs: Vec<&Dataset> = ex.candidates.iter().collect();
        // Empty selection counts only the owned dataset's matches.
        assert_eq!(exact_distinctiveness(&[], &ex.owned, &ex.queries).unwrap(), 2);
        assert_eq!(
            exact_distinctiveness(&[refs[1], refs[2]], &ex.owned, &ex.queries).unwrap(),
            4
        );
        // Buying everything does not beat {d_5, d_10}: d_1 is fully covered.
        assert_eq!(
            exact_distinctiveness(&refs.iter().copied().collect::<Vec<_>>(), &ex.owned, &ex.queries)
                .unwrap(),
            4
        );
    }

    #[test]
    fn housing_greedy_selects_d5_then_d10() {
        let ex = housing_example();
        let result = exact_greedy(&ex.candidates, &ex.owned, &ex.queries, ex.budget).unwrap();
        assert_eq!(result.selected, vec!["d_5", "d_10"]);
        assert_eq!(result.total_price, 300.0);
        assert_eq!(result.distinctiveness, 4.0);
        // Trace: d_5 at 1/100, d_10 at 1/200, then d_1 at zero gain (skipped:
        // it would blow the budget).
        assert_eq!(result.trace.len(), 3);
        assert_eq!(result.trace[0].dataset_id, "d_5");
        assert_eq!(result.trace[0].gain_per_price, 0.01);
        assert_eq!(result.trace[1].dataset_id, "d_10");
        assert_eq!(result.trace[1].gain_per_price, 0.005);
        assert_eq!(result.trace[2].dataset_id, "d_1");
        assert_eq!(result.trace[2].gain_per_price, 0.0);
    }

    #[test]
    fn housing_marginal_gain_of_d10_given_d5() {
        let ex = housing_example();
        let cache = DistinctivenessCache::build(&ex.candidates, &ex.owned, &ex.queries).unwrap();
        let current = cache.union_of(&["d_5"]).unwrap();
        let (gain, grown) = exact_marginal_gain(&current, "d_10", &cache).unwrap();
        assert_eq!(gain, 1);
        assert_eq!(grown.len(), 4);
        assert_eq!(cache.union_of(&["d_5", "d_10"]).unwrap().len(), 4);
    }

    #[test]
    fn zero_budget_selects_nothing() {
        let ex = housing_example();
        let result = exact_greedy(&ex.candidates, &ex.owned, &ex.queries, 0.0).unwrap();
        assert!(result.selected.is_empty());
        assert_eq!(result.total_price, 0.0);
        assert_eq!(result.distinctiveness, 2.0);
        // Every candidate is still examined (and dropped) exactly once.
        assert_eq!(result.trace.len(), 3);
    }

    #[test]
    fn single_dataset_fallback_wins_when_greedy_traps_itself() {
        // Two candidates: a cheap one with a great gain/price ratio and an
        // expensive one covering far more. Budget fits either alone but not
        // both; greedy grabs the cheap one first, the fallback rescues it.
        let schema = Arc::new(
            Schema::new(vec![("x".into(), ColumnKind::Numeric)]).unwrap(),
        );
        let rows = |lo: i64, hi: i64| -> Vec<Vec<Value>> {
            (lo..hi).map(|i| vec![Value::Num(i as f64)]).collect()
        };
        let owned = Dataset::new("own", schema.clone(), vec![], 0.0).unwrap();
        let cheap = Dataset::new("a_cheap", schema.clone(), rows(0, 2), 1.0).unwrap();
        let big = Dataset::new("b_big", schema.clone(), rows(100, 200), 10.0).unwrap();
        let queries = QuerySet::new(vec![Query::new(
            "q",
            vec![Predicate::range("x", -1e9, 1e9).unwrap()],
        )
        .unwrap()])
        .unwrap();
        let result = exact_greedy(&[cheap, big], &owned, &queries, 10.0).unwrap();
        assert_eq!(result.selected, vec!["b_big"]);
        assert_eq!(result.distinctiveness, 100.0);
        assert_eq!(result.total_price, 10.0);
    }

    #[test]
    fn input_validation() {
        let ex = housing_example();
        assert_eq!(
            exact_greedy(&[], &ex.owned, &ex.queries, 10.0).unwrap_err(),
            ExactError::EmptyCandidates
        );
        let mut bad = ex.candidates.clone();
        bad[0].price = 0.0;
        assert_eq!(
            exact_greedy(&bad, &ex.owned, &ex.queries, 10.0).unwrap_err(),
            ExactError::NonPositivePrice("d_1".into())
        );
        let cache = DistinctivenessCache::build(&ex.candidates, &ex.owned, &ex.queries).unwrap();
        assert_eq!(
            cache.matching_tuples("nope").unwrap_err(),
            ExactError::CacheMiss("nope".into())
        );
    }
}
