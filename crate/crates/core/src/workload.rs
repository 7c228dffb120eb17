//! Synthetic experiment generation: data pools, sampled candidate markets,
//! and query pairs with a controlled minimum overlap ratio.
//!
//! Everything here is a pure function of its config and seed so whole
//! experiments replay bit-for-bit.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tabular::{
    evaluate_query, ColumnKind, Dataset, Predicate, Query, QuerySet, Schema, TabularError, Tuple,
    TupleSet, Value,
};

/// Shape of a generated data pool. Numeric values are uniform draws rounded
/// to three decimals; categorical values are uniform over `tok0..tokN`.
#[derive(Debug, Clone)]
pub struct PoolConfig {
    pub rows: usize,
    pub numeric_columns: usize,
    pub categorical_columns: usize,
    pub categorical_cardinality: usize,
    pub numeric_max: f64,
    pub seed: u64,
}

impl Default for PoolConfig {
    fn default() -> PoolConfig {
        PoolConfig {
            rows: 10_000,
            numeric_columns: 3,
            categorical_columns: 1,
            categorical_cardinality: 8,
            numeric_max: 1000.0,
            seed: 0,
        }
    }
}

/// How candidate datasets are sampled out of the pool. Each dataset is an
/// independent uniform sample without replacement whose size is a fresh
/// fraction `s` of the pool, `s ~ U[s_min, s_max]`; its price is `w · |d|`
/// with `w ~ U(0, 1]`.
#[derive(Debug, Clone)]
pub struct CandidateGenConfig {
    pub num_datasets: usize,
    pub s_min: f64,
    pub s_max: f64,
    pub seed: u64,
}

impl Default for CandidateGenConfig {
    fn default() -> CandidateGenConfig {
        CandidateGenConfig {
            num_datasets: 20,
            s_min: 0.05,
            s_max: 0.1,
            seed: 0,
        }
    }
}

/// Query-pair generation knobs. `ol` is the minimum overlap ratio every
/// accepted pair must achieve on every candidate dataset.
#[derive(Debug, Clone)]
pub struct QueryGenConfig {
    pub ol: f64,
    pub pool_pairs: usize,
    pub max_attempts: usize,
    pub seed: u64,
}

impl Default for QueryGenConfig {
    fn default() -> QueryGenConfig {
        QueryGenConfig {
            ol: 0.05,
            pool_pairs: 100,
            max_attempts: 10_000,
            seed: 0,
        }
    }
}

/// Top-level experiment knobs; the budget is `b_ratio` times the summed
/// candidate price.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub b_ratio: f64,
    pub num_queries: usize,
    pub num_datasets: usize,
    pub ol: f64,
    pub s_min: f64,
    pub s_max: f64,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> ExperimentConfig {
        ExperimentConfig {
            b_ratio: 0.5,
            num_queries: 20,
            num_datasets: 20,
            ol: 0.05,
            s_min: 0.05,
            s_max: 0.1,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        if !(self.b_ratio > 0.0) {
            return Err(WorkloadError::InvalidConfig(
                "budget ratio must be positive".into(),
            ));
        }
        if self.num_queries == 0 || self.num_queries % 2 != 0 {
            return Err(WorkloadError::InvalidConfig(
                "query count must be even and positive".into(),
            ));
        }
        check_fractions(self.s_min, self.s_max)?;
        check_overlap(self.ol)?;
        Ok(())
    }

    pub fn budget_for<'a>(&self, candidates: impl IntoIterator<Item = &'a Dataset>) -> f64 {
        self.b_ratio * crate::tabular::total_price(candidates)
    }
}

fn check_fractions(s_min: f64, s_max: f64) -> Result<(), WorkloadError> {
    if !(s_min > 0.0 && s_min <= s_max && s_max <= 1.0) {
        return Err(WorkloadError::InvalidConfig(format!(
            "sampling fractions must satisfy 0 < s_min <= s_max <= 1, got [{s_min}, {s_max}]"
        )));
    }
    Ok(())
}

fn check_overlap(ol: f64) -> Result<(), WorkloadError> {
    if !(0.0..1.0).contains(&ol) {
        return Err(WorkloadError::InvalidConfig(format!(
            "overlap ratio must lie in [0, 1), got {ol}"
        )));
    }
    Ok(())
}

/// Builds a pool of distinct random tuples. Collisions are redrawn, so the
/// pool always holds exactly `rows` distinct tuples.
pub fn synthetic_pool(cfg: &PoolConfig) -> Result<Dataset, WorkloadError> {
    if cfg.rows == 0 {
        return Err(WorkloadError::InvalidConfig("pool needs rows".into()));
    }
    if cfg.numeric_columns == 0 {
        return Err(WorkloadError::InvalidConfig(
            "pool needs at least one numeric column for range queries".into(),
        ));
    }
    if cfg.categorical_columns > 0 && cfg.categorical_cardinality == 0 {
        return Err(WorkloadError::InvalidConfig(
            "categorical cardinality must be positive".into(),
        ));
    }
    if !(cfg.numeric_max > 0.0) {
        return Err(WorkloadError::InvalidConfig(
            "numeric_max must be positive".into(),
        ));
    }
    let mut columns = Vec::new();
    for i in 0..cfg.numeric_columns {
        columns.push((format!("n{i}"), ColumnKind::Numeric));
    }
    for i in 0..cfg.categorical_columns {
        columns.push((format!("c{i}"), ColumnKind::Categorical));
    }
    let schema = Arc::new(crate::tabular::Schema::new(columns)?);
    let tokens: Vec<String> = (0..cfg.categorical_cardinality)
        .map(|i| format!("tok{i}"))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut seen = TupleSet::new();
    let mut rows = Vec::with_capacity(cfg.rows);
    let mut attempts = 0usize;
    let cap = cfg.rows.saturating_mul(20).max(1000);
    while rows.len() < cfg.rows {
        attempts += 1;
        if attempts > cap {
            return Err(WorkloadError::InvalidConfig(format!(
                "value space too small for {} distinct rows",
                cfg.rows
            )));
        }
        let mut row = Vec::with_capacity(schema.len());
        for _ in 0..cfg.numeric_columns {
            let v: f64 = rng.gen_range(0.0..cfg.numeric_max);
            row.push(Value::Num((v * 1000.0).round() / 1000.0));
        }
        for _ in 0..cfg.categorical_columns {
            let t = &tokens[rng.gen_range(0..tokens.len())];
            row.push(Value::cat(t));
        }
        if seen.insert(&row) {
            rows.push(row);
        }
    }
    Ok(Dataset::new("pool", schema, rows, 0.0)?)
}

/// Samples the owned dataset and `num_datasets` priced candidates from the
/// pool. The owned dataset is drawn first, the same way, at price zero.
pub fn generate_candidates(
    pool: &Dataset,
    cfg: &CandidateGenConfig,
) -> Result<(Dataset, Vec<Dataset>), WorkloadError> {
    if pool.is_empty() {
        return Err(WorkloadError::PoolTooSmall { need: 1, have: 0 });
    }
    if cfg.num_datasets == 0 {
        return Err(WorkloadError::InvalidConfig(
            "need at least one candidate dataset".into(),
        ));
    }
    check_fractions(cfg.s_min, cfg.s_max)?;

    let n = pool.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let width = (cfg.num_datasets.saturating_sub(1)).to_string().len().max(2);
    let sample_one = |rng: &mut ChaCha8Rng| -> Vec<crate::tabular::Tuple> {
        let s = rng.gen_range(cfg.s_min..=cfg.s_max);
        let k = ((s * n as f64).round() as usize).clamp(1, n);
        let mut idx = rand::seq::index::sample(rng, n, k).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| pool.rows[i].clone()).collect()
    };

    let owned_rows = sample_one(&mut rng);
    let owned = Dataset::new("d_u", Arc::clone(&pool.schema), owned_rows, 0.0)?;

    let mut candidates = Vec::with_capacity(cfg.num_datasets);
    for i in 0..cfg.num_datasets {
        let rows = sample_one(&mut rng);
        let w = 1.0 - rng.gen::<f64>(); // (0, 1]
        let price = w * rows.len() as f64;
        candidates.push(Dataset::new(
            format!("d_{i:0width$}"),
            Arc::clone(&pool.schema),
            rows,
            price,
        )?);
    }
    Ok((owned, candidates))
}

/// One drafted query before acceptance: its predicates, the support rows it
/// was built over, and the numeric-column count range its partner should
/// draw from.
struct QueryDraft<'a> {
    predicates: Vec<Predicate>,
    support: Vec<&'a Tuple>,
    k_r_range: std::ops::RangeInclusive<usize>,
}

/// The shared query-drafting machinery: validated dataset list, numeric
/// column indices, and the categorical (column, value) picks for which every
/// dataset has strictly more than `ol · |d|` matching rows.
struct QueryRecipe<'a> {
    datasets: &'a [&'a Dataset],
    numeric: Vec<usize>,
    qualifying: Vec<(usize, Arc<str>)>,
}

impl<'a> QueryRecipe<'a> {
    fn prepare(datasets: &'a [&'a Dataset], ol: f64) -> Result<QueryRecipe<'a>, WorkloadError> {
        if datasets.is_empty() {
            return Err(WorkloadError::InvalidConfig("no datasets".into()));
        }
        let schema = &datasets[0].schema;
        for d in datasets {
            if d.schema != *schema {
                return Err(WorkloadError::MixedSchemas(d.id.clone()));
            }
            if d.is_empty() {
                return Err(WorkloadError::PoolTooSmall { need: 1, have: 0 });
            }
        }
        let numeric: Vec<usize> = (0..schema.len())
            .filter(|&i| schema.columns()[i].1 == ColumnKind::Numeric)
            .collect();
        if numeric.is_empty() {
            return Err(WorkloadError::InvalidConfig(
                "query generation needs numeric columns".into(),
            ));
        }

        // Qualifying categorical picks are seed-independent.
        let mut qualifying: Vec<(usize, Arc<str>)> = Vec::new();
        for ci in 0..schema.len() {
            if schema.columns()[ci].1 != ColumnKind::Categorical {
                continue;
            }
            let mut counts: Vec<BTreeMap<&str, usize>> = Vec::with_capacity(datasets.len());
            for d in datasets {
                let mut m = BTreeMap::new();
                for row in &d.rows {
                    if let Value::Cat(t) = &row[ci] {
                        *m.entry(&**t).or_insert(0usize) += 1;
                    }
                }
                counts.push(m);
            }
            let mut tokens: Vec<&str> = counts.iter().flat_map(|m| m.keys().copied()).collect();
            tokens.sort_unstable();
            tokens.dedup();
            for t in tokens {
                let ok = datasets
                    .iter()
                    .zip(&counts)
                    .all(|(d, m)| m.get(t).copied().unwrap_or(0) as f64 > ol * d.len() as f64);
                if ok {
                    qualifying.push((ci, Arc::from(t)));
                }
            }
        }
        Ok(QueryRecipe {
            datasets,
            numeric,
            qualifying,
        })
    }

    fn schema(&self) -> &Arc<Schema> {
        &self.datasets[0].schema
    }

    /// One attempt at a first query: flip the categorical coin, build the
    /// support sample, and take ranges over it. `support_rows` sizes the
    /// per-dataset sample in the numeric-only branch. With `sub` set, each
    /// range is narrowed to a random sub-interval; otherwise it spans the
    /// full `[min, max]` of the support. `None` means the chosen branch is
    /// unavailable and the attempt should be redrawn.
    fn draft(
        &self,
        rng: &mut ChaCha8Rng,
        support_rows: impl Fn(usize) -> usize,
        sub: bool,
    ) -> Option<QueryDraft<'a>> {
        let k_c = rng.gen_range(0..2u8);
        if k_c == 1 {
            if self.qualifying.is_empty() {
                return None;
            }
            let (ci, token) = &self.qualifying[rng.gen_range(0..self.qualifying.len())];
            let mut support: Vec<&Tuple> = Vec::new();
            for d in self.datasets {
                for row in &d.rows {
                    if matches!(&row[*ci], Value::Cat(t) if t == token) {
                        support.push(row);
                    }
                }
            }
            let mut predicates =
                vec![Predicate::equals(self.schema().columns()[*ci].0.as_str(), &**token)];
            predicates.extend(self.numeric_ranges(rng, &support, 1..=3, sub));
            Some(QueryDraft {
                predicates,
                support,
                k_r_range: 1..=3,
            })
        } else {
            if self.numeric.len() < 2 {
                return None;
            }
            let mut support = Vec::new();
            for d in self.datasets {
                let k = support_rows(d.len()).clamp(1, d.len());
                let mut idx = rand::seq::index::sample(rng, d.len(), k).into_vec();
                idx.sort_unstable();
                support.extend(idx.into_iter().map(|i| &d.rows[i]));
            }
            let predicates = self.numeric_ranges(rng, &support, 2..=4, sub);
            Some(QueryDraft {
                predicates,
                support,
                k_r_range: 2..=4,
            })
        }
    }

    /// Range predicates over the support for a freshly drawn set of numeric
    /// columns. Full `[min, max]` spans by default; with `sub` set, each
    /// span is replaced by `[a, b]` where `a, b` are uniform order
    /// statistics inside it, so footprints vary from narrow to nearly full.
    fn numeric_ranges(
        &self,
        rng: &mut ChaCha8Rng,
        support: &[&Tuple],
        k_r: std::ops::RangeInclusive<usize>,
        sub: bool,
    ) -> Vec<Predicate> {
        let want = rng.gen_range(k_r).min(self.numeric.len());
        let mut pick = rand::seq::index::sample(rng, self.numeric.len(), want).into_vec();
        pick.sort_unstable();
        pick.into_iter()
            .map(|pi| {
                let ci = self.numeric[pi];
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for row in support {
                    if let Value::Num(v) = row[ci] {
                        lo = lo.min(v);
                        hi = hi.max(v);
                    }
                }
                if sub && hi > lo {
                    let u = rng.gen_range(lo..=hi);
                    let v = rng.gen_range(lo..=hi);
                    lo = u.min(v);
                    hi = u.max(v);
                }
                Predicate::range(self.schema().columns()[ci].0.as_str(), lo, hi)
                    .expect("support min <= max")
            })
            .collect()
    }
}

/// Generates a pool of query pairs. Each pair shares a support sample
/// `d_sp`; the first query may carry one categorical equality and takes
/// full `[min, max]` ranges over `d_sp` on its chosen columns, while the
/// numeric-only partner draws random sub-ranges inside those spans. A pair
/// is kept only when, on every dataset, the two queries share at least
/// `ol · |d|` result tuples.
pub fn generate_query_pool(
    datasets: &[&Dataset],
    cfg: &QueryGenConfig,
) -> Result<Vec<(Query, Query)>, WorkloadError> {
    check_overlap(cfg.ol)?;
    if cfg.pool_pairs == 0 {
        return Err(WorkloadError::InvalidConfig(
            "query pool size must be positive".into(),
        ));
    }
    let recipe = QueryRecipe::prepare(datasets, cfg.ol)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut pool = Vec::with_capacity(cfg.pool_pairs);
    let mut attempts = 0usize;
    while pool.len() < cfg.pool_pairs {
        attempts += 1;
        if attempts > cfg.max_attempts {
            return Err(WorkloadError::GenerationStalled {
                attempts,
                collected: pool.len(),
            });
        }
        let Some(draft) = recipe.draft(
            &mut rng,
            |n| ((cfg.ol * n as f64).ceil() as usize).clamp(1, n),
            false,
        ) else {
            continue;
        };
        let partner_preds =
            recipe.numeric_ranges(&mut rng, &draft.support, draft.k_r_range.clone(), true);

        let i = pool.len();
        let q = Query::new(format!("q{i:03}_a"), draft.predicates)?;
        let qp = Query::new(format!("q{i:03}_b"), partner_preds)?;

        let mut accepted = true;
        for d in datasets {
            let a = evaluate_query(d, &q)?;
            let b = evaluate_query(d, &qp)?;
            if (a.count_common(&b) as f64) < cfg.ol * d.len() as f64 {
                accepted = false;
                break;
            }
        }
        if accepted {
            pool.push((q, qp));
        }
    }
    Ok(pool)
}

/// Draws standalone queries with the same drafting recipe but no partner
/// and no overlap acceptance, narrowing every range to a random
/// sub-interval. The numeric-only branch sizes its support sample from a
/// fresh fraction in `support`; together with the sub-ranging, query
/// footprints run from narrow to nearly the full value space, which keeps
/// the resulting training targets spread out instead of saturating at the
/// whole dataset.
pub fn random_queries(
    datasets: &[&Dataset],
    count: usize,
    support: (f64, f64),
    seed: u64,
) -> Result<Vec<Query>, WorkloadError> {
    let (lo, hi) = support;
    if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
        return Err(WorkloadError::InvalidConfig(format!(
            "support fractions must satisfy 0 < lo <= hi <= 1, got [{lo}, {hi}]"
        )));
    }
    let recipe = QueryRecipe::prepare(datasets, 0.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0usize;
    let cap = count.saturating_mul(100).max(1000);
    while out.len() < count {
        attempts += 1;
        if attempts > cap {
            return Err(WorkloadError::GenerationStalled {
                attempts,
                collected: out.len(),
            });
        }
        let f = rng.gen_range(lo..=hi);
        let Some(draft) = recipe.draft(
            &mut rng,
            |n| ((f * n as f64).ceil() as usize).clamp(1, n),
            true,
        ) else {
            continue;
        };
        out.push(Query::new(format!("r{:03}", out.len()), draft.predicates)?);
    }
    Ok(out)
}

/// Draws `num_queries / 2` distinct pairs from the pool and flattens them
/// into a query set.
pub fn draw_query_set(
    pool: &[(Query, Query)],
    num_queries: usize,
    seed: u64,
) -> Result<QuerySet, WorkloadError> {
    if num_queries == 0 || num_queries % 2 != 0 {
        return Err(WorkloadError::InvalidConfig(
            "query count must be even and positive".into(),
        ));
    }
    let pairs = num_queries / 2;
    if pairs > pool.len() {
        return Err(WorkloadError::InsufficientPool {
            need: pairs,
            have: pool.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, pool.len(), pairs).into_vec();
    idx.sort_unstable();
    let mut queries = Vec::with_capacity(num_queries);
    for i in idx {
        queries.push(pool[i].0.clone());
        queries.push(pool[i].1.clone());
    }
    Ok(QuerySet::new(queries)?)
}

#[derive(Debug)]
pub enum WorkloadError {
    InvalidConfig(String),
    PoolTooSmall { need: usize, have: usize },
    MixedSchemas(String),
    GenerationStalled { attempts: usize, collected: usize },
    InsufficientPool { need: usize, have: usize },
    Tabular(TabularError),
}

impl fmt::Display for WorkloadError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WorkloadError::InvalidConfig(msg) => write!(f, "invalid config: {msg}"),
            WorkloadError::PoolTooSmall { need, have } => {
                write!(f, "pool too small: need {need} rows, have {have}")
            }
            WorkloadError::MixedSchemas(id) => {
                write!(f, "dataset {id} does not share the pool schema")
            }
            WorkloadError::GenerationStalled { attempts, collected } => write!(
                f,
                "query generation stalled after {attempts} attempts with {collected} pairs"
            ),
            WorkloadError::InsufficientPool { need, have } => {
                write!(f, "need {need} pairs but the pool holds {have}")
            }
            WorkloadError::Tabular(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for WorkloadError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            WorkloadError::Tabular(e) => Some(e),
            _ => None,
        }
    }
}

impl From<TabularError> for WorkloadError {
    fn from(e: TabularError) -> Self {
        WorkloadError::Tabular(e)
    }
}
