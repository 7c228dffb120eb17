//! Tabular data model: schemas, typed tuples, datasets, and conjunctive
//! range/equality queries with exact (set-semantics) evaluation.
//!
//! Tuple identity is defined by a canonical byte encoding so that tuples can
//! be deduplicated and unioned across datasets: numeric values compare by the
//! exact bit pattern of the ingested 64-bit float, categorical tokens compare
//! by string equality after Unicode NFC canonicalization and whitespace
//! trimming (both applied once, at value construction).

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::Arc;

use unicode_normalization::UnicodeNormalization;

/// Column type: real-valued or token-valued.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColumnKind {
    Numeric,
    Categorical,
}

/// A single cell value.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Num(f64),
    Cat(Arc<str>),
}

impl Value {
    /// Builds a categorical value with the canonical token form
    /// (trimmed, NFC-normalized).
    pub fn cat(token: &str) -> Value {
        Value::Cat(canonical_token(token).into())
    }

    pub fn kind(&self) -> ColumnKind {
        match self {
            Value::Num(_) => ColumnKind::Numeric,
            Value::Cat(_) => ColumnKind::Categorical,
        }
    }

    pub fn as_num(&self) -> Option<f64> {
        match self {
            Value::Num(x) => Some(*x),
            Value::Cat(_) => None,
        }
    }

    pub fn as_token(&self) -> Option<&str> {
        match self {
            Value::Num(_) => None,
            Value::Cat(t) => Some(t),
        }
    }
}

/// Canonical token form used everywhere tokens are compared or stored.
pub fn canonical_token(raw: &str) -> String {
    raw.trim().nfc().collect()
}

/// An ordered list of named, typed columns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schema {
    columns: Vec<(String, ColumnKind)>,
    by_name: HashMap<String, usize>,
}

impl Schema {
    pub fn new(columns: Vec<(String, ColumnKind)>) -> Result<Schema, TabularError> {
        let mut by_name = HashMap::with_capacity(columns.len());
        for (i, (name, _)) in columns.iter().enumerate() {
            if by_name.insert(name.clone(), i).is_some() {
                return Err(TabularError::DuplicateColumn(name.clone()));
            }
        }
        Ok(Schema { columns, by_name })
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn columns(&self) -> &[(String, ColumnKind)] {
        &self.columns
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn kind_of(&self, name: &str) -> Option<ColumnKind> {
        self.index_of(name).map(|i| self.columns[i].1)
    }

    /// Names of all columns of the given kind, in schema order.
    pub fn names_of_kind(&self, kind: ColumnKind) -> Vec<&str> {
        self.columns
            .iter()
            .filter(|(_, k)| *k == kind)
            .map(|(n, _)| n.as_str())
            .collect()
    }
}

/// One row; values are stored in schema column order.
pub type Tuple = Vec<Value>;

/// A priced collection of tuples under a shared schema. Rows may repeat;
/// query evaluation and distinctiveness always work on distinct tuples.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub id: String,
    pub schema: Arc<Schema>,
    pub rows: Vec<Tuple>,
    /// Acquisition price; zero for a dataset the user already owns.
    pub price: f64,
}

impl Dataset {
    pub fn new(
        id: impl Into<String>,
        schema: Arc<Schema>,
        rows: Vec<Tuple>,
        price: f64,
    ) -> Result<Dataset, TabularError> {
        if !(price >= 0.0) {
            return Err(TabularError::NegativePrice(price));
        }
        for (r, row) in rows.iter().enumerate() {
            if row.len() != schema.len() {
                return Err(TabularError::ArityMismatch {
                    row: r,
                    expected: schema.len(),
                    got: row.len(),
                });
            }
            for (c, value) in row.iter().enumerate() {
                let (name, kind) = &schema.columns()[c];
                if value.kind() != *kind {
                    return Err(TabularError::KindMismatch {
                        column: name.clone(),
                    });
                }
                if let Value::Num(x) = value {
                    if !x.is_finite() {
                        return Err(TabularError::NonFiniteNumber {
                            column: name.clone(),
                            row: r,
                        });
                    }
                }
            }
        }
        Ok(Dataset {
            id: id.into(),
            schema,
            rows,
            price,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// All rows deduplicated under canonical tuple identity.
    pub fn distinct_tuples(&self) -> TupleSet {
        let mut set = TupleSet::new();
        for row in &self.rows {
            set.insert(row);
        }
        set
    }
}

/// A single-column filter.
#[derive(Debug, Clone, PartialEq)]
pub enum Predicate {
    /// Inclusive numeric range `low <= x <= high`.
    Range {
        column: String,
        low: f64,
        high: f64,
    },
    /// Categorical equality against a canonical token.
    Equals { column: String, token: String },
}

impl Predicate {
    pub fn range(column: impl Into<String>, low: f64, high: f64) -> Result<Predicate, TabularError> {
        if !(low <= high) {
            return Err(TabularError::EmptyRange { low, high });
        }
        Ok(Predicate::Range {
            column: column.into(),
            low,
            high,
        })
    }

    pub fn equals(column: impl Into<String>, token: &str) -> Predicate {
        Predicate::Equals {
            column: column.into(),
            token: canonical_token(token),
        }
    }

    pub fn column(&self) -> &str {
        match self {
            Predicate::Range { column, .. } => column,
            Predicate::Equals { column, .. } => column,
        }
    }
}

/// A conjunction of predicates, at most one per column.
#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub id: String,
    predicates: Vec<Predicate>,
}

impl Query {
    pub fn new(id: impl Into<String>, predicates: Vec<Predicate>) -> Result<Query, TabularError> {
        let mut seen = HashSet::new();
        for p in &predicates {
            if !seen.insert(p.column().to_string()) {
                return Err(TabularError::DuplicatePredicate(p.column().to_string()));
            }
        }
        Ok(Query {
            id: id.into(),
            predicates,
        })
    }

    pub fn predicates(&self) -> &[Predicate] {
        &self.predicates
    }

    /// Columns this query constrains, in predicate order.
    pub fn columns(&self) -> Vec<&str> {
        self.predicates.iter().map(|p| p.column()).collect()
    }

    fn matches(&self, schema: &Schema, row: &[Value]) -> Result<bool, TabularError> {
        for p in &self.predicates {
            let idx = schema
                .index_of(p.column())
                .ok_or_else(|| TabularError::UnknownColumn(p.column().to_string()))?;
            let ok = match (p, &row[idx]) {
                (Predicate::Range { low, high, .. }, Value::Num(x)) => *low <= *x && *x <= *high,
                (Predicate::Equals { token, .. }, Value::Cat(t)) => token.as_str() == &**t,
                _ => {
                    return Err(TabularError::KindMismatch {
                        column: p.column().to_string(),
                    })
                }
            };
            if !ok {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

/// A nonempty batch of queries with unique ids.
#[derive(Debug, Clone)]
pub struct QuerySet {
    queries: Vec<Query>,
}

impl QuerySet {
    pub fn new(queries: Vec<Query>) -> Result<QuerySet, TabularError> {
        if queries.is_empty() {
            return Err(TabularError::EmptyQuerySet);
        }
        let mut ids = HashSet::new();
        for q in &queries {
            if !ids.insert(q.id.clone()) {
                return Err(TabularError::DuplicateQueryId(q.id.clone()));
            }
        }
        Ok(QuerySet { queries })
    }

    pub fn queries(&self) -> &[Query] {
        &self.queries
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// A deduplicated set of tuples, keyed by canonical byte encoding.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TupleSet {
    keys: HashSet<Box<[u8]>>,
}

impl TupleSet {
    pub fn new() -> TupleSet {
        TupleSet::default()
    }

    /// Inserts a tuple; returns true if it was not already present.
    pub fn insert(&mut self, tuple: &[Value]) -> bool {
        self.keys.insert(encode_tuple(tuple).into_boxed_slice())
    }

    pub fn contains(&self, tuple: &[Value]) -> bool {
        self.keys.contains(encode_tuple(tuple).as_slice())
    }

    pub fn contains_key(&self, key: &[u8]) -> bool {
        self.keys.contains(key)
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Adds every tuple of `other` to `self`.
    pub fn union_with(&mut self, other: &TupleSet) {
        for k in &other.keys {
            self.keys.insert(k.clone());
        }
    }

    /// Number of tuples in `other` not present in `self`.
    pub fn count_new(&self, other: &TupleSet) -> usize {
        other.keys.iter().filter(|k| !self.keys.contains(*k)).count()
    }

    /// Number of tuples present in both sets.
    pub fn count_common(&self, other: &TupleSet) -> usize {
        let (small, large) = if self.len() <= other.len() {
            (self, other)
        } else {
            (other, self)
        };
        small.keys.iter().filter(|k| large.keys.contains(*k)).count()
    }
}

/// Canonical byte encoding of a tuple; equal tuples encode identically and
/// distinct tuples encode distinctly (length-prefixed fields, kind tags).
pub fn encode_tuple(tuple: &[Value]) -> Vec<u8> {
    let mut out = Vec::with_capacity(tuple.len() * 9);
    for v in tuple {
        match v {
            Value::Num(x) => {
                out.push(0u8);
                out.extend_from_slice(&x.to_bits().to_le_bytes());
            }
            Value::Cat(t) => {
                out.push(1u8);
                out.extend_from_slice(&(t.len() as u32).to_le_bytes());
                out.extend_from_slice(t.as_bytes());
            }
        }
    }
    out
}

/// Evaluates one query over a dataset, returning the distinct matching tuples.
pub fn evaluate_query(dataset: &Dataset, query: &Query) -> Result<TupleSet, TabularError> {
    let mut out = TupleSet::new();
    for row in &dataset.rows {
        if query.matches(&dataset.schema, row)? {
            out.insert(row);
        }
    }
    Ok(out)
}

/// Distinct tuples of `dataset` matching at least one query in the set.
pub fn query_set_union(dataset: &Dataset, queries: &QuerySet) -> Result<TupleSet, TabularError> {
    let mut out = TupleSet::new();
    for row in &dataset.rows {
        for q in queries.queries() {
            if q.matches(&dataset.schema, row)? {
                out.insert(row);
                break;
            }
        }
    }
    Ok(out)
}

/// Sum of dataset prices.
pub fn total_price<'a>(datasets: impl IntoIterator<Item = &'a Dataset>) -> f64 {
    datasets.into_iter().map(|d| d.price).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub enum TabularError {
    UnknownColumn(String),
    KindMismatch { column: String },
    DuplicateColumn(String),
    DuplicatePredicate(String),
    DuplicateQueryId(String),
    EmptyQuerySet,
    EmptyRange { low: f64, high: f64 },
    NegativePrice(f64),
    ArityMismatch { row: usize, expected: usize, got: usize },
    NonFiniteNumber { column: String, row: usize },
}

impl fmt::Display for TabularError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TabularError::UnknownColumn(c) => write!(f, "unknown column {c:?}"),
            TabularError::KindMismatch { column } => {
                write!(f, "predicate/value kind mismatch on column {column:?}")
            }
            TabularError::DuplicateColumn(c) => write!(f, "duplicate column {c:?} in schema"),
            TabularError::DuplicatePredicate(c) => {
                write!(f, "more than one predicate on column {c:?}")
            }
            TabularError::DuplicateQueryId(id) => write!(f, "duplicate query id {id:?}"),
            TabularError::EmptyQuerySet => write!(f, "query set must be nonempty"),
            TabularError::EmptyRange { low, high } => {
                write!(f, "range low {low} exceeds high {high}")
            }
            TabularError::NegativePrice(p) => write!(f, "dataset price {p} is negative"),
            TabularError::ArityMismatch { row, expected, got } => {
                write!(f, "row {row} has {got} values, schema expects {expected}")
            }
            TabularError::NonFiniteNumber { column, row } => {
                write!(f, "non-finite number in column {column:?}, row {row}")
            }
        }
    }
}

impl std::error::Error for TabularError {}
