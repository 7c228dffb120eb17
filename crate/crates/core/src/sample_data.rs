//! A small, fully worked housing-market instance used by tests, docs, and the
//! CLI's `--demo` paths.
//!
//! The user owns `d_u` and can buy `d_1` ($100), `d_5` ($100), or `d_10`
//! ($200) with a budget of $300. Two queries describe the user's interest.
//! Useful ground truths of this instance:
//!
//! * each query matches exactly 2 tuples on `d_5` and on `d_10`, so a
//!   per-query cardinality sum over `{d_5, d_10}` reports 8, while the true
//!   number of distinct matching tuples is 3;
//! * `{d_5, d_10}` is the unique affordable subset of maximum
//!   distinctiveness, 4 (counting the owned dataset's matches);
//! * greedy selection by gain per price picks `d_5` then `d_10`;
//! * `d_1`'s `city` column has 2 distinct tokens and its `price` column 4
//!   distinct values, which makes its two-column quantizers convenient for
//!   worked examples (1-bit and 2-bit codes).

use std::sync::Arc;

use crate::tabular::{ColumnKind, Dataset, Predicate, Query, QuerySet, Schema, Tuple, Value};

/// Shared schema of the housing instance: `type`, `city` categorical,
/// `price` numeric.
pub fn housing_schema() -> Arc<Schema> {
    Arc::new(
        Schema::new(vec![
            ("type".into(), ColumnKind::Categorical),
            ("city".into(), ColumnKind::Categorical),
            ("price".into(), ColumnKind::Numeric),
        ])
        .unwrap(),
    )
}

fn row(kind: &str, city: &str, price: f64) -> Tuple {
    vec![Value::cat(kind), Value::cat(city), Value::Num(price)]
}

/// The full worked instance.
pub struct HousingExample {
    pub owned: Dataset,
    /// `d_1`, `d_5`, `d_10`, in that order.
    pub candidates: Vec<Dataset>,
    pub queries: QuerySet,
    pub budget: f64,
}

/// Builds the worked instance. Deterministic, no randomness involved.
pub fn housing_example() -> HousingExample {
    let schema = housing_schema();

    // Tuples shared across datasets (tuple identity is by value):
    //   a = (Unit, Melbourne, 620k)       only in d_5
    //   b = (House, Melbourne, 700k)      in d_u, d_1, d_5 and d_10
    //   c = (House, Melbourne, 750k)      only in d_10
    //   e = (Townhouse, Melbourne, 510k)  only in d_u
    let a = row("Unit", "Melbourne", 620_000.0);
    let b = row("House", "Melbourne", 700_000.0);
    let c = row("House", "Melbourne", 750_000.0);
    let e = row("Townhouse", "Melbourne", 510_000.0);

    let owned = Dataset::new(
        "d_u",
        schema.clone(),
        vec![b.clone(), e, row("House", "Sydney", 300_000.0)],
        0.0,
    )
    .unwrap();

    let d_1 = Dataset::new(
        "d_1",
        schema.clone(),
        vec![
            b.clone(),
            row("Unit", "Sydney", 400_000.0),
            row("House", "Sydney", 790_000.0),
            row("Unit", "Sydney", 1_000_000.0),
        ],
        100.0,
    )
    .unwrap();

    let d_5 = Dataset::new(
        "d_5",
        schema.clone(),
        vec![
            a,
            b.clone(),
            row("House", "Sydney", 300_000.0),
            row("Unit", "Sydney", 980_000.0),
        ],
        100.0,
    )
    .unwrap();

    let d_10 = Dataset::new(
        "d_10",
        schema,
        vec![
            b,
            c,
            row("Unit", "Sydney", 450_000.0),
            row("House", "Sydney", 900_000.0),
        ],
        200.0,
    )
    .unwrap();

    let queries = QuerySet::new(vec![
        Query::new(
            "q_1",
            vec![Predicate::range("price", 600_000.0, 760_000.0).unwrap()],
        )
        .unwrap(),
        Query::new(
            "q_2",
            vec![
                Predicate::range("price", 500_000.0, 800_000.0).unwrap(),
                Predicate::equals("city", "Melbourne"),
            ],
        )
        .unwrap(),
    ])
    .unwrap();

    HousingExample {
        owned,
        candidates: vec![d_1, d_5, d_10],
        queries,
        budget: 300.0,
    }
}
