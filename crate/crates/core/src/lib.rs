//! Budgeted dataset assemblage.
//!
//! Given a set of candidate tabular datasets with prices, a dataset the user
//! already owns, a set of range/equality queries describing the user's
//! interest, and an acquisition budget, this crate selects a subset of the
//! candidates that (approximately) maximizes *distinctiveness*: the number of
//! distinct tuples, across the union of the selection and the owned dataset,
//! that satisfy at least one query.
//!
//! Two selection paths are provided:
//!
//! * [`exact`]: ground-truth distinctiveness by evaluating queries over raw
//!   tuples, plus a budgeted greedy selector with an approximation guarantee.
//! * [`mlgreedy`]: the same greedy loop driven by a learned cardinality
//!   estimator over fixed-size dataset summaries ([`summary`], [`estimator`],
//!   [`nn`]), so the online phase never touches raw tuples.
//!
//! Supporting modules: [`workload`] generates reproducible candidate sets and
//! query workloads from a data pool, [`pipeline`] builds training corpora and
//! trains the estimator, and [`metrics`] has the evaluation arithmetic
//! (q-error, percentiles).

pub mod estimator;
pub mod exact;
pub mod metrics;
pub mod mlgreedy;
pub mod nn;
pub mod pipeline;
pub mod sample_data;
pub mod summary;
pub mod tabular;
pub mod workload;

pub(crate) mod wire;
