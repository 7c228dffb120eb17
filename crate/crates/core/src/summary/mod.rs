//! Offline per-dataset summaries.
//!
//! A summary replaces a dataset with a handful of column-set embeddings: the
//! most associated column pairs are selected from a correlation graph, each
//! pair gets a quantizer, and every projected row is pushed through the row
//! layer; the per-set arithmetic mean of those row embeddings (plus the row
//! count) is all the online estimator ever sees.

pub mod correlate;
pub mod quantize;

pub use correlate::correlation_scores;
pub use quantize::{ColumnCoder, ColumnQuantizer, QuantizerSpec};

use std::collections::BTreeMap;
use std::fmt;
use std::io::{self, Read, Write};
use std::sync::Arc;

use ndarray::Array1;

use crate::nn::EstimatorBundle;
use crate::tabular::{ColumnKind, Dataset};
use crate::wire;

/// An identity-carrying set of column names, kept sorted so that equal sets
/// compare equal regardless of construction order.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ColumnSet(Vec<String>);

impl ColumnSet {
    pub fn new(names: impl IntoIterator<Item = String>) -> Result<ColumnSet, SummaryError> {
        let mut v: Vec<String> = names.into_iter().collect();
        v.sort();
        if v.is_empty() {
            return Err(SummaryError::EmptyColumnSet);
        }
        if v.windows(2).any(|w| w[0] == w[1]) {
            return Err(SummaryError::DuplicateColumn);
        }
        Ok(ColumnSet(v))
    }

    pub fn pair(a: &str, b: &str) -> Result<ColumnSet, SummaryError> {
        ColumnSet::new([a.to_string(), b.to_string()])
    }

    pub fn names(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.0.binary_search_by(|probe| probe.as_str().cmp(name)).is_ok()
    }

    /// True when at least one of `columns` belongs to the set.
    pub fn intersects<'a>(&self, columns: impl IntoIterator<Item = &'a str>) -> bool {
        columns.into_iter().any(|c| self.contains(c))
    }
}

impl fmt::Display for ColumnSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0.join("+"))
    }
}

/// Knobs for summary construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SummaryParams {
    /// Column-set selection stops once the estimated storage of the selected
    /// projections reaches this many bytes.
    pub storage_limit_bytes: usize,
    /// Rows sampled for association scoring.
    pub correlation_sample_rows: usize,
    /// Seed for the association sample.
    pub seed: u64,
}

impl Default for SummaryParams {
    fn default() -> Self {
        SummaryParams {
            storage_limit_bytes: 4096,
            correlation_sample_rows: 2000,
            seed: 0,
        }
    }
}

/// Estimated bytes per row of a projection: numeric columns count as eight
/// bytes, categorical columns as their mean token length.
fn column_byte_width(d: &Dataset, idx: usize) -> f64 {
    match d.schema.columns()[idx].1 {
        ColumnKind::Numeric => 8.0,
        ColumnKind::Categorical => {
            let total: usize = d
                .rows
                .iter()
                .map(|r| r[idx].as_token().map_or(0, str::len))
                .sum();
            total as f64 / d.rows.len() as f64
        }
    }
}

/// Greedy column-set selection on the correlation graph: repeatedly emit the
/// strongest remaining column pair (ties to the lexicographically smaller
/// pair) and drop its edge, until the cumulative estimated projection
/// storage reaches the limit or no edges remain. The pair that crosses the
/// limit is still emitted, so at least one set is returned for any limit.
pub fn identify_column_sets(
    d: &Dataset,
    params: &SummaryParams,
) -> Result<Vec<ColumnSet>, SummaryError> {
    if d.rows.is_empty() {
        return Err(SummaryError::EmptyDataset);
    }
    if d.schema.len() < 2 {
        return Err(SummaryError::TooFewColumns);
    }
    let mut edges = correlation_scores(d, params.correlation_sample_rows, params.seed);
    let widths: BTreeMap<&str, f64> = d
        .schema
        .columns()
        .iter()
        .enumerate()
        .map(|(i, (name, _))| (name.as_str(), column_byte_width(d, i)))
        .collect();

    let mut sets = Vec::new();
    let mut storage = 0.0f64;
    while !edges.is_empty() {
        let best = edges
            .iter()
            .fold(None::<(&(String, String), f64)>, |acc, (k, &w)| match acc {
                Some((_, bw)) if bw >= w => acc,
                _ => Some((k, w)),
            })
            .map(|(k, _)| k.clone())
            .expect("nonempty edge map");
        edges.remove(&best);
        let (a, b) = best;
        storage += d.rows.len() as f64 * (widths[a.as_str()] + widths[b.as_str()]);
        sets.push(ColumnSet::new([a, b]).expect("distinct columns"));
        if storage >= params.storage_limit_bytes as f64 {
            break;
        }
    }
    Ok(sets)
}

/// One column set's worth of summary: the quantizer that built the codes and
/// the mean row embedding. The quantizer is shared so that merged summaries
/// can reuse it without copying bucket tables.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryEntry {
    pub columns: ColumnSet,
    pub quantizer: Arc<QuantizerSpec>,
    pub embedding: Array1<f64>,
}

/// The offline artifact for one dataset: row count plus one entry per
/// selected column set, sorted by column names.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSummary {
    pub id: String,
    pub tuple_count: u64,
    pub embed_dim: usize,
    entries: Vec<SummaryEntry>,
}

impl DataSummary {
    pub fn from_entries(
        id: impl Into<String>,
        tuple_count: u64,
        embed_dim: usize,
        mut entries: Vec<SummaryEntry>,
    ) -> Result<DataSummary, SummaryError> {
        entries.sort_by(|a, b| a.columns.cmp(&b.columns));
        if entries.windows(2).any(|w| w[0].columns == w[1].columns) {
            return Err(SummaryError::DuplicateEntry);
        }
        for e in &entries {
            if e.embedding.len() != embed_dim {
                return Err(SummaryError::EmbedDimMismatch {
                    expected: embed_dim,
                    found: e.embedding.len(),
                });
            }
        }
        Ok(DataSummary {
            id: id.into(),
            tuple_count,
            embed_dim,
            entries,
        })
    }

    pub fn entries(&self) -> &[SummaryEntry] {
        &self.entries
    }

    pub fn entry(&self, set: &ColumnSet) -> Option<&SummaryEntry> {
        self.entries
            .binary_search_by(|e| e.columns.cmp(set))
            .ok()
            .map(|i| &self.entries[i])
    }

    pub fn column_sets(&self) -> impl Iterator<Item = &ColumnSet> {
        self.entries.iter().map(|e| &e.columns)
    }

    /// Replaces the embedding of `set`, leaving everything else shared.
    pub fn with_embedding(
        &self,
        set: &ColumnSet,
        embedding: Array1<f64>,
    ) -> Result<DataSummary, SummaryError> {
        let mut out = self.clone();
        let idx = out
            .entries
            .binary_search_by(|e| e.columns.cmp(set))
            .map_err(|_| SummaryError::MissingColumnSet(set.to_string()))?;
        if embedding.len() != out.embed_dim {
            return Err(SummaryError::EmbedDimMismatch {
                expected: out.embed_dim,
                found: embedding.len(),
            });
        }
        out.entries[idx].embedding = embedding;
        Ok(out)
    }

    /// Rounds embeddings through `f32`, matching what persistence stores.
    pub fn round_to_f32(&mut self) {
        for e in &mut self.entries {
            e.embedding.mapv_inplace(|v| v as f32 as f64);
        }
    }

    pub fn save<W: Write>(&self, w: &mut W) -> Result<(), SummaryError> {
        w.write_all(b"DSUM")?;
        wire::write_u16(w, 1)?;
        wire::write_u16(
            w,
            u16::try_from(self.embed_dim).map_err(|_| SummaryError::Corrupt("embed dim".into()))?,
        )?;
        wire::write_u64(w, self.tuple_count)?;
        wire::write_u16(
            w,
            u16::try_from(self.entries.len())
                .map_err(|_| SummaryError::Corrupt("entry count".into()))?,
        )?;
        for e in &self.entries {
            wire::write_u16(w, e.columns.len() as u16)?;
            for name in e.columns.names() {
                wire::write_str(w, name)?;
            }
            for col in e.quantizer.columns() {
                write_quantizer_column(w, col)?;
            }
            for &v in e.embedding.iter() {
                wire::write_f32(w, v as f32)?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.save(&mut buf).expect("writing to memory cannot fail");
        buf
    }

    pub fn load<R: Read>(id: impl Into<String>, r: &mut R) -> Result<DataSummary, SummaryError> {
        wire::expect_magic(r, b"DSUM").map_err(|_| SummaryError::Corrupt("bad magic".into()))?;
        let version = wire::read_u16(r)?;
        if version != 1 {
            return Err(SummaryError::UnsupportedVersion(version));
        }
        let embed_dim = wire::read_u16(r)? as usize;
        let tuple_count = wire::read_u64(r)?;
        let entry_count = wire::read_u16(r)? as usize;
        let mut entries = Vec::with_capacity(entry_count);
        for _ in 0..entry_count {
            let ncols = wire::read_u16(r)? as usize;
            let mut names = Vec::with_capacity(ncols);
            for _ in 0..ncols {
                names.push(wire::read_str(r)?);
            }
            let columns = ColumnSet::new(names.clone())?;
            let mut cols = Vec::with_capacity(ncols);
            for expected in &names {
                let col = read_quantizer_column(r)?;
                if &col.name != expected {
                    return Err(SummaryError::Corrupt(format!(
                        "column order mismatch: {} vs {expected}",
                        col.name
                    )));
                }
                cols.push(col);
            }
            let quantizer = Arc::new(QuantizerSpec::from_columns(cols));
            let mut embedding = Array1::zeros(embed_dim);
            for v in embedding.iter_mut() {
                *v = f64::from(wire::read_f32(r)?);
            }
            entries.push(SummaryEntry {
                columns,
                quantizer,
                embedding,
            });
        }
        DataSummary::from_entries(id, tuple_count, embed_dim, entries)
    }
}

/// Wire codec for one quantizer column, shared by the summary and corpus
/// file formats.
pub(crate) fn write_quantizer_column<W: Write>(
    w: &mut W,
    col: &ColumnQuantizer,
) -> Result<(), SummaryError> {
    wire::write_str(w, &col.name)?;
    wire::write_u8(w, col.bits)?;
    match &col.coder {
        ColumnCoder::Numeric { edges, min, max } => {
            wire::write_u8(w, 0)?;
            wire::write_f64(w, *min)?;
            wire::write_f64(w, *max)?;
            wire::write_u32(w, edges.len() as u32)?;
            for &edge in edges {
                wire::write_f64(w, edge)?;
            }
        }
        ColumnCoder::Categorical { tokens } => {
            wire::write_u8(w, 1)?;
            wire::write_u32(w, tokens.len() as u32)?;
            for t in tokens {
                wire::write_str(w, t)?;
            }
        }
    }
    Ok(())
}

pub(crate) fn read_quantizer_column<R: Read>(r: &mut R) -> Result<ColumnQuantizer, SummaryError> {
    let name = wire::read_str(r)?;
    let bits = wire::read_u8(r)?;
    if bits == 0 || bits > 32 {
        return Err(SummaryError::Corrupt(format!("bad bit width {bits}")));
    }
    let kind_code = wire::read_u8(r)?;
    let (kind, coder) = match kind_code {
        0 => {
            let min = wire::read_f64(r)?;
            let max = wire::read_f64(r)?;
            let count = wire::read_u32(r)? as usize;
            let mut edges = Vec::with_capacity(count);
            for _ in 0..count {
                edges.push(wire::read_f64(r)?);
            }
            (ColumnKind::Numeric, ColumnCoder::Numeric { edges, min, max })
        }
        1 => {
            let count = wire::read_u32(r)? as usize;
            let mut tokens: Vec<Arc<str>> = Vec::with_capacity(count);
            for _ in 0..count {
                tokens.push(wire::read_str(r)?.into());
            }
            (ColumnKind::Categorical, ColumnCoder::Categorical { tokens })
        }
        other => return Err(SummaryError::Corrupt(format!("bad column kind {other}"))),
    };
    Ok(ColumnQuantizer {
        name,
        kind,
        bits,
        coder,
    })
}

/// Builds the summary of `d`: identifies column sets, fits a quantizer per
/// set, and averages the row embeddings of every projected row (the full
/// multiset, so the row count `n` stays the mean's denominator).
pub fn summarize(
    d: &Dataset,
    bundle: &EstimatorBundle,
    params: &SummaryParams,
) -> Result<DataSummary, SummaryError> {
    let sets = identify_column_sets(d, params)?;
    let hyper = &bundle.hyper;
    let col_cap = hyper.max_col_bits.min(32) as u8;
    let mut entries = Vec::with_capacity(sets.len());
    for set in sets {
        let spec = QuantizerSpec::build(d, &set, hyper.code_bits as usize, col_cap)?;
        let col_idx: Vec<usize> = set
            .names()
            .iter()
            .map(|n| d.schema.index_of(n).expect("set columns come from schema"))
            .collect();
        let mut acc = Array1::<f64>::zeros(hyper.embed());
        let mut codes = Vec::with_capacity(col_idx.len());
        let mut bits = Vec::new();
        for row in &d.rows {
            codes.clear();
            for (k, &ci) in col_idx.iter().enumerate() {
                codes.push(spec.code(k, &row[ci]));
            }
            spec.active_bits(&codes, &mut bits);
            acc += &bundle.phi_r.forward_bits(&bits);
        }
        acc /= d.rows.len() as f64;
        entries.push(SummaryEntry {
            columns: set,
            quantizer: Arc::new(spec),
            embedding: acc,
        });
    }
    DataSummary::from_entries(d.id.clone(), d.rows.len() as u64, hyper.embed(), entries)
}

#[derive(Debug)]
pub enum SummaryError {
    EmptyDataset,
    TooFewColumns,
    EmptyColumnSet,
    DuplicateColumn,
    UnknownColumn(String),
    /// Total code width cannot fit even one bit per column.
    CodeWidthTooSmall,
    DuplicateEntry,
    MissingColumnSet(String),
    EmbedDimMismatch { expected: usize, found: usize },
    UnsupportedVersion(u16),
    Corrupt(String),
    Io(io::Error),
}

impl fmt::Display for SummaryError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SummaryError::EmptyDataset => write!(f, "dataset has no rows"),
            SummaryError::TooFewColumns => {
                write!(f, "column-set selection needs at least two columns")
            }
            SummaryError::EmptyColumnSet => write!(f, "column set is empty"),
            SummaryError::DuplicateColumn => write!(f, "duplicate column in column set"),
            SummaryError::UnknownColumn(name) => write!(f, "column {name} not in schema"),
            SummaryError::CodeWidthTooSmall => {
                write!(f, "code width cannot fit one bit per column")
            }
            SummaryError::DuplicateEntry => write!(f, "duplicate column set in summary"),
            SummaryError::MissingColumnSet(set) => {
                write!(f, "summary has no entry for column set {set}")
            }
            SummaryError::EmbedDimMismatch { expected, found } => {
                write!(f, "embedding length {found}, summary expects {expected}")
            }
            SummaryError::UnsupportedVersion(v) => write!(f, "unsupported summary version {v}"),
            SummaryError::Corrupt(what) => write!(f, "corrupt summary: {what}"),
            SummaryError::Io(e) => write!(f, "summary i/o: {e}"),
        }
    }
}

impl std::error::Error for SummaryError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            SummaryError::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<io::Error> for SummaryError {
    fn from(e: io::Error) -> Self {
        SummaryError::Io(e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::HyperParams;
    use crate::tabular::{Schema, Value};
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_hyper() -> HyperParams {
        HyperParams {
            code_bits: 64,
            max_col_bits: 6,
            embed_dim: 16,
            max_sets: 4,
        }
    }

    /// Three numeric columns where a and b are tightly coupled and c is
    /// independent noise.
    fn coupled_dataset(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<Value>> = (0..n)
            .map(|_| {
                let x: f64 = rng.gen_range(0.0..16.0);
                vec![
                    Value::Num(x.floor()),
                    Value::Num(x.floor() * 2.0 + 1.0),
                    Value::Num(rng.gen_range(0.0..1.0)),
                ]
            })
            .collect();
        Dataset::new(
            "coupled",
            Arc::new(
                Schema::new(vec![
                    ("a".to_string(), ColumnKind::Numeric),
                    ("b".to_string(), ColumnKind::Numeric),
                    ("c".to_string(), ColumnKind::Numeric),
                ])
                .unwrap(),
            ),
            rows,
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn strongest_pair_comes_first_and_limit_truncates() {
        let d = coupled_dataset(100, 3);
        // Three numeric columns: every pair costs 100 * 16 = 1600 bytes.
        let all = identify_column_sets(
            &d,
            &SummaryParams {
                storage_limit_bytes: 4801,
                ..SummaryParams::default()
            },
        )
        .unwrap();
        assert_eq!(all.len(), 3);
        assert_eq!(all[0], ColumnSet::pair("a", "b").unwrap());

        let two = identify_column_sets(
            &d,
            &SummaryParams {
                storage_limit_bytes: 3000,
                ..SummaryParams::default()
            },
        )
        .unwrap();
        assert_eq!(two.len(), 2);
        // Even a zero limit emits the strongest pair.
        let one = identify_column_sets(
            &d,
            &SummaryParams {
                storage_limit_bytes: 0,
                ..SummaryParams::default()
            },
        )
        .unwrap();
        assert_eq!(one, vec![ColumnSet::pair("a", "b").unwrap()]);
    }

    #[test]
    fn summarize_produces_sorted_nonnegative_entries() {
        let d = coupled_dataset(200, 5);
        let bundle = EstimatorBundle::new_random(small_hyper(), 42);
        let params = SummaryParams {
            storage_limit_bytes: 100_000,
            ..SummaryParams::default()
        };
        let s = summarize(&d, &bundle, &params).unwrap();
        assert_eq!(s.tuple_count, 200);
        assert_eq!(s.embed_dim, 16);
        assert_eq!(s.entries().len(), 3);
        let sets: Vec<&ColumnSet> = s.column_sets().collect();
        let mut sorted = sets.clone();
        sorted.sort();
        assert_eq!(sets, sorted);
        for e in s.entries() {
            assert_eq!(e.embedding.len(), 16);
            assert!(e.embedding.iter().all(|&v| v >= 0.0));
        }
        assert!(s.entry(&ColumnSet::pair("a", "c").unwrap()).is_some());
        assert!(s.entry(&ColumnSet::pair("a", "zzz").unwrap()).is_none());
    }

    #[test]
    fn row_order_does_not_change_the_summary() {
        let d = coupled_dataset(300, 9);
        let mut shuffled_rows = d.rows.clone();
        shuffled_rows.shuffle(&mut ChaCha8Rng::seed_from_u64(77));
        let shuffled = Dataset::new("coupled", Arc::clone(&d.schema), shuffled_rows, 1.0).unwrap();
        let bundle = EstimatorBundle::new_random(small_hyper(), 42);
        let params = SummaryParams {
            storage_limit_bytes: 100_000,
            ..SummaryParams::default()
        };
        let a = summarize(&d, &bundle, &params).unwrap();
        let b = summarize(&shuffled, &bundle, &params).unwrap();
        assert_eq!(a.entries().len(), 3);
        assert_eq!(b.entries().len(), 3);
        for (ea, eb) in a.entries().iter().zip(b.entries()) {
            assert_eq!(ea.columns, eb.columns);
            assert_eq!(ea.quantizer, eb.quantizer);
            for (x, y) in ea.embedding.iter().zip(eb.embedding.iter()) {
                assert!((x - y).abs() < 1e-9, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn save_load_round_trip_preserves_everything() {
        let ex = crate::sample_data::housing_example();
        let bundle = EstimatorBundle::new_random(small_hyper(), 1);
        let mut s = summarize(&ex.candidates[0], &bundle, &SummaryParams::default()).unwrap();
        s.round_to_f32();
        let bytes = s.to_bytes();
        let loaded = DataSummary::load("d_1", &mut bytes.as_slice()).unwrap();
        assert_eq!(loaded, s);
        assert_eq!(loaded.to_bytes(), bytes);
    }

    #[test]
    fn load_rejects_garbage_and_future_versions() {
        assert!(matches!(
            DataSummary::load("x", &mut &b"oops"[..]),
            Err(SummaryError::Corrupt(_))
        ));
        let mut bad = Vec::new();
        bad.extend_from_slice(b"DSUM");
        wire::write_u16(&mut bad, 9).unwrap();
        assert!(matches!(
            DataSummary::load("x", &mut bad.as_slice()),
            Err(SummaryError::UnsupportedVersion(9))
        ));
    }

    #[test]
    fn column_set_identity_ignores_order() {
        let a = ColumnSet::new(["price".to_string(), "city".to_string()]).unwrap();
        let b = ColumnSet::new(["city".to_string(), "price".to_string()]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_string(), "city+price");
        assert!(a.contains("city") && !a.contains("type"));
        assert!(a.intersects(["zzz", "price"]));
        assert!(!a.intersects(["zzz"]));
        assert!(matches!(
            ColumnSet::new(["x".to_string(), "x".to_string()]),
            Err(SummaryError::DuplicateColumn)
        ));
    }
}
