//! Per-column-set quantization: assigns a bit width to every column, builds
//! bucket boundaries (numeric) or dense token identifiers (categorical), and
//! turns rows into the concatenated bit codes consumed by the row-embedding
//! layer.
//!
//! Bit allocation starts from `ceil(log2(distinct))` capped at the per-column
//! maximum, then trims one bit at a time from the widest column until the
//! total fits the code width. Column codes are laid out widest-first so that
//! high-information columns always occupy the same input positions.

use std::sync::Arc;

use crate::tabular::{ColumnKind, Dataset, Value};

use super::{ColumnSet, SummaryError};

/// Quantization recipe for one column inside a column set.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnQuantizer {
    pub name: String,
    pub kind: ColumnKind,
    /// Assigned code width; identifiers fit in `bits` bits.
    pub bits: u8,
    pub coder: ColumnCoder,
}

/// Value-to-identifier mapping for a single column.
#[derive(Debug, Clone, PartialEq)]
pub enum ColumnCoder {
    Numeric {
        /// Equi-depth bucket boundaries; the identifier of `x` is the number
        /// of boundaries `<= x`.
        edges: Vec<f64>,
        min: f64,
        max: f64,
    },
    Categorical {
        /// Directly mapped tokens in sorted order; a token's identifier is
        /// its index. Tokens beyond the code capacity, and tokens never seen
        /// at build time, hash into the identifier range instead.
        tokens: Vec<Arc<str>>,
    },
}

/// Quantizer for a whole column set. Columns are stored in set order
/// (names ascending); `layout` gives the widest-first emission order.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizerSpec {
    columns: Vec<ColumnQuantizer>,
    /// Indices into `columns`, sorted by bits descending then name ascending.
    layout: Vec<usize>,
    total_bits: u32,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(token: &str) -> u64 {
    let mut h = FNV_OFFSET;
    for b in token.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

fn bits_for_distinct(distinct: usize) -> u8 {
    debug_assert!(distinct > 0);
    let b = (usize::BITS - (distinct - 1).leading_zeros()) as u8;
    // 32 bits of identifier space is already far beyond any practical
    // distinct count and keeps shifts well-defined.
    b.clamp(1, 32)
}

impl ColumnCoder {
    /// Builds a coder for `bits`-wide identifiers from a column of values.
    fn fit(kind: ColumnKind, values: &[&Value], bits: u8) -> ColumnCoder {
        let capacity = 1usize << bits;
        match kind {
            ColumnKind::Numeric => {
                let mut sorted: Vec<f64> = values
                    .iter()
                    .map(|v| match v {
                        Value::Num(x) => *x,
                        Value::Cat(_) => unreachable!("kind checked by caller"),
                    })
                    .collect();
                sorted.sort_by(f64::total_cmp);
                let n = sorted.len();
                let edges = (1..capacity).map(|i| sorted[i * n / capacity]).collect();
                ColumnCoder::Numeric {
                    edges,
                    min: sorted[0],
                    max: sorted[n - 1],
                }
            }
            ColumnKind::Categorical => {
                let mut tokens: Vec<Arc<str>> = values
                    .iter()
                    .map(|v| match v {
                        Value::Cat(t) => Arc::clone(t),
                        Value::Num(_) => unreachable!("kind checked by caller"),
                    })
                    .collect();
                tokens.sort();
                tokens.dedup();
                tokens.truncate(capacity);
                ColumnCoder::Categorical { tokens }
            }
        }
    }

    fn code(&self, value: &Value, bits: u8) -> u32 {
        match (self, value) {
            (ColumnCoder::Numeric { edges, .. }, Value::Num(x)) => {
                edges.iter().take_while(|e| **e <= *x).count() as u32
            }
            (ColumnCoder::Categorical { tokens }, Value::Cat(t)) => {
                match tokens.binary_search_by(|probe| (**probe).cmp(t)) {
                    Ok(idx) => idx as u32,
                    Err(_) => (fnv1a(t) % (1u64 << bits)) as u32,
                }
            }
            _ => unreachable!("value kind checked against schema before coding"),
        }
    }

    /// Smallest and largest representable values, used when a query leaves
    /// the column unconstrained.
    fn domain(&self) -> (Value, Value) {
        match self {
            ColumnCoder::Numeric { min, max, .. } => (Value::Num(*min), Value::Num(*max)),
            ColumnCoder::Categorical { tokens } => (
                Value::Cat(Arc::clone(tokens.first().expect("nonempty column"))),
                Value::Cat(Arc::clone(tokens.last().expect("nonempty column"))),
            ),
        }
    }
}

impl QuantizerSpec {
    /// Builds the quantizer for `set` over the full column data of `d`.
    ///
    /// `code_bits` is the total code width (the row layer's input size);
    /// `max_col_bits` caps any single column.
    pub fn build(
        d: &Dataset,
        set: &ColumnSet,
        code_bits: usize,
        max_col_bits: u8,
    ) -> Result<QuantizerSpec, SummaryError> {
        if d.rows.is_empty() {
            return Err(SummaryError::EmptyDataset);
        }
        let mut planned: Vec<(String, ColumnKind, Vec<&Value>, u8)> = Vec::new();
        for name in set.names() {
            let idx = d
                .schema
                .index_of(name)
                .ok_or_else(|| SummaryError::UnknownColumn(name.to_string()))?;
            let kind = d.schema.columns()[idx].1;
            let values: Vec<&Value> = d.rows.iter().map(|r| &r[idx]).collect();
            let distinct = match kind {
                ColumnKind::Numeric => {
                    let mut bits: Vec<u64> = values
                        .iter()
                        .map(|v| match v {
                            Value::Num(x) => x.to_bits(),
                            Value::Cat(_) => unreachable!(),
                        })
                        .collect();
                    bits.sort_unstable();
                    bits.dedup();
                    bits.len()
                }
                ColumnKind::Categorical => {
                    let mut tokens: Vec<&str> = values
                        .iter()
                        .map(|v| match v {
                            Value::Cat(t) => &**t,
                            Value::Num(_) => unreachable!(),
                        })
                        .collect();
                    tokens.sort_unstable();
                    tokens.dedup();
                    tokens.len()
                }
            };
            let width = bits_for_distinct(distinct).min(max_col_bits).max(1);
            planned.push((name.to_string(), kind, values, width));
        }

        // Trim the widest column (ties: name ascending) until the total code
        // fits. Equal-width columns alternate, so the trimming is fair.
        loop {
            let total: u32 = planned.iter().map(|p| u32::from(p.3)).sum();
            if total as usize <= code_bits {
                break;
            }
            let widest = planned
                .iter()
                .enumerate()
                .filter(|(_, p)| p.3 > 1)
                .max_by(|(_, a), (_, b)| a.3.cmp(&b.3).then_with(|| b.0.cmp(&a.0)))
                .map(|(i, _)| i)
                .ok_or(SummaryError::CodeWidthTooSmall)?;
            planned[widest].3 -= 1;
        }

        let columns: Vec<ColumnQuantizer> = planned
            .into_iter()
            .map(|(name, kind, values, bits)| ColumnQuantizer {
                coder: ColumnCoder::fit(kind, &values, bits),
                name,
                kind,
                bits,
            })
            .collect();
        let mut layout: Vec<usize> = (0..columns.len()).collect();
        layout.sort_by(|&a, &b| {
            columns[b]
                .bits
                .cmp(&columns[a].bits)
                .then_with(|| columns[a].name.cmp(&columns[b].name))
        });
        let total_bits = columns.iter().map(|c| u32::from(c.bits)).sum();
        Ok(QuantizerSpec {
            columns,
            layout,
            total_bits,
        })
    }

    /// Rebuilds a spec from its per-column parts (the layout is derived,
    /// not stored). `columns` must be in set order.
    pub fn from_columns(columns: Vec<ColumnQuantizer>) -> QuantizerSpec {
        let mut layout: Vec<usize> = (0..columns.len()).collect();
        layout.sort_by(|&a, &b| {
            columns[b]
                .bits
                .cmp(&columns[a].bits)
                .then_with(|| columns[a].name.cmp(&columns[b].name))
        });
        let total_bits = columns.iter().map(|c| u32::from(c.bits)).sum();
        QuantizerSpec {
            columns,
            layout,
            total_bits,
        }
    }

    pub fn columns(&self) -> &[ColumnQuantizer] {
        &self.columns
    }

    pub fn total_bits(&self) -> u32 {
        self.total_bits
    }

    /// Identifier of `value` for the `idx`-th column in set order.
    pub fn code(&self, idx: usize, value: &Value) -> u32 {
        let col = &self.columns[idx];
        col.coder.code(value, col.bits)
    }

    /// Identifiers for a full row given in set order.
    pub fn row_codes(&self, row: &[&Value]) -> Vec<u32> {
        debug_assert_eq!(row.len(), self.columns.len());
        row.iter().enumerate().map(|(i, v)| self.code(i, v)).collect()
    }

    /// Domain bounds of the `idx`-th column in set order.
    pub fn domain(&self, idx: usize) -> (Value, Value) {
        self.columns[idx].coder.domain()
    }

    /// Positions of the 1-bits in the concatenated code for `codes`
    /// (identifiers in set order). Positions index into the zero-padded
    /// input vector of the row layer: widest column first, most significant
    /// bit first.
    pub fn active_bits(&self, codes: &[u32], out: &mut Vec<u32>) {
        debug_assert_eq!(codes.len(), self.columns.len());
        out.clear();
        let mut offset = 0u32;
        for &ci in &self.layout {
            let bits = u32::from(self.columns[ci].bits);
            let code = codes[ci];
            debug_assert!(code < (1 << bits));
            for j in 0..bits {
                if code >> (bits - 1 - j) & 1 == 1 {
                    out.push(offset + j);
                }
            }
            offset += bits;
        }
    }

    /// Convenience wrapper building the bit positions for a row of values.
    pub fn row_bits(&self, row: &[&Value]) -> Vec<u32> {
        let codes = self.row_codes(row);
        let mut out = Vec::new();
        self.active_bits(&codes, &mut out);
        out
    }
}
