//! Column-pair association scores.
//!
//! Scores drive column-set selection: a sample of rows is quantized into a
//! small number of buckets per column and each pair is scored with the
//! Cramér's-V normalization of the chi-squared statistic, which lands in
//! [0, 1] regardless of bucket counts.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

use crate::tabular::{ColumnKind, Dataset, Value};

/// Bucket width used when quantizing columns for association scoring;
/// 4 bits gives the 16 buckets the scorer is calibrated for.
pub const CORRELATION_BITS: u8 = 4;

/// Chi-squared association for every column pair of `d`, computed on a
/// seeded sample of at most `sample_rows` rows and normalized to [0, 1].
/// Keys are `(first, second)` with `first < second`.
pub fn correlation_scores(
    d: &Dataset,
    sample_rows: usize,
    seed: u64,
) -> BTreeMap<(String, String), f64> {
    let n = d.rows.len();
    let take = sample_rows.min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = if take < n {
        rand::seq::index::sample(&mut rng, n, take).into_vec()
    } else {
        (0..n).collect()
    };
    picked.sort_unstable();

    // Quantize each column over the sampled rows only; the sample defines
    // both the bucket boundaries and the counts.
    let capacity = 1usize << CORRELATION_BITS;
    let ncols = d.schema.len();
    let mut bucketed: Vec<Vec<usize>> = Vec::with_capacity(ncols);
    for (ci, (_, kind)) in d.schema.columns().iter().enumerate() {
        let values: Vec<&Value> = picked.iter().map(|&ri| &d.rows[ri][ci]).collect();
        bucketed.push(bucketize(&values, *kind, capacity));
    }

    let mut scores = BTreeMap::new();
    for a in 0..ncols {
        for b in a + 1..ncols {
            let v = cramers_v(&bucketed[a], &bucketed[b], capacity);
            let mut names = [
                d.schema.columns()[a].0.clone(),
                d.schema.columns()[b].0.clone(),
            ];
            names.sort();
            let [first, second] = names;
            scores.insert((first, second), v);
        }
    }
    scores
}

fn bucketize(values: &[&Value], kind: ColumnKind, capacity: usize) -> Vec<usize> {
    match kind {
        ColumnKind::Numeric => {
            let mut sorted: Vec<f64> = values.iter().map(|v| v.as_num().unwrap()).collect();
            sorted.sort_by(f64::total_cmp);
            let n = sorted.len();
            let edges: Vec<f64> = (1..capacity).map(|i| sorted[i * n / capacity]).collect();
            values
                .iter()
                .map(|v| {
                    let x = v.as_num().unwrap();
                    edges.iter().take_while(|e| **e <= x).count()
                })
                .collect()
        }
        ColumnKind::Categorical => {
            let mut tokens: Vec<&str> = values.iter().map(|v| v.as_token().unwrap()).collect();
            tokens.sort_unstable();
            tokens.dedup();
            values
                .iter()
                .map(|v| {
                    let t = v.as_token().unwrap();
                    match tokens.binary_search(&t) {
                        Ok(idx) => idx % capacity,
                        Err(_) => unreachable!("token came from the same sample"),
                    }
                })
                .collect()
        }
    }
}

/// Cramér's V over two equally long bucket-index columns. Returns 0 when
/// either column collapses to a single occupied bucket (no association is
/// measurable), and clamps tiny floating-point overshoot back into [0, 1].
fn cramers_v(xs: &[usize], ys: &[usize], capacity: usize) -> f64 {
    debug_assert_eq!(xs.len(), ys.len());
    let n = xs.len();
    if n == 0 {
        return 0.0;
    }
    let mut table = vec![0usize; capacity * capacity];
    let mut row_tot = vec![0usize; capacity];
    let mut col_tot = vec![0usize; capacity];
    for (&x, &y) in xs.iter().zip(ys) {
        table[x * capacity + y] += 1;
        row_tot[x] += 1;
        col_tot[y] += 1;
    }
    let r = row_tot.iter().filter(|&&c| c > 0).count();
    let c = col_tot.iter().filter(|&&c| c > 0).count();
    if r < 2 || c < 2 {
        return 0.0;
    }
    let nf = n as f64;
    let mut chi2 = 0.0;
    for x in 0..capacity {
        if row_tot[x] == 0 {
            continue;
        }
        for y in 0..capacity {
            if col_tot[y] == 0 {
                continue;
            }
            let expected = row_tot[x] as f64 * col_tot[y] as f64 / nf;
            let observed = table[x * capacity + y] as f64;
            chi2 += (observed - expected).powi(2) / expected;
        }
    }
    let denom = nf * (r.min(c) - 1) as f64;
    (chi2 / denom).sqrt().clamp(0.0, 1.0)
}
