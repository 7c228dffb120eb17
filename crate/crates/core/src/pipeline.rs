//! Corpus construction and the two-phase training run for the learned
//! distinctiveness estimator.
//!
//! Phase one trains the seven estimation layers end to end against exact
//! matched-union fractions computed from pool data. Phase two freezes that
//! stack and fits the summary-merge layer against exact means of
//! concatenated row multisets.

use std::fmt;
use std::fmt::Write as _;
use std::io::{self, Read, Write};
use std::sync::Arc;

use ndarray::{concatenate, s, Array1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::estimator::query_bound_codes;
use crate::nn::{
    mse_grad, mse_loss, train, DenseLayer, EstimatorBundle, HyperParams, LayerGrad, Objective,
    TrainConfig, TrainReport,
};
use crate::summary::{
    identify_column_sets, read_quantizer_column, write_quantizer_column, ColumnSet, QuantizerSpec,
    SummaryError, SummaryParams,
};
use crate::tabular::{evaluate_query, Dataset, Predicate, Query, TabularError, TupleSet};
use crate::wire;
use crate::workload::{random_queries, WorkloadError};

/// Knobs for corpus construction.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    /// Strongest-correlation column sets kept per pool.
    pub sets_per_pool: usize,
    /// Single-table queries drafted against each pool.
    pub random_queries: usize,
    /// Highest-cardinality queries kept per column set before pairing.
    pub top_queries: usize,
    /// Support-fraction range for the drafted queries.
    pub support_fraction: (f64, f64),
    /// Rows sampled per pool for the differentiable set embeddings.
    pub embedding_sample_rows: usize,
    /// Size of the merge-layer corpus.
    pub merge_examples: usize,
    /// Sampling rate for each side of a merge example.
    pub merge_sample_rate: f64,
    /// Rows sampled when scoring column correlations.
    pub correlation_sample_rows: usize,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            sets_per_pool: 5,
            random_queries: 300,
            top_queries: 10,
            support_fraction: (0.05, 1.0),
            embedding_sample_rows: 512,
            merge_examples: 1500,
            merge_sample_rate: 0.5,
            correlation_sample_rows: 2000,
            seed: 0,
        }
    }
}

/// One column set of a pool prepared for differentiable embedding: its
/// quantizer plus the active-bit lists of a fixed row sample. The sample
/// mean of the row layer over `sample_bits` stands in for the full-pool
/// embedding during training.
#[derive(Debug, Clone, PartialEq)]
pub struct MaterialSet {
    pub columns: ColumnSet,
    pub quantizer: Arc<QuantizerSpec>,
    pub sample_bits: Vec<Vec<u32>>,
}

/// Per-pool training material; `sets` is sorted by column set.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolMaterial {
    pub tuple_count: u64,
    pub sets: Vec<MaterialSet>,
}

/// A query pair over one pool together with the exact fraction of the
/// pool's distinct tuples matched by either query.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimationExample {
    pub pool: usize,
    pub first: Query,
    pub second: Query,
    pub target: f64,
}

/// Two sampled set embeddings and the embedding of their concatenated
/// rows, which is the row-count-weighted mean of the sides.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeExample {
    pub columns: ColumnSet,
    pub rows1: u64,
    pub rows2: u64,
    pub e1: Array1<f64>,
    pub e2: Array1<f64>,
    pub target: Array1<f64>,
}

/// Everything needed to reproduce a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingCorpus {
    pub pools: Vec<PoolMaterial>,
    pub estimation: Vec<EstimationExample>,
    pub merge: Vec<MergeExample>,
}

/// Marks rows holding the first occurrence of their tuple, so duplicate
/// rows contribute a single bit to the match masks.
fn first_occurrence(pool: &Dataset) -> Vec<bool> {
    let mut seen = TupleSet::new();
    pool.rows.iter().map(|row| seen.insert(row)).collect()
}

/// Bitmask over the pool's rows with one bit per distinct tuple matched by
/// `q` (set on the tuple's first occurrence).
fn row_mask(pool: &Dataset, q: &Query, first: &[bool]) -> Result<Vec<u64>, PipelineError> {
    let matched = evaluate_query(pool, q)?;
    let mut mask = vec![0u64; (pool.rows.len() + 63) / 64];
    for (i, row) in pool.rows.iter().enumerate() {
        if first[i] && matched.contains(row) {
            mask[i / 64] |= 1 << (i % 64);
        }
    }
    Ok(mask)
}

fn popcount(mask: &[u64]) -> u64 {
    mask.iter().map(|w| u64::from(w.count_ones())).sum()
}

fn union_count(a: &[u64], b: &[u64]) -> u64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| u64::from((x | y).count_ones()))
        .sum()
}

fn sorted_sample(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    let mut v = rand::seq::index::sample(rng, n, k).into_vec();
    v.sort_unstable();
    v
}

fn set_column_indices(pool: &Dataset, set: &ColumnSet) -> Result<Vec<usize>, PipelineError> {
    set.names()
        .iter()
        .map(|c| {
            pool.schema
                .index_of(c)
                .ok_or_else(|| PipelineError::MissingColumn {
                    pool: pool.id.clone(),
                    column: c.clone(),
                })
        })
        .collect()
}

/// Active-bit lists for the given rows under one column-set quantizer.
fn rows_to_bits(
    pool: &Dataset,
    col_idx: &[usize],
    spec: &QuantizerSpec,
    rows: &[usize],
) -> Vec<Vec<u32>> {
    let mut out = Vec::with_capacity(rows.len());
    let mut codes = Vec::with_capacity(col_idx.len());
    for &ri in rows {
        let row = &pool.rows[ri];
        codes.clear();
        for (k, &ci) in col_idx.iter().enumerate() {
            codes.push(spec.code(k, &row[ci]));
        }
        let mut bits = Vec::new();
        spec.active_bits(&codes, &mut bits);
        out.push(bits);
    }
    out
}

/// Mean row-layer embedding of the given rows under one quantizer.
fn mean_embedding(
    bundle: &EstimatorBundle,
    pool: &Dataset,
    col_idx: &[usize],
    spec: &QuantizerSpec,
    rows: &[usize],
) -> Array1<f64> {
    let mut acc = Array1::<f64>::zeros(bundle.hyper.embed());
    for bits in rows_to_bits(pool, col_idx, spec, rows) {
        acc += &bundle.phi_r.forward_bits(&bits);
    }
    acc / rows.len() as f64
}

/// Builds the estimation corpus: per pool, the strongest column sets with
/// their quantizers and a row sample, plus cross-set query pairs labelled
/// with exact matched-union fractions.
pub fn build_estimation_corpus(
    pools: &[Dataset],
    hyper: &HyperParams,
    cfg: &PipelineConfig,
) -> Result<TrainingCorpus, PipelineError> {
    if pools.is_empty() {
        return Err(PipelineError::InvalidConfig("at least one pool is required".into()));
    }
    if cfg.sets_per_pool < 2 {
        return Err(PipelineError::InvalidConfig(
            "sets_per_pool must be at least 2 to form cross-set pairs".into(),
        ));
    }
    if cfg.random_queries == 0 || cfg.top_queries == 0 || cfg.embedding_sample_rows == 0 {
        return Err(PipelineError::InvalidConfig(
            "random_queries, top_queries and embedding_sample_rows must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let col_cap = hyper.max_col_bits.min(32) as u8;
    let mut materials = Vec::with_capacity(pools.len());
    let mut estimation = Vec::new();
    for (pi, pool) in pools.iter().enumerate() {
        let params = SummaryParams {
            // No storage pressure here: keep every candidate pair and cut
            // by correlation rank instead.
            storage_limit_bytes: usize::MAX,
            correlation_sample_rows: cfg.correlation_sample_rows,
            seed: cfg.seed,
        };
        let mut sets = identify_column_sets(pool, &params)?;
        if sets.len() < 2 {
            return Err(PipelineError::TooFewColumnSets {
                pool: pool.id.clone(),
            });
        }
        sets.truncate(cfg.sets_per_pool);
        sets.sort();

        let n = pool.rows.len();
        let sample = sorted_sample(&mut rng, n, cfg.embedding_sample_rows.min(n));
        let mut mat_sets = Vec::with_capacity(sets.len());
        for set in &sets {
            let spec = QuantizerSpec::build(pool, set, hyper.code_bits as usize, col_cap)?;
            let col_idx = set_column_indices(pool, set)?;
            let sample_bits = rows_to_bits(pool, &col_idx, &spec, &sample);
            mat_sets.push(MaterialSet {
                columns: set.clone(),
                quantizer: Arc::new(spec),
                sample_bits,
            });
        }

        let queries = random_queries(&[pool], cfg.random_queries, cfg.support_fraction, rng.gen())?;
        let first = first_occurrence(pool);
        let mut masks = Vec::with_capacity(queries.len());
        for q in &queries {
            masks.push(row_mask(pool, q, &first)?);
        }
        let cards: Vec<u64> = masks.iter().map(|m| popcount(m)).collect();

        // Per set, the highest-cardinality queries touching it.
        let mut tops: Vec<Vec<usize>> = Vec::with_capacity(sets.len());
        for set in &sets {
            let mut rel: Vec<usize> = (0..queries.len())
                .filter(|&i| set.intersects(queries[i].columns()))
                .collect();
            rel.sort_by(|&a, &b| {
                cards[b]
                    .cmp(&cards[a])
                    .then_with(|| queries[a].id.cmp(&queries[b].id))
            });
            rel.truncate(cfg.top_queries);
            tops.push(rel);
        }

        for i in 0..sets.len() {
            for j in (i + 1)..sets.len() {
                for &qa in &tops[i] {
                    for &qb in &tops[j] {
                        if qa == qb {
                            continue;
                        }
                        let hits = union_count(&masks[qa], &masks[qb]);
                        estimation.push(EstimationExample {
                            pool: pi,
                            first: queries[qa].clone(),
                            second: queries[qb].clone(),
                            target: hits as f64 / n as f64,
                        });
                    }
                }
            }
        }

        materials.push(PoolMaterial {
            tuple_count: n as u64,
            sets: mat_sets,
        });
    }
    Ok(TrainingCorpus {
        pools: materials,
        estimation,
        merge: Vec::new(),
    })
}

/// Draws merge examples: two row samples of one pool under one column-set
/// quantizer, embedded with the current row layer, labelled with the
/// count-weighted mean (the embedding of the concatenated multiset).
pub fn build_merge_corpus(
    pools: &[Dataset],
    material: &[PoolMaterial],
    bundle: &EstimatorBundle,
    cfg: &PipelineConfig,
) -> Result<Vec<MergeExample>, PipelineError> {
    if pools.len() != material.len() {
        return Err(PipelineError::MismatchedMaterial {
            pools: pools.len(),
            material: material.len(),
        });
    }
    if !(cfg.merge_sample_rate > 0.0 && cfg.merge_sample_rate <= 1.0) {
        return Err(PipelineError::InvalidConfig(format!(
            "merge_sample_rate must lie in (0, 1], got {}",
            cfg.merge_sample_rate
        )));
    }
    if cfg.merge_examples > 0 && pools.is_empty() {
        return Err(PipelineError::InvalidConfig("at least one pool is required".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(cfg.merge_examples);
    for _ in 0..cfg.merge_examples {
        let pi = rng.gen_range(0..pools.len());
        let pool = &pools[pi];
        let msets = &material[pi].sets;
        if msets.is_empty() {
            return Err(PipelineError::InvalidConfig(format!(
                "pool {} has no column sets in its material",
                pool.id
            )));
        }
        let set = &msets[rng.gen_range(0..msets.len())];
        let n = pool.rows.len();
        let k = ((cfg.merge_sample_rate * n as f64).round() as usize).clamp(1, n);
        let idx1 = sorted_sample(&mut rng, n, k);
        let idx2 = sorted_sample(&mut rng, n, k);
        let col_idx = set_column_indices(pool, &set.columns)?;
        let e1 = mean_embedding(bundle, pool, &col_idx, &set.quantizer, &idx1);
        let e2 = mean_embedding(bundle, pool, &col_idx, &set.quantizer, &idx2);
        let (n1, n2) = (idx1.len() as f64, idx2.len() as f64);
        let target = (&e1 * n1 + &e2 * n2) / (n1 + n2);
        out.push(MergeExample {
            columns: set.columns.clone(),
            rows1: idx1.len() as u64,
            rows2: idx2.len() as u64,
            e1,
            e2,
            target,
        });
    }
    Ok(out)
}

fn concat2(a: &Array1<f64>, b: &Array1<f64>) -> Array1<f64> {
    concatenate![Axis(0), a.view(), b.view()]
}

/// Strength of the averaging-operator anchor on the fold layers `phi_d`
/// and `phi_q` during estimation training (see `eval`).
const FOLD_ANCHOR: f64 = 1e-2;

const L_PHI_R: usize = 0;
const L_PHI_D: usize = 1;
const L_PHI_Q: usize = 2;
const L_PHI_1: usize = 3;
const L_PHI_2: usize = 4;
const L_PHI_3_HIDDEN: usize = 5;
const L_PHI_3_OUT: usize = 6;
const EST_LAYER_COUNT: usize = 7;

/// One query of an estimation example resolved against its pool material.
#[derive(Debug, Clone)]
struct CompiledQuery {
    /// Indices into the pool's sorted material sets.
    sets: Vec<usize>,
    /// Active-bit lists of the low/high bound rows, one pair per set.
    bounds: Vec<(Vec<u32>, Vec<u32>)>,
}

#[derive(Debug, Clone)]
struct CompiledExample {
    pool: usize,
    queries: Vec<CompiledQuery>,
    target: f64,
}

/// Phase-one objective: squared error of the clamped fraction estimate,
/// differentiable through all seven estimation layers including the row
/// layer behind the sampled set embeddings.
pub struct EstimationObjective<'a> {
    pools: &'a [PoolMaterial],
    compiled: Vec<CompiledExample>,
    bundle: EstimatorBundle,
    /// Per pool, per set: sample-mean embedding under the current row layer.
    set_embed: Vec<Vec<Array1<f64>>>,
    /// Per-row pre-activations behind `set_embed` (filled when grads are on).
    set_pre: Vec<Vec<Vec<Array1<f64>>>>,
    /// Loss gradient accumulated on each set embedding.
    set_grad: Vec<Vec<Array1<f64>>>,
    /// Pools referenced by the current eval call.
    touched: Vec<bool>,
}

impl<'a> EstimationObjective<'a> {
    /// Resolves every example against its pool material: which column sets
    /// serve each query and the bit codes of the query's bound rows.
    pub fn compile(
        corpus: &'a TrainingCorpus,
        bundle: EstimatorBundle,
    ) -> Result<EstimationObjective<'a>, PipelineError> {
        let max_sets = bundle.hyper.max_sets as usize;
        for pool in &corpus.pools {
            for set in &pool.sets {
                let total = set.quantizer.total_bits();
                if total > bundle.hyper.code_bits {
                    return Err(PipelineError::WidthOverflow {
                        total_bits: total,
                        code_bits: bundle.hyper.code_bits,
                    });
                }
            }
        }
        let mut compiled = Vec::with_capacity(corpus.estimation.len());
        for ex in &corpus.estimation {
            let material = corpus
                .pools
                .get(ex.pool)
                .ok_or(PipelineError::BadPoolIndex { pool: ex.pool })?;
            let mut queries = Vec::with_capacity(2);
            for q in [&ex.first, &ex.second] {
                let mut sets: Vec<usize> = (0..material.sets.len())
                    .filter(|&si| material.sets[si].columns.intersects(q.columns()))
                    .collect();
                if sets.is_empty() {
                    return Err(PipelineError::UnrepresentableQuery {
                        query: q.id.clone(),
                    });
                }
                sets.truncate(max_sets);
                let bounds = sets
                    .iter()
                    .map(|&si| {
                        let spec = &material.sets[si].quantizer;
                        let (lo, hi) = query_bound_codes(q, spec);
                        let mut bl = Vec::new();
                        let mut bh = Vec::new();
                        spec.active_bits(&lo, &mut bl);
                        spec.active_bits(&hi, &mut bh);
                        (bl, bh)
                    })
                    .collect();
                queries.push(CompiledQuery { sets, bounds });
            }
            compiled.push(CompiledExample {
                pool: ex.pool,
                queries,
                target: ex.target,
            });
        }
        let eta = bundle.hyper.embed();
        let set_embed: Vec<Vec<Array1<f64>>> = corpus
            .pools
            .iter()
            .map(|p| vec![Array1::zeros(eta); p.sets.len()])
            .collect();
        let set_pre: Vec<Vec<Vec<Array1<f64>>>> = corpus
            .pools
            .iter()
            .map(|p| vec![Vec::new(); p.sets.len()])
            .collect();
        let set_grad = set_embed.clone();
        let touched = vec![false; corpus.pools.len()];
        Ok(EstimationObjective {
            pools: &corpus.pools,
            compiled,
            bundle,
            set_embed,
            set_pre,
            set_grad,
            touched,
        })
    }

    pub fn into_bundle(self) -> EstimatorBundle {
        self.bundle
    }

    /// Recomputes the sampled set embeddings of every pool referenced by
    /// `examples` under the current row layer.
    fn refresh_set_embeddings(&mut self, examples: &[usize], with_grad: bool) {
        for t in self.touched.iter_mut() {
            *t = false;
        }
        for &ei in examples {
            self.touched[self.compiled[ei].pool] = true;
        }
        let eta = self.bundle.hyper.embed();
        for (p, pool) in self.pools.iter().enumerate() {
            if !self.touched[p] {
                continue;
            }
            for (si, set) in pool.sets.iter().enumerate() {
                let mut acc = Array1::<f64>::zeros(eta);
                let pres = &mut self.set_pre[p][si];
                pres.clear();
                for bits in &set.sample_bits {
                    let pre = self.bundle.phi_r.affine_bits(bits);
                    let mut post = pre.clone();
                    self.bundle.phi_r.activation.apply_inplace(&mut post);
                    acc += &post;
                    if with_grad {
                        pres.push(pre);
                    }
                }
                acc /= set.sample_bits.len() as f64;
                self.set_embed[p][si] = acc;
                self.set_grad[p][si].fill(0.0);
            }
        }
    }

    /// Sends the accumulated embedding gradients through the sampled rows
    /// (each embedding is their mean under the row layer).
    fn flush_set_gradients(&self, gs: &mut [LayerGrad]) {
        for (p, pool) in self.pools.iter().enumerate() {
            if !self.touched[p] {
                continue;
            }
            for (si, set) in pool.sets.iter().enumerate() {
                let g = &self.set_grad[p][si];
                if g.iter().all(|&v| v == 0.0) {
                    continue;
                }
                let per_row = g / set.sample_bits.len() as f64;
                for (bits, pre) in set.sample_bits.iter().zip(&self.set_pre[p][si]) {
                    self.bundle
                        .phi_r
                        .backward_bits(bits, pre, &per_row, &mut gs[L_PHI_R]);
                }
            }
        }
    }
}

impl Objective for EstimationObjective<'_> {
    fn example_count(&self) -> usize {
        self.compiled.len()
    }

    fn layer_count(&self) -> usize {
        EST_LAYER_COUNT
    }

    fn layer(&self, i: usize) -> &DenseLayer {
        match i {
            L_PHI_R => &self.bundle.phi_r,
            L_PHI_D => &self.bundle.phi_d,
            L_PHI_Q => &self.bundle.phi_q,
            L_PHI_1 => &self.bundle.phi_1,
            L_PHI_2 => &self.bundle.phi_2,
            L_PHI_3_HIDDEN => &self.bundle.phi_3_hidden,
            L_PHI_3_OUT => &self.bundle.phi_3_out,
            _ => panic!("the estimation stack has {EST_LAYER_COUNT} layers"),
        }
    }

    fn layer_mut(&mut self, i: usize) -> &mut DenseLayer {
        match i {
            L_PHI_R => &mut self.bundle.phi_r,
            L_PHI_D => &mut self.bundle.phi_d,
            L_PHI_Q => &mut self.bundle.phi_q,
            L_PHI_1 => &mut self.bundle.phi_1,
            L_PHI_2 => &mut self.bundle.phi_2,
            L_PHI_3_HIDDEN => &mut self.bundle.phi_3_hidden,
            L_PHI_3_OUT => &mut self.bundle.phi_3_out,
            _ => panic!("the estimation stack has {EST_LAYER_COUNT} layers"),
        }
    }

    fn eval(&mut self, examples: &[usize], mut grads: Option<&mut [LayerGrad]>) -> f64 {
        self.refresh_set_embeddings(examples, grads.is_some());
        let eta = self.bundle.hyper.embed();
        let slot = self.bundle.hyper.slot();
        let mut total = 0.0;
        for &ei in examples {
            let ex = &self.compiled[ei];
            let p = ex.pool;
            let nq = ex.queries.len();
            debug_assert!((1..=2).contains(&nq), "the objective trains on query pairs");

            // Per-query blocks: bound-row embeddings interleaved low/high on
            // the query side, one set embedding per slot on the dataset side.
            let mut psi_pre: Vec<Vec<(Array1<f64>, Array1<f64>)>> = Vec::with_capacity(nq);
            let mut q_blocks: Vec<Array1<f64>> = Vec::with_capacity(nq);
            let mut d_blocks: Vec<Array1<f64>> = Vec::with_capacity(nq);
            for cq in &ex.queries {
                let mut qb = Array1::<f64>::zeros(2 * slot);
                let mut db = Array1::<f64>::zeros(slot);
                let mut pres = Vec::with_capacity(cq.sets.len());
                for (j, (&si, (bl, bh))) in cq.sets.iter().zip(&cq.bounds).enumerate() {
                    let pre_lo = self.bundle.phi_r.affine_bits(bl);
                    let mut lo = pre_lo.clone();
                    self.bundle.phi_r.activation.apply_inplace(&mut lo);
                    let pre_hi = self.bundle.phi_r.affine_bits(bh);
                    let mut hi = pre_hi.clone();
                    self.bundle.phi_r.activation.apply_inplace(&mut hi);
                    qb.slice_mut(s![2 * j * eta..(2 * j + 1) * eta]).assign(&lo);
                    qb.slice_mut(s![(2 * j + 1) * eta..(2 * j + 2) * eta])
                        .assign(&hi);
                    db.slice_mut(s![j * eta..(j + 1) * eta])
                        .assign(&self.set_embed[p][si]);
                    pres.push((pre_lo, pre_hi));
                }
                psi_pre.push(pres);
                q_blocks.push(qb);
                d_blocks.push(db);
            }

            // Fold both sides; a single query passes through unfolded.
            let (e_q, q_fold) = if nq == 1 {
                (q_blocks[0].clone(), None)
            } else {
                let x = concat2(&q_blocks[0], &q_blocks[1]);
                let pre = self.bundle.phi_q.affine(&x);
                let mut out = pre.clone();
                self.bundle.phi_q.activation.apply_inplace(&mut out);
                (out, Some((x, pre)))
            };
            let (e_dq, d_fold) = if nq == 1 {
                (d_blocks[0].clone(), None)
            } else {
                let x = concat2(&d_blocks[0], &d_blocks[1]);
                let pre = self.bundle.phi_d.affine(&x);
                let mut out = pre.clone();
                self.bundle.phi_d.activation.apply_inplace(&mut out);
                (out, Some((x, pre)))
            };

            let gate_pre = self.bundle.phi_2.affine(&e_q);
            let mut gate = gate_pre.clone();
            self.bundle.phi_2.activation.apply_inplace(&mut gate);
            let a_pre = self.bundle.phi_1.affine(&e_dq);
            let mut a = a_pre.clone();
            self.bundle.phi_1.activation.apply_inplace(&mut a);
            let h = &a * &gate;
            let z_pre = self.bundle.phi_3_hidden.affine(&h);
            let mut z = z_pre.clone();
            self.bundle.phi_3_hidden.activation.apply_inplace(&mut z);
            let y_pre = self.bundle.phi_3_out.affine(&z);
            // Train on the raw head output: the inference-time clamp to
            // [0, 1] would zero the gradient whenever the head strays
            // outside the interval, which can freeze training entirely.
            let y = y_pre[0];
            let err = y - ex.target;
            total += err * err;

            if let Some(gs) = grads.as_deref_mut() {
                let dy = 2.0 * err;
                let dy_v = Array1::from_vec(vec![dy]);
                let dz = self
                    .bundle
                    .phi_3_out
                    .backward(&z, &y_pre, &dy_v, &mut gs[L_PHI_3_OUT]);
                let dh = self
                    .bundle
                    .phi_3_hidden
                    .backward(&h, &z_pre, &dz, &mut gs[L_PHI_3_HIDDEN]);
                let da = &dh * &gate;
                let dgate = &dh * &a;
                let d_edq = self
                    .bundle
                    .phi_1
                    .backward(&e_dq, &a_pre, &da, &mut gs[L_PHI_1]);
                let d_eq = self
                    .bundle
                    .phi_2
                    .backward(&e_q, &gate_pre, &dgate, &mut gs[L_PHI_2]);

                let dq_blocks: Vec<Array1<f64>> = match &q_fold {
                    None => vec![d_eq],
                    Some((x, pre)) => {
                        let dx = self.bundle.phi_q.backward(x, pre, &d_eq, &mut gs[L_PHI_Q]);
                        vec![
                            dx.slice(s![..2 * slot]).to_owned(),
                            dx.slice(s![2 * slot..]).to_owned(),
                        ]
                    }
                };
                let dd_blocks: Vec<Array1<f64>> = match &d_fold {
                    None => vec![d_edq],
                    Some((x, pre)) => {
                        let dx = self.bundle.phi_d.backward(x, pre, &d_edq, &mut gs[L_PHI_D]);
                        vec![dx.slice(s![..slot]).to_owned(), dx.slice(s![slot..]).to_owned()]
                    }
                };

                for (qi, cq) in ex.queries.iter().enumerate() {
                    for (j, (&si, (pre_lo, pre_hi))) in
                        cq.sets.iter().zip(&psi_pre[qi]).enumerate()
                    {
                        let d_lo = dq_blocks[qi]
                            .slice(s![2 * j * eta..(2 * j + 1) * eta])
                            .to_owned();
                        let d_hi = dq_blocks[qi]
                            .slice(s![(2 * j + 1) * eta..(2 * j + 2) * eta])
                            .to_owned();
                        let (bl, bh) = &cq.bounds[j];
                        self.bundle
                            .phi_r
                            .backward_bits(bl, pre_lo, &d_lo, &mut gs[L_PHI_R]);
                        self.bundle
                            .phi_r
                            .backward_bits(bh, pre_hi, &d_hi, &mut gs[L_PHI_R]);
                        let d_set = dd_blocks[qi].slice(s![j * eta..(j + 1) * eta]);
                        self.set_grad[p][si] += &d_set;
                    }
                }
            }
        }
        // The corpus only ever exercises one application of the fold layers
        // (examples are query pairs), while inference folds once per query
        // in the set. Anchoring phi_d and phi_q to the averaging operator
        // keeps their repeated composition from collapsing or exploding the
        // embeddings at set counts the corpus never shows. Scaled per
        // example so the mean loss is batch-size independent.
        let k = examples.len() as f64;
        for (li, layer) in [(L_PHI_D, &self.bundle.phi_d), (L_PHI_Q, &self.bundle.phi_q)] {
            let g = grads.as_deref_mut().map(|gs| &mut gs[li]);
            total += layer.averaging_anchor(k * FOLD_ANCHOR, g);
        }
        if let Some(gs) = grads.as_deref_mut() {
            self.flush_set_gradients(gs);
        }
        total
    }
}

/// Phase-two objective: the merge layer alone against exact mixed means.
pub struct MergeObjective {
    layer: DenseLayer,
    inputs: Vec<Array1<f64>>,
    targets: Vec<Array1<f64>>,
}

impl MergeObjective {
    pub fn new(layer: DenseLayer, corpus: &[MergeExample]) -> MergeObjective {
        MergeObjective {
            layer,
            inputs: corpus.iter().map(|m| concat2(&m.e1, &m.e2)).collect(),
            targets: corpus.iter().map(|m| m.target.clone()).collect(),
        }
    }

    pub fn into_layer(self) -> DenseLayer {
        self.layer
    }
}

impl Objective for MergeObjective {
    fn example_count(&self) -> usize {
        self.inputs.len()
    }

    fn layer_count(&self) -> usize {
        1
    }

    fn layer(&self, i: usize) -> &DenseLayer {
        assert_eq!(i, 0, "the merge phase trains a single layer");
        &self.layer
    }

    fn layer_mut(&mut self, i: usize) -> &mut DenseLayer {
        assert_eq!(i, 0, "the merge phase trains a single layer");
        &mut self.layer
    }

    fn eval(&mut self, examples: &[usize], mut grads: Option<&mut [LayerGrad]>) -> f64 {
        let mut total = 0.0;
        for &i in examples {
            let x = &self.inputs[i];
            let pre = self.layer.affine(x);
            let mut out = pre.clone();
            self.layer.activation.apply_inplace(&mut out);
            total += mse_loss(&out, &self.targets[i]);
            if let Some(gs) = grads.as_deref_mut() {
                let dy = mse_grad(&out, &self.targets[i]);
                self.layer.backward(x, &pre, &dy, &mut gs[0]);
            }
        }
        total
    }
}

/// Output of a full training run.
#[derive(Debug, Clone)]
pub struct TrainedBundle {
    pub bundle: EstimatorBundle,
    pub corpus: TrainingCorpus,
    pub estimation_report: TrainReport,
    pub merge_report: TrainReport,
}

/// Runs both phases: the estimation stack end to end on fraction targets,
/// then the merge layer against mixed means embedded with the trained row
/// layer. Fully determined by `(pools, hyper, configs)`.
pub fn run_training(
    pools: &[Dataset],
    hyper: HyperParams,
    train_cfg: &TrainConfig,
    cfg: &PipelineConfig,
) -> Result<TrainedBundle, PipelineError> {
    let mut corpus = build_estimation_corpus(pools, &hyper, cfg)?;
    let init = EstimatorBundle::new_random(hyper, cfg.seed);
    let mut objective = EstimationObjective::compile(&corpus, init)?;
    let estimation_report = train(&mut objective, train_cfg);
    let mut bundle = objective.into_bundle();

    let merge = build_merge_corpus(pools, &corpus.pools, &bundle, cfg)?;
    let mut merge_objective = MergeObjective::new(bundle.phi_e.clone(), &merge);
    let merge_report = train(&mut merge_objective, train_cfg);
    bundle.phi_e = merge_objective.into_layer();
    corpus.merge = merge;

    bundle.tag = if train_cfg.epochs == 0 {
        "untrained".into()
    } else {
        "trained".into()
    };
    Ok(TrainedBundle {
        bundle,
        corpus,
        estimation_report,
        merge_report,
    })
}

/// Plain-text `key=value` summary of a training run.
pub fn report_text(t: &TrainedBundle) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "tag={}", t.bundle.tag);
    let _ = writeln!(out, "estimation.examples={}", t.corpus.estimation.len());
    let _ = writeln!(out, "merge.examples={}", t.corpus.merge.len());
    for (name, r) in [
        ("estimation", &t.estimation_report),
        ("merge", &t.merge_report),
    ] {
        let _ = writeln!(out, "{name}.initial_val_loss={:.6e}", r.initial_val_loss);
        let _ = writeln!(out, "{name}.best_val_loss={:.6e}", r.best_val_loss);
        let _ = writeln!(out, "{name}.best_epoch={}", r.best_epoch);
        let _ = writeln!(out, "{name}.epochs={}", r.epoch_val_losses.len());
    }
    out
}

const CORPUS_MAGIC: &[u8; 4] = b"DCRP";
const CORPUS_VERSION: u16 = 1;

impl TrainingCorpus {
    /// Writes the corpus in the `DCRP` binary format. Embeddings are stored
    /// as f32; targets and query bounds stay f64.
    pub fn save<W: Write>(&self, w: &mut W) -> Result<(), PipelineError> {
        w.write_all(CORPUS_MAGIC)?;
        wire::write_u16(w, CORPUS_VERSION)?;
        let as_u16 = |n: usize, what: &str| -> Result<u16, PipelineError> {
            u16::try_from(n)
                .map_err(|_| PipelineError::InvalidConfig(format!("too many {what}: {n}")))
        };
        wire::write_u16(w, as_u16(self.pools.len(), "pools")?)?;
        for pool in &self.pools {
            wire::write_u64(w, pool.tuple_count)?;
            wire::write_u16(w, as_u16(pool.sets.len(), "column sets")?)?;
            for set in &pool.sets {
                let cols = set.quantizer.columns();
                wire::write_u16(w, as_u16(cols.len(), "columns")?)?;
                for c in cols {
                    write_quantizer_column(w, c)?;
                }
                wire::write_u32(w, set.sample_bits.len() as u32)?;
                for bits in &set.sample_bits {
                    wire::write_u16(w, as_u16(bits.len(), "active bits")?)?;
                    for &b in bits {
                        wire::write_u32(w, b)?;
                    }
                }
            }
        }
        wire::write_u32(w, (self.estimation.len() + self.merge.len()) as u32)?;
        for ex in &self.estimation {
            wire::write_u8(w, 1)?;
            wire::write_u16(w, as_u16(ex.pool, "pools")?)?;
            wire::write_f64(w, ex.target)?;
            wire::write_u8(w, 2)?;
            for q in [&ex.first, &ex.second] {
                wire::write_str(w, &q.id)?;
                wire::write_u16(w, as_u16(q.predicates().len(), "predicates")?)?;
                for pred in q.predicates() {
                    match pred {
                        Predicate::Range { column, low, high } => {
                            wire::write_u8(w, 0)?;
                            wire::write_str(w, column)?;
                            wire::write_f64(w, *low)?;
                            wire::write_f64(w, *high)?;
                        }
                        Predicate::Equals { column, token } => {
                            wire::write_u8(w, 1)?;
                            wire::write_str(w, column)?;
                            wire::write_str(w, token)?;
                        }
                    }
                }
            }
        }
        for m in &self.merge {
            wire::write_u8(w, 2)?;
            let names = m.columns.names();
            wire::write_u16(w, as_u16(names.len(), "columns")?)?;
            for name in names {
                wire::write_str(w, name)?;
            }
            wire::write_u64(w, m.rows1)?;
            wire::write_u64(w, m.rows2)?;
            wire::write_u16(w, as_u16(m.e1.len(), "embedding dims")?)?;
            for vec in [&m.e1, &m.e2, &m.target] {
                for &v in vec.iter() {
                    wire::write_f32(w, v as f32)?;
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.save(&mut out).expect("corpus fits the wire format");
        out
    }

    pub fn load<R: Read>(r: &mut R) -> Result<TrainingCorpus, PipelineError> {
        wire::expect_magic(r, CORPUS_MAGIC)?;
        let version = wire::read_u16(r)?;
        if version != CORPUS_VERSION {
            return Err(PipelineError::UnsupportedVersion(version));
        }
        let pool_count = wire::read_u16(r)? as usize;
        let mut pools = Vec::with_capacity(pool_count);
        for _ in 0..pool_count {
            let tuple_count = wire::read_u64(r)?;
            let set_count = wire::read_u16(r)? as usize;
            let mut sets = Vec::with_capacity(set_count);
            for _ in 0..set_count {
                let col_count = wire::read_u16(r)? as usize;
                let mut cols = Vec::with_capacity(col_count);
                for _ in 0..col_count {
                    cols.push(read_quantizer_column(r)?);
                }
                let columns = ColumnSet::new(cols.iter().map(|c| c.name.clone()))?;
                let spec = QuantizerSpec::from_columns(cols);
                let total = spec.total_bits();
                let row_count = wire::read_u32(r)? as usize;
                let mut sample_bits = Vec::with_capacity(row_count);
                for _ in 0..row_count {
                    let nb = wire::read_u16(r)? as usize;
                    let mut bits = Vec::with_capacity(nb);
                    for _ in 0..nb {
                        let b = wire::read_u32(r)?;
                        if b >= total {
                            return Err(PipelineError::Corrupt(format!(
                                "bit position {b} outside a {total}-bit code"
                            )));
                        }
                        bits.push(b);
                    }
                    sample_bits.push(bits);
                }
                sets.push(MaterialSet {
                    columns,
                    quantizer: Arc::new(spec),
                    sample_bits,
                });
            }
            if !sets.windows(2).all(|w| w[0].columns < w[1].columns) {
                return Err(PipelineError::Corrupt("column sets out of order".into()));
            }
            pools.push(PoolMaterial { tuple_count, sets });
        }
        let record_count = wire::read_u32(r)? as usize;
        let mut estimation = Vec::new();
        let mut merge = Vec::new();
        for _ in 0..record_count {
            match wire::read_u8(r)? {
                1 => {
                    let pool = wire::read_u16(r)? as usize;
                    if pool >= pools.len() {
                        return Err(PipelineError::BadPoolIndex { pool });
                    }
                    let target = wire::read_f64(r)?;
                    let qn = wire::read_u8(r)? as usize;
                    if qn != 2 {
                        return Err(PipelineError::Corrupt(format!(
                            "expected a query pair, found {qn} queries"
                        )));
                    }
                    let mut qs = Vec::with_capacity(2);
                    for _ in 0..2 {
                        let id = wire::read_str(r)?;
                        let pred_count = wire::read_u16(r)? as usize;
                        let mut preds = Vec::with_capacity(pred_count);
                        for _ in 0..pred_count {
                            match wire::read_u8(r)? {
                                0 => {
                                    let column = wire::read_str(r)?;
                                    let low = wire::read_f64(r)?;
                                    let high = wire::read_f64(r)?;
                                    preds.push(Predicate::range(column, low, high)?);
                                }
                                1 => {
                                    let column = wire::read_str(r)?;
                                    let token = wire::read_str(r)?;
                                    preds.push(Predicate::equals(column, &token));
                                }
                                k => {
                                    return Err(PipelineError::Corrupt(format!(
                                        "unknown predicate kind {k}"
                                    )))
                                }
                            }
                        }
                        qs.push(Query::new(id, preds)?);
                    }
                    let second = qs.pop().expect("two queries were read");
                    let first = qs.pop().expect("two queries were read");
                    estimation.push(EstimationExample {
                        pool,
                        first,
                        second,
                        target,
                    });
                }
                2 => {
                    let col_count = wire::read_u16(r)? as usize;
                    let mut names = Vec::with_capacity(col_count);
                    for _ in 0..col_count {
                        names.push(wire::read_str(r)?);
                    }
                    let columns = ColumnSet::new(names)?;
                    let rows1 = wire::read_u64(r)?;
                    let rows2 = wire::read_u64(r)?;
                    let eta = wire::read_u16(r)? as usize;
                    let mut vecs = Vec::with_capacity(3);
                    for _ in 0..3 {
                        let mut v = Vec::with_capacity(eta);
                        for _ in 0..eta {
                            v.push(f64::from(wire::read_f32(r)?));
                        }
                        vecs.push(Array1::from_vec(v));
                    }
                    let target = vecs.pop().expect("three vectors were read");
                    let e2 = vecs.pop().expect("three vectors were read");
                    let e1 = vecs.pop().expect("three vectors were read");
                    merge.push(MergeExample {
                        columns,
                        rows1,
                        rows2,
                        e1,
                        e2,
                        target,
                    });
                }
                k => {
                    return Err(PipelineError::Corrupt(format!("unknown record kind {k}")));
                }
            }
        }
        Ok(TrainingCorpus {
            pools,
            estimation,
            merge,
        })
    }
}

#[derive(Debug)]
pub enum PipelineError {
    InvalidConfig(String),
    /// A pool offered fewer column sets than cross-set pairing needs.
    TooFewColumnSets { pool: String },
    /// A query touches none of its pool's column sets.
    UnrepresentableQuery { query: String },
    /// An example points at a pool outside the corpus.
    BadPoolIndex { pool: usize },
    /// Material references a column the pool does not have.
    MissingColumn { pool: String, column: String },
    /// Pools and material lists have different lengths.
    MismatchedMaterial { pools: usize, material: usize },
    /// A quantizer is wider than the row layer's input.
    WidthOverflow { total_bits: u32, code_bits: u32 },
    UnsupportedVersion(u16),
    Corrupt(String),
    Io(io::Error),
    Summary(SummaryError),
    Workload(WorkloadError),
    Tabular(TabularError),
}

impl fmt::Display for PipelineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PipelineError::InvalidConfig(msg) => write!(f, "invalid pipeline config: {msg}"),
            PipelineError::TooFewColumnSets { pool } => {
                write!(f, "pool {pool} yields fewer than two column sets")
            }
            PipelineError::UnrepresentableQuery { query } => {
                write!(f, "query {query} touches no column set of its pool")
            }
            PipelineError::BadPoolIndex { pool } => {
                write!(f, "example references unknown pool {pool}")
            }
            PipelineError::MissingColumn { pool, column } => {
                write!(f, "pool {pool} has no column {column}")
            }
            PipelineError::MismatchedMaterial { pools, material } => {
                write!(f, "{pools} pools but material for {material}")
            }
            PipelineError::WidthOverflow {
                total_bits,
                code_bits,
            } => write!(
                f,
                "quantizer needs {total_bits} bits but the row layer reads {code_bits}"
            ),
            PipelineError::UnsupportedVersion(v) => {
                write!(f, "unsupported corpus format version {v}")
            }
            PipelineError::Corrupt(msg) => write!(f, "corrupt corpus: {msg}"),
            PipelineError::Io(e) => write!(f, "corpus i/o failed: {e}"),
            PipelineError::Summary(e) => write!(f, "{e}"),
            PipelineError::Workload(e) => write!(f, "{e}"),
            PipelineError::Tabular(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for PipelineError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            PipelineError::Io(e) => Some(e),
            PipelineError::Summary(e) => Some(e),
            PipelineError::Workload(e) => Some(e),
            PipelineError::Tabular(e) => Some(e),
            _ => None,
        }
    }
}

impl From<io::Error> for PipelineError {
    fn from(e: io::Error) -> Self {
        PipelineError::Io(e)
    }
}

impl From<SummaryError> for PipelineError {
    fn from(e: SummaryError) -> Self {
        PipelineError::Summary(e)
    }
}

impl From<WorkloadError> for PipelineError {
    fn from(e: WorkloadError) -> Self {
        PipelineError::Workload(e)
    }
}

impl From<TabularError> for PipelineError {
    fn from(e: TabularError) -> Self {
        PipelineError::Tabular(e)
    }
}
