//! Mini-batch training loop (Adam) over a pluggable objective, plus the
//! finite-difference helpers used by gradient-correctness tests.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layer::{DenseLayer, LayerGrad};

/// A differentiable training problem: a set of layers plus a dataset of
/// examples addressed by index.
pub trait Objective {
    fn example_count(&self) -> usize;
    fn layer_count(&self) -> usize;
    fn layer(&self, i: usize) -> &DenseLayer;
    fn layer_mut(&mut self, i: usize) -> &mut DenseLayer;

    /// Sum of per-example losses over `examples`. When `grads` is given (one
    /// accumulator per layer, zeroed by the caller), also accumulates the
    /// gradient of that summed loss.
    fn eval(&mut self, examples: &[usize], grads: Option<&mut [LayerGrad]>) -> f64;
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Fraction of examples used for training; the rest validate.
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 256,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub initial_val_loss: f64,
    /// Validation loss of the returned (best) parameter snapshot; never
    /// exceeds `initial_val_loss`.
    pub best_val_loss: f64,
    /// 0 means the untrained snapshot won.
    pub best_epoch: usize,
    pub epoch_train_losses: Vec<f64>,
    pub epoch_val_losses: Vec<f64>,
}

type Snapshot = Vec<(Array2<f64>, Array1<f64>)>;

fn take_snapshot(obj: &impl Objective) -> Snapshot {
    (0..obj.layer_count())
        .map(|i| (obj.layer(i).weight.clone(), obj.layer(i).bias.clone()))
        .collect()
}

fn restore_snapshot(obj: &mut impl Objective, snap: &Snapshot) {
    for (i, (w, b)) in snap.iter().enumerate() {
        obj.layer_mut(i).weight.assign(w);
        obj.layer_mut(i).bias.assign(b);
    }
}

struct Adam {
    m: Snapshot,
    v: Snapshot,
    t: i32,
}

impl Adam {
    fn new(obj: &impl Objective) -> Adam {
        let zeros: Snapshot = (0..obj.layer_count())
            .map(|i| {
                (
                    Array2::zeros(obj.layer(i).weight.dim()),
                    Array1::zeros(obj.layer(i).bias.dim()),
                )
            })
            .collect();
        Adam {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn step(&mut self, obj: &mut impl Objective, grads: &[LayerGrad], cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        for i in 0..obj.layer_count() {
            let layer = obj.layer_mut(i);
            let (mw, mb) = &mut self.m[i];
            let (vw, vb) = &mut self.v[i];
            adam_update(
                layer.weight.iter_mut().chain(layer.bias.iter_mut()),
                grads[i].weight.iter().chain(grads[i].bias.iter()),
                mw.iter_mut().chain(mb.iter_mut()),
                vw.iter_mut().chain(vb.iter_mut()),
                cfg,
                bc1,
                bc2,
            );
        }
    }
}

fn adam_update<'a>(
    params: impl Iterator<Item = &'a mut f64>,
    grads: impl Iterator<Item = &'a f64>,
    ms: impl Iterator<Item = &'a mut f64>,
    vs: impl Iterator<Item = &'a mut f64>,
    cfg: &TrainConfig,
    bc1: f64,
    bc2: f64,
) {
    for (((p, &g), m), v) in params.zip(grads).zip(ms).zip(vs) {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let mhat = *m / bc1;
        let vhat = *v / bc2;
        *p -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.epsilon);
    }
}

fn mean_loss(obj: &mut impl Objective, examples: &[usize]) -> f64 {
    if examples.is_empty() {
        return 0.0;
    }
    obj.eval(examples, None) / examples.len() as f64
}

/// Trains `obj` and leaves it holding the snapshot with the best validation
/// loss seen (the untrained parameters count as a candidate snapshot).
pub fn train(obj: &mut impl Objective, cfg: &TrainConfig) -> TrainReport {
    let n = obj.example_count();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let split = ((n as f64) * cfg.train_fraction).floor() as usize;
    let (mut train_idx, val_idx) = {
        let (a, b) = order.split_at(split.min(n));
        let train: Vec<usize> = a.to_vec();
        // Degenerate splits validate on the training examples.
        let val: Vec<usize> = if b.is_empty() { train.clone() } else { b.to_vec() };
        (train, val)
    };

    let mut grads: Vec<LayerGrad> = (0..obj.layer_count())
        .map(|i| LayerGrad::zeros_like(obj.layer(i)))
        .collect();
    let mut adam = Adam::new(obj);

    let initial_val_loss = mean_loss(obj, &val_idx);
    let mut best_val_loss = initial_val_loss;
    let mut best_epoch = 0usize;
    let mut best = take_snapshot(obj);
    let mut epoch_train_losses = Vec::with_capacity(cfg.epochs);
    let mut epoch_val_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        train_idx.shuffle(&mut rng);
        let mut running = 0.0;
        for batch in train_idx.chunks(cfg.batch_size.max(1)) {
            for g in &mut grads {
                g.zero();
            }
            running += obj.eval(batch, Some(&mut grads));
            let scale = 1.0 / batch.len() as f64;
            for g in &mut grads {
                g.scale(scale);
            }
            adam.step(obj, &grads, cfg);
        }
        for i in 0..obj.layer_count() {
            let l = obj.layer(i);
            assert!(
                l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()),
                "non-finite parameter after epoch {epoch}"
            );
        }
        let train_loss = if train_idx.is_empty() {
            0.0
        } else {
            running / train_idx.len() as f64
        };
        let val_loss = mean_loss(obj, &val_idx);
        epoch_train_losses.push(train_loss);
        epoch_val_losses.push(val_loss);
        if val_loss < best_val_loss {
            best_val_loss = val_loss;
            best_epoch = epoch;
            best = take_snapshot(obj);
        }
    }

    restore_snapshot(obj, &best);
    TrainReport {
        initial_val_loss,
        best_val_loss,
        best_epoch,
        epoch_train_losses,
        epoch_val_losses,
    }
}

/// Mean squared error over one output vector.
pub fn mse_loss(pred: &Array1<f64>, target: &Array1<f64>) -> f64 {
    debug_assert_eq!(pred.len(), target.len());
    let n = pred.len().max(1) as f64;
    pred.iter()
        .zip(target.iter())
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n
}

/// Gradient of [`mse_loss`] with respect to the prediction.
pub fn mse_grad(pred: &Array1<f64>, target: &Array1<f64>) -> Array1<f64> {
    let n = pred.len().max(1) as f64;
    (pred - target) * (2.0 / n)
}

/// Addresses one scalar parameter inside a layer.
#[derive(Debug, Clone, Copy)]
pub enum ParamCoord {
    Weight { row: usize, col: usize },
    Bias { row: usize },
}

fn param_get(layer: &DenseLayer, coord: ParamCoord) -> f64 {
    match coord {
        ParamCoord::Weight { row, col } => layer.weight[(row, col)],
        ParamCoord::Bias { row } => layer.bias[row],
    }
}

fn param_set(layer: &mut DenseLayer, coord: ParamCoord, value: f64) {
    match coord {
        ParamCoord::Weight { row, col } => layer.weight[(row, col)] = value,
        ParamCoord::Bias { row } => layer.bias[row] = value,
    }
}

/// Central finite difference of the summed loss with respect to one
/// parameter; restores the parameter afterwards.
pub fn numeric_gradient(
    obj: &mut impl Objective,
    examples: &[usize],
    layer: usize,
    coord: ParamCoord,
    h: f64,
) -> f64 {
    let original = param_get(obj.layer(layer), coord);
    param_set(obj.layer_mut(layer), coord, original + h);
    let plus = obj.eval(examples, None);
    param_set(obj.layer_mut(layer), coord, original - h);
    let minus = obj.eval(examples, None);
    param_set(obj.layer_mut(layer), coord, original);
    (plus - minus) / (2.0 * h)
}

/// Analytic gradient of the summed loss for all layers.
pub fn analytic_gradient(obj: &mut impl Objective, examples: &[usize]) -> Vec<LayerGrad> {
    let mut grads: Vec<LayerGrad> = (0..obj.layer_count())
        .map(|i| LayerGrad::zeros_like(obj.layer(i)))
        .collect();
    obj.eval(examples, Some(&mut grads));
    grads
}

/// `|a-b| / max(1e-6, |a|, |b|)`; zero when both sides vanish.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1e-6f64.max(a.abs()).max(b.abs())
}
