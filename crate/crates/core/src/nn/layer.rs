//! Dense layers with hand-rolled forward/backward passes.
//!
//! Parameters are held in 64-bit floats for numerically stable training and
//! gradient checking; the on-disk model format stores 32-bit floats, and
//! loading/saving converts at the boundary.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
}

impl Activation {
    pub fn apply_inplace(self, z: &mut Array1<f64>) {
        if self == Activation::Relu {
            z.mapv_inplace(|v| v.max(0.0));
        }
    }

    pub fn apply_batch_inplace(self, z: &mut Array2<f64>) {
        if self == Activation::Relu {
            z.mapv_inplace(|v| v.max(0.0));
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Activation> {
        match code {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Relu),
            _ => None,
        }
    }
}

/// An affine map `y = act(W x + b)` with `W` stored row-major as `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    /// Xavier-uniform initialization: `U(-a, a)` with
    /// `a = sqrt(6 / (fan_in + fan_out))`, zero bias.
    pub fn xavier(out_dim: usize, in_dim: usize, activation: Activation, rng: &mut impl Rng) -> Self {
        let a = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weight = Array2::from_shape_fn((out_dim, in_dim), |_| rng.gen_range(-a..=a));
        DenseLayer {
            weight,
            bias: Array1::zeros(out_dim),
            activation,
        }
    }

    /// Averaging initialization for fold layers with `in_dim = 2 * out_dim`:
    /// `W = 0.5 * [I | I]`, bias slightly positive so no relu unit starts
    /// dead. Iterating the averaging map is norm-preserving (every output is
    /// a convex combination of the inputs), so a fold applied far more times
    /// at inference than during training neither collapses nor blows up.
    /// No symmetry-breaking noise is needed: each output unit already has a
    /// distinct input pattern.
    pub fn averaging(out_dim: usize, activation: Activation) -> Self {
        let weight = Array2::from_shape_fn((out_dim, 2 * out_dim), |(i, j)| {
            if j == i || j == i + out_dim {
                0.5
            } else {
                0.0
            }
        });
        DenseLayer {
            weight,
            bias: Array1::from_elem(out_dim, 0.01),
            activation,
        }
    }

    /// Squared deviation of the weights from the exact averaging map, plus
    /// gradient accumulation scaled by `scale`: the regularizer that keeps a
    /// fold layer near the norm-preserving region (see [`Self::averaging`]).
    pub fn averaging_anchor(&self, scale: f64, grad: Option<&mut LayerGrad>) -> f64 {
        let out = self.out_dim();
        let mut pen = 0.0;
        let mut gw = grad.map(|g| &mut g.weight);
        for ((i, j), &w) in self.weight.indexed_iter() {
            let base = if j == i || j == i + out { 0.5 } else { 0.0 };
            let d = w - base;
            pen += d * d;
            if let Some(gw) = gw.as_deref_mut() {
                gw[(i, j)] += scale * 2.0 * d;
            }
        }
        scale * pen
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    /// Pre-activation `W x + b`.
    pub fn affine(&self, x: &Array1<f64>) -> Array1<f64> {
        self.weight.dot(x) + &self.bias
    }

    /// Pre-activation for a sparse 0/1 input given by its set-bit positions:
    /// the sum of the active weight columns plus bias. Exactly equivalent to
    /// `affine` on the corresponding dense 0/1 vector.
    pub fn affine_bits(&self, bits: &[u32]) -> Array1<f64> {
        let mut z = self.bias.clone();
        for &j in bits {
            z += &self.weight.column(j as usize);
        }
        z
    }

    pub fn forward(&self, x: &Array1<f64>) -> Array1<f64> {
        let mut z = self.affine(x);
        self.activation.apply_inplace(&mut z);
        z
    }

    pub fn forward_bits(&self, bits: &[u32]) -> Array1<f64> {
        let mut z = self.affine_bits(bits);
        self.activation.apply_inplace(&mut z);
        z
    }

    /// Batched pre-activation: rows of `x` are examples.
    pub fn affine_batch(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight.t()) + &self.bias
    }

    pub fn forward_batch(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut z = self.affine_batch(x);
        self.activation.apply_batch_inplace(&mut z);
        z
    }

    /// Backward through the activation alone: `dz = dy * act'(z)` where `z`
    /// is the cached pre-activation.
    pub fn activation_grad(&self, z: &Array1<f64>, dy: &Array1<f64>) -> Array1<f64> {
        match self.activation {
            Activation::Identity => dy.clone(),
            Activation::Relu => {
                let mut dz = dy.clone();
                for (d, &pre) in dz.iter_mut().zip(z.iter()) {
                    if pre <= 0.0 {
                        *d = 0.0;
                    }
                }
                dz
            }
        }
    }

    /// Accumulates parameter gradients for one example and returns the input
    /// gradient. `x` is the layer input, `z` the cached pre-activation, `dy`
    /// the loss gradient at the layer output.
    pub fn backward(
        &self,
        x: &Array1<f64>,
        z: &Array1<f64>,
        dy: &Array1<f64>,
        grad: &mut LayerGrad,
    ) -> Array1<f64> {
        let dz = self.activation_grad(z, dy);
        for (r, &dzr) in dz.iter().enumerate() {
            if dzr != 0.0 {
                let mut row = grad.weight.row_mut(r);
                row.scaled_add(dzr, x);
            }
        }
        grad.bias += &dz;
        self.weight.t().dot(&dz)
    }

    /// Like [`DenseLayer::backward`] for a sparse 0/1 input; does not return
    /// an input gradient because bit inputs are not differentiated.
    pub fn backward_bits(&self, bits: &[u32], z: &Array1<f64>, dy: &Array1<f64>, grad: &mut LayerGrad) {
        let dz = self.activation_grad(z, dy);
        for &j in bits {
            let mut col = grad.weight.column_mut(j as usize);
            col += &dz;
        }
        grad.bias += &dz;
    }

    /// Batched backward; rows of the arrays are examples.
    pub fn backward_batch(
        &self,
        x: &Array2<f64>,
        z: &Array2<f64>,
        dy: &Array2<f64>,
        grad: &mut LayerGrad,
    ) -> Array2<f64> {
        let dz = match self.activation {
            Activation::Identity => dy.clone(),
            Activation::Relu => {
                let mut dz = dy.clone();
                dz.zip_mut_with(z, |d, &pre| {
                    if pre <= 0.0 {
                        *d = 0.0;
                    }
                });
                dz
            }
        };
        grad.weight += &dz.t().dot(x);
        grad.bias += &dz.sum_axis(Axis(0));
        dz.dot(&self.weight)
    }
}

/// Gradient accumulator matching one layer's parameter shapes.
#[derive(Debug, Clone)]
pub struct LayerGrad {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LayerGrad {
    pub fn zeros_like(layer: &DenseLayer) -> LayerGrad {
        LayerGrad {
            weight: Array2::zeros(layer.weight.dim()),
            bias: Array1::zeros(layer.bias.dim()),
        }
    }

    pub fn zero(&mut self) {
        self.weight.fill(0.0);
        self.bias.fill(0.0);
    }

    pub fn scale(&mut self, s: f64) {
        self.weight.mapv_inplace(|v| v * s);
        self.bias.mapv_inplace(|v| v * s);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sparse_affine_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let layer = DenseLayer::xavier(5, 12, Activation::Relu, &mut rng);
        let bits = vec![0u32, 3, 11];
        let mut dense = Array1::zeros(12);
        for &b in &bits {
            dense[b as usize] = 1.0;
        }
        let za = layer.affine_bits(&bits);
        let zb = layer.affine(&dense);
        assert_eq!(za, zb);
    }

    #[test]
    fn batch_forward_matches_single() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layer = DenseLayer::xavier(4, 6, Activation::Relu, &mut rng);
        let x0 = Array1::from_shape_fn(6, |i| i as f64 * 0.3 - 1.0);
        let x1 = Array1::from_shape_fn(6, |i| 0.5 - i as f64 * 0.1);
        let mut batch = Array2::zeros((2, 6));
        batch.row_mut(0).assign(&x0);
        batch.row_mut(1).assign(&x1);
        let out = layer.forward_batch(&batch);
        // GEMM may sum in a different order than the per-row path, so allow ULPs.
        for (got, want) in [(out.row(0), layer.forward(&x0)), (out.row(1), layer.forward(&x1))] {
            for (g, w) in got.iter().zip(want.iter()) {
                assert_abs_diff_eq!(g, w, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn xavier_bounds_respected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layer = DenseLayer::xavier(30, 50, Activation::Identity, &mut rng);
        let a = (6.0 / 80.0f64).sqrt();
        assert!(layer.weight.iter().all(|&w| w.abs() <= a));
        assert!(layer.bias.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn relu_backward_masks_dead_units() {
        let layer = DenseLayer {
            weight: array![[1.0, -1.0], [2.0, 0.5]],
            bias: array![0.0, -10.0],
            activation: Activation::Relu,
        };
        let x = array![1.0, 0.5];
        let z = layer.affine(&x); // [0.5, -7.75] -> unit 1 is dead
        let mut grad = LayerGrad::zeros_like(&layer);
        let dx = layer.backward(&x, &z, &array![1.0, 1.0], &mut grad);
        assert_eq!(grad.bias, array![1.0, 0.0]);
        assert_eq!(grad.weight.row(1).to_owned(), array![0.0, 0.0]);
        assert_eq!(dx, array![1.0, -1.0]);
    }
}
