//! Neural building blocks of the learned estimator: dense layers, the
//! fixed bundle of embedding/estimation/merge layers, Adam training over
//! pluggable objectives, and the binary model format.

mod layer;
mod train;

pub use layer::{Activation, DenseLayer, LayerGrad};
pub use train::{
    analytic_gradient, mse_grad, mse_loss, numeric_gradient, relative_error, train, Objective,
    ParamCoord, TrainConfig, TrainReport,
};

use std::fmt;
use std::io::{self, Read, Write};

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::wire;

/// Sizes shared by summaries and the estimator stack.
///
/// * `code_bits`: width of a row's concatenated quantized bit code (zero
///   padded), the input of `phi_r`;
/// * `max_col_bits`: cap on the bit width of a single column's code;
/// * `embed_dim`: length of every column-set embedding;
/// * `max_sets`: column-set slots per query in the query-aware embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HyperParams {
    pub code_bits: u32,
    pub max_col_bits: u32,
    pub embed_dim: u32,
    pub max_sets: u32,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            code_bits: 2048,
            max_col_bits: 128,
            embed_dim: 128,
            max_sets: 4,
        }
    }
}

impl HyperParams {
    /// `embed_dim * max_sets`, the per-query slot width.
    pub fn slot(&self) -> usize {
        (self.embed_dim * self.max_sets) as usize
    }

    pub fn embed(&self) -> usize {
        self.embed_dim as usize
    }
}

/// The full set of learned layers.
///
/// * `phi_r`: row bit-code (`code_bits`) to embedding (`embed_dim`);
/// * `phi_d`: fold step for query-aware dataset embeddings (`2s -> s` where
///   `s = embed_dim * max_sets`);
/// * `phi_q`: fold step for query-set embeddings (`4s -> 2s`);
/// * `phi_1`, `phi_2`: projections of the folded dataset/query embeddings to
///   `embed_dim`;
/// * `phi_3_hidden` + `phi_3_out`: the final two-layer head producing the
///   matching-fraction estimate;
/// * `phi_e`: summary merge (`2 * embed_dim -> embed_dim`).
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorBundle {
    pub hyper: HyperParams,
    pub phi_r: DenseLayer,
    pub phi_d: DenseLayer,
    pub phi_q: DenseLayer,
    pub phi_1: DenseLayer,
    pub phi_2: DenseLayer,
    pub phi_3_hidden: DenseLayer,
    pub phi_3_out: DenseLayer,
    pub phi_e: DenseLayer,
    /// Free-form provenance tag ("untrained", "trained", ...).
    pub tag: String,
}

const LAYER_NAMES: [&str; 8] = [
    "phi_r",
    "phi_d",
    "phi_q",
    "phi_1",
    "phi_2",
    "phi_3_hidden",
    "phi_3_out",
    "phi_e",
];

impl EstimatorBundle {
    /// Fresh randomly initialized bundle; fully determined by `(hyper, seed)`.
    ///
    /// Plain layers use Xavier-uniform weights with a small positive bias
    /// (inputs are non-negative post-relu, so zero bias leaves units dead
    /// permanently). The fold/merge layers `phi_d`, `phi_q`, `phi_e` combine
    /// two same-sized halves and start from the near-identity averaging map:
    /// these layers are iterated up to set-count-minus-one times at inference
    /// but only a handful of times during training, and a generic random init
    /// shrinks or amplifies embeddings geometrically in the fold depth.
    pub fn new_random(hyper: HyperParams, seed: u64) -> EstimatorBundle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = hyper.slot();
        let e = hyper.embed();
        let l = hyper.code_bits as usize;
        let mut bundle = EstimatorBundle {
            hyper,
            phi_r: DenseLayer::xavier(e, l, Activation::Relu, &mut rng),
            phi_d: DenseLayer::averaging(s, Activation::Relu),
            phi_q: DenseLayer::averaging(2 * s, Activation::Relu),
            phi_1: DenseLayer::xavier(e, s, Activation::Relu, &mut rng),
            phi_2: DenseLayer::xavier(e, 2 * s, Activation::Relu, &mut rng),
            phi_3_hidden: DenseLayer::xavier(e, e, Activation::Relu, &mut rng),
            phi_3_out: DenseLayer::xavier(1, e, Activation::Identity, &mut rng),
            phi_e: DenseLayer::averaging(e, Activation::Relu),
            tag: "untrained".into(),
        };
        for layer in [
            &mut bundle.phi_r,
            &mut bundle.phi_1,
            &mut bundle.phi_2,
            &mut bundle.phi_3_hidden,
        ] {
            layer.bias.fill(0.01);
        }
        // Start the fraction head mid-range so early predictions are sane.
        bundle.phi_3_out.bias.fill(0.5);
        bundle
    }

    pub fn layers(&self) -> [&DenseLayer; 8] {
        [
            &self.phi_r,
            &self.phi_d,
            &self.phi_q,
            &self.phi_1,
            &self.phi_2,
            &self.phi_3_hidden,
            &self.phi_3_out,
            &self.phi_e,
        ]
    }

    pub fn layers_mut(&mut self) -> [&mut DenseLayer; 8] {
        [
            &mut self.phi_r,
            &mut self.phi_d,
            &mut self.phi_q,
            &mut self.phi_1,
            &mut self.phi_2,
            &mut self.phi_3_hidden,
            &mut self.phi_3_out,
            &mut self.phi_e,
        ]
    }

    fn expected_shapes(hyper: &HyperParams) -> [(usize, usize, Activation); 8] {
        let s = hyper.slot();
        let e = hyper.embed();
        let l = hyper.code_bits as usize;
        [
            (e, l, Activation::Relu),
            (s, 2 * s, Activation::Relu),
            (2 * s, 4 * s, Activation::Relu),
            (e, s, Activation::Relu),
            (e, 2 * s, Activation::Relu),
            (e, e, Activation::Relu),
            (1, e, Activation::Identity),
            (e, 2 * e, Activation::Relu),
        ]
    }

    /// Writes the binary model container: magic `DMDL`, format version,
    /// hyperparameters, tag, then each named layer's shape and parameters as
    /// little-endian 32-bit floats.
    pub fn save(&self, w: &mut impl Write) -> io::Result<()> {
        w.write_all(b"DMDL")?;
        wire::write_u16(w, 1)?;
        wire::write_u32(w, self.hyper.code_bits)?;
        wire::write_u32(w, self.hyper.max_col_bits)?;
        wire::write_u32(w, self.hyper.embed_dim)?;
        wire::write_u32(w, self.hyper.max_sets)?;
        wire::write_str(w, &self.tag)?;
        wire::write_u8(w, 8)?;
        for (name, layer) in LAYER_NAMES.iter().zip(self.layers()) {
            wire::write_str(w, name)?;
            wire::write_u32(w, layer.out_dim() as u32)?;
            wire::write_u32(w, layer.in_dim() as u32)?;
            wire::write_u8(w, layer.activation.code())?;
            for &v in layer.weight.iter() {
                wire::write_f32(w, v as f32)?;
            }
            for &v in layer.bias.iter() {
                wire::write_f32(w, v as f32)?;
            }
        }
        Ok(())
    }

    pub fn load(r: &mut impl Read) -> Result<EstimatorBundle, ModelFormatError> {
        wire::expect_magic(r, b"DMDL")?;
        let version = wire::read_u16(r)?;
        if version != 1 {
            return Err(ModelFormatError::UnsupportedVersion(version));
        }
        let hyper = HyperParams {
            code_bits: wire::read_u32(r)?,
            max_col_bits: wire::read_u32(r)?,
            embed_dim: wire::read_u32(r)?,
            max_sets: wire::read_u32(r)?,
        };
        let tag = wire::read_str(r)?;
        let count = wire::read_u8(r)?;
        if count != 8 {
            return Err(ModelFormatError::Corrupt(format!(
                "expected 8 layers, found {count}"
            )));
        }
        let shapes = Self::expected_shapes(&hyper);
        let mut loaded = Vec::with_capacity(8);
        for (name, (out_dim, in_dim, act)) in LAYER_NAMES.iter().zip(shapes) {
            let got_name = wire::read_str(r)?;
            if got_name != *name {
                return Err(ModelFormatError::Corrupt(format!(
                    "expected layer {name:?}, found {got_name:?}"
                )));
            }
            let got_out = wire::read_u32(r)? as usize;
            let got_in = wire::read_u32(r)? as usize;
            if (got_out, got_in) != (out_dim, in_dim) {
                return Err(ModelFormatError::Corrupt(format!(
                    "layer {name}: shape {got_out}x{got_in} does not match hyperparameters \
                     ({out_dim}x{in_dim})"
                )));
            }
            let act_code = wire::read_u8(r)?;
            let got_act = Activation::from_code(act_code)
                .ok_or_else(|| ModelFormatError::Corrupt(format!("bad activation {act_code}")))?;
            if got_act != act {
                return Err(ModelFormatError::Corrupt(format!(
                    "layer {name}: unexpected activation"
                )));
            }
            let mut weight = Array2::zeros((out_dim, in_dim));
            for v in weight.iter_mut() {
                *v = wire::read_f32(r)? as f64;
            }
            let mut bias = Array1::zeros(out_dim);
            for v in bias.iter_mut() {
                *v = wire::read_f32(r)? as f64;
            }
            loaded.push(DenseLayer {
                weight,
                bias,
                activation: act,
            });
        }
        let mut it = loaded.into_iter();
        Ok(EstimatorBundle {
            hyper,
            phi_r: it.next().unwrap(),
            phi_d: it.next().unwrap(),
            phi_q: it.next().unwrap(),
            phi_1: it.next().unwrap(),
            phi_2: it.next().unwrap(),
            phi_3_hidden: it.next().unwrap(),
            phi_3_out: it.next().unwrap(),
            phi_e: it.next().unwrap(),
            tag,
        })
    }

    /// Serializes to bytes; convenient for digests and tests.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.save(&mut out).expect("in-memory write cannot fail");
        out
    }

    /// Rounds every parameter to its closest 32-bit float, i.e. the values a
    /// save/load round trip would produce.
    pub fn round_to_f32(&mut self) {
        for layer in self.layers_mut() {
            layer.weight.mapv_inplace(|v| v as f32 as f64);
            layer.bias.mapv_inplace(|v| v as f32 as f64);
        }
    }
}

#[derive(Debug)]
pub enum ModelFormatError {
    Io(io::Error),
    UnsupportedVersion(u16),
    Corrupt(String),
}

impl fmt::Display for ModelFormatError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelFormatError::Io(e) => write!(f, "model io error: {e}"),
            ModelFormatError::UnsupportedVersion(v) => {
                write!(f, "unsupported model format version {v}")
            }
            ModelFormatError::Corrupt(msg) => write!(f, "corrupt model file: {msg}"),
        }
    }
}

impl std::error::Error for ModelFormatError {}

impl From<io::Error> for ModelFormatError {
    fn from(e: io::Error) -> Self {
        ModelFormatError::Io(e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_hyper() -> HyperParams {
        HyperParams {
            code_bits: 16,
            max_col_bits: 4,
            embed_dim: 8,
            max_sets: 2,
        }
    }

    #[test]
    fn bundle_shapes_follow_hyperparameters() {
        let b = EstimatorBundle::new_random(small_hyper(), 1);
        assert_eq!(b.phi_r.weight.dim(), (8, 16));
        assert_eq!(b.phi_d.weight.dim(), (16, 32));
        assert_eq!(b.phi_q.weight.dim(), (32, 64));
        assert_eq!(b.phi_1.weight.dim(), (8, 16));
        assert_eq!(b.phi_2.weight.dim(), (8, 32));
        assert_eq!(b.phi_3_hidden.weight.dim(), (8, 8));
        assert_eq!(b.phi_3_out.weight.dim(), (1, 8));
        assert_eq!(b.phi_e.weight.dim(), (8, 16));
    }

    #[test]
    fn same_seed_same_bundle() {
        let a = EstimatorBundle::new_random(small_hyper(), 9);
        let b = EstimatorBundle::new_random(small_hyper(), 9);
        assert_eq!(a, b);
        assert_eq!(a.to_bytes(), b.to_bytes());
        let c = EstimatorBundle::new_random(small_hyper(), 10);
        assert_ne!(a.to_bytes(), c.to_bytes());
    }

    #[test]
    fn save_load_round_trip_is_exact_after_f32_rounding() {
        let mut b = EstimatorBundle::new_random(small_hyper(), 5);
        b.tag = "trained".into();
        b.round_to_f32();
        let bytes = b.to_bytes();
        let loaded = EstimatorBundle::load(&mut bytes.as_slice()).unwrap();
        assert_eq!(loaded, b);
        assert_eq!(loaded.to_bytes(), bytes);
        assert_eq!(loaded.tag, "trained");
    }

    #[test]
    fn load_rejects_garbage() {
        let err = EstimatorBundle::load(&mut &b"XXXX"[..]);
        assert!(err.is_err());
        let mut bytes = EstimatorBundle::new_random(small_hyper(), 2).to_bytes();
        bytes[4] = 9; // format version
        assert!(matches!(
            EstimatorBundle::load(&mut bytes.as_slice()),
            Err(ModelFormatError::UnsupportedVersion(_))
        ));
    }
}
