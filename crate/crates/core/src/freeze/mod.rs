//! Turns a trained model into a fully binary one: `sign(P)` weights packed
//! one bit per element and every BatchNorm + sign pair folded into an 8-bit
//! integer threshold.

pub mod format;
pub mod thresholds;

use serde::{Deserialize, Serialize};

pub use format::{deserialize, serialize, FORMAT_VERSION, MAGIC};
pub use thresholds::{apply_alpha, fold_bn, quantize_thresholds, BinaryBNThresholds, QuantizedThresholds};

use crate::binrt::bits::BitTensor;
use crate::error::{Error, Result};
use crate::graph::{InputEncoding, Layer, Model, INT8_SCALE};
use crate::selfbin::alpha::AlphaScale;
use crate::selfbin::weights::BinarizeMode;
use crate::tensor::{ConvGeometry, Scalar, Tensor};

/// Packs `sign(P)`: bit 1 where `P > 0`, bit 0 (`-1`) otherwise.
pub fn freeze_weights<F: Scalar>(p: &Tensor<F>) -> BitTensor {
    BitTensor::from_signs(p)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FrozenKind {
    Conv { stride: u8, pad: u8 },
    Dense,
}

/// One compute layer with its optional pooling and folded BatchNorm.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrozenLayer {
    pub kind: FrozenKind,
    /// `[Cout, Cin, Kh, Kw]` for conv, `[Out, In]` for dense.
    pub weights: BitTensor,
    pub pool: bool,
    /// Present on every layer except the classifier, which emits raw scores.
    pub thresholds: Option<QuantizedThresholds>,
}

impl FrozenLayer {
    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn fan_in(&self) -> usize {
        self.weights.shape()[1..].iter().product()
    }
}

/// A fully binary model. It holds no floating-point values.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrozenModel {
    pub input_shape: [usize; 3],
    pub encoding: InputEncoding,
    pub layers: Vec<FrozenLayer>,
}

impl FrozenModel {
    pub fn num_classes(&self) -> usize {
        self.layers.last().map_or(0, FrozenLayer::out_channels)
    }

    /// Checks that layer shapes chain from the input to the classifier.
    pub fn validate(&self) -> Result<()> {
        let bad = |i: usize, msg: String| Err(Error::InvalidModel(format!("frozen layer {i}: {msg}")));
        if let InputEncoding::Median(m) = &self.encoding {
            if m.len() != self.input_shape[0] {
                return bad(0, format!("{} medians for {} channels", m.len(), self.input_shape[0]));
            }
        }
        if self.layers.is_empty() {
            return Err(Error::InvalidModel("frozen model has no layers".into()));
        }
        let [mut c, mut h, mut w] = self.input_shape;
        for (i, layer) in self.layers.iter().enumerate() {
            let last = i + 1 == self.layers.len();
            match layer.kind {
                FrozenKind::Conv { stride, pad } => {
                    let shape = layer.weights.shape();
                    if shape.len() != 4 {
                        return bad(i, format!("conv weights of shape {shape:?}"));
                    }
                    let g = ConvGeometry::resolve(
                        [1, c, h, w],
                        [shape[0], shape[1], shape[2], shape[3]],
                        stride as usize,
                        pad as usize,
                    )?;
                    (c, h, w) = (shape[0], g.oh, g.ow);
                    if last {
                        return bad(i, "classifier must be dense".into());
                    }
                }
                FrozenKind::Dense => {
                    let shape = layer.weights.shape();
                    if shape.len() != 2 || shape[1] != c * h * w {
                        return bad(i, format!("dense weights {shape:?} for input {c}x{h}x{w}"));
                    }
                    (c, h, w) = (shape[0], 1, 1);
                }
            }
            if layer.pool {
                if !matches!(layer.kind, FrozenKind::Conv { .. }) || h % 2 != 0 || w % 2 != 0 {
                    return bad(i, format!("cannot pool a {h}x{w} map"));
                }
                (h, w) = (h / 2, w / 2);
            }
            match (&layer.thresholds, last) {
                (Some(t), false) if t.channels() == c => {}
                (Some(t), false) => return bad(i, format!("{} thresholds for {c} channels", t.channels())),
                (None, true) => {}
                (Some(_), true) => return bad(i, "classifier carries thresholds".into()),
                (None, false) => return bad(i, "hidden layer without thresholds".into()),
            }
        }
        Ok(())
    }
}

/// Integer range bound `k` of the pre-activations of a layer.
pub fn preactivation_bound(fan_in: usize, first: bool, encoding: &InputEncoding) -> usize {
    if first && *encoding == InputEncoding::Int8 {
        fan_in * INT8_SCALE as usize
    } else {
        fan_in
    }
}

/// Freezes `model`. With `use_alpha` (always for `HardSteWithAlpha` models)
/// each hidden layer's per-channel alpha, fitted at `nu`, is folded into its
/// thresholds as `T / alpha`.
pub fn freeze_model<F: Scalar>(model: &Model<F>, use_alpha: bool, nu: f64) -> Result<FrozenModel> {
    let unfoldable = |index: usize, reason: &str| Error::UnfoldableLayer {
        index,
        reason: reason.to_string(),
    };
    let fold_alpha = use_alpha || model.mode == BinarizeMode::HardSteWithAlpha;
    let layers = &model.layers;
    let mut out = Vec::new();
    let mut i = 0;
    while i < layers.len() {
        let (kind, cw) = match &layers[i] {
            Layer::Conv(c) => {
                let (stride, pad) = (u8::try_from(c.stride), u8::try_from(c.pad));
                match (stride, pad) {
                    (Ok(stride), Ok(pad)) => (FrozenKind::Conv { stride, pad }, &c.weights),
                    _ => return Err(unfoldable(i, "stride or pad exceeds 255")),
                }
            }
            Layer::Dense(d) => (FrozenKind::Dense, &d.weights),
            Layer::SoftmaxCe if i + 1 == layers.len() => break,
            _ => return Err(unfoldable(i, "expected a conv or dense layer")),
        };
        if cw.full_precision {
            return Err(unfoldable(i, "full-precision layer has no binary form"));
        }
        let first = out.is_empty();
        let weights = freeze_weights(&cw.p);
        let fan_in: usize = cw.p.shape()[1..].iter().product();
        let mut j = i + 1;
        let pool = matches!(layers.get(j), Some(Layer::MaxPool(_)));
        if pool {
            j += 1;
        }
        let thresholds = match layers.get(j) {
            Some(Layer::SoftmaxCe) => {
                if pool || j + 1 != layers.len() {
                    return Err(unfoldable(i, "classifier must feed the loss directly"));
                }
                None
            }
            Some(Layer::BatchNorm(bn)) => {
                if !matches!(layers.get(j + 1), Some(Layer::Act(_))) {
                    return Err(unfoldable(j, "BatchNorm is not followed by a sign activation"));
                }
                let mut th = fold_bn(&bn.state);
                let mut alpha = if fold_alpha && cw.alpha_eligible {
                    cw.alpha_fit(F::of(nu))?.scale
                } else {
                    AlphaScale::ones(th.channels())
                };
                if first && model.encoding == InputEncoding::Int8 {
                    // runtime inputs are raw - 128, i.e. INT8_SCALE times the float inputs
                    alpha.alpha.iter_mut().for_each(|a| *a /= INT8_SCALE);
                }
                if alpha.alpha.iter().any(|&a| a != 1.0) {
                    th = apply_alpha(&th, &alpha)?;
                }
                j += 2;
                Some(quantize_thresholds(
                    &th,
                    preactivation_bound(fan_in, first, &model.encoding),
                ))
            }
            _ => return Err(unfoldable(j, "compute layer must be followed by BatchNorm or the loss")),
        };
        out.push(FrozenLayer {
            kind,
            weights,
            pool,
            thresholds,
        });
        i = j;
        if out.last().is_some_and(|l| l.thresholds.is_none()) {
            break;
        }
    }
    let frozen = FrozenModel {
        input_shape: model.input_shape,
        encoding: model.encoding.clone(),
        layers: out,
    };
    frozen.validate()?;
    Ok(frozen)
}
