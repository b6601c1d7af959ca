//! Executes a [`FrozenModel`] with integer and bitwise operations only.

use std::fmt::Write as _;

use crate::binrt::bits::{BitTensor, IntFeatureMap};
use crate::binrt::kernels::{binary_bn_act, binconv2d, bindense, int_conv2d, int_dense, maxpool2_int};
use crate::error::{Error, Result};
use crate::freeze::{FrozenKind, FrozenModel};
use crate::graph::InputEncoding;

/// Padding value of 8-bit inputs (`raw - 128`), matching `-1` in float.
pub const INT8_PAD: i32 = -128;

/// A batch prepared for the first layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FrozenInput {
    /// Median-thresholded bits `[N, C, H, W]`.
    Bits(BitTensor),
    /// Centered bytes `raw - 128`.
    Int(IntFeatureMap),
}

impl FrozenInput {
    pub fn batch(&self) -> usize {
        match self {
            FrozenInput::Bits(b) => b.shape()[0],
            FrozenInput::Int(m) => m.shape[0],
        }
    }
}

/// Encodes raw bytes `[N, C, H, W]` the way the model's header prescribes.
pub fn encode_input(model: &FrozenModel, raw: &[u8], shape: [usize; 4]) -> Result<FrozenInput> {
    let [_, c, h, w] = shape;
    if [c, h, w] != model.input_shape {
        return Err(Error::shape(format!(
            "model expects input {:?}, got {:?}",
            model.input_shape,
            [c, h, w]
        )));
    }
    if raw.len() != shape.iter().product::<usize>() {
        return Err(Error::shape(format!("{} bytes for shape {shape:?}", raw.len())));
    }
    let plane = h * w;
    match &model.encoding {
        InputEncoding::Median(m) => Ok(FrozenInput::Bits(BitTensor::from_fn(&shape, |i| {
            raw[i] > m[(i / plane) % c]
        }))),
        InputEncoding::Int8 => Ok(FrozenInput::Int(IntFeatureMap::new(
            shape,
            raw.iter().map(|&b| b as i32 + INT8_PAD).collect(),
        )?)),
    }
}

/// Raw integer class scores, one row per image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Scores {
    pub classes: usize,
    pub data: Vec<i32>,
}

impl Scores {
    pub fn len(&self) -> usize {
        self.data.len() / self.classes.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[i32] {
        &self.data[i * self.classes..(i + 1) * self.classes]
    }

    /// Index of the first maximum score of each row.
    pub fn argmax(&self) -> Vec<usize> {
        (0..self.len())
            .map(|i| {
                let row = self.row(i);
                let mut best = 0;
                for (k, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = k;
                    }
                }
                best
            })
            .collect()
    }
}

pub fn run_frozen(model: &FrozenModel, input: &FrozenInput) -> Result<Scores> {
    let n = input.batch();
    let mut cur = input.clone();
    for (i, layer) in model.layers.iter().enumerate() {
        let mut pre = match (layer.kind, &cur) {
            (FrozenKind::Conv { stride, pad }, FrozenInput::Bits(b)) => {
                binconv2d(b, &layer.weights, stride as usize, pad as usize)?
            }
            (FrozenKind::Conv { stride, pad }, FrozenInput::Int(q)) => {
                int_conv2d(q, &layer.weights, stride as usize, pad as usize, INT8_PAD)?
            }
            (FrozenKind::Dense, FrozenInput::Bits(b)) => {
                let flat = b.reshape(&[n, b.len() / n.max(1)])?;
                bindense(&flat, &layer.weights)?
            }
            (FrozenKind::Dense, FrozenInput::Int(q)) => int_dense(q, &layer.weights)?,
        };
        if layer.pool {
            pre = maxpool2_int(&pre)?;
        }
        match &layer.thresholds {
            Some(th) => cur = FrozenInput::Bits(binary_bn_act(&pre, th)?),
            None if i + 1 == model.layers.len() => {
                return Ok(Scores {
                    classes: pre.shape[1],
                    data: pre.data,
                })
            }
            None => return Err(Error::InvalidModel(format!("frozen layer {i} has no thresholds"))),
        }
    }
    Err(Error::InvalidModel("frozen model ends without a classifier".into()))
}

/// CSV with columns `image_index,argmax,score_0,...,score_{K-1}`.
pub fn predictions_csv(scores: &Scores) -> String {
    let mut s = String::from("image_index,argmax");
    for k in 0..scores.classes {
        let _ = write!(s, ",score_{k}");
    }
    s.push('\n');
    for (i, best) in scores.argmax().into_iter().enumerate() {
        let _ = write!(s, "{i},{best}");
        for v in scores.row(i) {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}
