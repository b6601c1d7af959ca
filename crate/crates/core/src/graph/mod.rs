//! Sequential models over a fixed layer vocabulary with hand-written
//! forward and backward passes.
//!
//! Every `Conv`/`Dense` layer is followed by an optional `MaxPool`, then
//! `BatchNorm`, then a binarizing activation. The single exception is the
//! classifier: a final `Dense` feeding `SoftmaxCe` directly.

pub mod ops;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::selfbin::alpha::AlphaScale;
use crate::selfbin::weights::{BinarizeMode, ConstrainedWeights, WeightView};
use crate::tensor::{conv2d, conv2d_grad_input, conv2d_grad_kernel, matmul, Scalar, Tensor};

use ops::{
    batchnorm_backward, batchnorm_forward_infer, batchnorm_forward_train, maxpool2_backward, maxpool2_forward,
    scaled_tanh_backward, scaled_tanh_forward, sign_forward, softmax_ce_backward, softmax_ce_forward, ste_backward,
    BatchNormCache, BatchNormState,
};

/// Half-width of the uniform initialization of `P`.
pub const INIT_RANGE: f64 = 0.1;

/// Value that spatial padding contributes, matching bit 0 in packed form.
pub const PAD_VALUE: f64 = -1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        full_precision: bool,
    },
    Dense {
        out_features: usize,
        full_precision: bool,
    },
    MaxPool,
    BatchNorm,
    ScaledTanhAct,
    SignSteAct,
    SoftmaxCe,
}

/// Compact architecture description: compute layers and pools only.
/// BatchNorm, activations and the loss are inserted by [`expand_arch`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ArchLayer {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        full_precision: bool,
    },
    Pool,
    Dense {
        out_features: usize,
        full_precision: bool,
    },
}

impl fmt::Display for ArchLayer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let fp = |b: bool| if b { ":fp" } else { "" };
        match *self {
            ArchLayer::Conv {
                out_channels,
                kernel,
                stride,
                pad,
                full_precision,
            } => write!(f, "conv:{out_channels}:{kernel}:{stride}:{pad}{}", fp(full_precision)),
            ArchLayer::Pool => f.write_str("pool"),
            ArchLayer::Dense {
                out_features,
                full_precision,
            } => write!(f, "dense:{out_features}{}", fp(full_precision)),
        }
    }
}

impl FromStr for ArchLayer {
    type Err = Error;

    /// `conv:OUT:K:STRIDE:PAD[:fp]`, `pool`, `dense:OUT[:fp]`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let bad = || Error::Config(format!("bad layer `{s}`"));
        let num = |t: &str| t.parse::<usize>().map_err(|_| bad());
        let (body, fp) = match parts.last() {
            Some(&"fp") => (&parts[..parts.len() - 1], true),
            _ => (&parts[..], false),
        };
        match body {
            ["pool"] if !fp => Ok(ArchLayer::Pool),
            ["dense", out] => Ok(ArchLayer::Dense {
                out_features: num(out)?,
                full_precision: fp,
            }),
            ["conv", out, k, st, p] => Ok(ArchLayer::Conv {
                out_channels: num(out)?,
                kernel: num(k)?,
                stride: num(st)?,
                pad: num(p)?,
                full_precision: fp,
            }),
            _ => Err(bad()),
        }
    }
}

pub fn format_arch(arch: &[ArchLayer]) -> String {
    arch.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(", ")
}

pub fn parse_arch(s: &str) -> Result<Vec<ArchLayer>> {
    s.split(',').filter(|t| !t.trim().is_empty()).map(str::parse).collect()
}

/// Inserts BatchNorm and the mode's activation after every compute layer
/// (after its pool, if any) except the last, which feeds the loss.
pub fn expand_arch(arch: &[ArchLayer], mode: BinarizeMode) -> Result<Vec<LayerSpec>> {
    let act = match mode {
        BinarizeMode::Soft => LayerSpec::ScaledTanhAct,
        _ => LayerSpec::SignSteAct,
    };
    let last_compute = arch
        .iter()
        .rposition(|l| !matches!(l, ArchLayer::Pool))
        .ok_or_else(|| Error::InvalidModel("architecture has no compute layers".into()))?;
    if !matches!(arch[last_compute], ArchLayer::Dense { .. }) || last_compute + 1 != arch.len() {
        return Err(Error::InvalidModel(
            "architecture must end with a dense classifier".into(),
        ));
    }
    let mut out = Vec::new();
    let mut i = 0;
    while i < arch.len() {
        match arch[i] {
            ArchLayer::Pool => return Err(Error::InvalidModel(format!("pool at {i} does not follow a conv"))),
            ArchLayer::Conv {
                out_channels,
                kernel,
                stride,
                pad,
                full_precision,
            } => out.push(LayerSpec::Conv {
                out_channels,
                kernel,
                stride,
                pad,
                full_precision,
            }),
            ArchLayer::Dense {
                out_features,
                full_precision,
            } => out.push(LayerSpec::Dense {
                out_features,
                full_precision,
            }),
        }
        if i == last_compute {
            out.push(LayerSpec::SoftmaxCe);
            break;
        }
        if matches!(arch.get(i + 1), Some(ArchLayer::Pool)) {
            if !matches!(arch[i], ArchLayer::Conv { .. }) {
                return Err(Error::InvalidModel(format!("pool at {} does not follow a conv", i + 1)));
            }
            out.push(LayerSpec::MaxPool);
            i += 1;
        }
        out.push(LayerSpec::BatchNorm);
        out.push(act);
        i += 1;
    }
    Ok(out)
}

/// Checks the ordering invariant of a layer list.
pub fn validate_specs(specs: &[LayerSpec]) -> Result<()> {
    let err = |i: usize, msg: &str| Err(Error::InvalidModel(format!("layer {i}: {msg}")));
    if specs.last() != Some(&LayerSpec::SoftmaxCe) {
        return err(specs.len(), "model must end with SoftmaxCe");
    }
    let mut i = 0;
    while i < specs.len() {
        match specs[i] {
            LayerSpec::Conv { .. } | LayerSpec::Dense { .. } => {
                let is_dense = matches!(specs[i], LayerSpec::Dense { .. });
                let mut j = i + 1;
                if is_dense && specs.get(j) == Some(&LayerSpec::SoftmaxCe) {
                    if j + 1 != specs.len() {
                        return err(j, "SoftmaxCe must be last");
                    }
                    return Ok(());
                }
                if specs.get(j) == Some(&LayerSpec::MaxPool) {
                    if is_dense {
                        return err(j, "MaxPool after Dense");
                    }
                    j += 1;
                }
                if specs.get(j) != Some(&LayerSpec::BatchNorm) {
                    return err(j, "compute layer must be followed by BatchNorm");
                }
                if !matches!(
                    specs.get(j + 1),
                    Some(LayerSpec::ScaledTanhAct) | Some(LayerSpec::SignSteAct)
                ) {
                    return err(j + 1, "BatchNorm must be followed by an activation");
                }
                i = j + 2;
            }
            _ => return err(i, "expected Conv or Dense"),
        }
    }
    err(specs.len(), "missing classifier")
}

/// How raw 8-bit input channels become the first layer's input.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InputEncoding {
    /// `+1` where the raw byte exceeds its channel's training-set median.
    Median(Vec<u8>),
    /// Centered bytes `(raw - 128) / 128`; integer `raw - 128` at inference.
    Int8,
}

pub const INT8_SCALE: f64 = 128.0;

impl InputEncoding {
    pub fn encode<F: Scalar>(&self, raw: &[u8], shape: [usize; 4]) -> Result<Tensor<F>> {
        let [_, c, h, w] = shape;
        let plane = h * w;
        let data = match self {
            InputEncoding::Int8 => raw
                .iter()
                .map(|&b| F::of((b as f64 - INT8_SCALE) / INT8_SCALE))
                .collect(),
            InputEncoding::Median(th) => {
                if th.len() != c {
                    return Err(Error::shape(format!("{} medians for {c} channels", th.len())));
                }
                raw.iter()
                    .enumerate()
                    .map(|(k, &b)| if b > th[(k / plane) % c] { F::one() } else { -F::one() })
                    .collect()
            }
        };
        Tensor::new(&shape, data)
    }
}

/// Settings of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Pass<F> {
    pub nu: F,
    pub training: bool,
    pub view: WeightView,
}

impl<F: Scalar> Pass<F> {
    pub fn train(nu: F) -> Self {
        Self {
            nu,
            training: true,
            view: WeightView {
                binary: false,
                alpha: false,
            },
        }
    }

    /// Inference with the training-time weights and activations.
    pub fn eval(nu: F) -> Self {
        Self {
            training: false,
            ..Self::train(nu)
        }
    }

    /// Inference with `sign(P)` weights and sign activations.
    pub fn binary(nu: F, alpha: bool) -> Self {
        Self {
            nu,
            training: false,
            view: WeightView { binary: true, alpha },
        }
    }
}

#[derive(Clone, Debug)]
struct WeightCache<F> {
    input: Tensor<F>,
    weights: Tensor<F>,
    alpha: Option<AlphaScale>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConvLayer<F = f32> {
    pub weights: ConstrainedWeights<F>,
    pub stride: usize,
    pub pad: usize,
    #[serde(skip)]
    cache: Option<WeightCache<F>>,
    #[serde(skip)]
    pub grad_p: Option<Tensor<F>>,
}

impl<F: Scalar> ConvLayer<F> {
    pub fn new(weights: ConstrainedWeights<F>, stride: usize, pad: usize) -> Self {
        Self {
            weights,
            stride,
            pad,
            cache: None,
            grad_p: None,
        }
    }

    pub fn kernel_shape(&self) -> [usize; 4] {
        self.weights.p.dims4().expect("conv kernel is rank 4")
    }

    fn run(&self, x: &Tensor<F>, pass: &Pass<F>) -> Result<(Tensor<F>, WeightCache<F>)> {
        let (weights, alpha) = self.weights.forward_weights(pass.view, pass.nu)?;
        let padded = x.pad2d(self.pad, F::of(PAD_VALUE))?;
        let y = conv2d(&padded, &weights, self.stride, 0)?;
        Ok((
            y,
            WeightCache {
                input: padded,
                weights,
                alpha,
            },
        ))
    }

    pub fn forward(&mut self, x: &Tensor<F>, pass: &Pass<F>) -> Result<Tensor<F>> {
        let (y, cache) = self.run(x, pass)?;
        self.cache = Some(cache);
        Ok(y)
    }

    pub fn backward(&mut self, upstream: &Tensor<F>, nu: F) -> Result<Tensor<F>> {
        let c = self.cache.take().ok_or(Error::StaleCache("conv"))?;
        let kshape = self.kernel_shape();
        let dw = conv2d_grad_kernel(&c.input, upstream, kshape, self.stride, 0)?;
        self.grad_p = Some(self.weights.backward(&dw, nu, c.alpha.as_ref())?);
        let dpad = conv2d_grad_input(upstream, &c.weights, c.input.dims4()?, self.stride, 0)?;
        dpad.crop2d(self.pad)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DenseLayer<F = f32> {
    pub weights: ConstrainedWeights<F>,
    #[serde(skip)]
    cache: Option<(Vec<usize>, WeightCache<F>)>,
    #[serde(skip)]
    pub grad_p: Option<Tensor<F>>,
}

impl<F: Scalar> DenseLayer<F> {
    pub fn new(weights: ConstrainedWeights<F>) -> Self {
        Self {
            weights,
            cache: None,
            grad_p: None,
        }
    }

    fn run(&self, x: &Tensor<F>, pass: &Pass<F>) -> Result<(Tensor<F>, WeightCache<F>)> {
        let n = x.shape()[0];
        let [out, fan_in] = self.weights.p.dims2()?;
        if x.len() != n * fan_in {
            return Err(Error::shape(format!(
                "dense expects {fan_in} features, got {:?}",
                x.shape()
            )));
        }
        let flat = x.clone().reshape(&[n, fan_in])?;
        let (weights, alpha) = self.weights.forward_weights(pass.view, pass.nu)?;
        let y = matmul(&flat, &weights.transpose2d()?)?.reshape(&[n, out, 1, 1])?;
        Ok((
            y,
            WeightCache {
                input: flat,
                weights,
                alpha,
            },
        ))
    }

    pub fn forward(&mut self, x: &Tensor<F>, pass: &Pass<F>) -> Result<Tensor<F>> {
        let (y, cache) = self.run(x, pass)?;
        self.cache = Some((x.shape().to_vec(), cache));
        Ok(y)
    }

    pub fn backward(&mut self, upstream: &Tensor<F>, nu: F) -> Result<Tensor<F>> {
        let (in_shape, c) = self.cache.take().ok_or(Error::StaleCache("dense"))?;
        let [out, _] = self.weights.p.dims2()?;
        let n = in_shape[0];
        let dy = upstream.clone().reshape(&[n, out])?;
        let dw = matmul(&dy.transpose2d()?, &c.input)?;
        self.grad_p = Some(self.weights.backward(&dw, nu, c.alpha.as_ref())?);
        matmul(&dy, &c.weights)?.reshape(&in_shape)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BatchNormLayer<F = f32> {
    pub state: BatchNormState<F>,
    #[serde(skip)]
    cache: Option<BatchNormCache<F>>,
    #[serde(skip)]
    pub grad_gamma: Option<Tensor<F>>,
    #[serde(skip)]
    pub grad_beta: Option<Tensor<F>>,
}

impl<F: Scalar> BatchNormLayer<F> {
    pub fn new(state: BatchNormState<F>) -> Self {
        Self {
            state,
            cache: None,
            grad_gamma: None,
            grad_beta: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor<F>, pass: &Pass<F>) -> Result<Tensor<F>> {
        if pass.training {
            let (y, cache) = batchnorm_forward_train(x, &mut self.state)?;
            self.cache = Some(cache);
            Ok(y)
        } else {
            batchnorm_forward_infer(x, &self.state)
        }
    }

    pub fn backward(&mut self, upstream: &Tensor<F>) -> Result<Tensor<F>> {
        let cache = self.cache.take().ok_or(Error::StaleCache("batch_norm"))?;
        let (dx, dg, db) = batchnorm_backward(&cache, &self.state, upstream)?;
        self.grad_gamma = Some(dg);
        self.grad_beta = Some(db);
        Ok(dx)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActKind {
    ScaledTanh,
    SignSte,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ActLayer<F = f32> {
    pub kind: ActKind,
    #[serde(skip)]
    cache: Option<Tensor<F>>,
}

impl<F: Scalar> ActLayer<F> {
    pub fn new(kind: ActKind) -> Self {
        Self { kind, cache: None }
    }

    fn run(&self, x: &Tensor<F>, pass: &Pass<F>) -> Tensor<F> {
        if pass.view.binary || self.kind == ActKind::SignSte {
            sign_forward(x)
        } else {
            scaled_tanh_forward(x, pass.nu)
        }
    }

    pub fn forward(&mut self, x: &Tensor<F>, pass: &Pass<F>) -> Result<Tensor<F>> {
        self.cache = Some(x.clone());
        Ok(self.run(x, pass))
    }

    pub fn backward(&mut self, upstream: &Tensor<F>, nu: F) -> Result<Tensor<F>> {
        let x = self.cache.take().ok_or(Error::StaleCache("activation"))?;
        match self.kind {
            ActKind::ScaledTanh => scaled_tanh_backward(&x, nu, upstream),
            ActKind::SignSte => ste_backward(&x, upstream),
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct PoolLayer {
    #[serde(skip)]
    cache: Option<(Vec<usize>, Vec<usize>)>,
}

impl PoolLayer {
    pub fn forward<F: Scalar>(&mut self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let (y, arg) = maxpool2_forward(x)?;
        self.cache = Some((x.shape().to_vec(), arg));
        Ok(y)
    }

    pub fn backward<F: Scalar>(&mut self, upstream: &Tensor<F>) -> Result<Tensor<F>> {
        let (shape, arg) = self.cache.take().ok_or(Error::StaleCache("max_pool"))?;
        maxpool2_backward(upstream, &arg, &shape)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound(
    serialize = "F: Scalar + Serialize",
    deserialize = "F: Scalar + serde::de::DeserializeOwned"
))]
pub enum Layer<F = f32> {
    Conv(ConvLayer<F>),
    Dense(DenseLayer<F>),
    MaxPool(PoolLayer),
    BatchNorm(BatchNormLayer<F>),
    Act(ActLayer<F>),
    SoftmaxCe,
}

impl<F: Scalar> Layer<F> {
    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::Conv(c) => {
                let [out_channels, _, kernel, _] = c.kernel_shape();
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride: c.stride,
                    pad: c.pad,
                    full_precision: c.weights.full_precision,
                }
            }
            Layer::Dense(d) => LayerSpec::Dense {
                out_features: d.weights.p.shape()[0],
                full_precision: d.weights.full_precision,
            },
            Layer::MaxPool(_) => LayerSpec::MaxPool,
            Layer::BatchNorm(_) => LayerSpec::BatchNorm,
            Layer::Act(a) => match a.kind {
                ActKind::ScaledTanh => LayerSpec::ScaledTanhAct,
                ActKind::SignSte => LayerSpec::SignSteAct,
            },
            Layer::SoftmaxCe => LayerSpec::SoftmaxCe,
        }
    }

    /// Read-only inference step.
    pub fn infer(&self, x: &Tensor<F>, pass: &Pass<F>) -> Result<Tensor<F>> {
        match self {
            Layer::Conv(c) => Ok(c.run(x, pass)?.0),
            Layer::Dense(d) => Ok(d.run(x, pass)?.0),
            Layer::MaxPool(_) => Ok(maxpool2_forward(x)?.0),
            Layer::BatchNorm(b) => batchnorm_forward_infer(x, &b.state),
            Layer::Act(a) => Ok(a.run(x, pass)),
            Layer::SoftmaxCe => Ok(x.clone()),
        }
    }

    /// Training step that saves what `backward` needs.
    pub fn forward(&mut self, x: &Tensor<F>, pass: &Pass<F>) -> Result<Tensor<F>> {
        match self {
            Layer::Conv(c) => c.forward(x, pass),
            Layer::Dense(d) => d.forward(x, pass),
            Layer::MaxPool(p) => p.forward(x),
            Layer::BatchNorm(b) => b.forward(x, pass),
            Layer::Act(a) => a.forward(x, pass),
            Layer::SoftmaxCe => Ok(x.clone()),
        }
    }

    pub fn backward(&mut self, upstream: &Tensor<F>, nu: F) -> Result<Tensor<F>> {
        match self {
            Layer::Conv(c) => c.backward(upstream, nu),
            Layer::Dense(d) => d.backward(upstream, nu),
            Layer::MaxPool(p) => p.backward(upstream),
            Layer::BatchNorm(b) => b.backward(upstream),
            Layer::Act(a) => a.backward(upstream, nu),
            Layer::SoftmaxCe => Ok(upstream.clone()),
        }
    }

    pub fn weights(&self) -> Option<&ConstrainedWeights<F>> {
        match self {
            Layer::Conv(c) => Some(&c.weights),
            Layer::Dense(d) => Some(&d.weights),
            _ => None,
        }
    }

    pub fn weights_mut(&mut self) -> Option<&mut ConstrainedWeights<F>> {
        match self {
            Layer::Conv(c) => Some(&mut c.weights),
            Layer::Dense(d) => Some(&mut d.weights),
            _ => None,
        }
    }
}

/// Identifies a learnable tensor for optimizer bookkeeping.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Gamma,
    Beta,
}

/// A sequential model with its parameters, running statistics and input encoding.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound(
    serialize = "F: Scalar + Serialize",
    deserialize = "F: Scalar + serde::de::DeserializeOwned"
))]
pub struct Model<F = f32> {
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub mode: BinarizeMode,
    pub encoding: InputEncoding,
    pub layers: Vec<Layer<F>>,
}

impl<F: Scalar> Model<F> {
    pub fn build<R: Rng>(
        specs: &[LayerSpec],
        input_shape: [usize; 3],
        mode: BinarizeMode,
        encoding: InputEncoding,
        rng: &mut R,
    ) -> Result<Self> {
        validate_specs(specs)?;
        let [mut c, mut h, mut w] = input_shape;
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            // alpha may only scale layers whose output reaches a BatchNorm
            let feeds_bn = specs[i + 1..].iter().take(2).any(|s| *s == LayerSpec::BatchNorm);
            let mut init = |shape: &[usize]| Tensor::from_fn(shape, |_| F::of(rng.gen_range(-INIT_RANGE..INIT_RANGE)));
            let layer = match *spec {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    pad,
                    full_precision,
                } => {
                    let g = crate::tensor::ConvGeometry::resolve(
                        [1, c, h, w],
                        [out_channels, c, kernel, kernel],
                        stride,
                        pad,
                    )?;
                    let p = init(&[out_channels, c, kernel, kernel]);
                    (c, h, w) = (out_channels, g.oh, g.ow);
                    Layer::Conv(ConvLayer::new(
                        ConstrainedWeights::new(p, mode, full_precision, feeds_bn),
                        stride,
                        pad,
                    ))
                }
                LayerSpec::Dense {
                    out_features,
                    full_precision,
                } => {
                    let p = init(&[out_features, c * h * w]);
                    (c, h, w) = (out_features, 1, 1);
                    Layer::Dense(DenseLayer::new(ConstrainedWeights::new(
                        p,
                        mode,
                        full_precision,
                        feeds_bn,
                    )))
                }
                LayerSpec::MaxPool => {
                    if h % 2 != 0 || w % 2 != 0 {
                        return Err(Error::InvalidModel(format!("layer {i}: max pool over odd map {h}x{w}")));
                    }
                    (h, w) = (h / 2, w / 2);
                    Layer::MaxPool(PoolLayer::default())
                }
                LayerSpec::BatchNorm => Layer::BatchNorm(BatchNormLayer::new(BatchNormState::new(c))),
                LayerSpec::ScaledTanhAct => Layer::Act(ActLayer::new(ActKind::ScaledTanh)),
                LayerSpec::SignSteAct => Layer::Act(ActLayer::new(ActKind::SignSte)),
                LayerSpec::SoftmaxCe => Layer::SoftmaxCe,
            };
            layers.push(layer);
        }
        Ok(Self {
            input_shape,
            num_classes: c * h * w,
            mode,
            encoding,
            layers,
        })
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }

    fn check_input(&self, x: &Tensor<F>) -> Result<usize> {
        let [n, c, h, w] = x.dims4()?;
        if [c, h, w] != self.input_shape {
            return Err(Error::shape(format!(
                "model expects input {:?}, got {:?}",
                self.input_shape,
                &x.shape()[1..]
            )));
        }
        Ok(n)
    }

    /// Logits `[N, classes]` without touching caches or running statistics.
    pub fn logits(&self, x: &Tensor<F>, pass: &Pass<F>) -> Result<Tensor<F>> {
        let n = self.check_input(x)?;
        let mut pass = *pass;
        pass.training = false;
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = layer.infer(&cur, &pass)?;
        }
        cur.reshape(&[n, self.num_classes])
    }

    pub fn predict(&self, x: &Tensor<F>, pass: &Pass<F>) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(x, pass)?))
    }

    /// Training forward pass; returns logits `[N, classes]`.
    pub fn forward_train(&mut self, x: &Tensor<F>, pass: &Pass<F>) -> Result<Tensor<F>> {
        let n = self.check_input(x)?;
        let mut cur = x.clone();
        for layer in &mut self.layers {
            cur = layer.forward(&cur, pass)?;
        }
        cur.reshape(&[n, self.num_classes])
    }

    /// Backpropagates `dL/dlogits`, storing parameter gradients in the layers.
    /// Returns the gradient with respect to the model input.
    pub fn backward(&mut self, grad_logits: &Tensor<F>, nu: F) -> Result<Tensor<F>> {
        let n = grad_logits.shape()[0];
        let mut cur = grad_logits.clone().reshape(&[n, self.num_classes, 1, 1])?;
        for layer in self.layers.iter_mut().rev() {
            cur = layer.backward(&cur, nu)?;
        }
        Ok(cur)
    }

    /// One forward/backward pass of the softmax cross-entropy loss.
    /// Returns the loss and the number of correct predictions.
    pub fn loss_and_grads(&mut self, x: &Tensor<F>, labels: &[usize], nu: F) -> Result<(F, usize)> {
        let logits = self.forward_train(x, &Pass::train(nu))?;
        let (loss, probs) = softmax_ce_forward(&logits, labels)?;
        let correct = argmax_rows(&logits).iter().zip(labels).filter(|(p, l)| p == l).count();
        let grad = softmax_ce_backward(&probs, labels)?;
        self.backward(&grad, nu)?;
        Ok((loss, correct))
    }

    /// Visits every learnable tensor with its gradient from the last backward pass.
    pub fn for_each_param(
        &mut self,
        mut f: impl FnMut(usize, ParamKind, &mut Tensor<F>, &Tensor<F>) -> Result<()>,
    ) -> Result<()> {
        let mut id = 0;
        for layer in &mut self.layers {
            match layer {
                Layer::Conv(ConvLayer { weights, grad_p, .. }) | Layer::Dense(DenseLayer { weights, grad_p, .. }) => {
                    let g = grad_p.as_ref().ok_or(Error::StaleCache("parameter gradient"))?;
                    f(id, ParamKind::Weight, &mut weights.p, g)?;
                    id += 1;
                }
                Layer::BatchNorm(b) => {
                    let gg = b.grad_gamma.as_ref().ok_or(Error::StaleCache("parameter gradient"))?;
                    f(id, ParamKind::Gamma, &mut b.state.gamma, gg)?;
                    let gb = b.grad_beta.as_ref().ok_or(Error::StaleCache("parameter gradient"))?;
                    f(id + 1, ParamKind::Beta, &mut b.state.beta, gb)?;
                    id += 2;
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Learnable tensors in optimizer order.
    pub fn params(&self) -> Vec<&Tensor<F>> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv(c) => out.push(&c.weights.p),
                Layer::Dense(d) => out.push(&d.weights.p),
                Layer::BatchNorm(b) => {
                    out.push(&b.state.gamma);
                    out.push(&b.state.beta);
                }
                _ => {}
            }
        }
        out
    }

    /// Refreshes soft weight caches at `nu` and clips hard latent weights.
    pub fn sync_weights(&mut self, nu: F) {
        for w in self.layers.iter_mut().filter_map(Layer::weights_mut) {
            w.clip_latent();
            w.sync(nu);
        }
    }

    pub fn weight_layers(&self) -> impl Iterator<Item = (usize, &ConstrainedWeights<F>)> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.weights().map(|w| (i, w)))
    }
}

/// Index of the first maximum of each row of a `[N, K]` tensor.
pub fn argmax_rows<F: Scalar>(t: &Tensor<F>) -> Vec<usize> {
    let k = t.shape().get(1).copied().unwrap_or(1).max(1);
    t.data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mlp() -> Vec<ArchLayer> {
        parse_arch("dense:8, dense:3").unwrap()
    }

    #[test]
    fn arch_round_trip() {
        let arch = parse_arch("conv:16:3:1:1, pool, conv:8:3:1:0:fp, dense:32, dense:10").unwrap();
        assert_eq!(parse_arch(&format_arch(&arch)).unwrap(), arch);
        assert!(parse_arch("conv:1:2").is_err());
        assert!(parse_arch("pool:fp").is_err());
    }

    #[test]
    fn expansion_inserts_bn_and_activation() {
        let arch = parse_arch("conv:4:3:1:1, pool, dense:6, dense:2").unwrap();
        let specs = expand_arch(&arch, BinarizeMode::Soft).unwrap();
        use LayerSpec::*;
        assert!(matches!(
            specs[..],
            [
                Conv { .. },
                MaxPool,
                BatchNorm,
                ScaledTanhAct,
                Dense { .. },
                BatchNorm,
                ScaledTanhAct,
                Dense { .. },
                SoftmaxCe
            ]
        ));
        validate_specs(&specs).unwrap();
        let hard = expand_arch(&arch, BinarizeMode::HardSte).unwrap();
        assert!(hard.contains(&SignSteAct));
        assert!(expand_arch(&parse_arch("dense:4, conv:2:1:1:0").unwrap(), BinarizeMode::Soft).is_err());
        assert!(expand_arch(&parse_arch("dense:4, pool").unwrap(), BinarizeMode::Soft).is_err());
    }

    #[test]
    fn validation_rejects_missing_bn() {
        use LayerSpec::*;
        let dense = Dense {
            out_features: 3,
            full_precision: false,
        };
        assert!(validate_specs(&[dense, ScaledTanhAct, dense, SoftmaxCe]).is_err());
        assert!(validate_specs(&[dense, BatchNorm, dense, SoftmaxCe]).is_err());
        assert!(validate_specs(&[dense, BatchNorm, SignSteAct, dense, SoftmaxCe]).is_ok());
        assert!(validate_specs(&[dense, BatchNorm, SignSteAct]).is_err());
    }

    #[test]
    fn build_infers_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let arch = parse_arch("conv:4:3:1:1, pool, dense:5, dense:3").unwrap();
        let specs = expand_arch(&arch, BinarizeMode::Soft).unwrap();
        let model = Model::<f32>::build(&specs, [2, 6, 6], BinarizeMode::Soft, InputEncoding::Int8, &mut rng).unwrap();
        assert_eq!(model.num_classes, 3);
        let dense = model.layers.iter().find_map(|l| match l {
            Layer::Dense(d) => Some(d),
            _ => None,
        });
        assert_eq!(dense.unwrap().weights.p.shape(), &[5, 4 * 3 * 3]);
        assert!(model
            .weight_layers()
            .flat_map(|(_, w)| w.p.data())
            .all(|v| v.abs() <= 0.1));
        let x = Tensor::zeros(&[2, 2, 6, 6]);
        assert_eq!(model.logits(&x, &Pass::eval(1.0)).unwrap().shape(), &[2, 3]);
        assert!(model.logits(&Tensor::zeros(&[2, 1, 6, 6]), &Pass::eval(1.0)).is_err());
    }

    #[test]
    fn backward_without_forward_is_stale() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let specs = expand_arch(&mlp(), BinarizeMode::Soft).unwrap();
        let mut model =
            Model::<f64>::build(&specs, [4, 1, 1], BinarizeMode::Soft, InputEncoding::Int8, &mut rng).unwrap();
        let g = Tensor::zeros(&[2, 3]);
        assert!(matches!(model.backward(&g, 1.0), Err(Error::StaleCache(_))));
        let x = Tensor::from_fn(&[2, 4, 1, 1], |i| i as f64 * 0.1 - 0.3);
        model.forward_train(&x, &Pass::train(1.0)).unwrap();
        model.backward(&g, 1.0).unwrap();
        assert!(matches!(model.backward(&g, 1.0), Err(Error::StaleCache(_))));
    }

    #[test]
    fn zero_upstream_zero_param_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let specs = expand_arch(&parse_arch("conv:3:3:1:1, pool, dense:3").unwrap(), BinarizeMode::Soft).unwrap();
        let mut model =
            Model::<f64>::build(&specs, [1, 4, 4], BinarizeMode::Soft, InputEncoding::Int8, &mut rng).unwrap();
        let x = Tensor::from_fn(&[3, 1, 4, 4], |i| ((i * 7) % 11) as f64 / 11.0 - 0.5);
        model.sync_weights(2.0);
        model.forward_train(&x, &Pass::train(2.0)).unwrap();
        model.backward(&Tensor::zeros(&[3, 3]), 2.0).unwrap();
        model
            .for_each_param(|_, _, _, g| {
                assert!(g.data().iter().all(|&v| v == 0.0));
                Ok(())
            })
            .unwrap();
    }

    #[test]
    fn median_encoding() {
        let enc = InputEncoding::Median(vec![10, 200]);
        let t: Tensor<f32> = enc.encode(&[10, 11, 200, 255], [1, 2, 1, 2]).unwrap();
        assert_eq!(t.data(), &[-1.0, 1.0, -1.0, 1.0]);
        let t: Tensor<f32> = InputEncoding::Int8.encode(&[0, 128, 255], [1, 3, 1, 1]).unwrap();
        assert_eq!(t.data(), &[-1.0, 0.0, 127.0 / 128.0]);
    }
}
