//! Dense row-major tensors of rank at most four.
//!
//! Feature maps are laid out `N, C, H, W` and convolution kernels
//! `Cout, Cin, Kh, Kw`. Every operation is pure: inputs are borrowed and a
//! fresh tensor is returned. The element type is generic so that gradient
//! checks can run the exact same code paths in `f64`; training uses `f32`.

use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Real element type usable by tensors and layers.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + fmt::Debug
    + fmt::Display
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + Send
    + Sync
    + 'static
{
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("scalar conversion")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar conversion")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

pub const MAX_RANK: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor<F = f32> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: &[usize], data: Vec<F>) -> Result<Self> {
        if shape.len() > MAX_RANK {
            return Err(Error::shape(format!("rank {} exceeds {MAX_RANK}", shape.len())));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, F::zero())
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        assert!(shape.len() <= MAX_RANK, "rank exceeds {MAX_RANK}");
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> F) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| G::of(v.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Applies `f` to every element.
    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(F, F) -> F) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "elementwise operands {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    /// Hadamard product.
    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: F) -> Self {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> F {
        self.data.iter().copied().sum()
    }

    pub fn dot(&self, other: &Self) -> Result<F> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "dot operands {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).sum())
    }

    /// Mean over `axes`; the reduced axes are removed from the shape.
    pub fn reduce_mean(&self, axes: &[usize]) -> Result<Self> {
        let (shape, groups) = self.reduction_groups(axes)?;
        let data = groups
            .iter()
            .map(|g| {
                let n = F::of(g.len() as f64);
                g.iter().map(|&i| self.data[i]).sum::<F>() / n
            })
            .collect();
        Self::new(&shape, data)
    }

    /// Population variance over `axes`; the reduced axes are removed.
    pub fn reduce_var(&self, axes: &[usize]) -> Result<Self> {
        let (shape, groups) = self.reduction_groups(axes)?;
        let data = groups
            .iter()
            .map(|g| {
                let n = F::of(g.len() as f64);
                let mean = g.iter().map(|&i| self.data[i]).sum::<F>() / n;
                g.iter()
                    .map(|&i| {
                        let d = self.data[i] - mean;
                        d * d
                    })
                    .sum::<F>()
                    / n
            })
            .collect();
        Self::new(&shape, data)
    }

    // Groups flat indices by their coordinates on the kept axes.
    fn reduction_groups(&self, axes: &[usize]) -> Result<(Vec<usize>, Vec<Vec<usize>>)> {
        let rank = self.shape.len();
        if let Some(&bad) = axes.iter().find(|&&a| a >= rank) {
            return Err(Error::shape(format!("axis {bad} out of range for rank {rank}")));
        }
        let kept: Vec<usize> = (0..rank).filter(|a| !axes.contains(a)).collect();
        let out_shape: Vec<usize> = kept.iter().map(|&a| self.shape[a]).collect();
        let out_len: usize = out_shape.iter().product();
        let mut groups = vec![Vec::new(); out_len];
        let strides = strides(&self.shape);
        for flat in 0..self.data.len() {
            let mut out_idx = 0;
            for &a in &kept {
                let coord = (flat / strides[a]) % self.shape[a];
                out_idx = out_idx * self.shape[a] + coord;
            }
            groups[out_idx].push(flat);
        }
        Ok((out_shape, groups))
    }

    /// Swaps the two axes of a rank-2 tensor.
    pub fn transpose2d(&self) -> Result<Self> {
        let [r, c] = self.dims2()?;
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::new(&[c, r], out)
    }

    pub fn dims2(&self) -> Result<[usize; 2]> {
        match self.shape[..] {
            [a, b] => Ok([a, b]),
            _ => Err(Error::shape(format!("expected rank 2, got {:?}", self.shape))),
        }
    }

    pub fn dims4(&self) -> Result<[usize; 4]> {
        match self.shape[..] {
            [a, b, c, d] => Ok([a, b, c, d]),
            _ => Err(Error::shape(format!("expected rank 4, got {:?}", self.shape))),
        }
    }

    /// Surrounds the two spatial axes of an NCHW tensor with `pad` cells of `value`.
    pub fn pad2d(&self, pad: usize, value: F) -> Result<Self> {
        let [n, c, h, w] = self.dims4()?;
        if pad == 0 {
            return Ok(self.clone());
        }
        let (hp, wp) = (h + 2 * pad, w + 2 * pad);
        let mut out = vec![value; n * c * hp * wp];
        for plane in 0..n * c {
            for y in 0..h {
                let src = &self.data[(plane * h + y) * w..][..w];
                let dst = (plane * hp + y + pad) * wp + pad;
                out[dst..dst + w].copy_from_slice(src);
            }
        }
        Self::new(&[n, c, hp, wp], out)
    }

    /// Inverse of [`Tensor::pad2d`]: drops `pad` border cells on each side.
    pub fn crop2d(&self, pad: usize) -> Result<Self> {
        let [n, c, hp, wp] = self.dims4()?;
        if pad == 0 {
            return Ok(self.clone());
        }
        if hp < 2 * pad || wp < 2 * pad {
            return Err(Error::shape(format!("cannot crop {pad} from {:?}", self.shape)));
        }
        let (h, w) = (hp - 2 * pad, wp - 2 * pad);
        let mut out = Vec::with_capacity(n * c * h * w);
        for plane in 0..n * c {
            for y in 0..h {
                let src = (plane * hp + y + pad) * wp + pad;
                out.extend_from_slice(&self.data[src..src + w]);
            }
        }
        Self::new(&[n, c, h, w], out)
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// `a[M,K] · b[K,N]`.
pub fn matmul<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let [m, k] = a.dims2()?;
    let [k2, n] = b.dims2()?;
    if k != k2 {
        return Err(Error::shape(format!("matmul inner dims {k} vs {k2}")));
    }
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == F::zero() {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(&[m, n], out)
}

/// Geometry of a 2-D convolution, resolved from input and kernel shapes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeometry {
    pub fn resolve(input: [usize; 4], kernel: [usize; 4], stride: usize, pad: usize) -> Result<Self> {
        let [n, cin, h, w] = input;
        let [cout, kcin, kh, kw] = kernel;
        if stride == 0 {
            return Err(Error::shape("stride must be positive"));
        }
        if cin != kcin {
            return Err(Error::shape(format!("input has {cin} channels, kernel expects {kcin}")));
        }
        let (hp, wp) = (h + 2 * pad, w + 2 * pad);
        if kh == 0 || kw == 0 || kh > hp || kw > wp {
            return Err(Error::shape(format!(
                "kernel {kh}x{kw} does not fit padded input {hp}x{wp}"
            )));
        }
        if (hp - kh) % stride != 0 || (wp - kw) % stride != 0 {
            return Err(Error::shape(format!(
                "output size not integral for input {hp}x{wp}, kernel {kh}x{kw}, stride {stride}"
            )));
        }
        Ok(Self {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad,
            oh: (hp - kh) / stride + 1,
            ow: (wp - kw) / stride + 1,
        })
    }

    pub fn fan_in(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.n, self.cout, self.oh, self.ow]
    }
}

// Unfolds image `img` (zero padded) into a `[Cin*Kh*Kw, Oh*Ow]` column buffer.
fn im2col<F: Scalar>(input: &[F], g: &ConvGeometry, img: usize, cols: &mut [F]) {
    let plane = g.h * g.w;
    let npos = g.oh * g.ow;
    for ci in 0..g.cin {
        let base = (img * g.cin + ci) * plane;
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * npos..(row + 1) * npos];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        dst[oy * g.ow + ox] = if iy >= 0 && (iy as usize) < g.h && ix >= 0 && (ix as usize) < g.w {
                            input[base + iy as usize * g.w + ix as usize]
                        } else {
                            F::zero()
                        };
                    }
                }
            }
        }
    }
}

fn col2im<F: Scalar>(cols: &[F], g: &ConvGeometry, img: usize, out: &mut [F]) {
    let plane = g.h * g.w;
    let npos = g.oh * g.ow;
    for ci in 0..g.cin {
        let base = (img * g.cin + ci) * plane;
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * npos..(row + 1) * npos];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix as usize >= g.w {
                            continue;
                        }
                        out[base + iy as usize * g.w + ix as usize] += src[oy * g.ow + ox];
                    }
                }
            }
        }
    }
}

/// Cross-correlation with zero padding (no kernel flip).
pub fn conv2d<F: Scalar>(input: &Tensor<F>, kernel: &Tensor<F>, stride: usize, pad: usize) -> Result<Tensor<F>> {
    let g = ConvGeometry::resolve(input.dims4()?, kernel.dims4()?, stride, pad)?;
    let k = g.fan_in();
    let npos = g.oh * g.ow;
    let mut cols = vec![F::zero(); k * npos];
    let mut out = vec![F::zero(); g.n * g.cout * npos];
    for img in 0..g.n {
        im2col(input.data(), &g, img, &mut cols);
        for co in 0..g.cout {
            let dst = &mut out[(img * g.cout + co) * npos..][..npos];
            let krow = &kernel.data()[co * k..(co + 1) * k];
            for (r, &kv) in krow.iter().enumerate() {
                if kv == F::zero() {
                    continue;
                }
                for (o, &c) in dst.iter_mut().zip(&cols[r * npos..(r + 1) * npos]) {
                    *o += kv * c;
                }
            }
        }
    }
    Tensor::new(&g.output_shape(), out)
}

/// Gradient of [`conv2d`] with respect to its input.
pub fn conv2d_grad_input<F: Scalar>(
    upstream: &Tensor<F>,
    kernel: &Tensor<F>,
    input_shape: [usize; 4],
    stride: usize,
    pad: usize,
) -> Result<Tensor<F>> {
    let g = ConvGeometry::resolve(input_shape, kernel.dims4()?, stride, pad)?;
    if upstream.shape() != g.output_shape() {
        return Err(Error::shape(format!(
            "upstream {:?} does not match conv output {:?}",
            upstream.shape(),
            g.output_shape()
        )));
    }
    let k = g.fan_in();
    let npos = g.oh * g.ow;
    let mut dcols = vec![F::zero(); k * npos];
    let mut out = vec![F::zero(); input_shape.iter().product()];
    for img in 0..g.n {
        dcols.iter_mut().for_each(|v| *v = F::zero());
        for co in 0..g.cout {
            let dy = &upstream.data()[(img * g.cout + co) * npos..][..npos];
            let krow = &kernel.data()[co * k..(co + 1) * k];
            for (r, &kv) in krow.iter().enumerate() {
                for (d, &u) in dcols[r * npos..(r + 1) * npos].iter_mut().zip(dy) {
                    *d += kv * u;
                }
            }
        }
        col2im(&dcols, &g, img, &mut out);
    }
    Tensor::new(&input_shape, out)
}

/// Gradient of [`conv2d`] with respect to its kernel.
pub fn conv2d_grad_kernel<F: Scalar>(
    input: &Tensor<F>,
    upstream: &Tensor<F>,
    kernel_shape: [usize; 4],
    stride: usize,
    pad: usize,
) -> Result<Tensor<F>> {
    let g = ConvGeometry::resolve(input.dims4()?, kernel_shape, stride, pad)?;
    if upstream.shape() != g.output_shape() {
        return Err(Error::shape(format!(
            "upstream {:?} does not match conv output {:?}",
            upstream.shape(),
            g.output_shape()
        )));
    }
    let k = g.fan_in();
    let npos = g.oh * g.ow;
    let mut cols = vec![F::zero(); k * npos];
    let mut out = vec![F::zero(); g.cout * k];
    for img in 0..g.n {
        im2col(input.data(), &g, img, &mut cols);
        for co in 0..g.cout {
            let dy = &upstream.data()[(img * g.cout + co) * npos..][..npos];
            for r in 0..k {
                let c = &cols[r * npos..(r + 1) * npos];
                out[co * k + r] += c.iter().zip(dy).map(|(&a, &b)| a * b).sum::<F>();
            }
        }
    }
    Tensor::new(&kernel_shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    // Six nested loops straight from the definition.
    fn conv_oracle(x: &Tensor<f64>, k: &Tensor<f64>, stride: usize, pad: usize) -> Vec<f64> {
        let [n, cin, h, w] = x.dims4().unwrap();
        let [cout, _, kh, kw] = k.dims4().unwrap();
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; n * cout * oh * ow];
        for b in 0..n {
            for co in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += x.data()[((b * cin + ci) * h + iy as usize) * w + ix as usize]
                                        * k.data()[((co * cin + ci) * kh + ky) * kw + kx];
                                }
                            }
                        }
                        out[((b * cout + co) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_all_ones() {
        let x = Tensor::<f32>::full(&[1, 1, 3, 3], 1.0);
        let k = Tensor::<f32>::full(&[1, 1, 2, 2], 1.0);
        let y = conv2d(&x, &k, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn conv_zero_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::zeros(&[2, 2, 4, 4]);
        let k = random(&[3, 2, 3, 3], &mut rng);
        assert!(conv2d(&x, &k, 1, 1).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[1, 2, 5, 5], &mut rng);
        let k = random(&[3, 2, 3, 3], &mut rng);
        let y = conv2d(&x, &k, 1, 0).unwrap();
        for (a, b) in y.data().iter().zip(conv_oracle(&x, &k, 1, 0)) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn conv_matches_oracle_on_random_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..120 {
            let kh = rng.gen_range(1..4);
            let kw = rng.gen_range(1..4);
            let stride = rng.gen_range(1..3);
            let pad = rng.gen_range(0..2);
            // pick the output size first so the geometry is always integral
            let (oh, ow) = (rng.gen_range(1..5), rng.gen_range(1..5));
            let span_h = (oh - 1) * stride + kh;
            let span_w = (ow - 1) * stride + kw;
            let pad = if span_h > 2 * pad && span_w > 2 * pad { pad } else { 0 };
            let (h, w) = (span_h - 2 * pad, span_w - 2 * pad);
            let cin = rng.gen_range(1..4);
            let cout = rng.gen_range(1..4);
            let x = random(&[rng.gen_range(1..3), cin, h, w], &mut rng);
            let k = random(&[cout, cin, kh, kw], &mut rng);
            let y = conv2d(&x, &k, stride, pad).unwrap();
            assert_eq!(y.shape()[2..], [oh, ow]);
            for (a, b) in y.data().iter().zip(conv_oracle(&x, &k, stride, pad)) {
                assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let x = Tensor::<f32>::zeros(&[1, 2, 4, 4]);
        let k = Tensor::<f32>::zeros(&[1, 3, 3, 3]);
        assert!(matches!(conv2d(&x, &k, 1, 0), Err(Error::ShapeMismatch(_))));
        let k = Tensor::<f32>::zeros(&[1, 2, 3, 3]);
        assert!(matches!(conv2d(&x, &k, 2, 0), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn conv_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&[2, 2, 4, 4], &mut rng);
        let y = random(&[2, 2, 4, 4], &mut rng);
        let k = random(&[3, 2, 3, 3], &mut rng);
        let (a, b) = (0.7, -1.3);
        let lhs = conv2d(&x.scale(a).add(&y.scale(b)).unwrap(), &k, 1, 1).unwrap();
        let rhs = conv2d(&x, &k, 1, 1)
            .unwrap()
            .scale(a)
            .add(&conv2d(&y, &k, 1, 1).unwrap().scale(b))
            .unwrap();
        for (l, r) in lhs.data().iter().zip(rhs.data()) {
            assert!((l - r).abs() < 1e-5);
        }
    }

    #[test]
    fn matmul_cases() {
        let id = Tensor::<f32>::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(matmul(&id, &b).unwrap(), b);
        let a = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let ones = Tensor::new(&[2, 1], vec![1.0, 1.0]).unwrap();
        assert_eq!(matmul(&a, &ones).unwrap().data(), &[3.0, 7.0]);
        assert!(matches!(
            matmul(&a, &b.transpose2d().unwrap()),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let (m, k, n) = (rng.gen_range(1..7), rng.gen_range(1..7), rng.gen_range(1..7));
            let a = random(&[m, k], &mut rng);
            let b = random(&[k, n], &mut rng);
            let c = matmul(&a, &b).unwrap();
            for i in 0..m {
                for j in 0..n {
                    let mut acc = 0.0;
                    for p in 0..k {
                        acc += a.data()[i * k + p] * b.data()[p * n + j];
                    }
                    assert!((c.data()[i * n + j] - acc).abs() <= 1e-6);
                }
            }
        }
    }

    #[test]
    fn reductions() {
        let t = Tensor::<f32>::new(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.reduce_mean(&[0]).unwrap().data(), &[2.5]);
        assert_eq!(t.reduce_var(&[0]).unwrap().data(), &[1.25]);
        let m = Tensor::<f32>::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let r = m.reduce_mean(&[1]).unwrap();
        assert_eq!(r.shape(), &[2]);
        assert_eq!(r.data(), &[2.0, 5.0]);
        let c = m.reduce_mean(&[0]).unwrap();
        assert_eq!(c.data(), &[2.5, 3.5, 4.5]);
        assert!(m.reduce_mean(&[2]).is_err());
    }

    #[test]
    fn scale_by_zero() {
        let t = Tensor::<f32>::new(&[3], vec![1.0, -2.0, 5.0]).unwrap();
        assert!(t.scale(0.0).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn new_checks_length() {
        assert!(Tensor::<f32>::new(&[2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f32>::new(&[1, 1, 1, 1, 1], vec![0.0]).is_err());
    }

    #[test]
    fn pad_crop_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random(&[2, 3, 4, 5], &mut rng);
        let p = x.pad2d(2, -1.0).unwrap();
        assert_eq!(p.shape(), &[2, 3, 8, 9]);
        assert_eq!(p.data()[0], -1.0);
        assert_eq!(p.crop2d(2).unwrap(), x);
    }
}
