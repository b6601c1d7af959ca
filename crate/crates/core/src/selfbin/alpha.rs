//! Per-channel scale for binary weights, adapted to a `tanh(nu * w)` pattern.
//!
//! For one output channel with latent weights `w` and pattern `f = tanh(nu * w)`,
//! the least-squares scale is `alpha = (w . f) / (f . f)`. The effective weights
//! `alpha * f` are differentiated through both `alpha(w)` and `f(w)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaScale {
    pub alpha: Vec<f64>,
}

impl AlphaScale {
    pub fn ones(channels: usize) -> Self {
        Self {
            alpha: vec![1.0; channels],
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.alpha.iter().position(|&a| !(a > 0.0 && a.is_finite())) {
            Some(channel) => Err(Error::NonPositiveAlpha {
                channel,
                value: self.alpha[channel],
            }),
            None => Ok(()),
        }
    }
}

/// Outcome of [`alpha_optimal`]: the scale plus the channels whose pattern
/// vanished and were given `alpha = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct AlphaFit {
    pub scale: AlphaScale,
    pub degenerate: Vec<usize>,
}

fn channels<F: Scalar>(w: &Tensor<F>) -> Result<(usize, usize)> {
    let cout = *w
        .shape()
        .first()
        .ok_or_else(|| Error::shape("alpha needs a weight tensor of rank >= 1"))?;
    if cout == 0 || !w.len().is_multiple_of(cout) || w.is_empty() {
        return Err(Error::shape(format!("empty channel in weights {:?}", w.shape())));
    }
    Ok((cout, w.len() / cout))
}

/// Least-squares scale of each output channel of `w` onto `tanh(nu * w)`.
pub fn alpha_optimal<F: Scalar>(w: &Tensor<F>, nu: F) -> Result<AlphaFit> {
    let (cout, per) = channels(w)?;
    let mut alpha = Vec::with_capacity(cout);
    let mut degenerate = Vec::new();
    for (c, chunk) in w.data().chunks(per).enumerate() {
        let (mut num, mut den) = (0.0f64, 0.0f64);
        for &v in chunk {
            let f = (nu * v).tanh().as_f64();
            num += v.as_f64() * f;
            den += f * f;
        }
        if den == 0.0 {
            degenerate.push(c);
            alpha.push(1.0);
        } else {
            alpha.push(num / den);
        }
    }
    Ok(AlphaFit {
        scale: AlphaScale { alpha },
        degenerate,
    })
}

/// Gradient of the cost with respect to latent weights `w` given the gradient
/// `grad_b` with respect to the effective weights `alpha(w) * tanh(nu * w)`.
///
/// Per channel: `dC/dw_i = dalpha/dw_i * sum_j(dC/db_j * f_j) + alpha * dC/db_i * df_i/dw_i`.
/// Degenerate channels (all `f = 0`) treat `alpha` as the constant 1.
pub fn alpha_chain_backward<F: Scalar>(
    grad_b: &Tensor<F>,
    w: &Tensor<F>,
    alpha: &AlphaScale,
    nu: F,
) -> Result<Tensor<F>> {
    if grad_b.shape() != w.shape() {
        return Err(Error::shape(format!(
            "gradient {:?} vs weights {:?}",
            grad_b.shape(),
            w.shape()
        )));
    }
    let (cout, per) = channels(w)?;
    if alpha.alpha.len() != cout {
        return Err(Error::shape(format!(
            "{} alphas for {cout} channels",
            alpha.alpha.len()
        )));
    }
    let mut out = Vec::with_capacity(w.len());
    for ((wc, gc), &a) in w.data().chunks(per).zip(grad_b.data().chunks(per)).zip(&alpha.alpha) {
        let f: Vec<F> = wc.iter().map(|&v| (nu * v).tanh()).collect();
        let df: Vec<F> = f.iter().map(|&fv| nu * (F::one() - fv * fv)).collect();
        let num: F = wc.iter().zip(&f).map(|(&v, &fv)| v * fv).sum();
        let den: F = f.iter().map(|&fv| fv * fv).sum();
        let a = F::of(a);
        let g_dot_f: F = gc.iter().zip(&f).map(|(&g, &fv)| g * fv).sum();
        for i in 0..per {
            let dalpha = if den == F::zero() {
                F::zero()
            } else {
                let dnum = f[i] + wc[i] * df[i];
                let dden = F::of(2.0) * f[i] * df[i];
                (dnum * den - num * dden) / (den * den)
            };
            out.push(dalpha * g_dot_f + a * gc[i] * df[i]);
        }
    }
    Tensor::new(w.shape(), out)
}

/// Effective weights `alpha * tanh(nu * w)` per channel; the map whose
/// derivative [`alpha_chain_backward`] implements.
pub fn alpha_tanh_weights<F: Scalar>(w: &Tensor<F>, nu: F) -> Result<Tensor<F>> {
    let fit = alpha_optimal(w, nu)?;
    let (_, per) = channels(w)?;
    let mut out = Vec::with_capacity(w.len());
    for (chunk, &a) in w.data().chunks(per).zip(&fit.scale.alpha) {
        out.extend(chunk.iter().map(|&v| F::of(a) * (nu * v).tanh()));
    }
    Tensor::new(w.shape(), out)
}
