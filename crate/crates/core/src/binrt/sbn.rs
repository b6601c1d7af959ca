//! Shift-based BatchNorm: `gamma` and `sigma_r` rounded to powers of two so
//! the scale becomes a shift on a Q32.32 fixed-point value.

use crate::error::Result;
use crate::graph::ops::BatchNormState;
use crate::tensor::{Scalar, Tensor};

pub const FRAC_BITS: u32 = 32;
const ONE: f64 = (1u64 << FRAC_BITS) as f64;

/// Exponent `e` of the power of two nearest to `|x|` in log scale, with ties
/// going to the larger power (`3 -> 4`). `x` must be non-zero.
pub fn nearest_pow2_exp(x: f64) -> i32 {
    (x.abs().log2() + 0.5).floor() as i32
}

/// `sign(x) * 2^e` with `e` from [`nearest_pow2_exp`]; zero stays zero.
pub fn round_pow2(x: f64) -> f64 {
    if x == 0.0 {
        return 0.0;
    }
    x.signum() * 2f64.powi(nearest_pow2_exp(x))
}

pub fn to_fixed(x: f64) -> i64 {
    (x * ONE).round() as i64
}

pub fn from_fixed(v: i64) -> f64 {
    v as f64 / ONE
}

/// Per-channel shift-based BatchNorm parameters in Q32.32.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SbnParams {
    pub mu: Vec<i64>,
    pub beta: Vec<i64>,
    /// `log2(round_pow2(gamma)) - log2(round_pow2(sigma_r))`.
    pub shift: Vec<i32>,
    pub negate: Vec<bool>,
    pub gamma_zero: Vec<bool>,
}

impl SbnParams {
    pub fn from_state<F: Scalar>(state: &BatchNormState<F>) -> Self {
        let sigma = state.sigma_r();
        let c = state.channels();
        let mut p = Self {
            mu: Vec::with_capacity(c),
            beta: Vec::with_capacity(c),
            shift: Vec::with_capacity(c),
            negate: Vec::with_capacity(c),
            gamma_zero: Vec::with_capacity(c),
        };
        for (ch, s) in sigma.iter().enumerate() {
            let gamma = state.gamma.data()[ch].as_f64();
            p.mu.push(to_fixed(state.running_mean[ch].as_f64()));
            p.beta.push(to_fixed(state.beta.data()[ch].as_f64()));
            p.gamma_zero.push(gamma == 0.0);
            p.negate.push(gamma < 0.0);
            p.shift.push(if gamma == 0.0 {
                0
            } else {
                nearest_pow2_exp(gamma) - nearest_pow2_exp(s.as_f64())
            });
        }
        p
    }

    /// Normalizes one fixed-point value of channel `ch`.
    #[inline]
    pub fn apply(&self, ch: usize, x: i64) -> i64 {
        if self.gamma_zero[ch] {
            return self.beta[ch];
        }
        let d = x.saturating_sub(self.mu[ch]);
        let s = self.shift[ch];
        let scaled = if s >= 0 {
            d.checked_shl(s as u32)
                .filter(|v| v >> s == d)
                .unwrap_or(if d < 0 { i64::MIN / 2 } else { i64::MAX / 2 })
        } else {
            d >> (-s).min(63)
        };
        let scaled = if self.negate[ch] { -scaled } else { scaled };
        scaled.saturating_add(self.beta[ch])
    }
}

/// BatchNorm inference with power-of-two `gamma` and `sigma_r`, computed with
/// integer shifts on Q32.32 values.
pub fn sbn_infer<F: Scalar>(x: &Tensor<F>, state: &BatchNormState<F>) -> Result<Tensor<F>> {
    let [_, c, h, w] = x.dims4()?;
    if c != state.channels() {
        return Err(crate::error::Error::ChannelMismatch {
            expected: state.channels(),
            got: c,
        });
    }
    let params = SbnParams::from_state(state);
    let plane = h * w;
    Tensor::new(
        x.shape(),
        x.data()
            .iter()
            .enumerate()
            .map(|(i, &v)| F::of(from_fixed(params.apply((i / plane) % c, to_fixed(v.as_f64())))))
            .collect(),
    )
}
