//! BatchNorm followed by `sign` folded into one comparison per channel.
//!
//! With `O = (I - mu) / sigma * gamma + beta`, `O > 0` holds exactly when
//! `I > T` for `gamma > 0` and `I < T` for `gamma < 0`, where
//! `T = mu - sigma * beta / gamma`. A channel with `gamma == 0` outputs the
//! constant `beta > 0`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::ops::BatchNormState;
use crate::selfbin::alpha::AlphaScale;
use crate::tensor::Scalar;

/// Real-valued thresholds of one folded BatchNorm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryBNThresholds {
    pub t: Vec<f64>,
    pub gamma_sign: Vec<bool>,
    pub gamma_zero_mask: Vec<bool>,
    pub beta_pos: Vec<bool>,
}

impl BinaryBNThresholds {
    pub fn channels(&self) -> usize {
        self.t.len()
    }

    /// Sign of the folded BatchNorm output for a real pre-activation `i`
    /// (`true` is `+1`).
    pub fn fire(&self, channel: usize, i: f64) -> bool {
        if self.gamma_zero_mask[channel] {
            return self.beta_pos[channel];
        }
        let t = self.t[channel];
        if self.gamma_sign[channel] {
            i > t
        } else {
            // BN(I) = 0 at I == T maps to -1, so the negative branch is strict too
            i < t
        }
    }
}

pub fn fold_bn<F: Scalar>(state: &BatchNormState<F>) -> BinaryBNThresholds {
    let c = state.channels();
    let sigma = state.sigma_r();
    let mut th = BinaryBNThresholds {
        t: vec![0.0; c],
        gamma_sign: vec![false; c],
        gamma_zero_mask: vec![false; c],
        beta_pos: vec![false; c],
    };
    for (ch, s) in sigma.iter().enumerate() {
        let gamma = state.gamma.data()[ch].as_f64();
        let beta = state.beta.data()[ch].as_f64();
        if gamma == 0.0 {
            th.gamma_zero_mask[ch] = true;
            th.beta_pos[ch] = beta > 0.0;
        } else {
            let mu = state.running_mean[ch].as_f64();
            th.t[ch] = mu - s.as_f64() * beta / gamma;
            th.gamma_sign[ch] = gamma > 0.0;
        }
    }
    th
}

/// Moves a positive per-channel weight scale into the thresholds:
/// `alpha * I > T` is `I > T / alpha`.
pub fn apply_alpha(th: &BinaryBNThresholds, alpha: &AlphaScale) -> Result<BinaryBNThresholds> {
    alpha.validate()?;
    if alpha.alpha.len() != th.channels() {
        return Err(Error::ChannelMismatch {
            expected: th.channels(),
            got: alpha.alpha.len(),
        });
    }
    let mut out = th.clone();
    for (t, &a) in out.t.iter_mut().zip(&alpha.alpha) {
        *t /= a;
    }
    Ok(out)
}

/// 8-bit thresholds sharing one power-of-two scale per layer.
///
/// The runtime fires a channel when `XNOR(I > t_q << scale_exp, gamma_sign)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantizedThresholds {
    pub t_q: Vec<i8>,
    pub scale_exp: u8,
    pub gamma_sign: Vec<bool>,
    pub gamma_zero_mask: Vec<bool>,
    pub beta_pos: Vec<bool>,
}

impl QuantizedThresholds {
    pub fn channels(&self) -> usize {
        self.t_q.len()
    }

    pub fn threshold(&self, channel: usize) -> i64 {
        (self.t_q[channel] as i64) << self.scale_exp
    }

    pub fn fire(&self, channel: usize, i: i32) -> bool {
        if self.gamma_zero_mask[channel] {
            return self.beta_pos[channel];
        }
        ((i as i64) > self.threshold(channel)) == self.gamma_sign[channel]
    }
}

/// Largest magnitude a quantized threshold may take.
pub const T_Q_MAX: i64 = 127;

/// Quantizes thresholds for integer pre-activations in `[-fan_in, fan_in]`.
///
/// Thresholds are first clamped to `+-(fan_in + 1)`, beyond which every
/// comparison is constant. The scale is the smallest `s >= 0` with
/// `ceil(max |T|) <= 127 * 2^s`. At `s = 0` the integer threshold is exact:
/// `floor(T)` for positive gamma and `ceil(T) - 1` for negative gamma, so the
/// integer comparison agrees with the real one for every integer `I`. At
/// `s > 0` the threshold is `round(T / 2^s)`, within `2^(s-1)` of `T`.
pub fn quantize_thresholds(th: &BinaryBNThresholds, fan_in: usize) -> QuantizedThresholds {
    let bound = fan_in as f64 + 1.0;
    let clamped: Vec<f64> =
        th.t.iter()
            .zip(&th.gamma_zero_mask)
            .map(|(&t, &masked)| {
                if masked || t.is_nan() {
                    0.0
                } else {
                    t.clamp(-bound, bound)
                }
            })
            .collect();
    let max_abs = clamped.iter().fold(0.0f64, |m, t| m.max(t.abs())).ceil() as i64;
    let mut s = 0u8;
    while max_abs > T_Q_MAX << s {
        s += 1;
    }
    let t_q = clamped
        .iter()
        .zip(&th.gamma_sign)
        .map(|(&t, &pos)| {
            let q = if s == 0 {
                if pos {
                    t.floor()
                } else {
                    t.ceil() - 1.0
                }
            } else {
                (t / (1u64 << s) as f64).round()
            };
            q.clamp(-128.0, 127.0) as i8
        })
        .collect();
    QuantizedThresholds {
        t_q,
        scale_exp: s,
        gamma_sign: th.gamma_sign.clone(),
        gamma_zero_mask: th.gamma_zero_mask.clone(),
        beta_pos: th.beta_pos.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn state(mu: f64, var: f64, gamma: f64, beta: f64) -> BatchNormState<f64> {
        let mut s = BatchNormState::new(1);
        s.running_mean = vec![mu];
        s.running_var = vec![var];
        s.epsilon = 0.0;
        s.gamma = Tensor::new(&[1], vec![gamma]).unwrap();
        s.beta = Tensor::new(&[1], vec![beta]).unwrap();
        s
    }

    fn single(t: f64, gamma_sign: bool) -> BinaryBNThresholds {
        BinaryBNThresholds {
            t: vec![t],
            gamma_sign: vec![gamma_sign],
            gamma_zero_mask: vec![false],
            beta_pos: vec![false],
        }
    }

    #[test]
    fn identity_bn_is_sign() {
        let th = fold_bn(&state(0.0, 1.0, 1.0, 0.0));
        assert_eq!(th.t, vec![0.0]);
        assert!(th.gamma_sign[0]);
        assert!(th.fire(0, 0.1));
        assert!(!th.fire(0, 0.0));
    }

    #[test]
    fn negative_gamma_example() {
        let th = fold_bn(&state(2.0, 9.0, -0.5, 1.0));
        assert_eq!(th.t, vec![8.0]);
        assert!(!th.gamma_sign[0]);
        for k in -200..=200 {
            let i = k as f64 * 0.1;
            let bn = (i - 2.0) / 3.0 * -0.5 + 1.0;
            assert_eq!(th.fire(0, i), bn > 0.0, "I = {i}");
        }
    }

    #[test]
    fn zero_gamma_is_constant() {
        let th = fold_bn(&state(0.3, 2.0, 0.0, 0.7));
        assert!(th.gamma_zero_mask[0] && th.beta_pos[0]);
        assert!((-50..50).all(|i| th.fire(0, i as f64)));
        let q = quantize_thresholds(&th, 10);
        assert!((-10..=10).all(|i| q.fire(0, i)));
    }

    #[test]
    fn alpha_divides_thresholds() {
        let th = single(8.0, true);
        assert_eq!(apply_alpha(&th, &AlphaScale::ones(1)).unwrap(), th);
        assert_eq!(apply_alpha(&th, &AlphaScale { alpha: vec![2.0] }).unwrap().t, vec![4.0]);
        assert!(matches!(
            apply_alpha(&th, &AlphaScale { alpha: vec![0.0] }),
            Err(Error::NonPositiveAlpha { .. })
        ));
        assert!(apply_alpha(&th, &AlphaScale::ones(2)).is_err());
    }

    #[test]
    fn quantize_examples() {
        let q = quantize_thresholds(&single(0.0, true), 9);
        assert_eq!((q.t_q[0], q.scale_exp), (0, 0));

        let q = quantize_thresholds(&single(8.3, true), 25);
        assert_eq!((q.t_q[0], q.scale_exp), (8, 0));
        for i in -25..=25 {
            assert_eq!(q.fire(0, i), i as f64 > 8.3);
        }

        let q = quantize_thresholds(&single(300.0, true), 1000);
        assert_eq!((q.t_q[0], q.scale_exp), (75, 2));
        assert_eq!(q.threshold(0), 300);
        for i in -1000..=1000 {
            assert_eq!(q.fire(0, i), i > 300);
        }
    }

    #[test]
    fn out_of_range_thresholds_clamp() {
        let q = quantize_thresholds(&single(1e9, true), 25);
        assert!((-25..=25).all(|i| !q.fire(0, i)));
        let q = quantize_thresholds(&single(-1e9, false), 25);
        assert!((-25..=25).all(|i| !q.fire(0, i)));
        let q = quantize_thresholds(&single(1e9, false), 25);
        assert!((-25..=25).all(|i| q.fire(0, i)));
    }

    #[test]
    fn integral_threshold_negative_gamma() {
        // T == 5 exactly: BN(5) == 0 must give -1
        let th = single(5.0, false);
        let q = quantize_thresholds(&th, 20);
        for i in -20..=20 {
            assert_eq!(q.fire(0, i), i < 5, "I = {i}");
        }
    }
}
