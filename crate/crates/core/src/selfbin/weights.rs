use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::ops::{sign_forward, ste_backward};
use crate::selfbin::alpha::{alpha_chain_backward, alpha_optimal, AlphaFit, AlphaScale};
use crate::tensor::{Scalar, Tensor};

/// How a layer's weights are binarized during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BinarizeMode {
    /// `W = tanh(nu * P)`, sharpened by the schedule.
    Soft,
    /// `sign(P)` forward, straight-through estimator backward.
    HardSte,
    /// `alpha * sign(P)` forward, gradient through `alpha(P) * tanh(nu * P)`.
    HardSteWithAlpha,
}

impl BinarizeMode {
    pub fn name(self) -> &'static str {
        match self {
            BinarizeMode::Soft => "soft",
            BinarizeMode::HardSte => "hard_ste",
            BinarizeMode::HardSteWithAlpha => "hard_ste_alpha",
        }
    }
}

impl fmt::Display for BinarizeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BinarizeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "soft" => Ok(BinarizeMode::Soft),
            "hard_ste" => Ok(BinarizeMode::HardSte),
            "hard_ste_alpha" => Ok(BinarizeMode::HardSteWithAlpha),
            other => Err(Error::Config(format!("unknown mode `{other}`"))),
        }
    }
}

/// Which version of the weights a forward pass should see.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WeightView {
    /// Use `sign(P)` regardless of the training mode.
    pub binary: bool,
    /// Scale binary weights by the per-channel alpha (only on alpha-eligible layers).
    pub alpha: bool,
}

/// Learnable parameters `P` and the weights derived from them.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConstrainedWeights<F = f32> {
    pub p: Tensor<F>,
    pub mode: BinarizeMode,
    /// Opt-out: the layer trains plain float weights and cannot be frozen.
    pub full_precision: bool,
    /// Whether a per-channel alpha may scale this layer (its output feeds a BatchNorm).
    pub alpha_eligible: bool,
    #[serde(skip)]
    w: Option<Tensor<F>>,
    #[serde(skip)]
    w_nu: Option<F>,
}

impl<F: Scalar> ConstrainedWeights<F> {
    pub fn new(p: Tensor<F>, mode: BinarizeMode, full_precision: bool, alpha_eligible: bool) -> Self {
        Self {
            p,
            mode,
            full_precision,
            alpha_eligible,
            w: None,
            w_nu: None,
        }
    }

    fn is_soft(&self) -> bool {
        self.mode == BinarizeMode::Soft && !self.full_precision
    }

    fn mode_name(&self) -> &'static str {
        if self.full_precision {
            "full_precision"
        } else {
            self.mode.name()
        }
    }

    /// Recomputes the cache `W = tanh(nu * P)`.
    pub fn refresh_weights(&mut self, nu: F) -> Result<()> {
        if !self.is_soft() {
            return Err(Error::WrongMode {
                op: "refresh_weights",
                mode: self.mode_name(),
            });
        }
        self.w = Some(self.p.map(|v| (nu * v).tanh()));
        self.w_nu = Some(nu);
        Ok(())
    }

    /// Refreshes the cache when the layer is soft; a no-op otherwise.
    pub fn sync(&mut self, nu: F) {
        if self.is_soft() {
            self.w = Some(self.p.map(|v| (nu * v).tanh()));
            self.w_nu = Some(nu);
        }
    }

    /// The cached soft weights, if refreshed.
    pub fn w(&self) -> Option<&Tensor<F>> {
        self.w.as_ref()
    }

    /// `dL/dP = dL/dW * nu * (1 - W^2)`.
    pub fn grad_p_from_grad_w(&self, grad_w: &Tensor<F>, nu: F) -> Result<Tensor<F>> {
        if !self.is_soft() {
            return Err(Error::WrongMode {
                op: "grad_p_from_grad_w",
                mode: self.mode_name(),
            });
        }
        let fresh;
        let w = match (&self.w, self.w_nu) {
            (Some(w), Some(cached)) if cached == nu => w,
            _ => {
                fresh = self.p.map(|v| (nu * v).tanh());
                &fresh
            }
        };
        grad_w.zip_map(w, |g, w| g * nu * (F::one() - w * w))
    }

    /// Weights whose per-channel alpha is fitted: `tanh(nu * P)` for soft
    /// layers, the clipped latent `P` for hard ones.
    pub fn latent(&self, nu: F) -> Tensor<F> {
        if self.is_soft() {
            self.p.map(|v| (nu * v).tanh())
        } else {
            self.p.clone()
        }
    }

    pub fn alpha_fit(&self, nu: F) -> Result<AlphaFit> {
        alpha_optimal(&self.latent(nu), nu)
    }

    fn alpha_active(&self, view: WeightView) -> bool {
        self.alpha_eligible
            && !self.full_precision
            && (self.mode == BinarizeMode::HardSteWithAlpha || (view.binary && view.alpha))
    }

    /// Weights to convolve with, plus the alpha that scaled them (if any).
    pub fn forward_weights(&self, view: WeightView, nu: F) -> Result<(Tensor<F>, Option<AlphaScale>)> {
        if self.full_precision {
            return Ok((self.p.clone(), None));
        }
        if !view.binary && self.mode == BinarizeMode::Soft {
            let w = match (&self.w, self.w_nu) {
                (Some(w), Some(cached)) if cached == nu => w.clone(),
                _ => self.p.map(|v| (nu * v).tanh()),
            };
            return Ok((w, None));
        }
        let signs = sign_forward(&self.p);
        if !self.alpha_active(view) {
            return Ok((signs, None));
        }
        let alpha = self.alpha_fit(nu)?.scale;
        let per = self.p.len() / alpha.alpha.len();
        let mut scaled = signs;
        for (chunk, &a) in scaled.data_mut().chunks_mut(per).zip(&alpha.alpha) {
            let a = F::of(a);
            chunk.iter_mut().for_each(|v| *v *= a);
        }
        Ok((scaled, Some(alpha)))
    }

    /// Gradient with respect to `P` from the gradient with respect to the
    /// training-time forward weights.
    pub fn backward(&self, grad_w: &Tensor<F>, nu: F, alpha: Option<&AlphaScale>) -> Result<Tensor<F>> {
        if self.full_precision {
            return Ok(grad_w.clone());
        }
        match (self.mode, alpha) {
            (BinarizeMode::Soft, _) => self.grad_p_from_grad_w(grad_w, nu),
            (BinarizeMode::HardSteWithAlpha, Some(a)) => self.alpha_backward(grad_w, a, nu),
            _ => ste_backward(&self.p, grad_w),
        }
    }

    pub fn alpha_backward(&self, grad_b: &Tensor<F>, alpha: &AlphaScale, nu: F) -> Result<Tensor<F>> {
        if self.mode != BinarizeMode::HardSteWithAlpha || self.full_precision {
            return Err(Error::WrongMode {
                op: "alpha_chain_backward",
                mode: self.mode_name(),
            });
        }
        alpha_chain_backward(grad_b, &self.p, alpha, nu)
    }

    /// Keeps hard-mode latent weights inside the STE pass-through region.
    pub fn clip_latent(&mut self) {
        if !self.full_precision && self.mode != BinarizeMode::Soft {
            let one = F::one();
            self.p.data_mut().iter_mut().for_each(|v| *v = v.max(-one).min(one));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cw(p: Vec<f64>, mode: BinarizeMode) -> ConstrainedWeights<f64> {
        let n = p.len();
        ConstrainedWeights::new(Tensor::new(&[1, n], p).unwrap(), mode, false, true)
    }

    #[test]
    fn refresh_zero_and_saturated() {
        let mut w = cw(vec![0.0, 0.01, -0.01], BinarizeMode::Soft);
        w.refresh_weights(1000.0).unwrap();
        let cache = w.w().unwrap().data();
        assert_eq!(cache[0], 0.0);
        assert!((cache[1] - 10f64.tanh()).abs() < 1e-15);
        assert!(cache[1] > 0.99999 && cache[1] < 1.0);
        assert!(cache.iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn refresh_requires_soft() {
        let mut w = cw(vec![0.2], BinarizeMode::HardSte);
        assert!(matches!(w.refresh_weights(2.0), Err(Error::WrongMode { .. })));
        assert!(matches!(
            w.grad_p_from_grad_w(&Tensor::zeros(&[1, 1]), 2.0),
            Err(Error::WrongMode { .. })
        ));
    }

    #[test]
    fn grad_at_zero_and_saturation() {
        let mut w = cw(vec![0.0, 5.0], BinarizeMode::Soft);
        w.refresh_weights(7.0).unwrap();
        let g = w
            .grad_p_from_grad_w(&Tensor::new(&[1, 2], vec![0.5, 0.5]).unwrap(), 7.0)
            .unwrap();
        assert_eq!(g.data()[0], 3.5);
        assert!(g.data()[1].abs() < 1e-20);
    }

    #[test]
    fn hard_forward_is_exact_sign() {
        let w = cw(vec![0.3, -0.2, 0.0], BinarizeMode::HardSte);
        let view = WeightView {
            binary: false,
            alpha: false,
        };
        let (f, a) = w.forward_weights(view, 1.0).unwrap();
        assert_eq!(f.data(), &[1.0, -1.0, -1.0]);
        assert!(a.is_none());
    }

    #[test]
    fn alpha_mode_scales_signs() {
        let w = cw(vec![0.5, -0.5, 0.5], BinarizeMode::HardSteWithAlpha);
        let view = WeightView {
            binary: false,
            alpha: false,
        };
        let (f, a) = w.forward_weights(view, 1000.0).unwrap();
        let a = a.unwrap().alpha[0];
        assert!((a - 0.5).abs() < 1e-12);
        assert_eq!(f.data(), &[a, -a, a]);
        assert!(matches!(
            cw(vec![0.5], BinarizeMode::Soft).alpha_backward(&Tensor::zeros(&[1, 1]), &AlphaScale::ones(1), 1.0),
            Err(Error::WrongMode { .. })
        ));
    }

    #[test]
    fn clip_only_in_hard_modes() {
        let mut h = cw(vec![1.5, -2.0, 0.3], BinarizeMode::HardSte);
        h.clip_latent();
        assert_eq!(h.p.data(), &[1.0, -1.0, 0.3]);
        let mut s = cw(vec![1.5], BinarizeMode::Soft);
        s.clip_latent();
        assert_eq!(s.p.data(), &[1.5]);
    }

    #[test]
    fn mode_names_round_trip() {
        for m in [
            BinarizeMode::Soft,
            BinarizeMode::HardSte,
            BinarizeMode::HardSteWithAlpha,
        ] {
            assert_eq!(m.name().parse::<BinarizeMode>().unwrap(), m);
        }
    }
}
