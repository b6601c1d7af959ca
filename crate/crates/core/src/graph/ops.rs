//! Forward and backward kernels for the fixed layer vocabulary.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// `+1` for `x > 0`, `-1` for `x <= 0`.
pub fn sign_forward<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    x.map(|v| if v > F::zero() { F::one() } else { -F::one() })
}

/// Straight-through estimator: pass `upstream` where `|x| <= 1`, zero elsewhere.
pub fn ste_backward<F: Scalar>(x: &Tensor<F>, upstream: &Tensor<F>) -> Result<Tensor<F>> {
    x.zip_map(upstream, |x, g| if x.abs() <= F::one() { g } else { F::zero() })
}

pub fn scaled_tanh_forward<F: Scalar>(x: &Tensor<F>, nu: F) -> Tensor<F> {
    x.map(|v| (nu * v).tanh())
}

/// `upstream * nu * sech^2(nu * x)`.
pub fn scaled_tanh_backward<F: Scalar>(x: &Tensor<F>, nu: F, upstream: &Tensor<F>) -> Result<Tensor<F>> {
    x.zip_map(upstream, |x, g| {
        let t = (nu * x).tanh();
        g * nu * (F::one() - t * t)
    })
}

/// Per-channel batch normalization parameters and running statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormState<F = f32> {
    pub running_mean: Vec<F>,
    pub running_var: Vec<F>,
    pub gamma: Tensor<F>,
    pub beta: Tensor<F>,
    pub momentum: F,
    pub epsilon: F,
}

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

impl<F: Scalar> BatchNormState<F> {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![F::zero(); channels],
            running_var: vec![F::one(); channels],
            gamma: Tensor::full(&[channels], F::one()),
            beta: Tensor::zeros(&[channels]),
            momentum: F::of(BN_MOMENTUM),
            epsilon: F::of(BN_EPSILON),
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// Running standard deviation `sqrt(var + epsilon)`, strictly positive.
    pub fn sigma_r(&self) -> Vec<F> {
        self.running_var.iter().map(|&v| (v + self.epsilon).sqrt()).collect()
    }

    fn check(&self, c: usize) -> Result<()> {
        if self.channels() != c || self.gamma.len() != c || self.beta.len() != c {
            return Err(Error::shape(format!(
                "batch norm has {} channels, input has {c}",
                self.channels()
            )));
        }
        Ok(())
    }
}

/// Values saved by the training-mode forward pass.
#[derive(Clone, Debug)]
pub struct BatchNormCache<F> {
    x_hat: Tensor<F>,
    inv_std: Vec<F>,
}

fn nchw<F: Scalar>(x: &Tensor<F>) -> Result<[usize; 4]> {
    x.dims4()
}

/// Normalizes by batch statistics and updates the running averages.
pub fn batchnorm_forward_train<F: Scalar>(
    x: &Tensor<F>,
    state: &mut BatchNormState<F>,
) -> Result<(Tensor<F>, BatchNormCache<F>)> {
    let [n, c, h, w] = nchw(x)?;
    state.check(c)?;
    let per = n * h * w;
    if per < 2 {
        return Err(Error::DegenerateBatch(per));
    }
    let plane = h * w;
    let count = F::of(per as f64);
    let mut out = vec![F::zero(); x.len()];
    let mut x_hat = vec![F::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(c);
    let data = x.data();
    for ch in 0..c {
        let idx = |b: usize, i: usize| (b * c + ch) * plane + i;
        let mut mean = F::zero();
        for b in 0..n {
            for i in 0..plane {
                mean += data[idx(b, i)];
            }
        }
        mean = mean / count;
        let mut var = F::zero();
        for b in 0..n {
            for i in 0..plane {
                let d = data[idx(b, i)] - mean;
                var += d * d;
            }
        }
        var = var / count;
        let istd = F::one() / (var + state.epsilon).sqrt();
        let (g, be) = (state.gamma.data()[ch], state.beta.data()[ch]);
        for b in 0..n {
            for i in 0..plane {
                let k = idx(b, i);
                let xh = (data[k] - mean) * istd;
                x_hat[k] = xh;
                out[k] = g * xh + be;
            }
        }
        let m = state.momentum;
        state.running_mean[ch] = (F::one() - m) * state.running_mean[ch] + m * mean;
        state.running_var[ch] = (F::one() - m) * state.running_var[ch] + m * var;
        inv_std.push(istd);
    }
    Ok((
        Tensor::new(x.shape(), out)?,
        BatchNormCache {
            x_hat: Tensor::new(x.shape(), x_hat)?,
            inv_std,
        },
    ))
}

/// Gradients `(dx, dgamma, dbeta)` of the training-mode forward pass.
pub fn batchnorm_backward<F: Scalar>(
    cache: &BatchNormCache<F>,
    state: &BatchNormState<F>,
    upstream: &Tensor<F>,
) -> Result<(Tensor<F>, Tensor<F>, Tensor<F>)> {
    if upstream.shape() != cache.x_hat.shape() {
        return Err(Error::shape("batch norm upstream does not match cached input"));
    }
    let [n, c, h, w] = nchw(upstream)?;
    let plane = h * w;
    let count = F::of((n * plane) as f64);
    let dy = upstream.data();
    let xh = cache.x_hat.data();
    let mut dx = vec![F::zero(); dy.len()];
    let mut dgamma = vec![F::zero(); c];
    let mut dbeta = vec![F::zero(); c];
    for ch in 0..c {
        let idx = |b: usize, i: usize| (b * c + ch) * plane + i;
        let (mut sum_dy, mut sum_dy_xh) = (F::zero(), F::zero());
        for b in 0..n {
            for i in 0..plane {
                let k = idx(b, i);
                sum_dy += dy[k];
                sum_dy_xh += dy[k] * xh[k];
            }
        }
        dgamma[ch] = sum_dy_xh;
        dbeta[ch] = sum_dy;
        let scale = state.gamma.data()[ch] * cache.inv_std[ch] / count;
        for b in 0..n {
            for i in 0..plane {
                let k = idx(b, i);
                dx[k] = scale * (count * dy[k] - sum_dy - xh[k] * sum_dy_xh);
            }
        }
    }
    Ok((
        Tensor::new(upstream.shape(), dx)?,
        Tensor::new(&[c], dgamma)?,
        Tensor::new(&[c], dbeta)?,
    ))
}

/// `O = (I - mu_r) / sigma_r * gamma + beta` with running statistics.
pub fn batchnorm_forward_infer<F: Scalar>(x: &Tensor<F>, state: &BatchNormState<F>) -> Result<Tensor<F>> {
    let [_, c, h, w] = nchw(x)?;
    state.check(c)?;
    let plane = h * w;
    let sigma = state.sigma_r();
    let mut out = x.clone();
    for (k, v) in out.data_mut().iter_mut().enumerate() {
        let ch = (k / plane) % c;
        *v = (*v - state.running_mean[ch]) / sigma[ch] * state.gamma.data()[ch] + state.beta.data()[ch];
    }
    Ok(out)
}

/// 2x2 max pooling with stride 2; ties resolve to the first element in
/// row-major window order. Returns the output and the flat argmax indices.
pub fn maxpool2_forward<F: Scalar>(x: &Tensor<F>) -> Result<(Tensor<F>, Vec<usize>)> {
    let [n, c, h, w] = nchw(x)?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!("max pool needs even spatial dims, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    let data = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let k = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if data[k] > data[best] {
                        best = k;
                    }
                }
                out.push(data[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new(&[n, c, oh, ow], out)?, arg))
}

pub fn maxpool2_backward<F: Scalar>(
    upstream: &Tensor<F>,
    argmax: &[usize],
    input_shape: &[usize],
) -> Result<Tensor<F>> {
    if upstream.len() != argmax.len() {
        return Err(Error::shape("max pool upstream does not match cached argmax"));
    }
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&g, &k) in upstream.data().iter().zip(argmax) {
        d[k] += g;
    }
    Ok(dx)
}

/// Mean softmax cross-entropy over a batch of logits `[N, K]`.
/// Returns the loss and the softmax probabilities.
pub fn softmax_ce_forward<F: Scalar>(logits: &Tensor<F>, labels: &[usize]) -> Result<(F, Tensor<F>)> {
    let [n, k] = logits.dims2()?;
    if labels.len() != n {
        return Err(Error::shape(format!("{} labels for batch of {n}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::shape(format!("label {bad} outside {k} classes")));
    }
    let mut probs = vec![F::zero(); n * k];
    let mut loss = F::zero();
    for (i, &label) in labels.iter().enumerate() {
        let row = &logits.data()[i * k..(i + 1) * k];
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let exps: Vec<F> = row.iter().map(|&z| (z - max).exp()).collect();
        let total: F = exps.iter().copied().sum();
        for (p, e) in probs[i * k..(i + 1) * k].iter_mut().zip(&exps) {
            *p = *e / total;
        }
        loss += total.ln() - (row[label] - max);
    }
    Ok((loss / F::of(n as f64), Tensor::new(&[n, k], probs)?))
}

pub fn softmax_ce_backward<F: Scalar>(probs: &Tensor<F>, labels: &[usize]) -> Result<Tensor<F>> {
    let [n, k] = probs.dims2()?;
    let inv_n = F::one() / F::of(n as f64);
    let mut g = probs.clone();
    for (i, &label) in labels.iter().enumerate() {
        g.data_mut()[i * k + label] -= F::one();
    }
    g.data_mut().iter_mut().for_each(|v| *v *= inv_n);
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(v: Vec<f64>) -> Tensor<f64> {
        let n = v.len();
        Tensor::new(&[n], v).unwrap()
    }

    #[test]
    fn sign_cases() {
        let s = sign_forward(&t(vec![0.0, 0.3, -0.3, 1e-30, -0.0]));
        assert_eq!(s.data(), &[-1.0, 1.0, -1.0, 1.0, -1.0]);
        assert_eq!(sign_forward(&s), s);
    }

    #[test]
    fn ste_cases() {
        let x = t(vec![0.5, 2.0, 1.0, -1.0, -1.01]);
        let g = ste_backward(&x, &t(vec![2.0; 5])).unwrap();
        assert_eq!(g.data(), &[2.0, 0.0, 2.0, 2.0, 0.0]);
    }

    #[test]
    fn scaled_tanh_values() {
        assert_eq!(scaled_tanh_forward(&t(vec![0.0]), 37.0).data()[0], 0.0);
        let y = scaled_tanh_forward(&t(vec![0.01]), 1000.0).data()[0];
        // tanh(10) = 1 - 2 / (e^20 + 1)
        let oracle = 1.0 - 2.0 / (20f64.exp() + 1.0);
        assert!((y - oracle).abs() < 1e-15);
        assert!((y - 0.999_999_995_8).abs() < 1e-10);
        let xs = t(vec![-0.7, 0.2, 1.3]);
        let pos = scaled_tanh_forward(&xs, 4.0);
        let neg = scaled_tanh_forward(&xs.scale(-1.0), 4.0);
        assert_eq!(pos.scale(-1.0), neg);
    }

    #[test]
    fn scaled_tanh_gradient() {
        let g = scaled_tanh_backward(&t(vec![0.0]), 5.0, &t(vec![1.0])).unwrap();
        assert_eq!(g.data()[0], 5.0);
        let g = scaled_tanh_backward(&t(vec![30.0]), 5.0, &t(vec![1.0])).unwrap();
        assert!(g.data()[0] < 1e-20);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let h = 1e-4;
        for _ in 0..500 {
            let x: f64 = rng.gen_range(-2.0..2.0);
            let nu: f64 = rng.gen_range(1.0..20.0);
            let fd = ((nu * (x + h)).tanh() - (nu * (x - h)).tanh()) / (2.0 * h);
            let an = scaled_tanh_backward(&t(vec![x]), nu, &t(vec![1.0])).unwrap().data()[0];
            // in full saturation both tanh evaluations round to 1.0
            if an > 1e-3 {
                assert!((an - fd).abs() <= 1e-5 * an.abs(), "x={x} nu={nu}");
            }
        }
    }

    #[test]
    fn bn_identity_and_collapsed() {
        let mut st = BatchNormState::<f64>::new(1);
        let x = Tensor::new(&[4, 1, 1, 1], vec![-1.0, 1.0, -1.0, 1.0]).unwrap();
        let (y, _) = batchnorm_forward_train(&x, &mut st).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-5);
        }
        let mut st = BatchNormState::<f64>::new(1);
        st.gamma = t(vec![0.0]);
        st.beta = t(vec![0.25]);
        let (y, _) = batchnorm_forward_train(&x, &mut st).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn bn_degenerate_batch() {
        let mut st = BatchNormState::<f32>::new(2);
        let x = Tensor::<f32>::zeros(&[1, 2, 1, 1]);
        assert!(matches!(
            batchnorm_forward_train(&x, &mut st),
            Err(Error::DegenerateBatch(1))
        ));
    }

    #[test]
    fn bn_train_output_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..20 {
            let c = 3;
            let mut st = BatchNormState::<f64>::new(c);
            st.gamma = Tensor::from_fn(&[c], |_| rng.gen_range(-2.0..2.0));
            st.beta = Tensor::from_fn(&[c], |_| rng.gen_range(-1.0..1.0));
            let x = Tensor::from_fn(&[8, c, 3, 3], |_| rng.gen_range(-5.0..5.0));
            let (y, _) = batchnorm_forward_train(&x, &mut st).unwrap();
            let mean = y.reduce_mean(&[0, 2, 3]).unwrap();
            let var = y.reduce_var(&[0, 2, 3]).unwrap();
            for ch in 0..c {
                assert!((mean.data()[ch] - st.beta.data()[ch]).abs() < 1e-4);
                // epsilon shrinks the std by a factor sqrt(var / (var + eps))
                assert!((var.data()[ch].sqrt() - st.gamma.data()[ch].abs()).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn bn_running_update() {
        let mut st = BatchNormState::<f64>::new(1);
        let x = Tensor::new(&[2, 1, 1, 1], vec![1.0, 3.0]).unwrap();
        batchnorm_forward_train(&x, &mut st).unwrap();
        assert!((st.running_mean[0] - 0.2).abs() < 1e-12);
        assert!((st.running_var[0] - (0.9 + 0.1 * 1.0)).abs() < 1e-12);
    }

    #[test]
    fn bn_infer_cases() {
        let mut st = BatchNormState::<f64>::new(2);
        st.running_var = vec![1.0 - BN_EPSILON; 2];
        let x = Tensor::new(&[1, 2, 1, 2], vec![0.5, -0.25, 3.0, 7.0]).unwrap();
        let y = batchnorm_forward_infer(&x, &st).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..50 {
            let mut st = BatchNormState::<f64>::new(2);
            st.running_mean = vec![rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
            st.running_var = vec![rng.gen_range(0.1..4.0), rng.gen_range(0.1..4.0)];
            st.gamma = Tensor::from_fn(&[2], |_| rng.gen_range(-2.0..2.0));
            st.beta = Tensor::from_fn(&[2], |_| rng.gen_range(-2.0..2.0));
            let x = Tensor::from_fn(&[2, 2, 1, 1], |_| rng.gen_range(-5.0..5.0));
            let y = batchnorm_forward_infer(&x, &st).unwrap();
            for (k, &v) in y.data().iter().enumerate() {
                let ch = k % 2;
                let s = (st.running_var[ch] + BN_EPSILON).sqrt();
                let o = (x.data()[k] - st.running_mean[ch]) / s * st.gamma.data()[ch] + st.beta.data()[ch];
                assert!((v - o).abs() < 1e-6);
            }
            // centered input maps to beta
            let centered = Tensor::new(&[1, 2, 1, 1], st.running_mean.clone()).unwrap();
            let y = batchnorm_forward_infer(&centered, &st).unwrap();
            assert!((y.data()[0] - st.beta.data()[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn maxpool_ties_take_first() {
        let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, 1.0, 0.0, 1.0]).unwrap();
        let (y, arg) = maxpool2_forward(&x).unwrap();
        assert_eq!(y.data(), &[1.0]);
        assert_eq!(arg, vec![0]);
        let dx = maxpool2_backward(&t(vec![3.0]), &arg, &[1, 1, 2, 2]).unwrap();
        assert_eq!(dx.data(), &[3.0, 0.0, 0.0, 0.0]);
        assert!(maxpool2_forward(&Tensor::<f64>::zeros(&[1, 1, 3, 2])).is_err());
    }

    #[test]
    fn softmax_saturated_correct() {
        let logits = Tensor::new(&[1, 3], vec![60.0, 0.0, 0.0]).unwrap();
        let (loss, probs) = softmax_ce_forward(&logits, &[0]).unwrap();
        assert!(loss < 1e-20);
        let g = softmax_ce_backward(&probs, &[0]).unwrap();
        assert!(g.data().iter().all(|v: &f64| v.abs() < 1e-20));
        assert!(softmax_ce_forward(&logits, &[3]).is_err());
    }
}
