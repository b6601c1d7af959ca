//! XNOR/popcount compute kernels. Everything here is integer or bitwise.

use crate::binrt::bits::{low_mask, BitTensor, IntFeatureMap, WORD_BITS};
use crate::error::{Error, Result};
use crate::freeze::thresholds::QuantizedThresholds;
use crate::tensor::ConvGeometry;

/// `+-1` dot product of two packed spans: `n_valid - 2 * popcount(a ^ b)`.
pub fn xnor_dot(a: &[u64], b: &[u64], n_valid: usize) -> Result<i32> {
    if a.len() != b.len() || n_valid > a.len() * WORD_BITS {
        return Err(Error::LengthMismatch(format!(
            "{} and {} words for {n_valid} bits",
            a.len(),
            b.len()
        )));
    }
    let full = n_valid / WORD_BITS;
    let mut diff: u32 = a[..full]
        .iter()
        .zip(&b[..full])
        .map(|(x, y)| (x ^ y).count_ones())
        .sum();
    let tail = n_valid % WORD_BITS;
    if tail != 0 {
        diff += ((a[full] ^ b[full]) & low_mask(tail)).count_ones();
    }
    Ok(n_valid as i32 - 2 * diff as i32)
}

fn dims4(shape: &[usize], what: &str) -> Result<[usize; 4]> {
    match *shape {
        [a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(Error::shape(format!("{what} must be rank 4, got {shape:?}"))),
    }
}

/// Binary cross-correlation; padding cells read as `-1`.
pub fn binconv2d(input: &BitTensor, weights: &BitTensor, stride: usize, pad: usize) -> Result<IntFeatureMap> {
    let [n, cin, h, w] = dims4(input.shape(), "binconv2d input")?;
    let kshape = dims4(weights.shape(), "binconv2d kernel")?;
    let g = ConvGeometry::resolve([n, cin, h, w], kshape, stride, pad)?;
    let [cout, _, kh, kw] = kshape;
    let fan_in = (cin * kh * kw) as i32;
    let mut out = IntFeatureMap::zeros(g.output_shape());
    let chunks: Vec<(usize, usize)> = (0..kw)
        .step_by(WORD_BITS)
        .map(|s| (s, (kw - s).min(WORD_BITS)))
        .collect();
    let mut windows = vec![0u64; cin * kh * chunks.len()];
    for b in 0..n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let x0 = (ox * stride) as isize - pad as isize;
                let mut wi = 0;
                for ci in 0..cin {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        for &(s, len) in &chunks {
                            windows[wi] = if iy < 0 || iy >= h as isize {
                                0
                            } else {
                                input.window((b * cin + ci) * h + iy as usize, x0 + s as isize, len)
                            };
                            wi += 1;
                        }
                    }
                }
                for co in 0..cout {
                    let mut diff = 0u32;
                    let mut wi = 0;
                    for ci in 0..cin {
                        for ky in 0..kh {
                            let row = weights.row((co * cin + ci) * kh + ky);
                            for &(s, len) in &chunks {
                                let wbits = row[s / WORD_BITS];
                                diff += ((windows[wi] ^ wbits) & low_mask(len)).count_ones();
                                wi += 1;
                            }
                        }
                    }
                    out.data[((b * cout + co) * g.oh + oy) * g.ow + ox] = fan_in - 2 * diff as i32;
                }
            }
        }
    }
    Ok(out)
}

/// Binary fully connected layer: `input [N, F]`, `weights [Out, F]`.
pub fn bindense(input: &BitTensor, weights: &BitTensor) -> Result<IntFeatureMap> {
    let (n, f) = match *input.shape() {
        [n, f] => (n, f),
        _ => {
            return Err(Error::shape(format!(
                "bindense input must be [N, F], got {:?}",
                input.shape()
            )))
        }
    };
    let (out, fw) = match *weights.shape() {
        [o, fw] => (o, fw),
        _ => {
            return Err(Error::shape(format!(
                "bindense weights must be [Out, F], got {:?}",
                weights.shape()
            )))
        }
    };
    if f != fw {
        return Err(Error::shape(format!(
            "bindense: {f} input features, weights expect {fw}"
        )));
    }
    let mut data = Vec::with_capacity(n * out);
    for b in 0..n {
        for o in 0..out {
            data.push(xnor_dot(input.row(b), weights.row(o), f)?);
        }
    }
    IntFeatureMap::new([n, out, 1, 1], data)
}

/// Cross-correlation of integer inputs with `+-1` weights (adds and
/// subtracts only). Padding cells take `pad_value`.
pub fn int_conv2d(
    input: &IntFeatureMap,
    weights: &BitTensor,
    stride: usize,
    pad: usize,
    pad_value: i32,
) -> Result<IntFeatureMap> {
    let [n, cin, h, w] = input.shape;
    let kshape = dims4(weights.shape(), "int_conv2d kernel")?;
    let g = ConvGeometry::resolve(input.shape, kshape, stride, pad)?;
    let [cout, _, kh, kw] = kshape;
    let signs = weights.to_bools();
    let mut out = IntFeatureMap::zeros(g.output_shape());
    for b in 0..n {
        for co in 0..cout {
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let mut acc = 0i32;
                    for ci in 0..cin {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                let v = if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    pad_value
                                } else {
                                    input.get(b, ci, iy as usize, ix as usize)
                                };
                                if signs[((co * cin + ci) * kh + ky) * kw + kx] {
                                    acc += v;
                                } else {
                                    acc -= v;
                                }
                            }
                        }
                    }
                    out.data[((b * cout + co) * g.oh + oy) * g.ow + ox] = acc;
                }
            }
        }
    }
    Ok(out)
}

/// Fully connected layer over integer inputs flattened to `[N, F]`.
pub fn int_dense(input: &IntFeatureMap, weights: &BitTensor) -> Result<IntFeatureMap> {
    let n = input.shape[0];
    let f = input.data.len() / n.max(1);
    let (out, fw) = match *weights.shape() {
        [o, fw] => (o, fw),
        _ => {
            return Err(Error::shape(format!(
                "int_dense weights must be [Out, F], got {:?}",
                weights.shape()
            )))
        }
    };
    if f != fw {
        return Err(Error::shape(format!(
            "int_dense: {f} input features, weights expect {fw}"
        )));
    }
    let signs = weights.to_bools();
    let mut data = Vec::with_capacity(n * out);
    for b in 0..n {
        let x = &input.data[b * f..(b + 1) * f];
        for o in 0..out {
            let wrow = &signs[o * f..(o + 1) * f];
            data.push(x.iter().zip(wrow).map(|(&v, &s)| if s { v } else { -v }).sum());
        }
    }
    IntFeatureMap::new([n, out, 1, 1], data)
}

/// 2x2 / stride-2 max pooling of integer pre-activations.
pub fn maxpool2_int(x: &IntFeatureMap) -> Result<IntFeatureMap> {
    let [n, c, h, w] = x.shape;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!("max pool needs even spatial dims, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = IntFeatureMap::zeros([n, c, oh, ow]);
    for p in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let base = p * h * w;
                let at = |y: usize, xx: usize| x.data[base + y * w + xx];
                let m = at(2 * oy, 2 * ox)
                    .max(at(2 * oy, 2 * ox + 1))
                    .max(at(2 * oy + 1, 2 * ox))
                    .max(at(2 * oy + 1, 2 * ox + 1));
                out.data[(p * oh + oy) * ow + ox] = m;
            }
        }
    }
    Ok(out)
}

/// Folded BatchNorm + sign: `XNOR(I > t_q << s, gamma_sign)`, or the constant
/// `beta_pos` for masked channels.
pub fn binary_bn_act(i: &IntFeatureMap, th: &QuantizedThresholds) -> Result<BitTensor> {
    let [n, c, h, w] = i.shape;
    if th.channels() != c {
        return Err(Error::ChannelMismatch {
            expected: th.channels(),
            got: c,
        });
    }
    let mut out = BitTensor::zeros(&i.shape);
    let plane = h * w;
    for b in 0..n {
        for ch in 0..c {
            let t = th.threshold(ch);
            let pos = th.gamma_sign[ch];
            let masked = th.gamma_zero_mask[ch];
            let constant = th.beta_pos[ch];
            for y in 0..h {
                let row = (b * c + ch) * h + y;
                let start = row * w;
                for x in 0..w {
                    let v = i.data[start + x] as i64;
                    let bit = if masked { constant } else { (v > t) == pos };
                    if bit {
                        out.set(b * c * plane + ch * plane + y * w + x, true);
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{conv2d, matmul, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_bits(rng: &mut ChaCha8Rng, shape: &[usize]) -> BitTensor {
        BitTensor::from_fn(shape, |_| rng.gen_bool(0.5))
    }

    #[test]
    fn xnor_dot_basics() {
        let a = [0xDEAD_BEEF_u64];
        assert_eq!(xnor_dot(&a, &a, 64).unwrap(), 64);
        assert_eq!(xnor_dot(&a, &[!a[0]], 64).unwrap(), -64);
        // a = [+1, -1, +1], b = [+1, +1, -1]
        assert_eq!(xnor_dot(&[0b101], &[0b011], 3).unwrap(), -1);
        assert_eq!(xnor_dot(&[], &[], 0).unwrap(), 0);
        assert!(matches!(xnor_dot(&[0], &[0, 0], 3), Err(Error::LengthMismatch(_))));
        assert!(xnor_dot(&[0], &[0], 65).is_err());
    }

    #[test]
    fn xnor_dot_matches_pm1_arithmetic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for len in 1..=200 {
            let a = random_bits(&mut rng, &[1, len]);
            let b = random_bits(&mut rng, &[1, len]);
            let direct: i32 = a.to_pm1().iter().zip(b.to_pm1()).map(|(x, y)| x * y).sum();
            assert_eq!(xnor_dot(a.row(0), b.row(0), len).unwrap(), direct);
        }
    }

    #[test]
    fn all_ones_conv() {
        let x = BitTensor::from_fn(&[1, 1, 3, 3], |_| true);
        let k = BitTensor::from_fn(&[1, 1, 2, 2], |_| true);
        let y = binconv2d(&x, &k, 1, 0).unwrap();
        assert_eq!(y.data, vec![4; 4]);
    }

    #[test]
    fn flipping_a_weight_moves_outputs_by_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_bits(&mut rng, &[1, 2, 5, 5]);
        let mut k = random_bits(&mut rng, &[1, 2, 3, 3]);
        let before = binconv2d(&x, &k, 1, 1).unwrap();
        let bit = k.get(4);
        k.set(4, !bit);
        let after = binconv2d(&x, &k, 1, 1).unwrap();
        for (a, b) in before.data.iter().zip(&after.data) {
            assert_eq!((a - b).abs(), 2);
        }
    }

    #[test]
    fn conv_matches_float_oracle_with_minus_one_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..40 {
            let (cin, cout) = (rng.gen_range(1..4), rng.gen_range(1..4));
            let k = rng.gen_range(1..4);
            let pad = rng.gen_range(0..2);
            let stride = rng.gen_range(1..3);
            let oh = rng.gen_range(1..5);
            let h = (oh - 1) * stride + k;
            if h <= 2 * pad {
                continue;
            }
            let h = h - 2 * pad;
            let x = random_bits(&mut rng, &[2, cin, h, h]);
            let wt = random_bits(&mut rng, &[cout, cin, k, k]);
            let y = binconv2d(&x, &wt, stride, pad).unwrap();
            let xf = x.unpack::<f64>().pad2d(pad, -1.0).unwrap();
            let oracle = conv2d(&xf, &wt.unpack::<f64>(), stride, 0).unwrap();
            assert_eq!(y.to_tensor::<f64>(), oracle);
            let fan_in = (cin * k * k) as i32;
            assert!(y.data.iter().all(|v| v.abs() <= fan_in));
        }
    }

    #[test]
    fn wide_kernel_chunks() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_bits(&mut rng, &[1, 1, 1, 80]);
        let wt = random_bits(&mut rng, &[2, 1, 1, 70]);
        let y = binconv2d(&x, &wt, 1, 0).unwrap();
        let oracle = conv2d(&x.unpack::<f64>(), &wt.unpack::<f64>(), 1, 0).unwrap();
        assert_eq!(y.to_tensor::<f64>(), oracle);
    }

    #[test]
    fn dense_matches_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_bits(&mut rng, &[3, 77]);
        let wt = random_bits(&mut rng, &[4, 77]);
        let y = bindense(&x, &wt).unwrap();
        let oracle = matmul(&x.unpack::<f64>(), &wt.unpack::<f64>().transpose2d().unwrap()).unwrap();
        assert_eq!(y.to_tensor::<f64>().into_data(), oracle.into_data());
        let same = bindense(&wt, &wt).unwrap();
        for o in 0..4 {
            assert_eq!(same.data[o * 4 + o], 77);
        }
    }

    #[test]
    fn int_kernels_match_float() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let q: Vec<i32> = (0..2 * 2 * 4 * 4).map(|_| rng.gen_range(-128..128)).collect();
        let x = IntFeatureMap::new([2, 2, 4, 4], q).unwrap();
        let wt = random_bits(&mut rng, &[3, 2, 3, 3]);
        let y = int_conv2d(&x, &wt, 1, 1, -128).unwrap();
        let xf = x.to_tensor::<f64>().pad2d(1, -128.0).unwrap();
        let oracle = conv2d(&xf, &wt.unpack::<f64>(), 1, 0).unwrap();
        assert_eq!(y.to_tensor::<f64>(), oracle);

        let wd = random_bits(&mut rng, &[5, 32]);
        let yd = int_dense(&x, &wd).unwrap();
        let xf = Tensor::new(&[2, 32], x.data.iter().map(|&v| v as f64).collect()).unwrap();
        let oracle = matmul(&xf, &wd.unpack::<f64>().transpose2d().unwrap()).unwrap();
        assert_eq!(yd.to_tensor::<f64>().into_data(), oracle.into_data());
    }

    #[test]
    fn pool_takes_integer_max() {
        let x = IntFeatureMap::new([1, 1, 2, 4], vec![1, -3, 7, 7, 2, 0, -1, 9]).unwrap();
        assert_eq!(maxpool2_int(&x).unwrap().data, vec![2, 9]);
        assert!(maxpool2_int(&IntFeatureMap::zeros([1, 1, 3, 2])).is_err());
    }

    fn thresholds(t_q: Vec<i8>, s: u8, pos: Vec<bool>) -> QuantizedThresholds {
        let c = t_q.len();
        QuantizedThresholds {
            t_q,
            scale_exp: s,
            gamma_sign: pos,
            gamma_zero_mask: vec![false; c],
            beta_pos: vec![false; c],
        }
    }

    #[test]
    fn bn_act_is_sign_at_zero_threshold() {
        let x = IntFeatureMap::new([1, 1, 1, 5], vec![-2, -1, 0, 1, 2]).unwrap();
        let up = binary_bn_act(&x, &thresholds(vec![0], 0, vec![true])).unwrap();
        assert_eq!(up.to_bools(), vec![false, false, false, true, true]);
        let down = binary_bn_act(&x, &thresholds(vec![0], 0, vec![false])).unwrap();
        let flipped: Vec<bool> = up.to_bools().iter().map(|b| !b).collect();
        assert_eq!(down.to_bools(), flipped);
        assert!(matches!(
            binary_bn_act(&x, &thresholds(vec![0, 0], 0, vec![true, true])),
            Err(Error::ChannelMismatch { .. })
        ));
    }
}
