//! Storage/operation cost model and wall-clock comparison of BatchNorm,
//! shift-based BatchNorm and the folded BinaryBN comparison.

use std::fmt::{self, Write as _};
use std::hint::black_box;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binrt::sbn::SbnParams;
use crate::error::{Error, Result};
use crate::freeze::thresholds::{fold_bn, quantize_thresholds, QuantizedThresholds};
use crate::graph::ops::BatchNormState;
use crate::graph::{parse_arch, ArchLayer};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BnVariant {
    Bn,
    Sbn,
    BinaryBn,
}

impl BnVariant {
    pub const ALL: [BnVariant; 3] = [BnVariant::Bn, BnVariant::Sbn, BnVariant::BinaryBn];

    pub fn name(self) -> &'static str {
        match self {
            BnVariant::Bn => "bn",
            BnVariant::Sbn => "sbn",
            BnVariant::BinaryBn => "binary_bn",
        }
    }
}

impl fmt::Display for BnVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BnVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BnVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

/// Closed-form memory and operation counts of one normalization layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CostModel {
    pub variant: BnVariant,
    pub c: u64,
    pub h: u64,
    pub w: u64,
}

impl CostModel {
    /// Parameter storage: four 32-bit values per channel for BN; 32-bit mean
    /// and beta plus two 8-bit exponents for SBN; an 8-bit threshold and a
    /// sign bit for BinaryBN.
    pub fn storage_bits(&self) -> u64 {
        match self.variant {
            BnVariant::Bn => 128 * self.c,
            BnVariant::Sbn => 80 * self.c,
            BnVariant::BinaryBn => 9 * self.c,
        }
    }

    /// Elementwise operations: four for normalization plus one sign for BN
    /// and SBN; a comparison and an XNOR for BinaryBN.
    pub fn op_count(&self) -> u64 {
        let chw = self.c * self.h * self.w;
        match self.variant {
            BnVariant::Bn | BnVariant::Sbn => 4 * chw + chw,
            BnVariant::BinaryBn => 2 * chw,
        }
    }

    /// Output memory: a 32-bit value plus a sign bit per element, or one bit.
    pub fn output_bits(&self) -> u64 {
        let chw = self.c * self.h * self.w;
        match self.variant {
            BnVariant::Bn | BnVariant::Sbn => 32 * chw + chw,
            BnVariant::BinaryBn => chw,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub variant: BnVariant,
    pub batch: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub median_ns: f64,
    pub iqr_ns: f64,
    pub trials: usize,
    pub output_bytes: usize,
    pub storage_bits: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BenchConfig {
    pub trials: usize,
    pub warmup: usize,
    pub seed: u64,
}

pub const MIN_TRIALS: usize = 30;
pub const MIN_WARMUP: usize = 5;

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            trials: MIN_TRIALS,
            warmup: MIN_WARMUP,
            seed: 0,
        }
    }
}

/// Median and interquartile range of timings (nearest-rank quartiles).
pub fn median_iqr(samples: &[f64]) -> (f64, f64) {
    let mut s = samples.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let q = |p: f64| s[((p * (s.len() - 1) as f64).round() as usize).min(s.len() - 1)];
    if s.is_empty() {
        return (0.0, 0.0);
    }
    (q(0.5), q(0.75) - q(0.25))
}

/// Float BatchNorm parameters laid out for the reference kernel.
#[derive(Clone, Debug)]
pub struct BnParams {
    pub mu: Vec<f32>,
    pub sigma: Vec<f32>,
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
}

impl BnParams {
    pub fn from_state(state: &BatchNormState<f32>) -> Self {
        Self {
            mu: state.running_mean.clone(),
            sigma: state.sigma_r(),
            gamma: state.gamma.data().to_vec(),
            beta: state.beta.data().to_vec(),
        }
    }
}

fn pack_words(len: usize, plane: usize, c: usize, mut bit: impl FnMut(usize, usize) -> bool, out: &mut [u64]) {
    if plane.is_multiple_of(64) {
        for (wi, word) in out.iter_mut().enumerate() {
            let base = wi * 64;
            let ch = (base / plane) % c;
            let mut acc = 0u64;
            for j in 0..64 {
                acc |= (bit(base + j, ch) as u64) << j;
            }
            *word = acc;
        }
    } else {
        out.iter_mut().for_each(|w| *w = 0);
        for i in 0..len {
            if bit(i, (i / plane) % c) {
                out[i / 64] |= 1 << (i % 64);
            }
        }
    }
}

/// Float BatchNorm followed by a separate sign pass.
pub fn bn_kernel(x: &[f32], p: &BnParams, plane: usize, out: &mut [f32], signs: &mut [u64]) {
    let c = p.mu.len();
    for (blk, (xs, os)) in x.chunks(plane).zip(out.chunks_mut(plane)).enumerate() {
        let ch = blk % c;
        let (mu, sigma, gamma, beta) = (p.mu[ch], p.sigma[ch], p.gamma[ch], p.beta[ch]);
        for (o, &v) in os.iter_mut().zip(xs) {
            *o = (v - mu) / sigma * gamma + beta;
        }
    }
    pack_words(x.len(), plane, c, |i, _| out[i] > 0.0, signs);
}

/// Shift-based BatchNorm on integer pre-activations (Q16.16 output) plus a sign pass.
pub fn sbn_kernel(x: &[i32], p: &SbnParams, plane: usize, out: &mut [i32], signs: &mut [u64]) {
    let c = p.mu.len();
    for (blk, (xs, os)) in x.chunks(plane).zip(out.chunks_mut(plane)).enumerate() {
        let ch = blk % c;
        for (o, &v) in os.iter_mut().zip(xs) {
            *o = (p.apply(ch, (v as i64) << 32) >> 16) as i32;
        }
    }
    pack_words(x.len(), plane, c, |i, _| out[i] > 0, signs);
}

/// Folded BatchNorm + sign: one integer comparison per element, bits out.
pub fn binary_bn_kernel(x: &[i32], th: &QuantizedThresholds, plane: usize, out: &mut [u64]) {
    let c = th.channels();
    // per channel: threshold, and a mask flipping `x > t` into the fired bit
    let chan: Vec<(i32, u64)> = (0..c)
        .map(|ch| {
            if th.gamma_zero_mask[ch] {
                // constant output: compare against the extreme value
                (i32::MAX, if th.beta_pos[ch] { !0 } else { 0 })
            } else {
                let t = th.threshold(ch).clamp(i32::MIN as i64, i32::MAX as i64) as i32;
                (t, if th.gamma_sign[ch] { 0 } else { !0 })
            }
        })
        .collect();
    if plane.is_multiple_of(64) {
        let words_per_plane = plane / 64;
        for (blk, (xs, os)) in x.chunks(plane).zip(out.chunks_mut(words_per_plane)).enumerate() {
            let (t, flip) = chan[blk % c];
            for (xw, o) in xs.chunks_exact(64).zip(os.iter_mut()) {
                // pack in 8-bit groups so the comparisons vectorize
                let mut acc = 0u64;
                for (g, xg) in xw.chunks_exact(8).enumerate() {
                    let mut byte = 0u8;
                    for (j, &v) in xg.iter().enumerate() {
                        byte |= ((v > t) as u8) << j;
                    }
                    acc |= (byte as u64) << (8 * g);
                }
                *o = acc ^ flip;
            }
        }
    } else {
        pack_words(
            x.len(),
            plane,
            c,
            |i, ch| {
                let (t, flip) = chan[ch];
                (x[i] > t) != (flip != 0)
            },
            out,
        );
    }
}

/// Random BatchNorm state. With `dyadic`, every parameter is a short binary
/// fraction and `gamma`, `sigma_r` are powers of two, so all variants are exact.
pub fn random_state(rng: &mut impl Rng, c: usize, k: i32, dyadic: bool) -> BatchNormState<f32> {
    let mut s = BatchNormState::new(c);
    let pm = |rng: &mut dyn rand::RngCore| if rng.gen_bool(0.5) { 1.0f32 } else { -1.0 };
    for ch in 0..c {
        if dyadic {
            s.epsilon = 0.0;
            s.running_mean[ch] = (rng.gen_range(-8 * k..=8 * k) as f32 / 16.0) / 2.0;
            let e: i32 = rng.gen_range(-1..=2);
            s.running_var[ch] = 4f32.powi(e);
            s.gamma.data_mut()[ch] = pm(rng) * 2f32.powi(rng.gen_range(-2..=1));
            s.beta.data_mut()[ch] = rng.gen_range(-16..=16) as f32 / 16.0;
        } else {
            s.running_mean[ch] = rng.gen_range(-(k as f32) / 2.0..k as f32 / 2.0);
            s.running_var[ch] = rng.gen_range(0.1f32..(k as f32).max(1.0));
            s.gamma.data_mut()[ch] = pm(rng) * rng.gen_range(0.1f32..2.0);
            s.beta.data_mut()[ch] = rng.gen_range(-1.0f32..1.0);
        }
    }
    s
}

/// Random integer pre-activations in `[-k, k]`.
pub fn random_preactivations(rng: &mut impl Rng, n: usize, k: i32) -> Vec<i32> {
    (0..n).map(|_| rng.gen_range(-k..=k)).collect()
}

/// Pre-activation bound of the benchmark inputs (a 3x3 conv over 64 channels).
pub const BENCH_FAN_IN: i32 = 576;

/// Correctness gate: with power-of-two `gamma` and `sigma_r` all three
/// variants produce the same sign bits.
pub fn variants_agree(dims: [usize; 3], batch: usize, seed: u64) -> bool {
    let [c, h, w] = dims;
    let plane = h * w;
    let n = batch * c * plane;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = 100;
    let state = random_state(&mut rng, c, k, true);
    let xi = random_preactivations(&mut rng, n, k);
    let xf: Vec<f32> = xi.iter().map(|&v| v as f32).collect();
    let words = n.div_ceil(64);
    let (mut a, mut b, mut d) = (vec![0u64; words], vec![0u64; words], vec![0u64; words]);
    bn_kernel(&xf, &BnParams::from_state(&state), plane, &mut vec![0.0; n], &mut a);
    sbn_kernel(&xi, &SbnParams::from_state(&state), plane, &mut vec![0; n], &mut b);
    let th = quantize_thresholds(&fold_bn(&state), k as usize);
    binary_bn_kernel(&xi, &th, plane, &mut d);
    th.scale_exp == 0 && a == b && a == d
}

fn time_trials(cfg: &BenchConfig, mut f: impl FnMut()) -> Vec<f64> {
    for _ in 0..cfg.warmup.max(MIN_WARMUP) {
        f();
    }
    (0..cfg.trials.max(MIN_TRIALS))
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_nanos() as f64
        })
        .collect()
}

/// Times `variant` over `[batch, C, H, W]` inputs for each batch size.
pub fn run_bench(
    variant: BnVariant,
    dims: [usize; 3],
    batch_sizes: &[usize],
    cfg: &BenchConfig,
) -> Result<Vec<BenchResult>> {
    let [c, h, w] = dims;
    if c == 0 || h == 0 || w == 0 || batch_sizes.contains(&0) {
        return Err(Error::Config(format!(
            "bench dims {c}x{h}x{w} and batches must be positive"
        )));
    }
    let plane = h * w;
    let mut results = Vec::with_capacity(batch_sizes.len());
    for &batch in batch_sizes {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ batch as u64);
        let n = batch * c * plane;
        let state = random_state(&mut rng, c, BENCH_FAN_IN, false);
        let xi = random_preactivations(&mut rng, n, BENCH_FAN_IN);
        let words = n.div_ceil(64);
        let (samples, output_bytes) = match variant {
            BnVariant::Bn => {
                let xf: Vec<f32> = xi.iter().map(|&v| v as f32).collect();
                let p = BnParams::from_state(&state);
                let mut out = vec![0f32; n];
                let mut signs = vec![0u64; words];
                let s = time_trials(cfg, || {
                    bn_kernel(black_box(&xf), &p, plane, &mut out, &mut signs);
                    black_box((&out, &signs));
                });
                (s, out.len() * 4 + signs.len() * 8)
            }
            BnVariant::Sbn => {
                let p = SbnParams::from_state(&state);
                let mut out = vec![0i32; n];
                let mut signs = vec![0u64; words];
                let s = time_trials(cfg, || {
                    sbn_kernel(black_box(&xi), &p, plane, &mut out, &mut signs);
                    black_box((&out, &signs));
                });
                (s, out.len() * 4 + signs.len() * 8)
            }
            BnVariant::BinaryBn => {
                let th = quantize_thresholds(&fold_bn(&state), BENCH_FAN_IN as usize);
                let mut out = vec![0u64; words];
                let s = time_trials(cfg, || {
                    binary_bn_kernel(black_box(&xi), &th, plane, &mut out);
                    black_box(&out);
                });
                (s, out.len() * 8)
            }
        };
        let (median_ns, iqr_ns) = median_iqr(&samples);
        results.push(BenchResult {
            variant,
            batch,
            c,
            h,
            w,
            median_ns,
            iqr_ns,
            trials: samples.len(),
            output_bytes,
            storage_bits: CostModel {
                variant,
                c: c as u64,
                h: h as u64,
                w: w as u64,
            }
            .storage_bits(),
        });
    }
    Ok(results)
}

pub const BENCH_CSV_HEADER: &str = "variant,batch,c,h,w,median_ns,iqr_ns,output_bytes,storage_bits";

pub fn bench_csv(results: &[BenchResult]) -> String {
    let mut s = format!("{BENCH_CSV_HEADER}\n");
    for r in results {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{:.0},{:.0},{},{}",
            r.variant, r.batch, r.c, r.h, r.w, r.median_ns, r.iqr_ns, r.output_bytes, r.storage_bits
        );
    }
    s
}

/// Channel-count range of a reference architecture, drawn as guide lines.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceLine {
    pub name: String,
    pub min_c: usize,
    pub max_c: usize,
}

/// The 13-conv VGG-16 feature extractor with a CIFAR-sized head.
pub const VGG16_ARCH: &str = "conv:64:3:1:1, conv:64:3:1:1, pool, conv:128:3:1:1, conv:128:3:1:1, pool, \
conv:256:3:1:1, conv:256:3:1:1, conv:256:3:1:1, pool, conv:512:3:1:1, conv:512:3:1:1, conv:512:3:1:1, pool, \
conv:512:3:1:1, conv:512:3:1:1, conv:512:3:1:1, pool, dense:512, dense:10";

/// AlexNet's five convolutions and three dense layers.
pub const ALEXNET_ARCH: &str = "conv:96:11:4:2, pool, conv:256:5:1:2, pool, conv:384:3:1:1, conv:384:3:1:1, \
conv:256:3:1:1, pool, dense:4096, dense:4096, dense:1000";

/// Minimum and maximum conv channel counts of an architecture string.
pub fn reference_line(name: &str, arch: &str) -> Result<ReferenceLine> {
    let chans: Vec<usize> = parse_arch(arch)?
        .into_iter()
        .filter_map(|l| match l {
            ArchLayer::Conv { out_channels, .. } => Some(out_channels),
            _ => None,
        })
        .collect();
    match (chans.iter().min(), chans.iter().max()) {
        (Some(&min_c), Some(&max_c)) => Ok(ReferenceLine {
            name: name.to_string(),
            min_c,
            max_c,
        }),
        _ => Err(Error::Config(format!("reference `{name}` has no conv layers"))),
    }
}

pub fn default_reference_lines() -> Vec<ReferenceLine> {
    vec![
        reference_line("vgg16", VGG16_ARCH).expect("built-in architecture parses"),
        reference_line("alexnet", ALEXNET_ARCH).expect("built-in architecture parses"),
    ]
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PlotSeries {
    pub variant: BnVariant,
    pub batch: Vec<usize>,
    pub median_ns: Vec<f64>,
    pub iqr_ns: Vec<f64>,
    pub output_bytes: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PlotData {
    pub dims: [usize; 3],
    pub series: Vec<PlotSeries>,
    pub reference_lines: Vec<ReferenceLine>,
}

pub fn plot_data(dims: [usize; 3], results: &[BenchResult], reference_lines: Vec<ReferenceLine>) -> PlotData {
    let series = BnVariant::ALL
        .into_iter()
        .filter_map(|v| {
            let rows: Vec<&BenchResult> = results.iter().filter(|r| r.variant == v).collect();
            (!rows.is_empty()).then(|| PlotSeries {
                variant: v,
                batch: rows.iter().map(|r| r.batch).collect(),
                median_ns: rows.iter().map(|r| r.median_ns).collect(),
                iqr_ns: rows.iter().map(|r| r.iqr_ns).collect(),
                output_bytes: rows.iter().map(|r| r.output_bytes).collect(),
            })
        })
        .collect();
    PlotData {
        dims,
        series,
        reference_lines,
    }
}

/// Float reference used by tests: `sign(BN(x))` bits from the graph module.
pub fn reference_signs(x: &[f32], state: &BatchNormState<f32>, dims: [usize; 4]) -> Result<Vec<bool>> {
    let t = Tensor::new(&dims, x.to_vec())?;
    let y = crate::graph::ops::batchnorm_forward_infer(&t, state)?;
    Ok(y.data().iter().map(|&v| v > 0.0).collect())
}
