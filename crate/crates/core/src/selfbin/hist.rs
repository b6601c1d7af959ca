//! Weight histograms before and after binarization.

use serde::{Deserialize, Serialize};

use crate::graph::ops::sign_forward;
use crate::selfbin::weights::ConstrainedWeights;
use crate::tensor::Scalar;

pub const HIST_LO: f64 = -1.5;
pub const HIST_HI: f64 = 1.5;
pub const DEFAULT_BINS: usize = 100;

/// Density-normalized histograms over the fixed range `[-1.5, 1.5]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramPair {
    pub bin_centers: Vec<f64>,
    pub pre_density: Vec<f64>,
    pub post_density: Vec<f64>,
}

impl HistogramPair {
    pub fn bin_width(&self) -> f64 {
        (HIST_HI - HIST_LO) / self.bin_centers.len() as f64
    }
}

pub fn bin_index(x: f64, bins: usize) -> usize {
    let idx = ((x - HIST_LO) * bins as f64 / (HIST_HI - HIST_LO)).floor();
    if idx < 0.0 {
        0
    } else {
        (idx as usize).min(bins - 1)
    }
}

pub fn density<F: Scalar>(values: &[F], bins: usize) -> Vec<f64> {
    let mut counts = vec![0.0; bins];
    for &v in values {
        counts[bin_index(v.as_f64(), bins)] += 1.0;
    }
    let width = (HIST_HI - HIST_LO) / bins as f64;
    let total = values.len().max(1) as f64;
    counts.iter_mut().for_each(|c| *c /= total * width);
    counts
}

/// Histogram of the training-time weights (`tanh(nu * P)` for soft layers,
/// the latent `P` otherwise) and of the frozen `sign(P)`.
pub fn histogram_snapshot<F: Scalar>(cw: &ConstrainedWeights<F>, bins: usize, nu: F) -> HistogramPair {
    let bins = bins.max(1);
    let width = (HIST_HI - HIST_LO) / bins as f64;
    let pre = cw.latent(nu);
    let post = sign_forward(&cw.p);
    HistogramPair {
        bin_centers: (0..bins).map(|i| HIST_LO + (i as f64 + 0.5) * width).collect(),
        pre_density: density(pre.data(), bins),
        post_density: density(post.data(), bins),
    }
}

/// Fraction of `values` with magnitude in `[threshold, 1]`.
pub fn saturated_fraction<F: Scalar>(values: &[F], threshold: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let hits = values
        .iter()
        .filter(|v| {
            let a = v.as_f64().abs();
            a >= threshold && a <= 1.0
        })
        .count();
    hits as f64 / values.len() as f64
}
