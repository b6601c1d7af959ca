//! Dataset ingestion: MNIST IDX files, CIFAR-10 binary batches and seeded
//! synthetic Gaussian blobs. Images are kept as raw bytes `[N, C, H, W]`;
//! the model's input encoding turns them into network inputs.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Images as raw bytes plus integer labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub shape: [usize; 3],
    pub num_classes: usize,
    pub images: Vec<u8>,
    pub labels: Vec<u8>,
}

impl Dataset {
    pub fn new(shape: [usize; 3], num_classes: usize, images: Vec<u8>, labels: Vec<u8>) -> Result<Self> {
        let per: usize = shape.iter().product();
        if per == 0 || images.len() != per * labels.len() {
            return Err(Error::format(
                0,
                format!(
                    "{} image bytes for {} labels of shape {shape:?}",
                    images.len(),
                    labels.len()
                ),
            ));
        }
        if let Some(pos) = labels.iter().position(|&l| l as usize >= num_classes) {
            return Err(Error::format(
                pos,
                format!("label {} outside {num_classes} classes", labels[pos]),
            ));
        }
        Ok(Self {
            shape,
            num_classes,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    /// Images normalized to `[-1, 1)` as `(raw - 128) / 128`.
    pub fn normalized(&self, i: usize) -> Vec<f32> {
        self.image(i).iter().map(|&b| (b as f32 - 128.0) / 128.0).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut images = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        Self {
            shape: self.shape,
            num_classes: self.num_classes,
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Splits off the last `val_fraction` of the records as a validation set.
    pub fn split(&self, val_fraction: f64) -> (Self, Self) {
        let n_val = ((self.len() as f64) * val_fraction.clamp(0.0, 1.0)).round() as usize;
        let cut = self.len() - n_val.min(self.len());
        let train: Vec<usize> = (0..cut).collect();
        let val: Vec<usize> = (cut..self.len()).collect();
        (self.subset(&train), self.subset(&val))
    }

    /// Lower median of each channel over every pixel of every image.
    pub fn channel_medians(&self) -> Vec<u8> {
        let [c, h, w] = self.shape;
        let plane = h * w;
        let mut hist = vec![[0u64; 256]; c];
        for (k, &b) in self.images.iter().enumerate() {
            hist[(k / plane) % c][b as usize] += 1;
        }
        hist.iter()
            .map(|counts| {
                let total: u64 = counts.iter().sum();
                let target = total.div_ceil(2);
                let mut acc = 0;
                for (v, &cnt) in counts.iter().enumerate() {
                    acc += cnt;
                    if acc >= target {
                        return v as u8;
                    }
                }
                255
            })
            .collect()
    }

    pub fn stream(&self, batch_size: usize, seed: u64, augment: bool) -> DatasetStream<'_> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut rng);
        DatasetStream {
            data: self,
            order,
            pos: 0,
            batch_size: batch_size.max(1),
            augment,
            rng,
        }
    }

    /// Batches in file order, without shuffling or augmentation.
    pub fn sequential(&self, batch_size: usize) -> impl Iterator<Item = Batch> + '_ {
        let bs = batch_size.max(1);
        (0..self.len()).step_by(bs).map(move |start| {
            let idx: Vec<usize> = (start..(start + bs).min(self.len())).collect();
            self.batch(&idx)
        })
    }

    fn batch(&self, idx: &[usize]) -> Batch {
        let mut raw = Vec::with_capacity(idx.len() * self.image_len());
        for &i in idx {
            raw.extend_from_slice(self.image(i));
        }
        let [c, h, w] = self.shape;
        Batch {
            shape: [idx.len(), c, h, w],
            raw,
            labels: idx.iter().map(|&i| self.labels[i] as usize).collect(),
        }
    }
}

/// One minibatch of raw images `[N, C, H, W]` and labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub shape: [usize; 4],
    pub raw: Vec<u8>,
    pub labels: Vec<usize>,
}

/// Shuffled minibatches in a deterministic order for a given seed.
pub struct DatasetStream<'a> {
    data: &'a Dataset,
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    augment: bool,
    rng: ChaCha8Rng,
}

pub const AUGMENT_PAD: usize = 4;
const PAD_BYTE: u8 = 128;

impl Iterator for DatasetStream<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        let mut batch = self.data.batch(idx);
        if self.augment {
            let [_, c, h, w] = batch.shape;
            for img in batch.raw.chunks_mut(c * h * w) {
                let dy = self.rng.gen_range(0..=2 * AUGMENT_PAD);
                let dx = self.rng.gen_range(0..=2 * AUGMENT_PAD);
                let flip = self.rng.gen_bool(0.5);
                pad_crop_flip(img, [c, h, w], dy, dx, flip);
            }
        }
        Some(batch)
    }
}

/// Pads by 4 on every side, crops the original size at offset `(dy, dx)`
/// of the padded image and optionally mirrors horizontally.
pub fn pad_crop_flip(img: &mut [u8], shape: [usize; 3], dy: usize, dx: usize, flip: bool) {
    let [c, h, w] = shape;
    let src = img.to_vec();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let sy = (y + dy) as isize - AUGMENT_PAD as isize;
                let sx = (x + dx) as isize - AUGMENT_PAD as isize;
                let v = if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                    src[(ch * h + sy as usize) * w + sx as usize]
                } else {
                    PAD_BYTE
                };
                let ox = if flip { w - 1 - x } else { x };
                img[(ch * h + y) * w + ox] = v;
            }
        }
    }
}

/// Where a dataset comes from, written as `kind:arguments`.
#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSpec {
    Blobs(BlobsSpec),
    Mnist { dir: PathBuf, test: bool },
    Cifar10 { path: PathBuf, test: bool },
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlobsSpec {
    pub seed: u64,
    pub n: usize,
    pub classes: usize,
    pub dims: [usize; 3],
    pub spread: f64,
}

impl Default for BlobsSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            n: 1000,
            classes: 2,
            dims: [2, 1, 1],
            spread: 0.15,
        }
    }
}

impl fmt::Display for DatasetSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DatasetSpec::Blobs(b) => write!(
                f,
                "blobs:seed={},n={},classes={},dims={}x{}x{},spread={}",
                b.seed, b.n, b.classes, b.dims[0], b.dims[1], b.dims[2], b.spread
            ),
            DatasetSpec::Mnist { dir, test } => {
                write!(f, "{}:{}", if *test { "mnist-test" } else { "mnist" }, dir.display())
            }
            DatasetSpec::Cifar10 { path, test } => {
                write!(
                    f,
                    "{}:{}",
                    if *test { "cifar10-test" } else { "cifar10" },
                    path.display()
                )
            }
        }
    }
}

pub fn parse_dims(s: &str) -> Result<[usize; 3]> {
    let parts: Vec<usize> = s
        .split('x')
        .map(|t| t.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("bad dims `{s}`, expected CxHxW")))?;
    match parts[..] {
        [c, h, w] if c > 0 && h > 0 && w > 0 => Ok([c, h, w]),
        _ => Err(Error::Config(format!("bad dims `{s}`, expected CxHxW"))),
    }
}

impl FromStr for DatasetSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, rest) = s
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("dataset `{s}` must look like kind:args")))?;
        match kind.trim() {
            "blobs" => {
                let mut b = BlobsSpec::default();
                for kv in rest.split(',').filter(|t| !t.trim().is_empty()) {
                    let (k, v) = kv
                        .split_once('=')
                        .ok_or_else(|| Error::Config(format!("bad blobs option `{kv}`")))?;
                    let bad = || Error::Config(format!("bad blobs value `{kv}`"));
                    match k.trim() {
                        "seed" => b.seed = v.trim().parse().map_err(|_| bad())?,
                        "n" => b.n = v.trim().parse().map_err(|_| bad())?,
                        "classes" => b.classes = v.trim().parse().map_err(|_| bad())?,
                        "dims" => b.dims = parse_dims(v)?,
                        "spread" => b.spread = v.trim().parse().map_err(|_| bad())?,
                        _ => return Err(bad()),
                    }
                }
                Ok(DatasetSpec::Blobs(b))
            }
            "mnist" | "mnist-test" => Ok(DatasetSpec::Mnist {
                dir: PathBuf::from(rest.trim()),
                test: kind.trim() == "mnist-test",
            }),
            "cifar10" | "cifar10-test" => Ok(DatasetSpec::Cifar10 {
                path: PathBuf::from(rest.trim()),
                test: kind.trim() == "cifar10-test",
            }),
            other => Err(Error::Config(format!("unknown dataset kind `{other}`"))),
        }
    }
}

pub fn load_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    match spec {
        DatasetSpec::Blobs(b) => synthetic_blobs(b),
        DatasetSpec::Mnist { dir, test } => {
            let prefix = if *test { "t10k" } else { "train" };
            let images = fs::read(dir.join(format!("{prefix}-images-idx3-ubyte")))?;
            let labels = fs::read(dir.join(format!("{prefix}-labels-idx1-ubyte")))?;
            parse_mnist(&images, &labels)
        }
        DatasetSpec::Cifar10 { path, test } => {
            let files = cifar_files(path, *test)?;
            let mut bytes = Vec::new();
            for f in files {
                bytes.extend(fs::read(f)?);
            }
            parse_cifar10(&bytes)
        }
    }
}

fn cifar_files(path: &Path, test: bool) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let names: Vec<String> = if test {
        vec!["test_batch.bin".into()]
    } else {
        (1..=5).map(|i| format!("data_batch_{i}.bin")).collect()
    };
    Ok(names.into_iter().map(|n| path.join(n)).collect())
}

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(offset, "truncated header"))
}

/// Parses an IDX image file (`magic 0x00000803`) into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(0, format!("bad IDX image magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let need = 16 + n * rows * cols;
    if bytes.len() != need {
        return Err(Error::format(
            bytes.len().min(need),
            format!(
                "expected {need} bytes for {n} images of {rows}x{cols}, found {}",
                bytes.len()
            ),
        ));
    }
    Ok((n, rows, cols, bytes[16..].to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(0, format!("bad IDX label magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    if bytes.len() != 8 + n {
        return Err(Error::format(
            bytes.len().min(8 + n),
            format!("expected {} label bytes, found {}", n, bytes.len().saturating_sub(8)),
        ));
    }
    Ok(bytes[8..].to_vec())
}

pub fn parse_mnist(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let (n, rows, cols, pixels) = parse_idx_images(images)?;
    let labels = parse_idx_labels(labels)?;
    if labels.len() != n {
        return Err(Error::format(4, format!("{n} images but {} labels", labels.len())));
    }
    Dataset::new([1, rows, cols], 10, pixels, labels)
}

pub const CIFAR10_RECORD: usize = 1 + 3072;

/// Concatenated CIFAR-10 binary records: one label byte then 3x32x32 pixels.
pub fn parse_cifar10(bytes: &[u8]) -> Result<Dataset> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR10_RECORD) {
        let offset = bytes.len() - bytes.len() % CIFAR10_RECORD;
        return Err(Error::format(offset, "truncated CIFAR-10 record"));
    }
    let n = bytes.len() / CIFAR10_RECORD;
    let mut images = Vec::with_capacity(n * 3072);
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(CIFAR10_RECORD).enumerate() {
        if rec[0] >= 10 {
            return Err(Error::format(
                i * CIFAR10_RECORD,
                format!("label {} outside 10 classes", rec[0]),
            ));
        }
        labels.push(rec[0]);
        images.extend_from_slice(&rec[1..]);
    }
    Dataset::new([3, 32, 32], 10, images, labels)
}

/// Gaussian clusters around well separated class centers, quantized to bytes.
pub fn synthetic_blobs(spec: &BlobsSpec) -> Result<Dataset> {
    if spec.classes < 2 || spec.n < spec.classes {
        return Err(Error::Config("blobs need at least 2 classes and n >= classes".into()));
    }
    let dim: usize = spec.dims.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let min_dist = 0.5;
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(spec.classes);
    let mut attempts = 0;
    while centers.len() < spec.classes {
        let c: Vec<f64> = (0..dim).map(|_| rng.gen_range(-0.6..0.6)).collect();
        let far = centers
            .iter()
            .all(|o| o.iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() >= min_dist);
        attempts += 1;
        if far || attempts > 10_000 {
            centers.push(c);
        }
    }
    let mut labels: Vec<u8> = (0..spec.n).map(|i| (i % spec.classes) as u8).collect();
    labels.shuffle(&mut rng);
    let mut images = Vec::with_capacity(spec.n * dim);
    for &l in &labels {
        for &m in &centers[l as usize] {
            let z: f64 = rng.sample(StandardNormal);
            let v = m + spec.spread * z;
            images.push((v * 128.0 + 128.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    Dataset::new(spec.dims, spec.classes, images, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(n: u32, r: u32, c: u32) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend(IDX_IMAGES_MAGIC.to_be_bytes());
        b.extend(n.to_be_bytes());
        b.extend(r.to_be_bytes());
        b.extend(c.to_be_bytes());
        b.extend((0..n * r * c).map(|i| (i % 251) as u8));
        b
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend(IDX_LABELS_MAGIC.to_be_bytes());
        b.extend((labels.len() as u32).to_be_bytes());
        b.extend_from_slice(labels);
        b
    }

    #[test]
    fn mnist_parse() {
        let ds = parse_mnist(&idx_images(3, 28, 28), &idx_labels(&[1, 7, 9])).unwrap();
        assert_eq!(ds.shape, [1, 28, 28]);
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.image(1)[0], (784 % 251) as u8);
    }

    #[test]
    fn mnist_errors_report_offsets() {
        let mut bad = idx_images(2, 2, 2);
        bad[3] = 0x01;
        assert!(matches!(parse_idx_images(&bad), Err(Error::Format { offset: 0, .. })));
        let mut short = idx_images(2, 2, 2);
        short.pop();
        assert!(matches!(
            parse_idx_images(&short),
            Err(Error::Format { offset: 23, .. })
        ));
        assert!(parse_mnist(&idx_images(2, 2, 2), &idx_labels(&[1])).is_err());
        assert!(parse_mnist(&idx_images(1, 2, 2), &idx_labels(&[10])).is_err());
    }

    #[test]
    fn cifar_records() {
        let mut bytes = vec![0u8; 2 * CIFAR10_RECORD];
        bytes[0] = 3;
        bytes[CIFAR10_RECORD] = 9;
        bytes[1] = 200;
        let ds = parse_cifar10(&bytes).unwrap();
        assert_eq!(ds.labels, vec![3, 9]);
        assert_eq!(ds.shape, [3, 32, 32]);
        assert_eq!(ds.image(0)[0], 200);
        assert!(matches!(
            parse_cifar10(&bytes[..CIFAR10_RECORD + 10]),
            Err(Error::Format { offset: 3073, .. })
        ));
        bytes[CIFAR10_RECORD] = 10;
        assert!(matches!(parse_cifar10(&bytes), Err(Error::Format { offset: 3073, .. })));
    }

    #[test]
    fn blobs_reproducible() {
        let spec = BlobsSpec {
            seed: 7,
            n: 1000,
            ..BlobsSpec::default()
        };
        let a = synthetic_blobs(&spec).unwrap();
        let b = synthetic_blobs(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 1000);
        let c = synthetic_blobs(&BlobsSpec { seed: 8, ..spec }).unwrap();
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn spec_round_trip() {
        for s in [
            "blobs:seed=3,n=200,classes=4,dims=1x4x4,spread=0.2",
            "mnist:/data/mnist",
            "cifar10-test:/data/cifar",
        ] {
            let spec: DatasetSpec = s.parse().unwrap();
            assert_eq!(spec.to_string().parse::<DatasetSpec>().unwrap(), spec);
        }
        assert!("nope:x".parse::<DatasetSpec>().is_err());
        assert!("blobs:dims=2x2".parse::<DatasetSpec>().is_err());
    }

    #[test]
    fn split_and_medians() {
        let ds = Dataset::new(
            [2, 1, 2],
            2,
            vec![0, 1, 10, 11, 2, 3, 12, 13, 4, 5, 14, 15],
            vec![0, 1, 0],
        )
        .unwrap();
        let (tr, va) = ds.split(1.0 / 3.0);
        assert_eq!(tr.len(), 2);
        assert_eq!(va.labels, vec![0]);
        assert_eq!(ds.channel_medians(), vec![2, 12]);
    }

    #[test]
    fn stream_is_deterministic_and_complete() {
        let ds = synthetic_blobs(&BlobsSpec {
            n: 50,
            ..BlobsSpec::default()
        })
        .unwrap();
        let a: Vec<Batch> = ds.stream(16, 5, false).collect();
        let b: Vec<Batch> = ds.stream(16, 5, false).collect();
        assert_eq!(a, b);
        assert_eq!(a.iter().map(|b| b.labels.len()).sum::<usize>(), 50);
        assert_eq!(a.last().unwrap().shape[0], 2);
    }

    #[test]
    fn augmentation_identity_offset() {
        let mut img: Vec<u8> = (0..2 * 3 * 3).map(|i| i as u8).collect();
        let orig = img.clone();
        pad_crop_flip(&mut img, [2, 3, 3], AUGMENT_PAD, AUGMENT_PAD, false);
        assert_eq!(img, orig);
        pad_crop_flip(&mut img, [2, 3, 3], AUGMENT_PAD, AUGMENT_PAD, true);
        assert_eq!(&img[..3], &[2, 1, 0]);
        pad_crop_flip(&mut img, [2, 3, 3], 0, 0, false);
        assert_eq!(img[0], PAD_BYTE);
    }
}
