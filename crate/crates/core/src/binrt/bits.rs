//! Bit-packed `+-1` tensors and integer feature maps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const WORD_BITS: usize = 64;

pub fn words_for(bits: usize) -> usize {
    bits.div_ceil(WORD_BITS)
}

/// Mask selecting the low `n` bits of a word (`n <= 64`).
pub fn low_mask(n: usize) -> u64 {
    if n >= WORD_BITS {
        u64::MAX
    } else {
        (1u64 << n) - 1
    }
}

/// A `+-1` tensor with one bit per element: bit 1 is `+1`, bit 0 is `-1`.
///
/// Each row of the innermost axis starts on a fresh 64-bit word; padding
/// bits past the row end are always zero.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitTensor {
    shape: Vec<usize>,
    words_per_row: usize,
    words: Vec<u64>,
}

impl BitTensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let row = shape.last().copied().unwrap_or(1);
        let rows: usize = shape[..shape.len().saturating_sub(1)].iter().product();
        let words_per_row = words_for(row);
        Self {
            shape: shape.to_vec(),
            words_per_row,
            words: vec![0; rows * words_per_row],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> bool) -> Self {
        let mut t = Self::zeros(shape);
        let row = t.row_len();
        for r in 0..t.rows() {
            let base = r * t.words_per_row;
            for x in 0..row {
                if f(r * row + x) {
                    t.words[base + x / WORD_BITS] |= 1 << (x % WORD_BITS);
                }
            }
        }
        t
    }

    pub fn from_bools(shape: &[usize], bits: &[bool]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != bits.len() {
            return Err(Error::shape(format!("{} bits for shape {shape:?}", bits.len())));
        }
        Ok(Self::from_fn(shape, |i| bits[i]))
    }

    /// Packs `v > 0` as `+1`; zero and negatives become `-1`.
    pub fn from_signs<F: Scalar>(t: &Tensor<F>) -> Self {
        let d = t.data();
        Self::from_fn(t.shape(), |i| d[i] > F::zero())
    }

    /// Builds a tensor from raw words, rejecting non-zero padding bits.
    pub fn from_words(shape: &[usize], words: Vec<u64>) -> Result<Self> {
        let mut t = Self::zeros(shape);
        if words.len() != t.words.len() {
            return Err(Error::shape(format!(
                "{} words for shape {shape:?}, expected {}",
                words.len(),
                t.words.len()
            )));
        }
        t.words = words;
        if !t.is_canonical() {
            return Err(Error::shape("non-zero padding bits".to_string()));
        }
        Ok(t)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row_len(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn rows(&self) -> usize {
        self.shape[..self.shape.len().saturating_sub(1)].iter().product()
    }

    pub fn words_per_row(&self) -> usize {
        self.words_per_row
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn row(&self, r: usize) -> &[u64] {
        &self.words[r * self.words_per_row..(r + 1) * self.words_per_row]
    }

    pub fn get(&self, flat: usize) -> bool {
        let row = self.row_len();
        let (r, x) = (flat / row, flat % row);
        (self.words[r * self.words_per_row + x / WORD_BITS] >> (x % WORD_BITS)) & 1 == 1
    }

    pub fn set(&mut self, flat: usize, bit: bool) {
        let row = self.row_len();
        let (r, x) = (flat / row, flat % row);
        let w = &mut self.words[r * self.words_per_row + x / WORD_BITS];
        let m = 1u64 << (x % WORD_BITS);
        if bit {
            *w |= m;
        } else {
            *w &= !m;
        }
    }

    pub fn is_canonical(&self) -> bool {
        let row = self.row_len();
        let tail = row % WORD_BITS;
        if tail == 0 || self.words_per_row == 0 {
            return true;
        }
        let mask = !low_mask(tail);
        (0..self.rows()).all(|r| self.words[(r + 1) * self.words_per_row - 1] & mask == 0)
    }

    pub fn to_bools(&self) -> Vec<bool> {
        (0..self.len()).map(|i| self.get(i)).collect()
    }

    /// Elements as `+1` / `-1` values.
    pub fn to_pm1(&self) -> Vec<i32> {
        (0..self.len()).map(|i| if self.get(i) { 1 } else { -1 }).collect()
    }

    pub fn unpack<F: Scalar>(&self) -> Tensor<F> {
        let data = (0..self.len())
            .map(|i| if self.get(i) { F::one() } else { -F::one() })
            .collect();
        Tensor::new(&self.shape, data).expect("shape and length agree")
    }

    /// Repacks with a new shape of the same length (rows are re-aligned).
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.len() {
            return Err(Error::shape(format!("cannot reshape {:?} to {shape:?}", self.shape)));
        }
        if shape.last() == self.shape.last() {
            let mut t = self.clone();
            t.shape = shape.to_vec();
            return Ok(t);
        }
        Ok(Self::from_fn(shape, |i| self.get(i)))
    }

    /// Bits packed LSB-first into bytes, `ceil(row / 8)` bytes per row.
    pub fn row_bytes(&self, r: usize) -> Vec<u8> {
        let row = self.row_len();
        let mut out = vec![0u8; row.div_ceil(8)];
        for (k, byte) in out.iter_mut().enumerate() {
            let x = k * 8;
            let word = self.words[r * self.words_per_row + x / WORD_BITS];
            *byte = (word >> (x % WORD_BITS)) as u8;
        }
        out
    }

    /// Inverse of [`BitTensor::row_bytes`] over every row.
    pub fn from_row_bytes(shape: &[usize], bytes: &[u8]) -> Result<Self> {
        let mut t = Self::zeros(shape);
        let row = t.row_len();
        let per = row.div_ceil(8);
        if bytes.len() != per * t.rows() {
            return Err(Error::shape(format!(
                "{} bytes for shape {shape:?}, expected {}",
                bytes.len(),
                per * t.rows()
            )));
        }
        let tail = row % 8;
        for r in 0..t.rows() {
            let src = &bytes[r * per..(r + 1) * per];
            if tail != 0 && src[per - 1] >> tail != 0 {
                return Err(Error::shape(format!("row {r} has non-zero padding bits")));
            }
            for (k, &b) in src.iter().enumerate() {
                let x = k * 8;
                t.words[r * t.words_per_row + x / WORD_BITS] |= (b as u64) << (x % WORD_BITS);
            }
        }
        Ok(t)
    }

    /// Bits `start .. start + len` of row `r` (`len <= 64`) as the low bits of
    /// a word; positions outside the row read as 0 (`-1`).
    pub fn window(&self, r: usize, start: isize, len: usize) -> u64 {
        debug_assert!(len <= WORD_BITS);
        let row_len = self.row_len() as isize;
        let lo = start.max(0);
        let hi = (start + len as isize).min(row_len);
        if lo >= hi {
            return 0;
        }
        let words = self.row(r);
        let lo_u = lo as usize;
        let n = (hi - lo) as usize;
        let wi = lo_u / WORD_BITS;
        let off = lo_u % WORD_BITS;
        let mut v = words[wi] >> off;
        if off != 0 && wi + 1 < words.len() {
            v |= words[wi + 1] << (WORD_BITS - off);
        }
        (v & low_mask(n)) << (lo - start) as usize
    }
}

/// Integer pre-activations `[N, C, H, W]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntFeatureMap {
    pub shape: [usize; 4],
    pub data: Vec<i32>,
}

impl IntFeatureMap {
    pub fn new(shape: [usize; 4], data: Vec<i32>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape(format!("{} values for shape {shape:?}", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![0; shape.iter().product()],
        }
    }

    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> i32 {
        let [_, cc, h, w] = self.shape;
        self.data[((n * cc + c) * h + y) * w + x]
    }

    pub fn to_tensor<F: Scalar>(&self) -> Tensor<F> {
        Tensor::new(&self.shape, self.data.iter().map(|&v| F::of(v as f64)).collect()).expect("shape and length agree")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pack_convention() {
        let p = Tensor::new(&[3], vec![0.3f32, -0.2, 0.0]).unwrap();
        let b = BitTensor::from_signs(&p);
        assert_eq!(b.to_bools(), vec![true, false, false]);
        assert_eq!(b.to_pm1(), vec![1, -1, -1]);
        assert_eq!(BitTensor::from_signs(&b.unpack::<f32>()), b);
    }

    #[test]
    fn rows_are_word_aligned_and_canonical() {
        let b = BitTensor::from_fn(&[2, 70], |_| true);
        assert_eq!(b.words_per_row(), 2);
        assert_eq!(b.words().len(), 4);
        assert!(b.is_canonical());
        assert_eq!(b.row(1)[1], low_mask(6));
        assert!(BitTensor::from_words(&[1, 3], vec![0b1000]).is_err());
    }

    #[test]
    fn windows_read_outside_as_zero() {
        let b = BitTensor::from_bools(&[1, 5], &[true, true, false, true, true]).unwrap();
        assert_eq!(b.window(0, 0, 5), 0b11011);
        assert_eq!(b.window(0, -2, 4), 0b1100);
        assert_eq!(b.window(0, 3, 4), 0b11);
        assert_eq!(b.window(0, 9, 3), 0);
    }

    #[test]
    fn window_across_word_boundary() {
        let b = BitTensor::from_fn(&[1, 130], |i| i % 3 == 0);
        for start in [-3isize, 0, 60, 62, 63, 64, 100, 127] {
            let w = b.window(0, start, 7);
            for k in 0..7 {
                let pos = start + k as isize;
                let expect = (0..130).contains(&pos) && pos % 3 == 0;
                assert_eq!((w >> k) & 1 == 1, expect, "start {start} k {k}");
            }
        }
    }

    #[test]
    fn byte_round_trip() {
        let b = BitTensor::from_fn(&[3, 2, 11], |i| (i * 7) % 5 < 2);
        let bytes: Vec<u8> = (0..b.rows()).flat_map(|r| b.row_bytes(r)).collect();
        assert_eq!(BitTensor::from_row_bytes(&[3, 2, 11], &bytes).unwrap(), b);
    }

    #[test]
    fn reshape_realigns() {
        let b = BitTensor::from_fn(&[2, 3, 5], |i| i % 2 == 0);
        let flat = b.reshape(&[2, 15]).unwrap();
        assert_eq!(flat.to_bools(), b.to_bools());
        assert!(b.reshape(&[7]).is_err());
    }
}
