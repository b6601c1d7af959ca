//! Little-endian binary file format for [`FrozenModel`].
//!
//! ```text
//! "SBNN"  u16 version  u16 layer_count
//! u8 encoding (0 = median, 1 = int8)  u32 C  u32 H  u32 W  [C median bytes]
//! per layer:
//!   u8 tag (1 = conv, 2 = dense)  u32 x4 shape (dense: out, in, 1, 1)
//!   conv only: u8 stride  u8 pad
//!   u8 flags (bit 0 = max pool, bit 1 = thresholds present)
//!   weights: per output channel, ceil(fan_in / 8) bytes, LSB-first
//!   thresholds: Cout x i8 t_q, u8 scale_exp, then gamma_sign,
//!               gamma_zero_mask and beta_pos as ceil(Cout / 8) bytes each
//! u32 CRC32 of everything above
//! ```

use crate::binrt::bits::BitTensor;
use crate::error::{Error, Result};
use crate::freeze::thresholds::QuantizedThresholds;
use crate::freeze::{FrozenKind, FrozenLayer, FrozenModel};
use crate::graph::InputEncoding;

pub const MAGIC: &[u8; 4] = b"SBNN";
pub const FORMAT_VERSION: u16 = 1;

const TAG_CONV: u8 = 1;
const TAG_DENSE: u8 = 2;
const ENC_MEDIAN: u8 = 0;
const ENC_INT8: u8 = 1;
const FLAG_POOL: u8 = 1;
const FLAG_THRESHOLDS: u8 = 2;

fn pack_bools(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

fn u32_of(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::InvalidModel(format!("{what} {v} does not fit in u32")))
}

pub fn serialize(model: &FrozenModel) -> Result<Vec<u8>> {
    model.validate()?;
    let mut b = Vec::new();
    b.extend_from_slice(MAGIC);
    b.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let count = u16::try_from(model.layers.len()).map_err(|_| Error::InvalidModel("more than 65535 layers".into()))?;
    b.extend_from_slice(&count.to_le_bytes());
    match &model.encoding {
        InputEncoding::Median(_) => b.push(ENC_MEDIAN),
        InputEncoding::Int8 => b.push(ENC_INT8),
    }
    for d in model.input_shape {
        b.extend_from_slice(&u32_of(d, "input extent")?.to_le_bytes());
    }
    if let InputEncoding::Median(m) = &model.encoding {
        b.extend_from_slice(m);
    }
    for layer in &model.layers {
        let shape = layer.weights.shape();
        let shape4 = match layer.kind {
            FrozenKind::Conv { .. } => [shape[0], shape[1], shape[2], shape[3]],
            FrozenKind::Dense => [shape[0], shape[1], 1, 1],
        };
        b.push(match layer.kind {
            FrozenKind::Conv { .. } => TAG_CONV,
            FrozenKind::Dense => TAG_DENSE,
        });
        for d in shape4 {
            b.extend_from_slice(&u32_of(d, "weight extent")?.to_le_bytes());
        }
        if let FrozenKind::Conv { stride, pad } = layer.kind {
            b.push(stride);
            b.push(pad);
        }
        let mut flags = 0;
        if layer.pool {
            flags |= FLAG_POOL;
        }
        if layer.thresholds.is_some() {
            flags |= FLAG_THRESHOLDS;
        }
        b.push(flags);
        let rows = layer.weights.reshape(&[layer.out_channels(), layer.fan_in()])?;
        for r in 0..rows.rows() {
            b.extend(rows.row_bytes(r));
        }
        if let Some(t) = &layer.thresholds {
            b.extend(t.t_q.iter().map(|&v| v as u8));
            b.push(t.scale_exp);
            b.extend(pack_bools(&t.gamma_sign));
            b.extend(pack_bools(&t.gamma_zero_mask));
            b.extend(pack_bools(&t.beta_pos));
        }
    }
    let crc = crc32fast::hash(&b);
    b.extend_from_slice(&crc.to_le_bytes());
    Ok(b)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(self.pos, format!("truncated {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let s = self.take(2, what)?;
        Ok(u16::from_le_bytes([s[0], s[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let s = self.take(4, what)?;
        Ok(u32::from_le_bytes([s[0], s[1], s[2], s[3]]) as usize)
    }

    fn bools(&mut self, n: usize, what: &str) -> Result<Vec<bool>> {
        let at = self.pos;
        let s = self.take(n.div_ceil(8), what)?;
        let bits: Vec<bool> = (0..n).map(|i| (s[i / 8] >> (i % 8)) & 1 == 1).collect();
        if !n.is_multiple_of(8) && s[s.len() - 1] >> (n % 8) != 0 {
            return Err(Error::format(at + s.len() - 1, format!("non-zero padding in {what}")));
        }
        Ok(bits)
    }
}

pub fn deserialize(bytes: &[u8]) -> Result<FrozenModel> {
    if bytes.len() < MAGIC.len() || &bytes[..4] != MAGIC {
        return Err(Error::format(0, "bad magic, expected SBNN"));
    }
    if bytes.len() < 4 + 4 + 4 {
        return Err(Error::format(bytes.len(), "file too short"));
    }
    let body = &bytes[..bytes.len() - 4];
    let t = &bytes[bytes.len() - 4..];
    let stored = u32::from_le_bytes([t[0], t[1], t[2], t[3]]);
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }

    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u16("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let count = r.u16("layer count")? as usize;
    let enc_at = r.pos;
    let enc = r.u8("input encoding")?;
    let input_shape = [r.u32("input shape")?, r.u32("input shape")?, r.u32("input shape")?];
    let encoding = match enc {
        ENC_MEDIAN => InputEncoding::Median(r.take(input_shape[0], "medians")?.to_vec()),
        ENC_INT8 => InputEncoding::Int8,
        other => return Err(Error::format(enc_at, format!("unknown input encoding {other}"))),
    };
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let at = r.pos;
        let tag = r.u8("layer tag")?;
        let s = [r.u32("shape")?, r.u32("shape")?, r.u32("shape")?, r.u32("shape")?];
        let (kind, shape) = match tag {
            TAG_CONV => {
                let stride = r.u8("stride")?;
                let pad = r.u8("pad")?;
                (FrozenKind::Conv { stride, pad }, s.to_vec())
            }
            TAG_DENSE => {
                if s[2] != 1 || s[3] != 1 {
                    return Err(Error::format(at + 9, "dense shape must end in 1, 1"));
                }
                (FrozenKind::Dense, vec![s[0], s[1]])
            }
            other => return Err(Error::format(at, format!("unknown layer tag {other}"))),
        };
        let flags_at = r.pos;
        let flags = r.u8("flags")?;
        if flags & !(FLAG_POOL | FLAG_THRESHOLDS) != 0 {
            return Err(Error::format(flags_at, format!("unknown flags {flags:#04x}")));
        }
        let (cout, fan_in) = (shape[0], shape[1..].iter().product::<usize>());
        if cout == 0 || fan_in == 0 {
            return Err(Error::format(at + 1, "empty weight shape"));
        }
        let w_at = r.pos;
        let per = fan_in.div_ceil(8);
        let n_bytes = cout
            .checked_mul(per)
            .ok_or_else(|| Error::format(at + 1, "weight shape overflows"))?;
        let wbytes = r.take(n_bytes, "weights")?;
        let rows =
            BitTensor::from_row_bytes(&[cout, fan_in], wbytes).map_err(|e| Error::format(w_at, e.to_string()))?;
        let weights = rows.reshape(&shape)?;
        let thresholds = if flags & FLAG_THRESHOLDS != 0 {
            let t_q = r.take(cout, "thresholds")?.iter().map(|&v| v as i8).collect();
            let scale_exp = r.u8("scale exponent")?;
            Some(QuantizedThresholds {
                t_q,
                scale_exp,
                gamma_sign: r.bools(cout, "gamma sign bits")?,
                gamma_zero_mask: r.bools(cout, "gamma zero mask")?,
                beta_pos: r.bools(cout, "beta sign bits")?,
            })
        } else {
            None
        };
        layers.push(FrozenLayer {
            kind,
            weights,
            pool: flags & FLAG_POOL != 0,
            thresholds,
        });
    }
    if r.pos != body.len() {
        return Err(Error::format(r.pos, "trailing bytes before checksum"));
    }
    let model = FrozenModel {
        input_shape,
        encoding,
        layers,
    };
    model.validate().map_err(|e| Error::format(12, e.to_string()))?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> FrozenModel {
        FrozenModel {
            input_shape: [1, 4, 4],
            encoding: InputEncoding::Median(vec![100]),
            layers: vec![
                FrozenLayer {
                    kind: FrozenKind::Conv { stride: 1, pad: 1 },
                    weights: BitTensor::from_fn(&[3, 1, 3, 3], |i| i % 3 == 0),
                    pool: true,
                    thresholds: Some(QuantizedThresholds {
                        t_q: vec![-2, 0, 5],
                        scale_exp: 0,
                        gamma_sign: vec![true, false, true],
                        gamma_zero_mask: vec![false, false, true],
                        beta_pos: vec![false, false, true],
                    }),
                },
                FrozenLayer {
                    kind: FrozenKind::Dense,
                    weights: BitTensor::from_fn(&[2, 12], |i| i % 5 < 2),
                    pool: false,
                    thresholds: None,
                },
            ],
        }
    }

    #[test]
    fn round_trip() {
        let m = sample();
        let bytes = serialize(&m).unwrap();
        assert_eq!(&bytes[..4], b"SBNN");
        assert_eq!(deserialize(&bytes).unwrap(), m);
        assert_eq!(serialize(&deserialize(&bytes).unwrap()).unwrap(), bytes);
    }

    #[test]
    fn exact_layout_size() {
        let bytes = serialize(&sample()).unwrap();
        let header = 4 + 2 + 2 + 1 + 12 + 1;
        let conv = 1 + 16 + 2 + 1 + 3 * 2 + (3 + 1 + 3);
        let dense = 1 + 16 + 1 + 2 * 2;
        assert_eq!(bytes.len(), header + conv + dense + 4);
    }

    #[test]
    fn corruption_detected() {
        let mut bytes = serialize(&sample()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(deserialize(&bytes), Err(Error::Format { offset: 0, .. })));
        let mut bytes = serialize(&sample()).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x10;
        assert!(matches!(deserialize(&bytes), Err(Error::Checksum { .. })));
    }

    #[test]
    fn bad_version_reports_offset() {
        let mut bytes = serialize(&sample()).unwrap();
        bytes[4] = 9;
        let n = bytes.len() - 4;
        let crc = crc32fast::hash(&bytes[..n]);
        bytes[n..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(deserialize(&bytes), Err(Error::Format { offset: 4, .. })));
    }
}
