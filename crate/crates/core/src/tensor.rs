//! Packed HWC tensors and the PQT1 file format.
//!
//! Channels vary fastest. Each pixel's channel run is padded to a whole
//! byte, so pixel `(y, x)` starts at byte `(y * w + x) * pixel_stride` with
//! `pixel_stride = ceil(c * bits / 8)`. Padding bits are always zero.
//!
//! PQT1 layout, all little-endian:
//!
//! | offset | size | field                      |
//! |--------|------|----------------------------|
//! | 0      | 4    | magic `b"PQT1"`            |
//! | 4      | 4    | n_bits (2, 4 or 8)         |
//! | 8      | 4    | signed (0 or 1)            |
//! | 12     | 4    | h                          |
//! | 16     | 4    | w                          |
//! | 20     | 4    | c                          |
//! | 24     | 8    | eps (f64)                  |
//! | 32     | 8    | alpha (f64)                |
//! | 40     | ..   | payload, `h * w * stride`  |

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::packing::{self, PackError};
use crate::precision::Precision;
use crate::quantization::{QuantError, QuantParams};

pub const MAGIC: &[u8; 4] = b"PQT1";
pub const HEADER_LEN: usize = 40;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("invalid shape: {0}")]
    Shape(String),
    #[error("index ({y}, {x}, {ch}) out of range for {h}x{w}x{c}")]
    Index {
        y: usize,
        x: usize,
        ch: usize,
        h: usize,
        w: usize,
        c: usize,
    },
    #[error(transparent)]
    Pack(#[from] PackError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error("malformed PQT1 data at byte {offset}: {reason}")]
    Format { offset: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn format_err(offset: usize, reason: impl Into<String>) -> TensorError {
    TensorError::Format { offset, reason: reason.into() }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PackedTensor {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub precision: Precision,
    pub signed: bool,
    pub quant: QuantParams,
    data: Vec<u8>,
}

impl PackedTensor {
    /// All-zero tensor; precision and signedness come from `quant`.
    pub fn zeros(h: usize, w: usize, c: usize, quant: QuantParams) -> Result<Self, TensorError> {
        if h == 0 || w == 0 || c == 0 {
            return Err(TensorError::Shape(format!("dimensions must be positive, got {h}x{w}x{c}")));
        }
        let precision = quant
            .precision()
            .ok_or(TensorError::Quant(QuantError::UnsupportedWidth(quant.n_bits)))?;
        let stride = pixel_stride(c, precision);
        Ok(Self {
            h,
            w,
            c,
            precision,
            signed: quant.signed,
            quant,
            data: vec![0; h * w * stride],
        })
    }

    /// Builds a tensor from codes listed in HWC order.
    pub fn from_codes(h: usize, w: usize, c: usize, quant: QuantParams, codes: &[i32]) -> Result<Self, TensorError> {
        let mut t = Self::zeros(h, w, c, quant)?;
        if codes.len() != h * w * c {
            return Err(TensorError::Shape(format!("expected {} codes, got {}", h * w * c, codes.len())));
        }
        let stride = t.pixel_stride();
        for (pixel, run) in codes.chunks(c).enumerate() {
            let bytes = packing::pack_values(run, t.precision, t.signed)?;
            t.data[pixel * stride..(pixel + 1) * stride].copy_from_slice(&bytes);
        }
        Ok(t)
    }

    pub fn pixel_stride(&self) -> usize {
        pixel_stride(self.c, self.precision)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.h * self.w * self.c
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Packed channel run of one pixel.
    pub fn pixel(&self, y: usize, x: usize) -> &[u8] {
        let s = self.pixel_stride();
        let start = (y * self.w + x) * s;
        &self.data[start..start + s]
    }

    fn check_index(&self, y: usize, x: usize, ch: usize) -> Result<(), TensorError> {
        if y >= self.h || x >= self.w || ch >= self.c {
            return Err(TensorError::Index { y, x, ch, h: self.h, w: self.w, c: self.c });
        }
        Ok(())
    }

    /// Byte index and bit offset of element `(y, x, ch)`.
    pub fn element_index(&self, y: usize, x: usize, ch: usize) -> Result<(usize, u32), TensorError> {
        self.check_index(y, x, ch)?;
        let bits = ch * self.precision.bits() as usize;
        Ok(((y * self.w + x) * self.pixel_stride() + bits / 8, (bits % 8) as u32))
    }

    pub fn get(&self, y: usize, x: usize, ch: usize) -> Result<i32, TensorError> {
        let (byte, offset) = self.element_index(y, x, ch)?;
        let b = self.data[byte] as u32;
        Ok(match (self.precision, self.signed) {
            (Precision::Bits8, true) => b as u8 as i8 as i32,
            (Precision::Bits8, false) => b as i32,
            (p, true) => packing::bit_extract(b, p.bits(), offset)? as i32,
            (p, false) => packing::bit_extract_unsigned(b, p.bits(), offset)? as i32,
        })
    }

    pub fn set(&mut self, y: usize, x: usize, ch: usize, code: i32) -> Result<(), TensorError> {
        let (byte, offset) = self.element_index(y, x, ch)?;
        let (lo, hi) = self.precision.code_range(self.signed);
        if code < lo || code > hi {
            return Err(PackError::CodeOutOfRange {
                index: ch,
                value: code,
                width: self.precision.bits(),
                kind: if self.signed { "signed" } else { "unsigned" },
            }
            .into());
        }
        let slot = &mut self.data[byte];
        *slot = match self.precision {
            Precision::Bits8 => code as u8,
            p => packing::bit_insert(*slot, code as u8, p.bits(), offset)?,
        };
        Ok(())
    }

    /// All codes in HWC order.
    pub fn to_codes(&self) -> Vec<i32> {
        let mut out = Vec::with_capacity(self.len());
        for y in 0..self.h {
            for x in 0..self.w {
                for ch in 0..self.c {
                    out.push(self.get(y, x, ch).expect("index in range"));
                }
            }
        }
        out
    }

    pub fn payload_len(&self) -> usize {
        self.data.len()
    }

    pub fn write_to(&self, mut out: impl Write) -> Result<(), TensorError> {
        out.write_all(&self.header())?;
        out.write_all(&self.data)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = Vec::with_capacity(HEADER_LEN + self.data.len());
        self.write_to(&mut v).expect("writing to a Vec cannot fail");
        v
    }

    fn header(&self) -> [u8; HEADER_LEN] {
        let mut h = [0u8; HEADER_LEN];
        h[0..4].copy_from_slice(MAGIC);
        let fields = [
            self.precision.bits(),
            self.signed as u32,
            self.h as u32,
            self.w as u32,
            self.c as u32,
        ];
        for (i, f) in fields.iter().enumerate() {
            h[4 + 4 * i..8 + 4 * i].copy_from_slice(&f.to_le_bytes());
        }
        h[24..32].copy_from_slice(&self.quant.eps.to_le_bytes());
        h[32..40].copy_from_slice(&self.quant.alpha.to_le_bytes());
        h
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TensorError> {
        if bytes.len() < HEADER_LEN {
            return Err(format_err(bytes.len(), format!("truncated header, need {HEADER_LEN} bytes")));
        }
        if &bytes[0..4] != MAGIC {
            return Err(format_err(0, "bad magic, expected PQT1"));
        }
        let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        let f64_at = |off: usize| f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
        let n_bits = u32_at(4);
        let precision = Precision::from_bits(n_bits).ok_or_else(|| format_err(4, format!("unsupported n_bits {n_bits}")))?;
        let signed = match u32_at(8) {
            0 => false,
            1 => true,
            v => return Err(format_err(8, format!("signed flag must be 0 or 1, got {v}"))),
        };
        let (h, w, c) = (u32_at(12) as usize, u32_at(16) as usize, u32_at(20) as usize);
        for (off, v) in [(12, h), (16, w), (20, c)] {
            if v == 0 {
                return Err(format_err(off, "zero dimension"));
            }
        }
        let (eps, alpha) = (f64_at(24), f64_at(32));
        let quant = QuantParams::from_step(n_bits, alpha, eps, signed).map_err(|e| format_err(24, e.to_string()))?;
        let stride = pixel_stride(c, precision);
        let expected = h
            .checked_mul(w)
            .and_then(|p| p.checked_mul(stride))
            .ok_or_else(|| format_err(12, "dimensions overflow"))?;
        let payload = &bytes[HEADER_LEN..];
        if payload.len() < expected {
            return Err(format_err(
                bytes.len(),
                format!("truncated payload, expected {expected} bytes, got {}", payload.len()),
            ));
        }
        if payload.len() > expected {
            return Err(format_err(
                HEADER_LEN + expected,
                format!("{} trailing bytes after payload", payload.len() - expected),
            ));
        }
        let used_bits = (c * n_bits as usize) % 8;
        if used_bits != 0 {
            let pad_mask = !((1u16 << used_bits) - 1) as u8;
            for pixel in 0..h * w {
                let last = (pixel + 1) * stride - 1;
                if payload[last] & pad_mask != 0 {
                    return Err(format_err(HEADER_LEN + last, "non-zero padding bits"));
                }
            }
        }
        Ok(Self { h, w, c, precision, signed, quant, data: payload.to_vec() })
    }

    pub fn read_from(mut input: impl Read) -> Result<Self, TensorError> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<(), TensorError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self, TensorError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

pub fn pixel_stride(c: usize, precision: Precision) -> usize {
    (c * precision.bits() as usize).div_ceil(8)
}

/// Convolution filters of logical shape `(out_c, kh, kw, in_c)`.
///
/// Stored as a packed tensor of `out_c` rows, one pixel each, whose channel
/// run is the flattened filter in `(ky, kx, ch)` order. That is the same
/// order im2col produces, so a filter is one contiguous byte run.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightTensor {
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub in_c: usize,
    pub packed: PackedTensor,
}

impl WeightTensor {
    pub fn from_codes(
        out_c: usize,
        kh: usize,
        kw: usize,
        in_c: usize,
        quant: QuantParams,
        codes: &[i32],
    ) -> Result<Self, TensorError> {
        let packed = PackedTensor::from_codes(out_c, 1, kh * kw * in_c, quant, codes)?;
        Self::from_packed(packed, kh, kw, in_c)
    }

    pub fn from_packed(packed: PackedTensor, kh: usize, kw: usize, in_c: usize) -> Result<Self, TensorError> {
        if packed.w != 1 || packed.c != kh * kw * in_c {
            return Err(TensorError::Shape(format!(
                "weight tensor {}x{}x{} does not hold {kh}x{kw}x{in_c} filters",
                packed.h, packed.w, packed.c
            )));
        }
        Ok(Self { out_c: packed.h, kh, kw, in_c, packed })
    }

    pub fn precision(&self) -> Precision {
        self.packed.precision
    }

    pub fn filter_len(&self) -> usize {
        self.packed.c
    }

    /// Packed bytes of filter `oc`.
    pub fn filter(&self, oc: usize) -> &[u8] {
        self.packed.pixel(oc, 0)
    }

    pub fn get(&self, oc: usize, ky: usize, kx: usize, ch: usize) -> Result<i32, TensorError> {
        if ky >= self.kh || kx >= self.kw || ch >= self.in_c {
            return Err(TensorError::Shape(format!("filter tap ({ky}, {kx}, {ch}) out of range")));
        }
        self.packed.get(oc, 0, (ky * self.kw + kx) * self.in_c + ch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn fm(bits: u32) -> QuantParams {
        QuantParams::feature_map(bits, 1.0).unwrap()
    }

    #[test]
    fn element_index_examples() {
        let t = PackedTensor::zeros(1, 2, 3, fm(4)).unwrap();
        assert_eq!(t.pixel_stride(), 2);
        assert_eq!(t.element_index(0, 0, 0).unwrap(), (0, 0));
        assert_eq!(t.element_index(0, 1, 2).unwrap(), (3, 0));
        assert_eq!(t.element_index(0, 1, 1).unwrap(), (2, 4));
        assert!(t.element_index(1, 0, 0).is_err());
        assert!(t.element_index(0, 0, 3).is_err());

        let t = PackedTensor::zeros(3, 4, 5, fm(8)).unwrap();
        for y in 0..3 {
            for x in 0..4 {
                for ch in 0..5 {
                    assert_eq!(t.element_index(y, x, ch).unwrap(), ((y * 4 + x) * 5 + ch, 0));
                }
            }
        }
    }

    #[test]
    fn set_get_locality() {
        let mut t = PackedTensor::zeros(2, 2, 6, fm(2)).unwrap();
        t.set(1, 0, 3, 2).unwrap();
        assert_eq!(t.get(1, 0, 3).unwrap(), 2);
        assert_eq!(t.to_codes().iter().filter(|&&v| v != 0).count(), 1);
        assert!(t.set(0, 0, 0, 4).is_err());
        assert!(t.set(0, 0, 0, -1).is_err());

        let mut s = PackedTensor::zeros(1, 1, 3, QuantParams::weights(4, -1.0, 1.0).unwrap()).unwrap();
        s.set(0, 0, 1, -8).unwrap();
        assert_eq!(s.to_codes(), vec![0, -8, 0]);
        assert!(s.set(0, 0, 0, 8).is_err());
    }

    #[test]
    fn fill_with_0xa_gives_0xaa() {
        let codes = vec![0xA; 4 * 3 * 8];
        let t = PackedTensor::from_codes(4, 3, 8, fm(4), &codes).unwrap();
        assert!(t.data().iter().all(|&b| b == 0xAA));
    }

    #[test]
    fn equal_contents_give_identical_bytes() {
        let codes: Vec<i32> = (0..2 * 2 * 5).map(|i| i % 4).collect();
        let a = PackedTensor::from_codes(2, 2, 5, fm(2), &codes).unwrap();
        let mut b = PackedTensor::zeros(2, 2, 5, fm(2)).unwrap();
        for (i, &v) in codes.iter().enumerate() {
            b.set(i / 10, (i / 5) % 2, i % 5, v).unwrap();
        }
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn reference_geometry_header() {
        let t = PackedTensor::zeros(16, 16, 32, fm(8)).unwrap();
        assert_eq!(t.payload_len(), 8192);
        let bytes = t.to_bytes();
        assert_eq!(bytes.len(), HEADER_LEN + 8192);
        assert_eq!(&bytes[0..4], b"PQT1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 8);
        assert_eq!(u32::from_le_bytes(bytes[20..24].try_into().unwrap()), 32);
    }

    #[test]
    fn malformed_files_rejected() {
        let t = PackedTensor::from_codes(1, 2, 3, fm(4), &[1, 2, 3, 4, 5, 6]).unwrap();
        let good = t.to_bytes();
        assert_eq!(PackedTensor::from_bytes(&good).unwrap(), t);

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(PackedTensor::from_bytes(&bad), Err(TensorError::Format { offset: 0, .. })));

        let truncated = &good[..good.len() - 1];
        assert!(matches!(PackedTensor::from_bytes(truncated), Err(TensorError::Format { .. })));
        assert!(matches!(PackedTensor::from_bytes(&good[..10]), Err(TensorError::Format { offset: 10, .. })));

        let mut long = good.clone();
        long.push(0);
        assert!(matches!(
            PackedTensor::from_bytes(&long),
            Err(TensorError::Format { offset, .. }) if offset == good.len()
        ));

        let mut bits = good.clone();
        bits[4] = 3;
        assert!(matches!(PackedTensor::from_bytes(&bits), Err(TensorError::Format { offset: 4, .. })));

        // c = 3 at 4 bits leaves the high nibble of each pixel's second byte as padding
        let mut pad = good.clone();
        pad[HEADER_LEN + 1] |= 0xF0;
        assert!(matches!(
            PackedTensor::from_bytes(&pad),
            Err(TensorError::Format { offset, .. }) if offset == HEADER_LEN + 1
        ));
    }

    #[test]
    fn weight_tensor_layout() {
        let codes: Vec<i32> = (0..2 * 3 * 3 * 4).map(|i| (i % 15) - 7).collect();
        let w = WeightTensor::from_codes(2, 3, 3, 4, QuantParams::weights(4, -1.0, 1.0).unwrap(), &codes).unwrap();
        assert_eq!(w.filter_len(), 36);
        assert_eq!(w.filter(1).len(), 18);
        assert_eq!(w.get(1, 2, 1, 3).unwrap(), codes[36 + (2 * 3 + 1) * 4 + 3]);
        assert!(WeightTensor::from_packed(w.packed.clone(), 3, 3, 3).is_err());
    }

    #[test]
    fn file_roundtrip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pqt");
        let q = QuantParams::weights(2, -0.5, 0.5).unwrap();
        let t = PackedTensor::from_codes(2, 1, 3, q, &[-2, 1, 0, 1, -1, -2]).unwrap();
        t.write_file(&path).unwrap();
        assert_eq!(PackedTensor::read_file(&path).unwrap(), t);
    }

    proptest! {
        #[test]
        fn bytes_roundtrip(h in 1usize..5, w in 1usize..5, c in 1usize..9, bits in prop::sample::select(vec![2u32, 4, 8]),
                           signed in any::<bool>(), seed in any::<u64>()) {
            let q = if signed { QuantParams::weights(bits, -1.0, 1.0).unwrap() } else { fm(bits) };
            let p = Precision::from_bits(bits).unwrap();
            let (lo, hi) = p.code_range(signed);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let codes: Vec<i32> = (0..h * w * c).map(|_| rng.gen_range(lo..=hi)).collect();
            let t = PackedTensor::from_codes(h, w, c, q, &codes).unwrap();
            prop_assert_eq!(t.to_codes(), codes);
            let back = PackedTensor::from_bytes(&t.to_bytes()).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
