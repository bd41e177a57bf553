//! Bit-field primitives for sub-byte operands.
//!
//! These follow the XpulpV2 `bext`/`bextu`/`bins` semantics: a field is
//! described by `(width, offset)` inside a 32-bit register and is extracted
//! in one step, with sign- or zero-extension. Fields are little-endian: the
//! element with the lowest index sits at the lowest bit offset.

use thiserror::Error;

use crate::precision::Precision;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PackError {
    #[error("invalid bit field: width {width} at offset {offset} in a {container}-bit container")]
    InvalidField { width: u32, offset: u32, container: u32 },
    #[error("code {value} at index {index} is not representable in {width} bits ({kind})")]
    CodeOutOfRange {
        index: usize,
        value: i32,
        width: u32,
        kind: &'static str,
    },
}

fn check_field(width: u32, offset: u32, container: u32) -> Result<(), PackError> {
    if !matches!(width, 2 | 4) || offset + width > container {
        return Err(PackError::InvalidField { width, offset, container });
    }
    Ok(())
}

#[inline(always)]
pub(crate) fn extract_signed(word: u32, width: u32, offset: u32) -> i32 {
    ((word << (32 - offset - width)) as i32) >> (32 - width)
}

#[inline(always)]
pub(crate) fn extract_unsigned(word: u32, width: u32, offset: u32) -> u32 {
    (word >> offset) & ((1u32 << width) - 1)
}

/// Extracts the `width`-bit field at `offset` and sign-extends it to 8 bits.
pub fn bit_extract(word: u32, width: u32, offset: u32) -> Result<i8, PackError> {
    check_field(width, offset, 32)?;
    Ok(extract_signed(word, width, offset) as i8)
}

/// Extracts the `width`-bit field at `offset`, zero-extended.
pub fn bit_extract_unsigned(word: u32, width: u32, offset: u32) -> Result<u8, PackError> {
    check_field(width, offset, 32)?;
    Ok(extract_unsigned(word, width, offset) as u8)
}

/// Replaces the `width`-bit field at `offset` of `dest` with the low bits of
/// `src`. Bits outside the field are left untouched.
pub fn bit_insert(dest: u8, src: u8, width: u32, offset: u32) -> Result<u8, PackError> {
    check_field(width, offset, 8)?;
    Ok(insert(dest, src as u32, width, offset))
}

#[inline(always)]
pub(crate) fn insert(dest: u8, src: u32, width: u32, offset: u32) -> u8 {
    let mask = (((1u32 << width) - 1) << offset) as u8;
    (dest & !mask) | (((src << offset) as u8) & mask)
}

/// Splits a 32-bit word into `32 / width` operands, lowest offset first.
///
/// Width 8 is a plain byte-lane reinterpretation.
pub fn unpack_word(word: u32, width: Precision, signed: bool) -> Vec<i32> {
    let w = width.bits();
    (0..width.per_word() as u32)
        .map(|i| {
            let off = i * w;
            if signed {
                extract_signed(word, w, off)
            } else {
                extract_unsigned(word, w, off) as i32
            }
        })
        .collect()
}

/// Packs codes at `width` bits each, element `i` at bit `(i * width) % 8` of
/// byte `i * width / 8`. A trailing partial byte is zero-filled.
pub fn pack_values(values: &[i32], width: Precision, signed: bool) -> Result<Vec<u8>, PackError> {
    let w = width.bits();
    let (lo, hi) = width.code_range(signed);
    let mut out = vec![0u8; (values.len() * w as usize).div_ceil(8)];
    for (i, &v) in values.iter().enumerate() {
        if v < lo || v > hi {
            return Err(PackError::CodeOutOfRange {
                index: i,
                value: v,
                width: w,
                kind: if signed { "signed" } else { "unsigned" },
            });
        }
        let bit = i * w as usize;
        let byte = &mut out[bit / 8];
        *byte = if w == 8 { v as u8 } else { insert(*byte, v as u32, w, (bit % 8) as u32) };
    }
    Ok(out)
}

/// Unpacks the first `out.len()` zero-extended operands of `src`.
///
/// Whole 32-bit words are consumed with one load each, the tail byte-wise.
pub fn unpack_unsigned_into(src: &[u8], width: Precision, out: &mut [u8]) {
    if width == Precision::Bits8 {
        out.copy_from_slice(&src[..out.len()]);
        return;
    }
    let w = width.bits();
    let per_word = width.per_word();
    let mut chunks = out.chunks_mut(per_word);
    let mut words = src.chunks(4);
    for dst in &mut chunks {
        let bytes = words.next().expect("source shorter than requested operand count");
        let word = load_le(bytes);
        for (i, d) in dst.iter_mut().enumerate() {
            *d = extract_unsigned(word, w, i as u32 * w) as u8;
        }
    }
}

/// Unpacks the first `out.len()` sign-extended operands of `src`.
pub fn unpack_signed_into(src: &[u8], width: Precision, out: &mut [i8]) {
    if width == Precision::Bits8 {
        for (d, &s) in out.iter_mut().zip(src) {
            *d = s as i8;
        }
        return;
    }
    let w = width.bits();
    let per_word = width.per_word();
    let mut words = src.chunks(4);
    for dst in out.chunks_mut(per_word) {
        let bytes = words.next().expect("source shorter than requested operand count");
        let word = load_le(bytes);
        for (i, d) in dst.iter_mut().enumerate() {
            *d = extract_signed(word, w, i as u32 * w) as i8;
        }
    }
}

/// Little-endian load of up to four bytes, zero-padded.
#[inline(always)]
pub(crate) fn load_le(bytes: &[u8]) -> u32 {
    match bytes.len() {
        4 => u32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]),
        _ => {
            let mut b = [0u8; 4];
            b[..bytes.len()].copy_from_slice(bytes);
            u32::from_le_bytes(b)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn extract_examples() {
        assert_eq!(bit_extract(0x0000_0021, 4, 0).unwrap(), 1);
        assert_eq!(bit_extract(0x0000_0021, 4, 4).unwrap(), 2);
        assert_eq!(bit_extract(0x0000_00F0, 4, 4).unwrap(), -1);
        assert_eq!(bit_extract(0xC000_0000, 2, 30).unwrap(), -1);
        assert_eq!(bit_extract(0x4000_0000, 2, 30).unwrap(), 1);
        assert_eq!(bit_extract(0x8000_0000, 2, 30).unwrap(), -2);
    }

    #[test]
    fn extract_unsigned_examples() {
        assert_eq!(bit_extract_unsigned(0x0000_00F0, 4, 4).unwrap(), 15);
        assert_eq!(bit_extract_unsigned(0, 2, 10).unwrap(), 0);
        assert_eq!(bit_extract_unsigned(0xC000_0000, 2, 30).unwrap(), 3);
    }

    #[test]
    fn invalid_fields_rejected() {
        assert!(bit_extract(0, 3, 0).is_err());
        assert!(bit_extract(0, 8, 0).is_err());
        assert!(bit_extract(0, 4, 29).is_err());
        assert!(bit_extract_unsigned(0, 2, 31).is_err());
        assert!(bit_insert(0, 0, 4, 5).is_err());
        assert!(bit_insert(0, 0, 1, 0).is_err());
    }

    #[test]
    fn insert_examples() {
        assert_eq!(bit_insert(0x0F, 0xA, 4, 4).unwrap(), 0xAF);
        assert_eq!(bit_insert(0xFF, 0, 2, 0).unwrap(), 0xFC);
        assert_eq!(bit_insert(0x00, 3, 2, 6).unwrap(), 0xC0);
        // only the low `width` bits of src are used
        assert_eq!(bit_insert(0x00, 0xFF, 2, 2).unwrap(), 0x0C);
    }

    #[test]
    fn unpack_word_examples() {
        assert_eq!(unpack_word(0x7654_3210, Precision::Bits4, true), vec![0, 1, 2, 3, 4, 5, 6, 7]);
        assert_eq!(
            unpack_word(0xFEDC_BA98, Precision::Bits4, true),
            vec![-8, -7, -6, -5, -4, -3, -2, -1]
        );
        assert_eq!(unpack_word(0xDEAD_BEEF, Precision::Bits2, false).len(), 16);
        for p in Precision::ALL {
            assert!(unpack_word(0, p, true).iter().all(|&v| v == 0));
        }
        assert_eq!(unpack_word(0x80FF_0102, Precision::Bits8, true), vec![2, 1, -1, -128]);
        assert_eq!(unpack_word(0x80FF_0102, Precision::Bits8, false), vec![2, 1, 255, 128]);
    }

    #[test]
    fn pack_examples() {
        assert_eq!(pack_values(&[1, 2], Precision::Bits4, false).unwrap(), vec![0x21]);
        assert_eq!(pack_values(&[3, 3, 3, 3], Precision::Bits2, false).unwrap(), vec![0xFF]);
        assert_eq!(pack_values(&[-1, 0], Precision::Bits4, true).unwrap(), vec![0x0F]);
        assert_eq!(pack_values(&[1, 2, 3], Precision::Bits4, false).unwrap(), vec![0x21, 0x03]);
    }

    #[test]
    fn pack_rejects_out_of_range() {
        assert!(matches!(
            pack_values(&[0, 16], Precision::Bits4, false),
            Err(PackError::CodeOutOfRange { index: 1, value: 16, .. })
        ));
        assert!(pack_values(&[-3], Precision::Bits2, true).is_err());
        assert!(pack_values(&[2], Precision::Bits2, true).is_err());
        assert!(pack_values(&[-1], Precision::Bits8, false).is_err());
    }

    #[test]
    fn exhaustive_byte_roundtrip() {
        for p in [Precision::Bits2, Precision::Bits4] {
            for signed in [false, true] {
                for byte in 0..=255u8 {
                    let vals = unpack_word(byte as u32, p, signed);
                    let vals = &vals[..p.per_byte()];
                    assert_eq!(pack_values(vals, p, signed).unwrap(), vec![byte]);
                }
            }
        }
    }

    #[test]
    fn bulk_unpack_matches_word_unpack() {
        let src: Vec<u8> = (0..11u8).map(|i| i.wrapping_mul(37).wrapping_add(5)).collect();
        for p in Precision::ALL {
            let n = src.len() * p.per_byte() - 1;
            let mut u = vec![0u8; n];
            let mut s = vec![0i8; n];
            unpack_unsigned_into(&src, p, &mut u);
            unpack_signed_into(&src, p, &mut s);
            let mut expect_u = Vec::new();
            let mut expect_s = Vec::new();
            for chunk in src.chunks(4) {
                let word = load_le(chunk);
                let lanes = chunk.len() * p.per_byte();
                expect_u.extend_from_slice(&unpack_word(word, p, false)[..lanes]);
                expect_s.extend_from_slice(&unpack_word(word, p, true)[..lanes]);
            }
            assert_eq!(u.iter().map(|&v| v as i32).collect::<Vec<_>>(), expect_u[..n]);
            assert_eq!(s.iter().map(|&v| v as i32).collect::<Vec<_>>(), expect_s[..n]);
        }
    }

    proptest! {
        #[test]
        fn word_roundtrip(word in any::<u32>(), signed in any::<bool>()) {
            for p in Precision::ALL {
                let vals = unpack_word(word, p, signed);
                prop_assert_eq!(pack_values(&vals, p, signed).unwrap(), word.to_le_bytes().to_vec());
            }
        }

        #[test]
        fn insert_touches_only_its_field(dest in any::<u8>(), src in any::<u8>(), wide in any::<bool>(), slot in 0u32..4) {
            let width = if wide { 4 } else { 2 };
            let offset = (slot * width) % 8;
            let out = bit_insert(dest, src, width, offset).unwrap();
            let diff = (dest ^ out) as u32;
            prop_assert!(diff.count_ones() <= width);
            prop_assert_eq!(diff & !(((1 << width) - 1) << offset), 0);
            prop_assert_eq!(bit_extract_unsigned(out as u32, width, offset).unwrap(), src & ((1 << width) - 1));
        }

        #[test]
        fn signed_and_unsigned_extract_agree(word in any::<u32>(), wide in any::<bool>(), off in 0u32..31) {
            let width = if wide { 4 } else { 2 };
            prop_assume!(off + width <= 32);
            let s = bit_extract(word, width, off).unwrap();
            let u = bit_extract_unsigned(word, width, off).unwrap();
            prop_assert_eq!((s as u8) & ((1 << width) - 1), u);
        }
    }
}
