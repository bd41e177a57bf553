//! Brute-force reference convolution.
//!
//! Shares no unpacking, tiling or requantization code with [`crate::kernels`]:
//! packed codes are decoded with plain integer arithmetic, the convolution is
//! a direct nested loop with 64-bit accumulation, and the output codes come
//! from the floating-point affine quant definition.

use std::fmt;

use thiserror::Error;

use crate::kernels::{LayerConfig, LayerQuant};
use crate::quantization::{AffineQuant, QuantError};
use crate::tensor::{PackedTensor, WeightTensor};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("accumulator {value} at output ({y}, {x}, {ch}) does not fit 32 bits")]
    Overflow { y: usize, x: usize, ch: usize, value: i64 },
    #[error(transparent)]
    Quant(#[from] QuantError),
}

/// Unpacked HWC tensor of integer codes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntTensor {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub values: Vec<i32>,
}

impl IntTensor {
    pub fn new(h: usize, w: usize, c: usize, values: Vec<i32>) -> Self {
        assert_eq!(values.len(), h * w * c, "value count does not match shape");
        Self { h, w, c, values }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, ch: usize) -> i32 {
        self.values[(y * self.w + x) * self.c + ch]
    }

    /// Decodes a packed tensor without the packing primitives.
    pub fn from_packed(t: &PackedTensor) -> Self {
        let bits = t.precision.bits() as usize;
        let stride = (t.c * bits).div_ceil(8);
        let span = 1i32 << bits;
        let data = t.data();
        let mut values = Vec::with_capacity(t.h * t.w * t.c);
        for pixel in 0..t.h * t.w {
            for ch in 0..t.c {
                let bit = ch * bits;
                let byte = data[pixel * stride + bit / 8] as i32;
                let mut v = (byte / (1 << (bit % 8))) % span;
                if t.signed && v >= span / 2 {
                    v -= span;
                }
                values.push(v);
            }
        }
        Self::new(t.h, t.w, t.c, values)
    }
}

/// Filters in `(out_c, kh, kw, in_c)` order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntWeights {
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub in_c: usize,
    pub values: Vec<i32>,
}

impl IntWeights {
    pub fn new(out_c: usize, kh: usize, kw: usize, in_c: usize, values: Vec<i32>) -> Self {
        assert_eq!(values.len(), out_c * kh * kw * in_c, "value count does not match shape");
        Self { out_c, kh, kw, in_c, values }
    }

    #[inline]
    pub fn at(&self, oc: usize, ky: usize, kx: usize, ch: usize) -> i32 {
        self.values[((oc * self.kh + ky) * self.kw + kx) * self.in_c + ch]
    }

    pub fn from_weight_tensor(w: &WeightTensor) -> Self {
        let flat = IntTensor::from_packed(&w.packed);
        Self::new(w.out_c, w.kh, w.kw, w.in_c, flat.values)
    }
}

fn check_shapes(input: &IntTensor, weights: &IntWeights, cfg: &LayerConfig) -> Result<(), OracleError> {
    if (input.h, input.w, input.c) != (cfg.in_h, cfg.in_w, cfg.in_c) {
        return Err(OracleError::Shape(format!("input {}x{}x{}", input.h, input.w, input.c)));
    }
    if (weights.out_c, weights.kh, weights.kw, weights.in_c) != (cfg.out_c, cfg.kh, cfg.kw, cfg.in_c) {
        return Err(OracleError::Shape(format!(
            "weights {}x{}x{}x{}",
            weights.out_c, weights.kh, weights.kw, weights.in_c
        )));
    }
    Ok(())
}

/// Plain integer convolution: the accumulators before requantization.
pub fn conv_linear_reference(input: &IntTensor, weights: &IntWeights, cfg: &LayerConfig) -> Result<IntTensor, OracleError> {
    check_shapes(input, weights, cfg)?;
    let (out_h, out_w) = (cfg.out_h(), cfg.out_w());
    let mut values = Vec::with_capacity(out_h * out_w * cfg.out_c);
    for y in 0..out_h {
        for x in 0..out_w {
            for oc in 0..cfg.out_c {
                let mut sum: i64 = 0;
                for ky in 0..cfg.kh {
                    for kx in 0..cfg.kw {
                        let iy = (y * cfg.stride + ky) as i64 - cfg.pad as i64;
                        let ix = (x * cfg.stride + kx) as i64 - cfg.pad as i64;
                        if iy < 0 || ix < 0 || iy >= cfg.in_h as i64 || ix >= cfg.in_w as i64 {
                            continue;
                        }
                        for ch in 0..cfg.in_c {
                            sum += weights.at(oc, ky, kx, ch) as i64 * input.at(iy as usize, ix as usize, ch) as i64;
                        }
                    }
                }
                let value = i32::try_from(sum).map_err(|_| OracleError::Overflow { y, x, ch: oc, value: sum })?;
                values.push(value);
            }
        }
    }
    Ok(IntTensor::new(out_h, out_w, cfg.out_c, values))
}

/// Direct convolution followed by the affine quant of every accumulator.
pub fn conv_reference(
    input: &IntTensor,
    weights: &IntWeights,
    cfg: &LayerConfig,
    quant: &LayerQuant,
) -> Result<IntTensor, OracleError> {
    let mut acc = conv_linear_reference(input, weights, cfg)?;
    let eps_phi = quant.eps_phi();
    let per_channel: Vec<AffineQuant> = (0..cfg.out_c)
        .map(|oc| AffineQuant::new(&quant.output, eps_phi, oc))
        .collect::<Result<_, _>>()?;
    for (i, v) in acc.values.iter_mut().enumerate() {
        *v = per_channel[i % cfg.out_c].apply(*v as i64);
    }
    Ok(acc)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mismatch {
    pub y: usize,
    pub x: usize,
    pub ch: usize,
    pub got: i32,
    pub expected: i32,
}

impl fmt::Display for Mismatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "mismatch at (y={}, x={}, ch={}): got {}, expected {}",
            self.y, self.x, self.ch, self.got, self.expected
        )
    }
}

/// First differing element in HWC order, or `None` when equal.
pub fn compare_tensors(a: &PackedTensor, b: &IntTensor) -> Result<Option<Mismatch>, OracleError> {
    if (a.h, a.w, a.c) != (b.h, b.w, b.c) {
        return Err(OracleError::Shape(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.h, a.w, a.c, b.h, b.w, b.c
        )));
    }
    let got = IntTensor::from_packed(a);
    Ok(got
        .values
        .iter()
        .zip(&b.values)
        .position(|(x, y)| x != y)
        .map(|i| Mismatch {
            y: i / (b.w * b.c),
            x: (i / b.c) % b.w,
            ch: i % b.c,
            got: got.values[i],
            expected: b.values[i],
        }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::precision::Precision;
    use crate::quantization::QuantParams;

    fn unit_layer(prec_out: Precision) -> (LayerConfig, LayerQuant) {
        let cfg = LayerConfig {
            in_h: 1,
            in_w: 1,
            in_c: 1,
            out_c: 1,
            kh: 1,
            kw: 1,
            stride: 1,
            pad: 0,
            prec_in: Precision::Bits8,
            prec_w: Precision::Bits8,
            prec_out,
        };
        let quant = LayerQuant {
            input: QuantParams::from_step(8, 0.0, 1.0, false).unwrap(),
            weights: QuantParams::from_step(8, -128.0, 1.0, true).unwrap(),
            output: QuantParams::from_step(prec_out.bits(), 0.0, 1.0, false).unwrap(),
        };
        (cfg, quant)
    }

    #[test]
    fn single_multiply() {
        let (cfg, quant) = unit_layer(Precision::Bits8);
        let out = conv_reference(
            &IntTensor::new(1, 1, 1, vec![3]),
            &IntWeights::new(1, 1, 1, 1, vec![2]),
            &cfg,
            &quant,
        )
        .unwrap();
        assert_eq!(out.values, vec![6]);
    }

    #[test]
    fn zero_input_gives_lambda_constant() {
        let (mut cfg, mut quant) = unit_layer(Precision::Bits4);
        cfg.in_h = 3;
        cfg.in_w = 3;
        cfg.kh = 3;
        cfg.kw = 3;
        cfg.pad = 1;
        quant.output = quant.output.with_normalization(vec![1.0], vec![5.5]).unwrap();
        let out = conv_reference(
            &IntTensor::new(3, 3, 1, vec![0; 9]),
            &IntWeights::new(1, 3, 3, 1, vec![7; 9]),
            &cfg,
            &quant,
        )
        .unwrap();
        assert!(out.values.iter().all(|&v| v == 5));
    }

    #[test]
    fn identity_quant_equals_textbook_convolution() {
        // textbook: scatter each input tap into the outputs it contributes to
        let cfg = LayerConfig {
            in_h: 5,
            in_w: 7,
            in_c: 3,
            out_c: 2,
            kh: 3,
            kw: 3,
            stride: 2,
            pad: 1,
            prec_in: Precision::Bits8,
            prec_w: Precision::Bits8,
            prec_out: Precision::Bits8,
        };
        let input = IntTensor::new(5, 7, 3, (0..105).map(|i| (i * 37) % 256).collect());
        let weights = IntWeights::new(2, 3, 3, 3, (0..54).map(|i| (i * 11) % 256 - 128).collect());
        let got = conv_linear_reference(&input, &weights, &cfg).unwrap();
        let (oh, ow) = (cfg.out_h(), cfg.out_w());
        let mut expect = vec![0i64; oh * ow * 2];
        for iy in 0..5i64 {
            for ix in 0..7i64 {
                for ch in 0..3 {
                    let x = input.at(iy as usize, ix as usize, ch) as i64;
                    for oy in 0..oh as i64 {
                        for ox in 0..ow as i64 {
                            let (ky, kx) = (iy + 1 - 2 * oy, ix + 1 - 2 * ox);
                            if (0..3).contains(&ky) && (0..3).contains(&kx) {
                                for oc in 0..2 {
                                    expect[((oy as usize * ow) + ox as usize) * 2 + oc] +=
                                        weights.at(oc, ky as usize, kx as usize, ch) as i64 * x;
                                }
                            }
                        }
                    }
                }
            }
        }
        assert_eq!(got.values.iter().map(|&v| v as i64).collect::<Vec<_>>(), expect);
    }

    #[test]
    fn compare_reports_first_difference() {
        let q = QuantParams::feature_map(4, 1.0).unwrap();
        let codes: Vec<i32> = (0..2 * 3 * 5).map(|i| i % 16).collect();
        let packed = PackedTensor::from_codes(2, 3, 5, q, &codes).unwrap();
        let mut int = IntTensor::new(2, 3, 5, codes);
        assert_eq!(compare_tensors(&packed, &int).unwrap(), None);
        int.values[15 + 2 * 5 + 3] = 0;
        let m = compare_tensors(&packed, &int).unwrap().unwrap();
        assert_eq!((m.y, m.x, m.ch, m.got, m.expected), (1, 2, 3, 12, 0));
        assert!(compare_tensors(&packed, &IntTensor::new(1, 1, 1, vec![0])).is_err());
    }

    #[test]
    fn decoding_matches_tensor_accessors() {
        for (bits, signed) in [(2, true), (2, false), (4, true), (4, false), (8, true), (8, false)] {
            let q = if signed {
                QuantParams::weights(bits, -1.0, 1.0).unwrap()
            } else {
                QuantParams::feature_map(bits, 1.0).unwrap()
            };
            let (lo, hi) = Precision::from_bits(bits).unwrap().code_range(signed);
            let codes: Vec<i32> = (0..3 * 2 * 7).map(|i| lo + (i * 13) % (hi - lo + 1)).collect();
            let t = PackedTensor::from_codes(3, 2, 7, q, &codes).unwrap();
            assert_eq!(IntTensor::from_packed(&t).values, codes);
        }
    }

    #[test]
    fn fault_injection_always_detected() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let q = QuantParams::feature_map(2, 1.0).unwrap();
        for _ in 0..500 {
            let (h, w, c) = (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..9));
            let codes: Vec<i32> = (0..h * w * c).map(|_| rng.gen_range(0..4)).collect();
            let packed = PackedTensor::from_codes(h, w, c, q.clone(), &codes).unwrap();
            let mut faulty = IntTensor::new(h, w, c, codes);
            let i = rng.gen_range(0..faulty.values.len());
            faulty.values[i] = (faulty.values[i] + rng.gen_range(1..4)) % 4;
            let m = compare_tensors(&packed, &faulty).unwrap().expect("fault missed");
            assert_eq!((m.y * w + m.x) * c + m.ch, i);
        }
    }

    #[test]
    fn overflow_is_reported() {
        let mut cfg = unit_layer(Precision::Bits8).0;
        cfg.in_c = 70_000;
        let input = IntTensor::new(1, 1, 70_000, vec![255; 70_000]);
        let weights = IntWeights::new(1, 1, 1, 70_000, vec![127; 70_000]);
        assert!(matches!(conv_linear_reference(&input, &weights, &cfg), Err(OracleError::Overflow { .. })));
    }
}
