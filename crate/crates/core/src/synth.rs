//! Seeded random layers for verification runs and benchmarks.
//!
//! Codes are uniform over each precision's range. Output quantization is
//! fitted to the accumulator range actually produced by the data and redrawn
//! until at least two distinct output codes appear. 8-bit outputs get a
//! dyadic gain so an exact multiplier/shift exists.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::kernels::{KernelError, LayerConfig, LayerQuant};
use crate::oracle::{conv_linear_reference, IntTensor, IntWeights};
use crate::precision::Precision;
use crate::quantization::{AffineQuant, QuantParams};
use crate::tensor::{PackedTensor, WeightTensor};

pub type CaseRng = ChaCha8Rng;

pub fn rng(seed: u64) -> CaseRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Seed for one precision triple derived from a run seed.
pub fn permutation_seed(seed: u64, (i, w, o): (Precision, Precision, Precision)) -> u64 {
    let tag = (i.bits() as u64) << 16 | (w.bits() as u64) << 8 | o.bits() as u64;
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ tag.wrapping_mul(0xBF58_476D_1CE4_E5B9)
}

#[derive(Debug, Clone)]
pub struct LayerCase {
    pub cfg: LayerConfig,
    pub input: PackedTensor,
    pub weights: WeightTensor,
    pub quant: LayerQuant,
}

const MAX_ATTEMPTS: usize = 32;

pub fn random_codes(rng: &mut impl Rng, n: usize, prec: Precision, signed: bool) -> Vec<i32> {
    let (lo, hi) = prec.code_range(signed);
    (0..n).map(|_| rng.gen_range(lo..=hi)).collect()
}

pub fn input_params(prec: Precision) -> QuantParams {
    QuantParams::feature_map(prec.bits(), 1.0).expect("valid range")
}

pub fn weight_params(prec: Precision) -> QuantParams {
    QuantParams::weights(prec.bits(), -1.0, 1.0).expect("valid range")
}

/// Random tensors and non-degenerate quantization for `cfg`.
pub fn random_case(cfg: &LayerConfig, rng: &mut impl Rng) -> Result<LayerCase, KernelError> {
    cfg.validate()?;
    let in_q = input_params(cfg.prec_in);
    let w_q = weight_params(cfg.prec_w);
    let eps_phi = in_q.eps * w_q.eps;
    let n_in = cfg.in_h * cfg.in_w * cfg.in_c;
    let n_w = cfg.out_c * cfg.im2col_len();

    let mut last = None;
    for _ in 0..MAX_ATTEMPTS {
        let x = random_codes(rng, n_in, cfg.prec_in, false);
        let w = random_codes(rng, n_w, cfg.prec_w, true);
        let acc = conv_linear_reference(
            &IntTensor::new(cfg.in_h, cfg.in_w, cfg.in_c, x.clone()),
            &IntWeights::new(cfg.out_c, cfg.kh, cfg.kw, cfg.in_c, w.clone()),
            cfg,
        )
        .expect("validated geometry cannot overflow");
        let output = random_output_params(rng, cfg.prec_out, &acc.values, eps_phi, cfg.out_c);
        let case = LayerCase {
            cfg: *cfg,
            input: PackedTensor::from_codes(cfg.in_h, cfg.in_w, cfg.in_c, in_q.clone(), &x)?,
            weights: WeightTensor::from_codes(cfg.out_c, cfg.kh, cfg.kw, cfg.in_c, w_q.clone(), &w)?,
            quant: LayerQuant { input: in_q.clone(), weights: w_q.clone(), output },
        };
        if distinct_codes(&case.quant, &acc.values, cfg.out_c) >= 2 {
            return Ok(case);
        }
        last = Some(case);
    }
    // constant accumulators (e.g. a single tap) cannot produce two codes
    Ok(last.expect("at least one attempt"))
}

fn distinct_codes(quant: &LayerQuant, acc: &[i32], out_c: usize) -> usize {
    let eps_phi = quant.eps_phi();
    let quants: Vec<_> = (0..out_c)
        .map(|oc| AffineQuant::new(&quant.output, eps_phi, oc).expect("valid output params"))
        .collect();
    let mut seen = std::collections::BTreeSet::new();
    for (i, &v) in acc.iter().enumerate() {
        seen.insert(quants[i % out_c].apply(v as i64));
    }
    seen.len()
}

fn random_output_params(rng: &mut impl Rng, prec: Precision, acc: &[i32], eps_phi: f64, out_c: usize) -> QuantParams {
    let lo = acc.iter().copied().min().unwrap_or(0) as f64;
    let hi = acc.iter().copied().max().unwrap_or(0) as f64;
    let span = (hi - lo).max(1.0);
    let levels = (1u32 << prec.bits()) as f64;
    let channels = if out_c > 1 && rng.gen_bool(0.5) { out_c } else { 1 };

    let (eps_y, kappa, lambda): (f64, Vec<f64>, Vec<f64>) = if prec == Precision::Bits8 {
        // kappa = m / 2^j and eps_y = eps_phi * 2^k keep kappa * scale dyadic
        let kappa: Vec<f64> = (0..channels)
            .map(|_| rng.gen_range(1..=255u32) as f64 / 2f64.powi(rng.gen_range(0..=7)))
            .collect();
        let k0 = kappa[0];
        let target = levels * rng.gen_range(0.5..2.0);
        let k = (k0 * span / target).log2().round().clamp(-8.0, 24.0) as i32;
        let lambda = kappa
            .iter()
            .map(|&kc| (-kc * lo - rng.gen_range(0.0..0.25) * kc * span).round())
            .collect();
        (eps_phi * 2f64.powi(k), kappa, lambda)
    } else {
        let kappa: Vec<f64> = (0..channels).map(|_| rng.gen_range(0.25..4.0)).collect();
        let k0 = kappa[0];
        let eps_y = k0 * span * eps_phi / (levels * rng.gen_range(0.5..2.0));
        let lambda = kappa
            .iter()
            .map(|&kc| -kc * lo - rng.gen_range(0.0..0.25) * kc * span + rng.gen_range(-0.5..0.5))
            .collect();
        (eps_y, kappa, lambda)
    };
    QuantParams::from_step(prec.bits(), 0.0, eps_y, false)
        .and_then(|p| p.with_normalization(kappa, lambda))
        .expect("drawn parameters are valid")
}

/// Geometry variants cycled through by [`random_geometry`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GeometryKind {
    Pointwise,
    Padded,
    Strided,
    OddChannels,
}

impl GeometryKind {
    pub const ALL: [GeometryKind; 4] = [
        GeometryKind::Pointwise,
        GeometryKind::Padded,
        GeometryKind::Strided,
        GeometryKind::OddChannels,
    ];
}

/// A small random layer of the given kind.
pub fn random_geometry(rng: &mut impl Rng, kind: GeometryKind, precs: (Precision, Precision, Precision)) -> LayerConfig {
    let (kh, kw, stride, pad) = match kind {
        GeometryKind::Pointwise => (1, 1, 1, 0),
        GeometryKind::Padded => (3, 3, 1, 1),
        GeometryKind::Strided => (3, rng.gen_range(1..=3), 2, rng.gen_range(0..=1)),
        GeometryKind::OddChannels => (rng.gen_range(1..=3), rng.gen_range(1..=3), rng.gen_range(1..=2), 0),
    };
    let mut out_c = rng.gen_range(1..=12);
    if kind == GeometryKind::OddChannels && out_c % 4 == 0 {
        out_c += rng.gen_range(1..=3);
    }
    let extent = |k: usize, rng: &mut dyn rand::RngCore| {
        let out = rng.gen_range(1..=6usize);
        // in = (out - 1) * stride + k - 2 * pad, bumped until positive
        (out..out + 4)
            .map(|o| (o - 1) * stride + k)
            .find(|&span| span > 2 * pad)
            .map(|span| span - 2 * pad)
            .expect("some output size yields a positive input")
    };
    LayerConfig {
        in_h: extent(kh, rng),
        in_w: extent(kw, rng),
        in_c: rng.gen_range(1..=12),
        out_c,
        kh,
        kw,
        stride,
        pad,
        prec_in: precs.0,
        prec_w: precs.1,
        prec_out: precs.2,
    }
}
