//! Linear quantization model and the output requantization functions.
//!
//! A real tensor `t` in `[alpha, beta)` is stored as integer codes with
//! `t = alpha + eps * code` and `eps = (beta - alpha) / 2^n`. A layer maps
//! the integer accumulator `phi` back to output codes with
//! `clip(floor((kappa * phi + lambda) * eps_phi / eps_y), 0, 2^n - 1)`.
//!
//! Two integer-only realizations of that function are provided: a set of
//! `2^n - 1` thresholds searched in exactly `n` comparisons (2 and 4-bit
//! outputs), and a multiplier/shift/clamp (8-bit outputs). Both are proven
//! equal to the floating-point definition at construction time.

use thiserror::Error;

use crate::precision::Precision;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QuantError {
    #[error("unsupported bit-width {0}")]
    UnsupportedWidth(u32),
    #[error("invalid range [{alpha}, {beta})")]
    InvalidRange { alpha: f64, beta: f64 },
    #[error("{what} must be finite and positive, got {value}")]
    NonPositive { what: &'static str, value: f64 },
    #[error("non-finite {what} for channel {channel}")]
    NonFinite { what: &'static str, channel: usize },
    #[error("kappa must be positive for a monotone quantizer, channel {channel} has {value}")]
    NonMonotone { channel: usize, value: f64 },
    #[error("kappa has {kappa} entries but lambda has {lambda}")]
    MismatchedLengths { kappa: usize, lambda: usize },
    #[error("channel {channel} out of range for {len} normalization entries")]
    ChannelOutOfRange { channel: usize, len: usize },
    #[error("code {code} not representable in {n_bits}-bit {kind} range [{lo}, {hi}]")]
    CodeOutOfRange {
        code: i64,
        n_bits: u32,
        kind: &'static str,
        lo: i64,
        hi: i64,
    },
    #[error("feature maps must be unsigned with alpha = 0")]
    NotFeatureMap,
    #[error("scale {scale} for channel {channel} has no exact 16-bit multiplier/shift form")]
    NotRepresentable { channel: usize, scale: f64 },
}

/// Per-tensor quantization metadata.
///
/// `kappa`/`lambda` hold either one entry (per-layer) or one per output
/// channel. They are only meaningful on output tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantParams {
    pub n_bits: u32,
    pub eps: f64,
    pub alpha: f64,
    pub beta: f64,
    pub signed: bool,
    kappa: Vec<f64>,
    lambda: Vec<f64>,
}

impl QuantParams {
    /// Builds parameters from the range `[alpha, beta)`.
    pub fn new(n_bits: u32, alpha: f64, beta: f64, signed: bool) -> Result<Self, QuantError> {
        check_width(n_bits)?;
        if !(alpha.is_finite() && beta.is_finite() && beta > alpha) {
            return Err(QuantError::InvalidRange { alpha, beta });
        }
        Ok(Self {
            n_bits,
            eps: (beta - alpha) / 2f64.powi(n_bits as i32),
            alpha,
            beta,
            signed,
            kappa: vec![1.0],
            lambda: vec![0.0],
        })
    }

    /// Builds parameters from the step size; `beta` is derived.
    pub fn from_step(n_bits: u32, alpha: f64, eps: f64, signed: bool) -> Result<Self, QuantError> {
        check_width(n_bits)?;
        if !(eps.is_finite() && eps > 0.0) {
            return Err(QuantError::NonPositive { what: "eps", value: eps });
        }
        if !alpha.is_finite() {
            return Err(QuantError::InvalidRange { alpha, beta: f64::NAN });
        }
        Ok(Self {
            n_bits,
            eps,
            alpha,
            beta: alpha + eps * 2f64.powi(n_bits as i32),
            signed,
            kappa: vec![1.0],
            lambda: vec![0.0],
        })
    }

    /// Unsigned feature map in `[0, beta)`.
    pub fn feature_map(n_bits: u32, beta: f64) -> Result<Self, QuantError> {
        Self::new(n_bits, 0.0, beta, false)
    }

    /// Signed weights in `[alpha, beta)`.
    pub fn weights(n_bits: u32, alpha: f64, beta: f64) -> Result<Self, QuantError> {
        Self::new(n_bits, alpha, beta, true)
    }

    /// Attaches the folded normalization. Lengths must match; a single entry
    /// applies to every channel.
    pub fn with_normalization(mut self, kappa: Vec<f64>, lambda: Vec<f64>) -> Result<Self, QuantError> {
        if kappa.len() != lambda.len() || kappa.is_empty() {
            return Err(QuantError::MismatchedLengths { kappa: kappa.len(), lambda: lambda.len() });
        }
        for (channel, (&k, &l)) in kappa.iter().zip(&lambda).enumerate() {
            if !k.is_finite() {
                return Err(QuantError::NonFinite { what: "kappa", channel });
            }
            if !l.is_finite() {
                return Err(QuantError::NonFinite { what: "lambda", channel });
            }
            if k <= 0.0 {
                return Err(QuantError::NonMonotone { channel, value: k });
            }
        }
        self.kappa = kappa;
        self.lambda = lambda;
        Ok(self)
    }

    pub fn kappa_values(&self) -> &[f64] {
        &self.kappa
    }

    pub fn lambda_values(&self) -> &[f64] {
        &self.lambda
    }

    pub fn per_channel(&self) -> bool {
        self.kappa.len() > 1
    }

    /// `(kappa, lambda)` for an output channel.
    pub fn normalization(&self, channel: usize) -> Result<(f64, f64), QuantError> {
        match self.kappa.len() {
            1 => Ok((self.kappa[0], self.lambda[0])),
            len if channel < len => Ok((self.kappa[channel], self.lambda[channel])),
            len => Err(QuantError::ChannelOutOfRange { channel, len }),
        }
    }

    pub fn precision(&self) -> Option<Precision> {
        Precision::from_bits(self.n_bits)
    }

    pub fn code_range(&self) -> (i64, i64) {
        let n = self.n_bits;
        if self.signed {
            (-(1i64 << (n - 1)), (1i64 << (n - 1)) - 1)
        } else {
            (0, (1i64 << n) - 1)
        }
    }

    pub fn check_feature_map(&self) -> Result<(), QuantError> {
        if self.signed || self.alpha != 0.0 {
            return Err(QuantError::NotFeatureMap);
        }
        Ok(())
    }
}

fn check_width(n_bits: u32) -> Result<(), QuantError> {
    match n_bits {
        2 | 4 | 8 | 32 => Ok(()),
        n => Err(QuantError::UnsupportedWidth(n)),
    }
}

/// 32-bit accumulator together with its quantization step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Accumulator {
    pub value: i32,
    pub eps_phi: f64,
}

impl Accumulator {
    pub fn new(value: i32, eps_phi: f64) -> Self {
        Self { value, eps_phi }
    }
}

/// Maps a code back to the real domain.
pub fn dequantize(q: i64, p: &QuantParams) -> Result<f64, QuantError> {
    let (lo, hi) = p.code_range();
    if q < lo || q > hi {
        return Err(QuantError::CodeOutOfRange {
            code: q,
            n_bits: p.n_bits,
            kind: if p.signed { "signed" } else { "unsigned" },
            lo,
            hi,
        });
    }
    Ok(p.alpha + p.eps * q as f64)
}

/// The affine quant function for one output channel, with every parameter
/// resolved. Evaluated as `floor((kappa * phi + lambda) * scale)` in double
/// precision, `scale = eps_phi / eps_y`, then clipped to the code range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineQuant {
    pub kappa: f64,
    pub lambda: f64,
    pub scale: f64,
    pub max_code: i32,
}

impl AffineQuant {
    pub fn new(out_p: &QuantParams, eps_phi: f64, channel: usize) -> Result<Self, QuantError> {
        let precision = out_p.precision().ok_or(QuantError::UnsupportedWidth(out_p.n_bits))?;
        if !(eps_phi.is_finite() && eps_phi > 0.0) {
            return Err(QuantError::NonPositive { what: "eps_phi", value: eps_phi });
        }
        let (kappa, lambda) = out_p.normalization(channel)?;
        if kappa <= 0.0 {
            return Err(QuantError::NonMonotone { channel, value: kappa });
        }
        let scale = eps_phi / out_p.eps;
        if !(scale.is_finite() && scale > 0.0) {
            return Err(QuantError::NonPositive { what: "eps_phi / eps_y", value: scale });
        }
        Ok(Self {
            kappa,
            lambda,
            scale,
            max_code: precision.mask() as i32,
        })
    }

    /// Direct construction from `(kappa, lambda, scale)`.
    pub fn from_parts(kappa: f64, lambda: f64, scale: f64, out: Precision) -> Self {
        Self { kappa, lambda, scale, max_code: out.mask() as i32 }
    }

    #[inline]
    pub fn apply(&self, phi: i64) -> i32 {
        let v = ((self.kappa * phi as f64 + self.lambda) * self.scale).floor();
        v.clamp(0.0, self.max_code as f64) as i32
    }

    /// Smallest 32-bit `phi` mapped to a code `>= k`, or `i32::MAX + 1` when
    /// no 32-bit value reaches it. Requires `apply` to be non-decreasing.
    fn smallest_reaching(&self, k: i32) -> i64 {
        smallest_reaching(|phi| self.apply(phi), k)
    }
}

/// Binary search for the smallest `phi` in `[i32::MIN, i32::MAX]` with
/// `f(phi) >= k`; returns `i32::MAX + 1` if none.
fn smallest_reaching(f: impl Fn(i64) -> i32, k: i32) -> i64 {
    let (mut lo, mut hi) = (i32::MIN as i64, i32::MAX as i64 + 1);
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if f(mid) >= k {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    lo
}

/// `clip(floor((kappa * phi + lambda) * eps_phi / eps_y), 0, 2^n - 1)`.
pub fn quantize_affine(phi: Accumulator, out_p: &QuantParams, channel: usize) -> Result<i32, QuantError> {
    Ok(AffineQuant::new(out_p, phi.eps_phi, channel)?.apply(phi.value as i64))
}

/// Sorted accumulator boundaries `T_1..T_{2^n - 1}` for one output channel.
///
/// `T_k` is the smallest accumulator mapped to a code `>= k`. Boundaries
/// that no 32-bit accumulator reaches are stored as `i32::MAX + 1`, which is
/// why they are kept in 64 bits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ThresholdSet {
    pub precision: Precision,
    pub thresholds: Vec<i64>,
    pub per_channel: bool,
}

impl ThresholdSet {
    /// Wraps an explicit boundary list. Must hold `2^n - 1` sorted entries.
    pub fn from_sorted(precision: Precision, thresholds: Vec<i64>) -> Option<Self> {
        let ok = precision != Precision::Bits8
            && thresholds.len() == precision.mask() as usize
            && thresholds.windows(2).all(|w| w[0] <= w[1]);
        ok.then_some(Self { precision, thresholds, per_channel: false })
    }

    /// Balanced binary search: returns the number of thresholds `<= phi`
    /// and the number of comparisons made, always `n`.
    #[inline]
    pub fn search(&self, phi: i32) -> (i32, u32) {
        let n = self.precision.bits();
        let phi = phi as i64;
        let mut code = 0usize;
        for step in (0..n).rev() {
            let probe = code + (1 << step);
            if phi >= self.thresholds[probe - 1] {
                code = probe;
            }
        }
        (code as i32, n)
    }
}

pub fn build_thresholds(out_p: &QuantParams, eps_phi: f64, channel: usize) -> Result<ThresholdSet, QuantError> {
    let precision = match out_p.precision() {
        Some(p @ (Precision::Bits2 | Precision::Bits4)) => p,
        _ => return Err(QuantError::UnsupportedWidth(out_p.n_bits)),
    };
    let quant = AffineQuant::new(out_p, eps_phi, channel)?;
    let thresholds = (1..=quant.max_code).map(|k| quant.smallest_reaching(k)).collect();
    Ok(ThresholdSet { precision, thresholds, per_channel: out_p.per_channel() })
}

pub fn quantize_by_threshold(phi: Accumulator, t: &ThresholdSet) -> i32 {
    t.search(phi.value).0
}

/// `clamp((phi * multiplier + bias) >> shift, 0, 255)`, integer only.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShiftRequant {
    pub multiplier: i32,
    pub shift: u32,
    pub bias: i64,
}

impl ShiftRequant {
    pub const MAX_MULTIPLIER: i32 = u16::MAX as i32;

    #[inline]
    pub fn apply(&self, phi: i32) -> i32 {
        ((phi as i64 * self.multiplier as i64 + self.bias) >> self.shift).clamp(0, 255) as i32
    }

    /// Smallest accumulator producing a code `>= k` (closed form).
    fn smallest_reaching(&self, k: i32) -> i64 {
        let need = ((k as i64) << self.shift) - self.bias;
        let m = self.multiplier as i64;
        need.div_euclid(m) + i64::from(need.rem_euclid(m) != 0)
    }
}

/// Finds the multiplier/shift/bias realizing the 8-bit affine quant exactly.
///
/// The pair is accepted only when its 255 code boundaries coincide with
/// those of [`quantize_affine`], which makes the two functions equal on
/// every 32-bit accumulator.
pub fn requant_shift_params(out_p: &QuantParams, eps_phi: f64, channel: usize) -> Result<ShiftRequant, QuantError> {
    if out_p.n_bits != 8 {
        return Err(QuantError::UnsupportedWidth(out_p.n_bits));
    }
    let quant = AffineQuant::new(out_p, eps_phi, channel)?;
    let gain = quant.kappa * quant.scale;
    let offset = quant.lambda * quant.scale;
    let unrepresentable = QuantError::NotRepresentable { channel, scale: gain };
    for shift in 0..=31u32 {
        let unit = (1u64 << shift) as f64;
        let m = gain * unit;
        if m > ShiftRequant::MAX_MULTIPLIER as f64 {
            break;
        }
        let b = offset * unit;
        if m.fract() != 0.0 || m < 1.0 || b.fract() != 0.0 || b.abs() >= 2f64.powi(62) {
            continue;
        }
        let candidate = ShiftRequant { multiplier: m as i32, shift, bias: b as i64 };
        let bound = i32::MIN as i64..=i32::MAX as i64 + 1;
        let exact = (1..=255).all(|k| {
            let ours = candidate.smallest_reaching(k).clamp(*bound.start(), *bound.end());
            ours == quant.smallest_reaching(k)
        });
        return if exact { Ok(candidate) } else { Err(unrepresentable) };
    }
    Err(unrepresentable)
}
