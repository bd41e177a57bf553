//! The mixed-precision convolution pipeline.
//!
//! A layer runs as im2col (selected by the input precision), a 4x2 tiled
//! MatMul (selected by the weight precision) and QntPack (selected by the
//! output precision). The three stages compose into all 27 kernels.
//!
//! The im2col buffers always hold unpacked 8-bit codes, so sub-byte inputs
//! are expanded once per receptive field. Weights stay packed and are
//! unpacked one 32-bit word at a time inside the MatMul inner loop.

use std::ops::Range;

use thiserror::Error;

use crate::packing::{self, extract_signed, load_le};
use crate::precision::Precision;
use crate::quantization::{build_thresholds, requant_shift_params, QuantError, QuantParams, ShiftRequant, ThresholdSet};
use crate::tensor::{PackedTensor, TensorError, WeightTensor};

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("invalid layer configuration, field `{field}`: {reason}")]
    Config { field: &'static str, reason: String },
    #[error("accumulator bound {bound} does not fit 32 bits (im2col length {len}, weights {prec_w}-bit, inputs {prec_in}-bit)")]
    AccumulatorOverflow {
        bound: u64,
        len: usize,
        prec_w: Precision,
        prec_in: Precision,
    },
    #[error("{0}")]
    Shape(String),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn config_err(field: &'static str, reason: impl Into<String>) -> KernelError {
    KernelError::Config { field, reason: reason.into() }
}

/// Convolution geometry plus the three precisions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerConfig {
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub prec_in: Precision,
    pub prec_w: Precision,
    pub prec_out: Precision,
}

impl LayerConfig {
    /// 16x16x32 input, 64 output channels, 3x3 filters, stride 1, pad 1.
    pub fn reference(prec_in: Precision, prec_w: Precision, prec_out: Precision) -> Self {
        Self {
            in_h: 16,
            in_w: 16,
            in_c: 32,
            out_c: 64,
            kh: 3,
            kw: 3,
            stride: 1,
            pad: 1,
            prec_in,
            prec_w,
            prec_out,
        }
    }

    pub fn with_precisions(mut self, prec_in: Precision, prec_w: Precision, prec_out: Precision) -> Self {
        self.prec_in = prec_in;
        self.prec_w = prec_w;
        self.prec_out = prec_out;
        self
    }

    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kw) / self.stride + 1
    }

    pub fn im2col_len(&self) -> usize {
        self.kh * self.kw * self.in_c
    }

    pub fn macs(&self) -> u64 {
        (self.out_h() * self.out_w() * self.out_c) as u64 * self.im2col_len() as u64
    }

    /// Largest possible `|phi|`: every tap at its extreme code.
    pub fn accumulator_bound(&self) -> u64 {
        self.im2col_len() as u64 * self.prec_w.max_abs(true) as u64 * self.prec_in.max_abs(false) as u64
    }

    pub fn validate(&self) -> Result<(), KernelError> {
        for (field, v) in [
            ("in_h", self.in_h),
            ("in_w", self.in_w),
            ("in_c", self.in_c),
            ("out_c", self.out_c),
            ("kh", self.kh),
            ("kw", self.kw),
            ("stride", self.stride),
        ] {
            if v == 0 {
                return Err(config_err(field, "must be positive"));
            }
        }
        for (field, span, k, kname) in [("in_h", self.in_h, self.kh, "kh"), ("in_w", self.in_w, self.kw, "kw")] {
            let padded = span + 2 * self.pad;
            if k > padded {
                return Err(config_err(kname, format!("kernel {k} exceeds padded extent {padded}")));
            }
            if !(padded - k).is_multiple_of(self.stride) {
                return Err(config_err(
                    field,
                    format!("({span} + 2*{} - {k}) is not a multiple of stride {}", self.pad, self.stride),
                ));
            }
        }
        let bound = self.accumulator_bound();
        if bound >= 1 << 31 {
            return Err(KernelError::AccumulatorOverflow {
                bound,
                len: self.im2col_len(),
                prec_w: self.prec_w,
                prec_in: self.prec_in,
            });
        }
        Ok(())
    }
}

/// Quantization parameters of the three tensors of a layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerQuant {
    pub input: QuantParams,
    pub weights: QuantParams,
    pub output: QuantParams,
}

impl LayerQuant {
    pub fn eps_phi(&self) -> f64 {
        self.input.eps * self.weights.eps
    }

    fn check(&self, cfg: &LayerConfig) -> Result<(), KernelError> {
        for (field, p, prec) in [
            ("input.n_bits", &self.input, cfg.prec_in),
            ("weights.n_bits", &self.weights, cfg.prec_w),
            ("output.n_bits", &self.output, cfg.prec_out),
        ] {
            if p.n_bits != prec.bits() {
                return Err(config_err(field, format!("{} does not match layer precision {prec}", p.n_bits)));
            }
        }
        self.input.check_feature_map().map_err(|_| config_err("input", "must be unsigned with alpha = 0"))?;
        self.output.check_feature_map().map_err(|_| config_err("output", "must be unsigned with alpha = 0"))?;
        if !self.weights.signed {
            return Err(config_err("weights.signed", "weights must be signed"));
        }
        let n = self.output.kappa_values().len();
        if n != 1 && n != cfg.out_c {
            return Err(config_err("output.kappa", format!("{n} entries for {} output channels", cfg.out_c)));
        }
        Ok(())
    }
}

/// Integer-only requantization for every output channel.
#[derive(Debug, Clone, PartialEq)]
pub enum Requantizer {
    /// 8-bit outputs: multiplier, shift and clamp.
    Shift(Vec<ShiftRequant>),
    /// 2 and 4-bit outputs: threshold binary search.
    Thresholds(Vec<ThresholdSet>),
}

impl Requantizer {
    pub fn prepare(output: &QuantParams, eps_phi: f64, out_c: usize) -> Result<Self, QuantError> {
        let per_channel = output.per_channel();
        let channels = if per_channel { out_c } else { 1 };
        Ok(match output.n_bits {
            8 => Requantizer::Shift(broadcast(
                (0..channels).map(|ch| requant_shift_params(output, eps_phi, ch)).collect::<Result<_, _>>()?,
                out_c,
            )),
            _ => Requantizer::Thresholds(broadcast(
                (0..channels).map(|ch| build_thresholds(output, eps_phi, ch)).collect::<Result<_, _>>()?,
                out_c,
            )),
        })
    }

    #[inline]
    pub fn apply(&self, phi: i32, oc: usize) -> i32 {
        match self {
            Requantizer::Shift(s) => s[oc].apply(phi),
            Requantizer::Thresholds(t) => t[oc].search(phi).0,
        }
    }
}

fn broadcast<T: Clone>(v: Vec<T>, out_c: usize) -> Vec<T> {
    if v.len() == out_c {
        v
    } else {
        vec![v[0].clone(); out_c]
    }
}

/// Scratch for the receptive fields of two horizontally adjacent outputs.
#[derive(Debug, Clone)]
pub struct Im2colBuffer {
    pub bufs: [Vec<u8>; 2],
}

impl Im2colBuffer {
    pub fn new(cfg: &LayerConfig) -> Self {
        let len = cfg.im2col_len();
        Self { bufs: [vec![0; len], vec![0; len]] }
    }
}

/// Copies the receptive field of output `(oy, ox)` into `buf` as unpacked
/// codes in `(ky, kx, ch)` order. Taps falling in the padding are 0.
pub fn im2col(input: &PackedTensor, cfg: &LayerConfig, oy: usize, ox: usize, buf: &mut [u8]) {
    let in_c = cfg.in_c;
    for ky in 0..cfg.kh {
        let iy = (oy * cfg.stride + ky) as isize - cfg.pad as isize;
        for kx in 0..cfg.kw {
            let ix = (ox * cfg.stride + kx) as isize - cfg.pad as isize;
            let dst = &mut buf[(ky * cfg.kw + kx) * in_c..][..in_c];
            if iy < 0 || ix < 0 || iy as usize >= cfg.in_h || ix as usize >= cfg.in_w {
                dst.fill(0);
            } else {
                packing::unpack_unsigned_into(input.pixel(iy as usize, ix as usize), cfg.prec_in, dst);
            }
        }
    }
}

/// Dot products of `F` packed filters against `P` im2col buffers.
///
/// Each filter is read one 32-bit word per step and unpacked with sign
/// extension; the word yields 4, 8 or 16 operands depending on precision.
#[inline]
fn matmul_block<const F: usize, const P: usize>(
    filters: [&[u8]; F],
    bufs: [&[u8]; P],
    prec_w: Precision,
    len: usize,
) -> [[i32; P]; F] {
    let bits = prec_w.bits();
    let lanes = prec_w.per_word();
    let mut acc = [[0i32; P]; F];
    let mut unpacked = [[0i8; 16]; F];
    let mut base = 0;
    let mut byte = 0;
    while base < len {
        let n = lanes.min(len - base);
        for (f, filter) in filters.iter().enumerate() {
            let word = load_le(&filter[byte..(byte + 4).min(filter.len())]);
            for (l, w) in unpacked[f][..n].iter_mut().enumerate() {
                *w = extract_signed(word, bits, l as u32 * bits) as i8;
            }
        }
        for (p, buf) in bufs.iter().enumerate() {
            let x = &buf[base..base + n];
            for f in 0..F {
                let mut sum = 0i32;
                for (&w, &v) in unpacked[f][..n].iter().zip(x) {
                    sum += w as i32 * v as i32;
                }
                acc[f][p] += sum;
            }
        }
        base += n;
        byte += 4;
    }
    acc
}

/// Four consecutive output channels starting at `oc_base` against two
/// im2col buffers: `phi[channel][pixel]`.
pub fn matmul_tile(weights: &WeightTensor, bufs: &Im2colBuffer, cfg: &LayerConfig, oc_base: usize) -> [[i32; 2]; 4] {
    let filters = std::array::from_fn(|f| weights.filter(oc_base + f));
    matmul_block::<4, 2>(filters, [&bufs.bufs[0], &bufs.bufs[1]], cfg.prec_w, cfg.im2col_len())
}

/// Mutable view over a band of whole output rows.
struct OutputRows<'a> {
    data: &'a mut [u8],
    first_row: usize,
    width: usize,
    stride: usize,
    prec: Precision,
}

impl OutputRows<'_> {
    #[inline]
    fn store(&mut self, oy: usize, ox: usize, ch: usize, code: i32) {
        let bits = ch * self.prec.bits() as usize;
        let idx = ((oy - self.first_row) * self.width + ox) * self.stride + bits / 8;
        let slot = &mut self.data[idx];
        *slot = match self.prec {
            Precision::Bits8 => code as u8,
            p => packing::insert(*slot, code as u32, p.bits(), (bits % 8) as u32),
        };
    }

    #[inline]
    fn store_block<const F: usize, const P: usize>(
        &mut self,
        phi: &[[i32; P]; F],
        requant: &Requantizer,
        oy: usize,
        ox: usize,
        oc_base: usize,
    ) {
        for (f, row) in phi.iter().enumerate() {
            for (p, &v) in row.iter().enumerate() {
                self.store(oy, ox + p, oc_base + f, requant.apply(v, oc_base + f));
            }
        }
    }
}

/// Requantizes a 4x2 tile and packs the codes into `out` at pixels
/// `(oy, ox)`, `(oy, ox + 1)` and channels `oc_base..oc_base + 4`.
pub fn qntpack(
    phi: &[[i32; 2]; 4],
    requant: &Requantizer,
    out: &mut PackedTensor,
    oy: usize,
    ox: usize,
    oc_base: usize,
) {
    let mut rows = OutputRows {
        width: out.w,
        stride: out.pixel_stride(),
        prec: out.precision,
        first_row: 0,
        data: out.data_mut(),
    };
    rows.store_block(phi, requant, oy, ox, oc_base);
}

/// Splits `[0, out_h)` into `workers` contiguous ranges whose sizes differ
/// by at most one; the first `out_h % workers` ranges take the extra row.
pub fn partition_rows(out_h: usize, workers: usize) -> Vec<Range<usize>> {
    assert!(workers >= 1, "at least one worker is required");
    let (base, extra) = (out_h / workers, out_h % workers);
    let mut start = 0;
    (0..workers)
        .map(|i| {
            let len = base + usize::from(i < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

fn check_shapes(input: &PackedTensor, weights: &WeightTensor, cfg: &LayerConfig, quant: &LayerQuant) -> Result<(), KernelError> {
    if (input.h, input.w, input.c) != (cfg.in_h, cfg.in_w, cfg.in_c) {
        return Err(KernelError::Shape(format!(
            "input is {}x{}x{}, layer expects {}x{}x{}",
            input.h, input.w, input.c, cfg.in_h, cfg.in_w, cfg.in_c
        )));
    }
    if (weights.out_c, weights.kh, weights.kw, weights.in_c) != (cfg.out_c, cfg.kh, cfg.kw, cfg.in_c) {
        return Err(KernelError::Shape(format!(
            "weights are {}x{}x{}x{}, layer expects {}x{}x{}x{}",
            weights.out_c, weights.kh, weights.kw, weights.in_c, cfg.out_c, cfg.kh, cfg.kw, cfg.in_c
        )));
    }
    if input.precision != cfg.prec_in || input.signed {
        return Err(KernelError::Shape(format!("input must be unsigned {}-bit", cfg.prec_in)));
    }
    if weights.precision() != cfg.prec_w || !weights.packed.signed {
        return Err(KernelError::Shape(format!("weights must be signed {}-bit", cfg.prec_w)));
    }
    if input.quant.eps != quant.input.eps || weights.packed.quant.eps != quant.weights.eps {
        return Err(KernelError::Shape("tensor step sizes differ from the layer quantization".into()));
    }
    Ok(())
}

/// Runs one output row band. `rows.data` covers exactly `band`.
fn conv_rows(
    input: &PackedTensor,
    weights: &WeightTensor,
    cfg: &LayerConfig,
    requant: &Requantizer,
    band: Range<usize>,
    rows: &mut OutputRows<'_>,
) {
    let (out_w, out_c, len, prec_w) = (cfg.out_w(), cfg.out_c, cfg.im2col_len(), cfg.prec_w);
    let full_tiles = out_c / 4 * 4;
    let mut scratch = Im2colBuffer::new(cfg);
    for oy in band {
        let mut ox = 0;
        while ox + 2 <= out_w {
            {
                let [a, b] = &mut scratch.bufs;
                im2col(input, cfg, oy, ox, a);
                im2col(input, cfg, oy, ox + 1, b);
            }
            let [a, b] = &scratch.bufs;
            for oc in (0..full_tiles).step_by(4) {
                let phi = matmul_tile(weights, &scratch, cfg, oc);
                rows.store_block(&phi, requant, oy, ox, oc);
            }
            for oc in full_tiles..out_c {
                let phi = matmul_block::<1, 2>([weights.filter(oc)], [a, b], prec_w, len);
                rows.store_block(&phi, requant, oy, ox, oc);
            }
            ox += 2;
        }
        if ox < out_w {
            let a = &mut scratch.bufs[0];
            im2col(input, cfg, oy, ox, a);
            for oc in (0..full_tiles).step_by(4) {
                let filters = std::array::from_fn(|f| weights.filter(oc + f));
                let phi = matmul_block::<4, 1>(filters, [a], prec_w, len);
                rows.store_block(&phi, requant, oy, ox, oc);
            }
            for oc in full_tiles..out_c {
                let phi = matmul_block::<1, 1>([weights.filter(oc)], [a], prec_w, len);
                rows.store_block(&phi, requant, oy, ox, oc);
            }
        }
    }
}

/// Mixed-precision convolution over `workers` threads, each owning a
/// disjoint band of output rows.
pub fn conv_mixed(
    input: &PackedTensor,
    weights: &WeightTensor,
    cfg: &LayerConfig,
    quant: &LayerQuant,
    workers: usize,
) -> Result<PackedTensor, KernelError> {
    cfg.validate()?;
    quant.check(cfg)?;
    check_shapes(input, weights, cfg, quant)?;
    if workers == 0 {
        return Err(config_err("cores", "at least one worker is required"));
    }
    let requant = Requantizer::prepare(&quant.output, quant.eps_phi(), cfg.out_c)?;
    let out_params = QuantParams::from_step(quant.output.n_bits, 0.0, quant.output.eps, false)?;
    let mut out = PackedTensor::zeros(cfg.out_h(), cfg.out_w(), cfg.out_c, out_params)?;
    let (out_w, stride, prec) = (out.w, out.pixel_stride(), out.precision);
    let row_bytes = out_w * stride;

    let bands = partition_rows(cfg.out_h(), workers);
    let mut rest = out.data_mut();
    let mut jobs = Vec::with_capacity(bands.len());
    for band in bands.into_iter().filter(|b| !b.is_empty()) {
        let (head, tail) = rest.split_at_mut(band.len() * row_bytes);
        rest = tail;
        jobs.push((band, head));
    }

    let requant = &requant;
    let run = |band: Range<usize>, data: &mut [u8]| {
        let mut rows = OutputRows { data, first_row: band.start, width: out_w, stride, prec };
        conv_rows(input, weights, cfg, requant, band, &mut rows);
    };
    if jobs.len() == 1 {
        let (band, data) = jobs.pop().unwrap();
        run(band, data);
    } else {
        std::thread::scope(|s| {
            for (band, data) in jobs {
                s.spawn(move || run(band, data));
            }
        });
    }
    Ok(out)
}
