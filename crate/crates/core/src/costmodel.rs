//! Analytic cycle model for the MatMul inner loops and the layer as a whole.
//!
//! One inner-loop iteration computes a 4x2 tile (4 output channels, 2 output
//! pixels). Each SIMD MAC is a 4-way 8-bit sum-of-dot-products, so an
//! iteration advances `4 * simd_macs / 8` elements along the im2col buffer.
//! QntPack is charged per output element using measured means as
//! calibration constants; the model does not simulate caches or pipelines.

use thiserror::Error;

use crate::kernels::{partition_rows, LayerConfig};
use crate::precision::Precision;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CostError {
    #[error("unsupported weight width {0}")]
    UnsupportedWidth(u32),
    #[error("unmodeled geometry: {0}")]
    Unmodeled(String),
    #[error("invalid layer: {0}")]
    Layer(String),
    #[error("core count must be at least 1")]
    NoCores,
    #[error("parallel efficiency must be in (0, 1], got {0}")]
    Efficiency(f64),
}

/// Instruction counts of one MatMul inner-loop iteration.
///
/// Component counts are `None` where they are not known; only the total
/// and the SIMD MAC count are available for 2-bit weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InnerLoopBudget {
    pub w_bits: Precision,
    pub loads: Option<u32>,
    pub extracts: Option<u32>,
    pub packs: Option<u32>,
    pub simd_macs: u32,
    pub total_cycles: u32,
}

impl InnerLoopBudget {
    pub fn for_precision(w_bits: Precision) -> Self {
        match w_bits {
            Precision::Bits8 => Self {
                w_bits,
                loads: Some(6),
                extracts: Some(0),
                packs: Some(0),
                simd_macs: 8,
                total_cycles: 14,
            },
            Precision::Bits4 => Self {
                w_bits,
                loads: Some(8),
                extracts: Some(32),
                packs: Some(16),
                simd_macs: 16,
                total_cycles: 72,
            },
            // same 4x2 structure, unrolled twice as far in the extraction
            Precision::Bits2 => Self {
                w_bits,
                loads: None,
                extracts: None,
                packs: None,
                simd_macs: 32,
                total_cycles: 140,
            },
        }
    }

    /// Sum of the single-cycle components, when all are known.
    pub fn component_sum(&self) -> Option<u32> {
        Some(self.loads? + self.extracts? + self.packs? + self.simd_macs)
    }

    pub fn scalar_macs(&self) -> u32 {
        4 * self.simd_macs
    }

    /// im2col elements consumed per iteration (the tile has 8 outputs).
    pub fn elements_per_iteration(&self) -> u32 {
        self.scalar_macs() / 8
    }

    /// Single-core MACs per cycle of the inner loop alone.
    pub fn macs_per_cycle(&self) -> f64 {
        self.scalar_macs() as f64 / self.total_cycles as f64
    }
}

pub fn inner_loop_budget(w_bits: u32) -> Result<InnerLoopBudget, CostError> {
    Precision::from_bits(w_bits)
        .map(InnerLoopBudget::for_precision)
        .ok_or(CostError::UnsupportedWidth(w_bits))
}

pub fn matmul_throughput(w_bits: Precision) -> f64 {
    InnerLoopBudget::for_precision(w_bits).macs_per_cycle()
}

/// Threshold comparisons per output element in QntPack. The 8-bit path is a
/// shift and clamp and compares against no thresholds.
pub fn threshold_comparisons(prec_out: Precision) -> u32 {
    match prec_out {
        Precision::Bits8 => 0,
        p => p.bits(),
    }
}

/// Measured QntPack overhead in cycles per output element: mean and spread.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QntPackCalibration {
    pub mean: f64,
    pub spread: f64,
}

pub fn qntpack_calibration(prec_out: Precision) -> QntPackCalibration {
    let (mean, spread) = match prec_out {
        Precision::Bits8 => (2.01, 0.57),
        Precision::Bits4 => (16.64, 4.47),
        Precision::Bits2 => (8.02, 1.15),
    };
    QntPackCalibration { mean, spread }
}

/// Published cycle/cycle speedups of an 8-core cluster over two Cortex-M
/// parts on the reference layer (all 8-bit). Hardware measurements, reported
/// for context only.
pub const LITERATURE_SPEEDUP_VS_CORTEX_M7: f64 = 25.0;
pub const LITERATURE_SPEEDUP_VS_CORTEX_M4: f64 = 46.0;

#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub layer: LayerConfig,
    pub cores: usize,
    pub budget: InnerLoopBudget,
    pub iterations_per_tile: u64,
    pub macs: u64,
    /// Single-core MatMul cycles.
    pub matmul_cycles: f64,
    /// Single-core QntPack cycles.
    pub qntpack_cycles: f64,
    /// Critical-path cycles on `cores` cores.
    pub total_cycles: f64,
    pub macs_per_cycle: f64,
    /// MatMul-only single-core throughput.
    pub linear_macs_per_cycle: f64,
    /// Total cycles per output element.
    pub cycles_per_output_pixel: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostModel {
    /// Fraction of ideal speedup retained when running on more than one core.
    pub parallel_efficiency: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self { parallel_efficiency: 7.5 / 8.0 }
    }
}

impl CostModel {
    pub fn with_efficiency(parallel_efficiency: f64) -> Result<Self, CostError> {
        if !(parallel_efficiency > 0.0 && parallel_efficiency <= 1.0) {
            return Err(CostError::Efficiency(parallel_efficiency));
        }
        Ok(Self { parallel_efficiency })
    }

    pub fn layer_cycles(&self, cfg: &LayerConfig, cores: usize) -> Result<CostReport, CostError> {
        if cores == 0 {
            return Err(CostError::NoCores);
        }
        cfg.validate().map_err(|e| CostError::Layer(e.to_string()))?;
        let (out_h, out_w, out_c) = (cfg.out_h(), cfg.out_w(), cfg.out_c);
        if out_c % 4 != 0 {
            return Err(CostError::Unmodeled(format!("out_c = {out_c} is not a multiple of 4")));
        }
        if out_w % 2 != 0 {
            return Err(CostError::Unmodeled(format!("out_w = {out_w} is odd")));
        }
        let budget = InnerLoopBudget::for_precision(cfg.prec_w);
        let iterations = (cfg.im2col_len() as u64).div_ceil(budget.elements_per_iteration() as u64);
        let tiles = (out_h * out_w / 2) as u64 * (out_c / 4) as u64;
        let matmul_cycles = (tiles * iterations * budget.total_cycles as u64) as f64;
        let outputs = (out_h * out_w * out_c) as f64;
        let qntpack_cycles = outputs * qntpack_calibration(cfg.prec_out).mean;

        let single = matmul_cycles + qntpack_cycles;
        let busiest = partition_rows(out_h, cores).iter().map(|r| r.len()).max().unwrap_or(0);
        let efficiency = if cores == 1 { 1.0 } else { self.parallel_efficiency };
        let total_cycles = single * busiest as f64 / out_h as f64 / efficiency;

        let macs = cfg.macs();
        Ok(CostReport {
            layer: *cfg,
            cores,
            budget,
            iterations_per_tile: iterations,
            macs,
            matmul_cycles,
            qntpack_cycles,
            total_cycles,
            macs_per_cycle: macs as f64 / total_cycles,
            linear_macs_per_cycle: macs as f64 / matmul_cycles,
            cycles_per_output_pixel: total_cycles / outputs,
        })
    }

    /// Ratio of modeled MatMul throughput with weights at `w_a` over `w_b`.
    pub fn speedup(&self, cfg: &LayerConfig, w_a: Precision, w_b: Precision) -> Result<f64, CostError> {
        let with = |w| {
            let c = cfg.with_precisions(cfg.prec_in, w, cfg.prec_out);
            self.layer_cycles(&c, 1).map(|r| r.linear_macs_per_cycle)
        };
        Ok(with(w_a)? / with(w_b)?)
    }
}
