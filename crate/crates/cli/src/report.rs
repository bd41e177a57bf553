//! Cost-model report rows.
//!
//! CSV columns, in this order:
//!
//! | column | meaning |
//! |---|---|
//! | `prec_in`, `prec_w`, `prec_out` | bit widths |
//! | `cores` | core count |
//! | `status` | `ok`, or `unmodeled` when the geometry is outside the model |
//! | `matmul_cycles` | single-core MatMul cycles |
//! | `qntpack_cycles` | single-core QntPack cycles |
//! | `total_cycles` | critical-path cycles on `cores` cores |
//! | `macs_per_cycle` | layer MACs / `total_cycles` |
//! | `linear_macs_per_cycle` | layer MACs / `matmul_cycles` |
//! | `cycles_per_output_pixel` | `total_cycles` per output element |
//! | `speedup_vs_8bit` | MatMul throughput with 8-bit weights over this row's |
//! | `detail` | inner-loop budget, or the reason a row is unmodeled |
//!
//! Numeric columns are empty on `unmodeled` rows.

use std::io::Write;

use anyhow::Result;
use mpq_core::costmodel::{threshold_comparisons, LITERATURE_SPEEDUP_VS_CORTEX_M4, LITERATURE_SPEEDUP_VS_CORTEX_M7};
use mpq_core::{CostError, CostModel, CostReport, LayerConfig, Precision};
use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostRow {
    pub prec_in: u32,
    pub prec_w: u32,
    pub prec_out: u32,
    pub cores: usize,
    pub status: &'static str,
    pub matmul_cycles: Option<f64>,
    pub qntpack_cycles: Option<f64>,
    pub total_cycles: Option<f64>,
    pub macs_per_cycle: Option<f64>,
    pub linear_macs_per_cycle: Option<f64>,
    pub cycles_per_output_pixel: Option<f64>,
    pub speedup_vs_8bit: Option<f64>,
    pub detail: String,
}

impl CostRow {
    pub fn new(model: &CostModel, cfg: &LayerConfig, cores: usize) -> Self {
        let mut row = CostRow {
            prec_in: cfg.prec_in.bits(),
            prec_w: cfg.prec_w.bits(),
            prec_out: cfg.prec_out.bits(),
            cores,
            status: "ok",
            matmul_cycles: None,
            qntpack_cycles: None,
            total_cycles: None,
            macs_per_cycle: None,
            linear_macs_per_cycle: None,
            cycles_per_output_pixel: None,
            speedup_vs_8bit: None,
            detail: String::new(),
        };
        let report = model
            .layer_cycles(cfg, cores)
            .and_then(|r| Ok((model.speedup(cfg, Precision::Bits8, cfg.prec_w)?, r)));
        match report {
            Ok((speedup, r)) => {
                row.matmul_cycles = Some(r.matmul_cycles);
                row.qntpack_cycles = Some(r.qntpack_cycles);
                row.total_cycles = Some(r.total_cycles);
                row.macs_per_cycle = Some(r.macs_per_cycle);
                row.linear_macs_per_cycle = Some(r.linear_macs_per_cycle);
                row.cycles_per_output_pixel = Some(r.cycles_per_output_pixel);
                row.speedup_vs_8bit = Some(speedup);
                row.detail = detail(&r);
            }
            Err(CostError::Unmodeled(reason)) => {
                row.status = "unmodeled";
                row.detail = reason;
            }
            Err(e) => {
                row.status = "error";
                row.detail = e.to_string();
            }
        }
        row
    }
}

fn detail(r: &CostReport) -> String {
    let opt = |v: Option<u32>| v.map_or_else(|| "n/a".to_string(), |v| v.to_string());
    let b = &r.budget;
    format!(
        "inner_loop={}cyc;loads={};extracts={};packs={};simd_macs={};iters={};qntpack_cmp={}",
        b.total_cycles,
        opt(b.loads),
        opt(b.extracts),
        opt(b.packs),
        b.simd_macs,
        r.iterations_per_tile,
        threshold_comparisons(r.layer.prec_out)
    )
}

pub fn write_csv(rows: &[CostRow], out: &mut dyn Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_table(rows: &[CostRow], out: &mut dyn Write) -> Result<()> {
    writeln!(
        out,
        "{:<7} {:>5} {:>14} {:>14} {:>14} {:>9} {:>9} {:>11} {:>9}  detail",
        "prec", "cores", "matmul_cyc", "qntpack_cyc", "total_cyc", "mac/cyc", "lin_mac", "cyc/output", "vs_8bit"
    )?;
    let num = |v: Option<f64>, prec: usize| v.map_or_else(|| "-".to_string(), |v| format!("{v:.prec$}"));
    for r in rows {
        writeln!(
            out,
            "{:<7} {:>5} {:>14} {:>14} {:>14} {:>9} {:>9} {:>11} {:>9}  {}{}",
            format!("{},{},{}", r.prec_in, r.prec_w, r.prec_out),
            r.cores,
            num(r.matmul_cycles, 0),
            num(r.qntpack_cycles, 0),
            num(r.total_cycles, 0),
            num(r.macs_per_cycle, 3),
            num(r.linear_macs_per_cycle, 3),
            num(r.cycles_per_output_pixel, 3),
            num(r.speedup_vs_8bit, 3),
            if r.status == "ok" { String::new() } else { format!("[{}] ", r.status) },
            r.detail
        )?;
    }
    writeln!(
        out,
        "\nliterature values (hardware measurements, not modeled): 8-core cluster vs Cortex-M7 {LITERATURE_SPEEDUP_VS_CORTEX_M7}x, vs Cortex-M4 {LITERATURE_SPEEDUP_VS_CORTEX_M4}x, reference layer, all 8-bit"
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use Precision::*;

    fn row(triple: (Precision, Precision, Precision), cores: usize) -> CostRow {
        CostRow::new(&CostModel::default(), &LayerConfig::reference(triple.0, triple.1, triple.2), cores)
    }

    #[test]
    fn reference_rows() {
        let r = row((Bits8, Bits8, Bits8), 8);
        assert_eq!(r.status, "ok");
        assert!(r.detail.starts_with("inner_loop=14cyc;loads=6;"), "{}", r.detail);
        let mpc = r.macs_per_cycle.unwrap();
        assert!((16.0..=18.3).contains(&mpc), "{mpc}");
        assert!(row((Bits8, Bits4, Bits8), 1).detail.starts_with("inner_loop=72cyc"));
        let two = row((Bits8, Bits2, Bits2), 1);
        assert!(two.detail.contains("inner_loop=140cyc;loads=n/a"), "{}", two.detail);
        assert!(two.detail.ends_with("qntpack_cmp=2"));
        assert!((row((Bits8, Bits4, Bits8), 1).speedup_vs_8bit.unwrap() - 2.571).abs() < 5e-4);
        assert!((two.speedup_vs_8bit.unwrap() - 2.5).abs() < 1e-12);
    }

    #[test]
    fn unmodeled_row_has_no_numbers() {
        let mut cfg = LayerConfig::reference(Bits8, Bits8, Bits8);
        cfg.out_c = 6;
        let r = CostRow::new(&CostModel::default(), &cfg, 1);
        assert_eq!(r.status, "unmodeled");
        assert!(r.detail.contains("out_c"));
        assert_eq!(r.total_cycles, None);
        let mut buf = Vec::new();
        write_csv(&[r], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.lines().nth(1).unwrap().starts_with("8,8,8,1,unmodeled,,,,,,,,"), "{text}");
    }

    #[test]
    fn csv_header_is_stable() {
        let mut buf = Vec::new();
        write_csv(&[row((Bits2, Bits2, Bits2), 1)], &mut buf).unwrap();
        let header = String::from_utf8(buf).unwrap().lines().next().unwrap().to_string();
        assert_eq!(
            header,
            "prec_in,prec_w,prec_out,cores,status,matmul_cycles,qntpack_cycles,total_cycles,\
             macs_per_cycle,linear_macs_per_cycle,cycles_per_output_pixel,speedup_vs_8bit,detail"
        );
    }
}
