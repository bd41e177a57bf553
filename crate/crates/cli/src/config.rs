//! Layer and quantization-parameter files.
//!
//! Both are TOML. A layer file lists the geometry explicitly; only
//! `stride` (1) and `pad` (0) have defaults:
//!
//! ```toml
//! in_h = 16
//! in_w = 16
//! in_c = 32
//! out_c = 64
//! kh = 3
//! kw = 3
//! stride = 1
//! pad = 1
//!
//! [precision]        # optional when --prec is given
//! input = 8
//! weights = 4
//! output = 2
//!
//! [quant]            # optional, same schema as a quantization file
//! ```
//!
//! A quantization file has one table per tensor, each with `n_bits`, `eps`,
//! `alpha` and optionally `kappa`/`lambda` (a number or one per output
//! channel; only the output table's values are used):
//!
//! ```toml
//! [input]
//! n_bits = 8
//! eps = 0.00390625
//! alpha = 0.0
//!
//! [weights]
//! n_bits = 4
//! eps = 0.125
//! alpha = -1.0
//!
//! [output]
//! n_bits = 2
//! eps = 1.5
//! alpha = 0.0
//! kappa = [1.0, 0.5]
//! lambda = [3.0, -2.0]
//! ```

use std::path::Path;

use anyhow::{bail, Context, Result};
use mpq_core::{LayerConfig, LayerQuant, Precision, QuantParams};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct LayerFile {
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default)]
    pub pad: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub precision: Option<PrecisionTable>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quant: Option<QuantFile>,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Copy, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct PrecisionTable {
    pub input: u32,
    pub weights: u32,
    pub output: u32,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(untagged)]
pub enum Values {
    Scalar(f64),
    List(Vec<f64>),
}

impl Values {
    fn into_vec(self) -> Vec<f64> {
        match self {
            Values::Scalar(v) => vec![v],
            Values::List(v) => v,
        }
    }

    fn from_slice(v: &[f64]) -> Self {
        match v {
            [x] => Values::Scalar(*x),
            _ => Values::List(v.to_vec()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct TensorQuant {
    pub n_bits: u32,
    pub eps: f64,
    pub alpha: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa: Option<Values>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<Values>,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct QuantFile {
    pub input: TensorQuant,
    pub weights: TensorQuant,
    pub output: TensorQuant,
}

impl TensorQuant {
    fn to_params(&self, table: &str, signed: bool) -> Result<QuantParams> {
        let p = QuantParams::from_step(self.n_bits, self.alpha, self.eps, signed)
            .with_context(|| format!("field `{table}.n_bits`/`{table}.eps`"))?;
        let kappa = self.kappa.clone().map_or_else(|| vec![1.0], Values::into_vec);
        let lambda = self.lambda.clone().map_or_else(|| vec![0.0], Values::into_vec);
        p.with_normalization(kappa, lambda)
            .with_context(|| format!("field `{table}.kappa`/`{table}.lambda`"))
    }

    fn from_params(p: &QuantParams, with_norm: bool) -> Self {
        Self {
            n_bits: p.n_bits,
            eps: p.eps,
            alpha: p.alpha,
            kappa: with_norm.then(|| Values::from_slice(p.kappa_values())),
            lambda: with_norm.then(|| Values::from_slice(p.lambda_values())),
        }
    }
}

impl QuantFile {
    pub fn to_layer_quant(&self) -> Result<LayerQuant> {
        Ok(LayerQuant {
            input: self.input.to_params("input", false)?,
            weights: self.weights.to_params("weights", true)?,
            output: self.output.to_params("output", false)?,
        })
    }

    pub fn from_layer_quant(q: &LayerQuant) -> Self {
        Self {
            input: TensorQuant::from_params(&q.input, false),
            weights: TensorQuant::from_params(&q.weights, false),
            output: TensorQuant::from_params(&q.output, true),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing quantization file {}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("quantization tables serialize")
    }
}

pub type Triple = (Precision, Precision, Precision);

/// Parses `in,w,out`, e.g. `8,4,2`.
pub fn parse_triple(s: &str) -> Result<Triple, String> {
    let parts: Vec<&str> = s.split(',').collect();
    let [i, w, o] = parts.as_slice() else {
        return Err(format!("expected `in,w,out`, got `{s}`"));
    };
    Ok((i.parse()?, w.parse()?, o.parse()?))
}

pub fn format_triple((i, w, o): Triple) -> String {
    format!("{i},{w},{o}")
}

impl LayerFile {
    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing layer file {}", path.display()))
    }

    /// Precisions from the file, overridden by `prec` when given.
    pub fn triple(&self, prec: Option<Triple>) -> Result<Triple> {
        if let Some(t) = prec {
            return Ok(t);
        }
        let Some(p) = self.precision else {
            bail!("field `precision` missing and no --prec given");
        };
        let get = |field: &str, bits: u32| {
            Precision::from_bits(bits).with_context(|| format!("field `precision.{field}`: unsupported width {bits}"))
        };
        Ok((get("input", p.input)?, get("weights", p.weights)?, get("output", p.output)?))
    }

    /// Geometry with the given precisions. Only geometry is checked here.
    pub fn layer(&self, (prec_in, prec_w, prec_out): Triple) -> Result<LayerConfig> {
        let cfg = LayerConfig {
            in_h: self.in_h,
            in_w: self.in_w,
            in_c: self.in_c,
            out_c: self.out_c,
            kh: self.kh,
            kw: self.kw,
            stride: self.stride,
            pad: self.pad,
            prec_in,
            prec_w,
            prec_out,
        };
        // validate against the narrowest precisions so only shape errors surface
        cfg.with_precisions(Precision::Bits2, Precision::Bits2, Precision::Bits2)
            .validate()?;
        Ok(cfg)
    }
}
