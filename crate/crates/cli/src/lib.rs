//! Command implementations behind the `mpq` binary.
//!
//! Every command writes its report to a caller-supplied writer so the same
//! code runs under the binary and under tests.

pub mod config;
pub mod report;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use mpq_core::oracle::compare_tensors;
use mpq_core::synth::{self, LayerCase};
use mpq_core::{conv_mixed, conv_reference, CostModel, IntTensor, IntWeights, PackedTensor, Precision, WeightTensor};

use config::{format_triple, LayerFile, QuantFile, Triple};

pub const INPUT_FILE: &str = "input.pqt";
pub const WEIGHTS_FILE: &str = "weights.pqt";
pub const QUANT_FILE: &str = "quant.toml";

/// Which precision triples a command covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selection {
    /// `--prec`, or the layer file's `[precision]` table when `None`.
    One(Option<Triple>),
    All,
}

impl Selection {
    pub fn resolve(self, layer: &LayerFile) -> Result<Vec<Triple>> {
        match self {
            Selection::All => Ok(Precision::triples().collect()),
            Selection::One(prec) => Ok(vec![layer.triple(prec)?]),
        }
    }
}

#[derive(Debug, Clone)]
pub struct VerifyArgs {
    pub layer: PathBuf,
    pub selection: Selection,
    pub seed: u64,
    pub cores: usize,
}

/// Runs the kernels against the oracle on seeded random data. Returns
/// whether every permutation matched.
pub fn cmd_verify(args: &VerifyArgs, out: &mut dyn Write) -> Result<bool> {
    ensure!(args.cores >= 1, "--cores must be at least 1");
    let layer = LayerFile::load(&args.layer)?;
    let triples = args.selection.resolve(&layer)?;
    let mut passed = 0;
    for &triple in &triples {
        let cfg = layer.layer(triple)?;
        let name = format_triple(triple);
        let start = Instant::now();
        let outcome = (|| -> Result<Option<String>> {
            let case = synth::random_case(&cfg, &mut synth::rng(synth::permutation_seed(args.seed, triple)))?;
            let (got, expected) = run_both(&case, args.cores)?;
            Ok(compare_tensors(&got, &expected)?.map(|m| m.to_string()))
        })();
        let ms = start.elapsed().as_millis();
        match outcome {
            Ok(None) => {
                passed += 1;
                writeln!(out, "PASS  {name}  ({ms} ms)")?;
            }
            Ok(Some(m)) => writeln!(out, "FAIL  {name}  first mismatch: {m}")?,
            Err(e) => writeln!(out, "FAIL  {name}  error: {e:#}")?,
        }
    }
    writeln!(out, "{passed}/{} passed", triples.len())?;
    Ok(passed == triples.len())
}

fn run_both(case: &LayerCase, cores: usize) -> Result<(PackedTensor, IntTensor)> {
    let got = conv_mixed(&case.input, &case.weights, &case.cfg, &case.quant, cores)?;
    let expected = conv_reference(
        &IntTensor::from_packed(&case.input),
        &IntWeights::from_weight_tensor(&case.weights),
        &case.cfg,
        &case.quant,
    )?;
    Ok((got, expected))
}

#[derive(Debug, Clone)]
pub struct BenchModelArgs {
    pub layer: PathBuf,
    pub selection: Selection,
    pub cores: usize,
    pub efficiency: Option<f64>,
    pub csv: bool,
}

/// Cost-model report for each selected triple on one core and on `cores`.
pub fn cmd_bench_model(args: &BenchModelArgs, out: &mut dyn Write) -> Result<()> {
    ensure!(args.cores >= 1, "--cores must be at least 1");
    let layer = LayerFile::load(&args.layer)?;
    let triples = args.selection.resolve(&layer)?;
    let model = match args.efficiency {
        Some(e) => CostModel::with_efficiency(e)?,
        None => CostModel::default(),
    };
    let mut core_counts = vec![1, args.cores];
    core_counts.dedup();

    let mut rows = Vec::new();
    for &triple in &triples {
        let cfg = layer.layer(triple)?;
        for &cores in &core_counts {
            rows.push(report::CostRow::new(&model, &cfg, cores));
        }
    }
    if args.csv {
        report::write_csv(&rows, out)
    } else {
        report::write_table(&rows, out)
    }
}

#[derive(Debug, Clone)]
pub struct GenArgs {
    pub layer: PathBuf,
    pub prec: Option<Triple>,
    pub seed: u64,
    pub out: PathBuf,
}

/// Writes a seeded random input, weights and quantization file into a
/// directory. Returns the three paths.
pub fn cmd_gen(args: &GenArgs, out: &mut dyn Write) -> Result<[PathBuf; 3]> {
    let layer = LayerFile::load(&args.layer)?;
    let triple = layer.triple(args.prec)?;
    let cfg = layer.layer(triple)?;
    let case = synth::random_case(&cfg, &mut synth::rng(args.seed))?;
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;

    let paths = [INPUT_FILE, WEIGHTS_FILE, QUANT_FILE].map(|f| args.out.join(f));
    case.input.write_file(&paths[0])?;
    case.weights.packed.write_file(&paths[1])?;
    std::fs::write(&paths[2], QuantFile::from_layer_quant(&case.quant).to_toml())
        .with_context(|| format!("writing {}", paths[2].display()))?;
    for p in &paths {
        writeln!(out, "wrote {}", p.display())?;
    }
    Ok(paths)
}

#[derive(Debug, Clone)]
pub struct RunArgs {
    pub layer: PathBuf,
    pub input: PathBuf,
    pub weights: PathBuf,
    pub quant: Option<PathBuf>,
    pub out: PathBuf,
    pub cores: usize,
    pub check: bool,
}

/// Convolves stored tensors and writes the packed output. With `check`,
/// also compares against the oracle; returns whether it matched.
pub fn cmd_run(args: &RunArgs, out: &mut dyn Write) -> Result<bool> {
    ensure!(args.cores >= 1, "--cores must be at least 1");
    let layer = LayerFile::load(&args.layer)?;
    let quant_file = match (&args.quant, &layer.quant) {
        (Some(p), _) => QuantFile::load(p)?,
        (None, Some(q)) => q.clone(),
        (None, None) => bail!("no quantization parameters: pass --quant or add a `quant` table to the layer file"),
    };
    let quant = quant_file.to_layer_quant()?;

    let input = read_tensor(&args.input)?;
    let packed_w = read_tensor(&args.weights)?;
    let triple = (input.precision, packed_w.precision, precision_of("output.n_bits", quant.output.n_bits)?);
    if layer.precision.is_some() {
        let declared = layer.triple(None)?;
        ensure!(
            declared == triple,
            "field `precision`: layer declares {} but tensors and quantization file give {}",
            format_triple(declared),
            format_triple(triple)
        );
    }
    check_tensor_quant("input", &input, &quant.input)?;
    check_tensor_quant("weights", &packed_w, &quant.weights)?;
    let cfg = layer.layer(triple)?;
    let weights = WeightTensor::from_packed(packed_w, cfg.kh, cfg.kw, cfg.in_c)
        .with_context(|| format!("weights {} do not match the layer", args.weights.display()))?;

    let result = conv_mixed(&input, &weights, &cfg, &quant, args.cores)?;
    result.write_file(&args.out)?;
    writeln!(
        out,
        "wrote {} ({}x{}x{}, {}-bit)",
        args.out.display(),
        result.h,
        result.w,
        result.c,
        result.precision.bits()
    )?;
    if !args.check {
        return Ok(true);
    }
    let expected = conv_reference(&IntTensor::from_packed(&input), &IntWeights::from_weight_tensor(&weights), &cfg, &quant)?;
    match compare_tensors(&result, &expected)? {
        None => {
            writeln!(out, "check: output matches reference")?;
            Ok(true)
        }
        Some(m) => {
            writeln!(out, "check: first mismatch: {m}")?;
            Ok(false)
        }
    }
}

fn read_tensor(path: &Path) -> Result<PackedTensor> {
    PackedTensor::read_file(path).with_context(|| format!("reading tensor {}", path.display()))
}

fn precision_of(field: &str, bits: u32) -> Result<Precision> {
    Precision::from_bits(bits).with_context(|| format!("field `{field}`: unsupported width {bits}"))
}

fn check_tensor_quant(table: &str, t: &PackedTensor, q: &mpq_core::QuantParams) -> Result<()> {
    ensure!(
        t.quant.n_bits == q.n_bits && t.quant.eps == q.eps && t.quant.alpha == q.alpha,
        "field `{table}`: quantization file ({}-bit, eps {}, alpha {}) disagrees with tensor header ({}-bit, eps {}, alpha {})",
        q.n_bits,
        q.eps,
        q.alpha,
        t.quant.n_bits,
        t.quant.eps,
        t.quant.alpha
    );
    Ok(())
}
