use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use mpq_cli::config::{parse_triple, Triple};
use mpq_cli::{BenchModelArgs, GenArgs, RunArgs, Selection, VerifyArgs};

/// Mixed-precision quantized convolution: verification, generation and cost reports.
#[derive(Parser)]
#[command(name = "mpq", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Select {
    /// Precision triple `in,w,out`, e.g. `8,4,2`. Overrides the layer file.
    #[arg(long, value_parser = parse_triple, conflicts_with = "all")]
    prec: Option<Triple>,
    /// All 27 precision triples.
    #[arg(long)]
    all: bool,
}

impl Select {
    fn selection(&self) -> Selection {
        if self.all {
            Selection::All
        } else {
            Selection::One(self.prec)
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Check the kernels against the reference on seeded random tensors.
    Verify {
        #[arg(long)]
        layer: PathBuf,
        #[command(flatten)]
        select: Select,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        cores: usize,
    },
    /// Modeled cycle counts on one core and on `--cores` cores.
    BenchModel {
        #[arg(long)]
        layer: PathBuf,
        #[command(flatten)]
        select: Select,
        #[arg(long, default_value_t = 8)]
        cores: usize,
        /// Parallel efficiency in (0, 1]; defaults to 7.5/8.
        #[arg(long)]
        efficiency: Option<f64>,
        /// Emit CSV instead of a table.
        #[arg(long)]
        csv: bool,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write seeded random input, weights and quantization parameters.
    Gen {
        #[arg(long)]
        layer: PathBuf,
        #[arg(long, value_parser = parse_triple)]
        prec: Option<Triple>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Convolve stored tensors.
    Run {
        #[arg(long)]
        layer: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        /// Quantization file; falls back to the layer file's `quant` table.
        #[arg(long)]
        quant: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        cores: usize,
        /// Also compare against the reference implementation.
        #[arg(long)]
        check: bool,
    },
}

fn run(cli: Cli) -> Result<bool> {
    let stdout = io::stdout();
    let mut stdout = stdout.lock();
    match cli.command {
        Command::Verify { layer, select, seed, cores } => {
            mpq_cli::cmd_verify(&VerifyArgs { layer, selection: select.selection(), seed, cores }, &mut stdout)
        }
        Command::BenchModel { layer, select, cores, efficiency, csv, out } => {
            let args = BenchModelArgs { layer, selection: select.selection(), cores, efficiency, csv };
            match out {
                Some(path) => {
                    let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
                    let mut w = BufWriter::new(file);
                    mpq_cli::cmd_bench_model(&args, &mut w)?;
                    w.flush()?;
                }
                None => mpq_cli::cmd_bench_model(&args, &mut stdout)?,
            }
            Ok(true)
        }
        Command::Gen { layer, prec, seed, out } => {
            mpq_cli::cmd_gen(&GenArgs { layer, prec, seed, out }, &mut stdout)?;
            Ok(true)
        }
        Command::Run { layer, input, weights, quant, out, cores, check } => {
            mpq_cli::cmd_run(&RunArgs { layer, input, weights, quant, out, cores, check }, &mut stdout)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
