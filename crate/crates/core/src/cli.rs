//! The `pquant` command line.
//!
//! Exit codes: 0 on success, 1 when an equivalence or internal check fails,
//! 2 for usage errors and unreadable or unwritable files.
//!
//! Every report starts with provenance: a `# pquant <version> <config>` line
//! in CSV, or `tool` and `config` fields on every JSON object. JSON output is
//! a flat array of objects whose remaining fields mirror the CSV columns.

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::bench::{self, BenchRow, DEFAULT_ITERS, DEFAULT_WARMUP, MIN_ITERS};
use crate::error::Error;
use crate::format;
use crate::metrics::{profile_layers, Strategy};
use crate::quantizer::{fake_quantize_ste_forward, BitWidth};
use crate::synthgen::{generate, resnet20_preset, GenSpec, DEFAULT_SEED};
use crate::tensor::Shape;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "pquant", version, about = "Per-channel activation quantization toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic activation tensor as a PQT1 file.
    Gen(GenArgs),
    /// Fake-quantize a PQT1 tensor and write the reconstruction.
    Quantize(QuantizeArgs),
    /// Report cosine similarity and relative error of quantized layers.
    Distort(DistortArgs),
    /// Check that in-loop and pre-scaled accumulation agree on random inputs.
    Equiv(EquivArgs),
    /// Time the three strategies over the ResNet-20 activation stack.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Resnet20,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("source").required(true).args(["shape", "preset"])))]
pub struct GenArgs {
    /// Tensor shape as N,C,H,W.
    #[arg(long, value_parser = parse_shape)]
    pub shape: Option<Shape>,
    /// Take the shape and generator settings from a preset layer.
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Preset layer index.
    #[arg(long, default_value_t = 0, requires = "preset")]
    pub layer: usize,
    /// Override the preset batch size.
    #[arg(long, requires = "preset")]
    pub batch: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    /// Ratio of largest to smallest channel scale [default: 1, preset: 16].
    #[arg(long)]
    pub spread: Option<f64>,
    /// Right-skew strength [default: 0, preset: 0.5].
    #[arg(long)]
    pub skew: Option<f64>,
    /// Clip negative values to zero [preset: on].
    #[arg(long)]
    pub nonneg: bool,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    #[arg(short, long)]
    pub input: PathBuf,
    #[arg(short, long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u32).range(2..=8))]
    pub bits: u32,
    /// layerwise, inloop or prescaled.
    #[arg(long, default_value = "prescaled")]
    pub strategy: Strategy,
}

#[derive(Debug, Args)]
pub struct DistortArgs {
    /// One PQT1 file per layer.
    #[arg(short, long, num_args = 1.., required = true)]
    pub input: Vec<PathBuf>,
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u32).range(2..=8))]
    pub bits: u32,
    /// layerwise, inloop or prescaled.
    #[arg(long, default_value = "prescaled")]
    pub strategy: Strategy,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    /// Write the report here instead of standard output.
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EquivArgs {
    #[arg(long, default_value_t = 200)]
    pub trials: usize,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Comma-separated batch sizes.
    #[arg(long, value_delimiter = ',', default_value = "16,32,64,128,200")]
    pub batches: Vec<usize>,
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u32).range(2..=8))]
    pub bits: u32,
    #[arg(long, default_value_t = DEFAULT_WARMUP)]
    pub warmup: usize,
    #[arg(long, default_value_t = DEFAULT_ITERS)]
    pub iters: usize,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

fn parse_shape(s: &str) -> Result<Shape, String> {
    let dims: Vec<usize> = s
        .split(',')
        .map(|d| d.trim().parse::<usize>().map_err(|e| format!("{d:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match dims[..] {
        [n, c, h, w] => Shape::new(n, c, h, w).map_err(|e| e.to_string()),
        _ => Err(format!("expected N,C,H,W, got {} values", dims.len())),
    }
}

/// A failed command: message for standard error plus exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    fn failed(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_FAILURE,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Divergence { .. } => Failure::failed(e.to_string()),
            _ => Failure::usage(e.to_string()),
        }
    }
}

type CmdResult = Result<(), Failure>;

/// Parses `args` (including the program name) and runs the command. Reports
/// go to `stdout` unless redirected with `--output`; diagnostics go to
/// `stderr`. Returns the process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let sink: &mut dyn Write = if e.use_stderr() { stderr } else { stdout };
            let _ = sink.write_all(text.as_bytes());
            return code;
        }
    };
    let result = match &cli.command {
        Command::Gen(a) => cmd_gen(a, stdout),
        Command::Quantize(a) => cmd_quantize(a, stdout),
        Command::Distort(a) => cmd_distort(a, stdout),
        Command::Equiv(a) => cmd_equiv(a, stdout),
        Command::Bench(a) => cmd_bench(a, stdout),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(f) => {
            let _ = writeln!(stderr, "pquant: {}", f.message);
            f.code
        }
    }
}

fn provenance(command: &str, config: &[(&str, String)]) -> String {
    let mut s = format!("command={command}");
    for (k, v) in config {
        s.push_str(&format!(" {k}={v}"));
    }
    s
}

fn tool() -> String {
    format!("pquant {VERSION}")
}

#[derive(Serialize)]
struct Tagged<'a, T: Serialize> {
    tool: &'a str,
    config: &'a str,
    #[serde(flatten)]
    row: &'a T,
}

fn render<T: Serialize>(rows: &[T], fmt: Format, config: &str) -> Result<Vec<u8>, Failure> {
    let tool = tool();
    match fmt {
        Format::Csv => {
            let mut out = format!("# {tool} {config}\n").into_bytes();
            let mut w = csv::WriterBuilder::new()
                .terminator(csv::Terminator::Any(b'\n'))
                .from_writer(&mut out);
            for r in rows {
                w.serialize(r).map_err(|e| Failure::failed(e.to_string()))?;
            }
            w.flush().map_err(|e| Failure::failed(e.to_string()))?;
            drop(w);
            Ok(out)
        }
        Format::Json => {
            let tagged: Vec<_> = rows
                .iter()
                .map(|row| Tagged {
                    tool: &tool,
                    config,
                    row,
                })
                .collect();
            let mut out =
                serde_json::to_vec_pretty(&tagged).map_err(|e| Failure::failed(e.to_string()))?;
            out.push(b'\n');
            Ok(out)
        }
    }
}

fn emit(bytes: &[u8], output: Option<&Path>, stdout: &mut dyn Write) -> CmdResult {
    match output {
        Some(path) => std::fs::write(path, bytes)
            .map_err(|e| Failure::usage(format!("cannot write {}: {e}", path.display()))),
        None => stdout
            .write_all(bytes)
            .map_err(|e| Failure::usage(format!("cannot write report: {e}"))),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Failure::usage(format!("cannot write {}: {e}", path.display())))
}

fn load(path: &Path) -> Result<crate::tensor::ActivationTensor, Failure> {
    format::load(path).map_err(|e| Failure::usage(format!("cannot read {}: {e}", path.display())))
}

fn bits(b: u32) -> Result<BitWidth, Failure> {
    BitWidth::new(b).map_err(|e| Failure::usage(e.to_string()))
}

/// Resolves the generator spec for `gen`.
pub fn gen_spec(a: &GenArgs) -> Result<GenSpec, Failure> {
    let mut spec = match (a.shape, a.preset) {
        (Some(shape), None) => GenSpec::new(a.seed, shape),
        (None, Some(Preset::Resnet20)) => {
            let preset = resnet20_preset(a.seed);
            let mut spec = *preset.get(a.layer).ok_or_else(|| {
                Failure::usage(format!(
                    "layer {} out of range, preset has {} layers",
                    a.layer,
                    preset.len()
                ))
            })?;
            if let Some(n) = a.batch {
                spec = spec.with_batch(n)?;
            }
            spec
        }
        _ => return Err(Failure::usage("exactly one of --shape or --preset is required")),
    };
    if let Some(s) = a.spread {
        spec.channel_spread = s;
    }
    if let Some(k) = a.skew {
        spec.skew = k;
    }
    if a.nonneg {
        spec.nonneg = true;
    }
    spec.validate()?;
    Ok(spec)
}

fn cmd_gen(a: &GenArgs, stdout: &mut dyn Write) -> CmdResult {
    let spec = gen_spec(a)?;
    let tensor = generate(&spec)?;
    let mut out = create(&a.output)?;
    format::write_tensor(&mut out, &tensor)
        .map_err(|e| Failure::usage(format!("cannot write {}: {e}", a.output.display())))?;
    let config = provenance(
        "gen",
        &[
            ("seed", spec.seed.to_string()),
            ("shape", spec.shape.to_string()),
            ("spread", spec.channel_spread.to_string()),
            ("skew", spec.skew.to_string()),
            ("nonneg", spec.nonneg.to_string()),
        ],
    );
    writeln!(stdout, "# {} {config}\nwrote {}", tool(), a.output.display())
        .map_err(|e| Failure::usage(e.to_string()))
}

fn cmd_quantize(a: &QuantizeArgs, stdout: &mut dyn Write) -> CmdResult {
    let input = load(&a.input)?;
    let recon = fake_quantize_ste_forward(&input, bits(a.bits)?, a.strategy.granularity())?;
    let mut out = create(&a.output)?;
    format::write_tensor(&mut out, &recon)
        .map_err(|e| Failure::usage(format!("cannot write {}: {e}", a.output.display())))?;
    let config = provenance(
        "quantize",
        &[("bits", a.bits.to_string()), ("strategy", a.strategy.to_string())],
    );
    writeln!(stdout, "# {} {config}\nwrote {}", tool(), a.output.display())
        .map_err(|e| Failure::usage(e.to_string()))
}

/// One row of the `distort` report. `layer` is the layer index, or `mean`
/// for the average over layers.
#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct DistortRow {
    pub strategy: Strategy,
    pub bits: u32,
    pub layer: String,
    pub cosine: f64,
    pub rel_error: f64,
}

fn cmd_distort(a: &DistortArgs, stdout: &mut dyn Write) -> CmdResult {
    let layers = a
        .input
        .iter()
        .map(|p| load(p))
        .collect::<Result<Vec<_>, _>>()?;
    let report = profile_layers(&layers, bits(a.bits)?, a.strategy)?;
    let mut rows: Vec<DistortRow> = report
        .per_layer
        .iter()
        .map(|l| DistortRow {
            strategy: a.strategy,
            bits: a.bits,
            layer: l.layer.to_string(),
            cosine: l.cosine,
            rel_error: l.rel_error,
        })
        .collect();
    rows.push(DistortRow {
        strategy: a.strategy,
        bits: a.bits,
        layer: "mean".into(),
        cosine: report.cosine,
        rel_error: report.rel_error,
    });
    let inputs: Vec<String> = a.input.iter().map(|p| p.display().to_string()).collect();
    let config = provenance(
        "distort",
        &[
            ("bits", a.bits.to_string()),
            ("strategy", a.strategy.to_string()),
            ("inputs", inputs.join(",")),
        ],
    );
    emit(&render(&rows, a.format, &config)?, a.output.as_deref(), stdout)
}

#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct EquivRow {
    pub trials: usize,
    pub max_rel_deviation: f64,
    pub tolerance: f64,
    pub status: String,
}

fn cmd_equiv(a: &EquivArgs, stdout: &mut dyn Write) -> CmdResult {
    if a.trials == 0 {
        return Err(Failure::usage("--trials must be at least 1"));
    }
    let report = bench::equivalence_check(a.trials, a.seed)?;
    let row = EquivRow {
        trials: report.trials,
        max_rel_deviation: report.max_deviation,
        tolerance: report.tolerance,
        status: if report.passed() { "pass" } else { "fail" }.into(),
    };
    let config = provenance(
        "equiv",
        &[("trials", a.trials.to_string()), ("seed", a.seed.to_string())],
    );
    emit(&render(&[row], a.format, &config)?, a.output.as_deref(), stdout)?;
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::failed(format!(
            "max relative deviation {:e} exceeds {:e}",
            report.max_deviation, report.tolerance
        )))
    }
}

fn cmd_bench(a: &BenchArgs, stdout: &mut dyn Write) -> CmdResult {
    if a.batches.is_empty() || a.batches.contains(&0) {
        return Err(Failure::usage("--batches needs one or more positive sizes"));
    }
    if a.iters < MIN_ITERS {
        return Err(Failure::usage(format!("--iters must be at least {MIN_ITERS}")));
    }
    let records = bench::bench_sweep(&a.batches, bits(a.bits)?, a.seed, a.warmup, a.iters)?;
    let rows: Vec<BenchRow> = records.iter().map(|r| r.row()).collect();
    let batches: Vec<String> = a.batches.iter().map(|b| b.to_string()).collect();
    let config = provenance(
        "bench",
        &[
            ("preset", "resnet20".into()),
            ("batches", batches.join(",")),
            ("bits", a.bits.to_string()),
            ("warmup", a.warmup.to_string()),
            ("iters", a.iters.to_string()),
            ("seed", a.seed.to_string()),
            ("layers", records[0].layers.to_string()),
            ("parallel", records[0].parallel.to_string()),
            ("avx2", records[0].avx2.to_string()),
        ],
    );
    emit(&render(&rows, a.format, &config)?, a.output.as_deref(), stdout)
}

/// Entry point for the binary.
pub fn main_with_std() -> i32 {
    let stdout = io::stdout();
    let stderr = io::stderr();
    run(std::env::args_os(), &mut stdout.lock(), &mut stderr.lock())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_parser() {
        assert_eq!(parse_shape("1,2,3,4").unwrap().dims(), [1, 2, 3, 4]);
        assert!(parse_shape("1,2,3").is_err());
        assert!(parse_shape("1,0,3,4").is_err());
        assert!(parse_shape("a,2,3,4").is_err());
    }

    #[test]
    fn usage_errors_exit_2() {
        let mut out = Vec::new();
        let mut err = Vec::new();
        assert_eq!(run(["pquant", "gen", "-o", "x.pqt"], &mut out, &mut err), EXIT_USAGE);
        assert_eq!(run(["pquant", "equiv", "--trials", "0"], &mut out, &mut err), EXIT_USAGE);
        assert_eq!(run(["pquant", "bench", "--iters", "3"], &mut out, &mut err), EXIT_USAGE);
        assert_eq!(run(["pquant", "quantize", "--bits", "9", "-i", "a", "-o", "b"], &mut out, &mut err), EXIT_USAGE);
        assert_eq!(run(["pquant"], &mut out, &mut err), EXIT_USAGE);
    }

    #[test]
    fn help_exits_0() {
        let mut out = Vec::new();
        let mut err = Vec::new();
        assert_eq!(run(["pquant", "--help"], &mut out, &mut err), EXIT_OK);
        let help = String::from_utf8(out).unwrap();
        assert!(help.contains("bench"));
    }
}
