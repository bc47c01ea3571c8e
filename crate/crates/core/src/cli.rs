//! The `fura` command-line tool.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or parse error, 3 numerical
//! or property failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::btt::io::layer_to_text;
use crate::btt::{BlockShape, BlockTTLayer, DesignCorner, Orientation};
use crate::diagnostics::{energy_ratio, spectral_report, ORTHONORMAL_TOL};
use crate::error::{Error, Result};
use crate::harness::{compare, compare_csv, parse_config_file, run, write_run, ConfigFile, ExperimentConfig, RunLog};
use crate::linalg::text::parse_matrix;
use crate::linalg::{gaussian, orthonormality_defect, DenseMatrix};
use crate::quant::{
    any_layer_from_text, nf4_dequantize, nf4_quantize, quantize_layer, quantized_layer_to_text, DEFAULT_GROUP_SIZE,
};
use crate::verify::{verify, SuiteName, Tolerances, VerifyOptions};

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_FAILURE: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "fura", version, about = "Full-rank block tensor-train adaptation toolkit")]
struct Cli {
    /// Master seed for every randomized step.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Tolerance override KEY=VALUE (repeatable); see `fura verify` output for keys.
    #[arg(long = "tol", global = true, value_name = "KEY=VALUE")]
    tol: Vec<String>,

    /// Directory for output artifacts.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Factor a weight matrix into a block tensor-train layer.
    Decompose(DecomposeArgs),
    /// Run the property battery.
    Verify(VerifyArgs),
    /// Run a fine-tuning experiment or suite from a JSON config.
    Train(TrainArgs),
    /// Compare a weight with its fine-tuned version.
    Diagnose(DiagnoseArgs),
    /// Store a layer's frozen L core in NF4.
    Quantize(QuantizeArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum OrientationArg {
    Column,
    Row,
}

impl From<OrientationArg> for Orientation {
    fn from(o: OrientationArg) -> Self {
        match o {
            OrientationArg::Column => Orientation::ColumnSliced,
            OrientationArg::Row => Orientation::RowSliced,
        }
    }
}

#[derive(Debug, Args)]
struct DecomposeArgs {
    /// Weight matrix in text format.
    #[arg(required_unless_present = "gaussian", conflicts_with = "gaussian")]
    input: Option<PathBuf>,

    /// Use a seeded standard Gaussian ROWSxCOLS weight instead of a file.
    #[arg(long, value_name = "ROWSxCOLS")]
    gaussian: Option<String>,

    /// Number of blocks [default: balanced].
    #[arg(long)]
    n: Option<usize>,

    /// Block width along the sliced axis [default: balanced].
    #[arg(long)]
    b: Option<usize>,

    /// Slicing axis [default: natural for the corner].
    #[arg(long, value_enum)]
    orientation: Option<OrientationArg>,

    /// Design corner.
    #[arg(long, default_value = "input-separate", value_parser = parse_corner)]
    corner: DesignCorner,

    /// Layer output file [default: <out-dir>/layer.txt when --out-dir is set].
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    /// Run only these suites.
    #[arg(long, value_enum, value_delimiter = ',')]
    only: Vec<SuiteName>,

    #[arg(long, value_enum, hide = true)]
    inject_fault: Option<SuiteName>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Experiment or suite config (JSON).
    config: PathBuf,
}

#[derive(Debug, Args)]
struct DiagnoseArgs {
    /// Pretrained weight.
    w: PathBuf,

    /// Fine-tuned weight.
    w_prime: PathBuf,

    /// Gradient to measure against the same subspace.
    #[arg(long)]
    grad: Option<PathBuf>,

    /// Subspace dimension [default: min(d_out, d_in) / 4].
    #[arg(long)]
    k: Option<usize>,

    /// `w` for the top-k left singular vectors of W, or a file with orthonormal columns.
    #[arg(long, default_value = "w")]
    u_source: String,

    /// Report file [default: <out-dir>/spectral_report.json, else ./spectral_report.json].
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct QuantizeArgs {
    /// Layer file written by `decompose`.
    layer: PathBuf,

    /// Scalars per absmax scale.
    #[arg(long, default_value_t = DEFAULT_GROUP_SIZE)]
    group_size: usize,

    /// Quantized layer file [default: <out-dir>/quantized_layer.txt].
    #[arg(short, long)]
    output: Option<PathBuf>,
}

fn parse_corner(s: &str) -> std::result::Result<DesignCorner, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

enum Failure {
    Usage(String),
    Error(Error),
    /// A check ran and failed; the command already reported the details.
    Check,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

type CmdResult = std::result::Result<(), Failure>;

/// Exit code for a library error.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Parse { .. }
        | Error::Json(_)
        | Error::Config { .. }
        | Error::Dimension(_)
        | Error::Io(_)
        | Error::Domain(_) => EXIT_DATA,
        Error::Contract(_) | Error::Numerical(_) | Error::NonFinite { .. } => EXIT_FAILURE,
    }
}

/// Parses `args` (program name first), runs the command and returns its exit code.
pub fn main_with<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(&cli) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
        Err(Failure::Check) => EXIT_FAILURE,
    }
}

fn dispatch(cli: &Cli) -> CmdResult {
    let tol = tolerances(&cli.tol)?;
    match &cli.command {
        Command::Decompose(a) => decompose(cli, &tol, a),
        Command::Verify(a) => verify_cmd(cli, tol, a),
        Command::Train(a) => train(cli, a),
        Command::Diagnose(a) => diagnose(cli, a),
        Command::Quantize(a) => quantize(cli, a),
    }
}

fn tolerances(overrides: &[String]) -> std::result::Result<Tolerances, Failure> {
    let mut tol = Tolerances::default();
    for entry in overrides {
        let (key, value) =
            entry.split_once('=').ok_or_else(|| Failure::Usage(format!("--tol expects KEY=VALUE, got `{entry}`")))?;
        let value: f64 =
            value.parse().map_err(|_| Failure::Usage(format!("--tol {key}: `{value}` is not a number")))?;
        tol.set(key, value).map_err(|e| Failure::Usage(e.to_string()))?;
    }
    Ok(tol)
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn read_matrix(path: &Path) -> Result<DenseMatrix> {
    parse_matrix(&read_text(path)?)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, contents)?;
    Ok(())
}

/// `explicit`, else `name` inside the output directory.
fn output_path(cli: &Cli, explicit: &Option<PathBuf>, name: &str) -> Option<PathBuf> {
    explicit.clone().or_else(|| cli.out_dir.as_ref().map(|d| d.join(name)))
}

fn parse_dims(spec: &str) -> std::result::Result<(usize, usize), Failure> {
    let bad = || Failure::Usage(format!("--gaussian expects ROWSxCOLS, got `{spec}`"));
    let (r, c) = spec.split_once(['x', 'X']).ok_or_else(bad)?;
    let r: usize = r.trim().parse().map_err(|_| bad())?;
    let c: usize = c.trim().parse().map_err(|_| bad())?;
    if r == 0 || c == 0 {
        return Err(bad());
    }
    Ok((r, c))
}

fn resolve_shape(a: &DecomposeArgs, d_out: usize, d_in: usize) -> Result<BlockShape> {
    let orientation = a.orientation.map_or(a.corner.natural_orientation(), Orientation::from);
    let axis = match orientation {
        Orientation::ColumnSliced => d_in,
        Orientation::RowSliced => d_out,
    };
    let divides = |k: usize| k > 0 && axis % k == 0;
    let shape = match (a.n, a.b) {
        (None, None) => return BlockShape::balanced(d_out, d_in, orientation),
        (Some(n), Some(b)) => BlockShape { n, b, orientation },
        (Some(n), None) if divides(n) => BlockShape { n, b: axis / n, orientation },
        (None, Some(b)) if divides(b) => BlockShape { n: axis / b, b, orientation },
        (n, b) => {
            let k = n.or(b).unwrap_or(0);
            return Err(Error::dim(format!("{k} does not divide the sliced dimension {axis}")));
        }
    };
    shape.validate(d_out, d_in)?;
    Ok(shape)
}

fn decompose(cli: &Cli, tol: &Tolerances, a: &DecomposeArgs) -> CmdResult {
    let w = match (&a.input, &a.gaussian) {
        (Some(path), _) => read_matrix(path)?,
        (None, Some(spec)) => {
            let (r, c) = parse_dims(spec)?;
            gaussian(r, c, cli.seed.unwrap_or(0), 1.0)
        }
        (None, None) => return Err(Failure::Usage("need an input file or --gaussian".into())),
    };
    let (d_out, d_in) = w.shape();
    let shape = resolve_shape(a, d_out, d_in)?;
    let layer = BlockTTLayer::block_svd_init(&w, shape, a.corner)?;
    let norm = w.frobenius_norm();
    let diff = layer.merge().sub(&w)?.frobenius_norm();
    let residual = if norm > 0.0 { diff / norm } else { diff };
    let count = layer.param_count();
    println!(
        "shape={d_out}x{d_in} n={} b={} orientation={} corner={} rank={}",
        shape.n,
        shape.b,
        shape.orientation.name(),
        a.corner,
        layer.rank()
    );
    println!("residual_rel={residual:.3e}");
    println!("trainable={} frozen={}", count.trainable, count.frozen);
    if let Some(path) = output_path(cli, &a.output, "layer.txt") {
        write_file(&path, &layer_to_text(&layer))?;
    }
    if !(residual <= tol.lossless) {
        eprintln!("error: reconstruction residual {residual:.3e} exceeds {:.1e}", tol.lossless);
        return Err(Failure::Check);
    }
    Ok(())
}

fn verify_cmd(cli: &Cli, tolerances: Tolerances, a: &VerifyArgs) -> CmdResult {
    let report = verify(&VerifyOptions {
        seed: cli.seed.unwrap_or(0),
        tolerances,
        only: a.only.clone(),
        inject_fault: a.inject_fault,
    });
    for s in &report.suites {
        let status = if s.passed { "PASS" } else { "FAIL" };
        eprintln!(
            "{status} {:<15} checks={:<4} worst={:.3e} tol={:.1e}",
            s.suite.name(),
            s.checks,
            s.worst,
            s.tolerance
        );
        for f in &s.failures {
            eprintln!("    {f}");
        }
    }
    let json = serde_json::to_string_pretty(&report).map_err(Error::from)?;
    println!("{json}");
    if let Some(dir) = &cli.out_dir {
        write_file(&dir.join("verify.json"), &json)?;
    }
    if report.passed {
        Ok(())
    } else {
        Err(Failure::Check)
    }
}

fn summary_line(log: &RunLog) {
    let last = log.last();
    println!(
        "{:<28} train_loss={:.4e} heldout_loss={:.4e} rank={} forgetting={:.4e}",
        log.method, last.train_loss, last.heldout_loss, log.numeric_rank_delta, log.forgetting
    );
}

fn train(cli: &Cli, a: &TrainArgs) -> CmdResult {
    let text = read_text(&a.config)?;
    let apply = |c: &mut ExperimentConfig| {
        if let Some(seed) = cli.seed {
            c.seed = seed;
        }
    };
    match parse_config_file(&text)? {
        ConfigFile::Single(mut config) => {
            apply(&mut config);
            if let Some(dir) = &cli.out_dir {
                config.output.dir = Some(dir.clone());
            }
            let log = run(&config)?;
            summary_line(&log);
            if let Some(dir) = &config.output.dir {
                write_run(&log, dir)?;
            }
        }
        ConfigFile::Suite(suite) => {
            let mut configs = suite.configs;
            configs.iter_mut().for_each(apply);
            let dir = cli.out_dir.clone().or_else(|| configs.first().and_then(|c| c.output.dir.clone()));
            let (logs, rows) = compare(&configs)?;
            for log in &logs {
                summary_line(log);
            }
            if let Some(dir) = dir {
                for (i, log) in logs.iter().enumerate() {
                    write_run(log, &dir.join(format!("{i:02}_{}", log.method)))?;
                }
                write_file(&dir.join("comparison.csv"), &compare_csv(&rows)?)?;
            }
        }
    }
    Ok(())
}

fn diagnose(cli: &Cli, a: &DiagnoseArgs) -> CmdResult {
    let w = read_matrix(&a.w)?;
    let w_prime = read_matrix(&a.w_prime)?;
    if w.shape() != w_prime.shape() {
        return Err(Error::dim(format!("w is {:?} but w' is {:?}", w.shape(), w_prime.shape())).into());
    }
    let grad = a.grad.as_deref().map(read_matrix).transpose()?;
    let basis = match a.u_source.as_str() {
        "w" => None,
        path => {
            let u = read_matrix(Path::new(path))?;
            if u.rows() != w.rows() {
                return Err(Error::dim(format!("basis has {} rows, w has {}", u.rows(), w.rows())).into());
            }
            if orthonormality_defect(&u) > ORTHONORMAL_TOL {
                return Err(Error::Domain(format!("basis `{path}` does not have orthonormal columns")).into());
            }
            Some(u)
        }
    };
    let k = match (&basis, a.k) {
        (Some(u), Some(k)) if k != u.cols() => {
            return Err(Failure::Usage(format!("--k {k} disagrees with the {}-column basis", u.cols())))
        }
        (Some(u), _) => u.cols(),
        (None, Some(k)) => k,
        (None, None) => (w.rows().min(w.cols()) / 4).max(1),
    };
    let mut report = spectral_report(&w, &w_prime, grad.as_ref(), k)?;
    if let Some(u) = &basis {
        let delta = w_prime.sub(&w)?;
        let ratio = |m: &DenseMatrix| -> Result<Option<f64>> {
            if m.frobenius_norm() > 0.0 {
                energy_ratio(m, u).map(Some)
            } else {
                Ok(None)
            }
        };
        report.energy_ratio_weight = ratio(&delta)?;
        report.energy_ratio_grad = match &grad {
            Some(g) => ratio(g)?,
            None => None,
        };
    }
    report.validate()?;
    let finite: Vec<f64> = report.sv_ratio.iter().copied().filter(|v| v.is_finite()).collect();
    let min = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let max = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let opt = |v: Option<f64>| v.map_or("none".to_string(), |x| format!("{x:.6}"));
    println!("k={k} gaussian_baseline={:.6}", report.gaussian_baseline);
    println!("sv_ratio_min={min:.6} sv_ratio_max={max:.6}");
    println!(
        "energy_ratio_weight={} energy_ratio_grad={}",
        opt(report.energy_ratio_weight),
        opt(report.energy_ratio_grad)
    );
    println!("numeric_rank_delta={} eff_rank_delta={}", report.numeric_rank_delta, opt(report.eff_rank_delta));
    let path = output_path(cli, &a.output, "spectral_report.json").unwrap_or_else(|| "spectral_report.json".into());
    write_file(&path, &report.to_json())?;
    Ok(())
}

fn quantize(cli: &Cli, a: &QuantizeArgs) -> CmdResult {
    let path = output_path(cli, &a.output, "quantized_layer.txt")
        .ok_or_else(|| Failure::Usage("quantize needs -o or --out-dir".into()))?;
    let (layer, _) = any_layer_from_text(&read_text(&a.layer)?)?;
    let (q, stats) = quantize_layer(&layer, a.group_size)?;
    let mut idempotent = true;
    for (s, t) in stats.iter().zip(q.l_quant()) {
        println!(
            "block={} max_abs={:.4e} rel_frobenius={:.4e} mean_rel={:.4e} rel_abs={:.4e}",
            s.block, s.max_abs, s.rel_frobenius, s.mean_rel, s.rel_abs
        );
        idempotent &= nf4_quantize(&nf4_dequantize(t)?, a.group_size)? == *t;
    }
    println!("idempotent={idempotent}");
    write_file(&path, &quantized_layer_to_text(&q))?;
    if !idempotent {
        eprintln!("error: re-quantizing the dequantized core changed it");
        return Err(Failure::Check);
    }
    Ok(())
}
