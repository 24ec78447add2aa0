use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use padre_core::bench::{emit_csv, emit_fits_csv, write_csv, Precision, DEFAULT_CHANNELS, DEFAULT_REPS, DEFAULT_WARMUP, RECORD_COLUMNS};
use padre_core::verify::{self, EQUIV_SCHEMES};
use padre_core::{extract_coeffs, fit_scaling, run_bench, BenchConfig, BlockConfig, FlopLedger, PadreError, Scheme};

#[derive(Parser)]
#[command(name = "padre", version, about = "Polynomial attention blocks: benchmarks and verification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Time and count FLOPs over a sweep of token counts, writing CSV.
    Bench(BenchArgs),
    /// Run the invariant suites, or one adapter equivalence check.
    Verify(VerifyArgs),
    /// Dump the monomial coefficients of a small block.
    Expand(ExpandArgs),
    /// Finite-difference gradient checks as JSON lines.
    Gradcheck(SeedArg),
    /// Error of the truncated-exponential attention against softmax.
    ApproxAttn(ApproxArgs),
}

#[derive(Args)]
struct SeedArg {
    /// Overridden by the PADRE_SEED environment variable.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated scheme ids; a bare `padre` takes its degree from --degree.
    #[arg(long, value_delimiter = ',', default_value = "padre-2,padre-3,padre-4,softmax-attn,sima,castling,conv2former")]
    schemes: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "256,1024,2304,4096")]
    n_list: Vec<usize>,
    #[arg(long, default_value_t = DEFAULT_CHANNELS)]
    channels: usize,
    #[arg(long, default_value_t = 2)]
    degree: usize,
    #[arg(long, default_value_t = DEFAULT_REPS)]
    reps: usize,
    #[arg(long, default_value_t = DEFAULT_WARMUP)]
    warmup: usize,
    #[command(flatten)]
    seed: SeedArg,
    /// Record CSV path; fits go next to it as `<stem>.fits.csv`. Stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Scalar type of the block schemes (f32 or f64).
    #[arg(long, default_value = "f64")]
    precision: String,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(subcommand)]
    target: Option<VerifyTarget>,
    /// Also run the benchmark sweep and its scaling criteria.
    #[arg(long)]
    full: bool,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Subcommand)]
enum VerifyTarget {
    Equivalence {
        #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(EQUIV_SCHEMES))]
        scheme: String,
    },
}

#[derive(Args)]
struct ExpandArgs {
    /// Token count N.
    #[arg(long)]
    n: Option<usize>,
    /// Channel count D (same as --channels).
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    degree: Option<usize>,
    /// Block config JSON, instead of --n/--d/--degree.
    #[arg(long, conflicts_with_all = ["n", "d", "channels", "degree"])]
    config: Option<PathBuf>,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Args)]
struct ApproxArgs {
    #[arg(long, default_value_t = 12)]
    max_degree: usize,
    #[command(flatten)]
    seed: SeedArg,
}

/// Failure classes mapped to exit codes.
enum Failure {
    Usage(anyhow::Error),
    Check(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Check(e)
    }
}

impl From<PadreError> for Failure {
    fn from(e: PadreError) -> Self {
        Failure::Check(e.into())
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(anyhow::anyhow!(msg.into()))
}

fn seed(arg: &SeedArg) -> Result<u64, Failure> {
    match std::env::var("PADRE_SEED") {
        Ok(v) => v.trim().parse().map_err(|_| usage(format!("PADRE_SEED `{v}` is not an unsigned integer"))),
        Err(_) => Ok(arg.seed),
    }
}

fn parse_schemes(names: &[String], degree: usize) -> Result<Vec<Scheme>, Failure> {
    names
        .iter()
        .map(|s| {
            let s = s.trim();
            let id = if s == "padre" { format!("padre-{degree}") } else { s.to_string() };
            id.parse::<Scheme>().map_err(|e| usage(e.to_string()))
        })
        .collect()
}

fn fits_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("bench");
    out.with_file_name(format!("{stem}.fits.csv"))
}

fn bench(args: &BenchArgs) -> Result<(), Failure> {
    let cfg = BenchConfig {
        schemes: parse_schemes(&args.schemes, args.degree)?,
        n_list: args.n_list.clone(),
        channels: args.channels,
        reps: args.reps,
        warmup: args.warmup,
        seed: seed(&args.seed)?,
        precision: args.precision.parse::<Precision>().map_err(|e| usage(e.to_string()))?,
    };
    let records = run_bench(&cfg).map_err(|e| match e {
        PadreError::Config(_) | PadreError::UnknownScheme(_) => usage(e.to_string()),
        other => other.into(),
    })?;
    let fits = fit_scaling(&records);
    match &args.out {
        Some(path) => {
            emit_csv(&records, path).with_context(|| format!("writing {}", path.display()))?;
            if let Ok(fits) = &fits {
                let fp = fits_path(path);
                emit_fits_csv(fits, &fp).with_context(|| format!("writing {}", fp.display()))?;
            }
        }
        None => write_csv(&records, &RECORD_COLUMNS, std::io::stdout().lock())?,
    }
    match fits {
        Ok(fits) => {
            for f in fits {
                eprintln!("{}: flop exponent {:.3}, time exponent {:.3}", f.scheme, f.flop_exponent, f.time_exponent);
            }
        }
        Err(e) => log::info!("no scaling fit: {e}"),
    }
    Ok(())
}

fn verify(args: &VerifyArgs) -> Result<(), Failure> {
    let seed = seed(&args.seed)?;
    if let Some(VerifyTarget::Equivalence { scheme }) = &args.target {
        let report = verify::equivalence_report(scheme, seed)?;
        println!("{}", report.to_json_line());
        if !report.pass {
            return Err(anyhow::anyhow!("{scheme} equivalence failed").into());
        }
        return Ok(());
    }
    for report in verify::gradcheck_reports(seed)? {
        println!("{}", report.to_json_line());
    }
    let mut results = verify::quick_suites(seed);
    if args.full {
        let start = std::time::Instant::now();
        let records = run_bench(&verify::complexity_bench_config(seed))?;
        let seconds = start.elapsed().as_secs_f64();
        results.push(verify::complexity_suite(&records, seconds, seed));
        results.push(verify::degree_ratio_suite(&records));
    }
    for r in &results {
        println!("{r}");
    }
    let failed = results.iter().filter(|r| !r.pass).count();
    if failed > 0 {
        return Err(anyhow::anyhow!("{failed} suite(s) failed").into());
    }
    Ok(())
}

fn expand(args: &ExpandArgs) -> Result<(), Failure> {
    let mut cfg = match &args.config {
        Some(path) => BlockConfig::load(path).with_context(|| format!("reading {}", path.display()))?,
        None => {
            let d = match (args.d, args.channels) {
                (Some(a), Some(b)) if a != b => return Err(usage(format!("--d {a} disagrees with --channels {b}"))),
                (a, b) => a.or(b).ok_or_else(|| usage("--d or --channels is required"))?,
            };
            let n = args.n.ok_or_else(|| usage("--n is required"))?;
            let degree = args.degree.ok_or_else(|| usage("--degree is required"))?;
            let mut cfg = BlockConfig::new(n, d, degree);
            cfg.seed = seed(&args.seed)?;
            cfg
        }
    };
    if args.config.is_some() && std::env::var_os("PADRE_SEED").is_some() {
        cfg.seed = seed(&args.seed)?;
    }
    if cfg.rational.is_some() || cfg.multimodal.is_some() {
        return Err(usage("expand takes a polynomial block config"));
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let block = cfg.build_block::<f64>()?;
    let f = |x: &padre_core::Tensor| block.eval(x, &mut FlopLedger::new());
    let coeffs = extract_coeffs(&f, cfg.n, cfg.d, cfg.degree)?;
    print!("{}", coeffs.dump());
    log::info!("residual {:.3e}", coeffs.residual);
    Ok(())
}

fn gradcheck(args: &SeedArg) -> Result<(), Failure> {
    let reports = verify::gradcheck_reports(seed(args)?)?;
    for r in &reports {
        println!("{}", r.to_json_line());
    }
    if reports.iter().any(|r| !r.pass) {
        return Err(anyhow::anyhow!("gradient check failed").into());
    }
    Ok(())
}

fn approx_attn(args: &ApproxArgs) -> Result<(), Failure> {
    let rows = verify::attention_sweep(seed(&args.seed)?, args.max_degree)?;
    println!("degree\tmax_error\tbound");
    for r in rows {
        println!("{}\t{:.6e}\t{:.6e}", r.degree, r.max_error, r.bound);
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    let outcome = match &cli.command {
        Command::Bench(a) => bench(a),
        Command::Verify(a) => verify(a),
        Command::Expand(a) => expand(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::ApproxAttn(a) => approx_attn(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Check(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
