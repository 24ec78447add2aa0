//! Latency and FLOP benchmarks over a sweep of token counts, CSV output and
//! log-log scaling fits.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{
    castling_forward, conv2former_forward, sima_forward, softmax_attention, AttnParams, CastlingParams, Conv2FormerParams, SimaParams,
};
use crate::block::{build_reference_instance, default_layout, Layout, PadreBlock};
use crate::error::{PadreError, Result};
use crate::flops::FlopLedger;
use crate::scalar::Scalar;
use crate::tensor::Tensor2;

pub const DEFAULT_N_LIST: [usize; 4] = [256, 1024, 2304, 4096];
pub const DEFAULT_CHANNELS: usize = 192;
pub const DEFAULT_REPS: usize = 20;
pub const DEFAULT_WARMUP: usize = 3;
pub const MIN_REPS: usize = 5;
pub const MIN_FIT_POINTS: usize = 4;
/// Medians below this are at the timer's resolution.
pub const TIMER_FLOOR_S: f64 = 1e-6;
/// Depthwise kernel size for the conv2former scheme (clipped to the raster).
pub const CONV2FORMER_KERNEL: usize = 11;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Scheme {
    Padre(usize),
    SoftmaxAttn,
    Sima,
    Castling,
    Conv2former,
}

impl Scheme {
    pub const ALL: [Scheme; 7] = [
        Scheme::Padre(2),
        Scheme::Padre(3),
        Scheme::Padre(4),
        Scheme::SoftmaxAttn,
        Scheme::Sima,
        Scheme::Castling,
        Scheme::Conv2former,
    ];

    /// Polynomial degree recorded in the `d` column; 0 for softmax attention.
    pub fn degree(self) -> usize {
        match self {
            Scheme::Padre(d) => d,
            Scheme::SoftmaxAttn => 0,
            Scheme::Sima | Scheme::Castling => 3,
            Scheme::Conv2former => 2,
        }
    }

    pub fn is_padre(self) -> bool {
        matches!(self, Scheme::Padre(_))
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scheme::Padre(d) => write!(f, "padre-{d}"),
            Scheme::SoftmaxAttn => f.write_str("softmax-attn"),
            Scheme::Sima => f.write_str("sima"),
            Scheme::Castling => f.write_str("castling"),
            Scheme::Conv2former => f.write_str("conv2former"),
        }
    }
}

impl FromStr for Scheme {
    type Err = PadreError;

    fn from_str(s: &str) -> Result<Self> {
        let scheme = match s {
            "softmax-attn" => Scheme::SoftmaxAttn,
            "sima" => Scheme::Sima,
            "castling" => Scheme::Castling,
            "conv2former" => Scheme::Conv2former,
            _ => match s.strip_prefix("padre-").and_then(|d| d.parse::<usize>().ok()) {
                Some(d @ 2..=4) => Scheme::Padre(d),
                _ => return Err(PadreError::UnknownScheme(s.to_string())),
            },
        };
        Ok(scheme)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl FromStr for Precision {
    type Err = PadreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(PadreError::Config(format!("unknown precision `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub scheme: String,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "D")]
    pub channels: usize,
    pub d: usize,
    pub flops: u64,
    pub median_s: f64,
    pub p10_s: f64,
    pub p90_s: f64,
    pub reps: usize,
    pub seed: u64,
}

impl BenchRecord {
    pub fn is_timer_limited(&self) -> bool {
        self.median_s < TIMER_FLOOR_S
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub schemes: Vec<Scheme>,
    pub n_list: Vec<usize>,
    pub channels: usize,
    pub reps: usize,
    pub warmup: usize,
    pub seed: u64,
    /// Applies to the block schemes; the reference schemes always run in `f64`.
    pub precision: Precision,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            schemes: Scheme::ALL.to_vec(),
            n_list: DEFAULT_N_LIST.to_vec(),
            channels: DEFAULT_CHANNELS,
            reps: DEFAULT_REPS,
            warmup: DEFAULT_WARMUP,
            seed: 0,
            precision: Precision::F64,
        }
    }
}

type Runner = Box<dyn FnMut(&mut FlopLedger) -> Result<()>>;

fn padre_runner<T: Scalar>(n: usize, d: usize, degree: usize, rng: &mut ChaCha8Rng) -> Result<Runner> {
    let block: PadreBlock<T> = build_reference_instance(n, d, degree, default_layout(n), rng)?;
    let x: Tensor2<T> = Tensor2::<f64>::random_uniform(n, d, 1.0, rng).cast();
    Ok(Box::new(move |ledger| block.eval(&x, ledger).map(drop)))
}

fn make_runner(scheme: Scheme, n: usize, d: usize, precision: Precision, seed: u64) -> Result<Runner> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (n as u64).rotate_left(32));
    let x = |rng: &mut ChaCha8Rng| Tensor2::random_uniform(n, d, 1.0, rng);
    Ok(match scheme {
        Scheme::Padre(degree) => match precision {
            Precision::F32 => padre_runner::<f32>(n, d, degree, &mut rng)?,
            Precision::F64 => padre_runner::<f64>(n, d, degree, &mut rng)?,
        },
        Scheme::SoftmaxAttn => {
            let p = AttnParams::random(d, &mut rng);
            let x = x(&mut rng);
            Box::new(move |l| softmax_attention(&p, &x, l).map(drop))
        }
        Scheme::Sima => {
            let p = SimaParams::random(d, &mut rng);
            let x = x(&mut rng);
            Box::new(move |l| sima_forward(&p, &x, l).map(drop))
        }
        Scheme::Castling => {
            let p = CastlingParams::random(n, d, &mut rng)?;
            let x = x(&mut rng);
            Box::new(move |l| castling_forward(&p, &x, l).map(drop))
        }
        Scheme::Conv2former => {
            let (h, w) = match default_layout(n) {
                Layout::Grid { height, width } => (height, width),
                Layout::Seq1d => (1, n),
            };
            let k = CONV2FORMER_KERNEL.min(h.max(w));
            let p = Conv2FormerParams::random(h, w, d, k, &mut rng);
            let x = x(&mut rng);
            Box::new(move |l| conv2former_forward(&p, &x, l).map(drop))
        }
    })
}

/// Nearest-rank percentile of sorted samples.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((q * (sorted.len() - 1) as f64).round() as usize).min(sorted.len() - 1);
    sorted[idx]
}

/// Runs every scheme at every `N`: FLOPs from one ledgered call, then
/// `warmup` discarded calls and `reps` timed calls on the current thread.
pub fn run_bench(cfg: &BenchConfig) -> Result<Vec<BenchRecord>> {
    if cfg.reps < MIN_REPS {
        return Err(PadreError::Config(format!("need at least {MIN_REPS} repetitions, got {}", cfg.reps)));
    }
    if cfg.channels == 0 || cfg.n_list.contains(&0) {
        return Err(PadreError::Config("token and channel counts must be positive".into()));
    }
    let mut out = Vec::new();
    for &scheme in &cfg.schemes {
        for &n in &cfg.n_list {
            let mut run = make_runner(scheme, n, cfg.channels, cfg.precision, cfg.seed)?;
            let mut ledger = FlopLedger::new();
            run(&mut ledger)?;
            for _ in 0..cfg.warmup {
                run(&mut FlopLedger::new())?;
            }
            let mut times = Vec::with_capacity(cfg.reps);
            for _ in 0..cfg.reps {
                let mut scratch = FlopLedger::new();
                let start = Instant::now();
                run(&mut scratch)?;
                times.push(start.elapsed().as_secs_f64());
            }
            times.sort_by(f64::total_cmp);
            let record = BenchRecord {
                scheme: scheme.to_string(),
                n,
                channels: cfg.channels,
                d: scheme.degree(),
                flops: ledger.flops(),
                median_s: percentile(&times, 0.5),
                p10_s: percentile(&times, 0.1),
                p90_s: percentile(&times, 0.9),
                reps: cfg.reps,
                seed: cfg.seed,
            };
            if record.is_timer_limited() {
                log::warn!("{scheme} at N={n}: median {:.3e}s is at timer resolution", record.median_s);
            }
            log::info!("{scheme} N={n}: {} flops, median {:.3e}s", record.flops, record.median_s);
            out.push(record);
        }
    }
    sort_records(&mut out);
    Ok(out)
}

pub fn sort_records(records: &mut [BenchRecord]) {
    records.sort_by(|a, b| a.scheme.cmp(&b.scheme).then(a.n.cmp(&b.n)));
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub scheme: String,
    pub points: usize,
    pub flop_exponent: f64,
    pub time_exponent: f64,
    /// RMS residual of the log-log fits.
    pub flop_residual: f64,
    pub time_residual: f64,
}

/// Least-squares slope and RMS residual of `ln y` against `ln x`.
pub fn loglog_fit(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let k = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / k, ly.iter().sum::<f64>() / k);
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let rss: f64 = lx.iter().zip(&ly).map(|(x, y)| (y - my - slope * (x - mx)).powi(2)).sum();
    (slope, (rss / k).sqrt())
}

/// One fit per scheme (in first-appearance order) over its distinct `N`.
pub fn fit_scaling(records: &[BenchRecord]) -> Result<Vec<ScalingFit>> {
    let mut schemes: Vec<&str> = Vec::new();
    for r in records {
        if !schemes.contains(&r.scheme.as_str()) {
            schemes.push(&r.scheme);
        }
    }
    schemes
        .into_iter()
        .map(|scheme| {
            let mut rows: Vec<&BenchRecord> = records.iter().filter(|r| r.scheme == scheme).collect();
            rows.sort_by_key(|r| r.n);
            rows.dedup_by_key(|r| r.n);
            if rows.len() < MIN_FIT_POINTS {
                return Err(PadreError::InsufficientPoints {
                    scheme: scheme.to_string(),
                    needed: MIN_FIT_POINTS,
                    got: rows.len(),
                });
            }
            let ns: Vec<f64> = rows.iter().map(|r| r.n as f64).collect();
            let flops: Vec<f64> = rows.iter().map(|r| r.flops as f64).collect();
            let times: Vec<f64> = rows.iter().map(|r| r.median_s).collect();
            let (flop_exponent, flop_residual) = loglog_fit(&ns, &flops);
            let (time_exponent, time_residual) = loglog_fit(&ns, &times);
            Ok(ScalingFit {
                scheme: scheme.to_string(),
                points: rows.len(),
                flop_exponent,
                time_exponent,
                flop_residual,
                time_residual,
            })
        })
        .collect()
}

fn csv_err(e: csv::Error) -> PadreError {
    PadreError::Io(e.to_string())
}

/// Header row, then one row per item. Floats use the shortest exact
/// representation, so parsing recovers identical values.
pub fn write_csv<S: Serialize, W: Write>(rows: &[S], header: &[&str], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub const RECORD_COLUMNS: [&str; 10] = ["scheme", "N", "D", "d", "flops", "median_s", "p10_s", "p90_s", "reps", "seed"];
pub const FIT_COLUMNS: [&str; 6] = ["scheme", "points", "flop_exponent", "time_exponent", "flop_residual", "time_residual"];

pub fn emit_csv(records: &[BenchRecord], path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_csv(records, &RECORD_COLUMNS, std::io::BufWriter::new(file))
}

pub fn emit_fits_csv(fits: &[ScalingFit], path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_csv(fits, &FIT_COLUMNS, std::io::BufWriter::new(file))
}

pub fn parse_csv<R: Read>(input: R) -> Result<Vec<BenchRecord>> {
    let mut rdr = csv::Reader::from_reader(input);
    let header = rdr.headers().map_err(csv_err)?.clone();
    if header.iter().ne(RECORD_COLUMNS) {
        return Err(PadreError::Format(format!("unexpected CSV header {:?}", header.iter().collect::<Vec<_>>())));
    }
    rdr.deserialize().map(|r| r.map_err(csv_err)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(scheme: &str, n: usize, flops: u64, t: f64) -> BenchRecord {
        BenchRecord {
            scheme: scheme.into(),
            n,
            channels: 8,
            d: 2,
            flops,
            median_s: t,
            p10_s: t * 0.9,
            p90_s: t * 1.1,
            reps: 5,
            seed: 1,
        }
    }

    #[test]
    fn scheme_names_round_trip() {
        for s in Scheme::ALL {
            assert_eq!(s.to_string().parse::<Scheme>().unwrap(), s);
        }
        assert!(matches!("padre-5".parse::<Scheme>(), Err(PadreError::UnknownScheme(_))));
        assert!("linformer".parse::<Scheme>().is_err());
    }

    #[test]
    fn single_size_sweep_orders_percentiles() {
        let cfg = BenchConfig {
            n_list: vec![16],
            channels: 4,
            reps: 5,
            warmup: 1,
            ..Default::default()
        };
        let recs = run_bench(&cfg).unwrap();
        assert_eq!(recs.len(), Scheme::ALL.len());
        for r in &recs {
            assert!(r.p10_s <= r.median_s && r.median_s <= r.p90_s, "{r:?}");
            assert!(r.flops > 0);
        }
    }

    #[test]
    fn too_few_reps() {
        let cfg = BenchConfig {
            reps: 4,
            ..Default::default()
        };
        assert!(matches!(run_bench(&cfg), Err(PadreError::Config(_))));
    }

    #[test]
    fn flat_series_has_zero_exponent() {
        let recs: Vec<_> = [64, 128, 256, 512].iter().map(|&n| record("flat", n, 1000, 0.5)).collect();
        let fit = &fit_scaling(&recs).unwrap()[0];
        assert!(fit.time_exponent.abs() < 1e-12 && fit.flop_exponent.abs() < 1e-12);
    }

    #[test]
    fn quadratic_series_has_exponent_two() {
        let recs: Vec<_> = [64, 128, 256, 512].iter().map(|&n| record("sq", n, (n * n) as u64, 1e-9 * (n * n) as f64)).collect();
        let fit = &fit_scaling(&recs).unwrap()[0];
        assert!((fit.flop_exponent - 2.0).abs() < 1e-12 && (fit.time_exponent - 2.0).abs() < 1e-9);
    }

    #[test]
    fn fit_needs_four_points() {
        let recs: Vec<_> = [64, 128, 256].iter().map(|&n| record("x", n, 10, 1.0)).collect();
        assert!(matches!(fit_scaling(&recs), Err(PadreError::InsufficientPoints { got: 3, .. })));
    }

    #[test]
    fn csv_schema_and_round_trip() {
        let mut buf = Vec::new();
        write_csv::<BenchRecord, _>(&[], &RECORD_COLUMNS, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "scheme,N,D,d,flops,median_s,p10_s,p90_s,reps,seed\n");
        assert!(parse_csv(buf.as_slice()).unwrap().is_empty());
        let recs = vec![record("padre-2", 256, 123, 0.1 + 0.2), record("padre-2", 1024, 456, 1.0 / 3.0)];
        let mut buf = Vec::new();
        write_csv(&recs, &RECORD_COLUMNS, &mut buf).unwrap();
        assert_eq!(parse_csv(buf.as_slice()).unwrap(), recs);
    }
}
