//! Self-checking suites shared by the command line and the acceptance
//! harness. Each suite returns one [`SuiteResult`] with a pass flag and a
//! short human-readable detail string.

use std::collections::BTreeMap;
use std::fmt;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::adapters::{self, check_plan, EquivReport, EQUIV_TRIALS};
use crate::bench::{fit_scaling, run_bench, BenchConfig, BenchRecord, Precision, Scheme};
use crate::block::{build_reference_instance, default_layout, random_weights, PadreBlock, WMode};
use crate::config::{BlockConfig, RationalConfig};
use crate::container::Container;
use crate::error::{PadreError, Result};
use crate::flops::FlopLedger;
use crate::grad::{gradcheck, GradReport, GRADCHECK_STEP, GRADCHECK_TOL};
use crate::mixer::{MixerKind, Padding};
use crate::multimodal::MultimodalBlock;
use crate::oracle::{assert_homogeneous, check_homogeneous_at, extract_coeffs, max_effective_degree};
use crate::rational::{Denominator, RationalPadreBlock, DEFAULT_EPSILON};
use crate::rect::RectOp;
use crate::tensor::{rel_err, Tensor2};

pub const TAP_HOMOGENEITY_TOL: f64 = 1e-10;
pub const HOMOGENEITY_ALPHAS: [f64; 4] = [0.5, 1.0, 2.0, -1.0];
pub const ORACLE_RESIDUAL_TOL: f64 = 1e-9;
pub const GRAD_PROBES: usize = 200;
pub const MAMBA_RATIO_BAND: (f64, f64) = (0.15, 0.4);
pub const ATTN_SAFETY: f64 = 4.0;
pub const ATTN_HIGH_DEGREE_TOL: f64 = 1e-8;
pub const MULTIMODAL_TOL: f64 = 1e-10;
pub const FLOP_EXPONENT_BAND: (f64, f64) = (0.95, 1.05);
pub const ATTN_FLOP_EXPONENT_MIN: f64 = 1.8;
pub const PADRE_TIME_EXPONENT_MAX: f64 = 1.3;
pub const ATTN_TIME_EXPONENT_MIN: f64 = 1.6;
pub const PARAM_RATIO_BAND: (f64, f64) = (1.8, 2.2);
pub const DEGREE_RATIO_BAND: (f64, f64) = (1.4, 2.6);
/// Reference PADRe-2 and PADRe-3 GFLOPs at N = 4096, D = 192.
pub const REFERENCE_GFLOPS: (f64, f64) = (1.10, 2.28);

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteResult {
    pub name: String,
    pub pass: bool,
    pub seconds: f64,
    pub detail: String,
}

impl fmt::Display for SuiteResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.pass { "PASS" } else { "FAIL" };
        write!(f, "{tag} {} ({:.1}s): {}", self.name, self.seconds, self.detail)
    }
}

/// Collects named sub-checks of one suite.
struct Checks {
    name: String,
    start: Instant,
    pass: bool,
    parts: Vec<String>,
    budget_s: Option<f64>,
}

impl Checks {
    fn new(name: &str) -> Self {
        Self {
            name: name.to_string(),
            start: Instant::now(),
            pass: true,
            parts: Vec::new(),
            budget_s: None,
        }
    }

    fn budget(mut self, seconds: f64) -> Self {
        self.budget_s = Some(seconds);
        self
    }

    fn check(&mut self, ok: bool, text: impl Into<String>) {
        let text = text.into();
        self.pass &= ok;
        self.parts.push(if ok { text } else { format!("[FAILED] {text}") });
    }

    fn note(&mut self, text: impl Into<String>) {
        self.parts.push(text.into());
    }

    fn error(&mut self, context: &str, e: PadreError) {
        self.check(false, format!("{context}: {e}"));
    }

    fn finish(mut self) -> SuiteResult {
        let seconds = self.start.elapsed().as_secs_f64();
        if let Some(b) = self.budget_s {
            self.check(seconds < b, format!("runtime {seconds:.1}s < {b:.0}s"));
        }
        SuiteResult {
            name: self.name,
            pass: self.pass,
            seconds,
            detail: self.parts.join("; "),
        }
    }
}

fn rng(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Largest divisor of `dim` not above its square root, paired with the cofactor.
fn raster(dim: usize) -> (usize, usize) {
    let h = (1..=dim).take_while(|h| h * h <= dim).filter(|h| dim % h == 0).last().unwrap_or(1);
    (h, dim / h)
}

/// Mixer kind number `which % 6` sized for `dim` with `lanes` lanes.
pub fn mixer_kind<R: Rng + ?Sized>(which: usize, dim: usize, lanes: usize, rng: &mut R) -> MixerKind {
    let padding = if rng.gen_bool(0.5) { Padding::Zero } else { Padding::Circular };
    let banks = if rng.gen_bool(0.5) { 1 } else { lanes };
    match which % 6 {
        0 => MixerKind::Identity,
        1 => MixerKind::Dense,
        2 => MixerKind::Diagonal,
        3 => MixerKind::LowRank {
            rank: rng.gen_range(1..=dim.div_ceil(2)),
        },
        4 => MixerKind::Conv1d {
            len: rng.gen_range(1..=dim.min(5)),
            banks,
            padding,
        },
        _ => {
            let (height, width) = raster(dim);
            MixerKind::Conv2d {
                kh: rng.gen_range(1..=height.min(3)),
                kw: rng.gen_range(1..=width.min(3)),
                height,
                width,
                banks,
                padding,
            }
        }
    }
}

const W_MODES: [WMode; 3] = [WMode::Full, WMode::ChannelBroadcast, WMode::ScalarPerDegree];

/// Random block whose token and channel mixer kinds are selected by `t`.
pub fn random_block<R: Rng + ?Sized>(t: usize, n: usize, d: usize, degree: usize, rng: &mut R) -> Result<PadreBlock<f64>> {
    let token = mixer_kind(t, n, d, rng);
    let channel = mixer_kind(t / 6 + t, d, n, rng);
    PadreBlock::random(n, d, degree, token, channel, W_MODES[t % 3], rng)
}

/// Homogeneity of every cascade tap `Z_i` over 50 random blocks covering
/// every mixer kind on both sides.
pub fn tap_homogeneity_suite(seed: u64) -> SuiteResult {
    let mut c = Checks::new("tap homogeneity").budget(30.0);
    let mut worst = 0.0f64;
    let mut kinds = std::collections::BTreeSet::new();
    let blocks = 50;
    for t in 0..blocks {
        let mut r = rng(seed, 100 + t as u64);
        let (n, d) = (r.gen_range(1..=64), r.gen_range(1..=16));
        let degree = 1 + t % 4;
        let outcome = (|| -> Result<f64> {
            let block = random_block(t, n, d, degree, &mut r)?;
            for m in block.a().iter().chain(block.b()) {
                kinds.insert((format!("{:?}", m.side()), m.kind().name()));
            }
            let x = Tensor2::random_uniform(n, d, 1.0, &mut r);
            let (_, base) = block.forward(&x, &mut FlopLedger::new())?;
            if base.z.len() != degree {
                return Err(PadreError::Config(format!("expected {degree} taps, traced {}", base.z.len())));
            }
            let mut err = 0.0f64;
            for alpha in HOMOGENEITY_ALPHAS {
                let (_, scaled) = block.forward(&x.scale(alpha), &mut FlopLedger::new())?;
                for (i, (zs, z)) in scaled.z.iter().zip(&base.z).enumerate() {
                    err = err.max(rel_err(zs, &z.scale(alpha.powi(i as i32 + 1))));
                }
            }
            Ok(err)
        })();
        match outcome {
            Ok(e) => worst = worst.max(e),
            Err(e) => c.error(&format!("block {t}"), e),
        }
    }
    c.check(worst <= TAP_HOMOGENEITY_TOL, format!("{blocks} blocks, max rel err {worst:.2e} <= {TAP_HOMOGENEITY_TOL:.0e}"));
    c.check(kinds.len() == 12, format!("{} side/kind combinations covered", kinds.len()));
    c.finish()
}

/// Explicit coefficient extraction on every block shape with `N D <= 8`
/// and degrees 1 to 4.
pub fn oracle_suite(seed: u64) -> SuiteResult {
    let mut c = Checks::new("coefficient oracle").budget(60.0);
    let shapes = [(1, 1), (1, 2), (2, 1), (2, 2), (1, 4), (4, 1), (2, 3), (3, 2), (2, 4), (4, 2), (1, 8), (8, 1)];
    let (mut worst, mut count, mut support_ok, mut degree_ok) = (0.0f64, 0, true, true);
    for (s, &(n, d)) in shapes.iter().enumerate() {
        for degree in 1..=4 {
            let t = s * 4 + degree;
            let mut r = rng(seed, 200 + t as u64);
            let outcome = (|| -> Result<(f64, bool, bool)> {
                let mut mask: Vec<usize> = (1..=degree).filter(|_| r.gen_bool(0.6)).collect();
                if mask.is_empty() {
                    mask.push(degree);
                }
                let with_bias = r.gen_bool(0.5);
                let bias = with_bias.then(|| Tensor2::random_uniform(n, d, 1.0, &mut r));
                let block = random_block(t, n, d, degree, &mut r)?.with_degree_mask(mask.clone())?.with_bias(bias)?;
                let f = |x: &Tensor2<f64>| block.eval(x, &mut FlopLedger::new());
                let coeffs = extract_coeffs(&f, n, d, degree)?;
                let present = coeffs.degrees_present();
                let allowed = |k: &u32| (*k == 0 && with_bias) || mask.contains(&(*k as usize));
                Ok((coeffs.residual, coeffs.max_total_degree() as usize <= degree, present.iter().all(allowed)))
            })();
            match outcome {
                Ok((res, deg, sup)) => {
                    worst = worst.max(res);
                    degree_ok &= deg;
                    support_ok &= sup;
                    count += 1;
                }
                Err(e) => c.error(&format!("N={n} D={d} d={degree}"), e),
            }
        }
    }
    c.check(worst < ORACLE_RESIDUAL_TOL, format!("{count} blocks, max residual {worst:.2e} < {ORACLE_RESIDUAL_TOL:.0e}"));
    c.check(degree_ok, "max |k| <= d");
    c.check(support_ok, "support within degree mask");
    c.finish()
}

/// The gradient-check cases: polynomial and rational blocks, each with and
/// without normalization.
pub fn gradcheck_reports(seed: u64) -> Result<Vec<GradReport>> {
    let mut out = Vec::new();
    for (idx, normalize) in [false, true].into_iter().enumerate() {
        let mut r = rng(seed, 300 + idx as u64);
        let (n, d) = (6, 4);
        let token = MixerKind::Conv1d {
            len: 3,
            banks: d,
            padding: Padding::Zero,
        };
        let block = PadreBlock::random(n, d, 3, token, MixerKind::Dense, WMode::Full, &mut r)?
            .with_bias(Some(Tensor2::random_uniform(n, d, 1.0, &mut r)))?
            .with_resize(Some(RectOp::random_dense(4, n, &mut r)), Some(RectOp::random_dense(d, 3, &mut r)))?
            .with_normalize_y(normalize);
        let x = Tensor2::random_uniform(n, d, 1.0, &mut r);
        let check = gradcheck(&block, &x, GRAD_PROBES, GRADCHECK_STEP, &mut r)?;
        let name = if normalize { "padre-normalized" } else { "padre" };
        out.push(check.report(name, seed, GRADCHECK_TOL));

        let num = PadreBlock::random(n, d, 2, MixerKind::LowRank { rank: 2 }, MixerKind::Diagonal, WMode::ChannelBroadcast, &mut r)?
            .with_normalize_y(normalize);
        let den = PadreBlock::random(n, d, 2, token, MixerKind::Dense, WMode::Full, &mut r)?.with_bias(Some(Tensor2::filled(n, d, 1.5)))?;
        let rational = RationalPadreBlock::new(num, Denominator::Cascade(den), DEFAULT_EPSILON, true)?;
        let check = gradcheck(&rational, &x, GRAD_PROBES, GRADCHECK_STEP, &mut r)?;
        let name = if normalize { "rational-normalized" } else { "rational" };
        out.push(check.report(name, seed, GRADCHECK_TOL));
    }
    Ok(out)
}

pub fn grad_suite(seed: u64) -> SuiteResult {
    let mut c = Checks::new("gradient check").budget(120.0);
    match gradcheck_reports(seed) {
        Ok(reports) => {
            for rep in reports {
                c.check(rep.pass, format!("{} {} probes max rel err {:.2e}", rep.scheme, rep.probes, rep.max_rel_err));
            }
        }
        Err(e) => c.error("gradcheck", e),
    }
    // A denominator that vanishes at the evaluation point.
    let finite = (|| -> Result<bool> {
        let mut r = rng(seed, 310);
        let num = PadreBlock::random(2, 2, 1, MixerKind::Identity, MixerKind::Identity, WMode::Full, &mut r)?;
        let rational = RationalPadreBlock::new(num, Denominator::Constant(Tensor2::zeros(2, 2)), DEFAULT_EPSILON, true)?;
        let x = Tensor2::random_uniform(2, 2, 1.0, &mut r);
        let (_, trace) = rational.forward(&x, &mut FlopLedger::new())?;
        Ok(rational.backward(&trace, &Tensor2::ones(2, 2))?.is_finite())
    })();
    match finite {
        Ok(ok) => c.check(ok, "finite gradients at a vanishing squared denominator"),
        Err(e) => c.error("vanishing denominator", e),
    }
    c.finish()
}

pub const EQUIV_SCHEMES: [&str; 6] = ["sima", "conv2former", "hyena", "mamba", "castling", "attn-approx"];

/// Plan-versus-direct check for one scheme (`attn-approx` instead checks the
/// approximation error against four times the remainder bound).
pub fn equivalence_report(scheme: &str, seed: u64) -> Result<EquivReport> {
    let mut r = rng(seed, 400);
    let trials = EQUIV_TRIALS;
    let ledger = || FlopLedger::new();
    match scheme {
        "sima" => {
            let p = adapters::SimaParams::random(6, &mut r);
            let plan = adapters::sima_as_padre(&p, 12)?;
            check_plan(scheme, |x| adapters::sima_forward(&p, x, &mut ledger()), &plan, (12, 6), trials, seed)
        }
        "conv2former" => {
            let p = adapters::Conv2FormerParams::random(4, 4, 8, 3, &mut r);
            let plan = adapters::conv2former_as_padre(&p)?;
            check_plan(scheme, |x| adapters::conv2former_forward(&p, x, &mut ledger()), &plan, (16, 8), trials, seed)
        }
        "hyena" => {
            let p = adapters::HyenaParams::random(2, 16, 8, &mut r);
            let plan = adapters::hyena_as_padre(&p)?;
            check_plan(scheme, |x| adapters::hyena_forward(&p, x, &mut ledger()), &plan, (8, 1), trials, seed)
        }
        "mamba" => {
            let p = adapters::MambaParams::random(4, 8, &mut r);
            let x0 = Tensor2::random_uniform(16, 8, 1.0, &mut r);
            let delta = adapters::mamba_delta(&p, &x0, 0.5)?;
            let plan = adapters::mamba_as_padre(&p, &delta)?;
            check_plan(
                scheme,
                |x| adapters::mamba_surrogate_frozen(&p, x, &delta, &mut ledger()),
                &plan,
                (16, 8),
                trials,
                seed,
            )
        }
        "castling" => {
            let p = adapters::CastlingParams::random(16, 8, &mut r)?;
            let plan = adapters::castling_as_padre(&p)?;
            check_plan(scheme, |x| adapters::castling_forward(&p, x, &mut ledger()), &plan, (16, 8), trials, seed)
        }
        "attn-approx" => {
            let sweep = attention_sweep(seed, 12)?;
            let worst = sweep.iter().map(|row| row.max_error / (ATTN_SAFETY * row.bound)).fold(0.0, f64::max);
            Ok(EquivReport {
                scheme: scheme.to_string(),
                seed,
                trials: ATTN_CASES,
                max_deviation: sweep.last().map_or(0.0, |row| row.max_error),
                tolerance: ATTN_HIGH_DEGREE_TOL,
                pass: worst <= 1.0 && sweep.last().is_some_and(|row| row.max_error < ATTN_HIGH_DEGREE_TOL),
            })
        }
        other => Err(PadreError::UnknownScheme(other.to_string())),
    }
}

/// Degree certificates for each adapter, as `(label, ok, detail)`.
fn degree_certificates(seed: u64) -> Result<Vec<(String, bool, String)>> {
    let mut r = rng(seed, 410);
    let mut out = Vec::new();
    let ledger = || FlopLedger::new();
    let mut homogeneous = |label: &str, f: &crate::oracle::BlackBox<'_>, shape: (usize, usize), degree: usize, r: &mut ChaCha8Rng| -> Result<()> {
        let h = assert_homogeneous(f, shape, degree as u32, 10, r)?;
        let coeffs = extract_coeffs(f, shape.0, shape.1, degree)?;
        let present = coeffs.degrees_present();
        let ok = h.pass && present == vec![degree as u32];
        out.push((label.to_string(), ok, format!("homogeneous {degree} (degrees {present:?})")));
        Ok(())
    };

    let sima = adapters::SimaParams::random(2, &mut r);
    homogeneous("sima numerator", &|x| adapters::sima_numerator(&sima, x), (3, 2), 3, &mut r)?;
    let conv = adapters::Conv2FormerParams::random(2, 2, 2, 3, &mut r);
    homogeneous("conv2former", &|x| adapters::conv2former_forward(&conv, x, &mut ledger()), (4, 2), 2, &mut r)?;
    let hyena = adapters::HyenaParams::random(2, 6, 4, &mut r);
    homogeneous("hyena order 2", &|x| adapters::hyena_forward(&hyena, x, &mut ledger()), (4, 1), 3, &mut r)?;
    let mamba = adapters::MambaParams::random(3, 2, &mut r);
    let x0 = Tensor2::random_uniform(4, 2, 1.0, &mut r);
    let delta = adapters::mamba_delta(&mamba, &x0, 0.3)?;
    homogeneous(
        "mamba frozen-step surrogate",
        &|x| adapters::mamba_surrogate_frozen(&mamba, x, &delta, &mut ledger()),
        (4, 2),
        3,
        &mut r,
    )?;

    // Normalized SimA is positively homogeneous of degree 3 - 2 = 1.
    let sima_full = |x: &Tensor2<f64>| adapters::sima_forward(&sima, x, &mut ledger());
    let pos = check_homogeneous_at(&sima_full, (3, 2), 1, &[0.5, 2.0], &mut r)?;
    out.push(("sima normalized".into(), pos.pass, format!("positive scaling degree 1 (err {:.1e})", pos.max_rel_err)));

    let castling = adapters::CastlingParams::random(4, 2, &mut r)?;
    let f = |x: &Tensor2<f64>| adapters::castling_forward(&castling, x, &mut ledger());
    let top = max_effective_degree(&f, (4, 2), 4, &mut r)?;
    let present = extract_coeffs(&f, 4, 2, 3)?.degrees_present();
    out.push((
        "castling".into(),
        top == 3 && present == vec![1, 3],
        format!("max degree {top}, degrees {present:?}"),
    ));
    Ok(out)
}

pub fn equivalence_suite(seed: u64) -> SuiteResult {
    let mut c = Checks::new("adapter equivalence");
    for scheme in EQUIV_SCHEMES.iter().filter(|s| **s != "attn-approx") {
        match equivalence_report(scheme, seed) {
            Ok(rep) => c.check(rep.pass, format!("{scheme} max dev {:.1e}", rep.max_deviation)),
            Err(e) => c.error(scheme, e),
        }
    }
    match degree_certificates(seed) {
        Ok(certs) => {
            for (label, ok, detail) in certs {
                c.check(ok, format!("{label}: {detail}"));
            }
        }
        Err(e) => c.error("degree certificates", e),
    }
    c.finish()
}

/// `err(s/2) / err(s)` for each step scale on 20 sequences of length <= 32.
pub fn mamba_suite(seed: u64) -> SuiteResult {
    let mut c = Checks::new("mamba first-order law");
    let (lo, hi) = MAMBA_RATIO_BAND;
    let (mut min_r, mut max_r) = (f64::INFINITY, f64::NEG_INFINITY);
    for t in 0..20u64 {
        let mut r = rng(seed, 500 + t);
        let len = r.gen_range(4..=32);
        let p = adapters::MambaParams::random(4, 3, &mut r);
        let x = Tensor2::random_uniform(len, 3, 1.0, &mut r);
        let err = |s: f64| -> Result<f64> {
            let exact = adapters::mamba_forward(&p, &x, s, &mut FlopLedger::new())?;
            let approx = adapters::mamba_padre_approx(&p, &x, s, &mut FlopLedger::new())?;
            Ok(exact.sub(&approx)?.max_abs())
        };
        for s in [1e-2, 1e-3] {
            match err(s / 2.0).and_then(|h| err(s).map(|f| h / f)) {
                Ok(ratio) => {
                    min_r = min_r.min(ratio);
                    max_r = max_r.max(ratio);
                }
                Err(e) => c.error(&format!("sequence {t}"), e),
            }
        }
    }
    c.check(min_r >= lo && max_r <= hi, format!("20 sequences, ratios in [{min_r:.3}, {max_r:.3}] within [{lo}, {hi}]"));
    c.finish()
}

pub const ATTN_CASES: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttnSweepRow {
    pub degree: usize,
    /// Largest elementwise error over the fixed batch of inputs.
    pub max_error: f64,
    /// Remainder bound `e^L L^{d+1} / (d+1)!` at `L = 1`.
    pub bound: f64,
}

/// Error of the truncated-exponential attention against exact softmax for
/// degrees `0..=max_degree`, over a fixed batch of inputs whose logits are
/// rescaled to `max |logit| = 1`.
pub fn attention_sweep(seed: u64, max_degree: usize) -> Result<Vec<AttnSweepRow>> {
    let mut r = rng(seed, 600);
    let mut cases = Vec::with_capacity(ATTN_CASES);
    for _ in 0..ATTN_CASES {
        let mut p = adapters::AttnParams::random(4, &mut r);
        let x = Tensor2::random_uniform(8, 4, 1.0, &mut r);
        let l = adapters::attention::logits(&p, &x)?.max_abs();
        p.w_q = p.w_q.scale(1.0 / l);
        let exact = adapters::softmax_attention(&p, &x, &mut FlopLedger::new())?;
        cases.push((p, x, exact));
    }
    (0..=max_degree)
        .map(|degree| {
            let mut max_error = 0.0f64;
            let mut bound = 0.0f64;
            for (p, x, exact) in &cases {
                let a = adapters::attention_rational_approx(p, x, degree)?;
                max_error = max_error.max(a.output.sub(exact)?.max_abs());
                bound = bound.max(a.term_bound);
            }
            Ok(AttnSweepRow { degree, max_error, bound })
        })
        .collect()
}

pub fn attention_suite(seed: u64) -> SuiteResult {
    let mut c = Checks::new("attention approximation");
    match attention_sweep(seed, 12) {
        Ok(rows) => {
            let rows: Vec<_> = rows.into_iter().filter(|row| row.degree >= 2).collect();
            let within = rows.iter().all(|row| row.max_error <= ATTN_SAFETY * row.bound);
            let worst = rows.iter().map(|row| row.max_error / row.bound).fold(0.0, f64::max);
            c.check(within, format!("d=2..12 error <= 4 x bound (worst ratio {worst:.3})"));
            let monotone = rows.windows(2).all(|w| w[1].max_error <= w[0].max_error);
            c.check(monotone, "max error nonincreasing in d");
            let last = rows.last().map_or(f64::NAN, |row| row.max_error);
            c.check(last < ATTN_HIGH_DEGREE_TOL, format!("d=12 error {last:.2e} < 1e-8"));
        }
        Err(e) => c.error("sweep", e),
    }
    c.finish()
}

/// Bidegree scaling of the top cascade tap on 20 random two-mode instances.
pub fn multimodal_suite(seed: u64) -> SuiteResult {
    let mut c = Checks::new("multimodal bidegree");
    let mut worst = 0.0f64;
    for t in 0..20u64 {
        let mut r = rng(seed, 700 + t);
        let outcome = (|| -> Result<f64> {
            let degree = r.gen_range(2..=4);
            let mut labels: Vec<char> = vec!['a', 'b'];
            labels.extend((2..degree).map(|_| if r.gen_bool(0.5) { 'a' } else { 'b' }));
            labels.shuffle(&mut r);
            let seq: String = labels.iter().collect();
            let (na, nb) = (labels.iter().filter(|&&l| l == 'a').count(), labels.iter().filter(|&&l| l == 'b').count());
            let target = (r.gen_range(1..=6), r.gen_range(1..=4));
            let modes = [('a', r.gen_range(1..=6), r.gen_range(1..=4)), ('b', r.gen_range(1..=6), r.gen_range(1..=4))];
            let block = MultimodalBlock::<f64>::random(target, &modes, &[&seq], &mut r)?;
            let xa = Tensor2::random_uniform(modes[0].1, modes[0].2, 1.0, &mut r);
            let xb = Tensor2::random_uniform(modes[1].1, modes[1].2, 1.0, &mut r);
            let top = |a: f64, b: f64| -> Result<Tensor2<f64>> {
                let inputs = BTreeMap::from([('a', xa.scale(a)), ('b', xb.scale(b))]);
                let mut taps = block.taps(&inputs, &mut FlopLedger::new())?;
                Ok(taps.remove(0).pop().expect("non-empty sequence"))
            };
            let base = top(1.0, 1.0)?;
            let mut err = 0.0f64;
            for (a, b) in [(2.0, 1.0), (1.0, 2.0), (2.0, 3.0)] {
                let expect = base.scale(f64::powi(a, na as i32) * f64::powi(b, nb as i32));
                err = err.max(rel_err(&top(a, b)?, &expect));
            }
            Ok(err)
        })();
        match outcome {
            Ok(e) => worst = worst.max(e),
            Err(e) => c.error(&format!("instance {t}"), e),
        }
    }
    c.check(worst <= MULTIMODAL_TOL, format!("20 instances, max rel err {worst:.2e}"));
    let mut r = rng(seed, 720);
    let rejected = ["aaa", "bbb"]
        .iter()
        .all(|s| MultimodalBlock::<f64>::random((3, 2), &[('a', 2, 2), ('b', 3, 1)], &[s], &mut r).is_err());
    c.check(rejected, "trivial sequences rejected");
    c.finish()
}

fn flop_column(records: &[BenchRecord]) -> Vec<(String, usize, u64)> {
    records.iter().map(|r| (r.scheme.clone(), r.n, r.flops)).collect()
}

/// Config and container round trips, and run-to-run FLOP determinism.
pub fn serialization_suite(seed: u64) -> SuiteResult {
    let mut c = Checks::new("serialization");
    let outcome = (|| -> Result<()> {
        let mut cfg = BlockConfig::new(16, 4, 3);
        cfg.seed = seed;
        cfg.degree_mask = Some(vec![2, 3]);
        cfg.normalize_y = true;
        cfg.w_mode = WMode::Full;
        cfg.rational = Some(RationalConfig {
            num_degree: 3,
            den_degree: 2,
            epsilon: DEFAULT_EPSILON,
            square_denominator: true,
        });
        let back = BlockConfig::from_json(&cfg.to_json())?;
        c.check(back == cfg, "config JSON round trip");

        let block: PadreBlock<f64> = cfg.build_block()?;
        let bytes = Container::from_block(&block)?.to_bytes()?;
        let restored: PadreBlock<f64> = Container::from_bytes(&bytes)?.to_block()?;
        let same_bytes = Container::from_block(&restored)?.to_bytes()? == bytes;
        c.check(restored == block && same_bytes, format!("block container round trip ({} bytes)", bytes.len()));

        let block32: PadreBlock<f32> = cfg.build_block()?;
        let restored32: PadreBlock<f32> = Container::from_bytes(&Container::from_block(&block32)?.to_bytes()?)?.to_block()?;
        c.check(restored32 == block32, "f32 block container round trip");

        let rational: RationalPadreBlock<f64> = cfg.build_rational()?;
        let bytes = Container::from_rational(&rational)?.to_bytes()?;
        let restored: RationalPadreBlock<f64> = Container::from_bytes(&bytes)?.to_rational()?;
        c.check(restored == rational, "rational container round trip");

        let bench = BenchConfig {
            n_list: vec![16, 64],
            channels: 8,
            reps: 5,
            warmup: 0,
            seed,
            precision: Precision::F64,
            schemes: Scheme::ALL.to_vec(),
        };
        let first = flop_column(&run_bench(&bench)?);
        let second = flop_column(&run_bench(&bench)?);
        c.check(first == second, format!("FLOP column identical across runs ({} rows)", first.len()));
        Ok(())
    })();
    if let Err(e) = outcome {
        c.error("serialization", e);
    }
    c.finish()
}

/// Runs every quick suite (everything except the benchmark sweep).
pub fn quick_suites(seed: u64) -> Vec<SuiteResult> {
    vec![
        tap_homogeneity_suite(seed),
        oracle_suite(seed),
        grad_suite(seed),
        equivalence_suite(seed),
        mamba_suite(seed),
        attention_suite(seed),
        multimodal_suite(seed),
        serialization_suite(seed),
    ]
}

/// Parameter count of the reference instance at `2N` over that at `N`.
pub fn param_ratio_at_double_n(n: usize, d: usize, degree: usize, w_mode: WMode, seed: u64) -> Result<f64> {
    let count = |n: usize| -> Result<usize> {
        let mut r = rng(seed, 800);
        let block: PadreBlock<f64> = build_reference_instance(n, d, degree, default_layout(n), &mut r)?;
        let w = random_weights(w_mode, n, d, degree, &mut r);
        Ok(block.with_weights(w)?.param_count())
    };
    Ok(count(2 * n)? as f64 / count(n)? as f64)
}

/// Scaling criteria over a benchmark sweep of PADRe-2/3/4 and softmax attention.
pub fn complexity_suite(records: &[BenchRecord], sweep_seconds: f64, seed: u64) -> SuiteResult {
    let mut c = Checks::new("complexity scaling");
    let fits = match fit_scaling(records) {
        Ok(f) => f,
        Err(e) => {
            c.error("fit", e);
            return c.finish();
        }
    };
    let (lo, hi) = FLOP_EXPONENT_BAND;
    for fit in &fits {
        let scheme: Scheme = match fit.scheme.parse() {
            Ok(s) => s,
            Err(_) => continue,
        };
        if scheme.is_padre() {
            c.check(
                (lo..=hi).contains(&fit.flop_exponent),
                format!("{} FLOP exponent {:.3} in [{lo}, {hi}]", fit.scheme, fit.flop_exponent),
            );
            c.check(
                fit.time_exponent <= PADRE_TIME_EXPONENT_MAX,
                format!("{} time exponent {:.3} <= {PADRE_TIME_EXPONENT_MAX}", fit.scheme, fit.time_exponent),
            );
        } else if scheme == Scheme::SoftmaxAttn {
            c.check(
                fit.flop_exponent >= ATTN_FLOP_EXPONENT_MIN,
                format!("softmax-attn FLOP exponent {:.3} >= {ATTN_FLOP_EXPONENT_MIN}", fit.flop_exponent),
            );
            c.check(
                fit.time_exponent >= ATTN_TIME_EXPONENT_MIN,
                format!("softmax-attn time exponent {:.3} >= {ATTN_TIME_EXPONENT_MIN}", fit.time_exponent),
            );
        }
    }
    let n = records.iter().map(|r| r.n).max().unwrap_or(0);
    let d = records.first().map_or(0, |r| r.channels);
    let (plo, phi) = PARAM_RATIO_BAND;
    match param_ratio_at_double_n(n, d, 2, WMode::ChannelBroadcast, seed) {
        Ok(ratio) => c.check(
            (plo..=phi).contains(&ratio),
            format!("reference instance param ratio N={n}->{} is {ratio:.3} (want [{plo}, {phi}])", 2 * n),
        ),
        Err(e) => c.error("param ratio", e),
    }
    if let Ok(full) = param_ratio_at_double_n(n, d, 2, WMode::Full, seed) {
        c.note(format!("with per-token weights the ratio would be {full:.3}"));
    }
    c.check(sweep_seconds < 600.0, format!("sweep {sweep_seconds:.0}s < 600s"));
    c.finish()
}

/// PADRe-3 over PADRe-2 FLOPs at the largest swept `N`.
pub fn degree_ratio_suite(records: &[BenchRecord]) -> SuiteResult {
    let mut c = Checks::new("degree-3 over degree-2 FLOPs");
    let n = records.iter().map(|r| r.n).max().unwrap_or(0);
    let flops = |scheme: &str| records.iter().find(|r| r.scheme == scheme && r.n == n).map(|r| r.flops as f64);
    match (flops("padre-2"), flops("padre-3")) {
        (Some(f2), Some(f3)) => {
            let ratio = f3 / f2;
            let (lo, hi) = DEGREE_RATIO_BAND;
            c.check((lo..=hi).contains(&ratio), format!("padre-3/padre-2 at N={n}: {ratio:.3} in [{lo}, {hi}]"));
            c.note(format!(
                "padre-2 {:.3} GFLOP (reference {:.2}), padre-3 {:.3} GFLOP (reference {:.2})",
                f2 / 1e9,
                REFERENCE_GFLOPS.0,
                f3 / 1e9,
                REFERENCE_GFLOPS.1
            ));
        }
        _ => c.check(false, format!("padre-2 and padre-3 records at N={n}")),
    }
    c.finish()
}

/// The default sweep restricted to the block and softmax-attention schemes.
pub fn complexity_bench_config(seed: u64) -> BenchConfig {
    BenchConfig {
        schemes: vec![Scheme::Padre(2), Scheme::Padre(3), Scheme::Padre(4), Scheme::SoftmaxAttn],
        seed,
        ..BenchConfig::default()
    }
}
