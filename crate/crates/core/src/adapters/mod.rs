//! Reference implementations of existing attention-like operators and their
//! rewrites as block plans. Everything here is `f64`: these are correctness
//! artifacts, compared against the plans with seeded random inputs.

pub mod attention;
pub mod castling;
pub mod conv2former;
pub mod hyena;
pub mod mamba;
pub mod plan;
pub mod sima;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{PadreError, Result};
use crate::flops::FlopLedger;
use crate::tensor::{rel_err, Tensor2};

pub use attention::{attention_matrix, attention_rational_approx, softmax_attention, AttnParams, RationalApprox};
pub use castling::{castling_as_padre, castling_forward, CastlingParams};
pub use conv2former::{conv2former_as_padre, conv2former_forward, Conv2FormerParams};
pub use hyena::{hyena_as_padre, hyena_forward, hyena_forward_closed, hyena_forward_recurrence, hyena_projections, HyenaParams};
pub use mamba::{mamba_as_padre, mamba_closed_form, mamba_delta, mamba_forward, mamba_padre_approx, mamba_surrogate_frozen, MambaParams};
pub use plan::{Plan, Stage};
pub use sima::{sima_as_padre, sima_forward, sima_numerator, SimaParams};

/// Relative tolerance for plan-versus-direct agreement.
pub const EQUIV_TOL: f64 = 1e-10;

/// Default number of random inputs per equivalence check.
pub const EQUIV_TRIALS: usize = 100;

/// Outcome of one equivalence or approximation check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquivReport {
    pub scheme: String,
    pub seed: u64,
    pub trials: usize,
    pub max_deviation: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl EquivReport {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }

    /// Turns a failed report into an [`PadreError::Equivalence`].
    pub fn into_result(self) -> Result<Self> {
        if self.pass {
            Ok(self)
        } else {
            Err(PadreError::Equivalence {
                scheme: self.scheme,
                max_deviation: self.max_deviation,
            })
        }
    }
}

/// Evaluates `direct` and `plan` on `trials` inputs of the given shape with
/// entries uniform in `[-1, 1]`. Trial `t` draws from seed `seed + t`, and
/// trials are spread over scoped threads.
pub fn check_plan<F>(scheme: &str, direct: F, plan: &Plan, shape: (usize, usize), trials: usize, seed: u64) -> Result<EquivReport>
where
    F: Fn(&Tensor2<f64>) -> Result<Tensor2<f64>> + Sync,
{
    let deviation = |t: usize| -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(t as u64));
        let x = Tensor2::random_uniform(shape.0, shape.1, 1.0, &mut rng);
        let a = direct(&x)?;
        let b = plan.evaluate(&x, &mut FlopLedger::new())?;
        a.check_same_shape(&b, "plan output")?;
        Ok(rel_err(&a, &b))
    };
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(trials.max(1));
    let results: Vec<Result<f64>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let deviation = &deviation;
                s.spawn(move || (w..trials).step_by(workers).map(deviation).collect::<Vec<_>>())
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("trial thread panicked")).collect()
    });
    let mut max_deviation = 0.0f64;
    for r in results {
        max_deviation = max_deviation.max(r?);
    }
    Ok(EquivReport {
        scheme: scheme.to_string(),
        seed,
        trials,
        max_deviation,
        tolerance: EQUIV_TOL,
        pass: max_deviation <= EQUIV_TOL,
    })
}

/// `w[:, col]` as a `rows x 1` column.
pub(crate) fn column(w: &Tensor2<f64>, col: usize) -> Tensor2<f64> {
    Tensor2::from_fn(w.rows(), 1, |r, _| w.get(r, col))
}

/// Channel-side rank-1 mixer `X -> (X w) 1^T`: every output column equals `X w`.
pub(crate) fn broadcast_column(w: Tensor2<f64>) -> Result<crate::mixer::Mixer<f64>> {
    let d = w.rows();
    crate::mixer::Mixer::low_rank(crate::mixer::Side::Channel, w, Tensor2::ones(1, d))
}

/// Token-side rank-1 mixer `S -> 1 1^T S` (column sums broadcast down).
pub(crate) fn token_sum(n: usize) -> Result<crate::mixer::Mixer<f64>> {
    crate::mixer::Mixer::low_rank(crate::mixer::Side::Token, Tensor2::ones(n, 1), Tensor2::ones(1, n))
}
