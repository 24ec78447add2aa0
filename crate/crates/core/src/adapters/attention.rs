//! Single-head softmax attention and its rational approximation obtained by
//! truncating every exponential to a degree-`d` Taylor polynomial.

use rand::Rng;
use serde::Serialize;

use crate::error::{shape_err, PadreError, Result};
use crate::flops::{FlopCategory, FlopLedger};
use crate::tensor::Tensor2;

/// Denominators below this magnitude make the approximation unusable.
pub const DENOM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct AttnParams {
    pub w_q: Tensor2<f64>,
    pub w_k: Tensor2<f64>,
    pub w_v: Tensor2<f64>,
    pub d_k: usize,
}

impl AttnParams {
    pub fn new(w_q: Tensor2<f64>, w_k: Tensor2<f64>, w_v: Tensor2<f64>, d_k: usize) -> Result<Self> {
        let d = w_q.rows();
        for (name, w) in [("attention w_q", &w_q), ("attention w_k", &w_k), ("attention w_v", &w_v)] {
            if w.shape() != (d, d) {
                return Err(shape_err(name, format!("{d}x{d}"), format!("{}x{}", w.rows(), w.cols())));
            }
        }
        if d_k == 0 {
            return Err(PadreError::Config("head dim must be positive".into()));
        }
        Ok(Self { w_q, w_k, w_v, d_k })
    }

    /// Random projections with `d_k = D`.
    pub fn random<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        let hw = (3.0 / d as f64).sqrt();
        Self {
            w_q: Tensor2::random_uniform(d, d, hw, rng),
            w_k: Tensor2::random_uniform(d, d, hw, rng),
            w_v: Tensor2::random_uniform(d, d, hw, rng),
            d_k: d,
        }
    }

    pub fn dim(&self) -> usize {
        self.w_q.rows()
    }

    pub fn param_count(&self) -> usize {
        3 * self.dim() * self.dim()
    }
}

/// Scaled logits `Q K^T / sqrt(d_k)` and values `V`.
fn logits_and_values(p: &AttnParams, x: &Tensor2<f64>, ledger: &mut FlopLedger) -> Result<(Tensor2<f64>, Tensor2<f64>)> {
    let (n, d) = x.shape();
    if d != p.dim() {
        return Err(shape_err("attention input", format!("Nx{}", p.dim()), format!("{n}x{d}")));
    }
    let q = x.matmul(&p.w_q)?;
    let k = x.matmul(&p.w_k)?;
    let v = x.matmul(&p.w_v)?;
    ledger.add(FlopCategory::ChannelMix, (3 * n * d * d) as u64);
    let s = q.matmul(&k.transpose())?.scale(1.0 / (p.d_k as f64).sqrt());
    ledger.add(FlopCategory::TokenMix, (n * n * d) as u64);
    Ok((s, v))
}

pub fn logits(p: &AttnParams, x: &Tensor2<f64>) -> Result<Tensor2<f64>> {
    Ok(logits_and_values(p, x, &mut FlopLedger::new())?.0)
}

/// Row-stochastic `softmax(Q K^T / sqrt(d_k))`, stabilized by subtracting each row maximum.
pub fn attention_matrix(p: &AttnParams, x: &Tensor2<f64>) -> Result<Tensor2<f64>> {
    let s = logits(p, x)?;
    Ok(softmax_rows(&s, &mut FlopLedger::new()))
}

fn softmax_rows(s: &Tensor2<f64>, ledger: &mut FlopLedger) -> Tensor2<f64> {
    let mut a = s.clone();
    for r in 0..a.rows() {
        let row = a.row_mut(r);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    ledger.add(FlopCategory::Normalize, (3 * s.len()) as u64);
    a
}

pub fn softmax_attention(p: &AttnParams, x: &Tensor2<f64>, ledger: &mut FlopLedger) -> Result<Tensor2<f64>> {
    let (s, v) = logits_and_values(p, x, ledger)?;
    let a = softmax_rows(&s, ledger);
    let out = a.matmul(&v)?;
    ledger.add(FlopCategory::TokenMix, (a.len() * v.cols()) as u64);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RationalApprox {
    #[serde(skip)]
    pub output: Tensor2<f64>,
    /// `max |logit|`.
    pub logit_bound: f64,
    /// `e^L L^{d+1} / (d+1)!`, the Lagrange remainder bound for one exponential.
    pub term_bound: f64,
}

/// Degree-`d` Taylor polynomial of `exp` at `z`.
fn exp_taylor(z: f64, degree: usize) -> f64 {
    let mut term = 1.0;
    let mut acc = 1.0;
    for l in 1..=degree {
        term *= z / l as f64;
        acc += term;
    }
    acc
}

/// `O_m = Σ_i T_d(S_mi) V_i / Σ_j T_d(S_mj)` with `T_d` the truncated series.
pub fn attention_rational_approx(p: &AttnParams, x: &Tensor2<f64>, degree: usize) -> Result<RationalApprox> {
    let (s, v) = logits_and_values(p, x, &mut FlopLedger::new())?;
    let logit_bound = s.max_abs();
    if !logit_bound.is_finite() {
        return Err(PadreError::NonFinite { stage: "logits".into() });
    }
    let mut w = s.map(|z| exp_taylor(z, degree));
    for r in 0..w.rows() {
        let den: f64 = w.row(r).iter().sum();
        if den.abs() < DENOM_EPS {
            return Err(PadreError::Instability { row: r, value: den });
        }
        w.row_mut(r).iter_mut().for_each(|e| *e /= den);
    }
    let fact: f64 = (1..=degree + 1).map(|k| k as f64).product();
    Ok(RationalApprox {
        output: w.matmul(&v)?,
        logit_bound,
        term_bound: logit_bound.exp() * logit_bound.powi(degree as i32 + 1) / fact,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::rel_err;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Rescales `W_Q` so that the largest logit magnitude is `bound`.
    fn with_bound(p: &AttnParams, x: &Tensor2<f64>, bound: f64) -> AttnParams {
        let l = logits(p, x).unwrap().max_abs();
        AttnParams {
            w_q: p.w_q.scale(bound / l),
            ..p.clone()
        }
    }

    #[test]
    fn single_token_returns_value_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = AttnParams::random(3, &mut rng);
        let x = Tensor2::random_uniform(1, 3, 1.0, &mut rng);
        let o = softmax_attention(&p, &x, &mut FlopLedger::new()).unwrap();
        assert!(rel_err(&o, &x.matmul(&p.w_v).unwrap()) < 1e-15);
    }

    #[test]
    fn rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = AttnParams::random(4, &mut rng);
        let x = Tensor2::random_uniform(9, 4, 3.0, &mut rng);
        let a = attention_matrix(&p, &x).unwrap();
        for r in 0..9 {
            assert!((a.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_logits_average_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = AttnParams::random(3, &mut rng);
        p.w_q = Tensor2::zeros(3, 3);
        let x = Tensor2::random_uniform(5, 3, 1.0, &mut rng);
        let o = softmax_attention(&p, &x, &mut FlopLedger::new()).unwrap();
        let v = x.matmul(&p.w_v).unwrap();
        let mean = Tensor2::from_fn(5, 3, |_, c| (0..5).map(|r| v.get(r, c)).sum::<f64>() / 5.0);
        assert!(rel_err(&o, &mean) < 1e-14);
    }

    #[test]
    fn degree_zero_is_uniform_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = AttnParams::random(3, &mut rng);
        let x = Tensor2::random_uniform(6, 3, 1.0, &mut rng);
        let approx = attention_rational_approx(&p, &x, 0).unwrap();
        let v = x.matmul(&p.w_v).unwrap();
        let mean = Tensor2::from_fn(6, 3, |_, c| (0..6).map(|r| v.get(r, c)).sum::<f64>() / 6.0);
        assert!(rel_err(&approx.output, &mean) < 1e-14);
    }

    #[test]
    fn error_within_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let p = AttnParams::random(4, &mut rng);
            let x = Tensor2::random_uniform(8, 4, 1.0, &mut rng);
            let p = with_bound(&p, &x, 1.0);
            let exact = softmax_attention(&p, &x, &mut FlopLedger::new()).unwrap();
            for d in 0..=12 {
                let a = attention_rational_approx(&p, &x, d).unwrap();
                let err = a.output.sub(&exact).unwrap().max_abs();
                assert!(err <= 4.0 * a.term_bound, "d={d}: {err} > 4 * {}", a.term_bound);
                if d == 12 {
                    assert!(err < 1e-8);
                }
            }
        }
    }

    #[test]
    fn batch_error_decreases_with_degree() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cases: Vec<_> = (0..20)
            .map(|_| {
                let p = AttnParams::random(4, &mut rng);
                let x = Tensor2::random_uniform(8, 4, 1.0, &mut rng);
                (with_bound(&p, &x, 1.0), x)
            })
            .collect();
        let mut prev = f64::INFINITY;
        for d in 0..=12 {
            let err = cases
                .iter()
                .map(|(p, x)| {
                    let exact = softmax_attention(p, x, &mut FlopLedger::new()).unwrap();
                    attention_rational_approx(p, x, d).unwrap().output.sub(&exact).unwrap().max_abs()
                })
                .fold(0.0, f64::max);
            assert!(err < prev, "d={d}: {err} >= {prev}");
            prev = err;
        }
    }

    #[test]
    fn vanishing_denominator_is_reported() {
        // Every logit is -1, so the degree-1 weights 1 + s vanish.
        let p = AttnParams::new(Tensor2::identity(1), Tensor2::identity(1).scale(-1.0), Tensor2::identity(1), 1).unwrap();
        let x = Tensor2::from_vec(2, 1, vec![1.0, 1.0]).unwrap();
        let err = attention_rational_approx(&p, &x, 1).unwrap_err();
        assert!(matches!(err, PadreError::Instability { row: 0, .. }));
    }

    #[test]
    fn softmax_is_not_a_low_degree_polynomial() {
        use crate::oracle::extract_coeffs;
        let p = AttnParams::new(Tensor2::identity(1).scale(2.0), Tensor2::identity(1).scale(2.0), Tensor2::identity(1), 1).unwrap();
        let f = |x: &Tensor2<f64>| softmax_attention(&p, x, &mut FlopLedger::new());
        for d in 1..=4 {
            let err = extract_coeffs(&f, 2, 1, d).unwrap_err();
            assert!(matches!(err, PadreError::NotPolynomial { .. }), "d={d}: {err:?}");
        }
    }
}
