//! Linear attention with an auxiliary depthwise-convolution path:
//! `O = Q (K^T V) / pi + (I / 2 + M_DW) V`.

use std::f64::consts::PI;

use rand::Rng;

use super::plan::{Plan, Stage};
use super::{broadcast_column, column, token_sum};
use crate::block::{default_layout, Layout};
use crate::error::{shape_err, Result};
use crate::flops::{FlopCategory, FlopLedger};
use crate::mixer::{Mixer, MixerKind, Padding, Side};
use crate::tensor::Tensor2;

#[derive(Debug, Clone, PartialEq)]
pub struct CastlingParams {
    pub w_q: Tensor2<f64>,
    pub w_k: Tensor2<f64>,
    pub w_v: Tensor2<f64>,
    /// Token-side depthwise convolution.
    pub m_dw: Mixer<f64>,
}

impl CastlingParams {
    pub fn new(w_q: Tensor2<f64>, w_k: Tensor2<f64>, w_v: Tensor2<f64>, m_dw: Mixer<f64>) -> Result<Self> {
        let d = w_q.rows();
        for (name, w) in [("castling w_q", &w_q), ("castling w_k", &w_k), ("castling w_v", &w_v)] {
            if w.shape() != (d, d) {
                return Err(shape_err(name, format!("{d}x{d}"), format!("{}x{}", w.rows(), w.cols())));
            }
        }
        if m_dw.side() != Side::Token {
            return Err(shape_err("castling m_dw", "token-side mixer", "channel-side mixer"));
        }
        Ok(Self { w_q, w_k, w_v, m_dw })
    }

    /// Random projections and a 3-tap (or 3x3 on a square grid) per-channel
    /// convolution over `n` tokens.
    pub fn random<R: Rng + ?Sized>(n: usize, d: usize, rng: &mut R) -> Result<Self> {
        let hw = (3.0 / d as f64).sqrt();
        let kind = match default_layout(n) {
            Layout::Grid { height, width } => MixerKind::Conv2d {
                kh: 3,
                kw: 3,
                height,
                width,
                banks: d,
                padding: Padding::Zero,
            },
            Layout::Seq1d => MixerKind::Conv1d {
                len: 3.min(n),
                banks: d,
                padding: Padding::Zero,
            },
        };
        Self::new(
            Tensor2::random_uniform(d, d, hw, rng),
            Tensor2::random_uniform(d, d, hw, rng),
            Tensor2::random_uniform(d, d, hw, rng),
            Mixer::random(Side::Token, n, kind, rng)?,
        )
    }

    pub fn dim(&self) -> usize {
        self.w_q.rows()
    }

    pub fn param_count(&self) -> usize {
        3 * self.dim() * self.dim() + self.m_dw.param_count()
    }
}

pub fn castling_forward(p: &CastlingParams, x: &Tensor2<f64>, ledger: &mut FlopLedger) -> Result<Tensor2<f64>> {
    let (n, d) = x.shape();
    if d != p.dim() {
        return Err(shape_err("castling input", format!("Nx{}", p.dim()), format!("{n}x{d}")));
    }
    let q = x.matmul(&p.w_q)?;
    let k = x.matmul(&p.w_k)?;
    let v = x.matmul(&p.w_v)?;
    ledger.add(FlopCategory::ChannelMix, (3 * n * d * d) as u64);
    let ktv = k.transpose().matmul(&v)?;
    ledger.add(FlopCategory::TokenMix, (n * d * d) as u64);
    let mut out = q.matmul(&ktv)?.scale(1.0 / PI);
    ledger.add(FlopCategory::ChannelMix, (n * d * d) as u64);
    out.axpy(0.5, &v)?;
    out.add_assign(&p.m_dw.apply(&v, ledger)?)?;
    ledger.add(FlopCategory::Combine, (3 * n * d) as u64);
    Ok(out)
}

/// Per channel `i` a degree-3 branch `(1 1^T (X w_k^i 1^T ⊙ X W_V)) ⊙ X w_q^i 1^T`
/// weighted by `1 / pi`, plus the degree-1 branches `V / 2` and `M_DW V`.
pub fn castling_as_padre(p: &CastlingParams) -> Result<Plan> {
    let d = p.dim();
    let n = p.m_dw.dim();
    let mut plan = Plan::new("castling");
    let x = Plan::INPUT;
    let v = plan.mix(x, Mixer::dense(Side::Channel, p.w_v.clone())?);
    let mut terms = Vec::with_capacity(d + 2);
    for i in 0..d {
        let k_col = plan.mix(x, broadcast_column(column(&p.w_k, i))?);
        let kv = plan.hadamard(k_col, v);
        let summed = plan.mix(kv, token_sum(n)?);
        let q_col = plan.mix(x, broadcast_column(column(&p.w_q, i))?);
        terms.push((plan.hadamard(summed, q_col), 1.0 / PI));
    }
    let mv = plan.mix(v, p.m_dw.clone());
    terms.push((v, 0.5));
    terms.push((mv, 1.0));
    plan.push(Stage::Combine { terms, bias: None });
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::check_plan;
    use crate::oracle::{extract_coeffs, max_effective_degree};
    use crate::tensor::rel_err;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_input_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = CastlingParams::random(6, 3, &mut rng).unwrap();
        let o = castling_forward(&p, &Tensor2::zeros(6, 3), &mut FlopLedger::new()).unwrap();
        assert_eq!(o.max_abs(), 0.0);
    }

    #[test]
    fn linear_part_is_half_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (n, d) = (5, 2);
        let m_dw = Mixer::conv1d_banked(Side::Token, n, 3, vec![0.0; 3 * d], Padding::Zero).unwrap();
        let p = CastlingParams::new(Tensor2::zeros(d, d), Tensor2::zeros(d, d), Tensor2::identity(d), m_dw).unwrap();
        let x = Tensor2::random_uniform(n, d, 1.0, &mut rng);
        let o = castling_forward(&p, &x, &mut FlopLedger::new()).unwrap();
        assert!(rel_err(&o, &x.scale(0.5)) < 1e-15);
    }

    #[test]
    fn degree_three_inhomogeneous() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = CastlingParams::random(4, 2, &mut rng).unwrap();
        let f = |x: &Tensor2<f64>| castling_forward(&p, x, &mut FlopLedger::new());
        assert_eq!(max_effective_degree(&f, (4, 2), 4, &mut rng).unwrap(), 3);
        let coeffs = extract_coeffs(&f, 4, 2, 3).unwrap();
        let present = coeffs.degrees_present();
        assert!(present.contains(&1) && present.contains(&3) && !present.contains(&2), "{present:?}");
    }

    #[test]
    fn plan_matches_direct() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = CastlingParams::random(16, 4, &mut rng).unwrap();
        let plan = castling_as_padre(&p).unwrap();
        assert!(plan.is_polynomial());
        let rep = check_plan("castling", |x| castling_forward(&p, x, &mut FlopLedger::new()), &plan, (16, 4), 100, 9).unwrap();
        assert!(rep.pass, "{rep:?}");
    }
}
