//! Softmax-free attention with l1 column normalization of Q and K.

use rand::Rng;

use super::plan::{Plan, Stage, NORM_EPS};
use super::{broadcast_column, column, token_sum};
use crate::error::{shape_err, PadreError, Result};
use crate::flops::{FlopCategory, FlopLedger};
use crate::mixer::{Mixer, Side};
use crate::tensor::Tensor2;

#[derive(Debug, Clone, PartialEq)]
pub struct SimaParams {
    pub w_q: Tensor2<f64>,
    pub w_k: Tensor2<f64>,
    pub w_v: Tensor2<f64>,
}

impl SimaParams {
    pub fn new(w_q: Tensor2<f64>, w_k: Tensor2<f64>, w_v: Tensor2<f64>) -> Result<Self> {
        let d = w_q.rows();
        for (name, w) in [("sima w_q", &w_q), ("sima w_k", &w_k), ("sima w_v", &w_v)] {
            if w.shape() != (d, d) {
                return Err(shape_err(name, format!("{d}x{d}"), format!("{}x{}", w.rows(), w.cols())));
            }
        }
        Ok(Self { w_q, w_k, w_v })
    }

    pub fn random<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        let hw = (3.0 / d as f64).sqrt();
        Self {
            w_q: Tensor2::random_uniform(d, d, hw, rng),
            w_k: Tensor2::random_uniform(d, d, hw, rng),
            w_v: Tensor2::random_uniform(d, d, hw, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.w_q.rows()
    }

    pub fn param_count(&self) -> usize {
        3 * self.dim() * self.dim()
    }
}

fn column_l1(t: &Tensor2<f64>) -> Result<Vec<f64>> {
    let mut norms = vec![0.0; t.cols()];
    for r in 0..t.rows() {
        for (n, v) in norms.iter_mut().zip(t.row(r)) {
            *n += v.abs();
        }
    }
    match norms.iter().position(|&n| n <= NORM_EPS) {
        Some(column) => Err(PadreError::Normalization {
            column,
            norm: norms[column],
        }),
        None => Ok(norms),
    }
}

/// `Q^ (K^T V)` with `Q^`, `K^` the column-l1-normalized projections, in the
/// `O(N D^2)` order.
pub fn sima_forward(p: &SimaParams, x: &Tensor2<f64>, ledger: &mut FlopLedger) -> Result<Tensor2<f64>> {
    let (n, d) = x.shape();
    if d != p.dim() {
        return Err(shape_err("sima input", format!("Nx{}", p.dim()), format!("{n}x{d}")));
    }
    let mut q = x.matmul(&p.w_q)?;
    let mut k = x.matmul(&p.w_k)?;
    let v = x.matmul(&p.w_v)?;
    ledger.add(FlopCategory::ChannelMix, (3 * n * d * d) as u64);
    let qn = column_l1(&q)?;
    let kn = column_l1(&k)?;
    for r in 0..n {
        for c in 0..d {
            q.set(r, c, q.get(r, c) / qn[c]);
            k.set(r, c, k.get(r, c) / kn[c]);
        }
    }
    ledger.add(FlopCategory::Normalize, (4 * n * d) as u64);
    let ktv = k.transpose().matmul(&v)?;
    ledger.add(FlopCategory::TokenMix, (n * d * d) as u64);
    let out = q.matmul(&ktv)?;
    ledger.add(FlopCategory::ChannelMix, (n * d * d) as u64);
    Ok(out)
}

/// The numerator `Q (K^T V)` without the l1 normalizers.
pub fn sima_numerator(p: &SimaParams, x: &Tensor2<f64>) -> Result<Tensor2<f64>> {
    let q = x.matmul(&p.w_q)?;
    let k = x.matmul(&p.w_k)?;
    let v = x.matmul(&p.w_v)?;
    q.matmul(&k.transpose().matmul(&v)?)
}

/// One rational branch per channel `i`:
/// `[(1 1^T (X w_k^i 1^T ⊙ X W_V)) ⊙ X w_q^i 1^T] / [|Q^i|_1 |K^i|_1]`.
/// The numerator is a degree-3 cascade; the denominator is built from the two
/// column-l1 normalizers broadcast over the output.
pub fn sima_as_padre(p: &SimaParams, n: usize) -> Result<Plan> {
    let d = p.dim();
    let mut plan = Plan::new("sima");
    let x = Plan::INPUT;
    let v = plan.mix(x, Mixer::dense(Side::Channel, p.w_v.clone())?);
    let q = plan.mix(x, Mixer::dense(Side::Channel, p.w_q.clone())?);
    let k = plan.mix(x, Mixer::dense(Side::Channel, p.w_k.clone())?);
    let q_norm = plan.push(Stage::ColumnL1 { src: q });
    let k_norm = plan.push(Stage::ColumnL1 { src: k });
    let mut terms = Vec::with_capacity(d);
    for i in 0..d {
        let e_i = Tensor2::from_fn(d, 1, |r, _| if r == i { 1.0 } else { 0.0 });
        let k_col = plan.mix(x, broadcast_column(column(&p.w_k, i))?);
        let kv = plan.hadamard(k_col, v);
        let summed = plan.mix(kv, token_sum(n)?);
        let q_col = plan.mix(x, broadcast_column(column(&p.w_q, i))?);
        let num = plan.hadamard(summed, q_col);
        let qn_i = plan.mix(q_norm, broadcast_column(e_i.clone())?);
        let kn_i = plan.mix(k_norm, broadcast_column(e_i)?);
        let den = plan.hadamard(qn_i, kn_i);
        terms.push((plan.push(Stage::Divide { num, den }), 1.0));
    }
    plan.push(Stage::Combine { terms, bias: None });
    Ok(plan)
}
