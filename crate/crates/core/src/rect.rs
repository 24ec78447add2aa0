//! Rectangular linear operators used for resizing (`O = U P V`) and for
//! projecting inputs onto a common shape.

use rand::Rng;

use crate::error::{shape_err, PadreError, Result};
use crate::flops::{FlopCategory, FlopLedger};
use crate::mixer::{mm, mm_nt, mm_tn};
use crate::scalar::Scalar;
use crate::tensor::Tensor2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RectKind {
    /// Only valid when `rows == cols`.
    Identity,
    Dense,
    /// `left (rows x rank)` then `right (rank x cols)`.
    LowRank { rank: usize },
}

/// A `rows x cols` operator applied as `op * x` (left) or `x * op` (right).
#[derive(Debug, Clone, PartialEq)]
pub struct RectOp<T> {
    rows: usize,
    cols: usize,
    kind: RectKind,
    params: Vec<T>,
}

impl<T: Scalar> RectOp<T> {
    pub fn new(rows: usize, cols: usize, kind: RectKind, params: Vec<T>) -> Result<Self> {
        let expected = match kind {
            RectKind::Identity => {
                if rows != cols {
                    return Err(PadreError::Config(format!("identity operator must be square, got {rows}x{cols}")));
                }
                0
            }
            RectKind::Dense => rows * cols,
            RectKind::LowRank { rank } => {
                if rank == 0 || rank > rows.min(cols) {
                    return Err(PadreError::Config(format!("rank {rank} invalid for {rows}x{cols} operator")));
                }
                rank * (rows + cols)
            }
        };
        if params.len() != expected {
            return Err(shape_err("RectOp::new", format!("{expected} params"), format!("{}", params.len())));
        }
        Ok(Self { rows, cols, kind, params })
    }

    pub fn identity(n: usize) -> Self {
        Self::new(n, n, RectKind::Identity, Vec::new()).expect("identity")
    }

    pub fn dense(m: Tensor2<T>) -> Self {
        let (rows, cols) = m.shape();
        Self::new(rows, cols, RectKind::Dense, m.into_data()).expect("dense")
    }

    pub fn low_rank(left: Tensor2<T>, right: Tensor2<T>) -> Result<Self> {
        let (rows, rank) = left.shape();
        if right.rows() != rank {
            return Err(shape_err("RectOp::low_rank", format!("right factor with {rank} rows"), format!("{}", right.rows())));
        }
        let cols = right.cols();
        let mut params = left.into_data();
        params.extend_from_slice(right.data());
        Self::new(rows, cols, RectKind::LowRank { rank }, params)
    }

    /// Dense operator with uniform entries of half-width `sqrt(3 / cols)`.
    pub fn random_dense<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let hw = (3.0 / cols.max(1) as f64).sqrt();
        Self::dense(Tensor2::random_uniform(rows, cols, hw, rng))
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn kind(&self) -> RectKind {
        self.kind
    }

    #[inline]
    pub fn params(&self) -> &[T] {
        &self.params
    }

    #[inline]
    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn macs(&self, lanes: usize) -> u64 {
        let lanes = lanes as u64;
        match self.kind {
            RectKind::Identity => 0,
            RectKind::Dense => (self.rows * self.cols) as u64 * lanes,
            RectKind::LowRank { rank } => (rank * (self.rows + self.cols)) as u64 * lanes,
        }
    }

    fn split(&self, rank: usize) -> (&[T], &[T]) {
        self.params.split_at(self.rows * rank)
    }

    /// `op * x`; `x` has `cols` rows.
    pub fn apply_left(&self, x: &Tensor2<T>, category: FlopCategory, ledger: &mut FlopLedger) -> Result<Tensor2<T>> {
        if x.rows() != self.cols {
            return Err(shape_err("RectOp::apply_left", format!("{} rows", self.cols), format!("{}", x.rows())));
        }
        let n = x.cols();
        ledger.add(category, self.macs(n));
        let mut out = vec![T::zero(); self.rows * n];
        match self.kind {
            RectKind::Identity => return Ok(x.clone()),
            RectKind::Dense => mm(&self.params, x.data(), &mut out, self.rows, self.cols, n),
            RectKind::LowRank { rank } => {
                let (l, r) = self.split(rank);
                let mut t = vec![T::zero(); rank * n];
                mm(r, x.data(), &mut t, rank, self.cols, n);
                mm(l, &t, &mut out, self.rows, rank, n);
            }
        }
        Tensor2::from_vec(self.rows, n, out)
    }

    /// `op^T * g`; `g` has `rows` rows.
    pub fn apply_left_t(&self, g: &Tensor2<T>, category: FlopCategory, ledger: &mut FlopLedger) -> Result<Tensor2<T>> {
        if g.rows() != self.rows {
            return Err(shape_err("RectOp::apply_left_t", format!("{} rows", self.rows), format!("{}", g.rows())));
        }
        let n = g.cols();
        ledger.add(category, self.macs(n));
        let mut out = vec![T::zero(); self.cols * n];
        match self.kind {
            RectKind::Identity => return Ok(g.clone()),
            RectKind::Dense => mm_tn(&self.params, g.data(), &mut out, self.cols, self.rows, n),
            RectKind::LowRank { rank } => {
                let (l, r) = self.split(rank);
                let mut t = vec![T::zero(); rank * n];
                mm_tn(l, g.data(), &mut t, rank, self.rows, n);
                mm_tn(r, &t, &mut out, self.cols, rank, n);
            }
        }
        Tensor2::from_vec(self.cols, n, out)
    }

    /// `x * op`; `x` has `rows` columns.
    pub fn apply_right(&self, x: &Tensor2<T>, category: FlopCategory, ledger: &mut FlopLedger) -> Result<Tensor2<T>> {
        if x.cols() != self.rows {
            return Err(shape_err("RectOp::apply_right", format!("{} columns", self.rows), format!("{}", x.cols())));
        }
        let m = x.rows();
        ledger.add(category, self.macs(m));
        let mut out = vec![T::zero(); m * self.cols];
        match self.kind {
            RectKind::Identity => return Ok(x.clone()),
            RectKind::Dense => mm(x.data(), &self.params, &mut out, m, self.rows, self.cols),
            RectKind::LowRank { rank } => {
                let (l, r) = self.split(rank);
                let mut t = vec![T::zero(); m * rank];
                mm(x.data(), l, &mut t, m, self.rows, rank);
                mm(&t, r, &mut out, m, rank, self.cols);
            }
        }
        Tensor2::from_vec(m, self.cols, out)
    }

    /// `g * op^T`; `g` has `cols` columns.
    pub fn apply_right_t(&self, g: &Tensor2<T>, category: FlopCategory, ledger: &mut FlopLedger) -> Result<Tensor2<T>> {
        if g.cols() != self.cols {
            return Err(shape_err("RectOp::apply_right_t", format!("{} columns", self.cols), format!("{}", g.cols())));
        }
        let m = g.rows();
        ledger.add(category, self.macs(m));
        let mut out = vec![T::zero(); m * self.rows];
        match self.kind {
            RectKind::Identity => return Ok(g.clone()),
            RectKind::Dense => mm_nt(g.data(), &self.params, &mut out, m, self.cols, self.rows),
            RectKind::LowRank { rank } => {
                let (l, r) = self.split(rank);
                let mut t = vec![T::zero(); m * rank];
                mm_nt(g.data(), r, &mut t, m, self.cols, rank);
                mm_nt(&t, l, &mut out, m, rank, self.rows);
            }
        }
        Tensor2::from_vec(m, self.rows, out)
    }

    /// Gradient of `<g, op * x>` with respect to the parameters.
    pub fn grad_left(&self, x: &Tensor2<T>, g: &Tensor2<T>) -> Vec<T> {
        let n = x.cols();
        match self.kind {
            RectKind::Identity => Vec::new(),
            RectKind::Dense => {
                let mut d = vec![T::zero(); self.rows * self.cols];
                mm_nt(g.data(), x.data(), &mut d, self.rows, n, self.cols);
                d
            }
            RectKind::LowRank { rank } => {
                let (l, r) = self.split(rank);
                let mut t = vec![T::zero(); rank * n];
                mm(r, x.data(), &mut t, rank, self.cols, n);
                let mut dl = vec![T::zero(); self.rows * rank];
                mm_nt(g.data(), &t, &mut dl, self.rows, n, rank);
                let mut lg = vec![T::zero(); rank * n];
                mm_tn(l, g.data(), &mut lg, rank, self.rows, n);
                let mut dr = vec![T::zero(); rank * self.cols];
                mm_nt(&lg, x.data(), &mut dr, rank, n, self.cols);
                dl.extend(dr);
                dl
            }
        }
    }

    /// Gradient of `<g, x * op>` with respect to the parameters.
    pub fn grad_right(&self, x: &Tensor2<T>, g: &Tensor2<T>) -> Vec<T> {
        let m = x.rows();
        match self.kind {
            RectKind::Identity => Vec::new(),
            RectKind::Dense => {
                let mut d = vec![T::zero(); self.rows * self.cols];
                mm_tn(x.data(), g.data(), &mut d, self.rows, m, self.cols);
                d
            }
            RectKind::LowRank { rank } => {
                let (l, r) = self.split(rank);
                let mut s = vec![T::zero(); m * rank];
                mm(x.data(), l, &mut s, m, self.rows, rank);
                let mut dr = vec![T::zero(); rank * self.cols];
                mm_tn(&s, g.data(), &mut dr, rank, m, self.cols);
                let mut gr = vec![T::zero(); m * rank];
                mm_nt(g.data(), r, &mut gr, m, self.cols, rank);
                let mut dl = vec![T::zero(); self.rows * rank];
                mm_tn(x.data(), &gr, &mut dl, self.rows, m, rank);
                dl.extend(dr);
                dl
            }
        }
    }

    pub fn as_dense(&self) -> Tensor2<T> {
        match self.kind {
            RectKind::Identity => Tensor2::identity(self.rows),
            RectKind::Dense => Tensor2::from_vec(self.rows, self.cols, self.params.clone()).expect("shape"),
            RectKind::LowRank { rank } => {
                let (l, r) = self.split(rank);
                let l = Tensor2::from_vec(self.rows, rank, l.to_vec()).expect("shape");
                let r = Tensor2::from_vec(rank, self.cols, r.to_vec()).expect("shape");
                l.matmul(&r).expect("shape")
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ops() -> Vec<RectOp<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        vec![
            RectOp::random_dense(3, 5, &mut rng),
            RectOp::low_rank(
                Tensor2::random_uniform(3, 2, 1.0, &mut rng),
                Tensor2::random_uniform(2, 5, 1.0, &mut rng),
            )
            .unwrap(),
        ]
    }

    #[test]
    fn applications_match_dense_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut ledger = FlopLedger::new();
        let c = FlopCategory::Resize;
        for op in ops() {
            let m = op.as_dense();
            let x = Tensor2::random_uniform(5, 4, 1.0, &mut rng);
            assert!(crate::tensor::rel_err(&op.apply_left(&x, c, &mut ledger).unwrap(), &m.matmul(&x).unwrap()) < 1e-14);
            let g = Tensor2::random_uniform(3, 4, 1.0, &mut rng);
            let want = m.transpose().matmul(&g).unwrap();
            assert!(crate::tensor::rel_err(&op.apply_left_t(&g, c, &mut ledger).unwrap(), &want) < 1e-14);
            let y = Tensor2::random_uniform(2, 3, 1.0, &mut rng);
            assert!(crate::tensor::rel_err(&op.apply_right(&y, c, &mut ledger).unwrap(), &y.matmul(&m).unwrap()) < 1e-14);
            let h = Tensor2::random_uniform(2, 5, 1.0, &mut rng);
            let want = h.matmul(&m.transpose()).unwrap();
            assert!(crate::tensor::rel_err(&op.apply_right_t(&h, c, &mut ledger).unwrap(), &want) < 1e-14);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let c = FlopCategory::Resize;
        for op in ops() {
            let x = Tensor2::random_uniform(5, 4, 1.0, &mut rng);
            let g = Tensor2::random_uniform(3, 4, 1.0, &mut rng);
            let grad = op.grad_left(&x, &g);
            for (p, &analytic) in grad.iter().enumerate() {
                let mut plus = op.clone();
                plus.params_mut()[p] += 1e-6;
                let mut minus = op.clone();
                minus.params_mut()[p] -= 1e-6;
                let mut l = FlopLedger::new();
                let fp = plus.apply_left(&x, c, &mut l).unwrap().dot(&g).unwrap();
                let fm = minus.apply_left(&x, c, &mut l).unwrap().dot(&g).unwrap();
                assert!((analytic - (fp - fm) / 2e-6).abs() < 1e-7);
            }
            let y = Tensor2::random_uniform(2, 3, 1.0, &mut rng);
            let h = Tensor2::random_uniform(2, 5, 1.0, &mut rng);
            let grad = op.grad_right(&y, &h);
            for (p, &analytic) in grad.iter().enumerate() {
                let mut plus = op.clone();
                plus.params_mut()[p] += 1e-6;
                let mut minus = op.clone();
                minus.params_mut()[p] -= 1e-6;
                let mut l = FlopLedger::new();
                let fp = plus.apply_right(&y, c, &mut l).unwrap().dot(&h).unwrap();
                let fm = minus.apply_right(&y, c, &mut l).unwrap().dot(&h).unwrap();
                assert!((analytic - (fp - fm) / 2e-6).abs() < 1e-7);
            }
        }
    }
}
