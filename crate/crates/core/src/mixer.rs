//! Structured linear operators applied on the token side (`M * X`) or the
//! channel side (`X * M`).
//!
//! Convolutions are cross-correlations centred at `(len - 1) / 2` with
//! "same" output size. A convolution may carry one kernel shared by every
//! lane or one kernel per lane (depthwise); lanes are the columns for a
//! token-side mixer and the rows for a channel-side mixer. On the channel
//! side the convolution acts along each row, so the equivalent right factor
//! is the transpose of the convolution matrix.

use rand::Rng;

use crate::error::{shape_err, PadreError, Result};
use crate::flops::{FlopCategory, FlopLedger};
use crate::scalar::Scalar;
use crate::tensor::Tensor2;

/// Default size cap for [`Mixer::as_dense`].
pub const ORACLE_DIM_CAP: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    Token,
    Channel,
}

impl Side {
    fn category(self) -> FlopCategory {
        match self {
            Side::Token => FlopCategory::TokenMix,
            Side::Channel => FlopCategory::ChannelMix,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Padding {
    #[default]
    Zero,
    Circular,
}

/// Structural description of a mixer; the numbers live in [`Mixer::params`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixerKind {
    Identity,
    /// `dim x dim` row-major matrix.
    Dense,
    Diagonal,
    /// `left (dim x rank)` followed by `right (rank x dim)`, product `left * right`.
    LowRank { rank: usize },
    /// `banks x len` kernel taps.
    Conv1d { len: usize, banks: usize, padding: Padding },
    /// `banks x kh x kw` kernel taps over a row-major `height x width` raster.
    Conv2d {
        kh: usize,
        kw: usize,
        height: usize,
        width: usize,
        banks: usize,
        padding: Padding,
    },
}

impl MixerKind {
    pub fn name(&self) -> &'static str {
        match self {
            MixerKind::Identity => "identity",
            MixerKind::Dense => "dense",
            MixerKind::Diagonal => "diagonal",
            MixerKind::LowRank { .. } => "low-rank",
            MixerKind::Conv1d { .. } => "conv1d",
            MixerKind::Conv2d { .. } => "conv2d",
        }
    }

    fn expected_params(&self, dim: usize) -> usize {
        match *self {
            MixerKind::Identity => 0,
            MixerKind::Dense => dim * dim,
            MixerKind::Diagonal => dim,
            MixerKind::LowRank { rank } => 2 * dim * rank,
            MixerKind::Conv1d { len, banks, .. } => len * banks,
            MixerKind::Conv2d { kh, kw, banks, .. } => kh * kw * banks,
        }
    }

    fn banks(&self) -> usize {
        match *self {
            MixerKind::Conv1d { banks, .. } | MixerKind::Conv2d { banks, .. } => banks,
            _ => 1,
        }
    }
}

/// A structured square operator of size `dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixer<T> {
    side: Side,
    dim: usize,
    kind: MixerKind,
    params: Vec<T>,
}

/// Tap offsets and destination/source pairs of a convolution along one axis
/// set, flattened so that gather and scatter share one loop.
struct ConvTaps {
    /// (tap index, dst, src) for every in-range pair.
    pairs: Vec<(usize, usize, usize)>,
}

impl<T: Scalar> Mixer<T> {
    pub fn new(side: Side, dim: usize, kind: MixerKind, params: Vec<T>) -> Result<Self> {
        if dim == 0 {
            return Err(PadreError::Config("mixer dim must be positive".into()));
        }
        match kind {
            MixerKind::LowRank { rank } => {
                if rank == 0 || rank > dim {
                    return Err(PadreError::Config(format!("low-rank mixer needs 1 <= rank <= dim, got rank {rank} for dim {dim}")));
                }
            }
            MixerKind::Conv1d { len, banks, padding } => {
                if len == 0 || banks == 0 {
                    return Err(PadreError::Config("conv1d needs a non-empty kernel".into()));
                }
                if padding == Padding::Circular && len > dim {
                    return Err(PadreError::Config(format!("circular conv1d kernel {len} longer than dim {dim}")));
                }
            }
            MixerKind::Conv2d {
                kh,
                kw,
                height,
                width,
                banks,
                padding,
            } => {
                if height * width != dim {
                    return Err(PadreError::Layout(format!("conv2d raster {height}x{width} does not cover dim {dim}")));
                }
                if kh == 0 || kw == 0 || banks == 0 {
                    return Err(PadreError::Config("conv2d needs a non-empty kernel".into()));
                }
                if padding == Padding::Circular && (kh > height || kw > width) {
                    return Err(PadreError::Config(format!(
                        "circular conv2d kernel {kh}x{kw} larger than raster {height}x{width}"
                    )));
                }
            }
            MixerKind::Identity | MixerKind::Dense | MixerKind::Diagonal => {}
        }
        let expected = kind.expected_params(dim);
        if params.len() != expected {
            return Err(shape_err(
                "Mixer::new",
                format!("{expected} params for {}", kind.name()),
                format!("{}", params.len()),
            ));
        }
        Ok(Self { side, dim, kind, params })
    }

    pub fn identity(side: Side, dim: usize) -> Self {
        Self::new(side, dim, MixerKind::Identity, Vec::new()).expect("identity mixer")
    }

    pub fn dense(side: Side, matrix: Tensor2<T>) -> Result<Self> {
        if matrix.rows() != matrix.cols() {
            return Err(shape_err("Mixer::dense", "square matrix", format!("{}x{}", matrix.rows(), matrix.cols())));
        }
        let dim = matrix.rows();
        Self::new(side, dim, MixerKind::Dense, matrix.into_data())
    }

    pub fn diagonal(side: Side, diag: Vec<T>) -> Result<Self> {
        Self::new(side, diag.len(), MixerKind::Diagonal, diag)
    }

    /// `left` is `dim x rank`, `right` is `rank x dim`.
    pub fn low_rank(side: Side, left: Tensor2<T>, right: Tensor2<T>) -> Result<Self> {
        let (dim, rank) = left.shape();
        if right.shape() != (rank, dim) {
            return Err(shape_err(
                "Mixer::low_rank",
                format!("right factor {rank}x{dim}"),
                format!("{}x{}", right.rows(), right.cols()),
            ));
        }
        let mut params = left.into_data();
        params.extend_from_slice(right.data());
        Self::new(side, dim, MixerKind::LowRank { rank }, params)
    }

    pub fn conv1d(side: Side, dim: usize, kernel: Vec<T>, padding: Padding) -> Result<Self> {
        let len = kernel.len();
        Self::new(side, dim, MixerKind::Conv1d { len, banks: 1, padding }, kernel)
    }

    /// One kernel of length `len` per lane; `kernels` is `banks x len`.
    pub fn conv1d_banked(side: Side, dim: usize, len: usize, kernels: Vec<T>, padding: Padding) -> Result<Self> {
        if len == 0 || kernels.len() % len != 0 {
            return Err(shape_err("Mixer::conv1d_banked", format!("multiple of {len} taps"), format!("{}", kernels.len())));
        }
        let banks = kernels.len() / len;
        Self::new(side, dim, MixerKind::Conv1d { len, banks, padding }, kernels)
    }

    pub fn conv2d(side: Side, height: usize, width: usize, kernel: Tensor2<T>, padding: Padding) -> Result<Self> {
        let (kh, kw) = kernel.shape();
        Self::new(
            side,
            height * width,
            MixerKind::Conv2d {
                kh,
                kw,
                height,
                width,
                banks: 1,
                padding,
            },
            kernel.into_data(),
        )
    }

    /// One `kh x kw` kernel per lane; `kernels` is `banks x kh x kw`.
    #[allow(clippy::too_many_arguments)]
    pub fn conv2d_banked(
        side: Side,
        height: usize,
        width: usize,
        kh: usize,
        kw: usize,
        kernels: Vec<T>,
        padding: Padding,
    ) -> Result<Self> {
        let taps = kh * kw;
        if taps == 0 || kernels.len() % taps != 0 {
            return Err(shape_err("Mixer::conv2d_banked", format!("multiple of {taps} taps"), format!("{}", kernels.len())));
        }
        Self::new(
            side,
            height * width,
            MixerKind::Conv2d {
                kh,
                kw,
                height,
                width,
                banks: kernels.len() / taps,
                padding,
            },
            kernels,
        )
    }

    /// Uniform init with half-width `sqrt(3 / fan_in)` (unit output variance).
    pub fn random<R: Rng + ?Sized>(side: Side, dim: usize, kind: MixerKind, rng: &mut R) -> Result<Self> {
        let uni = |n: usize, fan_in: usize, rng: &mut R| -> Vec<T> {
            let hw = (3.0 / fan_in.max(1) as f64).sqrt();
            (0..n).map(|_| T::from_f64_lossy(rng.gen_range(-hw..=hw))).collect()
        };
        let params = match kind {
            MixerKind::Identity => Vec::new(),
            MixerKind::Dense => uni(dim * dim, dim, rng),
            MixerKind::Diagonal => uni(dim, 1, rng),
            MixerKind::LowRank { rank } => {
                let mut p = uni(dim * rank, rank, rng);
                p.extend(uni(rank * dim, dim, rng));
                p
            }
            MixerKind::Conv1d { len, banks, .. } => uni(len * banks, len, rng),
            MixerKind::Conv2d { kh, kw, banks, .. } => uni(kh * kw * banks, kh * kw, rng),
        };
        Self::new(side, dim, kind, params)
    }

    #[inline]
    pub fn side(&self) -> Side {
        self.side
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn kind(&self) -> MixerKind {
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

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn is_identity(&self) -> bool {
        self.kind == MixerKind::Identity
    }

    fn lanes_of(&self, x: &Tensor2<T>) -> usize {
        match self.side {
            Side::Token => x.cols(),
            Side::Channel => x.rows(),
        }
    }

    fn check_input(&self, x: &Tensor2<T>, context: &'static str) -> Result<usize> {
        let along = match self.side {
            Side::Token => x.rows(),
            Side::Channel => x.cols(),
        };
        if along != self.dim {
            if let MixerKind::Conv2d { height, width, .. } = self.kind {
                return Err(PadreError::Layout(format!(
                    "conv2d raster {height}x{width} = {} does not match input extent {along}",
                    self.dim
                )));
            }
            return Err(shape_err(context, format!("extent {} on the {:?} side", self.dim, self.side), format!("{along}")));
        }
        let lanes = self.lanes_of(x);
        let banks = self.kind.banks();
        if banks != 1 && banks != lanes {
            return Err(shape_err(context, format!("{banks} lanes for per-lane kernels"), format!("{lanes}")));
        }
        Ok(lanes)
    }

    /// Structure-aware MAC count for one application on `lanes` lanes.
    pub fn macs(&self, lanes: usize) -> u64 {
        let lanes = lanes as u64;
        let dim = self.dim as u64;
        match self.kind {
            MixerKind::Identity => 0,
            MixerKind::Dense => dim * dim * lanes,
            MixerKind::Diagonal => dim * lanes,
            MixerKind::LowRank { rank } => 2 * dim * rank as u64 * lanes,
            MixerKind::Conv1d { .. } | MixerKind::Conv2d { .. } => self.conv_taps().pairs.len() as u64 * lanes,
        }
    }

    /// Returns `M * x` (token side) or `x * M` (channel side).
    pub fn apply(&self, x: &Tensor2<T>, ledger: &mut FlopLedger) -> Result<Tensor2<T>> {
        let lanes = self.check_input(x, "apply_mixer")?;
        ledger.add(self.side.category(), self.macs(lanes));
        Ok(self.apply_unchecked(x, false))
    }

    /// Returns `M^T * g` (token side) or `g * M^T` (channel side).
    pub fn apply_transpose(&self, g: &Tensor2<T>, ledger: &mut FlopLedger) -> Result<Tensor2<T>> {
        let lanes = self.check_input(g, "apply_mixer_transpose")?;
        ledger.add(self.side.category(), self.macs(lanes));
        Ok(self.apply_unchecked(g, true))
    }

    fn apply_unchecked(&self, x: &Tensor2<T>, transpose: bool) -> Tensor2<T> {
        let (rows, cols) = x.shape();
        let dim = self.dim;
        let p = &self.params;
        match (self.kind, self.side) {
            (MixerKind::Identity, _) => x.clone(),
            (MixerKind::Dense, Side::Token) => {
                let mut out = vec![T::zero(); rows * cols];
                if transpose {
                    mm_tn(p, x.data(), &mut out, dim, dim, cols);
                } else {
                    mm(p, x.data(), &mut out, dim, dim, cols);
                }
                Tensor2::from_vec(rows, cols, out).expect("shape")
            }
            (MixerKind::Dense, Side::Channel) => {
                let mut out = vec![T::zero(); rows * cols];
                if transpose {
                    mm_nt(x.data(), p, &mut out, rows, dim, dim);
                } else {
                    mm(x.data(), p, &mut out, rows, dim, dim);
                }
                Tensor2::from_vec(rows, cols, out).expect("shape")
            }
            (MixerKind::Diagonal, Side::Token) => Tensor2::from_fn(rows, cols, |i, j| p[i] * x.get(i, j)),
            (MixerKind::Diagonal, Side::Channel) => Tensor2::from_fn(rows, cols, |i, j| p[j] * x.get(i, j)),
            (MixerKind::LowRank { rank }, side) => {
                let (left, right) = p.split_at(dim * rank);
                let mut out = vec![T::zero(); rows * cols];
                match (side, transpose) {
                    (Side::Token, false) => {
                        let mut t = vec![T::zero(); rank * cols];
                        mm(right, x.data(), &mut t, rank, dim, cols);
                        mm(left, &t, &mut out, dim, rank, cols);
                    }
                    (Side::Token, true) => {
                        let mut t = vec![T::zero(); rank * cols];
                        mm_tn(left, x.data(), &mut t, rank, dim, cols);
                        mm_tn(right, &t, &mut out, dim, rank, cols);
                    }
                    (Side::Channel, false) => {
                        let mut t = vec![T::zero(); rows * rank];
                        mm(x.data(), left, &mut t, rows, dim, rank);
                        mm(&t, right, &mut out, rows, rank, dim);
                    }
                    (Side::Channel, true) => {
                        let mut t = vec![T::zero(); rows * rank];
                        mm_nt(x.data(), right, &mut t, rows, dim, rank);
                        mm_nt(&t, left, &mut out, rows, rank, dim);
                    }
                }
                Tensor2::from_vec(rows, cols, out).expect("shape")
            }
            (MixerKind::Conv1d { .. } | MixerKind::Conv2d { .. }, side) => self.conv_apply(x, side, transpose),
        }
    }

    fn conv_taps(&self) -> ConvTaps {
        let mut pairs = Vec::new();
        match self.kind {
            MixerKind::Conv1d { len, padding, .. } => {
                let c = (len as isize - 1) / 2;
                let n = self.dim as isize;
                for i in 0..n {
                    for j in 0..len as isize {
                        if let Some(src) = wrap(i + j - c, n, padding) {
                            pairs.push((j as usize, i as usize, src as usize));
                        }
                    }
                }
            }
            MixerKind::Conv2d {
                kh,
                kw,
                height,
                width,
                padding,
                ..
            } => {
                let ch = (kh as isize - 1) / 2;
                let cw = (kw as isize - 1) / 2;
                let (h, w) = (height as isize, width as isize);
                for r in 0..h {
                    for c in 0..w {
                        for a in 0..kh as isize {
                            let Some(sr) = wrap(r + a - ch, h, padding) else { continue };
                            for b in 0..kw as isize {
                                let Some(sc) = wrap(c + b - cw, w, padding) else { continue };
                                pairs.push(((a * kw as isize + b) as usize, (r * w + c) as usize, (sr * w + sc) as usize));
                            }
                        }
                    }
                }
            }
            _ => unreachable!("conv_taps on a non-convolution mixer"),
        }
        ConvTaps { pairs }
    }

    fn taps_per_bank(&self) -> usize {
        match self.kind {
            MixerKind::Conv1d { len, .. } => len,
            MixerKind::Conv2d { kh, kw, .. } => kh * kw,
            _ => 0,
        }
    }

    /// Gather `y[dst] += k[tap] * x[src]`; the transpose scatters `y[src] += k[tap] * x[dst]`.
    fn conv_apply(&self, x: &Tensor2<T>, side: Side, transpose: bool) -> Tensor2<T> {
        let (rows, cols) = x.shape();
        let taps = self.conv_taps();
        let per_bank = self.taps_per_bank();
        let banks = self.kind.banks();
        let k = &self.params;
        let mut out = Tensor2::zeros(rows, cols);
        match side {
            Side::Token => {
                // lanes are columns; vectorize across a row
                let tap_major: Vec<T> = if banks > 1 {
                    let mut t = vec![T::zero(); per_bank * banks];
                    for b in 0..banks {
                        for j in 0..per_bank {
                            t[j * banks + b] = k[b * per_bank + j];
                        }
                    }
                    t
                } else {
                    Vec::new()
                };
                let xd = x.data();
                let od = out.data_mut();
                for &(tap, dst, src) in &taps.pairs {
                    let (to, from) = if transpose { (src, dst) } else { (dst, src) };
                    let orow = &mut od[to * cols..(to + 1) * cols];
                    let xrow = &xd[from * cols..(from + 1) * cols];
                    if banks == 1 {
                        let kv = k[tap];
                        for (o, &v) in orow.iter_mut().zip(xrow) {
                            *o += kv * v;
                        }
                    } else {
                        let kr = &tap_major[tap * banks..(tap + 1) * banks];
                        for ((o, &v), &kv) in orow.iter_mut().zip(xrow).zip(kr) {
                            *o += kv * v;
                        }
                    }
                }
            }
            Side::Channel => {
                for r in 0..rows {
                    let bank = if banks == 1 { 0 } else { r };
                    let kb = &k[bank * per_bank..(bank + 1) * per_bank];
                    let xrow = x.row(r).to_vec();
                    let orow = out.row_mut(r);
                    for &(tap, dst, src) in &taps.pairs {
                        if transpose {
                            orow[src] += kb[tap] * xrow[dst];
                        } else {
                            orow[dst] += kb[tap] * xrow[src];
                        }
                    }
                }
            }
        }
        out
    }

    /// Gradient of `<g, apply(x)>` with respect to [`Mixer::params`].
    pub fn param_grad(&self, x: &Tensor2<T>, g: &Tensor2<T>) -> Result<Vec<T>> {
        self.check_input(x, "Mixer::param_grad")?;
        x.check_same_shape(g, "Mixer::param_grad")?;
        let (rows, cols) = x.shape();
        let dim = self.dim;
        let p = &self.params;
        let grad = match (self.kind, self.side) {
            (MixerKind::Identity, _) => Vec::new(),
            (MixerKind::Dense, Side::Token) => {
                let mut out = vec![T::zero(); dim * dim];
                mm_nt(g.data(), x.data(), &mut out, dim, cols, dim);
                out
            }
            (MixerKind::Dense, Side::Channel) => {
                let mut out = vec![T::zero(); dim * dim];
                mm_tn(x.data(), g.data(), &mut out, dim, rows, dim);
                out
            }
            (MixerKind::Diagonal, Side::Token) => (0..dim)
                .map(|i| x.row(i).iter().zip(g.row(i)).map(|(&a, &b)| a * b).sum())
                .collect(),
            (MixerKind::Diagonal, Side::Channel) => {
                let mut out = vec![T::zero(); dim];
                for r in 0..rows {
                    for (j, o) in out.iter_mut().enumerate() {
                        *o += x.get(r, j) * g.get(r, j);
                    }
                }
                out
            }
            (MixerKind::LowRank { rank }, Side::Token) => {
                let (left, right) = p.split_at(dim * rank);
                // Y = L T, T = R X
                let mut t = vec![T::zero(); rank * cols];
                mm(right, x.data(), &mut t, rank, dim, cols);
                let mut d_left = vec![T::zero(); dim * rank];
                mm_nt(g.data(), &t, &mut d_left, dim, cols, rank);
                let mut lg = vec![T::zero(); rank * cols];
                mm_tn(left, g.data(), &mut lg, rank, dim, cols);
                let mut d_right = vec![T::zero(); rank * dim];
                mm_nt(&lg, x.data(), &mut d_right, rank, cols, dim);
                d_left.extend(d_right);
                d_left
            }
            (MixerKind::LowRank { rank }, Side::Channel) => {
                let (left, right) = p.split_at(dim * rank);
                // Y = S R, S = X L
                let mut s = vec![T::zero(); rows * rank];
                mm(x.data(), left, &mut s, rows, dim, rank);
                let mut d_right = vec![T::zero(); rank * dim];
                mm_tn(&s, g.data(), &mut d_right, rank, rows, dim);
                let mut gr = vec![T::zero(); rows * rank];
                mm_nt(g.data(), right, &mut gr, rows, dim, rank);
                let mut d_left = vec![T::zero(); dim * rank];
                mm_tn(x.data(), &gr, &mut d_left, dim, rows, rank);
                d_left.extend(d_right);
                d_left
            }
            (MixerKind::Conv1d { .. } | MixerKind::Conv2d { .. }, side) => {
                let taps = self.conv_taps();
                let per_bank = self.taps_per_bank();
                let banks = self.kind.banks();
                let mut out = vec![T::zero(); per_bank * banks];
                match side {
                    Side::Token => {
                        for &(tap, dst, src) in &taps.pairs {
                            let grow = g.row(dst);
                            let xrow = x.row(src);
                            if banks == 1 {
                                out[tap] += grow.iter().zip(xrow).map(|(&a, &b)| a * b).sum::<T>();
                            } else {
                                for (b, (&gv, &xv)) in grow.iter().zip(xrow).enumerate() {
                                    out[b * per_bank + tap] += gv * xv;
                                }
                            }
                        }
                    }
                    Side::Channel => {
                        for r in 0..rows {
                            let bank = if banks == 1 { 0 } else { r };
                            let grow = g.row(r);
                            let xrow = x.row(r);
                            for &(tap, dst, src) in &taps.pairs {
                                out[bank * per_bank + tap] += grow[dst] * xrow[src];
                            }
                        }
                    }
                }
                out
            }
        };
        Ok(grad)
    }

    /// Materializes the implicit matrix `M` (oracle only, `dim <= cap`).
    pub fn as_dense(&self) -> Result<Tensor2<T>> {
        self.as_dense_with_cap(ORACLE_DIM_CAP)
    }

    pub fn as_dense_with_cap(&self, cap: usize) -> Result<Tensor2<T>> {
        if self.kind.banks() > 1 {
            return Err(PadreError::Config(
                "per-lane kernels have no single dense matrix; use as_dense_lane".into(),
            ));
        }
        self.as_dense_lane_with_cap(0, cap)
    }

    /// Dense matrix acting on lane `lane` (per-lane kernels pick their bank).
    pub fn as_dense_lane(&self, lane: usize) -> Result<Tensor2<T>> {
        self.as_dense_lane_with_cap(lane, ORACLE_DIM_CAP)
    }

    fn as_dense_lane_with_cap(&self, lane: usize, cap: usize) -> Result<Tensor2<T>> {
        if self.dim > cap {
            return Err(PadreError::OracleCap { dim: self.dim, cap });
        }
        let n = self.dim;
        let p = &self.params;
        let m = match self.kind {
            MixerKind::Identity => Tensor2::identity(n),
            MixerKind::Dense => Tensor2::from_vec(n, n, p.clone())?,
            MixerKind::Diagonal => Tensor2::from_fn(n, n, |i, j| if i == j { p[i] } else { T::zero() }),
            MixerKind::LowRank { rank } => {
                let left = Tensor2::from_vec(n, rank, p[..n * rank].to_vec())?;
                let right = Tensor2::from_vec(rank, n, p[n * rank..].to_vec())?;
                left.matmul(&right)?
            }
            MixerKind::Conv1d { .. } | MixerKind::Conv2d { .. } => {
                let per_bank = self.taps_per_bank();
                let bank = if self.kind.banks() == 1 { 0 } else { lane };
                let kb = &p[bank * per_bank..(bank + 1) * per_bank];
                let mut k = Tensor2::zeros(n, n);
                for (tap, dst, src) in self.conv_taps().pairs {
                    let v = k.get(dst, src) + kb[tap];
                    k.set(dst, src, v);
                }
                match self.side {
                    Side::Token => k,
                    Side::Channel => k.transpose(),
                }
            }
        };
        Ok(m)
    }
}

/// Applies `m` to `x`; free-function form of [`Mixer::apply`].
pub fn apply_mixer<T: Scalar>(m: &Mixer<T>, x: &Tensor2<T>, ledger: &mut FlopLedger) -> Result<Tensor2<T>> {
    m.apply(x, ledger)
}

pub fn mixer_as_dense<T: Scalar>(m: &Mixer<T>) -> Result<Tensor2<T>> {
    m.as_dense()
}

fn wrap(idx: isize, n: isize, padding: Padding) -> Option<isize> {
    if (0..n).contains(&idx) {
        Some(idx)
    } else {
        match padding {
            Padding::Zero => None,
            Padding::Circular => Some(idx.rem_euclid(n)),
        }
    }
}

/// `out += a (m x k) * b (k x n)`.
pub(crate) fn mm<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    crate::tensor::matmul_into(a, b, out, m, k, n);
}

/// `out += a^T * b` with `a` stored `k x m`, `b` stored `k x n`.
pub(crate) fn mm_tn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let a_pi = a[p * m + i];
            if a_pi == T::zero() {
                continue;
            }
            let o = &mut out[i * n..(i + 1) * n];
            for (ov, &bv) in o.iter_mut().zip(b_row) {
                *ov += a_pi * bv;
            }
        }
    }
}

/// `out += a * b^T` with `a` stored `m x k`, `b` stored `n x k`.
pub(crate) fn mm_nt<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            out[i * n + j] += a_row.iter().zip(b_row).map(|(&x, &y)| x * y).sum::<T>();
        }
    }
}
