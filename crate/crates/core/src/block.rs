//! The polynomial block: per-degree linear features `Y_i = A_i X B_i`, the
//! Hadamard cascade `Z_{i+1} = (C_i Z_i D_i) ⊙ Y_{i+1}`, a weighted combine
//! over the selected degrees plus bias, and an optional resize `O = U P V`.

use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeSet;
use std::hash::{Hash, Hasher};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PadreError, Result};
use crate::flops::{FlopCategory, FlopLedger};
use crate::mixer::{Mixer, MixerKind, Padding, Side};
use crate::rect::RectOp;
use crate::scalar::{lit, Scalar};
use crate::tensor::{ensure_finite, hadamard, Tensor2};

/// Stabilizer inside the per-row RMS normalization.
pub const RMS_EPS: f64 = 1e-6;

/// Token arrangement for the reference instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    Seq1d,
    Grid { height: usize, width: usize },
}

/// How combine weights are shared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WMode {
    /// One weight per token, channel and degree (`N x D x d`).
    Full,
    /// One weight per channel and degree, broadcast over tokens (`D x d`).
    #[default]
    ChannelBroadcast,
    /// One weight per degree (`d`).
    ScalarPerDegree,
}

impl WMode {
    pub fn code(self) -> u8 {
        match self {
            WMode::Full => 0,
            WMode::ChannelBroadcast => 1,
            WMode::ScalarPerDegree => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(WMode::Full),
            1 => Some(WMode::ChannelBroadcast),
            2 => Some(WMode::ScalarPerDegree),
            _ => None,
        }
    }

    pub fn len(self, n: usize, d: usize, degree: usize) -> usize {
        match self {
            WMode::Full => n * d * degree,
            WMode::ChannelBroadcast => d * degree,
            WMode::ScalarPerDegree => degree,
        }
    }
}

/// Combine weights `W`; degree index `i` is 0-based here.
#[derive(Debug, Clone, PartialEq)]
pub struct CombineWeights<T> {
    mode: WMode,
    degree: usize,
    values: Vec<T>,
}

impl<T: Scalar> CombineWeights<T> {
    /// `values` layout: Full `[(m * D + n) * d + i]`, ChannelBroadcast `[n * d + i]`,
    /// ScalarPerDegree `[i]`.
    pub fn new(mode: WMode, n: usize, d: usize, degree: usize, values: Vec<T>) -> Result<Self> {
        let expected = mode.len(n, d, degree);
        if values.len() != expected {
            return Err(crate::error::shape_err(
                "CombineWeights::new",
                format!("{expected} weights for {mode:?}"),
                format!("{}", values.len()),
            ));
        }
        Ok(Self { mode, degree, values })
    }

    pub fn ones(mode: WMode, n: usize, d: usize, degree: usize) -> Self {
        Self {
            mode,
            degree,
            values: vec![T::one(); mode.len(n, d, degree)],
        }
    }

    pub fn mode(&self) -> WMode {
        self.mode
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    #[inline]
    fn index(&self, m: usize, n: usize, cols: usize, i: usize) -> usize {
        match self.mode {
            WMode::Full => (m * cols + n) * self.degree + i,
            WMode::ChannelBroadcast => n * self.degree + i,
            WMode::ScalarPerDegree => i,
        }
    }

    #[inline]
    pub fn get(&self, m: usize, n: usize, cols: usize, i: usize) -> T {
        self.values[self.index(m, n, cols, i)]
    }

    /// Zeroes every weight of degree `i` (1-based).
    pub fn zero_degree(&mut self, i: usize) {
        let degree = self.degree;
        for (k, v) in self.values.iter_mut().enumerate() {
            if k % degree == i - 1 {
                *v = T::zero();
            }
        }
    }
}

/// Parameters and options of one polynomial block.
#[derive(Debug, Clone, PartialEq)]
pub struct PadreBlock<T> {
    degree: usize,
    n: usize,
    d: usize,
    a: Vec<Mixer<T>>,
    b: Vec<Mixer<T>>,
    c: Vec<Mixer<T>>,
    dm: Vec<Mixer<T>>,
    w: CombineWeights<T>,
    bias: Option<Tensor2<T>>,
    u: Option<RectOp<T>>,
    v: Option<RectOp<T>>,
    normalize_y: bool,
    mask: BTreeSet<usize>,
}

/// Intermediates retained by [`PadreBlock::forward`].
#[derive(Debug, Clone)]
pub struct PadreTrace<T> {
    pub(crate) fingerprint: u64,
    pub x: Tensor2<T>,
    /// `A_i X` for each degree.
    pub ax: Vec<Tensor2<T>>,
    /// `A_i X B_i` before normalization.
    pub y_raw: Vec<Tensor2<T>>,
    /// The `Y_i` entering the cascade (normalized when enabled).
    pub y: Vec<Tensor2<T>>,
    pub z: Vec<Tensor2<T>>,
    /// `C_i Z_i` for `i < d`.
    pub cz: Vec<Tensor2<T>>,
    /// `C_i Z_i D_i` for `i < d`.
    pub mixed: Vec<Tensor2<T>>,
    pub p: Tensor2<T>,
    /// `U P` when `U` is set.
    pub up: Option<Tensor2<T>>,
    pub o: Tensor2<T>,
}

/// Builder with identity mixers, unit `ChannelBroadcast` weights and the full mask.
#[derive(Debug, Clone)]
pub struct PadreBlockBuilder<T> {
    block: PadreBlock<T>,
}

impl<T: Scalar> PadreBlockBuilder<T> {
    pub fn a(mut self, i: usize, m: Mixer<T>) -> Self {
        self.block.a[i - 1] = m;
        self
    }

    pub fn b(mut self, i: usize, m: Mixer<T>) -> Self {
        self.block.b[i - 1] = m;
        self
    }

    pub fn c(mut self, i: usize, m: Mixer<T>) -> Self {
        self.block.c[i - 1] = m;
        self
    }

    pub fn d(mut self, i: usize, m: Mixer<T>) -> Self {
        self.block.dm[i - 1] = m;
        self
    }

    pub fn weights(mut self, w: CombineWeights<T>) -> Self {
        self.block.w = w;
        self
    }

    pub fn bias(mut self, l: Option<Tensor2<T>>) -> Self {
        self.block.bias = l;
        self
    }

    pub fn resize(mut self, u: Option<RectOp<T>>, v: Option<RectOp<T>>) -> Self {
        self.block.u = u;
        self.block.v = v;
        self
    }

    pub fn normalize_y(mut self, on: bool) -> Self {
        self.block.normalize_y = on;
        self
    }

    pub fn degree_mask(mut self, mask: impl IntoIterator<Item = usize>) -> Self {
        self.block.mask = mask.into_iter().collect();
        self
    }

    pub fn build(self) -> Result<PadreBlock<T>> {
        self.block.validate()?;
        Ok(self.block)
    }
}

impl<T: Scalar> PadreBlock<T> {
    pub fn builder(n: usize, d: usize, degree: usize) -> PadreBlockBuilder<T> {
        let degree_ = degree.max(1);
        let block = PadreBlock {
            degree,
            n,
            d,
            a: (0..degree_).map(|_| Mixer::identity(Side::Token, n.max(1))).collect(),
            b: (0..degree_).map(|_| Mixer::identity(Side::Channel, d.max(1))).collect(),
            c: (1..degree_).map(|_| Mixer::identity(Side::Token, n.max(1))).collect(),
            dm: (1..degree_).map(|_| Mixer::identity(Side::Channel, d.max(1))).collect(),
            w: CombineWeights::ones(WMode::ChannelBroadcast, n, d, degree_),
            bias: None,
            u: None,
            v: None,
            normalize_y: false,
            mask: (1..=degree).collect(),
        };
        PadreBlockBuilder { block }
    }

    fn validate(&self) -> Result<()> {
        if self.degree == 0 {
            return Err(PadreError::Config("degree must be at least 1".into()));
        }
        if self.n == 0 || self.d == 0 {
            return Err(PadreError::Config("block dims must be positive".into()));
        }
        let check = |m: &Mixer<T>, side: Side, dim: usize, name: &str, i: usize| -> Result<()> {
            if m.side() != side || m.dim() != dim {
                return Err(PadreError::Config(format!(
                    "{name}{i} must act on the {side:?} side with dim {dim}, got {:?} dim {}",
                    m.side(),
                    m.dim()
                )));
            }
            Ok(())
        };
        for (i, m) in self.a.iter().enumerate() {
            check(m, Side::Token, self.n, "A", i + 1)?;
        }
        for (i, m) in self.b.iter().enumerate() {
            check(m, Side::Channel, self.d, "B", i + 1)?;
        }
        for (i, m) in self.c.iter().enumerate() {
            check(m, Side::Token, self.n, "C", i + 1)?;
        }
        for (i, m) in self.dm.iter().enumerate() {
            check(m, Side::Channel, self.d, "D", i + 1)?;
        }
        if self.w.degree != self.degree || self.w.values.len() != self.w.mode.len(self.n, self.d, self.degree) {
            return Err(PadreError::Config(format!(
                "combine weights sized for degree {} do not fit block N={}, D={}, d={}",
                self.w.degree, self.n, self.d, self.degree
            )));
        }
        if self.mask.is_empty() {
            return Err(PadreError::Config(format!("degree mask is empty for degree {}", self.degree)));
        }
        if let Some(&bad) = self.mask.iter().find(|&&i| i == 0 || i > self.degree) {
            return Err(PadreError::Config(format!("degree mask entry {bad} outside 1..={}", self.degree)));
        }
        if let Some(l) = &self.bias {
            if l.shape() != (self.n, self.d) {
                return Err(PadreError::Config(format!(
                    "bias must be {}x{}, got {}x{}",
                    self.n,
                    self.d,
                    l.rows(),
                    l.cols()
                )));
            }
        }
        if let Some(u) = &self.u {
            if u.cols() != self.n {
                return Err(PadreError::Config(format!("U must have {} columns, got {}", self.n, u.cols())));
            }
        }
        if let Some(v) = &self.v {
            if v.rows() != self.d {
                return Err(PadreError::Config(format!("V must have {} rows, got {}", self.d, v.rows())));
            }
        }
        Ok(())
    }

    /// Block with every mixer, weight and (optionally) the bias drawn from the
    /// default uniform init.
    pub fn random<R: Rng + ?Sized>(
        n: usize,
        d: usize,
        degree: usize,
        token_kind: MixerKind,
        channel_kind: MixerKind,
        w_mode: WMode,
        rng: &mut R,
    ) -> Result<Self> {
        let mut builder = Self::builder(n, d, degree);
        for i in 1..=degree {
            builder = builder
                .a(i, Mixer::random(Side::Token, n, token_kind, rng)?)
                .b(i, Mixer::random(Side::Channel, d, channel_kind, rng)?);
        }
        for i in 1..degree {
            builder = builder
                .c(i, Mixer::random(Side::Token, n, token_kind, rng)?)
                .d(i, Mixer::random(Side::Channel, d, channel_kind, rng)?);
        }
        builder.weights(random_weights(w_mode, n, d, degree, rng)).build()
    }

    pub fn with_normalize_y(mut self, on: bool) -> Self {
        self.normalize_y = on;
        self
    }

    pub fn with_degree_mask(mut self, mask: impl IntoIterator<Item = usize>) -> Result<Self> {
        self.mask = mask.into_iter().collect();
        self.validate()?;
        Ok(self)
    }

    pub fn with_bias(mut self, l: Option<Tensor2<T>>) -> Result<Self> {
        self.bias = l;
        self.validate()?;
        Ok(self)
    }

    pub fn with_weights(mut self, w: CombineWeights<T>) -> Result<Self> {
        self.w = w;
        self.validate()?;
        Ok(self)
    }

    pub fn with_resize(mut self, u: Option<RectOp<T>>, v: Option<RectOp<T>>) -> Result<Self> {
        self.u = u;
        self.v = v;
        self.validate()?;
        Ok(self)
    }

    #[inline]
    pub fn degree(&self) -> usize {
        self.degree
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn d(&self) -> usize {
        self.d
    }

    pub fn a(&self) -> &[Mixer<T>] {
        &self.a
    }

    pub fn b(&self) -> &[Mixer<T>] {
        &self.b
    }

    pub fn c(&self) -> &[Mixer<T>] {
        &self.c
    }

    pub fn dm(&self) -> &[Mixer<T>] {
        &self.dm
    }

    pub fn weights(&self) -> &CombineWeights<T> {
        &self.w
    }

    pub fn weights_mut(&mut self) -> &mut CombineWeights<T> {
        &mut self.w
    }

    pub fn bias(&self) -> Option<&Tensor2<T>> {
        self.bias.as_ref()
    }

    pub fn u(&self) -> Option<&RectOp<T>> {
        self.u.as_ref()
    }

    pub fn v(&self) -> Option<&RectOp<T>> {
        self.v.as_ref()
    }

    pub fn normalizes_y(&self) -> bool {
        self.normalize_y
    }

    pub fn degree_mask(&self) -> &BTreeSet<usize> {
        &self.mask
    }

    pub fn output_shape(&self) -> (usize, usize) {
        (
            self.u.as_ref().map_or(self.n, |u| u.rows()),
            self.v.as_ref().map_or(self.d, |v| v.cols()),
        )
    }

    /// Named flat parameter groups in a fixed order: `A1.., B1.., C1.., D1.., W, L, U, V`.
    pub fn param_groups(&self) -> Vec<(String, &[T])> {
        let mut out: Vec<(String, &[T])> = Vec::new();
        for (i, m) in self.a.iter().enumerate() {
            out.push((format!("A{}", i + 1), m.params()));
        }
        for (i, m) in self.b.iter().enumerate() {
            out.push((format!("B{}", i + 1), m.params()));
        }
        for (i, m) in self.c.iter().enumerate() {
            out.push((format!("C{}", i + 1), m.params()));
        }
        for (i, m) in self.dm.iter().enumerate() {
            out.push((format!("D{}", i + 1), m.params()));
        }
        out.push(("W".into(), self.w.values()));
        if let Some(l) = &self.bias {
            out.push(("L".into(), l.data()));
        }
        if let Some(u) = &self.u {
            out.push(("U".into(), u.params()));
        }
        if let Some(v) = &self.v {
            out.push(("V".into(), v.params()));
        }
        out
    }

    /// Mutable view matching [`PadreBlock::param_groups`].
    pub fn param_groups_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::new();
        for m in self.a.iter_mut().chain(self.b.iter_mut()).chain(self.c.iter_mut()).chain(self.dm.iter_mut()) {
            out.push(m.params_mut());
        }
        out.push(self.w.values_mut());
        if let Some(l) = &mut self.bias {
            out.push(l.data_mut());
        }
        if let Some(u) = &mut self.u {
            out.push(u.params_mut());
        }
        if let Some(v) = &mut self.v {
            out.push(v.params_mut());
        }
        out
    }

    /// Exact parameter total over all mixers, `W`, `L`, `U` and `V`.
    pub fn param_count(&self) -> usize {
        self.param_groups().iter().map(|(_, p)| p.len()).sum()
    }

    pub(crate) fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        (self.degree, self.n, self.d, self.normalize_y).hash(&mut h);
        self.mask.hash(&mut h);
        for (name, p) in self.param_groups() {
            name.hash(&mut h);
            for v in p {
                v.to_f64_lossy().to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    /// Evaluates the block and keeps every intermediate for backprop.
    pub fn forward(&self, x: &Tensor2<T>, ledger: &mut FlopLedger) -> Result<(Tensor2<T>, PadreTrace<T>)> {
        if x.shape() != (self.n, self.d) {
            return Err(crate::error::shape_err(
                "PadreBlock::forward",
                format!("{}x{}", self.n, self.d),
                format!("{}x{}", x.rows(), x.cols()),
            ));
        }
        let mut ax = Vec::with_capacity(self.degree);
        let mut y_raw = Vec::with_capacity(self.degree);
        let mut y = Vec::with_capacity(self.degree);
        for i in 0..self.degree {
            let t = self.a[i].apply(x, ledger)?;
            let yi = self.b[i].apply(&t, ledger)?;
            ensure_finite(&yi, format!("Y{}", i + 1))?;
            ax.push(t);
            if self.normalize_y {
                y.push(normalize_rows(&yi, ledger));
            } else {
                y.push(yi.clone());
            }
            y_raw.push(yi);
        }
        let mut z = Vec::with_capacity(self.degree);
        let mut cz = Vec::with_capacity(self.degree.saturating_sub(1));
        let mut mixed = Vec::with_capacity(self.degree.saturating_sub(1));
        z.push(y[0].clone());
        for i in 1..self.degree {
            let c = self.c[i - 1].apply(&z[i - 1], ledger)?;
            let m = self.dm[i - 1].apply(&c, ledger)?;
            let zi = hadamard(&m, &y[i], ledger)?;
            ensure_finite(&zi, format!("Z{}", i + 1))?;
            cz.push(c);
            mixed.push(m);
            z.push(zi);
        }
        let p = self.combine(&z, ledger);
        ensure_finite(&p, "P")?;
        let up = match &self.u {
            Some(u) => Some(u.apply_left(&p, FlopCategory::Resize, ledger)?),
            None => None,
        };
        let pre_v = up.as_ref().unwrap_or(&p);
        let o = match &self.v {
            Some(v) => v.apply_right(pre_v, FlopCategory::Resize, ledger)?,
            None => pre_v.clone(),
        };
        ensure_finite(&o, "O")?;
        let trace = PadreTrace {
            fingerprint: self.fingerprint(),
            x: x.clone(),
            ax,
            y_raw,
            y,
            z,
            cz,
            mixed,
            p,
            up,
            o: o.clone(),
        };
        Ok((o, trace))
    }

    /// Forward pass without retaining intermediates.
    pub fn eval(&self, x: &Tensor2<T>, ledger: &mut FlopLedger) -> Result<Tensor2<T>> {
        Ok(self.forward(x, ledger)?.0)
    }

    /// `P = Σ_{i ∈ mask} W_i ⊙ Z_i + L`.
    pub(crate) fn combine(&self, z: &[Tensor2<T>], ledger: &mut FlopLedger) -> Tensor2<T> {
        let (n, d) = (self.n, self.d);
        let mut p = match &self.bias {
            Some(l) => l.clone(),
            None => Tensor2::zeros(n, d),
        };
        for &i in &self.mask {
            let zi = &z[i - 1];
            for m in 0..n {
                let zrow = zi.row(m);
                let prow = p.row_mut(m);
                for k in 0..d {
                    prow[k] += self.w.get(m, k, d, i - 1) * zrow[k];
                }
            }
        }
        let terms = self.mask.len() as u64 + u64::from(self.bias.is_some());
        ledger.add(FlopCategory::Combine, terms * (n * d) as u64);
        p
    }
}

/// Per-row RMS normalization: `y / sqrt(mean(y^2) + 1e-6)`.
pub fn normalize_y<T: Scalar>(y: &Tensor2<T>) -> Tensor2<T> {
    normalize_rows(y, &mut FlopLedger::new())
}

pub(crate) fn normalize_rows<T: Scalar>(y: &Tensor2<T>, ledger: &mut FlopLedger) -> Tensor2<T> {
    let (rows, cols) = y.shape();
    let mut out = y.clone();
    for r in 0..rows {
        let s = row_rms(y.row(r));
        for v in out.row_mut(r) {
            *v /= s;
        }
    }
    ledger.add(FlopCategory::Normalize, (2 * rows * cols + rows) as u64);
    out
}

fn row_rms<T: Scalar>(row: &[T]) -> T {
    let ms = row.iter().map(|&v| v * v).sum::<T>() / lit::<T>(row.len() as f64);
    (ms + lit(RMS_EPS)).sqrt()
}

/// Vector-Jacobian product of [`normalize_y`] at `y` applied to `g`.
pub(crate) fn normalize_rows_backward<T: Scalar>(y: &Tensor2<T>, g: &Tensor2<T>) -> Tensor2<T> {
    let (rows, cols) = y.shape();
    let mut out = Tensor2::zeros(rows, cols);
    let n = lit::<T>(cols as f64);
    for r in 0..rows {
        let yr = y.row(r);
        let gr = g.row(r);
        let s = row_rms(yr);
        let gy: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        let k = gy / (n * s * s * s);
        for ((o, &yv), &gv) in out.row_mut(r).iter_mut().zip(yr).zip(gr) {
            *o = gv / s - yv * k;
        }
    }
    out
}

/// Uniform weights with half-width `sqrt(3)` (fan-in 1).
pub fn random_weights<T: Scalar, R: Rng + ?Sized>(mode: WMode, n: usize, d: usize, degree: usize, rng: &mut R) -> CombineWeights<T> {
    let hw = 3f64.sqrt();
    let values = (0..mode.len(n, d, degree)).map(|_| lit(rng.gen_range(-hw..=hw))).collect();
    CombineWeights { mode, degree, values }
}

/// Token convolutions of size 11 (clipped to the extent), dense channel
/// mixers, no degree-1 term, no bias, channel-broadcast weights.
pub fn build_reference_instance<T: Scalar, R: Rng + ?Sized>(
    n: usize,
    d: usize,
    degree: usize,
    layout: Layout,
    rng: &mut R,
) -> Result<PadreBlock<T>> {
    if degree < 2 {
        return Err(PadreError::Config(format!("degree mask {{2..{degree}}} is empty")));
    }
    let token_kind = token_conv_kind(n, layout)?;
    let mut block = PadreBlock::random(n, d, degree, token_kind, MixerKind::Dense, WMode::ChannelBroadcast, rng)?;
    block.mask = (2..=degree).collect();
    Ok(block)
}

/// Shared 11-tap (or 11x11) zero-padded token convolution, clipped to the extent.
pub fn token_conv_kind(n: usize, layout: Layout) -> Result<MixerKind> {
    Ok(match layout {
        Layout::Seq1d => MixerKind::Conv1d {
            len: 11.min(n),
            banks: 1,
            padding: Padding::Zero,
        },
        Layout::Grid { height, width } => {
            if height * width != n {
                return Err(PadreError::Layout(format!("grid {height}x{width} does not hold {n} tokens")));
            }
            MixerKind::Conv2d {
                kh: 11.min(height),
                kw: 11.min(width),
                height,
                width,
                banks: 1,
                padding: Padding::Zero,
            }
        }
    })
}

/// Square token counts use a square grid, everything else a sequence.
pub fn default_layout(n: usize) -> Layout {
    let side = (n as f64).sqrt().round() as usize;
    if side * side == n && side > 1 {
        Layout::Grid { height: side, width: side }
    } else {
        Layout::Seq1d
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_block(mask: &[usize]) -> PadreBlock<f64> {
        PadreBlock::builder(1, 1, 2)
            .weights(CombineWeights::new(WMode::ScalarPerDegree, 1, 1, 2, vec![1.0, 1.0]).unwrap())
            .degree_mask(mask.iter().copied())
            .build()
            .unwrap()
    }

    #[test]
    fn scalar_block_is_x_plus_x_squared() {
        let block = scalar_block(&[1, 2]);
        let x = Tensor2::filled(1, 1, 3.0);
        let (o, trace) = block.forward(&x, &mut FlopLedger::new()).unwrap();
        // direct symbolic evaluation of w1 x + w2 x^2
        let expect = 1.0 * 3.0 + 1.0 * 3.0 * 3.0;
        assert_eq!(o.get(0, 0), expect);
        assert_eq!(expect, 12.0);
        assert_eq!(trace.z[0], trace.y[0]);
    }

    #[test]
    fn zero_input_returns_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let l = Tensor2::<f64>::random_uniform(4, 3, 1.0, &mut rng);
        let mut block = PadreBlock::random(4, 3, 3, MixerKind::Dense, MixerKind::Dense, WMode::Full, &mut rng).unwrap();
        block.bias = Some(l.clone());
        let o = block.eval(&Tensor2::zeros(4, 3), &mut FlopLedger::new()).unwrap();
        assert_eq!(o, l);
    }

    #[test]
    fn degree_one_identity_configuration() {
        let block = PadreBlock::builder(3, 2, 1)
            .weights(CombineWeights::ones(WMode::ScalarPerDegree, 3, 2, 1))
            .build()
            .unwrap();
        let x = Tensor2::from_fn(3, 2, |i, j| i as f64 - j as f64 * 0.5);
        assert_eq!(block.eval(&x, &mut FlopLedger::new()).unwrap(), x);
    }

    #[test]
    fn reference_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = build_reference_instance::<f64, _>(64, 8, 2, Layout::Grid { height: 8, width: 8 }, &mut rng).unwrap();
        assert_eq!(b.a().len(), 2);
        assert!(b.a().iter().all(|m| matches!(m.kind(), MixerKind::Conv2d { kh: 8, kw: 8, .. })));
        assert!(b.b().iter().all(|m| m.kind() == MixerKind::Dense));
        assert_eq!((b.c().len(), b.dm().len()), (1, 1));
        assert_eq!(b.degree_mask().iter().copied().collect::<Vec<_>>(), vec![2]);
        assert!(b.bias().is_none());
        assert_eq!(b.weights().mode(), WMode::ChannelBroadcast);

        let b = build_reference_instance::<f64, _>(16, 4, 3, Layout::Seq1d, &mut rng).unwrap();
        assert!(b.a().iter().all(|m| matches!(m.kind(), MixerKind::Conv1d { len: 11, .. })));
        assert_eq!(b.a().len(), 3);
        assert_eq!(b.c().len(), 2);
        assert_eq!(b.degree_mask().iter().copied().collect::<Vec<_>>(), vec![2, 3]);

        let err = build_reference_instance::<f64, _>(6, 2, 1, Layout::Seq1d, &mut rng);
        assert!(matches!(err, Err(PadreError::Config(_))));
        let err = build_reference_instance::<f64, _>(10, 2, 2, Layout::Grid { height: 3, width: 3 }, &mut rng);
        assert!(matches!(err, Err(PadreError::Layout(_))));
    }

    #[test]
    fn normalize_examples() {
        let y = Tensor2::from_rows(&[&[3.0, 4.0], &[0.0, 0.0], &[1.0, -1.0]]).unwrap();
        let out = normalize_y(&y);
        let s = (12.5f64 + 1e-6).sqrt();
        assert_eq!(out.row(0), &[3.0 / s, 4.0 / s]);
        assert_eq!(out.row(1), &[0.0, 0.0]);
        assert!((out.get(2, 0) - 1.0).abs() < 1e-6 && (out.get(2, 1) + 1.0).abs() < 1e-6);
    }

    #[test]
    fn param_count_examples() {
        let block = PadreBlock::<f64>::builder(4, 3, 2)
            .weights(CombineWeights::ones(WMode::Full, 4, 3, 2))
            .build()
            .unwrap();
        assert_eq!(block.param_count(), 24);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dense_a = |n: usize, rng: &mut ChaCha8Rng| {
            PadreBlock::<f64>::builder(n, 2, 1)
                .a(1, Mixer::random(Side::Token, n, MixerKind::Dense, rng).unwrap())
                .build()
                .unwrap()
                .a()[0]
                .param_count()
        };
        assert_eq!(dense_a(16, &mut rng), 4 * dense_a(8, &mut rng));

        let conv = |n: usize, rng: &mut ChaCha8Rng| {
            PadreBlock::<f64>::random(
                n,
                4,
                2,
                MixerKind::Diagonal,
                MixerKind::Diagonal,
                WMode::ChannelBroadcast,
                rng,
            )
            .unwrap()
            .param_count()
        };
        // token diagonals contribute 3 * N parameters; everything else is N-free
        assert_eq!(conv(32, &mut rng) - conv(16, &mut rng), 3 * 16);
    }

    #[test]
    fn forward_is_deterministic_and_flags_nonfinite() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let block = build_reference_instance::<f64, _>(16, 3, 3, Layout::Seq1d, &mut rng).unwrap();
        let x = Tensor2::random_uniform(16, 3, 1.0, &mut rng);
        let a = block.eval(&x, &mut FlopLedger::new()).unwrap();
        let b = block.eval(&x, &mut FlopLedger::new()).unwrap();
        assert_eq!(a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());

        let mut bad = x.clone();
        bad.set(0, 0, f64::NAN);
        let err = block.eval(&bad, &mut FlopLedger::new()).unwrap_err();
        assert_eq!(err, PadreError::NonFinite { stage: "Y1".into() });
    }

    #[test]
    fn reference_flops_scale_linearly() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut prev = None;
        for n in [256usize, 512, 1024, 2048] {
            let block = build_reference_instance::<f64, _>(n, 8, 3, Layout::Seq1d, &mut rng).unwrap();
            let mut ledger = FlopLedger::new();
            block.eval(&Tensor2::ones(n, 8), &mut ledger).unwrap();
            if let Some(p) = prev {
                let r = ledger.flops() as f64 / p as f64;
                assert!((1.8..=2.2).contains(&r), "ratio {r}");
            }
            prev = Some(ledger.flops());
        }
    }
}
