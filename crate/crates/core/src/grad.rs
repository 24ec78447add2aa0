//! Hand-derived reverse-mode gradients of the block and a central-difference
//! checker.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;

use crate::block::{normalize_rows_backward, PadreBlock, PadreTrace, WMode};
use crate::error::{PadreError, Result};
use crate::flops::{FlopCategory, FlopLedger};
use crate::scalar::Scalar;
use crate::tensor::Tensor2;

/// Gradients of `<upstream, output>` with respect to the input and each
/// parameter group, in the order of [`PadreBlock::param_groups`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradBundle<T> {
    pub d_x: Tensor2<T>,
    pub groups: Vec<(String, Vec<T>)>,
}

impl<T: Scalar> GradBundle<T> {
    pub fn group(&self, name: &str) -> Option<&[T]> {
        self.groups.iter().find(|(n, _)| n == name).map(|(_, g)| g.as_slice())
    }

    pub fn d_w(&self) -> &[T] {
        self.group("W").unwrap_or(&[])
    }

    pub fn d_l(&self) -> Option<&[T]> {
        self.group("L")
    }

    pub fn d_u(&self) -> Option<&[T]> {
        self.group("U")
    }

    pub fn d_v(&self) -> Option<&[T]> {
        self.group("V")
    }

    pub fn is_finite(&self) -> bool {
        self.d_x.is_finite() && self.groups.iter().all(|(_, g)| g.iter().all(|v| v.is_finite()))
    }
}

/// Vector-Jacobian product through the whole block.
pub fn backward<T: Scalar>(block: &PadreBlock<T>, trace: &PadreTrace<T>, upstream: &Tensor2<T>) -> Result<GradBundle<T>> {
    if trace.fingerprint != block.fingerprint() || trace.z.len() != block.degree() {
        return Err(PadreError::StaleTrace);
    }
    if upstream.shape() != trace.o.shape() {
        return Err(crate::error::shape_err(
            "backward",
            format!("upstream {}x{}", trace.o.rows(), trace.o.cols()),
            format!("{}x{}", upstream.rows(), upstream.cols()),
        ));
    }
    let (d_p, d_u, d_v) = resize_backward(block, trace, upstream)?;
    let (d_z, d_w) = combine_backward(block, &trace.z, &d_p);
    let d_l = block.bias().map(|_| d_p.data().to_vec());
    let mut bundle = cascade_backward(block, trace, d_z)?;
    bundle.groups.push(("W".into(), d_w));
    if let Some(l) = d_l {
        bundle.groups.push(("L".into(), l));
    }
    if let Some(u) = d_u {
        bundle.groups.push(("U".into(), u));
    }
    if let Some(v) = d_v {
        bundle.groups.push(("V".into(), v));
    }
    Ok(bundle)
}

type ResizeGrads<T> = (Tensor2<T>, Option<Vec<T>>, Option<Vec<T>>);

fn resize_backward<T: Scalar>(block: &PadreBlock<T>, trace: &PadreTrace<T>, g: &Tensor2<T>) -> Result<ResizeGrads<T>> {
    let mut ledger = FlopLedger::new();
    let cat = FlopCategory::Resize;
    let pre_v = trace.up.as_ref().unwrap_or(&trace.p);
    let (g_pre_v, d_v) = match block.v() {
        Some(v) => (v.apply_right_t(g, cat, &mut ledger)?, Some(v.grad_right(pre_v, g))),
        None => (g.clone(), None),
    };
    let (g_p, d_u) = match block.u() {
        Some(u) => (u.apply_left_t(&g_pre_v, cat, &mut ledger)?, Some(u.grad_left(&trace.p, &g_pre_v))),
        None => (g_pre_v, None),
    };
    Ok((g_p, d_u, d_v))
}

/// Returns per-degree `dZ_i` and the flat `dW`.
pub(crate) fn combine_backward<T: Scalar>(block: &PadreBlock<T>, z: &[Tensor2<T>], g_p: &Tensor2<T>) -> (Vec<Tensor2<T>>, Vec<T>) {
    let (n, d, degree) = (block.n(), block.d(), block.degree());
    let w = block.weights();
    let mut d_w = vec![T::zero(); w.values().len()];
    let mut d_z: Vec<Tensor2<T>> = (0..degree).map(|_| Tensor2::zeros(n, d)).collect();
    for &i in block.degree_mask() {
        let zi = &z[i - 1];
        for m in 0..n {
            for k in 0..d {
                let g = g_p.get(m, k);
                d_z[i - 1].set(m, k, w.get(m, k, d, i - 1) * g);
                let idx = match w.mode() {
                    WMode::Full => (m * d + k) * degree + i - 1,
                    WMode::ChannelBroadcast => k * degree + i - 1,
                    WMode::ScalarPerDegree => i - 1,
                };
                d_w[idx] += g * zi.get(m, k);
            }
        }
    }
    (d_z, d_w)
}

/// Backprop from `dZ_i` through the cascade and the per-degree mixers.
/// Returns `d_x` and the mixer groups `A.., B.., C.., D..`.
pub(crate) fn cascade_backward<T: Scalar>(
    block: &PadreBlock<T>,
    trace: &PadreTrace<T>,
    mut d_z: Vec<Tensor2<T>>,
) -> Result<GradBundle<T>> {
    let degree = block.degree();
    let mut ledger = FlopLedger::new();
    let mut d_y: Vec<Tensor2<T>> = trace.y.iter().map(|y| Tensor2::zeros(y.rows(), y.cols())).collect();
    let mut d_c = vec![Vec::new(); degree.saturating_sub(1)];
    let mut d_d = vec![Vec::new(); degree.saturating_sub(1)];
    for i in (1..degree).rev() {
        // Z_{i+1} = M_i ⊙ Y_{i+1}, M_i = D_i (C_i Z_i)
        let gz = &d_z[i];
        d_y[i].add_assign(&gz.zip_with(&trace.mixed[i - 1], "backward", |a, b| a * b)?)?;
        let g_m = gz.zip_with(&trace.y[i], "backward", |a, b| a * b)?;
        let dm = &block.dm()[i - 1];
        d_d[i - 1] = dm.param_grad(&trace.cz[i - 1], &g_m)?;
        let g_cz = dm.apply_transpose(&g_m, &mut ledger)?;
        let cm = &block.c()[i - 1];
        d_c[i - 1] = cm.param_grad(&trace.z[i - 1], &g_cz)?;
        let back = cm.apply_transpose(&g_cz, &mut ledger)?;
        d_z[i - 1].add_assign(&back)?;
    }
    d_y[0].add_assign(&d_z[0])?;

    let mut d_x = Tensor2::zeros(trace.x.rows(), trace.x.cols());
    let mut d_a = Vec::with_capacity(degree);
    let mut d_b = Vec::with_capacity(degree);
    for i in 0..degree {
        let g_raw = if block.normalizes_y() {
            normalize_rows_backward(&trace.y_raw[i], &d_y[i])
        } else {
            d_y[i].clone()
        };
        let bm = &block.b()[i];
        d_b.push(bm.param_grad(&trace.ax[i], &g_raw)?);
        let g_ax = bm.apply_transpose(&g_raw, &mut ledger)?;
        let am = &block.a()[i];
        d_a.push(am.param_grad(&trace.x, &g_ax)?);
        d_x.add_assign(&am.apply_transpose(&g_ax, &mut ledger)?)?;
    }
    let mut groups = Vec::new();
    for (prefix, grads) in [("A", d_a), ("B", d_b), ("C", d_c), ("D", d_d)] {
        for (i, g) in grads.into_iter().enumerate() {
            groups.push((format!("{prefix}{}", i + 1), g));
        }
    }
    Ok(GradBundle { d_x, groups })
}

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradReport {
    pub scheme: String,
    pub seed: u64,
    pub probes: usize,
    pub max_rel_err: f64,
    /// Probes whose relative error exceeded the tolerance.
    pub failures: usize,
    pub tolerance: f64,
    pub pass: bool,
}

impl GradReport {
    /// Single-line JSON record.
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("serializable report")
    }
}

/// Default finite-difference step.
pub const GRADCHECK_STEP: f64 = 1e-4;
/// Default pass threshold on the relative error.
pub const GRADCHECK_TOL: f64 = 1e-5;

/// `|a - b| / max(1e-8, |a| + |b|)`.
pub fn grad_rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}

/// A differentiable map with flat parameter groups, so one checker serves
/// the polynomial and the rational block.
pub trait Differentiable {
    fn output(&self, x: &Tensor2<f64>) -> Result<Tensor2<f64>>;
    fn vjp(&self, x: &Tensor2<f64>, upstream: &Tensor2<f64>) -> Result<(Tensor2<f64>, Vec<Vec<f64>>)>;
    fn param_groups(&self) -> Vec<&[f64]>;
    fn param_groups_mut(&mut self) -> Vec<&mut [f64]>;
}

impl Differentiable for PadreBlock<f64> {
    fn output(&self, x: &Tensor2<f64>) -> Result<Tensor2<f64>> {
        self.eval(x, &mut FlopLedger::new())
    }

    fn vjp(&self, x: &Tensor2<f64>, upstream: &Tensor2<f64>) -> Result<(Tensor2<f64>, Vec<Vec<f64>>)> {
        let (_, trace) = self.forward(x, &mut FlopLedger::new())?;
        let g = backward(self, &trace, upstream)?;
        Ok((g.d_x, g.groups.into_iter().map(|(_, v)| v).collect()))
    }

    fn param_groups(&self) -> Vec<&[f64]> {
        PadreBlock::param_groups(self).into_iter().map(|(_, p)| p).collect()
    }

    fn param_groups_mut(&mut self) -> Vec<&mut [f64]> {
        PadreBlock::param_groups_mut(self)
    }
}

/// Compares the analytic VJP with central differences of
/// `<upstream, f(x)>` on `probes` random parameter and input coordinates.
pub fn gradcheck<F, R>(f: &F, x: &Tensor2<f64>, probes: usize, h: f64, rng: &mut R) -> Result<GradCheck>
where
    F: Differentiable + Clone,
    R: Rng + ?Sized,
{
    let out = f.output(x)?;
    let upstream = Tensor2::<f64>::random_uniform(out.rows(), out.cols(), 1.0, rng);
    let (d_x, d_params) = f.vjp(x, &upstream)?;

    // coordinate: (None, k) = input entry k, (Some(g), k) = param k of group g
    let mut coords: Vec<(Option<usize>, usize)> = (0..x.len()).map(|k| (None, k)).collect();
    for (g, p) in f.param_groups().iter().enumerate() {
        coords.extend((0..p.len()).map(|k| (Some(g), k)));
    }
    coords.shuffle(rng);
    coords.truncate(probes);

    // difference outputs entrywise before contracting, and divide by the
    // step actually taken, so linear maps are differenced exactly
    let slope = |yp: &Tensor2<f64>, ym: &Tensor2<f64>, step: f64| -> f64 {
        let s: f64 = yp.data().iter().zip(ym.data()).zip(upstream.data()).map(|((a, b), g)| g * (a - b)).sum();
        s / step
    };
    let mut max_rel = 0.0f64;
    let mut errors = Vec::with_capacity(coords.len());
    for &(group, k) in &coords {
        let (analytic, numeric) = match group {
            None => {
                let mut xp = x.clone();
                xp.data_mut()[k] += h;
                let mut xm = x.clone();
                xm.data_mut()[k] -= h;
                let step = xp.data()[k] - xm.data()[k];
                (d_x.data()[k], slope(&f.output(&xp)?, &f.output(&xm)?, step))
            }
            Some(g) => {
                let mut fp = f.clone();
                fp.param_groups_mut()[g][k] += h;
                let mut fm = f.clone();
                fm.param_groups_mut()[g][k] -= h;
                let step = fp.param_groups()[g][k] - fm.param_groups()[g][k];
                (d_params[g][k], slope(&fp.output(x)?, &fm.output(x)?, step))
            }
        };
        let e = grad_rel_err(analytic, numeric);
        max_rel = max_rel.max(e);
        errors.push(e);
    }
    Ok(GradCheck {
        probes: coords.len(),
        max_rel_err: max_rel,
        errors,
    })
}

/// Raw result of [`gradcheck`].
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub probes: usize,
    pub max_rel_err: f64,
    pub errors: Vec<f64>,
}

impl GradCheck {
    pub fn report(&self, scheme: impl Into<String>, seed: u64, tolerance: f64) -> GradReport {
        let failures = self.errors.iter().filter(|&&e| e >= tolerance).count();
        GradReport {
            scheme: scheme.into(),
            seed,
            probes: self.probes,
            max_rel_err: self.max_rel_err,
            failures,
            tolerance,
            pass: failures == 0,
        }
    }
}
