//! Selective state-space scan over an input sequence `x` (`T x D`), one
//! independent scan per channel with a shared diagonal state matrix:
//!
//! `B_t = W_B x_t`, `C_t = x_t^T W_C`, `Δ = softplus_β(π + x W_Δ)`,
//! `h_t = Ā_t h_{t-1} + B̄_t x_t`, `y_t = C_t h_t`.

use rand::Rng;

use super::plan::{Plan, Stage};
use super::{broadcast_column, column};
use crate::error::{shape_err, PadreError, Result};
use crate::flops::{FlopCategory, FlopLedger};
use crate::tensor::Tensor2;

#[derive(Debug, Clone, PartialEq)]
pub struct MambaParams {
    /// Diagonal of `A`, strictly negative.
    pub a: Vec<f64>,
    /// `N_s x D`.
    pub w_b: Tensor2<f64>,
    /// `D x N_s`.
    pub w_c: Tensor2<f64>,
    /// `W_Δ = u v^T`.
    pub delta_u: Vec<f64>,
    pub delta_v: Vec<f64>,
    pub beta: f64,
    pub pi: f64,
}

impl MambaParams {
    pub fn new(
        a: Vec<f64>,
        w_b: Tensor2<f64>,
        w_c: Tensor2<f64>,
        delta_u: Vec<f64>,
        delta_v: Vec<f64>,
        beta: f64,
        pi: f64,
    ) -> Result<Self> {
        let (ns, d) = (a.len(), w_b.cols());
        if w_b.rows() != ns {
            return Err(shape_err("mamba w_b", format!("{ns}xD"), format!("{}x{}", w_b.rows(), w_b.cols())));
        }
        if w_c.shape() != (d, ns) {
            return Err(shape_err("mamba w_c", format!("{d}x{ns}"), format!("{}x{}", w_c.rows(), w_c.cols())));
        }
        if delta_u.len() != d || delta_v.len() != d {
            return Err(shape_err("mamba w_delta factors", d.to_string(), format!("{}/{}", delta_u.len(), delta_v.len())));
        }
        if let Some(bad) = a.iter().find(|&&v| !(v < 0.0)) {
            return Err(PadreError::Config(format!("state matrix entry {bad} is not negative")));
        }
        if !(beta > 0.0) {
            return Err(PadreError::Config(format!("softplus sharpness {beta} must be positive")));
        }
        Ok(Self {
            a,
            w_b,
            w_c,
            delta_u,
            delta_v,
            beta,
            pi,
        })
    }

    /// `A` entries uniform in `[-1, -0.1]`, `β = 1`, `π = 0`.
    pub fn random<R: Rng + ?Sized>(state: usize, d: usize, rng: &mut R) -> Self {
        let hw = (3.0 / d as f64).sqrt();
        Self {
            a: (0..state).map(|_| rng.gen_range(-1.0..=-0.1)).collect(),
            w_b: Tensor2::random_uniform(state, d, hw, rng),
            w_c: Tensor2::random_uniform(d, state, hw, rng),
            delta_u: (0..d).map(|_| rng.gen_range(-hw..=hw)).collect(),
            delta_v: (0..d).map(|_| rng.gen_range(-1.0..=1.0)).collect(),
            beta: 1.0,
            pi: 0.0,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.a.len()
    }

    pub fn dim(&self) -> usize {
        self.w_b.cols()
    }

    fn check(&self, x: &Tensor2<f64>) -> Result<()> {
        if x.cols() != self.dim() {
            return Err(shape_err("mamba input", format!("Tx{}", self.dim()), format!("{}x{}", x.rows(), x.cols())));
        }
        Ok(())
    }
}

fn softplus(z: f64, beta: f64) -> f64 {
    let bz = beta * z;
    (bz.max(0.0) + (-bz.abs()).exp().ln_1p()) / beta
}

/// Step sizes `Δ_scale * softplus_β(π + x W_Δ)`, `T x D`.
pub fn mamba_delta(p: &MambaParams, x: &Tensor2<f64>, delta_scale: f64) -> Result<Tensor2<f64>> {
    p.check(x)?;
    Ok(Tensor2::from_fn(x.rows(), x.cols(), |t, c| {
        let xu: f64 = x.row(t).iter().zip(&p.delta_u).map(|(a, b)| a * b).sum();
        delta_scale * softplus(p.pi + xu * p.delta_v[c], p.beta)
    }))
}

/// `(B, C)` as `T x N_s` tensors.
fn input_maps(p: &MambaParams, x: &Tensor2<f64>, ledger: &mut FlopLedger) -> Result<(Tensor2<f64>, Tensor2<f64>)> {
    let b = x.matmul(&p.w_b.transpose())?;
    let c = x.matmul(&p.w_c)?;
    ledger.add(FlopCategory::ChannelMix, (2 * x.len() * p.state_dim()) as u64);
    Ok((b, c))
}

/// Runs the per-channel scan with discretization `step(Δ, a, B) -> (Ā, B̄)`.
fn scan(
    p: &MambaParams,
    x: &Tensor2<f64>,
    delta: &Tensor2<f64>,
    ledger: &mut FlopLedger,
    step: impl Fn(f64, f64, f64) -> (f64, f64),
) -> Result<Tensor2<f64>> {
    p.check(x)?;
    x.check_same_shape(delta, "mamba step sizes")?;
    let (t_len, d) = x.shape();
    let ns = p.state_dim();
    let (b, c) = input_maps(p, x, ledger)?;
    let mut h = vec![0.0; d * ns];
    let mut y = Tensor2::zeros(t_len, d);
    for t in 0..t_len {
        for ch in 0..d {
            let dt = delta.get(t, ch);
            let mut acc = 0.0;
            for (k, &a) in p.a.iter().enumerate() {
                let (a_bar, b_bar) = step(dt, a, b.get(t, k));
                let s = &mut h[ch * ns + k];
                *s = a_bar * *s + b_bar * x.get(t, ch);
                acc += c.get(t, k) * *s;
            }
            y.set(t, ch, acc);
        }
    }
    ledger.add(FlopCategory::TokenMix, (3 * t_len * d * ns) as u64);
    Ok(y)
}

/// Exact zero-order-hold discretization: `Ā = e^{ΔA}`,
/// `B̄ = (ΔA)^{-1}(e^{ΔA} - I) ΔB`.
pub fn mamba_forward(p: &MambaParams, x: &Tensor2<f64>, delta_scale: f64, ledger: &mut FlopLedger) -> Result<Tensor2<f64>> {
    let delta = mamba_delta(p, x, delta_scale)?;
    scan(p, x, &delta, ledger, |dt, a, b| ((dt * a).exp(), (dt * a).exp_m1() / a * b))
}

/// First order in `Δ`: `Ā ≈ I + ΔA`, `B̄ ≈ ΔB`.
pub fn mamba_padre_approx(p: &MambaParams, x: &Tensor2<f64>, delta_scale: f64, ledger: &mut FlopLedger) -> Result<Tensor2<f64>> {
    let delta = mamba_delta(p, x, delta_scale)?;
    mamba_surrogate_frozen(p, x, &delta, ledger)
}

/// The first-order surrogate with caller-supplied step sizes, treated as
/// constants rather than functions of `x`.
pub fn mamba_surrogate_frozen(p: &MambaParams, x: &Tensor2<f64>, delta: &Tensor2<f64>, ledger: &mut FlopLedger) -> Result<Tensor2<f64>> {
    scan(p, x, delta, ledger, |dt, a, b| (1.0 + dt * a, dt * b))
}

/// `y_t = Σ_{n <= t} C_t (Π_{s=n+1}^{t} Ā_s) B̄_n x_n` with exact
/// discretization, evaluated term by term (`O(T^2)`).
pub fn mamba_closed_form(p: &MambaParams, x: &Tensor2<f64>, delta_scale: f64) -> Result<Tensor2<f64>> {
    let delta = mamba_delta(p, x, delta_scale)?;
    let (t_len, d) = x.shape();
    let b = x.matmul(&p.w_b.transpose())?;
    let c = x.matmul(&p.w_c)?;
    Ok(Tensor2::from_fn(t_len, d, |t, ch| {
        let mut y = 0.0;
        for n in 0..=t {
            for (k, &a) in p.a.iter().enumerate() {
                let dn = delta.get(n, ch);
                let mut kernel = c.get(t, k) * (dn * a).exp_m1() / a * b.get(n, k);
                for s in n + 1..=t {
                    kernel *= (delta.get(s, ch) * a).exp();
                }
                y += kernel * x.get(n, ch);
            }
        }
        y
    }))
}

/// The frozen-`Δ` surrogate as a plan. Per state `k`:
/// `G = Δ ⊙ (X w_B^k 1^T) ⊙ X`, a per-channel scan with decay `1 + Δ a_k`
/// (a lower-triangular token mixer), then gating by `X w_C^k 1^T`.
pub fn mamba_as_padre(p: &MambaParams, delta: &Tensor2<f64>) -> Result<Plan> {
    if delta.cols() != p.dim() {
        return Err(shape_err("mamba step sizes", format!("Tx{}", p.dim()), format!("{}x{}", delta.rows(), delta.cols())));
    }
    let w_bt = p.w_b.transpose();
    let mut plan = Plan::new("mamba");
    let x = Plan::INPUT;
    let mut terms = Vec::with_capacity(p.state_dim());
    for (k, &a) in p.a.iter().enumerate() {
        let b_k = plan.mix(x, broadcast_column(column(&w_bt, k))?);
        let bx = plan.hadamard(b_k, x);
        let g = plan.push(Stage::Scale {
            src: bx,
            weights: delta.clone(),
        });
        let h = plan.push(Stage::Scan {
            src: g,
            decay: delta.map(|dt| 1.0 + dt * a),
        });
        let c_k = plan.mix(x, broadcast_column(column(&p.w_c, k))?);
        terms.push((plan.hadamard(c_k, h), 1.0));
    }
    plan.push(Stage::Combine { terms, bias: None });
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::check_plan;
    use crate::oracle::{assert_homogeneous, extract_coeffs};
    use crate::tensor::rel_err;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64, t: usize, d: usize, ns: usize) -> (MambaParams, Tensor2<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = MambaParams::random(ns, d, &mut rng);
        let x = Tensor2::random_uniform(t, d, 1.0, &mut rng);
        (p, x)
    }

    #[test]
    fn zero_step_gives_zero() {
        let (p, x) = setup(1, 6, 3, 4);
        let mut l = FlopLedger::new();
        assert_eq!(mamba_forward(&p, &x, 0.0, &mut l).unwrap().max_abs(), 0.0);
        assert_eq!(mamba_padre_approx(&p, &x, 0.0, &mut l).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn first_step_is_c_bbar_x() {
        let (p, x) = setup(2, 1, 2, 3);
        let y = mamba_forward(&p, &x, 0.5, &mut FlopLedger::new()).unwrap();
        let delta = mamba_delta(&p, &x, 0.5).unwrap();
        for ch in 0..2 {
            let mut expect = 0.0;
            for k in 0..3 {
                let b: f64 = (0..2).map(|j| p.w_b.get(k, j) * x.get(0, j)).sum();
                let c: f64 = (0..2).map(|j| x.get(0, j) * p.w_c.get(j, k)).sum();
                let dt = delta.get(0, ch);
                expect += c * ((dt * p.a[k]).exp() - 1.0) / p.a[k] * b * x.get(0, ch);
            }
            assert!((y.get(0, ch) - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn scan_matches_closed_form() {
        let (p, x) = setup(3, 7, 3, 4);
        let a = mamba_forward(&p, &x, 0.8, &mut FlopLedger::new()).unwrap();
        let b = mamba_closed_form(&p, &x, 0.8).unwrap();
        assert!(rel_err(&a, &b) < 1e-12);
    }

    #[test]
    fn surrogate_error_is_second_order() {
        let (p, x) = setup(4, 8, 3, 4);
        let err = |s: f64| {
            let a = mamba_forward(&p, &x, s, &mut FlopLedger::new()).unwrap();
            let b = mamba_padre_approx(&p, &x, s, &mut FlopLedger::new()).unwrap();
            a.sub(&b).unwrap().max_abs()
        };
        for s in [1e-2, 1e-3] {
            let ratio = err(s / 2.0) / err(s);
            assert!((0.15..=0.4).contains(&ratio), "s={s}: {ratio}");
        }
    }

    #[test]
    fn frozen_surrogate_is_cubic() {
        let (p, x) = setup(5, 4, 2, 3);
        let delta = mamba_delta(&p, &x, 0.3).unwrap();
        let f = |x: &Tensor2<f64>| mamba_surrogate_frozen(&p, x, &delta, &mut FlopLedger::new());
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        assert!(assert_homogeneous(&f, (4, 2), 3, 10, &mut rng).unwrap().pass);
        assert_eq!(extract_coeffs(&f, 4, 2, 3).unwrap().degrees_present(), vec![3]);
    }

    #[test]
    fn plan_matches_frozen_surrogate() {
        let (p, x) = setup(7, 12, 4, 5);
        let delta = mamba_delta(&p, &x, 0.5).unwrap();
        let plan = mamba_as_padre(&p, &delta).unwrap();
        let rep = check_plan("mamba", |x| mamba_surrogate_frozen(&p, x, &delta, &mut FlopLedger::new()), &plan, (12, 4), 100, 2).unwrap();
        assert!(rep.pass, "{rep:?}");
    }

    #[test]
    fn rejects_non_negative_state() {
        let (p, _) = setup(8, 2, 2, 2);
        let err = MambaParams::new(vec![-1.0, 0.0], p.w_b, p.w_c, p.delta_u, p.delta_v, 1.0, 0.0).unwrap_err();
        assert!(matches!(err, PadreError::Config(_)));
    }
}
