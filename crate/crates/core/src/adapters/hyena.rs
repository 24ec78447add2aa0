//! Order-`N` Hyena recurrence: `x^n = P^n χ`, `z^1 = x^0`,
//! `z^{n+1}_t = x^n_t (h^n * z^n)_t`, output `z^{N+1}`. Convolutions are
//! causal with zero history: `(h * z)_t = Σ_{s <= t} h_{t-s} z_s`.

use rand::Rng;

use super::plan::{Plan, Stage};
use crate::error::{shape_err, PadreError, Result};
use crate::flops::{FlopCategory, FlopLedger};
use crate::mixer::{Mixer, Padding, Side};
use crate::rect::RectOp;
use crate::tensor::Tensor2;

/// Length cap for the brute-force closed form.
pub const CLOSED_FORM_MAX_LEN: usize = 16;
/// Term cap (`L^N M^(N+1)`) for the closed form.
pub const CLOSED_FORM_MAX_TERMS: usize = 1 << 24;

#[derive(Debug, Clone, PartialEq)]
pub struct HyenaParams {
    /// `P^0 .. P^N`, each `L x M`.
    pub projections: Vec<Tensor2<f64>>,
    /// `h^1 .. h^N`, each of length `L`.
    pub filters: Vec<Vec<f64>>,
}

impl HyenaParams {
    pub fn new(projections: Vec<Tensor2<f64>>, filters: Vec<Vec<f64>>) -> Result<Self> {
        let order = filters.len();
        if order == 0 || projections.len() != order + 1 {
            return Err(PadreError::Config(format!(
                "order {order} needs {} projections, got {}",
                order + 1,
                projections.len()
            )));
        }
        let (l, m) = projections[0].shape();
        for p in &projections {
            if p.shape() != (l, m) {
                return Err(shape_err("hyena projection", format!("{l}x{m}"), format!("{}x{}", p.rows(), p.cols())));
            }
        }
        for h in &filters {
            if h.len() != l {
                return Err(shape_err("hyena filter", l.to_string(), h.len().to_string()));
            }
        }
        Ok(Self { projections, filters })
    }

    pub fn random<R: Rng + ?Sized>(order: usize, len: usize, m: usize, rng: &mut R) -> Self {
        let hp = (3.0 / m as f64).sqrt();
        let hf = (3.0 / len as f64).sqrt();
        Self {
            projections: (0..=order).map(|_| Tensor2::random_uniform(len, m, hp, rng)).collect(),
            filters: (0..order).map(|_| (0..len).map(|_| rng.gen_range(-hf..=hf)).collect()).collect(),
        }
    }

    pub fn order(&self) -> usize {
        self.filters.len()
    }

    pub fn len(&self) -> usize {
        self.projections[0].rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.projections[0].cols()
    }
}

fn check_input(p: &HyenaParams, chi: &Tensor2<f64>) -> Result<()> {
    if chi.shape() != (p.input_dim(), 1) {
        return Err(shape_err("hyena input", format!("{}x1", p.input_dim()), format!("{}x{}", chi.rows(), chi.cols())));
    }
    Ok(())
}

/// `x^n = P^n χ` for `n = 0..=N`, each an `L x 1` column.
pub fn hyena_projections(p: &HyenaParams, chi: &Tensor2<f64>, ledger: &mut FlopLedger) -> Result<Vec<Tensor2<f64>>> {
    check_input(p, chi)?;
    ledger.add(FlopCategory::Resize, ((p.order() + 1) * p.len() * p.input_dim()) as u64);
    p.projections.iter().map(|proj| proj.matmul(chi)).collect()
}

pub fn hyena_forward_recurrence(p: &HyenaParams, xs: &[Tensor2<f64>], ledger: &mut FlopLedger) -> Result<Tensor2<f64>> {
    let l = p.len();
    if xs.len() != p.order() + 1 {
        return Err(shape_err("hyena projections", (p.order() + 1).to_string(), xs.len().to_string()));
    }
    if let Some(bad) = xs.iter().find(|x| x.shape() != (l, 1)) {
        return Err(shape_err("hyena projection output", format!("{l}x1"), format!("{}x{}", bad.rows(), bad.cols())));
    }
    let mut z: Vec<f64> = xs[0].data().to_vec();
    for (n, h) in p.filters.iter().enumerate() {
        let x = xs[n + 1].data();
        z = (0..l)
            .map(|t| x[t] * (0..=t).map(|s| h[t - s] * z[s]).sum::<f64>())
            .collect();
        ledger.add(FlopCategory::TokenMix, (l * (l + 1) / 2) as u64);
        ledger.add(FlopCategory::Hadamard, l as u64);
    }
    Tensor2::from_vec(l, 1, z)
}

pub fn hyena_forward(p: &HyenaParams, chi: &Tensor2<f64>, ledger: &mut FlopLedger) -> Result<Tensor2<f64>> {
    let xs = hyena_projections(p, chi, ledger)?;
    hyena_forward_recurrence(p, &xs, ledger)
}

/// Explicit expansion `y_{t_N} = Σ_m η^{(t_N)}_m χ_{m_0} ... χ_{m_N}` with
/// `η^{(t_N)}_m = Σ_{t_0 .. t_{N-1}} Π_i h^i_{t_i - t_{i-1}} Π_j P^j_{t_j, m_j}`,
/// where every lag `t_i - t_{i-1}` must be non-negative. The sum over time
/// indices is carried out term by term.
pub fn hyena_forward_closed(p: &HyenaParams, chi: &Tensor2<f64>) -> Result<Tensor2<f64>> {
    check_input(p, chi)?;
    let (l, m, order) = (p.len(), p.input_dim(), p.order());
    let terms = l.checked_pow(order as u32).and_then(|a| m.checked_pow(order as u32 + 1).and_then(|b| a.checked_mul(b)));
    if l > CLOSED_FORM_MAX_LEN || terms.is_none_or(|t| t > CLOSED_FORM_MAX_TERMS) {
        return Err(PadreError::OracleCap {
            dim: l,
            cap: CLOSED_FORM_MAX_LEN,
        });
    }
    let chi = chi.data();
    let mut out = vec![0.0; l];
    let mut ts = vec![0usize; order];
    for (t_last, y) in out.iter_mut().enumerate() {
        let mut eta = vec![0.0; m.pow(order as u32 + 1)];
        // Enumerate t_0 .. t_{N-1} with t_0 <= t_1 <= ... <= t_N.
        for_each_index(order, t_last + 1, &mut ts, &mut |ts_head| {
            let mut lag = 1.0;
            let mut prev = ts_head[0];
            for i in 1..=order {
                let cur = if i == order { t_last } else { ts_head[i] };
                if cur < prev {
                    return;
                }
                lag *= p.filters[i - 1][cur - prev];
                prev = cur;
            }
            if lag == 0.0 {
                return;
            }
            for (flat, e) in eta.iter_mut().enumerate() {
                let mut rest = flat;
                let mut prod = lag;
                for j in (0..=order).rev() {
                    let mj = rest % m;
                    rest /= m;
                    let tj = if j == order { t_last } else { ts_head[j] };
                    prod *= p.projections[j].get(tj, mj);
                }
                *e += prod;
            }
        });
        for (flat, e) in eta.iter().enumerate() {
            let mut rest = flat;
            let mut prod = *e;
            for _ in 0..=order {
                prod *= chi[rest % m];
                rest /= m;
            }
            *y += prod;
        }
    }
    Tensor2::from_vec(l, 1, out)
}

fn for_each_index(depth: usize, bound: usize, buf: &mut [usize], f: &mut dyn FnMut(&[usize])) {
    fn rec(pos: usize, depth: usize, bound: usize, buf: &mut [usize], f: &mut dyn FnMut(&[usize])) {
        if pos == depth {
            f(&buf[..depth]);
            return;
        }
        for v in 0..bound {
            buf[pos] = v;
            rec(pos + 1, depth, bound, buf, f);
        }
    }
    rec(0, depth, bound, buf, f);
}

/// Causal convolution of length `L` as a centred zero-padded kernel of
/// length `2L - 1` whose taps right of centre are zero.
fn causal_mixer(h: &[f64]) -> Result<Mixer<f64>> {
    let l = h.len();
    let c = l - 1;
    let kernel = (0..2 * l - 1).map(|j| if j <= c { h[c - j] } else { 0.0 }).collect();
    Mixer::conv1d(Side::Token, l, kernel, Padding::Zero)
}

/// Input `χ` is an `M x 1` column; projections are rectangular left factors
/// and each causal filter a token-side convolution.
pub fn hyena_as_padre(p: &HyenaParams) -> Result<Plan> {
    let mut plan = Plan::new("hyena");
    let xs: Vec<usize> = p
        .projections
        .iter()
        .map(|proj| {
            plan.push(Stage::Project {
                src: Plan::INPUT,
                left: Some(RectOp::dense(proj.clone())),
                right: None,
            })
        })
        .collect();
    let mut z = xs[0];
    for (n, h) in p.filters.iter().enumerate() {
        let conv = plan.mix(z, causal_mixer(h)?);
        z = plan.hadamard(xs[n + 1], conv);
    }
    plan.push(Stage::Combine {
        terms: vec![(z, 1.0)],
        bias: None,
    });
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::check_plan;
    use crate::oracle::assert_homogeneous;
    use crate::tensor::rel_err;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn delta(l: usize) -> Vec<f64> {
        let mut h = vec![0.0; l];
        h[0] = 1.0;
        h
    }

    #[test]
    fn delta_filter_is_gating() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = HyenaParams::random(1, 6, 3, &mut rng);
        p.filters[0] = delta(6);
        let chi = Tensor2::random_uniform(3, 1, 1.0, &mut rng);
        let mut ledger = FlopLedger::new();
        let xs = hyena_projections(&p, &chi, &mut ledger).unwrap();
        let y = hyena_forward_recurrence(&p, &xs, &mut ledger).unwrap();
        let expect = xs[1].zip_with(&xs[0], "test", |a, b| a * b).unwrap();
        assert!(rel_err(&y, &expect) < 1e-15);
    }

    #[test]
    fn identity_projections_reproduce_gating() {
        let p = HyenaParams::new(vec![Tensor2::identity(4), Tensor2::identity(4)], vec![delta(4)]).unwrap();
        let chi = Tensor2::from_vec(4, 1, vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        let y = hyena_forward_closed(&p, &chi).unwrap();
        assert_eq!(y.data(), &[1.0, 4.0, 9.0, 0.25]);
    }

    #[test]
    fn closed_form_matches_recurrence() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for order in 1..=3 {
            let p = HyenaParams::random(order, 5, 3, &mut rng);
            let chi = Tensor2::random_uniform(3, 1, 1.0, &mut rng);
            let a = hyena_forward(&p, &chi, &mut FlopLedger::new()).unwrap();
            let b = hyena_forward_closed(&p, &chi).unwrap();
            assert!(rel_err(&a, &b) < 1e-10, "order {order}: {}", rel_err(&a, &b));
        }
    }

    #[test]
    fn zero_filter_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = HyenaParams::random(2, 4, 2, &mut rng);
        p.filters[1] = vec![0.0; 4];
        let chi = Tensor2::random_uniform(2, 1, 1.0, &mut rng);
        assert_eq!(hyena_forward_closed(&p, &chi).unwrap().max_abs(), 0.0);
        assert_eq!(hyena_forward(&p, &chi, &mut FlopLedger::new()).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn closed_form_size_cap() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = HyenaParams::random(1, 17, 2, &mut rng);
        let chi = Tensor2::zeros(2, 1);
        assert!(matches!(hyena_forward_closed(&p, &chi), Err(PadreError::OracleCap { .. })));
    }

    #[test]
    fn homogeneous_of_order_plus_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for order in 1..=3 {
            let p = HyenaParams::random(order, 6, 4, &mut rng);
            let f = |x: &Tensor2<f64>| hyena_forward(&p, x, &mut FlopLedger::new());
            assert!(assert_homogeneous(&f, (4, 1), order as u32 + 1, 10, &mut rng).unwrap().pass);
        }
    }

    #[test]
    fn plan_matches_direct() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = HyenaParams::random(2, 12, 5, &mut rng);
        let plan = hyena_as_padre(&p).unwrap();
        let rep = check_plan("hyena", |x| hyena_forward(&p, x, &mut FlopLedger::new()), &plan, (5, 1), 100, 8).unwrap();
        assert!(rep.pass, "{rep:?}");
    }
}
