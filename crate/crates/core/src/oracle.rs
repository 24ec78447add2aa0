//! Brute-force polynomial oracles for tiny instances: coefficient
//! extraction by least squares over a monomial basis, homogeneity checks
//! and effective-degree estimation along random lines.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::DMatrix;
use rand::Rng;

use crate::error::{PadreError, Result};
use crate::tensor::{rel_err, Tensor2};

/// Largest number of input entries the coefficient oracle accepts.
pub const MAX_VARS: usize = 8;
/// Largest degree bound the coefficient oracle accepts.
pub const MAX_DEGREE: usize = 4;
/// Condition-number guard on the probe system.
pub const COND_CAP: f64 = 1e10;
/// Fits above this residual are rejected as non-polynomial.
pub const RESIDUAL_REJECT: f64 = 1e-6;
/// Coefficients below this magnitude are dropped.
pub const PRUNE: f64 = 1e-9;

/// A black-box map on `N x D` matrices.
pub type BlackBox<'a> = dyn Fn(&Tensor2<f64>) -> Result<Tensor2<f64>> + 'a;

/// Exponents over input entries `(token, channel)`; zero exponents are not stored.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct MultiIndex {
    exps: Vec<((usize, usize), u32)>,
}

impl MultiIndex {
    pub fn new(mut exps: Vec<((usize, usize), u32)>) -> Self {
        exps.retain(|&(_, e)| e > 0);
        exps.sort();
        Self { exps }
    }

    pub fn total(&self) -> u32 {
        self.exps.iter().map(|&(_, e)| e).sum()
    }

    pub fn exponents(&self) -> &[((usize, usize), u32)] {
        &self.exps
    }

    pub fn eval(&self, x: &Tensor2<f64>) -> f64 {
        self.exps.iter().map(|&((m, n), e)| x.get(m, n).powi(e as i32)).product()
    }
}

impl fmt::Display for MultiIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.exps.is_empty() {
            return write!(f, "k=()");
        }
        write!(f, "k=")?;
        for (i, ((m, n), e)) in self.exps.iter().enumerate() {
            if i > 0 {
                write!(f, " ")?;
            }
            write!(f, "({m},{n})^{e}")?;
        }
        Ok(())
    }
}

/// Sorting key: total degree first, then the exponent list.
fn order_key(k: &MultiIndex) -> (u32, &[((usize, usize), u32)]) {
    (k.total(), k.exponents())
}

/// Recovered polynomial per output entry.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyCoeffs {
    pub in_shape: (usize, usize),
    pub out_shape: (usize, usize),
    pub degree_bound: usize,
    /// Row-major over output entries.
    pub entries: Vec<BTreeMap<MultiIndex, f64>>,
    pub residual: f64,
}

impl PolyCoeffs {
    pub fn entry(&self, m: usize, n: usize) -> &BTreeMap<MultiIndex, f64> {
        &self.entries[m * self.out_shape.1 + n]
    }

    /// Largest `|k|` with a surviving coefficient.
    pub fn max_total_degree(&self) -> u32 {
        self.entries.iter().flat_map(|e| e.keys().map(MultiIndex::total)).max().unwrap_or(0)
    }

    /// Every total degree that carries a coefficient somewhere.
    pub fn degrees_present(&self) -> Vec<u32> {
        let mut out: Vec<u32> = self.entries.iter().flat_map(|e| e.keys().map(MultiIndex::total)).collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    pub fn evaluate(&self, x: &Tensor2<f64>) -> Tensor2<f64> {
        let (r, c) = self.out_shape;
        Tensor2::from_fn(r, c, |m, n| self.entry(m, n).iter().map(|(k, &pi)| pi * k.eval(x)).sum())
    }

    /// Text dump, one coefficient per line, `(m,n) | k=... | pi`.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let (r, c) = self.out_shape;
        for m in 0..r {
            for n in 0..c {
                let mut terms: Vec<(&MultiIndex, &f64)> = self.entry(m, n).iter().collect();
                terms.sort_by(|a, b| order_key(a.0).cmp(&order_key(b.0)));
                for (k, pi) in terms {
                    out.push_str(&format!("({m},{n}) | {k} | {pi:+.12e}\n"));
                }
            }
        }
        out
    }
}

/// Monomial basis, probe points and the pseudo-inverse of the probe matrix
/// for a given number of variables and degree bound. Reusable across maps.
#[derive(Debug, Clone)]
pub struct ProbeSystem {
    shape: (usize, usize),
    degree_bound: usize,
    monomials: Vec<Vec<u32>>,
    points: Vec<Tensor2<f64>>,
    design: DMatrix<f64>,
    pinv: DMatrix<f64>,
    condition: f64,
}

impl ProbeSystem {
    pub fn new(n: usize, d: usize, degree_bound: usize) -> Result<Self> {
        let vars = n * d;
        if vars == 0 || vars > MAX_VARS {
            return Err(PadreError::OracleCap { dim: vars, cap: MAX_VARS });
        }
        if degree_bound > MAX_DEGREE {
            return Err(PadreError::OracleCap {
                dim: degree_bound,
                cap: MAX_DEGREE,
            });
        }
        let monomials = monomials(vars, degree_bound as u32);
        let count = 2 * monomials.len();
        let points: Vec<Tensor2<f64>> = (1..=count)
            .map(|i| {
                let data = (0..vars).map(|v| 2.0 * halton(i, PRIMES[v]) - 1.0).collect();
                Tensor2::from_vec(n, d, data).expect("probe shape")
            })
            .collect();
        let design = DMatrix::from_fn(count, monomials.len(), |p, j| eval_monomial(&monomials[j], points[p].data()));
        let svd = design.clone().svd(true, true);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
        if condition > COND_CAP {
            return Err(PadreError::IllConditioned(condition));
        }
        let pinv = svd.pseudo_inverse(0.0).map_err(|e| PadreError::Config(e.to_string()))?;
        Ok(Self {
            shape: (n, d),
            degree_bound,
            monomials,
            points,
            design,
            pinv,
            condition,
        })
    }

    pub fn condition(&self) -> f64 {
        self.condition
    }

    pub fn monomial_count(&self) -> usize {
        self.monomials.len()
    }

    pub fn probe_count(&self) -> usize {
        self.points.len()
    }

    /// Fits `f` on the probe set.
    pub fn extract(&self, f: &BlackBox<'_>) -> Result<PolyCoeffs> {
        let mut outputs = Vec::with_capacity(self.points.len());
        for p in &self.points {
            outputs.push(f(p)?);
        }
        let out_shape = outputs[0].shape();
        let outs = out_shape.0 * out_shape.1;
        let b = DMatrix::from_fn(self.points.len(), outs, |p, o| outputs[p].data()[o]);
        let coeffs = &self.pinv * &b;
        let fitted = &self.design * &coeffs;
        let mut residual = 0.0f64;
        for o in 0..outs {
            let col = b.column(o);
            let scale = col.amax().max(1.0);
            residual = residual.max((fitted.column(o) - col).amax() / scale);
        }
        if residual > RESIDUAL_REJECT {
            return Err(PadreError::NotPolynomial {
                degree: self.degree_bound,
                residual,
            });
        }
        let d = self.shape.1;
        let entries = (0..outs)
            .map(|o| {
                let mut map = BTreeMap::new();
                for (j, mono) in self.monomials.iter().enumerate() {
                    let pi = coeffs[(j, o)];
                    if pi.abs() >= PRUNE {
                        let exps = mono.iter().enumerate().map(|(v, &e)| ((v / d, v % d), e)).collect();
                        map.insert(MultiIndex::new(exps), pi);
                    }
                }
                map
            })
            .collect();
        Ok(PolyCoeffs {
            in_shape: self.shape,
            out_shape,
            degree_bound: self.degree_bound,
            entries,
            residual,
        })
    }
}

/// Recovers the coefficients of `f`, assumed polynomial of degree `<= degree_bound`.
pub fn extract_coeffs(f: &BlackBox<'_>, n: usize, d: usize, degree_bound: usize) -> Result<PolyCoeffs> {
    ProbeSystem::new(n, d, degree_bound)?.extract(f)
}

const PRIMES: [usize; MAX_VARS] = [2, 3, 5, 7, 11, 13, 17, 19];

/// Radical inverse of `i` in `base`.
fn halton(mut i: usize, base: usize) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

/// All exponent vectors over `vars` variables with total degree `<= bound`,
/// ordered by total degree.
fn monomials(vars: usize, bound: u32) -> Vec<Vec<u32>> {
    fn rec(vars: usize, left: u32, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if cur.len() == vars {
            if left == 0 {
                out.push(cur.clone());
            }
            return;
        }
        for e in (0..=left).rev() {
            cur.push(e);
            rec(vars, left - e, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    for total in 0..=bound {
        rec(vars, total, &mut Vec::with_capacity(vars), &mut out);
    }
    out
}

fn eval_monomial(exps: &[u32], x: &[f64]) -> f64 {
    exps.iter().zip(x).map(|(&e, &v)| v.powi(e as i32)).product()
}

/// Verdict of a homogeneity test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homogeneity {
    pub pass: bool,
    pub max_rel_err: f64,
}

/// Default tolerance of [`assert_homogeneous`].
pub const HOMOGENEITY_TOL: f64 = 1e-10;

/// Checks `f(αx) == α^i f(x)` over `trials` random `α ∈ [0.5, 2]`, `x ∈ [-1, 1]`.
pub fn assert_homogeneous<R: Rng + ?Sized>(
    f: &BlackBox<'_>,
    shape: (usize, usize),
    degree: u32,
    trials: usize,
    rng: &mut R,
) -> Result<Homogeneity> {
    let alphas: Vec<f64> = (0..trials).map(|_| rng.gen_range(0.5..=2.0)).collect();
    check_homogeneous_at(f, shape, degree, &alphas, rng)
}

/// As [`assert_homogeneous`] with caller-chosen scale factors.
pub fn check_homogeneous_at<R: Rng + ?Sized>(
    f: &BlackBox<'_>,
    shape: (usize, usize),
    degree: u32,
    alphas: &[f64],
    rng: &mut R,
) -> Result<Homogeneity> {
    let mut worst = 0.0f64;
    for &alpha in alphas {
        let x = Tensor2::<f64>::random_uniform(shape.0, shape.1, 1.0, rng);
        let base = f(&x)?;
        let scaled = f(&x.scale(alpha))?;
        worst = worst.max(rel_err(&scaled, &base.scale(alpha.powi(degree as i32))));
    }
    Ok(Homogeneity {
        pass: worst <= HOMOGENEITY_TOL,
        max_rel_err: worst,
    })
}

/// Coefficient threshold of [`max_effective_degree`].
pub const DEGREE_COEFF_THRESHOLD: f64 = 1e-8;
/// Random directions probed by [`max_effective_degree`].
pub const DEGREE_DIRECTIONS: usize = 16;

/// Largest power of `t` present in `f(t x0)` over random directions `x0`,
/// fitted as a polynomial of degree `cap` at Chebyshev nodes.
pub fn max_effective_degree<R: Rng + ?Sized>(f: &BlackBox<'_>, shape: (usize, usize), cap: usize, rng: &mut R) -> Result<usize> {
    let nodes = 2 * cap + 2;
    let ts: Vec<f64> = (0..nodes)
        .map(|k| ((2 * k + 1) as f64 * std::f64::consts::PI / (2 * nodes) as f64).cos())
        .collect();
    let vander = DMatrix::from_fn(nodes, cap + 1, |i, j| ts[i].powi(j as i32));
    let pinv = vander
        .clone()
        .svd(true, true)
        .pseudo_inverse(0.0)
        .map_err(|e| PadreError::Config(e.to_string()))?;
    let mut best = 0usize;
    for _ in 0..DEGREE_DIRECTIONS {
        let x0 = Tensor2::<f64>::random_uniform(shape.0, shape.1, 1.0, rng);
        let samples: Vec<Tensor2<f64>> = ts.iter().map(|&t| f(&x0.scale(t))).collect::<Result<_>>()?;
        let outs = samples[0].len();
        let b = DMatrix::from_fn(nodes, outs, |i, o| samples[i].data()[o]);
        let coeffs = &pinv * &b;
        let fitted = &vander * &coeffs;
        let mut residual = 0.0f64;
        for o in 0..outs {
            let scale = b.column(o).amax().max(1.0);
            residual = residual.max((fitted.column(o) - b.column(o)).amax() / scale);
        }
        if residual > RESIDUAL_REJECT {
            return Err(PadreError::DegreeCapExceeded { cap, residual });
        }
        for j in (0..=cap).rev() {
            if coeffs.row(j).amax() > DEGREE_COEFF_THRESHOLD {
                best = best.max(j);
                break;
            }
        }
    }
    Ok(best)
}
