//! Rational blocks: a numerator polynomial block divided elementwise by a
//! denominator polynomial block with its own mixers.

use crate::block::{PadreBlock, PadreTrace};
use crate::error::{PadreError, Result};
use crate::flops::{FlopCategory, FlopLedger};
use crate::grad::{backward, Differentiable, GradBundle};
use crate::scalar::{lit, Scalar};
use crate::tensor::{ensure_finite, Tensor2};

/// Default stabilizer added to the squared denominator.
pub const DEFAULT_EPSILON: f64 = 1e-6;

/// Denominator of a rational block.
#[derive(Debug, Clone, PartialEq)]
pub enum Denominator<T> {
    /// Degree-0 denominator: the bias `Pd` alone.
    Constant(Tensor2<T>),
    /// Cascade over `Y_{d+1} .. Y_{d+e}`; its combine weights are `Qd`, its bias `Pd`.
    Cascade(PadreBlock<T>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RationalPadreBlock<T> {
    num: PadreBlock<T>,
    den: Denominator<T>,
    epsilon: T,
    square_denominator: bool,
}

#[derive(Debug, Clone)]
pub struct RationalTrace<T> {
    pub num: PadreTrace<T>,
    pub den: Option<PadreTrace<T>>,
    /// Numerator values `N`.
    pub numer: Tensor2<T>,
    /// Denominator before stabilization.
    pub denom_raw: Tensor2<T>,
    /// Denominator actually divided by.
    pub denom: Tensor2<T>,
}

impl<T: Scalar> RationalPadreBlock<T> {
    pub fn new(num: PadreBlock<T>, den: Denominator<T>, epsilon: T, square_denominator: bool) -> Result<Self> {
        if num.u().is_some() || num.v().is_some() {
            return Err(PadreError::Config("rational numerator does not support resizing".into()));
        }
        if epsilon < T::zero() || !epsilon.is_finite() {
            return Err(PadreError::Config(format!("epsilon must be finite and non-negative, got {epsilon}")));
        }
        let shape = (num.n(), num.d());
        match &den {
            Denominator::Constant(p) if p.shape() != shape => {
                return Err(PadreError::Config(format!(
                    "denominator bias must be {}x{}, got {}x{}",
                    shape.0,
                    shape.1,
                    p.rows(),
                    p.cols()
                )))
            }
            Denominator::Cascade(b) if (b.n(), b.d()) != shape || b.u().is_some() || b.v().is_some() => {
                return Err(PadreError::Config("denominator block must match the numerator shape without resizing".into()))
            }
            _ => {}
        }
        Ok(Self {
            num,
            den,
            epsilon,
            square_denominator,
        })
    }

    pub fn numerator(&self) -> &PadreBlock<T> {
        &self.num
    }

    pub fn denominator(&self) -> &Denominator<T> {
        &self.den
    }

    pub fn num_degree(&self) -> usize {
        self.num.degree()
    }

    pub fn den_degree(&self) -> usize {
        match &self.den {
            Denominator::Constant(_) => 0,
            Denominator::Cascade(b) => b.degree(),
        }
    }

    pub fn epsilon(&self) -> T {
        self.epsilon
    }

    pub fn squares_denominator(&self) -> bool {
        self.square_denominator
    }

    pub fn param_count(&self) -> usize {
        self.num.param_count()
            + match &self.den {
                Denominator::Constant(p) => p.len(),
                Denominator::Cascade(b) => b.param_count(),
            }
    }

    pub fn forward(&self, x: &Tensor2<T>, ledger: &mut FlopLedger) -> Result<(Tensor2<T>, RationalTrace<T>)> {
        let (numer, num_trace) = self.num.forward(x, ledger)?;
        let (denom_raw, den_trace) = match &self.den {
            Denominator::Constant(p) => (p.clone(), None),
            Denominator::Cascade(b) => {
                let (v, t) = b.forward(x, ledger)?;
                (v, Some(t))
            }
        };
        let (rows, cols) = numer.shape();
        let denom = if self.square_denominator {
            ledger.add(FlopCategory::Combine, (rows * cols) as u64);
            denom_raw.map(|v| v * v + self.epsilon)
        } else {
            for r in 0..rows {
                for c in 0..cols {
                    let v = denom_raw.get(r, c);
                    if v.abs() <= self.epsilon {
                        return Err(PadreError::Division {
                            row: r,
                            col: c,
                            value: v.to_f64_lossy(),
                        });
                    }
                }
            }
            denom_raw.clone()
        };
        ledger.add(FlopCategory::Combine, (rows * cols) as u64);
        let out = numer.zip_with(&denom, "rational_forward", |a, b| a / b)?;
        ensure_finite(&out, "O")?;
        let trace = RationalTrace {
            num: num_trace,
            den: den_trace,
            numer,
            denom_raw,
            denom,
        };
        Ok((out, trace))
    }

    pub fn eval(&self, x: &Tensor2<T>, ledger: &mut FlopLedger) -> Result<Tensor2<T>> {
        Ok(self.forward(x, ledger)?.0)
    }

    /// Quotient-rule VJP; groups are the numerator's prefixed `num.` followed
    /// by the denominator's prefixed `den.` (or `Pd` for a constant one).
    pub fn backward(&self, trace: &RationalTrace<T>, upstream: &Tensor2<T>) -> Result<GradBundle<T>> {
        let g_num = upstream.zip_with(&trace.denom, "rational_backward", |g, d| g / d)?;
        let two = lit::<T>(2.0);
        let mut g_den = Tensor2::zeros(upstream.rows(), upstream.cols());
        for (k, o) in g_den.data_mut().iter_mut().enumerate() {
            let d = trace.denom.data()[k];
            let gd = -upstream.data()[k] * trace.numer.data()[k] / (d * d);
            *o = if self.square_denominator {
                gd * two * trace.denom_raw.data()[k]
            } else {
                gd
            };
        }
        let num = backward(&self.num, &trace.num, &g_num)?;
        let mut d_x = num.d_x;
        let mut groups: Vec<(String, Vec<T>)> = num.groups.into_iter().map(|(n, g)| (format!("num.{n}"), g)).collect();
        match (&self.den, &trace.den) {
            (Denominator::Constant(_), _) => groups.push(("Pd".into(), g_den.into_data())),
            (Denominator::Cascade(b), Some(t)) => {
                let den = backward(b, t, &g_den)?;
                d_x.add_assign(&den.d_x)?;
                groups.extend(den.groups.into_iter().map(|(n, g)| (format!("den.{n}"), g)));
            }
            (Denominator::Cascade(_), None) => return Err(PadreError::StaleTrace),
        }
        Ok(GradBundle { d_x, groups })
    }

    fn groups(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = self.num.param_groups().into_iter().map(|(_, p)| p).collect();
        match &self.den {
            Denominator::Constant(p) => out.push(p.data()),
            Denominator::Cascade(b) => out.extend(b.param_groups().into_iter().map(|(_, p)| p)),
        }
        out
    }

    fn groups_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = self.num.param_groups_mut();
        match &mut self.den {
            Denominator::Constant(p) => out.push(p.data_mut()),
            Denominator::Cascade(b) => out.extend(b.param_groups_mut()),
        }
        out
    }
}

impl Differentiable for RationalPadreBlock<f64> {
    fn output(&self, x: &Tensor2<f64>) -> Result<Tensor2<f64>> {
        self.eval(x, &mut FlopLedger::new())
    }

    fn vjp(&self, x: &Tensor2<f64>, upstream: &Tensor2<f64>) -> Result<(Tensor2<f64>, Vec<Vec<f64>>)> {
        let (_, trace) = self.forward(x, &mut FlopLedger::new())?;
        let g = self.backward(&trace, upstream)?;
        Ok((g.d_x, g.groups.into_iter().map(|(_, v)| v).collect()))
    }

    fn param_groups(&self) -> Vec<&[f64]> {
        self.groups()
    }

    fn param_groups_mut(&mut self) -> Vec<&mut [f64]> {
        self.groups_mut()
    }
}

/// Free-function form of [`RationalPadreBlock::eval`].
pub fn rational_forward<T: Scalar>(block: &RationalPadreBlock<T>, x: &Tensor2<T>, ledger: &mut FlopLedger) -> Result<Tensor2<T>> {
    block.eval(x, ledger)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::block::{CombineWeights, WMode};
    use crate::grad::{gradcheck, GRADCHECK_STEP};
    use crate::mixer::MixerKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_x_over_one_plus_x2() -> RationalPadreBlock<f64> {
        let num = PadreBlock::builder(1, 1, 1)
            .weights(CombineWeights::ones(WMode::ScalarPerDegree, 1, 1, 1))
            .build()
            .unwrap();
        let den = PadreBlock::builder(1, 1, 2)
            .weights(CombineWeights::ones(WMode::ScalarPerDegree, 1, 1, 2))
            .degree_mask([2])
            .bias(Some(Tensor2::ones(1, 1)))
            .build()
            .unwrap();
        RationalPadreBlock::new(num, Denominator::Cascade(den), 0.0, false).unwrap()
    }

    #[test]
    fn scalar_rational_example() {
        let block = scalar_x_over_one_plus_x2();
        let out = block.eval(&Tensor2::filled(1, 1, 2.0), &mut FlopLedger::new()).unwrap();
        // 2 / (1 + 2^2)
        assert!((out.get(0, 0) - 2.0 / 5.0).abs() < 1e-15);
    }

    #[test]
    fn unit_constant_denominator_is_polynomial_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let num = PadreBlock::random(6, 3, 3, MixerKind::Dense, MixerKind::Diagonal, WMode::Full, &mut rng).unwrap();
        let r = RationalPadreBlock::new(num.clone(), Denominator::Constant(Tensor2::ones(6, 3)), 0.0, false).unwrap();
        let x = Tensor2::random_uniform(6, 3, 1.0, &mut rng);
        assert_eq!(r.eval(&x, &mut FlopLedger::new()).unwrap(), num.eval(&x, &mut FlopLedger::new()).unwrap());

        let g = Tensor2::random_uniform(6, 3, 1.0, &mut rng);
        let (_, rt) = r.forward(&x, &mut FlopLedger::new()).unwrap();
        let (_, pt) = num.forward(&x, &mut FlopLedger::new()).unwrap();
        let rg = r.backward(&rt, &g).unwrap();
        let pg = backward(&num, &pt, &g).unwrap();
        assert_eq!(rg.d_x, pg.d_x);
        for (name, grad) in &pg.groups {
            assert_eq!(rg.group(&format!("num.{name}")).unwrap(), grad.as_slice());
        }
    }

    #[test]
    fn zero_input_gives_bias_ratio() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let vn = Tensor2::<f64>::random_uniform(4, 2, 1.0, &mut rng);
        let pd = Tensor2::<f64>::random_uniform(4, 2, 1.0, &mut rng);
        let num = PadreBlock::random(4, 2, 2, MixerKind::Dense, MixerKind::Dense, WMode::Full, &mut rng)
            .unwrap()
            .with_bias(Some(vn.clone()))
            .unwrap();
        let den = PadreBlock::random(4, 2, 2, MixerKind::Dense, MixerKind::Dense, WMode::Full, &mut rng)
            .unwrap()
            .with_bias(Some(pd.clone()))
            .unwrap();
        let r = RationalPadreBlock::new(num, Denominator::Cascade(den), DEFAULT_EPSILON, true).unwrap();
        let out = r.eval(&Tensor2::zeros(4, 2), &mut FlopLedger::new()).unwrap();
        let expect = vn.zip_with(&pd, "t", |a, b| a / (b * b + DEFAULT_EPSILON)).unwrap();
        assert_eq!(out, expect);
    }

    #[test]
    fn unstabilized_small_denominator_is_an_error() {
        let block = scalar_x_over_one_plus_x2();
        let num = block.numerator().clone();
        let r = RationalPadreBlock::new(num, Denominator::Constant(Tensor2::zeros(1, 1)), 0.0, false).unwrap();
        let err = r.eval(&Tensor2::ones(1, 1), &mut FlopLedger::new()).unwrap_err();
        assert_eq!(err, PadreError::Division { row: 0, col: 0, value: 0.0 });
    }

    #[test]
    fn generic_rational_passes_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let num = PadreBlock::random(5, 3, 2, MixerKind::Conv1d { len: 3, banks: 1, padding: crate::mixer::Padding::Zero }, MixerKind::Dense, WMode::ChannelBroadcast, &mut rng).unwrap();
        let den = PadreBlock::random(5, 3, 2, MixerKind::Diagonal, MixerKind::LowRank { rank: 2 }, WMode::Full, &mut rng)
            .unwrap()
            .with_bias(Some(Tensor2::filled(5, 3, 2.0)))
            .unwrap();
        let r = RationalPadreBlock::new(num, Denominator::Cascade(den), DEFAULT_EPSILON, true).unwrap();
        let x = Tensor2::random_uniform(5, 3, 1.0, &mut rng);
        let check = gradcheck(&r, &x, 200, GRADCHECK_STEP, &mut rng).unwrap();
        assert!(check.max_rel_err < 1e-5, "{}", check.max_rel_err);
    }
}
