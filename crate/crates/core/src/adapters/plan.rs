//! A small dataflow IR built only from block primitives: structured linear
//! maps, Hadamard products, constant elementwise weights, weighted sums and
//! (for rational forms) elementwise division by normalizers.

use crate::error::{PadreError, Result};
use crate::flops::{FlopCategory, FlopLedger};
use crate::mixer::Mixer;
use crate::rect::RectOp;
use crate::tensor::{hadamard, Tensor2};

/// Below this magnitude a normalizer or divisor is treated as zero.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub enum Stage {
    Input,
    /// Token- or channel-side structured mixer.
    Mix { src: usize, mixer: Mixer<f64> },
    /// `left * S * right` with rectangular operators.
    Project {
        src: usize,
        left: Option<RectOp<f64>>,
        right: Option<RectOp<f64>>,
    },
    Hadamard { a: usize, b: usize },
    /// Elementwise product with a constant tensor (full combine weights).
    Scale { src: usize, weights: Tensor2<f64> },
    /// Per-channel first-order recurrence `H_t = decay_t ⊙ H_{t-1} + S_t`,
    /// a lower-triangular semiseparable token mixer.
    Scan { src: usize, decay: Tensor2<f64> },
    /// `Σ w_k S_k + bias`.
    Combine {
        terms: Vec<(usize, f64)>,
        bias: Option<Tensor2<f64>>,
    },
    /// Column l1 norms broadcast down each column.
    ColumnL1 { src: usize },
    Divide { num: usize, den: usize },
}

/// A sequence of stages; stage 0 is the input, the last stage is the output.
#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    label: String,
    stages: Vec<Stage>,
}

impl Plan {
    pub fn new(label: impl Into<String>) -> Self {
        Self {
            label: label.into(),
            stages: vec![Stage::Input],
        }
    }

    pub const INPUT: usize = 0;

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    /// Appends a stage and returns its index.
    pub fn push(&mut self, stage: Stage) -> usize {
        self.stages.push(stage);
        self.stages.len() - 1
    }

    pub fn mix(&mut self, src: usize, mixer: Mixer<f64>) -> usize {
        self.push(Stage::Mix { src, mixer })
    }

    pub fn hadamard(&mut self, a: usize, b: usize) -> usize {
        self.push(Stage::Hadamard { a, b })
    }

    /// True when no stage divides or normalizes, i.e. the plan is a polynomial.
    pub fn is_polynomial(&self) -> bool {
        !self.stages.iter().any(|s| matches!(s, Stage::ColumnL1 { .. } | Stage::Divide { .. }))
    }

    pub fn evaluate(&self, x: &Tensor2<f64>, ledger: &mut FlopLedger) -> Result<Tensor2<f64>> {
        let mut vals: Vec<Tensor2<f64>> = Vec::with_capacity(self.stages.len());
        for (idx, stage) in self.stages.iter().enumerate() {
            let get = |i: usize| -> Result<&Tensor2<f64>> {
                if i >= idx {
                    return Err(PadreError::Config(format!("stage {idx} reads a later stage {i}")));
                }
                Ok(&vals[i])
            };
            let v = match stage {
                Stage::Input => x.clone(),
                Stage::Mix { src, mixer } => mixer.apply(get(*src)?, ledger)?,
                Stage::Project { src, left, right } => {
                    let mut t = get(*src)?.clone();
                    if let Some(l) = left {
                        t = l.apply_left(&t, FlopCategory::TokenMix, ledger)?;
                    }
                    if let Some(r) = right {
                        t = r.apply_right(&t, FlopCategory::ChannelMix, ledger)?;
                    }
                    t
                }
                Stage::Hadamard { a, b } => hadamard(get(*a)?, get(*b)?, ledger)?,
                Stage::Scale { src, weights } => {
                    let s = get(*src)?;
                    ledger.add(FlopCategory::Combine, s.len() as u64);
                    s.zip_with(weights, "plan scale", |a, w| a * w)?
                }
                Stage::Scan { src, decay } => {
                    let s = get(*src)?;
                    s.check_same_shape(decay, "plan scan")?;
                    let mut h = s.clone();
                    for t in 1..h.rows() {
                        for c in 0..h.cols() {
                            let v = decay.get(t, c) * h.get(t - 1, c) + s.get(t, c);
                            h.set(t, c, v);
                        }
                    }
                    ledger.add(FlopCategory::TokenMix, s.len() as u64);
                    h
                }
                Stage::Combine { terms, bias } => {
                    let first = terms
                        .first()
                        .map(|&(i, _)| get(i).map(|t| t.shape()))
                        .transpose()?
                        .or_else(|| bias.as_ref().map(|b| b.shape()))
                        .ok_or_else(|| PadreError::Config("empty combine".into()))?;
                    let mut acc = bias.clone().unwrap_or_else(|| Tensor2::zeros(first.0, first.1));
                    for &(i, w) in terms {
                        acc.axpy(w, get(i)?)?;
                    }
                    ledger.add(FlopCategory::Combine, (terms.len() * acc.len()) as u64);
                    acc
                }
                Stage::ColumnL1 { src } => {
                    let s = get(*src)?;
                    let mut norms = vec![0.0; s.cols()];
                    for r in 0..s.rows() {
                        for (n, &v) in norms.iter_mut().zip(s.row(r)) {
                            *n += v.abs();
                        }
                    }
                    if let Some((column, &norm)) = norms.iter().enumerate().find(|(_, &n)| n <= NORM_EPS) {
                        return Err(PadreError::Normalization { column, norm });
                    }
                    ledger.add(FlopCategory::Normalize, s.len() as u64);
                    Tensor2::from_fn(s.rows(), s.cols(), |_, c| norms[c])
                }
                Stage::Divide { num, den } => {
                    let (a, b) = (get(*num)?, get(*den)?);
                    a.check_same_shape(b, "plan divide")?;
                    for r in 0..b.rows() {
                        for c in 0..b.cols() {
                            if b.get(r, c).abs() <= NORM_EPS {
                                return Err(PadreError::Division {
                                    row: r,
                                    col: c,
                                    value: b.get(r, c),
                                });
                            }
                        }
                    }
                    ledger.add(FlopCategory::Combine, a.len() as u64);
                    a.zip_with(b, "plan divide", |p, q| p / q)?
                }
            };
            vals.push(v);
        }
        Ok(vals.pop().expect("plan has an input stage"))
    }
}
