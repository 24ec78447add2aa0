//! Cross-modal blocks: each mode is projected onto a common `N' x D'` shape
//! per degree, and Hadamard cascades pick which mode feeds each factor
//! according to a label sequence such as `"aab"`.

use std::collections::BTreeMap;

use rand::Rng;

use crate::block::{random_weights, CombineWeights, WMode};
use crate::error::{PadreError, Result};
use crate::flops::{FlopCategory, FlopLedger};
use crate::mixer::{Mixer, MixerKind, Side};
use crate::rect::RectOp;
use crate::scalar::Scalar;
use crate::tensor::{ensure_finite, hadamard, Tensor2};

/// One input mode and its per-degree projections `Y_i = P_i X Q_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mode<T> {
    pub label: char,
    pub n: usize,
    pub d: usize,
    /// `N' x n` token projections, one per degree.
    pub left: Vec<RectOp<T>>,
    /// `d x D'` channel projections, one per degree.
    pub right: Vec<RectOp<T>>,
}

/// A label sequence with its own inter-degree mixers and combine weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeSequence<T> {
    labels: Vec<char>,
    c: Vec<Mixer<T>>,
    dm: Vec<Mixer<T>>,
    w: CombineWeights<T>,
    mask: Vec<usize>,
}

impl<T: Scalar> ModeSequence<T> {
    pub fn labels(&self) -> &[char] {
        &self.labels
    }

    pub fn degree(&self) -> usize {
        self.labels.len()
    }

    /// Occurrences of `label` in the sequence.
    pub fn count(&self, label: char) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalBlock<T> {
    n: usize,
    d: usize,
    modes: Vec<Mode<T>>,
    sequences: Vec<ModeSequence<T>>,
    bias: Option<Tensor2<T>>,
}

impl<T: Scalar> MultimodalBlock<T> {
    pub fn new(n: usize, d: usize, modes: Vec<Mode<T>>, sequences: Vec<ModeSequence<T>>, bias: Option<Tensor2<T>>) -> Result<Self> {
        if modes.is_empty() || sequences.is_empty() {
            return Err(PadreError::Config("need at least one mode and one sequence".into()));
        }
        for (i, m) in modes.iter().enumerate() {
            if modes[..i].iter().any(|o| o.label == m.label) {
                return Err(PadreError::Config(format!("mode `{}` registered twice", m.label)));
            }
            if m.left.len() != m.right.len() {
                return Err(PadreError::Config(format!("mode `{}` has mismatched projection banks", m.label)));
            }
            for (l, r) in m.left.iter().zip(&m.right) {
                if (l.rows(), l.cols(), r.rows(), r.cols()) != (n, m.n, m.d, d) {
                    return Err(PadreError::Config(format!(
                        "mode `{}` projections must map {}x{} onto {n}x{d}",
                        m.label, m.n, m.d
                    )));
                }
            }
        }
        for s in &sequences {
            if s.labels.is_empty() {
                return Err(PadreError::Config("empty mode sequence".into()));
            }
            for (i, &label) in s.labels.iter().enumerate() {
                let mode = modes
                    .iter()
                    .find(|m| m.label == label)
                    .ok_or_else(|| PadreError::Config(format!("sequence uses unregistered mode `{label}`")))?;
                if mode.left.len() <= i {
                    return Err(PadreError::Config(format!("mode `{label}` has no projection for degree {}", i + 1)));
                }
            }
            if modes.len() > 1 && s.labels.iter().all(|&l| l == s.labels[0]) {
                let seq: String = s.labels.iter().collect();
                return Err(PadreError::Config(format!("sequence `{seq}` has no cross-mode terms")));
            }
            let deg = s.labels.len();
            if s.c.len() != deg - 1 || s.dm.len() != deg - 1 {
                return Err(PadreError::Config("sequence needs one inter-degree mixer pair per step".into()));
            }
            if s.c.iter().any(|m| m.side() != Side::Token || m.dim() != n) || s.dm.iter().any(|m| m.side() != Side::Channel || m.dim() != d) {
                return Err(PadreError::Config("inter-degree mixers must act on the common shape".into()));
            }
            if s.mask.is_empty() || s.mask.iter().any(|&j| j == 0 || j > deg) {
                return Err(PadreError::Config(format!("sequence mask must be a non-empty subset of 1..={deg}")));
            }
        }
        if let Some(l) = &bias {
            if l.shape() != (n, d) {
                return Err(PadreError::Config(format!("bias must be {n}x{d}")));
            }
        }
        Ok(Self {
            n,
            d,
            modes,
            sequences,
            bias,
        })
    }

    /// Dense random projections and mixers; every sequence uses its full mask.
    pub fn random<R: Rng + ?Sized>(
        target: (usize, usize),
        modes: &[(char, usize, usize)],
        sequences: &[&str],
        rng: &mut R,
    ) -> Result<Self> {
        let (n, d) = target;
        let max_deg = sequences.iter().map(|s| s.chars().count()).max().unwrap_or(0);
        let modes = modes
            .iter()
            .map(|&(label, mn, md)| Mode {
                label,
                n: mn,
                d: md,
                left: (0..max_deg).map(|_| RectOp::random_dense(n, mn, rng)).collect(),
                right: (0..max_deg).map(|_| RectOp::random_dense(md, d, rng)).collect(),
            })
            .collect();
        let sequences = sequences
            .iter()
            .map(|s| {
                let labels: Vec<char> = s.chars().collect();
                let deg = labels.len();
                Ok(ModeSequence {
                    c: (1..deg).map(|_| Mixer::random(Side::Token, n, MixerKind::Dense, rng)).collect::<Result<_>>()?,
                    dm: (1..deg).map(|_| Mixer::random(Side::Channel, d, MixerKind::Dense, rng)).collect::<Result<_>>()?,
                    w: random_weights(WMode::ChannelBroadcast, n, d, deg, rng),
                    mask: (1..=deg).collect(),
                    labels,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(n, d, modes, sequences, None)
    }

    pub fn sequence(labels: &str, c: Vec<Mixer<T>>, dm: Vec<Mixer<T>>, w: CombineWeights<T>, mask: Vec<usize>) -> ModeSequence<T> {
        ModeSequence {
            labels: labels.chars().collect(),
            c,
            dm,
            w,
            mask,
        }
    }

    pub fn modes(&self) -> &[Mode<T>] {
        &self.modes
    }

    pub fn sequences(&self) -> &[ModeSequence<T>] {
        &self.sequences
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n, self.d)
    }

    /// Cascade taps `Z_1 .. Z_len` for every sequence.
    pub fn taps(&self, inputs: &BTreeMap<char, Tensor2<T>>, ledger: &mut FlopLedger) -> Result<Vec<Vec<Tensor2<T>>>> {
        let mut features: BTreeMap<(char, usize), Tensor2<T>> = BTreeMap::new();
        let mut out = Vec::with_capacity(self.sequences.len());
        for s in &self.sequences {
            let mut z: Vec<Tensor2<T>> = Vec::with_capacity(s.labels.len());
            for (i, &label) in s.labels.iter().enumerate() {
                if !features.contains_key(&(label, i)) {
                    let f = self.feature(label, i, inputs, ledger)?;
                    features.insert((label, i), f);
                }
                let y = &features[&(label, i)];
                let zi = if i == 0 {
                    y.clone()
                } else {
                    let c = s.c[i - 1].apply(&z[i - 1], ledger)?;
                    let m = s.dm[i - 1].apply(&c, ledger)?;
                    hadamard(&m, y, ledger)?
                };
                ensure_finite(&zi, format!("Z{}", i + 1))?;
                z.push(zi);
            }
            out.push(z);
        }
        Ok(out)
    }

    fn feature(&self, label: char, i: usize, inputs: &BTreeMap<char, Tensor2<T>>, ledger: &mut FlopLedger) -> Result<Tensor2<T>> {
        let mode = self.modes.iter().find(|m| m.label == label).expect("validated label");
        let x = inputs.get(&label).ok_or_else(|| PadreError::MissingMode(label.to_string()))?;
        if x.shape() != (mode.n, mode.d) {
            return Err(crate::error::shape_err(
                "multimodal_forward",
                format!("mode `{label}` input {}x{}", mode.n, mode.d),
                format!("{}x{}", x.rows(), x.cols()),
            ));
        }
        let t = mode.left[i].apply_left(x, FlopCategory::TokenMix, ledger)?;
        let y = mode.right[i].apply_right(&t, FlopCategory::ChannelMix, ledger)?;
        ensure_finite(&y, format!("Y{}({label})", i + 1))?;
        Ok(y)
    }

    pub fn forward(&self, inputs: &BTreeMap<char, Tensor2<T>>, ledger: &mut FlopLedger) -> Result<Tensor2<T>> {
        for m in &self.modes {
            if !inputs.contains_key(&m.label) {
                return Err(PadreError::MissingMode(m.label.to_string()));
            }
        }
        let taps = self.taps(inputs, ledger)?;
        let mut p = self.bias.clone().unwrap_or_else(|| Tensor2::zeros(self.n, self.d));
        let mut terms = u64::from(self.bias.is_some());
        for (s, z) in self.sequences.iter().zip(&taps) {
            for &j in &s.mask {
                for m in 0..self.n {
                    for k in 0..self.d {
                        let v = p.get(m, k) + s.w.get(m, k, self.d, j - 1) * z[j - 1].get(m, k);
                        p.set(m, k, v);
                    }
                }
                terms += 1;
            }
        }
        ledger.add(FlopCategory::Combine, terms * (self.n * self.d) as u64);
        ensure_finite(&p, "P")?;
        Ok(p)
    }
}

/// Free-function form of [`MultimodalBlock::forward`].
pub fn multimodal_forward<T: Scalar>(
    block: &MultimodalBlock<T>,
    inputs: &BTreeMap<char, Tensor2<T>>,
    ledger: &mut FlopLedger,
) -> Result<Tensor2<T>> {
    block.forward(inputs, ledger)
}
