//! Convolutional modulation: `Z = DConv(X W_1) ⊙ (X W_2)`, with a depthwise
//! `k x k` convolution over the `H x W` token raster.

use rand::Rng;

use super::plan::{Plan, Stage};
use crate::error::{shape_err, PadreError, Result};
use crate::flops::{FlopCategory, FlopLedger};
use crate::mixer::{Mixer, Padding, Side};
use crate::tensor::Tensor2;

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2FormerParams {
    pub w1: Tensor2<f64>,
    pub w2: Tensor2<f64>,
    pub height: usize,
    pub width: usize,
    pub k: usize,
    /// One `k x k` kernel per channel, `channels x k x k` row-major.
    pub kernels: Vec<f64>,
}

impl Conv2FormerParams {
    pub fn new(w1: Tensor2<f64>, w2: Tensor2<f64>, height: usize, width: usize, k: usize, kernels: Vec<f64>) -> Result<Self> {
        let d = w1.rows();
        for (name, w) in [("conv2former w1", &w1), ("conv2former w2", &w2)] {
            if w.shape() != (d, d) {
                return Err(shape_err(name, format!("{d}x{d}"), format!("{}x{}", w.rows(), w.cols())));
            }
        }
        if kernels.len() != d * k * k {
            return Err(shape_err("conv2former kernels", (d * k * k).to_string(), kernels.len().to_string()));
        }
        Ok(Self {
            w1,
            w2,
            height,
            width,
            k,
            kernels,
        })
    }

    pub fn random<R: Rng + ?Sized>(height: usize, width: usize, d: usize, k: usize, rng: &mut R) -> Self {
        let hw = (3.0 / d as f64).sqrt();
        let kw = (3.0 / (k * k) as f64).sqrt();
        Self {
            w1: Tensor2::random_uniform(d, d, hw, rng),
            w2: Tensor2::random_uniform(d, d, hw, rng),
            height,
            width,
            k,
            kernels: (0..d * k * k).map(|_| rng.gen_range(-kw..=kw)).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn param_count(&self) -> usize {
        2 * self.dim() * self.dim() + self.kernels.len()
    }
}

pub fn conv2former_forward(p: &Conv2FormerParams, x: &Tensor2<f64>, ledger: &mut FlopLedger) -> Result<Tensor2<f64>> {
    let (n, d) = x.shape();
    if n != p.height * p.width {
        return Err(PadreError::Layout(format!(
            "raster {}x{} does not cover {n} tokens",
            p.height, p.width
        )));
    }
    if d != p.dim() {
        return Err(shape_err("conv2former input", format!("Nx{}", p.dim()), format!("{n}x{d}")));
    }
    let t = x.matmul(&p.w1)?;
    let v = x.matmul(&p.w2)?;
    ledger.add(FlopCategory::ChannelMix, (2 * n * d * d) as u64);
    let (h, w, k) = (p.height as isize, p.width as isize, p.k);
    let c = (k as isize - 1) / 2;
    let mut out = Tensor2::zeros(n, d);
    let mut macs = 0u64;
    for r in 0..h {
        for q in 0..w {
            for a in 0..k {
                let sr = r + a as isize - c;
                if sr < 0 || sr >= h {
                    continue;
                }
                for b in 0..k {
                    let sq = q + b as isize - c;
                    if sq < 0 || sq >= w {
                        continue;
                    }
                    let dst = (r * w + q) as usize;
                    let src = (sr * w + sq) as usize;
                    for ch in 0..d {
                        let tap = p.kernels[(ch * k + a) * k + b];
                        out.set(dst, ch, out.get(dst, ch) + tap * t.get(src, ch));
                    }
                    macs += d as u64;
                }
            }
        }
    }
    ledger.add(FlopCategory::TokenMix, macs);
    ledger.add(FlopCategory::Hadamard, (n * d) as u64);
    out.zip_with(&v, "conv2former gate", |a, b| a * b)
}

/// `Y_1 = DConv(X W_1)`, `Y_2 = X W_2`, output `Z_2 = Y_1 ⊙ Y_2` alone.
pub fn conv2former_as_padre(p: &Conv2FormerParams) -> Result<Plan> {
    let mut plan = Plan::new("conv2former");
    let t = plan.mix(Plan::INPUT, Mixer::dense(Side::Channel, p.w1.clone())?);
    let conv = Mixer::conv2d_banked(
        Side::Token,
        p.height,
        p.width,
        p.k,
        p.k,
        p.kernels.clone(),
        Padding::Zero,
    )?;
    let y1 = plan.mix(t, conv);
    let y2 = plan.mix(Plan::INPUT, Mixer::dense(Side::Channel, p.w2.clone())?);
    let z2 = plan.hadamard(y1, y2);
    plan.push(Stage::Combine {
        terms: vec![(z2, 1.0)],
        bias: None,
    });
    Ok(plan)
}
