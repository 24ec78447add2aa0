//! Polynomial attention replacement blocks.
//!
//! A block maps an `N x D` input to an `N x D` output whose entries are
//! polynomials (or ratios of polynomials) of the input entries, using only
//! structured linear mixers and elementwise products so that cost stays
//! linear in `N`.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the verification precision (`f64`).

pub mod adapters;
pub mod bench;
pub mod block;
pub mod config;
pub mod container;
pub mod error;
pub mod flops;
pub mod grad;
pub mod mixer;
pub mod multimodal;
pub mod oracle;
pub mod rational;
pub mod rect;
pub mod scalar;
pub mod tensor;
pub mod verify;

pub use bench::{fit_scaling, run_bench, BenchConfig, BenchRecord, ScalingFit, Scheme};
pub use block::{build_reference_instance, normalize_y, CombineWeights, Layout, PadreBlock, PadreTrace, WMode};
pub use config::BlockConfig;
pub use container::Container;
pub use error::{PadreError, Result};
pub use flops::{FlopCategory, FlopLedger};
pub use grad::{backward, gradcheck, GradBundle, GradReport};
pub use mixer::{Mixer, MixerKind, Padding, Side};
pub use multimodal::{Mode, ModeSequence, MultimodalBlock};
pub use oracle::{assert_homogeneous, extract_coeffs, max_effective_degree, MultiIndex, PolyCoeffs};
pub use rational::{Denominator, RationalPadreBlock};
pub use rect::{RectKind, RectOp};
pub use scalar::Scalar;
pub use tensor::{hadamard, rel_err, Tensor2};

pub type Tensor = Tensor2<f64>;
pub type Tensor32 = Tensor2<f32>;
pub type Block = PadreBlock<f64>;
pub type Block32 = PadreBlock<f32>;
pub type RationalBlock = RationalPadreBlock<f64>;
