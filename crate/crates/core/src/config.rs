//! JSON block configuration.
//!
//! ```json
//! {"degree": 3, "N": 16, "D": 4, "layout": {"grid": {"height": 4, "width": 4}},
//!  "w_mode": "channel_broadcast", "degree_mask": [2, 3], "normalize_y": false, "seed": 7}
//! ```
//!
//! Blocks are built with shared 11-tap token convolutions and dense channel
//! mixers, all drawn from a generator seeded by `seed`.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::block::{default_layout, token_conv_kind, Layout, PadreBlock, WMode};
use crate::error::{PadreError, Result};
use crate::mixer::MixerKind;
use crate::multimodal::MultimodalBlock;
use crate::rational::{Denominator, RationalPadreBlock, DEFAULT_EPSILON};
use crate::scalar::Scalar;
use crate::tensor::Tensor2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockConfig {
    pub degree: usize,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "D")]
    pub d: usize,
    pub layout: Layout,
    #[serde(default)]
    pub w_mode: WMode,
    /// 1-based degrees kept in the combine; absent means all.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degree_mask: Option<Vec<usize>>,
    #[serde(default)]
    pub normalize_y: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rational: Option<RationalConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub multimodal: Option<MultimodalConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RationalConfig {
    pub num_degree: usize,
    pub den_degree: usize,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_true")]
    pub square_denominator: bool,
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

fn default_true() -> bool {
    true
}

/// Modes project onto the block's `N x D`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultimodalConfig {
    pub modes: Vec<ModeConfig>,
    /// Label strings such as `"aab"`.
    pub sequences: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeConfig {
    pub label: char,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "D")]
    pub d: usize,
}

impl BlockConfig {
    /// Full mask, channel-broadcast weights, square grids where possible.
    pub fn new(n: usize, d: usize, degree: usize) -> Self {
        Self {
            degree,
            n,
            d,
            layout: default_layout(n),
            w_mode: WMode::default(),
            degree_mask: None,
            normalize_y: false,
            seed: 0,
            rational: None,
            multimodal: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| PadreError::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.degree == 0 || self.n == 0 || self.d == 0 {
            return Err(PadreError::Config("degree, N and D must be positive".into()));
        }
        if let Layout::Grid { height, width } = self.layout {
            if height * width != self.n {
                return Err(PadreError::Layout(format!("grid {height}x{width} does not hold {} tokens", self.n)));
            }
        }
        if let Some(r) = &self.rational {
            if r.num_degree != self.degree {
                return Err(PadreError::Config(format!(
                    "rational num_degree {} differs from degree {}",
                    r.num_degree, self.degree
                )));
            }
            if !(r.epsilon >= 0.0 && r.epsilon.is_finite()) {
                return Err(PadreError::Config(format!("epsilon {} must be finite and non-negative", r.epsilon)));
            }
        }
        Ok(())
    }

    fn mask(&self) -> Vec<usize> {
        self.degree_mask.clone().unwrap_or_else(|| (1..=self.degree).collect())
    }

    fn cascade<T: Scalar>(&self, degree: usize, rng: &mut ChaCha8Rng) -> Result<PadreBlock<T>> {
        let token = token_conv_kind(self.n, self.layout)?;
        PadreBlock::random(self.n, self.d, degree, token, MixerKind::Dense, self.w_mode, rng)
    }

    pub fn build_block<T: Scalar>(&self) -> Result<PadreBlock<T>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        self.cascade(self.degree, &mut rng)?
            .with_degree_mask(self.mask())
            .map(|b| b.with_normalize_y(self.normalize_y))
    }

    /// Numerator as [`Self::build_block`]; a zero-degree denominator is the
    /// constant one, otherwise a cascade with unit bias.
    pub fn build_rational<T: Scalar>(&self) -> Result<RationalPadreBlock<T>> {
        let r = self
            .rational
            .as_ref()
            .ok_or_else(|| PadreError::Config("config has no rational section".into()))?;
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let num = self
            .cascade(self.degree, &mut rng)?
            .with_degree_mask(self.mask())?
            .with_normalize_y(self.normalize_y);
        let ones = Tensor2::ones(self.n, self.d);
        let den = match r.den_degree {
            0 => Denominator::Constant(ones),
            e => Denominator::Cascade(self.cascade(e, &mut rng)?.with_bias(Some(ones))?),
        };
        RationalPadreBlock::new(num, den, T::from_f64_lossy(r.epsilon), r.square_denominator)
    }

    pub fn build_multimodal<T: Scalar>(&self) -> Result<MultimodalBlock<T>> {
        let m = self
            .multimodal
            .as_ref()
            .ok_or_else(|| PadreError::Config("config has no multimodal section".into()))?;
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let modes: Vec<(char, usize, usize)> = m.modes.iter().map(|c| (c.label, c.n, c.d)).collect();
        let seqs: Vec<&str> = m.sequences.iter().map(String::as_str).collect();
        MultimodalBlock::random((self.n, self.d), &modes, &seqs, &mut rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_documented_example() {
        let cfg = BlockConfig::from_json(
            r#"{"degree": 3, "N": 16, "D": 4, "layout": {"grid": {"height": 4, "width": 4}},
                "w_mode": "channel_broadcast", "degree_mask": [2, 3], "normalize_y": false, "seed": 7}"#,
        )
        .unwrap();
        assert_eq!(cfg.layout, Layout::Grid { height: 4, width: 4 });
        let b: PadreBlock<f64> = cfg.build_block().unwrap();
        assert_eq!(b.degree_mask().iter().copied().collect::<Vec<_>>(), vec![2, 3]);
    }

    #[test]
    fn json_round_trip_and_determinism() {
        let mut cfg = BlockConfig::new(10, 3, 2);
        cfg.seed = 11;
        cfg.rational = Some(RationalConfig {
            num_degree: 2,
            den_degree: 1,
            epsilon: 1e-6,
            square_denominator: true,
        });
        let back = BlockConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(cfg, back);
        let a: RationalPadreBlock<f64> = cfg.build_rational().unwrap();
        let b: RationalPadreBlock<f64> = back.build_rational().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_layout_and_fields() {
        let err = BlockConfig::from_json(r#"{"degree": 2, "N": 10, "D": 2, "layout": {"grid": {"height": 3, "width": 3}}}"#);
        assert!(matches!(err, Err(PadreError::Layout(_))));
        let err = BlockConfig::from_json(r#"{"degree": 2, "N": 9, "D": 2, "layout": "seq1d", "heads": 4}"#);
        assert!(matches!(err, Err(PadreError::Config(_))));
    }

    #[test]
    fn multimodal_section() {
        let cfg = BlockConfig::from_json(
            r#"{"degree": 3, "N": 4, "D": 2, "layout": "seq1d",
                "multimodal": {"modes": [{"label": "a", "N": 5, "D": 3}, {"label": "b", "N": 2, "D": 2}],
                               "sequences": ["aab"]}}"#,
        )
        .unwrap();
        let m: MultimodalBlock<f64> = cfg.build_multimodal().unwrap();
        assert_eq!(m.shape(), (4, 2));
    }
}
