//! Multiply-accumulate accounting.
//!
//! One multiply-add (MAC) counts as 2 FLOPs. Elementwise nonlinear ops
//! (exp, division, square root) are booked as one MAC each.

use std::fmt;

/// Ledger category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FlopCategory {
    TokenMix,
    ChannelMix,
    Hadamard,
    Combine,
    Resize,
    Normalize,
}

impl FlopCategory {
    pub const ALL: [FlopCategory; 6] = [
        FlopCategory::TokenMix,
        FlopCategory::ChannelMix,
        FlopCategory::Hadamard,
        FlopCategory::Combine,
        FlopCategory::Resize,
        FlopCategory::Normalize,
    ];

    fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            FlopCategory::TokenMix => "token-mix",
            FlopCategory::ChannelMix => "channel-mix",
            FlopCategory::Hadamard => "hadamard",
            FlopCategory::Combine => "combine",
            FlopCategory::Resize => "resize",
            FlopCategory::Normalize => "normalize",
        }
    }
}

/// Per-thread MAC counter with a per-category breakdown.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FlopLedger {
    macs: [u64; 6],
}

impl FlopLedger {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, category: FlopCategory, macs: u64) {
        self.macs[category.index()] += macs;
    }

    pub fn category_macs(&self, category: FlopCategory) -> u64 {
        self.macs[category.index()]
    }

    /// Total multiply-accumulates; always the sum of the categories.
    pub fn macs(&self) -> u64 {
        self.macs.iter().sum()
    }

    pub fn flops(&self) -> u64 {
        2 * self.macs()
    }

    pub fn merge(&mut self, other: &FlopLedger) {
        for (a, b) in self.macs.iter_mut().zip(other.macs.iter()) {
            *a += b;
        }
    }

    pub fn reset(&mut self) {
        self.macs = [0; 6];
    }
}

impl fmt::Display for FlopLedger {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} FLOPs", self.flops())?;
        for cat in FlopCategory::ALL {
            let m = self.category_macs(cat);
            if m > 0 {
                write!(f, " {}={}", cat.name(), 2 * m)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn total_is_sum_of_categories() {
        let mut l = FlopLedger::new();
        l.add(FlopCategory::TokenMix, 10);
        l.add(FlopCategory::Hadamard, 5);
        l.add(FlopCategory::Resize, 1);
        let sum: u64 = FlopCategory::ALL.iter().map(|c| l.category_macs(*c)).sum();
        assert_eq!(l.macs(), sum);
        assert_eq!(l.flops(), 32);
    }

    #[test]
    fn merge_adds_elementwise() {
        let mut a = FlopLedger::new();
        a.add(FlopCategory::Combine, 3);
        let mut b = FlopLedger::new();
        b.add(FlopCategory::Combine, 4);
        b.add(FlopCategory::Normalize, 1);
        a.merge(&b);
        assert_eq!(a.category_macs(FlopCategory::Combine), 7);
        assert_eq!(a.macs(), 8);
    }
}
