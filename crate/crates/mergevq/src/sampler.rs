//! Merge-ratio sampling: discrete exponential and truncated discrete
//! Gaussian distributions over a token-count offset `T`, and the
//! version-specific mappings from offsets to kept-token counts (always
//! perfect squares).

use std::ops::RangeInclusive;

use crate::error::{input_err, Result};
use crate::numerics::RandomStream;

/// Distribution family over the offset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SamplerKind {
    /// `P(T = k) ∝ exp(-lambda k)` for `k >= 0`, truncated to the support
    /// and renormalized.
    Exponential { lambda: f64 },
    /// `P(T = k) ∝ exp(-(k - mu)^2 / (2 sigma^2))` over the finite support.
    Gaussian { mu: f64, sigma: f64 },
}

/// Offset-to-kept-count mapping per tokenizer version.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeptMapping {
    /// Representation version: `(6 + T)^2`.
    R,
    /// Generation + representation version: `(12 + T)^2`.
    GPlusR,
    /// Generation version: `(base ± T)^2` with a configurable base and
    /// direction.
    G { base: i64, positive: bool },
}

impl KeptMapping {
    fn side(&self, t: i64) -> i64 {
        match *self {
            KeptMapping::R => 6 + t,
            KeptMapping::GPlusR => 12 + t,
            KeptMapping::G { base, positive } => {
                if positive {
                    base + t
                } else {
                    base - t
                }
            }
        }
    }
}

/// A merge-ratio sampler: distribution kind, version mapping, and the
/// truncated offset support.
#[derive(Debug, Clone)]
pub struct MergeRatioSampler {
    kind: SamplerKind,
    mapping: KeptMapping,
    support: RangeInclusive<i64>,
    kept_range: (usize, usize),
}

impl MergeRatioSampler {
    pub fn new(
        kind: SamplerKind,
        mapping: KeptMapping,
        support: RangeInclusive<i64>,
    ) -> Result<Self> {
        let (lo, hi) = (*support.start(), *support.end());
        if lo > hi {
            return input_err("merge_ratio_sampler", "empty support");
        }
        match kind {
            SamplerKind::Exponential { lambda } => {
                if !(lambda > 0.0) {
                    return input_err("merge_ratio_sampler", "lambda must be positive");
                }
                if lo < 0 {
                    return input_err(
                        "merge_ratio_sampler",
                        "exponential offsets are defined for T >= 0",
                    );
                }
            }
            SamplerKind::Gaussian { sigma, .. } => {
                if !(sigma > 0.0) {
                    return input_err("merge_ratio_sampler", "sigma must be positive");
                }
            }
        }
        let mut kept_min = usize::MAX;
        let mut kept_max = 0usize;
        for t in lo..=hi {
            let side = mapping.side(t);
            if side <= 0 {
                return input_err(
                    "merge_ratio_sampler",
                    format!("offset {t} maps to non-positive square root {side}"),
                );
            }
            let kept = (side * side) as usize;
            kept_min = kept_min.min(kept);
            kept_max = kept_max.max(kept);
        }
        Ok(MergeRatioSampler {
            kind,
            mapping,
            support,
            kept_range: (kept_min, kept_max),
        })
    }

    /// Representation version, stage 1: exponential offsets over kept
    /// counts `[36, 100]`.
    pub fn version_r() -> Self {
        Self::new(SamplerKind::Exponential { lambda: 1.0 }, KeptMapping::R, 0..=4).unwrap()
    }

    /// G+R version, stage 1: Gaussian offsets over kept counts `[121, 225]`.
    pub fn version_gr_stage1() -> Self {
        Self::new(
            SamplerKind::Gaussian { mu: 0.0, sigma: 1.0 },
            KeptMapping::GPlusR,
            -1..=3,
        )
        .unwrap()
    }

    /// G+R version, stage 2: Gaussian offsets over kept counts `[144, 256]`.
    pub fn version_gr_stage2() -> Self {
        Self::new(
            SamplerKind::Gaussian { mu: 0.0, sigma: 1.0 },
            KeptMapping::GPlusR,
            0..=4,
        )
        .unwrap()
    }

    /// Generation version with exponential offsets, kept counts
    /// `[256, 1024]`.
    pub fn version_g_exponential() -> Self {
        Self::new(
            SamplerKind::Exponential { lambda: 1.0 },
            KeptMapping::G { base: 16, positive: true },
            0..=16,
        )
        .unwrap()
    }

    /// Generation version with Gaussian offsets, kept counts `[225, 400]`.
    pub fn version_g_gaussian() -> Self {
        Self::new(
            SamplerKind::Gaussian { mu: 0.0, sigma: 1.0 },
            KeptMapping::G { base: 15, positive: true },
            0..=5,
        )
        .unwrap()
    }

    pub fn kind(&self) -> SamplerKind {
        self.kind
    }

    pub fn mapping(&self) -> KeptMapping {
        self.mapping
    }

    pub fn support(&self) -> RangeInclusive<i64> {
        self.support.clone()
    }

    /// Kept-count range implied by the support.
    pub fn kept_range(&self) -> (usize, usize) {
        self.kept_range
    }

    fn weight(&self, t: i64) -> f64 {
        match self.kind {
            SamplerKind::Exponential { lambda } => (-lambda * t as f64).exp(),
            SamplerKind::Gaussian { mu, sigma } => {
                let d = t as f64 - mu;
                (-d * d / (2.0 * sigma * sigma)).exp()
            }
        }
    }

    /// Exact normalized probabilities over the truncated support; the
    /// column sums to 1 within 1e-9.
    pub fn distribution_table(&self) -> Vec<(i64, f64)> {
        let ts: Vec<i64> = self.support.clone().collect();
        let total: f64 = ts.iter().map(|&t| self.weight(t)).sum();
        ts.into_iter().map(|t| (t, self.weight(t) / total)).collect()
    }

    /// Inverse-CDF draw from the truncated distribution.
    pub fn sample_offset(&self, rng: &mut RandomStream) -> i64 {
        let table = self.distribution_table();
        let u = rng.next_f64();
        let mut cum = 0.0;
        for &(t, p) in &table {
            cum += p;
            if u < cum {
                return t;
            }
        }
        table.last().map(|&(t, _)| t).unwrap()
    }

    /// Kept-token count for an offset; offsets outside the support (or
    /// results outside the configured range) are rejected with the range
    /// reported.
    pub fn kept_tokens(&self, t: i64) -> Result<usize> {
        if !self.support.contains(&t) {
            return input_err(
                "kept_tokens",
                format!(
                    "offset {t} outside support [{}, {}] (kept range [{}, {}])",
                    self.support.start(),
                    self.support.end(),
                    self.kept_range.0,
                    self.kept_range.1
                ),
            );
        }
        let side = self.mapping.side(t);
        let kept = (side * side) as usize;
        if kept < self.kept_range.0 || kept > self.kept_range.1 {
            return input_err(
                "kept_tokens",
                format!(
                    "kept count {kept} outside configured range [{}, {}]",
                    self.kept_range.0, self.kept_range.1
                ),
            );
        }
        Ok(kept)
    }

    /// Samples an offset and maps it to a kept count.
    pub fn sample_kept(&self, rng: &mut RandomStream) -> usize {
        let t = self.sample_offset(rng);
        self.kept_tokens(t).expect("sampled offset is in support")
    }
}

/// Total-variation distance between two distributions over the same support.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}
