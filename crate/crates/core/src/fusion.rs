//! Combining two confidence vectors into one.
//!
//! `a` is conventionally the generative score and `b` the discriminative
//! one, so the disagreement `d = b - a` is positive when the model rates a
//! claim higher than its samples support it.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration;
use crate::corpus::{AtomicClaim, ClaimConfidence, Method};

#[derive(Debug, Error, PartialEq)]
pub enum FusionError {
    #[error("confidence {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("invalid fusion config: {0}")]
    Config(String),
    #[error("claim ids differ between vectors: {0:?}")]
    Mismatch(Vec<String>),
    #[error("duplicate claim id {0}")]
    Duplicate(String),
    #[error("empty validation set")]
    EmptyValidation,
    #[error("empty alpha grid")]
    EmptyGrid,
    #[error(transparent)]
    Metric(#[from] calibration::MetricError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Wavg,
    AdjustedAlpha,
    DampedFusion,
    MinConf,
    Hmean,
    ProdConf,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::Wavg,
        Strategy::AdjustedAlpha,
        Strategy::DampedFusion,
        Strategy::MinConf,
        Strategy::Hmean,
        Strategy::ProdConf,
    ];
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Wavg => "wavg",
            Strategy::AdjustedAlpha => "adjusted_alpha",
            Strategy::DampedFusion => "damped_fusion",
            Strategy::MinConf => "min_conf",
            Strategy::Hmean => "hmean",
            Strategy::ProdConf => "prod_conf",
        })
    }
}

impl FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        Strategy::ALL
            .into_iter()
            .find(|st| st.to_string() == norm)
            .ok_or_else(|| format!("unknown fusion strategy {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub strategy: Strategy,
    /// Weight on `a`.
    pub alpha: f64,
    pub gamma_a: f64,
    pub k: f64,
}

impl FusionConfig {
    pub fn new(strategy: Strategy) -> Self {
        FusionConfig {
            strategy,
            alpha: 0.5,
            gamma_a: 0.1,
            k: 0.02,
        }
    }

    pub fn validate(&self) -> Result<(), FusionError> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(FusionError::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !self.gamma_a.is_finite() || self.gamma_a < 0.0 {
            return Err(FusionError::Config(format!("gamma_a {} must be >= 0", self.gamma_a)));
        }
        if !(0.0..=1.0).contains(&self.k) {
            return Err(FusionError::Config(format!("k {} outside [0, 1]", self.k)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionInput {
    pub a: f64,
    pub b: f64,
}

impl FusionInput {
    pub fn new(a: f64, b: f64) -> Result<Self, FusionError> {
        for v in [a, b] {
            if !(0.0..=1.0).contains(&v) {
                return Err(FusionError::OutOfRange(v));
            }
        }
        Ok(FusionInput { a, b })
    }

    /// Disagreement `b - a`.
    pub fn d(&self) -> f64 {
        self.b - self.a
    }
}

fn wavg(a: f64, b: f64, alpha: f64) -> f64 {
    a * alpha + b * (1.0 - alpha)
}

/// Fuses one pair. The result is always in [0, 1].
///
/// Validation of `cfg` is left to the caller ([`FusionConfig::validate`]);
/// [`fuse_vectors`] does it once per call.
pub fn fuse_one(input: FusionInput, cfg: &FusionConfig) -> f64 {
    let FusionInput { a, b } = input;
    let d = input.d();
    let v = match cfg.strategy {
        Strategy::Wavg => wavg(a, b, cfg.alpha),
        Strategy::AdjustedAlpha => {
            let alpha = (cfg.alpha + cfg.gamma_a * d).clamp(0.0, 1.0);
            wavg(a, b, alpha)
        }
        Strategy::DampedFusion => wavg(a, b, cfg.alpha) * (1.0 - cfg.k * d.abs()),
        Strategy::MinConf => a.min(b),
        Strategy::Hmean => {
            if a + b == 0.0 {
                0.0
            } else {
                2.0 * a * b / (a + b)
            }
        }
        Strategy::ProdConf => a * b,
    };
    v.clamp(0.0, 1.0)
}

fn index(v: &[ClaimConfidence]) -> Result<BTreeMap<&str, f64>, FusionError> {
    let mut m = BTreeMap::new();
    for c in v {
        if m.insert(c.claim_id.as_str(), c.score).is_some() {
            return Err(FusionError::Duplicate(c.claim_id.clone()));
        }
    }
    Ok(m)
}

/// Joins on claim id and fuses each pair. Output follows `va`'s order.
pub fn fuse_vectors(
    va: &[ClaimConfidence],
    vb: &[ClaimConfidence],
    cfg: &FusionConfig,
) -> Result<Vec<ClaimConfidence>, FusionError> {
    cfg.validate()?;
    let ia = index(va)?;
    let ib = index(vb)?;
    let ka: BTreeSet<&str> = ia.keys().copied().collect();
    let kb: BTreeSet<&str> = ib.keys().copied().collect();
    let diff: Vec<String> = ka.symmetric_difference(&kb).map(|s| s.to_string()).collect();
    if !diff.is_empty() {
        return Err(FusionError::Mismatch(diff));
    }
    va.iter()
        .map(|c| {
            let input = FusionInput::new(c.score, ib[c.claim_id.as_str()])?;
            Ok(ClaimConfidence {
                claim_id: c.claim_id.clone(),
                method: Method::Fused(cfg.strategy),
                score: fuse_one(input, cfg),
            })
        })
        .collect()
}

/// Picks the grid value of alpha whose WAvg fusion has the lowest ECE on
/// labeled validation claims. Ties (within 1e-12) go to the smaller alpha.
pub fn tune_alpha(
    validation: &[AtomicClaim],
    va: &[ClaimConfidence],
    vb: &[ClaimConfidence],
    grid: &[f64],
    bins: usize,
) -> Result<f64, FusionError> {
    if grid.is_empty() {
        return Err(FusionError::EmptyGrid);
    }
    let ia = index(va)?;
    let ib = index(vb)?;
    let mut rows = Vec::new();
    for c in validation {
        let Some(label) = c.label else { continue };
        match (ia.get(c.claim_id.as_str()), ib.get(c.claim_id.as_str())) {
            (Some(&a), Some(&b)) => rows.push((FusionInput::new(a, b)?, f64::from(label))),
            _ => return Err(FusionError::Mismatch(vec![c.claim_id.clone()])),
        }
    }
    if rows.is_empty() {
        return Err(FusionError::EmptyValidation);
    }
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut best: Option<(f64, f64)> = None;
    for alpha in sorted {
        let cfg = FusionConfig {
            alpha,
            ..FusionConfig::new(Strategy::Wavg)
        };
        cfg.validate()?;
        let pairs: Vec<(f64, f64)> = rows.iter().map(|(inp, y)| (fuse_one(*inp, &cfg), *y)).collect();
        let (e, _) = calibration::ece(&pairs, bins)?;
        if best.is_none_or(|(_, be)| e < be - 1e-12) {
            best = Some((alpha, e));
        }
    }
    Ok(best.expect("non-empty grid").0)
}

#[cfg(test)]
mod tests {
    use super::Strategy;
    use super::*;
    use proptest::prelude::*;

    fn fuse(strategy: Strategy, a: f64, b: f64) -> f64 {
        fuse_one(FusionInput::new(a, b).unwrap(), &FusionConfig::new(strategy))
    }

    #[test]
    fn worked_examples() {
        assert_eq!(fuse(Strategy::Wavg, 0.4, 0.6), 0.5);
        assert!((fuse(Strategy::AdjustedAlpha, 0.4, 0.6) - 0.496).abs() < 1e-15);
        assert!((fuse(Strategy::DampedFusion, 0.0, 1.0) - 0.49).abs() < 1e-15);
        assert_eq!(fuse(Strategy::Hmean, 0.0, 0.7), 0.0);
        assert_eq!(fuse(Strategy::Hmean, 0.0, 0.0), 0.0);
        assert_eq!(fuse(Strategy::MinConf, 0.3, 0.7), 0.3);
        assert!((fuse(Strategy::ProdConf, 0.5, 0.5) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn adjusted_alpha_is_clamped() {
        let cfg = FusionConfig {
            alpha: 1.0,
            gamma_a: 0.5,
            ..FusionConfig::new(Strategy::AdjustedAlpha)
        };
        // alpha' = 1.5 would extrapolate past a; clamped it is exactly a.
        assert_eq!(fuse_one(FusionInput::new(0.0, 1.0).unwrap(), &cfg), 0.0);
    }

    #[test]
    fn rejects_out_of_range_inputs_and_config() {
        assert!(FusionInput::new(1.1, 0.5).is_err());
        let bad = FusionConfig {
            alpha: 1.5,
            ..FusionConfig::new(Strategy::Wavg)
        };
        assert!(bad.validate().is_err());
        assert!(FusionConfig {
            k: -0.1,
            ..FusionConfig::new(Strategy::Wavg)
        }
        .validate()
        .is_err());
    }

    fn conf(id: &str, score: f64, method: Method) -> ClaimConfidence {
        ClaimConfidence {
            claim_id: id.into(),
            method,
            score,
        }
    }

    #[test]
    fn vectors_join_on_id() {
        let va = vec![
            conf("c1", 0.2, Method::GenBinary),
            conf("c2", 0.4, Method::GenBinary),
            conf("c3", 1.0, Method::GenBinary),
        ];
        let vb = vec![
            conf("c3", 0.0, Method::DisRating),
            conf("c1", 0.6, Method::DisRating),
            conf("c2", 0.4, Method::DisRating),
        ];
        let out = fuse_vectors(&va, &vb, &FusionConfig::new(Strategy::Wavg)).unwrap();
        assert_eq!(out.len(), 3);
        assert_eq!(out[0].method.to_string(), "fused:wavg");
        assert!((out[0].score - 0.4).abs() < 1e-15);
        assert_eq!(out[2].score, 0.5);
    }

    #[test]
    fn vectors_mismatch_lists_difference() {
        let va = vec![conf("c1", 0.2, Method::GenBinary), conf("c2", 0.2, Method::GenBinary)];
        let vb = vec![conf("c1", 0.2, Method::DisRating), conf("c9", 0.2, Method::DisRating)];
        assert_eq!(
            fuse_vectors(&va, &vb, &FusionConfig::new(Strategy::Wavg)),
            Err(FusionError::Mismatch(vec!["c2".into(), "c9".into()]))
        );
    }

    fn labeled(n: usize, labels: &[u8]) -> Vec<AtomicClaim> {
        (0..n)
            .map(|i| {
                let mut c = AtomicClaim::new("q", 0, i as u32, "x");
                c.label = Some(labels[i]);
                c
            })
            .collect()
    }

    #[test]
    fn tune_single_point_and_ties() {
        let claims = labeled(2, &[1, 0]);
        let va: Vec<_> = claims
            .iter()
            .map(|c| conf(&c.claim_id, 0.5, Method::GenBinary))
            .collect();
        let vb: Vec<_> = claims
            .iter()
            .map(|c| conf(&c.claim_id, 0.5, Method::DisRating))
            .collect();
        assert_eq!(tune_alpha(&claims, &va, &vb, &[0.7], 10).unwrap(), 0.7);
        // a == b: every alpha gives the same ECE, so the smallest wins.
        assert_eq!(tune_alpha(&claims, &va, &vb, &[0.9, 0.3, 0.6], 10).unwrap(), 0.3);
        assert_eq!(tune_alpha(&claims, &va, &vb, &[], 10), Err(FusionError::EmptyGrid));
        let unlabeled = vec![AtomicClaim::new("q", 0, 0, "x")];
        assert_eq!(
            tune_alpha(&unlabeled, &va, &vb, &[0.5], 10),
            Err(FusionError::EmptyValidation)
        );
    }

    proptest! {
        #[test]
        fn identities(a in 0.0f64..=1.0, b in 0.0f64..=1.0, alpha in 0.0f64..=1.0) {
            let input = FusionInput::new(a, b).unwrap();
            let base = FusionConfig { alpha, ..FusionConfig::new(Strategy::Wavg) };
            let w = fuse_one(input, &base);
            let adj = fuse_one(input, &FusionConfig { strategy: Strategy::AdjustedAlpha, gamma_a: 0.0, ..base });
            let damp = fuse_one(input, &FusionConfig { strategy: Strategy::DampedFusion, k: 0.0, ..base });
            prop_assert_eq!(adj, w);
            prop_assert_eq!(damp, w);
            prop_assert!(w >= a.min(b) - 1e-15 && w <= a.max(b) + 1e-15);
            for s in Strategy::ALL {
                let v = fuse_one(input, &FusionConfig { strategy: s, ..base });
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }

        #[test]
        fn equal_inputs(a in 0.0f64..=1.0, alpha in 0.0f64..=1.0) {
            let input = FusionInput::new(a, a).unwrap();
            let cfg = |s| FusionConfig { alpha, ..FusionConfig::new(s) };
            for s in [Strategy::Wavg, Strategy::AdjustedAlpha, Strategy::DampedFusion, Strategy::MinConf, Strategy::Hmean] {
                prop_assert!((fuse_one(input, &cfg(s)) - a).abs() < 1e-15);
            }
            prop_assert!((fuse_one(input, &cfg(Strategy::ProdConf)) - a * a).abs() < 1e-15);
        }

        #[test]
        fn swap_symmetry(a in 0.0f64..=1.0, b in 0.0f64..=1.0, alpha in 0.0f64..=1.0, gamma in 0.0f64..0.5) {
            let w = |x, y, al| fuse_one(FusionInput::new(x, y).unwrap(), &FusionConfig { alpha: al, ..FusionConfig::new(Strategy::Wavg) });
            prop_assert!((w(a, b, alpha) - w(b, a, 1.0 - alpha)).abs() < 1e-12);
            // Swapping roles flips both d and the weight, so each score keeps
            // the same adjusted weight.
            let adj_ab = (alpha + gamma * (b - a)).clamp(0.0, 1.0);
            let adj_ba = ((1.0 - alpha) + gamma * (a - b)).clamp(0.0, 1.0);
            prop_assert!((adj_ab - (1.0 - adj_ba)).abs() < 1e-12);
            let forward = fuse_one(FusionInput::new(a, b).unwrap(), &FusionConfig { alpha, gamma_a: gamma, ..FusionConfig::new(Strategy::AdjustedAlpha) });
            prop_assert!((forward - (b * adj_ba + a * (1.0 - adj_ba))).abs() < 1e-12);
        }
    }
}
