//! Shared domain types and compression-gain arithmetic.
//!
//! Compression gain (CG) is an element-count ratio: a segment of `M` samples
//! compressed to a latent of `M / cg` elements has gain `cg`. Latents and
//! samples share numeric precision, so no entropy-coding or byte accounting
//! is involved.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Class label attached to a segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ClassLabel {
    Normal,
    AfLike,
    Noisy,
    Other,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 4] = [
        ClassLabel::Normal,
        ClassLabel::AfLike,
        ClassLabel::Noisy,
        ClassLabel::Other,
    ];

    pub fn index(self) -> usize {
        match self {
            ClassLabel::Normal => 0,
            ClassLabel::AfLike => 1,
            ClassLabel::Noisy => 2,
            ClassLabel::Other => 3,
        }
    }

    pub fn from_index(idx: usize) -> Option<ClassLabel> {
        Self::ALL.get(idx).copied()
    }
}

/// One fixed-length window of raw signal samples.
///
/// Immutable after construction; safe to share across workers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub id: u32,
    pub samples: Vec<f64>,
    pub sample_rate: f64,
    pub label: Option<ClassLabel>,
    /// Ground-truth R-peak sample indices, strictly increasing, within `[0, M)`.
    pub peak_positions: Option<Vec<usize>>,
}

impl Segment {
    pub fn new(
        id: u32,
        samples: Vec<f64>,
        sample_rate: f64,
        label: Option<ClassLabel>,
        peak_positions: Option<Vec<usize>>,
    ) -> Result<Segment> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("segment has no samples".into()));
        }
        if sample_rate <= 0.0 {
            return Err(Error::InvalidArgument("sample_rate must be positive".into()));
        }
        if let Some(peaks) = &peak_positions {
            let m = samples.len();
            if !peaks.windows(2).all(|w| w[0] < w[1]) {
                return Err(Error::InvalidArgument(
                    "peak_positions must be strictly increasing".into(),
                ));
            }
            if peaks.iter().any(|&p| p >= m) {
                return Err(Error::InvalidArgument(format!(
                    "peak position out of range [0, {m})"
                )));
            }
        }
        Ok(Segment {
            id,
            samples,
            sample_rate,
            label,
            peak_positions,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// A compression level: gain, latent length and whether it is the identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelSpec {
    pub cg: u32,
    pub latent_len: usize,
    pub is_identity: bool,
}

impl LevelSpec {
    /// Build a level for segment length `m`; `m` must divide evenly by `cg`.
    pub fn new(cg: u32, m: usize) -> Result<LevelSpec> {
        if cg == 0 {
            return Err(Error::InvalidArgument("cg must be positive".into()));
        }
        if m == 0 || m % cg as usize != 0 {
            return Err(Error::InvalidLevelSet(format!("M={m} not divisible by {cg}")));
        }
        Ok(LevelSpec {
            cg,
            latent_len: m / cg as usize,
            is_identity: cg == 1,
        })
    }
}

/// Admin-configured bound on downstream weighted task error, plus loss weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundConfig {
    pub upper_bound: f64,
    /// Per-task loss weights `w_i`, keyed by task id.
    pub task_weights: BTreeMap<String, f64>,
    /// Reconstruction-loss weight `w_0`.
    pub reconstruction_weight: f64,
}

impl BoundConfig {
    pub fn new(
        upper_bound: f64,
        task_weights: BTreeMap<String, f64>,
        reconstruction_weight: f64,
    ) -> Result<BoundConfig> {
        if !(upper_bound >= 0.0) {
            return Err(Error::InvalidArgument("upper_bound must be >= 0".into()));
        }
        if reconstruction_weight < 0.0 {
            return Err(Error::InvalidArgument("w0 must be >= 0".into()));
        }
        if task_weights.values().any(|&w| w < 0.0) {
            return Err(Error::InvalidArgument("task weights must be >= 0".into()));
        }
        if !task_weights.values().any(|&w| w > 0.0) {
            return Err(Error::InvalidArgument(
                "at least one task weight must be > 0".into(),
            ));
        }
        Ok(BoundConfig {
            upper_bound,
            task_weights,
            reconstruction_weight,
        })
    }

    /// Default weights: `w0 = 0.1`, every task weight 1.
    pub fn default_weights(upper_bound: f64) -> BoundConfig {
        let mut task_weights = BTreeMap::new();
        task_weights.insert("hr_classify".to_string(), 1.0);
        task_weights.insert("rr_peaks".to_string(), 1.0);
        BoundConfig {
            upper_bound,
            task_weights,
            reconstruction_weight: 0.1,
        }
    }
}

/// The unit that crosses the edge-to-cloud boundary.
///
/// Latent elements and the predicted error are carried in `f32`, matching the
/// wire payload precision exactly so serialization round-trips bitwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressedRecord {
    pub segment_id: u32,
    pub cg: u32,
    pub latent: Vec<f32>,
    pub predicted_error: f32,
}

impl CompressedRecord {
    pub fn new(segment_id: u32, cg: u32, latent: Vec<f32>, predicted_error: f32) -> Result<Self> {
        if !(predicted_error >= 0.0) {
            return Err(Error::InvalidArgument(
                "predicted_error must be nonnegative".into(),
            ));
        }
        Ok(CompressedRecord {
            segment_id,
            cg,
            latent,
            predicted_error,
        })
    }

    /// Check latent length against a configured segment length.
    pub fn check_against(&self, m: usize) -> Result<()> {
        if self.cg == 0 || m % self.cg as usize != 0 {
            return Err(Error::UnknownLevel(self.cg));
        }
        let expect = m / self.cg as usize;
        if self.latent.len() != expect {
            return Err(Error::LengthMismatch {
                expected: expect,
                got: self.latent.len(),
            });
        }
        Ok(())
    }
}

/// Arithmetic mean of per-segment compression gains.
pub fn average_cg(per_segment_cgs: &[u32]) -> Result<f64> {
    if per_segment_cgs.is_empty() {
        return Err(Error::InvalidArgument(
            "average_cg needs at least one segment".into(),
        ));
    }
    if per_segment_cgs.iter().any(|&cg| cg == 0) {
        return Err(Error::InvalidArgument("cg values must be positive".into()));
    }
    let sum: f64 = per_segment_cgs.iter().map(|&cg| cg as f64).sum();
    Ok(sum / per_segment_cgs.len() as f64)
}

/// Validate a level set against segment length `m`.
///
/// Requires: every `LevelSpec` internally consistent, distinct CG values,
/// the identity level present, and `m` divisible by every CG.
pub fn validate_level_set(levels: &[LevelSpec], m: usize) -> Result<()> {
    if levels.is_empty() {
        return Err(Error::InvalidLevelSet("level set is empty".into()));
    }
    let mut seen = std::collections::BTreeSet::new();
    for level in levels {
        if level.cg == 0 {
            return Err(Error::InvalidLevelSet("cg must be positive".into()));
        }
        if m % level.cg as usize != 0 {
            return Err(Error::InvalidLevelSet(format!(
                "M not divisible by {}",
                level.cg
            )));
        }
        if level.latent_len * level.cg as usize != m {
            return Err(Error::InvalidLevelSet(format!(
                "latent_len {} x cg {} != M {}",
                level.latent_len, level.cg, m
            )));
        }
        if level.is_identity != (level.cg == 1) {
            return Err(Error::InvalidLevelSet(
                "is_identity inconsistent with cg".into(),
            ));
        }
        if !seen.insert(level.cg) {
            return Err(Error::InvalidLevelSet(format!("duplicate cg {}", level.cg)));
        }
    }
    if !seen.contains(&1) {
        return Err(Error::InvalidLevelSet("missing identity level".into()));
    }
    Ok(())
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn average_cg_within_min_max(xs in proptest::collection::vec(1u32..256, 1..64)) {
            let avg = average_cg(&xs).unwrap();
            let min = *xs.iter().min().unwrap() as f64;
            let max = *xs.iter().max().unwrap() as f64;
            prop_assert!(avg >= min - 1e-12 && avg <= max + 1e-12);
        }

        #[test]
        fn average_cg_permutation_invariant(mut xs in proptest::collection::vec(1u32..256, 2..64)) {
            let a = average_cg(&xs).unwrap();
            xs.reverse();
            let b = average_cg(&xs).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn level_reconstructs_m(exp in 0u32..7) {
            let m = 1024usize;
            let cg = 1u32 << exp;
            let level = LevelSpec::new(cg, m).unwrap();
            prop_assert_eq!(level.latent_len * level.cg as usize, m);
        }
    }
}
