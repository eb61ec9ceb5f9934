//! Metrics and reports: violation rate, classification precision/recall/F1,
//! CCE quartiles, and the lossless-compression baseline.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::{ClassLabel, Segment};
use crate::error::{Error, Result};

/// Per-class and macro-averaged classification metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    /// Keyed by class index 0..4: (precision, recall, f1).
    pub per_class: BTreeMap<usize, (f64, f64, f64)>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub accuracy: f64,
}

/// Aggregate evaluation of one policy at one bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bound: f64,
    pub policy: String,
    pub avg_cg: f64,
    /// Mean measured weighted task error at the chosen levels.
    pub effective_loss: f64,
    pub violation_rate: f64,
    pub n_fallback: usize,
    pub n_segments: usize,
    pub class_metrics: Option<ClassificationReport>,
    /// Per level cg: (q1, median, q3) of the classifier loss.
    pub cce_quartiles: Option<BTreeMap<u32, (f64, f64, f64)>>,
    /// Peak extraction (precision, recall, f1) aggregated over segments.
    pub peak_metrics: Option<(f64, f64, f64)>,
}

impl EvalReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(f), self)?;
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(
            f,
            "bound,policy,avg_cg,effective_loss,violation_rate,n_fallback,n_segments,macro_f1,peak_f1"
        )?;
        writeln!(
            f,
            "{},{},{},{},{},{},{},{},{}",
            self.bound,
            self.policy,
            self.avg_cg,
            self.effective_loss,
            self.violation_rate,
            self.n_fallback,
            self.n_segments,
            self.class_metrics
                .as_ref()
                .map(|c| c.macro_f1.to_string())
                .unwrap_or_default(),
            self.peak_metrics
                .map(|p| p.2.to_string())
                .unwrap_or_default(),
        )?;
        Ok(())
    }
}

/// Fraction of segments whose measured loss exceeds the bound.
pub fn violation_rate(losses: &[f64], bound: f64) -> Result<f64> {
    if losses.is_empty() {
        return Err(Error::InvalidArgument("no losses to aggregate".into()));
    }
    if bound < 0.0 {
        return Err(Error::InvalidArgument("bound must be nonnegative".into()));
    }
    let n = losses.iter().filter(|&&l| l > bound).count();
    Ok(n as f64 / losses.len() as f64)
}

/// Confusion-matrix metrics with the zero-denominator convention of 0.
pub fn classification_metrics(
    predictions: &[ClassLabel],
    labels: &[ClassLabel],
) -> Result<ClassificationReport> {
    if predictions.len() != labels.len() {
        return Err(Error::LengthMismatch {
            expected: labels.len(),
            got: predictions.len(),
        });
    }
    if labels.is_empty() {
        return Err(Error::InvalidArgument("empty label set".into()));
    }
    let k = ClassLabel::ALL.len();
    let mut confusion = vec![vec![0usize; k]; k];
    let mut correct = 0usize;
    for (p, l) in predictions.iter().zip(labels) {
        confusion[l.index()][p.index()] += 1;
        if p == l {
            correct += 1;
        }
    }
    let mut per_class = BTreeMap::new();
    let (mut sp, mut sr, mut sf) = (0.0, 0.0, 0.0);
    for c in 0..k {
        let tp = confusion[c][c] as f64;
        let pred_c: f64 = (0..k).map(|l| confusion[l][c] as f64).sum();
        let label_c: f64 = confusion[c].iter().map(|&v| v as f64).sum();
        let precision = if pred_c > 0.0 { tp / pred_c } else { 0.0 };
        let recall = if label_c > 0.0 { tp / label_c } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        per_class.insert(c, (precision, recall, f1));
        sp += precision;
        sr += recall;
        sf += f1;
    }
    Ok(ClassificationReport {
        per_class,
        macro_precision: sp / k as f64,
        macro_recall: sr / k as f64,
        macro_f1: sf / k as f64,
        accuracy: correct as f64 / labels.len() as f64,
    })
}

/// Linear-interpolation quantile at `p` in `[0, 1]`, via partial selection.
fn quantile(values: &[f64], p: f64) -> f64 {
    debug_assert!(!values.is_empty());
    let h = (values.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    let mut buf = values.to_vec();
    let (_, lo_v, rest) = buf.select_nth_unstable_by(lo, |a, b| a.partial_cmp(b).unwrap());
    let lo_v = *lo_v;
    if hi == lo {
        return lo_v;
    }
    // hi = lo + 1: smallest of the upper partition.
    let hi_v = rest
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    lo_v + (h - lo as f64) * (hi_v - lo_v)
}

/// (q1, median, q3) of a loss sample; needs at least 4 points.
pub fn cce_quartiles(losses: &[f64]) -> Result<(f64, f64, f64)> {
    if losses.len() < 4 {
        return Err(Error::InvalidArgument(format!(
            "need at least 4 points for quartiles, got {}",
            losses.len()
        )));
    }
    if losses.iter().any(|l| !l.is_finite()) {
        return Err(Error::InvalidArgument("non-finite loss".into()));
    }
    Ok((
        quantile(losses, 0.25),
        quantile(losses, 0.5),
        quantile(losses, 0.75),
    ))
}

/// Lossless coder used by the baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LosslessCoder {
    /// DEFLATE (LZ77 + Huffman).
    Deflate,
}

impl LosslessCoder {
    pub fn compress(self, bytes: &[u8]) -> Vec<u8> {
        match self {
            LosslessCoder::Deflate => {
                use flate2::write::DeflateEncoder;
                use flate2::Compression;
                let mut enc = DeflateEncoder::new(Vec::new(), Compression::default());
                enc.write_all(bytes).expect("in-memory write");
                enc.finish().expect("in-memory finish")
            }
        }
    }
}

/// Serialize samples the way an acquisition front-end would: `[0,1]` scaled
/// to 16-bit little-endian integers.
pub fn canonical_sample_bytes(samples: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(samples.len() * 2);
    for &s in samples {
        let v = (s.clamp(0.0, 1.0) * 65535.0).round() as u16;
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Per-segment lossless compression gain (raw bytes / compressed bytes):
/// mean and sample standard deviation.
pub fn lossless_baseline_cg(segments: &[Segment], coder: LosslessCoder) -> Result<(f64, f64)> {
    if segments.is_empty() {
        return Err(Error::InvalidArgument("no segments".into()));
    }
    let ratios: Vec<f64> = segments
        .iter()
        .map(|seg| {
            let raw = canonical_sample_bytes(&seg.samples);
            let packed = coder.compress(&raw);
            raw.len() as f64 / packed.len() as f64
        })
        .collect();
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    let std = if ratios.len() > 1 {
        (ratios.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (ratios.len() - 1) as f64)
            .sqrt()
    } else {
        0.0
    };
    Ok((mean, std))
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn violation_rate_monotone_in_bound(
            losses in proptest::collection::vec(0.0f64..10.0, 1..64),
            b1 in 0.0f64..10.0,
            b2 in 0.0f64..10.0,
        ) {
            let (lo, hi) = if b1 <= b2 { (b1, b2) } else { (b2, b1) };
            let r_lo = violation_rate(&losses, lo).unwrap();
            let r_hi = violation_rate(&losses, hi).unwrap();
            prop_assert!(r_hi <= r_lo);
            prop_assert!((0.0..=1.0).contains(&r_lo));
        }

        #[test]
        fn quartiles_are_ordered(values in proptest::collection::vec(-100.0f64..100.0, 4..128)) {
            let (q1, med, q3) = cce_quartiles(&values).unwrap();
            prop_assert!(q1 <= med && med <= q3);
        }
    }
}
