//! Segment sources: a synthetic ECG-like generator with exact ground truth,
//! generic CSV ingestion with windowing and normalization, and deterministic
//! dataset splitting.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::domain::{ClassLabel, Segment};
use crate::error::{Error, Result};

/// Gaussian QRS-like pulse width, seconds.
const PULSE_SIGMA_S: f64 = 0.02;
/// Baseline-wander frequency, Hz.
const WANDER_FREQ_HZ: f64 = 0.33;
/// Margin kept free of peaks at both segment ends, samples.
const EDGE_MARGIN: usize = 16;
/// Secondary pulse amplitude for the alternating-pattern class.
const ALT_AMPLITUDE: f64 = 0.45;

/// Parameters of the synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    /// Segment length in samples.
    pub m: usize,
    /// Sampling rate, Hz.
    pub sample_rate: f64,
    /// Mean R-R interval, seconds.
    pub mean_rr: f64,
    /// Relative R-R jitter (fraction of `mean_rr`) for the normal class.
    pub rr_jitter: f64,
    /// White-noise standard deviation for the normal class.
    pub noise_amplitude: f64,
    /// Sinusoidal baseline-wander amplitude.
    pub baseline_wander_amplitude: f64,
    /// Probability of each class, ordered as [`ClassLabel::ALL`].
    pub class_mix: [f64; 4],
}

impl Default for GeneratorParams {
    fn default() -> Self {
        GeneratorParams {
            m: 1024,
            sample_rate: 300.0,
            mean_rr: 0.8,
            rr_jitter: 0.05,
            noise_amplitude: 0.05,
            baseline_wander_amplitude: 0.08,
            class_mix: [0.4, 0.2, 0.2, 0.2],
        }
    }
}

impl GeneratorParams {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::InvalidArgument("m must be positive".into()));
        }
        if self.sample_rate <= 0.0 || self.mean_rr <= 0.0 {
            return Err(Error::InvalidArgument(
                "sample_rate and mean_rr must be positive".into(),
            ));
        }
        if self.rr_jitter < 0.0
            || self.noise_amplitude < 0.0
            || self.baseline_wander_amplitude < 0.0
        {
            return Err(Error::InvalidArgument("params must be nonnegative".into()));
        }
        if self.class_mix.iter().any(|&p| p < 0.0) {
            return Err(Error::InvalidArgument("class_mix must be nonnegative".into()));
        }
        let sum: f64 = self.class_mix.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "class_mix must sum to 1, got {sum}"
            )));
        }
        Ok(())
    }

    /// Effective R-R jitter for a class. High jitter is what makes the
    /// af-like class af-like; the additive floor keeps the separation strict
    /// even when the base jitter is zero.
    fn jitter_for(&self, class: ClassLabel) -> f64 {
        match class {
            ClassLabel::AfLike => self.rr_jitter * 4.0 + 0.15,
            _ => self.rr_jitter,
        }
    }

    fn noise_for(&self, class: ClassLabel) -> f64 {
        match class {
            ClassLabel::Noisy => self.noise_amplitude * 4.0 + 0.12,
            _ => self.noise_amplitude,
        }
    }
}

/// Generate one labeled segment: Gaussian QRS-like pulses at quasi-periodic
/// peak times, plus sinusoidal baseline wander and white noise.
/// `peak_positions` records the exact pulse centers.
pub fn generate_segment(params: &GeneratorParams, class: ClassLabel, seed: u64) -> Result<Segment> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fs = params.sample_rate;
    let m = params.m;
    let jitter = params.jitter_for(class);
    let noise = params.noise_for(class);
    let min_gap = (0.25 * params.mean_rr * fs).ceil() as usize;
    let normal = Normal::new(0.0, 1.0).unwrap();

    // Quasi-periodic peak times with a refractory floor of 0.25 * mean RR.
    let mut peaks: Vec<usize> = Vec::new();
    let mut t = params.mean_rr * rng.gen_range(0.3..0.7);
    loop {
        let p = (t * fs).round() as usize;
        let p = match peaks.last() {
            Some(&prev) => p.max(prev + min_gap),
            None => p.max(EDGE_MARGIN),
        };
        if p + EDGE_MARGIN >= m {
            break;
        }
        peaks.push(p);
        let step = params.mean_rr * (1.0 + jitter * normal.sample(&mut rng));
        t += step.max(0.25 * params.mean_rr);
    }

    let sigma = PULSE_SIGMA_S * fs;
    let mut samples = vec![0.0f64; m];
    for (k, &p) in peaks.iter().enumerate() {
        let amp = if class == ClassLabel::Other && k % 2 == 1 {
            ALT_AMPLITUDE
        } else {
            1.0
        };
        // Gaussian support truncated at 5 sigma.
        let reach = (5.0 * sigma).ceil() as isize;
        let lo = (p as isize - reach).max(0) as usize;
        let hi = ((p as isize + reach) as usize).min(m - 1);
        for (i, s) in samples.iter_mut().enumerate().take(hi + 1).skip(lo) {
            let d = i as f64 - p as f64;
            *s += amp * (-d * d / (2.0 * sigma * sigma)).exp();
        }
    }

    if params.baseline_wander_amplitude > 0.0 {
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        for (i, s) in samples.iter_mut().enumerate() {
            let t = i as f64 / fs;
            *s += params.baseline_wander_amplitude
                * (std::f64::consts::TAU * WANDER_FREQ_HZ * t + phase).sin();
        }
    }

    if noise > 0.0 {
        for s in samples.iter_mut() {
            *s += noise * normal.sample(&mut rng);
        }
    }

    // Same [0, 1] contract as ingested data. For the pure pulse train this is
    // the identity map; with wander or noise it re-centers the resting
    // baseline into the interior of the range, as acquisition front-ends do.
    normalize(&mut samples);

    Segment::new(0, samples, fs, Some(class), Some(peaks))
}

/// Generate `n` segments with classes drawn from `class_mix`, ids `0..n`.
pub fn generate_dataset(params: &GeneratorParams, n: usize, seed: u64) -> Result<Vec<Segment>> {
    params.validate()?;
    let mut class_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let draw: f64 = class_rng.gen();
        let mut acc = 0.0;
        let mut class = ClassLabel::Other;
        for (label, &p) in ClassLabel::ALL.iter().zip(&params.class_mix) {
            acc += p;
            if draw < acc {
                class = *label;
                break;
            }
        }
        let mut seg = generate_segment(params, class, seed.wrapping_add(1).wrapping_mul(0x9E37_79B9).wrapping_add(i as u64))?;
        seg.id = i as u32;
        out.push(seg);
    }
    Ok(out)
}

/// Min-max normalize to `[0, 1]`; a flat window maps to all 0.5.
pub fn normalize(samples: &mut [f64]) {
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for &s in samples.iter() {
        min = min.min(s);
        max = max.max(s);
    }
    if max - min <= 1e-12 {
        samples.fill(0.5);
    } else {
        let inv = 1.0 / (max - min);
        for s in samples.iter_mut() {
            *s = (*s - min) * inv;
        }
    }
}

/// Load a CSV of one sample per row (optional second column: integer class
/// label applied to all windows of the file) into non-overlapping windows of
/// length `m`, min-max normalized. The trailing remainder is dropped.
pub fn load_csv(path: &Path, m: usize, sample_rate: f64) -> Result<Vec<Segment>> {
    if m == 0 {
        return Err(Error::InvalidArgument("M must be positive".into()));
    }
    let text = fs::read_to_string(path)?;
    let mut values = Vec::new();
    let mut label: Option<ClassLabel> = None;
    for (idx, line) in text.lines().enumerate() {
        let row = idx + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut cols = line.split(',');
        let first = cols.next().unwrap().trim();
        let value: f64 = first.parse().map_err(|_| Error::Parse {
            row,
            message: format!("not a number: {first:?}"),
        })?;
        values.push(value);
        if let Some(second) = cols.next() {
            let second = second.trim();
            if !second.is_empty() {
                let idx: usize = second.parse().map_err(|_| Error::Parse {
                    row,
                    message: format!("label not an integer: {second:?}"),
                })?;
                let parsed = ClassLabel::from_index(idx).ok_or(Error::Parse {
                    row,
                    message: format!("label {idx} out of range 0..4"),
                })?;
                match label {
                    None => label = Some(parsed),
                    Some(existing) if existing != parsed => {
                        return Err(Error::Parse {
                            row,
                            message: "conflicting class labels in one file".into(),
                        })
                    }
                    _ => {}
                }
            }
        }
    }
    let mut segments = Vec::new();
    for (w, chunk) in values.chunks_exact(m).enumerate() {
        let mut samples = chunk.to_vec();
        normalize(&mut samples);
        segments.push(Segment::new(w as u32, samples, sample_rate, label, None)?);
    }
    Ok(segments)
}

/// Train/validation/test split with disjoint segment ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<Segment>,
    pub validation: Vec<Segment>,
    pub test: Vec<Segment>,
    pub seed: u64,
}

impl DatasetSplit {
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<DatasetSplit> {
        let file = fs::File::open(path)?;
        Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
    }
}

/// Deterministic shuffled split. Fractions must be positive and sum to 1.
pub fn split_dataset(
    segments: Vec<Segment>,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<DatasetSplit> {
    let (ft, fv, fe) = fractions;
    if ft <= 0.0 || fv <= 0.0 || fe <= 0.0 {
        return Err(Error::InvalidArgument("fractions must be positive".into()));
    }
    if (ft + fv + fe - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument("fractions must sum to 1".into()));
    }
    let mut ids: Vec<usize> = (0..segments.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher-Yates
    for i in (1..ids.len()).rev() {
        let j = rng.gen_range(0..=i);
        ids.swap(i, j);
    }
    let n = segments.len();
    let n_train = (ft * n as f64).floor() as usize;
    let n_val = (fv * n as f64).floor() as usize;
    let mut slots: Vec<Option<Segment>> = segments.into_iter().map(Some).collect();
    let mut take = |range: &[usize]| -> Vec<Segment> {
        range.iter().map(|&i| slots[i].take().unwrap()).collect()
    };
    let train = take(&ids[..n_train]);
    let validation = take(&ids[n_train..n_train + n_val]);
    let test = take(&ids[n_train + n_val..]);
    Ok(DatasetSplit {
        train,
        validation,
        test,
        seed,
    })
}

/// Sidecar manifest describing a CSV-backed dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub files: Vec<PathBuf>,
    pub m: usize,
    pub sample_rate: f64,
    pub fractions: (f64, f64, f64),
    pub seed: u64,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<DatasetManifest> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Ingest every listed file, renumber segment ids globally, and split.
    pub fn assemble(&self, base_dir: &Path) -> Result<DatasetSplit> {
        let mut all = Vec::new();
        for file in &self.files {
            let path = if file.is_absolute() {
                file.clone()
            } else {
                base_dir.join(file)
            };
            all.extend(load_csv(&path, self.m, self.sample_rate)?);
        }
        for (i, seg) in all.iter_mut().enumerate() {
            seg.id = i as u32;
        }
        split_dataset(all, self.fractions, self.seed)
    }
}

/// Sample standard deviation of successive peak gaps, in samples.
pub fn rr_interval_std(peaks: &[usize]) -> f64 {
    if peaks.len() < 3 {
        return 0.0;
    }
    let gaps: Vec<f64> = peaks.windows(2).map(|w| (w[1] - w[0]) as f64).collect();
    let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
    let var = gaps.iter().map(|g| (g - mean) * (g - mean)).sum::<f64>() / (gaps.len() - 1) as f64;
    var.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_normal_is_exactly_the_pulse_train() {
        let params = GeneratorParams {
            noise_amplitude: 0.0,
            baseline_wander_amplitude: 0.0,
            ..GeneratorParams::default()
        };
        let seg = generate_segment(&params, ClassLabel::Normal, 11).unwrap();
        let peaks = seg.peak_positions.as_ref().unwrap();
        assert!(!peaks.is_empty());
        // Local maxima coincide with recorded peak centers.
        for &p in peaks {
            assert!(seg.samples[p] > seg.samples[p - 1]);
            assert!(seg.samples[p] > seg.samples[p + 1]);
            assert!((seg.samples[p] - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let params = GeneratorParams::default();
        let a = generate_segment(&params, ClassLabel::Noisy, 99).unwrap();
        let b = generate_segment(&params, ClassLabel::Noisy, 99).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn af_like_has_larger_rr_spread_than_normal() {
        let params = GeneratorParams {
            noise_amplitude: 0.0,
            ..GeneratorParams::default()
        };
        let normal = generate_segment(&params, ClassLabel::Normal, 5).unwrap();
        let af = generate_segment(&params, ClassLabel::AfLike, 5).unwrap();
        let std_normal = rr_interval_std(normal.peak_positions.as_ref().unwrap());
        let std_af = rr_interval_std(af.peak_positions.as_ref().unwrap());
        assert!(
            std_af > std_normal,
            "af std {std_af} should exceed normal std {std_normal}"
        );
    }

    #[test]
    fn refractory_gap_holds() {
        let params = GeneratorParams::default();
        let min_gap = 0.25 * params.mean_rr * params.sample_rate;
        for seed in 0..20 {
            let seg = generate_segment(&params, ClassLabel::AfLike, seed).unwrap();
            let peaks = seg.peak_positions.as_ref().unwrap();
            for w in peaks.windows(2) {
                assert!((w[1] - w[0]) as f64 >= min_gap);
            }
        }
    }

    #[test]
    fn csv_windows_and_drops_remainder() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sig.csv");
        let rows: String = (0..3072).map(|i| format!("{}\n", (i % 37) as f64 * 0.1)).collect();
        fs::write(&path, rows).unwrap();
        let segs = load_csv(&path, 1024, 300.0).unwrap();
        assert_eq!(segs.len(), 3);

        let rows: String = (0..1500).map(|i| format!("{}\n", i as f64)).collect();
        fs::write(&path, rows).unwrap();
        let segs = load_csv(&path, 1024, 300.0).unwrap();
        assert_eq!(segs.len(), 1);
    }

    #[test]
    fn csv_constant_signal_normalizes_to_half() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("flat.csv");
        fs::write(&path, "2.5\n".repeat(64)).unwrap();
        let segs = load_csv(&path, 32, 100.0).unwrap();
        assert!(segs.iter().all(|s| s.samples.iter().all(|&v| v == 0.5)));
    }

    #[test]
    fn csv_label_column_applies_to_all_windows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lab.csv");
        let mut rows = String::new();
        for i in 0..64 {
            rows.push_str(&format!("{}.0,2\n", i));
        }
        fs::write(&path, rows).unwrap();
        let segs = load_csv(&path, 32, 100.0).unwrap();
        assert!(segs.iter().all(|s| s.label == Some(ClassLabel::Noisy)));
    }

    #[test]
    fn csv_parse_error_reports_row() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        fs::write(&path, "1.0\n2.0\nnope\n").unwrap();
        match load_csv(&path, 2, 100.0) {
            Err(Error::Parse { row, .. }) => assert_eq!(row, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn split_sizes_and_determinism() {
        let params = GeneratorParams {
            m: 64,
            ..GeneratorParams::default()
        };
        let segs = generate_dataset(&params, 10, 3).unwrap();
        let a = split_dataset(segs.clone(), (0.8, 0.1, 0.1), 42).unwrap();
        assert_eq!(
            (a.train.len(), a.validation.len(), a.test.len()),
            (8, 1, 1)
        );
        let b = split_dataset(segs.clone(), (0.8, 0.1, 0.1), 42).unwrap();
        assert_eq!(a, b);
        let c = split_dataset(segs, (0.8, 0.1, 0.1), 43).unwrap();
        let ids = |s: &DatasetSplit| s.train.iter().map(|x| x.id).collect::<Vec<_>>();
        assert_ne!(ids(&a), ids(&c));
    }

    #[test]
    fn split_rejects_bad_fractions() {
        let params = GeneratorParams {
            m: 64,
            ..GeneratorParams::default()
        };
        let segs = generate_dataset(&params, 4, 0).unwrap();
        assert!(split_dataset(segs.clone(), (0.5, 0.5, 0.5), 0).is_err());
        assert!(split_dataset(segs, (1.0, 0.0, 0.0), 0).is_err());
    }

    #[test]
    fn split_ids_are_disjoint() {
        let params = GeneratorParams {
            m: 64,
            ..GeneratorParams::default()
        };
        let segs = generate_dataset(&params, 30, 8).unwrap();
        let split = split_dataset(segs, (0.6, 0.2, 0.2), 1).unwrap();
        let mut ids = std::collections::BTreeSet::new();
        for seg in split
            .train
            .iter()
            .chain(&split.validation)
            .chain(&split.test)
        {
            assert!(ids.insert(seg.id), "duplicate id {}", seg.id);
        }
        assert_eq!(ids.len(), 30);
    }
}
