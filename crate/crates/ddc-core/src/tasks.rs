//! Differentiable downstream-task stand-ins: a 4-class rhythm classifier and
//! an R-peak locator regressing a Gaussian-smeared peak envelope. Both are
//! trained on raw segments and frozen while the codec is fine-tuned.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{ClassLabel, Segment};
use crate::error::{Error, Result};
use crate::nn::{param_checksum, Conv1d, Dense, Feature, Layer, SeqGrads, Sequential, Trace};

/// Width (samples) of the Gaussian smearing the peak-envelope target.
pub const SIGMA_ENV: f64 = 5.0;
/// Peak matching tolerance at desk scale, samples.
pub const PEAK_TOLERANCE: usize = 10;
/// Non-maximum-suppression window for envelope peak extraction, samples.
pub const PEAK_REFRACTORY: usize = 30;
/// Log clamp used by the categorical cross-entropy.
pub const CCE_EPS: f64 = 1e-7;

pub const N_CLASSES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskId {
    HrClassify,
    RrPeaks,
}

impl TaskId {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskId::HrClassify => "hr_classify",
            TaskId::RrPeaks => "rr_peaks",
        }
    }

    pub fn parse(s: &str) -> Result<TaskId> {
        match s {
            "hr_classify" => Ok(TaskId::HrClassify),
            "rr_peaks" => Ok(TaskId::RrPeaks),
            other => Err(Error::InvalidArgument(format!("unknown task id {other:?}"))),
        }
    }
}

/// Gaussian-smeared indicator of peak positions, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeakEnvelope {
    pub values: Vec<f64>,
}

impl PeakEnvelope {
    /// Build the regression target for known peak centers.
    pub fn from_peaks(peaks: &[usize], m: usize) -> PeakEnvelope {
        let mut values = vec![0.0f64; m];
        let reach = (5.0 * SIGMA_ENV).ceil() as isize;
        for &p in peaks {
            let lo = (p as isize - reach).max(0) as usize;
            let hi = ((p as isize + reach) as usize).min(m.saturating_sub(1));
            for (i, v) in values.iter_mut().enumerate().take(hi + 1).skip(lo) {
                let d = i as f64 - p as f64;
                *v += (-d * d / (2.0 * SIGMA_ENV * SIGMA_ENV)).exp();
            }
        }
        for v in values.iter_mut() {
            *v = v.min(1.0);
        }
        PeakEnvelope { values }
    }
}

/// Ground truth a task needs, derived from a segment.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub label: Option<ClassLabel>,
    pub envelope: Option<PeakEnvelope>,
}

pub fn ground_truth_for(segment: &Segment) -> GroundTruth {
    GroundTruth {
        label: segment.label,
        envelope: segment
            .peak_positions
            .as_ref()
            .map(|p| PeakEnvelope::from_peaks(p, segment.len())),
    }
}

/// Small hourglass net with one skip connection, emitting a peak envelope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UNet1d {
    enc1: Sequential,
    enc2: Sequential,
    mid: Sequential,
    dec1: Sequential,
    dec2: Sequential,
}

/// Activation traces for a [`UNet1d`] forward pass.
pub struct UNetTrace {
    enc1: Trace,
    enc2: Trace,
    mid: Trace,
    dec1: Trace,
    dec2: Trace,
}

impl UNetTrace {
    pub fn output(&self) -> &Feature {
        self.dec2.output()
    }
}

/// Gradients for a [`UNet1d`].
pub struct UNetGrads {
    pub enc1: SeqGrads,
    pub enc2: SeqGrads,
    pub mid: SeqGrads,
    pub dec1: SeqGrads,
    pub dec2: SeqGrads,
}

const UNET_C1: usize = 8;
const UNET_C2: usize = 16;

impl UNet1d {
    pub fn new(seed: u64) -> UNet1d {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        UNet1d {
            enc1: Sequential::new(vec![
                Layer::Conv(Conv1d::new(1, UNET_C1, 7, 2, &mut rng)),
                Layer::Relu,
            ]),
            enc2: Sequential::new(vec![
                Layer::Conv(Conv1d::new(UNET_C1, UNET_C2, 3, 2, &mut rng)),
                Layer::Relu,
            ]),
            mid: Sequential::new(vec![
                Layer::Conv(Conv1d::new(UNET_C2, UNET_C2, 3, 1, &mut rng)),
                Layer::Relu,
            ]),
            dec1: Sequential::new(vec![
                Layer::Upsample2,
                Layer::Conv(Conv1d::new(UNET_C2, UNET_C1, 3, 1, &mut rng)),
                Layer::Relu,
            ]),
            dec2: Sequential::new(vec![
                Layer::Upsample2,
                Layer::Conv(Conv1d::new(2 * UNET_C1, 1, 3, 1, &mut rng)),
                Layer::Sigmoid,
            ]),
        }
    }

    fn concat(a: &Feature, b: &Feature) -> Feature {
        debug_assert_eq!(a.len, b.len);
        let mut data = Vec::with_capacity((a.channels + b.channels) * a.len);
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Feature {
            channels: a.channels + b.channels,
            len: a.len,
            data,
        }
    }

    pub fn forward_trace(&self, x: &Feature) -> UNetTrace {
        let enc1 = self.enc1.forward_trace(x);
        let enc2 = self.enc2.forward_trace(enc1.output());
        let mid = self.mid.forward_trace(enc2.output());
        let dec1 = self.dec1.forward_trace(mid.output());
        let cat = Self::concat(enc1.output(), dec1.output());
        let dec2 = self.dec2.forward_trace(&cat);
        UNetTrace {
            enc1,
            enc2,
            mid,
            dec1,
            dec2,
        }
    }

    pub fn infer(&self, x: &Feature) -> Feature {
        let a = self.enc1.infer(x);
        let d = self.dec1.infer(&self.mid.infer(&self.enc2.infer(&a)));
        self.dec2.infer(&Self::concat(&a, &d))
    }

    /// Backward through the skip topology. `grads = None` freezes parameters.
    pub fn backward(
        &self,
        trace: &UNetTrace,
        gy: Feature,
        mut grads: Option<&mut UNetGrads>,
    ) -> Feature {
        let gcat = self
            .dec2
            .backward(&trace.dec2, gy, grads.as_mut().map(|g| &mut g.dec2));
        // Split the concat gradient back into skip and decoder halves.
        let skip_ch = UNET_C1;
        let len = gcat.len;
        let (skip_part, dec_part) = gcat.data.split_at(skip_ch * len);
        let mut ga = Feature {
            channels: skip_ch,
            len,
            data: skip_part.to_vec(),
        };
        let gd = Feature {
            channels: gcat.channels - skip_ch,
            len,
            data: dec_part.to_vec(),
        };
        let gc = self
            .dec1
            .backward(&trace.dec1, gd, grads.as_mut().map(|g| &mut g.dec1));
        let gb = self
            .mid
            .backward(&trace.mid, gc, grads.as_mut().map(|g| &mut g.mid));
        let ga2 = self
            .enc2
            .backward(&trace.enc2, gb, grads.as_mut().map(|g| &mut g.enc2));
        for (x, y) in ga.data.iter_mut().zip(&ga2.data) {
            *x += y;
        }
        self.enc1
            .backward(&trace.enc1, ga, grads.as_mut().map(|g| &mut g.enc1))
    }

    pub fn zero_grads(&self) -> UNetGrads {
        UNetGrads {
            enc1: SeqGrads::zeros_like(&self.enc1),
            enc2: SeqGrads::zeros_like(&self.enc2),
            mid: SeqGrads::zeros_like(&self.mid),
            dec1: SeqGrads::zeros_like(&self.dec1),
            dec2: SeqGrads::zeros_like(&self.dec2),
        }
    }

    pub fn param_count(&self) -> usize {
        self.enc1.param_count()
            + self.enc2.param_count()
            + self.mid.param_count()
            + self.dec1.param_count()
            + self.dec2.param_count()
    }

    pub fn export_params(&self, out: &mut Vec<f64>) {
        self.enc1.export_params(out);
        self.enc2.export_params(out);
        self.mid.export_params(out);
        self.dec1.export_params(out);
        self.dec2.export_params(out);
    }

    pub fn import_params(&mut self, src: &[f64]) -> Result<usize> {
        let mut at = 0;
        for seq in [
            &mut self.enc1,
            &mut self.enc2,
            &mut self.mid,
            &mut self.dec1,
            &mut self.dec2,
        ] {
            at += seq.import_params(&src[at..])?;
        }
        Ok(at)
    }
}

impl UNetGrads {
    pub fn add_assign(&mut self, other: &UNetGrads) {
        self.enc1.add_assign(&other.enc1);
        self.enc2.add_assign(&other.enc2);
        self.mid.add_assign(&other.mid);
        self.dec1.add_assign(&other.dec1);
        self.dec2.add_assign(&other.dec2);
    }

    pub fn scale(&mut self, f: f64) {
        self.enc1.scale(f);
        self.enc2.scale(f);
        self.mid.scale(f);
        self.dec1.scale(f);
        self.dec2.scale(f);
    }

    pub fn export_flat(&self, out: &mut Vec<f64>) {
        self.enc1.export_flat(out);
        self.enc2.export_flat(out);
        self.mid.export_flat(out);
        self.dec1.export_flat(out);
        self.dec2.export_flat(out);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) enum TaskNet {
    Classifier(Sequential),
    Peaks(UNet1d),
}

/// A downstream-task model. Frozen models never change parameters; inference
/// is read-only and safe for concurrent use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskModel {
    pub task_id: TaskId,
    pub frozen: bool,
    pub(crate) net: TaskNet,
}

impl TaskModel {
    /// 4 stride-2 conv stages, global pooling, dense softmax head.
    pub fn new_classifier(seed: u64) -> TaskModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = [8usize, 16, 24, 32];
        let kernels = [7usize, 3, 3, 3];
        let mut layers = Vec::new();
        let mut c = 1;
        for (&w, &k) in widths.iter().zip(&kernels) {
            layers.push(Layer::Conv(Conv1d::new(c, w, k, 2, &mut rng)));
            layers.push(Layer::Relu);
            c = w;
        }
        layers.push(Layer::GlobalAvgPool);
        layers.push(Layer::Dense(Dense::new(c, N_CLASSES, &mut rng)));
        TaskModel {
            task_id: TaskId::HrClassify,
            frozen: false,
            net: TaskNet::Classifier(Sequential::new(layers)),
        }
    }

    pub fn new_peaks(seed: u64) -> TaskModel {
        TaskModel {
            task_id: TaskId::RrPeaks,
            frozen: false,
            net: TaskNet::Peaks(UNet1d::new(seed)),
        }
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn param_count(&self) -> usize {
        match &self.net {
            TaskNet::Classifier(s) => s.param_count(),
            TaskNet::Peaks(u) => u.param_count(),
        }
    }

    pub fn export_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        match &self.net {
            TaskNet::Classifier(s) => s.export_params(&mut out),
            TaskNet::Peaks(u) => u.export_params(&mut out),
        }
        out
    }

    pub fn import_params(&mut self, src: &[f64]) -> Result<()> {
        if self.frozen {
            return Err(Error::Config("cannot import into a frozen task model".into()));
        }
        if src.len() != self.param_count() {
            return Err(Error::CheckpointMismatch(format!(
                "task {}: expected {} params, got {}",
                self.task_id.as_str(),
                self.param_count(),
                src.len()
            )));
        }
        match &mut self.net {
            TaskNet::Classifier(s) => {
                s.import_params(src)?;
            }
            TaskNet::Peaks(u) => {
                u.import_params(src)?;
            }
        }
        Ok(())
    }

    pub fn checksum(&self) -> [u8; 32] {
        param_checksum(&self.export_params())
    }

    /// Class probabilities for a raw or reconstructed segment.
    pub fn classify(&self, samples: &[f64]) -> Result<[f64; N_CLASSES]> {
        let TaskNet::Classifier(net) = &self.net else {
            return Err(Error::Config("classify called on a non-classifier task".into()));
        };
        let logits = net.infer(&Feature::from_signal(samples));
        Ok(softmax4(&logits.data))
    }

    /// Predicted peak envelope for a segment.
    pub fn predict_envelope(&self, samples: &[f64]) -> Result<Vec<f64>> {
        let TaskNet::Peaks(net) = &self.net else {
            return Err(Error::Config("predict_envelope needs the peak task".into()));
        };
        Ok(net.infer(&Feature::from_signal(samples)).data)
    }

    /// Task loss of a reconstruction against ground truth: categorical
    /// cross-entropy for classification, envelope MSE for peak extraction.
    pub fn task_loss(&self, reconstructed: &[f64], gt: &GroundTruth) -> Result<f64> {
        match &self.net {
            TaskNet::Classifier(_) => {
                let label = gt
                    .label
                    .ok_or_else(|| Error::MissingGroundTruth("hr_classify".into()))?;
                let probs = self.classify(reconstructed)?;
                Ok(cce(&probs, label))
            }
            TaskNet::Peaks(_) => {
                let env = gt
                    .envelope
                    .as_ref()
                    .ok_or_else(|| Error::MissingGroundTruth("rr_peaks".into()))?;
                let pred = self.predict_envelope(reconstructed)?;
                if pred.len() != env.values.len() {
                    return Err(Error::LengthMismatch {
                        expected: env.values.len(),
                        got: pred.len(),
                    });
                }
                Ok(mse(&pred, &env.values))
            }
        }
    }

    /// Loss plus its gradient with respect to the input samples, holding the
    /// task parameters fixed. This is the hook the codec fine-tuning phase
    /// uses to cascade task feedback into the decoders and encoders.
    pub fn loss_and_input_grad(
        &self,
        samples: &[f64],
        gt: &GroundTruth,
    ) -> Result<(f64, Vec<f64>)> {
        let x = Feature::from_signal(samples);
        match &self.net {
            TaskNet::Classifier(net) => {
                let label = gt
                    .label
                    .ok_or_else(|| Error::MissingGroundTruth("hr_classify".into()))?;
                let trace = net.forward_trace(&x);
                let probs = softmax4(&trace.output().data);
                let loss = cce(&probs, label);
                // d(CCE)/d(logits) = p - onehot
                let mut glogits = probs;
                glogits[label.index()] -= 1.0;
                let gy = Feature {
                    channels: N_CLASSES,
                    len: 1,
                    data: glogits.to_vec(),
                };
                let gx = net.backward(&trace, gy, None);
                Ok((loss, gx.data))
            }
            TaskNet::Peaks(net) => {
                let env = gt
                    .envelope
                    .as_ref()
                    .ok_or_else(|| Error::MissingGroundTruth("rr_peaks".into()))?;
                let trace = net.forward_trace(&x);
                let pred = &trace.output().data;
                let loss = mse(pred, &env.values);
                let scale = 2.0 / env.values.len() as f64;
                let gy = Feature {
                    channels: 1,
                    len: env.values.len(),
                    data: pred
                        .iter()
                        .zip(&env.values)
                        .map(|(&p, &t)| scale * (p - t))
                        .collect(),
                };
                let gx = net.backward(&trace, gy, None);
                Ok((loss, gx.data))
            }
        }
    }

    pub(crate) fn classifier_net(&self) -> Option<&Sequential> {
        match &self.net {
            TaskNet::Classifier(s) => Some(s),
            TaskNet::Peaks(_) => None,
        }
    }

    #[cfg(test)]
    pub(crate) fn classifier_net_mut(&mut self) -> Option<&mut Sequential> {
        match &mut self.net {
            TaskNet::Classifier(s) => Some(s),
            TaskNet::Peaks(_) => None,
        }
    }

    pub(crate) fn peaks_net(&self) -> Option<&UNet1d> {
        match &self.net {
            TaskNet::Peaks(u) => Some(u),
            TaskNet::Classifier(_) => None,
        }
    }
}

pub(crate) fn softmax4(logits: &[f64]) -> [f64; N_CLASSES] {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = [0.0; N_CLASSES];
    let mut sum = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
    out
}

/// Categorical cross-entropy with clamped log.
pub fn cce(probs: &[f64; N_CLASSES], label: ClassLabel) -> f64 {
    -probs[label.index()].max(CCE_EPS).ln()
}

pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64
}

/// Local maxima of an envelope above `threshold`, non-maximum suppressed
/// within `refractory` samples. Returns ascending sample indices.
pub fn extract_peaks(envelope: &PeakEnvelope, threshold: f64, refractory: usize) -> Vec<usize> {
    let v = &envelope.values;
    let mut candidates: Vec<usize> = Vec::new();
    for i in 0..v.len() {
        if v[i] <= threshold {
            continue;
        }
        let left_ok = i == 0 || v[i] > v[i - 1];
        let right_ok = i + 1 == v.len() || v[i] >= v[i + 1];
        if left_ok && right_ok {
            candidates.push(i);
        }
    }
    // Strongest first; keep a candidate only if no kept peak is within range.
    candidates.sort_by(|&a, &b| v[b].partial_cmp(&v[a]).unwrap().then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for &c in &candidates {
        if kept
            .iter()
            .all(|&k| (k as isize - c as isize).unsigned_abs() > refractory)
        {
            kept.push(c);
        }
    }
    kept.sort_unstable();
    kept
}

/// Greedy one-to-one peak matching within `tolerance`; standard
/// precision/recall/F1 with the zero-denominator convention of 0.
pub fn peak_f1(predicted: &[usize], truth: &[usize], tolerance: usize) -> (f64, f64, f64) {
    let mut matched_truth = vec![false; truth.len()];
    let mut matches = 0usize;
    for &p in predicted {
        let mut best: Option<(usize, usize)> = None; // (distance, index)
        for (i, &t) in truth.iter().enumerate() {
            if matched_truth[i] {
                continue;
            }
            let d = (p as isize - t as isize).unsigned_abs();
            if d <= tolerance && best.map_or(true, |(bd, _)| d < bd) {
                best = Some((d, i));
            }
        }
        if let Some((_, i)) = best {
            matched_truth[i] = true;
            matches += 1;
        }
    }
    let precision = if predicted.is_empty() {
        0.0
    } else {
        matches as f64 / predicted.len() as f64
    };
    let recall = if truth.is_empty() {
        0.0
    } else {
        matches as f64 / truth.len() as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    (precision, recall, f1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classify_is_a_probability_vector() {
        let model = TaskModel::new_classifier(0);
        let x: Vec<f64> = (0..1024).map(|i| ((i as f64) * 0.1).sin() * 0.4 + 0.5).collect();
        let probs = model.classify(&x).unwrap();
        assert!(probs.iter().all(|&p| p >= 0.0));
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn permuting_output_head_permutes_argmax() {
        let mut model = TaskModel::new_classifier(1);
        let x: Vec<f64> = (0..1024).map(|i| ((i as f64) * 0.3).cos() * 0.3 + 0.4).collect();
        let before = model.classify(&x).unwrap();
        // Swap class rows 0 and 3 of the dense output head.
        {
            let net = model.classifier_net_mut().unwrap();
            let Some(Layer::Dense(d)) = net.layers.last_mut() else {
                panic!("classifier must end with a dense head")
            };
            let n = d.n_in;
            for j in 0..n {
                d.w.swap(j, 3 * n + j);
            }
            d.b.swap(0, 3);
        }
        let after = model.classify(&x).unwrap();
        assert!((before[0] - after[3]).abs() < 1e-12);
        assert!((before[3] - after[0]).abs() < 1e-12);
        assert!((before[1] - after[1]).abs() < 1e-12);
    }

    #[test]
    fn cce_analytic_values() {
        let one_hot = [1.0, 0.0, 0.0, 0.0];
        assert!(cce(&one_hot, ClassLabel::Normal).abs() < 1e-9);
        let uniform = [0.25; 4];
        assert!((cce(&uniform, ClassLabel::Noisy) - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn identical_envelopes_have_zero_mse() {
        let env = PeakEnvelope::from_peaks(&[100, 500, 900], 1024);
        assert_eq!(mse(&env.values, &env.values), 0.0);
    }

    #[test]
    fn envelope_bounds_and_mass() {
        let peaks = [100usize, 500, 900];
        let env = PeakEnvelope::from_peaks(&peaks, 1024);
        assert!(env.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let mass: f64 = env.values.iter().sum();
        let expect = peaks.len() as f64 * SIGMA_ENV * (2.0 * std::f64::consts::PI).sqrt();
        assert!(
            (mass - expect).abs() / expect < 0.05,
            "mass {mass} vs {expect}"
        );
    }

    #[test]
    fn extract_peaks_inverts_envelope() {
        let truth = vec![100usize, 500, 900];
        let env = PeakEnvelope::from_peaks(&truth, 1024);
        let found = extract_peaks(&env, 0.5, PEAK_REFRACTORY);
        assert_eq!(found.len(), truth.len());
        for (f, t) in found.iter().zip(&truth) {
            assert!((*f as isize - *t as isize).unsigned_abs() <= 2);
        }
    }

    #[test]
    fn extract_peaks_empty_and_suppression() {
        let env = PeakEnvelope {
            values: vec![0.0; 256],
        };
        assert!(extract_peaks(&env, 0.5, PEAK_REFRACTORY).is_empty());

        // Two bumps 10 apart within a 30-sample window: higher one survives.
        let mut values = vec![0.0; 128];
        values[50] = 0.8;
        values[60] = 0.9;
        let env = PeakEnvelope { values };
        let found = extract_peaks(&env, 0.5, 30);
        assert_eq!(found, vec![60]);
    }

    #[test]
    fn peak_f1_conventions() {
        assert_eq!(peak_f1(&[10, 20, 30], &[10, 20, 30], 0), (1.0, 1.0, 1.0));
        assert_eq!(peak_f1(&[], &[5, 9], 3), (0.0, 0.0, 0.0));
        let (p, r, f) = peak_f1(&[100], &[103], 5);
        assert_eq!((p, r, f), (1.0, 1.0, 1.0));
        // One-to-one: a single prediction cannot match two truths.
        let (p, r, _) = peak_f1(&[100], &[99, 101], 5);
        assert_eq!(p, 1.0);
        assert_eq!(r, 0.5);
    }

    #[test]
    fn task_loss_requires_matching_ground_truth() {
        let model = TaskModel::new_classifier(0);
        let gt = GroundTruth {
            label: None,
            envelope: None,
        };
        assert!(matches!(
            model.task_loss(&vec![0.0; 1024], &gt),
            Err(Error::MissingGroundTruth(_))
        ));
    }

    #[test]
    fn frozen_model_rejects_imports() {
        let mut model = TaskModel::new_classifier(0);
        let params = model.export_params();
        model.freeze();
        assert!(model.import_params(&params).is_err());
    }

    #[test]
    fn unet_gradcheck_against_finite_differences() {
        let net = UNet1d::new(3);
        let m = 32;
        let x = Feature {
            channels: 1,
            len: m,
            data: (0..m).map(|i| ((i as f64) * 0.4).sin() * 0.5 + 0.3).collect(),
        };
        let target: Vec<f64> = (0..m).map(|i| if i % 7 == 0 { 0.9 } else { 0.05 }).collect();
        let loss_of = |net: &UNet1d| {
            let y = net.infer(&x);
            mse(&y.data, &target)
        };
        let trace = net.forward_trace(&x);
        let pred = &trace.output().data;
        let scale = 2.0 / m as f64;
        let gy = Feature {
            channels: 1,
            len: m,
            data: pred.iter().zip(&target).map(|(&p, &t)| scale * (p - t)).collect(),
        };
        let mut grads = net.zero_grads();
        net.backward(&trace, gy, Some(&mut grads));
        let mut analytic = Vec::new();
        grads.export_flat(&mut analytic);

        let mut params = Vec::new();
        net.export_params(&mut params);
        let mut probe = net.clone();
        let h = 1e-6;
        for i in (0..params.len()).step_by(17) {
            let orig = params[i];
            params[i] = orig + h;
            probe.import_params(&params).unwrap();
            let lp = loss_of(&probe);
            params[i] = orig - h;
            probe.import_params(&params).unwrap();
            let lm = loss_of(&probe);
            params[i] = orig;
            let numeric = (lp - lm) / (2.0 * h);
            let denom = numeric.abs().max(analytic[i].abs()).max(1e-8);
            assert!(
                (numeric - analytic[i]).abs() / denom < 1e-4,
                "param {i}: {} vs {numeric}",
                analytic[i]
            );
        }
    }

    #[test]
    fn classifier_is_lipschitz_sane() {
        let model = TaskModel::new_classifier(11);
        let x: Vec<f64> = (0..1024).map(|i| ((i as f64) * 0.2).sin() * 0.4 + 0.5).collect();
        let gt = GroundTruth {
            label: Some(ClassLabel::Normal),
            envelope: None,
        };
        let base = model.task_loss(&x, &gt).unwrap();
        let mut xp = x.clone();
        for v in xp.iter_mut() {
            *v += 1e-6;
        }
        let perturbed = model.task_loss(&xp, &gt).unwrap();
        assert!((base - perturbed).abs() < 1e-3);
    }
}
