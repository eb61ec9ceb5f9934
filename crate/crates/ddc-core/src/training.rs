//! Loss functions and the three-phase codec training procedure, plus the
//! task-model pre-training prerequisite.
//!
//! Phase 1 trains all reconstruction parameters on the per-sample relative
//! error summed over non-identity levels. Phase 2 fine-tunes the same
//! parameters on the combined loss, cascading gradients through the frozen
//! task models. Phase 3 freezes everything except the per-level error
//! predictors and regresses them onto the measured weighted task error.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::CodecState;
use crate::domain::{BoundConfig, Segment};
use crate::error::{Error, Result};
use crate::nn::adam::Adam;
use crate::nn::{Feature, SeqGrads, Trace};
use crate::tasks::{ground_truth_for, GroundTruth, TaskModel};

/// Denominator floor in the relative reconstruction error.
pub const RECON_EPS: f64 = 1e-3;

/// Fixed work-chunk size for parallel gradient accumulation. Chunk boundaries
/// (not thread count) define the reduction order, so results are bitwise
/// reproducible on any machine.
const PAR_CHUNK: usize = 8;

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    /// Multiplicative learning-rate decay per optimizer step.
    pub lr_decay: f64,
    pub batch_size: usize,
    pub epochs_phase1: usize,
    pub epochs_phase2: usize,
    pub epochs_phase3: usize,
    /// Epochs for the task-model pre-training prerequisite.
    pub epochs_tasks: usize,
    pub seed: u64,
    pub weights: BoundConfig,
    /// Optional global-norm gradient clip. The relative reconstruction loss
    /// spikes by the inverse denominator floor near zero-valued samples;
    /// clipping keeps those spikes out of the optimizer moments.
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            lr_decay: 1e-5,
            batch_size: 32,
            epochs_phase1: 15,
            epochs_phase2: 20,
            epochs_phase3: 10,
            epochs_tasks: 12,
            seed: 0,
            weights: BoundConfig::default_weights(0.75),
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || self.batch_size == 0 {
            return Err(Error::Config("learning rate and batch size must be positive".into()));
        }
        if !(0.0 < self.adam_beta1 && self.adam_beta1 < 1.0)
            || !(0.0 < self.adam_beta2 && self.adam_beta2 < 1.0)
        {
            return Err(Error::Config("betas must lie in (0, 1)".into()));
        }
        if self.lr_decay < 0.0 {
            return Err(Error::Config("lr decay must be nonnegative".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Loss functions
// ---------------------------------------------------------------------------

/// Per-sample relative reconstruction error, in percent:
/// `(1/M) * sum(|x - x_hat| / max(|x|, 1e-3)) * 100`.
pub fn reconstruction_loss(x: &[f64], x_hat: &[f64]) -> Result<f64> {
    if x.len() != x_hat.len() {
        return Err(Error::LengthMismatch {
            expected: x.len(),
            got: x_hat.len(),
        });
    }
    if x.is_empty() {
        return Err(Error::InvalidArgument("empty signal".into()));
    }
    let sum: f64 = x
        .iter()
        .zip(x_hat)
        .map(|(&a, &b)| (a - b).abs() / a.abs().max(RECON_EPS))
        .sum();
    Ok(sum / x.len() as f64 * 100.0)
}

/// Gradient of [`reconstruction_loss`] with respect to `x_hat`.
fn reconstruction_grad(x: &[f64], x_hat: &[f64], factor: f64, out: &mut [f64]) {
    let scale = factor * 100.0 / x.len() as f64;
    for ((&a, &b), g) in x.iter().zip(x_hat).zip(out.iter_mut()) {
        let s = if b > a {
            1.0
        } else if b < a {
            -1.0
        } else {
            0.0
        };
        *g += scale * s / a.abs().max(RECON_EPS);
    }
}

/// Weighted downstream error: `sum_i w_i * L_i`. Every task present must
/// have a weight.
pub fn weighted_task_loss(
    losses: &BTreeMap<String, f64>,
    weights: &BTreeMap<String, f64>,
) -> Result<f64> {
    let mut total = 0.0;
    for (task, loss) in losses {
        let w = weights
            .get(task)
            .ok_or_else(|| Error::MissingWeight(task.clone()))?;
        total += w * loss;
    }
    Ok(total)
}

/// Combined objective: `w0 * L_R + L_w`.
pub fn combined_loss(l_r: f64, l_w: f64, w0: f64) -> f64 {
    w0 * l_r + l_w
}

/// Pearson correlation of `(L_R, L_w)` pairs.
pub fn correlation_report(per_segment: &[(f64, f64)]) -> Result<f64> {
    let n = per_segment.len();
    if n < 3 {
        return Err(Error::InvalidArgument("need at least 3 points".into()));
    }
    let nf = n as f64;
    let mx = per_segment.iter().map(|p| p.0).sum::<f64>() / nf;
    let my = per_segment.iter().map(|p| p.1).sum::<f64>() / nf;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for &(x, y) in per_segment {
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
        sxy += (x - mx) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::DegenerateCorrelation(
            "zero variance in one coordinate".into(),
        ));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

// ---------------------------------------------------------------------------
// Codec gradients and optimizer
// ---------------------------------------------------------------------------

/// Gradient buffers mirroring [`CodecState`]'s parameter layout.
pub(crate) struct CodecGrads {
    trunk: SeqGrads,
    heads: Vec<(SeqGrads, SeqGrads)>,
    predictors: Vec<SeqGrads>,
    main_pre: SeqGrads,
    tail: SeqGrads,
    adapters: Vec<SeqGrads>,
}

impl CodecGrads {
    pub(crate) fn zeros_like(state: &CodecState) -> CodecGrads {
        CodecGrads {
            trunk: SeqGrads::zeros_like(&state.trunk),
            heads: state
                .heads
                .iter()
                .map(|h| {
                    (
                        SeqGrads::zeros_like(&h.reduce),
                        SeqGrads::zeros_like(&h.to_latent),
                    )
                })
                .collect(),
            predictors: state.predictors.iter().map(SeqGrads::zeros_like).collect(),
            main_pre: SeqGrads::zeros_like(&state.main_pre),
            tail: SeqGrads::zeros_like(&state.tail),
            adapters: state
                .adapters
                .iter()
                .map(|(_, s)| SeqGrads::zeros_like(s))
                .collect(),
        }
    }

    fn add_assign(&mut self, other: &CodecGrads) {
        self.trunk.add_assign(&other.trunk);
        for (a, b) in self.heads.iter_mut().zip(&other.heads) {
            a.0.add_assign(&b.0);
            a.1.add_assign(&b.1);
        }
        for (a, b) in self.predictors.iter_mut().zip(&other.predictors) {
            a.add_assign(b);
        }
        self.main_pre.add_assign(&other.main_pre);
        self.tail.add_assign(&other.tail);
        for (a, b) in self.adapters.iter_mut().zip(&other.adapters) {
            a.add_assign(b);
        }
    }

    fn scale(&mut self, f: f64) {
        self.trunk.scale(f);
        for (a, b) in self.heads.iter_mut() {
            a.scale(f);
            b.scale(f);
        }
        for p in self.predictors.iter_mut() {
            p.scale(f);
        }
        self.main_pre.scale(f);
        self.tail.scale(f);
        for a in self.adapters.iter_mut() {
            a.scale(f);
        }
    }

    /// Flatten one named group, matching [`CodecState::export_group`] order.
    pub(crate) fn export_group(&self, state: &CodecState, name: &str) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        if name == "trunk" {
            self.trunk.export_flat(&mut out);
        } else if name == "decoder.main" {
            self.main_pre.export_flat(&mut out);
            self.tail.export_flat(&mut out);
        } else if let Some(cg) = name.strip_prefix("head.cg").and_then(|s| s.parse().ok()) {
            let idx = state.head_index(cg)?;
            self.heads[idx].0.export_flat(&mut out);
            self.heads[idx].1.export_flat(&mut out);
        } else if let Some(cg) = name
            .strip_prefix("predictor.cg")
            .and_then(|s| s.parse().ok())
        {
            let idx = state.head_index(cg)?;
            self.predictors[idx].export_flat(&mut out);
        } else if let Some(cg) = name
            .strip_prefix("decoder.adapter.cg")
            .and_then(|s| s.parse::<u32>().ok())
        {
            let idx = state
                .adapters
                .iter()
                .position(|(acg, _)| *acg == cg)
                .ok_or(Error::UnknownLevel(cg))?;
            self.adapters[idx].export_flat(&mut out);
        } else {
            return Err(Error::Config(format!("unknown parameter group {name}")));
        }
        Ok(out)
    }
}

/// Adam state for a chosen set of parameter groups.
struct CodecOptimizer {
    groups: Vec<String>,
    adams: Vec<Adam>,
    clip_norm: Option<f64>,
}

impl CodecOptimizer {
    fn new(state: &CodecState, groups: Vec<String>, cfg: &TrainConfig) -> Result<CodecOptimizer> {
        let adams = groups
            .iter()
            .map(|g| {
                let n = state.export_group(g)?.len();
                Ok(Adam::new(
                    n,
                    cfg.learning_rate,
                    cfg.adam_beta1,
                    cfg.adam_beta2,
                    cfg.lr_decay,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(CodecOptimizer {
            groups,
            adams,
            clip_norm: cfg.clip_norm,
        })
    }

    fn step(&mut self, state: &mut CodecState, grads: &CodecGrads) -> Result<()> {
        let mut flat: Vec<Vec<f64>> = self
            .groups
            .iter()
            .map(|name| grads.export_group(state, name))
            .collect::<Result<_>>()?;
        if let Some(clip) = self.clip_norm {
            let norm = flat
                .iter()
                .flat_map(|g| g.iter())
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            if norm > clip {
                let scale = clip / norm;
                for g in flat.iter_mut() {
                    for v in g.iter_mut() {
                        *v *= scale;
                    }
                }
            }
        }
        for ((name, adam), g) in self.groups.iter().zip(&mut self.adams).zip(&flat) {
            let mut params = state.export_group(name)?;
            adam.step(&mut params, g);
            state.import_group(name, &params)?;
        }
        Ok(())
    }
}

fn reconstruction_groups(state: &CodecState) -> Vec<String> {
    state
        .group_names()
        .into_iter()
        .filter(|g| !g.starts_with("predictor."))
        .collect()
}

fn predictor_groups(state: &CodecState) -> Vec<String> {
    state
        .group_names()
        .into_iter()
        .filter(|g| g.starts_with("predictor."))
        .collect()
}

// ---------------------------------------------------------------------------
// Forward/backward through one level path
// ---------------------------------------------------------------------------

enum DecTrace {
    Main { pre: Trace, tail: Trace },
    Adapter { idx: usize, adapter: Trace, tail: Trace },
}

struct LevelPass {
    head_idx: usize,
    reduce: Trace,
    to_latent: Trace,
    dec: DecTrace,
}

impl LevelPass {
    fn reconstruction(&self) -> &Feature {
        match &self.dec {
            DecTrace::Main { tail, .. } | DecTrace::Adapter { tail, .. } => tail.output(),
        }
    }
}

fn forward_level(state: &CodecState, trunk_out: &Feature, cg: u32) -> Result<LevelPass> {
    let head_idx = state.head_index(cg)?;
    let head = &state.heads[head_idx];
    let reduce = head.reduce.forward_trace(trunk_out);
    let to_latent = head.to_latent.forward_trace(reduce.output());
    let latent = to_latent.output();
    let dec = match state
        .adapters
        .iter()
        .position(|(acg, _)| *acg == cg)
    {
        None => {
            let pre = state.main_pre.forward_trace(latent);
            let tail = state.tail.forward_trace(pre.output());
            DecTrace::Main { pre, tail }
        }
        Some(idx) => {
            let adapter = state.adapters[idx].1.forward_trace(latent);
            let tail = state.tail.forward_trace(adapter.output());
            DecTrace::Adapter { idx, adapter, tail }
        }
    };
    Ok(LevelPass {
        head_idx,
        reduce,
        to_latent,
        dec,
    })
}

/// Backprop one level path; returns the gradient w.r.t. the trunk output.
fn backward_level(
    state: &CodecState,
    pass: &LevelPass,
    g_recon: Feature,
    grads: &mut CodecGrads,
) -> Feature {
    let g_latent = match &pass.dec {
        DecTrace::Main { pre, tail } => {
            let g_join = state.tail.backward(tail, g_recon, Some(&mut grads.tail));
            state
                .main_pre
                .backward(pre, g_join, Some(&mut grads.main_pre))
        }
        DecTrace::Adapter { idx, adapter, tail } => {
            let g_join = state.tail.backward(tail, g_recon, Some(&mut grads.tail));
            state.adapters[*idx]
                .1
                .backward(adapter, g_join, Some(&mut grads.adapters[*idx]))
        }
    };
    let head = &state.heads[pass.head_idx];
    let g_feats = head.to_latent.backward(
        &pass.to_latent,
        g_latent,
        Some(&mut grads.heads[pass.head_idx].1),
    );
    head.reduce.backward(
        &pass.reduce,
        g_feats,
        Some(&mut grads.heads[pass.head_idx].0),
    )
}

/// Per-level loss components for one segment.
#[derive(Debug, Clone, Default)]
struct SegmentStats {
    /// cg -> (L_R, L_w)
    per_level: BTreeMap<u32, (f64, f64)>,
}

/// Accumulate the phase objective and its parameter gradients for one segment.
/// `tasks = None` gives the phase-1 objective `sum_levels L_R`; with tasks it
/// is the phase-2 objective `sum_levels (w0 * L_R + L_w)`.
fn accumulate_segment(
    state: &CodecState,
    segment: &Segment,
    gt: &GroundTruth,
    tasks: Option<&[TaskModel]>,
    weights: &BoundConfig,
    grads: &mut CodecGrads,
) -> Result<SegmentStats> {
    let x = Feature::from_signal(&segment.samples);
    let trunk_trace = state.trunk.forward_trace(&x);
    let trunk_out = trunk_trace.output().clone();
    let mut g_trunk_out = Feature::zeros(trunk_out.channels, trunk_out.len);
    let mut stats = SegmentStats::default();

    for level in state.config.levels_desc() {
        if level.is_identity {
            continue;
        }
        let pass = forward_level(state, &trunk_out, level.cg)?;
        let x_hat = pass.reconstruction();
        let l_r = reconstruction_loss(&segment.samples, &x_hat.data)?;
        let mut g_recon = Feature::zeros(1, x_hat.len);
        let mut l_w = 0.0;
        match tasks {
            None => {
                reconstruction_grad(&segment.samples, &x_hat.data, 1.0, &mut g_recon.data);
            }
            Some(tasks) => {
                let w0 = weights.reconstruction_weight;
                reconstruction_grad(&segment.samples, &x_hat.data, w0, &mut g_recon.data);
                for task in tasks {
                    let w = *weights
                        .task_weights
                        .get(task.task_id.as_str())
                        .ok_or_else(|| Error::MissingWeight(task.task_id.as_str().into()))?;
                    if w == 0.0 {
                        continue;
                    }
                    let (loss, gx) = task.loss_and_input_grad(&x_hat.data, gt)?;
                    l_w += w * loss;
                    for (g, d) in g_recon.data.iter_mut().zip(&gx) {
                        *g += w * d;
                    }
                }
            }
        }
        stats.per_level.insert(level.cg, (l_r, l_w));
        let g = backward_level(state, &pass, g_recon, grads);
        for (a, b) in g_trunk_out.data.iter_mut().zip(&g.data) {
            *a += b;
        }
    }
    state
        .trunk
        .backward(&trunk_trace, g_trunk_out, Some(&mut grads.trunk));
    Ok(stats)
}

/// Phase-2 objective value for one segment (no gradients). Used by tests and
/// the finite-difference gradient check.
pub fn phase2_objective(
    state: &CodecState,
    tasks: &[TaskModel],
    segment: &Segment,
    gt: &GroundTruth,
    weights: &BoundConfig,
) -> Result<f64> {
    let trunk_out = state.trunk.infer(&Feature::from_signal(&segment.samples));
    let mut total = 0.0;
    for level in state.config.levels_desc() {
        if level.is_identity {
            continue;
        }
        let pass = forward_level(state, &trunk_out, level.cg)?;
        let x_hat = &pass.reconstruction().data;
        let l_r = reconstruction_loss(&segment.samples, x_hat)?;
        let mut losses = BTreeMap::new();
        for task in tasks {
            losses.insert(task.task_id.as_str().to_string(), task.task_loss(x_hat, gt)?);
        }
        let l_w = weighted_task_loss(&losses, &weights.task_weights)?;
        total += combined_loss(l_r, l_w, weights.reconstruction_weight);
    }
    Ok(total)
}

/// Analytic gradients of the phase-2 objective per parameter group.
pub fn phase2_objective_grads(
    state: &CodecState,
    tasks: &[TaskModel],
    segment: &Segment,
    gt: &GroundTruth,
    weights: &BoundConfig,
) -> Result<(f64, BTreeMap<String, Vec<f64>>)> {
    let mut grads = CodecGrads::zeros_like(state);
    let stats = accumulate_segment(state, segment, gt, Some(tasks), weights, &mut grads)?;
    let total = stats
        .per_level
        .values()
        .map(|&(l_r, l_w)| combined_loss(l_r, l_w, weights.reconstruction_weight))
        .sum();
    let mut out = BTreeMap::new();
    for name in reconstruction_groups(state) {
        out.insert(name.clone(), grads.export_group(state, &name)?);
    }
    Ok((total, out))
}

// ---------------------------------------------------------------------------
// Metrics log
// ---------------------------------------------------------------------------

/// One epoch of the training metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub phase: u8,
    pub epoch: usize,
    /// cg -> (L_R, L_w, L_c)
    pub per_level: BTreeMap<u32, (f64, f64, f64)>,
    pub predictor_mse: Option<f64>,
}

/// Write rows as CSV: `epoch,phase,cg,l_r,l_w,l_c,predictor_mse`.
pub fn write_metrics_csv(rows: &[MetricsRow], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "epoch,phase,cg,l_r,l_w,l_c,predictor_mse")?;
    for row in rows {
        let pm = row
            .predictor_mse
            .map(|v| v.to_string())
            .unwrap_or_default();
        for (cg, (l_r, l_w, l_c)) in &row.per_level {
            writeln!(
                f,
                "{},{},{},{},{},{},{}",
                row.epoch, row.phase, cg, l_r, l_w, l_c, pm
            )?;
        }
        if row.per_level.is_empty() {
            writeln!(f, "{},{},,,,,{}", row.epoch, row.phase, pm)?;
        }
    }
    Ok(())
}

/// Outcome of one training phase.
#[derive(Debug, Clone)]
pub struct PhaseReport {
    pub phase: u8,
    /// Mean objective per epoch, in order.
    pub epoch_losses: Vec<f64>,
    pub metrics: Vec<MetricsRow>,
}

// ---------------------------------------------------------------------------
// Batching helpers
// ---------------------------------------------------------------------------

fn shuffled_batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx.chunks(batch).map(|c| c.to_vec()).collect()
}

fn run_codec_phase(
    state: &mut CodecState,
    segments: &[Segment],
    tasks: Option<&[TaskModel]>,
    cfg: &TrainConfig,
    epochs: usize,
    phase: u8,
) -> Result<PhaseReport> {
    cfg.validate()?;
    if segments.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let gts: Vec<GroundTruth> = segments.iter().map(ground_truth_for).collect();
    let mut optimizer = CodecOptimizer::new(state, reconstruction_groups(state), cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (phase as u64) << 56);
    let mut epoch_losses = Vec::with_capacity(epochs);
    let mut metrics = Vec::with_capacity(epochs);

    for epoch in 0..epochs {
        let mut loss_sum = 0.0;
        let mut level_sums: BTreeMap<u32, (f64, f64)> = BTreeMap::new();
        for batch in shuffled_batches(segments.len(), cfg.batch_size, &mut rng) {
            let chunk_results: Vec<Result<(CodecGrads, Vec<SegmentStats>)>> = batch
                .par_chunks(PAR_CHUNK)
                .map(|chunk| {
                    let mut grads = CodecGrads::zeros_like(state);
                    let mut stats = Vec::with_capacity(chunk.len());
                    for &i in chunk {
                        stats.push(accumulate_segment(
                            state,
                            &segments[i],
                            &gts[i],
                            tasks,
                            &cfg.weights,
                            &mut grads,
                        )?);
                    }
                    Ok((grads, stats))
                })
                .collect();
            let mut grads = CodecGrads::zeros_like(state);
            for res in chunk_results {
                let (g, stats) = res?;
                grads.add_assign(&g);
                for s in stats {
                    for (cg, (l_r, l_w)) in s.per_level {
                        let e = level_sums.entry(cg).or_insert((0.0, 0.0));
                        e.0 += l_r;
                        e.1 += l_w;
                        loss_sum += match tasks {
                            None => l_r,
                            Some(_) => combined_loss(l_r, l_w, cfg.weights.reconstruction_weight),
                        };
                    }
                }
            }
            grads.scale(1.0 / batch.len() as f64);
            optimizer.step(state, &grads)?;
        }
        let mean = loss_sum / segments.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        epoch_losses.push(mean);
        let n = segments.len() as f64;
        let per_level = level_sums
            .into_iter()
            .map(|(cg, (lr_sum, lw_sum))| {
                let l_r = lr_sum / n;
                let l_w = lw_sum / n;
                let l_c = match tasks {
                    None => l_r,
                    Some(_) => combined_loss(l_r, l_w, cfg.weights.reconstruction_weight),
                };
                (cg, (l_r, l_w, l_c))
            })
            .collect();
        metrics.push(MetricsRow {
            phase,
            epoch,
            per_level,
            predictor_mse: None,
        });
    }
    Ok(PhaseReport {
        phase,
        epoch_losses,
        metrics,
    })
}

// ---------------------------------------------------------------------------
// The three phases
// ---------------------------------------------------------------------------

/// Phase 1: train all reconstruction parameters on the summed per-level
/// reconstruction loss. Predictor heads stay untouched.
pub fn train_phase1(
    state: &mut CodecState,
    segments: &[Segment],
    cfg: &TrainConfig,
) -> Result<PhaseReport> {
    if state.phase != 0 {
        return Err(Error::Config(format!(
            "phase 1 expects a freshly initialized codec, found phase {}",
            state.phase
        )));
    }
    let report = run_codec_phase(state, segments, None, cfg, cfg.epochs_phase1, 1)?;
    state.phase = 1;
    Ok(report)
}

/// Phase 2: fine-tune reconstruction parameters on the combined loss with
/// gradients cascading through the frozen task models.
pub fn train_phase2(
    state: &mut CodecState,
    tasks: &[TaskModel],
    segments: &[Segment],
    cfg: &TrainConfig,
) -> Result<PhaseReport> {
    if state.phase != 1 {
        return Err(Error::Config(format!(
            "phase 2 requires a phase-1 checkpoint, found phase {}",
            state.phase
        )));
    }
    if tasks.is_empty() {
        return Err(Error::Config("phase 2 needs at least one task model".into()));
    }
    for task in tasks {
        if !task.frozen {
            return Err(Error::Config(format!(
                "task {} must be frozen for phase 2",
                task.task_id.as_str()
            )));
        }
    }
    let before: Vec<[u8; 32]> = tasks.iter().map(TaskModel::checksum).collect();
    let report = run_codec_phase(state, segments, Some(tasks), cfg, cfg.epochs_phase2, 2)?;
    for (task, sum) in tasks.iter().zip(&before) {
        assert_eq!(
            task.checksum(),
            *sum,
            "frozen task parameters drifted during phase 2"
        );
    }
    state.phase = 2;
    Ok(report)
}

/// Phase 3: freeze the compressor and regress each level's predictor head
/// onto the measured weighted task error of that level's reconstruction.
pub fn train_phase3(
    state: &mut CodecState,
    tasks: &[TaskModel],
    segments: &[Segment],
    cfg: &TrainConfig,
) -> Result<PhaseReport> {
    cfg.validate()?;
    if state.phase != 2 {
        return Err(Error::Config(format!(
            "phase 3 requires a phase-2 checkpoint, found phase {}",
            state.phase
        )));
    }
    for task in tasks {
        if !task.frozen {
            return Err(Error::Config(format!(
                "task {} must be frozen for phase 3",
                task.task_id.as_str()
            )));
        }
    }
    if segments.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let frozen_groups: Vec<String> = reconstruction_groups(state);
    let frozen_sums: Vec<[u8; 32]> = frozen_groups
        .iter()
        .map(|g| state.group_checksum(g))
        .collect::<Result<_>>()?;

    // The compressor is frozen, so per-level features and targets are
    // constants; compute them once.
    let gts: Vec<GroundTruth> = segments.iter().map(ground_truth_for).collect();
    let level_cgs: Vec<u32> = state
        .config
        .levels_desc()
        .iter()
        .filter(|l| !l.is_identity)
        .map(|l| l.cg)
        .collect();
    let prepared: Vec<Result<Vec<(Feature, f64)>>> = segments
        .par_iter()
        .zip(&gts)
        .map(|(seg, gt)| {
            let trunk_out = state.trunk.infer(&Feature::from_signal(&seg.samples));
            let mut rows = Vec::with_capacity(level_cgs.len());
            for &cg in &level_cgs {
                let idx = state.head_index(cg)?;
                let feats = state.heads[idx].reduce.infer(&trunk_out);
                let latent = state.heads[idx].to_latent.infer(&feats);
                let x_hat = state.decode_latent(cg, &latent.data)?;
                let mut losses = BTreeMap::new();
                for task in tasks {
                    losses.insert(
                        task.task_id.as_str().to_string(),
                        task.task_loss(&x_hat, gt)?,
                    );
                }
                let target = weighted_task_loss(&losses, &cfg.weights.task_weights)?;
                rows.push((feats, target));
            }
            Ok(rows)
        })
        .collect();
    let prepared: Vec<Vec<(Feature, f64)>> = prepared.into_iter().collect::<Result<_>>()?;

    let mut optimizer = CodecOptimizer::new(state, predictor_groups(state), cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 3u64 << 56);
    let mut epoch_losses = Vec::new();
    let mut metrics = Vec::new();
    let pairs_per_segment = level_cgs.len().max(1);

    for epoch in 0..cfg.epochs_phase3 {
        let mut mse_sum = 0.0;
        for batch in shuffled_batches(segments.len(), cfg.batch_size, &mut rng) {
            let mut grads = CodecGrads::zeros_like(state);
            for &i in &batch {
                for (k, &cg) in level_cgs.iter().enumerate() {
                    let idx = state.head_index(cg)?;
                    let (feats, target) = &prepared[i][k];
                    let trace = state.predictors[idx].forward_trace(feats);
                    let p = trace.output().data[0];
                    let err = p - target;
                    mse_sum += err * err;
                    let gy = Feature {
                        channels: 1,
                        len: 1,
                        data: vec![2.0 * err],
                    };
                    state.predictors[idx].backward(
                        &trace,
                        gy,
                        Some(&mut grads.predictors[idx]),
                    );
                }
            }
            grads.scale(1.0 / (batch.len() * pairs_per_segment) as f64);
            optimizer.step(state, &grads)?;
        }
        let mse = mse_sum / (segments.len() * pairs_per_segment) as f64;
        if !mse.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        epoch_losses.push(mse);
        metrics.push(MetricsRow {
            phase: 3,
            epoch,
            per_level: BTreeMap::new(),
            predictor_mse: Some(mse),
        });
    }

    for (group, sum) in frozen_groups.iter().zip(&frozen_sums) {
        assert_eq!(
            state.group_checksum(group)?,
            *sum,
            "non-predictor group {group} drifted during phase 3"
        );
    }
    state.phase = 3;
    Ok(report_from(3, epoch_losses, metrics))
}

fn report_from(phase: u8, epoch_losses: Vec<f64>, metrics: Vec<MetricsRow>) -> PhaseReport {
    PhaseReport {
        phase,
        epoch_losses,
        metrics,
    }
}

/// Measured weighted task error of one level's reconstruction, through the
/// same wire-precision path the cloud uses.
pub fn measured_weighted_loss(
    state: &CodecState,
    tasks: &[TaskModel],
    segment: &Segment,
    gt: &GroundTruth,
    cg: u32,
    weights: &BoundConfig,
) -> Result<f64> {
    let level = state.config.level(cg)?;
    let latent = state.encode(segment, &level)?;
    let record = crate::codec::LevelEncoding {
        level,
        latent,
        predicted_error: 0.0,
    }
    .to_record(segment.id);
    let x_hat = state.decode(&record)?;
    let mut losses = BTreeMap::new();
    for task in tasks {
        losses.insert(task.task_id.as_str().to_string(), task.task_loss(&x_hat, gt)?);
    }
    weighted_task_loss(&losses, &weights.task_weights)
}

// ---------------------------------------------------------------------------
// Task-model pre-training
// ---------------------------------------------------------------------------

/// Log row of the task pre-training prerequisite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskTrainRow {
    pub epoch: usize,
    pub classifier_cce: f64,
    pub envelope_mse: f64,
}

/// Train both downstream-task models on raw segments. Returns them unfrozen;
/// callers freeze before codec fine-tuning.
pub fn train_tasks(
    segments: &[Segment],
    cfg: &TrainConfig,
) -> Result<(TaskModel, TaskModel, Vec<TaskTrainRow>)> {
    cfg.validate()?;
    if segments.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let gts: Vec<GroundTruth> = segments.iter().map(ground_truth_for).collect();
    let mut classifier = TaskModel::new_classifier(cfg.seed ^ 0xC1A5);
    let mut peaks = TaskModel::new_peaks(cfg.seed ^ 0x9EA6);

    let mut cls_opt = {
        let n = classifier.param_count();
        Adam::new(n, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.lr_decay)
    };
    let mut peak_opt = {
        let n = peaks.param_count();
        Adam::new(n, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.lr_decay)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7A5C);
    let mut rows = Vec::with_capacity(cfg.epochs_tasks);
    for epoch in 0..cfg.epochs_tasks {
        let mut cce_sum = 0.0;
        let mut mse_sum = 0.0;
        for batch in shuffled_batches(segments.len(), cfg.batch_size, &mut rng) {
            // Classifier step.
            let cls_net = classifier.classifier_net().unwrap();
            let chunk_results: Vec<(SeqGrads, f64)> = batch
                .par_chunks(PAR_CHUNK)
                .map(|chunk| {
                    let mut grads = SeqGrads::zeros_like(cls_net);
                    let mut loss = 0.0;
                    for &i in chunk {
                        if let Some(label) = gts[i].label {
                            let x = Feature::from_signal(&segments[i].samples);
                            let trace = cls_net.forward_trace(&x);
                            let probs = crate::tasks::softmax4(&trace.output().data);
                            loss += crate::tasks::cce(&probs, label);
                            let mut glogits = probs;
                            glogits[label.index()] -= 1.0;
                            let gy = Feature {
                                channels: crate::tasks::N_CLASSES,
                                len: 1,
                                data: glogits.to_vec(),
                            };
                            cls_net.backward(&trace, gy, Some(&mut grads));
                        }
                    }
                    (grads, loss)
                })
                .collect();
            let mut grads = SeqGrads::zeros_like(cls_net);
            for (g, l) in chunk_results {
                grads.add_assign(&g);
                cce_sum += l;
            }
            grads.scale(1.0 / batch.len() as f64);
            let mut flat = Vec::new();
            grads.export_flat(&mut flat);
            let mut params = classifier.export_params();
            cls_opt.step(&mut params, &flat);
            classifier.import_params(&params)?;

            // Peak-envelope step.
            let unet = peaks.peaks_net().unwrap();
            let chunk_results: Vec<(crate::tasks::UNetGrads, f64)> = batch
                .par_chunks(PAR_CHUNK)
                .map(|chunk| {
                    let mut grads = unet.zero_grads();
                    let mut loss = 0.0;
                    for &i in chunk {
                        if let Some(env) = &gts[i].envelope {
                            let x = Feature::from_signal(&segments[i].samples);
                            let trace = unet.forward_trace(&x);
                            let pred = &trace.output().data;
                            loss += crate::tasks::mse(pred, &env.values);
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
                            unet.backward(&trace, gy, Some(&mut grads));
                        }
                    }
                    (grads, loss)
                })
                .collect();
            let mut grads = unet.zero_grads();
            for (g, l) in chunk_results {
                grads.add_assign(&g);
                mse_sum += l;
            }
            grads.scale(1.0 / batch.len() as f64);
            let mut flat = Vec::new();
            grads.export_flat(&mut flat);
            let mut params = peaks.export_params();
            peak_opt.step(&mut params, &flat);
            peaks.import_params(&params)?;
        }
        let row = TaskTrainRow {
            epoch,
            classifier_cce: cce_sum / segments.len() as f64,
            envelope_mse: mse_sum / segments.len() as f64,
        };
        if !row.classifier_cce.is_finite() || !row.envelope_mse.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        rows.push(row);
    }
    Ok((classifier, peaks, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::CodecConfig;
    use crate::data::{generate_dataset, GeneratorParams};
    use crate::tasks::TaskId;

    #[test]
    fn reconstruction_loss_hand_arithmetic() {
        assert_eq!(reconstruction_loss(&[1.0; 8], &[1.0; 8]).unwrap(), 0.0);
        let l = reconstruction_loss(&[1.0; 4], &[0.9; 4]).unwrap();
        assert!((l - 10.0).abs() < 1e-9);
        let l = reconstruction_loss(&[0.5, 1.0], &[0.4, 1.1]).unwrap();
        assert!((l - 15.0).abs() < 1e-9);
        assert!(reconstruction_loss(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn weighted_task_loss_hand_arithmetic() {
        let mut losses = BTreeMap::new();
        losses.insert("a".to_string(), 2.0);
        losses.insert("b".to_string(), 3.0);
        let mut weights = BTreeMap::new();
        weights.insert("a".to_string(), 0.5);
        weights.insert("b".to_string(), 1.0);
        assert!((weighted_task_loss(&losses, &weights).unwrap() - 4.0).abs() < 1e-12);

        let mut single = BTreeMap::new();
        single.insert("a".to_string(), 7.0);
        let mut w1 = BTreeMap::new();
        w1.insert("a".to_string(), 1.0);
        assert_eq!(weighted_task_loss(&single, &w1).unwrap(), 7.0);

        let mut zero = weights.clone();
        zero.insert("a".to_string(), 0.0);
        zero.insert("b".to_string(), 0.0);
        assert_eq!(weighted_task_loss(&losses, &zero).unwrap(), 0.0);

        weights.remove("b");
        assert!(matches!(
            weighted_task_loss(&losses, &weights),
            Err(Error::MissingWeight(_))
        ));
    }

    #[test]
    fn combined_loss_hand_arithmetic() {
        assert!((combined_loss(10.0, 0.5, 0.1) - 1.5).abs() < 1e-12);
        assert_eq!(combined_loss(10.0, 0.5, 0.0), 0.5);
        assert_eq!(combined_loss(10.0, 0.0, 1.0), 10.0);
    }

    #[test]
    fn correlation_examples() {
        let linear: Vec<(f64, f64)> = (0..10).map(|i| (i as f64, 2.0 * i as f64 + 1.0)).collect();
        assert!((correlation_report(&linear).unwrap() - 1.0).abs() < 1e-12);
        let anti: Vec<(f64, f64)> = (0..10).map(|i| (i as f64, -(i as f64))).collect();
        assert!((correlation_report(&anti).unwrap() + 1.0).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let random: Vec<(f64, f64)> = (0..1000).map(|_| (rng.gen::<f64>(), rng.gen::<f64>())).collect();
        assert!(correlation_report(&random).unwrap().abs() < 0.1);

        assert!(correlation_report(&[(1.0, 2.0), (2.0, 3.0)]).is_err());
        let flat: Vec<(f64, f64)> = (0..5).map(|i| (1.0, i as f64)).collect();
        assert!(matches!(
            correlation_report(&flat),
            Err(Error::DegenerateCorrelation(_))
        ));
    }

    fn tiny_setup() -> (CodecState, Vec<Segment>, TrainConfig) {
        let cfg = CodecConfig::new(64, &[16, 8, 1], vec![4, 6, 8], vec![5, 3, 3]).unwrap();
        let state = CodecState::init(cfg, 7).unwrap();
        let params = GeneratorParams {
            m: 64,
            mean_rr: 0.08,
            ..GeneratorParams::default()
        };
        let segments = generate_dataset(&params, 8, 5).unwrap();
        let tcfg = TrainConfig {
            epochs_phase1: 2,
            epochs_phase2: 2,
            epochs_phase3: 2,
            epochs_tasks: 1,
            batch_size: 4,
            seed: 3,
            ..TrainConfig::default()
        };
        (state, segments, tcfg)
    }

    fn tiny_tasks(m: usize, seed: u64) -> (TaskModel, TaskModel) {
        let _ = m;
        let mut c = TaskModel::new_classifier(seed);
        let mut p = TaskModel::new_peaks(seed ^ 1);
        c.freeze();
        p.freeze();
        (c, p)
    }

    #[test]
    fn phase1_trains_and_leaves_predictors_alone() {
        let (mut state, segments, tcfg) = tiny_setup();
        let pred_sums: Vec<_> = predictor_groups(&state)
            .iter()
            .map(|g| state.group_checksum(g).unwrap())
            .collect();
        let trunk_before = state.group_checksum("trunk").unwrap();
        let report = train_phase1(&mut state, &segments, &tcfg).unwrap();
        assert_eq!(state.phase, 1);
        assert_eq!(report.epoch_losses.len(), 2);
        // Identity level never appears in the objective.
        assert!(report.metrics.iter().all(|m| !m.per_level.contains_key(&1)));
        for (g, sum) in predictor_groups(&state).iter().zip(&pred_sums) {
            assert_eq!(state.group_checksum(g).unwrap(), *sum);
        }
        assert_ne!(state.group_checksum("trunk").unwrap(), trunk_before);
    }

    #[test]
    fn phase_ordering_is_enforced() {
        let (mut state, segments, tcfg) = tiny_setup();
        let (c, p) = tiny_tasks(64, 1);
        let tasks = vec![c, p];
        assert!(train_phase2(&mut state, &tasks, &segments, &tcfg).is_err());
        assert!(train_phase3(&mut state, &tasks, &segments, &tcfg).is_err());
        train_phase1(&mut state, &segments, &tcfg).unwrap();
        assert!(train_phase1(&mut state, &segments, &tcfg).is_err());
        assert!(train_phase3(&mut state, &tasks, &segments, &tcfg).is_err());
    }

    #[test]
    fn phase2_requires_frozen_tasks_and_keeps_them_bit_identical() {
        let (mut state, segments, tcfg) = tiny_setup();
        train_phase1(&mut state, &segments, &tcfg).unwrap();

        let unfrozen = vec![TaskModel::new_classifier(1)];
        assert!(matches!(
            train_phase2(&mut state, &unfrozen, &segments, &tcfg),
            Err(Error::Config(_))
        ));

        let (c, p) = tiny_tasks(64, 1);
        let tasks = vec![c, p];
        let sums: Vec<_> = tasks.iter().map(TaskModel::checksum).collect();
        train_phase2(&mut state, &tasks, &segments, &tcfg).unwrap();
        assert_eq!(state.phase, 2);
        for (t, s) in tasks.iter().zip(&sums) {
            assert_eq!(t.checksum(), *s);
        }
    }

    #[test]
    fn phase3_touches_only_predictors() {
        let (mut state, segments, tcfg) = tiny_setup();
        train_phase1(&mut state, &segments, &tcfg).unwrap();
        let (c, p) = tiny_tasks(64, 1);
        let tasks = vec![c, p];
        train_phase2(&mut state, &tasks, &segments, &tcfg).unwrap();
        let frozen: Vec<_> = reconstruction_groups(&state)
            .iter()
            .map(|g| state.group_checksum(g).unwrap())
            .collect();
        let pred_before: Vec<_> = predictor_groups(&state)
            .iter()
            .map(|g| state.group_checksum(g).unwrap())
            .collect();
        let report = train_phase3(&mut state, &tasks, &segments, &tcfg).unwrap();
        assert_eq!(state.phase, 3);
        assert!(report.metrics.iter().all(|m| m.predictor_mse.is_some()));
        for (g, sum) in reconstruction_groups(&state).iter().zip(&frozen) {
            assert_eq!(state.group_checksum(g).unwrap(), *sum);
        }
        let changed = predictor_groups(&state)
            .iter()
            .zip(&pred_before)
            .any(|(g, sum)| state.group_checksum(g).unwrap() != *sum);
        assert!(changed, "predictors should have trained");
        // Predictions stay nonnegative after training (output ReLU).
        for seg in &segments {
            for enc in state.encode_all(seg).unwrap() {
                assert!(enc.predicted_error >= 0.0);
            }
        }
    }

    #[test]
    fn zero_task_weights_reduce_phase2_objective_to_phase1() {
        let (state, segments, _) = tiny_setup();
        let (c, p) = tiny_tasks(64, 2);
        let tasks = vec![c, p];
        let mut weights = BoundConfig::default_weights(0.75);
        weights.reconstruction_weight = 1.0;
        for w in weights.task_weights.values_mut() {
            *w = 0.0;
        }
        let gt = ground_truth_for(&segments[0]);
        let combined = phase2_objective(&state, &tasks, &segments[0], &gt, &weights).unwrap();

        // Phase-1 objective: plain reconstruction loss summed over levels.
        let mut grads = CodecGrads::zeros_like(&state);
        let stats = accumulate_segment(&state, &segments[0], &gt, None, &weights, &mut grads).unwrap();
        let phase1: f64 = stats.per_level.values().map(|&(l_r, _)| l_r).sum();
        assert!((combined - phase1).abs() < 1e-12);
    }

    #[test]
    fn metrics_csv_writes_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let mut per_level = BTreeMap::new();
        per_level.insert(32u32, (5.0, 0.4, 0.9));
        let rows = vec![MetricsRow {
            phase: 2,
            epoch: 0,
            per_level,
            predictor_mse: None,
        }];
        write_metrics_csv(&rows, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("epoch,phase,cg,l_r,l_w,l_c,predictor_mse"));
        assert!(text.contains("0,2,32,5,0.4,0.9,"));
    }

    #[test]
    fn tasks_pretrain_runs_and_reports() {
        let params = GeneratorParams {
            m: 64,
            mean_rr: 0.08,
            ..GeneratorParams::default()
        };
        let segments = generate_dataset(&params, 8, 21).unwrap();
        let cfg = TrainConfig {
            epochs_tasks: 2,
            batch_size: 4,
            seed: 11,
            ..TrainConfig::default()
        };
        let (c, p, rows) = train_tasks(&segments, &cfg).unwrap();
        assert_eq!(c.task_id, TaskId::HrClassify);
        assert_eq!(p.task_id, TaskId::RrPeaks);
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.classifier_cce.is_finite()));
    }
}
