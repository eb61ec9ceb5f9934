//! Level selection: the deployed prediction-based dynamic policy and the
//! feedback-aware oracles that measure the real task error per level.
//!
//! Both scan levels in descending compression gain and take the first whose
//! error (predicted or measured) does not exceed the configured bound,
//! falling back to no compression. The oracles need the downstream tasks on
//! hand and so exist only as evaluation baselines; the dynamic policy runs on
//! the edge from predictions alone.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::CodecState;
use crate::domain::{BoundConfig, ClassLabel, LevelSpec, Segment};
use crate::error::{Error, Result};
use crate::eval::EvalReport;
use crate::tasks::{ground_truth_for, TaskModel};
use crate::training::measured_weighted_loss;

/// Which selector a sweep runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PolicyKind {
    /// Prediction-based selection (deployable on the edge).
    Dynamic,
    /// Feedback-aware oracle over the full configured level set.
    Oracle,
}

impl PolicyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PolicyKind::Dynamic => "dynamic",
            PolicyKind::Oracle => "oracle",
        }
    }
}

/// Outcome of selecting a level for one segment.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    pub segment_id: u32,
    pub chosen: LevelSpec,
    /// Predicted error of the chosen level (dynamic policy).
    pub predicted_error: Option<f64>,
    /// Measured error per level, descending cg (oracle).
    pub measured: Option<Vec<(LevelSpec, f64)>>,
    /// True iff the identity level was chosen because no other qualified.
    pub fallback_used: bool,
}

/// Scan levels in descending cg and return the first whose predicted error
/// meets the bound (inclusive). The identity level predicts 0 and therefore
/// always qualifies as the fallback.
pub fn select_dynamic(
    segment_id: u32,
    per_level: &[(LevelSpec, f64)],
    configured: &[LevelSpec],
    bound: f64,
) -> Result<SelectionResult> {
    if bound < 0.0 {
        return Err(Error::InvalidArgument("bound must be nonnegative".into()));
    }
    for level in configured {
        if !per_level.iter().any(|(l, _)| l.cg == level.cg) {
            return Err(Error::InvalidArgument(format!(
                "missing level cg={} in predictions",
                level.cg
            )));
        }
    }
    let mut entries: Vec<(LevelSpec, f64)> = per_level.to_vec();
    entries.sort_by(|a, b| b.0.cg.cmp(&a.0.cg));
    let has_non_identity = entries.iter().any(|(l, _)| !l.is_identity);
    for (level, predicted) in &entries {
        if *predicted <= bound {
            return Ok(SelectionResult {
                segment_id,
                chosen: *level,
                predicted_error: Some(*predicted),
                measured: None,
                fallback_used: level.is_identity && has_non_identity,
            });
        }
    }
    // Predictions are nonnegative, so the identity level (predicted 0) always
    // qualifies; reaching here means it was missing from the input.
    let identity = entries
        .iter()
        .find(|(l, _)| l.is_identity)
        .map(|(l, _)| *l)
        .ok_or_else(|| Error::InvalidArgument("missing identity level".into()))?;
    Ok(SelectionResult {
        segment_id,
        chosen: identity,
        predicted_error: Some(0.0),
        measured: None,
        fallback_used: has_non_identity,
    })
}

/// Feedback-aware oracle: decompress the segment at every level in `levels`,
/// measure the weighted task error, and choose the highest gain meeting the
/// bound; identity if none does. With levels {64, 1} this is the 2-level
/// baseline, with {64, 32, 1} the 3-level one.
pub fn select_oracle(
    segment: &Segment,
    levels: &[LevelSpec],
    bound: f64,
    tasks: &[TaskModel],
    codec: &CodecState,
    weights: &BoundConfig,
) -> Result<SelectionResult> {
    if codec.phase == 0 {
        return Err(Error::Config("oracle needs a trained codec".into()));
    }
    if tasks.is_empty() || tasks.iter().any(|t| !t.frozen) {
        return Err(Error::Config("oracle needs trained (frozen) task models".into()));
    }
    if bound < 0.0 {
        return Err(Error::InvalidArgument("bound must be nonnegative".into()));
    }
    let gt = ground_truth_for(segment);
    let mut measured: Vec<(LevelSpec, f64)> = Vec::with_capacity(levels.len());
    for level in levels {
        let loss = measured_weighted_loss(codec, tasks, segment, &gt, level.cg, weights)?;
        measured.push((*level, loss));
    }
    measured.sort_by(|a, b| b.0.cg.cmp(&a.0.cg));
    Ok(choose_with_bound(segment.id, &measured, bound))
}

fn choose_with_bound(
    segment_id: u32,
    measured_desc: &[(LevelSpec, f64)],
    bound: f64,
) -> SelectionResult {
    let has_non_identity = measured_desc.iter().any(|(l, _)| !l.is_identity);
    for (level, loss) in measured_desc {
        if *loss <= bound {
            return SelectionResult {
                segment_id,
                chosen: *level,
                predicted_error: None,
                measured: Some(measured_desc.to_vec()),
                fallback_used: level.is_identity && has_non_identity,
            };
        }
    }
    let identity = measured_desc
        .iter()
        .find(|(l, _)| l.is_identity)
        .map(|(l, _)| *l)
        .expect("oracle level sets include the identity level");
    SelectionResult {
        segment_id,
        chosen: identity,
        predicted_error: None,
        measured: Some(measured_desc.to_vec()),
        fallback_used: has_non_identity,
    }
}

/// Everything a sweep needs about one segment, measured once: predictions per
/// level and the measured weighted loss, classifier loss and predicted class
/// per level.
#[derive(Debug, Clone)]
pub struct SegmentTable {
    pub segment_id: u32,
    pub label: Option<ClassLabel>,
    /// (level, predicted_error), descending cg.
    pub predictions: Vec<(LevelSpec, f64)>,
    /// (level, measured L_w), descending cg.
    pub measured: Vec<(LevelSpec, f64)>,
    /// (level, classifier CCE, predicted class), descending cg; present when
    /// a classifier task participates.
    pub classification: Vec<(LevelSpec, Option<(f64, ClassLabel)>)>,
}

/// Measure every level of every segment once; bound-independent.
pub fn measure_segments(
    codec: &CodecState,
    tasks: &[TaskModel],
    segments: &[Segment],
    weights: &BoundConfig,
) -> Result<Vec<SegmentTable>> {
    if codec.phase == 0 {
        return Err(Error::Config("measurement needs a trained codec".into()));
    }
    if tasks.iter().any(|t| !t.frozen) {
        return Err(Error::Config("measurement needs frozen task models".into()));
    }
    let classifier = tasks
        .iter()
        .find(|t| t.task_id == crate::tasks::TaskId::HrClassify);
    segments
        .par_iter()
        .map(|segment| {
            let gt = ground_truth_for(segment);
            let encodings = codec.encode_all(segment)?;
            let predictions: Vec<(LevelSpec, f64)> = encodings
                .iter()
                .map(|e| (e.level, e.predicted_error))
                .collect();
            let mut measured = Vec::with_capacity(encodings.len());
            let mut classification = Vec::with_capacity(encodings.len());
            for enc in &encodings {
                let record = enc.to_record(segment.id);
                let x_hat = codec.decode(&record)?;
                let mut losses = BTreeMap::new();
                for task in tasks {
                    losses.insert(
                        task.task_id.as_str().to_string(),
                        task.task_loss(&x_hat, &gt)?,
                    );
                }
                let l_w = crate::training::weighted_task_loss(&losses, &weights.task_weights)?;
                measured.push((enc.level, l_w));
                let cls = match (classifier, gt.label) {
                    (Some(c), Some(label)) => {
                        let probs = c.classify(&x_hat)?;
                        let cce = crate::tasks::cce(&probs, label);
                        let arg = probs
                            .iter()
                            .enumerate()
                            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                            .map(|(i, _)| ClassLabel::from_index(i).unwrap())
                            .unwrap();
                        Some((cce, arg))
                    }
                    _ => None,
                };
                classification.push((enc.level, cls));
            }
            Ok(SegmentTable {
                segment_id: segment.id,
                label: segment.label,
                predictions,
                measured,
                classification,
            })
        })
        .collect()
}

/// Restrict a table's level lists to a subset of gains (oracle baselines).
fn restrict(table: &[(LevelSpec, f64)], cgs: &[u32]) -> Vec<(LevelSpec, f64)> {
    table
        .iter()
        .filter(|(l, _)| cgs.contains(&l.cg))
        .cloned()
        .collect()
}

/// One policy evaluated at one bound over a measured table.
pub fn evaluate_at_bound(
    tables: &[SegmentTable],
    bound: f64,
    kind: PolicyKind,
    level_subset: Option<&[u32]>,
) -> Result<EvalReport> {
    if tables.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let mut chosen_cgs = Vec::with_capacity(tables.len());
    let mut losses = Vec::with_capacity(tables.len());
    let mut n_fallback = 0usize;
    for table in tables {
        let selection = match kind {
            PolicyKind::Dynamic => {
                let configured: Vec<LevelSpec> =
                    table.predictions.iter().map(|(l, _)| *l).collect();
                select_dynamic(table.segment_id, &table.predictions, &configured, bound)?
            }
            PolicyKind::Oracle => {
                let measured = match level_subset {
                    Some(cgs) => restrict(&table.measured, cgs),
                    None => table.measured.clone(),
                };
                choose_with_bound(table.segment_id, &measured, bound)
            }
        };
        let measured_at_chosen = table
            .measured
            .iter()
            .find(|(l, _)| l.cg == selection.chosen.cg)
            .map(|(_, loss)| *loss)
            .ok_or(Error::UnknownLevel(selection.chosen.cg))?;
        chosen_cgs.push(selection.chosen.cg);
        losses.push(measured_at_chosen);
        if selection.fallback_used {
            n_fallback += 1;
        }
    }
    let avg_cg = crate::domain::average_cg(&chosen_cgs)?;
    let effective_loss = losses.iter().sum::<f64>() / losses.len() as f64;
    let violation_rate = crate::eval::violation_rate(&losses, bound)?;
    Ok(EvalReport {
        bound,
        policy: kind.as_str().to_string(),
        avg_cg,
        effective_loss,
        violation_rate,
        n_fallback,
        n_segments: tables.len(),
        class_metrics: None,
        cce_quartiles: None,
        peak_metrics: None,
    })
}

/// Run one policy across ascending bounds over the test set.
pub fn sweep(
    bounds: &[f64],
    segments: &[Segment],
    kind: PolicyKind,
    codec: &CodecState,
    tasks: &[TaskModel],
    weights: &BoundConfig,
    level_subset: Option<&[u32]>,
) -> Result<Vec<(f64, EvalReport)>> {
    if !bounds.windows(2).all(|w| w[0] <= w[1]) {
        return Err(Error::InvalidArgument("bounds must be sorted ascending".into()));
    }
    if segments.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let tables = measure_segments(codec, tasks, segments, weights)?;
    bounds
        .iter()
        .map(|&b| Ok((b, evaluate_at_bound(&tables, b, kind, level_subset)?)))
        .collect()
}

/// Write sweep rows as CSV: `bound,policy,avg_cg,effective_loss,violation_rate,n_fallback`.
pub fn write_sweep_csv(rows: &[(f64, EvalReport)], path: &std::path::Path) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "bound,policy,avg_cg,effective_loss,violation_rate,n_fallback")?;
    for (bound, report) in rows {
        writeln!(
            f,
            "{},{},{},{},{},{}",
            bound,
            report.policy,
            report.avg_cg,
            report.effective_loss,
            report.violation_rate,
            report.n_fallback
        )?;
    }
    Ok(())
}
