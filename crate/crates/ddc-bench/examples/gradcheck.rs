// Scratch probe: full-path gradient check of the combined objective.

use ddc_core::codec::{CodecConfig, CodecState};
use ddc_core::data::{generate_segment, GeneratorParams};
use ddc_core::domain::{BoundConfig, ClassLabel};
use ddc_core::tasks::{ground_truth_for, TaskModel};
use ddc_core::training::{phase2_objective, phase2_objective_grads};

fn main() {
    let m = 64;
    let config = CodecConfig::new(m, &[16, 8, 1], vec![3, 4, 5], vec![5, 3, 3]).unwrap();
    let mut state = CodecState::init(config, 21).unwrap();
    println!("params total: {}", state.total_parameters());
    let params = GeneratorParams {
        m,
        mean_rr: 0.08,
        ..GeneratorParams::default()
    };
    let segment = generate_segment(&params, ClassLabel::Normal, 5).unwrap();
    let gt = ground_truth_for(&segment);
    let mut classifier = TaskModel::new_classifier(3);
    let mut peaks = TaskModel::new_peaks(4);
    classifier.freeze();
    peaks.freeze();
    let tasks = vec![classifier, peaks];
    let weights = BoundConfig::default_weights(0.75);

    let (loss, grads) = phase2_objective_grads(&state, &tasks, &segment, &gt, &weights).unwrap();
    println!("objective: {loss}");

    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for (group, g) in &grads {
        let base = state.export_group(group).unwrap();
        for i in (0..base.len()).step_by(7) {
            let mut p = base.clone();
            p[i] = base[i] + h;
            state.import_group(group, &p).unwrap();
            let lp = phase2_objective(&state, &tasks, &segment, &gt, &weights).unwrap();
            p[i] = base[i] - h;
            state.import_group(group, &p).unwrap();
            let lm = phase2_objective(&state, &tasks, &segment, &gt, &weights).unwrap();
            state.import_group(group, &base).unwrap();
            let numeric = (lp - lm) / (2.0 * h);
            let denom = numeric.abs().max(g[i].abs()).max(1e-6);
            let rel = (numeric - g[i]).abs() / denom;
            if rel > worst {
                worst = rel;
                if rel > 1e-4 {
                    println!("  {group}[{i}]: analytic {} numeric {numeric} rel {rel:.2e}", g[i]);
                }
            }
            checked += 1;
        }
    }
    println!("checked {checked} coords, worst rel err {worst:.3e}");
}
