// Scratch timing probe for sizing the desk-scale run.

use std::time::Instant;

use ddc_bench::{desk_codec, desk_segments};
use ddc_core::tasks::TaskModel;
use ddc_core::training::{train_phase1, train_phase2, train_tasks, TrainConfig};

fn main() {
    let n: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(64);
    let segments = desk_segments(n, 7);
    let cfg = TrainConfig {
        epochs_phase1: 1,
        epochs_phase2: 1,
        epochs_phase3: 1,
        epochs_tasks: 1,
        seed: 7,
        ..TrainConfig::default()
    };

    let t = Instant::now();
    let (mut c, mut p, rows) = train_tasks(&segments, &cfg).unwrap();
    println!(
        "task pretrain 1 epoch over {n}: {:?} (cce {:.3}, mse {:.5})",
        t.elapsed(),
        rows[0].classifier_cce,
        rows[0].envelope_mse
    );
    c.freeze();
    p.freeze();
    let tasks = vec![c, p];

    let mut codec = desk_codec(7);
    let t = Instant::now();
    let rep = train_phase1(&mut codec, &segments, &cfg).unwrap();
    println!(
        "phase1 1 epoch over {n}: {:?} (loss {:.3})",
        t.elapsed(),
        rep.epoch_losses[0]
    );

    let t = Instant::now();
    let rep = train_phase2(&mut codec, &tasks, &segments, &cfg).unwrap();
    println!(
        "phase2 1 epoch over {n}: {:?} (loss {:.3})",
        t.elapsed(),
        rep.epoch_losses[0]
    );

    let t = Instant::now();
    let encs = segments
        .iter()
        .map(|s| codec.encode_all(s).unwrap())
        .count();
    println!("encode_all x{encs}: {:?}", t.elapsed());
}
