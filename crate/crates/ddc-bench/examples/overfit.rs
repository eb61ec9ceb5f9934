// Scratch probe: overfit a small codec on a handful of segments.

use std::time::Instant;

use ddc_core::codec::{CodecConfig, CodecState};
use ddc_core::data::{generate_dataset, GeneratorParams};
use ddc_core::training::{reconstruction_loss, train_phase1, TrainConfig};

fn main() {
    let mut args = std::env::args().skip(1);
    let m: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(256);
    let epochs: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(200);
    let noise: f64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0.05);
    let lr: f64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0.001);
    let batch: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(5);
    let wander: f64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0.08);
    let n: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(5);
    let params = GeneratorParams {
        m,
        noise_amplitude: noise,
        baseline_wander_amplitude: wander,
        ..GeneratorParams::default()
    };
    let segments = generate_dataset(&params, n, 11).unwrap();
    let config = CodecConfig::default_for(m).unwrap();
    let mut state = CodecState::init(config, 3).unwrap();
    let clip: Option<f64> = std::env::var("CLIP").ok().and_then(|s| s.parse().ok());
    let cfg = TrainConfig {
        epochs_phase1: epochs,
        batch_size: batch,
        seed: 11,
        learning_rate: lr,
        clip_norm: clip,
        ..TrainConfig::default()
    };
    let t = Instant::now();
    let report = train_phase1(&mut state, &segments, &cfg).unwrap();
    println!("{} epochs in {:?}", epochs, t.elapsed());
    for (i, loss) in report.epoch_losses.iter().enumerate() {
        if i % 20 == 0 || i + 1 == report.epoch_losses.len() {
            println!("epoch {i}: objective {loss:.3}");
        }
    }
    // Diagnostics: do latents and reconstructions distinguish segments?
    for seg in segments.iter().take(2) {
        for level in state.config.levels_desc() {
            if level.is_identity {
                continue;
            }
            let latent = state.encode(seg, &level).unwrap();
            let rec = ddc_core::codec::LevelEncoding {
                level,
                latent: latent.clone(),
                predicted_error: 0.0,
            }
            .to_record(seg.id);
            let x_hat = state.decode(&rec).unwrap();
            let stat = |v: &[f64]| {
                let mean = v.iter().sum::<f64>() / v.len() as f64;
                let std = (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>()
                    / v.len() as f64)
                    .sqrt();
                (mean, std)
            };
            let (lm, ls) = stat(&latent);
            let (rm, rs) = stat(&x_hat);
            println!(
                "seg {} cg{}: latent mean {lm:.4} std {ls:.4} | recon mean {rm:.4} std {rs:.4} | first latents {:?}",
                seg.id,
                level.cg,
                &latent[..4.min(latent.len())]
            );
        }
    }

    // Final per-level reconstruction quality.
    for level in state.config.levels_desc() {
        if level.is_identity {
            continue;
        }
        let mut lr_sum = 0.0;
        let mut mae_sum = 0.0;
        for seg in &segments {
            let latent = state.encode(seg, &level).unwrap();
            let rec = ddc_core::codec::LevelEncoding {
                level,
                latent,
                predicted_error: 0.0,
            }
            .to_record(seg.id);
            let x_hat = state.decode(&rec).unwrap();
            lr_sum += reconstruction_loss(&seg.samples, &x_hat).unwrap();
            mae_sum += seg
                .samples
                .iter()
                .zip(&x_hat)
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                / m as f64;
        }
        println!(
            "cg{}: mean L_R {:.3}%  mean MAE {:.5}",
            level.cg,
            lr_sum / n as f64,
            mae_sum / n as f64
        );
    }
}
