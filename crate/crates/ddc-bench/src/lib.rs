//! Shared fixtures for the benchmark targets.

use ddc_core::codec::{CodecConfig, CodecState};
use ddc_core::data::{generate_dataset, GeneratorParams};
use ddc_core::domain::Segment;

/// Desk-scale codec with the default architecture, untrained weights.
pub fn desk_codec(seed: u64) -> CodecState {
    let config = CodecConfig::default_for(1024).expect("default config is valid");
    CodecState::init(config, seed).expect("init from valid config")
}

/// Synthetic labeled segments at desk scale.
pub fn desk_segments(n: usize, seed: u64) -> Vec<Segment> {
    generate_dataset(&GeneratorParams::default(), n, seed).expect("valid generator params")
}
