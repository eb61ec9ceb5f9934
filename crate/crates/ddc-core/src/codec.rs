//! Multi-level compressor/decompressor.
//!
//! One convolutional trunk of stride-2 stages is shared by every compression
//! level. Each non-identity level owns a small head that reduces the trunk
//! output to its latent, plus a dense predictor that estimates the weighted
//! downstream-task error the cloud would measure after decompressing that
//! level. Decoding runs a main decoder for the shallowest compressed level;
//! deeper levels go through a per-level upsampling adapter that joins the
//! main decoder's shared tail.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{validate_level_set, CompressedRecord, LevelSpec, Segment};
use crate::error::{Error, Result};
use crate::nn::{Conv1d, Dense, Feature, InstanceNorm, Layer, Sequential};

/// Channel width used by adapter stems and deep-level head reductions.
const ADAPTER_STEM: [usize; 2] = [16, 32];

/// Kernel width of the decoder's upsampling convolutions. Wider than the
/// trunk's inner kernels: after nearest-neighbour upsampling the conv is the
/// only interpolation, and 3 taps reconstruct sharp pulses poorly.
const DECODER_KERNEL: usize = 5;

/// Per-level head shape: extra stride-2 reduction stages for levels deeper
/// than the trunk, and the kernel of those reduction convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    /// Filters of the reduction convolutions (deep levels only).
    pub channels: usize,
    /// Kernel of the reduction convolutions; must be odd.
    pub kernel: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            channels: 32,
            kernel: 7,
        }
    }
}

/// Static architecture description of a codec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub m: usize,
    pub levels: Vec<LevelSpec>,
    /// Channel widths of the trunk's stride-2 stages; the stage count must be
    /// `log2` of the smallest non-identity compression gain.
    pub trunk_channels: Vec<usize>,
    /// Kernel size per trunk stage; same length as `trunk_channels`.
    pub kernel_sizes: Vec<usize>,
    /// Head shape per non-identity level, keyed by cg.
    #[serde(default)]
    pub head_configs: BTreeMap<u32, HeadConfig>,
    /// Hidden width of the error predictors; 0 keeps a single dense layer.
    #[serde(default)]
    pub predictor_hidden: usize,
}

impl CodecConfig {
    /// Default desk-scale architecture: levels {64, 32, 1}, trunk /32.
    pub fn default_for(m: usize) -> Result<CodecConfig> {
        CodecConfig::new(m, &[64, 32, 1], vec![16, 24, 32, 48, 64], vec![7, 3, 3, 3, 3])
    }

    pub fn new(
        m: usize,
        cgs: &[u32],
        trunk_channels: Vec<usize>,
        kernel_sizes: Vec<usize>,
    ) -> Result<CodecConfig> {
        let levels = cgs
            .iter()
            .map(|&cg| LevelSpec::new(cg, m))
            .collect::<Result<Vec<_>>>()?;
        let mut head_configs = BTreeMap::new();
        for level in &levels {
            if !level.is_identity {
                head_configs.insert(level.cg, HeadConfig::default());
            }
        }
        let cfg = CodecConfig {
            m,
            levels,
            trunk_channels,
            kernel_sizes,
            head_configs,
            predictor_hidden: 0,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Smallest non-identity compression gain; the trunk downsamples by it.
    pub fn trunk_cg(&self) -> u32 {
        self.levels
            .iter()
            .filter(|l| !l.is_identity)
            .map(|l| l.cg)
            .min()
            .unwrap_or(1)
    }

    /// Levels ordered by descending cg (the selection scan order).
    pub fn levels_desc(&self) -> Vec<LevelSpec> {
        let mut ls = self.levels.clone();
        ls.sort_by(|a, b| b.cg.cmp(&a.cg));
        ls
    }

    pub fn level(&self, cg: u32) -> Result<LevelSpec> {
        self.levels
            .iter()
            .find(|l| l.cg == cg)
            .copied()
            .ok_or(Error::UnknownLevel(cg))
    }

    /// Extra stride-2 stages a level needs beyond the trunk.
    fn depth_beyond_trunk(&self, cg: u32) -> u32 {
        (cg / self.trunk_cg()).trailing_zeros()
    }

    pub fn validate(&self) -> Result<()> {
        validate_level_set(&self.levels, self.m)?;
        let trunk_cg = self.trunk_cg();
        if trunk_cg < 2 || !trunk_cg.is_power_of_two() {
            return Err(Error::Config(format!(
                "smallest non-identity cg must be a power of two >= 2, got {trunk_cg}"
            )));
        }
        let n_stages = trunk_cg.trailing_zeros() as usize;
        if self.trunk_channels.len() != n_stages {
            return Err(Error::Config(format!(
                "trunk needs {n_stages} stride-2 stages (log2 of cg {trunk_cg}), got {}",
                self.trunk_channels.len()
            )));
        }
        if self.kernel_sizes.len() != n_stages {
            return Err(Error::Config("one kernel size per trunk stage".into()));
        }
        if self.kernel_sizes.iter().any(|&k| k % 2 == 0 || k == 0) {
            return Err(Error::Config("kernel sizes must be odd".into()));
        }
        if self.trunk_channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("trunk channels must be positive".into()));
        }
        for level in &self.levels {
            if level.is_identity {
                continue;
            }
            if level.cg % trunk_cg != 0 || !(level.cg / trunk_cg).is_power_of_two() {
                return Err(Error::Config(format!(
                    "level cg {} is not a power-of-two multiple of trunk cg {trunk_cg}",
                    level.cg
                )));
            }
            let head = self
                .head_configs
                .get(&level.cg)
                .ok_or_else(|| Error::Config(format!("missing head config for cg {}", level.cg)))?;
            if head.kernel % 2 == 0 || head.kernel == 0 || head.channels == 0 {
                return Err(Error::Config("head kernel must be odd, channels positive".into()));
            }
            if self.depth_beyond_trunk(level.cg) > 0 && n_stages < 2 {
                return Err(Error::Config(
                    "deep levels need a trunk of at least two stages".into(),
                ));
            }
        }
        Ok(())
    }

    /// Decoder conv widths after each upsample: trunk widths reversed,
    /// deepest dropped, ending in the single output channel.
    fn decoder_widths(&self) -> Vec<usize> {
        let mut widths: Vec<usize> = self
            .trunk_channels
            .iter()
            .rev()
            .skip(1)
            .copied()
            .collect();
        widths.push(1);
        widths
    }
}

/// Encoder head of one non-identity level.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelHead {
    pub cg: u32,
    /// Extra stride-2 reduction stages (empty when the level sits at the
    /// trunk's own gain). Its output is the level's pre-latent feature map.
    pub reduce: Sequential,
    /// Final projection to a single-channel latent.
    pub to_latent: Sequential,
}

/// Output of [`CodecState::encode_all`] for one level.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelEncoding {
    pub level: LevelSpec,
    pub latent: Vec<f64>,
    pub predicted_error: f64,
}

impl LevelEncoding {
    /// Quantize to the record precision that crosses the edge/cloud boundary.
    pub fn to_record(&self, segment_id: u32) -> CompressedRecord {
        CompressedRecord {
            segment_id,
            cg: self.level.cg,
            latent: self.latent.iter().map(|&v| v as f32).collect(),
            predicted_error: self.predicted_error as f32,
        }
    }
}

/// All learnable state of a codec plus its configuration.
///
/// Inference (`encode*`, `decode`, `predict_error`) is read-only and safe to
/// share across threads; training mutates state single-writer.
#[derive(Debug)]
pub struct CodecState {
    pub config: CodecConfig,
    /// Highest completed training phase (0 = freshly initialized).
    pub phase: u8,
    pub(crate) trunk: Sequential,
    /// Non-identity heads, descending cg; predictors parallel to heads.
    pub(crate) heads: Vec<LevelHead>,
    pub(crate) predictors: Vec<Sequential>,
    /// Main decoder entry (latent lift + first upsample stage).
    pub(crate) main_pre: Sequential,
    /// Decoder tail shared by every compressed level.
    pub(crate) tail: Sequential,
    /// Adapters for levels deeper than the trunk, descending cg.
    pub(crate) adapters: Vec<(u32, Sequential)>,
    trunk_passes: AtomicU64,
}

impl Clone for CodecState {
    fn clone(&self) -> Self {
        CodecState {
            config: self.config.clone(),
            phase: self.phase,
            trunk: self.trunk.clone(),
            heads: self.heads.clone(),
            predictors: self.predictors.clone(),
            main_pre: self.main_pre.clone(),
            tail: self.tail.clone(),
            adapters: self.adapters.clone(),
            trunk_passes: AtomicU64::new(0),
        }
    }
}

impl PartialEq for CodecState {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.phase == other.phase
            && self.trunk == other.trunk
            && self.heads == other.heads
            && self.predictors == other.predictors
            && self.main_pre == other.main_pre
            && self.tail == other.tail
            && self.adapters == other.adapters
    }
}

impl CodecState {
    /// Initialize parameters deterministically from a seed.
    pub fn init(config: CodecConfig, seed: u64) -> Result<CodecState> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_stages = config.trunk_channels.len();

        let mut trunk_layers = Vec::new();
        let mut c_prev = 1;
        for (&c, &k) in config.trunk_channels.iter().zip(&config.kernel_sizes) {
            trunk_layers.push(Layer::Conv(Conv1d::new(c_prev, c, k, 2, &mut rng)));
            trunk_layers.push(Layer::Norm(InstanceNorm::new(c)));
            trunk_layers.push(Layer::LeakyRelu);
            c_prev = c;
        }
        let trunk = Sequential::new(trunk_layers);
        let trunk_out = *config.trunk_channels.last().unwrap();

        let mut heads = Vec::new();
        let mut predictors = Vec::new();
        for level in config.levels_desc() {
            if level.is_identity {
                continue;
            }
            let depth = config.depth_beyond_trunk(level.cg);
            let head_cfg = config.head_configs[&level.cg];
            let mut reduce_layers = Vec::new();
            let mut c = trunk_out;
            for _ in 0..depth {
                reduce_layers.push(Layer::Conv(Conv1d::new(
                    c,
                    head_cfg.channels,
                    head_cfg.kernel,
                    2,
                    &mut rng,
                )));
                reduce_layers.push(Layer::LeakyRelu);
                c = head_cfg.channels;
            }
            let to_latent = Sequential::new(vec![Layer::Conv(Conv1d::new(c, 1, 3, 1, &mut rng))]);
            heads.push(LevelHead {
                cg: level.cg,
                reduce: Sequential::new(reduce_layers),
                to_latent,
            });

            let mut pred_layers = vec![Layer::GlobalAvgPool];
            if config.predictor_hidden > 0 {
                pred_layers.push(Layer::Dense(Dense::new(c, config.predictor_hidden, &mut rng)));
                pred_layers.push(Layer::Relu);
                pred_layers.push(Layer::Dense(Dense::new(config.predictor_hidden, 1, &mut rng)));
            } else {
                pred_layers.push(Layer::Dense(Dense::new(c, 1, &mut rng)));
            }
            pred_layers.push(Layer::Relu);
            let mut predictor = Sequential::new(pred_layers);
            // Bias the final dense positive so the output ReLU starts live.
            if let Some(Layer::Dense(d)) = predictor
                .layers
                .iter_mut()
                .rev()
                .find(|l| matches!(l, Layer::Dense(_)))
            {
                d.b[0] = 0.5;
            }
            predictors.push(predictor);
        }

        let widths = config.decoder_widths();
        let mut main_pre_layers = vec![
            Layer::Conv(Conv1d::new(1, trunk_out, DECODER_KERNEL, 1, &mut rng)),
            Layer::LeakyRelu,
        ];
        let mut tail_layers = Vec::new();
        let mut c = trunk_out;
        for (i, &w) in widths.iter().enumerate() {
            let dst = if i == 0 { &mut main_pre_layers } else { &mut tail_layers };
            dst.push(Layer::Upsample2);
            dst.push(Layer::Conv(Conv1d::new(c, w, DECODER_KERNEL, 1, &mut rng)));
            if w != 1 {
                dst.push(Layer::LeakyRelu);
            }
            c = w;
        }
        let join_channels = if n_stages >= 2 { widths[0] } else { trunk_out };

        let mut adapters = Vec::new();
        for level in config.levels_desc() {
            if level.is_identity {
                continue;
            }
            let depth = config.depth_beyond_trunk(level.cg);
            if depth == 0 {
                continue;
            }
            let mut layers = vec![
                Layer::Conv(Conv1d::new(1, ADAPTER_STEM[0], 7, 1, &mut rng)),
                Layer::LeakyRelu,
                Layer::Conv(Conv1d::new(ADAPTER_STEM[0], ADAPTER_STEM[1], 3, 1, &mut rng)),
                Layer::LeakyRelu,
            ];
            let mut c = ADAPTER_STEM[1];
            for j in 0..depth {
                let w = if j + 1 == depth { join_channels } else { ADAPTER_STEM[1] };
                layers.push(Layer::Upsample2);
                layers.push(Layer::Conv(Conv1d::new(c, w, 3, 1, &mut rng)));
                layers.push(Layer::LeakyRelu);
                c = w;
            }
            layers.push(Layer::Upsample2);
            adapters.push((level.cg, Sequential::new(layers)));
        }

        Ok(CodecState {
            config,
            phase: 0,
            trunk,
            heads,
            predictors,
            main_pre: Sequential::new(main_pre_layers),
            tail: Sequential::new(tail_layers),
            adapters,
            trunk_passes: AtomicU64::new(0),
        })
    }

    /// Number of trunk forward passes run so far (test instrumentation).
    pub fn trunk_pass_count(&self) -> u64 {
        self.trunk_passes.load(Ordering::Relaxed)
    }

    pub(crate) fn trunk_forward(&self, x: &Feature) -> Feature {
        self.trunk_passes.fetch_add(1, Ordering::Relaxed);
        self.trunk.infer(x)
    }

    pub(crate) fn head_index(&self, cg: u32) -> Result<usize> {
        self.heads
            .iter()
            .position(|h| h.cg == cg)
            .ok_or(Error::UnknownLevel(cg))
    }

    fn check_segment(&self, segment: &Segment) -> Result<()> {
        if segment.len() != self.config.m {
            return Err(Error::LengthMismatch {
                expected: self.config.m,
                got: segment.len(),
            });
        }
        Ok(())
    }

    /// Compress one segment at one level.
    /// The identity level returns the samples unchanged.
    pub fn encode(&self, segment: &Segment, level: &LevelSpec) -> Result<Vec<f64>> {
        self.check_segment(segment)?;
        let level = self.config.level(level.cg)?;
        if level.is_identity {
            return Ok(segment.samples.clone());
        }
        let trunk_out = self.trunk_forward(&Feature::from_signal(&segment.samples));
        let head = &self.heads[self.head_index(level.cg)?];
        let feats = head.reduce.infer(&trunk_out);
        let latent = head.to_latent.infer(&feats);
        Ok(latent.data)
    }

    /// Predicted downstream weighted error for one level. The identity level
    /// is fixed at 0: no compression-induced error on top of the base model
    /// error, and the fallback never has to qualify against the bound.
    pub fn predict_error(&self, segment: &Segment, level: &LevelSpec) -> Result<f64> {
        self.check_segment(segment)?;
        let level = self.config.level(level.cg)?;
        if level.is_identity {
            return Ok(0.0);
        }
        let trunk_out = self.trunk_forward(&Feature::from_signal(&segment.samples));
        let idx = self.head_index(level.cg)?;
        let feats = self.heads[idx].reduce.infer(&trunk_out);
        Ok(self.predictors[idx].infer(&feats).data[0])
    }

    /// Encode every configured level off a single trunk forward pass.
    /// Entries are ordered by descending cg.
    pub fn encode_all(&self, segment: &Segment) -> Result<Vec<LevelEncoding>> {
        self.check_segment(segment)?;
        let trunk_out = self.trunk_forward(&Feature::from_signal(&segment.samples));
        let mut out = Vec::with_capacity(self.config.levels.len());
        for level in self.config.levels_desc() {
            if level.is_identity {
                out.push(LevelEncoding {
                    level,
                    latent: segment.samples.clone(),
                    predicted_error: 0.0,
                });
                continue;
            }
            let idx = self.head_index(level.cg)?;
            let head = &self.heads[idx];
            let feats = head.reduce.infer(&trunk_out);
            let latent = head.to_latent.infer(&feats);
            let predicted_error = self.predictors[idx].infer(&feats).data[0];
            out.push(LevelEncoding {
                level,
                latent: latent.data,
                predicted_error,
            });
        }
        Ok(out)
    }

    /// Reconstruct a latent back to `M` samples.
    pub(crate) fn decode_latent(&self, cg: u32, latent: &[f64]) -> Result<Vec<f64>> {
        let level = self.config.level(cg)?;
        if latent.len() != level.latent_len {
            return Err(Error::LengthMismatch {
                expected: level.latent_len,
                got: latent.len(),
            });
        }
        if level.is_identity {
            return Ok(latent.to_vec());
        }
        let z = Feature::from_signal(latent);
        let joined = if self.config.depth_beyond_trunk(cg) == 0 {
            self.main_pre.infer(&z)
        } else {
            let adapter = &self
                .adapters
                .iter()
                .find(|(acg, _)| *acg == cg)
                .ok_or(Error::UnknownLevel(cg))?
                .1;
            adapter.infer(&z)
        };
        Ok(self.tail.infer(&joined).data)
    }

    /// Decompress a wire-precision record.
    pub fn decode(&self, record: &CompressedRecord) -> Result<Vec<f64>> {
        record.check_against(self.config.m)?;
        let latent: Vec<f64> = record.latent.iter().map(|&v| v as f64).collect();
        self.decode_latent(record.cg, &latent)
    }

    /// Parameter counts per named group; shared parameters counted once.
    pub fn count_parameters(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        out.insert("trunk".to_string(), self.trunk.param_count());
        for (head, pred) in self.heads.iter().zip(&self.predictors) {
            out.insert(
                format!("head.cg{}", head.cg),
                head.reduce.param_count() + head.to_latent.param_count(),
            );
            out.insert(format!("predictor.cg{}", head.cg), pred.param_count());
        }
        out.insert(
            "decoder.main".to_string(),
            self.main_pre.param_count() + self.tail.param_count(),
        );
        for (cg, adapter) in &self.adapters {
            out.insert(format!("decoder.adapter.cg{cg}"), adapter.param_count());
        }
        out
    }

    /// Total parameters across all groups.
    pub fn total_parameters(&self) -> usize {
        self.count_parameters().values().sum()
    }

    /// Names of all parameter groups, in a stable order.
    pub fn group_names(&self) -> Vec<String> {
        self.count_parameters().keys().cloned().collect()
    }

    /// Export one named group as a flat parameter vector.
    pub fn export_group(&self, name: &str) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        match self.locate(name)? {
            GroupRef::One(seq) => seq.export_params(&mut out),
            GroupRef::Two(a, b) => {
                a.export_params(&mut out);
                b.export_params(&mut out);
            }
        }
        Ok(out)
    }

    /// Import one named group from a flat parameter vector.
    pub fn import_group(&mut self, name: &str, params: &[f64]) -> Result<()> {
        let expected = match self.locate(name)? {
            GroupRef::One(s) => s.param_count(),
            GroupRef::Two(a, b) => a.param_count() + b.param_count(),
        };
        if params.len() != expected {
            return Err(Error::CheckpointMismatch(format!(
                "group {name}: expected {expected} params, got {}",
                params.len()
            )));
        }
        match self.locate_mut(name)? {
            GroupRefMut::One(seq) => {
                seq.import_params(params)?;
            }
            GroupRefMut::Two(a, b) => {
                let used = a.import_params(params)?;
                b.import_params(&params[used..])?;
            }
        }
        Ok(())
    }

    /// SHA-256 checksum of one group's parameters.
    pub fn group_checksum(&self, name: &str) -> Result<[u8; 32]> {
        Ok(crate::nn::param_checksum(&self.export_group(name)?))
    }

    fn locate(&self, name: &str) -> Result<GroupRef<'_>> {
        if name == "trunk" {
            return Ok(GroupRef::One(&self.trunk));
        }
        if name == "decoder.main" {
            return Ok(GroupRef::Two(&self.main_pre, &self.tail));
        }
        if let Some(cg) = name.strip_prefix("head.cg").and_then(|s| s.parse().ok()) {
            let idx = self.head_index(cg)?;
            return Ok(GroupRef::Two(
                &self.heads[idx].reduce,
                &self.heads[idx].to_latent,
            ));
        }
        if let Some(cg) = name
            .strip_prefix("predictor.cg")
            .and_then(|s| s.parse().ok())
        {
            let idx = self.head_index(cg)?;
            return Ok(GroupRef::One(&self.predictors[idx]));
        }
        if let Some(cg) = name
            .strip_prefix("decoder.adapter.cg")
            .and_then(|s| s.parse::<u32>().ok())
        {
            let seq = self
                .adapters
                .iter()
                .find(|(acg, _)| *acg == cg)
                .map(|(_, s)| s)
                .ok_or(Error::UnknownLevel(cg))?;
            return Ok(GroupRef::One(seq));
        }
        Err(Error::Config(format!("unknown parameter group {name}")))
    }

    fn locate_mut(&mut self, name: &str) -> Result<GroupRefMut<'_>> {
        if name == "trunk" {
            return Ok(GroupRefMut::One(&mut self.trunk));
        }
        if name == "decoder.main" {
            return Ok(GroupRefMut::Two(&mut self.main_pre, &mut self.tail));
        }
        if let Some(cg) = name.strip_prefix("head.cg").and_then(|s| s.parse().ok()) {
            let idx = self.head_index(cg)?;
            let head = &mut self.heads[idx];
            return Ok(GroupRefMut::Two(&mut head.reduce, &mut head.to_latent));
        }
        if let Some(cg) = name
            .strip_prefix("predictor.cg")
            .and_then(|s| s.parse().ok())
        {
            let idx = self.head_index(cg)?;
            return Ok(GroupRefMut::One(&mut self.predictors[idx]));
        }
        if let Some(cg) = name
            .strip_prefix("decoder.adapter.cg")
            .and_then(|s| s.parse::<u32>().ok())
        {
            let seq = self
                .adapters
                .iter_mut()
                .find(|(acg, _)| *acg == cg)
                .map(|(_, s)| s)
                .ok_or(Error::UnknownLevel(cg))?;
            return Ok(GroupRefMut::One(seq));
        }
        Err(Error::Config(format!("unknown parameter group {name}")))
    }

    /// True when every downsampling layer in the encoder side is a stride-2
    /// convolution (no pooling of any kind exists in this stack).
    pub fn downsampling_is_stride2_conv(&self) -> bool {
        let encoder_seqs = std::iter::once(&self.trunk)
            .chain(self.heads.iter().map(|h| &h.reduce))
            .chain(self.heads.iter().map(|h| &h.to_latent));
        for seq in encoder_seqs {
            for layer in &seq.layers {
                match layer {
                    Layer::Conv(c) if c.stride == 1 || c.stride == 2 => {}
                    Layer::Norm(_) | Layer::Relu | Layer::LeakyRelu => {}
                    _ => return false,
                }
            }
        }
        let trunk_factor: usize = self
            .trunk
            .layers
            .iter()
            .filter_map(|l| match l {
                Layer::Conv(c) => Some(c.stride),
                _ => None,
            })
            .product();
        trunk_factor == self.config.trunk_cg() as usize
    }
}

enum GroupRef<'a> {
    One(&'a Sequential),
    Two(&'a Sequential, &'a Sequential),
}

enum GroupRefMut<'a> {
    One(&'a mut Sequential),
    Two(&'a mut Sequential, &'a mut Sequential),
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_segment, GeneratorParams};
    use crate::domain::ClassLabel;

    fn desk_config() -> CodecConfig {
        CodecConfig::default_for(1024).unwrap()
    }

    fn segment(seed: u64) -> Segment {
        let params = GeneratorParams::default();
        generate_segment(&params, ClassLabel::Normal, seed).unwrap()
    }

    #[test]
    fn identity_encode_is_bitwise_passthrough() {
        let state = CodecState::init(desk_config(), 0).unwrap();
        let seg = segment(1);
        let latent = state.encode(&seg, &LevelSpec::new(1, 1024).unwrap()).unwrap();
        assert_eq!(latent, seg.samples);
    }

    #[test]
    fn latent_lengths_follow_cg() {
        let state = CodecState::init(desk_config(), 0).unwrap();
        let seg = segment(2);
        let l32 = state.encode(&seg, &LevelSpec::new(32, 1024).unwrap()).unwrap();
        assert_eq!(l32.len(), 32);
        let l64 = state.encode(&seg, &LevelSpec::new(64, 1024).unwrap()).unwrap();
        assert_eq!(l64.len(), 16);
    }

    #[test]
    fn encode_rejects_wrong_length_and_unknown_level() {
        let state = CodecState::init(desk_config(), 0).unwrap();
        let mut seg = segment(3);
        seg.samples.truncate(1000);
        assert!(matches!(
            state.encode(&seg, &LevelSpec::new(32, 1024).unwrap()),
            Err(Error::LengthMismatch { .. })
        ));
        let seg = segment(3);
        assert!(matches!(
            state.encode(&seg, &LevelSpec::new(16, 1024).unwrap()),
            Err(Error::UnknownLevel(16))
        ));
    }

    #[test]
    fn encode_all_runs_trunk_once_and_orders_desc() {
        let state = CodecState::init(desk_config(), 0).unwrap();
        let seg = segment(4);
        let before = state.trunk_pass_count();
        let encs = state.encode_all(&seg).unwrap();
        assert_eq!(state.trunk_pass_count() - before, 1);
        let cgs: Vec<u32> = encs.iter().map(|e| e.level.cg).collect();
        assert_eq!(cgs, vec![64, 32, 1]);
        assert_eq!(encs[0].latent.len(), 16);
        assert_eq!(encs[1].latent.len(), 32);
        assert_eq!(encs[2].latent.len(), 1024);
    }

    #[test]
    fn predictions_nonnegative_and_deterministic() {
        let a = CodecState::init(desk_config(), 9).unwrap();
        let b = CodecState::init(desk_config(), 9).unwrap();
        assert_eq!(a, b);
        let seg = segment(5);
        for enc in a.encode_all(&seg).unwrap() {
            assert!(enc.predicted_error >= 0.0);
        }
        let ea = a.encode_all(&seg).unwrap();
        let eb = b.encode_all(&seg).unwrap();
        assert_eq!(ea, eb);
        // Identity prediction fixed at zero.
        assert_eq!(
            a.predict_error(&seg, &LevelSpec::new(1, 1024).unwrap()).unwrap(),
            0.0
        );
    }

    #[test]
    fn decode_shapes_round_trip() {
        let state = CodecState::init(desk_config(), 0).unwrap();
        let seg = segment(6);
        for enc in state.encode_all(&seg).unwrap() {
            let rec = enc.to_record(seg.id);
            let recon = state.decode(&rec).unwrap();
            assert_eq!(recon.len(), 1024);
        }
        // Identity record decodes to its latent unchanged.
        let rec = CompressedRecord::new(0, 1, seg.samples.iter().map(|&v| v as f32).collect(), 0.0)
            .unwrap();
        let recon = state.decode(&rec).unwrap();
        assert_eq!(recon, rec.latent.iter().map(|&v| v as f64).collect::<Vec<_>>());
    }

    #[test]
    fn decode_rejects_mismatched_latent() {
        let state = CodecState::init(desk_config(), 0).unwrap();
        let rec = CompressedRecord::new(0, 32, vec![0.0f32; 31], 0.0).unwrap();
        assert!(state.decode(&rec).is_err());
        let rec = CompressedRecord::new(0, 5, vec![0.0f32; 16], 0.0).unwrap();
        assert!(state.decode(&rec).is_err());
    }

    #[test]
    fn parameter_groups_share_the_trunk() {
        let state = CodecState::init(desk_config(), 0).unwrap();
        let counts = state.count_parameters();
        assert!(counts["trunk"] > 0);
        // Adding a level adds only head + predictor parameters.
        let two_level = CodecState::init(
            CodecConfig::new(1024, &[32, 1], vec![16, 24, 32, 48, 64], vec![7, 3, 3, 3, 3])
                .unwrap(),
            0,
        )
        .unwrap();
        let two_counts = two_level.count_parameters();
        assert_eq!(counts["trunk"], two_counts["trunk"]);
        assert_eq!(counts["decoder.main"], two_counts["decoder.main"]);
        assert_eq!(
            state.total_parameters(),
            two_level.total_parameters()
                + counts["head.cg64"]
                + counts["predictor.cg64"]
                + counts["decoder.adapter.cg64"]
        );
    }

    #[test]
    fn zero_layer_groups_absent() {
        // An identity-only config is rejected (no trunk factor).
        assert!(CodecConfig::new(1024, &[1], vec![], vec![]).is_err());
    }

    #[test]
    fn stride2_structural_check() {
        let state = CodecState::init(desk_config(), 0).unwrap();
        assert!(state.downsampling_is_stride2_conv());
    }

    #[test]
    fn group_export_import_roundtrip() {
        let state = CodecState::init(desk_config(), 3).unwrap();
        let mut other = CodecState::init(desk_config(), 4).unwrap();
        assert_ne!(state, other);
        for name in state.group_names() {
            let params = state.export_group(&name).unwrap();
            other.import_group(&name, &params).unwrap();
        }
        other.phase = state.phase;
        assert_eq!(state, other);
        // Wrong length rejected.
        assert!(other.import_group("trunk", &[0.0]).is_err());
    }

    #[test]
    fn four_level_config_is_supported() {
        // Levels {64, 32, 16, 1}: trunk /16, two deep levels.
        let cfg = CodecConfig::new(1024, &[64, 32, 16, 1], vec![16, 24, 32, 48], vec![7, 3, 3, 3])
            .unwrap();
        let state = CodecState::init(cfg, 0).unwrap();
        let seg = segment(8);
        let encs = state.encode_all(&seg).unwrap();
        let lens: Vec<usize> = encs.iter().map(|e| e.latent.len()).collect();
        assert_eq!(lens, vec![16, 32, 64, 1024]);
        for enc in &encs {
            let rec = enc.to_record(0);
            assert_eq!(state.decode(&rec).unwrap().len(), 1024);
        }
    }
}
