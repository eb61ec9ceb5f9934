//! Minimal 1-D neural-network machinery: feature maps, layers with explicit
//! forward/backward passes, and sequential containers.
//!
//! Everything runs in `f64` on `[channels x len]` feature maps. Backward
//! passes are hand-derived per layer; a [`Sequential`] chains them using the
//! activation trace captured during the forward pass. Parameter gradients are
//! optional on the backward path so frozen networks can still propagate input
//! gradients.

pub mod adam;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A `[channels x len]` feature map, row-major by channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Feature {
    pub channels: usize,
    pub len: usize,
    pub data: Vec<f64>,
}

impl Feature {
    pub fn zeros(channels: usize, len: usize) -> Feature {
        Feature {
            channels,
            len,
            data: vec![0.0; channels * len],
        }
    }

    /// Wrap a single-channel signal.
    pub fn from_signal(samples: &[f64]) -> Feature {
        Feature {
            channels: 1,
            len: samples.len(),
            data: samples.to_vec(),
        }
    }

    pub fn row(&self, c: usize) -> &[f64] {
        &self.data[c * self.len..(c + 1) * self.len]
    }

    pub fn row_mut(&mut self, c: usize) -> &mut [f64] {
        &mut self.data[c * self.len..(c + 1) * self.len]
    }
}

/// 1-D convolution with same padding and stride 1 or 2.
///
/// Output length is `len / stride`; input length must be divisible by the
/// stride. Weights are laid out `[c_out][c_in][kernel]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv1d {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Conv1d {
    pub fn new(c_in: usize, c_out: usize, kernel: usize, stride: usize, rng: &mut impl Rng) -> Conv1d {
        assert!(kernel % 2 == 1, "kernel must be odd for same padding");
        assert!(stride == 1 || stride == 2);
        let std = (2.0 / (c_in * kernel) as f64).sqrt();
        let dist = Normal::new(0.0, std).unwrap();
        let w = (0..c_out * c_in * kernel).map(|_| dist.sample(rng)).collect();
        Conv1d {
            c_in,
            c_out,
            kernel,
            stride,
            w,
            b: vec![0.0; c_out],
        }
    }

    fn pad(&self) -> isize {
        (self.kernel as isize - 1) / 2
    }

    fn forward(&self, x: &Feature) -> Feature {
        debug_assert_eq!(x.channels, self.c_in);
        debug_assert_eq!(x.len % self.stride, 0);
        let l_out = x.len / self.stride;
        let mut y = Feature::zeros(self.c_out, l_out);
        let pad = self.pad();
        for co in 0..self.c_out {
            let y_row = y.row_mut(co);
            y_row.fill(self.b[co]);
            for ci in 0..self.c_in {
                let x_row = x.row(ci);
                for t in 0..self.kernel {
                    let wv = self.w[(co * self.c_in + ci) * self.kernel + t];
                    let off = t as isize - pad;
                    if self.stride == 1 {
                        // y[i] += wv * x[i + off] over the valid overlap
                        let i0 = (-off).max(0) as usize;
                        let i1 = ((x.len as isize - off).min(l_out as isize)).max(0) as usize;
                        if i0 < i1 {
                            let xs = &x_row[(i0 as isize + off) as usize..(i1 as isize + off) as usize];
                            for (yi, xi) in y_row[i0..i1].iter_mut().zip(xs) {
                                *yi += wv * xi;
                            }
                        }
                    } else {
                        for (i, yi) in y_row.iter_mut().enumerate() {
                            let j = i as isize * 2 + off;
                            if j >= 0 && (j as usize) < x.len {
                                *yi += wv * x_row[j as usize];
                            }
                        }
                    }
                }
            }
        }
        y
    }

    fn backward(
        &self,
        x: &Feature,
        gy: &Feature,
        grads: Option<&mut ParamGrad>,
    ) -> Feature {
        let l_out = gy.len;
        let pad = self.pad();
        let mut gx = Feature::zeros(self.c_in, x.len);
        if let Some(g) = grads {
            for co in 0..self.c_out {
                let gy_row = gy.row(co);
                g.b[co] += gy_row.iter().sum::<f64>();
                for ci in 0..self.c_in {
                    let x_row = x.row(ci);
                    for t in 0..self.kernel {
                        let off = t as isize - pad;
                        let mut acc = 0.0;
                        if self.stride == 1 {
                            let i0 = (-off).max(0) as usize;
                            let i1 = ((x.len as isize - off).min(l_out as isize)).max(0) as usize;
                            if i0 < i1 {
                                let xs = &x_row[(i0 as isize + off) as usize..(i1 as isize + off) as usize];
                                for (gyi, xi) in gy_row[i0..i1].iter().zip(xs) {
                                    acc += gyi * xi;
                                }
                            }
                        } else {
                            for (i, gyi) in gy_row.iter().enumerate() {
                                let j = i as isize * 2 + off;
                                if j >= 0 && (j as usize) < x.len {
                                    acc += gyi * x_row[j as usize];
                                }
                            }
                        }
                        g.w[(co * self.c_in + ci) * self.kernel + t] += acc;
                    }
                }
            }
        }
        for co in 0..self.c_out {
            let gy_row = gy.row(co);
            for ci in 0..self.c_in {
                let gx_row = gx.row_mut(ci);
                for t in 0..self.kernel {
                    let wv = self.w[(co * self.c_in + ci) * self.kernel + t];
                    let off = t as isize - pad;
                    if self.stride == 1 {
                        let i0 = (-off).max(0) as usize;
                        let i1 = ((x.len as isize - off).min(l_out as isize)).max(0) as usize;
                        if i0 < i1 {
                            let gxs = &mut gx_row[(i0 as isize + off) as usize..(i1 as isize + off) as usize];
                            for (gxi, gyi) in gxs.iter_mut().zip(&gy_row[i0..i1]) {
                                *gxi += wv * gyi;
                            }
                        }
                    } else {
                        for (i, gyi) in gy_row.iter().enumerate() {
                            let j = i as isize * 2 + off;
                            if j >= 0 && (j as usize) < x.len {
                                gx_row[j as usize] += wv * gyi;
                            }
                        }
                    }
                }
            }
        }
        gx
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

/// Fully connected layer on a flattened feature map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub n_in: usize,
    pub n_out: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Dense {
    pub fn new(n_in: usize, n_out: usize, rng: &mut impl Rng) -> Dense {
        let std = (2.0 / n_in as f64).sqrt();
        let dist = Normal::new(0.0, std).unwrap();
        Dense {
            n_in,
            n_out,
            w: (0..n_out * n_in).map(|_| dist.sample(rng)).collect(),
            b: vec![0.0; n_out],
        }
    }

    fn forward(&self, x: &Feature) -> Feature {
        debug_assert_eq!(x.data.len(), self.n_in);
        let mut y = Feature::zeros(self.n_out, 1);
        for o in 0..self.n_out {
            let row = &self.w[o * self.n_in..(o + 1) * self.n_in];
            y.data[o] = self.b[o] + row.iter().zip(&x.data).map(|(w, x)| w * x).sum::<f64>();
        }
        y
    }

    fn backward(&self, x: &Feature, gy: &Feature, grads: Option<&mut ParamGrad>) -> Feature {
        let mut gx = Feature {
            channels: x.channels,
            len: x.len,
            data: vec![0.0; self.n_in],
        };
        if let Some(g) = grads {
            for o in 0..self.n_out {
                let gyo = gy.data[o];
                g.b[o] += gyo;
                let grow = &mut g.w[o * self.n_in..(o + 1) * self.n_in];
                for (gw, xv) in grow.iter_mut().zip(&x.data) {
                    *gw += gyo * xv;
                }
            }
        }
        for o in 0..self.n_out {
            let gyo = gy.data[o];
            let row = &self.w[o * self.n_in..(o + 1) * self.n_in];
            for (gxi, wv) in gx.data.iter_mut().zip(row) {
                *gxi += gyo * wv;
            }
        }
        gx
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

/// Per-channel normalization over positions with a learned affine, applied
/// independently per sample. Keeps deep conv stacks trainable without
/// coupling batch members.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceNorm {
    pub channels: usize,
    /// Per-channel scale (gamma).
    pub w: Vec<f64>,
    /// Per-channel shift (beta).
    pub b: Vec<f64>,
}

const NORM_EPS: f64 = 1e-5;

impl InstanceNorm {
    pub fn new(channels: usize) -> InstanceNorm {
        InstanceNorm {
            channels,
            w: vec![1.0; channels],
            b: vec![0.0; channels],
        }
    }

    fn forward(&self, x: &Feature) -> Feature {
        debug_assert_eq!(x.channels, self.channels);
        let mut y = Feature::zeros(x.channels, x.len);
        let inv_l = 1.0 / x.len as f64;
        for c in 0..x.channels {
            let row = x.row(c);
            let mean = row.iter().sum::<f64>() * inv_l;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() * inv_l;
            let inv_std = 1.0 / (var + NORM_EPS).sqrt();
            let (g, s) = (self.w[c], self.b[c]);
            for (yi, &xi) in y.row_mut(c).iter_mut().zip(row) {
                *yi = g * (xi - mean) * inv_std + s;
            }
        }
        y
    }

    fn backward(&self, x: &Feature, gy: &Feature, grads: Option<&mut ParamGrad>) -> Feature {
        let l = x.len as f64;
        let inv_l = 1.0 / l;
        let mut gx = Feature::zeros(x.channels, x.len);
        let mut grads = grads;
        for c in 0..x.channels {
            let row = x.row(c);
            let gy_row = gy.row(c);
            let mean = row.iter().sum::<f64>() * inv_l;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() * inv_l;
            let inv_std = 1.0 / (var + NORM_EPS).sqrt();
            let g = self.w[c];
            // Sums over positions for the standard normalization backward.
            let mut sum_gy = 0.0;
            let mut sum_gy_xhat = 0.0;
            for (&gyi, &xi) in gy_row.iter().zip(row) {
                let xhat = (xi - mean) * inv_std;
                sum_gy += gyi;
                sum_gy_xhat += gyi * xhat;
            }
            if let Some(pg) = grads.as_mut() {
                pg.w[c] += sum_gy_xhat;
                pg.b[c] += sum_gy;
            }
            let gx_row = gx.row_mut(c);
            for ((gxi, &gyi), &xi) in gx_row.iter_mut().zip(gy_row).zip(row) {
                let xhat = (xi - mean) * inv_std;
                *gxi = g * inv_std * (gyi - inv_l * sum_gy - xhat * inv_l * sum_gy_xhat);
            }
        }
        gx
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

/// Negative-side slope of [`Layer::LeakyRelu`].
pub const LEAKY_SLOPE: f64 = 0.01;

/// A layer in a [`Sequential`] stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Layer {
    Conv(Conv1d),
    Dense(Dense),
    Norm(InstanceNorm),
    Relu,
    /// Leaky rectifier for interior activations; keeps units trainable where
    /// a hard rectifier would die.
    LeakyRelu,
    Sigmoid,
    /// Nearest-neighbour upsampling by 2.
    Upsample2,
    /// `[C x L] -> [C x 1]` mean over positions.
    GlobalAvgPool,
}

impl Layer {
    fn forward(&self, x: &Feature) -> Feature {
        match self {
            Layer::Conv(c) => c.forward(x),
            Layer::Dense(d) => d.forward(x),
            Layer::Norm(n) => n.forward(x),
            Layer::Relu => Feature {
                channels: x.channels,
                len: x.len,
                data: x.data.iter().map(|&v| v.max(0.0)).collect(),
            },
            Layer::LeakyRelu => Feature {
                channels: x.channels,
                len: x.len,
                data: x
                    .data
                    .iter()
                    .map(|&v| if v > 0.0 { v } else { LEAKY_SLOPE * v })
                    .collect(),
            },
            Layer::Sigmoid => Feature {
                channels: x.channels,
                len: x.len,
                data: x.data.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect(),
            },
            Layer::Upsample2 => {
                let mut y = Feature::zeros(x.channels, x.len * 2);
                for c in 0..x.channels {
                    let xr = x.row(c);
                    let yr = y.row_mut(c);
                    for (i, &v) in xr.iter().enumerate() {
                        yr[2 * i] = v;
                        yr[2 * i + 1] = v;
                    }
                }
                y
            }
            Layer::GlobalAvgPool => {
                let mut y = Feature::zeros(x.channels, 1);
                let inv = 1.0 / x.len as f64;
                for c in 0..x.channels {
                    y.data[c] = x.row(c).iter().sum::<f64>() * inv;
                }
                y
            }
        }
    }

    /// `x` is the layer input, `y` its forward output, `gy` the output grad.
    fn backward(
        &self,
        x: &Feature,
        y: &Feature,
        gy: &Feature,
        grads: Option<&mut ParamGrad>,
    ) -> Feature {
        match self {
            Layer::Conv(c) => c.backward(x, gy, grads),
            Layer::Dense(d) => d.backward(x, gy, grads),
            Layer::Norm(n) => n.backward(x, gy, grads),
            Layer::Relu => Feature {
                channels: x.channels,
                len: x.len,
                data: x
                    .data
                    .iter()
                    .zip(&gy.data)
                    .map(|(&xv, &g)| if xv > 0.0 { g } else { 0.0 })
                    .collect(),
            },
            Layer::LeakyRelu => Feature {
                channels: x.channels,
                len: x.len,
                data: x
                    .data
                    .iter()
                    .zip(&gy.data)
                    .map(|(&xv, &g)| if xv > 0.0 { g } else { LEAKY_SLOPE * g })
                    .collect(),
            },
            Layer::Sigmoid => Feature {
                channels: x.channels,
                len: x.len,
                data: y
                    .data
                    .iter()
                    .zip(&gy.data)
                    .map(|(&yv, &g)| g * yv * (1.0 - yv))
                    .collect(),
            },
            Layer::Upsample2 => {
                let mut gx = Feature::zeros(x.channels, x.len);
                for c in 0..x.channels {
                    let gyr = gy.row(c);
                    let gxr = gx.row_mut(c);
                    for i in 0..x.len {
                        gxr[i] = gyr[2 * i] + gyr[2 * i + 1];
                    }
                }
                gx
            }
            Layer::GlobalAvgPool => {
                let mut gx = Feature::zeros(x.channels, x.len);
                let inv = 1.0 / x.len as f64;
                for c in 0..x.channels {
                    let g = gy.data[c] * inv;
                    gx.row_mut(c).fill(g);
                }
                gx
            }
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Layer::Conv(c) => c.param_count(),
            Layer::Dense(d) => d.param_count(),
            Layer::Norm(n) => n.param_count(),
            _ => 0,
        }
    }
}

/// Gradient buffer for one parametric layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

/// Gradients for a [`Sequential`], parallel to its layer list.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqGrads {
    pub layers: Vec<Option<ParamGrad>>,
}

impl SeqGrads {
    pub fn zeros_like(seq: &Sequential) -> SeqGrads {
        SeqGrads {
            layers: seq
                .layers
                .iter()
                .map(|l| match l {
                    Layer::Conv(c) => Some(ParamGrad {
                        w: vec![0.0; c.w.len()],
                        b: vec![0.0; c.b.len()],
                    }),
                    Layer::Dense(d) => Some(ParamGrad {
                        w: vec![0.0; d.w.len()],
                        b: vec![0.0; d.b.len()],
                    }),
                    Layer::Norm(n) => Some(ParamGrad {
                        w: vec![0.0; n.w.len()],
                        b: vec![0.0; n.b.len()],
                    }),
                    _ => None,
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &SeqGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            if let (Some(a), Some(b)) = (a.as_mut(), b.as_ref()) {
                for (x, y) in a.w.iter_mut().zip(&b.w) {
                    *x += y;
                }
                for (x, y) in a.b.iter_mut().zip(&b.b) {
                    *x += y;
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.layers.iter_mut().flatten() {
            for x in g.w.iter_mut() {
                *x *= factor;
            }
            for x in g.b.iter_mut() {
                *x *= factor;
            }
        }
    }

    /// Flatten in the same order as [`Sequential::export_params`].
    pub fn export_flat(&self, out: &mut Vec<f64>) {
        for g in self.layers.iter().flatten() {
            out.extend_from_slice(&g.w);
            out.extend_from_slice(&g.b);
        }
    }
}

/// Activation trace captured by a forward pass: `acts[0]` is the input,
/// `acts[i + 1]` the output of layer `i`.
#[derive(Debug, Clone)]
pub struct Trace {
    pub acts: Vec<Feature>,
}

impl Trace {
    pub fn output(&self) -> &Feature {
        self.acts.last().expect("trace has at least the input")
    }
}

/// An ordered stack of layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Sequential {
        Sequential { layers }
    }

    /// Forward pass keeping every intermediate activation for backprop.
    pub fn forward_trace(&self, x: &Feature) -> Trace {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.clone());
        for layer in &self.layers {
            let y = layer.forward(acts.last().unwrap());
            acts.push(y);
        }
        Trace { acts }
    }

    /// Forward pass discarding intermediates.
    pub fn infer(&self, x: &Feature) -> Feature {
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = layer.forward(&cur);
        }
        cur
    }

    /// Backward pass over a trace. Returns the gradient w.r.t. the input.
    /// With `grads = None` only input gradients are computed (frozen net).
    pub fn backward(&self, trace: &Trace, gy: Feature, mut grads: Option<&mut SeqGrads>) -> Feature {
        let mut g = gy;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let layer_grads = match grads.as_mut() {
                Some(sg) => sg.layers[i].as_mut(),
                None => None,
            };
            g = layer.backward(&trace.acts[i], &trace.acts[i + 1], &g, layer_grads);
        }
        g
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// Append all parameters, layer by layer (`w` then `b`), to `out`.
    pub fn export_params(&self, out: &mut Vec<f64>) {
        for layer in &self.layers {
            match layer {
                Layer::Conv(c) => {
                    out.extend_from_slice(&c.w);
                    out.extend_from_slice(&c.b);
                }
                Layer::Dense(d) => {
                    out.extend_from_slice(&d.w);
                    out.extend_from_slice(&d.b);
                }
                Layer::Norm(n) => {
                    out.extend_from_slice(&n.w);
                    out.extend_from_slice(&n.b);
                }
                _ => {}
            }
        }
    }

    /// Load parameters in export order. Returns the number consumed.
    pub fn import_params(&mut self, src: &[f64]) -> Result<usize> {
        let mut at = 0;
        for layer in &mut self.layers {
            match layer {
                Layer::Conv(c) => {
                    let (nw, nb) = (c.w.len(), c.b.len());
                    if at + nw + nb > src.len() {
                        return Err(Error::CheckpointMismatch(format!(
                            "parameter group too short: needed {} more",
                            at + nw + nb - src.len()
                        )));
                    }
                    c.w.copy_from_slice(&src[at..at + nw]);
                    at += nw;
                    c.b.copy_from_slice(&src[at..at + nb]);
                    at += nb;
                }
                Layer::Dense(d) => {
                    let (nw, nb) = (d.w.len(), d.b.len());
                    if at + nw + nb > src.len() {
                        return Err(Error::CheckpointMismatch(format!(
                            "parameter group too short: needed {} more",
                            at + nw + nb - src.len()
                        )));
                    }
                    d.w.copy_from_slice(&src[at..at + nw]);
                    at += nw;
                    d.b.copy_from_slice(&src[at..at + nb]);
                    at += nb;
                }
                Layer::Norm(n) => {
                    let (nw, nb) = (n.w.len(), n.b.len());
                    if at + nw + nb > src.len() {
                        return Err(Error::CheckpointMismatch(format!(
                            "parameter group too short: needed {} more",
                            at + nw + nb - src.len()
                        )));
                    }
                    n.w.copy_from_slice(&src[at..at + nw]);
                    at += nw;
                    n.b.copy_from_slice(&src[at..at + nb]);
                    at += nb;
                }
                _ => {}
            }
        }
        Ok(at)
    }
}

/// SHA-256 checksum over the bit patterns of a parameter vector.
pub fn param_checksum(params: &[f64]) -> [u8; 32] {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    for p in params {
        hasher.update(p.to_le_bytes());
    }
    hasher.finalize().into()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn conv_stride1_shapes() {
        let c = Conv1d::new(2, 3, 3, 1, &mut rng(0));
        let x = Feature::zeros(2, 16);
        let y = c.forward(&x);
        assert_eq!((y.channels, y.len), (3, 16));
    }

    #[test]
    fn conv_stride2_halves_length() {
        let c = Conv1d::new(1, 4, 7, 2, &mut rng(0));
        let x = Feature::zeros(1, 32);
        let y = c.forward(&x);
        assert_eq!((y.channels, y.len), (4, 16));
    }

    #[test]
    fn upsample_then_conv_restores_length() {
        let seq = Sequential::new(vec![
            Layer::Upsample2,
            Layer::Conv(Conv1d::new(1, 1, 3, 1, &mut rng(1))),
        ]);
        let y = seq.infer(&Feature::zeros(1, 8));
        assert_eq!(y.len, 16);
    }

    #[test]
    fn import_roundtrips_export() {
        let mut r = rng(7);
        let mut seq = Sequential::new(vec![
            Layer::Conv(Conv1d::new(1, 2, 3, 2, &mut r)),
            Layer::Relu,
            Layer::Dense(Dense::new(8, 3, &mut r)),
        ]);
        let mut params = Vec::new();
        seq.export_params(&mut params);
        assert_eq!(params.len(), seq.param_count());
        let mut other = seq.clone();
        other.import_params(&params).unwrap();
        assert_eq!(seq, other);
        // Mutate and re-import restores
        if let Layer::Conv(c) = &mut seq.layers[0] {
            c.w[0] += 1.0;
        }
        seq.import_params(&params).unwrap();
        assert_eq!(seq, other);
    }

    /// Central-difference gradient check on a small mixed stack.
    #[test]
    fn gradients_match_finite_differences() {
        let mut r = rng(42);
        let mut seq = Sequential::new(vec![
            Layer::Conv(Conv1d::new(1, 3, 3, 2, &mut r)),
            Layer::Norm(InstanceNorm::new(3)),
            Layer::Relu,
            Layer::Conv(Conv1d::new(3, 2, 3, 1, &mut r)),
            Layer::Sigmoid,
            Layer::Upsample2,
            Layer::GlobalAvgPool,
            Layer::Dense(Dense::new(2, 1, &mut r)),
        ]);
        let x = Feature {
            channels: 1,
            len: 12,
            data: (0..12).map(|i| ((i as f64) * 0.7).sin() * 0.5 + 0.1).collect(),
        };
        // Loss = 0.5 * out^2
        let loss = |s: &Sequential| {
            let y = s.infer(&x);
            0.5 * y.data[0] * y.data[0]
        };
        let trace = seq.forward_trace(&x);
        let out = trace.output().data[0];
        let mut grads = SeqGrads::zeros_like(&seq);
        let gy = Feature {
            channels: 1,
            len: 1,
            data: vec![out],
        };
        let gx = seq.backward(&trace, gy, Some(&mut grads));

        let mut analytic = Vec::new();
        grads.export_flat(&mut analytic);
        let mut params = Vec::new();
        seq.export_params(&mut params);

        let h = 1e-6;
        for i in 0..params.len() {
            let orig = params[i];
            params[i] = orig + h;
            seq.import_params(&params).unwrap();
            let lp = loss(&seq);
            params[i] = orig - h;
            seq.import_params(&params).unwrap();
            let lm = loss(&seq);
            params[i] = orig;
            let numeric = (lp - lm) / (2.0 * h);
            let denom = numeric.abs().max(analytic[i].abs()).max(1e-8);
            assert!(
                (numeric - analytic[i]).abs() / denom < 1e-4,
                "param {i}: analytic {} vs numeric {numeric}",
                analytic[i]
            );
        }
        seq.import_params(&params).unwrap();

        // Input gradient too.
        let mut xp = x.clone();
        for i in 0..x.data.len() {
            let orig = xp.data[i];
            xp.data[i] = orig + h;
            let yp = seq.infer(&xp).data[0];
            xp.data[i] = orig - h;
            let ym = seq.infer(&xp).data[0];
            xp.data[i] = orig;
            let numeric = (0.5 * yp * yp - 0.5 * ym * ym) / (2.0 * h);
            let denom = numeric.abs().max(gx.data[i].abs()).max(1e-8);
            assert!((numeric - gx.data[i]).abs() / denom < 1e-4);
        }
    }

    #[test]
    fn checksum_is_order_sensitive() {
        let a = param_checksum(&[1.0, 2.0]);
        let b = param_checksum(&[2.0, 1.0]);
        assert_ne!(a, b);
        assert_eq!(a, param_checksum(&[1.0, 2.0]));
    }
}
