//! From-scratch 3D convolutional surrogate for block homogenization.
//!
//! The network maps a standardized 6-channel conductivity voxel grid to the
//! six Voigt components of the equivalent tensor. Architecture: repeated
//! [conv 3³ (pad 1) → batch norm → ReLU → max pool 2³] blocks, global average
//! pooling, then fully connected layers with ReLU and a linear output layer.
//! Everything (forward, backward, Adam, serialization) is implemented here
//! directly on `f64` buffers.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::{
    destandardize_voigt, field_mean, standardize_field, NormalizationStats,
};
use crate::error::{Error, Result};
use crate::field::TensorGrid;
use crate::homog::{BlockPredictor, EquivalentTensor};

const KERNEL: usize = 3;
const KERNEL_VOL: usize = KERNEL * KERNEL * KERNEL;
const POOL: usize = 2;
const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;
const WEIGHTS_MAGIC: &[u8; 4] = b"DFMW";
const WEIGHTS_VERSION: u32 = 1;

/// Architecture description.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkConfig {
    /// Cubic input resolution (voxels per axis).
    pub input_resolution: usize,
    pub input_channels: usize,
    /// Output channels of each conv block (one pool per block).
    pub conv_channels: Vec<usize>,
    /// Hidden fully connected widths (the final linear output layer is
    /// implicit).
    pub fc_widths: Vec<usize>,
    pub output_dim: usize,
}

impl NetworkConfig {
    /// Full-scale architecture: 64³ input, conv 48/144/432/1296, fc
    /// 2048/2048/1024.
    pub fn paper() -> Self {
        NetworkConfig {
            input_resolution: 64,
            input_channels: 6,
            conv_channels: vec![48, 144, 432, 1296],
            fc_widths: vec![2048, 2048, 1024],
            output_dim: 6,
        }
    }

    /// Reduced architecture for workstation-scale experiments: 16³ input.
    pub fn desk() -> Self {
        NetworkConfig {
            input_resolution: 16,
            input_channels: 6,
            conv_channels: vec![4, 8, 16, 32],
            fc_widths: vec![32, 32, 16],
            output_dim: 6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv_channels.is_empty() {
            return Err(Error::parameter("at least one conv block is required"));
        }
        if self.input_channels == 0 || self.output_dim == 0 {
            return Err(Error::parameter("channel counts must be positive"));
        }
        if self.conv_channels.iter().chain(&self.fc_widths).any(|c| *c == 0) {
            return Err(Error::parameter("layer widths must be positive"));
        }
        let halvings = self.conv_channels.len() as u32;
        let div = 1usize << halvings;
        if self.input_resolution == 0 || self.input_resolution % div != 0 {
            return Err(Error::parameter(format!(
                "input resolution {} must be divisible by 2^{halvings}",
                self.input_resolution
            )));
        }
        Ok(())
    }

    /// Spatial resolution entering each conv block, plus the final one.
    pub fn layer_resolutions(&self) -> Vec<usize> {
        let mut r = self.input_resolution;
        let mut out = vec![r];
        for _ in &self.conv_channels {
            r /= POOL;
            out.push(r);
        }
        out
    }

    /// Trainable parameter count per weighted layer (batch norm excluded):
    /// conv blocks then linear layers.
    pub fn parameter_counts(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut c_in = self.input_channels;
        for c_out in &self.conv_channels {
            out.push(c_out * (c_in * KERNEL_VOL + 1));
            c_in = *c_out;
        }
        let mut w_in = c_in;
        for w_out in self.fc_widths.iter().chain(std::iter::once(&self.output_dim)) {
            out.push(w_out * (w_in + 1));
            w_in = *w_out;
        }
        out
    }

    /// FNV-1a hash of the canonical architecture rendering.
    pub fn hash(&self) -> u64 {
        let text = format!(
            "res={};in={};conv={:?};fc={:?};out={}",
            self.input_resolution,
            self.input_channels,
            self.conv_channels,
            self.fc_widths,
            self.output_dim
        );
        let mut h: u64 = 0xcbf29ce484222325;
        for b in text.as_bytes() {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }
}

/// Dense channel-major activation volume on a cubic grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4D {
    pub channels: usize,
    /// Side length of the cubic spatial grid.
    pub n: usize,
    /// Layout: `((c·n + z)·n + y)·n + x`.
    pub data: Vec<f64>,
}

impl Tensor4D {
    pub fn zeros(channels: usize, n: usize) -> Self {
        Tensor4D {
            channels,
            n,
            data: vec![0.0; channels * n * n * n],
        }
    }

    #[inline]
    pub fn idx(&self, c: usize, z: usize, y: usize, x: usize) -> usize {
        ((c * self.n + z) * self.n + y) * self.n + x
    }

    /// Convert a cubic tensor grid's six Voigt channels to an activation
    /// volume.
    pub fn from_tensor_grid(field: &TensorGrid) -> Result<Self> {
        let (nx, ny, nz) = field.grid.dims;
        if nx != ny || nx != nz {
            return Err(Error::parameter("network input must be cubic"));
        }
        let mut out = Tensor4D::zeros(6, nx);
        for c in 0..6 {
            // TensorGrid stores x-fastest with index (i + nx*(j + ny*k)); the
            // activation layout is identical per channel.
            out.data[c * nx * nx * nx..(c + 1) * nx * nx * nx]
                .copy_from_slice(&field.channels[c]);
        }
        Ok(out)
    }
}

/// Conv 3³ + batch norm parameters for one block.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `[out][in][kz][ky][kx]`, flattened.
    pub kernel: Vec<f64>,
    pub bias: Vec<f64>,
    pub bn_gain: Vec<f64>,
    pub bn_offset: Vec<f64>,
    pub bn_running_mean: Vec<f64>,
    pub bn_running_var: Vec<f64>,
}

impl ConvBlock {
    #[inline]
    fn kidx(&self, o: usize, i: usize, kz: usize, ky: usize, kx: usize) -> usize {
        ((o * self.in_channels + i) * KERNEL_VOL) + (kz * KERNEL + ky) * KERNEL + kx
    }
}

/// Dense layer with row-major `out × in` weights.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    pub in_width: usize,
    pub out_width: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// The surrogate network.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub config: NetworkConfig,
    pub blocks: Vec<ConvBlock>,
    pub linears: Vec<LinearLayer>,
}

/// Glorot-uniform initialization (kernel fans include the 27-point support);
/// biases zero, batch norm at identity.
pub fn init(config: &NetworkConfig, seed: u64) -> Result<Network> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut blocks = Vec::new();
    let mut c_in = config.input_channels;
    for &c_out in &config.conv_channels {
        let fan_in = c_in * KERNEL_VOL;
        let fan_out = c_out * KERNEL_VOL;
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let kernel: Vec<f64> = (0..c_out * c_in * KERNEL_VOL)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        blocks.push(ConvBlock {
            in_channels: c_in,
            out_channels: c_out,
            kernel,
            bias: vec![0.0; c_out],
            bn_gain: vec![1.0; c_out],
            bn_offset: vec![0.0; c_out],
            bn_running_mean: vec![0.0; c_out],
            bn_running_var: vec![1.0; c_out],
        });
        c_in = c_out;
    }
    let mut linears = Vec::new();
    let mut w_in = c_in;
    for &w_out in config.fc_widths.iter().chain(std::iter::once(&config.output_dim)) {
        let bound = (6.0 / (w_in + w_out) as f64).sqrt();
        let weight: Vec<f64> = (0..w_out * w_in).map(|_| rng.gen_range(-bound..bound)).collect();
        linears.push(LinearLayer {
            in_width: w_in,
            out_width: w_out,
            weight,
            bias: vec![0.0; w_out],
        });
        w_in = w_out;
    }
    Ok(Network {
        config: config.clone(),
        blocks,
        linears,
    })
}

fn conv3d_forward(block: &ConvBlock, input: &Tensor4D) -> Tensor4D {
    let n = input.n;
    let mut out = Tensor4D::zeros(block.out_channels, n);
    let plane = n * n * n;
    // Tap-ordered accumulation: for each kernel offset, add a shifted copy of
    // the input scaled by the tap weight. The per-voxel addition order (bias,
    // then taps in i → kz → ky → kx order) matches a per-voxel tap loop
    // exactly, so results are bit-identical to the naive formulation while the
    // inner x-runs stay contiguous.
    out.data
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(o, chunk)| {
            chunk.fill(block.bias[o]);
            for i in 0..block.in_channels {
                for kz in 0..KERNEL {
                    // Source index along an axis is z + kz − 1; clamp the
                    // output range so it stays inside [0, n).
                    let (z0, z1) = (1usize.saturating_sub(kz), n.min(n + 1 - kz));
                    for ky in 0..KERNEL {
                        let (y0, y1) = (1usize.saturating_sub(ky), n.min(n + 1 - ky));
                        for kx in 0..KERNEL {
                            let (x0, x1) = (1usize.saturating_sub(kx), n.min(n + 1 - kx));
                            let w = block.kernel[block.kidx(o, i, kz, ky, kx)];
                            for z in z0..z1 {
                                let sz = z + kz - 1;
                                for y in y0..y1 {
                                    let sy = y + ky - 1;
                                    let src = input.idx(i, sz, sy, x0 + kx - 1);
                                    let dst = (z * n + y) * n + x0;
                                    let run = x1 - x0;
                                    let (src_row, dst_row) = (
                                        &input.data[src..src + run],
                                        &mut chunk[dst..dst + run],
                                    );
                                    for t in 0..run {
                                        dst_row[t] += w * src_row[t];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    out
}

/// Gradients of one conv application: (d kernel, d bias, d input).
fn conv3d_backward(
    block: &ConvBlock,
    input: &Tensor4D,
    d_out: &Tensor4D,
) -> (Vec<f64>, Vec<f64>, Tensor4D) {
    let n = input.n;
    let mut d_kernel = vec![0.0; block.kernel.len()];
    let mut d_bias = vec![0.0; block.out_channels];
    let mut d_input = Tensor4D::zeros(block.in_channels, n);
    for o in 0..block.out_channels {
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    let g = d_out.data[d_out.idx(o, z, y, x)];
                    if g == 0.0 {
                        continue;
                    }
                    d_bias[o] += g;
                    for i in 0..block.in_channels {
                        for kz in 0..KERNEL {
                            let sz = z + kz;
                            if sz < 1 || sz > n {
                                continue;
                            }
                            for ky in 0..KERNEL {
                                let sy = y + ky;
                                if sy < 1 || sy > n {
                                    continue;
                                }
                                for kx in 0..KERNEL {
                                    let sx = x + kx;
                                    if sx < 1 || sx > n {
                                        continue;
                                    }
                                    let src = input.idx(i, sz - 1, sy - 1, sx - 1);
                                    d_kernel[block.kidx(o, i, kz, ky, kx)] +=
                                        g * input.data[src];
                                    d_input.data[src] +=
                                        g * block.kernel[block.kidx(o, i, kz, ky, kx)];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (d_kernel, d_bias, d_input)
}

/// 2³ max pooling with stride 2; argmax keeps the lowest linear index on
/// ties.
fn maxpool3d(input: &Tensor4D) -> Result<(Tensor4D, Vec<u32>)> {
    if input.n % POOL != 0 {
        return Err(Error::parameter("max pool requires even resolution"));
    }
    let m = input.n / POOL;
    let mut out = Tensor4D::zeros(input.channels, m);
    let mut argmax = vec![0u32; out.data.len()];
    for c in 0..input.channels {
        for z in 0..m {
            for y in 0..m {
                for x in 0..m {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for dz in 0..POOL {
                        for dy in 0..POOL {
                            for dx in 0..POOL {
                                let src = input.idx(
                                    c,
                                    z * POOL + dz,
                                    y * POOL + dy,
                                    x * POOL + dx,
                                );
                                if input.data[src] > best {
                                    best = input.data[src];
                                    best_idx = src;
                                }
                            }
                        }
                    }
                    let dst = out.idx(c, z, y, x);
                    out.data[dst] = best;
                    argmax[dst] = best_idx as u32;
                }
            }
        }
    }
    Ok((out, argmax))
}

/// Per-block forward cache for one batch.
struct BlockCache {
    /// Batch inputs to the conv layer.
    inputs: Vec<Tensor4D>,
    /// Normalized pre-activation x̂ per sample.
    xhat: Vec<Tensor4D>,
    /// 1/√(σ²+ε) per output channel (batch statistics in training mode).
    inv_std: Vec<f64>,
    /// Post-ReLU activation per sample (pool input).
    relu: Vec<Tensor4D>,
    /// Pool argmax per sample.
    argmax: Vec<Vec<u32>>,
    /// Batch mean/variance per channel (training mode only).
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
}

/// Forward cache for one batch.
pub struct Cache {
    blocks: Vec<BlockCache>,
    /// Input vector of each linear layer, per layer then per sample.
    fc_inputs: Vec<Vec<Vec<f64>>>,
    training: bool,
}

impl Network {
    /// Forward pass over a batch. In training mode batch normalization uses
    /// batch statistics (batch size ≥ 2 required); in inference mode it uses
    /// the stored running statistics. Running statistics are not modified
    /// here; call [`Network::commit_running_stats`] after a training step.
    pub fn forward_batch(
        &self,
        inputs: &[Tensor4D],
        training: bool,
    ) -> Result<(Vec<Vec<f64>>, Cache)> {
        if inputs.is_empty() {
            return Err(Error::parameter("forward pass needs at least one sample"));
        }
        if training && inputs.len() < 2 {
            return Err(Error::parameter(
                "training-mode batch normalization needs batch size >= 2",
            ));
        }
        for t in inputs {
            if t.channels != self.config.input_channels || t.n != self.config.input_resolution {
                return Err(Error::parameter(format!(
                    "input shape {}x{}^3 does not match network {}x{}^3",
                    t.channels,
                    t.n,
                    self.config.input_channels,
                    self.config.input_resolution
                )));
            }
        }
        let batch = inputs.len();
        let mut current: Vec<Tensor4D> = inputs.to_vec();
        let mut block_caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let conv: Vec<Tensor4D> = current
                .par_iter()
                .map(|t| conv3d_forward(block, t))
                .collect();
            let voxels = conv[0].n * conv[0].n * conv[0].n;
            let c_out = block.out_channels;
            let (mean, var) = if training {
                let count = (batch * voxels) as f64;
                let mut mean = vec![0.0; c_out];
                let mut var = vec![0.0; c_out];
                for t in &conv {
                    for c in 0..c_out {
                        for v in &t.data[c * voxels..(c + 1) * voxels] {
                            mean[c] += v;
                        }
                    }
                }
                for m in &mut mean {
                    *m /= count;
                }
                for t in &conv {
                    for c in 0..c_out {
                        for v in &t.data[c * voxels..(c + 1) * voxels] {
                            let d = v - mean[c];
                            var[c] += d * d;
                        }
                    }
                }
                for v in &mut var {
                    *v /= count;
                }
                (mean, var)
            } else {
                (block.bn_running_mean.clone(), block.bn_running_var.clone())
            };
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
            let mut xhat = Vec::with_capacity(batch);
            let mut relu = Vec::with_capacity(batch);
            let mut pooled = Vec::with_capacity(batch);
            let mut argmax = Vec::with_capacity(batch);
            for t in &conv {
                let mut xh = t.clone();
                let mut act = t.clone();
                for c in 0..c_out {
                    let g = block.bn_gain[c];
                    let b = block.bn_offset[c];
                    for j in c * voxels..(c + 1) * voxels {
                        let h = (t.data[j] - mean[c]) * inv_std[c];
                        xh.data[j] = h;
                        act.data[j] = (g * h + b).max(0.0);
                    }
                }
                let (p, a) = maxpool3d(&act)?;
                xhat.push(xh);
                relu.push(act);
                pooled.push(p);
                argmax.push(a);
            }
            block_caches.push(BlockCache {
                inputs: std::mem::take(&mut current),
                xhat,
                inv_std,
                relu,
                argmax,
                batch_mean: mean,
                batch_var: var,
            });
            current = pooled;
        }

        // Global average pooling.
        let final_n = current[0].n;
        let final_vox = final_n * final_n * final_n;
        let mut activations: Vec<Vec<f64>> = current
            .iter()
            .map(|t| {
                (0..t.channels)
                    .map(|c| {
                        t.data[c * final_vox..(c + 1) * final_vox].iter().sum::<f64>()
                            / final_vox as f64
                    })
                    .collect()
            })
            .collect();

        let mut fc_inputs = Vec::with_capacity(self.linears.len());
        let n_linear = self.linears.len();
        for (l, layer) in self.linears.iter().enumerate() {
            fc_inputs.push(activations.clone());
            let last = l + 1 == n_linear;
            activations = activations
                .iter()
                .map(|input| {
                    (0..layer.out_width)
                        .map(|o| {
                            let row = &layer.weight[o * layer.in_width..(o + 1) * layer.in_width];
                            let mut acc = layer.bias[o];
                            for (w, v) in row.iter().zip(input) {
                                acc += w * v;
                            }
                            if last {
                                acc
                            } else {
                                acc.max(0.0)
                            }
                        })
                        .collect()
                })
                .collect();
        }
        Ok((
            activations,
            Cache {
                blocks: block_caches,
                fc_inputs,
                training,
            },
        ))
    }

    /// Single-sample inference.
    pub fn forward(&self, input: &Tensor4D) -> Result<Vec<f64>> {
        let (mut out, _) = self.forward_batch(std::slice::from_ref(input), false)?;
        Ok(out.pop().unwrap())
    }

    /// Fold the batch statistics recorded in a training-mode cache into the
    /// running batch-norm statistics (momentum 0.1).
    pub fn commit_running_stats(&mut self, cache: &Cache) {
        if !cache.training {
            return;
        }
        for (block, bc) in self.blocks.iter_mut().zip(&cache.blocks) {
            for c in 0..block.out_channels {
                block.bn_running_mean[c] =
                    (1.0 - BN_MOMENTUM) * block.bn_running_mean[c] + BN_MOMENTUM * bc.batch_mean[c];
                block.bn_running_var[c] =
                    (1.0 - BN_MOMENTUM) * block.bn_running_var[c] + BN_MOMENTUM * bc.batch_var[c];
            }
        }
    }

    /// Backpropagate the mean-squared error over a batch. Returns the
    /// gradients and the loss value. The cache must come from a
    /// training-mode forward pass on the same inputs.
    pub fn backward(
        &self,
        cache: &Cache,
        predictions: &[Vec<f64>],
        targets: &[[f64; 6]],
    ) -> Result<(Gradients, f64)> {
        if !cache.training {
            return Err(Error::parameter("backward needs a training-mode cache"));
        }
        if predictions.len() != targets.len() {
            return Err(Error::parameter("prediction/target batch size mismatch"));
        }
        let batch = targets.len();
        let dim = self.config.output_dim;
        let scale = 1.0 / (batch * dim) as f64;
        let mut mse = 0.0;
        let mut d_act: Vec<Vec<f64>> = predictions
            .iter()
            .zip(targets)
            .map(|(p, t)| {
                (0..dim)
                    .map(|c| {
                        let e = p[c] - t[c];
                        mse += e * e * scale;
                        2.0 * e * scale
                    })
                    .collect()
            })
            .collect();

        let mut grads = Gradients::zeros_like(self);

        for l in (0..self.linears.len()).rev() {
            let layer = &self.linears[l];
            let inputs = &cache.fc_inputs[l];
            let lg = &mut grads.linears[l];
            let mut d_prev = vec![vec![0.0; layer.in_width]; batch];
            for s in 0..batch {
                for o in 0..layer.out_width {
                    let g = d_act[s][o];
                    lg.bias[o] += g;
                    let row = &layer.weight[o * layer.in_width..(o + 1) * layer.in_width];
                    for (j, (w, v)) in row.iter().zip(&inputs[s]).enumerate() {
                        lg.weight[o * layer.in_width + j] += g * v;
                        d_prev[s][j] += g * w;
                    }
                }
                // Hidden activations were ReLU'd; kill gradients where the
                // activation (this layer's input) was clipped to zero.
                if l > 0 {
                    for (dv, v) in d_prev[s].iter_mut().zip(&inputs[s]) {
                        if *v <= 0.0 {
                            *dv = 0.0;
                        }
                    }
                }
            }
            d_act = d_prev;
        }

        // Undo global average pooling.
        let final_n = self.config.layer_resolutions()[self.blocks.len()];
        let final_vox = final_n * final_n * final_n;
        let last_channels = *self.config.conv_channels.last().unwrap();
        let mut d_pool: Vec<Tensor4D> = d_act
            .iter()
            .map(|d| {
                let mut t = Tensor4D::zeros(last_channels, final_n);
                for c in 0..last_channels {
                    let g = d[c] / final_vox as f64;
                    for v in &mut t.data[c * final_vox..(c + 1) * final_vox] {
                        *v = g;
                    }
                }
                t
            })
            .collect();

        for l in (0..self.blocks.len()).rev() {
            let block = &self.blocks[l];
            let bc = &cache.blocks[l];
            let n = bc.relu[0].n;
            let voxels = n * n * n;
            let count = (batch * voxels) as f64;
            // Scatter pool gradients and apply the ReLU mask: dy is the
            // gradient at the batch-norm output.
            let mut dy: Vec<Tensor4D> = (0..batch)
                .map(|s| {
                    let mut t = Tensor4D::zeros(block.out_channels, n);
                    for (dst, src) in bc.argmax[s].iter().enumerate() {
                        if bc.relu[s].data[*src as usize] > 0.0 {
                            t.data[*src as usize] += d_pool[s].data[dst];
                        }
                    }
                    t
                })
                .collect();
            // Batch-norm backward per channel.
            let bg = &mut grads.blocks[l];
            for c in 0..block.out_channels {
                let mut sum_dy = 0.0;
                let mut sum_dy_xhat = 0.0;
                for s in 0..batch {
                    for j in c * voxels..(c + 1) * voxels {
                        sum_dy += dy[s].data[j];
                        sum_dy_xhat += dy[s].data[j] * bc.xhat[s].data[j];
                    }
                }
                bg.bn_offset[c] += sum_dy;
                bg.bn_gain[c] += sum_dy_xhat;
                let coeff = block.bn_gain[c] * bc.inv_std[c];
                let mean_dy = sum_dy / count;
                let mean_dy_xhat = sum_dy_xhat / count;
                for s in 0..batch {
                    for j in c * voxels..(c + 1) * voxels {
                        dy[s].data[j] = coeff
                            * (dy[s].data[j] - mean_dy - bc.xhat[s].data[j] * mean_dy_xhat);
                    }
                }
            }
            // Conv backward, parallel over the batch, summed in order.
            let per_sample: Vec<(Vec<f64>, Vec<f64>, Tensor4D)> = bc
                .inputs
                .par_iter()
                .zip(&dy)
                .map(|(input, g)| conv3d_backward(block, input, g))
                .collect();
            let mut d_prev = Vec::with_capacity(batch);
            for (dk, db, din) in per_sample {
                for (a, b) in bg.kernel.iter_mut().zip(&dk) {
                    *a += b;
                }
                for (a, b) in bg.bias.iter_mut().zip(&db) {
                    *a += b;
                }
                d_prev.push(din);
            }
            d_pool = d_prev;
        }
        Ok((grads, mse))
    }

    /// Mean-squared error over a set in inference mode.
    pub fn evaluate(&self, inputs: &[Tensor4D], targets: &[[f64; 6]]) -> Result<f64> {
        if inputs.len() != targets.len() {
            return Err(Error::parameter("input/target length mismatch"));
        }
        let (preds, _) = self.forward_batch(inputs, false)?;
        let dim = self.config.output_dim;
        let mut mse = 0.0;
        for (p, t) in preds.iter().zip(targets) {
            for c in 0..dim {
                let e = p[c] - t[c];
                mse += e * e;
            }
        }
        Ok(mse / (inputs.len() * dim) as f64)
    }
}

/// Per-parameter gradients mirroring the network layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub blocks: Vec<BlockGrads>,
    pub linears: Vec<LinearGrads>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockGrads {
    pub kernel: Vec<f64>,
    pub bias: Vec<f64>,
    pub bn_gain: Vec<f64>,
    pub bn_offset: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrads {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Gradients {
            blocks: net
                .blocks
                .iter()
                .map(|b| BlockGrads {
                    kernel: vec![0.0; b.kernel.len()],
                    bias: vec![0.0; b.bias.len()],
                    bn_gain: vec![0.0; b.bn_gain.len()],
                    bn_offset: vec![0.0; b.bn_offset.len()],
                })
                .collect(),
            linears: net
                .linears
                .iter()
                .map(|l| LinearGrads {
                    weight: vec![0.0; l.weight.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }
}

/// Adam first/second moment accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Gradients,
    pub v: Gradients,
}

impl AdamState {
    pub fn new(net: &Network) -> Self {
        AdamState {
            t: 0,
            m: Gradients::zeros_like(net),
            v: Gradients::zeros_like(net),
        }
    }
}

fn adam_update(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
) {
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);
    for j in 0..params.len() {
        m[j] = beta1 * m[j] + (1.0 - beta1) * grads[j];
        v[j] = beta2 * v[j] + (1.0 - beta2) * grads[j] * grads[j];
        let mh = m[j] / bc1;
        let vh = v[j] / bc2;
        params[j] -= lr * mh / (vh.sqrt() + eps);
    }
}

/// One bias-corrected Adam step over every trainable parameter (batch-norm
/// gain/offset included; running statistics are not trainable).
pub fn adam_step(
    net: &mut Network,
    grads: &Gradients,
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    state.t += 1;
    let t = state.t;
    for (((block, g), m), v) in net
        .blocks
        .iter_mut()
        .zip(&grads.blocks)
        .zip(&mut state.m.blocks)
        .zip(&mut state.v.blocks)
    {
        adam_update(&mut block.kernel, &g.kernel, &mut m.kernel, &mut v.kernel, lr, beta1, beta2, eps, t);
        adam_update(&mut block.bias, &g.bias, &mut m.bias, &mut v.bias, lr, beta1, beta2, eps, t);
        adam_update(&mut block.bn_gain, &g.bn_gain, &mut m.bn_gain, &mut v.bn_gain, lr, beta1, beta2, eps, t);
        adam_update(&mut block.bn_offset, &g.bn_offset, &mut m.bn_offset, &mut v.bn_offset, lr, beta1, beta2, eps, t);
    }
    for (((layer, g), m), v) in net
        .linears
        .iter_mut()
        .zip(&grads.linears)
        .zip(&mut state.m.linears)
        .zip(&mut state.v.linears)
    {
        adam_update(&mut layer.weight, &g.weight, &mut m.weight, &mut v.weight, lr, beta1, beta2, eps, t);
        adam_update(&mut layer.bias, &g.bias, &mut m.bias, &mut v.bias, lr, beta1, beta2, eps, t);
    }
}

/// Training protocol parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Learning-rate multiplier applied after `plateau_patience` epochs
    /// without validation improvement.
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.0025,
            batch_size: 64,
            epochs: 125,
            plateau_factor: 0.5,
            plateau_patience: 10,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
        }
    }
}

/// One row of the training history.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
    pub lr: f64,
}

/// Minibatch Adam training with validation-based best-weight selection and
/// plateau learning-rate decay. On return the network holds the weights of
/// the epoch with the lowest validation MSE.
pub fn train(
    net: &mut Network,
    train_inputs: &[Tensor4D],
    train_targets: &[[f64; 6]],
    val_inputs: &[Tensor4D],
    val_targets: &[[f64; 6]],
    cfg: &TrainConfig,
) -> Result<Vec<EpochRecord>> {
    if train_inputs.len() != train_targets.len() || val_inputs.len() != val_targets.len() {
        return Err(Error::parameter("input/target length mismatch"));
    }
    if train_inputs.len() < 2 {
        return Err(Error::parameter("training split needs at least two samples"));
    }
    if val_inputs.is_empty() {
        return Err(Error::parameter("validation split must not be empty"));
    }
    if cfg.batch_size < 2 {
        return Err(Error::parameter("batch size must be at least 2"));
    }
    let mut state = AdamState::new(net);
    let mut lr = cfg.lr0;
    let mut best_val = f64::INFINITY;
    let mut best_weights = net.clone();
    let mut stagnant = 0usize;
    let mut history = Vec::with_capacity(cfg.epochs);
    let n = train_inputs.len();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1 + epoch as u64);
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);

        // Split into minibatches; a trailing singleton is folded into the
        // previous batch so batch normalization always sees >= 2 samples.
        let mut batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        if batches.len() >= 2 && batches.last().unwrap().len() == 1 {
            let merged_start = (batches.len() - 2) * cfg.batch_size;
            batches.pop();
            batches.pop();
            batches.push(&order[merged_start..]);
        }

        let mut train_mse = 0.0;
        let mut seen = 0usize;
        for batch in batches {
            let inputs: Vec<Tensor4D> =
                batch.iter().map(|i| train_inputs[*i].clone()).collect();
            let targets: Vec<[f64; 6]> = batch.iter().map(|i| train_targets[*i]).collect();
            let (preds, cache) = net.forward_batch(&inputs, true)?;
            let (grads, mse) = net.backward(&cache, &preds, &targets)?;
            net.commit_running_stats(&cache);
            adam_step(net, &grads, &mut state, lr, cfg.beta1, cfg.beta2, cfg.eps);
            train_mse += mse * batch.len() as f64;
            seen += batch.len();
        }
        train_mse /= seen as f64;

        let val_mse = net.evaluate(val_inputs, val_targets)?;
        history.push(EpochRecord {
            epoch,
            train_mse,
            val_mse,
            lr,
        });
        if val_mse < best_val {
            best_val = val_mse;
            best_weights = net.clone();
            stagnant = 0;
        } else {
            stagnant += 1;
            if stagnant >= cfg.plateau_patience {
                lr *= cfg.plateau_factor;
                stagnant = 0;
            }
        }
    }
    *net = best_weights;
    Ok(history)
}

/// Apply the trained surrogate to a raw (un-normalized) conductivity block.
///
/// The block is normalized by its own matrix baseline (the mean over the six
/// channels), standardized with the training statistics, pushed through the
/// network, and the output is de-standardized and re-scaled.
pub fn predict_equivalent(
    net: &Network,
    stats: &NormalizationStats,
    raw: &TensorGrid,
    baseline: f64,
) -> Result<EquivalentTensor> {
    if !(baseline > 0.0) {
        return Err(Error::data("prediction baseline must be positive"));
    }
    let mut scaled = raw.clone();
    for ch in &mut scaled.channels {
        for v in ch.iter_mut() {
            *v /= baseline;
        }
    }
    let standardized = standardize_field(&scaled, &stats.input);
    let input = Tensor4D::from_tensor_grid(&standardized)?;
    let out = net.forward(&input)?;
    let out6: [f64; 6] = out
        .as_slice()
        .try_into()
        .map_err(|_| Error::internal("network output dimension is not 6"))?;
    let mut voigt = destandardize_voigt(&out6, &stats.output);
    for v in &mut voigt {
        *v *= baseline;
    }
    Ok(EquivalentTensor {
        voigt,
        residual: 0.0,
        rank_deficient: false,
    })
}

/// Trained network plus its training statistics, usable as a block predictor
/// in domain homogenization.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateModel {
    pub network: Network,
    pub stats: NormalizationStats,
}

impl BlockPredictor for SurrogateModel {
    fn predict(&self, input: &TensorGrid, matrix_block: &TensorGrid) -> Result<[f64; 6]> {
        let baseline = field_mean(matrix_block);
        Ok(predict_equivalent(&self.network, &self.stats, input, baseline)?.voigt)
    }
}

fn write_tensor(w: &mut impl Write, dims: &[usize], data: &[f64]) -> Result<()> {
    let expect: usize = dims.iter().product();
    debug_assert_eq!(expect, data.len());
    w.write_all(&(dims.len() as u32).to_le_bytes())?;
    for d in dims {
        w.write_all(&(*d as u32).to_le_bytes())?;
    }
    for v in data {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    Ok(())
}

fn read_tensor(r: &mut impl Read, dims: &[usize]) -> Result<Vec<f64>> {
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)
        .map_err(|_| Error::format("weight file ends inside a tensor header"))?;
    let rank = u32::from_le_bytes(u32buf) as usize;
    if rank != dims.len() {
        return Err(Error::format(format!(
            "tensor rank {rank} does not match expected {}",
            dims.len()
        )));
    }
    for d in dims {
        r.read_exact(&mut u32buf)?;
        let got = u32::from_le_bytes(u32buf) as usize;
        if got != *d {
            return Err(Error::format(format!(
                "tensor dimension {got} does not match expected {d}"
            )));
        }
    }
    let len: usize = dims.iter().product();
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        r.read_exact(&mut u32buf)
            .map_err(|_| Error::format("weight file ends inside a tensor payload"))?;
        out.push(f64::from(f32::from_le_bytes(u32buf)));
    }
    Ok(out)
}

fn block_tensor_dims(block: &ConvBlock) -> Vec<(Vec<usize>, &Vec<f64>)> {
    vec![
        (
            vec![block.out_channels, block.in_channels, KERNEL, KERNEL, KERNEL],
            &block.kernel,
        ),
        (vec![block.out_channels], &block.bias),
        (vec![block.out_channels], &block.bn_gain),
        (vec![block.out_channels], &block.bn_offset),
        (vec![block.out_channels], &block.bn_running_mean),
        (vec![block.out_channels], &block.bn_running_var),
    ]
}

/// Write the network to a DFMW weight file (f32 payloads).
pub fn save_weights(net: &Network, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(WEIGHTS_MAGIC)?;
    w.write_all(&WEIGHTS_VERSION.to_le_bytes())?;
    let cfg = &net.config;
    w.write_all(&(cfg.input_resolution as u32).to_le_bytes())?;
    w.write_all(&(cfg.input_channels as u32).to_le_bytes())?;
    w.write_all(&(cfg.output_dim as u32).to_le_bytes())?;
    w.write_all(&(cfg.conv_channels.len() as u32).to_le_bytes())?;
    for c in &cfg.conv_channels {
        w.write_all(&(*c as u32).to_le_bytes())?;
    }
    w.write_all(&(cfg.fc_widths.len() as u32).to_le_bytes())?;
    for c in &cfg.fc_widths {
        w.write_all(&(*c as u32).to_le_bytes())?;
    }
    w.write_all(&cfg.hash().to_le_bytes())?;
    for block in &net.blocks {
        for (dims, data) in block_tensor_dims(block) {
            write_tensor(&mut w, &dims, data)?;
        }
    }
    for layer in &net.linears {
        write_tensor(&mut w, &[layer.out_width, layer.in_width], &layer.weight)?;
        write_tensor(&mut w, &[layer.out_width], &layer.bias)?;
    }
    w.flush()?;
    Ok(())
}

/// Read a DFMW weight file written by [`save_weights`].
pub fn load_weights(path: &Path) -> Result<Network> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != WEIGHTS_MAGIC {
        return Err(Error::format("not a DFMW weight file"));
    }
    let mut u32buf = [0u8; 4];
    let mut read_u32 = |r: &mut BufReader<File>| -> Result<u32> {
        r.read_exact(&mut u32buf)
            .map_err(|_| Error::format("weight file header is truncated"))?;
        Ok(u32::from_le_bytes(u32buf))
    };
    let version = read_u32(&mut r)?;
    if version != WEIGHTS_VERSION {
        return Err(Error::format(format!(
            "unsupported weight file version {version}"
        )));
    }
    let input_resolution = read_u32(&mut r)? as usize;
    let input_channels = read_u32(&mut r)? as usize;
    let output_dim = read_u32(&mut r)? as usize;
    let n_conv = read_u32(&mut r)? as usize;
    let conv_channels: Vec<usize> = (0..n_conv)
        .map(|_| read_u32(&mut r).map(|v| v as usize))
        .collect::<Result<_>>()?;
    let n_fc = read_u32(&mut r)? as usize;
    let fc_widths: Vec<usize> = (0..n_fc)
        .map(|_| read_u32(&mut r).map(|v| v as usize))
        .collect::<Result<_>>()?;
    let config = NetworkConfig {
        input_resolution,
        input_channels,
        conv_channels,
        fc_widths,
        output_dim,
    };
    config.validate()?;
    let mut hash_buf = [0u8; 8];
    r.read_exact(&mut hash_buf)?;
    if u64::from_le_bytes(hash_buf) != config.hash() {
        return Err(Error::format("weight file architecture hash mismatch"));
    }

    let mut blocks = Vec::with_capacity(config.conv_channels.len());
    let mut c_in = config.input_channels;
    for &c_out in &config.conv_channels {
        let kernel = read_tensor(&mut r, &[c_out, c_in, KERNEL, KERNEL, KERNEL])?;
        let bias = read_tensor(&mut r, &[c_out])?;
        let bn_gain = read_tensor(&mut r, &[c_out])?;
        let bn_offset = read_tensor(&mut r, &[c_out])?;
        let bn_running_mean = read_tensor(&mut r, &[c_out])?;
        let bn_running_var = read_tensor(&mut r, &[c_out])?;
        blocks.push(ConvBlock {
            in_channels: c_in,
            out_channels: c_out,
            kernel,
            bias,
            bn_gain,
            bn_offset,
            bn_running_mean,
            bn_running_var,
        });
        c_in = c_out;
    }
    let mut linears = Vec::new();
    let mut w_in = c_in;
    for &w_out in config.fc_widths.iter().chain(std::iter::once(&config.output_dim)) {
        let weight = read_tensor(&mut r, &[w_out, w_in])?;
        let bias = read_tensor(&mut r, &[w_out])?;
        linears.push(LinearLayer {
            in_width: w_in,
            out_width: w_out,
            weight,
            bias,
        });
        w_in = w_out;
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::format("weight file has trailing bytes"));
    }
    Ok(Network {
        config,
        blocks,
        linears,
    })
}
