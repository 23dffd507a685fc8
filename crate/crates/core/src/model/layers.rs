//! Feature maps and the layer primitives of the encoder-decoder, each with
//! a hand-written backward pass.

use rayon::prelude::*;

/// Multi-channel 3D activation, channel-major, each channel x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub dims: [usize; 3],
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, dims: [usize; 3]) -> Self {
        Self {
            channels,
            dims,
            data: vec![0.0; channels * dims.iter().product::<usize>()],
        }
    }

    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            channels: self.channels,
            dims: self.dims,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }
}

/// Index ranges of output voxels whose input neighbour at `offset` is in
/// bounds (zero padding elsewhere).
#[inline]
fn valid_range(n: usize, offset: isize) -> std::ops::Range<usize> {
    let lo = (-offset).max(0) as usize;
    let hi = (n as isize - offset.max(0)).max(0) as usize;
    lo..hi.max(lo)
}

#[inline]
fn offsets(k: usize) -> impl Iterator<Item = (usize, [isize; 3])> {
    let p = (k / 2) as isize;
    (0..k * k * k).map(move |o| {
        let dx = (o % k) as isize - p;
        let dy = ((o / k) % k) as isize - p;
        let dz = (o / (k * k)) as isize - p;
        (o, [dx, dy, dz])
    })
}

/// Visits every (output voxel, shifted input voxel) pair for one kernel
/// offset, one contiguous x-run at a time: `f(out_start, in_start, len)`.
#[inline]
fn for_each_run(dims: [usize; 3], off: [isize; 3], mut f: impl FnMut(usize, usize, usize)) {
    let [nx, ny, nz] = dims;
    let rx = valid_range(nx, off[0]);
    if rx.is_empty() {
        return;
    }
    for z in valid_range(nz, off[2]) {
        let zi = (z as isize + off[2]) as usize;
        for y in valid_range(ny, off[1]) {
            let yi = (y as isize + off[1]) as usize;
            let o = nx * (y + ny * z) + rx.start;
            let i = nx * (yi + ny * zi) + (rx.start as isize + off[0]) as usize;
            f(o, i, rx.len());
        }
    }
}

/// Same-padded 3D convolution (cross-correlation). `weight` is laid out
/// `[out][in][kz][ky][kx]`.
pub fn conv3d(input: &FeatureMap, weight: &[f64], bias: &[f64], out_ch: usize, k: usize) -> FeatureMap {
    let n = input.voxels();
    let in_ch = input.channels;
    let kk = k * k * k;
    debug_assert_eq!(weight.len(), out_ch * in_ch * kk);
    let mut out = FeatureMap::zeros(out_ch, input.dims);
    out.data.par_chunks_mut(n).enumerate().for_each(|(co, o)| {
        o.fill(bias[co]);
        for ci in 0..in_ch {
            let src = input.channel(ci);
            for (oi, off) in offsets(k) {
                let w = weight[(co * in_ch + ci) * kk + oi];
                if w == 0.0 {
                    continue;
                }
                for_each_run(input.dims, off, |os, is, len| {
                    for (a, &b) in o[os..os + len].iter_mut().zip(&src[is..is + len]) {
                        *a += w * b;
                    }
                });
            }
        }
    });
    out
}

/// Gradients of [`conv3d`]: (input, weight, bias).
pub fn conv3d_backward(
    input: &FeatureMap,
    weight: &[f64],
    grad_out: &FeatureMap,
    k: usize,
) -> (FeatureMap, Vec<f64>, Vec<f64>) {
    let n = input.voxels();
    let in_ch = input.channels;
    let out_ch = grad_out.channels;
    let kk = k * k * k;

    let grad_b: Vec<f64> = (0..out_ch)
        .map(|co| grad_out.channel(co).iter().sum())
        .collect();

    let mut grad_w = vec![0.0; out_ch * in_ch * kk];
    grad_w.par_chunks_mut(in_ch * kk).enumerate().for_each(|(co, gw)| {
        let go = grad_out.channel(co);
        for ci in 0..in_ch {
            let src = input.channel(ci);
            for (oi, off) in offsets(k) {
                let mut acc = 0.0;
                for_each_run(input.dims, off, |os, is, len| {
                    acc += go[os..os + len]
                        .iter()
                        .zip(&src[is..is + len])
                        .map(|(a, b)| a * b)
                        .sum::<f64>();
                });
                gw[ci * kk + oi] = acc;
            }
        }
    });

    let mut grad_in = FeatureMap::zeros(in_ch, input.dims);
    grad_in.data.par_chunks_mut(n).enumerate().for_each(|(ci, gi)| {
        for co in 0..out_ch {
            let go = grad_out.channel(co);
            for (oi, off) in offsets(k) {
                let w = weight[(co * in_ch + ci) * kk + oi];
                if w == 0.0 {
                    continue;
                }
                for_each_run(input.dims, off, |os, is, len| {
                    for (a, &b) in gi[is..is + len].iter_mut().zip(&go[os..os + len]) {
                        *a += w * b;
                    }
                });
            }
        }
    });
    (grad_in, grad_w, grad_b)
}

pub fn relu(x: &FeatureMap) -> FeatureMap {
    FeatureMap {
        channels: x.channels,
        dims: x.dims,
        data: x.data.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
    }
}

/// Gradient through ReLU given its pre-activation input.
pub fn relu_backward(pre: &FeatureMap, grad_out: &FeatureMap) -> FeatureMap {
    FeatureMap {
        channels: pre.channels,
        dims: pre.dims,
        data: pre
            .data
            .iter()
            .zip(&grad_out.data)
            .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
            .collect(),
    }
}

/// 2x2x2 max pooling. Returns the pooled map and, per output value, the
/// linear input index it came from. Ties keep the lowest index.
pub fn max_pool2(x: &FeatureMap) -> (FeatureMap, Vec<usize>) {
    let [nx, ny, nz] = x.dims;
    let od = [nx / 2, ny / 2, nz / 2];
    let on: usize = od.iter().product();
    let n = x.voxels();
    let mut out = FeatureMap::zeros(x.channels, od);
    let mut arg = vec![0usize; x.channels * on];
    for c in 0..x.channels {
        let src = x.channel(c);
        for k in 0..od[2] {
            for j in 0..od[1] {
                for i in 0..od[0] {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = usize::MAX;
                    // visit in increasing linear index
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let idx = (2 * i + dx) + nx * ((2 * j + dy) + ny * (2 * k + dz));
                                if src[idx] > best || best_idx == usize::MAX {
                                    best = src[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                    }
                    let o = c * on + i + od[0] * (j + od[1] * k);
                    out.data[o] = best;
                    arg[o] = c * n + best_idx;
                }
            }
        }
    }
    (out, arg)
}

pub fn max_pool2_backward(input_dims: [usize; 3], channels: usize, argmax: &[usize], grad_out: &FeatureMap) -> FeatureMap {
    let mut g = FeatureMap::zeros(channels, input_dims);
    for (o, &src) in argmax.iter().enumerate() {
        g.data[src] += grad_out.data[o];
    }
    g
}

/// Nearest-neighbour 2x up-sampling.
pub fn upsample2(x: &FeatureMap) -> FeatureMap {
    let [nx, ny, nz] = x.dims;
    let od = [2 * nx, 2 * ny, 2 * nz];
    let mut out = FeatureMap::zeros(x.channels, od);
    let on: usize = od.iter().product();
    for c in 0..x.channels {
        let src = x.channel(c);
        let dst = &mut out.data[c * on..(c + 1) * on];
        for k in 0..od[2] {
            for j in 0..od[1] {
                for i in 0..od[0] {
                    dst[i + od[0] * (j + od[1] * k)] = src[i / 2 + nx * (j / 2 + ny * (k / 2))];
                }
            }
        }
    }
    out
}

pub fn upsample2_backward(grad_out: &FeatureMap) -> FeatureMap {
    let od = grad_out.dims;
    let d = [od[0] / 2, od[1] / 2, od[2] / 2];
    let mut g = FeatureMap::zeros(grad_out.channels, d);
    let n: usize = d.iter().product();
    let on: usize = od.iter().product();
    for c in 0..grad_out.channels {
        let src = &grad_out.data[c * on..(c + 1) * on];
        let dst = &mut g.data[c * n..(c + 1) * n];
        for k in 0..od[2] {
            for j in 0..od[1] {
                for i in 0..od[0] {
                    dst[i / 2 + d[0] * (j / 2 + d[1] * (k / 2))] += src[i + od[0] * (j + od[1] * k)];
                }
            }
        }
    }
    g
}

/// Channel concatenation `[a; b]`.
pub fn concat(a: &FeatureMap, b: &FeatureMap) -> FeatureMap {
    assert_eq!(a.dims, b.dims);
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    FeatureMap {
        channels: a.channels + b.channels,
        dims: a.dims,
        data,
    }
}

/// Splits a concatenation gradient back into its two parts.
pub fn split(g: &FeatureMap, first: usize) -> (FeatureMap, FeatureMap) {
    let cut = first * g.voxels();
    (
        FeatureMap {
            channels: first,
            dims: g.dims,
            data: g.data[..cut].to_vec(),
        },
        FeatureMap {
            channels: g.channels - first,
            dims: g.dims,
            data: g.data[cut..].to_vec(),
        },
    )
}

pub const BN_EPS: f64 = 1e-5;

/// Per-channel statistics saved by a training-mode batch-norm pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BnCache {
    pub xhat: FeatureMap,
    pub inv_std: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Batch normalization over the spatial extent of a single sample.
pub fn batch_norm_train(x: &FeatureMap, gamma: &[f64], beta: &[f64]) -> (FeatureMap, BnCache) {
    let n = x.voxels();
    let mut y = FeatureMap::zeros(x.channels, x.dims);
    let mut xhat = FeatureMap::zeros(x.channels, x.dims);
    let mut inv_std = Vec::with_capacity(x.channels);
    let mut means = Vec::with_capacity(x.channels);
    let mut vars = Vec::with_capacity(x.channels);
    for c in 0..x.channels {
        let src = x.channel(c);
        let mean = src.iter().sum::<f64>() / n as f64;
        let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let is = 1.0 / (var + BN_EPS).sqrt();
        for i in 0..n {
            let h = (src[i] - mean) * is;
            xhat.data[c * n + i] = h;
            y.data[c * n + i] = gamma[c] * h + beta[c];
        }
        inv_std.push(is);
        means.push(mean);
        vars.push(var);
    }
    (
        y,
        BnCache {
            xhat,
            inv_std,
            mean: means,
            var: vars,
        },
    )
}

/// Batch normalization with fixed (running) statistics.
pub fn batch_norm_eval(x: &FeatureMap, gamma: &[f64], beta: &[f64], mean: &[f64], var: &[f64]) -> FeatureMap {
    let n = x.voxels();
    let mut y = FeatureMap::zeros(x.channels, x.dims);
    for c in 0..x.channels {
        let is = 1.0 / (var[c] + BN_EPS).sqrt();
        for i in 0..n {
            y.data[c * n + i] = gamma[c] * (x.data[c * n + i] - mean[c]) * is + beta[c];
        }
    }
    y
}

/// Gradients of [`batch_norm_train`]: (input, gamma, beta).
pub fn batch_norm_backward(cache: &BnCache, gamma: &[f64], grad_out: &FeatureMap) -> (FeatureMap, Vec<f64>, Vec<f64>) {
    let n = grad_out.voxels();
    let m = n as f64;
    let mut gx = FeatureMap::zeros(grad_out.channels, grad_out.dims);
    let mut gg = Vec::with_capacity(grad_out.channels);
    let mut gb = Vec::with_capacity(grad_out.channels);
    for c in 0..grad_out.channels {
        let dy = grad_out.channel(c);
        let xh = cache.xhat.channel(c);
        let sum_dy: f64 = dy.iter().sum();
        let sum_dy_xh: f64 = dy.iter().zip(xh).map(|(a, b)| a * b).sum();
        gg.push(sum_dy_xh);
        gb.push(sum_dy);
        let scale = gamma[c] * cache.inv_std[c] / m;
        for i in 0..n {
            gx.data[c * n + i] = scale * (m * dy[i] - sum_dy - xh[i] * sum_dy_xh);
        }
    }
    (gx, gg, gb)
}
