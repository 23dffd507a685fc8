//! Convolutional encoder-decoder that predicts a displacement field from a
//! fixed/moving pair.
//!
//! Encoder level `l`: two 3x3x3 convolutions (each + ReLU) with
//! `base_filters * 2^l` channels, then 2x max pooling. Decoder level `l`
//! (deepest first): nearest 2x up-sampling, concatenation with the encoder
//! features of level `l`, one 3x3x3 convolution, optional batch norm, ReLU.
//! A zero-initialized 1x1x1 head maps to three channels read as mm.

use serde::{Deserialize, Serialize};

use super::layers::{self, BnCache, FeatureMap};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::volume::{Grid, Volume};
use crate::warp::DisplacementField;

pub const KERNEL_SIZE: usize = 3;
const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConvNetConfig {
    pub levels: usize,
    pub base_filters: usize,
    pub use_batchnorm: bool,
    pub kernel_size: usize,
}

impl Default for ConvNetConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            base_filters: 8,
            use_batchnorm: true,
            kernel_size: KERNEL_SIZE,
        }
    }
}

impl ConvNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.base_filters == 0 {
            return Err(Error::Config("levels and base_filters must be positive".into()));
        }
        if self.kernel_size != KERNEL_SIZE {
            return Err(Error::Config(format!(
                "kernel_size is fixed at {KERNEL_SIZE}, got {}",
                self.kernel_size
            )));
        }
        Ok(())
    }

    /// Input dims must be divisible by this.
    pub fn divisor(&self) -> usize {
        1 << self.levels
    }

    pub fn filters(&self, level: usize) -> usize {
        self.base_filters << level
    }

    pub fn check_dims(&self, dims: [usize; 3]) -> Result<()> {
        let d = self.divisor();
        if dims.iter().any(|&n| n == 0 || n % d != 0) {
            return Err(Error::InvalidDims {
                dims,
                reason: format!("must be divisible by 2^levels = {d}"),
            });
        }
        Ok(())
    }
}

/// A named dense parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, v: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![v; n],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ConvLayer {
    fn zeros(in_ch: usize, out_ch: usize, k: usize) -> Self {
        Self {
            weight: Tensor::zeros(vec![out_ch, in_ch, k, k, k]),
            bias: Tensor::zeros(vec![out_ch]),
        }
    }

    fn he_uniform(in_ch: usize, out_ch: usize, k: usize, rng: &mut SplitMix64) -> Self {
        let mut l = Self::zeros(in_ch, out_ch, k);
        let bound = (6.0 / (in_ch * k * k * k) as f64).sqrt();
        l.weight.data.iter_mut().for_each(|w| *w = rng.uniform(-bound, bound));
        l
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape[0]
    }

    fn forward(&self, x: &FeatureMap) -> FeatureMap {
        layers::conv3d(x, &self.weight.data, &self.bias.data, self.out_channels(), self.weight.shape[2])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl BatchNorm {
    fn new(ch: usize) -> Self {
        Self {
            gamma: Tensor::filled(vec![ch], 1.0),
            beta: Tensor::zeros(vec![ch]),
            running_mean: Tensor::zeros(vec![ch]),
            running_var: Tensor::filled(vec![ch], 1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderBlock {
    pub conv: ConvLayer,
    pub bn: Option<BatchNorm>,
}

/// All weights of the network. The same type carries parameter gradients
/// (running statistics are left at zero there).
#[derive(Debug, Clone, PartialEq)]
pub struct ConvNetParameters {
    pub config: ConvNetConfig,
    pub encoder: Vec<[ConvLayer; 2]>,
    /// Indexed by level, like `encoder`.
    pub decoder: Vec<DecoderBlock>,
    pub head: ConvLayer,
}

impl ConvNetParameters {
    /// He-uniform hidden layers (fixed seed), zero biases, zero head.
    pub fn init(config: ConvNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SplitMix64::new(seed);
        Ok(Self::build(config, |i, o| ConvLayer::he_uniform(i, o, KERNEL_SIZE, &mut rng)))
    }

    /// All-zero tensors of the right shapes (gradient accumulator).
    pub fn zeros_like(config: ConvNetConfig) -> Self {
        let mut p = Self::build(config, |i, o| ConvLayer::zeros(i, o, KERNEL_SIZE));
        for d in &mut p.decoder {
            if let Some(bn) = &mut d.bn {
                bn.gamma.data.fill(0.0);
                bn.running_var.data.fill(0.0);
            }
        }
        p
    }

    fn build(config: ConvNetConfig, mut conv: impl FnMut(usize, usize) -> ConvLayer) -> Self {
        let levels = config.levels;
        let mut encoder = Vec::with_capacity(levels);
        let mut in_ch = 2;
        for l in 0..levels {
            let f = config.filters(l);
            encoder.push([conv(in_ch, f), conv(f, f)]);
            in_ch = f;
        }
        // decoder input channels: deeper features + skip
        let mut dec: Vec<Option<DecoderBlock>> = (0..levels).map(|_| None).collect();
        let mut below = config.filters(levels - 1);
        for l in (0..levels).rev() {
            let f = config.filters(l);
            dec[l] = Some(DecoderBlock {
                conv: conv(below + f, f),
                bn: config.use_batchnorm.then(|| BatchNorm::new(f)),
            });
            below = f;
        }
        Self {
            config,
            encoder,
            decoder: dec.into_iter().map(|d| d.expect("every level built")).collect(),
            head: ConvLayer::zeros(config.filters(0), 3, 1),
        }
    }

    /// Every tensor in declaration order (checkpoint order).
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for [a, b] in &self.encoder {
            out.extend([&a.weight, &a.bias, &b.weight, &b.bias]);
        }
        for d in &self.decoder {
            out.extend([&d.conv.weight, &d.conv.bias]);
            if let Some(bn) = &d.bn {
                out.extend([&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var]);
            }
        }
        out.extend([&self.head.weight, &self.head.bias]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for [a, b] in &mut self.encoder {
            out.extend([&mut a.weight, &mut a.bias, &mut b.weight, &mut b.bias]);
        }
        for d in &mut self.decoder {
            out.extend([&mut d.conv.weight, &mut d.conv.bias]);
            if let Some(bn) = &mut d.bn {
                out.extend([&mut bn.gamma, &mut bn.beta, &mut bn.running_mean, &mut bn.running_var]);
            }
        }
        out.extend([&mut self.head.weight, &mut self.head.bias]);
        out
    }

    /// Optimized tensors (everything except batch-norm running statistics),
    /// in declaration order.
    pub fn trainable(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for [a, b] in &self.encoder {
            out.extend([&a.weight, &a.bias, &b.weight, &b.bias]);
        }
        for d in &self.decoder {
            out.extend([&d.conv.weight, &d.conv.bias]);
            if let Some(bn) = &d.bn {
                out.extend([&bn.gamma, &bn.beta]);
            }
        }
        out.extend([&self.head.weight, &self.head.bias]);
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for [a, b] in &mut self.encoder {
            out.extend([&mut a.weight, &mut a.bias, &mut b.weight, &mut b.bias]);
        }
        for d in &mut self.decoder {
            out.extend([&mut d.conv.weight, &mut d.conv.bias]);
            if let Some(bn) = &mut d.bn {
                out.extend([&mut bn.gamma, &mut bn.beta]);
            }
        }
        out.extend([&mut self.head.weight, &mut self.head.bias]);
        out
    }

    pub fn num_trainable(&self) -> usize {
        self.trainable().iter().map(|t| t.data.len()).sum()
    }

    /// Structural fingerprint of the current values, used to detect stale
    /// activation caches.
    fn digest(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in self.tensors() {
            for v in &t.data {
                h ^= v.to_bits();
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }

    /// Checks that tensor shapes agree with the config.
    pub fn check_shapes(&self) -> Result<()> {
        let reference = Self::zeros_like(self.config);
        let a = self.tensors();
        let b = reference.tensors();
        if a.len() != b.len() {
            return Err(Error::Shape(format!(
                "expected {} tensors, found {}",
                b.len(),
                a.len()
            )));
        }
        for (i, (x, y)) in a.iter().zip(&b).enumerate() {
            if x.shape != y.shape || x.data.len() != y.data.len() {
                return Err(Error::Shape(format!(
                    "tensor {i}: expected shape {:?}, found {:?}",
                    y.shape, x.shape
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics of the current input.
    Train,
    /// Running statistics.
    Eval,
}

#[derive(Debug, Clone)]
struct EncoderCache {
    input: FeatureMap,
    pre1: FeatureMap,
    act1: FeatureMap,
    pre2: FeatureMap,
    skip: FeatureMap,
    argmax: Vec<usize>,
}

#[derive(Debug, Clone)]
struct DecoderCache {
    up_channels: usize,
    cat: FeatureMap,
    conv_out: FeatureMap,
    bn: Option<BnCache>,
    pre_act: FeatureMap,
}

/// Activations recorded by [`convnet_forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ActivationCache {
    config: ConvNetConfig,
    mode: Mode,
    grid: Grid,
    digest: u64,
    encoder: Vec<EncoderCache>,
    /// Indexed by level.
    decoder: Vec<DecoderCache>,
    head_input: FeatureMap,
}

impl ActivationCache {
    /// Features fed to the 1x1x1 head.
    pub fn head_input(&self) -> &FeatureMap {
        &self.head_input
    }

    /// Hash of every piecewise-linear branch taken in the forward pass (ReLU
    /// masks and max-pool winners). Two parameter settings with equal
    /// signatures lie in the same smooth piece of the network, which is what
    /// a finite-difference check needs.
    pub fn pattern_signature(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |v: u64| {
            h ^= v;
            h = h.wrapping_mul(0x0100_0000_01b3);
        };
        let masks = |m: &FeatureMap, mix: &mut dyn FnMut(u64)| {
            for chunk in m.data.chunks(64) {
                let bits = chunk
                    .iter()
                    .enumerate()
                    .fold(0u64, |acc, (i, &v)| acc | (((v > 0.0) as u64) << i));
                mix(bits);
            }
        };
        for e in &self.encoder {
            masks(&e.pre1, &mut mix);
            masks(&e.pre2, &mut mix);
            for &a in &e.argmax {
                mix(a as u64);
            }
        }
        for d in &self.decoder {
            masks(&d.pre_act, &mut mix);
        }
        h
    }

    /// Per-level (mean, variance) batch statistics, for running averages.
    pub fn batch_stats(&self) -> Vec<Option<(Vec<f64>, Vec<f64>)>> {
        self.decoder
            .iter()
            .map(|d| d.bn.as_ref().map(|b| (b.mean.clone(), b.var.clone())))
            .collect()
    }
}

/// Predicts a displacement field for the pair. Both volumes must share a
/// grid whose dims are divisible by `2^levels`.
pub fn convnet_forward(
    params: &ConvNetParameters,
    fixed: &Volume,
    moving: &Volume,
    mode: Mode,
) -> Result<(DisplacementField, ActivationCache)> {
    let cfg = params.config;
    cfg.validate()?;
    params.check_shapes()?;
    if fixed.dims() != moving.dims() {
        return Err(Error::DimsMismatch {
            left: fixed.dims(),
            right: moving.dims(),
        });
    }
    cfg.check_dims(fixed.dims())?;

    let dims = fixed.dims();
    let mut x = FeatureMap {
        channels: 2,
        dims,
        data: [fixed.data(), moving.data()].concat(),
    };

    let mut enc_cache = Vec::with_capacity(cfg.levels);
    for [c1, c2] in &params.encoder {
        let pre1 = c1.forward(&x);
        let act1 = layers::relu(&pre1);
        let pre2 = c2.forward(&act1);
        let skip = layers::relu(&pre2);
        let (pooled, argmax) = layers::max_pool2(&skip);
        enc_cache.push(EncoderCache {
            input: x,
            pre1,
            act1,
            pre2,
            skip,
            argmax,
        });
        x = pooled;
    }

    let mut dec_cache: Vec<Option<DecoderCache>> = (0..cfg.levels).map(|_| None).collect();
    for l in (0..cfg.levels).rev() {
        let block = &params.decoder[l];
        let up = layers::upsample2(&x);
        let cat = layers::concat(&up, &enc_cache[l].skip);
        let conv_out = block.conv.forward(&cat);
        let (pre_act, bn_cache) = match (&block.bn, mode) {
            (Some(bn), Mode::Train) => {
                let (y, c) = layers::batch_norm_train(&conv_out, &bn.gamma.data, &bn.beta.data);
                (y, Some(c))
            }
            (Some(bn), Mode::Eval) => (
                layers::batch_norm_eval(
                    &conv_out,
                    &bn.gamma.data,
                    &bn.beta.data,
                    &bn.running_mean.data,
                    &bn.running_var.data,
                ),
                None,
            ),
            (None, _) => (conv_out.clone(), None),
        };
        x = layers::relu(&pre_act);
        dec_cache[l] = Some(DecoderCache {
            up_channels: up.channels,
            cat,
            conv_out,
            bn: bn_cache,
            pre_act,
        });
    }

    let out = params.head.forward(&x);
    let n = out.voxels();
    let data = (0..n)
        .map(|i| [out.data[i], out.data[n + i], out.data[2 * n + i]])
        .collect();
    let field = DisplacementField::from_grid(*fixed.grid(), data)?;
    Ok((
        field,
        ActivationCache {
            config: cfg,
            mode,
            grid: *fixed.grid(),
            digest: params.digest(),
            encoder: enc_cache,
            decoder: dec_cache.into_iter().map(|d| d.expect("every level run")).collect(),
            head_input: x,
        },
    ))
}

/// Back-propagates `grad_field` (d loss / d field) to every trainable
/// parameter. `params` must be the values used for the forward pass.
pub fn convnet_backward(
    params: &ConvNetParameters,
    cache: &ActivationCache,
    grad_field: &DisplacementField,
) -> Result<ConvNetParameters> {
    if cache.config != params.config || cache.digest != params.digest() {
        return Err(Error::Shape("activation cache does not match parameters".into()));
    }
    if grad_field.dims() != cache.grid.dims {
        return Err(Error::DimsMismatch {
            left: grad_field.dims(),
            right: cache.grid.dims,
        });
    }
    if cache.mode == Mode::Eval && params.config.use_batchnorm {
        return Err(Error::Config("backward requires a training-mode forward pass".into()));
    }
    let cfg = params.config;
    let mut grads = ConvNetParameters::zeros_like(cfg);

    let n = grad_field.len();
    let mut g_head = FeatureMap::zeros(3, cache.grid.dims);
    for (i, u) in grad_field.data().iter().enumerate() {
        g_head.data[i] = u[0];
        g_head.data[n + i] = u[1];
        g_head.data[2 * n + i] = u[2];
    }
    let (mut g, gw, gb) = layers::conv3d_backward(&cache.head_input, &params.head.weight.data, &g_head, 1);
    grads.head.weight.data = gw;
    grads.head.bias.data = gb;

    let mut skip_grads: Vec<Option<FeatureMap>> = (0..cfg.levels).map(|_| None).collect();
    for l in 0..cfg.levels {
        let dc = &cache.decoder[l];
        let block = &params.decoder[l];
        let g_pre = layers::relu_backward(&dc.pre_act, &g);
        let g_conv = match (&block.bn, &dc.bn) {
            (Some(bn), Some(bc)) => {
                let (gx, gg, gbeta) = layers::batch_norm_backward(bc, &bn.gamma.data, &g_pre);
                let gbn = grads.decoder[l].bn.as_mut().expect("bn present");
                gbn.gamma.data = gg;
                gbn.beta.data = gbeta;
                gx
            }
            _ => g_pre,
        };
        let (g_cat, gw, gb) = layers::conv3d_backward(&dc.cat, &block.conv.weight.data, &g_conv, KERNEL_SIZE);
        grads.decoder[l].conv.weight.data = gw;
        grads.decoder[l].conv.bias.data = gb;
        let (g_up, g_skip) = layers::split(&g_cat, dc.up_channels);
        skip_grads[l] = Some(g_skip);
        g = layers::upsample2_backward(&g_up);
        debug_assert_eq!(dc.conv_out.dims, g_cat.dims);
    }

    for l in (0..cfg.levels).rev() {
        let ec = &cache.encoder[l];
        let [c1, c2] = &params.encoder[l];
        let mut g_skip = layers::max_pool2_backward(ec.skip.dims, ec.skip.channels, &ec.argmax, &g);
        let from_dec = skip_grads[l].take().expect("decoder ran");
        for (a, b) in g_skip.data.iter_mut().zip(&from_dec.data) {
            *a += b;
        }
        let g_pre2 = layers::relu_backward(&ec.pre2, &g_skip);
        let (g_act1, gw2, gb2) = layers::conv3d_backward(&ec.act1, &c2.weight.data, &g_pre2, KERNEL_SIZE);
        let g_pre1 = layers::relu_backward(&ec.pre1, &g_act1);
        let (g_in, gw1, gb1) = layers::conv3d_backward(&ec.input, &c1.weight.data, &g_pre1, KERNEL_SIZE);
        let ge = &mut grads.encoder[l];
        ge[0].weight.data = gw1;
        ge[0].bias.data = gb1;
        ge[1].weight.data = gw2;
        ge[1].bias.data = gb2;
        g = g_in;
    }
    Ok(grads)
}

/// Folds the batch statistics of a training pass into the running averages.
pub fn update_running_stats(params: &mut ConvNetParameters, cache: &ActivationCache) {
    for (block, stats) in params.decoder.iter_mut().zip(cache.batch_stats()) {
        if let (Some(bn), Some((mean, var))) = (&mut block.bn, stats) {
            for c in 0..mean.len() {
                bn.running_mean.data[c] = BN_MOMENTUM * bn.running_mean.data[c] + (1.0 - BN_MOMENTUM) * mean[c];
                bn.running_var.data[c] = BN_MOMENTUM * bn.running_var.data[c] + (1.0 - BN_MOMENTUM) * var[c];
            }
        }
    }
}
