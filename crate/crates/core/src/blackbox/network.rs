//! Two-block CNN: (conv3x3 -> ReLU -> batch-norm -> maxpool2) x 2 -> linear -> sigmoid.

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::BlackboxError;
use crate::dataset::IMAGE_SIDE;

pub const CONV1_CHANNELS: usize = 16;
pub const CONV2_CHANNELS: usize = 32;
pub const KERNEL: usize = 3;
pub const POOLED_SIDE: usize = IMAGE_SIDE / 4;
pub const HEAD_INPUTS: usize = CONV2_CHANNELS * POOLED_SIDE * POOLED_SIDE;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// A channel-major (C, H, W) activation volume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_image(pixels: &[f64]) -> Self {
        Self {
            channels: 1,
            height: IMAGE_SIDE,
            width: IMAGE_SIDE,
            data: pixels.to_vec(),
        }
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNorm {
    fn identity(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }

    /// Inference-mode per-channel affine map `y = scale * x + shift`.
    pub fn inference_affine(&self, channel: usize) -> (f64, f64) {
        let scale = self.gamma[channel] / (self.running_var[channel] + BN_EPS).sqrt();
        (scale, self.beta[channel] - scale * self.running_mean[channel])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Layout `[out][in][ky][kx]`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub bn: BatchNorm,
}

impl ConvBlock {
    fn zeros(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            weight: vec![0.0; out_channels * in_channels * KERNEL * KERNEL],
            bias: vec![0.0; out_channels],
            bn: BatchNorm::identity(out_channels),
        }
    }

    pub fn weight_at(&self, oc: usize, ic: usize, ky: usize, kx: usize) -> f64 {
        self.weight[((oc * self.in_channels + ic) * KERNEL + ky) * KERNEL + kx]
    }
}

/// Weights of the black-box classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    pub block1: ConvBlock,
    pub block2: ConvBlock,
    /// Flattened in (channel, y, x) order of the second pooled map.
    pub head_weight: Vec<f64>,
    pub head_bias: Vec<f64>,
}

/// Names of every stored tensor in checkpoint order.
pub const TENSOR_NAMES: [&str; 14] = [
    "conv1.weight",
    "conv1.bias",
    "bn1.gamma",
    "bn1.beta",
    "bn1.running_mean",
    "bn1.running_var",
    "conv2.weight",
    "conv2.bias",
    "bn2.gamma",
    "bn2.beta",
    "bn2.running_mean",
    "bn2.running_var",
    "head.weight",
    "head.bias",
];

/// Indices into [`TENSOR_NAMES`] of the tensors updated by the optimizer.
pub const TRAINABLE: [usize; 10] = [0, 1, 2, 3, 6, 7, 8, 9, 12, 13];

impl NetworkParams {
    /// All-zero weights and biases; batch-norm is the identity.
    pub fn zeros() -> Self {
        Self {
            block1: ConvBlock::zeros(1, CONV1_CHANNELS),
            block2: ConvBlock::zeros(CONV1_CHANNELS, CONV2_CHANNELS),
            head_weight: vec![0.0; HEAD_INPUTS],
            head_bias: vec![0.0],
        }
    }

    /// Uniform fan-in scaled init: every weight and bias drawn from
    /// U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros();
        let mut fill = |v: &mut [f64], fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            v.iter_mut().for_each(|x| *x = dist.sample(&mut rng));
        };
        fill(&mut p.block1.weight, KERNEL * KERNEL);
        fill(&mut p.block1.bias, KERNEL * KERNEL);
        fill(&mut p.block2.weight, CONV1_CHANNELS * KERNEL * KERNEL);
        fill(&mut p.block2.bias, CONV1_CHANNELS * KERNEL * KERNEL);
        fill(&mut p.head_weight, HEAD_INPUTS);
        fill(&mut p.head_bias, HEAD_INPUTS);
        p
    }

    pub fn tensors(&self) -> [&Vec<f64>; 14] {
        let (b1, b2) = (&self.block1, &self.block2);
        [
            &b1.weight,
            &b1.bias,
            &b1.bn.gamma,
            &b1.bn.beta,
            &b1.bn.running_mean,
            &b1.bn.running_var,
            &b2.weight,
            &b2.bias,
            &b2.bn.gamma,
            &b2.bn.beta,
            &b2.bn.running_mean,
            &b2.bn.running_var,
            &self.head_weight,
            &self.head_bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 14] {
        let (b1, b2) = (&mut self.block1, &mut self.block2);
        [
            &mut b1.weight,
            &mut b1.bias,
            &mut b1.bn.gamma,
            &mut b1.bn.beta,
            &mut b1.bn.running_mean,
            &mut b1.bn.running_var,
            &mut b2.weight,
            &mut b2.bias,
            &mut b2.bn.gamma,
            &mut b2.bn.beta,
            &mut b2.bn.running_mean,
            &mut b2.bn.running_var,
            &mut self.head_weight,
            &mut self.head_bias,
        ]
    }

    pub fn validate(&self) -> Result<(), BlackboxError> {
        for (name, t) in TENSOR_NAMES.iter().zip(self.tensors()) {
            if t.iter().any(|v| !v.is_finite()) {
                return Err(BlackboxError::InvalidParams(format!("{name} has a non-finite value")));
            }
        }
        for (name, var) in [
            ("bn1.running_var", &self.block1.bn.running_var),
            ("bn2.running_var", &self.block2.bn.running_var),
        ] {
            if var.iter().any(|&v| v <= 0.0) {
                return Err(BlackboxError::InvalidParams(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// Round every value to the nearest f32 so a checkpoint round trip is lossless.
    pub fn round_to_f32(&mut self) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v = f64::from(*v as f32));
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

// ── Kernels shared by inference, tracing and training ───────────────────

/// 3x3 convolution, stride 1, zero padding 1. Returns pre-activations.
pub(crate) fn conv3x3_forward(block: &ConvBlock, input: &FeatureMap) -> FeatureMap {
    debug_assert_eq!(input.channels, block.in_channels);
    let (h, w) = (input.height, input.width);
    let plane = h * w;
    let mut out = FeatureMap::zeros(block.out_channels, h, w);
    for oc in 0..block.out_channels {
        let dst = &mut out.data[oc * plane..(oc + 1) * plane];
        dst.iter_mut().for_each(|v| *v = block.bias[oc]);
        for ic in 0..block.in_channels {
            let src = &input.data[ic * plane..(ic + 1) * plane];
            for ky in 0..KERNEL {
                for kx in 0..KERNEL {
                    let wv = block.weight_at(oc, ic, ky, kx);
                    let (y0, y1) = valid_range(ky, h);
                    let (x0, x1) = valid_range(kx, w);
                    for y in y0..y1 {
                        let sy = y + ky - 1;
                        let d = &mut dst[y * w + x0..y * w + x1];
                        let s = &src[sy * w + x0 + kx - 1..sy * w + x1 + kx - 1];
                        for (dv, &sv) in d.iter_mut().zip(s) {
                            *dv += wv * sv;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Output rows/cols whose tap at kernel offset `k` lands inside the input.
#[inline]
pub(crate) fn valid_range(k: usize, n: usize) -> (usize, usize) {
    let lo = if k == 0 { 1 } else { 0 };
    let hi = if k == KERNEL - 1 { n - 1 } else { n };
    (lo, hi)
}

pub(crate) fn relu(map: &FeatureMap) -> FeatureMap {
    FeatureMap {
        data: map.data.iter().map(|&v| v.max(0.0)).collect(),
        ..*map
    }
}

pub(crate) fn batchnorm_inference(bn: &BatchNorm, input: &FeatureMap) -> FeatureMap {
    let plane = input.plane();
    let mut out = input.clone();
    for c in 0..input.channels {
        let (scale, shift) = bn.inference_affine(c);
        out.data[c * plane..(c + 1) * plane]
            .iter_mut()
            .for_each(|v| *v = scale * *v + shift);
    }
    out
}

/// 2x2 stride-2 max pooling. `argmax[i]` is the flat index in `input.data`
/// that produced output `i`; ties go to the first element in row-major order.
pub(crate) fn maxpool2(input: &FeatureMap) -> (FeatureMap, Vec<usize>) {
    let (oh, ow) = (input.height / 2, input.width / 2);
    let mut out = FeatureMap::zeros(input.channels, oh, ow);
    let mut argmax = vec![0; out.data.len()];
    for c in 0..input.channels {
        for y in 0..oh {
            for x in 0..ow {
                let mut best = usize::MAX;
                let mut best_v = f64::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let i = (c * input.height + 2 * y + dy) * input.width + 2 * x + dx;
                        if best == usize::MAX || input.data[i] > best_v {
                            best = i;
                            best_v = input.data[i];
                        }
                    }
                }
                let o = (c * oh + y) * ow + x;
                out.data[o] = best_v;
                argmax[o] = best;
            }
        }
    }
    (out, argmax)
}

pub(crate) fn linear_logit(params: &NetworkParams, input: &[f64]) -> f64 {
    params.head_bias[0] + params.head_weight.iter().zip(input).map(|(w, x)| w * x).sum::<f64>()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

// ── Inference trace ─────────────────────────────────────────────────────

/// One recorded layer of an inference-mode forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerTrace {
    /// Convolution with its ReLU folded in.
    Conv {
        block: usize,
        input: FeatureMap,
        pre_activation: FeatureMap,
        output: FeatureMap,
    },
    BatchNorm {
        block: usize,
        input: FeatureMap,
        output: FeatureMap,
    },
    MaxPool {
        block: usize,
        input: FeatureMap,
        output: FeatureMap,
        argmax: Vec<usize>,
    },
    Linear {
        input: Vec<f64>,
        logit: f64,
    },
}

/// Everything relevance propagation needs from one forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationTrace {
    pub layers: Vec<LayerTrace>,
}

impl ActivationTrace {
    pub fn logit(&self) -> f64 {
        match self.layers.last() {
            Some(LayerTrace::Linear { logit, .. }) => *logit,
            _ => f64::NAN,
        }
    }
}

fn check_finite(map: &[f64], layer: &'static str) -> Result<(), BlackboxError> {
    if map.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(BlackboxError::NonFiniteActivation(layer))
    }
}

pub fn forward_trace(params: &NetworkParams, pixels: &[f64]) -> Result<ActivationTrace, BlackboxError> {
    let mut layers = Vec::with_capacity(7);
    let mut x = FeatureMap::from_image(pixels);
    for (b, block) in [&params.block1, &params.block2].into_iter().enumerate() {
        let pre = conv3x3_forward(block, &x);
        let act = relu(&pre);
        check_finite(&act.data, "conv")?;
        layers.push(LayerTrace::Conv {
            block: b + 1,
            input: x,
            pre_activation: pre,
            output: act.clone(),
        });
        let normed = batchnorm_inference(&block.bn, &act);
        check_finite(&normed.data, "batchnorm")?;
        layers.push(LayerTrace::BatchNorm {
            block: b + 1,
            input: act,
            output: normed.clone(),
        });
        let (pooled, argmax) = maxpool2(&normed);
        layers.push(LayerTrace::MaxPool {
            block: b + 1,
            input: normed,
            output: pooled.clone(),
            argmax,
        });
        x = pooled;
    }
    let logit = linear_logit(params, &x.data);
    if !logit.is_finite() {
        return Err(BlackboxError::NonFiniteActivation("linear"));
    }
    layers.push(LayerTrace::Linear { input: x.data, logit });
    Ok(ActivationTrace { layers })
}

/// Inference-mode logit without keeping intermediate activations.
pub fn forward_logit(params: &NetworkParams, pixels: &[f64]) -> Result<f64, BlackboxError> {
    let mut x = FeatureMap::from_image(pixels);
    for block in [&params.block1, &params.block2] {
        let act = relu(&conv3x3_forward(block, &x));
        x = maxpool2(&batchnorm_inference(&block.bn, &act)).0;
    }
    check_finite(&x.data, "maxpool")?;
    let logit = linear_logit(params, &x.data);
    if logit.is_finite() {
        Ok(logit)
    } else {
        Err(BlackboxError::NonFiniteActivation("linear"))
    }
}
