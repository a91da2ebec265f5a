//! Mini-batch Adam training with binary cross-entropy on the logit.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::{
    conv3x3_forward, linear_logit, maxpool2, relu, sigmoid, valid_range, ConvBlock, FeatureMap, NetworkParams, BN_EPS,
    BN_MOMENTUM, KERNEL, TENSOR_NAMES, TRAINABLE,
};
use super::BlackboxError;
use crate::dataset::{Label, LabeledDataset};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_betas: (f64, f64),
    pub adam_epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// Desk-scale configuration.
    fn default() -> Self {
        Self {
            epochs: 15,
            batch_size: 64,
            learning_rate: 1e-3,
            adam_betas: (0.9, 0.999),
            adam_epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// The 300-epoch schedule of the reference experiment.
    pub fn reference() -> Self {
        Self {
            epochs: 300,
            ..Self::default()
        }
    }
}

/// Gradients aligned with [`TENSOR_NAMES`]; running-stat slots stay empty.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Vec<f64>>,
}

impl Gradients {
    fn zeros_like(params: &NetworkParams) -> Self {
        let all = params.tensors();
        let mut tensors: Vec<Vec<f64>> = vec![Vec::new(); all.len()];
        for &i in &TRAINABLE {
            tensors[i] = vec![0.0; all[i].len()];
        }
        Self { tensors }
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        TENSOR_NAMES
            .iter()
            .position(|n| *n == name)
            .map(|i| self.tensors[i].as_slice())
    }
}

/// Per-channel batch statistics used by one training-mode batch-norm layer.
struct BnBatch {
    mean: Vec<f64>,
    var: Vec<f64>,
    inv_std: Vec<f64>,
    count: usize,
}

fn bn_batch_stats(inputs: &[FeatureMap]) -> BnBatch {
    let c = inputs[0].channels;
    let plane = inputs[0].plane();
    let count = plane * inputs.len();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let s: f64 = inputs
            .iter()
            .map(|m| m.data[ch * plane..(ch + 1) * plane].iter().sum::<f64>())
            .sum();
        let mu = s / count as f64;
        let ss: f64 = inputs
            .iter()
            .map(|m| {
                m.data[ch * plane..(ch + 1) * plane]
                    .iter()
                    .map(|v| (v - mu) * (v - mu))
                    .sum::<f64>()
            })
            .sum();
        mean[ch] = mu;
        var[ch] = ss / count as f64;
    }
    let inv_std = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    BnBatch {
        mean,
        var,
        inv_std,
        count,
    }
}

fn bn_normalize(input: &FeatureMap, stats: &BnBatch) -> FeatureMap {
    let plane = input.plane();
    let mut xhat = input.clone();
    for ch in 0..input.channels {
        let (mu, is) = (stats.mean[ch], stats.inv_std[ch]);
        xhat.data[ch * plane..(ch + 1) * plane]
            .iter_mut()
            .for_each(|v| *v = (*v - mu) * is);
    }
    xhat
}

fn bn_affine(xhat: &FeatureMap, block: &ConvBlock) -> FeatureMap {
    let plane = xhat.plane();
    let mut y = xhat.clone();
    for ch in 0..xhat.channels {
        let (g, b) = (block.bn.gamma[ch], block.bn.beta[ch]);
        y.data[ch * plane..(ch + 1) * plane]
            .iter_mut()
            .for_each(|v| *v = g * *v + b);
    }
    y
}

struct BlockCache {
    input: FeatureMap,
    pre: FeatureMap,
    xhat: FeatureMap,
    argmax: Vec<usize>,
    normed_shape: (usize, usize, usize),
}

struct BatchForward {
    blocks: [Vec<BlockCache>; 2],
    stats: [BnBatch; 2],
    head_inputs: Vec<Vec<f64>>,
    logits: Vec<f64>,
}

fn forward_train(params: &NetworkParams, images: &[&[f64]]) -> BatchForward {
    let mut current: Vec<FeatureMap> = images.iter().map(|p| FeatureMap::from_image(p)).collect();
    let mut caches: [Vec<BlockCache>; 2] = [Vec::new(), Vec::new()];
    let mut stats = Vec::with_capacity(2);
    for (b, block) in [&params.block1, &params.block2].into_iter().enumerate() {
        let pres: Vec<FeatureMap> = current.iter().map(|x| conv3x3_forward(block, x)).collect();
        let acts: Vec<FeatureMap> = pres.iter().map(relu).collect();
        let st = bn_batch_stats(&acts);
        let mut next = Vec::with_capacity(current.len());
        for ((input, pre), act) in current.into_iter().zip(pres).zip(&acts) {
            let xhat = bn_normalize(act, &st);
            let normed = bn_affine(&xhat, block);
            let (pooled, argmax) = maxpool2(&normed);
            caches[b].push(BlockCache {
                input,
                pre,
                xhat,
                argmax,
                normed_shape: (normed.channels, normed.height, normed.width),
            });
            next.push(pooled);
        }
        stats.push(st);
        current = next;
    }
    let logits = current.iter().map(|x| linear_logit(params, &x.data)).collect();
    let head_inputs = current.into_iter().map(|x| x.data).collect();
    let mut stats = stats.into_iter();
    BatchForward {
        blocks: caches,
        stats: [stats.next().unwrap(), stats.next().unwrap()],
        head_inputs,
        logits,
    }
}

/// Mean binary cross-entropy computed from logits.
fn bce_with_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

/// Training-mode (batch statistics) mean BCE loss of one batch.
pub fn batch_loss(params: &NetworkParams, images: &[&[f64]], targets: &[f64]) -> f64 {
    let fwd = forward_train(params, images);
    fwd.logits
        .iter()
        .zip(targets)
        .map(|(&z, &y)| bce_with_logit(z, y))
        .sum::<f64>()
        / images.len() as f64
}

#[allow(clippy::needless_range_loop)]
fn conv3x3_backward(
    block: &ConvBlock,
    input: &FeatureMap,
    grad_out: &FeatureMap,
    grad_w: &mut [f64],
    grad_b: &mut [f64],
    mut grad_in: Option<&mut FeatureMap>,
) {
    let (h, w) = (input.height, input.width);
    let plane = h * w;
    for oc in 0..block.out_channels {
        let g = &grad_out.data[oc * plane..(oc + 1) * plane];
        grad_b[oc] += g.iter().sum::<f64>();
        for ic in 0..block.in_channels {
            let src = &input.data[ic * plane..(ic + 1) * plane];
            for ky in 0..KERNEL {
                for kx in 0..KERNEL {
                    let wi = ((oc * block.in_channels + ic) * KERNEL + ky) * KERNEL + kx;
                    let wv = block.weight[wi];
                    let (y0, y1) = valid_range(ky, h);
                    let (x0, x1) = valid_range(kx, w);
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let sy = y + ky - 1;
                        let gr = &g[y * w + x0..y * w + x1];
                        let so = sy * w + x0 + kx - 1;
                        let s = &src[so..so + (x1 - x0)];
                        acc += gr.iter().zip(s).map(|(a, b)| a * b).sum::<f64>();
                        if let Some(gi) = grad_in.as_deref_mut() {
                            let d = &mut gi.data[ic * plane + so..ic * plane + so + (x1 - x0)];
                            for (dv, &gv) in d.iter_mut().zip(gr) {
                                *dv += gv * wv;
                            }
                        }
                    }
                    grad_w[wi] += acc;
                }
            }
        }
    }
}

/// Loss and analytic gradients of the training-mode forward pass.
pub fn batch_loss_and_gradients(params: &NetworkParams, images: &[&[f64]], targets: &[f64]) -> (f64, Gradients) {
    let (loss, grads, _) = loss_grads_stats(params, images, targets);
    (loss, grads)
}

fn loss_grads_stats(params: &NetworkParams, images: &[&[f64]], targets: &[f64]) -> (f64, Gradients, [BnBatch; 2]) {
    let n = images.len();
    let fwd = forward_train(params, images);
    let mut grads = Gradients::zeros_like(params);
    let loss = fwd
        .logits
        .iter()
        .zip(targets)
        .map(|(&z, &y)| bce_with_logit(z, y))
        .sum::<f64>()
        / n as f64;

    // Head.
    let mut upstream: Vec<FeatureMap> = Vec::with_capacity(n);
    for ((&z, &y), x) in fwd.logits.iter().zip(targets).zip(&fwd.head_inputs) {
        let dz = (sigmoid(z) - y) / n as f64;
        grads.tensors[13][0] += dz;
        for (g, &xi) in grads.tensors[12].iter_mut().zip(x) {
            *g += dz * xi;
        }
        let (c, h, w) = fwd.blocks[1][0].normed_shape;
        let mut d = FeatureMap::zeros(c, h / 2, w / 2);
        for (dv, &wv) in d.data.iter_mut().zip(&params.head_weight) {
            *dv = dz * wv;
        }
        upstream.push(d);
    }

    // Blocks in reverse. Gradient slots: conv.weight, conv.bias, bn.gamma, bn.beta.
    for b in (0..2).rev() {
        let block = if b == 0 { &params.block1 } else { &params.block2 };
        let slots = if b == 0 { [0, 1, 2, 3] } else { [6, 7, 8, 9] };
        let caches = &fwd.blocks[b];
        let st = &fwd.stats[b];
        let (c, h, w) = caches[0].normed_shape;
        let plane = h * w;

        // Unpool into d(normed).
        let d_normed: Vec<FeatureMap> = caches
            .iter()
            .zip(&upstream)
            .map(|(cache, up)| {
                let mut d = FeatureMap::zeros(c, h, w);
                for (&src, &g) in cache.argmax.iter().zip(&up.data) {
                    d.data[src] += g;
                }
                d
            })
            .collect();

        // Batch-norm: gamma/beta grads and the reductions for d(input).
        let mut sum_dy = vec![0.0; c];
        let mut sum_dy_xhat = vec![0.0; c];
        for (cache, dy) in caches.iter().zip(&d_normed) {
            for ch in 0..c {
                let r = ch * plane..(ch + 1) * plane;
                sum_dy[ch] += dy.data[r.clone()].iter().sum::<f64>();
                sum_dy_xhat[ch] += dy.data[r.clone()]
                    .iter()
                    .zip(&cache.xhat.data[r])
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
            }
        }
        for ch in 0..c {
            grads.tensors[slots[2]][ch] += sum_dy_xhat[ch];
            grads.tensors[slots[3]][ch] += sum_dy[ch];
        }

        let count = st.count as f64;
        let mut next_upstream = Vec::with_capacity(n);
        for (cache, dy) in caches.iter().zip(&d_normed) {
            // d(relu output) then through ReLU to d(pre-activation).
            let mut d_pre = FeatureMap::zeros(c, h, w);
            for ch in 0..c {
                // dx = gamma * inv_std / N * (N dy - sum(dy) - xhat * sum(dy xhat))
                let k = block.bn.gamma[ch] * st.inv_std[ch] / count;
                for i in ch * plane..(ch + 1) * plane {
                    let d_act = k * (count * dy.data[i] - sum_dy[ch] - cache.xhat.data[i] * sum_dy_xhat[ch]);
                    d_pre.data[i] = if cache.pre.data[i] > 0.0 { d_act } else { 0.0 };
                }
            }
            let mut d_in =
                (b == 1).then(|| FeatureMap::zeros(cache.input.channels, cache.input.height, cache.input.width));
            let (gw, rest) = grads.tensors.split_at_mut(slots[1]);
            conv3x3_backward(
                block,
                &cache.input,
                &d_pre,
                &mut gw[slots[0]],
                &mut rest[0],
                d_in.as_mut(),
            );
            if let Some(d) = d_in {
                next_upstream.push(d);
            }
        }
        upstream = next_upstream;
    }

    let stats = fwd.stats;
    (loss, grads, stats)
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: i32,
}

impl Adam {
    fn new(params: &NetworkParams) -> Self {
        let zeros: Vec<Vec<f64>> = TRAINABLE
            .iter()
            .map(|&i| vec![0.0; params.tensors()[i].len()])
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    fn update(&mut self, params: &mut NetworkParams, grads: &Gradients, cfg: &TrainConfig) {
        self.step += 1;
        let (b1, b2) = cfg.adam_betas;
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        let tensors = params.tensors_mut();
        for (k, &i) in TRAINABLE.iter().enumerate() {
            let g = &grads.tensors[i];
            for (j, p) in tensors[i].iter_mut().enumerate() {
                let m = &mut self.m[k][j];
                let v = &mut self.v[k][j];
                *m = b1 * *m + (1.0 - b1) * g[j];
                *v = b2 * *v + (1.0 - b2) * g[j] * g[j];
                *p -= cfg.learning_rate * (*m / c1) / ((*v / c2).sqrt() + cfg.adam_epsilon);
            }
        }
    }
}

fn update_running_stats(params: &mut NetworkParams, stats: &[BnBatch; 2]) {
    for (block, st) in [&mut params.block1, &mut params.block2].into_iter().zip(stats) {
        let unbiased = st.count as f64 / (st.count as f64 - 1.0).max(1.0);
        for ch in 0..block.out_channels {
            let rm = &mut block.bn.running_mean[ch];
            *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * st.mean[ch];
            let rv = &mut block.bn.running_var[ch];
            *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * st.var[ch] * unbiased;
        }
    }
}

pub fn train(train_set: &LabeledDataset, config: &TrainConfig) -> Result<NetworkParams, BlackboxError> {
    train_with_history(train_set, config).map(|(params, _)| params)
}

/// Train and also return the mean loss of every epoch.
///
/// The returned parameters are rounded to f32 precision, which is what the
/// checkpoint format stores.
pub fn train_with_history(
    train_set: &LabeledDataset,
    config: &TrainConfig,
) -> Result<(NetworkParams, Vec<f64>), BlackboxError> {
    if train_set.is_empty() {
        return Err(BlackboxError::EmptyTrainSet);
    }
    if Label::ALL.iter().any(|&l| train_set.count_of(l) == 0) {
        return Err(BlackboxError::SingleClassTrainSet);
    }
    let batch_size = config.batch_size.max(1);

    let mut params = NetworkParams::init(config.seed);
    let mut adam = Adam::new(&params);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(1);

    let instances = train_set.instances();
    let mut order: Vec<usize> = (0..instances.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        for chunk in order.chunks(batch_size) {
            let images: Vec<&[f64]> = chunk.iter().map(|&i| instances[i].pixels.as_slice()).collect();
            let targets: Vec<f64> = chunk.iter().map(|&i| f64::from(instances[i].label().as_u8())).collect();
            let (loss, grads, stats) = loss_grads_stats(&params, &images, &targets);
            if !loss.is_finite() {
                return Err(BlackboxError::DivergedLoss { epoch });
            }
            total += loss * chunk.len() as f64;
            adam.update(&mut params, &grads, config);
            update_running_stats(&mut params, &stats);
        }
        history.push(total / instances.len() as f64);
    }
    params.round_to_f32();
    params.validate()?;
    Ok((params, history))
}

/// Fingerprint of every ReLU on/off state and max-pool winner of a
/// training-mode forward pass. Two parameter settings with the same pattern
/// lie in the same smooth piece of the loss surface.
pub fn activation_pattern(params: &NetworkParams, images: &[&[f64]]) -> u64 {
    use std::hash::{Hash, Hasher};
    let fwd = forward_train(params, images);
    let mut h = std::collections::hash_map::DefaultHasher::new();
    for caches in &fwd.blocks {
        for cache in caches {
            cache.argmax.hash(&mut h);
            for chunk in cache.pre.data.chunks(64) {
                let bits = chunk
                    .iter()
                    .enumerate()
                    .fold(0u64, |acc, (i, &v)| acc | (u64::from(v > 0.0) << i));
                bits.hash(&mut h);
            }
        }
    }
    h.finish()
}
