//! Deep Taylor decomposition over a recorded forward pass.
//!
//! Relevance starts at the head as `|logit|` and flows back layer by layer:
//! z+ through the head and the second convolution, winner-take-all through
//! max pooling, unchanged through batch norm, and the bounded z^B rule into
//! the pixels.

use serde::{Deserialize, Serialize};

use super::ExplainError;
use crate::blackbox::{ActivationTrace, ConvBlock, LayerTrace, NetworkParams, KERNEL};
use crate::dataset::IMAGE_PIXELS;

/// Additive denominator stabilizer, applied with the denominator's sign.
pub const EPSILON: f64 = 1e-9;

/// Pixel bounds for the input-layer z^B rule.
pub const PIXEL_LOW: f64 = 0.0;
pub const PIXEL_HIGH: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    /// Row-major 28x28 relevance, all entries non-negative.
    pub relevance: Vec<f64>,
    pub root_relevance: f64,
    /// Set when the logit was exactly zero and there was nothing to explain.
    #[serde(default)]
    pub zero_root: bool,
}

impl SaliencyMap {
    pub fn zero_root() -> Self {
        Self {
            relevance: vec![0.0; IMAGE_PIXELS],
            root_relevance: 0.0,
            zero_root: true,
        }
    }

    pub fn total(&self) -> f64 {
        self.relevance.iter().sum()
    }

    /// `|sum - root| / root`; zero for the flagged zero-root map.
    pub fn conservation_error(&self) -> f64 {
        if self.root_relevance == 0.0 {
            return 0.0;
        }
        (self.total() - self.root_relevance).abs() / self.root_relevance
    }
}

fn stabilize(denominator: f64) -> Option<f64> {
    if denominator == 0.0 {
        None
    } else {
        Some(denominator + EPSILON.copysign(denominator))
    }
}

/// z+ contribution `x+ * w+`. Inputs after batch norm can be negative; those
/// route nothing, like negative weights.
#[inline]
pub fn zplus(x: f64, w: f64) -> f64 {
    x.max(0.0) * w.max(0.0)
}

/// z^B contribution for an input bounded in `[low, high]`.
#[inline]
pub fn zbounded(x: f64, w: f64, low: f64, high: f64) -> f64 {
    x * w - low * w.max(0.0) - high * w.min(0.0)
}

/// Redistribute `out_relevance` over the inputs of a dense layer.
/// `weights` is row-major `[outputs][inputs]`.
pub fn dense_rule(
    inputs: &[f64],
    weights: &[f64],
    out_relevance: &[f64],
    contrib: impl Fn(f64, f64) -> f64,
) -> Vec<f64> {
    let n_in = inputs.len();
    debug_assert_eq!(weights.len(), n_in * out_relevance.len());
    let mut r_in = vec![0.0; n_in];
    for (row, &r) in weights.chunks_exact(n_in).zip(out_relevance) {
        if r == 0.0 {
            continue;
        }
        let denom: f64 = inputs.iter().zip(row).map(|(&x, &w)| contrib(x, w)).sum();
        let Some(denom) = stabilize(denom) else { continue };
        let s = r / denom;
        for ((ri, &x), &w) in r_in.iter_mut().zip(inputs).zip(row) {
            *ri += contrib(x, w) * s;
        }
    }
    r_in
}

pub fn zplus_dense(inputs: &[f64], weights: &[f64], out_relevance: &[f64]) -> Vec<f64> {
    dense_rule(inputs, weights, out_relevance, zplus)
}

pub fn zb_dense(inputs: &[f64], weights: &[f64], out_relevance: &[f64], low: f64, high: f64) -> Vec<f64> {
    dense_rule(inputs, weights, out_relevance, |x, w| zbounded(x, w, low, high))
}

/// Same as [`dense_rule`] for a padded 3x3 convolution. Padded taps contribute nothing.
fn conv_rule(
    block: &ConvBlock,
    input: &[f64],
    side: usize,
    out_relevance: &[f64],
    contrib: impl Fn(f64, f64) -> f64,
) -> Vec<f64> {
    let plane = side * side;
    let mut r_in = vec![0.0; input.len()];
    let taps = |y: usize, x: usize| {
        (0..KERNEL)
            .flat_map(move |ky| (0..KERNEL).map(move |kx| (ky, kx)))
            .filter_map(move |(ky, kx)| {
                let sy = (y + ky).checked_sub(1).filter(|&v| v < side)?;
                let sx = (x + kx).checked_sub(1).filter(|&v| v < side)?;
                Some((ky, kx, sy * side + sx))
            })
    };
    for oc in 0..block.out_channels {
        for y in 0..side {
            for x in 0..side {
                let r = out_relevance[oc * plane + y * side + x];
                if r == 0.0 {
                    continue;
                }
                let mut denom = 0.0;
                for ic in 0..block.in_channels {
                    for (ky, kx, at) in taps(y, x) {
                        denom += contrib(input[ic * plane + at], block.weight_at(oc, ic, ky, kx));
                    }
                }
                let Some(denom) = stabilize(denom) else { continue };
                let s = r / denom;
                for ic in 0..block.in_channels {
                    for (ky, kx, at) in taps(y, x) {
                        let i = ic * plane + at;
                        r_in[i] += contrib(input[i], block.weight_at(oc, ic, ky, kx)) * s;
                    }
                }
            }
        }
    }
    r_in
}

fn malformed(what: &str) -> ExplainError {
    ExplainError::MalformedTrace(what.to_string())
}

/// Pixel relevance for the predicted label of the traced image.
///
/// A negative logit is explained as evidence for label 0 by negating the head
/// weights, so the root is always `|logit|`.
pub fn deep_taylor(params: &NetworkParams, trace: &ActivationTrace) -> Result<SaliencyMap, ExplainError> {
    if trace.layers.len() != 7 {
        return Err(malformed("expected 7 layers"));
    }
    let (head_input, logit) = match trace.layers.last() {
        Some(LayerTrace::Linear { input, logit }) => (input, *logit),
        _ => return Err(malformed("last layer is not linear")),
    };
    if !logit.is_finite() {
        return Err(malformed("non-finite logit"));
    }
    if logit == 0.0 {
        return Err(ExplainError::ZeroRootRelevance);
    }
    let root = logit.abs();
    let sign = logit.signum();
    let head: Vec<f64> = params.head_weight.iter().map(|w| sign * w).collect();
    let mut r = zplus_dense(head_input, &head, &[root]);

    for layer in trace.layers[..6].iter().rev() {
        r = match layer {
            LayerTrace::MaxPool { input, argmax, .. } => {
                let mut up = vec![0.0; input.data.len()];
                for (&i, &ro) in argmax.iter().zip(&r) {
                    up[i] += ro;
                }
                up
            }
            LayerTrace::BatchNorm { .. } => r,
            LayerTrace::Conv { block: 1, input, .. } => {
                conv_rule(&params.block1, &input.data, input.width, &r, |x, w| {
                    zbounded(x, w, PIXEL_LOW, PIXEL_HIGH)
                })
            }
            LayerTrace::Conv { block: 2, input, .. } => conv_rule(&params.block2, &input.data, input.width, &r, zplus),
            _ => return Err(malformed("unexpected layer order")),
        };
    }
    if r.len() != IMAGE_PIXELS {
        return Err(malformed("input relevance has wrong size"));
    }
    Ok(SaliencyMap {
        relevance: r,
        root_relevance: root,
        zero_root: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blackbox::forward_trace;

    #[test]
    fn hand_worked_linear_zplus() {
        let r = zplus_dense(&[1.0, 0.0], &[2.0, 3.0], &[2.0]);
        assert!((r[0] - 2.0 * 2.0 / (2.0 + EPSILON)).abs() < 1e-15);
        assert_eq!(r[1], 0.0);
    }

    #[test]
    fn zplus_ignores_negative_weights_and_inputs() {
        // contributions: 1*2=2, 1*(-5) dropped, 0.5*4=2, (-1)*(-3) dropped
        let r = zplus_dense(&[1.0, 1.0, 0.5, -1.0], &[2.0, -5.0, 4.0, -3.0], &[1.0]);
        assert!((r[0] - 0.5).abs() < 1e-9);
        assert_eq!(r[1], 0.0);
        assert!((r[2] - 0.5).abs() < 1e-9);
        assert_eq!(r[3], 0.0);
    }

    #[test]
    fn zb_routes_negative_weights_through_upper_bound() {
        // x=0, w=-1: x*w - h*w = 1; x=1, w=1: 1.
        let r = zb_dense(&[0.0, 1.0], &[-1.0, 1.0], &[4.0], 0.0, 1.0);
        assert!((r[0] - 2.0).abs() < 1e-8);
        assert!((r[1] - 2.0).abs() < 1e-8);
        for x in [0.0, 0.3, 1.0] {
            for w in [-2.0, 0.0, 1.5] {
                assert!(zbounded(x, w, 0.0, 1.0) >= 0.0);
            }
        }
    }

    #[test]
    fn zero_denominator_distributes_nothing() {
        let r = zplus_dense(&[0.0, 0.0], &[1.0, 1.0], &[3.0]);
        assert_eq!(r, vec![0.0, 0.0]);
    }

    #[test]
    fn zero_logit_is_flagged() {
        let params = NetworkParams::zeros();
        let trace = forward_trace(&params, &vec![0.0; IMAGE_PIXELS]).unwrap();
        assert!(matches!(
            deep_taylor(&params, &trace),
            Err(ExplainError::ZeroRootRelevance)
        ));
        let z = SaliencyMap::zero_root();
        assert!(z.relevance.iter().all(|&v| v == 0.0));
        assert_eq!(z.conservation_error(), 0.0);
    }

    #[test]
    fn random_network_conserves_and_stays_non_negative() {
        let params = NetworkParams::init(4);
        let pixels: Vec<f64> = (0..IMAGE_PIXELS).map(|i| ((i * 37) % 101) as f64 / 100.0).collect();
        let trace = forward_trace(&params, &pixels).unwrap();
        let map = deep_taylor(&params, &trace).unwrap();
        assert!(map.relevance.iter().all(|&v| v >= 0.0));
        assert!((map.root_relevance - trace.logit().abs()).abs() < 1e-15);
        assert!(map.conservation_error() <= 1e-3, "{}", map.conservation_error());
    }

    #[test]
    fn truncated_trace_is_rejected() {
        let params = NetworkParams::init(1);
        let mut trace = forward_trace(&params, &vec![0.5; IMAGE_PIXELS]).unwrap();
        trace.layers.remove(2);
        assert!(matches!(
            deep_taylor(&params, &trace),
            Err(ExplainError::MalformedTrace(_))
        ));
    }
}
