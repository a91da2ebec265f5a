//! Greedy weighted prototype selection under a Gaussian kernel.
//!
//! Maximizes `g(w) = w.mu - 0.5 w'Kw` over `w >= 0` supported on at most `m`
//! candidates, where `mu_i` is the mean kernel similarity of candidate `i` to
//! the targets and `K` is the candidate Gram matrix.

use serde::{Deserialize, Serialize};

use super::ExplainError;
use crate::dataset::{InstanceId, LabeledDataset};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    Fixed(f64),
    /// Median pairwise Euclidean distance between candidates.
    MedianHeuristic,
}

/// Projected-gradient settings for the weight fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub max_steps: usize,
    /// Stop once the update norm falls below this.
    pub tolerance: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_steps: 500,
            tolerance: 1e-8,
        }
    }
}

/// Squared Euclidean distance, with independent partial sums so the loop vectorizes.
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    for (xa, xb) in ca.zip(cb) {
        for k in 0..8 {
            let d = xa[k] - xb[k];
            acc[k] += d * d;
        }
    }
    acc.iter().sum::<f64>() + tail
}

/// Median of all pairwise distances; `None` with fewer than two points.
pub fn median_pairwise_distance(points: &[&[f64]]) -> Option<f64> {
    let n = points.len();
    if n < 2 {
        return None;
    }
    let mut d = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            d.push(squared_distance(points[i], points[j]));
        }
    }
    let mid = d.len() / 2;
    let hi = *d.select_nth_unstable_by(mid, f64::total_cmp).1;
    if d.len() % 2 == 1 {
        return Some(hi.sqrt());
    }
    let lo = d[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Some(0.5 * (lo.sqrt() + hi.sqrt()))
}

/// Resolve a bandwidth. Returns `(sigma, fell_back)`; a zero median falls back to 1.
pub fn resolve_bandwidth(bandwidth: Bandwidth, candidates: &[&[f64]]) -> Result<(f64, bool), ExplainError> {
    match bandwidth {
        Bandwidth::Fixed(s) if s.is_finite() && s > 0.0 => Ok((s, false)),
        Bandwidth::Fixed(s) => Err(ExplainError::InvalidBandwidth(s)),
        Bandwidth::MedianHeuristic => match median_pairwise_distance(candidates) {
            Some(s) if s > 0.0 => Ok((s, false)),
            _ => Ok((1.0, true)),
        },
    }
}

fn same_points(a: &[&[f64]], b: &[&[f64]]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| std::ptr::eq(*x, *y))
}

/// Kernel objective for one target/candidate configuration. Kernel entries are
/// evaluated on demand, so memory stays linear in the number of candidates.
#[derive(Debug, Clone)]
pub struct KernelProblem<'a> {
    candidates: Vec<&'a [f64]>,
    inv_two_sigma_sq: f64,
    /// Mean kernel similarity of each candidate to the targets.
    pub mu: Vec<f64>,
}

impl<'a> KernelProblem<'a> {
    pub fn new(targets: &[&[f64]], candidates: &[&'a [f64]], sigma: f64) -> Self {
        let inv_two_sigma_sq = 1.0 / (2.0 * sigma * sigma);
        let k = |a: &[f64], b: &[f64]| (-squared_distance(a, b) * inv_two_sigma_sq).exp();
        let mu = if same_points(targets, candidates) {
            // Symmetric: each pair once.
            let n = candidates.len();
            let mut sums = vec![1.0; n];
            for i in 0..n {
                for j in i + 1..n {
                    let v = k(candidates[i], candidates[j]);
                    sums[i] += v;
                    sums[j] += v;
                }
            }
            sums.into_iter().map(|s| s / n as f64).collect()
        } else {
            candidates
                .iter()
                .map(|c| targets.iter().map(|t| k(c, t)).sum::<f64>() / targets.len() as f64)
                .collect()
        };
        Self {
            candidates: candidates.to_vec(),
            inv_two_sigma_sq,
            mu,
        }
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn k(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return 1.0;
        }
        (-squared_distance(self.candidates[i], self.candidates[j]) * self.inv_two_sigma_sq).exp()
    }

    /// Row-major Gram matrix restricted to `subset`.
    pub fn sub_gram(&self, subset: &[usize]) -> Vec<f64> {
        let s = subset.len();
        let mut g = vec![0.0; s * s];
        for a in 0..s {
            for b in a..s {
                let v = self.k(subset[a], subset[b]);
                g[a * s + b] = v;
                g[b * s + a] = v;
            }
        }
        g
    }

    /// `g(w)` for weights on `subset`.
    pub fn objective(&self, subset: &[usize], w: &[f64]) -> f64 {
        objective_with(&self.sub_gram(subset), subset.iter().map(|&i| self.mu[i]), w)
    }

    /// `mu_i - (K w)_i` for every candidate.
    pub fn gradient(&self, subset: &[usize], w: &[f64]) -> Vec<f64> {
        (0..self.len())
            .map(|i| self.mu[i] - subset.iter().zip(w).map(|(&j, &wj)| self.k(i, j) * wj).sum::<f64>())
            .collect()
    }

    /// Projected gradient ascent on `subset`, starting from `init`. The step is
    /// `1/L` with `L` the largest absolute row sum of the sub-Gram matrix.
    pub fn fit_weights(&self, subset: &[usize], init: &[f64], config: FitConfig) -> Vec<f64> {
        let s = subset.len();
        let g = self.sub_gram(subset);
        let mu: Vec<f64> = subset.iter().map(|&i| self.mu[i]).collect();
        let lipschitz = g
            .chunks_exact(s.max(1))
            .map(|row| row.iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max);
        if lipschitz == 0.0 {
            return vec![0.0; s];
        }
        let step = 1.0 / lipschitz;
        let mut w = init.to_vec();
        for _ in 0..config.max_steps {
            let mut delta_sq = 0.0;
            let next: Vec<f64> = (0..s)
                .map(|a| {
                    let kw: f64 = g[a * s..(a + 1) * s].iter().zip(&w).map(|(k, wb)| k * wb).sum();
                    let v = (w[a] + step * (mu[a] - kw)).max(0.0);
                    delta_sq += (v - w[a]) * (v - w[a]);
                    v
                })
                .collect();
            w = next;
            if delta_sq.sqrt() < config.tolerance {
                break;
            }
        }
        w
    }
}

fn objective_with(gram: &[f64], mu: impl Iterator<Item = f64>, w: &[f64]) -> f64 {
    let s = w.len();
    let linear: f64 = mu.zip(w).map(|(m, x)| m * x).sum();
    let mut quad = 0.0;
    for a in 0..s {
        for b in 0..s {
            quad += w[a] * w[b] * gram[a * s + b];
        }
    }
    linear - 0.5 * quad
}

/// Result of a greedy run over anonymous points.
#[derive(Debug, Clone, PartialEq)]
pub struct GreedyFit {
    /// Candidate indices in selection order.
    pub chosen: Vec<usize>,
    pub weights: Vec<f64>,
    pub sigma: f64,
    pub bandwidth_fallback: bool,
    /// Objective after each greedy step.
    pub objective_trace: Vec<f64>,
}

impl GreedyFit {
    pub fn objective(&self) -> f64 {
        self.objective_trace.last().copied().unwrap_or(0.0)
    }
}

/// Greedy selection: at each step add the unchosen candidate with the largest
/// gradient (lowest index on ties), then refit all weights from a warm start.
pub fn greedy_select(problem: &KernelProblem<'_>, m: usize, config: FitConfig) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let mut chosen: Vec<usize> = Vec::with_capacity(m);
    let mut w: Vec<f64> = Vec::with_capacity(m);
    let mut trace = Vec::with_capacity(m);
    for _ in 0..m {
        let grad = problem.gradient(&chosen, &w);
        let next = (0..problem.len())
            .filter(|i| !chosen.contains(i))
            .fold(None, |best: Option<usize>, i| match best {
                Some(b) if grad[b] >= grad[i] => Some(b),
                _ => Some(i),
            });
        let Some(next) = next else { break };
        chosen.push(next);
        w.push(0.0);
        w = problem.fit_weights(&chosen, &w, config);
        trace.push(problem.objective(&chosen, &w));
    }
    (chosen, w, trace)
}

pub fn protodash_points(
    targets: &[&[f64]],
    candidates: &[&[f64]],
    m: usize,
    bandwidth: Bandwidth,
    config: FitConfig,
) -> Result<GreedyFit, ExplainError> {
    if targets.is_empty() || candidates.is_empty() {
        return Err(ExplainError::EmptyInput);
    }
    if m == 0 || m > candidates.len() {
        return Err(ExplainError::TooManyPrototypes {
            requested: m,
            candidates: candidates.len(),
        });
    }
    let (sigma, bandwidth_fallback) = resolve_bandwidth(bandwidth, candidates)?;
    let problem = KernelProblem::new(targets, candidates, sigma);
    let (chosen, weights, objective_trace) = greedy_select(&problem, m, config);
    Ok(GreedyFit {
        chosen,
        weights,
        sigma,
        bandwidth_fallback,
        objective_trace,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeMember {
    pub id: InstanceId,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeSet {
    pub members: Vec<PrototypeMember>,
    pub kernel_bandwidth: f64,
    #[serde(default)]
    pub bandwidth_fallback: bool,
    pub objective: f64,
}

fn pixels_of<'a>(data: &'a LabeledDataset, ids: &[InstanceId]) -> Result<Vec<&'a [f64]>, ExplainError> {
    ids.iter()
        .map(|&id| {
            data.get(id)
                .map(|inst| inst.pixels.as_slice())
                .ok_or(ExplainError::UnknownInstance(id))
        })
        .collect()
}

/// ProtoDash over dataset instances.
pub fn protodash(
    target_ids: &[InstanceId],
    candidate_ids: &[InstanceId],
    data: &LabeledDataset,
    m: usize,
    bandwidth: Bandwidth,
    config: FitConfig,
) -> Result<PrototypeSet, ExplainError> {
    let targets = pixels_of(data, target_ids)?;
    let candidates = pixels_of(data, candidate_ids)?;
    let fit = protodash_points(&targets, &candidates, m, bandwidth, config)?;
    Ok(PrototypeSet {
        members: fit
            .chosen
            .iter()
            .zip(&fit.weights)
            .map(|(&i, &weight)| PrototypeMember {
                id: candidate_ids[i],
                weight,
            })
            .collect(),
        kernel_bandwidth: fit.sigma,
        bandwidth_fallback: fit.bandwidth_fallback,
        objective: fit.objective(),
    })
}

/// Fit weights for a fixed member list (the ranked alternative to greedy selection).
pub fn weigh_fixed(
    target_ids: &[InstanceId],
    member_ids: &[InstanceId],
    data: &LabeledDataset,
    bandwidth: Bandwidth,
    config: FitConfig,
) -> Result<PrototypeSet, ExplainError> {
    let targets = pixels_of(data, target_ids)?;
    let members = pixels_of(data, member_ids)?;
    if targets.is_empty() || members.is_empty() {
        return Err(ExplainError::EmptyInput);
    }
    let (sigma, bandwidth_fallback) = resolve_bandwidth(bandwidth, &targets)?;
    let problem = KernelProblem::new(&targets, &members, sigma);
    let subset: Vec<usize> = (0..members.len()).collect();
    let weights = problem.fit_weights(&subset, &vec![0.0; subset.len()], config);
    Ok(PrototypeSet {
        members: member_ids
            .iter()
            .zip(&weights)
            .map(|(&id, &weight)| PrototypeMember { id, weight })
            .collect(),
        kernel_bandwidth: sigma,
        bandwidth_fallback,
        objective: problem.objective(&subset, &weights),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_point_gets_unit_weight() {
        let p = [0.3, 0.7];
        let fit = protodash_points(&[&p], &[&p], 1, Bandwidth::MedianHeuristic, FitConfig::default()).unwrap();
        assert_eq!(fit.chosen, vec![0]);
        assert!((fit.weights[0] - 1.0).abs() < 1e-8);
        assert!(fit.bandwidth_fallback);
        assert_eq!(fit.sigma, 1.0);
    }

    #[test]
    fn identical_candidates_fall_back_to_unit_bandwidth() {
        let p = [1.0, 1.0];
        let (s, fell) = resolve_bandwidth(Bandwidth::MedianHeuristic, &[&p, &p, &p]).unwrap();
        assert_eq!((s, fell), (1.0, true));
        assert!(resolve_bandwidth(Bandwidth::Fixed(0.0), &[&p]).is_err());
    }

    #[test]
    fn median_of_pairwise_distances() {
        let pts: [[f64; 1]; 3] = [[0.0], [1.0], [3.0]];
        let refs: Vec<&[f64]> = pts.iter().map(|p| p.as_slice()).collect();
        // distances 1, 3, 2
        assert_eq!(median_pairwise_distance(&refs), Some(2.0));
        let pts: [[f64; 1]; 4] = [[0.0], [1.0], [2.0], [4.0]];
        let refs: Vec<&[f64]> = pts.iter().map(|p| p.as_slice()).collect();
        // distances 1,2,4,1,3,2 -> sorted 1,1,2,2,3,4
        assert_eq!(median_pairwise_distance(&refs), Some(2.0));
    }

    #[test]
    fn weights_are_non_negative_and_members_distinct() {
        let pts: Vec<Vec<f64>> = (0..12)
            .map(|i| vec![(i as f64 * 0.7).sin(), (i as f64 * 1.3).cos()])
            .collect();
        let refs: Vec<&[f64]> = pts.iter().map(|p| p.as_slice()).collect();
        let fit = protodash_points(&refs, &refs, 5, Bandwidth::MedianHeuristic, FitConfig::default()).unwrap();
        assert!(fit.weights.iter().all(|&w| w >= 0.0));
        let mut c = fit.chosen.clone();
        c.sort_unstable();
        c.dedup();
        assert_eq!(c.len(), 5);
        for pair in fit.objective_trace.windows(2) {
            assert!(pair[1] >= pair[0] - 1e-12);
        }
    }

    #[test]
    fn rejects_bad_sizes() {
        let p = [0.0];
        assert!(matches!(
            protodash_points(&[&p], &[&p], 2, Bandwidth::MedianHeuristic, FitConfig::default()),
            Err(ExplainError::TooManyPrototypes { .. })
        ));
        assert!(matches!(
            protodash_points(&[], &[&p], 1, Bandwidth::MedianHeuristic, FitConfig::default()),
            Err(ExplainError::EmptyInput)
        ));
    }
}
