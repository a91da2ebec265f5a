#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seqex_core::blackbox::{
    activation_pattern, batch_loss, CategorizedEntry, CategorizedTestSet, NetworkParams, Possibility, Prediction,
    TENSOR_NAMES, TRAINABLE,
};
use seqex_core::dataset::{ImageInstance, InstanceId, Label, LabeledDataset, TaskPreset, IMAGE_PIXELS};
use seqex_core::experiment::Experiment;
use seqex_core::explainers::{build_catalog, CatalogConfig};

/// Random images with values in [0, 1].
pub fn random_images(n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..IMAGE_PIXELS).map(|_| rng.random::<f64>()).collect())
        .collect()
}

/// Stroke-like images: most pixels exactly 0, the rest uniform in (0, 1].
pub fn sparse_images(n: usize, density: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            (0..IMAGE_PIXELS)
                .map(|_| {
                    if rng.random::<f64>() < density {
                        rng.random::<f64>()
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect()
}

/// Two blob classes: class 0 bright on the left half, class 1 on the right half.
pub fn toy_dataset(n: usize, seed: u64) -> LabeledDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let instances = (0..n)
        .map(|i| {
            let class = (i % 2) as u8;
            let pixels = (0..IMAGE_PIXELS)
                .map(|p| {
                    let col = p % 28;
                    let on = (col < 14) == (class == 0);
                    let base = if on { 0.7 } else { 0.1 };
                    (base + 0.3 * rng.random::<f64>() - 0.15_f64).clamp(0.0, 1.0)
                })
                .collect();
            ImageInstance {
                id: InstanceId(i as u32),
                pixels,
                class,
            }
        })
        .collect();
    LabeledDataset::new(instances)
}

pub struct TensorCheck {
    pub name: &'static str,
    pub relative_error: f64,
    pub checked: usize,
    /// Probes discarded because +-h crossed a ReLU or max-pool switch.
    pub skipped: usize,
}

/// Central finite differences (step `h`) of the training-mode batch loss,
/// compared with `analytic` on up to `per_tensor` seeded entries per tensor.
///
/// A probe only counts when the activation pattern at +h and -h equals the
/// pattern at the base point: across a ReLU or max-pool switch the loss is not
/// differentiable and a central difference says nothing about the gradient.
pub fn finite_difference_check(
    params: &NetworkParams,
    images: &[&[f64]],
    targets: &[f64],
    analytic: &[Vec<f64>],
    h: f64,
    per_tensor: usize,
    seed: u64,
) -> Vec<TensorCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base_pattern = activation_pattern(params, images);
    let mut out = Vec::new();
    for &t in &TRAINABLE {
        let len = params.tensors()[t].len();
        let mut order: Vec<usize> = (0..len).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        let (mut checked, mut skipped) = (0, 0);
        for j in order {
            if checked == per_tensor {
                break;
            }
            let mut plus = params.clone();
            plus.tensors_mut()[t][j] += h;
            let mut minus = params.clone();
            minus.tensors_mut()[t][j] -= h;
            if activation_pattern(&plus, images) != base_pattern || activation_pattern(&minus, images) != base_pattern {
                skipped += 1;
                continue;
            }
            let numeric = (batch_loss(&plus, images, targets) - batch_loss(&minus, images, targets)) / (2.0 * h);
            let a = analytic[t][j];
            diff2 += (a - numeric) * (a - numeric);
            a2 += a * a;
            n2 += numeric * numeric;
            checked += 1;
        }
        let denom = a2.sqrt().max(n2.sqrt()).max(1e-12);
        out.push(TensorCheck {
            name: TENSOR_NAMES[t],
            relative_error: diff2.sqrt() / denom,
            checked,
            skipped,
        });
    }
    out
}

/// Ten 2-D points: a tight cluster of four, a tight cluster of five, one outlier.
pub fn clusters_and_outlier() -> Vec<Vec<f64>> {
    vec![
        vec![0.0, 0.0],
        vec![0.1, 0.05],
        vec![-0.05, 0.1],
        vec![0.08, -0.07],
        vec![3.0, 3.0],
        vec![3.1, 2.9],
        vec![2.95, 3.12],
        vec![3.05, 3.05],
        vec![2.9, 2.95],
        vec![8.0, -5.0],
    ]
}

pub fn gaussian(a: &[f64], b: &[f64], sigma: f64) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    (-d2 / (2.0 * sigma * sigma)).exp()
}

/// Median of pairwise distances, by full sort.
pub fn median_distance(points: &[Vec<f64>]) -> f64 {
    let mut d = Vec::new();
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            d.push(euclidean(&points[i], &points[j]));
        }
    }
    d.sort_by(f64::total_cmp);
    let n = d.len();
    if n % 2 == 1 {
        d[n / 2]
    } else {
        0.5 * (d[n / 2 - 1] + d[n / 2])
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// `mu` over all points as targets, and the kernel on a subset.
pub fn kernel_terms(points: &[Vec<f64>], subset: &[usize], sigma: f64) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mu = subset
        .iter()
        .map(|&i| points.iter().map(|t| gaussian(&points[i], t, sigma)).sum::<f64>() / points.len() as f64)
        .collect();
    let k = subset
        .iter()
        .map(|&i| {
            subset
                .iter()
                .map(|&j| gaussian(&points[i], &points[j], sigma))
                .collect()
        })
        .collect();
    (mu, k)
}

pub fn quadratic_objective(mu: &[f64], k: &[Vec<f64>], w: &[f64]) -> f64 {
    let mut v = 0.0;
    for a in 0..w.len() {
        v += mu[a] * w[a];
        for b in 0..w.len() {
            v -= 0.5 * w[a] * w[b] * k[a][b];
        }
    }
    v
}

/// Solve `a x = b` by Gaussian elimination with partial pivoting.
#[allow(clippy::needless_range_loop)]
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-14 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    Some(x)
}

/// Exact maximum of `mu.w - 0.5 w'Kw` over `w >= 0` by enumerating supports.
pub fn exact_nonneg_optimum(mu: &[f64], k: &[Vec<f64>]) -> (f64, Vec<f64>) {
    let n = mu.len();
    let mut best = (0.0, vec![0.0; n]);
    for mask in 1u32..(1 << n) {
        let support: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        let a = support
            .iter()
            .map(|&i| support.iter().map(|&j| k[i][j]).collect())
            .collect();
        let b = support.iter().map(|&i| mu[i]).collect();
        let Some(x) = solve(a, b) else { continue };
        if x.iter().any(|&v| v < 0.0) {
            continue;
        }
        let mut w = vec![0.0; n];
        for (&i, &v) in support.iter().zip(&x) {
            w[i] = v;
        }
        let value = quadratic_objective(mu, k, &w);
        if value > best.0 {
            best = (value, w);
        }
    }
    best
}

/// All `k`-subsets of `0..n` in lexicographic order.
pub fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, k, &mut Vec::new(), &mut out);
    out
}

/// A toy pool with `per_cell` instances in each possibility, assigned
/// round-robin, with spread-out confidences.
pub fn fabricated_cells(per_cell: usize) -> (LabeledDataset, CategorizedTestSet) {
    let data = toy_dataset(4 * per_cell, 21);
    let entries = data.instances().iter().enumerate().map(|(i, inst)| {
        let possibility = Possibility::ALL[i % 4];
        let magnitude = 0.5 + (i as f64 * 0.37) % 3.0;
        let logit = if possibility.predicted_label() == Label::Positive {
            magnitude
        } else {
            -magnitude
        };
        CategorizedEntry {
            id: inst.id,
            true_label: possibility.true_label(),
            prediction: Prediction::from_logit(logit),
        }
    });
    let cats = CategorizedTestSet::from_predictions(entries);
    (data, cats)
}

/// An experiment over the fabricated pool, with a catalog explained by an
/// untrained network.
pub fn fabricated_experiment(seed: u64) -> Experiment {
    let (data, cats) = fabricated_cells(12);
    let catalog = build_catalog(&NetworkParams::init(5), &cats, &data, seed, CatalogConfig::default()).unwrap();
    Experiment::assemble(TaskPreset::MnistFallback, data, cats, catalog, seed).unwrap()
}

/// Answer every task image, right exactly where `right` says so.
pub fn answer(
    exp: &Experiment,
    right: impl Fn(Possibility) -> bool,
) -> seqex_core::mental_model::SimulatabilityResponse {
    use seqex_core::mental_model::{Guess, SimulatabilityResponse};
    SimulatabilityResponse {
        guesses: exp
            .task
            .items()
            .iter()
            .map(|item| Guess {
                image_id: item.id,
                label: if right(item.possibility) {
                    item.model_prediction
                } else {
                    item.model_prediction.flipped()
                },
            })
            .collect(),
    }
}

pub fn random_answer(exp: &Experiment, rng: &mut impl Rng) -> seqex_core::mental_model::SimulatabilityResponse {
    let coins: Vec<bool> = (0..4).map(|_| rng.random_bool(0.5)).collect();
    answer(exp, |p| coins[p.index()])
}

pub fn satisfaction(items: [u8; 8]) -> seqex_core::mental_model::SatisfactionResponse {
    seqex_core::mental_model::SatisfactionResponse { items: items.to_vec() }
}

#[derive(Debug, Default)]
pub struct FuzzReport {
    pub events: usize,
    pub sessions: usize,
    pub rejected: usize,
    /// Rejected calls that nonetheless changed the record.
    pub mutated_on_reject: usize,
    /// Sessions whose reloaded record differs from the live one.
    pub replay_mismatches: usize,
}

/// Drive random sessions through valid transitions until `target_events`
/// events exist, trying an invalid call before many of them and persisting
/// at random points. Then reload the log and compare.
pub fn fuzz_sessions(exp: &Experiment, target_events: usize, seed: u64, log: &std::path::Path) -> FuzzReport {
    use seqex_core::policies::PolicyKind;
    use seqex_core::session::{load_all, Phase, SessionRecord};

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut live: Vec<SessionRecord> = Vec::new();
    let mut report = FuzzReport::default();
    let count = |live: &[SessionRecord]| live.iter().map(|s| s.events.len()).sum::<usize>();
    while count(&live) < target_events {
        let open: Vec<usize> = (0..live.len()).filter(|&i| !live[i].is_complete()).collect();
        if open.is_empty() || rng.random_bool(0.08) {
            let policy = PolicyKind::ALL[rng.random_range(0..6)];
            let id = format!("fuzz-{}", live.len());
            live.push(SessionRecord::start(id, policy, rng.random(), exp));
            continue;
        }
        let s = &mut live[open[rng.random_range(0..open.len())]];
        if rng.random_bool(0.4) {
            let before = s.clone();
            let mut short = random_answer(exp, &mut rng);
            short.guesses.pop();
            let outcome = match (s.phase, rng.random_range(0..3)) {
                (Phase::AwaitingBaseline, 0) => s.current_explanation(exp).map(|_| ()),
                (Phase::AwaitingBaseline, 1) => s.submit_iteration(exp, &satisfaction([3; 8]), &short),
                (Phase::AwaitingBaseline, _) => s.submit_baseline(exp, &short),
                (Phase::AwaitingIteration(_), 0) => s.submit_baseline(exp, &random_answer(exp, &mut rng)),
                (Phase::AwaitingIteration(_), 1) => s.submit_iteration(
                    exp,
                    &satisfaction([3, 3, 3, 3, 3, 3, 3, 6]),
                    &random_answer(exp, &mut rng),
                ),
                (Phase::AwaitingIteration(_), _) => s.submit_iteration(exp, &satisfaction([3; 8]), &short),
                (Phase::Complete, _) => unreachable!("complete sessions are not picked"),
            };
            if outcome.is_err() {
                report.rejected += 1;
                if *s != before {
                    report.mutated_on_reject += 1;
                }
            }
        }
        match s.phase {
            Phase::AwaitingBaseline => s.submit_baseline(exp, &random_answer(exp, &mut rng)).unwrap(),
            Phase::AwaitingIteration(_) if s.pending.is_none() => {
                s.current_explanation(exp).unwrap();
            }
            Phase::AwaitingIteration(_) => {
                let items: [u8; 8] = std::array::from_fn(|_| rng.random_range(1..=5));
                s.submit_iteration(exp, &satisfaction(items), &random_answer(exp, &mut rng))
                    .unwrap();
            }
            Phase::Complete => unreachable!(),
        }
        if rng.random_bool(0.2) {
            s.persist(log).unwrap();
        }
    }
    for s in &mut live {
        s.persist(log).unwrap();
    }
    let mut loaded = load_all(log).unwrap();
    loaded.sort_by(|a, b| a.session_id.cmp(&b.session_id));
    live.sort_by(|a, b| a.session_id.cmp(&b.session_id));
    report.events = count(&live);
    report.sessions = live.len();
    report.replay_mismatches = if loaded.len() == live.len() {
        live.iter().zip(&loaded).filter(|(a, b)| a != b).count()
    } else {
        live.len().max(loaded.len())
    };
    report
}
