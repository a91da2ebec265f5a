mod common;

use std::sync::OnceLock;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use seqex_core::blackbox::Possibility;
use seqex_core::experiment::Experiment;
use seqex_core::explainers::{ExplainerKind, Explanation};
use seqex_core::mental_model::{score_satisfaction, score_simulatability};
use seqex_core::policies::PolicyKind;
use seqex_core::session::Phase;
use seqex_core::simulee::{
    absorb, respond_satisfaction, respond_simulatability, simulate_session, Beliefs, Gain, PerKind, SimuleeConfig,
    SimuleeState,
};

fn uniform(b: f64) -> SimuleeState {
    SimuleeState {
        belief: Beliefs::splat(b),
    }
}

#[test]
fn certain_beliefs_give_extreme_resultants() {
    let exp = common::fabricated_experiment(1);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..20 {
        let all = respond_simulatability(&uniform(1.0), &exp.task, &mut rng);
        assert_eq!(score_simulatability(&exp.task, &all).unwrap().resultant(), 12);
        let none = respond_simulatability(&uniform(0.0), &exp.task, &mut rng);
        assert_eq!(score_simulatability(&exp.task, &none).unwrap().resultant(), 0);
    }
}

#[test]
fn chance_beliefs_average_six() {
    // Binomial(12, 0.5) has mean 6 and sd sqrt(3); 10k trials put the sample
    // mean within 0.1 with overwhelming probability.
    let exp = common::fabricated_experiment(1);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let trials = 10_000;
    let total: u64 = (0..trials)
        .map(|_| {
            let r = respond_simulatability(&uniform(0.5), &exp.task, &mut rng);
            u64::from(score_simulatability(&exp.task, &r).unwrap().resultant())
        })
        .sum();
    let mean = total as f64 / trials as f64;
    assert!((mean - 6.0).abs() <= 0.1, "mean resultant {mean}");
}

#[test]
fn satisfaction_centres_on_preference() {
    // round and clamp to [1, 5] are symmetric about 3, so the expected score
    // at preference 3 is exactly 3.
    let mut config = SimuleeConfig {
        noise_sd: 0.5,
        ..SimuleeConfig::default()
    };
    config.preference.saliency = 3.0;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 10_000;
    let mean = (0..n)
        .map(|_| score_satisfaction(&respond_satisfaction(&config, ExplainerKind::Saliency, &mut rng)).unwrap())
        .sum::<f64>()
        / n as f64;
    assert!((mean - 3.0).abs() <= 0.05, "mean satisfaction {mean}");
}

#[test]
fn simulated_sessions_complete_and_repeat() {
    let exp = common::fabricated_experiment(2);
    let config = SimuleeConfig::default();
    for policy in PolicyKind::ALL {
        let a = simulate_session(&exp, policy, &config, 7).unwrap();
        let b = simulate_session(&exp, policy, &config, 7).unwrap();
        assert_eq!(a.phase, Phase::Complete);
        assert_eq!(a.iterations, b.iterations);
        assert_eq!(a.baseline, b.baseline);
        for it in &a.iterations {
            assert!(policy.kinds().contains(&it.kind));
        }
    }
}

fn shared() -> &'static Experiment {
    static EXP: OnceLock<Experiment> = OnceLock::new();
    EXP.get_or_init(|| common::fabricated_experiment(1))
}

fn explanation(kind: ExplainerKind, p: Possibility) -> &'static Explanation {
    shared().catalog.get(kind, p)
}

proptest! {
    #[test]
    fn beliefs_stay_probabilities(
        init in prop::array::uniform4(0.0f64..=1.0),
        target in 0.0f64..=1.0,
        spill in 0.0f64..=1.0,
        decay in 0.0f64..=1.0,
        shown in prop::collection::vec(0usize..8, 1..30),
    ) {
        let g = Gain { target, spillover: spill };
        let config = SimuleeConfig {
            initial_belief: Beliefs::from_array(init),
            gain: PerKind { saliency: g, prototype: g },
            decay,
            ..SimuleeConfig::default()
        };
        let catalog = &shared().catalog;
        let mut s = SimuleeState::new(&config);
        for i in shown {
            s = absorb(&s, &config, &catalog.explanations[i]);
            for b in s.belief.as_array() {
                prop_assert!((0.0..=1.0).contains(&b));
            }
        }
    }

    #[test]
    fn targeting_the_weakest_helps_the_minimum_most(
        init in prop::array::uniform4(0.0f64..=1.0),
        spill in 0.0f64..0.5,
        extra in 0.0f64..0.5,
    ) {
        let g = Gain { target: spill + extra, spillover: spill };
        let config = SimuleeConfig {
            initial_belief: Beliefs::from_array(init),
            gain: PerKind { saliency: g, prototype: g },
            decay: 0.0,
            ..SimuleeConfig::default()
        };
        let s = SimuleeState::new(&config);
        let min = |s: &SimuleeState| s.belief.as_array().into_iter().fold(f64::INFINITY, f64::min);
        let weakest = Possibility::ALL
            .into_iter()
            .min_by(|a, b| s.belief.get(*a).total_cmp(&s.belief.get(*b)))
            .unwrap();
        let best = min(&absorb(&s, &config, explanation(ExplainerKind::Saliency, weakest)));
        for p in Possibility::ALL {
            let other = min(&absorb(&s, &config, explanation(ExplainerKind::Saliency, p)));
            prop_assert!(best >= other - 1e-12);
        }
    }
}
