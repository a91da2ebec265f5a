//! A synthetic explainee for desk-scale policy evaluation.
//!
//! Each possibility carries a belief: the probability of guessing the model
//! correctly on that possibility's images. Explanations raise beliefs with
//! saturating gains, decay pulls them back toward chance, and satisfaction
//! ratings are noisy draws around a per-explainer preference.
//!
//! Config files are JSON; omitted fields keep their defaults:
//!
//! | field | range | default |
//! |---|---|---|
//! | `initial_belief.{tp,tn,fp,fn}` | [0, 1] | 0.5 |
//! | `gain.{saliency,prototype}.target` | [0, 1] | 0.35 |
//! | `gain.{saliency,prototype}.spillover` | [0, 1] | 0.05 |
//! | `decay` | [0, 1] | 0.05 |
//! | `preference.saliency` | [1, 5] | 3.3 |
//! | `preference.prototype` | [1, 5] | 3.8 |
//! | `noise_sd` | ≥ 0 | 0.7 |
//! | `seed` | u64 | 0 |

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blackbox::Possibility;
use crate::experiment::Experiment;
use crate::explainers::{ExplainerKind, Explanation};
use crate::mental_model::{
    Guess, SatisfactionResponse, SimulatabilityResponse, SimulatabilityTask, LIKERT_MAX, LIKERT_MIN, SATISFACTION_ITEMS,
};
use crate::policies::PolicyKind;
use crate::session::{SessionError, SessionRecord, EXPERIMENTAL_ITERATIONS};

#[derive(Debug, Error)]
pub enum SimuleeError {
    #[error("invalid simulee config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Session(#[from] SessionError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Beliefs {
    pub tp: f64,
    pub tn: f64,
    pub fp: f64,
    pub r#fn: f64,
}

impl Beliefs {
    pub fn splat(v: f64) -> Self {
        Self {
            tp: v,
            tn: v,
            fp: v,
            r#fn: v,
        }
    }

    pub fn get(&self, p: Possibility) -> f64 {
        self.as_array()[p.index()]
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.tp, self.tn, self.fp, self.r#fn]
    }

    pub fn from_array([tp, tn, fp, r#fn]: [f64; 4]) -> Self {
        Self { tp, tn, fp, r#fn }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Gain {
    /// Applied to the shown explanation's possibility.
    pub target: f64,
    /// Applied to the other three.
    pub spillover: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerKind<T> {
    pub saliency: T,
    pub prototype: T,
}

impl<T: Copy> PerKind<T> {
    pub fn get(&self, kind: ExplainerKind) -> T {
        match kind {
            ExplainerKind::Saliency => self.saliency,
            ExplainerKind::Prototype => self.prototype,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimuleeConfig {
    pub initial_belief: Beliefs,
    pub gain: PerKind<Gain>,
    pub decay: f64,
    pub preference: PerKind<f64>,
    pub noise_sd: f64,
    pub seed: u64,
}

impl Default for SimuleeConfig {
    fn default() -> Self {
        let gain = Gain {
            target: 0.35,
            spillover: 0.05,
        };
        Self {
            initial_belief: Beliefs::splat(0.5),
            gain: PerKind {
                saliency: gain,
                prototype: gain,
            },
            decay: 0.05,
            preference: PerKind {
                saliency: 3.3,
                prototype: 3.8,
            },
            noise_sd: 0.7,
            seed: 0,
        }
    }
}

fn check(name: &str, v: f64, lo: f64, hi: f64) -> Result<(), SimuleeError> {
    if (lo..=hi).contains(&v) {
        Ok(())
    } else {
        Err(SimuleeError::InvalidConfig(format!(
            "{name} = {v} is outside [{lo}, {hi}]"
        )))
    }
}

impl SimuleeConfig {
    pub fn validate(&self) -> Result<(), SimuleeError> {
        for (p, b) in Possibility::ALL.iter().zip(self.initial_belief.as_array()) {
            check(&format!("initial_belief.{}", p.as_str()), b, 0.0, 1.0)?;
        }
        for (name, g) in [("saliency", self.gain.saliency), ("prototype", self.gain.prototype)] {
            check(&format!("gain.{name}.target"), g.target, 0.0, 1.0)?;
            check(&format!("gain.{name}.spillover"), g.spillover, 0.0, 1.0)?;
        }
        check("decay", self.decay, 0.0, 1.0)?;
        check("preference.saliency", self.preference.saliency, 1.0, 5.0)?;
        check("preference.prototype", self.preference.prototype, 1.0, 5.0)?;
        check("noise_sd", self.noise_sd, 0.0, f64::MAX)
    }

    pub fn from_json(s: &str) -> Result<Self, SimuleeError> {
        let config: Self = serde_json::from_str(s)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SimuleeError> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimuleeState {
    pub belief: Beliefs,
}

impl SimuleeState {
    pub fn new(config: &SimuleeConfig) -> Self {
        Self {
            belief: config.initial_belief,
        }
    }
}

/// Learn from one explanation, then decay toward chance.
pub fn absorb(state: &SimuleeState, config: &SimuleeConfig, shown: &Explanation) -> SimuleeState {
    let gain = config.gain.get(shown.kind);
    let mut b = state.belief.as_array();
    for p in Possibility::ALL {
        let g = if p == shown.possibility {
            gain.target
        } else {
            gain.spillover
        };
        let v = &mut b[p.index()];
        *v += g * (1.0 - *v);
        if config.decay > 0.0 {
            *v = 0.5 + (1.0 - config.decay) * (*v - 0.5);
        }
    }
    SimuleeState {
        belief: Beliefs::from_array(b),
    }
}

/// Guess the model's prediction with probability equal to the belief for the
/// image's possibility, otherwise the opposite label.
pub fn respond_simulatability(
    state: &SimuleeState,
    task: &SimulatabilityTask,
    rng: &mut impl Rng,
) -> SimulatabilityResponse {
    let guesses = task
        .items()
        .iter()
        .map(|item| {
            let right = rng.random_bool(state.belief.get(item.possibility).clamp(0.0, 1.0));
            Guess {
                image_id: item.id,
                label: if right {
                    item.model_prediction
                } else {
                    item.model_prediction.flipped()
                },
            }
        })
        .collect();
    SimulatabilityResponse { guesses }
}

pub fn respond_satisfaction(config: &SimuleeConfig, kind: ExplainerKind, rng: &mut impl Rng) -> SatisfactionResponse {
    let noise = Normal::new(0.0, config.noise_sd).expect("noise_sd is validated");
    let mean = config.preference.get(kind);
    let items = (0..SATISFACTION_ITEMS)
        .map(|_| {
            let v = (mean + noise.sample(rng)).round();
            v.clamp(f64::from(LIKERT_MIN), f64::from(LIKERT_MAX)) as u8
        })
        .collect();
    SatisfactionResponse { items }
}

/// Drive a complete session with a simulee seeded by `config.seed` and
/// `session_seed`.
pub fn simulate_session(
    exp: &Experiment,
    policy: PolicyKind,
    config: &SimuleeConfig,
    session_seed: u64,
) -> Result<SessionRecord, SimuleeError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(session_seed);
    let mut record = SessionRecord::start(format!("sim-{policy}-{session_seed}"), policy, session_seed, exp);
    let mut state = SimuleeState::new(config);
    record.submit_baseline(exp, &respond_simulatability(&state, &exp.task, &mut rng))?;
    for _ in 0..EXPERIMENTAL_ITERATIONS {
        let shown = record.current_explanation(exp)?;
        state = absorb(&state, config, shown);
        let sat = respond_satisfaction(config, shown.kind, &mut rng);
        let sim = respond_simulatability(&state, &exp.task, &mut rng);
        record.submit_iteration(exp, &sat, &sim)?;
    }
    Ok(record)
}

/// `n` sessions of one arm with session seeds `0..n`.
pub fn simulate_arm(
    exp: &Experiment,
    policy: PolicyKind,
    config: &SimuleeConfig,
    n: u64,
) -> Result<Vec<SessionRecord>, SimuleeError> {
    (0..n).map(|s| simulate_session(exp, policy, config, s)).collect()
}
