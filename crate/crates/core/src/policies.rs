//! Explanation-selection policies at zero discount: the three mental-model
//! policies and their random baselines over the same explanation subsets.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blackbox::Possibility;
use crate::explainers::{ExplainerKind, Explanation, ExplanationCatalog};
use crate::mental_model::MentalModelState;

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("mental model has no local simulatability scores yet")]
    UnpopulatedState,
    #[error("catalog is incomplete: {0}")]
    IncompleteCatalog(String),
    #[error("only immediate-reward policies are supported (gamma must be 0, got {0})")]
    UnsupportedDiscount(f64),
    #[error("unknown policy '{0}'")]
    UnknownPolicy(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    RandomSaliency,
    RandomPrototype,
    RandomCombined,
    MmSaliency,
    MmPrototype,
    MmCombined,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 6] = [
        PolicyKind::RandomSaliency,
        PolicyKind::RandomPrototype,
        PolicyKind::RandomCombined,
        PolicyKind::MmSaliency,
        PolicyKind::MmPrototype,
        PolicyKind::MmCombined,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PolicyKind::RandomSaliency => "random_saliency",
            PolicyKind::RandomPrototype => "random_prototype",
            PolicyKind::RandomCombined => "random_combined",
            PolicyKind::MmSaliency => "mm_saliency",
            PolicyKind::MmPrototype => "mm_prototype",
            PolicyKind::MmCombined => "mm_combined",
        }
    }

    pub fn is_mental_model(self) -> bool {
        matches!(
            self,
            PolicyKind::MmSaliency | PolicyKind::MmPrototype | PolicyKind::MmCombined
        )
    }

    /// The random arm choosing from the same explanations.
    pub fn paired_baseline(self) -> PolicyKind {
        match self {
            PolicyKind::MmSaliency | PolicyKind::RandomSaliency => PolicyKind::RandomSaliency,
            PolicyKind::MmPrototype | PolicyKind::RandomPrototype => PolicyKind::RandomPrototype,
            PolicyKind::MmCombined | PolicyKind::RandomCombined => PolicyKind::RandomCombined,
        }
    }

    /// Explainer kinds this policy may show.
    pub fn kinds(self) -> &'static [ExplainerKind] {
        match self {
            PolicyKind::RandomSaliency | PolicyKind::MmSaliency => &[ExplainerKind::Saliency],
            PolicyKind::RandomPrototype | PolicyKind::MmPrototype => &[ExplainerKind::Prototype],
            PolicyKind::RandomCombined | PolicyKind::MmCombined => &[ExplainerKind::Saliency, ExplainerKind::Prototype],
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PolicyKind {
    type Err = PolicyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PolicyKind::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| PolicyError::UnknownPolicy(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub gamma: f64,
    /// Mean satisfaction assumed for an explainer with no ratings yet.
    pub neutral_satisfaction: f64,
    pub seed: u64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            gamma: 0.0,
            neutral_satisfaction: 3.0,
            seed: 0,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.gamma == 0.0 {
            Ok(())
        } else {
            Err(PolicyError::UnsupportedDiscount(self.gamma))
        }
    }
}

fn pick<T: Copy>(tied: &[T], rng: &mut impl Rng) -> T {
    if tied.len() == 1 {
        tied[0]
    } else {
        tied[rng.random_range(0..tied.len())]
    }
}

/// Possibility with the lowest local score; ties by one seeded draw.
pub fn argmin_possibility(state: &MentalModelState, rng: &mut impl Rng) -> Result<Possibility, PolicyError> {
    let locals = state.local_sim.ok_or(PolicyError::UnpopulatedState)?;
    let min = Possibility::ALL.iter().map(|&p| locals.get(p)).min().unwrap_or(0);
    let tied: Vec<Possibility> = Possibility::ALL.into_iter().filter(|&p| locals.get(p) == min).collect();
    Ok(pick(&tied, rng))
}

pub fn mean_satisfaction(state: &MentalModelState, kind: ExplainerKind, config: &PolicyConfig) -> f64 {
    let h = state.satisfaction_history.get(kind);
    if h.is_empty() {
        config.neutral_satisfaction
    } else {
        h.iter().sum::<f64>() / h.len() as f64
    }
}

/// Explainer kind with the highest mean satisfaction; ties by a seeded coin.
pub fn argmax_satisfaction(state: &MentalModelState, config: &PolicyConfig, rng: &mut impl Rng) -> ExplainerKind {
    let s = mean_satisfaction(state, ExplainerKind::Saliency, config);
    let p = mean_satisfaction(state, ExplainerKind::Prototype, config);
    if s > p {
        ExplainerKind::Saliency
    } else if p > s {
        ExplainerKind::Prototype
    } else {
        pick(&ExplainerKind::ALL, rng)
    }
}

/// Choose the next explanation. Reads only its arguments, so with zero
/// discount the choice is the greedy immediate-reward action.
pub fn select<'c>(
    policy: PolicyKind,
    state: &MentalModelState,
    catalog: &'c ExplanationCatalog,
    config: &PolicyConfig,
    rng: &mut impl Rng,
) -> Result<&'c Explanation, PolicyError> {
    config.validate()?;
    catalog
        .validate()
        .map_err(|e| PolicyError::IncompleteCatalog(e.to_string()))?;
    if state.local_sim.is_none() {
        return Err(PolicyError::UnpopulatedState);
    }
    let chosen = match policy {
        PolicyKind::MmSaliency => catalog.get(ExplainerKind::Saliency, argmin_possibility(state, rng)?),
        PolicyKind::MmPrototype => catalog.get(ExplainerKind::Prototype, argmin_possibility(state, rng)?),
        PolicyKind::MmCombined => {
            let kind = argmax_satisfaction(state, config, rng);
            catalog.get(kind, argmin_possibility(state, rng)?)
        }
        PolicyKind::RandomSaliency | PolicyKind::RandomPrototype | PolicyKind::RandomCombined => {
            let pool: Vec<&Explanation> = policy.kinds().iter().flat_map(|&k| catalog.of_kind(k)).collect();
            pool[rng.random_range(0..pool.len())]
        }
    };
    Ok(chosen)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mental_model::{LocalScores, SatisfactionHistory};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn state(locals: [u8; 4]) -> MentalModelState {
        MentalModelState {
            local_sim: Some(LocalScores::new(locals).unwrap()),
            satisfaction_history: SatisfactionHistory::default(),
            iteration_index: Some(0),
        }
    }

    #[test]
    fn unique_argmin() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(argmin_possibility(&state([3, 1, 2, 2]), &mut rng), Ok(Possibility::Tn));
    }

    #[test]
    fn tied_argmin_is_seeded_and_covers_all() {
        let s = state([2, 2, 2, 2]);
        let draw = |seed| argmin_possibility(&s, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        assert_eq!(draw(7), draw(7));
        let seen: std::collections::HashSet<_> = (0..200).map(draw).collect();
        assert_eq!(seen.len(), 4);
    }

    #[test]
    fn unpopulated_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            argmin_possibility(&MentalModelState::default(), &mut rng),
            Err(PolicyError::UnpopulatedState)
        );
    }

    #[test]
    fn satisfaction_means_and_cold_start() {
        let config = PolicyConfig::default();
        let mut s = state([0; 4]);
        assert_eq!(mean_satisfaction(&s, ExplainerKind::Saliency, &config), 3.0);
        s.satisfaction_history.saliency = vec![4.0, 5.0];
        assert_eq!(mean_satisfaction(&s, ExplainerKind::Saliency, &config), 4.5);
        s.satisfaction_history.saliency = vec![2.0];
        s.satisfaction_history.prototype = vec![4.0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(argmax_satisfaction(&s, &config, &mut rng), ExplainerKind::Prototype);
    }

    #[test]
    fn policy_names_round_trip() {
        for p in PolicyKind::ALL {
            assert_eq!(p.as_str().parse::<PolicyKind>(), Ok(p));
            assert_eq!(serde_json::to_string(&p).unwrap(), format!("\"{}\"", p.as_str()));
            assert_eq!(p.paired_baseline().kinds(), p.kinds());
        }
        assert!(matches!(
            "bogus".parse::<PolicyKind>(),
            Err(PolicyError::UnknownPolicy(_))
        ));
    }

    #[test]
    fn nonzero_discount_is_rejected() {
        let config = PolicyConfig {
            gamma: 0.9,
            ..PolicyConfig::default()
        };
        assert_eq!(config.validate(), Err(PolicyError::UnsupportedDiscount(0.9)));
    }
}
