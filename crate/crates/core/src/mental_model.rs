//! The explainee's observable mental model: per-possibility local
//! simulatability and per-explainer satisfaction, plus the two task sets that
//! measure them.

use std::collections::{BTreeMap, HashSet};

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blackbox::{CategorizedTestSet, PerPossibility, Possibility};
use crate::dataset::{InstanceId, Label};
use crate::explainers::{ExplainerKind, ExplanationCatalog};

pub const IMAGES_PER_POSSIBILITY: usize = 3;
pub const TASK_SIZE: usize = 4 * IMAGES_PER_POSSIBILITY;
pub const SATISFACTION_ITEMS: usize = 8;
pub const LIKERT_MIN: u8 = 1;
pub const LIKERT_MAX: u8 = 5;

#[derive(Debug, Error, PartialEq)]
pub enum MentalModelError {
    #[error("{possibility} has {available} instances outside the catalog, need {requested}")]
    InsufficientInstances {
        possibility: Possibility,
        available: usize,
        requested: usize,
    },
    #[error("no guess for task image {0}")]
    MissingGuess(InstanceId),
    #[error("image {0} is not part of the task")]
    UnknownImageId(InstanceId),
    #[error("image {0} guessed more than once")]
    DuplicateGuess(InstanceId),
    #[error("expected {expected} satisfaction items, got {found}")]
    WrongItemCount { expected: usize, found: usize },
    #[error("satisfaction item {index} is {value}, outside 1..=5")]
    OutOfRangeItem { index: usize, value: u8 },
    #[error("satisfaction given without an explanation")]
    SatWithoutExplanation,
    #[error("explanation shown without a satisfaction score")]
    MissingSatisfaction,
    #[error("local score {value} for {possibility} exceeds {IMAGES_PER_POSSIBILITY}")]
    LocalOutOfRange { possibility: Possibility, value: u8 },
}

/// Per-possibility local simulatability (0..=3) and their sum (0..=12).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "LocalScoresRepr", into = "LocalScoresRepr")]
pub struct LocalScores {
    locals: PerPossibility<u8>,
}

impl LocalScores {
    pub fn new(locals: [u8; 4]) -> Result<Self, MentalModelError> {
        for (p, &value) in Possibility::ALL.iter().zip(&locals) {
            if usize::from(value) > IMAGES_PER_POSSIBILITY {
                return Err(MentalModelError::LocalOutOfRange { possibility: *p, value });
            }
        }
        Ok(Self {
            locals: PerPossibility(locals),
        })
    }

    pub fn get(&self, p: Possibility) -> u8 {
        *self.locals.get(p)
    }

    pub fn as_array(&self) -> [u8; 4] {
        self.locals.0
    }

    pub fn resultant(&self) -> u8 {
        self.locals.0.iter().sum()
    }
}

#[derive(Serialize, Deserialize)]
struct LocalScoresRepr {
    tp: u8,
    tn: u8,
    fp: u8,
    #[serde(rename = "fn")]
    fn_: u8,
    resultant: u8,
}

impl From<LocalScores> for LocalScoresRepr {
    fn from(s: LocalScores) -> Self {
        let [tp, tn, fp, fn_] = s.as_array();
        Self {
            tp,
            tn,
            fp,
            fn_,
            resultant: s.resultant(),
        }
    }
}

impl TryFrom<LocalScoresRepr> for LocalScores {
    type Error = String;

    fn try_from(r: LocalScoresRepr) -> Result<Self, String> {
        let scores = LocalScores::new([r.tp, r.tn, r.fp, r.fn_]).map_err(|e| e.to_string())?;
        if scores.resultant() != r.resultant {
            return Err(format!(
                "resultant {} does not equal the sum of locals {}",
                r.resultant,
                scores.resultant()
            ));
        }
        Ok(scores)
    }
}

/// One task image with what the participant must not see.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskItem {
    pub id: InstanceId,
    pub possibility: Possibility,
    pub model_prediction: Label,
}

/// Twelve images, three per possibility, in fixed presentation order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimulatabilityTask {
    pub seed: u64,
    items: Vec<TaskItem>,
}

impl SimulatabilityTask {
    pub fn items(&self) -> &[TaskItem] {
        &self.items
    }

    pub fn image_ids(&self) -> Vec<InstanceId> {
        self.items.iter().map(|i| i.id).collect()
    }

    pub fn item(&self, id: InstanceId) -> Option<&TaskItem> {
        self.items.iter().find(|i| i.id == id)
    }

    pub fn contains(&self, id: InstanceId) -> bool {
        self.item(id).is_some()
    }
}

/// Draw 3 images per possibility, disjoint from every catalog display
/// instance, then shuffle the 12 into presentation order.
pub fn build_simulatability_task(
    cats: &CategorizedTestSet,
    catalog: &ExplanationCatalog,
    seed: u64,
) -> Result<SimulatabilityTask, MentalModelError> {
    let shown: HashSet<InstanceId> = catalog.display_instances().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::with_capacity(TASK_SIZE);
    for p in Possibility::ALL {
        let eligible: Vec<_> = cats.list(p).iter().filter(|e| !shown.contains(&e.id)).collect();
        if eligible.len() < IMAGES_PER_POSSIBILITY {
            return Err(MentalModelError::InsufficientInstances {
                possibility: p,
                available: eligible.len(),
                requested: IMAGES_PER_POSSIBILITY,
            });
        }
        for k in index::sample(&mut rng, eligible.len(), IMAGES_PER_POSSIBILITY) {
            let e = eligible[k];
            items.push(TaskItem {
                id: e.id,
                possibility: p,
                model_prediction: e.prediction.predicted_label,
            });
        }
    }
    items.shuffle(&mut rng);
    Ok(SimulatabilityTask { seed, items })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Guess {
    pub image_id: InstanceId,
    /// The participant's guess of the model's predicted label.
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SimulatabilityResponse {
    pub guesses: Vec<Guess>,
}

/// Count, per possibility, guesses that match the hidden model prediction.
pub fn score_simulatability(
    task: &SimulatabilityTask,
    response: &SimulatabilityResponse,
) -> Result<LocalScores, MentalModelError> {
    let mut by_id: BTreeMap<InstanceId, Label> = BTreeMap::new();
    for g in &response.guesses {
        if !task.contains(g.image_id) {
            return Err(MentalModelError::UnknownImageId(g.image_id));
        }
        if by_id.insert(g.image_id, g.label).is_some() {
            return Err(MentalModelError::DuplicateGuess(g.image_id));
        }
    }
    let mut locals = [0u8; 4];
    for item in task.items() {
        let guess = by_id.get(&item.id).ok_or(MentalModelError::MissingGuess(item.id))?;
        if *guess == item.model_prediction {
            locals[item.possibility.index()] += 1;
        }
    }
    LocalScores::new(locals)
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SatisfactionResponse {
    pub items: Vec<u8>,
}

pub fn validate_satisfaction(resp: &SatisfactionResponse) -> Result<(), MentalModelError> {
    if resp.items.len() != SATISFACTION_ITEMS {
        return Err(MentalModelError::WrongItemCount {
            expected: SATISFACTION_ITEMS,
            found: resp.items.len(),
        });
    }
    for (index, &value) in resp.items.iter().enumerate() {
        if !(LIKERT_MIN..=LIKERT_MAX).contains(&value) {
            return Err(MentalModelError::OutOfRangeItem { index, value });
        }
    }
    Ok(())
}

/// Mean of the eight Likert items.
pub fn score_satisfaction(resp: &SatisfactionResponse) -> Result<f64, MentalModelError> {
    validate_satisfaction(resp)?;
    Ok(resp.items.iter().map(|&v| f64::from(v)).sum::<f64>() / SATISFACTION_ITEMS as f64)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SatisfactionHistory {
    pub saliency: Vec<f64>,
    pub prototype: Vec<f64>,
}

impl SatisfactionHistory {
    pub fn get(&self, kind: ExplainerKind) -> &[f64] {
        match kind {
            ExplainerKind::Saliency => &self.saliency,
            ExplainerKind::Prototype => &self.prototype,
        }
    }

    fn push(&mut self, kind: ExplainerKind, v: f64) {
        match kind {
            ExplainerKind::Saliency => self.saliency.push(v),
            ExplainerKind::Prototype => self.prototype.push(v),
        }
    }
}

/// The context the policies act on.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MentalModelState {
    /// Locals from the most recent task set; `None` before the baseline.
    pub local_sim: Option<LocalScores>,
    pub satisfaction_history: SatisfactionHistory,
    /// 0 after the baseline, then one more per experimental iteration.
    pub iteration_index: Option<u32>,
}

/// Transition after a task set. The baseline passes neither `shown` nor `sat`.
pub fn update_state(
    state: &MentalModelState,
    shown: Option<ExplainerKind>,
    sat: Option<f64>,
    locals: LocalScores,
) -> Result<MentalModelState, MentalModelError> {
    let mut next = state.clone();
    match (shown, sat) {
        (Some(kind), Some(s)) => next.satisfaction_history.push(kind, s),
        (None, None) => {}
        (None, Some(_)) => return Err(MentalModelError::SatWithoutExplanation),
        (Some(_), None) => return Err(MentalModelError::MissingSatisfaction),
    }
    next.local_sim = Some(locals);
    next.iteration_index = Some(state.iteration_index.map_or(0, |i| i + 1));
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task() -> SimulatabilityTask {
        let mut items = Vec::new();
        for (k, p) in Possibility::ALL.into_iter().enumerate() {
            for j in 0..3 {
                items.push(TaskItem {
                    id: InstanceId((k * 3 + j) as u32),
                    possibility: p,
                    model_prediction: p.predicted_label(),
                });
            }
        }
        SimulatabilityTask { seed: 0, items }
    }

    fn answer(task: &SimulatabilityTask, correct: impl Fn(&TaskItem) -> bool) -> SimulatabilityResponse {
        SimulatabilityResponse {
            guesses: task
                .items()
                .iter()
                .map(|i| Guess {
                    image_id: i.id,
                    label: if correct(i) {
                        i.model_prediction
                    } else {
                        i.model_prediction.flipped()
                    },
                })
                .collect(),
        }
    }

    #[test]
    fn all_correct_and_all_flipped() {
        let t = task();
        let best = score_simulatability(&t, &answer(&t, |_| true)).unwrap();
        assert_eq!(best.as_array(), [3, 3, 3, 3]);
        assert_eq!(best.resultant(), 12);
        let worst = score_simulatability(&t, &answer(&t, |_| false)).unwrap();
        assert_eq!(worst.as_array(), [0, 0, 0, 0]);
        assert_eq!(worst.resultant(), 0);
    }

    #[test]
    fn resultant_is_sum() {
        assert_eq!(LocalScores::new([2, 3, 1, 0]).unwrap().resultant(), 6);
        assert!(LocalScores::new([4, 0, 0, 0]).is_err());
    }

    #[test]
    fn scoring_ignores_response_order() {
        let t = task();
        let mut r = answer(&t, |i| i.id.0 % 2 == 0);
        let a = score_simulatability(&t, &r).unwrap();
        r.guesses.reverse();
        assert_eq!(score_simulatability(&t, &r).unwrap(), a);
    }

    #[test]
    fn malformed_responses() {
        let t = task();
        let mut r = answer(&t, |_| true);
        r.guesses.pop();
        assert_eq!(
            score_simulatability(&t, &r),
            Err(MentalModelError::MissingGuess(InstanceId(11)))
        );
        r.guesses.push(Guess {
            image_id: InstanceId(99),
            label: Label::Positive,
        });
        assert_eq!(
            score_simulatability(&t, &r),
            Err(MentalModelError::UnknownImageId(InstanceId(99)))
        );
        let mut r = answer(&t, |_| true);
        r.guesses.push(r.guesses[0]);
        assert!(matches!(
            score_simulatability(&t, &r),
            Err(MentalModelError::DuplicateGuess(_))
        ));
    }

    #[test]
    fn satisfaction_means() {
        let s = |items: Vec<u8>| score_satisfaction(&SatisfactionResponse { items });
        assert_eq!(s(vec![5; 8]).unwrap(), 5.0);
        assert_eq!(s(vec![1; 8]).unwrap(), 1.0);
        assert_eq!(s(vec![1, 2, 3, 4, 5, 5, 4, 4]).unwrap(), 3.5);
        assert!(matches!(
            s(vec![0; 8]),
            Err(MentalModelError::OutOfRangeItem { index: 0, value: 0 })
        ));
        assert!(matches!(s(vec![3; 7]), Err(MentalModelError::WrongItemCount { .. })));
    }

    #[test]
    fn state_transitions() {
        let locals = LocalScores::new([1, 2, 0, 3]).unwrap();
        let s0 = MentalModelState::default();
        let s1 = update_state(&s0, None, None, locals).unwrap();
        assert_eq!(s1.local_sim, Some(locals));
        assert_eq!(s1.iteration_index, Some(0));
        assert!(s1.satisfaction_history.saliency.is_empty());
        assert!(s1.satisfaction_history.prototype.is_empty());

        let s2 = update_state(&s1, Some(ExplainerKind::Prototype), Some(4.0), locals).unwrap();
        assert_eq!(s2.satisfaction_history.prototype, vec![4.0]);
        assert_eq!(s2.iteration_index, Some(1));

        assert_eq!(
            update_state(&s1, None, Some(4.0), locals),
            Err(MentalModelError::SatWithoutExplanation)
        );
    }

    #[test]
    fn local_scores_json_shape() {
        let s = LocalScores::new([2, 3, 1, 0]).unwrap();
        let j = serde_json::to_string(&s).unwrap();
        assert_eq!(j, r#"{"tp":2,"tn":3,"fp":1,"fn":0,"resultant":6}"#);
        assert_eq!(serde_json::from_str::<LocalScores>(&j).unwrap(), s);
        assert!(serde_json::from_str::<LocalScores>(r#"{"tp":2,"tn":3,"fp":1,"fn":0,"resultant":7}"#).is_err());
    }
}
