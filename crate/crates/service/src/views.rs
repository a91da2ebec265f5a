//! Participant-facing payloads. Nothing here carries a task image's label,
//! the model's predictions, a possibility name or a simulatability score.

use serde::{Deserialize, Serialize};

use seqex_core::dataset::{ImageInstance, InstanceId, Label, LabeledDataset, IMAGE_SIDE};
use seqex_core::experiment::Experiment;
use seqex_core::explainers::{ExplainerKind, Explanation, Payload};
use seqex_core::mental_model::{Guess, LIKERT_MAX, LIKERT_MIN, SATISFACTION_ITEMS};
use seqex_core::policies::PolicyKind;
use seqex_core::session::{Phase, SessionRecord};

/// 28 rows of 28 gray values, 0 (black) to 255 (white).
pub type Grid<T> = Vec<Vec<T>>;

fn grid<T: Copy>(flat: &[T]) -> Grid<T> {
    flat.chunks(IMAGE_SIDE).map(<[T]>::to_vec).collect()
}

fn gray(inst: &ImageInstance) -> Grid<u8> {
    let bytes: Vec<u8> = inst
        .pixels
        .iter()
        .map(|p| (p * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    grid(&bytes)
}

fn instance(pool: &LabeledDataset, id: InstanceId) -> &ImageInstance {
    pool.get(id).expect("experiment ids come from its pool")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskImage {
    pub image_id: InstanceId,
    pub pixels: Grid<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleImage {
    pub image_id: InstanceId,
    /// Binary label: 0 for the first class, 1 for the second.
    pub label: Label,
    pub pixels: Grid<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainedImage {
    pub image_id: InstanceId,
    pub pixels: Grid<u8>,
    /// Saliency explanations only: non-negative relevance per pixel.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub relevance: Option<Grid<f64>>,
    /// Prototype explanations only: importance weight.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weight: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationView {
    pub kind: ExplainerKind,
    pub images: Vec<ExplainedImage>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SatisfactionForm {
    pub items: usize,
    pub min: u8,
    pub max: u8,
}

pub const SATISFACTION_FORM: SatisfactionForm = SatisfactionForm {
    items: SATISFACTION_ITEMS,
    min: LIKERT_MIN,
    max: LIKERT_MAX,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "phase", rename_all = "snake_case")]
pub enum Step {
    AwaitingBaseline {
        baseline_examples: Vec<ExampleImage>,
        task: Vec<TaskImage>,
    },
    AwaitingIteration {
        t: u8,
        explanation: ExplanationView,
        satisfaction: SatisfactionForm,
        task: Vec<TaskImage>,
    },
    Complete {
        rewards: Vec<u8>,
        relative_rewards: Vec<i32>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Created {
    pub session_id: String,
    pub policy: PolicyKind,
    pub phase: String,
    pub baseline_examples: Vec<ExampleImage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub session_id: String,
    pub phase: String,
    /// Next iteration to run, absent once complete.
    pub t: Option<u8>,
    pub completed_iterations: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StartBody {
    pub policy: String,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResponseBody {
    #[serde(default)]
    pub satisfaction: Option<Vec<u8>>,
    pub guesses: Vec<Guess>,
}

pub fn baseline_examples(exp: &Experiment, record: &SessionRecord) -> Vec<ExampleImage> {
    record
        .baseline
        .example_images
        .iter()
        .map(|&id| {
            let inst = instance(&exp.pool, id);
            ExampleImage {
                image_id: id,
                label: inst.label(),
                pixels: gray(inst),
            }
        })
        .collect()
}

pub fn task_images(exp: &Experiment) -> Vec<TaskImage> {
    exp.task
        .image_ids()
        .into_iter()
        .map(|id| TaskImage {
            image_id: id,
            pixels: gray(instance(&exp.pool, id)),
        })
        .collect()
}

pub fn explanation(exp: &Experiment, e: &Explanation) -> ExplanationView {
    let images = e
        .instances
        .iter()
        .enumerate()
        .map(|(i, &id)| {
            let (relevance, weight) = match &e.payload {
                Payload::Saliency { maps } => (Some(grid(&maps[i].relevance)), None),
                Payload::Prototype { set } => (None, Some(set.members[i].weight)),
            };
            ExplainedImage {
                image_id: id,
                pixels: gray(instance(&exp.pool, id)),
                relevance,
                weight,
            }
        })
        .collect();
    ExplanationView { kind: e.kind, images }
}

pub fn progress(record: &SessionRecord) -> Progress {
    Progress {
        session_id: record.session_id.clone(),
        phase: record.phase.name().to_string(),
        t: match record.phase {
            Phase::AwaitingBaseline => Some(0),
            Phase::AwaitingIteration(t) => Some(t),
            Phase::Complete => None,
        },
        completed_iterations: record.iterations.len(),
    }
}
