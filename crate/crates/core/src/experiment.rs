//! Everything shared by all sessions of one experiment: the explanation pool,
//! its categorization, the catalog, the task and the baseline examples.

use std::collections::HashSet;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::blackbox::{categorize, BlackboxError, CategorizedTestSet, NetworkParams, Possibility};
use crate::dataset::{InstanceId, Label, LabeledDataset, TaskPreset};
use crate::explainers::{build_catalog, CatalogConfig, ExplainError, ExplanationCatalog};
use crate::mental_model::{build_simulatability_task, MentalModelError, SimulatabilityTask};
use crate::policies::{PolicyConfig, PolicyError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("no correctly classified image of label {0} outside the task and catalog")]
    NoEligibleExampleImage(Label),
    #[error("catalog references instance {0}, which is not in the categorized pool")]
    CatalogMismatch(InstanceId),
    #[error(transparent)]
    Blackbox(#[from] BlackboxError),
    #[error(transparent)]
    Explain(#[from] ExplainError),
    #[error(transparent)]
    Task(#[from] MentalModelError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub preset: TaskPreset,
    pub seed: u64,
    pub pool: LabeledDataset,
    pub cats: CategorizedTestSet,
    pub catalog: ExplanationCatalog,
    pub task: SimulatabilityTask,
    /// One example per class, negative first; shown with their true labels.
    pub baseline_examples: [InstanceId; 2],
    pub policy_config: PolicyConfig,
}

impl Experiment {
    /// Categorize `pool`, build the catalog, then assemble.
    pub fn build(
        params: &NetworkParams,
        pool: LabeledDataset,
        preset: TaskPreset,
        seed: u64,
        catalog_config: CatalogConfig,
    ) -> Result<Self, ExperimentError> {
        let cats = categorize(params, &pool)?;
        let catalog = build_catalog(params, &cats, &pool, seed, catalog_config)?;
        Self::assemble(preset, pool, cats, catalog, seed)
    }

    /// Combine a precomputed categorization and catalog with a fresh task and
    /// baseline examples, all drawn from `seed`.
    pub fn assemble(
        preset: TaskPreset,
        pool: LabeledDataset,
        cats: CategorizedTestSet,
        catalog: ExplanationCatalog,
        seed: u64,
    ) -> Result<Self, ExperimentError> {
        catalog.validate()?;
        for id in catalog.display_instances() {
            if cats.possibility_of(id).is_none() {
                return Err(ExperimentError::CatalogMismatch(id));
            }
        }
        let task = build_simulatability_task(&cats, &catalog, seed)?;
        let baseline_examples = draw_baseline_examples(&cats, &catalog, &task, seed)?;
        let policy_config = PolicyConfig {
            seed,
            ..PolicyConfig::default()
        };
        policy_config.validate()?;
        Ok(Self {
            preset,
            seed,
            pool,
            cats,
            catalog,
            task,
            baseline_examples,
            policy_config,
        })
    }
}

/// A correctly classified instance per class (TN for label 0, TP for label 1),
/// outside the task and every explanation.
fn draw_baseline_examples(
    cats: &CategorizedTestSet,
    catalog: &ExplanationCatalog,
    task: &SimulatabilityTask,
    seed: u64,
) -> Result<[InstanceId; 2], ExperimentError> {
    let used: HashSet<InstanceId> = catalog.display_instances().chain(task.image_ids()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let mut draw = |p: Possibility| {
        let eligible: Vec<InstanceId> = cats
            .list(p)
            .iter()
            .map(|e| e.id)
            .filter(|id| !used.contains(id))
            .collect();
        eligible
            .choose(&mut rng)
            .copied()
            .ok_or(ExperimentError::NoEligibleExampleImage(p.true_label()))
    };
    Ok([draw(Possibility::Tn)?, draw(Possibility::Tp)?])
}
