//! Local explainers and the fixed catalog of eight explanations.

mod catalog;
pub mod protodash;
pub mod relevance;

use thiserror::Error;

use crate::blackbox::{BlackboxError, Possibility};
use crate::dataset::InstanceId;

pub use catalog::{
    build_catalog, catalog_index, saliency_for, select_representatives, CatalogConfig, ExplainerKind, Explanation,
    ExplanationCatalog, Payload, PrototypeSelection, CATALOG_SIZE, INSTANCES_PER_EXPLANATION,
};
pub use protodash::{protodash, Bandwidth, FitConfig, PrototypeMember, PrototypeSet};
pub use relevance::{deep_taylor, SaliencyMap};

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("{possibility} has {available} instances, need {requested}")]
    InsufficientInstances {
        possibility: Possibility,
        available: usize,
        requested: usize,
    },
    #[error("logit is exactly zero; nothing to explain")]
    ZeroRootRelevance,
    #[error("malformed activation trace: {0}")]
    MalformedTrace(String),
    #[error("kernel bandwidth must be positive and finite, got {0}")]
    InvalidBandwidth(f64),
    #[error("targets and candidates must be non-empty")]
    EmptyInput,
    #[error("cannot pick {requested} prototypes from {candidates} candidates")]
    TooManyPrototypes { requested: usize, candidates: usize },
    #[error("instance {0} not in dataset")]
    UnknownInstance(InstanceId),
    #[error("invalid catalog: {0}")]
    InvalidCatalog(String),
    #[error(transparent)]
    Blackbox(#[from] BlackboxError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
