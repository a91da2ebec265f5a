use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::protodash::{self, Bandwidth, FitConfig, PrototypeSet};
use super::relevance::{deep_taylor, SaliencyMap};
use super::ExplainError;
use crate::blackbox::{forward_trace, CategorizedTestSet, NetworkParams, Possibility};
use crate::dataset::{InstanceId, LabeledDataset};

/// Instances shown per explanation.
pub const INSTANCES_PER_EXPLANATION: usize = 3;
pub const CATALOG_SIZE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExplainerKind {
    Saliency,
    Prototype,
}

impl ExplainerKind {
    pub const ALL: [ExplainerKind; 2] = [ExplainerKind::Saliency, ExplainerKind::Prototype];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for ExplainerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExplainerKind::Saliency => "saliency",
            ExplainerKind::Prototype => "prototype",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Payload {
    /// One map per displayed instance, same order.
    Saliency {
        maps: Vec<SaliencyMap>,
    },
    Prototype {
        set: PrototypeSet,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub explanation_id: u32,
    pub kind: ExplainerKind,
    pub possibility: Possibility,
    pub instances: Vec<InstanceId>,
    pub payload: Payload,
}

/// Catalog position of a (kind, possibility) pair.
pub fn catalog_index(kind: ExplainerKind, possibility: Possibility) -> usize {
    kind.index() * 4 + possibility.index()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrototypeSelection {
    /// Greedy ProtoDash over the whole possibility list.
    #[default]
    ProtoDash,
    /// Top-ranked representatives, weighted by the same kernel fit.
    Ranked,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CatalogConfig {
    pub prototype_selection: PrototypeSelection,
    pub bandwidth: Bandwidth,
    pub fit: FitConfig,
}

impl Default for CatalogConfig {
    fn default() -> Self {
        Self {
            prototype_selection: PrototypeSelection::ProtoDash,
            bandwidth: Bandwidth::MedianHeuristic,
            fit: FitConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationCatalog {
    pub seed: u64,
    pub config: CatalogConfig,
    pub explanations: Vec<Explanation>,
}

impl ExplanationCatalog {
    pub fn get(&self, kind: ExplainerKind, possibility: Possibility) -> &Explanation {
        &self.explanations[catalog_index(kind, possibility)]
    }

    pub fn by_id(&self, id: u32) -> Option<&Explanation> {
        self.explanations.iter().find(|e| e.explanation_id == id)
    }

    pub fn of_kind(&self, kind: ExplainerKind) -> impl Iterator<Item = &Explanation> {
        self.explanations.iter().filter(move |e| e.kind == kind)
    }

    /// Every instance id displayed by any explanation.
    pub fn display_instances(&self) -> impl Iterator<Item = InstanceId> + '_ {
        self.explanations.iter().flat_map(|e| e.instances.iter().copied())
    }

    /// Check size, fixed ordering and per-explanation shape.
    pub fn validate(&self) -> Result<(), ExplainError> {
        let bad = |m: String| Err(ExplainError::InvalidCatalog(m));
        if self.explanations.len() != CATALOG_SIZE {
            return bad(format!(
                "{} explanations, expected {CATALOG_SIZE}",
                self.explanations.len()
            ));
        }
        for (i, e) in self.explanations.iter().enumerate() {
            if e.explanation_id as usize != i || catalog_index(e.kind, e.possibility) != i {
                return bad(format!("explanation at position {i} is out of order"));
            }
            if e.instances.len() != INSTANCES_PER_EXPLANATION {
                return bad(format!("explanation {i} has {} instances", e.instances.len()));
            }
            let consistent = match (&e.payload, e.kind) {
                (Payload::Saliency { maps }, ExplainerKind::Saliency) => maps.len() == e.instances.len(),
                (Payload::Prototype { set }, ExplainerKind::Prototype) => {
                    set.members.iter().map(|m| m.id).eq(e.instances.iter().copied())
                }
                _ => false,
            };
            if !consistent {
                return bad(format!("explanation {i} payload does not match its kind or instances"));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("catalog serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, ExplainError> {
        let catalog: Self = serde_json::from_str(s)?;
        catalog.validate()?;
        Ok(catalog)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ExplainError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ExplainError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// First `k` ids of the ranked list for `possibility`.
pub fn select_representatives(
    cats: &CategorizedTestSet,
    possibility: Possibility,
    k: usize,
) -> Result<Vec<InstanceId>, ExplainError> {
    let list = cats.list(possibility);
    if list.len() < k {
        return Err(ExplainError::InsufficientInstances {
            possibility,
            available: list.len(),
            requested: k,
        });
    }
    Ok(list[..k].iter().map(|e| e.id).collect())
}

/// Saliency map for one instance; a zero logit yields the flagged zero map.
pub fn saliency_for(
    params: &NetworkParams,
    data: &LabeledDataset,
    id: InstanceId,
) -> Result<SaliencyMap, ExplainError> {
    let inst = data.get(id).ok_or(ExplainError::UnknownInstance(id))?;
    let trace = forward_trace(params, &inst.pixels)?;
    match deep_taylor(params, &trace) {
        Err(ExplainError::ZeroRootRelevance) => Ok(SaliencyMap::zero_root()),
        other => other,
    }
}

/// Build the 8 explanations in fixed order: saliency TP, TN, FP, FN, then
/// prototype TP, TN, FP, FN.
pub fn build_catalog(
    params: &NetworkParams,
    cats: &CategorizedTestSet,
    data: &LabeledDataset,
    seed: u64,
    config: CatalogConfig,
) -> Result<ExplanationCatalog, ExplainError> {
    let k = INSTANCES_PER_EXPLANATION;
    let mut explanations = Vec::with_capacity(CATALOG_SIZE);
    for p in Possibility::ALL {
        let ids = select_representatives(cats, p, k)?;
        let maps = ids
            .iter()
            .map(|&id| saliency_for(params, data, id))
            .collect::<Result<Vec<_>, _>>()?;
        explanations.push(Explanation {
            explanation_id: explanations.len() as u32,
            kind: ExplainerKind::Saliency,
            possibility: p,
            instances: ids,
            payload: Payload::Saliency { maps },
        });
    }
    for p in Possibility::ALL {
        let pool: Vec<InstanceId> = cats.list(p).iter().map(|e| e.id).collect();
        let set = match config.prototype_selection {
            PrototypeSelection::ProtoDash => {
                if pool.len() < k {
                    return Err(ExplainError::InsufficientInstances {
                        possibility: p,
                        available: pool.len(),
                        requested: k,
                    });
                }
                protodash::protodash(&pool, &pool, data, k, config.bandwidth, config.fit)?
            }
            PrototypeSelection::Ranked => {
                let ids = select_representatives(cats, p, k)?;
                protodash::weigh_fixed(&pool, &ids, data, config.bandwidth, config.fit)?
            }
        };
        explanations.push(Explanation {
            explanation_id: explanations.len() as u32,
            kind: ExplainerKind::Prototype,
            possibility: p,
            instances: set.members.iter().map(|m| m.id).collect(),
            payload: Payload::Prototype { set },
        });
    }
    let catalog = ExplanationCatalog {
        seed,
        config,
        explanations,
    };
    catalog.validate()?;
    Ok(catalog)
}
