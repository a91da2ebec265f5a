//! The black-box classifier, its trainer, and the partition of test instances
//! into the four classification possibilities.

pub mod checkpoint;
mod network;
mod train;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use network::{
    forward_logit, forward_trace, sigmoid, ActivationTrace, BatchNorm, ConvBlock, FeatureMap, LayerTrace,
    NetworkParams, CONV1_CHANNELS, CONV2_CHANNELS, HEAD_INPUTS, KERNEL, TENSOR_NAMES, TRAINABLE,
};
pub use train::{
    activation_pattern, batch_loss, batch_loss_and_gradients, train, train_with_history, Gradients, TrainConfig,
};

use crate::dataset::{ImageInstance, InstanceId, Label, LabeledDataset};

#[derive(Debug, Error)]
pub enum BlackboxError {
    #[error("training set is empty")]
    EmptyTrainSet,
    #[error("training set contains a single class")]
    SingleClassTrainSet,
    #[error("loss diverged (non-finite) in epoch {epoch}")]
    DivergedLoss { epoch: usize },
    #[error("non-finite activation in {0} layer")]
    NonFiniteActivation(&'static str),
    #[error("invalid network parameters: {0}")]
    InvalidParams(String),
    #[error("test set is empty")]
    EmptyTestSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub probability: f64,
    pub logit: f64,
    pub predicted_label: Label,
}

impl Prediction {
    pub fn from_logit(logit: f64) -> Self {
        Self {
            probability: sigmoid(logit),
            logit,
            predicted_label: if logit > 0.0 { Label::Positive } else { Label::Negative },
        }
    }
}

/// Anything that can label an image. [`NetworkParams`] is the real model;
/// tests substitute fixed-logit stubs.
pub trait Classifier {
    fn predict(&self, image: &ImageInstance) -> Result<Prediction, BlackboxError>;
}

impl Classifier for NetworkParams {
    fn predict(&self, image: &ImageInstance) -> Result<Prediction, BlackboxError> {
        forward_logit(self, &image.pixels).map(Prediction::from_logit)
    }
}

pub fn predict(params: &NetworkParams, image: &ImageInstance) -> Result<Prediction, BlackboxError> {
    params.predict(image)
}

pub fn accuracy<C: Classifier>(model: &C, data: &LabeledDataset) -> Result<f64, BlackboxError> {
    if data.is_empty() {
        return Err(BlackboxError::EmptyTestSet);
    }
    let mut correct = 0usize;
    for inst in data.instances() {
        if model.predict(inst)?.predicted_label == inst.label() {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Cross of true label and predicted label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Possibility {
    Tp,
    Tn,
    Fp,
    Fn,
}

impl Possibility {
    pub const ALL: [Possibility; 4] = [Possibility::Tp, Possibility::Tn, Possibility::Fp, Possibility::Fn];

    pub fn of(true_label: Label, predicted: Label) -> Self {
        match (true_label, predicted) {
            (Label::Positive, Label::Positive) => Possibility::Tp,
            (Label::Negative, Label::Negative) => Possibility::Tn,
            (Label::Negative, Label::Positive) => Possibility::Fp,
            (Label::Positive, Label::Negative) => Possibility::Fn,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_correct(self) -> bool {
        matches!(self, Possibility::Tp | Possibility::Tn)
    }

    pub fn true_label(self) -> Label {
        match self {
            Possibility::Tp | Possibility::Fn => Label::Positive,
            Possibility::Tn | Possibility::Fp => Label::Negative,
        }
    }

    pub fn predicted_label(self) -> Label {
        match self {
            Possibility::Tp | Possibility::Fp => Label::Positive,
            Possibility::Tn | Possibility::Fn => Label::Negative,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Possibility::Tp => "tp",
            Possibility::Tn => "tn",
            Possibility::Fp => "fp",
            Possibility::Fn => "fn",
        }
    }
}

impl fmt::Display for Possibility {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Possibility {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Possibility::ALL
            .into_iter()
            .find(|p| p.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown classification possibility '{s}'"))
    }
}

/// Four-element array indexed by [`Possibility`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PerPossibility<T>(pub [T; 4]);

impl<T> PerPossibility<T> {
    pub fn get(&self, p: Possibility) -> &T {
        &self.0[p.index()]
    }

    pub fn get_mut(&mut self, p: Possibility) -> &mut T {
        &mut self.0[p.index()]
    }

    pub fn iter(&self) -> impl Iterator<Item = (Possibility, &T)> {
        Possibility::ALL.into_iter().zip(self.0.iter())
    }
}

impl<T: Copy> PerPossibility<T> {
    pub fn splat(v: T) -> Self {
        Self([v; 4])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorizedEntry {
    pub id: InstanceId,
    pub true_label: Label,
    pub prediction: Prediction,
}

impl CategorizedEntry {
    /// Ranking key: confidence for correct cells, error for incorrect cells.
    fn rank_score(&self, possibility: Possibility) -> f64 {
        let p = self.prediction.probability;
        if possibility.is_correct() {
            (p - 0.5).abs()
        } else {
            (p - f64::from(self.true_label.as_u8())).abs()
        }
    }
}

/// Test instances partitioned by classification possibility, each list ranked
/// best-representative first.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CategorizedTestSet {
    lists: PerPossibility<Vec<CategorizedEntry>>,
}

impl CategorizedTestSet {
    /// Build from precomputed predictions.
    pub fn from_predictions(entries: impl IntoIterator<Item = CategorizedEntry>) -> Self {
        let mut lists: PerPossibility<Vec<CategorizedEntry>> = PerPossibility::default();
        for e in entries {
            let cell = Possibility::of(e.true_label, e.prediction.predicted_label);
            lists.get_mut(cell).push(e);
        }
        for p in Possibility::ALL {
            lists
                .get_mut(p)
                .sort_by(|a, b| b.rank_score(p).total_cmp(&a.rank_score(p)).then(a.id.cmp(&b.id)));
        }
        Self { lists }
    }

    pub fn list(&self, p: Possibility) -> &[CategorizedEntry] {
        self.lists.get(p)
    }

    pub fn len(&self) -> usize {
        self.lists.0.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn possibility_of(&self, id: InstanceId) -> Option<Possibility> {
        self.entry(id).map(|(p, _)| p)
    }

    pub fn entry(&self, id: InstanceId) -> Option<(Possibility, &CategorizedEntry)> {
        self.lists
            .iter()
            .find_map(|(p, list)| list.iter().find(|e| e.id == id).map(|e| (p, e)))
    }
}

pub fn categorize<C: Classifier>(model: &C, test_set: &LabeledDataset) -> Result<CategorizedTestSet, BlackboxError> {
    if test_set.is_empty() {
        return Err(BlackboxError::EmptyTestSet);
    }
    let entries = test_set
        .instances()
        .iter()
        .map(|inst| {
            Ok(CategorizedEntry {
                id: inst.id,
                true_label: inst.label(),
                prediction: model.predict(inst)?,
            })
        })
        .collect::<Result<Vec<_>, BlackboxError>>()?;
    Ok(CategorizedTestSet::from_predictions(entries))
}
