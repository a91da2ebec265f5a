//! Sequential explanation selection driven by an explainee's mental model.

pub mod analysis;
pub mod blackbox;
pub mod dataset;
pub mod experiment;
pub mod explainers;
pub mod mental_model;
pub mod policies;
pub mod session;
pub mod simulee;
