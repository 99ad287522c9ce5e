//! Learning-time and forgetting-time dynamics of linear models on synthetic
//! group mixtures, plus the analyses built on them.

pub mod analysis;
pub mod datagen;
pub mod dynamics;
pub mod experiment;
pub mod models;
pub mod rng;
pub mod theory;

pub use datagen::{DatasetSpec, Example, GroupKind, Provenance, SpecConfig, Split};
pub use dynamics::{Epoch, MetricRecord};
pub use experiment::{ExperimentError, RunConfig, TheoryConfig};
pub use models::{LinearModel, Phase, PredictionHistory, TrainConfig};
