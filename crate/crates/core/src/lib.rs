//! Order-preserving consistency regularization at desk scale.

pub mod augment;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod harness;
pub mod nets;
pub mod ocr;

pub use augment::{AugmentConfig, Image};
pub use autodiff::{grad_check, Tensor};
pub use checkpoint::Checkpoint;
pub use data::{CorruptionKind, CorruptionSpec, DomainDataset, DomainSpec};
pub use error::{Error, Result};
pub use harness::{AttackConfig, AttackMethod, ExperimentConfig, MetricsRow, TtaConfig, TtaMethod};
pub use nets::{Model, OptimizerState};
pub use ocr::{ConsistencyKind, ConsistencyMethod, LambdaSchedule, ScheduleStrategy};
