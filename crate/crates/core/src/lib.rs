//! Continual representation learning with flexible knowledge distillation.
//!
//! An embedding network is trained over a sequence of steps, each bringing
//! a disjoint set of identities. Old-model knowledge is carried forward by
//! distillation over a per-sample neighborhood of old classes with an
//! entropy-relaxed KL divergence. The crate also provides the baselines,
//! a synthetic identity benchmark generator, and retrieval/verification
//! evaluation on identities never seen in training.

pub mod benchgen;
pub mod distillation;
pub mod error;
pub mod eval;
pub mod numerics;
pub mod trainer;

pub use distillation::{DistillConfig, LossBundle, Method, Neighborhood};
pub use benchgen::{BenchParams, Benchmark, IdentitySample, StepDataset, TestSet};
pub use error::{CrlError, Result};
pub use eval::EvalReport;
pub use numerics::{Architecture, DenseTensor, GradientSet, ModelState, OptimizerConfig, OptimizerKind, OptimizerState};
pub use trainer::{RunMode, RunSpec, StepContext, TrainSchedule};
