//! Iterative bias-aware dataset refinement.
//!
//! A shallow classifier scores how strongly each sample relies on biased
//! surface features; samples are grouped into bias indicators; a generator
//! conditioned on (indicator, label) is finetuned on the pool and sampled
//! from low-bias indicators; filtered candidates grow the pool over several
//! iterations, and a task model is finally retrained on the refined pool.

pub mod backend;
pub mod config;
pub mod error;
pub mod eval;
pub mod filter;
pub mod generator;
pub mod indicators;
pub mod orchestrator;
pub mod pool;
pub mod rng;
pub mod scorer;
pub mod testbed;

pub use backend::{ClassifierBackend, LinearBow};
pub use config::{load_config, RunConfig};
pub use error::{Error, Result};
pub use eval::{evaluate, retrain_task_model, Dataset, EvalReport};
pub use generator::{GeneratorBackend, LogLinearLm};
pub use indicators::BiasIndicator;
pub use orchestrator::{run, IterationRecord, RunReport, RunState};
pub use pool::{init_pool, Origin, Sample, SamplePool, TaskDescriptor};
pub use testbed::{build_synthetic_testbed, SyntheticBiasSpec};
