//! Adapter-in-adapter continual learning over synthetic modalities.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense tensors, reverse-mode autodiff, AdamW, seeded init.
//! * [`backbone`]: frozen encoders, the miniature query transformer, query banks.
//! * [`ana`]: uni-modal adapters, in-adapters, gating, path expansion and switching.
//! * [`bench`]: the seeded synthetic multi-modality benchmark.
//! * [`trainer`]: stage-wise training for the adapter method and the baselines.
//! * [`metrics`]: forgetting/transfer metrics over a score matrix and report rendering.
//! * [`checkpoint`], [`config`]: on-disk formats shared with the CLI.

pub mod tensor;
pub mod backbone;
pub mod ana;
pub mod bench;
pub mod trainer;
pub mod metrics;
pub mod checkpoint;
pub mod config;
mod error;

pub use ana::{AdapterStack, GatingModule, InAdapter, InferenceConfig, ModalityPath, UniAdapter};
pub use backbone::{BackboneConfig, FrozenCore, ModalityEncoder, QueryBank, SiteId, SiteKind};
pub use bench::{Benchmark, Dataset, Domain, SyntheticModalitySpec};
pub use error::{Error, Result};
pub use metrics::{DomainFilter, MetricReport, ScoreMatrix};
pub use tensor::{Tensor, TensorError};
pub use trainer::{Method, MethodConfig, StageTrainConfig, TrainPlan};
pub use ana::{AnaConfig, PathOptions};
pub use config::ExperimentConfig;
