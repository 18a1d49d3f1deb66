//! Generator-matching laboratory: noise schedules, Markov generators,
//! analytic Gaussian-mixture paths, reverse-time samplers, forward-equation
//! checks, discrete jump processes and conditional generator matching.

pub mod analytic;
pub mod data;
pub mod discrete;
pub mod error;
pub mod generator;
pub mod kfe;
pub mod numerics;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod sensitivity;
pub mod stats;
pub mod train;

pub use analytic::{GaussianMixture, GaussianPath, MarginalLaw, MixtureComponent};
pub use data::{DataSource, DatasetSpec};
pub use discrete::{DiscreteDistribution, Kappa, MixturePath, RateMatrix, Scheme};
pub use error::{Error, Result};
pub use generator::{ContinuousGenerator, Generator, TestFunction};
pub use kfe::{DensityGrid, KfeReport};
pub use sampler::{FieldSource, OracleField, Sampler, SamplerConfig, StepKind, Trajectory};
pub use schedule::{DiffusionSchedule, NoiseSchedule, ScheduleSpec, StochasticityLevel};
pub use sensitivity::{SensitivityConfig, SensitivityReport};
pub use train::{BregmanDivergence, Mlp, ModelField, TargetHead, TrainConfig, TrainReport};

/// Version recorded in every run directory.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
