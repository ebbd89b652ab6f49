//! State-space models with ordinal (graded-response) measurements.
//!
//! The crate covers data generation, bootstrap particle filtering, maximum
//! likelihood estimation by iterated filtering (MIF2), slice-likelihood
//! standard errors and a simulation-study driver comparing graded-response
//! and linear measurement models.

pub mod error;
pub mod filtering;
pub mod inference;
pub mod io;
pub mod measurement;
pub mod mif2;
pub mod model;
pub mod rng;
pub mod simulate;
pub mod study;

pub use error::{Error, Result};
pub use filtering::{kalman_filter, particle_filter, FilterOptions, FilterOutput, ResamplingScheme};
pub use inference::{slice_se, wald_ci, SliceConfig, SliceSEResult};
pub use measurement::{GradedResponseItem, LinearGaussianMeasurement, MeasurementModel, Observations};
pub use mif2::{fit, mif2_run, FitResult, Mif2Config, ModelKind, ModelLayout, ModelParameters};
pub use model::{solve_identification, DynamicsSpec, StatePath};
pub use simulate::{simulate_dataset, simulate_model, SimulatedDataset, SimulationRecipe, ThresholdMode};
pub use study::{run_study, spearman, StudyCondition, StudyConfig, StudyReport};
