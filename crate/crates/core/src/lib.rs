//! Trackerless freehand ultrasound: estimate the rigid transforms between
//! ultrasound frames from image content alone, chain them into a scan
//! trajectory and measure how far the reconstruction drifts.
//!
//! * [`geometry`] rigid transforms, 6-DoF poses and corner points.
//! * [`simulator`] synthetic sweeps through procedural volumes with exact
//!   ground-truth poses.
//! * [`sampling`] sequences and the main/auxiliary task pairs.
//! * [`model`] feed-forward and recurrent predictors with exact gradients,
//!   Adam and the training loop.
//! * [`losses`] multi-task, consistency and accumulated corner-point losses.
//! * [`reconstruct`] and [`metrics`] for chaining predictions and scoring
//!   them.
//! * [`dataio`] on-disk formats.
//!
//! Data-parallel loops go through [`Execution`]; with the `parallel` feature
//! disabled every strategy runs sequentially. Results are bit-identical
//! either way.

pub mod dataio;
pub mod exec;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod reconstruct;
pub mod sampling;
pub mod seed;
pub mod simulator;

pub use exec::Execution;

use thiserror::Error;

/// Union of the module errors, for callers that drive whole pipelines.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Geometry(#[from] geometry::GeometryError),
    #[error(transparent)]
    Data(#[from] dataio::DataError),
    #[error(transparent)]
    Simulation(#[from] simulator::SimError),
    #[error(transparent)]
    Sampling(#[from] sampling::SamplingError),
    #[error(transparent)]
    Loss(#[from] losses::LossError),
    #[error(transparent)]
    Model(#[from] model::ModelError),
    #[error(transparent)]
    Reconstruct(#[from] reconstruct::ReconstructError),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
}
