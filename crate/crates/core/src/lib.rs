//! Acoustic direction-of-arrival estimation by segmenting beamformed
//! spectral maps on a polar disk.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision used by the pipeline.

// `!(x > 0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analyzer;
pub mod beamformer;
pub mod config;
pub mod error;
pub mod eval;
pub mod features;
pub mod fracdelay;
pub mod geometry;
pub mod labeling;
pub mod pipeline;
pub mod postprocess;
pub mod scalar;
pub mod simulator;
pub mod storage;
pub mod unet;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Samples per analysis frame (100 ms).
pub const FRAME_LEN: usize = 4800;
/// The only sample rate the pipeline accepts.
pub const SAMPLE_RATE_HZ: u32 = 48_000;

pub type Real = f32;
pub type Geometry = geometry::MicArrayGeometry<Real>;
pub type Direction = geometry::SteeringDirection<Real>;
pub type Trajectory = simulator::SourceTrajectory<Real>;
pub type Recording = simulator::MultichannelRecording<Real>;
pub type Snapshot = beamformer::SnapshotTensor<Real>;
pub type Energy = beamformer::EnergyMap<Real>;
pub type Spectral = features::SpectralMap<Real>;
pub type Polar = features::PolarImage<Real>;
pub type Truth = labeling::GroundTruthFrame<Real>;
pub type Probability = unet::ProbabilityMask<Real>;
pub type Estimate = postprocess::DoAEstimate<Real>;
