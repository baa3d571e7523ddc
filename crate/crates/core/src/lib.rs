//! Allocation-only core of the structural health monitoring pipeline.
//!
//! - [`kinematics`]: inverted movement calculation for chains of rigid
//!   columns and its forward counterpart.
//! - [`model`]: structural models, bindings, thresholds and the resolved
//!   [`model::RuntimeConfig`].
//! - [`frame`]: time-aligned displacement frames, pose snapshots and
//!   threshold warnings.
//! - [`scenario`]: mock displacement generators for simulated devices.
//!
//! The crate is `no_std` and only needs `alloc`.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod frame;
pub mod kinematics;
pub mod model;
pub mod scenario;

pub use frame::{
    assemble_frame, compute_snapshot, evaluate_thresholds, Axis, DisplacementSample, FrameSnapshot,
    NodeDisplacementFrame, SampleBuffer, WarningEvent,
};
pub use kinematics::{
    center_pose, forward_column, safe_asin, solve_chain, solve_column, ColumnGeometry, ColumnPose,
    ColumnSolution, KinematicsError, Point3,
};
pub use model::{RuntimeConfig, SensorBinding, StructuralModel, ThresholdConfig};
pub use scenario::{scenario_sample, Scenario};
