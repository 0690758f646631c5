//! Transformer-based 2D-to-3D human pose lifting with graph priors.
//!
//! The model lifts a window of 2D joint detections to 3D by alternating
//! spatial (across joints) and temporal (across frames) attention, with two
//! learnable prior stages in front of the entry attention blocks:
//!
//! * a kinematics prior that modulates joint tokens through a skeleton
//!   affinity matrix, and
//! * a trajectory prior that modulates frame tokens through a temporal
//!   affinity matrix.
//!
//! Everything runs on an in-crate f64 tape autodiff engine ([`tape`]), so
//! the whole pipeline is deterministic and auditable at desk scale: small
//! windows, synthetic motion clips, finite-difference gradient checks.
//!
//! Module map:
//! * [`tensor`], [`tape`] — dense tensors and reverse-mode autodiff
//! * [`topology`] — skeleton graphs, local/global affinity combination
//! * [`prior`] — kinematics and trajectory prior attention
//! * [`transformer`] — multi-head self-attention and encoder blocks
//! * [`model`] — wiring modes, parameters, checkpoints, cost accounting
//! * [`training`] — losses, Adam, gradient audit, training loop
//! * [`evaluation`] — MPJPE family, Procrustes alignment, PCK/AUC
//! * [`clip`], [`config`], [`synth`] — file formats and synthetic mocap

pub mod clip;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod prior;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod topology;
pub mod training;
pub mod transformer;

#[cfg(test)]
pub(crate) mod testutil;
