//! Neural-network solvers for partial differential equations built on a
//! from-scratch tensor autodiff engine:
//!
//! * [`pinn`] / [`rk`] — physics-informed networks trained on strong-form
//!   residuals at collocation points, in continuous time and as implicit
//!   Runge-Kutta steps, including parameter identification from noisy
//!   observations;
//! * [`feynman_kac`] — regression of conditional expectations of Ito
//!   diffusions for linear Kolmogorov equations in high dimension;
//! * [`deep_bsde`] — the backward-SDE solver for semilinear equations,
//!   learning the value and its gradient at a point.
//!
//! Supporting layers: [`tensor`] (dense arrays + GEMM), [`autodiff`]
//! (reverse-mode tape with replay), [`jet`] (forward-mode tangents of first
//! and second order), [`nn`] (perceptrons with batch normalisation),
//! [`optimize`] (Adam and learning-rate schedules), [`rng`] (counter-based
//! parallel random streams) and [`snapshot`] (parameter files).

pub mod autodiff;
pub mod deep_bsde;
pub mod feynman_kac;
pub mod gradcheck;
pub mod jet;
pub mod nn;
pub mod optimize;
pub mod pinn;
pub mod rk;
pub mod rng;
pub mod snapshot;
pub mod tensor;
pub mod train;

pub use autodiff::{Graph, LeafKind, Var};
pub use nn::{Activation, MlpParams, MlpSpec};
pub use optimize::{AdamState, LrSchedule};
pub use tensor::Tensor;
pub use train::{BoxDomain, EpochRecord, RunResult, RunStatus, TrainConfig};
