//! Behavioral-field engine.
//!
//! Per-agent micro-signals become an interaction matrix, nine collective
//! fields, a state vector, a spectral stability margin and a criticality
//! index, in that order. The scenario module forecasts each candidate
//! intervention with a stochastic surrogate and ranks them by expected cost.
//!
//! The numeric core is generic over [`scalar::Real`] (`f32` or `f64`); the
//! aliases below fix it to `f64`.

// NaN must fail validation, hence `!(x > 0)` rather than `x <= 0`
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity)]

pub mod chain;
pub mod criticality;
pub mod fields;
pub mod graph;
pub mod ingest;
pub mod model;
pub mod pipeline;
pub mod scalar;
pub mod scenario;
pub mod spectral;
pub mod synthetic;

pub use scalar::Real;

pub type AgentMicroState = model::AgentMicroState<f64>;
pub type MicroStateFrame = model::MicroStateFrame<f64>;
pub type ValidatedFrame = model::ValidatedFrame<f64>;
pub type Scene = model::Scene<f64>;
pub type CalibrationProfile = model::CalibrationProfile<f64>;
pub type InteractionMatrix = graph::InteractionMatrix<f64>;
pub type FieldFrame = fields::FieldFrame<f64>;
pub type StateVector = fields::StateVector<f64>;
pub type SpectralReport = spectral::SpectralReport<f64>;
pub type CriticalityReport = criticality::CriticalityReport<f64>;
pub type DangerSpec = criticality::DangerSpec<f64>;
pub type FrameBundle = pipeline::FrameBundle<f64>;
pub type Pipeline = pipeline::Pipeline<f64>;
