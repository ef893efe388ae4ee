//! Monte-Carlo toolkit for distribution-dependent SDEs
//!
//! ```text
//! dX_t = b_t(X_t, L(X_t)) dt + sigma_t(X_t) dW_t
//! ```
//!
//! with the measure entering the drift through `F_t(x, mu(h))`. The crate
//! simulates the decoupled equation, solves the self-consistent law flow, and
//! estimates the extrinsic (convex) derivative of `mu -> E f(X_t^mu)` through a
//! Bismut-type formula, with finite-difference and Girsanov cross-checks.
//!
//! All numerics are generic over [`Scalar`] (`f32` or `f64`); the aliases at the
//! crate root fix `f64`.

pub mod bismut;
pub mod error;
pub mod eta;
pub mod linalg;
pub mod mckean;
pub mod measures;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod sde;
pub mod stats;

pub use bismut::{
    extrinsic_derivative, extrinsic_derivative_with, finite_difference_derivative, finite_difference_derivative_with,
    girsanov_reweighted_mean, small_time_decay_probe, BismutRun, DecayProbe, DecayRow, DerivativeEstimate, EstimatorOptions,
    FiniteDifferenceResult, GirsanovWeight, QuotientEstimate,
};
pub use error::{Error, Result};
pub use eta::{
    correlation_ou_closed_form, eta_ou_closed_form, eta_residual, martingale_integral, martingale_integral_with, solve_eta,
    EtaOptions, EtaProcess, EtaResidual, MartingaleStats, MartingaleValues, PicardDiagnostics, ResidualPoint,
};
pub use mckean::{flow_distance, self_consistency, ConsistencyPoint, ConsistencyReport, MeasureFlow, particle_flow, particle_flow_with, picard_flow, FlowDistance, PicardOptions, PicardTrace};
pub use measures::{mix, moment, observable_mean, weighted_tv, MomentOrder, Observable, ParticleMeasure};
pub use model::{library, DriftModel, H2Probe, H2Report, HamiltonianModel};
pub use scalar::Scalar;
pub use sde::{
    euler_step, functional_mean, simulate_decoupled, simulate_decoupled_with, InitialCondition, PathEnsemble, Recording,
    TimeGrid,
};

pub type Measure = ParticleMeasure<f64>;
pub type Model = DriftModel<f64>;
pub type Flow = mckean::MeasureFlow<f64>;
pub type Ensemble = PathEnsemble<f64>;
pub type Eta = EtaProcess<f64>;

pub type Measure32 = ParticleMeasure<f32>;
pub type Model32 = DriftModel<f32>;
pub type Flow32 = mckean::MeasureFlow<f32>;
pub type Ensemble32 = PathEnsemble<f32>;
pub type Eta32 = EtaProcess<f32>;
