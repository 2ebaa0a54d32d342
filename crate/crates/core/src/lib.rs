//! Longitudinal image alignment and censored time-to-event risk prediction.
//!
//! The crate covers the full desk-scale pipeline: dense deformation fields
//! and bilinear warping ([`grid`]), similarity and deformation-quality
//! measures ([`metrics`]), per-pair affine plus coarse-to-fine registration
//! ([`registrar`]), the cumulative-hazard risk model and its building blocks
//! ([`risk`]), the six alignment strategies ([`pipelines`]), survival
//! evaluation ([`eval`]) and the synthetic-cohort experiment harness
//! ([`harness`]).

pub mod autodiff;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod grid;
pub mod harness;
pub mod io;
pub mod metrics;
pub mod optim;
pub mod pipelines;
pub mod registrar;
pub mod risk;

pub use error::{Error, Result};
