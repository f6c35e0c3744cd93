//! Control-augmented spectral submanifold (caSSM) reduced-order modeling and
//! reduced-order MPC on a synthetic tendon-driven chain plant, with oSSM and
//! Koopman/EDMD baselines.

pub mod baselines;
pub mod cassm;
pub mod control;
pub mod error;
pub mod experiment;
pub mod features;
pub mod linalg;
pub mod model;
pub mod pipeline;
pub mod plant;
pub mod serde_mat;

pub use error::{Error, Result};
