//! Koopman reduced-order modeling of reaction-diffusion systems.
//!
//! The pipeline: finite-difference solvers generate snapshot corpora for the
//! Kuramoto-Sivashinsky and Gray-Scott equations; a convolutional autoencoder
//! plus an auxiliary network that emits a state-dependent Koopman matrix is
//! trained adversarially (Wasserstein critic with gradient penalty) on
//! snapshot sequences; the trained model is then used for long-horizon
//! rollout prediction, imputation of missing snapshots, and latent-space
//! control.

pub mod adam;
pub mod checkpoint;
pub mod control;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod koopman;
pub mod networks;
pub mod rng;
pub mod solvers;
pub mod training;

pub use error::{Error, Result};
