//! Maximum-likelihood semi-supervised estimation of Gaussian mixture
//! classifiers when the label-missingness mechanism is informative.
//!
//! The crate is organised bottom-up:
//!
//! * [`mixture`] holds the Gaussian mixture primitives (densities,
//!   posterior class probabilities, entropy, the two-class discriminant).
//! * [`data`] holds partially labelled datasets.
//! * [`mechanism`] models the missing-label indicator (MCAR, entropy-driven
//!   MAR and class-dependent MNAR).
//! * [`coords`] maps mixture parameters to unconstrained coordinates.
//! * [`em`] evaluates likelihoods and fits the mixture, with or without the
//!   missingness model.
//! * [`fisher`] estimates Fisher-information components by Monte Carlo.
//! * [`sim`] generates synthetic data and runs paired classifier experiments.

pub mod coords;
pub mod data;
pub mod em;
mod error;
pub mod fisher;
pub mod mechanism;
pub mod mixture;
pub mod rng;
pub mod sim;

pub use crate::data::{Observation, PartialDataset};
pub use crate::em::{FitOptions, FitResult, InitStrategy};
pub use crate::error::{Error, Result};
pub use crate::mechanism::{MechanismFamily, MechanismSpec};
pub use crate::mixture::{MixtureParams, PosteriorRow};
