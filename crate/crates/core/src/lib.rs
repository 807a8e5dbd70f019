//! Identification and inference for bunching designs.
//!
//! The crate is organised around the steps of a bunching analysis:
//!
//! * [`model`]: structural models linking heterogeneity to counterfactual and
//!   actual choices, the reversion map and the notch extension.
//! * [`sample`]: counterfactual correction of observed data under a
//!   hypothesised structural parameter.
//! * [`basis`] and [`sieve`]: polynomial sieve estimation of weighted
//!   counterfactual densities from the censored sample.
//! * [`inference`]: bias-aware tests, confidence sets, joint Wald tests and
//!   smoothness calibration.
//! * [`partialid`]: envelope bounds and the moment-inequality QLR test.
//! * [`pe_baseline`]: the binned polynomial estimator with iterative
//!   proportional adjustment and its IV form.
//! * [`dgp`]: simulation designs and the Monte Carlo harness.
//! * [`io`]: microdata and histogram readers.

pub mod basis;
pub mod dgp;
pub mod error;
pub mod inference;
pub mod io;
pub mod linalg;
pub mod model;
pub mod partialid;
pub mod pe_baseline;
pub mod poly;
pub mod sample;
pub mod sieve;

pub use error::{BunchingError, Result};
pub use model::{PolicySpec, Regime, StructuralModel};
pub use sample::{EstimationSample, Observation, WeightFn};
