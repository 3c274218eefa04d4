//! Sensitivity analysis for sample average treatment effects in matched
//! observational studies.
//!
//! A matched design partitions the study units into strata, each containing
//! one treated unit and one or more controls. Inference proceeds under a
//! bounded-odds model for hidden bias indexed by a parameter `Γ ≥ 1`: units
//! in the same stratum may differ in their odds of receiving treatment by at
//! most `Γ`. This crate provides
//!
//! * the separable worst-case expectation/variance algorithm and the
//!   permutational-t sensitivity analysis built on it ([`separable`]),
//! * penalized stratum statistics whose worst-case expectations are
//!   controlled without assuming constant effects ([`weakstats`]),
//! * conservative hat-matrix standard errors ([`variance`]),
//! * assembled tests, changepoint search, and a biased-randomization
//!   reference distribution ([`inference`]),
//! * an exact worst-case bound over the weak null for binary outcomes via
//!   dynamic programming ([`binaryip`]),
//! * a Monte Carlo laboratory for operating-characteristic studies with
//!   worst-case hidden bias ([`simlab`]).

pub mod binaryip;
pub mod design;
mod error;
pub mod inference;
pub mod normal;
pub mod rng;
pub mod separable;
pub mod simlab;
pub mod variance;
pub mod weakstats;

pub use error::{Error, Result};
