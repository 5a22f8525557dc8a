//! Training per-slot classifiers from noisy labels by combining the provided
//! ("vanilla") labels with auxiliary-model pseudo labels.
//!
//! The combination weight can be a fixed constant shared by every slot and
//! sample (the ASSIST baseline) or a learnable function trained by bilevel
//! meta-optimization on a clean validation set (the MetaASSIST schemes S1,
//! S2, S3). The crate also ships the oracle tooling used to validate the
//! approach: an approximation-error functional with shared/slot-wise optimal
//! weight searches, and finite-difference checks for every analytic gradient.

pub mod cli;
pub mod data;
pub mod error;
pub mod models;
pub mod oracle;
pub mod trainer;
pub mod weighting;

pub use error::{Error, Result};
