//! Unlabeled-data selection and semi-supervised training for joint intent
//! classification and BIO slot tagging.
//!
//! The crate is organised along the pipeline: [`corpus`] holds datasets,
//! [`features`] the n-gram space, [`neural`] the BiLSTM-CRF multi-task model,
//! [`selection`] the domain filter and the submodular/committee selectors,
//! [`ssl`] the trainers, [`eval`] metrics and reports, and [`pipeline`] the
//! end-to-end runner.

pub mod corpus;
pub mod error;
pub mod eval;
pub mod features;
pub mod neural;
pub mod pipeline;
pub mod selection;
pub mod ssl;

pub use error::{Error, Result};
