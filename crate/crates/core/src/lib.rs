//! Modular bias mitigation for a small transformer classifier: a task
//! adapter and per-attribute debiasing adapters trained with gradient
//! reversal, combined on demand by an attention fusion layer.

pub mod adapters;
pub mod cli;
pub mod compute;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod inlp;
pub mod objectives;
pub mod persistence;
pub mod training;

pub use error::{DamError, Result};
