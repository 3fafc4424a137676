//! Desk-scale laboratory for length generalization in arithmetic.
//!
//! The crate is organized around three layers:
//!
//! * exact digit arithmetic and the parallel carry-handle reference
//!   algorithms ([`digits`], [`complexity`]);
//! * tokenized dataset construction and a toy encoder-only transformer
//!   with pluggable positional encodings ([`datagen`], [`posenc`],
//!   [`model`]);
//! * a numerical simulator of linear-attention training dynamics under
//!   APE / APE+augmentation / RPE ([`theory`]).
//!
//! The [`harness`] module ties these into reproducible experiments with
//! CSV artifact export.

pub mod complexity;
pub mod datagen;
pub mod digits;
pub mod error;
pub mod harness;
pub mod model;
pub mod posenc;
pub mod theory;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
