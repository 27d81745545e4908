//! Knowledge-constrained action-unit representation learning for facial
//! expression recognition, at desk scale.
//!
//! Expression labels are turned into pseudo AU labels through a learnable
//! expression/AU correlation matrix, per-AU features are weighted by a
//! low-rank bilinear attention head, and the expression classifier is trained
//! with AU co-occurrence hinge regularizers. A planted-structure synthetic
//! generator stands in for images and a face backbone.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod diffcore;
pub mod error;
pub mod knowledge;
pub mod losses;
pub mod model;
pub mod synthdata;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
