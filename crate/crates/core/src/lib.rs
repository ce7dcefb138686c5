//! Context-cluster vision backbone.
//!
//! Images are treated as sets of 5-channel points (color plus normalized
//! position). Each block groups points around grid-proposed centers by cosine
//! similarity, aggregates every cluster into one feature, and dispatches it
//! back to the cluster members. Everything runs on a small reverse-mode
//! differentiation engine in [`engine`].

pub mod engine;
pub mod error;
pub mod points;
pub mod cluster;
pub mod model;
pub mod training;
pub mod viz;
pub mod gradcheck;

pub use error::{Error, Result};
