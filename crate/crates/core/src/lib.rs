//! Condensa: desk-scale video class-incremental learning with condensed-frame
//! replay.
//!
//! Each stored exemplar video is condensed into a single learned frame — a
//! softmax-weighted sum over its frames plus a learnable pixel-space prompt —
//! and those frames are replayed with knowledge distillation across a
//! sequence of class-incremental tasks. Synthetic moving-shape videos stand
//! in for real datasets so the whole pipeline runs on a desk in minutes.

pub mod autodiff;
pub mod condenser;
pub mod datagen;
pub mod error;
pub mod experiment;
pub mod incremental;
pub mod memory;
pub mod model;

pub use autodiff::{finite_difference_check, FdReport, GradGraph, NodeId, Tensor};
pub use error::{Error, Result};
