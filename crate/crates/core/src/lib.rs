//! Volumetric QCT analysis of lumbar vertebrae: coarse-to-fine segmentation
//! of the vertebral body, trabecular compartment extraction, a vertebral
//! coordinate system from four landmarks, and BMD statistics in VOIs.
//!
//! Stage order per level: constraints ([`presegment`]) → [`balloon`] →
//! [`classify`] → grow/close/pedicle cut/peel ([`morphops`]) → [`anatomy`] →
//! [`report`]. [`pipeline`] orchestrates it and [`phantom`] provides a
//! digital phantom with exact ground truth.

// `!(x > 0.0)` is how parameters reject NaN along with non-positive values
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// per-axis loops index several parallel arrays at once
#![allow(clippy::needless_range_loop)]
#![allow(clippy::large_enum_variant)]

pub mod anatomy;
pub mod balloon;
pub mod classify;
pub mod error;
pub mod geom;
pub mod morphops;
pub mod phantom;
pub mod pipeline;
pub mod presegment;
pub mod report;
pub mod volgrid;

pub use error::{Error, Result};
