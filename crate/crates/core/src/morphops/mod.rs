//! Voxel morphology: distance transform, seeded growing, closing and hole
//! filling, ultimate erosion, SKIZ dissection of the pedicles, and peeling of
//! the trabecular compartment.
//!
//! Foreground is 6-connected and background 26-connected throughout.

pub mod edt;
mod erosion;
mod grow;
mod label;
mod pedicle;
mod peel;
mod skiz;

pub use edt::{edt, interior_distance, DistanceField};
pub use erosion::{ultimate_erode, Residuals};
pub use grow::{close_and_fill, closing, volume_grow};
pub use label::{components, enclosed_background, Connectivity};
pub use pedicle::{pedicle_cut, DissectionResult, PedicleParams};
pub use peel::trabecular_peel;
pub use skiz::{skiz_partition, Skiz, CONTACT};
