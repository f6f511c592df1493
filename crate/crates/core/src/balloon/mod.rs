//! Explicit triangle-mesh balloon. Vertices are attracted to periosteal
//! edges found on radial profiles and held together by springs; the mesh
//! splits stretched edges as it grows.

mod dynamics;
mod mesh;
mod profile;
mod run;
mod voxelize;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use dynamics::{smoothing_forces, step_dynamics};
pub use mesh::{icosphere, BalloonMesh, MeshSummary};
pub use profile::{find_edge_target, find_edge_target_in, sample_profile, Profile};
pub use run::{run_balloon, BalloonRun};
pub use voxelize::voxelize_closed_mesh;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BalloonParams {
    pub mass: f64,
    pub k_smg: f64,
    pub k_img: f64,
    pub dt: f64,
    /// Full profile length, centered on the surface (mm).
    pub profile_length_mm: f64,
    pub profile_step_mm: f64,
    /// Half-width of the central difference used for edge strength (mm).
    pub derivative_halfwidth_mm: f64,
    /// Minimum edge strength (grey value per mm).
    pub edge_floor: f64,
    /// A falling edge counts when it reaches this fraction of the strongest
    /// falling edge on the profile.
    pub dominance: f64,
    pub max_edge_mm: f64,
    /// Per-step displacement below which a vertex counts as settled (mm),
    /// measured as net displacement over `convergence_window` steps.
    pub convergence_mm: f64,
    pub convergence_window: usize,
    /// Fraction of vertices that must be settled to stop. A few vertices
    /// where the cortex meets the pedicles keep hopping between edges.
    pub convergence_quantile: f64,
    pub max_iterations: usize,
    pub init_radius_mm: f64,
    pub subdivisions: u32,
}

impl Default for BalloonParams {
    fn default() -> Self {
        Self {
            mass: 1.0,
            k_smg: 0.5,
            k_img: 0.3,
            dt: 0.5,
            profile_length_mm: 16.0,
            profile_step_mm: 0.25,
            derivative_halfwidth_mm: 0.5,
            edge_floor: 100.0,
            dominance: 0.5,
            max_edge_mm: 1.0,
            convergence_mm: 2e-3,
            convergence_window: 10,
            convergence_quantile: 0.9,
            max_iterations: 1000,
            init_radius_mm: 10.0,
            subdivisions: 3,
        }
    }
}

impl BalloonParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("mass", self.mass),
            ("k_smg", self.k_smg),
            ("k_img", self.k_img),
            ("dt", self.dt),
            ("profile_length_mm", self.profile_length_mm),
            ("profile_step_mm", self.profile_step_mm),
            ("derivative_halfwidth_mm", self.derivative_halfwidth_mm),
            ("edge_floor", self.edge_floor),
            ("dominance", self.dominance),
            ("max_edge_mm", self.max_edge_mm),
            ("convergence_mm", self.convergence_mm),
            ("init_radius_mm", self.init_radius_mm),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParam(format!("balloon {name} must be positive, got {v}")));
            }
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidParam("balloon max_iterations must be positive".into()));
        }
        if !(self.convergence_quantile > 0.0 && self.convergence_quantile <= 1.0) {
            return Err(Error::InvalidParam("balloon convergence_quantile must be in (0, 1]".into()));
        }
        if self.dominance > 1.0 {
            return Err(Error::InvalidParam("balloon dominance must be <= 1".into()));
        }
        if self.dt > (self.mass / self.k_smg).sqrt() {
            return Err(Error::InvalidParam(format!(
                "unstable time step: dt {} > sqrt(m/k_smg) = {}",
                self.dt,
                (self.mass / self.k_smg).sqrt()
            )));
        }
        if self.profile_length_mm < 2.0 * self.profile_step_mm {
            return Err(Error::InvalidParam("profile shorter than three samples".into()));
        }
        Ok(())
    }
}
