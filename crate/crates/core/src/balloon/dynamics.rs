use crate::error::{Error, Result};
use crate::geom::Vec3;

use super::{BalloonMesh, BalloonParams};

/// Spring forces `k_smg · Σ_{j∈N(i)} (p_j − p_i)`.
pub fn smoothing_forces(mesh: &BalloonMesh, k_smg: f64) -> Vec<Vec3> {
    (0..mesh.vertex_count())
        .map(|i| {
            let p = mesh.positions[i];
            let s: Vec3 = mesh
                .neighbors(i)
                .iter()
                .map(|&j| mesh.positions[j as usize] - p)
                .sum();
            s * k_smg
        })
        .collect()
}

fn total_forces(mesh: &BalloonMesh, params: &BalloonParams) -> Vec<Vec3> {
    let mut f = smoothing_forces(mesh, params.k_smg);
    for (i, fi) in f.iter_mut().enumerate() {
        if let Some(t) = mesh.targets[i] {
            *fi += (t - mesh.positions[i]) * params.k_img;
        }
    }
    f
}

/// One time step of `m p̈ = f_smg + f_img` in the overdamped limit,
/// `Δp = Δt²/m · f`, which is the explicit finite-difference update with the
/// velocity carried over from the previous step dropped. The step is split
/// into equal sub-steps when `Δt²/m` times the Gershgorin bound on the
/// stiffness would otherwise approach the explicit stability limit. Forces
/// are all read from the old state before any position is written.
///
/// Returns the mean vertex displacement (mm).
pub fn step_dynamics(mesh: &mut BalloonMesh, params: &BalloonParams) -> Result<f64> {
    let eta = params.dt * params.dt / params.mass;
    let max_degree = (0..mesh.vertex_count())
        .map(|i| mesh.neighbors(i).len())
        .max()
        .unwrap_or(0) as f64;
    let stiffness = 2.0 * params.k_smg * max_degree + params.k_img;
    let substeps = ((eta * stiffness) / 1.9).ceil().max(1.0) as usize;
    let h = eta / substeps as f64;

    let start = mesh.positions.clone();
    for _ in 0..substeps {
        let f = total_forces(mesh, params);
        if f.iter().any(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(Error::Balloon("non-finite force: parameters blew up".into()));
        }
        for (p, fi) in mesh.positions.iter_mut().zip(&f) {
            *p += fi * h;
        }
    }
    let mut moved = 0.0;
    for ((v, p), p0) in mesh.velocities.iter_mut().zip(&mesh.positions).zip(&start) {
        let d = p - p0;
        moved += d.norm();
        *v = d / params.dt;
    }
    Ok(moved / mesh.vertex_count().max(1) as f64)
}
