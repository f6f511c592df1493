use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::presegment::SearchRegion;
use crate::volgrid::Volume;

use super::{find_edge_target_in, icosphere, sample_profile, step_dynamics, BalloonMesh, BalloonParams, MeshSummary};

#[derive(Clone, Debug)]
pub struct BalloonRun {
    pub mesh: BalloonMesh,
    pub converged: bool,
    pub iterations: usize,
    /// Largest distance any vertex reached outside the search region (mm).
    pub max_excursion_mm: f64,
}

impl BalloonRun {
    pub fn summary(&self) -> MeshSummary {
        MeshSummary {
            vertices: self.mesh.vertex_count(),
            faces: self.mesh.face_count(),
            converged: self.converged,
            iterations: self.iterations,
        }
    }
}

/// Recompute every vertex target from its radial profile. Profile samples and
/// targets outside `region` are discarded.
fn update_targets(mesh: &mut BalloonMesh, vol: &Volume, region: &SearchRegion, params: &BalloonParams) {
    let normals = mesh.vertex_normals();
    mesh.targets = mesh
        .positions
        .par_iter()
        .zip(normals.par_iter())
        .map(|(p, n)| {
            if n.norm_squared() == 0.0 {
                return None;
            }
            let prof = sample_profile(vol, p, n, params);
            let valid: Vec<bool> = (0..prof.samples.len())
                .map(|i| region.contains(&(p + n * prof.offset(i as f64))))
                .collect();
            let t = find_edge_target_in(&prof, &valid, params)?;
            let target = p + n * t;
            region.contains(&target).then_some(target)
        })
        .collect();
}

/// Inflate a balloon from a sphere around `seed` toward the periosteal
/// boundary. Running out of iterations is reported through `converged`, not
/// as an error.
pub fn run_balloon(vol: &Volume, region: &SearchRegion, seed: &Vec3, params: &BalloonParams) -> Result<BalloonRun> {
    params.validate()?;
    if !region.contains(seed) {
        return Err(Error::Balloon("seed lies outside its search region".into()));
    }
    let mut mesh = icosphere(seed, params.init_radius_mm, params.subdivisions)?;
    mesh.refine(params.max_edge_mm);
    let mut max_excursion: f64 = 0.0;
    let mut converged = false;
    let mut iterations = 0;
    let window = params.convergence_window.max(1);
    let mut snapshot = mesh.positions.clone();
    let mut since = 0;
    while iterations < params.max_iterations {
        iterations += 1;
        update_targets(&mut mesh, vol, region, params);
        step_dynamics(&mut mesh, params)?;
        mesh.refine(params.max_edge_mm);
        for p in &mesh.positions {
            max_excursion = max_excursion.max(region.outside_distance(p));
        }
        since += 1;
        if since == window {
            // net displacement over the window, so bounded oscillation of a
            // vertex between two nearby edges does not count as motion;
            // refinement only appends, so the snapshot is a prefix
            let mut net: Vec<f64> = mesh.positions.iter().zip(&snapshot).map(|(p, q)| (p - q).norm()).collect();
            let k = ((params.convergence_quantile * net.len() as f64).ceil() as usize).clamp(1, net.len()) - 1;
            let (_, q, _) = net.select_nth_unstable_by(k, f64::total_cmp);
            if *q / (window as f64) < params.convergence_mm {
                converged = true;
                break;
            }
            snapshot = mesh.positions.clone();
            since = 0;
        }
    }
    Ok(BalloonRun {
        mesh,
        converged,
        iterations,
        max_excursion_mm: max_excursion,
    })
}
