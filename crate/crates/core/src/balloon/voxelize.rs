use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::volgrid::{Geometry, Mask};

use super::BalloonMesh;

/// Separating-axis test of a triangle against an axis-aligned box.
fn triangle_box_overlap(center: &Vec3, half: &Vec3, tri: [Vec3; 3]) -> bool {
    let v = tri.map(|p| p - center);
    let e = [v[1] - v[0], v[2] - v[1], v[0] - v[2]];
    // cross products of box axes with triangle edges
    for ed in &e {
        for a in 0..3 {
            let axis = {
                let mut u = Vec3::zeros();
                u[a] = 1.0;
                u.cross(ed)
            };
            if axis.norm_squared() < 1e-30 {
                continue;
            }
            let p = v.map(|q| q.dot(&axis));
            let r = half.x * axis.x.abs() + half.y * axis.y.abs() + half.z * axis.z.abs();
            let (lo, hi) = (p[0].min(p[1]).min(p[2]), p[0].max(p[1]).max(p[2]));
            if lo > r || hi < -r {
                return false;
            }
        }
    }
    for a in 0..3 {
        let (lo, hi) = (v[0][a].min(v[1][a]).min(v[2][a]), v[0][a].max(v[1][a]).max(v[2][a]));
        if lo > half[a] || hi < -half[a] {
            return false;
        }
    }
    let n = e[0].cross(&e[1]);
    let d = n.dot(&v[0]);
    let r = half.x * n.x.abs() + half.y * n.y.abs() + half.z * n.z.abs();
    d.abs() <= r
}

/// Voxel-index range whose boxes may touch `[lo, hi]` along each axis.
fn voxel_range(geom: &Geometry, lo: &Vec3, hi: &Vec3, slack: f64) -> Option<[(usize, usize); 3]> {
    let a = geom.world_to_voxel(lo);
    let b = geom.world_to_voxel(hi);
    let mut out = [(0, 0); 3];
    for ax in 0..3 {
        let (l, h) = (a[ax].min(b[ax]), a[ax].max(b[ax]));
        let l = (l - 0.5 - slack).ceil().max(0.0);
        let h = (h + 0.5 + slack).floor().min(geom.dims[ax] as f64 - 1.0);
        if h < l {
            return None;
        }
        out[ax] = (l as usize, h as usize);
    }
    Some(out)
}

/// Rasterize a closed mesh: `(surface, interior)`. Surface voxels are those
/// whose box meets any triangle; interior voxels are those whose center has
/// odd crossing parity along +x. Rays are offset by a fixed sub-nanometre
/// perturbation so no ray passes exactly through a mesh edge or vertex.
pub fn voxelize_closed_mesh(mesh: &BalloonMesh, geom: &Geometry) -> Result<(Mask, Mask)> {
    if !mesh.is_closed_oriented() {
        return Err(Error::Balloon("cannot voxelize an open or non-manifold mesh".into()));
    }
    let tris: Vec<[Vec3; 3]> = mesh
        .triangles
        .iter()
        .map(|t| t.map(|v| mesh.positions[v as usize]))
        .collect();
    let half = Vec3::from(geom.spacing) * (0.5 * (1.0 + 1e-9));

    let mut surface = Mask::empty(*geom);
    for tri in &tris {
        let lo = tri[0].inf(&tri[1]).inf(&tri[2]);
        let hi = tri[0].sup(&tri[1]).sup(&tri[2]);
        let Some([(i0, i1), (j0, j1), (k0, k1)]) = voxel_range(geom, &lo, &hi, 1e-9) else {
            continue;
        };
        for k in k0..=k1 {
            for j in j0..=j1 {
                for i in i0..=i1 {
                    let idx = geom.index(i, j, k);
                    if !surface.get(idx) && triangle_box_overlap(&geom.center(idx), &half, *tri) {
                        surface.set(idx, true);
                    }
                }
            }
        }
    }

    let [nx, ny, nz] = geom.dims;
    let eps = [
        1e-7 * geom.spacing[1] * 0.754_877_666_2,
        1e-7 * geom.spacing[2] * 0.569_840_291_0,
    ];
    let mut rows: Vec<Vec<u32>> = vec![Vec::new(); ny * nz];
    for (t, tri) in tris.iter().enumerate() {
        let lo = tri[0].inf(&tri[1]).inf(&tri[2]);
        let hi = tri[0].sup(&tri[1]).sup(&tri[2]);
        let a = geom.world_to_voxel(&lo);
        let b = geom.world_to_voxel(&hi);
        let j0 = a[1].ceil().max(0.0) as i64 - 1;
        let j1 = (b[1].floor() as i64 + 1).min(ny as i64 - 1);
        let k0 = a[2].ceil().max(0.0) as i64 - 1;
        let k1 = (b[2].floor() as i64 + 1).min(nz as i64 - 1);
        for k in k0.max(0)..=k1 {
            for j in j0.max(0)..=j1 {
                rows[j as usize + ny * k as usize].push(t as u32);
            }
        }
    }
    let interior_rows: Vec<Vec<bool>> = rows
        .par_iter()
        .enumerate()
        .map(|(r, cand)| {
            let (j, k) = (r % ny, r / ny);
            let c = geom.voxel_to_world([0.0, j as f64, k as f64]);
            let (y, z) = (c.y + eps[0], c.z + eps[1]);
            let mut xs: Vec<f64> = Vec::new();
            for &t in cand {
                let [p0, p1, p2] = tris[t as usize];
                let w0 = (p1.y - y) * (p2.z - z) - (p2.y - y) * (p1.z - z);
                let w1 = (p2.y - y) * (p0.z - z) - (p0.y - y) * (p2.z - z);
                let w2 = (p0.y - y) * (p1.z - z) - (p1.y - y) * (p0.z - z);
                let inside = (w0 > 0.0 && w1 > 0.0 && w2 > 0.0) || (w0 < 0.0 && w1 < 0.0 && w2 < 0.0);
                if inside {
                    let s = w0 + w1 + w2;
                    xs.push((w0 * p0.x + w1 * p1.x + w2 * p2.x) / s);
                }
            }
            xs.sort_by(f64::total_cmp);
            let mut row = vec![false; nx];
            let mut q = 0;
            for (i, cell) in row.iter_mut().enumerate() {
                let x = geom.origin[0] + i as f64 * geom.spacing[0];
                while q < xs.len() && xs[q] < x {
                    q += 1;
                }
                *cell = q % 2 == 1;
            }
            row
        })
        .collect();
    let mut interior = Mask::empty(*geom);
    for (r, row) in interior_rows.iter().enumerate() {
        let (j, k) = (r % ny, r / ny);
        for (i, &b) in row.iter().enumerate() {
            if b {
                interior.set(geom.index(i, j, k), true);
            }
        }
    }
    Ok((surface, interior))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::balloon::icosphere;

    #[test]
    fn sphere_volume_and_surface_topology() {
        let g = Geometry::new([32, 32, 32], [1.0; 3], [-16.0, -16.0, -16.0]).unwrap();
        let mut m = icosphere(&Vec3::new(0.3, -0.2, 0.1), 10.0, 3).unwrap();
        m.refine(0.5);
        let (surf, inner) = voxelize_closed_mesh(&m, &g).unwrap();
        let want = 4.0 / 3.0 * std::f64::consts::PI * 1000.0;
        let got = inner.count() as f64;
        assert!((got - want).abs() / want < 0.03, "{got} vs {want}");

        let mut nb = Vec::new();
        for idx in surf.indices() {
            g.neighbors26(idx, &mut nb);
            assert!(nb.iter().any(|&n| inner.get(n)));
            assert!(nb.iter().any(|&n| !inner.get(n) && !surf.get(n)));
        }
    }

    #[test]
    fn tiny_mesh_inside_one_voxel() {
        let g = Geometry::new([5, 5, 5], [1.0; 3], [0.0; 3]).unwrap();
        let m = icosphere(&Vec3::new(2.2, 2.1, 1.8), 0.05, 1).unwrap();
        let (surf, inner) = voxelize_closed_mesh(&m, &g).unwrap();
        assert_eq!(surf.indices().collect::<Vec<_>>(), vec![g.index(2, 2, 2)]);
        assert!(inner.is_empty());
    }

    #[test]
    fn open_mesh_is_rejected() {
        let g = Geometry::new([5, 5, 5], [1.0; 3], [0.0; 3]).unwrap();
        let mut m = icosphere(&Vec3::new(2.0, 2.0, 2.0), 1.0, 0).unwrap();
        m.triangles.pop();
        assert!(voxelize_closed_mesh(&m, &g).is_err());
    }

    #[test]
    fn box_overlap_cases() {
        let c = Vec3::zeros();
        let h = Vec3::new(0.5, 0.5, 0.5);
        let t = [Vec3::new(-2.0, -2.0, 0.1), Vec3::new(2.0, -2.0, 0.1), Vec3::new(0.0, 2.0, 0.1)];
        assert!(triangle_box_overlap(&c, &h, t));
        let t = [Vec3::new(-2.0, -2.0, 0.6), Vec3::new(2.0, -2.0, 0.6), Vec3::new(0.0, 2.0, 0.6)];
        assert!(!triangle_box_overlap(&c, &h, t));
        // near a corner but separated along an edge-cross axis
        let t = [Vec3::new(0.9, 0.0, 0.0), Vec3::new(0.0, 0.9, 0.0), Vec3::new(0.9, 0.9, 0.9)];
        assert!(!triangle_box_overlap(&Vec3::new(-0.1, -0.1, 0.0), &Vec3::new(0.2, 0.2, 0.2), t));
    }
}
