use std::collections::HashMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Vec3;

/// Closed triangle mesh carrying per-vertex dynamic state.
#[derive(Clone, Debug, PartialEq)]
pub struct BalloonMesh {
    pub positions: Vec<Vec3>,
    /// Displacement of the last step divided by Δt (mm per unit time).
    pub velocities: Vec<Vec3>,
    pub targets: Vec<Option<Vec3>>,
    pub triangles: Vec<[u32; 3]>,
    neighbors: Vec<Vec<u32>>,
}

impl BalloonMesh {
    pub fn new(positions: Vec<Vec3>, triangles: Vec<[u32; 3]>) -> Result<Self> {
        let n = positions.len();
        if triangles.iter().flatten().any(|&v| v as usize >= n) {
            return Err(Error::Balloon("triangle references a missing vertex".into()));
        }
        let mut m = Self {
            velocities: vec![Vec3::zeros(); n],
            targets: vec![None; n],
            positions,
            triangles,
            neighbors: Vec::new(),
        };
        m.rebuild_adjacency();
        Ok(m)
    }

    pub fn vertex_count(&self) -> usize {
        self.positions.len()
    }

    pub fn face_count(&self) -> usize {
        self.triangles.len()
    }

    pub fn neighbors(&self, v: usize) -> &[u32] {
        &self.neighbors[v]
    }

    pub(crate) fn rebuild_adjacency(&mut self) {
        let mut nb: Vec<Vec<u32>> = vec![Vec::new(); self.positions.len()];
        for t in &self.triangles {
            for e in 0..3 {
                let (a, b) = (t[e], t[(e + 1) % 3]);
                nb[a as usize].push(b);
                nb[b as usize].push(a);
            }
        }
        for l in &mut nb {
            l.sort_unstable();
            l.dedup();
        }
        self.neighbors = nb;
    }

    /// Undirected edges `(lo, hi)` in sorted order.
    pub fn edges(&self) -> Vec<(u32, u32)> {
        let mut e: Vec<(u32, u32)> = self
            .triangles
            .iter()
            .flat_map(|t| (0..3).map(move |i| (t[i].min(t[(i + 1) % 3]), t[i].max(t[(i + 1) % 3]))))
            .collect();
        e.sort_unstable();
        e.dedup();
        e
    }

    pub fn euler_characteristic(&self) -> i64 {
        self.vertex_count() as i64 - self.edges().len() as i64 + self.face_count() as i64
    }

    /// Every directed edge appears exactly once and its reverse exactly once:
    /// closed, manifold and consistently oriented.
    pub fn is_closed_oriented(&self) -> bool {
        let mut directed: Vec<(u32, u32)> = self
            .triangles
            .iter()
            .flat_map(|t| (0..3).map(move |i| (t[i], t[(i + 1) % 3])))
            .collect();
        directed.sort_unstable();
        if directed.windows(2).any(|w| w[0] == w[1]) {
            return false;
        }
        directed
            .iter()
            .all(|&(a, b)| directed.binary_search(&(b, a)).is_ok())
    }

    pub fn signed_volume(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| {
                let [a, b, c] = t.map(|v| self.positions[v as usize]);
                a.dot(&b.cross(&c)) / 6.0
            })
            .sum()
    }

    /// Area-weighted vertex normals (unit length, or zero if degenerate).
    pub fn vertex_normals(&self) -> Vec<Vec3> {
        let mut n = vec![Vec3::zeros(); self.positions.len()];
        for t in &self.triangles {
            let [a, b, c] = t.map(|v| self.positions[v as usize]);
            let fnorm = (b - a).cross(&(c - a));
            for &v in t {
                n[v as usize] += fnorm;
            }
        }
        n.into_iter()
            .map(|v| v.try_normalize(1e-15).unwrap_or_else(Vec3::zeros))
            .collect()
    }

    pub fn edge_length(&self, (a, b): (u32, u32)) -> f64 {
        (self.positions[a as usize] - self.positions[b as usize]).norm()
    }

    pub fn max_edge_length(&self) -> f64 {
        self.edges()
            .into_iter()
            .map(|e| self.edge_length(e))
            .fold(0.0, f64::max)
    }

    /// Total spring energy Σ_edges k/2 ‖p_j − p_i‖².
    pub fn spring_energy(&self, k: f64) -> f64 {
        self.edges()
            .into_iter()
            .map(|e| 0.5 * k * self.edge_length(e).powi(2))
            .sum()
    }

    pub fn centroid(&self) -> Vec3 {
        let s: Vec3 = self.positions.iter().sum();
        s / self.positions.len() as f64
    }

    /// ASCII triangle soup: one triangle per line, nine coordinates.
    pub fn write_triangle_soup(&self, mut w: impl Write) -> std::io::Result<()> {
        for t in &self.triangles {
            let [a, b, c] = t.map(|v| self.positions[v as usize]);
            writeln!(
                w,
                "{} {} {} {} {} {} {} {} {}",
                a.x, a.y, a.z, b.x, b.y, b.z, c.x, c.y, c.z
            )?;
        }
        Ok(())
    }

    /// Split every edge longer than `max_len` at its midpoint, longest first,
    /// until none remains. Both faces of a split edge are split so no
    /// T-junctions arise; each split adds one vertex and two faces.
    pub fn refine(&mut self, max_len: f64) -> usize {
        let max2 = max_len * max_len;
        let any_long = self.triangles.iter().any(|t| {
            (0..3).any(|i| (self.positions[t[i] as usize] - self.positions[t[(i + 1) % 3] as usize]).norm_squared() > max2)
        });
        if !any_long {
            return 0;
        }
        let mut splits = 0;
        loop {
            let mut long: Vec<(f64, (u32, u32))> = self
                .edges()
                .into_iter()
                .map(|e| (self.edge_length(e), e))
                .filter(|(l, _)| *l > max_len)
                .collect();
            if long.is_empty() {
                break;
            }
            long.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

            let mut faces_of: HashMap<(u32, u32), Vec<usize>> = HashMap::new();
            for (f, t) in self.triangles.iter().enumerate() {
                for i in 0..3 {
                    let (a, b) = (t[i], t[(i + 1) % 3]);
                    faces_of.entry((a.min(b), a.max(b))).or_default().push(f);
                }
            }
            let mut touched = vec![false; self.triangles.len()];
            for (_, e) in long {
                let fs = &faces_of[&e];
                if fs.iter().any(|&f| touched[f]) {
                    continue;
                }
                let (a, b) = e;
                let m = self.positions.len() as u32;
                let (pa, pb) = (self.positions[a as usize], self.positions[b as usize]);
                self.positions.push((pa + pb) / 2.0);
                let va = self.velocities[a as usize];
                let vb = self.velocities[b as usize];
                self.velocities.push((va + vb) / 2.0);
                self.targets.push(None);
                for &f in fs {
                    touched[f] = true;
                    let t = self.triangles[f];
                    // rotate so the split edge is (t0, t1) in face order
                    let r = (0..3)
                        .find(|&i| {
                            let (x, y) = (t[i], t[(i + 1) % 3]);
                            (x.min(y), x.max(y)) == e
                        })
                        .expect("edge belongs to face");
                    let (t0, t1, t2) = (t[r], t[(r + 1) % 3], t[(r + 2) % 3]);
                    self.triangles[f] = [t0, m, t2];
                    self.triangles.push([m, t1, t2]);
                    touched.push(true);
                }
                splits += 1;
            }
        }
        if splits > 0 {
            self.rebuild_adjacency();
        }
        splits
    }
}

/// Subdivided icosahedron projected onto a sphere.
pub fn icosphere(center: &Vec3, radius: f64, subdivisions: u32) -> Result<BalloonMesh> {
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(Error::InvalidParam(format!("sphere radius must be positive, got {radius}")));
    }
    let phi = (1.0 + 5f64.sqrt()) / 2.0;
    let mut verts: Vec<Vec3> = [
        (-1.0, phi, 0.0),
        (1.0, phi, 0.0),
        (-1.0, -phi, 0.0),
        (1.0, -phi, 0.0),
        (0.0, -1.0, phi),
        (0.0, 1.0, phi),
        (0.0, -1.0, -phi),
        (0.0, 1.0, -phi),
        (phi, 0.0, -1.0),
        (phi, 0.0, 1.0),
        (-phi, 0.0, -1.0),
        (-phi, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vec3::new(x, y, z).normalize())
    .collect();
    let mut tris: Vec<[u32; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut cache: HashMap<(u32, u32), u32> = HashMap::new();
        let mut mid = |a: u32, b: u32, verts: &mut Vec<Vec3>| -> u32 {
            *cache.entry((a.min(b), a.max(b))).or_insert_with(|| {
                verts.push(((verts[a as usize] + verts[b as usize]) / 2.0).normalize());
                verts.len() as u32 - 1
            })
        };
        let mut next = Vec::with_capacity(tris.len() * 4);
        for [a, b, c] in tris {
            let ab = mid(a, b, &mut verts);
            let bc = mid(b, c, &mut verts);
            let ca = mid(c, a, &mut verts);
            next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        tris = next;
    }
    let positions = verts.into_iter().map(|v| center + v * radius).collect();
    BalloonMesh::new(positions, tris)
}

/// JSON summary written next to exported meshes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeshSummary {
    pub vertices: usize,
    pub faces: usize,
    pub converged: bool,
    pub iterations: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn icosahedron_counts() {
        let m = icosphere(&Vec3::zeros(), 1.0, 0).unwrap();
        assert_eq!((m.vertex_count(), m.face_count()), (12, 20));
        assert_eq!(m.euler_characteristic(), 2);
        assert!(m.is_closed_oriented());
        assert!(m.signed_volume() > 0.0);
    }

    #[test]
    fn subdivision_recurrence() {
        // V_{n+1} = V_n + E_n, E_n = 30·4^n
        let mut v = 12;
        for s in 0..4u32 {
            let m = icosphere(&Vec3::new(1.0, 2.0, 3.0), 7.0, s).unwrap();
            assert_eq!(m.vertex_count(), v);
            assert_eq!(m.euler_characteristic(), 2);
            v += 30 * 4usize.pow(s);
        }
        assert_eq!(icosphere(&Vec3::zeros(), 1.0, 2).unwrap().vertex_count(), 162);
    }

    #[test]
    fn vertices_on_sphere() {
        let c = Vec3::new(-4.0, 0.5, 9.0);
        let m = icosphere(&c, 12.5, 3).unwrap();
        for p in &m.positions {
            assert!(((p - c).norm() - 12.5).abs() < 1e-6);
        }
        assert!(icosphere(&c, 0.0, 1).is_err());
    }

    #[test]
    fn refine_fixpoint_and_single_split() {
        let mut m = icosphere(&Vec3::zeros(), 1.0, 1).unwrap();
        let before = m.clone();
        assert_eq!(m.refine(10.0), 0);
        assert_eq!(m, before);

        // tetrahedron with a single edge (0-1) above the threshold
        let pts = vec![
            Vec3::new(-1.5, 0.0, 0.0),
            Vec3::new(1.5, 0.0, 0.0),
            Vec3::new(0.0, 1.5, 0.0),
            Vec3::new(0.0, -0.75, 1.3),
        ];
        let mut m = BalloonMesh::new(pts, vec![[0, 2, 1], [0, 1, 3], [1, 2, 3], [0, 3, 2]]).unwrap();
        assert!(m.is_closed_oriented() && m.signed_volume() > 0.0);
        assert_eq!(m.refine(2.8), 1);
        assert_eq!((m.vertex_count(), m.face_count()), (5, 6));
        assert_eq!(m.euler_characteristic(), 2);
        assert!(m.is_closed_oriented() && m.signed_volume() > 0.0);
    }

    #[test]
    fn refine_until_bounded() {
        let mut m = icosphere(&Vec3::zeros(), 10.0, 1).unwrap();
        m.refine(1.5);
        assert!(m.max_edge_length() <= 1.5);
        assert_eq!(m.euler_characteristic(), 2);
        assert!(m.is_closed_oriented());
        assert!(m.signed_volume() > 0.0);
    }

    #[test]
    fn triangle_soup_has_nine_floats_per_line() {
        let m = icosphere(&Vec3::zeros(), 1.0, 0).unwrap();
        let mut buf = Vec::new();
        m.write_triangle_soup(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 20);
        assert!(text.lines().all(|l| l.split_whitespace().count() == 9));
    }
}
