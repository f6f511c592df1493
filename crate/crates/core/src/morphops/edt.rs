//! Exact Euclidean distance transform with anisotropic spacing.
//!
//! Separable lower-envelope-of-parabolas algorithm (Felzenszwalb &
//! Huttenlocher), one pass per axis over squared distances.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::volgrid::{Geometry, Mask};

/// Distance (mm) from every voxel center to the nearest foreground voxel center.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceField {
    geom: Geometry,
    dist: Vec<f64>,
}

impl DistanceField {
    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    pub fn values(&self) -> &[f64] {
        &self.dist
    }

    #[inline]
    pub fn at(&self, idx: usize) -> f64 {
        self.dist[idx]
    }

    /// Voxels with distance `<= r`.
    pub fn within(&self, r: f64) -> Mask {
        Mask::from_bits(self.geom, self.dist.iter().map(|&d| d <= r).collect())
            .expect("same geometry")
    }
}

/// 1-D squared distance transform of `f` sampled at positions `i * h`,
/// written into `out`. `v` and `z` are scratch buffers.
fn transform_1d(f: &[f64], h: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    let n = f.len();
    v.clear();
    z.clear();
    let h2 = h * h;
    let mut k: usize = 0;
    let mut first = None;
    for q in 0..n {
        if f[q].is_finite() {
            first = Some(q);
            break;
        }
    }
    let Some(q0) = first else {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    };
    v.push(q0);
    z.push(f64::NEG_INFINITY);
    z.push(f64::INFINITY);
    for q in q0 + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            // intersection of parabolas rooted at q and p, in index units
            let s = ((f[q] / h2 + (q * q) as f64) - (f[p] / h2 + (p * p) as f64))
                / (2.0 * (q as f64 - p as f64));
            if s <= z[k] {
                if k == 0 {
                    v[0] = q;
                    z[1] = f64::INFINITY;
                    break;
                }
                v.pop();
                z.pop();
                k -= 1;
                continue;
            }
            k += 1;
            v.push(q);
            z[k] = s;
            z.push(f64::INFINITY);
            break;
        }
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let d = (q as f64 - p as f64) * h;
        *o = d * d + f[p];
    }
}

/// Squared EDT over a raw foreground bitmap. `None` if there is no foreground.
pub(crate) fn squared_edt(geom: &Geometry, fg: &[bool]) -> Option<Vec<f64>> {
    if !fg.iter().any(|&b| b) {
        return None;
    }
    let [nx, ny, nz] = geom.dims;
    let mut d: Vec<f64> = fg
        .iter()
        .map(|&b| if b { 0.0 } else { f64::INFINITY })
        .collect();

    // x: contiguous rows
    d.par_chunks_mut(nx).for_each_init(
        || (vec![0.0; nx], Vec::new(), Vec::new()),
        |(buf, v, z), row| {
            transform_1d(row, geom.spacing[0], buf, v, z);
            row.copy_from_slice(buf);
        },
    );

    // y: per z-slab, gather columns
    d.par_chunks_mut(nx * ny).for_each_init(
        || (vec![0.0; ny], vec![0.0; ny], Vec::new(), Vec::new()),
        |(col, buf, v, z), slab| {
            for i in 0..nx {
                for j in 0..ny {
                    col[j] = slab[i + nx * j];
                }
                transform_1d(col, geom.spacing[1], buf, v, z);
                for j in 0..ny {
                    slab[i + nx * j] = buf[j];
                }
            }
        },
    );

    // z: lines across slabs; process in parallel over (i, j) and scatter back
    if nz > 1 {
        let plane = nx * ny;
        let src = &d;
        let lines: Vec<Vec<f64>> = (0..plane)
            .into_par_iter()
            .map_init(
                || (vec![0.0; nz], Vec::new(), Vec::new()),
                |(col, v, z), ij| {
                    for k in 0..nz {
                        col[k] = src[ij + plane * k];
                    }
                    let mut out = vec![0.0; nz];
                    transform_1d(col, geom.spacing[2], &mut out, v, z);
                    out
                },
            )
            .collect();
        for (ij, line) in lines.into_iter().enumerate() {
            for (k, val) in line.into_iter().enumerate() {
                d[ij + plane * k] = val;
            }
        }
    }
    Some(d)
}

/// Exact EDT: distance to the nearest foreground voxel of `mask`.
pub fn edt(mask: &Mask) -> Result<DistanceField> {
    let sq = squared_edt(mask.geometry(), mask.bits()).ok_or(Error::EmptyMask("edt"))?;
    Ok(DistanceField {
        geom: *mask.geometry(),
        dist: sq.into_iter().map(f64::sqrt).collect(),
    })
}

/// Distance from each foreground voxel to the nearest background voxel
/// (zero on background). Voxels outside the grid do not count as background.
pub fn interior_distance(mask: &Mask) -> Result<DistanceField> {
    let bg = mask.not();
    if bg.is_empty() {
        return Err(Error::Morphology("mask fills the whole grid".into()));
    }
    edt(&bg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_force_sq(mask: &Mask) -> Vec<f64> {
        let g = mask.geometry();
        let fg: Vec<[f64; 3]> = mask
            .indices()
            .map(|i| {
                let c = g.coords(i);
                [c[0] as f64 * g.spacing[0], c[1] as f64 * g.spacing[1], c[2] as f64 * g.spacing[2]]
            })
            .collect();
        (0..g.len())
            .map(|idx| {
                let c = g.coords(idx);
                let p = [c[0] as f64 * g.spacing[0], c[1] as f64 * g.spacing[1], c[2] as f64 * g.spacing[2]];
                fg.iter()
                    .map(|q| (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }

    #[test]
    fn pythagorean_and_anisotropic() {
        let g = Geometry::new([8, 8, 2], [1.0; 3], [0.0; 3]).unwrap();
        let mut m = Mask::empty(g);
        m.set(0, true);
        let d = edt(&m).unwrap();
        assert_eq!(d.at(g.index(3, 4, 0)), 5.0);

        let g = Geometry::new([8, 3, 3], [0.5, 1.0, 1.0], [0.0; 3]).unwrap();
        let mut m = Mask::empty(g);
        m.set(0, true);
        assert_eq!(edt(&m).unwrap().at(g.index(4, 0, 0)), 2.0);
    }

    #[test]
    fn empty_mask_is_an_error() {
        let g = Geometry::new([3, 3, 3], [1.0; 3], [0.0; 3]).unwrap();
        assert!(matches!(edt(&Mask::empty(g)), Err(Error::EmptyMask(_))));
    }

    #[test]
    fn matches_brute_force_anisotropic() {
        let g = Geometry::new([13, 11, 9], [0.7, 1.3, 0.45], [0.0; 3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for density in [0.002, 0.02, 0.2] {
            let m = Mask::from_fn(g, |_, _, _| rng.random::<f64>() < density);
            if m.is_empty() {
                continue;
            }
            let got = squared_edt(&g, m.bits()).unwrap();
            let want = brute_force_sq(&m);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() <= 1e-9 * b.max(1.0), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn lipschitz_between_neighbours() {
        let g = Geometry::new([16, 16, 16], [0.5, 0.5, 1.0], [0.0; 3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = Mask::from_fn(g, |_, _, _| rng.random::<f64>() < 0.01);
        let d = edt(&m).unwrap();
        let mut nb = Vec::new();
        for idx in 0..g.len() {
            g.neighbors6(idx, &mut nb);
            for &n in &nb {
                let step = {
                    let (a, b) = (g.coords(idx), g.coords(n));
                    (0..3).map(|ax| (a[ax] as f64 - b[ax] as f64).abs() * g.spacing[ax]).sum::<f64>()
                };
                assert!((d.at(idx) - d.at(n)).abs() <= step + 1e-12);
            }
            if m.get(idx) {
                assert_eq!(d.at(idx), 0.0);
            }
        }
    }
}
