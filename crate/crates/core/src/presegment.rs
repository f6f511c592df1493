//! Per-vertebra constraints derived from operator seeds: the spinal canal
//! centerline, inter-vertebral disk planes, and a boolean search region
//! (cylinder ∩ half-spaces) enclosing each vertebral body.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{orthonormal_basis, Plane, Vec3};
use crate::morphops::edt::squared_edt;
use crate::volgrid::{Geometry, Mask, Volume};

/// Minimum pairwise seed distance (mm).
pub const MIN_SEED_DISTANCE_MM: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Seed {
    pub name: String,
    pub center_mm: [f64; 3],
}

impl Seed {
    pub fn point(&self) -> Vec3 {
        Vec3::from(self.center_mm)
    }
}

/// Operator-marked body centers, one per level, ordered caudal → cranial.
/// Also the wire payload of `POST /api/seeds`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SeedSet {
    pub levels: Vec<Seed>,
}

impl SeedSet {
    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::InvalidSeeds("at least one seed required".into()));
        }
        for s in &self.levels {
            if s.center_mm.iter().any(|c| !c.is_finite()) {
                return Err(Error::InvalidSeeds(format!("{}: non-finite center", s.name)));
            }
        }
        for w in self.levels.windows(2) {
            if w[1].center_mm[2] <= w[0].center_mm[2] {
                return Err(Error::InvalidSeeds(format!(
                    "seeds must be sorted caudal to cranial ({} before {})",
                    w[0].name, w[1].name
                )));
            }
        }
        for (i, a) in self.levels.iter().enumerate() {
            for b in &self.levels[i + 1..] {
                if (a.point() - b.point()).norm() <= MIN_SEED_DISTANCE_MM {
                    return Err(Error::InvalidSeeds(format!(
                        "{} and {} closer than {MIN_SEED_DISTANCE_MM} mm",
                        a.name, b.name
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn points(&self) -> Vec<Vec3> {
        self.levels.iter().map(Seed::point).collect()
    }

    /// Body center at world height `z`, linearly interpolated between seeds
    /// and held constant beyond the first/last seed.
    pub fn center_at_z(&self, z: f64) -> Vec3 {
        let pts = self.points();
        let first = pts[0];
        let last = pts[pts.len() - 1];
        if z <= first.z {
            return Vec3::new(first.x, first.y, z);
        }
        if z >= last.z {
            return Vec3::new(last.x, last.y, z);
        }
        for w in pts.windows(2) {
            if z >= w[0].z && z <= w[1].z {
                let t = (z - w[0].z) / (w[1].z - w[0].z);
                let p = w[0] + (w[1] - w[0]) * t;
                return Vec3::new(p.x, p.y, z);
            }
        }
        unreachable!("seeds are sorted")
    }
}

// ---------------------------------------------------------------------------
// Spinal canal
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CanalParams {
    /// Lateral width of the search window (mm).
    pub window_width_mm: f64,
    /// Posterior depth of the search window behind the body center (mm).
    pub window_depth_mm: f64,
    /// Unit in-plane direction from the body toward the canal.
    pub posterior: [f64; 3],
    /// Largest allowed center displacement between consecutive slices (mm).
    pub max_step_mm: f64,
    /// Slice gaps longer than this allow no more displacement than this
    /// many steps, so a long run of misses cannot license a jump.
    pub max_bridge_slices: usize,
    /// Smallest inscribed radius accepted as canal (mm).
    pub min_radius_mm: f64,
    /// Slices beyond the first/last seed included in the scan (mm).
    pub extend_mm: f64,
    /// In-plane reach beyond which the 3-D flood of a body interior is taken
    /// as a leak and ignored (mm).
    pub body_flood_limit_mm: f64,
}

impl Default for CanalParams {
    fn default() -> Self {
        Self {
            window_width_mm: 40.0,
            window_depth_mm: 40.0,
            posterior: [0.0, 1.0, 0.0],
            max_step_mm: 3.0,
            max_bridge_slices: 4,
            min_radius_mm: 3.0,
            extend_mm: 15.0,
            body_flood_limit_mm: 60.0,
        }
    }
}

/// Canal centerline sampled once per axial slice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CanalLine {
    pub points: Vec<Vec3>,
    /// Whether the slice's center came from a direct detection (vs. bridging).
    pub detected: Vec<bool>,
}

impl CanalLine {
    pub fn nearest_point(&self, p: &Vec3) -> Option<Vec3> {
        self.points
            .iter()
            .min_by(|a, b| (*a - p).norm_squared().total_cmp(&(*b - p).norm_squared()))
            .copied()
    }
}

/// 3×3 in-plane box mean of slice `k`, clamped at the borders.
fn smoothed_slice(vol: &Volume, k: usize) -> Vec<f64> {
    let g = vol.geometry();
    let [nx, ny, _] = g.dims;
    let mut out = vec![0.0; nx * ny];
    for j in 0..ny {
        for i in 0..nx {
            let mut s = 0.0;
            for dj in -1i64..=1 {
                for di in -1i64..=1 {
                    let x = (i as i64 + di).clamp(0, nx as i64 - 1) as usize;
                    let y = (j as i64 + dj).clamp(0, ny as i64 - 1) as usize;
                    s += vol.get(x, y, k) as f64;
                }
            }
            out[i + nx * j] = s / 9.0;
        }
    }
    out
}

/// Background pixels of a 2-D slice not 4-connected to the slice border.
fn enclosed_background(nx: usize, ny: usize, bone: &[bool]) -> Vec<bool> {
    let mut reached = vec![false; nx * ny];
    let mut stack = Vec::new();
    for j in 0..ny {
        for i in 0..nx {
            if (i == 0 || j == 0 || i + 1 == nx || j + 1 == ny) && !bone[i + nx * j] {
                reached[i + nx * j] = true;
                stack.push(i + nx * j);
            }
        }
    }
    while let Some(p) = stack.pop() {
        let (i, j) = (p % nx, p / nx);
        let mut visit = |q: usize| {
            if !bone[q] && !reached[q] {
                reached[q] = true;
                stack.push(q);
            }
        };
        if i > 0 {
            visit(p - 1);
        }
        if i + 1 < nx {
            visit(p + 1);
        }
        if j > 0 {
            visit(p - nx);
        }
        if j + 1 < ny {
            visit(p + nx);
        }
    }
    (0..nx * ny).map(|p| !bone[p] && !reached[p]).collect()
}

/// Unset the 4-connected component of `set` containing `start`.
fn clear_component(nx: usize, ny: usize, set: &mut [bool], start: usize) {
    if !set[start] {
        return;
    }
    set[start] = false;
    let mut stack = vec![start];
    while let Some(p) = stack.pop() {
        let (i, j) = (p % nx, p / nx);
        let mut nb = [None; 4];
        if i > 0 {
            nb[0] = Some(p - 1);
        }
        if i + 1 < nx {
            nb[1] = Some(p + 1);
        }
        if j > 0 {
            nb[2] = Some(p - nx);
        }
        if j + 1 < ny {
            nb[3] = Some(p + nx);
        }
        for q in nb.into_iter().flatten() {
            if set[q] {
                set[q] = false;
                stack.push(q);
            }
        }
    }
}

/// 6-connected flood of the sub-threshold interior around each seed, over
/// the slices `k0..k0 + bone.len()`. A flood reaching farther than `limit`
/// in-plane from its seed is a leak and dropped.
fn body_interiors(g: &Geometry, k0: usize, bone: &[Vec<bool>], seeds: &[Vec3], limit: f64) -> Vec<Vec<bool>> {
    let [nx, ny, _] = g.dims;
    let nz = bone.len();
    let mut body: Vec<Vec<bool>> = vec![vec![false; nx * ny]; nz];
    for seed in seeds {
        let Some([si, sj, sk]) = g.nearest_index(seed) else { continue };
        if sk < k0 || sk >= k0 + nz || bone[sk - k0][si + nx * sj] || body[sk - k0][si + nx * sj] {
            continue;
        }
        let mut visited = vec![(sk - k0, si + nx * sj)];
        body[sk - k0][si + nx * sj] = true;
        let mut head = 0;
        let mut leaked = false;
        while head < visited.len() {
            let (k, p) = visited[head];
            head += 1;
            let (i, j) = (p % nx, p / nx);
            let dx = (i as f64 - si as f64) * g.spacing[0];
            let dy = (j as f64 - sj as f64) * g.spacing[1];
            if dx * dx + dy * dy > limit * limit || i == 0 || j == 0 || i + 1 == nx || j + 1 == ny {
                leaked = true;
                break;
            }
            let mut nb = [(k, p - 1), (k, p + 1), (k, p - nx), (k, p + nx), (usize::MAX, 0), (usize::MAX, 0)];
            if k > 0 {
                nb[4] = (k - 1, p);
            }
            if k + 1 < nz {
                nb[5] = (k + 1, p);
            }
            for (q, r) in nb {
                if q != usize::MAX && !bone[q][r] && !body[q][r] {
                    body[q][r] = true;
                    visited.push((q, r));
                }
            }
        }
        if leaked {
            for (k, p) in visited {
                body[k][p] = false;
            }
        }
    }
    body
}

/// Largest inscribed circle of an enclosed cavity inside the posterior window
/// of axial slice `k`: `(center, radius)`.
fn detect_in_slice(
    g: &Geometry,
    k: usize,
    bone: &[bool],
    body: &[bool],
    body_center: &Vec3,
    params: &CanalParams,
) -> Option<(Vec3, f64)> {
    let [nx, ny, _] = g.dims;
    let mut enclosed = enclosed_background(nx, ny, bone);
    // the trabecular interior of the body itself is an enclosed cavity too;
    // slices through a tilted endplate cut it into pockets away from the seed
    for (e, &b) in enclosed.iter_mut().zip(body) {
        *e &= !b;
    }
    if let Some([si, sj, _]) = g.nearest_index(&Vec3::new(body_center.x, body_center.y, g.origin[2] + k as f64 * g.spacing[2])) {
        clear_component(nx, ny, &mut enclosed, si + nx * sj);
    }
    let slice_geom = Geometry::new([nx, ny, 1], g.spacing, g.origin).ok()?;
    let dist = squared_edt(&slice_geom, bone)?;

    let post = Vec3::from(params.posterior);
    let post = Vec3::new(post.x, post.y, 0.0).try_normalize(1e-12)?;
    let lat = Vec3::z().cross(&post);
    let mut best: Option<(usize, f64)> = None;
    for j in 0..ny {
        for i in 0..nx {
            let p = i + nx * j;
            if !enclosed[p] {
                continue;
            }
            let w = g.voxel_to_world([i as f64, j as f64, k as f64]);
            let d = w - body_center;
            let depth = d.dot(&post);
            if depth < 0.0 || depth > params.window_depth_mm {
                continue;
            }
            if d.dot(&lat).abs() > params.window_width_mm / 2.0 {
                continue;
            }
            if best.is_none_or(|(_, bd)| dist[p] > bd) {
                best = Some((p, dist[p]));
            }
        }
    }
    let (p, d2) = best?;
    let r = d2.sqrt();
    if r < params.min_radius_mm {
        return None;
    }
    let c = g.voxel_to_world([(p % nx) as f64, (p / nx) as f64, k as f64]);
    Some((c, r))
}

/// Rolling-ball canal detection: per axial slice the center of the largest
/// sphere inscribed in an enclosed cavity behind the body, chained from the
/// strongest detection outward with a bounded per-slice step; gaps are
/// bridged by linear interpolation.
pub fn detect_canal(
    vol: &Volume,
    seeds: &SeedSet,
    coarse_bone_threshold: f64,
    params: &CanalParams,
) -> Result<CanalLine> {
    seeds.validate()?;
    let g = vol.geometry();
    let pts = seeds.points();
    let zlo = pts[0].z - params.extend_mm;
    let zhi = pts[pts.len() - 1].z + params.extend_mm;
    let k0 = ((zlo - g.origin[2]) / g.spacing[2]).ceil().max(0.0) as usize;
    let k1 = (((zhi - g.origin[2]) / g.spacing[2]).floor() as i64).min(g.dims[2] as i64 - 1);
    if k1 < k0 as i64 {
        return Err(Error::CanalNotFound("seed span lies outside the volume".into()));
    }
    let k1 = k1 as usize;

    let bone: Vec<Vec<bool>> = (k0..=k1)
        .into_par_iter()
        .map(|k| smoothed_slice(vol, k).iter().map(|&v| v >= coarse_bone_threshold).collect())
        .collect();
    let body = body_interiors(g, k0, &bone, &pts, params.body_flood_limit_mm);
    let raw: Vec<Option<(Vec3, f64)>> = (k0..=k1)
        .into_par_iter()
        .map(|k| {
            let z = g.origin[2] + k as f64 * g.spacing[2];
            let c = seeds.center_at_z(z);
            detect_in_slice(g, k, &bone[k - k0], &body[k - k0], &c, params)
        })
        .collect();

    let anchor = raw
        .iter()
        .enumerate()
        .filter_map(|(i, d)| d.map(|(_, r)| (i, r)))
        .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
        .ok_or_else(|| Error::CanalNotFound("no enclosed cavity behind any body center".into()))?;

    let n = raw.len();
    let mut accepted: Vec<Option<Vec3>> = vec![None; n];
    accepted[anchor] = raw[anchor].map(|(c, _)| c);
    let chain = |order: &mut dyn Iterator<Item = usize>, accepted: &mut Vec<Option<Vec3>>| {
        let mut last = (anchor, accepted[anchor].unwrap());
        for i in order {
            if let Some((c, _)) = raw[i] {
                let gap = i.abs_diff(last.0).min(params.max_bridge_slices.max(1)) as f64;
                let planar = Vec3::new(c.x - last.1.x, c.y - last.1.y, 0.0).norm();
                if planar <= params.max_step_mm * gap {
                    accepted[i] = Some(c);
                    last = (i, c);
                }
            }
        }
    };
    chain(&mut (anchor + 1..n), &mut accepted);
    chain(&mut (0..anchor).rev(), &mut accepted);

    let known: Vec<usize> = (0..n).filter(|&i| accepted[i].is_some()).collect();
    let mut points = Vec::with_capacity(n);
    for i in 0..n {
        let z = g.origin[2] + (k0 + i) as f64 * g.spacing[2];
        let c = match accepted[i] {
            Some(c) => c,
            None => {
                let before = known.iter().rev().find(|&&q| q < i);
                let after = known.iter().find(|&&q| q > i);
                match (before, after) {
                    (Some(&a), Some(&b)) => {
                        let (ca, cb) = (accepted[a].unwrap(), accepted[b].unwrap());
                        ca + (cb - ca) * ((i - a) as f64 / (b - a) as f64)
                    }
                    (Some(&a), None) => accepted[a].unwrap(),
                    (None, Some(&b)) => accepted[b].unwrap(),
                    (None, None) => unreachable!("anchor is known"),
                }
            }
        };
        points.push(Vec3::new(c.x, c.y, z));
    }
    Ok(CanalLine {
        points,
        detected: accepted.iter().map(Option::is_some).collect(),
    })
}

// ---------------------------------------------------------------------------
// Disk planes
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiskParams {
    /// Radius of the plane-aligned sampling disk (mm).
    pub disk_radius_mm: f64,
    /// Width of the Gaussian weighting across the disk (mm).
    pub slab_sigma_mm: f64,
    /// Maximum tilt relative to the inter-seed axis, per angle (degrees).
    pub max_tilt_deg: f64,
    pub tilt_step_deg: f64,
    pub offset_step_mm: f64,
    /// End-cap distance from a lone seed (mm).
    pub single_seed_half_height_mm: f64,
}

impl Default for DiskParams {
    fn default() -> Self {
        Self {
            disk_radius_mm: 15.0,
            slab_sigma_mm: 0.5,
            max_tilt_deg: 15.0,
            tilt_step_deg: 1.0,
            offset_step_mm: 1.0,
            single_seed_half_height_mm: 16.0,
        }
    }
}

/// Sample pattern for the disk objective.
struct DiskSampler {
    disk: Vec<(f64, f64)>,
    across: Vec<(f64, f64)>,
}

impl DiskSampler {
    fn new(radius: f64, disk_step: f64, sigma: f64, across_step: f64) -> Self {
        let n = (radius / disk_step).floor() as i64;
        let mut disk = Vec::new();
        for j in -n..=n {
            for i in -n..=n {
                let (x, y) = (i as f64 * disk_step, j as f64 * disk_step);
                if x * x + y * y <= radius * radius {
                    disk.push((x, y));
                }
            }
        }
        let m = (3.0 * sigma / across_step).round() as i64;
        let across = (-m..=m)
            .map(|q| {
                let s = q as f64 * across_step;
                (s, (-0.5 * (s / sigma).powi(2)).exp())
            })
            .collect();
        Self { disk, across }
    }

    fn objective(&self, vol: &Volume, center: &Vec3, normal: &Vec3) -> f64 {
        let (e1, e2) = orthonormal_basis(normal);
        let mut sum = 0.0;
        let mut wsum = 0.0;
        for &(s, w) in &self.across {
            let c = center + normal * s;
            let mut acc = 0.0;
            for &(x, y) in &self.disk {
                acc += vol.sample_trilinear(&(c + e1 * x + e2 * y));
            }
            sum += w * acc;
            wsum += w * self.disk.len() as f64;
        }
        sum / wsum
    }
}

#[derive(Clone, Copy, Debug)]
struct Candidate {
    offset: f64,
    alpha: f64,
    beta: f64,
    value: f64,
}

impl Candidate {
    fn tilt(&self) -> f64 {
        let (ta, tb) = (self.alpha.to_radians().tan(), self.beta.to_radians().tan());
        (ta * ta + tb * tb).sqrt().atan()
    }

    /// Lower objective wins; ties go to the smaller tilt, then to the offset
    /// closest to `mid`, then to a fixed parameter order.
    fn better_than(&self, other: &Candidate, mid: f64) -> bool {
        self.value
            .total_cmp(&other.value)
            .then(self.tilt().total_cmp(&other.tilt()))
            .then((self.offset - mid).abs().total_cmp(&(other.offset - mid).abs()))
            .then(self.offset.total_cmp(&other.offset))
            .then(self.alpha.total_cmp(&other.alpha))
            .then(self.beta.total_cmp(&other.beta))
            .is_lt()
    }
}

fn tilted_normal(axis: &Vec3, b1: &Vec3, b2: &Vec3, alpha: f64, beta: f64) -> Vec3 {
    (axis + b1 * alpha.to_radians().tan() + b2 * beta.to_radians().tan()).normalize()
}

/// Fit the plane minimizing the slab-weighted disk mean between two seeds.
fn fit_between(vol: &Volume, lo: &Vec3, hi: &Vec3, params: &DiskParams) -> Result<Plane> {
    let delta = hi - lo;
    let span = delta.norm();
    if span < 1e-9 {
        return Err(Error::DiskPlane("coincident seeds".into()));
    }
    let axis = delta / span;
    let (b1, b2) = orthonormal_basis(&axis);
    let mid = span / 2.0;
    let coarse = DiskSampler::new(params.disk_radius_mm, 2.0, params.slab_sigma_mm, 1.0);
    let fine = DiskSampler::new(params.disk_radius_mm, 1.0, params.slab_sigma_mm, 0.5);

    let kmax = (mid / params.offset_step_mm).floor() as i64;
    let offsets: Vec<f64> = (-kmax..=kmax)
        .map(|k| mid + k as f64 * params.offset_step_mm)
        .collect();
    let nt = (params.max_tilt_deg / params.tilt_step_deg).floor() as i64;
    let tilts: Vec<f64> = (-nt..=nt).map(|q| q as f64 * params.tilt_step_deg).collect();

    let eval = |s: &DiskSampler, o: f64, a: f64, b: f64| Candidate {
        offset: o,
        alpha: a,
        beta: b,
        value: s.objective(vol, &(lo + axis * o), &tilted_normal(&axis, &b1, &b2, a, b)),
    };

    let mut combos = Vec::with_capacity(offsets.len() * tilts.len() * tilts.len());
    for &o in &offsets {
        for &a in &tilts {
            for &b in &tilts {
                combos.push((o, a, b));
            }
        }
    }
    let grid: Vec<Candidate> = combos.par_iter().map(|&(o, a, b)| eval(&coarse, o, a, b)).collect();
    let mut best = grid[0];
    for c in &grid[1..] {
        if c.better_than(&best, mid) {
            best = *c;
        }
    }

    // pattern-search refinement on the fine sampler
    let mut best = eval(&fine, best.offset, best.alpha, best.beta);
    let (mut so, mut sa) = (params.offset_step_mm / 2.0, params.tilt_step_deg / 2.0);
    let lim = params.max_tilt_deg;
    for _ in 0..200 {
        if so < 0.05 && sa < 0.05 {
            break;
        }
        let moves = [
            (so, 0.0, 0.0),
            (-so, 0.0, 0.0),
            (0.0, sa, 0.0),
            (0.0, -sa, 0.0),
            (0.0, 0.0, sa),
            (0.0, 0.0, -sa),
        ];
        let mut improved = false;
        for (dq, da, db) in moves {
            let (o, a, b) = (best.offset + dq, best.alpha + da, best.beta + db);
            if o < 0.0 || o > span || a.abs() > lim || b.abs() > lim {
                continue;
            }
            let c = eval(&fine, o, a, b);
            if c.better_than(&best, mid) {
                best = c;
                improved = true;
            }
        }
        if !improved {
            so /= 2.0;
            sa /= 2.0;
        }
    }
    let n = tilted_normal(&axis, &b1, &b2, best.alpha, best.beta);
    Plane::through(&(lo + axis * best.offset), &n).ok_or_else(|| Error::DiskPlane("degenerate normal".into()))
}

/// End cap beyond `seed`, searched along `dir` over `span` with a fixed normal.
fn fit_cap(vol: &Volume, seed: &Vec3, dir: &Vec3, span: f64, normal: &Vec3, params: &DiskParams) -> Plane {
    let fine = DiskSampler::new(params.disk_radius_mm, 1.0, params.slab_sigma_mm, 0.5);
    let mid = span / 2.0;
    let step = params.offset_step_mm / 4.0;
    let k = (mid / step).floor() as i64;
    let mut best: Option<(f64, f64)> = None;
    for q in -k..=k {
        let o = mid + q as f64 * step;
        let v = fine.objective(vol, &(seed + dir * o), normal);
        let better = match best {
            None => true,
            Some((bo, bv)) => v
                .total_cmp(&bv)
                .then((o - mid).abs().total_cmp(&(bo - mid).abs()))
                .then(o.total_cmp(&bo))
                .is_lt(),
        };
        if better {
            best = Some((o, v));
        }
    }
    let o = best.map(|b| b.0).unwrap_or(mid);
    Plane::through(&(seed + dir * o), normal).expect("unit normal")
}

/// Planes bounding each level: `[lower cap, between 0/1, ..., upper cap]`,
/// all with normals pointing cranially. Level `i` lies between planes `i`
/// and `i + 1`.
pub fn fit_disk_planes(vol: &Volume, seeds: &SeedSet, params: &DiskParams) -> Result<Vec<Plane>> {
    seeds.validate()?;
    let pts = seeds.points();
    if pts.len() == 1 {
        let s = pts[0];
        let h = params.single_seed_half_height_mm;
        return Ok(vec![
            Plane::through(&(s - Vec3::z() * h), &Vec3::z()).unwrap(),
            Plane::through(&(s + Vec3::z() * h), &Vec3::z()).unwrap(),
        ]);
    }
    let inner: Vec<Plane> = pts
        .windows(2)
        .map(|w| fit_between(vol, &w[0], &w[1], params))
        .collect::<Result<_>>()?;

    let first_dir = (pts[1] - pts[0]).normalize();
    let first_span = (pts[1] - pts[0]).norm();
    let lower = fit_cap(vol, &pts[0], &-first_dir, first_span, &inner[0].normal, params);
    let n = pts.len();
    let last_dir = (pts[n - 1] - pts[n - 2]).normalize();
    let last_span = (pts[n - 1] - pts[n - 2]).norm();
    let upper = fit_cap(vol, &pts[n - 1], &last_dir, last_span, &inner[n - 2].normal, params);

    let mut planes = Vec::with_capacity(n + 1);
    planes.push(lower);
    planes.extend(inner);
    planes.push(upper);
    Ok(planes)
}

// ---------------------------------------------------------------------------
// Search region
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingPlane {
    pub plane: Plane,
    /// Inside is `signed_distance >= 0` when true, `<= 0` otherwise.
    pub keep_positive: bool,
}

impl BoundingPlane {
    #[inline]
    pub fn violation(&self, p: &Vec3) -> f64 {
        let d = self.plane.signed_distance(p);
        if self.keep_positive {
            -d
        } else {
            d
        }
    }
}

/// Cylinder intersected with half-spaces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchRegion {
    pub axis_point: Vec3,
    pub axis_dir: Vec3,
    pub radius: f64,
    pub half_length: f64,
    pub planes: Vec<BoundingPlane>,
}

impl SearchRegion {
    /// Same axis and planes with a different radius; the cylinder length
    /// grows with the radius as in [`build_search_region`].
    pub fn with_radius(&self, radius: f64) -> SearchRegion {
        SearchRegion {
            radius,
            half_length: self.half_length - self.radius + radius,
            ..self.clone()
        }
    }

    #[inline]
    pub fn in_cylinder(&self, p: &Vec3) -> bool {
        let d = p - self.axis_point;
        let s = d.dot(&self.axis_dir);
        s.abs() <= self.half_length && (d - self.axis_dir * s).norm_squared() <= self.radius * self.radius
    }

    #[inline]
    pub fn contains(&self, p: &Vec3) -> bool {
        self.in_cylinder(p) && self.planes.iter().all(|b| b.violation(p) <= 0.0)
    }

    /// Upper bound on how far `p` lies outside the region (0 inside).
    pub fn outside_distance(&self, p: &Vec3) -> f64 {
        let d = p - self.axis_point;
        let s = d.dot(&self.axis_dir);
        let radial = (d - self.axis_dir * s).norm();
        let mut out = (radial - self.radius).max(s.abs() - self.half_length).max(0.0);
        for b in &self.planes {
            out = out.max(b.violation(p));
        }
        out
    }

    /// World AABB of the cylinder.
    pub fn world_aabb(&self) -> (Vec3, Vec3) {
        let mut ext = Vec3::zeros();
        for a in 0..3 {
            let c = self.axis_dir[a];
            ext[a] = self.half_length * c.abs() + self.radius * (1.0 - c * c).max(0.0).sqrt();
        }
        (self.axis_point - ext, self.axis_point + ext)
    }

    pub fn rasterize(&self, geom: &Geometry) -> Mask {
        Mask::from_world_fn(*geom, |p| self.contains(p))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegionParams {
    /// Cylinder radius lower bound as a fraction of the seed→canal distance.
    pub canal_fraction: f64,
    /// Cylinder radius lower bound as a multiple of the coarse body radius.
    pub radius_margin: f64,
    /// Largest plausible body radius; larger floods are treated as leaks (mm).
    pub max_body_radius_mm: f64,
    /// Radius of the wider growing region as a fraction of the seed→canal
    /// distance. Growing has to reach the arch so the pedicle cut has
    /// something to cut.
    pub grow_canal_fraction: f64,
}

impl Default for RegionParams {
    fn default() -> Self {
        Self {
            canal_fraction: 0.5,
            radius_margin: 1.1,
            max_body_radius_mm: 60.0,
            grow_canal_fraction: 1.5,
        }
    }
}

/// Coarse body radius: 4-connected flood of non-bone pixels from the seed in
/// its axial slice (3×3 smoothed), radius = farthest flooded pixel + half a
/// voxel diagonal.
pub fn estimate_body_radius(vol: &Volume, seed: &Vec3, threshold: f64, max_radius: f64) -> Result<f64> {
    let g = vol.geometry();
    let [i0, j0, k] = g
        .nearest_index(seed)
        .ok_or_else(|| Error::Region("seed outside the volume".into()))?;
    let [nx, ny, _] = g.dims;
    let smooth = smoothed_slice(vol, k);
    let start = i0 + nx * j0;
    if smooth[start] >= threshold {
        return Err(Error::Region("seed lies on bone at the coarse threshold".into()));
    }
    let mut seen = vec![false; nx * ny];
    seen[start] = true;
    let mut stack = vec![start];
    let mut r2max: f64 = 0.0;
    while let Some(p) = stack.pop() {
        let (i, j) = (p % nx, p / nx);
        let dx = (i as f64 - i0 as f64) * g.spacing[0];
        let dy = (j as f64 - j0 as f64) * g.spacing[1];
        r2max = r2max.max(dx * dx + dy * dy);
        if r2max > max_radius * max_radius || i == 0 || j == 0 || i + 1 == nx || j + 1 == ny {
            return Err(Error::Region("coarse flood leaked: body not enclosed by cortex".into()));
        }
        for q in [p - 1, p + 1, p - nx, p + nx] {
            if !seen[q] && smooth[q] < threshold {
                seen[q] = true;
                stack.push(q);
            }
        }
    }
    let half_diag = 0.5 * (g.spacing[0].powi(2) + g.spacing[1].powi(2)).sqrt();
    Ok(r2max.sqrt() + half_diag)
}

/// Distance from `seed` to the canal centerline, measured ⊥ to `axis`.
pub fn canal_distance(seed: &Vec3, canal: &CanalLine, axis: &Vec3) -> Result<f64> {
    let canal_pt = canal
        .nearest_point(seed)
        .ok_or_else(|| Error::Region("empty canal centerline".into()))?;
    let d = canal_pt - seed;
    Ok((d - axis * d.dot(axis)).norm())
}

/// Region for one level: cylinder ⊥ to the disk pair through the seed,
/// clipped by the two planes.
pub fn build_search_region(
    seed: &Vec3,
    canal: &CanalLine,
    lower: &Plane,
    upper: &Plane,
    body_radius: f64,
    params: &RegionParams,
) -> Result<SearchRegion> {
    let fracs = [params.canal_fraction, params.radius_margin, params.grow_canal_fraction];
    if fracs.iter().any(|f| !(f.is_finite() && *f >= 0.0)) {
        return Err(Error::InvalidParam("region fractions must be finite and >= 0".into()));
    }
    if lower.signed_distance(seed) <= 0.0 || upper.signed_distance(seed) >= 0.0 {
        return Err(Error::Region("seed outside the slab between its disk planes".into()));
    }
    let axis = (lower.normal + upper.normal)
        .try_normalize(1e-9)
        .ok_or_else(|| Error::Region("opposed disk plane normals".into()))?;
    let d_canal = canal_distance(seed, canal, &axis)?;
    let radius = (params.canal_fraction * d_canal).max(params.radius_margin * body_radius);
    if !(radius > 0.0) {
        return Err(Error::Region("zero cylinder radius".into()));
    }
    let along = |pl: &Plane| pl.signed_distance(seed).abs() / pl.normal.dot(&axis).abs().max(1e-3);
    let reach = along(lower).max(along(upper));
    let half_length = 1.5 * reach + radius;
    Ok(SearchRegion {
        axis_point: *seed,
        axis_dir: axis,
        radius,
        half_length,
        planes: vec![
            BoundingPlane {
                plane: *lower,
                keep_positive: true,
            },
            BoundingPlane {
                plane: *upper,
                keep_positive: false,
            },
        ],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seeds(zs: &[f64]) -> SeedSet {
        SeedSet {
            levels: zs
                .iter()
                .enumerate()
                .map(|(i, &z)| Seed {
                    name: format!("S{i}"),
                    center_mm: [0.0, 0.0, z],
                })
                .collect(),
        }
    }

    #[test]
    fn seed_validation() {
        assert!(seeds(&[]).validate().is_err());
        assert!(seeds(&[0.0, 5.0]).validate().is_err());
        assert!(seeds(&[10.0, 0.0]).validate().is_err());
        assert!(seeds(&[0.0, 30.0]).validate().is_ok());
    }

    #[test]
    fn seeds_json_wire_format() {
        let s: SeedSet =
            serde_json::from_str(r#"{"levels":[{"name":"L1","center_mm":[1.5,2,3]}]}"#).unwrap();
        assert_eq!(s.levels[0].center_mm, [1.5, 2.0, 3.0]);
        let back: SeedSet = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn constant_volume_plane_at_midpoint() {
        let g = Geometry::new([40, 40, 60], [1.0; 3], [-20.0, -20.0, 0.0]).unwrap();
        let v = Volume::filled(g, 100.0);
        let planes = fit_disk_planes(&v, &seeds(&[15.0, 45.0]), &DiskParams::default()).unwrap();
        assert_eq!(planes.len(), 3);
        let p = planes[1];
        assert!((p.normal - Vec3::z()).norm() < 1e-12);
        assert!((p.offset - 30.0).abs() < 1e-9);
    }

    #[test]
    fn coincident_or_unsorted_seeds_rejected() {
        let g = Geometry::new([10, 10, 10], [1.0; 3], [0.0; 3]).unwrap();
        let v = Volume::filled(g, 0.0);
        assert!(fit_disk_planes(&v, &seeds(&[3.0, 3.0]), &DiskParams::default()).is_err());
    }

    #[test]
    fn single_seed_caps() {
        let g = Geometry::new([10, 10, 10], [1.0; 3], [0.0; 3]).unwrap();
        let v = Volume::filled(g, 0.0);
        let planes = fit_disk_planes(&v, &seeds(&[5.0]), &DiskParams::default()).unwrap();
        assert_eq!(planes.len(), 2);
        assert!((planes[0].offset + 11.0).abs() < 1e-12);
        assert!((planes[1].offset - 21.0).abs() < 1e-12);
    }

    fn region() -> SearchRegion {
        let canal = CanalLine {
            points: vec![Vec3::new(0.0, 30.0, 0.0)],
            detected: vec![true],
        };
        let lo = Plane::through(&Vec3::new(0.0, 0.0, -10.0), &Vec3::z()).unwrap();
        let hi = Plane::through(&Vec3::new(0.0, 0.0, 10.0), &Vec3::z()).unwrap();
        build_search_region(&Vec3::zeros(), &canal, &lo, &hi, 12.0, &RegionParams::default()).unwrap()
    }

    #[test]
    fn region_is_boolean_and_of_primitives() {
        let r = region();
        assert!(r.contains(&Vec3::zeros()));
        // midway to the canal (15) beats the 1.1 x 12 body margin
        assert_eq!(r.radius, 15.0);
        assert!(!r.contains(&Vec3::new(0.0, 0.0, 11.0)));
        assert!(!r.contains(&Vec3::new(0.0, 0.0, -11.0)));
        assert!(!r.contains(&Vec3::new(16.0, 0.0, 0.0)));
        assert!(!r.contains(&Vec3::new(0.0, 20.0, 0.0)));
        for p in [
            Vec3::new(5.0, 3.0, 9.9),
            Vec3::new(14.0, 0.0, 0.0),
            Vec3::new(10.0, 12.0, 1.0),
            Vec3::new(1.0, 1.0, -10.5),
        ] {
            let want = r.in_cylinder(&p) && r.planes.iter().all(|b| b.violation(&p) <= 0.0);
            assert_eq!(r.contains(&p), want);
            assert_eq!(r.contains(&p), r.outside_distance(&p) == 0.0);
        }
    }

    #[test]
    fn margin_floor_and_widening() {
        let canal = CanalLine {
            points: vec![Vec3::new(0.0, 30.0, 0.0)],
            detected: vec![true],
        };
        let lo = Plane::through(&Vec3::new(0.0, 0.0, -10.0), &Vec3::z()).unwrap();
        let hi = Plane::through(&Vec3::new(0.0, 0.0, 10.0), &Vec3::z()).unwrap();
        let r = build_search_region(&Vec3::zeros(), &canal, &lo, &hi, 20.0, &RegionParams::default()).unwrap();
        assert!((r.radius - 22.0).abs() < 1e-12);
        let w = r.with_radius(45.0);
        assert_eq!(w.radius, 45.0);
        assert!((w.half_length - r.half_length - 23.0).abs() < 1e-12);
        assert!(w.contains(&Vec3::new(0.0, 40.0, 0.0)) && !r.contains(&Vec3::new(0.0, 40.0, 0.0)));
        assert!(!w.contains(&Vec3::new(0.0, 40.0, 10.5)));
        let bad = RegionParams { grow_canal_fraction: f64::NAN, ..RegionParams::default() };
        assert!(build_search_region(&Vec3::zeros(), &canal, &lo, &hi, 20.0, &bad).is_err());
    }

    #[test]
    fn seed_outside_slab_rejected() {
        let canal = CanalLine {
            points: vec![Vec3::new(0.0, 30.0, 0.0)],
            detected: vec![true],
        };
        let lo = Plane::through(&Vec3::new(0.0, 0.0, 1.0), &Vec3::z()).unwrap();
        let hi = Plane::through(&Vec3::new(0.0, 0.0, 10.0), &Vec3::z()).unwrap();
        assert!(build_search_region(&Vec3::zeros(), &canal, &lo, &hi, 12.0, &RegionParams::default()).is_err());
    }

    #[test]
    fn no_posterior_arch_is_an_error() {
        // a bright disk body with nothing behind it
        let g = Geometry::new([60, 80, 40], [1.0; 3], [-30.0, -20.0, 0.0]).unwrap();
        let v = Volume::from_fn(g, |i, j, _| {
            let p = g.voxel_to_world([i as f64, j as f64, 0.0]);
            let r = (p.x * p.x + p.y * p.y).sqrt();
            if (13.0..=15.0).contains(&r) { 1000.0 } else { 0.0 }
        });
        let s = seeds(&[20.0]);
        assert!(matches!(
            detect_canal(&v, &s, 400.0, &CanalParams::default()),
            Err(Error::CanalNotFound(_))
        ));
    }
}
