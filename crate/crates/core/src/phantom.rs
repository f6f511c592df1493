//! Synthetic digital spine phantom with analytic ground truth.
//!
//! Each vertebra is built in a local frame (u lateral, v anterior→posterior,
//! w caudal→cranial) from closed-form solids:
//!
//! * body: elliptic cylinder with semi-axes `a` (lateral) and `b = ap_ratio·a`,
//!   height `h`; the trabecular core is the same cylinder shrunk by the
//!   cortical thickness on every side, the remainder is the cortical shell;
//! * two cylindrical pedicles parallel to v at `u = ±0.35·a`;
//! * a torus ring (the posterior arch) around the spinal canal, separated from
//!   the body by a soft-tissue gap so the pedicles are the only bony bridges;
//! * a thin spinous process extending posteriorly from the ring.
//!
//! Containment is a hard test on voxel centers. Priority is trabecular core,
//! then cortical shell, then posterior elements, then soft tissue.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{rotate_x, Plane, Vec3};
use crate::presegment::{Seed, SeedSet};
use crate::volgrid::{Geometry, Mask, Volume};

/// Gap between the posterior body wall and the anterior face of the arch ring.
const ARCH_GAP_MM: f64 = 5.0;
const PEDICLE_LATERAL_FRACTION: f64 = 0.35;
const ARCH_TUBE_FACTOR: f64 = 1.35;

fn default_ap_ratio() -> f64 {
    0.75
}

fn default_gap() -> f64 {
    4.0
}

fn default_margin() -> f64 {
    10.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VertebraSpec {
    pub name: String,
    pub trabecular_bmd: f64,
    /// Lateral semi-axis of the elliptic body.
    pub body_radius_mm: f64,
    pub body_height_mm: f64,
    pub cortical_thickness_mm: f64,
    pub cortical_bmd: f64,
    pub pedicle_radius_mm: f64,
    pub process_extent_mm: f64,
    /// Rotation of the vertebra about the world x axis.
    #[serde(default)]
    pub tilt_deg: f64,
    #[serde(default = "default_ap_ratio")]
    pub ap_ratio: f64,
    /// In-plane (x, y) shift of the whole level.
    #[serde(default)]
    pub offset_mm: [f64; 2],
}

impl VertebraSpec {
    pub fn lumbar(name: &str, trabecular_bmd: f64) -> Self {
        Self {
            name: name.to_string(),
            trabecular_bmd,
            body_radius_mm: 20.0,
            body_height_mm: 25.0,
            cortical_thickness_mm: 1.5,
            cortical_bmd: 1000.0,
            pedicle_radius_mm: 3.0,
            process_extent_mm: 12.0,
            tilt_deg: 0.0,
            ap_ratio: default_ap_ratio(),
            offset_mm: [0.0, 0.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    /// Levels ordered caudal → cranial.
    pub levels: Vec<VertebraSpec>,
    pub soft_tissue_value: f64,
    pub spacing: [f64; 3],
    pub noise_sigma: f64,
    pub rng_seed: u64,
    #[serde(default = "default_gap")]
    pub disk_gap_mm: f64,
    #[serde(default = "default_margin")]
    pub margin_mm: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            levels: vec![
                VertebraSpec::lumbar("L3", 200.0),
                VertebraSpec::lumbar("L2", 100.0),
                VertebraSpec::lumbar("L1", 50.0),
            ],
            soft_tissue_value: 0.0,
            spacing: [0.5, 0.5, 0.5],
            noise_sigma: 15.0,
            rng_seed: 1,
            disk_gap_mm: default_gap(),
            margin_mm: default_margin(),
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidPhantom(m));
        if self.levels.is_empty() {
            return bad("at least one level required".into());
        }
        if self.spacing.iter().any(|&s| !(s > 0.0)) {
            return bad(format!("spacing must be positive: {:?}", self.spacing));
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise sigma must be >= 0".into());
        }
        if !(self.disk_gap_mm > 0.0) || !(self.margin_mm >= 0.0) {
            return bad("gap must be positive and margin non-negative".into());
        }
        for l in &self.levels {
            let positive = [
                l.body_radius_mm,
                l.body_height_mm,
                l.cortical_thickness_mm,
                l.pedicle_radius_mm,
                l.process_extent_mm,
                l.ap_ratio,
            ];
            if positive.iter().any(|&x| !(x > 0.0)) {
                return bad(format!("{}: geometric parameters must be positive", l.name));
            }
            if !(l.cortical_bmd > l.trabecular_bmd && l.trabecular_bmd > self.soft_tissue_value) {
                return bad(format!(
                    "{}: need cortical > trabecular > soft tissue BMD",
                    l.name
                ));
            }
            let b = l.ap_ratio * l.body_radius_mm;
            if 2.0 * l.cortical_thickness_mm >= b.min(l.body_height_mm) {
                return bad(format!("{}: cortical shell swallows the body", l.name));
            }
            let pu = PEDICLE_LATERAL_FRACTION * l.body_radius_mm;
            if l.pedicle_radius_mm >= pu {
                return bad(format!("{}: pedicles overlap the midline", l.name));
            }
            if l.tilt_deg.abs() >= 45.0 {
                return bad(format!("{}: tilt must be below 45 degrees", l.name));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Tissue {
    Trabecular,
    Cortical,
    Posterior,
}

/// Resolved closed-form shape of one level in world space.
#[derive(Clone, Debug)]
pub struct LevelShape {
    pub center: Vec3,
    /// Lateral, posterior and cranial unit axes.
    pub u: Vec3,
    pub v: Vec3,
    pub w: Vec3,
    a: f64,
    b: f64,
    h: f64,
    t: f64,
    pedicle_r: f64,
    pedicle_u: f64,
    ring_r: f64,
    ring_tube: f64,
    canal_v: f64,
    process_len: f64,
}

impl LevelShape {
    fn new(spec: &VertebraSpec, center: Vec3) -> Self {
        let a = spec.body_radius_mm;
        let b = spec.ap_ratio * a;
        let pedicle_r = spec.pedicle_radius_mm;
        let pedicle_u = PEDICLE_LATERAL_FRACTION * a;
        let ring_tube = ARCH_TUBE_FACTOR * pedicle_r;
        let ring_r = (1.3 * pedicle_u).max(ring_tube + 2.5);
        let canal_v = b + ARCH_GAP_MM + ring_r + ring_tube;
        Self {
            center,
            u: Vec3::x(),
            v: rotate_x(&Vec3::y(), spec.tilt_deg),
            w: rotate_x(&Vec3::z(), spec.tilt_deg),
            a,
            b,
            h: spec.body_height_mm,
            t: spec.cortical_thickness_mm,
            pedicle_r,
            pedicle_u,
            ring_r,
            ring_tube,
            canal_v,
            process_len: spec.process_extent_mm,
        }
    }

    #[inline]
    fn local(&self, p: &Vec3) -> (f64, f64, f64) {
        let d = p - self.center;
        (d.dot(&self.u), d.dot(&self.v), d.dot(&self.w))
    }

    fn in_body(&self, u: f64, v: f64, w: f64) -> bool {
        w.abs() <= self.h / 2.0 && (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }

    fn in_trabecular(&self, u: f64, v: f64, w: f64) -> bool {
        let (ai, bi) = (self.a - self.t, self.b - self.t);
        w.abs() <= self.h / 2.0 - self.t && (u / ai).powi(2) + (v / bi).powi(2) <= 1.0
    }

    fn pedicle_attach_v(&self) -> f64 {
        self.canal_v - (self.ring_r.powi(2) - self.pedicle_u.powi(2)).sqrt()
    }

    fn in_posterior(&self, u: f64, v: f64, w: f64) -> bool {
        // pedicles
        if v >= 0.0 && v <= self.pedicle_attach_v() {
            for side in [-1.0, 1.0] {
                let du = u - side * self.pedicle_u;
                if du * du + w * w <= self.pedicle_r * self.pedicle_r {
                    return true;
                }
            }
        }
        // arch ring
        let rho = (u * u + (v - self.canal_v).powi(2)).sqrt();
        if (rho - self.ring_r).powi(2) + w * w <= self.ring_tube * self.ring_tube {
            return true;
        }
        // spinous process
        let v0 = self.canal_v + self.ring_r;
        v >= v0
            && v <= v0 + self.ring_tube + self.process_len
            && u.abs() <= 0.6 * self.pedicle_r
            && w.abs() <= 0.8 * self.ring_tube
    }

    fn tissue(&self, p: &Vec3) -> Option<Tissue> {
        let (u, v, w) = self.local(p);
        if w.abs() > self.h / 2.0 + self.ring_tube {
            return None;
        }
        if self.in_trabecular(u, v, w) {
            Some(Tissue::Trabecular)
        } else if self.in_body(u, v, w) {
            Some(Tissue::Cortical)
        } else if self.in_posterior(u, v, w) {
            Some(Tissue::Posterior)
        } else {
            None
        }
    }

    /// Local-frame bounding box corners, in world space.
    fn world_corners(&self) -> Vec<Vec3> {
        let ulim = self.a.max(self.ring_r + self.ring_tube) + 1.0;
        let vlo = -self.b - 1.0;
        let vhi = self.canal_v + self.ring_r + self.ring_tube + self.process_len + 1.0;
        let wl = self.h / 2.0 + 1.0;
        let mut out = Vec::with_capacity(8);
        for u in [-ulim, ulim] {
            for v in [vlo, vhi] {
                for w in [-wl, wl] {
                    out.push(self.center + self.u * u + self.v * v + self.w * w);
                }
            }
        }
        out
    }

    pub fn body_volume_mm3(&self) -> f64 {
        std::f64::consts::PI * self.a * self.b * self.h
    }

    pub fn trabecular_volume_mm3(&self) -> f64 {
        std::f64::consts::PI * (self.a - self.t) * (self.b - self.t) * (self.h - 2.0 * self.t)
    }

    /// Center of the spinal canal at axial offset `w` from the body center.
    pub fn canal_point(&self, w: f64) -> Vec3 {
        self.center + self.v * self.canal_v + self.w * w
    }

    /// Axial half-extent over which the arch ring encloses the canal.
    pub fn canal_half_extent(&self) -> f64 {
        self.ring_tube
    }

    pub fn canal_radius(&self) -> f64 {
        self.ring_r - self.ring_tube
    }

    /// Midpoints of the exposed pedicle axes (left, right).
    pub fn pedicle_midpoints(&self) -> [Vec3; 2] {
        let v_body = self.b * (1.0 - (self.pedicle_u / self.a).powi(2)).sqrt();
        let v_ring = self.canal_v
            - ((self.ring_r + self.ring_tube).powi(2) - self.pedicle_u.powi(2)).sqrt();
        let vm = 0.5 * (v_body + v_ring);
        [
            self.center - self.u * self.pedicle_u + self.v * vm,
            self.center + self.u * self.pedicle_u + self.v * vm,
        ]
    }

    pub fn height(&self) -> f64 {
        self.h
    }
}

/// Ground truth for one level.
#[derive(Clone, Debug)]
pub struct LevelTruth {
    pub name: String,
    pub shape: LevelShape,
    pub nominal_bmd: f64,
    pub body_volume_mm3: f64,
    pub trabecular_volume_mm3: f64,
    pub body_mask: Mask,
    pub trabecular_mask: Mask,
    pub canal_centerline: Vec<Vec3>,
}

#[derive(Clone, Debug)]
pub struct PhantomTruth {
    pub levels: Vec<LevelTruth>,
    /// One plane per adjacent level pair, normal pointing cranially.
    pub disk_planes: Vec<Plane>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LevelTruthSummary {
    pub name: String,
    pub center_mm: [f64; 3],
    pub axis: [f64; 3],
    pub nominal_bmd: f64,
    pub body_volume_mm3: f64,
    pub trabecular_volume_mm3: f64,
    pub body_height_mm: f64,
    pub pedicle_midpoints_mm: [[f64; 3]; 2],
    pub canal_centerline_mm: Vec<[f64; 3]>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TruthSummary {
    pub levels: Vec<LevelTruthSummary>,
    pub disk_planes: Vec<Plane>,
}

fn arr(v: &Vec3) -> [f64; 3] {
    [v.x, v.y, v.z]
}

impl PhantomTruth {
    /// Seed set at the true body centers.
    pub fn seeds(&self) -> SeedSet {
        SeedSet {
            levels: self
                .levels
                .iter()
                .map(|l| Seed {
                    name: l.name.clone(),
                    center_mm: arr(&l.shape.center),
                })
                .collect(),
        }
    }

    pub fn summary(&self) -> TruthSummary {
        TruthSummary {
            levels: self
                .levels
                .iter()
                .map(|l| LevelTruthSummary {
                    name: l.name.clone(),
                    center_mm: arr(&l.shape.center),
                    axis: arr(&l.shape.w),
                    nominal_bmd: l.nominal_bmd,
                    body_volume_mm3: l.body_volume_mm3,
                    trabecular_volume_mm3: l.trabecular_volume_mm3,
                    body_height_mm: l.shape.h,
                    pedicle_midpoints_mm: l.shape.pedicle_midpoints().map(|p| arr(&p)),
                    canal_centerline_mm: l.canal_centerline.iter().map(arr).collect(),
                })
                .collect(),
            disk_planes: self.disk_planes.clone(),
        }
    }
}

fn level_shapes(spec: &PhantomSpec) -> Vec<LevelShape> {
    let mut shapes: Vec<LevelShape> = Vec::with_capacity(spec.levels.len());
    for (i, l) in spec.levels.iter().enumerate() {
        let center = if i == 0 {
            Vec3::new(l.offset_mm[0], l.offset_mm[1], 0.0)
        } else {
            let prev = &shapes[i - 1];
            let prev_spec = &spec.levels[i - 1];
            let w_next = rotate_x(&Vec3::z(), l.tilt_deg);
            let shift = Vec3::new(
                l.offset_mm[0] - prev_spec.offset_mm[0],
                l.offset_mm[1] - prev_spec.offset_mm[1],
                0.0,
            );
            prev.center
                + prev.w * (prev.h / 2.0)
                + w_next * (spec.disk_gap_mm + l.body_height_mm / 2.0)
                + shift
        };
        shapes.push(LevelShape::new(l, center));
    }
    shapes
}

fn phantom_geometry(spec: &PhantomSpec, shapes: &[LevelShape]) -> Result<Geometry> {
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for s in shapes {
        for c in s.world_corners() {
            lo = lo.inf(&c);
            hi = hi.sup(&c);
        }
    }
    let m = spec.margin_mm;
    lo -= Vec3::repeat(m);
    hi += Vec3::repeat(m);
    // x range symmetric about 0 with a voxel center on x = 0
    let half_x = lo.x.abs().max(hi.x.abs());
    let nx_half = (half_x / spec.spacing[0]).ceil() as usize;
    let mut dims = [2 * nx_half + 1, 0, 0];
    let mut origin = [-(nx_half as f64) * spec.spacing[0], lo.y, lo.z];
    for a in 1..3 {
        dims[a] = ((hi[a] - lo[a]) / spec.spacing[a]).ceil() as usize + 1;
        origin[a] = lo[a];
    }
    Geometry::new(dims, spec.spacing, origin)
}

/// Noiseless phantom volume plus analytic truth.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(Volume, PhantomTruth)> {
    spec.validate()?;
    let shapes = level_shapes(spec);
    let geom = phantom_geometry(spec, &shapes)?;
    let nlev = shapes.len();
    let plane_len = geom.dims[0] * geom.dims[1];

    // code: 0 = soft tissue, otherwise 1 + 3·level + tissue
    let mut codes = vec![0u8; geom.len()];
    codes
        .par_chunks_mut(plane_len)
        .enumerate()
        .for_each(|(k, slab)| {
            for j in 0..geom.dims[1] {
                for i in 0..geom.dims[0] {
                    let p = geom.voxel_to_world([i as f64, j as f64, k as f64]);
                    let mut best: Option<(usize, Tissue)> = None;
                    for (li, s) in shapes.iter().enumerate() {
                        if let Some(t) = s.tissue(&p) {
                            let rank = |t: Tissue| match t {
                                Tissue::Trabecular => 0,
                                Tissue::Cortical => 1,
                                Tissue::Posterior => 2,
                            };
                            if best.is_none_or(|(_, bt)| rank(t) < rank(bt)) {
                                best = Some((li, t));
                            }
                        }
                    }
                    slab[i + geom.dims[0] * j] = match best {
                        None => 0,
                        Some((li, t)) => {
                            1 + 3 * li as u8
                                + match t {
                                    Tissue::Trabecular => 0,
                                    Tissue::Cortical => 1,
                                    Tissue::Posterior => 2,
                                }
                        }
                    };
                }
            }
        });

    let soft = spec.soft_tissue_value as f32;
    let data: Vec<f32> = codes
        .par_iter()
        .map(|&c| {
            if c == 0 {
                return soft;
            }
            let li = ((c - 1) / 3) as usize;
            let l = &spec.levels[li];
            match (c - 1) % 3 {
                0 => l.trabecular_bmd as f32,
                _ => l.cortical_bmd as f32,
            }
        })
        .collect();
    let volume = Volume::new(geom, data)?;

    let mut levels = Vec::with_capacity(nlev);
    for (li, (l, s)) in spec.levels.iter().zip(&shapes).enumerate() {
        let trab_code = 1 + 3 * li as u8;
        let body_code = trab_code + 1;
        let body_mask = Mask::from_bits(
            geom,
            codes
                .iter()
                .map(|&c| c == trab_code || c == body_code)
                .collect(),
        )?;
        let trabecular_mask =
            Mask::from_bits(geom, codes.iter().map(|&c| c == trab_code).collect())?;
        let ext = s.canal_half_extent();
        let n = (ext / spec.spacing[2]).floor() as i64;
        let canal_centerline = (-n..=n)
            .map(|q| s.canal_point(q as f64 * spec.spacing[2]))
            .collect();
        levels.push(LevelTruth {
            name: l.name.clone(),
            shape: s.clone(),
            nominal_bmd: l.trabecular_bmd,
            body_volume_mm3: s.body_volume_mm3(),
            trabecular_volume_mm3: s.trabecular_volume_mm3(),
            body_mask,
            trabecular_mask,
            canal_centerline,
        });
    }

    let disk_planes = shapes
        .windows(2)
        .map(|pair| {
            let (lo, hi) = (&pair[0], &pair[1]);
            let n = (lo.w + hi.w).normalize();
            let mid = 0.5 * ((lo.center + lo.w * (lo.h / 2.0)) + (hi.center - hi.w * (hi.h / 2.0)));
            Plane::through(&mid, &n).expect("non-degenerate normal")
        })
        .collect();

    Ok((volume, PhantomTruth { levels, disk_planes }))
}

/// Independent zero-mean Gaussian noise per voxel, deterministic in `seed`.
pub fn add_noise(vol: &Volume, sigma: f64, seed: u64) -> Result<Volume> {
    if !(sigma >= 0.0) {
        return Err(Error::InvalidParam(format!("noise sigma {sigma} < 0")));
    }
    if sigma == 0.0 {
        return Ok(vol.clone());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidParam(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = vol
        .data()
        .iter()
        .map(|&v| (v as f64 + normal.sample(&mut rng)) as f32)
        .collect();
    Volume::new(*vol.geometry(), data)
}

/// Phantom with its own noise level and seed applied.
pub fn generate_noisy_phantom(spec: &PhantomSpec) -> Result<(Volume, PhantomTruth)> {
    let (vol, truth) = generate_phantom(spec)?;
    Ok((add_noise(&vol, spec.noise_sigma, spec.rng_seed)?, truth))
}
