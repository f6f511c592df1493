//! Vertebral coordinate system from four landmarks and the cylinder and
//! "pacman" VOIs placed in it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::presegment::CanalLine;
use crate::volgrid::Mask;

pub fn centre_of_volume(mask: &Mask) -> Result<Vec3> {
    mask.centroid().ok_or(Error::EmptyMask("centre of volume"))
}

/// Natural cubic spline in one coordinate over knots `t`.
#[derive(Clone, Debug)]
pub struct Cubic {
    t: Vec<f64>,
    y: Vec<f64>,
    m: Vec<f64>,
}

impl Cubic {
    fn new(t: &[f64], y: &[f64]) -> Self {
        let n = t.len();
        let mut m = vec![0.0; n];
        if n > 2 {
            // tridiagonal system for interior second derivatives (Thomas algorithm)
            let k = n - 2;
            let mut diag = vec![0.0; k];
            let mut rhs = vec![0.0; k];
            let mut sub = vec![0.0; k];
            for i in 1..n - 1 {
                let h0 = t[i] - t[i - 1];
                let h1 = t[i + 1] - t[i];
                diag[i - 1] = 2.0 * (h0 + h1);
                sub[i - 1] = h0;
                rhs[i - 1] = 6.0 * ((y[i + 1] - y[i]) / h1 - (y[i] - y[i - 1]) / h0);
            }
            for i in 1..k {
                let w = sub[i] / diag[i - 1];
                let h = t[i + 1] - t[i];
                diag[i] -= w * h;
                rhs[i] -= w * rhs[i - 1];
            }
            for i in (0..k).rev() {
                let h = t[i + 2] - t[i + 1];
                let next = if i + 1 < k { m[i + 2] } else { 0.0 };
                m[i + 1] = (rhs[i] - h * next) / diag[i];
            }
        }
        Self { t: t.to_vec(), y: y.to_vec(), m }
    }

    fn segment(&self, s: f64) -> usize {
        let n = self.t.len();
        match self.t.partition_point(|&x| x <= s) {
            0 => 0,
            p if p >= n => n - 2,
            p => p - 1,
        }
    }

    fn eval(&self, s: f64) -> (f64, f64) {
        let i = self.segment(s);
        let (t0, t1) = (self.t[i], self.t[i + 1]);
        let h = t1 - t0;
        let (a, b) = ((t1 - s) / h, (s - t0) / h);
        let (m0, m1) = (self.m[i], self.m[i + 1]);
        let v = a * self.y[i] + b * self.y[i + 1] + ((a * a * a - a) * m0 + (b * b * b - b) * m1) * h * h / 6.0;
        let d = (self.y[i + 1] - self.y[i]) / h - (3.0 * a * a - 1.0) / 6.0 * h * m0 + (3.0 * b * b - 1.0) / 6.0 * h * m1;
        (v, d)
    }
}

/// Interpolating curve through the body centers, caudal → cranial.
#[derive(Clone, Debug)]
pub enum ColumnSpline {
    /// A single center: the image z axis through it.
    Vertical(Vec3),
    Curve { length: f64, coords: [Cubic; 3] },
}

impl ColumnSpline {
    pub fn point(&self, s: f64) -> Vec3 {
        match self {
            Self::Vertical(p) => p + Vec3::z() * s,
            Self::Curve { coords, .. } => Vec3::new(coords[0].eval(s).0, coords[1].eval(s).0, coords[2].eval(s).0),
        }
    }

    pub fn tangent(&self, s: f64) -> Vec3 {
        match self {
            Self::Vertical(_) => Vec3::z(),
            Self::Curve { coords, .. } => {
                Vec3::new(coords[0].eval(s).1, coords[1].eval(s).1, coords[2].eval(s).1).normalize()
            }
        }
    }

    pub fn length(&self) -> f64 {
        match self {
            Self::Vertical(_) => 0.0,
            Self::Curve { length, .. } => *length,
        }
    }

    /// Curve parameter closest to `p`: 1000 uniform samples, then a golden
    /// section search in the bracketing interval.
    pub fn nearest_param(&self, p: &Vec3) -> f64 {
        let Self::Curve { length, .. } = self else {
            return p.z - self.point(0.0).z;
        };
        let n = 1000;
        let dist = |s: f64| (self.point(s) - p).norm_squared();
        let (mut best, mut bd) = (0.0, f64::INFINITY);
        for i in 0..=n {
            let s = length * i as f64 / n as f64;
            let d = dist(s);
            if d < bd {
                (best, bd) = (s, d);
            }
        }
        let h = length / n as f64;
        let (mut a, mut b) = ((best - h).max(0.0), (best + h).min(*length));
        let g = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..60 {
            let c = b - g * (b - a);
            let d = a + g * (b - a);
            if dist(c) <= dist(d) {
                b = d;
            } else {
                a = c;
            }
        }
        0.5 * (a + b)
    }
}

pub fn fit_column_spline(points: &[Vec3]) -> Result<ColumnSpline> {
    match points.len() {
        0 => Err(Error::Anatomy("no centres for the column spline".into())),
        1 => Ok(ColumnSpline::Vertical(points[0])),
        _ => {
            let mut t = vec![0.0];
            for w in points.windows(2) {
                let d = (w[1] - w[0]).norm();
                if d < 1e-9 {
                    return Err(Error::Anatomy("duplicate centres in the column spline".into()));
                }
                t.push(t.last().unwrap() + d);
            }
            let coord = |a: usize| Cubic::new(&t, &points.iter().map(|p| p[a]).collect::<Vec<_>>());
            Ok(ColumnSpline::Curve {
                length: *t.last().unwrap(),
                coords: [coord(0), coord(1), coord(2)],
            })
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Landmarks {
    pub m1: Vec3,
    pub m2: Vec3,
    pub m3: Option<Vec3>,
    pub m4: Option<Vec3>,
}

/// Right-handed orthonormal frame at M1: z along the column, x toward the
/// canal.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vcs {
    pub origin: Vec3,
    pub x: Vec3,
    pub y: Vec3,
    pub z: Vec3,
}

impl Vcs {
    pub fn to_local(&self, p: &Vec3) -> Vec3 {
        let d = p - self.origin;
        Vec3::new(d.dot(&self.x), d.dot(&self.y), d.dot(&self.z))
    }
}

/// Where the plane through `m1` with normal `z` crosses the canal polyline;
/// the crossing nearest `m1` if there are several.
fn canal_crossing(m1: &Vec3, z: &Vec3, canal: &CanalLine) -> Option<Vec3> {
    let sd = |p: &Vec3| (p - m1).dot(z);
    let mut best: Option<Vec3> = None;
    for w in canal.points.windows(2) {
        let (a, b) = (sd(&w[0]), sd(&w[1]));
        if (a <= 0.0 && b >= 0.0) || (a >= 0.0 && b <= 0.0) {
            let p = if a == b { w[0] } else { w[0] + (w[1] - w[0]) * (a / (a - b)) };
            if best.is_none_or(|q| (p - m1).norm() < (q - m1).norm()) {
                best = Some(p);
            }
        }
    }
    best
}

pub fn compute_vcs(
    m1: Vec3,
    canal: &CanalLine,
    spline: &ColumnSpline,
    m3: Option<Vec3>,
    m4: Option<Vec3>,
) -> Result<(Landmarks, Vcs)> {
    let z = spline.tangent(spline.nearest_param(&m1));
    let m2 = canal_crossing(&m1, &z, canal)
        .ok_or_else(|| Error::Anatomy("canal centerline does not cross the axial plane through M1".into()))?;
    let d = m2 - m1;
    let x = (d - z * d.dot(&z))
        .try_normalize(1e-9)
        .ok_or_else(|| Error::Anatomy("M2 coincides with M1 in the axial plane".into()))?;
    let y = z.cross(&x);
    Ok((Landmarks { m1, m2, m3, m4 }, Vcs { origin: m1, x, y, z }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VoiKind {
    Cylinder,
    Pacman,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoiSpec {
    pub kind: VoiKind,
    pub radius_fraction: f64,
    pub height_fraction: f64,
}

impl VoiSpec {
    pub fn validate(&self) -> Result<()> {
        for f in [self.radius_fraction, self.height_fraction] {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::InvalidParam(format!("VOI fraction {f} outside (0, 1]")));
            }
        }
        Ok(())
    }
}

/// Half-extents of the body along the VCS axes (mm).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BodyExtents {
    pub half: [f64; 3],
}

impl BodyExtents {
    pub fn measure(vcs: &Vcs, body: &Mask) -> Result<Self> {
        let g = body.geometry();
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for i in body.indices() {
            let l = vcs.to_local(&g.center(i));
            lo = lo.inf(&l);
            hi = hi.sup(&l);
        }
        if body.is_empty() {
            return Err(Error::EmptyMask("body extents"));
        }
        let h = (hi - lo) / 2.0;
        Ok(Self { half: [h.x, h.y, h.z] })
    }

    /// Body radius in the axial plane: the smaller in-plane half-extent.
    pub fn radius(&self) -> f64 {
        self.half[0].min(self.half[1])
    }

    pub fn height(&self) -> f64 {
        2.0 * self.half[2]
    }
}

/// Angular sector between the rays toward `m3` and `m4` that contains +x,
/// as `(start, extent)` in radians, counter-clockwise from `start`.
fn excluded_sector(vcs: &Vcs, m3: &Vec3, m4: &Vec3) -> Result<(f64, f64)> {
    let tau = std::f64::consts::TAU;
    let ang = |p: &Vec3| {
        let l = vcs.to_local(p);
        l.y.atan2(l.x).rem_euclid(tau)
    };
    let (a, b) = (ang(m3), ang(m4));
    // ccw sector from a to b contains angle 0 iff it wraps past 2π
    let ccw_ab = (b - a).rem_euclid(tau);
    let (start, extent) = if a + ccw_ab >= tau || ccw_ab == 0.0 { (a, ccw_ab) } else { (b, tau - ccw_ab) };
    let deg = extent.to_degrees();
    if !(deg > 0.0 && deg < 180.0) {
        return Err(Error::Anatomy(format!("pacman sector spans {deg:.1} degrees, outside (0, 180)")));
    }
    Ok((start, extent))
}

/// VOI mask clipped to `within`. The cylinder is centered on the VCS origin
/// along z; the pacman additionally drops the posterior sector bounded by
/// the rays toward M3 and M4.
pub fn make_voi(
    vcs: &Vcs,
    spec: &VoiSpec,
    extents: &BodyExtents,
    within: &Mask,
    m3: Option<Vec3>,
    m4: Option<Vec3>,
) -> Result<Mask> {
    spec.validate()?;
    let r = spec.radius_fraction * extents.radius();
    let hh = 0.5 * spec.height_fraction * extents.height();
    let sector = match spec.kind {
        VoiKind::Cylinder => None,
        VoiKind::Pacman => {
            let (Some(a), Some(b)) = (m3, m4) else {
                return Err(Error::Anatomy("pacman VOI needs both M3 and M4".into()));
            };
            Some(excluded_sector(vcs, &a, &b)?)
        }
    };
    let tau = std::f64::consts::TAU;
    let g = *within.geometry();
    let bits = (0..g.len())
        .map(|i| {
            if !within.get(i) {
                return false;
            }
            let l = vcs.to_local(&g.center(i));
            if l.z.abs() > hh || l.x * l.x + l.y * l.y > r * r {
                return false;
            }
            match sector {
                None => true,
                Some((start, extent)) => {
                    if l.x == 0.0 && l.y == 0.0 {
                        return true;
                    }
                    let a = (l.y.atan2(l.x) - start).rem_euclid(tau);
                    a > extent
                }
            }
        })
        .collect();
    let m = Mask::from_bits(g, bits)?;
    if m.is_empty() {
        return Err(Error::EmptyMask("VOI"));
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volgrid::Geometry;
    use proptest::prelude::*;

    #[test]
    fn cov_examples() {
        let g = Geometry::new([4, 4, 4], [1.0; 3], [0.0; 3]).unwrap();
        let m = Mask::from_fn(g, |i, j, k| i >= 1 && j >= 1 && k >= 1);
        assert_eq!(centre_of_volume(&m).unwrap(), Vec3::new(2.0, 2.0, 2.0));
        let mut one = Mask::empty(g);
        one.set(g.index(3, 0, 2), true);
        assert_eq!(centre_of_volume(&one).unwrap(), Vec3::new(3.0, 0.0, 2.0));
        let l = Mask::from_fn(g, |i, j, k| k == 0 && ((i, j) == (0, 0) || (i, j) == (1, 0) || (i, j) == (0, 1)));
        let c = centre_of_volume(&l).unwrap();
        assert!((c - Vec3::new(1.0 / 3.0, 1.0 / 3.0, 0.0)).norm() < 1e-12);
        assert!(centre_of_volume(&Mask::empty(g)).is_err());
    }

    #[test]
    fn collinear_spline_tangent_is_z() {
        let pts = [Vec3::new(1.0, 2.0, 0.0), Vec3::new(1.0, 2.0, 30.0), Vec3::new(1.0, 2.0, 65.0)];
        let s = fit_column_spline(&pts).unwrap();
        for i in 0..=20 {
            let t = s.tangent(s.length() * i as f64 / 20.0);
            assert!((t - Vec3::z()).norm() < 1e-9);
        }
    }

    #[test]
    fn spline_interpolates_knots() {
        let pts = [
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(2.0, -1.0, 30.0),
            Vec3::new(3.0, 1.0, 61.0),
            Vec3::new(1.0, 4.0, 90.0),
        ];
        let s = fit_column_spline(&pts).unwrap();
        let mut t = 0.0;
        for (i, p) in pts.iter().enumerate() {
            if i > 0 {
                t += (pts[i] - pts[i - 1]).norm();
            }
            assert!((s.point(t) - p).norm() < 1e-9);
        }
        assert!(fit_column_spline(&[pts[0], pts[0]]).is_err());
    }

    #[test]
    fn circle_arc_midpoint_tangent() {
        let r = 100.0;
        let pts: Vec<Vec3> = [-30.0f64, 0.0, 30.0]
            .iter()
            .map(|a| {
                let a = a.to_radians();
                Vec3::new(r * a.cos(), 0.0, r * a.sin())
            })
            .collect();
        let s = fit_column_spline(&pts).unwrap();
        let t = s.tangent(s.nearest_param(&pts[1]));
        let angle = t.dot(&Vec3::z()).clamp(-1.0, 1.0).acos().to_degrees();
        assert!(angle < 2.0, "{angle}");
    }

    fn straight_canal(offset: Vec3) -> CanalLine {
        CanalLine {
            points: (-20..=20).map(|k| offset + Vec3::new(0.0, 0.0, k as f64)).collect(),
            detected: vec![true; 41],
        }
    }

    #[test]
    fn straight_column_gives_world_axes() {
        let s = fit_column_spline(&[Vec3::new(0.0, 0.0, -30.0), Vec3::zeros(), Vec3::new(0.0, 0.0, 30.0)]).unwrap();
        let (lm, v) = compute_vcs(Vec3::zeros(), &straight_canal(Vec3::new(25.0, 0.0, 0.0)), &s, None, None).unwrap();
        assert!((lm.m2 - Vec3::new(25.0, 0.0, 0.0)).norm() < 1e-9);
        assert!((v.x - Vec3::x()).norm() < 1e-9);
        assert!((v.y - Vec3::y()).norm() < 1e-9);
        assert!((v.z - Vec3::z()).norm() < 1e-9);
    }

    #[test]
    fn truncated_canal_is_an_error() {
        let s = fit_column_spline(&[Vec3::zeros()]).unwrap();
        let canal = straight_canal(Vec3::new(25.0, 0.0, 100.0));
        assert!(compute_vcs(Vec3::zeros(), &canal, &s, None, None).is_err());
    }

    proptest! {
        #[test]
        fn vcs_orthonormal_right_handed(
            dx in -5.0f64..5.0, dy in -5.0f64..5.0, cx in 10.0f64..40.0, cy in -10.0f64..10.0, bend in -8.0f64..8.0,
        ) {
            let pts = [Vec3::new(0.0, 0.0, -30.0), Vec3::new(dx, dy, 0.0), Vec3::new(bend, 0.0, 32.0)];
            let s = fit_column_spline(&pts).unwrap();
            let canal = straight_canal(Vec3::new(cx, cy, 0.0));
            let (_, v) = compute_vcs(pts[1], &canal, &s, None, None).unwrap();
            for (a, b) in [(v.x, v.y), (v.y, v.z), (v.x, v.z)] {
                prop_assert!(a.dot(&b).abs() < 1e-9);
            }
            for a in [v.x, v.y, v.z] {
                prop_assert!((a.norm() - 1.0).abs() < 1e-9);
            }
            prop_assert!((v.x.cross(&v.y) - v.z).norm() < 1e-9);
        }
    }

    fn world_vcs(origin: Vec3) -> Vcs {
        Vcs { origin, x: Vec3::x(), y: Vec3::y(), z: Vec3::z() }
    }

    #[test]
    fn pacman_fraction_matches_sector() {
        let g = Geometry::new([100, 100, 100], [1.0; 3], [-49.5; 3]).unwrap();
        let full = Mask::full(g);
        let v = world_vcs(Vec3::zeros());
        let ext = BodyExtents { half: [50.0, 50.0, 50.0] };
        let cyl = VoiSpec { kind: VoiKind::Cylinder, radius_fraction: 0.8, height_fraction: 0.5 };
        let pac = VoiSpec { kind: VoiKind::Pacman, ..cyl };
        for deg in [30.0f64, 60.0, 90.0, 150.0] {
            let h = (deg / 2.0).to_radians();
            let m3 = Vec3::new(10.0 * h.cos(), -10.0 * h.sin(), 0.0);
            let m4 = Vec3::new(10.0 * h.cos(), 10.0 * h.sin(), 0.0);
            let c = make_voi(&v, &cyl, &ext, &full, Some(m3), Some(m4)).unwrap().count() as f64;
            let p = make_voi(&v, &pac, &ext, &full, Some(m3), Some(m4)).unwrap().count() as f64;
            let want = 1.0 - deg / 360.0;
            assert!((p / c - want).abs() < 0.02, "{deg}: {} vs {want}", p / c);
        }
    }

    #[test]
    fn pacman_symmetric_and_inside_body() {
        let g = Geometry::new([41, 41, 21], [1.0; 3], [-20.0, -20.0, -10.0]).unwrap();
        let body = Mask::from_world_fn(g, |p| p.x * p.x / 400.0 + p.y * p.y / 225.0 <= 1.0);
        let v = world_vcs(Vec3::zeros());
        let ext = BodyExtents::measure(&v, &body).unwrap();
        let pac = VoiSpec { kind: VoiKind::Pacman, radius_fraction: 0.9, height_fraction: 0.5 };
        let m = make_voi(&v, &pac, &ext, &body, Some(Vec3::new(15.0, -7.0, 0.0)), Some(Vec3::new(15.0, 7.0, 0.0))).unwrap();
        assert!(m.is_subset_of(&body));
        for i in m.indices() {
            let [x, y, z] = g.coords(i);
            assert!(m.get(g.index(x, 40 - y, z)));
        }
    }

    #[test]
    fn sector_must_be_below_half_turn() {
        let v = world_vcs(Vec3::zeros());
        // rays pointing anteriorly: the sector holding +x is a reflex angle
        assert!(excluded_sector(&v, &Vec3::new(-10.0, -1.0, 0.0), &Vec3::new(-10.0, 1.0, 0.0)).is_err());
        let (_, e) = excluded_sector(&v, &Vec3::new(10.0, 10.0, 0.0), &Vec3::new(10.0, -10.0, 0.0)).unwrap();
        assert!((e.to_degrees() - 90.0).abs() < 1e-9);
    }

    #[test]
    fn voi_translation_equivariant() {
        let g = Geometry::new([40, 40, 20], [1.0; 3], [-19.5, -19.5, -9.5]).unwrap();
        let body = Mask::from_world_fn(g, |p| p.x * p.x + p.y * p.y <= 300.0);
        let shift = Vec3::new(7.0, -3.0, 2.0);
        let g2 = Geometry::new(g.dims, g.spacing, [g.origin[0] + shift.x, g.origin[1] + shift.y, g.origin[2] + shift.z]).unwrap();
        let body2 = Mask::from_bits(g2, body.bits().to_vec()).unwrap();
        let pac = VoiSpec { kind: VoiKind::Pacman, radius_fraction: 0.6, height_fraction: 0.5 };
        let (m3, m4) = (Vec3::new(12.0, -6.0, 0.0), Vec3::new(12.0, 6.0, 0.0));
        let v = world_vcs(Vec3::new(0.25, 0.0, 0.0));
        let v2 = world_vcs(v.origin + shift);
        let e = BodyExtents::measure(&v, &body).unwrap();
        let a = make_voi(&v, &pac, &e, &body, Some(m3), Some(m4)).unwrap();
        let b = make_voi(&v2, &pac, &e, &body2, Some(m3 + shift), Some(m4 + shift)).unwrap();
        assert_eq!(a.bits(), b.bits());
    }
}
