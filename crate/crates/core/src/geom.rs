//! Small geometric primitives shared across modules.

use serde::{Deserialize, Serialize};

pub use crate::volgrid::Vec3;

/// Oriented plane `normal · x = offset`, normal of unit length.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plane {
    pub normal: Vec3,
    pub offset: f64,
}

impl Plane {
    /// Plane through `point` with the given (not necessarily unit) normal.
    pub fn through(point: &Vec3, normal: &Vec3) -> Option<Self> {
        let n = normal.try_normalize(1e-12)?;
        Some(Self {
            normal: n,
            offset: n.dot(point),
        })
    }

    #[inline]
    pub fn signed_distance(&self, p: &Vec3) -> f64 {
        self.normal.dot(p) - self.offset
    }

    /// Closest point of the plane to `p`.
    pub fn project(&self, p: &Vec3) -> Vec3 {
        p - self.normal * self.signed_distance(p)
    }

    /// Angle between the plane normal and `dir`, in degrees (0..=90).
    pub fn tilt_from(&self, dir: &Vec3) -> f64 {
        let c = self.normal.dot(&dir.normalize()).abs().min(1.0);
        c.acos().to_degrees()
    }
}

/// Two unit vectors completing `n` to a right-handed orthonormal frame.
/// Deterministic: the helper axis is the world axis least aligned with `n`.
pub fn orthonormal_basis(n: &Vec3) -> (Vec3, Vec3) {
    let n = n.normalize();
    let helper = if n.x.abs() <= n.y.abs() && n.x.abs() <= n.z.abs() {
        Vec3::x()
    } else if n.y.abs() <= n.z.abs() {
        Vec3::y()
    } else {
        Vec3::z()
    };
    let e1 = (helper - n * n.dot(&helper)).normalize();
    let e2 = n.cross(&e1);
    (e1, e2)
}

/// Rotation of `v` about the world x axis by `deg` degrees.
pub fn rotate_x(v: &Vec3, deg: f64) -> Vec3 {
    let (s, c) = deg.to_radians().sin_cos();
    Vec3::new(v.x, c * v.y - s * v.z, s * v.y + c * v.z)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basis_is_orthonormal_and_right_handed() {
        for n in [
            Vec3::new(0.0, 0.0, 1.0),
            Vec3::new(1.0, 2.0, -0.5),
            Vec3::new(-3.0, 0.1, 0.2),
        ] {
            let nn = n.normalize();
            let (a, b) = orthonormal_basis(&n);
            assert!(a.dot(&nn).abs() < 1e-12 && b.dot(&nn).abs() < 1e-12 && a.dot(&b).abs() < 1e-12);
            assert!((a.norm() - 1.0).abs() < 1e-12 && (b.norm() - 1.0).abs() < 1e-12);
            assert!((a.cross(&b) - nn).norm() < 1e-12);
        }
    }

    #[test]
    fn plane_distance_and_tilt() {
        let p = Plane::through(&Vec3::new(0.0, 0.0, 5.0), &Vec3::new(0.0, 0.0, 2.0)).unwrap();
        assert_eq!(p.signed_distance(&Vec3::new(3.0, 1.0, 6.0)), 1.0);
        assert!(p.tilt_from(&Vec3::z()) < 1e-12);
        let t = rotate_x(&Vec3::z(), 10.0);
        let q = Plane::through(&Vec3::zeros(), &t).unwrap();
        assert!((q.tilt_from(&Vec3::z()) - 10.0).abs() < 1e-9);
    }
}
