use std::cmp::Reverse;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};
use crate::volgrid::{LabelMap, Mask};

/// Label of contact (SKIZ) voxels in [`Skiz::labels`].
pub const CONTACT: u32 = u32::MAX;

#[derive(Clone, Debug, PartialEq)]
pub struct Skiz {
    /// Residual label, [`CONTACT`], or 0 outside `within` / unreached.
    pub labels: LabelMap,
    pub contact: Mask,
    /// Voxels of `within` not connected to any residual.
    pub unreached: Mask,
}

/// Geodesic zones of influence of the labelled residuals inside `within`.
///
/// All labels grow in lockstep by 6-neighbour geodesic distance, kept in
/// integer micrometres so equal path lengths compare exactly; ties are taken
/// in (distance, label, voxel index) order. A voxel reached at the same
/// distance by two labels is contact. Where two zones meet between voxels,
/// the voxel on the higher-label side becomes contact, so no two different
/// labels are ever 6-adjacent.
pub fn skiz_partition(residuals: &LabelMap, within: &Mask) -> Result<Skiz> {
    let geom = *within.geometry();
    if residuals.geometry() != &geom {
        return Err(Error::GeometryMismatch);
    }
    let step = geom.spacing.map(|s| (s * 1000.0).round() as u64);
    let mut dist = vec![u64::MAX; geom.len()];
    let mut label = vec![0u32; geom.len()];
    let mut heap = BinaryHeap::new();
    for i in 0..geom.len() {
        let l = residuals.get(i);
        if l == 0 {
            continue;
        }
        if !within.get(i) {
            return Err(Error::Morphology("residual voxel outside the dissection domain".into()));
        }
        dist[i] = 0;
        label[i] = l;
        heap.push(Reverse((0u64, l, i)));
    }
    let mut nb = Vec::new();
    while let Some(Reverse((d, l, i))) = heap.pop() {
        if d > dist[i] || label[i] != l {
            continue;
        }
        let [x, y, z] = geom.coords(i);
        geom.neighbors6(i, &mut nb);
        for &n in &nb {
            if !within.get(n) {
                continue;
            }
            let [a, b, c] = geom.coords(n);
            let axis = if a != x {
                0
            } else if b != y {
                1
            } else {
                2
            };
            debug_assert!(a != x || b != y || c != z);
            let nd = d + step[axis];
            if nd < dist[n] {
                dist[n] = nd;
                label[n] = l;
                heap.push(Reverse((nd, l, n)));
            } else if nd == dist[n] && label[n] != l && label[n] != CONTACT {
                label[n] = CONTACT;
            }
        }
    }
    // between-voxel interfaces
    let mut extra = Vec::new();
    for i in within.indices() {
        let l = label[i];
        if l == 0 || l == CONTACT {
            continue;
        }
        geom.neighbors6(i, &mut nb);
        if nb.iter().any(|&n| {
            let m = label[n];
            m != 0 && m != CONTACT && m < l
        }) {
            extra.push(i);
        }
    }
    for i in extra {
        label[i] = CONTACT;
    }
    let contact = Mask::from_bits(geom, label.iter().map(|&l| l == CONTACT).collect())?;
    let unreached = Mask::from_bits(geom, (0..geom.len()).map(|i| within.get(i) && label[i] == 0).collect())?;
    Ok(Skiz {
        labels: LabelMap::from_labels(geom, label)?,
        contact,
        unreached,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volgrid::Geometry;

    #[test]
    fn bisector_of_two_sources() {
        let g = Geometry::new([21, 21, 21], [1.0; 3], [0.0; 3]).unwrap();
        for (xa, xb) in [(4, 16), (4, 15), (0, 20)] {
            let mut res = LabelMap::new(g);
            res.set(g.index(xa, 10, 10), 1);
            res.set(g.index(xb, 10, 10), 2);
            let s = skiz_partition(&res, &Mask::full(g)).unwrap();
            let mid = (xa + xb) as f64 / 2.0;
            assert!(!s.contact.is_empty());
            for i in s.contact.indices() {
                let x = g.coords(i)[0] as f64;
                assert!((x - mid).abs() <= 1.0, "contact at {x}, bisector {mid}");
            }
            // every voxel has exactly one label or is contact
            for i in 0..g.len() {
                let l = s.labels.get(i);
                assert!(l == 1 || l == 2 || l == CONTACT);
            }
        }
    }

    #[test]
    fn residual_outside_domain_rejected() {
        let g = Geometry::new([5, 5, 5], [1.0; 3], [0.0; 3]).unwrap();
        let mut res = LabelMap::new(g);
        res.set(0, 1);
        let within = Mask::from_fn(g, |i, _, _| i > 0);
        assert!(skiz_partition(&res, &within).is_err());
    }

    #[test]
    fn unreached_components_reported() {
        let g = Geometry::new([9, 3, 3], [1.0; 3], [0.0; 3]).unwrap();
        let within = Mask::from_fn(g, |i, _, _| i != 4);
        let mut res = LabelMap::new(g);
        res.set(g.index(0, 1, 1), 1);
        res.set(g.index(1, 1, 1), 2);
        let s = skiz_partition(&res, &within).unwrap();
        assert_eq!(s.unreached.count(), 4 * 9);
    }
}
