use crate::error::{Error, Result};
use crate::volgrid::{LabelMap, Mask};

use super::edt::interior_distance;
use super::label::{components, Connectivity};

/// Main components left by the smallest disconnecting erosion.
#[derive(Clone, Debug, PartialEq)]
pub struct Residuals {
    /// `1..=expected`, in descending size.
    pub labels: LabelMap,
    pub sizes: Vec<usize>,
    /// Residuals are `{d > threshold}` of the interior distance (mm).
    pub threshold: f64,
}

fn find(parent: &mut [u32], mut x: u32) -> u32 {
    while parent[x as usize] != x {
        let p = parent[x as usize];
        parent[x as usize] = parent[p as usize];
        x = p;
    }
    x
}

/// Erode `mask` by increasing Euclidean distance until it falls apart into at
/// least `expected` components of `min_size` voxels or more; return the
/// `expected` largest at the smallest such erosion depth.
///
/// The erosions `{d > t}` are the superlevel sets of the interior distance,
/// so one union-find sweep over voxels in decreasing distance visits every
/// candidate depth.
pub fn ultimate_erode(mask: &Mask, expected: usize, min_size: usize) -> Result<Residuals> {
    if expected < 2 {
        return Err(Error::InvalidParam("ultimate erosion needs at least two components".into()));
    }
    let geom = *mask.geometry();
    let dist = interior_distance(mask)?;
    let d = dist.values();
    let mut order: Vec<u32> = mask.indices().map(|i| i as u32).collect();
    if order.is_empty() {
        return Err(Error::EmptyMask("ultimate erosion input"));
    }
    order.sort_by(|&a, &b| d[b as usize].total_cmp(&d[a as usize]).then(a.cmp(&b)));

    const NONE: u32 = u32::MAX;
    let mut parent = vec![NONE; geom.len()];
    let mut size = vec![0usize; geom.len()];
    let mut big = 0usize;
    let mut best_level: Option<f64> = None;
    let mut nb = Vec::new();
    let mut q = 0;
    while q < order.len() {
        let level = d[order[q] as usize];
        while q < order.len() && d[order[q] as usize] == level {
            let v = order[q];
            parent[v as usize] = v;
            size[v as usize] = 1;
            if min_size <= 1 {
                big += 1;
            }
            geom.neighbors6(v as usize, &mut nb);
            for &n in &nb {
                if parent[n] == NONE {
                    continue;
                }
                let (a, b) = (find(&mut parent, v), find(&mut parent, n as u32));
                if a == b {
                    continue;
                }
                let (sa, sb) = (size[a as usize], size[b as usize]);
                big -= usize::from(sa >= min_size) + usize::from(sb >= min_size);
                let (root, child) = if sa >= sb { (a, b) } else { (b, a) };
                parent[child as usize] = root;
                size[root as usize] = sa + sb;
                big += usize::from(sa + sb >= min_size);
            }
            q += 1;
        }
        if big >= expected {
            best_level = Some(level);
        }
    }
    let level = best_level.ok_or(Error::NoWaist(expected))?;

    let kept = Mask::from_bits(geom, d.iter().zip(mask.bits()).map(|(&x, &m)| m && x >= level).collect())?;
    let (labels, sizes) = components(&kept, Connectivity::Six);
    let mut out = LabelMap::new(geom);
    for i in kept.indices() {
        let l = labels.get(i);
        if (l as usize) <= expected {
            out.set(i, l);
        }
    }
    // the erosion depth is the next lower distance value below the residual level
    let threshold = order
        .iter()
        .map(|&v| d[v as usize])
        .find(|&x| x < level)
        .unwrap_or(0.0);
    Ok(Residuals {
        labels: out,
        sizes: sizes.into_iter().take(expected).collect(),
        threshold,
    })
}
