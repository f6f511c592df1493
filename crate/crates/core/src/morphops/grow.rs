use crate::classify::{classify_voxel, ThresholdBand};
use crate::error::{Error, Result};
use crate::volgrid::{Mask, Volume};

use super::edt::squared_edt;
use super::label::enclosed_background;

/// 6-connected flood from `seeds` through voxels of `region` that classify as
/// bone.
pub fn volume_grow(vol: &Volume, seeds: &[usize], band: &ThresholdBand, region: &Mask, radius: usize) -> Result<Mask> {
    let geom = *vol.geometry();
    if region.geometry() != &geom {
        return Err(Error::GeometryMismatch);
    }
    if seeds.is_empty() {
        return Err(Error::EmptyMask("grow seeds"));
    }
    let mut out = Mask::empty(geom);
    let mut stack = Vec::with_capacity(seeds.len());
    for &s in seeds {
        if s >= geom.len() || !region.get(s) || !classify_voxel(vol, s, band, radius) {
            return Err(Error::Morphology(format!("seed voxel {s} is not bone inside the region")));
        }
        if !out.get(s) {
            out.set(s, true);
            stack.push(s);
        }
    }
    let mut nb = Vec::new();
    while let Some(p) = stack.pop() {
        geom.neighbors6(p, &mut nb);
        for &q in &nb {
            if !out.get(q) && region.get(q) && classify_voxel(vol, q, band, radius) {
                out.set(q, true);
                stack.push(q);
            }
        }
    }
    Ok(out)
}

/// Closing with a Euclidean ball of radius `r` (mm) as the EDT threshold
/// pair `ε(δ(X))`, `δ(X) = {d(·, X) ≤ r}`, `ε(Y) = {d(·, Yᶜ) > r}`, both
/// evaluated on the grid, followed by filling background cavities that are
/// not 26-connected to the grid border.
pub fn close_and_fill(mask: &Mask, r: f64) -> Result<Mask> {
    if mask.is_empty() {
        return Ok(mask.clone());
    }
    if r < 0.0 {
        return Err(Error::InvalidParam("closing radius must be non-negative".into()));
    }
    let closed = closing(mask, r);
    let holes = enclosed_background(&closed);
    closed.or(&holes)
}

pub fn closing(mask: &Mask, r: f64) -> Mask {
    let geom = *mask.geometry();
    let r2 = r * r;
    let Some(sq) = squared_edt(&geom, mask.bits()) else {
        return mask.clone();
    };
    // background of the dilation, fed straight back into the second transform
    let outside: Vec<bool> = sq.iter().map(|&s| s > r2).collect();
    match squared_edt(&geom, &outside) {
        None => Mask::full(geom),
        Some(sq) => Mask::from_bits(geom, sq.iter().map(|&s| s > r2).collect()).expect("same geometry"),
    }
}
