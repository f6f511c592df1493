use crate::classify::ThresholdBand;
use crate::error::{Error, Result};
use crate::volgrid::{Mask, Volume};

use super::edt::squared_edt;

/// Trabecular compartment of `body`: first strip surface voxels brighter
/// than `band.high` layer by layer until the surface is trabecular, then
/// erode homogeneously by `depth_mm`.
pub fn trabecular_peel(body: &Mask, vol: &Volume, band: &ThresholdBand, depth_mm: f64) -> Result<Mask> {
    let geom = *body.geometry();
    if vol.geometry() != &geom {
        return Err(Error::GeometryMismatch);
    }
    if body.is_empty() {
        return Err(Error::EmptyMask("peel input"));
    }
    if depth_mm < 0.0 {
        return Err(Error::InvalidParam("peel depth must be non-negative".into()));
    }
    let mut m = body.clone();
    let mut nb = Vec::new();
    let is_surface = |m: &Mask, i: usize, nb: &mut Vec<usize>| {
        geom.neighbors6(i, nb);
        geom.is_border(i) || nb.iter().any(|&n| !m.get(n))
    };
    let mut front: Vec<usize> = m.indices().filter(|&i| is_surface(&m, i, &mut nb)).collect();
    loop {
        let strip: Vec<usize> = front
            .iter()
            .copied()
            .filter(|&i| m.get(i) && vol.at(i) as f64 > band.high)
            .collect();
        if strip.is_empty() {
            break;
        }
        for &i in &strip {
            m.set(i, false);
        }
        let mut next = Vec::new();
        for &i in &strip {
            geom.neighbors6(i, &mut nb);
            next.extend(nb.iter().copied().filter(|&n| m.get(n)));
        }
        next.sort_unstable();
        next.dedup();
        front = next;
    }

    if depth_mm > 0.0 {
        let bg: Vec<bool> = m.bits().iter().map(|&b| !b).collect();
        if let Some(sq) = squared_edt(&geom, &bg) {
            let d2 = depth_mm * depth_mm;
            m = Mask::from_bits(geom, sq.iter().map(|&s| s > d2).collect())?;
        }
    }
    if m.is_empty() {
        return Err(Error::Morphology(format!("nothing left after peeling {depth_mm} mm")));
    }
    Ok(m)
}
