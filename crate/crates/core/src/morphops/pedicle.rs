use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::volgrid::Mask;

use super::erosion::ultimate_erode;
use super::label::{components, Connectivity};
use super::skiz::skiz_partition;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PedicleParams {
    /// Smallest residual counted as a main component (mm³).
    pub min_residual_mm3: f64,
}

impl Default for PedicleParams {
    fn default() -> Self {
        Self { min_residual_mm3: 5.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DissectionResult {
    pub body: Mask,
    pub process: Mask,
    pub cut: Mask,
    /// Centers of the two largest cut areas, ordered by world x.
    pub m3: Option<Vec3>,
    pub m4: Option<Vec3>,
    pub cut_components: usize,
    pub erosion_depth_mm: f64,
}

impl DissectionResult {
    /// Anything other than two cut areas is anatomically unexpected.
    pub fn warning(&self) -> Option<String> {
        (self.cut_components != 2).then(|| format!("expected 2 pedicle cut areas, found {}", self.cut_components))
    }
}

/// Separate the vertebral body from the posterior elements along the
/// smallest dissection surfaces through the pedicles.
pub fn pedicle_cut(mask: &Mask, params: &PedicleParams) -> Result<DissectionResult> {
    let geom = *mask.geometry();
    let min_size = (params.min_residual_mm3 / geom.voxel_volume()).ceil().max(1.0) as usize;
    let res = ultimate_erode(mask, 2, min_size)?;
    let skiz = skiz_partition(&res.labels, mask)?;
    let body = skiz.labels.mask_of(1);
    let process = skiz.labels.mask_of(2).or(&skiz.unreached)?;
    let cut = skiz.contact;

    let (labels, sizes) = components(&cut, Connectivity::TwentySix);
    let mut centers: Vec<Vec3> = (1..=sizes.len().min(2) as u32)
        .map(|l| labels.mask_of(l).centroid().expect("non-empty component"))
        .collect();
    centers.sort_by(|a, b| a.x.total_cmp(&b.x));
    if centers.is_empty() {
        return Err(Error::Morphology("dissection produced no cut surface".into()));
    }
    Ok(DissectionResult {
        body,
        process,
        cut,
        m3: centers.first().copied(),
        m4: centers.get(1).copied(),
        cut_components: sizes.len(),
        erosion_depth_mm: res.threshold,
    })
}
