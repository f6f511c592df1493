//! Slice extraction and PNG encoding for the viewer.
//!
//! Axial (`z`) slices put voxel `i` on columns and `j` on rows. Sagittal
//! (`x`) and coronal (`y`) slices put the in-plane axis on columns and `z` on
//! rows, top row most cranial.

use std::io::Cursor;

use anyhow::{bail, Context, Result};
use image::{GrayImage, ImageFormat, Luma, Rgba, RgbaImage};
use serde::Deserialize;
use vqct_core::volgrid::{Geometry, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }
}

/// Width and height of the image for a slice along `axis`.
pub fn slice_size(geom: &Geometry, axis: Axis) -> (u32, u32) {
    let [nx, ny, nz] = geom.dims;
    let (w, h) = match axis {
        Axis::X => (ny, nz),
        Axis::Y => (nx, nz),
        Axis::Z => (nx, ny),
    };
    (w as u32, h as u32)
}

/// Full-grid voxel index under pixel `(col, row)` of slice `k`.
fn voxel_at(geom: &Geometry, axis: Axis, k: usize, col: u32, row: u32) -> usize {
    let nz = geom.dims[2];
    let (c, r) = (col as usize, row as usize);
    match axis {
        Axis::X => geom.index(k, c, nz - 1 - r),
        Axis::Y => geom.index(c, k, nz - 1 - r),
        Axis::Z => geom.index(c, r, k),
    }
}

fn check_index(geom: &Geometry, axis: Axis, k: usize) -> Result<()> {
    let n = geom.dims[axis.index()];
    if k >= n {
        bail!("slice index {k} out of range 0..{n}");
    }
    Ok(())
}

fn encode(img: impl Into<image::DynamicImage>) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    img.into().write_to(&mut buf, ImageFormat::Png).context("PNG encoding")?;
    Ok(buf.into_inner())
}

/// 8-bit grey PNG of slice `k`, values in `[lo, hi]` mapped linearly to 0..255.
pub fn slice_png(vol: &Volume, axis: Axis, k: usize, window: (f64, f64)) -> Result<Vec<u8>> {
    let geom = vol.geometry();
    check_index(geom, axis, k)?;
    let (lo, hi) = window;
    if !(lo.is_finite() && hi.is_finite() && hi > lo) {
        bail!("window must satisfy lo < hi");
    }
    let (w, h) = slice_size(geom, axis);
    let img = GrayImage::from_fn(w, h, |c, r| {
        let v = f64::from(vol.at(voxel_at(geom, axis, k, c, r)));
        let t = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
        Luma([(t * 255.0).round() as u8])
    });
    encode(img)
}

/// RGBA PNG of slice `k`: `color` where `inside` holds, transparent elsewhere.
pub fn overlay_png(geom: &Geometry, axis: Axis, k: usize, color: [u8; 4], inside: impl Fn(usize) -> bool) -> Result<Vec<u8>> {
    check_index(geom, axis, k)?;
    let (w, h) = slice_size(geom, axis);
    let img = RgbaImage::from_fn(w, h, |c, r| {
        if inside(voxel_at(geom, axis, k, c, r)) {
            Rgba(color)
        } else {
            Rgba([0; 4])
        }
    });
    encode(img)
}

/// Parse `"lo,hi"`.
pub fn parse_window(s: &str) -> Result<(f64, f64)> {
    let (a, b) = s.split_once(',').context("window must be lo,hi")?;
    Ok((a.trim().parse()?, b.trim().parse()?))
}

/// Smallest and largest voxel value, the default display window.
pub fn value_range(vol: &Volume) -> (f64, f64) {
    let (lo, hi) = vol
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let (lo, hi) = (f64::from(lo), f64::from(hi));
    // a flat volume still needs a non-empty window
    if hi > lo { (lo, hi) } else { (lo, lo + 1.0) }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sagittal_rows_run_cranial_to_caudal() {
        let g = Geometry::new([2, 3, 4], [1.0; 3], [0.0; 3]).unwrap();
        assert_eq!(voxel_at(&g, Axis::X, 1, 2, 0), g.index(1, 2, 3));
        assert_eq!(voxel_at(&g, Axis::Z, 3, 1, 2), g.index(1, 2, 3));
        assert_eq!(slice_size(&g, Axis::Y), (2, 4));
    }

    #[test]
    fn window_parsing() {
        assert_eq!(parse_window("-100, 900").unwrap(), (-100.0, 900.0));
        assert!(parse_window("100").is_err());
    }
}
