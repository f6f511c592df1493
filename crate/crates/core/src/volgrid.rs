//! Voxel grids: calibrated scalar volumes, binary masks and label maps that
//! share one axis-aligned geometry, plus the `.vqh`/`.vqr` file format.
//!
//! Memory order is x-fastest, then y, then z. World coordinates are in mm;
//! `origin` is the world position of the center of voxel (0,0,0).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = nalgebra::Vector3<f64>;

/// Axis-aligned voxel lattice.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Geometry {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::Geometry(format!("dims must be positive, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Geometry(format!(
                "spacing must be positive, got {spacing:?}"
            )));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::Geometry("origin must be finite".into()));
        }
        Ok(Self {
            dims,
            spacing,
            origin,
        })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    pub fn voxel_volume(&self) -> f64 {
        self.spacing[0] * self.spacing[1] * self.spacing[2]
    }

    /// Continuous voxel coordinates to world mm.
    #[inline]
    pub fn voxel_to_world(&self, v: [f64; 3]) -> Vec3 {
        Vec3::new(
            self.origin[0] + v[0] * self.spacing[0],
            self.origin[1] + v[1] * self.spacing[1],
            self.origin[2] + v[2] * self.spacing[2],
        )
    }

    #[inline]
    pub fn world_to_voxel(&self, p: &Vec3) -> [f64; 3] {
        [
            (p.x - self.origin[0]) / self.spacing[0],
            (p.y - self.origin[1]) / self.spacing[1],
            (p.z - self.origin[2]) / self.spacing[2],
        ]
    }

    #[inline]
    pub fn center(&self, idx: usize) -> Vec3 {
        let [i, j, k] = self.coords(idx);
        self.voxel_to_world([i as f64, j as f64, k as f64])
    }

    /// Nearest voxel index of a world point, if it falls inside the grid.
    pub fn nearest_index(&self, p: &Vec3) -> Option<[usize; 3]> {
        let c = self.world_to_voxel(p);
        let mut out = [0usize; 3];
        for a in 0..3 {
            let r = c[a].round();
            if !(r >= 0.0 && r < self.dims[a] as f64) {
                return None;
            }
            out[a] = r as usize;
        }
        Some(out)
    }

    /// World-space axis-aligned bounds spanned by voxel centers.
    pub fn world_bounds(&self) -> (Vec3, Vec3) {
        let lo = self.voxel_to_world([0.0; 3]);
        let hi = self.voxel_to_world([
            (self.dims[0] - 1) as f64,
            (self.dims[1] - 1) as f64,
            (self.dims[2] - 1) as f64,
        ]);
        (lo, hi)
    }

    /// Sub-grid `[lo, hi)` in voxel indices.
    pub fn crop(&self, lo: [usize; 3], hi: [usize; 3]) -> Result<Geometry> {
        for a in 0..3 {
            if lo[a] >= hi[a] || hi[a] > self.dims[a] {
                return Err(Error::Geometry(format!(
                    "crop [{lo:?}, {hi:?}) outside dims {:?}",
                    self.dims
                )));
            }
        }
        let o = self.voxel_to_world([lo[0] as f64, lo[1] as f64, lo[2] as f64]);
        Geometry::new(
            [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]],
            self.spacing,
            [o.x, o.y, o.z],
        )
    }

    /// Voxel index box `[lo, hi)` covering a world AABB, clipped to the grid.
    pub fn index_box(&self, wlo: &Vec3, whi: &Vec3, pad: usize) -> Option<([usize; 3], [usize; 3])> {
        let a = self.world_to_voxel(wlo);
        let b = self.world_to_voxel(whi);
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        for ax in 0..3 {
            let l = a[ax].min(b[ax]).floor() - pad as f64;
            let h = a[ax].max(b[ax]).ceil() + pad as f64 + 1.0;
            let l = l.max(0.0);
            let h = h.min(self.dims[ax] as f64);
            if l >= h {
                return None;
            }
            lo[ax] = l as usize;
            hi[ax] = h as usize;
        }
        Some((lo, hi))
    }

    /// Face neighbours (6-connectivity) of a linear index.
    pub fn neighbors6(&self, idx: usize, out: &mut Vec<usize>) {
        out.clear();
        let [i, j, k] = self.coords(idx);
        let [nx, ny, nz] = self.dims;
        let sy = nx;
        let sz = nx * ny;
        if i > 0 {
            out.push(idx - 1);
        }
        if i + 1 < nx {
            out.push(idx + 1);
        }
        if j > 0 {
            out.push(idx - sy);
        }
        if j + 1 < ny {
            out.push(idx + sy);
        }
        if k > 0 {
            out.push(idx - sz);
        }
        if k + 1 < nz {
            out.push(idx + sz);
        }
    }

    /// All 26 neighbours of a linear index.
    pub fn neighbors26(&self, idx: usize, out: &mut Vec<usize>) {
        out.clear();
        let [i, j, k] = self.coords(idx);
        for dk in -1i64..=1 {
            for dj in -1i64..=1 {
                for di in -1i64..=1 {
                    if di == 0 && dj == 0 && dk == 0 {
                        continue;
                    }
                    let (x, y, z) = (i as i64 + di, j as i64 + dj, k as i64 + dk);
                    if x < 0
                        || y < 0
                        || z < 0
                        || x >= self.dims[0] as i64
                        || y >= self.dims[1] as i64
                        || z >= self.dims[2] as i64
                    {
                        continue;
                    }
                    out.push(self.index(x as usize, y as usize, z as usize));
                }
            }
        }
    }

    pub fn is_border(&self, idx: usize) -> bool {
        let c = self.coords(idx);
        (0..3).any(|a| c[a] == 0 || c[a] + 1 == self.dims[a])
    }
}

/// Calibrated scalar volume (mg/cm³).
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    geom: Geometry,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(geom: Geometry, data: Vec<f32>) -> Result<Self> {
        if data.len() != geom.len() {
            return Err(Error::SizeMismatch {
                expected: geom.len(),
                found: data.len(),
            });
        }
        Ok(Self { geom, data })
    }

    pub fn filled(geom: Geometry, value: f32) -> Self {
        Self {
            data: vec![value; geom.len()],
            geom,
        }
    }

    pub fn from_fn(geom: Geometry, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(geom.len());
        for k in 0..geom.dims[2] {
            for j in 0..geom.dims[1] {
                for i in 0..geom.dims[0] {
                    data.push(f(i, j, k));
                }
            }
        }
        Self { geom, data }
    }

    #[inline]
    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[self.geom.index(i, j, k)]
    }

    #[inline]
    pub fn at(&self, idx: usize) -> f32 {
        self.data[idx]
    }

    /// Trilinear interpolation at a world point. Points outside the grid
    /// are clamped to the nearest edge voxel.
    pub fn sample_trilinear(&self, p: &Vec3) -> f64 {
        let c = self.geom.world_to_voxel(p);
        let mut base = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            let n = self.geom.dims[a];
            let x = if c[a].is_nan() { 0.0 } else { c[a].clamp(0.0, (n - 1) as f64) };
            if n == 1 {
                base[a] = 0;
                frac[a] = 0.0;
                continue;
            }
            let i0 = (x.floor() as usize).min(n - 2);
            base[a] = i0;
            frac[a] = x - i0 as f64;
        }
        let [nx, ny, _] = self.geom.dims;
        let step = [
            usize::from(self.geom.dims[0] > 1),
            if self.geom.dims[1] > 1 { nx } else { 0 },
            if self.geom.dims[2] > 1 { nx * ny } else { 0 },
        ];
        let i000 = self.geom.index(base[0], base[1], base[2]);
        let v = |o: usize| self.data[o] as f64;
        let (fx, fy, fz) = (frac[0], frac[1], frac[2]);
        let c00 = v(i000) * (1.0 - fx) + v(i000 + step[0]) * fx;
        let c10 = v(i000 + step[1]) * (1.0 - fx) + v(i000 + step[1] + step[0]) * fx;
        let c01 = v(i000 + step[2]) * (1.0 - fx) + v(i000 + step[2] + step[0]) * fx;
        let c11 = v(i000 + step[2] + step[1]) * (1.0 - fx)
            + v(i000 + step[2] + step[1] + step[0]) * fx;
        let c0 = c00 * (1.0 - fy) + c10 * fy;
        let c1 = c01 * (1.0 - fy) + c11 * fy;
        c0 * (1.0 - fz) + c1 * fz
    }

    pub fn crop(&self, lo: [usize; 3], hi: [usize; 3]) -> Result<Volume> {
        let g = self.geom.crop(lo, hi)?;
        let data = crop_vec(&self.geom, &self.data, lo, &g);
        Ok(Volume { geom: g, data })
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Volume {
        Volume {
            geom: self.geom,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

fn crop_vec<T: Copy>(src: &Geometry, data: &[T], lo: [usize; 3], dst: &Geometry) -> Vec<T> {
    let mut out = Vec::with_capacity(dst.len());
    for k in 0..dst.dims[2] {
        for j in 0..dst.dims[1] {
            let start = src.index(lo[0], lo[1] + j, lo[2] + k);
            out.extend_from_slice(&data[start..start + dst.dims[0]]);
        }
    }
    out
}

/// Binary voxel set sharing a volume's geometry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    geom: Geometry,
    bits: Vec<bool>,
}

impl Eq for Geometry {}

impl Mask {
    pub fn empty(geom: Geometry) -> Self {
        Self {
            bits: vec![false; geom.len()],
            geom,
        }
    }

    pub fn full(geom: Geometry) -> Self {
        Self {
            bits: vec![true; geom.len()],
            geom,
        }
    }

    pub fn from_bits(geom: Geometry, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != geom.len() {
            return Err(Error::SizeMismatch {
                expected: geom.len(),
                found: bits.len(),
            });
        }
        Ok(Self { geom, bits })
    }

    pub fn from_fn(geom: Geometry, mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(geom.len());
        for k in 0..geom.dims[2] {
            for j in 0..geom.dims[1] {
                for i in 0..geom.dims[0] {
                    bits.push(f(i, j, k));
                }
            }
        }
        Self { geom, bits }
    }

    /// Mask of voxels whose world center satisfies `f`.
    pub fn from_world_fn(geom: Geometry, f: impl Fn(&Vec3) -> bool) -> Self {
        let bits = (0..geom.len()).map(|idx| f(&geom.center(idx))).collect();
        Self { geom, bits }
    }

    #[inline]
    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    #[inline]
    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, idx: usize) -> bool {
        self.bits[idx]
    }

    #[inline]
    pub fn get3(&self, i: usize, j: usize, k: usize) -> bool {
        self.bits[self.geom.index(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, idx: usize, v: bool) {
        self.bits[idx] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
    }

    pub fn volume_mm3(&self) -> f64 {
        self.count() as f64 * self.geom.voxel_volume()
    }

    fn zip(&self, other: &Mask, f: impl Fn(bool, bool) -> bool) -> Result<Mask> {
        if self.geom != other.geom {
            return Err(Error::GeometryMismatch);
        }
        Ok(Mask {
            geom: self.geom,
            bits: self
                .bits
                .iter()
                .zip(&other.bits)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn and(&self, other: &Mask) -> Result<Mask> {
        self.zip(other, |a, b| a && b)
    }

    pub fn or(&self, other: &Mask) -> Result<Mask> {
        self.zip(other, |a, b| a || b)
    }

    pub fn and_not(&self, other: &Mask) -> Result<Mask> {
        self.zip(other, |a, b| a && !b)
    }

    pub fn not(&self) -> Mask {
        Mask {
            geom: self.geom,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.geom == other.geom && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    pub fn crop(&self, lo: [usize; 3], hi: [usize; 3]) -> Result<Mask> {
        let g = self.geom.crop(lo, hi)?;
        let bits = crop_vec(&self.geom, &self.bits, lo, &g);
        Ok(Mask { geom: g, bits })
    }

    /// Place a cropped mask back into a larger grid at offset `lo`.
    pub fn embed(&self, parent: Geometry, lo: [usize; 3]) -> Result<Mask> {
        for a in 0..3 {
            if lo[a] + self.geom.dims[a] > parent.dims[a] {
                return Err(Error::Geometry("embed outside parent grid".into()));
            }
        }
        let mut out = Mask::empty(parent);
        for k in 0..self.geom.dims[2] {
            for j in 0..self.geom.dims[1] {
                let src = self.geom.index(0, j, k);
                let dst = parent.index(lo[0], lo[1] + j, lo[2] + k);
                out.bits[dst..dst + self.geom.dims[0]]
                    .copy_from_slice(&self.bits[src..src + self.geom.dims[0]]);
            }
        }
        Ok(out)
    }

    pub fn dice(&self, other: &Mask) -> Result<f64> {
        let inter = self.and(other)?.count() as f64;
        let total = (self.count() + other.count()) as f64;
        Ok(if total == 0.0 { 1.0 } else { 2.0 * inter / total })
    }

    pub fn centroid(&self) -> Option<Vec3> {
        let mut sum = Vec3::zeros();
        let mut n = 0usize;
        for idx in self.indices() {
            sum += self.geom.center(idx);
            n += 1;
        }
        (n > 0).then(|| sum / n as f64)
    }
}

/// Integer labels over a geometry; 0 means background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    geom: Geometry,
    labels: Vec<u32>,
}

impl LabelMap {
    pub fn new(geom: Geometry) -> Self {
        Self {
            labels: vec![0; geom.len()],
            geom,
        }
    }

    pub fn from_labels(geom: Geometry, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != geom.len() {
            return Err(Error::SizeMismatch {
                expected: geom.len(),
                found: labels.len(),
            });
        }
        Ok(Self { geom, labels })
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    #[inline]
    pub fn get(&self, idx: usize) -> u32 {
        self.labels[idx]
    }

    #[inline]
    pub fn set(&mut self, idx: usize, l: u32) {
        self.labels[idx] = l;
    }

    pub fn mask_of(&self, label: u32) -> Mask {
        Mask {
            geom: self.geom,
            bits: self.labels.iter().map(|&l| l == label).collect(),
        }
    }

    pub fn max_label(&self) -> u32 {
        self.labels.iter().copied().max().unwrap_or(0)
    }
}

// ---------------------------------------------------------------------------
// File format
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    U8,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Header {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub origin_mm: [f64; 3],
    pub dtype: DType,
    pub data_file: String,
}

fn payload_path(header_path: &Path, data_file: &str) -> PathBuf {
    header_path
        .parent()
        .map(|d| d.join(data_file))
        .unwrap_or_else(|| PathBuf::from(data_file))
}

fn raw_name(header_path: &Path) -> Result<String> {
    let stem = header_path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::InvalidParam(format!("bad header path {}", header_path.display())))?;
    Ok(format!("{stem}.vqr"))
}

fn write_raw(path: &Path, geom: &Geometry, dtype: DType, payload: &[u8]) -> Result<()> {
    let data_file = raw_name(path)?;
    let header = Header {
        dims: geom.dims,
        spacing_mm: geom.spacing,
        origin_mm: geom.origin,
        dtype,
        data_file: data_file.clone(),
    };
    let json = serde_json::to_string_pretty(&header).expect("header serializes");
    fs::write(path, json).map_err(|e| Error::io(path, e))?;
    let raw = payload_path(path, &data_file);
    fs::write(&raw, payload).map_err(|e| Error::io(&raw, e))
}

fn read_raw(path: &Path) -> Result<(Header, Geometry, Vec<u8>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let header: Header = serde_json::from_str(&text).map_err(|e| Error::Header {
        path: path.to_path_buf(),
        source: e,
    })?;
    let geom = Geometry::new(header.dims, header.spacing_mm, header.origin_mm)?;
    let raw = payload_path(path, &header.data_file);
    let bytes = fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
    let width = match header.dtype {
        DType::F32 => 4,
        DType::U8 => 1,
    };
    let expected = geom.len() * width;
    if bytes.len() != expected {
        return Err(Error::SizeMismatch {
            expected,
            found: bytes.len(),
        });
    }
    Ok((header, geom, bytes))
}

pub fn write_volume(path: impl AsRef<Path>, vol: &Volume) -> Result<()> {
    let mut payload = Vec::with_capacity(vol.data.len() * 4);
    for v in &vol.data {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    write_raw(path.as_ref(), &vol.geom, DType::F32, &payload)
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let (header, geom, bytes) = read_raw(path.as_ref())?;
    let data = match header.dtype {
        DType::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        DType::U8 => bytes.iter().map(|&b| b as f32).collect(),
    };
    Volume::new(geom, data)
}

pub fn write_mask(path: impl AsRef<Path>, mask: &Mask) -> Result<()> {
    let payload: Vec<u8> = mask.bits.iter().map(|&b| u8::from(b)).collect();
    write_raw(path.as_ref(), &mask.geom, DType::U8, &payload)
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<Mask> {
    let path = path.as_ref();
    let (header, geom, bytes) = read_raw(path)?;
    if header.dtype != DType::U8 {
        return Err(Error::InvalidParam(format!(
            "{} is not a u8 mask",
            path.display()
        )));
    }
    if let Some(b) = bytes.iter().find(|&&b| b > 1) {
        return Err(Error::InvalidParam(format!("mask value {b} not in {{0,1}}")));
    }
    Mask::from_bits(geom, bytes.iter().map(|&b| b == 1).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit(dims: [usize; 3]) -> Geometry {
        Geometry::new(dims, [1.0; 3], [0.0; 3]).unwrap()
    }

    #[test]
    fn rejects_bad_spacing() {
        assert!(Geometry::new([2, 2, 2], [1.0, 0.0, 1.0], [0.0; 3]).is_err());
        assert!(Geometry::new([2, 2, 2], [1.0, -1.0, 1.0], [0.0; 3]).is_err());
    }

    #[test]
    fn world_voxel_examples() {
        let g = unit([8, 8, 8]);
        assert_eq!(g.world_to_voxel(&Vec3::new(3.0, 4.0, 5.0)), [3.0, 4.0, 5.0]);
        let g = Geometry::new([8, 8, 8], [0.5, 1.0, 1.0], [10.0, 0.0, 0.0]).unwrap();
        assert_eq!(g.world_to_voxel(&Vec3::new(11.0, 0.0, 0.0)), [2.0, 0.0, 0.0]);
    }

    #[test]
    fn trilinear_at_center_and_midpoint() {
        let g = unit([2, 1, 1]);
        let v = Volume::new(g, vec![0.0, 10.0]).unwrap();
        assert_eq!(v.sample_trilinear(&Vec3::new(0.0, 0.0, 0.0)), 0.0);
        assert_eq!(v.sample_trilinear(&Vec3::new(1.0, 0.0, 0.0)), 10.0);
        assert_eq!(v.sample_trilinear(&Vec3::new(0.5, 0.0, 0.0)), 5.0);
        // clamped outside
        assert_eq!(v.sample_trilinear(&Vec3::new(-4.0, 3.0, 9.0)), 0.0);
        assert_eq!(v.sample_trilinear(&Vec3::new(7.0, 0.0, 0.0)), 10.0);
    }

    #[test]
    fn trilinear_matches_eight_corner_sum() {
        let g = unit([2, 2, 2]);
        let corners = [3.0f32, -1.0, 7.5, 2.0, 11.0, 4.0, -6.0, 9.0];
        let v = Volume::new(g, corners.to_vec()).unwrap();
        let (fx, fy, fz) = (0.25, 0.5, 0.75);
        let mut oracle = 0.0;
        for k in 0..2 {
            for j in 0..2 {
                for i in 0..2 {
                    let w = (if i == 1 { fx } else { 1.0 - fx })
                        * (if j == 1 { fy } else { 1.0 - fy })
                        * (if k == 1 { fz } else { 1.0 - fz });
                    oracle += w * corners[i + 2 * j + 4 * k] as f64;
                }
            }
        }
        let got = v.sample_trilinear(&Vec3::new(fx, fy, fz));
        assert!((got - oracle).abs() < 1e-12, "{got} vs {oracle}");
    }

    #[test]
    fn crop_and_embed_roundtrip() {
        let g = unit([6, 5, 4]);
        let m = Mask::from_fn(g, |i, j, k| (i + j + k) % 3 == 0);
        let c = m.crop([1, 1, 1], [5, 4, 3]).unwrap();
        assert_eq!(c.geometry().origin, [1.0, 1.0, 1.0]);
        let back = c.embed(g, [1, 1, 1]).unwrap();
        let inside = Mask::from_fn(g, |i, j, k| (1..5).contains(&i) && (1..4).contains(&j) && (1..3).contains(&k));
        assert_eq!(back, m.and(&inside).unwrap());
    }

    #[test]
    fn mismatched_geometry_is_rejected() {
        let a = Mask::empty(unit([2, 2, 2]));
        let b = Mask::empty(unit([2, 2, 3]));
        assert!(matches!(a.and(&b), Err(Error::GeometryMismatch)));
    }

    proptest! {
        #[test]
        fn world_voxel_roundtrip(
            x in -500.0f64..500.0, y in -500.0f64..500.0, z in -500.0f64..500.0,
            sx in 0.1f64..3.0, sy in 0.1f64..3.0, sz in 0.1f64..3.0,
            ox in -100.0f64..100.0,
        ) {
            let g = Geometry::new([4, 4, 4], [sx, sy, sz], [ox, -ox, 2.0 * ox]).unwrap();
            let p = Vec3::new(x, y, z);
            let back = g.voxel_to_world(g.world_to_voxel(&p));
            prop_assert!((back - p).abs().max() < 1e-9);
        }

        #[test]
        fn trilinear_exact_on_affine_fields(
            a in -400i32..400, b in -40i32..40, c in -40i32..40, d in -40i32..40,
            px in 0.0f64..1.0, py in 0.0f64..1.0, pz in 0.0f64..1.0,
        ) {
            // dyadic coefficients and spacings keep the f32 grid values exact
            let (a, b, c, d) = (a as f64 / 8.0, b as f64 / 8.0, c as f64 / 8.0, d as f64 / 8.0);
            let g = Geometry::new([7, 6, 5], [0.5, 1.25, 0.75], [-2.0, 1.0, 4.0]).unwrap();
            let f = |p: &Vec3| a + b * p.x + c * p.y + d * p.z;
            let vol = Volume::from_fn(g, |i, j, k| f(&g.voxel_to_world([i as f64, j as f64, k as f64])) as f32);
            let (lo, hi) = g.world_bounds();
            let p = Vec3::new(lo.x + px * (hi.x - lo.x), lo.y + py * (hi.y - lo.y), lo.z + pz * (hi.z - lo.z));
            prop_assert!((vol.sample_trilinear(&p) - f(&p)).abs() < 1e-6);
        }

        #[test]
        fn mask_algebra_partition(seed_a in any::<u64>(), seed_b in any::<u64>()) {
            let g = unit([5, 4, 3]);
            let a = Mask::from_fn(g, |i, j, k| (seed_a >> ((i + 5 * j + 20 * k) % 64)) & 1 == 1);
            let b = Mask::from_fn(g, |i, j, k| (seed_b >> ((3 * i + j + 7 * k) % 64)) & 1 == 1);
            let lhs = a.and(&b).unwrap().or(&a.and(&b.not()).unwrap()).unwrap();
            prop_assert_eq!(lhs, a);
        }
    }
}
