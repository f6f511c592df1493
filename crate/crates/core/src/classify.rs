//! Two-Gaussian histogram model, threshold band at the intersection of the
//! fitted densities, and soft/bone classification with a local-mean rule in
//! the transition zone.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volgrid::{Mask, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianPair {
    pub w: [f64; 2],
    pub mu: [f64; 2],
    pub sigma: [f64; 2],
}

impl GaussianPair {
    pub fn validate(&self) -> Result<()> {
        let ok = self.w.iter().all(|&w| w > 0.0 && w < 1.0)
            && (self.w[0] + self.w[1] - 1.0).abs() <= 1e-9
            && self.sigma.iter().all(|&s| s > 0.0 && s.is_finite())
            && self.mu[0] < self.mu[1];
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParam(format!("invalid Gaussian pair {self:?}")))
        }
    }

    fn log_density(&self, c: usize, x: f64) -> f64 {
        let z = (x - self.mu[c]) / self.sigma[c];
        self.w[c].ln() - self.sigma[c].ln() - 0.5 * z * z - 0.5 * (2.0 * std::f64::consts::PI).ln()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitParams {
    /// Stop when the per-sample log-likelihood gain falls below this.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Lower bound on σ as a fraction of the data range; keeps noise-free
    /// spike components finite.
    pub sigma_floor_fraction: f64,
}

impl Default for FitParams {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_iterations: 500,
            sigma_floor_fraction: 5e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmFit {
    pub pair: GaussianPair,
    /// Per-sample mean log-likelihood after each iteration.
    pub log_likelihood: Vec<f64>,
}

/// Otsu threshold on a 256-bin histogram of `values` over `[lo, hi]`.
pub fn otsu_threshold(values: &[f64], lo: f64, hi: f64) -> f64 {
    const BINS: usize = 256;
    let width = (hi - lo) / BINS as f64;
    let mut hist = [0u64; BINS];
    for &v in values {
        let b = (((v - lo) / width) as usize).min(BINS - 1);
        hist[b] += 1;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let mut best = (f64::NEG_INFINITY, 0usize);
    for (i, &c) in hist.iter().enumerate().take(BINS - 1) {
        w0 += c as f64;
        sum0 += i as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (m0 - m1).powi(2);
        if between > best.0 {
            best = (between, i);
        }
    }
    lo + (best.1 + 1) as f64 * width
}

const CHUNK: usize = 8192;

/// EM for a two-component 1-D Gaussian mixture, initialized by an Otsu
/// split. Sums are accumulated per fixed-size chunk and combined in chunk
/// order, so results do not depend on the thread count.
pub fn fit_two_gaussians_values(values: &[f64], params: &FitParams) -> Result<EmFit> {
    if values.len() < 2 {
        return Err(Error::DegenerateFit("fewer than two samples".into()));
    }
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let range = hi - lo;
    if !(range > 0.0) || !range.is_finite() {
        return Err(Error::DegenerateFit("constant or non-finite data".into()));
    }
    let floor = params.sigma_floor_fraction * range;

    let t = otsu_threshold(values, lo, hi);
    let mut pair = {
        let mut acc = [[0.0f64; 3]; 2];
        for &v in values {
            let c = usize::from(v >= t);
            acc[c][0] += 1.0;
            acc[c][1] += v;
            acc[c][2] += v * v;
        }
        if acc[0][0] == 0.0 || acc[1][0] == 0.0 {
            return Err(Error::DegenerateFit("histogram is not bimodal".into()));
        }
        let stat = |a: [f64; 3]| {
            let m = a[1] / a[0];
            (m, (a[2] / a[0] - m * m).max(0.0).sqrt().max(floor))
        };
        let (m0, s0) = stat(acc[0]);
        let (m1, s1) = stat(acc[1]);
        let n = values.len() as f64;
        GaussianPair {
            w: [acc[0][0] / n, acc[1][0] / n],
            mu: [m0, m1],
            sigma: [s0, s1],
        }
    };

    let n = values.len() as f64;
    let mut trace = Vec::new();
    for _ in 0..params.max_iterations {
        // E-step statistics plus the log-likelihood of the current parameters
        let partials: Vec<[f64; 7]> = values
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut s = [0.0f64; 7];
                for &x in chunk {
                    let l0 = pair.log_density(0, x);
                    let l1 = pair.log_density(1, x);
                    let m = l0.max(l1);
                    let (e0, e1) = ((l0 - m).exp(), (l1 - m).exp());
                    let z = e0 + e1;
                    let r1 = e1 / z;
                    let r0 = 1.0 - r1;
                    s[0] += r0;
                    s[1] += r0 * x;
                    s[2] += r0 * x * x;
                    s[3] += r1;
                    s[4] += r1 * x;
                    s[5] += r1 * x * x;
                    s[6] += m + z.ln();
                }
                s
            })
            .collect();
        let mut s = [0.0f64; 7];
        for p in &partials {
            for (a, b) in s.iter_mut().zip(p) {
                *a += b;
            }
        }
        let ll = s[6] / n;
        if let Some(&prev) = trace.last() {
            if ll - prev < params.tolerance {
                trace.push(ll);
                break;
            }
        }
        trace.push(ll);
        if s[0] < 1e-9 * n || s[3] < 1e-9 * n {
            return Err(Error::DegenerateFit("a component lost all its weight".into()));
        }
        let m0 = s[1] / s[0];
        let m1 = s[4] / s[3];
        let v0 = (s[2] / s[0] - m0 * m0).max(0.0);
        let v1 = (s[5] / s[3] - m1 * m1).max(0.0);
        pair = GaussianPair {
            w: [s[0] / n, s[3] / n],
            mu: [m0, m1],
            sigma: [v0.sqrt().max(floor), v1.sqrt().max(floor)],
        };
    }
    if pair.sigma.iter().any(|&s| s < 1e-6 * range) {
        return Err(Error::DegenerateFit("component variance collapsed".into()));
    }
    if pair.mu[0] > pair.mu[1] {
        pair = GaussianPair {
            w: [pair.w[1], pair.w[0]],
            mu: [pair.mu[1], pair.mu[0]],
            sigma: [pair.sigma[1], pair.sigma[0]],
        };
    }
    if pair.mu[0] == pair.mu[1] {
        return Err(Error::DegenerateFit("components coincide".into()));
    }
    pair.w[1] = 1.0 - pair.w[0];
    Ok(EmFit {
        pair,
        log_likelihood: trace,
    })
}

pub const MIN_REGION_VOXELS: usize = 1000;

/// Fit over the voxels of `region`, visited in index order.
pub fn fit_two_gaussians(vol: &Volume, region: &Mask, params: &FitParams) -> Result<EmFit> {
    if vol.geometry() != region.geometry() {
        return Err(Error::GeometryMismatch);
    }
    let values: Vec<f64> = region.indices().map(|i| vol.at(i) as f64).collect();
    if values.len() < MIN_REGION_VOXELS {
        return Err(Error::DegenerateFit(format!(
            "region has {} voxels, need at least {MIN_REGION_VOXELS}",
            values.len()
        )));
    }
    fit_two_gaussians_values(&values, params)
}

/// Point in `(μ₁, μ₂)` where the weighted densities are equal.
pub fn gaussian_intersection(g: &GaussianPair) -> Result<f64> {
    g.validate()?;
    let ([w1, w2], [m1, m2], [s1, s2]) = (g.w, g.mu, g.sigma);
    let (v1, v2) = (s1 * s1, s2 * s2);
    let a = 0.5 / v1 - 0.5 / v2;
    let b = m2 / v2 - m1 / v1;
    let c = 0.5 * m1 * m1 / v1 - 0.5 * m2 * m2 / v2 - (w1 * s2 / (w2 * s1)).ln();
    let inside = |x: f64| x > m1 && x < m2;
    let scale = 1.0 / v1.max(v2);
    let roots: Vec<f64> = if a.abs() <= 1e-12 * scale {
        vec![-c / b]
    } else {
        let disc = b * b - 4.0 * a * c;
        if disc < 0.0 {
            vec![]
        } else {
            let q = -0.5 * (b + b.signum() * disc.sqrt());
            vec![q / a, c / q]
        }
    };
    roots
        .into_iter()
        .filter(|&x| inside(x))
        .reduce(|x, y| if (x - (m1 + m2) / 2.0).abs() <= (y - (m1 + m2) / 2.0).abs() { x } else { y })
        .ok_or_else(|| Error::NoIntersection(format!("no density crossing between {m1} and {m2}")))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdBand {
    pub x_star: f64,
    pub low: f64,
    pub high: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifyParams {
    /// Offsets below/above x*; `None` means `offset_fraction · min σ`.
    pub offsets: Option<[f64; 2]>,
    pub offset_fraction: f64,
    /// Half-size of the cubic neighbourhood for the transition rule (voxels).
    pub neighborhood_radius: usize,
    pub fit: FitParams,
}

impl Default for ClassifyParams {
    fn default() -> Self {
        Self {
            offsets: None,
            offset_fraction: 0.5,
            neighborhood_radius: 1,
            fit: FitParams::default(),
        }
    }
}

pub fn threshold_band(g: &GaussianPair, params: &ClassifyParams) -> Result<ThresholdBand> {
    let x_star = gaussian_intersection(g)?;
    let [dm, dp] = params.offsets.unwrap_or_else(|| {
        let d = params.offset_fraction * g.sigma[0].min(g.sigma[1]);
        [d, d]
    });
    if dm < 0.0 || dp < 0.0 {
        return Err(Error::InvalidParam("threshold offsets must be non-negative".into()));
    }
    let band = ThresholdBand {
        x_star,
        low: x_star - dm,
        high: x_star + dp,
    };
    if !(g.mu[0] < band.low && band.high < g.mu[1]) {
        return Err(Error::InvalidParam(format!(
            "threshold band [{}, {}] crosses a mode ({}, {})",
            band.low, band.high, g.mu[0], g.mu[1]
        )));
    }
    Ok(band)
}

/// Mean over the `(2r+1)³` neighbourhood of `idx`, clamped at the borders.
pub fn local_mean(vol: &Volume, idx: usize, r: usize) -> f64 {
    let g = vol.geometry();
    let [i, j, k] = g.coords(idx);
    let r = r as i64;
    let mut sum = 0.0;
    let mut n = 0.0;
    for dk in -r..=r {
        for dj in -r..=r {
            for di in -r..=r {
                let x = (i as i64 + di).clamp(0, g.dims[0] as i64 - 1) as usize;
                let y = (j as i64 + dj).clamp(0, g.dims[1] as i64 - 1) as usize;
                let z = (k as i64 + dk).clamp(0, g.dims[2] as i64 - 1) as usize;
                sum += vol.get(x, y, z) as f64;
                n += 1.0;
            }
        }
    }
    sum / n
}

/// `true` for bone.
pub fn classify_voxel(vol: &Volume, idx: usize, band: &ThresholdBand, radius: usize) -> bool {
    let v = vol.at(idx) as f64;
    if v < band.low {
        false
    } else if v > band.high {
        true
    } else {
        local_mean(vol, idx, radius) > band.x_star
    }
}

/// Bone voxels among those of `within`.
pub fn classify_mask(vol: &Volume, within: &Mask, band: &ThresholdBand, radius: usize) -> Result<Mask> {
    if vol.geometry() != within.geometry() {
        return Err(Error::GeometryMismatch);
    }
    let bits = within
        .bits()
        .par_iter()
        .enumerate()
        .map(|(i, &b)| b && classify_voxel(vol, i, band, radius))
        .collect();
    Mask::from_bits(*vol.geometry(), bits)
}

/// Per-level fit report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub w: [f64; 2],
    pub mu: [f64; 2],
    pub sigma: [f64; 2],
    pub x_star: f64,
    pub low: f64,
    pub high: f64,
}

impl FitReport {
    pub fn new(g: &GaussianPair, b: &ThresholdBand) -> Self {
        Self {
            w: g.w,
            mu: g.mu,
            sigma: g.sigma,
            x_star: b.x_star,
            low: b.low,
            high: b.high,
        }
    }
}
