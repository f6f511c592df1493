//! VOI statistics, accuracy errors against nominal values and the
//! repeat-analysis precision protocol (%CV, RMS over subjects).

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::anatomy::{Landmarks, Vcs};
use crate::classify::FitReport;
use crate::error::{Error, Result};
use crate::volgrid::{Mask, Volume};

/// Standard-deviation convention written into every report.
pub const SD_CONVENTION: &str = "sample (n-1)";

/// Compensated (Neumaier) sum. Callers that need order independence sort
/// first; see [`stable_sum`].
fn neumaier(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut c = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            c += (sum - t) + v;
        } else {
            c += (v - t) + sum;
        }
        sum = t;
    }
    sum + c
}

/// Compensated sum over the values in canonical (sorted) order, so the
/// result does not depend on the order they were collected in.
fn stable_sum(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    neumaier(values.iter().copied())
}

/// Mean and sample SD (0 for a single value).
fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mut v = values.to_vec();
    let mean = stable_sum(&mut v) / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let mut sq: Vec<f64> = values.iter().map(|x| (x - mean) * (x - mean)).collect();
    (mean, (stable_sum(&mut sq) / (n - 1.0)).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoiStats {
    pub voi: String,
    pub voxels: usize,
    pub volume_mm3: f64,
    /// mg/cm³
    pub bmd_mean: f64,
    pub bmd_sd: f64,
}

pub fn measure_voi(vol: &Volume, voi: &Mask, name: &str) -> Result<VoiStats> {
    if vol.geometry() != voi.geometry() {
        return Err(Error::GeometryMismatch);
    }
    let values: Vec<f64> = voi.indices().map(|i| vol.at(i) as f64).collect();
    if values.is_empty() {
        return Err(Error::EmptyMask("VOI"));
    }
    let (mean, sd) = mean_sd(&values);
    Ok(VoiStats {
        voi: name.to_string(),
        voxels: values.len(),
        volume_mm3: values.len() as f64 * vol.geometry().voxel_volume(),
        bmd_mean: mean,
        bmd_sd: sd,
    })
}

/// `100·|measured − nominal| / |nominal|` in percent.
pub fn accuracy_error(measured: f64, nominal: f64) -> Result<f64> {
    if nominal == 0.0 || !nominal.is_finite() {
        return Err(Error::Report(format!("accuracy error needs a finite non-zero nominal, got {nominal}")));
    }
    Ok(100.0 * (measured - nominal).abs() / nominal.abs())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrecisionSummary {
    /// Root mean square of the per-subject %CVs.
    pub cv_rms_percent: f64,
    /// Sample SD of the per-subject %CVs.
    pub cv_sd: f64,
    pub per_subject: Vec<f64>,
}

/// `values[subject][analysis][level]`. Levels are averaged per analysis,
/// each subject gets `%CV = 100·SD/mean` over its analyses, and subjects are
/// combined by RMS.
pub fn precision_cv(values: &[Vec<Vec<f64>>]) -> Result<PrecisionSummary> {
    if values.is_empty() {
        return Err(Error::Report("precision needs at least one subject".into()));
    }
    let mut per_subject = Vec::with_capacity(values.len());
    for (s, analyses) in values.iter().enumerate() {
        if analyses.len() < 2 {
            return Err(Error::Report(format!("subject {s} has fewer than two analyses")));
        }
        let means = analyses
            .iter()
            .map(|levels| {
                if levels.is_empty() {
                    return Err(Error::Report(format!("subject {s} has an analysis without levels")));
                }
                Ok(mean_sd(levels).0)
            })
            .collect::<Result<Vec<f64>>>()?;
        let (mean, sd) = mean_sd(&means);
        if mean == 0.0 {
            return Err(Error::Report(format!("subject {s} has zero mean")));
        }
        per_subject.push(100.0 * sd / mean.abs());
    }
    let mut sq: Vec<f64> = per_subject.iter().map(|c| c * c).collect();
    let rms = (stable_sum(&mut sq) / per_subject.len() as f64).sqrt();
    Ok(PrecisionSummary {
        cv_rms_percent: rms,
        cv_sd: mean_sd(&per_subject).1,
        per_subject,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoiSet {
    pub total_trabecular: VoiStats,
    pub cylinder: VoiStats,
    pub pacman: VoiStats,
}

impl VoiSet {
    pub fn iter(&self) -> impl Iterator<Item = &VoiStats> {
        [&self.total_trabecular, &self.cylinder, &self.pacman].into_iter()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelReport {
    pub landmarks: Landmarks,
    pub vcs_axes: Vcs,
    pub vois: VoiSet,
    pub body_volume_mm3: f64,
    pub fit: FitReport,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum LevelEntry {
    Ok(LevelReport),
    Error { stage: String, message: String },
}

impl LevelEntry {
    pub fn report(&self) -> Option<&LevelReport> {
        match self {
            Self::Ok(r) => Some(r),
            Self::Error { .. } => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub version: String,
    pub sd_convention: String,
}

impl Default for ReportMetadata {
    fn default() -> Self {
        Self {
            version: env!("CARGO_PKG_VERSION").to_string(),
            sd_convention: SD_CONVENTION.to_string(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub metadata: ReportMetadata,
    pub levels: BTreeMap<String, LevelEntry>,
}

impl Report {
    pub fn failed_levels(&self) -> Vec<&str> {
        self.levels
            .iter()
            .filter(|(_, e)| matches!(e, LevelEntry::Error { .. }))
            .map(|(k, _)| k.as_str())
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per level and VOI; failed levels get a single row with the error.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("level,status,voi,voxels,volume_mm3,bmd_mean,bmd_sd,body_volume_mm3,error\n");
        for (name, entry) in &self.levels {
            match entry {
                LevelEntry::Ok(r) => {
                    for s in r.vois.iter() {
                        let _ = writeln!(
                            out,
                            "{name},ok,{},{},{},{},{},{},",
                            s.voi, s.voxels, s.volume_mm3, s.bmd_mean, s.bmd_sd, r.body_volume_mm3
                        );
                    }
                }
                LevelEntry::Error { stage, message } => {
                    let msg = format!("{stage}: {message}").replace('"', "'");
                    let _ = writeln!(out, "{name},error,,,,,,,\"{msg}\"");
                }
            }
        }
        out
    }
}
