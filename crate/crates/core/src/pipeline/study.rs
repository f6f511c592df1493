//! Phantom studies: accuracy against the analytic truth over a grid of
//! noise levels, and precision over repeated analyses with jittered seeds.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, UnitBall};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::phantom::{add_noise, generate_phantom, PhantomSpec, PhantomTruth};
use crate::presegment::SeedSet;
use crate::report::{accuracy_error, precision_cv, LevelEntry, LevelReport, PrecisionSummary, Report};
use crate::volgrid::Volume;

use super::{run_pipeline_on, PipelineConfig};

/// Quantities tabulated per level.
pub const QUANTITIES: [&str; 4] = ["bmd_total", "bmd_cylinder", "bmd_pacman", "volume"];

fn quantity(r: &LevelReport, q: &str) -> f64 {
    match q {
        "bmd_total" => r.vois.total_trabecular.bmd_mean,
        "bmd_cylinder" => r.vois.cylinder.bmd_mean,
        "bmd_pacman" => r.vois.pacman.bmd_mean,
        "volume" => r.body_volume_mm3,
        _ => unreachable!("unknown quantity {q}"),
    }
}

fn nominal(truth: &PhantomTruth, level: usize, q: &str) -> f64 {
    let t = &truth.levels[level];
    if q == "volume" {
        t.body_volume_mm3
    } else {
        t.nominal_bmd
    }
}

/// Independent stream of derived seeds for one study.
fn seed_stream(master: u64, study: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(study);
    rng
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyStudy {
    /// Multiples of the phantom's noise sigma.
    pub noise_factors: Vec<f64>,
    pub repeats: usize,
}

impl Default for AccuracyStudy {
    fn default() -> Self {
        Self {
            noise_factors: vec![0.0, 1.0, 2.0, 4.0],
            repeats: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub level: String,
    pub quantity: String,
    pub nominal: f64,
    /// Mean over repeats, one entry per noise factor; `None` if any repeat
    /// failed for the level.
    pub measured: Vec<Option<f64>>,
    pub error_percent: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyTable {
    pub noise_factors: Vec<f64>,
    pub sigma0: f64,
    pub repeats: usize,
    pub rows: Vec<AccuracyRow>,
    /// `"factor/repeat/level: stage: message"` for every failed level run.
    pub failures: Vec<String>,
}

impl AccuracyTable {
    pub fn row(&self, level: &str, quantity: &str) -> Option<&AccuracyRow> {
        self.rows.iter().find(|r| r.level == level && r.quantity == quantity)
    }

    /// Rows (level × quantity) by columns (noise factor), errors in percent.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("level,quantity,nominal");
        for f in &self.noise_factors {
            let _ = write!(out, ",error_pct@{f}");
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{},{},{}", r.level, r.quantity, r.nominal);
            for e in &r.error_percent {
                match e {
                    Some(e) => {
                        let _ = write!(out, ",{e:.4}");
                    }
                    None => out.push_str(",failed"),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Mean per (level, quantity) over the successful runs; `None` for a level
/// that failed in any run.
pub fn average_reports(reports: &[Report], levels: &[String]) -> BTreeMap<(String, String), Option<f64>> {
    let mut out = BTreeMap::new();
    for l in levels {
        let runs: Option<Vec<&LevelReport>> =
            reports.iter().map(|r| r.levels.get(l).and_then(LevelEntry::report)).collect();
        for q in QUANTITIES {
            let v = runs.as_ref().filter(|r| !r.is_empty()).map(|runs| {
                runs.iter().map(|r| quantity(r, q)).sum::<f64>() / runs.len() as f64
            });
            out.insert((l.clone(), q.to_string()), v);
        }
    }
    out
}

fn failures(report: &Report, tag: &str) -> Vec<String> {
    report
        .levels
        .iter()
        .filter_map(|(l, e)| match e {
            LevelEntry::Error { stage, message } => Some(format!("{tag}/{l}: {stage}: {message}")),
            LevelEntry::Ok(_) => None,
        })
        .collect()
}

pub fn run_accuracy_study(spec: &PhantomSpec, study: &AccuracyStudy, cfg: &PipelineConfig) -> Result<AccuracyTable> {
    if study.repeats == 0 || study.noise_factors.is_empty() {
        return Err(Error::InvalidParam("accuracy study needs repeats and noise factors".into()));
    }
    if study.noise_factors.iter().any(|f| !(*f >= 0.0)) {
        return Err(Error::InvalidParam("noise factors must be >= 0".into()));
    }
    let (clean, truth) = generate_phantom(spec)?;
    let seeds = truth.seeds();
    let names: Vec<String> = truth.levels.iter().map(|l| l.name.clone()).collect();
    let mut rng = seed_stream(cfg.master_seed, 1);
    let noise_seeds: Vec<Vec<u64>> = study
        .noise_factors
        .iter()
        .map(|_| (0..study.repeats).map(|_| rng.random()).collect())
        .collect();

    let mut columns = Vec::new();
    let mut fails = Vec::new();
    for (fi, &factor) in study.noise_factors.iter().enumerate() {
        let mut reports: Vec<Report> = Vec::with_capacity(study.repeats);
        for (r, &ns) in noise_seeds[fi].iter().enumerate() {
            // noiseless repeats are identical; the pipeline is deterministic
            if factor == 0.0 && r > 0 {
                reports.push(reports[0].clone());
                continue;
            }
            let vol = add_noise(&clean, factor * spec.noise_sigma, ns)?;
            let out = run_pipeline_on(&vol, &seeds, cfg, None);
            fails.extend(failures(&out.report, &format!("{factor}/{r}")));
            reports.push(out.report);
        }
        columns.push(average_reports(&reports, &names));
    }

    let mut rows = Vec::new();
    for (li, l) in names.iter().enumerate() {
        for q in QUANTITIES {
            let nom = nominal(&truth, li, q);
            let measured: Vec<Option<f64>> = columns.iter().map(|c| c[&(l.clone(), q.to_string())]).collect();
            let error_percent = measured
                .iter()
                .map(|m| m.map(|m| accuracy_error(m, nom)).transpose())
                .collect::<Result<Vec<_>>>()?;
            rows.push(AccuracyRow {
                level: l.clone(),
                quantity: q.to_string(),
                nominal: nom,
                measured,
                error_percent,
            });
        }
    }
    Ok(AccuracyTable {
        noise_factors: study.noise_factors.clone(),
        sigma0: spec.noise_sigma,
        repeats: study.repeats,
        rows,
        failures: fails,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrecisionStudy {
    /// Phantom instances, each with its own noise seed (the "subjects").
    pub instances: usize,
    /// Analyses per instance, each with freshly jittered seeds.
    pub analyses: usize,
    /// Seeds move uniformly within a ball of this radius (mm).
    pub jitter_mm: f64,
    /// Multiple of the phantom's noise sigma.
    pub noise_factor: f64,
}

impl Default for PrecisionStudy {
    fn default() -> Self {
        Self {
            instances: 5,
            analyses: 3,
            jitter_mm: 2.0,
            noise_factor: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrecisionReport {
    /// `bmd_total`, `bmd_cylinder`, `bmd_pacman`, `volume`.
    pub quantities: BTreeMap<String, PrecisionSummary>,
    /// `m1`..`m4`: positional SD over analyses as a percentage of the body
    /// height, averaged over levels, RMS over instances.
    pub landmarks: BTreeMap<String, PrecisionSummary>,
}

pub fn jitter_seeds(seeds: &SeedSet, radius: f64, rng: &mut impl Rng) -> SeedSet {
    let mut out = seeds.clone();
    for s in &mut out.levels {
        let d: [f64; 3] = UnitBall.sample(rng);
        for a in 0..3 {
            s.center_mm[a] += radius * d[a];
        }
    }
    out
}

fn landmark(r: &LevelReport, k: usize) -> Option<Vec3> {
    let l = &r.landmarks;
    match k {
        0 => Some(l.m1),
        1 => Some(l.m2),
        2 => l.m3,
        _ => l.m4,
    }
}

/// RMS distance of the points to their mean, with the `n − 1` convention.
fn position_sd(points: &[Vec3]) -> f64 {
    let n = points.len() as f64;
    let mean = points.iter().sum::<Vec3>() / n;
    (points.iter().map(|p| (p - mean).norm_squared()).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Landmark %CV summary from per-instance percentages.
fn summarize(per_subject: Vec<f64>) -> PrecisionSummary {
    let n = per_subject.len() as f64;
    let rms = (per_subject.iter().map(|c| c * c).sum::<f64>() / n).sqrt();
    let mean = per_subject.iter().sum::<f64>() / n;
    let sd = if per_subject.len() > 1 {
        (per_subject.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    PrecisionSummary {
        cv_rms_percent: rms,
        cv_sd: sd,
        per_subject,
    }
}

pub fn run_precision_study(spec: &PhantomSpec, study: &PrecisionStudy, cfg: &PipelineConfig) -> Result<PrecisionReport> {
    if study.instances == 0 || study.analyses < 2 {
        return Err(Error::InvalidParam("precision study needs instances and at least two analyses".into()));
    }
    if !(study.jitter_mm >= 0.0 && study.noise_factor >= 0.0) {
        return Err(Error::InvalidParam("jitter and noise factor must be >= 0".into()));
    }
    let (clean, truth) = generate_phantom(spec)?;
    let base = truth.seeds();
    let heights: Vec<f64> = truth.levels.iter().map(|l| l.shape.height()).collect();
    let nlev = truth.levels.len();
    let mut rng = seed_stream(cfg.master_seed, 2);

    // values[q][instance][analysis][level]
    let mut values = vec![vec![Vec::<Vec<f64>>::new(); study.instances]; QUANTITIES.len()];
    let mut marks = vec![Vec::new(); 4];
    for inst in 0..study.instances {
        let vol: Volume = add_noise(&clean, study.noise_factor * spec.noise_sigma, rng.random())?;
        // [analysis][level][landmark]
        let mut pts: Vec<Vec<[Vec3; 4]>> = Vec::new();
        for a in 0..study.analyses {
            let seeds = jitter_seeds(&base, study.jitter_mm, &mut rng);
            let out = run_pipeline_on(&vol, &seeds, cfg, None);
            let fails = failures(&out.report, &format!("instance {inst}/analysis {a}"));
            if !fails.is_empty() {
                return Err(Error::Report(format!("precision run failed: {}", fails.join("; "))));
            }
            let reps: Vec<&LevelReport> = base
                .levels
                .iter()
                .map(|s| out.report.levels[&s.name].report().expect("checked above"))
                .collect();
            for (qi, q) in QUANTITIES.iter().enumerate() {
                values[qi][inst].push(reps.iter().map(|r| quantity(r, q)).collect());
            }
            let mut per_level = Vec::with_capacity(nlev);
            for r in &reps {
                let mut m = [Vec3::zeros(); 4];
                for (k, slot) in m.iter_mut().enumerate() {
                    *slot = landmark(r, k)
                        .ok_or_else(|| Error::Report(format!("landmark M{} missing", k + 1)))?;
                }
                per_level.push(m);
            }
            pts.push(per_level);
        }
        for (k, mk) in marks.iter_mut().enumerate() {
            let cv = (0..nlev)
                .map(|l| {
                    let p: Vec<Vec3> = pts.iter().map(|a| a[l][k]).collect();
                    100.0 * position_sd(&p) / heights[l]
                })
                .sum::<f64>()
                / nlev as f64;
            mk.push(cv);
        }
    }

    let mut quantities = BTreeMap::new();
    for (qi, q) in QUANTITIES.iter().enumerate() {
        quantities.insert(q.to_string(), precision_cv(&values[qi])?);
    }
    let landmarks = marks
        .into_iter()
        .enumerate()
        .map(|(k, v)| (format!("m{}", k + 1), summarize(v)))
        .collect();
    Ok(PrecisionReport { quantities, landmarks })
}
