//! Coarse-to-fine orchestration. Global constraints (canal, disk planes) are
//! computed once; every level then runs balloon → classify → grow/close →
//! pedicle cut → peel on a crop around its search region. The column spline
//! needs every body center, so VCS, VOIs and measurement run after a barrier.
//! Level failures are recorded in the report and never abort the others.

mod study;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anatomy::{centre_of_volume, compute_vcs, fit_column_spline, make_voi, BodyExtents, VoiKind, VoiSpec};
use crate::balloon::{run_balloon, voxelize_closed_mesh, BalloonMesh, BalloonParams};
use crate::classify::{classify_voxel, fit_two_gaussians, threshold_band, ClassifyParams, FitReport, ThresholdBand};
use crate::error::{Error, Result};
use crate::geom::{Plane, Vec3};
use crate::morphops::{close_and_fill, pedicle_cut, trabecular_peel, volume_grow, PedicleParams};
use crate::presegment::{
    build_search_region, canal_distance, detect_canal, estimate_body_radius, fit_disk_planes, CanalLine, CanalParams, DiskParams,
    RegionParams, SearchRegion, SeedSet,
};
use crate::report::{measure_voi, LevelEntry, LevelReport, Report, VoiSet};
use crate::volgrid::{load_volume, write_mask, Geometry, Mask, Volume};

pub use study::{
    average_reports, jitter_seeds, run_accuracy_study, run_precision_study, AccuracyRow, AccuracyStudy, AccuracyTable, PrecisionReport,
    PrecisionStudy,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Constraints,
    Balloon,
    Classify,
    Grow,
    PedicleCut,
    Peel,
    Vcs,
    Voi,
    Measure,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::Constraints,
        Stage::Balloon,
        Stage::Classify,
        Stage::Grow,
        Stage::PedicleCut,
        Stage::Peel,
        Stage::Vcs,
        Stage::Voi,
        Stage::Measure,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Constraints => "constraints",
            Stage::Balloon => "balloon",
            Stage::Classify => "classify",
            Stage::Grow => "grow",
            Stage::PedicleCut => "pedicle_cut",
            Stage::Peel => "peel",
            Stage::Vcs => "vcs",
            Stage::Voi => "voi",
            Stage::Measure => "measure",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DumpFlags {
    pub masks: bool,
    pub meshes: bool,
    pub fits: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub volume: Option<PathBuf>,
    pub seeds: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    /// Grey value separating bone from everything else for the coarse
    /// constraint stage (canal cavities, body radius flood).
    pub coarse_bone_threshold: f64,
    pub canal: CanalParams,
    pub disk: DiskParams,
    pub region: RegionParams,
    pub balloon: BalloonParams,
    /// Size the initial sphere and the profile length from the disk planes
    /// and the coarse body radius instead of the fixed balloon values.
    pub auto_balloon_size: bool,
    pub classify: ClassifyParams,
    pub closing_radius_mm: f64,
    pub pedicle: PedicleParams,
    pub peel_depth_mm: f64,
    pub cylinder: VoiSpec,
    pub pacman: VoiSpec,
    pub dump: DumpFlags,
    /// Process levels concurrently; output is identical either way.
    pub parallel: bool,
    /// Root of all randomness in studies (noise, seed jitter).
    pub master_seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            volume: None,
            seeds: None,
            out_dir: None,
            coarse_bone_threshold: 400.0,
            canal: CanalParams::default(),
            disk: DiskParams::default(),
            region: RegionParams::default(),
            balloon: BalloonParams::default(),
            auto_balloon_size: true,
            classify: ClassifyParams::default(),
            closing_radius_mm: 2.0,
            pedicle: PedicleParams::default(),
            peel_depth_mm: 2.0,
            cylinder: VoiSpec {
                kind: VoiKind::Cylinder,
                radius_fraction: 0.6,
                height_fraction: 0.5,
            },
            pacman: VoiSpec {
                kind: VoiKind::Pacman,
                radius_fraction: 0.6,
                height_fraction: 0.5,
            },
            dump: DumpFlags::default(),
            parallel: true,
            master_seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.balloon.validate()?;
        self.cylinder.validate()?;
        self.pacman.validate()?;
        if self.cylinder.kind != VoiKind::Cylinder || self.pacman.kind != VoiKind::Pacman {
            return Err(Error::InvalidParam("cylinder/pacman VOI kinds swapped".into()));
        }
        if !(self.closing_radius_mm >= 0.0 && self.peel_depth_mm >= 0.0) {
            return Err(Error::InvalidParam("closing radius and peel depth must be >= 0".into()));
        }
        if !self.coarse_bone_threshold.is_finite() {
            return Err(Error::InvalidParam("coarse bone threshold must be finite".into()));
        }
        for (what, p) in [("volume", &self.volume), ("seeds", &self.seeds)] {
            if let Some(p) = p {
                if !p.exists() {
                    return Err(Error::InvalidParam(format!("{what} path {} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }
}

/// Progress as reported to observers: `done` of `total` stage steps.
#[derive(Clone, Debug, PartialEq)]
pub struct ProgressEvent {
    pub level: Option<String>,
    pub stage: Stage,
    pub done: usize,
    pub total: usize,
}

impl ProgressEvent {
    pub fn percent(&self) -> f64 {
        100.0 * self.done as f64 / self.total.max(1) as f64
    }
}

pub type ProgressFn<'a> = &'a (dyn Fn(ProgressEvent) + Sync);

struct Tracker<'a> {
    done: AtomicUsize,
    total: usize,
    sink: Option<ProgressFn<'a>>,
}

impl Tracker<'_> {
    fn tick(&self, level: Option<&str>, stage: Stage) {
        let done = self.done.fetch_add(1, Ordering::SeqCst) + 1;
        if let Some(f) = self.sink {
            f(ProgressEvent {
                level: level.map(str::to_string),
                stage,
                done: done.min(self.total),
                total: self.total,
            });
        }
    }
}

/// A mask computed on a crop, with the crop's lower corner in the full grid.
#[derive(Clone, Debug, PartialEq)]
pub struct CroppedMask {
    pub lo: [usize; 3],
    pub mask: Mask,
}

impl CroppedMask {
    pub fn embed(&self, parent: Geometry) -> Result<Mask> {
        self.mask.embed(parent, self.lo)
    }

    /// Membership of a full-grid voxel.
    pub fn contains(&self, ijk: [usize; 3]) -> bool {
        let d = self.mask.geometry().dims;
        let mut local = [0; 3];
        for a in 0..3 {
            if ijk[a] < self.lo[a] || ijk[a] - self.lo[a] >= d[a] {
                return false;
            }
            local[a] = ijk[a] - self.lo[a];
        }
        self.mask.get3(local[0], local[1], local[2])
    }
}

/// In-memory per-level artifacts, kept for overlays.
#[derive(Clone, Debug, Default)]
pub struct LevelArtifacts {
    pub masks: BTreeMap<String, CroppedMask>,
    pub mesh: Option<BalloonMesh>,
}

#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub report: Report,
    pub artifacts: BTreeMap<String, LevelArtifacts>,
}

impl PipelineOutput {
    pub fn failed(&self) -> bool {
        !self.report.failed_levels().is_empty()
    }
}

#[derive(Debug)]
struct StageError {
    stage: Stage,
    error: Error,
}

trait AtStage<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, StageError>;
}

impl<T> AtStage<T> for Result<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, StageError> {
        self.map_err(|error| StageError { stage, error })
    }
}

type StageResult<T> = std::result::Result<T, StageError>;

/// Everything phase 1 hands to phase 2.
struct Segmented {
    crop_lo: [usize; 3],
    vol: Volume,
    fit: FitReport,
    body: Mask,
    trabecular: Mask,
    m1: Vec3,
    m3: Option<Vec3>,
    m4: Option<Vec3>,
    warnings: Vec<String>,
    artifacts: LevelArtifacts,
}

/// Extra crop margin beyond the region's bounding box (voxels).
const CROP_PAD_VOXELS: usize = 3;

/// Initial sphere radius and profile length for a level: the sphere starts
/// halfway between the nearest disk plane and the coarse body radius, and
/// the profile reaches both.
fn balloon_size(params: &BalloonParams, seed: &Vec3, lower: &Plane, upper: &Plane, r_est: f64) -> BalloonParams {
    let d_plane = lower.signed_distance(seed).abs().min(upper.signed_distance(seed).abs());
    let (r_min, r_max) = (d_plane.min(r_est), d_plane.max(r_est));
    let rho = 0.5 * (d_plane + r_est);
    let half = (rho - 0.5 * r_min).max(1.3 * r_max - rho);
    BalloonParams {
        init_radius_mm: rho,
        profile_length_mm: 2.0 * half,
        ..params.clone()
    }
}

fn crop_box(geom: &Geometry, region: &SearchRegion, pad_mm: f64) -> Result<([usize; 3], [usize; 3])> {
    let (lo, hi) = region.world_aabb();
    let min_spacing = geom.spacing.iter().copied().fold(f64::INFINITY, f64::min);
    let pad = (pad_mm / min_spacing).ceil() as usize + CROP_PAD_VOXELS;
    geom.index_box(&lo, &hi, pad)
        .ok_or_else(|| Error::Region("search region lies outside the volume".into()))
}

#[allow(clippy::too_many_arguments)]
fn segment_level(
    vol: &Volume,
    name: &str,
    seed: &Vec3,
    canal: &CanalLine,
    lower: &Plane,
    upper: &Plane,
    cfg: &PipelineConfig,
    tracker: &Tracker,
) -> StageResult<Segmented> {
    let geom = *vol.geometry();
    let tick = |s| tracker.tick(Some(name), s);
    // constraints
    let r_est = estimate_body_radius(vol, seed, cfg.coarse_bone_threshold, cfg.region.max_body_radius_mm)
        .at(Stage::Constraints)?;
    let region = build_search_region(seed, canal, lower, upper, r_est, &cfg.region).at(Stage::Constraints)?;
    // the balloon stays in `region`; growing may follow the pedicles into the arch
    let d_canal = canal_distance(seed, canal, &region.axis_dir).at(Stage::Constraints)?;
    let grow_region = region.with_radius(region.radius.max(cfg.region.grow_canal_fraction * d_canal));
    let (lo, hi) = crop_box(&geom, &grow_region, cfg.closing_radius_mm).at(Stage::Constraints)?;
    let cvol = vol.crop(lo, hi).at(Stage::Constraints)?;
    let cgeom = *cvol.geometry();
    let region_mask = region.rasterize(&cgeom);
    let grow_mask = grow_region.rasterize(&cgeom);
    tick(Stage::Constraints);

    let bparams = if cfg.auto_balloon_size {
        balloon_size(&cfg.balloon, seed, lower, upper, r_est)
    } else {
        cfg.balloon.clone()
    };
    let run = run_balloon(vol, &region, seed, &bparams).at(Stage::Balloon)?;
    let mut warnings = Vec::new();
    if !run.converged {
        warnings.push(format!("balloon stopped after {} iterations without converging", run.iterations));
    }
    let (surface, interior) = voxelize_closed_mesh(&run.mesh, &cgeom).at(Stage::Balloon)?;
    let balloon = surface.or(&interior).at(Stage::Balloon)?;
    tick(Stage::Balloon);

    let em = fit_two_gaussians(&cvol, &balloon, &cfg.classify.fit).at(Stage::Classify)?;
    let band: ThresholdBand = threshold_band(&em.pair, &cfg.classify).at(Stage::Classify)?;
    let fit = FitReport::new(&em.pair, &band);
    tick(Stage::Classify);

    let r = cfg.classify.neighborhood_radius;
    let seeds: Vec<usize> = surface
        .indices()
        .filter(|&i| region_mask.get(i) && classify_voxel(&cvol, i, &band, r))
        .collect();
    if seeds.is_empty() {
        return Err(Error::Morphology("no bone on the balloon surface".into())).at(Stage::Grow);
    }
    let grown = volume_grow(&cvol, &seeds, &band, &grow_mask, r).at(Stage::Grow)?;
    let filled = close_and_fill(&grown, cfg.closing_radius_mm).at(Stage::Grow)?;
    tick(Stage::Grow);

    let cut = pedicle_cut(&filled, &cfg.pedicle).at(Stage::PedicleCut)?;
    warnings.extend(cut.warning());
    tick(Stage::PedicleCut);

    let trabecular = trabecular_peel(&cut.body, &cvol, &band, cfg.peel_depth_mm).at(Stage::Peel)?;
    let m1 = centre_of_volume(&cut.body).at(Stage::Peel)?;
    tick(Stage::Peel);

    let mut artifacts = LevelArtifacts::default();
    for (k, m) in [
        ("region", region_mask),
        ("balloon", balloon),
        ("grown", grown),
        ("filled", filled),
        ("body", cut.body.clone()),
        ("process", cut.process),
        ("cut", cut.cut),
        ("trabecular", trabecular.clone()),
    ] {
        artifacts.masks.insert(k.to_string(), CroppedMask { lo, mask: m });
    }
    artifacts.mesh = Some(run.mesh);
    Ok(Segmented {
        crop_lo: lo,
        vol: cvol,
        fit,
        body: cut.body,
        trabecular,
        m1,
        m3: cut.m3,
        m4: cut.m4,
        warnings,
        artifacts,
    })
}

fn finish_level(
    seg: &mut Segmented,
    name: &str,
    canal: &CanalLine,
    spline: &crate::anatomy::ColumnSpline,
    cfg: &PipelineConfig,
    tracker: &Tracker,
) -> StageResult<LevelReport> {
    let (landmarks, vcs) = compute_vcs(seg.m1, canal, spline, seg.m3, seg.m4).at(Stage::Vcs)?;
    let extents = BodyExtents::measure(&vcs, &seg.body).at(Stage::Vcs)?;
    tracker.tick(Some(name), Stage::Vcs);

    let cyl = make_voi(&vcs, &cfg.cylinder, &extents, &seg.trabecular, seg.m3, seg.m4).at(Stage::Voi)?;
    let pac = make_voi(&vcs, &cfg.pacman, &extents, &seg.trabecular, seg.m3, seg.m4).at(Stage::Voi)?;
    tracker.tick(Some(name), Stage::Voi);

    let vois = VoiSet {
        total_trabecular: measure_voi(&seg.vol, &seg.trabecular, "total_trabecular").at(Stage::Measure)?,
        cylinder: measure_voi(&seg.vol, &cyl, "cylinder").at(Stage::Measure)?,
        pacman: measure_voi(&seg.vol, &pac, "pacman").at(Stage::Measure)?,
    };
    tracker.tick(Some(name), Stage::Measure);
    for (k, m) in [("cylinder", cyl), ("pacman", pac)] {
        seg.artifacts.masks.insert(k.to_string(), CroppedMask { lo: seg.crop_lo, mask: m });
    }
    Ok(LevelReport {
        landmarks,
        vcs_axes: vcs,
        vois,
        body_volume_mm3: seg.body.volume_mm3(),
        fit: seg.fit.clone(),
        warnings: seg.warnings.clone(),
    })
}

fn error_entry(e: &StageError) -> LevelEntry {
    LevelEntry::Error {
        stage: e.stage.as_str().to_string(),
        message: e.error.to_string(),
    }
}

fn map_levels<T: Send, U: Send>(parallel: bool, items: Vec<T>, f: impl Fn(T) -> U + Sync + Send) -> Vec<U> {
    if parallel {
        items.into_par_iter().map(f).collect()
    } else {
        items.into_iter().map(f).collect()
    }
}

/// Run every level of `seeds` on `vol`. Never fails as a whole: problems
/// end up as per-level errors in the report.
pub fn run_pipeline_on(
    vol: &Volume,
    seeds: &SeedSet,
    cfg: &PipelineConfig,
    progress: Option<ProgressFn>,
) -> PipelineOutput {
    let n = seeds.levels.len();
    let tracker = Tracker {
        done: AtomicUsize::new(0),
        total: 1 + n * (Stage::ALL.len() - 1),
        sink: progress,
    };
    let mut report = Report::default();
    let mut artifacts = BTreeMap::new();
    let fail_all = |report: &mut Report, stage: Stage, e: &Error| {
        for s in &seeds.levels {
            report.levels.insert(
                s.name.clone(),
                LevelEntry::Error {
                    stage: stage.as_str().to_string(),
                    message: e.to_string(),
                },
            );
        }
    };
    let geom = *vol.geometry();
    if let Err(e) = seeds.validate().and_then(|_| cfg.validate()) {
        fail_all(&mut report, Stage::Constraints, &e);
        return PipelineOutput { report, artifacts };
    }

    // levels whose seed is off the grid fail alone; the rest share the global constraints
    let (inside, outside): (Vec<_>, Vec<_>) =
        seeds.levels.iter().cloned().partition(|s| geom.nearest_index(&s.point()).is_some());
    for s in &outside {
        report.levels.insert(
            s.name.clone(),
            LevelEntry::Error {
                stage: Stage::Constraints.as_str().to_string(),
                message: Error::InvalidSeeds(format!("{} lies outside the volume", s.name)).to_string(),
            },
        );
    }
    let active = SeedSet { levels: inside };
    if active.levels.is_empty() {
        return PipelineOutput { report, artifacts };
    }
    let global = detect_canal(vol, &active, cfg.coarse_bone_threshold, &cfg.canal)
        .and_then(|canal| Ok((canal, fit_disk_planes(vol, &active, &cfg.disk)?)));
    let (canal, planes) = match global {
        Ok(g) => g,
        Err(e) => {
            for s in &active.levels {
                report.levels.insert(
                    s.name.clone(),
                    LevelEntry::Error {
                        stage: Stage::Constraints.as_str().to_string(),
                        message: e.to_string(),
                    },
                );
            }
            return PipelineOutput { report, artifacts };
        }
    };
    tracker.tick(None, Stage::Constraints);

    let jobs: Vec<usize> = (0..active.levels.len()).collect();
    let phase1 = map_levels(cfg.parallel, jobs, |i| {
        let s = &active.levels[i];
        segment_level(vol, &s.name, &s.point(), &canal, &planes[i], &planes[i + 1], cfg, &tracker)
    });

    // barrier: the column spline runs through every segmented body
    let covs: Vec<Vec3> = phase1.iter().filter_map(|r| r.as_ref().ok().map(|s| s.m1)).collect();
    let spline = if covs.is_empty() { None } else { Some(fit_column_spline(&covs)) };

    let jobs: Vec<(usize, StageResult<Segmented>)> = phase1.into_iter().enumerate().collect();
    let phase2 = map_levels(cfg.parallel, jobs, |(i, r)| {
        let name = &active.levels[i].name;
        let mut seg = match r {
            Ok(seg) => seg,
            Err(e) => return (Err(e), None),
        };
        let rep = match spline.as_ref().expect("a level succeeded") {
            Ok(spline) => finish_level(&mut seg, name, &canal, spline, cfg, &tracker),
            Err(e) => Err(StageError {
                stage: Stage::Vcs,
                error: Error::Anatomy(format!("column spline: {e}")),
            }),
        };
        // a level that segmented keeps its masks even if a later stage fails
        (rep, Some(seg.artifacts))
    });

    for (s, (r, art)) in active.levels.iter().zip(phase2) {
        let entry = match r {
            Ok(rep) => LevelEntry::Ok(rep),
            Err(e) => error_entry(&e),
        };
        report.levels.insert(s.name.clone(), entry);
        if let Some(art) = art {
            artifacts.insert(s.name.clone(), art);
        }
    }
    PipelineOutput { report, artifacts }
}

/// Write the report (JSON and CSV) and any flagged artifacts into `out`.
pub fn write_outputs(out: &Path, output: &PipelineOutput, geom: Geometry, dump: &DumpFlags) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join("report.json");
    fs::write(&path, output.report.to_json()).map_err(|e| Error::io(&path, e))?;
    let path = out.join("report.csv");
    fs::write(&path, output.report.to_csv()).map_err(|e| Error::io(&path, e))?;
    for (level, art) in &output.artifacts {
        let dir = out.join(level);
        if dump.masks || dump.meshes || dump.fits {
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        if dump.masks {
            for (name, m) in &art.masks {
                write_mask(dir.join(format!("{name}.vqh")), &m.embed(geom)?)?;
            }
        }
        if dump.meshes {
            if let Some(mesh) = &art.mesh {
                let path = dir.join("balloon.tri");
                let f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
                mesh.write_triangle_soup(std::io::BufWriter::new(f)).map_err(|e| Error::io(&path, e))?;
            }
        }
        if dump.fits {
            if let Some(LevelEntry::Ok(r)) = output.report.levels.get(level) {
                let path = dir.join("fit.json");
                let json = serde_json::to_string_pretty(&r.fit).expect("fit serializes");
                fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
            }
        }
    }
    Ok(())
}

pub fn load_seeds(path: &Path) -> Result<SeedSet> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::InvalidSeeds(format!("{}: {e}", path.display())))
}

/// File-based run: load the volume and seeds named by `cfg`, run, and write
/// the outputs. Errors only on unreadable inputs or unwritable outputs.
pub fn run_pipeline(cfg: &PipelineConfig, progress: Option<ProgressFn>) -> Result<PipelineOutput> {
    cfg.validate()?;
    let need = |p: &Option<PathBuf>, what: &str| {
        p.clone().ok_or_else(|| Error::InvalidParam(format!("config has no {what} path")))
    };
    let vol = load_volume(need(&cfg.volume, "volume")?)?;
    let seeds = load_seeds(&need(&cfg.seeds, "seeds")?)?;
    let output = run_pipeline_on(&vol, &seeds, cfg, progress);
    if let Some(out) = &cfg.out_dir {
        write_outputs(out, &output, *vol.geometry(), &cfg.dump)?;
    }
    Ok(output)
}
