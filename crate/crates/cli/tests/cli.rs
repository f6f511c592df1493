use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use vqct_core::phantom::TruthSummary;
use vqct_core::presegment::SeedSet;
use vqct_core::volgrid::load_volume;

fn vqct(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vqct")).args(args).output().unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn phantom_generate_writes_volume_seeds_and_truth() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    fs::write(
        &spec,
        r#"{"levels":[{"name":"L2","trabecular_bmd":100,"body_radius_mm":20,"body_height_mm":25,
            "cortical_thickness_mm":1.5,"cortical_bmd":1000,"pedicle_radius_mm":3,"process_extent_mm":12,
            "tilt_deg":0,"offset_mm":[0,0]}],
            "soft_tissue_value":0,"spacing":[1,1,1],"noise_sigma":15,"rng_seed":3}"#,
    )
    .unwrap();
    let out = dir.path().join("ph");
    let o = vqct(&["phantom", "generate", "--spec", path(&spec), "--noise-sigma", "0", "--out", path(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let vol = load_volume(out.join("volume.vqh")).unwrap();
    assert_eq!(vol.geometry().spacing, [1.0; 3]);
    // noise overridden to zero: only the phantom's own grey values
    assert!(vol.data().iter().all(|&v| (0.0..=1000.0).contains(&v)));
    assert!(vol.data().contains(&100.0));
    let seeds: SeedSet = serde_json::from_str(&fs::read_to_string(out.join("seeds.json")).unwrap()).unwrap();
    assert_eq!(seeds.levels.len(), 1);
    let truth: TruthSummary = serde_json::from_str(&fs::read_to_string(out.join("truth.json")).unwrap()).unwrap();
    assert_eq!(truth.levels.len(), 1);
}

#[test]
fn run_exits_nonzero_when_a_level_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ph");
    let spec = dir.path().join("spec.json");
    fs::write(&spec, r#"{"levels":[],"soft_tissue_value":0,"spacing":[1,1,1],"noise_sigma":0,"rng_seed":1}"#).unwrap();
    // an empty phantom is rejected outright
    let o = vqct(&["phantom", "generate", "--spec", path(&spec), "--out", path(&out)]);
    assert_eq!(o.status.code(), Some(2));

    let o = vqct(&["phantom", "generate", "--noise-sigma", "0", "--out", path(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let seeds = dir.path().join("seeds.json");
    fs::write(&seeds, r#"{"levels":[{"name":"L9","center_mm":[0,0,900]}]}"#).unwrap();
    let res = dir.path().join("res");
    let o = vqct(&[
        "run",
        "--volume",
        path(&out.join("volume.vqh")),
        "--seeds",
        path(&seeds),
        "--out",
        path(&res),
    ]);
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("L9"));
    let report = fs::read_to_string(res.join("report.json")).unwrap();
    assert!(report.contains("\"error\""));
}

#[test]
fn unreadable_inputs_and_bad_arguments_fail() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.vqh");
    let o = vqct(&["run", "--volume", path(&missing), "--seeds", path(&missing), "--out", path(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("does not exist"));

    let o = vqct(&["study", "accuracy", "--repeats", "0", "--out", path(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    let o = vqct(&["study", "precision", "--analyses", "1", "--out", path(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!vqct(&["frobnicate"]).status.success());
}
