use vqct_core::geom::Vec3;
use vqct_core::phantom::{generate_phantom, PhantomSpec, PhantomTruth};
use vqct_core::presegment::{
    build_search_region, detect_canal, estimate_body_radius, fit_disk_planes, CanalLine, CanalParams, DiskParams,
    RegionParams,
};
use vqct_core::volgrid::Volume;

const COARSE: f64 = 400.0;

fn phantom(edit: impl FnOnce(&mut PhantomSpec)) -> (Volume, PhantomTruth) {
    let mut spec = PhantomSpec {
        noise_sigma: 0.0,
        ..PhantomSpec::default()
    };
    edit(&mut spec);
    generate_phantom(&spec).unwrap()
}

fn canal_at(canal: &CanalLine, z: f64) -> Vec3 {
    *canal
        .points
        .iter()
        .min_by(|a, b| (a.z - z).abs().total_cmp(&(b.z - z).abs()))
        .unwrap()
}

fn angle_deg(a: &Vec3, b: &Vec3) -> f64 {
    a.normalize().dot(&b.normalize()).clamp(-1.0, 1.0).acos().to_degrees()
}

#[test]
fn canal_center_within_one_voxel_of_truth() {
    let (vol, truth) = phantom(|_| {});
    let canal = detect_canal(&vol, &truth.seeds(), COARSE, &CanalParams::default()).unwrap();
    let voxel = vol.geometry().spacing[0];
    let mut total = 0;
    let mut hits = 0;
    for l in &truth.levels {
        for t in &l.canal_centerline {
            let d = canal_at(&canal, t.z);
            assert!((d.z - t.z).abs() < 1e-6, "no canal sample on slice z = {}", t.z);
            total += 1;
            if (d.xy() - t.xy()).norm() <= voxel {
                hits += 1;
            }
        }
    }
    assert!(total > 0);
    assert!(hits as f64 >= 0.95 * total as f64, "{hits}/{total} slices within one voxel");
}

#[test]
fn tilted_canal_ignores_endplate_pockets() {
    // oblique slices through a tilted endplate show enclosed pockets of the
    // body interior that must not be taken for the canal
    let (vol, truth) = phantom(|s| {
        for l in &mut s.levels {
            l.tilt_deg = 10.0;
        }
    });
    let canal = detect_canal(&vol, &truth.seeds(), COARSE, &CanalParams::default()).unwrap();
    for l in &truth.levels {
        for t in &l.canal_centerline {
            let err = (canal_at(&canal, t.z).xy() - t.xy()).norm();
            assert!(err <= 2.0, "canal off by {err} mm at z = {}", t.z);
        }
    }
}

#[test]
fn shifted_level_keeps_chain_continuous() {
    let (vol, truth) = phantom(|s| s.levels[1].offset_mm = [5.0, 0.0]);
    let canal = detect_canal(&vol, &truth.seeds(), COARSE, &CanalParams::default()).unwrap();
    for w in canal.points.windows(2) {
        assert!((w[1].xy() - w[0].xy()).norm() <= 3.0, "in-plane step {:?} -> {:?}", w[0], w[1]);
    }
    // and it actually follows the shift
    let mid = &truth.levels[1];
    let c = canal_at(&canal, mid.shape.center.z);
    assert!((c.x - 5.0).abs() <= 0.5, "canal x {} at the shifted level", c.x);
}

#[test]
fn untilted_planes_match_truth_gaps() {
    let (vol, truth) = phantom(|_| {});
    let planes = fit_disk_planes(&vol, &truth.seeds(), &DiskParams::default()).unwrap();
    assert_eq!(planes.len(), truth.levels.len() + 1);
    for (fit, want) in planes[1..planes.len() - 1].iter().zip(&truth.disk_planes) {
        assert!(angle_deg(&fit.normal, &Vec3::z()) <= 2.0, "normal {:?}", fit.normal);
        // compare where the truth plane crosses the column axis
        let on_axis = want.project(&Vec3::zeros());
        assert!(fit.signed_distance(&on_axis).abs() <= 1.0, "offset off by {}", fit.signed_distance(&on_axis));
    }
}

#[test]
fn tilted_planes_recover_tilt() {
    let (vol, truth) = phantom(|s| {
        for l in &mut s.levels {
            l.tilt_deg = 10.0;
        }
    });
    let planes = fit_disk_planes(&vol, &truth.seeds(), &DiskParams::default()).unwrap();
    for (fit, want) in planes[1..planes.len() - 1].iter().zip(&truth.disk_planes) {
        let tilt = angle_deg(&fit.normal, &Vec3::z());
        assert!((tilt - 10.0).abs() <= 2.0, "recovered tilt {tilt}");
        assert!(angle_deg(&fit.normal, &want.normal) <= 2.0);
    }
}

#[test]
fn regions_cover_own_body_and_exclude_neighbours() {
    let (vol, truth) = phantom(|_| {});
    let seeds = truth.seeds();
    let canal = detect_canal(&vol, &seeds, COARSE, &CanalParams::default()).unwrap();
    let planes = fit_disk_planes(&vol, &seeds, &DiskParams::default()).unwrap();
    let params = RegionParams::default();
    let geom = *vol.geometry();
    for (i, seed) in seeds.points().iter().enumerate() {
        let r_est = estimate_body_radius(&vol, seed, COARSE, params.max_body_radius_mm).unwrap();
        let region = build_search_region(seed, &canal, &planes[i], &planes[i + 1], r_est, &params).unwrap();
        assert!(region.contains(seed));
        for (j, l) in truth.levels.iter().enumerate() {
            let inside = l.body_mask.indices().filter(|&v| region.contains(&geom.center(v))).count();
            let frac = inside as f64 / l.body_mask.count() as f64;
            if i == j {
                assert!(frac >= 0.99, "level {i}: own body coverage {frac}");
            } else {
                assert_eq!(inside, 0, "level {i} region reaches level {j}");
            }
        }
        // the posterior arch stays outside the balloon region
        let arch = arch_point(&truth, i);
        assert!(!region.contains(&arch), "arch point {arch:?} inside region {i}");
    }
}

/// A point inside the anterior part of the arch ring of level `i`.
fn arch_point(truth: &PhantomTruth, i: usize) -> Vec3 {
    let s = &truth.levels[i].shape;
    s.canal_point(0.0) - s.v * (s.canal_radius() + 0.5)
}
