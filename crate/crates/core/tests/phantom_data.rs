use gmic3d::global::{BENIGN, MALIGNANT};
use gmic3d::phantom::{generate_dataset, Dataset, PhantomSpec};
use gmic3d::Error;
use ndarray::s;

/// Lattice points `(dx, dy, dz)` with `dx^2 + dy^2 + dz^2 <= r^2`.
fn rasterized_ball(r: f64) -> usize {
    let n = r.ceil() as i64 + 1;
    let mut count = 0;
    for z in -n..=n {
        for y in -n..=n {
            for x in -n..=n {
                if ((x * x + y * y + z * z) as f64) <= r * r {
                    count += 1;
                }
            }
        }
    }
    count
}

fn one_malignant(radius: f64, irregularity: f64) -> PhantomSpec {
    PhantomSpec {
        height: [40, 40],
        width: [40, 40],
        depth: [16, 16],
        lesions_per_class: [1, 1],
        radius: [radius, radius],
        z_scale: 1.0,
        malignant_irregularity: irregularity,
        benign_prevalence: 0.0,
        malignant_prevalence: 1.0,
        seed: 17,
        ..PhantomSpec::default()
    }
}

fn class_voxels(ds: &Dataset, class: usize) -> Vec<usize> {
    ds.volumes
        .iter()
        .map(|v| v.mask.as_ref().unwrap().slice(s![class, .., .., ..]).iter().filter(|&&m| m != 0).count())
        .collect()
}

#[test]
fn smooth_radius_three_lesion_is_the_rasterized_ball() {
    let ds = generate_dataset(&one_malignant(3.0, 0.0), 5).unwrap();
    let want = rasterized_ball(3.0);
    assert_eq!(want, 123);
    for n in class_voxels(&ds, MALIGNANT) {
        assert_eq!(n, want);
    }
}

#[test]
fn irregular_radius_three_lesion_within_ball_bounds() {
    let a = 0.35;
    let ds = generate_dataset(&one_malignant(3.0, a), 10).unwrap();
    let (lo, hi) = (rasterized_ball(3.0 * (1.0 - a)), rasterized_ball(3.0 * (1.0 + a)));
    for n in class_voxels(&ds, MALIGNANT) {
        assert!((lo..=hi).contains(&n), "{n} outside [{lo}, {hi}]");
    }
}

#[test]
fn zero_prevalence_means_no_positive_volumes() {
    let spec = PhantomSpec { malignant_prevalence: 0.0, height: [32, 32], width: [32, 32], depth: [4, 6], ..PhantomSpec::default() };
    let ds = generate_dataset(&spec, 20).unwrap();
    for v in &ds.volumes {
        assert!(!v.labels.malignant);
        if let Some(m) = &v.mask {
            assert!(m.slice(s![MALIGNANT, .., .., ..]).iter().all(|&x| x == 0));
        }
    }
}

#[test]
fn labels_masks_and_groups_agree() {
    let spec = PhantomSpec { height: [48, 48], width: [48, 48], depth: [4, 10], ..PhantomSpec::default() };
    let ds = generate_dataset(&spec, 40).unwrap();
    assert_eq!(ds.len(), 80);
    for pair in ds.volumes.chunks(2) {
        assert_eq!(pair[0].group_id, pair[1].group_id);
        assert_eq!((pair[0].view_id, pair[1].view_id), (0, 1));
        assert_eq!(pair[0].labels, pair[1].labels);
    }
    for v in &ds.volumes {
        v.validate().unwrap();
        let positive = v.labels.benign || v.labels.malignant;
        assert!(!positive || v.mask.is_some());
        for c in [BENIGN, MALIGNANT] {
            let any = v.mask.as_ref().is_some_and(|m| m.slice(s![c, .., .., ..]).iter().any(|&x| x != 0));
            assert_eq!(any, v.labels.get(c));
        }
    }
    let depths: std::collections::BTreeSet<usize> = ds.volumes.iter().map(|v| v.depth()).collect();
    assert!(depths.len() > 1, "depth should vary across volumes");
}

#[test]
fn same_seed_gives_identical_data() {
    let spec = PhantomSpec { height: [32, 32], width: [32, 32], depth: [3, 5], ..PhantomSpec::default() };
    assert_eq!(generate_dataset(&spec, 6).unwrap(), generate_dataset(&spec, 6).unwrap());
    let other = PhantomSpec { seed: 1, ..spec.clone() };
    assert_ne!(generate_dataset(&spec, 6).unwrap(), generate_dataset(&other, 6).unwrap());
}

#[test]
fn invalid_specs_are_configuration_errors() {
    let bad = [
        PhantomSpec { radius: [5.0, 2.0], ..PhantomSpec::default() },
        PhantomSpec { depth: [0, 3], ..PhantomSpec::default() },
        PhantomSpec { malignant_prevalence: 1.5, ..PhantomSpec::default() },
        PhantomSpec { radius: [30.0, 40.0], ..PhantomSpec::default() },
    ];
    for spec in bad {
        assert!(matches!(generate_dataset(&spec, 1), Err(Error::Config(_))));
    }
    assert!(matches!(generate_dataset(&PhantomSpec::default(), 0), Err(Error::Config(_))));
    assert!(PhantomSpec::from_toml("bogus_key = 3").is_err());
    let parsed = PhantomSpec::from_toml("seed = 9\nradius = [3.0, 4.0]").unwrap();
    assert_eq!((parsed.seed, parsed.radius), (9, [3.0, 4.0]));
}

#[test]
fn round_trips_one_and_a_hundred_volumes() {
    let dir = tempfile::tempdir().unwrap();
    let spec = PhantomSpec { height: [32, 32], width: [32, 32], depth: [2, 4], ..PhantomSpec::default() };
    let mut one = generate_dataset(&spec, 1).unwrap();
    one.volumes.truncate(1);
    let p = dir.path().join("one.g3d");
    one.save(&p).unwrap();
    assert_eq!(Dataset::load(&p).unwrap(), one);

    let many = generate_dataset(&spec, 50).unwrap();
    assert_eq!(many.len(), 100);
    let p = dir.path().join("many.g3d");
    many.save(&p).unwrap();
    let back = Dataset::load(&p).unwrap();
    assert_eq!(back, many);
    for (a, b) in back.volumes.iter().zip(&many.volumes) {
        assert_eq!((a.labels, a.group_id, a.view_id), (b.labels, b.group_id, b.view_id));
    }
}

#[test]
fn truncated_final_record_names_the_record() {
    let dir = tempfile::tempdir().unwrap();
    let spec = PhantomSpec { height: [32, 32], width: [32, 32], depth: [2, 3], malignant_prevalence: 0.0, benign_prevalence: 0.0, ..PhantomSpec::default() };
    let ds = generate_dataset(&spec, 2).unwrap();
    let p = dir.path().join("d.g3d");
    ds.save(&p).unwrap();
    let last = ds.to_container().records.last().unwrap().name.clone();
    let bytes = std::fs::read(&p).unwrap();
    std::fs::write(&p, &bytes[..bytes.len() - 10]).unwrap();
    match Dataset::load(&p) {
        Err(Error::Format { record, .. }) => assert_eq!(record, last),
        other => panic!("expected a format error, got {other:?}"),
    }
}

#[test]
fn group_split_keeps_views_together() {
    let spec = PhantomSpec { height: [32, 32], width: [32, 32], depth: [2, 3], ..PhantomSpec::default() };
    let ds = generate_dataset(&spec, 25).unwrap();
    let (train, val) = ds.split_by_group(5);
    assert_eq!((train.len(), val.len()), (40, 10));
    for v in &val.volumes {
        assert!(train.volumes.iter().all(|t| t.group_id != v.group_id));
    }
}
