use std::collections::HashSet;
use std::path::Path;

use airtrack_core::dataset::{
    build_dataset, chunk_sequences, leave_one_out, make_splits, standardize_frame, Dataset, DatasetConfig, SplitScheme,
};
use airtrack_core::pose::{accumulate, delta_pose};
use airtrack_core::render::Frame;

fn toy() -> DatasetConfig {
    DatasetConfig {
        seed: 7,
        frames_per_trajectory: 40,
        ..DatasetConfig::default()
    }
}

fn tree_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for entry in walk(root) {
        let rel = entry.strip_prefix(root).unwrap().to_string_lossy().into_owned();
        out.push((rel, std::fs::read(&entry).unwrap()));
    }
    out.sort();
    out
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn toy_dataset_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy();
    let manifest = build_dataset(&cfg, dir.path()).unwrap();

    // count bookkeeping
    assert_eq!(manifest.total_frames, 2 * 18 * 40);
    assert_eq!(manifest.trajectories.len(), 36);
    let ppm_count = walk(dir.path()).iter().filter(|p| p.extension().is_some_and(|e| e == "ppm")).count();
    assert_eq!(ppm_count, manifest.total_frames);

    let ds = Dataset::open(dir.path()).unwrap();

    // personalized split: 15 / 3 per patient-lobe, disjoint and exhaustive
    let split = &manifest.split;
    assert_eq!(split.train.len(), 30);
    assert_eq!(split.val.len(), 6);
    let train: HashSet<_> = split.train.iter().collect();
    assert!(split.val.iter().all(|v| !train.contains(v)));
    assert!(split.unused.is_empty());

    // stats recomputed from the files on disk, training frames only
    let (mut n, mut sum, mut sumsq) = (0f64, 0f64, 0f64);
    for t in ds.trajectories.iter().filter(|t| split.is_train(&t.entry.traj_id)) {
        for r in &t.records {
            let f = Frame::read_ppm(&dir.path().join(&t.entry.dir).join(&r.file)).unwrap();
            for px in f.pixels.chunks_exact(3) {
                let v = px[0] as f64 / 255.0;
                n += 1.0;
                sum += v;
                sumsq += v * v;
            }
        }
    }
    let mean = sum / n;
    let std = (sumsq / n - mean * mean).sqrt();
    for c in 0..3 {
        assert!((manifest.stats.mean[c] - mean).abs() < 1e-6);
        assert!((manifest.stats.std[c] - std).abs() < 1e-6);
    }
    assert!(manifest.stats.std[0] > 0.0);

    // deltas recompute exactly and telescope to the last pose
    for t in &ds.trajectories {
        let poses = t.poses();
        for (k, d) in t.deltas().iter().enumerate() {
            assert_eq!(*d, delta_pose(&poses[k], &poses[k + 1]));
        }
        let end = accumulate(&poses[0], &t.deltas());
        let last = poses[poses.len() - 1];
        assert!(end.position.distance(&last.position) < 1e-9);
        let e = end.orientation.to_array();
        let l = last.orientation.to_array();
        for k in 0..3 {
            let d = airtrack_core::pose::wrap_angle(e[k] - l[k]);
            assert!(d.abs() < 1e-9);
        }
        // frames vary along the trajectory and are not blank
        assert!(!t.frames[0].is_constant());
        assert_ne!(t.frames[0], t.frames[t.frames.len() - 1]);
        standardize_frame(&t.frames[0], &manifest.stats).unwrap();
    }

    // chunking: 39 pairs at L = 10 leaves 9
    let samples = ds.trajectories[0].samples(dir.path());
    assert_eq!(samples.len(), 39);
    let (chunks, dropped) = chunk_sequences(&samples, 10).unwrap();
    assert_eq!((chunks.len(), dropped), (3, 9));
    assert_eq!(manifest.trajectories[0].dropped_pairs, 9);

    // cross-subject
    let schemes = leave_one_out(2);
    assert_eq!(schemes.len(), 2);
    let mut held = HashSet::new();
    for s in schemes {
        let a = ds.split(s).unwrap();
        let SplitScheme::CrossSubject { holdout_patient } = s else { unreachable!() };
        held.insert(holdout_patient);
        for id in &a.train {
            assert_ne!(ds.manifest.trajectory(id).unwrap().patient, holdout_patient);
        }
        assert_eq!(a.val.len(), 18);
    }
    assert_eq!(held.len(), 2);

    // byte-identical regeneration
    let again = tempfile::tempdir().unwrap();
    build_dataset(&cfg, again.path()).unwrap();
    assert_eq!(tree_bytes(dir.path()), tree_bytes(again.path()));
}

#[test]
fn deficient_groups_are_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = DatasetConfig {
        patients: 1,
        trajectories_per_lobe: 3,
        frames_per_trajectory: 4,
        split: SplitScheme::Personalized {
            train_per_lobe: 2,
            val_per_lobe: 1,
        },
        ..DatasetConfig::default()
    };
    let m = build_dataset(&cfg, dir.path()).unwrap();
    let err = make_splits(&m.trajectories, 1, SplitScheme::default()).unwrap_err();
    assert!(err.to_string().contains("p0/upper-right"), "{err}");
    let err = make_splits(&m.trajectories, 1, SplitScheme::CrossSubject { holdout_patient: 3 }).unwrap_err();
    assert!(err.is_config());
}
