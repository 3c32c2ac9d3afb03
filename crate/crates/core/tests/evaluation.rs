mod common;

use airtrack_core::dataset::{build_dataset, Dataset, TrajectoryData};
use airtrack_core::eval::{
    evaluate, select, trajectory_trace_csv, zero_baseline_eval, DeltaPredictor, EvalMode, OraclePredictor,
    ZeroPredictor,
};
use airtrack_core::{DeltaPose, Result};
use common::tiny_config;

fn tiny(seed: u64, frames: usize) -> (tempfile::TempDir, Dataset) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = airtrack_core::dataset::DatasetConfig {
        frames_per_trajectory: frames,
        ..tiny_config(seed)
    };
    build_dataset(&cfg, dir.path()).unwrap();
    let ds = Dataset::open(dir.path()).unwrap();
    (dir, ds)
}

fn all(ds: &Dataset) -> Vec<&TrajectoryData> {
    ds.trajectories.iter().collect()
}

/// Ground truth plus a fixed perturbation per step.
struct Perturbed<F: Fn(usize) -> DeltaPose + Sync>(F);

impl<F: Fn(usize) -> DeltaPose + Sync> DeltaPredictor for Perturbed<F> {
    fn name(&self) -> String {
        "perturbed".into()
    }

    fn predict(&self, traj: &TrajectoryData) -> Result<Vec<DeltaPose>> {
        Ok(traj
            .deltas()
            .iter()
            .enumerate()
            .map(|(k, d)| {
                let e = (self.0)(k);
                let mut a = d.to_array();
                for (x, y) in a.iter_mut().zip(e.to_array()) {
                    *x += y;
                }
                DeltaPose::from_slice(&a)
            })
            .collect())
    }
}

#[test]
fn oracle_scores_zero_in_both_modes() {
    let (_d, ds) = tiny(21, 21);
    for mode in EvalMode::ALL {
        let r = evaluate(&OraclePredictor, &all(&ds), mode).unwrap();
        for s in [r.pos_l2, r.rot_l2, r.rot_l2_wrapped, r.de, r.ce] {
            assert!(s.mean.abs() <= 1e-9 && s.std <= 1e-9, "{mode}: {r:?}");
        }
    }
}

#[test]
fn zero_predictor_matches_direct_computation() {
    let (_d, ds) = tiny(22, 21);
    let trajs = all(&ds);
    let r = evaluate(&ZeroPredictor, &trajs, EvalMode::PerPair).unwrap();
    let mut norms = Vec::new();
    let mut ces = Vec::new();
    for t in &trajs {
        for w in t.records.windows(2) {
            let (a, b) = (w[0].pose, w[1].pose);
            let d = [b.position.x - a.position.x, b.position.y - a.position.y, b.position.z - a.position.z];
            norms.push((d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt());
            let o = [
                b.orientation.alpha - a.orientation.alpha,
                b.orientation.beta - a.orientation.beta,
                b.orientation.gamma - a.orientation.gamma,
            ];
            ces.push(o.iter().map(|x| 1.0 - x.cos()).sum::<f64>() / 3.0);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert_eq!(r.n, trajs.iter().map(|t| t.records.len() - 1).sum::<usize>());
    assert_eq!(r.n, norms.len());
    assert!((r.pos_l2.mean - mean(&norms)).abs() < 1e-9);
    assert!((r.ce.mean - mean(&ces)).abs() < 1e-9);
    assert!(r.pos_l2.std >= 0.0);

    // accumulated: the final estimate stays at the first pose
    let r = evaluate(&ZeroPredictor, &trajs, EvalMode::Accumulated).unwrap();
    assert_eq!(r.n, trajs.len());
    let spans: Vec<f64> = trajs
        .iter()
        .map(|t| t.records[0].pose.position.distance(&t.records[t.records.len() - 1].pose.position))
        .collect();
    assert!((r.pos_l2.mean - mean(&spans)).abs() < 1e-9);
}

#[test]
fn zero_baseline_uses_the_manifest_validation_split() {
    let (_d, ds) = tiny(23, 21);
    let val = select(&ds, &ds.manifest.split.val).unwrap();
    for mode in EvalMode::ALL {
        let a = zero_baseline_eval(&ds, mode).unwrap();
        let b = evaluate(&ZeroPredictor, &val, mode).unwrap();
        assert_eq!((a.pos_l2, a.ce, a.n), (b.pos_l2, b.ce, b.n));
        assert_eq!(a, zero_baseline_eval(&ds, mode).unwrap());
    }
}

#[test]
fn alternating_errors_cancel_when_accumulated() {
    let (_d, ds) = tiny(24, 21);
    let eps = 0.25;
    let p = Perturbed(|k| {
        let s = if k % 2 == 0 { eps } else { -eps };
        DeltaPose::new([s, s, s], [0.0; 3])
    });
    let trajs = all(&ds);
    assert!(trajs.iter().all(|t| t.pairs() % 2 == 0));
    let per_pair = evaluate(&p, &trajs, EvalMode::PerPair).unwrap();
    assert!((per_pair.pos_l2.mean - eps * 3f64.sqrt()).abs() < 1e-9);
    let acc = evaluate(&p, &trajs, EvalMode::Accumulated).unwrap();
    assert!(acc.pos_l2.mean < 1e-9, "{}", acc.pos_l2.mean);
}

#[test]
fn single_pair_trajectories_agree_across_modes() {
    let (_d, ds) = tiny(25, 2);
    let p = Perturbed(|_| DeltaPose::new([0.3, -0.1, 0.2], [0.01, -0.02, 0.015]));
    let trajs = all(&ds);
    assert!(trajs.iter().all(|t| t.pairs() == 1));
    let a = evaluate(&p, &trajs, EvalMode::PerPair).unwrap();
    let b = evaluate(&p, &trajs, EvalMode::Accumulated).unwrap();
    assert_eq!(a.n, b.n);
    for (x, y) in [(a.pos_l2, b.pos_l2), (a.rot_l2_wrapped, b.rot_l2_wrapped), (a.ce, b.ce)] {
        assert!((x.mean - y.mean).abs() < 1e-9 && (x.std - y.std).abs() < 1e-9);
    }
}

#[test]
fn oracle_trace_follows_ground_truth() {
    let (_d, ds) = tiny(26, 21);
    let t = &ds.trajectories[0];
    let csv = trajectory_trace_csv(&OraclePredictor, t).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "frame,gt_x,gt_y,gt_z,est_x,est_y,est_z");
    assert_eq!(lines.len(), t.records.len() + 1);
    for l in &lines[1..] {
        let v: Vec<f64> = l.split(',').map(|x| x.parse().unwrap()).collect();
        for k in 1..4 {
            assert!((v[k] - v[k + 3]).abs() < 1e-9);
        }
    }
}

#[test]
fn empty_validation_is_an_error() {
    assert!(evaluate(&ZeroPredictor, &[], EvalMode::PerPair).is_err());
}
