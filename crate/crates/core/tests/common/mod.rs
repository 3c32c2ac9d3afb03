//! Oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use std::path::Path;

use airtrack_core::dataset::{DatasetConfig, DatasetManifest, SplitScheme};
use airtrack_core::net::{HeadKind, ModelConfig};
use airtrack_core::render::{CameraIntrinsics, Frame};
use airtrack_core::train::TrainConfig;
use airtrack_core::DeltaPose;

/// Bilinear sample of the gray channel at fractional pixel coordinates.
fn sample(f: &Frame, x: f64, y: f64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let at = |xi: f64, yi: f64| {
        let xi = (xi as isize).clamp(0, f.width as isize - 1) as usize;
        let yi = (yi as isize).clamp(0, f.height as isize - 1) as usize;
        f.gray(xi, yi) as f64
    };
    at(x0, y0) * (1.0 - fx) * (1.0 - fy)
        + at(x0 + 1.0, y0) * fx * (1.0 - fy)
        + at(x0, y0 + 1.0) * (1.0 - fx) * fy
        + at(x0 + 1.0, y0 + 1.0) * fx * fy
}

/// Mean absolute gray difference between `rolled` and `base` rotated in the
/// image plane by `theta` (counter-clockwise with y up), over the disc where
/// the rotated source stays inside the frame. Returns a value in [0, 1].
pub fn rotated_mean_abs_diff(base: &Frame, rolled: &Frame, theta: f64) -> f64 {
    let (w, h) = (base.width as f64, base.height as f64);
    let radius = w.min(h) / 2.0 - 1.0;
    let (c, s) = (theta.cos(), theta.sin());
    let mut total = 0.0;
    let mut n = 0usize;
    for j in 0..base.height {
        for i in 0..base.width {
            let x = i as f64 + 0.5 - w / 2.0;
            let y = h / 2.0 - (j as f64 + 0.5);
            if x * x + y * y > radius * radius {
                continue;
            }
            let (xs, ys) = (c * x + s * y, -s * x + c * y);
            let reference = sample(base, xs + w / 2.0 - 0.5, h / 2.0 - ys - 0.5);
            total += (rolled.gray(i, j) as f64 - reference).abs();
            n += 1;
        }
    }
    total / n as f64 / 255.0
}

/// A small dataset: one patient, six 21-frame trajectories at 16x16, split 4/2.
pub fn tiny_config(seed: u64) -> DatasetConfig {
    DatasetConfig {
        seed,
        patients: 1,
        trajectories_per_lobe: 6,
        frames_per_trajectory: 21,
        camera: CameraIntrinsics {
            width: 16,
            height: 16,
            ..CameraIntrinsics::default()
        },
        split: SplitScheme::Personalized {
            train_per_lobe: 4,
            val_per_lobe: 2,
        },
        ..DatasetConfig::default()
    }
}

pub fn tiny_model(head: HeadKind) -> ModelConfig {
    ModelConfig {
        input_size: [16, 16],
        head,
        ..ModelConfig::default()
    }
}

pub fn tiny_train(cfg: &DatasetConfig) -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        batch_chunks: 2,
        max_epochs: 3,
        split: cfg.split,
        ..TrainConfig::default()
    }
}

/// Rewrites every trajectory so that the camera stays at its first pose:
/// all stored deltas become zero while the frames are kept.
pub fn freeze_poses(root: &Path, manifest: &DatasetManifest) {
    for t in &manifest.trajectories {
        let path = root.join(&t.dir).join("poses.jsonl");
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        let first = lines[0]["pose"].clone();
        for l in &mut lines {
            l["pose"] = first.clone();
            if !l["delta"].is_null() {
                l["delta"] = serde_json::to_value(DeltaPose::ZERO).unwrap();
            }
        }
        let out: Vec<String> = lines.iter().map(|l| serde_json::to_string(l).unwrap()).collect();
        std::fs::write(&path, out.join("\n") + "\n").unwrap();
    }
}
