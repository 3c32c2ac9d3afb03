//! Synthetic trajectory datasets: variation grid, velocity profiles, frame
//! synthesis, on-disk layout, normalization statistics, chunking and splits.
//!
//! Layout under the dataset root:
//!
//! ```text
//! manifest.json
//! {patient}/airway.json
//! {patient}/{lobe}/{traj_id}/NNNNNN.ppm
//! {patient}/{lobe}/{traj_id}/poses.jsonl
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::Vector3;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::airway::{camera_frame_offset, centerline_path, generate_patient, AirwayTree, LobeLabel, NavigationPath, PatientSpec};
use crate::error::{Error, Result};
use crate::pose::{delta_pose, rotation_to_euler, DeltaPose, Pose};
use crate::render::{render_trajectory, CameraIntrinsics, Frame};
use crate::seed;

pub const OFFSETS: [i32; 5] = [-2, -1, 0, 1, 2];
pub const ROLLS_DEG: [i32; 7] = [-45, -30, -15, 0, 15, 30, 45];
pub const MANIFEST_FORMAT: &str = "airtrack-dataset-v1";
/// Offsets that leave the lumen are pushed back until this signed distance.
pub const CLAMP_DEPTH: f64 = 0.5;
/// Fraction of the usable path length covered by a trajectory.
const PATH_FILL: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariationSpec {
    /// Voxels along the world axes.
    pub offset: [i32; 3],
    /// Degrees about the look-at axis.
    pub roll: i32,
    pub is_central: bool,
}

impl VariationSpec {
    pub const CENTRAL: VariationSpec = VariationSpec {
        offset: [0, 0, 0],
        roll: 0,
        is_central: true,
    };

    pub fn roll_rad(&self) -> f64 {
        (self.roll as f64).to_radians()
    }

    pub fn offset_vector(&self) -> Vector3<f64> {
        Vector3::new(self.offset[0] as f64, self.offset[1] as f64, self.offset[2] as f64)
    }

    /// Grid adjacency: offsets differ by at most one voxel per axis and rolls by at most one step.
    pub fn is_adjacent(&self, other: &VariationSpec) -> bool {
        self.offset.iter().zip(&other.offset).all(|(a, b)| (a - b).abs() <= 1) && (self.roll - other.roll).abs() <= 15
    }
}

/// The 5^3 x 7 offset/roll grid followed by the central spec.
pub fn enumerate_variations() -> Vec<VariationSpec> {
    let mut out = Vec::with_capacity(OFFSETS.len().pow(3) * ROLLS_DEG.len() + 1);
    for &x in &OFFSETS {
        for &y in &OFFSETS {
            for &z in &OFFSETS {
                for &roll in &ROLLS_DEG {
                    out.push(VariationSpec {
                        offset: [x, y, z],
                        roll,
                        is_central: false,
                    });
                }
            }
        }
    }
    out.push(VariationSpec::CENTRAL);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleEntry {
    pub start: f64,
    pub end: f64,
    pub variation: VariationSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectorySpec {
    pub traj_id: String,
    pub patient_seed: u64,
    pub lobe: LobeLabel,
    pub path_seed: u64,
    pub variation_schedule: Vec<ScheduleEntry>,
    /// Arc-length increments between consecutive frames.
    pub velocity_profile: Vec<f64>,
}

impl TrajectorySpec {
    pub fn validate(&self, total_length: f64) -> Result<()> {
        let sched = &self.variation_schedule;
        if sched.is_empty() {
            return Err(Error::Precondition("empty variation schedule".into()));
        }
        if sched[0].start != 0.0 || (sched[sched.len() - 1].end - total_length).abs() > 1e-9 * total_length.max(1.0) {
            return Err(Error::Precondition(format!(
                "schedule covers [{}, {}], path length is {total_length}",
                sched[0].start,
                sched[sched.len() - 1].end
            )));
        }
        for w in sched.windows(2) {
            if w[0].end != w[1].start {
                return Err(Error::Precondition(format!(
                    "schedule gap or overlap at {} / {}",
                    w[0].end, w[1].start
                )));
            }
        }
        if sched.iter().any(|e| !(e.end > e.start)) {
            return Err(Error::Precondition("empty schedule interval".into()));
        }
        if let Some(bad) = self.velocity_profile.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
            return Err(Error::Precondition(format!("non-positive arc-length increment {bad}")));
        }
        Ok(())
    }

    /// Variation active at arc length `s`.
    pub fn variation_at(&self, s: f64) -> VariationSpec {
        self.variation_schedule
            .iter()
            .find(|e| s < e.end)
            .or(self.variation_schedule.last())
            .map(|e| e.variation)
            .unwrap_or(VariationSpec::CENTRAL)
    }

    /// Arc length of every frame.
    pub fn arc_lengths(&self) -> Vec<f64> {
        let mut s = vec![0.0];
        for v in &self.velocity_profile {
            s.push(s[s.len() - 1] + v);
        }
        s
    }
}

/// Splits `[0, total_length]` into a random number of intervals in
/// `intervals` and walks the variation list from `start` (or a uniform draw),
/// moving to a uniformly chosen grid neighbour at each boundary.
pub fn combine_variations(
    seed: u64,
    total_length: f64,
    variations: &[VariationSpec],
    intervals: [usize; 2],
    start: Option<usize>,
) -> Result<Vec<ScheduleEntry>> {
    if variations.is_empty() {
        return Err(Error::Precondition("no variations to combine".into()));
    }
    if !(total_length > 0.0) {
        return Err(Error::Precondition(format!("path length must be positive, got {total_length}")));
    }
    if intervals[0] == 0 || intervals[0] > intervals[1] {
        return Err(Error::Config(format!("bad interval count range {intervals:?}")));
    }
    let mut rng = seed::rng(seed);
    let k = rng.gen_range(intervals[0]..=intervals[1]);
    let mut cuts: Vec<f64> = (0..k - 1).map(|_| rng.gen_range(0.0..1.0) * total_length).collect();
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    cuts.retain(|&c| c > 0.0 && c < total_length);
    let mut bounds = vec![0.0];
    bounds.extend(cuts);
    bounds.push(total_length);

    let mut cur = match start {
        Some(i) if i < variations.len() => i,
        Some(i) => {
            return Err(Error::Precondition(format!(
                "start variation {i} out of range for {} variations",
                variations.len()
            )))
        }
        None => rng.gen_range(0..variations.len()),
    };
    let mut out = Vec::with_capacity(bounds.len() - 1);
    for w in bounds.windows(2) {
        if !out.is_empty() {
            let here = variations[cur];
            let nbrs: Vec<usize> = (0..variations.len())
                .filter(|&j| j != cur && here.is_adjacent(&variations[j]))
                .collect();
            if !nbrs.is_empty() {
                cur = nbrs[rng.gen_range(0..nbrs.len())];
            }
        }
        out.push(ScheduleEntry {
            start: w[0],
            end: w[1],
            variation: variations[cur],
        });
    }
    Ok(out)
}

/// Piecewise-constant speed profile: `frames - 1` positive increments summing
/// to a fixed fraction of `usable_length`, with each speed segment scaled by a
/// factor in `[1 - jitter, 1 + jitter]`.
pub fn velocity_profile(seed: u64, usable_length: f64, frames: usize, jitter: f64) -> Result<Vec<f64>> {
    if frames < 2 {
        return Err(Error::Config(format!("a trajectory needs at least 2 frames, got {frames}")));
    }
    if !(usable_length > 0.0) {
        return Err(Error::Precondition(format!(
            "path too short for the look-ahead distance (usable length {usable_length})"
        )));
    }
    if !(0.0..1.0).contains(&jitter) {
        return Err(Error::Config(format!("speed jitter must be in [0, 1), got {jitter}")));
    }
    let n = frames - 1;
    let mut rng = seed::rng(seed);
    let segments = rng.gen_range(3..=6).min(n);
    let mut cuts: Vec<usize> = (0..segments - 1).map(|_| rng.gen_range(1..n.max(2))).collect();
    cuts.sort_unstable();
    let mut speeds = Vec::with_capacity(n);
    let mut seg = 0;
    let mut factor = 1.0 + jitter * rng.gen_range(-1.0..=1.0);
    for i in 0..n {
        while seg < cuts.len() && i >= cuts[seg] {
            seg += 1;
            factor = 1.0 + jitter * rng.gen_range(-1.0..=1.0);
        }
        speeds.push(factor);
    }
    let total: f64 = speeds.iter().sum();
    let scale = PATH_FILL * usable_length / total;
    Ok(speeds.into_iter().map(|v| v * scale).collect())
}

/// One line of `poses.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameRecord {
    pub frame: usize,
    pub file: String,
    pub s: f64,
    pub pose: Pose,
    pub variation: VariationSpec,
    pub clamped: bool,
    /// Difference from the previous frame; absent on the first frame.
    pub delta: Option<DeltaPose>,
}

pub fn frame_file_name(index: usize) -> String {
    format!("{index:06}.ppm")
}

/// Camera poses along `path` following `spec`, without rendering.
pub fn trajectory_poses(
    tree: &AirwayTree,
    path: &NavigationPath,
    spec: &TrajectorySpec,
    delta_d: f64,
) -> Result<Vec<FrameRecord>> {
    spec.validate(path.total_length)?;
    let sdf = tree.sdf();
    let mut out: Vec<FrameRecord> = Vec::with_capacity(spec.velocity_profile.len() + 1);
    for (index, s) in spec.arc_lengths().into_iter().enumerate() {
        let variation = spec.variation_at(s);
        let centre = path.point_at(s)?.to_vector();
        let (offset, clamped) = clamp_offset(&sdf, &centre, variation.offset_vector())
            .map_err(|e| Error::Frame { index, source: Box::new(e) })?;
        if clamped {
            log::debug!("{}: frame {index} offset {:?} clamped into the lumen", spec.traj_id, variation.offset);
        }
        let (position, r) = camera_frame_offset(path, s, delta_d, variation.roll_rad(), &offset)?;
        let pose = Pose::new(position, rotation_to_euler(&r)?);
        let delta = out.last().map(|prev| delta_pose(&prev.pose, &pose));
        out.push(FrameRecord {
            frame: index,
            file: frame_file_name(index),
            s,
            pose,
            variation,
            clamped,
            delta,
        });
    }
    Ok(out)
}

/// Pushes `centre + offset` along the inward surface normal until it sits at
/// least [`CLAMP_DEPTH`] inside the wall. Returns the possibly shortened offset.
fn clamp_offset(sdf: &crate::airway::Sdf, centre: &Vector3<f64>, offset: Vector3<f64>) -> Result<(Vector3<f64>, bool)> {
    let mut p = centre + offset;
    let mut d = sdf.eval(&p);
    if d <= -CLAMP_DEPTH {
        return Ok((offset, false));
    }
    for _ in 0..32 {
        let n = sdf.gradient(&p, 1e-4);
        p -= n * (d + CLAMP_DEPTH + 1e-6);
        d = sdf.eval(&p);
        if d <= -CLAMP_DEPTH {
            return Ok((p - centre, true));
        }
    }
    Err(Error::OutsideLumen { distance: d })
}

/// Poses and rendered frames of one trajectory.
pub fn synthesize_trajectory(
    tree: &AirwayTree,
    path: &NavigationPath,
    spec: &TrajectorySpec,
    cam: &CameraIntrinsics,
    delta_d: f64,
) -> Result<(Vec<FrameRecord>, Vec<Frame>)> {
    let records = trajectory_poses(tree, path, spec, delta_d)?;
    let poses: Vec<Pose> = records.iter().map(|r| r.pose).collect();
    let frames = render_trajectory(tree, &poses, cam)?;
    Ok((records, frames))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum SplitScheme {
    Personalized { train_per_lobe: usize, val_per_lobe: usize },
    CrossSubject { holdout_patient: usize },
}

impl Default for SplitScheme {
    fn default() -> Self {
        SplitScheme::Personalized {
            train_per_lobe: 15,
            val_per_lobe: 3,
        }
    }
}

impl fmt::Display for SplitScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SplitScheme::Personalized {
                train_per_lobe,
                val_per_lobe,
            } => write!(f, "personalized:{train_per_lobe}/{val_per_lobe}"),
            SplitScheme::CrossSubject { holdout_patient } => write!(f, "cross-subject:{}", patient_name(*holdout_patient)),
        }
    }
}

/// Accepts `personalized`, `personalized:T/V` and `cross-subject:pN` (or a bare index).
impl FromStr for SplitScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown split scheme '{s}'"));
        if s == "personalized" {
            return Ok(SplitScheme::default());
        }
        if let Some(rest) = s.strip_prefix("personalized:") {
            let (t, v) = rest.split_once('/').ok_or_else(bad)?;
            return Ok(SplitScheme::Personalized {
                train_per_lobe: t.parse().map_err(|_| bad())?,
                val_per_lobe: v.parse().map_err(|_| bad())?,
            });
        }
        if let Some(rest) = s.strip_prefix("cross-subject:") {
            let idx = rest.strip_prefix('p').unwrap_or(rest);
            return Ok(SplitScheme::CrossSubject {
                holdout_patient: idx.parse().map_err(|_| bad())?,
            });
        }
        Err(bad())
    }
}

impl SplitScheme {
    pub fn is_personalized(&self) -> bool {
        matches!(self, SplitScheme::Personalized { .. })
    }

    /// Short label for reports.
    pub fn label(&self) -> &'static str {
        match self {
            SplitScheme::Personalized { .. } => "personalized",
            SplitScheme::CrossSubject { .. } => "cross-subject",
        }
    }
}

pub fn patient_name(index: usize) -> String {
    format!("p{index}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnatomyConfig {
    pub scale: f64,
    /// Inclusive range; each patient draws its depth uniformly from it.
    pub levels: [u32; 2],
    pub angle_jitter: f64,
    pub radius_taper: f64,
}

impl Default for AnatomyConfig {
    fn default() -> Self {
        Self {
            scale: 60.0,
            levels: [4, 6],
            angle_jitter: 0.15,
            radius_taper: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub seed: u64,
    pub patients: usize,
    pub lobes: Vec<LobeLabel>,
    pub trajectories_per_lobe: usize,
    pub frames_per_trajectory: usize,
    /// Look-ahead distance along the centerline, voxels.
    pub delta_d: f64,
    pub camera: CameraIntrinsics,
    pub anatomy: AnatomyConfig,
    /// Inclusive range of variation intervals per trajectory.
    pub schedule_intervals: [usize; 2],
    pub speed_jitter: f64,
    pub chunk_len: usize,
    /// Split used for the normalization statistics.
    pub split: SplitScheme,
    /// One trajectory per grid variation, each starting from its own spec.
    pub paper_scale: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            patients: 2,
            lobes: vec![LobeLabel::UpperRight],
            trajectories_per_lobe: 18,
            frames_per_trajectory: 61,
            delta_d: 4.0,
            camera: CameraIntrinsics::default(),
            anatomy: AnatomyConfig::default(),
            schedule_intervals: [4, 8],
            speed_jitter: 0.3,
            chunk_len: 10,
            split: SplitScheme::default(),
            paper_scale: false,
        }
    }
}

impl DatasetConfig {
    pub fn paper_scale() -> Self {
        Self {
            paper_scale: true,
            lobes: LobeLabel::ALL.to_vec(),
            ..Self::default()
        }
    }

    pub fn effective_trajectories_per_lobe(&self) -> usize {
        if self.paper_scale {
            enumerate_variations().len()
        } else {
            self.trajectories_per_lobe
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.camera.validate()?;
        if self.patients == 0 {
            return Err(Error::Config("dataset needs at least one patient".into()));
        }
        if self.lobes.is_empty() {
            return Err(Error::Config("dataset needs at least one lobe".into()));
        }
        let mut lobes = self.lobes.clone();
        lobes.sort_by_key(|l| l.name());
        lobes.dedup();
        if lobes.len() != self.lobes.len() {
            return Err(Error::Config("duplicate lobe in dataset config".into()));
        }
        if self.effective_trajectories_per_lobe() == 0 {
            return Err(Error::Config("trajectories_per_lobe must be positive".into()));
        }
        if self.frames_per_trajectory < 2 {
            return Err(Error::Config(format!(
                "frames_per_trajectory must be at least 2, got {}",
                self.frames_per_trajectory
            )));
        }
        if !(self.delta_d > 0.0 && self.delta_d.is_finite()) {
            return Err(Error::Config(format!("delta_d must be positive, got {}", self.delta_d)));
        }
        if self.anatomy.levels[0] > self.anatomy.levels[1] {
            return Err(Error::Config(format!("anatomy.levels {:?} is not a range", self.anatomy.levels)));
        }
        if self.schedule_intervals[0] == 0 || self.schedule_intervals[0] > self.schedule_intervals[1] {
            return Err(Error::Config(format!(
                "schedule_intervals {:?} is not a positive range",
                self.schedule_intervals
            )));
        }
        if !(0.0..1.0).contains(&self.speed_jitter) {
            return Err(Error::Config(format!("speed_jitter must be in [0, 1), got {}", self.speed_jitter)));
        }
        if self.chunk_len == 0 {
            return Err(Error::Config("chunk_len must be at least 1".into()));
        }
        for spec in self.patient_specs() {
            spec.validate()?;
        }
        Ok(())
    }

    pub fn patient_specs(&self) -> Vec<PatientSpec> {
        (0..self.patients)
            .map(|i| {
                let seed = seed::derive(self.seed, "patient", i as u64);
                let [lo, hi] = self.anatomy.levels;
                let levels = seed::rng(seed::derive(seed, "levels", 0)).gen_range(lo..=hi.max(lo));
                PatientSpec {
                    seed,
                    scale: self.anatomy.scale,
                    branching_levels: levels,
                    angle_jitter: self.anatomy.angle_jitter,
                    radius_taper: self.anatomy.radius_taper,
                }
            })
            .collect()
    }

    /// SHA-256 of the compact JSON form.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(crate::json::to_line(self)?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }
}

/// Where and how one trajectory is generated.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPlan {
    pub traj_id: String,
    pub patient: usize,
    pub lobe: LobeLabel,
    pub index: usize,
    pub path_seed: u64,
    pub schedule_seed: u64,
    pub velocity_seed: u64,
    pub start_variation: Option<usize>,
}

impl TrajectoryPlan {
    pub fn relative_dir(&self) -> PathBuf {
        PathBuf::from(patient_name(self.patient)).join(self.lobe.name()).join(&self.traj_id)
    }
}

pub fn trajectory_id(patient: usize, lobe: LobeLabel, index: usize) -> String {
    format!("{}-{}-t{index:03}", patient_name(patient), lobe.name())
}

pub fn plan_trajectories(cfg: &DatasetConfig) -> Vec<TrajectoryPlan> {
    let specs = cfg.patient_specs();
    let per_lobe = cfg.effective_trajectories_per_lobe();
    let mut out = Vec::with_capacity(specs.len() * cfg.lobes.len() * per_lobe);
    for (p, spec) in specs.iter().enumerate() {
        for &lobe in &cfg.lobes {
            let lobe_idx = LobeLabel::ALL.iter().position(|&l| l == lobe).unwrap_or(0) as u64;
            for index in 0..per_lobe {
                let key = lobe_idx * 1_000_000 + index as u64;
                out.push(TrajectoryPlan {
                    traj_id: trajectory_id(p, lobe, index),
                    patient: p,
                    lobe,
                    index,
                    path_seed: seed::derive(spec.seed, "path", key),
                    schedule_seed: seed::derive(spec.seed, "schedule", key),
                    velocity_seed: seed::derive(spec.seed, "velocity", key),
                    start_variation: cfg.paper_scale.then_some(index),
                });
            }
        }
    }
    out
}

/// Full trajectory spec for a plan on an already built path.
pub fn trajectory_spec(
    cfg: &DatasetConfig,
    plan: &TrajectoryPlan,
    patient_seed: u64,
    path: &NavigationPath,
    variations: &[VariationSpec],
) -> Result<TrajectorySpec> {
    let variation_schedule = combine_variations(
        plan.schedule_seed,
        path.total_length,
        variations,
        cfg.schedule_intervals,
        plan.start_variation,
    )?;
    let velocity_profile = velocity_profile(
        plan.velocity_seed,
        path.total_length - cfg.delta_d,
        cfg.frames_per_trajectory,
        cfg.speed_jitter,
    )?;
    Ok(TrajectorySpec {
        traj_id: plan.traj_id.clone(),
        patient_seed,
        lobe: plan.lobe,
        path_seed: plan.path_seed,
        variation_schedule,
        velocity_profile,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl ChannelStats {
    /// Population statistics of `pixel / 255` from exact per-channel sums.
    pub fn from_sums(sum: [u64; 3], sumsq: [u64; 3], count: u64) -> Result<Self> {
        if count == 0 {
            return Err(Error::Precondition("no pixels for normalization statistics".into()));
        }
        let mut mean = [0.0; 3];
        let mut std = [0.0; 3];
        for c in 0..3 {
            let n = count as f64;
            let m = sum[c] as f64 / n;
            // n * sumsq - sum^2 is exact in 128-bit integers
            let var_num = count as u128 * sumsq[c] as u128 - (sum[c] as u128) * (sum[c] as u128);
            mean[c] = m / 255.0;
            std[c] = ((var_num as f64) / (n * n)).sqrt() / 255.0;
        }
        Ok(Self { mean, std })
    }
}

/// Per-channel pixel sums of a set of frames.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PixelSums {
    pub sum: [u64; 3],
    pub sumsq: [u64; 3],
    pub count: u64,
}

impl PixelSums {
    pub fn add_frame(&mut self, f: &Frame) {
        for px in f.pixels.chunks_exact(3) {
            for c in 0..3 {
                let v = px[c] as u64;
                self.sum[c] += v;
                self.sumsq[c] += v * v;
            }
        }
        self.count += (f.width * f.height) as u64;
    }

    pub fn merge(&mut self, o: &PixelSums) {
        for c in 0..3 {
            self.sum[c] += o.sum[c];
            self.sumsq[c] += o.sumsq[c];
        }
        self.count += o.count;
    }

    pub fn stats(&self) -> Result<ChannelStats> {
        ChannelStats::from_sums(self.sum, self.sumsq, self.count)
    }
}

/// `(pixel / 255 - mean) / std` per channel, laid out channel-major `(3, H, W)`.
pub fn standardize_frame(frame: &Frame, stats: &ChannelStats) -> Result<Vec<f64>> {
    if let Some(c) = (0..3).find(|&c| !(stats.std[c] > 0.0)) {
        return Err(Error::Precondition(format!(
            "channel {c} has zero standard deviation (constant images)"
        )));
    }
    let hw = frame.width * frame.height;
    let mut out = vec![0.0; 3 * hw];
    for (i, px) in frame.pixels.chunks_exact(3).enumerate() {
        for c in 0..3 {
            out[c * hw + i] = (px[c] as f64 / 255.0 - stats.mean[c]) / stats.std[c];
        }
    }
    Ok(out)
}

/// Inverse of [`standardize_frame`], returning `pixel / 255` values.
pub fn unstandardize(values: &[f64], stats: &ChannelStats) -> Vec<f64> {
    let hw = values.len() / 3;
    values
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let c = (i / hw.max(1)).min(2);
            v * stats.std[c] + stats.mean[c]
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryEntry {
    pub traj_id: String,
    pub patient: usize,
    pub lobe: LobeLabel,
    pub index: usize,
    /// Relative to the dataset root.
    pub dir: PathBuf,
    pub frames: usize,
    pub path_length: f64,
    pub clamped_frames: usize,
    /// Pairs left over after chunking.
    pub dropped_pairs: usize,
    pub pixels: PixelSums,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitAssignment {
    pub scheme: SplitScheme,
    pub train: Vec<String>,
    pub val: Vec<String>,
    /// Trajectories beyond the per-group quota of a personalized split.
    pub unused: Vec<String>,
}

impl SplitAssignment {
    pub fn is_train(&self, traj_id: &str) -> bool {
        self.train.iter().any(|t| t == traj_id)
    }

    pub fn is_val(&self, traj_id: &str) -> bool {
        self.val.iter().any(|t| t == traj_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub config_hash: String,
    pub config: DatasetConfig,
    pub patients: Vec<PatientSpec>,
    pub lobes: Vec<LobeLabel>,
    pub trajectories: Vec<TrajectoryEntry>,
    pub total_frames: usize,
    pub stats: ChannelStats,
    pub split: SplitAssignment,
    pub chunk_len: usize,
}

impl DatasetManifest {
    pub fn read(root: &Path) -> Result<Self> {
        let path = root.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.clone(),
            msg: e.to_string(),
        })?;
        if m.format != MANIFEST_FORMAT {
            return Err(Error::Format {
                path,
                msg: format!("unsupported dataset format '{}'", m.format),
            });
        }
        Ok(m)
    }

    pub fn trajectory(&self, traj_id: &str) -> Option<&TrajectoryEntry> {
        self.trajectories.iter().find(|t| t.traj_id == traj_id)
    }

    /// Normalization statistics over the training trajectories of `split`.
    pub fn stats_for(&self, split: &SplitAssignment) -> Result<ChannelStats> {
        let mut sums = PixelSums::default();
        for t in self.trajectories.iter().filter(|t| split.is_train(&t.traj_id)) {
            sums.merge(&t.pixels);
        }
        sums.stats()
    }
}

/// Assigns trajectories to train and validation. Personalized splits take the
/// first `train_per_lobe` trajectories of every patient-lobe group for training
/// and the last `val_per_lobe` for validation.
pub fn make_splits(trajectories: &[TrajectoryEntry], patients: usize, scheme: SplitScheme) -> Result<SplitAssignment> {
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut unused = Vec::new();
    match scheme {
        SplitScheme::Personalized {
            train_per_lobe,
            val_per_lobe,
        } => {
            let mut groups: BTreeMap<(usize, &str), Vec<&TrajectoryEntry>> = BTreeMap::new();
            for t in trajectories {
                groups.entry((t.patient, t.lobe.name())).or_default().push(t);
            }
            for ((patient, lobe), mut group) in groups {
                group.sort_by_key(|t| t.index);
                let needed = train_per_lobe + val_per_lobe;
                if group.len() < needed {
                    return Err(Error::InsufficientTrajectories {
                        group: format!("{}/{lobe}", patient_name(patient)),
                        needed,
                        available: group.len(),
                    });
                }
                let n = group.len();
                for (i, t) in group.into_iter().enumerate() {
                    let id = t.traj_id.clone();
                    if i < train_per_lobe {
                        train.push(id);
                    } else if i >= n - val_per_lobe {
                        val.push(id);
                    } else {
                        unused.push(id);
                    }
                }
            }
        }
        SplitScheme::CrossSubject { holdout_patient } => {
            if holdout_patient >= patients {
                return Err(Error::Config(format!(
                    "holdout patient {} not in dataset of {patients} patients",
                    patient_name(holdout_patient)
                )));
            }
            for t in trajectories {
                if t.patient == holdout_patient {
                    val.push(t.traj_id.clone());
                } else {
                    train.push(t.traj_id.clone());
                }
            }
            if train.is_empty() {
                return Err(Error::InsufficientTrajectories {
                    group: "training patients".into(),
                    needed: 1,
                    available: 0,
                });
            }
        }
    }
    if val.is_empty() {
        return Err(Error::EmptyValidation);
    }
    Ok(SplitAssignment {
        scheme,
        train,
        val,
        unused,
    })
}

/// One cross-subject scheme per patient.
pub fn leave_one_out(patients: usize) -> Vec<SplitScheme> {
    (0..patients)
        .map(|holdout_patient| SplitScheme::CrossSubject { holdout_patient })
        .collect()
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn write_poses(path: &Path, records: &[FrameRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&crate::json::to_line(r)?);
        text.push('\n');
    }
    write_file(path, text.as_bytes())
}

pub fn read_poses(path: &Path) -> Result<Vec<FrameRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: format!("line {}: {e}", i + 1),
        })?);
    }
    Ok(out)
}

fn build_one(
    cfg: &DatasetConfig,
    root: &Path,
    plan: &TrajectoryPlan,
    patient: &PatientSpec,
    tree: &AirwayTree,
    variations: &[VariationSpec],
) -> Result<TrajectoryEntry> {
    let path = centerline_path(tree, plan.lobe, plan.path_seed)?;
    let spec = trajectory_spec(cfg, plan, patient.seed, &path, variations)?;
    let (records, frames) = synthesize_trajectory(tree, &path, &spec, &cfg.camera, cfg.delta_d)?;
    let dir = plan.relative_dir();
    let abs = root.join(&dir);
    std::fs::create_dir_all(&abs).map_err(|e| Error::io(&abs, e))?;
    let mut pixels = PixelSums::default();
    for (r, f) in records.iter().zip(&frames) {
        write_file(&abs.join(&r.file), &f.to_ppm())?;
        pixels.add_frame(f);
    }
    write_poses(&abs.join("poses.jsonl"), &records)?;
    let pairs = records.len() - 1;
    Ok(TrajectoryEntry {
        traj_id: plan.traj_id.clone(),
        patient: plan.patient,
        lobe: plan.lobe,
        index: plan.index,
        dir,
        frames: records.len(),
        path_length: path.total_length,
        clamped_frames: records.iter().filter(|r| r.clamped).count(),
        dropped_pairs: pairs % cfg.chunk_len,
        pixels,
    })
}

/// Generates every configured trajectory under `root` and writes the manifest.
/// Trajectories are rendered in parallel; the output does not depend on the
/// worker count.
pub fn build_dataset(cfg: &DatasetConfig, root: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    let patients = cfg.patient_specs();
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut trees = Vec::with_capacity(patients.len());
    for (i, spec) in patients.iter().enumerate() {
        let tree = generate_patient(spec)?;
        let dir = root.join(patient_name(i));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_file(&dir.join("airway.json"), tree.to_json()?.as_bytes())?;
        trees.push(tree);
    }
    let variations = enumerate_variations();
    let plans = plan_trajectories(cfg);
    log::info!("rendering {} trajectories into {}", plans.len(), root.display());
    let entries: Vec<Result<TrajectoryEntry>> = plans
        .par_iter()
        .map(|plan| {
            build_one(cfg, root, plan, &patients[plan.patient], &trees[plan.patient], &variations).map_err(|e| {
                Error::Trajectory {
                    traj_id: plan.traj_id.clone(),
                    source: Box::new(e),
                }
            })
        })
        .collect();
    let trajectories = entries.into_iter().collect::<Result<Vec<_>>>()?;
    let split = make_splits(&trajectories, patients.len(), cfg.split)?;
    let mut train_pixels = PixelSums::default();
    for t in trajectories.iter().filter(|t| split.is_train(&t.traj_id)) {
        train_pixels.merge(&t.pixels);
    }
    let manifest = DatasetManifest {
        format: MANIFEST_FORMAT.into(),
        config_hash: cfg.hash()?,
        config: cfg.clone(),
        patients,
        lobes: cfg.lobes.clone(),
        total_frames: trajectories.iter().map(|t| t.frames).sum(),
        trajectories,
        stats: train_pixels.stats()?,
        split,
        chunk_len: cfg.chunk_len,
    };
    write_file(&root.join("manifest.json"), crate::json::to_pretty(&manifest)?.as_bytes())?;
    Ok(manifest)
}

/// A consecutive frame pair with its ground-truth difference.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub traj_id: String,
    pub step_index: usize,
    pub frame_a: PathBuf,
    pub frame_b: PathBuf,
    pub pose_a: Pose,
    pub pose_b: Pose,
    pub delta: DeltaPose,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceChunk {
    pub records: Vec<SampleRecord>,
}

impl SequenceChunk {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn traj_id(&self) -> &str {
        &self.records[0].traj_id
    }

    /// Index of the first pair within its trajectory.
    pub fn start(&self) -> usize {
        self.records[0].step_index
    }
}

/// Non-overlapping runs of `len` consecutive records. Returns the chunks and
/// the number of trailing records dropped.
pub fn chunk_sequences(records: &[SampleRecord], len: usize) -> Result<(Vec<SequenceChunk>, usize)> {
    if len == 0 {
        return Err(Error::Precondition("chunk length must be at least 1".into()));
    }
    let chunks = records
        .chunks_exact(len)
        .map(|c| SequenceChunk { records: c.to_vec() })
        .collect();
    Ok((chunks, records.len() % len))
}

/// A trajectory loaded from disk.
#[derive(Debug, Clone)]
pub struct TrajectoryData {
    pub entry: TrajectoryEntry,
    pub records: Vec<FrameRecord>,
    pub frames: Vec<Frame>,
}

impl TrajectoryData {
    pub fn poses(&self) -> Vec<Pose> {
        self.records.iter().map(|r| r.pose).collect()
    }

    /// Stored deltas of pairs `0..frames-1`.
    pub fn deltas(&self) -> Vec<DeltaPose> {
        self.records.iter().skip(1).map(|r| r.delta.unwrap_or(DeltaPose::ZERO)).collect()
    }

    pub fn pairs(&self) -> usize {
        self.records.len().saturating_sub(1)
    }

    pub fn samples(&self, root: &Path) -> Vec<SampleRecord> {
        let dir = root.join(&self.entry.dir);
        self.records
            .windows(2)
            .enumerate()
            .map(|(k, w)| SampleRecord {
                traj_id: self.entry.traj_id.clone(),
                step_index: k,
                frame_a: dir.join(&w[0].file),
                frame_b: dir.join(&w[1].file),
                pose_a: w[0].pose,
                pose_b: w[1].pose,
                delta: w[1].delta.unwrap_or(DeltaPose::ZERO),
            })
            .collect()
    }
}

/// A dataset held in memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub trajectories: Vec<TrajectoryData>,
}

impl Dataset {
    /// Loads the manifest, pose files and frames, checking that the files on
    /// disk agree with the manifest.
    pub fn open(root: &Path) -> Result<Self> {
        let manifest = DatasetManifest::read(root)?;
        let loaded: Vec<Result<TrajectoryData>> = manifest
            .trajectories
            .par_iter()
            .map(|entry| load_trajectory(root, entry, &manifest.config.camera))
            .collect();
        let trajectories = loaded.into_iter().collect::<Result<Vec<_>>>()?;
        let total: usize = trajectories.iter().map(|t| t.frames.len()).sum();
        if total != manifest.total_frames {
            return Err(Error::Format {
                path: root.join("manifest.json"),
                msg: format!("manifest lists {} frames, found {total}", manifest.total_frames),
            });
        }
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
            trajectories,
        })
    }

    pub fn index_of(&self, traj_id: &str) -> Option<usize> {
        self.trajectories.iter().position(|t| t.entry.traj_id == traj_id)
    }

    pub fn split(&self, scheme: SplitScheme) -> Result<SplitAssignment> {
        if scheme == self.manifest.split.scheme {
            return Ok(self.manifest.split.clone());
        }
        let entries: Vec<TrajectoryEntry> = self.trajectories.iter().map(|t| t.entry.clone()).collect();
        make_splits(&entries, self.manifest.patients.len(), scheme)
    }
}

fn load_trajectory(root: &Path, entry: &TrajectoryEntry, cam: &CameraIntrinsics) -> Result<TrajectoryData> {
    let wrap = |e: Error| Error::Trajectory {
        traj_id: entry.traj_id.clone(),
        source: Box::new(e),
    };
    let dir = root.join(&entry.dir);
    let poses_path = dir.join("poses.jsonl");
    let records = read_poses(&poses_path).map_err(wrap)?;
    if records.len() != entry.frames {
        return Err(wrap(Error::Format {
            path: poses_path,
            msg: format!("{} pose records, manifest lists {} frames", records.len(), entry.frames),
        }));
    }
    let mut frames = Vec::with_capacity(records.len());
    for (k, r) in records.iter().enumerate() {
        if k > 0 {
            let expect = delta_pose(&records[k - 1].pose, &r.pose);
            if r.delta != Some(expect) {
                return Err(wrap(Error::Format {
                    path: poses_path.clone(),
                    msg: format!("frame {k}: stored delta does not match the stored poses"),
                }));
            }
        }
        let f = Frame::read_ppm(&dir.join(&r.file)).map_err(wrap)?;
        if f.width != cam.width || f.height != cam.height {
            return Err(wrap(Error::Format {
                path: dir.join(&r.file),
                msg: format!("frame is {}x{}, dataset is {}x{}", f.width, f.height, cam.width, cam.height),
            }));
        }
        frames.push(f);
    }
    Ok(TrajectoryData {
        entry: entry.clone(),
        records,
        frames,
    })
}
