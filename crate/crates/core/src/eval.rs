//! Per-pair and accumulated evaluation of pose-difference predictors.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{ChannelStats, Dataset, TrajectoryData};
use crate::error::{Error, Result};
use crate::metrics::{cosinus_error, direction_error_default, position_error, rotation_error_l2, MetricKind};
use crate::net::{PairBatch, PoseNet, OUTPUTS};
use crate::pose::{accumulate, wrap_angle, DeltaPose, Pose};
use crate::tensor::{ParamStore, Tape};
use crate::train::{Prepared, Trained};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    PerPair,
    Accumulated,
}

impl EvalMode {
    pub const ALL: [EvalMode; 2] = [EvalMode::PerPair, EvalMode::Accumulated];

    pub fn name(self) -> &'static str {
        match self {
            EvalMode::PerPair => "per-pair",
            EvalMode::Accumulated => "accumulated",
        }
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EvalMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown eval mode '{s}' (per-pair|accumulated)")))
    }
}

/// Predicts the pose difference of every consecutive frame pair of a trajectory.
pub trait DeltaPredictor: Sync {
    fn name(&self) -> String;
    fn predict(&self, traj: &TrajectoryData) -> Result<Vec<DeltaPose>>;
}

/// Always predicts no motion.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroPredictor;

impl DeltaPredictor for ZeroPredictor {
    fn name(&self) -> String {
        "zero".into()
    }

    fn predict(&self, traj: &TrajectoryData) -> Result<Vec<DeltaPose>> {
        Ok(vec![DeltaPose::ZERO; traj.pairs()])
    }
}

/// Returns the stored ground-truth differences.
#[derive(Debug, Clone, Copy, Default)]
pub struct OraclePredictor;

impl DeltaPredictor for OraclePredictor {
    fn name(&self) -> String {
        "oracle".into()
    }

    fn predict(&self, traj: &TrajectoryData) -> Result<Vec<DeltaPose>> {
        Ok(traj.deltas())
    }
}

/// A trained network run over consecutive windows of `window` pairs, with
/// recurrent state reset at every window as in training.
#[derive(Debug, Clone)]
pub struct ModelPredictor {
    pub net: PoseNet,
    pub store: ParamStore<f32>,
    pub stats: ChannelStats,
    pub window: usize,
}

impl ModelPredictor {
    pub fn new(net: PoseNet, store: ParamStore<f32>, stats: ChannelStats, window: usize) -> Result<Self> {
        if window == 0 {
            return Err(Error::Config("evaluation window must be at least 1".into()));
        }
        Ok(Self {
            net,
            store,
            stats,
            window,
        })
    }

    pub fn from_trained(t: &Trained) -> Result<Self> {
        Self::new(t.net.clone(), t.store.clone(), t.record.stats, t.record.train_config.chunk_len)
    }
}

impl DeltaPredictor for ModelPredictor {
    fn name(&self) -> String {
        self.net.config.head.name().into()
    }

    fn predict(&self, traj: &TrajectoryData) -> Result<Vec<DeltaPose>> {
        let prep = Prepared::new(traj, &self.stats)?;
        let cfg = &self.net.config;
        let mut store = self.store.clone();
        let mut out = Vec::with_capacity(prep.pairs());
        let mut start = 0;
        while start < prep.pairs() {
            let len = self.window.min(prep.pairs() - start);
            let seq: Vec<&[f32]> = (start..=start + len).map(|i| prep.frames[i].as_slice()).collect();
            let batch = PairBatch::sequences(&[seq], cfg.input_channels, cfg.input_size[0], cfg.input_size[1])?;
            let mut tape = Tape::<f32>::new(false);
            let y = self.net.forward(&mut tape, &mut store, &batch, 0)?;
            let vals = tape.value(y).data();
            for k in 0..len {
                let row: Vec<f64> = vals[k * OUTPUTS..(k + 1) * OUTPUTS].iter().map(|&v| v as f64).collect();
                out.push(DeltaPose::from_slice(&row));
            }
            start += len;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    /// Mean and population standard deviation.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

/// Errors of one compared pair (a step difference or a final pose).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleErrors {
    pub pos_l2: f64,
    pub rot_l2: f64,
    pub rot_l2_wrapped: f64,
    pub de: f64,
    pub ce: f64,
}

impl SampleErrors {
    pub fn between(est_p: &[f64; 3], est_o: &[f64; 3], gt_p: &[f64; 3], gt_o: &[f64; 3]) -> Self {
        let wrapped: [f64; 3] = std::array::from_fn(|k| wrap_angle(est_o[k] - gt_o[k]));
        Self {
            pos_l2: position_error(est_p, gt_p, MetricKind::PositionL2).expect("position metric"),
            rot_l2: rotation_error_l2(est_o, gt_o, MetricKind::RotationL2).expect("rotation metric"),
            rot_l2_wrapped: wrapped.iter().map(|d| d * d).sum::<f64>().sqrt(),
            de: direction_error_default(est_o, gt_o),
            ce: cosinus_error(est_o, gt_o),
        }
    }

    pub fn of_deltas(est: &DeltaPose, gt: &DeltaPose) -> Self {
        Self::between(&est.dp, &est.d_o, &gt.dp, &gt.d_o)
    }

    pub fn of_poses(est: &Pose, gt: &Pose) -> Self {
        Self::between(
            &est.position.to_array(),
            &est.orientation.to_array(),
            &gt.position.to_array(),
            &gt.orientation.to_array(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scheme: String,
    pub mode: EvalMode,
    pub head: String,
    pub loss: String,
    pub pos_l2: Summary,
    pub rot_l2: Summary,
    /// Rotation L2 over wrapped angle differences, for diagnosis only.
    pub rot_l2_wrapped: Summary,
    pub de: Summary,
    pub ce: Summary,
    pub n: usize,
}

impl EvalReport {
    pub fn from_samples(samples: &[SampleErrors], mode: EvalMode) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyValidation);
        }
        let col = |f: fn(&SampleErrors) -> f64| Summary::of(&samples.iter().map(f).collect::<Vec<_>>());
        Ok(Self {
            scheme: String::new(),
            mode,
            head: String::new(),
            loss: String::new(),
            pos_l2: col(|s| s.pos_l2),
            rot_l2: col(|s| s.rot_l2),
            rot_l2_wrapped: col(|s| s.rot_l2_wrapped),
            de: col(|s| s.de),
            ce: col(|s| s.ce),
            n: samples.len(),
        })
    }

    pub fn labelled(mut self, scheme: &str, head: &str, loss: &str) -> Self {
        self.scheme = scheme.into();
        self.head = head.into();
        self.loss = loss.into();
        self
    }
}

/// Errors per sample: one per pair, or one per trajectory in accumulated mode.
pub fn sample_errors(
    predictor: &dyn DeltaPredictor,
    trajectories: &[&TrajectoryData],
    mode: EvalMode,
) -> Result<Vec<SampleErrors>> {
    let per_traj: Vec<Result<Vec<SampleErrors>>> = trajectories
        .par_iter()
        .map(|t| {
            let pred = predictor.predict(t)?;
            let gt = t.deltas();
            if pred.len() != gt.len() {
                return Err(Error::Shape(format!(
                    "{}: {} predictions for {} pairs",
                    t.entry.traj_id,
                    pred.len(),
                    gt.len()
                )));
            }
            Ok(match mode {
                EvalMode::PerPair => pred.iter().zip(&gt).map(|(p, g)| SampleErrors::of_deltas(p, g)).collect(),
                EvalMode::Accumulated => {
                    let first = t.records[0].pose;
                    let last = t.records[t.records.len() - 1].pose;
                    vec![SampleErrors::of_poses(&accumulate(&first, &pred), &last)]
                }
            })
        })
        .collect();
    let mut out = Vec::new();
    for (t, r) in trajectories.iter().zip(per_traj) {
        out.extend(r.map_err(|e| Error::Trajectory {
            traj_id: t.entry.traj_id.clone(),
            source: Box::new(e),
        })?);
    }
    Ok(out)
}

pub fn evaluate(predictor: &dyn DeltaPredictor, trajectories: &[&TrajectoryData], mode: EvalMode) -> Result<EvalReport> {
    if trajectories.iter().all(|t| t.pairs() == 0) {
        return Err(Error::EmptyValidation);
    }
    EvalReport::from_samples(&sample_errors(predictor, trajectories, mode)?, mode)
}

pub fn evaluate_per_pair(predictor: &dyn DeltaPredictor, trajectories: &[&TrajectoryData]) -> Result<EvalReport> {
    evaluate(predictor, trajectories, EvalMode::PerPair)
}

pub fn evaluate_accumulated(predictor: &dyn DeltaPredictor, trajectories: &[&TrajectoryData]) -> Result<EvalReport> {
    evaluate(predictor, trajectories, EvalMode::Accumulated)
}

/// Trajectories of a dataset by id, in the given order.
pub fn select<'a>(dataset: &'a Dataset, ids: &[String]) -> Result<Vec<&'a TrajectoryData>> {
    ids.iter()
        .map(|id| {
            dataset
                .index_of(id)
                .map(|i| &dataset.trajectories[i])
                .ok_or_else(|| Error::Config(format!("unknown trajectory {id}")))
        })
        .collect()
}

/// The zero-motion predictor on the validation trajectories of the manifest split.
pub fn zero_baseline_eval(dataset: &Dataset, mode: EvalMode) -> Result<EvalReport> {
    let val = select(dataset, &dataset.manifest.split.val)?;
    Ok(evaluate(&ZeroPredictor, &val, mode)?.labelled(&dataset.manifest.split.scheme.to_string(), "zero", "-"))
}

/// Predicted and true positions along a trajectory, accumulated from the first pose.
pub fn trajectory_trace_csv(predictor: &dyn DeltaPredictor, traj: &TrajectoryData) -> Result<String> {
    let pred = predictor.predict(traj)?;
    let mut est = traj.records[0].pose;
    let mut out = String::from("frame,gt_x,gt_y,gt_z,est_x,est_y,est_z\n");
    for (k, r) in traj.records.iter().enumerate() {
        if k > 0 {
            est = accumulate(&est, std::slice::from_ref(&pred[k - 1]));
        }
        let g = r.pose.position;
        let e = est.position;
        out.push_str(&format!("{k},{},{},{},{},{},{}\n", g.x, g.y, g.z, e.x, e.y, e.z));
    }
    Ok(out)
}
