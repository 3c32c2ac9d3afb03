//! Position and rotation error functions, used as evaluation metrics and, in
//! their differentiable form (see `train::loss`), as training losses.

use std::fmt;
use std::str::FromStr;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pose::{direction_vector, look_axis, DeltaPose, EulerAngles};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MetricKind {
    PositionL2,
    PositionMSE,
    RotationL2,
    RotationMSE,
    DirectionError,
    CosinusError,
}

/// Training loss: position MSE plus one orientation term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossCombo {
    #[serde(rename = "mse-mse")]
    MseMse,
    #[serde(rename = "mse-de")]
    MseDe,
    #[serde(rename = "mse-ce")]
    MseCe,
}

impl LossCombo {
    pub const ALL: [LossCombo; 3] = [LossCombo::MseMse, LossCombo::MseDe, LossCombo::MseCe];

    pub fn position(self) -> MetricKind {
        MetricKind::PositionMSE
    }

    pub fn orientation(self) -> MetricKind {
        match self {
            LossCombo::MseMse => MetricKind::RotationMSE,
            LossCombo::MseDe => MetricKind::DirectionError,
            LossCombo::MseCe => MetricKind::CosinusError,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LossCombo::MseMse => "mse-mse",
            LossCombo::MseDe => "mse-de",
            LossCombo::MseCe => "mse-ce",
        }
    }
}

impl fmt::Display for LossCombo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossCombo {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossCombo::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown loss combo '{s}' (expected mse-mse|mse-de|mse-ce)")))
    }
}

fn l2_or_mse(est: &[f64; 3], gt: &[f64; 3], mse: bool) -> f64 {
    let sq: f64 = est.iter().zip(gt).map(|(a, b)| (a - b) * (a - b)).sum();
    if mse {
        sq / 3.0
    } else {
        sq.sqrt()
    }
}

pub fn position_error(est: &[f64; 3], gt: &[f64; 3], kind: MetricKind) -> Result<f64> {
    match kind {
        MetricKind::PositionL2 => Ok(l2_or_mse(est, gt, false)),
        MetricKind::PositionMSE => Ok(l2_or_mse(est, gt, true)),
        other => Err(Error::Precondition(format!("{other:?} is not a position metric"))),
    }
}

/// L2 or MSE over raw Euler angle differences. No wrapping is applied, so a
/// difference of `2*pi` counts in full.
pub fn rotation_error_l2(est: &[f64; 3], gt: &[f64; 3], kind: MetricKind) -> Result<f64> {
    match kind {
        MetricKind::RotationL2 => Ok(l2_or_mse(est, gt, false)),
        MetricKind::RotationMSE => Ok(l2_or_mse(est, gt, true)),
        other => Err(Error::Precondition(format!("{other:?} is not an L2/MSE rotation metric"))),
    }
}

/// Angle between the directions `R(est)*u` and `R(gt)*u`, in `[0, pi]`.
/// Computed as `atan2(|ve x vg|, ve . vg)`, which keeps full precision near 0 and pi.
pub fn direction_error(est: &[f64; 3], gt: &[f64; 3], u: &Vector3<f64>) -> Result<f64> {
    let ve = direction_vector(EulerAngles::from_array(*est), u)?;
    let vg = direction_vector(EulerAngles::from_array(*gt), u)?;
    Ok(ve.cross(&vg).norm().atan2(ve.dot(&vg)))
}

/// [`direction_error`] with the camera look-at axis `u = (1, 0, 0)`.
pub fn direction_error_default(est: &[f64; 3], gt: &[f64; 3]) -> f64 {
    direction_error(est, gt, &look_axis()).expect("look axis is unit")
}

/// Mean of `1 - cos(est_i - gt_i)` over the three angles, in `[0, 2]`.
pub fn cosinus_error(est: &[f64; 3], gt: &[f64; 3]) -> f64 {
    est.iter()
        .zip(gt)
        .map(|(a, b)| 1.0 - (a - b).cos())
        .sum::<f64>()
        / 3.0
}

pub fn orientation_loss(kind: MetricKind, est: &[f64; 3], gt: &[f64; 3]) -> Result<f64> {
    match kind {
        MetricKind::RotationL2 | MetricKind::RotationMSE => rotation_error_l2(est, gt, kind),
        MetricKind::DirectionError => Ok(direction_error_default(est, gt)),
        MetricKind::CosinusError => Ok(cosinus_error(est, gt)),
        other => Err(Error::Precondition(format!("{other:?} is not an orientation metric"))),
    }
}

/// Unweighted sum of the position MSE and the configured orientation term.
pub fn combined_loss(combo: LossCombo, pred: &DeltaPose, gt: &DeltaPose) -> f64 {
    let p = l2_or_mse(&pred.dp, &gt.dp, true);
    let o = orientation_loss(combo.orientation(), &pred.d_o, &gt.d_o)
        .expect("loss combos only hold orientation metrics");
    p + o
}
