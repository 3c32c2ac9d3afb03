//! Relative camera pose estimation along synthetic airway trees.

pub mod airway;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod grid;
pub mod json;
pub mod metrics;
pub mod net;
pub mod pose;
pub mod render;
pub mod seed;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use metrics::{LossCombo, MetricKind};
pub use pose::{DeltaPose, EulerAngles, Pose, Position, RotationMatrix};
