//! Sphere-traced grayscale frames from inside the airway lumen.

use std::io::Write;
use std::path::Path;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::airway::AirwayTree;
use crate::error::{Error, Result};
use crate::pose::{euler_to_rotation, Pose};

type V3 = Vector3<f64>;

const MAX_STEPS: usize = 128;
/// Hit tolerance relative to the tree scale.
const HIT_EPS: f64 = 1e-3;
/// Rays are abandoned beyond this many tree scales.
const MAX_DIST: f64 = 2.5;
const LIGHT_GAIN: f64 = 1.6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraIntrinsics {
    pub width: usize,
    pub height: usize,
    /// Radians.
    pub vertical_fov: f64,
    pub near_clip: f64,
}

impl Default for CameraIntrinsics {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            vertical_fov: 1.4,
            near_clip: 0.05,
        }
    }
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<()> {
        if self.width < 8 || self.height < 8 {
            return Err(Error::Config(format!(
                "frame size {}x{} below the 8x8 minimum",
                self.width, self.height
            )));
        }
        if !(self.vertical_fov > 0.0 && self.vertical_fov < std::f64::consts::PI) {
            return Err(Error::Config(format!("vertical_fov {} outside (0, pi)", self.vertical_fov)));
        }
        if !(self.near_clip >= 0.0 && self.near_clip.is_finite()) {
            return Err(Error::Config(format!("near_clip {} must be non-negative", self.near_clip)));
        }
        Ok(())
    }
}

/// 8-bit RGB image, row-major, channels interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Frame {
    pub fn from_gray(width: usize, height: usize, gray: &[u8]) -> Self {
        Self {
            width,
            height,
            pixels: gray.iter().flat_map(|&g| [g, g, g]).collect(),
        }
    }

    /// First channel at column `x`, row `y`.
    pub fn gray(&self, x: usize, y: usize) -> u8 {
        self.pixels[(y * self.width + x) * 3]
    }

    pub fn gray_values(&self) -> Vec<u8> {
        self.pixels.iter().step_by(3).copied().collect()
    }

    pub fn is_constant(&self) -> bool {
        self.pixels.iter().all(|&p| p == self.pixels[0])
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut pos = 0;
        let mut token = || -> std::result::Result<String, String> {
            loop {
                while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                }
                if pos < bytes.len() && bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                    continue;
                }
                break;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err("truncated header".into());
            }
            Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
        };
        if token()? != "P6" {
            return Err("not a binary PPM (P6)".into());
        }
        let num = |s: String| s.parse::<usize>().map_err(|e| format!("bad header field '{s}': {e}"));
        let width = num(token()?)?;
        let height = num(token()?)?;
        if num(token()?)? != 255 {
            return Err("only maxval 255 is supported".into());
        }
        // exactly one whitespace byte separates the header from the raster
        let data = &bytes[pos + 1..];
        let need = width * height * 3;
        if data.len() != need {
            return Err(format!("raster holds {} bytes, expected {need}", data.len()));
        }
        Ok(Self {
            width,
            height,
            pixels: data.to_vec(),
        })
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_ppm()).map_err(|e| Error::io(path, e))
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_ppm(&bytes).map_err(|msg| Error::Format {
            path: path.to_path_buf(),
            msg,
        })
    }
}

/// Per-pixel ray directions in world space for a camera with rotation `r`.
fn ray_dirs(r: &nalgebra::Matrix3<f64>, cam: &CameraIntrinsics) -> Vec<V3> {
    let look = r.column(0).into_owned();
    let up = r.column(2).into_owned();
    let right = look.cross(&up);
    let th = (cam.vertical_fov * 0.5).tan();
    let aspect = cam.width as f64 / cam.height as f64;
    let mut dirs = Vec::with_capacity(cam.width * cam.height);
    for j in 0..cam.height {
        let y = (1.0 - 2.0 * (j as f64 + 0.5) / cam.height as f64) * th;
        for i in 0..cam.width {
            let x = (2.0 * (i as f64 + 0.5) / cam.width as f64 - 1.0) * th * aspect;
            dirs.push((look + right * x + up * y).normalize());
        }
    }
    dirs
}

/// Renders `pose` and also returns the hit distance per pixel (infinite on a miss).
pub fn render_with_depth(tree: &AirwayTree, pose: &Pose, cam: &CameraIntrinsics) -> Result<(Frame, Vec<f64>)> {
    cam.validate()?;
    let origin = pose.position.to_vector();
    let max_dist = MAX_DIST * tree.scale;
    let sdf = tree.sdf_near(&pose.position, max_dist);
    let d0 = sdf.eval(&origin);
    if !(d0 < 0.0) {
        return Err(Error::OutsideLumen { distance: d0 });
    }
    let eps = HIT_EPS * tree.scale;
    let light_ref = tree.branches.first().map_or(1.0, |b| b.start_radius);
    let r = euler_to_rotation(pose.orientation).into_inner();
    let mut gray = Vec::with_capacity(cam.width * cam.height);
    let mut depth = Vec::with_capacity(cam.width * cam.height);
    for d in ray_dirs(&r, cam) {
        let mut t = cam.near_clip;
        let mut hit = None;
        for _ in 0..MAX_STEPS {
            let p = origin + d * t;
            let dist = sdf.eval(&p);
            if dist > -eps {
                hit = Some(p);
                break;
            }
            t -= dist;
            if t > max_dist {
                break;
            }
        }
        match hit {
            Some(p) => {
                // the gradient points into the wall, so a front-facing hit has n.d > 0
                let n = sdf.gradient(&p, 0.5 * eps);
                let lambert = n.dot(&d).max(0.0);
                let v = LIGHT_GAIN * lambert * (light_ref / t.max(light_ref * 1e-3)).powi(2);
                gray.push((255.0 * v / (1.0 + v)).round().clamp(0.0, 255.0) as u8);
                depth.push(t);
            }
            None => {
                gray.push(0);
                depth.push(f64::INFINITY);
            }
        }
    }
    Ok((Frame::from_gray(cam.width, cam.height, &gray), depth))
}

pub fn render(tree: &AirwayTree, pose: &Pose, cam: &CameraIntrinsics) -> Result<Frame> {
    render_with_depth(tree, pose, cam).map(|(f, _)| f)
}

/// Renders every pose; frames are independent, so the output does not depend
/// on the worker count. The first failing frame (by index) is reported.
pub fn render_trajectory(tree: &AirwayTree, poses: &[Pose], cam: &CameraIntrinsics) -> Result<Vec<Frame>> {
    let results: Vec<Result<Frame>> = poses.par_iter().map(|p| render(tree, p, cam)).collect();
    results
        .into_iter()
        .enumerate()
        .map(|(index, r)| {
            r.map_err(|e| Error::Frame {
                index,
                source: Box::new(e),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose::{EulerAngles, Position};

    fn tube() -> AirwayTree {
        AirwayTree::straight_tube(80.0, 6.0)
    }

    fn on_axis() -> Pose {
        Pose::new(Position::new(10.0, 0.0, 0.0), EulerAngles::default())
    }

    #[test]
    fn deterministic() {
        let cam = CameraIntrinsics::default();
        let a = render(&tube(), &on_axis(), &cam).unwrap();
        let b = render(&tube(), &on_axis(), &cam).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.pixels.len(), 64 * 64 * 3);
    }

    #[test]
    fn outside_lumen_rejected() {
        let pose = Pose::new(Position::new(10.0, 0.0, 9.0), EulerAngles::default());
        let err = render(&tube(), &pose, &CameraIntrinsics::default()).unwrap_err();
        assert!(matches!(err, Error::OutsideLumen { .. }));
    }

    #[test]
    fn intrinsics_validated() {
        let cam = CameraIntrinsics {
            width: 4,
            ..CameraIntrinsics::default()
        };
        assert!(render(&tube(), &on_axis(), &cam).is_err());
    }

    #[test]
    fn ppm_round_trip() {
        let f = Frame::from_gray(3, 2, &[0, 10, 20, 255, 128, 7]);
        let bytes = f.to_ppm();
        assert!(bytes.starts_with(b"P6\n3 2\n255\n"));
        assert_eq!(Frame::from_ppm(&bytes).unwrap(), f);
        let commented = b"P6\n# made by hand\n3 2\n255\n".iter().chain(&f.pixels).copied().collect::<Vec<_>>();
        assert_eq!(Frame::from_ppm(&commented).unwrap(), f);
        assert!(Frame::from_ppm(b"P3\n1 1\n255\n0 0 0").is_err());
        assert!(Frame::from_ppm(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn trajectory_errors_name_the_frame() {
        let cam = CameraIntrinsics::default();
        assert!(render_trajectory(&tube(), &[], &cam).unwrap().is_empty());
        let single = render_trajectory(&tube(), &[on_axis()], &cam).unwrap();
        assert_eq!(single[0], render(&tube(), &on_axis(), &cam).unwrap());
        let bad = Pose::new(Position::new(10.0, 0.0, 9.0), EulerAngles::default());
        let err = render_trajectory(&tube(), &[on_axis(), bad, bad], &cam).unwrap_err();
        assert!(matches!(err, Error::Frame { index: 1, .. }));
    }
}
