//! Procedural airway trees built from rounded cones, and arc-length
//! parameterized centerlines through them.

use std::fmt;
use std::str::FromStr;

use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pose::{rot_axis, rotation_to_euler, Pose, Position, RotationMatrix};

type V3 = Vector3<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LobeLabel {
    UpperRight,
    LowerRight,
    UpperLeft,
    LowerLeft,
}

impl LobeLabel {
    pub const ALL: [LobeLabel; 4] = [
        LobeLabel::UpperRight,
        LobeLabel::LowerRight,
        LobeLabel::UpperLeft,
        LobeLabel::LowerLeft,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LobeLabel::UpperRight => "upper-right",
            LobeLabel::LowerRight => "lower-right",
            LobeLabel::UpperLeft => "upper-left",
            LobeLabel::LowerLeft => "lower-left",
        }
    }

    pub fn is_right(self) -> bool {
        matches!(self, LobeLabel::UpperRight | LobeLabel::LowerRight)
    }

    pub fn is_upper(self) -> bool {
        matches!(self, LobeLabel::UpperRight | LobeLabel::UpperLeft)
    }
}

impl fmt::Display for LobeLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LobeLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LobeLabel::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown lobe '{s}'")))
    }
}

/// Parameters of one synthetic patient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatientSpec {
    pub seed: u64,
    /// Trachea length in voxels; all other dimensions scale with it.
    pub scale: f64,
    pub branching_levels: u32,
    /// Maximum random perturbation of branching angles, radians.
    pub angle_jitter: f64,
    /// Radius ratio between consecutive generations.
    pub radius_taper: f64,
}

impl PatientSpec {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            scale: 60.0,
            branching_levels: 4,
            angle_jitter: 0.15,
            radius_taper: 0.8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::Config(format!("patient scale must be positive, got {}", self.scale)));
        }
        if !(4..=6).contains(&self.branching_levels) {
            return Err(Error::Config(format!(
                "branching_levels must be in [4, 6], got {}",
                self.branching_levels
            )));
        }
        if !(self.radius_taper > 0.0 && self.radius_taper < 1.0) {
            return Err(Error::Config(format!("radius_taper must be in (0, 1), got {}", self.radius_taper)));
        }
        if !(self.angle_jitter.is_finite() && (0.0..0.5).contains(&self.angle_jitter)) {
            return Err(Error::Config(format!("angle_jitter must be in [0, 0.5), got {}", self.angle_jitter)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Branch {
    pub id: usize,
    pub parent_id: Option<usize>,
    pub start: Position,
    pub end: Position,
    pub start_radius: f64,
    pub end_radius: f64,
    pub level: u32,
    /// Set from the lobar generation (level 2) downwards.
    pub lobe: Option<LobeLabel>,
}

impl Branch {
    pub fn length(&self) -> f64 {
        self.start.distance(&self.end)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AirwayTree {
    pub scale: f64,
    pub branches: Vec<Branch>,
}

const LOBAR_LEVEL: u32 = 2;
const LENGTH_DECAY: f64 = 0.75;
const MAIN_ANGLE: f64 = 0.61; // ~35 deg
const LOBAR_ANGLE: f64 = 0.52; // ~30 deg
const DISTAL_ANGLE: f64 = 0.49; // ~28 deg

struct Grow {
    dir: V3,
    /// Normal of the plane the branch was split in.
    plane: V3,
}

fn any_perpendicular(v: &V3) -> V3 {
    let trial = if v.z.abs() < 0.9 { V3::z() } else { V3::y() };
    (trial - v * v.dot(&trial)).normalize()
}

/// Generates a patient airway: a trachea along +x from the origin, two main
/// bronchi split left/right, four lobar bronchi split upper/lower, then
/// recursive bifurcations with seeded jitter down to `branching_levels`.
pub fn generate_patient(spec: &PatientSpec) -> Result<AirwayTree> {
    spec.validate()?;
    let mut rng = crate::seed::rng(crate::seed::derive(spec.seed, "airway", 0));
    let r0 = spec.scale / 6.0;
    let radius = |level: u32| r0 * spec.radius_taper.powi(level as i32);
    let jitter = |rng: &mut rand_chacha::ChaCha8Rng| {
        if spec.angle_jitter > 0.0 {
            rng.gen_range(-spec.angle_jitter..spec.angle_jitter)
        } else {
            0.0
        }
    };

    let mut branches = vec![Branch {
        id: 0,
        parent_id: None,
        start: Position::new(0.0, 0.0, 0.0),
        end: Position::new(spec.scale, 0.0, 0.0),
        start_radius: radius(0),
        end_radius: radius(1),
        level: 0,
        lobe: None,
    }];
    let mut grow = vec![Grow {
        dir: V3::x(),
        plane: V3::z(),
    }];

    let mut frontier = vec![0usize];
    for level in 1..=spec.branching_levels {
        let mut next = Vec::new();
        for &pid in &frontier {
            let parent = branches[pid].clone();
            let pdir = grow[pid].dir;
            let len_scale = LENGTH_DECAY.powi(level as i32);
            for side in [0usize, 1] {
                let sign = if side == 0 { -1.0 } else { 1.0 };
                let (dir, plane, lobe) = match level {
                    1 => {
                        // side 0 = right (-y), side 1 = left (+y)
                        let a = sign * (MAIN_ANGLE + jitter(&mut rng));
                        (rot_axis(&V3::z(), a) * pdir, V3::z(), None)
                    }
                    LOBAR_LEVEL => {
                        // side 0 = lower (-z), side 1 = upper (+z)
                        let right = parent_is_right(&branches, pid);
                        let lobe = match (right, side) {
                            (true, 1) => LobeLabel::UpperRight,
                            (true, _) => LobeLabel::LowerRight,
                            (false, 1) => LobeLabel::UpperLeft,
                            (false, _) => LobeLabel::LowerLeft,
                        };
                        let axis = pdir.cross(&V3::z()).normalize();
                        let a = sign * (LOBAR_ANGLE + jitter(&mut rng));
                        (rot_axis(&axis, a) * pdir, axis, Some(lobe))
                    }
                    _ => {
                        // alternate the bifurcation plane by roughly 90 degrees
                        let twist = std::f64::consts::FRAC_PI_2 + jitter(&mut rng);
                        let p = grow[pid].plane;
                        let p = (p - pdir * pdir.dot(&p)).try_normalize(1e-12).unwrap_or_else(|| any_perpendicular(&pdir));
                        let plane = rot_axis(&pdir, twist) * p;
                        let a = sign * (DISTAL_ANGLE + jitter(&mut rng));
                        (rot_axis(&plane, a) * pdir, plane, parent.lobe)
                    }
                };
                let length = spec.scale * len_scale * (1.0 + 0.1 * rng.gen_range(-1.0..1.0));
                let start = parent.end;
                let end = Position::from_vector(&(start.to_vector() + dir * length));
                let id = branches.len();
                branches.push(Branch {
                    id,
                    parent_id: Some(pid),
                    start,
                    end,
                    start_radius: parent.end_radius,
                    end_radius: radius(level + 1),
                    level,
                    lobe,
                });
                grow.push(Grow { dir, plane });
                next.push(id);
            }
        }
        frontier = next;
    }
    Ok(AirwayTree {
        scale: spec.scale,
        branches,
    })
}

fn parent_is_right(branches: &[Branch], id: usize) -> bool {
    // main bronchi are created right first
    branches[id].end.y < branches[id].start.y
}

impl AirwayTree {
    /// A single untapered branch along +x from the origin. Its scale follows
    /// the generator's convention of a root radius of `scale / 6`.
    pub fn straight_tube(length: f64, radius: f64) -> Self {
        Self {
            scale: 6.0 * radius,
            branches: vec![Branch {
                id: 0,
                parent_id: None,
                start: Position::new(0.0, 0.0, 0.0),
                end: Position::new(length, 0.0, 0.0),
                start_radius: radius,
                end_radius: radius,
                level: 0,
                lobe: None,
            }],
        }
    }

    pub fn children(&self, id: usize) -> impl Iterator<Item = &Branch> {
        self.branches.iter().filter(move |b| b.parent_id == Some(id))
    }

    pub fn max_level(&self) -> u32 {
        self.branches.iter().map(|b| b.level).max().unwrap_or(0)
    }

    /// The level-2 branch heading the given lobe.
    pub fn lobe_root(&self, lobe: LobeLabel) -> Option<&Branch> {
        self.branches
            .iter()
            .find(|b| b.level == LOBAR_LEVEL && b.lobe == Some(lobe))
    }

    pub fn is_terminal(&self, id: usize) -> bool {
        self.children(id).next().is_none()
    }

    /// Checks the structural invariants of a generated tree.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Precondition(m));
        let roots: Vec<_> = self.branches.iter().filter(|b| b.parent_id.is_none()).collect();
        if roots.len() != 1 || roots[0].level != 0 {
            return bad(format!("expected one level-0 root, found {}", roots.len()));
        }
        for (i, b) in self.branches.iter().enumerate() {
            if b.id != i {
                return bad(format!("branch {i} carries id {}", b.id));
            }
            if !(b.start_radius > 0.0 && b.end_radius > 0.0 && b.end_radius <= b.start_radius) {
                return bad(format!("branch {i}: bad radii {} -> {}", b.start_radius, b.end_radius));
            }
            if b.length() <= (b.start_radius - b.end_radius).abs() {
                return bad(format!("branch {i}: shorter than its radius change"));
            }
            if let Some(p) = b.parent_id {
                // parents precede children, so the parent chain cannot cycle
                if p >= i {
                    return bad(format!("branch {i}: parent {p} does not precede it"));
                }
                let parent = &self.branches[p];
                if parent.end != b.start {
                    return bad(format!("branch {i} does not start at the end of {p}"));
                }
                if b.level != parent.level + 1 || b.start_radius > parent.end_radius {
                    return bad(format!("branch {i}: level/radius not monotone from {p}"));
                }
                if parent.lobe.is_some() && parent.lobe != b.lobe {
                    return bad(format!("branch {i} leaves the lobe of {p}"));
                }
            }
        }
        let lobar: Vec<_> = self.branches.iter().filter(|b| b.level == LOBAR_LEVEL).collect();
        for lobe in LobeLabel::ALL {
            if lobar.iter().filter(|b| b.lobe == Some(lobe)).count() != 1 {
                return bad(format!("lobe {lobe} does not head exactly one subtree"));
            }
        }
        let max = self.max_level();
        if let Some(t) = self
            .branches
            .iter()
            .find(|b| self.is_terminal(b.id) && b.level != max)
        {
            return bad(format!("terminal branch {} at level {} (expected {max})", t.id, t.level));
        }
        Ok(())
    }

    pub fn sdf(&self) -> Sdf {
        Sdf::new(self.branches.iter())
    }

    /// SDF restricted to branches whose bounding sphere reaches within
    /// `radius` of `center`. Exact inside that ball wherever the full field is
    /// negative or below the margin to the dropped branches.
    pub fn sdf_near(&self, center: &Position, radius: f64) -> Sdf {
        let c = center.to_vector();
        Sdf::new(self.branches.iter().filter(|b| {
            let mid = (b.start.to_vector() + b.end.to_vector()) * 0.5;
            let bound = 0.5 * b.length() + b.start_radius.max(b.end_radius);
            (mid - c).norm() <= radius + bound
        }))
    }

    pub fn signed_distance(&self, p: &Position) -> f64 {
        self.sdf().eval(&p.to_vector())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(crate::json::to_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Precomputed rounded cone between two spheres.
#[derive(Debug, Clone)]
struct Cone {
    a: V3,
    ba: V3,
    l2: f64,
    rr: f64,
    a2: f64,
    il2: f64,
    r1: f64,
    r2: f64,
    /// Bounding sphere; `|p - centre| - bound` is a lower bound on the distance.
    centre: V3,
    bound: f64,
}

impl Cone {
    fn new(b: &Branch) -> Self {
        let a = b.start.to_vector();
        let ba = b.end.to_vector() - a;
        let l2 = ba.dot(&ba);
        let rr = b.start_radius - b.end_radius;
        Self {
            a,
            ba,
            l2,
            rr,
            a2: l2 - rr * rr,
            il2: 1.0 / l2,
            r1: b.start_radius,
            r2: b.end_radius,
            centre: a + ba * 0.5,
            bound: 0.5 * l2.sqrt() + b.start_radius.max(b.end_radius),
        }
    }

    /// Exact signed distance to the convex hull of the two end spheres.
    fn eval(&self, p: &V3) -> f64 {
        let pa = p - self.a;
        let y = pa.dot(&self.ba);
        let z = y - self.l2;
        let x2 = (pa * self.l2 - self.ba * y).norm_squared();
        let y2 = y * y * self.l2;
        let z2 = z * z * self.l2;
        let k = self.rr.signum() * self.rr * self.rr * x2;
        if z.signum() * self.a2 * z2 > k {
            return (x2 + z2).sqrt() * self.il2 - self.r2;
        }
        if y.signum() * self.a2 * y2 < k {
            return (x2 + y2).sqrt() * self.il2 - self.r1;
        }
        ((x2 * self.a2 * self.il2).sqrt() + y * self.rr) * self.il2 - self.r1
    }
}

/// Signed distance field of a union of branches (negative inside the lumen).
#[derive(Debug, Clone)]
pub struct Sdf {
    cones: Vec<Cone>,
}

impl Sdf {
    fn new<'a>(branches: impl Iterator<Item = &'a Branch>) -> Self {
        Self {
            cones: branches.map(Cone::new).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.cones.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cones.is_empty()
    }

    /// Minimum over the cones, skipping those whose bounding sphere cannot
    /// beat the best value so far. Inside the lumen only the cones whose
    /// bounding sphere contains `p` are evaluated.
    pub fn eval(&self, p: &V3) -> f64 {
        let mut best = f64::INFINITY;
        for c in &self.cones {
            if (p - c.centre).norm_squared() < c.bound * c.bound {
                best = best.min(c.eval(p));
            }
        }
        if best < 0.0 {
            return best;
        }
        for c in &self.cones {
            if (p - c.centre).norm() - c.bound < best {
                best = best.min(c.eval(p));
            }
        }
        best
    }

    /// Central-difference gradient; points away from the lumen.
    pub fn gradient(&self, p: &V3, h: f64) -> V3 {
        let d = |e: V3| self.eval(&(p + e * h)) - self.eval(&(p - e * h));
        let g = V3::new(d(V3::x()), d(V3::y()), d(V3::z())) / (2.0 * h);
        g.try_normalize(1e-12).unwrap_or_else(V3::x)
    }
}

/// Samples per spline segment in the arc-length table.
const TABLE_SAMPLES: usize = 128;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArcSample {
    pub s: f64,
    /// Spline parameter: segment index plus local parameter in [0, 1].
    pub u: f64,
    pub point: [f64; 3],
    pub tangent: [f64; 3],
    /// Rotation-minimizing reference normal.
    pub normal: [f64; 3],
}

/// Centripetal Catmull-Rom curve through `control_points`, parameterized by
/// arc length.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NavigationPath {
    pub control_points: Vec<Position>,
    pub arclen_table: Vec<ArcSample>,
    pub total_length: f64,
}

struct Segment {
    p1: V3,
    p2: V3,
    m1: V3,
    m2: V3,
}

impl Segment {
    fn point(&self, t: f64) -> V3 {
        let (t2, t3) = (t * t, t * t * t);
        self.p1 * (2.0 * t3 - 3.0 * t2 + 1.0)
            + self.m1 * (t3 - 2.0 * t2 + t)
            + self.p2 * (-2.0 * t3 + 3.0 * t2)
            + self.m2 * (t3 - t2)
    }

    fn derivative(&self, t: f64) -> V3 {
        let t2 = t * t;
        self.p1 * (6.0 * t2 - 6.0 * t)
            + self.m1 * (3.0 * t2 - 4.0 * t + 1.0)
            + self.p2 * (-6.0 * t2 + 6.0 * t)
            + self.m2 * (3.0 * t2 - 2.0 * t)
    }
}

fn segments(points: &[V3]) -> Vec<Segment> {
    let n = points.len();
    let at = |i: isize| -> V3 {
        if i < 0 {
            points[0] * 2.0 - points[1]
        } else if i as usize >= n {
            points[n - 1] * 2.0 - points[n - 2]
        } else {
            points[i as usize]
        }
    };
    (0..n - 1)
        .map(|i| {
            let i = i as isize;
            let (p0, p1, p2, p3) = (at(i - 1), at(i), at(i + 1), at(i + 2));
            let knot = |a: &V3, b: &V3| (b - a).norm().sqrt().max(1e-12);
            let (d01, d12, d23) = (knot(&p0, &p1), knot(&p1, &p2), knot(&p2, &p3));
            let m1 = ((p1 - p0) / d01 - (p2 - p0) / (d01 + d12) + (p2 - p1) / d12) * d12;
            let m2 = ((p2 - p1) / d12 - (p3 - p1) / (d12 + d23) + (p3 - p2) / d23) * d12;
            Segment { p1, p2, m1, m2 }
        })
        .collect()
}

fn reflect(v: &V3, n: &V3, c: f64) -> V3 {
    v - n * (2.0 / c * n.dot(v))
}

impl NavigationPath {
    /// Builds the interpolating curve and its arc-length table.
    pub fn through(control_points: Vec<Position>) -> Result<Self> {
        if control_points.len() < 2 {
            return Err(Error::Precondition("a path needs at least two control points".into()));
        }
        let pts: Vec<V3> = control_points.iter().map(|p| p.to_vector()).collect();
        if pts.windows(2).any(|w| (w[1] - w[0]).norm() < 1e-9) {
            return Err(Error::Precondition("repeated control point".into()));
        }
        let segs = segments(&pts);
        let mut table: Vec<ArcSample> = Vec::with_capacity(segs.len() * TABLE_SAMPLES + 1);
        let mut s = 0.0;
        let mut prev: Option<V3> = None;
        let mut normal = V3::zeros();
        let total_samples = segs.len() * TABLE_SAMPLES;
        for k in 0..=total_samples {
            let u = k as f64 / TABLE_SAMPLES as f64;
            let (seg, t) = split_u(u, segs.len());
            let p = segs[seg].point(t);
            let tangent = segs[seg].derivative(t).normalize();
            match prev {
                None => {
                    normal = any_perpendicular(&tangent);
                }
                Some(q) => {
                    s += (p - q).norm();
                    // double reflection transport of the previous normal
                    let last = table.last().expect("previous sample");
                    let t0 = V3::from(last.tangent);
                    let v1 = p - q;
                    let c1 = v1.dot(&v1);
                    let nl = reflect(&normal, &v1, c1);
                    let tl = reflect(&t0, &v1, c1);
                    let v2 = tangent - tl;
                    let c2 = v2.dot(&v2);
                    normal = if c2 > 1e-24 { reflect(&nl, &v2, c2) } else { nl };
                    normal = (normal - tangent * tangent.dot(&normal)).normalize();
                }
            }
            table.push(ArcSample {
                s,
                u,
                point: p.into(),
                tangent: tangent.into(),
                normal: normal.into(),
            });
            prev = Some(p);
        }
        Ok(Self {
            control_points,
            arclen_table: table,
            total_length: s,
        })
    }

    fn segs(&self) -> Vec<Segment> {
        let pts: Vec<V3> = self.control_points.iter().map(|p| p.to_vector()).collect();
        segments(&pts)
    }

    /// Table interval containing `s` and the interpolation weight in it.
    fn locate(&self, s: f64) -> (usize, f64) {
        let t = &self.arclen_table;
        let i = t.partition_point(|a| a.s <= s).clamp(1, t.len() - 1) - 1;
        let span = t[i + 1].s - t[i].s;
        let w = if span > 0.0 { ((s - t[i].s) / span).clamp(0.0, 1.0) } else { 0.0 };
        (i, w)
    }

    fn check_s(&self, s: f64) -> Result<()> {
        if !(s.is_finite() && s >= -1e-9 && s <= self.total_length + 1e-9) {
            return Err(Error::Precondition(format!(
                "arc length {s} outside [0, {}]",
                self.total_length
            )));
        }
        Ok(())
    }

    fn eval(&self, s: f64) -> (V3, V3, V3) {
        let (i, w) = self.locate(s);
        let (a, b) = (&self.arclen_table[i], &self.arclen_table[i + 1]);
        let u = a.u + w * (b.u - a.u);
        let segs = self.segs();
        let (seg, t) = split_u(u, segs.len());
        let p = segs[seg].point(t);
        let tangent = segs[seg].derivative(t).normalize();
        let n = V3::from(a.normal) * (1.0 - w) + V3::from(b.normal) * w;
        let n = (n - tangent * tangent.dot(&n)).normalize();
        (p, tangent, n)
    }

    pub fn point_at(&self, s: f64) -> Result<Position> {
        self.check_s(s)?;
        Ok(Position::from_vector(&self.eval(s).0))
    }

    pub fn tangent_at(&self, s: f64) -> Result<V3> {
        self.check_s(s)?;
        Ok(self.eval(s).1)
    }

    /// Rotation-minimizing reference normal at `s`.
    pub fn normal_at(&self, s: f64) -> Result<V3> {
        self.check_s(s)?;
        Ok(self.eval(s).2)
    }

    /// Length of a dense polyline through the curve, independent of the table.
    pub fn polyline_length(&self, samples_per_segment: usize) -> f64 {
        let segs = self.segs();
        let mut len = 0.0;
        for seg in &segs {
            let mut q = seg.point(0.0);
            for k in 1..=samples_per_segment {
                let p = seg.point(k as f64 / samples_per_segment as f64);
                len += (p - q).norm();
                q = p;
            }
        }
        len
    }
}

fn split_u(u: f64, nseg: usize) -> (usize, f64) {
    let seg = (u.floor() as usize).min(nseg - 1);
    (seg, u - seg as f64)
}

/// Camera frame `[look, up x look, up]` at arc length `s`, looking at the
/// path point `delta_d` ahead, with the transported normal rolled by `roll`.
pub fn camera_frame_at(path: &NavigationPath, s: f64, delta_d: f64, roll: f64) -> Result<(Position, RotationMatrix)> {
    camera_frame_offset(path, s, delta_d, roll, &V3::zeros())
}

/// As [`camera_frame_at`] with the camera displaced by `offset` while the
/// look-at target stays on the path, so the offset also turns the view.
pub fn camera_frame_offset(
    path: &NavigationPath,
    s: f64,
    delta_d: f64,
    roll: f64,
    offset: &V3,
) -> Result<(Position, RotationMatrix)> {
    if !(delta_d > 0.0) {
        return Err(Error::Precondition(format!("look-ahead distance must be positive, got {delta_d}")));
    }
    if !(s >= -1e-9 && s <= path.total_length - delta_d + 1e-9) {
        return Err(Error::Precondition(format!(
            "arc length {s} outside [0, {}]",
            path.total_length - delta_d
        )));
    }
    let s = s.max(0.0);
    let (p, _, n) = path.eval(s);
    let p = p + offset;
    let ahead = path.eval((s + delta_d).min(path.total_length)).0;
    let look = (ahead - p)
        .try_normalize(1e-12)
        .ok_or_else(|| Error::Precondition("look-at target coincides with camera".into()))?;
    let up0 = (n - look * look.dot(&n))
        .try_normalize(1e-9)
        .unwrap_or_else(|| any_perpendicular(&look));
    let up = up0 * roll.cos() + look.cross(&up0) * roll.sin();
    let side = up.cross(&look);
    let r = RotationMatrix::from_columns(&look, &side, &up)?;
    Ok((Position::from_vector(&p), r))
}

pub fn camera_pose_at(path: &NavigationPath, s: f64, delta_d: f64, roll: f64) -> Result<Pose> {
    let (p, r) = camera_frame_at(path, s, delta_d, roll)?;
    Ok(Pose::new(p, rotation_to_euler(&r)?))
}

/// Centerline from the trachea entrance to a terminal branch of `lobe`. At
/// each bifurcation below the lobar bronchus a child is drawn from `rng_seed`.
pub fn centerline_path(tree: &AirwayTree, lobe: LobeLabel, rng_seed: u64) -> Result<NavigationPath> {
    let root = tree
        .lobe_root(lobe)
        .ok_or_else(|| Error::Precondition(format!("lobe {lobe} missing from tree")))?;
    let mut chain = vec![root.id];
    let mut cur = root.parent_id;
    while let Some(id) = cur {
        chain.push(id);
        cur = tree.branches[id].parent_id;
    }
    chain.reverse();
    let mut rng = crate::seed::rng(rng_seed);
    let mut tip = root.id;
    loop {
        let kids: Vec<usize> = tree.children(tip).map(|b| b.id).collect();
        if kids.is_empty() {
            break;
        }
        tip = kids[rng.gen_range(0..kids.len())];
        chain.push(tip);
    }
    let first = &tree.branches[chain[0]];
    let mut points = vec![first.start];
    for &id in &chain {
        let b = &tree.branches[id];
        let mid = Position::from_vector(&((b.start.to_vector() + b.end.to_vector()) * 0.5));
        points.push(mid);
        points.push(b.end);
    }
    NavigationPath::through(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose::euler_to_rotation;
    use proptest::prelude::*;
    use rand::Rng;

    fn tree(seed: u64) -> AirwayTree {
        generate_patient(&PatientSpec::new(seed)).unwrap()
    }

    #[test]
    fn same_seed_same_tree() {
        let a = tree(3).to_json().unwrap();
        let b = tree(3).to_json().unwrap();
        assert_eq!(a, b);
        assert_ne!(a, tree(4).to_json().unwrap());
        assert_eq!(AirwayTree::from_json(&a).unwrap(), tree(3));
    }

    #[test]
    fn levels_follow_spec() {
        for levels in 4..=6 {
            let mut spec = PatientSpec::new(1);
            spec.branching_levels = levels;
            let t = generate_patient(&spec).unwrap();
            assert_eq!(t.max_level(), levels);
            assert_eq!(t.branches.len(), (1 << (levels + 1)) - 1);
            t.validate().unwrap();
        }
    }

    #[test]
    fn invariants_hold_over_seeds() {
        for seed in 0..20 {
            tree(seed).validate().unwrap();
        }
    }

    #[test]
    fn degenerate_specs_rejected() {
        let mut s = PatientSpec::new(0);
        s.scale = 0.0;
        assert!(matches!(generate_patient(&s), Err(Error::Config(_))));
        let mut s = PatientSpec::new(0);
        s.branching_levels = 7;
        assert!(generate_patient(&s).is_err());
        let mut s = PatientSpec::new(0);
        s.radius_taper = 1.0;
        assert!(generate_patient(&s).is_err());
    }

    #[test]
    fn lobes_are_where_their_names_say() {
        let t = tree(9);
        for lobe in LobeLabel::ALL {
            let b = t.lobe_root(lobe).unwrap();
            let d = b.end.to_vector() - b.start.to_vector();
            assert_eq!(b.end.y < 0.0, lobe.is_right(), "{lobe}");
            assert_eq!(d.z > 0.0, lobe.is_upper(), "{lobe}");
        }
    }

    #[test]
    fn sdf_capsule_values() {
        let t = AirwayTree::straight_tube(40.0, 5.0);
        assert!((t.signed_distance(&Position::new(20.0, 0.0, 0.0)) + 5.0).abs() < 1e-9);
        assert!((t.signed_distance(&Position::new(12.0, 0.0, 10.0)) - 5.0).abs() < 1e-9);
        // beyond the end cap the field is spherical
        assert!((t.signed_distance(&Position::new(48.0, 0.0, 0.0)) - 3.0).abs() < 1e-9);
    }

    #[test]
    fn sdf_on_tapered_axis() {
        // distance from the axis of a cone to its flank is r(x) * cos(half angle)
        let mut t = AirwayTree::straight_tube(40.0, 6.0);
        t.branches[0].end_radius = 2.0;
        let half = ((6.0f64 - 2.0) / 40.0).asin();
        let got = t.signed_distance(&Position::new(20.0, 0.0, 0.0));
        // the flank touches both end spheres at the same polar angle
        let p = V3::new(20.0, 0.0, 0.0);
        let (a, b) = (V3::new(0.0, 0.0, 6.0 * half.cos()), V3::new(40.0, 0.0, 2.0 * half.cos()));
        let a = a + V3::new(6.0 * half.sin(), 0.0, 0.0);
        let b = b + V3::new(2.0 * half.sin(), 0.0, 0.0);
        let dir = (b - a).normalize();
        let perp = (p - a) - dir * dir.dot(&(p - a));
        assert!((got + perp.norm()).abs() < 1e-9);
    }

    #[test]
    fn sdf_is_lipschitz() {
        let t = tree(2);
        let sdf = t.sdf();
        let mut rng = crate::seed::rng(1);
        for _ in 0..2000 {
            let p = V3::new(rng.gen_range(-20.0..150.0), rng.gen_range(-80.0..80.0), rng.gen_range(-80.0..80.0));
            let q = p + V3::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
            assert!((sdf.eval(&p) - sdf.eval(&q)).abs() <= (p - q).norm() + 1e-9);
        }
    }

    #[test]
    fn culled_sdf_agrees_inside_the_ball() {
        let t = tree(5);
        let path = centerline_path(&t, LobeLabel::LowerLeft, 0).unwrap();
        let c = path.point_at(path.total_length * 0.6).unwrap();
        let near = t.sdf_near(&c, 30.0);
        assert!(near.len() < t.branches.len());
        let full = t.sdf();
        let mut rng = crate::seed::rng(3);
        for _ in 0..500 {
            let p = c.to_vector() + V3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)) * 17.0;
            let f = full.eval(&p);
            if f < 0.0 {
                assert_eq!(f, near.eval(&p));
            }
        }
    }

    #[test]
    fn path_endpoints_and_table() {
        let t = tree(7);
        for lobe in LobeLabel::ALL {
            let path = centerline_path(&t, lobe, 11).unwrap();
            assert_eq!(path.point_at(0.0).unwrap(), t.branches[0].start);
            let end = path.point_at(path.total_length).unwrap();
            let tip = t
                .branches
                .iter()
                .find(|b| b.end.distance(&end) < 1e-9)
                .expect("path ends at a branch end");
            assert!(t.is_terminal(tip.id) && tip.lobe == Some(lobe));
            assert!(path.arclen_table.windows(2).all(|w| w[1].s > w[0].s));
            let poly = path.polyline_length(4096);
            assert!((path.total_length - poly).abs() / poly < 1e-3);
        }
    }

    #[test]
    fn path_stays_in_lumen() {
        for seed in 0..5 {
            let t = tree(seed);
            let sdf = t.sdf();
            for lobe in LobeLabel::ALL {
                let path = centerline_path(&t, lobe, seed).unwrap();
                for k in 0..=400 {
                    let s = path.total_length * k as f64 / 400.0;
                    let d = sdf.eval(&path.point_at(s).unwrap().to_vector());
                    assert!(d < 0.0, "seed {seed} {lobe} s={s}: {d}");
                }
            }
        }
    }

    #[test]
    fn missing_lobe_is_an_error() {
        let t = AirwayTree::straight_tube(10.0, 1.0);
        assert!(centerline_path(&t, LobeLabel::UpperLeft, 0).is_err());
    }

    fn straight_path() -> NavigationPath {
        let dir = V3::new(1.0, 2.0, -0.5).normalize();
        let pts = (0..6).map(|i| Position::from_vector(&(V3::new(3.0, -1.0, 2.0) + dir * (i as f64 * 10.0)))).collect();
        NavigationPath::through(pts).unwrap()
    }

    #[test]
    fn straight_path_looks_along_the_line() {
        let path = straight_path();
        let dir = V3::new(1.0, 2.0, -0.5).normalize();
        assert!((path.total_length - 50.0).abs() < 1e-9);
        for s in [0.0, 7.3, 25.0, 46.0] {
            let (_, r) = camera_frame_at(&path, s, 4.0, 0.0).unwrap();
            assert!((r.matrix().column(0) - dir).norm() < 1e-9);
            let pose = camera_pose_at(&path, s, 4.0, 0.0).unwrap();
            let look = crate::pose::look_direction(pose.orientation);
            assert!((look - dir).norm() < 1e-9);
        }
    }

    #[test]
    fn roll_is_periodic_and_rotates_about_look() {
        let t = tree(1);
        let path = centerline_path(&t, LobeLabel::UpperRight, 2).unwrap();
        for s in [0.0, 30.0, 95.0, path.total_length - 4.0] {
            let a = camera_pose_at(&path, s, 4.0, 0.0).unwrap();
            let b = camera_pose_at(&path, s, 4.0, 2.0 * std::f64::consts::PI).unwrap();
            assert!(a.position.distance(&b.position) < 1e-12);
            let ea = euler_to_rotation(a.orientation).into_inner();
            let eb = euler_to_rotation(b.orientation).into_inner();
            assert!((ea - eb).norm() < 1e-9);

            let roll = 0.3;
            let c = camera_pose_at(&path, s, 4.0, roll).unwrap();
            let d = camera_pose_at(&path, s, 4.0, roll + std::f64::consts::FRAC_PI_4).unwrap();
            assert_eq!(c.position, d.position);
            let rc = euler_to_rotation(c.orientation).into_inner();
            let rd = euler_to_rotation(d.orientation).into_inner();
            let look = rc.column(0).into_owned();
            let expect = rot_axis(&look, std::f64::consts::FRAC_PI_4) * rc;
            assert!((rd - expect).norm() < 1e-9);
        }
    }

    #[test]
    fn camera_range_checked() {
        let path = straight_path();
        assert!(camera_pose_at(&path, -1.0, 4.0, 0.0).is_err());
        assert!(camera_pose_at(&path, 47.0, 4.0, 0.0).is_err());
        assert!(camera_pose_at(&path, 46.0, 4.0, 0.0).is_ok());
    }

    #[test]
    fn frames_are_continuous() {
        let t = tree(4);
        for lobe in LobeLabel::ALL {
            let path = centerline_path(&t, lobe, 1).unwrap();
            let usable = path.total_length - 4.0;
            let ds = path.total_length / 1000.0;
            let mut prev = camera_frame_at(&path, 0.0, 4.0, 0.0).unwrap().1.into_inner();
            let mut s = ds;
            while s <= usable {
                let cur = camera_frame_at(&path, s, 4.0, 0.0).unwrap().1.into_inner();
                let rel = prev.transpose() * cur;
                let angle = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos();
                assert!(angle.to_degrees() < 5.0, "{lobe} s={s}: {angle}");
                prev = cur;
                s += ds;
            }
        }
    }

    #[test]
    fn camera_positions_in_lumen() {
        let t = tree(8);
        let sdf = t.sdf();
        let path = centerline_path(&t, LobeLabel::LowerRight, 3).unwrap();
        for k in 0..=200 {
            let s = (path.total_length - 4.0) * k as f64 / 200.0;
            let pose = camera_pose_at(&path, s, 4.0, 0.0).unwrap();
            assert!(sdf.eval(&pose.position.to_vector()) < 0.0);
        }
    }

    proptest! {
        #[test]
        fn transported_normal_is_orthonormal(seed in 0u64..50, frac in 0.0f64..1.0) {
            let t = tree(seed);
            let path = centerline_path(&t, LobeLabel::ALL[(seed % 4) as usize], seed).unwrap();
            let s = frac * path.total_length;
            let n = path.normal_at(s).unwrap();
            let tg = path.tangent_at(s).unwrap();
            prop_assert!((n.norm() - 1.0).abs() < 1e-12);
            prop_assert!(n.dot(&tg).abs() < 1e-9);
        }
    }

    #[test]
    fn pruned_sdf_equals_full_minimum() {
        let t = tree(8);
        let sdf = t.sdf();
        let mut rng = crate::seed::rng(4);
        for _ in 0..5000 {
            let b = &t.branches[rng.gen_range(0..t.branches.len())];
            let p = b.start.to_vector() + (b.end.to_vector() - b.start.to_vector()) * rng.gen_range(0.0..1.0)
                + V3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)) * 15.0;
            let full = sdf.cones.iter().map(|c| c.eval(&p)).fold(f64::INFINITY, f64::min);
            assert_eq!(sdf.eval(&p), full);
        }
    }
}
