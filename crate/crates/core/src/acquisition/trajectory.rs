//! Robotic scan trajectories: Linear, U-shape and Zig-Zag.
//!
//! U-shape and Zig-Zag paths are laid out in the rectangle spanned by two
//! operator-chosen corner poses. The longitudinal axis is the world axis with
//! the largest start-to-end displacement, the transverse axis the larger of
//! the remaining two, and the third (height) coordinate is interpolated
//! linearly with longitudinal progress.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{RigidTransform, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryKind {
    Linear,
    UShape,
    ZigZag,
}

impl TrajectoryKind {
    pub const ALL: [TrajectoryKind; 3] = [Self::Linear, Self::UShape, Self::ZigZag];

    pub fn segment_count(self) -> usize {
        match self {
            Self::Linear => 1,
            Self::UShape => 3,
            Self::ZigZag => 5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Linear => "linear",
            Self::UShape => "u_shape",
            Self::ZigZag => "zig_zag",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Self::Linear => "Linear",
            Self::UShape => "U-shape",
            Self::ZigZag => "Zig-Zag",
        }
    }
}

impl std::str::FromStr for TrajectoryKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "linear" => Ok(Self::Linear),
            "u_shape" | "ushape" => Ok(Self::UShape),
            "zig_zag" | "zigzag" => Ok(Self::ZigZag),
            _ => Err(Error::invalid(format!("unknown trajectory kind {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPlan {
    pub kind: TrajectoryKind,
    /// Probe pose (probe frame to world) for each frame.
    pub poses: Vec<RigidTransform>,
    /// Index of the first pose of each segment; consecutive segments share
    /// their corner pose.
    pub segment_starts: Vec<usize>,
}

impl TrajectoryPlan {
    pub fn segment_count(&self) -> usize {
        self.segment_starts.len()
    }

    pub fn path_length(&self) -> f64 {
        self.poses
            .windows(2)
            .map(|w| (w[1].translation - w[0].translation).norm())
            .sum()
    }

    pub fn max_step(&self) -> f64 {
        self.poses
            .windows(2)
            .map(|w| (w[1].translation - w[0].translation).norm())
            .fold(0.0, f64::max)
    }

    /// Pose indices `[start, end]` (inclusive) of segment `s`.
    pub fn segment_range(&self, s: usize) -> (usize, usize) {
        let start = self.segment_starts[s];
        let end = self
            .segment_starts
            .get(s + 1)
            .copied()
            .unwrap_or(self.poses.len() - 1);
        (start, end)
    }
}

const ORIENTATION_TOL: f64 = 1e-6;

fn check_inputs(start: &RigidTransform, end: &RigidTransform, step_mm: f64) -> Result<()> {
    if !(step_mm > 0.0) || !step_mm.is_finite() {
        return Err(Error::invalid(format!("step must be positive, got {step_mm}")));
    }
    let drift = (start.rotation - end.rotation).amax();
    if drift > ORIENTATION_TOL {
        return Err(Error::invalid(format!(
            "start and end orientations differ by {drift:e}; scans keep the probe orientation fixed"
        )));
    }
    Ok(())
}

/// Appends the samples of segment `a -> b` (excluding `a` unless `poses` is
/// empty) with at most `step` spacing.
fn push_segment(poses: &mut Vec<RigidTransform>, rotation: &RigidTransform, a: Vec3, b: Vec3, step: f64) {
    let len = (b - a).norm();
    let n = ((len / step) - 1e-9).ceil().max(1.0) as usize;
    if poses.is_empty() {
        poses.push(rotation.with_translation(a));
    }
    for k in 1..=n {
        let p = if k == n { b } else { a + (b - a) * (k as f64 / n as f64) };
        poses.push(rotation.with_translation(p));
    }
}

fn build(kind: TrajectoryKind, start: &RigidTransform, waypoints: &[Vec3], step: f64) -> TrajectoryPlan {
    let mut poses = Vec::new();
    let mut segment_starts = Vec::new();
    let orient = RigidTransform {
        rotation: start.rotation,
        translation: Vec3::zeros(),
    };
    for w in waypoints.windows(2) {
        segment_starts.push(poses.len().saturating_sub(1));
        push_segment(&mut poses, &orient, w[0], w[1], step);
    }
    TrajectoryPlan {
        kind,
        poses,
        segment_starts,
    }
}

pub fn plan_linear(start: &RigidTransform, end: &RigidTransform, step_mm: f64) -> Result<TrajectoryPlan> {
    check_inputs(start, end, step_mm)?;
    if start.translation == end.translation {
        return Ok(TrajectoryPlan {
            kind: TrajectoryKind::Linear,
            poses: vec![*start],
            segment_starts: vec![0],
        });
    }
    Ok(build(
        TrajectoryKind::Linear,
        start,
        &[start.translation, end.translation],
        step_mm,
    ))
}

/// Longitudinal, transverse and height axis indices for a corner pair.
fn rectangle_axes(d: &Vec3) -> (usize, usize, usize) {
    let mut axes = [0usize, 1, 2];
    axes.sort_by(|&a, &b| d[b].abs().total_cmp(&d[a].abs()).then(a.cmp(&b)));
    (axes[0], axes[1], axes[2])
}

/// Corner waypoints given as `(transverse, longitudinal)` pairs.
fn corner_path(
    start: &RigidTransform,
    end: &RigidTransform,
    step_mm: f64,
    corners: impl Fn(f64, f64, f64, f64) -> Vec<(f64, f64)>,
) -> Result<Vec<Vec3>> {
    check_inputs(start, end, step_mm)?;
    let (s, e) = (start.translation, end.translation);
    let d = e - s;
    let (lon, tra, hgt) = rectangle_axes(&d);
    if d[tra].abs() < 1e-9 {
        return Err(Error::invalid(
            "start and end have no transverse offset; use a Linear scan instead",
        ));
    }
    let (l0, l1) = (s[lon], e[lon]);
    let (t0, t1) = (s[tra], e[tra]);
    let height = |l: f64| {
        if (l1 - l0).abs() < 1e-12 {
            s[hgt]
        } else {
            s[hgt] + (l - l0) / (l1 - l0) * (e[hgt] - s[hgt])
        }
    };
    let pts = corners(t0, t1, l0, l1)
        .into_iter()
        .map(|(t, l)| {
            let mut p = Vec3::zeros();
            p[tra] = t;
            p[lon] = l;
            p[hgt] = height(l);
            p
        })
        .collect::<Vec<_>>();
    let total: f64 = pts.windows(2).map(|w| (w[1] - w[0]).norm()).sum();
    if step_mm > total {
        return Err(Error::invalid(format!(
            "step {step_mm} mm exceeds the total path length {total:.3} mm"
        )));
    }
    Ok(pts)
}

/// Up the start side, across the far end, back down the end side.
pub fn plan_ushape(start: &RigidTransform, end: &RigidTransform, step_mm: f64) -> Result<TrajectoryPlan> {
    let pts = corner_path(start, end, step_mm, |t0, t1, l0, l1| {
        vec![(t0, l0), (t0, l1), (t1, l1), (t1, l0)]
    })?;
    Ok(build(TrajectoryKind::UShape, start, &pts, step_mm))
}

/// Three alternating longitudinal passes at the start, middle and end
/// transverse offsets.
pub fn plan_zigzag(start: &RigidTransform, end: &RigidTransform, step_mm: f64) -> Result<TrajectoryPlan> {
    let pts = corner_path(start, end, step_mm, |t0, t1, l0, l1| {
        let tm = 0.5 * (t0 + t1);
        vec![(t0, l0), (t0, l1), (tm, l1), (tm, l0), (t1, l0), (t1, l1)]
    })?;
    Ok(build(TrajectoryKind::ZigZag, start, &pts, step_mm))
}

pub fn plan(kind: TrajectoryKind, start: &RigidTransform, end: &RigidTransform, step_mm: f64) -> Result<TrajectoryPlan> {
    match kind {
        TrajectoryKind::Linear => plan_linear(start, end, step_mm),
        TrajectoryKind::UShape => plan_ushape(start, end, step_mm),
        TrajectoryKind::ZigZag => plan_zigzag(start, end, step_mm),
    }
}
