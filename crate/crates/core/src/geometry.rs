//! Rigid-body transforms and the ultrasound calibration chain.
//!
//! Every tracked pixel reaches world space through
//! `world <- base <- end-effector <- probe <- image`. Rotations are kept as
//! 3x3 matrices and re-orthonormalized (polar decomposition) whenever
//! composition drift exceeds [`ORTHO_DRIFT_TOL`].
//!
//! Image convention: the image frame has `x` along the probe width (`u`),
//! `y` along depth (`v`) and `z` normal to the image. A metric image point is
//! `(u * sx, v * sy, 0)`. The image plane is the probe's local x-z plane; the
//! `t_image_probe` transform carries that rotation.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type WorldPoint = Vector3<f64>;

/// Drift in `max |R^T R - I|` above which a composed rotation is re-projected.
pub const ORTHO_DRIFT_TOL: f64 = 1e-12;
/// Tolerance used when validating externally supplied rotations.
pub const ROTATION_VALID_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Builds a transform, rejecting rotations that are not proper orthonormal.
    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self> {
        let t = Self {
            rotation,
            translation,
        };
        if !t.translation.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("translation must be finite"));
        }
        if t.orthonormality_error() >= ROTATION_VALID_TOL
            || (t.rotation.determinant() - 1.0).abs() >= ROTATION_VALID_TOL
        {
            return Err(Error::invalid(format!(
                "rotation is not a proper orthonormal matrix (|R^T R - I| = {:e}, det = {})",
                t.orthonormality_error(),
                t.rotation.determinant()
            )));
        }
        Ok(t)
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    pub fn translate(x: f64, y: f64, z: f64) -> Self {
        Self::from_translation(Vec3::new(x, y, z))
    }

    /// Rotation about `axis` by `angle` radians (right-handed).
    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Self {
        let axis = nalgebra::Unit::new_normalize(*axis);
        Self {
            rotation: *Rotation3::from_axis_angle(&axis, angle).matrix(),
            translation: Vec3::zeros(),
        }
    }

    pub fn rot_x(angle: f64) -> Self {
        Self::from_axis_angle(&Vec3::x(), angle)
    }

    pub fn rot_y(angle: f64) -> Self {
        Self::from_axis_angle(&Vec3::y(), angle)
    }

    pub fn rot_z(angle: f64) -> Self {
        Self::from_axis_angle(&Vec3::z(), angle)
    }

    pub fn with_translation(mut self, translation: Vec3) -> Self {
        self.translation = translation;
        self
    }

    /// `self * other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        let mut out = RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        };
        if out.orthonormality_error() > ORTHO_DRIFT_TOL {
            out.rotation = orthonormalize(&out.rotation);
        }
        out
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    #[inline]
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    #[inline]
    pub fn apply_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// `max |R^T R - I|`.
    pub fn orthonormality_error(&self) -> f64 {
        (self.rotation.transpose() * self.rotation - Matrix3::identity()).amax()
    }

    pub fn is_valid(&self) -> bool {
        self.orthonormality_error() < ROTATION_VALID_TOL
            && (self.rotation.determinant() - 1.0).abs() < ROTATION_VALID_TOL
            && self.translation.iter().all(|v| v.is_finite())
    }

    /// Rotation angle (radians) of `self^-1 * other`.
    pub fn rotation_angle_to(&self, other: &RigidTransform) -> f64 {
        let rel = self.rotation.transpose() * other.rotation;
        ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }
}

/// Nearest proper rotation to `m` (polar factor via SVD).
pub fn orthonormalize(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut d = Matrix3::identity();
        d[(2, 2)] = -1.0;
        r = u * d * v_t;
    }
    r
}

/// A pixel location in a (scan-converted) ultrasound image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImagePoint {
    /// Column, along the probe width.
    pub u: f64,
    /// Row, along depth.
    pub v: f64,
}

impl ImagePoint {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationChain {
    pub t_base_world: RigidTransform,
    pub t_ee_base: RigidTransform,
    pub t_probe_ee: RigidTransform,
    pub t_image_probe: RigidTransform,
    /// mm per pixel along (u, v).
    pub pixel_spacing: (f64, f64),
}

impl CalibrationChain {
    pub fn new(
        t_base_world: RigidTransform,
        t_ee_base: RigidTransform,
        t_probe_ee: RigidTransform,
        t_image_probe: RigidTransform,
        pixel_spacing: (f64, f64),
    ) -> Result<Self> {
        let chain = Self {
            t_base_world,
            t_ee_base,
            t_probe_ee,
            t_image_probe,
            pixel_spacing,
        };
        chain.validate()?;
        Ok(chain)
    }

    /// All four transforms identity.
    pub fn identity(pixel_spacing: (f64, f64)) -> Result<Self> {
        let i = RigidTransform::identity();
        Self::new(i, i, i, i, pixel_spacing)
    }

    pub fn validate(&self) -> Result<()> {
        let (sx, sy) = self.pixel_spacing;
        if !(sx > 0.0 && sy > 0.0 && sx.is_finite() && sy.is_finite()) {
            return Err(Error::invalid(format!(
                "pixel spacing must be positive, got ({sx}, {sy})"
            )));
        }
        for (name, t) in [
            ("t_base_world", &self.t_base_world),
            ("t_ee_base", &self.t_ee_base),
            ("t_probe_ee", &self.t_probe_ee),
            ("t_image_probe", &self.t_image_probe),
        ] {
            if !t.is_valid() {
                return Err(Error::invalid(format!("{name} is not a rigid transform")));
            }
        }
        Ok(())
    }

    /// Image-metric to world transform (the whole chain composed once).
    pub fn image_to_world(&self) -> RigidTransform {
        self.t_base_world
            .compose(&self.t_ee_base)
            .compose(&self.t_probe_ee)
            .compose(&self.t_image_probe)
    }

    /// Probe frame to world.
    pub fn probe_pose(&self) -> RigidTransform {
        self.t_base_world
            .compose(&self.t_ee_base)
            .compose(&self.t_probe_ee)
    }

    /// Returns a copy whose end-effector pose is chosen so that the probe
    /// sits at `probe_to_world`, keeping the fixed calibration parts.
    pub fn with_probe_pose(&self, probe_to_world: &RigidTransform) -> Self {
        let t_ee_base = self
            .t_base_world
            .inverse()
            .compose(probe_to_world)
            .compose(&self.t_probe_ee.inverse());
        Self { t_ee_base, ..*self }
    }

    pub fn image_metric(&self, p: &ImagePoint) -> Vec3 {
        Vec3::new(p.u * self.pixel_spacing.0, p.v * self.pixel_spacing.1, 0.0)
    }

    pub fn pixel_to_world(&self, p: &ImagePoint) -> WorldPoint {
        self.image_to_world().apply(&self.image_metric(p))
    }

    /// Inverse mapping: projects `w` into the image frame. Returns the image
    /// point and the signed out-of-plane offset in mm.
    pub fn world_to_pixel(&self, w: &WorldPoint) -> (ImagePoint, f64) {
        let local = self.image_to_world().inverse().apply(w);
        (
            ImagePoint::new(local.x / self.pixel_spacing.0, local.y / self.pixel_spacing.1),
            local.z,
        )
    }
}

fn fmt_transform_row(out: &mut String, index: usize, t: &RigidTransform) {
    let _ = write!(
        out,
        "{index} {} {} {}",
        t.translation.x, t.translation.y, t.translation.z
    );
    for r in 0..3 {
        for c in 0..3 {
            let _ = write!(out, " {}", t.rotation[(r, c)]);
        }
    }
    out.push('\n');
}

/// Serializes poses as `frame_index tx ty tz r00 r01 r02 r10 ... r22` lines.
pub fn format_pose_file(poses: &[RigidTransform]) -> String {
    let mut out = String::new();
    for (i, t) in poses.iter().enumerate() {
        fmt_transform_row(&mut out, i, t);
    }
    out
}

pub fn write_pose_file(path: &Path, poses: &[RigidTransform]) -> Result<()> {
    fs::write(path, format_pose_file(poses)).map_err(|e| Error::io(path, e))
}

pub fn parse_pose_file(text: &str, path: &Path) -> Result<Vec<RigidTransform>> {
    let mut poses = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            message,
        };
        let fields: Vec<&str> = line.split_ascii_whitespace().collect();
        if fields.len() != 13 {
            return Err(parse_err(format!("expected 13 fields, found {}", fields.len())));
        }
        let index: usize = fields[0]
            .parse()
            .map_err(|_| parse_err(format!("bad frame index {:?}", fields[0])))?;
        if index != poses.len() {
            return Err(parse_err(format!(
                "frame index {index} out of sequence (expected {})",
                poses.len()
            )));
        }
        let mut vals = [0.0f64; 12];
        for (slot, f) in vals.iter_mut().zip(&fields[1..]) {
            *slot = f
                .parse()
                .map_err(|_| parse_err(format!("bad number {f:?}")))?;
        }
        let translation = Vec3::new(vals[0], vals[1], vals[2]);
        let rotation = Matrix3::from_row_slice(&vals[3..12]);
        let t = RigidTransform::new(rotation, translation)
            .map_err(|e| parse_err(e.to_string()))?;
        poses.push(t);
    }
    Ok(poses)
}

pub fn read_pose_file(path: &Path) -> Result<Vec<RigidTransform>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_pose_file(&text, path)
}

/// Axis-aligned bounding box of a point set, `None` when empty.
pub fn bounding_box(points: &[Vec3]) -> Option<(Vec3, Vec3)> {
    let first = points.first()?;
    let mut lo = *first;
    let mut hi = *first;
    for p in &points[1..] {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    Some((lo, hi))
}

pub fn centroid(points: &[Vec3]) -> Vec3 {
    if points.is_empty() {
        return Vec3::zeros();
    }
    points.iter().fold(Vec3::zeros(), |acc, p| acc + p) / points.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn random_transform(rng: &mut ChaCha8Rng) -> RigidTransform {
        let axis = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let angle = rng.random_range(-3.1..3.1);
        RigidTransform::from_axis_angle(&axis, angle).with_translation(Vec3::new(
            rng.random_range(-100.0..100.0),
            rng.random_range(-100.0..100.0),
            rng.random_range(-100.0..100.0),
        ))
    }

    #[test]
    fn compose_with_identity_is_neutral() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = random_transform(&mut rng);
        let i = RigidTransform::identity();
        let a = i.compose(&t);
        let b = t.compose(&i);
        assert!((a.rotation - t.rotation).amax() < 1e-12);
        assert!((b.translation - t.translation).amax() < 1e-12);
    }

    #[test]
    fn compose_with_inverse_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = random_transform(&mut rng);
        let id = t.compose(&t.inverse());
        assert!((id.rotation - Matrix3::identity()).amax() < 1e-9);
        assert!(id.translation.amax() < 1e-9);
    }

    #[test]
    fn two_quarter_turns_about_z_flip_x() {
        let r = RigidTransform::rot_z(FRAC_PI_2);
        let p = r.compose(&r).apply(&Vec3::x());
        let oracle = r.to_homogeneous() * r.to_homogeneous() * nalgebra::Vector4::new(1.0, 0.0, 0.0, 1.0);
        assert!((p - Vec3::new(-1.0, 0.0, 0.0)).amax() < 1e-12);
        assert!((p - oracle.xyz()).amax() < 1e-12);
    }

    #[test]
    fn inverse_of_translation() {
        let t = RigidTransform::translate(1.0, 2.0, 3.0).inverse();
        assert_eq!(t.translation, Vec3::new(-1.0, -2.0, -3.0));
        assert_eq!(RigidTransform::identity().inverse(), RigidTransform::identity());
    }

    #[test]
    fn inverse_round_trips_random_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = random_transform(&mut rng);
        let inv = t.inverse();
        let oracle = t.to_homogeneous().try_inverse().unwrap();
        for _ in 0..100 {
            let p = Vec3::new(
                rng.random_range(-500.0..500.0),
                rng.random_range(-500.0..500.0),
                rng.random_range(-500.0..500.0),
            );
            assert!((inv.apply(&t.apply(&p)) - p).amax() < 1e-9);
            let h = oracle * p.push(1.0);
            assert!((inv.apply(&p) - h.xyz()).amax() < 1e-9);
        }
    }

    #[test]
    fn rejects_reflection_and_bad_spacing() {
        let mut m = Matrix3::identity();
        m[(2, 2)] = -1.0;
        assert!(RigidTransform::new(m, Vec3::zeros()).is_err());
        assert!(CalibrationChain::identity((0.0, 1.0)).is_err());
        assert!(CalibrationChain::identity((1.0, -1.0)).is_err());
    }

    #[test]
    fn identity_chain_maps_pixels_to_plane() {
        let chain = CalibrationChain::identity((1.0, 1.0)).unwrap();
        let w = chain.pixel_to_world(&ImagePoint::new(3.0, 4.0));
        assert_eq!(w, Vec3::new(3.0, 4.0, 0.0));

        let mut chain = chain;
        chain.t_ee_base = RigidTransform::translate(0.0, 0.0, 10.0);
        let w = chain.pixel_to_world(&ImagePoint::new(0.0, 0.0));
        assert_eq!(w, Vec3::new(0.0, 0.0, 10.0));
    }

    #[test]
    fn with_probe_pose_places_probe() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let chain = CalibrationChain::new(
            random_transform(&mut rng),
            random_transform(&mut rng),
            random_transform(&mut rng),
            random_transform(&mut rng),
            (0.3, 0.2),
        )
        .unwrap();
        let pose = random_transform(&mut rng);
        let c2 = chain.with_probe_pose(&pose);
        let got = c2.probe_pose();
        assert!((got.rotation - pose.rotation).amax() < 1e-9);
        assert!((got.translation - pose.translation).amax() < 1e-9);
    }

    #[test]
    fn pose_file_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let poses: Vec<_> = (0..7).map(|_| random_transform(&mut rng)).collect();
        let text = format_pose_file(&poses);
        let back = parse_pose_file(&text, Path::new("poses.txt")).unwrap();
        assert_eq!(poses, back);
    }

    #[test]
    fn pose_file_reports_line_numbers() {
        let text = "0 0 0 0 1 0 0 0 1 0 0 0 1\n1 0 0 0 1 0 0\n";
        match parse_pose_file(text, Path::new("p.txt")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn repeated_composition_stays_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut acc = RigidTransform::identity();
        for _ in 0..10_000 {
            let t = random_transform(&mut rng);
            acc = acc.compose(&t);
            acc.translation /= 10.0;
        }
        assert!(acc.orthonormality_error() < 1e-9);
        assert!((acc.rotation.determinant() - 1.0).abs() < 1e-9);
    }
}
