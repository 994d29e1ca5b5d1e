//! Simulated bone-surface segmentation by ray casting with total shadowing.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::probe::ProbeModel;
use super::trajectory::TrajectoryPlan;
use crate::cloud::LabeledPointCloud;
use crate::error::{Error, Result};
use crate::geometry::{RigidTransform, Vec3};
use crate::mesh::TriMesh;
use crate::phantom::SpineModel;
use crate::spatial::{Bvh, RayHit};

/// Labeled triangle soup with a BVH, built once per spine.
#[derive(Debug, Clone)]
pub struct SpineScene {
    bvh: Bvh,
    levels: Vec<u8>,
}

impl SpineScene {
    pub fn new(spine: &SpineModel) -> Self {
        Self::from_meshes(spine.vertebrae.iter().map(|v| (v.level, &v.mesh)))
    }

    pub fn from_meshes<'a>(meshes: impl IntoIterator<Item = (u8, &'a TriMesh)>) -> Self {
        let mut tris = Vec::new();
        let mut levels = Vec::new();
        for (level, mesh) in meshes {
            for f in 0..mesh.faces.len() {
                tris.push(mesh.triangle(f));
                levels.push(level);
            }
        }
        Self {
            bvh: Bvh::new(tris),
            levels,
        }
    }

    /// Nearest surface hit along the ray with its level.
    pub fn cast(&self, origin: &Vec3, dir: &Vec3, t_min: f64, t_max: f64) -> Option<(RayHit, u8)> {
        self.bvh
            .intersect(origin, dir, t_min, t_max)
            .map(|h| (h, self.levels[h.triangle]))
    }

    pub fn bvh(&self) -> &Bvh {
        &self.bvh
    }

    /// Simulates one frame: every scanline is traced from the apex and only
    /// its first bone hit is marked; everything behind it is shadowed.
    pub fn simulate_frame(&self, pose: &RigidTransform, probe: &ProbeModel) -> SegmentationFrame {
        let (w, h) = (probe.n_scanlines, probe.samples_per_ray);
        let mut frame = SegmentationFrame {
            width: w,
            height: h,
            mask: vec![0; w * h],
            gt_level: vec![0; w * h],
            pose: *pose,
        };
        let origin = pose.translation;
        for col in 0..w {
            let dir = pose.apply_vector(&probe.scanline_direction(col));
            if let Some((hit, level)) = self.cast(&origin, &dir, probe.aperture_radius, probe.imaging_depth) {
                let row = probe.row_of_depth(hit.t);
                frame.mask[row * w + col] = 1;
                frame.gt_level[row * w + col] = level;
            }
        }
        frame
    }
}

/// Ray-space binary mask: column = scanline, row = depth sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationFrame {
    pub width: usize,
    pub height: usize,
    /// Row-major, 1 = bone.
    pub mask: Vec<u8>,
    /// Row-major ground-truth level (0 = background); evaluation only.
    pub gt_level: Vec<u8>,
    /// Probe pose (probe frame to world).
    pub pose: RigidTransform,
}

impl SegmentationFrame {
    pub fn is_marked(&self, col: usize, row: usize) -> bool {
        self.mask[row * self.width + col] != 0
    }

    /// `(col, row)` of marked pixels, column-major.
    pub fn marked_pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.width).flat_map(move |c| {
            (0..self.height)
                .filter(move |&r| self.is_marked(c, r))
                .map(move |r| (c, r))
        })
    }

    pub fn marked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m != 0).count()
    }

    /// Contiguous runs of marked pixels in one column as `(start, len)`.
    pub fn column_runs(&self, col: usize) -> Vec<(usize, usize)> {
        let mut runs = Vec::new();
        let mut r = 0;
        while r < self.height {
            if self.is_marked(col, r) {
                let start = r;
                while r < self.height && self.is_marked(col, r) {
                    r += 1;
                }
                runs.push((start, r - start));
            } else {
                r += 1;
            }
        }
        runs
    }

    pub fn levels_present(&self) -> Vec<u8> {
        let mut l: Vec<u8> = self.gt_level.iter().copied().filter(|&x| x != 0).collect();
        l.sort_unstable();
        l.dedup();
        l
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub frames: Vec<SegmentationFrame>,
    pub plan: TrajectoryPlan,
    pub probe: ProbeModel,
}

pub fn simulate_frame(spine: &SpineModel, pose: &RigidTransform, probe: &ProbeModel) -> SegmentationFrame {
    SpineScene::new(spine).simulate_frame(pose, probe)
}

/// Frames are simulated in parallel and collected in pose order.
pub fn acquire_sweep_in(scene: &SpineScene, plan: &TrajectoryPlan, probe: &ProbeModel) -> Result<Sweep> {
    probe.validate()?;
    let frames = plan
        .poses
        .par_iter()
        .map(|pose| scene.simulate_frame(pose, probe))
        .collect();
    Ok(Sweep {
        frames,
        plan: plan.clone(),
        probe: *probe,
    })
}

pub fn acquire_sweep(spine: &SpineModel, plan: &TrajectoryPlan, probe: &ProbeModel) -> Result<Sweep> {
    acquire_sweep_in(&SpineScene::new(spine), plan, probe)
}

/// Two unit vectors completing `d` to a right-handed orthonormal frame.
pub fn orthonormal_basis(d: &Vec3) -> (Vec3, Vec3) {
    let helper = if d.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let u = d.cross(&helper).normalize();
    let v = d.cross(&u);
    (u, v)
}

/// Parallel-ray first-hit surface of the scene, as seen from `direction`.
/// Rays sit on a square grid (cell centres) covering the scene bounds.
pub fn raycast_scene(scene: &SpineScene, direction: &Vec3, grid_spacing: f64) -> Result<LabeledPointCloud> {
    if !(grid_spacing > 0.0) {
        return Err(Error::invalid(format!("grid spacing must be positive, got {grid_spacing}")));
    }
    let n = direction.norm();
    if !(n > 0.0 && n.is_finite()) {
        return Err(Error::invalid("ray direction must be a non-zero finite vector"));
    }
    let d = direction / n;
    let Some(bounds) = scene.bvh().bounds() else {
        return Err(Error::Empty("scene"));
    };
    let (u, v) = orthonormal_basis(&d);
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for k in 0..8 {
        let c = Vec3::new(
            if k & 1 == 0 { bounds.min.x } else { bounds.max.x },
            if k & 2 == 0 { bounds.min.y } else { bounds.max.y },
            if k & 4 == 0 { bounds.min.z } else { bounds.max.z },
        );
        let p = Vec3::new(c.dot(&u), c.dot(&v), c.dot(&d));
        lo = lo.inf(&p);
        hi = hi.sup(&p);
    }
    let nu = ((hi.x - lo.x) / grid_spacing).ceil().max(1.0) as usize;
    let nv = ((hi.y - lo.y) / grid_spacing).ceil().max(1.0) as usize;
    let depth = hi.z - lo.z + 2.0;
    let rows: Vec<Vec<(Vec3, u8)>> = (0..nv)
        .into_par_iter()
        .map(|j| {
            let b = lo.y + (j as f64 + 0.5) * grid_spacing;
            (0..nu)
                .filter_map(|i| {
                    let a = lo.x + (i as f64 + 0.5) * grid_spacing;
                    let origin = u * a + v * b + d * (lo.z - 1.0);
                    scene
                        .cast(&origin, &d, 0.0, depth)
                        .map(|(h, level)| (origin + d * h.t, level))
                })
                .collect()
        })
        .collect();
    let (points, labels): (Vec<Vec3>, Vec<u8>) = rows.into_iter().flatten().unzip();
    if points.is_empty() {
        return Err(Error::Empty("ray-cast surface"));
    }
    LabeledPointCloud::new(points, labels)
}

pub fn raycast_partial_surface(spine: &SpineModel, direction: &Vec3, grid_spacing: f64) -> Result<LabeledPointCloud> {
    raycast_scene(&SpineScene::new(spine), direction, grid_spacing)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acquisition::trajectory::plan_linear;

    fn sphere_scene(center: Vec3, r: f64) -> (SpineScene, TriMesh) {
        let m = TriMesh::icosphere(center, r, 4);
        (SpineScene::from_meshes([(1u8, &m)]), m)
    }

    fn down() -> RigidTransform {
        RigidTransform::rot_x(std::f64::consts::PI)
    }

    #[test]
    fn pointing_away_gives_empty_mask() {
        let (scene, _) = sphere_scene(Vec3::new(0.0, 0.0, -50.0), 5.0);
        let f = scene.simulate_frame(&RigidTransform::identity(), &ProbeModel::default());
        assert_eq!(f.marked_count(), 0);
        let f = scene.simulate_frame(&down(), &ProbeModel::default());
        assert!(f.marked_count() > 0);
    }

    #[test]
    fn central_ray_hits_sphere_at_analytic_depth() {
        let probe = ProbeModel {
            n_scanlines: 129,
            ..Default::default()
        };
        // sphere of radius 1 centred 50 mm below the apex
        let (scene, _) = sphere_scene(Vec3::new(0.0, 0.0, -50.0), 1.0);
        let f = scene.simulate_frame(&down(), &probe);
        let runs = f.column_runs(64);
        let expected = (49.0 / probe.imaging_depth * probe.samples_per_ray as f64).round() as usize;
        assert_eq!(runs.len(), 1);
        assert!(runs[0].0.abs_diff(expected) <= 1);
        assert_eq!(f.levels_present(), vec![1]);
    }

    #[test]
    fn near_plate_shadows_far_plate() {
        let plate = |z: f64| {
            TriMesh::new(
                vec![
                    Vec3::new(-100.0, -100.0, z),
                    Vec3::new(100.0, -100.0, z),
                    Vec3::new(100.0, 100.0, z),
                    Vec3::new(-100.0, 100.0, z),
                ],
                vec![[0, 1, 2], [0, 2, 3]],
            )
            .unwrap()
        };
        let (a, b) = (plate(-30.0), plate(-60.0));
        let scene = SpineScene::from_meshes([(2u8, &b), (1u8, &a)]);
        let probe = ProbeModel {
            n_scanlines: 3,
            ..Default::default()
        };
        let f = scene.simulate_frame(&down(), &probe);
        let runs = f.column_runs(1);
        assert_eq!(runs, vec![(probe.row_of_depth(30.0), 1)]);
        assert_eq!(f.levels_present(), vec![1]);
    }

    #[test]
    fn sweep_is_deterministic_and_ordered() {
        let (scene, _) = sphere_scene(Vec3::new(0.0, 0.0, -60.0), 10.0);
        let start = down().with_translation(Vec3::new(0.0, -20.0, 0.0));
        let end = down().with_translation(Vec3::new(0.0, 20.0, 0.0));
        let plan = plan_linear(&start, &end, 4.0).unwrap();
        let probe = ProbeModel::default();
        let a = acquire_sweep_in(&scene, &plan, &probe).unwrap();
        assert_eq!(a, acquire_sweep_in(&scene, &plan, &probe).unwrap());
        assert_eq!(a.frames.len(), plan.poses.len());
        for (f, p) in a.frames.iter().zip(&plan.poses) {
            assert_eq!(&f.pose, p);
        }
    }

    #[test]
    fn raycast_sphere_returns_near_hemisphere() {
        let c = Vec3::new(3.0, -2.0, 7.0);
        let (scene, mesh) = sphere_scene(c, 10.0);
        let d = Vec3::new(1.0, 2.0, -2.0).normalize();
        let cloud = raycast_scene(&scene, &d, 0.5).unwrap();
        for p in &cloud.points {
            assert!((p - c).dot(&d) <= 1e-6);
            assert!(crate::mesh::distance_to_mesh(p, &mesh) < 1e-6);
        }
        let fine = raycast_scene(&scene, &d, 0.25).unwrap();
        let ratio = fine.len() as f64 / cloud.len() as f64;
        assert!((ratio - 4.0).abs() < 0.8, "ratio {ratio}");
    }

    #[test]
    fn raycast_rejects_bad_input() {
        let (scene, _) = sphere_scene(Vec3::zeros(), 1.0);
        assert!(raycast_scene(&scene, &Vec3::zeros(), 1.0).is_err());
        assert!(raycast_scene(&scene, &Vec3::z(), 0.0).is_err());
    }
}
