//! Synthetic lumbar spine phantom and labeled-mesh ingestion.
//!
//! A vertebra is the union of an ellipsoidal body, a posterior spinous
//! process and two lateral transverse processes (capsules). The union is
//! evaluated as a signed distance field on a voxel grid and meshed with
//! marching cubes, which gives a closed surface without any CSG.
//!
//! World frame: `+y` runs cranio-caudally from L1 towards L5, `+x` is
//! lateral and `+z` posterior (towards the skin).

use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cloud::{LabeledPointCloud, LEVELS};
use crate::compounding::{marching_cubes, LabelVolume};
use crate::error::{Error, Result};
use crate::geometry::{centroid, Vec3};
use crate::mesh::TriMesh;
use crate::ply;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpineParams {
    /// Vertebral body semi-axes (lateral, cranio-caudal, antero-posterior), mm.
    pub body_radii: [f64; 3],
    /// Length of the spinous process beyond the posterior body surface, mm.
    pub spinous_length: f64,
    pub spinous_radius: f64,
    /// Reach of each transverse process beyond the lateral body surface, mm.
    pub transverse_length: f64,
    pub transverse_radius: f64,
    /// Posterior offset of the transverse processes from the body's back, mm.
    pub transverse_offset: f64,
    /// Free space between adjacent bodies along the axis, mm.
    pub gap: f64,
    /// Relative scale jitter per vertebra, drawn uniformly in `[-j, j]`.
    pub jitter: f64,
    /// Voxel size used to mesh the union, mm.
    pub voxel: f64,
}

impl Default for SpineParams {
    fn default() -> Self {
        Self {
            body_radii: [22.0, 13.0, 16.0],
            spinous_length: 30.0,
            spinous_radius: 5.0,
            transverse_length: 28.0,
            transverse_radius: 4.5,
            transverse_offset: 8.0,
            gap: 4.0,
            jitter: 0.1,
            voxel: 1.0,
        }
    }
}

impl SpineParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("body radius", self.body_radii[0]),
            ("body radius", self.body_radii[1]),
            ("body radius", self.body_radii[2]),
            ("spinous length", self.spinous_length),
            ("spinous radius", self.spinous_radius),
            ("transverse length", self.transverse_length),
            ("transverse radius", self.transverse_radius),
            ("gap", self.gap),
            ("voxel", self.voxel),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..0.5).contains(&self.jitter) {
            return Err(Error::invalid(format!("jitter must be in [0, 0.5), got {}", self.jitter)));
        }
        if !(self.transverse_offset >= 0.0) {
            return Err(Error::invalid("transverse offset must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vertebra {
    pub level: u8,
    pub mesh: TriMesh,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpineModel {
    /// Ordered L1..L5.
    pub vertebrae: Vec<Vertebra>,
    /// Unit cranio-caudal axis pointing from L1 to L5.
    pub axis: Vec3,
    pub origin: Vec3,
}

impl SpineModel {
    /// Checks level set, ordering along the axis and separation of neighbours.
    pub fn validate(&self) -> Result<()> {
        let levels: Vec<u8> = self.vertebrae.iter().map(|v| v.level).collect();
        if levels != (1..=LEVELS).collect::<Vec<_>>() {
            return Err(Error::invalid(format!("expected levels 1..=5 in order, got {levels:?}")));
        }
        let proj: Vec<f64> = self
            .vertebrae
            .iter()
            .map(|v| v.mesh.surface_centroid().dot(&self.axis))
            .collect();
        if proj.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("vertebra centroids are not increasing along the axis"));
        }
        Ok(())
    }

    pub fn mesh(&self, level: u8) -> Option<&TriMesh> {
        self.vertebrae.iter().find(|v| v.level == level).map(|v| &v.mesh)
    }

    pub fn bounding_box(&self) -> (Vec3, Vec3) {
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for v in &self.vertebrae {
            if let Some((a, b)) = v.mesh.bounding_box() {
                lo = lo.inf(&a);
                hi = hi.sup(&b);
            }
        }
        (lo, hi)
    }

    /// Extent of the spine along its axis as (min, max) projections.
    pub fn axial_extent(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for v in &self.vertebrae {
            for p in &v.mesh.vertices {
                let s = p.dot(&self.axis);
                lo = lo.min(s);
                hi = hi.max(s);
            }
        }
        (lo, hi)
    }

    /// Area-uniform surface samples of every level, `n_per_level` each.
    pub fn sample_labeled(&self, n_per_level: usize, seed: u64) -> Result<LabeledPointCloud> {
        let mut points = Vec::new();
        let mut labels = Vec::new();
        for v in &self.vertebrae {
            let pts = sample_surface(&v.mesh, n_per_level, seed.wrapping_add(v.level as u64))?;
            labels.extend(std::iter::repeat(v.level).take(pts.len()));
            points.extend(pts);
        }
        LabeledPointCloud::new(points, labels)
    }

    pub fn write_meshes(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        self.vertebrae
            .iter()
            .map(|v| {
                let p = dir.join(format!("L{}.ply", v.level));
                ply::write_mesh(&p, &v.mesh)?;
                Ok(p)
            })
            .collect()
    }
}

/// Signed distance to an axis-aligned ellipsoid (first-order estimate, exact
/// on the surface).
fn sd_ellipsoid(p: &Vec3, r: &Vec3) -> f64 {
    let k0 = p.component_div(r).norm();
    let k1 = p.component_div(&r.component_mul(r)).norm();
    if k1 == 0.0 {
        return -r.min();
    }
    k0 * (k0 - 1.0) / k1
}

fn sd_capsule(p: &Vec3, a: &Vec3, b: &Vec3, radius: f64) -> f64 {
    let ab = b - a;
    let t = ((p - a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
    (p - (a + ab * t)).norm() - radius
}

/// Primitive shapes of one vertebra, relative to its body centre.
#[derive(Debug, Clone, Copy)]
struct VertebraShape {
    radii: Vec3,
    capsules: [(Vec3, Vec3, f64); 3],
}

impl VertebraShape {
    fn new(p: &SpineParams, scale: f64, spinous_factor: f64, transverse_factor: f64) -> Self {
        let r = Vec3::from(p.body_radii) * scale;
        let spinous_tip = r.z + p.spinous_length * scale * spinous_factor;
        let tz = r.z + p.transverse_offset * scale;
        let tx = r.x + p.transverse_length * scale * transverse_factor;
        let tr = p.transverse_radius * scale;
        Self {
            radii: r,
            capsules: [
                (Vec3::new(0.0, 0.0, 0.5 * r.z), Vec3::new(0.0, 0.0, spinous_tip), p.spinous_radius * scale),
                (Vec3::new(0.0, 0.0, tz), Vec3::new(tx, 0.0, tz), tr),
                (Vec3::new(0.0, 0.0, tz), Vec3::new(-tx, 0.0, tz), tr),
            ],
        }
    }

    fn sdf(&self, p: &Vec3) -> f64 {
        self.capsules
            .iter()
            .map(|(a, b, r)| sd_capsule(p, a, b, *r))
            .fold(sd_ellipsoid(p, &self.radii), f64::min)
    }

    /// Half extents of the union's bounding box.
    fn half_extent(&self) -> Vec3 {
        let mut h = self.radii;
        for (a, b, r) in &self.capsules {
            for e in [a, b] {
                h = h.sup(&(e.abs() + Vec3::repeat(*r)));
            }
        }
        h
    }

    /// Meshes the union on a grid symmetric about `center`.
    fn mesh(&self, center: &Vec3, voxel: f64) -> Result<TriMesh> {
        let half = self.half_extent();
        let n = half.map(|h| (h / voxel).ceil() as usize + 2);
        let dims = [2 * n.x + 1, 2 * n.y + 1, 2 * n.z + 1];
        let origin = center - Vec3::new(n.x as f64, n.y as f64, n.z as f64) * voxel;
        let mut vol = LabelVolume::zeros(origin, voxel, dims)?;
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let local = vol.voxel_center(x, y, z) - center;
                    let i = vol.index(x, y, z);
                    vol.values[i] = (0.5 - self.sdf(&local) / (4.0 * voxel)).clamp(0.0, 1.0) as f32;
                }
            }
        }
        Ok(marching_cubes(&vol, 0.5))
    }
}

/// Deterministic synthetic L1..L5 spine. L1's body centre sits at the origin
/// and bodies are stacked along `+y` with `gap` between them.
pub fn generate_synthetic_spine(params: &SpineParams, seed: u64) -> Result<SpineModel> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let j = params.jitter;
    let draw = |rng: &mut ChaCha8Rng| if j > 0.0 { 1.0 + rng.random_range(-j..=j) } else { 1.0 };
    let shapes: Vec<VertebraShape> = (0..LEVELS)
        .map(|_| {
            let s = draw(&mut rng);
            let sp = draw(&mut rng);
            let tr = draw(&mut rng);
            VertebraShape::new(params, s, sp, tr)
        })
        .collect();

    let mut centers = Vec::with_capacity(shapes.len());
    let mut y = 0.0;
    for (i, s) in shapes.iter().enumerate() {
        if i > 0 {
            y += shapes[i - 1].radii.y + params.gap + s.radii.y;
        }
        centers.push(Vec3::new(0.0, y, 0.0));
    }

    let vertebrae = shapes
        .iter()
        .zip(&centers)
        .enumerate()
        .map(|(i, (s, c))| {
            Ok(Vertebra {
                level: i as u8 + 1,
                mesh: s.mesh(c, params.voxel)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    for w in vertebrae.windows(2) {
        let (_, hi) = w[0].mesh.bounding_box().ok_or(Error::Empty("vertebra mesh"))?;
        let (lo, _) = w[1].mesh.bounding_box().ok_or(Error::Empty("vertebra mesh"))?;
        if hi.y >= lo.y {
            return Err(Error::invalid(format!(
                "L{} and L{} interpenetrate; increase the gap or shrink the processes",
                w[0].level, w[1].level
            )));
        }
    }

    let model = SpineModel {
        vertebrae,
        axis: Vec3::y(),
        origin: Vec3::zeros(),
    };
    model.validate()?;
    Ok(model)
}

/// Level encoded in a file stem such as `L3`, `l3_mesh` or `vert_3`.
fn level_from_path(path: &Path) -> Option<u8> {
    let stem = path.file_stem()?.to_string_lossy().to_ascii_lowercase();
    let bytes = stem.as_bytes();
    if let Some(pos) = stem.find('l') {
        if let Some(d) = bytes.get(pos + 1).filter(|b| b.is_ascii_digit()) {
            let l = d - b'0';
            if (1..=LEVELS).contains(&l) && !bytes.get(pos + 2).is_some_and(|b| b.is_ascii_digit()) {
                return Some(l);
            }
        }
    }
    let digits: Vec<u8> = bytes.iter().filter(|b| b.is_ascii_digit()).map(|b| b - b'0').collect();
    match digits.as_slice() {
        [l] if (1..=LEVELS).contains(l) => Some(*l),
        _ => None,
    }
}

/// Loads five vertebra meshes. Levels come from the file names (`L1`..`L5`)
/// when all five are present; otherwise they are assigned by position along
/// the spine, counting from the end nearest the first listed file.
pub fn load_labeled_meshes(paths: &[PathBuf]) -> Result<SpineModel> {
    if paths.len() != LEVELS as usize {
        return Err(Error::invalid(format!("expected 5 mesh files, got {}", paths.len())));
    }
    let meshes = paths
        .iter()
        .map(|p| {
            let m = ply::read_mesh(p)?;
            if m.faces.is_empty() {
                return Err(Error::Parse {
                    path: p.clone(),
                    line: 0,
                    message: "mesh has no faces".into(),
                });
            }
            if !m.is_watertight() {
                log::warn!("{} is not watertight", p.display());
            }
            Ok(m)
        })
        .collect::<Result<Vec<_>>>()?;
    let centroids: Vec<Vec3> = meshes.iter().map(|m| m.surface_centroid()).collect();
    let mut axis = principal_axis(&centroids);

    let named: Vec<Option<u8>> = paths.iter().map(|p| level_from_path(p)).collect();
    let mut sorted_names: Vec<u8> = named.iter().flatten().copied().collect();
    sorted_names.sort_unstable();
    let levels: Vec<u8> = if sorted_names == (1..=LEVELS).collect::<Vec<_>>() {
        let l1 = named.iter().position(|l| *l == Some(1)).unwrap();
        let l5 = named.iter().position(|l| *l == Some(LEVELS)).unwrap();
        if (centroids[l5] - centroids[l1]).dot(&axis) < 0.0 {
            axis = -axis;
        }
        named.into_iter().map(|l| l.unwrap()).collect()
    } else {
        let mean = centroid(&centroids);
        if (centroids[0] - mean).dot(&axis) > 0.0 {
            axis = -axis;
        }
        let mut order: Vec<usize> = (0..meshes.len()).collect();
        order.sort_by(|&a, &b| centroids[a].dot(&axis).total_cmp(&centroids[b].dot(&axis)));
        let mut levels = vec![0u8; meshes.len()];
        for (rank, &i) in order.iter().enumerate() {
            levels[i] = rank as u8 + 1;
        }
        levels
    };

    let mut vertebrae: Vec<Vertebra> = levels
        .into_iter()
        .zip(meshes)
        .map(|(level, mesh)| Vertebra { level, mesh })
        .collect();
    vertebrae.sort_by_key(|v| v.level);
    let origin = vertebrae[0].mesh.surface_centroid();
    let model = SpineModel { vertebrae, axis, origin };
    model.validate()?;
    Ok(model)
}

/// Unit first principal direction of a point set.
pub fn principal_axis(points: &[Vec3]) -> Vec3 {
    principal_axes(points).0.column(0).into()
}

/// Principal axes (columns, by decreasing variance) and variances.
pub fn principal_axes(points: &[Vec3]) -> (Matrix3<f64>, Vec3) {
    let c = centroid(points);
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - c;
        cov += d * d.transpose();
    }
    cov /= points.len().max(1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let axes = Matrix3::from_columns(&order.map(|i| eig.eigenvectors.column(i).into_owned()));
    let vars = Vec3::new(
        eig.eigenvalues[order[0]],
        eig.eigenvalues[order[1]],
        eig.eigenvalues[order[2]],
    );
    (axes, vars)
}

/// Area-weighted uniform samples on the surface of `mesh`.
pub fn sample_surface(mesh: &TriMesh, n: usize, seed: u64) -> Result<Vec<Vec3>> {
    if n == 0 {
        return Err(Error::invalid("sample count must be at least 1"));
    }
    if mesh.faces.is_empty() {
        return Err(Error::Empty("mesh"));
    }
    let mut cdf = Vec::with_capacity(mesh.faces.len());
    let mut total = 0.0;
    for f in 0..mesh.faces.len() {
        total += mesh.face_area(f);
        cdf.push(total);
    }
    if !(total > 0.0) {
        return Err(Error::Degenerate("mesh has zero surface area".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let r = rng.random::<f64>() * total;
            let f = cdf.partition_point(|&c| c <= r).min(cdf.len() - 1);
            let [a, b, c] = mesh.triangle(f);
            let (s, t): (f64, f64) = (rng.random(), rng.random());
            let s = s.sqrt();
            a * (1.0 - s) + b * (s * (1.0 - t)) + c * (s * t)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_spine_satisfies_invariants() {
        let spine = generate_synthetic_spine(&SpineParams::default(), 0).unwrap();
        assert_eq!(spine.vertebrae.len(), 5);
        for v in &spine.vertebrae {
            assert!(v.mesh.is_watertight(), "L{}", v.level);
            assert!(v.mesh.is_consistently_oriented());
            assert!(v.mesh.min_face_area() > 0.0);
            assert!(v.mesh.signed_volume() > 0.0);
        }
        spine.validate().unwrap();
    }

    #[test]
    fn centroid_spacing_follows_construction() {
        let p = SpineParams {
            jitter: 0.0,
            ..Default::default()
        };
        let spine = generate_synthetic_spine(&p, 0).unwrap();
        let ys: Vec<f64> = spine.vertebrae.iter().map(|v| v.mesh.surface_centroid().y).collect();
        for w in ys.windows(2) {
            let d = w[1] - w[0];
            assert!((d - (p.gap + 2.0 * p.body_radii[1])).abs() < 1e-6, "spacing {d}");
        }
    }

    #[test]
    fn generation_is_deterministic_and_seeded() {
        let p = SpineParams::default();
        let a = generate_synthetic_spine(&p, 0).unwrap();
        assert_eq!(a, generate_synthetic_spine(&p, 0).unwrap());
        let b = generate_synthetic_spine(&p, 1).unwrap();
        assert_ne!(a.vertebrae[0].mesh.vertices, b.vertebrae[0].mesh.vertices);
        b.validate().unwrap();
    }

    #[test]
    fn interpenetrating_params_rejected() {
        let p = SpineParams {
            spinous_radius: 20.0,
            gap: 0.5,
            ..Default::default()
        };
        assert!(generate_synthetic_spine(&p, 0).is_err());
        assert!(generate_synthetic_spine(&SpineParams { gap: 0.0, ..Default::default() }, 0).is_err());
    }

    #[test]
    fn sdf_primitives() {
        let r = Vec3::new(2.0, 3.0, 4.0);
        assert!(sd_ellipsoid(&Vec3::new(2.0, 0.0, 0.0), &r).abs() < 1e-12);
        assert!(sd_ellipsoid(&Vec3::zeros(), &r) < 0.0);
        assert!((sd_ellipsoid(&Vec3::new(0.0, 0.0, 5.0), &r) - 1.0).abs() < 0.3);
        let (a, b) = (Vec3::zeros(), Vec3::new(10.0, 0.0, 0.0));
        assert!((sd_capsule(&Vec3::new(5.0, 3.0, 0.0), &a, &b, 1.0) - 2.0).abs() < 1e-12);
        assert!((sd_capsule(&Vec3::new(-3.0, 0.0, 0.0), &a, &b, 1.0) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn save_and_load_round_trip_with_shuffled_order() {
        let spine = generate_synthetic_spine(&SpineParams::default(), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut paths = spine.write_meshes(dir.path()).unwrap();
        let loaded = load_labeled_meshes(&paths).unwrap();
        assert_eq!(loaded.vertebrae, spine.vertebrae);
        assert!(loaded.axis.dot(&Vec3::y()) > 0.99);
        paths.swap(0, 3);
        paths.swap(1, 4);
        assert_eq!(load_labeled_meshes(&paths).unwrap().vertebrae, spine.vertebrae);
    }

    #[test]
    fn unnamed_meshes_ordered_from_first_file() {
        let spine = generate_synthetic_spine(&SpineParams::default(), 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let names = ["c", "a", "e", "b", "d"];
        let mut paths = Vec::new();
        for (v, name) in spine.vertebrae.iter().zip(names) {
            let p = dir.path().join(format!("{name}.ply"));
            ply::write_mesh(&p, &v.mesh).unwrap();
            paths.push(p);
        }
        // L1 first, the rest shuffled
        let shuffled = vec![paths[0].clone(), paths[3].clone(), paths[1].clone(), paths[4].clone(), paths[2].clone()];
        let loaded = load_labeled_meshes(&shuffled).unwrap();
        assert_eq!(loaded.vertebrae, spine.vertebrae);
    }

    #[test]
    fn bad_face_index_names_the_face() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("L1.ply");
        std::fs::write(
            &p,
            "ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n0 0 0\n1 0 0\n0 1 0\n3 0 1 7\n",
        )
        .unwrap();
        let err = ply::read_mesh(&p).unwrap_err().to_string();
        assert!(err.contains("face 0"), "{err}");
    }

    #[test]
    fn level_names() {
        assert_eq!(level_from_path(Path::new("/x/L3.ply")), Some(3));
        assert_eq!(level_from_path(Path::new("l5_mesh.ply")), Some(5));
        assert_eq!(level_from_path(Path::new("vert_2.ply")), Some(2));
        assert_eq!(level_from_path(Path::new("mesh.ply")), None);
        assert_eq!(level_from_path(Path::new("L12.ply")), None);
    }

    fn single_triangle() -> TriMesh {
        let s = 2f64.sqrt();
        TriMesh::new(
            vec![Vec3::zeros(), Vec3::new(s, 0.0, 0.0), Vec3::new(0.0, s, 0.0)],
            vec![[0, 1, 2]],
        )
        .unwrap()
    }

    #[test]
    fn samples_stay_inside_triangle() {
        let m = single_triangle();
        assert!((m.area() - 1.0).abs() < 1e-12);
        for p in sample_surface(&m, 1000, 5).unwrap() {
            assert!(p.x >= 0.0 && p.y >= 0.0 && p.z == 0.0);
            assert!(p.x + p.y <= 2f64.sqrt() + 1e-12);
        }
    }

    #[test]
    fn samples_follow_area_weights() {
        // areas 1 and 3
        let m = TriMesh::new(
            vec![
                Vec3::zeros(),
                Vec3::new(2.0, 0.0, 0.0),
                Vec3::new(0.0, 1.0, 0.0),
                Vec3::new(10.0, 0.0, 0.0),
                Vec3::new(16.0, 0.0, 0.0),
                Vec3::new(10.0, 1.0, 0.0),
            ],
            vec![[0, 1, 2], [3, 4, 5]],
        )
        .unwrap();
        let pts = sample_surface(&m, 1000, 11).unwrap();
        let first = pts.iter().filter(|p| p.x < 5.0).count() as f64;
        let sigma = (1000.0 * 0.25 * 0.75f64).sqrt();
        assert!((first - 250.0).abs() < 4.0 * sigma, "{first}");
    }

    #[test]
    fn sampling_is_deterministic_and_rejects_empty() {
        let m = single_triangle();
        assert_eq!(sample_surface(&m, 50, 1).unwrap(), sample_surface(&m, 50, 1).unwrap());
        assert!(sample_surface(&TriMesh::default(), 5, 0).is_err());
        assert!(sample_surface(&m, 0, 0).is_err());
    }
}
