//! Sweep compounding, isosurface extraction and surface sampling.

pub mod fps;
pub mod marching_cubes;

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acquisition::Sweep;
use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::geometry::{CalibrationChain, Vec3};

pub use fps::{farthest_point_indices, farthest_point_sample};
pub use marching_cubes::marching_cubes;

/// Padding (voxels) kept around the marked region so the isosurface closes.
const PAD: i64 = 2;
/// Refuse to allocate volumes larger than this many voxels.
const MAX_VOXELS: usize = 400_000_000;

/// Scalar volume with voxel centres at `origin + spacing * (i, j, k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    pub origin: Vec3,
    pub spacing: f64,
    pub dims: [usize; 3],
    pub values: Vec<f32>,
}

impl LabelVolume {
    pub fn zeros(origin: Vec3, spacing: f64, dims: [usize; 3]) -> Result<Self> {
        if !(spacing > 0.0) {
            return Err(Error::invalid(format!("voxel spacing must be positive, got {spacing}")));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::invalid("volume dimensions must be at least 1"));
        }
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n <= MAX_VOXELS)
            .ok_or_else(|| Error::invalid(format!("volume {dims:?} is too large")))?;
        Ok(Self {
            origin,
            spacing,
            dims,
            values: vec![0.0; n],
        })
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.values[self.index(x, y, z)]
    }

    pub fn voxel_center(&self, x: usize, y: usize, z: usize) -> Vec3 {
        self.origin + Vec3::new(x as f64, y as f64, z as f64) * self.spacing
    }

    /// Voxel containing `p` (nearest centre), if inside the grid.
    pub fn voxel_of(&self, p: &Vec3) -> Option<[usize; 3]> {
        let mut out = [0usize; 3];
        for a in 0..3 {
            let i = ((p[a] - self.origin[a]) / self.spacing).round();
            if !(i >= 0.0 && (i as usize) < self.dims[a]) {
                return None;
            }
            out[a] = i as usize;
        }
        Some(out)
    }

    pub fn count_above(&self, level: f32) -> usize {
        self.values.iter().filter(|&&v| v > level).count()
    }

    /// Single pass of a 3x3x3 mean filter; voxels outside the grid count as 0.
    pub fn box_filtered(&self) -> LabelVolume {
        let [nx, ny, nz] = self.dims;
        let pass = |src: &[f32], axis: usize| -> Vec<f32> {
            let stride = [1, nx, nx * ny][axis];
            let n = self.dims[axis];
            let mut out = vec![0.0f32; src.len()];
            for z in 0..nz {
                for y in 0..ny {
                    for x in 0..nx {
                        let i = x + nx * (y + ny * z);
                        let c = [x, y, z][axis];
                        let mut s = src[i];
                        if c > 0 {
                            s += src[i - stride];
                        }
                        if c + 1 < n {
                            s += src[i + stride];
                        }
                        out[i] = s / 3.0;
                    }
                }
            }
            out
        };
        let v = pass(&pass(&pass(&self.values, 0), 1), 2);
        LabelVolume {
            values: v,
            ..self.clone()
        }
    }

    pub fn write(&self, raw_path: &Path, header_path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(self.values.len() * 4);
        for v in &self.values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(dir) = raw_path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(raw_path, bytes).map_err(|e| Error::io(raw_path, e))?;
        let header = VolumeHeader {
            origin: [self.origin.x, self.origin.y, self.origin.z],
            spacing: self.spacing,
            dims: self.dims,
            dtype: "float32le".into(),
            data: raw_path
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
        };
        let text = serde_json::to_string_pretty(&header).expect("header serializes");
        std::fs::write(header_path, text).map_err(|e| Error::io(header_path, e))
    }

    /// Reads a header written by [`LabelVolume::write`]; the raw file is
    /// resolved relative to the header's directory.
    pub fn read(header_path: &Path) -> Result<LabelVolume> {
        let text = std::fs::read_to_string(header_path).map_err(|e| Error::io(header_path, e))?;
        let h: VolumeHeader = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: header_path.to_path_buf(),
            source,
        })?;
        if h.dtype != "float32le" {
            return Err(Error::Config(format!("unsupported volume dtype {}", h.dtype)));
        }
        let raw_path = header_path.with_file_name(&h.data);
        let bytes = std::fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
        let mut vol = LabelVolume::zeros(Vec3::from(h.origin), h.spacing, h.dims)?;
        if bytes.len() != vol.values.len() * 4 {
            return Err(Error::Config(format!(
                "{}: expected {} bytes, found {}",
                raw_path.display(),
                vol.values.len() * 4,
                bytes.len()
            )));
        }
        for (v, b) in vol.values.iter_mut().zip(bytes.chunks_exact(4)) {
            *v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        }
        Ok(vol)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct VolumeHeader {
    origin: [f64; 3],
    spacing: f64,
    dims: [usize; 3],
    dtype: String,
    data: String,
}

/// World positions of every marked pixel of every frame, frame by frame.
pub fn marked_world_points(sweep: &Sweep, chain: &CalibrationChain) -> Vec<Vec<Vec3>> {
    sweep
        .frames
        .par_iter()
        .map(|frame| {
            let c = chain.with_probe_pose(&frame.pose);
            frame
                .marked_pixels()
                .map(|(col, row)| {
                    let ip = sweep.probe.ray_pixel_to_image_point(col, row, chain.pixel_spacing);
                    c.pixel_to_world(&ip)
                })
                .collect()
        })
        .collect()
}

/// Nearest-voxel binary splatting with max fusion. The grid is aligned to
/// multiples of `spacing` and padded around the marked points, so it does not
/// depend on frame order.
pub fn compound_points(frames: &[Vec<Vec3>], spacing: f64) -> Result<LabelVolume> {
    if !(spacing > 0.0) {
        return Err(Error::invalid(format!("voxel spacing must be positive, got {spacing}")));
    }
    let mut lo = [i64::MAX; 3];
    let mut hi = [i64::MIN; 3];
    for p in frames.iter().flatten() {
        for a in 0..3 {
            let i = (p[a] / spacing).round() as i64;
            lo[a] = lo[a].min(i);
            hi[a] = hi[a].max(i);
        }
    }
    if lo[0] > hi[0] {
        return LabelVolume::zeros(Vec3::zeros(), spacing, [1, 1, 1]);
    }
    let dims = [0, 1, 2].map(|a| (hi[a] - lo[a] + 1 + 2 * PAD) as usize);
    let origin = Vec3::new(
        (lo[0] - PAD) as f64 * spacing,
        (lo[1] - PAD) as f64 * spacing,
        (lo[2] - PAD) as f64 * spacing,
    );
    let mut vol = LabelVolume::zeros(origin, spacing, dims)?;
    for p in frames.iter().flatten() {
        let v = [0, 1, 2].map(|a| ((p[a] / spacing).round() as i64 - lo[a] + PAD) as usize);
        let i = vol.index(v[0], v[1], v[2]);
        vol.values[i] = vol.values[i].max(1.0);
    }
    Ok(vol)
}

/// Fuses a sweep into a label volume. `chain` supplies the base, mount and
/// image calibration; each frame's probe pose replaces its end-effector pose.
pub fn compound(sweep: &Sweep, chain: &CalibrationChain, spacing: f64) -> Result<LabelVolume> {
    if !(spacing > 0.0) {
        return Err(Error::invalid(format!("voxel spacing must be positive, got {spacing}")));
    }
    if sweep.frames.is_empty() {
        return Err(Error::Empty("sweep"));
    }
    compound_points(&marked_world_points(sweep, chain), spacing)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SurfaceOptions {
    /// Voxel size in mm.
    pub spacing: f64,
    /// Number of FPS points.
    pub n_points: usize,
    pub iso: f64,
    /// Apply one box-filter pass before meshing.
    pub smooth: bool,
    pub seed: u64,
}

impl Default for SurfaceOptions {
    fn default() -> Self {
        Self {
            spacing: 1.0,
            n_points: 4096,
            iso: 0.5,
            smooth: false,
            seed: 0,
        }
    }
}

/// Isosurface vertices of `volume`, downsampled by FPS. When the mesh has
/// fewer vertices than requested all of them are returned (in FPS order).
pub fn volume_surface_cloud(volume: &LabelVolume, opts: &SurfaceOptions) -> Result<PointCloud> {
    if !(opts.iso > 0.0 && opts.iso < 1.0) {
        return Err(Error::invalid(format!("iso level must be in (0, 1), got {}", opts.iso)));
    }
    let smoothed;
    let vol = if opts.smooth {
        smoothed = volume.box_filtered();
        &smoothed
    } else {
        volume
    };
    let mesh = marching_cubes(vol, opts.iso);
    if mesh.vertices.is_empty() {
        return Err(Error::Empty("isosurface"));
    }
    let n = opts.n_points.min(mesh.vertices.len());
    if n < opts.n_points {
        log::warn!(
            "isosurface has {} vertices, fewer than the {} requested",
            mesh.vertices.len(),
            opts.n_points
        );
    }
    let idx = farthest_point_indices(&mesh.vertices, n, opts.seed)?;
    PointCloud::new(idx.into_iter().map(|i| mesh.vertices[i]).collect())
}

/// compound → marching cubes → FPS.
pub fn surface_cloud(sweep: &Sweep, chain: &CalibrationChain, opts: &SurfaceOptions) -> Result<PointCloud> {
    let vol = compound(sweep, chain, opts.spacing)?;
    volume_surface_cloud(&vol, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn ball(radius_vox: f64, n: usize) -> LabelVolume {
        let mut v = LabelVolume::zeros(Vec3::zeros(), 1.0, [n, n, n]).unwrap();
        let c = (n as f64 - 1.0) / 2.0;
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    let d = Vec3::new(x as f64 - c, y as f64 - c, z as f64 - c).norm();
                    let i = v.index(x, y, z);
                    // signed-distance ramp so interpolation lands on the sphere
                    v.values[i] = (0.5 - (d - radius_vox) / 2.0).clamp(0.0, 1.0) as f32;
                }
            }
        }
        v
    }

    #[test]
    fn ball_area_and_topology() {
        let mesh = marching_cubes(&ball(10.0, 27), 0.5);
        let expected = 4.0 * PI * 100.0;
        assert!((mesh.area() - expected).abs() / expected < 0.05, "area {}", mesh.area());
        assert_eq!(mesh.euler_characteristic(), 2);
        assert!(mesh.is_watertight());
        assert!(mesh.is_consistently_oriented());
        assert!(mesh.signed_volume() > 0.0, "normals point outward");
    }

    #[test]
    fn binary_ball_is_closed() {
        let mut v = ball(6.0, 17);
        for x in &mut v.values {
            *x = if *x > 0.5 { 1.0 } else { 0.0 };
        }
        let mesh = marching_cubes(&v, 0.5);
        assert!(mesh.is_watertight());
        assert_eq!(mesh.euler_characteristic(), 2);
        assert!(mesh.min_face_area() > 0.0);
    }

    /// Every 2x2x2 binary configuration embedded in a zero border must yield
    /// a closed, consistently oriented surface enclosing positive volume.
    #[test]
    fn all_cube_cases_produce_closed_surfaces() {
        for case in 1..255usize {
            let mut v = LabelVolume::zeros(Vec3::zeros(), 1.0, [4, 4, 4]).unwrap();
            for c in 0..8 {
                if case & (1 << c) != 0 {
                    let o = [[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0], [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]][c];
                    let i = v.index(1 + o[0], 1 + o[1], 1 + o[2]);
                    v.values[i] = 1.0;
                }
            }
            let mesh = marching_cubes(&v, 0.5);
            assert!(mesh.is_watertight(), "case {case}");
            assert!(mesh.is_consistently_oriented(), "case {case}");
            assert!(mesh.signed_volume() > 0.0, "case {case}");
        }
    }

    #[test]
    fn vertices_sit_near_the_iso_crossing() {
        let v = ball(7.0, 21);
        let mesh = marching_cubes(&v, 0.5);
        let c = 10.0;
        for p in &mesh.vertices {
            let d = (p - Vec3::new(c, c, c)).norm();
            assert!((d - 7.0).abs() < 1.0, "vertex at radius {d}");
        }
    }

    #[test]
    fn empty_volume_gives_empty_mesh() {
        let v = LabelVolume::zeros(Vec3::zeros(), 1.0, [5, 5, 5]).unwrap();
        assert!(marching_cubes(&v, 0.5).is_empty());
        let mut full = v.clone();
        full.values.iter_mut().for_each(|x| *x = 1.0);
        assert!(marching_cubes(&full, 0.5).is_empty());
    }

    #[test]
    fn single_point_marks_one_voxel() {
        let p = Vec3::new(3.3, -7.9, 12.2);
        let vol = compound_points(&[vec![p]], 0.5).unwrap();
        assert_eq!(vol.count_above(0.0), 1);
        let [x, y, z] = vol.voxel_of(&p).unwrap();
        assert_eq!(vol.get(x, y, z), 1.0);
        assert!((vol.voxel_center(x, y, z) - p).amax() <= 0.25 + 1e-12);
    }

    #[test]
    fn overlapping_frames_take_max() {
        let p = Vec3::new(1.0, 2.0, 3.0);
        let vol = compound_points(&[vec![p], vec![p + Vec3::repeat(0.1)]], 1.0).unwrap();
        assert_eq!(vol.count_above(0.0), 1);
        assert_eq!(vol.values.iter().cloned().fold(0.0f32, f32::max), 1.0);
    }

    #[test]
    fn frame_order_does_not_matter() {
        let frames: Vec<Vec<Vec3>> = (0..6)
            .map(|k| (0..20).map(|i| Vec3::new(i as f64 * 0.7, k as f64 * 1.3, (i * k) as f64 * 0.1)).collect())
            .collect();
        let a = compound_points(&frames, 0.8).unwrap();
        let mut rev = frames.clone();
        rev.reverse();
        rev.swap(1, 4);
        assert_eq!(a, compound_points(&rev, 0.8).unwrap());
    }

    #[test]
    fn empty_frames_give_zero_volume() {
        let vol = compound_points(&[vec![], vec![]], 1.0).unwrap();
        assert_eq!(vol.count_above(0.0), 0);
        assert!(compound_points(&[], 0.0).is_err());
    }

    #[test]
    fn box_filter_preserves_mass_inside() {
        let mut v = LabelVolume::zeros(Vec3::zeros(), 1.0, [7, 7, 7]).unwrap();
        let i = v.index(3, 3, 3);
        v.values[i] = 27.0;
        let f = v.box_filtered();
        let s: f32 = f.values.iter().sum();
        assert!((s - 27.0).abs() < 1e-4);
        assert!((f.get(2, 4, 3) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn volume_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let v = ball(3.0, 9);
        v.write(&dir.path().join("v.raw"), &dir.path().join("v.json")).unwrap();
        assert_eq!(LabelVolume::read(&dir.path().join("v.json")).unwrap(), v);
    }
}
