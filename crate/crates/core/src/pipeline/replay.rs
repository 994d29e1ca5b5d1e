//! Offline replay: completed shapes projected into every recorded frame.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::acquisition::Sweep;
use crate::completion::CompletionResult;
use crate::error::{Error, Result};
use crate::geometry::ImagePoint;

/// Half-thickness of the slab around the image plane, mm.
pub const SLAB_MM: f64 = 1.0;

/// One overlay point in scan-converted image pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverlayPoint {
    pub pixel: ImagePoint,
    pub level: u8,
    /// Signed distance from the image plane, mm.
    pub offset: f64,
}

/// Completed points within the slab of frame `index` and inside the image.
pub fn frame_overlay(sweep: &Sweep, index: usize, results: &[CompletionResult]) -> Vec<OverlayPoint> {
    let probe = &sweep.probe;
    let chain = probe.default_chain().with_probe_pose(&sweep.frames[index].pose);
    let (sx, sy) = chain.pixel_spacing;
    let width = 2.0 * probe.image_half_width() / sx;
    let height = probe.imaging_depth / sy;
    let mut out = Vec::new();
    for r in results {
        for p in &r.points {
            let (px, off) = chain.world_to_pixel(p);
            let inside = px.u >= 0.0 && px.u <= width && px.v >= 0.0 && px.v <= height;
            if off.abs() <= SLAB_MM && inside {
                out.push(OverlayPoint {
                    pixel: px,
                    level: r.level,
                    offset: off,
                });
            }
        }
    }
    out
}

/// Writes `frame_<i>.txt` for every frame: one `u v level` line per overlay
/// point, empty when the plane misses every completion.
pub fn export_replay(dir: &Path, sweep: &Sweep, results: &[CompletionResult]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::with_capacity(sweep.frames.len());
    for i in 0..sweep.frames.len() {
        let mut text = String::new();
        for o in frame_overlay(sweep, i, results) {
            let _ = writeln!(text, "{} {} {}", o.pixel.u, o.pixel.v, o.level);
        }
        let path = dir.join(format!("frame_{i:05}.txt"));
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        files.push(path);
    }
    Ok(files)
}

/// Parses an overlay file back into `(pixel, level)` pairs.
pub fn read_overlay(path: &Path) -> Result<Vec<(ImagePoint, u8)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let bad = |m: &str| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                message: m.into(),
            };
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 3 {
                return Err(bad("expected `u v level`"));
            }
            let u = f[0].parse().map_err(|_| bad("bad u"))?;
            let v = f[1].parse().map_err(|_| bad("bad v"))?;
            let level = f[2].parse().map_err(|_| bad("bad level"))?;
            Ok((ImagePoint::new(u, v), level))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acquisition::{acquire_sweep_in, plan_linear, SpineScene, TrajectoryKind};
    use crate::completion::{BackendKind, Diagnostics};
    use crate::geometry::{RigidTransform, Vec3};
    use crate::mesh::TriMesh;
    use crate::spatial::KdTree;

    fn setup() -> (Sweep, Vec<CompletionResult>) {
        let ball = TriMesh::icosphere(Vec3::new(0.0, 0.0, 0.0), 10.0, 2);
        let scene = SpineScene::from_meshes([(1u8, &ball)]);
        let down = RigidTransform::rot_x(std::f64::consts::PI);
        let plan = plan_linear(
            &down.with_translation(Vec3::new(0.0, -30.0, 60.0)),
            &down.with_translation(Vec3::new(0.0, 30.0, 60.0)),
            2.0,
        )
        .unwrap();
        assert_eq!(plan.kind, TrajectoryKind::Linear);
        let sweep = acquire_sweep_in(&scene, &plan, &Default::default()).unwrap();
        let pts = crate::phantom::sample_surface(&ball, 3000, 1).unwrap();
        let r = CompletionResult {
            level: 1,
            points: pts,
            backend: BackendKind::AtlasIcp,
            diagnostics: Diagnostics::default(),
        };
        (sweep, vec![r])
    }

    #[test]
    fn overlays_cover_every_frame_and_back_project() {
        let (sweep, results) = setup();
        let dir = tempfile::tempdir().unwrap();
        let files = export_replay(dir.path(), &sweep, &results).unwrap();
        assert_eq!(files.len(), sweep.frames.len());
        let tree = KdTree::new(&results[0].points);
        let mut empty = 0;
        let mut checked = 0;
        for (i, f) in files.iter().enumerate() {
            let pts = read_overlay(f).unwrap();
            if pts.is_empty() {
                empty += 1;
                assert_eq!(std::fs::read_to_string(f).unwrap(), "");
            }
            let chain = sweep.probe.default_chain().with_probe_pose(&sweep.frames[i].pose);
            for (px, level) in pts {
                assert_eq!(level, 1);
                let w = chain.pixel_to_world(&px);
                assert!(tree.nearest_dist2(&w).sqrt() <= 1.5);
                checked += 1;
            }
        }
        // frames at |y| > 10 miss the ball
        assert!(empty > 0 && checked > 0);
    }
}
