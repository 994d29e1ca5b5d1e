//! Sweep persistence: binary PGM masks, a pose file and a JSON manifest.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::probe::ProbeModel;
use super::simulate::{SegmentationFrame, Sweep};
use super::trajectory::{TrajectoryKind, TrajectoryPlan};
use crate::error::{Error, Result};
use crate::geometry::{read_pose_file, write_pose_file};

/// 8-bit binary PGM (P5).
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::invalid(format!(
            "{} pixels for a {width}x{height} image",
            pixels.len()
        )));
    }
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pgm(&bytes, path)
}

fn parse_pgm(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let err = |message: &str| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        message: message.to_string(),
    };
    let mut pos = 0;
    let mut tokens = Vec::with_capacity(4);
    while tokens.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(err("truncated PGM header"));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if tokens[0] != "P5" {
        return Err(err("not a binary PGM (P5)"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| err("bad PGM header number"));
    let (w, h, maxval) = (num(&tokens[1])?, num(&tokens[2])?, num(&tokens[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(err("only 8-bit PGM is supported"));
    }
    pos += 1; // single whitespace after maxval
    let data = bytes.get(pos..pos + w * h).ok_or_else(|| err("PGM pixel data truncated"))?;
    Ok((w, h, data.to_vec()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub index: usize,
    pub mask: String,
    pub labels: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepManifest {
    pub kind: TrajectoryKind,
    pub segments: usize,
    pub segment_starts: Vec<usize>,
    pub probe: ProbeModel,
    pub poses: String,
    pub frames: Vec<FrameEntry>,
}

/// Writes `dir/manifest.json`, `dir/poses.txt` and `dir/frames/*.pgm`.
/// Mask pixels are stored as 0/255.
pub fn write_sweep(dir: &Path, sweep: &Sweep) -> Result<PathBuf> {
    let frames_dir = dir.join("frames");
    std::fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
    let mut entries = Vec::with_capacity(sweep.frames.len());
    for (i, f) in sweep.frames.iter().enumerate() {
        let mask = format!("frames/mask_{i:05}.pgm");
        let labels = format!("frames/labels_{i:05}.pgm");
        let px: Vec<u8> = f.mask.iter().map(|&m| if m != 0 { 255 } else { 0 }).collect();
        write_pgm(&dir.join(&mask), f.width, f.height, &px)?;
        write_pgm(&dir.join(&labels), f.width, f.height, &f.gt_level)?;
        entries.push(FrameEntry { index: i, mask, labels });
    }
    let poses: Vec<_> = sweep.frames.iter().map(|f| f.pose).collect();
    write_pose_file(&dir.join("poses.txt"), &poses)?;
    let manifest = SweepManifest {
        kind: sweep.plan.kind,
        segments: sweep.plan.segment_count(),
        segment_starts: sweep.plan.segment_starts.clone(),
        probe: sweep.probe,
        poses: "poses.txt".into(),
        frames: entries,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn read_sweep_manifest(dir: &Path) -> Result<SweepManifest> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.clone()),
        _ => Error::io(&path, e),
    })?;
    serde_json::from_str(&text).map_err(|source| Error::Json { path, source })
}

pub fn read_sweep(dir: &Path) -> Result<Sweep> {
    let manifest = read_sweep_manifest(dir)?;
    let poses = read_pose_file(&dir.join(&manifest.poses))?;
    if poses.len() != manifest.frames.len() {
        return Err(Error::Config(format!(
            "{} poses for {} frames",
            poses.len(),
            manifest.frames.len()
        )));
    }
    let mut frames = Vec::with_capacity(poses.len());
    for (entry, pose) in manifest.frames.iter().zip(&poses) {
        let (w, h, mask) = read_pgm(&dir.join(&entry.mask))?;
        let (lw, lh, gt_level) = read_pgm(&dir.join(&entry.labels))?;
        if (w, h) != (lw, lh) || (w, h) != (manifest.probe.n_scanlines, manifest.probe.samples_per_ray) {
            return Err(Error::Config(format!("frame {} has unexpected size", entry.index)));
        }
        frames.push(SegmentationFrame {
            width: w,
            height: h,
            mask: mask.into_iter().map(|m| (m != 0) as u8).collect(),
            gt_level,
            pose: *pose,
        });
    }
    Ok(Sweep {
        frames,
        plan: TrajectoryPlan {
            kind: manifest.kind,
            poses,
            segment_starts: manifest.segment_starts,
        },
        probe: manifest.probe,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acquisition::simulate::SpineScene;
    use crate::acquisition::trajectory::plan_ushape;
    use crate::geometry::{RigidTransform, Vec3};
    use crate::mesh::TriMesh;

    #[test]
    fn pgm_round_trip_and_comments() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pgm");
        let px: Vec<u8> = (0..12).collect();
        write_pgm(&p, 4, 3, &px).unwrap();
        assert_eq!(read_pgm(&p).unwrap(), (4, 3, px.clone()));
        let mut with_comment = b"P5\n# note\n4 3\n255\n".to_vec();
        with_comment.extend_from_slice(&px);
        assert_eq!(parse_pgm(&with_comment, &p).unwrap().2, px);
        assert!(parse_pgm(b"P2\n1 1\n255\n0", &p).is_err());
        assert!(parse_pgm(b"P5\n4 4\n255\n\x00", &p).is_err());
    }

    #[test]
    fn sweep_round_trip() {
        let m = TriMesh::icosphere(Vec3::new(10.0, 20.0, -60.0), 15.0, 3);
        let scene = SpineScene::from_meshes([(3u8, &m)]);
        let down = RigidTransform::rot_x(std::f64::consts::PI);
        let plan = plan_ushape(
            &down.with_translation(Vec3::new(0.0, 0.0, 0.0)),
            &down.with_translation(Vec3::new(20.0, 40.0, 0.0)),
            5.0,
        )
        .unwrap();
        let probe = ProbeModel {
            n_scanlines: 16,
            samples_per_ray: 64,
            ..Default::default()
        };
        let sweep = crate::acquisition::acquire_sweep_in(&scene, &plan, &probe).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_sweep(dir.path(), &sweep).unwrap();
        let manifest = read_sweep_manifest(dir.path()).unwrap();
        assert_eq!(manifest.segments, 3);
        let back = read_sweep(dir.path()).unwrap();
        assert_eq!(back.frames.len(), sweep.frames.len());
        for (a, b) in back.frames.iter().zip(&sweep.frames) {
            assert_eq!(a.mask, b.mask);
            assert_eq!(a.gt_level, b.gt_level);
            assert!((a.pose.translation - b.pose.translation).amax() < 1e-12);
        }
    }
}
