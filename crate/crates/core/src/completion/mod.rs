//! Vertebra shape completion from partial, labeled surface observations.

pub mod atlas;
pub mod icp;
pub mod learned;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::acquisition::{raycast_scene, SpineScene};
use crate::cloud::{LabeledPointCloud, LEVELS};
use crate::error::{Error, Result};
use crate::geometry::{bounding_box, Vec3};
use crate::phantom::{sample_surface, SpineModel};
use crate::ply;

pub use atlas::{complete_atlas_icp, Atlas, AtlasEntry, AtlasOptions};
pub use icp::{fit_rigid, icp_rigid, IcpResult};
pub use learned::{
    complete_learned, refine_patient_specific, train_completion, CompletionArch, CompletionModel, LossWeights,
};

pub const DEFAULT_MARGIN: f64 = 0.25;

/// One level's partial surface plus neighbouring points, with the
/// normalization used by the completion backends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartialObservation {
    pub level: u8,
    pub target: Vec<Vec3>,
    pub context: Vec<Vec3>,
    pub center: Vec3,
    pub scale: f64,
}

impl PartialObservation {
    pub fn normalize(&self, p: &Vec3) -> Vec3 {
        (p - self.center) / self.scale
    }

    pub fn denormalize(&self, p: &Vec3) -> Vec3 {
        p * self.scale + self.center
    }

    pub fn normalized_target(&self) -> Vec<Vec3> {
        self.target.iter().map(|p| self.normalize(p)).collect()
    }

    pub fn normalized_context(&self) -> Vec<Vec3> {
        self.context.iter().map(|p| self.normalize(p)).collect()
    }
}

/// Target = points labeled `level`; context = points of other levels inside
/// the target's bounding box grown by `margin_frac` of its size per side.
/// Normalization: box centre and (unexpanded) box diagonal.
pub fn extract_level_with_context(cloud: &LabeledPointCloud, level: u8, margin_frac: f64) -> Result<PartialObservation> {
    if !(margin_frac >= 0.0) {
        return Err(Error::invalid("margin fraction must be non-negative"));
    }
    let target = cloud.level_points(level);
    let Some((lo, hi)) = bounding_box(&target) else {
        return Err(Error::invalid(format!("level {level} is not present in the cloud")));
    };
    let size = hi - lo;
    let (elo, ehi) = (lo - size * margin_frac, hi + size * margin_frac);
    let context = cloud
        .points
        .iter()
        .zip(&cloud.labels)
        .filter(|(p, &l)| {
            l != level && (0..3).all(|a| p[a] >= elo[a] && p[a] <= ehi[a])
        })
        .map(|(p, _)| *p)
        .collect();
    let diag = size.norm();
    Ok(PartialObservation {
        level,
        target,
        context,
        center: (lo + hi) / 2.0,
        scale: if diag > 0.0 { diag } else { 1.0 },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    AtlasIcp,
    Learned,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub partial_points: usize,
    pub context_points: usize,
    /// ICP residual history of the chosen candidate, or per-stage values.
    pub residuals: Vec<f64>,
    /// `(source id, score)` per atlas candidate.
    pub candidate_scores: Vec<(String, f64)>,
    pub chosen: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub level: u8,
    /// Completed shape in world millimetres.
    pub points: Vec<Vec3>,
    pub backend: BackendKind,
    pub diagnostics: Diagnostics,
}

impl CompletionResult {
    /// `<dir>/L<k>.ply` and `<dir>/L<k>.json` (diagnostics).
    pub fn write(&self, dir: &Path) -> Result<()> {
        ply::write_cloud(&dir.join(format!("L{}.ply", self.level)), &crate::cloud::PointCloud::new(self.points.clone())?)?;
        let p = dir.join(format!("L{}.json", self.level));
        let meta = serde_json::json!({
            "level": self.level,
            "backend": self.backend,
            "points": self.points.len(),
            "diagnostics": self.diagnostics,
        });
        std::fs::write(&p, serde_json::to_string_pretty(&meta).unwrap()).map_err(|e| Error::io(&p, e))
    }

    pub fn read(dir: &Path, level: u8) -> Result<Self> {
        let ply_path = dir.join(format!("L{level}.ply"));
        let json_path = dir.join(format!("L{level}.json"));
        if !ply_path.exists() {
            return Err(Error::MissingArtifact(ply_path));
        }
        let cloud = ply::read_cloud(&ply_path)?;
        let text = std::fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
        let meta: serde_json::Value = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: json_path.clone(),
            source,
        })?;
        let parse = |key: &str| meta.get(key).cloned().unwrap_or_default();
        let bad = |e: serde_json::Error| Error::Json {
            path: json_path.clone(),
            source: e,
        };
        Ok(Self {
            level,
            points: cloud.points,
            backend: serde_json::from_value(parse("backend")).map_err(bad)?,
            diagnostics: serde_json::from_value(parse("diagnostics")).map_err(bad)?,
        })
    }
}

/// Completion backend with its resources.
#[derive(Debug, Clone, Copy)]
pub enum Backend<'a> {
    AtlasIcp(&'a Atlas, AtlasOptions),
    Learned(&'a CompletionModel),
}

/// Completes every level present in `cloud`, in level order. Absent levels
/// and per-level failures are logged and skipped.
pub fn complete_spine(cloud: &LabeledPointCloud, backend: Backend<'_>, margin_frac: f64) -> Vec<CompletionResult> {
    let present = cloud.present_levels();
    let mut out = Vec::new();
    for level in 1..=LEVELS {
        if !present.contains(&level) {
            log::warn!("L{level} has no labeled points; skipped");
            continue;
        }
        let result = extract_level_with_context(cloud, level, margin_frac).and_then(|obs| match backend {
            Backend::AtlasIcp(atlas, opts) => complete_atlas_icp(&obs, atlas, &opts),
            Backend::Learned(model) => complete_learned(model, &obs),
        });
        match result {
            Ok(r) => out.push(r),
            Err(e) => log::warn!("L{level}: completion failed: {e}"),
        }
    }
    out
}

/// A partial observation with its ground-truth complete shape, both in the
/// observation's normalized frame.
#[derive(Debug, Clone, PartialEq)]
pub struct CompletionPair {
    pub obs: PartialObservation,
    pub complete: Vec<Vec3>,
}

/// (partial, complete) pairs for every level of `spine`, one per viewing
/// direction: partial surfaces come from parallel ray casting, complete
/// shapes from area-uniform samples of the level's mesh.
pub fn completion_pairs(
    spine: &SpineModel,
    directions: &[Vec3],
    grid_spacing: f64,
    n_complete: usize,
    margin_frac: f64,
    seed: u64,
) -> Result<Vec<CompletionPair>> {
    let scene = SpineScene::new(spine);
    let mut pairs = Vec::new();
    for (k, dir) in directions.iter().enumerate() {
        let cloud = raycast_scene(&scene, dir, grid_spacing)?;
        for v in &spine.vertebrae {
            if !cloud.labels.contains(&v.level) {
                continue;
            }
            let obs = extract_level_with_context(&cloud, v.level, margin_frac)?;
            let s = seed.wrapping_mul(31).wrapping_add(k as u64 * 7 + v.level as u64);
            let complete = sample_surface(&v.mesh, n_complete, s)?
                .iter()
                .map(|p| obs.normalize(p))
                .collect();
            pairs.push(CompletionPair { obs, complete });
        }
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_synthetic_spine, SpineParams};

    fn labeled(points: &[(f64, f64, f64, u8)]) -> LabeledPointCloud {
        LabeledPointCloud::new(
            points.iter().map(|&(x, y, z, _)| Vec3::new(x, y, z)).collect(),
            points.iter().map(|p| p.3).collect(),
        )
        .unwrap()
    }

    #[test]
    fn isolated_level_has_no_context() {
        let c = labeled(&[(0.0, 0.0, 0.0, 2), (1.0, 1.0, 1.0, 2), (10.0, 10.0, 10.0, 3)]);
        let obs = extract_level_with_context(&c, 2, 0.25).unwrap();
        assert!(obs.context.is_empty());
        assert_eq!(obs.target.len(), 2);
        assert!((obs.center - Vec3::repeat(0.5)).norm() < 1e-15);
        assert!((obs.scale - 3f64.sqrt()).abs() < 1e-15);
        assert!(extract_level_with_context(&c, 4, 0.25).is_err());
    }

    #[test]
    fn margin_zero_uses_box_only() {
        let c = labeled(&[
            (0.0, 0.0, 0.0, 1),
            (4.0, 4.0, 4.0, 1),
            (2.0, 2.0, 2.0, 2),
            (4.5, 2.0, 2.0, 2),
        ]);
        assert_eq!(extract_level_with_context(&c, 1, 0.0).unwrap().context, vec![Vec3::repeat(2.0)]);
        assert_eq!(extract_level_with_context(&c, 1, 0.25).unwrap().context.len(), 2);
    }

    #[test]
    fn normalization_round_trip() {
        let c = labeled(&[(1.0, -2.0, 3.0, 1), (7.0, 5.0, -1.0, 1)]);
        let obs = extract_level_with_context(&c, 1, 0.25).unwrap();
        for p in [Vec3::new(0.3, 9.1, -4.4), Vec3::new(1e3, -2e2, 5e-3)] {
            assert!((obs.denormalize(&obs.normalize(&p)) - p).norm() < 1e-9);
        }
    }

    #[test]
    fn l3_context_only_from_neighbours() {
        let spine = generate_synthetic_spine(&SpineParams::default(), 0).unwrap();
        let cloud = raycast_scene(&SpineScene::new(&spine), &-Vec3::z(), 1.5).unwrap();
        let obs = extract_level_with_context(&cloud, 3, 0.25).unwrap();
        let mut levels: Vec<u8> = cloud
            .points
            .iter()
            .zip(&cloud.labels)
            .filter(|(p, _)| obs.context.contains(p))
            .map(|(_, &l)| l)
            .collect();
        levels.sort_unstable();
        levels.dedup();
        assert_eq!(levels, vec![2, 4]);
    }

    #[test]
    fn result_files_round_trip() {
        let r = CompletionResult {
            level: 4,
            points: vec![Vec3::new(1.0, 2.0, 3.0), Vec3::new(-1.5, 0.25, 1e-7)],
            backend: BackendKind::AtlasIcp,
            diagnostics: Diagnostics {
                partial_points: 10,
                residuals: vec![0.5, 0.25],
                chosen: Some("seed-1".into()),
                ..Default::default()
            },
        };
        let dir = tempfile::tempdir().unwrap();
        r.write(dir.path()).unwrap();
        assert_eq!(CompletionResult::read(dir.path(), 4).unwrap(), r);
        assert!(matches!(CompletionResult::read(dir.path(), 2), Err(Error::MissingArtifact(_))));
    }
}
