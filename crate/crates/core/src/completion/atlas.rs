//! Retrieval completion: rigidly fit the partial surface to every atlas
//! shape of its level and return the best-fitting shape.

use std::path::Path;

use nalgebra::Matrix3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::icp::{check_non_collinear, icp_from, IcpResult};
use super::{BackendKind, CompletionResult, Diagnostics, PartialObservation};
use crate::error::{Error, Result};
use crate::geometry::{centroid, RigidTransform, Vec3};
use crate::phantom::{principal_axes, sample_surface, SpineModel};
use crate::spatial::KdTree;

pub const MIN_ENTRY_POINTS: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtlasEntry {
    pub level: u8,
    /// Complete shape in millimetres, centroid at the origin.
    pub points: Vec<Vec3>,
    pub source: String,
}

impl AtlasEntry {
    /// Centres `points` on their centroid.
    pub fn new(level: u8, points: &[Vec3], source: impl Into<String>) -> Result<Self> {
        if points.len() < MIN_ENTRY_POINTS {
            return Err(Error::invalid(format!(
                "atlas entries need at least {MIN_ENTRY_POINTS} points, got {}",
                points.len()
            )));
        }
        if points.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(Error::invalid("atlas entry has non-finite coordinates"));
        }
        let c = centroid(points);
        Ok(Self {
            level,
            points: points.iter().map(|p| p - c).collect(),
            source: source.into(),
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Atlas {
    pub entries: Vec<AtlasEntry>,
}

impl Atlas {
    /// One entry per vertebra of each `(source id, spine)`, sampled with
    /// `n_points` area-uniform surface points.
    pub fn from_spines<'a>(
        spines: impl IntoIterator<Item = (String, &'a SpineModel)>,
        n_points: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut entries = Vec::new();
        for (k, (source, spine)) in spines.into_iter().enumerate() {
            for v in &spine.vertebrae {
                let s = seed.wrapping_add(1000 * k as u64 + v.level as u64);
                let pts = sample_surface(&v.mesh, n_points, s)?;
                entries.push(AtlasEntry::new(v.level, &pts, source.clone())?);
            }
        }
        Ok(Self { entries })
    }

    pub fn for_level(&self, level: u8) -> impl Iterator<Item = &AtlasEntry> {
        self.entries.iter().filter(move |e| e.level == level)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).expect("atlas serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
            _ => Error::io(path, e),
        })?;
        let atlas: Self = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        for e in &atlas.entries {
            AtlasEntry::new(e.level, &e.points, e.source.clone())?;
        }
        Ok(atlas)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AtlasOptions {
    /// ICP iterations spent on each of the 24 initial orientations.
    pub coarse_iters: usize,
    /// Points of the partial surface used while screening orientations.
    pub coarse_points: usize,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for AtlasOptions {
    fn default() -> Self {
        Self {
            coarse_iters: 10,
            coarse_points: 256,
            max_iters: 200,
            tol: 1e-10,
        }
    }
}

/// The 24 proper signed permutation matrices.
pub fn cube_rotations() -> Vec<Matrix3<f64>> {
    let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let mut out = Vec::with_capacity(24);
    for p in perms {
        for signs in 0..8u8 {
            let mut m = Matrix3::zeros();
            for (row, &col) in p.iter().enumerate() {
                m[(row, col)] = if signs >> row & 1 == 1 { -1.0 } else { 1.0 };
            }
            if m.determinant() > 0.0 {
                out.push(m);
            }
        }
    }
    out
}

fn proper_frame(points: &[Vec3]) -> Matrix3<f64> {
    let (mut e, _) = principal_axes(points);
    if e.determinant() < 0.0 {
        e.set_column(2, &-e.column(2));
    }
    e
}

fn mean_sq_to(points: &[Vec3], t: &RigidTransform, tree: &KdTree) -> f64 {
    points
        .iter()
        .map(|p| tree.nearest_dist2(&t.apply(p)))
        .sum::<f64>()
        / points.len() as f64
}

struct Fit {
    icp: IcpResult,
    score: f64,
}

/// Fits centred `partial` onto `entry`: the principal frames of both sets
/// are matched under each of the 24 axis-aligned orientations, a short ICP
/// screens them, and the best one is run to convergence.
fn fit_entry(partial: &[Vec3], coarse: &[Vec3], entry: &AtlasEntry, opts: &AtlasOptions) -> Fit {
    let tree = KdTree::new(&entry.points);
    let ep = proper_frame(partial);
    let ec = proper_frame(&entry.points);
    let mut best: Option<IcpResult> = None;
    for q in cube_rotations() {
        let init = RigidTransform {
            rotation: ec * q * ep.transpose(),
            translation: Vec3::zeros(),
        };
        let r = icp_from(coarse, &tree, &init, opts.coarse_iters, 0.0);
        if best.as_ref().is_none_or(|b| r.rms < b.rms) {
            best = Some(r);
        }
    }
    let start = best.expect("24 orientations").transform;
    let icp = icp_from(partial, &tree, &start, opts.max_iters, opts.tol);
    let score = mean_sq_to(partial, &icp.transform, &tree);
    Fit { icp, score }
}

/// Completes `obs` by retrieval: every atlas entry of the level is fitted,
/// scored by the mean squared partial-to-entry distance, and the best one is
/// mapped back to the observation's world frame. Works in millimetres so the
/// result moves rigidly with the observation.
pub fn complete_atlas_icp(obs: &PartialObservation, atlas: &Atlas, opts: &AtlasOptions) -> Result<CompletionResult> {
    let candidates: Vec<&AtlasEntry> = atlas.for_level(obs.level).collect();
    if candidates.is_empty() {
        return Err(Error::invalid(format!("atlas has no entries for L{}", obs.level)));
    }
    check_non_collinear(&obs.target, "partial surface")?;
    let c = centroid(&obs.target);
    let partial: Vec<Vec3> = obs.target.iter().map(|p| p - c).collect();
    // an index stride rather than FPS: ray-cast grids are full of distance
    // ties, and FPS tie-breaking would make the screening depend on the pose
    let stride = partial.len().div_ceil(opts.coarse_points.max(1));
    let coarse: Vec<Vec3> = partial.iter().step_by(stride).copied().collect();
    let fits: Vec<Fit> = candidates
        .par_iter()
        .map(|e| fit_entry(&partial, &coarse, e, opts))
        .collect();
    let mut chosen = 0;
    for (i, f) in fits.iter().enumerate() {
        if f.score < fits[chosen].score {
            chosen = i;
        }
    }
    let back = fits[chosen].icp.transform.inverse();
    let points = candidates[chosen].points.iter().map(|q| back.apply(q) + c).collect();
    Ok(CompletionResult {
        level: obs.level,
        points,
        backend: BackendKind::AtlasIcp,
        diagnostics: Diagnostics {
            partial_points: obs.target.len(),
            context_points: obs.context.len(),
            residuals: fits[chosen].icp.history.clone(),
            candidate_scores: candidates.iter().zip(&fits).map(|(e, f)| (e.source.clone(), f.score)).collect(),
            chosen: Some(candidates[chosen].source.clone()),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acquisition::{raycast_scene, SpineScene};
    use crate::completion::extract_level_with_context;
    use crate::phantom::{generate_synthetic_spine, SpineParams};

    #[test]
    fn cube_group_has_24_distinct_rotations() {
        let r = cube_rotations();
        assert_eq!(r.len(), 24);
        for (i, a) in r.iter().enumerate() {
            assert!((a.determinant() - 1.0).abs() < 1e-12);
            assert!(r[..i].iter().all(|b| (a - b).amax() > 0.5));
        }
    }

    #[test]
    fn entries_are_centred_and_large_enough() {
        let pts: Vec<Vec3> = (0..600).map(|i| Vec3::new(i as f64, (i % 7) as f64, 3.0)).collect();
        let e = AtlasEntry::new(2, &pts, "x").unwrap();
        assert!(centroid(&e.points).norm() < 1e-9);
        assert!(AtlasEntry::new(2, &pts[..100], "x").is_err());
    }

    #[test]
    fn missing_level_is_an_error() {
        let spine = generate_synthetic_spine(&SpineParams::default(), 3).unwrap();
        let atlas = Atlas::from_spines([("a".to_string(), &spine)], 600, 0).unwrap();
        let only_l1 = Atlas {
            entries: atlas.for_level(1).cloned().collect(),
        };
        let cloud = raycast_scene(&SpineScene::new(&spine), &-Vec3::z(), 1.5).unwrap();
        let obs = extract_level_with_context(&cloud, 2, 0.25).unwrap();
        assert!(complete_atlas_icp(&obs, &only_l1, &AtlasOptions::default()).is_err());
    }

    #[test]
    fn single_entry_returned_and_chosen_is_argmin() {
        let spine = generate_synthetic_spine(&SpineParams::default(), 3).unwrap();
        let other = generate_synthetic_spine(&SpineParams::default(), 4).unwrap();
        let cloud = raycast_scene(&SpineScene::new(&spine), &-Vec3::z(), 1.5).unwrap();
        let obs = extract_level_with_context(&cloud, 3, 0.25).unwrap();

        let one = Atlas::from_spines([("self".to_string(), &spine)], 800, 0).unwrap();
        let r = complete_atlas_icp(&obs, &one, &AtlasOptions::default()).unwrap();
        assert_eq!(r.points.len(), 800);
        assert_eq!(r.diagnostics.chosen.as_deref(), Some("self"));
        assert!(r.diagnostics.residuals.windows(2).all(|w| w[1] <= w[0]));

        let two = Atlas::from_spines([("self".to_string(), &spine), ("other".to_string(), &other)], 800, 0).unwrap();
        let r = complete_atlas_icp(&obs, &two, &AtlasOptions::default()).unwrap();
        let best = r
            .diagnostics
            .candidate_scores
            .iter()
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        assert_eq!(r.diagnostics.chosen.as_deref(), Some(best.0.as_str()));
    }

    #[test]
    fn save_load_round_trip() {
        let spine = generate_synthetic_spine(&SpineParams::default(), 1).unwrap();
        let atlas = Atlas::from_spines([("s1".to_string(), &spine)], 512, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("atlas.json");
        atlas.save(&p).unwrap();
        assert_eq!(Atlas::load(&p).unwrap(), atlas);
        assert!(matches!(Atlas::load(&dir.path().join("none.json")), Err(Error::MissingArtifact(_))));
    }
}
