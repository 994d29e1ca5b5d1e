//! End-to-end orchestration over a session directory:
//!
//! ```text
//! <session>/config.toml        copy of the effective configuration
//! <session>/manifest.json      stages run and artifacts written
//! <session>/session.log        one `stage=<name> status=<ok|fail>` line per stage
//! <session>/phantom/L*.ply     ground-truth meshes
//! <session>/sweep/             frames, poses and sweep manifest
//! <session>/volume/            compounded volume (raw f32 + JSON header)
//! <session>/clouds/            surface.ply, labeled.ply
//! <session>/completions/       L*.ply + L*.json
//! <session>/report/            metrics.json / .txt / .csv
//! <session>/overlays/          frame_*.txt replay overlays
//! ```

pub mod compare;
pub mod config;
pub mod replay;

use std::collections::BTreeSet;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::acquisition::{acquire_sweep_in, io as sweep_io, plan, SpineScene, Sweep, TrajectoryPlan};
use crate::cloud::{LabeledPointCloud, PointCloud, LEVELS};
use crate::completion::{complete_spine, Atlas, Backend, CompletionModel, CompletionResult};
use crate::compounding::{compound, volume_surface_cloud, LabelVolume};
use crate::error::{Error, Result};
use crate::geometry::{RigidTransform, Vec3};
use crate::labeling::{classify_points, label_by_geometry, LabelingBackend, PointClassifier};
use crate::metrics::{evaluate_spine, MetricsReport};
use crate::phantom::{generate_synthetic_spine, load_labeled_meshes, SpineModel};
use crate::ply;
use crate::spatial::KdTree;

pub use compare::{compare_trajectories, ComparisonReport, Metric};
pub use config::{CompletionBackendKind, SessionConfig};
pub use replay::export_replay;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Phantom,
    Plan,
    Sweep,
    Compound,
    Label,
    Complete,
    Evaluate,
    Replay,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Phantom => "phantom",
            Stage::Plan => "plan",
            Stage::Sweep => "sweep",
            Stage::Compound => "compound",
            Stage::Label => "label",
            Stage::Complete => "complete",
            Stage::Evaluate => "eval",
            Stage::Replay => "replay",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SessionManifest {
    pub seed: u64,
    pub config: String,
    pub stages: Vec<StageRecord>,
    /// Paths relative to the session directory, sorted.
    pub artifacts: BTreeSet<String>,
    /// Agreement of the assigned labels with the nearest ground-truth level.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label_agreement: Option<f64>,
}

/// A session directory plus its manifest and progress callback.
pub struct Session<'a> {
    pub dir: PathBuf,
    pub config: SessionConfig,
    pub manifest: SessionManifest,
    progress: Box<dyn FnMut(Stage, bool) + 'a>,
}

impl<'a> Session<'a> {
    /// Opens (or creates) `dir` and writes `config.toml`.
    pub fn create(dir: &Path, config: SessionConfig) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let cfg_path = dir.join("config.toml");
        std::fs::write(&cfg_path, config.to_toml()).map_err(|e| Error::io(&cfg_path, e))?;
        let manifest = match read_manifest(dir) {
            Ok(mut m) => {
                m.seed = config.seed;
                m
            }
            Err(Error::MissingArtifact(_)) => SessionManifest {
                seed: config.seed,
                config: "config.toml".into(),
                ..Default::default()
            },
            Err(e) => return Err(e),
        };
        let log_path = dir.join("session.log");
        if !log_path.exists() {
            std::fs::write(&log_path, "").map_err(|e| Error::io(&log_path, e))?;
        }
        let mut s = Self {
            dir: dir.to_path_buf(),
            config,
            manifest,
            progress: Box::new(|_, _| {}),
        };
        s.manifest.artifacts.insert("config.toml".into());
        s.save_manifest()?;
        Ok(s)
    }

    /// Opens an existing session using its stored configuration.
    pub fn open(dir: &Path) -> Result<Self> {
        let config = SessionConfig::load(&dir.join("config.toml"))?;
        Self::create(dir, config)
    }

    pub fn on_progress(mut self, f: impl FnMut(Stage, bool) + 'a) -> Self {
        self.progress = Box::new(f);
        self
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn mkdir(&self, rel: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }

    fn add_artifact(&mut self, rel: impl Into<String>) {
        self.manifest.artifacts.insert(rel.into());
    }

    fn save_manifest(&self) -> Result<()> {
        let p = self.path("manifest.json");
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    }

    /// Runs one stage, records the outcome in the log and manifest, and
    /// reports it through the progress callback.
    pub fn run<T>(&mut self, stage: Stage, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let out = f(self);
        let ok = out.is_ok();
        let line = match &out {
            Ok(_) => format!("stage={} status=ok\n", stage.name()),
            Err(e) => format!("stage={} status=fail error=\"{e}\"\n", stage.name()),
        };
        let log_path = self.path("session.log");
        std::fs::OpenOptions::new()
            .append(true)
            .create(true)
            .open(&log_path)
            .and_then(|mut f| f.write_all(line.as_bytes()))
            .map_err(|e| Error::io(&log_path, e))?;
        self.add_artifact("session.log");
        self.manifest.stages.retain(|r| r.stage != stage);
        self.manifest.stages.push(StageRecord {
            stage,
            ok,
            error: out.as_ref().err().map(|e| e.to_string()),
        });
        self.manifest.stages.sort_by_key(|r| r.stage);
        self.save_manifest()?;
        (self.progress)(stage, ok);
        out
    }

    // ---- stages ----

    pub fn phantom(&mut self) -> Result<SpineModel> {
        self.run(Stage::Phantom, |s| {
            let spine = if s.config.phantom.meshes.is_empty() {
                generate_synthetic_spine(&s.config.phantom.params, s.config.seed)?
            } else {
                load_labeled_meshes(&s.config.phantom.meshes)?
            };
            s.mkdir("phantom")?;
            spine.write_meshes(&s.path("phantom"))?;
            for l in 1..=LEVELS {
                s.add_artifact(format!("phantom/L{l}.ply"));
            }
            Ok(spine)
        })
    }

    pub fn plan(&mut self, spine: &SpineModel) -> Result<TrajectoryPlan> {
        self.run(Stage::Plan, |s| {
            let (start, end) = scan_endpoints(&s.config, spine);
            plan(s.config.trajectory.kind, &start, &end, s.config.trajectory.step)
        })
    }

    pub fn sweep(&mut self, spine: &SpineModel, plan: &TrajectoryPlan) -> Result<Sweep> {
        self.run(Stage::Sweep, |s| {
            let sweep = acquire_sweep_in(&SpineScene::new(spine), plan, &s.config.probe)?;
            let dir = s.mkdir("sweep")?;
            sweep_io::write_sweep(&dir, &sweep)?;
            s.add_artifact("sweep/manifest.json");
            s.add_artifact("sweep/poses.txt");
            Ok(sweep)
        })
    }

    pub fn compound(&mut self, sweep: &Sweep) -> Result<PointCloud> {
        self.run(Stage::Compound, |s| {
            let chain = sweep.probe.default_chain();
            let vol = compound(sweep, &chain, s.config.compounding.spacing)?;
            let dir = s.mkdir("volume")?;
            vol.write(&dir.join("volume.raw"), &dir.join("volume.json"))?;
            s.add_artifact("volume/volume.json");
            s.add_artifact("volume/volume.raw");
            let cloud = volume_surface_cloud(&vol, &s.config.compounding)?;
            s.mkdir("clouds")?;
            ply::write_cloud(&s.path("clouds/surface.ply"), &cloud)?;
            s.add_artifact("clouds/surface.ply");
            Ok(cloud)
        })
    }

    pub fn label(&mut self, cloud: &PointCloud, scan_axis: Vec3, spine: Option<&SpineModel>) -> Result<LabeledPointCloud> {
        self.run(Stage::Label, |s| {
            let labeled = match s.config.labeling.backend {
                LabelingBackend::Geometric => {
                    let axis = s.config.labeling.axis.map(Vec3::from).unwrap_or(scan_axis);
                    label_by_geometry(cloud, &axis)?
                }
                LabelingBackend::Classifier => {
                    let stem = s.config.labeling.model.clone().expect("validated");
                    classify_points(&PointClassifier::load(&stem)?, cloud)?
                }
            };
            if let Some(spine) = spine {
                s.manifest.label_agreement = Some(label_agreement(&labeled, spine)?);
            }
            s.mkdir("clouds")?;
            ply::write_labeled_cloud(&s.path("clouds/labeled.ply"), &labeled)?;
            s.add_artifact("clouds/labeled.ply");
            Ok(labeled)
        })
    }

    pub fn complete(&mut self, labeled: &LabeledPointCloud) -> Result<Vec<CompletionResult>> {
        self.run(Stage::Complete, |s| {
            let c = s.config.completion.clone();
            let results = match c.backend {
                CompletionBackendKind::AtlasIcp => {
                    let atlas = load_or_build_atlas(&s.config)?;
                    complete_spine(labeled, Backend::AtlasIcp(&atlas, c.icp), c.margin)
                }
                CompletionBackendKind::Learned => {
                    let model = CompletionModel::load(c.model.as_ref().expect("validated"))?;
                    complete_spine(labeled, Backend::Learned(&model), c.margin)
                }
            };
            if results.is_empty() {
                return Err(Error::Empty("completions"));
            }
            let dir = s.mkdir("completions")?;
            for r in &results {
                r.write(&dir)?;
                s.add_artifact(format!("completions/L{}.ply", r.level));
                s.add_artifact(format!("completions/L{}.json", r.level));
            }
            Ok(results)
        })
    }

    pub fn evaluate(&mut self, results: &[CompletionResult], spine: &SpineModel) -> Result<MetricsReport> {
        self.run(Stage::Evaluate, |s| {
            let report = evaluate_spine(results, spine, &s.config.metrics)?;
            let dir = s.mkdir("report")?;
            report.write(&dir)?;
            for f in ["metrics.json", "metrics.txt", "metrics.csv"] {
                s.add_artifact(format!("report/{f}"));
            }
            Ok(report)
        })
    }

    pub fn replay(&mut self, sweep: &Sweep, results: &[CompletionResult]) -> Result<usize> {
        self.run(Stage::Replay, |s| {
            let dir = s.mkdir("overlays")?;
            let files = export_replay(&dir, sweep, results)?;
            for f in &files {
                s.add_artifact(format!("overlays/{}", f.file_name().unwrap().to_string_lossy()));
            }
            Ok(files.len())
        })
    }

    // ---- loaders for stage-by-stage use ----

    pub fn load_phantom(&self) -> Result<SpineModel> {
        let paths: Vec<PathBuf> = (1..=LEVELS).map(|l| self.path(&format!("phantom/L{l}.ply"))).collect();
        if let Some(p) = paths.iter().find(|p| !p.exists()) {
            return Err(Error::MissingArtifact(p.clone()));
        }
        load_labeled_meshes(&paths)
    }

    pub fn load_sweep(&self) -> Result<Sweep> {
        sweep_io::read_sweep(&self.path("sweep"))
    }

    pub fn load_surface(&self) -> Result<PointCloud> {
        read_existing(&self.path("clouds/surface.ply"), ply::read_cloud)
    }

    pub fn load_labeled(&self) -> Result<LabeledPointCloud> {
        read_existing(&self.path("clouds/labeled.ply"), ply::read_labeled_cloud)
    }

    /// Completions present in the session, in level order. Errors when none.
    pub fn load_completions(&self) -> Result<Vec<CompletionResult>> {
        let dir = self.path("completions");
        let mut out = Vec::new();
        for l in 1..=LEVELS {
            match CompletionResult::read(&dir, l) {
                Ok(r) => out.push(r),
                Err(Error::MissingArtifact(_)) => {}
                Err(e) => return Err(e),
            }
        }
        if out.is_empty() {
            return Err(Error::MissingArtifact(dir.join("L*.ply")));
        }
        Ok(out)
    }

    pub fn load_volume(&self) -> Result<LabelVolume> {
        read_existing(&self.path("volume/volume.json"), LabelVolume::read)
    }
}

fn read_existing<T>(path: &Path, f: impl FnOnce(&Path) -> Result<T>) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    f(path)
}

pub fn read_manifest(dir: &Path) -> Result<SessionManifest> {
    let p = dir.join("manifest.json");
    let text = std::fs::read_to_string(&p).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(p.clone()),
        _ => Error::io(&p, e),
    })?;
    serde_json::from_str(&text).map_err(|source| Error::Json { path: p, source })
}

/// Probe pointing down (`-z`) in all poses.
pub fn probe_down() -> RigidTransform {
    RigidTransform::rot_x(std::f64::consts::PI)
}

/// Start and end probe poses. Explicit positions win; otherwise the scan
/// runs along the spine axis `margin` beyond each end, at `standoff` above
/// the most posterior bone point. Linear scans follow the midline; the
/// rectangle scans use corners `lateral_offset` either side of it.
pub fn scan_endpoints(cfg: &SessionConfig, spine: &SpineModel) -> (RigidTransform, RigidTransform) {
    let t = &cfg.trajectory;
    let down = probe_down();
    if let (Some(a), Some(b)) = (t.start, t.end) {
        return (down.with_translation(a.into()), down.with_translation(b.into()));
    }
    let (lo, hi) = spine.bounding_box();
    let cx = 0.5 * (lo.x + hi.x);
    let z = hi.z + t.standoff;
    let (y0, y1) = (lo.y - t.margin, hi.y + t.margin);
    let dx = match t.kind {
        crate::acquisition::TrajectoryKind::Linear => 0.0,
        _ => t.lateral_offset,
    };
    (
        down.with_translation(Vec3::new(cx - dx, y0, z)),
        down.with_translation(Vec3::new(cx + dx, y1, z)),
    )
}

/// Unit direction of the first scan segment, used as the labeling axis.
pub fn scan_axis(plan: &TrajectoryPlan) -> Vec3 {
    let (a, b) = plan.segment_range(0);
    let d = plan.poses[b].translation - plan.poses[a].translation;
    if d.norm() > 0.0 {
        d.normalize()
    } else {
        Vec3::y()
    }
}

/// Share of points whose label matches the level of the nearest
/// ground-truth surface sample.
pub fn label_agreement(cloud: &LabeledPointCloud, spine: &SpineModel) -> Result<f64> {
    let gt = spine.sample_labeled(2048, 0)?;
    let tree = KdTree::new(&gt.points);
    let truth: Vec<u8> = cloud
        .points
        .iter()
        .map(|p| gt.labels[tree.nearest(p).expect("non-empty").0])
        .collect();
    Ok(cloud.agreement(&truth))
}

pub fn load_or_build_atlas(cfg: &SessionConfig) -> Result<Atlas> {
    if let Some(p) = &cfg.completion.atlas {
        return Atlas::load(p);
    }
    let spines = (1..=cfg.completion.atlas_phantoms as u64)
        .map(|k| {
            let seed = cfg.seed.wrapping_add(k);
            generate_synthetic_spine(&cfg.phantom.params, seed).map(|s| (format!("seed-{seed}"), s))
        })
        .collect::<Result<Vec<_>>>()?;
    Atlas::from_spines(spines.iter().map(|(id, s)| (id.clone(), s)), cfg.completion.atlas_points, cfg.seed)
}

#[derive(Debug, Clone)]
pub struct ScanOutcome {
    pub report: MetricsReport,
    pub completions: Vec<CompletionResult>,
    pub manifest: SessionManifest,
}

/// phantom → plan → sweep → compound → label → complete → evaluate →
/// replay, writing every artifact under `dir`. A failing stage is recorded
/// in the log and manifest and aborts the run; earlier artifacts are kept.
pub fn run_scan(cfg: &SessionConfig, dir: &Path, progress: impl FnMut(Stage, bool)) -> Result<ScanOutcome> {
    cfg.validate()?;
    let mut s = Session::create(dir, cfg.clone())?.on_progress(progress);
    let spine = s.phantom()?;
    let plan = s.plan(&spine)?;
    let sweep = s.sweep(&spine, &plan)?;
    let cloud = s.compound(&sweep)?;
    let labeled = s.label(&cloud, scan_axis(&plan), Some(&spine))?;
    let completions = s.complete(&labeled)?;
    let report = s.evaluate(&completions, &spine)?;
    s.replay(&sweep, &completions)?;
    Ok(ScanOutcome {
        report,
        completions,
        manifest: s.manifest.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick_config() -> SessionConfig {
        let mut c = SessionConfig::default();
        c.trajectory.step = 3.0;
        c.compounding.n_points = 2048;
        c.completion.atlas_phantoms = 2;
        c.completion.atlas_points = 1024;
        c.metrics.n_gt = 1024;
        c.metrics.n_emd = 128;
        c
    }

    #[test]
    fn endpoints_follow_kind() {
        let spine = generate_synthetic_spine(&Default::default(), 0).unwrap();
        let mut c = SessionConfig::default();
        let (a, b) = scan_endpoints(&c, &spine);
        assert_eq!(a.translation.x, b.translation.x);
        assert!(b.translation.y > a.translation.y);
        c.trajectory.kind = crate::acquisition::TrajectoryKind::UShape;
        let (a, b) = scan_endpoints(&c, &spine);
        assert!((b.translation.x - a.translation.x - 30.0).abs() < 1e-9);
        c.trajectory.start = Some([0.0, 0.0, 50.0]);
        c.trajectory.end = Some([10.0, 100.0, 50.0]);
        assert_eq!(scan_endpoints(&c, &spine).1.translation, Vec3::new(10.0, 100.0, 50.0));
    }

    #[test]
    fn session_runs_end_to_end_and_lists_existing_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let mut seen = Vec::new();
        let out = run_scan(&quick_config(), dir.path(), |st, ok| seen.push((st, ok))).unwrap();
        assert_eq!(out.report.rows.len(), 5);
        assert!(seen.iter().all(|(_, ok)| *ok));
        assert_eq!(seen.len(), 8);
        let m = read_manifest(dir.path()).unwrap();
        for a in &m.artifacts {
            assert!(dir.path().join(a).exists(), "{a}");
        }
        assert!(m.label_agreement.unwrap() > 0.8, "{:?}", m.label_agreement);
        let log = std::fs::read_to_string(dir.path().join("session.log")).unwrap();
        assert!(log.contains("stage=eval status=ok"));

        let s = Session::open(dir.path()).unwrap();
        assert_eq!(s.load_completions().unwrap(), out.completions);
        assert_eq!(s.load_sweep().unwrap().frames.len(), s.load_sweep().unwrap().plan.poses.len());
    }

    #[test]
    fn failing_stage_is_logged() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = Session::create(dir.path(), SessionConfig::default()).unwrap();
        let err = s.run(Stage::Evaluate, |s| s.load_completions()).unwrap_err();
        assert!(matches!(err, Error::MissingArtifact(_)));
        let log = std::fs::read_to_string(dir.path().join("session.log")).unwrap();
        assert!(log.starts_with("stage=eval status=fail"));
        assert!(!read_manifest(dir.path()).unwrap().stages[0].ok);
    }
}
