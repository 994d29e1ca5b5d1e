//! Session configuration (TOML). Every section and key is optional; missing
//! values take the defaults below. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::acquisition::{ProbeModel, TrajectoryKind};
use crate::completion::{AtlasOptions, CompletionArch, LossWeights};
use crate::compounding::SurfaceOptions;
use crate::error::{Error, Result};
use crate::labeling::{LabelingBackend, TrainConfig};
use crate::metrics::MetricsConfig;
use crate::phantom::SpineParams;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSection {
    /// Five vertebra meshes (PLY) to use instead of a synthetic spine.
    pub meshes: Vec<PathBuf>,
    pub params: SpineParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectorySection {
    pub kind: TrajectoryKind,
    /// Probe positions (mm). When unset they are placed over the phantom.
    pub start: Option<[f64; 3]>,
    pub end: Option<[f64; 3]>,
    pub step: f64,
    /// Automatic placement: apex height above the most posterior bone point.
    pub standoff: f64,
    /// Automatic placement: half-width of the U-shape / Zig-Zag rectangle.
    pub lateral_offset: f64,
    /// Automatic placement: extra length beyond each end of the spine.
    pub margin: f64,
}

impl Default for TrajectorySection {
    fn default() -> Self {
        Self {
            kind: TrajectoryKind::Linear,
            start: None,
            end: None,
            step: 2.0,
            standoff: 25.0,
            lateral_offset: 15.0,
            margin: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelingSection {
    pub backend: LabelingBackend,
    /// Weight file stem of a trained classifier (classifier backend).
    pub model: Option<PathBuf>,
    /// Labeling axis for the geometric backend; defaults to the direction of
    /// the first scan segment.
    pub axis: Option<[f64; 3]>,
}

impl Default for LabelingSection {
    fn default() -> Self {
        Self {
            backend: LabelingBackend::Geometric,
            model: None,
            axis: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompletionBackendKind {
    AtlasIcp,
    Learned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompletionSection {
    pub backend: CompletionBackendKind,
    pub margin: f64,
    /// Saved atlas (JSON). Without one, an atlas is built from
    /// `atlas_phantoms` synthetic spines with seeds `seed + 1 ..`.
    pub atlas: Option<PathBuf>,
    pub atlas_phantoms: usize,
    pub atlas_points: usize,
    pub icp: AtlasOptions,
    /// Weight file stem of a trained completion model (learned backend).
    pub model: Option<PathBuf>,
}

impl Default for CompletionSection {
    fn default() -> Self {
        Self {
            backend: CompletionBackendKind::AtlasIcp,
            margin: crate::completion::DEFAULT_MARGIN,
            atlas: None,
            atlas_phantoms: 8,
            atlas_points: 2048,
            icp: AtlasOptions::default(),
            model: None,
        }
    }
}

/// Settings for the `train` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub phantoms: usize,
    pub grid_spacing: f64,
    pub tilt_deg: f64,
    pub classifier: TrainConfig,
    pub completion: TrainConfig,
    pub completion_arch: CompletionArch,
    pub loss: LossWeights,
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self {
            phantoms: 20,
            grid_spacing: 1.5,
            tilt_deg: 10.0,
            classifier: TrainConfig::default(),
            completion: TrainConfig::default(),
            completion_arch: CompletionArch::default(),
            loss: LossWeights::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionConfig {
    pub seed: u64,
    pub phantom: PhantomSection,
    pub trajectory: TrajectorySection,
    pub probe: ProbeModel,
    pub compounding: SurfaceOptions,
    pub labeling: LabelingSection,
    pub completion: CompletionSection,
    pub metrics: MetricsConfig,
    pub training: TrainingSection,
}

impl SessionConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
            _ => Error::io(path, e),
        })?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.probe.validate()?;
        self.phantom.params.validate()?;
        if !self.phantom.meshes.is_empty() && self.phantom.meshes.len() != 5 {
            return Err(Error::Config(format!(
                "phantom.meshes needs 5 files, got {}",
                self.phantom.meshes.len()
            )));
        }
        for p in self
            .phantom
            .meshes
            .iter()
            .chain(&self.completion.atlas)
            .chain(&self.labeling.model)
            .chain(&self.completion.model)
        {
            // weight files are given as stems; check the manifest next to them
            let check = if p.extension().is_some() { p.clone() } else { p.with_extension("json") };
            if !check.exists() {
                return Err(Error::MissingArtifact(check));
            }
        }
        let t = &self.trajectory;
        if !(t.step > 0.0 && t.standoff >= 0.0 && t.lateral_offset > 0.0 && t.margin >= 0.0) {
            return Err(Error::Config("trajectory step/offsets must be positive".into()));
        }
        if t.start.is_some() != t.end.is_some() {
            return Err(Error::Config("trajectory.start and trajectory.end must be given together".into()));
        }
        if !(self.compounding.spacing > 0.0) || self.compounding.n_points == 0 {
            return Err(Error::Config("compounding spacing and n_points must be positive".into()));
        }
        if self.labeling.backend == LabelingBackend::Classifier && self.labeling.model.is_none() {
            return Err(Error::Config("classifier labeling needs labeling.model".into()));
        }
        if self.completion.backend == CompletionBackendKind::Learned && self.completion.model.is_none() {
            return Err(Error::Config("learned completion needs completion.model".into()));
        }
        if self.completion.backend == CompletionBackendKind::AtlasIcp
            && self.completion.atlas.is_none()
            && self.completion.atlas_phantoms == 0
        {
            return Err(Error::Config("atlas completion needs completion.atlas or atlas_phantoms > 0".into()));
        }
        if !(self.completion.margin >= 0.0) {
            return Err(Error::Config("completion.margin must be non-negative".into()));
        }
        Ok(())
    }
}
