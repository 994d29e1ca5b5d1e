//! Point cloud containers shared across the pipeline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;

/// Number of lumbar levels (L1..L5).
pub const LEVELS: u8 = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Empty("point cloud"));
        }
        if points.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(Error::invalid("point cloud contains non-finite coordinates"));
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Points with per-point vertebra labels; 0 means unassigned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledPointCloud {
    pub points: Vec<Vec3>,
    pub labels: Vec<u8>,
}

impl LabeledPointCloud {
    pub fn new(points: Vec<Vec3>, labels: Vec<u8>) -> Result<Self> {
        if points.len() != labels.len() {
            return Err(Error::invalid(format!(
                "{} points but {} labels",
                points.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l > LEVELS) {
            return Err(Error::invalid(format!("label {bad} out of range 0..={LEVELS}")));
        }
        Ok(Self { points, labels })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Points carrying `level`.
    pub fn level_points(&self, level: u8) -> Vec<Vec3> {
        self.points
            .iter()
            .zip(&self.labels)
            .filter(|(_, &l)| l == level)
            .map(|(p, _)| *p)
            .collect()
    }

    /// Sorted distinct non-zero labels.
    pub fn present_levels(&self) -> Vec<u8> {
        let mut seen = [false; LEVELS as usize + 1];
        for &l in &self.labels {
            seen[l as usize] = true;
        }
        (1..=LEVELS).filter(|&l| seen[l as usize]).collect()
    }

    pub fn unlabeled(&self) -> PointCloud {
        PointCloud {
            points: self.points.clone(),
        }
    }

    /// Fraction of points whose label equals `truth`'s label at the same index.
    pub fn agreement(&self, truth: &[u8]) -> f64 {
        if self.labels.is_empty() {
            return 0.0;
        }
        let hits = self
            .labels
            .iter()
            .zip(truth)
            .filter(|(a, b)| a == b)
            .count();
        hits as f64 / self.labels.len() as f64
    }
}
