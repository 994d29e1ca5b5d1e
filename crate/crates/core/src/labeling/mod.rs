//! Per-point vertebra labels: a geometric baseline and a trainable
//! point-wise classifier.

pub mod classifier;
pub mod geometric;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::acquisition::{raycast_scene, SpineScene};
use crate::cloud::LabeledPointCloud;
use crate::error::Result;
use crate::geometry::Vec3;
use crate::phantom::{generate_synthetic_spine, SpineParams};

pub use classifier::{
    classify_points, point_accuracy, train_point_classifier, ClassifierArch, EpochStats, PointClassifier, TrainConfig,
    TrainOutcome,
};
pub use geometric::label_by_geometry;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelingBackend {
    Geometric,
    Classifier,
}

/// Viewing direction from the skin side (`-z`) tilted by up to `tilt_deg`.
pub fn posterior_direction<R: Rng>(rng: &mut R, tilt_deg: f64) -> Vec3 {
    if tilt_deg <= 0.0 {
        return -Vec3::z();
    }
    let t = tilt_deg.to_radians();
    let (a, b) = (rng.random_range(-t..=t), rng.random_range(-t..=t));
    Vec3::new(a.tan(), b.tan(), -1.0).normalize()
}

/// Posterior ray-cast clouds of synthetic spines with seeds
/// `first_seed..first_seed + n`, each seen from a slightly tilted direction.
pub fn raycast_training_clouds(
    params: &SpineParams,
    first_seed: u64,
    n: usize,
    grid_spacing: f64,
    tilt_deg: f64,
) -> Result<Vec<LabeledPointCloud>> {
    (0..n as u64)
        .map(|i| {
            let seed = first_seed + i;
            let spine = generate_synthetic_spine(params, seed)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            let dir = posterior_direction(&mut rng, tilt_deg);
            raycast_scene(&SpineScene::new(&spine), &dir, grid_spacing)
        })
        .collect()
}
