//! Simulated robotic ultrasound spine scanning and vertebra shape completion.
//!
//! Stages: synthetic phantom ([`phantom`]) → planned sweep with simulated
//! bone segmentation ([`acquisition`]) → compounding and surface sampling
//! ([`compounding`]) → per-point vertebra labels ([`labeling`]) → per-level
//! shape completion ([`completion`]) → evaluation ([`metrics`]). The
//! [`pipeline`] module strings them together with on-disk sessions.

pub mod acquisition;
pub mod cloud;
pub mod completion;
pub mod compounding;
pub mod error;
pub mod geometry;
pub mod labeling;
pub mod mesh;
pub mod metrics;
pub mod nn;
pub mod phantom;
pub mod pipeline;
pub mod ply;
pub mod spatial;

pub use cloud::{LabeledPointCloud, PointCloud, LEVELS};
pub use error::{Error, Result};
pub use geometry::{CalibrationChain, ImagePoint, RigidTransform, Vec3, WorldPoint};
pub use mesh::TriMesh;
pub use phantom::{SpineModel, SpineParams};
