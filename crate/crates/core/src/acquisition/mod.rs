//! Trajectory planning and simulated tracked ultrasound sweeps.

pub mod io;
pub mod probe;
pub mod simulate;
pub mod trajectory;

pub use probe::ProbeModel;
pub use simulate::{
    acquire_sweep, acquire_sweep_in, raycast_partial_surface, raycast_scene, simulate_frame, SegmentationFrame,
    SpineScene, Sweep,
};
pub use trajectory::{plan, plan_linear, plan_ushape, plan_zigzag, TrajectoryKind, TrajectoryPlan};
