use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CalibrationChain, ImagePoint, RigidTransform, Vec3};

/// Convex (curvilinear) probe geometry.
///
/// The probe frame has its origin at the virtual fan apex, `+z` along the
/// central beam and `+x` along the probe width. Scanline `i` leaves the apex
/// at angle `-fan/2 + fan * i / (n - 1)` from `+z` inside the x-z plane.
/// Depth is measured from the apex; the transducer face sits at
/// `aperture_radius`, so echoes are only recorded for depths in
/// `[aperture_radius, imaging_depth]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeModel {
    pub n_scanlines: usize,
    /// Full fan opening angle in degrees.
    pub fan_angle: f64,
    /// mm.
    pub imaging_depth: f64,
    pub samples_per_ray: usize,
    /// mm, radius of the transducer arc around the apex.
    pub aperture_radius: f64,
}

impl Default for ProbeModel {
    fn default() -> Self {
        Self {
            n_scanlines: 128,
            fan_angle: 60.0,
            imaging_depth: 130.0,
            samples_per_ray: 256,
            aperture_radius: 20.0,
        }
    }
}

impl ProbeModel {
    pub fn validate(&self) -> Result<()> {
        if self.n_scanlines < 2 {
            return Err(Error::invalid("probe needs at least 2 scanlines"));
        }
        if !(self.fan_angle > 0.0 && self.fan_angle < 180.0) {
            return Err(Error::invalid(format!(
                "fan angle must be in (0, 180) degrees, got {}",
                self.fan_angle
            )));
        }
        if !(self.imaging_depth > 0.0) {
            return Err(Error::invalid("imaging depth must be positive"));
        }
        if self.samples_per_ray < 1 {
            return Err(Error::invalid("samples per ray must be at least 1"));
        }
        if !(self.aperture_radius >= 0.0 && self.aperture_radius < self.imaging_depth) {
            return Err(Error::invalid(
                "aperture radius must be non-negative and below the imaging depth",
            ));
        }
        Ok(())
    }

    pub fn scanline_angle(&self, col: usize) -> f64 {
        let fan = self.fan_angle.to_radians();
        -fan / 2.0 + fan * col as f64 / (self.n_scanlines - 1) as f64
    }

    /// Unit beam direction of scanline `col` in the probe frame.
    pub fn scanline_direction(&self, col: usize) -> Vec3 {
        let a = self.scanline_angle(col);
        Vec3::new(a.sin(), 0.0, a.cos())
    }

    pub fn row_depth(&self) -> f64 {
        self.imaging_depth / self.samples_per_ray as f64
    }

    /// Depth from the apex represented by `row`.
    pub fn depth_of_row(&self, row: usize) -> f64 {
        row as f64 * self.row_depth()
    }

    /// Row holding an echo at depth `t`.
    pub fn row_of_depth(&self, t: f64) -> usize {
        let r = (t / self.imaging_depth * self.samples_per_ray as f64).round();
        (r.max(0.0) as usize).min(self.samples_per_ray - 1)
    }

    /// Probe-frame position of ray-space pixel `(col, row)`.
    pub fn pixel_position(&self, col: usize, row: usize) -> Vec3 {
        self.scanline_direction(col) * self.depth_of_row(row)
    }

    /// Half width of the scan-converted image (mm).
    pub fn image_half_width(&self) -> f64 {
        self.imaging_depth * (self.fan_angle.to_radians() / 2.0).sin()
    }

    /// Scan-converted image frame to probe frame. The image origin is the
    /// top-left corner: the apex sits at image metric `(half_width, 0)`.
    pub fn image_to_probe(&self) -> RigidTransform {
        let r = nalgebra::Matrix3::new(
            1.0, 0.0, 0.0, //
            0.0, 0.0, -1.0, //
            0.0, 1.0, 0.0,
        );
        RigidTransform {
            rotation: r,
            translation: Vec3::new(-self.image_half_width(), 0.0, 0.0),
        }
    }

    /// Pixel spacing of the scan-converted image used by default.
    pub fn default_pixel_spacing(&self) -> (f64, f64) {
        (
            2.0 * self.image_half_width() / (self.n_scanlines - 1) as f64,
            self.row_depth(),
        )
    }

    /// Scan-converted image coordinates of ray-space pixel `(col, row)`.
    pub fn ray_pixel_to_image_point(&self, col: usize, row: usize, spacing: (f64, f64)) -> ImagePoint {
        let p = self.pixel_position(col, row);
        ImagePoint::new((p.x + self.image_half_width()) / spacing.0, p.z / spacing.1)
    }

    /// Chain with identity base and mount transforms and this probe's image
    /// geometry; set the per-frame probe pose with
    /// [`CalibrationChain::with_probe_pose`].
    pub fn default_chain(&self) -> CalibrationChain {
        let i = RigidTransform::identity();
        CalibrationChain {
            t_base_world: i,
            t_ee_base: i,
            t_probe_ee: i,
            t_image_probe: self.image_to_probe(),
            pixel_spacing: self.default_pixel_spacing(),
        }
    }
}
