//! Camera position calibration from two matched building corners.
//!
//! The solver works in a frame with the first corner at the origin and the
//! camera heading as `+y`. With signed bearings (right positive) the camera
//! sits `D` meters behind the origin along the axis, where
//!
//! ```text
//! D = (x - y * tan(theta2)) / (tan(theta2) - tan(theta1))
//! ```
//!
//! and its lateral offset is `-D * tan(theta1)`. Writing `theta1' = theta2` and
//! `theta2' = -theta1` recovers the familiar `(x - y tan a) / (tan a + tan b)`
//! form with unsigned bearings on opposite sides of the axis.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraPose, Point2};

/// Default displacement limit (meters) beyond which the GPS prior is kept.
pub const DEFAULT_ACCEPT_THRESHOLD_M: f64 = 3.0;

/// A footprint corner and the signed bearing at which the camera sees it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CornerObservation {
    pub world: Point2,
    /// Radians from the camera heading; left negative, right positive.
    pub bearing: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub position: Point2,
    pub displacement: f64,
    pub accepted: bool,
}

/// Horizontal bearing of an image column (`u` relative to the image center).
pub fn bearing_from_pixel(pose: &CameraPose, u: f64) -> f64 {
    (u / pose.focal_length).atan()
}

/// Bearing of a world corner as seen from `position` with the given heading.
pub fn bearing_to(position: Point2, heading: f64, corner: Point2) -> f64 {
    let dx = corner.x - position.x;
    let dy = corner.y - position.y;
    let forward = dx * heading.sin() + dy * heading.cos();
    let lateral = dx * heading.cos() - dy * heading.sin();
    lateral.atan2(forward)
}

/// Recovers the camera position from two corner observations and a known heading.
pub fn calibrate_two_corners(
    c1: &CornerObservation,
    c2: &CornerObservation,
    heading: f64,
) -> Result<Point2> {
    if c1.world == c2.world {
        return Err(Error::DegenerateGeometry("reference corners coincide"));
    }
    let fwd = Point2::new(heading.sin(), heading.cos());
    let right = Point2::new(heading.cos(), -heading.sin());
    let dx = c2.world.x - c1.world.x;
    let dy = c2.world.y - c1.world.y;
    let x = dx * right.x + dy * right.y;
    let y = dx * fwd.x + dy * fwd.y;

    let t1 = c1.bearing.tan();
    let t2 = c2.bearing.tan();
    let denom = t2 - t1;
    if !denom.is_finite() || denom.abs() < 1e-9 {
        return Err(Error::DegenerateGeometry(
            "camera is collinear with both sight-lines",
        ));
    }
    let behind = (x - y * t2) / denom;
    let lateral = -behind * t1;
    let along = -behind;
    Ok(Point2::new(
        c1.world.x + lateral * right.x + along * fwd.x,
        c1.world.y + lateral * right.y + along * fwd.y,
    ))
}

/// Keeps the computed position only when it lies within `threshold` of the prior.
pub fn accept_calibration_with(computed: Point2, gps_prior: Point2, threshold: f64) -> CalibrationResult {
    let displacement = computed.distance(&gps_prior);
    if displacement > threshold || !displacement.is_finite() {
        CalibrationResult {
            position: gps_prior,
            displacement,
            accepted: false,
        }
    } else {
        CalibrationResult {
            position: computed,
            displacement,
            accepted: true,
        }
    }
}

pub fn accept_calibration(computed: Point2, gps_prior: Point2) -> CalibrationResult {
    accept_calibration_with(computed, gps_prior, DEFAULT_ACCEPT_THRESHOLD_M)
}

/// Median of per-image height estimates; even counts average the central pair.
pub fn multi_sample_height(estimates: &[f64]) -> Result<f64> {
    if estimates.is_empty() {
        return Err(Error::EmptyInput("no height estimates"));
    }
    let mut sorted = estimates.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    Ok(if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    })
}
