//! Pinhole camera model over a planar east/north world frame.
//!
//! World points carry their height above ground in `z`; the camera sits
//! `mount_height` meters above the ground at `position`. Image coordinates
//! are centered on the principal point with `v` pointing up. Rasters use
//! row 0 at the top; [`ImagePoint::to_raster`] converts between the two, with
//! pixel centers at integer raster coordinates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 2D point in the world map plane (meters, east/north).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn at_height(&self, z: f64) -> WorldPoint {
        WorldPoint::new(self.x, self.y, z)
    }
}

/// A real-world point; `z` is the height above ground in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl WorldPoint {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }
}

/// Image-plane point in pixels, origin at the image center, `v` up.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImagePoint {
    pub u: f64,
    pub v: f64,
}

impl ImagePoint {
    pub const fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    /// Raster coordinates `(col, row)` where pixel centers are integers.
    pub fn to_raster(&self, width: usize, height: usize) -> (f64, f64) {
        (
            self.u + width as f64 / 2.0 - 0.5,
            height as f64 / 2.0 - 0.5 - self.v,
        )
    }

    pub fn from_raster(col: f64, row: f64, width: usize, height: usize) -> Self {
        Self {
            u: col - width as f64 / 2.0 + 0.5,
            v: height as f64 / 2.0 - 0.5 - row,
        }
    }
}

/// Camera pose and intrinsics.
///
/// `heading` is measured clockwise from north, `pitch` upward from the
/// horizontal. Roll is always zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub position: Point2,
    pub heading: f64,
    pub pitch: f64,
    pub focal_length: f64,
    pub image_width: usize,
    pub image_height: usize,
    pub mount_height: f64,
}

impl CameraPose {
    pub fn new(
        position: Point2,
        heading: f64,
        pitch: f64,
        focal_length: f64,
        image_width: usize,
        image_height: usize,
        mount_height: f64,
    ) -> Result<Self> {
        let pose = Self {
            position,
            heading,
            pitch,
            focal_length,
            image_width,
            image_height,
            mount_height,
        };
        pose.validate()?;
        Ok(pose)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.position.x.is_finite()
            && self.position.y.is_finite()
            && self.heading.is_finite()
            && self.pitch.is_finite()
            && self.mount_height.is_finite();
        if !finite {
            return Err(Error::InvalidPose("non-finite field".into()));
        }
        if !(self.focal_length > 0.0 && self.focal_length.is_finite()) {
            return Err(Error::InvalidPose(format!(
                "focal length must be positive, got {}",
                self.focal_length
            )));
        }
        if self.image_width == 0 || self.image_height == 0 {
            return Err(Error::InvalidPose("image dimensions must be positive".into()));
        }
        if self.pitch.abs() >= std::f64::consts::FRAC_PI_2 {
            return Err(Error::InvalidPose(format!("|pitch| must be < pi/2, got {}", self.pitch)));
        }
        if self.mount_height < 0.0 {
            return Err(Error::InvalidPose("mount height must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn with_position(&self, position: Point2) -> Self {
        Self { position, ..*self }
    }

    pub fn with_pitch(&self, pitch: f64) -> Self {
        Self { pitch, ..*self }
    }

    /// Horizontal unit vector along the heading, in (east, north).
    pub fn forward(&self) -> Point2 {
        Point2::new(self.heading.sin(), self.heading.cos())
    }

    /// Horizontal unit vector to the camera's right, in (east, north).
    pub fn right(&self) -> Point2 {
        Point2::new(self.heading.cos(), -self.heading.sin())
    }

    /// Camera-frame coordinates `(right, up, forward)` of a world point.
    pub fn camera_coords(&self, p: &WorldPoint) -> [f64; 3] {
        let dx = p.x - self.position.x;
        let dy = p.y - self.position.y;
        let dz = p.z - self.mount_height;
        let fwd = self.forward();
        let right = self.right();
        let horizontal = dx * fwd.x + dy * fwd.y;
        let lateral = dx * right.x + dy * right.y;
        let (sp, cp) = self.pitch.sin_cos();
        let depth = cp * horizontal + sp * dz;
        let up = -sp * horizontal + cp * dz;
        [lateral, up, depth]
    }

    /// Raster coordinates of an image point for this camera's image size.
    pub fn to_raster(&self, p: &ImagePoint) -> (f64, f64) {
        p.to_raster(self.image_width, self.image_height)
    }

    pub fn from_raster(&self, col: f64, row: f64) -> ImagePoint {
        ImagePoint::from_raster(col, row, self.image_width, self.image_height)
    }
}

/// Signed depth of `p` along the optical axis.
pub fn distance_along_axis(pose: &CameraPose, p: &WorldPoint) -> f64 {
    pose.camera_coords(p)[2]
}

/// Projects a world point into the image.
pub fn project_point(pose: &CameraPose, p: &WorldPoint) -> Result<ImagePoint> {
    let [x, y, z] = pose.camera_coords(p);
    if z <= 0.0 {
        return Err(Error::PointBehindCamera { depth: z });
    }
    Ok(ImagePoint::new(
        pose.focal_length * x / z,
        pose.focal_length * y / z,
    ))
}

/// Building height from the roofline's pixel height above the center line.
pub fn height_from_roofline(h_r: f64, d_hat: f64, pose: &CameraPose) -> Result<f64> {
    if pose.pitch != 0.0 {
        return Err(Error::NonHorizontalPose { pitch: pose.pitch });
    }
    if !(d_hat > 0.0) {
        return Err(Error::NonPositiveDistance(d_hat));
    }
    Ok(h_r * d_hat / pose.focal_length + pose.mount_height)
}

/// Largest height above the center line (meters) that still fits in the frame
/// at depth `d_hat`.
pub fn max_visible_height(d_hat: f64, pose: &CameraPose) -> Result<f64> {
    if !(d_hat > 0.0) {
        return Err(Error::NonPositiveDistance(d_hat));
    }
    Ok(d_hat * pose.image_height as f64 / (2.0 * pose.focal_length))
}

/// The three corner roles of a footprint relative to a camera.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CornerRole {
    /// Nearest to the camera.
    Cn,
    /// Projects farthest from the image's vertical axis.
    Cx,
    /// Projects closest to the image's vertical axis.
    Cz,
}

/// Footprint corner index for each role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CornerRoles {
    pub cn: usize,
    pub cx: usize,
    pub cz: usize,
}

impl CornerRoles {
    pub fn get(&self, role: CornerRole) -> usize {
        match role {
            CornerRole::Cn => self.cn,
            CornerRole::Cx => self.cx,
            CornerRole::Cz => self.cz,
        }
    }
}

/// A building footprint: a simple counter-clockwise polygon in world meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildingFootprint {
    pub id: String,
    pub corners: Vec<Point2>,
    pub true_height: Option<f64>,
}

impl BuildingFootprint {
    /// Validates the polygon and re-orients clockwise input to counter-clockwise.
    pub fn new(id: impl Into<String>, corners: Vec<Point2>, true_height: Option<f64>) -> Result<Self> {
        let id = id.into();
        let invalid = |reason: &str| Error::InvalidFootprint {
            id: id.clone(),
            reason: reason.to_string(),
        };
        if corners.len() < 3 {
            return Err(invalid("footprint needs at least 3 corners"));
        }
        if corners.iter().any(|c| !c.x.is_finite() || !c.y.is_finite()) {
            return Err(invalid("non-finite corner coordinate"));
        }
        if let Some(h) = true_height {
            if !h.is_finite() || h < 0.0 {
                return Err(invalid("height must be a nonnegative number"));
            }
        }
        let area = signed_area(&corners);
        if area.abs() < 1e-12 {
            return Err(invalid("footprint has zero area"));
        }
        if !is_simple(&corners) {
            return Err(invalid("footprint polygon is self-intersecting"));
        }
        let mut corners = corners;
        if area < 0.0 {
            corners.reverse();
        }
        Ok(Self {
            id,
            corners,
            true_height,
        })
    }

    /// Indices of the corners adjacent to `index` as (previous, next).
    pub fn neighbors(&self, index: usize) -> (usize, usize) {
        let n = self.corners.len();
        ((index + n - 1) % n, (index + 1) % n)
    }

    pub fn centroid(&self) -> Point2 {
        let n = self.corners.len() as f64;
        let (sx, sy) = self
            .corners
            .iter()
            .fold((0.0, 0.0), |(sx, sy), c| (sx + c.x, sy + c.y));
        Point2::new(sx / n, sy / n)
    }
}

/// Shoelace signed area; positive for counter-clockwise polygons.
pub fn signed_area(corners: &[Point2]) -> f64 {
    let n = corners.len();
    (0..n)
        .map(|i| {
            let a = corners[i];
            let b = corners[(i + 1) % n];
            a.x * b.y - b.x * a.y
        })
        .sum::<f64>()
        / 2.0
}

fn orient(a: Point2, b: Point2, c: Point2) -> f64 {
    (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)
}

fn on_segment(a: Point2, b: Point2, p: Point2) -> bool {
    p.x >= a.x.min(b.x) && p.x <= a.x.max(b.x) && p.y >= a.y.min(b.y) && p.y <= a.y.max(b.y)
}

fn segments_intersect(a: Point2, b: Point2, c: Point2, d: Point2) -> bool {
    let o1 = orient(a, b, c);
    let o2 = orient(a, b, d);
    let o3 = orient(c, d, a);
    let o4 = orient(c, d, b);
    if o1 * o2 < 0.0 && o3 * o4 < 0.0 {
        return true;
    }
    (o1 == 0.0 && on_segment(a, b, c))
        || (o2 == 0.0 && on_segment(a, b, d))
        || (o3 == 0.0 && on_segment(c, d, a))
        || (o4 == 0.0 && on_segment(c, d, b))
}

/// True when no two non-adjacent edges intersect and no corner repeats.
pub fn is_simple(corners: &[Point2]) -> bool {
    let n = corners.len();
    for i in 0..n {
        for j in (i + 1)..n {
            if corners[i] == corners[j] {
                return false;
            }
        }
    }
    for i in 0..n {
        let a = corners[i];
        let b = corners[(i + 1) % n];
        for j in (i + 1)..n {
            let adjacent = j == i + 1 || (i == 0 && j == n - 1);
            if adjacent {
                continue;
            }
            let c = corners[j];
            let d = corners[(j + 1) % n];
            if segments_intersect(a, b, c, d) {
                return false;
            }
        }
    }
    true
}

/// Resolves the Cn/Cx/Cz corner roles of a footprint for a camera pose.
///
/// Only corners in front of the camera participate; ties go to the lowest
/// corner index.
pub fn classify_corner_roles(fp: &BuildingFootprint, pose: &CameraPose) -> Result<CornerRoles> {
    let mut cn: Option<(usize, f64)> = None;
    let mut cx: Option<(usize, f64)> = None;
    let mut cz: Option<(usize, f64)> = None;
    for (i, c) in fp.corners.iter().enumerate() {
        // Roles are decided on the ground plane at camera height.
        let p = WorldPoint::new(c.x, c.y, pose.mount_height);
        let [x, _, z] = pose.camera_coords(&p);
        if z <= 0.0 {
            continue;
        }
        let dist = c.distance(&pose.position);
        let abs_u = (pose.focal_length * x / z).abs();
        if cn.is_none_or(|(_, best)| dist < best) {
            cn = Some((i, dist));
        }
        if cx.is_none_or(|(_, best)| abs_u > best) {
            cx = Some((i, abs_u));
        }
        if cz.is_none_or(|(_, best)| abs_u < best) {
            cz = Some((i, abs_u));
        }
    }
    match (cn, cx, cz) {
        (Some(cn), Some(cx), Some(cz)) => Ok(CornerRoles {
            cn: cn.0,
            cx: cx.0,
            cz: cz.0,
        }),
        _ => Err(Error::NoVisibleCorner(fp.id.clone())),
    }
}
