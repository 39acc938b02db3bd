//! Corner and roofline candidates from a height ladder over projected
//! footprint corners, plus the fixed-size patches fed to the classifier.

use serde::{Deserialize, Serialize};

use crate::edgemap::{clip_segment, disk_pixels, weighted_hough, EdgeMap, HoughQuery, LineSegment, Pixel, DEFAULT_ANGLE_STEP};
use crate::error::{Error, Result};
use crate::geometry::{
    classify_corner_roles, distance_along_axis, max_visible_height, project_point, BuildingFootprint, CameraPose, CornerRole,
    WorldPoint,
};
use crate::ranking::CandidateFeatures;

pub const PATCH_SIZE: usize = 28;
pub const WINDOW_SIZE: usize = 120;
/// Maximum arm length when scoring a corner location.
pub const ARM_PX: f64 = 60.0;
/// Half height of the strip sampled around a roofline.
pub const STRIP_HALF: usize = 10;

/// A 28x28 intensity patch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Patch {
    pub data: Vec<u8>,
}

impl Patch {
    pub fn from_data(data: Vec<u8>) -> Result<Self> {
        if data.len() != PATCH_SIZE * PATCH_SIZE {
            return Err(Error::DimensionMismatch(format!("patch has {} values", data.len())));
        }
        Ok(Self { data })
    }

    /// Integer crop whose center pixel is the rounded `center`; outside pixels are 0.
    pub fn crop(map: &EdgeMap, center: (f64, f64)) -> Self {
        let half = (PATCH_SIZE / 2) as i64;
        let x0 = center.0.round() as i64 - half;
        let y0 = center.1.round() as i64 - half;
        let mut data = Vec::with_capacity(PATCH_SIZE * PATCH_SIZE);
        for y in 0..PATCH_SIZE as i64 {
            for x in 0..PATCH_SIZE as i64 {
                data.push(map.get_or_zero(Pixel::new(x0 + x, y0 + y)));
            }
        }
        Self { data }
    }

    /// Intensities scaled to `[0, 1]`.
    pub fn to_input(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64 / 255.0).collect()
    }

    pub fn to_edge_map(&self) -> EdgeMap {
        EdgeMap::from_pixels(PATCH_SIZE, PATCH_SIZE, self.data.clone()).expect("patch size")
    }

    pub fn from_edge_map(map: &EdgeMap) -> Result<Self> {
        if map.width() != PATCH_SIZE || map.height() != PATCH_SIZE {
            return Err(Error::DimensionMismatch(format!(
                "patch image is {}x{}",
                map.width(),
                map.height()
            )));
        }
        Self::from_data(map.pixels().to_vec())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

/// Corner classes seen by the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CornerType {
    CnLeft,
    CzLeft,
    CnRight,
    CzRight,
}

impl CornerType {
    pub const ALL: [CornerType; 4] = [CornerType::CnLeft, CornerType::CzLeft, CornerType::CnRight, CornerType::CzRight];

    pub fn new(role: CornerRole, side: Side) -> Self {
        match (role, side) {
            (CornerRole::Cz, Side::Left) => CornerType::CzLeft,
            (CornerRole::Cz, Side::Right) => CornerType::CzRight,
            (_, Side::Left) => CornerType::CnLeft,
            (_, Side::Right) => CornerType::CnRight,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            CornerType::CnLeft => "cn-left",
            CornerType::CzLeft => "cz-left",
            CornerType::CnRight => "cn-right",
            CornerType::CzRight => "cz-right",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.label() == s)
    }

    pub fn class_index(&self) -> usize {
        Self::ALL.iter().position(|c| c == self).unwrap()
    }
}

/// Roofline classes, named by the corners they join.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RooflineKind {
    CnCx,
    CnCzLeft,
    CnCzRight,
}

impl RooflineKind {
    pub const ALL: [RooflineKind; 3] = [RooflineKind::CnCx, RooflineKind::CnCzLeft, RooflineKind::CnCzRight];

    pub fn label(&self) -> &'static str {
        match self {
            RooflineKind::CnCx => "cn-cx",
            RooflineKind::CnCzLeft => "cn-cz-left",
            RooflineKind::CnCzRight => "cn-cz-right",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.label() == s)
    }

    pub fn class_index(&self) -> usize {
        Self::ALL.iter().position(|c| c == self).unwrap()
    }

    /// Kind of the roofline from the nearest corner (at image offset `u_near`)
    /// to a neighbor at `u_far`: moving away from the image's vertical axis
    /// joins the widest-projecting corner, anything else the receding side.
    pub fn between(u_near: f64, u_far: f64) -> Self {
        if u_far.abs() > u_near.abs() {
            RooflineKind::CnCx
        } else if u_near < 0.0 {
            RooflineKind::CnCzLeft
        } else {
            RooflineKind::CnCzRight
        }
    }
}

/// Tunables shared by both candidate generators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateParams {
    pub height_step: f64,
    pub gate_px: f64,
}

impl Default for CandidateParams {
    fn default() -> Self {
        Self {
            height_step: 0.5,
            gate_px: 3.0,
        }
    }
}

/// Heights above the camera's center line, from the largest visible one down
/// to 0 in steps of `step`; the last entry is always 0.
pub fn sweep_heights_with_step(d_hat: f64, pose: &CameraPose, step: f64) -> Result<Vec<f64>> {
    let top = max_visible_height(d_hat, pose)?;
    let step = if step > 0.0 { step } else { 0.5 };
    let mut out = Vec::new();
    let mut k = 0usize;
    loop {
        let h = top - k as f64 * step;
        if h <= 1e-9 {
            break;
        }
        out.push(h);
        k += 1;
    }
    out.push(0.0);
    Ok(out)
}

pub fn sweep_heights(d_hat: f64, pose: &CameraPose) -> Result<Vec<f64>> {
    sweep_heights_with_step(d_hat, pose, 0.5)
}

/// Raster position of a footprint corner raised `above_center` meters above
/// the camera's center line.
pub fn corner_raster(pose: &CameraPose, corner: crate::geometry::Point2, above_center: f64) -> Result<(f64, f64)> {
    let p = WorldPoint::new(corner.x, corner.y, pose.mount_height + above_center);
    Ok(pose.to_raster(&project_point(pose, &p)?))
}

/// Side of the image a building falls on, judged at its nearest corner.
pub fn building_side(fp: &BuildingFootprint, pose: &CameraPose) -> Result<Side> {
    let roles = classify_corner_roles(fp, pose)?;
    let c = fp.corners[roles.cn];
    let u = project_point(pose, &c.at_height(pose.mount_height))?.u;
    Ok(if u < 0.0 { Side::Left } else { Side::Right })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CornerCandidate {
    pub building: usize,
    pub building_id: String,
    pub role: CornerRole,
    pub corner_index: usize,
    pub assumed_height: f64,
    pub ladder_index: usize,
    /// Window center: the projection of the corner at the assumed height.
    pub window_center: (f64, f64),
    /// Best-supported corner pixel inside the window, with a sub-pixel column.
    pub location: (f64, f64),
    pub patch: Patch,
    pub corner_type: CornerType,
    pub features: CandidateFeatures,
}

struct Localized {
    pixel: Pixel,
    col: f64,
    omega: f64,
    lambda: f64,
}

fn arm(map: &EdgeMap, q: Pixel, dir: (f64, f64), len: f64) -> Option<LineSegment> {
    let start = q.as_f64();
    let end = (start.0 + dir.0 * len, start.1 + dir.1 * len);
    let (_, b) = clip_segment(start, end, map.width(), map.height())?;
    let end = Pixel::round(b);
    if !map.contains(end) || end == q {
        return None;
    }
    LineSegment::measure(map, q, end).ok()
}

fn supported(map: &EdgeMap, seg: &LineSegment) -> f64 {
    seg.pixels().filter(|&p| map.get_or_zero(p) > 0).count() as f64
}

/// Intensity-weighted column of a vertical line below `top`, as the median
/// over rows whose cross-section looks like a single stroke.
pub fn vertical_line_column(map: &EdgeMap, top: Pixel, rows: std::ops::Range<i64>) -> Option<f64> {
    let mut cols = Vec::new();
    for dy in rows {
        let y = top.y + dy;
        let (mut mass, mut moment) = (0.0, 0.0);
        for dx in -2..=2 {
            let v = map.get_or_zero(Pixel::new(top.x + dx, y)) as f64;
            mass += v;
            moment += v * (top.x + dx) as f64;
        }
        if mass > 0.5 * 255.0 && mass < 1.5 * 255.0 {
            cols.push(moment / mass);
        }
    }
    if cols.len() < 3 {
        return None;
    }
    cols.sort_by(f64::total_cmp);
    let n = cols.len();
    Some(if n % 2 == 1 { cols[n / 2] } else { 0.5 * (cols[n / 2 - 1] + cols[n / 2]) })
}

fn localize(map: &EdgeMap, center: (f64, f64), band: i64, arms: &[((f64, f64), f64)]) -> Option<Localized> {
    let half = (WINDOW_SIZE / 2) as i64;
    let cx = center.0.round() as i64;
    let cy = center.1.round() as i64;
    let mut best: Option<(f64, f64, f64, Pixel)> = None;
    for y in (cy - band)..=(cy + band) {
        for x in (cx - half)..=(cx + half) {
            let q = Pixel::new(x, y);
            if map.get_or_zero(q) == 0 {
                continue;
            }
            let mut scored: Vec<(f64, f64)> = std::iter::once(((0.0, 1.0), ARM_PX))
                .chain(arms.iter().copied())
                .filter_map(|(dir, len)| arm(map, q, dir, len))
                .map(|s| (s.edgeness, supported(map, &s)))
                .collect();
            scored.sort_by(|a, b| b.0.total_cmp(&a.0));
            scored.truncate(2);
            let omega: f64 = scored.iter().map(|s| s.0).sum();
            let lambda: f64 = scored.iter().map(|s| s.1).sum();
            let dist = q.distance_to(center);
            let better = match best {
                None => true,
                Some((bo, _, bd, bp)) => omega > bo || (omega == bo && (dist < bd || (dist == bd && q < bp))),
            };
            if better {
                best = Some((omega, lambda, dist, q));
            }
        }
    }
    let (omega, lambda, _, pixel) = best?;
    if omega <= 0.0 {
        return None;
    }
    let col = vertical_line_column(map, pixel, 4..40).unwrap_or(pixel.x as f64);
    Some(Localized {
        pixel,
        col,
        omega,
        lambda,
    })
}

/// Horizontal distance to the nearer of the image's quarter verticals.
pub fn quarter_distance(col: f64, width: usize) -> f64 {
    let w = width as f64;
    // Pixel-center columns: the quarter lines sit at w/4 - 0.5 and 3w/4 - 0.5.
    ((col - (w / 4.0 - 0.5)).abs()).min((col - (3.0 * w / 4.0 - 0.5)).abs())
}

fn window_touches_raster(center: (f64, f64), map: &EdgeMap) -> bool {
    let half = (WINDOW_SIZE / 2) as f64;
    center.0 + half >= 0.0
        && center.1 + half >= 0.0
        && center.0 - half <= map.width() as f64 - 1.0
        && center.1 - half <= map.height() as f64 - 1.0
}

/// Corner candidates for roles Cn and Cz over each corner's height ladder.
pub fn corner_candidates(
    fp: &BuildingFootprint,
    building: usize,
    pose: &CameraPose,
    map: &EdgeMap,
    params: &CandidateParams,
) -> Result<Vec<CornerCandidate>> {
    let roles = classify_corner_roles(fp, pose)?;
    let side = building_side(fp, pose)?;
    let mut out = Vec::new();
    let mut role_list = vec![(CornerRole::Cn, roles.cn)];
    if roles.cz != roles.cn {
        role_list.push((CornerRole::Cz, roles.cz));
    }
    for (role, idx) in role_list {
        let corner = fp.corners[idx];
        let d_hat = distance_along_axis(pose, &corner.at_height(pose.mount_height));
        let ladder = sweep_heights_with_step(d_hat, pose, params.height_step)?;
        let step_px = pose.focal_length * params.height_step / d_hat;
        let band = (step_px / 2.0).ceil().max(1.0) as i64;
        let (prev, next) = fp.neighbors(idx);
        for (k, &h) in ladder.iter().enumerate() {
            let center = corner_raster(pose, corner, h)?;
            if !window_touches_raster(center, map) {
                continue;
            }
            let arms: Vec<_> = [prev, next]
                .iter()
                .filter_map(|&n| {
                    let other = corner_raster(pose, fp.corners[n], h).ok()?;
                    let (dx, dy) = (other.0 - center.0, other.1 - center.1);
                    let len = dx.hypot(dy);
                    (len > 1.0).then(|| ((dx / len, dy / len), len.min(ARM_PX)))
                })
                .collect();
            let loc = localize(map, center, band, &arms);
            let (location, omega, lambda) = match &loc {
                Some(l) => ((l.col, l.pixel.y as f64), l.omega, l.lambda),
                None => (center, 0.0, 0.0),
            };
            let corner_dist = corner.distance(&pose.position);
            out.push(CornerCandidate {
                building,
                building_id: fp.id.clone(),
                role,
                corner_index: idx,
                assumed_height: h,
                ladder_index: k,
                window_center: center,
                location,
                patch: Patch::crop(map, location),
                corner_type: CornerType::new(role, side),
                features: CandidateFeatures {
                    lambda,
                    omega,
                    tau: 0.0,
                    rho: quarter_distance(location.0, map.width()),
                    d: corner_dist,
                },
            });
        }
    }
    assign_corner_agreement(&mut out, params.height_step);
    Ok(out)
}

/// Sets each candidate's agreement count: how many roles have a supported
/// candidate whose assumed height matches within half a ladder step.
fn assign_corner_agreement(cands: &mut [CornerCandidate], step: f64) {
    let support: Vec<(CornerRole, f64, bool)> = cands
        .iter()
        .map(|c| (c.role, c.assumed_height, c.features.omega > 0.0))
        .collect();
    for c in cands.iter_mut() {
        if c.features.omega <= 0.0 {
            continue;
        }
        let mut roles = Vec::new();
        for &(role, h, ok) in &support {
            if ok && (h - c.assumed_height).abs() <= step / 2.0 + 1e-9 && !roles.contains(&role) {
                roles.push(role);
            }
        }
        c.features.tau = roles.len() as f64;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RooflineCandidate {
    pub building: usize,
    pub building_id: String,
    pub kind: RooflineKind,
    /// Footprint corner at the far end of the roofline.
    pub neighbor: usize,
    pub assumed_height: f64,
    pub ladder_index: usize,
    pub segment: LineSegment,
    /// Projected roofline at the assumed height, clipped to the raster.
    pub span: ((f64, f64), (f64, f64)),
    pub patch: Patch,
    pub features: CandidateFeatures,
}

impl RooflineCandidate {
    pub fn span_pixels(&self) -> (Pixel, Pixel) {
        (Pixel::round(self.span.0), Pixel::round(self.span.1))
    }
}

/// True when the facade from footprint corner `a` to `b` faces the camera.
pub fn facade_faces_camera(fp: &BuildingFootprint, a: usize, b: usize, pose: &CameraPose) -> bool {
    let (pa, pb) = (fp.corners[a], fp.corners[b]);
    // Counter-clockwise polygon: the outward normal of a->b is (dy, -dx).
    let (dx, dy) = (pb.x - pa.x, pb.y - pa.y);
    let (nx, ny) = if (b + fp.corners.len() - a) % fp.corners.len() == 1 { (dy, -dx) } else { (-dy, dx) };
    (pose.position.x - pa.x) * nx + (pose.position.y - pa.y) * ny > 0.0
}

/// Roofline candidates from Cn toward each camera-facing neighbor, one per
/// ladder height that has a gated segment (the strongest one).
pub fn roofline_candidates(
    fp: &BuildingFootprint,
    building: usize,
    pose: &CameraPose,
    map: &EdgeMap,
    params: &CandidateParams,
) -> Result<Vec<RooflineCandidate>> {
    let roles = classify_corner_roles(fp, pose)?;
    let cn = fp.corners[roles.cn];
    let d_hat = distance_along_axis(pose, &cn.at_height(pose.mount_height));
    let ladder = sweep_heights_with_step(d_hat, pose, params.height_step)?;
    let (prev, next) = fp.neighbors(roles.cn);
    let u_near = project_point(pose, &cn.at_height(pose.mount_height))?.u;
    let mut out = Vec::new();
    for nb in [prev, next] {
        if nb == roles.cn || !facade_faces_camera(fp, roles.cn, nb, pose) {
            continue;
        }
        let far = fp.corners[nb];
        let Ok(far_img) = project_point(pose, &far.at_height(pose.mount_height)) else {
            continue;
        };
        let kind = RooflineKind::between(u_near, far_img.u);
        for (k, &h) in ladder.iter().enumerate() {
            let pn = corner_raster(pose, cn, h)?;
            let Ok(pe) = corner_raster(pose, far, h) else {
                continue;
            };
            if !map.contains(Pixel::round(pn)) {
                continue;
            }
            let Some((a, b)) = clip_segment(pn, pe, map.width(), map.height()) else {
                continue;
            };
            let length = (b.0 - pn.0).hypot(b.1 - pn.1);
            if length < 2.0 * params.gate_px {
                continue;
            }
            let query = HoughQuery {
                anchors: disk_pixels(map, pn, params.gate_px),
                length,
                angle: (-(b.1 - pn.1)).atan2(b.0 - pn.0),
                angle_tol: (params.gate_px / length).atan(),
                angle_step: DEFAULT_ANGLE_STEP,
            };
            let gate = |s: &LineSegment| s.p1.distance_to(b) <= params.gate_px && s.p0.distance_to(pn) <= params.gate_px;
            let Some(segment) = weighted_hough(map, &query, gate).into_iter().next() else {
                continue;
            };
            out.push(RooflineCandidate {
                building,
                building_id: fp.id.clone(),
                kind,
                neighbor: nb,
                assumed_height: h,
                ladder_index: k,
                segment,
                span: (a, b),
                patch: extract_roofline_patch(map, &segment)?,
                features: CandidateFeatures {
                    lambda: segment.length as f64,
                    omega: segment.edgeness,
                    ..Default::default()
                },
            });
        }
    }
    Ok(out)
}

/// Samples the 21-pixel strip centered on the segment (10 above, 10 below),
/// aligned with the segment direction, then resizes it to 28x28.
pub fn extract_roofline_patch(map: &EdgeMap, segment: &LineSegment) -> Result<Patch> {
    for p in [segment.p0, segment.p1] {
        if !map.contains(p) {
            return Err(Error::OutOfBounds {
                x: p.x,
                y: p.y,
                width: map.width(),
                height: map.height(),
            });
        }
    }
    let (a, b) = (segment.p0.as_f64(), segment.p1.as_f64());
    let len = (b.0 - a.0).hypot(b.1 - a.1);
    let cols = (len.round() as usize + 1).max(2);
    let rows = 2 * STRIP_HALF + 1;
    let (ux, uy) = if len > 0.0 { ((b.0 - a.0) / len, (b.1 - a.1) / len) } else { (1.0, 0.0) };
    // Perpendicular pointing down the raster for a left-to-right segment.
    let (nx, ny) = (-uy, ux);
    let step = if cols > 1 { len / (cols - 1) as f64 } else { 0.0 };
    let mut strip = vec![0.0; rows * cols];
    for r in 0..rows {
        let off = r as f64 - STRIP_HALF as f64;
        for c in 0..cols {
            let t = c as f64 * step;
            let x = a.0 + ux * t + nx * off;
            let y = a.1 + uy * t + ny * off;
            strip[r * cols + c] = map.sample_bilinear(x, y);
        }
    }
    Ok(resize_bilinear(&strip, cols, rows, PATCH_SIZE, PATCH_SIZE))
}

/// Bilinear resize with pixel-center alignment and edge clamping.
pub fn resize_bilinear(src: &[f64], w: usize, h: usize, out_w: usize, out_h: usize) -> Patch {
    let sx = w as f64 / out_w as f64;
    let sy = h as f64 / out_h as f64;
    let at = |x: usize, y: usize| src[y * w + x];
    let mut data = Vec::with_capacity(out_w * out_h);
    for j in 0..out_h {
        let y = ((j as f64 + 0.5) * sy - 0.5).clamp(0.0, h as f64 - 1.0);
        let y0 = y.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = y - y0 as f64;
        for i in 0..out_w {
            let x = ((i as f64 + 0.5) * sx - 0.5).clamp(0.0, w as f64 - 1.0);
            let x0 = x.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = x - x0 as f64;
            let top = at(x0, y0) * (1.0 - fx) + at(x1, y0) * fx;
            let bottom = at(x0, y1) * (1.0 - fx) + at(x1, y1) * fx;
            data.push((top * (1.0 - fy) + bottom * fy).round().clamp(0.0, 255.0) as u8);
        }
    }
    Patch { data }
}
