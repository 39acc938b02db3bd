//! End-to-end height estimation: corner detection and camera calibration,
//! then per-building roofline selection and height computation.

use std::fs;
use std::path::Path;

use log::{debug, info};
use serde::{Deserialize, Serialize};

use crate::calibration::{
    accept_calibration_with, bearing_from_pixel, calibrate_two_corners, multi_sample_height, CornerObservation,
    DEFAULT_ACCEPT_THRESHOLD_M,
};
use crate::candidates::{
    corner_candidates, corner_raster, roofline_candidates, CandidateParams, CornerCandidate, RooflineCandidate,
};
use crate::edgemap::{EdgeMap, LineSegment, Mask, Pixel};
use crate::embedding::{Decision, Model, TrainingConfig};
use crate::error::{Error, Result};
use crate::geometry::{
    classify_corner_roles, distance_along_axis, height_from_roofline, project_point, BuildingFootprint, CameraPose,
    Point2,
};
use crate::ranking::{
    order_buildings, refine_roofline, score_corner_candidates, score_roofline_candidates, update_mask,
    EdgenessVariant, OrderItem,
};
use crate::rectify::{pitch_homography, rectify_image};
use crate::scene::{render, render_geometry, GeneratorConfig, RenderedScene, SceneSpec, SceneTruth};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub height_step: f64,
    pub gate_px: f64,
    pub accept_threshold_m: f64,
    /// Smallest bearing difference between the two calibration corners.
    pub min_bearing_separation_deg: f64,
    pub edgeness_variant: EdgenessVariant,
    /// Disable to keep the GPS pose as is.
    pub calibrate: bool,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            height_step: 0.5,
            gate_px: 3.0,
            accept_threshold_m: DEFAULT_ACCEPT_THRESHOLD_M,
            min_bearing_separation_deg: 5.0,
            edgeness_variant: EdgenessVariant::Boosted,
            calibrate: true,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.height_step > 0.0) {
            return Err(Error::InvalidConfig(format!("height_step must be > 0, got {}", self.height_step)));
        }
        if !(self.accept_threshold_m > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "accept_threshold_m must be > 0, got {}",
                self.accept_threshold_m
            )));
        }
        if !(self.gate_px > 0.0) {
            return Err(Error::InvalidConfig(format!("gate_px must be > 0, got {}", self.gate_px)));
        }
        Ok(())
    }

    fn params(&self) -> CandidateParams {
        CandidateParams {
            height_step: self.height_step,
            gate_px: self.gate_px,
        }
    }
}

/// Everything a TOML config file may set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub pipeline: PipelineConfig,
    pub training: TrainingConfig,
    pub generator: GeneratorConfig,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.pipeline.validate()?;
        cfg.training.validate().map_err(|e| Error::InvalidConfig(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path.as_ref())
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.as_ref().display())))?;
        Self::parse(&text)
    }
}

/// Decides which candidates are real corners and rooflines.
#[derive(Debug, Clone, Copy)]
pub enum Classifier<'a> {
    /// Ground truth stands in for the learned classifier.
    Oracle(&'a SceneTruth),
    Learned { corner: &'a Model, roofline: &'a Model },
}

pub const ORACLE_CORNER_COL_PX: f64 = 1.5;
pub const ORACLE_CORNER_ROW_PX: f64 = 2.5;
pub const ORACLE_ROOFLINE_LINE_PX: f64 = 2.0;
pub const ORACLE_ROOFLINE_END_PX: f64 = 3.0;

fn perpendicular_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len = dx.hypot(dy);
    if len < 1e-12 {
        return (p.0 - a.0).hypot(p.1 - a.1);
    }
    ((p.0 - a.0) * dy - (p.1 - a.1) * dx).abs() / len
}

impl Classifier<'_> {
    fn accept_corner(&self, c: &CornerCandidate) -> bool {
        match self {
            Classifier::Oracle(truth) => {
                let Some(corner) = truth.buildings.get(c.building).and_then(|b| b.corners.get(c.corner_index)) else {
                    return false;
                };
                match corner.roof {
                    Some(r) if corner.roof_visible => {
                        (c.location.0 - r.0).abs() <= ORACLE_CORNER_COL_PX
                            && (c.location.1 - r.1).abs() <= ORACLE_CORNER_ROW_PX
                    }
                    _ => false,
                }
            }
            Classifier::Learned { corner, .. } => {
                matches!(corner.classify(&c.patch), Ok(Decision::Known(k)) if k == c.corner_type.class_index())
            }
        }
    }

    fn accept_roofline(&self, c: &RooflineCandidate, cn: usize) -> bool {
        match self {
            Classifier::Oracle(truth) => {
                let Some(b) = truth.buildings.get(c.building) else { return false };
                let (Some(a), Some(e)) = (
                    b.corners.get(cn).and_then(|x| x.roof),
                    b.corners.get(c.neighbor).and_then(|x| x.roof),
                ) else {
                    return false;
                };
                let visible = b.roofline(cn, c.neighbor).is_some_and(|r| r.visible_pixels > 0);
                let (p0, p1) = (c.segment.p0.as_f64(), c.segment.p1.as_f64());
                visible
                    && perpendicular_distance(p0, a, e) <= ORACLE_ROOFLINE_LINE_PX
                    && perpendicular_distance(p1, a, e) <= ORACLE_ROOFLINE_LINE_PX
                    && (p0.0 - a.0).hypot(p0.1 - a.1) <= ORACLE_ROOFLINE_END_PX
            }
            Classifier::Learned { roofline, .. } => {
                matches!(roofline.classify(&c.patch), Ok(Decision::Known(k)) if k == c.kind.class_index())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Ok,
    NoCorner,
    FullyOccluded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedRoofline {
    pub neighbor: usize,
    pub kind: String,
    /// Raster endpoints of the detected segment.
    pub from: [f64; 2],
    pub to: [f64; 2],
    pub ladder_height_m: f64,
    pub length_px: f64,
    pub edgeness: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildingReport {
    pub id: String,
    pub height_m: Option<f64>,
    pub truth_m: Option<f64>,
    pub abs_err_m: Option<f64>,
    pub rel_err: Option<f64>,
    pub status: Status,
    pub roofline: Option<SelectedRoofline>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub displacement_m: Option<f64>,
    pub accepted: bool,
    /// False when fewer than two usable corners were found.
    pub performed: bool,
    pub position: [f64; 2],
    /// Raster positions of the two reference corners.
    pub corners: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeightReport {
    pub schema: u32,
    pub buildings: Vec<BuildingReport>,
    pub calibration: CalibrationReport,
}

impl HeightReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Inputs for one image.
#[derive(Debug, Clone, Copy)]
pub struct SceneInput<'a> {
    pub edge_map: &'a EdgeMap,
    pub tree_mask: &'a Mask,
    pub footprints: &'a [BuildingFootprint],
    /// Camera pose with the GPS position.
    pub gps_pose: CameraPose,
}

struct CalibrationStage {
    pose: CameraPose,
    report: CalibrationReport,
    validated: Vec<CornerCandidate>,
}

fn calibration_stage(input: &SceneInput, classifier: &Classifier, cfg: &PipelineConfig) -> CalibrationStage {
    let pose = input.gps_pose;
    let params = cfg.params();
    let mut validated = Vec::new();
    for (b, fp) in input.footprints.iter().enumerate() {
        match corner_candidates(fp, b, &pose, input.edge_map, &params) {
            Ok(cands) => validated.extend(cands.into_iter().filter(|c| classifier.accept_corner(c))),
            Err(e) => debug!("building {}: no corner candidates ({e})", fp.id),
        }
    }
    let mut report = CalibrationReport {
        displacement_m: None,
        accepted: false,
        performed: false,
        position: [pose.position.x, pose.position.y],
        corners: Vec::new(),
    };
    if !cfg.calibrate || validated.len() < 2 {
        return CalibrationStage {
            pose,
            report,
            validated,
        };
    }
    let features: Vec<_> = validated.iter().map(|c| c.features).collect();
    let ranked = score_corner_candidates(&features).unwrap_or_default();
    let center = input.edge_map.width() as f64 / 2.0 - 0.5;
    let bearing = |c: &CornerCandidate| bearing_from_pixel(&pose, c.location.0 - center);
    let min_sep = cfg.min_bearing_separation_deg.to_radians();
    let pair = ranked.first().and_then(|first| {
        let a = &validated[first.index];
        ranked[1..]
            .iter()
            .map(|r| &validated[r.index])
            .find(|b| {
                (b.building, b.corner_index) != (a.building, a.corner_index)
                    && (bearing(a) - bearing(b)).abs() >= min_sep
            })
            .map(|b| (a, b))
    });
    if let Some((a, b)) = pair {
        let world = |c: &CornerCandidate| input.footprints[c.building].corners[c.corner_index];
        let obs = |c: &CornerCandidate| CornerObservation {
            world: world(c),
            bearing: bearing(c),
        };
        if let Ok(computed) = calibrate_two_corners(&obs(a), &obs(b), pose.heading) {
            let result = accept_calibration_with(computed, pose.position, cfg.accept_threshold_m);
            report.performed = true;
            report.displacement_m = Some(result.displacement);
            report.accepted = result.accepted;
            report.position = [result.position.x, result.position.y];
            report.corners = vec![[a.location.0, a.location.1], [b.location.0, b.location.1]];
            info!(
                "calibration: displacement {:.3} m, {}",
                result.displacement,
                if result.accepted { "accepted" } else { "rejected" }
            );
            return CalibrationStage {
                pose: pose.with_position(result.position),
                report,
                validated,
            };
        }
    }
    CalibrationStage {
        pose,
        report,
        validated,
    }
}

/// Calibration only.
pub fn run_calibration(input: &SceneInput, classifier: &Classifier, cfg: &PipelineConfig) -> Result<CalibrationReport> {
    cfg.validate()?;
    input.gps_pose.validate()?;
    Ok(calibration_stage(input, classifier, cfg).report)
}

pub const FIT_END_SKIP_PX: i64 = 4;
pub const FIT_HALF_WINDOW_PX: i64 = 4;
pub const FIT_MIN_POINTS: usize = 5;

/// Sub-pixel centroids of cross-sections along a segment. Sections that
/// touch a masked pixel or do not look like a single stroke are skipped.
pub fn cross_section_centroids(map: &EdgeMap, blocked: &dyn Fn(Pixel) -> bool, seg: &LineSegment) -> Vec<(f64, f64)> {
    let (a, b) = (seg.p0, seg.p1);
    let along_x = (b.x - a.x).abs() >= (b.y - a.y).abs();
    let (ma, mb, na, nb) = if along_x { (a.x, b.x, a.y, b.y) } else { (a.y, b.y, a.x, b.x) };
    let (lo, hi) = (ma.min(mb) + FIT_END_SKIP_PX, ma.max(mb) - FIT_END_SKIP_PX);
    let mut out = Vec::new();
    for m in lo..=hi {
        let t = if mb == ma { 0.0 } else { (m - ma) as f64 / (mb - ma) as f64 };
        let centre = (na as f64 + t * (nb - na) as f64).round() as i64;
        let (mut mass, mut moment, mut skip) = (0.0, 0.0, false);
        for k in -FIT_HALF_WINDOW_PX..=FIT_HALF_WINDOW_PX {
            let n = centre + k;
            let p = if along_x { Pixel::new(m, n) } else { Pixel::new(n, m) };
            if blocked(p) {
                skip = true;
                break;
            }
            let v = map.get_or_zero(p) as f64;
            mass += v;
            moment += v * n as f64;
        }
        if skip || !(0.5 * 255.0..=1.5 * 255.0).contains(&mass) {
            continue;
        }
        let c = moment / mass;
        out.push(if along_x { (m as f64, c) } else { (c, m as f64) });
    }
    out
}

/// Height above the center line whose projected roofline best fits `points`
/// in perpendicular distance, kept within `max_dev` of `a0`. Falls back to
/// `a0` with too few points.
pub fn fit_roofline_height(
    points: &[(f64, f64)],
    pose: &CameraPose,
    near: Point2,
    far: Point2,
    a0: f64,
    max_dev: f64,
) -> f64 {
    let residuals = |a: f64, pts: &[(f64, f64)]| -> Option<Vec<f64>> {
        let pn = corner_raster(pose, near, a).ok()?;
        let pe = corner_raster(pose, far, a).ok()?;
        let (dx, dy) = (pe.0 - pn.0, pe.1 - pn.1);
        let len = dx.hypot(dy);
        if len < 1e-9 {
            return None;
        }
        Some(pts.iter().map(|p| ((p.0 - pn.0) * dy - (p.1 - pn.1) * dx) / len).collect())
    };
    let solve = |pts: &[(f64, f64)]| -> Option<f64> {
        let mut a = a0;
        for _ in 0..20 {
            let h = 1e-4;
            let r = residuals(a, pts)?;
            let rp = residuals(a + h, pts)?;
            let rm = residuals(a - h, pts)?;
            let (mut num, mut den) = (0.0, 0.0);
            for i in 0..r.len() {
                let j = (rp[i] - rm[i]) / (2.0 * h);
                num += j * r[i];
                den += j * j;
            }
            if den < 1e-18 {
                return None;
            }
            let delta = num / den;
            a -= delta;
            if delta.abs() < 1e-10 {
                break;
            }
        }
        a.is_finite().then_some(a)
    };
    if points.len() < FIT_MIN_POINTS {
        return a0;
    }
    let Some(first) = solve(points) else { return a0 };
    let Some(r) = residuals(first, points) else { return a0 };
    let mut abs: Vec<f64> = r.iter().map(|v| v.abs()).collect();
    abs.sort_by(f64::total_cmp);
    let mad = abs[abs.len() / 2];
    let limit = (3.0 * 1.4826 * mad).max(0.5);
    let kept: Vec<(f64, f64)> = points
        .iter()
        .zip(&r)
        .filter(|(_, v)| v.abs() <= limit)
        .map(|(p, _)| *p)
        .collect();
    let a = if kept.len() >= FIT_MIN_POINTS { solve(&kept).unwrap_or(first) } else { first };
    a.clamp(a0 - max_dev, a0 + max_dev)
}

fn scope_points(fp: &BuildingFootprint, pose: &CameraPose, height: f64) -> Vec<(f64, f64)> {
    let mut pts = Vec::new();
    for c in &fp.corners {
        for z in [0.0, height] {
            let p = c.at_height(z);
            if distance_along_axis(pose, &p) > 0.05 {
                if let Ok(ip) = project_point(pose, &p) {
                    pts.push(pose.to_raster(&ip));
                }
            }
        }
    }
    pts
}

struct Processed {
    distance: f64,
    scope: Mask,
    roofline: Vec<Pixel>,
}

fn empty_report(fp: &BuildingFootprint, status: Status) -> BuildingReport {
    BuildingReport {
        id: fp.id.clone(),
        height_m: None,
        truth_m: fp.true_height,
        abs_err_m: None,
        rel_err: None,
        status,
        roofline: None,
    }
}

/// Runs both stages on one level image.
pub fn run_pipeline(input: &SceneInput, classifier: &Classifier, cfg: &PipelineConfig) -> Result<HeightReport> {
    cfg.validate()?;
    input.gps_pose.validate()?;
    if input.gps_pose.pitch != 0.0 {
        return Err(Error::NonHorizontalPose {
            pitch: input.gps_pose.pitch,
        });
    }
    let map = input.edge_map;
    if !input.tree_mask.matches(map) {
        return Err(Error::DimensionMismatch("tree mask and edge map sizes differ".into()));
    }
    let params = cfg.params();
    let stage = calibration_stage(input, classifier, cfg);
    let pose = stage.pose;

    let mut items = Vec::new();
    let mut reports: Vec<Option<BuildingReport>> = vec![None; input.footprints.len()];
    let mut cn_distance = vec![f64::INFINITY; input.footprints.len()];
    for (b, fp) in input.footprints.iter().enumerate() {
        match classify_corner_roles(fp, &pose) {
            Ok(roles) => {
                let d = fp.corners[roles.cn].distance(&pose.position);
                cn_distance[b] = d;
                items.push(OrderItem {
                    index: b,
                    has_valid_corner: stage.validated.iter().any(|c| c.building == b),
                    distance: d,
                });
            }
            Err(_) => reports[b] = Some(empty_report(fp, Status::NoCorner)),
        }
    }

    let mut processed: Vec<Processed> = Vec::new();
    for b in order_buildings(&items) {
        let fp = &input.footprints[b];
        let report = process_building(input, classifier, cfg, &params, &pose, &stage.validated, b, &cn_distance, &processed);
        let (report, done) = match report {
            Ok(r) => r,
            Err(e) => {
                debug!("building {}: {e}", fp.id);
                (empty_report(fp, Status::NoCorner), None)
            }
        };
        if let Some(p) = done {
            processed.push(p);
        }
        reports[b] = Some(report);
    }
    Ok(HeightReport {
        schema: 1,
        buildings: reports
            .into_iter()
            .zip(input.footprints)
            .map(|(r, fp)| r.unwrap_or_else(|| empty_report(fp, Status::NoCorner)))
            .collect(),
        calibration: stage.report,
    })
}

#[allow(clippy::too_many_arguments)]
fn process_building(
    input: &SceneInput,
    classifier: &Classifier,
    cfg: &PipelineConfig,
    params: &CandidateParams,
    pose: &CameraPose,
    validated: &[CornerCandidate],
    b: usize,
    cn_distance: &[f64],
    processed: &[Processed],
) -> Result<(BuildingReport, Option<Processed>)> {
    let map = input.edge_map;
    let fp = &input.footprints[b];
    let roles = classify_corner_roles(fp, pose)?;
    let mut cands: Vec<RooflineCandidate> = roofline_candidates(fp, b, pose, map, params)?
        .into_iter()
        .filter(|c| classifier.accept_roofline(c, roles.cn))
        .collect();
    if cands.is_empty() {
        return Ok((empty_report(fp, Status::FullyOccluded), None));
    }

    // Nearer processed buildings hide whole regions; farther ones only their rooflines.
    let mut mask = Mask::new(map.width(), map.height());
    for p in processed {
        if p.distance < cn_distance[b] {
            mask.union_with(&p.scope);
        } else {
            for &px in &p.roofline {
                mask.set(px, true);
            }
        }
    }

    let own: Vec<&CornerCandidate> = validated.iter().filter(|c| c.building == b).collect();
    let mut refined_pixels = Vec::with_capacity(cands.len());
    for c in cands.iter_mut() {
        let mut supporters: Vec<usize> = own
            .iter()
            .filter(|k| (k.assumed_height - c.assumed_height).abs() <= cfg.height_step + 1e-9)
            .map(|k| k.corner_index)
            .collect();
        supporters.sort_unstable();
        supporters.dedup();
        c.features.tau = supporters.len() as f64;
        let r = refine_roofline(&c.segment, c.span_pixels(), &mask, input.tree_mask, map, cfg.edgeness_variant)?;
        c.features.lambda = r.length;
        c.features.omega = r.edgeness;
        refined_pixels.push(r.pixels);
    }
    let alive: Vec<usize> = (0..cands.len()).filter(|&i| cands[i].features.lambda > 0.0).collect();
    if alive.is_empty() {
        return Ok((empty_report(fp, Status::FullyOccluded), None));
    }
    let mut neighbors: Vec<usize> = alive.iter().map(|&i| cands[i].neighbor).collect();
    neighbors.sort_unstable();
    neighbors.dedup();
    let mut best: Option<usize> = None;
    for nb in neighbors {
        let group: Vec<usize> = alive.iter().copied().filter(|&i| cands[i].neighbor == nb).collect();
        let features: Vec<_> = group.iter().map(|&i| cands[i].features).collect();
        let ranked = score_roofline_candidates(&features)?;
        let top = group[ranked[0].index];
        if best.is_none_or(|bi| cands[top].features.omega > cands[bi].features.omega) {
            best = Some(top);
        }
    }
    let chosen = &cands[best.expect("at least one group")];

    let blocked = |p: Pixel| mask.get(p) || input.tree_mask.get(p);
    let points = cross_section_centroids(map, &blocked, &chosen.segment);
    let cn = fp.corners[roles.cn];
    let far = fp.corners[chosen.neighbor];
    let d_n = distance_along_axis(pose, &cn.at_height(pose.mount_height));
    // The gate lets a candidate sit a few pixels off the true line.
    let max_dev = cfg.height_step.max((cfg.gate_px + 1.0) * d_n / pose.focal_length);
    let a = fit_roofline_height(&points, pose, cn, far, chosen.assumed_height, max_dev);
    let height = height_from_roofline(pose.focal_length * a / d_n, d_n, pose)?;
    debug!(
        "building {}: {} cross-sections, ladder {:.2} m, fitted {:.3} m",
        fp.id,
        points.len(),
        chosen.assumed_height,
        a
    );

    let mut scope = Mask::new(map.width(), map.height());
    update_mask(&mut scope, &scope_points(fp, pose, height));
    let abs_err = fp.true_height.map(|t| (height - t).abs());
    let report = BuildingReport {
        id: fp.id.clone(),
        height_m: Some(height),
        truth_m: fp.true_height,
        abs_err_m: abs_err,
        rel_err: fp.true_height.zip(abs_err).map(|(t, e)| e / t),
        status: Status::Ok,
        roofline: Some(SelectedRoofline {
            neighbor: chosen.neighbor,
            kind: chosen.kind.label().to_string(),
            from: [chosen.segment.p0.x as f64, chosen.segment.p0.y as f64],
            to: [chosen.segment.p1.x as f64, chosen.segment.p1.y as f64],
            ladder_height_m: chosen.assumed_height + pose.mount_height,
            length_px: chosen.features.lambda,
            edgeness: chosen.features.omega,
        }),
    };
    let pixels = refined_pixels[best.expect("chosen")].clone();
    Ok((
        report,
        Some(Processed {
            distance: cn_distance[b],
            scope,
            roofline: pixels,
        }),
    ))
}

/// Warps a pitched image to the level view, then runs the pipeline there.
pub fn run_tall_building(input: &SceneInput, classifier: &Classifier, cfg: &PipelineConfig) -> Result<HeightReport> {
    if input.gps_pose.pitch == 0.0 {
        return run_pipeline(input, classifier, cfg);
    }
    let h = pitch_homography(&input.gps_pose)?;
    let map = rectify_image(input.edge_map, &h)?;
    let trees = Mask::from_edge_map(&rectify_image(&input.tree_mask.to_edge_map(), &h)?);
    let level = SceneInput {
        edge_map: &map,
        tree_mask: &trees,
        footprints: input.footprints,
        gps_pose: input.gps_pose.with_pitch(0.0),
    };
    run_pipeline(&level, classifier, cfg)
}

/// Ground truth in the level view the pipeline works in.
pub fn level_truth(spec: &SceneSpec, rendered: &RenderedScene) -> SceneTruth {
    if spec.camera.pitch == 0.0 {
        rendered.truth.clone()
    } else {
        render_geometry(&spec.buildings, &spec.camera.with_pitch(0.0), &spec.trees).truth
    }
}

/// Source of classification decisions for whole-scene runs.
#[derive(Debug, Clone, Copy)]
pub enum ClassifierSource<'a> {
    Oracle,
    Learned { corner: &'a Model, roofline: &'a Model },
}

/// Renders nothing; estimates heights for an already rendered scene.
pub fn estimate_rendered(
    spec: &SceneSpec,
    rendered: &RenderedScene,
    gps_position: Point2,
    source: ClassifierSource,
    cfg: &PipelineConfig,
) -> Result<HeightReport> {
    let truth;
    let classifier = match source {
        ClassifierSource::Oracle => {
            truth = level_truth(spec, rendered);
            Classifier::Oracle(&truth)
        }
        ClassifierSource::Learned { corner, roofline } => Classifier::Learned { corner, roofline },
    };
    let input = SceneInput {
        edge_map: &rendered.edge_map,
        tree_mask: &rendered.tree_mask,
        footprints: &spec.buildings,
        gps_pose: spec.camera.with_position(gps_position),
    };
    run_tall_building(&input, &classifier, cfg)
}

/// Camera step between multi-sample views, in meters along the heading.
pub const MULTI_STEP_M: f64 = 4.0;

/// Renders `n` views of the same block from cameras stepped back along the
/// heading and reports per-building medians of the successful estimates.
pub fn run_multi(spec: &SceneSpec, n: usize, source: ClassifierSource, cfg: &PipelineConfig) -> Result<HeightReport> {
    if n == 0 {
        return Err(Error::InvalidConfig("multi-sample count must be at least 1".into()));
    }
    let mut reports = Vec::with_capacity(n);
    for k in 0..n {
        let fwd = spec.camera.forward();
        let back = k as f64 * MULTI_STEP_M;
        let camera = spec.camera.with_position(Point2::new(
            spec.camera.position.x - fwd.x * back,
            spec.camera.position.y - fwd.y * back,
        ));
        let view = SceneSpec {
            camera,
            seed: spec.seed.wrapping_add(k as u64),
            ..spec.clone()
        };
        let rendered = render(&view);
        reports.push(estimate_rendered(&view, &rendered, rendered.noisy_pose.position, source, cfg)?);
    }
    let mut out = reports[0].clone();
    for (b, fp) in spec.buildings.iter().enumerate() {
        let heights: Vec<f64> = reports.iter().filter_map(|r| r.buildings[b].height_m).collect();
        let entry = &mut out.buildings[b];
        if let Ok(h) = multi_sample_height(&heights) {
            entry.height_m = Some(h);
            entry.status = Status::Ok;
            entry.abs_err_m = fp.true_height.map(|t| (h - t).abs());
            entry.rel_err = fp.true_height.map(|t| (h - t).abs() / t);
            if entry.roofline.is_none() {
                entry.roofline = reports.iter().find_map(|r| r.buildings[b].roofline.clone());
            }
        }
    }
    Ok(out)
}

/// Binary PPM of the edge map with chosen rooflines in red and the
/// calibration corners in green.
pub fn overlay_ppm(map: &EdgeMap, report: &HeightReport) -> Vec<u8> {
    let (w, h) = (map.width(), map.height());
    let mut rgb: Vec<[u8; 3]> = map.pixels().iter().map(|&v| [v / 2, v / 2, v / 2]).collect();
    let mut put = |p: Pixel, c: [u8; 3]| {
        if p.x >= 0 && p.y >= 0 && (p.x as usize) < w && (p.y as usize) < h {
            rgb[p.y as usize * w + p.x as usize] = c;
        }
    };
    for b in &report.buildings {
        if let Some(r) = &b.roofline {
            let a = Pixel::round((r.from[0], r.from[1]));
            let e = Pixel::round((r.to[0], r.to[1]));
            for p in crate::edgemap::LinePixels::new(a, e) {
                put(p, [255, 0, 0]);
            }
        }
    }
    for c in &report.calibration.corners {
        let p = Pixel::round((c[0], c[1]));
        for d in -4..=4 {
            put(Pixel::new(p.x + d, p.y), [0, 255, 0]);
            put(Pixel::new(p.x, p.y + d), [0, 255, 0]);
        }
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for px in rgb {
        out.extend_from_slice(&px);
    }
    out
}

/// A lone tower far down the street, seen from a camera pitched upward.
pub fn tall_tower_scene(pitch_deg: f64) -> SceneSpec {
    let corners = vec![
        Point2::new(5.0, 250.0),
        Point2::new(25.0, 250.0),
        Point2::new(25.0, 270.0),
        Point2::new(5.0, 270.0),
    ];
    SceneSpec {
        seed: 0,
        buildings: vec![BuildingFootprint::new("tower", corners, Some(120.0)).expect("valid footprint")],
        camera: CameraPose {
            position: Point2::new(0.0, 0.0),
            heading: 0.0,
            pitch: pitch_deg.to_radians(),
            focal_length: 320.0,
            image_width: 640,
            image_height: 640,
            mount_height: 2.5,
        },
        gps_noise_sigma: 0.0,
        trees: Vec::new(),
        edge_noise: Default::default(),
    }
}
