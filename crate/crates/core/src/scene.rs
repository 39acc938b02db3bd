//! Synthetic street scenes: generation, wireframe rendering with exact ground
//! truth, GPS perturbation, footprint files and labeled patch datasets.

use std::fs;
use std::path::Path;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::candidates::{
    building_side, extract_roofline_patch, facade_faces_camera, CornerType, Patch, RooflineKind, Side,
};
use crate::edgemap::{clip_segment, fill_polygon, point_in_polygon, EdgeMap, LineSegment, Mask, Pixel};
use crate::error::{Error, Result};
use crate::geometry::{
    classify_corner_roles, distance_along_axis, project_point, BuildingFootprint, CameraPose, CornerRoles, Point2,
    WorldPoint,
};

/// Image-space disk that hides edges.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeBlob {
    /// Raster `(col, row)`.
    pub center: (f64, f64),
    pub radius: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EdgeNoise {
    /// Probability that a pixel is replaced by a random intensity.
    pub salt: f64,
    /// Maximum absolute jitter added to lit pixels.
    pub jitter: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub buildings: Vec<BuildingFootprint>,
    pub camera: CameraPose,
    pub gps_noise_sigma: f64,
    pub trees: Vec<TreeBlob>,
    pub edge_noise: EdgeNoise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CornerTruth {
    /// Raster position of the roof corner, if in front of the camera.
    pub roof: Option<(f64, f64)>,
    pub ground: Option<(f64, f64)>,
    pub depth: f64,
    pub roof_visible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RooflineTruth {
    pub from: usize,
    pub to: usize,
    pub facing: bool,
    /// Share of the roof edge not hidden by nearer buildings, trees or the frame.
    pub visible_fraction: f64,
    /// Rendered pixels still owned by this roof edge.
    pub visible_pixels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildingTruth {
    pub id: String,
    pub height: f64,
    pub roles: Option<CornerRoles>,
    pub side: Option<Side>,
    pub corners: Vec<CornerTruth>,
    pub rooflines: Vec<RooflineTruth>,
    /// Nearest corner visible and at least one roof edge from it fully visible.
    pub unoccluded: bool,
    pub visible_pixels: usize,
}

impl BuildingTruth {
    pub fn roofline(&self, a: usize, b: usize) -> Option<&RooflineTruth> {
        self.rooflines
            .iter()
            .find(|r| (r.from == a && r.to == b) || (r.from == b && r.to == a))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneTruth {
    pub pose: CameraPose,
    pub buildings: Vec<BuildingTruth>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedScene {
    pub edge_map: EdgeMap,
    pub tree_mask: Mask,
    pub truth: SceneTruth,
    pub noisy_pose: CameraPose,
}

/// Renders the buildings at `pose` without noise.
pub struct Rendering {
    pub edge_map: EdgeMap,
    pub tree_mask: Mask,
    pub truth: SceneTruth,
}

type Quad = [(f64, f64); 4];

const OWNER_NONE: u32 = 0;

fn owner_code(building: usize, element: usize) -> u32 {
    ((building as u32 + 1) << 16) | element as u32
}

fn in_frame(p: (f64, f64), w: usize, h: usize) -> bool {
    p.0 >= 0.0 && p.1 >= 0.0 && p.0 <= w as f64 - 1.0 && p.1 <= h as f64 - 1.0
}

fn in_tree(p: (f64, f64), trees: &[TreeBlob]) -> bool {
    trees
        .iter()
        .any(|t| (p.0 - t.center.0).hypot(p.1 - t.center.1) <= t.radius)
}

fn draw_clipped(
    map: &mut EdgeMap,
    owner: &mut [u32],
    a: (f64, f64),
    b: (f64, f64),
    code: u32,
) -> usize {
    let (w, h) = (map.width(), map.height());
    let m = 2.0;
    let Some((ca, cb)) = clip_segment((a.0 + m, a.1 + m), (b.0 + m, b.1 + m), w + 4, h + 4) else {
        return 0;
    };
    let touched = map.draw_line_aa((ca.0 - m, ca.1 - m), (cb.0 - m, cb.1 - m), 255);
    for p in &touched {
        owner[p.y as usize * w + p.x as usize] = code;
    }
    touched.len()
}

/// Painter's-algorithm wireframe render with exact ground truth.
pub fn render_geometry(buildings: &[BuildingFootprint], pose: &CameraPose, trees: &[TreeBlob]) -> Rendering {
    let (w, h) = (pose.image_width, pose.image_height);
    let mut map = EdgeMap::new(w, h);
    let mut owner = vec![OWNER_NONE; w * h];
    let mut tree_mask = Mask::new(w, h);

    let near_dist = |fp: &BuildingFootprint| {
        fp.corners
            .iter()
            .map(|c| c.distance(&pose.position))
            .fold(f64::INFINITY, f64::min)
    };
    let mut order: Vec<usize> = (0..buildings.len()).collect();
    order.sort_by(|&a, &b| {
        near_dist(&buildings[b])
            .total_cmp(&near_dist(&buildings[a]))
            .then(a.cmp(&b))
    });
    let mut rank = vec![0usize; buildings.len()];
    for (r, &b) in order.iter().enumerate() {
        rank[b] = r;
    }

    let project = |c: Point2, z: f64| -> Option<(f64, f64)> {
        let p = WorldPoint::new(c.x, c.y, z);
        let depth = distance_along_axis(pose, &p);
        if depth <= 0.05 {
            return None;
        }
        project_point(pose, &p).ok().map(|ip| pose.to_raster(&ip))
    };

    let mut quads: Vec<Vec<Quad>> = vec![Vec::new(); buildings.len()];
    let mut facing: Vec<Vec<(usize, usize)>> = vec![Vec::new(); buildings.len()];
    for &b in &order {
        let fp = &buildings[b];
        let height = fp.true_height.unwrap_or(0.0);
        let n = fp.corners.len();
        let mut lines = Vec::new();
        let mut corners_drawn = vec![false; n];
        for i in 0..n {
            let j = (i + 1) % n;
            if !facade_faces_camera(fp, i, j, pose) {
                continue;
            }
            let pts = (
                project(fp.corners[i], 0.0),
                project(fp.corners[j], 0.0),
                project(fp.corners[j], height),
                project(fp.corners[i], height),
            );
            let (Some(ga), Some(gb), Some(rb), Some(ra)) = pts else {
                continue;
            };
            let quad = [ga, gb, rb, ra];
            fill_polygon(w, h, &quad, |x, y| {
                map.set(x, y, 0);
                owner[y * w + x] = OWNER_NONE;
            });
            quads[b].push(quad);
            facing[b].push((i, j));
            lines.push((ra, rb, owner_code(b, i)));
            for (k, g, r) in [(i, ga, ra), (j, gb, rb)] {
                if !corners_drawn[k] {
                    corners_drawn[k] = true;
                    lines.push((g, r, owner_code(b, n + k)));
                }
            }
        }
        for (a, c, code) in lines {
            draw_clipped(&mut map, &mut owner, a, c, code);
        }
    }

    for t in trees {
        let r = t.radius;
        let x0 = (t.center.0 - r).floor().max(0.0) as usize;
        let y0 = (t.center.1 - r).floor().max(0.0) as usize;
        let x1 = ((t.center.0 + r).ceil().max(0.0) as usize).min(w.saturating_sub(1));
        let y1 = ((t.center.1 + r).ceil().max(0.0) as usize).min(h.saturating_sub(1));
        for y in y0..=y1 {
            for x in x0..=x1 {
                if (x as f64 - t.center.0).hypot(y as f64 - t.center.1) <= r {
                    map.set(x, y, 0);
                    owner[y * w + x] = OWNER_NONE;
                    tree_mask.set(Pixel::new(x as i64, y as i64), true);
                }
            }
        }
    }

    let occluded = |b: usize, p: (f64, f64)| -> bool {
        !in_frame(p, w, h)
            || in_tree(p, trees)
            || (0..buildings.len())
                .filter(|&c| rank[c] > rank[b])
                .any(|c| quads[c].iter().any(|q| point_in_polygon(p, q)))
    };

    let mut owned = vec![0usize; buildings.len()];
    let mut owned_by_element: std::collections::HashMap<u32, usize> = std::collections::HashMap::new();
    for &code in &owner {
        if code != OWNER_NONE {
            owned[(code >> 16) as usize - 1] += 1;
            *owned_by_element.entry(code).or_default() += 1;
        }
    }

    let truth_buildings = buildings
        .iter()
        .enumerate()
        .map(|(b, fp)| {
            let height = fp.true_height.unwrap_or(0.0);
            let n = fp.corners.len();
            let corners: Vec<CornerTruth> = fp
                .corners
                .iter()
                .map(|&c| {
                    let roof = project(c, height);
                    CornerTruth {
                        roof,
                        ground: project(c, 0.0),
                        depth: distance_along_axis(pose, &c.at_height(pose.mount_height)),
                        roof_visible: roof.is_some_and(|p| !occluded(b, p)),
                    }
                })
                .collect();
            let rooflines: Vec<RooflineTruth> = (0..n)
                .map(|i| {
                    let j = (i + 1) % n;
                    let is_facing = facing[b].contains(&(i, j));
                    let visible_fraction = match (corners[i].roof, corners[j].roof) {
                        (Some(a), Some(c)) if is_facing => {
                            let samples = ((c.0 - a.0).hypot(c.1 - a.1).ceil() as usize).max(2);
                            let seen = (0..=samples)
                                .filter(|&k| {
                                    let t = k as f64 / samples as f64;
                                    !occluded(b, (a.0 + t * (c.0 - a.0), a.1 + t * (c.1 - a.1)))
                                })
                                .count();
                            seen as f64 / (samples + 1) as f64
                        }
                        _ => 0.0,
                    };
                    RooflineTruth {
                        from: i,
                        to: j,
                        facing: is_facing,
                        visible_fraction,
                        visible_pixels: owned_by_element.get(&owner_code(b, i)).copied().unwrap_or(0),
                    }
                })
                .collect();
            let roles = classify_corner_roles(fp, pose).ok();
            let side = building_side(fp, pose).ok();
            let unoccluded = roles.is_some_and(|r| {
                let (prev, next) = fp.neighbors(r.cn);
                corners[r.cn].roof_visible
                    && [prev, next].iter().any(|&nb| {
                        rooflines
                            .iter()
                            .find(|l| (l.from == r.cn && l.to == nb) || (l.from == nb && l.to == r.cn))
                            .is_some_and(|l| l.facing && l.visible_fraction >= 1.0)
                    })
            });
            BuildingTruth {
                id: fp.id.clone(),
                height,
                roles,
                side,
                corners,
                rooflines,
                unoccluded,
                visible_pixels: owned[b],
            }
        })
        .collect();

    Rendering {
        edge_map: map,
        tree_mask,
        truth: SceneTruth {
            pose: *pose,
            buildings: truth_buildings,
        },
    }
}

/// Seeded isotropic Gaussian offset `(raw, clipped)`; the clip limits the
/// radius to `2 sigma`.
pub fn gps_offset(sigma: f64, rng: &mut impl Rng) -> ((f64, f64), (f64, f64)) {
    if sigma <= 0.0 {
        return ((0.0, 0.0), (0.0, 0.0));
    }
    let normal = Normal::new(0.0, sigma).expect("positive sigma");
    let raw = (normal.sample(rng), normal.sample(rng));
    let r = raw.0.hypot(raw.1);
    let limit = 2.0 * sigma;
    let clipped = if r > limit { (raw.0 * limit / r, raw.1 * limit / r) } else { raw };
    (raw, clipped)
}

/// Returns `pose` with its position moved by seeded GPS noise. Heading is kept.
pub fn perturb_gps(pose: &CameraPose, sigma: f64, seed: u64) -> CameraPose {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6770_735f_6e6f_6973);
    let (_, (dx, dy)) = gps_offset(sigma, &mut rng);
    pose.with_position(Point2::new(pose.position.x + dx, pose.position.y + dy))
}

fn apply_noise(map: &mut EdgeMap, noise: &EdgeNoise, seed: u64) {
    if noise.salt <= 0.0 && noise.jitter <= 0.0 {
        return;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6e6f_6973_655f_6d61);
    for v in map.pixels_mut() {
        if noise.jitter > 0.0 && *v > 0 {
            let j = rng.random_range(-noise.jitter..=noise.jitter);
            *v = (*v as f64 + j).round().clamp(1.0, 255.0) as u8;
        }
        if noise.salt > 0.0 && rng.random_bool(noise.salt.min(1.0)) {
            *v = rng.random_range(1..=255);
        }
    }
}

/// Renders a scene: noiseless geometry and truth, then trees and noise.
pub fn render(spec: &SceneSpec) -> RenderedScene {
    for fp in &spec.buildings {
        if fp.true_height.is_none() {
            warn!("building {} has no height; rendered flat", fp.id);
        }
    }
    let mut r = render_geometry(&spec.buildings, &spec.camera, &spec.trees);
    if spec.buildings.is_empty() || r.truth.buildings.iter().all(|b| b.visible_pixels == 0) {
        warn!("no building is visible in scene {}", spec.seed);
    }
    apply_noise(&mut r.edge_map, &spec.edge_noise, spec.seed);
    RenderedScene {
        edge_map: r.edge_map,
        tree_mask: r.tree_mask,
        truth: r.truth,
        noisy_pose: perturb_gps(&spec.camera, spec.gps_noise_sigma, spec.seed),
    }
}

/// Parameters of the street-block generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub min_buildings: usize,
    pub max_buildings: usize,
    pub min_height: f64,
    pub max_height: f64,
    pub gps_sigma: f64,
    pub edge_noise: EdgeNoise,
    pub max_trees: usize,
    pub focal_px: f64,
    pub image: (usize, usize),
    pub mount_m: f64,
    /// Depth of the first building row's near face.
    pub first_depth: f64,
    /// No building starts beyond this depth.
    pub last_depth: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            min_buildings: 3,
            max_buildings: 8,
            min_height: 5.0,
            max_height: 40.0,
            gps_sigma: 0.0,
            edge_noise: EdgeNoise::default(),
            max_trees: 0,
            focal_px: 320.0,
            image: (640, 640),
            mount_m: 2.5,
            first_depth: 27.0,
            last_depth: 75.0,
        }
    }
}

/// A street with buildings on both sides, camera at the origin looking north.
pub fn generate_scene(seed: u64, cfg: &GeneratorConfig) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let camera = CameraPose {
        position: Point2::new(0.0, 0.0),
        heading: 0.0,
        pitch: 0.0,
        focal_length: cfg.focal_px,
        image_width: cfg.image.0,
        image_height: cfg.image.1,
        mount_height: cfg.mount_m,
    };
    let count = rng.random_range(cfg.min_buildings..=cfg.max_buildings.max(cfg.min_buildings));
    let mut cursor = [
        cfg.first_depth + rng.random_range(0.0..4.0),
        cfg.first_depth + rng.random_range(0.0..4.0),
    ];
    let mut side = rng.random_range(0..2usize);
    let mut buildings = Vec::new();
    while buildings.len() < count {
        if cursor[side] > cfg.last_depth {
            side = 1 - side;
            if cursor[side] > cfg.last_depth {
                break;
            }
        }
        let y0 = cursor[side];
        let length = rng.random_range(6.0..12.0);
        let depth = rng.random_range(8.0..15.0);
        let setback = rng.random_range(8.0..14.0);
        // Keep the roof inside the frame at the nearest corner.
        let top = cfg.max_height.min(cfg.mount_m + 0.9 * y0 * cfg.image.1 as f64 / (2.0 * cfg.focal_px));
        let height = rng.random_range(cfg.min_height..top.max(cfg.min_height + 1e-6));
        let (x0, x1) = if side == 1 { (setback, setback + depth) } else { (-setback - depth, -setback) };
        let corners = vec![
            Point2::new(x0, y0),
            Point2::new(x1, y0),
            Point2::new(x1, y0 + length),
            Point2::new(x0, y0 + length),
        ];
        let id = format!("b{}", buildings.len());
        buildings.push(BuildingFootprint::new(id, corners, Some(height)).expect("generated footprint is valid"));
        cursor[side] += length + rng.random_range(1.0..4.0);
        side = 1 - side;
    }
    let n_trees = if cfg.max_trees > 0 { rng.random_range(0..=cfg.max_trees) } else { 0 };
    let mut trees = Vec::new();
    for _ in 0..n_trees {
        let fp = &buildings[rng.random_range(0..buildings.len())];
        let h = fp.true_height.unwrap_or(0.0);
        let t: f64 = rng.random_range(0.2..0.8);
        let (a, b) = (fp.corners[0], fp.corners[1]);
        let p = WorldPoint::new(a.x + t * (b.x - a.x), a.y + t * (b.y - a.y), h);
        if let Ok(ip) = project_point(&camera, &p) {
            let (c, r) = camera.to_raster(&ip);
            trees.push(TreeBlob {
                center: (c, r + rng.random_range(0.0..10.0)),
                radius: rng.random_range(6.0..14.0),
            });
        }
    }
    SceneSpec {
        seed,
        buildings,
        camera,
        gps_noise_sigma: cfg.gps_sigma,
        trees,
        edge_noise: cfg.edge_noise,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BuildingRecord {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    height_m: Option<f64>,
    corners: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CameraRecord {
    position: [f64; 2],
    heading_deg: f64,
    #[serde(default)]
    pitch_deg: f64,
    focal_px: f64,
    image: [usize; 2],
    mount_m: f64,
}

impl CameraRecord {
    fn from_pose(p: &CameraPose) -> Self {
        Self {
            position: [p.position.x, p.position.y],
            heading_deg: p.heading.to_degrees(),
            pitch_deg: p.pitch.to_degrees(),
            focal_px: p.focal_length,
            image: [p.image_width, p.image_height],
            mount_m: p.mount_height,
        }
    }

    fn to_pose(&self) -> Result<CameraPose> {
        CameraPose::new(
            Point2::new(self.position[0], self.position[1]),
            self.heading_deg.to_radians(),
            self.pitch_deg.to_radians(),
            self.focal_px,
            self.image[0],
            self.image[1],
            self.mount_m,
        )
    }
}

/// On-disk scene description: footprints and camera, plus optional
/// generation settings and a GPS prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SceneFile {
    buildings: Vec<BuildingRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    camera: Option<CameraRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gps_position: Option<[f64; 2]>,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    gps_sigma_m: f64,
    #[serde(default)]
    trees: Vec<TreeBlob>,
    #[serde(default)]
    noise: EdgeNoise,
}

/// A loaded scene file.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneDescription {
    pub spec: SceneSpec,
    /// Position reported by GPS; defaults to the camera position.
    pub gps_position: Point2,
}

fn parse_scene_file(text: &str) -> Result<SceneFile> {
    serde_json::from_str(text).map_err(|e| Error::Parse {
        line: e.line(),
        message: format!("column {}: {}", e.column(), e),
    })
}

fn footprints_from(records: &[BuildingRecord]) -> Result<Vec<BuildingFootprint>> {
    records
        .iter()
        .map(|b| {
            let corners = b.corners.iter().map(|c| Point2::new(c[0], c[1])).collect();
            BuildingFootprint::new(b.id.clone(), corners, b.height_m)
        })
        .collect()
}

pub fn parse_footprints(text: &str) -> Result<Vec<BuildingFootprint>> {
    footprints_from(&parse_scene_file(text)?.buildings)
}

/// Loads building footprints, validating each polygon.
pub fn load_footprints(path: impl AsRef<Path>) -> Result<Vec<BuildingFootprint>> {
    parse_footprints(&fs::read_to_string(path)?)
}

pub fn parse_scene(text: &str) -> Result<SceneDescription> {
    let file = parse_scene_file(text)?;
    let buildings = footprints_from(&file.buildings)?;
    let camera = file
        .camera
        .as_ref()
        .ok_or_else(|| Error::Parse {
            line: 1,
            message: "missing field `camera`".into(),
        })?
        .to_pose()?;
    let gps_position = file
        .gps_position
        .map(|p| Point2::new(p[0], p[1]))
        .unwrap_or(camera.position);
    Ok(SceneDescription {
        spec: SceneSpec {
            seed: file.seed,
            buildings,
            camera,
            gps_noise_sigma: file.gps_sigma_m,
            trees: file.trees,
            edge_noise: file.noise,
        },
        gps_position,
    })
}

pub fn load_scene(path: impl AsRef<Path>) -> Result<SceneDescription> {
    parse_scene(&fs::read_to_string(path)?)
}

/// Serializes a scene in the footprint file format.
pub fn scene_to_json(spec: &SceneSpec, gps_position: Option<Point2>) -> String {
    let file = SceneFile {
        buildings: spec
            .buildings
            .iter()
            .map(|b| BuildingRecord {
                id: b.id.clone(),
                height_m: b.true_height,
                corners: b.corners.iter().map(|c| [c.x, c.y]).collect(),
            })
            .collect(),
        camera: Some(CameraRecord::from_pose(&spec.camera)),
        gps_position: gps_position.map(|p| [p.x, p.y]),
        seed: spec.seed,
        gps_sigma_m: spec.gps_noise_sigma,
        trees: spec.trees.clone(),
        noise: spec.edge_noise,
    };
    serde_json::to_string_pretty(&file).expect("scene serializes")
}

pub const SCENE_FILE: &str = "scene.json";
pub const EDGES_FILE: &str = "edges.pgm";
pub const TREES_FILE: &str = "trees.pgm";
pub const TRUTH_FILE: &str = "truth.json";

/// Writes a rendered scene directory.
pub fn save_rendered(dir: impl AsRef<Path>, spec: &SceneSpec, scene: &RenderedScene) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    fs::write(dir.join(SCENE_FILE), scene_to_json(spec, Some(scene.noisy_pose.position)))?;
    scene.edge_map.save(dir.join(EDGES_FILE))?;
    scene.tree_mask.save(dir.join(TREES_FILE))?;
    let truth = serde_json::to_string_pretty(&scene.truth).expect("truth serializes");
    fs::write(dir.join(TRUTH_FILE), truth)?;
    Ok(())
}

pub fn load_truth(path: impl AsRef<Path>) -> Result<SceneTruth> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: e.line(),
        message: e.to_string(),
    })
}

/// A patch with its class label; `scene` tracks the source block.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPatch {
    pub patch: Patch,
    pub label: String,
    pub scene: usize,
}

pub const NEGATIVE_LABEL: &str = "negative";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PatchSet {
    pub corner: Vec<LabeledPatch>,
    pub roofline: Vec<LabeledPatch>,
}

impl PatchSet {
    fn extend(&mut self, other: PatchSet) {
        self.corner.extend(other.corner);
        self.roofline.extend(other.roofline);
    }
}

/// Labeled corner and roofline patches, plus negatives, from one scene.
pub fn scene_patches(scene: &RenderedScene, scene_index: usize, seed: u64) -> PatchSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0070_6174_6368_6573);
    let map = &scene.edge_map;
    let (w, h) = (map.width(), map.height());
    let mut set = PatchSet::default();
    let mut all_corners = Vec::new();
    for b in &scene.truth.buildings {
        all_corners.extend(b.corners.iter().filter_map(|c| c.roof));
    }
    let push = |list: &mut Vec<LabeledPatch>, patch: Patch, label: &str| {
        list.push(LabeledPatch {
            patch,
            label: label.to_string(),
            scene: scene_index,
        })
    };

    let mut roof_segments = Vec::new();
    for b in &scene.truth.buildings {
        let (Some(roles), Some(side)) = (b.roles, b.side) else {
            continue;
        };
        let mut picks = vec![(roles.cn, CornerType::new(crate::geometry::CornerRole::Cn, side))];
        if roles.cz != roles.cn {
            picks.push((roles.cz, CornerType::new(crate::geometry::CornerRole::Cz, side)));
        }
        for (idx, ty) in picks {
            let c = &b.corners[idx];
            if let (true, Some(p)) = (c.roof_visible, c.roof) {
                let jitter = (rng.random_range(-1..=1) as f64, rng.random_range(-1..=1) as f64);
                push(&mut set.corner, Patch::crop(map, (p.0 + jitter.0, p.1 + jitter.1)), ty.label());
            }
        }
        let n = b.corners.len();
        let cn = roles.cn;
        for nb in [(cn + n - 1) % n, (cn + 1) % n] {
            let Some(line) = b.roofline(cn, nb) else { continue };
            if !line.facing || line.visible_fraction < 0.9 {
                continue;
            }
            let (Some(a), Some(e)) = (b.corners[cn].roof, b.corners[nb].roof) else {
                continue;
            };
            let Some((ca, ce)) = clip_segment(a, e, w, h) else { continue };
            let (pa, pe) = (Pixel::round(ca), Pixel::round(ce));
            if pa.distance_to(pe.as_f64()) < 8.0 {
                continue;
            }
            let Ok(seg) = LineSegment::measure(map, pa, pe) else { continue };
            let u_near = ca.0 - (w as f64 / 2.0 - 0.5);
            let u_far = e.0 - (w as f64 / 2.0 - 0.5);
            let kind = RooflineKind::between(u_near, u_far);
            if let Ok(p) = extract_roofline_patch(map, &seg) {
                push(&mut set.roofline, p, kind.label());
                roof_segments.push((pa, pe));
            }
        }
    }

    // Corner negatives: half on lit pixels, half anywhere, away from corners.
    let lit: Vec<Pixel> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .filter(|&(x, y)| map.get(x, y) > 0)
        .map(|(x, y)| Pixel::new(x as i64, y as i64))
        .collect();
    let wanted = 2 * set.corner.len().max(2);
    let mut made = 0;
    let mut attempts = 0;
    while made < wanted && attempts < wanted * 50 {
        attempts += 1;
        let p = if made % 2 == 0 && !lit.is_empty() {
            lit[rng.random_range(0..lit.len())].as_f64()
        } else {
            (rng.random_range(0.0..w as f64).floor(), rng.random_range(0.0..h as f64).floor())
        };
        if all_corners.iter().any(|c| (c.0 - p.0).hypot(c.1 - p.1) < 8.0) {
            continue;
        }
        push(&mut set.corner, Patch::crop(map, p), NEGATIVE_LABEL);
        made += 1;
    }

    // Roofline negatives: true rooflines shifted off their height, and random strokes.
    let wanted = 2 * roof_segments.len().max(1);
    let mut made = 0;
    let mut attempts = 0;
    while made < wanted && attempts < wanted * 50 {
        attempts += 1;
        let seg = if made % 2 == 0 && !roof_segments.is_empty() {
            let (a, e) = roof_segments[rng.random_range(0..roof_segments.len())];
            let shift = rng.random_range(4..=14) * if rng.random_bool(0.5) { 1 } else { -1 };
            (Pixel::new(a.x, a.y + shift), Pixel::new(e.x, e.y + shift))
        } else {
            let a = Pixel::new(rng.random_range(0..w as i64), rng.random_range(0..h as i64));
            let len = rng.random_range(15.0..120.0);
            let ang: f64 = rng.random_range(-1.2..1.2);
            (a, Pixel::round((a.x as f64 + len * ang.cos(), a.y as f64 - len * ang.sin())))
        };
        let Ok(s) = LineSegment::measure(map, seg.0, seg.1) else { continue };
        if let Ok(p) = extract_roofline_patch(map, &s) {
            push(&mut set.roofline, p, NEGATIVE_LABEL);
            made += 1;
        }
    }
    set
}

/// Renders each scene and splits patches by scene: every `test_every`-th
/// scene goes to the test split.
pub fn generate_patch_dataset(specs: &[SceneSpec], test_every: usize) -> (PatchSet, PatchSet) {
    let mut train = PatchSet::default();
    let mut test = PatchSet::default();
    for (i, spec) in specs.iter().enumerate() {
        let scene = render(spec);
        let patches = scene_patches(&scene, i, spec.seed);
        if test_every > 0 && i % test_every == test_every - 1 {
            test.extend(patches);
        } else {
            train.extend(patches);
        }
    }
    (train, test)
}

pub const MANIFEST_FILE: &str = "manifest.tsv";

/// Writes patches as numbered PGM files with a `path<TAB>label` manifest.
pub fn write_patch_dir(dir: impl AsRef<Path>, patches: &[LabeledPatch]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for (i, p) in patches.iter().enumerate() {
        let name = format!("{i:06}.pgm");
        p.patch.to_edge_map().save(dir.join(&name))?;
        manifest.push_str(&format!("{name}\t{}\n", p.label));
    }
    fs::write(dir.join(MANIFEST_FILE), manifest)?;
    Ok(())
}

pub fn read_patch_dir(dir: impl AsRef<Path>) -> Result<Vec<LabeledPatch>> {
    let dir = dir.as_ref();
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (path, label) = line.split_once('\t').ok_or_else(|| Error::Parse {
            line: n + 1,
            message: "expected path<TAB>label".into(),
        })?;
        let patch = Patch::from_edge_map(&EdgeMap::load(dir.join(path))?)?;
        out.push(LabeledPatch {
            patch,
            label: label.trim().to_string(),
            scene: 0,
        });
    }
    Ok(out)
}
