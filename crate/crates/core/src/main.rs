use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use roofline::edgemap::{EdgeMap, Mask};
use roofline::embedding::{evaluate, train_model, Model, Task};
use roofline::geometry::CameraPose;
use roofline::pipeline::{
    level_truth, overlay_ppm, run_calibration, run_multi, run_tall_building, Classifier, ClassifierSource, Config,
    SceneInput,
};
use roofline::rectify::{pitch_homography, rectify_image};
use roofline::scene::{
    generate_patch_dataset, generate_scene, load_scene, read_patch_dir, render, save_rendered, scene_patches,
    write_patch_dir, SceneSpec, EDGES_FILE, SCENE_FILE, TREES_FILE,
};
use roofline::Error;

#[derive(Parser)]
#[command(name = "roofline", version, about = "Building heights from street-level edge maps and footprints")]
struct Cli {
    /// Seed for generation and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML file with [pipeline], [training] and [generator] tables.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Corner,
    Roofline,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic scene (or a scene file) with truth and labeled patches.
    Gen {
        #[arg(long)]
        out: PathBuf,
        /// Number of scenes; more than one also writes train/test patch splits.
        #[arg(long, default_value_t = 1)]
        scenes: usize,
        /// Every n-th scene goes to the test split.
        #[arg(long, default_value_t = 5)]
        test_every: usize,
        /// Render this scene file instead of generating one.
        #[arg(long)]
        scene: Option<PathBuf>,
    },
    /// Train an embedding model and classifier head on a patch directory.
    Train {
        #[arg(long, value_enum)]
        task: TaskArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a model on a labeled patch directory.
    EvalClassifier {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Estimate building heights for a rendered scene directory.
    Estimate {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        oracle_classifier: bool,
        #[arg(long, required_unless_present = "oracle_classifier")]
        corner_model: Option<PathBuf>,
        #[arg(long, required_unless_present = "oracle_classifier")]
        roofline_model: Option<PathBuf>,
        /// Median over this many views stepped back along the heading.
        #[arg(long, default_value_t = 1)]
        multi: usize,
    },
    /// Calibrate the camera position only.
    Calibrate {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        oracle_classifier: bool,
        #[arg(long, required_unless_present = "oracle_classifier")]
        corner_model: Option<PathBuf>,
    },
    /// Warp a pitched edge map to the level view.
    Rectify {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        pitch_deg: f64,
        #[arg(long, default_value_t = 320.0)]
        focal_px: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidConfig(_) => 3,
        Error::Io(_)
        | Error::Parse { .. }
        | Error::Format(_)
        | Error::InvalidFootprint { .. }
        | Error::InvalidPose(_)
        | Error::DimensionMismatch(_)
        | Error::OutOfBounds { .. } => 2,
        _ => 1,
    }
}

struct SceneDir {
    spec: SceneSpec,
    gps: CameraPose,
    edges: EdgeMap,
    trees: Mask,
}

fn load_scene_dir(dir: &Path) -> roofline::Result<SceneDir> {
    let desc = load_scene(dir.join(SCENE_FILE))?;
    let edges = EdgeMap::load(dir.join(EDGES_FILE))?;
    let trees_path = dir.join(TREES_FILE);
    let trees = if trees_path.exists() {
        Mask::load(trees_path)?
    } else {
        Mask::new(edges.width(), edges.height())
    };
    let gps = desc.spec.camera.with_position(desc.gps_position);
    Ok(SceneDir {
        spec: desc.spec,
        gps,
        edges,
        trees,
    })
}

fn load_model(path: &Path, task: Task) -> roofline::Result<Model> {
    let m = Model::load(path)?;
    if m.task != task {
        return Err(Error::Format(format!("{} is not a {task:?} model", path.display())));
    }
    Ok(m)
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> roofline::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn run(cli: Cli) -> roofline::Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.training.seed = seed;
        cfg.pipeline.seed = seed;
    }
    let seed = cli.seed.unwrap_or(cfg.pipeline.seed);

    match cli.command {
        Command::Gen {
            out,
            scenes,
            test_every,
            scene,
        } => {
            if scenes == 0 {
                return Err(Error::InvalidConfig("--scenes must be at least 1".into()));
            }
            if scenes == 1 {
                let spec = match scene {
                    Some(p) => {
                        let mut s = load_scene(p)?.spec;
                        if let Some(seed) = cli.seed {
                            s.seed = seed;
                        }
                        s
                    }
                    None => generate_scene(seed, &cfg.generator),
                };
                let rendered = render(&spec);
                save_rendered(&out, &spec, &rendered)?;
                let patches = scene_patches(&rendered, 0, spec.seed);
                write_patch_dir(out.join("patches").join("corner"), &patches.corner)?;
                write_patch_dir(out.join("patches").join("roofline"), &patches.roofline)?;
                info!("wrote scene {} to {}", spec.seed, out.display());
            } else {
                let specs: Vec<SceneSpec> = (0..scenes as u64)
                    .map(|i| generate_scene(seed.wrapping_add(i), &cfg.generator))
                    .collect();
                for (i, spec) in specs.iter().enumerate() {
                    save_rendered(out.join(format!("scene_{i:04}")), spec, &render(spec))?;
                }
                let (train, test) = generate_patch_dataset(&specs, test_every);
                for (name, set) in [("train", &train), ("test", &test)] {
                    write_patch_dir(out.join(name).join("corner"), &set.corner)?;
                    write_patch_dir(out.join(name).join("roofline"), &set.roofline)?;
                }
                info!("wrote {scenes} scenes to {}", out.display());
            }
        }
        Command::Train { task, data, out } => {
            let task = match task {
                TaskArg::Corner => Task::Corner,
                TaskArg::Roofline => Task::Roofline,
            };
            let patches = read_patch_dir(&data)?;
            let (model, trace) = train_model(task, &patches, &cfg.training)?;
            model.save(&out)?;
            if let (Some(first), Some(last)) = (trace.first(), trace.last()) {
                println!("trained {} iterations, loss {first:.4} -> {last:.4}", trace.len());
            }
        }
        Command::EvalClassifier { model, data } => {
            let model = Model::load(&model)?;
            let patches = read_patch_dir(&data)?;
            let m = evaluate(&model, &patches)?;
            println!("accuracy: {:.2}%", 100.0 * m.accuracy);
            println!("precision: {:.2}%", 100.0 * m.precision);
            println!("recall: {:.2}%", 100.0 * m.recall);
            println!("f1: {:.2}%", 100.0 * m.f1);
        }
        Command::Estimate {
            scene,
            out,
            oracle_classifier,
            corner_model,
            roofline_model,
            multi,
        } => {
            let dir = load_scene_dir(&scene)?;
            let models = match (oracle_classifier, corner_model, roofline_model) {
                (false, Some(c), Some(r)) => Some((load_model(&c, Task::Corner)?, load_model(&r, Task::Roofline)?)),
                _ => None,
            };
            let source = match &models {
                Some((c, r)) => ClassifierSource::Learned { corner: c, roofline: r },
                None => ClassifierSource::Oracle,
            };
            let report = if multi > 1 {
                run_multi(&dir.spec, multi, source, &cfg.pipeline)?
            } else {
                let truth = level_truth(&dir.spec, &render(&dir.spec));
                let classifier = match source {
                    ClassifierSource::Oracle => Classifier::Oracle(&truth),
                    ClassifierSource::Learned { corner, roofline } => Classifier::Learned { corner, roofline },
                };
                let input = SceneInput {
                    edge_map: &dir.edges,
                    tree_mask: &dir.trees,
                    footprints: &dir.spec.buildings,
                    gps_pose: dir.gps,
                };
                run_tall_building(&input, &classifier, &cfg.pipeline)?
            };
            let shown = if dir.gps.pitch != 0.0 {
                rectify_image(&dir.edges, &pitch_homography(&dir.gps)?)?
            } else {
                dir.edges.clone()
            };
            fs::create_dir_all(&out)?;
            write_file(&out.join("report.json"), report.to_json())?;
            write_file(&out.join("overlay.ppm"), overlay_ppm(&shown, &report))?;
            let ok = report.buildings.iter().filter(|b| b.height_m.is_some()).count();
            println!("{ok}/{} buildings estimated; report in {}", report.buildings.len(), out.display());
        }
        Command::Calibrate {
            scene,
            out,
            oracle_classifier,
            corner_model,
        } => {
            let dir = load_scene_dir(&scene)?;
            let model = match (oracle_classifier, corner_model) {
                (false, Some(c)) => Some(load_model(&c, Task::Corner)?),
                _ => None,
            };
            let truth = level_truth(&dir.spec, &render(&dir.spec));
            let classifier = match &model {
                Some(m) => Classifier::Learned { corner: m, roofline: m },
                None => Classifier::Oracle(&truth),
            };
            let input = SceneInput {
                edge_map: &dir.edges,
                tree_mask: &dir.trees,
                footprints: &dir.spec.buildings,
                gps_pose: dir.gps,
            };
            let report = run_calibration(&input, &classifier, &cfg.pipeline)?;
            let json = serde_json::json!({ "schema": 1, "calibration": report });
            let text = serde_json::to_string_pretty(&json).expect("json") + "\n";
            match out {
                Some(p) => write_file(&p, text)?,
                None => print!("{text}"),
            }
        }
        Command::Rectify {
            input,
            pitch_deg,
            focal_px,
            out,
        } => {
            let map = EdgeMap::load(&input)?;
            let pose = CameraPose::new(
                roofline::geometry::Point2::new(0.0, 0.0),
                0.0,
                pitch_deg.to_radians(),
                focal_px,
                map.width(),
                map.height(),
                1.0,
            )?;
            let warped = rectify_image(&map, &pitch_homography(&pose)?)?;
            warped.save(&out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
