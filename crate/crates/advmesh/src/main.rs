//! Command-line front end: scene generation, detector training, attack runs,
//! evaluation, sweeps, and debug rendering. Batch operation only; every
//! command is deterministic given its config and seed.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
//! failure.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use advmesh::attack::{plan_poses, run_attack};
use advmesh::config::RunConfig;
use advmesh::detector::{train_detector, DetectorParams, TrainOptions};
use advmesh::error::{Error, Result};
use advmesh::eval::{evaluate, sweep_distance, sweep_placement, EvalReport};
use advmesh::geometry::vec_norm;
use advmesh::img::{write_png, write_svg_chart, Series};
use advmesh::mesh::{init_primitive, load_obj, save_obj, PrimitiveShape};
use advmesh::occlusion::{BoxFillProvider, FileMaskProvider, SegmentationProvider};
use advmesh::scene::{generate_scene, load_scene_dir, Scene};

#[derive(Parser)]
#[command(name = "advmesh", about = "Non-invasive 3D adversarial objects against a BEV detector", version)]
struct Cli {
    /// TOML or JSON config file; CLI flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Cap the rayon worker count.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scene files.
    GenScenes {
        /// Number of scenes to generate.
        #[arg(long)]
        n: usize,
        /// Base seed; scene i uses seed + i.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        image_width: Option<usize>,
        #[arg(long)]
        image_height: Option<usize>,
        #[arg(long)]
        n_vehicles: Option<usize>,
        #[arg(long)]
        n_other: Option<usize>,
    },
    /// Train the toy BEV detector on a scene directory.
    TrainDetector {
        #[arg(long)]
        scenes: PathBuf,
        /// Checkpoint output path (JSON).
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        channels: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Optimize an adversarial mesh against a trained detector.
    Attack {
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        detector: PathBuf,
        #[arg(long)]
        shape: Option<PrimitiveShape>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        lr: Option<f64>,
        /// Per-vertex displacement cap.
        #[arg(long)]
        cap: Option<f64>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
        /// Placement gap to the target corner, meters.
        #[arg(long)]
        distance: Option<f64>,
        #[arg(long)]
        meshes_per_frame: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Disable the occlusion processing.
        #[arg(long)]
        no_real_occ: bool,
        /// Directory of external segmentation masks (<scene>_<cam>_<obj>.png).
        #[arg(long)]
        mask_dir: Option<PathBuf>,
    },
    /// Evaluate an adversarial mesh: ASR table and AP, written as CSV.
    Eval {
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        detector: PathBuf,
        /// Adversarial mesh (OBJ with vertex colors).
        #[arg(long)]
        mesh: PathBuf,
        /// Shape of the initialized reference mesh.
        #[arg(long)]
        shape: Option<PrimitiveShape>,
        /// Comma-separated IoU thresholds.
        #[arg(long, value_delimiter = ',')]
        thresholds: Option<Vec<f64>>,
        #[arg(long)]
        distance: Option<f64>,
        /// CSV output path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Distance or placement sweeps, CSV plus an SVG trend chart.
    Sweep {
        #[arg(long, value_parser = ["distance", "placement"])]
        mode: String,
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        detector: PathBuf,
        #[arg(long)]
        mesh: PathBuf,
        #[arg(long)]
        shape: Option<PrimitiveShape>,
        /// Distances for --mode distance.
        #[arg(long, value_delimiter = ',')]
        distances: Option<Vec<f64>>,
        /// Mesh counts for --mode placement.
        #[arg(long, value_delimiter = ',')]
        counts: Option<Vec<usize>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Composite an adversarial mesh into one camera of one scene.
    RenderDebug {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        mesh: PathBuf,
        #[arg(long, default_value_t = 0)]
        camera: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        distance: Option<f64>,
        #[arg(long)]
        no_real_occ: bool,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .expect("rayon pool initialization");
    }
    match run(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn seg_provider(mask_dir: &Option<PathBuf>) -> Box<dyn SegmentationProvider + Sync> {
    match mask_dir {
        Some(dir) => Box::new(FileMaskProvider { dir: dir.clone() }),
        None => Box::new(BoxFillProvider),
    }
}

fn load_detector_and_scenes(detector: &Path, scenes: &Path) -> Result<(DetectorParams, Vec<Scene>)> {
    let det = DetectorParams::load(detector)?;
    let scenes = load_scene_dir(scenes)?;
    Ok((det, scenes))
}

fn write_report_csv(path: &Path, labels_and_reports: &[(String, &EvalReport)]) -> Result<()> {
    let mut out = String::from(EvalReport::csv_header());
    out.push('\n');
    for (label, report) in labels_and_reports {
        for row in report.csv_rows(label) {
            out.push_str(&row);
            out.push('\n');
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn print_report(label: &str, report: &EvalReport) {
    println!("== {label}");
    println!("{:>10} {:>10} {:>8} {:>8}", "threshold", "asr", "n_init", "n_adv");
    for (i, t) in report.thresholds.iter().enumerate() {
        let asr = report.asr[i].map(|v| format!("{v:.3}")).unwrap_or_else(|| "undef".into());
        println!("{t:>10.2} {asr:>10} {:>8} {:>8}", report.n_init[i], report.n_adv[i]);
    }
    println!(
        "vehicle AP@0.3 init/adv: {:.3} / {:.3}   AP@0.5 init/adv: {:.3} / {:.3}",
        report.ap_vehicle_init[0], report.ap_vehicle_adv[0], report.ap_vehicle_init[1], report.ap_vehicle_adv[1]
    );
    println!(
        "category AP@0.3 adv (vehicle, pedestrian, barrier): {:.3} {:.3} {:.3}",
        report.ap_category_adv[0], report.ap_category_adv[1], report.ap_category_adv[2]
    );
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli.config)?;
    match cli.command {
        Command::GenScenes { n, seed, out, image_width, image_height, n_vehicles, n_other } => {
            if let Some(w) = image_width {
                cfg.scene.image_width = w;
            }
            if let Some(h) = image_height {
                cfg.scene.image_height = h;
            }
            if let Some(v) = n_vehicles {
                cfg.scene.n_vehicles = v;
            }
            if let Some(o) = n_other {
                cfg.scene.n_other = o;
            }
            cfg.validate()?;
            std::fs::create_dir_all(&out)
                .map_err(|e| Error::Data(format!("cannot create {}: {e}", out.display())))?;
            cfg.echo_into(&out)?;
            for i in 0..n {
                let scene = generate_scene(&cfg.scene, seed + i as u64)?;
                scene.save(&out.join(format!("scene_{i:04}.json")))?;
            }
            println!("wrote {n} scenes to {}", out.display());
            Ok(())
        }

        Command::TrainDetector { scenes, out, epochs, lr, channels, seed } => {
            if let Some(e) = epochs {
                cfg.detector.epochs = e;
            }
            if let Some(l) = lr {
                cfg.detector.lr = l;
            }
            if let Some(c) = channels {
                cfg.detector.channels = c;
            }
            if let Some(s) = seed {
                cfg.detector.seed = s;
            }
            cfg.validate()?;
            let scene_set = load_scene_dir(&scenes)?;
            let (w, h) = (scene_set[0].cameras[0].width, scene_set[0].cameras[0].height);
            let meta = advmesh::detector::DetectorMeta { grid: cfg.detector.grid(), image_width: w, image_height: h };
            let mut params = DetectorParams::init(meta, cfg.detector.seed)?;
            let opts = TrainOptions {
                epochs: cfg.detector.epochs,
                lr: cfg.detector.lr,
                batch_size: cfg.detector.batch_size,
                seed: cfg.detector.seed,
            };
            let report = train_detector(&scene_set, &mut params, &opts)?;
            if report.diverged {
                params.save(&out)?;
                return Err(Error::Numeric(format!(
                    "training diverged; last finite checkpoint written to {}",
                    out.display()
                )));
            }
            params.save(&out)?;
            println!(
                "trained {} epochs on {} scenes, final loss {:.4}, checkpoint {}",
                report.epoch_losses.len(),
                scene_set.len(),
                report.epoch_losses.last().copied().unwrap_or(f64::NAN),
                out.display()
            );
            Ok(())
        }

        Command::Attack {
            scenes,
            detector,
            shape,
            out,
            lr,
            cap,
            alpha,
            beta,
            distance,
            meshes_per_frame,
            epochs,
            no_real_occ,
            mask_dir,
        } => {
            if let Some(s) = shape {
                cfg.attack.shape = s;
            }
            if let Some(v) = lr {
                cfg.attack.lr = v;
            }
            if let Some(v) = cap {
                cfg.attack.displacement_cap = v;
            }
            if let Some(v) = alpha {
                cfg.attack.alpha = v;
            }
            if let Some(v) = beta {
                cfg.attack.beta = v;
            }
            if let Some(v) = distance {
                cfg.attack.distance = v;
            }
            if let Some(v) = meshes_per_frame {
                cfg.attack.meshes_per_frame = v;
            }
            if let Some(v) = epochs {
                cfg.attack.epochs = v;
            }
            if no_real_occ {
                cfg.attack.real_occ = false;
            }
            cfg.validate()?;
            let (det, scene_set) = load_detector_and_scenes(&detector, &scenes)?;
            std::fs::create_dir_all(&out)
                .map_err(|e| Error::Data(format!("cannot create {}: {e}", out.display())))?;
            cfg.echo_into(&out)?;
            let seg = seg_provider(&mask_dir);
            let result = run_attack(&scene_set, &det, &cfg.attack, seg.as_ref())?;

            // loss curve CSV + SVG
            let mut csv = String::from("epoch,loss_cls,loss_loc,loss_sim,total\n");
            for (e, p) in result.curve.iter().enumerate() {
                csv.push_str(&format!("{},{:.9},{:.9},{:.9},{:.9}\n", e + 1, p.cls, p.loc, p.sim, p.total));
            }
            std::fs::write(out.join("loss.csv"), csv)?;
            let series: Vec<Series> = vec![
                Series { label: "total", points: result.curve.iter().enumerate().map(|(i, p)| ((i + 1) as f64, p.total)).collect() },
                Series { label: "cls", points: result.curve.iter().enumerate().map(|(i, p)| ((i + 1) as f64, p.cls)).collect() },
                Series { label: "loc", points: result.curve.iter().enumerate().map(|(i, p)| ((i + 1) as f64, p.loc)).collect() },
                Series { label: "sim", points: result.curve.iter().enumerate().map(|(i, p)| ((i + 1) as f64, p.sim)).collect() },
            ];
            write_svg_chart(&out.join("loss_curve.svg"), "attack loss", "epoch", "loss", &series)?;

            for (e, mesh) in result.checkpoints.iter().enumerate() {
                save_obj(mesh, &out.join(format!("mesh_epoch_{:02}.obj", e + 1)))?;
            }
            save_obj(&result.mesh, &out.join("mesh_final.obj"))?;

            // sample composited views of the first scene
            write_debug_views(&scene_set[0], &det, &result.mesh, &cfg, !cfg.attack.real_occ, seg.as_ref(), &out)?;
            println!("attack finished; artifacts in {}", out.display());
            Ok(())
        }

        Command::Eval { scenes, detector, mesh, shape, thresholds, distance, out } => {
            if let Some(t) = thresholds {
                cfg.eval.thresholds = t;
            }
            if let Some(s) = shape {
                cfg.attack.shape = s;
            }
            if let Some(d) = distance {
                cfg.attack.distance = d;
            }
            cfg.validate()?;
            let (det, scene_set) = load_detector_and_scenes(&detector, &scenes)?;
            let mesh_adv = load_obj(&mesh)?;
            let mesh_init = init_primitive(cfg.attack.shape);
            if mesh_init.vertex_count() != mesh_adv.vertex_count() {
                return Err(Error::Data(format!(
                    "mesh {} has {} vertices, expected {} for shape {:?}",
                    mesh.display(),
                    mesh_adv.vertex_count(),
                    mesh_init.vertex_count(),
                    cfg.attack.shape
                )));
            }
            let seg = seg_provider(&None);
            let report = evaluate(&scene_set, &det, &mesh_init, &mesh_adv, &cfg.attack, &cfg.eval, seg.as_ref())?;
            print_report("eval", &report);
            if let Some(path) = out {
                write_report_csv(&path, &[("eval".to_string(), &report)])?;
                println!("wrote {}", path.display());
            }
            Ok(())
        }

        Command::Sweep { mode, scenes, detector, mesh, shape, distances, counts, out } => {
            if let Some(s) = shape {
                cfg.attack.shape = s;
            }
            cfg.validate()?;
            let (det, scene_set) = load_detector_and_scenes(&detector, &scenes)?;
            let mesh_adv = load_obj(&mesh)?;
            let mesh_init = init_primitive(cfg.attack.shape);
            let seg = seg_provider(&None);
            match mode.as_str() {
                "distance" => {
                    let ds = distances.unwrap_or_else(|| vec![0.1, 0.5, 1.0, 2.0, 3.0 - 1e-9]);
                    let rows = sweep_distance(
                        &scene_set, &det, &mesh_init, &mesh_adv, &ds, &cfg.attack, &cfg.eval, seg.as_ref(),
                    )?;
                    let labeled: Vec<(String, &EvalReport)> =
                        rows.iter().map(|(d, r)| (format!("d={d:.2}"), r)).collect();
                    write_report_csv(&out, &labeled)?;
                    let points: Vec<(f64, f64)> = rows
                        .iter()
                        .filter_map(|(d, r)| {
                            let i = r.thresholds.iter().position(|t| (t - 0.5).abs() < 1e-9)?;
                            r.asr[i].map(|v| (*d, v))
                        })
                        .collect();
                    write_svg_chart(
                        &out.with_extension("svg"),
                        "ASR@0.5 vs placement distance",
                        "distance (m)",
                        "ASR",
                        &[Series { label: "asr@0.5", points }],
                    )?;
                }
                "placement" => {
                    let ks = counts.unwrap_or_else(|| vec![1, 3, 5, 8]);
                    let rows = sweep_placement(
                        &scene_set, &det, &mesh_init, &mesh_adv, &ks, &cfg.attack, &cfg.eval, seg.as_ref(),
                    )?;
                    let labeled: Vec<(String, &EvalReport)> =
                        rows.iter().map(|(k, r)| (format!("count={k}"), r)).collect();
                    write_report_csv(&out, &labeled)?;
                    let points: Vec<(f64, f64)> = rows
                        .iter()
                        .filter_map(|(k, r)| {
                            let i = r.thresholds.iter().position(|t| (t - 0.3).abs() < 1e-9)?;
                            r.asr[i].map(|v| (*k as f64, v))
                        })
                        .collect();
                    write_svg_chart(
                        &out.with_extension("svg"),
                        "ASR@0.3 vs mesh count",
                        "meshes per scene",
                        "ASR",
                        &[Series { label: "asr@0.3", points }],
                    )?;
                }
                other => return Err(Error::Config(format!("unknown sweep mode '{other}'"))),
            }
            println!("wrote {}", out.display());
            Ok(())
        }

        Command::RenderDebug { scene, mesh, camera, out, distance, no_real_occ } => {
            if let Some(d) = distance {
                cfg.attack.distance = d;
            }
            if no_real_occ {
                cfg.attack.real_occ = false;
            }
            cfg.validate()?;
            let scene = Scene::load(&scene)?;
            let mesh = load_obj(&mesh)?;
            if camera >= scene.cameras.len() {
                return Err(Error::Config(format!(
                    "camera {camera} out of range ({} cameras)",
                    scene.cameras.len()
                )));
            }
            let seg = seg_provider(&None);
            let img = composite_view(&scene, &mesh, camera, &cfg, seg.as_ref())?;
            write_png(&out, &img)?;
            println!("wrote {}", out.display());
            Ok(())
        }
    }
}

/// Composite the mesh into one camera view without a detector (debug path).
fn composite_view(
    scene: &Scene,
    mesh: &advmesh::mesh::Mesh,
    camera: usize,
    cfg: &RunConfig,
    seg: &(dyn SegmentationProvider + Sync),
) -> Result<advmesh::Array> {
    use advmesh::occlusion::{apply_occlusion, composite};
    use advmesh::render::{rasterize_soft, SoftParams};
    let placements = plan_poses(mesh, scene, &cfg.attack);
    if placements.is_empty() {
        return Err(Error::Data(format!("scene {} has no target vehicles", scene.id)));
    }
    let poses: Vec<_> = placements.iter().map(|(p, _)| *p).collect();
    let cam = &scene.cameras[camera];
    let tape = advmesh::Tape::new();
    let soft = SoftParams::for_image(cam.height, cam.width);
    // joint rasterization of all instances
    let verts = tape.constant(advmesh::Array::from_vec(&[mesh.vertex_count(), 3], mesh.vertices_flat()));
    let tex = tape.constant(advmesh::Array::from_vec(&[mesh.vertex_count(), 3], mesh.texture_flat()));
    let render = advmesh::render::rasterize_soft_vars(&tape, verts, tex, &mesh.faces, &poses, cam, soft);
    let _ = rasterize_soft; // single-instance variant kept for library users
    let raw = &scene.raw_images()[camera];
    let objects = scene.boxes();
    let render = if cfg.attack.real_occ {
        apply_occlusion(&tape, render, mesh, &poses, &objects, raw, cam, seg, scene.id, camera)?
    } else {
        render
    };
    Ok(composite(&tape, &render, raw).value())
}

/// Sample composited PNGs of every camera of one scene.
fn write_debug_views(
    scene: &Scene,
    _det: &DetectorParams,
    mesh: &advmesh::mesh::Mesh,
    cfg: &RunConfig,
    _no_occ: bool,
    seg: &(dyn SegmentationProvider + Sync),
    out: &Path,
) -> Result<()> {
    // order cameras by how close the nearest target is, most interesting first
    let placements = plan_poses(mesh, scene, &cfg.attack);
    if placements.is_empty() {
        return Ok(());
    }
    let _ = vec_norm(placements[0].0.center);
    for camera in 0..scene.cameras.len() {
        let img = composite_view(scene, mesh, camera, cfg, seg)?;
        write_png(&out.join(format!("sample_cam{camera}.png")), &img)?;
    }
    Ok(())
}
