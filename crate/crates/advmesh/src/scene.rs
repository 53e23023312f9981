//! Procedural synthetic driving scenes: a surround camera rig, ground-truth
//! boxes with proxy cuboid geometry, and lazily rendered raw images.

use std::path::Path;
use std::sync::OnceLock;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Array;
use crate::error::{Error, Result};
use crate::geometry::{iou_bev, project_box_2d, BBox3D, CameraModel, Category, Mat3, Vec3};
use crate::render::render_boxes_hard;

/// Scene-generation parameters; defaults mirror a six-camera surround rig.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub n_cameras: usize,
    pub cam_height: f64,
    pub fov_deg: f64,
    pub image_width: usize,
    pub image_height: usize,
    pub n_vehicles: usize,
    pub n_other: usize,
    pub min_dist: f64,
    pub max_dist: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            n_cameras: 6,
            cam_height: 1.6,
            fov_deg: 70.0,
            image_width: 704,
            image_height: 256,
            n_vehicles: 5,
            n_other: 4,
            min_dist: 4.0,
            max_dist: 18.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SceneObject {
    pub center: Vec3,
    pub size: Vec3,
    pub yaw: f64,
    pub category: Category,
    pub color: [f64; 3],
}

impl SceneObject {
    pub fn bbox(&self) -> BBox3D {
        BBox3D::new(self.center, self.size, self.yaw, self.category)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scene {
    pub id: u64,
    pub seed: u64,
    pub cameras: Vec<CameraModel>,
    pub objects: Vec<SceneObject>,
    #[serde(skip)]
    raw: OnceLock<Vec<Array>>,
}

impl Scene {
    pub fn boxes(&self) -> Vec<BBox3D> {
        self.objects.iter().map(|o| o.bbox()).collect()
    }

    pub fn vehicles(&self) -> Vec<BBox3D> {
        self.objects.iter().filter(|o| o.category == Category::Vehicle).map(|o| o.bbox()).collect()
    }

    /// Raw multi-view images, rendered once and cached.
    pub fn raw_images(&self) -> &[Array] {
        self.raw.get_or_init(|| render_keyframe(self))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Data(format!("serialize scene: {e}")))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Scene> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
        let scene: Scene = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        for cam in &scene.cameras {
            cam.validate().map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        }
        Ok(scene)
    }
}

/// Load all `*.json` scenes in a directory, sorted by file name.
pub fn load_scene_dir(dir: &Path) -> Result<Vec<Scene>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "json").unwrap_or(false))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Data(format!("no scene files in {}", dir.display())));
    }
    paths.iter().map(|p| Scene::load(p)).collect()
}

/// Cameras in a uniform ring at the ego origin: yaw k*360/n, all at `height`
/// above ground, horizontal optical axes.
pub fn make_camera_rig(
    n: usize,
    height: f64,
    fov_deg: f64,
    image_size: (usize, usize),
) -> Result<Vec<CameraModel>> {
    if n < 1 {
        return Err(Error::Config("camera rig needs at least one camera".into()));
    }
    if !(10.0..120.0).contains(&fov_deg) {
        return Err(Error::Config(format!("fov {fov_deg} outside (10, 120) degrees")));
    }
    let (w, h) = image_size;
    let fx = (w as f64 / 2.0) / (fov_deg.to_radians() / 2.0).tan();
    let k: Mat3 = [[fx, 0.0, w as f64 / 2.0], [0.0, fx, h as f64 / 2.0], [0.0, 0.0, 1.0]];
    let mut cams = Vec::with_capacity(n);
    for i in 0..n {
        let yaw = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
        let (s, c) = yaw.sin_cos();
        // rows: camera x (right), y (down), z (forward) in ego coordinates
        let r: Mat3 = [[s, -c, 0.0], [0.0, 0.0, -1.0], [c, s, 0.0]];
        let center: Vec3 = [0.0, 0.0, height];
        let t = [
            -(r[0][0] * center[0] + r[0][1] * center[1] + r[0][2] * center[2]),
            -(r[1][0] * center[0] + r[1][1] * center[1] + r[1][2] * center[2]),
            -(r[2][0] * center[0] + r[2][1] * center[1] + r[2][2] * center[2]),
        ];
        cams.push(CameraModel::new(k, r, t, w, h));
    }
    Ok(cams)
}

fn category_base_color(cat: Category) -> [f64; 3] {
    match cat {
        Category::Vehicle => [0.20, 0.35, 0.75],
        Category::Pedestrian => [0.75, 0.25, 0.20],
        Category::Barrier => [0.80, 0.65, 0.20],
    }
}

/// Deterministic per-seed scene: vehicles plus pedestrian/barrier proxies,
/// rejection-sampled for non-overlap and per-camera visibility.
pub fn generate_scene(cfg: &SceneConfig, seed: u64) -> Result<Scene> {
    let cameras = make_camera_rig(
        cfg.n_cameras,
        cfg.cam_height,
        cfg.fov_deg,
        (cfg.image_width, cfg.image_height),
    )?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut objects: Vec<SceneObject> = Vec::new();
    let mut tries = 0usize;
    let total = cfg.n_vehicles + cfg.n_other;
    while objects.len() < total {
        tries += 1;
        if tries > 10_000 {
            return Err(Error::Data(format!(
                "scene {seed}: rejection sampling exceeded 10000 tries (density too high)"
            )));
        }
        let idx = objects.len();
        let category = if idx < cfg.n_vehicles {
            Category::Vehicle
        } else if (idx - cfg.n_vehicles) % 2 == 0 {
            Category::Pedestrian
        } else {
            Category::Barrier
        };
        let size: Vec3 = match category {
            Category::Vehicle => [
                rng.gen_range(3.5..4.5),
                rng.gen_range(1.8..2.2),
                rng.gen_range(1.4..1.6),
            ],
            Category::Pedestrian => [0.6, 0.6, 1.7],
            Category::Barrier => [2.0, 0.3, 1.0],
        };
        let bearing = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
        let dist = rng.gen_range(cfg.min_dist..cfg.max_dist);
        let center: Vec3 = [bearing.cos() * dist, bearing.sin() * dist, size[2] / 2.0];
        let yaw = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        let bbox = BBox3D::new(center, size, yaw, category);

        if objects.iter().any(|o| iou_bev(&o.bbox(), &bbox) > 0.0) {
            continue;
        }
        // every object must be clearly visible in at least one camera
        let visible = cameras
            .iter()
            .any(|cam| project_box_2d(&bbox, cam).map(|bb| bb.area() >= 20.0).unwrap_or(false));
        if !visible {
            continue;
        }
        let base = category_base_color(category);
        let jitter = |rng: &mut ChaCha20Rng, v: f64| (v + rng.gen_range(-0.1..0.1)).clamp(0.05, 0.95);
        let color = [jitter(&mut rng, base[0]), jitter(&mut rng, base[1]), jitter(&mut rng, base[2])];
        objects.push(SceneObject { center, size, yaw, category, color });
    }
    Ok(Scene { id: seed, seed, cameras, objects, raw: OnceLock::new() })
}

/// Render all camera views of the scene (z-buffer, cuboid proxies).
pub fn render_keyframe(scene: &Scene) -> Vec<Array> {
    let boxes: Vec<(BBox3D, [f64; 3])> = scene.objects.iter().map(|o| (o.bbox(), o.color)).collect();
    scene.cameras.iter().map(|cam| render_boxes_hard(&boxes, cam).rgb).collect()
}
