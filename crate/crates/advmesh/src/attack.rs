//! The attack loop: place mesh instances next to target vehicles, render and
//! composite them into every view, run the frozen detector, evaluate the
//! suppression / mislocalization / scene-confusion losses, and update mesh
//! vertices and texture with Adam under the displacement cap.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, Tape, Var};
use crate::detector::{build_lift_plan, extract_bev, heads, BevGrid, DetectorParams, LiftPlan, ParamVars};
use crate::error::{Error, Result};
use crate::geometry::{vec_norm, BBox3D, Vec3};
use crate::mesh::{clamp_displacement, init_primitive, place, Mesh, MeshPose, PrimitiveShape};
use crate::occlusion::{apply_occlusion, composite, BoxFillProvider, SegmentationProvider};
use crate::optim::Adam;
use crate::render::{rasterize_soft_vars, RenderOutput, SoftParams};
use crate::scene::Scene;

/// Attack hyperparameters; defaults follow the evaluated setup (Adam 0.02,
/// displacement cap 0.1, loss weights 1, 10 epochs, up to 4 meshes per frame,
/// placement gap 0.1 at the rear-right-bottom corner).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub shape: PrimitiveShape,
    pub lr: f64,
    pub displacement_cap: f64,
    pub alpha: f64,
    pub beta: f64,
    pub epochs: usize,
    pub meshes_per_frame: usize,
    pub distance: f64,
    /// Anchor corner of the target box (see the corner index convention);
    /// 2 is the rear bottom corner on the -w side.
    pub corner_index: usize,
    /// Apply the occlusion processing during training and evaluation.
    pub real_occ: bool,
    /// Scenes per Adam step (gradient accumulation).
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            shape: PrimitiveShape::Cylinder,
            lr: 0.02,
            displacement_cap: 0.1,
            alpha: 1.0,
            beta: 1.0,
            epochs: 10,
            meshes_per_frame: 4,
            distance: 0.1,
            corner_index: 2,
            real_occ: true,
            batch_size: 4,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::Config("attack.lr must be positive".into()));
        }
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(Error::Config("attack loss weights must be non-negative".into()));
        }
        if self.meshes_per_frame < 1 {
            return Err(Error::Config("attack.meshes_per_frame must be >= 1".into()));
        }
        if self.corner_index >= 8 {
            return Err(Error::Config("attack.corner_index must be in 0..8".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("attack.batch_size must be >= 1".into()));
        }
        Ok(())
    }

    /// Outward lateral placement direction at the configured corner: the
    /// box-local +-w axis pointing away from the box, rotated by its yaw.
    pub fn direction_for(&self, target: &BBox3D) -> Vec3 {
        let sign = if self.corner_index & 2 == 0 { 1.0 } else { -1.0 };
        let (s, c) = target.yaw.sin_cos();
        // rotate (0, sign, 0) by the yaw
        [-sign * s, sign * c, 0.0]
    }
}

/// Per-frame placement: one mesh instance at each of the nearest
/// `meshes_per_frame` target vehicles.
pub fn plan_poses(mesh: &Mesh, scene: &Scene, cfg: &AttackConfig) -> Vec<(MeshPose, BBox3D)> {
    let mut vehicles = scene.vehicles();
    vehicles.sort_by(|a, b| {
        vec_norm(a.center).partial_cmp(&vec_norm(b.center)).unwrap()
    });
    let mut out = Vec::new();
    for v in vehicles.into_iter().take(cfg.meshes_per_frame) {
        let dir = cfg.direction_for(&v);
        match place(mesh, &v, cfg.corner_index, dir, cfg.distance) {
            Ok(pose) => out.push((pose, v)),
            Err(e) => eprintln!("placement skipped for a vehicle in scene {}: {e}", scene.id),
        }
    }
    out
}

/// Rasterize the rotated ground-plane footprints of the target boxes onto the
/// BEV grid: 1 where the cell center falls inside any footprint.
pub fn footprint_mask(targets: &[BBox3D], grid: &BevGrid) -> Array {
    let (nx, ny) = (grid.nx(), grid.ny());
    let mut mask = Array::zeros(&[nx, ny]);
    for b in targets {
        // bound the footprint in cell space, then test cell centers exactly
        let half_diag = 0.5 * (b.size[0] * b.size[0] + b.size[1] * b.size[1]).sqrt();
        let lo_i = grid.cell_of(b.center[0] - half_diag, b.center[1]).map(|c| c.0).unwrap_or(0);
        let hi_i = grid
            .cell_of(b.center[0] + half_diag, b.center[1])
            .map(|c| c.0 + 1)
            .unwrap_or(nx);
        let lo_j = grid.cell_of(b.center[0], b.center[1] - half_diag).map(|c| c.1).unwrap_or(0);
        let hi_j = grid
            .cell_of(b.center[0], b.center[1] + half_diag)
            .map(|c| c.1 + 1)
            .unwrap_or(ny);
        let (s, c) = b.yaw.sin_cos();
        for i in lo_i..hi_i.min(nx) {
            for j in lo_j..hi_j.min(ny) {
                let (x, y) = grid.cell_center(i, j);
                let dx = x - b.center[0];
                let dy = y - b.center[1];
                let lx = dx * c + dy * s;
                let ly = -dx * s + dy * c;
                if lx.abs() <= b.size[0] / 2.0 && ly.abs() <= b.size[1] / 2.0 {
                    mask.data[i * ny + j] = 1.0;
                }
            }
        }
    }
    mask
}

/// Flat cell indices of the footprint mask.
pub fn footprint_cells(targets: &[BBox3D], grid: &BevGrid) -> Vec<u32> {
    footprint_mask(targets, grid)
        .data
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > 0.0)
        .map(|(i, _)| i as u32)
        .collect()
}

/// Target suppression: sum of vehicle-channel heatmap responses over the
/// rasterized target footprints.
pub fn loss_cls<'t>(heat: Var<'t>, targets: &[BBox3D], grid: &BevGrid) -> Var<'t> {
    let (nx, ny) = (grid.nx(), grid.ny());
    if targets.is_empty() {
        eprintln!("loss_cls: empty target list");
        return heat.slice(&[(0, 1), (0, nx), (0, ny)]).sum().scale(0.0);
    }
    let mask = footprint_mask(targets, grid);
    let vehicle = heat.slice(&[(0, 1), (0, nx), (0, ny)]).reshape(&[nx, ny]);
    let mask_c = vehicle.constant_like(mask);
    vehicle.mul(mask_c).sum()
}

/// Mislocalization: negated L1 between the raw regression channels at the
/// footprint cells and the ground truth encoded against each cell, averaged
/// over cells. Zero when no footprint cell exists.
pub fn loss_loc<'t>(reg: Var<'t>, targets: &[BBox3D], grid: &BevGrid) -> Var<'t> {
    let cells_per_target: Vec<(usize, &BBox3D)> = targets
        .iter()
        .flat_map(|b| footprint_cells(std::slice::from_ref(b), grid).into_iter().map(move |c| (c as usize, b)))
        .collect();
    if cells_per_target.is_empty() {
        return reg.sum().scale(0.0);
    }
    let ny = grid.ny();
    let cells: Vec<u32> = cells_per_target.iter().map(|(c, _)| *c as u32).collect();
    let m = cells.len();
    let mut enc = Array::zeros(&[crate::detector::REG_CHANNELS, m]);
    for (col, (cell, b)) in cells_per_target.iter().enumerate() {
        let (i, j) = (cell / ny, cell % ny);
        let e = crate::detector::encode_box(b, grid.cell_center(i, j));
        for ch in 0..crate::detector::REG_CHANNELS {
            enc.data[ch * m + col] = e[ch];
        }
    }
    let pred = reg.gather_cells(&cells);
    let target_c = pred.constant_like(enc);
    pred.sub(target_c).abs().sum().scale(-1.0 / m as f64)
}

/// Scene confusion: cosine similarity between the adversarial BEV features
/// and the clean-scene BEV features (a detached constant).
pub fn loss_sim<'t>(bev_adv: Var<'t>, bev_raw: &Array) -> Var<'t> {
    assert_eq!(bev_adv.shape(), bev_raw.shape, "loss_sim: BEV shape mismatch");
    let raw_norm: f64 = bev_raw.data.iter().map(|v| v * v).sum::<f64>().sqrt();
    let adv_norm: f64 = bev_adv.value().data.iter().map(|v| v * v).sum::<f64>().sqrt();
    if raw_norm < 1e-12 || adv_norm < 1e-12 {
        eprintln!("loss_sim: zero-norm BEV features, contributing 0");
        return bev_adv.sum().scale(0.0);
    }
    let raw_c = bev_adv.constant_like(bev_raw.clone());
    let n = bev_adv.numel();
    let a = bev_adv.reshape(&[n]);
    let b = raw_c.reshape(&[n]);
    a.dot(b).div(a.norm2().mul(b.norm2()))
}

/// Everything fixed across attack steps: the frozen detector, the lift plan,
/// per-scene clean BEV features, and soft-raster settings.
pub struct AttackContext<'d> {
    pub detector: &'d DetectorParams,
    pub plan: Arc<LiftPlan>,
    pub soft: SoftParams,
    pub bev_raw: Vec<Array>,
}

impl<'d> AttackContext<'d> {
    /// Precompute the lift plan and the detached clean-scene BEV features.
    pub fn prepare(detector: &'d DetectorParams, scenes: &[Scene]) -> Result<Self> {
        if scenes.is_empty() {
            return Err(Error::Data("attack: empty scene set".into()));
        }
        let meta = &detector.meta;
        for s in scenes {
            if s.cameras[0].width != meta.image_width || s.cameras[0].height != meta.image_height {
                return Err(Error::Config(format!(
                    "scene {} image size {}x{} does not match detector {}x{}",
                    s.id, s.cameras[0].width, s.cameras[0].height, meta.image_width, meta.image_height
                )));
            }
        }
        let plan = Arc::new(build_lift_plan(&meta.grid, &scenes[0].cameras, meta.image_width, meta.image_height));
        let soft = SoftParams::for_image(meta.image_height, meta.image_width);
        let bev_raw: Vec<Array> = scenes
            .par_iter()
            .map(|s| {
                let tape = Tape::new();
                let pvars = ParamVars::constants(&tape, detector);
                let images: Vec<Var> = s.raw_images().iter().map(|im| tape.constant(im.clone())).collect();
                extract_bev(&tape, &images, &pvars, &meta.grid, &plan).value()
            })
            .collect();
        Ok(AttackContext { detector, plan, soft, bev_raw })
    }
}

/// Loss components of one step or scene.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct LossParts {
    pub cls: f64,
    pub loc: f64,
    pub sim: f64,
    pub total: f64,
}

impl LossParts {
    fn zero() -> Self {
        LossParts { cls: 0.0, loc: 0.0, sim: 0.0, total: 0.0 }
    }
}

/// One scene's forward pass + backward: returns the loss parts and the
/// gradients for (vertices, texture).
#[allow(clippy::too_many_arguments)]
fn scene_attack_grads(
    ctx: &AttackContext,
    scene_index: usize,
    scene: &Scene,
    mesh: &Mesh,
    cfg: &AttackConfig,
    seg: &(dyn SegmentationProvider + Sync),
) -> Result<Option<(LossParts, Array, Array)>> {
    let placements = plan_poses(mesh, scene, cfg);
    if placements.is_empty() {
        return Ok(None);
    }
    let poses: Vec<MeshPose> = placements.iter().map(|(p, _)| *p).collect();
    let targets: Vec<BBox3D> = placements.iter().map(|(_, b)| *b).collect();

    let tape = Tape::new();
    let n = mesh.vertex_count();
    let verts = tape.leaf(Array::from_vec(&[n, 3], mesh.vertices_flat()));
    let tex = tape.leaf(Array::from_vec(&[n, 3], mesh.texture_flat()));
    let pvars = ParamVars::constants(&tape, ctx.detector);
    let objects = scene.boxes();

    let mut views: Vec<Var> = Vec::with_capacity(scene.cameras.len());
    for (ci, cam) in scene.cameras.iter().enumerate() {
        let render = rasterize_soft_vars(&tape, verts, tex, &mesh.faces, &poses, cam, ctx.soft);
        let raw = &scene.raw_images()[ci];
        let render = if cfg.real_occ {
            apply_occlusion(&tape, render, mesh, &poses, &objects, raw, cam, seg, scene.id, ci)?
        } else {
            render
        };
        views.push(composite(&tape, &render, raw));
    }
    let grid = &ctx.detector.meta.grid;
    let bev = extract_bev(&tape, &views, &pvars, grid, &ctx.plan);
    let (heat, reg) = heads(bev, &pvars);

    let l_cls = loss_cls(heat, &targets, grid);
    let l_loc = loss_loc(reg, &targets, grid);
    let l_sim = loss_sim(bev, &ctx.bev_raw[scene_index]);
    let total = l_cls.add(l_loc.scale(cfg.alpha)).add(l_sim.scale(cfg.beta));
    let parts = LossParts { cls: l_cls.item(), loc: l_loc.item(), sim: l_sim.item(), total: total.item() };
    if !parts.total.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite attack loss in scene {}: cls={} loc={} sim={}",
            scene.id, parts.cls, parts.loc, parts.sim
        )));
    }
    tape.backward(total);
    let gv = verts.grad().unwrap_or_else(|| Array::zeros(&[n, 3]));
    let gt = tex.grad().unwrap_or_else(|| Array::zeros(&[n, 3]));
    Ok(Some((parts, gv, gt)))
}

/// One optimizer step over a batch of scenes: gradient accumulation, Adam
/// update on vertices and texture, then the displacement/texture clamp.
#[allow(clippy::too_many_arguments)]
pub fn attack_step(
    ctx: &AttackContext,
    scene_indices: &[usize],
    scenes: &[Scene],
    mesh: &mut Mesh,
    adam: &mut Adam,
    cfg: &AttackConfig,
    seg: &(dyn SegmentationProvider + Sync),
) -> Result<LossParts> {
    let results: Vec<Option<(LossParts, Array, Array)>> = scene_indices
        .par_iter()
        .map(|&si| scene_attack_grads(ctx, si, &scenes[si], mesh, cfg, seg))
        .collect::<Result<_>>()?;

    let n = mesh.vertex_count();
    let mut gv = Array::zeros(&[n, 3]);
    let mut gt = Array::zeros(&[n, 3]);
    let mut parts = LossParts::zero();
    let mut contributing = 0usize;
    for r in results.into_iter().flatten() {
        let (p, v, t) = r;
        parts.cls += p.cls;
        parts.loc += p.loc;
        parts.sim += p.sim;
        parts.total += p.total;
        for (a, b) in gv.data.iter_mut().zip(v.data.iter()) {
            *a += b;
        }
        for (a, b) in gt.data.iter_mut().zip(t.data.iter()) {
            *a += b;
        }
        contributing += 1;
    }
    if contributing == 0 {
        return Ok(LossParts::zero());
    }
    let scale = 1.0 / contributing as f64;
    for v in gv.data.iter_mut() {
        *v *= scale;
    }
    for v in gt.data.iter_mut() {
        *v *= scale;
    }
    parts.cls *= scale;
    parts.loc *= scale;
    parts.sim *= scale;
    parts.total *= scale;

    if !gv.is_finite() || !gt.is_finite() {
        let gv_norm: f64 = gv.data.iter().map(|v| v * v).sum::<f64>().sqrt();
        let gt_norm: f64 = gt.data.iter().map(|v| v * v).sum::<f64>().sqrt();
        return Err(Error::Numeric(format!(
            "non-finite attack gradients: |dV|={gv_norm} |dT|={gt_norm} (loss {parts:?})"
        )));
    }

    let mut params = vec![
        Array::from_vec(&[n, 3], mesh.vertices_flat()),
        Array::from_vec(&[n, 3], mesh.texture_flat()),
    ];
    adam.step(&mut params, &[gv, gt]);
    mesh.set_vertices_flat(&params[0].data);
    mesh.set_texture_flat(&params[1].data);
    clamp_displacement(mesh, cfg.displacement_cap);
    debug_assert!(mesh
        .vertices
        .iter()
        .zip(mesh.base_vertices.iter())
        .all(|(v, b)| (0..3).all(|k| (v[k] - b[k]).abs() <= cfg.displacement_cap + 1e-12)));
    Ok(parts)
}

/// Per-epoch mean loss parts.
pub type LossCurve = Vec<LossParts>;

pub struct AttackResult {
    pub mesh: Mesh,
    pub curve: LossCurve,
    /// Mesh checkpoint after each epoch.
    pub checkpoints: Vec<Mesh>,
}

/// Optimize one universal mesh (shared vertices and texture) across all
/// scenes; the pose is recomputed per frame from that frame's targets.
pub fn run_attack(
    scenes: &[Scene],
    detector: &DetectorParams,
    cfg: &AttackConfig,
    seg: &(dyn SegmentationProvider + Sync),
) -> Result<AttackResult> {
    cfg.validate()?;
    let ctx = AttackContext::prepare(detector, scenes)?;
    let mut mesh = init_primitive(cfg.shape);
    let mut adam = Adam::new(cfg.lr);
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut checkpoints = Vec::with_capacity(cfg.epochs);
    let order: Vec<usize> = (0..scenes.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut acc = LossParts::zero();
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let parts = attack_step(&ctx, chunk, scenes, &mut mesh, &mut adam, cfg, seg)?;
            acc.cls += parts.cls;
            acc.loc += parts.loc;
            acc.sim += parts.sim;
            acc.total += parts.total;
            batches += 1;
        }
        let scale = 1.0 / batches.max(1) as f64;
        let epoch_parts = LossParts {
            cls: acc.cls * scale,
            loc: acc.loc * scale,
            sim: acc.sim * scale,
            total: acc.total * scale,
        };
        eprintln!(
            "attack epoch {}/{}: total {:.4} (cls {:.4}, loc {:.4}, sim {:.4})",
            epoch + 1,
            cfg.epochs,
            epoch_parts.total,
            epoch_parts.cls,
            epoch_parts.loc,
            epoch_parts.sim
        );
        curve.push(epoch_parts);
        checkpoints.push(mesh.clone());
    }
    Ok(AttackResult { mesh, curve, checkpoints })
}

/// Forward the full adversarial pipeline for one scene with a fixed mesh
/// (no gradients): returns the decoded detector maps.
pub fn forward_with_mesh(
    ctx: &AttackContext,
    scene: &Scene,
    mesh: &Mesh,
    poses: &[MeshPose],
    cfg: &AttackConfig,
    seg: &(dyn SegmentationProvider + Sync),
) -> Result<(Array, Array)> {
    let tape = Tape::new();
    let n = mesh.vertex_count();
    let verts = tape.constant(Array::from_vec(&[n, 3], mesh.vertices_flat()));
    let tex = tape.constant(Array::from_vec(&[n, 3], mesh.texture_flat()));
    let pvars = ParamVars::constants(&tape, ctx.detector);
    let objects = scene.boxes();
    let mut views: Vec<Var> = Vec::with_capacity(scene.cameras.len());
    for (ci, cam) in scene.cameras.iter().enumerate() {
        let render: RenderOutput =
            rasterize_soft_vars(&tape, verts, tex, &mesh.faces, poses, cam, ctx.soft);
        let raw = &scene.raw_images()[ci];
        let render = if cfg.real_occ {
            apply_occlusion(&tape, render, mesh, poses, &objects, raw, cam, seg, scene.id, ci)?
        } else {
            render
        };
        views.push(composite(&tape, &render, raw));
    }
    let bev = extract_bev(&tape, &views, &pvars, &ctx.detector.meta.grid, &ctx.plan);
    let (heat, reg) = heads(bev, &pvars);
    Ok((heat.value(), reg.value()))
}

/// Default segmentation provider for attack runs.
pub fn default_seg_provider() -> BoxFillProvider {
    BoxFillProvider
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{DetectorMeta, TrainOptions};
    use crate::scene::{generate_scene, SceneConfig};

    fn tiny_setup() -> (Vec<Scene>, DetectorParams) {
        let cfg = SceneConfig { image_width: 64, image_height: 32, n_vehicles: 3, n_other: 2, ..Default::default() };
        let scenes: Vec<Scene> = (0..3).map(|s| generate_scene(&cfg, 40 + s).unwrap()).collect();
        let grid = BevGrid { channels: 8, ..Default::default() };
        let meta = DetectorMeta { grid, image_width: 64, image_height: 32 };
        let mut det = DetectorParams::init(meta, 2).unwrap();
        let opts = TrainOptions { epochs: 2, lr: 3e-3, batch_size: 3, seed: 0 };
        crate::detector::train_detector(&scenes, &mut det, &opts).unwrap();
        (scenes, det)
    }

    #[test]
    fn footprint_mask_counts_cells() {
        let grid = BevGrid::default();
        // axis-aligned 3x2 box at the origin covers exactly 6x4 half-meter cells
        let b = BBox3D::new([0.0, 0.0, 0.75], [3.0, 2.0, 1.5], 0.0, crate::geometry::Category::Vehicle);
        let mask = footprint_mask(&[b], &grid);
        let count = mask.data.iter().filter(|&&v| v > 0.0).count();
        assert_eq!(count, 24, "expected 6x4 cells");
    }

    #[test]
    fn loss_cls_examples() {
        let grid = BevGrid::default();
        let b = BBox3D::new([0.0, 0.0, 0.75], [3.0, 2.0, 1.5], 0.0, crate::geometry::Category::Vehicle);
        let tape = Tape::new();
        let (nx, ny) = (grid.nx(), grid.ny());
        // heatmap of all zeros -> 0
        let heat0 = tape.leaf(Array::zeros(&[3, nx, ny]));
        assert_eq!(loss_cls(heat0, &[b], &grid).item(), 0.0);
        // all ones -> footprint cell count
        let heat1 = tape.leaf(Array::full(&[3, nx, ny], 1.0));
        assert_eq!(loss_cls(heat1, &[b], &grid).item(), 24.0);
        // doubling the heatmap doubles the loss
        let heat2 = tape.leaf(Array::full(&[3, nx, ny], 0.25));
        let heat4 = tape.leaf(Array::full(&[3, nx, ny], 0.5));
        let l2 = loss_cls(heat2, &[b], &grid).item();
        let l4 = loss_cls(heat4, &[b], &grid).item();
        assert!((l4 - 2.0 * l2).abs() < 1e-9);
        // empty target list -> 0
        let l_empty = loss_cls(heat1, &[], &grid);
        assert_eq!(l_empty.item(), 0.0);
    }

    #[test]
    fn loss_loc_examples() {
        let grid = BevGrid::default();
        let b = BBox3D::new([0.25, 0.25, 0.75], [0.4, 0.4, 1.5], 0.0, crate::geometry::Category::Vehicle);
        // footprint covers exactly the single cell containing (0.25, 0.25)
        let cells = footprint_cells(&[b], &grid);
        assert_eq!(cells.len(), 1);
        let tape = Tape::new();
        let (nx, ny) = (grid.nx(), grid.ny());
        let cell = cells[0] as usize;
        let (ci, cj) = (cell / ny, cell % ny);
        let enc = crate::detector::encode_box(&b, grid.cell_center(ci, cj));

        // prediction equal to the ground truth -> 0
        let mut reg = Array::zeros(&[8, nx, ny]);
        for ch in 0..8 {
            reg.data[ch * nx * ny + cell] = enc[ch];
        }
        let r = tape.leaf(reg.clone());
        assert!(loss_loc(r, &[b], &grid).item().abs() < 1e-12);

        // +1 m in x only -> -1.0
        let mut reg1 = reg.clone();
        reg1.data[cell] += 1.0;
        let r1 = tape.leaf(reg1);
        assert!((loss_loc(r1, &[b], &grid).item() + 1.0).abs() < 1e-12);

        // no prediction in the region (empty targets) -> 0
        let r2 = tape.leaf(reg);
        assert_eq!(loss_loc(r2, &[], &grid).item(), 0.0);
    }

    #[test]
    fn loss_loc_mean_of_two_predictions() {
        // two single-cell targets with offsets 1 and 3 -> -2.0
        let grid = BevGrid::default();
        let (nx, ny) = (grid.nx(), grid.ny());
        let a = BBox3D::new([0.25, 0.25, 0.75], [0.4, 0.4, 1.5], 0.0, crate::geometry::Category::Vehicle);
        let b = BBox3D::new([5.25, 5.25, 0.75], [0.4, 0.4, 1.5], 0.0, crate::geometry::Category::Vehicle);
        let mut reg = Array::zeros(&[8, nx, ny]);
        for (t, off) in [(&a, 1.0), (&b, 3.0)] {
            let cell = footprint_cells(std::slice::from_ref(t), &grid)[0] as usize;
            let (ci, cj) = (cell / ny, cell % ny);
            let enc = crate::detector::encode_box(t, grid.cell_center(ci, cj));
            for ch in 0..8 {
                reg.data[ch * nx * ny + cell] = enc[ch];
            }
            reg.data[cell] += off; // x offset
        }
        let tape = Tape::new();
        let r = tape.leaf(reg);
        let l = loss_loc(r, &[a, b], &grid).item();
        assert!((l + 2.0).abs() < 1e-12, "{l}");
    }

    #[test]
    fn loss_sim_identities() {
        let tape = Tape::new();
        let a = Array::from_vec(&[2, 2, 2], vec![1.0, 2.0, -1.0, 0.5, 0.3, -0.7, 0.9, 0.1]);
        let v = tape.leaf(a.clone());
        assert!((loss_sim(v, &a).item() - 1.0).abs() < 1e-12);

        let orth_a = Array::from_vec(&[1, 1, 2], vec![1.0, 0.0]);
        let orth_b = Array::from_vec(&[1, 1, 2], vec![0.0, 1.0]);
        let v2 = tape.leaf(orth_a.clone());
        assert!(loss_sim(v2, &orth_b).item().abs() < 1e-12);

        let neg = Array::from_vec(&[1, 1, 2], vec![-1.0, -0.0]);
        let v3 = tape.leaf(orth_a);
        assert!((loss_sim(v3, &neg).item() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn weight_linearity_and_lr_zero_noop() {
        let (scenes, det) = tiny_setup();
        let ctx = AttackContext::prepare(&det, &scenes).unwrap();
        let cfg = AttackConfig { lr: 1e-9, epochs: 1, batch_size: 1, ..Default::default() };
        let seg = BoxFillProvider;
        let mesh = init_primitive(cfg.shape);

        // component linearity: total == cls + alpha*loc + beta*sim
        let r = scene_attack_grads(&ctx, 0, &scenes[0], &mesh, &cfg, &seg).unwrap().unwrap();
        let p = r.0;
        assert!((p.total - (p.cls + cfg.alpha * p.loc + cfg.beta * p.sim)).abs() < 1e-12);

        // lr = 0 leaves the mesh bit-identical
        let mut adam = Adam::new(f64::MIN_POSITIVE);
        let mut m0 = init_primitive(cfg.shape);
        let before = m0.clone();
        let cfg0 = AttackConfig { lr: f64::MIN_POSITIVE, ..cfg.clone() };
        attack_step(&ctx, &[0], &scenes, &mut m0, &mut adam, &cfg0, &seg).unwrap();
        // the step size is denormal-tiny; displacement must be zero after clamp
        for (v, b) in m0.vertices.iter().zip(before.vertices.iter()) {
            for k in 0..3 {
                assert!((v[k] - b[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradients_flow_to_vertices_and_texture() {
        let (scenes, det) = tiny_setup();
        let ctx = AttackContext::prepare(&det, &scenes).unwrap();
        let cfg = AttackConfig::default();
        let seg = BoxFillProvider;
        let mesh = init_primitive(cfg.shape);
        let (_, gv, gt) = scene_attack_grads(&ctx, 0, &scenes[0], &mesh, &cfg, &seg)
            .unwrap()
            .expect("scene has vehicles");
        let gv_norm: f64 = gv.data.iter().map(|v| v * v).sum::<f64>().sqrt();
        let gt_norm: f64 = gt.data.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(gv_norm > 0.0, "vertex gradient is zero");
        assert!(gt_norm > 0.0, "texture gradient is zero");
    }

    #[test]
    fn single_scene_single_epoch_equals_one_step() {
        let (scenes, det) = tiny_setup();
        let cfg = AttackConfig { epochs: 1, batch_size: 1, ..Default::default() };
        let seg = BoxFillProvider;
        let one = run_attack(&scenes[..1], &det, &cfg, &seg).unwrap();
        assert_eq!(one.curve.len(), 1);

        let ctx = AttackContext::prepare(&det, &scenes[..1]).unwrap();
        let mut mesh = init_primitive(cfg.shape);
        let mut adam = Adam::new(cfg.lr);
        let parts = attack_step(&ctx, &[0], &scenes[..1], &mut mesh, &mut adam, &cfg, &seg).unwrap();
        assert!((one.curve[0].total - parts.total).abs() < 1e-12);
        assert_eq!(one.mesh, mesh);
    }

    #[test]
    fn attack_is_deterministic() {
        let (scenes, det) = tiny_setup();
        let cfg = AttackConfig { epochs: 2, batch_size: 2, ..Default::default() };
        let seg = BoxFillProvider;
        let a = run_attack(&scenes, &det, &cfg, &seg).unwrap();
        let b = run_attack(&scenes, &det, &cfg, &seg).unwrap();
        assert_eq!(a.mesh, b.mesh);
        for (x, y) in a.curve.iter().zip(b.curve.iter()) {
            assert_eq!(x.total, y.total);
        }
    }
}
