//! Attack metrics: greedy detection matching, attack success rate over IoU
//! thresholds, per-category average precision, and the distance / placement
//! sweep harnesses.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{forward_with_mesh, plan_poses, AttackConfig, AttackContext};
use crate::detector::{decode, DetectorParams, Detection};
use crate::error::{Error, Result};
use crate::geometry::{iou_bev, BBox3D, Category};
use crate::mesh::{max_extent, Mesh, MeshPose};
use crate::occlusion::SegmentationProvider;
use crate::scene::Scene;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// IoU thresholds for ASR, strictest last.
    pub thresholds: Vec<f64>,
    pub score_threshold: f64,
    pub nms_radius: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { thresholds: vec![0.2, 0.3, 0.5, 0.7], score_threshold: 0.3, nms_radius: 2.0, seed: 0 }
    }
}

/// Greedy matching by descending score; each ground truth is matched at most
/// once; detection category is ignored. Returns the matched count.
pub fn match_detections(dets: &[Detection], gts: &[BBox3D], iou_thresh: f64) -> usize {
    assert!(iou_thresh > 0.0 && iou_thresh < 1.0, "iou threshold must be in (0,1)");
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap().then(a.cmp(&b)));
    let mut taken = vec![false; gts.len()];
    let mut matched = 0usize;
    for di in order {
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if taken[gi] {
                continue;
            }
            let iou = iou_bev(&dets[di].bbox, gt);
            if iou >= iou_thresh && best.map(|(_, b)| iou > b).unwrap_or(true) {
                best = Some((gi, iou));
            }
        }
        if let Some((gi, _)) = best {
            taken[gi] = true;
            matched += 1;
        }
    }
    matched
}

/// Area under the precision-recall curve (all-points interpolation) for one
/// category over a set of scenes.
pub fn average_precision(
    dets_per_scene: &[Vec<Detection>],
    gts_per_scene: &[Vec<BBox3D>],
    category: Category,
    iou_thresh: f64,
) -> f64 {
    let n_gt: usize = gts_per_scene
        .iter()
        .map(|g| g.iter().filter(|b| b.category == category).count())
        .sum();
    if n_gt == 0 {
        return 0.0;
    }
    // (score, scene, det index), globally ranked
    let mut ranked: Vec<(f64, usize, usize)> = Vec::new();
    for (si, dets) in dets_per_scene.iter().enumerate() {
        for (di, d) in dets.iter().enumerate() {
            if d.bbox.category == category {
                ranked.push((d.score, si, di));
            }
        }
    }
    ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then((a.1, a.2).cmp(&(b.1, b.2))));

    let mut taken: Vec<Vec<bool>> = gts_per_scene
        .iter()
        .map(|g| vec![false; g.len()])
        .collect();
    let mut tp = Vec::with_capacity(ranked.len());
    for &(_, si, di) in &ranked {
        let det = &dets_per_scene[si][di];
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts_per_scene[si].iter().enumerate() {
            if gt.category != category || taken[si][gi] {
                continue;
            }
            let iou = iou_bev(&det.bbox, gt);
            if iou >= iou_thresh && best.map(|(_, b)| iou > b).unwrap_or(true) {
                best = Some((gi, iou));
            }
        }
        if let Some((gi, _)) = best {
            taken[si][gi] = true;
            tp.push(1.0);
        } else {
            tp.push(0.0);
        }
    }
    // precision envelope over recall
    let mut cum_tp = 0.0;
    let mut precisions = Vec::with_capacity(tp.len());
    let mut recalls = Vec::with_capacity(tp.len());
    for (i, t) in tp.iter().enumerate() {
        cum_tp += t;
        precisions.push(cum_tp / (i + 1) as f64);
        recalls.push(cum_tp / n_gt as f64);
    }
    for i in (0..precisions.len().saturating_sub(1)).rev() {
        if precisions[i] < precisions[i + 1] {
            precisions[i] = precisions[i + 1];
        }
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for i in 0..recalls.len() {
        if recalls[i] > prev_r {
            ap += (recalls[i] - prev_r) * precisions[i];
            prev_r = recalls[i];
        }
    }
    ap
}

/// One evaluated mesh variant: detections per scene.
pub fn detect_with_mesh(
    ctx: &AttackContext,
    scenes: &[Scene],
    mesh: &Mesh,
    poses_per_scene: &[Vec<MeshPose>],
    attack_cfg: &AttackConfig,
    eval_cfg: &EvalConfig,
    seg: &(dyn SegmentationProvider + Sync),
) -> Result<Vec<Vec<Detection>>> {
    scenes
        .par_iter()
        .zip(poses_per_scene.par_iter())
        .map(|(scene, poses)| {
            if poses.is_empty() {
                let (heat, reg) = crate::detector::detect_maps(ctx.detector, scene.raw_images(), &scene.cameras);
                return Ok(decode(&heat, &reg, &ctx.detector.meta.grid, eval_cfg.score_threshold, eval_cfg.nms_radius));
            }
            let (heat, reg) = forward_with_mesh(ctx, scene, mesh, poses, attack_cfg, seg)?;
            Ok(decode(&heat, &reg, &ctx.detector.meta.grid, eval_cfg.score_threshold, eval_cfg.nms_radius))
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub thresholds: Vec<f64>,
    /// 1 - N_adv/N_init per threshold; `None` when N_init == 0 (undefined).
    pub asr: Vec<Option<f64>>,
    pub n_init: Vec<usize>,
    pub n_adv: Vec<usize>,
    /// Vehicle AP at IoU 0.3 and 0.5, with the initialized / adversarial mesh.
    pub ap_vehicle_init: [f64; 2],
    pub ap_vehicle_adv: [f64; 2],
    /// Per-category AP at IoU 0.3 (vehicle, pedestrian, barrier).
    pub ap_category_init: [f64; 3],
    pub ap_category_adv: [f64; 3],
    pub config_echo: String,
}

impl EvalReport {
    pub fn csv_header() -> &'static str {
        "config,threshold,asr,ap_vehicle_03,ap_vehicle_05,n_init,n_adv"
    }

    /// One CSV row per threshold, deterministic order and formatting.
    pub fn csv_rows(&self, label: &str) -> Vec<String> {
        self.thresholds
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let asr = match self.asr[i] {
                    Some(v) => format!("{v:.6}"),
                    None => "undefined".to_string(),
                };
                format!(
                    "{label},{t:.2},{asr},{:.6},{:.6},{},{}",
                    self.ap_vehicle_adv[0], self.ap_vehicle_adv[1], self.n_init[i], self.n_adv[i]
                )
            })
            .collect()
    }
}

/// Run the detector over the scene set with the initialized and the
/// adversarial mesh placed identically (poses computed from the initialized
/// mesh), then aggregate ASR and AP.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    scenes: &[Scene],
    detector: &DetectorParams,
    mesh_init: &Mesh,
    mesh_adv: &Mesh,
    attack_cfg: &AttackConfig,
    eval_cfg: &EvalConfig,
    seg: &(dyn SegmentationProvider + Sync),
) -> Result<EvalReport> {
    let ctx = AttackContext::prepare(detector, scenes)?;
    let poses_per_scene: Vec<Vec<MeshPose>> = scenes
        .iter()
        .map(|s| plan_poses(mesh_init, s, attack_cfg).into_iter().map(|(p, _)| p).collect())
        .collect();
    evaluate_with_poses(&ctx, scenes, mesh_init, mesh_adv, &poses_per_scene, attack_cfg, eval_cfg, seg)
}

#[allow(clippy::too_many_arguments)]
pub fn evaluate_with_poses(
    ctx: &AttackContext,
    scenes: &[Scene],
    mesh_init: &Mesh,
    mesh_adv: &Mesh,
    poses_per_scene: &[Vec<MeshPose>],
    attack_cfg: &AttackConfig,
    eval_cfg: &EvalConfig,
    seg: &(dyn SegmentationProvider + Sync),
) -> Result<EvalReport> {
    let dets_init = detect_with_mesh(ctx, scenes, mesh_init, poses_per_scene, attack_cfg, eval_cfg, seg)?;
    let dets_adv = detect_with_mesh(ctx, scenes, mesh_adv, poses_per_scene, attack_cfg, eval_cfg, seg)?;
    let gts: Vec<Vec<BBox3D>> = scenes.iter().map(|s| s.boxes()).collect();
    let vehicle_gts: Vec<Vec<BBox3D>> = scenes.iter().map(|s| s.vehicles()).collect();

    let mut asr = Vec::new();
    let mut n_init_v = Vec::new();
    let mut n_adv_v = Vec::new();
    for &t in &eval_cfg.thresholds {
        let n_init: usize = dets_init
            .iter()
            .zip(vehicle_gts.iter())
            .map(|(d, g)| match_detections(d, g, t))
            .sum();
        let n_adv: usize = dets_adv
            .iter()
            .zip(vehicle_gts.iter())
            .map(|(d, g)| match_detections(d, g, t))
            .sum();
        asr.push(if n_init == 0 { None } else { Some(1.0 - n_adv as f64 / n_init as f64) });
        n_init_v.push(n_init);
        n_adv_v.push(n_adv);
    }
    // matched counts must shrink as the threshold tightens
    let mut sorted = eval_cfg.thresholds.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if sorted == eval_cfg.thresholds {
        for i in 1..n_init_v.len() {
            assert!(n_init_v[i] <= n_init_v[i - 1], "N_init not monotone in the IoU threshold");
            assert!(n_adv_v[i] <= n_adv_v[i - 1], "N_adv not monotone in the IoU threshold");
        }
    }

    let ap_v = |dets: &[Vec<Detection>], t: f64| average_precision(dets, &gts, Category::Vehicle, t);
    let ap_c = |dets: &[Vec<Detection>], cat: Category| average_precision(dets, &gts, cat, 0.3);
    Ok(EvalReport {
        thresholds: eval_cfg.thresholds.clone(),
        asr,
        n_init: n_init_v,
        n_adv: n_adv_v,
        ap_vehicle_init: [ap_v(&dets_init, 0.3), ap_v(&dets_init, 0.5)],
        ap_vehicle_adv: [ap_v(&dets_adv, 0.3), ap_v(&dets_adv, 0.5)],
        ap_category_init: [
            ap_c(&dets_init, Category::Vehicle),
            ap_c(&dets_init, Category::Pedestrian),
            ap_c(&dets_init, Category::Barrier),
        ],
        ap_category_adv: [
            ap_c(&dets_adv, Category::Vehicle),
            ap_c(&dets_adv, Category::Pedestrian),
            ap_c(&dets_adv, Category::Barrier),
        ],
        config_echo: format!("{attack_cfg:?}"),
    })
}

/// Distance sweep: the trained mesh placed at each test gap.
#[allow(clippy::too_many_arguments)]
pub fn sweep_distance(
    scenes: &[Scene],
    detector: &DetectorParams,
    mesh_init: &Mesh,
    mesh_adv: &Mesh,
    distances: &[f64],
    attack_cfg: &AttackConfig,
    eval_cfg: &EvalConfig,
    seg: &(dyn SegmentationProvider + Sync),
) -> Result<Vec<(f64, EvalReport)>> {
    let mut rows = Vec::with_capacity(distances.len());
    for &d in distances {
        let cfg = AttackConfig { distance: d, ..attack_cfg.clone() };
        let report = evaluate(scenes, detector, mesh_init, mesh_adv, &cfg, eval_cfg, seg)?;
        rows.push((d, report));
    }
    Ok(rows)
}

/// Uniform random standing placement in the BEV range, rejecting positions
/// whose mesh vertices would enter any annotated box.
pub fn random_poses(
    mesh: &Mesh,
    scene: &Scene,
    grid_range: f64,
    count: usize,
    rng: &mut ChaCha20Rng,
) -> Result<Vec<MeshPose>> {
    let z_center = max_extent(mesh, [0.0, 0.0, -1.0]);
    let boxes = scene.boxes();
    let mut poses = Vec::with_capacity(count);
    for _ in 0..count {
        let mut placed = false;
        for _try in 0..1000 {
            let x = rng.gen_range(-grid_range..grid_range);
            let y = rng.gen_range(-grid_range..grid_range);
            let pose = MeshPose { center: [x, y, z_center] };
            let collides = boxes.iter().any(|b| {
                mesh.vertices.iter().any(|v| b.contains(crate::geometry::vec_add(*v, pose.center)))
            });
            if !collides {
                poses.push(pose);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Data(format!(
                "random placement rejection overflow in scene {}",
                scene.id
            )));
        }
    }
    Ok(poses)
}

/// Placement-generalization sweep: k randomly placed copies of the trained
/// mesh per scene, for each k in `counts`.
#[allow(clippy::too_many_arguments)]
pub fn sweep_placement(
    scenes: &[Scene],
    detector: &DetectorParams,
    mesh_init: &Mesh,
    mesh_adv: &Mesh,
    counts: &[usize],
    attack_cfg: &AttackConfig,
    eval_cfg: &EvalConfig,
    seg: &(dyn SegmentationProvider + Sync),
) -> Result<Vec<(usize, EvalReport)>> {
    let ctx = AttackContext::prepare(detector, scenes)?;
    let grid_range = detector.meta.grid.x_max.min(detector.meta.grid.y_max) - 1.0;
    let mut rows = Vec::with_capacity(counts.len());
    for &k in counts {
        assert!(k >= 1, "placement counts must be >= 1");
        let mut poses_per_scene = Vec::with_capacity(scenes.len());
        for scene in scenes {
            let mut rng = ChaCha20Rng::seed_from_u64(
                eval_cfg.seed ^ (scene.id.wrapping_mul(0x9e3779b97f4a7c15)) ^ (k as u64) << 32,
            );
            poses_per_scene.push(random_poses(mesh_init, scene, grid_range, k, &mut rng)?);
        }
        let report = evaluate_with_poses(
            &ctx,
            scenes,
            mesh_init,
            mesh_adv,
            &poses_per_scene,
            attack_cfg,
            eval_cfg,
            seg,
        )?;
        rows.push((k, report));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::Detection;

    fn det(center: [f64; 3], score: f64, cat: Category) -> Detection {
        Detection { bbox: BBox3D::new(center, [4.0, 2.0, 1.5], 0.0, cat), score }
    }

    fn gt(center: [f64; 3], cat: Category) -> BBox3D {
        BBox3D::new(center, [4.0, 2.0, 1.5], 0.0, cat)
    }

    #[test]
    fn matching_basics() {
        let gts = vec![gt([0.0, 0.0, 0.0], Category::Vehicle), gt([10.0, 0.0, 0.0], Category::Vehicle)];
        let dets: Vec<Detection> = gts
            .iter()
            .map(|g| Detection { bbox: *g, score: 1.0 })
            .collect();
        assert_eq!(match_detections(&dets, &gts, 0.5), 2);
        assert_eq!(match_detections(&[], &gts, 0.5), 0);
        // two detections on one gt: one match only
        let two = vec![det([0.0, 0.0, 0.0], 0.9, Category::Vehicle), det([0.1, 0.0, 0.0], 0.8, Category::Vehicle)];
        let one_gt = vec![gts[0]];
        assert_eq!(match_detections(&two, &one_gt, 0.5), 1);
        // category is ignored
        let wrong_cat = vec![det([0.0, 0.0, 0.0], 0.9, Category::Barrier)];
        assert_eq!(match_detections(&wrong_cat, &one_gt, 0.5), 1);
    }

    #[test]
    fn matching_invariant_to_gt_order() {
        let gts = vec![
            gt([0.0, 0.0, 0.0], Category::Vehicle),
            gt([2.0, 1.0, 0.0], Category::Vehicle),
            gt([12.0, -3.0, 0.0], Category::Vehicle),
        ];
        let dets = vec![
            det([0.3, 0.1, 0.0], 0.9, Category::Vehicle),
            det([2.2, 0.8, 0.0], 0.7, Category::Vehicle),
            det([11.0, -3.0, 0.0], 0.8, Category::Vehicle),
        ];
        let a = match_detections(&dets, &gts, 0.2);
        let mut rev = gts.clone();
        rev.reverse();
        let b = match_detections(&dets, &rev, 0.2);
        assert_eq!(a, b);
    }

    #[test]
    fn asr_formula_and_sign() {
        // N_init=10, N_adv=4 -> 0.6; N_adv > N_init -> negative, reported as-is
        let asr = |n_init: usize, n_adv: usize| 1.0 - n_adv as f64 / n_init as f64;
        assert!((asr(10, 4) - 0.6).abs() < 1e-12);
        assert!(asr(10, 12) < 0.0);
    }

    #[test]
    fn average_precision_cases() {
        let gts = vec![vec![gt([0.0, 0.0, 0.0], Category::Vehicle)]];
        // perfect detection
        let perfect = vec![vec![Detection { bbox: gts[0][0], score: 0.9 }]];
        assert!((average_precision(&perfect, &gts, Category::Vehicle, 0.5) - 1.0).abs() < 1e-12);
        // no detections
        let none: Vec<Vec<Detection>> = vec![vec![]];
        assert_eq!(average_precision(&none, &gts, Category::Vehicle, 0.5), 0.0);
        // one TP then one FP: recall saturates at the TP, AP stays 1
        let tp_fp = vec![vec![
            Detection { bbox: gts[0][0], score: 0.9 },
            det([30.0, 0.0, 0.0], 0.5, Category::Vehicle),
        ]];
        assert!((average_precision(&tp_fp, &gts, Category::Vehicle, 0.5) - 1.0).abs() < 1e-12);
        // FP ranked above the TP: precision at recall 1 is 1/2
        let fp_tp = vec![vec![
            det([30.0, 0.0, 0.0], 0.9, Category::Vehicle),
            Detection { bbox: gts[0][0], score: 0.5 },
        ]];
        assert!((average_precision(&fp_tp, &gts, Category::Vehicle, 0.5) - 0.5).abs() < 1e-12);
    }
}
