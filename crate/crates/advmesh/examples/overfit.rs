use advmesh::detector::*;
use advmesh::eval::average_precision;
use advmesh::geometry::Category;
use advmesh::scene::{generate_scene, Scene, SceneConfig};

fn main() {
    let cfg = SceneConfig { image_width: 176, image_height: 64, ..Default::default() };
    let scenes: Vec<Scene> = (0..20).map(|s| generate_scene(&cfg, 500 + s as u64).unwrap()).collect();
    for s in &scenes { s.raw_images(); }
    let grid = BevGrid { channels: 8, ..Default::default() };
    let meta = DetectorMeta { grid, image_width: 176, image_height: 64 };
    let mut params = DetectorParams::init(meta, 0).unwrap();
    for round in 0..40 {
        let lr: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2e-3);
        let bs: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(8);
        let opts = TrainOptions { epochs: 5, lr, batch_size: bs, seed: round };
        let rep = train_detector(&scenes, &mut params, &opts).unwrap();
        let (heat, _) = detect_maps(&params, scenes[0].raw_images(), &scenes[0].cameras);
        let hmax = heat.data.iter().take(6400).cloned().fold(0.0f64, f64::max);
        // heat at the gt vehicle cells of scene 0 vs a high background quantile
        let tg = build_targets(&scenes[0].boxes(), &params.meta.grid);
        let gt_heats: Vec<f64> = tg.pos_cells.iter().zip(scenes[0].boxes().iter())
            .filter(|(_, b)| b.category == Category::Vehicle)
            .map(|(c, _)| heat.data[*c as usize]).collect();
        let mut sorted: Vec<f64> = heat.data[..6400].to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let q999 = sorted[(6400.0 * 0.999) as usize];
        eprintln!("  gt-cell heats: {:?} | veh q99.9 {:.3}", gt_heats.iter().map(|v| (v*1000.0).round()/1000.0).collect::<Vec<_>>(), q999);
        let dets: Vec<Vec<Detection>> = scenes.iter().map(|s| {
            let (h, r) = detect_maps(&params, s.raw_images(), &s.cameras);
            decode(&h, &r, &params.meta.grid, 0.3, 2.0)
        }).collect();
        let gts: Vec<Vec<_>> = scenes.iter().map(|s| s.boxes()).collect();
        let ap = average_precision(&dets, &gts, Category::Vehicle, 0.3);
        let ndets: usize = dets.iter().map(|d| d.len()).sum();
        eprintln!("epochs {}: loss {:.3} heat_max(veh,scene0) {:.3} dets {} train-AP@0.3 {:.3}",
            (round+1)*5, rep.epoch_losses.last().unwrap(), hmax, ndets, ap);
    }
}
