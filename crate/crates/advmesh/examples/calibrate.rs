use advmesh::detector::*;
use advmesh::eval::average_precision;
use advmesh::geometry::Category;
use advmesh::scene::{generate_scene, Scene, SceneConfig};
use std::time::Instant;

fn clean_ap(scenes: &[Scene], det: &DetectorParams, thresh: f64, cat: Category) -> f64 {
    let dets: Vec<Vec<Detection>> = scenes
        .iter()
        .map(|s| {
            let (heat, reg) = detect_maps(det, s.raw_images(), &s.cameras);
            decode(&heat, &reg, &det.meta.grid, 0.3, 2.0)
        })
        .collect();
    let gts: Vec<Vec<_>> = scenes.iter().map(|s| s.boxes()).collect();
    average_precision(&dets, &gts, cat, thresh)
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let n_train: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(4);
    let channels: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(32);
    let lr: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(1e-3);

    let cfg = SceneConfig { image_width: 176, image_height: 64, ..Default::default() };
    let t0 = Instant::now();
    let train: Vec<Scene> = (0..n_train).map(|s| generate_scene(&cfg, 1000 + s as u64).unwrap()).collect();
    let val: Vec<Scene> = (0..40).map(|s| generate_scene(&cfg, 9000 + s as u64).unwrap()).collect();
    // pre-render
    for s in train.iter().chain(val.iter()) { s.raw_images(); }
    eprintln!("scene gen+render: {:.1}s", t0.elapsed().as_secs_f64());

    let grid = BevGrid { channels, ..Default::default() };
    let meta = DetectorMeta { grid, image_width: 176, image_height: 64 };
    let mut params = DetectorParams::init(meta, 0).unwrap();
    for round in 0..10 {
        let t1 = Instant::now();
        let opts = TrainOptions { epochs, lr, batch_size: 8, seed: round as u64 };
        let report = train_detector(&train, &mut params, &opts).unwrap();
        let dt = t1.elapsed().as_secs_f64();
        let ap03 = clean_ap(&val, &params, 0.3, Category::Vehicle);
        let ap05 = clean_ap(&val, &params, 0.5, Category::Vehicle);
        let ap_ped = clean_ap(&val, &params, 0.3, Category::Pedestrian);
        let ap_bar = clean_ap(&val, &params, 0.3, Category::Barrier);
        eprintln!(
            "after {} more epochs ({:.1}s, {:.2}s/epoch): loss {:.4} -> AP@0.3 {:.3} AP@0.5 {:.3} ped {:.3} bar {:.3}",
            epochs, dt, dt / epochs as f64,
            report.epoch_losses.last().unwrap(), ap03, ap05, ap_ped, ap_bar
        );
        if ap03 > 0.85 { break; }
    }
    params.save(std::path::Path::new("/tmp/smoke/calib_det.json")).unwrap();
}
