use advmesh::autodiff::{Array, Tape, Var};
use advmesh::detector::*;
use advmesh::scene::{generate_scene, Scene, SceneConfig};
use std::sync::Arc;

fn main() {
    let cfg = SceneConfig { image_width: 176, image_height: 64, ..Default::default() };
    let scenes: Vec<Scene> = (0..20).map(|s| generate_scene(&cfg, 500 + s as u64).unwrap()).collect();
    for s in &scenes { s.raw_images(); }
    let grid = BevGrid { channels: 8, ..Default::default() };
    let meta = DetectorMeta { grid, image_width: 176, image_height: 64 };
    let mut params = DetectorParams::init(meta, 0).unwrap();
    let opts = TrainOptions { epochs: 30, lr: 1e-2, batch_size: 2, seed: 1 };
    train_detector(&scenes, &mut params, &opts).unwrap();

    // lift output (pre-BEV-conv) for scene 0
    let s0 = &scenes[0];
    let tape = Tape::new();
    let pvars = ParamVars::constants(&tape, &params);
    let plan = Arc::new(build_lift_plan(&grid, &s0.cameras, 176, 64));
    let images: Vec<Var> = s0.raw_images().iter().map(|im| tape.constant(im.clone())).collect();
    // replicate extract_bev's internals up to the lift
    let bev = extract_bev(&tape, &images, &pvars, &grid, &plan);
    let bev_v = bev.value();
    let (heat, _) = heads(bev, &pvars);
    let heat_v = heat.value();

    let ny = grid.ny();
    let cells = grid.cells();
    let gt = s0.vehicles()[0];
    let (ci, cj) = grid.cell_of(gt.center[0], gt.center[1]).unwrap();
    let show = |label: &str, i: usize, j: usize, bev_v: &Array| {
        let cell = i * ny + j;
        let feat: Vec<f64> = (0..8).map(|c| bev_v.data[c * cells + cell]).collect();
        let norm: f64 = (0..bev_v.shape[0]).map(|c| bev_v.data[c * cells + cell].powi(2)).sum::<f64>().sqrt();
        println!("{label} ({i},{j}): heat {:.3} | bev norm {:.3} | first8 {:?}",
            heat_v.data[cell], norm, feat.iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>());
    };
    println!("vehicle at cell ({ci},{cj}), center {:?}", [gt.center[0], gt.center[1]]);
    show("gt cell     ", ci, cj, &bev_v);
    show("gt + (3,0)  ", ci + 3, cj, &bev_v);
    show("gt + (0,3)  ", ci, cj + 3, &bev_v);
    show("empty corner", 5, 5, &bev_v);
    show("empty corner", 70, 70, &bev_v);
    // heat stats at all vehicle gt cells across scenes
    let mut gt_mean = 0.0;
    let mut n = 0.0;
    for s in &scenes {
        let (h, _) = detect_maps(&params, s.raw_images(), &s.cameras);
        for v in s.vehicles() {
            if let Some((i, j)) = grid.cell_of(v.center[0], v.center[1]) {
                gt_mean += h.data[i * ny + j];
                n += 1.0;
            }
        }
    }
    println!("mean gt-cell vehicle heat over 20 scenes: {:.3}", gt_mean / n);
}
