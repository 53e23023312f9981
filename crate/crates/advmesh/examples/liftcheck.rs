use advmesh::detector::*;
use advmesh::scene::{generate_scene, SceneConfig};

fn main() {
    let cfg = SceneConfig { image_width: 176, image_height: 64, ..Default::default() };
    let scene = generate_scene(&cfg, 500).unwrap();
    let grid = BevGrid { channels: 8, ..Default::default() };
    let plan = build_lift_plan(&grid, &scene.cameras, 176, 64);
    let imgs = scene.raw_images();
    let ny = grid.ny();

    for obj in scene.objects.iter().take(3) {
        let b = obj.bbox();
        let Some((ci, cj)) = grid.cell_of(b.center[0], b.center[1]) else { continue };
        let cell = (ci * ny + cj) as u32;
        println!("object {:?} at {:?} dist {:.1} cell ({ci},{cj}) color {:?}", obj.category, 
                 [b.center[0], b.center[1]], (b.center[0]*b.center[0]+b.center[1]*b.center[1]).sqrt(), obj.color);
        let mut n = 0;
        for s in plan.samples.iter().filter(|s| s.cell == cell) {
            // sampled image pixel (feature coords -> image pixel)
            let px = (s.x0 as f64 + 0.5) * 4.0;
            let py = (s.y0 as f64 + 0.5) * 4.0;
            let img = &imgs[s.view as usize];
            let (h, w) = (img.shape[1], img.shape[2]);
            let (xi, yi) = ((px as usize).min(w - 1), (py as usize).min(h - 1));
            let rgb: Vec<f64> = (0..3).map(|c| img.data[c * h * w + yi * w + xi]).collect();
            println!("  h{} cam{} feat({},{}) -> img px ({:.0},{:.0}) rgb ({:.2},{:.2},{:.2})",
                     s.height, s.view, s.x0, s.y0, px, py, rgb[0], rgb[1], rgb[2]);
            n += 1;
            if n > 8 { break; }
        }
    }
}
