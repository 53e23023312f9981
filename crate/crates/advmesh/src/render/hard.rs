//! Classical z-buffer rendering of synthetic scenes: flat-shaded cuboid
//! proxies over a ground-plane gradient and horizon background. Nearest face
//! wins per pixel; deterministic for identical inputs.

use crate::autodiff::Array;
use crate::geometry::{
    ego_to_camera, mat_transpose, mat_vec, project, vec_norm, vec_scale, vec_sub, BBox3D, CameraModel, Vec3,
};

/// Triangles closer than this to the camera plane are culled whole.
const NEAR: f64 = 0.05;

#[derive(Debug, Clone, Copy)]
pub struct HardTri {
    /// Ego-frame vertices.
    pub v: [Vec3; 3],
    pub color: [f64; 3],
    pub owner: i32,
}

pub struct HardRender {
    pub rgb: Array,
    pub depth: Vec<f64>,
    pub owner: Vec<i32>,
}

/// The twelve triangles of a box's surface, flat-shaded from a fixed light.
pub fn cuboid_tris(b: &BBox3D, color: [f64; 3], owner: i32) -> Vec<HardTri> {
    let c = b.corners();
    // quad loops over the corner-index convention (each step flips one bit)
    const QUADS: [[usize; 4]; 6] = [
        [0, 2, 3, 1],
        [4, 6, 7, 5],
        [0, 1, 5, 4],
        [2, 3, 7, 6],
        [0, 2, 6, 4],
        [1, 3, 7, 5],
    ];
    let light = {
        let l = [0.35, 0.25, 0.9];
        vec_scale(l, 1.0 / vec_norm(l))
    };
    let mut tris = Vec::with_capacity(12);
    for q in QUADS {
        for t in [[q[0], q[1], q[2]], [q[0], q[2], q[3]]] {
            let v = [c[t[0]], c[t[1]], c[t[2]]];
            let e1 = vec_sub(v[1], v[0]);
            let e2 = vec_sub(v[2], v[0]);
            let n = [
                e1[1] * e2[2] - e1[2] * e2[1],
                e1[2] * e2[0] - e1[0] * e2[2],
                e1[0] * e2[1] - e1[1] * e2[0],
            ];
            let nn = vec_norm(n);
            // two-sided flat shading, winding-independent
            let shade = if nn > 1e-12 {
                0.55 + 0.45 * (n[0] * light[0] + n[1] * light[1] + n[2] * light[2]).abs() / nn
            } else {
                0.55
            };
            tris.push(HardTri {
                v,
                color: [color[0] * shade, color[1] * shade, color[2] * shade],
                owner,
            });
        }
    }
    tris
}

/// Ground-plane gradient below the horizon, sky gradient above.
pub fn background_image(cam: &CameraModel) -> Array {
    let (h, w) = (cam.height, cam.width);
    let mut data = vec![0.0; 3 * h * w];
    let plane = h * w;
    let rt = mat_transpose(&cam.r);
    let origin = cam.center_ego();
    for y in 0..h {
        for x in 0..w {
            let dir_cam = [
                (x as f64 + 0.5 - cam.cx()) / cam.fx(),
                (y as f64 + 0.5 - cam.cy()) / cam.fy(),
                1.0,
            ];
            let dir = mat_vec(&rt, dir_cam);
            let color = if dir[2] < -1e-9 {
                let t = -origin[2] / dir[2];
                let hit = [origin[0] + t * dir[0], origin[1] + t * dir[1]];
                let dist = (hit[0] * hit[0] + hit[1] * hit[1]).sqrt();
                let fade = 1.0 / (1.0 + dist / 25.0);
                [0.32 * fade + 0.25, 0.30 * fade + 0.24, 0.27 * fade + 0.23]
            } else {
                let elev = dir[2] / vec_norm(dir);
                [0.55 - 0.15 * elev, 0.65 - 0.10 * elev, 0.80]
            };
            for c in 0..3 {
                data[c * plane + y * w + x] = color[c];
            }
        }
    }
    Array::from_vec(&[3, h, w], data)
}

/// Rasterize triangles over a background with a per-pixel depth test.
pub fn zbuffer_triangles(tris: &[HardTri], cam: &CameraModel, background: Option<Array>) -> HardRender {
    let (h, w) = (cam.height, cam.width);
    let plane = h * w;
    let mut rgb = background.unwrap_or_else(|| Array::zeros(&[3, h, w]));
    assert_eq!(rgb.shape, vec![3, h, w], "background size mismatch");
    let mut depth = vec![f64::INFINITY; plane];
    let mut owner = vec![-1i32; plane];

    for tri in tris {
        let cams = tri.v.map(|p| ego_to_camera(p, cam));
        if cams.iter().any(|p| p[2] < NEAR) {
            continue;
        }
        let proj: Vec<(f64, f64, f64)> = cams.iter().filter_map(|p| project(*p, cam)).collect();
        if proj.len() != 3 {
            continue;
        }
        let (ax, ay, az) = proj[0];
        let (bx, by, bz) = proj[1];
        let (cx, cy, cz) = proj[2];
        let d = (by - cy) * (ax - cx) + (cx - bx) * (ay - cy);
        if d.abs() < 1e-12 {
            continue;
        }
        let x0 = (ax.min(bx).min(cx) - 0.5).ceil().max(0.0) as usize;
        let x1 = (((ax.max(bx).max(cx) - 0.5).floor() + 1.0).max(0.0) as usize).min(w);
        let y0 = (ay.min(by).min(cy) - 0.5).ceil().max(0.0) as usize;
        let y1 = (((ay.max(by).max(cy) - 0.5).floor() + 1.0).max(0.0) as usize).min(h);
        for yy in y0..y1 {
            let pcy = yy as f64 + 0.5;
            for xx in x0..x1 {
                let pcx = xx as f64 + 0.5;
                let l1 = ((by - cy) * (pcx - cx) + (cx - bx) * (pcy - cy)) / d;
                let l2 = ((cy - ay) * (pcx - cx) + (ax - cx) * (pcy - cy)) / d;
                let l3 = 1.0 - l1 - l2;
                if l1 < 0.0 || l2 < 0.0 || l3 < 0.0 {
                    continue;
                }
                let z = l1 * az + l2 * bz + l3 * cz;
                let idx = yy * w + xx;
                if z < depth[idx] {
                    depth[idx] = z;
                    owner[idx] = tri.owner;
                    for c in 0..3 {
                        rgb.data[c * plane + idx] = tri.color[c];
                    }
                }
            }
        }
    }
    HardRender { rgb, depth, owner }
}

/// Render box proxies over the procedural background.
pub fn render_boxes_hard(objects: &[(BBox3D, [f64; 3])], cam: &CameraModel) -> HardRender {
    let mut tris = Vec::with_capacity(objects.len() * 12);
    for (i, (b, color)) in objects.iter().enumerate() {
        tris.extend(cuboid_tris(b, *color, i as i32));
    }
    zbuffer_triangles(&tris, cam, Some(background_image(cam)))
}
