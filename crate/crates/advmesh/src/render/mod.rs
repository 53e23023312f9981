//! Rendering: differentiable soft rasterization of textured meshes through
//! camera models, and hard z-buffer rendering of synthetic scene backgrounds.

pub mod hard;
mod raster;

pub use hard::{background_image, cuboid_tris, render_boxes_hard, zbuffer_triangles, HardRender, HardTri};

use crate::autodiff::{concat, Array, Tape, Var};
use crate::geometry::{ego_to_camera_var, project_var, CameraModel, PROJECT_NEAR};
use crate::mesh::{Mesh, MeshPose};

/// Per-view output of the soft rasterizer: rgb (3,H,W) and visibility mask
/// (1,H,W), both in [0,1] and differentiable w.r.t. mesh vertices and texture.
pub struct RenderOutput<'t> {
    pub rgb: Var<'t>,
    pub mask: Var<'t>,
}

/// Soft-rasterizer hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct SoftParams {
    /// Sigmoid sharpness in squared pixels.
    pub gamma: f64,
    /// Depth-weighting temperature in meters.
    pub sigma_z: f64,
    /// Candidate bbox padding in units of sqrt(gamma).
    pub pad_sigmas: f64,
}

impl SoftParams {
    /// Defaults scaled to the image: gamma = 1e-4 * diag^2, sigma_z = 0.1 m.
    pub fn for_image(h: usize, w: usize) -> Self {
        SoftParams {
            gamma: 1e-4 * ((h * h + w * w) as f64),
            sigma_z: 0.1,
            pad_sigmas: 3.0,
        }
    }

    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = gamma;
        self
    }
}

/// Soft-rasterize one mesh (its vertices and texture already on the tape as
/// (n,3) tensors in the local frame) instanced at `poses`, into one camera.
///
/// All instances share the same vertex/texture tensors, so gradients
/// accumulate across instances and views automatically. Faces with any vertex
/// behind the near plane are culled (a hard branch outside the tape); a mesh
/// entirely behind the camera yields zero rgb and mask.
pub fn rasterize_soft_vars<'t>(
    tape: &'t Tape,
    verts: Var<'t>,
    texture: Var<'t>,
    faces: &[[u32; 3]],
    poses: &[MeshPose],
    cam: &CameraModel,
    params: SoftParams,
) -> RenderOutput<'t> {
    let shape = verts.shape();
    assert!(shape.len() == 2 && shape[1] == 3, "rasterize: vertices must be (n,3), got {shape:?}");
    let n = shape[0];
    assert!(n > 0, "rasterize: empty mesh");
    assert!(!poses.is_empty(), "rasterize: no poses");

    // world-space instances, concatenated into one (P*n, 3) soup
    let mut instanced: Vec<Var<'t>> = Vec::with_capacity(poses.len());
    for pose in poses {
        let center = tape.constant(Array::from_vec(&[3], pose.center.to_vec()));
        instanced.push(verts.add(center));
    }
    let world = if instanced.len() == 1 { instanced[0] } else { concat(&instanced, 0) };
    let cam_pts = ego_to_camera_var(tape, world, cam);
    let (px, py, z) = project_var(tape, cam_pts, cam);

    let textures: Vec<Var<'t>> = std::iter::repeat(texture).take(poses.len()).collect();
    let tex_all = if textures.len() == 1 { textures[0] } else { concat(&textures, 0) };

    // cull faces with any vertex behind the near plane (hard branch)
    let zv = cam_pts.value();
    let valid: Vec<bool> = (0..n * poses.len()).map(|i| zv.data[3 * i + 2] > PROJECT_NEAR * 1.001).collect();
    let mut kept: Vec<[u32; 3]> = Vec::with_capacity(faces.len() * poses.len());
    for inst in 0..poses.len() {
        let off = (inst * n) as u32;
        for f in faces {
            let g = [f[0] + off, f[1] + off, f[2] + off];
            if valid[g[0] as usize] && valid[g[1] as usize] && valid[g[2] as usize] {
                kept.push(g);
            }
        }
    }

    let (h, w) = (cam.height, cam.width);
    let op = raster::make_op(h, w, kept, params.gamma, params.sigma_z, params.pad_sigmas);
    let out = tape.custom(&[px, py, z, tex_all], op);
    let rgb = out.slice(&[(0, 3), (0, h), (0, w)]);
    let mask = out.slice(&[(3, 4), (0, h), (0, w)]);
    RenderOutput { rgb, mask }
}

/// Convenience wrapper: put the mesh on the tape as constants and rasterize a
/// single instance. Forward-only call sites (evaluation, debug rendering).
pub fn rasterize_soft<'t>(
    tape: &'t Tape,
    mesh: &Mesh,
    pose: MeshPose,
    cam: &CameraModel,
    params: SoftParams,
) -> RenderOutput<'t> {
    let verts = tape.constant(Array::from_vec(&[mesh.vertex_count(), 3], mesh.vertices_flat()));
    let tex = tape.constant(Array::from_vec(&[mesh.vertex_count(), 3], mesh.texture_flat()));
    rasterize_soft_vars(tape, verts, tex, &mesh.faces, &[pose], cam, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::geometry::{vec_norm, vec_scale, BBox3D, Category};
    use crate::mesh::{init_primitive, PrimitiveShape};
    use crate::oracle;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn test_cam(w: usize, h: usize, fx: f64) -> CameraModel {
        CameraModel::new(
            [[fx, 0.0, w as f64 / 2.0], [0.0, fx, h as f64 / 2.0], [0.0, 0.0, 1.0]],
            [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            [0.0; 3],
            w,
            h,
        )
    }

    /// One triangle as a Mesh (padded with a far dummy vertex is not needed;
    /// three vertices and a single face).
    fn tri_mesh(v: [[f64; 3]; 3], color: [f64; 3]) -> Mesh {
        Mesh {
            vertices: v.to_vec(),
            base_vertices: v.to_vec(),
            faces: vec![[0, 1, 2]],
            texture: vec![color; 3],
        }
    }

    #[test]
    fn large_red_triangle_covers_principal_point() {
        let cam = test_cam(64, 64, 40.0);
        let m = tri_mesh(
            [[-10.0, 8.0, 5.0], [10.0, 8.0, 5.0], [0.0, -12.0, 5.0]],
            [1.0, 0.0, 0.0],
        );
        let tape = Tape::new();
        let out = rasterize_soft(&tape, &m, MeshPose { center: [0.0; 3] }, &cam, SoftParams::for_image(64, 64));
        let rgb = out.rgb.value();
        let mask = out.mask.value();
        let center = 32 * 64 + 32;
        assert!(mask.data[center] > 0.99, "mask {}", mask.data[center]);
        assert!((rgb.data[center] - 1.0).abs() < 0.01, "r {}", rgb.data[center]);
        assert!(rgb.data[64 * 64 + center].abs() < 0.01, "g");
        // rgb in range everywhere
        assert!(rgb.data.iter().all(|&v| (-1e-9..=1.0 + 1e-9).contains(&v)));
        assert!(mask.data.iter().all(|&v| (-1e-9..=1.0 + 1e-9).contains(&v)));
    }

    #[test]
    fn mesh_outside_frustum_renders_nothing() {
        let cam = test_cam(32, 32, 30.0);
        let m = init_primitive(PrimitiveShape::Sphere);
        // entirely behind the camera
        let tape = Tape::new();
        let out = rasterize_soft(&tape, &m, MeshPose { center: [0.0, 0.0, -5.0] }, &cam, SoftParams::for_image(32, 32));
        let mask_sum: f64 = out.mask.value().data.iter().sum();
        assert!(mask_sum < 1e-3 * 32.0 * 32.0, "mask mass {mask_sum}");
        // far outside to the side
        let tape2 = Tape::new();
        let out2 =
            rasterize_soft(&tape2, &m, MeshPose { center: [50.0, 0.0, 5.0] }, &cam, SoftParams::for_image(32, 32));
        let mask_sum2: f64 = out2.mask.value().data.iter().sum();
        assert!(mask_sum2 < 1e-3 * 32.0 * 32.0, "mask mass {mask_sum2}");
    }

    #[test]
    fn stacked_triangles_weight_by_depth() {
        let cam = test_cam(64, 64, 40.0);
        // both triangles cover the center; red at z=5, blue at z=10
        let red = tri_mesh([[-8.0, 6.0, 5.0], [8.0, 6.0, 5.0], [0.0, -10.0, 5.0]], [1.0, 0.0, 0.0]);
        let blue = tri_mesh(
            [[-16.0, 12.0, 10.0], [16.0, 12.0, 10.0], [0.0, -20.0, 10.0]],
            [0.0, 0.0, 1.0],
        );
        // merge into one mesh (joint pass resolves mutual depth ordering)
        let merged = Mesh {
            vertices: red.vertices.iter().chain(blue.vertices.iter()).copied().collect(),
            base_vertices: red.vertices.iter().chain(blue.vertices.iter()).copied().collect(),
            faces: vec![[0, 1, 2], [3, 4, 5]],
            texture: red.texture.iter().chain(blue.texture.iter()).copied().collect(),
        };
        let tape = Tape::new();
        let out = rasterize_soft(&tape, &merged, MeshPose { center: [0.0; 3] }, &cam, SoftParams::for_image(64, 64));
        let rgb = out.rgb.value();
        let center = 32 * 64 + 32;
        // hand evaluation: cov ~= 1 for both, weights e^0 vs e^-50
        let blue_w = rgb.data[2 * 64 * 64 + center];
        let red_w = rgb.data[center];
        assert!(blue_w < 0.05, "blue weight {blue_w}");
        assert!(red_w > 0.95, "red weight {red_w}");
    }

    #[test]
    fn rasterizer_is_differentiable_wrt_vertices_and_texture() {
        let cam = test_cam(16, 16, 10.0);
        let ico = icosahedron_mesh();
        let params = SoftParams::for_image(16, 16);
        let pose = MeshPose { center: [0.3, -0.2, 4.0] };

        let vflat = Array::from_vec(&[12, 3], ico.vertices_flat());
        let err_v = grad_check(
            |tape, v| {
                let tex = tape.constant(Array::from_vec(&[12, 3], ico.texture_flat()));
                let out = rasterize_soft_vars(tape, v, tex, &ico.faces, &[pose], &cam, params);
                out.rgb.sum().add(out.mask.sum())
            },
            &vflat,
            1e-6,
        );
        assert!(err_v < 1e-3, "vertex gradient error {err_v}");

        let tflat = Array::from_vec(&[12, 3], ico.texture_flat());
        let err_t = grad_check(
            |tape, t| {
                let v = tape.constant(Array::from_vec(&[12, 3], ico.vertices_flat()));
                let out = rasterize_soft_vars(tape, v, t, &ico.faces, &[pose], &cam, params);
                out.rgb.sum().add(out.mask.sum())
            },
            &tflat,
            1e-6,
        );
        assert!(err_t < 1e-4, "texture gradient error {err_t}");
    }

    fn icosahedron_mesh() -> Mesh {
        let phi = (1.0 + 5.0_f64.sqrt()) / 2.0;
        let raw: [[f64; 3]; 12] = [
            [-1.0, phi, 0.0],
            [1.0, phi, 0.0],
            [-1.0, -phi, 0.0],
            [1.0, -phi, 0.0],
            [0.0, -1.0, phi],
            [0.0, 1.0, phi],
            [0.0, -1.0, -phi],
            [0.0, 1.0, -phi],
            [phi, 0.0, -1.0],
            [phi, 0.0, 1.0],
            [-phi, 0.0, -1.0],
            [-phi, 0.0, 1.0],
        ];
        let vertices: Vec<[f64; 3]> = raw.iter().map(|v| vec_scale(*v, 0.5 / vec_norm(*v))).collect();
        let faces: Vec<[u32; 3]> = vec![
            [0, 11, 5],
            [0, 5, 1],
            [0, 1, 7],
            [0, 7, 10],
            [0, 10, 11],
            [1, 5, 9],
            [5, 11, 4],
            [11, 10, 2],
            [10, 7, 6],
            [7, 1, 8],
            [3, 9, 4],
            [3, 4, 2],
            [3, 2, 6],
            [3, 6, 8],
            [3, 8, 9],
            [4, 9, 5],
            [2, 4, 11],
            [6, 2, 10],
            [8, 6, 7],
            [9, 8, 1],
        ];
        let texture: Vec<[f64; 3]> = (0..12).map(|i| [0.2 + 0.05 * i as f64, 0.8 - 0.05 * i as f64, 0.4]).collect();
        Mesh { base_vertices: vertices.clone(), vertices, faces, texture }
    }

    #[test]
    fn translation_moves_the_mask() {
        let cam = test_cam(64, 64, 80.0);
        let m = init_primitive(PrimitiveShape::Sphere);
        let params = SoftParams::for_image(64, 64);
        let z = 8.0;
        let tape = Tape::new();
        let out0 = rasterize_soft(&tape, &m, MeshPose { center: [0.0, 0.0, z] }, &cam, params);
        // lateral offset worth ~10 pixels: dx = k * z / fx
        let k = 10.0;
        let dx = k * z / 80.0;
        let out1 = rasterize_soft(&tape, &m, MeshPose { center: [dx, 0.0, z] }, &cam, params);
        let argmax = |mask: &Array| {
            let mut best = (0usize, f64::NEG_INFINITY);
            for (i, &v) in mask.data.iter().enumerate() {
                if v > best.1 {
                    best = (i, v);
                }
            }
            ((best.0 % 64) as f64, (best.0 / 64) as f64)
        };
        let (x0, y0) = argmax(&out0.mask.value());
        let (x1, y1) = argmax(&out1.mask.value());
        assert!((x1 - x0 - k).abs() <= 1.0, "shift {} expected {k}", x1 - x0);
        assert!((y1 - y0).abs() <= 1.0);
    }

    #[test]
    fn mask_mass_monotone_in_gamma() {
        let cam = test_cam(48, 48, 40.0);
        let m = init_primitive(PrimitiveShape::Sphere);
        let pose = MeshPose { center: [0.0, 0.0, 6.0] };
        let mut last = 0.0;
        for (i, gamma) in [0.25, 1.0, 4.0, 16.0].iter().enumerate() {
            let tape = Tape::new();
            let params = SoftParams { gamma: *gamma, sigma_z: 0.1, pad_sigmas: 4.0 };
            let out = rasterize_soft(&tape, &m, pose, &cam, params);
            let mass: f64 = out.mask.value().data.iter().sum();
            if i > 0 {
                assert!(mass >= last - 1e-6, "mask mass decreased: {mass} < {last} at gamma {gamma}");
            }
            last = mass;
        }
    }

    #[test]
    fn tiny_gamma_matches_point_in_polygon_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(33);
        let (h, w) = (48usize, 48usize);
        let cam = test_cam(w, h, 40.0);
        for trial in 0..10 {
            let m = init_primitive(PrimitiveShape::Sphere);
            let pose = MeshPose {
                center: [rng.gen_range(-0.8..0.8), rng.gen_range(-0.8..0.8), rng.gen_range(4.0..9.0)],
            };
            let tape = Tape::new();
            let params = SoftParams { gamma: 1e-6, sigma_z: 0.1, pad_sigmas: 3.0 };
            let out = rasterize_soft(&tape, &m, pose, &cam, params);
            let mask = out.mask.value();

            // oracle: project all faces, point-in-polygon per pixel center
            let mut tris = Vec::new();
            for f in &m.faces {
                let mut t = [[0.0f64; 2]; 3];
                let mut ok = true;
                for (k, &vi) in f.iter().enumerate() {
                    let world = crate::geometry::vec_add(m.vertices[vi as usize], pose.center);
                    let pc = crate::geometry::ego_to_camera(world, &cam);
                    match crate::geometry::project(pc, &cam) {
                        Some((x, y, _)) => t[k] = [x, y],
                        None => ok = false,
                    }
                }
                if ok {
                    tris.push(t);
                }
            }
            let oracle_mask = oracle::silhouette_mask(&tris, h, w);
            let mut agree = 0usize;
            for i in 0..h * w {
                let soft = mask.data[i] > 0.5;
                if soft == oracle_mask[i] {
                    agree += 1;
                }
            }
            let frac = agree as f64 / (h * w) as f64;
            assert!(frac > 0.99, "trial {trial}: agreement {frac}");
        }
    }

    #[test]
    fn rasterize_is_deterministic() {
        let cam = test_cam(32, 32, 30.0);
        let m = init_primitive(PrimitiveShape::Cylinder);
        let pose = MeshPose { center: [0.2, 0.1, 5.0] };
        let params = SoftParams::for_image(32, 32);
        let a = {
            let tape = Tape::new();
            rasterize_soft(&tape, &m, pose, &cam, params).rgb.value()
        };
        let b = {
            let tape = Tape::new();
            rasterize_soft(&tape, &m, pose, &cam, params).rgb.value()
        };
        assert_eq!(a.data, b.data);
    }

    // --- hard renderer ---

    #[test]
    fn empty_scene_is_background_only() {
        let cam = test_cam(32, 88, 60.0);
        let out = render_boxes_hard(&[], &cam);
        assert!(out.owner.iter().all(|&o| o == -1));
        let bg = background_image(&cam);
        assert_eq!(out.rgb.data, bg.data);
    }

    #[test]
    fn cuboid_silhouette_matches_supersampled_oracle() {
        let cam = test_cam(88, 64, 70.0);
        let b = BBox3D::new([0.5, 0.3, 8.0], [2.0, 1.5, 1.8], 0.4, Category::Vehicle);
        let out = render_boxes_hard(&[(b, [0.8, 0.2, 0.2])], &cam);
        let count = out.owner.iter().filter(|&&o| o == 0).count();
        assert!(count > 0);

        // oracle: same triangles through the supersampled z-buffer
        let mut otris = Vec::new();
        for t in cuboid_tris(&b, [1.0, 0.0, 0.0], 0) {
            let mut pts = [[0.0f64; 2]; 3];
            let mut zs = [0.0f64; 3];
            let mut ok = true;
            for (k, v) in t.v.iter().enumerate() {
                let pc = crate::geometry::ego_to_camera(*v, &cam);
                match crate::geometry::project(pc, &cam) {
                    Some((x, y, z)) => {
                        pts[k] = [x, y];
                        zs[k] = z;
                    }
                    None => ok = false,
                }
            }
            if ok {
                otris.push(oracle::OwnedTri { pts, z: zs, owner: 0 });
            }
        }
        let oracle_owner = oracle::zbuffer_owner(&otris, 64, 88, 4);
        let oracle_count = oracle_owner.iter().filter(|&&o| o == 0).count();
        let rel = (count as f64 - oracle_count as f64).abs() / oracle_count as f64;
        assert!(rel < 0.02, "raster {count} vs oracle {oracle_count} ({rel})");
    }

    #[test]
    fn nearer_cuboid_wins_depth_test() {
        let cam = test_cam(32, 32, 30.0);
        let near = BBox3D::new([0.0, 0.0, 5.0], [1.0, 1.0, 1.0], 0.0, Category::Vehicle);
        let far = BBox3D::new([0.0, 0.0, 10.0], [2.0, 2.0, 2.0], 0.0, Category::Vehicle);
        let out = render_boxes_hard(&[(near, [1.0, 0.0, 0.0]), (far, [0.0, 0.0, 1.0])], &cam);
        let center = 16 * 32 + 16;
        assert_eq!(out.owner[center], 0);
        // rendering twice is bit-identical
        let out2 = render_boxes_hard(&[(near, [1.0, 0.0, 0.0]), (far, [0.0, 0.0, 1.0])], &cam);
        assert_eq!(out.rgb.data, out2.rgb.data);
    }
}
