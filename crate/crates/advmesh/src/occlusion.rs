//! Occlusion processing: decide per view which annotated objects occlude the
//! adversarial mesh, carve their segmentation masks out of the soft mask, and
//! alpha-composite the result over the raw background.
//!
//! The occlusion decision (2-D overlap plus a depth test on minimum vertex /
//! corner distances) is a hard branch computed outside the tape; the carved
//! segmentation masks enter the graph as constants.

use std::path::PathBuf;

use crate::autodiff::{Array, Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{
    ego_to_camera, overlap_2d, project, project_box_2d, vec_add, vec_norm, BBox2D, BBox3D, CameraModel,
};
use crate::mesh::{Mesh, MeshPose};
use crate::render::RenderOutput;

/// Identifies the (frame, camera, object) triple a segmentation mask belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegKey {
    pub scene_id: u64,
    pub camera: usize,
    pub object: usize,
}

/// Produces a binary object mask for a prompt box. Deterministic for fixed
/// inputs; the returned mask must stay within the prompt box (dilated by at
/// most a few pixels).
pub trait SegmentationProvider {
    fn segment(&self, key: SegKey, raw: &Array, prompt: &BBox2D) -> Result<Array>;
}

/// Default provider: the filled prompt rectangle.
#[derive(Debug, Default, Clone, Copy)]
pub struct BoxFillProvider;

impl SegmentationProvider for BoxFillProvider {
    fn segment(&self, _key: SegKey, raw: &Array, prompt: &BBox2D) -> Result<Array> {
        let (h, w) = (raw.shape[1], raw.shape[2]);
        let mut mask = Array::zeros(&[h, w]);
        for y in 0..h {
            let cy = y as f64 + 0.5;
            if cy < prompt.y_min || cy > prompt.y_max {
                continue;
            }
            for x in 0..w {
                let cx = x as f64 + 0.5;
                if cx >= prompt.x_min && cx <= prompt.x_max {
                    mask.data[y * w + x] = 1.0;
                }
            }
        }
        Ok(mask)
    }
}

/// Reads per-object masks from `<dir>/<scene>_<camera>_<object>.png`
/// (grayscale, >50% is foreground). Lets an external segmentation model feed
/// masks in through the filesystem.
#[derive(Debug, Clone)]
pub struct FileMaskProvider {
    pub dir: PathBuf,
}

impl SegmentationProvider for FileMaskProvider {
    fn segment(&self, key: SegKey, raw: &Array, _prompt: &BBox2D) -> Result<Array> {
        let path = self.dir.join(format!("{}_{}_{}.png", key.scene_id, key.camera, key.object));
        let img = image::open(&path)
            .map_err(|e| Error::Data(format!("segmentation mask {}: {e}", path.display())))?
            .to_luma8();
        let (h, w) = (raw.shape[1], raw.shape[2]);
        if img.width() as usize != w || img.height() as usize != h {
            return Err(Error::Data(format!(
                "segmentation mask {} is {}x{}, expected {}x{}",
                path.display(),
                img.width(),
                img.height(),
                w,
                h
            )));
        }
        let mut mask = Array::zeros(&[h, w]);
        for y in 0..h {
            for x in 0..w {
                if img.get_pixel(x as u32, y as u32)[0] > 127 {
                    mask.data[y * w + x] = 1.0;
                }
            }
        }
        Ok(mask)
    }
}

/// Minimum Euclidean distance from the camera center to any mesh vertex,
/// with the mesh transformed into the camera frame.
pub fn mesh_depth(mesh: &Mesh, pose: &MeshPose, cam: &CameraModel) -> f64 {
    assert!(!mesh.vertices.is_empty(), "mesh_depth: empty mesh");
    mesh.vertices
        .iter()
        .map(|v| vec_norm(ego_to_camera(vec_add(*v, pose.center), cam)))
        .fold(f64::INFINITY, f64::min)
}

/// Minimum distance from the camera center to any of the box's eight corners.
pub fn object_depth(b: &BBox3D, cam: &CameraModel) -> f64 {
    b.corners().iter().map(|c| vec_norm(ego_to_camera(*c, cam))).fold(f64::INFINITY, f64::min)
}

/// 2-D pixel bbox of the projected mesh instance (hull over in-front
/// vertices, clipped to image bounds); `None` when fully behind the camera.
pub fn mesh_bbox_2d(mesh: &Mesh, pose: &MeshPose, cam: &CameraModel) -> Option<BBox2D> {
    let mut x_min = f64::INFINITY;
    let mut y_min = f64::INFINITY;
    let mut x_max = f64::NEG_INFINITY;
    let mut y_max = f64::NEG_INFINITY;
    let mut any = false;
    for v in &mesh.vertices {
        let pc = ego_to_camera(vec_add(*v, pose.center), cam);
        if let Some((px, py, _)) = project(pc, cam) {
            any = true;
            x_min = x_min.min(px);
            y_min = y_min.min(py);
            x_max = x_max.max(px);
            y_max = y_max.max(py);
        }
    }
    if !any {
        return None;
    }
    let (w, h) = (cam.width as f64, cam.height as f64);
    Some(BBox2D::new(
        x_min.clamp(0.0, w),
        y_min.clamp(0.0, h),
        x_max.clamp(0.0, w),
        y_max.clamp(0.0, h),
    ))
}

/// Indices of the objects that occlude any of the mesh instances in this
/// view: 2-D bbox overlap > 0 and object depth closer than the instance's
/// mesh depth.
pub fn occluder_set(
    mesh: &Mesh,
    poses: &[MeshPose],
    objects: &[BBox3D],
    cam: &CameraModel,
) -> Vec<usize> {
    let instances: Vec<(BBox2D, f64)> = poses
        .iter()
        .filter_map(|p| mesh_bbox_2d(mesh, p, cam).map(|bb| (bb, mesh_depth(mesh, p, cam))))
        .collect();
    let mut out = Vec::new();
    for (k, obj) in objects.iter().enumerate() {
        let Some(obj_bb) = project_box_2d(obj, cam) else {
            continue;
        };
        let d_k = object_depth(obj, cam);
        let occludes = instances
            .iter()
            .any(|(mesh_bb, d_mesh)| overlap_2d(mesh_bb, &obj_bb) > 0.0 && d_k < *d_mesh);
        if occludes {
            out.push(k);
        }
    }
    out
}

/// Carve the segmentation masks of all occluding objects out of the render's
/// soft mask: `mask <- mask * prod_k (1 - M_k)`. The masks are constants on
/// the tape; gradients keep flowing through the surviving mask pixels.
#[allow(clippy::too_many_arguments)]
pub fn apply_occlusion<'t>(
    tape: &'t Tape,
    render: RenderOutput<'t>,
    mesh: &Mesh,
    poses: &[MeshPose],
    objects: &[BBox3D],
    raw: &Array,
    cam: &CameraModel,
    seg: &dyn SegmentationProvider,
    scene_id: u64,
    camera_index: usize,
) -> Result<RenderOutput<'t>> {
    let occluders = occluder_set(mesh, poses, objects, cam);
    if occluders.is_empty() {
        return Ok(render);
    }
    let (h, w) = (cam.height, cam.width);
    let mut keep = Array::full(&[1, h, w], 1.0);
    for k in occluders {
        let prompt = project_box_2d(&objects[k], cam).expect("occluder must project");
        let m = seg.segment(SegKey { scene_id, camera: camera_index, object: k }, raw, &prompt)?;
        assert_eq!(m.shape, vec![h, w], "segmentation mask shape mismatch");
        for (dst, &src) in keep.data.iter_mut().zip(m.data.iter()) {
            *dst *= 1.0 - src;
        }
    }
    let keep_const = tape.constant(keep);
    Ok(RenderOutput { rgb: render.rgb, mask: render.mask.mul(keep_const) })
}

/// Alpha-blend the rendered mesh over the raw image:
/// `adv = rgb * mask + (1 - mask) * raw`. Differentiable in the render; the
/// raw image is a constant.
pub fn composite<'t>(tape: &'t Tape, render: &RenderOutput<'t>, raw: &Array) -> Var<'t> {
    let rgb_shape = render.rgb.shape();
    assert_eq!(
        raw.shape, rgb_shape,
        "composite: raw image {:?} does not match render {:?}",
        raw.shape, rgb_shape
    );
    let raw_c = tape.constant(raw.clone());
    let one = tape.constant(Array::scalar(1.0));
    let inv = one.sub(render.mask);
    render.rgb.mul(render.mask).add(inv.mul(raw_c))
}
