//! Oriented 3-D boxes, pinhole camera models, and the transforms between
//! ego, camera, and pixel space.
//!
//! Conventions, fixed once for the whole crate:
//! - Ego frame: x forward, y left, z up, origin at the ego vehicle, meters.
//! - Camera frame: x right, y down, z forward (optical axis).
//! - Extrinsics map ego to camera: `p_cam = R * p_ego + T`.
//! - Pixels: origin at the top-left image corner, `px` right, `py` down;
//!   `px = fx * x / z + cx`, `py = fy * y / z + cy`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

pub fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

pub fn mat_transpose(m: &Mat3) -> Mat3 {
    [
        [m[0][0], m[1][0], m[2][0]],
        [m[0][1], m[1][1], m[2][1]],
        [m[0][2], m[1][2], m[2][2]],
    ]
}

pub fn mat_det(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Active rotation by `theta` about +z.
pub fn rot_z(theta: f64) -> Mat3 {
    let (s, c) = theta.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

pub fn vec_add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn vec_sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn vec_scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn vec_dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn vec_norm(a: Vec3) -> f64 {
    vec_dot(a, a).sqrt()
}

/// Object categories of the synthetic benchmark. Pedestrian and barrier are
/// proxy classes so scene-level metrics have non-vehicle categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Vehicle,
    Pedestrian,
    Barrier,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Vehicle, Category::Pedestrian, Category::Barrier];

    pub fn index(self) -> usize {
        match self {
            Category::Vehicle => 0,
            Category::Pedestrian => 1,
            Category::Barrier => 2,
        }
    }
}

/// Oriented 3-D bounding box: center (x,y,z), size (l,w,h), yaw about +z.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox3D {
    pub center: Vec3,
    pub size: Vec3,
    pub yaw: f64,
    pub category: Category,
}

/// Normalize an angle to (-pi, pi].
pub fn normalize_angle(a: f64) -> f64 {
    let mut a = a % (2.0 * std::f64::consts::PI);
    if a <= -std::f64::consts::PI {
        a += 2.0 * std::f64::consts::PI;
    } else if a > std::f64::consts::PI {
        a -= 2.0 * std::f64::consts::PI;
    }
    a
}

impl BBox3D {
    pub fn new(center: Vec3, size: Vec3, yaw: f64, category: Category) -> Self {
        assert!(
            size[0] > 0.0 && size[1] > 0.0 && size[2] > 0.0,
            "BBox3D: sizes must be positive, got {:?}",
            size
        );
        BBox3D { center, size, yaw: normalize_angle(yaw), category }
    }

    pub fn volume(&self) -> f64 {
        self.size[0] * self.size[1] * self.size[2]
    }

    /// The eight corners in ego frame.
    ///
    /// Corner index is a 3-bit code `(l_bit << 2) | (w_bit << 1) | h_bit`
    /// over the signs of the local offsets before yaw rotation:
    /// - `l_bit`: 0 -> -l/2 (rear),  1 -> +l/2 (front)
    /// - `w_bit`: 0 -> +w/2,         1 -> -w/2
    /// - `h_bit`: 0 -> -h/2 (bottom), 1 -> +h/2 (top)
    ///
    /// Corner 0 is therefore the rear-right-bottom corner used as the default
    /// mesh placement anchor.
    pub fn corners(&self) -> [Vec3; 8] {
        let (l, w, h) = (self.size[0], self.size[1], self.size[2]);
        let (s, c) = self.yaw.sin_cos();
        let mut out = [[0.0; 3]; 8];
        for (idx, corner) in out.iter_mut().enumerate() {
            let dl = if idx & 4 == 0 { -l / 2.0 } else { l / 2.0 };
            let dw = if idx & 2 == 0 { w / 2.0 } else { -w / 2.0 };
            let dh = if idx & 1 == 0 { -h / 2.0 } else { h / 2.0 };
            *corner = [
                self.center[0] + dl * c - dw * s,
                self.center[1] + dl * s + dw * c,
                self.center[2] + dh,
            ];
        }
        out
    }

    /// Ground-plane footprint corners (x, y), counter-clockwise.
    pub fn footprint(&self) -> [[f64; 2]; 4] {
        let (l, w) = (self.size[0], self.size[1]);
        let (s, c) = self.yaw.sin_cos();
        let local = [[l / 2.0, w / 2.0], [-l / 2.0, w / 2.0], [-l / 2.0, -w / 2.0], [l / 2.0, -w / 2.0]];
        let mut out = [[0.0; 2]; 4];
        for (o, p) in out.iter_mut().zip(local.iter()) {
            *o = [self.center[0] + p[0] * c - p[1] * s, self.center[1] + p[0] * s + p[1] * c];
        }
        out
    }

    pub fn z_interval(&self) -> (f64, f64) {
        (self.center[2] - self.size[2] / 2.0, self.center[2] + self.size[2] / 2.0)
    }

    /// True if the ego-frame point lies strictly inside the box. A 1e-9
    /// interior margin keeps tangent points (exactly on a face) from being
    /// classified as inside by floating-point noise.
    pub fn contains(&self, p: Vec3) -> bool {
        const MARGIN: f64 = 1e-9;
        let d = vec_sub(p, self.center);
        let (s, c) = self.yaw.sin_cos();
        // rotate into the box frame
        let lx = d[0] * c + d[1] * s;
        let ly = -d[0] * s + d[1] * c;
        lx.abs() < self.size[0] / 2.0 - MARGIN
            && ly.abs() < self.size[1] / 2.0 - MARGIN
            && d[2].abs() < self.size[2] / 2.0 - MARGIN
    }
}

/// Eight ego-frame corners; see [`BBox3D::corners`] for the index convention.
pub fn box_corners(b: &BBox3D) -> [Vec3; 8] {
    b.corners()
}

/// Axis-aligned 2-D pixel box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox2D {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox2D {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        assert!(x_min <= x_max && y_min <= y_max, "BBox2D: degenerate bounds ({x_min},{y_min})-({x_max},{y_max})");
        BBox2D { x_min, y_min, x_max, y_max }
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min) * (self.y_max - self.y_min)
    }
}

/// Area of the intersection rectangle; zero iff disjoint or touching.
pub fn overlap_2d(a: &BBox2D, b: &BBox2D) -> f64 {
    let w = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let h = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    w * h
}

/// Pinhole camera: intrinsics K and extrinsics (R, T) mapping ego to camera.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub k: Mat3,
    pub r: Mat3,
    pub t: Vec3,
    pub width: usize,
    pub height: usize,
}

impl CameraModel {
    pub fn new(k: Mat3, r: Mat3, t: Vec3, width: usize, height: usize) -> Self {
        let cam = CameraModel { k, r, t, width, height };
        cam.validate().expect("invalid camera model");
        cam
    }

    pub fn fx(&self) -> f64 {
        self.k[0][0]
    }
    pub fn fy(&self) -> f64 {
        self.k[1][1]
    }
    pub fn cx(&self) -> f64 {
        self.k[0][2]
    }
    pub fn cy(&self) -> f64 {
        self.k[1][2]
    }

    pub fn validate(&self) -> Result<(), String> {
        let rt = mat_transpose(&self.r);
        for i in 0..3 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..3 {
                    s += self.r[i][k] * rt[k][j];
                }
                let expect = if i == j { 1.0 } else { 0.0 };
                if (s - expect).abs() > 1e-9 {
                    return Err(format!("rotation not orthonormal at ({i},{j}): {s}"));
                }
            }
        }
        if (mat_det(&self.r) - 1.0).abs() > 1e-9 {
            return Err(format!("rotation determinant {} != 1", mat_det(&self.r)));
        }
        if self.fx() <= 0.0 || self.fy() <= 0.0 {
            return Err(format!("non-positive focal length fx={} fy={}", self.fx(), self.fy()));
        }
        if self.cx() <= 0.0 || self.cx() >= self.width as f64 || self.cy() <= 0.0 || self.cy() >= self.height as f64 {
            return Err(format!(
                "principal point ({}, {}) outside image {}x{}",
                self.cx(),
                self.cy(),
                self.width,
                self.height
            ));
        }
        Ok(())
    }

    /// Camera center in ego frame: `-Rᵀ T`.
    pub fn center_ego(&self) -> Vec3 {
        let rt = mat_transpose(&self.r);
        vec_scale(mat_vec(&rt, self.t), -1.0)
    }
}

/// Ego-frame point into the camera frame.
pub fn ego_to_camera(p: Vec3, cam: &CameraModel) -> Vec3 {
    vec_add(mat_vec(&cam.r, p), cam.t)
}

/// Inverse of [`ego_to_camera`].
pub fn camera_to_ego(p: Vec3, cam: &CameraModel) -> Vec3 {
    mat_vec(&mat_transpose(&cam.r), vec_sub(p, cam.t))
}

/// Perspective projection of a camera-frame point. Points at or behind the
/// camera plane (z <= 0) are flagged as `None`; the caller decides to cull.
pub fn project(p_cam: Vec3, cam: &CameraModel) -> Option<(f64, f64, f64)> {
    let z = p_cam[2];
    if z <= 0.0 {
        return None;
    }
    let px = cam.fx() * p_cam[0] / z + cam.cx();
    let py = cam.fy() * p_cam[1] / z + cam.cy();
    Some((px, py, z))
}

/// Axis-aligned hull of the projected in-front corners, clipped to image
/// bounds. `None` if every corner is behind the camera. Behind-camera corners
/// are culled, not clamped.
pub fn project_box_2d(b: &BBox3D, cam: &CameraModel) -> Option<BBox2D> {
    let mut x_min = f64::INFINITY;
    let mut y_min = f64::INFINITY;
    let mut x_max = f64::NEG_INFINITY;
    let mut y_max = f64::NEG_INFINITY;
    let mut any = false;
    for corner in b.corners() {
        let p_cam = ego_to_camera(corner, cam);
        if let Some((px, py, _)) = project(p_cam, cam) {
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
    let w = cam.width as f64;
    let h = cam.height as f64;
    Some(BBox2D::new(
        x_min.clamp(0.0, w),
        y_min.clamp(0.0, h),
        x_max.clamp(0.0, w),
        y_max.clamp(0.0, h),
    ))
}

// --- rotated-box IoU --------------------------------------------------------

fn poly_area(poly: &[[f64; 2]]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..poly.len() {
        let j = (i + 1) % poly.len();
        s += poly[i][0] * poly[j][1] - poly[j][0] * poly[i][1];
    }
    s.abs() / 2.0
}

/// Sutherland-Hodgman clip of `subject` against one CCW half-plane
/// (the edge a->b keeps its left side).
fn clip_halfplane(subject: &[[f64; 2]], a: [f64; 2], b: [f64; 2]) -> Vec<[f64; 2]> {
    let inside = |p: [f64; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) >= 0.0;
    let mut out = Vec::with_capacity(subject.len() + 2);
    for i in 0..subject.len() {
        let cur = subject[i];
        let prev = subject[(i + subject.len() - 1) % subject.len()];
        let cur_in = inside(cur);
        let prev_in = inside(prev);
        if cur_in != prev_in {
            let dx = cur[0] - prev[0];
            let dy = cur[1] - prev[1];
            let denom = (b[0] - a[0]) * dy - (b[1] - a[1]) * dx;
            if denom.abs() > 1e-300 {
                let t = ((b[0] - a[0]) * (a[1] - prev[1]) - (b[1] - a[1]) * (a[0] - prev[0])) / denom;
                out.push([prev[0] + t * dx, prev[1] + t * dy]);
            }
        }
        if cur_in {
            out.push(cur);
        }
    }
    out
}

fn convex_intersection_area(subject: &[[f64; 2]; 4], clipper: &[[f64; 2]; 4]) -> f64 {
    let mut poly: Vec<[f64; 2]> = subject.to_vec();
    for i in 0..4 {
        if poly.is_empty() {
            return 0.0;
        }
        poly = clip_halfplane(&poly, clipper[i], clipper[(i + 1) % 4]);
    }
    poly_area(&poly)
}

/// 3-D IoU of two yaw-rotated boxes: rotated-rectangle intersection in the
/// ground plane times the z-extent overlap. Symmetric in its arguments.
pub fn iou_bev(a: &BBox3D, b: &BBox3D) -> f64 {
    // canonical argument order makes the result bit-exactly symmetric
    let key = |x: &BBox3D| {
        (x.center[0], x.center[1], x.center[2], x.size[0], x.size[1], x.size[2], x.yaw)
    };
    let (first, second) = if key(a) <= key(b) { (a, b) } else { (b, a) };
    let inter_area = convex_intersection_area(&first.footprint(), &second.footprint());
    let (za0, za1) = first.z_interval();
    let (zb0, zb1) = second.z_interval();
    let z_overlap = (za1.min(zb1) - za0.max(zb0)).max(0.0);
    let inter_vol = inter_area * z_overlap;
    if inter_vol <= 0.0 {
        return 0.0;
    }
    let union = first.volume() + second.volume() - inter_vol;
    inter_vol / union
}

// --- differentiable projection ----------------------------------------------

/// Near-plane used when projecting on the tape; keeps the division finite for
/// behind-camera vertices, whose faces are culled downstream.
pub const PROJECT_NEAR: f64 = 0.05;

/// Tape-recorded rigid transform of ego-frame points (n,3) into the camera frame.
pub fn ego_to_camera_var<'t>(tape: &'t Tape, points: Var<'t>, cam: &CameraModel) -> Var<'t> {
    let rt = mat_transpose(&cam.r);
    let r_const = tape.constant(crate::autodiff::Array::from_vec(
        &[3, 3],
        rt.iter().flatten().copied().collect(),
    ));
    let t_const = tape.constant(crate::autodiff::Array::from_vec(&[3], cam.t.to_vec()));
    // row-vector convention: p_cam = p_ego * Rᵀ + T
    points.matmul(r_const).add(t_const)
}

/// Tape-recorded pinhole projection of camera-frame points (n,3).
///
/// Returns (px, py, z_clamped), each of shape (n,). The depth is clamped at
/// [`PROJECT_NEAR`] so behind-camera vertices stay finite; they receive zero
/// gradient through the clamp and must be culled by the caller.
pub fn project_var<'t>(_tape: &'t Tape, p_cam: Var<'t>, cam: &CameraModel) -> (Var<'t>, Var<'t>, Var<'t>) {
    let shape = p_cam.shape();
    assert!(shape.len() == 2 && shape[1] == 3, "project_var: expected (n,3), got {:?}", shape);
    let n = shape[0];
    let x = p_cam.slice(&[(0, n), (0, 1)]).reshape(&[n]);
    let y = p_cam.slice(&[(0, n), (1, 2)]).reshape(&[n]);
    let z = p_cam.slice(&[(0, n), (2, 3)]).reshape(&[n]);
    let z_safe = z.clamp(PROJECT_NEAR, f64::INFINITY);
    let px = x.div(z_safe).scale(cam.fx()).add_scalar(cam.cx());
    let py = y.div(z_safe).scale(cam.fy()).add_scalar(cam.cy());
    (px, py, z_safe)
}
