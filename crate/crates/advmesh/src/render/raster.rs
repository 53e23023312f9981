//! The soft rasterization tape op.
//!
//! Forward, per pixel p and candidate face f (faces whose padded 2-D bbox
//! covers p):
//!
//! - coverage: `cov_f(p) = sigmoid(sign * d^2(p, f) / gamma)` where d is the
//!   distance from p to the nearest edge of the projected triangle and sign
//!   is +1 inside / -1 outside;
//! - silhouette: `mask(p) = 1 - prod_f (1 - cov_f(p))`;
//! - depth weights among faces: `w_f(p) = cov_f * exp(-zbar_f / sigma_z)`,
//!   normalized over the candidates (zbar is the face's mean camera depth;
//!   the exponent is shifted by the per-pixel minimum, which leaves the
//!   normalized weights and their derivatives unchanged);
//! - color: barycentric interpolation of the three vertex colors inside the
//!   triangle, closest-edge interpolation outside;
//! - `rgb(p) = sum_f w_f(p) * color_f(p)`.
//!
//! The backward pass recomputes the same candidate walk and pushes adjoints
//! to the projected vertex coordinates, per-vertex depths, and texture.
//! Inside/outside decisions, the closest-edge choice, and the candidate set
//! are hard branches held constant during differentiation.

use std::rc::Rc;

use crate::autodiff::{Array, ArrayView, CustomOp};

/// Coverage below this is treated as an excluded candidate.
const COV_CUT: f64 = 1e-12;
/// A (1 - cov) factor below this counts as an exact zero in the mask product.
const PROD_EPS: f64 = 1e-12;
/// Softens the weight normalization at pixels with no coverage.
const TINY: f64 = 1e-30;

pub(crate) struct SoftRasterOp {
    pub h: usize,
    pub w: usize,
    /// Faces with every vertex in front of the near plane.
    pub faces: Vec<[u32; 3]>,
    pub gamma: f64,
    pub sigma_z: f64,
    /// Candidate bbox padding in pixels.
    pub pad: f64,
}

#[derive(Clone, Copy)]
struct Tri2 {
    ax: f64,
    ay: f64,
    bx: f64,
    by: f64,
    cx: f64,
    cy: f64,
}

impl Tri2 {
    fn pt(&self, i: usize) -> (f64, f64) {
        match i {
            0 => (self.ax, self.ay),
            1 => (self.bx, self.by),
            _ => (self.cx, self.cy),
        }
    }
}

/// Edge e connects local vertices EDGE_VERTS[e].
const EDGE_VERTS: [(usize, usize); 3] = [(0, 1), (1, 2), (2, 0)];

#[derive(Clone, Copy)]
struct EdgeHit {
    edge: usize,
    /// Unclamped projection parameter; clamped to [0,1] for the closest point.
    t_raw: f64,
    t: f64,
    cpx: f64,
    cpy: f64,
    d2: f64,
}

fn closest_edge(px: f64, py: f64, tri: &Tri2) -> EdgeHit {
    let mut best = EdgeHit { edge: 0, t_raw: 0.0, t: 0.0, cpx: 0.0, cpy: 0.0, d2: f64::INFINITY };
    for (e, &(i0, i1)) in EDGE_VERTS.iter().enumerate() {
        let (ux, uy) = tri.pt(i0);
        let (vx, vy) = tri.pt(i1);
        let dvx = vx - ux;
        let dvy = vy - uy;
        let l2 = dvx * dvx + dvy * dvy;
        let t_raw = if l2 < 1e-24 { 0.0 } else { ((px - ux) * dvx + (py - uy) * dvy) / l2 };
        let t = t_raw.clamp(0.0, 1.0);
        let cpx = ux + t * dvx;
        let cpy = uy + t * dvy;
        let dx = px - cpx;
        let dy = py - cpy;
        let d2 = dx * dx + dy * dy;
        if d2 < best.d2 {
            best = EdgeHit { edge: e, t_raw, t, cpx, cpy, d2 };
        }
    }
    best
}

fn inside_tri(px: f64, py: f64, tri: &Tri2) -> bool {
    let e1 = (tri.bx - tri.ax) * (py - tri.ay) - (tri.by - tri.ay) * (px - tri.ax);
    let e2 = (tri.cx - tri.bx) * (py - tri.by) - (tri.cy - tri.by) * (px - tri.bx);
    let e3 = (tri.ax - tri.cx) * (py - tri.cy) - (tri.ay - tri.cy) * (px - tri.cx);
    (e1 >= 0.0 && e2 >= 0.0 && e3 >= 0.0) || (e1 <= 0.0 && e2 <= 0.0 && e3 <= 0.0)
}

/// Barycentric coordinates and the shared denominator; None when degenerate.
fn bary(px: f64, py: f64, tri: &Tri2) -> Option<(f64, f64, f64, f64)> {
    let d = (tri.by - tri.cy) * (tri.ax - tri.cx) + (tri.cx - tri.bx) * (tri.ay - tri.cy);
    if d.abs() < 1e-12 {
        return None;
    }
    let l1 = ((tri.by - tri.cy) * (px - tri.cx) + (tri.cx - tri.bx) * (py - tri.cy)) / d;
    let l2 = ((tri.cy - tri.ay) * (px - tri.cx) + (tri.ax - tri.cx) * (py - tri.cy)) / d;
    Some((l1, l2, 1.0 - l1 - l2, d))
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

struct FaceRec {
    face: [u32; 3],
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    zbar: f64,
}

#[derive(Clone, Copy)]
struct Pair {
    pix: u32,
    cov: f64,
    e: f64,
}

struct Pass {
    recs: Vec<FaceRec>,
    /// Pair index range per rec.
    ranges: Vec<(usize, usize)>,
    pairs: Vec<Pair>,
    s_acc: Vec<f64>,
    pnz: Vec<f64>,
    zero_count: Vec<u32>,
}

impl SoftRasterOp {
    fn face_recs(&self, px: &[f64], py: &[f64], z: &[f64]) -> Vec<FaceRec> {
        let mut recs = Vec::with_capacity(self.faces.len());
        for f in &self.faces {
            let (i0, i1, i2) = (f[0] as usize, f[1] as usize, f[2] as usize);
            let xs = [px[i0], px[i1], px[i2]];
            let ys = [py[i0], py[i1], py[i2]];
            let x_lo = xs.iter().fold(f64::INFINITY, |a, &b| a.min(b)) - self.pad;
            let x_hi = xs.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)) + self.pad;
            let y_lo = ys.iter().fold(f64::INFINITY, |a, &b| a.min(b)) - self.pad;
            let y_hi = ys.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)) + self.pad;
            if !(x_lo.is_finite() && x_hi.is_finite() && y_lo.is_finite() && y_hi.is_finite()) {
                continue;
            }
            // pixel p covers centers at (col + 0.5): center in [lo, hi] -> col in [lo-0.5, hi-0.5]
            let x0 = (x_lo - 0.5).ceil().max(0.0) as usize;
            let x1 = (((x_hi - 0.5).floor() + 1.0).max(0.0) as usize).min(self.w);
            let y0 = (y_lo - 0.5).ceil().max(0.0) as usize;
            let y1 = (((y_hi - 0.5).floor() + 1.0).max(0.0) as usize).min(self.h);
            if x0 >= x1 || y0 >= y1 {
                continue;
            }
            let zbar = (z[i0] + z[i1] + z[i2]) / 3.0;
            recs.push(FaceRec { face: *f, x0, x1, y0, y1, zbar });
        }
        recs
    }

    fn run_pass(&self, px: &[f64], py: &[f64], z: &[f64]) -> Pass {
        let hw = self.h * self.w;
        let recs = self.face_recs(px, py, z);
        let mut zref = vec![f64::INFINITY; hw];
        for rec in &recs {
            for yy in rec.y0..rec.y1 {
                for xx in rec.x0..rec.x1 {
                    let idx = yy * self.w + xx;
                    if rec.zbar < zref[idx] {
                        zref[idx] = rec.zbar;
                    }
                }
            }
        }
        let mut s_acc = vec![0.0; hw];
        let mut pnz = vec![1.0; hw];
        let mut zero_count = vec![0u32; hw];
        let mut pairs: Vec<Pair> = Vec::new();
        let mut ranges = Vec::with_capacity(recs.len());
        for rec in &recs {
            let start = pairs.len();
            let tri = tri_of(rec, px, py);
            for yy in rec.y0..rec.y1 {
                let pcy = yy as f64 + 0.5;
                for xx in rec.x0..rec.x1 {
                    let pcx = xx as f64 + 0.5;
                    let hit = closest_edge(pcx, pcy, &tri);
                    let ins = inside_tri(pcx, pcy, &tri);
                    let sgn = if ins { 1.0 } else { -1.0 };
                    let cov = sigmoid(sgn * hit.d2 / self.gamma);
                    if cov < COV_CUT {
                        continue;
                    }
                    let idx = yy * self.w + xx;
                    let e = (-(rec.zbar - zref[idx]) / self.sigma_z).exp();
                    s_acc[idx] += cov * e;
                    if 1.0 - cov < PROD_EPS {
                        zero_count[idx] += 1;
                    } else {
                        pnz[idx] *= 1.0 - cov;
                    }
                    pairs.push(Pair { pix: idx as u32, cov, e });
                }
            }
            ranges.push((start, pairs.len()));
        }
        Pass { recs, ranges, pairs, s_acc, pnz, zero_count }
    }
}

fn tri_of(rec: &FaceRec, px: &[f64], py: &[f64]) -> Tri2 {
    let (i0, i1, i2) = (rec.face[0] as usize, rec.face[1] as usize, rec.face[2] as usize);
    Tri2 { ax: px[i0], ay: py[i0], bx: px[i1], by: py[i1], cx: px[i2], cy: py[i2] }
}

fn tex_of(tex: &[f64], v: usize) -> [f64; 3] {
    [tex[3 * v], tex[3 * v + 1], tex[3 * v + 2]]
}

/// Color of face `rec` at the pixel, with the interpolation mode used by both
/// forward and backward: barycentric inside, closest-edge lerp outside (or
/// when the projection is degenerate).
enum ColorMode {
    Bary(f64, f64, f64, f64),
    Edge(EdgeHit),
}

fn color_mode(pcx: f64, pcy: f64, tri: &Tri2) -> ColorMode {
    if inside_tri(pcx, pcy, tri) {
        if let Some((l1, l2, l3, d)) = bary(pcx, pcy, tri) {
            return ColorMode::Bary(l1, l2, l3, d);
        }
    }
    ColorMode::Edge(closest_edge(pcx, pcy, tri))
}

fn color_of(mode: &ColorMode, rec: &FaceRec, tex: &[f64]) -> [f64; 3] {
    let t0 = tex_of(tex, rec.face[0] as usize);
    let t1 = tex_of(tex, rec.face[1] as usize);
    let t2 = tex_of(tex, rec.face[2] as usize);
    match mode {
        ColorMode::Bary(l1, l2, l3, _) => [
            l1 * t0[0] + l2 * t1[0] + l3 * t2[0],
            l1 * t0[1] + l2 * t1[1] + l3 * t2[1],
            l1 * t0[2] + l2 * t1[2] + l3 * t2[2],
        ],
        ColorMode::Edge(hit) => {
            let (u, v) = EDGE_VERTS[hit.edge];
            let tu = tex_of(tex, rec.face[u] as usize);
            let tv = tex_of(tex, rec.face[v] as usize);
            [
                (1.0 - hit.t) * tu[0] + hit.t * tv[0],
                (1.0 - hit.t) * tu[1] + hit.t * tv[1],
                (1.0 - hit.t) * tu[2] + hit.t * tv[2],
            ]
        }
    }
}

impl CustomOp for SoftRasterOp {
    fn name(&self) -> &'static str {
        "soft_raster"
    }

    fn forward(&self, inputs: &[ArrayView]) -> Array {
        let (px, _) = inputs[0];
        let (py, _) = inputs[1];
        let (z, _) = inputs[2];
        let (tex, _) = inputs[3];
        let hw = self.h * self.w;
        let pass = self.run_pass(px, py, z);
        let mut out = vec![0.0; 4 * hw];
        for (rec, &(p0, p1)) in pass.recs.iter().zip(pass.ranges.iter()) {
            let tri = tri_of(rec, px, py);
            for pair in &pass.pairs[p0..p1] {
                let idx = pair.pix as usize;
                let pcx = (idx % self.w) as f64 + 0.5;
                let pcy = (idx / self.w) as f64 + 0.5;
                let wgt = pair.cov * pair.e / (pass.s_acc[idx] + TINY);
                let mode = color_mode(pcx, pcy, &tri);
                let col = color_of(&mode, rec, tex);
                for c in 0..3 {
                    out[c * hw + idx] += wgt * col[c];
                }
            }
        }
        for idx in 0..hw {
            let prod = if pass.zero_count[idx] > 0 { 0.0 } else { pass.pnz[idx] };
            out[3 * hw + idx] = 1.0 - prod;
        }
        Array::from_vec(&[4, self.h, self.w], out)
    }

    fn backward(
        &self,
        inputs: &[ArrayView],
        _out_value: &[f64],
        out_grad: &[f64],
        input_grads: &mut [Option<Vec<f64>>],
    ) {
        let (px, _) = inputs[0];
        let (py, _) = inputs[1];
        let (z, _) = inputs[2];
        let (tex, _) = inputs[3];
        let hw = self.h * self.w;
        let pass = self.run_pass(px, py, z);

        // per-pixel softmax correction term: sum_f (dL/dw_f) w_f
        let mut dot_g = vec![0.0; hw];
        for (rec, &(p0, p1)) in pass.recs.iter().zip(pass.ranges.iter()) {
            let tri = tri_of(rec, px, py);
            for pair in &pass.pairs[p0..p1] {
                let idx = pair.pix as usize;
                let pcx = (idx % self.w) as f64 + 0.5;
                let pcy = (idx / self.w) as f64 + 0.5;
                let wgt = pair.cov * pair.e / (pass.s_acc[idx] + TINY);
                let mode = color_mode(pcx, pcy, &tri);
                let col = color_of(&mode, rec, tex);
                let dldw = (0..3).map(|c| out_grad[c * hw + idx] * col[c]).sum::<f64>();
                dot_g[idx] += dldw * wgt;
            }
        }

        let mut dpx = vec![0.0; px.len()];
        let mut dpy = vec![0.0; py.len()];
        let mut dz = vec![0.0; z.len()];
        let mut dtex = vec![0.0; tex.len()];

        for (rec, &(p0, p1)) in pass.recs.iter().zip(pass.ranges.iter()) {
            let tri = tri_of(rec, px, py);
            let fidx = [rec.face[0] as usize, rec.face[1] as usize, rec.face[2] as usize];
            for pair in &pass.pairs[p0..p1] {
                let idx = pair.pix as usize;
                let pcx = (idx % self.w) as f64 + 0.5;
                let pcy = (idx / self.w) as f64 + 0.5;
                let s = pass.s_acc[idx] + TINY;
                let wgt = pair.cov * pair.e / s;
                let mode = color_mode(pcx, pcy, &tri);
                let col = color_of(&mode, rec, tex);
                let g_rgb = [out_grad[idx], out_grad[hw + idx], out_grad[2 * hw + idx]];
                let g_mask = out_grad[3 * hw + idx];

                let dldw = g_rgb[0] * col[0] + g_rgb[1] * col[1] + g_rgb[2] * col[2];
                let dw = (dldw - dot_g[idx]) / s;
                let mut dcov = dw * pair.e;
                let dle = dw * pair.cov;
                // e = exp(-(zbar - zref)/sigma); zref shift cancels in w
                let dzbar = -dle * pair.e / self.sigma_z;
                for &fi in &fidx {
                    dz[fi] += dzbar / 3.0;
                }

                // mask = 1 - prod(1 - cov): d mask / d cov_f = prod_{g != f}(1 - cov_g)
                let pexcl = if pass.zero_count[idx] == 0 {
                    pass.pnz[idx] / (1.0 - pair.cov)
                } else if pass.zero_count[idx] == 1 && 1.0 - pair.cov < PROD_EPS {
                    pass.pnz[idx]
                } else {
                    0.0
                };
                dcov += g_mask * pexcl;

                // cov = sigmoid(sign * d2 / gamma)
                let hit = closest_edge(pcx, pcy, &tri);
                let ins = inside_tri(pcx, pcy, &tri);
                let sgn = if ins { 1.0 } else { -1.0 };
                let dd2 = dcov * pair.cov * (1.0 - pair.cov) * sgn / self.gamma;
                // d2 partials through the closest point on the argmin edge
                let (u, v) = EDGE_VERTS[hit.edge];
                let gpx = pcx - hit.cpx;
                let gpy = pcy - hit.cpy;
                if hit.t_raw <= 0.0 {
                    dpx[fidx[u]] += dd2 * (-2.0 * gpx);
                    dpy[fidx[u]] += dd2 * (-2.0 * gpy);
                } else if hit.t_raw >= 1.0 {
                    dpx[fidx[v]] += dd2 * (-2.0 * gpx);
                    dpy[fidx[v]] += dd2 * (-2.0 * gpy);
                } else {
                    dpx[fidx[u]] += dd2 * (-2.0 * (1.0 - hit.t) * gpx);
                    dpy[fidx[u]] += dd2 * (-2.0 * (1.0 - hit.t) * gpy);
                    dpx[fidx[v]] += dd2 * (-2.0 * hit.t * gpx);
                    dpy[fidx[v]] += dd2 * (-2.0 * hit.t * gpy);
                }

                // color backward
                let dcol = [wgt * g_rgb[0], wgt * g_rgb[1], wgt * g_rgb[2]];
                match mode {
                    ColorMode::Bary(l1, l2, l3, d) => {
                        let t0 = tex_of(tex, fidx[0]);
                        let t1 = tex_of(tex, fidx[1]);
                        let t2 = tex_of(tex, fidx[2]);
                        for c in 0..3 {
                            dtex[3 * fidx[0] + c] += l1 * dcol[c];
                            dtex[3 * fidx[1] + c] += l2 * dcol[c];
                            dtex[3 * fidx[2] + c] += l3 * dcol[c];
                        }
                        let dl1: f64 = (0..3).map(|c| dcol[c] * t0[c]).sum();
                        let dl2: f64 = (0..3).map(|c| dcol[c] * t1[c]).sum();
                        let dl3: f64 = (0..3).map(|c| dcol[c] * t2[c]).sum();
                        // lambda1 = N1/D, lambda2 = N2/D, lambda3 = 1 - l1 - l2
                        let dn1 = (dl1 - dl3) / d;
                        let dn2 = (dl2 - dl3) / d;
                        let dd = -(l1 * (dl1 - dl3) + l2 * (dl2 - dl3)) / d;
                        let (ax, ay, bx, by, cx, cy) = (tri.ax, tri.ay, tri.bx, tri.by, tri.cx, tri.cy);
                        // N1 = (by-cy)(p.x-cx) + (cx-bx)(p.y-cy)
                        dpx[fidx[1]] += dn1 * -(pcy - cy);
                        dpy[fidx[1]] += dn1 * (pcx - cx);
                        dpx[fidx[2]] += dn1 * ((pcy - cy) - (by - cy));
                        dpy[fidx[2]] += dn1 * (-(pcx - cx) - (cx - bx));
                        // N2 = (cy-ay)(p.x-cx) + (ax-cx)(p.y-cy)
                        dpx[fidx[0]] += dn2 * (pcy - cy);
                        dpy[fidx[0]] += dn2 * -(pcx - cx);
                        dpx[fidx[2]] += dn2 * (-(cy - ay) - (pcy - cy));
                        dpy[fidx[2]] += dn2 * ((pcx - cx) - (ax - cx));
                        // D = (by-cy)(ax-cx) + (cx-bx)(ay-cy)
                        dpx[fidx[0]] += dd * (by - cy);
                        dpy[fidx[0]] += dd * (cx - bx);
                        dpx[fidx[1]] += dd * -(ay - cy);
                        dpy[fidx[1]] += dd * (ax - cx);
                        dpx[fidx[2]] += dd * ((ay - cy) - (by - cy));
                        dpy[fidx[2]] += dd * (-(ax - cx) - (cx - bx));
                    }
                    ColorMode::Edge(hit) => {
                        let (u, v) = EDGE_VERTS[hit.edge];
                        let tu = tex_of(tex, fidx[u]);
                        let tv = tex_of(tex, fidx[v]);
                        for c in 0..3 {
                            dtex[3 * fidx[u] + c] += (1.0 - hit.t) * dcol[c];
                            dtex[3 * fidx[v] + c] += hit.t * dcol[c];
                        }
                        if hit.t_raw > 0.0 && hit.t_raw < 1.0 {
                            let dt: f64 = (0..3).map(|c| dcol[c] * (tv[c] - tu[c])).sum();
                            let (ux, uy) = tri.pt(u);
                            let (vx, vy) = tri.pt(v);
                            let dvx = vx - ux;
                            let dvy = vy - uy;
                            let l2 = dvx * dvx + dvy * dvy;
                            if l2 > 1e-24 {
                                let pux = pcx - ux;
                                let puy = pcy - uy;
                                let t = hit.t;
                                dpx[fidx[u]] += dt * (-dvx - pux + 2.0 * t * dvx) / l2;
                                dpy[fidx[u]] += dt * (-dvy - puy + 2.0 * t * dvy) / l2;
                                dpx[fidx[v]] += dt * (pux - 2.0 * t * dvx) / l2;
                                dpy[fidx[v]] += dt * (puy - 2.0 * t * dvy) / l2;
                            }
                        }
                    }
                }
            }
        }

        if let Some(g) = input_grads[0].as_mut() {
            g.copy_from_slice(&dpx);
        }
        if let Some(g) = input_grads[1].as_mut() {
            g.copy_from_slice(&dpy);
        }
        if let Some(g) = input_grads[2].as_mut() {
            g.copy_from_slice(&dz);
        }
        if let Some(g) = input_grads[3].as_mut() {
            g.copy_from_slice(&dtex);
        }
    }
}

pub(crate) fn make_op(h: usize, w: usize, faces: Vec<[u32; 3]>, gamma: f64, sigma_z: f64, pad_sigmas: f64) -> Rc<SoftRasterOp> {
    Rc::new(SoftRasterOp { h, w, faces, gamma, sigma_z, pad: pad_sigmas * gamma.sqrt() })
}
