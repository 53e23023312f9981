//! Brute-force reference implementations used by the test suites.
//!
//! Everything here is deliberately slow and simple: nested loops, dense grid
//! sampling, supersampled point-in-triangle rasterization. None of it shares
//! code with the implementations it checks.

use crate::geometry::BBox3D;

/// Grid-sampling 3-D IoU: sample an `n^3` lattice over the union of both
/// axis-aligned hulls and count membership.
pub fn iou_grid_sample(a: &BBox3D, b: &BBox3D, n: usize) -> f64 {
    let hull = |bx: &BBox3D| {
        let cs = bx.corners();
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for c in cs {
            for k in 0..3 {
                lo[k] = lo[k].min(c[k]);
                hi[k] = hi[k].max(c[k]);
            }
        }
        (lo, hi)
    };
    let (la, ha) = hull(a);
    let (lb, hb) = hull(b);
    let lo = [la[0].min(lb[0]), la[1].min(lb[1]), la[2].min(lb[2])];
    let hi = [ha[0].max(hb[0]), ha[1].max(hb[1]), ha[2].max(hb[2])];
    let mut in_a = 0u64;
    let mut in_b = 0u64;
    let mut in_both = 0u64;
    for i in 0..n {
        let x = lo[0] + (i as f64 + 0.5) / n as f64 * (hi[0] - lo[0]);
        for j in 0..n {
            let y = lo[1] + (j as f64 + 0.5) / n as f64 * (hi[1] - lo[1]);
            for k in 0..n {
                let z = lo[2] + (k as f64 + 0.5) / n as f64 * (hi[2] - lo[2]);
                let pa = a.contains([x, y, z]);
                let pb = b.contains([x, y, z]);
                in_a += pa as u64;
                in_b += pb as u64;
                in_both += (pa && pb) as u64;
            }
        }
    }
    let union = in_a + in_b - in_both;
    if union == 0 {
        return 0.0;
    }
    in_both as f64 / union as f64
}

/// Nested-loop 2-D convolution: x (cin,h,w) * k (cout,cin,kh,kw).
pub fn conv2d_reference(
    x: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    k: &[f64],
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; cout * ho * wo];
    for co in 0..cout {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut s = 0.0;
                for ci in 0..cin {
                    for ki in 0..kh {
                        for kj in 0..kw {
                            let iy = (oy * stride + ki) as isize - pad as isize;
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                                continue;
                            }
                            s += x[(ci * h + iy as usize) * w + ix as usize]
                                * k[((co * cin + ci) * kh + ki) * kw + kj];
                        }
                    }
                }
                out[(co * ho + oy) * wo + ox] = s;
            }
        }
    }
    out
}

/// Point-in-triangle test in 2-D (inclusive of edges).
pub fn point_in_triangle(p: [f64; 2], a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> bool {
    let cross = |u: [f64; 2], v: [f64; 2], q: [f64; 2]| (v[0] - u[0]) * (q[1] - u[1]) - (v[1] - u[1]) * (q[0] - u[0]);
    let d1 = cross(a, b, p);
    let d2 = cross(b, c, p);
    let d3 = cross(c, a, p);
    let has_neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
    let has_pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
    !(has_neg && has_pos)
}

/// Hard silhouette at pixel centers: true where any triangle covers the center.
pub fn silhouette_mask(tris: &[[[f64; 2]; 3]], h: usize, w: usize) -> Vec<bool> {
    let mut out = vec![false; h * w];
    for tri in tris {
        let min_x = tri.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
        let max_x = (tri.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max).ceil().max(0.0) as usize).min(w);
        let min_y = tri.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
        let max_y = (tri.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max).ceil().max(0.0) as usize).min(h);
        for py in min_y..max_y {
            for px in min_x..max_x {
                let p = [px as f64 + 0.5, py as f64 + 0.5];
                if point_in_triangle(p, tri[0], tri[1], tri[2]) {
                    out[py * w + px] = true;
                }
            }
        }
    }
    out
}

/// One projected triangle for the supersampled z-buffer oracle.
#[derive(Debug, Clone, Copy)]
pub struct OwnedTri {
    /// Projected pixel coordinates of the three vertices.
    pub pts: [[f64; 2]; 3],
    /// Camera-space depth at each vertex (interpolated linearly in 2-D).
    pub z: [f64; 3],
    pub owner: i32,
}

/// Supersampled z-buffer: for each pixel, the owner whose triangles win the
/// depth test on a majority of `ss x ss` sub-samples (-1 where nothing hits).
pub fn zbuffer_owner(tris: &[OwnedTri], h: usize, w: usize, ss: usize) -> Vec<i32> {
    let mut owners = vec![-1i32; h * w];
    for py in 0..h {
        for px in 0..w {
            let mut votes: std::collections::BTreeMap<i32, usize> = Default::default();
            for sy in 0..ss {
                for sx in 0..ss {
                    let p = [
                        px as f64 + (sx as f64 + 0.5) / ss as f64,
                        py as f64 + (sy as f64 + 0.5) / ss as f64,
                    ];
                    let mut best_z = f64::INFINITY;
                    let mut best_owner = -1i32;
                    for tri in tris {
                        if let Some(z) = interp_depth(p, tri) {
                            if z < best_z {
                                best_z = z;
                                best_owner = tri.owner;
                            }
                        }
                    }
                    if best_owner >= 0 {
                        *votes.entry(best_owner).or_insert(0) += 1;
                    }
                }
            }
            let quorum = ss * ss / 2;
            if let Some((&own, &n)) = votes.iter().max_by_key(|(_, n)| **n) {
                if n > quorum {
                    owners[py * w + px] = own;
                }
            }
        }
    }
    owners
}

fn interp_depth(p: [f64; 2], tri: &OwnedTri) -> Option<f64> {
    let [a, b, c] = tri.pts;
    let d = (b[1] - c[1]) * (a[0] - c[0]) + (c[0] - b[0]) * (a[1] - c[1]);
    if d.abs() < 1e-12 {
        return None;
    }
    let l1 = ((b[1] - c[1]) * (p[0] - c[0]) + (c[0] - b[0]) * (p[1] - c[1])) / d;
    let l2 = ((c[1] - a[1]) * (p[0] - c[0]) + (a[0] - c[0]) * (p[1] - c[1])) / d;
    let l3 = 1.0 - l1 - l2;
    if l1 < 0.0 || l2 < 0.0 || l3 < 0.0 {
        return None;
    }
    Some(l1 * tri.z[0] + l2 * tri.z[1] + l3 * tri.z[2])
}

/// Central finite differences of a scalar function, one element at a time.
pub fn finite_diff<F: FnMut(&[f64]) -> f64>(x: &[f64], eps: f64, mut f: F) -> Vec<f64> {
    let mut probe = x.to_vec();
    let mut out = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let fp = f(&probe);
        probe[i] = orig - eps;
        let fm = f(&probe);
        probe[i] = orig;
        out[i] = (fp - fm) / (2.0 * eps);
    }
    out
}
