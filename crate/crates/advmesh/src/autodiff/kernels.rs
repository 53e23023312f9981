//! Dense kernels behind the tape ops: matrix multiplies and im2col-based
//! 2-D convolution. Loop orders chosen so the inner loops run over
//! contiguous slices and auto-vectorize.

use super::{ensure, Node, Op, Var};

/// C += A(m,k) · B(k,n). `out` must hold m*n elements.
pub fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

/// C += A(m,k) · B(n,k)ᵀ.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for kk in 0..k {
                s += arow[kk] * brow[kk];
            }
            out[i * n + j] += s;
        }
    }
}

/// C += A(k,m)ᵀ · B(k,n).
pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for kk in 0..k {
        let arow = &a[kk * m..(kk + 1) * m];
        let brow = &b[kk * n..(kk + 1) * n];
        for i in 0..m {
            let av = arow[i];
            if av == 0.0 {
                continue;
            }
            let crow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

/// Unfold (cin, h, w) into an (cin*kh*kw, ho*wo) patch matrix.
fn im2col(
    x: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let mut col = vec![0.0; cin * kh * kw * ho * wo];
    for ci in 0..cin {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ci * kh + ki) * kw + kj) * (ho * wo);
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    let dst = row + oy * wo;
                    // valid ox range so that ix = ox*stride + kj - pad is in [0, w)
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        col[dst + ox] = plane[iy * w + ix as usize];
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add the transpose of im2col: fold (cin*kh*kw, ho*wo) back onto dx.
fn col2im_add(
    col: &[f64],
    dx: &mut [f64],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) {
    for ci in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ci * kh + ki) * kw + kj) * (ho * wo);
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    let src = row + oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dx[(ci * h + iy) * w + ix as usize] += col[src + ox];
                    }
                }
            }
        }
    }
}

fn conv_check(x_shape: &[usize], k_shape: &[usize], stride: usize, pad: usize) {
    assert_eq!(x_shape.len(), 3, "conv2d: input must be (C,H,W), got {:?}", x_shape);
    assert_eq!(k_shape.len(), 4, "conv2d: kernel must be (Cout,Cin,kh,kw), got {:?}", k_shape);
    let (cin, h, w) = (x_shape[0], x_shape[1], x_shape[2]);
    let (kcin, kh, kw) = (k_shape[1], k_shape[2], k_shape[3]);
    assert!(h > 0 && w > 0 && kh > 0 && kw > 0, "conv2d: zero-size spatial dims in input {:?} / kernel {:?}", x_shape, k_shape);
    assert_eq!(cin, kcin, "conv2d: channel mismatch, input {:?} vs kernel {:?}", x_shape, k_shape);
    assert!(stride >= 1, "conv2d: stride must be >= 1");
    assert!(
        h + 2 * pad >= kh && w + 2 * pad >= kw,
        "conv2d: kernel {:?} larger than padded input {:?} (pad {})",
        k_shape,
        x_shape,
        pad
    );
}

pub(super) fn conv2d_forward<'t>(x: Var<'t>, kernel: Var<'t>, stride: usize, padding: usize) -> Var<'t> {
    let x_shape = x.shape();
    let k_shape = kernel.shape();
    conv_check(&x_shape, &k_shape, stride, padding);
    let (cin, h, w) = (x_shape[0], x_shape[1], x_shape[2]);
    let (cout, kh, kw) = (k_shape[0], k_shape[2], k_shape[3]);
    let ho = (h + 2 * padding - kh) / stride + 1;
    let wo = (w + 2 * padding - kw) / stride + 1;
    let value = {
        let xv = x.value();
        let kv = kernel.value();
        let col = im2col(&xv.data, cin, h, w, kh, kw, stride, padding, ho, wo);
        let mut out = vec![0.0; cout * ho * wo];
        matmul_nn(&kv.data, &col, cout, cin * kh * kw, ho * wo, &mut out);
        out
    };
    let tape = x.tape;
    let rg = tape.requires(x.id) || tape.requires(kernel.id);
    tape.push(vec![cout, ho, wo], value, rg, Op::Conv2d { x: x.id, k: kernel.id, stride, padding })
}

pub(super) fn conv2d_backward(
    nodes: &[Node],
    out: usize,
    x: usize,
    k: usize,
    stride: usize,
    padding: usize,
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
) {
    let x_shape = &nodes[x].shape;
    let k_shape = &nodes[k].shape;
    let (cin, h, w) = (x_shape[0], x_shape[1], x_shape[2]);
    let (cout, kh, kw) = (k_shape[0], k_shape[2], k_shape[3]);
    let (ho, wo) = (nodes[out].shape[1], nodes[out].shape[2]);
    let patch = cin * kh * kw;
    if nodes[k].requires_grad {
        // dK = G(cout, ho*wo) · colᵀ
        let col = im2col(&nodes[x].value, cin, h, w, kh, kw, stride, padding, ho, wo);
        let mut dk = vec![0.0; cout * patch];
        matmul_nt(g, &col, cout, ho * wo, patch, &mut dk);
        super::add_into(ensure(grads, k, cout * patch), &dk);
    }
    if nodes[x].requires_grad {
        // dCol = Kᵀ · G, then fold back
        let mut dcol = vec![0.0; patch * ho * wo];
        matmul_tn(&nodes[k].value, g, patch, cout, ho * wo, &mut dcol);
        let gx = ensure(grads, x, cin * h * w);
        col2im_add(&dcol, gx, cin, h, w, kh, kw, stride, padding, ho, wo);
    }
}

pub(super) fn max_pool2d_forward<'t>(x: Var<'t>, kernel: usize, stride: usize) -> Var<'t> {
    let shape = x.shape();
    assert_eq!(shape.len(), 3, "max_pool2d: input must be (C,H,W), got {:?}", shape);
    assert!(kernel >= 1 && stride >= 1, "max_pool2d: kernel and stride must be >= 1");
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    assert!(h >= kernel && w >= kernel, "max_pool2d: kernel {} larger than input {:?}", kernel, shape);
    let ho = (h - kernel) / stride + 1;
    let wo = (w - kernel) / stride + 1;
    let xv = x.value();
    let mut out = vec![0.0; c * ho * wo];
    let mut argmax = vec![0u32; c * ho * wo];
    for ci in 0..c {
        let plane = &xv.data[ci * h * w..(ci + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0usize;
                for ki in 0..kernel {
                    for kj in 0..kernel {
                        let iy = oy * stride + ki;
                        let ix = ox * stride + kj;
                        let v = plane[iy * w + ix];
                        if v > best {
                            best = v;
                            best_idx = iy * w + ix;
                        }
                    }
                }
                out[(ci * ho + oy) * wo + ox] = best;
                argmax[(ci * ho + oy) * wo + ox] = (ci * h * w + best_idx) as u32;
            }
        }
    }
    let tape = x.tape;
    let rg = tape.requires(x.id);
    tape.push(vec![c, ho, wo], out, rg, Op::MaxPool2d { x: x.id, argmax })
}
