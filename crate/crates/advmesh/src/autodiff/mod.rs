//! Reverse-mode automatic differentiation over dense n-dimensional f64 arrays.
//!
//! A [`Tape`] records every operation; [`Var`] is a copyable handle to a tape
//! node. Calling [`Tape::backward`] on a scalar root walks the tape in reverse
//! topological order and accumulates gradients into every reachable node that
//! requires them. Constants (raw images, segmentation masks, frozen detector
//! weights) enter as non-differentiable nodes and never receive gradients.
//!
//! Double precision throughout so finite-difference checks have headroom.

mod check;
mod kernels;

pub use check::grad_check;
pub use kernels::{matmul_nn, matmul_nt, matmul_tn};

use std::cell::RefCell;
use std::rc::Rc;

/// Dense row-major n-dimensional array of f64.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Array {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Array {
    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Array { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(n, data.len(), "shape {:?} does not match data length {}", shape, data.len());
        Array { shape: shape.to_vec(), data }
    }

    pub fn scalar(v: f64) -> Self {
        Array { shape: vec![], data: vec![v] }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n: usize = shape.iter().product();
        Array { shape: shape.to_vec(), data: vec![v; n] }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Value of a rank-0 or single-element array.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on array with {} elements", self.data.len());
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// View passed to custom ops: (data, shape).
pub type ArrayView<'a> = (&'a [f64], &'a [usize]);

/// An operation with hand-derived forward and adjoint, recorded as one node.
///
/// `input_grads[i]` is `Some` (zero-filled, same length as input i) when that
/// input requires gradient; the implementation accumulates into it.
pub trait CustomOp {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[ArrayView]) -> Array;
    fn backward(
        &self,
        inputs: &[ArrayView],
        out_value: &[f64],
        out_grad: &[f64],
        input_grads: &mut [Option<Vec<f64>>],
    );
}

enum Op {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Matmul(usize, usize),
    Sum(usize),
    Mean(usize),
    Abs(usize),
    Relu(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Powf(usize, f64),
    Dot(usize, usize),
    Norm2(usize),
    Broadcast(usize),
    Reshape(usize),
    Slice { x: usize, ranges: Vec<(usize, usize)> },
    Concat { xs: Vec<usize>, axis: usize },
    Conv2d { x: usize, k: usize, stride: usize, padding: usize },
    MaxPool2d { x: usize, argmax: Vec<u32> },
    Clamp { x: usize, lo: f64, hi: f64 },
    GatherCells { x: usize, cells: Rc<Vec<u32>> },
    Custom { inputs: Vec<usize>, op: Rc<dyn CustomOp> },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Recording tape. Single-threaded by construction; independent tapes for
/// independent scenes may run on separate threads.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { shape, value, grad: None, requires_grad, op });
        Var { tape: self, id }
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Differentiable leaf (optimizable parameter).
    pub fn leaf(&self, a: Array) -> Var<'_> {
        self.push(a.shape, a.data, true, Op::Leaf)
    }

    /// Non-differentiable constant; never receives gradient.
    pub fn constant(&self, a: Array) -> Var<'_> {
        self.push(a.shape, a.data, false, Op::Constant)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(Array::scalar(v))
    }

    /// Record a custom operation over `inputs`.
    pub fn custom(&self, inputs: &[Var<'_>], op: Rc<dyn CustomOp>) -> Var<'_> {
        let ids: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        let out = {
            let nodes = self.nodes.borrow();
            let views: Vec<ArrayView> =
                ids.iter().map(|&i| (nodes[i].value.as_slice(), nodes[i].shape.as_slice())).collect();
            op.forward(&views)
        };
        let rg = ids.iter().any(|&i| self.requires(i));
        self.push(out.shape, out.data, rg, Op::Custom { inputs: ids, op })
    }

    /// Reverse pass from a scalar root. Gradients of all reachable
    /// gradient-requiring nodes are accumulated; everything else stays zero.
    pub fn backward(&self, root: Var<'_>) {
        let mut nodes = self.nodes.borrow_mut();
        assert_eq!(
            nodes[root.id].value.len(),
            1,
            "backward: non-scalar root rejected (root has {} elements)",
            nodes[root.id].value.len()
        );
        let n = nodes.len();
        for node in nodes.iter_mut() {
            node.grad = None;
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        if nodes[root.id].requires_grad {
            grads[root.id] = Some(vec![1.0; 1]);
        }

        for i in (0..=root.id).rev() {
            if !nodes[i].requires_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            backprop_node(&nodes, i, &g, &mut grads);
            grads[i] = Some(g);
        }

        for (i, node) in nodes.iter_mut().enumerate() {
            node.grad = grads[i].take();
        }
    }
}

fn ensure<'a>(grads: &'a mut [Option<Vec<f64>>], id: usize, len: usize) -> &'a mut [f64] {
    grads[id].get_or_insert_with(|| vec![0.0; len]).as_mut_slice()
}

fn backprop_node(nodes: &[Node], i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    macro_rules! rg {
        ($id:expr) => {
            nodes[$id].requires_grad
        };
    }
    match &nodes[i].op {
        Op::Leaf | Op::Constant => {}
        Op::Add(a, b) => {
            bc_backward_binary(nodes, i, *a, *b, g, grads, |_, _, go| (go, go));
        }
        Op::Sub(a, b) => {
            bc_backward_binary(nodes, i, *a, *b, g, grads, |_, _, go| (go, -go));
        }
        Op::Mul(a, b) => {
            bc_backward_binary(nodes, i, *a, *b, g, grads, |av, bv, go| (go * bv, go * av));
        }
        Op::Div(a, b) => {
            bc_backward_binary(nodes, i, *a, *b, g, grads, |av, bv, go| (go / bv, -go * av / (bv * bv)));
        }
        Op::Matmul(a, b) => {
            let (m, k) = (nodes[*a].shape[0], nodes[*a].shape[1]);
            let n = nodes[*b].shape[1];
            if rg!(*a) {
                // dA = G · Bᵀ
                let mut da = vec![0.0; m * k];
                matmul_nt(g, &nodes[*b].value, m, n, k, &mut da);
                add_into(ensure(grads, *a, m * k), &da);
            }
            if rg!(*b) {
                // dB = Aᵀ · G
                let mut db = vec![0.0; k * n];
                matmul_tn(&nodes[*a].value, g, k, m, n, &mut db);
                add_into(ensure(grads, *b, k * n), &db);
            }
        }
        Op::Sum(x) => {
            if rg!(*x) {
                let gx = ensure(grads, *x, nodes[*x].value.len());
                for v in gx.iter_mut() {
                    *v += g[0];
                }
            }
        }
        Op::Mean(x) => {
            if rg!(*x) {
                let len = nodes[*x].value.len();
                let gx = ensure(grads, *x, len);
                let s = g[0] / len as f64;
                for v in gx.iter_mut() {
                    *v += s;
                }
            }
        }
        Op::Abs(x) => unary_backward(nodes, i, *x, g, grads, |xv, _| {
            if xv > 0.0 { 1.0 } else if xv < 0.0 { -1.0 } else { 0.0 }
        }),
        Op::Relu(x) => unary_backward(nodes, i, *x, g, grads, |xv, _| if xv > 0.0 { 1.0 } else { 0.0 }),
        Op::Sigmoid(x) => unary_backward(nodes, i, *x, g, grads, |_, yv| yv * (1.0 - yv)),
        Op::Exp(x) => unary_backward(nodes, i, *x, g, grads, |_, yv| yv),
        Op::Log(x) => unary_backward(nodes, i, *x, g, grads, |xv, _| 1.0 / xv),
        Op::Sqrt(x) => unary_backward(nodes, i, *x, g, grads, |_, yv| 0.5 / yv),
        Op::Neg(x) => unary_backward(nodes, i, *x, g, grads, |_, _| -1.0),
        Op::Scale(x, c) => {
            let c = *c;
            unary_backward(nodes, i, *x, g, grads, move |_, _| c)
        }
        Op::AddScalar(x) => unary_backward(nodes, i, *x, g, grads, |_, _| 1.0),
        Op::Powf(x, p) => {
            let p = *p;
            unary_backward(nodes, i, *x, g, grads, move |xv, _| p * xv.powf(p - 1.0))
        }
        Op::Dot(a, b) => {
            if rg!(*a) {
                let bv = &nodes[*b].value;
                let ga = ensure(grads, *a, bv.len());
                for (gi, &v) in ga.iter_mut().zip(bv.iter()) {
                    *gi += g[0] * v;
                }
            }
            if rg!(*b) {
                let av = &nodes[*a].value;
                let gb = ensure(grads, *b, av.len());
                for (gi, &v) in gb.iter_mut().zip(av.iter()) {
                    *gi += g[0] * v;
                }
            }
        }
        Op::Norm2(x) => {
            if rg!(*x) {
                let norm = nodes[i].value[0];
                if norm > 0.0 {
                    let xv = &nodes[*x].value;
                    let gx = ensure(grads, *x, xv.len());
                    let s = g[0] / norm;
                    for (gi, &v) in gx.iter_mut().zip(xv.iter()) {
                        *gi += s * v;
                    }
                }
            }
        }
        Op::Broadcast(x) => {
            if rg!(*x) {
                let xs = nodes[*x].shape.clone();
                let os = nodes[i].shape.clone();
                let gx = ensure(grads, *x, nodes[*x].value.len());
                reduce_into(g, &os, gx, &xs);
            }
        }
        Op::Reshape(x) => {
            if rg!(*x) {
                add_into(ensure(grads, *x, nodes[*x].value.len()), g);
            }
        }
        Op::Slice { x, ranges } => {
            if rg!(*x) {
                let xs = nodes[*x].shape.clone();
                let gx = ensure(grads, *x, nodes[*x].value.len());
                scatter_slice(g, &xs, ranges, gx);
            }
        }
        Op::Concat { xs, axis } => {
            let outer: usize = nodes[i].shape[..*axis].iter().product();
            let inner: usize = nodes[i].shape[*axis + 1..].iter().product();
            let total_axis = nodes[i].shape[*axis];
            let mut offset = 0usize;
            for &x in xs {
                let ax = nodes[x].shape[*axis];
                if rg!(x) {
                    let gx = ensure(grads, x, nodes[x].value.len());
                    for o in 0..outer {
                        let src = (o * total_axis + offset) * inner;
                        let dst = o * ax * inner;
                        for t in 0..ax * inner {
                            gx[dst + t] += g[src + t];
                        }
                    }
                }
                offset += ax;
            }
        }
        Op::Conv2d { x, k, stride, padding } => {
            kernels::conv2d_backward(nodes, i, *x, *k, *stride, *padding, g, grads);
        }
        Op::MaxPool2d { x, argmax } => {
            if rg!(*x) {
                let gx = ensure(grads, *x, nodes[*x].value.len());
                for (o, &src) in argmax.iter().enumerate() {
                    gx[src as usize] += g[o];
                }
            }
        }
        Op::Clamp { x, lo, hi } => {
            if rg!(*x) {
                let xv = &nodes[*x].value;
                let gx = ensure(grads, *x, xv.len());
                for (j, &v) in xv.iter().enumerate() {
                    if v >= *lo && v <= *hi {
                        gx[j] += g[j];
                    }
                }
            }
        }
        Op::GatherCells { x, cells } => {
            if rg!(*x) {
                let spatial: usize = nodes[*x].shape[1..].iter().product();
                let c = nodes[*x].shape[0];
                let m = cells.len();
                let gx = ensure(grads, *x, nodes[*x].value.len());
                for ci in 0..c {
                    for (j, &cell) in cells.iter().enumerate() {
                        gx[ci * spatial + cell as usize] += g[ci * m + j];
                    }
                }
            }
        }
        Op::Custom { inputs, op } => {
            let views: Vec<ArrayView> = inputs
                .iter()
                .map(|&x| (nodes[x].value.as_slice(), nodes[x].shape.as_slice()))
                .collect();
            let mut igrads: Vec<Option<Vec<f64>>> = inputs
                .iter()
                .map(|&x| if rg!(x) { Some(vec![0.0; nodes[x].value.len()]) } else { None })
                .collect();
            op.backward(&views, &nodes[i].value, g, &mut igrads);
            for (&x, ig) in inputs.iter().zip(igrads.into_iter()) {
                if let Some(ig) = ig {
                    add_into(ensure(grads, x, nodes[x].value.len()), &ig);
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src.iter()) {
        *d += s;
    }
}

/// Elementwise-unary adjoint: `dfdx(x_value, out_value)` is the local derivative.
fn unary_backward(
    nodes: &[Node],
    out: usize,
    x: usize,
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
    dfdx: impl Fn(f64, f64) -> f64,
) {
    if !nodes[x].requires_grad {
        return;
    }
    let xv = &nodes[x].value;
    let yv = &nodes[out].value;
    let gx = ensure(grads, x, xv.len());
    for j in 0..xv.len() {
        gx[j] += g[j] * dfdx(xv[j], yv[j]);
    }
}

// --- elementwise broadcasting machinery -----------------------------------

fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da == db {
            out[i] = da;
        } else if da == 1 {
            out[i] = db;
        } else if db == 1 {
            out[i] = da;
        } else {
            return None;
        }
    }
    Some(out)
}

/// Row-major strides of `shape` right-aligned into `out_shape`, with stride 0
/// on broadcast axes.
fn bc_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - shape.len();
    let mut own = vec![0usize; shape.len()];
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        own[i] = acc;
        acc *= shape[i];
    }
    let mut s = vec![0usize; rank];
    for i in 0..rank {
        if i >= offset && shape[i - offset] != 1 {
            s[i] = own[i - offset];
        }
    }
    s
}

fn for_each_bc(out_shape: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = out_shape.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let total: usize = out_shape.iter().product();
    if total == 0 {
        return;
    }
    let inner = out_shape[rank - 1];
    let ia = sa[rank - 1];
    let ib = sb[rank - 1];
    let mut idx = vec![0usize; rank];
    let mut oa = 0usize;
    let mut ob = 0usize;
    let mut o = 0usize;
    loop {
        let (mut ca, mut cb) = (oa, ob);
        for _ in 0..inner {
            f(o, ca, cb);
            o += 1;
            ca += ia;
            cb += ib;
        }
        // odometer over outer dims
        let mut d = rank.wrapping_sub(2);
        loop {
            if d == usize::MAX {
                return;
            }
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            oa -= sa[d] * out_shape[d];
            ob -= sb[d] * out_shape[d];
            idx[d] = 0;
            d = d.wrapping_sub(1);
        }
    }
}

fn bc_forward(
    op_name: &str,
    a: &Node,
    b: &Node,
    f: impl Fn(f64, f64) -> f64,
) -> (Vec<usize>, Vec<f64>) {
    if a.shape == b.shape {
        let out: Vec<f64> = a.value.iter().zip(b.value.iter()).map(|(&x, &y)| f(x, y)).collect();
        return (a.shape.clone(), out);
    }
    let out_shape = broadcast_shapes(&a.shape, &b.shape).unwrap_or_else(|| {
        panic!("{}: shapes {:?} and {:?} are not broadcast-compatible", op_name, a.shape, b.shape)
    });
    let sa = bc_strides(&a.shape, &out_shape);
    let sb = bc_strides(&b.shape, &out_shape);
    let total: usize = out_shape.iter().product();
    let mut out = vec![0.0; total];
    for_each_bc(&out_shape, &sa, &sb, |o, ia, ib| {
        out[o] = f(a.value[ia], b.value[ib]);
    });
    (out_shape, out)
}

/// Backward for broadcasting binary ops. `rule(av, bv, go) -> (da, db)`.
fn bc_backward_binary(
    nodes: &[Node],
    out: usize,
    a: usize,
    b: usize,
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
    rule: impl Fn(f64, f64, f64) -> (f64, f64) + Copy,
) {
    let need_a = nodes[a].requires_grad;
    let need_b = nodes[b].requires_grad;
    if !need_a && !need_b {
        return;
    }
    let out_shape = &nodes[out].shape;
    if nodes[a].shape == nodes[b].shape {
        let av = &nodes[a].value;
        let bv = &nodes[b].value;
        if need_a {
            let ga = ensure(grads, a, av.len());
            for j in 0..av.len() {
                ga[j] += rule(av[j], bv[j], g[j]).0;
            }
        }
        if need_b {
            let gb = ensure(grads, b, bv.len());
            for j in 0..bv.len() {
                gb[j] += rule(av[j], bv[j], g[j]).1;
            }
        }
        return;
    }
    let sa = bc_strides(&nodes[a].shape, out_shape);
    let sb = bc_strides(&nodes[b].shape, out_shape);
    let mut ga = if need_a { Some(vec![0.0; nodes[a].value.len()]) } else { None };
    let mut gb = if need_b { Some(vec![0.0; nodes[b].value.len()]) } else { None };
    {
        let av = &nodes[a].value;
        let bv = &nodes[b].value;
        for_each_bc(out_shape, &sa, &sb, |o, ia, ib| {
            let (da, db) = rule(av[ia], bv[ib], g[o]);
            if let Some(ga) = ga.as_mut() {
                ga[ia] += da;
            }
            if let Some(gb) = gb.as_mut() {
                gb[ib] += db;
            }
        });
    }
    if let Some(gsrc) = ga {
        add_into(ensure(grads, a, gsrc.len()), &gsrc);
    }
    if let Some(gsrc) = gb {
        add_into(ensure(grads, b, gsrc.len()), &gsrc);
    }
}

/// Sum `g` (shaped `g_shape`) down to `target_shape` (broadcast transpose).
fn reduce_into(g: &[f64], g_shape: &[usize], out: &mut [f64], target_shape: &[usize]) {
    let st = bc_strides(target_shape, g_shape);
    let zeros = vec![0usize; g_shape.len()];
    for_each_bc(g_shape, &st, &zeros, |o, it, _| {
        out[it] += g[o];
    });
}

fn scatter_slice(g: &[f64], x_shape: &[usize], ranges: &[(usize, usize)], gx: &mut [f64]) {
    // iterate over the slice region, adding g into gx
    let rank = x_shape.len();
    let mut strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * x_shape[i + 1];
    }
    let out_shape: Vec<usize> = ranges.iter().map(|&(s, e)| e - s).collect();
    let total: usize = out_shape.iter().product();
    if total == 0 {
        return;
    }
    let mut idx = vec![0usize; rank];
    for o in 0..total {
        let mut src = 0usize;
        for d in 0..rank {
            src += (ranges[d].0 + idx[d]) * strides[d];
        }
        gx[src] += g[o];
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

fn gather_slice(x: &[f64], x_shape: &[usize], ranges: &[(usize, usize)]) -> (Vec<usize>, Vec<f64>) {
    let rank = x_shape.len();
    let mut strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * x_shape[i + 1];
    }
    let out_shape: Vec<usize> = ranges.iter().map(|&(s, e)| e - s).collect();
    let total: usize = out_shape.iter().product();
    let mut out = vec![0.0; total];
    let mut idx = vec![0usize; rank];
    for o in out.iter_mut() {
        let mut src = 0usize;
        for d in 0..rank {
            src += (ranges[d].0 + idx[d]) * strides[d];
        }
        *o = x[src];
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

// --- Var operations --------------------------------------------------------

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.len()
    }

    pub fn value(&self) -> Array {
        let nodes = self.tape.nodes.borrow();
        Array { shape: nodes[self.id].shape.clone(), data: nodes[self.id].value.clone() }
    }

    pub fn item(&self) -> f64 {
        let nodes = self.tape.nodes.borrow();
        assert_eq!(nodes[self.id].value.len(), 1, "item() on non-scalar");
        nodes[self.id].value[0]
    }

    /// Gradient after a backward pass; `None` for constants or unreached nodes.
    pub fn grad(&self) -> Option<Array> {
        let nodes = self.tape.nodes.borrow();
        nodes[self.id].grad.as_ref().map(|g| Array {
            shape: nodes[self.id].shape.clone(),
            data: g.clone(),
        })
    }

    /// Copy of this value as a fresh constant (cut from the gradient flow).
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant(self.value())
    }

    /// New constant on the same tape as this variable.
    pub fn constant_like(&self, a: Array) -> Var<'t> {
        self.tape.constant(a)
    }

    fn binary(self, other: Var<'t>, name: &str, op: impl Fn(usize, usize) -> Op, f: impl Fn(f64, f64) -> f64) -> Var<'t> {
        assert!(std::ptr::eq(self.tape, other.tape), "{name}: operands from different tapes");
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            bc_forward(name, &nodes[self.id], &nodes[other.id], f)
        };
        let rg = self.tape.requires(self.id) || self.tape.requires(other.id);
        self.tape.push(shape, value, rg, op(self.id, other.id))
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, "add", Op::Add, |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, "sub", Op::Sub, |a, b| a - b)
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, "mul", Op::Mul, |a, b| a * b)
    }

    pub fn div(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, "div", Op::Div, |a, b| a / b)
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        let (a_shape, b_shape) = (self.shape(), other.shape());
        assert!(
            a_shape.len() == 2 && b_shape.len() == 2 && a_shape[1] == b_shape[0],
            "matmul: incompatible shapes {:?} x {:?}",
            a_shape,
            b_shape
        );
        let (m, k, n) = (a_shape[0], a_shape[1], b_shape[1]);
        let value = {
            let nodes = self.tape.nodes.borrow();
            let mut out = vec![0.0; m * n];
            matmul_nn(&nodes[self.id].value, &nodes[other.id].value, m, k, n, &mut out);
            out
        };
        let rg = self.tape.requires(self.id) || self.tape.requires(other.id);
        self.tape.push(vec![m, n], value, rg, Op::Matmul(self.id, other.id))
    }

    fn unary(self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            (nodes[self.id].shape.clone(), nodes[self.id].value.iter().map(|&x| f(x)).collect())
        };
        let rg = self.tape.requires(self.id);
        self.tape.push(shape, value, rg, op)
    }

    pub fn sum(self) -> Var<'t> {
        let s: f64 = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.id].value.iter().sum()
        };
        let rg = self.tape.requires(self.id);
        self.tape.push(vec![], vec![s], rg, Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let (s, n) = {
            let nodes = self.tape.nodes.borrow();
            (nodes[self.id].value.iter().sum::<f64>(), nodes[self.id].value.len())
        };
        assert!(n > 0, "mean: empty tensor");
        let rg = self.tape.requires(self.id);
        self.tape.push(vec![], vec![s / n as f64], rg, Op::Mean(self.id))
    }

    pub fn abs(self) -> Var<'t> {
        self.unary(Op::Abs(self.id), f64::abs)
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(Op::Relu(self.id), |x| x.max(0.0))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.id), |x| 1.0 / (1.0 + (-x).exp()))
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    pub fn log(self) -> Var<'t> {
        self.unary(Op::Log(self.id), f64::ln)
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(Op::Sqrt(self.id), f64::sqrt)
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(Op::Neg(self.id), |x| -x)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, c), |x| c * x)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(Op::AddScalar(self.id), |x| x + c)
    }

    pub fn powf(self, p: f64) -> Var<'t> {
        self.unary(Op::Powf(self.id, p), |x| x.powf(p))
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(Op::Clamp { x: self.id, lo, hi }, |x| x.clamp(lo, hi))
    }

    pub fn dot(self, other: Var<'t>) -> Var<'t> {
        let (a_shape, b_shape) = (self.shape(), other.shape());
        let (an, bn) = (self.numel(), other.numel());
        assert_eq!(an, bn, "dot: length mismatch {:?} vs {:?}", a_shape, b_shape);
        let s: f64 = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.id]
                .value
                .iter()
                .zip(nodes[other.id].value.iter())
                .map(|(&a, &b)| a * b)
                .sum()
        };
        let rg = self.tape.requires(self.id) || self.tape.requires(other.id);
        self.tape.push(vec![], vec![s], rg, Op::Dot(self.id, other.id))
    }

    pub fn norm2(self) -> Var<'t> {
        let s: f64 = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.id].value.iter().map(|&v| v * v).sum::<f64>().sqrt()
        };
        let rg = self.tape.requires(self.id);
        self.tape.push(vec![], vec![s], rg, Op::Norm2(self.id))
    }

    pub fn broadcast_to(self, shape: &[usize]) -> Var<'t> {
        let own = self.shape();
        let target = broadcast_shapes(&own, shape).unwrap_or_else(|| {
            panic!("broadcast: {:?} not broadcastable to {:?}", own, shape)
        });
        assert_eq!(target, shape, "broadcast: {:?} not broadcastable to {:?}", own, shape);
        let value = {
            let nodes = self.tape.nodes.borrow();
            let sa = bc_strides(&own, shape);
            let zeros = vec![0usize; shape.len()];
            let mut out = vec![0.0; shape.iter().product()];
            let src = &nodes[self.id].value;
            for_each_bc(shape, &sa, &zeros, |o, ia, _| {
                out[o] = src[ia];
            });
            out
        };
        let rg = self.tape.requires(self.id);
        self.tape.push(shape.to_vec(), value, rg, Op::Broadcast(self.id))
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        let n: usize = shape.iter().product();
        assert_eq!(n, self.numel(), "reshape: {:?} incompatible with {} elements", shape, self.numel());
        let value = self.tape.nodes.borrow()[self.id].value.clone();
        let rg = self.tape.requires(self.id);
        self.tape.push(shape.to_vec(), value, rg, Op::Reshape(self.id))
    }

    /// Sub-tensor over half-open ranges, one per axis.
    pub fn slice(self, ranges: &[(usize, usize)]) -> Var<'t> {
        let shape = self.shape();
        assert_eq!(ranges.len(), shape.len(), "slice: {} ranges for rank {}", ranges.len(), shape.len());
        for (d, &(s, e)) in ranges.iter().enumerate() {
            assert!(s <= e && e <= shape[d], "slice: range {}..{} out of bounds for axis {} (len {})", s, e, d, shape[d]);
        }
        let (out_shape, value) = {
            let nodes = self.tape.nodes.borrow();
            gather_slice(&nodes[self.id].value, &shape, ranges)
        };
        let rg = self.tape.requires(self.id);
        self.tape.push(out_shape, value, rg, Op::Slice { x: self.id, ranges: ranges.to_vec() })
    }

    pub fn conv2d(self, kernel: Var<'t>, stride: usize, padding: usize) -> Var<'t> {
        kernels::conv2d_forward(self, kernel, stride, padding)
    }

    pub fn max_pool2d(self, kernel: usize, stride: usize) -> Var<'t> {
        kernels::max_pool2d_forward(self, kernel, stride)
    }

    /// Gather spatial cells from a (C, X, Y) tensor into (C, m).
    pub fn gather_cells(self, cells: &[u32]) -> Var<'t> {
        let shape = self.shape();
        assert!(shape.len() >= 2, "gather_cells: need (C, spatial...) tensor, got {:?}", shape);
        let spatial: usize = shape[1..].iter().product();
        let c = shape[0];
        let value = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let mut out = vec![0.0; c * cells.len()];
            for ci in 0..c {
                for (j, &cell) in cells.iter().enumerate() {
                    assert!((cell as usize) < spatial, "gather_cells: cell {} out of bounds ({})", cell, spatial);
                    out[ci * cells.len() + j] = x[ci * spatial + cell as usize];
                }
            }
            out
        };
        let rg = self.tape.requires(self.id);
        self.tape.push(
            vec![c, cells.len()],
            value,
            rg,
            Op::GatherCells { x: self.id, cells: Rc::new(cells.to_vec()) },
        )
    }

    fn tape_ref(&self) -> &'t Tape {
        self.tape
    }
}

/// Concatenate along `axis`.
pub fn concat<'t>(vars: &[Var<'t>], axis: usize) -> Var<'t> {
    assert!(!vars.is_empty(), "concat: empty input list");
    let tape = vars[0].tape_ref();
    let first = vars[0].shape();
    let rank = first.len();
    assert!(axis < rank, "concat: axis {} out of rank {}", axis, rank);
    let mut total_axis = 0usize;
    for v in vars {
        let s = v.shape();
        assert_eq!(s.len(), rank, "concat: rank mismatch {:?} vs {:?}", first, s);
        for d in 0..rank {
            if d != axis {
                assert_eq!(s[d], first[d], "concat: shape mismatch {:?} vs {:?} on axis {}", first, s, d);
            }
        }
        total_axis += s[axis];
    }
    let mut out_shape = first.clone();
    out_shape[axis] = total_axis;
    let outer: usize = first[..axis].iter().product();
    let inner: usize = first[axis + 1..].iter().product();
    let mut out = vec![0.0; out_shape.iter().product()];
    {
        let nodes = tape.nodes.borrow();
        let mut offset = 0usize;
        for v in vars {
            let ax = nodes[v.id].shape[axis];
            let src = &nodes[v.id].value;
            for o in 0..outer {
                let dst = (o * total_axis + offset) * inner;
                let s = o * ax * inner;
                out[dst..dst + ax * inner].copy_from_slice(&src[s..s + ax * inner]);
            }
            offset += ax;
        }
    }
    let rg = vars.iter().any(|v| tape.requires(v.id));
    tape.push(out_shape, out, rg, Op::Concat { xs: vars.iter().map(|v| v.id).collect(), axis })
}

impl<'t> std::ops::Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        Var::add(self, rhs)
    }
}

impl<'t> std::ops::Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        Var::sub(self, rhs)
    }
}

impl<'t> std::ops::Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        Var::mul(self, rhs)
    }
}

impl<'t> std::ops::Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        Var::div(self, rhs)
    }
}
