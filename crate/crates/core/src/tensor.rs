//! Reverse-mode automatic differentiation over `f64` ndarrays.
//!
//! A [`Tape`] records a define-by-run graph; [`Var`] is a cheap handle into
//! it. One forward pass builds the graph, one [`Tape::backward`] call fills
//! gradients for every node that (transitively) depends on a gradient-
//! requiring leaf. Nodes that only depend on constants are skipped, so the
//! momentum-encoder path costs no backward work.
//!
//! The op set is exactly what the detector, the attention branch, and the
//! contrastive losses need; notably [`Var::detach`], which forwards a value
//! but blocks gradient flow (the contrastive objective divides a sum by its
//! own detached copy).
//!
//! Activations are `[N, C, H, W]`, embeddings `[M, D]`, reductions 0-d.

use std::cell::{Ref, RefCell};

use ndarray::{ArrayD, Axis, IxDyn};

/// Region of interest for [`Var::bilinear_crop`], in feature-map pixel
/// coordinates: `(batch index, x1, y1, x2, y2)`.
pub type Roi = (usize, f64, f64, f64, f64);

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    MatMul(usize, usize),
    /// `a @ b^T` for `a: [m,k]`, `b: [n,k]`.
    MatMulT(usize, usize),
    Relu(usize),
    Sigmoid(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Softplus(usize),
    Recip(usize),
    SumAll(usize),
    MeanAll(usize),
    /// `[m,k] -> [m,1]`.
    RowSum(usize),
    /// `[m,k] * [m,1]` broadcast.
    RowScale(usize, usize),
    /// `[m,k] - [m,1]` broadcast.
    SubRow(usize, usize),
    /// `[m,k] + [k]` broadcast.
    AddRowVec(usize, usize),
    EMax(usize, usize),
    EMin(usize, usize),
    /// `[N,C,H,W] -> [N,1,H,W]`, gradient routed to the argmax channel.
    ChannelMax(usize, Vec<usize>),
    ChannelMean(usize),
    /// `[N,C,H,W] * [N,1,H,W]` broadcast over channels.
    MulChan(usize, usize),
    Concat(Vec<usize>, usize),
    /// Rows `(n, y, x)` of `[N,C,H,W]` -> `[M,C]`.
    GatherCells(usize, Vec<(usize, usize, usize)>),
    /// Row subset of `[m,k]` -> `[r,k]`.
    GatherRows(usize, Vec<usize>),
    /// One column of `[m,k]` -> `[m,1]`.
    GatherCol(usize, usize),
    BilinearResize(usize),
    BilinearCrop(usize, Vec<Roi>, usize),
    Conv2d {
        input: usize,
        weight: usize,
        bias: Option<usize>,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        input: usize,
        gamma: usize,
        beta: usize,
        xhat: ArrayD<f64>,
        inv_std: Vec<f64>,
    },
    /// Per-channel `x * scale + shift` with constant coefficients.
    ChannelAffine(usize, Vec<f64>),
    Reshape(usize),
    Detach,
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Gradients produced by [`Tape::backward`].
pub struct Grads {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Grads {
    pub fn get(&self, var: Var<'_>) -> Option<&ArrayD<f64>> {
        self.grads[var.id].as_ref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: ArrayD<f64>, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Leaf that participates in gradient computation.
    pub fn param(&self, value: ArrayD<f64>) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&self, value: ArrayD<f64>) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(ndarray::arr0(v).into_dyn())
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    /// Backpropagate from a 0-d `loss` node.
    pub fn backward(&self, loss: Var<'_>) -> Grads {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[loss.id].value.ndim(),
            0,
            "backward expects a scalar loss"
        );
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(ndarray::arr0(1.0).into_dyn());

        for id in (0..=loss.id).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            if !nodes[id].needs_grad {
                continue;
            }
            backprop_node(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Grads { grads }
    }
}

fn accumulate(grads: &mut [Option<ArrayD<f64>>], id: usize, delta: ArrayD<f64>) {
    match &mut grads[id] {
        Some(g) => *g += &delta,
        slot => *slot = Some(delta),
    }
}

fn backprop_node(nodes: &[Node], id: usize, g: &ArrayD<f64>, grads: &mut [Option<ArrayD<f64>>]) {
    let val = |i: usize| &nodes[i].value;
    let needs = |i: usize| nodes[i].needs_grad;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if needs(*a) {
                accumulate(grads, *a, g.clone());
            }
            if needs(*b) {
                accumulate(grads, *b, g.clone());
            }
        }
        Op::Sub(a, b) => {
            if needs(*a) {
                accumulate(grads, *a, g.clone());
            }
            if needs(*b) {
                accumulate(grads, *b, -g);
            }
        }
        Op::Mul(a, b) => {
            if needs(*a) {
                accumulate(grads, *a, g * val(*b));
            }
            if needs(*b) {
                accumulate(grads, *b, g * val(*a));
            }
        }
        Op::Div(a, b) => {
            if needs(*a) {
                accumulate(grads, *a, g / val(*b));
            }
            if needs(*b) {
                accumulate(grads, *b, -(g * val(*a)) / (val(*b) * val(*b)));
            }
        }
        Op::Neg(a) => {
            if needs(*a) {
                accumulate(grads, *a, -g);
            }
        }
        Op::AddScalar(a) => {
            if needs(*a) {
                accumulate(grads, *a, g.clone());
            }
        }
        Op::MulScalar(a, c) => {
            if needs(*a) {
                accumulate(grads, *a, g * *c);
            }
        }
        Op::MatMul(a, b) => {
            let ga = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            let av = val(*a).view().into_dimensionality::<ndarray::Ix2>().unwrap();
            let bv = val(*b).view().into_dimensionality::<ndarray::Ix2>().unwrap();
            if needs(*a) {
                accumulate(grads, *a, ga.dot(&bv.t()).into_dyn());
            }
            if needs(*b) {
                accumulate(grads, *b, av.t().dot(&ga).into_dyn());
            }
        }
        Op::MatMulT(a, b) => {
            let ga = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            let av = val(*a).view().into_dimensionality::<ndarray::Ix2>().unwrap();
            let bv = val(*b).view().into_dimensionality::<ndarray::Ix2>().unwrap();
            if needs(*a) {
                accumulate(grads, *a, ga.dot(&bv).into_dyn());
            }
            if needs(*b) {
                accumulate(grads, *b, ga.t().dot(&av).into_dyn());
            }
        }
        Op::Relu(a) => {
            if needs(*a) {
                let mask = val(*a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                accumulate(grads, *a, g * &mask);
            }
        }
        Op::Sigmoid(a) => {
            if needs(*a) {
                let y = &nodes[id].value;
                accumulate(grads, *a, g * &(y * &y.mapv(|v| 1.0 - v)));
            }
        }
        Op::Exp(a) => {
            if needs(*a) {
                accumulate(grads, *a, g * &nodes[id].value);
            }
        }
        Op::Ln(a) => {
            if needs(*a) {
                accumulate(grads, *a, g / val(*a));
            }
        }
        Op::Sqrt(a) => {
            if needs(*a) {
                accumulate(grads, *a, g / &(2.0 * &nodes[id].value));
            }
        }
        Op::Softplus(a) => {
            if needs(*a) {
                let s = val(*a).mapv(sigmoid_scalar);
                accumulate(grads, *a, g * &s);
            }
        }
        Op::Recip(a) => {
            if needs(*a) {
                let y = &nodes[id].value;
                accumulate(grads, *a, -(g * &(y * y)));
            }
        }
        Op::SumAll(a) => {
            if needs(*a) {
                let s = g.first().copied().unwrap();
                accumulate(grads, *a, ArrayD::from_elem(val(*a).raw_dim(), s));
            }
        }
        Op::MeanAll(a) => {
            if needs(*a) {
                let n = val(*a).len() as f64;
                let s = g.first().copied().unwrap() / n;
                accumulate(grads, *a, ArrayD::from_elem(val(*a).raw_dim(), s));
            }
        }
        Op::RowSum(a) => {
            if needs(*a) {
                let (m, k) = dims2(val(*a));
                let mut da = ArrayD::zeros(IxDyn(&[m, k]));
                for i in 0..m {
                    let gi = g[[i, 0]];
                    for j in 0..k {
                        da[[i, j]] = gi;
                    }
                }
                accumulate(grads, *a, da);
            }
        }
        Op::RowScale(a, s) => {
            let (m, k) = dims2(val(*a));
            if needs(*a) {
                let mut da = ArrayD::zeros(IxDyn(&[m, k]));
                for i in 0..m {
                    let si = val(*s)[[i, 0]];
                    for j in 0..k {
                        da[[i, j]] = g[[i, j]] * si;
                    }
                }
                accumulate(grads, *a, da);
            }
            if needs(*s) {
                let mut ds = ArrayD::zeros(IxDyn(&[m, 1]));
                for i in 0..m {
                    let mut acc = 0.0;
                    for j in 0..k {
                        acc += g[[i, j]] * val(*a)[[i, j]];
                    }
                    ds[[i, 0]] = acc;
                }
                accumulate(grads, *s, ds);
            }
        }
        Op::SubRow(a, b) => {
            if needs(*a) {
                accumulate(grads, *a, g.clone());
            }
            if needs(*b) {
                let (m, k) = dims2(g);
                let mut db = ArrayD::zeros(IxDyn(&[m, 1]));
                for i in 0..m {
                    let mut acc = 0.0;
                    for j in 0..k {
                        acc += g[[i, j]];
                    }
                    db[[i, 0]] = -acc;
                }
                accumulate(grads, *b, db);
            }
        }
        Op::AddRowVec(a, b) => {
            if needs(*a) {
                accumulate(grads, *a, g.clone());
            }
            if needs(*b) {
                let (m, k) = dims2(g);
                let mut db = ArrayD::zeros(IxDyn(&[k]));
                for i in 0..m {
                    for j in 0..k {
                        db[[j]] += g[[i, j]];
                    }
                }
                accumulate(grads, *b, db);
            }
        }
        Op::EMax(a, b) | Op::EMin(a, b) => {
            let is_max = matches!(nodes[id].op, Op::EMax(..));
            let av = val(*a);
            let bv = val(*b);
            if needs(*a) {
                let mut da = g.clone();
                ndarray::Zip::from(&mut da).and(av).and(bv).for_each(|d, &x, &y| {
                    let take_a = if is_max { x >= y } else { x <= y };
                    if !take_a {
                        *d = 0.0;
                    }
                });
                accumulate(grads, *a, da);
            }
            if needs(*b) {
                let mut db = g.clone();
                ndarray::Zip::from(&mut db).and(av).and(bv).for_each(|d, &x, &y| {
                    let take_a = if is_max { x >= y } else { x <= y };
                    if take_a {
                        *d = 0.0;
                    }
                });
                accumulate(grads, *b, db);
            }
        }
        Op::ChannelMax(a, argmax) => {
            if needs(*a) {
                let shape = val(*a).shape().to_vec();
                let (n, _c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                let mut da = ArrayD::zeros(val(*a).raw_dim());
                for ni in 0..n {
                    for y in 0..h {
                        for x in 0..w {
                            let c = argmax[(ni * h + y) * w + x];
                            da[[ni, c, y, x]] = g[[ni, 0, y, x]];
                        }
                    }
                }
                accumulate(grads, *a, da);
            }
        }
        Op::ChannelMean(a) => {
            if needs(*a) {
                let shape = val(*a).shape().to_vec();
                let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                let mut da = ArrayD::zeros(val(*a).raw_dim());
                for ni in 0..n {
                    for ci in 0..c {
                        for y in 0..h {
                            for x in 0..w {
                                da[[ni, ci, y, x]] = g[[ni, 0, y, x]] / c as f64;
                            }
                        }
                    }
                }
                accumulate(grads, *a, da);
            }
        }
        Op::MulChan(a, b) => {
            let shape = val(*a).shape().to_vec();
            let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
            if needs(*a) {
                let mut da = ArrayD::zeros(val(*a).raw_dim());
                for ni in 0..n {
                    for ci in 0..c {
                        for y in 0..h {
                            for x in 0..w {
                                da[[ni, ci, y, x]] = g[[ni, ci, y, x]] * val(*b)[[ni, 0, y, x]];
                            }
                        }
                    }
                }
                accumulate(grads, *a, da);
            }
            if needs(*b) {
                let mut db = ArrayD::zeros(val(*b).raw_dim());
                for ni in 0..n {
                    for y in 0..h {
                        for x in 0..w {
                            let mut acc = 0.0;
                            for ci in 0..c {
                                acc += g[[ni, ci, y, x]] * val(*a)[[ni, ci, y, x]];
                            }
                            db[[ni, 0, y, x]] = acc;
                        }
                    }
                }
                accumulate(grads, *b, db);
            }
        }
        Op::Concat(parts, axis) => {
            let mut offset = 0;
            for &p in parts {
                let len = val(p).shape()[*axis];
                if needs(p) {
                    let slice = g
                        .slice_axis(Axis(*axis), ndarray::Slice::from(offset..offset + len))
                        .to_owned();
                    accumulate(grads, p, slice);
                }
                offset += len;
            }
        }
        Op::GatherCells(a, coords) => {
            if needs(*a) {
                let c = val(*a).shape()[1];
                let mut da = ArrayD::zeros(val(*a).raw_dim());
                for (row, &(n, y, x)) in coords.iter().enumerate() {
                    for ch in 0..c {
                        da[[n, ch, y, x]] += g[[row, ch]];
                    }
                }
                accumulate(grads, *a, da);
            }
        }
        Op::GatherRows(a, rows) => {
            if needs(*a) {
                let k = val(*a).shape()[1];
                let mut da = ArrayD::zeros(val(*a).raw_dim());
                for (out_row, &src_row) in rows.iter().enumerate() {
                    for j in 0..k {
                        da[[src_row, j]] += g[[out_row, j]];
                    }
                }
                accumulate(grads, *a, da);
            }
        }
        Op::GatherCol(a, col) => {
            if needs(*a) {
                let m = g.shape()[0];
                let mut da = ArrayD::zeros(val(*a).raw_dim());
                for i in 0..m {
                    da[[i, *col]] += g[[i, 0]];
                }
                accumulate(grads, *a, da);
            }
        }
        Op::BilinearResize(a) => {
            if needs(*a) {
                let da = bilinear_resize_backward(val(*a), &nodes[id].value, g);
                accumulate(grads, *a, da);
            }
        }
        Op::BilinearCrop(a, rois, s) => {
            if needs(*a) {
                let da = bilinear_crop_backward(val(*a), rois, *s, g);
                accumulate(grads, *a, da);
            }
        }
        Op::Conv2d {
            input,
            weight,
            bias,
            stride,
            pad,
        } => {
            let (dx, dw, db) = conv2d_backward(
                val(*input),
                val(*weight),
                g,
                *stride,
                *pad,
                needs(*input),
                needs(*weight),
                bias.map(needs).unwrap_or(false),
            );
            if let Some(dx) = dx {
                accumulate(grads, *input, dx);
            }
            if let Some(dw) = dw {
                accumulate(grads, *weight, dw);
            }
            if let (Some(b), Some(db)) = (bias, db) {
                accumulate(grads, *b, db);
            }
        }
        Op::BatchNorm {
            input,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let shape = xhat.shape().to_vec();
            let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
            let m = (n * h * w) as f64;
            // Per-channel sums of g and g*xhat.
            let mut sum_g = vec![0.0; c];
            let mut sum_gx = vec![0.0; c];
            for ni in 0..n {
                for ci in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            let gv = g[[ni, ci, y, x]];
                            sum_g[ci] += gv;
                            sum_gx[ci] += gv * xhat[[ni, ci, y, x]];
                        }
                    }
                }
            }
            if needs(*gamma) {
                accumulate(
                    grads,
                    *gamma,
                    ndarray::Array1::from(sum_gx.clone()).into_dyn(),
                );
            }
            if needs(*beta) {
                accumulate(grads, *beta, ndarray::Array1::from(sum_g.clone()).into_dyn());
            }
            if needs(*input) {
                let gv = val(*gamma);
                let mut dx = ArrayD::zeros(xhat.raw_dim());
                for ni in 0..n {
                    for ci in 0..c {
                        let coef = gv[[ci]] * inv_std[ci] / m;
                        for y in 0..h {
                            for x in 0..w {
                                dx[[ni, ci, y, x]] = coef
                                    * (m * g[[ni, ci, y, x]]
                                        - sum_g[ci]
                                        - xhat[[ni, ci, y, x]] * sum_gx[ci]);
                            }
                        }
                    }
                }
                accumulate(grads, *input, dx);
            }
        }
        Op::ChannelAffine(a, scale) => {
            if needs(*a) {
                let shape = val(*a).shape().to_vec();
                let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                let mut da = ArrayD::zeros(val(*a).raw_dim());
                for ni in 0..n {
                    for ci in 0..c {
                        for y in 0..h {
                            for x in 0..w {
                                da[[ni, ci, y, x]] = g[[ni, ci, y, x]] * scale[ci];
                            }
                        }
                    }
                }
                accumulate(grads, *a, da);
            }
        }
        Op::Reshape(a) => {
            if needs(*a) {
                let da = g
                    .clone()
                    .into_shape_with_order(val(*a).raw_dim())
                    .expect("reshape backward");
                accumulate(grads, *a, da);
            }
        }
        Op::Detach => {}
    }
}

fn dims2(a: &ArrayD<f64>) -> (usize, usize) {
    (a.shape()[0], a.shape()[1])
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus_scalar(x: f64) -> f64 {
    // ln(1 + e^x), stable on both tails.
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Ref<'t, ArrayD<f64>> {
        Ref::map(self.tape.nodes.borrow(), |nodes| &nodes[self.id].value)
    }

    pub fn to_array(&self) -> ArrayD<f64> {
        self.value().clone()
    }

    pub fn scalar_value(&self) -> f64 {
        *self.value().first().expect("scalar value of empty tensor")
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    fn unary(self, value: ArrayD<f64>, op: Op) -> Var<'t> {
        let needs = self.tape.needs(self.id);
        self.tape.push(value, op, needs)
    }

    fn binary(self, other: Var<'t>, value: ArrayD<f64>, op: Op) -> Var<'t> {
        let needs = self.tape.needs(self.id) || other.tape.needs(other.id);
        self.tape.push(value, op, needs)
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        let v = &*self.value() + &*other.value();
        self.binary(other, v, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        let v = &*self.value() - &*other.value();
        self.binary(other, v, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        let v = &*self.value() * &*other.value();
        self.binary(other, v, Op::Mul(self.id, other.id))
    }

    pub fn div(self, other: Var<'t>) -> Var<'t> {
        let v = &*self.value() / &*other.value();
        self.binary(other, v, Op::Div(self.id, other.id))
    }

    pub fn neg(self) -> Var<'t> {
        let v = -&*self.value();
        self.unary(v, Op::Neg(self.id))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let v = self.value().mapv(|x| x + c);
        self.unary(v, Op::AddScalar(self.id))
    }

    pub fn mul_scalar(self, c: f64) -> Var<'t> {
        let v = self.value().mapv(|x| x * c);
        self.unary(v, Op::MulScalar(self.id, c))
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        let a = self.value();
        let b = other.value();
        let av = a.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let bv = b.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let v = av.dot(&bv).into_dyn();
        drop(a);
        drop(b);
        self.binary(other, v, Op::MatMul(self.id, other.id))
    }

    /// `self @ other^T` without materializing the transpose on the tape.
    pub fn matmul_t(self, other: Var<'t>) -> Var<'t> {
        let a = self.value();
        let b = other.value();
        let av = a.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let bv = b.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let v = av.dot(&bv.t()).into_dyn();
        drop(a);
        drop(b);
        self.binary(other, v, Op::MatMulT(self.id, other.id))
    }

    pub fn relu(self) -> Var<'t> {
        let v = self.value().mapv(|x| x.max(0.0));
        self.unary(v, Op::Relu(self.id))
    }

    pub fn sigmoid(self) -> Var<'t> {
        let v = self.value().mapv(sigmoid_scalar);
        self.unary(v, Op::Sigmoid(self.id))
    }

    pub fn exp(self) -> Var<'t> {
        let v = self.value().mapv(f64::exp);
        self.unary(v, Op::Exp(self.id))
    }

    pub fn ln(self) -> Var<'t> {
        let v = self.value().mapv(f64::ln);
        self.unary(v, Op::Ln(self.id))
    }

    pub fn sqrt(self) -> Var<'t> {
        let v = self.value().mapv(f64::sqrt);
        self.unary(v, Op::Sqrt(self.id))
    }

    pub fn softplus(self) -> Var<'t> {
        let v = self.value().mapv(softplus_scalar);
        self.unary(v, Op::Softplus(self.id))
    }

    pub fn recip(self) -> Var<'t> {
        let v = self.value().mapv(|x| 1.0 / x);
        self.unary(v, Op::Recip(self.id))
    }

    pub fn sum_all(self) -> Var<'t> {
        let v = ndarray::arr0(self.value().sum()).into_dyn();
        self.unary(v, Op::SumAll(self.id))
    }

    pub fn mean_all(self) -> Var<'t> {
        let v = ndarray::arr0(self.value().mean().unwrap()).into_dyn();
        self.unary(v, Op::MeanAll(self.id))
    }

    pub fn row_sum(self) -> Var<'t> {
        let a = self.value();
        let (m, k) = dims2(&a);
        let mut v = ArrayD::zeros(IxDyn(&[m, 1]));
        for i in 0..m {
            let mut acc = 0.0;
            for j in 0..k {
                acc += a[[i, j]];
            }
            v[[i, 0]] = acc;
        }
        drop(a);
        self.unary(v, Op::RowSum(self.id))
    }

    /// Broadcast multiply rows of `[m,k]` by `[m,1]`.
    pub fn row_scale(self, s: Var<'t>) -> Var<'t> {
        let a = self.value();
        let sv = s.value();
        let (m, k) = dims2(&a);
        let mut v = ArrayD::zeros(IxDyn(&[m, k]));
        for i in 0..m {
            for j in 0..k {
                v[[i, j]] = a[[i, j]] * sv[[i, 0]];
            }
        }
        drop(a);
        drop(sv);
        self.binary(s, v, Op::RowScale(self.id, s.id))
    }

    /// Broadcast subtract `[m,1]` from rows of `[m,k]`.
    pub fn sub_row(self, b: Var<'t>) -> Var<'t> {
        let a = self.value();
        let bv = b.value();
        let (m, k) = dims2(&a);
        let mut v = ArrayD::zeros(IxDyn(&[m, k]));
        for i in 0..m {
            for j in 0..k {
                v[[i, j]] = a[[i, j]] - bv[[i, 0]];
            }
        }
        drop(a);
        drop(bv);
        self.binary(b, v, Op::SubRow(self.id, b.id))
    }

    /// Broadcast add a `[k]` vector to every row of `[m,k]`.
    pub fn add_row_vec(self, b: Var<'t>) -> Var<'t> {
        let a = self.value();
        let bv = b.value();
        let (m, k) = dims2(&a);
        assert_eq!(bv.len(), k, "row vector length mismatch");
        let mut v = ArrayD::zeros(IxDyn(&[m, k]));
        for i in 0..m {
            for j in 0..k {
                v[[i, j]] = a[[i, j]] + bv[[j]];
            }
        }
        drop(a);
        drop(bv);
        self.binary(b, v, Op::AddRowVec(self.id, b.id))
    }

    pub fn emax(self, other: Var<'t>) -> Var<'t> {
        let v = ndarray::Zip::from(&*self.value())
            .and(&*other.value())
            .map_collect(|&x, &y| x.max(y));
        self.binary(other, v, Op::EMax(self.id, other.id))
    }

    pub fn emin(self, other: Var<'t>) -> Var<'t> {
        let v = ndarray::Zip::from(&*self.value())
            .and(&*other.value())
            .map_collect(|&x, &y| x.min(y));
        self.binary(other, v, Op::EMin(self.id, other.id))
    }

    /// Channel-wise max of `[N,C,H,W]`, giving `[N,1,H,W]`.
    pub fn channel_max(self) -> Var<'t> {
        let a = self.value();
        let shape = a.shape().to_vec();
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let mut v = ArrayD::zeros(IxDyn(&[n, 1, h, w]));
        let mut argmax = vec![0usize; n * h * w];
        for ni in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_c = 0;
                    for ci in 0..c {
                        let val = a[[ni, ci, y, x]];
                        if val > best {
                            best = val;
                            best_c = ci;
                        }
                    }
                    v[[ni, 0, y, x]] = best;
                    argmax[(ni * h + y) * w + x] = best_c;
                }
            }
        }
        drop(a);
        self.unary(v, Op::ChannelMax(self.id, argmax))
    }

    /// Channel-wise mean of `[N,C,H,W]`, giving `[N,1,H,W]`.
    pub fn channel_mean(self) -> Var<'t> {
        let a = self.value();
        let shape = a.shape().to_vec();
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let mut v = ArrayD::zeros(IxDyn(&[n, 1, h, w]));
        for ni in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        acc += a[[ni, ci, y, x]];
                    }
                    v[[ni, 0, y, x]] = acc / c as f64;
                }
            }
        }
        drop(a);
        self.unary(v, Op::ChannelMean(self.id))
    }

    /// Gate `[N,C,H,W]` features with a `[N,1,H,W]` map.
    pub fn mul_chan(self, gate: Var<'t>) -> Var<'t> {
        let a = self.value();
        let b = gate.value();
        let shape = a.shape().to_vec();
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        assert_eq!(b.shape(), &[n, 1, h, w], "gate shape mismatch");
        let mut v = ArrayD::zeros(a.raw_dim());
        for ni in 0..n {
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        v[[ni, ci, y, x]] = a[[ni, ci, y, x]] * b[[ni, 0, y, x]];
                    }
                }
            }
        }
        drop(a);
        drop(b);
        self.binary(gate, v, Op::MulChan(self.id, gate.id))
    }

    pub fn concat(parts: &[Var<'t>], axis: usize) -> Var<'t> {
        assert!(!parts.is_empty());
        let tape = parts[0].tape;
        let values: Vec<_> = parts.iter().map(|p| p.to_array()).collect();
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let v = ndarray::concatenate(Axis(axis), &views).expect("concat shapes");
        let needs = parts.iter().any(|p| tape.needs(p.id));
        tape.push(v, Op::Concat(parts.iter().map(|p| p.id).collect(), axis), needs)
    }

    /// Gather `(n, y, x)` cells of `[N,C,H,W]` into a `[M,C]` matrix.
    pub fn gather_cells(self, coords: Vec<(usize, usize, usize)>) -> Var<'t> {
        let a = self.value();
        let c = a.shape()[1];
        let mut v = ArrayD::zeros(IxDyn(&[coords.len(), c]));
        for (row, &(n, y, x)) in coords.iter().enumerate() {
            for ch in 0..c {
                v[[row, ch]] = a[[n, ch, y, x]];
            }
        }
        drop(a);
        self.unary(v, Op::GatherCells(self.id, coords))
    }

    pub fn gather_rows(self, rows: Vec<usize>) -> Var<'t> {
        let a = self.value();
        let k = a.shape()[1];
        let mut v = ArrayD::zeros(IxDyn(&[rows.len(), k]));
        for (out_row, &src) in rows.iter().enumerate() {
            for j in 0..k {
                v[[out_row, j]] = a[[src, j]];
            }
        }
        drop(a);
        self.unary(v, Op::GatherRows(self.id, rows))
    }

    /// Single column of `[m,k]` as `[m,1]`.
    pub fn gather_col(self, col: usize) -> Var<'t> {
        let a = self.value();
        let m = a.shape()[0];
        let mut v = ArrayD::zeros(IxDyn(&[m, 1]));
        for i in 0..m {
            v[[i, 0]] = a[[i, col]];
        }
        drop(a);
        self.unary(v, Op::GatherCol(self.id, col))
    }

    /// Resize `[N,C,H,W]` to `[N,C,oh,ow]`, bilinear, half-pixel centers.
    pub fn bilinear_resize(self, oh: usize, ow: usize) -> Var<'t> {
        let v = bilinear_resize_forward(&self.value(), oh, ow);
        self.unary(v, Op::BilinearResize(self.id))
    }

    /// Crop each roi to an `[R,C,S,S]` stack (one bilinear sample per bin).
    pub fn bilinear_crop(self, rois: Vec<Roi>, s: usize) -> Var<'t> {
        let v = bilinear_crop_forward(&self.value(), &rois, s);
        self.unary(v, Op::BilinearCrop(self.id, rois, s))
    }

    pub fn conv2d(self, weight: Var<'t>, bias: Option<Var<'t>>, stride: usize, pad: usize) -> Var<'t> {
        let v = conv2d_forward(
            &self.value(),
            &weight.value(),
            bias.map(|b| b.to_array()).as_ref(),
            stride,
            pad,
        );
        let needs = self.tape.needs(self.id)
            || self.tape.needs(weight.id)
            || bias.map(|b| self.tape.needs(b.id)).unwrap_or(false);
        self.tape.push(
            v,
            Op::Conv2d {
                input: self.id,
                weight: weight.id,
                bias: bias.map(|b| b.id),
                stride,
                pad,
            },
            needs,
        )
    }

    /// Training-mode batch normalization over `(N,H,W)` per channel.
    /// Returns the output plus the batch mean/variance for running-stat
    /// updates by the caller.
    pub fn batch_norm(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> (Var<'t>, Vec<f64>, Vec<f64>) {
        let a = self.value();
        let shape = a.shape().to_vec();
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let m = (n * h * w) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ci in 0..c {
            let mut acc = 0.0;
            for ni in 0..n {
                for y in 0..h {
                    for x in 0..w {
                        acc += a[[ni, ci, y, x]];
                    }
                }
            }
            mean[ci] = acc / m;
            let mut acc2 = 0.0;
            for ni in 0..n {
                for y in 0..h {
                    for x in 0..w {
                        let d = a[[ni, ci, y, x]] - mean[ci];
                        acc2 += d * d;
                    }
                }
            }
            var[ci] = acc2 / m;
        }
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = ArrayD::zeros(a.raw_dim());
        let mut out = ArrayD::zeros(a.raw_dim());
        {
            let gv = gamma.value();
            let bv = beta.value();
            for ni in 0..n {
                for ci in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            let xh = (a[[ni, ci, y, x]] - mean[ci]) * inv_std[ci];
                            xhat[[ni, ci, y, x]] = xh;
                            out[[ni, ci, y, x]] = gv[[ci]] * xh + bv[[ci]];
                        }
                    }
                }
            }
        }
        drop(a);
        let needs = self.tape.needs(self.id)
            || self.tape.needs(gamma.id)
            || self.tape.needs(beta.id);
        let var_node = self.tape.push(
            out,
            Op::BatchNorm {
                input: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
            },
            needs,
        );
        (var_node, mean, var)
    }

    /// Per-channel affine with constant coefficients (eval-mode norm).
    pub fn channel_affine(self, scale: Vec<f64>, shift: Vec<f64>) -> Var<'t> {
        let a = self.value();
        let shape = a.shape().to_vec();
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        assert_eq!(scale.len(), c);
        let mut v = ArrayD::zeros(a.raw_dim());
        for ni in 0..n {
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        v[[ni, ci, y, x]] = a[[ni, ci, y, x]] * scale[ci] + shift[ci];
                    }
                }
            }
        }
        drop(a);
        self.unary(v, Op::ChannelAffine(self.id, scale))
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        let v = self
            .to_array()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape");
        self.unary(v, Op::Reshape(self.id))
    }

    /// Same value, no gradient flow.
    pub fn detach(self) -> Var<'t> {
        let v = self.to_array();
        self.tape.push(v, Op::Detach, false)
    }
}

// ---------------------------------------------------------------------------
// conv2d via im2col
// ---------------------------------------------------------------------------

fn conv_out_len(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// Patch matrix for the whole batch: `[c*k*k, n*oh*ow]`, one GEMM per conv.
fn im2col_batch(
    x: &ArrayD<f64>,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> ndarray::Array2<f64> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let mut col = ndarray::Array2::<f64>::zeros((c * k * k, n * oh * ow));
    let cols = col.as_slice_mut().unwrap();
    let row_len = n * oh * ow;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let base = row * row_len;
                for ni in 0..n {
                    let x_base = (ni * c + ci) * h * w;
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let x_row = x_base + iy as usize * w;
                        let out_row = base + (ni * oh + oy) * ow;
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            cols[out_row + ox] = xs[x_row + ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

fn conv2d_forward(
    x: &ArrayD<f64>,
    w: &ArrayD<f64>,
    bias: Option<&ArrayD<f64>>,
    stride: usize,
    pad: usize,
) -> ArrayD<f64> {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, wc, k, _) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    assert_eq!(c, wc, "conv2d channel mismatch");
    let oh = conv_out_len(h, k, stride, pad);
    let ow = conv_out_len(wd, k, stride, pad);
    let w2 = w
        .view()
        .into_shape_with_order((o, c * k * k))
        .expect("weight reshape");
    let col = im2col_batch(x, k, stride, pad, oh, ow);
    let res = w2.dot(&col); // [o, n*oh*ow]
    let mut out = ArrayD::zeros(IxDyn(&[n, o, oh, ow]));
    {
        let outs = out.as_slice_mut().unwrap();
        let rs = res.as_slice().unwrap();
        let plane = oh * ow;
        for oi in 0..o {
            let b = bias.map(|bv| bv[[oi]]).unwrap_or(0.0);
            let r_base = oi * n * plane;
            for ni in 0..n {
                let o_base = (ni * o + oi) * plane;
                let r_row = r_base + ni * plane;
                for p in 0..plane {
                    outs[o_base + p] = rs[r_row + p] + b;
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    x: &ArrayD<f64>,
    w: &ArrayD<f64>,
    g: &ArrayD<f64>,
    stride: usize,
    pad: usize,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> (Option<ArrayD<f64>>, Option<ArrayD<f64>>, Option<ArrayD<f64>>) {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, _, k, _) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let (oh, ow) = (g.shape()[2], g.shape()[3]);
    let w2 = w
        .view()
        .into_shape_with_order((o, c * k * k))
        .expect("weight reshape");
    let plane = oh * ow;

    // Gradient rearranged to [o, n*oh*ow] to mirror the forward layout.
    let mut gmat = ndarray::Array2::<f64>::zeros((o, n * plane));
    {
        let g = g.as_standard_layout();
        let gs = g.as_slice().expect("standard layout");
        let gm = gmat.as_slice_mut().unwrap();
        for ni in 0..n {
            for oi in 0..o {
                let src = (ni * o + oi) * plane;
                let dst = oi * n * plane + ni * plane;
                gm[dst..dst + plane].copy_from_slice(&gs[src..src + plane]);
            }
        }
    }

    let db = if need_db {
        let mut db = ndarray::Array1::<f64>::zeros(o);
        for oi in 0..o {
            db[oi] = gmat.row(oi).sum();
        }
        Some(db.into_dyn())
    } else {
        None
    };

    let dw = if need_dw {
        let col = im2col_batch(x, k, stride, pad, oh, ow);
        let dw2 = gmat.dot(&col.t()).as_standard_layout().to_owned();
        Some(
            dw2.into_shape_with_order(IxDyn(&[o, c, k, k]))
                .expect("dw reshape"),
        )
    } else {
        None
    };

    let dx = if need_dx {
        let dcol = w2.t().dot(&gmat); // [c*k*k, n*oh*ow]
        let dcs = dcol.as_slice().unwrap();
        let mut dx = ArrayD::zeros(x.raw_dim());
        let dxs = dx.as_slice_mut().unwrap();
        let row_len = n * plane;
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let base = row * row_len;
                    for ni in 0..n {
                        let x_base = (ni * c + ci) * h * wd;
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let x_row = x_base + iy as usize * wd;
                            let src_row = base + (ni * oh + oy) * ow;
                            for ox in 0..ow {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                dxs[x_row + ix as usize] += dcs[src_row + ox];
                            }
                        }
                    }
                }
            }
        }
        Some(dx)
    } else {
        None
    };

    (dx, dw, db)
}

// ---------------------------------------------------------------------------
// bilinear sampling
// ---------------------------------------------------------------------------

/// Source coordinate and 2-tap weights for one output index
/// (half-pixel-center convention, clamped to the border).
fn bilinear_taps(out_len: usize, in_len: usize, idx: usize) -> (usize, usize, f64) {
    let scale = in_len as f64 / out_len as f64;
    let src = (idx as f64 + 0.5) * scale - 0.5;
    let src = src.clamp(0.0, (in_len - 1) as f64);
    let lo = src.floor() as usize;
    let hi = (lo + 1).min(in_len - 1);
    (lo, hi, src - lo as f64)
}

pub(crate) fn bilinear_resize_forward(x: &ArrayD<f64>, oh: usize, ow: usize) -> ArrayD<f64> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut out = ArrayD::zeros(IxDyn(&[n, c, oh, ow]));
    for oy in 0..oh {
        let (y0, y1, fy) = bilinear_taps(oh, h, oy);
        for ox in 0..ow {
            let (x0, x1, fx) = bilinear_taps(ow, w, ox);
            for ni in 0..n {
                for ci in 0..c {
                    let v = x[[ni, ci, y0, x0]] * (1.0 - fy) * (1.0 - fx)
                        + x[[ni, ci, y0, x1]] * (1.0 - fy) * fx
                        + x[[ni, ci, y1, x0]] * fy * (1.0 - fx)
                        + x[[ni, ci, y1, x1]] * fy * fx;
                    out[[ni, ci, oy, ox]] = v;
                }
            }
        }
    }
    out
}

fn bilinear_resize_backward(x: &ArrayD<f64>, out: &ArrayD<f64>, g: &ArrayD<f64>) -> ArrayD<f64> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oh, ow) = (out.shape()[2], out.shape()[3]);
    let mut dx = ArrayD::zeros(x.raw_dim());
    for oy in 0..oh {
        let (y0, y1, fy) = bilinear_taps(oh, h, oy);
        for ox in 0..ow {
            let (x0, x1, fx) = bilinear_taps(ow, w, ox);
            for ni in 0..n {
                for ci in 0..c {
                    let gv = g[[ni, ci, oy, ox]];
                    dx[[ni, ci, y0, x0]] += gv * (1.0 - fy) * (1.0 - fx);
                    dx[[ni, ci, y0, x1]] += gv * (1.0 - fy) * fx;
                    dx[[ni, ci, y1, x0]] += gv * fy * (1.0 - fx);
                    dx[[ni, ci, y1, x1]] += gv * fy * fx;
                }
            }
        }
    }
    dx
}

/// Taps for one crop sample at continuous position `p` (pixel-area coords).
fn crop_taps(p: f64, len: usize) -> (usize, usize, f64) {
    let src = (p - 0.5).clamp(0.0, (len - 1) as f64);
    let lo = src.floor() as usize;
    let hi = (lo + 1).min(len - 1);
    (lo, hi, src - lo as f64)
}

fn bilinear_crop_forward(x: &ArrayD<f64>, rois: &[Roi], s: usize) -> ArrayD<f64> {
    let c = x.shape()[1];
    let (h, w) = (x.shape()[2], x.shape()[3]);
    let mut out = ArrayD::zeros(IxDyn(&[rois.len(), c, s, s]));
    for (r, &(n, x1, y1, x2, y2)) in rois.iter().enumerate() {
        debug_assert!(x2 > x1 && y2 > y1, "degenerate roi");
        let bw = x2 - x1;
        let bh = y2 - y1;
        for i in 0..s {
            let py = y1 + (i as f64 + 0.5) * bh / s as f64;
            let (y0, y1t, fy) = crop_taps(py, h);
            for j in 0..s {
                let px = x1 + (j as f64 + 0.5) * bw / s as f64;
                let (x0, x1t, fx) = crop_taps(px, w);
                for ci in 0..c {
                    out[[r, ci, i, j]] = x[[n, ci, y0, x0]] * (1.0 - fy) * (1.0 - fx)
                        + x[[n, ci, y0, x1t]] * (1.0 - fy) * fx
                        + x[[n, ci, y1t, x0]] * fy * (1.0 - fx)
                        + x[[n, ci, y1t, x1t]] * fy * fx;
                }
            }
        }
    }
    out
}

fn bilinear_crop_backward(x: &ArrayD<f64>, rois: &[Roi], s: usize, g: &ArrayD<f64>) -> ArrayD<f64> {
    let c = x.shape()[1];
    let (h, w) = (x.shape()[2], x.shape()[3]);
    let mut dx = ArrayD::zeros(x.raw_dim());
    for (r, &(n, x1, y1, x2, y2)) in rois.iter().enumerate() {
        let bw = x2 - x1;
        let bh = y2 - y1;
        for i in 0..s {
            let py = y1 + (i as f64 + 0.5) * bh / s as f64;
            let (y0, y1t, fy) = crop_taps(py, h);
            for j in 0..s {
                let px = x1 + (j as f64 + 0.5) * bw / s as f64;
                let (x0, x1t, fx) = crop_taps(px, w);
                for ci in 0..c {
                    let gv = g[[r, ci, i, j]];
                    dx[[n, ci, y0, x0]] += gv * (1.0 - fy) * (1.0 - fx);
                    dx[[n, ci, y0, x1t]] += gv * (1.0 - fy) * fx;
                    dx[[n, ci, y1t, x0]] += gv * fy * (1.0 - fx);
                    dx[[n, ci, y1t, x1t]] += gv * fy * fx;
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::Rng;

    /// Central finite differences on every element of every input against
    /// the tape gradient of `f`.
    fn check_grads(
        inputs: &[ArrayD<f64>],
        f: impl Fn(&Tape, &[Var<'_>]) -> f64 + Copy,
        tol: f64,
    ) {
        // f is re-run through a closure that builds vars each call.
        let eval = |arrays: &[ArrayD<f64>]| -> f64 {
            let tape = Tape::new();
            let vars: Vec<Var<'_>> = arrays.iter().map(|a| tape.param(a.clone())).collect();
            f(&tape, &vars)
        };

        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|a| tape.param(a.clone())).collect();
        let loss = build_loss(&tape, &vars, f);
        let grads = tape.backward(loss);

        let h = 1e-5;
        for (vi, input) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[vi]).expect("missing grad").clone();
            for idx in 0..input.len() {
                let mut plus = inputs.to_vec();
                let mut minus = inputs.to_vec();
                plus[vi].as_slice_mut().unwrap()[idx] += h;
                minus[vi].as_slice_mut().unwrap()[idx] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let an = analytic.as_slice().unwrap()[idx];
                let denom = fd.abs().max(an.abs()).max(1.0);
                assert!(
                    (fd - an).abs() / denom < tol,
                    "grad mismatch input {vi} idx {idx}: fd={fd} analytic={an}"
                );
            }
        }
    }

    /// Helper letting `check_grads` closures return the scalar while we also
    /// need the Var: the closure runs the graph and returns the loss value;
    /// this builds the same graph and returns the Var.
    fn build_loss<'t>(
        tape: &'t Tape,
        vars: &[Var<'t>],
        f: impl Fn(&Tape, &[Var<'_>]) -> f64,
    ) -> Var<'t> {
        let before = tape.len();
        let val = f(tape, vars);
        let after = tape.len();
        assert!(after > before, "loss fn must add nodes");
        let loss = Var {
            tape,
            id: after - 1,
        };
        assert!((loss.scalar_value() - val).abs() < 1e-12);
        loss
    }

    fn rand_array(shape: &[usize], rng: &mut impl Rng) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn elementwise_and_reductions() {
        let mut rng = crate::rng::stream(1, "test", 0);
        let a = rand_array(&[3, 4], &mut rng);
        let b = rand_array(&[3, 4], &mut rng).mapv(|x| x + 2.5); // keep away from 0 for div
        check_grads(
            &[a, b],
            |_t, v| {
                let x = v[0].mul(v[1]).add(v[0]).sub(v[1].mul_scalar(0.3));
                let y = x.div(v[1]).exp().mean_all();
                y.scalar_value()
            },
            1e-6,
        );
    }

    #[test]
    fn unary_chain() {
        let mut rng = crate::rng::stream(1, "test", 1);
        let a = rand_array(&[2, 5], &mut rng).mapv(|x| x.abs() + 0.5);
        check_grads(
            &[a],
            |_t, v| {
                let x = v[0]
                    .ln()
                    .add_scalar(1.0)
                    .sqrt()
                    .sigmoid()
                    .softplus()
                    .sum_all();
                x.scalar_value()
            },
            1e-6,
        );
    }

    #[test]
    fn matmul_grads() {
        let mut rng = crate::rng::stream(1, "test", 2);
        let a = rand_array(&[3, 4], &mut rng);
        let b = rand_array(&[4, 2], &mut rng);
        let c = rand_array(&[5, 4], &mut rng);
        check_grads(
            &[a.clone(), b],
            |_t, v| v[0].matmul(v[1]).mean_all().scalar_value(),
            1e-6,
        );
        check_grads(
            &[a, c],
            |_t, v| v[0].matmul_t(v[1]).mean_all().scalar_value(),
            1e-6,
        );
    }

    #[test]
    fn row_ops_grads() {
        let mut rng = crate::rng::stream(1, "test", 3);
        let a = rand_array(&[4, 6], &mut rng);
        let s = rand_array(&[4, 1], &mut rng).mapv(|x| x + 2.0);
        check_grads(
            &[a.clone(), s.clone()],
            |_t, v| v[0].row_scale(v[1]).mean_all().scalar_value(),
            1e-6,
        );
        check_grads(
            &[a.clone(), s],
            |_t, v| v[0].sub_row(v[1]).exp().mean_all().scalar_value(),
            1e-6,
        );
        let bias = rand_array(&[6], &mut rng);
        check_grads(
            &[a.clone(), bias],
            |_t, v| v[0].add_row_vec(v[1]).sigmoid().mean_all().scalar_value(),
            1e-6,
        );
        check_grads(
            &[a],
            |_t, v| v[0].row_sum().sqrt_abs_mean().scalar_value(),
            1e-5,
        );
    }

    // Small harness helper for the row_sum test above.
    trait SqrtAbsMean<'t> {
        fn sqrt_abs_mean(self) -> Var<'t>;
    }
    impl<'t> SqrtAbsMean<'t> for Var<'t> {
        fn sqrt_abs_mean(self) -> Var<'t> {
            self.mul(self).add_scalar(1e-3).sqrt().mean_all()
        }
    }

    #[test]
    fn minmax_and_gather_grads() {
        let mut rng = crate::rng::stream(1, "test", 4);
        let a = rand_array(&[3, 3], &mut rng);
        let b = rand_array(&[3, 3], &mut rng);
        check_grads(
            &[a.clone(), b.clone()],
            |_t, v| v[0].emax(v[1]).mean_all().scalar_value(),
            1e-5,
        );
        check_grads(
            &[a.clone(), b],
            |_t, v| v[0].emin(v[1]).mean_all().scalar_value(),
            1e-5,
        );
        check_grads(
            &[a],
            |_t, v| {
                v[0].gather_rows(vec![2, 0, 2])
                    .mean_all()
                    .scalar_value()
            },
            1e-6,
        );
    }

    #[test]
    fn spatial_ops_grads() {
        let mut rng = crate::rng::stream(1, "test", 5);
        let x = rand_array(&[2, 3, 4, 4], &mut rng);
        let gate = rand_array(&[2, 1, 4, 4], &mut rng);
        check_grads(
            &[x.clone(), gate],
            |_t, v| v[0].mul_chan(v[1]).mean_all().scalar_value(),
            1e-6,
        );
        check_grads(
            &[x.clone()],
            |_t, v| v[0].channel_mean().mean_all().scalar_value(),
            1e-6,
        );
        check_grads(
            &[x.clone()],
            |_t, v| v[0].channel_max().mean_all().scalar_value(),
            1e-5,
        );
        check_grads(
            &[x.clone()],
            |_t, v| {
                v[0].gather_cells(vec![(0, 1, 2), (1, 3, 0)])
                    .mean_all()
                    .scalar_value()
            },
            1e-6,
        );
        check_grads(
            &[x.clone()],
            |_t, v| v[0].bilinear_resize(7, 3).mean_all().scalar_value(),
            1e-6,
        );
        check_grads(
            &[x],
            |_t, v| {
                v[0].bilinear_crop(vec![(0, 0.4, 0.2, 3.1, 2.9), (1, 1.0, 1.0, 4.0, 4.0)], 3)
                    .mean_all()
                    .scalar_value()
            },
            1e-6,
        );
    }

    #[test]
    fn conv_and_batchnorm_grads() {
        let mut rng = crate::rng::stream(1, "test", 6);
        let x = rand_array(&[2, 2, 5, 5], &mut rng);
        let w = rand_array(&[3, 2, 3, 3], &mut rng);
        let b = rand_array(&[3], &mut rng);
        check_grads(
            &[x.clone(), w.clone(), b.clone()],
            |_t, v| {
                v[0].conv2d(v[1], Some(v[2]), 1, 1)
                    .mean_all()
                    .scalar_value()
            },
            1e-6,
        );
        check_grads(
            &[x.clone(), w, b],
            |_t, v| {
                v[0].conv2d(v[1], Some(v[2]), 2, 1)
                    .relu()
                    .mean_all()
                    .scalar_value()
            },
            1e-5,
        );
        let gamma = rand_array(&[2], &mut rng).mapv(|v| v + 1.5);
        let beta = rand_array(&[2], &mut rng);
        check_grads(
            &[x, gamma, beta],
            |_t, v| {
                let (y, _, _) = v[0].batch_norm(v[1], v[2], 1e-5);
                y.mul(y).mean_all().scalar_value()
            },
            1e-4,
        );
    }

    #[test]
    fn concat_and_reshape_grads() {
        let mut rng = crate::rng::stream(1, "test", 7);
        let a = rand_array(&[1, 2, 3, 3], &mut rng);
        let b = rand_array(&[1, 2, 3, 3], &mut rng);
        check_grads(
            &[a.clone(), b],
            |_t, v| {
                Var::concat(&[v[0], v[1]], 1)
                    .mul_scalar(0.5)
                    .mean_all()
                    .scalar_value()
            },
            1e-6,
        );
        check_grads(
            &[a],
            |_t, v| v[0].reshape(&[2, 9]).row_sum().mean_all().scalar_value(),
            1e-6,
        );
    }

    #[test]
    fn detach_blocks_gradient() {
        let tape = Tape::new();
        let a = tape.param(ndarray::arr1(&[2.0, 3.0]).into_dyn());
        let s = a.mul(a).sum_all();
        let ratio = s.div(s.detach());
        assert!((ratio.scalar_value() - 1.0).abs() < 1e-15);
        let grads = tape.backward(ratio);
        let da = grads.get(a).unwrap();
        // d(s/const)/da = 2a / s_val
        let s_val = 13.0;
        assert!((da[[0]] - 4.0 / s_val).abs() < 1e-12);
        assert!((da[[1]] - 6.0 / s_val).abs() < 1e-12);
    }

    #[test]
    fn constant_paths_get_no_grad() {
        let tape = Tape::new();
        let c = tape.constant(ndarray::arr1(&[1.0, 2.0]).into_dyn());
        let p = tape.param(ndarray::arr1(&[3.0, 4.0]).into_dyn());
        let loss = c.mul(p).sum_all();
        let grads = tape.backward(loss);
        assert!(grads.get(c).is_none());
        assert!(grads.get(p).is_some());
    }

    #[test]
    fn bilinear_resize_identity() {
        let mut rng = crate::rng::stream(1, "test", 8);
        let x = rand_array(&[1, 1, 4, 5], &mut rng);
        let tape = Tape::new();
        let v = tape.constant(x.clone());
        let y = v.bilinear_resize(4, 5);
        assert_eq!(&*y.value(), &x);
    }
}
