//! Wengert-list reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value. `backward`
//! walks the list in reverse and accumulates gradients into the parents of
//! each node that participates in a gradient path. Shape mismatches inside a
//! forward pass are programming errors and panic.

use std::sync::Arc;

use crate::conv::{conv2d_backward, conv2d_forward, ConvGeom};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    Exp(Var),
    Reshape(Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, batch: usize },
    Upsample2(Var),
    ConcatChannels(Var, Var),
    GlobalAvgPool(Var),
    Linear { x: Var, w: Var, b: Option<Var>, rows: usize, inputs: usize, outputs: usize },
    GraphProp { x: Var, operator: Arc<Vec<T>>, nodes: usize },
    Loss { x: Var, grad: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&[T]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Moves a gradient out, leaving `None`.
    pub fn take(&mut self, var: Var) -> Option<Vec<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) {
    assert_eq!(a.shape(), b.shape(), "{what}: shape mismatch");
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, len: usize) -> &mut Vec<T> {
    slot.get_or_insert_with(|| vec![T::zero(); len])
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        same_shape(va, vb, what);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_vec(va.shape(), data).expect("same shape");
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.nodes[a.0].value.map(f);
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        self.unary(a, |x| if x > T::zero() { x } else { x * slope }, Op::LeakyRelu(a, slope))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, T::exp, Op::Exp(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = self.nodes[a.0].value.clone().reshape(shape).expect("reshape: element count");
        let rg = self.rg(a);
        self.push(value, Op::Reshape(a), rg)
    }

    /// `x: [N, C, H, W]`, `w: [O, C, k, k]`, `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be NCHW, got {xs:?}");
        assert_eq!(ws.len(), 4, "conv2d weight must be OCkk, got {ws:?}");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch: input {xs:?}, weight {ws:?}");
        assert_eq!(ws[2], ws[3], "conv2d kernel must be square");
        let geom = ConvGeom {
            in_channels: xs[1],
            out_channels: ws[0],
            height: xs[2],
            width: xs[3],
            kernel: ws[2],
            stride,
            pad,
        };
        if let Some(b) = b {
            assert_eq!(self.shape(b), &[ws[0]], "conv2d bias shape");
        }
        let out = conv2d_forward(
            &geom,
            xs[0],
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let value = Tensor::from_vec(&[xs[0], ws[0], geom.out_height(), geom.out_width()], out).expect("conv shape");
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(value, Op::Conv2d { x, w, b, geom, batch: xs[0] }, rg)
    }

    /// Nearest-neighbour 2x upsampling of an NCHW tensor.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 4, "upsample2 expects NCHW");
        let (h, w) = (s[2], s[3]);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len() * 4];
        for (p, plane) in src.chunks(h * w).enumerate() {
            let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
            for i in 0..2 * h {
                for j in 0..2 * w {
                    dst[i * 2 * w + j] = plane[(i / 2) * w + j / 2];
                }
            }
        }
        let value = Tensor::from_vec(&[s[0], s[1], 2 * h, 2 * w], out).expect("upsample shape");
        let rg = self.rg(x);
        self.push(value, Op::Upsample2(x), rg)
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(
            sa.len() == 4 && sb.len() == 4 && sa[0] == sb[0] && sa[2..] == sb[2..],
            "concat_channels: incompatible {sa:?} and {sb:?}"
        );
        let (la, lb) = (sa[1] * sa[2] * sa[3], sb[1] * sb[2] * sb[3]);
        let mut out = Vec::with_capacity(sa[0] * (la + lb));
        for n in 0..sa[0] {
            out.extend_from_slice(&self.value(a).data()[n * la..(n + 1) * la]);
            out.extend_from_slice(&self.value(b).data()[n * lb..(n + 1) * lb]);
        }
        let value = Tensor::from_vec(&[sa[0], sa[1] + sb[1], sa[2], sa[3]], out).expect("concat shape");
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::ConcatChannels(a, b), rg)
    }

    /// `[N, C, H, W] -> [N, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 4, "global_avg_pool expects NCHW");
        let hw = s[2] * s[3];
        let inv = T::one() / T::from_usize(hw).unwrap();
        let out = self.value(x).data().chunks(hw).map(|c| c.iter().copied().sum::<T>() * inv).collect();
        let value = Tensor::from_vec(&[s[0], s[1]], out).expect("pool shape");
        let rg = self.rg(x);
        self.push(value, Op::GlobalAvgPool(x), rg)
    }

    /// Affine map over the last axis: `x: [.., in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 2, "linear weight must be 2-D");
        let inputs = *xs.last().expect("linear input rank >= 1");
        assert_eq!(inputs, ws[0], "linear: input features {inputs} vs weight {ws:?}");
        let outputs = ws[1];
        let rows = self.value(x).numel() / inputs;
        let mut out = vec![T::zero(); rows * outputs];
        let beta = if let Some(b) = b {
            assert_eq!(self.shape(b), &[outputs], "linear bias shape");
            let bias = self.value(b).data();
            for r in out.chunks_mut(outputs) {
                r.copy_from_slice(bias);
            }
            T::one()
        } else {
            T::zero()
        };
        T::gemm(rows, inputs, outputs, T::one(), self.value(x).data(), false, self.value(w).data(), false, beta, &mut out);
        let mut shape = xs.clone();
        *shape.last_mut().unwrap() = outputs;
        let value = Tensor::from_vec(&shape, out).expect("linear shape");
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(value, Op::Linear { x, w, b, rows, inputs, outputs }, rg)
    }

    /// Left-multiplies each `[nodes, F]` slab of `x: [B, nodes, F]` by a fixed
    /// `nodes x nodes` operator.
    pub fn graph_prop(&mut self, x: Var, operator: &Arc<Vec<T>>) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 3, "graph_prop expects [B, nodes, F]");
        let nodes = s[1];
        assert_eq!(operator.len(), nodes * nodes, "graph operator size");
        let f = s[2];
        let mut out = vec![T::zero(); self.value(x).numel()];
        for (src, dst) in self.value(x).data().chunks(nodes * f).zip(out.chunks_mut(nodes * f)) {
            T::gemm(nodes, nodes, f, T::one(), operator, false, src, false, T::zero(), dst);
        }
        let value = Tensor::from_vec(&s, out).expect("graph shape");
        let rg = self.rg(x);
        self.push(value, Op::GraphProp { x, operator: Arc::clone(operator), nodes }, rg)
    }

    /// Scalar node whose value and input-gradient were computed outside the
    /// tape (closed-form loss functions).
    pub fn external_loss(&mut self, x: Var, value: T, grad: Vec<T>) -> Var {
        assert_eq!(grad.len(), self.value(x).numel(), "external_loss gradient length");
        let rg = self.rg(x);
        self.push(Tensor::scalar(value), Op::Loss { x, grad }, rg)
    }

    /// Reverse sweep from a single-element node.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert_eq!(self.value(root).numel(), 1, "backward root must be a scalar");
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop(&node.op, &node.value, &g, &mut grads);
        }
        // Only leaves keep their gradient.
        for (slot, node) in grads.iter_mut().zip(&self.nodes) {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                *slot = None;
            }
        }
        Gradients { grads }
    }

    fn backprop(&self, op: &Op<T>, out: &Tensor<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let len = |v: Var| self.nodes[v.0].value.numel();
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let neg = matches!(op, Op::Sub(..));
                if self.rg(a) {
                    for (d, &gv) in accumulate(&mut grads[a.0], len(a)).iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                if self.rg(b) {
                    for (d, &gv) in accumulate(&mut grads[b.0], len(b)).iter_mut().zip(g) {
                        if neg {
                            *d -= gv;
                        } else {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.rg(a) {
                    let vb = self.value(b).data();
                    for ((d, &gv), &y) in accumulate(&mut grads[a.0], len(a)).iter_mut().zip(g).zip(vb) {
                        *d += gv * y;
                    }
                }
                if self.rg(b) {
                    let va = self.value(a).data();
                    for ((d, &gv), &x) in accumulate(&mut grads[b.0], len(b)).iter_mut().zip(g).zip(va) {
                        *d += gv * x;
                    }
                }
            }
            Op::Scale(a, c) => {
                for (d, &gv) in accumulate(&mut grads[a.0], len(a)).iter_mut().zip(g) {
                    *d += gv * c;
                }
            }
            Op::Relu(a) => {
                let va = self.value(a).data();
                for ((d, &gv), &x) in accumulate(&mut grads[a.0], len(a)).iter_mut().zip(g).zip(va) {
                    if x > T::zero() {
                        *d += gv;
                    }
                }
            }
            Op::LeakyRelu(a, slope) => {
                let va = self.value(a).data();
                for ((d, &gv), &x) in accumulate(&mut grads[a.0], len(a)).iter_mut().zip(g).zip(va) {
                    *d += if x > T::zero() { gv } else { gv * slope };
                }
            }
            Op::Sigmoid(a) => {
                for ((d, &gv), &y) in accumulate(&mut grads[a.0], len(a)).iter_mut().zip(g).zip(out.data()) {
                    *d += gv * y * (T::one() - y);
                }
            }
            Op::Exp(a) => {
                for ((d, &gv), &y) in accumulate(&mut grads[a.0], len(a)).iter_mut().zip(g).zip(out.data()) {
                    *d += gv * y;
                }
            }
            Op::Reshape(a) => {
                for (d, &gv) in accumulate(&mut grads[a.0], len(a)).iter_mut().zip(g) {
                    *d += gv;
                }
            }
            Op::Conv2d { x, w, b, geom, batch } => {
                // Disjoint slots: x, w, b are distinct nodes.
                let mut dx = if self.rg(x) { grads[x.0].take().or_else(|| Some(vec![T::zero(); len(x)])) } else { None };
                let mut dw = if self.rg(w) { grads[w.0].take().or_else(|| Some(vec![T::zero(); len(w)])) } else { None };
                let mut db = match b {
                    Some(b) if self.rg(b) => grads[b.0].take().or_else(|| Some(vec![T::zero(); len(b)])),
                    _ => None,
                };
                conv2d_backward(
                    &geom,
                    batch,
                    self.value(x).data(),
                    self.value(w).data(),
                    g,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if dx.is_some() {
                    grads[x.0] = dx;
                }
                if dw.is_some() {
                    grads[w.0] = dw;
                }
                if let (Some(b), Some(db)) = (b, db) {
                    grads[b.0] = Some(db);
                }
            }
            Op::Upsample2(x) => {
                let s = self.shape(x);
                let (h, w) = (s[2], s[3]);
                let dx = accumulate(&mut grads[x.0], len(x));
                for (plane, gp) in dx.chunks_mut(h * w).zip(g.chunks(4 * h * w)) {
                    for i in 0..2 * h {
                        for j in 0..2 * w {
                            plane[(i / 2) * w + j / 2] += gp[i * 2 * w + j];
                        }
                    }
                }
            }
            Op::ConcatChannels(a, b) => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                let (la, lb) = (sa[1] * sa[2] * sa[3], sb[1] * sb[2] * sb[3]);
                let n = sa[0];
                if self.rg(a) {
                    let da = accumulate(&mut grads[a.0], n * la);
                    for i in 0..n {
                        for (d, &gv) in da[i * la..(i + 1) * la].iter_mut().zip(&g[i * (la + lb)..]) {
                            *d += gv;
                        }
                    }
                }
                if self.rg(b) {
                    let db = accumulate(&mut grads[b.0], n * lb);
                    for i in 0..n {
                        for (d, &gv) in db[i * lb..(i + 1) * lb].iter_mut().zip(&g[i * (la + lb) + la..]) {
                            *d += gv;
                        }
                    }
                }
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(x);
                let hw = s[2] * s[3];
                let inv = T::one() / T::from_usize(hw).unwrap();
                let dx = accumulate(&mut grads[x.0], len(x));
                for (plane, &gv) in dx.chunks_mut(hw).zip(g) {
                    for d in plane {
                        *d += gv * inv;
                    }
                }
            }
            Op::Linear { x, w, b, rows, inputs, outputs } => {
                if self.rg(x) {
                    let dx = accumulate(&mut grads[x.0], rows * inputs);
                    // dx[rows, in] += g[rows, out] * w[in, out]^T
                    T::gemm(rows, outputs, inputs, T::one(), g, false, self.value(w).data(), true, T::one(), dx);
                }
                if self.rg(w) {
                    let dw = accumulate(&mut grads[w.0], inputs * outputs);
                    // dw[in, out] += x[rows, in]^T * g[rows, out]
                    T::gemm(inputs, rows, outputs, T::one(), self.value(x).data(), true, g, false, T::one(), dw);
                }
                if let Some(b) = b {
                    if self.rg(b) {
                        let db = accumulate(&mut grads[b.0], outputs);
                        for r in g.chunks(outputs) {
                            for (d, &gv) in db.iter_mut().zip(r) {
                                *d += gv;
                            }
                        }
                    }
                }
            }
            Op::GraphProp { x, ref operator, nodes } => {
                let f = self.shape(x)[2];
                let dx = accumulate(&mut grads[x.0], len(x));
                for (dst, gs) in dx.chunks_mut(nodes * f).zip(g.chunks(nodes * f)) {
                    T::gemm(nodes, nodes, f, T::one(), operator, true, gs, false, T::one(), dst);
                }
            }
            Op::Loss { x, ref grad } => {
                let scale = g[0];
                for (d, &gv) in accumulate(&mut grads[x.0], len(x)).iter_mut().zip(grad) {
                    *d += gv * scale;
                }
            }
        }
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
