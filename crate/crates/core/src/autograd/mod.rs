//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s in creation
//! order, which is also a valid topological order, so [`Graph::backward`] is a
//! single reverse sweep. Values are reference counted so frozen model weights can
//! be bound as leaves without copying.

pub mod kernels;

use std::cell::RefCell;
use std::sync::Arc;

use crate::tensor::Tensor;
use kernels::ConvGeom;

/// Elementwise nonlinearities and affine maps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    Silu,
    Softplus,
    Abs,
    /// `sqrt(x² + ε²) - ε`
    SmoothAbs(f64),
    Log,
    Exp,
    Square,
    Clamp(f64, f64),
    /// `scale * x + shift`
    Affine(f64, f64),
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Relu => x.max(0.0),
            Unary::LeakyRelu(a) => {
                if x > 0.0 {
                    x
                } else {
                    a * x
                }
            }
            Unary::Sigmoid => sigmoid(x),
            Unary::Silu => x * sigmoid(x),
            Unary::Softplus => softplus(x),
            Unary::Abs => x.abs(),
            Unary::SmoothAbs(eps) => (x * x + eps * eps).sqrt() - eps,
            Unary::Log => x.ln(),
            Unary::Exp => x.exp(),
            Unary::Square => x * x,
            Unary::Clamp(lo, hi) => x.clamp(lo, hi),
            Unary::Affine(s, t) => s * x + t,
        }
    }

    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::LeakyRelu(a) => {
                if x > 0.0 {
                    1.0
                } else {
                    a
                }
            }
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Silu => {
                let s = sigmoid(x);
                s + x * s * (1.0 - s)
            }
            Unary::Softplus => sigmoid(x),
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Unary::SmoothAbs(eps) => x / (x * x + eps * eps).sqrt(),
            Unary::Log => 1.0 / x,
            Unary::Exp => y,
            Unary::Square => 2.0 * x,
            Unary::Clamp(lo, hi) => {
                if x >= lo && x <= hi {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Affine(s, _) => s,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Unary(usize, Unary),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    MulChannel { x: usize, gate: usize },
    AddBias { x: usize, bias: usize },
    Conv { x: usize, weight: usize, geom: ConvGeom },
    Upsample2x(usize),
    Concat(Vec<usize>),
    Slice { x: usize, start: usize },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    GlobalAvgPool(usize),
    Linear { x: usize, weight: usize, bias: usize },
    Sum(usize),
    SumPerSample(usize),
    Blur { x: usize, taps: Vec<f64> },
    DiffW(usize),
    DiffH(usize),
    Reshape(usize),
    Gram(usize),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Recording tape for one forward/backward computation.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    id: usize,
    graph: &'g Graph,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.shape())
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or zeros when nothing flowed into it.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(v.shape()))
    }

    pub fn take(&mut self, v: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that gradients flow into.
    pub fn param(&self, value: impl Into<Arc<Tensor>>) -> Var<'_> {
        self.leaf(value.into(), true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&self, value: impl Into<Arc<Tensor>>) -> Var<'_> {
        self.leaf(value.into(), false)
    }

    pub fn leaf(&self, value: Arc<Tensor>, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            id: nodes.len() - 1,
            graph: self,
        }
    }

    fn push(&self, value: Tensor, op: Op, parents: &[usize]) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|&p| nodes[p].requires_grad);
        nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var {
            id: nodes.len() - 1,
            graph: self,
        }
    }

    fn value_of(&self, id: usize) -> Arc<Tensor> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    /// Reverse sweep from a scalar root, seeding its gradient with one.
    pub fn backward(&self, root: Var<'_>) -> Gradients {
        let seed = Tensor::ones(root.shape());
        self.backward_with(root, seed)
    }

    /// Reverse sweep from `root` with an explicit upstream gradient.
    pub fn backward_with(&self, root: Var<'_>, seed: Tensor) -> Gradients {
        assert!(std::ptr::eq(root.graph, self), "root belongs to another graph");
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        assert_eq!(seed.shape(), nodes[root.id].value.shape());
        grads[root.id] = Some(seed);
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            propagate(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads }
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn propagate(nodes: &[Node], node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let val = |id: usize| -> &Tensor { &nodes[id].value };
    let y = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Unary(x, f) => {
            let xv = val(*x);
            let data = xv
                .data()
                .iter()
                .zip(y.data())
                .zip(g.data())
                .map(|((&xi, &yi), &gi)| gi * f.derivative(xi, yi))
                .collect();
            accumulate(nodes, grads, *x, Tensor::new(xv.shape(), data));
        }
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.scale(-1.0));
        }
        Op::Mul(a, b) => {
            accumulate(nodes, grads, *a, g.zip_map(val(*b), |gi, bi| gi * bi));
            accumulate(nodes, grads, *b, g.zip_map(val(*a), |gi, ai| gi * ai));
        }
        Op::Div(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            accumulate(nodes, grads, *a, g.zip_map(bv, |gi, bi| gi / bi));
            let gb = g
                .data()
                .iter()
                .zip(av.data())
                .zip(bv.data())
                .map(|((&gi, &ai), &bi)| -gi * ai / (bi * bi))
                .collect();
            accumulate(nodes, grads, *b, Tensor::new(bv.shape(), gb));
        }
        Op::MulChannel { x, gate } => {
            let (xv, gv) = (val(*x), val(*gate));
            let (n, c, h, w) = xv.dims4();
            let hw = h * w;
            let mut gx = vec![0.0; xv.len()];
            let mut gg = vec![0.0; gv.len()];
            for s in 0..n {
                for ch in 0..c {
                    let base = (s * c + ch) * hw;
                    for p in 0..hw {
                        gx[base + p] = g.data()[base + p] * gv.data()[s * hw + p];
                        gg[s * hw + p] += g.data()[base + p] * xv.data()[base + p];
                    }
                }
            }
            accumulate(nodes, grads, *x, Tensor::new(xv.shape(), gx));
            accumulate(nodes, grads, *gate, Tensor::new(gv.shape(), gg));
        }
        Op::AddBias { x, bias } => {
            let shape = val(*x).shape().to_vec();
            let c = shape[1];
            let inner: usize = shape[2..].iter().product();
            let mut gb = vec![0.0; c];
            for (i, gi) in g.data().iter().enumerate() {
                gb[(i / inner) % c] += gi;
            }
            accumulate(nodes, grads, *x, g.clone());
            accumulate(nodes, grads, *bias, Tensor::new(vec![c], gb));
        }
        Op::Conv { x, weight, geom } => {
            let (xv, wv) = (val(*x), val(*weight));
            let n = xv.shape()[0];
            if nodes[*x].requires_grad {
                let dx = kernels::conv2d_backward_input(g.data(), n, geom, wv.data());
                accumulate(nodes, grads, *x, Tensor::new(xv.shape(), dx));
            }
            if nodes[*weight].requires_grad {
                let dw = kernels::conv2d_backward_weight(g.data(), xv.data(), n, geom);
                accumulate(nodes, grads, *weight, Tensor::new(wv.shape(), dw));
            }
        }
        Op::Upsample2x(x) => {
            let xv = val(*x);
            let (n, c, h, w) = xv.dims4();
            let mut gx = vec![0.0; xv.len()];
            let w2 = 2 * w;
            for p in 0..n * c {
                for i in 0..h {
                    for j in 0..w {
                        let base = p * 4 * h * w;
                        let s = g.data()[base + (2 * i) * w2 + 2 * j]
                            + g.data()[base + (2 * i) * w2 + 2 * j + 1]
                            + g.data()[base + (2 * i + 1) * w2 + 2 * j]
                            + g.data()[base + (2 * i + 1) * w2 + 2 * j + 1];
                        gx[p * h * w + i * w + j] = s;
                    }
                }
            }
            accumulate(nodes, grads, *x, Tensor::new(xv.shape(), gx));
        }
        Op::Concat(parts) => {
            let (n, ctot, h, w) = y.dims4();
            let hw = h * w;
            let mut offset = 0;
            for &p in parts {
                let pv = val(p);
                let c = pv.shape()[1];
                let mut gp = vec![0.0; pv.len()];
                for s in 0..n {
                    let src = &g.data()[(s * ctot + offset) * hw..(s * ctot + offset + c) * hw];
                    gp[s * c * hw..(s + 1) * c * hw].copy_from_slice(src);
                }
                accumulate(nodes, grads, p, Tensor::new(pv.shape(), gp));
                offset += c;
            }
        }
        Op::Slice { x, start } => {
            let xv = val(*x);
            let (n, c, h, w) = xv.dims4();
            let len = y.shape()[1];
            let hw = h * w;
            let mut gx = vec![0.0; xv.len()];
            for s in 0..n {
                gx[(s * c + start) * hw..(s * c + start + len) * hw]
                    .copy_from_slice(&g.data()[s * len * hw..(s + 1) * len * hw]);
            }
            accumulate(nodes, grads, *x, Tensor::new(xv.shape(), gx));
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            train,
        } => {
            let xv = val(*x);
            let gam = val(*gamma);
            let (n, c, h, w) = xv.dims4();
            let hw = h * w;
            let m = (n * hw) as f64;
            let mut sum_g = vec![0.0; c];
            let mut sum_gx = vec![0.0; c];
            for s in 0..n {
                for ch in 0..c {
                    let base = (s * c + ch) * hw;
                    for p in 0..hw {
                        sum_g[ch] += g.data()[base + p];
                        sum_gx[ch] += g.data()[base + p] * xhat[base + p];
                    }
                }
            }
            if nodes[*x].requires_grad {
                let mut gx = vec![0.0; xv.len()];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * hw;
                        let k = gam.data()[ch] * inv_std[ch];
                        for p in 0..hw {
                            gx[base + p] = if *train {
                                k / m * (m * g.data()[base + p] - sum_g[ch] - xhat[base + p] * sum_gx[ch])
                            } else {
                                k * g.data()[base + p]
                            };
                        }
                    }
                }
                accumulate(nodes, grads, *x, Tensor::new(xv.shape(), gx));
            }
            accumulate(nodes, grads, *gamma, Tensor::new(vec![c], sum_gx));
            accumulate(nodes, grads, *beta, Tensor::new(vec![c], sum_g));
        }
        Op::GlobalAvgPool(x) => {
            let xv = val(*x);
            let (n, c, h, w) = xv.dims4();
            let hw = h * w;
            let mut gx = vec![0.0; xv.len()];
            for p in 0..n * c {
                let v = g.data()[p] / hw as f64;
                gx[p * hw..(p + 1) * hw].fill(v);
            }
            accumulate(nodes, grads, *x, Tensor::new(xv.shape(), gx));
        }
        Op::Linear { x, weight, bias } => {
            let (xv, wv) = (val(*x), val(*weight));
            let (n, k) = (xv.shape()[0], xv.shape()[1]);
            let o = wv.shape()[0];
            let mut gx = vec![0.0; n * k];
            kernels::gemm(n, o, k, 1.0, g.data(), false, wv.data(), false, 0.0, &mut gx);
            let mut gw = vec![0.0; o * k];
            kernels::gemm(o, n, k, 1.0, g.data(), true, xv.data(), false, 0.0, &mut gw);
            let mut gb = vec![0.0; o];
            for s in 0..n {
                for j in 0..o {
                    gb[j] += g.data()[s * o + j];
                }
            }
            accumulate(nodes, grads, *x, Tensor::new(xv.shape(), gx));
            accumulate(nodes, grads, *weight, Tensor::new(wv.shape(), gw));
            accumulate(nodes, grads, *bias, Tensor::new(vec![o], gb));
        }
        Op::Sum(x) => {
            let xv = val(*x);
            accumulate(nodes, grads, *x, Tensor::full(xv.shape(), g.item()));
        }
        Op::SumPerSample(x) => {
            let xv = val(*x);
            let n = xv.shape()[0];
            let per = xv.len() / n;
            let mut gx = vec![0.0; xv.len()];
            for s in 0..n {
                gx[s * per..(s + 1) * per].fill(g.data()[s]);
            }
            accumulate(nodes, grads, *x, Tensor::new(xv.shape(), gx));
        }
        Op::Blur { x, taps } => {
            let xv = val(*x);
            let (n, c, h, w) = xv.dims4();
            let gx = kernels::blur_adjoint(g.data(), n * c, h, w, taps);
            accumulate(nodes, grads, *x, Tensor::new(xv.shape(), gx));
        }
        Op::DiffW(x) => {
            let xv = val(*x);
            let (n, c, h, w) = xv.dims4();
            let mut gx = vec![0.0; xv.len()];
            for p in 0..n * c {
                for i in 0..h {
                    for j in 0..w - 1 {
                        let gi = g.data()[(p * h + i) * (w - 1) + j];
                        gx[(p * h + i) * w + j + 1] += gi;
                        gx[(p * h + i) * w + j] -= gi;
                    }
                }
            }
            accumulate(nodes, grads, *x, Tensor::new(xv.shape(), gx));
        }
        Op::DiffH(x) => {
            let xv = val(*x);
            let (n, c, h, w) = xv.dims4();
            let mut gx = vec![0.0; xv.len()];
            for p in 0..n * c {
                for i in 0..h - 1 {
                    for j in 0..w {
                        let gi = g.data()[(p * (h - 1) + i) * w + j];
                        gx[(p * h + i + 1) * w + j] += gi;
                        gx[(p * h + i) * w + j] -= gi;
                    }
                }
            }
            accumulate(nodes, grads, *x, Tensor::new(xv.shape(), gx));
        }
        Op::Reshape(x) => {
            let xv = val(*x);
            accumulate(nodes, grads, *x, g.clone().reshape(xv.shape()));
        }
        Op::Gram(x) => {
            let xv = val(*x);
            let (n, c, h, w) = xv.dims4();
            let hw = h * w;
            let norm = 1.0 / (c * hw) as f64;
            let mut gx = vec![0.0; xv.len()];
            for s in 0..n {
                let gs = &g.data()[s * c * c..(s + 1) * c * c];
                // symmetrize: d/dF of F F^T is (G + G^T) F
                let mut sym = vec![0.0; c * c];
                for i in 0..c {
                    for j in 0..c {
                        sym[i * c + j] = (gs[i * c + j] + gs[j * c + i]) * norm;
                    }
                }
                let f = &xv.data()[s * c * hw..(s + 1) * c * hw];
                kernels::gemm(c, c, hw, 1.0, &sym, false, f, false, 0.0, &mut gx[s * c * hw..(s + 1) * c * hw]);
            }
            accumulate(nodes, grads, *x, Tensor::new(xv.shape(), gx));
        }
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    fn same_graph(&self, other: &Var<'g>) {
        assert!(std::ptr::eq(self.graph, other.graph), "vars from different graphs");
    }

    pub fn unary(self, f: Unary) -> Var<'g> {
        let v = self.value().map(|x| f.apply(x));
        self.graph.push(v, Op::Unary(self.id, f), &[self.id])
    }

    pub fn relu(self) -> Var<'g> {
        self.unary(Unary::Relu)
    }

    pub fn leaky_relu(self, alpha: f64) -> Var<'g> {
        self.unary(Unary::LeakyRelu(alpha))
    }

    pub fn sigmoid(self) -> Var<'g> {
        self.unary(Unary::Sigmoid)
    }

    pub fn silu(self) -> Var<'g> {
        self.unary(Unary::Silu)
    }

    pub fn softplus(self) -> Var<'g> {
        self.unary(Unary::Softplus)
    }

    pub fn abs(self) -> Var<'g> {
        self.unary(Unary::Abs)
    }

    pub fn smooth_abs(self, eps: f64) -> Var<'g> {
        self.unary(Unary::SmoothAbs(eps))
    }

    pub fn ln(self) -> Var<'g> {
        self.unary(Unary::Log)
    }

    pub fn exp(self) -> Var<'g> {
        self.unary(Unary::Exp)
    }

    pub fn square(self) -> Var<'g> {
        self.unary(Unary::Square)
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Var<'g> {
        self.unary(Unary::Clamp(lo, hi))
    }

    pub fn affine(self, scale: f64, shift: f64) -> Var<'g> {
        self.unary(Unary::Affine(scale, shift))
    }

    pub fn scale(self, s: f64) -> Var<'g> {
        self.affine(s, 0.0)
    }

    pub fn add_scalar(self, t: f64) -> Var<'g> {
        self.affine(1.0, t)
    }

    fn binary(self, other: Var<'g>, f: impl Fn(f64, f64) -> f64, op: Op) -> Var<'g> {
        self.same_graph(&other);
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
        self.graph.push(a.zip_map(&b, f), op, &[self.id, other.id])
    }

    pub fn add(self, other: Var<'g>) -> Var<'g> {
        self.binary(other, |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'g>) -> Var<'g> {
        self.binary(other, |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'g>) -> Var<'g> {
        self.binary(other, |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn div(self, other: Var<'g>) -> Var<'g> {
        self.binary(other, |a, b| a / b, Op::Div(self.id, other.id))
    }

    /// Multiplies `[n, c, h, w]` by a `[n, 1, h, w]` gate broadcast over channels.
    pub fn mul_channel(self, gate: Var<'g>) -> Var<'g> {
        self.same_graph(&gate);
        let (xv, gv) = (self.value(), gate.value());
        let (n, c, h, w) = xv.dims4();
        assert_eq!(gv.shape(), &[n, 1, h, w], "gate shape mismatch");
        let hw = h * w;
        let mut out = vec![0.0; xv.len()];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * hw;
                for p in 0..hw {
                    out[base + p] = xv.data()[base + p] * gv.data()[s * hw + p];
                }
            }
        }
        self.graph.push(
            Tensor::new(xv.shape(), out),
            Op::MulChannel {
                x: self.id,
                gate: gate.id,
            },
            &[self.id, gate.id],
        )
    }

    /// Adds a per-channel bias (`[c]`) to a `[n, c, ...]` tensor.
    pub fn add_bias(self, bias: Var<'g>) -> Var<'g> {
        self.same_graph(&bias);
        let (xv, bv) = (self.value(), bias.value());
        let c = xv.shape()[1];
        assert_eq!(bv.shape(), &[c], "bias shape mismatch");
        let inner: usize = xv.shape()[2..].iter().product();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv.data()[(i / inner) % c])
            .collect();
        self.graph.push(
            Tensor::new(xv.shape(), data),
            Op::AddBias {
                x: self.id,
                bias: bias.id,
            },
            &[self.id, bias.id],
        )
    }

    /// Square-kernel convolution without bias; `weight` is `[co, ci, k, k]`.
    pub fn conv2d(self, weight: Var<'g>, stride: usize, pad: usize) -> Var<'g> {
        self.same_graph(&weight);
        let (xv, wv) = (self.value(), weight.value());
        let (n, ci, h, w) = xv.dims4();
        let ws = wv.shape();
        assert_eq!(ws.len(), 4);
        assert_eq!(ws[1], ci, "conv input channel mismatch");
        assert_eq!(ws[2], ws[3], "only square kernels are supported");
        let geom = ConvGeom {
            in_channels: ci,
            height: h,
            width: w,
            out_channels: ws[0],
            kernel: ws[2],
            stride,
            pad,
        };
        let out = kernels::conv2d_forward(xv.data(), n, &geom, wv.data());
        let shape = vec![n, ws[0], geom.out_height(), geom.out_width()];
        self.graph.push(
            Tensor::new(shape, out),
            Op::Conv {
                x: self.id,
                weight: weight.id,
                geom,
            },
            &[self.id, weight.id],
        )
    }

    /// Nearest-neighbour upsampling by two along both spatial axes.
    pub fn upsample2x(self) -> Var<'g> {
        let xv = self.value();
        let (n, c, h, w) = xv.dims4();
        let w2 = 2 * w;
        let mut out = vec![0.0; 4 * xv.len()];
        for p in 0..n * c {
            for i in 0..2 * h {
                for j in 0..w2 {
                    out[p * 4 * h * w + i * w2 + j] = xv.data()[p * h * w + (i / 2) * w + j / 2];
                }
            }
        }
        self.graph.push(
            Tensor::new(vec![n, c, 2 * h, w2], out),
            Op::Upsample2x(self.id),
            &[self.id],
        )
    }

    pub fn batch_norm_op(
        self,
        gamma: Var<'g>,
        beta: Var<'g>,
        stats: BatchNormStats<'_>,
        eps: f64,
    ) -> (Var<'g>, Option<(Vec<f64>, Vec<f64>)>) {
        let xv = self.value();
        let (n, c, h, w) = xv.dims4();
        let hw = h * w;
        let (gv, bv) = (gamma.value(), beta.value());
        let (mean, var, train) = match stats {
            BatchNormStats::Batch => {
                let m = (n * hw) as f64;
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * hw;
                        mean[ch] += xv.data()[base..base + hw].iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|v| *v /= m);
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * hw;
                        var[ch] += xv.data()[base..base + hw]
                            .iter()
                            .map(|x| (x - mean[ch]).powi(2))
                            .sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= m);
                (mean, var, true)
            }
            BatchNormStats::Running { mean, var } => (mean.to_vec(), var.to_vec(), false),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * hw;
                for p in 0..hw {
                    let xh = (xv.data()[base + p] - mean[ch]) * inv_std[ch];
                    xhat[base + p] = xh;
                    out[base + p] = gv.data()[ch] * xh + bv.data()[ch];
                }
            }
        }
        let v = self.graph.push(
            Tensor::new(xv.shape(), out),
            Op::BatchNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
                train,
            },
            &[self.id, gamma.id, beta.id],
        );
        (v, train.then_some((mean, var)))
    }

    /// Concatenates rank-4 vars along the channel axis.
    pub fn concat(parts: &[Var<'g>]) -> Var<'g> {
        assert!(!parts.is_empty());
        let graph = parts[0].graph;
        let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let (n, _, h, w) = vals[0].dims4();
        let ctot: usize = vals.iter().map(|v| v.shape()[1]).sum();
        let hw = h * w;
        let mut out = vec![0.0; n * ctot * hw];
        let mut offset = 0;
        for v in &vals {
            let (vn, c, vh, vw) = v.dims4();
            assert_eq!((vn, vh, vw), (n, h, w), "concat shape mismatch");
            for s in 0..n {
                out[(s * ctot + offset) * hw..(s * ctot + offset + c) * hw]
                    .copy_from_slice(&v.data()[s * c * hw..(s + 1) * c * hw]);
            }
            offset += c;
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        graph.push(Tensor::new(vec![n, ctot, h, w], out), Op::Concat(ids.clone()), &ids)
    }

    /// Channels `start..start + len` of a rank-4 var.
    pub fn slice_channels(self, start: usize, len: usize) -> Var<'g> {
        let xv = self.value();
        let (n, c, h, w) = xv.dims4();
        assert!(start + len <= c);
        let hw = h * w;
        let mut out = vec![0.0; n * len * hw];
        for s in 0..n {
            out[s * len * hw..(s + 1) * len * hw]
                .copy_from_slice(&xv.data()[(s * c + start) * hw..(s * c + start + len) * hw]);
        }
        self.graph.push(
            Tensor::new(vec![n, len, h, w], out),
            Op::Slice { x: self.id, start },
            &[self.id],
        )
    }

    /// `[n, c, h, w] -> [n, c]` spatial mean.
    pub fn global_avg_pool(self) -> Var<'g> {
        let xv = self.value();
        let (n, c, h, w) = xv.dims4();
        let hw = h * w;
        let out = (0..n * c)
            .map(|p| xv.data()[p * hw..(p + 1) * hw].iter().sum::<f64>() / hw as f64)
            .collect();
        self.graph.push(Tensor::new(vec![n, c], out), Op::GlobalAvgPool(self.id), &[self.id])
    }

    /// `[n, k] x [o, k]^T + [o]`.
    pub fn linear(self, weight: Var<'g>, bias: Var<'g>) -> Var<'g> {
        self.same_graph(&weight);
        let (xv, wv, bv) = (self.value(), weight.value(), bias.value());
        let (n, k) = (xv.shape()[0], xv.shape()[1]);
        let o = wv.shape()[0];
        assert_eq!(wv.shape(), &[o, k]);
        assert_eq!(bv.shape(), &[o]);
        let mut out = vec![0.0; n * o];
        for s in 0..n {
            out[s * o..(s + 1) * o].copy_from_slice(bv.data());
        }
        kernels::gemm(n, k, o, 1.0, xv.data(), false, wv.data(), true, 1.0, &mut out);
        self.graph.push(
            Tensor::new(vec![n, o], out),
            Op::Linear {
                x: self.id,
                weight: weight.id,
                bias: bias.id,
            },
            &[self.id, weight.id, bias.id],
        )
    }

    pub fn sum(self) -> Var<'g> {
        let s = self.value().sum();
        self.graph.push(Tensor::scalar(s), Op::Sum(self.id), &[self.id])
    }

    pub fn mean(self) -> Var<'g> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sums everything but the leading axis: `[n, ...] -> [n]`.
    pub fn sum_per_sample(self) -> Var<'g> {
        let xv = self.value();
        let n = xv.shape()[0];
        let per = xv.len() / n;
        let out = (0..n)
            .map(|s| xv.data()[s * per..(s + 1) * per].iter().sum())
            .collect();
        self.graph.push(Tensor::new(vec![n], out), Op::SumPerSample(self.id), &[self.id])
    }

    /// Border-renormalized Gaussian blur of every spatial plane.
    pub fn gaussian_blur(self, sigma: f64) -> Var<'g> {
        let xv = self.value();
        let (n, c, h, w) = xv.dims4();
        let taps = kernels::gaussian_taps(sigma);
        let out = kernels::blur_forward(xv.data(), n * c, h, w, &taps);
        self.graph.push(
            Tensor::new(xv.shape(), out),
            Op::Blur { x: self.id, taps },
            &[self.id],
        )
    }

    /// Forward differences along the width axis: `x[.., j+1] - x[.., j]`.
    pub fn diff_w(self) -> Var<'g> {
        let xv = self.value();
        let (n, c, h, w) = xv.dims4();
        let mut out = vec![0.0; n * c * h * (w - 1)];
        for p in 0..n * c {
            for i in 0..h {
                for j in 0..w - 1 {
                    out[(p * h + i) * (w - 1) + j] =
                        xv.data()[(p * h + i) * w + j + 1] - xv.data()[(p * h + i) * w + j];
                }
            }
        }
        self.graph.push(Tensor::new(vec![n, c, h, w - 1], out), Op::DiffW(self.id), &[self.id])
    }

    /// Forward differences along the height axis.
    pub fn diff_h(self) -> Var<'g> {
        let xv = self.value();
        let (n, c, h, w) = xv.dims4();
        let mut out = vec![0.0; n * c * (h - 1) * w];
        for p in 0..n * c {
            for i in 0..h - 1 {
                for j in 0..w {
                    out[(p * (h - 1) + i) * w + j] =
                        xv.data()[(p * h + i + 1) * w + j] - xv.data()[(p * h + i) * w + j];
                }
            }
        }
        self.graph.push(Tensor::new(vec![n, c, h - 1, w], out), Op::DiffH(self.id), &[self.id])
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Var<'g> {
        let v = (*self.value()).clone().reshape(shape);
        self.graph.push(v, Op::Reshape(self.id), &[self.id])
    }

    /// Per-sample Gram matrix `F F^T / (c h w)`: `[n, c, h, w] -> [n, c, c]`.
    pub fn gram(self) -> Var<'g> {
        let xv = self.value();
        let (n, c, h, w) = xv.dims4();
        let hw = h * w;
        let norm = 1.0 / (c * hw) as f64;
        let mut out = vec![0.0; n * c * c];
        for s in 0..n {
            let f = &xv.data()[s * c * hw..(s + 1) * c * hw];
            kernels::gemm(c, hw, c, norm, f, false, f, true, 0.0, &mut out[s * c * c..(s + 1) * c * c]);
        }
        self.graph.push(Tensor::new(vec![n, c, c], out), Op::Gram(self.id), &[self.id])
    }
}

/// Which statistics a batch-normalization call normalizes with.
#[derive(Clone, Copy, Debug)]
pub enum BatchNormStats<'a> {
    /// Statistics of the current batch; the batch mean and variance are returned.
    Batch,
    /// Stored running statistics; behaves as a fixed per-channel affine map.
    Running { mean: &'a [f64], var: &'a [f64] },
}

#[cfg(test)]
mod tests;
