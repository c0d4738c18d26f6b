use std::cell::RefCell;

use super::kernels::{self, ConvGeom};
use super::{Tensor, TensorError};
use crate::par::Exec;

type Result<T> = std::result::Result<T, TensorError>;

const NORM_EPS: f64 = 1e-12;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Exp(usize),
    Log(usize),
    Relu(usize),
    LogSigmoid(usize),
    ClampMin(usize, f64),
    Sum(usize),
    Reshape(usize),
    Transpose {
        a: usize,
        rows: usize,
        cols: usize,
    },
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    AddBias {
        a: usize,
        bias: usize,
        n: usize,
    },
    RowDots {
        a: usize,
        rows: usize,
        k: usize,
        d: usize,
    },
    Softmax {
        a: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LogSoftmax {
        a: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    L2Normalize {
        a: usize,
        d: usize,
        norms: Vec<f64>,
    },
    Conv2d {
        x: usize,
        w: usize,
        bias: usize,
        geom: ConvGeom,
    },
    AvgPool2 {
        x: usize,
        planes: usize,
        h: usize,
        w: usize,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Records operations in execution order so `backward` can replay them in
/// reverse. One tape is built per training step and then dropped.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a leaf carrying the tensor's value and its `requires_grad` flag.
    pub fn leaf(&self, t: &Tensor) -> Var<'_> {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, t.requires_grad)
    }

    /// Records a trainable leaf.
    pub fn param(&self, t: &Tensor) -> Var<'_> {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, true)
    }

    /// Records a gradient-free leaf.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.push(t.shape, t.data, Op::Leaf, false)
    }

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var<'_> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn needs_grad(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Propagates d(loss)/d(node) to every node that requires a gradient,
    /// visiting nodes in exact reverse recording order. Gradients add onto
    /// whatever earlier calls left behind until [`Tape::zero_grad`].
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(TensorError::ForeignVar);
        }
        let mut nodes = self.nodes.borrow_mut();
        if nodes[loss.id].value.len() != 1 {
            return Err(TensorError::Rank {
                op: "backward",
                expected: "a scalar loss",
                got: nodes[loss.id].shape.clone(),
            });
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        adj[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = adj[id].take() else { continue };
            if !nodes[id].requires_grad && id != loss.id {
                continue;
            }
            propagate(&nodes, id, &g, &mut adj);
            let node = &mut nodes[id];
            match &mut node.grad {
                Some(buf) => buf.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    pub fn zero_grad(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }

    /// Accumulated gradient of a node, if any flowed into it.
    pub fn grad(&self, v: Var<'_>) -> Option<Vec<f64>> {
        self.nodes.borrow()[v.id].grad.clone()
    }

    /// Adds the node's gradient into a parameter tensor's gradient buffer.
    pub fn accumulate_into(&self, v: Var<'_>, target: &mut Tensor) {
        let nodes = self.nodes.borrow();
        let node = &nodes[v.id];
        match &node.grad {
            Some(g) => target.accumulate_grad(g),
            None => target.accumulate_grad(&vec![0.0; node.value.len()]),
        }
    }
}

fn add_into(nodes: &[Node], adj: &mut [Option<Vec<f64>>], id: usize, contrib: Vec<f64>) {
    if !nodes[id].requires_grad {
        return;
    }
    let contrib = if contrib.len() != nodes[id].value.len() {
        // scalar operand broadcast over a tensor
        vec![contrib.iter().sum()]
    } else {
        contrib
    };
    match &mut adj[id] {
        Some(buf) => buf.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(contrib),
    }
}

#[inline]
fn bcast(v: &[f64], i: usize) -> f64 {
    if v.len() == 1 {
        v[0]
    } else {
        v[i]
    }
}

fn propagate(nodes: &[Node], id: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
    let out = &nodes[id].value;
    let val = |i: usize| nodes[i].value.as_slice();
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            add_into(nodes, adj, *a, g.to_vec());
            add_into(nodes, adj, *b, g.to_vec());
        }
        Op::Sub(a, b) => {
            add_into(nodes, adj, *a, g.to_vec());
            add_into(nodes, adj, *b, g.iter().map(|x| -x).collect());
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let ga = g.iter().enumerate().map(|(i, gi)| gi * bcast(bv, i)).collect();
            let gb = g.iter().enumerate().map(|(i, gi)| gi * bcast(av, i)).collect();
            add_into(nodes, adj, *a, ga);
            add_into(nodes, adj, *b, gb);
        }
        Op::Div(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let ga = g.iter().enumerate().map(|(i, gi)| gi / bcast(bv, i)).collect();
            let gb = g
                .iter()
                .enumerate()
                .map(|(i, gi)| {
                    let d = bcast(bv, i);
                    -gi * bcast(av, i) / (d * d)
                })
                .collect();
            add_into(nodes, adj, *a, ga);
            add_into(nodes, adj, *b, gb);
        }
        Op::Neg(a) => add_into(nodes, adj, *a, g.iter().map(|x| -x).collect()),
        Op::Scale(a, c) => add_into(nodes, adj, *a, g.iter().map(|x| x * c).collect()),
        Op::Exp(a) => add_into(nodes, adj, *a, g.iter().zip(out).map(|(x, y)| x * y).collect()),
        Op::Log(a) => {
            let av = val(*a);
            add_into(nodes, adj, *a, g.iter().zip(av).map(|(x, y)| x / y).collect());
        }
        Op::Relu(a) => {
            let av = val(*a);
            let ga = g
                .iter()
                .zip(av)
                .map(|(x, &y)| if y > 0.0 { *x } else { 0.0 })
                .collect();
            add_into(nodes, adj, *a, ga);
        }
        Op::LogSigmoid(a) => {
            let av = val(*a);
            let ga = g.iter().zip(av).map(|(x, &y)| x * sigmoid(-y)).collect();
            add_into(nodes, adj, *a, ga);
        }
        Op::ClampMin(a, lo) => {
            let av = val(*a);
            let ga = g
                .iter()
                .zip(av)
                .map(|(x, &y)| if y >= *lo { *x } else { 0.0 })
                .collect();
            add_into(nodes, adj, *a, ga);
        }
        Op::Sum(a) => add_into(nodes, adj, *a, vec![g[0]; nodes[*a].value.len()]),
        Op::Reshape(a) => add_into(nodes, adj, *a, g.to_vec()),
        Op::Transpose { a, rows, cols } => {
            let mut ga = vec![0.0; rows * cols];
            for r in 0..*rows {
                for c in 0..*cols {
                    ga[r * cols + c] = g[c * rows + r];
                }
            }
            add_into(nodes, adj, *a, ga);
        }
        Op::MatMul { a, b, m, k, n } => {
            let exec = Exec::auto(m * k * n);
            if nodes[*a].requires_grad {
                let ga = kernels::matmul_nt(g, val(*b), *m, *n, *k, exec);
                add_into(nodes, adj, *a, ga);
            }
            if nodes[*b].requires_grad {
                let gb = kernels::matmul_tn(val(*a), g, *m, *k, *n, exec);
                add_into(nodes, adj, *b, gb);
            }
        }
        Op::AddBias { a, bias, n } => {
            add_into(nodes, adj, *a, g.to_vec());
            let mut gb = vec![0.0; *n];
            for row in g.chunks(*n) {
                gb.iter_mut().zip(row).for_each(|(s, x)| *s += x);
            }
            add_into(nodes, adj, *bias, gb);
        }
        Op::RowDots { a, rows, k, d } => {
            let (av, rv) = (val(*a), val(*rows));
            let batch = av.len() / d;
            if nodes[*a].requires_grad {
                let mut ga = vec![0.0; batch * d];
                for b in 0..batch {
                    let gab = &mut ga[b * d..(b + 1) * d];
                    for i in 0..*k {
                        let gi = g[b * k + i];
                        let r = &rv[(b * k + i) * d..(b * k + i + 1) * d];
                        gab.iter_mut().zip(r).for_each(|(s, x)| *s += gi * x);
                    }
                }
                add_into(nodes, adj, *a, ga);
            }
            if nodes[*rows].requires_grad {
                let mut gr = vec![0.0; batch * k * d];
                for b in 0..batch {
                    let ab = &av[b * d..(b + 1) * d];
                    for i in 0..*k {
                        let gi = g[b * k + i];
                        gr[(b * k + i) * d..(b * k + i + 1) * d]
                            .iter_mut()
                            .zip(ab)
                            .for_each(|(s, x)| *s = gi * x);
                    }
                }
                add_into(nodes, adj, *rows, gr);
            }
        }
        Op::Softmax {
            a,
            outer,
            len,
            inner,
        } => {
            let mut ga = vec![0.0; out.len()];
            for o in 0..*outer {
                for j in 0..*inner {
                    let at = |i: usize| (o * len + i) * inner + j;
                    let dot: f64 = (0..*len).map(|i| g[at(i)] * out[at(i)]).sum();
                    for i in 0..*len {
                        ga[at(i)] = out[at(i)] * (g[at(i)] - dot);
                    }
                }
            }
            add_into(nodes, adj, *a, ga);
        }
        Op::LogSoftmax {
            a,
            outer,
            len,
            inner,
        } => {
            let mut ga = vec![0.0; out.len()];
            for o in 0..*outer {
                for j in 0..*inner {
                    let at = |i: usize| (o * len + i) * inner + j;
                    let total: f64 = (0..*len).map(|i| g[at(i)]).sum();
                    for i in 0..*len {
                        ga[at(i)] = g[at(i)] - out[at(i)].exp() * total;
                    }
                }
            }
            add_into(nodes, adj, *a, ga);
        }
        Op::L2Normalize { a, d, norms } => {
            let mut ga = vec![0.0; out.len()];
            for (r, &norm) in norms.iter().enumerate() {
                let span = r * d..(r + 1) * d;
                let y = &out[span.clone()];
                let gr = &g[span.clone()];
                let dot: f64 = y.iter().zip(gr).map(|(p, q)| p * q).sum();
                for ((o, yi), gi) in ga[span].iter_mut().zip(y).zip(gr) {
                    *o = (gi - yi * dot) / norm;
                }
            }
            add_into(nodes, adj, *a, ga);
        }
        Op::Conv2d { x, w, bias, geom } => {
            if nodes[*x].requires_grad {
                add_into(nodes, adj, *x, kernels::conv2d_grad_input(g, val(*w), *geom));
            }
            if nodes[*w].requires_grad || nodes[*bias].requires_grad {
                let (gw, gb) = kernels::conv2d_grad_params(g, val(*x), *geom);
                add_into(nodes, adj, *w, gw);
                add_into(nodes, adj, *bias, gb);
            }
        }
        Op::AvgPool2 { x, planes, h, w } => {
            let (oh, ow) = (h / 2, w / 2);
            let mut gx = vec![0.0; planes * h * w];
            for p in 0..*planes {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let gv = 0.25 * g[(p * oh + oy) * ow + ox];
                        for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            gx[(p * h + 2 * oy + dy) * w + 2 * ox + dx] += gv;
                        }
                    }
                }
            }
            add_into(nodes, adj, *x, gx);
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn data(&self) -> Vec<f64> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn value(&self) -> Tensor {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape nodes hold valid tensors")
    }

    /// First element; the value of a scalar node.
    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.tape.grad(*self)
    }

    /// Same value, cut off from the graph.
    pub fn detach(&self) -> Var<'t> {
        let (shape, value) = self.parts();
        self.tape.push(shape, value, Op::Leaf, false)
    }

    fn parts(&self) -> (Vec<usize>, Vec<f64>) {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        (n.shape.clone(), n.value.clone())
    }

    fn same_tape(&self, other: &Var<'t>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(TensorError::ForeignVar)
        }
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let (shape, value) = self.parts();
        let value = value.into_iter().map(f).collect();
        let rg = self.requires_grad();
        self.tape.push(shape, value, op, rg)
    }

    fn binary(
        &self,
        other: &Var<'t>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let (sa, va) = self.parts();
        let (sb, vb) = other.parts();
        let shape = if sa == sb || vb.len() == 1 {
            sa.clone()
        } else if va.len() == 1 {
            sb.clone()
        } else {
            return Err(TensorError::Shape {
                op: name,
                lhs: sa,
                rhs: sb,
            });
        };
        let n = va.len().max(vb.len());
        let value = (0..n).map(|i| f(bcast(&va, i), bcast(&vb, i))).collect();
        let rg = self.tape.needs_grad(&[self.id, other.id]);
        Ok(self.tape.push(shape, value, op, rg))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn div(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "div", Op::Div(self.id, other.id), |a, b| a / b)
    }

    pub fn neg(&self) -> Var<'t> {
        self.unary(Op::Neg(self.id), |x| -x)
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, c), |x| x * c)
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    /// Natural log; every input must be strictly positive.
    pub fn log(&self) -> Result<Var<'t>> {
        let (shape, value) = self.parts();
        if let Some((index, &v)) = value.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
            return Err(TensorError::Domain {
                op: "log",
                index,
                value: v,
            });
        }
        let value = value.into_iter().map(f64::ln).collect();
        let rg = self.requires_grad();
        Ok(self.tape.push(shape, value, Op::Log(self.id), rg))
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(Op::Relu(self.id), |x| x.max(0.0))
    }

    /// `log(1 / (1 + e^{-x}))`, evaluated without overflow.
    pub fn log_sigmoid(&self) -> Var<'t> {
        self.unary(Op::LogSigmoid(self.id), log_sigmoid)
    }

    /// `max(x, lo)`; the gradient is zero where the clamp is active.
    pub fn clamp_min(&self, lo: f64) -> Var<'t> {
        self.unary(Op::ClampMin(self.id, lo), |x| x.max(lo))
    }

    pub fn sum(&self) -> Var<'t> {
        let total = self.tape.nodes.borrow()[self.id].value.iter().sum();
        let rg = self.requires_grad();
        self.tape.push(vec![1], vec![total], Op::Sum(self.id), rg)
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.tape.nodes.borrow()[self.id].value.len();
        self.sum().scale(1.0 / n as f64)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let (old, value) = self.parts();
        if shape.iter().product::<usize>() != value.len() {
            return Err(TensorError::Shape {
                op: "reshape",
                lhs: old,
                rhs: shape.to_vec(),
            });
        }
        let rg = self.requires_grad();
        Ok(self.tape.push(shape.to_vec(), value, Op::Reshape(self.id), rg))
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let (shape, value) = self.parts();
        let [rows, cols] = shape[..] else {
            return Err(TensorError::Rank {
                op: "transpose",
                expected: "a matrix",
                got: shape,
            });
        };
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = value[r * cols + c];
            }
        }
        let rg = self.requires_grad();
        Ok(self
            .tape
            .push(vec![cols, rows], out, Op::Transpose { a: self.id, rows, cols }, rg))
    }

    /// `self[m×k] · other[k×n]`.
    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let (sa, va) = self.parts();
        let (sb, vb) = other.parts();
        let (m, k, n) = match (&sa[..], &sb[..]) {
            (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
            _ => {
                return Err(TensorError::Shape {
                    op: "matmul",
                    lhs: sa,
                    rhs: sb,
                })
            }
        };
        let value = kernels::matmul(&va, &vb, m, k, n, Exec::auto(m * k * n));
        let rg = self.tape.needs_grad(&[self.id, other.id]);
        Ok(self.tape.push(
            vec![m, n],
            value,
            Op::MatMul {
                a: self.id,
                b: other.id,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    /// Adds a length-`n` bias to every length-`n` row.
    pub fn add_bias(&self, bias: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(bias)?;
        let (sa, mut va) = self.parts();
        let (sb, vb) = bias.parts();
        let n = vb.len();
        if sb.len() != 1 || sa.last() != Some(&n) {
            return Err(TensorError::Shape {
                op: "add_bias",
                lhs: sa,
                rhs: sb,
            });
        }
        for row in va.chunks_mut(n) {
            row.iter_mut().zip(&vb).for_each(|(x, b)| *x += b);
        }
        let rg = self.tape.needs_grad(&[self.id, bias.id]);
        Ok(self.tape.push(
            sa,
            va,
            Op::AddBias {
                a: self.id,
                bias: bias.id,
                n,
            },
            rg,
        ))
    }

    /// Per-row dot products: `self[B×d]` against `rows[B×k×d]` gives `B×k`.
    pub fn row_dots(&self, rows: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(rows)?;
        let (sa, va) = self.parts();
        let (sr, vr) = rows.parts();
        let (b, k, d) = match (&sa[..], &sr[..]) {
            (&[b, d], &[b2, k, d2]) if b == b2 && d == d2 => (b, k, d),
            _ => {
                return Err(TensorError::Shape {
                    op: "row_dots",
                    lhs: sa,
                    rhs: sr,
                })
            }
        };
        let mut out = vec![0.0; b * k];
        for bi in 0..b {
            let q = &va[bi * d..(bi + 1) * d];
            for i in 0..k {
                let r = &vr[(bi * k + i) * d..(bi * k + i + 1) * d];
                out[bi * k + i] = q.iter().zip(r).map(|(x, y)| x * y).sum();
            }
        }
        let rg = self.tape.needs_grad(&[self.id, rows.id]);
        Ok(self.tape.push(
            vec![b, k],
            out,
            Op::RowDots {
                a: self.id,
                rows: rows.id,
                k,
                d,
            },
            rg,
        ))
    }

    fn axis_parts(&self, axis: usize, op: &'static str) -> Result<(Vec<usize>, Vec<f64>)> {
        let (shape, value) = self.parts();
        if axis >= shape.len() {
            return Err(TensorError::Rank {
                op,
                expected: "an axis within the tensor rank",
                got: shape,
            });
        }
        Ok((shape, value))
    }

    /// Softmax along `axis`, computed after subtracting the slice maximum.
    pub fn softmax(&self, axis: usize) -> Result<Var<'t>> {
        let (shape, value) = self.axis_parts(axis, "softmax")?;
        let (outer, len, inner) = split_axis(&shape, axis);
        let mut out = vec![0.0; value.len()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * len + i) * inner + j;
                let max = (0..len).map(|i| value[at(i)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for i in 0..len {
                    let e = (value[at(i)] - max).exp();
                    out[at(i)] = e;
                    z += e;
                }
                for i in 0..len {
                    out[at(i)] /= z;
                }
            }
        }
        let rg = self.requires_grad();
        Ok(self.tape.push(
            shape,
            out,
            Op::Softmax {
                a: self.id,
                outer,
                len,
                inner,
            },
            rg,
        ))
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Var<'t>> {
        let (shape, value) = self.axis_parts(axis, "log_softmax")?;
        let (outer, len, inner) = split_axis(&shape, axis);
        let mut out = vec![0.0; value.len()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * len + i) * inner + j;
                let max = (0..len).map(|i| value[at(i)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..len).map(|i| (value[at(i)] - max).exp()).sum::<f64>().ln();
                for i in 0..len {
                    out[at(i)] = value[at(i)] - lse;
                }
            }
        }
        let rg = self.requires_grad();
        Ok(self.tape.push(
            shape,
            out,
            Op::LogSoftmax {
                a: self.id,
                outer,
                len,
                inner,
            },
            rg,
        ))
    }

    /// Scales each slice along the last axis to unit Euclidean norm.
    pub fn l2_normalize(&self) -> Result<Var<'t>> {
        let (shape, mut value) = self.parts();
        let d = *shape.last().expect("tensors have rank >= 1");
        let mut norms = Vec::with_capacity(value.len() / d);
        for (row, chunk) in value.chunks_mut(d).enumerate() {
            let norm = chunk.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !(norm > NORM_EPS) {
                return Err(TensorError::DegenerateVector { row, norm });
            }
            chunk.iter_mut().for_each(|x| *x /= norm);
            norms.push(norm);
        }
        let rg = self.requires_grad();
        Ok(self.tape.push(
            shape,
            value,
            Op::L2Normalize {
                a: self.id,
                d,
                norms,
            },
            rg,
        ))
    }

    /// Stride-1 convolution. `self` is `[B,C,H,W]`, `weight` is `[O,C,kh,kw]`,
    /// `bias` is `[O]`; borders are zero-padded by `pad`.
    pub fn conv2d(&self, weight: &Var<'t>, bias: &Var<'t>, pad: usize) -> Result<Var<'t>> {
        self.same_tape(weight)?;
        self.same_tape(bias)?;
        let (sx, vx) = self.parts();
        let (sw, vw) = weight.parts();
        let (sb, vb) = bias.parts();
        let geom = match (&sx[..], &sw[..], &sb[..]) {
            (&[batch, c, h, w], &[o, c2, kh, kw], &[o2])
                if c == c2 && o == o2 && h + 2 * pad >= kh && w + 2 * pad >= kw =>
            {
                ConvGeom {
                    batch,
                    in_ch: c,
                    height: h,
                    width: w,
                    out_ch: o,
                    kh,
                    kw,
                    pad,
                }
            }
            _ => {
                return Err(TensorError::Shape {
                    op: "conv2d",
                    lhs: sx,
                    rhs: sw,
                })
            }
        };
        let out = kernels::conv2d(&vx, &vw, &vb, geom);
        let rg = self.tape.needs_grad(&[self.id, weight.id, bias.id]);
        Ok(self.tape.push(
            vec![geom.batch, geom.out_ch, geom.out_h(), geom.out_w()],
            out,
            Op::Conv2d {
                x: self.id,
                w: weight.id,
                bias: bias.id,
                geom,
            },
            rg,
        ))
    }

    /// 2×2 average pooling with stride 2 over `[B,C,H,W]`; odd edges are dropped.
    pub fn avg_pool2(&self) -> Result<Var<'t>> {
        let (shape, value) = self.parts();
        let [b, c, h, w] = shape[..] else {
            return Err(TensorError::Rank {
                op: "avg_pool2",
                expected: "a [B,C,H,W] tensor",
                got: shape,
            });
        };
        if h < 2 || w < 2 {
            return Err(TensorError::Rank {
                op: "avg_pool2",
                expected: "spatial extent of at least 2×2",
                got: shape,
            });
        }
        let (oh, ow) = (h / 2, w / 2);
        let planes = b * c;
        let mut out = vec![0.0; planes * oh * ow];
        for p in 0..planes {
            for oy in 0..oh {
                for ox in 0..ow {
                    let at = |dy: usize, dx: usize| value[(p * h + 2 * oy + dy) * w + 2 * ox + dx];
                    out[(p * oh + oy) * ow + ox] =
                        0.25 * (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1));
                }
            }
        }
        let rg = self.requires_grad();
        Ok(self.tape.push(
            vec![b, c, oh, ow],
            out,
            Op::AvgPool2 {
                x: self.id,
                planes,
                h,
                w,
            },
            rg,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(data: &[f64]) -> Tensor {
        Tensor::vector(data.to_vec())
    }

    fn grad_of(x: &Tensor, f: impl for<'t> Fn(Var<'t>) -> Var<'t>) -> Vec<f64> {
        let tape = Tape::new();
        let xv = tape.param(x);
        tape.backward(f(xv)).unwrap();
        xv.grad().unwrap()
    }

    #[test]
    fn elementwise_values() {
        let tape = Tape::new();
        assert_eq!(tape.constant(v(&[0.0])).exp().item(), 1.0);
        assert_eq!(tape.constant(v(&[-3.0])).relu().item(), 0.0);
        assert!(tape.constant(v(&[0.0, -1.0])).log().is_err());
    }

    #[test]
    fn scalar_derivatives() {
        assert_eq!(grad_of(&v(&[2.0]), |x| x.log().unwrap()), vec![0.5]);
        assert_eq!(grad_of(&v(&[3.0]), |x| x.mul(&x).unwrap()), vec![6.0]);
        assert_eq!(grad_of(&v(&[-3.0]), |x| x.relu()), vec![0.0]);
        assert_eq!(grad_of(&v(&[1.0, 2.0, 3.0]), |x| x.sum()), vec![1.0; 3]);
    }

    #[test]
    fn matmul_value_and_gradient() {
        let tape = Tape::new();
        let a = tape.param(&Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.param(&Tensor::new(vec![2, 1], vec![5.0, 6.0]).unwrap());
        let y = a.matmul(&b).unwrap();
        assert_eq!(y.data(), vec![17.0, 39.0]);
        tape.backward(y.sum()).unwrap();
        assert_eq!(a.grad().unwrap(), vec![5.0, 6.0, 5.0, 6.0]);
        assert_eq!(b.grad().unwrap(), vec![4.0, 6.0]);
        assert!(a.matmul(&a.transpose().unwrap().reshape(&[4, 1]).unwrap()).is_err());
    }

    #[test]
    fn softmax_is_stable() {
        let tape = Tape::new();
        let p = tape.constant(v(&[1.0, 0.0])).softmax(0).unwrap().data();
        assert!((p[0] - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!((p[1] - 0.268_941_421_369_995_1).abs() < 1e-12);
        let big = tape.constant(v(&[1000.0, 1000.0])).softmax(0).unwrap().data();
        assert_eq!(big, vec![0.5, 0.5]);
    }

    #[test]
    fn l2_normalize_values_and_degenerate_rows() {
        let tape = Tape::new();
        let n = tape.constant(v(&[3.0, 4.0])).l2_normalize().unwrap().data();
        assert!((n[0] - 0.6).abs() < 1e-15 && (n[1] - 0.8).abs() < 1e-15);
        let err = tape.constant(v(&[0.0, 0.0])).l2_normalize().unwrap_err();
        assert!(matches!(err, TensorError::DegenerateVector { row: 0, .. }));
    }

    #[test]
    fn backward_needs_a_scalar() {
        let tape = Tape::new();
        let x = tape.param(&v(&[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(TensorError::Rank { .. })));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let tape = Tape::new();
        let x = tape.param(&v(&[2.0]));
        let y = x.mul(&x).unwrap();
        tape.backward(y).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(x.grad().unwrap(), vec![8.0]);
        tape.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn constants_and_detached_values_get_no_gradient() {
        let tape = Tape::new();
        let x = tape.param(&v(&[1.5]));
        let c = tape.constant(v(&[2.0]));
        let d = x.detach();
        let y = x.mul(&c).unwrap().add(&d.mul(&d).unwrap()).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0]);
        assert!(c.grad().is_none());
        assert!(d.grad().is_none());
    }

    #[test]
    fn foreign_vars_are_rejected() {
        let t1 = Tape::new();
        let t2 = Tape::new();
        let a = t1.param(&v(&[1.0]));
        let b = t2.param(&v(&[1.0]));
        assert_eq!(a.add(&b).unwrap_err(), TensorError::ForeignVar);
        assert_eq!(t1.backward(b).unwrap_err(), TensorError::ForeignVar);
    }

    #[test]
    fn identical_graphs_give_identical_gradients() {
        let x = Tensor::new(vec![2, 3], vec![0.1, -0.4, 0.9, 1.3, -2.0, 0.5]).unwrap();
        let run = || grad_of(&x, |x| x.softmax(1).unwrap().log().unwrap().exp().sum());
        assert_eq!(run(), run());
    }
}
