//! Reverse-mode automatic differentiation over a dynamic tape.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Values on
//! the tape are held in `f64`; leaves are copied in from `f32` [`Tensor`]s
//! and results are rounded back to `f32` when read out with [`Var::value`].
//! [`Tape::backward`] walks the nodes in reverse insertion order, which is a
//! valid reverse topological order because a node can only reference nodes
//! created before it.
//!
//! ```
//! use atnf_core::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.leaf(&Tensor::new([2], vec![1.0, 2.0]).unwrap());
//! let y = x.mul(x).unwrap().sum_all();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
//! ```

use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;

use rand::{Rng, RngCore};

use crate::kernels::{self, ConvGeom};
use crate::tensor::check_shape;
use crate::{Error, Result, Tensor};

/// Guard applied to divisors and logarithm arguments.
pub const EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceMode {
    Sum,
    Mean,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

enum Op {
    Leaf,
    Binary(BinaryKind, usize, usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    MatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_b: bool,
    },
    Conv2d {
        x: usize,
        w: usize,
        bias: usize,
        geom: ConvGeom,
    },
    Reduce {
        x: usize,
        mask: Vec<bool>,
        mode: ReduceMode,
        argmax: Vec<usize>,
    },
    Relu(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Softmax {
        x: usize,
        axis: usize,
    },
    Dropout {
        x: usize,
        mask: Vec<f64>,
    },
    Reshape(usize),
    Permute {
        x: usize,
        perm: Vec<usize>,
    },
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    tracked: bool,
}

/// Records operations for one forward/backward pass. Not `Sync`; confine a
/// tape to one thread.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl core::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "Var(#{}, {:?})", self.id, self.shape())
    }
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

    /// Gradient-tracked leaf.
    pub fn leaf(&self, t: &Tensor) -> Var<'_> {
        self.push_leaf(t.shape().to_vec(), t.data().iter().map(|&v| v as f64).collect(), true)
    }

    /// Untracked leaf; backward never computes gradients into it.
    pub fn constant(&self, t: &Tensor) -> Var<'_> {
        self.push_leaf(t.shape().to_vec(), t.data().iter().map(|&v| v as f64).collect(), false)
    }

    /// Leaf from raw `f64` values.
    pub fn leaf_f64(&self, shape: &[usize], data: Vec<f64>, tracked: bool) -> Result<Var<'_>> {
        check_shape(shape)?;
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: "element count does not match data length",
            });
        }
        Ok(self.push_leaf(shape.to_vec(), data, tracked))
    }

    fn push_leaf(&self, shape: Vec<usize>, data: Vec<f64>, tracked: bool) -> Var<'_> {
        self.push(shape, data, Op::Leaf, tracked)
    }

    fn push(&self, shape: Vec<usize>, data: Vec<f64>, op: Op, tracked: bool) -> Var<'_> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { shape, data, op, tracked });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn tracked(&self, id: usize) -> bool {
        self.nodes.borrow()[id].tracked
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| Error::arg("concat of zero tensors"))?;
        let nodes = self.nodes.borrow();
        let base = nodes[first.id].shape.clone();
        if axis >= base.len() {
            return Err(Error::arg("concat axis out of range"));
        }
        let mut total = 0;
        for p in parts {
            let s = &nodes[p.id].shape;
            let same_rest = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !same_rest {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let node = &nodes[p.id];
                let chunk = node.shape[axis] * inner;
                out.extend_from_slice(&node.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let tracked = parts.iter().any(|p| nodes[p.id].tracked);
        let ids = parts.iter().map(|p| p.id).collect();
        drop(nodes);
        Ok(self.push(shape, out, Op::Concat { parts: ids, axis }, tracked))
    }

    /// Reverse pass from a single-element `root`.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let rnode = &nodes[root.id];
        if rnode.data.len() != 1 {
            return Err(Error::NonScalarRoot(rnode.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        if rnode.tracked {
            grads[root.id] = Some(vec![1.0]);
        }
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) || !node.tracked {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backward_node(&nodes, node, &g, &mut grads);
        }
        let shapes = nodes.iter().map(|n| n.shape.clone()).collect();
        // Only leaves keep gradients.
        for (g, n) in grads.iter_mut().zip(nodes.iter()) {
            if !matches!(n.op, Op::Leaf) {
                *g = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: usize, len: usize, f: impl FnOnce(&mut [f64])) {
    let slot = grads[id].get_or_insert_with(|| vec![0.0; len]);
    f(slot)
}

fn backward_node(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |id: usize| &nodes[id].data;
    let tracked = |id: usize| nodes[id].tracked;
    match &node.op {
        Op::Leaf => {}
        Op::Binary(kind, a, b) => {
            let (a, b) = (*a, *b);
            let ashape = &nodes[a].shape;
            let bmap = broadcast_strides(ashape, &nodes[b].shape);
            let (av, bv) = (val(a), val(b));
            if tracked(a) {
                accumulate(grads, a, av.len(), |ga| {
                    kernels::for_each_mapped(ashape, &bmap, |i, j| {
                        ga[i] += match kind {
                            BinaryKind::Add | BinaryKind::Sub => g[i],
                            BinaryKind::Mul => g[i] * bv[j],
                            BinaryKind::Div => g[i] / guard_div(bv[j]),
                        }
                    })
                });
            }
            if tracked(b) {
                accumulate(grads, b, bv.len(), |gb| {
                    kernels::for_each_mapped(ashape, &bmap, |i, j| {
                        gb[j] += match kind {
                            BinaryKind::Add => g[i],
                            BinaryKind::Sub => -g[i],
                            BinaryKind::Mul => g[i] * av[i],
                            BinaryKind::Div => {
                                if bv[j].abs() < EPS {
                                    0.0
                                } else {
                                    -g[i] * av[i] / (bv[j] * bv[j])
                                }
                            }
                        }
                    })
                });
            }
        }
        Op::AddScalar(x) => {
            accumulate(grads, *x, g.len(), |gx| add_into(gx, g));
        }
        Op::MulScalar(x, s) => {
            accumulate(grads, *x, g.len(), |gx| {
                for (o, &v) in gx.iter_mut().zip(g) {
                    *o += v * s;
                }
            });
        }
        &Op::MatMul {
            a,
            b,
            batch,
            m,
            k,
            n,
            shared_b,
        } => {
            let (av, bv) = (val(a), val(b));
            if tracked(a) {
                accumulate(grads, a, av.len(), |ga| {
                    for t in 0..batch {
                        let bs = if shared_b { &bv[..] } else { &bv[t * k * n..(t + 1) * k * n] };
                        kernels::gemm_nt_acc(&g[t * m * n..(t + 1) * m * n], bs, &mut ga[t * m * k..(t + 1) * m * k], m, n, k);
                    }
                });
            }
            if tracked(b) {
                accumulate(grads, b, bv.len(), |gb| {
                    if shared_b {
                        kernels::gemm_tn_acc(av, g, gb, batch * m, k, n);
                    } else {
                        for t in 0..batch {
                            kernels::gemm_tn_acc(
                                &av[t * m * k..(t + 1) * m * k],
                                &g[t * m * n..(t + 1) * m * n],
                                &mut gb[t * k * n..(t + 1) * k * n],
                                m,
                                k,
                                n,
                            );
                        }
                    }
                });
            }
        }
        &Op::Conv2d { x, w, bias, geom } => {
            let (patch, cout, rows) = (geom.patch(), geom.cout, geom.rows());
            if tracked(w) {
                let cols = kernels::im2col(val(x), &geom);
                accumulate(grads, w, patch * cout, |gw| kernels::gemm_tn_acc(&cols, g, gw, rows, patch, cout));
            }
            if tracked(bias) {
                accumulate(grads, bias, cout, |gb| {
                    for r in 0..rows {
                        add_into(gb, &g[r * cout..(r + 1) * cout]);
                    }
                });
            }
            if tracked(x) {
                let mut dcols = vec![0.0; rows * patch];
                kernels::gemm_nt_acc(g, val(w), &mut dcols, rows, cout, patch);
                let dx = kernels::col2im(&dcols, &geom);
                accumulate(grads, x, dx.len(), |gx| add_into(gx, &dx));
            }
        }
        Op::Reduce { x, mask, mode, argmax } => {
            let xs = &nodes[*x].shape;
            let xlen = nodes[*x].data.len();
            match mode {
                ReduceMode::Max => accumulate(grads, *x, xlen, |gx| {
                    for (o, &src) in argmax.iter().enumerate() {
                        gx[src] += g[o];
                    }
                }),
                ReduceMode::Sum | ReduceMode::Mean => {
                    let count: usize = xs.iter().zip(mask).filter(|(_, &m)| m).map(|(d, _)| d).product();
                    let scale = if *mode == ReduceMode::Mean { 1.0 / count as f64 } else { 1.0 };
                    let omap = reduce_out_strides(xs, mask);
                    accumulate(grads, *x, xlen, |gx| {
                        kernels::for_each_mapped(xs, &omap, |i, o| gx[i] += g[o] * scale)
                    });
                }
            }
        }
        Op::Relu(x) => accumulate(grads, *x, g.len(), |gx| {
            for ((o, &gv), &xv) in gx.iter_mut().zip(g).zip(val(*x)) {
                if xv > 0.0 {
                    *o += gv;
                }
            }
        }),
        Op::Sigmoid(x) => accumulate(grads, *x, g.len(), |gx| {
            for ((o, &gv), &y) in gx.iter_mut().zip(g).zip(&node.data) {
                *o += gv * y * (1.0 - y);
            }
        }),
        Op::Exp(x) => accumulate(grads, *x, g.len(), |gx| {
            for ((o, &gv), &y) in gx.iter_mut().zip(g).zip(&node.data) {
                *o += gv * y;
            }
        }),
        Op::Log(x) => accumulate(grads, *x, g.len(), |gx| {
            for ((o, &gv), &xv) in gx.iter_mut().zip(g).zip(val(*x)) {
                if xv > EPS {
                    *o += gv / xv;
                }
            }
        }),
        Op::Softmax { x, axis } => {
            let (outer, len, inner) = split_axis(&node.shape, *axis);
            let y = &node.data;
            accumulate(grads, *x, g.len(), |gx| {
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut dot = 0.0;
                        for l in 0..len {
                            dot += g[base + l * inner] * y[base + l * inner];
                        }
                        for l in 0..len {
                            let p = base + l * inner;
                            gx[p] += y[p] * (g[p] - dot);
                        }
                    }
                }
            });
        }
        Op::Dropout { x, mask } => accumulate(grads, *x, g.len(), |gx| {
            for ((o, &gv), &mv) in gx.iter_mut().zip(g).zip(mask) {
                *o += gv * mv;
            }
        }),
        Op::Reshape(x) => accumulate(grads, *x, g.len(), |gx| add_into(gx, g)),
        Op::Permute { x, perm } => {
            let map = permute_map(&nodes[*x].shape, perm);
            accumulate(grads, *x, g.len(), |gx| {
                kernels::for_each_mapped(&node.shape, &map, |i, src| gx[src] += g[i])
            });
        }
        Op::Concat { parts, axis } => {
            let outer: usize = node.shape[..*axis].iter().product();
            let inner: usize = node.shape[axis + 1..].iter().product();
            let row = node.shape[*axis] * inner;
            let mut start = 0;
            for &p in parts {
                let chunk = nodes[p].shape[*axis] * inner;
                if tracked(p) {
                    accumulate(grads, p, outer * chunk, |gp| {
                        for o in 0..outer {
                            add_into(&mut gp[o * chunk..(o + 1) * chunk], &g[o * row + start..o * row + start + chunk]);
                        }
                    });
                }
                start += chunk;
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn guard_div(d: f64) -> f64 {
    if d.abs() < EPS {
        if d.is_sign_negative() {
            -EPS
        } else {
            EPS
        }
    } else {
        d
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// Strides that map an index of `a` onto `b` when `b` broadcasts to `a`
/// (right-aligned, size-1 dimensions stretch). `None` if incompatible.
fn try_broadcast_strides(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if b.len() > a.len() {
        return None;
    }
    let bst = kernels::strides(b);
    let lead = a.len() - b.len();
    let mut out = vec![0; a.len()];
    for (i, (&bd, &bs)) in b.iter().zip(&bst).enumerate() {
        let ad = a[lead + i];
        if bd == ad {
            out[lead + i] = if bd == 1 { 0 } else { bs };
        } else if bd != 1 {
            return None;
        }
    }
    Some(out)
}

fn broadcast_strides(a: &[usize], b: &[usize]) -> Vec<usize> {
    try_broadcast_strides(a, b).expect("validated at construction")
}

fn reduce_out_strides(shape: &[usize], mask: &[bool]) -> Vec<usize> {
    let kept: Vec<usize> = shape.iter().zip(mask).map(|(&d, &m)| if m { 1 } else { d }).collect();
    let st = kernels::strides(&kept);
    st.iter().zip(mask).map(|(&s, &m)| if m { 0 } else { s }).collect()
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (shape[..axis].iter().product(), shape[axis], shape[axis + 1..].iter().product())
}

/// For output index (in permuted order), strides into the input buffer.
fn permute_map(in_shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let st = kernels::strides(in_shape);
    perm.iter().map(|&p| st[p]).collect()
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].data.len()
    }

    pub fn is_tracked(&self) -> bool {
        self.tape.tracked(self.id)
    }

    /// Current value rounded to `f32`.
    pub fn value(&self) -> Tensor {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        Tensor::new(n.shape.clone(), n.data.iter().map(|&v| v as f32).collect()).expect("tape nodes hold valid shapes")
    }

    /// Current value at full precision.
    pub fn value_f64(&self) -> Vec<f64> {
        self.tape.nodes.borrow()[self.id].data.clone()
    }

    fn unary(self, f: impl Fn(f64) -> f64, op: Op) -> Var<'t> {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        let data = n.data.iter().map(|&v| f(v)).collect();
        let (shape, tracked) = (n.shape.clone(), n.tracked);
        drop(nodes);
        self.tape.push(shape, data, op, tracked)
    }

    fn binary(self, other: Var<'t>, kind: BinaryKind) -> Result<Var<'t>> {
        let nodes = self.tape.nodes.borrow();
        let (a, b) = (&nodes[self.id], &nodes[other.id]);
        let op = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        };
        let map = try_broadcast_strides(&a.shape, &b.shape).ok_or_else(|| Error::shape(op, &a.shape, &b.shape))?;
        let mut out = vec![0.0; a.data.len()];
        let (av, bv) = (&a.data, &b.data);
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / guard_div(y),
        };
        if a.shape == b.shape {
            for ((o, &x), &y) in out.iter_mut().zip(av).zip(bv) {
                *o = f(x, y);
            }
        } else {
            kernels::for_each_mapped(&a.shape, &map, |i, j| out[i] = f(av[i], bv[j]));
        }
        let shape = a.shape.clone();
        let tracked = a.tracked || b.tracked;
        drop(nodes);
        Ok(self.tape.push(shape, out, Op::Binary(kind, self.id, other.id), tracked))
    }

    /// Elementwise sum; `other` may broadcast to `self`.
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Add)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Sub)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Mul)
    }

    /// Elementwise quotient with divisors of magnitude below [`EPS`] replaced by ±`EPS`.
    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Div)
    }

    pub fn add_scalar(self, s: f64) -> Var<'t> {
        self.unary(|v| v + s, Op::AddScalar(self.id))
    }

    pub fn mul_scalar(self, s: f64) -> Var<'t> {
        self.unary(|v| v * s, Op::MulScalar(self.id, s))
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(|v| if v > 0.0 { v } else { 0.0 }, Op::Relu(self.id))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(sigmoid, Op::Sigmoid(self.id))
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(libm::exp, Op::Exp(self.id))
    }

    /// `ln(max(x, EPS))`
    pub fn log(self) -> Var<'t> {
        self.unary(|v| libm::log(v.max(EPS)), Op::Log(self.id))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        if axis >= n.shape.len() {
            return Err(Error::arg("softmax axis out of range"));
        }
        let (outer, len, inner) = split_axis(&n.shape, axis);
        let mut out = vec![0.0; n.data.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for l in 0..len {
                    mx = mx.max(n.data[base + l * inner]);
                }
                let mut sum = 0.0;
                for l in 0..len {
                    let e = libm::exp(n.data[base + l * inner] - mx);
                    out[base + l * inner] = e;
                    sum += e;
                }
                for l in 0..len {
                    out[base + l * inner] /= sum;
                }
            }
        }
        let (shape, tracked) = (n.shape.clone(), n.tracked);
        drop(nodes);
        Ok(self.tape.push(shape, out, Op::Softmax { x: self.id, axis }, tracked))
    }

    /// Inverted dropout: in training mode each element is zeroed with
    /// probability `rate` and survivors are scaled by `1 / (1 - rate)`.
    pub fn dropout(self, rate: f64, training: bool, rng: &mut impl RngCore) -> Result<Var<'t>> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::arg("dropout rate must lie in [0, 1)"));
        }
        if !training || rate == 0.0 {
            return Ok(self);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.numel())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        let data = n.data.iter().zip(&mask).map(|(v, m)| v * m).collect();
        let (shape, tracked) = (n.shape.clone(), n.tracked);
        drop(nodes);
        Ok(self.tape.push(shape, data, Op::Dropout { x: self.id, mask }, tracked))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        check_shape(shape)?;
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        if shape.iter().product::<usize>() != n.data.len() {
            return Err(Error::shape("reshape", &n.shape, shape));
        }
        let (data, tracked) = (n.data.clone(), n.tracked);
        drop(nodes);
        Ok(self.tape.push(shape.to_vec(), data, Op::Reshape(self.id), tracked))
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(self, perm: &[usize]) -> Result<Var<'t>> {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        let rank = n.shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || core::mem::replace(&mut seen[p], true)) {
            return Err(Error::arg("permute expects a permutation of the axes"));
        }
        let shape: Vec<usize> = perm.iter().map(|&p| n.shape[p]).collect();
        let map = permute_map(&n.shape, perm);
        let mut out = vec![0.0; n.data.len()];
        kernels::for_each_mapped(&shape, &map, |i, src| out[i] = n.data[src]);
        let tracked = n.tracked;
        drop(nodes);
        Ok(self.tape.push(
            shape,
            out,
            Op::Permute {
                x: self.id,
                perm: perm.to_vec(),
            },
            tracked,
        ))
    }

    /// Reduces over `axes`. Max routes its gradient to the first maximal
    /// element in row-major order.
    pub fn reduce(self, axes: &[usize], mode: ReduceMode, keep_dims: bool) -> Result<Var<'t>> {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        let rank = n.shape.len();
        if axes.is_empty() {
            return Err(Error::arg("reduce needs at least one axis"));
        }
        let mut mask = vec![false; rank];
        for &a in axes {
            if a >= rank {
                return Err(Error::arg("reduce axis out of range"));
            }
            mask[a] = true;
        }
        let kept: Vec<usize> = n.shape.iter().zip(&mask).map(|(&d, &m)| if m { 1 } else { d }).collect();
        let out_len: usize = kept.iter().product();
        let omap = reduce_out_strides(&n.shape, &mask);
        let mut argmax = Vec::new();
        let out = match mode {
            ReduceMode::Sum | ReduceMode::Mean => {
                let mut acc = vec![0.0; out_len];
                kernels::for_each_mapped(&n.shape, &omap, |i, o| acc[o] += n.data[i]);
                if mode == ReduceMode::Mean {
                    let count = (n.data.len() / out_len) as f64;
                    acc.iter_mut().for_each(|v| *v /= count);
                }
                acc
            }
            ReduceMode::Max => {
                let mut best = vec![f64::NEG_INFINITY; out_len];
                argmax = vec![usize::MAX; out_len];
                kernels::for_each_mapped(&n.shape, &omap, |i, o| {
                    if argmax[o] == usize::MAX || n.data[i] > best[o] {
                        best[o] = n.data[i];
                        argmax[o] = i;
                    }
                });
                best
            }
        };
        let shape = if keep_dims {
            kept
        } else {
            let s: Vec<usize> = n.shape.iter().zip(&mask).filter(|(_, &m)| !m).map(|(&d, _)| d).collect();
            if s.is_empty() {
                vec![1]
            } else {
                s
            }
        };
        let tracked = n.tracked;
        drop(nodes);
        Ok(self.tape.push(
            shape,
            out,
            Op::Reduce {
                x: self.id,
                mask,
                mode,
                argmax,
            },
            tracked,
        ))
    }

    pub fn sum_all(self) -> Var<'t> {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        self.reduce(&axes, ReduceMode::Sum, false).expect("all axes are valid")
    }

    pub fn mean_all(self) -> Var<'t> {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        self.reduce(&axes, ReduceMode::Mean, false).expect("all axes are valid")
    }

    /// Matrix product over the last two axes. `other` is either a plain
    /// `[k, n]` matrix shared across all leading (batch) axes of `self`, or
    /// has exactly the same leading axes as `self`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let nodes = self.tape.nodes.borrow();
        let (a, b) = (&nodes[self.id], &nodes[other.id]);
        let (ra, rb) = (a.shape.len(), b.shape.len());
        let err = || Error::shape("matmul", &a.shape, &b.shape);
        if ra < 2 || rb < 2 {
            return Err(err());
        }
        let (m, k) = (a.shape[ra - 2], a.shape[ra - 1]);
        let (k2, n) = (b.shape[rb - 2], b.shape[rb - 1]);
        let shared_b = rb == 2;
        if k != k2 || (!shared_b && (ra != rb || a.shape[..ra - 2] != b.shape[..rb - 2])) {
            return Err(err());
        }
        let batch: usize = a.shape[..ra - 2].iter().product();
        let mut out = vec![0.0; batch * m * n];
        if shared_b {
            kernels::gemm_acc(&a.data, &b.data, &mut out, batch * m, k, n);
        } else {
            for t in 0..batch {
                kernels::gemm_acc(
                    &a.data[t * m * k..(t + 1) * m * k],
                    &b.data[t * k * n..(t + 1) * k * n],
                    &mut out[t * m * n..(t + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let mut shape = a.shape.clone();
        shape[ra - 1] = n;
        let tracked = a.tracked || b.tracked;
        drop(nodes);
        Ok(self.tape.push(
            shape,
            out,
            Op::MatMul {
                a: self.id,
                b: other.id,
                batch,
                m,
                k,
                n,
                shared_b,
            },
            tracked,
        ))
    }

    /// 2-D convolution of `[N, H, W, Cin]` (or `[H, W, Cin]`) input with a
    /// `[KH, KW, Cin, Cout]` kernel and `[Cout]` bias. `Same` padding gives
    /// `ceil(H / stride)` outputs with the extra padding at the bottom/right.
    pub fn conv2d(self, weight: Var<'t>, bias: Var<'t>, stride: usize, padding: Padding) -> Result<Var<'t>> {
        let nodes = self.tape.nodes.borrow();
        let (x, w, b) = (&nodes[self.id], &nodes[weight.id], &nodes[bias.id]);
        let unbatched = x.shape.len() == 3;
        let (n, h, wd, cin) = match x.shape[..] {
            [h, w, c] => (1, h, w, c),
            [n, h, w, c] => (n, h, w, c),
            _ => return Err(Error::shape("conv2d", &x.shape, &w.shape)),
        };
        let [kh, kw, kc, cout] = w.shape[..] else {
            return Err(Error::shape("conv2d", &x.shape, &w.shape));
        };
        if kc != cin {
            return Err(Error::shape("conv2d", &x.shape, &w.shape));
        }
        if b.shape != [cout] {
            return Err(Error::shape("conv2d bias", &w.shape, &b.shape));
        }
        if stride == 0 {
            return Err(Error::arg("conv2d stride must be at least 1"));
        }
        let (oh, ow, pad_top, pad_left) = match padding {
            Padding::Same => {
                let oh = h.div_ceil(stride);
                let ow = wd.div_ceil(stride);
                let ph = ((oh - 1) * stride + kh).saturating_sub(h);
                let pw = ((ow - 1) * stride + kw).saturating_sub(wd);
                if kh > h + ph || kw > wd + pw {
                    return Err(Error::shape("conv2d kernel larger than padded input", &x.shape, &w.shape));
                }
                (oh, ow, ph / 2, pw / 2)
            }
            Padding::Valid => {
                if kh > h || kw > wd {
                    return Err(Error::shape("conv2d kernel larger than input", &x.shape, &w.shape));
                }
                ((h - kh) / stride + 1, (wd - kw) / stride + 1, 0, 0)
            }
        };
        let geom = ConvGeom {
            n,
            h,
            w: wd,
            cin,
            kh,
            kw,
            cout,
            stride,
            pad_top,
            pad_left,
            oh,
            ow,
        };
        let cols = kernels::im2col(&x.data, &geom);
        let mut out = vec![0.0; geom.rows() * cout];
        for r in 0..geom.rows() {
            out[r * cout..(r + 1) * cout].copy_from_slice(&b.data);
        }
        kernels::gemm_acc(&cols, &w.data, &mut out, geom.rows(), geom.patch(), cout);
        let shape = if unbatched { vec![oh, ow, cout] } else { vec![n, oh, ow, cout] };
        let tracked = x.tracked || w.tracked || b.tracked;
        drop(nodes);
        Ok(self.tape.push(
            shape,
            out,
            Op::Conv2d {
                x: self.id,
                w: weight.id,
                bias: bias.id,
                geom,
            },
            tracked,
        ))
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for a leaf, rounded to `f32`. `None` for untracked leaves,
    /// leaves unreachable from the root, and interior nodes.
    pub fn get(&self, v: Var<'_>) -> Option<Tensor> {
        let g = self.grads.get(v.id)?.as_ref()?;
        Some(Tensor::new(self.shapes[v.id].clone(), g.iter().map(|&x| x as f32).collect()).expect("gradient matches node shape"))
    }

    pub fn get_f64(&self, v: Var<'_>) -> Option<&[f64]> {
        self.grads.get(v.id)?.as_deref()
    }
}
