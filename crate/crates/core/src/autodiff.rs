//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles in
//! execution order, so node inputs always precede the node itself. Calling
//! [`Tape::backward`] walks the nodes once in reverse and returns the
//! adjoints as [`Gradients`]. A tape is meant to live for one forward pass
//! and is not `Sync`.

use std::cell::RefCell;
use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatVec {
        m: usize,
        v: usize,
        rows: usize,
        cols: usize,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// `a * scale + shift`
    Affine {
        a: usize,
        scale: f64,
    },
    Relu(usize),
    Tanh(usize),
    Sigmoid(usize),
    Square(usize),
    Abs(usize),
    Sum(usize),
    Mean(usize),
    Concat(Vec<usize>),
    Select {
        a: usize,
        index: usize,
    },
    /// Binary cross-entropy on a scalar logit with a constant target.
    BceWithLogits {
        logit: usize,
        target: f64,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of operations for one forward pass.
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

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .field("value", &self.value())
            .finish()
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

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records a tensor as a leaf. Gradients flow to it iff the tensor
    /// requires grad.
    pub fn leaf(&self, t: &Tensor) -> Var<'_> {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            t.requires_grad(),
        )
    }

    /// A leaf that never receives gradient.
    pub fn constant(&self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var<'_>> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.push(Vec::new(), vec![v], Op::Leaf, false)
    }

    pub fn vector(&self, data: Vec<f64>) -> Var<'_> {
        let n = data.len();
        self.push(vec![n], data, Op::Leaf, false)
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Each node is visited exactly once, in reverse recording order.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                root.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            propagate(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn add_into(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, f: impl FnOnce(&mut [f64])) {
    if !nodes[id].requires_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.len()]);
    f(slot);
}

fn propagate(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    match node.op {
        Op::Leaf => {}
        Op::MatVec { m, v, rows, cols } => {
            let mv = &nodes[m].value;
            let vv = &nodes[v].value;
            add_into(grads, nodes, m, |gm| {
                for r in 0..rows {
                    let gr = g[r];
                    if gr == 0.0 {
                        continue;
                    }
                    let row = &mut gm[r * cols..(r + 1) * cols];
                    for (dst, x) in row.iter_mut().zip(vv) {
                        *dst += gr * x;
                    }
                }
            });
            add_into(grads, nodes, v, |gv| {
                for r in 0..rows {
                    let gr = g[r];
                    if gr == 0.0 {
                        continue;
                    }
                    let row = &mv[r * cols..(r + 1) * cols];
                    for (dst, w) in gv.iter_mut().zip(row) {
                        *dst += gr * w;
                    }
                }
            });
        }
        Op::Add(a, b) => {
            add_into(grads, nodes, a, |ga| zip_add(ga, g));
            add_into(grads, nodes, b, |gb| zip_add(gb, g));
        }
        Op::Sub(a, b) => {
            add_into(grads, nodes, a, |ga| zip_add(ga, g));
            add_into(grads, nodes, b, |gb| {
                gb.iter_mut().zip(g).for_each(|(d, s)| *d -= s)
            });
        }
        Op::Mul(a, b) => {
            let (av, bv) = (&nodes[a].value, &nodes[b].value);
            add_into(grads, nodes, a, |ga| {
                for i in 0..g.len() {
                    ga[i] += g[i] * bv[i];
                }
            });
            add_into(grads, nodes, b, |gb| {
                for i in 0..g.len() {
                    gb[i] += g[i] * av[i];
                }
            });
        }
        Op::Affine { a, scale } => {
            add_into(grads, nodes, a, |ga| {
                ga.iter_mut().zip(g).for_each(|(d, s)| *d += s * scale)
            });
        }
        Op::Relu(a) => {
            let av = &nodes[a].value;
            add_into(grads, nodes, a, |ga| {
                for i in 0..g.len() {
                    if av[i] > 0.0 {
                        ga[i] += g[i];
                    }
                }
            });
        }
        Op::Tanh(a) => {
            let y = &node.value;
            add_into(grads, nodes, a, |ga| {
                for i in 0..g.len() {
                    ga[i] += g[i] * (1.0 - y[i] * y[i]);
                }
            });
        }
        Op::Sigmoid(a) => {
            let y = &node.value;
            add_into(grads, nodes, a, |ga| {
                for i in 0..g.len() {
                    ga[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            });
        }
        Op::Square(a) => {
            let av = &nodes[a].value;
            add_into(grads, nodes, a, |ga| {
                for i in 0..g.len() {
                    ga[i] += 2.0 * av[i] * g[i];
                }
            });
        }
        Op::Abs(a) => {
            let av = &nodes[a].value;
            add_into(grads, nodes, a, |ga| {
                for i in 0..g.len() {
                    ga[i] += g[i] * sign(av[i]);
                }
            });
        }
        Op::Sum(a) => {
            add_into(grads, nodes, a, |ga| ga.iter_mut().for_each(|d| *d += g[0]));
        }
        Op::Mean(a) => {
            let n = nodes[a].value.len() as f64;
            add_into(grads, nodes, a, |ga| {
                ga.iter_mut().for_each(|d| *d += g[0] / n)
            });
        }
        Op::Concat(ref parts) => {
            let mut offset = 0;
            for &p in parts {
                let n = nodes[p].value.len();
                let chunk = &g[offset..offset + n];
                add_into(grads, nodes, p, |gp| zip_add(gp, chunk));
                offset += n;
            }
        }
        Op::Select { a, index } => {
            add_into(grads, nodes, a, |ga| ga[index] += g[0]);
        }
        Op::BceWithLogits { logit, target } => {
            let z = nodes[logit].value[0];
            add_into(grads, nodes, logit, |gl| {
                gl[0] += g[0] * (sigmoid(z) - target)
            });
        }
    }
}

fn zip_add(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn len(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self) -> Vec<f64> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    /// Value of a single-element var.
    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value[0]
    }

    pub fn to_tensor(&self) -> Tensor {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn unary(self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let (shape, value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            (
                n.shape.clone(),
                n.value.iter().map(|&x| f(x)).collect(),
                n.requires_grad,
            )
        };
        self.tape.push(shape, value, op, rg)
    }

    fn binary(
        self,
        other: Var<'t>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        debug_assert!(std::ptr::eq(self.tape, other.tape));
        let (shape, value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            if a.shape != b.shape {
                return Err(Error::Shape {
                    op: name,
                    left: a.shape.clone(),
                    right: b.shape.clone(),
                });
            }
            let value = a
                .value
                .iter()
                .zip(&b.value)
                .map(|(&x, &y)| f(x, y))
                .collect();
            (a.shape.clone(), value, a.requires_grad || b.requires_grad)
        };
        Ok(self.tape.push(shape, value, op, rg))
    }

    /// Matrix-vector product; `self` must be `[r, c]` and `v` must be `[c]`.
    pub fn matvec(self, v: Var<'t>) -> Result<Var<'t>> {
        let (value, rows, cols, rg) = {
            let nodes = self.tape.nodes.borrow();
            let (m, x) = (&nodes[self.id], &nodes[v.id]);
            if m.shape.len() != 2 || x.shape.len() != 1 || m.shape[1] != x.shape[0] {
                return Err(Error::Shape {
                    op: "matvec",
                    left: m.shape.clone(),
                    right: x.shape.clone(),
                });
            }
            let (rows, cols) = (m.shape[0], m.shape[1]);
            let value = m
                .value
                .chunks_exact(cols)
                .map(|row| row.iter().zip(&x.value).map(|(a, b)| a * b).sum())
                .collect::<Vec<f64>>();
            (value, rows, cols, m.requires_grad || x.requires_grad)
        };
        Ok(self.tape.push(
            vec![rows],
            value,
            Op::MatVec {
                m: self.id,
                v: v.id,
                rows,
                cols,
            },
            rg,
        ))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    /// `self * scale + shift`, elementwise.
    pub fn affine(self, scale: f64, shift: f64) -> Var<'t> {
        self.unary(Op::Affine { a: self.id, scale }, |x| x * scale + shift)
    }

    pub fn scale(self, scale: f64) -> Var<'t> {
        self.affine(scale, 0.0)
    }

    pub fn neg(self) -> Var<'t> {
        self.affine(-1.0, 0.0)
    }

    /// `1 - self`, used for GRU gate complements.
    pub fn one_minus(self) -> Var<'t> {
        self.affine(-1.0, 1.0)
    }

    /// Elementwise `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(self) -> Var<'t> {
        self.unary(Op::Relu(self.id), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(Op::Tanh(self.id), f64::tanh)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.id), sigmoid)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(Op::Square(self.id), |x| x * x)
    }

    pub fn abs(self) -> Var<'t> {
        self.unary(Op::Abs(self.id), f64::abs)
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(self) -> Var<'t> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            (n.value.iter().sum::<f64>(), n.requires_grad)
        };
        self.tape
            .push(Vec::new(), vec![value], Op::Sum(self.id), rg)
    }

    pub fn mean(self) -> Var<'t> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            (
                n.value.iter().sum::<f64>() / n.value.len() as f64,
                n.requires_grad,
            )
        };
        self.tape
            .push(Vec::new(), vec![value], Op::Mean(self.id), rg)
    }

    /// Squared Euclidean norm.
    pub fn sq_norm(self) -> Var<'t> {
        self.square().sum()
    }

    /// Entry `index` as a scalar.
    pub fn select(self, index: usize) -> Result<Var<'t>> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            let Some(&v) = n.value.get(index) else {
                return Err(Error::Shape {
                    op: "select",
                    left: n.shape.clone(),
                    right: vec![index],
                });
            };
            (v, n.requires_grad)
        };
        Ok(self.tape.push(
            Vec::new(),
            vec![value],
            Op::Select { a: self.id, index },
            rg,
        ))
    }

    /// Binary cross-entropy of `sigmoid(self)` against `target`, computed
    /// stably from the logit.
    pub fn bce_with_logits(self, target: f64) -> Result<Var<'t>> {
        let (z, rg) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            if n.value.len() != 1 {
                return Err(Error::Shape {
                    op: "bce_with_logits",
                    left: n.shape.clone(),
                    right: Vec::new(),
                });
            }
            (n.value[0], n.requires_grad)
        };
        // log(1 + e^z) - target * z
        let loss = z.max(0.0) + (-z.abs()).exp().ln_1p() - target * z;
        Ok(self.tape.push(
            Vec::new(),
            vec![loss],
            Op::BceWithLogits {
                logit: self.id,
                target,
            },
            rg,
        ))
    }
}

/// Concatenates vars into a flat vector.
pub fn concat<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let Some(first) = parts.first() else {
        return Err(Error::contract("concat of zero parts"));
    };
    let tape = first.tape;
    let (value, rg) = {
        let nodes = tape.nodes.borrow();
        let mut value = Vec::new();
        let mut rg = false;
        for p in parts {
            let n = &nodes[p.id];
            value.extend_from_slice(&n.value);
            rg |= n.requires_grad;
        }
        (value, rg)
    };
    let n = value.len();
    Ok(tape.push(
        vec![n],
        value,
        Op::Concat(parts.iter().map(|p| p.id).collect()),
        rg,
    ))
}

/// Sums scalar vars in order. Returns an error for an empty slice.
pub fn sum_all<'t>(terms: &[Var<'t>]) -> Result<Var<'t>> {
    let mut iter = terms.iter();
    let Some(&first) = iter.next() else {
        return Err(Error::contract("sum of zero terms"));
    };
    iter.try_fold(first, |acc, &t| acc.add(t))
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if any flowed to it.
    pub fn get(&self, v: Var<'_>) -> Option<&[f64]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    /// Gradient with respect to `v`, zero-filled when nothing flowed to it.
    pub fn wrt(&self, v: Var<'_>) -> Vec<f64> {
        match self.get(v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; v.len()],
        }
    }

    /// Adds the gradient for `v` into the grad slot of `t`.
    pub fn accumulate_into(&self, v: Var<'_>, t: &mut Tensor) -> Result<()> {
        if !t.requires_grad() {
            return Ok(());
        }
        t.accumulate_grad(&self.wrt(v))
    }
}

/// Runs the reverse sweep and accumulates into each leaf's grad slot.
///
/// `leaves[i]` must be the tensor `vars[i]` was recorded from.
pub fn backward(loss: Var<'_>, vars: &[Var<'_>], leaves: &mut [&mut Tensor]) -> Result<()> {
    if vars.len() != leaves.len() {
        return Err(Error::contract(
            "backward: vars and leaves differ in length",
        ));
    }
    let grads = loss.tape.backward(loss)?;
    for (v, t) in vars.iter().zip(leaves.iter_mut()) {
        grads.accumulate_into(*v, t)?;
    }
    Ok(())
}
