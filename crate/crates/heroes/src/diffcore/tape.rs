//! Wengert tape: reverse-mode differentiation by operation recording.
//!
//! Every forward primitive appends a node holding its result and operand
//! indices; [`Tape::backward`] walks the nodes in reverse, accumulating
//! adjoints. Operand indices always precede result indices, so reverse
//! order is a valid reverse-topological order. Evaluation is fully
//! deterministic: the same inputs recorded in the same order produce
//! bit-identical values and gradients.

use std::cell::RefCell;

use super::tensor::Tensor;
use super::DiffError;

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that
/// produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op {
    Leaf,
    Add(usize, usize),
    Mul(usize, usize),
    MatVec(usize, usize),
    Concat(Vec<usize>),
    Sigmoid(usize),
    Tanh(usize),
    Exp(usize),
    Ln(usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Sum(usize),
    ScaledSoftplus(usize, f64),
    Clamp(usize, f64, f64),
}

struct Node {
    value: Tensor,
    grad: Vec<f64>,
    op: Op,
}

/// Records a computation for reverse-mode differentiation.
///
/// A tape plus the parameters bound to it form a single-writer unit: one
/// training step runs on one tape. For pure evaluation build a throwaway
/// tape and never call `backward`.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.borrow().len()
    }

    fn push(&self, value: Tensor, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let grad = vec![0.0; value.len()];
        nodes.push(Node { value, grad, op });
        Var(nodes.len() - 1)
    }

    /// Inserts an input leaf. Leaves accumulate gradients but have no
    /// upstream operands.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Leaf holding a single value.
    pub fn scalar(&self, value: f64) -> Var {
        self.leaf(Tensor::scalar(value))
    }

    /// Current value of a node.
    pub fn value(&self, var: Var) -> Tensor {
        self.nodes.borrow()[var.0].value.clone()
    }

    /// Value of a length-1 node.
    pub fn item(&self, var: Var) -> f64 {
        self.nodes.borrow()[var.0].value.item()
    }

    /// Accumulated adjoint of a node (valid after [`Tape::backward`]).
    pub fn grad(&self, var: Var) -> Tensor {
        let nodes = self.nodes.borrow();
        let node = &nodes[var.0];
        let mut t = Tensor::zeros(node.value.shape());
        t.data_mut().copy_from_slice(&node.grad);
        t
    }

    fn shape_of(&self, var: Var) -> Vec<usize> {
        self.nodes.borrow()[var.0].value.shape().to_vec()
    }

    fn mismatch(&self, op: &'static str, lhs: Var, rhs: Var) -> DiffError {
        DiffError::ShapeMismatch {
            op,
            lhs: self.shape_of(lhs),
            rhs: self.shape_of(rhs),
        }
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&self, a: Var, b: Var) -> Result<Var, DiffError> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            if ta.shape() != tb.shape() {
                drop(nodes);
                return Err(self.mismatch("add", a, b));
            }
            let mut out = ta.clone();
            for (o, x) in out.data_mut().iter_mut().zip(tb.data()) {
                *o += x;
            }
            out
        };
        Ok(self.push(value, Op::Add(a.0, b.0)))
    }

    /// Elementwise (Hadamard) product of two same-shape tensors.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var, DiffError> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            if ta.shape() != tb.shape() {
                drop(nodes);
                return Err(self.mismatch("mul", a, b));
            }
            let mut out = ta.clone();
            for (o, x) in out.data_mut().iter_mut().zip(tb.data()) {
                *o *= x;
            }
            out
        };
        Ok(self.push(value, Op::Mul(a.0, b.0)))
    }

    /// Matrix-vector product: `(r x c) . (c) -> (r)`.
    pub fn matvec(&self, m: Var, v: Var) -> Result<Var, DiffError> {
        let value = {
            let nodes = self.nodes.borrow();
            let (tm, tv) = (&nodes[m.0].value, &nodes[v.0].value);
            if !tm.is_matrix() || !tv.is_vector() || tm.cols() != tv.len() {
                drop(nodes);
                return Err(self.mismatch("matvec", m, v));
            }
            let (rows, cols) = (tm.rows(), tm.cols());
            let md = tm.data();
            let vd = tv.data();
            let mut out = vec![0.0; rows];
            for (r, o) in out.iter_mut().enumerate() {
                let row = &md[r * cols..(r + 1) * cols];
                *o = row.iter().zip(vd).map(|(a, b)| a * b).sum();
            }
            Tensor::vector(out)
        };
        Ok(self.push(value, Op::MatVec(m.0, v.0)))
    }

    /// Concatenation of vectors, in argument order.
    pub fn concat(&self, parts: &[Var]) -> Result<Var, DiffError> {
        let value = {
            let nodes = self.nodes.borrow();
            let mut out = Vec::new();
            for p in parts {
                let t = &nodes[p.0].value;
                if !t.is_vector() {
                    return Err(DiffError::ShapeMismatch {
                        op: "concat",
                        lhs: t.shape().to_vec(),
                        rhs: vec![],
                    });
                }
                out.extend_from_slice(t.data());
            }
            Tensor::vector(out)
        };
        Ok(self.push(value, Op::Concat(parts.iter().map(|p| p.0).collect())))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let mut out = nodes[a.0].value.clone();
            for o in out.data_mut() {
                *o = sigmoid(*o);
            }
            out
        };
        self.push(value, Op::Sigmoid(a.0))
    }

    pub fn tanh(&self, a: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let mut out = nodes[a.0].value.clone();
            for o in out.data_mut() {
                *o = o.tanh();
            }
            out
        };
        self.push(value, Op::Tanh(a.0))
    }

    pub fn exp(&self, a: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let mut out = nodes[a.0].value.clone();
            for o in out.data_mut() {
                *o = o.exp();
            }
            out
        };
        self.push(value, Op::Exp(a.0))
    }

    /// Natural log. The operand must be strictly positive.
    pub fn ln(&self, a: Var) -> Result<Var, DiffError> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            if t.data().iter().any(|&x| x <= 0.0) {
                return Err(DiffError::Domain {
                    op: "ln",
                    detail: "operand must be strictly positive",
                });
            }
            let mut out = t.clone();
            for o in out.data_mut() {
                *o = o.ln();
            }
            out
        };
        Ok(self.push(value, Op::Ln(a.0)))
    }

    pub fn neg(&self, a: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let mut out = nodes[a.0].value.clone();
            for o in out.data_mut() {
                *o = -*o;
            }
            out
        };
        self.push(value, Op::Neg(a.0))
    }

    /// Multiplies every entry by a fixed constant.
    pub fn scale(&self, a: Var, c: f64) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let mut out = nodes[a.0].value.clone();
            for o in out.data_mut() {
                *o *= c;
            }
            out
        };
        self.push(value, Op::Scale(a.0, c))
    }

    /// Adds a fixed constant to every entry.
    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let mut out = nodes[a.0].value.clone();
            for o in out.data_mut() {
                *o += c;
            }
            out
        };
        self.push(value, Op::AddScalar(a.0))
    }

    /// Sum of all entries, producing a length-1 tensor.
    pub fn sum(&self, a: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            Tensor::scalar(nodes[a.0].value.data().iter().sum())
        };
        self.push(value, Op::Sum(a.0))
    }

    /// Scaled softplus `gamma * ln(1 + exp(x / gamma))`, evaluated with the
    /// overflow-safe split `gamma * (max(x/gamma, 0) + ln(1 + exp(-|x/gamma|)))`.
    pub fn scaled_softplus(&self, a: Var, gamma: f64) -> Result<Var, DiffError> {
        if gamma <= 0.0 || !gamma.is_finite() {
            return Err(DiffError::Domain {
                op: "scaled_softplus",
                detail: "gamma must be a positive finite real",
            });
        }
        let value = {
            let nodes = self.nodes.borrow();
            let mut out = nodes[a.0].value.clone();
            for o in out.data_mut() {
                *o = scaled_softplus(*o, gamma);
            }
            out
        };
        Ok(self.push(value, Op::ScaledSoftplus(a.0, gamma)))
    }

    /// Clamps entries to `[lo, hi]`. The gradient passes through entries
    /// that were already inside the interval and is zero elsewhere.
    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let mut out = nodes[a.0].value.clone();
            for o in out.data_mut() {
                *o = o.clamp(lo, hi);
            }
            out
        };
        self.push(value, Op::Clamp(a.0, lo, hi))
    }

    /// `a - b`, composed from negation and addition.
    pub fn sub(&self, a: Var, b: Var) -> Result<Var, DiffError> {
        let nb = self.neg(b);
        self.add(a, nb)
    }

    /// `1 - x` elementwise.
    pub fn one_minus(&self, a: Var) -> Var {
        let na = self.neg(a);
        self.add_scalar(na, 1.0)
    }

    /// Inner product of two vectors, as a scalar node.
    pub fn dot(&self, a: Var, b: Var) -> Result<Var, DiffError> {
        let prod = self.mul(a, b)?;
        Ok(self.sum(prod))
    }

    /// `W.x + b`.
    pub fn affine(&self, w: Var, x: Var, b: Var) -> Result<Var, DiffError> {
        let wx = self.matvec(w, x)?;
        self.add(wx, b)
    }

    /// Propagates adjoints from a scalar root back to every node.
    ///
    /// Resets all adjoints first, so it may be called once per recorded
    /// graph; leaves accumulate contributions from all of their uses.
    pub fn backward(&self, root: Var) -> Result<(), DiffError> {
        let mut nodes = self.nodes.borrow_mut();
        if !nodes[root.0].value.is_scalar() {
            return Err(DiffError::NotScalar {
                shape: nodes[root.0].value.shape().to_vec(),
            });
        }
        for node in nodes.iter_mut() {
            for g in &mut node.grad {
                *g = 0.0;
            }
        }
        nodes[root.0].grad[0] = 1.0;

        for i in (0..=root.0).rev() {
            let (before, rest) = nodes.split_at_mut(i);
            let node = &rest[0];
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    axpy(&mut before[*a].grad, 1.0, &node.grad);
                    axpy(&mut before[*b].grad, 1.0, &node.grad);
                }
                Op::Mul(a, b) => {
                    // Operands are distinct nodes even when logically equal,
                    // so the two reads never alias the write.
                    if a == b {
                        let av: Vec<f64> = before[*a].value.data().to_vec();
                        for (g, (go, x)) in before[*a]
                            .grad
                            .iter_mut()
                            .zip(node.grad.iter().zip(av.iter()))
                        {
                            *g += 2.0 * go * x;
                        }
                    } else {
                        let (first, second) = (*a.min(b), *a.max(b));
                        let (lo, hi) = before.split_at_mut(second);
                        let (na, nb) = if *a < *b {
                            (&mut lo[first], &mut hi[0])
                        } else {
                            (&mut hi[0], &mut lo[first])
                        };
                        for ((ga, av), (gb, (bv, go))) in na
                            .grad
                            .iter_mut()
                            .zip(na.value.data())
                            .zip(nb.grad.iter_mut().zip(nb.value.data().iter().zip(&node.grad)))
                        {
                            *ga += go * bv;
                            *gb += go * av;
                        }
                    }
                }
                Op::MatVec(m, v) => {
                    let (first, second) = (*m.min(v), *m.max(v));
                    let (lo, hi) = before.split_at_mut(second);
                    let (nm, nv) = if *m < *v {
                        (&mut lo[first], &mut hi[0])
                    } else {
                        (&mut hi[0], &mut lo[first])
                    };
                    let cols = nm.value.cols();
                    for (r, go) in node.grad.iter().enumerate() {
                        let mrow = &nm.value.data()[r * cols..(r + 1) * cols];
                        let grow = &mut nm.grad[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            grow[c] += go * nv.value.data()[c];
                            nv.grad[c] += go * mrow[c];
                        }
                    }
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let len = before[*p].grad.len();
                        axpy(&mut before[*p].grad, 1.0, &node.grad[offset..offset + len]);
                        offset += len;
                    }
                }
                Op::Sigmoid(a) => {
                    for (g, (go, y)) in before[*a]
                        .grad
                        .iter_mut()
                        .zip(node.grad.iter().zip(node.value.data()))
                    {
                        *g += go * y * (1.0 - y);
                    }
                }
                Op::Tanh(a) => {
                    for (g, (go, y)) in before[*a]
                        .grad
                        .iter_mut()
                        .zip(node.grad.iter().zip(node.value.data()))
                    {
                        *g += go * (1.0 - y * y);
                    }
                }
                Op::Exp(a) => {
                    for (g, (go, y)) in before[*a]
                        .grad
                        .iter_mut()
                        .zip(node.grad.iter().zip(node.value.data()))
                    {
                        *g += go * y;
                    }
                }
                Op::Ln(a) => {
                    let node_a = &mut before[*a];
                    for ((g, x), go) in node_a
                        .grad
                        .iter_mut()
                        .zip(node_a.value.data())
                        .zip(&node.grad)
                    {
                        *g += go / x;
                    }
                }
                Op::Neg(a) => {
                    axpy(&mut before[*a].grad, -1.0, &node.grad);
                }
                Op::Scale(a, c) => {
                    axpy(&mut before[*a].grad, *c, &node.grad);
                }
                Op::AddScalar(a) => {
                    axpy(&mut before[*a].grad, 1.0, &node.grad);
                }
                Op::Sum(a) => {
                    let go = node.grad[0];
                    for g in &mut before[*a].grad {
                        *g += go;
                    }
                }
                Op::ScaledSoftplus(a, gamma) => {
                    let node_a = &mut before[*a];
                    for ((g, x), go) in node_a
                        .grad
                        .iter_mut()
                        .zip(node_a.value.data())
                        .zip(&node.grad)
                    {
                        *g += go * sigmoid(x / gamma);
                    }
                }
                Op::Clamp(a, lo_b, hi_b) => {
                    let node_a = &mut before[*a];
                    for ((g, x), go) in node_a
                        .grad
                        .iter_mut()
                        .zip(node_a.value.data())
                        .zip(&node.grad)
                    {
                        if *x >= *lo_b && *x <= *hi_b {
                            *g += go;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn axpy(dst: &mut [f64], a: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Scalar scaled softplus `gamma * ln(1 + exp(x / gamma))` without overflow.
pub fn scaled_softplus(x: f64, gamma: f64) -> f64 {
    let z = x / gamma;
    gamma * (z.max(0.0) + (-z.abs()).exp().ln_1p())
}
