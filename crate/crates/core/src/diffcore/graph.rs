//! Eager reverse-mode differentiation over tensors.
//!
//! Every operation on a [`Var`] computes its value immediately and appends a
//! node to the owning [`Graph`]. [`Graph::grad`] walks the nodes in reverse
//! creation order. Backward rules are themselves written with `Var`
//! operations, so on a higher-order graph the returned gradients are again
//! differentiable and can be fed into further objectives.

use std::cell::{Cell, RefCell};
use std::ops::{Add, Div, Mul, Neg, Sub};
use std::rc::Rc;

use super::tensor::{col2im, im2col, ConvGeom, Tensor};
use super::Scalar;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
enum Op<F> {
    Input,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, F),
    AddScalar(usize),
    MatMul(usize, usize),
    /// `a · bᵀ`
    MatMulNT(usize, usize),
    /// `aᵀ · b`
    MatMulTN(usize, usize),
    Transpose(usize),
    Reshape(usize),
    SumAll(usize),
    Expand(usize),
    SumRows(usize),
    BroadcastRows(usize),
    Relu(usize),
    Sigmoid(usize),
    Ln(usize),
    Recip(usize),
    Sqrt(usize),
    Clamp(usize, F, F),
    Im2Col(usize, ConvGeom),
    Col2Im(usize, ConvGeom),
}

impl<F> Op<F> {
    fn parents(&self) -> [Option<usize>; 2] {
        use Op::*;
        match *self {
            Input => [None, None],
            Add(a, b) | Sub(a, b) | Mul(a, b) | MatMul(a, b) | MatMulNT(a, b) | MatMulTN(a, b) => {
                [Some(a), Some(b)]
            }
            Neg(a)
            | Scale(a, _)
            | AddScalar(a)
            | Transpose(a)
            | Reshape(a)
            | SumAll(a)
            | Expand(a)
            | SumRows(a)
            | BroadcastRows(a)
            | Relu(a)
            | Sigmoid(a)
            | Ln(a)
            | Recip(a)
            | Sqrt(a)
            | Clamp(a, _, _)
            | Im2Col(a, _)
            | Col2Im(a, _) => [Some(a), None],
        }
    }
}

struct Node<F> {
    value: Rc<Tensor<F>>,
    op: Op<F>,
    tracked: bool,
}

/// Node arena for one differentiable evaluation.
///
/// A graph built with [`Graph::first_order`] produces detached gradients:
/// they carry values but cannot be differentiated again.
pub struct Graph<F: Scalar> {
    nodes: RefCell<Vec<Node<F>>>,
    recording: Cell<bool>,
    higher_order: bool,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    /// A graph whose gradients are themselves differentiable.
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: Cell::new(true),
            higher_order: true,
        }
    }

    pub fn first_order() -> Self {
        Self {
            higher_order: false,
            ..Self::new()
        }
    }

    pub fn supports_higher_order(&self) -> bool {
        self.higher_order
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// A differentiable leaf.
    pub fn param(&self, value: Tensor<F>) -> Var<'_, F> {
        self.push_node(value, Op::Input, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&self, value: Tensor<F>) -> Var<'_, F> {
        self.push_node(value, Op::Input, false)
    }

    fn push_node(&self, value: Tensor<F>, op: Op<F>, tracked: bool) -> Var<'_, F> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        // Untracked nodes never need their history.
        let op = if tracked { op } else { Op::Input };
        nodes.push(Node {
            value: Rc::new(value),
            op,
            tracked,
        });
        Var { graph: self, id }
    }

    fn push_op(&self, value: Tensor<F>, op: Op<F>) -> Var<'_, F> {
        let tracked = self.recording.get() && {
            let nodes = self.nodes.borrow();
            op.parents().iter().flatten().any(|&p| nodes[p].tracked)
        };
        self.push_node(value, op, tracked)
    }

    fn rc_value(&self, id: usize) -> Rc<Tensor<F>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn var(&self, id: usize) -> Var<'_, F> {
        Var { graph: self, id }
    }

    /// Gradients of the scalar `output` with respect to each of `wrt`.
    ///
    /// Inputs that `output` does not depend on receive zeros.
    pub fn grad<'g>(&'g self, output: Var<'g, F>, wrt: &[Var<'g, F>]) -> Result<Vec<Var<'g, F>>> {
        let out_value = self.rc_value(output.id);
        if out_value.len() != 1 {
            return Err(Error::Shape {
                context: "gradient of non-scalar output".into(),
                expected: "1 element".into(),
                actual: format!("shape {:?}", out_value.shape()),
            });
        }

        let last = output.id;
        let mut target = vec![false; last + 1];
        for w in wrt {
            if w.id <= last {
                target[w.id] = true;
            }
        }
        // relevant[i]: node i is tracked and some target is an ancestor of it (or it is one).
        let mut relevant = vec![false; last + 1];
        {
            let nodes = self.nodes.borrow();
            for i in 0..=last {
                let node = &nodes[i];
                relevant[i] = node.tracked
                    && (target[i] || node.op.parents().iter().flatten().any(|&p| relevant[p]));
            }
        }

        let saved = self.recording.get();
        if !self.higher_order {
            self.recording.set(false);
        }

        let mut adjoint: Vec<Option<Var<'g, F>>> = vec![None; last + 1];
        if relevant[last] {
            adjoint[last] = Some(self.constant(Tensor::full(out_value.shape(), F::ONE)));
        }
        for i in (0..=last).rev() {
            let Some(g) = adjoint[i] else { continue };
            let op = self.nodes.borrow()[i].op.clone();
            if !op.parents().iter().flatten().any(|&p| relevant[p]) {
                continue;
            }
            for (p, gp) in self.backward(i, &op, g, &relevant) {
                adjoint[p] = Some(match adjoint[p] {
                    Some(acc) => acc + gp,
                    None => gp,
                });
            }
        }

        let grads = wrt
            .iter()
            .map(|w| match adjoint.get(w.id).copied().flatten() {
                Some(g) => g,
                None => self.constant(Tensor::zeros(w.value().shape())),
            })
            .collect();
        self.recording.set(saved);
        Ok(grads)
    }

    fn backward<'g>(
        &'g self,
        id: usize,
        op: &Op<F>,
        g: Var<'g, F>,
        relevant: &[bool],
    ) -> Vec<(usize, Var<'g, F>)> {
        use Op::*;
        let v = |i| self.var(i);
        let mut out = Vec::with_capacity(2);
        let mut emit = |p: usize, f: &dyn Fn() -> Var<'g, F>| {
            if relevant[p] {
                out.push((p, f()));
            }
        };
        match *op {
            Input => {}
            Add(a, b) => {
                emit(a, &|| g);
                emit(b, &|| g);
            }
            Sub(a, b) => {
                emit(a, &|| g);
                emit(b, &|| -g);
            }
            Mul(a, b) => {
                emit(a, &|| g * v(b));
                emit(b, &|| g * v(a));
            }
            Neg(a) => emit(a, &|| -g),
            Scale(a, c) => emit(a, &|| g.scale(c)),
            AddScalar(a) => emit(a, &|| g),
            MatMul(a, b) => {
                emit(a, &|| g.matmul_nt(v(b)));
                emit(b, &|| v(a).tn_matmul(g));
            }
            MatMulNT(a, b) => {
                emit(a, &|| g.matmul(v(b)));
                emit(b, &|| g.tn_matmul(v(a)));
            }
            MatMulTN(a, b) => {
                emit(a, &|| v(b).matmul_nt(g));
                emit(b, &|| v(a).matmul(g));
            }
            Transpose(a) => emit(a, &|| g.t()),
            Reshape(a) => emit(a, &|| g.reshape(self.rc_value(a).shape())),
            SumAll(a) => emit(a, &|| g.expand(self.rc_value(a).shape())),
            Expand(a) => emit(a, &|| g.sum().reshape(self.rc_value(a).shape())),
            SumRows(a) => emit(a, &|| g.broadcast_rows(self.rc_value(a).rows())),
            BroadcastRows(a) => emit(a, &|| g.sum_rows()),
            Relu(a) => emit(a, &|| {
                let mask = self
                    .rc_value(a)
                    .map(|x| if x > F::ZERO { F::ONE } else { F::ZERO });
                g * self.constant(mask)
            }),
            Sigmoid(a) => emit(a, &|| {
                let y = v(id);
                g * (y * (-y).add_scalar(F::ONE))
            }),
            Ln(a) => emit(a, &|| g * v(a).recip()),
            Recip(a) => emit(a, &|| {
                let y = v(id);
                -(g * y * y)
            }),
            Sqrt(a) => emit(a, &|| (g * v(id).recip()).scale(F::from_f64(0.5))),
            Clamp(a, lo, hi) => emit(a, &|| {
                let mask = self
                    .rc_value(a)
                    .map(|x| if x > lo && x < hi { F::ONE } else { F::ZERO });
                g * self.constant(mask)
            }),
            Im2Col(a, geom) => emit(a, &|| g.col2im(geom)),
            Col2Im(a, geom) => emit(a, &|| g.im2col(geom)),
        }
        out
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, F: Scalar> {
    graph: &'g Graph<F>,
    id: usize,
}

impl<'g, F: Scalar> std::fmt::Debug for Var<'g, F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.value().shape())
            .finish()
    }
}

impl<'g, F: Scalar> Var<'g, F> {
    pub fn graph(&self) -> &'g Graph<F> {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor<F>> {
        self.graph.rc_value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> F {
        self.value().item()
    }

    /// Whether gradients can flow back through this node.
    pub fn is_tracked(&self) -> bool {
        self.graph.nodes.borrow()[self.id].tracked
    }

    fn unary(self, value: Tensor<F>, op: Op<F>) -> Self {
        self.graph.push_op(value, op)
    }

    pub fn scale(self, c: F) -> Self {
        let value = self.value().map(|x| x * c);
        self.unary(value, Op::Scale(self.id, c))
    }

    pub fn add_scalar(self, c: F) -> Self {
        let value = self.value().map(|x| x + c);
        self.unary(value, Op::AddScalar(self.id))
    }

    pub fn matmul(self, other: Self) -> Self {
        let value = self.value().matmul(&other.value());
        self.unary(value, Op::MatMul(self.id, other.id))
    }

    /// `self · otherᵀ`
    pub fn matmul_nt(self, other: Self) -> Self {
        let value = self.value().matmul_t(&other.value());
        self.unary(value, Op::MatMulNT(self.id, other.id))
    }

    /// `selfᵀ · other`
    pub fn tn_matmul(self, other: Self) -> Self {
        let value = self.value().t_matmul(&other.value());
        self.unary(value, Op::MatMulTN(self.id, other.id))
    }

    pub fn t(self) -> Self {
        let value = self.value().transpose();
        self.unary(value, Op::Transpose(self.id))
    }

    pub fn reshape(self, shape: &[usize]) -> Self {
        let value = self.value().reshape(shape);
        self.unary(value, Op::Reshape(self.id))
    }

    /// Sum of all elements, as a scalar of shape `[]`.
    pub fn sum(self) -> Self {
        let value = Tensor::scalar(self.value().sum());
        self.unary(value, Op::SumAll(self.id))
    }

    pub fn mean(self) -> Self {
        let n = self.value().len();
        self.sum().scale(F::from_f64(1.0 / n as f64))
    }

    /// Broadcasts a single-element tensor to `shape`.
    pub fn expand(self, shape: &[usize]) -> Self {
        let value = Tensor::full(shape, self.item());
        self.unary(value, Op::Expand(self.id))
    }

    pub fn sum_rows(self) -> Self {
        let value = self.value().sum_rows();
        self.unary(value, Op::SumRows(self.id))
    }

    pub fn broadcast_rows(self, m: usize) -> Self {
        let value = self.value().broadcast_rows(m);
        self.unary(value, Op::BroadcastRows(self.id))
    }

    /// Subtracts each column's mean over the rows.
    pub fn center_columns(self) -> Self {
        let m = self.value().rows();
        self - self
            .sum_rows()
            .scale(F::from_f64(1.0 / m as f64))
            .broadcast_rows(m)
    }

    pub fn relu(self) -> Self {
        let value = self.value().map(|x| x.max(F::ZERO));
        self.unary(value, Op::Relu(self.id))
    }

    pub fn sigmoid(self) -> Self {
        let value = self.value().map(sigmoid);
        self.unary(value, Op::Sigmoid(self.id))
    }

    pub fn ln(self) -> Self {
        let value = self.value().map(F::ln);
        self.unary(value, Op::Ln(self.id))
    }

    pub fn recip(self) -> Self {
        let value = self.value().map(|x| F::ONE / x);
        self.unary(value, Op::Recip(self.id))
    }

    pub fn sqrt(self) -> Self {
        let value = self.value().map(F::sqrt);
        self.unary(value, Op::Sqrt(self.id))
    }

    pub fn square(self) -> Self {
        self * self
    }

    pub fn clamp(self, lo: F, hi: F) -> Self {
        let value = self.value().map(|x| x.max(lo).min(hi));
        self.unary(value, Op::Clamp(self.id, lo, hi))
    }

    pub fn im2col(self, geom: ConvGeom) -> Self {
        let value = im2col(&self.value(), &geom);
        self.unary(value, Op::Im2Col(self.id, geom))
    }

    pub fn col2im(self, geom: ConvGeom) -> Self {
        let value = col2im(&self.value(), &geom);
        self.unary(value, Op::Col2Im(self.id, geom))
    }
}

pub(crate) fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::ZERO {
        F::ONE / (F::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::ONE + e)
    }
}

macro_rules! binary_op {
    ($trait:ident, $method:ident, $variant:ident, $f:expr) => {
        impl<'g, F: Scalar> $trait for Var<'g, F> {
            type Output = Var<'g, F>;
            fn $method(self, rhs: Self) -> Self {
                assert!(
                    std::ptr::eq(self.graph, rhs.graph),
                    "operands belong to different graphs"
                );
                let value = self.value().zip_map(&rhs.value(), $f);
                self.graph.push_op(value, Op::$variant(self.id, rhs.id))
            }
        }
    };
}

binary_op!(Add, add, Add, |a, b| a + b);
binary_op!(Sub, sub, Sub, |a, b| a - b);
binary_op!(Mul, mul, Mul, |a, b| a * b);

impl<'g, F: Scalar> Div for Var<'g, F> {
    type Output = Var<'g, F>;
    #[allow(clippy::suspicious_arithmetic_impl)]
    fn div(self, other: Self) -> Self {
        self * other.recip()
    }
}

impl<'g, F: Scalar> Neg for Var<'g, F> {
    type Output = Var<'g, F>;
    fn neg(self) -> Self {
        let value = self.value().map(|x| -x);
        self.unary(value, Op::Neg(self.id))
    }
}
