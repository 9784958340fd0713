//! Dense tensors with reverse-mode automatic differentiation.
//!
//! Tensors are immutable once created; every operation records its inputs so
//! that [`Tensor::backward`] can replay the graph in reverse creation order
//! (creation ids form a topological order by construction). Leaves created
//! with [`Tensor::param`] accumulate gradients across backward calls until
//! [`Tensor::zero_grad`] resets them.

mod conv;
mod element;
mod gradcheck;
mod ops;
mod pool;

pub use element::Element;
pub use gradcheck::{grad_check, grad_check_multi, GradCheckOutcome};

use std::cell::{Cell, RefCell};
use std::collections::{HashMap, HashSet};
use std::rc::Rc;

use crate::error::{Error, Result};

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let v = c.get();
        c.set(v + 1);
        v
    })
}

/// Backward rule selector for a recorded operation. Saved context (argmax
/// indices, hyperparameters) lives inline.
#[derive(Debug, Clone)]
pub(crate) enum OpKind<E> {
    Add,
    Sub,
    Mul,
    Div,
    Scale(E),
    AddScalar,
    Relu,
    Sigmoid,
    Sqrt,
    Ln,
    Abs,
    ClampMin(E),
    Prelu,
    Conv2d { stride: usize, padding: usize },
    AvgPool2,
    UpBilinear2,
    GlobalAvgPool,
    GlobalMaxPool { argmax: Vec<usize> },
    ChannelMean,
    ChannelMax { argmax: Vec<usize> },
    ConcatChannels,
    SliceChannels { start: usize },
    Sum,
    Mean,
}

#[derive(Debug)]
pub(crate) struct Op<E: Element> {
    pub(crate) kind: OpKind<E>,
    pub(crate) parents: Vec<Tensor<E>>,
}

#[derive(Debug)]
struct Inner<E: Element> {
    id: u64,
    shape: Vec<usize>,
    data: Vec<E>,
    grad: RefCell<Option<Vec<E>>>,
    requires_grad: bool,
    needs_grad: bool,
    op: Option<Op<E>>,
}

/// N-dimensional array of reals (rank at most 4, images laid out B×C×H×W).
#[derive(Debug)]
pub struct Tensor<E: Element = f32> {
    inner: Rc<Inner<E>>,
}

impl<E: Element> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor { inner: Rc::clone(&self.inner) }
    }
}

impl<E: Element> Tensor<E> {
    fn build(shape: Vec<usize>, data: Vec<E>, requires_grad: bool, op: Option<Op<E>>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let needs_grad = requires_grad
            || op
                .as_ref()
                .map(|o| o.parents.iter().any(|p| p.needs_grad()))
                .unwrap_or(false);
        // Parent links are only kept where gradients can flow; this lets
        // inference graphs free intermediates eagerly.
        let op = if needs_grad { op } else { None };
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape,
                data,
                grad: RefCell::new(None),
                requires_grad,
                needs_grad,
                op,
            }),
        }
    }

    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<E>, kind: OpKind<E>, parents: Vec<Tensor<E>>) -> Self {
        Self::build(shape, data, false, Some(Op { kind, parents }))
    }

    /// Leaf tensor that does not track gradients.
    pub fn from_vec(shape: &[usize], data: Vec<E>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape(
                "from_vec",
                format!("shape {:?} wants {} elements, got {}", shape, shape.iter().product::<usize>(), data.len()),
            ));
        }
        if shape.len() > 4 {
            return Err(Error::shape("from_vec", format!("rank {} exceeds 4", shape.len())));
        }
        Ok(Self::build(shape.to_vec(), data, false, None))
    }

    /// Learnable leaf: participates in backward and accumulates `grad`.
    pub fn param(shape: &[usize], data: Vec<E>) -> Result<Self> {
        let t = Self::from_vec(shape, data)?;
        Ok(Self::build(t.inner.shape.clone(), t.inner.data.clone(), true, None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::build(shape.to_vec(), vec![E::zero(); shape.iter().product()], false, None)
    }

    pub fn full(shape: &[usize], v: E) -> Self {
        Self::build(shape.to_vec(), vec![v; shape.iter().product()], false, None)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, E::one())
    }

    pub fn scalar(v: E) -> Self {
        Self::full(&[1], v)
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.inner.data
    }

    /// (batch, channels, height, width) of a rank-4 tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.inner.shape[..] {
            [b, c, h, w] => Ok((b, c, h, w)),
            _ => Err(Error::shape("dims4", format!("expected rank 4, got {:?}", self.shape()))),
        }
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> E {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.inner.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub(crate) fn needs_grad(&self) -> bool {
        self.inner.needs_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.op.is_none()
    }

    pub fn grad(&self) -> Option<Vec<E>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    fn accumulate_leaf_grad(&self, g: &[E]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => {
                for (a, &v) in acc.iter_mut().zip(g) {
                    *a += v;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Leaf copy sharing the same values but detached from the graph.
    pub fn detach(&self) -> Self {
        Self::build(self.inner.shape.clone(), self.inner.data.clone(), false, None)
    }

    /// Leaf copy in another precision (used by the 64-bit gradient checks).
    pub fn cast<F: Element>(&self) -> Tensor<F> {
        let data = self.data().iter().map(|&v| F::from_f64(v.to_f64())).collect();
        Tensor::build(self.inner.shape.clone(), data, self.inner.requires_grad, None)
    }

    pub fn all_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }

    /// Reverse-mode sweep from a scalar loss. Every reachable leaf created
    /// with [`Tensor::param`] receives `∂loss/∂leaf` in its `grad` slot;
    /// repeated calls without [`Tensor::zero_grad`] accumulate.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape().to_vec()));
        }
        // Creation ids order parents before children, so descending id order
        // is a reverse topological order of the reachable graph.
        let mut nodes: Vec<Tensor<E>> = Vec::new();
        let mut seen: HashSet<u64> = HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !seen.insert(t.id()) {
                continue;
            }
            if let Some(op) = t.inner.op.as_ref() {
                for p in &op.parents {
                    if p.needs_grad() && !seen.contains(&p.id()) {
                        stack.push(p.clone());
                    }
                }
            }
            nodes.push(t);
        }
        nodes.sort_by_key(|t| std::cmp::Reverse(t.id()));

        let mut grads: HashMap<u64, Vec<E>> = HashMap::new();
        grads.insert(self.id(), vec![E::one()]);

        for node in &nodes {
            let Some(gout) = grads.remove(&node.id()) else { continue };
            match node.inner.op.as_ref() {
                Some(op) => {
                    ops::backprop(node, op, &gout, &mut |parent: &Tensor<E>, g: Vec<E>| {
                        debug_assert_eq!(g.len(), parent.numel());
                        match grads.get_mut(&parent.id()) {
                            Some(acc) => {
                                for (a, v) in acc.iter_mut().zip(g) {
                                    *a += v;
                                }
                            }
                            None => {
                                grads.insert(parent.id(), g);
                            }
                        }
                    });
                }
                None => {
                    if node.inner.requires_grad {
                        node.accumulate_leaf_grad(&gout);
                    }
                }
            }
        }
        Ok(())
    }
}
