//! Dense row-major tensors with tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records every operation whose inputs require gradients. Nodes
//! are appended in creation order, so the node list is already topologically
//! sorted: [`Tensor::backward`] walks it once in reverse and accumulates
//! gradients through the stored backward closures.
//!
//! ```
//! use lidarpass::tensor::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.leaf(&Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
//! let loss = x.mean_all();
//! loss.backward().unwrap();
//! assert_eq!(x.grad().unwrap(), vec![0.25; 4]);
//! ```
//!
//! Values are stored as `f64` so that central-difference gradient checks are
//! meaningful. Tensors without a tape are plain constants.

mod gradcheck;
mod kernels;
mod ops;

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use ndarray::Array2;

use crate::error::{Error, Result};

pub use gradcheck::grad_check;

type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>>>;

struct Node {
    parents: Vec<Option<usize>>,
    backward: Option<BackwardFn>,
    len: usize,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

/// Ordered record of differentiable operations for one forward pass.
///
/// A tape is single-threaded (`!Send`); independent passes on different
/// threads each own their own tape.
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes (leaves included).
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a copy of `value` as a gradient-requiring leaf.
    pub fn leaf(&self, value: &Tensor) -> Tensor {
        let id = self.push(Vec::new(), value.len(), None);
        Tensor {
            shape: value.shape.clone(),
            data: value.data.clone(),
            node: Some(NodeRef {
                tape: self.clone(),
                id,
            }),
        }
    }

    /// Builds a leaf directly from a shape and buffer.
    pub fn var(&self, shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        Ok(self.leaf(&Tensor::new(shape, data)?))
    }

    fn push(&self, parents: Vec<Option<usize>>, len: usize, backward: Option<BackwardFn>) -> usize {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            parents,
            backward,
            len,
        });
        inner.grads.push(None);
        inner.nodes.len() - 1
    }

    fn same(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    fn grad_of(&self, id: usize) -> Option<Vec<f64>> {
        self.inner.borrow().grads[id].clone()
    }

    fn run_backward(&self, root: usize) {
        let mut inner = self.inner.borrow_mut();
        let TapeInner { nodes, grads } = &mut *inner;
        seed_or_accumulate(&mut grads[root], &[1.0]);
        for id in (0..=root).rev() {
            let Some(node_grad) = grads[id].take() else {
                continue;
            };
            if let Some(backward) = &nodes[id].backward {
                let parent_grads = backward(&node_grad);
                for (parent, pg) in nodes[id].parents.iter().zip(parent_grads) {
                    if let (Some(pid), Some(pg)) = (parent, pg) {
                        debug_assert_eq!(pg.len(), nodes[*pid].len);
                        seed_or_accumulate(&mut grads[*pid], &pg);
                    }
                }
            }
            grads[id] = Some(node_grad);
        }
    }
}

fn seed_or_accumulate(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g.to_vec()),
    }
}

#[derive(Clone)]
struct NodeRef {
    tape: Tape,
    id: usize,
}

/// Dense n-dimensional array, optionally attached to a [`Tape`].
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Rc<[f64]>,
    node: Option<NodeRef>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("requires_grad", &self.requires_grad())
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape {
                op: "new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            shape,
            data: data.into(),
            node: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n].into(),
            node: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value].into(),
            node: None,
        }
    }

    pub fn from_array2(a: &Array2<f64>) -> Self {
        let (r, c) = a.dim();
        Self {
            shape: vec![r, c],
            data: a.iter().copied().collect::<Vec<_>>().into(),
            node: None,
        }
    }

    /// Views the tensor as a matrix of `shape[0]` rows.
    pub fn to_array2(&self) -> Array2<f64> {
        let rows = self.shape.first().copied().unwrap_or(1);
        let cols = if rows == 0 { self.row_len() } else { self.len() / rows };
        Array2::from_shape_vec((rows, cols), self.data.to_vec()).expect("row-major buffer")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Product of all dimensions after the first.
    pub(crate) fn row_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    pub fn tape(&self) -> Option<&Tape> {
        self.node.as_ref().map(|n| &n.tape)
    }

    /// Accumulated gradient after [`Tensor::backward`]; `None` when the tensor
    /// is untracked or unreachable from the loss.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.node.as_ref().and_then(|n| n.tape.grad_of(n.id))
    }

    /// Value-equal copy cut from the tape.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            node: None,
        }
    }

    /// Back-propagates from this scalar through its tape.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(Error::invalid(format!(
                "backward() needs a scalar loss, got shape {:?}",
                self.shape
            )));
        }
        if let Some(node) = &self.node {
            node.tape.run_backward(node.id);
        }
        Ok(())
    }

    fn id(&self) -> Option<usize> {
        self.node.as_ref().map(|n| n.id)
    }
}

/// Creates the output tensor of an operation and, if any input is tracked,
/// records a node whose closure maps the output gradient to input gradients.
fn record<F>(shape: Vec<usize>, data: Vec<f64>, inputs: &[&Tensor], backward: F) -> Result<Tensor>
where
    F: Fn(&[f64]) -> Vec<Option<Vec<f64>>> + 'static,
{
    debug_assert_eq!(shape.iter().product::<usize>(), data.len());
    let mut tape: Option<&Tape> = None;
    for t in inputs {
        if let Some(t_tape) = t.tape() {
            match tape {
                Some(existing) if !existing.same(t_tape) => return Err(Error::TapeMismatch),
                _ => tape = Some(t_tape),
            }
        }
    }
    let node = tape.map(|tape| {
        let parents = inputs.iter().map(|t| t.id()).collect();
        let id = tape.push(parents, data.len(), Some(Box::new(backward)));
        NodeRef {
            tape: tape.clone(),
            id,
        }
    });
    Ok(Tensor {
        shape,
        data: data.into(),
        node,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_gradient_is_uniform() {
        let tape = Tape::new();
        let x = tape.var(vec![4], vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        x.mean_all().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.25; 4]);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let tape = Tape::new();
        let x = tape.var(vec![3], vec![0.0; 3]).unwrap();
        x.sigmoid().mean_all().backward().unwrap();
        for g in x.grad().unwrap() {
            assert!((g - 0.25 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let x = tape.var(vec![2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(x.backward(), Err(Error::Invalid(_))));
    }

    #[test]
    fn detached_branch_gets_no_gradient() {
        let tape = Tape::new();
        let x = tape.var(vec![2], vec![1.0, 2.0]).unwrap();
        let y = tape.var(vec![2], vec![3.0, 4.0]).unwrap();
        let frozen = y.sigmoid().detach();
        assert!(!frozen.requires_grad());
        let loss = x.mul(&frozen).unwrap().sum_all();
        loss.backward().unwrap();
        assert!(y.grad().is_none());
        assert!(x.grad().is_some());
    }

    #[test]
    fn shared_input_accumulates() {
        let tape = Tape::new();
        let x = tape.var(vec![1], vec![3.0]).unwrap();
        let y = x.mul(&x).unwrap().add(&x).unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![7.0]);
    }

    #[test]
    fn mixing_tapes_is_an_error() {
        let a = Tape::new().var(vec![1], vec![1.0]).unwrap();
        let b = Tape::new().var(vec![1], vec![1.0]).unwrap();
        assert!(matches!(a.add(&b), Err(Error::TapeMismatch)));
    }

    #[test]
    fn new_checks_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn repeated_passes_are_bitwise_identical() {
        let run = || {
            let tape = Tape::new();
            let w = tape
                .var(vec![3, 2], vec![0.3, -0.1, 0.7, 0.2, -0.5, 0.9])
                .unwrap();
            let x = Tensor::new(vec![2, 3], vec![1.0, 2.0, -1.0, 0.5, 0.25, 4.0]).unwrap();
            let loss = x.matmul(&w).unwrap().log_softmax_rows().mean_all();
            loss.backward().unwrap();
            w.grad().unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}
