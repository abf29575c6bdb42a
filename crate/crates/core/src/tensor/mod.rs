//! Dense `f64` tensors with reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation applied to tensors created on it, in
//! construction order (which is automatically a topological order). Running
//! [`Tape::backward`] replays the records in reverse and accumulates
//! gradients into every tensor whose `requires_grad` flag is set.
//!
//! Gradient semantics are additive: calling `backward` twice without
//! [`Tensor::zero_grad`] doubles the stored gradients. Tensor values are
//! immutable after construction; only the gradient cell mutates. A tape and
//! its tensors belong to one logical thread (the handles are deliberately
//! `!Send`); independent tapes can run on independent threads.

pub mod kernels;
pub mod ops;

use crate::error::{Error, Result};
use alloc::boxed::Box;
use alloc::format;
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;
use core::sync::atomic::{AtomicU64, Ordering};

static TAPE_IDS: AtomicU64 = AtomicU64::new(1);

/// Handle to one immutable tensor node on a tape. Cheap to clone.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

struct Inner {
    /// Node index inside the owning tape.
    id: usize,
    /// Identity of the owning tape, for cross-tape misuse detection.
    tape_id: u64,
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
}

impl Tensor {
    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.inner.values
    }

    pub fn numel(&self) -> usize {
        self.inner.values.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Accumulated gradient, if any backward pass has reached this tensor.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    /// Clear the accumulated gradient.
    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Value of a single-element tensor.
    pub fn scalar(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::contract(format!(
                "scalar() requires one element, tensor has shape {:?}",
                self.shape()
            )));
        }
        Ok(self.inner.values[0])
    }

    fn node_id(&self) -> usize {
        self.inner.id
    }
}

impl core::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

/// Backward rule: given the output gradient, accumulate contributions into
/// the scratch slots of the operation's inputs.
type BackFn = Box<dyn Fn(&[f64], &mut Scratch)>;

struct Node {
    tensor: Tensor,
    back: Option<BackFn>,
}

/// Per-backward-pass gradient buffers, indexed by node id.
pub(crate) struct Scratch {
    grads: Vec<Option<Vec<f64>>>,
}

impl Scratch {
    /// Mutable gradient buffer for a node, created zeroed on first use.
    fn buf(&mut self, id: usize, len: usize) -> &mut [f64] {
        self.grads[id].get_or_insert_with(|| vec![0.0; len])
    }

    /// Accumulate into the buffer of a tensor, skipping tensors outside the
    /// gradient flow.
    pub(crate) fn accumulate_into(&mut self, t: &Tensor, contribution: &[f64]) {
        if !t.requires_grad() {
            return;
        }
        let buf = self.buf(t.node_id(), t.numel());
        for (b, c) in buf.iter_mut().zip(contribution) {
            *b += c;
        }
    }

    /// Direct access for kernels that accumulate in place. Returns `None`
    /// when the tensor does not participate in the gradient flow.
    pub(crate) fn target(&mut self, t: &Tensor) -> Option<&mut [f64]> {
        if !t.requires_grad() {
            return None;
        }
        Some(self.buf(t.node_id(), t.numel()))
    }
}

/// Operation recorder for one forward/backward episode.
pub struct Tape {
    id: u64,
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: TAPE_IDS.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
        }
    }

    /// Number of recorded nodes (leaves plus op outputs).
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Create a leaf tensor. Values must be finite and match the shape.
    pub fn leaf(&self, shape: &[usize], values: Vec<f64>, requires_grad: bool) -> Result<Tensor> {
        check_shape(shape)?;
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::dim(format!(
                "leaf shape {:?} implies {} elements, got {}",
                shape,
                numel,
                values.len()
            )));
        }
        if let Some(bad) = first_non_finite(&values) {
            return Err(Error::input(format!(
                "leaf value at index {bad} is not finite"
            )));
        }
        Ok(self.push(shape.to_vec(), values, requires_grad, None))
    }

    /// Leaf with `requires_grad = false`.
    pub fn constant(&self, shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        self.leaf(shape, values, false)
    }

    /// Scalar constant leaf.
    pub fn scalar_constant(&self, value: f64) -> Result<Tensor> {
        self.constant(&[1], vec![value])
    }

    /// Record an op output. `back` is retained only when the output takes
    /// part in the gradient flow.
    fn emit(
        &self,
        op: &str,
        shape: Vec<usize>,
        values: Vec<f64>,
        requires_grad: bool,
        back: Option<BackFn>,
    ) -> Result<Tensor> {
        if let Some(bad) = first_non_finite(&values) {
            return Err(Error::numeric(format!(
                "{op} produced a non-finite value at index {bad} (shape {shape:?})"
            )));
        }
        Ok(self.push(shape, values, requires_grad, if requires_grad { back } else { None }))
    }

    fn push(
        &self,
        shape: Vec<usize>,
        values: Vec<f64>,
        requires_grad: bool,
        back: Option<BackFn>,
    ) -> Tensor {
        let mut nodes = self.nodes.borrow_mut();
        let tensor = Tensor {
            inner: Rc::new(Inner {
                id: nodes.len(),
                tape_id: self.id,
                shape,
                values,
                requires_grad,
                grad: RefCell::new(None),
            }),
        };
        nodes.push(Node {
            tensor: tensor.clone(),
            back,
        });
        tensor
    }

    fn check_owns(&self, t: &Tensor, op: &str) -> Result<()> {
        if t.inner.tape_id != self.id {
            return Err(Error::contract(format!(
                "{op}: tensor belongs to a different tape"
            )));
        }
        Ok(())
    }

    /// Reverse pass from a scalar loss.
    ///
    /// Gradients are computed afresh for the whole episode and then added
    /// into each participating tensor's gradient cell, so a second call
    /// doubles the stored gradients.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        self.check_owns(loss, "backward")?;
        if loss.numel() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let nodes = self.nodes.borrow();
        let mut scratch = Scratch {
            grads: vec![None; nodes.len()],
        };
        if loss.requires_grad() {
            scratch.grads[loss.node_id()] = Some(vec![1.0]);
        }
        for idx in (0..=loss.node_id()).rev() {
            let slot = scratch.grads[idx].take();
            if let (Some(dout), Some(back)) = (&slot, &nodes[idx].back) {
                back(dout, &mut scratch);
            }
            scratch.grads[idx] = slot;
        }
        for (idx, slot) in scratch.grads.iter().enumerate() {
            let (Some(contribution), node) = (slot, &nodes[idx]) else {
                continue;
            };
            if !node.tensor.requires_grad() {
                continue;
            }
            if let Some(bad) = first_non_finite(contribution) {
                return Err(Error::numeric(format!(
                    "backward produced a non-finite gradient at node {idx}, index {bad} (shape {:?})",
                    node.tensor.shape()
                )));
            }
            let mut grad = node.tensor.inner.grad.borrow_mut();
            match grad.as_mut() {
                Some(g) => {
                    for (a, b) in g.iter_mut().zip(contribution) {
                        *a += b;
                    }
                }
                None => *grad = Some(contribution.clone()),
            }
        }
        Ok(())
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.iter().any(|&d| d == 0) {
        return Err(Error::dim(format!(
            "shape {shape:?} must be non-empty with positive dimensions"
        )));
    }
    Ok(())
}

fn first_non_finite(values: &[f64]) -> Option<usize> {
    values.iter().position(|v| !v.is_finite())
}
