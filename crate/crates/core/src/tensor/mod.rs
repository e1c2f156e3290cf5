//! Dense f32 tensors with reverse-mode automatic differentiation.
//!
//! Storage is row-major. Gradients flow through a define-by-run graph: every
//! op that consumes a tracked tensor records a node holding its parents and a
//! backward closure. [`Tensor::backward`] walks that graph once in reverse
//! topological order and accumulates gradients into the `requires_grad`
//! leaves. Graph construction is single-threaded; reductions accumulate in
//! f64 so results do not depend on chunking.

mod conv;
mod gradcheck;
mod matmul;
mod norm;
mod ops;

pub use gradcheck::{grad_check, GradCheckReport};

use std::cell::{Cell, Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(1) };
    static NO_GRAD_DEPTH: Cell<u32> = const { Cell::new(0) };
}

/// Runs `f` with gradient recording disabled. Nesting is allowed.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    NO_GRAD_DEPTH.with(|d| d.set(d.get() + 1));
    let out = f();
    NO_GRAD_DEPTH.with(|d| d.set(d.get() - 1));
    out
}

/// True when ops should record backward nodes.
pub fn grad_enabled() -> bool {
    NO_GRAD_DEPTH.with(|d| d.get() == 0)
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Per-parent gradients produced by a backward closure. `None` marks a parent
/// that does not need a gradient (constant input).
pub type ParentGrads = Vec<Option<Vec<f32>>>;

type BackwardFn = Box<dyn Fn(&[f32]) -> ParentGrads>;

struct OpNode {
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f32>>,
    grad: RefCell<Option<Vec<f32>>>,
    requires_grad: Cell<bool>,
    op: Option<OpNode>,
}

/// A reference-counted handle to a tensor node. Cloning is cheap and aliases
/// the same storage.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad.get())
            .field("leaf", &self.inner.op.is_none())
            .finish()
    }
}

impl Tensor {
    fn new_leaf(shape: Vec<usize>, data: Vec<f32>) -> Tensor {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: Cell::new(false),
                op: None,
            }),
        }
    }

    /// Builds a tensor from raw data; `data.len()` must match the shape.
    pub fn from_vec(data: Vec<f32>, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::Shape(format!(
                "from_vec: {} values do not fill shape {:?} ({} elements)",
                data.len(),
                shape,
                numel
            )));
        }
        Ok(Tensor::new_leaf(shape.to_vec(), data))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::new_leaf(shape.to_vec(), vec![0.0; shape.iter().product()])
    }

    pub fn full(shape: &[usize], value: f32) -> Tensor {
        Tensor::new_leaf(shape.to_vec(), vec![value; shape.iter().product()])
    }

    pub fn scalar(value: f32) -> Tensor {
        Tensor::new_leaf(vec![1], vec![value])
    }

    /// Standard-normal samples drawn in row-major order.
    pub fn randn(shape: &[usize], rng: &mut impl Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        Tensor::new_leaf(shape.to_vec(), data)
    }

    pub fn rand_uniform(shape: &[usize], lo: f32, hi: f32, rng: &mut impl Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor::new_leaf(shape.to_vec(), data)
    }

    /// Core constructor for ops. Records a backward node only when gradients
    /// are enabled and at least one parent is tracked. The closure receives
    /// the upstream gradient (same shape as this tensor) and returns one
    /// gradient per parent, in order.
    pub fn from_op(
        shape: Vec<usize>,
        data: Vec<f32>,
        parents: Vec<Tensor>,
        backward: impl Fn(&[f32]) -> ParentGrads + 'static,
    ) -> Tensor {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        let record = grad_enabled() && parents.iter().any(Tensor::is_tracked);
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: Cell::new(false),
                op: record.then(|| OpNode {
                    parents,
                    backward: Box::new(backward),
                }),
            }),
        }
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn ndim(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    /// Borrows the value buffer. Do not hold across ops that mutate this
    /// tensor's data.
    pub fn data(&self) -> Ref<'_, Vec<f32>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.inner.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f32 {
        let d = self.inner.data.borrow();
        assert!(d.len() == 1, "item() on tensor of shape {:?}", self.inner.shape);
        d[0]
    }

    /// Overwrites the value buffer in place. Only valid between graph
    /// constructions (optimizer updates, gradient probes).
    pub fn set_data(&self, values: &[f32]) {
        let mut d = self.inner.data.borrow_mut();
        assert_eq!(d.len(), values.len(), "set_data: length mismatch");
        d.copy_from_slice(values);
    }

    /// Mutable access to the value buffer, same caveat as [`Tensor::set_data`].
    pub fn data_mut(&self, f: impl FnOnce(&mut [f32])) {
        f(&mut self.inner.data.borrow_mut());
    }

    /// Marks a leaf as trainable (gradients accumulate into it). Builder form.
    pub fn requires_grad(self, flag: bool) -> Tensor {
        assert!(self.inner.op.is_none(), "requires_grad on non-leaf tensor");
        self.inner.requires_grad.set(flag);
        self
    }

    /// Toggles trainability. Affects ops recorded after the call, so freeze
    /// parameters before building the graph.
    pub fn set_requires_grad(&self, flag: bool) {
        assert!(self.inner.op.is_none(), "set_requires_grad on non-leaf tensor");
        self.inner.requires_grad.set(flag);
    }

    pub fn is_requires_grad(&self) -> bool {
        self.inner.requires_grad.get()
    }

    /// True when a backward pass has gradients to deliver to or through this
    /// tensor.
    pub fn is_tracked(&self) -> bool {
        self.inner.op.is_some() || self.inner.requires_grad.get()
    }

    /// Copies the values into a fresh constant leaf, cutting the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::new_leaf(self.inner.shape.clone(), self.to_vec())
    }

    pub fn grad(&self) -> Option<Vec<f32>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    fn accumulate_grad(&self, g: &[f32]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(buf) => {
                for (d, s) in buf.iter_mut().zip(g) {
                    *d += s;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Reverse-mode sweep from a scalar. Gradients accumulate (add) into each
    /// reachable `requires_grad` leaf; call [`Tensor::zero_grad`] between
    /// steps to reset.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward requires a scalar, got shape {:?}",
                self.shape()
            )));
        }

        // Post-order DFS, iterative so deep graphs cannot overflow the stack.
        let mut topo: Vec<Tensor> = Vec::new();
        let mut seen: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        seen.insert(self.id());
        while let Some((node, child)) = stack.pop() {
            let n_parents = node.inner.op.as_ref().map_or(0, |op| op.parents.len());
            if child < n_parents {
                stack.push((node.clone(), child + 1));
                let parent = node.inner.op.as_ref().unwrap().parents[child].clone();
                if parent.is_tracked() && seen.insert(parent.id()) {
                    stack.push((parent, 0));
                }
            } else {
                topo.push(node);
            }
        }

        let mut grads: HashMap<u64, Vec<f32>> = HashMap::new();
        grads.insert(self.id(), vec![1.0]);

        for node in topo.iter().rev() {
            let Some(up) = grads.remove(&node.id()) else {
                continue;
            };
            if node.inner.requires_grad.get() {
                node.accumulate_grad(&up);
            }
            if let Some(op) = &node.inner.op {
                let parent_grads = (op.backward)(&up);
                debug_assert_eq!(parent_grads.len(), op.parents.len());
                for (parent, grad) in op.parents.iter().zip(parent_grads) {
                    let Some(grad) = grad else { continue };
                    if !parent.is_tracked() {
                        continue;
                    }
                    debug_assert_eq!(grad.len(), parent.numel());
                    match grads.entry(parent.id()) {
                        std::collections::hash_map::Entry::Occupied(mut e) => {
                            for (d, s) in e.get_mut().iter_mut().zip(&grad) {
                                *d += s;
                            }
                        }
                        std::collections::hash_map::Entry::Vacant(e) => {
                            e.insert(grad);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
