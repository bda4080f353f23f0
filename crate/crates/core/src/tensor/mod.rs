//! Dense `f64` tensors with define-by-run reverse-mode differentiation.
//!
//! Every operation on a tensor that requires a gradient records a closure
//! computing the vector-Jacobian product for its inputs. [`Tensor::backward`]
//! walks the recorded graph in reverse topological order and accumulates
//! gradients additively into every tensor that requires them. The graph is
//! rebuilt on every forward pass and freed when the last handle drops.

mod gradcheck;
mod ops;

pub use gradcheck::{compare_gradients, finite_diff_check, GradCheckConfig, GradCheckReport};

use std::cell::{Cell, Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use crate::{Error, Result};

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Disables graph recording on this thread until dropped.
pub struct NoGradGuard {
    prev: bool,
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.prev));
    }
}

pub fn no_grad() -> NoGradGuard {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    NoGradGuard { prev }
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Receives the output gradient and a per-parent "needs gradient" mask.
type BackwardFn = Box<dyn Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>>>;

struct GradFn {
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Node {
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: Cell<bool>,
    grad_fn: Option<GradFn>,
}

/// Shared handle to a node of the computation graph.
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.requires_grad())
            .finish()
    }
}

impl Tensor {
    pub fn new(data: Vec<f64>, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Invalid(format!(
                "shape {shape:?} holds {n} values but {} were given",
                data.len()
            )));
        }
        Ok(Self::leaf(data, shape, false))
    }

    /// A trainable leaf.
    pub fn parameter(data: Vec<f64>, shape: Vec<usize>) -> Result<Self> {
        let t = Self::new(data, shape)?;
        t.set_requires_grad(true);
        Ok(t)
    }

    pub fn scalar(value: f64) -> Self {
        Self::leaf(vec![value], vec![], false)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::leaf(vec![0.0; n], shape.to_vec(), false)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Invalid("ragged rows".into()));
        }
        Self::new(rows.concat(), vec![r, c])
    }

    fn leaf(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Self {
        Tensor(Rc::new(Node {
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad: Cell::new(requires_grad),
            grad_fn: None,
        }))
    }

    /// Builds the output of an operation, recording the backward closure only
    /// when recording is enabled and some parent requires a gradient.
    pub(crate) fn from_op<F>(data: Vec<f64>, shape: Vec<usize>, parents: Vec<Tensor>, backward: F) -> Self
    where
        F: Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>> + 'static,
    {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let track = grad_enabled() && parents.iter().any(Tensor::requires_grad);
        if !track {
            return Self::leaf(data, shape, false);
        }
        Tensor(Rc::new(Node {
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad: Cell::new(true),
            grad_fn: Some(GradFn {
                parents,
                backward: Box::new(backward),
            }),
        }))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.shape.iter().product()
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.0.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        self.0.data.borrow()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad.get()
    }

    /// Only meaningful on leaves; interior nodes derive this from their parents.
    pub fn set_requires_grad(&self, on: bool) {
        self.0.requires_grad.set(on);
    }

    pub fn is_leaf(&self) -> bool {
        self.0.grad_fn.is_none()
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    /// Resets the accumulator to "absent".
    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// In-place update of a leaf's values (optimizer steps, finite differences).
    pub fn update_data(&self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.0.data.borrow_mut());
    }

    pub fn set_grad(&self, grad: Vec<f64>) {
        debug_assert_eq!(grad.len(), self.numel());
        *self.0.grad.borrow_mut() = Some(grad);
    }

    /// A new leaf with the same values that never receives a gradient.
    pub fn detach(&self) -> Tensor {
        Self::leaf(self.to_vec(), self.0.shape.clone(), false)
    }

    /// Deep copy of a leaf (values and requires_grad flag, no gradient).
    pub fn deep_clone(&self) -> Tensor {
        Self::leaf(self.to_vec(), self.0.shape.clone(), self.requires_grad())
    }

    pub fn ptr_eq(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    fn key(&self) -> *const Node {
        Rc::as_ptr(&self.0)
    }

    fn accumulate_grad(&self, g: &[f64]) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Reverse-mode sweep from a scalar. Gradients add onto existing
    /// accumulators until they are reset with [`Tensor::zero_grad`].
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Invalid(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }

        let order = self.topo_order();
        let mut pending: HashMap<*const Node, Vec<f64>> = HashMap::new();
        pending.insert(self.key(), vec![1.0]);

        for node in order.iter().rev() {
            let Some(g) = pending.remove(&node.key()) else {
                continue;
            };
            if let Some(gf) = &node.0.grad_fn {
                let needs: Vec<bool> = gf.parents.iter().map(Tensor::requires_grad).collect();
                let parent_grads = (gf.backward)(&g, &needs);
                for ((parent, pg), need) in gf.parents.iter().zip(parent_grads).zip(needs) {
                    let (Some(pg), true) = (pg, need) else { continue };
                    debug_assert_eq!(pg.len(), parent.numel());
                    pending
                        .entry(parent.key())
                        .and_modify(|acc| acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b))
                        .or_insert(pg);
                }
            }
            node.accumulate_grad(&g);
        }
        Ok(())
    }

    /// Post-order over the nodes that require gradients.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut seen: HashSet<*const Node> = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !seen.insert(t.key()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(gf) = &t.0.grad_fn {
                for p in &gf.parents {
                    if p.requires_grad() && !seen.contains(&p.key()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(vec![1.0, 2.0, 3.0], vec![2, 2]).is_err());
        assert!(Tensor::new(vec![1.0; 6], vec![2, 3]).is_ok());
    }

    #[test]
    fn square_has_analytic_grad() {
        let x = Tensor::parameter(vec![3.0], vec![]).unwrap();
        let loss = x.square().sum();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn sum_grad_is_all_ones() {
        let x = Tensor::parameter(vec![0.5, -1.0, 2.0, 7.0, 0.0], vec![5]).unwrap();
        x.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 5]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::parameter(vec![1.0, 2.0], vec![2]).unwrap();
        assert!(x.scale(2.0).backward().is_err());
    }

    #[test]
    fn gradients_accumulate_until_zeroed() {
        let x = Tensor::parameter(vec![2.0], vec![]).unwrap();
        x.square().sum().backward().unwrap();
        x.square().sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![8.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn shared_subexpression_gets_both_paths() {
        // f = (x*x) + x  -> df/dx = 2x + 1
        let x = Tensor::parameter(vec![1.5], vec![]).unwrap();
        let f = x.mul(&x).unwrap().add(&x).unwrap().sum();
        f.backward().unwrap();
        assert!((x.grad().unwrap()[0] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn detached_tensor_gets_no_grad() {
        let x = Tensor::parameter(vec![1.0, 2.0], vec![2]).unwrap();
        let d = x.detach();
        let loss = x.mul(&d).unwrap().sum();
        loss.backward().unwrap();
        assert!(d.grad().is_none());
        assert_eq!(x.grad().unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn no_grad_records_nothing() {
        let x = Tensor::parameter(vec![1.0], vec![]).unwrap();
        let y = {
            let _g = no_grad();
            x.square()
        };
        assert!(!y.requires_grad());
        assert!(grad_enabled());
    }
}
