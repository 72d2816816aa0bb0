//! Reference-counted tensors with a dynamically recorded backward graph.
//!
//! A tensor produced by an op keeps its inputs alive only when at least one
//! input requires a gradient and grad mode is enabled. Everything else is a
//! plain value that is freed as soon as the caller drops it, so inference
//! through a frozen network does not retain activations.

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use crate::element::Element;

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` with gradient recording disabled on this thread.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Backward rule of a recorded op. Returns one gradient per parent, `None`
/// for parents that do not require one.
pub(crate) trait BackwardOp<T: Element> {
    fn backward(&self, parents: &[Tensor<T>], output: &[T], grad: &[T]) -> Vec<Option<Vec<T>>>;
}

struct GradFn<T: Element> {
    parents: Vec<Tensor<T>>,
    op: Box<dyn BackwardOp<T>>,
}

struct Node<T: Element> {
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    grad: RefCell<Option<Vec<T>>>,
    requires_grad: Cell<bool>,
    grad_fn: Option<GradFn<T>>,
}

pub struct Tensor<T: Element = f32>(Rc<Node<T>>);

impl<T: Element> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("dtype", &T::DTYPE)
            .field("requires_grad", &self.requires_grad())
            .finish()
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Element> Tensor<T> {
    fn from_node(shape: Vec<usize>, data: Vec<T>, requires_grad: bool, grad_fn: Option<GradFn<T>>) -> Self {
        assert_eq!(
            numel(&shape),
            data.len(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor(Rc::new(Node {
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad: Cell::new(requires_grad),
            grad_fn,
        }))
    }

    pub fn new(data: Vec<T>, shape: &[usize]) -> Self {
        Self::from_node(shape.to_vec(), data, false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(vec![T::zero(); numel(shape)], shape)
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::new(vec![value; numel(shape)], shape)
    }

    pub fn scalar(value: T) -> Self {
        Self::new(vec![value], &[])
    }

    /// A trainable leaf.
    pub fn param(data: Vec<T>, shape: &[usize]) -> Self {
        Self::from_node(shape.to_vec(), data, true, None)
    }

    /// Builds the result of an op. `make_op` is only invoked when a backward
    /// node is actually needed.
    pub(crate) fn from_op<F, O>(data: Vec<T>, shape: Vec<usize>, parents: &[&Tensor<T>], make_op: F) -> Self
    where
        F: FnOnce() -> O,
        O: BackwardOp<T> + 'static,
    {
        if needs_grad(parents) {
            let grad_fn = GradFn {
                parents: parents.iter().map(|p| (*p).clone()).collect(),
                op: Box::new(make_op()),
            };
            Self::from_node(shape, data, true, Some(grad_fn))
        } else {
            Self::from_node(shape, data, false, None)
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        numel(&self.0.shape)
    }

    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        match self.0.shape[..] {
            [n, c, h, w] => (n, c, h, w),
            _ => panic!("expected a rank-4 tensor, got shape {:?}", self.0.shape),
        }
    }

    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.0.data.borrow()
    }

    /// Mutable access to the values. Intended for optimizers and buffers;
    /// mutating a tensor that is part of a live graph invalidates its backward.
    pub fn data_mut(&self) -> RefMut<'_, Vec<T>> {
        self.0.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.borrow().clone()
    }

    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on a tensor with {} elements", self.numel());
        self.0.data.borrow()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad.get()
    }

    /// Toggles gradient tracking on a leaf. Panics on op results.
    pub fn set_requires_grad(&self, flag: bool) {
        assert!(self.0.grad_fn.is_none(), "requires_grad can only be changed on leaf tensors");
        self.0.requires_grad.set(flag);
    }

    pub fn is_leaf(&self) -> bool {
        self.0.grad_fn.is_none()
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.borrow().clone()
    }

    pub fn grad_ref(&self) -> Ref<'_, Option<Vec<T>>> {
        self.0.grad.borrow()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Copy of the values with no graph attached.
    pub fn detach(&self) -> Tensor<T> {
        Tensor::new(self.to_vec(), self.shape())
    }

    pub fn same_node(&self, other: &Tensor<T>) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    fn key(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }

    /// Backpropagates from a scalar.
    pub fn backward(&self) {
        assert_eq!(self.numel(), 1, "backward() needs a scalar; use backward_with for tensors");
        self.backward_with(vec![T::one()]);
    }

    /// Backpropagates an explicit upstream gradient. Gradients accumulate
    /// into the `grad` slot of every reachable leaf that requires one.
    pub fn backward_with(&self, grad: Vec<T>) {
        assert_eq!(grad.len(), self.numel(), "upstream gradient has the wrong length");
        if !self.requires_grad() {
            return;
        }
        let order = self.topo_order();
        let mut pending: HashMap<usize, Vec<T>> = HashMap::new();
        pending.insert(self.key(), grad);
        for t in order.iter().rev() {
            let Some(g) = pending.remove(&t.key()) else {
                continue;
            };
            match &t.0.grad_fn {
                None => {
                    let mut slot = t.0.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => add_into(acc, &g),
                        None => *slot = Some(g),
                    }
                }
                Some(gf) => {
                    let parent_grads = {
                        let out = t.0.data.borrow();
                        gf.op.backward(&gf.parents, &out, &g)
                    };
                    debug_assert_eq!(parent_grads.len(), gf.parents.len());
                    for (p, pg) in gf.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !p.requires_grad() {
                            continue;
                        }
                        assert_eq!(pg.len(), p.numel(), "backward produced a gradient of the wrong size");
                        match pending.get_mut(&p.key()) {
                            Some(acc) => add_into(acc, &pg),
                            None => {
                                pending.insert(p.key(), pg);
                            }
                        }
                    }
                }
            }
        }
    }

    /// Post-order over the grad-requiring subgraph (parents before children).
    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut seen = std::collections::HashSet::new();
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
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
                for p in gf.parents.iter().rev() {
                    if p.requires_grad() && !seen.contains(&p.key()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}

pub(crate) fn needs_grad<T: Element>(parents: &[&Tensor<T>]) -> bool {
    is_grad_enabled() && parents.iter().any(|p| p.requires_grad())
}

pub(crate) fn add_into<T: Element>(acc: &mut [T], g: &[T]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += *b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_grad_restores_state() {
        assert!(is_grad_enabled());
        no_grad(|| {
            assert!(!is_grad_enabled());
            no_grad(|| assert!(!is_grad_enabled()));
            assert!(!is_grad_enabled());
        });
        assert!(is_grad_enabled());
    }

    #[test]
    fn leaf_toggle() {
        let p = Tensor::<f32>::param(vec![1.0, 2.0], &[2]);
        assert!(p.requires_grad() && p.is_leaf());
        p.set_requires_grad(false);
        assert!(!p.requires_grad());
    }

    #[test]
    #[should_panic(expected = "does not match shape")]
    fn shape_mismatch_panics() {
        let _ = Tensor::<f32>::new(vec![1.0; 3], &[2, 2]);
    }
}
