//! Reference-counted dynamic computation graph with reverse-mode
//! differentiation.
//!
//! A [`Var`] keeps its parents alive only when it participates in gradient
//! computation, so inference under [`no_grad`] frees intermediates as soon as
//! they go out of scope.

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[Var<T>], &Tensor<T>) -> Vec<Option<Tensor<T>>>>;

struct Op<T: Scalar> {
    name: &'static str,
    parents: Vec<Var<T>>,
    backward: BackwardFn<T>,
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Option<Op<T>>,
}

/// A tensor value that may carry a gradient history.
pub struct Var<T: Scalar>(Rc<Node<T>>);

impl<T: Scalar> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var(Rc::clone(&self.0))
    }
}

impl<T: Scalar> fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .field("op", &self.0.op.as_ref().map(|o| o.name))
            .finish()
    }
}

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Runs `f` without recording any gradient history.
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

impl<T: Scalar> Var<T> {
    /// A constant: never receives a gradient.
    pub fn constant(value: Tensor<T>) -> Self {
        Var(Rc::new(Node {
            value,
            requires_grad: false,
            op: None,
        }))
    }

    /// A leaf that accumulates a gradient during [`Var::backward`].
    pub fn leaf(value: Tensor<T>) -> Self {
        Var(Rc::new(Node {
            value,
            requires_grad: true,
            op: None,
        }))
    }

    /// Result of a differentiable op. History is dropped when no parent needs
    /// a gradient or recording is disabled.
    pub fn from_op(
        name: &'static str,
        value: Tensor<T>,
        parents: Vec<Var<T>>,
        backward: impl Fn(&Tensor<T>, &[Var<T>], &Tensor<T>) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Self {
        let track = grad_enabled() && parents.iter().any(Var::requires_grad);
        let op = track.then(|| Op {
            name,
            parents,
            backward: Box::new(backward),
        });
        Var(Rc::new(Node {
            value,
            requires_grad: track,
            op,
        }))
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.op.is_none()
    }

    /// Same value, no history.
    pub fn detach(&self) -> Self {
        Var::constant(self.0.value.clone())
    }

    pub fn item(&self) -> T {
        self.0.value.item()
    }

    fn id(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }

    /// Back-propagates from a single-element output with seed gradient 1.
    pub fn backward(&self) -> Gradients<T> {
        assert_eq!(
            self.0.value.numel(),
            1,
            "backward() needs a scalar output; use backward_with for {:?}",
            self.shape()
        );
        self.backward_with(Tensor::ones(self.shape()))
    }

    /// Back-propagates an arbitrary output gradient.
    pub fn backward_with(&self, seed: Tensor<T>) -> Gradients<T> {
        assert_eq!(seed.shape(), self.shape(), "seed gradient shape mismatch");
        let mut out = Gradients {
            map: HashMap::new(),
        };
        if !self.requires_grad() {
            return out;
        }
        let order = self.topo_order();
        let mut pending: HashMap<usize, Tensor<T>> = HashMap::new();
        pending.insert(self.id(), seed);
        for var in order.iter().rev() {
            let Some(grad) = pending.remove(&var.id()) else {
                continue;
            };
            match &var.0.op {
                None => {
                    out.map.insert(var.id(), (var.clone(), grad));
                }
                Some(op) => {
                    let parent_grads = (op.backward)(&grad, &op.parents, &var.0.value);
                    debug_assert_eq!(parent_grads.len(), op.parents.len(), "{}", op.name);
                    for (parent, g) in op.parents.iter().zip(parent_grads) {
                        let Some(g) = g else { continue };
                        if !parent.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(g.shape(), parent.shape(), "grad shape from {}", op.name);
                        match pending.get_mut(&parent.id()) {
                            Some(acc) => acc.add_assign(&g),
                            None => {
                                pending.insert(parent.id(), g);
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Post-order over the nodes that require gradients.
    fn topo_order(&self) -> Vec<Var<T>> {
        let mut order = Vec::new();
        let mut seen = HashSet::new();
        let mut stack: Vec<(Var<T>, bool)> = vec![(self.clone(), false)];
        while let Some((var, expanded)) = stack.pop() {
            if expanded {
                order.push(var);
                continue;
            }
            if !seen.insert(var.id()) {
                continue;
            }
            stack.push((var.clone(), true));
            if let Some(op) = &var.0.op {
                for p in op.parents.iter().rev() {
                    if p.requires_grad() && !seen.contains(&p.id()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}

/// Gradients of leaf variables produced by one backward pass.
pub struct Gradients<T: Scalar> {
    // The leaf is stored alongside its gradient so its address stays unique
    // for the lifetime of this map.
    map: HashMap<usize, (Var<T>, Tensor<T>)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: &Var<T>) -> Option<&Tensor<T>> {
        self.map.get(&var.id()).map(|(_, g)| g)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}
