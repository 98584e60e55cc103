use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::{Real, Tensor};
use crate::error::{contract_err, Result};

/// Vector-Jacobian product: maps the output gradient to one optional
/// gradient per parent, in parent order.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&[T]) -> Vec<Option<Vec<T>>>>;

struct Node<T> {
    value: Rc<Tensor<T>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

/// Dynamic reverse-mode tape. Nodes are appended in evaluation order, so the
/// node index is already a topological order for the backward sweep.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a value recorded on a [`Tape`].
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T> Copy for Var<'_, T> {}

impl<T> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}", self.id)
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a leaf; it receives a gradient iff `tensor.requires_grad()`.
    pub fn leaf(&self, tensor: Tensor<T>) -> Var<'_, T> {
        let requires_grad = tensor.requires_grad();
        self.insert(Rc::new(tensor), Vec::new(), None, requires_grad)
    }

    /// Records a trainable leaf regardless of the tensor's flag.
    pub fn param(&self, tensor: Tensor<T>) -> Var<'_, T> {
        self.insert(Rc::new(tensor), Vec::new(), None, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&self, tensor: Tensor<T>) -> Var<'_, T> {
        self.insert(Rc::new(tensor), Vec::new(), None, false)
    }

    pub fn scalar(&self, value: T) -> Var<'_, T> {
        self.constant(Tensor::scalar(value))
    }

    fn insert(
        &self,
        value: Rc<Tensor<T>>,
        parents: Vec<usize>,
        backward: Option<BackwardFn<T>>,
        requires_grad: bool,
    ) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            parents,
            backward,
            requires_grad,
        });
        Var { tape: self, id }
    }

    /// Records the result of a custom operation with its vector-Jacobian
    /// product. The backward closure is dropped
    /// when no parent requires a gradient.
    pub fn record<F>(&self, value: Tensor<T>, parents: &[Var<'_, T>], backward: F) -> Var<'_, T>
    where
        F: Fn(&[T]) -> Vec<Option<Vec<T>>> + 'static,
    {
        let ids: Vec<usize> = parents.iter().map(|p| p.id).collect();
        let requires_grad = {
            let nodes = self.nodes.borrow();
            ids.iter().any(|&p| nodes[p].requires_grad)
        };
        let backward: Option<BackwardFn<T>> = requires_grad.then(|| Box::new(backward) as BackwardFn<T>);
        self.insert(Rc::new(value), ids, backward, requires_grad)
    }

    fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Back-propagates from a scalar output.
    pub fn backward(&self, output: Var<'_, T>) -> Result<Gradients<T>> {
        let numel = output.value().numel();
        if numel != 1 {
            return Err(contract_err!(
                "backward seed needs a scalar output, got {:?}",
                output.shape()
            ));
        }
        self.backward_with(output, vec![T::one()])
    }

    /// Back-propagates an explicit output gradient.
    pub fn backward_with(&self, output: Var<'_, T>, seed: Vec<T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let out = &nodes[output.id];
        if seed.len() != out.value.numel() {
            return Err(contract_err!(
                "seed of {} scalars for output of shape {:?}",
                seed.len(),
                out.value.shape()
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        if !out.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[output.id] = Some(seed);
        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            // Interior gradients are released once propagated.
            let Some(g) = grads[id].take() else {
                continue;
            };
            let parent_grads = backward(&g);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.len(), nodes[p].value.numel());
                match &mut grads[p] {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += *b),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad_of(self.id)
    }
}

/// Gradients of leaves after a backward sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&[T]> {
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }

    /// Gradient of `var`, zeros when it was not reached.
    pub fn get_or_zeros(&self, var: Var<'_, T>) -> Vec<T> {
        match self.get(var) {
            Some(g) => g.to_vec(),
            None => vec![T::zero(); var.value().numel()],
        }
    }

    pub fn take(&mut self, var: Var<'_, T>) -> Option<Vec<T>> {
        self.grads.get_mut(var.id).and_then(Option::take)
    }
}
