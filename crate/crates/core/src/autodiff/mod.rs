//! Reverse-mode differentiation over a define-by-run tape.
//!
//! Every op executed through a [`Var`] appends one node to its [`Tape`]. Node
//! ids are assigned in execution order, so the tape is already topologically
//! sorted and the backward sweep is a single reverse pass.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Maps the output gradient of a node to one gradient per parent.
pub type BackwardFn<R> = Box<dyn Fn(&Tensor<R>) -> Vec<Option<Tensor<R>>>>;

struct Node<R> {
    op: &'static str,
    value: Rc<Tensor<R>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<R>>,
    requires_grad: bool,
    leaf: bool,
}

/// Ordered record of executed operations. Confined to one thread.
pub struct Tape<R> {
    nodes: RefCell<Vec<Node<R>>>,
    recording: Cell<bool>,
    fault: Cell<Option<&'static str>>,
}

/// Handle to a value on a tape.
pub struct Var<'t, R> {
    tape: &'t Tape<R>,
    id: usize,
}

impl<R> Clone for Var<'_, R> {
    fn clone(&self) -> Self {
        *self
    }
}
impl<R> Copy for Var<'_, R> {}

impl<R: Real> Default for Tape<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), recording: Cell::new(true), fault: Cell::new(None) }
    }

    /// A tape that never stores backward closures; used for inference.
    pub fn inference() -> Self {
        let t = Self::new();
        t.recording.set(false);
        t
    }

    /// Test hook: halves every gradient leaving nodes of `op`, producing a
    /// deliberately wrong derivative.
    #[doc(hidden)]
    pub fn inject_fault(&self, op: &'static str) {
        self.fault.set(Some(op));
    }

    pub fn is_recording(&self) -> bool {
        self.recording.get()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Constant input: gradients are not propagated into it.
    pub fn constant(&self, t: Tensor<R>) -> Var<'_, R> {
        self.leaf(t, false)
    }

    /// Differentiable leaf (parameter or checked input).
    pub fn param(&self, t: Tensor<R>) -> Var<'_, R> {
        let rec = self.is_recording();
        self.leaf(t, rec)
    }

    fn leaf(&self, t: Tensor<R>, requires_grad: bool) -> Var<'_, R> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op: "leaf",
            value: Rc::new(t),
            parents: Vec::new(),
            backward: None,
            requires_grad,
            leaf: true,
        });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// Appends the result of an op. `make_backward` is only invoked when some
    /// parent needs a gradient.
    pub fn push<'t>(
        &'t self,
        op: &'static str,
        value: Tensor<R>,
        parents: &[Var<'t, R>],
        make_backward: impl FnOnce() -> BackwardFn<R>,
    ) -> Result<Var<'t, R>> {
        value.check_finite(op)?;
        let requires_grad = self.is_recording() && parents.iter().any(|p| p.requires_grad());
        let backward = if requires_grad { Some(make_backward()) } else { None };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            value: Rc::new(value),
            parents: parents.iter().map(|p| p.id).collect(),
            backward,
            requires_grad,
            leaf: false,
        });
        Ok(Var { tape: self, id: nodes.len() - 1 })
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, R>) -> Result<Gradients<R>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut pending: Vec<Option<Tensor<R>>> = (0..=loss.id).map(|_| None).collect();
        pending[loss.id] = Some(Tensor::full(root.value.shape(), R::one()));
        let mut leaves = HashMap::new();
        for id in (0..=loss.id).rev() {
            let Some(g) = pending[id].take() else { continue };
            let node = &nodes[id];
            if node.leaf {
                if node.requires_grad {
                    leaves.insert(id, g);
                }
                continue;
            }
            let Some(backward) = &node.backward else { continue };
            let mut parent_grads = backward(&g);
            if self.fault.get() == Some(node.op) {
                for pg in parent_grads.iter_mut().flatten() {
                    *pg = pg.map(|v| v * R::lit(0.5));
                }
            }
            debug_assert_eq!(parent_grads.len(), node.parents.len(), "op {}", node.op);
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), nodes[p].value.shape(), "grad of {} into {}", node.op, nodes[p].op);
                match &mut pending[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { by_id: leaves })
    }
}

impl<'t, R: Real> Var<'t, R> {
    pub fn tape(&self) -> &'t Tape<R> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor<R>> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Scalar value of a single-element var.
    pub fn item(&self) -> R {
        self.value().item()
    }
}

/// Gradients of differentiable leaves after a backward sweep.
pub struct Gradients<R> {
    by_id: HashMap<usize, Tensor<R>>,
}

impl<R: Real> Gradients<R> {
    pub fn get(&self, v: Var<'_, R>) -> Option<&Tensor<R>> {
        self.by_id.get(&v.id)
    }

    pub fn take(&mut self, v: Var<'_, R>) -> Option<Tensor<R>> {
        self.by_id.remove(&v.id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn non_scalar_backward_is_a_contract_error() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::ones(&[3]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn inference_tape_records_no_gradients() {
        let tape = Tape::<f64>::inference();
        let x = tape.param(Tensor::ones(&[3]));
        assert!(!x.requires_grad());
        let s = x.sum().unwrap();
        assert!(!s.requires_grad());
    }

    #[test]
    fn sum_gives_ones() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_fn(&[2, 3], |i| i as f64 - 2.0));
        let loss = x.sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn sum_of_squares_gives_twice_x() {
        let tape = Tape::<f64>::new();
        let xt = Tensor::from_fn(&[4], |i| i as f64 * 0.5 - 1.0);
        let x = tape.param(xt.clone());
        let loss = x.mul(x).unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap();
        let expect: Vec<f64> = xt.data().iter().map(|v| 2.0 * v).collect();
        assert_eq!(g.get(x).unwrap().data(), expect.as_slice());
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // loss = sum(x) + sum(x) -> grad 2
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::ones(&[2]));
        let s = x.sum().unwrap();
        let loss = s.add(s).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn nan_forward_is_an_error() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::new(&[1], vec![-1.0]).unwrap());
        let err = tape.push("sqrt", x.value().map(|v| v.sqrt()), &[x], || Box::new(|_| vec![None]));
        assert!(matches!(err, Err(Error::NonFinite(_))));
    }
}
