use std::cell::{Ref, RefCell};
use std::fmt;
use std::rc::Rc;

use super::ops::Op;
use super::{Element, Result, Tensor, TensorError};

/// A learnable leaf tensor with a gradient accumulator.
///
/// Cloning a `Param` yields another handle to the same storage, so a network
/// and its parameter registry can share parameters.
#[derive(Clone)]
pub struct Param<T>(Rc<RefCell<ParamSlot<T>>>);

struct ParamSlot<T> {
    value: Rc<Tensor<T>>,
    grad: Tensor<T>,
    trainable: bool,
}

impl<T: Element> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self(Rc::new(RefCell::new(ParamSlot {
            value: Rc::new(value),
            grad,
            trainable: true,
        })))
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.0.borrow().value.clone()
    }

    pub fn grad(&self) -> Ref<'_, Tensor<T>> {
        Ref::map(self.0.borrow(), |s| &s.grad)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.borrow().value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.0.borrow().value.numel()
    }

    pub fn is_trainable(&self) -> bool {
        self.0.borrow().trainable
    }

    pub fn set_trainable(&self, trainable: bool) {
        self.0.borrow_mut().trainable = trainable;
    }

    pub fn zero_grad(&self) {
        self.0.borrow_mut().grad.fill(T::zero());
    }

    pub fn accumulate_grad(&self, g: &Tensor<T>) {
        self.0.borrow_mut().grad.add_assign(g);
    }

    /// Replaces the value; the shape must not change.
    pub fn set_value(&self, value: Tensor<T>) -> Result<()> {
        let mut slot = self.0.borrow_mut();
        if slot.value.shape() != value.shape() {
            return Err(TensorError::DataLength {
                op: "set_value",
                len: value.numel(),
                shape: slot.value.shape().to_vec(),
            });
        }
        slot.value = Rc::new(value);
        Ok(())
    }

    /// In-place update given the current gradient.
    pub fn update(&self, f: impl FnOnce(&mut Tensor<T>, &Tensor<T>)) {
        let mut slot = self.0.borrow_mut();
        let ParamSlot { value, grad, .. } = &mut *slot;
        f(Rc::make_mut(value), grad);
    }

    pub fn ptr_eq(&self, other: &Param<T>) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }
}

impl<T: Element> fmt::Debug for Param<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let slot = self.0.borrow();
        f.debug_struct("Param")
            .field("shape", &slot.value.shape())
            .field("trainable", &slot.trainable)
            .finish()
    }
}

enum Sink<T> {
    None,
    Param(Param<T>),
    Local(Option<Tensor<T>>),
}

pub(crate) struct Node<T> {
    pub value: Rc<Tensor<T>>,
    pub op: Op<T>,
    pub requires_grad: bool,
    sink: Sink<T>,
}

/// Ordered record of executed operations. Backward replays the record in
/// reverse, accumulating adjoints into every reachable gradient leaf.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
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

impl<T: Element> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<T: Element> Tape<T> {
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

    fn push(
        &self,
        value: Rc<Tensor<T>>,
        op: Op<T>,
        requires_grad: bool,
        sink: Sink<T>,
    ) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
            sink,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records a value that does not require a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(Rc::new(value), Op::Leaf, false, Sink::None)
    }

    /// Records a gradient-requiring leaf whose gradient lives on this tape.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(Rc::new(value), Op::Leaf, true, Sink::Local(None))
    }

    /// Binds a parameter; backward accumulates into the parameter's gradient.
    pub fn param(&self, param: &Param<T>) -> Var<'_, T> {
        self.push(param.value(), Op::Leaf, true, Sink::Param(param.clone()))
    }

    /// Gradient accumulated on a tape-local leaf, if any backward reached it.
    pub fn grad(&self, var: Var<'_, T>) -> Option<Tensor<T>> {
        match &self.nodes.borrow()[var.id].sink {
            Sink::Local(g) => g.clone(),
            Sink::Param(p) => Some(p.grad().clone()),
            Sink::None => None,
        }
    }

    pub(crate) fn record(&self, value: Tensor<T>, op: Op<T>) -> Var<'_, T> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            op.inputs().iter().any(|&i| nodes[i].requires_grad)
        };
        self.push(Rc::new(value), op, requires_grad, Sink::None)
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    /// Which linear piece every ReLU and max pool on the tape selected: the
    /// sign of each ReLU input and each pooling argmax. Two evaluations with
    /// equal patterns lie on the same piece of a piecewise-smooth function.
    pub fn activation_pattern(&self) -> Vec<usize> {
        let nodes = self.nodes.borrow();
        let mut out = Vec::new();
        for node in nodes.iter() {
            match &node.op {
                Op::Relu { input } => {
                    out.extend(
                        nodes[*input]
                            .value
                            .data()
                            .iter()
                            .map(|&v| (v > T::zero()) as usize),
                    );
                }
                Op::MaxPool2d { argmax, .. } => out.extend_from_slice(argmax),
                _ => {}
            }
        }
        out
    }

    /// Reverse-mode sweep from a scalar loss. Gradients add to whatever the
    /// leaves already hold.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<()> {
        self.check_owner(loss, "backward")?;
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(TensorError::NotScalar {
                shape: root.value.shape().to_vec(),
            });
        }
        let mut adjoints: Vec<Option<Tensor<T>>> = (0..=loss.id).map(|_| None).collect();
        adjoints[loss.id] = Some(Tensor::full(root.value.shape(), T::one()));
        let mut local = Vec::new();
        for id in (0..=loss.id).rev() {
            let Some(g) = adjoints[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            match &node.sink {
                Sink::Param(p) => p.accumulate_grad(&g),
                Sink::Local(_) => local.push((id, g.clone())),
                Sink::None => {}
            }
            for (parent, contrib) in node.op.backward(&g, &node.value, &nodes) {
                match &mut adjoints[parent] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        drop(nodes);
        let mut nodes = self.nodes.borrow_mut();
        for (id, g) in local {
            if let Sink::Local(acc) = &mut nodes[id].sink {
                match acc {
                    Some(a) => a.add_assign(&g),
                    None => *acc = Some(g),
                }
            }
        }
        Ok(())
    }

    /// Clears gradients held by tape-local leaves.
    pub fn zero_local_grads(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            if let Sink::Local(g) = &mut node.sink {
                *g = None;
            }
        }
    }

    pub(crate) fn check_owner(&self, var: Var<'_, T>, op: &'static str) -> Result<()> {
        if std::ptr::eq(self, var.tape) {
            Ok(())
        } else {
            Err(TensorError::ForeignTape { op })
        }
    }
}

impl<'t, T: Element> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub(crate) fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn grad(&self) -> Option<Tensor<T>> {
        self.tape.grad(*self)
    }
}
