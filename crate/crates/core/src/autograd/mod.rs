//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. Calling
//! [`Tape::backward`] walks the tape in reverse and accumulates gradients for
//! every node that transitively depends on a parameter leaf. Nodes whose
//! inputs are all constants drop their backward closure on creation, so
//! inference on a tape costs little more than the forward pass.

mod layers;

use std::cell::RefCell;
use std::rc::Rc;

use crate::tensor::{Real, Tensor};

pub use layers::{Conv2dSpec, LinearImageMap};

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Real> {
    value: Rc<Tensor<T>>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
}

#[derive(Default)]
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a value recorded on a [`Tape`].
pub struct Var<'t, T: Real> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Real> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T: Real> Copy for Var<'_, T> {}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Rc<Tensor<T>>, requires_grad: bool, parents: Vec<usize>, backward: Option<BackwardFn<T>>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, requires_grad, parents, backward });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(Rc::new(value), false, Vec::new(), None)
    }

    /// Leaf that receives a gradient; parameters and probed inputs use this.
    pub fn variable(&self, value: Rc<Tensor<T>>) -> Var<'_, T> {
        self.push(value, true, Vec::new(), None)
    }

    /// Record a custom operation. `backward` receives the output gradient and a
    /// mask telling which parents need gradients, and returns one optional
    /// gradient per parent in order.
    pub fn op<'t>(
        &'t self,
        value: Tensor<T>,
        parents: &[Var<'t, T>],
        backward: impl Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var<'t, T> {
        let ids: Vec<usize> = parents.iter().map(|p| p.id).collect();
        let requires_grad = {
            let nodes = self.nodes.borrow();
            ids.iter().any(|&i| nodes[i].requires_grad)
        };
        let backward: Option<BackwardFn<T>> = if requires_grad { Some(Box::new(backward)) } else { None };
        self.push(Rc::new(value), requires_grad, ids, backward)
    }

    /// Gradients of the scalar `loss` with respect to every node that needs one.
    pub fn backward(&self, loss: Var<'_, T>) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        assert_eq!(root.value.len(), 1, "backward() needs a scalar loss, got {:?}", root.value.shape());
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(root.value.shape(), T::one()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else { continue };
            let Some(grad) = grads[id].take() else { continue };
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let parent_grads = backward(&grad, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&p, g), &need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                let Some(g) = g else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(g.shape(), nodes[p].value.shape(), "gradient shape for node {p}");
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        // Only leaf gradients survive; interior ones were consumed above.
        for (slot, node) in grads.iter_mut().zip(nodes.iter()) {
            if !node.parents.is_empty() || !node.requires_grad {
                *slot = None;
            }
        }
        Gradients { grads }
    }
}

pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf variable; `None` when the loss does not depend on it.
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(var.id).and_then(|g| g.take())
    }
}

fn unary<'t, T: Real>(
    x: Var<'t, T>,
    f: impl Fn(T) -> T,
    df: impl Fn(T, T) -> T + 'static,
) -> Var<'t, T> {
    // df(input, output) gives the local derivative.
    let input = x.value();
    let out = input.map(f);
    let saved_out = Rc::new(out.clone());
    x.tape.op(out, &[x], move |g, _| {
        let mut dx = g.clone();
        for ((d, &xi), &yi) in dx.data_mut().iter_mut().zip(input.data()).zip(saved_out.data()) {
            *d *= df(xi, yi);
        }
        vec![Some(dx)]
    })
}

impl<'t, T: Real> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Same value, cut from the graph.
    pub fn detach(self) -> Var<'t, T> {
        let v = self.value();
        self.tape.push(v, false, Vec::new(), None)
    }

    pub fn add(self, other: Var<'t, T>) -> Var<'t, T> {
        let out = self.value().zip_map(&other.value(), |a, b| a + b);
        self.tape.op(out, &[self, other], |g, _| vec![Some(g.clone()), Some(g.clone())])
    }

    pub fn sub(self, other: Var<'t, T>) -> Var<'t, T> {
        let out = self.value().zip_map(&other.value(), |a, b| a - b);
        self.tape.op(out, &[self, other], |g, _| vec![Some(g.clone()), Some(g.map(|v| -v))])
    }

    pub fn mul(self, other: Var<'t, T>) -> Var<'t, T> {
        let a = self.value();
        let b = other.value();
        let out = a.zip_map(&b, |x, y| x * y);
        self.tape.op(out, &[self, other], move |g, needs| {
            vec![
                needs[0].then(|| g.zip_map(&b, |d, y| d * y)),
                needs[1].then(|| g.zip_map(&a, |d, x| d * x)),
            ]
        })
    }

    pub fn scale(self, factor: T) -> Var<'t, T> {
        let out = self.value().map(|v| v * factor);
        self.tape.op(out, &[self], move |g, _| vec![Some(g.map(|v| v * factor))])
    }

    pub fn relu(self) -> Var<'t, T> {
        unary(self, |v| v.max(T::zero()), |x, _| if x > T::zero() { T::one() } else { T::zero() })
    }

    pub fn leaky_relu(self, slope: T) -> Var<'t, T> {
        unary(
            self,
            move |v| if v > T::zero() { v } else { v * slope },
            move |x, _| if x > T::zero() { T::one() } else { slope },
        )
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        unary(self, sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn tanh(self) -> Var<'t, T> {
        unary(self, |v| v.tanh(), |_, y| T::one() - y * y)
    }

    /// Clamp with pass-through gradient strictly inside `[lo, hi]`.
    pub fn clamp(self, lo: T, hi: T) -> Var<'t, T> {
        unary(
            self,
            move |v| v.max(lo).min(hi),
            move |x, _| if x >= lo && x <= hi { T::one() } else { T::zero() },
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t, T> {
        let input_shape = self.shape();
        let out = (*self.value()).clone().reshape(shape);
        self.tape.op(out, &[self], move |g, _| vec![Some(g.clone().reshape(&input_shape))])
    }

    pub fn sum(self) -> Var<'t, T> {
        let input_shape = self.shape();
        let out = Tensor::scalar(self.value().sum());
        self.tape.op(out, &[self], move |g, _| vec![Some(Tensor::full(&input_shape, g.item()))])
    }

    pub fn mean(self) -> Var<'t, T> {
        let n = T::lit(self.value().len() as f64);
        self.sum().scale(T::one() / n)
    }

    /// Forward `value` in place of `self` while passing gradients to `self`
    /// unchanged. Used for non-differentiable image operations.
    pub fn straight_through(self, value: Tensor<T>) -> Var<'t, T> {
        assert_eq!(value.shape(), self.value().shape(), "straight-through shape mismatch");
        self.tape.op(value, &[self], |g, _| vec![Some(g.clone())])
    }
}

/// Linear combination `sum_i c_i * x_i` of equally shaped variables.
pub fn weighted_sum<'t, T: Real>(terms: &[(T, Var<'t, T>)]) -> Var<'t, T> {
    assert!(!terms.is_empty(), "weighted_sum of nothing");
    let tape = terms[0].1.tape;
    let mut out = Tensor::zeros(&terms[0].1.shape());
    for (c, v) in terms {
        let value = v.value();
        for (o, &x) in out.data_mut().iter_mut().zip(value.data()) {
            *o += *c * x;
        }
    }
    let coeffs: Vec<T> = terms.iter().map(|t| t.0).collect();
    let vars: Vec<Var<'t, T>> = terms.iter().map(|t| t.1).collect();
    tape.op(out, &vars, move |g, needs| {
        coeffs
            .iter()
            .zip(needs)
            .map(|(&c, &need)| need.then(|| g.map(|d| d * c)))
            .collect()
    })
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
