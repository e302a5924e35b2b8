//! Reverse-mode automatic differentiation on dynamically shaped arrays.
//!
//! A [`Tape`] records every operation applied to [`Var`]s during a forward
//! pass. Node ids are creation-ordered, so a single reverse sweep over ids
//! propagates gradients without an explicit topological sort. Tapes are
//! rebuilt per training step and dropped afterwards.

use ndarray::{ArcArray, Array, ArrayD, Dimension, IxDyn};
use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

/// Element type of all differentiable arrays (`f32` for training,
/// `f64` for finite-difference oracles).
pub trait Scalar:
    ndarray::LinalgScalar
    + num_traits::Float
    + num_traits::NumCast
    + ndarray::ScalarOperand
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    /// Cast an `f64` literal into the scalar type.
    fn lit(x: f64) -> Self {
        num_traits::cast(x).expect("literal out of range for scalar type")
    }
    fn to_f64(self) -> f64 {
        num_traits::cast(self).expect("scalar not representable as f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

pub type Value<F> = ArcArray<F, IxDyn>;

/// Accumulates gradients into parent slots during the reverse sweep.
pub struct GradSink<'a, F: Scalar> {
    grads: &'a mut [Option<ArrayD<F>>],
}

impl<F: Scalar> GradSink<'_, F> {
    pub fn add(&mut self, parent: usize, g: ArrayD<F>) {
        match &mut self.grads[parent] {
            Some(acc) => {
                debug_assert_eq!(acc.shape(), g.shape(), "gradient shape mismatch");
                *acc += &g;
            }
            slot @ None => *slot = Some(g),
        }
    }
}

type BackFn<F> = Box<dyn Fn(&ArrayD<F>, &mut GradSink<'_, F>)>;

struct Node<F: Scalar> {
    value: Value<F>,
    back: Option<BackFn<F>>,
}

/// Recording tape. Cheap to clone (shared interior).
pub struct Tape<F: Scalar> {
    nodes: Rc<RefCell<Vec<Node<F>>>>,
}

impl<F: Scalar> Clone for Tape<F> {
    fn clone(&self) -> Self {
        Tape {
            nodes: Rc::clone(&self.nodes),
        }
    }
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Rc::new(RefCell::new(Vec::new())),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Record a leaf node (input or parameter). Leaves retain their
    /// gradients after `backward`.
    pub fn var<D: Dimension>(&self, value: Array<F, D>) -> Var<F> {
        self.push(value.into_dyn(), None)
    }

    /// Record a leaf from a shared array without copying.
    pub fn var_shared(&self, value: Value<F>) -> Var<F> {
        self.push_value(value, None)
    }

    pub(crate) fn push(&self, value: ArrayD<F>, back: Option<BackFn<F>>) -> Var<F> {
        self.push_value(value.into_shared(), back)
    }

    pub(crate) fn push_value(&self, value: Value<F>, back: Option<BackFn<F>>) -> Var<F> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { value, back });
        Var {
            tape: self.clone(),
            id,
        }
    }

    pub(crate) fn value_of(&self, id: usize) -> Value<F> {
        self.nodes.borrow()[id].value.clone()
    }

    /// Reverse sweep from `root`, seeding with ones. Returns gradients for
    /// leaf nodes; interior gradients are freed as soon as they have been
    /// consumed.
    pub fn backward(&self, root: &Var<F>) -> Gradients<F> {
        assert!(
            Rc::ptr_eq(&self.nodes, &root.tape.nodes),
            "root belongs to another tape"
        );
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<ArrayD<F>>> = Vec::with_capacity(nodes.len());
        grads.resize_with(nodes.len(), || None);
        grads[root.id] = Some(ArrayD::ones(nodes[root.id].value.raw_dim()));

        for id in (0..=root.id).rev() {
            if grads[id].is_none() {
                continue;
            }
            if let Some(back) = &nodes[id].back {
                let g = grads[id].take().expect("grad present");
                let mut sink = GradSink { grads: &mut grads };
                back(&g, &mut sink);
                // interior gradient dropped here
            }
        }
        Gradients { grads }
    }
}

/// Handle to a tape node. Cloning is cheap and refers to the same node.
pub struct Var<F: Scalar> {
    pub(crate) tape: Tape<F>,
    pub(crate) id: usize,
}

impl<F: Scalar> Clone for Var<F> {
    fn clone(&self) -> Self {
        Var {
            tape: self.tape.clone(),
            id: self.id,
        }
    }
}

impl<F: Scalar> Var<F> {
    pub fn tape(&self) -> &Tape<F> {
        &self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    /// Shared handle to the node's value.
    pub fn value(&self) -> Value<F> {
        self.tape.value_of(self.id)
    }

    /// Owned copy of the node's value.
    pub fn to_array(&self) -> ArrayD<F> {
        self.value().to_owned()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.value().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Value of a single-element node.
    pub fn scalar(&self) -> F {
        let v = self.value();
        assert_eq!(v.len(), 1, "scalar() on node with {} elements", v.len());
        *v.iter().next().unwrap()
    }
}

impl<F: Scalar> fmt::Debug for Var<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var(id={}, shape={:?})", self.id, self.shape())
    }
}

/// Gradient table produced by [`Tape::backward`].
pub struct Gradients<F: Scalar> {
    grads: Vec<Option<ArrayD<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, v: &Var<F>) -> Option<&ArrayD<F>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: &Var<F>) -> Option<ArrayD<F>> {
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }
}
