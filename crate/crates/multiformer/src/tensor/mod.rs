//! A small reverse-mode automatic differentiation engine over `ndarray`.
//!
//! The engine records a tape of operations per forward pass. Each sample gets
//! its own [`Graph`]; parameters live outside the graph in a [`Params`] store
//! and are pulled in as leaf nodes on first use. Everything is generic over
//! [`Scalar`] so the same model code runs in `f32` for training and in `f64`
//! for finite-difference gradient verification.

mod ops;

pub use ops::upsample2_bilinear_array;

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt::{Debug, Display};
use std::rc::Rc;

use ndarray::{ArrayD, IxDyn, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Element type for all tensors: `f32` or `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + LinalgScalar
    + ScalarOperand
    + Debug
    + Display
    + Send
    + Sync
    + std::iter::Sum
    + std::ops::AddAssign
    + 'static
{
    fn f(x: f64) -> Self {
        Self::from_f64(x).expect("f64 conversion")
    }

    fn d(self) -> f64 {
        self.to_f64().expect("f64 conversion")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Identifier of a tensor in a [`Params`] store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named parameter tensors shared by all forward passes of a model.
#[derive(Debug, Clone)]
pub struct Params<T: Scalar> {
    data: Vec<ArrayD<T>>,
    names: Vec<String>,
}

impl<T: Scalar> Params<T> {
    pub fn new() -> Self {
        Params {
            data: Vec::new(),
            names: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<T>) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.data.push(value);
        self.names.push(name);
        ParamId(self.data.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<T> {
        &self.data[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<T> {
        &mut self.data[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &ArrayD<T>)> {
        self.data
            .iter()
            .zip(self.names.iter())
            .enumerate()
            .map(|(i, (v, n))| (ParamId(i), n.as_str(), v))
    }

    /// Total number of scalar elements across all parameter tensors.
    pub fn num_elements(&self) -> usize {
        self.data.iter().map(|a| a.len()).sum()
    }

    /// Convert the store to a different scalar type (used by checkpoints).
    pub fn cast<U: Scalar>(&self) -> Params<U> {
        Params {
            data: self
                .data
                .iter()
                .map(|a| a.mapv(|x| U::f(x.d())))
                .collect(),
            names: self.names.clone(),
        }
    }
}

impl<T: Scalar> Default for Params<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-parameter gradients produced by [`Graph::backward`].
pub struct Grads<T: Scalar> {
    by_param: Vec<Option<ArrayD<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, id: ParamId) -> Option<&ArrayD<T>> {
        self.by_param.get(id.0).and_then(|g| g.as_ref())
    }

    /// Sum another gradient set into this one (fixed order, deterministic).
    pub fn accumulate(&mut self, other: &Grads<T>) {
        if self.by_param.len() < other.by_param.len() {
            self.by_param.resize(other.by_param.len(), None);
        }
        for (i, g) in other.by_param.iter().enumerate() {
            if let Some(g) = g {
                match &mut self.by_param[i] {
                    Some(acc) => *acc += g,
                    slot @ None => *slot = Some(g.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for g in self.by_param.iter_mut().flatten() {
            g.mapv_inplace(|x| x * factor);
        }
    }

    pub fn empty(n_params: usize) -> Self {
        Grads {
            by_param: vec![None; n_params],
        }
    }

    /// Global L2 norm over all stored gradients.
    pub fn global_norm(&self) -> f64 {
        let mut acc = 0.0;
        for g in self.by_param.iter().flatten() {
            for v in g.iter() {
                let x = v.d();
                acc += x * x;
            }
        }
        acc.sqrt()
    }
}

type BackwardFn<T> = Box<dyn Fn(&ArrayD<T>, &mut Vec<Option<ArrayD<T>>>)>;

struct Node<T: Scalar> {
    value: Rc<ArrayD<T>>,
    param: Option<ParamId>,
    backward: Option<BackwardFn<T>>,
}

struct GraphInner<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    param_nodes: RefCell<HashMap<usize, usize>>,
    grad_enabled: bool,
}

/// Tape of one forward pass. Cheap to clone (shared handle).
pub struct Graph<T: Scalar> {
    inner: Rc<GraphInner<T>>,
}

impl<T: Scalar> Clone for Graph<T> {
    fn clone(&self) -> Self {
        Graph {
            inner: Rc::clone(&self.inner),
        }
    }
}

/// A value on the tape. Clones share the underlying buffer.
pub struct Tensor<T: Scalar> {
    graph: Graph<T>,
    id: usize,
    value: Rc<ArrayD<T>>,
    requires_grad: bool,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            graph: self.graph.clone(),
            id: self.id,
            value: Rc::clone(&self.value),
            requires_grad: self.requires_grad,
        }
    }
}

impl<T: Scalar> Graph<T> {
    /// A graph that records backward closures.
    pub fn new() -> Self {
        Self::with_grad(true)
    }

    /// A forward-only graph: no backward closures are stored.
    pub fn inference() -> Self {
        Self::with_grad(false)
    }

    fn with_grad(grad_enabled: bool) -> Self {
        Graph {
            inner: Rc::new(GraphInner {
                nodes: RefCell::new(Vec::new()),
                param_nodes: RefCell::new(HashMap::new()),
                grad_enabled,
            }),
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.inner.grad_enabled
    }

    fn push(
        &self,
        value: ArrayD<T>,
        requires_grad: bool,
        param: Option<ParamId>,
        backward: Option<BackwardFn<T>>,
    ) -> Tensor<T> {
        let requires_grad = requires_grad && self.inner.grad_enabled;
        let value = Rc::new(value);
        let mut nodes = self.inner.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value: Rc::clone(&value),
            param,
            backward: if requires_grad { backward } else { None },
        });
        Tensor {
            graph: self.clone(),
            id,
            value,
            requires_grad,
        }
    }

    pub(crate) fn op(
        &self,
        value: ArrayD<T>,
        requires_grad: bool,
        backward: impl FnOnce() -> BackwardFn<T>,
    ) -> Tensor<T> {
        let store = requires_grad && self.inner.grad_enabled;
        self.push(value, store, None, if store { Some(backward()) } else { None })
    }

    /// Constant leaf (no gradient).
    pub fn constant(&self, value: ArrayD<T>) -> Tensor<T> {
        self.push(value, false, None, None)
    }

    pub fn scalar(&self, value: T) -> Tensor<T> {
        self.constant(ArrayD::from_elem(IxDyn(&[]), value))
    }

    /// Parameter leaf. Repeated requests for the same parameter share a node.
    pub fn param(&self, params: &Params<T>, id: ParamId) -> Tensor<T> {
        if let Some(&node_id) = self.inner.param_nodes.borrow().get(&id.0) {
            let nodes = self.inner.nodes.borrow();
            return Tensor {
                graph: self.clone(),
                id: node_id,
                value: Rc::clone(&nodes[node_id].value),
                requires_grad: self.inner.grad_enabled,
            };
        }
        let t = self.push(params.value(id).clone(), true, Some(id), None);
        self.inner.param_nodes.borrow_mut().insert(id.0, t.id);
        // Leaves require grad even without a backward closure.
        Tensor {
            requires_grad: self.inner.grad_enabled,
            ..t
        }
    }

    /// Reverse pass from a scalar root. Returns per-parameter gradients.
    pub fn backward(&self, root: &Tensor<T>, n_params: usize) -> Grads<T> {
        assert!(
            root.value.ndim() == 0,
            "backward root must be a scalar, got shape {:?}",
            root.shape()
        );
        let nodes = self.inner.nodes.borrow();
        let mut grads: Vec<Option<ArrayD<T>>> = Vec::new();
        grads.resize_with(nodes.len(), || None);
        grads[root.id] = Some(ArrayD::from_elem(IxDyn(&[]), T::one()));

        let mut by_param: Vec<Option<ArrayD<T>>> = vec![None; n_params];
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Some(pid) = node.param {
                match &mut by_param[pid.0] {
                    Some(acc) => *acc += &g,
                    slot @ None => *slot = Some(g.clone()),
                }
            }
            if let Some(bw) = &node.backward {
                bw(&g, &mut grads);
            }
        }
        Grads { by_param }
    }

    pub fn num_nodes(&self) -> usize {
        self.inner.nodes.borrow().len()
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn value(&self) -> &ArrayD<T> {
        &self.value
    }

    pub fn graph(&self) -> &Graph<T> {
        &self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    /// Value of a 0-d tensor.
    pub fn item(&self) -> T {
        assert!(self.value.ndim() == 0, "item() on non-scalar tensor");
        *self.value.first().expect("scalar tensor")
    }
}

pub(crate) fn accum<T: Scalar>(
    grads: &mut Vec<Option<ArrayD<T>>>,
    id: usize,
    g: ArrayD<T>,
) {
    match &mut grads[id] {
        Some(acc) => *acc += &g,
        slot @ None => *slot = Some(g),
    }
}
