//! Tape-based reverse-mode automatic differentiation over [`NdArray`].
//!
//! A [`Graph`] records one node per differentiable operation. Each node
//! stores a backward closure that receives the gradient of the loss with
//! respect to the node's output and scatters contributions into the
//! gradients of the node's parents. Calling [`Graph::backward`] replays the
//! tape in reverse topological order (which is simply reverse insertion
//! order) and returns a [`Gradients`] table addressed by [`Var`].
//!
//! Graphs built with [`Graph::inference`] skip all recording: operations
//! compute values only, which keeps evaluation and benchmarking free of
//! tape overhead.
//!
//! Trainable parameters live in a [`ParamStore`] outside any graph; a
//! forward pass mounts them with [`Graph::param`], and after `backward` the
//! accumulated leaf gradients flow back into the store through
//! [`Graph::accumulate_param_grads`].

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::NdArray;

/// Gradient table indexed by node id, with in-place accumulation.
pub struct GradStore {
    grads: Vec<Option<NdArray>>,
}

impl GradStore {
    fn new(len: usize) -> Self {
        GradStore { grads: (0..len).map(|_| None).collect() }
    }

    /// Add `g` into the gradient slot for node `id`.
    pub fn accumulate(&mut self, id: usize, g: NdArray) {
        match &mut self.grads[id] {
            Some(acc) => {
                debug_assert_eq!(acc.shape(), g.shape(), "gradient shape drifted");
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }
}

enum NodeKind {
    /// Input node: gradients stop here and stay readable afterwards.
    Leaf,
    /// Interior op: the closure routes the output gradient to the parents.
    Op(Box<dyn Fn(&NdArray, &mut GradStore)>),
}

struct Node {
    kind: NodeKind,
}

/// A value tracked by (or detached from) a graph.
///
/// `id` is `None` for constants and for anything produced under an
/// inference graph; such values never receive gradients.
#[derive(Clone, Debug)]
pub struct Var {
    id: Option<usize>,
    value: Rc<NdArray>,
}

impl Var {
    /// The tensor held by this variable.
    pub fn value(&self) -> &NdArray {
        &self.value
    }

    /// Shared handle to the tensor (cheap to clone into closures).
    pub fn value_rc(&self) -> Rc<NdArray> {
        Rc::clone(&self.value)
    }

    /// Shape of the held tensor.
    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    /// Tape id, if this variable participates in gradient tracking.
    pub fn id(&self) -> Option<usize> {
        self.id
    }
}

/// Recorded tape of operations.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    recording: bool,
    /// `(node id, param index)` pairs mounted via [`Graph::param`].
    mounted: RefCell<Vec<(usize, usize)>>,
}

impl Graph {
    /// A graph that records every operation for backpropagation.
    pub fn new() -> Self {
        Graph { nodes: RefCell::new(Vec::new()), recording: true, mounted: RefCell::new(Vec::new()) }
    }

    /// A graph that only computes values (no tape, no gradients).
    pub fn inference() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            recording: false,
            mounted: RefCell::new(Vec::new()),
        }
    }

    /// Whether operations on this graph are recorded.
    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Number of recorded nodes (diagnostics and tests).
    pub fn node_count(&self) -> usize {
        self.nodes.borrow().len()
    }

    /// Introduce a differentiable input.
    pub fn leaf(&self, value: NdArray) -> Var {
        if !self.recording {
            return Var { id: None, value: Rc::new(value) };
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { kind: NodeKind::Leaf });
        Var { id: Some(nodes.len() - 1), value: Rc::new(value) }
    }

    /// Introduce a value that never needs a gradient.
    pub fn constant(&self, value: NdArray) -> Var {
        Var { id: None, value: Rc::new(value) }
    }

    /// Mount a stored parameter as a differentiable leaf; its gradient can
    /// later be pushed back with [`Graph::accumulate_param_grads`].
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var {
        let var = self.leaf(store.value(id).clone());
        if let Some(node_id) = var.id {
            self.mounted.borrow_mut().push((node_id, id.0));
        }
        var
    }

    /// Record an op node. `backward` receives the output gradient and must
    /// accumulate into the parents it captured. Returns the tracked output.
    pub(crate) fn push_op(
        &self,
        backward: impl Fn(&NdArray, &mut GradStore) + 'static,
        value: NdArray,
    ) -> Var {
        debug_assert!(self.recording, "push_op on an inference graph");
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { kind: NodeKind::Op(Box::new(backward)) });
        Var { id: Some(nodes.len() - 1), value: Rc::new(value) }
    }

    /// True when an op over these inputs must be recorded.
    pub(crate) fn tracks(&self, inputs: &[&Var]) -> bool {
        self.recording && inputs.iter().any(|v| v.id.is_some())
    }

    /// Backpropagate from a scalar root with seed gradient 1.
    pub fn backward(&self, root: &Var) -> Result<Gradients> {
        if root.value.len() != 1 {
            return Err(Error::Shape(format!(
                "backward without an explicit seed needs a scalar root, found shape {:?}",
                root.shape()
            )));
        }
        self.backward_seeded(root, NdArray::full(root.shape(), 1.0))
    }

    /// Backpropagate from `root` with an explicit seed gradient dL/d(root).
    pub fn backward_seeded(&self, root: &Var, seed: NdArray) -> Result<Gradients> {
        let root_id = root.id.ok_or_else(|| {
            Error::Shape("cannot backpropagate through an untracked value".into())
        })?;
        if seed.shape() != root.shape() {
            return Err(Error::Shape(format!(
                "seed shape {:?} does not match root shape {:?}",
                seed.shape(),
                root.shape()
            )));
        }
        let nodes = self.nodes.borrow();
        let mut store = GradStore::new(nodes.len());
        store.accumulate(root_id, seed);
        for id in (0..=root_id).rev() {
            let Some(g) = store.grads[id].take() else { continue };
            if let NodeKind::Op(f) = &nodes[id].kind {
                f(&g, &mut store);
            }
            store.grads[id] = Some(g);
        }
        Ok(Gradients { grads: store.grads })
    }

    /// Copy the gradients of every mounted parameter into the store
    /// (accumulating, so repeated calls across micro-batches add up).
    pub fn accumulate_param_grads(&self, grads: &Gradients, store: &mut ParamStore) {
        for &(node_id, param_idx) in self.mounted.borrow().iter() {
            if let Some(g) = grads.grads.get(node_id).and_then(|g| g.as_ref()) {
                let acc = &mut store.items[param_idx].grad;
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
        }
    }
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

/// Result of a backward pass.
pub struct Gradients {
    grads: Vec<Option<NdArray>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, if one flowed there.
    pub fn wrt(&self, var: &Var) -> Option<&NdArray> {
        var.id.and_then(|id| self.grads.get(id)).and_then(|g| g.as_ref())
    }
}

/// Handle to one tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// A named trainable tensor with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct ParamTensor {
    pub name: String,
    pub value: NdArray,
    pub grad: NdArray,
}

/// Flat registry of every trainable tensor in a model.
///
/// Cloning the store snapshots all parameter values (used for best-model
/// checkpoints during training).
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    items: Vec<ParamTensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { items: Vec::new() }
    }

    /// Register a tensor under a unique diagnostic name.
    pub fn add(&mut self, name: impl Into<String>, value: NdArray) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.items.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        let grad = NdArray::zeros(value.shape());
        self.items.push(ParamTensor { name, value, grad });
        ParamId(self.items.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &NdArray {
        &self.items[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut NdArray {
        &mut self.items[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &NdArray {
        &self.items[id.0].grad
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.items[id.0].name
    }

    /// Reset every accumulated gradient to zero.
    pub fn zero_grads(&mut self) {
        for p in &mut self.items {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// All parameters in registration order.
    pub fn iter(&self) -> impl Iterator<Item = &ParamTensor> {
        self.items.iter()
    }

    /// Mutable access in registration order (optimizer updates).
    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamTensor> {
        self.items.iter_mut()
    }

    /// Handles for every parameter, in registration order.
    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.items.len()).map(ParamId)
    }

    /// Look up a parameter id by its registered name.
    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.items.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total number of scalar weights.
    pub fn scalar_count(&self) -> usize {
        self.items.iter().map(|p| p.value.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// y = a * b recorded by hand through the raw tape API.
    fn raw_mul(g: &Graph, a: &Var, b: &Var) -> Var {
        let value = a.value().zip(b.value(), |x, y| x * y).unwrap();
        if !g.tracks(&[a, b]) {
            return g.constant(value);
        }
        let (aid, bid) = (a.id(), b.id());
        let (av, bv) = (a.value_rc(), b.value_rc());
        g.push_op(
            move |grad, store| {
                if let Some(id) = aid {
                    store.accumulate(id, grad.zip(&bv, |g, y| g * y).unwrap());
                }
                if let Some(id) = bid {
                    store.accumulate(id, grad.zip(&av, |g, x| g * x).unwrap());
                }
            },
            value,
        )
    }

    #[test]
    fn product_rule_with_shared_input() {
        // y = x * x => dy/dx = 2x, accumulation across the two parent slots.
        let g = Graph::new();
        let x = g.leaf(NdArray::scalar(3.0));
        let y = raw_mul(&g, &x, &x);
        assert_eq!(y.value().scalar_value().unwrap(), 9.0);
        let grads = g.backward(&y).unwrap();
        assert_eq!(grads.wrt(&x).unwrap().scalar_value().unwrap(), 6.0);
    }

    #[test]
    fn constants_do_not_receive_gradients() {
        let g = Graph::new();
        let x = g.leaf(NdArray::scalar(2.0));
        let c = g.constant(NdArray::scalar(5.0));
        let y = raw_mul(&g, &x, &c);
        let grads = g.backward(&y).unwrap();
        assert_eq!(grads.wrt(&x).unwrap().scalar_value().unwrap(), 5.0);
        assert!(grads.wrt(&c).is_none());
    }

    #[test]
    fn inference_graph_records_nothing() {
        let g = Graph::inference();
        let x = g.leaf(NdArray::scalar(2.0));
        let y = raw_mul(&g, &x, &x);
        assert_eq!(y.value().scalar_value().unwrap(), 4.0);
        assert_eq!(g.node_count(), 0);
        assert!(g.backward(&y).is_err());
    }

    #[test]
    fn param_gradients_flow_back_into_the_store() {
        let mut store = ParamStore::new();
        let w = store.add("w", NdArray::scalar(4.0));
        let g = Graph::new();
        let wv = g.param(&store, w);
        let y = raw_mul(&g, &wv, &wv);
        let grads = g.backward(&y).unwrap();
        g.accumulate_param_grads(&grads, &mut store);
        assert_eq!(store.grad(w).scalar_value().unwrap(), 8.0);
        // Accumulation is additive across calls.
        g.accumulate_param_grads(&grads, &mut store);
        assert_eq!(store.grad(w).scalar_value().unwrap(), 16.0);
        store.zero_grads();
        assert_eq!(store.grad(w).scalar_value().unwrap(), 0.0);
    }

    #[test]
    fn backward_needs_scalar_root_or_explicit_seed() {
        let g = Graph::new();
        let x = g.leaf(NdArray::zeros(&[3]));
        assert!(g.backward(&x).is_err());
        let seed = NdArray::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let grads = g.backward_seeded(&x, seed.clone()).unwrap();
        assert_eq!(grads.wrt(&x).unwrap(), &seed);
    }
}
