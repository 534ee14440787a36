//! Define-by-run tape for reverse-mode differentiation.
//!
//! Every node value is an `Array2<f64>`; scalars are 1x1, row vectors 1xD,
//! waveforms Nx1. A fresh `Graph` is built per training step and dropped
//! afterwards. Node ids are only valid for the graph that produced them.

use ndarray::Array2;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NodeId(pub(crate) usize);

/// Backward closure: receives all node values, the output gradient, and a
/// sink that accumulates a contribution into a parent node's gradient.
pub(crate) type BackFn =
    Box<dyn Fn(&[Array2<f64>], &Array2<f64>, &mut dyn FnMut(NodeId, Array2<f64>))>;

pub struct Graph {
    pub(crate) vals: Vec<Array2<f64>>,
    pub(crate) backs: Vec<Option<BackFn>>,
    grad_enabled: bool,
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            vals: Vec::new(),
            backs: Vec::new(),
            grad_enabled: true,
        }
    }

    /// Graph that records no backward closures; forward values only.
    pub fn no_grad() -> Self {
        Graph {
            vals: Vec::new(),
            backs: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    /// Insert an input node (parameter copy or constant).
    pub fn leaf(&mut self, v: Array2<f64>) -> NodeId {
        self.push(v, None)
    }

    pub fn val(&self, id: NodeId) -> &Array2<f64> {
        &self.vals[id.0]
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.vals[id.0].dim()
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        let v = &self.vals[id.0];
        assert_eq!(v.dim(), (1, 1), "node is not a scalar");
        v[[0, 0]]
    }

    pub(crate) fn push(&mut self, v: Array2<f64>, back: Option<BackFn>) -> NodeId {
        self.vals.push(v);
        self.backs.push(if self.grad_enabled { back } else { None });
        NodeId(self.vals.len() - 1)
    }

    /// Shorthand used by ops: build the backward closure only when recording.
    pub(crate) fn push_op(
        &mut self,
        v: Array2<f64>,
        back: impl Fn(&[Array2<f64>], &Array2<f64>, &mut dyn FnMut(NodeId, Array2<f64>)) + 'static,
    ) -> NodeId {
        if self.grad_enabled {
            self.push(v, Some(Box::new(back)))
        } else {
            self.push(v, None)
        }
    }

    /// Reverse pass from a scalar root. Keeps gradients for leaf nodes (inputs
    /// and parameters); intermediate gradients are freed as soon as consumed.
    pub fn backward(&self, root: NodeId) -> Gradients {
        assert!(
            self.grad_enabled,
            "backward called on a no-grad graph"
        );
        assert_eq!(
            self.vals[root.0].dim(),
            (1, 1),
            "backward root must be a scalar"
        );
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.vals.len()];
        grads[root.0] = Some(Array2::from_elem((1, 1), 1.0));
        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if let Some(back) = &self.backs[id] {
                back(&self.vals, &g, &mut |pid, contrib| {
                    debug_assert!(pid.0 < id, "backward edge must point to an earlier node");
                    match &mut grads[pid.0] {
                        Some(acc) => *acc += &contrib,
                        slot @ None => *slot = Some(contrib),
                    }
                });
            }
            // Leaf gradients stay available to the caller.
            if self.backs[id].is_none() {
                grads[id] = Some(g);
            }
        }
        Gradients(grads)
    }
}

/// Result of a backward pass, indexed by the node ids of the source graph.
pub struct Gradients(Vec<Option<Array2<f64>>>);

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Array2<f64>> {
        self.0.get(id.0).and_then(|s| s.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Array2<f64>> {
        self.0.get_mut(id.0).and_then(|s| s.take())
    }

    /// Gradient of a node the loss must depend on.
    pub fn expect(&self, id: NodeId, what: &str) -> &Array2<f64> {
        self.get(id)
            .unwrap_or_else(|| panic!("no gradient reached {what}"))
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}
