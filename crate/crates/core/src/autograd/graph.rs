use std::collections::{BTreeMap, HashMap};

use super::Tensor;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Vector-Jacobian product of one recorded op.
///
/// Returns one entry per parent, `None` where the parent needs no gradient.
pub type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Tensor>>>;

/// What a [`BackwardFn`] can see while propagating.
pub struct BackwardCtx<'a> {
    nodes: &'a [Node],
    out: usize,
    grad: &'a Tensor,
    needs: Vec<bool>,
}

impl BackwardCtx<'_> {
    /// Gradient flowing into the op's output.
    pub fn grad(&self) -> &Tensor {
        self.grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn output(&self) -> &Tensor {
        &self.nodes[self.out].value
    }

    /// Whether parent `i` (in recording order) needs a gradient.
    pub fn needs(&self, i: usize) -> bool {
        self.needs[i]
    }
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// Tape of recorded operations for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the tape is already a
/// topological order and backward is a single reverse sweep.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    named: HashMap<String, Var>,
    names: BTreeMap<String, Var>,
    buffer_updates: Vec<(String, Tensor)>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A named differentiable leaf; repeated lookups of the same name share one node.
    pub fn named_leaf(&mut self, name: &str, value: &Tensor) -> Var {
        if let Some(&v) = self.named.get(name) {
            return v;
        }
        let v = self.leaf(value.clone());
        self.named.insert(name.to_string(), v);
        self.names.insert(name.to_string(), v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Detached copy of `v`'s value.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    /// Records an op. The backward closure is dropped when no parent needs a gradient.
    pub fn record(&mut self, value: Tensor, parents: Vec<Var>, backward: BackwardFn) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents,
            backward: requires_grad.then_some(backward),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Queues a non-differentiable state update (running statistics) produced by a forward pass.
    pub fn push_buffer_update(&mut self, name: String, value: Tensor) {
        self.buffer_updates.push((name, value));
    }

    pub fn take_buffer_updates(&mut self) -> Vec<(String, Tensor)> {
        std::mem::take(&mut self.buffer_updates)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(
            self.value(loss).len(),
            1,
            "backward needs a scalar loss, got shape {:?}",
            self.shape(loss)
        );
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[i].take() else {
                continue;
            };
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|p| self.nodes[p.0].requires_grad)
                .collect();
            let ctx = BackwardCtx {
                nodes: &self.nodes,
                out: i,
                grad: &grad,
                needs,
            };
            let parent_grads = backward(&ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (p, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[p.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.shape(), self.nodes[p.0].value.shape());
                match &mut grads[p.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }

        // only leaves keep their gradient
        for (i, node) in self.nodes.iter().enumerate() {
            if node.backward.is_some() {
                grads[i] = None;
            }
        }
        Gradients {
            grads,
            names: self.names.clone(),
        }
    }
}

/// Leaf gradients from one backward sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    names: BTreeMap<String, Var>,
}

impl Gradients {
    /// Gradient of a leaf; zeros-equivalent leaves that the loss never reached return `None`.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every named leaf the loss reached, keyed by name.
    pub fn into_named(mut self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, v) in &self.names {
            if let Some(g) = self.grads[v.0].take() {
                out.insert(name.clone(), g);
            }
        }
        out
    }
}
