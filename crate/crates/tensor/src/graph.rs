use std::cell::RefCell;
use std::collections::HashMap;

use crate::error::{fmt_shape, Result, TensorError};
use crate::param::Parameter;
use crate::tensor::Tensor;

pub(crate) type NodeId = usize;

/// Value flowing through operators. Carries the forward tensor and, when the
/// computation is recorded, the id of its tape node.
#[derive(Clone, Debug)]
pub struct Var {
    pub(crate) id: Option<NodeId>,
    value: Tensor,
}

impl Var {
    pub(crate) fn new(id: Option<NodeId>, value: Tensor) -> Self {
        Var { id, value }
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn is_traced(&self) -> bool {
        self.id.is_some()
    }

    /// Drops the tape association, keeping only the forward value. Useful for
    /// caching results (for example a template embedding) as constants.
    pub fn detach(&self) -> Var {
        Var {
            id: None,
            value: self.value.clone(),
        }
    }
}

/// Gradient contributions for the parents of one node, aligned with the
/// parent list. `None` marks a parent that receives no gradient from this op.
pub(crate) type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    parents: Vec<Option<NodeId>>,
    backward: Option<BackwardFn>,
}

/// Reverse-mode tape. Operators executed under a tracing [`Ctx`] append
/// nodes; [`GradGraph::backward`] replays them in reverse. Replay does not
/// consume the tape, so it can run repeatedly with identical results.
#[derive(Default)]
pub struct GradGraph {
    inner: RefCell<Inner>,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
    bindings: HashMap<String, NodeId>,
}

impl GradGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn node_count(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    fn push_leaf(&self) -> NodeId {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            parents: Vec::new(),
            backward: None,
        });
        id
    }

    fn push_op(&self, parents: Vec<Option<NodeId>>, backward: BackwardFn) -> NodeId {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            parents,
            backward: Some(backward),
        });
        id
    }

    fn binding(&self, name: &str) -> Option<NodeId> {
        self.inner.borrow().bindings.get(name).copied()
    }

    fn bind_name(&self, name: &str, id: NodeId) {
        self.inner.borrow_mut().bindings.insert(name.to_string(), id);
    }

    /// Accumulates gradients from `loss` back to every leaf. The traversal
    /// visits nodes in strictly decreasing id order, so fan-out sums in a
    /// fixed order and repeated calls produce bit-identical results.
    pub fn backward(&self, loss: &Var) -> Result<GradStore> {
        let loss_id = loss.id.ok_or(TensorError::Untraced)?;
        if loss.value().numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: fmt_shape(loss.shape()),
            });
        }

        let inner = self.inner.borrow();
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(loss_id + 1, || None);
        grads[loss_id] = Some(Tensor::ones(loss.shape()));

        let mut store = GradStore::default();
        for id in (0..=loss_id).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let node = &inner.nodes[id];
            match &node.backward {
                Some(backward) => {
                    let contributions = backward(&grad);
                    debug_assert_eq!(contributions.len(), node.parents.len());
                    for (parent, contribution) in node.parents.iter().zip(contributions) {
                        let (Some(pid), Some(tensor)) = (parent, contribution) else {
                            continue;
                        };
                        debug_assert!(*pid < id, "tape order violated");
                        match &mut grads[*pid] {
                            Some(acc) => accumulate(acc, &tensor),
                            slot => *slot = Some(tensor),
                        }
                    }
                }
                None => {
                    store.grads.insert(id, grad);
                }
            }
        }
        Ok(store)
    }
}

fn accumulate(acc: &mut Tensor, contribution: &Tensor) {
    debug_assert_eq!(acc.shape(), contribution.shape());
    let dst = acc.make_mut();
    for (d, s) in dst.iter_mut().zip(contribution.as_slice()) {
        *d += s;
    }
}

/// Gradients for the leaves reached by one backward pass, keyed by node id.
#[derive(Default)]
pub struct GradStore {
    grads: HashMap<NodeId, Tensor>,
}

impl GradStore {
    /// Gradient of the loss with respect to a leaf `Var` (created via
    /// `Ctx::input` or `Ctx::bind`). `None` when the leaf is not on any path
    /// to the loss.
    pub fn grad_of(&self, var: &Var) -> Option<&Tensor> {
        self.grads.get(&var.id?)
    }

    pub fn grad_of_param<'a>(&'a self, graph: &GradGraph, param: &Parameter) -> Option<&'a Tensor> {
        let id = graph.binding(param.name())?;
        self.grads.get(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Convenience wrapper: one backward pass, then gradients per parameter in
/// input order. Parameters without a path to the loss get zero tensors.
pub fn value_and_grad(
    graph: &GradGraph,
    loss: &Var,
    params: &[&Parameter],
) -> Result<(f32, Vec<Tensor>)> {
    let store = graph.backward(loss)?;
    let value = loss.value().scalar_value().expect("scalar checked above");
    let grads = params
        .iter()
        .map(|p| {
            store
                .grad_of_param(graph, p)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.value().shape()))
        })
        .collect();
    Ok((value, grads))
}

/// Execution context for operators: where to record (if anywhere) and whether
/// normalization layers should use batch statistics.
///
/// `training` selects batch-statistics mode in layers that distinguish the
/// two; running-average buffers are only updated on traced training passes,
/// so repeated untraced evaluations (finite differences, tracking) are free
/// of side effects that could alter later outputs.
#[derive(Clone, Copy)]
pub struct Ctx<'g> {
    graph: Option<&'g GradGraph>,
    training: bool,
}

impl Ctx<'static> {
    pub fn inference() -> Self {
        Ctx {
            graph: None,
            training: false,
        }
    }
}

impl<'g> Ctx<'g> {
    pub fn traced(graph: &'g GradGraph) -> Self {
        Ctx {
            graph: Some(graph),
            training: false,
        }
    }

    pub fn train(graph: &'g GradGraph) -> Self {
        Ctx {
            graph: Some(graph),
            training: true,
        }
    }

    pub fn with_training(mut self, training: bool) -> Self {
        self.training = training;
        self
    }

    pub fn is_traced(&self) -> bool {
        self.graph.is_some()
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    /// A differentiable leaf. Under a tracing context its gradient is
    /// retrievable from the store after backward.
    pub fn input(&self, value: Tensor) -> Var {
        match self.graph {
            Some(g) => Var::new(Some(g.push_leaf()), value),
            None => Var::new(None, value),
        }
    }

    /// Leaf for a named parameter. Binding the same name twice on one graph
    /// returns the node recorded first, so every use of a parameter within a
    /// forward pass shares one gradient slot.
    pub fn bind(&self, param: &Parameter) -> Var {
        match self.graph {
            Some(g) => {
                if let Some(id) = g.binding(param.name()) {
                    return Var::new(Some(id), param.value().clone());
                }
                let id = g.push_leaf();
                g.bind_name(param.name(), id);
                Var::new(Some(id), param.value().clone())
            }
            None => Var::new(None, param.value().clone()),
        }
    }

    /// Records an op node when tracing is active and at least one parent is
    /// traced; otherwise the result is a plain value.
    pub(crate) fn register(
        &self,
        value: Tensor,
        parents: &[&Var],
        backward: BackwardFn,
    ) -> Var {
        let Some(graph) = self.graph else {
            return Var::new(None, value);
        };
        let ids: Vec<Option<NodeId>> = parents.iter().map(|p| p.id).collect();
        if ids.iter().all(Option::is_none) {
            return Var::new(None, value);
        }
        let id = graph.push_op(ids, backward);
        Var::new(Some(id), value)
    }
}
