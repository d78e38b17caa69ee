//! Define-then-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only list of nodes. Leaves carry values; every
//! other node applies an [`Op`] to earlier nodes, so insertion order is a
//! topological order. Shapes are checked when a node is added.
//! [`Graph::forward`] evaluates the ancestors of a root once each and
//! [`Graph::backward`] sweeps them in reverse, summing gradient
//! contributions when a node feeds several consumers.
//!
//! [`Op`] is also the extension point for custom gradients: an op's
//! `backward` is applied verbatim, whatever relation it has to `forward`.
//! The quantizers use this to install straight-through estimators.

pub mod ops;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable primitive.
pub trait Op {
    fn name(&self) -> &'static str;

    /// Validates input shapes and returns the output shape.
    fn output_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>>;

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;

    /// Maps the upstream gradient to one gradient per input.
    fn backward(&self, grad: &Tensor, inputs: &[&Tensor], output: &Tensor) -> Result<Vec<Tensor>>;
}

enum Kind {
    Leaf { trainable: bool },
    Apply { op: Box<dyn Op>, inputs: Vec<NodeId> },
}

struct Node {
    shape: Vec<usize>,
    value: Option<Tensor>,
    kind: Kind,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a root with respect to the trainable leaves.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
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

    fn push_leaf(&mut self, value: Tensor, trainable: bool) -> NodeId {
        self.nodes.push(Node {
            shape: value.shape().to_vec(),
            value: Some(value),
            kind: Kind::Leaf { trainable },
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is reported by [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(value, true)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(value, false)
    }

    pub fn apply(&mut self, op: impl Op + 'static, inputs: &[NodeId]) -> Result<NodeId> {
        for id in inputs {
            if id.0 >= self.nodes.len() {
                return Err(Error::InvalidNode(id.0));
            }
        }
        let shapes: Vec<&[usize]> = inputs.iter().map(|i| self.nodes[i.0].shape.as_slice()).collect();
        let shape = op.output_shape(&shapes)?;
        self.nodes.push(Node {
            shape,
            value: None,
            kind: Kind::Apply {
                op: Box::new(op),
                inputs: inputs.to_vec(),
            },
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes.get(id.0).and_then(|n| n.value.as_ref())
    }

    /// Replaces a leaf value and invalidates every computed op value.
    pub fn set_leaf(&mut self, id: NodeId, value: Tensor) -> Result<()> {
        let node = self.nodes.get_mut(id.0).ok_or(Error::InvalidNode(id.0))?;
        if !matches!(node.kind, Kind::Leaf { .. }) {
            return Err(Error::Invalid(format!("node {} is not a leaf", id.0)));
        }
        if node.shape != value.shape() {
            return Err(Error::shape("set_leaf", &node.shape, value.shape()));
        }
        node.value = Some(value);
        for n in &mut self.nodes {
            if matches!(n.kind, Kind::Apply { .. }) {
                n.value = None;
            }
        }
        Ok(())
    }

    fn ancestors(&self, root: NodeId) -> Vec<bool> {
        let mut needed = vec![false; root.0 + 1];
        needed[root.0] = true;
        for i in (0..=root.0).rev() {
            if !needed[i] {
                continue;
            }
            if let Kind::Apply { inputs, .. } = &self.nodes[i].kind {
                for j in inputs {
                    needed[j.0] = true;
                }
            }
        }
        needed
    }

    pub fn forward(&mut self, root: NodeId) -> Result<&Tensor> {
        if root.0 >= self.nodes.len() {
            return Err(Error::InvalidNode(root.0));
        }
        let needed = self.ancestors(root);
        for (i, &need) in needed.iter().enumerate().take(root.0 + 1) {
            if !need || self.nodes[i].value.is_some() {
                if let (Kind::Leaf { .. }, Some(v)) = (&self.nodes[i].kind, &self.nodes[i].value) {
                    if need && !v.all_finite() {
                        return Err(Error::NonFinite(format!("leaf {i}")));
                    }
                }
                continue;
            }
            let value = {
                let Kind::Apply { op, inputs } = &self.nodes[i].kind else {
                    return Err(Error::NotEvaluated(i));
                };
                let args: Vec<&Tensor> = inputs
                    .iter()
                    .map(|j| self.nodes[j.0].value.as_ref().ok_or(Error::NotEvaluated(j.0)))
                    .collect::<Result<_>>()?;
                let out = op.forward(&args)?;
                if out.shape() != self.nodes[i].shape {
                    return Err(Error::shape(op.name(), out.shape(), &self.nodes[i].shape));
                }
                out
            };
            self.nodes[i].value = Some(value);
        }
        Ok(self.nodes[root.0].value.as_ref().expect("root evaluated"))
    }

    /// d(root)/d(leaf) for every trainable leaf, seeding the root with ones.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        if root.0 >= self.nodes.len() {
            return Err(Error::InvalidNode(root.0));
        }
        let needed = self.ancestors(root);
        for (i, node) in self.nodes[..=root.0].iter().enumerate() {
            if needed[i] && node.value.is_none() {
                return Err(Error::NotEvaluated(i));
            }
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(&self.nodes[root.0].shape, 1.0));
        for i in (0..=root.0).rev() {
            if !needed[i] {
                continue;
            }
            let Kind::Apply { op, inputs } = &self.nodes[i].kind else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let args: Vec<&Tensor> = inputs
                .iter()
                .map(|j| self.nodes[j.0].value.as_ref().expect("checked above"))
                .collect();
            let out = self.nodes[i].value.as_ref().expect("checked above");
            let input_grads = op.backward(&g, &args, out)?;
            if input_grads.len() != inputs.len() {
                return Err(Error::Invalid(format!(
                    "{} returned {} gradients for {} inputs",
                    op.name(),
                    input_grads.len(),
                    inputs.len()
                )));
            }
            for (j, gj) in inputs.iter().zip(input_grads) {
                if gj.shape() != self.nodes[j.0].shape {
                    return Err(Error::shape(op.name(), gj.shape(), &self.nodes[j.0].shape));
                }
                match &mut grads[j.0] {
                    Some(acc) => acc.add_assign(&gj)?,
                    slot @ None => *slot = Some(gj),
                }
            }
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| match n.kind {
                Kind::Leaf { trainable: true } => Some(g.unwrap_or_else(|| Tensor::zeros(&n.shape))),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }
}
