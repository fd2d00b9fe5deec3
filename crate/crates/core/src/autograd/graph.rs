use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of a recorded operation. The op struct itself is the saved
/// context; `inputs` are its parent nodes.
pub(crate) trait Backward {
    fn name(&self) -> &'static str;

    fn inputs(&self) -> Vec<Var>;

    /// Returns the gradient contribution for each input that needs one.
    fn backward(&self, ctx: &BackwardCtx<'_>, grad: &[f64]) -> Vec<(Var, Vec<f64>)>;
}

pub(crate) struct BackwardCtx<'a> {
    graph: &'a Graph,
    output: Var,
}

impl BackwardCtx<'_> {
    pub fn value(&self, v: Var) -> &Tensor {
        &self.graph.nodes[v.0].value
    }

    pub fn output(&self) -> &Tensor {
        self.value(self.output)
    }

    pub fn needs(&self, v: Var) -> bool {
        self.graph.nodes[v.0].requires_grad
    }
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Option<Box<dyn Backward>>,
}

/// A per-forward-pass recording of tensor operations.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and [`Graph::backward`] walks it in reverse exactly once.
/// A graph is owned by a single thread; independent graphs share nothing.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph")
            .field("nodes", &self.nodes.len())
            .finish()
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Operation tag of a node, `None` for leaves.
    pub fn op_name(&self, v: Var) -> Option<&'static str> {
        self.nodes[v.0].op.as_ref().map(|op| op.name())
    }

    pub(crate) fn push(&mut self, value: Tensor, op: impl Backward + 'static) -> Var {
        // Non-finite values are only a bug when the inputs were finite.
        if cfg!(debug_assertions) && op.inputs().iter().all(|v| self.nodes[v.0].value.all_finite()) {
            value.debug_assert_finite(op.name());
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        let op: Option<Box<dyn Backward>> = if requires_grad {
            Some(Box::new(op))
        } else {
            None
        };
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a user-defined operation. `rule` receives the input values,
    /// the output value and the output gradient, and returns one gradient per
    /// input (same shapes as the inputs).
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, rule: CustomBackward) -> Var {
        self.push(
            value,
            CustomOp {
                inputs: inputs.to_vec(),
                rule,
            },
        )
    }

    /// Reverse-mode sweep from a scalar root. Every leaf that requires a
    /// gradient gets one (zeros when it does not influence the root);
    /// contributions from fan-out are summed.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = self.value(root);
        if !root_value.is_scalar() {
            return Err(Error::shape(
                "backward",
                format!("root must be a scalar, got dims {:?}", root_value.dims()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(vec![1.0]);
        }
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            let Some(op) = node.op.as_ref() else { continue };
            let Some(grad) = grads[i].take() else { continue };
            let ctx = BackwardCtx {
                graph: self,
                output: Var(i),
            };
            for (input, delta) in op.backward(&ctx, &grad) {
                debug_assert!(input.0 < i, "graph edge must point backwards");
                debug_assert_eq!(delta.len(), self.nodes[input.0].value.numel());
                accumulate(&mut grads[input.0], delta);
            }
        }
        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| {
                if node.op.is_some() || !node.requires_grad {
                    return None;
                }
                let data = g.unwrap_or_else(|| vec![0.0; node.value.numel()]);
                Some(Tensor::from_parts(node.value.dims().to_vec(), data))
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(delta).for_each(|(a, d)| *a += d),
        None => *slot = Some(delta),
    }
}

/// Leaf gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

pub type CustomBackward = Box<dyn Fn(&[&Tensor], &Tensor, &Tensor) -> Vec<Tensor>>;

struct CustomOp {
    inputs: Vec<Var>,
    rule: CustomBackward,
}

impl Backward for CustomOp {
    fn name(&self) -> &'static str {
        "custom"
    }

    fn inputs(&self) -> Vec<Var> {
        self.inputs.clone()
    }

    fn backward(&self, ctx: &BackwardCtx<'_>, grad: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let values: Vec<&Tensor> = self.inputs.iter().map(|&v| ctx.value(v)).collect();
        let out = ctx.output();
        let grad = Tensor::from_parts(out.dims().to_vec(), grad.to_vec());
        let result = (self.rule)(&values, out, &grad);
        assert_eq!(result.len(), self.inputs.len(), "custom op arity");
        self.inputs
            .iter()
            .zip(result)
            .filter(|(v, _)| ctx.needs(**v))
            .map(|(&v, g)| (v, g.into_data()))
            .collect()
    }
}
