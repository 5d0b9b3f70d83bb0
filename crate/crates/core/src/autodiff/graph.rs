use std::sync::Arc;

use super::linalg::ConvGeom;
use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Saved state a primitive needs to run its backward rule.
#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeom,
        cols: Vec<f32>,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Relu(Var),
    Abs(Var),
    Log(Var),
    Exp(Var),
    Sigmoid(Var),
    Softplus(Var),
    Sum(Var),
    Mean(Var),
    SumPerSample(Var),
    ScaleAdd {
        a: Var,
        b: Var,
        c: f32,
    },
    Affine {
        x: Var,
        mul: f32,
    },
    Mul(Var, Var),
    Clamp {
        x: Var,
        lo: f32,
        hi: f32,
    },
    /// Forward value differs from the input but the gradient passes
    /// through unchanged (additive noise, straight-through rounding).
    PassThrough(Var),
    Reshape(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f32>,
    },
    GlobalAvgPool(Var),
    UpsampleNearest {
        x: Var,
        factor: usize,
    },
    Narrow {
        x: Var,
        start: usize,
        len: usize,
    },
    LogisticBin {
        z: Var,
        loc: Var,
        scale: Var,
        dp_dz: Vec<f32>,
        dp_ds: Vec<f32>,
    },
    GaussianBin {
        residual: Var,
        scale: Var,
        dp_dr: Vec<f32>,
        dp_ds: Vec<f32>,
    },
}

#[derive(Debug)]
pub(crate) struct Node {
    pub shape: Vec<usize>,
    pub value: Arc<[f32]>,
    /// Unrounded result of reductions that accumulate in `f64`.
    pub exact: Option<f64>,
    pub op: Op,
    pub requires_grad: bool,
}

/// Tape of executed primitives in topological order.
///
/// A node's parents always have smaller indices, so the backward pass is a
/// single reverse sweep. A graph is meant to live for one forward/backward
/// pass; build a new one per step.
#[derive(Debug, Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
    backpropagated: bool,
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

    /// Records a leaf. It takes part in differentiation iff the tensor's
    /// `requires_grad` flag is set.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let requires_grad = t.requires_grad();
        self.push_node(t.shape().to_vec(), t.shared_data(), Op::Leaf, requires_grad)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push_node(t.shape().to_vec(), t.shared_data(), Op::Leaf, false)
    }

    /// Records a leaf that always receives a gradient.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push_node(t.shape().to_vec(), t.shared_data(), Op::Leaf, true)
    }

    /// Copies `v` into a fresh constant leaf, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let node = &self.nodes[v.0];
        let (shape, value) = (node.shape.clone(), Arc::clone(&node.value));
        self.push_node(shape, value, Op::Leaf, false)
    }

    pub(crate) fn push(&mut self, shape: Vec<usize>, value: Vec<f32>, op: Op, parents: &[Var]) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        // Saved activations are only needed when something upstream trains.
        let op = if requires_grad { op } else { Op::Leaf };
        self.push_node(shape, value.into(), op, requires_grad)
    }

    fn push_node(&mut self, shape: Vec<usize>, value: Arc<[f32]>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { shape, value, exact: None, op, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push_scalar(&mut self, exact: f64, op: Op, parents: &[Var]) -> Var {
        let v = self.push(Vec::new(), vec![exact as f32], op, parents);
        self.nodes[v.0].exact = Some(exact);
        v
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> Result<f32> {
        match *self.nodes[v.0].value {
            [x] => Ok(x),
            _ => Err(Error::NonScalarLoss(self.nodes[v.0].shape.clone())),
        }
    }

    /// Scalar value in `f64`; reductions keep their unrounded accumulator.
    pub fn item_f64(&self, v: Var) -> Result<f64> {
        match self.nodes[v.0].exact {
            Some(x) => Ok(x),
            None => self.item(v).map(f64::from),
        }
    }

    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads[v.0].as_deref()
    }

    /// Snapshot of a node as a standalone tensor, gradient included.
    pub fn tensor(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        let mut t = Tensor::from_shared(node.shape.clone(), Arc::clone(&node.value))
            .with_requires_grad(node.requires_grad);
        if let Some(g) = &self.grads[v.0] {
            t.set_grad(g.clone()).expect("gradient length tracks node length");
        }
        t
    }

    pub fn reset_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.backpropagated = false;
    }

    /// Reverse-mode sweep from a scalar `loss`. Gradients accumulate over
    /// shared subexpressions. A second call without [`Graph::reset_grads`]
    /// is an error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let node = &self.nodes[loss.0];
        if numel(&node.shape) != 1 {
            return Err(Error::NonScalarLoss(node.shape.clone()));
        }
        if !node.requires_grad {
            return Err(Error::Detached);
        }
        if self.backpropagated {
            return Err(Error::AlreadyBackpropagated);
        }
        self.backpropagated = true;
        let mut grads = std::mem::take(&mut self.grads);
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            self.backprop_node(i, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        // Only leaves keep their gradients.
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !matches!(node.op, Op::Leaf) {
                *g = None;
            }
        }
        self.grads = grads;
        Ok(())
    }
}

/// Gradient buffer of `v`, allocated on first use; `None` for nodes that do
/// not require grad.
pub(crate) fn grad_slot<'a>(
    nodes: &[Node],
    grads: &'a mut [Option<Vec<f32>>],
    v: Var,
) -> Option<&'a mut [f32]> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
}
