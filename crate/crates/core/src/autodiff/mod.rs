//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every value produced during a forward pass together with
//! the [`Function`] that produced it. Parents are always recorded before their
//! children, so the tape order is a topological order and [`Tape::backward`]
//! only has to walk it in reverse. A fresh tape is built for every forward pass.

mod conv;
mod gemm;
mod norm;
mod ops;
mod pool;

pub use conv::{conv2d_output_extent, deconv2d_output_extent};
pub use norm::{BatchNormMode, BatchStats, RunningStats, BN_MOMENTUM};
pub use pool::{IndexMap, PoolConfig};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The backward rule of a recorded operation.
///
/// `inputs` are the parent values in recording order and `needs[i]` tells
/// whether parent `i` wants a gradient; entries for parents that don't may be
/// `None`.
pub trait Function: Send + Sync {
    fn name(&self) -> &'static str;

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>>;
}

struct Node {
    value: Tensor,
    parents: Vec<Var>,
    func: Option<Box<dyn Function>>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf whose gradient is collected by [`Tape::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, parents: Vec::new(), func: None, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Name of the operation that produced `var`, or `"leaf"`.
    pub fn op_name(&self, var: Var) -> &'static str {
        self.nodes[var.0].func.as_ref().map_or("leaf", |f| f.name())
    }

    pub fn parents(&self, var: Var) -> &[Var] {
        &self.nodes[var.0].parents
    }

    /// Records `value` as the output of `func` applied to `parents`.
    ///
    /// Fails with [`Error::NonFinite`] if the value contains NaN or infinity.
    pub fn apply(&mut self, func: impl Function + 'static, parents: &[Var], value: Tensor) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: func.name() });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value, parents: parents.to_vec(), func: Some(Box::new(func)), requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Propagates d(root)/d(.) to every leaf that requires a gradient.
    ///
    /// Gradients from multiple uses of a value are summed.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = &self.nodes[root.0].value;
        if root_value.numel() != 1 {
            return Err(Error::shape("backward", "root element count", 1, root_value.numel()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(root_value.shape(), 1.0));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            let Some(func) = node.func.as_ref() else {
                continue;
            };
            if !node.requires_grad {
                continue;
            }
            let Some(grad) = grads[i].take() else {
                continue;
            };
            let inputs: Vec<&Tensor> = node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
            let needs: Vec<bool> = node.parents.iter().map(|p| self.nodes[p.0].requires_grad).collect();
            let parent_grads = func.backward(&inputs, &node.value, &grad, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len(), "{}", func.name());
            for ((parent, pg), need) in node.parents.iter().zip(parent_grads).zip(needs) {
                let Some(pg) = pg else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(pg.shape(), self.nodes[parent.0].value.shape(), "{} gradient shape", func.name());
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }

        // Only leaf gradients are kept; intermediates were consumed above.
        Ok(Gradients { grads })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root with respect to leaf `var`, if it influenced the root.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}
