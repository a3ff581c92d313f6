//! The autodiff tape: nodes, gradient buffers and the backward driver.

use super::real::Real;
use super::Tensor;
use crate::{CoreError, Result};
use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VarId(pub(crate) usize);

/// Operation cost accumulated while a graph is built.
///
/// `conv_macs` counts convolution multiply-accumulates
/// (k²·Cin·Cout·H'·W' per conv); `elem_ops` counts one op per output
/// element for bias, batch norm, activations, pooling and upsampling.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FlopCount {
    pub conv_macs: u64,
    pub elem_ops: u64,
}

/// How the accumulated cost turns into the two reported figures.
pub const FLOP_CONVENTION: &str = "macs = k^2*Cin*Cout*H'*W' per convolution + 1 op per output \
element for bias/batchnorm/activation/pooling/upsampling; flops counts each multiply-accumulate \
as two ops; G = 1e9";

impl FlopCount {
    /// Multiply-accumulate count in units of 1e9.
    pub fn gmacs(&self) -> f64 {
        (self.conv_macs + self.elem_ops) as f64 / 1e9
    }

    /// FLOP count (2 per MAC) in units of 1e9.
    pub fn gflops(&self) -> f64 {
        (2 * self.conv_macs + self.elem_ops) as f64 / 1e9
    }
}

pub(crate) struct Node<T: Real> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
    pub grad: Option<Vec<T>>,
    pub requires_grad: bool,
    pub needs_grad: bool,
    pub op: Option<Box<dyn Op<T>>>,
}

/// A recorded operation: how to push the output gradient to the inputs.
pub(crate) trait Op<T: Real> {
    fn backward(&self, ctx: &mut BwdCtx<'_, T>);
}

pub(crate) struct GradBufs<T> {
    bufs: Vec<Option<Vec<T>>>,
}

impl<T: Real> GradBufs<T> {
    fn new(n: usize) -> Self {
        let mut bufs = Vec::with_capacity(n);
        bufs.resize_with(n, || None);
        Self { bufs }
    }

    pub fn get_or_alloc(&mut self, id: usize, len: usize) -> &mut [T] {
        self.bufs[id].get_or_insert_with(|| vec![T::zero(); len])
    }

    /// Move `v` in as the gradient of `id`, or add it elementwise when a
    /// buffer already exists (node consumed more than once).
    pub fn add_or_insert(&mut self, id: usize, v: Vec<T>) {
        match &mut self.bufs[id] {
            Some(buf) => {
                for (a, b) in buf.iter_mut().zip(&v) {
                    *a += *b;
                }
            }
            slot @ None => *slot = Some(v),
        }
    }

    fn take(&mut self, id: usize) -> Option<Vec<T>> {
        self.bufs[id].take()
    }
}

/// Backward context handed to each op: read-only node values plus a
/// gradient sink for the op's inputs.
pub(crate) struct BwdCtx<'a, T: Real> {
    nodes: &'a [Node<T>],
    grads: &'a mut GradBufs<T>,
    pub out: usize,
    pub gout: &'a [T],
}

impl<'a, T: Real> BwdCtx<'a, T> {
    pub fn val(&self, id: usize) -> &'a [T] {
        &self.nodes[id].data
    }

    pub fn out_val(&self) -> &'a [T] {
        &self.nodes[self.out].data
    }

    pub fn needs(&self, id: usize) -> bool {
        self.nodes[id].needs_grad
    }

    /// Accumulate into the gradient of `id` (no-op when grads are not needed).
    pub fn accum(&mut self, id: usize, f: impl FnOnce(&mut [T])) {
        if !self.nodes[id].needs_grad {
            return;
        }
        let len = self.nodes[id].data.len();
        f(self.grads.get_or_alloc(id, len));
    }

    /// Hand a fully computed gradient buffer to `id` without the extra
    /// zero-fill-and-add pass of `accum`.
    pub fn contribute(&mut self, id: usize, v: Vec<T>) {
        if !self.nodes[id].needs_grad {
            return;
        }
        self.grads.add_or_insert(id, v);
    }
}

/// Reverse-mode autodiff tape.
///
/// One forward/backward runs at a time on a given graph (single writer);
/// values are stored eagerly so backward rules can read any operand.
pub struct Graph<T: Real> {
    pub(crate) nodes: Vec<Node<T>>,
    check_finite: bool,
    cost: FlopCount,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: false,
            cost: FlopCount::default(),
        }
    }

    /// Graph that rejects NaN/Inf outputs as soon as an op produces them.
    pub fn checked() -> Self {
        Self {
            check_finite: true,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn cost(&self) -> FlopCount {
        self.cost
    }

    /// Insert a leaf value. Gradients accumulate on it when
    /// `requires_grad` is set and it is reachable from the backward root.
    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> VarId {
        let node = Node {
            shape: t.shape.clone(),
            data: t.data,
            grad: None,
            requires_grad,
            needs_grad: requires_grad,
            op: None,
        };
        self.nodes.push(node);
        VarId(self.nodes.len() - 1)
    }

    /// Leaf that never receives gradients (inputs, masks, constants).
    pub fn constant(&mut self, t: Tensor<T>) -> VarId {
        self.leaf(t, false)
    }

    pub fn shape(&self, id: VarId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value(&self, id: VarId) -> &[T] {
        &self.nodes[id.0].data
    }

    /// Copy a node's value out as an owned tensor.
    pub fn tensor(&self, id: VarId) -> Tensor<T> {
        Tensor {
            shape: self.nodes[id.0].shape.clone(),
            data: self.nodes[id.0].data.clone(),
        }
    }

    /// Gradient of a `requires_grad` node, populated by `backward`.
    pub fn grad(&self, id: VarId) -> Option<&[T]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Clear accumulated gradients on every node.
    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub(crate) fn add_cost(&mut self, conv_macs: u64, elem_ops: u64) {
        self.cost.conv_macs += conv_macs;
        self.cost.elem_ops += elem_ops;
    }

    pub(crate) fn push_op(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<T>,
        inputs: &[VarId],
        op: Box<dyn Op<T>>,
    ) -> Result<VarId> {
        if self.check_finite {
            if let Some(i) = data.iter().position(|v| !v.is_finite()) {
                return Err(CoreError::NonFinite { op: name, index: i });
            }
        }
        let needs_grad = inputs.iter().any(|&i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            shape,
            data,
            grad: None,
            requires_grad: false,
            needs_grad,
            op: Some(op),
        });
        Ok(VarId(self.nodes.len() - 1))
    }

    /// Run reverse-mode accumulation from a scalar root.
    ///
    /// Gradients add onto whatever is already stored, so calling twice
    /// without [`Graph::reset_grads`] doubles them.
    pub fn backward(&mut self, root: VarId) -> Result<()> {
        if self.nodes[root.0].data.len() != 1 {
            return Err(CoreError::NotScalar {
                op: "backward",
                len: self.nodes[root.0].data.len(),
            });
        }
        let n = root.0 + 1;
        let mut grads = GradBufs::new(n);
        grads.get_or_alloc(root.0, 1)[0] = T::one();
        for id in (0..n).rev() {
            let Some(g) = grads.take(id) else { continue };
            if let Some(op) = self.nodes[id].op.take() {
                {
                    let mut ctx = BwdCtx {
                        nodes: &self.nodes,
                        grads: &mut grads,
                        out: id,
                        gout: &g,
                    };
                    op.backward(&mut ctx);
                }
                self.nodes[id].op = Some(op);
            }
            if self.nodes[id].requires_grad {
                match &mut self.nodes[id].grad {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&g) {
                            *a += *b;
                        }
                    }
                    None => self.nodes[id].grad = Some(g),
                }
            }
        }
        Ok(())
    }
}
