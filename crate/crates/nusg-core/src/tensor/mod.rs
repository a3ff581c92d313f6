//! Dense tensors and the reverse-mode autodiff graph.
//!
//! Layout is row-major N×C×H×W for image data. A [`Graph`] owns every value
//! produced during a forward pass; [`Graph::backward`] walks the tape in
//! reverse and accumulates gradients on `requires_grad` leaves.

pub(crate) mod graph;
mod kernels;
mod ops;
mod real;

pub use graph::{FlopCount, Graph, VarId, FLOP_CONVENTION};
pub use real::Real;

use crate::{CoreError, Result};
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

/// Dense, owned n-dimensional array of real values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(CoreError::InvalidArg {
                op: "tensor",
                detail: format!("zero-sized dimension in shape {shape:?}"),
            });
        }
        if n != data.len() {
            return Err(CoreError::ShapeMismatch {
                op: "tensor",
                detail: format!("shape {shape:?} needs {n} values, got {}", data.len()),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// (N, C, H, W) view of the shape; an error for non-rank-4 tensors.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(CoreError::ShapeMismatch {
                op: "tensor",
                detail: format!("expected rank-4 shape, got {:?}", self.shape),
            }),
        }
    }

    pub fn iter(&self) -> core::slice::Iter<'_, T> {
        self.data.iter()
    }

    /// Bilinear resize with half-pixel centers over the trailing two dims.
    /// Accepts rank-3 (C,H,W) or rank-4 (N,C,H,W) tensors.
    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
        let (lead, h, w) = match self.shape[..] {
            [c, h, w] => (c, h, w),
            [n, c, h, w] => (n * c, h, w),
            _ => {
                return Err(CoreError::ShapeMismatch {
                    op: "resize_bilinear",
                    detail: format!("expected rank 3 or 4, got {:?}", self.shape),
                })
            }
        };
        if out_h == 0 || out_w == 0 {
            return Err(CoreError::InvalidArg {
                op: "resize_bilinear",
                detail: format!("output size {out_h}x{out_w} must be positive"),
            });
        }
        let out = kernels::bilinear_forward(&self.data, lead, h, w, out_h, out_w);
        let mut shape = self.shape.clone();
        let r = shape.len();
        shape[r - 2] = out_h;
        shape[r - 1] = out_w;
        Tensor::new(&shape, out)
    }
}
