//! Graph operations: forward evaluation plus the recorded backward rules.

use super::graph::{BwdCtx, Graph, Op, VarId};
use super::kernels::{self, ConvGeom};
use super::real::Real;
use crate::{CoreError, Result};
use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

fn shape4(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match shape[..] {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(CoreError::ShapeMismatch {
            op,
            detail: format!("expected rank-4 N×C×H×W input, got {shape:?}"),
        }),
    }
}

struct ConvOp {
    x: usize,
    w: usize,
    b: usize,
    geom: ConvGeom,
}

impl<T: Real> Op<T> for ConvOp {
    fn backward(&self, ctx: &mut BwdCtx<'_, T>) {
        let x = ctx.val(self.x);
        let w = ctx.val(self.w);
        let gout = ctx.gout;
        let (need_dx, need_dw, need_db) = (ctx.needs(self.x), ctx.needs(self.w), ctx.needs(self.b));
        if !(need_dx || need_dw || need_db) {
            return;
        }
        let grads = kernels::conv2d_backward(x, w, gout, &self.geom, need_dx, need_dw, need_db);
        if let Some(dx) = grads.dx {
            ctx.contribute(self.x, dx);
        }
        if let Some(dw) = grads.dw {
            ctx.contribute(self.w, dw);
        }
        if let Some(db) = grads.db {
            ctx.contribute(self.b, db);
        }
    }
}

struct MaxPoolOp {
    x: usize,
    argmax: Vec<u32>,
}

impl<T: Real> Op<T> for MaxPoolOp {
    fn backward(&self, ctx: &mut BwdCtx<'_, T>) {
        let gout = ctx.gout;
        ctx.accum(self.x, |buf| {
            for (g, &idx) in gout.iter().zip(&self.argmax) {
                buf[idx as usize] += *g;
            }
        });
    }
}

struct UpsampleOp {
    x: usize,
    lead: usize,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
}

impl<T: Real> Op<T> for UpsampleOp {
    fn backward(&self, ctx: &mut BwdCtx<'_, T>) {
        let dx = kernels::bilinear_backward(
            ctx.gout, self.lead, self.in_h, self.in_w, self.out_h, self.out_w,
        );
        ctx.contribute(self.x, dx);
    }
}

struct ConcatOp {
    parts: Vec<(usize, usize)>, // (node id, channel count)
    n: usize,
    c_total: usize,
    hw: usize,
}

impl<T: Real> Op<T> for ConcatOp {
    fn backward(&self, ctx: &mut BwdCtx<'_, T>) {
        let gout = ctx.gout;
        let mut off_c = 0usize;
        for &(id, ci) in &self.parts {
            let (n, c_total, hw) = (self.n, self.c_total, self.hw);
            let mut part = Vec::with_capacity(n * ci * hw);
            for img in 0..n {
                part.extend_from_slice(&gout[(img * c_total + off_c) * hw..][..ci * hw]);
            }
            ctx.contribute(id, part);
            off_c += ci;
        }
    }
}

struct ReluOp {
    x: usize,
}

impl<T: Real> Op<T> for ReluOp {
    fn backward(&self, ctx: &mut BwdCtx<'_, T>) {
        let x = ctx.val(self.x);
        let dx: Vec<T> = x
            .iter()
            .zip(ctx.gout)
            .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
            .collect();
        ctx.contribute(self.x, dx);
    }
}

struct SigmoidOp {
    x: usize,
}

impl<T: Real> Op<T> for SigmoidOp {
    fn backward(&self, ctx: &mut BwdCtx<'_, T>) {
        let one = T::one();
        let dx: Vec<T> = ctx
            .out_val()
            .iter()
            .zip(ctx.gout)
            .map(|(&y, &g)| g * y * (one - y))
            .collect();
        ctx.contribute(self.x, dx);
    }
}

struct AddOp {
    a: usize,
    b: usize,
}

impl<T: Real> Op<T> for AddOp {
    fn backward(&self, ctx: &mut BwdCtx<'_, T>) {
        ctx.contribute(self.a, ctx.gout.to_vec());
        ctx.contribute(self.b, ctx.gout.to_vec());
    }
}

struct ScaleOp<T> {
    x: usize,
    s: T,
}

impl<T: Real> Op<T> for ScaleOp<T> {
    fn backward(&self, ctx: &mut BwdCtx<'_, T>) {
        let s = self.s;
        let dx: Vec<T> = ctx.gout.iter().map(|&g| g * s).collect();
        ctx.contribute(self.x, dx);
    }
}

struct MulScalarOp {
    x: usize,
    gate: usize,
}

impl<T: Real> Op<T> for MulScalarOp {
    fn backward(&self, ctx: &mut BwdCtx<'_, T>) {
        let x = ctx.val(self.x);
        let a = ctx.val(self.gate)[0];
        let gout = ctx.gout;
        let dx: Vec<T> = gout.iter().map(|&g| g * a).collect();
        ctx.contribute(self.x, dx);
        let mut s = T::zero();
        for (&g, &v) in gout.iter().zip(x) {
            s += g * v;
        }
        ctx.contribute(self.gate, alloc::vec![s]);
    }
}

struct MeanOp {
    x: usize,
    len: usize,
}

impl<T: Real> Op<T> for MeanOp {
    fn backward(&self, ctx: &mut BwdCtx<'_, T>) {
        let g = ctx.gout[0] / T::fr(self.len as f64);
        ctx.contribute(self.x, alloc::vec![g; self.len]);
    }
}

struct BatchNormOp<T> {
    x: usize,
    gamma: usize,
    beta: usize,
    mean: Vec<T>,
    inv_std: Vec<T>,
    n: usize,
    c: usize,
    hw: usize,
    /// Train mode normalizes by batch statistics and needs the full
    /// correction terms; eval mode treats the stats as constants.
    train: bool,
}

impl<T: Real> Op<T> for BatchNormOp<T> {
    fn backward(&self, ctx: &mut BwdCtx<'_, T>) {
        let x = ctx.val(self.x);
        let gamma = ctx.val(self.gamma);
        let gout = ctx.gout;
        let (n, c, hw) = (self.n, self.c, self.hw);
        let m = T::fr((n * hw) as f64);

        // Per-channel sums of g and g * x_hat.
        let mut sg = vec![T::zero(); c];
        let mut sgx = vec![T::zero(); c];
        for img in 0..n {
            for ch in 0..c {
                let base = (img * c + ch) * hw;
                let (mu, istd) = (self.mean[ch], self.inv_std[ch]);
                let mut a = T::zero();
                let mut b = T::zero();
                for i in 0..hw {
                    let g = gout[base + i];
                    a += g;
                    b += g * (x[base + i] - mu) * istd;
                }
                sg[ch] += a;
                sgx[ch] += b;
            }
        }
        let train = self.train;
        if ctx.needs(self.x) {
            let mut dx = vec![T::zero(); x.len()];
            for img in 0..n {
                for ch in 0..c {
                    let base = (img * c + ch) * hw;
                    let (mu, istd) = (self.mean[ch], self.inv_std[ch]);
                    let k = gamma[ch] * istd;
                    if train {
                        let gm = sg[ch] / m;
                        let gxm = sgx[ch] / m;
                        for i in 0..hw {
                            let xh = (x[base + i] - mu) * istd;
                            dx[base + i] = k * (gout[base + i] - gm - xh * gxm);
                        }
                    } else {
                        for i in 0..hw {
                            dx[base + i] = k * gout[base + i];
                        }
                    }
                }
            }
            ctx.contribute(self.x, dx);
        }
        ctx.contribute(self.beta, sg);
        ctx.contribute(self.gamma, sgx);
    }
}

impl<T: Real> Graph<T> {
    /// 2D cross-correlation with zero padding and square kernel.
    pub fn conv2d(
        &mut self,
        x: VarId,
        w: VarId,
        b: VarId,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Result<VarId> {
        let (n, c_in, h, wd) = shape4(self.shape(x), "conv2d")?;
        let (c_out, wc_in, kh, kw) = shape4(self.shape(w), "conv2d")?;
        if stride == 0 || dilation == 0 {
            return Err(CoreError::InvalidArg {
                op: "conv2d",
                detail: format!("stride and dilation must be positive (got {stride}, {dilation})"),
            });
        }
        if kh != kw {
            return Err(CoreError::InvalidArg {
                op: "conv2d",
                detail: format!("kernel must be square, got {kh}x{kw}"),
            });
        }
        if wc_in != c_in {
            return Err(CoreError::ShapeMismatch {
                op: "conv2d",
                detail: format!(
                    "input channels disagree: x shape {:?} vs weight shape {:?}",
                    self.shape(x),
                    self.shape(w)
                ),
            });
        }
        if self.shape(b) != [c_out] {
            return Err(CoreError::ShapeMismatch {
                op: "conv2d",
                detail: format!(
                    "bias shape {:?} does not match {c_out} output channels",
                    self.shape(b)
                ),
            });
        }
        let out_h = ConvGeom::out_extent(h, kh, stride, padding, dilation);
        let out_w = ConvGeom::out_extent(wd, kh, stride, padding, dilation);
        let (Some(out_h), Some(out_w)) = (out_h, out_w) else {
            return Err(CoreError::InvalidArg {
                op: "conv2d",
                detail: format!(
                    "kernel span {} exceeds padded input {}x{}",
                    dilation * (kh - 1) + 1,
                    h + 2 * padding,
                    wd + 2 * padding
                ),
            });
        };
        let geom = ConvGeom {
            n,
            c_in,
            h,
            w: wd,
            c_out,
            kernel: kh,
            stride,
            pad: padding,
            dilation,
            out_h,
            out_w,
        };
        let out = kernels::conv2d_forward(self.value(x), self.value(w), self.value(b), &geom);
        let out_elems = (n * c_out * out_h * out_w) as u64;
        self.add_cost(
            (kh * kw * c_in) as u64 * (c_out * out_h * out_w * n) as u64,
            out_elems,
        );
        self.push_op(
            "conv2d",
            vec![n, c_out, out_h, out_w],
            out,
            &[x, w, b],
            Box::new(ConvOp {
                x: x.0,
                w: w.0,
                b: b.0,
                geom,
            }),
        )
    }

    /// Max pooling; padded cells use -inf so they never win a window.
    pub fn maxpool2d(
        &mut self,
        x: VarId,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<VarId> {
        let (n, c, h, w) = shape4(self.shape(x), "maxpool2d")?;
        if kernel == 0 || stride == 0 {
            return Err(CoreError::InvalidArg {
                op: "maxpool2d",
                detail: format!("kernel and stride must be positive (got {kernel}, {stride})"),
            });
        }
        let out_h = ConvGeom::out_extent(h, kernel, stride, padding, 1);
        let out_w = ConvGeom::out_extent(w, kernel, stride, padding, 1);
        let (Some(out_h), Some(out_w)) = (out_h, out_w) else {
            return Err(CoreError::InvalidArg {
                op: "maxpool2d",
                detail: format!(
                    "window {kernel}x{kernel} larger than padded input {}x{}",
                    h + 2 * padding,
                    w + 2 * padding
                ),
            });
        };
        let Some((out, argmax)) =
            kernels::maxpool_forward(self.value(x), n, c, h, w, kernel, stride, padding, out_h, out_w)
        else {
            return Err(CoreError::InvalidArg {
                op: "maxpool2d",
                detail: "a pooling window contains no input cells".into(),
            });
        };
        self.add_cost(0, (n * c * out_h * out_w) as u64);
        self.push_op(
            "maxpool2d",
            vec![n, c, out_h, out_w],
            out,
            &[x],
            Box::new(MaxPoolOp { x: x.0, argmax }),
        )
    }

    /// Bilinear resize with half-pixel centers (exact identity when the
    /// output size equals the input size).
    pub fn upsample_bilinear(&mut self, x: VarId, out_h: usize, out_w: usize) -> Result<VarId> {
        let (n, c, h, w) = shape4(self.shape(x), "upsample_bilinear")?;
        if out_h == 0 || out_w == 0 {
            return Err(CoreError::InvalidArg {
                op: "upsample_bilinear",
                detail: format!("output size {out_h}x{out_w} must be positive"),
            });
        }
        let out = kernels::bilinear_forward(self.value(x), n * c, h, w, out_h, out_w);
        self.add_cost(0, (n * c * out_h * out_w) as u64);
        self.push_op(
            "upsample_bilinear",
            vec![n, c, out_h, out_w],
            out,
            &[x],
            Box::new(UpsampleOp {
                x: x.0,
                lead: n * c,
                in_h: h,
                in_w: w,
                out_h,
                out_w,
            }),
        )
    }

    /// Concatenate along the channel dimension, input order preserved.
    pub fn concat_channels(&mut self, xs: &[VarId]) -> Result<VarId> {
        if xs.is_empty() {
            return Err(CoreError::InvalidArg {
                op: "concat_channels",
                detail: "no inputs".into(),
            });
        }
        let (n, c0, h, w) = shape4(self.shape(xs[0]), "concat_channels")?;
        let mut parts = vec![(xs[0].0, c0)];
        let mut c_total = c0;
        for &x in &xs[1..] {
            let (ni, ci, hi, wi) = shape4(self.shape(x), "concat_channels")?;
            if (ni, hi, wi) != (n, h, w) {
                return Err(CoreError::ShapeMismatch {
                    op: "concat_channels",
                    detail: format!(
                        "inputs disagree: {:?} vs {:?}",
                        self.shape(xs[0]),
                        self.shape(x)
                    ),
                });
            }
            parts.push((x.0, ci));
            c_total += ci;
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * c_total * hw);
        for img in 0..n {
            for &(id, ci) in &parts {
                let src = &self.nodes[id].data[img * ci * hw..(img + 1) * ci * hw];
                out.extend_from_slice(src);
            }
        }
        self.push_op(
            "concat_channels",
            vec![n, c_total, h, w],
            out,
            xs,
            Box::new(ConcatOp {
                parts,
                n,
                c_total,
                hw,
            }),
        )
    }

    pub fn relu(&mut self, x: VarId) -> Result<VarId> {
        let out: Vec<T> = self
            .value(x)
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        self.add_cost(0, out.len() as u64);
        let shape = self.shape(x).to_vec();
        self.push_op("relu", shape, out, &[x], Box::new(ReluOp { x: x.0 }))
    }

    pub fn sigmoid(&mut self, x: VarId) -> Result<VarId> {
        let one = T::one();
        let out: Vec<T> = self
            .value(x)
            .iter()
            .map(|&v| {
                if v >= T::zero() {
                    one / (one + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (one + e)
                }
            })
            .collect();
        self.add_cost(0, out.len() as u64);
        let shape = self.shape(x).to_vec();
        self.push_op("sigmoid", shape, out, &[x], Box::new(SigmoidOp { x: x.0 }))
    }

    /// Elementwise sum; shapes must match exactly (no broadcasting).
    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        if self.shape(a) != self.shape(b) {
            return Err(CoreError::ShapeMismatch {
                op: "add",
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        let out: Vec<T> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        self.add_cost(0, out.len() as u64);
        let shape = self.shape(a).to_vec();
        self.push_op("add", shape, out, &[a, b], Box::new(AddOp { a: a.0, b: b.0 }))
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&mut self, x: VarId, s: T) -> Result<VarId> {
        let out: Vec<T> = self.value(x).iter().map(|&v| v * s).collect();
        self.add_cost(0, out.len() as u64);
        let shape = self.shape(x).to_vec();
        self.push_op("scale", shape, out, &[x], Box::new(ScaleOp { x: x.0, s }))
    }

    /// Multiply by a learnable scalar gate (shape `[1]`); the one permitted
    /// broadcast in the op set.
    pub fn mul_scalar(&mut self, x: VarId, gate: VarId) -> Result<VarId> {
        if self.value(gate).len() != 1 {
            return Err(CoreError::ShapeMismatch {
                op: "mul_scalar",
                detail: format!("gate must be a scalar, got shape {:?}", self.shape(gate)),
            });
        }
        let a = self.value(gate)[0];
        let out: Vec<T> = self.value(x).iter().map(|&v| v * a).collect();
        self.add_cost(0, out.len() as u64);
        let shape = self.shape(x).to_vec();
        self.push_op(
            "mul_scalar",
            shape,
            out,
            &[x, gate],
            Box::new(MulScalarOp {
                x: x.0,
                gate: gate.0,
            }),
        )
    }

    /// Mean over all elements, producing a scalar.
    pub fn mean(&mut self, x: VarId) -> Result<VarId> {
        let len = self.value(x).len();
        let mut s = T::zero();
        for &v in self.value(x) {
            s += v;
        }
        let out = vec![s / T::fr(len as f64)];
        self.add_cost(0, len as u64);
        self.push_op("mean", vec![1], out, &[x], Box::new(MeanOp { x: x.0, len }))
    }

    /// Batch norm in train mode: normalizes by batch statistics and also
    /// returns the per-channel batch mean and biased variance so the caller
    /// can update running statistics.
    pub fn batchnorm_train(
        &mut self,
        x: VarId,
        gamma: VarId,
        beta: VarId,
        eps: T,
    ) -> Result<(VarId, Vec<T>, Vec<T>)> {
        let (n, c, h, w) = shape4(self.shape(x), "batchnorm2d")?;
        self.bn_check(gamma, beta, c, eps)?;
        let hw = h * w;
        let (mean, var) = kernels::bn_stats(self.value(x), n, c, hw);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let id = self.bn_emit(x, gamma, beta, mean.clone(), inv_std, n, c, hw, true)?;
        Ok((id, mean, var))
    }

    /// Batch norm in eval mode: normalizes by the provided running stats.
    pub fn batchnorm_eval(
        &mut self,
        x: VarId,
        gamma: VarId,
        beta: VarId,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Result<VarId> {
        let (n, c, h, w) = shape4(self.shape(x), "batchnorm2d")?;
        self.bn_check(gamma, beta, c, eps)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(CoreError::ShapeMismatch {
                op: "batchnorm2d",
                detail: format!(
                    "running stats lengths {}/{} do not match {c} channels",
                    running_mean.len(),
                    running_var.len()
                ),
            });
        }
        let inv_std: Vec<T> = running_var
            .iter()
            .map(|&v| T::one() / (v + eps).sqrt())
            .collect();
        self.bn_emit(x, gamma, beta, running_mean.to_vec(), inv_std, n, c, h * w, false)
    }

    fn bn_check(&self, gamma: VarId, beta: VarId, c: usize, eps: T) -> Result<()> {
        if eps <= T::zero() {
            return Err(CoreError::InvalidArg {
                op: "batchnorm2d",
                detail: "eps must be positive".into(),
            });
        }
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(id) != [c] {
                return Err(CoreError::ShapeMismatch {
                    op: "batchnorm2d",
                    detail: format!(
                        "{name} shape {:?} does not match {c} channels",
                        self.shape(id)
                    ),
                });
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_emit(
        &mut self,
        x: VarId,
        gamma: VarId,
        beta: VarId,
        mean: Vec<T>,
        inv_std: Vec<T>,
        n: usize,
        c: usize,
        hw: usize,
        train: bool,
    ) -> Result<VarId> {
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let mut out = vec![T::zero(); xv.len()];
        for img in 0..n {
            for ch in 0..c {
                let base = (img * c + ch) * hw;
                let (mu, istd, ga, be) = (mean[ch], inv_std[ch], gv[ch], bv[ch]);
                for i in 0..hw {
                    out[base + i] = ga * (xv[base + i] - mu) * istd + be;
                }
            }
        }
        self.add_cost(0, out.len() as u64);
        let shape = self.shape(x).to_vec();
        self.push_op(
            "batchnorm2d",
            shape,
            out,
            &[x, gamma, beta],
            Box::new(BatchNormOp {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                mean,
                inv_std,
                n,
                c,
                hw,
                train,
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use super::super::Tensor;

    fn t4(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn identity_kernel_conv_is_identity() {
        let mut g = Graph::new();
        let x = g.leaf(t4(&[1, 1, 4, 4], (0..16).map(|v| v as f64).collect()), false);
        let w = g.leaf(t4(&[1, 1, 1, 1], vec![1.0]), false);
        let b = g.leaf(Tensor::new(&[1], vec![0.0]).unwrap(), false);
        let y = g.conv2d(x, w, b, 1, 0, 1).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn conv_rejects_channel_mismatch_naming_shapes() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 3, 4, 4]));
        let w = g.constant(Tensor::zeros(&[2, 2, 3, 3]));
        let b = g.constant(Tensor::zeros(&[2]));
        let err = g.conv2d(x, w, b, 1, 1, 1).unwrap_err();
        let msg = alloc::format!("{err}");
        assert!(msg.contains("[1, 3, 4, 4]") && msg.contains("[2, 2, 3, 3]"), "{msg}");
    }

    #[test]
    fn conv_rejects_zero_stride() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 4, 4]));
        let w = g.constant(Tensor::zeros(&[1, 1, 3, 3]));
        let b = g.constant(Tensor::zeros(&[1]));
        assert!(g.conv2d(x, w, b, 0, 1, 1).is_err());
        assert!(g.conv2d(x, w, b, 1, 1, 0).is_err());
    }

    #[test]
    fn same_padding_preserves_extent() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 12, 12]));
        for dil in [1usize, 2, 8] {
            let w = g.constant(Tensor::zeros(&[3, 2, 3, 3]));
            let b = g.constant(Tensor::zeros(&[3]));
            let y = g.conv2d(x, w, b, 1, dil, dil).unwrap();
            assert_eq!(g.shape(y), &[1, 3, 12, 12]);
        }
    }

    #[test]
    fn pool_window_larger_than_input_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
        assert!(g.maxpool2d(x, 5, 1, 0).is_err());
    }

    #[test]
    fn single_window_pool() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t4(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let y = g.maxpool2d(x, 2, 2, 0).unwrap();
        assert_eq!(g.value(y), &[4.0]);
    }

    #[test]
    fn sigmoid_at_zero_and_relu_values() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(&[1, 1, 1, 3], vec![0.0, -3.0, 3.0]).unwrap());
        let s = g.sigmoid(x).unwrap();
        assert_eq!(g.value(s)[0], 0.5);
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r), &[0.0, 0.0, 3.0]);
    }

    #[test]
    fn sigmoid_stays_in_open_unit_interval() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(&[1, 1, 1, 4], vec![-30.0, -0.1, 0.1, 30.0]).unwrap());
        let s = g.sigmoid(x).unwrap();
        for &v in g.value(s) {
            assert!(v > 0.0 && v < 1.0, "{v}");
        }
    }

    #[test]
    fn add_rejects_broadcasting() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[1, 2, 3, 3]));
        let b = g.constant(Tensor::zeros(&[1, 1, 3, 3]));
        assert!(g.add(a, b).is_err());
    }

    #[test]
    fn mean_backward_is_uniform() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), true);
        let m = g.mean(x).unwrap();
        g.backward(m).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.25; 4]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(&[2, 2]), true);
        let y = g.relu(x).unwrap();
        assert!(matches!(g.backward(y), Err(CoreError::NotScalar { .. })));
    }

    #[test]
    fn double_backward_doubles_grads() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(&[1, 4], vec![0.0; 4]).unwrap(), true);
        let s = g.sigmoid(x).unwrap();
        let m = g.mean(s).unwrap();
        g.backward(m).unwrap();
        let first = g.grad(x).unwrap().to_vec();
        g.backward(m).unwrap();
        let second = g.grad(x).unwrap().to_vec();
        for (a, b) in first.iter().zip(&second) {
            assert!((2.0 * a - b).abs() < 1e-15);
        }
        g.reset_grads();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn sum_of_sigmoid_grad_at_zero_is_quarter() {
        // mean * len recovers the sum; d/dx sigmoid(0) = 0.25 per element.
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(&[1, 8], vec![0.0; 8]).unwrap(), true);
        let s = g.sigmoid(x).unwrap();
        let m = g.mean(s).unwrap();
        let y = g.scale(m, 8.0).unwrap();
        g.backward(y).unwrap();
        for &v in g.grad(x).unwrap() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_preserves_order_and_slices_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(t4(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]), true);
        let b = g.leaf(t4(&[1, 1, 2, 2], vec![5.0, 6.0, 7.0, 8.0]), true);
        let y = g.concat_channels(&[a, b]).unwrap();
        assert_eq!(g.value(y), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let single = g.concat_channels(&[a]).unwrap();
        assert_eq!(g.value(single), g.value(a));
        let m = g.mean(y).unwrap();
        let s = g.scale(m, 8.0).unwrap(); // sum(concat(a, b))
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[1.0; 4]);
        assert_eq!(g.grad(b).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn batchnorm_gamma_zero_gives_beta() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(&[1, 2, 2, 2], (0..8).map(|v| v as f64).collect()).unwrap());
        let ga = g.constant(Tensor::new(&[2], vec![0.0, 0.0]).unwrap());
        let be = g.constant(Tensor::new(&[2], vec![1.5, -2.0]).unwrap());
        let (y, _, _) = g.batchnorm_train(x, ga, be, 1e-5).unwrap();
        assert_eq!(g.value(y)[..4], [1.5; 4]);
        assert_eq!(g.value(y)[4..], [-2.0; 4]);
    }

    #[test]
    fn batchnorm_normalized_input_passes_through() {
        // mean 0, var 1 per channel: output ~= gamma * x + beta = x
        let vals = vec![-1.0f64, 1.0, -1.0, 1.0];
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(&[1, 1, 2, 2], vals.clone()).unwrap());
        let ga = g.constant(Tensor::new(&[1], vec![1.0]).unwrap());
        let be = g.constant(Tensor::new(&[1], vec![0.0]).unwrap());
        let (y, mean, var) = g.batchnorm_train(x, ga, be, 1e-9).unwrap();
        assert!((mean[0]).abs() < 1e-15);
        assert!((var[0] - 1.0).abs() < 1e-15);
        for (a, b) in g.value(y).iter().zip(&vals) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn single_conv_cost_closed_form() {
        // 1x1 conv, 1->1 channels, 4x4 input: 16 MACs + 16 bias adds;
        // 2*16 + 16 = 48 under the doubled convention
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 4, 4]));
        let w = g.constant(Tensor::zeros(&[1, 1, 1, 1]));
        let b = g.constant(Tensor::zeros(&[1]));
        g.conv2d(x, w, b, 1, 0, 1).unwrap();
        let cost = g.cost();
        assert_eq!(cost.conv_macs, 16);
        assert_eq!(cost.elem_ops, 16);
        assert_eq!(2 * cost.conv_macs + cost.elem_ops, 48);
        assert_eq!(cost.conv_macs + cost.elem_ops, 32);
    }

    #[test]
    fn finite_check_mode_rejects_inf() {
        let mut g = Graph::<f64>::checked();
        let x = g.constant(Tensor::new(&[1, 2], vec![1e308, 1e308]).unwrap());
        let err = g.scale(x, 10.0).unwrap_err();
        assert!(matches!(err, CoreError::NonFinite { .. }));
    }
}
