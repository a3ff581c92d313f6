//! Training losses: pixel BCE, the deep-supervision sum over all seven
//! output maps, and the focal variant weighted by foreground proportion.

use crate::model::SideOutputs;
use crate::tensor::graph::{BwdCtx, Op};
use crate::tensor::{Graph, Real, Tensor, VarId};
use crate::{CoreError, Result};
use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

/// Probability clamp used inside the losses so logs stay finite.
pub const PROB_CLAMP: f64 = 1e-7;

fn check_binary_mask<T: Real>(gt: &Tensor<T>, op: &'static str) -> Result<()> {
    if let Some(i) = gt
        .data()
        .iter()
        .position(|&v| v != T::zero() && v != T::one())
    {
        return Err(CoreError::InvalidArg {
            op,
            detail: format!(
                "ground truth must be a 0/1 mask; found {} at index {i}",
                gt.data()[i]
            ),
        });
    }
    Ok(())
}

fn check_same_shape<T: Real>(g: &Graph<T>, pred: VarId, gt: &Tensor<T>, op: &'static str) -> Result<()> {
    if g.shape(pred) != gt.shape() {
        return Err(CoreError::ShapeMismatch {
            op,
            detail: format!("prediction {:?} vs mask {:?}", g.shape(pred), gt.shape()),
        });
    }
    Ok(())
}

struct BceOp<T> {
    x: usize,
    target: Vec<T>,
}

impl<T: Real> Op<T> for BceOp<T> {
    fn backward(&self, ctx: &mut BwdCtx<'_, T>) {
        let p = ctx.val(self.x);
        let g = ctx.gout[0];
        let lo = T::fr(PROB_CLAMP);
        let hi = T::one() - lo;
        let inv_n = T::one() / T::fr(p.len() as f64);
        let dx: Vec<T> = p
            .iter()
            .zip(&self.target)
            .map(|(&pi, &t)| {
                if pi < lo || pi > hi {
                    T::zero() // clamped region: zero slope
                } else {
                    g * ((T::one() - t) / (T::one() - pi) - t / pi) * inv_n
                }
            })
            .collect();
        ctx.contribute(self.x, dx);
    }
}

/// Mean binary cross entropy of a probability map against a 0/1 mask,
/// with probabilities clamped to [1e-7, 1 - 1e-7].
pub fn bce_loss<T: Real>(g: &mut Graph<T>, pred: VarId, gt: &Tensor<T>) -> Result<VarId> {
    check_same_shape(g, pred, gt, "bce")?;
    check_binary_mask(gt, "bce")?;
    let lo = T::fr(PROB_CLAMP);
    let hi = T::one() - lo;
    let p = g.value(pred);
    let mut acc = T::zero();
    for (&pi, &t) in p.iter().zip(gt.data()) {
        let pc = pi.max(lo).min(hi);
        acc += -(t * pc.ln() + (T::one() - t) * (T::one() - pc).ln());
    }
    let out = acc / T::fr(p.len() as f64);
    g.add_cost(0, p.len() as u64);
    g.push_op(
        "bce",
        vec![1],
        vec![out],
        &[pred],
        Box::new(BceOp {
            x: pred.0,
            target: gt.data().to_vec(),
        }),
    )
}

/// Sum of BCE over the six side maps and the fused map, unit weights.
pub fn deep_supervision_loss<T: Real>(
    g: &mut Graph<T>,
    outputs: &SideOutputs,
    gt: &Tensor<T>,
) -> Result<VarId> {
    let mut total: Option<VarId> = None;
    for map in outputs.all() {
        let term = bce_loss(g, map, gt)?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("seven maps"))
}

#[derive(Debug, Clone, Copy)]
pub struct FocalParams {
    pub gamma: f64,
    pub alpha: f64,
    /// Cap on the foreground-proportion weight.
    pub lambda_max: f64,
    /// Reference foreground fraction; images with less foreground than
    /// this are weighted up, up to `lambda_max`.
    pub mu_ref: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            alpha: 0.25,
            lambda_max: 3.0,
            mu_ref: 0.25,
        }
    }
}

struct FocalOp<T> {
    x: usize,
    target: Vec<T>,
    gamma: T,
    alpha: T,
    /// Per-image weight, already divided by (images * pixels-per-image).
    coeff: Vec<T>,
    per_image: usize,
}

impl<T: Real> FocalOp<T> {
    fn term_and_slope(&self, p: T, t: T) -> (T, T) {
        let one = T::one();
        let lo = T::fr(PROB_CLAMP);
        let hi = one - lo;
        let (p_t, sign) = if t == one { (p, one) } else { (one - p, -one) };
        let a_t = if t == one { self.alpha } else { one - self.alpha };
        let pc = p_t.max(lo).min(hi);
        let q = one - pc;
        let term = -a_t * q.powf(self.gamma) * pc.ln();
        let slope = if p_t < lo || p_t > hi {
            T::zero()
        } else {
            let dq = if self.gamma == T::zero() {
                T::zero()
            } else {
                self.gamma * q.powf(self.gamma - one) * pc.ln()
            };
            -a_t * (q.powf(self.gamma) / pc - dq) * sign
        };
        (term, slope)
    }
}

impl<T: Real> Op<T> for FocalOp<T> {
    fn backward(&self, ctx: &mut BwdCtx<'_, T>) {
        let p = ctx.val(self.x);
        let g = ctx.gout[0];
        let dx: Vec<T> = p
            .iter()
            .enumerate()
            .map(|(i, &pi)| {
                let (_, slope) = self.term_and_slope(pi, self.target[i]);
                g * slope * self.coeff[i / self.per_image]
            })
            .collect();
        ctx.contribute(self.x, dx);
    }
}

fn focal_map_loss<T: Real>(
    g: &mut Graph<T>,
    pred: VarId,
    gt: &Tensor<T>,
    gamma: f64,
    alpha: f64,
    weights: &[T],
) -> Result<VarId> {
    check_same_shape(g, pred, gt, "focal")?;
    check_binary_mask(gt, "focal")?;
    let n = weights.len();
    let per_image = gt.len() / n;
    let op = FocalOp {
        x: pred.0,
        target: gt.data().to_vec(),
        gamma: T::fr(gamma),
        alpha: T::fr(alpha),
        coeff: weights
            .iter()
            .map(|&w| w / T::fr((n * per_image) as f64))
            .collect(),
        per_image,
    };
    let p = g.value(pred);
    let mut acc = T::zero();
    for (i, (&pi, &t)) in p.iter().zip(gt.data()).enumerate() {
        let (term, _) = op.term_and_slope(pi, t);
        acc += term * op.coeff[i / per_image];
    }
    g.add_cost(0, p.len() as u64);
    g.push_op("focal", vec![1], vec![acc], &[pred], Box::new(op))
}

/// Per-image weight from the foreground proportion of the mask:
/// lambda = clamp(mu_ref / mu, 1, lambda_max), with an all-background
/// image saturating at lambda_max.
pub fn focal_image_weights<T: Real>(gt: &Tensor<T>, params: &FocalParams) -> Vec<f64> {
    let n = match gt.shape() {
        [n, ..] if gt.shape().len() == 4 => *n,
        _ => 1,
    };
    let per = gt.len() / n;
    (0..n)
        .map(|i| {
            let seg = &gt.data()[i * per..(i + 1) * per];
            let fg = seg.iter().filter(|&&v| v == T::one()).count();
            let mu = fg as f64 / per as f64;
            if mu == 0.0 {
                params.lambda_max
            } else {
                (params.mu_ref / mu).clamp(1.0, params.lambda_max)
            }
        })
        .collect()
}

/// Deep-supervision focal loss: per map, the per-image weighted mean focal
/// term; summed over the seven maps.
pub fn weighted_focal_loss<T: Real>(
    g: &mut Graph<T>,
    outputs: &SideOutputs,
    gt: &Tensor<T>,
    params: &FocalParams,
) -> Result<VarId> {
    let weights: Vec<T> = focal_image_weights(gt, params)
        .into_iter()
        .map(T::fr)
        .collect();
    let mut total: Option<VarId> = None;
    for map in outputs.all() {
        let term = focal_map_loss(g, map, gt, params.gamma, params.alpha, &weights)?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("seven maps"))
}
