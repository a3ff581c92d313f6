//! Finite-difference verification of every backward rule, plus the suite
//! covering each registered op and composite block once.

use crate::blocks::{ConvBnRelu, ConvLayer, Mode, Pass, ResConnect, Rsu, Rsu4f, RsuSpec};
use crate::loss::{bce_loss, deep_supervision_loss, weighted_focal_loss, FocalParams};
use crate::model::SideOutputs;
use crate::params::{ParamId, ParamStore};
use crate::rng::SeededRng;
use crate::tensor::graph::{BwdCtx, Op};
use crate::tensor::{Graph, Tensor, VarId};
use crate::{CoreError, Result};
use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

/// Pass threshold for every relative error reported by the suite.
pub const GRAD_TOL: f64 = 1e-4;

/// Default central-difference step.
pub const DEFAULT_EPS: f64 = 1e-6;

/// Compare analytic gradients of a scalar-valued tensor function against
/// central differences; returns the worst relative error, where the
/// denominator is max(|analytic|, |numeric|, 1e-8).
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[VarId]) -> Result<VarId>,
{
    let eval = |tensors: &[Tensor<f64>]| -> Result<(Graph<f64>, Vec<VarId>, VarId)> {
        let mut g = Graph::new();
        let ids: Vec<VarId> = tensors.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let y = f(&mut g, &ids)?;
        if g.value(y).len() != 1 {
            return Err(CoreError::NotScalar {
                op: "grad_check",
                len: g.value(y).len(),
            });
        }
        Ok((g, ids, y))
    };

    let (mut g, ids, y) = eval(inputs)?;
    g.backward(y)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| {
            g.grad(id)
                .map(|s| s.to_vec())
                .unwrap_or_else(|| vec![0.0; g.value(id).len()])
        })
        .collect();

    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for j in 0..t.len() {
            let orig = t.data()[j];
            let a = analytic[ti][j];
            let probe = |step: f64, work: &mut Vec<Tensor<f64>>| -> Result<f64> {
                work[ti].data_mut()[j] = orig + step;
                let (gp, _, yp) = eval(work)?;
                let fp = gp.value(yp)[0];
                work[ti].data_mut()[j] = orig - step;
                let (gm, _, ym) = eval(work)?;
                let fm = gm.value(ym)[0];
                work[ti].data_mut()[j] = orig;
                let numeric = (fp - fm) / (2.0 * step);
                Ok((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8))
            };
            let mut rel = probe(eps, &mut work)?;
            if rel >= GRAD_TOL / 10.0 {
                // Re-probe both ways: a smaller step rejects ReLU/maxpool
                // crossings inside the bracket, a larger one rejects
                // roundoff on near-zero gradients. A wrong backward rule
                // keeps its error at every step size.
                for step in [eps / 8.0, eps * 8.0, eps * 64.0] {
                    rel = rel.min(probe(step, &mut work)?);
                    if rel < GRAD_TOL / 10.0 {
                        break;
                    }
                }
            }
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

fn rand_tensor(rng: &mut SeededRng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| lo + (hi - lo) * rng.uniform()).collect();
    Tensor::new(shape, data).unwrap()
}

fn rand_mask(rng: &mut SeededRng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| if rng.uniform() < 0.5 { 1.0 } else { 0.0 })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Values with guaranteed pairwise separation, shuffled: safe for max-pool
/// argmax stability under the finite-difference step.
fn distinct_tensor(rng: &mut SeededRng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - n as f64 * 0.025).collect();
    for i in (1..n).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        data.swap(i, j);
    }
    Tensor::new(shape, data).unwrap()
}

/// Keep ReLU probes away from the kink (|x| well above the FD step).
fn keep_off_kink(t: &mut Tensor<f64>, margin: f64) {
    for v in t.data_mut() {
        if v.abs() < margin {
            *v = if *v >= 0.0 { margin } else { -margin };
        }
    }
}

fn sigmoid_mean(g: &mut Graph<f64>, x: VarId) -> Result<VarId> {
    let s = g.sigmoid(x)?;
    g.mean(s)
}

/// Gradient-check a block built over a parameter store: finite differences
/// run over `extra` tensors and every learnable entry.
fn check_with_store<F>(
    store: &ParamStore<f64>,
    mode: Mode,
    extra: &[Tensor<f64>],
    f: F,
) -> Result<f64>
where
    F: Fn(&mut Pass<'_, f64>, &[VarId]) -> Result<VarId>,
{
    let learn: Vec<ParamId> = store
        .iter()
        .filter(|(_, p)| p.learnable)
        .map(|(id, _)| id)
        .collect();
    let mut inputs: Vec<Tensor<f64>> = extra.to_vec();
    inputs.extend(learn.iter().map(|&id| store.tensor(id).clone()));
    let ne = extra.len();
    grad_check(
        |g, ids| {
            let mut pass = Pass::new(g, store, mode);
            for (k, &pid) in learn.iter().enumerate() {
                pass.bind_override(pid, ids[ne + k]);
            }
            f(&mut pass, &ids[..ne])
        },
        &inputs,
        DEFAULT_EPS,
    )
}

struct BrokenScale {
    x: usize,
}

impl Op<f64> for BrokenScale {
    fn backward(&self, ctx: &mut BwdCtx<'_, f64>) {
        let gout = ctx.gout;
        ctx.accum(self.x, |buf| {
            for (b, &g) in buf.iter_mut().zip(gout) {
                *b += g * 2.2; // forward scales by 2.0: deliberately wrong
            }
        });
    }
}

fn broken_scale(g: &mut Graph<f64>, x: VarId) -> Result<VarId> {
    let out: Vec<f64> = g.value(x).iter().map(|v| v * 2.0).collect();
    let shape = g.shape(x).to_vec();
    g.push_op(
        "broken_backward_fixture",
        shape,
        out,
        &[x],
        Box::new(BrokenScale { x: x.0 }),
    )
}

#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub max_rel_err: f64,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.max_rel_err < GRAD_TOL
    }
}

/// Run the finite-difference suite over every registered differentiable op
/// and composite block. The negative control is a fixture with a broken
/// backward that must fail; it is excluded unless requested.
pub fn run_suite(include_negative_control: bool) -> Result<Vec<SuiteEntry>> {
    let mut rng = SeededRng::new(0x5eed);
    let mut out = Vec::new();
    let mut push = |name: &'static str, err: Result<f64>| -> Result<()> {
        out.push(SuiteEntry {
            name,
            max_rel_err: err?,
        });
        Ok(())
    };

    // conv2d: plain, strided, dilated
    {
        let x = rand_tensor(&mut rng, &[1, 2, 6, 6], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[3, 2, 3, 3], -0.7, 0.7);
        let b = rand_tensor(&mut rng, &[3], -0.2, 0.2);
        let mut worst = grad_check(
            |g, ids| {
                let y = g.conv2d(ids[0], ids[1], ids[2], 1, 1, 1)?;
                sigmoid_mean(g, y)
            },
            &[x, w, b],
            DEFAULT_EPS,
        )?;
        let x = rand_tensor(&mut rng, &[1, 1, 7, 7], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[2, 1, 3, 3], -0.7, 0.7);
        let b = rand_tensor(&mut rng, &[2], -0.2, 0.2);
        worst = worst.max(grad_check(
            |g, ids| {
                let y = g.conv2d(ids[0], ids[1], ids[2], 2, 2, 2)?;
                sigmoid_mean(g, y)
            },
            &[x, w, b],
            DEFAULT_EPS,
        )?);
        push("conv2d", Ok(worst))?;
    }

    // maxpool2d: 2x2 stride 2 and 3x3 stride 1 pad 1
    {
        let x = distinct_tensor(&mut rng, &[1, 2, 6, 6]);
        let mut worst = grad_check(
            |g, ids| {
                let y = g.maxpool2d(ids[0], 2, 2, 0)?;
                sigmoid_mean(g, y)
            },
            &[x.clone()],
            DEFAULT_EPS,
        )?;
        worst = worst.max(grad_check(
            |g, ids| {
                let y = g.maxpool2d(ids[0], 3, 1, 1)?;
                sigmoid_mean(g, y)
            },
            &[x],
            DEFAULT_EPS,
        )?);
        push("maxpool2d", Ok(worst))?;
    }

    // upsample_bilinear: doubling, odd target, downscale
    {
        let x = rand_tensor(&mut rng, &[1, 2, 3, 4], -1.0, 1.0);
        let mut worst = 0.0f64;
        for (oh, ow) in [(6usize, 8usize), (5, 7), (2, 3)] {
            worst = worst.max(grad_check(
                |g, ids| {
                    let y = g.upsample_bilinear(ids[0], oh, ow)?;
                    sigmoid_mean(g, y)
                },
                &[x.clone()],
                DEFAULT_EPS,
            )?);
        }
        push("upsample_bilinear", Ok(worst))?;
    }

    {
        let a = rand_tensor(&mut rng, &[1, 2, 4, 4], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[1, 3, 4, 4], -1.0, 1.0);
        push(
            "concat_channels",
            grad_check(
                |g, ids| {
                    let y = g.concat_channels(&[ids[0], ids[1]])?;
                    sigmoid_mean(g, y)
                },
                &[a, b],
                DEFAULT_EPS,
            ),
        )?;
    }

    {
        let mut x = rand_tensor(&mut rng, &[1, 2, 5, 5], -2.0, 2.0);
        keep_off_kink(&mut x, 1e-3);
        push(
            "relu",
            grad_check(
                |g, ids| {
                    let y = g.relu(ids[0])?;
                    sigmoid_mean(g, y)
                },
                &[x],
                DEFAULT_EPS,
            ),
        )?;
    }

    {
        let x = rand_tensor(&mut rng, &[1, 2, 5, 5], -3.0, 3.0);
        push(
            "sigmoid",
            grad_check(|g, ids| sigmoid_mean(g, ids[0]), &[x], DEFAULT_EPS),
        )?;
    }

    {
        let a = rand_tensor(&mut rng, &[2, 2, 3, 3], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[2, 2, 3, 3], -1.0, 1.0);
        push(
            "add",
            grad_check(
                |g, ids| {
                    let y = g.add(ids[0], ids[1])?;
                    sigmoid_mean(g, y)
                },
                &[a, b],
                DEFAULT_EPS,
            ),
        )?;
    }

    {
        let x = rand_tensor(&mut rng, &[1, 2, 4, 4], -1.0, 1.0);
        push(
            "scale",
            grad_check(
                |g, ids| {
                    let y = g.scale(ids[0], -1.7)?;
                    sigmoid_mean(g, y)
                },
                &[x],
                DEFAULT_EPS,
            ),
        )?;
    }

    {
        let x = rand_tensor(&mut rng, &[1, 2, 4, 4], -1.0, 1.0);
        let gate = Tensor::scalar(0.8);
        push(
            "mul_scalar",
            grad_check(
                |g, ids| {
                    let y = g.mul_scalar(ids[0], ids[1])?;
                    sigmoid_mean(g, y)
                },
                &[x, gate],
                DEFAULT_EPS,
            ),
        )?;
    }

    {
        let x = rand_tensor(&mut rng, &[2, 3, 4, 4], -1.0, 1.0);
        push("mean", grad_check(|g, ids| g.mean(ids[0]), &[x], DEFAULT_EPS))?;
    }

    // batch norm, train and eval modes
    {
        let x = rand_tensor(&mut rng, &[2, 3, 4, 4], -2.0, 2.0);
        let gamma = rand_tensor(&mut rng, &[3], 0.5, 1.5);
        let beta = rand_tensor(&mut rng, &[3], -0.5, 0.5);
        push(
            "batchnorm2d_train",
            grad_check(
                |g, ids| {
                    let (y, _, _) = g.batchnorm_train(ids[0], ids[1], ids[2], 1e-5)?;
                    sigmoid_mean(g, y)
                },
                &[x.clone(), gamma.clone(), beta.clone()],
                DEFAULT_EPS,
            ),
        )?;
        let rm = vec![0.3, -0.2, 0.1];
        let rv = vec![1.4, 0.6, 0.9];
        push(
            "batchnorm2d_eval",
            grad_check(
                |g, ids| {
                    let y = g.batchnorm_eval(ids[0], ids[1], ids[2], &rm, &rv, 1e-5)?;
                    sigmoid_mean(g, y)
                },
                &[x, gamma, beta],
                DEFAULT_EPS,
            ),
        )?;
    }

    {
        let p = rand_tensor(&mut rng, &[1, 1, 4, 6], 0.05, 0.95);
        let gt = rand_mask(&mut rng, &[1, 1, 4, 6]);
        push(
            "bce",
            grad_check(|g, ids| bce_loss(g, ids[0], &gt), &[p], DEFAULT_EPS),
        )?;
    }

    {
        let p = rand_tensor(&mut rng, &[2, 1, 3, 4], 0.05, 0.95);
        let gt = rand_mask(&mut rng, &[2, 1, 3, 4]);
        push(
            "focal",
            grad_check(
                |g, ids| {
                    let maps = SideOutputs {
                        sides: [ids[0]; 6],
                        fused: ids[0],
                    };
                    weighted_focal_loss(g, &maps, &gt, &FocalParams::default())
                },
                &[p],
                DEFAULT_EPS,
            ),
        )?;
    }

    // --- composite blocks ---

    {
        let mut store = ParamStore::new();
        let blk = ConvBnRelu::new(&mut store, &mut rng, "cbr", 2, 3, 3, 2)?;
        let x = rand_tensor(&mut rng, &[1, 2, 6, 6], -1.0, 1.0);
        let mut worst = check_with_store(&store, Mode::Train, &[x.clone()], |p, ids| {
            let y = blk.forward(p, ids[0])?;
            sigmoid_mean(p.graph, y)
        })?;
        store.set_values("cbr.bn.running_mean", &[0.2, -0.1, 0.05])?;
        store.set_values("cbr.bn.running_var", &[1.3, 0.8, 1.1])?;
        worst = worst.max(check_with_store(&store, Mode::Eval, &[x], |p, ids| {
            let y = blk.forward(p, ids[0])?;
            sigmoid_mean(p.graph, y)
        })?);
        push("conv_bn_relu", Ok(worst))?;
    }

    {
        let mut store = ParamStore::new();
        let blk = Rsu::new(
            &mut store,
            &mut rng,
            "rsu4",
            RsuSpec {
                height: 4,
                c_in: 1,
                c_mid: 1,
                c_out: 1,
            },
        )?;
        let x = rand_tensor(&mut rng, &[1, 1, 8, 8], -1.0, 1.0);
        push(
            "rsu4",
            check_with_store(&store, Mode::Train, &[x], |p, ids| {
                let y = blk.forward(p, ids[0])?;
                sigmoid_mean(p.graph, y)
            }),
        )?;
    }

    {
        let mut store = ParamStore::new();
        let blk = Rsu4f::new(
            &mut store,
            &mut rng,
            "rsu4f",
            RsuSpec {
                height: 4,
                c_in: 1,
                c_mid: 1,
                c_out: 1,
            },
        )?;
        let x = rand_tensor(&mut rng, &[1, 1, 6, 6], -1.0, 1.0);
        push(
            "rsu4f",
            check_with_store(&store, Mode::Train, &[x], |p, ids| {
                let y = blk.forward(p, ids[0])?;
                sigmoid_mean(p.graph, y)
            }),
        )?;
    }

    {
        let mut store = ParamStore::new();
        let blk = ResConnect::new(&mut store, &mut rng, "rc", 2, 3)?;
        let x_in = distinct_tensor(&mut rng, &[1, 2, 5, 5]);
        let x_out = distinct_tensor(&mut rng, &[1, 3, 5, 5]);
        push(
            "res_connect",
            check_with_store(&store, Mode::Train, &[x_in, x_out], |p, ids| {
                let y = blk.forward(p, ids[0], ids[1])?;
                sigmoid_mean(p.graph, y)
            }),
        )?;
    }

    // deep supervision over a miniature fusion head: six 3x3 side convs on
    // a shared feature map plus the 1x1 fusion conv over their logits.
    {
        let mut store = ParamStore::new();
        let side_convs: Vec<ConvLayer> = (1..=6)
            .map(|i| ConvLayer::new(&mut store, &mut rng, &format!("side{i}"), 2, 1, 3))
            .collect::<Result<_>>()?;
        let fuse = ConvLayer::new(&mut store, &mut rng, "fuse", 6, 1, 1)?;
        let x = rand_tensor(&mut rng, &[1, 2, 6, 6], -1.0, 1.0);
        let gt = rand_mask(&mut rng, &[1, 1, 6, 6]);
        push(
            "deep_supervision_loss",
            check_with_store(&store, Mode::Eval, &[x], |p, ids| {
                let mut logits = Vec::new();
                for conv in &side_convs {
                    logits.push(conv.forward(p, ids[0])?);
                }
                let mut sides = [VarId(0); 6];
                for (i, &l) in logits.iter().enumerate() {
                    sides[i] = p.graph.sigmoid(l)?;
                }
                let cat = p.graph.concat_channels(&logits)?;
                let fused_logit = fuse.forward(p, cat)?;
                let fused = p.graph.sigmoid(fused_logit)?;
                deep_supervision_loss(p.graph, &SideOutputs { sides, fused }, &gt)
            }),
        )?;
    }

    if include_negative_control {
        let x = rand_tensor(&mut rng, &[1, 1, 4, 4], -1.0, 1.0);
        push(
            "broken_backward_fixture",
            grad_check(
                |g, ids| {
                    let y = broken_scale(g, ids[0])?;
                    sigmoid_mean(g, y)
                },
                &[x],
                DEFAULT_EPS,
            ),
        )?;
    }

    Ok(out)
}

/// True when every entry is under [`GRAD_TOL`].
pub fn suite_passes(entries: &[SuiteEntry]) -> bool {
    entries.iter().all(SuiteEntry::passed)
}
