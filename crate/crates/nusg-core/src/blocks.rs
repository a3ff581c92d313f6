//! Composite blocks: conv+BN+ReLU unit, the RSU block family and the
//! residual soft-connection module that replaces plain skip connections.

use crate::params::{ParamId, ParamStore};
#[cfg(not(feature = "std"))] // inherent f64 methods replace this under std
use num_traits::Float as _;
use crate::rng::SeededRng;
use crate::tensor::{Graph, Real, Tensor, VarId};
use crate::{CoreError, Result};
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward pass over a graph: binds store parameters to graph leaves,
/// records which leaf belongs to which parameter, and collects the running
/// statistic updates produced by train-mode batch norm.
pub struct Pass<'a, T: Real> {
    pub graph: &'a mut Graph<T>,
    pub store: &'a ParamStore<T>,
    pub mode: Mode,
    pub bn_momentum: T,
    pub bindings: Vec<(ParamId, VarId)>,
    pub stat_updates: Vec<(ParamId, Vec<T>)>,
    overrides: BTreeMap<ParamId, VarId>,
}

impl<'a, T: Real> Pass<'a, T> {
    pub fn new(graph: &'a mut Graph<T>, store: &'a ParamStore<T>, mode: Mode) -> Self {
        Self {
            graph,
            store,
            mode,
            bn_momentum: T::fr(0.1),
            bindings: Vec::new(),
            stat_updates: Vec::new(),
            overrides: BTreeMap::new(),
        }
    }

    /// Route a parameter to an existing graph variable instead of a fresh
    /// leaf (used by the finite-difference harness).
    pub fn bind_override(&mut self, id: ParamId, var: VarId) {
        self.overrides.insert(id, var);
    }

    /// Graph leaf for a parameter; learnable entries request gradients.
    pub fn var(&mut self, id: ParamId) -> VarId {
        if let Some(&v) = self.overrides.get(&id) {
            return v;
        }
        let entry = self.store.get(id);
        let var = self.graph.leaf(entry.tensor.clone(), entry.learnable);
        if entry.learnable {
            self.bindings.push((id, var));
        }
        var
    }
}

fn kaiming_conv<T: Real>(
    store: &mut ParamStore<T>,
    rng: &mut SeededRng,
    name: &str,
    c_out: usize,
    c_in: usize,
    k: usize,
) -> Result<ParamId> {
    let fan_in = (c_in * k * k) as f64;
    let std = (2.0 / fan_in).sqrt();
    let data: Vec<T> = (0..c_out * c_in * k * k)
        .map(|_| rng.normal_scaled(std))
        .collect();
    store.add(name, Tensor::new(&[c_out, c_in, k, k], data)?, true)
}

/// Plain convolution layer (stride 1), bias, no norm or activation.
/// Used for side outputs, fusion and the soft-connection 1×1 convs.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: usize,
    pub dilation: usize,
}

impl ConvLayer {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut SeededRng,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
    ) -> Result<Self> {
        let w = kaiming_conv(store, rng, &format!("{prefix}.weight"), c_out, c_in, kernel)?;
        let b = store.add(&format!("{prefix}.bias"), Tensor::zeros(&[c_out]), true)?;
        Ok(Self {
            w,
            b,
            kernel,
            dilation: 1,
        })
    }

    pub fn forward<T: Real>(&self, p: &mut Pass<'_, T>, x: VarId) -> Result<VarId> {
        let w = p.var(self.w);
        let b = p.var(self.b);
        let pad = self.dilation * (self.kernel - 1) / 2;
        p.graph.conv2d(x, w, b, 1, pad, self.dilation)
    }
}

/// The unit block of every stage: 3×3 (or 1×1) convolution with
/// padding = dilation, batch norm, ReLU. Spatial extent is preserved.
#[derive(Debug, Clone)]
pub struct ConvBnRelu {
    pub w: ParamId,
    pub b: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub kernel: usize,
    pub dilation: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub eps: f64,
}

impl ConvBnRelu {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut SeededRng,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        dilation: usize,
    ) -> Result<Self> {
        let w = kaiming_conv(store, rng, &format!("{prefix}.conv.weight"), c_out, c_in, kernel)?;
        let b = store.add(&format!("{prefix}.conv.bias"), Tensor::zeros(&[c_out]), true)?;
        let gamma = store.add(&format!("{prefix}.bn.gamma"), Tensor::full(&[c_out], T::one()), true)?;
        let beta = store.add(&format!("{prefix}.bn.beta"), Tensor::zeros(&[c_out]), true)?;
        let running_mean =
            store.add(&format!("{prefix}.bn.running_mean"), Tensor::zeros(&[c_out]), false)?;
        let running_var =
            store.add(&format!("{prefix}.bn.running_var"), Tensor::full(&[c_out], T::one()), false)?;
        Ok(Self {
            w,
            b,
            gamma,
            beta,
            running_mean,
            running_var,
            kernel,
            dilation,
            c_in,
            c_out,
            eps: 1e-5,
        })
    }

    pub fn forward<T: Real>(&self, p: &mut Pass<'_, T>, x: VarId) -> Result<VarId> {
        let got_c = p.graph.shape(x).get(1).copied().unwrap_or(0);
        if got_c != self.c_in {
            return Err(CoreError::ShapeMismatch {
                op: "conv_bn_relu",
                detail: format!(
                    "expected {} input channels, got shape {:?}",
                    self.c_in,
                    p.graph.shape(x)
                ),
            });
        }
        let w = p.var(self.w);
        let b = p.var(self.b);
        let pad = self.dilation * (self.kernel - 1) / 2;
        let conv = p.graph.conv2d(x, w, b, 1, pad, self.dilation)?;
        let gamma = p.var(self.gamma);
        let beta = p.var(self.beta);
        let eps = T::fr(self.eps);
        let normed = match p.mode {
            Mode::Train => {
                let (y, mean, var) = p.graph.batchnorm_train(conv, gamma, beta, eps)?;
                let (n, _, h, w2) = {
                    let s = p.graph.shape(conv);
                    (s[0], s[1], s[2], s[3])
                };
                let m = n * h * w2;
                // Running stats blend in the unbiased batch variance.
                let unbias = if m > 1 {
                    T::fr(m as f64 / (m as f64 - 1.0))
                } else {
                    T::one()
                };
                let mom = p.bn_momentum;
                let one_m = T::one() - mom;
                let rm = p.store.tensor(self.running_mean).data();
                let rv = p.store.tensor(self.running_var).data();
                let new_rm: Vec<T> = rm.iter().zip(&mean).map(|(&r, &b)| one_m * r + mom * b).collect();
                let new_rv: Vec<T> = rv
                    .iter()
                    .zip(&var)
                    .map(|(&r, &b)| one_m * r + mom * b * unbias)
                    .collect();
                p.stat_updates.push((self.running_mean, new_rm));
                p.stat_updates.push((self.running_var, new_rv));
                y
            }
            Mode::Eval => {
                let rm = p.store.tensor(self.running_mean).data().to_vec();
                let rv = p.store.tensor(self.running_var).data().to_vec();
                p.graph.batchnorm_eval(conv, gamma, beta, &rm, &rv, eps)?
            }
        };
        p.graph.relu(normed)
    }
}

/// Shape of an RSU block: height plus channel plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RsuSpec {
    pub height: usize,
    pub c_in: usize,
    pub c_mid: usize,
    pub c_out: usize,
}

/// Regular RSU-L block: the in-block U-Net with 2×2 pooling on the way
/// down, ×2 bilinear upsampling on the way up, and the residual add of the
/// input projection.
#[derive(Debug, Clone)]
pub struct Rsu {
    pub spec: RsuSpec,
    stem: ConvBnRelu,
    enc: Vec<ConvBnRelu>,
    bottom: ConvBnRelu,
    dec: Vec<ConvBnRelu>,
    dec1: ConvBnRelu,
}

impl Rsu {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut SeededRng,
        prefix: &str,
        spec: RsuSpec,
    ) -> Result<Self> {
        if !(2..=7).contains(&spec.height) {
            return Err(CoreError::InvalidArg {
                op: "rsu",
                detail: format!("height {} outside supported range 2..=7", spec.height),
            });
        }
        let l = spec.height;
        let stem = ConvBnRelu::new(store, rng, &format!("{prefix}.stem"), spec.c_in, spec.c_out, 3, 1)?;
        let mut enc = Vec::new();
        enc.push(ConvBnRelu::new(store, rng, &format!("{prefix}.enc1"), spec.c_out, spec.c_mid, 3, 1)?);
        for i in 2..l {
            enc.push(ConvBnRelu::new(
                store,
                rng,
                &format!("{prefix}.enc{i}"),
                spec.c_mid,
                spec.c_mid,
                3,
                1,
            )?);
        }
        let bottom = ConvBnRelu::new(store, rng, &format!("{prefix}.bottom"), spec.c_mid, spec.c_mid, 3, 2)?;
        let mut dec = Vec::new();
        for i in (2..l).rev() {
            dec.push(ConvBnRelu::new(
                store,
                rng,
                &format!("{prefix}.dec{i}"),
                2 * spec.c_mid,
                spec.c_mid,
                3,
                1,
            )?);
        }
        let dec1 = ConvBnRelu::new(store, rng, &format!("{prefix}.dec1"), 2 * spec.c_mid, spec.c_out, 3, 1)?;
        Ok(Self {
            spec,
            stem,
            enc,
            bottom,
            dec,
            dec1,
        })
    }

    pub fn forward<T: Real>(&self, p: &mut Pass<'_, T>, x: VarId) -> Result<VarId> {
        let l = self.spec.height;
        let div = 1usize << (l - 2);
        let (h, w) = {
            let s = p.graph.shape(x);
            (s[s.len() - 2], s[s.len() - 1])
        };
        if h % div != 0 || w % div != 0 {
            return Err(CoreError::InvalidArg {
                op: "rsu",
                detail: format!(
                    "spatial dims {h}x{w} must be divisible by {div} for an RSU of height {l}"
                ),
            });
        }
        let stem = self.stem.forward(p, x)?;
        let mut encs = Vec::with_capacity(l - 1);
        let mut cur = self.enc[0].forward(p, stem)?;
        encs.push(cur);
        for blk in &self.enc[1..] {
            let pooled = p.graph.maxpool2d(cur, 2, 2, 0)?;
            cur = blk.forward(p, pooled)?;
            encs.push(cur);
        }
        let bottom = self.bottom.forward(p, *encs.last().unwrap())?;
        let mut d = bottom;
        for (i, blk) in self.dec.iter().enumerate() {
            // dec[0] pairs the bottom with the deepest encoder at the same
            // resolution; the rest upsample before pairing.
            let skip = encs[encs.len() - 1 - i];
            let lhs = if i == 0 {
                d
            } else {
                let s = p.graph.shape(skip);
                let (sh, sw) = (s[2], s[3]);
                p.graph.upsample_bilinear(d, sh, sw)?
            };
            let cat = p.graph.concat_channels(&[lhs, skip])?;
            d = blk.forward(p, cat)?;
        }
        let lhs = if l == 2 {
            d
        } else {
            let s = p.graph.shape(encs[0]);
            let (sh, sw) = (s[2], s[3]);
            p.graph.upsample_bilinear(d, sh, sw)?
        };
        let cat = p.graph.concat_channels(&[lhs, encs[0]])?;
        let d1 = self.dec1.forward(p, cat)?;
        p.graph.add(stem, d1)
    }
}

/// Dilated RSU variant: same wiring but dilation (1, 2, 4, 8) replaces all
/// pooling and resizing, so every layer runs at the input resolution.
#[derive(Debug, Clone)]
pub struct Rsu4f {
    pub spec: RsuSpec,
    stem: ConvBnRelu,
    enc1: ConvBnRelu,
    enc2: ConvBnRelu,
    enc3: ConvBnRelu,
    bottom: ConvBnRelu,
    dec3: ConvBnRelu,
    dec2: ConvBnRelu,
    dec1: ConvBnRelu,
}

impl Rsu4f {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut SeededRng,
        prefix: &str,
        spec: RsuSpec,
    ) -> Result<Self> {
        Ok(Self {
            spec,
            stem: ConvBnRelu::new(store, rng, &format!("{prefix}.stem"), spec.c_in, spec.c_out, 3, 1)?,
            enc1: ConvBnRelu::new(store, rng, &format!("{prefix}.enc1"), spec.c_out, spec.c_mid, 3, 1)?,
            enc2: ConvBnRelu::new(store, rng, &format!("{prefix}.enc2"), spec.c_mid, spec.c_mid, 3, 2)?,
            enc3: ConvBnRelu::new(store, rng, &format!("{prefix}.enc3"), spec.c_mid, spec.c_mid, 3, 4)?,
            bottom: ConvBnRelu::new(store, rng, &format!("{prefix}.bottom"), spec.c_mid, spec.c_mid, 3, 8)?,
            dec3: ConvBnRelu::new(store, rng, &format!("{prefix}.dec3"), 2 * spec.c_mid, spec.c_mid, 3, 4)?,
            dec2: ConvBnRelu::new(store, rng, &format!("{prefix}.dec2"), 2 * spec.c_mid, spec.c_mid, 3, 2)?,
            dec1: ConvBnRelu::new(store, rng, &format!("{prefix}.dec1"), 2 * spec.c_mid, spec.c_out, 3, 1)?,
        })
    }

    pub fn forward<T: Real>(&self, p: &mut Pass<'_, T>, x: VarId) -> Result<VarId> {
        let stem = self.stem.forward(p, x)?;
        let e1 = self.enc1.forward(p, stem)?;
        let e2 = self.enc2.forward(p, e1)?;
        let e3 = self.enc3.forward(p, e2)?;
        let b = self.bottom.forward(p, e3)?;
        let cat3 = p.graph.concat_channels(&[b, e3])?;
        let d3 = self.dec3.forward(p, cat3)?;
        let cat2 = p.graph.concat_channels(&[d3, e2])?;
        let d2 = self.dec2.forward(p, cat2)?;
        let cat1 = p.graph.concat_channels(&[d2, e1])?;
        let d1 = self.dec1.forward(p, cat1)?;
        p.graph.add(stem, d1)
    }
}

/// Residual soft connection: projects the stage input, fuses it with the
/// stage output, pools without downsampling (3×3, stride 1, -inf padding),
/// mixes channels with a 1×1 conv, and adds the result back through a
/// learnable scalar gate.
#[derive(Debug, Clone)]
pub struct ResConnect {
    pub proj: ConvLayer,
    pub mix: ConvLayer,
    pub gate: ParamId,
    pub c_in: usize,
    pub c_out: usize,
}

impl ResConnect {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut SeededRng,
        prefix: &str,
        c_in: usize,
        c_out: usize,
    ) -> Result<Self> {
        let proj = ConvLayer::new(store, rng, &format!("{prefix}.proj"), c_in, c_out, 1)?;
        let mix = ConvLayer::new(store, rng, &format!("{prefix}.mix"), c_out, c_out, 1)?;
        let gate = store.add(&format!("{prefix}.gate"), Tensor::scalar(T::one()), true)?;
        Ok(Self {
            proj,
            mix,
            gate,
            c_in,
            c_out,
        })
    }

    /// `x_in` is the original stage input, `x_out` the RSU output.
    pub fn forward<T: Real>(&self, p: &mut Pass<'_, T>, x_in: VarId, x_out: VarId) -> Result<VarId> {
        let (si, so) = (p.graph.shape(x_in), p.graph.shape(x_out));
        if si[0] != so[0] || si[2..] != so[2..] {
            return Err(CoreError::ShapeMismatch {
                op: "res_connect",
                detail: format!("input {si:?} and output {so:?} must share N, H, W"),
            });
        }
        let projected = self.proj.forward(p, x_in)?;
        let fused = p.graph.add(x_out, projected)?;
        let pooled = p.graph.maxpool2d(fused, 3, 1, 1)?;
        let mixed = self.mix.forward(p, pooled)?;
        let gate = p.var(self.gate);
        let gated = p.graph.mul_scalar(mixed, gate)?;
        p.graph.add(x_out, gated)
    }
}
