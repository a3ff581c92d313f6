//! The four model variants: full-size and lite nested-U networks, each with
//! an optional residual soft-connection wrapping on the encoder skips.
//!
//! Topology: six encoder stages (2×2 stride-2 pooling between them), five
//! decoder stages (×2 bilinear upsampling between them), one 3×3 side conv
//! per decoder stage plus the deepest encoder, and a 1×1 fusion conv over
//! the six upsampled side logits.

use crate::blocks::{ConvLayer, Mode, Pass, ResConnect, Rsu, Rsu4f, RsuSpec};
use crate::params::{ParamId, ParamStore};
use crate::rng::SeededRng;
use crate::tensor::{FlopCount, Graph, Real, Tensor, VarId};
use crate::{CoreError, Result};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    U2Net,
    ResU2Net,
    U2NetLite,
    ResU2NetLite,
}

impl Arch {
    pub const ALL: [Arch; 4] = [Arch::U2Net, Arch::ResU2Net, Arch::U2NetLite, Arch::ResU2NetLite];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "u2net" => Ok(Arch::U2Net),
            "res-u2net" => Ok(Arch::ResU2Net),
            "u2net-lite" => Ok(Arch::U2NetLite),
            "res-u2net-lite" => Ok(Arch::ResU2NetLite),
            _ => Err(CoreError::UnknownArch { name: s.to_string() }),
        }
    }

    pub fn id(&self) -> &'static str {
        match self {
            Arch::U2Net => "u2net",
            Arch::ResU2Net => "res-u2net",
            Arch::U2NetLite => "u2net-lite",
            Arch::ResU2NetLite => "res-u2net-lite",
        }
    }

    pub fn has_res_connect(&self) -> bool {
        matches!(self, Arch::ResU2Net | Arch::ResU2NetLite)
    }

    pub fn is_lite(&self) -> bool {
        matches!(self, Arch::U2NetLite | Arch::ResU2NetLite)
    }

    /// The non-res sibling sharing the same stage table.
    pub fn without_res(&self) -> Arch {
        match self {
            Arch::ResU2Net => Arch::U2Net,
            Arch::ResU2NetLite => Arch::U2NetLite,
            other => *other,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageKind {
    /// RSU with in-block pooling; the value is the height L.
    Regular(usize),
    /// Dilated RSU (no pooling), fixed height 4.
    Dilated,
}

#[derive(Debug, Clone, Copy)]
pub struct StageSpec {
    pub kind: StageKind,
    pub c_in: usize,
    pub c_mid: usize,
    pub c_out: usize,
}

impl StageSpec {
    const fn reg(l: usize, c_in: usize, c_mid: usize, c_out: usize) -> Self {
        Self {
            kind: StageKind::Regular(l),
            c_in,
            c_mid,
            c_out,
        }
    }

    const fn dil(c_in: usize, c_mid: usize, c_out: usize) -> Self {
        Self {
            kind: StageKind::Dilated,
            c_in,
            c_mid,
            c_out,
        }
    }
}

/// Encoder (6) and decoder (5, deepest first) stage plans.
pub fn stage_table(arch: Arch) -> ([StageSpec; 6], [StageSpec; 5]) {
    if arch.is_lite() {
        (
            [
                StageSpec::reg(7, 3, 16, 64),
                StageSpec::reg(6, 64, 16, 64),
                StageSpec::reg(5, 64, 16, 64),
                StageSpec::reg(4, 64, 16, 64),
                StageSpec::dil(64, 16, 64),
                StageSpec::dil(64, 16, 64),
            ],
            [
                StageSpec::dil(128, 16, 64),
                StageSpec::reg(4, 128, 16, 64),
                StageSpec::reg(5, 128, 16, 64),
                StageSpec::reg(6, 128, 16, 64),
                StageSpec::reg(7, 128, 16, 64),
            ],
        )
    } else {
        (
            [
                StageSpec::reg(7, 3, 32, 64),
                StageSpec::reg(6, 64, 32, 128),
                StageSpec::reg(5, 128, 64, 256),
                StageSpec::reg(4, 256, 128, 512),
                StageSpec::dil(512, 256, 512),
                StageSpec::dil(512, 256, 512),
            ],
            [
                StageSpec::dil(1024, 256, 512),
                StageSpec::reg(4, 1024, 128, 256),
                StageSpec::reg(5, 512, 64, 128),
                StageSpec::reg(6, 256, 32, 64),
                StageSpec::reg(7, 128, 16, 64),
            ],
        )
    }
}

enum Stage {
    Rsu(Rsu),
    Rsu4f(Rsu4f),
}

impl Stage {
    fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut SeededRng,
        prefix: &str,
        spec: &StageSpec,
    ) -> Result<Self> {
        let rs = RsuSpec {
            height: match spec.kind {
                StageKind::Regular(l) => l,
                StageKind::Dilated => 4,
            },
            c_in: spec.c_in,
            c_mid: spec.c_mid,
            c_out: spec.c_out,
        };
        Ok(match spec.kind {
            StageKind::Regular(_) => Stage::Rsu(Rsu::new(store, rng, prefix, rs)?),
            StageKind::Dilated => Stage::Rsu4f(Rsu4f::new(store, rng, prefix, rs)?),
        })
    }

    fn forward<T: Real>(&self, p: &mut Pass<'_, T>, x: VarId) -> Result<VarId> {
        match self {
            Stage::Rsu(b) => b.forward(p, x),
            Stage::Rsu4f(b) => b.forward(p, x),
        }
    }
}

/// The seven probability maps a forward pass produces: side outputs
/// s1..s5 from the decoder stages, s6 from the deepest encoder, plus the
/// fused map. All are N×1×H×W at the input resolution, values in (0, 1).
#[derive(Debug, Clone, Copy)]
pub struct SideOutputs {
    pub sides: [VarId; 6],
    pub fused: VarId,
}

impl SideOutputs {
    pub fn all(&self) -> [VarId; 7] {
        [
            self.sides[0],
            self.sides[1],
            self.sides[2],
            self.sides[3],
            self.sides[4],
            self.sides[5],
            self.fused,
        ]
    }
}

/// Result of [`Model::forward`]: output maps, parameter-to-leaf bindings
/// for the optimizer, and pending running-stat updates (train mode).
pub struct ForwardPass<T: Real> {
    pub outputs: SideOutputs,
    pub bindings: Vec<(ParamId, VarId)>,
    pub stat_updates: Vec<(ParamId, Vec<T>)>,
}

pub struct Model<T: Real> {
    arch: Arch,
    store: ParamStore<T>,
    encoders: Vec<Stage>,
    decoders: Vec<Stage>,
    sides: Vec<ConvLayer>,
    fuse: ConvLayer,
    res: Vec<ResConnect>,
}

impl<T: Real> Model<T> {
    /// Build a seeded model. Parameter enumeration order (and therefore
    /// checkpoint layout) is: encoders, decoders, side convs, fusion conv,
    /// then soft-connection modules — so res variants share the leading
    /// RNG stream with their plain siblings.
    pub fn build(arch: Arch, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = SeededRng::new(seed);
        let (enc_specs, dec_specs) = stage_table(arch);
        let mut encoders = Vec::new();
        for (i, s) in enc_specs.iter().enumerate() {
            encoders.push(Stage::new(&mut store, &mut rng, &format!("en{}", i + 1), s)?);
        }
        let mut decoders = Vec::new();
        for (i, s) in dec_specs.iter().enumerate() {
            decoders.push(Stage::new(&mut store, &mut rng, &format!("de{}", 5 - i), s)?);
        }
        let mut sides = Vec::new();
        let side_channels = [
            dec_specs[4].c_out, // de1
            dec_specs[3].c_out, // de2
            dec_specs[2].c_out, // de3
            dec_specs[1].c_out, // de4
            dec_specs[0].c_out, // de5
            enc_specs[5].c_out, // en6
        ];
        for (i, &c) in side_channels.iter().enumerate() {
            sides.push(ConvLayer::new(&mut store, &mut rng, &format!("side{}", i + 1), c, 1, 3)?);
        }
        let fuse = ConvLayer::new(&mut store, &mut rng, "fuse", 6, 1, 1)?;
        let mut res = Vec::new();
        if arch.has_res_connect() {
            for i in 0..5 {
                let c_in = enc_specs[i].c_in;
                let c_out = enc_specs[i].c_out;
                res.push(ResConnect::new(&mut store, &mut rng, &format!("res{}", i + 1), c_in, c_out)?);
            }
        }
        Ok(Self {
            arch,
            store,
            encoders,
            decoders,
            sides,
            fuse,
            res,
        })
    }

    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Learnable scalar count (running statistics excluded).
    pub fn param_count(&self) -> usize {
        self.store.learnable_count()
    }

    /// Size at 32-bit storage, in binary megabytes: count × 4 / 2^20.
    pub fn param_megabytes(&self) -> f64 {
        self.param_count() as f64 * 4.0 / (1u64 << 20) as f64
    }

    fn check_input(&self, shape: &[usize]) -> Result<(usize, usize, usize)> {
        let [n, c, h, w] = shape[..] else {
            return Err(CoreError::ShapeMismatch {
                op: "model_forward",
                detail: format!("expected N×3×H×W input, got {shape:?}"),
            });
        };
        if c != 3 {
            return Err(CoreError::ShapeMismatch {
                op: "model_forward",
                detail: format!("expected 3 input channels, got {shape:?}"),
            });
        }
        if h % 32 != 0 || w % 32 != 0 || h < 64 || w < 64 {
            return Err(CoreError::InvalidArg {
                op: "model_forward",
                detail: format!(
                    "spatial dims {h}x{w} must be at least 64 and divisible by 32"
                ),
            });
        }
        Ok((n, h, w))
    }

    /// Run the network. Train mode uses batch statistics in every batch
    /// norm and reports running-stat updates; eval mode reads the stored
    /// running statistics and is deterministic for a fixed input.
    pub fn forward(&self, graph: &mut Graph<T>, x: VarId, mode: Mode) -> Result<ForwardPass<T>> {
        let (_, h, w) = self.check_input(graph.shape(x))?;
        let mut pass = Pass::new(graph, &self.store, mode);
        let outputs = self.forward_in(&mut pass, x, h, w)?;
        Ok(ForwardPass {
            outputs,
            bindings: pass.bindings,
            stat_updates: pass.stat_updates,
        })
    }

    /// Forward over an existing pass (the gradient-check harness uses this
    /// to override parameter bindings).
    pub fn forward_in(&self, p: &mut Pass<'_, T>, x: VarId, h: usize, w: usize) -> Result<SideOutputs> {
        // Encoder chain; skips keep the (possibly wrapped) stage outputs.
        let mut skips = Vec::with_capacity(6);
        let mut cur = x;
        for (i, stage) in self.encoders.iter().enumerate() {
            let stage_in = cur;
            let out = stage.forward(p, stage_in)?;
            let skip = match self.res.get(i) {
                Some(rc) => rc.forward(p, stage_in, out)?,
                None => out,
            };
            skips.push(skip);
            if i + 1 < self.encoders.len() {
                // The next stage consumes the unwrapped output.
                cur = p.graph.maxpool2d(out, 2, 2, 0)?;
            } else {
                cur = out;
            }
        }

        // Decoder chain, deepest first. de5 pairs with the en5 skip.
        let mut dec_outs = Vec::with_capacity(5);
        let mut deeper = cur; // en6 output
        for (i, stage) in self.decoders.iter().enumerate() {
            let skip = skips[4 - i];
            let s = p.graph.shape(skip);
            let (sh, sw) = (s[2], s[3]);
            let up = p.graph.upsample_bilinear(deeper, sh, sw)?;
            let cat = p.graph.concat_channels(&[up, skip])?;
            let out = stage.forward(p, cat)?;
            dec_outs.push(out);
            deeper = out;
        }

        // Side logits: de1..de5 then en6, each 3×3 conv -> upsample -> sigmoid.
        let side_sources = [
            dec_outs[4],
            dec_outs[3],
            dec_outs[2],
            dec_outs[1],
            dec_outs[0],
            cur,
        ];
        let mut logits = Vec::with_capacity(6);
        for (conv, &src) in self.sides.iter().zip(&side_sources) {
            let logit = conv.forward(p, src)?;
            let s = p.graph.shape(logit);
            let up = if s[2] == h && s[3] == w {
                logit
            } else {
                p.graph.upsample_bilinear(logit, h, w)?
            };
            logits.push(up);
        }
        let mut sides = [VarId(0); 6];
        for (i, &l) in logits.iter().enumerate() {
            sides[i] = p.graph.sigmoid(l)?;
        }
        let cat = p.graph.concat_channels(&logits)?;
        let fused_logit = self.fuse.forward(p, cat)?;
        let fused = p.graph.sigmoid(fused_logit)?;
        Ok(SideOutputs { sides, fused })
    }

    /// Zero every soft-connection gate (res variants only); with all gates
    /// at zero the skip path degenerates to the plain connection.
    pub fn zero_gates(&mut self) -> usize {
        let mut n = 0;
        let names: Vec<String> = self
            .store
            .iter()
            .filter(|(_, p)| p.name.ends_with(".gate"))
            .map(|(_, p)| p.name.clone())
            .collect();
        for name in names {
            self.store.set_values(&name, &[T::zero()]).expect("gate exists");
            n += 1;
        }
        n
    }
}

/// Flop accounting: run one eval-mode forward at the given input shape with
/// the graph cost meter on; see [`crate::tensor::FLOP_CONVENTION`].
pub fn count_flops<T: Real>(model: &Model<T>, batch: usize, h: usize, w: usize) -> Result<FlopCount> {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[batch, 3, h, w]));
    model.forward(&mut g, x, Mode::Eval)?;
    Ok(g.cost())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arch_ids_round_trip() {
        for a in Arch::ALL {
            assert_eq!(Arch::parse(a.id()).unwrap(), a);
        }
        assert!(matches!(Arch::parse("foo"), Err(CoreError::UnknownArch { .. })));
    }

    #[test]
    fn same_seed_builds_identical_parameters() {
        let a = Model::<f32>::build(Arch::ResU2NetLite, 42).unwrap();
        let b = Model::<f32>::build(Arch::ResU2NetLite, 42).unwrap();
        assert_eq!(a.store().len(), b.store().len());
        for ((_, pa), (_, pb)) in a.store().iter().zip(b.store().iter()) {
            assert_eq!(pa.name, pb.name);
            assert_eq!(pa.tensor.shape(), pb.tensor.shape());
            assert_eq!(pa.learnable, pb.learnable);
            let ba = pa.tensor.data().iter().map(|v| v.to_bits());
            let bb = pb.tensor.data().iter().map(|v| v.to_bits());
            assert!(ba.eq(bb), "parameter {} differs", pa.name);
        }
    }

    #[test]
    fn different_seed_differs() {
        let a = Model::<f32>::build(Arch::U2NetLite, 1).unwrap();
        let b = Model::<f32>::build(Arch::U2NetLite, 2).unwrap();
        let wa = a.store().tensor(a.store().id("en1.stem.conv.weight").unwrap());
        let wb = b.store().tensor(b.store().id("en1.stem.conv.weight").unwrap());
        assert_ne!(wa.data(), wb.data());
    }

    #[test]
    fn rejects_bad_spatial_dims() {
        let m = Model::<f32>::build(Arch::U2NetLite, 0).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 3, 96, 100]));
        let err = m.forward(&mut g, x, Mode::Eval).err().unwrap();
        let msg = alloc::format!("{err}");
        assert!(msg.contains("divisible by 32"), "{msg}");
    }

    #[test]
    fn res_minus_plain_equals_res_module_params() {
        let plain = Model::<f32>::build(Arch::U2NetLite, 0).unwrap();
        let res = Model::<f32>::build(Arch::ResU2NetLite, 0).unwrap();
        let diff = res.param_count() - plain.param_count();
        assert!(diff > 0);
        let res_params: usize = (1..=5)
            .map(|i| res.store().learnable_count_with_prefix(&alloc::format!("res{i}.")))
            .sum();
        assert_eq!(diff, res_params);
    }
}
