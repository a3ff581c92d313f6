//! Model-level contracts: parameter budgets against an independent
//! per-layer enumeration, enumeration stability, and a couple of
//! loss/backward properties that span modules.

use nusg_core::blocks::Mode;
use nusg_core::loss::bce_loss;
use nusg_core::model::{stage_table, Arch, Model, StageKind, StageSpec};
use nusg_core::rng::SeededRng;
use nusg_core::tensor::{Graph, Tensor};

/// Layer-by-layer count written straight from the stage plan, kept
/// independent of the builder's own bookkeeping.
mod enumeration {
    use super::*;

    /// conv weights + bias + batchnorm gamma/beta
    fn cbr(c_in: usize, c_out: usize) -> usize {
        9 * c_in * c_out + c_out + 2 * c_out
    }

    fn rsu(height: usize, c_in: usize, c_mid: usize, c_out: usize) -> usize {
        let mut total = cbr(c_in, c_out); // stem
        total += cbr(c_out, c_mid); // enc1
        total += (height - 2) * cbr(c_mid, c_mid); // enc2..enc(L-1)
        total += cbr(c_mid, c_mid); // dilated bottom
        total += (height - 2) * cbr(2 * c_mid, c_mid); // dec(L-1)..dec2
        total += cbr(2 * c_mid, c_out); // dec1
        total
    }

    fn rsu4f(c_in: usize, c_mid: usize, c_out: usize) -> usize {
        cbr(c_in, c_out)
            + cbr(c_out, c_mid)
            + 3 * cbr(c_mid, c_mid)
            + 2 * cbr(2 * c_mid, c_mid)
            + cbr(2 * c_mid, c_out)
    }

    fn stage(s: &StageSpec) -> usize {
        match s.kind {
            StageKind::Regular(l) => rsu(l, s.c_in, s.c_mid, s.c_out),
            StageKind::Dilated => rsu4f(s.c_in, s.c_mid, s.c_out),
        }
    }

    fn side(c: usize) -> usize {
        9 * c + 1
    }

    fn res_connect(c_in: usize, c_out: usize) -> usize {
        (c_in * c_out + c_out) + (c_out * c_out + c_out) + 1
    }

    pub fn expected(arch: Arch) -> usize {
        let (enc, dec) = stage_table(arch);
        let mut total: usize = enc.iter().chain(dec.iter()).map(stage).sum();
        // sides read de1..de5 then en6
        for c in [
            dec[4].c_out,
            dec[3].c_out,
            dec[2].c_out,
            dec[1].c_out,
            dec[0].c_out,
            enc[5].c_out,
        ] {
            total += side(c);
        }
        total += 6 + 1; // 1x1 fusion conv over six logits
        if arch.has_res_connect() {
            for s in &enc[..5] {
                total += res_connect(s.c_in, s.c_out);
            }
        }
        total
    }
}

#[test]
fn parameter_counts_match_independent_enumeration() {
    let frozen = [
        (Arch::U2Net, 44_009_869usize),
        (Arch::ResU2Net, 45_057_490),
        (Arch::U2NetLite, 1_131_181),
        (Arch::ResU2NetLite, 1_168_882),
    ];
    for (arch, count) in frozen {
        assert_eq!(enumeration::expected(arch), count, "{} enumeration", arch.id());
        let model = Model::<f32>::build(arch, 0).unwrap();
        assert_eq!(model.param_count(), count, "{} builder", arch.id());
    }
}

#[test]
fn single_conv_param_arithmetic() {
    // one 3x3 1->1 conv with bias: 9 weights + 1 bias
    let mut store = nusg_core::params::ParamStore::<f32>::new();
    let mut rng = SeededRng::new(0);
    nusg_core::blocks::ConvLayer::new(&mut store, &mut rng, "only", 1, 1, 3).unwrap();
    assert_eq!(store.learnable_count(), 10);
}

#[test]
fn rsu7_stage_parameter_share() {
    let model = Model::<f32>::build(Arch::U2Net, 0).unwrap();
    // en1 is RSU-7(3, 32, 64); enumerated by hand:
    //   stem 3->64: 1728+64+128       = 1920
    //   enc1 64->32: 18432+32+64      = 18528
    //   enc2..enc6 32->32 (5x)        = 5 * 9312
    //   bottom 32->32                 = 9312
    //   dec6..dec2 64->32 (5x)        = 5 * 18528
    //   dec1 64->64: 36864+64+128     = 37056
    let expect = 1920 + 18528 + 5 * 9312 + 9312 + 5 * 18528 + 37056;
    assert_eq!(expect, 206_016);
    assert_eq!(model.store().learnable_count_with_prefix("en1."), expect);
}

#[test]
fn enumeration_order_is_stable_and_res_shares_prefix_stream() {
    let a = Model::<f32>::build(Arch::ResU2NetLite, 17).unwrap();
    let b = Model::<f32>::build(Arch::ResU2NetLite, 17).unwrap();
    let names_a: Vec<&str> = a.store().iter().map(|(_, p)| p.name.as_str()).collect();
    let names_b: Vec<&str> = b.store().iter().map(|(_, p)| p.name.as_str()).collect();
    assert_eq!(names_a, names_b);

    // soft-connection params are initialized after every shared tensor, so
    // a plain sibling with the same seed draws identical shared weights
    let plain = Model::<f32>::build(Arch::U2NetLite, 17).unwrap();
    for (_, p) in plain.store().iter() {
        let id = a.store().id(&p.name).expect("shared name");
        let other = a.store().tensor(id);
        assert!(p
            .tensor
            .data()
            .iter()
            .map(|v| v.to_bits())
            .eq(other.data().iter().map(|v| v.to_bits())), "{}", p.name);
    }
}

#[test]
fn backward_of_summed_losses_is_sum_of_backwards() {
    let mut rng = SeededRng::new(41);
    for trial in 0..2 {
        let x_data: Vec<f64> = (0..32).map(|_| rng.normal()).collect();
        let w_data: Vec<f64> = (0..18).map(|_| rng.normal() * 0.5).collect();
        let run = |mode: u8| -> (Vec<f64>, Vec<f64>) {
            let mut g = Graph::<f64>::new();
            let x = g.leaf(Tensor::new(&[1, 2, 4, 4], x_data.clone()).unwrap(), true);
            let w = g.leaf(Tensor::new(&[1, 2, 3, 3], w_data.clone()).unwrap(), true);
            let b = g.leaf(Tensor::new(&[1], vec![0.1]).unwrap(), true);
            let conv = g.conv2d(x, w, b, 1, 1, 1).unwrap();
            let s = g.sigmoid(conv).unwrap();
            let loss_a = g.mean(s).unwrap();
            let r = g.relu(conv).unwrap();
            let loss_b = g.mean(r).unwrap();
            match mode {
                0 => {
                    let total = g.add(loss_a, loss_b).unwrap();
                    g.backward(total).unwrap();
                }
                _ => {
                    // two separate passes accumulate additively
                    g.backward(loss_a).unwrap();
                    g.backward(loss_b).unwrap();
                }
            }
            (g.grad(x).unwrap().to_vec(), g.grad(w).unwrap().to_vec())
        };
        let (xa, wa) = run(0);
        let (xb, wb) = run(1);
        for (p, q) in xa.iter().zip(&xb).chain(wa.iter().zip(&wb)) {
            assert!((p - q).abs() < 1e-12, "trial {trial}: {p} vs {q}");
        }
    }
}

#[test]
fn constant_prediction_bce_is_minimized_at_foreground_rate() {
    let mut rng = SeededRng::new(4242);
    for _ in 0..3 {
        let gt_data: Vec<f64> = (0..64)
            .map(|_| if rng.uniform() < 0.37 { 1.0 } else { 0.0 })
            .collect();
        let mu = gt_data.iter().sum::<f64>() / 64.0;
        let gt = Tensor::new(&[1, 1, 8, 8], gt_data).unwrap();
        let mut best = (f64::INFINITY, 0.0);
        let mut p = 0.001;
        while p < 1.0 {
            let mut g = Graph::<f64>::new();
            let pred = g.constant(Tensor::full(&[1, 1, 8, 8], p));
            let l = bce_loss(&mut g, pred, &gt).unwrap();
            let v = g.value(l)[0];
            if v < best.0 {
                best = (v, p);
            }
            p += 0.001;
        }
        assert!((best.1 - mu).abs() <= 1.5e-3, "argmin {} vs mu {mu}", best.1);
    }
}

#[test]
fn eval_forward_is_deterministic_across_runs() {
    let model = Model::<f32>::build(Arch::U2NetLite, 2).unwrap();
    let mut rng = SeededRng::new(8);
    let data: Vec<f32> = (0..3 * 64 * 64).map(|_| rng.uniform() as f32).collect();
    let x = Tensor::new(&[1, 3, 64, 64], data).unwrap();
    let run = || {
        let mut g = Graph::new();
        let xid = g.constant(x.clone());
        let fwd = model.forward(&mut g, xid, Mode::Eval).unwrap();
        g.value(fwd.outputs.fused).to_vec()
    };
    let a = run();
    let b = run();
    assert!(a.iter().map(|v| v.to_bits()).eq(b.iter().map(|v| v.to_bits())));
}
