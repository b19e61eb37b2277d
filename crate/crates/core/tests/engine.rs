mod common;

use common::{example_cfg, example_layer, float_oracle, output_heads, random_sim_instance};
use mixq::engine::{
    dsp_pack_multiply, pot_shift_multiply, reference_matmul_heads, simulate_layer, PackedMode,
    SimPhase,
};
use mixq::matrix::Matrix;
use mixq::mixed::{quantize_activations, quantize_matrix, quantize_matrix_with_mask, Scheme};
use mixq::perf::layer_cycles;
use mixq::quant::{max_shift, BitWidths};
use mixq::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn int4_quad_exhaustive() {
    for w0 in -8..=7i64 {
        for w1 in -8..=7i64 {
            for a0 in -8..=7i64 {
                for a1 in -8..=7i64 {
                    let got = dsp_pack_multiply(PackedMode::Int4Quad, &[w0, w1], (a0, a1)).unwrap();
                    assert_eq!(got, vec![w0 * a0, w0 * a1, w1 * a0, w1 * a1]);
                }
            }
        }
    }
}

#[test]
fn int8_pair_all_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let corners = [
        (-128, -128),
        (-128, 127),
        (127, -128),
        (127, 127),
        (0, -128),
        (-1, -1),
    ];
    for w in -128..=127i64 {
        let random: Vec<(i64, i64)> = (0..1000)
            .map(|_| (rng.gen_range(-128..=127), rng.gen_range(-128..=127)))
            .collect();
        for &(a0, a1) in corners.iter().chain(&random) {
            let got = dsp_pack_multiply(PackedMode::Int8Pair, &[w], (a0, a1)).unwrap();
            assert_eq!(got, vec![w * a0, w * a1]);
        }
    }
}

#[test]
fn shift_matches_scaled_product() {
    for b in 2..=8u32 {
        for bp in 2..=b {
            let Ok(_) = BitWidths::new(b, bp) else {
                continue;
            };
            let l = (1i64 << (b - 1)) - 1;
            let e_max = max_shift(bp);
            for a in -l..=l {
                for e in 0..=e_max {
                    for sign in [-1i8, 1] {
                        let want = f64::from(sign)
                            * a as f64
                            * 2f64.powi(-(e as i32))
                            * 2f64.powi(e_max as i32);
                        assert_eq!(pot_shift_multiply(a, sign, e, b, bp).unwrap() as f64, want);
                    }
                }
            }
        }
    }
}

#[test]
fn example_layer_cycles_and_outputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let layer = example_layer();
    let cfg = example_cfg();
    let bits = BitWidths::aligned(4).unwrap();
    let qw = quantize_matrix(&common::uniform(&mut rng, 8, 8), bits, 0.5, 1).unwrap();
    let qa = quantize_activations(&common::uniform(&mut rng, 8, 4), 4).unwrap();
    let trace = simulate_layer(&layer, &cfg, &qw, &qa).unwrap();
    assert_eq!(trace.cycles.total, 24);
    assert_eq!(layer_cycles(&layer, &cfg).l_tot, 24);
    assert_eq!(trace.outputs, reference_matmul_heads(&qw, &qa, 1).unwrap());
}

#[test]
fn random_instances_match_reference_and_model() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..300 {
        let inst = random_sim_instance(&mut rng);
        let heads = output_heads(&inst.layer);
        let trace = simulate_layer(&inst.layer, &inst.cfg, &inst.qw, &inst.qa).unwrap();
        let reference = reference_matmul_heads(&inst.qw, &inst.qa, heads).unwrap();
        assert_eq!(trace.outputs, reference, "{:?} {:?}", inst.layer, inst.cfg);
        assert_eq!(
            trace.cycles.total,
            layer_cycles(&inst.layer, &inst.cfg).l_tot
        );
        let float = float_oracle(&inst.qw, &inst.qa, heads);
        for (x, y) in trace.outputs.dequantize().iter().zip(&float) {
            assert!((x - y).abs() <= 1e-9 * y.abs().max(1.0), "{x} vs {y}");
        }
    }
}

#[test]
fn trace_is_consistent() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let inst = random_sim_instance(&mut rng);
        let trace = simulate_layer(&inst.layer, &inst.cfg, &inst.qw, &inst.qa).unwrap();
        let groups = inst.layer.m.div_ceil(inst.cfg.t_m() as usize);
        let steps = inst
            .layer
            .n
            .div_ceil((inst.cfg.p_h * inst.cfg.t_n) as usize);
        let count = |p: SimPhase| trace.events.iter().filter(|e| e.phase == p).count();
        assert_eq!(count(SimPhase::Compute), groups * steps);
        assert_eq!(count(SimPhase::LoadInput), groups * steps);
        assert_eq!(count(SimPhase::Store), groups);
        assert!(trace
            .events
            .windows(2)
            .all(|w| w[0].start_cycle <= w[1].start_cycle));
        let end = trace.events.iter().map(|e| e.end_cycle).max().unwrap();
        assert_eq!(end, trace.cycles.total);
        // stores never overlap
        let mut stores: Vec<_> = trace
            .events
            .iter()
            .filter(|e| e.phase == SimPhase::Store)
            .collect();
        stores.sort_by_key(|e| e.start_cycle);
        assert!(stores
            .windows(2)
            .all(|w| w[0].end_cycle <= w[1].start_cycle));
        let parsed: serde_json::Value = serde_json::from_str(&trace.events_json()).unwrap();
        assert_eq!(parsed.as_array().unwrap().len(), trace.events.len());
    }
}

#[test]
fn fixed_only_tiling() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let layer = example_layer();
    let cfg = mixq::perf::TilingConfig {
        t_m_pot: 0,
        ..example_cfg()
    };
    for b in [4, 8] {
        let bits = BitWidths::aligned(b).unwrap();
        let qw = quantize_matrix(&common::uniform(&mut rng, 8, 8), bits, 0.0, 1).unwrap();
        let qa = quantize_activations(&common::uniform(&mut rng, 8, 4), b).unwrap();
        let trace = simulate_layer(&layer, &cfg, &qw, &qa).unwrap();
        assert_eq!(trace.outputs, reference_matmul_heads(&qw, &qa, 1).unwrap());
        assert_eq!(trace.cycles.total, layer_cycles(&layer, &cfg).l_tot);
    }
}

#[test]
fn too_many_fixed_rows_is_rejected() {
    let layer = mixq::workload::LayerDims::new("l", 4, 4, 2, 1, false).unwrap();
    let cfg = mixq::perf::TilingConfig {
        t_m_fix: 1,
        t_m_pot: 3,
        ..example_cfg()
    };
    let bits = BitWidths::aligned(4).unwrap();
    let w = Matrix::from_vec(4, 4, (0..16).map(|i| i as f64 - 7.5).collect()).unwrap();
    let qw = quantize_matrix_with_mask(&w, bits, &[Scheme::Fixed; 4]).unwrap();
    let qa = quantize_activations(&Matrix::from_vec(4, 2, vec![0.5; 8]).unwrap(), 4).unwrap();
    assert!(matches!(
        simulate_layer(&layer, &cfg, &qw, &qa),
        Err(Error::Domain(_))
    ));
    // PoT rows spill onto DSP lanes
    let qw = quantize_matrix_with_mask(&w, bits, &[Scheme::Pot; 4]).unwrap();
    let cfg = mixq::perf::TilingConfig {
        t_m_fix: 4,
        t_m_pot: 0,
        ..cfg
    };
    let trace = simulate_layer(&layer, &cfg, &qw, &qa).unwrap();
    assert_eq!(trace.outputs, reference_matmul_heads(&qw, &qa, 1).unwrap());
}

#[test]
fn shape_mismatch_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let bits = BitWidths::aligned(4).unwrap();
    let qw = quantize_matrix(&common::uniform(&mut rng, 8, 8), bits, 0.5, 1).unwrap();
    let qa = quantize_activations(&common::uniform(&mut rng, 8, 3), 4).unwrap();
    assert!(matches!(
        simulate_layer(&example_layer(), &example_cfg(), &qw, &qa),
        Err(Error::Shape(_))
    ));
}
