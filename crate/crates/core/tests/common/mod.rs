//! Independent oracles and instance generators shared by the integration
//! tests and the acceptance suite.
#![allow(dead_code)]

use mixq::matrix::Matrix;
use mixq::mixed::{quantize_activations, quantize_matrix_with_mask, QuantizedRowMatrix, Scheme};
use mixq::perf::{
    check_constraints, model_fps, LutCostModel, Platform, ResourceBudget, TilingConfig,
    DEFAULT_FREQ_HZ,
};
use mixq::quant::{BitWidths, FixedQuantizedTensor};
use mixq::workload::{LayerDims, Workload};
use rand::seq::SliceRandom;
use rand::Rng;

/// The hand-checked layer and tiling: M=N=8, F=4, two lanes of each kind.
pub fn example_layer() -> LayerDims {
    LayerDims::new("example", 8, 8, 4, 1, false).unwrap()
}

pub fn example_cfg() -> TilingConfig {
    TilingConfig {
        t_m_fix: 2,
        t_m_pot: 2,
        t_n: 4,
        p_h: 1,
        d: 4,
        d_prime: 4,
        a_in: 1,
        a_wgt: 1,
        a_out: 1,
        freq_hz: DEFAULT_FREQ_HZ,
    }
}

/// PoT rows per head by sorting `(variance, index)` pairs; `k_pot = num/den`.
pub fn full_sort_pot_rows(variances: &[f64], num: usize, den: usize, n_heads: usize) -> Vec<bool> {
    let group = variances.len() / n_heads;
    let take = num * group / den;
    let mut pot = vec![false; variances.len()];
    for h in 0..n_heads {
        let mut idx: Vec<(f64, usize)> = (h * group..(h + 1) * group)
            .map(|i| (variances[i], i))
            .collect();
        idx.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        for &(_, i) in &idx[..take] {
            pot[i] = true;
        }
    }
    pot
}

pub fn random_bits(rng: &mut impl Rng) -> BitWidths {
    let b = rng.gen_range(2..=8);
    let valid: Vec<u32> = (2..=b).filter(|&bp| (1u32 << (bp - 1)) <= b).collect();
    BitWidths::new(b, *valid.choose(rng).unwrap()).unwrap()
}

pub struct SimInstance {
    pub layer: LayerDims,
    pub cfg: TilingConfig,
    pub qw: QuantizedRowMatrix,
    pub qa: FixedQuantizedTensor,
}

/// Small random layer, tiling and data whose scheme mix fits the lanes.
pub fn random_sim_instance(rng: &mut impl Rng) -> SimInstance {
    let bits = random_bits(rng);
    let n_heads = rng.gen_range(1..=4);
    let head_dim = rng.gen_range(1..=6);
    let m = rng.gen_range(1..=12);
    let f = rng.gen_range(1..=7);
    let multi = rng.gen_bool(0.3);
    let layer = LayerDims::new("rand", m, n_heads * head_dim, f, n_heads, multi).unwrap();
    let cfg = TilingConfig {
        t_m_fix: rng.gen_range(1..=5),
        t_m_pot: rng.gen_range(0..=4),
        t_n: rng.gen_range(1..=6),
        p_h: rng.gen_range(1..=4),
        d: rng.gen_range(1..=6),
        d_prime: rng.gen_range(1..=6),
        a_in: rng.gen_range(1..=3),
        a_wgt: rng.gen_range(1..=3),
        a_out: rng.gen_range(1..=3),
        freq_hz: DEFAULT_FREQ_HZ,
    };
    let groups = m.div_ceil(cfg.t_m() as usize);
    let max_fixed = m.min(cfg.t_m_fix as usize * groups);
    let n_fixed = rng.gen_range(0..=max_fixed);
    let mut mask: Vec<Scheme> = (0..m)
        .map(|i| {
            if i < n_fixed {
                Scheme::Fixed
            } else {
                Scheme::Pot
            }
        })
        .collect();
    mask.shuffle(rng);
    let w = uniform(rng, m, layer.n);
    let qw = quantize_matrix_with_mask(&w, bits, &mask).unwrap();
    let qa = quantize_activations(&uniform(rng, layer.n, f), bits.b()).unwrap();
    SimInstance { layer, cfg, qw, qa }
}

pub fn uniform(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Brute-force search context with explicit grid bounds.
pub struct Brute<'a> {
    pub workload: &'a Workload,
    pub budget: &'a ResourceBudget,
    pub lut: &'a LutCostModel,
    pub platform: &'a Platform,
    pub fix_max: u64,
    pub pot_max: u64,
}

impl Brute<'_> {
    pub fn cfg(&self, bits: BitWidths, t_fix: u64, t_pot: u64) -> TilingConfig {
        let p_h = (1..=4u64)
            .rev()
            .find(|&p| {
                self.workload
                    .layers
                    .iter()
                    .all(|l| (l.n_heads as u64).is_multiple_of(p))
            })
            .unwrap();
        let d = self.platform.axi_width / u64::from(bits.b());
        TilingConfig {
            t_m_fix: t_fix,
            t_m_pot: t_pot,
            t_n: d,
            p_h,
            d,
            d_prime: self.platform.axi_width / u64::from(bits.b_prime()),
            a_in: self.platform.a_in,
            a_wgt: self.platform.a_wgt,
            a_out: self.platform.a_out,
            freq_hz: self.platform.freq_hz,
        }
    }

    pub fn feasible(&self, bits: BitWidths, cfg: &TilingConfig) -> bool {
        check_constraints(cfg, bits, self.budget, self.lut, self.workload).is_empty()
    }

    /// All feasible `(t_fix, t_pot, fps)` of the box with `t_fix >= fix_min`.
    pub fn grid(&self, bits: BitWidths, fix_min: u64, pot_min: u64) -> Vec<(u64, u64, f64)> {
        let mut out = Vec::new();
        for t_fix in fix_min..=self.fix_max {
            for t_pot in pot_min..=self.pot_max {
                if t_fix + t_pot == 0 {
                    continue;
                }
                let cfg = self.cfg(bits, t_fix, t_pot);
                if self.feasible(bits, &cfg) {
                    out.push((t_fix, t_pot, model_fps(self.workload, &cfg).unwrap()));
                }
            }
        }
        out
    }

    /// Fastest point; ties by smaller PoT fraction, then smaller `t_fix`.
    pub fn argmax(&self, bits: BitWidths) -> Option<(u64, u64, f64)> {
        let k = |f: u64, p: u64| p as f64 / (f + p) as f64;
        self.grid(bits, 1, 0).into_iter().reduce(|best, c| {
            let better = c.2 > best.2
                || (c.2 == best.2 && k(c.0, c.1) < k(best.0, best.1))
                || (c.2 == best.2 && k(c.0, c.1) == k(best.0, best.1) && c.0 < best.0);
            if better {
                c
            } else {
                best
            }
        })
    }

    pub fn min_pot_at(&self, bits: BitWidths, t_fix: u64, target: f64) -> Option<u64> {
        self.grid(bits, 1, 0)
            .into_iter()
            .filter(|c| c.0 == t_fix && c.2 >= target)
            .map(|c| c.1)
            .min()
    }

    pub fn min_pot_anywhere(&self, bits: BitWidths, target: f64) -> Option<u64> {
        self.grid(bits, 1, 0)
            .into_iter()
            .filter(|c| c.2 >= target)
            .map(|c| c.1)
            .min()
    }
}

/// Random small workload with heads drawn from `{1, 2, 3, 4, 6}`.
pub fn random_workload(rng: &mut impl Rng) -> Workload {
    let heads = *[1usize, 2, 3, 4, 6].choose(rng).unwrap();
    let layers = (0..rng.gen_range(1..=3))
        .map(|i| {
            let multi = rng.gen_bool(0.3);
            LayerDims::new(
                format!("l{i}"),
                rng.gen_range(1..=40),
                heads * rng.gen_range(1..=24),
                rng.gen_range(1..=20),
                heads,
                multi,
            )
            .unwrap()
        })
        .collect();
    Workload::new("random", layers).unwrap()
}

pub fn random_platform(rng: &mut impl Rng) -> Platform {
    Platform {
        axi_width: *[16u64, 32, 64].choose(rng).unwrap(),
        a_in: rng.gen_range(1..=4),
        a_wgt: rng.gen_range(1..=4),
        a_out: rng.gen_range(1..=4),
        freq_hz: DEFAULT_FREQ_HZ,
    }
}

pub fn random_budget(rng: &mut impl Rng) -> (ResourceBudget, LutCostModel) {
    let budget = ResourceBudget {
        s_bram: rng.gen_range(20..=2000),
        s_dsp: rng.gen_range(4..=600),
        s_lut: rng.gen_range(2_000..=100_000),
        r_dsp: rng.gen_range(0.3..=1.0),
        r_lut: rng.gen_range(0.3..=1.0),
    };
    let lut = LutCostModel {
        c_lut_fix: rng.gen_range(1.0..30.0),
        c_lut_pot: rng.gen_range(1.0..40.0),
        c_lut_base: rng.gen_range(0.0..1_000.0),
    };
    (budget, lut)
}

/// Dequantize-then-multiply in floating point, heads split as in the engine.
pub fn float_oracle(qw: &QuantizedRowMatrix, qa: &FixedQuantizedTensor, heads: usize) -> Vec<f64> {
    let w = qw.dequantize();
    let a = qa.dequantize();
    let (m, n) = qw.shape();
    let f = qa.shape.1;
    let hd = n / heads;
    let mut out = vec![0.0; heads * m * f];
    for h in 0..heads {
        for i in 0..m {
            for j in 0..f {
                out[(h * m + i) * f + j] = (h * hd..(h + 1) * hd)
                    .map(|k| w.get(i, k) * a[k * f + j])
                    .sum();
            }
        }
    }
    out
}

/// Heads that write separate outputs for `layer`.
pub fn output_heads(layer: &LayerDims) -> usize {
    if layer.is_attention_multi_out {
        layer.n_heads
    } else {
        1
    }
}

/// Seeded reference toy: one 4x4 layer, 32 samples, 200 full-batch steps.
pub fn reference_qat(
    k_pot: f64,
    learning_rate: f64,
) -> (
    mixq::mixed::ToyModel,
    mixq::mixed::ToyDataset,
    mixq::mixed::QatConfig,
) {
    use mixq::mixed::{QatConfig, ToyDataset, ToyModel};
    let seed = 7;
    let layer = LayerDims::new("layer0", 4, 4, 32, 1, false).unwrap();
    let model = ToyModel::from_schedule(&[layer], seed).unwrap();
    let data = ToyDataset::synthetic(4, 4, 32, seed).unwrap();
    let cfg = QatConfig {
        bits: BitWidths::aligned(8).unwrap(),
        k_pot,
        epochs: 200,
        batch_size: None,
        learning_rate,
        seed,
    };
    (model, data, cfg)
}

/// Every row's codes are in range and its values sit on the row's grid.
pub fn on_grid(qw: &QuantizedRowMatrix) -> bool {
    use mixq::quant::{fixed_levels, max_shift, QuantizedRow};
    let bits = qw.bits();
    qw.rows().iter().all(|row| match row {
        QuantizedRow::Fixed(r) => {
            let l = f64::from(fixed_levels(bits.b()));
            r.in_range()
                && r.dequantize().iter().all(|v| {
                    let x = v * l / r.scale;
                    (x - x.round()).abs() < 1e-9
                })
        }
        QuantizedRow::Pot(r) => {
            let grid: Vec<f64> = (0..=max_shift(bits.b_prime()))
                .map(|e| r.scale * 2f64.powi(-(e as i32)))
                .collect();
            r.in_range()
                && r.dequantize()
                    .iter()
                    .all(|v| *v == 0.0 || grid.contains(&v.abs()))
        }
    })
}
