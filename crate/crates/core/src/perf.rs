//! Closed-form latency and resource model of the tiled compute engine.
//!
//! Per layer, one tile step loads `P_h·T_n` input channels and the weights
//! of `T_m^Fix + T_m^PoT` output channels while computing the previous
//! step. Cycle counts are exact integers; only FPS is real-valued.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::quant::BitWidths;
use crate::workload::{LayerDims, Workload};

/// Capacity of one block RAM in bits.
pub const BRAM_BITS: u64 = 18_000;

/// Operating clock of the reference designs.
pub const DEFAULT_FREQ_HZ: u64 = 150_000_000;

/// Accelerator hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TilingConfig {
    /// Output channels per tile on DSP (fixed-point) lanes.
    pub t_m_fix: u64,
    /// Output channels per tile on LUT (power-of-two) lanes.
    pub t_m_pot: u64,
    /// Input channels per head per tile.
    pub t_n: u64,
    /// Heads processed in parallel.
    pub p_h: u64,
    /// Values packed per AXI word for activations and fixed-point weights.
    pub d: u64,
    /// Values packed per AXI word for PoT weights.
    pub d_prime: u64,
    pub a_in: u64,
    pub a_wgt: u64,
    pub a_out: u64,
    pub freq_hz: u64,
}

impl TilingConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("t_n", self.t_n),
            ("p_h", self.p_h),
            ("d", self.d),
            ("d_prime", self.d_prime),
            ("a_in", self.a_in),
            ("a_wgt", self.a_wgt),
            ("a_out", self.a_out),
            ("freq_hz", self.freq_hz),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(domain(format!("tiling field {name} must be ≥ 1")));
        }
        if self.t_m() == 0 {
            return Err(domain("t_m_fix + t_m_pot must be ≥ 1"));
        }
        Ok(())
    }

    /// Total output-channel parallelism.
    pub fn t_m(&self) -> u64 {
        self.t_m_fix + self.t_m_pot
    }

    /// Fraction of output lanes that are PoT.
    pub fn k_pot(&self) -> f64 {
        self.t_m_pot as f64 / self.t_m() as f64
    }

    /// Parallel MAC lanes.
    pub fn macs_per_cycle(&self) -> u64 {
        self.t_m() * self.p_h * self.t_n
    }
}

/// Board-level parameters that the tiling is derived from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Platform {
    pub axi_width: u64,
    pub a_in: u64,
    pub a_wgt: u64,
    pub a_out: u64,
    pub freq_hz: u64,
}

impl Default for Platform {
    fn default() -> Self {
        Platform {
            axi_width: 64,
            a_in: 1,
            a_wgt: 1,
            a_out: 1,
            freq_hz: DEFAULT_FREQ_HZ,
        }
    }
}

impl Platform {
    /// Packing factor for `b`-bit data on one AXI word.
    pub fn pack(&self, bits: u32) -> u64 {
        (self.axi_width / u64::from(bits)).max(1)
    }

    /// Tiling with `D = axi/b`, `D' = axi/b'` and `T_n = D`.
    pub fn tiling(&self, bits: BitWidths, p_h: u64, t_m_fix: u64, t_m_pot: u64) -> TilingConfig {
        let d = self.pack(bits.b());
        TilingConfig {
            t_m_fix,
            t_m_pot,
            t_n: d,
            p_h,
            d,
            d_prime: self.pack(bits.b_prime()),
            a_in: self.a_in,
            a_wgt: self.a_wgt,
            a_out: self.a_out,
            freq_hz: self.freq_hz,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResourceBudget {
    /// 18k-bit BRAMs.
    pub s_bram: u64,
    pub s_dsp: u64,
    pub s_lut: u64,
    pub r_dsp: f64,
    pub r_lut: f64,
}

impl ResourceBudget {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [("r_dsp", self.r_dsp), ("r_lut", self.r_lut)] {
            if !(r > 0.0 && r <= 1.0) {
                return Err(domain(format!("{name}={r} outside (0, 1]")));
            }
        }
        Ok(())
    }

    pub fn dsp_limit(&self) -> f64 {
        self.s_dsp as f64 * self.r_dsp
    }

    pub fn lut_limit(&self) -> f64 {
        self.s_lut as f64 * self.r_lut
    }
}

/// Linear LUT cost per MAC lane.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LutCostModel {
    pub c_lut_fix: f64,
    pub c_lut_pot: f64,
    pub c_lut_base: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileLatencies {
    pub l_in: u64,
    pub l_wgt: u64,
    pub l_out: u64,
    pub l_cmpt: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencyBreakdown {
    pub l_in: u64,
    pub l_wgt: u64,
    pub l_out: u64,
    pub l_cmpt: u64,
    pub l1: u64,
    pub l2: u64,
    pub l_tot: u64,
}

pub fn tile_latencies(layer: &LayerDims, cfg: &TilingConfig) -> TileLatencies {
    let f = layer.f as u64;
    let n_h = layer.n_heads as u64;
    let in_words = cfg.t_n.div_ceil(cfg.d);
    let l_in = cfg.p_h * in_words * f.div_ceil(cfg.a_in);
    let l_wgt = cfg.p_h
        * (in_words * cfg.t_m_fix.div_ceil(cfg.a_wgt)
            + cfg.t_n.div_ceil(cfg.d_prime) * cfg.t_m_pot.div_ceil(cfg.a_wgt));
    let l_out = (1 + layer.gamma() as u64) * cfg.t_m().div_ceil(cfg.d) * f.div_ceil(cfg.a_out);
    // two activations per cycle feed each packed DSP
    let l_cmpt = f.div_ceil(2) * n_h.div_ceil(cfg.p_h);
    TileLatencies {
        l_in,
        l_wgt,
        l_out,
        l_cmpt,
    }
}

pub fn layer_cycles(layer: &LayerDims, cfg: &TilingConfig) -> LatencyBreakdown {
    let TileLatencies {
        l_in,
        l_wgt,
        l_out,
        l_cmpt,
    } = tile_latencies(layer, cfg);
    let l1 = l_in.max(l_wgt).max(l_cmpt);
    let n_steps = (layer.n as u64).div_ceil(cfg.p_h * cfg.t_n);
    let l2 = (l1 * n_steps + l_cmpt).max(l_out);
    let l_tot = (layer.m as u64).div_ceil(cfg.t_m()) * l2 + l_out;
    LatencyBreakdown {
        l_in,
        l_wgt,
        l_out,
        l_cmpt,
        l1,
        l2,
        l_tot,
    }
}

/// Cycles for one frame, host cycles included.
pub fn workload_cycles(workload: &Workload, cfg: &TilingConfig) -> u64 {
    workload
        .layers
        .iter()
        .map(|l| layer_cycles(l, cfg).l_tot + workload.host_cycles_per_layer)
        .sum()
}

pub fn model_fps(workload: &Workload, cfg: &TilingConfig) -> Result<f64> {
    if workload.layers.is_empty() {
        return Err(domain("empty workload"));
    }
    cfg.validate()?;
    Ok(cfg.freq_hz as f64 / workload_cycles(workload, cfg) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BramUsage {
    pub b_in: u64,
    pub b_wgt: u64,
    pub b_out: u64,
}

impl BramUsage {
    pub fn total(&self) -> u64 {
        self.b_in + self.b_wgt + self.b_out
    }
}

/// Double-buffered tile storage for the largest `F` and `N_h` in the workload.
pub fn bram_usage(
    cfg: &TilingConfig,
    bits: BitWidths,
    max_f: usize,
    max_heads: usize,
) -> BramUsage {
    let b = u64::from(bits.b());
    let bp = u64::from(bits.b_prime());
    let f = max_f as u64;
    let in_words = cfg.t_n.div_ceil(cfg.d);
    let act_brams = (b * f * cfg.d).div_ceil(BRAM_BITS);
    let b_in = 2 * cfg.p_h * in_words * act_brams;
    let b_wgt = 2
        * cfg.p_h
        * (in_words * (b * cfg.t_m_fix * cfg.d).div_ceil(BRAM_BITS)
            + cfg.t_n.div_ceil(cfg.d_prime) * (bp * cfg.t_m_pot * cfg.d_prime).div_ceil(BRAM_BITS));
    let b_out = 2 * max_heads as u64 * cfg.t_m().div_ceil(cfg.d) * act_brams;
    BramUsage { b_in, b_wgt, b_out }
}

/// DSPs per fixed-point multiplication: four W4A4 or two W8A8 products share
/// one DSP.
pub fn dsp_per_mac(bits: BitWidths) -> f64 {
    if bits.b() <= 4 {
        0.25
    } else {
        0.5
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComputeUsage {
    pub dsp: f64,
    pub lut: f64,
}

pub fn compute_resource_usage(
    cfg: &TilingConfig,
    bits: BitWidths,
    lut: &LutCostModel,
) -> ComputeUsage {
    let lanes = (cfg.p_h * cfg.t_n) as f64;
    ComputeUsage {
        dsp: dsp_per_mac(bits) * cfg.t_m_fix as f64 * lanes,
        lut: (lut.c_lut_fix * cfg.t_m_fix as f64 + lut.c_lut_pot * cfg.t_m_pot as f64) * lanes
            + lut.c_lut_base,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Resource {
    Bram,
    Dsp,
    Lut,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub resource: Resource,
    pub used: f64,
    pub limit: f64,
    pub overshoot: f64,
}

/// BRAM, DSP and LUT inequalities; an empty list means the design fits.
pub fn check_constraints(
    cfg: &TilingConfig,
    bits: BitWidths,
    budget: &ResourceBudget,
    lut: &LutCostModel,
    workload: &Workload,
) -> Vec<Violation> {
    let bram = bram_usage(cfg, bits, workload.max_f(), workload.max_heads()).total() as f64;
    let usage = compute_resource_usage(cfg, bits, lut);
    [
        (Resource::Bram, bram, budget.s_bram as f64),
        (Resource::Dsp, usage.dsp, budget.dsp_limit()),
        (Resource::Lut, usage.lut, budget.lut_limit()),
    ]
    .into_iter()
    .filter(|(_, used, limit)| used > limit)
    .map(|(resource, used, limit)| Violation {
        resource,
        used,
        limit,
        overshoot: used - limit,
    })
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example_layer() -> LayerDims {
        LayerDims::new("ex", 8, 8, 4, 1, false).unwrap()
    }

    fn example_cfg() -> TilingConfig {
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

    fn b4() -> BitWidths {
        BitWidths::new(4, 3).unwrap()
    }

    #[test]
    fn tile_latency_examples() {
        let t = tile_latencies(&example_layer(), &example_cfg());
        assert_eq!((t.l_in, t.l_wgt, t.l_out, t.l_cmpt), (4, 4, 4, 2));

        let mut multi = example_layer();
        multi.is_attention_multi_out = true;
        assert_eq!(tile_latencies(&multi, &example_cfg()).l_out, 4);

        let cfg = TilingConfig {
            a_in: 4,
            ..example_cfg()
        };
        assert_eq!(tile_latencies(&example_layer(), &cfg).l_in, 1);
    }

    #[test]
    fn layer_cycle_examples() {
        let l = layer_cycles(&example_layer(), &example_cfg());
        assert_eq!((l.l1, l.l2, l.l_tot), (4, 10, 24));

        // one tile group in each dimension
        let small = LayerDims::new("s", 4, 4, 4, 1, false).unwrap();
        let l = layer_cycles(&small, &example_cfg());
        assert_eq!(l.l_tot, (l.l1 + l.l_cmpt).max(l.l_out) + l.l_out);

        let cfg = TilingConfig {
            a_out: 2,
            ..example_cfg()
        };
        assert!(layer_cycles(&example_layer(), &cfg).l_tot <= 24);
    }

    #[test]
    fn fps_examples() {
        let one = Workload::new("ex", vec![example_layer()]).unwrap();
        assert_eq!(model_fps(&one, &example_cfg()).unwrap(), 6.25e6);
        let two = Workload::new("ex", vec![example_layer(), example_layer()]).unwrap();
        assert_eq!(model_fps(&two, &example_cfg()).unwrap(), 6.25e6 / 2.0);
        let empty = Workload {
            variant: "x".into(),
            layers: vec![],
            host_cycles_per_layer: 0,
        };
        assert!(model_fps(&empty, &example_cfg()).is_err());

        let mut host = one.clone();
        host.host_cycles_per_layer = 6;
        assert_eq!(model_fps(&host, &example_cfg()).unwrap(), 1.5e8 / 30.0);
    }

    #[test]
    fn bram_examples() {
        let u = bram_usage(&example_cfg(), b4(), 4, 1);
        assert_eq!((u.b_in, u.b_wgt, u.b_out), (2, 4, 2));

        let no_pot = TilingConfig {
            t_m_pot: 0,
            ..example_cfg()
        };
        assert_eq!(bram_usage(&no_pot, b4(), 4, 1).b_wgt, 2);

        let wide = TilingConfig {
            p_h: 2,
            ..example_cfg()
        };
        let w = bram_usage(&wide, b4(), 4, 1);
        assert_eq!((w.b_in, w.b_wgt), (4, 8));
    }

    #[test]
    fn compute_usage_examples() {
        let zero = LutCostModel::default();
        let u = compute_resource_usage(&example_cfg(), b4(), &zero);
        assert_eq!(u.dsp, 2.0);
        assert_eq!(u.lut, 0.0);
        let u = compute_resource_usage(&example_cfg(), BitWidths::new(8, 4).unwrap(), &zero);
        assert_eq!(u.dsp, 4.0);
        let lut = LutCostModel {
            c_lut_fix: 10.0,
            c_lut_pot: 30.0,
            c_lut_base: 100.0,
        };
        assert_eq!(
            compute_resource_usage(&example_cfg(), b4(), &lut).lut,
            420.0
        );
    }

    #[test]
    fn constraint_examples() {
        let w = Workload::new("ex", vec![example_layer()]).unwrap();
        let zcu102 = ResourceBudget {
            s_bram: 1824,
            s_dsp: 2520,
            s_lut: 274_080,
            r_dsp: 1.0,
            r_lut: 1.0,
        };
        let lut = LutCostModel {
            c_lut_fix: 10.0,
            c_lut_pot: 30.0,
            c_lut_base: 0.0,
        };
        assert!(check_constraints(&example_cfg(), b4(), &zcu102, &lut, &w).is_empty());

        let one_dsp = ResourceBudget { s_dsp: 1, ..zcu102 };
        let v = check_constraints(&example_cfg(), b4(), &one_dsp, &lut, &w);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].resource, Resource::Dsp);
        assert_eq!(v[0].overshoot, 1.0);

        // 320 LUTs fit in 400 but not in 400 * 0.5
        let tight = ResourceBudget {
            s_lut: 400,
            ..zcu102
        };
        assert!(check_constraints(&example_cfg(), b4(), &tight, &lut, &w).is_empty());
        let half = ResourceBudget {
            r_lut: 0.5,
            ..tight
        };
        let v = check_constraints(&example_cfg(), b4(), &half, &lut, &w);
        assert_eq!(v[0].resource, Resource::Lut);
        assert_eq!(v[0].overshoot, 120.0);
    }

    #[test]
    fn usage_is_linear_in_parallel_heads() {
        let lut = LutCostModel {
            c_lut_fix: 3.0,
            c_lut_pot: 7.0,
            c_lut_base: 0.0,
        };
        let one = example_cfg();
        let two = TilingConfig { p_h: 2, ..one };
        let (u1, u2) = (
            compute_resource_usage(&one, b4(), &lut),
            compute_resource_usage(&two, b4(), &lut),
        );
        assert_eq!(u2.dsp, 2.0 * u1.dsp);
        assert_eq!(u2.lut, 2.0 * u1.lut);
    }

    #[test]
    fn validation() {
        assert!(example_cfg().validate().is_ok());
        let bad = TilingConfig {
            t_m_fix: 0,
            t_m_pot: 0,
            ..example_cfg()
        };
        assert!(bad.validate().is_err());
        let pot_only = TilingConfig {
            t_m_fix: 0,
            ..example_cfg()
        };
        assert!(pot_only.validate().is_ok());
        assert_eq!(pot_only.k_pot(), 1.0);
    }
}
