//! Design-space exploration: bit-widths, tiling and PoT ratio for a target
//! frame rate.
//!
//! For each bit-width band the packing factors follow from the AXI width
//! (`D = axi/b`, `D' = axi/b'`, `T_n = D`) and `P_h` from the head counts.
//! The remaining free parameters are the lane counts `(T_m^Fix, T_m^PoT)`,
//! searched exhaustively inside the box allowed by the DSP and LUT budgets.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::calibration::Calibration;
use crate::error::{domain, Result};
use crate::perf::{
    check_constraints, dsp_per_mac, workload_cycles, LutCostModel, Platform, ResourceBudget,
    TilingConfig,
};
use crate::quant::BitWidths;
use crate::workload::Workload;

/// Largest `P_h <= 4` dividing every head count.
pub fn select_parallel_heads(n_heads: &[usize]) -> u64 {
    (1..=4u64)
        .rev()
        .find(|&p| n_heads.iter().all(|&h| (h as u64).is_multiple_of(p)))
        .unwrap_or(1)
}

/// Which lane types a design may instantiate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SchemeSpace {
    /// `T_m^Fix >= 1`, `T_m^PoT >= 0`.
    #[default]
    Mixed,
    /// `T_m^PoT = 0`.
    FixedOnly,
    /// `T_m^Fix = 0`.
    PotOnly,
}

/// Optional caps on the lane counts, applied on top of the budget bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GridLimits {
    pub t_m_fix_max: Option<u64>,
    pub t_m_pot_max: Option<u64>,
}

/// Everything a search needs besides the bit-widths.
#[derive(Debug, Clone, Copy)]
pub struct SearchSpace<'a> {
    pub workload: &'a Workload,
    pub budget: &'a ResourceBudget,
    pub lut: &'a LutCostModel,
    pub platform: &'a Platform,
    pub limits: GridLimits,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DesignPoint {
    pub cfg: TilingConfig,
    pub cycles: u64,
    pub fps: f64,
}

impl DesignPoint {
    fn new(workload: &Workload, cfg: TilingConfig) -> Self {
        let cycles = workload_cycles(workload, &cfg);
        DesignPoint {
            cfg,
            cycles,
            fps: cfg.freq_hz as f64 / cycles as f64,
        }
    }
}

/// Higher FPS first, then smaller `k_pot`, then smaller `T_m^Fix`.
fn rank(a: &DesignPoint, b: &DesignPoint) -> Ordering {
    let k = |p: &DesignPoint| (p.cfg.t_m_pot, p.cfg.t_m());
    let (ap, at) = k(a);
    let (bp, bt) = k(b);
    a.cycles
        .cmp(&b.cycles)
        .then((u128::from(ap) * u128::from(bt)).cmp(&(u128::from(bp) * u128::from(at))))
        .then(a.cfg.t_m_fix.cmp(&b.cfg.t_m_fix))
}

impl SearchSpace<'_> {
    fn tiling(&self, bits: BitWidths, t_fix: u64, t_pot: u64) -> TilingConfig {
        let heads: Vec<usize> = self.workload.layers.iter().map(|l| l.n_heads).collect();
        self.platform
            .tiling(bits, select_parallel_heads(&heads), t_fix, t_pot)
    }

    /// Inclusive upper bounds on `(T_m^Fix, T_m^PoT)` implied by the DSP and
    /// LUT budgets, the largest layer and the caps.
    pub fn bounds(&self, bits: BitWidths) -> (u64, u64) {
        let probe = self.tiling(bits, 0, 0);
        let lanes = (probe.p_h * probe.t_n) as f64;
        let max_m = self
            .workload
            .layers
            .iter()
            .map(|l| l.m as u64)
            .max()
            .unwrap_or(0);
        let fix = (self.budget.dsp_limit() / (dsp_per_mac(bits) * lanes)).floor();
        let lut_room = self.budget.lut_limit() - self.lut.c_lut_base;
        let pot = if self.lut.c_lut_pot > 0.0 {
            (lut_room / (self.lut.c_lut_pot * lanes)).floor()
        } else {
            f64::INFINITY
        };
        let clamp = |v: f64, cap: Option<u64>| {
            let v = if v.is_nan() || v < 0.0 {
                0
            } else {
                v.min(max_m as f64) as u64
            };
            cap.map_or(v, |c| v.min(c))
        };
        (
            clamp(fix, self.limits.t_m_fix_max),
            clamp(pot, self.limits.t_m_pot_max),
        )
    }

    pub fn fits(&self, bits: BitWidths, cfg: &TilingConfig) -> bool {
        check_constraints(cfg, bits, self.budget, self.lut, self.workload).is_empty()
    }

    pub fn evaluate(&self, bits: BitWidths, t_fix: u64, t_pot: u64) -> DesignPoint {
        DesignPoint::new(self.workload, self.tiling(bits, t_fix, t_pot))
    }
}

/// Fastest configuration in `scheme` that satisfies the budget, or `None`
/// when not even a single lane fits.
pub fn max_fps_config(
    space: &SearchSpace,
    bits: BitWidths,
    scheme: SchemeSpace,
) -> Result<Option<DesignPoint>> {
    space.budget.validate()?;
    if space.workload.layers.is_empty() {
        return Err(domain("empty workload"));
    }
    let (fix_max, pot_max) = space.bounds(bits);
    let (fix_range, pot_range) = match scheme {
        SchemeSpace::Mixed => (1..=fix_max, 0..=pot_max),
        SchemeSpace::FixedOnly => (1..=fix_max, 0..=0),
        SchemeSpace::PotOnly => (0..=0, 1..=pot_max),
    };
    let mut best: Option<DesignPoint> = None;
    for t_fix in fix_range {
        for t_pot in pot_range.clone() {
            let cfg = space.tiling(bits, t_fix, t_pot);
            // usage grows with t_pot, so nothing further along this row fits
            if !space.fits(bits, &cfg) {
                break;
            }
            let point = DesignPoint::new(space.workload, cfg);
            if best.is_none_or(|b| rank(&point, &b) == Ordering::Less) {
                best = Some(point);
            }
        }
    }
    Ok(best)
}

/// Fastest fixed-only, PoT-only and mixed designs of one band.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchemeComparison {
    pub bits: BitWidths,
    pub fixed_only: Option<DesignPoint>,
    pub pot_only: Option<DesignPoint>,
    pub mixed: Option<DesignPoint>,
}

impl SchemeComparison {
    pub fn new(space: &SearchSpace, bits: BitWidths) -> Result<Self> {
        Ok(SchemeComparison {
            bits,
            fixed_only: max_fps_config(space, bits, SchemeSpace::FixedOnly)?,
            pot_only: max_fps_config(space, bits, SchemeSpace::PotOnly)?,
            mixed: max_fps_config(space, bits, SchemeSpace::Mixed)?,
        })
    }

    /// Strict `fixed-only < PoT-only < mixed` in FPS.
    pub fn ordered(&self) -> bool {
        match (self.fixed_only, self.pot_only, self.mixed) {
            (Some(f), Some(p), Some(m)) => f.fps < p.fps && p.fps < m.fps,
            _ => false,
        }
    }
}

/// How the PoT lanes are trimmed once a band meets the target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrimStrategy {
    /// Keep `T_m^Fix` of the fastest design and shrink `T_m^PoT`.
    #[default]
    KeepFixed,
    /// Search every `T_m^Fix` for the smallest `T_m^PoT`; ties go to the
    /// larger `T_m^Fix`.
    Regrow,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DseRequest {
    pub workload: Workload,
    pub target_fps: f64,
    pub budget: ResourceBudget,
    pub lut: LutCostModel,
    /// Per-band LUT models overriding `lut`.
    pub lut_bands: BTreeMap<u32, LutCostModel>,
    pub platform: Platform,
    /// Candidate `b` values, highest precision first.
    pub bitwidth_ladder: Vec<u32>,
    pub limits: GridLimits,
    pub trim: TrimStrategy,
}

pub const DEFAULT_LADDER: [u32; 2] = [8, 4];

impl DseRequest {
    pub fn new(workload: Workload, target_fps: f64, calibration: &Calibration) -> Self {
        DseRequest {
            workload,
            target_fps,
            budget: calibration.budget,
            lut: calibration.lut,
            lut_bands: calibration.bands.clone(),
            platform: calibration.platform,
            bitwidth_ladder: DEFAULT_LADDER.to_vec(),
            limits: GridLimits::default(),
            trim: TrimStrategy::default(),
        }
    }

    pub fn lut_for(&self, b: u32) -> LutCostModel {
        self.lut_bands.get(&b).copied().unwrap_or(self.lut)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.target_fps.is_finite() && self.target_fps > 0.0) {
            return Err(domain(format!(
                "target FPS must be positive, got {}",
                self.target_fps
            )));
        }
        if self.bitwidth_ladder.is_empty() {
            return Err(domain("bit-width ladder is empty"));
        }
        if self.bitwidth_ladder.windows(2).any(|w| w[0] <= w[1]) {
            return Err(domain(format!(
                "bit-width ladder {:?} must be strictly decreasing",
                self.bitwidth_ladder
            )));
        }
        for &b in &self.bitwidth_ladder {
            BitWidths::aligned(b)?;
        }
        self.budget.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DseResult {
    pub feasible: bool,
    pub target_fps: f64,
    pub bits: Option<BitWidths>,
    pub cfg: Option<TilingConfig>,
    /// `T_m^PoT / (T_m^Fix + T_m^PoT)` of the chosen design.
    pub k_pot: Option<f64>,
    pub fps_estimate: Option<f64>,
    /// Fastest feasible FPS of every band visited; `null` when nothing fits.
    pub fps_max_per_band: BTreeMap<u32, Option<f64>>,
}

impl DseResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

fn trim_keep_fixed(
    space: &SearchSpace,
    bits: BitWidths,
    best: &DesignPoint,
    target: f64,
) -> Option<DesignPoint> {
    (0..=best.cfg.t_m_pot)
        .map(|t_pot| space.evaluate(bits, best.cfg.t_m_fix, t_pot))
        .find(|p| p.fps >= target && space.fits(bits, &p.cfg))
}

fn trim_regrow(space: &SearchSpace, bits: BitWidths, target: f64) -> Option<DesignPoint> {
    let (fix_max, pot_max) = space.bounds(bits);
    // at equal t_pot a larger t_fix means a smaller k_pot
    (0..=pot_max).find_map(|t_pot| {
        (1..=fix_max)
            .rev()
            .map(|t_fix| space.evaluate(bits, t_fix, t_pot))
            .find(|p| p.fps >= target && space.fits(bits, &p.cfg))
    })
}

/// Walks the ladder from the highest precision and stops at the first band
/// whose fastest design reaches the target.
pub fn explore(req: &DseRequest) -> Result<DseResult> {
    req.validate()?;
    let mut per_band = BTreeMap::new();
    for &b in &req.bitwidth_ladder {
        let bits = BitWidths::aligned(b)?;
        let lut = req.lut_for(b);
        let space = SearchSpace {
            workload: &req.workload,
            budget: &req.budget,
            lut: &lut,
            platform: &req.platform,
            limits: req.limits,
        };
        let best = max_fps_config(&space, bits, SchemeSpace::Mixed)?;
        per_band.insert(b, best.map(|p| p.fps));
        let Some(best) = best.filter(|p| p.fps >= req.target_fps) else {
            continue;
        };
        let chosen = match req.trim {
            TrimStrategy::KeepFixed => trim_keep_fixed(&space, bits, &best, req.target_fps),
            TrimStrategy::Regrow => trim_regrow(&space, bits, req.target_fps),
        }
        .expect("the fastest design itself meets the target");
        return Ok(DseResult {
            feasible: true,
            target_fps: req.target_fps,
            bits: Some(bits),
            cfg: Some(chosen.cfg),
            k_pot: Some(chosen.cfg.k_pot()),
            fps_estimate: Some(chosen.fps),
            fps_max_per_band: per_band,
        });
    }
    Ok(DseResult {
        feasible: false,
        target_fps: req.target_fps,
        bits: None,
        cfg: None,
        k_pot: None,
        fps_estimate: None,
        fps_max_per_band: per_band,
    })
}
