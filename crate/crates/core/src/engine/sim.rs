//! Phase-granular simulation of one layer on the tiled engine.
//!
//! Loop order: output-channel groups of `T_m` rows outermost, then input
//! steps of `P_h * T_n` channels. Within a group, step `s` loads tile `s`
//! while the lanes compute tile `s - 1`; every step lasts as long as its
//! slowest phase. A group's outputs are stored while the next group runs.
//!
//! Lane mapping: each group puts up to `T_m^PoT` PoT rows on shift lanes
//! and fills its `T_m^Fix` DSP lanes with fixed rows first, then with any
//! PoT rows left over (a PoT weight is an ordinary integer on a DSP lane).
//! Weights are held in `b`-bit (fixed) or `b'`-bit (PoT: sign and `e + 1`)
//! fields, so out-of-range values in the input wrap exactly as they would
//! in on-chip memory.

use serde::{Deserialize, Serialize};

use super::dsp::{dsp_pack_multiply, pot_shift_multiply, wrap_signed, PackedMode};
use super::{checked_mac, output_scale, IntMatrix, IntOutput};
use crate::error::{domain, Error, Result};
use crate::mixed::QuantizedRowMatrix;
use crate::perf::TilingConfig;
use crate::quant::{max_shift, FixedQuantizedTensor, QuantizedRow};
use crate::workload::LayerDims;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimPhase {
    LoadInput,
    LoadWeight,
    Compute,
    Store,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub tile_group: usize,
    /// Input step the event belongs to; absent for stores.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_step: Option<usize>,
    pub phase: SimPhase,
    pub start_cycle: u64,
    pub end_cycle: u64,
}

/// Busy cycles per phase and the end-to-end total.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PhaseCycles {
    pub load_input: u64,
    pub load_weight: u64,
    pub compute: u64,
    pub store: u64,
    pub total: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTrace {
    pub cycles: PhaseCycles,
    pub outputs: IntOutput,
    pub events: Vec<TraceEvent>,
}

impl SimTrace {
    pub fn events_json(&self) -> String {
        serde_json::to_string_pretty(&self.events).expect("serializable")
    }
}

/// Weight operand as it sits in on-chip memory.
#[derive(Debug, Clone, Copy)]
enum Stored {
    Fixed(i64),
    Pot { sign: i8, exp: u32 },
}

fn store_weight(row: &QuantizedRow, k: usize, b: u32, b_prime: u32) -> Stored {
    match row {
        QuantizedRow::Fixed(r) => Stored::Fixed(wrap_signed(i64::from(r.q[k]), b)),
        QuantizedRow::Pot(r) => {
            let c = r.codes[k];
            let mag_mask = (1i64 << (b_prime - 1)) - 1;
            let mag = if c.sign == 0 {
                0
            } else {
                (i64::from(c.exp) + 1) & mag_mask
            };
            if mag == 0 {
                Stored::Pot { sign: 0, exp: 0 }
            } else {
                Stored::Pot {
                    sign: if c.sign < 0 { -1 } else { 1 },
                    exp: (mag - 1) as u32,
                }
            }
        }
    }
}

/// Integer value of a PoT weight on the `2^E`-scaled grid.
fn pot_as_int(sign: i8, exp: u32, e_max: u32) -> i64 {
    i64::from(sign) * (1i64 << (e_max - exp))
}

/// Per-tile phase lengths from the tile geometry.
struct TileCosts {
    load_input: u64,
    load_weight: u64,
    compute: u64,
    store: u64,
}

impl TileCosts {
    fn new(layer: &LayerDims, cfg: &TilingConfig) -> Self {
        let tokens = layer.f as u64;
        // each head slice of T_n channels travels as packed AXI words
        let act_words = cfg.t_n.div_ceil(cfg.d);
        let pot_words = cfg.t_n.div_ceil(cfg.d_prime);
        let beats = |words: u64, ports: u64| words.div_ceil(ports);
        let load_input = cfg.p_h * act_words * beats(tokens, cfg.a_in);
        let load_weight = cfg.p_h
            * (act_words * beats(cfg.t_m_fix, cfg.a_wgt)
                + pot_words * beats(cfg.t_m_pot, cfg.a_wgt));
        // a DSP consumes two tokens per cycle; heads beyond P_h take extra passes
        let compute = tokens.div_ceil(2) * (layer.n_heads as u64).div_ceil(cfg.p_h);
        let out_tiles = layer.output_rows() as u64 / layer.m as u64;
        let store = out_tiles * cfg.t_m().div_ceil(cfg.d) * beats(tokens, cfg.a_out);
        TileCosts {
            load_input,
            load_weight,
            compute,
            store,
        }
    }
}

struct Group {
    fixed_lanes: Vec<Option<usize>>,
    pot_lanes: Vec<Option<usize>>,
}

fn assign_lanes(qw: &QuantizedRowMatrix, cfg: &TilingConfig, groups: usize) -> Result<Vec<Group>> {
    let mut fixed = std::collections::VecDeque::new();
    let mut pot = std::collections::VecDeque::new();
    for (i, r) in qw.rows().iter().enumerate() {
        if r.is_pot() {
            pot.push_back(i);
        } else {
            fixed.push_back(i);
        }
    }
    let (n_fixed, n_pot) = (fixed.len(), pot.len());
    let mut out = Vec::with_capacity(groups);
    for _ in 0..groups {
        let pot_lanes: Vec<Option<usize>> = (0..cfg.t_m_pot).map(|_| pot.pop_front()).collect();
        let fixed_lanes = (0..cfg.t_m_fix)
            .map(|_| fixed.pop_front().or_else(|| pot.pop_front()))
            .collect();
        out.push(Group {
            fixed_lanes,
            pot_lanes,
        });
    }
    if !fixed.is_empty() || !pot.is_empty() {
        return Err(domain(format!(
            "{n_fixed} fixed and {n_pot} PoT rows do not fit {groups} groups of {} DSP and {} shift lanes",
            cfg.t_m_fix, cfg.t_m_pot
        )));
    }
    Ok(out)
}

struct Engine<'a> {
    qw: &'a QuantizedRowMatrix,
    acts: Vec<i64>,
    f: usize,
    m: usize,
    head_dim: usize,
    multi_out: bool,
    b: u32,
    b_prime: u32,
    mode: PackedMode,
    acc: IntMatrix,
}

impl Engine<'_> {
    fn act(&self, k: usize, j: usize) -> i64 {
        if j < self.f {
            self.acts[k * self.f + j]
        } else {
            0
        }
    }

    fn out_row(&self, row: usize, k: usize) -> usize {
        if self.multi_out {
            (k / self.head_dim) * self.m + row
        } else {
            row
        }
    }

    fn accumulate(&mut self, row: usize, k: usize, j: usize, p: i64) -> Result<()> {
        if j >= self.f {
            return Ok(());
        }
        let r = self.out_row(row, k);
        let idx = r * self.f + j;
        self.acc.data[idx] = checked_mac(self.acc.data[idx], p, || format!("output ({r}, {j})"))?;
        Ok(())
    }

    fn weight(&self, row: usize, k: usize) -> Stored {
        store_weight(&self.qw.rows()[row], k, self.b, self.b_prime)
    }

    fn dsp_operand(&self, row: Option<usize>, k: usize) -> i64 {
        match row.map(|r| self.weight(r, k)) {
            None => 0,
            Some(Stored::Fixed(v)) => v,
            Some(Stored::Pot { sign, exp }) => pot_as_int(sign, exp, max_shift(self.b_prime)),
        }
    }

    /// One tile: every lane of `group` over input channels `ks`.
    fn compute_tile(&mut self, group: &Group, ks: std::ops::Range<usize>) -> Result<()> {
        for k in ks {
            for j in (0..self.f).step_by(2) {
                let acts = (self.act(k, j), self.act(k, j + 1));
                match self.mode {
                    PackedMode::Int4Quad => {
                        for pair in group.fixed_lanes.chunks(2) {
                            let r0 = pair[0];
                            let r1 = pair.get(1).copied().flatten();
                            if r0.is_none() && r1.is_none() {
                                continue;
                            }
                            let w = [self.dsp_operand(r0, k), self.dsp_operand(r1, k)];
                            let p = dsp_pack_multiply(self.mode, &w, acts)?;
                            for (lane_row, prods) in [(r0, &p[0..2]), (r1, &p[2..4])] {
                                if let Some(r) = lane_row {
                                    self.accumulate(r, k, j, prods[0])?;
                                    self.accumulate(r, k, j + 1, prods[1])?;
                                }
                            }
                        }
                    }
                    PackedMode::Int8Pair => {
                        for &lane in &group.fixed_lanes {
                            if let Some(r) = lane {
                                let p = dsp_pack_multiply(
                                    self.mode,
                                    &[self.dsp_operand(lane, k)],
                                    acts,
                                )?;
                                self.accumulate(r, k, j, p[0])?;
                                self.accumulate(r, k, j + 1, p[1])?;
                            }
                        }
                    }
                }
                for &lane in &group.pot_lanes {
                    let Some(r) = lane else { continue };
                    let (sign, exp) = match self.weight(r, k) {
                        Stored::Pot { sign, exp } => (sign, exp),
                        Stored::Fixed(_) => unreachable!("fixed rows never occupy shift lanes"),
                    };
                    for (dj, a) in [(0, acts.0), (1, acts.1)] {
                        let p = pot_shift_multiply(a, sign, exp, self.b, self.b_prime)?;
                        self.accumulate(r, k, j + dj, p)?;
                    }
                }
            }
        }
        Ok(())
    }
}

fn check_inputs(
    layer: &LayerDims,
    cfg: &TilingConfig,
    qw: &QuantizedRowMatrix,
    qa: &FixedQuantizedTensor,
) -> Result<()> {
    cfg.validate()?;
    if qw.shape() != (layer.m, layer.n) {
        return Err(Error::Shape(format!(
            "layer {} is {}x{}, weights are {}x{}",
            layer.name,
            layer.m,
            layer.n,
            qw.shape().0,
            qw.shape().1
        )));
    }
    if qa.shape != (layer.n, layer.f) {
        return Err(Error::Shape(format!(
            "layer {} expects {}x{} activations, got {}x{}",
            layer.name, layer.n, layer.f, qa.shape.0, qa.shape.1
        )));
    }
    if qw.bits().b() != qa.b {
        return Err(Error::Shape(format!(
            "weights use b={}, activations b={}",
            qw.bits().b(),
            qa.b
        )));
    }
    Ok(())
}

/// Runs one layer through the engine, returning outputs and a phase trace.
pub fn simulate_layer(
    layer: &LayerDims,
    cfg: &TilingConfig,
    qw: &QuantizedRowMatrix,
    qa: &FixedQuantizedTensor,
) -> Result<SimTrace> {
    check_inputs(layer, cfg, qw, qa)?;
    let bits = qw.bits();
    let groups = (layer.m as u64).div_ceil(cfg.t_m()) as usize;
    let step_width = (cfg.p_h * cfg.t_n) as usize;
    let steps = layer.n.div_ceil(step_width);
    let lanes = assign_lanes(qw, cfg, groups)?;

    let mut engine = Engine {
        qw,
        acts: qa
            .q
            .iter()
            .map(|&a| wrap_signed(i64::from(a), qa.b))
            .collect(),
        f: layer.f,
        m: layer.m,
        head_dim: layer.head_dim(),
        multi_out: layer.is_attention_multi_out,
        b: bits.b(),
        b_prime: bits.b_prime(),
        mode: PackedMode::for_bits(bits.b()),
        acc: IntMatrix::zeros(layer.output_rows(), layer.f),
    };

    let costs = TileCosts::new(layer, cfg);
    let step_len = costs.load_input.max(costs.load_weight).max(costs.compute);
    let mut events = Vec::new();
    let mut cycles = PhaseCycles::default();
    let mut emit = |events: &mut Vec<TraceEvent>, g, s, phase, start: u64, len: u64| {
        events.push(TraceEvent {
            tile_group: g,
            n_step: s,
            phase,
            start_cycle: start,
            end_cycle: start + len,
        });
        let slot = match phase {
            SimPhase::LoadInput => &mut cycles.load_input,
            SimPhase::LoadWeight => &mut cycles.load_weight,
            SimPhase::Compute => &mut cycles.compute,
            SimPhase::Store => &mut cycles.store,
        };
        *slot += len;
    };

    let mut group_start = 0u64;
    let mut store_free = 0u64;
    for (g, group) in lanes.iter().enumerate() {
        let mut t = group_start;
        for s in 0..=steps {
            if s < steps {
                emit(
                    &mut events,
                    g,
                    Some(s),
                    SimPhase::LoadInput,
                    t,
                    costs.load_input,
                );
                emit(
                    &mut events,
                    g,
                    Some(s),
                    SimPhase::LoadWeight,
                    t,
                    costs.load_weight,
                );
            }
            if s > 0 {
                let k0 = (s - 1) * step_width;
                engine.compute_tile(group, k0..(k0 + step_width).min(layer.n))?;
                emit(
                    &mut events,
                    g,
                    Some(s - 1),
                    SimPhase::Compute,
                    t,
                    costs.compute,
                );
            }
            t += if s < steps { step_len } else { costs.compute };
        }
        // pipeline stages advance in lock step: the output stage holds every
        // group slot for at least one store, drained or not
        let next = t.max(store_free).max(group_start + costs.store);
        emit(&mut events, g, None, SimPhase::Store, next, costs.store);
        store_free = next + costs.store;
        group_start = next;
    }
    cycles.total = store_free;
    events.sort_by_key(|e| (e.start_cycle, e.tile_group));

    let mut row_scales = Vec::with_capacity(layer.output_rows());
    let heads_out = layer.output_rows() / layer.m;
    for _ in 0..heads_out {
        row_scales.extend(qw.rows().iter().map(|r| output_scale(r, qa)));
    }
    Ok(SimTrace {
        cycles,
        outputs: IntOutput {
            values: engine.acc,
            row_scales,
        },
        events,
    })
}
