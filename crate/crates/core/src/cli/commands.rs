use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::render::{json, key_values, opt, Format, Grid};
use super::{
    Cli, DseArgs, EstimateArgs, Outcome, QatArgs, QuantizeArgs, SimulateArgs, TilingArgs, TrimArg,
    EXIT_INTERNAL,
};
use crate::calibration::{fit_band, Calibration};
use crate::dse::{
    explore, select_parallel_heads, DseRequest, DseResult, GridLimits, SchemeComparison,
    SearchSpace, TrimStrategy,
};
use crate::engine::{reference_matmul_heads, simulate_layer, PhaseCycles};
use crate::error::{domain, read_file, write_file, Error, Result};
use crate::matrix::Matrix;
use crate::mixed::{
    qat_train_toy, quantize_activations, quantize_matrix, QatConfig, QuantizedRowMatrix,
    ToyDataset, ToyModel,
};
use crate::perf::{
    bram_usage, check_constraints, compute_resource_usage, layer_cycles, model_fps,
    workload_cycles, BramUsage, LatencyBreakdown, Platform, TilingConfig, Violation,
    DEFAULT_FREQ_HZ,
};
use crate::quant::{BitWidths, QuantizedRow};
use crate::workload::{build_workload, load_workload, LayerDims, Variant, Workload};

/// Learning rate of the reference QAT instance.
pub const DEFAULT_QAT_LR: f64 = 0.1;

pub fn workload(cli: &Cli, variant: Variant) -> Result<Outcome> {
    let w = build_workload(variant);
    Ok(Outcome::ok(match cli.format {
        Format::Json => w.to_json() + "\n",
        f => {
            let mut g = Grid::new(&["name", "M", "N", "F", "n_heads", "multi_out"]);
            for l in &w.layers {
                g.push(vec![
                    l.name.clone(),
                    l.m.to_string(),
                    l.n.to_string(),
                    l.f.to_string(),
                    l.n_heads.to_string(),
                    l.is_attention_multi_out.to_string(),
                ]);
            }
            if f == Format::Csv {
                g.to_csv()
            } else {
                g.to_table()
            }
        }
    }))
}

fn load_tiling(path: &Path) -> Result<TilingConfig> {
    let cfg: TilingConfig = serde_json::from_str(&read_file(path)?).map_err(|e| Error::Schema {
        what: "tiling config",
        msg: e.to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

fn resolve_tiling(
    args: &TilingArgs,
    bits: BitWidths,
    platform: &Platform,
    heads: &[usize],
) -> Result<TilingConfig> {
    if let Some(path) = &args.config {
        return load_tiling(path);
    }
    let (Some(t_fix), Some(t_pot)) = (args.t_fix, args.t_pot) else {
        return Err(domain("give either --config or both --t-fix and --t-pot"));
    };
    let p_h = args.p_h.unwrap_or_else(|| select_parallel_heads(heads));
    let cfg = platform.tiling(bits, p_h, t_fix, t_pot);
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Serialize)]
struct LayerRow<'a> {
    name: &'a str,
    #[serde(flatten)]
    cycles: LatencyBreakdown,
}

#[derive(Serialize)]
struct Resources {
    bram: BramUsage,
    bram_total: u64,
    dsp: f64,
    lut: f64,
}

#[derive(Serialize)]
struct EstimateReport<'a> {
    variant: &'a str,
    bits: BitWidths,
    cfg: TilingConfig,
    layers: Vec<LayerRow<'a>>,
    total_cycles: u64,
    fps: f64,
    resources: Resources,
    violations: Vec<Violation>,
    warnings: usize,
}

pub fn estimate(cli: &Cli, a: &EstimateArgs) -> Result<Outcome> {
    let w = load_workload(&a.workload)?;
    let cal = Calibration::load(&a.calibration)?;
    let bits = a.bits.resolve()?;
    let heads: Vec<usize> = w.layers.iter().map(|l| l.n_heads).collect();
    let cfg = resolve_tiling(&a.tiling, bits, &cal.platform, &heads)?;
    let lut = cal.lut_for(bits);
    let bram = bram_usage(&cfg, bits, w.max_f(), w.max_heads());
    let usage = compute_resource_usage(&cfg, bits, &lut);
    let violations = check_constraints(&cfg, bits, &cal.budget, &lut, &w);
    let report = EstimateReport {
        variant: &w.variant,
        bits,
        cfg,
        layers: w
            .layers
            .iter()
            .map(|l| LayerRow {
                name: &l.name,
                cycles: layer_cycles(l, &cfg),
            })
            .collect(),
        total_cycles: workload_cycles(&w, &cfg),
        fps: model_fps(&w, &cfg)?,
        resources: Resources {
            bram,
            bram_total: bram.total(),
            dsp: usage.dsp,
            lut: usage.lut,
        },
        warnings: violations.len(),
        violations,
    };
    let layer_grid = || {
        let mut g = Grid::new(&[
            "layer", "l_in", "l_wgt", "l_out", "l_cmpt", "l1", "l2", "l_tot",
        ]);
        for r in &report.layers {
            let c = r.cycles;
            g.push(
                std::iter::once(r.name.to_string())
                    .chain(
                        [c.l_in, c.l_wgt, c.l_out, c.l_cmpt, c.l1, c.l2, c.l_tot]
                            .map(|v| v.to_string()),
                    )
                    .collect(),
            );
        }
        g
    };
    Ok(Outcome::ok(match cli.format {
        Format::Json => json(&report),
        Format::Csv => layer_grid().to_csv(),
        Format::Table => {
            let mut s = layer_grid().to_table();
            s.push('\n');
            s += &key_values(&[
                ("bits", bits.to_string()),
                ("total cycles", report.total_cycles.to_string()),
                ("fps", report.fps.to_string()),
                (
                    "bram",
                    format!(
                        "{} (in {}, wgt {}, out {})",
                        bram.total(),
                        bram.b_in,
                        bram.b_wgt,
                        bram.b_out
                    ),
                ),
                ("dsp", usage.dsp.to_string()),
                ("lut", usage.lut.to_string()),
                ("warnings", report.warnings.to_string()),
            ]);
            for v in &report.violations {
                s += &format!(
                    "violation: {:?} uses {} > limit {}\n",
                    v.resource, v.used, v.limit
                );
            }
            s
        }
    }))
}

pub fn dse(cli: &Cli, a: &DseArgs) -> Result<Outcome> {
    let w = load_workload(&a.workload)?;
    let cal = Calibration::load(&a.calibration)?;
    let mut req = DseRequest::new(w, a.target_fps, &cal);
    req.bitwidth_ladder = a.ladder.clone();
    req.limits = GridLimits {
        t_m_fix_max: a.t_fix_max,
        t_m_pot_max: a.t_pot_max,
    };
    req.trim = match a.trim {
        TrimArg::KeepFixed => TrimStrategy::KeepFixed,
        TrimArg::Regrow => TrimStrategy::Regrow,
    };
    let r = explore(&req)?;
    Ok(Outcome::ok(match cli.format {
        Format::Json => r.to_json() + "\n",
        Format::Csv => band_grid(&r).to_csv(),
        Format::Table => {
            let cfg = r.cfg;
            let mut s = key_values(&[
                ("feasible", r.feasible.to_string()),
                ("target fps", r.target_fps.to_string()),
                ("bits", opt(r.bits)),
                ("k_pot", opt(r.k_pot)),
                ("fps estimate", opt(r.fps_estimate)),
                ("t_m_fix", opt(cfg.map(|c| c.t_m_fix))),
                ("t_m_pot", opt(cfg.map(|c| c.t_m_pot))),
                ("t_n", opt(cfg.map(|c| c.t_n))),
                ("p_h", opt(cfg.map(|c| c.p_h))),
            ]);
            if !r.feasible {
                s += "INFEASIBLE: no band reaches the target\n";
            }
            s.push('\n');
            s + &band_grid(&r).to_table()
        }
    }))
}

fn band_grid(r: &DseResult) -> Grid {
    let mut g = Grid::new(&["b", "fps_max", "chosen"]);
    for (b, fps) in &r.fps_max_per_band {
        let chosen = r.bits.is_some_and(|bits| bits.b() == *b);
        g.push(vec![b.to_string(), opt(*fps), chosen.to_string()]);
    }
    g
}

fn seeded_uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Result<Matrix> {
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
}

fn load_weights(path: &Path) -> Result<Matrix> {
    let rows: Vec<Vec<f64>> =
        serde_json::from_str(&read_file(path)?).map_err(|e| Error::Schema {
            what: "weights",
            msg: format!("expected a JSON array of rows: {e}"),
        })?;
    Matrix::from_rows(&rows).map_err(|e| Error::Schema {
        what: "weights",
        msg: e.to_string(),
    })
}

fn quantized_grid(q: &QuantizedRowMatrix) -> Grid {
    let mut g = Grid::new(&["row", "scheme", "scale", "values"]);
    for (i, r) in q.rows().iter().enumerate() {
        let (scheme, values) = match r {
            QuantizedRow::Fixed(f) => (
                "fixed",
                f.q.iter().map(|v| v.to_string()).collect::<Vec<_>>(),
            ),
            QuantizedRow::Pot(p) => (
                "pot",
                p.codes
                    .iter()
                    .map(|c| match c.sign {
                        0 => "0".to_string(),
                        s => format!("{}2^-{}", if s < 0 { "-" } else { "+" }, c.exp),
                    })
                    .collect(),
            ),
        };
        g.push(vec![
            i.to_string(),
            scheme.into(),
            r.scale().to_string(),
            values.join(" "),
        ]);
    }
    g
}

pub fn quantize(cli: &Cli, a: &QuantizeArgs) -> Result<Outcome> {
    let bits = a.bits.resolve()?;
    let w = match &a.weights {
        Some(p) => load_weights(p)?,
        None => seeded_uniform(&mut ChaCha8Rng::seed_from_u64(cli.seed), a.rows, a.cols)?,
    };
    let q = quantize_matrix(&w, bits, a.k_pot, a.n_heads)?;
    Ok(Outcome::ok(match cli.format {
        Format::Json => q.to_json() + "\n",
        Format::Csv => quantized_grid(&q).to_csv(),
        Format::Table => quantized_grid(&q).to_table(),
    }))
}

fn parse_shape(s: &str) -> Result<(usize, usize)> {
    let bad = || domain(format!("layer shape `{s}` is not MxN"));
    let (m, n) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((
        m.trim().parse().map_err(|_| bad())?,
        n.trim().parse().map_err(|_| bad())?,
    ))
}

#[derive(Serialize)]
struct QatReport {
    config: QatConfig,
    initial_loss: f64,
    final_loss: f64,
    loss_trace: Vec<f64>,
    quantized: Vec<QuantizedRowMatrix>,
}

pub fn qat(cli: &Cli, a: &QatArgs) -> Result<Outcome> {
    let bits = match a.b_prime {
        Some(bp) => BitWidths::new(a.bits, bp)?,
        None => BitWidths::aligned(a.bits)?,
    };
    let schedule = a
        .layers
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let (m, n) = parse_shape(s)?;
            LayerDims::new(format!("layer{i}"), m, n, a.samples.max(1), 1, false).map(|l| {
                LayerDims {
                    n_heads: a.n_heads,
                    ..l
                }
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let model = ToyModel::from_schedule(&schedule, cli.seed)?;
    let data = ToyDataset::synthetic(model.input_dim(), model.output_dim(), a.samples, cli.seed)?;
    let cfg = QatConfig {
        bits,
        k_pot: a.k_pot,
        epochs: a.epochs,
        batch_size: a.batch_size,
        learning_rate: a.lr,
        seed: cli.seed,
    };
    let out = qat_train_toy(model, &data, &cfg)?;
    let report = QatReport {
        config: cfg,
        initial_loss: out.loss_trace[0],
        final_loss: *out.loss_trace.last().expect("trace has a final entry"),
        loss_trace: out.loss_trace,
        quantized: out.quantized,
    };
    let trace_grid = || {
        let mut g = Grid::new(&["step", "loss"]);
        for (i, l) in report.loss_trace.iter().enumerate() {
            g.push(vec![i.to_string(), l.to_string()]);
        }
        g
    };
    Ok(Outcome::ok(match cli.format {
        Format::Json => json(&report),
        Format::Csv => trace_grid().to_csv(),
        Format::Table => key_values(&[
            ("bits", bits.to_string()),
            ("k_pot", a.k_pot.to_string()),
            ("steps", (report.loss_trace.len() - 1).to_string()),
            ("initial loss", report.initial_loss.to_string()),
            ("final loss", report.final_loss.to_string()),
        ]),
    }))
}

/// Layer and tiling used when `simulate` gets no workload or tiling.
pub fn reference_toy() -> (LayerDims, TilingConfig) {
    (
        LayerDims::new("toy", 8, 8, 4, 1, false).expect("valid dims"),
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
        },
    )
}

#[derive(Serialize)]
struct SimulateReport {
    layer: String,
    bits: BitWidths,
    cfg: TilingConfig,
    cycles: PhaseCycles,
    analytical_l_tot: u64,
    cycles_verdict: &'static str,
    outputs_verdict: &'static str,
    mismatched_outputs: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    reference_error: Option<String>,
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "MATCH"
    } else {
        "MISMATCH"
    }
}

pub fn simulate(cli: &Cli, a: &SimulateArgs) -> Result<Outcome> {
    let (toy_layer, toy_cfg) = reference_toy();
    let layer = match (&a.workload, &a.layer) {
        (Some(path), Some(name)) => {
            let w = load_workload(path)?;
            w.layer(name)
                .cloned()
                .ok_or_else(|| domain(format!("workload has no layer `{name}`")))?
        }
        _ => toy_layer,
    };
    let platform = match &a.calibration {
        Some(p) => Calibration::load(p)?.platform,
        None => Platform::default(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cli.seed);
    let qw = match &a.model {
        Some(p) => QuantizedRowMatrix::from_json(&read_file(p)?)?,
        None => {
            let w = seeded_uniform(&mut rng, layer.m, layer.n)?;
            let groups = if layer.m % layer.n_heads == 0 {
                layer.n_heads
            } else {
                1
            };
            let k = if layer.allows_pot() { a.k_pot } else { 0.0 };
            quantize_matrix(&w, a.bits.resolve()?, k, groups)?
        }
    };
    let bits = qw.bits();
    let cfg = if a.tiling.config.is_none() && a.tiling.t_fix.is_none() && a.tiling.t_pot.is_none() {
        toy_cfg
    } else {
        resolve_tiling(&a.tiling, bits, &platform, &[layer.n_heads])?
    };
    let acts = seeded_uniform(&mut rng, layer.n, layer.f)?;
    let qa = quantize_activations(&acts, bits.b())?;

    let trace = simulate_layer(&layer, &cfg, &qw, &qa)?;
    let analytic = layer_cycles(&layer, &cfg).l_tot;
    let heads = if layer.is_attention_multi_out {
        layer.n_heads
    } else {
        1
    };
    let (mismatched, reference_error) = match reference_matmul_heads(&qw, &qa, heads) {
        Ok(r) => (
            r.values
                .data
                .iter()
                .zip(&trace.outputs.values.data)
                .filter(|(x, y)| x != y)
                .count(),
            None,
        ),
        Err(e) => (trace.outputs.values.data.len(), Some(e.to_string())),
    };
    if let Some(path) = &a.trace {
        write_file(path, &(trace.events_json() + "\n"))?;
    }
    let cycles_ok = trace.cycles.total == analytic;
    let outputs_ok = mismatched == 0 && reference_error.is_none();
    let report = SimulateReport {
        layer: layer.name.clone(),
        bits,
        cfg,
        cycles: trace.cycles,
        analytical_l_tot: analytic,
        cycles_verdict: verdict(cycles_ok),
        outputs_verdict: verdict(outputs_ok),
        mismatched_outputs: mismatched,
        reference_error,
    };
    let text = match cli.format {
        Format::Json => json(&report),
        f => {
            let mut g = Grid::new(&[
                "layer",
                "cycles",
                "l_tot",
                "cycles_verdict",
                "outputs_verdict",
                "mismatched",
            ]);
            g.push(vec![
                report.layer.clone(),
                report.cycles.total.to_string(),
                analytic.to_string(),
                report.cycles_verdict.into(),
                report.outputs_verdict.into(),
                mismatched.to_string(),
            ]);
            if f == Format::Csv {
                g.to_csv()
            } else {
                g.to_table()
            }
        }
    };
    Ok(Outcome {
        text,
        code: if cycles_ok && outputs_ok {
            0
        } else {
            EXIT_INTERNAL
        },
    })
}

#[derive(Serialize)]
struct BandReport {
    variant: &'static str,
    #[serde(flatten)]
    comparison: SchemeComparison,
    ordered: bool,
}

#[derive(Serialize)]
struct CalibrationReport {
    lut_models: BTreeMap<u32, crate::perf::LutCostModel>,
    refit_from_measurements: BTreeMap<u32, crate::perf::LutCostModel>,
    bands: Vec<BandReport>,
    ordering_reproduced: bool,
    notes: Vec<String>,
}

/// Variants and bands with published fixed/PoT/mixed designs.
pub const REPORT_VARIANTS: [Variant; 2] = [Variant::DeitSmall, Variant::DeitBase];
pub const REPORT_BANDS: [u32; 2] = [4, 8];

pub fn calibration_report(cal: &Calibration) -> Result<CalibrationReportData> {
    let mut bands = Vec::new();
    for variant in REPORT_VARIANTS {
        let w: Workload = build_workload(variant);
        for b in REPORT_BANDS {
            let bits = BitWidths::aligned(b)?;
            let lut = cal.lut_for(bits);
            let space = SearchSpace {
                workload: &w,
                budget: &cal.budget,
                lut: &lut,
                platform: &cal.platform,
                limits: GridLimits::default(),
            };
            let comparison = SchemeComparison::new(&space, bits)?;
            bands.push((variant, comparison));
        }
    }
    Ok(CalibrationReportData { bands })
}

/// Scheme comparisons of every reported variant and band.
pub struct CalibrationReportData {
    pub bands: Vec<(Variant, SchemeComparison)>,
}

pub fn report(cli: &Cli, path: &Path) -> Result<Outcome> {
    let cal = Calibration::load(path)?;
    let data = calibration_report(&cal)?;
    let mut notes = Vec::new();
    let bands: Vec<BandReport> = data
        .bands
        .iter()
        .map(|(v, c)| {
            if !c.ordered() {
                notes.push(format!(
                    "{} at b={}: fixed-only < PoT-only < mixed is NOT reproduced",
                    v.name(),
                    c.bits.b()
                ));
            }
            BandReport {
                variant: v.name(),
                comparison: *c,
                ordered: c.ordered(),
            }
        })
        .collect();
    let mut lut_models = BTreeMap::new();
    let mut refit = BTreeMap::new();
    for b in REPORT_BANDS {
        lut_models.insert(b, cal.lut_for(BitWidths::aligned(b)?));
        refit.insert(b, fit_band(b)?);
    }
    let r = CalibrationReport {
        lut_models,
        refit_from_measurements: refit,
        ordering_reproduced: notes.is_empty(),
        bands,
        notes,
    };
    let grid = || {
        let mut g = Grid::new(&[
            "variant",
            "b",
            "fixed_only",
            "pot_only",
            "mixed",
            "mixed_t_fix",
            "mixed_t_pot",
            "ordered",
        ]);
        for b in &r.bands {
            let c = &b.comparison;
            g.push(vec![
                b.variant.to_string(),
                c.bits.b().to_string(),
                opt(c.fixed_only.map(|p| format!("{:.1}", p.fps))),
                opt(c.pot_only.map(|p| format!("{:.1}", p.fps))),
                opt(c.mixed.map(|p| format!("{:.1}", p.fps))),
                opt(c.mixed.map(|p| p.cfg.t_m_fix)),
                opt(c.mixed.map(|p| p.cfg.t_m_pot)),
                b.ordered.to_string(),
            ]);
        }
        g
    };
    Ok(Outcome::ok(match cli.format {
        Format::Json => json(&r),
        Format::Csv => grid().to_csv(),
        Format::Table => {
            let mut s = grid().to_table();
            for n in &r.notes {
                s += &format!("note: {n}\n");
            }
            s
        }
    }))
}
