//! Board calibration: budgets, platform parameters and fitted LUT costs.
//!
//! The LUT cost per MAC lane cannot be derived analytically, so it is fitted
//! by least squares to measured `(fixed lanes, PoT lanes, LUTs)` points. The
//! points come from published ZCU102 implementations of DeiT-small and
//! DeiT-base ([`ZCU102_MEASUREMENTS`]); lane counts are reconstructed as
//! follows:
//!
//! * fixed lanes = DSPs / DSPs-per-MAC (0.25 for `b <= 4`, 0.5 otherwise);
//! * a mixed design with PoT ratio `k` has `fixed * k / (1 - k)` PoT lanes;
//! * a PoT-only design is assumed to run at the same efficiency as its
//!   fixed-only sibling, so its total lanes scale with measured throughput.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{read_file, Error, Result};
use crate::perf::{dsp_per_mac, LutCostModel, Platform, ResourceBudget, DEFAULT_FREQ_HZ};
use crate::quant::BitWidths;

/// Weight scheme of a measured design.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DesignScheme {
    Fixed,
    Pot,
    Mixed,
}

/// One measured accelerator implementation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Measurement {
    pub model: &'static str,
    pub b: u32,
    pub scheme: DesignScheme,
    pub dsp: f64,
    pub klut: f64,
    pub gops: f64,
    pub fps: f64,
    pub k_pot: Option<f64>,
}

#[allow(clippy::too_many_arguments)]
const fn point(
    model: &'static str,
    b: u32,
    scheme: DesignScheme,
    dsp: f64,
    klut: f64,
    gops: f64,
    fps: f64,
    k_pot: Option<f64>,
) -> Measurement {
    Measurement {
        model,
        b,
        scheme,
        dsp,
        klut,
        gops,
        fps,
        k_pot,
    }
}

/// Reported ZCU102 designs (150 MHz).
pub const ZCU102_MEASUREMENTS: [Measurement; 12] = {
    use DesignScheme::*;
    [
        point("deit-small", 4, Fixed, 1933.0, 137.0, 1186.6, 130.3, None),
        point("deit-small", 4, Pot, 13.0, 176.0, 1374.1, 150.9, None),
        point(
            "deit-small",
            4,
            Mixed,
            1549.0,
            193.0,
            1418.4,
            155.8,
            Some(0.43),
        ),
        point("deit-small", 8, Fixed, 1936.0, 122.0, 711.2, 78.1, None),
        point("deit-small", 8, Pot, 16.0, 175.0, 837.0, 91.9, None),
        point(
            "deit-small",
            8,
            Mixed,
            1552.0,
            185.0,
            907.8,
            99.7,
            Some(0.43),
        ),
        point("deit-base", 4, Fixed, 2064.0, 139.0, 1648.1, 47.5, None),
        point("deit-base", 4, Pot, 19.0, 191.0, 1958.4, 56.4, None),
        point(
            "deit-base",
            4,
            Mixed,
            1555.0,
            179.0,
            1970.3,
            56.8,
            Some(0.40),
        ),
        point("deit-base", 8, Fixed, 2066.0, 128.0, 899.6, 25.9, None),
        point("deit-base", 8, Pot, 20.0, 192.0, 1080.5, 31.1, None),
        point(
            "deit-base",
            8,
            Mixed,
            1556.0,
            186.0,
            1181.5,
            34.0,
            Some(0.45),
        ),
    ]
};

/// A reconstructed `(fixed lanes, PoT lanes, LUTs)` sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LanePoint {
    pub fixed_lanes: f64,
    pub pot_lanes: f64,
    pub luts: f64,
}

/// Lane reconstruction for every measurement of band `b`.
pub fn lane_points(measurements: &[Measurement], b: u32) -> Result<Vec<LanePoint>> {
    let per_mac = dsp_per_mac(BitWidths::aligned(b)?);
    let mut out = Vec::new();
    let models: Vec<&str> = {
        let mut m: Vec<_> = measurements
            .iter()
            .filter(|x| x.b == b)
            .map(|x| x.model)
            .collect();
        m.dedup();
        m
    };
    for model in models {
        let find = |s: DesignScheme| {
            measurements
                .iter()
                .find(|x| x.model == model && x.b == b && x.scheme == s)
        };
        let fixed = find(DesignScheme::Fixed).ok_or_else(|| Error::Schema {
            what: "measurements",
            msg: format!("{model} band {b} has no fixed-only design"),
        })?;
        let fixed_lanes = fixed.dsp / per_mac;
        for m in measurements.iter().filter(|x| x.model == model && x.b == b) {
            let own_fixed = m.dsp / per_mac;
            let pot_lanes = match m.scheme {
                DesignScheme::Fixed => 0.0,
                DesignScheme::Pot => fixed_lanes * m.gops / fixed.gops - own_fixed,
                DesignScheme::Mixed => {
                    let k = m.k_pot.unwrap_or(0.0);
                    own_fixed * k / (1.0 - k)
                }
            };
            out.push(LanePoint {
                fixed_lanes: own_fixed,
                pot_lanes,
                luts: m.klut * 1000.0,
            });
        }
    }
    Ok(out)
}

/// Ordinary least squares for `luts = c_fix * fixed + c_pot * pot + base`.
pub fn fit_lut_model(points: &[LanePoint]) -> Result<LutCostModel> {
    if points.len() < 3 {
        return Err(crate::error::domain("need at least three points to fit"));
    }
    let mut ata = [[0.0f64; 3]; 3];
    let mut aty = [0.0f64; 3];
    for p in points {
        let row = [p.fixed_lanes, p.pot_lanes, 1.0];
        for i in 0..3 {
            for j in 0..3 {
                ata[i][j] += row[i] * row[j];
            }
            aty[i] += row[i] * p.luts;
        }
    }
    let x = solve3(ata, aty).ok_or_else(|| crate::error::domain("singular fit"))?;
    Ok(LutCostModel {
        c_lut_fix: x[0],
        c_lut_pot: x[1],
        c_lut_base: x[2],
    })
}

fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

// Cramer's rule; the system is tiny and well conditioned after scaling.
fn solve3(a: [[f64; 3]; 3], y: [f64; 3]) -> Option<[f64; 3]> {
    let d = det3(&a);
    if d.abs() < 1e-12 * a[0][0].abs().max(1.0) {
        return None;
    }
    let mut x = [0.0; 3];
    for (col, xi) in x.iter_mut().enumerate() {
        let mut m = a;
        for r in 0..3 {
            m[r][col] = y[r];
        }
        *xi = det3(&m) / d;
    }
    Some(x)
}

pub fn fit_band(b: u32) -> Result<LutCostModel> {
    fit_lut_model(&lane_points(&ZCU102_MEASUREMENTS, b)?)
}

/// Parsed calibration file.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    /// Default LUT cost model.
    pub lut: LutCostModel,
    /// Per-band overrides keyed by fixed-point bit-width.
    pub bands: BTreeMap<u32, LutCostModel>,
    pub platform: Platform,
    pub budget: ResourceBudget,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CalibrationFile {
    c_lut_fix: f64,
    c_lut_pot: f64,
    c_lut_base: f64,
    axi_width: u64,
    r_dsp: f64,
    r_lut: f64,
    board: BoardFile,
    #[serde(default)]
    freq_hz: Option<u64>,
    #[serde(default)]
    axi_ports: Option<PortsFile>,
    #[serde(default)]
    bands: BTreeMap<String, LutCostModel>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BoardFile {
    s_bram: u64,
    s_dsp: u64,
    s_lut: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PortsFile {
    a_in: u64,
    a_wgt: u64,
    a_out: u64,
}

impl Calibration {
    pub fn from_toml(s: &str) -> Result<Self> {
        let f: CalibrationFile = toml::from_str(s)?;
        let schema = |msg: String| Error::Schema {
            what: "calibration",
            msg,
        };
        let mut bands = BTreeMap::new();
        for (key, model) in f.bands {
            let b: u32 = key
                .parse()
                .map_err(|_| schema(format!("band key `{key}` is not a bit-width")))?;
            BitWidths::aligned(b).map_err(|e| schema(e.to_string()))?;
            bands.insert(b, model);
        }
        let ports = f.axi_ports.unwrap_or(PortsFile {
            a_in: 1,
            a_wgt: 1,
            a_out: 1,
        });
        let cal = Calibration {
            lut: LutCostModel {
                c_lut_fix: f.c_lut_fix,
                c_lut_pot: f.c_lut_pot,
                c_lut_base: f.c_lut_base,
            },
            bands,
            platform: Platform {
                axi_width: f.axi_width,
                a_in: ports.a_in,
                a_wgt: ports.a_wgt,
                a_out: ports.a_out,
                freq_hz: f.freq_hz.unwrap_or(DEFAULT_FREQ_HZ),
            },
            budget: ResourceBudget {
                s_bram: f.board.s_bram,
                s_dsp: f.board.s_dsp,
                s_lut: f.board.s_lut,
                r_dsp: f.r_dsp,
                r_lut: f.r_lut,
            },
        };
        cal.check().map_err(|e| schema(e.to_string()))?;
        Ok(cal)
    }

    fn check(&self) -> Result<()> {
        self.budget.validate()?;
        let models = std::iter::once(&self.lut).chain(self.bands.values());
        for m in models {
            if [m.c_lut_fix, m.c_lut_pot, m.c_lut_base]
                .iter()
                .any(|c| !c.is_finite() || *c < 0.0)
            {
                return Err(crate::error::domain(
                    "LUT coefficients must be non-negative",
                ));
            }
        }
        let p = &self.platform;
        if p.axi_width < 8 || p.a_in == 0 || p.a_wgt == 0 || p.a_out == 0 || p.freq_hz == 0 {
            return Err(crate::error::domain(
                "axi_width must be ≥ 8 and port counts and frequency ≥ 1",
            ));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Calibration::from_toml(&read_file(path)?)
    }

    /// LUT model for a bit-width band, falling back to the default.
    pub fn lut_for(&self, bits: BitWidths) -> LutCostModel {
        self.bands.get(&bits.b()).copied().unwrap_or(self.lut)
    }
}
