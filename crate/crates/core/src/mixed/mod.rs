//! Row-level mixed-scheme quantization of weight matrices.
//!
//! Within each head group (a contiguous block of `M / n_heads` rows) the
//! rows with the smallest variance are quantized as power-of-two and the
//! rest as fixed-point, with the same PoT ratio in every head.

mod qat;

pub use qat::{
    qat_train_toy, qat_train_toy_with, QatConfig, QatOutcome, ToyDataset, ToyLayer, ToyModel,
};

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::matrix::Matrix;
use crate::quant::{
    calibrate_scale, fixed_quantize, fixed_quantize_value, pot_quantize, BitWidths,
    FixedQuantizedRow, FixedQuantizedTensor, PotCode, PotQuantizedRow, QuantizedRow,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Fixed,
    Pot,
}

/// Population variance of a row.
pub fn row_variance(row: &[f64]) -> Result<f64> {
    if row.is_empty() {
        return Err(domain("variance of an empty row"));
    }
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    Ok(row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n)
}

/// Number of PoT rows in a head group of `group` rows.
pub fn pot_rows_per_group(k_pot: f64, group: usize) -> usize {
    // the epsilon absorbs representation error such as 0.29 * 100 = 28.999...
    let raw = k_pot * group as f64;
    ((raw + 1e-9 * raw.max(1.0)).floor() as usize).min(group)
}

fn check_k_pot(k_pot: f64) -> Result<()> {
    if (0.0..=1.0).contains(&k_pot) {
        Ok(())
    } else {
        Err(domain(format!("k_pot={k_pot} outside [0, 1]")))
    }
}

/// Assigns a scheme to every row given precomputed row variances.
pub fn assign_schemes_from_variances(
    variances: &[f64],
    k_pot: f64,
    n_heads: usize,
) -> Result<Vec<Scheme>> {
    check_k_pot(k_pot)?;
    let m = variances.len();
    if n_heads == 0 || m == 0 || !m.is_multiple_of(n_heads) {
        return Err(domain(format!(
            "{m} rows cannot be split into {n_heads} equal head groups"
        )));
    }
    let group = m / n_heads;
    let n_pot = pot_rows_per_group(k_pot, group);
    let mut mask = vec![Scheme::Fixed; m];
    let mut order: Vec<usize> = Vec::with_capacity(group);
    for head in 0..n_heads {
        let base = head * group;
        order.clear();
        order.extend(base..base + group);
        order.sort_by(|&a, &b| variances[a].total_cmp(&variances[b]).then(a.cmp(&b)));
        for &r in &order[..n_pot] {
            mask[r] = Scheme::Pot;
        }
    }
    Ok(mask)
}

pub fn assign_schemes(w: &Matrix, k_pot: f64, n_heads: usize) -> Result<Vec<Scheme>> {
    let variances = w
        .iter_rows()
        .map(row_variance)
        .collect::<Result<Vec<_>>>()?;
    assign_schemes_from_variances(&variances, k_pot, n_heads)
}

/// Weight matrix whose rows carry their own scheme and scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "QuantizedRowMatrixFile", try_from = "QuantizedRowMatrixFile")]
pub struct QuantizedRowMatrix {
    shape: (usize, usize),
    bits: BitWidths,
    rows: Vec<QuantizedRow>,
}

impl QuantizedRowMatrix {
    pub fn new(shape: (usize, usize), bits: BitWidths, rows: Vec<QuantizedRow>) -> Result<Self> {
        let qm = QuantizedRowMatrix { shape, bits, rows };
        qm.check_structure()?;
        Ok(qm)
    }

    fn check_structure(&self) -> Result<()> {
        let schema = |msg: String| Error::Schema {
            what: "quantized matrix",
            msg,
        };
        let (m, n) = self.shape;
        if self.rows.len() != m {
            return Err(schema(format!(
                "shape says {m} rows, found {}",
                self.rows.len()
            )));
        }
        for (i, row) in self.rows.iter().enumerate() {
            if row.len() != n {
                return Err(schema(format!(
                    "row {i} has {} entries, expected {n}",
                    row.len()
                )));
            }
            let s = row.scale();
            if !(s.is_finite() && s > 0.0) {
                return Err(schema(format!("row {i} has non-positive scale {s}")));
            }
            let width_ok = match row {
                QuantizedRow::Fixed(r) => r.b == self.bits.b(),
                QuantizedRow::Pot(r) => r.b_prime == self.bits.b_prime(),
            };
            if !width_ok {
                return Err(schema(format!(
                    "row {i} bit-width disagrees with {}",
                    self.bits
                )));
            }
        }
        Ok(())
    }

    /// Checks that every stored integer lies inside its scheme's range.
    pub fn validate(&self) -> Result<()> {
        for (i, row) in self.rows.iter().enumerate() {
            let ok = match row {
                QuantizedRow::Fixed(r) => r.in_range(),
                QuantizedRow::Pot(r) => r.in_range(),
            };
            if !ok {
                return Err(Error::Schema {
                    what: "quantized matrix",
                    msg: format!("row {i} holds values outside its quantization range"),
                });
            }
        }
        Ok(())
    }

    pub fn shape(&self) -> (usize, usize) {
        self.shape
    }

    pub fn bits(&self) -> BitWidths {
        self.bits
    }

    pub fn rows(&self) -> &[QuantizedRow] {
        &self.rows
    }

    pub fn rows_mut(&mut self) -> &mut [QuantizedRow] {
        &mut self.rows
    }

    pub fn scheme_mask(&self) -> Vec<Scheme> {
        self.rows
            .iter()
            .map(|r| {
                if r.is_pot() {
                    Scheme::Pot
                } else {
                    Scheme::Fixed
                }
            })
            .collect()
    }

    pub fn pot_rows(&self) -> usize {
        self.rows.iter().filter(|r| r.is_pot()).count()
    }

    /// Realized fraction of PoT rows.
    pub fn k_pot_actual(&self) -> f64 {
        self.pot_rows() as f64 / self.shape.0 as f64
    }

    pub fn dequantize(&self) -> Matrix {
        let data = self
            .rows
            .iter()
            .flat_map(QuantizedRow::dequantize)
            .collect();
        Matrix::from_vec(self.shape.0, self.shape.1, data).expect("shape checked on construction")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&QuantizedRowMatrixFile::from(self)).expect("serializable")
    }

    /// Parses the JSON form. Only structure is checked; call [`validate`]
    /// for value ranges.
    ///
    /// [`validate`]: QuantizedRowMatrix::validate
    pub fn from_json(s: &str) -> Result<Self> {
        let file: QuantizedRowMatrixFile = serde_json::from_str(s)?;
        file.try_into()
    }
}

#[derive(Serialize, Deserialize)]
struct QuantizedRowMatrixFile {
    shape: (usize, usize),
    bits: BitWidths,
    scheme_mask: Vec<Scheme>,
    scales: Vec<f64>,
    #[serde(default, skip_deserializing)]
    k_pot_actual: f64,
    rows: Vec<RowPayload>,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum RowPayload {
    Fixed { q: Vec<i32> },
    Pot { codes: Vec<(i8, u32)> },
}

impl From<QuantizedRowMatrix> for QuantizedRowMatrixFile {
    fn from(m: QuantizedRowMatrix) -> Self {
        QuantizedRowMatrixFile::from(&m)
    }
}

impl From<&QuantizedRowMatrix> for QuantizedRowMatrixFile {
    fn from(m: &QuantizedRowMatrix) -> Self {
        QuantizedRowMatrixFile {
            shape: m.shape,
            bits: m.bits,
            scheme_mask: m.scheme_mask(),
            scales: m.rows.iter().map(QuantizedRow::scale).collect(),
            k_pot_actual: m.k_pot_actual(),
            rows: m
                .rows
                .iter()
                .map(|r| match r {
                    QuantizedRow::Fixed(f) => RowPayload::Fixed { q: f.q.clone() },
                    QuantizedRow::Pot(p) => RowPayload::Pot {
                        codes: p.codes.iter().map(|c| (c.sign, c.exp)).collect(),
                    },
                })
                .collect(),
        }
    }
}

impl TryFrom<QuantizedRowMatrixFile> for QuantizedRowMatrix {
    type Error = Error;

    fn try_from(f: QuantizedRowMatrixFile) -> Result<Self> {
        let schema = |msg: String| Error::Schema {
            what: "quantized matrix",
            msg,
        };
        let m = f.shape.0;
        if f.scheme_mask.len() != m || f.scales.len() != m || f.rows.len() != m {
            return Err(schema(format!(
                "scheme_mask, scales and rows must each have {m} entries"
            )));
        }
        let rows = f
            .rows
            .into_iter()
            .zip(&f.scheme_mask)
            .zip(&f.scales)
            .enumerate()
            .map(|(i, ((payload, scheme), &scale))| match (payload, scheme) {
                (RowPayload::Fixed { q }, Scheme::Fixed) => {
                    Ok(QuantizedRow::Fixed(FixedQuantizedRow {
                        q,
                        scale,
                        b: f.bits.b(),
                    }))
                }
                (RowPayload::Pot { codes }, Scheme::Pot) => {
                    Ok(QuantizedRow::Pot(PotQuantizedRow {
                        codes: codes
                            .into_iter()
                            .map(|(sign, exp)| PotCode { sign, exp })
                            .collect(),
                        scale,
                        b_prime: f.bits.b_prime(),
                    }))
                }
                _ => Err(schema(format!(
                    "row {i} payload does not match scheme_mask"
                ))),
            })
            .collect::<Result<Vec<_>>>()?;
        QuantizedRowMatrix::new(f.shape, f.bits, rows)
    }
}

/// Quantizes every row with a max-abs scale under its assigned scheme.
pub fn quantize_matrix(
    w: &Matrix,
    bits: BitWidths,
    k_pot: f64,
    n_heads: usize,
) -> Result<QuantizedRowMatrix> {
    let mask = assign_schemes(w, k_pot, n_heads)?;
    quantize_matrix_with_mask(w, bits, &mask)
}

pub fn quantize_matrix_with_mask(
    w: &Matrix,
    bits: BitWidths,
    mask: &[Scheme],
) -> Result<QuantizedRowMatrix> {
    if mask.len() != w.rows() {
        return Err(Error::Shape(format!(
            "scheme mask has {} entries for {} rows",
            mask.len(),
            w.rows()
        )));
    }
    let rows = w
        .iter_rows()
        .zip(mask)
        .map(|(row, scheme)| {
            let scale = calibrate_scale(row)?;
            Ok(match scheme {
                Scheme::Fixed => QuantizedRow::Fixed(fixed_quantize(row, bits.b(), scale)?),
                Scheme::Pot => QuantizedRow::Pot(pot_quantize(row, bits.b_prime(), scale)?),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    QuantizedRowMatrix::new(w.shape(), bits, rows)
}

/// Per-tensor fixed-point activation quantization.
pub fn quantize_activations(a: &Matrix, b: u32) -> Result<FixedQuantizedTensor> {
    let scale = if a.data().is_empty() {
        1.0
    } else {
        calibrate_scale(a.data())?
    };
    // validates b and finiteness
    fixed_quantize(&[], b, scale)?;
    Ok(FixedQuantizedTensor {
        q: a.data()
            .iter()
            .map(|&v| fixed_quantize_value(v, b, scale))
            .collect(),
        shape: a.shape(),
        scale,
        b,
    })
}
