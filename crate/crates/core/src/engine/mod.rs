//! Integer model of the tiled compute engine.
//!
//! [`reference_matmul`] is a plain triple loop over quantized operands and
//! serves as the functional oracle for [`simulate_layer`], which executes
//! the same product tile by tile through packed DSP lanes and shift lanes.

mod dsp;
mod sim;

pub use dsp::{dsp_pack_multiply, pot_shift_multiply, wrap_signed, DspPort, PackedMode};
pub use sim::{simulate_layer, PhaseCycles, SimPhase, SimTrace, TraceEvent};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixed::QuantizedRowMatrix;
use crate::quant::{fixed_levels, FixedQuantizedTensor, QuantizedRow};

/// Row-major `i32` matrix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<i32>,
}

impl IntMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        IntMatrix {
            rows,
            cols,
            data: vec![0; rows * cols],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> i32 {
        self.data[r * self.cols + c]
    }
}

/// Integer outputs and the factor that turns each output row back into reals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntOutput {
    pub values: IntMatrix,
    pub row_scales: Vec<f64>,
}

impl IntOutput {
    pub fn dequantize(&self) -> Vec<f64> {
        let cols = self.values.cols;
        self.values
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| f64::from(v) * self.row_scales[i / cols])
            .collect()
    }
}

/// Dequantization factor of one weight row times activations.
pub fn output_scale(row: &QuantizedRow, qa: &FixedQuantizedTensor) -> f64 {
    let act = qa.scale / f64::from(fixed_levels(qa.b));
    match row {
        QuantizedRow::Fixed(r) => r.scale / f64::from(fixed_levels(r.b)) * act,
        QuantizedRow::Pot(r) => {
            r.scale * f64::powi(2.0, -(crate::quant::max_shift(r.b_prime) as i32)) * act
        }
    }
}

pub(crate) fn checked_mac(acc: i32, product: i64, at: impl FnOnce() -> String) -> Result<i32> {
    i32::try_from(product)
        .ok()
        .and_then(|p| acc.checked_add(p))
        .ok_or_else(|| Error::Overflow(at()))
}

fn check_shapes(qw: &QuantizedRowMatrix, qa: &FixedQuantizedTensor, n_heads: usize) -> Result<()> {
    let (m, n) = qw.shape();
    if qa.shape.0 != n {
        return Err(Error::Shape(format!(
            "weights are {m}x{n}, activations are {}x{}",
            qa.shape.0, qa.shape.1
        )));
    }
    if n_heads == 0 || n % n_heads != 0 {
        return Err(Error::Shape(format!(
            "N={n} cannot be split into {n_heads} heads"
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

fn row_product(row: &QuantizedRow, k: usize, a: i32, b: u32) -> Result<i64> {
    match row {
        QuantizedRow::Fixed(r) => Ok(i64::from(r.q[k]) * i64::from(a)),
        QuantizedRow::Pot(r) => {
            let c = r.codes[k];
            pot_shift_multiply(i64::from(a), c.sign, c.exp, b, r.b_prime)
        }
    }
}

/// `M x F` integer product of `M x N` weights and `N x F` activations.
pub fn reference_matmul(qw: &QuantizedRowMatrix, qa: &FixedQuantizedTensor) -> Result<IntOutput> {
    reference_matmul_heads(qw, qa, 1)
}

/// Per-head product: head `h` contracts weight columns and activation rows
/// `[h*N/H, (h+1)*N/H)` and writes output rows `[h*M, (h+1)*M)`.
/// With `n_heads = 1` this is the ordinary matmul.
pub fn reference_matmul_heads(
    qw: &QuantizedRowMatrix,
    qa: &FixedQuantizedTensor,
    n_heads: usize,
) -> Result<IntOutput> {
    check_shapes(qw, qa, n_heads)?;
    let (m, n) = qw.shape();
    let f = qa.shape.1;
    let hd = n / n_heads;
    let mut out = IntMatrix::zeros(n_heads * m, f);
    let mut row_scales = Vec::with_capacity(n_heads * m);
    for h in 0..n_heads {
        for (i, row) in qw.rows().iter().enumerate() {
            row_scales.push(output_scale(row, qa));
            for j in 0..f {
                let mut acc = 0i32;
                for k in h * hd..(h + 1) * hd {
                    let p = row_product(row, k, qa.get(k, j), qa.b)?;
                    acc = checked_mac(acc, p, || format!("output ({}, {j})", h * m + i))?;
                }
                out.data[(h * m + i) * f + j] = acc;
            }
        }
    }
    Ok(IntOutput {
        values: out,
        row_scales,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Matrix;
    use crate::mixed::{quantize_activations, quantize_matrix};
    use crate::quant::{BitWidths, FixedQuantizedRow};

    #[test]
    fn single_element() {
        let bits = BitWidths::new(4, 3).unwrap();
        let qw = QuantizedRowMatrix::new(
            (1, 1),
            bits,
            vec![QuantizedRow::Fixed(FixedQuantizedRow {
                q: vec![7],
                scale: 1.0,
                b: 4,
            })],
        )
        .unwrap();
        let qa = FixedQuantizedTensor {
            q: vec![7],
            shape: (1, 1),
            scale: 1.0,
            b: 4,
        };
        let out = reference_matmul(&qw, &qa).unwrap();
        assert_eq!(out.values.data, vec![49]);
        assert!((out.dequantize()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_activations_give_zero() {
        let w = Matrix::from_rows(&[vec![0.5, -0.25], vec![0.1, 0.9]]).unwrap();
        let qw = quantize_matrix(&w, BitWidths::new(8, 4).unwrap(), 0.5, 1).unwrap();
        let qa = quantize_activations(&Matrix::zeros(2, 3), 8).unwrap();
        let out = reference_matmul(&qw, &qa).unwrap();
        assert!(out.values.data.iter().all(|&v| v == 0));
    }

    #[test]
    fn shape_errors() {
        let w = Matrix::from_rows(&[vec![0.5, -0.25]]).unwrap();
        let qw = quantize_matrix(&w, BitWidths::new(8, 4).unwrap(), 0.0, 1).unwrap();
        let qa = quantize_activations(&Matrix::zeros(3, 1), 8).unwrap();
        assert!(reference_matmul(&qw, &qa).is_err());
        let qa4 = quantize_activations(&Matrix::zeros(2, 1), 4).unwrap();
        assert!(reference_matmul(&qw, &qa4).is_err());
        let qa = quantize_activations(&Matrix::zeros(2, 1), 8).unwrap();
        assert!(reference_matmul_heads(&qw, &qa, 3).is_err());
    }

    #[test]
    fn overflow_is_reported() {
        let bits = BitWidths::new(8, 4).unwrap();
        let n = 200_000;
        let qw = QuantizedRowMatrix::new(
            (1, n),
            bits,
            vec![QuantizedRow::Fixed(FixedQuantizedRow {
                q: vec![127; n],
                scale: 1.0,
                b: 8,
            })],
        )
        .unwrap();
        let qa = FixedQuantizedTensor {
            q: vec![127; n],
            shape: (n, 1),
            scale: 1.0,
            b: 8,
        };
        assert!(matches!(
            reference_matmul(&qw, &qa),
            Err(Error::Overflow(_))
        ));
    }
}
