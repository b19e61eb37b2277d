//! Fixed-point and power-of-two quantizers.
//!
//! Fixed-point is symmetric uniform: a `b`-bit row stores integers in
//! `[-(2^(b-1)-1), 2^(b-1)-1]` and dequantizes to `scale * q / (2^(b-1)-1)`.
//! Power-of-two stores a sign and a shift exponent `e` in `[0, E]` with
//! `E = 2^(b'-1) - 2`, dequantizing to `sign * scale * 2^-e`. Both give
//! `2^bits - 1` distinct levels.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};

pub const MIN_BITS: u32 = 2;
pub const MAX_BITS: u32 = 8;

/// Fixed-point bit-width `b` (weights and all activations) and PoT weight
/// bit-width `b_prime`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawBitWidths", into = "RawBitWidths")]
pub struct BitWidths {
    b: u32,
    b_prime: u32,
}

#[derive(Serialize, Deserialize)]
struct RawBitWidths {
    b: u32,
    b_prime: u32,
}

impl TryFrom<RawBitWidths> for BitWidths {
    type Error = crate::Error;

    fn try_from(raw: RawBitWidths) -> Result<Self> {
        BitWidths::new(raw.b, raw.b_prime)
    }
}

impl From<BitWidths> for RawBitWidths {
    fn from(bits: BitWidths) -> Self {
        RawBitWidths {
            b: bits.b,
            b_prime: bits.b_prime,
        }
    }
}

impl BitWidths {
    pub fn new(b: u32, b_prime: u32) -> Result<Self> {
        check_bits(b, "b")?;
        if !(MIN_BITS..=b).contains(&b_prime) {
            return Err(domain(format!("b_prime={b_prime} must lie in [2, b={b}]")));
        }
        if 1u32 << (b_prime - 1) > b {
            return Err(domain(format!(
                "b={b}, b_prime={b_prime} violates output alignment 2^(b_prime-1) <= b"
            )));
        }
        Ok(BitWidths { b, b_prime })
    }

    /// Pairs `b` with its aligned PoT width.
    pub fn aligned(b: u32) -> Result<Self> {
        BitWidths::new(b, aligned_pot_bitwidth(b)?)
    }

    pub fn b(&self) -> u32 {
        self.b
    }

    pub fn b_prime(&self) -> u32 {
        self.b_prime
    }

    /// Largest PoT shift exponent.
    pub fn max_shift(&self) -> u32 {
        max_shift(self.b_prime)
    }
}

impl std::fmt::Display for BitWidths {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "W{b}A{b}+W{bp}A{b}", b = self.b, bp = self.b_prime)
    }
}

fn check_bits(bits: u32, name: &str) -> Result<()> {
    if (MIN_BITS..=MAX_BITS).contains(&bits) {
        Ok(())
    } else {
        Err(domain(format!("{name}={bits} outside [2, 8]")))
    }
}

/// PoT bit-width whose shifted products align with a `b`-bit fixed-point
/// product: `floor(log2 b) + 1`.
pub fn aligned_pot_bitwidth(b: u32) -> Result<u32> {
    check_bits(b, "b")?;
    Ok(b.ilog2() + 1)
}

/// Largest representable fixed-point magnitude, `2^(b-1) - 1`.
pub fn fixed_levels(b: u32) -> i32 {
    (1i32 << (b - 1)) - 1
}

/// `E = 2^(b'-1) - 2`.
pub fn max_shift(b_prime: u32) -> u32 {
    (1u32 << (b_prime - 1)) - 2
}

/// Max-abs scale; an all-zero vector gets 1.0.
pub fn calibrate_scale(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(domain("cannot calibrate a scale from an empty vector"));
    }
    check_finite(values)?;
    let max = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    Ok(if max == 0.0 { 1.0 } else { max })
}

fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(domain(format!(
            "non-finite value {} at index {i}",
            values[i]
        ))),
        None => Ok(()),
    }
}

fn check_scale(scale: f64) -> Result<()> {
    if scale.is_finite() && scale > 0.0 {
        Ok(())
    } else {
        Err(domain(format!(
            "scale must be positive and finite, got {scale}"
        )))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedQuantizedRow {
    pub q: Vec<i32>,
    pub scale: f64,
    pub b: u32,
}

impl FixedQuantizedRow {
    pub fn dequantize(&self) -> Vec<f64> {
        let levels = f64::from(fixed_levels(self.b));
        self.q
            .iter()
            .map(|&q| self.scale * f64::from(q) / levels)
            .collect()
    }

    pub fn in_range(&self) -> bool {
        let lim = fixed_levels(self.b);
        self.q.iter().all(|q| q.abs() <= lim)
    }
}

/// One PoT weight: `sign * 2^-exp`. A zero sign encodes the value 0 and its
/// exponent is ignored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PotCode {
    pub sign: i8,
    pub exp: u32,
}

impl PotCode {
    pub const ZERO: PotCode = PotCode { sign: 0, exp: 0 };

    pub fn value(&self, scale: f64) -> f64 {
        if self.sign == 0 {
            return 0.0;
        }
        f64::from(self.sign) * scale * pow2_neg(self.exp)
    }
}

fn pow2_neg(e: u32) -> f64 {
    // exact for every exponent we can produce (E <= 126)
    f64::powi(2.0, -(e as i32))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PotQuantizedRow {
    pub codes: Vec<PotCode>,
    pub scale: f64,
    pub b_prime: u32,
}

impl PotQuantizedRow {
    pub fn dequantize(&self) -> Vec<f64> {
        self.codes.iter().map(|c| c.value(self.scale)).collect()
    }

    pub fn in_range(&self) -> bool {
        let e_max = max_shift(self.b_prime);
        self.codes
            .iter()
            .all(|c| (-1..=1).contains(&c.sign) && (c.sign == 0 || c.exp <= e_max))
    }
}

/// Per-tensor fixed-point activations, row-major with `shape = (rows, cols)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedQuantizedTensor {
    pub q: Vec<i32>,
    pub shape: (usize, usize),
    pub scale: f64,
    pub b: u32,
}

impl FixedQuantizedTensor {
    pub fn get(&self, r: usize, c: usize) -> i32 {
        self.q[r * self.shape.1 + c]
    }

    pub fn dequantize(&self) -> Vec<f64> {
        let levels = f64::from(fixed_levels(self.b));
        self.q
            .iter()
            .map(|&q| self.scale * f64::from(q) / levels)
            .collect()
    }
}

/// Quantizes one scalar to the fixed-point grid. Rounds half away from zero.
pub fn fixed_quantize_value(value: f64, b: u32, scale: f64) -> i32 {
    let levels = fixed_levels(b);
    let q = (value * f64::from(levels) / scale).round();
    q.clamp(-f64::from(levels), f64::from(levels)) as i32
}

pub fn fixed_quantize(values: &[f64], b: u32, scale: f64) -> Result<FixedQuantizedRow> {
    check_bits(b, "b")?;
    check_scale(scale)?;
    check_finite(values)?;
    Ok(FixedQuantizedRow {
        q: values
            .iter()
            .map(|&v| fixed_quantize_value(v, b, scale))
            .collect(),
        scale,
        b,
    })
}

/// Nearest point of `{0} ∪ {±scale·2^-e : e ∈ [0, E]}`; ties go to the
/// smaller magnitude.
pub fn pot_quantize_value(value: f64, b_prime: u32, scale: f64) -> PotCode {
    let mag = value.abs();
    let mut best = PotCode::ZERO;
    let mut best_dist = mag;
    // Walk magnitudes from smallest to largest so a tie keeps the smaller one.
    for e in (0..=max_shift(b_prime)).rev() {
        let dist = (mag - scale * pow2_neg(e)).abs();
        if dist < best_dist {
            best_dist = dist;
            best = PotCode {
                sign: if value < 0.0 { -1 } else { 1 },
                exp: e,
            };
        }
    }
    best
}

pub fn pot_quantize(values: &[f64], b_prime: u32, scale: f64) -> Result<PotQuantizedRow> {
    check_bits(b_prime, "b_prime")?;
    check_scale(scale)?;
    check_finite(values)?;
    Ok(PotQuantizedRow {
        codes: values
            .iter()
            .map(|&v| pot_quantize_value(v, b_prime, scale))
            .collect(),
        scale,
        b_prime,
    })
}

/// A weight row under either scheme.
#[derive(Debug, Clone, PartialEq)]
pub enum QuantizedRow {
    Fixed(FixedQuantizedRow),
    Pot(PotQuantizedRow),
}

impl QuantizedRow {
    pub fn dequantize(&self) -> Vec<f64> {
        match self {
            QuantizedRow::Fixed(r) => r.dequantize(),
            QuantizedRow::Pot(r) => r.dequantize(),
        }
    }

    pub fn scale(&self) -> f64 {
        match self {
            QuantizedRow::Fixed(r) => r.scale,
            QuantizedRow::Pot(r) => r.scale,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            QuantizedRow::Fixed(r) => r.q.len(),
            QuantizedRow::Pot(r) => r.codes.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_pot(&self) -> bool {
        matches!(self, QuantizedRow::Pot(_))
    }
}

pub fn dequantize_row(row: &QuantizedRow) -> Vec<f64> {
    row.dequantize()
}
