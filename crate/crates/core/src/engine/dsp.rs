//! Bit-exact emulation of a packed DSP multiply `P = (A + D) * B`.
//!
//! Reference layouts (bit offsets of operands and product fields):
//!
//! | mode        | A          | D       | B                 | products (offset)                      |
//! |-------------|------------|---------|-------------------|----------------------------------------|
//! | `int8_pair` | `a1 << 18` | `a0`    | `w`               | `w*a0` (0), `w*a1` (18)                |
//! | `int4_quad` | `w1 << 22` | `w0`    | `(a1 << 11) + a0` | `w0*a0` (0), `w0*a1` (11), `w1*a0` (22), `w1*a1` (33) |
//!
//! A field is recovered by sign-extending its low bits and subtracting it
//! before shifting to the next field, which cancels the borrow that a
//! negative lower product leaves in the upper fields.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};

pub const A_BITS: u32 = 27;
pub const D_BITS: u32 = 27;
pub const B_BITS: u32 = 18;
pub const P_BITS: u32 = 45;

fn signed_range(bits: u32) -> std::ops::RangeInclusive<i64> {
    -(1i64 << (bits - 1))..=(1i64 << (bits - 1)) - 1
}

/// Two's-complement wrap of `v` to `bits` bits.
pub fn wrap_signed(v: i64, bits: u32) -> i64 {
    let shift = 64 - bits;
    (v << shift) >> shift
}

/// Input ports and output of one DSP slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DspPort {
    pub a: i64,
    pub d: i64,
    pub b_port: i64,
    pub p: i64,
}

impl DspPort {
    /// Evaluates the slice; operands must fit their port widths.
    pub fn evaluate(a: i64, d: i64, b_port: i64) -> Result<Self> {
        for (name, v, bits) in [("A", a, A_BITS), ("D", d, D_BITS), ("B", b_port, B_BITS)] {
            if !signed_range(bits).contains(&v) {
                return Err(domain(format!("{name}={v} does not fit {bits} bits")));
            }
        }
        let p = wrap_signed(wrap_signed(a + d, A_BITS) * b_port, P_BITS);
        Ok(DspPort { a, d, b_port, p })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PackedMode {
    /// One 8-bit weight times two 8-bit activations.
    Int8Pair,
    /// Two 4-bit weights times two 4-bit activations.
    Int4Quad,
}

impl PackedMode {
    /// Mode used for `b`-bit fixed-point operands.
    pub fn for_bits(b: u32) -> Self {
        if b <= 4 {
            PackedMode::Int4Quad
        } else {
            PackedMode::Int8Pair
        }
    }

    pub fn operand_bits(self) -> u32 {
        match self {
            PackedMode::Int8Pair => 8,
            PackedMode::Int4Quad => 4,
        }
    }

    pub fn weights_per_op(self) -> usize {
        match self {
            PackedMode::Int8Pair => 1,
            PackedMode::Int4Quad => 2,
        }
    }

    /// Width of each product field in `P`.
    pub fn field_bits(self) -> u32 {
        match self {
            PackedMode::Int8Pair => 18,
            PackedMode::Int4Quad => 11,
        }
    }

    /// Bit offsets of the product fields, lowest first.
    pub fn lane_offsets(self) -> &'static [u32] {
        match self {
            PackedMode::Int8Pair => &[0, 18],
            PackedMode::Int4Quad => &[0, 11, 22, 33],
        }
    }

    /// Bits needed by one signed product of two operands.
    pub fn product_bits(self) -> u32 {
        // |x*y| <= 2^(2k-2) needs 2k bits in two's complement
        2 * self.operand_bits()
    }

    /// Unused bits between the top of one product and the next field.
    pub fn guard_bits(self) -> u32 {
        self.field_bits() - self.product_bits()
    }

    fn pack(self, weights: &[i64], acts: (i64, i64)) -> (i64, i64, i64) {
        let (a0, a1) = acts;
        match self {
            PackedMode::Int8Pair => (a1 << 18, a0, weights[0]),
            PackedMode::Int4Quad => (weights[1] << 22, weights[0], (a1 << 11) + a0),
        }
    }
}

/// Multiplies packed operands in one DSP evaluation and unpacks the lane
/// products: `[w*a0, w*a1]` for `int8_pair`, `[w0*a0, w0*a1, w1*a0, w1*a1]`
/// for `int4_quad`.
pub fn dsp_pack_multiply(
    mode: PackedMode,
    weights: &[i64],
    activations: (i64, i64),
) -> Result<Vec<i64>> {
    if weights.len() != mode.weights_per_op() {
        return Err(domain(format!(
            "{mode:?} takes {} weights, got {}",
            mode.weights_per_op(),
            weights.len()
        )));
    }
    let range = signed_range(mode.operand_bits());
    for &v in weights.iter().chain([&activations.0, &activations.1]) {
        if !range.contains(&v) {
            return Err(domain(format!(
                "operand {v} outside {}-bit range",
                mode.operand_bits()
            )));
        }
    }
    let (a, d, b) = mode.pack(weights, activations);
    let mut p = DspPort::evaluate(a, d, b)?.p;
    let offsets = mode.lane_offsets();
    let mut out = Vec::with_capacity(offsets.len());
    for w in offsets.windows(2) {
        let width = w[1] - w[0];
        let lo = wrap_signed(p, width);
        out.push(lo);
        p = (p - lo) >> width;
    }
    out.push(p);
    Ok(out)
}

/// Shift-based product of an activation and a PoT weight code, on the grid
/// scaled by `2^E`: returns `sign * (a << (E - e))`.
pub fn pot_shift_multiply(a_int: i64, sign: i8, exp: u32, b: u32, b_prime: u32) -> Result<i64> {
    let levels = (1i64 << (b - 1)) - 1;
    if a_int.abs() > levels {
        return Err(domain(format!("activation {a_int} outside ±{levels}")));
    }
    let e_max = crate::quant::max_shift(b_prime);
    if !(-1..=1).contains(&sign) || (sign != 0 && exp > e_max) {
        return Err(domain(format!(
            "PoT code ({sign}, {exp}) outside sign ∈ {{-1,0,1}}, e ∈ [0, {e_max}]"
        )));
    }
    if sign == 0 {
        return Ok(0);
    }
    Ok(i64::from(sign) * (a_int << (e_max - exp)))
}
