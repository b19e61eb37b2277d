//! Mixed-scheme quantization and accelerator modeling for vision transformers.
//!
//! Weight-matrix rows are quantized either as symmetric fixed-point (executed
//! on DSP multipliers) or as power-of-two (executed as LUT shifts). The crate
//! provides the quantizers, the row-level scheme assignment and a small
//! quantization-aware training loop, the analytical latency/resource model of
//! the tiled FPGA engine, the design-space exploration that picks bit-widths,
//! tiling and the PoT ratio for a target frame rate, and a bit-exact simulator
//! of the engine used to cross-check the model.

pub mod calibration;
pub mod cli;
pub mod dse;
pub mod engine;
mod error;
pub mod matrix;
pub mod mixed;
pub mod perf;
pub mod quant;
pub mod workload;

pub use error::{Error, Result};
