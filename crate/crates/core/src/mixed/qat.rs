//! Desk-scale quantization-aware training.
//!
//! A toy model is a chain of plain matrix multiplications trained with
//! squared-error loss and SGD. Every step re-assigns schemes from the
//! current shadow weights, runs the forward pass on quantized weights and
//! activations, and applies the straight-through gradient to the shadow
//! weights.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{quantize_activations, quantize_matrix, QuantizedRowMatrix};
use crate::error::{domain, Error, Result};
use crate::matrix::Matrix;
use crate::quant::BitWidths;
use crate::workload::LayerDims;

pub const MAX_TOY_DIM: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyLayer {
    pub name: String,
    /// Full-precision shadow weights, `M x N`.
    pub weights: Matrix,
    pub n_heads: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub layers: Vec<ToyLayer>,
}

impl ToyModel {
    /// Random model whose layer shapes follow `schedule`; consecutive layers
    /// must chain (`N` of layer i equals `M` of layer i-1).
    pub fn from_schedule(schedule: &[LayerDims], seed: u64) -> Result<Self> {
        if schedule.is_empty() {
            return Err(domain("toy schedule is empty"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(schedule.len());
        for (i, dims) in schedule.iter().enumerate() {
            if dims.m > MAX_TOY_DIM || dims.n > MAX_TOY_DIM {
                return Err(domain(format!(
                    "toy layer {} is {}x{}, limit is {MAX_TOY_DIM}x{MAX_TOY_DIM}",
                    dims.name, dims.m, dims.n
                )));
            }
            if dims.m % dims.n_heads != 0 {
                return Err(domain(format!(
                    "toy layer {}: M={} not divisible by n_heads={}",
                    dims.name, dims.m, dims.n_heads
                )));
            }
            if i > 0 && schedule[i - 1].m != dims.n {
                return Err(Error::Shape(format!(
                    "toy layer {} expects N={} but previous layer produces {}",
                    dims.name,
                    dims.n,
                    schedule[i - 1].m
                )));
            }
            let bound = 1.0 / (dims.n as f64).sqrt();
            let data = (0..dims.m * dims.n)
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            layers.push(ToyLayer {
                name: dims.name.clone(),
                weights: Matrix::from_vec(dims.m, dims.n, data)?,
                n_heads: dims.n_heads,
            });
        }
        Ok(ToyModel { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weights.rows())
    }

    pub fn quantize(&self, bits: BitWidths, k_pot: f64) -> Result<Vec<QuantizedRowMatrix>> {
        self.layers
            .iter()
            .map(|l| quantize_matrix(&l.weights, bits, k_pot, l.n_heads))
            .collect()
    }
}

/// Synthetic regression data; samples are columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyDataset {
    pub inputs: Matrix,
    pub targets: Matrix,
}

impl ToyDataset {
    /// Inputs uniform in `[-1, 1)`, targets produced by a random linear
    /// teacher with the model's input and output sizes.
    pub fn synthetic(
        input_dim: usize,
        output_dim: usize,
        samples: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_da7a);
        let teacher = Matrix::from_vec(
            output_dim,
            input_dim,
            (0..output_dim * input_dim)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect(),
        )?;
        let inputs = Matrix::from_vec(
            input_dim,
            samples,
            (0..input_dim * samples)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect(),
        )?;
        let targets = teacher.matmul(&inputs)?;
        Ok(ToyDataset { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn columns(&self, idx: &[usize]) -> (Matrix, Matrix) {
        let pick = |m: &Matrix| {
            let mut out = Matrix::zeros(m.rows(), idx.len());
            for r in 0..m.rows() {
                for (j, &c) in idx.iter().enumerate() {
                    out.set(r, j, m.get(r, c));
                }
            }
            out
        };
        (pick(&self.inputs), pick(&self.targets))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QatConfig {
    pub bits: BitWidths,
    pub k_pot: f64,
    pub epochs: usize,
    /// Samples per step; `None` trains on the whole dataset every step.
    pub batch_size: Option<usize>,
    pub learning_rate: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct QatOutcome {
    pub model: ToyModel,
    /// Whole-dataset loss under the quantized forward pass, before every
    /// step and once after the last one.
    pub loss_trace: Vec<f64>,
    /// Quantized weights of the trained model.
    pub quantized: Vec<QuantizedRowMatrix>,
}

struct Forward {
    /// Dequantized activations entering each layer (index 0 is the input).
    acts: Vec<Matrix>,
    weights: Vec<Matrix>,
    quantized: Vec<QuantizedRowMatrix>,
}

fn forward(model: &ToyModel, x: &Matrix, cfg: &QatConfig) -> Result<Forward> {
    let b = cfg.bits.b();
    let mut act = quantize_activations(x, b)?;
    let mut acts = vec![Matrix::from_vec(x.rows(), x.cols(), act.dequantize())?];
    let mut weights = Vec::with_capacity(model.layers.len());
    let mut quantized = Vec::with_capacity(model.layers.len());
    for layer in &model.layers {
        let qw = quantize_matrix(&layer.weights, cfg.bits, cfg.k_pot, layer.n_heads)?;
        let w_hat = qw.dequantize();
        let pre = w_hat.matmul(acts.last().expect("input present"))?;
        act = quantize_activations(&pre, b)?;
        acts.push(Matrix::from_vec(pre.rows(), pre.cols(), act.dequantize())?);
        weights.push(w_hat);
        quantized.push(qw);
    }
    Ok(Forward {
        acts,
        weights,
        quantized,
    })
}

fn mse(y: &Matrix, t: &Matrix) -> f64 {
    let n = y.data().len() as f64;
    y.data()
        .iter()
        .zip(t.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n
}

pub fn qat_train_toy(model: ToyModel, data: &ToyDataset, cfg: &QatConfig) -> Result<QatOutcome> {
    qat_train_toy_with(model, data, cfg, |_, _| {})
}

/// Like [`qat_train_toy`], calling `observe(step, quantized_weights)` with
/// the quantized weights used by every training step.
pub fn qat_train_toy_with<F>(
    mut model: ToyModel,
    data: &ToyDataset,
    cfg: &QatConfig,
    mut observe: F,
) -> Result<QatOutcome>
where
    F: FnMut(usize, &[QuantizedRowMatrix]),
{
    if !(cfg.learning_rate.is_finite() && cfg.learning_rate >= 0.0) {
        return Err(domain(format!(
            "learning rate must be finite and non-negative, got {}",
            cfg.learning_rate
        )));
    }
    if data.is_empty() {
        return Err(domain("empty dataset"));
    }
    if model.layers.is_empty() {
        return Err(domain("model has no layers"));
    }
    if data.inputs.rows() != model.input_dim() || data.targets.rows() != model.output_dim() {
        return Err(Error::Shape(format!(
            "dataset is {}->{}, model is {}->{}",
            data.inputs.rows(),
            data.targets.rows(),
            model.input_dim(),
            model.output_dim()
        )));
    }
    let batch = cfg.batch_size.unwrap_or(data.len()).clamp(1, data.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trace = Vec::new();
    let mut step = 0;

    for _ in 0..cfg.epochs {
        if batch < data.len() {
            order.shuffle(&mut rng);
        }
        for idx in order.chunks(batch) {
            let full = forward(&model, &data.inputs, cfg)?;
            trace.push(mse(full.acts.last().expect("output"), &data.targets));

            let (x, t) = data.columns(idx);
            let fw = forward(&model, &x, cfg)?;
            observe(step, &fw.quantized);
            let y = fw.acts.last().expect("output");
            let scale = 2.0 / y.data().len() as f64;
            let grad = y
                .data()
                .iter()
                .zip(t.data())
                .map(|(a, b)| scale * (a - b))
                .collect();
            let mut grad = Matrix::from_vec(y.rows(), y.cols(), grad)?;
            for i in (0..model.layers.len()).rev() {
                let d_w = grad.matmul(&fw.acts[i].transpose())?;
                if i > 0 {
                    grad = fw.weights[i].transpose().matmul(&grad)?;
                }
                let w = &mut model.layers[i].weights;
                for r in 0..w.rows() {
                    for (wv, g) in w.row_mut(r).iter_mut().zip(d_w.row(r)) {
                        *wv -= cfg.learning_rate * g;
                    }
                }
            }
            step += 1;
        }
    }
    let last = forward(&model, &data.inputs, cfg)?;
    trace.push(mse(last.acts.last().expect("output"), &data.targets));
    Ok(QatOutcome {
        model,
        loss_trace: trace,
        quantized: last.quantized,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims(m: usize, n: usize) -> LayerDims {
        LayerDims::new("toy", m, n, 1, 1, false).unwrap()
    }

    fn reference(k_pot: f64, lr: f64) -> (ToyModel, ToyDataset, QatConfig) {
        let model = ToyModel::from_schedule(&[dims(4, 4)], 7).unwrap();
        let data = ToyDataset::synthetic(4, 4, 32, 7).unwrap();
        let cfg = QatConfig {
            bits: BitWidths::new(8, 4).unwrap(),
            k_pot,
            epochs: 200,
            batch_size: None,
            learning_rate: lr,
            seed: 7,
        };
        (model, data, cfg)
    }

    #[test]
    fn zero_learning_rate_keeps_loss_constant() {
        let (model, data, cfg) = reference(0.5, 0.0);
        let out = qat_train_toy(model.clone(), &data, &cfg).unwrap();
        assert_eq!(out.loss_trace.len(), 201);
        assert!(out.loss_trace.iter().all(|&l| l == out.loss_trace[0]));
        assert_eq!(out.model, model);
    }

    #[test]
    fn rejects_bad_arguments() {
        let (model, data, mut cfg) = reference(0.5, -0.1);
        assert!(qat_train_toy(model.clone(), &data, &cfg).is_err());
        cfg.learning_rate = 0.1;
        let empty = ToyDataset {
            inputs: Matrix::zeros(4, 0),
            targets: Matrix::zeros(4, 0),
        };
        assert!(qat_train_toy(model, &empty, &cfg).is_err());
    }

    #[test]
    fn schedule_must_chain() {
        assert!(ToyModel::from_schedule(&[dims(4, 4), dims(4, 8)], 1).is_err());
        assert!(ToyModel::from_schedule(&[dims(8, 4), dims(4, 8)], 1).is_ok());
        assert!(ToyModel::from_schedule(&[dims(128, 4)], 1).is_err());
    }
}
