//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! [`Tensor`] is a plain value type (row-major data plus shape). Differentiable
//! programs are built on a [`Tape`]: leaves are copied in, operations are
//! recorded in execution order, and [`Tape::backward`] replays them in exact
//! reverse order. All reductions run in a fixed, documented order so that a
//! given seed and program always reproduce the same bytes.

mod kernels;
mod tape;

pub use tape::{Tape, Var};

use crate::error::{KrError, Result};
use rand::Rng;

/// Seedable RNG used everywhere determinism matters.
pub type KrRng = rand_chacha::ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> KrRng {
    use rand::SeedableRng;
    KrRng::seed_from_u64(seed)
}

/// Standard normal draw via Box-Muller (two uniform draws per sample).
pub fn normal(rng: &mut KrRng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>(); // (0, 1]
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Dense n-dimensional array, row-major, 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    /// Accumulated gradient, same shape as `data` when present.
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(KrError::Dim(format!("zero extent in shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(KrError::Dim(format!(
                "shape {shape:?} implies {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; numel], requires_grad: false, grad: None }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v], requires_grad: false, grad: None }
    }

    /// Seeded Gaussian init with the given standard deviation.
    pub fn randn(shape: &[usize], std: f64, rng: &mut KrRng) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| normal(rng) * std).collect();
        Tensor { shape: shape.to_vec(), data, requires_grad: false, grad: None }
    }

    pub fn requires_grad(mut self, yes: bool) -> Self {
        self.requires_grad = yes;
        self
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) {
        let grad = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (dst, src) in grad.iter_mut().zip(g) {
            *dst += src;
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Named trainable tensor inside a network.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub tensor: Tensor,
    /// Unique path within one network, e.g. "student.block1.conv0.weight".
    pub name: String,
    /// Depth index of the conv layer this parameter belongs to.
    pub layer_index: usize,
}

impl Parameter {
    pub fn new(tensor: Tensor, name: impl Into<String>, layer_index: usize) -> Self {
        Parameter { tensor: tensor.requires_grad(true), name: name.into(), layer_index }
    }
}

/// Mean and population standard deviation over all scalar entries of `params`.
pub fn param_stats(params: &[&Parameter]) -> Result<(f64, f64)> {
    let n: usize = params.iter().map(|p| p.tensor.data.len()).sum();
    if n == 0 {
        return Err(KrError::Usage("param_stats on empty parameter list".into()));
    }
    let mut sum = 0.0;
    for p in params {
        for v in &p.tensor.data {
            sum += v;
        }
    }
    let mean = sum / n as f64;
    let mut sq = 0.0;
    for p in params {
        for v in &p.tensor.data {
            sq += (v - mean) * (v - mean);
        }
    }
    Ok((mean, (sq / n as f64).sqrt()))
}
