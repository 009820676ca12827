//! Minimal dense-tensor reverse-mode autodiff and optimization.
//!
//! Everything trains through this module: a flat row-major f32 [`Tensor`],
//! a per-step [`Graph`] that records operations and replays them in reverse,
//! im2col convolutions backed by a tuned GEMM, and Adam with learning-rate
//! schedules. Reductions (losses, per-row sums, log-sum-exp) accumulate in
//! f64 to control drift at small scale; bulk linear algebra stays in f32.
//!
//! Determinism contract: given the same inputs, every operation produces
//! bit-identical results run to run, with or without the `parallel` feature.
//! Parallel paths split work into fixed-size chunks and combine partial
//! results in chunk order, so thread scheduling can never reorder a
//! floating-point reduction.

mod adam;
pub(crate) mod conv;
mod graph;
mod init;
pub(crate) mod par;

pub use adam::{Adam, AdamTick, LrSchedule};
pub use conv::ConvSpec;
pub use graph::{argmax_rows, Graph, NodeId};
pub use init::orthogonal;

use crate::error::{AtcError, Result};

/// Dense n-dimensional f32 array, row-major.
///
/// `grad`, when present, always has the same element count as `data`;
/// gradients only ever appear on tensors with `requires_grad` set.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(AtcError::config(format!(
                "shape {:?} expects {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel], requires_grad: false, grad: None }
    }

    pub fn scalar(v: f32) -> Self {
        Tensor { shape: vec![1], data: vec![v], requires_grad: false, grad: None }
    }

    pub fn param(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let mut t = Tensor::from_vec(shape, data)?;
        t.requires_grad = true;
        Ok(t)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Re-interpret as a different shape with the same element count.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(AtcError::config(format!(
                "cannot reshape {} elements to {:?}",
                self.data.len(),
                shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }
}

/// FNV-1a over the raw little-endian bytes of a parameter list; used for
/// stop-gradient checks and run logs.
pub fn param_hash<'a>(tensors: impl IntoIterator<Item = &'a Tensor>) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for t in tensors {
        for v in t.data() {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
    }
    h
}
