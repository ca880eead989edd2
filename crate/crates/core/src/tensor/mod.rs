//! Dense row-major `f32` tensors with a reverse-mode autodiff tape.
//!
//! A [`Tensor`] is plain storage: a shape, a flat buffer and an optional
//! gradient buffer. Differentiable computation happens on a [`Tape`], which
//! records every operation applied to [`Var`] handles and replays them in
//! reverse on [`Tape::backward`].
//!
//! Broadcasting is deliberately narrow: elementwise ops accept an operand
//! whose shape is a suffix of the other's (so a bias `[d]` can be added to
//! `[B, Q, d]`), and `matmul` broadcasts only over leading batch dimensions.

mod init;
mod kernels;
mod optim;
mod tape;

pub use init::{derive_seed, seeded_init, seeded_rng, Init, SeededRng};
pub use optim::{AdamW, AdamWConfig};
pub use tape::{Gradients, Tape, Var};
pub(crate) use init::init_with_rng;

/// Tanh-approximated GELU on a scalar.
pub fn gelu(x: f32) -> f32 {
    kernels::gelu(x)
}

use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },
    #[error("index {index} out of range for axis of length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("contract violation: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense tensor of `f32` values in row-major order.
///
/// Invariants: `shape.iter().product() == data.len()`, every dimension is
/// positive, every value is finite, and `grad` (when present) has the same
/// length as `data`. A rank-0 tensor (empty shape) holds one scalar.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        check_shape(shape)?;
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::InvalidShape {
                shape: shape.to_vec(),
                reason: format!("expected {numel} elements, got {}", data.len()),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: "Tensor::new" });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Result<Self> {
        check_shape(shape)?;
        Self::new(shape, vec![value; shape.iter().product()])
    }

    pub fn scalar(value: f32) -> Result<Self> {
        Self::new(&[], vec![value])
    }

    /// Builds a 2-D tensor from nested rows; convenient in tests and fixtures.
    pub fn from_rows(rows: &[&[f32]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(TensorError::InvalidShape {
                shape: vec![rows.len(), cols],
                reason: "ragged rows".into(),
            });
        }
        Self::new(&[rows.len(), cols], rows.iter().flat_map(|r| r.iter().copied()).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f32> {
        if self.data.len() != 1 {
            return Err(TensorError::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Mutates the buffer in place, re-validating finiteness afterwards.
    pub fn update<F: FnOnce(&mut [f32])>(&mut self, f: F) -> Result<()> {
        f(&mut self.data);
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(TensorError::NonFinite { op: "Tensor::update" })
        }
    }

    /// Replaces the contents with `values` (same length required).
    pub fn assign(&mut self, values: &[f32]) -> Result<()> {
        if values.len() != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "assign",
                lhs: self.shape.clone(),
                rhs: vec![values.len()],
            });
        }
        self.update(|d| d.copy_from_slice(values))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let mut t = Tensor::new(shape, self.data.clone())?;
        t.requires_grad = self.requires_grad;
        Ok(t)
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        }
    }

    pub fn with_requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f32]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "accumulate_grad",
                lhs: self.shape.clone(),
                rhs: vec![g.len()],
            });
        }
        if !g.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: "accumulate_grad" });
        }
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, v)| *b += v),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// SHA-256 over the shape (u32 LE per dim) followed by the raw f32 LE bytes.
    pub fn content_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update((self.shape.len() as u32).to_le_bytes());
        for &d in &self.shape {
            h.update((d as u32).to_le_bytes());
        }
        for v in &self.data {
            h.update(v.to_le_bytes());
        }
        h.finalize().into()
    }

    pub fn hash_hex(&self) -> String {
        hex::encode(self.content_hash())
    }

    /// Bitwise equality of shape and values.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.contains(&0) {
        return Err(TensorError::InvalidShape {
            shape: shape.to_vec(),
            reason: "dimensions must be positive".into(),
        });
    }
    Ok(())
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_buffer() {
        assert!(matches!(
            Tensor::new(&[2, 3], vec![0.0; 5]),
            Err(TensorError::InvalidShape { .. })
        ));
        assert!(Tensor::new(&[0, 3], vec![]).is_err());
    }

    #[test]
    fn rejects_non_finite() {
        assert!(matches!(
            Tensor::new(&[2], vec![1.0, f32::NAN]),
            Err(TensorError::NonFinite { .. })
        ));
        let mut t = Tensor::zeros(&[2]).unwrap();
        assert!(t.update(|d| d[0] = f32::INFINITY).is_err());
    }

    #[test]
    fn grad_shape_must_match() {
        let mut t = Tensor::zeros(&[3]).unwrap();
        assert!(t.accumulate_grad(&[1.0, 2.0]).is_err());
        t.accumulate_grad(&[1.0, 2.0, 3.0]).unwrap();
        t.accumulate_grad(&[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(t.grad().unwrap(), &[2.0, 3.0, 4.0]);
    }

    #[test]
    fn hash_depends_on_shape_and_values() {
        let a = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = a.reshape(&[4]).unwrap();
        assert_ne!(a.content_hash(), b.content_hash());
        assert_eq!(a.content_hash(), a.clone().content_hash());
    }
}
