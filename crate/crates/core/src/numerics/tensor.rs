//! The dense value type and its binary dump format.
//!
//! Dump layout (all integers little-endian):
//!
//! | bytes | content |
//! |-------|---------|
//! | 8     | magic `MOELABT\0` |
//! | 4     | format version (`u32`, currently 1) |
//! | 4     | reserved, zero |
//! | 4     | rank `r` (`u32`) |
//! | 8·r   | extents (`u64` each) |
//! | 1     | dtype tag (1 = f32, 2 = f64) |
//! | …     | values, row-major, little-endian |
//!
//! Gradients are not serialized.

use std::io::Read;

use super::{DType, Real, Rng};
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: [u8; 8] = *b"MOELABT\0";
pub const TENSOR_VERSION: u32 = 1;

/// Dense n-dimensional array with a same-shape gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffTensor<F> {
    shape: Vec<usize>,
    values: Vec<F>,
    grad: Vec<F>,
    requires_grad: bool,
}

impl<F: Real> DiffTensor<F> {
    /// Constant tensor (no gradient slot).
    pub fn new(shape: &[usize], values: Vec<F>) -> Result<Self> {
        let want: usize = shape.iter().product();
        if want != values.len() {
            return Err(Error::Shape {
                op: "tensor",
                left: shape.to_vec(),
                right: vec![values.len()],
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            values,
            grad: Vec::new(),
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            values: vec![F::zero(); n],
            grad: Vec::new(),
            requires_grad: false,
        }
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        let mut t = Self::zeros(shape);
        t.values.fill(value);
        t
    }

    pub fn scalar(value: F) -> Self {
        Self::full(&[], value)
    }

    pub fn randn(shape: &[usize], std: f64, rng: &mut Rng) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            values: rng.normal_vec(n, std),
            grad: Vec::new(),
            requires_grad: false,
        }
    }

    /// Marks the tensor as a trainable leaf and allocates a zeroed gradient.
    pub fn requires_grad(mut self) -> Self {
        self.set_requires_grad(true);
        self
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if on {
            self.grad = vec![F::zero(); self.values.len()];
        } else {
            self.grad.clear();
        }
    }

    pub fn is_trainable(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[F] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [F] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<F> {
        self.values
    }

    /// Empty when the tensor does not require gradients.
    pub fn grad(&self) -> &[F] {
        &self.grad
    }

    pub fn grad_mut(&mut self) -> &mut [F] {
        &mut self.grad
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(F::zero());
    }

    /// Adds `g` into the gradient slot. No-op for constants.
    pub fn accumulate_grad(&mut self, g: &[F]) {
        if !self.requires_grad {
            return;
        }
        debug_assert_eq!(g.len(), self.grad.len());
        for (a, b) in self.grad.iter_mut().zip(g) {
            *a = *a + *b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Element-type conversion preserving shape and the trainable flag.
    pub fn cast<G: Real>(&self) -> DiffTensor<G> {
        let values = self
            .values
            .iter()
            .map(|v| G::from_f64_lossy(v.to_f64_lossy()))
            .collect();
        let mut out = DiffTensor {
            shape: self.shape.clone(),
            values,
            grad: Vec::new(),
            requires_grad: false,
        };
        out.set_requires_grad(self.requires_grad);
        out
    }

    pub fn dump(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(29 + 8 * self.shape.len() + self.len() * F::DTYPE.size());
        self.dump_into(&mut out);
        out
    }

    pub fn dump_into(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&TENSOR_MAGIC);
        out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.push(F::DTYPE as u8);
        for &v in &self.values {
            v.write_le(out);
        }
    }

    /// Reads one dump. A dump written with the other precision is converted.
    pub fn load(reader: &mut impl Read) -> Result<Self> {
        let fmt = |e: std::io::Error| Error::Format(format!("tensor dump: {e}"));
        let mut header = [0u8; 16];
        reader.read_exact(&mut header).map_err(fmt)?;
        if header[..8] != TENSOR_MAGIC {
            return Err(Error::Format("tensor dump: bad magic".into()));
        }
        let version = u32::from_le_bytes(header[8..12].try_into().unwrap());
        if version != TENSOR_VERSION {
            return Err(Error::Format(format!(
                "tensor dump: unsupported version {version}"
            )));
        }
        let mut word = [0u8; 4];
        reader.read_exact(&mut word).map_err(fmt)?;
        let rank = u32::from_le_bytes(word) as usize;
        if rank > 16 {
            return Err(Error::Format(format!("tensor dump: rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut ext = [0u8; 8];
            reader.read_exact(&mut ext).map_err(fmt)?;
            shape.push(u64::from_le_bytes(ext) as usize);
        }
        let mut tag = [0u8; 1];
        reader.read_exact(&mut tag).map_err(fmt)?;
        let dtype = DType::from_tag(tag[0])
            .ok_or_else(|| Error::Format(format!("tensor dump: dtype tag {}", tag[0])))?;
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * dtype.size()];
        reader.read_exact(&mut raw).map_err(fmt)?;
        let values = match dtype {
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| F::from_f64_lossy(f32::read_le(c) as f64))
                .collect(),
            DType::F64 => raw
                .chunks_exact(8)
                .map(|c| F::from_f64_lossy(f64::read_le(c)))
                .collect(),
        };
        DiffTensor::new(&shape, values)
    }
}
