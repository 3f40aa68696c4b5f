//! Dense tensors and reverse-mode differentiation.
//!
//! [`Tensor`] is an immutable row-major value. Differentiable computation is
//! recorded on a [`Tape`](tape::Tape): every primitive appends one node, and
//! [`Tape::backward`](tape::Tape::backward) replays the record in reverse to
//! accumulate gradients for tracked leaves only.

pub mod check;
pub mod tape;

use crate::error::{Error, Result};
use num_traits::{Float, FromPrimitive, ToPrimitive};
use std::fmt::Debug;

/// Element type of a stored tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Dtype> {
        match code {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }

    /// Bytes per element.
    pub fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Floating-point element usable by the engine. Training runs in `f32`,
/// gradient-check suites in `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Send + Sync + 'static
{
    const DTYPE: Dtype;

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// Lossless-enough conversion from an `f64` constant.
    fn fl(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 constant")
    }
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

/// Dense row-major tensor. Values are immutable once built; `grad_tracked`
/// marks whether a gradient should be materialized when the tensor becomes a
/// tape leaf.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F: Scalar> {
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<F>,
    pub(crate) grad_tracked: bool,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::Shape(format!("zero extent in shape {shape:?}")));
        }
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} implies {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data, grad_tracked: false })
    }

    pub fn scalar(v: F) -> Self {
        Tensor { shape: vec![1], data: vec![v], grad_tracked: false }
    }

    pub fn vector(data: Vec<F>) -> Self {
        Tensor { shape: vec![data.len()], data, grad_tracked: false }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<F>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![F::zero(); numel], grad_tracked: false }
    }

    pub fn filled(shape: Vec<usize>, v: F) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![v; numel], grad_tracked: false }
    }

    pub fn with_grad(mut self) -> Self {
        self.grad_tracked = true;
        self
    }

    pub fn set_tracked(&mut self, tracked: bool) {
        self.grad_tracked = tracked;
    }

    pub fn tracked(&self) -> bool {
        self.grad_tracked
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    /// Extents of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::Shape(format!("expected rank 2, got {:?}", self.shape))),
        }
    }

    pub fn get2(&self, i: usize, j: usize) -> F {
        let (_, c) = (self.shape[0], self.shape[1]);
        self.data[i * c + j]
    }

    /// Single stored value of a scalar (numel 1) tensor.
    pub fn item(&self) -> Result<F> {
        if self.data.len() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Convert element type; `f32 -> f64` is exact.
    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| G::fl(v.to_f64().expect("finite")))
                .collect(),
            grad_tracked: self.grad_tracked,
        }
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * F::DTYPE.width());
        for &v in &self.data {
            v.write_le(&mut out);
        }
        out
    }
}
