//! Dense row-major tensors with rank 1 to 4.
//!
//! Images use the N×H×W×C layout throughout the crate.

mod io;

pub use io::{read_any, read_tensor, read_tensor_file, write_tensor, write_tensor_file, AnyTensor};

use std::fmt;
use std::iter::Sum;

use num_traits::Float;
use thiserror::Error;

pub const MAX_RANK: usize = 4;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },
    #[error("data length {len} does not match shape {shape:?}")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("axis {axis} out of range for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("bad magic {found:?}, expected \"FTNSR1\"")]
    BadMagic { found: Vec<u8> },
    #[error("truncated tensor payload: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),
    #[error("dtype mismatch: file holds {found:?}, caller asked for {expected:?}")]
    DtypeMismatch { expected: DType, found: DType },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            other => Err(TensorError::UnknownDtype(other)),
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Element type of a [`Tensor`]: `f32` for training and serving, `f64` for
/// gradient checks.
pub trait Scalar: Float + Sum + Default + Send + Sync + fmt::Debug + fmt::Display + 'static {
    const DTYPE: DType;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Scale,
    Maximum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
}

/// Right-hand operand of an element-wise operation.
#[derive(Clone, Copy)]
pub enum Operand<'a, T> {
    Tensor(&'a Tensor<T>),
    Scalar(T),
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(TensorError::InvalidShape {
            shape: shape.to_vec(),
            reason: format!("rank must be 1..={MAX_RANK}"),
        });
    }
    if shape.contains(&0) {
        return Err(TensorError::InvalidShape {
            shape: shape.to_vec(),
            reason: "extents must be >= 1".into(),
        });
    }
    Ok(shape.iter().product())
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let len = check_shape(shape)?;
        if data.len() != len {
            return Err(TensorError::LengthMismatch {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        let len = check_shape(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Result<Self> {
        let len = check_shape(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: (0..len).map(&mut f).collect(),
        })
    }

    pub fn from_f64_slice(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| T::from_f64(v)).collect())
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len = check_shape(shape)?;
        if len != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                left: self.shape,
                right: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn elementwise(&self, op: ElementwiseOp, rhs: Operand<'_, T>) -> Result<Tensor<T>> {
        let apply = |a: T, b: T| match op {
            ElementwiseOp::Add => a + b,
            ElementwiseOp::Sub => a - b,
            ElementwiseOp::Mul | ElementwiseOp::Scale => a * b,
            ElementwiseOp::Maximum => {
                if b > a {
                    b
                } else {
                    a
                }
            }
        };
        let data = match rhs {
            Operand::Scalar(b) => self.data.iter().map(|&a| apply(a, b)).collect(),
            Operand::Tensor(other) => {
                if other.shape != self.shape {
                    return Err(TensorError::ShapeMismatch {
                        op: op_name(op),
                        left: self.shape.clone(),
                        right: other.shape.clone(),
                    });
                }
                self.data
                    .iter()
                    .zip(&other.data)
                    .map(|(&a, &b)| apply(a, b))
                    .collect()
            }
        };
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.elementwise(ElementwiseOp::Add, Operand::Tensor(other))
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.elementwise(ElementwiseOp::Sub, Operand::Tensor(other))
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.elementwise(ElementwiseOp::Mul, Operand::Tensor(other))
    }

    pub fn scale(&self, factor: T) -> Tensor<T> {
        self.map(|v| v * factor)
    }

    pub fn maximum(&self, floor: T) -> Tensor<T> {
        self.map(|v| if floor > v { floor } else { v })
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        if other.shape != self.shape {
            return Err(TensorError::ShapeMismatch {
                op: "add_assign",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, &b)| *a = *a + b);
        Ok(())
    }

    /// Reduces over `axes`, removing them from the shape. Reducing every axis
    /// yields a one-element rank-1 tensor.
    pub fn reduce(&self, op: ReduceOp, axes: &[usize]) -> Result<Tensor<T>> {
        let rank = self.rank();
        let mut reduced = [false; MAX_RANK];
        for &axis in axes {
            if axis >= rank {
                return Err(TensorError::InvalidAxis { axis, rank });
            }
            reduced[axis] = true;
        }
        let out_shape: Vec<usize> = (0..rank)
            .filter(|&a| !reduced[a])
            .map(|a| self.shape[a])
            .collect();
        let out_shape = if out_shape.is_empty() { vec![1] } else { out_shape };
        let out_len: usize = out_shape.iter().product();
        let mut acc = vec![0.0f64; out_len];

        let strides = strides(&self.shape);
        let mut out_strides = vec![0usize; rank];
        let mut s = 1;
        for a in (0..rank).rev() {
            if !reduced[a] {
                out_strides[a] = s;
                s *= self.shape[a];
            }
        }
        for (flat, &v) in self.data.iter().enumerate() {
            let mut o = 0;
            for a in 0..rank {
                let idx = (flat / strides[a]) % self.shape[a];
                o += idx * out_strides[a];
            }
            acc[o] += v.as_f64();
        }
        let count = (self.len() / out_len) as f64;
        let data = acc
            .into_iter()
            .map(|v| match op {
                ReduceOp::Sum => T::from_f64(v),
                ReduceOp::Mean => T::from_f64(v / count),
            })
            .collect();
        Tensor::new(&out_shape, data)
    }

    pub fn sum(&self) -> T {
        T::from_f64(self.data.iter().map(|v| v.as_f64()).sum::<f64>())
    }

    pub fn mean(&self) -> T {
        T::from_f64(self.data.iter().map(|v| v.as_f64()).sum::<f64>() / self.len() as f64)
    }

    /// Flat index of the largest element; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.data)
    }

    /// Per-row argmax of an N×K tensor.
    pub fn argmax_rows(&self) -> Result<Vec<usize>> {
        if self.rank() != 2 {
            return Err(TensorError::InvalidShape {
                shape: self.shape.clone(),
                reason: "argmax_rows expects rank 2".into(),
            });
        }
        Ok(self.data.chunks(self.shape[1]).map(argmax).collect())
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut out = vec![1; shape.len()];
    for a in (0..shape.len().saturating_sub(1)).rev() {
        out[a] = out[a + 1] * shape[a + 1];
    }
    out
}

fn op_name(op: ElementwiseOp) -> &'static str {
    match op {
        ElementwiseOp::Add => "add",
        ElementwiseOp::Sub => "sub",
        ElementwiseOp::Mul => "mul",
        ElementwiseOp::Scale => "scale",
        ElementwiseOp::Maximum => "maximum",
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor<{:?}>{:?} [", T::DTYPE, self.shape)?;
        for (i, v) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v}")?;
        }
        if self.data.len() > SHOWN {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}
