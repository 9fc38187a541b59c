//! Runtime values: scalars, dense row-major tensors, and distributed arrays.
//!
//! Tensor storage is reference-counted so that passing values between task
//! cells is cheap; kernels allocate fresh buffers for their outputs.

use std::fmt;
use std::sync::Arc;

use crate::dist::DistArray;
use crate::error::{Result, RuntimeError};

pub const MAX_RANK: usize = 4;

/// Extents of a dense array, rank 1..=4.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Shape {
    dims: Vec<usize>,
}

impl Shape {
    /// Internal constructor; panics on rank 0 or rank > 4 (a programming
    /// error — script-facing code must validate first, see [`Shape::checked`]).
    pub fn new(dims: impl Into<Vec<usize>>) -> Shape {
        let dims = dims.into();
        assert!(
            !dims.is_empty() && dims.len() <= MAX_RANK,
            "shape rank must be 1..=4, got {}",
            dims.len()
        );
        Shape { dims }
    }

    pub fn checked(dims: Vec<usize>) -> Result<Shape> {
        if dims.is_empty() || dims.len() > MAX_RANK {
            return Err(RuntimeError::Type(format!(
                "array rank must be 1..={MAX_RANK}, got {}",
                dims.len()
            )));
        }
        Ok(Shape { dims })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.dims[axis]
    }

    /// Total element count.
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row-major strides.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.dims.len()];
        for i in (0..self.dims.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.dims[i + 1];
        }
        strides
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.dims.iter().map(|d| d.to_string()).collect();
        write!(f, "{}", parts.join("x"))
    }
}

/// Dense row-major f64 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    shape: Shape,
    data: Arc<Vec<f64>>,
}

impl DenseTensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> DenseTensor {
        assert_eq!(shape.len(), data.len(), "shape {shape} does not match {} elements", data.len());
        DenseTensor { shape, data: Arc::new(data) }
    }

    pub fn zeros(shape: Shape) -> DenseTensor {
        let n = shape.len();
        DenseTensor::new(shape, vec![0.0; n])
    }

    pub fn filled(shape: Shape, v: f64) -> DenseTensor {
        let n = shape.len();
        DenseTensor::new(shape, vec![v; n])
    }

    pub fn from_vec(data: Vec<f64>) -> DenseTensor {
        DenseTensor::new(Shape::new(vec![data.len()]), data)
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Reinterpret the same buffer under a new shape of equal element count.
    pub fn reshaped(&self, shape: Shape) -> DenseTensor {
        assert_eq!(shape.len(), self.len());
        DenseTensor { shape, data: Arc::clone(&self.data) }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> DenseTensor {
        DenseTensor::new(self.shape.clone(), self.data.iter().map(|&x| f(x)).collect())
    }

    /// Bitwise equality (distinguishes -0.0 from 0.0, NaN payloads, etc.).
    pub fn bit_eq(&self, other: &DenseTensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Canonical wire/checksum encoding: rank u32 LE, dims u64 LE, elements f64 LE.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        canonical_bytes(self.shape.dims(), &self.data)
    }

    pub fn from_canonical(bytes: &[u8]) -> Result<DenseTensor> {
        let (dims, elems) = decode_canonical(bytes)?;
        Ok(DenseTensor::new(Shape::checked(dims)?, elems))
    }
}

/// Canonical little-endian serialization of shape-then-elements. A scalar is
/// encoded with rank 0 and a single element.
pub fn canonical_bytes(dims: &[usize], elems: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + dims.len() * 8 + elems.len() * 8);
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &x in elems {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn decode_canonical(bytes: &[u8]) -> Result<(Vec<usize>, Vec<f64>)> {
    let fail = || RuntimeError::Type("malformed canonical tensor encoding".into());
    if bytes.len() < 4 {
        return Err(fail());
    }
    let rank = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let mut off = 4;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        if bytes.len() < off + 8 {
            return Err(fail());
        }
        dims.push(u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()) as usize);
        off += 8;
    }
    let body = &bytes[off..];
    if !body.len().is_multiple_of(8) {
        return Err(fail());
    }
    let elems: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let expected: usize = if rank == 0 { 1 } else { dims.iter().product() };
    if elems.len() != expected {
        return Err(fail());
    }
    Ok((dims, elems))
}

/// A program value flowing through future cells.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Scalar(f64),
    Tensor(DenseTensor),
    Dist(DistArray),
    List(Vec<Value>),
}

impl Value {
    pub fn kind(&self) -> &'static str {
        match self {
            Value::Scalar(_) => "scalar",
            Value::Tensor(_) => "tensor",
            Value::Dist(_) => "distributed array",
            Value::List(_) => "list",
        }
    }

    pub fn as_scalar(&self) -> Result<f64> {
        match self {
            Value::Scalar(x) => Ok(*x),
            other => Err(RuntimeError::Type(format!("expected scalar, got {}", other.kind()))),
        }
    }

    pub fn as_tensor(&self) -> Result<&DenseTensor> {
        match self {
            Value::Tensor(t) => Ok(t),
            other => Err(RuntimeError::Type(format!("expected tensor, got {}", other.kind()))),
        }
    }

    pub fn as_dist(&self) -> Result<&DistArray> {
        match self {
            Value::Dist(d) => Ok(d),
            other => Err(RuntimeError::Type(format!(
                "expected distributed array, got {}",
                other.kind()
            ))),
        }
    }

    /// Canonical bytes for checksumming; scalars encode as rank 0.
    pub fn canonical_bytes(&self) -> Result<Vec<u8>> {
        match self {
            Value::Scalar(x) => Ok(canonical_bytes(&[], &[*x])),
            Value::Tensor(t) => Ok(t.canonical_bytes()),
            Value::Dist(d) => Ok(d.local_core().canonical_bytes()),
            Value::List(_) => Err(RuntimeError::Type("cannot serialize a list value".into())),
        }
    }

    /// Bitwise equality across the same structure.
    pub fn bit_eq(&self, other: &Value) -> bool {
        match (self, other) {
            (Value::Scalar(a), Value::Scalar(b)) => a.to_bits() == b.to_bits(),
            (Value::Tensor(a), Value::Tensor(b)) => a.bit_eq(b),
            (Value::Dist(a), Value::Dist(b)) => a.local().bit_eq(b.local()),
            (Value::List(a), Value::List(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.bit_eq(y))
            }
            _ => false,
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Scalar(x) => write!(f, "{x}"),
            Value::Tensor(t) => {
                write!(f, "[{}]", t.shape())?;
                for v in t.as_slice() {
                    write!(f, " {v}")?;
                }
                Ok(())
            }
            Value::Dist(d) => {
                write!(f, "dist[{} gen {}] local", d.meta().global_shape, d.meta().generation)?;
                for v in d.local_core().as_slice() {
                    write!(f, " {v}")?;
                }
                Ok(())
            }
            Value::List(items) => {
                write!(f, "(")?;
                for (i, v) in items.iter().enumerate() {
                    if i > 0 {
                        write!(f, " ")?;
                    }
                    write!(f, "{v}")?;
                }
                write!(f, ")")
            }
        }
    }
}
