use crate::{Error, Result};
use num_traits::Float;

/// Floating point element type for tensors and graphs. Implemented for f32
/// and f64; the whole model is generic over this so gradient checking can
/// run in f64 while training runs in whichever width the caller picks.
pub trait Scalar:
    Float
    + num_traits::NumAssignOps
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Identifier written into file headers, e.g. "f32le".
    const DTYPE: &'static str;
    /// Element width in bytes when serialized little-endian.
    const BYTES: usize;

    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    /// Reads one element from a little-endian slice of exactly `BYTES` bytes.
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32le";
    const BYTES: usize = 4;

    fn of(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("f32 needs 4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64le";
    const BYTES: usize = 8;

    fn of(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("f64 needs 8 bytes"))
    }
}

/// Dense row-major tensor. Shape dimensions are positive, and constructors
/// reject non-finite data, so a tensor in hand always holds finite values
/// unless mutated through `data_mut` (callers that mutate re-validate).
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::invalid("tensor shape must have at least one dim"));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!(
                "tensor shape {shape:?} has a zero dimension"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("tensor data contains non-finite values"));
        }
        Ok(Tensor { shape, data })
    }

    /// Internal constructor for data produced by already-validated math on
    /// validated inputs; skips the finiteness scan.
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    /// Zero-filled tensor. Panics on an invalid shape, which is a programmer
    /// error rather than an input error.
    pub fn zeros(shape: &[usize]) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d > 0),
            "invalid shape {shape:?}"
        );
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); numel],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    /// Tensor with entries drawn uniformly from (-bound, bound). Draw order
    /// is row-major, so a given generator state yields a fixed tensor.
    pub fn uniform(rng: &mut impl rand::Rng, shape: &[usize], bound: f64) -> Self {
        let mut t = Self::zeros(shape);
        for v in &mut t.data {
            *v = T::of(rng.gen_range(-bound..bound));
        }
        t
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<T>) -> Result<Self> {
        let len = data.len();
        Self::new(vec![len], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn is_vector(&self) -> bool {
        self.shape.len() == 1
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    /// Row count for matrices, length for vectors.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Column count for matrices; errors are avoided by callers checking
    /// `is_matrix` first, so this panics on misuse.
    pub fn cols(&self) -> usize {
        assert!(self.is_matrix(), "cols() on shape {:?}", self.shape);
        self.shape[1]
    }

    pub fn row(&self, i: usize) -> &[T] {
        assert!(self.is_matrix(), "row() on shape {:?}", self.shape);
        let c = self.shape[1];
        &self.data[i * c..(i + 1) * c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element-wise conversion to a different scalar width via f64.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    /// Serializes shape-less raw data as little-endian bytes.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * T::BYTES);
        for &v in &self.data {
            v.write_le(&mut out);
        }
        out
    }

    /// Rebuilds a tensor of the given shape from little-endian bytes.
    pub fn from_le_bytes(shape: Vec<usize>, bytes: &[u8]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if bytes.len() != numel * T::BYTES {
            return Err(Error::invalid(format!(
                "byte payload of {} does not match shape {shape:?} ({} expected)",
                bytes.len(),
                numel * T::BYTES
            )));
        }
        let data = bytes.chunks_exact(T::BYTES).map(T::read_le).collect();
        Self::new(shape, data)
    }
}
