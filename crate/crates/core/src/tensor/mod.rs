//! Dense row-major tensors and the primitive math the rest of the crate composes.
//!
//! Storage is always `f64`. A tensor tagged [`Precision::F32`] has every
//! element rounded through `f32` after each operation, which emulates 32-bit
//! compute closely enough for tolerance tests without a second code path.
//!
//! Element buffers are reference counted: cloning or reshaping a tensor shares
//! the buffer, and [`Tensor::buffer_id`] identifies it. The activation meter
//! relies on this to count a tensor retained by several layers only once.

mod ops;
mod qr;
mod rng;
mod vjp;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};

pub use ops::{
    add, causal_attention, cross_entropy, cross_entropy_backward, gelu, gelu_grad, layer_norm,
    matmul, matmul_nt, matmul_tn, scale, softmax_rows, sub, LayerNormOutput,
};
pub use qr::{numerical_rank, qr, RANK_TOLERANCE};
pub use rng::{randn, RngState};
pub use vjp::{forward, vjp, OpKind, Saved, Slot};

/// Compute precision of a tensor's elements.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

impl Precision {
    /// The lower of two precisions; binary ops produce results at this precision.
    pub fn join(self, other: Precision) -> Precision {
        if self == Precision::F32 || other == Precision::F32 {
            Precision::F32
        } else {
            Precision::F64
        }
    }

    pub fn bytes(self) -> usize {
        match self {
            Precision::F64 => 8,
            Precision::F32 => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TensorRepr", into = "TensorRepr")]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    precision: Precision,
}

#[derive(Serialize, Deserialize)]
struct TensorRepr {
    shape: Vec<usize>,
    #[serde(default)]
    precision: Precision,
    data: Vec<f64>,
}

impl TryFrom<TensorRepr> for Tensor {
    type Error = Error;

    fn try_from(repr: TensorRepr) -> Result<Self> {
        Tensor::new(repr.shape, repr.data).map(|t| t.with_precision(repr.precision))
    }
}

impl From<Tensor> for TensorRepr {
    fn from(t: Tensor) -> Self {
        TensorRepr {
            shape: t.shape,
            precision: t.precision,
            data: Arc::try_unwrap(t.data).unwrap_or_else(|shared| (*shared).clone()),
        }
    }
}

impl Tensor {
    /// Builds a tensor, validating the element count and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(dim_err("new", format!("extents must be positive, got {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(dim_err(
                "new",
                format!("shape {shape:?} needs {expected} elements, got {}", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("new"));
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
            precision: Precision::F64,
        })
    }

    /// Constructor for op outputs: rounds to `precision` and rejects NaN/Inf.
    pub(crate) fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        mut data: Vec<f64>,
        precision: Precision,
    ) -> Result<Self> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if precision == Precision::F32 {
            data.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(op));
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
            precision,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Self::new(vec![1], vec![value])
    }

    pub fn eye(n: usize) -> Result<Self> {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self::new(vec![n, n], data)
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        if rows.iter().any(|r| r.as_ref().len() != cols) {
            return Err(dim_err("from_rows", "ragged rows"));
        }
        let data = rows.iter().flat_map(|r| r.as_ref().iter().copied()).collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Last extent.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("shape is never empty")
    }

    /// Product of all extents but the last: the row count once leading dims are folded.
    pub fn rows(&self) -> usize {
        self.numel() / self.cols()
    }

    /// Identity of the element buffer, shared by clones and reshapes.
    pub fn buffer_id(&self) -> usize {
        Arc::as_ptr(&self.data) as usize
    }

    /// Mutable access to the elements; copies the buffer first if it is shared.
    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<f64> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    pub fn with_precision(mut self, precision: Precision) -> Self {
        if precision == Precision::F32 && self.precision != Precision::F32 {
            self.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
        self.precision = precision;
        self
    }

    /// Same buffer, new shape.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.numel() || shape.contains(&0) {
            return Err(dim_err(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
            precision: self.precision,
        })
    }

    /// Folds leading dimensions: `[.., n]` becomes `[rows, n]`.
    pub fn as_matrix(&self) -> Self {
        self.reshape(&[self.rows(), self.cols()])
            .expect("fold preserves element count")
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        let mut flat = 0;
        for (i, (&ix, &ext)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < ext, "index {ix} out of bounds for axis {i} of extent {ext}");
            flat = flat * ext + ix;
        }
        self.data[flat]
    }

    /// Transpose of a matrix (rank-2 tensor).
    pub fn transpose(&self) -> Result<Self> {
        if self.shape.len() != 2 {
            return Err(dim_err("transpose", format!("need a matrix, got {:?}", self.shape)));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::from_op("transpose", vec![c, r], out, self.precision)
    }

    pub fn map(&self, op: &'static str, f: impl Fn(f64) -> f64) -> Result<Self> {
        let data = self.data.iter().map(|&v| f(v)).collect();
        Tensor::from_op(op, self.shape.clone(), data, self.precision)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Largest elementwise absolute difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.check_same_shape("max_abs_diff", other)?;
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs())))
    }

    /// Bitwise element equality (distinguishes `0.0` from `-0.0`).
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// `self += factor * other`, in place.
    pub fn axpy(&mut self, factor: f64, other: &Tensor) -> Result<()> {
        self.check_same_shape("axpy", other)?;
        let precision = self.precision;
        let src = Arc::clone(&other.data);
        for (p, g) in self.data_mut().iter_mut().zip(src.iter()) {
            *p += factor * g;
            if precision == Precision::F32 {
                *p = *p as f32 as f64;
            }
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("axpy"));
        }
        Ok(())
    }

    pub(crate) fn check_same_shape(&self, op: &'static str, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(dim_err(op, format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(())
    }
}
