//! Dense row-major `f64` tensors and a tape-based reverse-mode autodiff engine.
//!
//! The op set is exactly what the federated training objectives need: matmul,
//! elementwise arithmetic, ReLU/softplus/exp/log, batch broadcasting,
//! reductions, slicing, and a fused softmax-cross-entropy. Everything is CPU,
//! 64-bit, and deterministic: repeated forwards over the same inputs are
//! bit-identical.

mod tape;

pub use tape::{Gradients, NodeId, Tape};

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: data length {len} does not match shape {shape:?}")]
    LengthMismatch {
        op: &'static str,
        len: usize,
        shape: Vec<usize>,
    },
    #[error("backward root must be a scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("slice [{start}, {start}+{len}) out of bounds for tensor of {size} elements")]
    SliceOutOfBounds {
        start: usize,
        len: usize,
        size: usize,
    },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
}

/// Dense tensor: row-major `f64` data plus a shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(TensorError::LengthMismatch {
                op: "Tensor::new",
                len: data.len(),
                shape,
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Scalar tensors have shape `[]` or `[1]`.
    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Number of rows when interpreted as a matrix; vectors count as one row.
    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            1 => self.shape[0],
            _ => 1,
        }
    }
}

// ── Raw kernels ─────────────────────────────────────────────────────
//
// The tape and the plain (inference-only) forward passes share these, so a
// recorded forward and an unrecorded one produce bit-identical values.

/// C[m,n] = A[m,k] @ B[k,n], accumulated in row-major ikj order.
pub(crate) fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (c_ij, &b_pj) in c_row.iter_mut().zip(b_row) {
                *c_ij += a_ip * b_pj;
            }
        }
    }
    c
}

/// ReLU with the convention relu'(0) = 0; maps -0.0 to +0.0.
#[inline]
pub(crate) fn relu_scalar(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Numerically stable ln(1 + e^x). Exact identity above the cutoff keeps
/// softplus/softplus-inverse round trips bit-stable for large arguments.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`]: y -> ln(e^y - 1) for y > 0.
#[inline]
pub fn softplus_inv(y: f64) -> f64 {
    debug_assert!(y > 0.0);
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Row-wise log-softmax picked at the label index, written into `out`.
/// Also returns the dense softmax for reuse in the backward pass.
pub(crate) fn log_softmax_pick_kernel(
    logits: &[f64],
    rows: usize,
    cols: usize,
    labels: &[usize],
    out: &mut Vec<f64>,
) -> Vec<f64> {
    let mut probs = vec![0.0; rows * cols];
    out.clear();
    out.reserve(rows);
    for r in 0..rows {
        let row = &logits[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for &z in row {
            denom += (z - max).exp();
        }
        let log_denom = denom.ln();
        let p_row = &mut probs[r * cols..(r + 1) * cols];
        for (p, &z) in p_row.iter_mut().zip(row) {
            *p = (z - max).exp() / denom;
        }
        out.push(row[labels[r]] - max - log_denom);
    }
    probs
}
