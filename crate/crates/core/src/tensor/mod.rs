//! Dense 64-bit tensors, seeded randomness, and a small reverse-mode tape.
//!
//! Everything downstream (the Sinkhorn solver, attention operators, the toy
//! denoiser) is built on the types in this module. Tensors are plain row-major
//! `Vec<f64>` buffers; there is no broadcasting beyond what the denoiser
//! needs, no views, and no GPU path.

mod rng;
mod tape;

pub use rng::Rng;
pub use tape::{Gradients, NodeId, Tape};

use crate::error::{CoreError, Result};

/// A dense row-major tensor of 64-bit reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(CoreError::Dimension(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.shape[1] + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn assert_finite(&self, context: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(CoreError::NonFinite(context.to_string()))
        }
    }

    /// C = self * other for 2-D tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 2 || other.shape.len() != 2 || self.cols() != other.rows() {
            return Err(CoreError::Dimension(format!(
                "matmul {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let (m, k, n) = (self.rows(), self.cols(), other.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let row = &other.data[p * n..(p + 1) * n];
                let dst = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    dst[j] += a * row[j];
                }
            }
        }
        Tensor::matrix(m, n, out)
    }

    /// C = self * other^T for 2-D tensors.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 2 || other.shape.len() != 2 || self.cols() != other.cols() {
            return Err(CoreError::Dimension(format!(
                "matmul_nt {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let (m, k, n) = (self.rows(), self.cols(), other.rows());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += self.data[i * k + p] * other.data[j * k + p];
                }
                out[i * n + j] = acc;
            }
        }
        Tensor::matrix(m, n, out)
    }

    pub fn transpose(&self) -> Tensor {
        let (m, n) = (self.rows(), self.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::matrix(n, m, out).expect("transpose shape")
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
            requires_grad: false,
        }
    }

    pub fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(CoreError::Dimension(format!(
                "zip {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            requires_grad: false,
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|x| x * s)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Per-row log-sum-exp with max-shift, so no intermediate overflows.
pub fn logsumexp_rows(m: &Tensor) -> Result<Vec<f64>> {
    if m.shape.len() != 2 || m.cols() == 0 || m.rows() == 0 {
        return Err(CoreError::Dimension(format!(
            "logsumexp_rows needs a non-empty matrix, got {:?}",
            m.shape
        )));
    }
    m.assert_finite("logsumexp_rows input")?;
    let (rows, cols) = (m.rows(), m.cols());
    let mut out = Vec::with_capacity(rows);
    for i in 0..rows {
        let row = &m.data[i * cols..(i + 1) * cols];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&x| (x - mx).exp()).sum();
        out.push(mx + sum.ln());
    }
    Ok(out)
}

/// Row-wise softmax of a 2-D tensor, max-shifted.
pub fn softmax_rows(m: &Tensor) -> Tensor {
    let (rows, cols) = (m.rows(), m.cols());
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        let row = &m.data[i * cols..(i + 1) * cols];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for j in 0..cols {
            let e = (row[j] - mx).exp();
            out[i * cols + j] = e;
            sum += e;
        }
        for j in 0..cols {
            out[i * cols + j] /= sum;
        }
    }
    Tensor::matrix(rows, cols, out).expect("softmax shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logsumexp_single_element_row_is_identity() {
        let m = Tensor::matrix(1, 1, vec![3.5]).unwrap();
        let out = logsumexp_rows(&m).unwrap();
        assert!((out[0] - 3.5).abs() < 1e-15);
    }

    #[test]
    fn logsumexp_constant_row() {
        let n = 7;
        let c = -2.25;
        let m = Tensor::matrix(1, n, vec![c; n]).unwrap();
        let out = logsumexp_rows(&m).unwrap();
        assert!((out[0] - (c + (n as f64).ln())).abs() < 1e-12);
    }

    #[test]
    fn logsumexp_max_shift_avoids_overflow() {
        let m = Tensor::matrix(1, 2, vec![1000.0, 1000.0]).unwrap();
        let out = logsumexp_rows(&m).unwrap();
        assert!((out[0] - (1000.0 + 2f64.ln())).abs() < 1e-9);
    }

    #[test]
    fn logsumexp_empty_matrix_errors() {
        let m = Tensor::matrix(1, 0, vec![]).unwrap();
        assert!(logsumexp_rows(&m).is_err());
    }

    #[test]
    fn logsumexp_shift_equivariance() {
        let m = Tensor::matrix(2, 3, vec![0.3, -1.2, 2.0, 0.0, 5.0, -4.0]).unwrap();
        let c = 17.5;
        let shifted = m.map(|x| x + c);
        let a = logsumexp_rows(&m).unwrap();
        let b = logsumexp_rows(&shifted).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x + c - y).abs() < 1e-9);
        }
    }

    #[test]
    fn matmul_nt_matches_explicit_transpose() {
        let a = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::matrix(2, 3, vec![0.5, -1.0, 2.0, 1.0, 0.0, -0.5]).unwrap();
        let direct = a.matmul_nt(&b).unwrap();
        let via_t = a.matmul(&b.transpose()).unwrap();
        assert!(direct.max_abs_diff(&via_t) < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        assert!(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0]).is_err());
    }
}
