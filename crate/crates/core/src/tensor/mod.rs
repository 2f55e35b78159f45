//! Dense double-precision tensors and the reverse-mode tape that
//! differentiates every primitive the model uses.

mod check;
mod tape;

pub use check::{finite_difference_check, finite_difference_check_sampled};
pub use tape::{Gradients, Primitive, Tape, Var};

use crate::error::{Error, Result};

/// A dense row-major tensor of `f64` values.
///
/// All tape primitives operate on rank-2 tensors; vectors are stored as
/// `1 x n` rows and scalars as `1 x 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn from_shape_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidArgument(format!(
                "shape {shape:?} implies {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::from_shape_vec(vec![rows, cols], data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            shape: vec![rows, cols],
            data: vec![0.0; rows * cols],
        }
    }

    pub fn full(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            shape: vec![rows, cols],
            data: vec![value; rows * cols],
        }
    }

    /// A `1 x n` row vector.
    pub fn row(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::from_shape_vec(vec![1, n], data)
    }

    /// A `1 x 1` scalar.
    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1, 1],
            data: vec![value],
        }
    }

    /// Row-selection matrix `S` (`len x total`) with `S[i][start+i] = 1`,
    /// so `S . X` picks rows `start..start+len` of `X`.
    pub fn row_selector(start: usize, len: usize, total: usize) -> Self {
        let mut t = Self::zeros(len, total);
        for i in 0..len {
            t.data[i * total + start + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(Error::InvalidShape {
                primitive: "dims2",
                shape: self.shape.clone(),
                expected: "rank-2 tensor",
            }),
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        let cols = self.shape[self.shape.len() - 1];
        self.data[row * cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        let cols = self.shape[self.shape.len() - 1];
        self.data[row * cols + col] = value;
    }

    pub fn row_slice(&self, row: usize) -> &[f64] {
        let cols = self.shape[self.shape.len() - 1];
        &self.data[row * cols..(row + 1) * cols]
    }

    pub fn as_scalar(&self) -> Result<f64> {
        if self.numel() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::NonScalarOutput {
                shape: self.shape.clone(),
            })
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transposed(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = Self::zeros(c, r);
        for i in 0..r {
            for j in 0..c {
                out.data[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(out)
    }

    /// In-place element-wise accumulation; shapes must match exactly.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                primitive: "add_assign",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
        Ok(())
    }

    pub fn scale_in_place(&mut self, factor: f64) {
        for v in &mut self.data {
            *v *= factor;
        }
    }

    /// Frobenius norm squared.
    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// `out = A . B` for row-major `m x k` and `k x n` operands.
pub(crate) fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    out.fill(0.0);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bpj) in orow.iter_mut().zip(brow) {
                *o += aip * bpj;
            }
        }
    }
}

/// `out = A . B^T` for `m x k` and `n x k` operands.
pub(crate) fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            *o = acc;
        }
    }
}

/// `out = A^T . B` for `k x m` and `k x n` operands.
pub(crate) fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    out.fill(0.0);
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &api) in arow.iter().enumerate() {
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bpj) in orow.iter_mut().zip(brow) {
                *o += api * bpj;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_element_count() {
        assert!(Tensor::from_shape_vec(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::from_shape_vec(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::from_shape_vec(vec![0, 3], vec![]).is_err());
    }

    #[test]
    fn transpose_round_trip() {
        let t = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let tt = t.transposed().unwrap().transposed().unwrap();
        assert_eq!(t, tt);
    }

    #[test]
    fn gemm_kernels_agree() {
        // A (2x3), B (3x2); checks nt/tn against the plain product.
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
        let mut nn = [0.0; 4];
        gemm_nn(2, 3, 2, &a, &b, &mut nn);

        let bt = Tensor::matrix(3, 2, b.to_vec()).unwrap().transposed().unwrap();
        let mut nt = [0.0; 4];
        gemm_nt(2, 3, 2, &a, bt.data(), &mut nt);
        assert_eq!(nn, nt);

        let at = Tensor::matrix(2, 3, a.to_vec()).unwrap().transposed().unwrap();
        let mut tn = [0.0; 4];
        gemm_tn(2, 3, 2, at.data(), &b, &mut tn);
        assert_eq!(nn, tn);
    }
}
