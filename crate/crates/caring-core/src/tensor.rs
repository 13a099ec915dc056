//! Dense row-major f64 tensors and the matrix kernels behind the tape ops.
//!
//! Everything the models need is rank-1/rank-2; higher-rank batches are
//! handled by the callers as flattened rows. The three matmul kernels cover
//! the forward and both backward products of a dense layer. Each output
//! element is produced by exactly one sequential accumulation, so results do
//! not depend on the thread count.

use crate::error::{CoreError, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(n, data.len(), "shape {:?} does not cover {} values", shape, data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1, 1], data: vec![v] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Tensor { shape: vec![r, c], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Rows of a rank-2 tensor; a rank-1 tensor counts as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            2 => self.shape[0],
            _ => panic!("rows() on rank-{} tensor", self.shape.len()),
        }
    }

    /// Columns of a rank-2 tensor; the length of a rank-1 tensor.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            2 => self.shape[1],
            _ => panic!("cols() on rank-{} tensor", self.shape.len()),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn scalar_value(&self) -> f64 {
        assert!(self.is_scalar(), "scalar_value() on shape {:?}", self.shape);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// NaN/Inf is an error state, never silently propagated past a module
    /// boundary; `context` names the producing operation.
    pub fn expect_finite(&self, context: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            let bad = self.data.iter().position(|v| !v.is_finite()).unwrap_or(0);
            Err(CoreError::NonFinite(format!("{context}: entry {bad} of shape {:?}", self.shape)))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape, other.shape, "zip shape mismatch");
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }
}

// Below this size a parallel split costs more than it saves.
#[cfg(feature = "parallel")]
const PAR_FLOP_THRESHOLD: usize = 1 << 20;

/// C[m,n] = A[m,k] · B[n,k]ᵀ  (dense-layer forward: rows of B are output units).
pub fn matmul_nt(a: &Tensor, b: &Tensor, out: &mut Tensor) {
    let (m, k) = (a.rows(), a.cols());
    let n = b.rows();
    assert_eq!(b.cols(), k, "matmul_nt inner extent");
    assert_eq!(out.shape(), &[m, n]);
    let bd = b.data();
    let run_row = |row_a: &[f64], row_out: &mut [f64]| {
        for (j, o) in row_out.iter_mut().enumerate() {
            let rb = &bd[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in row_a.iter().zip(rb) {
                acc += x * y;
            }
            *o = acc;
        }
    };
    #[cfg(feature = "parallel")]
    if m * n * k >= PAR_FLOP_THRESHOLD {
        use rayon::prelude::*;
        let ad = a.data();
        out.data_mut()
            .par_chunks_mut(n)
            .zip(ad.par_chunks(k))
            .for_each(|(row_out, row_a)| run_row(row_a, row_out));
        return;
    }
    for (row_a, row_out) in a.data().chunks_exact(k).zip(out.data_mut().chunks_exact_mut(n)) {
        run_row(row_a, row_out);
    }
}

/// C[m,n] = A[m,k] · B[k,n].
pub fn matmul_nn(a: &Tensor, b: &Tensor, out: &mut Tensor) {
    let (m, k) = (a.rows(), a.cols());
    let n = b.cols();
    assert_eq!(b.rows(), k, "matmul_nn inner extent");
    assert_eq!(out.shape(), &[m, n]);
    let bd = b.data();
    let run_row = |row_a: &[f64], row_out: &mut [f64]| {
        row_out.fill(0.0);
        for (x, rb) in row_a.iter().zip(bd.chunks_exact(n)) {
            for (o, y) in row_out.iter_mut().zip(rb) {
                *o += x * y;
            }
        }
    };
    #[cfg(feature = "parallel")]
    if m * n * k >= PAR_FLOP_THRESHOLD {
        use rayon::prelude::*;
        let ad = a.data();
        out.data_mut()
            .par_chunks_mut(n)
            .zip(ad.par_chunks(k))
            .for_each(|(row_out, row_a)| run_row(row_a, row_out));
        return;
    }
    for (row_a, row_out) in a.data().chunks_exact(k).zip(out.data_mut().chunks_exact_mut(n)) {
        run_row(row_a, row_out);
    }
}

/// C[m,n] += A[s,m]ᵀ · B[s,n]  (weight-gradient product; accumulates into `out`).
pub fn matmul_tn_acc(a: &Tensor, b: &Tensor, out: &mut Tensor) {
    let (s, m) = (a.rows(), a.cols());
    let n = b.cols();
    assert_eq!(b.rows(), s, "matmul_tn outer extent");
    assert_eq!(out.shape(), &[m, n]);
    let ad = a.data();
    let bd = b.data();
    let run_row = |i: usize, row_out: &mut [f64]| {
        for (row_a, row_b) in ad.chunks_exact(m).zip(bd.chunks_exact(n)) {
            let x = row_a[i];
            if x != 0.0 {
                for (o, y) in row_out.iter_mut().zip(row_b) {
                    *o += x * y;
                }
            }
        }
    };
    #[cfg(feature = "parallel")]
    if s * m * n >= PAR_FLOP_THRESHOLD {
        use rayon::prelude::*;
        out.data_mut()
            .par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, row_out)| run_row(i, row_out));
        return;
    }
    for (i, row_out) in out.data_mut().chunks_exact_mut(n).enumerate() {
        run_row(i, row_out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: [usize; 2], v: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), v.to_vec())
    }

    #[test]
    fn matmul_nt_matches_hand_product() {
        // A (2x3) · B(2x3)ᵀ
        let a = t([2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = t([2, 3], &[1.0, 0.0, -1.0, 0.5, 0.5, 0.5]);
        let mut c = Tensor::zeros(vec![2, 2]);
        matmul_nt(&a, &b, &mut c);
        assert_eq!(c.data(), &[-2.0, 3.0, -2.0, 7.5]);
    }

    #[test]
    fn matmul_nn_matches_hand_product() {
        let a = t([2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t([2, 3], &[1.0, 0.0, 2.0, 0.0, 1.0, 2.0]);
        let mut c = Tensor::zeros(vec![2, 3]);
        matmul_nn(&a, &b, &mut c);
        assert_eq!(c.data(), &[1.0, 2.0, 6.0, 3.0, 4.0, 14.0]);
    }

    #[test]
    fn matmul_tn_acc_accumulates_transposed_product() {
        let a = t([2, 2], &[1.0, 2.0, 3.0, 4.0]); // aᵀ = [[1,3],[2,4]]
        let b = t([2, 2], &[5.0, 6.0, 7.0, 8.0]);
        let mut c = Tensor::new(vec![2, 2], vec![1.0; 4]);
        matmul_tn_acc(&a, &b, &mut c);
        // aᵀ·b = [[26,30],[38,44]] plus the existing ones.
        assert_eq!(c.data(), &[27.0, 31.0, 39.0, 45.0]);
    }

    #[test]
    fn finite_check_reports_position() {
        let x = t([1, 3], &[1.0, f64::NAN, 2.0]);
        let err = x.expect_finite("unit").unwrap_err();
        assert!(err.to_string().contains("entry 1"));
    }

    #[test]
    #[should_panic(expected = "shape")]
    fn shape_must_cover_data() {
        let _ = Tensor::new(vec![2, 2], vec![0.0; 3]);
    }
}
