//! Dense row-major 2D tensor.
//!
//! All reductions run in ascending index order; together with the
//! single-threaded kernels this makes every op bit-reproducible.

use super::{CounterRng, Real};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<Real>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, v: Real) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<Real>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{}x{} tensor needs {} values, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            )));
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn randn(rows: usize, cols: usize, sigma: Real, rng: &mut CounterRng) -> Self {
        let data = (0..rows * cols).map(|_| rng.normal() * sigma).collect();
        Tensor { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[Real] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Real] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> Real {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut Real {
        &mut self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[Real] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [Real] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += *b;
        }
    }

    pub fn add_assign_scaled(&mut self, other: &Tensor, s: Real) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += s * *b;
        }
    }

    pub fn scale_assign(&mut self, s: Real) {
        for a in self.data.iter_mut() {
            *a *= s;
        }
    }

    pub fn fill(&mut self, v: Real) {
        self.data.iter_mut().for_each(|a| *a = v);
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                *out.at_mut(c, r) = self.at(r, c);
            }
        }
        out
    }

    /// `self (r x k) * b (k x c)`, accumulating over k in ascending order.
    pub fn matmul(&self, b: &Tensor) -> Result<Tensor> {
        if self.cols != b.rows {
            return Err(Error::Shape(format!(
                "matmul {}x{} * {}x{}",
                self.rows, self.cols, b.rows, b.cols
            )));
        }
        let mut out = Tensor::zeros(self.rows, b.cols);
        for r in 0..self.rows {
            let arow = self.row(r);
            let orow = out.row_mut(r);
            for (k, &av) in arow.iter().enumerate() {
                let brow = b.row(k);
                for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                    *o += av * bv;
                }
            }
        }
        Ok(out)
    }

    /// `self (r x k) * b^T` where b is (c x k).
    pub fn matmul_nt(&self, b: &Tensor) -> Result<Tensor> {
        if self.cols != b.cols {
            return Err(Error::Shape(format!(
                "matmul_nt {}x{} * ({}x{})^T",
                self.rows, self.cols, b.rows, b.cols
            )));
        }
        let mut out = Tensor::zeros(self.rows, b.rows);
        for r in 0..self.rows {
            let arow = self.row(r);
            for c in 0..b.rows {
                let brow = b.row(c);
                let mut acc = 0.0;
                for k in 0..self.cols {
                    acc += arow[k] * brow[k];
                }
                *out.at_mut(r, c) = acc;
            }
        }
        Ok(out)
    }

    /// `self^T * b` where self is (k x r) and b is (k x c).
    pub fn matmul_tn(&self, b: &Tensor) -> Result<Tensor> {
        if self.rows != b.rows {
            return Err(Error::Shape(format!(
                "matmul_tn ({}x{})^T * {}x{}",
                self.rows, self.cols, b.rows, b.cols
            )));
        }
        let mut out = Tensor::zeros(self.cols, b.cols);
        for k in 0..self.rows {
            let arow = self.row(k);
            let brow = b.row(k);
            for (r, &av) in arow.iter().enumerate() {
                let orow = out.row_mut(r);
                for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                    *o += av * bv;
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::EPS_TIGHT;

    #[test]
    fn matmul_identity_and_hand_case() {
        let a = Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let eye = Tensor::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(a.matmul(&eye).unwrap(), a);

        let ones = Tensor::from_vec(2, 1, vec![1.0, 1.0]).unwrap();
        let prod = a.matmul(&ones).unwrap();
        assert_eq!(prod.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_mismatch_is_an_error() {
        let a = Tensor::zeros(2, 3);
        let b = Tensor::zeros(2, 3);
        assert!(a.matmul(&b).is_err());
        assert!(a.matmul_nt(&Tensor::zeros(4, 2)).is_err());
    }

    #[test]
    fn transposed_variants_agree_with_explicit_transpose() {
        let mut rng = CounterRng::new(5, "t");
        let a = Tensor::randn(3, 4, 1.0, &mut rng);
        let b = Tensor::randn(5, 4, 1.0, &mut rng);
        let nt = a.matmul_nt(&b).unwrap();
        let nt_explicit = a.matmul(&b.transpose()).unwrap();
        for (x, y) in nt.data().iter().zip(nt_explicit.data().iter()) {
            assert!((x - y).abs() < EPS_TIGHT);
        }

        let c = Tensor::randn(5, 2, 1.0, &mut rng);
        let tn = b.matmul_tn(&c).unwrap();
        let tn_explicit = b.transpose().matmul(&c).unwrap();
        for (x, y) in tn.data().iter().zip(tn_explicit.data().iter()) {
            assert!((x - y).abs() < EPS_TIGHT);
        }
    }
}
