//! Row-major matrices and the handful of products attention needs.

use crate::error::{Error, Result};
use crate::tensor::{Float, Shape, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<Float>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<Float>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{} elements for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<Float>]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged rows"));
        }
        Matrix::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Views a `1x1xRxC` parameter tensor as an `R x C` matrix.
    pub fn from_param(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        if s.n != 1 || s.h != 1 {
            return Err(Error::shape(format!("{s} is not a 1x1xRxC matrix tensor")));
        }
        Matrix::from_vec(s.w, s.c, t.data().to_vec())
    }

    pub fn into_param(self) -> Result<Tensor> {
        Tensor::from_vec(Shape::new(1, 1, self.rows, self.cols)?, self.data)
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> Float {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[Float] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [Float] {
        let c = self.cols;
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    /// Columns `[start, start + len)`.
    pub fn cols_slice(&self, start: usize, len: usize) -> Matrix {
        let mut m = Matrix::zeros(self.rows, len);
        for r in 0..self.rows {
            m.row_mut(r)
                .copy_from_slice(&self.row(r)[start..start + len]);
        }
        m
    }

    /// Writes `src` into columns starting at `start`.
    pub fn set_cols(&mut self, start: usize, src: &Matrix) {
        for r in 0..self.rows {
            self.row_mut(r)[start..start + src.cols].copy_from_slice(src.row(r));
        }
    }

    /// Adds `src` into columns starting at `start`.
    pub fn add_cols(&mut self, start: usize, src: &Matrix) {
        for r in 0..self.rows {
            for (d, s) in self.row_mut(r)[start..start + src.cols]
                .iter_mut()
                .zip(src.row(r))
            {
                *d += s;
            }
        }
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: Float) {
        for v in &mut self.data {
            *v *= s;
        }
    }
}

fn check(cond: bool, what: &str, a: &Matrix, b: &Matrix) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::shape(format!(
            "{what}: {}x{} and {}x{} are incompatible",
            a.rows, a.cols, b.rows, b.cols
        )))
    }
}

/// `a · b`
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    check(a.cols == b.rows, "matmul", a, b)?;
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &av) in a.row(i).iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in out_row.iter_mut().zip(b.row(k)) {
                *o += av * bv;
            }
        }
    }
    Ok(out)
}

/// `aᵀ · b`
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    check(a.rows == b.rows, "matmul_tn", a, b)?;
    let mut out = Matrix::zeros(a.cols, b.cols);
    for k in 0..a.rows {
        let b_row = b.row(k);
        for (i, &av) in a.row(k).iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    Ok(out)
}

/// `a · bᵀ`
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    check(a.cols == b.cols, "matmul_nt", a, b)?;
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let a_row = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = dot(a_row, b.row(j));
        }
    }
    Ok(out)
}

#[inline]
pub fn dot(a: &[Float], b: &[Float]) -> Float {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(Float::NEG_INFINITY, Float::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Gradient of the logits given softmax output `p` and upstream gradient `dp`.
pub fn softmax_rows_backward(p: &Matrix, dp: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(p.rows, p.cols);
    for r in 0..p.rows {
        let pr = p.row(r);
        let dr = dp.row(r);
        let inner = dot(pr, dr);
        for ((o, &pv), &dv) in out.row_mut(r).iter_mut().zip(pr).zip(dr) {
            *o = pv * (dv - inner);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.random_range(-3.0..3.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn softmax_symmetric_row_is_uniform() {
        let m = Matrix::from_rows(&[vec![0.0, 0.0]]).unwrap();
        assert_eq!(softmax_rows(&m).data, vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_large_logits_do_not_overflow() {
        let m = Matrix::from_rows(&[vec![1000.0, 1000.0, 1000.0]]).unwrap();
        let p = softmax_rows(&m);
        for v in p.data {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = softmax_rows(&random(4, 7, &mut rng));
        for r in 0..4 {
            assert!((p.row(r).iter().sum::<Float>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn products_agree_with_transposes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(3, 4, &mut rng);
        let b = random(3, 5, &mut rng);
        let c = random(6, 4, &mut rng);
        let tn = matmul_tn(&a, &b).unwrap();
        let tn_ref = matmul(&a.transpose(), &b).unwrap();
        let nt = matmul_nt(&a, &c).unwrap();
        let nt_ref = matmul(&a, &c.transpose()).unwrap();
        for (x, y) in tn.data.iter().zip(&tn_ref.data) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in nt.data.iter().zip(&nt_ref.data) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(matmul(&a, &a).is_err());
    }

    proptest::proptest! {
        #[test]
        fn softmax_invariant_to_row_shift(seed in 0u64..500, shift in -50.0f64..50.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random(3, 5, &mut rng);
            let mut shifted = m.clone();
            for v in shifted.row_mut(1) { *v += shift as Float; }
            let (p, q) = (softmax_rows(&m), softmax_rows(&shifted));
            for (a, b) in p.data.iter().zip(&q.data) {
                proptest::prop_assert!((a - b).abs() < 1e-6);
            }
            for r in 0..3 {
                proptest::prop_assert!((p.row(r).iter().sum::<Float>() - 1.0).abs() < 1e-6);
            }
        }
    }
}
