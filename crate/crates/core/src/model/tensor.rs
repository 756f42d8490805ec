//! Dense row-major `f64` matrices and the handful of kernels the networks need.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Below this many multiply-adds a product runs on the calling thread.
const PAR_THRESHOLD: usize = 1 << 15;

#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Mat { rows, cols, data: vec![v; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn scalar(v: f64) -> Self {
        Mat { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn zip(&self, other: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
        debug_assert_eq!(self.shape(), other.shape());
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Mat) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// Columns `[start, end)` as a new matrix.
    pub fn cols_range(&self, start: usize, end: usize) -> Mat {
        let w = end - start;
        let mut out = Mat::zeros(self.rows, w);
        for i in 0..self.rows {
            out.row_mut(i).copy_from_slice(&self.row(i)[start..end]);
        }
        out
    }

    /// Adds a `1 x cols` row to every row.
    pub fn add_row(&mut self, bias: &[f64]) {
        debug_assert_eq!(bias.len(), self.cols);
        for r in self.data.chunks_mut(self.cols) {
            for (x, b) in r.iter_mut().zip(bias) {
                *x += b;
            }
        }
    }
}

fn row_times(a_row: &[f64], b: &Mat, out: &mut [f64]) {
    for (k, &a) in a_row.iter().enumerate() {
        if a == 0.0 {
            continue;
        }
        let brow = &b.data[k * b.cols..(k + 1) * b.cols];
        for (o, &bv) in out.iter_mut().zip(brow) {
            *o += a * bv;
        }
    }
}

/// `A B`.
pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.rows, "matmul inner dimensions");
    let mut out = Mat::zeros(a.rows, b.cols);
    if b.cols == 0 {
        return out;
    }
    if a.rows * a.cols * b.cols >= PAR_THRESHOLD {
        out.data
            .par_chunks_mut(b.cols)
            .enumerate()
            .for_each(|(i, o)| row_times(a.row(i), b, o));
    } else {
        for i in 0..a.rows {
            let o = &mut out.data[i * b.cols..(i + 1) * b.cols];
            row_times(&a.data[i * a.cols..(i + 1) * a.cols], b, o);
        }
    }
    out
}

/// `A B^T`.
pub fn matmul_bt(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.cols, "matmul_bt inner dimensions");
    let mut out = Mat::zeros(a.rows, b.rows);
    let fill = |i: usize, o: &mut [f64]| {
        let ar = a.row(i);
        for (j, v) in o.iter_mut().enumerate() {
            *v = ar.iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
        }
    };
    if b.rows == 0 {
        return out;
    }
    if a.rows * a.cols * b.rows >= PAR_THRESHOLD {
        out.data.par_chunks_mut(b.rows).enumerate().for_each(|(i, o)| fill(i, o));
    } else {
        for (i, o) in out.data.chunks_mut(b.rows).enumerate() {
            fill(i, o);
        }
    }
    out
}

/// `A^T B`.
pub fn matmul_at(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.rows, b.rows, "matmul_at inner dimensions");
    matmul(&a.transpose(), b)
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn products_agree() {
        let a = Mat::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Mat::from_vec(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = matmul(&a, &b);
        assert_eq!(c.data, vec![58.0, 64.0, 139.0, 154.0]);
        assert_eq!(matmul_bt(&a, &b.transpose()), c);
        assert_eq!(matmul_at(&a.transpose(), &b), c);
    }

    #[test]
    fn large_product_matches_serial() {
        let a = Mat { rows: 64, cols: 70, data: (0..64 * 70).map(|i| (i as f64 * 0.37).sin()).collect() };
        let b = Mat { rows: 70, cols: 33, data: (0..70 * 33).map(|i| (i as f64 * 0.11).cos()).collect() };
        let c = matmul(&a, &b);
        for i in 0..64 {
            for j in 0..33 {
                let mut s = 0.0;
                for k in 0..70 {
                    s += a.get(i, k) * b.get(k, j);
                }
                assert!((c.get(i, j) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn activations() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(-800.0)).abs() < 1e-300);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        let h = 1e-6;
        for x in [-3.0, -0.5, 0.0, 0.7, 4.0] {
            let fd = (silu(x + h) - silu(x - h)) / (2.0 * h);
            assert!((fd - silu_grad(x)).abs() < 1e-8);
        }
    }
}
