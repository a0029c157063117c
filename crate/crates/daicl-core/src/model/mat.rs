//! Dense row-major `f64` matrices, just enough for the models here.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

/// A dense `rows × cols` matrix of `f64` in row-major order.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl fmt::Debug for Mat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Mat({}x{})", self.rows, self.cols)
    }
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Mat { rows, cols, data }
    }

    pub fn scalar(x: f64) -> Self {
        Mat {
            rows: 1,
            cols: 1,
            data: vec![x],
        }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, x: f64) {
        self.data[r * self.cols + c] = x;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn same_shape(&self, other: &Mat) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn add_assign(&mut self, other: &Mat) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, c: f64) {
        for a in &mut self.data {
            *a *= c;
        }
    }

    pub fn sq_sum(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }
}

/// `out += op(a) · op(b)` where `op` optionally transposes. Shapes are
/// asserted; the accumulate form is what backward passes want.
pub fn matmul_acc(out: &mut Mat, a: &Mat, ta: bool, b: &Mat, tb: bool) {
    let (m, ka) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (kb, n) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(ka, kb, "inner dimensions {ka} vs {kb}");
    assert_eq!(out.rows, m);
    assert_eq!(out.cols, n);
    let k = ka;
    match (ta, tb) {
        (false, false) => {
            // out[i,:] += a[i,l] * b[l,:]
            for i in 0..m {
                let out_row = out.row_mut(i);
                let a_row = a.row(i);
                for l in 0..k {
                    let av = a_row[l];
                    if av != 0.0 {
                        let b_row = b.row(l);
                        for (o, bv) in out_row.iter_mut().zip(b_row) {
                            *o += av * bv;
                        }
                    }
                }
            }
        }
        (false, true) => {
            // out[i,j] += dot(a.row(i), b.row(j))
            for i in 0..m {
                let a_row = a.row(i);
                let out_row = out.row_mut(i);
                for (j, o) in out_row.iter_mut().enumerate() {
                    let b_row = b.row(j);
                    let mut acc = 0.0;
                    for (x, y) in a_row.iter().zip(b_row) {
                        acc += x * y;
                    }
                    *o += acc;
                }
            }
        }
        (true, false) => {
            // out[l,:] += a[i,l] * b[i,:]
            for i in 0..a.rows {
                let a_row = a.row(i);
                let b_row = b.row(i);
                for (l, &av) in a_row.iter().enumerate() {
                    if av != 0.0 {
                        let out_row = out.row_mut(l);
                        for (o, bv) in out_row.iter_mut().zip(b_row) {
                            *o += av * bv;
                        }
                    }
                }
            }
        }
        (true, true) => {
            // out[i,j] += a[l,i] * b[j,l]
            for i in 0..m {
                for j in 0..n {
                    let mut acc = 0.0;
                    for l in 0..k {
                        acc += a.at(l, i) * b.at(j, l);
                    }
                    let v = out.at(i, j) + acc;
                    out.set(i, j, v);
                }
            }
        }
    }
}

/// `op(a) · op(b)` into a fresh matrix.
pub fn matmul(a: &Mat, ta: bool, b: &Mat, tb: bool) -> Mat {
    let m = if ta { a.cols } else { a.rows };
    let n = if tb { b.rows } else { b.cols };
    let mut out = Mat::zeros(m, n);
    matmul_acc(&mut out, a, ta, b, tb);
    out
}
