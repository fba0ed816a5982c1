//! Small dense linear-algebra primitives: compensated sums and a Cholesky
//! factorization with an explicit rank tolerance.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

/// Relative pivot tolerance: a pivot below `PIVOT_TOL * max(diag)` means the
/// matrix is treated as rank-deficient.
pub const PIVOT_TOL: f64 = 1e-12;

/// Neumaier-compensated sum.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

pub fn compensated_mean(values: &[f64]) -> f64 {
    compensated_sum(values.iter().copied()) / values.len() as f64
}

/// Lower-triangular Cholesky factor `A = L L'` of a symmetric positive
/// definite matrix.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: DMatrix<f64>,
}

impl Cholesky {
    pub fn new(a: &DMatrix<f64>) -> Result<Self> {
        let k = a.nrows();
        if k != a.ncols() {
            return Err(Error::invalid("Cholesky requires a square matrix"));
        }
        let max_diag = (0..k).map(|i| a[(i, i)].abs()).fold(0.0, f64::max);
        let tol = PIVOT_TOL * max_diag.max(f64::MIN_POSITIVE);
        let mut l = DMatrix::<f64>::zeros(k, k);
        for j in 0..k {
            let mut d = a[(j, j)];
            for p in 0..j {
                d -= l[(j, p)] * l[(j, p)];
            }
            if !(d > tol) {
                return Err(Error::RankDeficient {
                    column: j,
                    dependent_on: dependent_columns(&l, j),
                });
            }
            let djj = d.sqrt();
            l[(j, j)] = djj;
            for i in (j + 1)..k {
                let mut s = a[(i, j)];
                for p in 0..j {
                    s -= l[(i, p)] * l[(j, p)];
                }
                l[(i, j)] = s / djj;
            }
        }
        Ok(Cholesky { l })
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    pub fn l(&self) -> &DMatrix<f64> {
        &self.l
    }

    /// Solves `L y = b`.
    pub fn forward(&self, b: &DVector<f64>) -> DVector<f64> {
        let k = self.dim();
        let mut y = b.clone();
        for i in 0..k {
            let mut s = y[i];
            for p in 0..i {
                s -= self.l[(i, p)] * y[p];
            }
            y[i] = s / self.l[(i, i)];
        }
        y
    }

    /// Solves `L' x = y`.
    pub fn backward(&self, y: &DVector<f64>) -> DVector<f64> {
        let k = self.dim();
        let mut x = y.clone();
        for i in (0..k).rev() {
            let mut s = x[i];
            for p in (i + 1)..k {
                s -= self.l[(p, i)] * x[p];
            }
            x[i] = s / self.l[(i, i)];
        }
        x
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.backward(&self.forward(b))
    }

    /// `x' A^{-1} x`, evaluated as `|L^{-1} x|^2`.
    pub fn inverse_quad_form(&self, x: &DVector<f64>) -> f64 {
        self.forward(x).norm_squared()
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        let k = self.dim();
        let mut inv = DMatrix::<f64>::zeros(k, k);
        for j in 0..k {
            let mut e = DVector::<f64>::zeros(k);
            e[j] = 1.0;
            inv.set_column(j, &self.solve(&e));
        }
        // symmetrize rounding noise
        for i in 0..k {
            for j in (i + 1)..k {
                let m = 0.5 * (inv[(i, j)] + inv[(j, i)]);
                inv[(i, j)] = m;
                inv[(j, i)] = m;
            }
        }
        inv
    }
}

// The failing pivot's column lies (numerically) in the span of the preceding
// ones; report the predecessors whose coefficients in that combination matter.
fn dependent_columns(l: &DMatrix<f64>, column: usize) -> Vec<usize> {
    (0..column).filter(|&p| l[(column, p)].abs() > 1e-8).collect()
}
