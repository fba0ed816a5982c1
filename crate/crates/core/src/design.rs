//! The finite sample of an experiment, its centered covariate design and the
//! in-sample linear projection of an outcome on the covariates.

use nalgebra::{DMatrix, DVector};

use crate::assignment::Assignment;
use crate::linalg::{compensated_mean, Cholesky};
use crate::{Error, Result};

/// Fixed covariates and both potential outcomes for `n` units.
#[derive(Debug, Clone)]
pub struct Sample {
    z: DMatrix<f64>,
    y0: Vec<f64>,
    y1: Vec<f64>,
}

impl Sample {
    pub fn new(z: DMatrix<f64>, y0: Vec<f64>, y1: Vec<f64>) -> Result<Self> {
        let n = z.nrows();
        if n < 4 {
            return Err(Error::invalid(format!("sample needs n >= 4, got {n}")));
        }
        if z.ncols() < 1 {
            return Err(Error::invalid("sample needs at least one covariate"));
        }
        if y0.len() != n || y1.len() != n {
            return Err(Error::invalid(format!(
                "outcome lengths ({}, {}) do not match n = {n}",
                y0.len(),
                y1.len()
            )));
        }
        if z.iter().chain(&y0).chain(&y1).any(|v| !v.is_finite()) {
            return Err(Error::invalid("sample contains non-finite values"));
        }
        Ok(Sample { z, y0, y1 })
    }

    pub fn n(&self) -> usize {
        self.z.nrows()
    }

    pub fn k(&self) -> usize {
        self.z.ncols()
    }

    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }

    pub fn y0(&self) -> &[f64] {
        &self.y0
    }

    pub fn y1(&self) -> &[f64] {
        &self.y1
    }

    /// Sample average treatment effect.
    pub fn tau(&self) -> f64 {
        let d: Vec<f64> = self.y1.iter().zip(&self.y0).map(|(a, b)| a - b).collect();
        compensated_mean(&d)
    }

    /// Observed outcomes `Y_i = Y_i(W_i)` under an assignment.
    pub fn observed(&self, a: &Assignment) -> Vec<f64> {
        (0..self.n())
            .map(|i| if a.is_treated(i) { self.y1[i] } else { self.y0[i] })
            .collect()
    }

    pub fn design(&self) -> Result<CenteredDesign> {
        CenteredDesign::new(&self.z)
    }
}

/// Column-centered covariates with their Gram matrix factored once.
#[derive(Debug, Clone)]
pub struct CenteredDesign {
    means: Vec<f64>,
    z_tilde: DMatrix<f64>,
    gram: DMatrix<f64>,
    gram_inverse: DMatrix<f64>,
    chol: Cholesky,
}

impl CenteredDesign {
    pub fn new(z: &DMatrix<f64>) -> Result<Self> {
        let (n, k) = z.shape();
        if n < 2 || k < 1 {
            return Err(Error::invalid(format!("design needs n >= 2 and K >= 1, got {n}x{k}")));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("design contains non-finite values"));
        }
        let means: Vec<f64> = (0..k)
            .map(|j| compensated_mean(z.column(j).as_slice()))
            .collect();
        let z_tilde = DMatrix::from_fn(n, k, |i, j| z[(i, j)] - means[j]);
        let gram = z_tilde.transpose() * &z_tilde;
        let chol = Cholesky::new(&gram)?;
        let gram_inverse = chol.inverse();
        Ok(CenteredDesign {
            means,
            z_tilde,
            gram,
            gram_inverse,
            chol,
        })
    }

    pub fn n(&self) -> usize {
        self.z_tilde.nrows()
    }

    pub fn k(&self) -> usize {
        self.z_tilde.ncols()
    }

    pub fn column_means(&self) -> &[f64] {
        &self.means
    }

    pub fn z_tilde(&self) -> &DMatrix<f64> {
        &self.z_tilde
    }

    /// `Z~' Z~`.
    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    pub fn gram_inverse(&self) -> &DMatrix<f64> {
        &self.gram_inverse
    }

    pub fn gram_factor(&self) -> &Cholesky {
        &self.chol
    }

    /// Sample covariance `Z~'Z~ / (n - 1)`.
    pub fn covariance(&self) -> DMatrix<f64> {
        &self.gram / (self.n() as f64 - 1.0)
    }

    /// `(Z~'Z~)^{-1} b`.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    /// `d' (Z~'Z~)^{-1} d`.
    pub fn gram_quad_form(&self, d: &DVector<f64>) -> f64 {
        self.chol.inverse_quad_form(d)
    }

    /// `Z~' v`.
    pub fn cross(&self, v: &[f64]) -> DVector<f64> {
        let n = self.n();
        DVector::from_fn(self.k(), |j, _| {
            let col = self.z_tilde.column(j);
            (0..n).map(|i| col[i] * v[i]).sum()
        })
    }

    /// Per-covariate `z̄_1 - z̄_0`.
    pub fn group_mean_difference(&self, a: &Assignment) -> DVector<f64> {
        let (n1, n0) = (a.n1() as f64, a.n0() as f64);
        DVector::from_fn(self.k(), |j, _| {
            let col = self.z_tilde.column(j);
            let (mut s1, mut s0) = (0.0, 0.0);
            for i in 0..self.n() {
                if a.is_treated(i) {
                    s1 += col[i];
                } else {
                    s0 += col[i];
                }
            }
            s1 / n1 - s0 / n0
        })
    }

    /// Returns a design restricted to the first `p` columns.
    pub fn leading_columns(&self, p: usize) -> Result<CenteredDesign> {
        if p == 0 || p > self.k() {
            return Err(Error::invalid(format!("cannot take {p} of {} columns", self.k())));
        }
        CenteredDesign::new(&self.z_tilde.columns(0, p).into_owned())
    }

    pub(crate) fn check_assignment(&self, a: &Assignment) -> Result<()> {
        if a.n() != self.n() {
            return Err(Error::invalid(format!(
                "assignment has n={} but design has n={}",
                a.n(),
                self.n()
            )));
        }
        Ok(())
    }
}

/// `Y = alpha + Z beta + eps` fitted by least squares within the sample.
#[derive(Debug, Clone)]
pub struct LinearProjection {
    pub alpha: f64,
    pub beta: DVector<f64>,
    pub residuals: DVector<f64>,
}

pub fn fit_projection(outcome: &[f64], design: &CenteredDesign) -> Result<LinearProjection> {
    let n = design.n();
    if outcome.len() != n {
        return Err(Error::invalid(format!(
            "outcome has length {} but design has n={n}",
            outcome.len()
        )));
    }
    let ybar = compensated_mean(outcome);
    let y_tilde: Vec<f64> = outcome.iter().map(|y| y - ybar).collect();
    let beta = design.solve(&design.cross(&y_tilde));
    let fitted = design.z_tilde() * &beta;
    let residuals = DVector::from_fn(n, |i, _| y_tilde[i] - fitted[i]);
    let alpha = ybar
        - design
            .column_means()
            .iter()
            .zip(beta.iter())
            .map(|(m, b)| m * b)
            .sum::<f64>();
    Ok(LinearProjection {
        alpha,
        beta,
        residuals,
    })
}

/// The pair of projections of `Y(0)` and `Y(1)` used under heterogeneous effects.
#[derive(Debug, Clone)]
pub struct HeterogeneousProjection {
    pub control: LinearProjection,
    pub treated: LinearProjection,
}

impl HeterogeneousProjection {
    pub fn fit(sample: &Sample, design: &CenteredDesign) -> Result<Self> {
        Ok(HeterogeneousProjection {
            control: fit_projection(sample.y0(), design)?,
            treated: fit_projection(sample.y1(), design)?,
        })
    }

    /// `rho = beta_1 - beta_0`.
    pub fn rho(&self) -> DVector<f64> {
        &self.treated.beta - &self.control.beta
    }

    /// `zeta = (n1/n) beta_0 + (n0/n) beta_1`, the slope that drives the
    /// conditional bias of difference-in-means.
    pub fn zeta(&self, n0: usize, n1: usize) -> DVector<f64> {
        let n = (n0 + n1) as f64;
        &self.control.beta * (n1 as f64 / n) + &self.treated.beta * (n0 as f64 / n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_design() -> CenteredDesign {
        let z = DMatrix::from_row_slice(6, 2, &[0.3, 1.0, -1.2, 0.5, 2.0, -0.7, 0.1, 0.0, -0.4, 1.5, 1.1, -2.0]);
        CenteredDesign::new(&z).unwrap()
    }

    #[test]
    fn gram_inverse_is_inverse() {
        let d = toy_design();
        let id = d.gram() * d.gram_inverse();
        assert!((id - DMatrix::identity(2, 2)).amax() <= 1e-8);
    }

    #[test]
    fn exact_linear_outcome_has_zero_residuals() {
        let z = DMatrix::from_column_slice(5, 1, &[1.0, 2.0, -1.0, 0.5, 3.0]);
        let d = CenteredDesign::new(&z).unwrap();
        let fit = fit_projection(z.column(0).as_slice(), &d).unwrap();
        assert!((fit.beta[0] - 1.0).abs() < 1e-12);
        assert!(fit.residuals.amax() < 1e-12);
        assert!(fit.alpha.abs() < 1e-12);
    }

    #[test]
    fn constant_outcome() {
        let d = toy_design();
        let fit = fit_projection(&[2.5; 6], &d).unwrap();
        assert!(fit.beta.amax() < 1e-14);
        assert!((fit.alpha - 2.5).abs() < 1e-14);
        assert!(fit.residuals.amax() < 1e-14);
    }

    #[test]
    fn residual_invariants_hold() {
        let d = toy_design();
        let y = [1.0, -0.3, 2.2, 0.9, -1.4, 0.7];
        let fit = fit_projection(&y, &d).unwrap();
        assert!(fit.residuals.sum().abs() <= 1e-12);
        let orth = d.cross(fit.residuals.as_slice());
        assert!(orth.amax() <= 1e-12);
    }

    #[test]
    fn singular_design_rejected() {
        let z = DMatrix::from_row_slice(5, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0, 4.0, 8.0, 0.0, 0.0]);
        assert!(matches!(CenteredDesign::new(&z), Err(Error::RankDeficient { column: 1, .. })));
    }

    #[test]
    fn sample_validation() {
        let z = DMatrix::from_element(3, 1, 1.0);
        assert!(Sample::new(z, vec![0.0; 3], vec![0.0; 3]).is_err());
        let z = DMatrix::from_element(4, 1, 1.0);
        assert!(Sample::new(z.clone(), vec![0.0; 4], vec![0.0; 3]).is_err());
        assert!(Sample::new(z, vec![f64::NAN, 0.0, 0.0, 0.0], vec![0.0; 4]).is_err());
    }
}
