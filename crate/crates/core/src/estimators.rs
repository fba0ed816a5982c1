//! Point estimators and t-tests for the sample average treatment effect.
//!
//! * difference in means with the unpooled two-sample variance,
//! * OLS adjusting for the centered covariates (homoskedastic covariance),
//! * OLS with covariates and their treatment interactions, reported with the
//!   HC0 (Eicker-Huber-White) variance.
//!
//! The adjusted estimators are computed through the Frisch-Waugh-Lovell
//! partialling of the centered treatment indicator, which never materializes
//! the `n x n` annihilator.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::assignment::Assignment;
use crate::design::CenteredDesign;
#[cfg(test)]
use crate::design::Sample;
use crate::linalg::{compensated_mean, Cholesky};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EstimatorId {
    #[serde(rename = "DM")]
    Dm,
    #[serde(rename = "OLS_Z")]
    OlsZ,
    #[serde(rename = "OLS_X")]
    OlsX,
    #[serde(rename = "PCA_P")]
    PcaP,
}

impl EstimatorId {
    pub fn as_str(self) -> &'static str {
        match self {
            EstimatorId::Dm => "DM",
            EstimatorId::OlsZ => "OLS_Z",
            EstimatorId::OlsX => "OLS_X",
            EstimatorId::PcaP => "PCA_P",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub estimator: EstimatorId,
    pub estimate: f64,
    pub std_error: f64,
    pub p_value: f64,
    pub dof: usize,
}

impl TestResult {
    pub fn relabel(mut self, estimator: EstimatorId) -> Self {
        self.estimator = estimator;
        self
    }
}

/// Degrees of freedom for the t reference distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dof {
    /// `n - 2` for DM, `n - K - 2` for OLS_Z, `n - 2K - 2` for OLS_X.
    #[default]
    Residual,
    Fixed(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TestOptions {
    pub null_value: f64,
    pub dof: Dof,
}

impl TestOptions {
    pub fn with_null(null_value: f64) -> Self {
        TestOptions {
            null_value,
            dof: Dof::Residual,
        }
    }

    fn dof_or(&self, residual: usize) -> usize {
        match self.dof {
            Dof::Residual => residual,
            Dof::Fixed(d) => d,
        }
    }
}

/// Two-sided p-value of `(estimate - null) / std_error` against Student's t.
///
/// A zero standard error gives `p = 1` when the estimate equals the null and
/// `p = 0` otherwise.
pub fn t_test(estimate: f64, std_error: f64, dof: usize, null_value: f64) -> Result<f64> {
    if dof < 1 {
        return Err(Error::invalid("t-test needs at least one degree of freedom"));
    }
    if !(std_error >= 0.0) || !estimate.is_finite() {
        return Err(Error::invalid(format!(
            "t-test needs a finite estimate and nonnegative standard error (got {estimate}, {std_error})"
        )));
    }
    if std_error == 0.0 {
        return Ok(if estimate == null_value { 1.0 } else { 0.0 });
    }
    let t = ((estimate - null_value) / std_error).abs();
    let dist = StudentsT::new(0.0, 1.0, dof as f64).map_err(|e| Error::invalid(e.to_string()))?;
    Ok((2.0 * dist.sf(t)).clamp(0.0, 1.0))
}

fn check_len(y: &[f64], a: &Assignment) -> Result<()> {
    if y.len() != a.n() {
        return Err(Error::invalid(format!(
            "outcome has length {} but assignment has n={}",
            y.len(),
            a.n()
        )));
    }
    Ok(())
}

/// `Ȳ1 - Ȳ0`, summing each arm in index order so that mirrored assignments
/// give exactly negated values.
pub fn mean_difference(y: &[f64], a: &Assignment) -> f64 {
    let (mut s1, mut s0) = (0.0, 0.0);
    for (i, &v) in y.iter().enumerate() {
        if a.is_treated(i) {
            s1 += v;
        } else {
            s0 += v;
        }
    }
    s1 / a.n1() as f64 - s0 / a.n0() as f64
}

pub fn diff_in_means(y: &[f64], a: &Assignment, opts: &TestOptions) -> Result<TestResult> {
    check_len(y, a)?;
    let (n1, n0) = (a.n1(), a.n0());
    if n1 < 2 || n0 < 2 {
        return Err(Error::VarianceUndefined(format!(
            "difference in means needs two units per arm (n1={n1}, n0={n0})"
        )));
    }
    let treated: Vec<f64> = (0..a.n()).filter(|&i| a.is_treated(i)).map(|i| y[i]).collect();
    let control: Vec<f64> = (0..a.n()).filter(|&i| !a.is_treated(i)).map(|i| y[i]).collect();
    let var = |v: &[f64]| {
        let m = compensated_mean(v);
        v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() as f64 - 1.0)
    };
    let estimate = mean_difference(y, a);
    let std_error = (var(&treated) / n1 as f64 + var(&control) / n0 as f64).sqrt();
    let dof = opts.dof_or(a.n() - 2);
    Ok(TestResult {
        estimator: EstimatorId::Dm,
        estimate,
        std_error,
        p_value: t_test(estimate, std_error, dof, opts.null_value)?,
        dof,
    })
}

/// Regression of `y` on an intercept, `W` and the design's covariates;
/// returns the coefficient on `W` with the classical OLS standard error.
pub fn ols_adjusted(
    y: &[f64],
    a: &Assignment,
    design: &CenteredDesign,
    opts: &TestOptions,
) -> Result<TestResult> {
    check_len(y, a)?;
    design.check_assignment(a)?;
    let (n, k) = (design.n(), design.k());
    if n <= k + 2 {
        return Err(Error::Infeasible(format!(
            "OLS with {k} covariates needs n > K + 2 (n={n})"
        )));
    }
    let ybar = compensated_mean(y);
    let y_tilde: Vec<f64> = y.iter().map(|v| v - ybar).collect();
    let delta = design.group_mean_difference(a);
    let zty = design.cross(&y_tilde);
    let b = design.solve(&zty);

    let c = (a.n0() * a.n1()) as f64 / n as f64;
    let denom = c * (1.0 - c * design.gram_quad_form(&delta));
    if !(denom > 1e-10 * c) {
        return Err(Error::RankDeficient {
            column: k,
            dependent_on: (0..k).collect(),
        });
    }
    let numer = c * (mean_difference(y, a) - delta.dot(&b));
    let estimate = numer / denom;

    let yty: f64 = y_tilde.iter().map(|v| v * v).sum();
    let rss = (yty - zty.dot(&b) - numer * numer / denom).max(0.0);
    let dof_resid = n - k - 2;
    let sigma2 = rss / dof_resid as f64;
    let std_error = (sigma2 / denom).sqrt();
    let dof = opts.dof_or(dof_resid);
    Ok(TestResult {
        estimator: EstimatorId::OlsZ,
        estimate,
        std_error,
        p_value: t_test(estimate, std_error, dof, opts.null_value)?,
        dof,
    })
}

/// Interacted regressors `X~ = [Z~ | Q~]` for one assignment, where
/// `Q_i = W_i (z_i - z̄)`, column-centered.
#[derive(Debug, Clone)]
pub struct InteractedDesign {
    assignment: Assignment,
    x_tilde: DMatrix<f64>,
    chol: Cholesky,
}

impl InteractedDesign {
    pub fn new(design: &CenteredDesign, a: &Assignment) -> Result<Self> {
        design.check_assignment(a)?;
        let (n, k) = (design.n(), design.k());
        let zt = design.z_tilde();
        let mut x = DMatrix::<f64>::zeros(n, 2 * k);
        x.columns_mut(0, k).copy_from(zt);
        for j in 0..k {
            let q: Vec<f64> = (0..n)
                .map(|i| if a.is_treated(i) { zt[(i, j)] } else { 0.0 })
                .collect();
            let qbar = compensated_mean(&q);
            for i in 0..n {
                x[(i, k + j)] = q[i] - qbar;
            }
        }
        let gram = x.transpose() * &x;
        let chol = Cholesky::new(&gram)?;
        Ok(InteractedDesign {
            assignment: a.clone(),
            x_tilde: x,
            chol,
        })
    }

    pub fn k(&self) -> usize {
        self.x_tilde.ncols() / 2
    }

    pub fn assignment(&self) -> &Assignment {
        &self.assignment
    }

    pub fn x_tilde(&self) -> &DMatrix<f64> {
        &self.x_tilde
    }

    /// `(n - 1) (X~'X~)^{-1}`, whose blocks are `Σ11⁻¹`, `Σ12⁻¹`, `Σ22⁻¹`.
    pub fn scaled_inverse(&self) -> DMatrix<f64> {
        self.chol.inverse() * (self.x_tilde.nrows() as f64 - 1.0)
    }

    fn block(&self, row: usize, col: usize) -> DMatrix<f64> {
        let k = self.k();
        self.scaled_inverse().view((row, col), (k, k)).into_owned()
    }

    pub fn sigma11_inv(&self) -> DMatrix<f64> {
        self.block(0, 0)
    }

    pub fn sigma12_inv(&self) -> DMatrix<f64> {
        self.block(0, self.k())
    }

    pub fn sigma22_inv(&self) -> DMatrix<f64> {
        self.block(self.k(), self.k())
    }

    fn cross(&self, v: &DVector<f64>) -> DVector<f64> {
        self.x_tilde.tr_mul(v)
    }
}

/// Full interacted fit: the treatment coefficient, its HC0 standard error and
/// the covariate coefficients `[beta0_hat; rho_hat]`.
#[derive(Debug, Clone)]
pub struct InteractedFit {
    pub tau: f64,
    pub std_error: f64,
    pub theta: DVector<f64>,
    pub residuals: DVector<f64>,
}

impl InteractedFit {
    pub fn rho(&self) -> DVector<f64> {
        let k = self.theta.len() / 2;
        self.theta.rows(k, k).into_owned()
    }
}

pub fn interacted_fit(y: &[f64], xdesign: &InteractedDesign) -> Result<InteractedFit> {
    let a = &xdesign.assignment;
    check_len(y, a)?;
    let n = a.n();
    let k = xdesign.k();
    if n <= 2 * k + 2 {
        return Err(Error::Infeasible(format!(
            "interacted OLS with {k} covariates needs n > 2K + 2 (n={n})"
        )));
    }
    let share = a.n1() as f64 / n as f64;
    let w_tilde = DVector::from_fn(n, |i, _| if a.is_treated(i) { 1.0 - share } else { -share });
    let ybar = compensated_mean(y);
    let y_tilde = DVector::from_fn(n, |i, _| y[i] - ybar);

    let gamma_w = xdesign.chol.solve(&xdesign.cross(&w_tilde));
    let r = &w_tilde - &xdesign.x_tilde * &gamma_w;
    let rr = r.norm_squared();
    if !(rr > 1e-10 * w_tilde.norm_squared()) {
        return Err(Error::RankDeficient {
            column: 2 * k,
            dependent_on: (0..2 * k).collect(),
        });
    }
    let tau = r.dot(&y_tilde) / rr;
    let partial = &y_tilde - &w_tilde * tau;
    let theta = xdesign.chol.solve(&xdesign.cross(&partial));
    let residuals = &partial - &xdesign.x_tilde * &theta;
    let meat: f64 = r
        .iter()
        .zip(residuals.iter())
        .map(|(ri, ei)| ri * ri * ei * ei)
        .sum();
    Ok(InteractedFit {
        tau,
        std_error: (meat / (rr * rr)).sqrt(),
        theta,
        residuals,
    })
}

/// Treatment coefficient from the interacted regression with HC0 variance.
pub fn ols_interacted(
    y: &[f64],
    a: &Assignment,
    xdesign: &InteractedDesign,
    opts: &TestOptions,
) -> Result<TestResult> {
    if a != xdesign.assignment() {
        return Err(Error::invalid("interacted design was built for a different assignment"));
    }
    let fit = interacted_fit(y, xdesign)?;
    let dof = opts.dof_or(a.n() - 2 * xdesign.k() - 2);
    Ok(TestResult {
        estimator: EstimatorId::OlsX,
        estimate: fit.tau,
        std_error: fit.std_error,
        p_value: t_test(fit.tau, fit.std_error, dof, opts.null_value)?,
        dof,
    })
}
