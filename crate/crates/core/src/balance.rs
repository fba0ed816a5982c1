//! Covariate imbalance: mean differences, Mahalanobis distances, the
//! noncentral chi-square approximation to conditioning-set sizes, principal
//! components and the greedy component-selection rule built on them.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use statrs::function::factorial::ln_factorial;
use statrs::function::gamma::gamma_lr;

use crate::assignment::Assignment;
use crate::design::CenteredDesign;
use crate::{Error, Result};

/// Scale of the covariance inside between-assignment distances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MahalanobisScale {
    /// `(Z~'Z~ / (n-1))^{-1}`, the same scale as the treatment/control distance.
    #[default]
    SampleCovariance,
    /// `(Z~'Z~)^{-1}` without the `n - 1` factor.
    Gram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub delta: Vec<f64>,
    pub mahalanobis: f64,
    pub mean_treated: Vec<f64>,
    pub mean_control: Vec<f64>,
    pub sd_treated: Vec<f64>,
    pub sd_control: Vec<f64>,
}

fn arm_factor(a: &Assignment) -> f64 {
    (a.n0() * a.n1()) as f64 / a.n() as f64
}

/// `M = (n0 n1 / n) Δ' (Z~'Z~/(n-1))^{-1} Δ`.
pub fn mahalanobis(design: &CenteredDesign, a: &Assignment) -> Result<f64> {
    design.check_assignment(a)?;
    let delta = design.group_mean_difference(a);
    Ok(arm_factor(a) * (design.n() as f64 - 1.0) * design.gram_quad_form(&delta))
}

pub fn balance_report(design: &CenteredDesign, a: &Assignment) -> Result<BalanceReport> {
    design.check_assignment(a)?;
    let k = design.k();
    let zt = design.z_tilde();
    let means = design.column_means();
    let arm_stats = |treated: bool| {
        let rows: Vec<usize> = (0..design.n()).filter(|&i| a.is_treated(i) == treated).collect();
        let m = rows.len() as f64;
        let mut mu = Vec::with_capacity(k);
        let mut sd = Vec::with_capacity(k);
        for j in 0..k {
            let mean = rows.iter().map(|&i| zt[(i, j)]).sum::<f64>() / m;
            let ss: f64 = rows.iter().map(|&i| (zt[(i, j)] - mean).powi(2)).sum();
            mu.push(mean + means[j]);
            sd.push(if rows.len() > 1 { (ss / (m - 1.0)).sqrt() } else { 0.0 });
        }
        (mu, sd)
    };
    let (mean_treated, sd_treated) = arm_stats(true);
    let (mean_control, sd_control) = arm_stats(false);
    let delta = design.group_mean_difference(a);
    let mahalanobis = arm_factor(a) * (design.n() as f64 - 1.0) * design.gram_quad_form(&delta);
    Ok(BalanceReport {
        delta: delta.iter().copied().collect(),
        mahalanobis,
        mean_treated,
        mean_control,
        sd_treated,
        sd_control,
    })
}

/// Distance between the imbalance of `a` and that of `reference`:
/// `(n0 n1 / n) Δj' S^{-1} Δj` with `Δj = Δ(a) - Δ(reference)`.
pub fn mahalanobis_between(
    design: &CenteredDesign,
    a: &Assignment,
    reference: &Assignment,
    scale: MahalanobisScale,
) -> Result<f64> {
    design.check_assignment(a)?;
    a.check_compatible(reference)?;
    let dj = design.group_mean_difference(a) - design.group_mean_difference(reference);
    let q = arm_factor(a) * design.gram_quad_form(&dj);
    Ok(match scale {
        MahalanobisScale::SampleCovariance => q * (design.n() as f64 - 1.0),
        MahalanobisScale::Gram => q,
    })
}

const POISSON_TAIL: f64 = 1e-12;
const MAX_SERIES_TERMS: usize = 100_000;
const RELATIVE_REMAINDER: f64 = 1e-15;

/// CDF of the noncentral chi-square distribution with `k` degrees of freedom
/// and noncentrality `lambda`, as a Poisson mixture of central CDFs.
pub fn noncentral_chisq_cdf(x: f64, k: f64, lambda: f64) -> Result<f64> {
    if !(x >= 0.0) || !(k >= 1.0) || !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::invalid(format!(
            "noncentral chi-square needs x >= 0, k >= 1, lambda >= 0 (got {x}, {k}, {lambda})"
        )));
    }
    if x == 0.0 {
        return Ok(0.0);
    }
    if x.is_infinite() {
        return Ok(1.0);
    }
    let half_x = x / 2.0;
    let half_l = lambda / 2.0;
    if half_l == 0.0 {
        return Ok(gamma_lr(k / 2.0, half_x));
    }
    let ln_half_l = half_l.ln();
    let mut total = 0.0;
    let mut mass = 0.0;
    for j in 0..MAX_SERIES_TERMS {
        let jf = j as f64;
        let w = (-half_l + jf * ln_half_l - ln_factorial(j as u64)).exp();
        mass += w;
        // the central terms decrease in j, so the rest is at most tail * g
        let g = gamma_lr(k / 2.0 + jf, half_x);
        if w > 0.0 {
            total += w * g;
        }
        let tail = (1.0 - mass).max(0.0);
        if jf > half_l && tail < POISSON_TAIL {
            break;
        }
        if tail * g <= RELATIVE_REMAINDER * total {
            break;
        }
    }
    Ok(total.clamp(0.0, 1.0))
}

/// Approximate number of assignments within `delta_bar` of one with
/// imbalance `m_delta`: `F_{k, m_delta}(delta_bar) * n_assignments`.
pub fn expected_set_size(delta_bar: f64, k: usize, m_delta: f64, n_assignments: f64) -> Result<f64> {
    if !(delta_bar >= 0.0) {
        return Err(Error::invalid(format!("delta_bar must be nonnegative, got {delta_bar}")));
    }
    let f = noncentral_chisq_cdf(delta_bar, k as f64, m_delta.max(0.0))?;
    if f == 0.0 {
        return Ok(0.0);
    }
    Ok((f * n_assignments).max(0.0))
}

/// Principal components of the sample covariance of the covariates.
#[derive(Debug, Clone)]
pub struct Pca {
    /// `K x K`, columns are components in descending-variance order.
    pub loadings: DMatrix<f64>,
    pub variances: DVector<f64>,
}

impl Pca {
    pub fn k(&self) -> usize {
        self.variances.len()
    }

    /// `Z~ * loadings`.
    pub fn scores(&self, design: &CenteredDesign) -> DMatrix<f64> {
        design.z_tilde() * &self.loadings
    }

    /// Per-component mean difference of the scores, `loadings' Δ`.
    pub fn score_delta(&self, design: &CenteredDesign, a: &Assignment) -> DVector<f64> {
        self.loadings.tr_mul(&design.group_mean_difference(a))
    }

    /// Treatment/control distance restricted to the first `p` components.
    pub fn leading_mahalanobis(&self, score_delta: &DVector<f64>, a: &Assignment, p: usize) -> f64 {
        let s: f64 = (0..p).map(|j| score_delta[j] * score_delta[j] / self.variances[j]).sum();
        arm_factor(a) * s
    }
}

pub fn pca(design: &CenteredDesign) -> Result<Pca> {
    let cov = design.covariance();
    let k = cov.nrows();
    let eig = SymmetricEigen::try_new(cov, 1e-14, 10_000)
        .ok_or_else(|| Error::Eigen("symmetric eigen-decomposition did not converge".into()))?;
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut loadings = DMatrix::<f64>::zeros(k, k);
    let mut variances = DVector::<f64>::zeros(k);
    for (dst, &src) in order.iter().enumerate() {
        let mut v = eig.eigenvectors.column(src).into_owned();
        let pivot = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if pivot < 0.0 {
            v = -v;
        }
        loadings.set_column(dst, &v);
        variances[dst] = eig.eigenvalues[src];
    }
    if variances[k - 1] <= 0.0 {
        return Err(Error::Eigen(format!(
            "covariance is not positive definite (smallest eigenvalue {})",
            variances[k - 1]
        )));
    }
    Ok(Pca { loadings, variances })
}

/// Starting value of the set-size recursion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialSize {
    /// All `C(n, n1)` assignments.
    #[default]
    Full,
    /// Half of them, for heterogeneous effects.
    Half,
}

impl InitialSize {
    pub fn value(self, n: usize, n1: usize) -> f64 {
        let all = crate::assignment::binomial_f64(n, n1);
        match self {
            InitialSize::Full => all,
            InitialSize::Half => all / 2.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ComponentSelection {
    pub loadings: DMatrix<f64>,
    pub variances: DVector<f64>,
    pub selected_p: usize,
    /// Components usable by the approximate Fisher test; equals
    /// `selected_p` until refined by the pair-switch success check.
    pub selected_p_fisher: usize,
    /// Expected set size at each candidate `p = 1, 2, ...` that was tried.
    pub n_delta_bar_trace: Vec<f64>,
}

/// Greedy choice of the number of leading principal components to condition
/// on: keep adding components while the expected number of assignments within
/// `delta_bar` stays at least `h`.
pub fn select_components(
    design: &CenteredDesign,
    a: &Assignment,
    delta_bar: f64,
    h: usize,
    initial_n: f64,
) -> Result<ComponentSelection> {
    let pca = pca(design)?;
    select_components_with(&pca, design, a, delta_bar, h, initial_n)
}

/// As [`select_components`] with a precomputed decomposition.
pub fn select_components_with(
    pca: &Pca,
    design: &CenteredDesign,
    a: &Assignment,
    delta_bar: f64,
    h: usize,
    initial_n: f64,
) -> Result<ComponentSelection> {
    if !(delta_bar > 0.0) || h < 1 {
        return Err(Error::invalid(format!(
            "component selection needs delta_bar > 0 and h >= 1 (got {delta_bar}, {h})"
        )));
    }
    design.check_assignment(a)?;
    let k = pca.k();
    let sd = pca.score_delta(design, a);
    let h = h as f64;
    let mut p = 0;
    let mut n_bar = initial_n;
    let mut trace = Vec::new();
    while n_bar >= h && p < k {
        let m = pca.leading_mahalanobis(&sd, a, p + 1);
        n_bar = expected_set_size(delta_bar, p + 1, m, initial_n)?;
        trace.push(n_bar);
        if n_bar >= h {
            p += 1;
        }
    }
    Ok(ComponentSelection {
        loadings: pca.loadings.clone(),
        variances: pca.variances.clone(),
        selected_p: p,
        selected_p_fisher: p,
        n_delta_bar_trace: trace,
    })
}

/// `gamma^2 Var(Z) / theta^2 > 1 / ((n - 1)(1 - r2))`, the condition under
/// which adjusting for a weakly informative covariate still pays off.
pub fn mutz_inequality(gamma: f64, theta: f64, var_z: f64, n: usize, r2: f64) -> Result<bool> {
    if theta == 0.0 {
        return Err(Error::invalid("theta must be nonzero"));
    }
    if !(0.0..1.0).contains(&r2) {
        return Err(Error::invalid(format!("r2 must lie in [0, 1), got {r2}")));
    }
    if n < 2 {
        return Err(Error::invalid("n must be at least 2"));
    }
    let left = gamma * gamma * var_z / (theta * theta);
    let right = 1.0 / ((n as f64 - 1.0) * (1.0 - r2));
    Ok(left > right)
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn design(rows: usize, cols: usize, data: &[f64]) -> CenteredDesign {
        CenteredDesign::new(&DMatrix::from_row_slice(rows, cols, data)).unwrap()
    }

    #[test]
    fn balanced_dummy_has_zero_distance() {
        let d = design(4, 1, &[1.0, 0.0, 1.0, 0.0]);
        let a = Assignment::from_treated(4, &[0, 1]).unwrap();
        let r = balance_report(&d, &a).unwrap();
        assert_eq!(r.delta, vec![0.0]);
        assert_eq!(r.mahalanobis, 0.0);
        assert_eq!(r.mean_treated, vec![0.5]);
    }

    #[test]
    fn unit_variance_arithmetic() {
        // z has sample variance 1 and treated/control means differing by 0.5
        let n = 20;
        let mut z: Vec<f64> = (0..n).map(|i| if i < 10 { 0.25 } else { -0.25 }).collect();
        // add a zero-mean spread within arms to fix the variance at 1
        let spread = ((19.0 - 20.0 * 0.0625) / 20.0f64).sqrt();
        for (i, v) in z.iter_mut().enumerate() {
            *v += if i % 2 == 0 { spread } else { -spread };
        }
        let d = CenteredDesign::new(&DMatrix::from_column_slice(n, 1, &z)).unwrap();
        assert!((d.covariance()[(0, 0)] - 1.0).abs() < 1e-12);
        let a = Assignment::from_treated(n, &(0..10).collect::<Vec<_>>()).unwrap();
        let r = balance_report(&d, &a).unwrap();
        assert!((r.delta[0] - 0.5).abs() < 1e-12);
        assert!((r.mahalanobis - 1.25).abs() < 1e-12);
    }

    #[test]
    fn between_distance_basics() {
        let d = design(6, 2, &[0.3, 1.0, -1.2, 0.5, 2.0, -0.7, 0.1, 0.0, -0.4, 1.5, 1.1, -2.0]);
        let a = Assignment::from_treated(6, &[0, 2, 5]).unwrap();
        let s = MahalanobisScale::SampleCovariance;
        assert_eq!(mahalanobis_between(&d, &a, &a, s).unwrap(), 0.0);
        let m = mahalanobis(&d, &a).unwrap();
        let mirror = a.mirror().unwrap();
        let mj = mahalanobis_between(&d, &mirror, &a, s).unwrap();
        assert!((mj - 4.0 * m).abs() < 1e-10 * m.max(1.0));
        let g = mahalanobis_between(&d, &mirror, &a, MahalanobisScale::Gram).unwrap();
        assert!((g * 5.0 - mj).abs() < 1e-12 * mj.max(1.0));
    }

    #[test]
    fn central_closed_form() {
        let v = noncentral_chisq_cdf(2.0, 2.0, 0.0).unwrap();
        assert!((v - (1.0 - (-1.0f64).exp())).abs() < 1e-10);
        assert_eq!(noncentral_chisq_cdf(0.0, 3.0, 2.0).unwrap(), 0.0);
    }

    #[test]
    fn zero_noncentrality_matches_central_grid() {
        for k in 1..=40 {
            let chi = ChiSquared::new(k as f64).unwrap();
            for step in 0..=50 {
                let x = step as f64 * 2.0;
                let a = noncentral_chisq_cdf(x, k as f64, 0.0).unwrap();
                assert!((a - chi.cdf(x)).abs() < 1e-10, "k={k} x={x}");
            }
        }
    }

    #[test]
    fn noncentral_matches_two_dof_series_by_quadrature() {
        // k=1: P((N(mu,1))^2 <= x) = Phi(sqrt x - mu) - Phi(-sqrt x - mu)
        use statrs::distribution::Normal;
        let phi = Normal::new(0.0, 1.0).unwrap();
        for &(x, lambda) in &[(1.0, 1.0), (0.3, 4.0), (9.0, 2.5), (20.0, 16.0)] {
            let mu: f64 = f64::sqrt(lambda);
            let s = f64::sqrt(x);
            let exact = phi.cdf(s - mu) - phi.cdf(-s - mu);
            let got = noncentral_chisq_cdf(x, 1.0, lambda).unwrap();
            assert!((got - exact).abs() < 1e-10, "x={x} lambda={lambda}: {got} vs {exact}");
        }
    }

    #[test]
    fn set_size_behaviour() {
        assert_eq!(expected_set_size(0.0, 1, 0.0, 184_756.0).unwrap(), 0.0);
        let chi = ChiSquared::new(1.0).unwrap();
        let v = expected_set_size(0.01, 1, 0.0, 184_756.0).unwrap();
        assert!((v - chi.cdf(0.01) * 184_756.0).abs() < 1e-6);
        assert!(v > 14_700.0 && v < 14_800.0, "{v}");
        let mut prev = 0.0;
        let mut db = 1e-4;
        while db < 50.0 {
            let s = expected_set_size(db, 3, 2.0, 1e6).unwrap();
            assert!(s >= prev);
            prev = s;
            db *= 2.0;
        }
    }

    #[test]
    fn pca_diagonal_covariance() {
        // columns with sample variances 4 and 1, uncorrelated
        let z = [2.0, 1.0, -2.0, 1.0, 2.0, -1.0, -2.0, -1.0];
        let d = design(4, 2, &z);
        let cov = d.covariance();
        let scale = (4.0 / cov[(0, 0)]).sqrt();
        let z2: Vec<f64> = z.iter().enumerate().map(|(i, v)| if i % 2 == 0 { v * scale } else { v * (1.0 / cov[(1, 1)]).sqrt() }).collect();
        let d = design(4, 2, &z2);
        let p = pca(&d).unwrap();
        assert!((p.variances[0] - 4.0).abs() < 1e-10);
        assert!((p.variances[1] - 1.0).abs() < 1e-10);
        assert!((p.loadings.clone() - DMatrix::identity(2, 2)).amax() < 1e-10);
    }

    #[test]
    fn pca_reconstructs_and_preserves_distance() {
        let d = design(7, 3, &[
            0.3, 1.0, 0.2, -1.2, 0.5, 1.1, 2.0, -0.7, 0.4, 0.1, 0.0, -0.9, -0.4, 1.5, 0.3, 1.1, -2.0, -0.6, 0.6, 0.2, 1.4,
        ]);
        let p = pca(&d).unwrap();
        let orth = p.loadings.transpose() * &p.loadings;
        assert!((orth - DMatrix::identity(3, 3)).amax() < 1e-8);
        let recon = p.scores(&d) * p.loadings.transpose();
        assert!((recon - d.z_tilde()).amax() < 1e-9);
        let a = Assignment::from_treated(7, &[1, 2, 6]).unwrap();
        let sd = p.score_delta(&d, &a);
        let m_pc = p.leading_mahalanobis(&sd, &a, 3);
        assert!((m_pc - mahalanobis(&d, &a).unwrap()).abs() < 1e-9);
        let sc = CenteredDesign::new(&p.scores(&d)).unwrap();
        assert!((mahalanobis(&sc, &a).unwrap() - m_pc).abs() < 1e-9);
    }

    #[test]
    fn selection_edge_cases() {
        let d = design(7, 2, &[0.3, 1.0, -1.2, 0.5, 2.0, -0.7, 0.1, 0.0, -0.4, 1.5, 1.1, -2.0, 0.6, 0.2]);
        let a = Assignment::from_treated(7, &[1, 2, 6]).unwrap();
        let n_a = InitialSize::Full.value(7, 3);
        let s = select_components(&d, &a, 0.01, 100, n_a).unwrap();
        assert_eq!(s.selected_p, 0);
        assert!(s.n_delta_bar_trace.is_empty());
        let s = select_components(&d, &a, 100.0, 1, n_a).unwrap();
        assert_eq!(s.selected_p, 2);
        assert!(select_components(&d, &a, 0.0, 1, n_a).is_err());
    }

    #[test]
    fn mutz_cases() {
        assert!(!mutz_inequality(0.0, 1.0, 1.0, 50, 0.2).unwrap());
        assert!(mutz_inequality(1.0, 1.0, 1.0, 101, 0.0).unwrap());
        // left = right = 0.25
        assert!(!mutz_inequality(0.5, 1.0, 1.0, 5, 0.0).unwrap());
        assert!(mutz_inequality(1.0, 1.0, 1.0, 10, 1.0).is_err());
        assert!(mutz_inequality(1.0, 0.0, 1.0, 10, 0.0).is_err());
    }
}
