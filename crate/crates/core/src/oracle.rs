//! Ground truth for conditional moments.
//!
//! Two independent routes: closed-form conditional variances for a single
//! binary covariate, and brute-force enumeration of every assignment grouped
//! by its exact imbalance (or by quantile bins of the Mahalanobis distance).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::assignment::{self, Assignment};
use crate::design::{fit_projection, CenteredDesign, Sample};
use crate::estimators::{mean_difference, ols_adjusted, TestOptions};
use crate::{Error, Result};

/// A single 0/1 covariate with `n_z` ones, conditioned on an imbalance
/// `delta` that some assignment actually attains.
#[derive(Debug, Clone)]
pub struct DummyDesign {
    pub n: usize,
    pub n0: usize,
    pub n1: usize,
    pub n_z: usize,
    pub delta: f64,
    /// Residuals of the units with `Z = 1`.
    pub residuals_z1: Vec<f64>,
    /// Residuals of the units with `Z = 0`.
    pub residuals_z0: Vec<f64>,
}

/// Imbalance when `t` of the `n_z` ones are treated.
pub fn dummy_delta(n: usize, n1: usize, n_z: usize, t: usize) -> f64 {
    let n0 = n - n1;
    t as f64 / n1 as f64 - (n_z - t) as f64 / n0 as f64
}

/// Feasible treated counts among the ones.
pub fn attainable_treated_ones(n: usize, n1: usize, n_z: usize) -> std::ops::RangeInclusive<usize> {
    n1.saturating_sub(n - n_z)..=n1.min(n_z)
}

pub fn attainable_deltas(n: usize, n1: usize, n_z: usize) -> Vec<f64> {
    attainable_treated_ones(n, n1, n_z)
        .map(|t| dummy_delta(n, n1, n_z, t))
        .collect()
}

impl DummyDesign {
    pub fn new(
        n1: usize,
        delta: f64,
        residuals_z1: Vec<f64>,
        residuals_z0: Vec<f64>,
    ) -> Result<Self> {
        let n_z = residuals_z1.len();
        let n = n_z + residuals_z0.len();
        if n1 == 0 || n1 >= n {
            return Err(Error::invalid(format!("need 0 < n1 < n (n={n}, n1={n1})")));
        }
        if n_z < 2 || n - n_z < 2 {
            return Err(Error::invalid(format!(
                "need at least two units at each covariate value (n_z={n_z}, n-n_z={})",
                n - n_z
            )));
        }
        for (name, r) in [("Z=1", &residuals_z1), ("Z=0", &residuals_z0)] {
            let scale: f64 = r.iter().map(|v| v.abs()).sum::<f64>().max(1.0);
            if r.iter().sum::<f64>().abs() > 1e-9 * scale {
                return Err(Error::invalid(format!("residuals with {name} must sum to zero")));
            }
        }
        let d = DummyDesign {
            n,
            n0: n - n1,
            n1,
            n_z,
            delta,
            residuals_z1,
            residuals_z0,
        };
        d.treated_ones()?;
        Ok(d)
    }

    /// Number of treated units with `Z = 1` implied by `delta`.
    pub fn treated_ones(&self) -> Result<usize> {
        let (n, n0, n1) = (self.n as f64, self.n0 as f64, self.n1 as f64);
        let t = n1 * self.n_z as f64 / n + n0 * n1 * self.delta / n;
        let rounded = t.round();
        let range = attainable_treated_ones(self.n, self.n1, self.n_z);
        if (t - rounded).abs() > 1e-9 || rounded < 0.0 || !range.contains(&(rounded as usize)) {
            return Err(Error::UnattainableDelta {
                delta: self.delta,
                attainable: attainable_deltas(self.n, self.n1, self.n_z),
            });
        }
        Ok(rounded as usize)
    }
}

/// Conditional assignment frequencies within the set of assignments that
/// share the imbalance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DummyFrequencies {
    /// P(treated) for a unit with `Z = 1`.
    pub f1: f64,
    /// P(treated) for a unit with `Z = 0`.
    pub f2: f64,
    /// P(both treated) for two distinct `Z = 1` units.
    pub f3: f64,
    /// P(both treated) for two distinct `Z = 0` units.
    pub f4: f64,
    /// P(first treated, second control) for two distinct `Z = 1` units.
    pub f6: f64,
    /// P(first treated, second control) for two distinct `Z = 0` units.
    pub f7: f64,
}

pub fn dummy_frequencies(d: &DummyDesign) -> Result<DummyFrequencies> {
    d.treated_ones()?;
    let (n, n0, n1, nz) = (d.n as f64, d.n0 as f64, d.n1 as f64, d.n_z as f64);
    let nc = n - nz;
    let f1 = n1 / n + n0 * n1 / (n * nz) * d.delta;
    let f2 = n1 / n - n0 * n1 / (n * nc) * d.delta;
    Ok(DummyFrequencies {
        f1,
        f2,
        f3: f1 * (nz * f1 - 1.0) / (nz - 1.0),
        f4: f2 * (nc * f2 - 1.0) / (nc - 1.0),
        f6: nz * f1 * (1.0 - f1) / (nz - 1.0),
        f7: nc * f2 * (1.0 - f2) / (nc - 1.0),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionalMoments {
    pub mean: f64,
    pub variance: f64,
    /// Mean squared deviation from the target (the sample ATE for estimators,
    /// zero for residual gaps).
    pub mse: f64,
    pub set_size: u64,
}

fn sum_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// Conditional moments of `ε̄1 - ε̄0` given the imbalance, from the
/// frequency expansion.
pub fn dummy_conditional_variance(d: &DummyDesign) -> Result<ConditionalMoments> {
    let f = dummy_frequencies(d)?;
    let (n0, n1) = (d.n0 as f64, d.n1 as f64);
    let coef = |pair: f64, cross: f64| pair / (n1 * n1) + pair / (n0 * n0) + 2.0 * cross / (n0 * n1);
    let variance = if d.n0 == d.n1 {
        balanced_variance(d)
    } else {
        coef(f.f1 - f.f3, f.f6) * sum_sq(&d.residuals_z1) + coef(f.f2 - f.f4, f.f7) * sum_sq(&d.residuals_z0)
    };
    let t = d.treated_ones()?;
    let size = assignment::binomial(d.n_z, t).unwrap_or(0) * assignment::binomial(d.n - d.n_z, d.n1 - t).unwrap_or(0);
    Ok(ConditionalMoments {
        mean: 0.0,
        variance,
        mse: variance,
        set_size: size as u64,
    })
}

/// The same variance written as a quadratic in the imbalance.
pub fn dummy_variance_quadratic(d: &DummyDesign) -> f64 {
    let (n, n0, n1, nz) = (d.n as f64, d.n0 as f64, d.n1 as f64, d.n_z as f64);
    let nc = n - nz;
    let dl = d.delta;
    let a = nz / (n0 * n1 * (nz - 1.0)) + (n0 - n1) / (n0 * n1 * (nz - 1.0)) * dl - dl * dl / (nz * (nz - 1.0));
    let b = nc / (n0 * n1 * (nc - 1.0)) + (n1 - n0) / (n0 * n1 * (nc - 1.0)) * dl - dl * dl / (nc * (nc - 1.0));
    a * sum_sq(&d.residuals_z1) + b * sum_sq(&d.residuals_z0)
}

fn balanced_variance(d: &DummyDesign) -> f64 {
    let (n, nz) = (d.n as f64, d.n_z as f64);
    let nc = n - nz;
    let dl2 = d.delta * d.delta;
    let a = 4.0 * nz / (n * n * (nz - 1.0)) - dl2 / (nz * (nz - 1.0));
    let b = 4.0 * nc / (n * n * (nc - 1.0)) - dl2 / (nc * (nc - 1.0));
    a * sum_sq(&d.residuals_z1) + b * sum_sq(&d.residuals_z0)
}

/// Conditional MSE comparison of difference-in-means against covariate
/// adjustment. `lhs` is the excess DM MSE from bias, `rhs` the excess
/// adjustment MSE from variance inflation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MseComparison {
    pub lhs: f64,
    pub rhs: f64,
    pub dm_worse: bool,
}

/// `(Δ'β)² + 2 Δ'β E(e) > E(e²) (1/(1 - M/(n-1))² - 1)` where `e = ε̄1 - ε̄0`.
pub fn mse_comparison(beta_delta: f64, mean_gap: f64, second_moment_gap: f64, m: f64, n: usize) -> MseComparison {
    let shrink = 1.0 - m / (n as f64 - 1.0);
    let lhs = beta_delta * beta_delta + 2.0 * beta_delta * mean_gap;
    let rhs = second_moment_gap * (1.0 / (shrink * shrink) - 1.0);
    MseComparison {
        lhs,
        rhs,
        dm_worse: lhs > rhs,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OracleEstimator {
    #[serde(rename = "DM")]
    Dm,
    #[serde(rename = "OLS_Z")]
    OlsZ,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Conditioner {
    /// Group assignments with bit-identical treated-arm covariate sums.
    ExactDelta,
    /// Quantile bins of the Mahalanobis distance.
    MQuantile { bins: usize },
}

/// Rank-based quantile bins: bin `b` of `bins` holds sorted positions
/// `[b N / bins, (b+1) N / bins)`; runs of tied values all go to the lowest
/// bin they touch, so each bin is a left-closed, right-open value interval.
pub fn quantile_bins(values: &[f64], bins: usize) -> Vec<usize> {
    let len = values.len();
    let mut order: Vec<usize> = (0..len).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut out = vec![0usize; len];
    let mut pos = 0;
    while pos < len {
        let mut end = pos + 1;
        while end < len && values[order[end]] == values[order[pos]] {
            end += 1;
        }
        let bin = (pos * bins / len.max(1)).min(bins.saturating_sub(1));
        for &i in &order[pos..end] {
            out[i] = bin;
        }
        pos = end;
    }
    out
}

/// Moments of one conditioning group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupMoments {
    /// Imbalance of the group (exact-delta grouping) or the mean imbalance
    /// of its members (quantile grouping).
    pub delta: Vec<f64>,
    pub bin: Option<usize>,
    pub m: f64,
    pub weight: f64,
    pub estimator: ConditionalMoments,
    /// Moments of `ε̄1 - ε̄0`.
    pub gap: ConditionalMoments,
}

struct Row {
    key: Vec<u64>,
    sums: Vec<f64>,
    m: f64,
    estimate: f64,
    gap: f64,
}

fn moments(values: &[f64], target: f64) -> ConditionalMoments {
    let len = values.len() as f64;
    let mean = values.iter().sum::<f64>() / len;
    let variance = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / len;
    let mse = values.iter().map(|v| (v - target).powi(2)).sum::<f64>() / len;
    ConditionalMoments {
        mean,
        variance,
        mse,
        set_size: values.len() as u64,
    }
}

fn enumerate_rows(sample: &Sample, estimator: OracleEstimator, limit: u128, n1: usize) -> Result<(Vec<Row>, CenteredDesign)> {
    let design = sample.design()?;
    let (n, k) = (sample.n(), sample.k());
    let e0 = fit_projection(sample.y0(), &design)?.residuals;
    let e1 = fit_projection(sample.y1(), &design)?.residuals;
    let z = sample.z();
    let opts = TestOptions::default();
    let rows = assignment::map_enumerated(n, n1, limit, |_, treated| -> Result<Row> {
        let a = Assignment::from_treated(n, treated)?;
        let y = sample.observed(&a);
        let sums: Vec<f64> = (0..k).map(|j| treated.iter().map(|&i| z[(i, j)]).sum()).collect();
        let estimate = match estimator {
            OracleEstimator::Dm => mean_difference(&y, &a),
            OracleEstimator::OlsZ => ols_adjusted(&y, &a, &design, &opts)?.estimate,
        };
        let (mut g1, mut g0) = (0.0, 0.0);
        for i in 0..n {
            if a.is_treated(i) {
                g1 += e1[i];
            } else {
                g0 += e0[i];
            }
        }
        let gap = g1 / a.n1() as f64 - g0 / a.n0() as f64;
        let m = crate::balance::mahalanobis(&design, &a)?;
        Ok(Row {
            key: sums.iter().map(|s| s.to_bits()).collect(),
            sums,
            m,
            estimate,
            gap,
        })
    })?;
    Ok((rows.into_iter().collect::<Result<_>>()?, design))
}

/// Enumerates every assignment of `n1` treated units and returns conditional
/// moments per group, ordered by group key (exact) or bin index (quantile).
pub fn conditional_groups(
    sample: &Sample,
    n1: usize,
    estimator: OracleEstimator,
    conditioner: Conditioner,
    limit: u128,
) -> Result<Vec<GroupMoments>> {
    let (rows, design) = enumerate_rows(sample, estimator, limit, n1)?;
    let tau = sample.tau();
    let total = rows.len() as f64;
    let n = sample.n();
    let n0 = n - n1;
    let totals: Vec<f64> = (0..sample.k()).map(|j| sample.z().column(j).iter().sum()).collect();
    let delta_of = |sums: &[f64]| -> Vec<f64> {
        sums.iter()
            .zip(&totals)
            .map(|(s, t)| s / n1 as f64 - (t - s) / n0 as f64)
            .collect()
    };

    let mut groups: BTreeMap<Vec<u64>, Vec<usize>> = BTreeMap::new();
    let bins = match conditioner {
        Conditioner::ExactDelta => None,
        Conditioner::MQuantile { bins } => {
            if bins == 0 {
                return Err(Error::invalid("need at least one quantile bin"));
            }
            Some(quantile_bins(&rows.iter().map(|r| r.m).collect::<Vec<_>>(), bins))
        }
    };
    for (i, r) in rows.iter().enumerate() {
        let key = match &bins {
            None => r.key.clone(),
            Some(b) => vec![b[i] as u64],
        };
        groups.entry(key).or_default().push(i);
    }

    let mut out = Vec::with_capacity(groups.len());
    for (key, members) in groups {
        let est: Vec<f64> = members.iter().map(|&i| rows[i].estimate).collect();
        let gap: Vec<f64> = members.iter().map(|&i| rows[i].gap).collect();
        let (delta, m, bin) = match conditioner {
            Conditioner::ExactDelta => {
                let d = delta_of(&rows[members[0]].sums);
                let dv = nalgebra::DVector::from_column_slice(&d);
                let c = (n0 * n1) as f64 / n as f64;
                (d, c * (n as f64 - 1.0) * design.gram_quad_form(&dv), None)
            }
            Conditioner::MQuantile { .. } => {
                let len = members.len() as f64;
                let mut d = vec![0.0; sample.k()];
                for &i in &members {
                    for (acc, v) in d.iter_mut().zip(delta_of(&rows[i].sums)) {
                        *acc += v / len;
                    }
                }
                let m = members.iter().map(|&i| rows[i].m).sum::<f64>() / len;
                (d, m, Some(key[0] as usize))
            }
        };
        out.push(GroupMoments {
            delta,
            bin,
            m,
            weight: members.len() as f64 / total,
            estimator: moments(&est, tau),
            gap: moments(&gap, 0.0),
        });
    }
    Ok(out)
}

/// Moments of the group that contains `reference`.
pub fn brute_force_conditional(
    sample: &Sample,
    estimator: OracleEstimator,
    conditioner: Conditioner,
    reference: &Assignment,
    limit: u128,
) -> Result<GroupMoments> {
    if reference.n() != sample.n() {
        return Err(Error::invalid("reference assignment does not match the sample"));
    }
    let (rows, _) = enumerate_rows(sample, estimator, limit, reference.n1())?;
    let ref_idx = reference.rank() as usize;
    let groups = conditional_groups(sample, reference.n1(), estimator, conditioner, limit)?;
    let found = match conditioner {
        Conditioner::ExactDelta => {
            let n0 = reference.n0() as f64;
            let n1 = reference.n1() as f64;
            let totals: Vec<f64> = (0..sample.k()).map(|j| sample.z().column(j).iter().sum()).collect();
            let d: Vec<f64> = rows[ref_idx]
                .sums
                .iter()
                .zip(&totals)
                .map(|(s, t)| s / n1 - (t - s) / n0)
                .collect();
            groups.into_iter().find(|g| g.delta == d)
        }
        Conditioner::MQuantile { bins } => {
            let b = quantile_bins(&rows.iter().map(|r| r.m).collect::<Vec<_>>(), bins)[ref_idx];
            groups.into_iter().find(|g| g.bin == Some(b))
        }
    };
    found.ok_or_else(|| Error::invalid("reference group not found"))
}

/// Unconditional moments over all assignments.
pub fn unconditional(sample: &Sample, n1: usize, estimator: OracleEstimator, limit: u128) -> Result<ConditionalMoments> {
    let (rows, _) = enumerate_rows(sample, estimator, limit, n1)?;
    let est: Vec<f64> = rows.iter().map(|r| r.estimate).collect();
    Ok(moments(&est, sample.tau()))
}

/// `Σ_g w_g (Var_g + (mean_g - overall)²)`; equals the unconditional variance.
pub fn total_variance_from_groups(groups: &[GroupMoments]) -> f64 {
    let overall: f64 = groups.iter().map(|g| g.weight * g.estimator.mean).sum();
    groups
        .iter()
        .map(|g| g.weight * (g.estimator.variance + (g.estimator.mean - overall).powi(2)))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assignment::{enumerate_assignments, DEFAULT_ENUMERATION_LIMIT};
    use nalgebra::DMatrix;

    fn zero_sum(len: usize, seed: f64) -> Vec<f64> {
        let mut v: Vec<f64> = (0..len).map(|i| ((i as f64 + 1.0) * seed).sin()).collect();
        let m = v.iter().sum::<f64>() / len as f64;
        v.iter_mut().for_each(|x| *x -= m);
        v
    }

    // Frequencies and residual-gap moments by enumeration, with the ones
    // placed first.
    fn enumerate_dummy(d: &DummyDesign) -> (f64, f64, f64, f64, f64, f64, f64, f64, f64, f64, f64) {
        let t = d.treated_ones().unwrap();
        let eps: Vec<f64> = d.residuals_z1.iter().chain(&d.residuals_z0).copied().collect();
        let nz = d.n_z;
        let (mut c, mut f) = (0.0, [0.0; 9]);
        let mut gaps = Vec::new();
        for a in enumerate_assignments(d.n, d.n1).unwrap() {
            if (0..nz).filter(|&i| a.is_treated(i)).count() != t {
                continue;
            }
            c += 1.0;
            let w = |i: usize| a.is_treated(i);
            f[0] += w(0) as u8 as f64;
            f[1] += w(nz) as u8 as f64;
            f[2] += (w(0) && w(1)) as u8 as f64;
            f[3] += (w(nz) && w(nz + 1)) as u8 as f64;
            f[4] += (w(0) && w(nz)) as u8 as f64;
            f[5] += (w(0) && !w(1)) as u8 as f64;
            f[6] += (w(nz) && !w(nz + 1)) as u8 as f64;
            f[7] += (w(0) && !w(nz)) as u8 as f64;
            f[8] += (w(nz) && !w(0)) as u8 as f64;
            gaps.push(mean_difference(&eps, &a));
        }
        let m = moments(&gaps, 0.0);
        (
            f[0] / c,
            f[1] / c,
            f[2] / c,
            f[3] / c,
            f[4] / c,
            f[5] / c,
            f[6] / c,
            f[7] / c,
            f[8] / c,
            m.mean,
            m.variance,
        )
    }

    #[test]
    fn four_unit_example() {
        let d = DummyDesign::new(2, 0.0, vec![1.0, -1.0], vec![0.5, -0.5]).unwrap();
        let f = dummy_frequencies(&d).unwrap();
        assert_eq!((f.f1, f.f3, f.f6), (0.5, 0.0, 0.5));
        assert_eq!(dummy_conditional_variance(&d).unwrap().set_size, 4);
    }

    #[test]
    fn twenty_unit_arithmetic() {
        let d = DummyDesign::new(10, 0.2, zero_sum(10, 0.7), zero_sum(10, 1.3)).unwrap();
        assert!((dummy_frequencies(&d).unwrap().f1 - 0.6).abs() < 1e-15);
    }

    #[test]
    fn unattainable_delta_lists_options() {
        match DummyDesign::new(5, 0.1, zero_sum(4, 0.3), zero_sum(6, 0.9)) {
            Err(Error::UnattainableDelta { attainable, .. }) => {
                assert_eq!(attainable.len(), 5);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn closed_forms_match_enumeration_small_grid() {
        for n in 5..=10 {
            for n1 in 1..n {
                for nz in 2..=(n - 2) {
                    for delta in attainable_deltas(n, n1, nz) {
                        let d = DummyDesign::new(n1, delta, zero_sum(nz, 0.37), zero_sum(n - nz, 1.91)).unwrap();
                        let f = dummy_frequencies(&d).unwrap();
                        let (f1, f2, f3, f4, f5, f6, f7, f8, f9, mean, var) = enumerate_dummy(&d);
                        for (name, a, b) in [("f1", f.f1, f1), ("f2", f.f2, f2), ("f3", f.f3, f3), ("f4", f.f4, f4), ("f6", f.f6, f6), ("f7", f.f7, f7)] {
                            assert!((a - b).abs() < 1e-12, "{name} n={n} n1={n1} nz={nz} delta={delta}: {a} vs {b}");
                            assert!((-1e-12..=1.0 + 1e-12).contains(&a));
                        }
                        // the cross-group frequencies factor through independence
                        assert!((f5 - f1 * f2).abs() < 1e-12);
                        assert!((f8 - f1 * (1.0 - f2)).abs() < 1e-12);
                        assert!((f9 - f2 * (1.0 - f1)).abs() < 1e-12);
                        assert!(mean.abs() < 1e-12);
                        let v = dummy_conditional_variance(&d).unwrap().variance;
                        assert!((v - var).abs() < 1e-12, "n={n} n1={n1} nz={nz} delta={delta}: {v} vs {var}");
                        assert!((dummy_variance_quadratic(&d) - var).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn balanced_formula_agrees_and_peaks_at_zero() {
        let (n, n1, nz) = (12, 6, 4);
        let mut best = (f64::MIN, f64::NAN);
        for delta in attainable_deltas(n, n1, nz) {
            let d = DummyDesign::new(n1, delta, zero_sum(nz, 0.5), zero_sum(n - nz, 2.2)).unwrap();
            let f = dummy_frequencies(&d).unwrap();
            let general = (f.f1 - f.f3) * (2.0 / 36.0) * sum_sq(&d.residuals_z1)
                + 2.0 * f.f6 / 36.0 * sum_sq(&d.residuals_z1)
                + (f.f2 - f.f4) * (2.0 / 36.0) * sum_sq(&d.residuals_z0)
                + 2.0 * f.f7 / 36.0 * sum_sq(&d.residuals_z0);
            let v = balanced_variance(&d);
            assert!((general - v).abs() < 1e-12);
            let mirrored = DummyDesign { delta: -delta, ..d.clone() };
            assert!((balanced_variance(&mirrored) - v).abs() < 1e-12);
            if v > best.0 {
                best = (v, delta);
            }
        }
        assert!(best.1.abs() < 1e-12);
    }

    fn continuous_sample(n: usize, seed: f64) -> Sample {
        let z = DMatrix::from_fn(n, 1, |i, _| ((i as f64 + 1.0) * seed).sin() * 2.0);
        let y0: Vec<f64> = (0..n).map(|i| 0.8 * z[(i, 0)] + ((i as f64) * 1.7).cos()).collect();
        Sample::new(z, y0.clone(), y0).unwrap()
    }

    #[test]
    fn dummy_groups_have_zero_mean_gap() {
        let z = DMatrix::from_fn(10, 1, |i, _| if i % 3 == 0 { 1.0 } else { 0.0 });
        let y0: Vec<f64> = (0..10).map(|i| z[(i, 0)] + ((i as f64) * 0.9).sin()).collect();
        let s = Sample::new(z, y0.clone(), y0).unwrap();
        let groups = conditional_groups(&s, 5, OracleEstimator::Dm, Conditioner::ExactDelta, DEFAULT_ENUMERATION_LIMIT).unwrap();
        assert_eq!(groups.len(), attainable_deltas(10, 5, 4).len());
        for g in &groups {
            assert!(g.gap.mean.abs() < 1e-12);
        }
    }

    #[test]
    fn total_variance_decomposes() {
        let s = continuous_sample(10, 0.77);
        for est in [OracleEstimator::Dm, OracleEstimator::OlsZ] {
            for cond in [Conditioner::ExactDelta, Conditioner::MQuantile { bins: 5 }] {
                let groups = conditional_groups(&s, 5, est, cond, DEFAULT_ENUMERATION_LIMIT).unwrap();
                let whole = unconditional(&s, 5, est, DEFAULT_ENUMERATION_LIMIT).unwrap();
                assert!((total_variance_from_groups(&groups) - whole.variance).abs() < 1e-9);
                assert!((groups.iter().map(|g| g.weight).sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mse_inequality_agrees_with_moments() {
        let s = continuous_sample(12, 0.41);
        let design = s.design().unwrap();
        let beta = fit_projection(s.y0(), &design).unwrap().beta;
        let dm = conditional_groups(&s, 6, OracleEstimator::Dm, Conditioner::ExactDelta, DEFAULT_ENUMERATION_LIMIT).unwrap();
        let ols = conditional_groups(&s, 6, OracleEstimator::OlsZ, Conditioner::ExactDelta, DEFAULT_ENUMERATION_LIMIT).unwrap();
        assert_eq!(dm.len(), ols.len());
        for (g, h) in dm.iter().zip(&ols) {
            assert_eq!(g.delta, h.delta);
            let bd = g.delta[0] * beta[0];
            let second = g.gap.variance + g.gap.mean * g.gap.mean;
            let cmp = mse_comparison(bd, g.gap.mean, second, g.m, 12);
            let direct = g.estimator.mse > h.estimator.mse;
            let margin = (g.estimator.mse - h.estimator.mse).abs();
            if margin > 1e-9 {
                assert_eq!(cmp.dm_worse, direct, "delta={:?}", g.delta);
            }
        }
    }

    #[test]
    fn quantile_bins_ties_go_low() {
        let v = [1.0, 2.0, 2.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_bins(&v, 2), vec![0, 0, 0, 0, 1, 1]);
        let v = [5.0, 1.0, 3.0, 2.0];
        assert_eq!(quantile_bins(&v, 4), vec![3, 0, 2, 1]);
    }

    #[test]
    fn reference_group_lookup() {
        let s = continuous_sample(8, 0.9);
        let a = Assignment::from_treated(8, &[0, 3, 4, 6]).unwrap();
        let g = brute_force_conditional(&s, OracleEstimator::Dm, Conditioner::MQuantile { bins: 4 }, &a, DEFAULT_ENUMERATION_LIMIT).unwrap();
        assert!(g.bin.is_some());
        assert!((g.weight - 0.25).abs() < 0.1);
    }
}
