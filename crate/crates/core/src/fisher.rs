//! Fisher randomization tests under the sharp null, unconditional and
//! conditional on covariate imbalance.
//!
//! The conditional tests rank the observed statistic within the set of
//! assignments whose imbalance lies within `delta_bar` of the observed one.
//! That set is found by full enumeration when the assignment space is small
//! and by greedy pair-switching from random starts otherwise.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::assignment::{self, Assignment};
use crate::balance::{self, InitialSize, MahalanobisScale, Pca};
use crate::design::CenteredDesign;
use crate::rng::StreamRng;
use crate::{par, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Statistic {
    #[serde(rename = "DM")]
    Dm,
    #[serde(rename = "OLS")]
    Ols,
}

/// How assignments whose statistic equals the observed one are ranked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieRule {
    /// Every tie counts as at least as extreme.
    #[default]
    Conservative,
    /// Ties are broken by position in the (enumeration or sorted-member)
    /// order, so ranks form a permutation of `1..=H`.
    Ordered,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FisherResult {
    pub p_value: f64,
    pub rank: u64,
    pub set_size: u64,
    pub statistic: Statistic,
    /// Set when fewer members than requested were found.
    pub degraded: bool,
}

impl FisherResult {
    fn new(rank: u64, set_size: u64, statistic: Statistic, degraded: bool) -> Self {
        FisherResult {
            p_value: rank as f64 / set_size as f64,
            rank,
            set_size,
            statistic,
            degraded,
        }
    }
}

fn mask_of(a: &Assignment) -> u64 {
    a.treated().iter().fold(0u64, |m, &i| m | (1u64 << i))
}

fn assignment_of_mask(n: usize, mask: u64) -> Assignment {
    let w = (0..n).map(|i| mask >> i & 1 == 1).collect();
    Assignment::new(w).expect("mask has both arms")
}

/// Absolute test statistic evaluated with the observed outcomes held fixed,
/// which is what the sharp null licenses.
#[derive(Debug, Clone)]
pub struct StatisticEvaluator {
    kind: Statistic,
    y: Vec<f64>,
    n1: usize,
    ols: Option<OlsParts>,
}

#[derive(Debug, Clone)]
struct OlsParts {
    // rows are L^{-1} z~_i with Z~'Z~ = L L'
    units: DMatrix<f64>,
    // L^{-1} Z~' y~
    cross: DVector<f64>,
}

impl StatisticEvaluator {
    pub fn dm(y: &[f64], n1: usize) -> Self {
        StatisticEvaluator {
            kind: Statistic::Dm,
            y: y.to_vec(),
            n1,
            ols: None,
        }
    }

    pub fn ols(y: &[f64], n1: usize, design: &CenteredDesign) -> Result<Self> {
        if y.len() != design.n() {
            return Err(Error::invalid("outcome length does not match design"));
        }
        let white = Whitening::all(design, n1, MahalanobisScale::Gram)?;
        let ybar = crate::linalg::compensated_mean(y);
        let yt: Vec<f64> = y.iter().map(|v| v - ybar).collect();
        let cross = design.gram_factor().forward(&design.cross(&yt));
        Ok(StatisticEvaluator {
            kind: Statistic::Ols,
            y: y.to_vec(),
            n1,
            ols: Some(OlsParts {
                units: white.units,
                cross,
            }),
        })
    }

    pub fn kind(&self) -> Statistic {
        self.kind
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn n1(&self) -> usize {
        self.n1
    }

    /// `|statistic|` for the assignment given by a treated-unit bitmask.
    pub fn eval_mask(&self, mask: u64) -> f64 {
        let n = self.y.len();
        let (n1, n0) = (self.n1 as f64, (n - self.n1) as f64);
        let (mut s1, mut s0) = (0.0, 0.0);
        for (i, &v) in self.y.iter().enumerate() {
            if mask >> i & 1 == 1 {
                s1 += v;
            } else {
                s0 += v;
            }
        }
        let dm = s1 / n1 - s0 / n0;
        match &self.ols {
            None => dm.abs(),
            Some(parts) => {
                let p = parts.units.ncols();
                let scale = n as f64 / (n1 * n0);
                let mut wd = DVector::<f64>::zeros(p);
                for i in (0..n).filter(|&i| mask >> i & 1 == 1) {
                    for j in 0..p {
                        wd[j] += parts.units[(i, j)];
                    }
                }
                wd *= scale;
                let c = n1 * n0 / n as f64;
                let denom = 1.0 - c * wd.norm_squared();
                if denom <= 1e-10 {
                    return f64::INFINITY;
                }
                ((dm - wd.dot(&parts.cross)) / denom).abs()
            }
        }
    }

    pub fn eval(&self, a: &Assignment) -> f64 {
        self.eval_mask(mask_of(a))
    }
}

pub(crate) fn check_mask_size(n: usize) -> Result<()> {
    if n > 64 {
        return Err(Error::invalid(format!("exhaustive Fisher tests support n <= 64, got {n}")));
    }
    Ok(())
}

/// Rank of `stats[observed]` among `stats` (1 = most extreme).
pub fn rank_within(stats: &[f64], observed: usize, rule: TieRule) -> u64 {
    let s = stats[observed];
    match rule {
        TieRule::Conservative => stats.iter().filter(|&&v| v >= s).count() as u64,
        TieRule::Ordered => {
            let above = stats.iter().filter(|&&v| v > s).count();
            let tied_before = stats[..observed].iter().filter(|&&v| v == s).count();
            (1 + above + tied_before) as u64
        }
    }
}

/// Ranks of every entry of `stats` among all of them.
pub fn ranks_all(stats: &[f64], rule: TieRule) -> Vec<u64> {
    let len = stats.len();
    let mut order: Vec<usize> = (0..len).collect();
    order.sort_by(|&a, &b| stats[b].total_cmp(&stats[a]).then(a.cmp(&b)));
    let mut ranks = vec![0u64; len];
    match rule {
        TieRule::Ordered => {
            for (pos, &i) in order.iter().enumerate() {
                ranks[i] = pos as u64 + 1;
            }
        }
        TieRule::Conservative => {
            // within a run of equal values every member gets the run's last position
            let mut start = 0;
            while start < len {
                let mut end = start + 1;
                while end < len && stats[order[end]] == stats[order[start]] {
                    end += 1;
                }
                for &i in &order[start..end] {
                    ranks[i] = end as u64;
                }
                start = end;
            }
        }
    }
    ranks
}

fn enumerated_stats(eval: &StatisticEvaluator, limit: u128) -> Result<Vec<f64>> {
    check_mask_size(eval.n())?;
    assignment::map_enumerated(eval.n(), eval.n1(), limit, |_, treated| {
        eval.eval_mask(treated.iter().fold(0u64, |m, &i| m | (1u64 << i)))
    })
}

/// Classic Fisher test over all `C(n, n1)` assignments.
pub fn fisher_exact(eval: &StatisticEvaluator, a: &Assignment, rule: TieRule, limit: u128) -> Result<FisherResult> {
    if a.n() != eval.n() || a.n1() != eval.n1() {
        return Err(Error::invalid("assignment does not match the statistic's shape"));
    }
    let stats = enumerated_stats(eval, limit).map_err(|e| match e {
        Error::EnumerationGuard { count, limit } => Error::Infeasible(format!(
            "exact Fisher test needs {count} assignments (limit {limit}); use the Monte Carlo variant"
        )),
        other => other,
    })?;
    let obs = a.rank() as usize;
    let rank = rank_within(&stats, obs, rule);
    Ok(FisherResult::new(rank, stats.len() as u64, eval.kind(), false))
}

/// Exact Fisher ranks of every assignment, in enumeration order, for a fixed
/// outcome vector.
pub fn fisher_exact_all(eval: &StatisticEvaluator, rule: TieRule, limit: u128) -> Result<Vec<u64>> {
    Ok(ranks_all(&enumerated_stats(eval, limit)?, rule))
}

/// Fisher test against `draws` uniformly drawn assignments:
/// `p = (1 + #{|s_j| >= |s_obs|}) / (draws + 1)`.
pub fn fisher_monte_carlo(
    eval: &StatisticEvaluator,
    a: &Assignment,
    draws: usize,
    rng: &mut StreamRng,
) -> Result<FisherResult> {
    check_mask_size(eval.n())?;
    let obs = eval.eval(a);
    let masks: Vec<u64> = (0..draws)
        .map(|_| Assignment::random(eval.n(), eval.n1(), rng).map(|b| mask_of(&b)))
        .collect::<Result<_>>()?;
    let stats = par::map_slice(&masks, |&m| eval.eval_mask(m));
    let extreme = stats.iter().filter(|&&s| s >= obs).count() as u64;
    Ok(FisherResult::new(1 + extreme, draws as u64 + 1, eval.kind(), false))
}

/// Per-unit coordinates in which the between-assignment distance is a scaled
/// squared Euclidean distance between treated-arm sums.
#[derive(Debug, Clone)]
pub struct Whitening {
    units: DMatrix<f64>,
    n1: usize,
    factor: f64,
}

impl Whitening {
    /// All covariates, through the Cholesky factor of the Gram matrix.
    pub fn all(design: &CenteredDesign, n1: usize, scale: MahalanobisScale) -> Result<Self> {
        let n = design.n();
        let chol = design.gram_factor();
        let zt = design.z_tilde();
        let mut units = DMatrix::<f64>::zeros(n, design.k());
        for i in 0..n {
            let u = chol.forward(&zt.row(i).transpose());
            units.set_row(i, &u.transpose());
        }
        Whitening::from_units(units, n1, scale)
    }

    /// The first `p` principal components.
    pub fn components(
        design: &CenteredDesign,
        pca: &Pca,
        p: usize,
        n1: usize,
        scale: MahalanobisScale,
    ) -> Result<Self> {
        if p == 0 || p > pca.k() {
            return Err(Error::invalid(format!("cannot whiten {p} of {} components", pca.k())));
        }
        let nm1 = design.n() as f64 - 1.0;
        let scores = design.z_tilde() * pca.loadings.columns(0, p);
        let units = DMatrix::from_fn(design.n(), p, |i, j| scores[(i, j)] / (pca.variances[j] * nm1).sqrt());
        Whitening::from_units(units, n1, scale)
    }

    fn from_units(units: DMatrix<f64>, n1: usize, scale: MahalanobisScale) -> Result<Self> {
        let n = units.nrows();
        if n1 == 0 || n1 >= n {
            return Err(Error::invalid(format!("need 0 < n1 < n (n={n}, n1={n1})")));
        }
        let c = (n1 * (n - n1)) as f64 / n as f64;
        let factor = match scale {
            MahalanobisScale::SampleCovariance => c * (n as f64 - 1.0),
            MahalanobisScale::Gram => c,
        };
        Ok(Whitening { units, n1, factor })
    }

    pub fn n(&self) -> usize {
        self.units.nrows()
    }

    pub fn dim(&self) -> usize {
        self.units.ncols()
    }

    fn arm_scale(&self) -> f64 {
        let n = self.n();
        n as f64 / (self.n1 * (n - self.n1)) as f64
    }

    /// Whitened mean difference of an assignment given its treated units.
    pub fn imbalance_of(&self, treated: &[usize]) -> DVector<f64> {
        let mut d = DVector::<f64>::zeros(self.dim());
        for &i in treated {
            for j in 0..self.dim() {
                d[j] += self.units[(i, j)];
            }
        }
        d * self.arm_scale()
    }

    pub fn imbalance(&self, a: &Assignment) -> DVector<f64> {
        self.imbalance_of(&a.treated())
    }

    pub fn distance(&self, d: &DVector<f64>, reference: &DVector<f64>) -> f64 {
        self.factor * (d - reference).norm_squared()
    }
}

/// Outcome of one greedy descent.
#[derive(Debug, Clone)]
pub struct PairSwitchOutcome {
    pub assignment: Assignment,
    pub distance: f64,
    /// Distance at the start and after every accepted swap.
    pub trace: Vec<f64>,
    pub success: bool,
}

impl PairSwitchOutcome {
    pub fn iterations(&self) -> usize {
        self.trace.len() - 1
    }
}

/// Greedy pair-switching in a fixed whitened space.
#[derive(Debug, Clone)]
pub struct PairSwitchSpace {
    white: Whitening,
    gram: DMatrix<f64>,
    max_iterations: usize,
}

impl PairSwitchSpace {
    pub fn new(white: Whitening) -> Self {
        let gram = &white.units * white.units.transpose();
        let n = white.n();
        PairSwitchSpace {
            white,
            gram,
            max_iterations: n * n,
        }
    }

    pub fn whitening(&self) -> &Whitening {
        &self.white
    }

    /// From `start`, repeatedly applies the treated/control swap that most
    /// decreases the distance to `reference` (ties go to the lowest
    /// `(treated, control)` index pair). Stops once within `delta_bar` or when
    /// no swap improves.
    pub fn descend(&self, start: &Assignment, reference: &DVector<f64>, delta_bar: f64) -> PairSwitchOutcome {
        let n = self.white.n();
        let cs = self.white.arm_scale();
        let factor = self.white.factor;
        let mut current = start.clone();
        let mut gap = self.white.imbalance(&current) - reference;
        let mut dist = factor * gap.norm_squared();
        let mut trace = vec![dist];
        let mut proj = vec![0.0; n];
        for _ in 0..self.max_iterations {
            if dist <= delta_bar {
                break;
            }
            for (i, p) in proj.iter_mut().enumerate() {
                *p = (0..self.white.dim()).map(|j| gap[j] * self.white.units[(i, j)]).sum();
            }
            let treated = current.treated();
            let controls = current.controls();
            let mut best: Option<(f64, usize, usize)> = None;
            for &i in &treated {
                for &j in &controls {
                    let step = self.gram[(j, j)] + self.gram[(i, i)] - 2.0 * self.gram[(i, j)];
                    let change = 2.0 * cs * (proj[j] - proj[i]) + cs * cs * step;
                    if best.is_none_or(|(b, _, _)| change < b) {
                        best = Some((change, i, j));
                    }
                }
            }
            let Some((change, i, j)) = best else { break };
            if !(change < -1e-12 * gap.norm_squared()) {
                break;
            }
            let mut next = current.clone();
            next.swap_pair(i, j);
            let next_gap = self.white.imbalance(&next) - reference;
            let next_dist = factor * next_gap.norm_squared();
            if !(next_dist < dist) {
                break;
            }
            current = next;
            gap = next_gap;
            dist = next_dist;
            trace.push(dist);
        }
        PairSwitchOutcome {
            success: dist <= delta_bar,
            assignment: current,
            distance: dist,
            trace,
        }
    }
}

/// Greedy search toward `reference`'s imbalance on all covariates.
pub fn greedy_pair_switch(
    design: &CenteredDesign,
    start: &Assignment,
    reference: &Assignment,
    delta_bar: f64,
) -> Result<PairSwitchOutcome> {
    design.check_assignment(start)?;
    start.check_compatible(reference)?;
    let space = PairSwitchSpace::new(Whitening::all(design, start.n1(), MahalanobisScale::SampleCovariance)?);
    let target = space.whitening().imbalance(reference);
    Ok(space.descend(start, &target, delta_bar))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Construction {
    Exhaustive,
    PairSwitch,
}

/// Assignments whose imbalance lies within `delta_bar` of the reference's.
#[derive(Debug, Clone)]
pub struct ConditioningSet {
    pub reference: Assignment,
    /// Sorted by enumeration rank.
    pub members: Vec<Assignment>,
    pub delta_bar: f64,
    pub construction: Construction,
}

impl ConditioningSet {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Re-checks the distance bound of every member on all covariates.
    pub fn verify(&self, design: &CenteredDesign, scale: MahalanobisScale) -> Result<bool> {
        if !self.members.contains(&self.reference) {
            return Ok(false);
        }
        for m in &self.members {
            let d = balance::mahalanobis_between(design, m, &self.reference, scale)?;
            if d > self.delta_bar * (1.0 + 1e-9) + 1e-12 {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

/// Every assignment with its whitened imbalance, sorted by the first
/// whitened coordinate so a distance ball can be cut out by bisection.
#[derive(Debug, Clone)]
pub struct ExhaustiveTable {
    white: Whitening,
    masks: Vec<u64>,
    ranks: Vec<u32>,
    coords: Vec<f64>,
}

impl ExhaustiveTable {
    pub fn new(white: Whitening, limit: u128) -> Result<Self> {
        let (n, n1, p) = (white.n(), white.n1, white.dim());
        check_mask_size(n)?;
        let rows = assignment::map_enumerated(n, n1, limit, |rank, treated| {
            let mask = treated.iter().fold(0u64, |m, &i| m | (1u64 << i));
            (mask, rank as u32, white.imbalance_of(treated))
        })?;
        let mut order: Vec<usize> = (0..rows.len()).collect();
        order.sort_by(|&a, &b| rows[a].2[0].total_cmp(&rows[b].2[0]).then(a.cmp(&b)));
        let mut masks = Vec::with_capacity(rows.len());
        let mut ranks = Vec::with_capacity(rows.len());
        let mut coords = Vec::with_capacity(rows.len() * p);
        for &i in &order {
            masks.push(rows[i].0);
            ranks.push(rows[i].1);
            coords.extend(rows[i].2.iter());
        }
        Ok(ExhaustiveTable {
            white,
            masks,
            ranks,
            coords,
        })
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn whitening(&self) -> &Whitening {
        &self.white
    }

    pub fn mask(&self, idx: usize) -> u64 {
        self.masks[idx]
    }

    pub fn rank(&self, idx: usize) -> u64 {
        self.ranks[idx] as u64
    }

    /// Table positions within `delta_bar` of `reference`, ordered by
    /// enumeration rank.
    pub fn within(&self, reference: &DVector<f64>, delta_bar: f64) -> Vec<usize> {
        let p = self.white.dim();
        let factor = self.white.factor;
        let half = (delta_bar / factor).sqrt() * (1.0 + 1e-12) + 1e-15;
        let lo = reference[0] - half;
        let hi = reference[0] + half;
        let first = self.coords.chunks_exact(p).collect::<Vec<_>>();
        let start = first.partition_point(|c| c[0] < lo);
        let end = first.partition_point(|c| c[0] <= hi);
        let mut out: Vec<usize> = (start..end)
            .filter(|&i| {
                let c = first[i];
                let d2: f64 = (0..p).map(|j| (c[j] - reference[j]).powi(2)).sum();
                factor * d2 <= delta_bar
            })
            .collect();
        out.sort_by_key(|&i| self.ranks[i]);
        out
    }
}

/// Full enumeration of the conditioning set on all covariates.
pub fn conditioning_set_exhaustive(
    design: &CenteredDesign,
    a: &Assignment,
    delta_bar: f64,
    scale: MahalanobisScale,
    limit: u128,
) -> Result<ConditioningSet> {
    design.check_assignment(a)?;
    let white = Whitening::all(design, a.n1(), scale)?;
    let table = ExhaustiveTable::new(white, limit).map_err(|e| match e {
        Error::EnumerationGuard { count, limit } => Error::Infeasible(format!(
            "exhaustive search needs {count} assignments (limit {limit}); use pair-switch sampling"
        )),
        other => other,
    })?;
    let reference = table.whitening().imbalance(a);
    let members = table
        .within(&reference, delta_bar)
        .into_iter()
        .map(|i| assignment_of_mask(a.n(), table.mask(i)))
        .collect();
    Ok(ConditioningSet {
        reference: a.clone(),
        members,
        delta_bar,
        construction: Construction::Exhaustive,
    })
}

/// Rank of the reference's statistic among the members of a set (members in
/// their stored order).
fn rank_members(eval: &StatisticEvaluator, members: &[u64], reference: usize, rule: TieRule) -> u64 {
    let stats: Vec<f64> = members.iter().map(|&m| eval.eval_mask(m)).collect();
    rank_within(&stats, reference, rule)
}

/// Conditional Fisher test over an exhaustive table, optionally reusing
/// statistics precomputed in table order (valid when the outcome vector does
/// not depend on the reference).
pub fn fisher_in_table(
    eval: &StatisticEvaluator,
    table: &ExhaustiveTable,
    a: &Assignment,
    delta_bar: f64,
    h: usize,
    rule: TieRule,
    table_stats: Option<&[f64]>,
) -> Result<FisherResult> {
    let reference = table.whitening().imbalance(a);
    let members = table.within(&reference, delta_bar);
    let ref_rank = a.rank() as u64;
    let obs = members
        .iter()
        .position(|&i| table.rank(i) == ref_rank)
        .ok_or_else(|| Error::invalid("reference assignment missing from its own conditioning set"))?;
    let rank = match table_stats {
        Some(stats) => {
            let s: Vec<f64> = members.iter().map(|&i| stats[i]).collect();
            rank_within(&s, obs, rule)
        }
        None => {
            let masks: Vec<u64> = members.iter().map(|&i| table.mask(i)).collect();
            rank_members(eval, &masks, obs, rule)
        }
    };
    Ok(FisherResult::new(rank, members.len() as u64, eval.kind(), members.len() < h))
}

/// Runs up to `n_s` descents from uniform random starts and counts the
/// successes, stopping as soon as `n_f` have succeeded.
fn probe(
    space: &PairSwitchSpace,
    reference: &DVector<f64>,
    n1: usize,
    delta_bar: f64,
    n_s: usize,
    n_f: usize,
    rng: &mut StreamRng,
) -> Result<usize> {
    const BATCH: usize = 32;
    let n = space.whitening().n();
    let mut done = 0;
    let mut successes = 0;
    while done < n_s && successes < n_f {
        let take = BATCH.min(n_s - done);
        let starts: Vec<Assignment> = (0..take)
            .map(|_| Assignment::random(n, n1, rng))
            .collect::<Result<_>>()?;
        let outcomes = par::map_slice(&starts, |s| space.descend(s, reference, delta_bar).success);
        for ok in outcomes {
            successes += ok as usize;
            if successes >= n_f {
                break;
            }
        }
        done += take;
    }
    Ok(successes)
}

/// Largest `p <= p_start` for which at least `n_f` of `n_s` greedy descents on
/// the first `p` principal components reach `delta_bar`; 0 if none does.
#[allow(clippy::too_many_arguments)]
pub fn select_components_fisher(
    design: &CenteredDesign,
    pca: &Pca,
    a: &Assignment,
    delta_bar: f64,
    n_s: usize,
    n_f: usize,
    p_start: usize,
    scale: MahalanobisScale,
    rng: &mut StreamRng,
) -> Result<usize> {
    if n_f > n_s {
        return Err(Error::invalid(format!("n_f ({n_f}) must not exceed n_s ({n_s})")));
    }
    let mut p = p_start.min(pca.k());
    while p > 0 {
        let space = PairSwitchSpace::new(Whitening::components(design, pca, p, a.n1(), scale)?);
        let target = space.whitening().imbalance(a);
        if probe(&space, &target, a.n1(), delta_bar, n_s, n_f, rng)? >= n_f {
            return Ok(p);
        }
        p -= 1;
    }
    Ok(0)
}

/// Which covariate directions the approximate test conditions on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentRule {
    /// Every covariate.
    All,
    /// The leading principal components picked by the set-size rule, then
    /// reduced until pair-switching succeeds often enough.
    Selected,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApproxFisherConfig {
    pub delta_bar: f64,
    pub h: usize,
    pub n_s: usize,
    pub n_f: usize,
    pub components: ComponentRule,
    pub initial_size: InitialSize,
    pub tie_rule: TieRule,
    pub scale: MahalanobisScale,
    /// Largest assignment space searched exhaustively.
    pub exhaustive_limit: u128,
    /// Descents allowed per requested member.
    pub budget_factor: usize,
    /// Draws for the unconditional Monte Carlo fallback.
    pub fallback_draws: usize,
}

impl Default for ApproxFisherConfig {
    fn default() -> Self {
        ApproxFisherConfig {
            delta_bar: 0.01,
            h: 100,
            n_s: 1000,
            n_f: 20,
            components: ComponentRule::Selected,
            initial_size: InitialSize::Full,
            tie_rule: TieRule::Conservative,
            scale: MahalanobisScale::SampleCovariance,
            exhaustive_limit: 1_000_000,
            budget_factor: 50,
            fallback_draws: 1000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApproxProvenance {
    Exhaustive,
    PairSwitch,
    /// No component could be conditioned on; unconditional exact test.
    ExactFallback,
    /// As above with Monte Carlo draws.
    MonteCarloFallback,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApproxFisherOutcome {
    pub result: FisherResult,
    /// Number of conditioning directions actually used.
    pub components: usize,
    pub provenance: ApproxProvenance,
}

/// Samples a conditioning set by greedy descents until `h` distinct members
/// (reference included) are found or the budget runs out.
pub fn sample_conditioning_set(
    space: &PairSwitchSpace,
    a: &Assignment,
    delta_bar: f64,
    h: usize,
    budget: usize,
    rng: &mut StreamRng,
) -> Result<ConditioningSet> {
    const BATCH: usize = 32;
    let n = a.n();
    let target = space.whitening().imbalance(a);
    let mut found: BTreeMap<u128, Assignment> = BTreeMap::new();
    found.insert(a.rank(), a.clone());
    let mut spent = 0;
    while found.len() < h && spent < budget {
        let take = BATCH.min(budget - spent);
        let starts: Vec<Assignment> = (0..take)
            .map(|_| Assignment::random(n, a.n1(), rng))
            .collect::<Result<_>>()?;
        let outcomes = par::map_slice(&starts, |s| space.descend(s, &target, delta_bar));
        for o in outcomes {
            if o.success {
                found.entry(o.assignment.rank()).or_insert(o.assignment);
                if found.len() >= h {
                    break;
                }
            }
        }
        spent += take;
    }
    Ok(ConditioningSet {
        reference: a.clone(),
        members: found.into_values().collect(),
        delta_bar,
        construction: Construction::PairSwitch,
    })
}

/// Rank of the reference within an explicit conditioning set.
pub fn fisher_in_set(eval: &StatisticEvaluator, set: &ConditioningSet, h: usize, rule: TieRule) -> Result<FisherResult> {
    let obs = set
        .members
        .iter()
        .position(|m| m == &set.reference)
        .ok_or_else(|| Error::invalid("reference assignment missing from its conditioning set"))?;
    let stats: Vec<f64> = set.members.iter().map(|m| eval.eval(m)).collect();
    let rank = rank_within(&stats, obs, rule);
    Ok(FisherResult::new(rank, set.len() as u64, eval.kind(), set.len() < h))
}

/// Approximate conditional Fisher test of the sharp null.
pub fn approximate_fisher(
    eval: &StatisticEvaluator,
    design: &CenteredDesign,
    a: &Assignment,
    config: &ApproxFisherConfig,
    rng: &mut StreamRng,
) -> Result<ApproxFisherOutcome> {
    design.check_assignment(a)?;
    if !(config.delta_bar > 0.0) || config.h < 1 || config.n_f > config.n_s {
        return Err(Error::invalid("approximate Fisher needs delta_bar > 0, h >= 1 and n_f <= n_s"));
    }
    let (n, n1) = (a.n(), a.n1());
    let count = assignment::binomial(n, n1).unwrap_or(u128::MAX);
    let exhaustive = count <= config.exhaustive_limit && n <= 64;

    let white = match config.components {
        ComponentRule::All => Whitening::all(design, n1, config.scale)?,
        ComponentRule::Selected => {
            let pca = balance::pca(design)?;
            let sel = balance::select_components_with(
                &pca,
                design,
                a,
                config.delta_bar,
                config.h,
                config.initial_size.value(n, n1),
            )?;
            let p = if exhaustive || sel.selected_p == 0 {
                sel.selected_p
            } else {
                select_components_fisher(
                    design,
                    &pca,
                    a,
                    config.delta_bar,
                    config.n_s,
                    config.n_f,
                    sel.selected_p,
                    config.scale,
                    rng,
                )?
            };
            if p == 0 {
                let (result, provenance) = if exhaustive {
                    let r = fisher_exact(eval, a, config.tie_rule, config.exhaustive_limit)?;
                    (r, ApproxProvenance::ExactFallback)
                } else {
                    let r = fisher_monte_carlo(eval, a, config.fallback_draws, rng)?;
                    (r, ApproxProvenance::MonteCarloFallback)
                };
                return Ok(ApproxFisherOutcome {
                    result,
                    components: 0,
                    provenance,
                });
            }
            Whitening::components(design, &pca, p, n1, config.scale)?
        }
    };
    let components = white.dim();
    if exhaustive {
        let table = ExhaustiveTable::new(white, config.exhaustive_limit)?;
        let result = fisher_in_table(eval, &table, a, config.delta_bar, config.h, config.tie_rule, None)?;
        return Ok(ApproxFisherOutcome {
            result,
            components,
            provenance: ApproxProvenance::Exhaustive,
        });
    }
    let space = PairSwitchSpace::new(white);
    let budget = config.budget_factor * config.h;
    let set = sample_conditioning_set(&space, a, config.delta_bar, config.h, budget, rng)?;
    Ok(ApproxFisherOutcome {
        result: fisher_in_set(eval, &set, config.h, config.tie_rule)?,
        components,
        provenance: ApproxProvenance::PairSwitch,
    })
}
