//! Single covariate, every assignment enumerated, aggregates per percentile
//! of the covariate imbalance.

use std::sync::OnceLock;

use rand::seq::index;

use super::{
    dgp_heterogeneous, dgp_homogeneous, t_critical, t_rejects, DgpKind, EstimatorCells, NullHypothesis, Obs,
    RecordRow, Reducer, SampleResult, SimConfig, SimEstimator, SimOutput, Skipped,
};
use crate::assignment::{self, unrank_subset, Assignment, DEFAULT_ENUMERATION_LIMIT};
use crate::balance::{self, MahalanobisScale};
use crate::design::{HeterogeneousProjection, Sample};
use crate::estimators::t_test;
use crate::fisher::{self, ExhaustiveTable, FisherResult, StatisticEvaluator, Whitening};
use crate::oracle::quantile_bins;
use crate::rng::{derive, stream, Purpose};
use crate::{par, Result};

/// Both estimators for one assignment, from per-arm running sums.
#[derive(Debug, Clone, Copy)]
pub(crate) struct SingleEval {
    pub delta: f64,
    pub m: f64,
    pub dm: f64,
    pub dm_se: f64,
    pub ols: f64,
    pub ols_se: f64,
}

/// Precomputed totals for a single centered covariate.
#[derive(Debug, Clone)]
pub(crate) struct SingleCovariate {
    y0: Vec<f64>,
    y1: Vec<f64>,
    z: Vec<f64>,
    gram: f64,
    sum_y0: f64,
    sq_y0: f64,
    zy0: f64,
    n1: usize,
}

impl SingleCovariate {
    pub fn new(sample: &Sample, n1: usize) -> Self {
        let zc = sample.z().column(0);
        let mean = crate::linalg::compensated_mean(zc.as_slice());
        let z: Vec<f64> = zc.iter().map(|v| v - mean).collect();
        let y0 = sample.y0().to_vec();
        SingleCovariate {
            gram: z.iter().map(|v| v * v).sum(),
            sum_y0: y0.iter().sum(),
            sq_y0: y0.iter().map(|v| v * v).sum(),
            zy0: z.iter().zip(&y0).map(|(a, b)| a * b).sum(),
            y1: sample.y1().to_vec(),
            y0,
            z,
            n1,
        }
    }

    pub fn eval(&self, treated: &[usize]) -> SingleEval {
        let n = self.z.len() as f64;
        let n1 = self.n1 as f64;
        let n0 = n - n1;
        let (mut s1, mut q1, mut t0, mut tq0, mut zt, mut zy1, mut zy0) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        for &i in treated {
            let (a, b, z) = (self.y1[i], self.y0[i], self.z[i]);
            s1 += a;
            q1 += a * a;
            t0 += b;
            tq0 += b * b;
            zt += z;
            zy1 += z * a;
            zy0 += z * b;
        }
        let s0 = self.sum_y0 - t0;
        let q0 = self.sq_y0 - tq0;
        let dm = s1 / n1 - s0 / n0;
        let v1 = ((q1 - s1 * s1 / n1) / (n1 - 1.0)).max(0.0);
        let v0 = ((q0 - s0 * s0 / n0) / (n0 - 1.0)).max(0.0);
        let dm_se = (v1 / n1 + v0 / n0).sqrt();

        let delta = zt * n / (n0 * n1);
        let zty = zy1 + self.zy0 - zy0;
        let b = zty / self.gram;
        let c = n0 * n1 / n;
        let cq = c * delta * delta / self.gram;
        let denom = c * (1.0 - cq);
        let numer = c * (dm - delta * b);
        let ols = numer / denom;
        let yty = q1 + q0 - (s1 + s0) * (s1 + s0) / n;
        let rss = (yty - zty * b - numer * numer / denom).max(0.0);
        let ols_se = (rss / (n - 3.0) / denom).sqrt();
        SingleEval {
            delta,
            m: (n - 1.0) * cq,
            dm,
            dm_se,
            ols,
            ols_se,
        }
    }
}

pub(crate) fn draw_sample(config: &SimConfig, k: usize, sample_seed: u64) -> Result<Sample> {
    match config.dgp {
        DgpKind::Homogeneous => dgp_homogeneous(config.n, k, config.correlated, config.effect, sample_seed),
        DgpKind::Heterogeneous => dgp_heterogeneous(config.n, k, config.effect, config.correlated, sample_seed),
    }
}

pub(crate) fn null_value(config: &SimConfig, sample: &Sample) -> f64 {
    match config.null {
        NullHypothesis::SampleAte => sample.tau(),
        NullHypothesis::Zero => 0.0,
    }
}

const SUPPORTED: [SimEstimator; 5] = [
    SimEstimator::Dm,
    SimEstimator::OlsZ,
    SimEstimator::FisherExact,
    SimEstimator::FisherReg,
    SimEstimator::FisherApprox,
];

pub fn run_illustration(config: &SimConfig) -> Result<SimOutput> {
    config.validate()?;
    let (n, n1) = (config.n, config.n1);
    assignment::guarded_count(n, n1, DEFAULT_ENUMERATION_LIMIT)?;
    let mut estimators = Vec::new();
    let mut skipped = Vec::new();
    for e in config.estimator_set() {
        if SUPPORTED.contains(&e) {
            estimators.push(e);
        } else {
            skipped.push(Skipped {
                k: 1,
                estimator: e,
                reason: format!("{e} is not evaluated in illustration mode"),
            });
        }
    }
    if estimators.iter().any(|e| e.is_fisher()) {
        fisher::check_mask_size(n)?;
    }
    let results = par::map_range(config.replications, |s| illustration_sample(config, &estimators, s));
    let mut reducer = Reducer::new(1, config.bins(), true, &estimators);
    let mut rows = Vec::new();
    for r in results {
        reducer.add(r?, &mut rows);
    }
    let mut summaries = Vec::new();
    let mut slopes = Vec::new();
    reducer.finish(&mut summaries, &mut slopes);
    Ok(SimOutput {
        config: config.clone(),
        rows,
        summaries,
        skipped,
        slopes,
    })
}

fn row(s: usize, e: SimEstimator, rank: usize, estimate: f64, p: f64, m: f64, bin: usize, sel: Option<usize>) -> RecordRow {
    RecordRow {
        sample_id: s,
        k: 1,
        estimator: e,
        assignment: rank as u64,
        estimate,
        p,
        m,
        bin,
        selected_p: sel,
    }
}

fn illustration_sample(config: &SimConfig, estimators: &[SimEstimator], s: usize) -> Result<SampleResult> {
    let (n, n1) = (config.n, config.n1);
    let limit = DEFAULT_ENUMERATION_LIMIT;
    let seed = derive(config.seed, &[1, s as u64]);
    let sample = draw_sample(config, 1, seed)?;
    let design = sample.design()?;
    let tau = sample.tau();
    let null = null_value(config, &sample);
    let slope = HeterogeneousProjection::fit(&sample, &design)?.zeta(n - n1, n1)[0];

    let fast = SingleCovariate::new(&sample, n1);
    let evals = assignment::map_enumerated(n, n1, limit, |_, t| fast.eval(t))?;
    let n_a = evals.len();
    let bins_n = config.bins();
    let deltas: Vec<f64> = evals.iter().map(|e| e.delta).collect();
    let bins = quantile_bins(&deltas, bins_n);

    let mut refs = index::sample(
        &mut stream(seed, &[Purpose::Reference as u64]),
        n_a,
        config.reference_assignments.min(n_a),
    )
    .into_vec();
    refs.sort_unstable();

    let mut cells = Vec::new();
    let mut rows = Vec::new();
    let obs = |e: f64, rejected: bool, ev: &SingleEval, sel: Option<usize>| Obs {
        estimate: e,
        rejected,
        delta: ev.delta,
        m: ev.m,
        selected_p: sel,
    };

    let crit_dm = t_critical(config.alpha, n - 2)?;
    let crit_ols = t_critical(config.alpha, n - 3)?;
    for &e in estimators.iter().filter(|e| !e.is_fisher()) {
        let (crit, dof) = if e == SimEstimator::Dm { (crit_dm, n - 2) } else { (crit_ols, n - 3) };
        let pick = |ev: &SingleEval| if e == SimEstimator::Dm { (ev.dm, ev.dm_se) } else { (ev.ols, ev.ols_se) };
        let o: Vec<(usize, Obs)> = evals
            .iter()
            .zip(&bins)
            .map(|(ev, &b)| {
                let (est, se) = pick(ev);
                (b, obs(est, t_rejects(est, se, null, crit), ev, None))
            })
            .collect();
        cells.push(EstimatorCells::from_sample(e, &o, bins_n, tau));
        if config.emit_rows {
            for &r in &refs {
                let ev = &evals[r];
                let (est, se) = pick(ev);
                rows.push(row(s, e, r, est, t_test(est, se, dof, null)?, ev.m, bins[r], None));
            }
        }
    }

    let fisher_set: Vec<SimEstimator> = estimators.iter().copied().filter(|e| e.is_fisher()).collect();
    if !fisher_set.is_empty() {
        let shared = sample.y0() == sample.y1();
        let ctx = FisherContext::new(config, &sample, &design, shared)?;
        for &e in &fisher_set {
            let mut o = Vec::with_capacity(refs.len());
            for &r in &refs {
                let ev = &evals[r];
                let a = Assignment::from_treated(n, &unrank_subset(n, n1, r as u128))?;
                let (res, sel) = ctx.test(e, &a, r)?;
                let est = if e == SimEstimator::FisherReg { ev.ols } else { ev.dm };
                o.push((bins[r], obs(est, res.p_value <= config.alpha, ev, sel)));
                if config.emit_rows {
                    rows.push(row(s, e, r, est, res.p_value, ev.m, bins[r], sel));
                }
            }
            cells.push(EstimatorCells::from_sample(e, &o, bins_n, tau));
        }
    }
    rows.sort_by_key(|r| (r.assignment, r.estimator));
    Ok(SampleResult {
        cells,
        rows,
        slope: vec![slope],
    })
}

/// Lazily built enumeration-based machinery shared by the references of one
/// sample.
struct FisherContext<'a> {
    config: &'a SimConfig,
    sample: &'a Sample,
    design: &'a crate::design::CenteredDesign,
    shared: bool,
    exact_dm: OnceLock<Result<Vec<u64>>>,
    exact_ols: OnceLock<Result<Vec<u64>>>,
    table_all: OnceLock<Result<(ExhaustiveTable, Vec<f64>)>>,
    table_pc: OnceLock<Result<(ExhaustiveTable, Vec<f64>)>>,
    pca: OnceLock<Result<balance::Pca>>,
}

impl<'a> FisherContext<'a> {
    fn new(
        config: &'a SimConfig,
        sample: &'a Sample,
        design: &'a crate::design::CenteredDesign,
        shared: bool,
    ) -> Result<Self> {
        Ok(FisherContext {
            config,
            sample,
            design,
            shared,
            exact_dm: OnceLock::new(),
            exact_ols: OnceLock::new(),
            table_all: OnceLock::new(),
            table_pc: OnceLock::new(),
            pca: OnceLock::new(),
        })
    }

    fn n_a(&self) -> u64 {
        assignment::binomial(self.config.n, self.config.n1).expect("guarded") as u64
    }

    fn shared_eval(&self, ols: bool) -> Result<StatisticEvaluator> {
        let y = self.sample.y0();
        if ols {
            StatisticEvaluator::ols(y, self.config.n1, self.design)
        } else {
            Ok(StatisticEvaluator::dm(y, self.config.n1))
        }
    }

    fn eval_for(&self, a: &Assignment, ols: bool) -> Result<StatisticEvaluator> {
        let y = self.sample.observed(a);
        if ols {
            StatisticEvaluator::ols(&y, self.config.n1, self.design)
        } else {
            Ok(StatisticEvaluator::dm(&y, self.config.n1))
        }
    }

    fn exact(&self, a: &Assignment, rank: usize, ols: bool) -> Result<FisherResult> {
        let rule = self.config.tie_rule;
        if !self.shared {
            return fisher::fisher_exact(&self.eval_for(a, ols)?, a, rule, DEFAULT_ENUMERATION_LIMIT);
        }
        let cache = if ols { &self.exact_ols } else { &self.exact_dm };
        let ranks = cache
            .get_or_init(|| fisher::fisher_exact_all(&self.shared_eval(ols)?, rule, DEFAULT_ENUMERATION_LIMIT))
            .as_ref()
            .map_err(clone_err)?;
        let kind = if ols { fisher::Statistic::Ols } else { fisher::Statistic::Dm };
        Ok(FisherResult {
            p_value: ranks[rank] as f64 / self.n_a() as f64,
            rank: ranks[rank],
            set_size: self.n_a(),
            statistic: kind,
            degraded: false,
        })
    }

    fn table(&self, components: bool) -> Result<&(ExhaustiveTable, Vec<f64>)> {
        let cell = if components { &self.table_pc } else { &self.table_all };
        cell.get_or_init(|| {
            let scale = MahalanobisScale::SampleCovariance;
            let white = if components {
                Whitening::components(self.design, self.pca()?, 1, self.config.n1, scale)?
            } else {
                Whitening::all(self.design, self.config.n1, scale)?
            };
            let table = ExhaustiveTable::new(white, DEFAULT_ENUMERATION_LIMIT)?;
            let stats = if self.shared {
                let eval = self.shared_eval(false)?;
                par::map_range(table.len(), |i| eval.eval_mask(table.mask(i)))
            } else {
                Vec::new()
            };
            Ok((table, stats))
        })
        .as_ref()
        .map_err(clone_err)
    }

    fn pca(&self) -> Result<&balance::Pca> {
        self.pca
            .get_or_init(|| balance::pca(self.design))
            .as_ref()
            .map_err(clone_err)
    }

    fn approx(&self, a: &Assignment, rank: usize) -> Result<(FisherResult, Option<usize>)> {
        let cfg = self.config;
        let components = match cfg.fisher_components {
            fisher::ComponentRule::All => false,
            fisher::ComponentRule::Selected => {
                let initial = cfg.initial_n_mode.value(cfg.n, cfg.n1);
                let sel = balance::select_components_with(self.pca()?, self.design, a, cfg.delta_bar, cfg.h, initial)?;
                if sel.selected_p == 0 {
                    return Ok((self.exact(a, rank, false)?, Some(0)));
                }
                true
            }
        };
        let (table, stats) = self.table(components)?;
        let eval = if self.shared { self.shared_eval(false)? } else { self.eval_for(a, false)? };
        let stats = self.shared.then_some(stats.as_slice());
        let res = fisher::fisher_in_table(&eval, table, a, cfg.delta_bar, cfg.h, cfg.tie_rule, stats)?;
        Ok((res, Some(1)))
    }

    fn test(&self, e: SimEstimator, a: &Assignment, rank: usize) -> Result<(FisherResult, Option<usize>)> {
        match e {
            SimEstimator::FisherExact => Ok((self.exact(a, rank, false)?, None)),
            SimEstimator::FisherReg => Ok((self.exact(a, rank, true)?, None)),
            _ => self.approx(a, rank),
        }
    }
}

fn clone_err(e: &crate::Error) -> crate::Error {
    match e {
        crate::Error::EnumerationGuard { count, limit } => crate::Error::EnumerationGuard {
            count: *count,
            limit: *limit,
        },
        other => crate::Error::Infeasible(other.to_string()),
    }
}
