//! Uniformly drawn assignments per sample across a grid of covariate counts,
//! aggregated per quintile of the Mahalanobis imbalance.

use std::sync::OnceLock;

use super::illustration::{draw_sample, null_value};
use super::{
    DgpKind, EstimatorCells, Obs, RecordRow, Reducer, SampleResult, SimConfig, SimEstimator, SimOutput, Skipped,
};
use crate::assignment::{self, Assignment};
use crate::balance::{self, MahalanobisScale};
use crate::design::{CenteredDesign, HeterogeneousProjection, Sample};
use crate::estimators::{diff_in_means, ols_adjusted, ols_interacted, InteractedDesign, TestOptions, TestResult};
use crate::fisher::{self, ApproxFisherConfig, FisherResult, StatisticEvaluator};
use crate::oracle::quantile_bins;
use crate::rng::{derive, stream, Purpose};
use crate::simulation::AssignmentCount;
use crate::{par, Error, Result};

/// Assignment spaces up to this size are enumerated by the Fisher tests.
const EXHAUSTIVE_LIMIT: u128 = 1_000_000;

fn infeasibility(config: &SimConfig, k: usize, e: SimEstimator) -> Option<String> {
    let n = config.n;
    match e {
        SimEstimator::OlsZ | SimEstimator::FisherReg if n <= k + 2 => {
            Some(format!("{e} needs n > K + 2 (n={n}, K={k})"))
        }
        SimEstimator::OlsX if n <= 2 * k + 2 => Some(format!("{e} needs n > 2K + 2 (n={n}, K={k})")),
        _ => None,
    }
}

pub(crate) fn approx_config(config: &SimConfig) -> ApproxFisherConfig {
    ApproxFisherConfig {
        delta_bar: config.delta_bar,
        h: config.h,
        n_s: config.n_s,
        n_f: config.n_f,
        components: config.fisher_components,
        initial_size: config.initial_n_mode,
        tie_rule: config.tie_rule,
        scale: MahalanobisScale::SampleCovariance,
        exhaustive_limit: EXHAUSTIVE_LIMIT,
        fallback_draws: config.fisher_mc_draws,
        ..ApproxFisherConfig::default()
    }
}

pub fn run_grid(config: &SimConfig) -> Result<SimOutput> {
    config.validate()?;
    if config.estimator_set().iter().any(|e| e.is_fisher()) {
        fisher::check_mask_size(config.n)?;
    }
    let mut summaries = Vec::new();
    let mut slopes = Vec::new();
    let mut skipped = Vec::new();
    let mut rows = Vec::new();
    for &k in &config.k_grid {
        let mut estimators = Vec::new();
        for e in config.estimator_set() {
            match infeasibility(config, k, e) {
                Some(reason) => skipped.push(Skipped { k, estimator: e, reason }),
                None => estimators.push(e),
            }
        }
        let results = par::map_range(config.replications, |s| grid_sample(config, k, &estimators, s));
        let mut reducer = Reducer::new(k, config.bins(), k == 1, &estimators);
        for r in results {
            reducer.add(r?, &mut rows);
        }
        reducer.finish(&mut summaries, &mut slopes);
    }
    Ok(SimOutput {
        config: config.clone(),
        rows,
        summaries,
        skipped,
        slopes,
    })
}

/// Sample-level state shared by every drawn assignment.
struct SampleState<'a> {
    config: &'a SimConfig,
    sample: Sample,
    design: CenteredDesign,
    pca: Option<balance::Pca>,
    score_designs: Vec<CenteredDesign>,
    null: f64,
    shared_outcome: bool,
    exact_ranks: [OnceLock<Result<Vec<u64>>>; 2],
}

struct Eval {
    estimate: f64,
    p: f64,
    selected_p: Option<usize>,
}

impl Eval {
    fn from_test(r: TestResult, selected_p: Option<usize>) -> Self {
        Eval {
            estimate: r.estimate,
            p: r.p_value,
            selected_p,
        }
    }
}

impl SampleState<'_> {
    fn opts(&self) -> TestOptions {
        TestOptions::with_null(self.null)
    }

    fn heterogeneous(&self) -> bool {
        self.config.dgp == DgpKind::Heterogeneous
    }

    fn point(&self, e: SimEstimator, a: &Assignment, y: &[f64]) -> Result<Eval> {
        let opts = self.opts();
        Ok(match e {
            SimEstimator::Dm => Eval::from_test(diff_in_means(y, a, &opts)?, None),
            SimEstimator::OlsZ => Eval::from_test(ols_adjusted(y, a, &self.design, &opts)?, None),
            SimEstimator::OlsX => {
                let xd = InteractedDesign::new(&self.design, a)?;
                Eval::from_test(ols_interacted(y, a, &xd, &opts)?, None)
            }
            SimEstimator::PcaP => self.pca_estimate(a, y)?,
            _ => unreachable!("Fisher tests are evaluated separately"),
        })
    }

    fn pca_estimate(&self, a: &Assignment, y: &[f64]) -> Result<Eval> {
        let cfg = self.config;
        let pca = self.pca.as_ref().expect("decomposition computed for PCA_P");
        let initial = cfg.initial_n_mode.value(cfg.n, cfg.n1);
        let sel = balance::select_components_with(pca, &self.design, a, cfg.delta_bar, cfg.h, initial)?;
        let n = cfg.n;
        let cap = if self.heterogeneous() { (n - 3) / 2 } else { n - 3 };
        let p = sel.selected_p.min(cap);
        let opts = self.opts();
        let r = if p == 0 {
            diff_in_means(y, a, &opts)?
        } else if self.heterogeneous() {
            let xd = InteractedDesign::new(&self.score_designs[p - 1], a)?;
            ols_interacted(y, a, &xd, &opts)?
        } else {
            ols_adjusted(y, a, &self.score_designs[p - 1], &opts)?
        };
        Ok(Eval::from_test(r, Some(p)))
    }

    fn evaluator(&self, y: &[f64], ols: bool) -> Result<StatisticEvaluator> {
        if ols {
            StatisticEvaluator::ols(y, self.config.n1, &self.design)
        } else {
            Ok(StatisticEvaluator::dm(y, self.config.n1))
        }
    }

    fn exact_or_mc(&self, a: &Assignment, y: &[f64], ols: bool, path: &[u64]) -> Result<FisherResult> {
        let cfg = self.config;
        let count = assignment::binomial(cfg.n, cfg.n1).unwrap_or(u128::MAX);
        if count > EXHAUSTIVE_LIMIT {
            let mut rng = stream(derive(cfg.seed, path), &[Purpose::FisherDraws as u64]);
            return fisher::fisher_monte_carlo(&self.evaluator(y, ols)?, a, cfg.fisher_mc_draws, &mut rng);
        }
        if !self.shared_outcome {
            return fisher::fisher_exact(&self.evaluator(y, ols)?, a, cfg.tie_rule, EXHAUSTIVE_LIMIT);
        }
        let ranks = self.exact_ranks[ols as usize]
            .get_or_init(|| fisher::fisher_exact_all(&self.evaluator(y, ols)?, cfg.tie_rule, EXHAUSTIVE_LIMIT))
            .as_ref()
            .map_err(|e| Error::Infeasible(e.to_string()))?;
        let rank = ranks[a.rank() as usize];
        Ok(FisherResult {
            p_value: rank as f64 / count as f64,
            rank,
            set_size: count as u64,
            statistic: if ols { fisher::Statistic::Ols } else { fisher::Statistic::Dm },
            degraded: false,
        })
    }

    fn fisher(&self, e: SimEstimator, a: &Assignment, y: &[f64], path: &[u64]) -> Result<Eval> {
        let estimate = match e {
            SimEstimator::FisherReg => ols_adjusted(y, a, &self.design, &self.opts())?.estimate,
            _ => crate::estimators::mean_difference(y, a),
        };
        let (res, selected_p) = match e {
            SimEstimator::FisherExact => (self.exact_or_mc(a, y, false, path)?, None),
            SimEstimator::FisherReg => (self.exact_or_mc(a, y, true, path)?, None),
            _ => {
                let mut rng = stream(derive(self.config.seed, path), &[Purpose::PairSwitch as u64]);
                let out = fisher::approximate_fisher(
                    &self.evaluator(y, false)?,
                    &self.design,
                    a,
                    &approx_config(self.config),
                    &mut rng,
                )?;
                (out.result, Some(out.components))
            }
        };
        Ok(Eval {
            estimate,
            p: res.p_value,
            selected_p,
        })
    }
}

fn grid_sample(config: &SimConfig, k: usize, estimators: &[SimEstimator], s: usize) -> Result<SampleResult> {
    let (n, n1) = (config.n, config.n1);
    let seed = derive(config.seed, &[k as u64, s as u64]);
    let sample = draw_sample(config, k, seed)?;
    let design = sample.design()?;
    let need_pca = estimators.contains(&SimEstimator::PcaP);
    let pca = if need_pca { Some(balance::pca(&design)?) } else { None };
    let score_designs = match &pca {
        Some(p) => {
            let scores = p.scores(&design);
            (1..=k)
                .map(|q| CenteredDesign::new(&scores.columns(0, q).into_owned()))
                .collect::<Result<Vec<_>>>()?
        }
        None => Vec::new(),
    };
    let tau = sample.tau();
    let slope = HeterogeneousProjection::fit(&sample, &design)?.zeta(n - n1, n1);
    let state = SampleState {
        config,
        null: null_value(config, &sample),
        shared_outcome: sample.y0() == sample.y1(),
        sample,
        design,
        pca,
        score_designs,
        exact_ranks: [OnceLock::new(), OnceLock::new()],
    };

    let draws = match config.assignments_per_sample {
        AssignmentCount::Count(c) => c,
        AssignmentCount::All => unreachable!("validated"),
    };
    let mut ms = Vec::with_capacity(draws);
    let mut evals: Vec<(SimEstimator, usize, Eval)> = Vec::new();
    for j in 0..draws {
        let path = [k as u64, s as u64, j as u64];
        let mut rng = stream(config.seed, &[k as u64, s as u64, j as u64, Purpose::Assignment as u64]);
        let a = Assignment::random(n, n1, &mut rng)?;
        let y = state.sample.observed(&a);
        ms.push(balance::mahalanobis(&state.design, &a)?);
        for &e in estimators {
            if e.is_fisher() {
                if j < config.reference_assignments {
                    evals.push((e, j, state.fisher(e, &a, &y, &path)?));
                }
            } else {
                evals.push((e, j, state.point(e, &a, &y)?));
            }
        }
    }
    let bins = quantile_bins(&ms, config.bins());

    let mut cells = Vec::new();
    let mut rows = Vec::new();
    for &e in estimators {
        let obs: Vec<(usize, Obs)> = evals
            .iter()
            .filter(|(x, _, _)| *x == e)
            .map(|(_, j, ev)| {
                let o = Obs {
                    estimate: ev.estimate,
                    rejected: ev.p <= config.alpha,
                    delta: 0.0,
                    m: ms[*j],
                    selected_p: ev.selected_p,
                };
                (bins[*j], o)
            })
            .collect();
        cells.push(EstimatorCells::from_sample(e, &obs, config.bins(), tau));
    }
    if config.emit_rows {
        for (e, j, ev) in &evals {
            rows.push(RecordRow {
                sample_id: s,
                k,
                estimator: *e,
                assignment: *j as u64,
                estimate: ev.estimate,
                p: ev.p,
                m: ms[*j],
                bin: bins[*j],
                selected_p: ev.selected_p,
            });
        }
    }
    Ok(SampleResult {
        cells,
        rows,
        slope: slope.iter().copied().collect(),
    })
}
