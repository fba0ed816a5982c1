//! Monte Carlo drivers: an exhaustive single-covariate illustration and a grid
//! over the number of covariates, both reduced into per-bin aggregates.

pub mod dgp;
mod grid;
mod illustration;
pub mod output;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::balance::InitialSize;
use crate::fisher::{ComponentRule, TieRule};
use crate::{Error, Result};

pub use dgp::{dgp_heterogeneous, dgp_homogeneous, random_correlation};
pub use grid::run_grid;
pub use illustration::run_illustration;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Illustration,
    Grid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DgpKind {
    #[default]
    Homogeneous,
    Heterogeneous,
}

/// Value tested by the t-based estimators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NullHypothesis {
    /// The sample average effect, so rejections measure size.
    #[default]
    SampleAte,
    /// Zero, so rejections measure power when the effect is nonzero.
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SimEstimator {
    #[serde(rename = "DM")]
    Dm,
    #[serde(rename = "OLS_Z")]
    OlsZ,
    #[serde(rename = "OLS_X")]
    OlsX,
    #[serde(rename = "PCA_P")]
    PcaP,
    #[serde(rename = "FISHER_EXACT")]
    FisherExact,
    #[serde(rename = "FISHER_REG")]
    FisherReg,
    #[serde(rename = "FISHER_APPROX")]
    FisherApprox,
}

impl SimEstimator {
    pub fn as_str(self) -> &'static str {
        match self {
            SimEstimator::Dm => "DM",
            SimEstimator::OlsZ => "OLS_Z",
            SimEstimator::OlsX => "OLS_X",
            SimEstimator::PcaP => "PCA_P",
            SimEstimator::FisherExact => "FISHER_EXACT",
            SimEstimator::FisherReg => "FISHER_REG",
            SimEstimator::FisherApprox => "FISHER_APPROX",
        }
    }

    pub fn is_fisher(self) -> bool {
        matches!(
            self,
            SimEstimator::FisherExact | SimEstimator::FisherReg | SimEstimator::FisherApprox
        )
    }
}

impl std::fmt::Display for SimEstimator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Either every assignment or a fixed number of uniform draws per sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AssignmentCount {
    #[default]
    All,
    Count(usize),
}

impl Serialize for AssignmentCount {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            AssignmentCount::All => s.serialize_str("all"),
            AssignmentCount::Count(c) => s.serialize_u64(*c as u64),
        }
    }
}

impl<'de> Deserialize<'de> for AssignmentCount {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct Visitor;
        impl serde::de::Visitor<'_> for Visitor {
            type Value = AssignmentCount;
            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("\"all\" or a positive integer")
            }
            fn visit_str<E: serde::de::Error>(self, v: &str) -> std::result::Result<Self::Value, E> {
                if v.eq_ignore_ascii_case("all") {
                    Ok(AssignmentCount::All)
                } else {
                    Err(E::invalid_value(serde::de::Unexpected::Str(v), &self))
                }
            }
            fn visit_i64<E: serde::de::Error>(self, v: i64) -> std::result::Result<Self::Value, E> {
                if v < 1 {
                    return Err(E::invalid_value(serde::de::Unexpected::Signed(v), &self));
                }
                Ok(AssignmentCount::Count(v as usize))
            }
            fn visit_u64<E: serde::de::Error>(self, v: u64) -> std::result::Result<Self::Value, E> {
                if v < 1 {
                    return Err(E::invalid_value(serde::de::Unexpected::Unsigned(v), &self));
                }
                Ok(AssignmentCount::Count(v as usize))
            }
        }
        d.deserialize_any(Visitor)
    }
}

/// Preset replication counts applied on top of a config file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    /// 200 samples, 2,000 drawn assignments per sample in grid mode.
    Desk,
    /// 1,000 samples, 10,000 drawn assignments per sample in grid mode.
    Paper,
}

fn default_k_grid() -> Vec<usize> {
    vec![1]
}
fn default_delta_bar() -> f64 {
    0.01
}
fn default_h() -> usize {
    100
}
fn default_n_s() -> usize {
    1000
}
fn default_n_f() -> usize {
    20
}
fn default_estimators() -> Vec<SimEstimator> {
    vec![SimEstimator::Dm, SimEstimator::OlsZ]
}
fn default_alpha() -> f64 {
    0.05
}
fn default_references() -> usize {
    100
}
fn default_mc_draws() -> usize {
    1000
}
fn default_components() -> ComponentRule {
    ComponentRule::Selected
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub mode: Mode,
    pub n: usize,
    pub n1: usize,
    #[serde(default = "default_k_grid")]
    pub k_grid: Vec<usize>,
    pub replications: usize,
    #[serde(default)]
    pub assignments_per_sample: AssignmentCount,
    #[serde(default = "default_delta_bar")]
    pub delta_bar: f64,
    #[serde(default = "default_h")]
    pub h: usize,
    #[serde(default = "default_n_s")]
    pub n_s: usize,
    #[serde(default = "default_n_f")]
    pub n_f: usize,
    #[serde(default)]
    pub dgp: DgpKind,
    #[serde(default)]
    pub correlated: bool,
    /// Constant effect (homogeneous) or mean effect (heterogeneous).
    #[serde(default)]
    pub effect: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_estimators")]
    pub estimators: Vec<SimEstimator>,
    #[serde(default)]
    pub initial_n_mode: InitialSize,
    #[serde(default)]
    pub null: NullHypothesis,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Number of imbalance bins; 100 for the illustration and 5 for the grid
    /// when absent.
    #[serde(default)]
    pub bins: Option<usize>,
    /// Assignments per sample that the Fisher tests (and, in the
    /// illustration, the emitted rows) are evaluated on.
    #[serde(default = "default_references")]
    pub reference_assignments: usize,
    #[serde(default = "default_mc_draws")]
    pub fisher_mc_draws: usize,
    #[serde(default = "default_components")]
    pub fisher_components: ComponentRule,
    #[serde(default)]
    pub tie_rule: TieRule,
    #[serde(default = "default_true")]
    pub emit_rows: bool,
}

impl SimConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: SimConfig = toml::from_str(text).map_err(|e| Error::invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn bins(&self) -> usize {
        self.bins.unwrap_or(match self.mode {
            Mode::Illustration => 100,
            Mode::Grid => 5,
        })
    }

    pub fn with_scale(mut self, scale: Scale) -> Self {
        let (reps, draws) = match scale {
            Scale::Desk => (200, 2000),
            Scale::Paper => (1000, 10_000),
        };
        self.replications = reps;
        if self.mode == Mode::Grid {
            self.assignments_per_sample = AssignmentCount::Count(draws);
        }
        self
    }

    /// The estimator set, sorted and without duplicates.
    pub fn estimator_set(&self) -> Vec<SimEstimator> {
        let mut e = self.estimators.clone();
        e.sort();
        e.dedup();
        e
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Infeasible(msg));
        if self.n1 < 2 || self.n1 + 2 > self.n {
            return fail(format!(
                "need 2 <= n1 <= n - 2 so both arms can estimate a variance (n={}, n1={})",
                self.n, self.n1
            ));
        }
        if self.n > 64 {
            return fail(format!("n must be at most 64 (n={})", self.n));
        }
        if !(self.delta_bar > 0.0) || !self.delta_bar.is_finite() {
            return fail(format!("delta_bar must be positive (delta_bar={})", self.delta_bar));
        }
        if self.h < 1 {
            return fail("h must be at least 1".into());
        }
        if self.n_f > self.n_s || self.n_s < 1 {
            return fail(format!("need 1 <= n_s and n_f <= n_s (n_s={}, n_f={})", self.n_s, self.n_f));
        }
        if self.replications < 1 {
            return fail("replications must be at least 1".into());
        }
        if self.k_grid.is_empty() || self.k_grid.contains(&0) {
            return fail("k_grid must list at least one K >= 1".into());
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return fail(format!("alpha must lie in (0, 1) (alpha={})", self.alpha));
        }
        if self.bins() < 1 {
            return fail("bins must be at least 1".into());
        }
        if self.estimators.is_empty() {
            return fail("estimators must not be empty".into());
        }
        if !self.effect.is_finite() {
            return fail("effect must be finite".into());
        }
        if self.estimators.iter().any(|e| e.is_fisher()) && self.fisher_mc_draws < 1 {
            return fail("fisher_mc_draws must be at least 1".into());
        }
        match self.mode {
            Mode::Illustration => {
                if self.k_grid != [1] {
                    return fail(format!("illustration mode needs k_grid = [1] (got {:?})", self.k_grid));
                }
                if self.assignments_per_sample != AssignmentCount::All {
                    return fail("illustration mode enumerates every assignment; set assignments_per_sample = \"all\"".into());
                }
            }
            Mode::Grid => {
                if self.assignments_per_sample == AssignmentCount::All {
                    return fail("grid mode needs a number for assignments_per_sample".into());
                }
            }
        }
        Ok(())
    }
}

/// One evaluated (sample, assignment, estimator) triple.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecordRow {
    pub sample_id: usize,
    pub k: usize,
    pub estimator: SimEstimator,
    /// Enumeration rank in the illustration, draw index in the grid.
    pub assignment: u64,
    /// Point estimate; for Fisher rows the observed statistic.
    pub estimate: f64,
    pub p: f64,
    #[serde(rename = "M")]
    pub m: f64,
    pub bin: usize,
    pub selected_p: Option<usize>,
}

/// Aggregates over one bin (or over all assignments when `bin` is absent).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub bin: Option<usize>,
    pub count: u64,
    pub rejections: u64,
    pub rejection_rate: f64,
    pub mean_estimate: Option<f64>,
    pub bias: Option<f64>,
    pub mse: Option<f64>,
    /// Within-sample variance of the estimate, averaged over samples.
    pub variance: Option<f64>,
    /// Mean imbalance of the single covariate (illustration only).
    pub mean_delta: Option<f64>,
    pub mean_m: f64,
    pub mean_selected_p: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSummary {
    pub k: usize,
    pub estimator: SimEstimator,
    pub unconditional: CellSummary,
    pub bins: Vec<CellSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skipped {
    pub k: usize,
    pub estimator: SimEstimator,
    pub reason: String,
}

/// Average over samples of the outcome-on-covariate slope that drives the
/// conditional bias of difference-in-means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeSummary {
    pub k: usize,
    pub mean_slope: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub config: SimConfig,
    pub rows: Vec<RecordRow>,
    pub summaries: Vec<EstimatorSummary>,
    pub skipped: Vec<Skipped>,
    pub slopes: Vec<SlopeSummary>,
}

impl SimOutput {
    pub fn summary(&self, k: usize, estimator: SimEstimator) -> Option<&EstimatorSummary> {
        self.summaries.iter().find(|s| s.k == k && s.estimator == estimator)
    }
}

pub fn run(config: &SimConfig) -> Result<SimOutput> {
    config.validate()?;
    match config.mode {
        Mode::Illustration => run_illustration(config),
        Mode::Grid => run_grid(config),
    }
}

/// One evaluation feeding the aggregates.
#[derive(Debug, Clone, Copy)]
struct Obs {
    estimate: f64,
    rejected: bool,
    delta: f64,
    m: f64,
    selected_p: Option<usize>,
}

/// Running sums for one (estimator, bin) cell across samples.
#[derive(Debug, Clone, Default)]
struct Cell {
    count: u64,
    rejections: u64,
    sum_estimate: f64,
    sum_error: f64,
    sum_sq_error: f64,
    sum_delta: f64,
    sum_m: f64,
    sum_selected: u64,
    selected_count: u64,
    sum_variance: f64,
    variance_samples: u64,
}

impl Cell {
    /// Folds one sample's observations, `tau` being that sample's effect.
    fn add_sample(&mut self, obs: &[Obs], tau: f64) {
        if obs.is_empty() {
            return;
        }
        let mut est_sum = 0.0;
        for o in obs {
            self.count += 1;
            self.rejections += o.rejected as u64;
            self.sum_estimate += o.estimate;
            let err = o.estimate - tau;
            self.sum_error += err;
            self.sum_sq_error += err * err;
            self.sum_delta += o.delta;
            self.sum_m += o.m;
            if let Some(p) = o.selected_p {
                self.sum_selected += p as u64;
                self.selected_count += 1;
            }
            est_sum += o.estimate;
        }
        if obs.len() >= 2 {
            let mean = est_sum / obs.len() as f64;
            let ss: f64 = obs.iter().map(|o| (o.estimate - mean).powi(2)).sum();
            self.sum_variance += ss / (obs.len() - 1) as f64;
            self.variance_samples += 1;
        }
    }

    fn summary(&self, bin: Option<usize>, point: bool, has_delta: bool) -> CellSummary {
        let n = self.count.max(1) as f64;
        let point_stat = |v: f64| if point && self.count > 0 { Some(v / n) } else { None };
        CellSummary {
            bin,
            count: self.count,
            rejections: self.rejections,
            rejection_rate: if self.count > 0 { self.rejections as f64 / n } else { 0.0 },
            mean_estimate: point_stat(self.sum_estimate),
            bias: point_stat(self.sum_error),
            mse: point_stat(self.sum_sq_error),
            variance: (point && self.variance_samples > 0)
                .then(|| self.sum_variance / self.variance_samples as f64),
            mean_delta: (has_delta && self.count > 0).then(|| self.sum_delta / n),
            mean_m: self.sum_m / n,
            mean_selected_p: (self.selected_count > 0)
                .then(|| self.sum_selected as f64 / self.selected_count as f64),
        }
    }
}

impl Cell {
    fn merge(&mut self, o: &Cell) {
        self.count += o.count;
        self.rejections += o.rejections;
        self.sum_estimate += o.sum_estimate;
        self.sum_error += o.sum_error;
        self.sum_sq_error += o.sum_sq_error;
        self.sum_delta += o.sum_delta;
        self.sum_m += o.sum_m;
        self.sum_selected += o.sum_selected;
        self.selected_count += o.selected_count;
        self.sum_variance += o.sum_variance;
        self.variance_samples += o.variance_samples;
    }
}

/// One estimator's cells, first for a single sample and then merged.
#[derive(Debug, Clone)]
struct EstimatorCells {
    estimator: SimEstimator,
    all: Cell,
    bins: Vec<Cell>,
}

impl EstimatorCells {
    /// Cells of one sample from `(bin, observation)` pairs.
    fn from_sample(estimator: SimEstimator, obs: &[(usize, Obs)], bins: usize, tau: f64) -> Self {
        let mut split: Vec<Vec<Obs>> = vec![Vec::new(); bins];
        for &(b, o) in obs {
            split[b].push(o);
        }
        let everything: Vec<Obs> = obs.iter().map(|&(_, o)| o).collect();
        let mut all = Cell::default();
        all.add_sample(&everything, tau);
        let bins = split
            .iter()
            .map(|v| {
                let mut c = Cell::default();
                c.add_sample(v, tau);
                c
            })
            .collect();
        EstimatorCells { estimator, all, bins }
    }

    fn merge(&mut self, o: &EstimatorCells) {
        self.all.merge(&o.all);
        for (a, b) in self.bins.iter_mut().zip(&o.bins) {
            a.merge(b);
        }
    }
}

/// What one sample contributes to the output.
#[derive(Debug, Clone)]
struct SampleResult {
    cells: Vec<EstimatorCells>,
    rows: Vec<RecordRow>,
    slope: Vec<f64>,
}

/// Merges per-sample cells for one `k` in sample order.
#[derive(Debug, Clone)]
struct Reducer {
    k: usize,
    has_delta: bool,
    cells: Vec<EstimatorCells>,
    slope_sum: Vec<f64>,
    samples: usize,
}

impl Reducer {
    fn new(k: usize, bins: usize, has_delta: bool, estimators: &[SimEstimator]) -> Self {
        Reducer {
            k,
            has_delta,
            cells: estimators
                .iter()
                .map(|&e| EstimatorCells {
                    estimator: e,
                    all: Cell::default(),
                    bins: vec![Cell::default(); bins],
                })
                .collect(),
            slope_sum: vec![0.0; k],
            samples: 0,
        }
    }

    fn add(&mut self, sample: SampleResult, rows: &mut Vec<RecordRow>) {
        for sc in &sample.cells {
            if let Some(c) = self.cells.iter_mut().find(|c| c.estimator == sc.estimator) {
                c.merge(sc);
            }
        }
        for (s, v) in self.slope_sum.iter_mut().zip(&sample.slope) {
            *s += v;
        }
        self.samples += 1;
        rows.extend(sample.rows);
    }

    fn finish(self, summaries: &mut Vec<EstimatorSummary>, slopes: &mut Vec<SlopeSummary>) {
        for c in self.cells {
            let point = !c.estimator.is_fisher();
            summaries.push(EstimatorSummary {
                k: self.k,
                estimator: c.estimator,
                unconditional: c.all.summary(None, point, self.has_delta),
                bins: c
                    .bins
                    .iter()
                    .enumerate()
                    .map(|(b, cell)| cell.summary(Some(b), point, self.has_delta))
                    .collect(),
            });
        }
        let s = self.samples.max(1) as f64;
        slopes.push(SlopeSummary {
            k: self.k,
            mean_slope: self.slope_sum.iter().map(|v| v / s).collect(),
        });
    }
}

/// Critical value of the two-sided t-test at level `alpha`.
fn t_critical(alpha: f64, dof: usize) -> Result<f64> {
    use statrs::distribution::{ContinuousCDF, StudentsT};
    let t = StudentsT::new(0.0, 1.0, dof as f64).map_err(|e| Error::invalid(e.to_string()))?;
    Ok(t.inverse_cdf(1.0 - alpha / 2.0))
}

fn t_rejects(estimate: f64, std_error: f64, null: f64, critical: f64) -> bool {
    if std_error == 0.0 {
        return estimate != null;
    }
    ((estimate - null) / std_error).abs() >= critical
}
