//! `condrand analyze` and `condrand simulate`.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use serde::Serialize;

use crate::balance::{self, BalanceReport, InitialSize};
use crate::design::CenteredDesign;
use crate::estimators::{
    diff_in_means, ols_adjusted, ols_interacted, EstimatorId, InteractedDesign, TestOptions, TestResult,
};
use crate::fisher::{self, ApproxFisherConfig, ApproxProvenance, ComponentRule, StatisticEvaluator};
use crate::rng::{stream, Purpose};
use crate::simulation::{self, output, Scale, SimConfig};
use crate::{par, Assignment, Error, Result};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Parser)]
#[command(name = "condrand", version, about = "Randomization inference conditional on covariate imbalance")]
pub struct Cli {
    /// Worker threads (default: all cores; 1 runs serially).
    #[arg(long, global = true, env = "CONDRAND_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Balance, component selection, estimates and tests for one experiment.
    Analyze(AnalyzeArgs),
    /// Run a Monte Carlo study described by a TOML config.
    Simulate(SimulateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EstimatorFlag {
    Dm,
    Ols,
    Olsx,
    Pca,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StatisticFlag {
    Dm,
    Ols,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ComponentsFlag {
    All,
    Selected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InitialFlag {
    Full,
    Half,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScaleFlag {
    Desk,
    Paper,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// CSV with an outcome column, a 0/1 treatment column and covariates.
    pub input: PathBuf,
    #[arg(long, default_value = "outcome")]
    pub outcome: String,
    #[arg(long, default_value = "treated")]
    pub treated: String,
    #[arg(long, default_value_t = 0.01)]
    pub delta_bar: f64,
    #[arg(long, default_value_t = 100)]
    pub h: usize,
    #[arg(long, default_value_t = 1000)]
    pub n_s: usize,
    #[arg(long, default_value_t = 20)]
    pub n_f: usize,
    /// Estimators to report (repeat or comma-separate).
    #[arg(long = "estimator", value_enum, value_delimiter = ',', default_values_t = [EstimatorFlag::Dm, EstimatorFlag::Ols])]
    pub estimators: Vec<EstimatorFlag>,
    /// Also run the approximate conditional Fisher test of the sharp null.
    #[arg(long)]
    pub fisher: bool,
    #[arg(long, value_enum, default_value_t = StatisticFlag::Dm)]
    pub fisher_statistic: StatisticFlag,
    #[arg(long, value_enum, default_value_t = ComponentsFlag::Selected)]
    pub fisher_components: ComponentsFlag,
    #[arg(long, value_enum, default_value_t = InitialFlag::Full)]
    pub initial: InitialFlag,
    /// Value of the treatment effect under the null for the t-tests.
    #[arg(long, default_value_t = 0.0)]
    pub null: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory for report.json and report.txt.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    pub config: PathBuf,
    /// Replication preset overriding the config's counts.
    #[arg(long, value_enum)]
    pub scale: Option<ScaleFlag>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Process exit code for an error: 2 for user errors, 3 for internal guards.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::EnumerationGuard { .. } | Error::Eigen(_) => 3,
        _ => 2,
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let threads = cli.threads;
    let result = par::with_threads(threads, move || match cli.command {
        Command::Analyze(a) => cmd_analyze(&a).map(|text| print!("{text}")),
        Command::Simulate(s) => cmd_simulate(&s).map(|text| print!("{text}")),
    })
    .and_then(|r| r);
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Parsed analysis table.
#[derive(Debug, Clone)]
pub struct AnalysisInput {
    pub covariate_names: Vec<String>,
    pub outcome: Vec<f64>,
    pub treated: Vec<bool>,
    pub covariates: DMatrix<f64>,
}

fn cell_error(line: u64, column: usize, name: &str, what: &str) -> Error {
    Error::invalid(format!("line {line}, column {column} ({name}): {what}"))
}

/// Reads and validates an analysis CSV. Line numbers count the header as 1.
pub fn read_analysis_input(path: &Path, outcome: &str, treated: &str) -> Result<AnalysisInput> {
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(false)
        .from_path(path)
        .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::invalid(format!("line 1: missing required column `{name}`")))
    };
    let yi = find(outcome)?;
    let wi = find(treated)?;
    let zcols: Vec<usize> = (0..headers.len()).filter(|&c| c != yi && c != wi).collect();
    if zcols.is_empty() {
        return Err(Error::invalid("line 1: at least one covariate column is required"));
    }
    let mut y = Vec::new();
    let mut w = Vec::new();
    let mut z = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| match e.position() {
            Some(p) => Error::invalid(format!("line {}: {e}", p.line())),
            None => Error::invalid(e.to_string()),
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let num = |c: usize| -> Result<f64> {
            let raw = rec.get(c).unwrap_or("").trim();
            if raw.is_empty() || raw.eq_ignore_ascii_case("na") || raw.eq_ignore_ascii_case("nan") {
                return Err(cell_error(line, c + 1, &headers[c], "missing value"));
            }
            let v: f64 = raw
                .parse()
                .map_err(|_| cell_error(line, c + 1, &headers[c], &format!("`{raw}` is not a number")))?;
            if !v.is_finite() {
                return Err(cell_error(line, c + 1, &headers[c], "value is not finite"));
            }
            Ok(v)
        };
        y.push(num(yi)?);
        let t = num(wi)?;
        if t != 0.0 && t != 1.0 {
            return Err(cell_error(line, wi + 1, &headers[wi], "treatment must be 0 or 1"));
        }
        w.push(t == 1.0);
        for &c in &zcols {
            z.push(num(c)?);
        }
    }
    let n = y.len();
    let k = zcols.len();
    Ok(AnalysisInput {
        covariate_names: zcols.iter().map(|&c| headers[c].clone()).collect(),
        outcome: y,
        treated: w,
        covariates: DMatrix::from_row_slice(n, k, &z),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ComponentReport {
    pub selected_p: usize,
    pub variances: Vec<f64>,
    pub expected_set_sizes: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FisherReport {
    pub p_value: f64,
    pub rank: u64,
    pub set_size: u64,
    pub components: usize,
    pub provenance: ApproxProvenance,
    pub degraded: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct AnalysisReport {
    pub schema_version: u32,
    pub n: usize,
    pub n1: usize,
    pub covariates: Vec<String>,
    pub balance: BalanceReport,
    pub components: ComponentReport,
    pub estimates: Vec<TestResult>,
    pub fisher: Option<FisherReport>,
}

fn pca_estimate(
    y: &[f64],
    a: &Assignment,
    design: &CenteredDesign,
    pca: &balance::Pca,
    p: usize,
    opts: &TestOptions,
) -> Result<TestResult> {
    if p == 0 {
        return Ok(diff_in_means(y, a, opts)?.relabel(EstimatorId::PcaP));
    }
    let scores = pca.scores(design);
    let sd = CenteredDesign::new(&scores.columns(0, p).into_owned())?;
    Ok(ols_adjusted(y, a, &sd, opts)?.relabel(EstimatorId::PcaP))
}

pub fn analyze(input: &AnalysisInput, args: &AnalyzeArgs) -> Result<AnalysisReport> {
    let n = input.outcome.len();
    let a = Assignment::new(input.treated.clone())?;
    let design = CenteredDesign::new(&input.covariates)?;
    let initial = match args.initial {
        InitialFlag::Full => InitialSize::Full,
        InitialFlag::Half => InitialSize::Half,
    };
    let pca = balance::pca(&design)?;
    let sel = balance::select_components_with(&pca, &design, &a, args.delta_bar, args.h, initial.value(n, a.n1()))?;
    let opts = TestOptions::with_null(args.null);
    let y = &input.outcome;
    let mut flags = args.estimators.clone();
    flags.sort_by_key(|f| *f as u8);
    flags.dedup();
    let mut estimates = Vec::new();
    for f in flags {
        estimates.push(match f {
            EstimatorFlag::Dm => diff_in_means(y, &a, &opts)?,
            EstimatorFlag::Ols => ols_adjusted(y, &a, &design, &opts)?,
            EstimatorFlag::Olsx => ols_interacted(y, &a, &InteractedDesign::new(&design, &a)?, &opts)?,
            EstimatorFlag::Pca => pca_estimate(y, &a, &design, &pca, sel.selected_p, &opts)?,
        });
    }
    let fisher = if args.fisher {
        let eval = match args.fisher_statistic {
            StatisticFlag::Dm => StatisticEvaluator::dm(y, a.n1()),
            StatisticFlag::Ols => StatisticEvaluator::ols(y, a.n1(), &design)?,
        };
        let cfg = ApproxFisherConfig {
            delta_bar: args.delta_bar,
            h: args.h,
            n_s: args.n_s,
            n_f: args.n_f,
            components: match args.fisher_components {
                ComponentsFlag::All => ComponentRule::All,
                ComponentsFlag::Selected => ComponentRule::Selected,
            },
            initial_size: initial,
            ..ApproxFisherConfig::default()
        };
        let mut rng = stream(args.seed, &[Purpose::PairSwitch as u64]);
        let out = fisher::approximate_fisher(&eval, &design, &a, &cfg, &mut rng)?;
        Some(FisherReport {
            p_value: out.result.p_value,
            rank: out.result.rank,
            set_size: out.result.set_size,
            components: out.components,
            provenance: out.provenance,
            degraded: out.result.degraded,
        })
    } else {
        None
    };
    Ok(AnalysisReport {
        schema_version: REPORT_SCHEMA_VERSION,
        n,
        n1: a.n1(),
        covariates: input.covariate_names.clone(),
        balance: balance::balance_report(&design, &a)?,
        components: ComponentReport {
            selected_p: sel.selected_p,
            variances: pca.variances.iter().copied().collect(),
            expected_set_sizes: sel.n_delta_bar_trace,
        },
        estimates,
        fisher,
    })
}

/// Rounds to four significant digits for display.
pub fn sig4(x: f64) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    if x == 0.0 {
        return "0".into();
    }
    let mag = x.abs().log10().floor() as i32;
    if !(-4..6).contains(&mag) {
        return format!("{x:.3e}");
    }
    let decimals = (3 - mag).max(0) as usize;
    format!("{x:.decimals$}")
}

fn list(v: &[f64]) -> String {
    v.iter().map(|x| sig4(*x)).collect::<Vec<_>>().join(", ")
}

pub fn render_report(r: &AnalysisReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "n = {} (treated {}, control {})", r.n, r.n1, r.n - r.n1);
    let _ = writeln!(s, "covariates: {}", r.covariates.join(", "));
    let _ = writeln!(s, "\nbalance");
    let _ = writeln!(s, "  delta        [{}]", list(&r.balance.delta));
    let _ = writeln!(s, "  M            {}", sig4(r.balance.mahalanobis));
    let _ = writeln!(s, "  mean treated [{}]", list(&r.balance.mean_treated));
    let _ = writeln!(s, "  mean control [{}]", list(&r.balance.mean_control));
    let _ = writeln!(s, "\nprincipal components");
    let _ = writeln!(s, "  variances    [{}]", list(&r.components.variances));
    let _ = writeln!(s, "  set sizes    [{}]", list(&r.components.expected_set_sizes));
    let _ = writeln!(s, "  selected p   {}", r.components.selected_p);
    let _ = writeln!(s, "\nestimates");
    for e in &r.estimates {
        let _ = writeln!(
            s,
            "  {:<6} {:>10}  se {:>10}  p {:>10}  dof {}",
            e.estimator.as_str(),
            sig4(e.estimate),
            sig4(e.std_error),
            sig4(e.p_value),
            e.dof
        );
    }
    if let Some(f) = &r.fisher {
        let _ = writeln!(s, "\nconditional Fisher test");
        let _ = writeln!(
            s,
            "  p {}  (rank {} of {}, {} components, {:?}{})",
            sig4(f.p_value),
            f.rank,
            f.set_size,
            f.components,
            f.provenance,
            if f.degraded { ", fewer members than requested" } else { "" }
        );
    }
    s
}

pub fn cmd_analyze(args: &AnalyzeArgs) -> Result<String> {
    let input = read_analysis_input(&args.input, &args.outcome, &args.treated)?;
    let report = analyze(&input, args)?;
    let text = render_report(&report);
    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir)?;
        let json = serde_json::to_string_pretty(&report)?;
        std::fs::write(dir.join("report.json"), json + "\n")?;
        std::fs::write(dir.join("report.txt"), &text)?;
    }
    Ok(text)
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<String> {
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| Error::invalid(format!("{}: {e}", args.config.display())))?;
    let mut config = SimConfig::from_toml(&text)?;
    if let Some(scale) = args.scale {
        config = config.with_scale(match scale {
            ScaleFlag::Desk => Scale::Desk,
            ScaleFlag::Paper => Scale::Paper,
        });
    }
    let out = simulation::run(&config)?;
    let files = output::write_outputs(&out, &args.out)?;
    let mut s = String::new();
    let _ = writeln!(s, "records   {} ({} rows)", files.records.display(), out.rows.len());
    let _ = writeln!(s, "manifest  {}", files.manifest.display());
    let _ = writeln!(s, "hash      {}", files.manifest_data.content_hash);
    for sk in &out.skipped {
        let _ = writeln!(s, "skipped   K={} {}: {}", sk.k, sk.estimator, sk.reason);
    }
    for sm in &out.summaries {
        let u = &sm.unconditional;
        let _ = writeln!(
            s,
            "K={:<3} {:<13} rejection {:>8}  mse {:>10}",
            sm.k,
            sm.estimator.as_str(),
            sig4(u.rejection_rate),
            u.mse.map(sig4).unwrap_or_else(|| "-".into())
        );
    }
    Ok(s)
}
