//! Experiment sweeps: one row per cell, sorted by cell index so the result
//! table depends only on the configuration and seed.

pub mod stability;
pub mod svg;

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{best_rho, well_bounded};
use crate::eot::{log_sk_run, prescale, Domain, EotProblem, LogMatrix, solve_eot};
use crate::error::{Error, Result};
use crate::generators::{
    critical_bound, gen_critical2x2, gen_random, gen_thm61, gen_thm71, gen_tight2x2, rng_from_seed, Family, RandomFamily,
};
use crate::matrix::{Marginals, Matrix, ScalingInstance};
use crate::scaling::{nu, sk_run, StopReason, TraceOptions};

pub use stability::{structural_stability_audit, StabilityAudit, StepAudit};
pub use svg::{Chart, Series};

pub const DEFAULT_MAX_ITER: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentId {
    OutlierIndependence,
    PrescaleAcceleration,
    PhaseTransition,
    CriticalBoundary,
    NuDependence,
}

impl ExperimentId {
    pub const ALL: [ExperimentId; 5] = [
        ExperimentId::OutlierIndependence,
        ExperimentId::PrescaleAcceleration,
        ExperimentId::PhaseTransition,
        ExperimentId::CriticalBoundary,
        ExperimentId::NuDependence,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentId::OutlierIndependence => "outlier_independence",
            ExperimentId::PrescaleAcceleration => "prescale_acceleration",
            ExperimentId::PhaseTransition => "phase_transition",
            ExperimentId::CriticalBoundary => "critical_boundary",
            ExperimentId::NuDependence => "nu_dependence",
        }
    }
}

impl fmt::Display for ExperimentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ExperimentId::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown experiment {s:?}")))
    }
}

/// Sweep definition. Unset grids in a config file fall back to the
/// experiment's defaults (see [`ExperimentConfig::defaults`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub experiment: ExperimentId,
    pub n: Vec<usize>,
    pub eps: Vec<f64>,
    pub eta: Vec<f64>,
    pub outliers: Vec<f64>,
    pub nu: Vec<f64>,
    pub delta: Vec<f64>,
    pub seed: u64,
    pub max_iter: usize,
    /// Wall-clock budget per cell, in seconds.
    pub budget_secs: Option<f64>,
    pub domain: Domain,
    pub chart: bool,
}

/// Config as read from a file: every field optional except the experiment.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartialConfig {
    pub experiment: Option<ExperimentId>,
    pub n: Option<Vec<usize>>,
    pub eps: Option<Vec<f64>>,
    pub eta: Option<Vec<f64>>,
    pub outliers: Option<Vec<f64>>,
    pub nu: Option<Vec<f64>>,
    pub delta: Option<Vec<f64>>,
    pub seed: Option<u64>,
    pub max_iter: Option<usize>,
    pub budget_secs: Option<f64>,
    pub domain: Option<Domain>,
    pub chart: Option<bool>,
}

impl ExperimentConfig {
    pub fn defaults(experiment: ExperimentId) -> Self {
        let base = Self {
            experiment,
            n: vec![],
            eps: vec![1e-6],
            eta: vec![1.0],
            outliers: vec![],
            nu: vec![],
            delta: vec![],
            seed: 0,
            max_iter: DEFAULT_MAX_ITER,
            budget_secs: None,
            domain: Domain::Auto,
            chart: false,
        };
        match experiment {
            ExperimentId::OutlierIndependence => {
                Self { n: vec![8], outliers: vec![1e2, 1e4, 1e6], domain: Domain::Log, ..base }
            }
            ExperimentId::PrescaleAcceleration => Self { n: vec![20, 100, 500], ..base },
            ExperimentId::PhaseTransition => Self { n: vec![20], eps: vec![1e-4], nu: vec![1e-3, 1e-6, 1e-9], ..base },
            ExperimentId::CriticalBoundary => Self { n: vec![2], eps: vec![1e-1, 1e-2, 1e-3], ..base },
            ExperimentId::NuDependence => Self {
                n: vec![20],
                eps: vec![1e-4, 1e-8],
                nu: vec![1e-3, 1e-6, 1e-9],
                delta: vec![1e-2, 1e-4, 1e-8],
                ..base
            },
        }
    }

    /// Fills unset fields from the defaults of `fallback` (or the file's own
    /// experiment).
    pub fn from_partial(p: PartialConfig, fallback: Option<ExperimentId>) -> Result<Self> {
        let id = p
            .experiment
            .or(fallback)
            .ok_or_else(|| Error::InvalidParameter("config names no experiment".into()))?;
        let d = Self::defaults(id);
        let cfg = Self {
            experiment: id,
            n: p.n.unwrap_or(d.n),
            eps: p.eps.unwrap_or(d.eps),
            eta: p.eta.unwrap_or(d.eta),
            outliers: p.outliers.unwrap_or(d.outliers),
            nu: p.nu.unwrap_or(d.nu),
            delta: p.delta.unwrap_or(d.delta),
            seed: p.seed.unwrap_or(d.seed),
            max_iter: p.max_iter.unwrap_or(d.max_iter),
            budget_secs: p.budget_secs.or(d.budget_secs),
            domain: p.domain.unwrap_or(d.domain),
            chart: p.chart.unwrap_or(d.chart),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidParameter(format!("{}: {what}", self.experiment)));
        if self.eps.is_empty() || self.eps.iter().any(|&e| !(e > 0.0)) {
            return bad("eps grid must be nonempty and positive");
        }
        if self.max_iter == 0 {
            return bad("max_iter must be positive");
        }
        if self.budget_secs.is_some_and(|b| !(b > 0.0)) {
            return bad("budget_secs must be positive");
        }
        match self.experiment {
            ExperimentId::OutlierIndependence => {
                if self.n.is_empty() || self.outliers.is_empty() || self.eta.is_empty() {
                    return bad("n, eta and outliers grids must be nonempty");
                }
                if self.n.iter().any(|&n| n < 3) {
                    return bad("n must be at least 3");
                }
                if self.eta.iter().chain(&self.outliers).any(|&x| !(x > 0.0)) {
                    return bad("eta and outliers must be positive");
                }
            }
            ExperimentId::PrescaleAcceleration => {
                if self.n.is_empty() || self.n.iter().any(|&n| n < 10 || n % 10 != 0) {
                    return bad("n grid must be nonempty multiples of 10");
                }
            }
            ExperimentId::PhaseTransition => {
                if self.n.is_empty() || self.nu.is_empty() || self.n.iter().any(|&n| n < 5) {
                    return bad("n (>= 5) and nu grids must be nonempty");
                }
            }
            ExperimentId::CriticalBoundary => {}
            ExperimentId::NuDependence => {
                if self.nu.is_empty() && self.delta.is_empty() {
                    return bad("nu or delta grid must be nonempty");
                }
                if !self.nu.is_empty() && (self.n.is_empty() || self.n.iter().any(|&n| n < 5)) {
                    return bad("n grid must be nonempty (n >= 5) for the nu sweep");
                }
            }
        }
        Ok(())
    }
}

/// One result row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellRow {
    pub cell: usize,
    pub experiment: String,
    pub family: String,
    pub n: usize,
    pub eps: f64,
    pub param: String,
    pub value: f64,
    pub variant: String,
    pub iterations: Option<usize>,
    pub final_error: Option<f64>,
    pub converged: bool,
    /// `ok`, `max_iter`, `budget` or `error: …`.
    pub status: String,
    pub nu: Option<f64>,
    pub gamma_sum: Option<f64>,
    pub kappa_margin: Option<f64>,
    pub detail: String,
}

impl CellRow {
    pub fn is_failure(&self) -> bool {
        self.status != "ok"
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingRow {
    pub cell: usize,
    pub wall_secs: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub rows: Vec<CellRow>,
    pub timings: Vec<TimingRow>,
}

impl ExperimentResult {
    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| r.is_failure()).count()
    }

    pub fn to_csv(&self) -> String {
        to_csv(&self.rows)
    }

    pub fn timings_csv(&self) -> String {
        to_csv(&self.timings)
    }

    /// Iterations against the swept parameter, one series per variant and eps.
    pub fn chart(&self) -> Chart {
        let by_n = matches!(self.config.experiment, ExperimentId::PrescaleAcceleration);
        let mut series: Vec<Series> = Vec::new();
        for r in &self.rows {
            let Some(it) = r.iterations else { continue };
            let label = format!("{} {} eps={:e}", r.family, r.variant, r.eps);
            let x = if by_n { r.n as f64 } else { r.value };
            match series.iter_mut().find(|s| s.label == label) {
                Some(s) => s.points.push((x, it as f64)),
                None => series.push(Series { label, points: vec![(x, it as f64)] }),
            }
        }
        Chart {
            title: self.config.experiment.name().to_string(),
            x_label: if by_n { "n".into() } else { "parameter".into() },
            y_label: "iterations".into(),
            log_x: !by_n,
            log_y: false,
            series,
        }
    }
}

fn to_csv<T: Serialize>(rows: &[T]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf8 csv")
}

enum Job {
    Scale(Box<dyn Fn() -> Result<ScalingInstance> + Send + Sync>),
    /// Log-domain EOT run on a cost matrix with uniform targets.
    Eot(Box<dyn Fn() -> Result<(EotProblem, f64)> + Send + Sync>),
}

struct Cell {
    family: Family,
    n: usize,
    eps: f64,
    param: &'static str,
    value: f64,
    variant: &'static str,
    detail: String,
    job: Job,
}

/// Base cost in `[0, 2]` with one outlier at `(0, 0)`, as a scaled cost `ηC`.
pub fn outlier_cost(n: usize, outlier: f64, seed: u64) -> Matrix {
    let mut rng = rng_from_seed(seed);
    let mut data: Vec<f64> = (0..n * n).map(|_| rng.gen_range(0.0..=2.0)).collect();
    data[0] = outlier;
    Matrix::cost(n, n, data).expect("finite nonnegative cost")
}

/// Dense random instance whose last entry is pushed down to `nu`.
pub fn dense_with_small_entry(n: usize, nu_value: f64, seed: u64) -> Result<ScalingInstance> {
    let kind = RandomFamily::Dense { gamma: 0.7, gamma_prime: 0.7, rho: 0.5 };
    let base = gen_random(&kind, n, n, false, seed)?;
    let mut data = base.matrix().as_slice().to_vec();
    *data.last_mut().expect("nonempty") = nu_value;
    ScalingInstance::new(Matrix::new(n, n, data)?, Marginals::ones(n, n)?)
}

fn prescaled(inst: ScalingInstance) -> Result<ScalingInstance> {
    let m = prescale(inst.matrix(), inst.targets())?;
    ScalingInstance::new(m, inst.targets().clone())
}

fn cells(cfg: &ExperimentConfig) -> Vec<Cell> {
    let mut out = Vec::new();
    match cfg.experiment {
        ExperimentId::OutlierIndependence => {
            for &n in &cfg.n {
                for &eta in &cfg.eta {
                    for &mag in &cfg.outliers {
                        for &eps in &cfg.eps {
                            let seed = cfg.seed.wrapping_add(n as u64);
                            out.push(Cell {
                                family: Family::RandomDense,
                                n,
                                eps,
                                param: "outlier",
                                value: mag,
                                variant: "eot",
                                detail: format!("eta={eta:e}"),
                                job: Job::Eot(Box::new(move || {
                                    let scaled = outlier_cost(n, mag, seed);
                                    let cost = scaled.scaled(1.0 / eta);
                                    Ok((EotProblem::new(cost, eta, Marginals::uniform(n, n)?, false)?, 2.0))
                                })),
                            });
                        }
                    }
                }
            }
        }
        ExperimentId::PrescaleAcceleration => {
            for &n in &cfg.n {
                for &eps in &cfg.eps {
                    for variant in ["unscaled", "prescaled"] {
                        out.push(Cell {
                            family: Family::Thm71Dense,
                            n,
                            eps,
                            param: "n",
                            value: n as f64,
                            variant,
                            detail: String::new(),
                            job: Job::Scale(Box::new(move || {
                                let inst = gen_thm71(n)?;
                                if variant == "prescaled" {
                                    prescaled(inst)
                                } else {
                                    Ok(inst)
                                }
                            })),
                        });
                    }
                }
            }
        }
        ExperimentId::PhaseTransition => {
            for &n in &cfg.n {
                for &nu_value in &cfg.nu {
                    for &eps in &cfg.eps {
                        let (t, s) = (2 * n / 5, 3 * n / 5);
                        out.push(Cell {
                            family: Family::Thm61Block,
                            n,
                            eps,
                            param: "nu",
                            value: nu_value,
                            variant: "sub_dense",
                            detail: format!("t={t} s={s}"),
                            job: Job::Scale(Box::new(move || Ok(gen_thm61(n, s, t, nu_value)?.instance))),
                        });
                        let seed = cfg.seed.wrapping_add(n as u64);
                        out.push(Cell {
                            family: Family::RandomDense,
                            n,
                            eps,
                            param: "nu",
                            value: nu_value,
                            variant: "dense",
                            detail: "gamma=0.7 gamma_prime=0.7 rho=0.5".into(),
                            job: Job::Scale(Box::new(move || dense_with_small_entry(n, nu_value, seed))),
                        });
                    }
                }
            }
        }
        ExperimentId::CriticalBoundary => {
            let mut rng = rng_from_seed(cfg.seed);
            let mut pairs = vec![(0.5, 0.1)];
            while pairs.len() < 4 {
                let (p, q): (f64, f64) = (rng.gen_range(0.0..=0.5), rng.gen_range(0.0..=0.5));
                if (p - q).abs() > 0.05 && p + q > 0.05 && (2.0 * (p + q) - 1.0).abs() > 0.05 {
                    pairs.push((p, q));
                }
            }
            for (idx, &(p, q)) in pairs.iter().enumerate() {
                for &eps in &cfg.eps {
                    out.push(Cell {
                        family: Family::Critical2x2,
                        n: 2,
                        eps,
                        param: "pair",
                        value: idx as f64,
                        variant: "sk",
                        detail: format!("p={p:e} q={q:e} bound={}", critical_bound(eps)),
                        job: Job::Scale(Box::new(move || gen_critical2x2(p, q))),
                    });
                }
            }
        }
        ExperimentId::NuDependence => {
            for &delta in &cfg.delta {
                for &eps in &cfg.eps {
                    out.push(Cell {
                        family: Family::Tight2x2,
                        n: 2,
                        eps,
                        param: "delta",
                        value: delta,
                        variant: "sk",
                        detail: format!("neg_ln_delta={:e}", -delta.ln()),
                        job: Job::Scale(Box::new(move || gen_tight2x2(1.0, delta, delta, 1.0))),
                    });
                }
            }
            for &n in &cfg.n {
                for &nu_value in &cfg.nu {
                    for &eps in &cfg.eps {
                        let (t, s) = (2 * n / 5, 3 * n / 5);
                        out.push(Cell {
                            family: Family::Thm61Block,
                            n,
                            eps,
                            param: "nu",
                            value: nu_value,
                            variant: "sk",
                            detail: format!("t={t} s={s}"),
                            job: Job::Scale(Box::new(move || Ok(gen_thm61(n, s, t, nu_value)?.instance))),
                        });
                    }
                }
            }
        }
    }
    out
}

fn status_of(stop: StopReason) -> &'static str {
    match stop {
        StopReason::Converged => "ok",
        StopReason::MaxIter => "max_iter",
        StopReason::Deadline => "budget",
    }
}

fn run_cell(idx: usize, cell: &Cell, cfg: &ExperimentConfig) -> (CellRow, TimingRow) {
    let start = Instant::now();
    let deadline = cfg.budget_secs.map(|b| start + Duration::from_secs_f64(b));
    let mut row = CellRow {
        cell: idx,
        experiment: cfg.experiment.name().to_string(),
        family: cell.family.name().to_string(),
        n: cell.n,
        eps: cell.eps,
        param: cell.param.to_string(),
        value: cell.value,
        variant: cell.variant.to_string(),
        iterations: None,
        final_error: None,
        converged: false,
        status: String::new(),
        nu: None,
        gamma_sum: None,
        kappa_margin: None,
        detail: cell.detail.clone(),
    };
    let result: Result<()> = (|| {
        match &cell.job {
            Job::Scale(build) => {
                let inst = build()?;
                row.nu = Some(nu(inst.matrix()));
                row.gamma_sum = Some(best_rho(inst.matrix(), inst.targets()).sum());
                let opts = TraceOptions { deadline, ..TraceOptions::default() };
                let out = sk_run(&inst, cell.eps, cfg.max_iter, &opts)?;
                row.iterations = out.iterations();
                row.final_error = Some(out.final_error());
                row.converged = out.converged;
                row.status = status_of(out.stop).to_string();
            }
            Job::Eot(build) => {
                let (problem, rho) = build()?;
                let scaled = problem.cost.scaled(problem.eta);
                row.kappa_margin = Some(well_bounded(&scaled, &problem.targets, rho).kappa_margin);
                let (iterations, final_error, converged, stop) = match cfg.domain {
                    Domain::Log => {
                        let lk = LogMatrix::kernel(&problem.cost, problem.eta);
                        let out = log_sk_run(&lk, &problem.targets, cell.eps, cfg.max_iter, None, deadline)?;
                        let err = out.trace.last().map_or(f64::INFINITY, |r| r.total_err);
                        let it = if out.converged { out.trace.last().map(|r| r.k) } else { None };
                        (it, err, out.converged, out.stop)
                    }
                    d => {
                        let out = solve_eot(&problem, cell.eps, cfg.max_iter, d)?;
                        let err = out.trace.last().map_or(f64::INFINITY, |r| r.total_err);
                        (out.iterations(), err, out.converged, out.stop)
                    }
                };
                row.iterations = iterations;
                row.final_error = Some(final_error);
                row.converged = converged;
                row.status = status_of(stop).to_string();
            }
        }
        Ok(())
    })();
    if let Err(e) = result {
        row.status = format!("error: {e}");
    }
    (row, TimingRow { cell: idx, wall_secs: start.elapsed().as_secs_f64() })
}

/// Runs every cell, in parallel on `threads` workers (0 = rayon default).
pub fn run_experiment(cfg: &ExperimentConfig, threads: usize) -> Result<ExperimentResult> {
    cfg.validate()?;
    let cells = cells(cfg);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?;
    let mut results: Vec<(CellRow, TimingRow)> =
        pool.install(|| cells.par_iter().enumerate().map(|(i, c)| run_cell(i, c, cfg)).collect());
    results.sort_by_key(|(r, _)| r.cell);
    let (rows, timings) = results.into_iter().unzip();
    Ok(ExperimentResult { config: cfg.clone(), rows, timings })
}
