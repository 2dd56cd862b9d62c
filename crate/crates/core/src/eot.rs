//! Entropic optimal transport: Gibbs kernels, pre-scaling and a log-domain
//! SK engine for kernels that underflow in floating point.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Axis, Error, Result};
use crate::matrix::{Marginals, Matrix, ScalingInstance};
use crate::scaling::{sk_run, SkTrace, StopReason, TraceOptions, TraceRecord};

/// Auto mode uses the direct engine when `η · max finite C` is at most this.
pub const DIRECT_DOMAIN_LIMIT: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Auto,
    Direct,
    Log,
}

impl std::str::FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(Domain::Auto),
            "direct" => Ok(Domain::Direct),
            "log" => Ok(Domain::Log),
            _ => Err(Error::InvalidParameter(format!("unknown domain {s:?} (auto, direct, log)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EotProblem {
    pub cost: Matrix,
    pub eta: f64,
    pub targets: Marginals,
    pub prescale: bool,
}

impl EotProblem {
    pub fn new(cost: Matrix, eta: f64, targets: Marginals, prescale: bool) -> Result<Self> {
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(Error::InvalidParameter(format!("eta must be positive and finite, got {eta}")));
        }
        if targets.dims() != cost.shape() {
            return Err(Error::DimensionMismatch(format!(
                "targets {:?} for a {:?} cost",
                targets.dims(),
                cost.shape()
            )));
        }
        if cost.as_slice().iter().any(|c| c.is_nan() || *c < 0.0) {
            return Err(Error::InvalidMatrix("cost entries must be nonnegative".into()));
        }
        Ok(Self { cost, eta, targets, prescale })
    }

    /// `η · max C` over finite entries.
    pub fn scaled_cost_range(&self) -> f64 {
        self.eta * self.cost.as_slice().iter().copied().filter(|c| c.is_finite()).fold(0.0, f64::max)
    }
}

/// Log-domain scalers: `P_ij = exp(f_i − η C_ij + g_j)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DualPotentials {
    pub f: Vec<f64>,
    pub g: Vec<f64>,
}

/// Entrywise `exp(−η C)`, with `+∞` costs mapped to `0`.
pub fn build_kernel(cost: &Matrix, eta: f64) -> Result<Matrix> {
    let data: Vec<f64> = cost.as_slice().iter().map(|&c| (-eta * c).exp()).collect();
    if data.iter().all(|&k| k == 0.0) {
        return Err(Error::AllZeroKernel);
    }
    Ok(Matrix::from_raw(cost.rows(), cost.cols(), data))
}

/// Multiplies entry `(i, j)` by `u_i · v_j`.
pub fn prescale(kernel: &Matrix, targets: &Marginals) -> Result<Matrix> {
    kernel.diag_scale(targets.u(), targets.v())
}

/// Dense matrix of logarithms; `−∞` encodes a zero entry.
#[derive(Debug, Clone, PartialEq)]
pub struct LogMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl LogMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!("{} log entries for {rows}x{cols}", data.len())));
        }
        if data.iter().any(|x| x.is_nan() || *x == f64::INFINITY) {
            return Err(Error::InvalidMatrix("log entries must be finite or -inf".into()));
        }
        Ok(Self { rows, cols, data })
    }

    /// Entrywise logarithm of a nonnegative matrix.
    pub fn from_matrix(m: &Matrix) -> Self {
        Self { rows: m.rows(), cols: m.cols(), data: m.as_slice().iter().map(|x| x.ln()).collect() }
    }

    /// `−η C`.
    pub fn kernel(cost: &Matrix, eta: f64) -> Self {
        Self { rows: cost.rows(), cols: cost.cols(), data: cost.as_slice().iter().map(|&c| -eta * c).collect() }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Adds `ln u_i + ln v_j` to entry `(i, j)`.
    pub fn prescaled(&self, targets: &Marginals) -> Self {
        let lu: Vec<f64> = targets.u().iter().map(|x| x.ln()).collect();
        let lv: Vec<f64> = targets.v().iter().map(|x| x.ln()).collect();
        let mut data = self.data.clone();
        for (i, row) in data.chunks_mut(self.cols).enumerate() {
            for (x, l) in row.iter_mut().zip(&lv) {
                *x += lu[i] + l;
            }
        }
        Self { rows: self.rows, cols: self.cols, data }
    }

    /// Entrywise exponential (may contain zeros from underflow).
    pub fn exp(&self) -> Matrix {
        Matrix::from_raw(self.rows, self.cols, self.data.iter().map(|x| x.exp()).collect())
    }

    /// Same layout as the dense text form, with `-inf` for zero entries.
    pub fn to_text(&self) -> String {
        let mut s = format!("{} {}\n", self.rows, self.cols);
        for row in self.data.chunks(self.cols) {
            let line: Vec<String> = row.iter().map(|x| format!("{x:e}")).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut tokens = text.split_whitespace();
        let mut dim = |what: &str| -> Result<usize> {
            tokens
                .next()
                .ok_or_else(|| Error::Parse(format!("missing {what}")))?
                .parse()
                .map_err(|e| Error::Parse(format!("bad {what}: {e}")))
        };
        let (m, n) = (dim("row count")?, dim("column count")?);
        let data: Vec<f64> = tokens
            .map(|t| t.parse::<f64>().map_err(|e| Error::Parse(format!("bad log entry {t:?}: {e}"))))
            .collect::<Result<_>>()?;
        if data.len() != m * n {
            return Err(Error::Parse(format!("expected {} entries, found {}", m * n, data.len())));
        }
        Self::new(m, n, data)
    }
}

/// Normalizes every row (or column) so its sum of exponentials equals the
/// target, using a max-then-sum log-sum-exp. Returns the log factors applied.
pub fn logsumexp_normalize(lm: &mut LogMatrix, axis: Axis, targets: &[f64]) -> Result<Vec<f64>> {
    let (m, n) = lm.shape();
    match axis {
        Axis::Row => {
            if targets.len() != m {
                return Err(Error::DimensionMismatch(format!("{} row targets for {m} rows", targets.len())));
            }
            let mut deltas = Vec::with_capacity(m);
            for (i, row) in lm.data.chunks_mut(n).enumerate() {
                let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if mx == f64::NEG_INFINITY {
                    return Err(Error::EmptySupport { index: i });
                }
                let s = row.iter().fold(0.0, |acc, &x| acc + (x - mx).exp());
                let delta = targets[i].ln() - (mx + s.ln());
                row.iter_mut().for_each(|x| *x += delta);
                deltas.push(delta);
            }
            Ok(deltas)
        }
        Axis::Column => {
            if targets.len() != n {
                return Err(Error::DimensionMismatch(format!("{} column targets for {n} columns", targets.len())));
            }
            let mut mx = vec![f64::NEG_INFINITY; n];
            for row in lm.data.chunks(n) {
                for (a, &x) in mx.iter_mut().zip(row) {
                    *a = a.max(x);
                }
            }
            if let Some(j) = mx.iter().position(|&x| x == f64::NEG_INFINITY) {
                return Err(Error::EmptySupport { index: j });
            }
            let mut s = vec![0.0; n];
            for row in lm.data.chunks(n) {
                for ((acc, &x), &c) in s.iter_mut().zip(row).zip(&mx) {
                    *acc += (x - c).exp();
                }
            }
            let deltas: Vec<f64> =
                targets.iter().zip(&mx).zip(&s).map(|((t, c), s)| t.ln() - (c + s.ln())).collect();
            for row in lm.data.chunks_mut(n) {
                row.iter_mut().zip(&deltas).for_each(|(x, d)| *x += d);
            }
            Ok(deltas)
        }
    }
}

/// Result of [`log_sk_run`].
#[derive(Debug, Clone)]
pub struct LogSkOutcome {
    pub state: LogMatrix,
    /// Cumulative log row factors, starting from `f0`.
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub trace: SkTrace,
    pub converged: bool,
    pub stop: StopReason,
}

/// SK on a log-domain matrix, with the same parity and stopping rule as the
/// direct engine. `f0`/`g0` seed the reported potentials.
pub fn log_sk_run(
    init: &LogMatrix,
    targets: &Marginals,
    eps: f64,
    max_iter: usize,
    potentials0: Option<DualPotentials>,
    deadline: Option<Instant>,
) -> Result<LogSkOutcome> {
    if !(eps > 0.0) {
        return Err(Error::InvalidParameter(format!("eps must be positive, got {eps}")));
    }
    let (m, n) = init.shape();
    if targets.dims() != (m, n) {
        return Err(Error::DimensionMismatch(format!("targets {:?} for a {m}x{n} matrix", targets.dims())));
    }
    let DualPotentials { mut f, mut g } = potentials0.unwrap_or(DualPotentials { f: vec![0.0; m], g: vec![0.0; n] });
    let mut state = init.clone();
    let mut trace = SkTrace::default();
    let mut stop = StopReason::MaxIter;
    for k in 0..max_iter {
        if k % 2 == 0 {
            let d = logsumexp_normalize(&mut state, Axis::Row, targets.u())?;
            f.iter_mut().zip(&d).for_each(|(x, d)| *x += d);
        } else {
            let d = logsumexp_normalize(&mut state, Axis::Column, targets.v())?;
            g.iter_mut().zip(&d).for_each(|(x, d)| *x += d);
        }
        let rec = TraceRecord::from_matrix(k, &state.exp(), targets, false);
        let done = rec.total_err <= eps;
        trace.records.push(rec);
        if done {
            stop = StopReason::Converged;
            break;
        }
        if deadline.is_some_and(|d| Instant::now() >= d) {
            stop = StopReason::Deadline;
            break;
        }
    }
    Ok(LogSkOutcome { state, f, g, trace, converged: stop == StopReason::Converged, stop })
}

#[derive(Debug, Clone)]
pub struct EotSolution {
    pub plan: Matrix,
    pub potentials: DualPotentials,
    pub trace: SkTrace,
    pub converged: bool,
    pub stop: StopReason,
    /// Engine that produced the result (never `Auto`).
    pub domain: Domain,
}

impl EotSolution {
    pub fn iterations(&self) -> Option<usize> {
        if self.converged {
            self.trace.last().map(|r| r.k)
        } else {
            None
        }
    }
}

/// Engine chosen by `Domain::Auto`.
pub fn select_domain(problem: &EotProblem) -> Domain {
    if problem.scaled_cost_range() <= DIRECT_DOMAIN_LIMIT {
        Domain::Direct
    } else {
        Domain::Log
    }
}

/// Solves the regularized problem by SK on `exp(−ηC)` (pre-scaled by
/// `u_i v_j` if requested). Auto mode falls back to the log engine if the
/// direct engine reports `NonFinite`.
pub fn solve_eot(problem: &EotProblem, eps: f64, max_iter: usize, domain: Domain) -> Result<EotSolution> {
    match domain {
        Domain::Direct => solve_direct(problem, eps, max_iter),
        Domain::Log => solve_log(problem, eps, max_iter),
        Domain::Auto => match select_domain(problem) {
            Domain::Direct => match solve_direct(problem, eps, max_iter) {
                Err(Error::NonFinite { .. }) => solve_log(problem, eps, max_iter),
                other => other,
            },
            _ => solve_log(problem, eps, max_iter),
        },
    }
}

fn initial_potentials(problem: &EotProblem) -> DualPotentials {
    let (m, n) = problem.cost.shape();
    if problem.prescale {
        DualPotentials {
            f: problem.targets.u().iter().map(|x| x.ln()).collect(),
            g: problem.targets.v().iter().map(|x| x.ln()).collect(),
        }
    } else {
        DualPotentials { f: vec![0.0; m], g: vec![0.0; n] }
    }
}

fn solve_direct(problem: &EotProblem, eps: f64, max_iter: usize) -> Result<EotSolution> {
    let kernel = build_kernel(&problem.cost, problem.eta)?;
    let underflowed = kernel.as_slice().iter().zip(problem.cost.as_slice()).any(|(&k, &c)| k == 0.0 && c.is_finite());
    if underflowed {
        return Err(Error::NonFinite { step: 0 });
    }
    let start = if problem.prescale { prescale(&kernel, &problem.targets)? } else { kernel };
    let instance = ScalingInstance::new(start, problem.targets.clone())?;
    let out = sk_run(&instance, eps, max_iter, &TraceOptions::default())?;
    let p0 = initial_potentials(problem);
    let f = p0.f.iter().zip(out.state.row_scalers()).map(|(a, x)| a + x.ln()).collect();
    let g = p0.g.iter().zip(out.state.col_scalers()).map(|(a, y)| a + y.ln()).collect();
    Ok(EotSolution {
        plan: out.state.into_matrix(),
        potentials: DualPotentials { f, g },
        trace: out.trace,
        converged: out.converged,
        stop: out.stop,
        domain: Domain::Direct,
    })
}

fn solve_log(problem: &EotProblem, eps: f64, max_iter: usize) -> Result<EotSolution> {
    let lk = LogMatrix::kernel(&problem.cost, problem.eta);
    let start = if problem.prescale { lk.prescaled(&problem.targets) } else { lk };
    let out = log_sk_run(&start, &problem.targets, eps, max_iter, Some(initial_potentials(problem)), None)?;
    Ok(EotSolution {
        plan: out.state.exp(),
        potentials: DualPotentials { f: out.f, g: out.g },
        trace: out.trace,
        converged: out.converged,
        stop: out.stop,
        domain: Domain::Log,
    })
}

/// Largest relative gap between the plan and `exp(f_i − η C_ij + g_j)`.
pub fn factorization_error(solution: &EotSolution, cost: &Matrix, eta: f64) -> f64 {
    let (m, n) = cost.shape();
    let mut worst = 0.0f64;
    for i in 0..m {
        for j in 0..n {
            let p = solution.plan.get(i, j);
            let q = (solution.potentials.f[i] - eta * cost.get(i, j) + solution.potentials.g[j]).exp();
            let scale = p.abs().max(q.abs());
            if scale > 0.0 {
                worst = worst.max((p - q).abs() / scale);
            }
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::E;

    fn cost(rows: &[&[f64]]) -> Matrix {
        Matrix::cost_from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn half() -> Marginals {
        Marginals::new(vec![0.5, 0.5], vec![0.5, 0.5]).unwrap()
    }

    #[test]
    fn kernel_examples() {
        let k = build_kernel(&cost(&[&[0.0, 0.0], &[0.0, 0.0]]), 3.0).unwrap();
        assert_eq!(k.as_slice(), &[1.0; 4]);
        let k = build_kernel(&cost(&[&[0.0, 1.0], &[1.0, 0.0]]), 1.0).unwrap();
        assert_eq!(k.as_slice(), &[1.0, (-1.0f64).exp(), (-1.0f64).exp(), 1.0]);
        let k = build_kernel(&cost(&[&[0.0, f64::INFINITY], &[2.0, 0.0]]), 1.0).unwrap();
        assert_eq!(k.get(0, 1), 0.0);
        assert_eq!(build_kernel(&cost(&[&[1e4, 1e4]]), 1.0), Err(Error::AllZeroKernel));
    }

    #[test]
    fn prescale_example() {
        let t = Marginals::new(vec![0.9, 0.1], vec![0.5, 0.5]).unwrap();
        let p = prescale(&Matrix::filled(2, 2, 1.0).unwrap(), &t).unwrap();
        assert_eq!(p.as_slice(), &[0.45, 0.45, 0.05, 0.05]);
    }

    #[test]
    fn logsumexp_single_row() {
        let mut lm = LogMatrix::new(1, 2, vec![0.0, 0.0]).unwrap();
        logsumexp_normalize(&mut lm, Axis::Row, &[1.0]).unwrap();
        assert_eq!(lm.as_slice(), &[0.5f64.ln(); 2]);
        let mut dead = LogMatrix::new(2, 2, vec![0.0, f64::NEG_INFINITY, 0.0, f64::NEG_INFINITY]).unwrap();
        assert_eq!(logsumexp_normalize(&mut dead, Axis::Column, &[1.0, 1.0]), Err(Error::EmptySupport { index: 1 }));
    }

    #[test]
    fn zero_cost_gives_product_plan() {
        let t = Marginals::new(vec![0.2, 0.8], vec![0.5, 0.25, 0.25]).unwrap();
        let p = EotProblem::new(Matrix::cost(2, 3, vec![0.0; 6]).unwrap(), 1.0, t, false).unwrap();
        for d in [Domain::Direct, Domain::Log] {
            let s = solve_eot(&p, 1e-12, 10, d).unwrap();
            assert!(s.iterations().unwrap() <= 1);
            for (x, y) in s.plan.as_slice().iter().zip([0.1, 0.05, 0.05, 0.4, 0.2, 0.2]) {
                assert!((x - y).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn two_point_problem() {
        let p = EotProblem::new(cost(&[&[0.0, 1.0], &[1.0, 0.0]]), 1.0, half(), false).unwrap();
        let s = solve_eot(&p, 1e-12, 100, Domain::Auto).unwrap();
        assert_eq!(s.domain, Domain::Direct);
        let a = E / (2.0 * (1.0 + E));
        let b = 0.5 - a;
        for (x, y) in s.plan.as_slice().iter().zip([a, b, b, a]) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(factorization_error(&s, &p.cost, 1.0) < 1e-8);
    }

    #[test]
    fn large_cost_needs_the_log_engine() {
        let c = cost(&[&[0.0, 1e4, 1.0], &[1e4, 0.0, 2.0], &[1.0, 3.0, 0.0]]);
        let t = Marginals::uniform(3, 3).unwrap();
        let p = EotProblem::new(c, 1.0, t, true).unwrap();
        assert!(matches!(solve_eot(&p, 1e-9, 1000, Domain::Direct), Err(Error::NonFinite { .. })));
        let s = solve_eot(&p, 1e-9, 1000, Domain::Auto).unwrap();
        assert_eq!(s.domain, Domain::Log);
        assert!(s.converged);
        assert!(factorization_error(&s, &p.cost, 1.0) < 1e-8);
    }

    #[test]
    fn engines_agree_on_a_moderate_instance() {
        let c = cost(&[&[0.1, 2.0, 0.7], &[1.3, 0.0, 0.4], &[2.2, 0.9, 0.3]]);
        let t = Marginals::new(vec![0.2, 0.3, 0.5], vec![0.4, 0.4, 0.2]).unwrap();
        let p = EotProblem::new(c, 3.0, t, true).unwrap();
        let d = solve_eot(&p, 1e-300, 50, Domain::Direct).unwrap();
        let l = solve_eot(&p, 1e-300, 50, Domain::Log).unwrap();
        for (x, y) in d.plan.as_slice().iter().zip(l.plan.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in d.potentials.f.iter().zip(&l.potentials.f) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn domain_parses() {
        assert_eq!("log".parse::<Domain>().unwrap(), Domain::Log);
        assert!("gpu".parse::<Domain>().is_err());
    }

    #[test]
    fn log_matrix_text_round_trip() {
        let lm = LogMatrix::new(2, 2, vec![0.0, f64::NEG_INFINITY, -1e5, 0.25]).unwrap();
        assert_eq!(LogMatrix::parse_text(&lm.to_text()).unwrap(), lm);
        assert!(LogMatrix::parse_text("2 2 0 0 0").is_err());
    }
}
