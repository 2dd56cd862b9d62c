//! Sinkhorn–Knopp iteration for general `(u, v)`-scaling.
//!
//! Step 0 row-normalizes to `u`, odd steps column-normalize to `v`, even
//! steps > 0 row-normalize again. The matrix produced by step `k` is `A^(k)`.
//! Convergence is declared at the smallest `k` whose marginal error
//! `‖r(A^(k)) − u‖₁ + ‖c(A^(k)) − v‖₁` is at most `eps`; that `k` is what
//! every caller reports as the iteration count (half-steps, not round trips).

use std::io::Write;
use std::time::Instant;

use crate::error::{Axis, Error, Result};
use crate::matrix::{fmt_real, sum, Marginals, Matrix, ScalingInstance};
use crate::permanent;

/// Largest dimension for which traces record the permanent.
pub const TRACE_PERMANENT_MAX_N: usize = 12;

pub const TRACE_CSV_HEADER: &str =
    "iter,row_err,col_err,total_err,min_rsum,max_rsum,min_csum,max_csum,min_entry,max_entry,permanent";

/// Iterate of the SK algorithm together with its cumulative diagonal scalers.
///
/// `current = diag(row_scalers) · A₀ · diag(col_scalers)` where `A₀` is the
/// input matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SkState {
    current: Matrix,
    steps: usize,
    row_scalers: Vec<f64>,
    col_scalers: Vec<f64>,
}

impl SkState {
    /// State before step 0: the raw input with unit scalers.
    pub fn new(matrix: Matrix) -> Self {
        let (m, n) = matrix.shape();
        Self { current: matrix, steps: 0, row_scalers: vec![1.0; m], col_scalers: vec![1.0; n] }
    }

    pub fn current(&self) -> &Matrix {
        &self.current
    }

    /// Number of normalizations applied so far.
    pub fn steps_done(&self) -> usize {
        self.steps
    }

    /// Index `k` of the iterate held, `None` before step 0.
    pub fn iteration(&self) -> Option<usize> {
        self.steps.checked_sub(1)
    }

    pub fn row_scalers(&self) -> &[f64] {
        &self.row_scalers
    }

    pub fn col_scalers(&self) -> &[f64] {
        &self.col_scalers
    }

    pub fn into_matrix(self) -> Matrix {
        self.current
    }

    /// Applies the next normalization in place.
    ///
    /// On `NonFinite` the state is left partially updated and must be discarded.
    pub fn advance(&mut self, targets: &Marginals) -> Result<()> {
        let (m, n) = self.current.shape();
        if targets.dims() != (m, n) {
            return Err(Error::DimensionMismatch(format!(
                "targets {:?} for a {m}x{n} iterate",
                targets.dims()
            )));
        }
        let k = self.steps;
        if k.is_multiple_of(2) {
            let sums = self.current.row_sums();
            let factors = normalizing_factors(&sums, targets.u(), Axis::Row)?;
            for (i, &f) in factors.iter().enumerate() {
                for a in self.current.row_mut(i) {
                    *a = scale_entry(*a, f, k)?;
                }
                self.row_scalers[i] *= f;
            }
        } else {
            let sums = self.current.col_sums();
            let factors = normalizing_factors(&sums, targets.v(), Axis::Column)?;
            for i in 0..m {
                for (a, &f) in self.current.row_mut(i).iter_mut().zip(&factors) {
                    *a = scale_entry(*a, f, k)?;
                }
            }
            for (y, f) in self.col_scalers.iter_mut().zip(&factors) {
                *y *= f;
            }
        }
        self.steps += 1;
        Ok(())
    }
}

fn normalizing_factors(sums: &[f64], targets: &[f64], axis: Axis) -> Result<Vec<f64>> {
    sums.iter()
        .zip(targets)
        .enumerate()
        .map(|(index, (&s, &t))| {
            if s == 0.0 {
                Err(Error::ZeroMarginal { axis, index })
            } else {
                Ok(t / s)
            }
        })
        .collect()
}

#[inline]
fn scale_entry(a: f64, f: f64, step: usize) -> Result<f64> {
    let b = a * f;
    if !b.is_finite() || (a > 0.0 && b == 0.0) {
        return Err(Error::NonFinite { step });
    }
    Ok(b)
}

/// Functional form of [`SkState::advance`]: returns the next state.
pub fn sk_step(state: &SkState, targets: &Marginals) -> Result<SkState> {
    let mut next = state.clone();
    next.advance(targets)?;
    Ok(next)
}

/// One trace row, describing `A^(k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub k: usize,
    pub row_err: f64,
    pub col_err: f64,
    pub total_err: f64,
    pub min_rsum: f64,
    pub max_rsum: f64,
    pub min_csum: f64,
    pub max_csum: f64,
    /// Smallest positive entry.
    pub min_entry: f64,
    pub max_entry: f64,
    pub permanent: Option<f64>,
}

impl TraceRecord {
    pub fn from_matrix(k: usize, m: &Matrix, targets: &Marginals, with_permanent: bool) -> Self {
        let rs = m.row_sums();
        let cs = m.col_sums();
        let row_err = l1_dev(&rs, targets.u());
        let col_err = l1_dev(&cs, targets.v());
        let permanent = (with_permanent && m.is_square() && m.rows() <= TRACE_PERMANENT_MAX_N)
            .then(|| permanent::permanent(m).ok())
            .flatten();
        Self {
            k,
            row_err,
            col_err,
            total_err: row_err + col_err,
            min_rsum: min_of(&rs),
            max_rsum: max_of(&rs),
            min_csum: min_of(&cs),
            max_csum: max_of(&cs),
            min_entry: m.min_positive().unwrap_or(0.0),
            max_entry: m.max_entry(),
            permanent,
        }
    }

    pub fn to_csv_line(&self) -> String {
        let perm = self.permanent.map(fmt_real).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.k,
            fmt_real(self.row_err),
            fmt_real(self.col_err),
            fmt_real(self.total_err),
            fmt_real(self.min_rsum),
            fmt_real(self.max_rsum),
            fmt_real(self.min_csum),
            fmt_real(self.max_csum),
            fmt_real(self.min_entry),
            fmt_real(self.max_entry),
            perm
        )
    }
}

/// Per-step records of one SK run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SkTrace {
    pub records: Vec<TraceRecord>,
}

impl SkTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn errors(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.total_err).collect()
    }

    pub fn last(&self) -> Option<&TraceRecord> {
        self.records.last()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(TRACE_CSV_HEADER);
        s.push('\n');
        for r in &self.records {
            s.push_str(&r.to_csv_line());
            s.push('\n');
        }
        s
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(self.to_csv().as_bytes())
    }
}

/// What to record while running.
#[derive(Debug, Clone, Default)]
pub struct TraceOptions {
    /// Record `per(A^(k))` when the matrix is square with `n ≤ 12`.
    pub permanent: bool,
    /// Keep every iterate (memory heavy; for audits).
    pub keep_states: bool,
    /// Stop early once this instant has passed.
    pub deadline: Option<Instant>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Converged,
    MaxIter,
    Deadline,
}

/// Result of [`sk_run`].
#[derive(Debug, Clone)]
pub struct SkOutcome {
    pub state: SkState,
    pub trace: SkTrace,
    pub converged: bool,
    pub stop: StopReason,
    /// Iterates `A^(0), A^(1), …` when `keep_states` was set.
    pub states: Vec<Matrix>,
}

impl SkOutcome {
    /// Smallest `k` with error ≤ eps, if the run converged.
    pub fn iterations(&self) -> Option<usize> {
        if self.converged {
            self.trace.last().map(|r| r.k)
        } else {
            None
        }
    }

    pub fn final_error(&self) -> f64 {
        self.trace.last().map_or(f64::INFINITY, |r| r.total_err)
    }
}

/// Runs SK until the marginal error drops to `eps` or `max_iter` steps were taken.
pub fn sk_run(instance: &ScalingInstance, eps: f64, max_iter: usize, opts: &TraceOptions) -> Result<SkOutcome> {
    if !(eps > 0.0) {
        return Err(Error::InvalidParameter(format!("eps must be positive, got {eps}")));
    }
    let targets = instance.targets();
    let mut state = SkState::new(instance.matrix().clone());
    let mut trace = SkTrace::default();
    let mut states = Vec::new();
    let mut stop = StopReason::MaxIter;
    for k in 0..max_iter {
        state.advance(targets)?;
        let rec = TraceRecord::from_matrix(k, state.current(), targets, opts.permanent);
        let done = rec.total_err <= eps;
        trace.records.push(rec);
        if opts.keep_states {
            states.push(state.current().clone());
        }
        if done {
            stop = StopReason::Converged;
            break;
        }
        if opts.deadline.is_some_and(|d| Instant::now() >= d) {
            stop = StopReason::Deadline;
            break;
        }
    }
    Ok(SkOutcome { state, trace, converged: stop == StopReason::Converged, stop, states })
}

/// Runs exactly `steps` normalizations, returning every iterate.
pub fn sk_iterates(instance: &ScalingInstance, steps: usize) -> Result<Vec<Matrix>> {
    let mut state = SkState::new(instance.matrix().clone());
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        state.advance(instance.targets())?;
        out.push(state.current().clone());
    }
    Ok(out)
}

/// `(‖r(m) − u‖₁, ‖c(m) − v‖₁)`, summed in index order.
pub fn marginal_error_l1(m: &Matrix, targets: &Marginals) -> Result<(f64, f64)> {
    if targets.dims() != m.shape() {
        return Err(Error::DimensionMismatch(format!("targets {:?} for shape {:?}", targets.dims(), m.shape())));
    }
    Ok((l1_dev(&m.row_sums(), targets.u()), l1_dev(&m.col_sums(), targets.v())))
}

fn l1_dev(sums: &[f64], targets: &[f64]) -> f64 {
    sums.iter().zip(targets).fold(0.0, |acc, (s, t)| acc + (s - t).abs())
}

fn min_of(xs: &[f64]) -> f64 {
    xs.iter().copied().fold(f64::INFINITY, f64::min)
}

fn max_of(xs: &[f64]) -> f64 {
    xs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Ratio of the smallest positive to the largest row-normalized entry.
///
/// Rows summing to zero are skipped.
pub fn nu(m: &Matrix) -> f64 {
    let mut lo = f64::INFINITY;
    let mut hi = 0.0f64;
    for i in 0..m.rows() {
        let row = m.row(i);
        let r = sum(row);
        if r <= 0.0 {
            continue;
        }
        for &a in row {
            let x = a / r;
            if x > 0.0 {
                lo = lo.min(x);
            }
            hi = hi.max(x);
        }
    }
    lo / hi
}

/// Standardization tolerance for [`accuracy_alpha`].
pub const STANDARDIZED_TOL: f64 = 1e-10;

/// Mean absolute deviation from 1 of the non-normalized marginal of a
/// standardized square matrix.
pub fn accuracy_alpha(m: &Matrix) -> Result<f64> {
    if !m.is_square() {
        return Err(Error::DimensionMismatch("accuracy is defined for square matrices".into()));
    }
    let n = m.rows() as f64;
    let rs = m.row_sums();
    let cs = m.col_sums();
    let unit = |xs: &[f64]| xs.iter().all(|x| (x - 1.0).abs() <= STANDARDIZED_TOL);
    let mean_dev = |xs: &[f64]| xs.iter().fold(0.0, |acc, x| acc + (x - 1.0).abs()) / n;
    if unit(&rs) {
        Ok(mean_dev(&cs))
    } else if unit(&cs) {
        Ok(mean_dev(&rs))
    } else {
        Err(Error::NotStandardized)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn half() -> Marginals {
        Marginals::new(vec![0.5, 0.5], vec![0.5, 0.5]).unwrap()
    }

    #[test]
    fn first_two_steps_by_hand() {
        let s0 = SkState::new(m(&[&[1.0, 1.0], &[1.0, 3.0]]));
        let s1 = sk_step(&s0, &half()).unwrap();
        assert_eq!(s1.current(), &m(&[&[0.25, 0.25], &[0.125, 0.375]]));
        assert_eq!(s1.iteration(), Some(0));
        // column sums (3/8, 5/8) → each scaled to 1/2
        let s2 = sk_step(&s1, &half()).unwrap();
        let cs = s2.current().col_sums();
        assert!((cs[0] - 0.5).abs() < 1e-15 && (cs[1] - 0.5).abs() < 1e-15);
        assert!((s2.current().get(0, 0) - 0.25 * 0.5 / 0.375).abs() < 1e-15);
    }

    #[test]
    fn normalized_input_is_a_fixed_point_of_step_zero() {
        let a = m(&[&[0.25, 0.25], &[0.125, 0.375]]);
        let s = sk_step(&SkState::new(a.clone()), &half()).unwrap();
        assert_eq!(s.current(), &a);
    }

    #[test]
    fn zero_marginal_and_underflow_are_reported() {
        let a = Matrix::from_raw(2, 2, vec![1.0, 0.0, 0.0, 0.0]);
        let err = SkState::new(a).advance(&half()).unwrap_err();
        assert_eq!(err, Error::ZeroMarginal { axis: Axis::Row, index: 1 });

        let a = m(&[&[1.0, 1e-300], &[1e-300, 1.0]]);
        let t = Marginals::new(vec![1e-30, 1.0], vec![0.5, 0.5]).unwrap();
        let err = SkState::new(a).advance(&t).unwrap_err();
        assert_eq!(err, Error::NonFinite { step: 0 });
    }

    #[test]
    fn marginal_error_examples() {
        let (r, c) = marginal_error_l1(&m(&[&[0.25, 0.25], &[0.125, 0.375]]), &half()).unwrap();
        assert_eq!((r, c), (0.0, 0.25));
        let t = Marginals::new(vec![0.5], vec![0.25, 0.25]).unwrap();
        let (r, c) = marginal_error_l1(&m(&[&[0.2, 0.3]]), &t).unwrap();
        assert!(r.abs() < 1e-16 && (c - 0.1).abs() < 1e-15);
    }

    #[test]
    fn nu_examples() {
        assert!((nu(&m(&[&[1.0, 2.0], &[3.0, 4.0]])) - 0.5).abs() < 1e-15);
        assert_eq!(nu(&Matrix::filled(3, 4, 2.5).unwrap()), 1.0);
        assert_eq!(nu(&m(&[&[1.0, 0.0], &[0.0, 1.0]])), 1.0);
    }

    #[test]
    fn alpha_examples() {
        assert_eq!(accuracy_alpha(&m(&[&[0.5, 0.5], &[0.5, 0.5]])).unwrap(), 0.0);
        assert_eq!(accuracy_alpha(&m(&[&[0.25, 0.75], &[0.25, 0.75]])).unwrap(), 0.5);
        assert_eq!(accuracy_alpha(&m(&[&[1.0, 2.0], &[3.0, 4.0]])), Err(Error::NotStandardized));
    }

    #[test]
    fn doubly_stochastic_converges_at_step_zero() {
        let inst = ScalingInstance::new(m(&[&[0.5, 0.5], &[0.5, 0.5]]), Marginals::ones(2, 2).unwrap()).unwrap();
        let out = sk_run(&inst, 1e-12, 10, &TraceOptions::default()).unwrap();
        assert_eq!(out.iterations(), Some(0));
        assert_eq!(out.final_error(), 0.0);
    }

    #[test]
    fn trace_csv_has_fixed_header() {
        let inst = ScalingInstance::new(m(&[&[1.0, 1.0], &[1.0, 3.0]]), half()).unwrap();
        let out = sk_run(&inst, 1e-9, 100, &TraceOptions { permanent: true, ..Default::default() }).unwrap();
        let csv = out.trace.to_csv();
        assert!(csv.starts_with(TRACE_CSV_HEADER));
        assert_eq!(csv.lines().count(), out.trace.len() + 1);
        assert!(out.trace.records.iter().all(|r| r.permanent.is_some()));
    }
}
