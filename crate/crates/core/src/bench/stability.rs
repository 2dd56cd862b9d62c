//! Audit of row sums, column sums and entries of a `(1,1)`-scaling run
//! against the ranges that hold for dense inputs once the error is small.

use serde::Serialize;

use crate::diagnostics::DensityReport;
use crate::matrix::{Marginals, Matrix};
use crate::scaling::marginal_error_l1;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepAudit {
    pub k: usize,
    pub min_line_sum: f64,
    pub max_line_sum: f64,
    pub max_entry: f64,
    /// Smallest of `min sum / lower`, `upper / max sum`, `entry bound / max entry`;
    /// below 1 means a violation.
    pub margin: f64,
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityAudit {
    pub applicable: bool,
    /// Why the audit was skipped, if it was.
    pub reason: Option<String>,
    pub lower: f64,
    pub upper: f64,
    pub entry_bound: f64,
    pub steps: Vec<StepAudit>,
    pub violations: usize,
}

impl StabilityAudit {
    fn skipped(reason: &str) -> Self {
        Self {
            applicable: false,
            reason: Some(reason.to_string()),
            lower: f64::NAN,
            upper: f64::NAN,
            entry_bound: f64::NAN,
            steps: Vec::new(),
            violations: 0,
        }
    }
}

/// Checks `ρ²(γ+γ′−1)/10 ≤ r_i, c_j ≤ 10/(ρ²(γ+γ′−1))` and
/// `A_ij ≤ 10/(ρ²(γ+γ′−1)n)` on every step `k ≥ 2` whose errors at `k−2`,
/// `k−1` and `k` are all at most `(9n/10)(1 − 1/(γ+γ′))`.
///
/// `states[k]` is `A^(k)`. Runs that are not square `(1,1)`-scaling, or
/// whose density has `γ+γ′ ≤ 1`, report "precondition unmet".
pub fn structural_stability_audit(states: &[Matrix], targets: &Marginals, dens: &DensityReport) -> StabilityAudit {
    let Some(first) = states.first() else {
        return StabilityAudit::skipped("precondition unmet: empty trajectory");
    };
    let n = first.rows();
    let unit = targets.u().iter().chain(targets.v()).all(|&x| x == 1.0);
    if !first.is_square() || !unit {
        return StabilityAudit::skipped("precondition unmet: not a square (1,1)-scaling run");
    }
    let g = dens.gamma + dens.gamma_prime;
    if g <= 1.0 {
        return StabilityAudit::skipped("precondition unmet: gamma + gamma' <= 1");
    }
    let base = dens.rho * dens.rho * (g - 1.0);
    let (lower, upper) = (base / 10.0, 10.0 / base);
    let entry_bound = 10.0 / (base * n as f64);
    let threshold = 0.9 * n as f64 * (1.0 - 1.0 / g);
    let errors: Vec<f64> = states
        .iter()
        .map(|m| marginal_error_l1(m, targets).map(|(r, c)| r + c).unwrap_or(f64::INFINITY))
        .collect();
    let mut steps = Vec::new();
    for k in 2..states.len() {
        if errors[k - 2..=k].iter().any(|&e| e > threshold) {
            continue;
        }
        let m = &states[k];
        let sums: Vec<f64> = m.row_sums().into_iter().chain(m.col_sums()).collect();
        let lo = sums.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = sums.iter().copied().fold(0.0, f64::max);
        let mx = m.max_entry();
        let margin = (lo / lower).min(upper / hi).min(entry_bound / mx);
        steps.push(StepAudit { k, min_line_sum: lo, max_line_sum: hi, max_entry: mx, margin, ok: margin >= 1.0 });
    }
    let violations = steps.iter().filter(|s| !s.ok).count();
    StabilityAudit { applicable: true, reason: None, lower, upper, entry_bound, steps, violations }
}
