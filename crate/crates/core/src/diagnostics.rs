//! Structural diagnostics: density, well-boundedness, conditioning and
//! transportation feasibility of the support.

use serde::Serialize;

use crate::flow::FlowNetwork;
use crate::matrix::{sum, Marginals, Matrix, ScalingInstance};
use crate::scaling::nu;

/// Downward shift (relative) applied to candidate thresholds in [`best_rho`].
pub const RHO_SHIFT: f64 = 1e-12;
/// Maximum number of candidate thresholds evaluated by [`best_rho`].
pub const MAX_RHO_CANDIDATES: usize = 1024;
/// Absolute tolerance on the flow value, relative to a unit total mass.
pub const FLOW_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DensityReport {
    pub rho: f64,
    pub gamma: f64,
    pub gamma_prime: f64,
    pub is_dense: bool,
    /// Largest entry `t`.
    pub max_entry: f64,
}

impl DensityReport {
    pub fn sum(&self) -> f64 {
        self.gamma + self.gamma_prime
    }
}

/// Weighted fractions of entries strictly above `rho · max_entry`:
/// `gamma` is the worst row (weights `v`), `gamma_prime` the worst column
/// (weights `u`).
pub fn density(m: &Matrix, targets: &Marginals, rho: f64) -> DensityReport {
    let t = m.max_entry();
    let thr = rho * t;
    let su = sum(targets.u());
    let sv = sum(targets.v());
    let mut gamma = f64::INFINITY;
    for i in 0..m.rows() {
        let w = m.row(i).iter().zip(targets.v()).filter(|(&a, _)| a > thr).fold(0.0, |acc, (_, &vj)| acc + vj);
        gamma = gamma.min(w / sv);
    }
    let mut col_w = vec![0.0; m.cols()];
    for i in 0..m.rows() {
        let ui = targets.u()[i];
        for (w, &a) in col_w.iter_mut().zip(m.row(i)) {
            if a > thr {
                *w += ui;
            }
        }
    }
    let gamma_prime = col_w.iter().map(|w| w / su).fold(f64::INFINITY, f64::min);
    DensityReport { rho, gamma, gamma_prime, is_dense: gamma + gamma_prime > 1.0, max_entry: t }
}

/// Scans thresholds just below each distinct positive ratio `A_ij / t` and
/// returns the report maximizing `gamma + gamma_prime` (ties: larger `rho`).
///
/// Matrices with more than [`MAX_RHO_CANDIDATES`] distinct ratios are scanned
/// on evenly spaced order statistics of those ratios, always including the
/// largest and smallest.
pub fn best_rho(m: &Matrix, targets: &Marginals) -> DensityReport {
    let t = m.max_entry();
    let mut ratios: Vec<f64> = m.as_slice().iter().filter(|&&a| a > 0.0).map(|&a| a / t).collect();
    ratios.sort_by(|a, b| b.total_cmp(a));
    ratios.dedup();
    let candidates: Vec<f64> = if ratios.len() <= MAX_RHO_CANDIDATES {
        ratios
    } else {
        let last = ratios.len() - 1;
        (0..MAX_RHO_CANDIDATES).map(|k| ratios[k * last / (MAX_RHO_CANDIDATES - 1)]).collect()
    };
    let mut best: Option<DensityReport> = None;
    // candidates are in decreasing order, so a strict improvement test keeps the larger rho on ties
    for r in candidates {
        let rho = (r * (1.0 - RHO_SHIFT)).min(1.0);
        let rep = density(m, targets, rho);
        if best.as_ref().is_none_or(|b| rep.sum() > b.sum()) {
            best = Some(rep);
        }
    }
    best.expect("nonzero matrix has a positive entry")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WellBoundednessReport {
    pub rho: f64,
    pub r_rho: f64,
    pub c_rho: f64,
    /// `r_rho + c_rho − 1`; the matrix is `(rho, kappa)`-well-bounded iff this is ≥ kappa.
    pub kappa_margin: f64,
}

impl WellBoundednessReport {
    pub fn is_well_bounded(&self, kappa: f64) -> bool {
        self.kappa_margin >= kappa
    }
}

/// Bulk capacities of a scaled cost matrix: weighted mass on entries `≤ rho`
/// in the worst row and worst column, with targets normalized to unit mass.
pub fn well_bounded(scaled_cost: &Matrix, targets: &Marginals, rho: f64) -> WellBoundednessReport {
    let t = targets.normalized();
    let mut r_rho = f64::INFINITY;
    for i in 0..scaled_cost.rows() {
        let w = scaled_cost.row(i).iter().zip(t.v()).filter(|(&c, _)| c <= rho).fold(0.0, |acc, (_, &vj)| acc + vj);
        r_rho = r_rho.min(w);
    }
    let mut col_w = vec![0.0; scaled_cost.cols()];
    for i in 0..scaled_cost.rows() {
        let ui = t.u()[i];
        for (w, &c) in col_w.iter_mut().zip(scaled_cost.row(i)) {
            if c <= rho {
                *w += ui;
            }
        }
    }
    let c_rho = col_w.iter().copied().fold(f64::INFINITY, f64::min);
    WellBoundednessReport { rho, r_rho, c_rho, kappa_margin: r_rho + c_rho - 1.0 }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    /// The transportation polytope on the support is nonempty
    /// (scalable in the approximate sense).
    Feasible,
    Infeasible,
}

/// A zero block `rows × cols` with `u(rows) + v(cols) > ‖u‖₁`: no plan
/// supported on the pattern can meet the targets.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CutWitness {
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
    /// `u(rows) + v(cols) − ‖u‖₁` on unit-mass targets.
    pub excess: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Scalability {
    pub verdict: Verdict,
    /// Max-flow value on unit-mass targets.
    pub flow_value: f64,
    pub witness: Option<CutWitness>,
}

impl Scalability {
    pub fn is_feasible(&self) -> bool {
        self.verdict == Verdict::Feasible
    }
}

/// Transportation feasibility on the support of the matrix, by max-flow from
/// row supplies `u` to column demands `v` over the arcs where `A_ij > 0`.
pub fn scalability_check(instance: &ScalingInstance) -> Scalability {
    let a = instance.matrix();
    let t = instance.targets().normalized();
    let (m, n) = a.shape();
    let (src, sink) = (m + n, m + n + 1);
    let mut g = FlowNetwork::new(m + n + 2, 1e-15);
    for (i, &ui) in t.u().iter().enumerate() {
        g.add_edge(src, i, ui);
    }
    for (j, &vj) in t.v().iter().enumerate() {
        g.add_edge(m + j, sink, vj);
    }
    for i in 0..m {
        for j in 0..n {
            if a.get(i, j) > 0.0 {
                g.add_edge(i, m + j, f64::INFINITY);
            }
        }
    }
    let flow_value = g.max_flow(src, sink);
    if flow_value >= 1.0 - FLOW_TOL {
        return Scalability { verdict: Verdict::Feasible, flow_value, witness: None };
    }
    // rows reachable from the source cannot reach any unreachable column
    let seen = g.reachable(src);
    let rows: Vec<usize> = (0..m).filter(|&i| seen[i]).collect();
    let cols: Vec<usize> = (0..n).filter(|&j| !seen[m + j]).collect();
    let excess = rows.iter().map(|&i| t.u()[i]).sum::<f64>() + cols.iter().map(|&j| t.v()[j]).sum::<f64>() - 1.0;
    Scalability { verdict: Verdict::Infeasible, flow_value, witness: Some(CutWitness { rows, cols, excess }) }
}

/// Combined structural summary of an instance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnosticsReport {
    pub rows: usize,
    pub cols: usize,
    pub nu: f64,
    pub best_density: DensityReport,
    pub density_at_rho: Option<DensityReport>,
    pub well_bounded: Option<WellBoundednessReport>,
    pub scalability: Scalability,
}

/// Runs every diagnostic. `rho`, if given, adds a density report at that
/// threshold; `cost` (with its own `rho`) adds a well-boundedness report.
pub fn diagnose(instance: &ScalingInstance, rho: Option<f64>, cost: Option<(&Matrix, f64)>) -> DiagnosticsReport {
    let a = instance.matrix();
    let t = instance.targets();
    DiagnosticsReport {
        rows: a.rows(),
        cols: a.cols(),
        nu: nu(a),
        best_density: best_rho(a, t),
        density_at_rho: rho.map(|r| density(a, t, r)),
        well_bounded: cost.map(|(c, r)| well_bounded(c, t, r)),
        scalability: scalability_check(instance),
    }
}

impl DiagnosticsReport {
    /// Human-readable table.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("{:<22}{}x{}\n", "shape", self.rows, self.cols));
        s.push_str(&format!("{:<22}{:e}\n", "nu(A)", self.nu));
        let d = &self.best_density;
        s.push_str(&format!(
            "{:<22}rho={:.6} gamma={:.6} gamma'={:.6} sum={:.6} dense={}\n",
            "best density",
            d.rho,
            d.gamma,
            d.gamma_prime,
            d.sum(),
            d.is_dense
        ));
        if let Some(d) = &self.density_at_rho {
            s.push_str(&format!(
                "{:<22}rho={:.6} gamma={:.6} gamma'={:.6} sum={:.6} dense={}\n",
                "density",
                d.rho,
                d.gamma,
                d.gamma_prime,
                d.sum(),
                d.is_dense
            ));
        }
        if let Some(w) = &self.well_bounded {
            s.push_str(&format!(
                "{:<22}rho={} r_rho={:.6} c_rho={:.6} kappa_margin={:.6}\n",
                "well-boundedness", w.rho, w.r_rho, w.c_rho, w.kappa_margin
            ));
        }
        let sc = &self.scalability;
        let verdict = match sc.verdict {
            Verdict::Feasible => "feasible (approximate sense)".to_string(),
            Verdict::Infeasible => {
                let w = sc.witness.as_ref().expect("infeasible verdicts carry a witness");
                format!("infeasible: zero block rows {:?} x cols {:?}", w.rows, w.cols)
            }
        };
        s.push_str(&format!("{:<22}{} (flow {:.12})\n", "scalability", verdict, sc.flow_value));
        s
    }
}
