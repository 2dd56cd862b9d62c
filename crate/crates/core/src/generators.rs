//! Instance families: block lower-bound constructions, the dense
//! `log n` family, small 2×2 extremal cases, the hard `(u, v)` family and
//! seeded random matrices. Every generator audits its output before
//! returning it.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use serde_json::json;

use crate::diagnostics::{density, scalability_check, DensityReport};
use crate::eot::LogMatrix;
use crate::error::{Error, Result};
use crate::matrix::{sum, Marginals, Matrix, ScalingInstance};

/// Density threshold just below 1, for "every entry equal to the max" counts.
pub const RHO_ONE_MINUS: f64 = 1.0 - 1e-12;
/// Below this `d`, the hard `(u, v)` instance is only emitted in log form.
pub const LOG_READY_THRESHOLD: f64 = 1e-300;
const MATCH_TOL: f64 = 1e-12;

/// Seeded generator used by every random family.
pub fn rng_from_seed(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Thm61Block,
    Thm71Dense,
    Tight2x2,
    Critical2x2,
    UvHard,
    RandomDense,
    RandomBlock,
    RandomSparse,
}

impl Family {
    pub const ALL: [Family; 8] = [
        Family::Thm61Block,
        Family::Thm71Dense,
        Family::Tight2x2,
        Family::Critical2x2,
        Family::UvHard,
        Family::RandomDense,
        Family::RandomBlock,
        Family::RandomSparse,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Thm61Block => "thm61_block",
            Family::Thm71Dense => "thm71_dense",
            Family::Tight2x2 => "tight2x2",
            Family::Critical2x2 => "critical2x2",
            Family::UvHard => "uv_hard",
            Family::RandomDense => "random_dense",
            Family::RandomBlock => "random_block",
            Family::RandomSparse => "random_sparse",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown family {s:?}")))
    }
}

/// `key=value` parameters; vector values separate entries with `:`.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Params(pub BTreeMap<String, String>);

impl Params {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for item in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("parameter {item:?} is not key=value")))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(Self(map))
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.0.insert(key.to_string(), value.to_string());
        self
    }

    fn raw(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        let v = self.raw(key).ok_or_else(|| Error::InvalidParameter(format!("missing parameter {key}")))?;
        v.parse().map_err(|_| Error::Parse(format!("parameter {key}={v:?} is not a real")))
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        if self.raw(key).is_some() {
            self.f64(key)
        } else {
            Ok(default)
        }
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        let v = self.raw(key).ok_or_else(|| Error::InvalidParameter(format!("missing parameter {key}")))?;
        v.parse().map_err(|_| Error::Parse(format!("parameter {key}={v:?} is not a nonnegative integer")))
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize> {
        if self.raw(key).is_some() {
            self.usize(key)
        } else {
            Ok(default)
        }
    }

    pub fn vector(&self, key: &str) -> Result<Option<Vec<f64>>> {
        self.raw(key)
            .map(|v| {
                v.split(':')
                    .map(|x| x.trim().parse().map_err(|_| Error::Parse(format!("bad entry {x:?} in {key}"))))
                    .collect()
            })
            .transpose()
    }
}

/// A generated instance together with its audited constants.
#[derive(Debug, Clone)]
pub struct Generated {
    pub family: Family,
    pub params: Params,
    pub seed: u64,
    /// Absent when the matrix only exists in log form.
    pub instance: Option<ScalingInstance>,
    pub log_matrix: Option<LogMatrix>,
    pub targets: Marginals,
    pub audit: serde_json::Value,
}

impl Generated {
    pub fn sidecar(&self) -> serde_json::Value {
        json!({
            "family": self.family.name(),
            "params": self.params.0,
            "seed": self.seed,
            "log_ready": self.instance.is_none(),
            "audit": self.audit,
        })
    }
}

/// Dispatches on `family` with `params`.
pub fn generate(family: Family, params: &Params, seed: u64) -> Result<Generated> {
    let plain = |instance: ScalingInstance, audit: serde_json::Value| Generated {
        family,
        params: params.clone(),
        seed,
        targets: instance.targets().clone(),
        instance: Some(instance),
        log_matrix: None,
        audit,
    };
    match family {
        Family::Thm61Block => {
            let g = gen_thm61(params.usize("n")?, params.usize("s")?, params.usize("t")?, params.f64("nu")?)?;
            let audit = json!({ "theta": g.theta, "nu": g.theta[1][0] });
            Ok(plain(g.instance, audit))
        }
        Family::Thm71Dense => {
            let n = params.usize("n")?;
            let inst = gen_thm71(n)?;
            let d = density(inst.matrix(), inst.targets(), RHO_ONE_MINUS);
            Ok(plain(inst, json!({ "gamma": d.gamma, "gamma_prime": d.gamma_prime, "theta1": thm71_theta1(n) })))
        }
        Family::Tight2x2 => {
            let a = [params.f64("a11")?, params.f64("a12")?, params.f64("a21")?, params.f64("a22")?];
            let inst = gen_tight2x2(a[0], a[1], a[2], a[3])?;
            let nu = crate::scaling::nu(inst.matrix());
            Ok(plain(inst, json!({ "nu": nu })))
        }
        Family::Critical2x2 => {
            let (p, q) = (params.f64("p")?, params.f64("q")?);
            let inst = gen_critical2x2(p, q)?;
            Ok(plain(inst, json!({ "delta0": critical_delta(p, q) })))
        }
        Family::UvHard => {
            let (u, v) = match (params.vector("u")?, params.vector("v")?) {
                (Some(u), Some(v)) => (u, v),
                _ => {
                    let m = params.usize("m")?;
                    let n = params.usize_or("n", m)?;
                    (vec![1.0 / m as f64; m], vec![1.0 / n as f64; n])
                }
            };
            let g = gen_uv_hard(&u, &v, params.f64("gamma")?, params.f64("gamma_prime")?, params.f64("eps")?)?;
            let audit = serde_json::to_value(&g.constants).expect("plain record");
            Ok(Generated {
                family,
                params: params.clone(),
                seed,
                targets: g.targets.clone(),
                instance: g.instance,
                log_matrix: Some(g.log_matrix),
                audit,
            })
        }
        Family::RandomDense | Family::RandomBlock | Family::RandomSparse => {
            let m = params.usize("m").or_else(|_| params.usize("n"))?;
            let n = params.usize_or("n", m)?;
            let kind = match family {
                Family::RandomDense => RandomFamily::Dense {
                    gamma: params.f64_or("gamma", 0.6)?,
                    gamma_prime: params.f64_or("gamma_prime", 0.6)?,
                    rho: params.f64_or("rho", 0.5)?,
                },
                Family::RandomBlock => RandomFamily::Block {
                    row_blocks: params.usize_or("row_blocks", 2)?,
                    col_blocks: params.usize_or("col_blocks", 2)?,
                    min_value: params.f64_or("min_value", 1e-3)?,
                },
                _ => RandomFamily::Sparse {
                    fill: params.f64_or("fill", 0.3)?,
                    zero_row: params.raw("zero_row").map(|_| params.usize("zero_row")).transpose()?,
                },
            };
            let random_targets = params.usize_or("random_targets", 0)? != 0;
            let inst = gen_random(&kind, m, n, random_targets, seed)?;
            let d = crate::diagnostics::best_rho(inst.matrix(), inst.targets());
            Ok(plain(inst, json!({ "best_density": d })))
        }
    }
}

// ---------------------------------------------------------------------------
// Block family with a tiny lower-left block

/// `2 × 2` block values `[[θ11, θ12], [θ21, θ22]]`.
pub type Theta = [[f64; 2]; 2];

#[derive(Debug, Clone)]
pub struct Thm61Instance {
    pub instance: ScalingInstance,
    pub n: usize,
    pub t: usize,
    pub s: usize,
    pub theta: Theta,
}

/// Upper bound on `θ12`.
pub fn thm61_theta12_bound(n: usize, t: usize, s: usize) -> f64 {
    let (n, t, s) = (n as f64, t as f64, s as f64);
    6.0 * n / (6.0 * n * n + 5.0 * s * (n - t))
}

/// Open window for `t·θ12 + (n−t)·θ22 − 1`.
pub fn thm61_second_column_window(n: usize, t: usize, s: usize) -> (f64, f64) {
    let (n, t, s) = (n as f64, t as f64, s as f64);
    (s * t * (s - t) / (4.0 * n * n * n), s * (n - t) / (n * (n - s)))
}

/// Checks the five defining conditions for block values; returns the first
/// violated one.
pub fn thm61_audit(n: usize, t: usize, s: usize, nu: f64, th: &Theta) -> Result<()> {
    let (nf, tf, sf) = (n as f64, t as f64, s as f64);
    let fail = |condition: &'static str, detail: String| Err(Error::InfeasibleWindow { condition, detail });
    if th.iter().flatten().any(|&x| !(x > 0.0)) {
        return fail("positive block values", format!("{th:?}"));
    }
    if th[1][0] != nu {
        return fail("theta21 = nu", format!("theta21 = {}", th[1][0]));
    }
    let c12 = thm61_theta12_bound(n, t, s);
    if !(th[0][1] < c12) {
        return fail("theta12 < 6n/(6n^2 + 5s(n-t))", format!("theta12 = {} >= {c12}", th[0][1]));
    }
    for row in th {
        let r = sf * row[0] + (nf - sf) * row[1];
        if (r - 1.0).abs() > 1e-12 {
            return fail("s*theta_i1 + (n-s)*theta_i2 = 1", format!("row value {r}"));
        }
    }
    let c1 = tf * th[0][0] + (nf - tf) * th[1][0] - 1.0;
    if !((tf - nf) / nf < c1 && c1 < 0.0) {
        return fail("(t-n)/n < t*theta11 + (n-t)*theta21 - 1 < 0", format!("value {c1}"));
    }
    let (lo, hi) = thm61_second_column_window(n, t, s);
    let c2 = tf * th[0][1] + (nf - tf) * th[1][1] - 1.0;
    if !(lo < c2 && c2 < hi) {
        return fail("st(s-t)/(4n^3) < t*theta12 + (n-t)*theta22 - 1 < s(n-t)/(n(n-s))", format!("value {c2} not in ({lo}, {hi})"));
    }
    Ok(())
}

/// Block matrix with `θ21 = ν` whose second-column excess sits at the
/// geometric midpoint of its feasible range.
///
/// The feasible range of `t·θ12 + (n−t)·θ22 − 1` is the stated open window
/// intersected with the values reachable by `θ11` under the remaining
/// conditions; `θ11` is then found by bisection.
pub fn gen_thm61(n: usize, s: usize, t: usize, nu: f64) -> Result<Thm61Instance> {
    if !(0 < t && t < s && s < n) {
        return Err(Error::InvalidParameter(format!("need 0 < t < s < n, got t={t}, s={s}, n={n}")));
    }
    if !(nu > 0.0 && nu.is_finite()) {
        return Err(Error::InvalidParameter(format!("nu must be positive, got {nu}")));
    }
    let (nf, tf, sf) = (n as f64, t as f64, s as f64);
    let theta21 = nu;
    let theta22 = (1.0 - sf * nu) / (nf - sf);
    if !(theta22 > 0.0) {
        return Err(Error::InfeasibleWindow {
            condition: "s*theta_i1 + (n-s)*theta_i2 = 1",
            detail: format!("s*nu = {} >= 1", sf * nu),
        });
    }
    let theta12_of = |a: f64| (1.0 - sf * a) / (nf - sf);
    let excess = |a: f64| tf * theta12_of(a) + (nf - tf) * theta22 - 1.0;
    let c12 = thm61_theta12_bound(n, t, s);
    let lo_a = [(1.0 - (nf - sf) * c12) / sf, 1.0 / nf - (nf - tf) * nu / tf, 0.0].into_iter().fold(f64::MIN, f64::max);
    let hi_a = ((1.0 - (nf - tf) * nu) / tf).min(1.0 / sf);
    if !(lo_a < hi_a) {
        let condition = if 1.0 / nf - (nf - tf) * nu / tf >= hi_a {
            "(t-n)/n < t*theta11 + (n-t)*theta21 - 1 < 0"
        } else {
            "theta12 < 6n/(6n^2 + 5s(n-t))"
        };
        return Err(Error::InfeasibleWindow { condition, detail: format!("theta11 range ({lo_a}, {hi_a}) is empty") });
    }
    // excess is decreasing in theta11
    let (w_lo, w_hi) = thm61_second_column_window(n, t, s);
    let e_lo = excess(hi_a).max(w_lo);
    let e_hi = excess(lo_a).min(w_hi);
    if !(e_lo < e_hi && e_lo > 0.0) {
        return Err(Error::InfeasibleWindow {
            condition: "st(s-t)/(4n^3) < t*theta12 + (n-t)*theta22 - 1 < s(n-t)/(n(n-s))",
            detail: format!("reachable range ({}, {}) misses ({w_lo}, {w_hi})", excess(hi_a), excess(lo_a)),
        });
    }
    let target = (e_lo * e_hi).sqrt();
    let (mut a, mut b) = (lo_a, hi_a);
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        if excess(mid) > target {
            a = mid;
        } else {
            b = mid;
        }
    }
    let theta11 = 0.5 * (a + b);
    let theta = [[theta11, theta12_of(theta11)], [theta21, theta22]];
    thm61_audit(n, t, s, nu, &theta)?;
    let instance = ScalingInstance::new(thm61_matrix(n, t, s, &theta)?, Marginals::ones(n, n)?)?;
    Ok(Thm61Instance { instance, n, t, s, theta })
}

/// `n×n` matrix with blocks `t×s`, `t×(n−s)`, `(n−t)×s`, `(n−t)×(n−s)`.
pub fn thm61_matrix(n: usize, t: usize, s: usize, th: &Theta) -> Result<Matrix> {
    let data = (0..n * n).map(|idx| th[usize::from(idx / n >= t)][usize::from(idx % n >= s)]).collect();
    Matrix::new(n, n, data)
}

/// Block representatives of an iterate.
pub fn thm61_theta(m: &Matrix, t: usize, s: usize) -> Theta {
    [[m.get(0, 0), m.get(0, s)], [m.get(t, 0), m.get(t, s)]]
}

/// Normalized error `ε^(k)` from block values.
pub fn thm61_epsilon(k: usize, n: usize, t: usize, s: usize, th: &Theta) -> f64 {
    let (n, t, s) = (n as f64, t as f64, s as f64);
    if k % 2 == 1 {
        n / (n - t) * (s * th[0][0] + (n - s) * th[0][1] - 1.0)
    } else {
        n / s * (t * th[0][1] + (n - t) * th[1][1] - 1.0)
    }
}

/// Marginal error of `A^(k)` implied by `ε^(k)`.
pub fn thm61_error_from_epsilon(k: usize, n: usize, t: usize, s: usize, eps_k: f64) -> f64 {
    let (n, t, s) = (n as f64, t as f64, s as f64);
    if k % 2 == 1 {
        2.0 * t * (n - t) / n * eps_k
    } else {
        2.0 * s * (n - s) / n * eps_k
    }
}

/// Lower bound on `ε^(k+1)/ε^(k)`.
pub fn thm61_decay_floor(n: usize, t: usize, s: usize) -> f64 {
    let (n, t, s) = (n as f64, t as f64, s as f64);
    let a = 5.0 * n * (n - s) * s.min(n - s) / (6.0 * n.powi(3) + 5.0 * n * s * (n - t));
    let b = 5.0 * t * t.min(n - t) / (6.0 * n * n + 5.0 * s * (n - t));
    a.min(b)
}

// ---------------------------------------------------------------------------
// Dense family with a log n iteration count

/// `n × (2 + 2n/5)` zero/one matrix with uniform `u` and
/// `v = (1/n, …, 1/n, 1/5, 2/5)`.
pub fn gen_thm71(n: usize) -> Result<ScalingInstance> {
    if n < 10 || !n.is_multiple_of(10) {
        return Err(Error::BadDim(n));
    }
    let w = 2 * n / 5;
    let cols = w + 2;
    let mut data = vec![1.0; n * cols];
    for i in 0..n {
        for j in 0..cols {
            if (i < n / 2 && j < w) || (i >= n / 2 && j == cols - 1) {
                data[i * cols + j] = 0.0;
            }
        }
    }
    let mut v = vec![1.0 / n as f64; w];
    v.extend([0.2, 0.4]);
    let inst = ScalingInstance::new(Matrix::new(n, cols, data)?, Marginals::new(vec![1.0 / n as f64; n], v)?)?;
    let d = density(inst.matrix(), inst.targets(), RHO_ONE_MINUS);
    if (d.gamma - 0.6).abs() > MATCH_TOL || (d.gamma_prime - 0.5).abs() > MATCH_TOL {
        return Err(Error::InvalidMatrix(format!("density audit failed: {d:?}")));
    }
    if !scalability_check(&inst).is_feasible() {
        return Err(Error::NotScalable);
    }
    Ok(inst)
}

/// `θ = 5n·a/2`, with `a` the entry in the top half of column `2n/5 + 1`.
pub fn thm71_theta(m: &Matrix, n: usize) -> f64 {
    2.5 * n as f64 * m.get(0, 2 * n / 5)
}

/// `θ^(1) = (2n+5)/(2n+15)`.
pub fn thm71_theta1(n: usize) -> f64 {
    let n = n as f64;
    (2.0 * n + 5.0) / (2.0 * n + 15.0)
}

/// `θ^(k+2)` from `θ^(k)` at odd `k`.
pub fn thm71_theta_next(th: f64) -> f64 {
    th * (3.0 - th) / (2.0 * (1.0 + th - th * th))
}

pub fn thm71_omega(th: f64) -> f64 {
    (2.0 * th - 1.0) / (1.0 - th)
}

/// `ω^(k+2) = 2ω(2+ω)/(5+3ω)`.
pub fn thm71_omega_next(w: f64) -> f64 {
    2.0 * w * (2.0 + w) / (5.0 + 3.0 * w)
}

/// Marginal error at odd `k`.
pub fn thm71_error(th: f64) -> f64 {
    (2.0 * th - 1.0).abs() / 5.0
}

// ---------------------------------------------------------------------------
// 2×2 families

/// `u = (5/6, 1/6)`, `v = (7/8, 1/8)`.
pub fn tight2x2_targets() -> Marginals {
    Marginals::new(vec![5.0 / 6.0, 1.0 / 6.0], vec![7.0 / 8.0, 1.0 / 8.0]).expect("balanced")
}

pub fn gen_tight2x2(a11: f64, a12: f64, a21: f64, a22: f64) -> Result<ScalingInstance> {
    let m = Matrix::new(2, 2, vec![a11, a12, a21, a22])?;
    let inst = ScalingInstance::new(m, tight2x2_targets()).map_err(|_| Error::NotScalable)?;
    if !scalability_check(&inst).is_feasible() {
        return Err(Error::NotScalable);
    }
    Ok(inst)
}

/// `[[p, 1/2 − p], [q, 1/2 − q]]` with `u = v = (1/2, 1/2)`.
pub fn gen_critical2x2(p: f64, q: f64) -> Result<ScalingInstance> {
    if !((0.0..=0.5).contains(&p) && (0.0..=0.5).contains(&q) && p + q > 0.0 && p + q < 1.0) {
        return Err(Error::InvalidParameter(format!("need p, q in [0, 1/2] with 0 < p+q < 1, got p={p}, q={q}")));
    }
    let m = Matrix::new(2, 2, vec![p, 0.5 - p, q, 0.5 - q])?;
    ScalingInstance::new(m, Marginals::new(vec![0.5, 0.5], vec![0.5, 0.5])?)
}

/// `Δ = |2(p+q) − 1|` for a row-normalized iterate.
pub fn critical_delta(p: f64, q: f64) -> f64 {
    (2.0 * (p + q) - 1.0).abs()
}

/// First column of `A^(k+2)` from that of a row-normalized `A^(k)`.
pub fn critical_step(p: f64, q: f64) -> (f64, f64) {
    let d = 2.0 * (p + q) - 1.0;
    (p * (1.0 - d) / (1.0 + (1.0 - 4.0 * p) * d), q * (1.0 - d) / (1.0 + (1.0 - 4.0 * q) * d))
}

/// `Δ^(k+2) = 4s²Δ/((1−Δ²)² − 4s²Δ²)` with `s = p − q`.
pub fn critical_delta_next(delta: f64, s: f64) -> f64 {
    let s2 = 4.0 * s * s;
    s2 * delta / ((1.0 - delta * delta).powi(2) - s2 * delta * delta)
}

/// Marginal error of the column-normalized iterate following `(p, q)`.
pub fn critical_odd_error(p: f64, q: f64) -> f64 {
    let d = 2.0 * (p + q) - 1.0;
    let r1 = p / (1.0 + d) + (1.0 - 2.0 * p) / (2.0 * (1.0 - d));
    2.0 * (r1 - 0.5).abs()
}

/// `2⌈1/(2ε)⌉`.
pub fn critical_bound(eps: f64) -> usize {
    2 * (1.0 / (2.0 * eps)).ceil() as usize
}

// ---------------------------------------------------------------------------
// Hard (u, v) family

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UvHardConstants {
    pub a: usize,
    pub b: usize,
    pub gamma: f64,
    pub gamma_prime: f64,
    pub eps: f64,
    /// `log₂ d`.
    pub log2_d: f64,
    /// `d`, or 0 when it underflows.
    pub d: f64,
    /// `ν(A)` by definition, which equals `d`.
    pub nu: f64,
    pub log2_nu: f64,
    /// `dn/(db + n − b)`, as stated alongside the construction.
    pub nu_closed_form: f64,
    pub density: DensityReport,
}

#[derive(Debug, Clone)]
pub struct UvHard {
    pub instance: Option<ScalingInstance>,
    pub log_matrix: LogMatrix,
    pub targets: Marginals,
    pub constants: UvHardConstants,
}

fn prefix_index(x: &[f64], target: f64) -> Option<usize> {
    let mut acc = 0.0;
    for (k, &xi) in x.iter().enumerate() {
        acc += xi;
        if (acc - target).abs() <= MATCH_TOL {
            return Some(k + 1);
        }
    }
    None
}

/// Ones everywhere except `d` on rows `> a`, columns `≤ b`, where `γ` is the
/// suffix sum of `v` after `b` and `γ′` the prefix sum of `u` up to `a`.
pub fn gen_uv_hard(u: &[f64], v: &[f64], gamma: f64, gamma_prime: f64, eps: f64) -> Result<UvHard> {
    let targets = Marginals::new(u.to_vec(), v.to_vec())?.normalized();
    let (m, n) = targets.dims();
    if !(gamma > 0.0 && gamma_prime > 0.0 && gamma + gamma_prime < 1.0) {
        return Err(Error::InvalidParameter(format!("need gamma, gamma' > 0 and gamma + gamma' < 1, got {gamma}, {gamma_prime}")));
    }
    if !(eps > 0.0 && 3.0 * eps < 1.0 - gamma - gamma_prime) {
        return Err(Error::InvalidParameter(format!("need 0 < 3 eps < 1 - gamma - gamma', got eps = {eps}")));
    }
    let a = prefix_index(targets.u(), gamma_prime)
        .filter(|&a| a < m)
        .ok_or_else(|| Error::InfeasibleGammaPair(format!("no prefix of u sums to gamma' = {gamma_prime}")))?;
    let rev: Vec<f64> = targets.v().iter().rev().copied().collect();
    let b = prefix_index(&rev, gamma)
        .map(|k| n - k)
        .filter(|&b| b > 0)
        .ok_or_else(|| Error::InfeasibleGammaPair(format!("no suffix of v sums to gamma = {gamma}")))?;
    let (nf, bf) = (n as f64, b as f64);
    // log2(n 2^(n/eps) - b) = n/eps + log2(n) + log2(1 - b 2^(-n/eps)/n)
    let log2_den = nf / eps + nf.log2() + (-(bf / nf) * (-(nf / eps)).exp2()).ln_1p() / std::f64::consts::LN_2;
    let second = (1.0 - gamma - gamma_prime) * (nf - bf) / (12.0 * nf * (1.0 - gamma_prime + (gamma_prime - gamma).abs()));
    let log2_d = (nf - bf).log2() - log2_den + second.log2();
    let d = log2_d.exp2();
    let nu_closed_form = if d > 0.0 { d * nf / (d * bf + nf - bf) } else { (log2_d + nf.log2() - (nf - bf).log2()).exp2() };

    let ln_d = log2_d * std::f64::consts::LN_2;
    let log_data = (0..m * n).map(|idx| if idx / n >= a && idx % n < b { ln_d } else { 0.0 }).collect();
    let log_matrix = LogMatrix::new(m, n, log_data)?;

    // the density at 1- only depends on which entries equal the max
    let pattern = Matrix::new(m, n, (0..m * n).map(|idx| if idx / n >= a && idx % n < b { 0.5 } else { 1.0 }).collect())?;
    let dens = density(&pattern, &targets, RHO_ONE_MINUS);
    if (dens.gamma - gamma).abs() > MATCH_TOL || (dens.gamma_prime - gamma_prime).abs() > MATCH_TOL {
        return Err(Error::InvalidMatrix(format!("density audit failed: {dens:?}")));
    }
    let instance = if d >= LOG_READY_THRESHOLD {
        let data = (0..m * n).map(|idx| if idx / n >= a && idx % n < b { d } else { 1.0 }).collect();
        let inst = ScalingInstance::new(Matrix::new(m, n, data)?, targets.clone())?;
        let nu = crate::scaling::nu(inst.matrix());
        if ((nu - d) / d).abs() > 1e-10 {
            return Err(Error::InvalidMatrix(format!("nu audit failed: nu = {nu}, d = {d}")));
        }
        Some(inst)
    } else {
        None
    };
    Ok(UvHard {
        instance,
        log_matrix,
        targets,
        constants: UvHardConstants {
            a,
            b,
            gamma,
            gamma_prime,
            eps,
            log2_d,
            d,
            nu: d,
            log2_nu: log2_d,
            nu_closed_form,
            density: dens,
        },
    })
}

// ---------------------------------------------------------------------------
// Random families

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum RandomFamily {
    /// Every row has at least `⌈γn⌉` and every column at least `⌈γ′m⌉`
    /// entries above `ρ` times the maximum.
    Dense { gamma: f64, gamma_prime: f64, rho: f64 },
    /// Constant random blocks, values log-uniform in `[min_value, 1]`.
    Block { row_blocks: usize, col_blocks: usize, min_value: f64 },
    /// Independent support with probability `fill`; one entry per row and
    /// column is forced positive unless `zero_row` plants an empty row.
    Sparse { fill: f64, zero_row: Option<usize> },
}

/// Uniform or random positive targets of unit mass.
pub fn random_targets(rng: &mut ChaCha20Rng, m: usize, n: usize) -> Marginals {
    let mut u: Vec<f64> = (0..m).map(|_| rng.gen_range(0.5..1.5)).collect();
    let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..1.5)).collect();
    let (su, sv) = (sum(&u), sum(&v));
    u.iter_mut().for_each(|x| *x /= su);
    v.iter_mut().for_each(|x| *x /= sv);
    Marginals::new(u, v).expect("positive and normalized")
}

/// Seeded random instance (ChaCha20 stream seeded from `seed`).
pub fn gen_random(family: &RandomFamily, m: usize, n: usize, random_targets_flag: bool, seed: u64) -> Result<ScalingInstance> {
    if m == 0 || n == 0 {
        return Err(Error::InvalidParameter("dimensions must be positive".into()));
    }
    let mut rng = rng_from_seed(seed);
    let matrix = match *family {
        RandomFamily::Dense { gamma, gamma_prime, rho } => {
            if !((0.0..=1.0).contains(&gamma) && (0.0..=1.0).contains(&gamma_prime) && rho > 0.0 && rho < 1.0) {
                return Err(Error::InvalidParameter("need gamma, gamma' in [0, 1] and rho in (0, 1)".into()));
            }
            random_dense(&mut rng, m, n, gamma, gamma_prime, rho)?
        }
        RandomFamily::Block { row_blocks, col_blocks, min_value } => {
            if row_blocks == 0 || col_blocks == 0 || row_blocks > m || col_blocks > n || !(min_value > 0.0 && min_value <= 1.0) {
                return Err(Error::InvalidParameter("need 1 <= blocks <= dims and min_value in (0, 1]".into()));
            }
            let ln_min = min_value.ln();
            let vals: Vec<f64> = (0..row_blocks * col_blocks).map(|_| (rng.gen::<f64>() * ln_min).exp()).collect();
            let data = (0..m * n)
                .map(|idx| {
                    let (bi, bj) = ((idx / n) * row_blocks / m, (idx % n) * col_blocks / n);
                    vals[bi * col_blocks + bj]
                })
                .collect();
            Matrix::new(m, n, data)?
        }
        RandomFamily::Sparse { fill, zero_row } => {
            if !(fill > 0.0 && fill <= 1.0) {
                return Err(Error::InvalidParameter("fill must be in (0, 1]".into()));
            }
            let mut data: Vec<f64> =
                (0..m * n).map(|_| if rng.gen::<f64>() < fill { rng.gen_range(0.1..1.0) } else { 0.0 }).collect();
            for k in 0..m.max(n) {
                let (i, j) = (k % m, k % n);
                if data[i * n + j] == 0.0 {
                    data[i * n + j] = rng.gen_range(0.1..1.0);
                }
            }
            if let Some(r) = zero_row {
                if r >= m {
                    return Err(Error::InvalidParameter(format!("zero_row {r} out of range")));
                }
                data[r * n..(r + 1) * n].iter_mut().for_each(|x| *x = 0.0);
            }
            Matrix::new(m, n, data)?
        }
    };
    let targets = if random_targets_flag { random_targets(&mut rng, m, n) } else { Marginals::uniform(m, n)? };
    let inst = ScalingInstance::new(matrix, targets)?;
    if let RandomFamily::Dense { gamma, gamma_prime, rho } = *family {
        let d = density(inst.matrix(), &Marginals::uniform(m, n)?, rho);
        if d.gamma < gamma - MATCH_TOL || d.gamma_prime < gamma_prime - MATCH_TOL {
            return Err(Error::InvalidMatrix(format!("density audit failed: {d:?}")));
        }
    }
    Ok(inst)
}

fn random_dense(rng: &mut ChaCha20Rng, m: usize, n: usize, gamma: f64, gamma_prime: f64, rho: f64) -> Result<Matrix> {
    let need_row = ((gamma * n as f64) - 1e-9).ceil().max(0.0) as usize;
    let need_col = ((gamma_prime * m as f64) - 1e-9).ceil().max(0.0) as usize;
    let mut high = vec![false; m * n];
    let mut cols: Vec<usize> = (0..n).collect();
    for i in 0..m {
        cols.shuffle(rng);
        for &j in &cols[..need_row.min(n)] {
            high[i * n + j] = true;
        }
    }
    let mut rows: Vec<usize> = (0..m).collect();
    for j in 0..n {
        let mut count = (0..m).filter(|&i| high[i * n + j]).count();
        rows.shuffle(rng);
        for &i in &rows {
            if count >= need_col {
                break;
            }
            if !high[i * n + j] {
                high[i * n + j] = true;
                count += 1;
            }
        }
    }
    let hi_lo = 0.5 * (1.0 + rho);
    let mut data: Vec<f64> = high
        .iter()
        .map(|&h| if h { rng.gen_range(hi_lo..=1.0) } else { rng.gen_range(0.05 * rho..0.95 * rho) })
        .collect();
    // pin the maximum to 1 so the threshold is exactly rho
    if let Some(k) = high.iter().position(|&h| h) {
        data[k] = 1.0;
    }
    Matrix::new(m, n, data)
}
