//! Reduction of `(u, v)`-scaling to `(1, 1)`-scaling by discretizing the
//! targets and subdividing each entry into a block of identical subentries.

use std::ops::Range;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::matrix::{Marginals, Matrix, ScalingInstance};
use crate::scaling::{marginal_error_l1, SkState};

/// Default bound on the side `N` of an expanded matrix.
pub const EXPAND_LIMIT: usize = 20_000;
/// Largest denominator considered when recovering rational targets.
pub const AUTO_L_LIMIT: u64 = 1_000_000;
/// `L·u_i` within this of an integer is treated as that integer before flooring.
pub const FLOOR_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct IntegerTargets {
    pub u_prime: Vec<u64>,
    pub v_prime: Vec<u64>,
    #[serde(rename = "L")]
    pub l: u64,
    #[serde(rename = "R")]
    pub r: u64,
    pub t_shift: i64,
}

impl IntegerTargets {
    /// `‖u′‖₁`, the side of the expanded matrix.
    pub fn total(&self) -> u64 {
        self.u_prime.iter().sum()
    }

    pub fn as_marginals(&self) -> Marginals {
        Marginals::new(self.u_prime.iter().map(|&x| x as f64).collect(), self.v_prime.iter().map(|&x| x as f64).collect())
            .expect("integer targets are positive and balanced")
    }
}

fn tolerant_floor(x: f64) -> u64 {
    let r = x.round();
    if (x - r).abs() <= FLOOR_TOL * x.abs().max(1.0) {
        r as u64
    } else {
        x.floor() as u64
    }
}

/// Floors `L·u` and `L·v`, then adds one to the first `|t|` entries of the
/// smaller side so both sum to the same integer.
pub fn discretize(targets: &Marginals, l: u64) -> Result<IntegerTargets> {
    if l == 0 {
        return Err(Error::LTooSmall(l));
    }
    let lf = l as f64;
    let mut u: Vec<u64> = targets.u().iter().map(|&x| tolerant_floor(lf * x)).collect();
    let mut v: Vec<u64> = targets.v().iter().map(|&x| tolerant_floor(lf * x)).collect();
    if u.iter().chain(&v).any(|&x| x == 0) {
        return Err(Error::LTooSmall(l));
    }
    let r = *u.iter().chain(&v).min().expect("nonempty targets");
    let t = u.iter().sum::<u64>() as i64 - v.iter().sum::<u64>() as i64;
    let (side, k) = if t >= 0 { (&mut v, t as usize) } else { (&mut u, (-t) as usize) };
    if k > side.len() {
        return Err(Error::InvalidTargets(format!("rounding imbalance {t} exceeds the vector length")));
    }
    side[..k].iter_mut().for_each(|x| *x += 1);
    Ok(IntegerTargets { u_prime: u, v_prime: v, l, r, t_shift: t })
}

/// Best rational approximation `p/q` with `q ≤ max_den` by continued fractions.
fn rational(x: f64, max_den: u64) -> Option<(u64, u64)> {
    let (mut h0, mut h1, mut k0, mut k1) = (0u64, 1u64, 1u64, 0u64);
    let mut y = x;
    for _ in 0..64 {
        let a = y.floor();
        if a > 1e12 {
            break;
        }
        let a = a as u64;
        let k2 = a.checked_mul(k1)?.checked_add(k0)?;
        if k2 > max_den {
            break;
        }
        let h2 = a.checked_mul(h1)?.checked_add(h0)?;
        (h0, h1, k0, k1) = (h1, h2, k1, k2);
        if (x - h1 as f64 / k1 as f64).abs() <= 1e-12 * x.abs().max(1.0) {
            return Some((h1, k1));
        }
        let frac = y - a as f64;
        if frac == 0.0 {
            break;
        }
        y = 1.0 / frac;
    }
    None
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Least common denominator of the targets when all are rationals with
/// denominators up to [`AUTO_L_LIMIT`] and the result is at most that bound.
pub fn auto_l(targets: &Marginals) -> Option<u64> {
    let mut l = 1u64;
    for &x in targets.u().iter().chain(targets.v()) {
        let (_, q) = rational(x, AUTO_L_LIMIT)?;
        l = l / gcd(l, q) * q;
        if l > AUTO_L_LIMIT {
            return None;
        }
    }
    Some(l)
}

/// `true` if `L·u` and `L·v` are integer vectors (within [`FLOOR_TOL`]).
pub fn is_exact(targets: &Marginals, l: u64) -> bool {
    let lf = l as f64;
    targets.u().iter().chain(targets.v()).all(|&x| (lf * x - (lf * x).round()).abs() <= FLOOR_TOL * (lf * x).max(1.0))
}

/// Block-constant `(1,1)`-scaling instance built from `(A, (u′, v′))`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedInstance {
    pub g: Matrix,
    /// `row_offsets[i]..row_offsets[i+1]` is block `S_i`.
    pub row_offsets: Vec<usize>,
    pub col_offsets: Vec<usize>,
    pub origin: ScalingInstance,
    pub targets_int: IntegerTargets,
}

fn offsets(sizes: &[u64]) -> Vec<usize> {
    let mut out = Vec::with_capacity(sizes.len() + 1);
    let mut acc = 0usize;
    out.push(0);
    for &s in sizes {
        acc += s as usize;
        out.push(acc);
    }
    out
}

/// Subdivides `A_ij` into a `u′_i × v′_j` block of entries `A_ij/(u′_i v′_j)`.
/// Refuses `N > EXPAND_LIMIT` unless `allow_large` is set.
pub fn expand(instance: &ScalingInstance, targets_int: &IntegerTargets, allow_large: bool) -> Result<ReducedInstance> {
    let a = instance.matrix();
    if targets_int.u_prime.len() != a.rows() || targets_int.v_prime.len() != a.cols() {
        return Err(Error::DimensionMismatch("integer targets do not match the matrix".into()));
    }
    let n = targets_int.total() as usize;
    if n != targets_int.v_prime.iter().sum::<u64>() as usize {
        return Err(Error::InvalidTargets("integer targets are not balanced".into()));
    }
    if n > EXPAND_LIMIT && !allow_large {
        return Err(Error::ExpansionTooLarge { n, limit: EXPAND_LIMIT });
    }
    let ro = offsets(&targets_int.u_prime);
    let co = offsets(&targets_int.v_prime);
    let mut data = Vec::with_capacity(n * n);
    for (i, &ui) in targets_int.u_prime.iter().enumerate() {
        let mut row = Vec::with_capacity(n);
        for (j, &vj) in targets_int.v_prime.iter().enumerate() {
            let x = a.get(i, j) / (ui as f64 * vj as f64);
            row.extend(std::iter::repeat_n(x, vj as usize));
        }
        for _ in 0..ui {
            data.extend_from_slice(&row);
        }
    }
    Ok(ReducedInstance {
        g: Matrix::from_raw(n, n, data),
        row_offsets: ro,
        col_offsets: co,
        origin: instance.clone(),
        targets_int: targets_int.clone(),
    })
}

impl ReducedInstance {
    pub fn size(&self) -> usize {
        self.g.rows()
    }

    pub fn row_block(&self, i: usize) -> Range<usize> {
        self.row_offsets[i]..self.row_offsets[i + 1]
    }

    pub fn col_block(&self, j: usize) -> Range<usize> {
        self.col_offsets[j]..self.col_offsets[j + 1]
    }

    /// `(G, (1, 1))`.
    pub fn instance(&self) -> ScalingInstance {
        let n = self.size();
        ScalingInstance::new(self.g.clone(), Marginals::ones(n, n).expect("n > 0")).expect("G has no zero lines")
    }

    /// Sums of `m` over every block `S_i × T_j`.
    pub fn block_sums(&self, m: &Matrix) -> Matrix {
        let (p, q) = self.origin.matrix().shape();
        let mut out = vec![0.0; p * q];
        for i in 0..p {
            for j in 0..q {
                let mut s = 0.0;
                for r in self.row_block(i) {
                    s += m.row(r)[self.col_block(j)].iter().sum::<f64>();
                }
                out[i * q + j] = s;
            }
        }
        Matrix::from_raw(p, q, out)
    }

    /// Largest relative spread `(max − min)/max` inside any block of `m`.
    pub fn block_spread(&self, m: &Matrix) -> f64 {
        let (p, q) = self.origin.matrix().shape();
        let mut worst = 0.0f64;
        for i in 0..p {
            for j in 0..q {
                let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
                for r in self.row_block(i) {
                    for &x in &m.row(r)[self.col_block(j)] {
                        lo = lo.min(x);
                        hi = hi.max(x);
                    }
                }
                if hi > 0.0 {
                    worst = worst.max((hi - lo) / hi);
                }
            }
        }
        worst
    }

    /// Sidecar record describing the block layout.
    pub fn sidecar(&self) -> serde_json::Value {
        serde_json::json!({
            "L": self.targets_int.l,
            "R": self.targets_int.r,
            "t_shift": self.targets_int.t_shift,
            "u_prime": self.targets_int.u_prime,
            "v_prime": self.targets_int.v_prime,
            "block_offsets": { "rows": self.row_offsets, "cols": self.col_offsets },
        })
    }
}

/// `D = 𝒟(u′) · G · 𝒟(v′)`, so that `D_{i′j′} = A_ij` on block `S_i × T_j`.
pub fn recover_dense(reduced: &ReducedInstance) -> Matrix {
    let expand_sizes = |sizes: &[u64]| -> Vec<f64> {
        sizes.iter().flat_map(|&s| std::iter::repeat_n(s as f64, s as usize)).collect()
    };
    let x = expand_sizes(&reduced.targets_int.u_prime);
    let y = expand_sizes(&reduced.targets_int.v_prime);
    let n = reduced.size();
    let mut data = reduced.g.as_slice().to_vec();
    for (i, row) in data.chunks_mut(n).enumerate() {
        for (e, yj) in row.iter_mut().zip(&y) {
            *e = x[i] * *e * yj;
        }
    }
    Matrix::from_raw(n, n, data)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepDeviation {
    pub k: usize,
    pub err_a: f64,
    pub err_g: f64,
    /// `|err_a − err_g / L|`.
    pub deviation: f64,
    /// `n/L + (R/(R−1))^(3^(k+1)) − 1`; infinite when `R < 2` or on overflow.
    pub slack: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquivalenceReport {
    pub targets_int: IntegerTargets,
    /// `L·u`, `L·v` integral: deviations should vanish up to rounding.
    pub exact: bool,
    pub steps: Vec<StepDeviation>,
    pub max_deviation: f64,
    /// Largest within-block spread of the reduced iterates.
    pub max_block_spread: f64,
}

/// Slack term for step `k`, evaluated in log form.
pub fn reduction_slack(n: usize, l: u64, r: u64, k: usize) -> f64 {
    if r < 2 {
        return f64::INFINITY;
    }
    let rf = r as f64;
    let log_base = (rf / (rf - 1.0)).ln();
    let expo = (k as f64 + 1.0) * 3f64.ln() + log_base.ln();
    let tail = if expo > 700.0f64.ln() { f64::INFINITY } else { expo.exp().exp_m1() };
    n as f64 / l as f64 + tail
}

/// Runs SK on `(A, (u, v))` and on the reduced `(G, (1, 1))` side by side.
pub fn verify_equivalence(instance: &ScalingInstance, l: u64, steps: usize, allow_large: bool) -> Result<EquivalenceReport> {
    let targets_int = discretize(instance.targets(), l)?;
    let reduced = expand(instance, &targets_int, allow_large)?;
    let g_inst = reduced.instance();
    let mut a_state = SkState::new(instance.matrix().clone());
    let mut g_state = SkState::new(g_inst.matrix().clone());
    let n = instance.matrix().cols();
    let mut out = Vec::with_capacity(steps);
    let mut max_deviation = 0.0f64;
    let mut max_block_spread = 0.0f64;
    for k in 0..steps {
        a_state.advance(instance.targets())?;
        g_state.advance(g_inst.targets())?;
        let (ra, ca) = marginal_error_l1(a_state.current(), instance.targets())?;
        let (rg, cg) = marginal_error_l1(g_state.current(), g_inst.targets())?;
        let (err_a, err_g) = (ra + ca, rg + cg);
        let deviation = (err_a - err_g / l as f64).abs();
        max_deviation = max_deviation.max(deviation);
        max_block_spread = max_block_spread.max(reduced.block_spread(g_state.current()));
        out.push(StepDeviation { k, err_a, err_g, deviation, slack: reduction_slack(n, l, targets_int.r, k) });
    }
    Ok(EquivalenceReport {
        exact: is_exact(instance.targets(), l),
        targets_int,
        steps: out,
        max_deviation,
        max_block_spread,
    })
}

/// Values of the four blocks of `A^(2)` for the two-level block input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BlockValues {
    pub lambda: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub q: f64,
}

fn check_block_shape(n: usize, t: usize, s: usize, d: f64) -> Result<()> {
    if !(0 < t && t < s && s < n) {
        return Err(Error::InvalidParameter(format!("need 0 < t < s < n, got t={t}, s={s}, n={n}")));
    }
    if !(d > 0.0 && d.is_finite()) {
        return Err(Error::InvalidParameter(format!("d must be positive, got {d}")));
    }
    Ok(())
}

/// Closed-form `(x, y, z, q)`: the values of `A^(2)` on the blocks
/// `(i ≤ t, j ≤ s)`, `(i ≤ t, j > s)`, `(i > t, j ≤ s)`, `(i > t, j > s)`
/// under `(1,1)`-scaling of [`block_input`].
pub fn block_closed_form(n: usize, t: usize, s: usize, d: f64, v: &[f64]) -> Result<BlockValues> {
    check_block_shape(n, t, s, d)?;
    if v.len() != n || v.iter().any(|&x| !(x > 0.0)) {
        return Err(Error::InvalidParameter("v must be a positive vector of length n".into()));
    }
    let s1: f64 = v[..s].iter().map(|x| 1.0 / x).sum();
    let s2: f64 = v[s..].iter().map(|x| 1.0 / x).sum();
    let lambda = (s1 + s2) / (d * s1 + s2);
    let (nf, tf, sf) = (n as f64, t as f64, s as f64);
    let den1 = nf * tf + lambda * (nf - tf) * (sf + d * (nf - sf));
    let den2 = tf * (nf - sf + d * sf) + d * lambda * nf * (nf - tf);
    Ok(BlockValues {
        lambda,
        x: (tf + lambda * (nf - tf)) / den1,
        y: (tf + d * lambda * (nf - tf)) / den1,
        z: d * (tf + lambda * (nf - tf)) / den2,
        q: (tf + d * lambda * (nf - tf)) / den2,
    })
}

/// `A_ij = c/(u_i v_j)` with `c = d` on `(i > t, j ≤ s)` and `1` elsewhere.
pub fn block_input(n: usize, t: usize, s: usize, d: f64, u: &[f64], v: &[f64]) -> Result<Matrix> {
    check_block_shape(n, t, s, d)?;
    if u.len() != n || v.len() != n {
        return Err(Error::DimensionMismatch("u and v must have length n".into()));
    }
    let mut data = Vec::with_capacity(n * n);
    for (i, ui) in u.iter().enumerate() {
        for (j, vj) in v.iter().enumerate() {
            let c = if i >= t && j < s { d } else { 1.0 };
            data.push(c / (ui * vj));
        }
    }
    Matrix::new(n, n, data)
}
