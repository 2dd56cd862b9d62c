//! Exact permanents of small square matrices and the permanent-growth laws
//! along `(1,1)`-scaling trajectories.

use crate::error::{Error, Result};
use crate::matrix::{Matrix, ScalingInstance};
use crate::scaling::SkState;

/// Largest dimension accepted by [`permanent`].
pub const PERMANENT_MAX_N: usize = 20;
/// Largest dimension accepted by [`permanent_trace`].
pub const TRACE_MAX_N: usize = 12;
/// Relative tolerance on the per-step update law.
pub const LAW_TOL: f64 = 1e-8;
/// Slack on the marginal-product bound `∏ ≤ 1`.
pub const PRODUCT_TOL: f64 = 1e-10;

/// Ryser's inclusion–exclusion formula, subsets visited in Gray-code order so
/// each step adds or removes one column from the running row sums.
pub fn permanent(m: &Matrix) -> Result<f64> {
    if !m.is_square() {
        return Err(Error::DimensionMismatch(format!("permanent of a {}x{} matrix", m.rows(), m.cols())));
    }
    let n = m.rows();
    if n > PERMANENT_MAX_N {
        return Err(Error::TooLarge { n, limit: PERMANENT_MAX_N });
    }
    let mut row_sums = vec![0.0f64; n];
    let mut in_set = vec![false; n];
    let mut total = 0.0f64;
    let mut size = 0usize;
    for k in 1u64..(1u64 << n) {
        let j = k.trailing_zeros() as usize;
        let sign = if in_set[j] { -1.0 } else { 1.0 };
        in_set[j] = !in_set[j];
        if in_set[j] {
            size += 1;
        } else {
            size -= 1;
        }
        for (i, s) in row_sums.iter_mut().enumerate() {
            *s += sign * m.get(i, j);
        }
        let prod = row_sums.iter().product::<f64>();
        if size.is_multiple_of(2) {
            total += prod;
        } else {
            total -= prod;
        }
    }
    Ok(if n.is_multiple_of(2) { total } else { -total })
}

/// One step of a permanent trace, describing `A^(k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PermanentRecord {
    pub k: usize,
    pub permanent: f64,
    pub log_permanent: f64,
    /// `∏ c_j(A^(k))` for even `k`, `∏ r_i(A^(k))` for odd `k`.
    pub marginal_product: f64,
    /// `per(A^(k)) / marginal_product`, the law's value for `per(A^(k+1))`.
    pub predicted_next: f64,
    /// Relative gap between `per(A^(k))` and the previous step's prediction.
    pub law_rel_error: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PermanentTrace {
    pub records: Vec<PermanentRecord>,
    /// Steps whose update law missed by more than [`LAW_TOL`].
    pub law_violations: Vec<usize>,
    /// Steps whose marginal product exceeded `1 + PRODUCT_TOL`.
    pub product_violations: Vec<usize>,
}

impl PermanentTrace {
    pub fn max_law_error(&self) -> f64 {
        self.records.iter().filter_map(|r| r.law_rel_error).fold(0.0, f64::max)
    }

    pub fn max_marginal_product(&self) -> f64 {
        self.records.iter().map(|r| r.marginal_product).fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Permanent and update-law bookkeeping for `steps` iterates of
/// `(1,1)`-scaling.
pub fn permanent_trace(instance: &ScalingInstance, steps: usize) -> Result<PermanentTrace> {
    let a = instance.matrix();
    if !a.is_square() {
        return Err(Error::DimensionMismatch("permanent trace needs a square matrix".into()));
    }
    if a.rows() > TRACE_MAX_N {
        return Err(Error::TooLarge { n: a.rows(), limit: TRACE_MAX_N });
    }
    let t = instance.targets();
    if t.u().iter().chain(t.v()).any(|&x| x != 1.0) {
        return Err(Error::InvalidTargets("permanent laws apply to (1,1)-scaling".into()));
    }
    let mut state = SkState::new(a.clone());
    let mut out = PermanentTrace::default();
    let mut prev_prediction: Option<f64> = None;
    for k in 0..steps {
        state.advance(t)?;
        let cur = state.current();
        let per = permanent(cur)?;
        let marginals = if k % 2 == 0 { cur.col_sums() } else { cur.row_sums() };
        let product: f64 = marginals.iter().product();
        let law_rel_error = prev_prediction.map(|p| ((per - p) / p).abs());
        if law_rel_error.is_some_and(|e| e > LAW_TOL) {
            out.law_violations.push(k);
        }
        if product > 1.0 + PRODUCT_TOL {
            out.product_violations.push(k);
        }
        let predicted_next = per / product;
        out.records.push(PermanentRecord {
            k,
            permanent: per,
            log_permanent: per.ln(),
            marginal_product: product,
            predicted_next,
            law_rel_error,
        });
        prev_prediction = Some(predicted_next);
    }
    Ok(out)
}

/// `n!/nⁿ`, the minimum permanent over doubly stochastic `n×n` matrices.
pub fn van_der_waerden_bound(n: usize) -> f64 {
    (1..=n).map(|k| k as f64 / n as f64).product()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Marginals;

    #[test]
    fn small_examples() {
        let id = Matrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        assert_eq!(permanent(&id).unwrap(), 1.0);
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(permanent(&a).unwrap(), 10.0);
        let flat = Matrix::filled(3, 3, 1.0 / 3.0).unwrap();
        assert!((permanent(&flat).unwrap() - 2.0 / 9.0).abs() < 1e-15);
        assert!((van_der_waerden_bound(3) - 2.0 / 9.0).abs() < 1e-16);
    }

    #[test]
    fn size_limits() {
        let big = Matrix::filled(21, 21, 1.0).unwrap();
        assert_eq!(permanent(&big), Err(Error::TooLarge { n: 21, limit: 20 }));
        let inst = ScalingInstance::new(Matrix::filled(13, 13, 1.0).unwrap(), Marginals::ones(13, 13).unwrap()).unwrap();
        assert!(matches!(permanent_trace(&inst, 3), Err(Error::TooLarge { .. })));
    }

    #[test]
    fn doubly_stochastic_start_keeps_the_permanent() {
        let a = Matrix::from_rows(&[vec![0.2, 0.8], vec![0.8, 0.2]]).unwrap();
        let inst = ScalingInstance::new(a, Marginals::ones(2, 2).unwrap()).unwrap();
        let tr = permanent_trace(&inst, 6).unwrap();
        assert!(tr.records.iter().all(|r| (r.permanent - 0.68).abs() < 1e-15));
        assert!(tr.law_violations.is_empty());
    }
}
