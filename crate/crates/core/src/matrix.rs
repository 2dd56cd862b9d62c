//! Dense row-major matrices, target marginals and scaling instances.
//!
//! Row and column sums are always accumulated left to right in index order so
//! that every trace produced downstream is bit-reproducible.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative tolerance for accepting `‖u‖₁ = ‖v‖₁`.
pub const BALANCE_TOL: f64 = 1e-12;

/// Dense nonnegative matrix stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix of finite nonnegative entries with at least one positive entry.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        let m = Self::shaped(rows, cols, data)?;
        if let Some(x) = m.data.iter().find(|x| !x.is_finite() || **x < 0.0) {
            return Err(Error::InvalidMatrix(format!("entry {x} is not a finite nonnegative real")));
        }
        if !m.data.iter().any(|&x| x > 0.0) {
            return Err(Error::InvalidMatrix("matrix has no positive entry".into()));
        }
        Ok(m)
    }

    /// Builds a cost matrix: entries in `[0, +inf]`, all-zero allowed.
    pub fn cost(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        let m = Self::shaped(rows, cols, data)?;
        if let Some(x) = m.data.iter().find(|x| x.is_nan() || **x < 0.0) {
            return Err(Error::InvalidMatrix(format!("cost entry {x} is negative or NaN")));
        }
        Ok(m)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let (m, n, data) = flatten(rows)?;
        Self::new(m, n, data)
    }

    pub fn cost_from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let (m, n, data) = flatten(rows)?;
        Self::cost(m, n, data)
    }

    /// Matrix with every entry equal to `value`.
    pub fn filled(rows: usize, cols: usize, value: f64) -> Result<Self> {
        Self::new(rows, cols, vec![value; rows * cols])
    }

    fn shaped(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidMatrix("matrix must have at least one row and column".into()));
        }
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "{} entries for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Unchecked constructor for internal iterates whose invariants are
    /// maintained by the caller.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub(crate) fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    /// Row sums, each accumulated left to right.
    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|i| self.row(i).iter().fold(0.0, |acc, &x| acc + x)).collect()
    }

    /// Column sums, each accumulated top to bottom.
    pub fn col_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (s, &x) in sums.iter_mut().zip(self.row(i)) {
                *s += x;
            }
        }
        sums
    }

    pub fn max_entry(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_entry(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Smallest strictly positive entry, if any.
    pub fn min_positive(&self) -> Option<f64> {
        self.data.iter().copied().filter(|&x| x > 0.0).reduce(f64::min)
    }

    /// Returns `diag(x) · self · diag(y)`.
    pub fn diag_scale(&self, x: &[f64], y: &[f64]) -> Result<Self> {
        if x.len() != self.rows || y.len() != self.cols {
            return Err(Error::DimensionMismatch(format!(
                "scalers of length ({}, {}) for a {}x{} matrix",
                x.len(),
                y.len(),
                self.rows,
                self.cols
            )));
        }
        let mut out = self.clone();
        for i in 0..self.rows {
            let xi = x[i];
            for (a, &yj) in out.row_mut(i).iter_mut().zip(y) {
                *a = xi * *a * yj;
            }
        }
        Ok(out)
    }

    /// Multiplies every entry by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        Self::from_raw(self.rows, self.cols, self.data.iter().map(|&a| a * c).collect())
    }

    pub fn transpose(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for j in 0..self.cols {
            for i in 0..self.rows {
                data.push(self.get(i, j));
            }
        }
        Self::from_raw(self.cols, self.rows, data)
    }

    /// Index of the first all-zero row, if any.
    pub fn zero_row(&self) -> Option<usize> {
        (0..self.rows).find(|&i| self.row(i).iter().all(|&x| x == 0.0))
    }

    /// Index of the first all-zero column, if any.
    pub fn zero_col(&self) -> Option<usize> {
        (0..self.cols).find(|&j| (0..self.rows).all(|i| self.get(i, j) == 0.0))
    }

    /// Plain-text dense form: `m n` header then one line per row.
    pub fn to_text(&self) -> String {
        let mut s = format!("{} {}\n", self.rows, self.cols);
        for i in 0..self.rows {
            let line: Vec<String> = self.row(i).iter().map(|x| fmt_real(*x)).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }

    /// Parses the plain-text dense form. `inf` entries are accepted (cost matrices).
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut tokens = text.split_whitespace();
        let mut next_usize = |what: &str| -> Result<usize> {
            tokens
                .next()
                .ok_or_else(|| Error::Parse(format!("missing {what}")))?
                .parse::<usize>()
                .map_err(|e| Error::Parse(format!("bad {what}: {e}")))
        };
        let m = next_usize("row count")?;
        let n = next_usize("column count")?;
        let data: Vec<f64> = text
            .split_whitespace()
            .skip(2)
            .map(parse_real)
            .collect::<Result<_>>()?;
        if data.len() != m * n {
            return Err(Error::Parse(format!("expected {} entries, found {}", m * n, data.len())));
        }
        Self::cost(m, n, data)
    }

    pub fn to_json(&self) -> serde_json::Value {
        let entries: Vec<serde_json::Value> = self
            .data
            .iter()
            .map(|&x| {
                if x.is_finite() {
                    serde_json::json!(x)
                } else {
                    serde_json::json!("inf")
                }
            })
            .collect();
        serde_json::json!({ "rows": self.rows, "cols": self.cols, "entries": entries })
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Self> {
        let raw: MatrixJson = serde_json::from_value(value.clone()).map_err(|e| Error::Parse(e.to_string()))?;
        let data = raw
            .entries
            .iter()
            .map(|e| match e {
                serde_json::Value::Number(n) => n.as_f64().ok_or_else(|| Error::Parse("bad number".into())),
                serde_json::Value::String(s) => parse_real(s),
                serde_json::Value::Null => Ok(f64::INFINITY),
                other => Err(Error::Parse(format!("unexpected entry {other}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::cost(raw.rows, raw.cols, data)
    }

    /// Reads either the text or the JSON form, chosen by content.
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        if text.trim_start().starts_with('{') {
            let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Parse(e.to_string()))?;
            Self::from_json(&v)
        } else {
            Self::parse_text(&text)
        }
    }

    pub fn write_text(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    /// Re-validates as a scaling matrix (finite, nonnegative, nonzero).
    pub fn validated(self) -> Result<Self> {
        Self::new(self.rows, self.cols, self.data)
    }
}

#[derive(Deserialize)]
struct MatrixJson {
    rows: usize,
    cols: usize,
    entries: Vec<serde_json::Value>,
}

fn flatten(rows: &[Vec<f64>]) -> Result<(usize, usize, Vec<f64>)> {
    let m = rows.len();
    let n = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != n) {
        return Err(Error::DimensionMismatch("ragged rows".into()));
    }
    Ok((m, n, rows.concat()))
}

pub(crate) fn parse_real(s: &str) -> Result<f64> {
    match s {
        "inf" | "+inf" | "Inf" | "infinity" => Ok(f64::INFINITY),
        _ => s.parse::<f64>().map_err(|e| Error::Parse(format!("bad real {s:?}: {e}"))),
    }
}

pub(crate) fn fmt_real(x: f64) -> String {
    if x.is_infinite() {
        "inf".to_string()
    } else {
        let mut s = String::new();
        write!(s, "{x:e}").unwrap();
        s
    }
}

/// Reads a whitespace-separated vector of reals.
pub fn read_vector(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path)?;
    text.split_whitespace().map(parse_real).collect()
}

/// Target marginals `(u, v)`: strictly positive and balanced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Marginals {
    u: Vec<f64>,
    v: Vec<f64>,
}

impl Marginals {
    pub fn new(u: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        if u.is_empty() || v.is_empty() {
            return Err(Error::InvalidTargets("empty target vector".into()));
        }
        if let Some(x) = u.iter().chain(&v).find(|x| !x.is_finite() || **x <= 0.0) {
            return Err(Error::InvalidTargets(format!("target entry {x} is not a positive real")));
        }
        let su = sum(&u);
        let sv = sum(&v);
        if (su - sv).abs() > BALANCE_TOL * su {
            return Err(Error::InvalidTargets(format!("unbalanced targets: |u|_1 = {su}, |v|_1 = {sv}")));
        }
        Ok(Self { u, v })
    }

    /// All-ones targets for `(1,1)`-scaling.
    pub fn ones(m: usize, n: usize) -> Result<Self> {
        Self::new(vec![1.0; m], vec![1.0; n])
    }

    /// `u_i = 1/m`, `v_j = 1/n`.
    pub fn uniform(m: usize, n: usize) -> Result<Self> {
        Self::new(vec![1.0 / m as f64; m], vec![1.0 / n as f64; n])
    }

    pub fn u(&self) -> &[f64] {
        &self.u
    }

    pub fn v(&self) -> &[f64] {
        &self.v
    }

    pub fn total(&self) -> f64 {
        sum(&self.u)
    }

    /// Same targets rescaled so that both sum to one.
    pub fn normalized(&self) -> Self {
        let su = sum(&self.u);
        let sv = sum(&self.v);
        Self {
            u: self.u.iter().map(|x| x / su).collect(),
            v: self.v.iter().map(|x| x / sv).collect(),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.u.len(), self.v.len())
    }
}

/// A matrix together with its target marginals.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingInstance {
    matrix: Matrix,
    targets: Marginals,
}

impl ScalingInstance {
    /// Rejects dimension mismatches and zero rows or columns.
    pub fn new(matrix: Matrix, targets: Marginals) -> Result<Self> {
        if targets.dims() != matrix.shape() {
            return Err(Error::DimensionMismatch(format!(
                "targets of length {:?} for a {}x{} matrix",
                targets.dims(),
                matrix.rows(),
                matrix.cols()
            )));
        }
        if let Some(i) = matrix.zero_row() {
            return Err(Error::InvalidMatrix(format!("row {i} is entirely zero; scaling is undefined")));
        }
        if let Some(j) = matrix.zero_col() {
            return Err(Error::InvalidMatrix(format!("column {j} is entirely zero; scaling is undefined")));
        }
        Ok(Self { matrix, targets })
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn targets(&self) -> &Marginals {
        &self.targets
    }

    pub fn into_parts(self) -> (Matrix, Marginals) {
        (self.matrix, self.targets)
    }
}

pub(crate) fn sum(xs: &[f64]) -> f64 {
    xs.iter().fold(0.0, |acc, &x| acc + x)
}
