//! Python bindings: matrices travel as lists of rows, structured reports as
//! dictionaries.

use pyo3::create_exception;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use sinkscale::bench::{run_experiment, ExperimentConfig, ExperimentId};
use sinkscale::eot::{solve_eot, Domain, EotProblem};
use sinkscale::generators::{generate, Family, Params};
use sinkscale::reduction::{auto_l, discretize, expand, verify_equivalence};
use sinkscale::scaling::{marginal_error_l1, nu};
use sinkscale::{Marginals, Matrix, ScalingInstance, TraceOptions};

create_exception!(pysinkscale, SinkscaleError, PyValueError);

fn err(e: sinkscale::Error) -> PyErr {
    SinkscaleError::new_err(e.to_string())
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    Matrix::from_rows(&rows).map_err(err)
}

fn uniform_targets(m: &Matrix, u: Option<Vec<f64>>, v: Option<Vec<f64>>) -> PyResult<Marginals> {
    let u = u.unwrap_or_else(|| vec![1.0 / m.rows() as f64; m.rows()]);
    let v = v.unwrap_or_else(|| vec![1.0 / m.cols() as f64; m.cols()]);
    Marginals::new(u, v).map_err(err)
}

fn to_py(py: Python<'_>, value: &serde_json::Value) -> PyResult<Py<PyAny>> {
    let json = py.import("json")?;
    Ok(json.call_method1("loads", (value.to_string(),))?.unbind())
}

/// A matrix paired with target marginals; targets default to all ones.
#[pyclass(name = "Instance", frozen)]
struct PyInstance {
    inner: ScalingInstance,
}

#[pymethods]
impl PyInstance {
    #[new]
    #[pyo3(signature = (matrix, u=None, v=None))]
    fn new(matrix: Vec<Vec<f64>>, u: Option<Vec<f64>>, v: Option<Vec<f64>>) -> PyResult<Self> {
        let m = self::matrix(matrix)?;
        let t = match (u, v) {
            (None, None) => Marginals::ones(m.rows(), m.cols()),
            (Some(u), Some(v)) => Marginals::new(u, v),
            _ => return Err(SinkscaleError::new_err("pass both u and v, or neither")),
        }
        .map_err(err)?;
        Ok(Self { inner: ScalingInstance::new(m, t).map_err(err)? })
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        self.inner.matrix().shape()
    }

    #[getter]
    fn matrix(&self) -> Vec<Vec<f64>> {
        self.inner.matrix().to_rows()
    }

    #[getter]
    fn u(&self) -> Vec<f64> {
        self.inner.targets().u().to_vec()
    }

    #[getter]
    fn v(&self) -> Vec<f64> {
        self.inner.targets().v().to_vec()
    }

    fn nu(&self) -> f64 {
        nu(self.inner.matrix())
    }

    /// `(row_err, col_err)` of the matrix itself against the targets.
    fn marginal_error(&self) -> PyResult<(f64, f64)> {
        marginal_error_l1(self.inner.matrix(), self.inner.targets()).map_err(err)
    }

    #[pyo3(signature = (rho=None))]
    fn diagnose(&self, py: Python<'_>, rho: Option<f64>) -> PyResult<Py<PyAny>> {
        let rep = sinkscale::diagnostics::diagnose(&self.inner, rho, None);
        to_py(py, &serde_json::to_value(&rep).expect("plain record"))
    }

    #[pyo3(signature = (eps=1e-6, max_iter=1_000_000, permanent=false))]
    fn scale(&self, eps: f64, max_iter: usize, permanent: bool) -> PyResult<ScaleResult> {
        let opts = TraceOptions { permanent, ..TraceOptions::default() };
        let out = sinkscale::sk_run(&self.inner, eps, max_iter, &opts).map_err(err)?;
        Ok(ScaleResult {
            iterations: out.iterations(),
            converged: out.converged,
            final_error: out.final_error(),
            errors: out.trace.errors(),
            trace_csv: out.trace.to_csv(),
            row_scalers: out.state.row_scalers().to_vec(),
            col_scalers: out.state.col_scalers().to_vec(),
            matrix: out.state.into_matrix().to_rows(),
        })
    }

    fn __repr__(&self) -> String {
        let (m, n) = self.shape();
        format!("Instance({m}x{n})")
    }
}

#[pyclass(frozen, get_all)]
struct ScaleResult {
    iterations: Option<usize>,
    converged: bool,
    final_error: f64,
    errors: Vec<f64>,
    trace_csv: String,
    row_scalers: Vec<f64>,
    col_scalers: Vec<f64>,
    matrix: Vec<Vec<f64>>,
}

#[pyclass(frozen, get_all)]
struct EotResult {
    plan: Vec<Vec<f64>>,
    f: Vec<f64>,
    g: Vec<f64>,
    domain: String,
    iterations: Option<usize>,
    converged: bool,
    final_error: f64,
}

/// SK on the Gibbs kernel `exp(-eta * cost)`; targets default to uniform.
#[pyfunction]
#[pyo3(signature = (cost, eta, u=None, v=None, eps=1e-6, max_iter=1_000_000, prescale=false, domain="auto"))]
#[allow(clippy::too_many_arguments)]
fn solve(
    cost: Vec<Vec<f64>>,
    eta: f64,
    u: Option<Vec<f64>>,
    v: Option<Vec<f64>>,
    eps: f64,
    max_iter: usize,
    prescale: bool,
    domain: &str,
) -> PyResult<EotResult> {
    let c = Matrix::cost_from_rows(&cost).map_err(err)?;
    let t = uniform_targets(&c, u, v)?;
    let domain: Domain = domain.parse().map_err(err)?;
    let problem = EotProblem::new(c, eta, t, prescale).map_err(err)?;
    let sol = solve_eot(&problem, eps, max_iter, domain).map_err(err)?;
    Ok(EotResult {
        iterations: sol.iterations(),
        converged: sol.converged,
        final_error: sol.trace.last().map_or(f64::INFINITY, |r| r.total_err),
        domain: if sol.domain == Domain::Log { "log" } else { "direct" }.to_string(),
        plan: sol.plan.to_rows(),
        f: sol.potentials.f,
        g: sol.potentials.g,
    })
}

#[pyfunction]
fn permanent(matrix: Vec<Vec<f64>>) -> PyResult<f64> {
    sinkscale::permanent::permanent(&self::matrix(matrix)?).map_err(err)
}

/// Instance from a named family, with its sidecar under `"sidecar"`.
#[pyfunction]
#[pyo3(signature = (family, params="", seed=0))]
fn gen(py: Python<'_>, family: &str, params: &str, seed: u64) -> PyResult<Py<PyDict>> {
    let fam: Family = family.parse().map_err(err)?;
    let g = generate(fam, &Params::parse(params).map_err(err)?, seed).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("matrix", g.instance.as_ref().map(|i| i.matrix().to_rows()))?;
    d.set_item("u", g.targets.u().to_vec())?;
    d.set_item("v", g.targets.v().to_vec())?;
    d.set_item("sidecar", to_py(py, &g.sidecar())?)?;
    Ok(d.unbind())
}

/// Expanded `(1,1)`-instance; `l` defaults to the targets' common denominator.
#[pyfunction]
#[pyo3(signature = (instance, l=None, verify_steps=0))]
fn reduce(py: Python<'_>, instance: &PyInstance, l: Option<u64>, verify_steps: usize) -> PyResult<Py<PyDict>> {
    let inst = &instance.inner;
    let l = match l {
        Some(l) => l,
        None => auto_l(inst.targets()).ok_or_else(|| SinkscaleError::new_err("no small common denominator; pass l"))?,
    };
    let ti = discretize(inst.targets(), l).map_err(err)?;
    let red = expand(inst, &ti, false).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("matrix", red.g.to_rows())?;
    d.set_item("sidecar", to_py(py, &red.sidecar())?)?;
    if verify_steps > 0 {
        let rep = verify_equivalence(inst, l, verify_steps, false).map_err(err)?;
        d.set_item("max_deviation", rep.max_deviation)?;
        d.set_item("max_block_spread", rep.max_block_spread)?;
    }
    Ok(d.unbind())
}

/// Runs an experiment with its default grids; returns the results CSV.
#[pyfunction(name = "bench")]
#[pyo3(signature = (experiment, seed=0, threads=0))]
fn run_bench(experiment: &str, seed: u64, threads: usize) -> PyResult<String> {
    let id: ExperimentId = experiment.parse().map_err(err)?;
    let cfg = ExperimentConfig { seed, ..ExperimentConfig::defaults(id) };
    Ok(run_experiment(&cfg, threads).map_err(err)?.to_csv())
}

#[pymodule]
fn pysinkscale(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("SinkscaleError", m.py().get_type::<SinkscaleError>())?;
    m.add_class::<PyInstance>()?;
    m.add_class::<ScaleResult>()?;
    m.add_class::<EotResult>()?;
    m.add_function(wrap_pyfunction!(solve, m)?)?;
    m.add_function(wrap_pyfunction!(permanent, m)?)?;
    m.add_function(wrap_pyfunction!(gen, m)?)?;
    m.add_function(wrap_pyfunction!(reduce, m)?)?;
    m.add_function(wrap_pyfunction!(run_bench, m)?)?;
    Ok(())
}
