//! Python bindings for roadmrf.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use roadmrf::datagen::{self, GroundTruth, TrafficSpec};
use roadmrf::eval::EvalPlan;
use roadmrf::learn::LearnConfig;
use roadmrf::{PartialSnapshot, Scheme, Snapshot, SolverConfig};

fn to_py(e: roadmrf::Error) -> PyErr {
    if e.is_validation() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn snapshots(rows: Vec<Vec<f64>>) -> Vec<Snapshot> {
    rows.into_iter().map(Snapshot).collect()
}

/// Undirected road network; roads are vertices, junction adjacency are edges.
#[pyclass(name = "RoadGraph", module = "roadmrf", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyRoadGraph {
    inner: roadmrf::RoadGraph,
}

#[pymethods]
impl PyRoadGraph {
    #[new]
    #[pyo3(signature = (edges, vertices = None))]
    fn new(edges: Vec<(String, String)>, vertices: Option<Vec<String>>) -> PyResult<Self> {
        roadmrf::RoadGraph::with_vertices(vertices.unwrap_or_default(), edges)
            .map(|inner| Self { inner })
            .map_err(to_py)
    }

    #[staticmethod]
    fn grid(width: usize, height: usize) -> PyResult<Self> {
        datagen::grid(width, height)
            .map(|inner| Self { inner })
            .map_err(to_py)
    }

    #[staticmethod]
    #[pyo3(signature = (n, density = 0.5, seed = 0))]
    fn random_planar(n: usize, density: f64, seed: u64) -> PyResult<Self> {
        datagen::random_planar(n, density, seed)
            .map(|inner| Self { inner })
            .map_err(to_py)
    }

    #[staticmethod]
    fn read_json(path: &str) -> PyResult<Self> {
        roadmrf::RoadGraph::read_json(path)
            .map(|inner| Self { inner })
            .map_err(to_py)
    }

    fn write_json(&self, path: &str) -> PyResult<()> {
        self.inner.write_json(path).map_err(to_py)
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn edge_count(&self) -> usize {
        self.inner.edge_count()
    }

    /// Road ids in index order.
    #[getter]
    fn labels(&self) -> Vec<String> {
        self.inner.labels().iter().map(|l| l.to_string()).collect()
    }

    /// Edges as index pairs `(i, j)` with `i < j`.
    #[getter]
    fn edges(&self) -> Vec<(usize, usize)> {
        self.inner.edges().to_vec()
    }

    fn neighbors(&self, i: usize) -> PyResult<Vec<usize>> {
        if i >= self.inner.n() {
            return Err(PyValueError::new_err(format!("vertex {i} out of range")));
        }
        Ok(self.inner.neighbors(i).to_vec())
    }

    #[getter]
    fn fingerprint(&self) -> String {
        self.inner.fingerprint().to_owned()
    }

    fn __len__(&self) -> usize {
        self.inner.n()
    }

    fn __repr__(&self) -> String {
        format!(
            "RoadGraph(n={}, edges={})",
            self.inner.n(),
            self.inner.edge_count()
        )
    }
}

/// Fitted parameters: `beta`, `eta`, `epsilon` and the training penalty.
#[pyclass(name = "Model", module = "roadmrf", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyModel {
    inner: roadmrf::Model,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (graph, beta, eta, epsilon = 1e-4, lambda_ = 0.0))]
    fn new(
        graph: &PyRoadGraph,
        beta: Vec<f64>,
        eta: f64,
        epsilon: f64,
        lambda_: f64,
    ) -> PyResult<Self> {
        roadmrf::Model::new(&graph.inner, beta, eta, epsilon, lambda_)
            .map(|inner| Self { inner })
            .map_err(to_py)
    }

    #[staticmethod]
    fn read_json(path: &str) -> PyResult<Self> {
        roadmrf::Model::read_json(path)
            .map(|inner| Self { inner })
            .map_err(to_py)
    }

    fn write_json(&self, path: &str) -> PyResult<()> {
        self.inner.write_json(path).map_err(to_py)
    }

    #[getter]
    fn beta(&self) -> Vec<f64> {
        self.inner.beta.clone()
    }

    #[getter]
    fn eta(&self) -> f64 {
        self.inner.eta
    }

    #[getter]
    fn epsilon(&self) -> f64 {
        self.inner.epsilon
    }

    #[getter]
    fn lambda_(&self) -> f64 {
        self.inner.lambda_used
    }

    #[getter]
    fn graph_fingerprint(&self) -> String {
        self.inner.graph_fingerprint.clone()
    }

    /// Prior mean `C⁻¹β / η` on `graph`.
    fn prior_mean(&self, graph: &PyRoadGraph) -> PyResult<Vec<f64>> {
        self.inner.prior_mean(&graph.inner).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(n={}, eta={}, epsilon={}, lambda={})",
            self.inner.beta.len(),
            self.inner.eta,
            self.inner.epsilon,
            self.inner.lambda_used
        )
    }
}

/// Fits a model to complete snapshots. Returns `(model, report)`.
#[pyfunction]
#[pyo3(signature = (graph, snapshots, epsilon = 1e-4, lambda_ = 0.0, max_steps = 500, grad_tolerance = 1e-8))]
fn fit<'py>(
    py: Python<'py>,
    graph: &PyRoadGraph,
    snapshots: Vec<Vec<f64>>,
    epsilon: f64,
    lambda_: f64,
    max_steps: usize,
    grad_tolerance: f64,
) -> PyResult<(PyModel, Bound<'py, PyDict>)> {
    let cfg = LearnConfig {
        lambda: lambda_,
        max_steps,
        grad_tolerance,
        ..Default::default()
    };
    let snaps = self::snapshots(snapshots);
    let fitted = py
        .detach(|| roadmrf::fit(&snaps, &graph.inner, epsilon, &cfg))
        .map_err(to_py)?;
    let report = PyDict::new(py);
    report.set_item("final_objective", fitted.report.final_objective)?;
    report.set_item("grad_norm", fitted.report.grad_norm)?;
    report.set_item("steps", fitted.report.steps)?;
    report.set_item("objective_trace", fitted.report.objective_trace)?;
    report.set_item("wall_time_secs", fitted.report.wall_time_secs)?;
    Ok((
        PyModel {
            inner: fitted.model,
        },
        report,
    ))
}

/// Draws `count` snapshots from the Gaussian field of `model`.
#[pyfunction]
#[pyo3(signature = (graph, model, count, seed = 0, clamp_negative = false))]
fn sample(
    py: Python<'_>,
    graph: &PyRoadGraph,
    model: &PyModel,
    count: usize,
    seed: u64,
    clamp_negative: bool,
) -> PyResult<Vec<Vec<f64>>> {
    model.inner.check_graph(&graph.inner).map_err(to_py)?;
    let spec = TrafficSpec {
        ground_truth: GroundTruth::Gmrf {
            beta: model.inner.beta.clone(),
            eta: model.inner.eta,
            epsilon: model.inner.epsilon,
        },
        snapshots: count,
        clamp_negative,
        seed,
    };
    let snaps = py
        .detach(|| datagen::sample_snapshots(&graph.inner, &spec))
        .map_err(to_py)?;
    Ok(snaps.into_iter().map(|s| s.0).collect())
}

/// Hides each value independently with probability `p` (hidden entries become `None`).
#[pyfunction]
#[pyo3(signature = (values, p, seed = 0))]
fn mask(values: Vec<f64>, p: f64, seed: u64) -> PyResult<Vec<Option<f64>>> {
    let partial = datagen::mask_snapshot(&Snapshot(values), p, seed).map_err(to_py)?;
    Ok(partial.values().to_vec())
}

/// Fills in the `None` entries of `partial`. Returns a dict with the
/// estimates and solver diagnostics.
#[pyfunction]
#[pyo3(signature = (graph, model, partial, tolerance = 1e-8, max_iterations = None, scheme = "gauss_seidel"))]
fn reconstruct<'py>(
    py: Python<'py>,
    graph: &PyRoadGraph,
    model: &PyModel,
    partial: Vec<Option<f64>>,
    tolerance: f64,
    max_iterations: Option<usize>,
    scheme: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let scheme: Scheme = scheme.parse().map_err(to_py)?;
    let cfg = SolverConfig {
        tolerance,
        max_iterations,
        scheme,
        warm_start: false,
    };
    let partial = PartialSnapshot::new(partial).map_err(to_py)?;
    let result = py
        .detach(|| roadmrf::reconstruct_snapshot(&graph.inner, &model.inner, &partial, &cfg))
        .map_err(to_py)?;
    let out = PyDict::new(py);
    out.set_item("estimates", result.estimates)?;
    out.set_item("raw_estimates", result.raw_estimates)?;
    out.set_item("unobserved", result.unobserved)?;
    out.set_item("iterations", result.iterations_used)?;
    out.set_item("final_residual", result.final_residual)?;
    out.set_item("converged", result.converged)?;
    Ok(out)
}

/// Mean absolute error over the `unobserved` indices.
#[pyfunction]
fn mae(truth: Vec<f64>, estimates: Vec<f64>, unobserved: Vec<usize>) -> PyResult<f64> {
    roadmrf::eval::mae_values(&truth, &estimates, &unobserved).map_err(to_py)
}

/// Leave-one-out evaluation; returns the report as a JSON string.
#[pyfunction]
#[pyo3(signature = (graph, snapshots, p_values, lambda_values = vec![0.0], trials = 500, seed = 0, epsilon = 1e-4))]
#[allow(clippy::too_many_arguments)]
fn loocv(
    py: Python<'_>,
    graph: &PyRoadGraph,
    snapshots: Vec<Vec<f64>>,
    p_values: Vec<f64>,
    lambda_values: Vec<f64>,
    trials: usize,
    seed: u64,
    epsilon: f64,
) -> PyResult<String> {
    let plan = EvalPlan {
        p_values,
        lambda_values,
        trials_per_snapshot: trials,
        seed,
        epsilon,
        ..Default::default()
    };
    let snaps = self::snapshots(snapshots);
    let report = py
        .detach(|| roadmrf::loocv(&snaps, &graph.inner, &plan))
        .map_err(to_py)?;
    report.to_json().map_err(to_py)
}

#[pymodule]
fn _roadmrf(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRoadGraph>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(sample, m)?)?;
    m.add_function(wrap_pyfunction!(mask, m)?)?;
    m.add_function(wrap_pyfunction!(reconstruct, m)?)?;
    m.add_function(wrap_pyfunction!(mae, m)?)?;
    m.add_function(wrap_pyfunction!(loocv, m)?)?;
    Ok(())
}
