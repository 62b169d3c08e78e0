//! Python bindings: experiment pipeline, layer files, routing, pruning
//! selection and checkpoint scoring.

use std::path::PathBuf;

use ndarray::Array2;
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use moe::config::ExperimentConfig;
use moe::harness;
use moe::manifest::{self, CheckpointManifest};
use moe::model::{self, MoELayer, PruneMask, RoutingConfig, RoutingMode};
use moe::pruning::{self, Grouping};
use moe::Tokens;

fn py_err(e: moe::Error) -> PyErr {
    match e.exit_code() {
        1 => PyValueError::new_err(e.to_string()),
        3 => PyOSError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn routing(mode: &str, l: usize) -> PyResult<RoutingConfig> {
    let mode = match mode {
        "token_choice" => RoutingMode::TokenChoice,
        "expert_choice" => RoutingMode::ExpertChoice,
        other => return Err(PyValueError::new_err(format!("unknown routing mode '{other}'"))),
    };
    Ok(RoutingConfig { mode, l })
}

fn mask_for(k: usize, retained: Option<Vec<usize>>) -> PyResult<PruneMask> {
    match retained {
        Some(idx) => PruneMask::from_indices(k, &idx).map_err(py_err),
        None => Ok(PruneMask::full(k)),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let n = rows.len();
    let d = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    Ok(Array2::from_shape_vec((n, d), rows.into_iter().flatten().collect()).expect("rectangular"))
}

fn rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// Experiment configuration; every field has a default.
#[pyclass(name = "ExperimentConfig", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (json = None))]
    fn new(json: Option<&str>) -> PyResult<Self> {
        let inner = match json {
            Some(text) => ExperimentConfig::from_json(text).map_err(py_err)?,
            None => ExperimentConfig::default(),
        };
        Ok(PyConfig { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyConfig {
            inner: ExperimentConfig::load(&path).map_err(py_err)?,
        })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    fn set_seed(&mut self, seed: u64) {
        self.inner.set_seed(seed);
    }

    #[getter]
    fn rho(&self) -> Vec<f64> {
        self.inner.prune.rho.clone()
    }

    #[setter]
    fn set_rho(&mut self, rho: Vec<f64>) {
        self.inner.prune.rho = rho;
    }

    #[getter]
    fn criterion(&self) -> String {
        self.inner.prune.criterion.name().to_string()
    }

    #[setter]
    fn set_criterion(&mut self, name: &str) -> PyResult<()> {
        self.inner.prune.criterion = name.parse().map_err(py_err)?;
        Ok(())
    }

    fn __repr__(&self) -> String {
        format!("ExperimentConfig({})", serde_json_compact(&self.inner))
    }
}

fn serde_json_compact(cfg: &ExperimentConfig) -> String {
    cfg.to_json().split_whitespace().collect::<Vec<_>>().join(" ")
}

/// An analyzed MoE layer with fixed classification signs.
#[pyclass(name = "MoELayer")]
struct PyLayer {
    inner: MoELayer,
}

#[pymethods]
impl PyLayer {
    /// `routers` is `k x d`, `hidden` is `k` lists of `m x d` neurons.
    #[new]
    fn new(routers: Vec<Vec<f64>>, hidden: Vec<Vec<Vec<f64>>>, signs: Vec<f64>) -> PyResult<Self> {
        let routers = matrix(routers)?;
        let (k, d) = routers.dim();
        let m = hidden.first().map_or(0, |h| h.len());
        if hidden.len() != k || hidden.iter().any(|h| h.len() != m || h.iter().any(|r| r.len() != d)) {
            return Err(PyValueError::new_err("hidden must be k x m x d"));
        }
        let flat: Vec<f64> = hidden.into_iter().flatten().flatten().collect();
        let hidden = ndarray::Array3::from_shape_vec((k, m, d), flat).expect("sized");
        Ok(PyLayer {
            inner: MoELayer::analyzed(routers, hidden, signs).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyLayer {
            inner: MoELayer::load(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.k()
    }

    #[getter]
    fn m(&self) -> usize {
        self.inner.m()
    }

    #[getter]
    fn d(&self) -> usize {
        self.inner.d()
    }

    #[getter]
    fn routers(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.routers)
    }

    #[getter]
    fn signs(&self) -> PyResult<Vec<f64>> {
        Ok(self.inner.signs().map_err(py_err)?.to_vec())
    }

    fn router_norms(&self) -> Vec<f64> {
        self.inner.router_norms()
    }

    /// Dense `k x n` gate matrix for one sample of `n x d` tokens.
    #[pyo3(signature = (tokens, mode, l, retained = None))]
    fn gates(&self, tokens: Vec<Vec<f64>>, mode: &str, l: usize, retained: Option<Vec<usize>>) -> PyResult<Vec<Vec<f64>>> {
        let x = matrix(tokens)?;
        let mask = mask_for(self.inner.k(), retained)?;
        let g = model::route(&self.inner, &Tokens::dense(x.view()), routing(mode, l)?, &mask).map_err(py_err)?;
        Ok(rows(&g.gate_matrix()))
    }

    /// Layer output `f(x)` for one sample; the prediction is its sign.
    #[pyo3(signature = (tokens, mode, l, retained = None))]
    fn classify(&self, tokens: Vec<Vec<f64>>, mode: &str, l: usize, retained: Option<Vec<usize>>) -> PyResult<f64> {
        let x = matrix(tokens)?;
        let mask = mask_for(self.inner.k(), retained)?;
        model::classify(&self.inner, &Tokens::dense(x.view()), routing(mode, l)?, &mask).map_err(py_err)
    }
}

/// `||w_s^(T)|| - ||w_s^(0)||` per expert.
#[pyfunction]
fn router_norm_change(pre: &PyLayer, post: &PyLayer) -> PyResult<Vec<f64>> {
    pruning::router_norm_change(&pre.inner, &post.inner).map_err(py_err)
}

/// Retained experts when keeping the highest scores at ratio `rho`, per
/// sign group when `groups` is given, otherwise over the whole layer.
#[pyfunction]
#[pyo3(signature = (scores, rho, groups = None))]
fn select_retained(scores: Vec<f64>, rho: f64, groups: Option<Vec<usize>>) -> PyResult<Vec<usize>> {
    let (groups, grouping) = match groups {
        Some(g) => (g, Grouping::BySignGroup),
        None => (vec![0; scores.len()], Grouping::WholeLayer),
    };
    let decision = pruning::select_retained(&scores, rho, grouping, &groups).map_err(py_err)?;
    Ok(decision.retained.indices())
}

/// Runs the full pipeline at the config's single ratio. Reports are
/// written to `out` when given.
#[pyfunction]
#[pyo3(signature = (config, out = None))]
fn run<'py>(py: Python<'py>, config: &PyConfig, out: Option<PathBuf>) -> PyResult<Bound<'py, PyDict>> {
    let cfg = config.inner.clone();
    let report = py
        .detach(|| harness::run_full_pipeline(&cfg, out.as_deref()))
        .map_err(py_err)?;
    let p = &report.prepared;
    let d = PyDict::new(py);
    d.set_item("final_train_error", p.final_train_error())?;
    d.set_item("gamma", p.assumptions.gamma)?;
    d.set_item("important", p.assumptions.important())?;
    d.set_item("deltas", p.deltas.clone())?;
    d.set_item("unpruned_accuracy", p.unpruned_accuracy)?;
    d.set_item("retained", report.point.retained.indices())?;
    d.set_item("accuracy", report.point.accuracy)?;
    d.set_item("total_flops", report.point.flops.total)?;
    d.set_item("finetuned_accuracy", report.point.finetuned.as_ref().map(|f| f.accuracy))?;
    Ok(d)
}

/// Trains once and prunes at every ratio; returns the accuracy table as CSV.
#[pyfunction]
#[pyo3(signature = (config, rho, out = None))]
fn sweep(py: Python<'_>, config: &PyConfig, rho: Vec<f64>, out: Option<PathBuf>) -> PyResult<String> {
    let cfg = config.inner.clone();
    let report = py
        .detach(|| harness::run_pruning_sweep(&cfg, &rho, out.as_deref()))
        .map_err(py_err)?;
    Ok(report.accuracy_csv())
}

/// Largest relative gradient error per routing mode over random instances.
#[pyfunction]
#[pyo3(signature = (instances = 100, seed = 0))]
fn gradcheck(py: Python<'_>, instances: usize, seed: u64) -> PyResult<(f64, f64)> {
    let report = py.detach(|| harness::gradcheck_suite(instances, seed)).map_err(py_err)?;
    Ok((
        report.max_error(RoutingMode::TokenChoice),
        report.max_error(RoutingMode::ExpertChoice),
    ))
}

/// Router-norm changes per layer of a checkpoint manifest, as
/// `{layer: (deltas, retained)}`.
#[pyfunction]
#[pyo3(signature = (manifest_path, rho = 0.0))]
fn score_checkpoints<'py>(py: Python<'py>, manifest_path: PathBuf, rho: f64) -> PyResult<Bound<'py, PyDict>> {
    let m = CheckpointManifest::load(&manifest_path).map_err(py_err)?;
    let base = manifest_path.parent().map(PathBuf::from).unwrap_or_default();
    let scores = manifest::score_checkpoints(&m, &base, rho).map_err(py_err)?;
    let d = PyDict::new(py);
    for s in scores {
        d.set_item(s.name, (s.deltas, s.retained))?;
    }
    Ok(d)
}

#[pymodule]
#[pyo3(name = "moe_prune")]
fn init_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyLayer>()?;
    m.add_function(wrap_pyfunction!(router_norm_change, m)?)?;
    m.add_function(wrap_pyfunction!(select_retained, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(sweep, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(score_checkpoints, m)?)?;
    Ok(())
}
