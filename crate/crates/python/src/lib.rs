//! Python module `headprune_py`: Gumbel subset selection, Hard Concrete
//! gates, toy models and single experiment runs.

use headprune::gumbel::{self, HeadMask, ImportanceWeights, TemperatureSchedule};
use headprune::harness::{self, DenseCache, ExperimentConfig};
use headprune::pruners::{HardConcrete, Method};
use headprune::rng::{stream, Stream};
use headprune::transformer::{Checkpoint, GatedTransformer, ModelConfig};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: headprune::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Relaxed K-hot gates of perturbed logits `r`; returns `(gates, saturated)`.
#[pyfunction]
fn soft_top_k(r: Vec<f64>, k: usize, tau: f64) -> PyResult<(Vec<f64>, bool)> {
    let g = gumbel::soft_top_k(&r, k, tau).map_err(err)?;
    Ok((g.gates, g.saturated))
}

#[pyfunction]
fn hard_top_k(r: Vec<f64>, k: usize) -> PyResult<Vec<bool>> {
    Ok(gumbel::hard_top_k(&r, k).map_err(err)?.bits().to_vec())
}

/// One Gumbel top-K draw: K heads sampled without replacement in
/// proportion to `importance`.
#[pyfunction]
#[pyo3(signature = (importance, k, seed=0))]
fn sample_subset(importance: Vec<f64>, k: usize, seed: u64) -> PyResult<Vec<usize>> {
    let w = ImportanceWeights::from_importance(&importance).map_err(err)?;
    let noise = gumbel::sample_gumbel(w.len(), &mut stream(seed, Stream::Gumbel)).map_err(err)?;
    let r = w.perturb(&noise).map_err(err)?;
    Ok(gumbel::hard_top_k(&r, k).map_err(err)?.kept())
}

/// Exact probability that Gumbel top-K returns `subset`.
#[pyfunction]
fn subset_probability(importance: Vec<f64>, subset: Vec<usize>) -> PyResult<f64> {
    let w = ImportanceWeights::from_importance(&importance).map_err(err)?;
    gumbel::subset_probability_oracle(&w, &subset).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (importance, k, samples=200_000, seed=0))]
fn oracle_check<'py>(
    py: Python<'py>,
    importance: Vec<f64>,
    k: usize,
    samples: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let rep = harness::oracle_check(&importance, k, samples, seed).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("tv_distance", rep.tv_distance)?;
    d.set_item("samples", rep.samples)?;
    d.set_item("subsets", rep.subsets)?;
    Ok(d)
}

#[pyfunction]
fn temperature_at(tau_ini: f64, tau_end: f64, n_cooldown: u64, n: u64) -> PyResult<f64> {
    Ok(TemperatureSchedule::new(tau_ini, tau_end, n_cooldown).map_err(err)?.temperature_at(n))
}

/// Closed-form `P(g != 0)` of a Hard Concrete gate.
#[pyfunction]
#[pyo3(signature = (phi, beta=2.0/3.0, gamma=-0.1, zeta=1.1))]
fn hard_concrete_prob_nonzero(phi: f64, beta: f64, gamma: f64, zeta: f64) -> PyResult<f64> {
    Ok(HardConcrete::new(beta, gamma, zeta).map_err(err)?.prob_nonzero(phi))
}

/// A gated toy Transformer.
#[pyclass]
struct Model {
    inner: GatedTransformer,
}

#[pymethods]
impl Model {
    /// Builds a freshly initialized model from a JSON model config.
    #[new]
    #[pyo3(signature = (config_json, seed=0))]
    fn new(config_json: &str, seed: u64) -> PyResult<Self> {
        let cfg: ModelConfig = serde_json::from_str(config_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
        let inner = GatedTransformer::build(cfg, &mut stream(seed, Stream::Init)).map_err(err)?;
        Ok(Model { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Model { inner: Checkpoint::load(path.as_ref()).map_err(err)?.model })
    }

    #[getter]
    fn head_count(&self) -> usize {
        self.inner.head_count()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    /// Original flat indices of the heads still present.
    fn head_origins(&self) -> Vec<usize> {
        self.inner.head_origins()
    }

    /// Copy with the heads where `mask` is false physically removed.
    fn compact(&self, mask: Vec<bool>) -> PyResult<Model> {
        Ok(Model { inner: self.inner.compact(&HeadMask::new(mask)).map_err(err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        let mask = HeadMask::all(self.inner.head_count());
        Checkpoint::new(self.inner.clone(), mask).map_err(err)?.save(path.as_ref()).map_err(err)
    }
}

/// Trains and prunes one cell of an experiment config; returns the sweep
/// record fields plus per-epoch training losses.
#[pyfunction]
#[pyo3(signature = (config_json, method, k=None, lam=None, seed=0))]
fn run_cell<'py>(
    py: Python<'py>,
    config_json: &str,
    method: &str,
    k: Option<usize>,
    lam: Option<f64>,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = ExperimentConfig::from_json(config_json).map_err(err)?;
    let method = Method::parse(method).map_err(err)?;
    let res = py.detach(|| harness::run_cell(&cfg, method, k, lam, seed, &mut DenseCache::new())).map_err(err)?;
    let r = &res.record;
    let d = PyDict::new(py);
    d.set_item("method", r.method.name())?;
    d.set_item("k", r.k)?;
    d.set_item("seed", r.seed)?;
    d.set_item("lambda", r.lambda)?;
    d.set_item("metric_pre", r.metric_pre)?;
    d.set_item("metric_post", r.metric_post)?;
    d.set_item("params", r.params)?;
    d.set_item("mask", &r.mask)?;
    d.set_item("epoch_losses", res.epoch_losses.clone())?;
    Ok(d)
}

#[pymodule]
fn headprune_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(soft_top_k, m)?)?;
    m.add_function(wrap_pyfunction!(hard_top_k, m)?)?;
    m.add_function(wrap_pyfunction!(sample_subset, m)?)?;
    m.add_function(wrap_pyfunction!(subset_probability, m)?)?;
    m.add_function(wrap_pyfunction!(oracle_check, m)?)?;
    m.add_function(wrap_pyfunction!(temperature_at, m)?)?;
    m.add_function(wrap_pyfunction!(hard_concrete_prob_nonzero, m)?)?;
    m.add_function(wrap_pyfunction!(run_cell, m)?)?;
    m.add_class::<Model>()?;
    Ok(())
}
