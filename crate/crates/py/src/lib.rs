//! Python bindings: experiments, checkpoints and the scalar helpers.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use msrl_core::domain::GroupCatalog;
use msrl_core::error::MsrlError;
use msrl_core::io::config::WorldSpec;
use msrl_core::io::{checkpoint_from_text, checkpoint_to_text, metrics_to_csv, DataSpec, ExperimentConfig};
use msrl_core::metrics::{EvalSet, MetricsSnapshot};
use msrl_core::objective::Variant;
use msrl_core::scheduler::{ScheduleConstants, ScheduleState};
use msrl_core::trainer::{TrainState, Trainer, TrainerConfig};
use msrl_core::world::oracle_relevance;

fn to_py(e: MsrlError) -> PyErr {
    match e.exit_code() {
        2 => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn snapshot_dict<'py>(py: Python<'py>, m: &MetricsSnapshot) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("iteration", m.iteration)?;
    d.set_item("loss", m.loss)?;
    d.set_item("mean_R_all", m.mean_r_all)?;
    d.set_item("mean_R_selected", m.mean_r_selected)?;
    d.set_item("selected_total", m.selected_total)?;
    d.set_item("lambda1", m.lambda1)?;
    d.set_item("lambda2", m.lambda2)?;
    d.set_item("gamma", m.gamma)?;
    d.set_item("val_acc", m.val_acc)?;
    d.set_item("selected_per_group", m.selected_per_group.clone())?;
    d.set_item("acc_per_group", m.acc_per_group.clone())?;
    Ok(d)
}

/// A training run over an in-memory world or dataset.
#[pyclass(module = "msrl")]
struct Experiment {
    config: ExperimentConfig,
    catalog: GroupCatalog,
    eval: EvalSet,
    state: Option<TrainState>,
}

impl Experiment {
    fn build(config: ExperimentConfig) -> Result<Self, MsrlError> {
        let (catalog, eval) = config.materialize(std::path::Path::new("."))?;
        let state = Trainer::new(&catalog, &eval, config.trainer.clone())?.into_state();
        Ok(Experiment { config, catalog, eval, state: Some(state) })
    }

    fn with_trainer<T>(&mut self, f: impl FnOnce(&mut Trainer<'_>) -> Result<T, MsrlError>) -> PyResult<T> {
        let state = self.state.take().ok_or_else(|| PyRuntimeError::new_err("experiment state lost after an error"))?;
        let mut trainer = Trainer::resume(&self.catalog, &self.eval, self.config.trainer.clone(), state).map_err(to_py)?;
        let out = f(&mut trainer);
        self.state = Some(trainer.into_state());
        out.map_err(to_py)
    }
}

#[pymethods]
impl Experiment {
    /// Parses an experiment config JSON document.
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Self::build(ExperimentConfig::from_json(text).map_err(to_py)?).map_err(to_py)
    }

    /// The desk-scale synthetic world with default trainer settings.
    #[staticmethod]
    #[pyo3(signature = (variant = "msrl", seed = 1, iterations = 3000))]
    fn desk(variant: &str, seed: u64, iterations: usize) -> PyResult<Self> {
        let variant: Variant = variant.parse().map_err(to_py)?;
        let trainer = TrainerConfig { variant, seed, iterations, ..TrainerConfig::default() };
        Self::build(ExperimentConfig::new(DataSpec::World(WorldSpec::desk()), trainer)).map_err(to_py)
    }

    /// Resumes from checkpoint text; the config must match the checkpoint.
    #[staticmethod]
    fn from_checkpoint(config_json: &str, checkpoint: &str) -> PyResult<Self> {
        let config = ExperimentConfig::from_json(config_json).map_err(to_py)?;
        let ckpt = checkpoint_from_text(checkpoint).map_err(to_py)?;
        if ckpt.config != config.trainer {
            return Err(PyValueError::new_err("checkpoint was written under a different trainer config"));
        }
        let (catalog, eval) = config.materialize(std::path::Path::new(".")).map_err(to_py)?;
        Trainer::resume(&catalog, &eval, config.trainer.clone(), ckpt.state.clone()).map_err(to_py)?;
        Ok(Experiment { config, catalog, eval, state: Some(ckpt.state) })
    }

    #[getter]
    fn iteration(&self) -> usize {
        self.state.as_ref().map_or(0, |s| s.iteration)
    }

    #[getter]
    fn variant(&self) -> &'static str {
        self.config.trainer.variant.name()
    }

    #[getter]
    fn n_groups(&self) -> usize {
        self.catalog.n_groups()
    }

    /// Takes `n` steps, never past the configured iteration count.
    fn step(&mut self, n: usize) -> PyResult<usize> {
        let target = (self.iteration() + n).min(self.config.trainer.iterations);
        self.with_trainer(|t| t.run_until(target, &mut |_| {}))?;
        Ok(self.iteration())
    }

    /// Runs to the configured iteration count.
    fn run(&mut self, py: Python<'_>) -> PyResult<Vec<Py<PyDict>>> {
        let total = self.config.trainer.iterations;
        self.with_trainer(|t| t.run_until(total, &mut |_| {}))?;
        self.metrics(py)
    }

    fn metrics(&self, py: Python<'_>) -> PyResult<Vec<Py<PyDict>>> {
        let state = self.state.as_ref().ok_or_else(|| PyRuntimeError::new_err("no state"))?;
        state.metrics.iter().map(|m| snapshot_dict(py, m).map(Bound::unbind)).collect()
    }

    fn metrics_csv(&self) -> PyResult<String> {
        let state = self.state.as_ref().ok_or_else(|| PyRuntimeError::new_err("no state"))?;
        metrics_to_csv(&state.metrics, self.catalog.n_groups()).map_err(to_py)
    }

    fn checkpoint(&self) -> PyResult<String> {
        let state = self.state.as_ref().ok_or_else(|| PyRuntimeError::new_err("no state"))?;
        checkpoint_to_text(&self.config.trainer, state).map_err(to_py)
    }

    fn config_json(&self) -> PyResult<String> {
        self.config.to_json().map_err(to_py)
    }
}

/// Pace thresholds and group weight of the self-paced schedule.
#[pyclass(module = "msrl", name = "ScheduleState", skip_from_py_object)]
#[derive(Clone)]
struct PySchedule {
    inner: ScheduleState,
}

#[pymethods]
impl PySchedule {
    #[new]
    #[pyo3(signature = (lambda1 = 0.5, lambda2 = 0.5, gamma = 0.5, tau = 0.1, eta = 1.1))]
    fn new(lambda1: f64, lambda2: f64, gamma: f64, tau: f64, eta: f64) -> PyResult<Self> {
        let constants = ScheduleConstants { tau, eta, ..ScheduleConstants::default() };
        ScheduleState::with_values(lambda1, lambda2, gamma, constants).map(|inner| PySchedule { inner }).map_err(to_py)
    }

    #[getter]
    fn lambda1(&self) -> f64 {
        self.inner.lambda1()
    }

    #[getter]
    fn lambda2(&self) -> f64 {
        self.inner.lambda2()
    }

    #[getter]
    fn gamma(&self) -> f64 {
        self.inner.gamma()
    }

    /// Selection threshold for `"visual"` or `"textual"` entries.
    fn threshold(&self, modality: &str) -> PyResult<f64> {
        match modality {
            "visual" => Ok(self.inner.threshold(msrl_core::domain::Modality::Visual)),
            "textual" => Ok(self.inner.threshold(msrl_core::domain::Modality::Textual)),
            other => Err(PyValueError::new_err(format!("unknown modality '{other}'"))),
        }
    }

    fn update_gamma(&self) -> Self {
        PySchedule { inner: msrl_core::scheduler::update_gamma(&self.inner) }
    }

    fn __repr__(&self) -> String {
        format!("ScheduleState(lambda1={}, lambda2={}, gamma={})", self.lambda1(), self.lambda2(), self.gamma())
    }
}

#[pyfunction]
fn variants() -> Vec<&'static str> {
    Variant::ALL.iter().map(|v| v.name()).collect()
}

#[pyfunction]
fn triplet_margin(score_pos: f64, score_neg: f64, delta: f64) -> f64 {
    msrl_core::objective::triplet_margin(score_pos, score_neg, delta)
}

/// `(mean, CV%)` of per-group counts.
#[pyfunction]
fn selection_cv(counts: Vec<f64>) -> PyResult<(f64, f64)> {
    msrl_core::metrics::selection_cv(&counts).map_err(to_py)
}

/// `Σ_g sqrt(c_g)`.
#[pyfunction]
fn balance_term(counts: Vec<usize>) -> f64 {
    counts.iter().map(|&c| (c as f64).sqrt()).sum()
}

#[pyfunction]
fn spearman(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    msrl_core::metrics::spearman(&x, &y).map_err(to_py)
}

#[pyfunction(name = "oracle_relevance")]
fn py_oracle_relevance(a: Vec<usize>, b: Vec<usize>) -> PyResult<f64> {
    oracle_relevance(&a, &b).map_err(to_py)
}

#[pymodule]
fn msrl(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Experiment>()?;
    m.add_class::<PySchedule>()?;
    m.add_function(wrap_pyfunction!(variants, m)?)?;
    m.add_function(wrap_pyfunction!(triplet_margin, m)?)?;
    m.add_function(wrap_pyfunction!(selection_cv, m)?)?;
    m.add_function(wrap_pyfunction!(balance_term, m)?)?;
    m.add_function(wrap_pyfunction!(spearman, m)?)?;
    m.add_function(wrap_pyfunction!(py_oracle_relevance, m)?)?;
    Ok(())
}
