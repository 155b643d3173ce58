//! Python module `pdarec`: datasets, splits, training, evaluation and the
//! experiment runner of `pda_core`.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use pda_core::baselines::{train_config_for, Method};
use pda_core::data::{self, EvalSplit};
use pda_core::eval::partition_groups;
use pda_core::experiment::{
    evaluate_test, execute, method_scorer, popularity_context, ExperimentConfig, ForecastSpec,
};
use pda_core::popularity::{self, ForecastMethod};
use pda_core::scoring::{elu_prime as core_elu_prime, pd_score, FactorModel};
use pda_core::sim::{generate, SimConfig, SimWorld};
use pda_core::trainer::{self, PopularityScope, TrainConfig};

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn json_to_py(py: Python<'_>, text: String) -> PyResult<Bound<'_, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

fn parse_method(s: &str) -> PyResult<Method> {
    s.parse().map_err(err)
}

fn forecast_spec(method: &str, alpha: f64) -> PyResult<ForecastSpec> {
    Ok(ForecastSpec {
        method: method.parse::<ForecastMethod>().map_err(err)?,
        alpha,
        substages: 1,
    })
}

#[pyclass(name = "Dataset", module = "pdarec", frozen)]
struct PyDataset {
    inner: data::Dataset,
}

#[pymethods]
impl PyDataset {
    /// Builds a dataset from `(user, item, timestamp)` tuples.
    #[staticmethod]
    fn from_interactions(rows: Vec<(String, String, u64)>) -> PyResult<Self> {
        let raw = rows
            .into_iter()
            .map(|(user, item, timestamp)| data::Interaction {
                user,
                item,
                timestamp,
            })
            .collect();
        Ok(PyDataset {
            inner: data::Dataset::from_interactions(raw).map_err(err)?,
        })
    }

    #[staticmethod]
    #[pyo3(signature = (path, delimiter = '\t'))]
    fn load(path: PathBuf, delimiter: char) -> PyResult<Self> {
        Ok(PyDataset {
            inner: data::load_interactions(path, delimiter).map_err(err)?,
        })
    }

    fn kcore(&self, k: usize) -> PyResult<Self> {
        Ok(PyDataset {
            inner: data::kcore_filter(&self.inner, k).map_err(err)?,
        })
    }

    fn interactions(&self) -> Vec<(String, String, u64)> {
        self.inner
            .interactions()
            .map(|i| (i.user, i.item, i.timestamp))
            .collect()
    }

    #[getter]
    fn num_users(&self) -> usize {
        self.inner.num_users()
    }

    #[getter]
    fn num_items(&self) -> usize {
        self.inner.num_items()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// Generates a synthetic log from the causal simulator.
#[pyfunction]
#[pyo3(signature = (seed, users = 1000, items = 500, stages = 10, events_per_stage = 10_000,
                    conformity = 0.5, exposure = 0.5, drift = 0.0, spread = 1.0))]
#[allow(clippy::too_many_arguments)]
fn simulate(
    seed: u64,
    users: usize,
    items: usize,
    stages: usize,
    events_per_stage: usize,
    conformity: f64,
    exposure: f64,
    drift: f64,
    spread: f64,
) -> PyResult<PyDataset> {
    let cfg = SimConfig {
        num_users: users,
        num_items: items,
        stages,
        events_per_stage,
        conformity_strength: conformity,
        exposure_bias_strength: exposure,
        drift_strength: drift,
        popularity_spread: spread,
        seed,
        ..SimConfig::default()
    };
    let world = SimWorld::new(cfg).map_err(err)?;
    let sim = generate(&world, events_per_stage).map_err(err)?;
    Ok(PyDataset { inner: sim.dataset })
}

#[pyclass(name = "Split", module = "pdarec", frozen)]
struct PySplit {
    inner: EvalSplit,
}

#[pymethods]
impl PySplit {
    /// Stages the dataset and holds out the last stage.
    #[staticmethod]
    #[pyo3(signature = (dataset, stages = 10, valid_frac = 0.5, seed = 0))]
    fn prepare(dataset: &PyDataset, stages: usize, valid_frac: f64, seed: u64) -> PyResult<Self> {
        let staged = data::split_stages(&dataset.inner, stages).map_err(err)?;
        Ok(PySplit {
            inner: data::make_eval_split(&staged, valid_frac, seed).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PySplit {
            inner: EvalSplit::read_cache(path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.write_cache(path).map_err(err)
    }

    fn summary<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        json_to_py(py, serde_json::to_string(&self.inner.summary()).map_err(err)?)
    }

    #[getter]
    fn num_users(&self) -> usize {
        self.inner.num_users()
    }

    #[getter]
    fn num_items(&self) -> usize {
        self.inner.num_items()
    }
}

#[pyclass(name = "Model", module = "pdarec", frozen)]
struct PyModel {
    inner: FactorModel,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel {
            inner: FactorModel::load(path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }

    /// Deconfounded score `elu'(f(u, i))`.
    fn score(&self, user: usize, item: usize) -> PyResult<f64> {
        pd_score(&self.inner, user, item).map_err(err)
    }

    #[getter]
    fn gamma(&self) -> f64 {
        self.inner.gamma
    }

    #[getter]
    fn gamma_tilde(&self) -> f64 {
        self.inner.gamma_tilde
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim
    }
}

/// Trains `method` and returns `(model, best_validation_recall, best_epoch)`.
#[pyfunction]
#[pyo3(signature = (split, method, seed, gamma = 0.1, learning_rate = 0.001, embedding_dim = 64,
                    max_epochs = 1000, patience = 100, l2 = 0.0, batch_size = 2048,
                    forecast = "b", alpha = 1.0))]
#[allow(clippy::too_many_arguments)]
fn train(
    py: Python<'_>,
    split: &PySplit,
    method: &str,
    seed: u64,
    gamma: f64,
    learning_rate: f64,
    embedding_dim: usize,
    max_epochs: usize,
    patience: usize,
    l2: f64,
    batch_size: usize,
    forecast: &str,
    alpha: f64,
) -> PyResult<(PyModel, f64, usize)> {
    let method = parse_method(method)?;
    let base = TrainConfig {
        gamma,
        learning_rate,
        embedding_dim,
        max_epochs,
        patience,
        l2_lambda: l2,
        batch_size,
        seed,
        ..TrainConfig::default()
    };
    let cfg = train_config_for(method, &base).map_err(err)?;
    let spec = forecast_spec(forecast, alpha)?;
    let split = &split.inner;
    let out = py
        .detach(|| {
            let pc = popularity_context(split, &spec)?;
            let pop = match cfg.popularity_scope {
                PopularityScope::Local => &pc.local,
                PopularityScope::Global => &pc.global,
            };
            let fc = (method == Method::Pda).then_some(&pc.forecast);
            Ok::<_, anyhow::Error>(trainer::train(split, pop, fc, &cfg)?)
        })
        .map_err(err)?;
    Ok((PyModel { inner: out.model }, out.best_recall, out.best_epoch))
}

/// Test-holdout metrics of `method` as a dict keyed by K, plus the
/// recommendation-rate spread at the first K.
#[pyfunction]
#[pyo3(signature = (split, method, model = None, gamma_tilde = None, ks = vec![20, 50],
                    forecast = "b", alpha = 1.0, groups = 10))]
#[allow(clippy::too_many_arguments)]
fn evaluate<'py>(
    py: Python<'py>,
    split: &PySplit,
    method: &str,
    model: Option<PyRef<'py, PyModel>>,
    gamma_tilde: Option<f64>,
    ks: Vec<usize>,
    forecast: &str,
    alpha: f64,
    groups: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let method = parse_method(method)?;
    let spec = forecast_spec(forecast, alpha)?;
    let model = model.as_ref().map(|m| &m.inner);
    let gt = match method {
        Method::Pda => gamma_tilde.or(model.map(|m| m.gamma_tilde)),
        _ => gamma_tilde,
    };
    let split = &split.inner;
    let rr_k = *ks.first().ok_or_else(|| err("ks must not be empty"))?;
    let text = py
        .detach(|| {
            let pc = popularity_context(split, &spec)?;
            let scorer = method_scorer(method, split, model, &pc.forecast, gt)?;
            let gp = partition_groups(&pc.global.pooled_counts(), groups)?;
            let ev = evaluate_test(&scorer, split, &ks, rr_k, &gp)?;
            let value = serde_json::json!({
                "method": method,
                "metrics": ev.metrics,
                "rr_k": rr_k,
                "rr": ev.rr,
            });
            Ok::<_, anyhow::Error>(value.to_string())
        })
        .map_err(err)?;
    json_to_py(py, text)
}

/// Runs a full experiment from TOML text and returns the report as a dict.
#[pyfunction]
fn run_experiment<'py>(py: Python<'py>, config_toml: &str) -> PyResult<Bound<'py, PyAny>> {
    let cfg = ExperimentConfig::from_toml_str(config_toml).map_err(err)?;
    let text = py
        .detach(|| {
            let out = execute(&cfg)?;
            Ok::<_, anyhow::Error>(serde_json::to_string(&out.report)?)
        })
        .map_err(err)?;
    json_to_py(py, text)
}

#[pyfunction]
fn jensen_shannon(p: Vec<f64>, q: Vec<f64>) -> PyResult<f64> {
    if p.len() != q.len() {
        return Err(err("distributions differ in length"));
    }
    Ok(popularity::jensen_shannon(&p, &q))
}

#[pyfunction]
fn elu_prime(x: f64) -> f64 {
    core_elu_prime(x)
}

#[pymodule]
fn pdarec(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PySplit>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(jensen_shannon, m)?)?;
    m.add_function(wrap_pyfunction!(elu_prime, m)?)?;
    Ok(())
}
