//! Python bindings: configs, the experiment pipeline, trained models and the
//! metric helpers.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

use dam::adapters::CompositionMode;
use dam::cli::{self, Layout};
use dam::config::ExperimentConfig;
use dam::encoder::{tokenize, Vocab};
use dam::inlp::{inlp_fit, InlpConfig};
use dam::persistence::load_model;
use dam::training::{DamModel, Route};
use ndarray::Array2;

create_exception!(dam_py, DamError, PyException);
create_exception!(dam_py, ConfigError, DamError);
create_exception!(dam_py, InputError, DamError);
create_exception!(dam_py, CheckpointError, DamError);

fn err(e: dam::DamError) -> PyErr {
    let msg = e.to_string();
    match e.exit_code() {
        2 => ConfigError::new_err(msg),
        4 => CheckpointError::new_err(msg),
        _ => InputError::new_err(msg),
    }
}

fn to_py(py: Python<'_>, value: &impl serde::Serialize) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| InputError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

/// `plain`, `task_only`, `fused` or `debias:<attribute>`.
fn parse_route(s: &str) -> Result<Route, String> {
    match s {
        "plain" => Ok(Route::Plain),
        "task_only" | "task_adapter" => Ok(Route::TaskAdapter),
        "fused" => Ok(Route::Fused),
        _ => match s.strip_prefix("debias:") {
            Some(a) if !a.is_empty() => Ok(Route::DebiasAdapter(a.to_string())),
            _ => Err(format!("unknown route {s:?}")),
        },
    }
}

fn matrix(rows: Vec<Vec<f32>>) -> PyResult<Array2<f32>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(InputError::new_err("rows have different lengths"));
    }
    let n = rows.len();
    Array2::from_shape_vec((n, cols), rows.into_iter().flatten().collect()).map_err(|e| InputError::new_err(e.to_string()))
}

fn rows<T: Copy>(m: &Array2<T>) -> Vec<Vec<T>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

#[pyclass(name = "ExperimentConfig", module = "dam_py")]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (path=None, overrides=Vec::new()))]
    fn new(path: Option<PathBuf>, overrides: Vec<String>) -> PyResult<Self> {
        let inner = ExperimentConfig::load(path.as_deref(), &overrides).map_err(err)?;
        Ok(PyConfig { inner })
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        let inner = ExperimentConfig::from_toml(text).map_err(err)?;
        inner.validate().map_err(err)?;
        Ok(PyConfig { inner })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    #[getter]
    fn recipe(&self) -> String {
        self.inner.recipe.name.to_string()
    }

    #[getter]
    fn seeds(&self) -> Vec<u64> {
        self.inner.seeds.clone()
    }

    fn __repr__(&self) -> String {
        format!("ExperimentConfig(name={:?}, recipe={})", self.inner.name, self.inner.recipe.name)
    }
}

/// A config bound to its output directory.
#[pyclass(name = "Experiment", module = "dam_py")]
struct PyExperiment {
    cfg: ExperimentConfig,
    layout: Layout,
}

#[pymethods]
impl PyExperiment {
    #[new]
    #[pyo3(signature = (config, output_root=None))]
    fn new(config: &PyConfig, output_root: Option<PathBuf>) -> Self {
        let cfg = config.inner.clone();
        let layout = Layout {
            root: cfg.output_dir(output_root.as_deref()),
        };
        PyExperiment { cfg, layout }
    }

    #[getter]
    fn output_dir(&self) -> PathBuf {
        self.layout.root.clone()
    }

    #[pyo3(signature = (force=false))]
    fn generate_data(&self, force: bool) -> PyResult<Vec<PathBuf>> {
        cli::generate_data(&self.cfg, &self.layout, force).map_err(err)
    }

    /// Trains every seed; returns the stage reports per seed.
    fn train(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let runs = cli::train(&self.cfg, &self.layout).map_err(err)?;
        let out: Vec<_> = runs
            .iter()
            .map(|r| {
                serde_json::json!({
                    "seed": r.seed,
                    "final_bundle": r.final_bundle,
                    "stages": r.stages,
                })
            })
            .collect();
        to_py(py, &out)
    }

    #[pyo3(signature = (mode=None, attack=Vec::new()))]
    fn eval(&self, py: Python<'_>, mode: Option<&str>, attack: Vec<String>) -> PyResult<Py<PyAny>> {
        let mode = mode
            .map(|m| m.parse::<CompositionMode>())
            .transpose()
            .map_err(|e| ConfigError::new_err(e.to_string()))?;
        let (report, _) = cli::eval(&self.cfg, &self.layout, mode, &attack).map_err(err)?;
        to_py(py, &report)
    }

    /// `(recipe, trainable parameters)` for every recipe.
    fn params(&self) -> PyResult<Vec<(String, usize)>> {
        let rows = cli::params(&self.cfg, &self.layout).map_err(err)?;
        Ok(rows.into_iter().map(|r| (r.recipe.to_string(), r.trainable)).collect())
    }

    /// The final model of one seed.
    fn model(&self, seed: u64) -> PyResult<PyModel> {
        let model = load_model(&[self.layout.final_dir(seed)]).map_err(err)?;
        let vocab = Vocab::load(&self.layout.vocab()).map_err(err)?;
        Ok(PyModel { model, vocab })
    }
}

#[pyclass(name = "Model", module = "dam_py")]
struct PyModel {
    model: DamModel,
    vocab: Vocab,
}

impl PyModel {
    fn tokens(&self, texts: &[String]) -> Vec<Vec<usize>> {
        let len = self.model.encoder.config.max_seq_len;
        texts.iter().map(|t| tokenize(t, &self.vocab, len)).collect()
    }
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(bundles: Vec<PathBuf>, vocab: PathBuf) -> PyResult<Self> {
        let model = load_model(&bundles).map_err(err)?;
        let vocab = Vocab::load(&vocab).map_err(err)?;
        Ok(PyModel { model, vocab })
    }

    #[getter]
    fn hidden_dim(&self) -> usize {
        self.model.hidden_dim()
    }

    #[getter]
    fn attributes(&self) -> Vec<String> {
        self.model.debias_adapters.keys().cloned().collect()
    }

    #[getter]
    fn has_fusion(&self) -> bool {
        self.model.fusion.is_some()
    }

    /// Pooled vectors, one row per text.
    #[pyo3(signature = (texts, route="fused"))]
    fn embed(&self, texts: Vec<String>, route: &str) -> PyResult<Vec<Vec<f32>>> {
        let route = parse_route(route).map_err(ConfigError::new_err)?;
        let z = self.model.embed(&self.tokens(&texts), &route).map_err(err)?;
        Ok(rows(&z))
    }

    #[pyo3(signature = (texts, route="fused"))]
    fn task_logits(&self, texts: Vec<String>, route: &str) -> PyResult<Vec<Vec<f32>>> {
        let route = parse_route(route).map_err(ConfigError::new_err)?;
        let l = self.model.task_logits(&self.tokens(&texts), &route).map_err(err)?;
        Ok(rows(&l))
    }

    #[pyo3(signature = (texts, route="fused"))]
    fn predict(&self, texts: Vec<String>, route: &str) -> PyResult<Vec<usize>> {
        let logits = matrix(self.task_logits(texts, route)?)?;
        Ok(dam::objectives::argmax_rows(&logits))
    }
}

#[pyfunction]
fn balanced_accuracy(preds: Vec<usize>, labels: Vec<usize>, num_classes: usize) -> PyResult<f64> {
    dam::eval::balanced_accuracy(&preds, &labels, num_classes).map_err(err)
}

/// Nullspace projection removing linearly decodable attribute information;
/// returns the `(dim, dim)` matrix.
#[pyfunction]
#[pyo3(signature = (z, labels, num_classes, iterations=None))]
fn inlp_projection(z: Vec<Vec<f32>>, labels: Vec<usize>, num_classes: usize, iterations: Option<usize>) -> PyResult<Vec<Vec<f64>>> {
    let mut cfg = InlpConfig::default();
    if let Some(n) = iterations {
        cfg.iterations = n;
        cfg.classifiers = cfg.classifiers.max(n);
    }
    let p = inlp_fit(&matrix(z)?, &labels, num_classes, &cfg).map_err(err)?;
    Ok(rows(&p.p))
}

/// Runs the command-line interface with `args` (without the program name)
/// and returns what it would print.
#[pyfunction]
fn run_cli(args: Vec<String>) -> PyResult<String> {
    use clap::Parser;
    let cli = cli::Cli::try_parse_from(std::iter::once("dam".to_string()).chain(args))
        .map_err(|e| ConfigError::new_err(e.to_string()))?;
    cli::run(cli).map_err(err)
}

#[pymodule]
fn dam_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add("DamError", m.py().get_type::<DamError>())?;
    m.add("ConfigError", m.py().get_type::<ConfigError>())?;
    m.add("InputError", m.py().get_type::<InputError>())?;
    m.add("CheckpointError", m.py().get_type::<CheckpointError>())?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyExperiment>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(balanced_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(inlp_projection, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
