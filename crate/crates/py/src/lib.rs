use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use scannability::analytics;
use scannability::cli;
use scannability::dataset::{self, SynthConfig, DEFAULT_SPLIT};
use scannability::gradsuite;
use scannability::model::{ModelBundle, ModelConfig, Task, TrainConfig};
use scannability::tensor::AdamConfig;
use scannability::service::{self, GridSpec, LoadedModel, DEFAULT_GRID_CAP};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Parses a JSON document with Python's `json` module.
fn to_py(py: Python<'_>, v: &impl serde::Serialize) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(v).map_err(value_err)?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

/// A trained checkpoint ready for prediction.
#[pyclass(module = "pyscannability")]
struct Model {
    inner: LoadedModel,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let inner = service::load_for_serving(path).map_err(|e| PyIOError::new_err(e.to_string()))?;
        Ok(Self { inner })
    }

    #[getter]
    fn version(&self) -> String {
        self.inner.version.clone()
    }

    #[getter]
    fn page_res(&self) -> usize {
        self.inner.bundle.regression.config.page_res
    }

    #[getter]
    fn has_classifier(&self) -> bool {
        self.inner.bundle.classification.is_some()
    }

    /// Predicted search time and attention map for one target on a PNG page.
    fn predict(
        &self,
        py: Python<'_>,
        png: &Bound<'_, PyBytes>,
        bbox: [f64; 4],
        target_type: &str,
        n_candidates: u32,
    ) -> PyResult<Py<PyAny>> {
        let page = dataset::decode_png(png.as_bytes()).map_err(value_err)?;
        let out = service::predict(&self.inner.bundle, &page, bbox, target_type, n_candidates)
            .map_err(|e| PyValueError::new_err(e.error))?;
        to_py(py, &out)
    }

    /// Predicted seconds with the target moved to each cell of a grid.
    #[pyo3(signature = (png, bbox, target_type, n_candidates, rows, cols))]
    fn whatif(
        &self,
        py: Python<'_>,
        png: &Bound<'_, PyBytes>,
        bbox: [f64; 4],
        target_type: &str,
        n_candidates: u32,
        rows: usize,
        cols: usize,
    ) -> PyResult<Py<PyAny>> {
        let page = dataset::decode_png(png.as_bytes()).map_err(value_err)?;
        let grid = GridSpec {
            rows,
            cols,
            region: None,
            target_w: None,
            target_h: None,
        };
        let out = service::whatif(&self.inner.bundle, &page, bbox, None, target_type, n_candidates, &grid, DEFAULT_GRID_CAP)
            .map_err(|e| PyValueError::new_err(e.error))?;
        to_py(py, &out)
    }
}

/// Writes a synthetic corpus to `out` and returns the number of trials.
#[pyfunction]
#[pyo3(signature = (out, users = 200, seed = 0, gamma = 0.0, sigma = 0.0))]
fn generate(out: &str, users: usize, seed: u64, gamma: f64, sigma: f64) -> PyResult<usize> {
    let cfg = SynthConfig {
        users,
        clutter_weight: gamma,
        noise_sd: sigma,
        ..SynthConfig::default()
    };
    let corpus = dataset::synth_generate(&cfg, seed).map_err(value_err)?;
    corpus.write_to(out).map_err(|e| PyIOError::new_err(e.to_string()))?;
    Ok(corpus.records.len())
}

/// Trains a regression network on a corpus directory and writes a
/// checkpoint to `out`. Returns the best validation loss.
#[pyfunction]
#[pyo3(signature = (data, out, seed = 0, page_res = 512, epochs = 50, lr = 1e-4))]
fn train(data: &str, out: &str, seed: u64, page_res: usize, epochs: usize, lr: f64) -> PyResult<f64> {
    let run = || -> Result<f64, Box<dyn std::error::Error>> {
        let dir = std::path::Path::new(data);
        let records = dataset::load_trials(dir.join("trials.jsonl"))?;
        let prepared = cli::prepare(&records, DEFAULT_SPLIT, seed)?;
        let images = dataset::load_screenshots(dir, &records)?;
        let cfg = ModelConfig {
            page_res,
            task: Task::Regression,
            ..ModelConfig::default()
        };
        let train_cfg = TrainConfig {
            adam: AdamConfig { lr, ..AdamConfig::default() },
            max_epochs: epochs,
            seed,
            ..TrainConfig::default()
        };
        let (net, history) = cli::train_net(cfg, &train_cfg, &prepared, &images)?;
        let bundle = ModelBundle {
            regression: net,
            classification: None,
        };
        service::save_checkpoint(&bundle, serde_json::json!({ "history": history }), out)?;
        Ok(history.best_val_loss)
    };
    run().map_err(value_err)
}

/// Layout regression of seconds on y, area and candidate count over the
/// filtered trials of a trial log.
#[pyfunction]
fn layout_regression(py: Python<'_>, trials: &str) -> PyResult<Py<PyAny>> {
    let records = dataset::load_trials(trials).map_err(|e| PyIOError::new_err(e.to_string()))?;
    let (kept, _) = dataset::filter_trials(&records);
    let fit = analytics::layout_regression(&kept).map_err(value_err)?;
    to_py(py, &fit.standardized)
}

/// Finite-difference gradient checks of every layer and full loss.
#[pyfunction]
#[pyo3(signature = (seed = 0, coords = 50))]
fn gradcheck(py: Python<'_>, seed: u64, coords: usize) -> PyResult<Py<PyAny>> {
    let checks = gradsuite::run(seed, coords).map_err(value_err)?;
    to_py(py, &checks)
}

#[pymodule]
fn pyscannability(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(layout_regression, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
