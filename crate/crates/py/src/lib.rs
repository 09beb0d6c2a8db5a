//! Python bindings: configuration, synthetic data, training, evaluation and
//! the small numerical helpers that are handy from a notebook.

use std::path::PathBuf;

use brainspeech::config::RunConfig;
use brainspeech::dataset::synth::generate_synthetic;
use brainspeech::dataset::Dataset;
use brainspeech::evaluation::stats::{mann_whitney_u, wilcoxon_signed_rank, TestResult};
use brainspeech::evaluation::{evaluate, topk_accuracy};
use brainspeech::speech_features::{mel_spectrogram, MelConfig};
use brainspeech::tensor::Tensor;
use brainspeech::{objective, Error};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Turns anything serialisable into plain Python objects via `json.loads`.
fn to_py<'py, S: serde::Serialize>(py: Python<'py>, value: &S) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// A validated run configuration.
#[pyclass(name = "RunConfig", module = "brainspeech_py")]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    /// Parses TOML text (empty for all defaults) plus `key=value` overrides.
    #[new]
    #[pyo3(signature = (text = "", overrides = Vec::new()))]
    fn new(text: &str, overrides: Vec<String>) -> PyResult<Self> {
        RunConfig::from_toml(text, &overrides).map(|inner| Self { inner }).map_err(py_err)
    }

    #[staticmethod]
    #[pyo3(signature = (path, overrides = Vec::new()))]
    fn load(path: PathBuf, overrides: Vec<String>) -> PyResult<Self> {
        RunConfig::load(&path, &overrides).map(|inner| Self { inner }).map_err(py_err)
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner)
    }

    fn __repr__(&self) -> String {
        format!("RunConfig(hash={})", &self.inner.hash()[..12])
    }
}

/// A dataset directory in the interchange format.
#[pyclass(name = "Dataset", module = "brainspeech_py")]
struct PyDataset {
    inner: Dataset,
}

#[pymethods]
impl PyDataset {
    #[new]
    fn new(path: PathBuf) -> PyResult<Self> {
        Dataset::load(&path).map(|inner| Self { inner }).map_err(py_err)
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.manifest.name.clone()
    }

    #[getter]
    fn root(&self) -> PathBuf {
        self.inner.root.clone()
    }

    #[getter]
    fn num_recordings(&self) -> usize {
        self.inner.recordings.len()
    }

    #[getter]
    fn num_segments(&self) -> usize {
        self.inner.segments.len()
    }

    fn __len__(&self) -> usize {
        self.inner.recordings.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(name={:?}, recordings={}, segments={})",
            self.inner.manifest.name,
            self.inner.recordings.len(),
            self.inner.segments.len()
        )
    }
}

/// Writes a synthetic dataset to `out`; overrides use `key=value` syntax.
#[pyfunction]
#[pyo3(signature = (out, overrides = Vec::new(), spec = ""))]
fn synth(out: PathBuf, overrides: Vec<String>, spec: &str) -> PyResult<PyDataset> {
    let spec = brainspeech::cli::load_synth_spec(spec, &overrides).map_err(py_err)?;
    generate_synthetic(&spec, &out).map_err(py_err)?;
    PyDataset::new(out)
}

/// Trains on `dataset` and returns the run summary as a dict.
#[pyfunction]
fn train<'py>(py: Python<'py>, dataset: &PyDataset, config: &PyRunConfig, out: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    let summary = brainspeech::training::train(&dataset.inner, &config.inner, &out).map_err(py_err)?;
    to_py(py, &summary)
}

/// Scores the test split with a checkpoint and returns the report as a dict.
#[pyfunction]
fn eval<'py>(py: Python<'py>, checkpoint: PathBuf, dataset: PathBuf, out: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    let outputs = evaluate(&checkpoint, &dataset, &out).map_err(py_err)?;
    to_py(py, &outputs.json)
}

/// Runs the command-line interface in-process and returns its exit code.
#[pyfunction]
fn cli(argv: Vec<String>) -> i32 {
    brainspeech::cli::run(std::iter::once("brainspeech".to_string()).chain(argv))
}

/// Power Mel spectrogram of 16 kHz audio, `n_mels` rows by frames.
#[pyfunction]
#[pyo3(signature = (audio, n_mels = 120))]
fn mel(audio: Vec<f64>, n_mels: usize) -> PyResult<Vec<Vec<f64>>> {
    let cfg = MelConfig {
        n_mels,
        ..Default::default()
    };
    let m = mel_spectrogram(&audio, &cfg).map_err(py_err)?;
    Ok(rows(&m))
}

fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    let cols = t.shape()[1];
    t.data().chunks(cols.max(1)).map(<[f64]>::to_vec).collect()
}

/// Softmax of a row of retrieval logits.
#[pyfunction]
fn clip_probabilities(logits: Vec<f64>) -> Vec<f64> {
    objective::probabilities(&logits)
}

/// Cross-entropy of one retrieval row against the positive candidate.
#[pyfunction]
fn clip_loss(logits: Vec<f64>, positive: usize) -> PyResult<f64> {
    objective::clip_loss(&logits, positive).map_err(py_err)
}

/// Top-k accuracy in percent; ties count against the true candidate.
#[pyfunction]
fn topk(probs: Vec<Vec<f64>>, truth: Vec<usize>, k: usize) -> PyResult<f64> {
    if probs.len() != truth.len() {
        return Err(PyValueError::new_err("probs and truth differ in length"));
    }
    if let Some((i, _)) = truth.iter().enumerate().find(|&(i, &t)| t >= probs[i].len()) {
        return Err(PyValueError::new_err(format!("truth[{i}] is out of range")));
    }
    Ok(topk_accuracy(&probs, &truth, k).accuracy)
}

fn test_dict<'py>(py: Python<'py>, r: &TestResult) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("statistic", r.statistic)?;
    d.set_item("p_value", r.p_value)?;
    d.set_item("n", r.n)?;
    d.set_item("exact", r.exact)?;
    d.set_item("degenerate", r.degenerate)?;
    Ok(d)
}

/// Two-sided paired Wilcoxon signed-rank test.
#[pyfunction]
fn wilcoxon<'py>(py: Python<'py>, a: Vec<f64>, b: Vec<f64>) -> PyResult<Bound<'py, PyDict>> {
    test_dict(py, &wilcoxon_signed_rank(&a, &b).map_err(py_err)?)
}

/// Two-sided Mann-Whitney U test.
#[pyfunction]
fn mann_whitney<'py>(py: Python<'py>, a: Vec<f64>, b: Vec<f64>) -> PyResult<Bound<'py, PyDict>> {
    test_dict(py, &mann_whitney_u(&a, &b).map_err(py_err)?)
}

#[pymodule]
fn brainspeech_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyDataset>()?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(eval, m)?)?;
    m.add_function(wrap_pyfunction!(cli, m)?)?;
    m.add_function(wrap_pyfunction!(mel, m)?)?;
    m.add_function(wrap_pyfunction!(clip_probabilities, m)?)?;
    m.add_function(wrap_pyfunction!(clip_loss, m)?)?;
    m.add_function(wrap_pyfunction!(topk, m)?)?;
    m.add_function(wrap_pyfunction!(wilcoxon, m)?)?;
    m.add_function(wrap_pyfunction!(mann_whitney, m)?)?;
    Ok(())
}
