//! Python bindings: configs, models, checkpoints, metrics and the training
//! and evaluation drivers.

use std::path::PathBuf;

use asd_core::checkpoint::Checkpoint as CoreCheckpoint;
use asd_core::config::{load_config, Config as CoreConfig};
use asd_core::data::{decode_wav as core_decode_wav, scan_dataset, scan_tree};
use asd_core::evaluation::{self, AttentionStats};
use asd_core::model::Model as CoreModel;
use asd_core::synthetic::{self, SyntheticSpec};
use asd_core::training;
use asd_core::Tensor;
use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn os_err(e: impl std::fmt::Display) -> PyErr {
    PyOSError::new_err(e.to_string())
}

fn json<'py>(py: Python<'py>, v: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(value_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn tensor<'py>(py: Python<'py>, t: &Tensor<f32>) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("shape", t.shape().to_vec())?;
    d.set_item("data", t.data().to_vec())?;
    Ok(d)
}

/// Feature, model and training settings.
#[pyclass(name = "Config", skip_from_py_object)]
#[derive(Clone)]
pub struct PyConfig {
    inner: CoreConfig,
}

#[pymethods]
impl PyConfig {
    /// Defaults, overridden by `values` (the keys of a config file).
    #[new]
    #[pyo3(signature = (values=None))]
    fn new(values: Option<Vec<(String, String)>>) -> PyResult<Self> {
        let mut inner = CoreConfig::default();
        for (k, v) in values.unwrap_or_default() {
            inner.set(&k, &v).map_err(value_err)?;
        }
        inner.validate_model().map_err(value_err)?;
        Ok(PyConfig { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyConfig {
            inner: load_config(path).map_err(value_err)?,
        })
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).map_err(value_err)
    }

    #[getter]
    fn sample_rate(&self) -> u32 {
        self.inner.features.sample_rate
    }

    #[getter]
    fn clip_samples(&self) -> usize {
        self.inner.features.clip_samples()
    }

    #[getter]
    fn classes(&self) -> usize {
        self.inner.model.classes
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        json(py, &self.inner)
    }

    fn __repr__(&self) -> String {
        format!(
            "Config(sample_rate={}, clip_samples={}, classes={})",
            self.inner.features.sample_rate,
            self.inner.features.clip_samples(),
            self.inner.model.classes
        )
    }
}

#[pyclass(name = "Model")]
pub struct PyModel {
    inner: CoreModel<f32>,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (config, seed=0))]
    fn new(config: &PyConfig, seed: u64) -> PyResult<Self> {
        Ok(PyModel {
            inner: CoreModel::new(&config.inner, seed).map_err(value_err)?,
        })
    }

    #[getter]
    fn config(&self) -> PyConfig {
        PyConfig {
            inner: self.inner.config().clone(),
        }
    }

    #[getter]
    fn frames(&self) -> usize {
        self.inner.frames()
    }

    #[getter]
    fn n_mels(&self) -> usize {
        self.inner.n_mels()
    }

    #[getter]
    fn has_attention(&self) -> bool {
        self.inner.has_attention()
    }

    /// `(total, {module: count})`.
    fn count_parameters(&self) -> (usize, Vec<(String, usize)>) {
        let c = self.inner.count_parameters();
        (c.total, c.per_module.into_iter().collect())
    }

    /// Log-mel frames of one clip, `[frames][n_mels]`.
    fn log_mel(&self, samples: Vec<f32>) -> PyResult<Vec<Vec<f32>>> {
        let v = self.inner.log_mel(&samples).map_err(value_err)?;
        Ok(v.chunks(self.inner.n_mels()).map(<[f32]>::to_vec).collect())
    }

    /// Anomaly scores of clips against their machine classes.
    fn scores(&self, clips: Vec<Vec<f32>>, classes: Vec<usize>) -> PyResult<Vec<f64>> {
        self.inner.scores(&clips, &classes).map_err(value_err)
    }

    /// Eval-mode forward pass; each entry is `{"shape": [...], "data": [...]}`.
    fn infer<'py>(&self, py: Python<'py>, clips: Vec<Vec<f32>>) -> PyResult<Bound<'py, PyDict>> {
        let out = self.inner.infer(&clips).map_err(value_err)?;
        let d = PyDict::new(py);
        d.set_item("features", tensor(py, &out.features)?)?;
        d.set_item("embedding", tensor(py, &out.embedding)?)?;
        d.set_item("theta", tensor(py, &out.theta)?)?;
        match &out.attention {
            Some(a) => d.set_item("attention", tensor(py, a)?)?,
            None => d.set_item("attention", py.None())?,
        }
        Ok(d)
    }

    /// Mean/std attention maps over `clips`, or `None` without attention.
    #[pyo3(signature = (clips, out_dir=None))]
    fn attention_stats<'py>(
        &self,
        py: Python<'py>,
        clips: Vec<Vec<f32>>,
        out_dir: Option<PathBuf>,
    ) -> PyResult<Option<Bound<'py, PyDict>>> {
        let Some(stats) = evaluation::attention_statistics(&self.inner, &clips).map_err(value_err)? else {
            return Ok(None);
        };
        if let Some(dir) = out_dir {
            stats.save(dir).map_err(os_err)?;
        }
        stats_dict(py, &stats).map(Some)
    }
}

fn stats_dict<'py>(py: Python<'py>, s: &AttentionStats) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("clips", s.clips)?;
    d.set_item("shape", (s.channels, s.frames, s.bins))?;
    d.set_item("mean", s.mean.clone())?;
    d.set_item("std", s.std.clone())?;
    let bands = PyList::empty(py);
    for b in &s.bands {
        bands.append((b.bin, b.center_hz, b.mean.clone()))?;
    }
    d.set_item("bands", bands)?;
    Ok(d)
}

#[pyclass(name = "Checkpoint")]
pub struct PyCheckpoint {
    inner: CoreCheckpoint,
}

#[pymethods]
impl PyCheckpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyCheckpoint {
            inner: CoreCheckpoint::load(path).map_err(value_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(os_err)
    }

    #[getter]
    fn epoch(&self) -> usize {
        self.inner.epoch
    }

    #[getter]
    fn labels(&self) -> Vec<(String, String)> {
        self.inner.labels.pairs().to_vec()
    }

    #[getter]
    fn config(&self) -> PyConfig {
        PyConfig {
            inner: self.inner.config.clone(),
        }
    }

    /// Class index of a `type:id` label.
    fn class_of(&self, label: &str) -> PyResult<usize> {
        self.inner.labels.parse_label(label).map_err(value_err)
    }

    fn model(&self) -> PyResult<PyModel> {
        Ok(PyModel {
            inner: self.inner.model().map_err(value_err)?,
        })
    }
}

#[pyfunction]
fn roc_auc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    evaluation::roc_auc(&scores, &labels).map_err(value_err)
}

#[pyfunction]
#[pyo3(signature = (scores, labels, max_fpr=evaluation::DEFAULT_MAX_FPR))]
fn partial_auc(scores: Vec<f64>, labels: Vec<bool>, max_fpr: f64) -> PyResult<f64> {
    evaluation::partial_auc(&scores, &labels, max_fpr).map_err(value_err)
}

/// Mono samples in `[-1, 1)`.
#[pyfunction]
fn decode_wav(path: PathBuf, sample_rate: u32) -> PyResult<Vec<f32>> {
    Ok(core_decode_wav(path, sample_rate).map_err(value_err)?.samples)
}

/// Write the four-machine tone dataset in the DCASE layout.
#[pyfunction]
#[pyo3(signature = (root, seconds=1.0, train=50, test_normal=20, test_anomalous=20, seed=7))]
fn write_synthetic(
    root: PathBuf,
    seconds: f64,
    train: usize,
    test_normal: usize,
    test_anomalous: usize,
    seed: u64,
) -> PyResult<()> {
    let spec = SyntheticSpec {
        seconds,
        train_per_machine: train,
        test_normal_per_machine: test_normal,
        test_anomalous_per_machine: test_anomalous,
        seed,
        ..Default::default()
    };
    synthetic::generate(&spec).write_dcase(root).map_err(os_err)
}

/// Train on `data`, save the last epoch to `out`; returns per-epoch stats.
/// The class count follows the dataset's labels.
#[pyfunction]
fn train<'py>(py: Python<'py>, config: &PyConfig, data: PathBuf, out: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    let mut cfg = config.inner.clone();
    let (index, vocab) = scan_dataset(data).map_err(value_err)?;
    cfg.model.classes = vocab.len();
    let examples = training::examples_from_index(&index, &vocab).map_err(value_err)?;
    let outcome = training::train(&cfg, &examples, &vocab, |_| {}).map_err(value_err)?;
    outcome.last.save(out).map_err(os_err)?;
    json(py, &outcome.history)
}

/// Score the test split of `data`; returns the summary as a dict.
#[pyfunction]
#[pyo3(signature = (checkpoint, data, max_fpr=evaluation::DEFAULT_MAX_FPR))]
fn evaluate<'py>(py: Python<'py>, checkpoint: &PyCheckpoint, data: PathBuf, max_fpr: f64) -> PyResult<Bound<'py, PyAny>> {
    let model = checkpoint.inner.model().map_err(value_err)?;
    let index = scan_tree(data).map_err(value_err)?;
    let report =
        evaluation::evaluate_dataset(&model, &index, &checkpoint.inner.labels, max_fpr).map_err(value_err)?;
    json(py, &report.summary)
}

#[pymodule]
pub fn asd_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add_function(wrap_pyfunction!(roc_auc, m)?)?;
    m.add_function(wrap_pyfunction!(partial_auc, m)?)?;
    m.add_function(wrap_pyfunction!(decode_wav, m)?)?;
    m.add_function(wrap_pyfunction!(write_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
