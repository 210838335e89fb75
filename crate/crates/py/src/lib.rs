//! Python bindings. Tensors cross the boundary as flat lists in NHWC order
//! plus a shape tuple.

use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;

use aapose::accounting::cost_report;
use aapose::blurpool::make_blur_filter;
use aapose::config::{NetworkConfig, Preset};
use aapose::gradcheck::block_suite;
use aapose::layer::Layer;
use aapose::metrics::{summarize, EvalRecord, KeypointSet};
use aapose::network::{build_network, Network};
use aapose::training::{cyclical_lr, train_toy, LrSchedule, Loss, TrainOptions};
use aapose::{Float, Shape, Tensor};

fn to_py(e: aapose::Error) -> PyErr {
    if e.is_numeric() {
        PyArithmeticError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn tensor(data: Vec<f64>, shape: (usize, usize, usize, usize)) -> PyResult<Tensor> {
    let s = Shape::new(shape.0, shape.1, shape.2, shape.3).map_err(to_py)?;
    Tensor::from_vec(s, data.into_iter().map(|v| v as Float).collect()).map_err(to_py)
}

/// `(epoch, lr, loss, train_epe)`
type LogRow = (usize, f64, f64, Option<f64>);

fn keypoints(flat: Vec<f64>) -> PyResult<KeypointSet> {
    KeypointSet::from_flat(&flat).map_err(to_py)
}

/// Network hyperparameters. Build with `Config.preset("default" | "tiny")`
/// or `Config.from_toml(text)`.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: NetworkConfig,
}

#[pymethods]
impl PyConfig {
    #[staticmethod]
    fn preset(name: &str) -> PyResult<Self> {
        let p: Preset = name.parse().map_err(to_py)?;
        Ok(PyConfig {
            inner: NetworkConfig::preset(p),
        })
    }

    #[staticmethod]
    fn ablation(arch: usize) -> PyResult<Self> {
        Ok(PyConfig {
            inner: NetworkConfig::ablation(arch).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(PyConfig {
            inner: NetworkConfig::from_toml_str(text).map_err(to_py)?,
        })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    fn spatial_trace(&self) -> Vec<usize> {
        self.inner.spatial_trace()
    }

    fn config_hash(&self) -> u64 {
        self.inner.hash()
    }

    #[getter]
    fn input_size(&self) -> (usize, usize) {
        (self.inner.input_height, self.inner.input_width)
    }

    fn __repr__(&self) -> String {
        format!("Config(hash={:#018x})", self.inner.hash())
    }
}

/// A randomly initialized or trained network.
#[pyclass(name = "Network", unsendable)]
struct PyNetwork {
    inner: Network,
}

#[pymethods]
impl PyNetwork {
    #[new]
    #[pyo3(signature = (config, seed=42))]
    fn new(config: &PyConfig, seed: u64) -> PyResult<Self> {
        Ok(PyNetwork {
            inner: build_network(&config.inner, seed).map_err(to_py)?,
        })
    }

    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    fn flops(&self) -> PyResult<u64> {
        Ok(cost_report(&self.inner).map_err(to_py)?.total_flops())
    }

    /// Layer-by-layer cost table.
    #[pyo3(signature = (detailed=false))]
    fn summary(&self, detailed: bool) -> PyResult<String> {
        Ok(cost_report(&self.inner).map_err(to_py)?.table(detailed))
    }

    fn spatial_trace(&self) -> Vec<usize> {
        self.inner.spatial_trace()
    }

    /// Predicted keypoints in pixels, one list of 42 values per image.
    fn forward(&self, data: Vec<f64>, shape: (usize, usize, usize, usize)) -> PyResult<Vec<Vec<f64>>> {
        let x = tensor(data, shape)?;
        let ks = self.inner.forward_keypoints(&x).map_err(to_py)?;
        Ok(ks.iter().map(|k| k.flat()).collect())
    }
}

/// Mean and median EPE, PCK AUC and the PCK curve for paired keypoint sets.
#[pyfunction]
fn evaluate(py: Python<'_>, predictions: Vec<Vec<f64>>, ground_truth: Vec<Vec<f64>>) -> PyResult<Py<PyAny>> {
    if predictions.len() != ground_truth.len() {
        return Err(PyValueError::new_err("predictions and ground_truth differ in length"));
    }
    let records = predictions
        .into_iter()
        .zip(ground_truth)
        .enumerate()
        .map(|(i, (p, g))| Ok(EvalRecord::new(i.to_string(), keypoints(p)?, keypoints(g)?)))
        .collect::<PyResult<Vec<_>>>()?;
    let s = summarize(&records).map_err(to_py)?;
    let d = pyo3::types::PyDict::new(py);
    d.set_item("count", s.count)?;
    d.set_item("epe_mean", s.epe_mean)?;
    d.set_item("epe_median", s.epe_median)?;
    d.set_item("auc", s.auc)?;
    d.set_item("pck", s.pck)?;
    Ok(d.into_any().unbind())
}

/// Normalized blur kernel for binomial order `n`, as rows.
#[pyfunction]
fn blur_filter(n: usize) -> PyResult<Vec<Vec<f64>>> {
    let f = make_blur_filter(n).map_err(to_py)?;
    let m = f.m();
    Ok((0..m).map(|r| (0..m).map(|c| f.at(r, c) as f64).collect()).collect())
}

#[pyfunction]
#[pyo3(signature = (t, lr_min=1e-4, lr_max=1e-1, stepsize=6.0))]
fn learning_rate(t: f64, lr_min: f64, lr_max: f64, stepsize: f64) -> PyResult<f64> {
    let s = LrSchedule {
        lr_min,
        lr_max,
        stepsize,
    };
    s.validate().map_err(to_py)?;
    Ok(cyclical_lr(t, &s))
}

/// Runs the block gradient checks; returns `(name, max_relative_error, passed)`.
#[pyfunction]
#[pyo3(signature = (seed=42, include_network=false))]
fn gradcheck(seed: u64, include_network: bool) -> PyResult<Vec<(String, f64, bool)>> {
    Ok(block_suite(seed, include_network)
        .map_err(to_py)?
        .into_iter()
        .map(|e| (e.name, e.report.max_relative_error, e.report.passed))
        .collect())
}

/// Trains on synthetic hands. Returns the network and per-epoch
/// `(epoch, lr, loss, train_epe)` rows.
#[pyfunction]
#[pyo3(signature = (config, images=1, epochs=200, batch_size=8, momentum=0.0, loss="mse", seed=42))]
#[allow(clippy::too_many_arguments)]
fn train(
    config: &PyConfig,
    images: usize,
    epochs: usize,
    batch_size: usize,
    momentum: f64,
    loss: &str,
    seed: u64,
) -> PyResult<(PyNetwork, Vec<LogRow>)> {
    let loss = match loss {
        "mse" => Loss::Mse,
        "mae" => Loss::Mae,
        other => return Err(PyValueError::new_err(format!("unknown loss {other:?}"))),
    };
    let opts = TrainOptions {
        images,
        epochs,
        batch_size,
        momentum,
        loss,
        seed,
        ..TrainOptions::default()
    };
    let out = train_toy(&config.inner, &opts).map_err(to_py)?;
    let log = out.log.iter().map(|e| (e.epoch, e.lr, e.loss, e.train_epe)).collect();
    Ok((PyNetwork { inner: out.network }, log))
}

#[pymodule]
#[pyo3(name = "aapose")]
fn py_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyNetwork>()?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(blur_filter, m)?)?;
    m.add_function(wrap_pyfunction!(learning_rate, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
