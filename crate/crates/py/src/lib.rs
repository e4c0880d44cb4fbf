//! Python bindings: losses, scene generation, instance segmentation,
//! metrics and training.

use mtl_core::diffcore::ValueGraph;
use mtl_core::hough_instance::{self as hough, SegmentParams, VoteSet};
use mtl_core::losses::{self, ClampLog, ObjectiveMode, TaskHead, TaskKind};
use mtl_core::metrics::{self, MetricReport};
use mtl_core::scenes::{self, Scene};
use mtl_core::textio::KvMap;
use mtl_core::trainer::{self, TrainConfig, TrainError};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use std::path::PathBuf;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn task_kind(name: &str) -> PyResult<TaskKind> {
    match name {
        "ce" => Ok(TaskKind::Classification),
        "l1" => Ok(TaskKind::RegressionL1),
        "l2" => Ok(TaskKind::RegressionL2),
        _ => Err(value_err(format!("unknown task kind '{name}' (expected ce, l1 or l2)"))),
    }
}

fn kv_from(dict: Option<&Bound<'_, PyDict>>) -> PyResult<KvMap> {
    let mut kv = KvMap::default();
    if let Some(d) = dict {
        for (k, v) in d.iter() {
            let v = match v.extract::<Vec<f64>>() {
                Ok(list) => list.iter().map(f64::to_string).collect::<Vec<_>>().join(","),
                Err(_) => v.str()?.to_string(),
            };
            kv.insert(k.extract::<String>()?, v);
        }
    }
    Ok(kv)
}

/// Uncertainty-weighted sum of task losses and its gradient with respect to
/// each log variance `s`. `kinds` holds "ce", "l1" or "l2" per task.
#[pyfunction]
fn uncertainty_objective(task_losses: Vec<f64>, s: Vec<f64>, kinds: Vec<String>) -> PyResult<(f64, Vec<f64>)> {
    if task_losses.len() != s.len() || s.len() != kinds.len() {
        return Err(value_err("task_losses, s and kinds must have the same length"));
    }
    let mut g = ValueGraph::new();
    let mut heads = Vec::with_capacity(s.len());
    for (i, (k, &s0)) in kinds.iter().zip(&s).enumerate() {
        let mut h = TaskHead::new(format!("task{i}"), task_kind(k)?, s0);
        h.s.bind(&mut g).map_err(value_err)?;
        heads.push(h);
    }
    let nodes = task_losses
        .iter()
        .map(|&l| g.leaf(l))
        .collect::<Result<Vec<_>, _>>()
        .map_err(value_err)?;
    let mut log = ClampLog::default();
    let total = losses::multitask_objective(&mut g, &nodes, &heads, &ObjectiveMode::Learned, &mut log)
        .map_err(value_err)?;
    g.backward(total).map_err(value_err)?;
    let grads = heads
        .iter_mut()
        .map(|h| {
            h.s.pull_grad(&g);
            h.s.grad
        })
        .collect();
    Ok((g.value(total), grads))
}

/// Mean softmax cross-entropy of `logits` (one row per pixel).
#[pyfunction]
fn cross_entropy(logits: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<f64> {
    let mut g = ValueGraph::new();
    let rows = logits
        .iter()
        .map(|row| row.iter().map(|&x| g.leaf(x)).collect::<Result<Vec<_>, _>>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(value_err)?;
    let mask = vec![true; rows.len()];
    let l = losses::cross_entropy(&mut g, &rows, &labels, &mask).map_err(value_err)?;
    Ok(g.value(l))
}

#[pyfunction]
fn approximation_gap(logits: Vec<f64>, s: f64) -> f64 {
    losses::approximation_gap(&logits, s)
}

/// Polynomial decay `base_lr · (1 − iter/max_iter)^power`.
#[pyfunction]
#[pyo3(signature = (base_lr, iter, max_iter, power = 0.9))]
fn lr_at(base_lr: f64, iter: usize, max_iter: usize, power: f64) -> f64 {
    let state = trainer::OptimizerState {
        base_lr,
        power,
        ..trainer::OptimizerState::new(0, max_iter)
    };
    trainer::lr_at(&state, iter)
}

#[pyclass(name = "Scene", module = "mtl_py", frozen)]
struct PyScene {
    inner: Scene,
}

#[pymethods]
impl PyScene {
    /// Generates a scene; keyword arguments use the config key names
    /// (`width`, `num_classes`, `fog`, ...).
    #[staticmethod]
    #[pyo3(signature = (seed, **params))]
    fn generate(seed: u64, params: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let config = TrainConfig::from_kv(&kv_from(params)?).map_err(value_err)?;
        let p = scenes::SceneParams {
            seed,
            ..config.scene
        };
        let inner = scenes::generate_scene(&p).map_err(value_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn read(dir: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: scenes::read_scene(&dir).map_err(value_err)?,
        })
    }

    fn write(&self, dir: PathBuf) -> PyResult<()> {
        scenes::write_scene(&self.inner, &dir).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes
    }

    #[getter]
    fn class_map(&self) -> Vec<u32> {
        self.inner.class_map.clone()
    }

    #[getter]
    fn depth_map(&self) -> Vec<f64> {
        self.inner.depth_map.clone()
    }

    #[getter]
    fn instance_map(&self) -> Vec<u32> {
        self.inner.instance_map.clone()
    }

    #[getter]
    fn vector_targets(&self) -> Vec<[f64; 2]> {
        self.inner.vector_targets.clone()
    }

    #[getter]
    fn valid_depth_mask(&self) -> Vec<bool> {
        self.inner.valid_depth_mask.clone()
    }

    #[getter]
    fn valid_instance_mask(&self) -> Vec<bool> {
        self.inner.valid_instance_mask.clone()
    }

    #[getter]
    fn intensity(&self) -> Vec<f64> {
        self.inner.intensity.clone()
    }

    fn instance_class_mask(&self) -> Vec<bool> {
        self.inner.instance_class_mask()
    }

    fn num_instances(&self) -> usize {
        self.inner.num_instances()
    }

    fn split_instances(&self) -> Vec<u32> {
        self.inner.split_instances()
    }

    fn __repr__(&self) -> String {
        format!(
            "Scene(seed={}, {}x{}, {} instances)",
            self.inner.seed,
            self.inner.width,
            self.inner.height,
            self.inner.num_instances()
        )
    }
}

fn vote_set(points: Vec<[f64; 2]>) -> VoteSet {
    VoteSet {
        source_pixels: (0..points.len()).map(|i| (0, i)).collect(),
        points,
    }
}

/// OPTICS ordering as `(order, reachability, core_distance)`; undefined
/// distances are `inf`.
#[pyfunction]
fn optics_order(points: Vec<[f64; 2]>, min_pts: usize, eps: f64) -> PyResult<(Vec<usize>, Vec<f64>, Vec<f64>)> {
    let o = hough::optics_order(&vote_set(points), min_pts, eps).map_err(value_err)?;
    Ok((o.order, o.reachability, o.core_distance))
}

/// Cluster label per point (0 is noise) from a flat cut at `eps_prime`.
#[pyfunction]
fn extract_clusters(points: Vec<[f64; 2]>, min_pts: usize, eps: f64, eps_prime: f64) -> PyResult<Vec<u32>> {
    let votes = vote_set(points);
    let o = hough::optics_order(&votes, min_pts, eps).map_err(value_err)?;
    Ok(hough::extract_clusters(&o, &votes, eps_prime).map_err(value_err)?.labels)
}

/// Instance id per pixel from centroid offsets over a row-major image.
#[pyfunction]
#[pyo3(signature = (vectors, mask, width, min_pts = 5, eps_prime = 2.0))]
fn segment_instances(
    vectors: Vec<[f64; 2]>,
    mask: Vec<bool>,
    width: usize,
    min_pts: usize,
    eps_prime: f64,
) -> PyResult<Vec<u32>> {
    if width == 0 || !mask.len().is_multiple_of(width) {
        return Err(value_err("mask length must be a multiple of width"));
    }
    let params = SegmentParams::for_image(width, mask.len() / width, min_pts, eps_prime);
    hough::segment_instances(&vectors, &mask, width, params).map_err(value_err)
}

/// `(mean, per_class)`; classes absent from both maps are `None`.
#[pyfunction]
fn iou(pred: Vec<u32>, gt: Vec<u32>, num_classes: usize) -> PyResult<(f64, Vec<Option<f64>>)> {
    let s = metrics::iou(&pred, &gt, num_classes).map_err(value_err)?;
    Ok((s.mean, s.per_class))
}

#[pyfunction]
fn partition_match(pred: Vec<u32>, gt: Vec<u32>, mask: Vec<bool>) -> PyResult<f64> {
    Ok(metrics::partition_match(&pred, &gt, &mask).map_err(value_err)?.score)
}

#[pyfunction]
fn depth_errors(pred: Vec<f64>, gt: Vec<f64>, mask: Vec<bool>) -> PyResult<(f64, f64)> {
    metrics::depth_errors(&pred, &gt, &mask).map_err(value_err)
}

fn metrics_dict<'py>(py: Python<'py>, m: &MetricReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    for (name, v) in m.columns() {
        if !v.is_nan() {
            d.set_item(name, v)?;
        }
    }
    Ok(d)
}

/// Trains one model. `config` maps config keys to values; the result holds
/// `final_s`, `metrics`, `run_csv` and `task_names`.
#[pyfunction]
#[pyo3(signature = (config = None))]
fn train<'py>(py: Python<'py>, config: Option<&Bound<'py, PyDict>>) -> PyResult<Bound<'py, PyDict>> {
    let config = TrainConfig::from_kv(&kv_from(config)?).map_err(value_err)?;
    let outcome = py.detach(|| trainer::train(&config)).map_err(|e| match e {
        TrainError::Config(_) => value_err(e),
        _ => PyRuntimeError::new_err(e.to_string()),
    })?;
    let rec = &outcome.record;
    let d = PyDict::new(py);
    d.set_item("task_names", rec.task_names.clone())?;
    d.set_item("final_s", rec.final_s())?;
    d.set_item("clamp_events", rec.clamp_events)?;
    if let Some(m) = &rec.final_metrics {
        d.set_item("metrics", metrics_dict(py, m)?)?;
    }
    d.set_item("run_csv", rec.to_csv())?;
    Ok(d)
}

/// Finite-difference check of the combined three-task objective.
#[pyfunction]
#[pyo3(signature = (seed = 0, points = 100))]
fn gradcheck<'py>(py: Python<'py>, seed: u64, points: usize) -> PyResult<Bound<'py, PyDict>> {
    let r = py
        .detach(|| trainer::gradcheck::gradcheck(seed, points))
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    let d = PyDict::new(py);
    d.set_item("max_error", r.max_error)?;
    d.set_item("points", r.points)?;
    d.set_item("rejected", r.rejected)?;
    d.set_item("passed", r.passed())?;
    Ok(d)
}

#[pymodule]
fn mtl_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyScene>()?;
    m.add_function(wrap_pyfunction!(uncertainty_objective, m)?)?;
    m.add_function(wrap_pyfunction!(cross_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(approximation_gap, m)?)?;
    m.add_function(wrap_pyfunction!(lr_at, m)?)?;
    m.add_function(wrap_pyfunction!(optics_order, m)?)?;
    m.add_function(wrap_pyfunction!(extract_clusters, m)?)?;
    m.add_function(wrap_pyfunction!(segment_instances, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(partition_match, m)?)?;
    m.add_function(wrap_pyfunction!(depth_errors, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
