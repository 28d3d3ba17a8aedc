//! Python bindings: geometry, affine registration, cycle QA helpers, MOT
//! scoring and the file-based pipeline stages.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyModule;

use serialtrack_core::cycle_qa;
use serialtrack_core::geometry::{self, Point2D};
use serialtrack_core::mot_metrics::{self, FrameSet};
use serialtrack_core::pipeline::{self, Config, PipelineError};
use serialtrack_core::registration::{self, AffineModel, Correspondence, RansacParams};
use serialtrack_core::transform;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn pipeline_err(e: PipelineError) -> PyErr {
    match e.exit_code() {
        2 => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn to_py_json<T: serde::Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(value_err)?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn points(v: &[(f64, f64)]) -> Vec<Point2D> {
    v.iter().map(|&(x, y)| Point2D::new(x, y)).collect()
}

/// Axis-aligned box given by its corners.
#[pyclass(name = "BBox", frozen, from_py_object)]
#[derive(Clone)]
struct PyBBox(geometry::BBox);

#[pymethods]
impl PyBBox {
    #[new]
    fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> PyResult<Self> {
        geometry::BBox::new(x_min, y_min, x_max, y_max).map(Self).map_err(value_err)
    }

    #[staticmethod]
    fn from_ltwh(left: f64, top: f64, width: f64, height: f64) -> PyResult<Self> {
        geometry::BBox::from_ltwh(left, top, width, height).map(Self).map_err(value_err)
    }

    #[getter]
    fn x_min(&self) -> f64 {
        self.0.x_min()
    }
    #[getter]
    fn y_min(&self) -> f64 {
        self.0.y_min()
    }
    #[getter]
    fn x_max(&self) -> f64 {
        self.0.x_max()
    }
    #[getter]
    fn y_max(&self) -> f64 {
        self.0.y_max()
    }
    #[getter]
    fn area(&self) -> f64 {
        self.0.area()
    }

    fn iou(&self, other: &PyBBox) -> f64 {
        geometry::iou_box(&self.0, &other.0)
    }

    fn __repr__(&self) -> String {
        format!("BBox({}, {}, {}, {})", self.0.x_min(), self.0.y_min(), self.0.x_max(), self.0.y_max())
    }
}

/// IoU of two convex polygons given as vertex lists (hulls are taken first).
#[pyfunction]
fn iou_polygon(a: Vec<(f64, f64)>, b: Vec<(f64, f64)>) -> PyResult<f64> {
    let pa = geometry::ConvexPolygon::hull(&points(&a)).map_err(value_err)?;
    let pb = geometry::ConvexPolygon::hull(&points(&b)).map_err(value_err)?;
    Ok(geometry::iou_polygon(&pa, &pb))
}

/// IoU of two circles given as `(cx, cy, r)`.
#[pyfunction]
fn iou_circle(a: (f64, f64, f64), b: (f64, f64, f64)) -> PyResult<f64> {
    let ca = geometry::Circle::new(Point2D::new(a.0, a.1), a.2).map_err(value_err)?;
    let cb = geometry::Circle::new(Point2D::new(b.0, b.1), b.2).map_err(value_err)?;
    Ok(geometry::iou_circle(&ca, &cb))
}

/// 2D affine map `(x, y) -> (a x + b y + tx, c x + d y + ty)`.
#[pyclass(name = "AffineTransform", frozen, from_py_object)]
#[derive(Clone)]
struct PyAffine(transform::AffineTransform2D);

#[pymethods]
impl PyAffine {
    #[new]
    #[pyo3(signature = (a=1.0, b=0.0, tx=0.0, c=0.0, d=1.0, ty=0.0))]
    fn new(a: f64, b: f64, tx: f64, c: f64, d: f64, ty: f64) -> PyResult<Self> {
        transform::AffineTransform2D::from_params(a, b, tx, c, d, ty).map(Self).map_err(value_err)
    }

    fn matrix(&self) -> [[f64; 3]; 3] {
        self.0.matrix()
    }

    fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let p = self.0.apply(Point2D::new(x, y));
        (p.x, p.y)
    }

    fn inverse(&self) -> PyResult<Self> {
        self.0.inverse().map(Self).map_err(value_err)
    }

    /// `self ∘ other`: applies `other` first.
    fn compose(&self, other: &PyAffine) -> Self {
        Self(self.0.compose(&other.0))
    }

    fn __repr__(&self) -> String {
        format!("AffineTransform({:?})", self.0.matrix())
    }
}

/// Robust affine (or similarity) fit. Returns the transform and an inlier mask.
#[pyfunction]
#[pyo3(signature = (source, target, inlier_threshold=10.0, max_iterations=2000, min_inlier_fraction=0.3, seed=0, similarity=false))]
fn fit_ransac(
    source: Vec<(f64, f64)>,
    target: Vec<(f64, f64)>,
    inlier_threshold: f64,
    max_iterations: usize,
    min_inlier_fraction: f64,
    seed: u64,
    similarity: bool,
) -> PyResult<(PyAffine, Vec<bool>)> {
    if source.len() != target.len() {
        return Err(PyValueError::new_err("source and target differ in length"));
    }
    let corr: Vec<Correspondence> = points(&source)
        .into_iter()
        .zip(points(&target))
        .map(|(s, t)| Correspondence::new(s, t))
        .collect();
    let params = RansacParams {
        max_iterations,
        inlier_threshold,
        min_inlier_fraction,
        seed,
    };
    let model = if similarity { AffineModel::Similarity } else { AffineModel::Affine };
    let fit = registration::fit_ransac(&corr, &params, model).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok((PyAffine(fit.transform), fit.inliers))
}

/// Lower-median IoU of boxes against copies shifted by `shift` in random
/// directions; a data-driven choice of the cycle threshold Q.
#[pyfunction]
#[pyo3(signature = (boxes, shift, trials=200, seed=0))]
fn calibrate_q(boxes: Vec<PyBBox>, shift: f64, trials: usize, seed: u64) -> f64 {
    let b: Vec<_> = boxes.into_iter().map(|b| b.0).collect();
    cycle_qa::calibrate_q(&b, shift, trials, seed)
}

/// Classifies per-pair failure flags; returns a dict with `class`,
/// `fc_flags` and `failing_runs`.
#[pyfunction]
fn classify_series(py: Python<'_>, flags: Vec<bool>) -> PyResult<Py<PyAny>> {
    to_py_json(py, &cycle_qa::classify_series(&flags))
}

/// Scores MOT15 hypothesis text against ground-truth text; returns a dict of
/// metrics.
#[pyfunction]
#[pyo3(signature = (gt, hyp, match_iou=0.5))]
fn evaluate_mot(py: Python<'_>, gt: &str, hyp: &str, match_iou: f64) -> PyResult<Py<PyAny>> {
    let g = FrameSet::parse(gt).map_err(value_err)?;
    let h = FrameSet::parse(hyp).map_err(value_err)?;
    let score = mot_metrics::evaluate(&g, &h, match_iou).map_err(value_err)?;
    to_py_json(py, &score)
}

/// Parses MOT15 text into a list of dicts.
#[pyfunction]
fn parse_mot15(py: Python<'_>, text: &str) -> PyResult<Py<PyAny>> {
    to_py_json(py, &mot_metrics::parse_mot15(text).map_err(value_err)?)
}

fn load_config(config: Option<&str>) -> PyResult<Config> {
    match config {
        Some(text) => Config::from_toml(text).map_err(pipeline_err),
        None => Ok(Config::default()),
    }
}

/// Writes a simulated stack to `out`; `config` is TOML text.
#[pyfunction]
#[pyo3(signature = (out, config=None))]
fn simulate(py: Python<'_>, out: PathBuf, config: Option<&str>) -> PyResult<usize> {
    let cfg = load_config(config)?;
    py.detach(|| pipeline::cmd_simulate(&cfg.simulate, &out)).map_err(pipeline_err)
}

/// Runs register, QA, track and evaluate into `out`. Without `stack` a
/// simulated stack is generated first. Returns a summary dict.
#[pyfunction]
#[pyo3(signature = (out, config=None, stack=None, assume_good=false))]
fn run_pipeline(
    py: Python<'_>,
    out: PathBuf,
    config: Option<&str>,
    stack: Option<PathBuf>,
    assume_good: bool,
) -> PyResult<Py<PyAny>> {
    let cfg = load_config(config)?;
    let summary = py
        .detach(|| pipeline::cmd_pipeline(&cfg, stack.as_deref(), assume_good, &out))
        .map_err(pipeline_err)?;
    let value = serde_json::json!({
        "qa": summary.qa,
        "track_count": summary.track_count,
        "score": summary.score,
    });
    to_py_json(py, &value)
}

#[pymodule]
fn serialtrack(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyBBox>()?;
    m.add_class::<PyAffine>()?;
    m.add_function(wrap_pyfunction!(iou_polygon, m)?)?;
    m.add_function(wrap_pyfunction!(iou_circle, m)?)?;
    m.add_function(wrap_pyfunction!(fit_ransac, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate_q, m)?)?;
    m.add_function(wrap_pyfunction!(classify_series, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_mot, m)?)?;
    m.add_function(wrap_pyfunction!(parse_mot15, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    Ok(())
}
