//! Python bindings. Images cross the boundary as flat row-major RGB float
//! lists (`h * w * 3` values in [0, 1]); `numpy_array.ravel().tolist()`
//! is the expected producer.

use std::path::PathBuf;
use std::sync::Arc;

use engine::data::{load_dataset, synthetic, DatasetKind};
use engine::deep::DeepMetrics;
use engine::evaluation::{benchmark, MetricSpec};
use engine::training::TrainConfig;
use engine::visualization::{calibrate_slope, render_error_map, render_mask, RenderSpec};
use engine::{Error, MetricContext, MetricId};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::InvalidInput(_) | Error::ShapeMismatch(_) | Error::Config(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn metric_id(name: &str) -> PyResult<MetricId> {
    name.parse().map_err(err)
}

#[pyclass(name = "Image", module = "vismask", frozen)]
struct PyImage {
    inner: engine::Image,
}

#[pymethods]
impl PyImage {
    #[new]
    fn new(height: usize, width: usize, data: Vec<f32>) -> PyResult<Self> {
        Ok(Self {
            inner: engine::Image::from_hwc(height, width, data).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: engine::Image::load(path).map_err(err)?,
        })
    }

    fn save_png(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save_png(path).map_err(err)
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    fn to_list(&self) -> PyResult<Vec<f32>> {
        self.inner.to_hwc().map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("Image({}x{})", self.inner.height(), self.inner.width())
    }
}

/// Base metrics plus the optional feature-space backbone.
#[pyclass(name = "Metrics", module = "vismask", frozen)]
struct PyMetrics {
    ctx: MetricContext,
}

#[pymethods]
impl PyMetrics {
    #[new]
    #[pyo3(signature = (ppd = engine::metrics::DEFAULT_PPD, weights = None, dists_fallback = false))]
    fn new(ppd: f64, weights: Option<PathBuf>, dists_fallback: bool) -> PyResult<Self> {
        let deep = match weights {
            Some(w) => Some(Arc::new(DeepMetrics::load(w, dists_fallback).map_err(err)?)),
            None => None,
        };
        Ok(Self {
            ctx: MetricContext { ppd, deep },
        })
    }

    /// A context whose feature-space metrics run on a seeded random trunk;
    /// useful for smoke tests, meaningless as a quality measure.
    #[staticmethod]
    #[pyo3(signature = (seed = 0))]
    fn with_random_backbone(seed: u64) -> PyResult<Self> {
        Ok(Self {
            ctx: MetricContext::with_deep(Arc::new(DeepMetrics::random(seed).map_err(err)?)),
        })
    }

    #[staticmethod]
    fn names() -> Vec<&'static str> {
        MetricId::ALL.iter().map(|m| m.as_str()).collect()
    }

    fn score(&self, metric: &str, reference: &PyImage, distorted: &PyImage) -> PyResult<f64> {
        Ok(self.ctx.evaluate(metric_id(metric)?, &reference.inner, &distorted.inner).map_err(err)?.score)
    }

    /// `(height, width, values)` of the per-pixel error map.
    fn error_map(&self, metric: &str, reference: &PyImage, distorted: &PyImage) -> PyResult<(usize, usize, Vec<f32>)> {
        let res = self.ctx.evaluate(metric_id(metric)?, &reference.inner, &distorted.inner).map_err(err)?;
        let map = res
            .error_map
            .ok_or_else(|| PyValueError::new_err(format!("{metric} has no error map")))?;
        Ok((map.height, map.width, map.data))
    }

    /// Writes a colour-mapped error map (plus JSON sidecar); returns the
    /// sigmoid slope used for unbounded maps.
    #[pyo3(signature = (metric, reference, distorted, out, slope = None))]
    fn render_error_map(
        &self,
        metric: &str,
        reference: &PyImage,
        distorted: &PyImage,
        out: PathBuf,
        slope: Option<f64>,
    ) -> PyResult<f64> {
        let id = metric_id(metric)?;
        let res = self.ctx.evaluate(id, &reference.inner, &distorted.inner).map_err(err)?;
        let k = match (slope, res.error_map.as_ref()) {
            (Some(k), _) => k,
            (None, Some(map)) => calibrate_slope([map]).unwrap_or(1.0),
            (None, None) => 1.0,
        };
        render_error_map(&res, &RenderSpec::for_metric(id, k, out)).map_err(err)?;
        Ok(k)
    }
}

#[pyclass(name = "EnhancedMetric", module = "vismask", frozen)]
struct PyEnhanced {
    inner: engine::EnhancedMetric,
}

fn ctx_or_default(ctx: Option<&PyMetrics>) -> MetricContext {
    ctx.map(|c| c.ctx.clone()).unwrap_or_default()
}

#[pymethods]
impl PyEnhanced {
    /// Untrained metric with seeded mask generator and scaler.
    #[new]
    #[pyo3(signature = (base, seed = 0))]
    fn new(base: &str, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: engine::EnhancedMetric::new(metric_id(base)?, seed).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: engine::EnhancedMetric::load(path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path, "", serde_json::Value::Null).map_err(err)
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name()
    }

    #[getter]
    fn base(&self) -> &'static str {
        self.inner.base.as_str()
    }

    #[pyo3(signature = (reference, distorted, context = None))]
    fn score(&self, reference: &PyImage, distorted: &PyImage, context: Option<&PyMetrics>) -> PyResult<f64> {
        let ctx = ctx_or_default(context);
        Ok(self.inner.evaluate(&ctx, &reference.inner, &distorted.inner).map_err(err)?.score)
    }

    /// Input-resolution mask as `(height, width, values)`.
    #[pyo3(signature = (reference, distorted, context = None))]
    fn mask(&self, reference: &PyImage, distorted: &PyImage, context: Option<&PyMetrics>) -> PyResult<(usize, usize, Vec<f32>)> {
        let ctx = ctx_or_default(context);
        let m = engine::visualization::primary_mask(&ctx, &self.inner, &reference.inner, &distorted.inner).map_err(err)?;
        Ok((m.height, m.width, m.data))
    }

    #[pyo3(signature = (reference, distorted, out, context = None))]
    fn render_mask(&self, reference: &PyImage, distorted: &PyImage, out: PathBuf, context: Option<&PyMetrics>) -> PyResult<()> {
        let ctx = ctx_or_default(context);
        let m = engine::visualization::primary_mask(&ctx, &self.inner, &reference.inner, &distorted.inner).map_err(err)?;
        render_mask(&m, &RenderSpec::for_metric(MetricId::Mae, 1.0, out)).map_err(err)?;
        Ok(())
    }

    fn __repr__(&self) -> String {
        format!("EnhancedMetric({})", self.inner.name())
    }
}

#[pyfunction]
fn srcc(x: Vec<f64>, y: Vec<f64>) -> PyResult<Option<f64>> {
    engine::evaluation::srcc(&x, &y).map_err(err)
}

#[pyfunction]
fn krcc(x: Vec<f64>, y: Vec<f64>) -> PyResult<Option<f64>> {
    engine::evaluation::krcc(&x, &y).map_err(err)
}

/// `(plcc, (a, b, c, d), linear_fallback)`.
#[pyfunction]
fn plcc_fitted(scores: Vec<f64>, mos: Vec<f64>) -> PyResult<(Option<f64>, [f64; 4], bool)> {
    let f = engine::evaluation::plcc_fitted(&scores, &mos).map_err(err)?;
    Ok((f.plcc, f.params, f.linear_fallback))
}

/// Writes a small synthetic quality dataset; returns its manifest path.
#[pyfunction]
#[pyo3(signature = (out, refs = 10, side = 64, seed = 0))]
fn make_synthetic(out: PathBuf, refs: usize, side: usize, seed: u64) -> PyResult<PathBuf> {
    synthetic::write_dataset(out, refs, side, seed).map_err(err)
}

/// Trains an enhanced metric on a manifest-described dataset.
#[pyfunction]
#[pyo3(signature = (
    metric, manifest, out, seed = 0, epochs = 30, max_steps = None, learning_rate = 1e-4,
    batch_size = 4, short_side = None, val_fraction = 0.1, context = None
))]
#[allow(clippy::too_many_arguments)]
fn train<'py>(
    py: Python<'py>,
    metric: &str,
    manifest: PathBuf,
    out: PathBuf,
    seed: u64,
    epochs: usize,
    max_steps: Option<u64>,
    learning_rate: f64,
    batch_size: usize,
    short_side: Option<usize>,
    val_fraction: f64,
    context: Option<&PyMetrics>,
) -> PyResult<Bound<'py, PyDict>> {
    let data = load_dataset(manifest, DatasetKind::Csv).map_err(err)?;
    let cfg = TrainConfig {
        seed,
        epochs,
        max_steps,
        learning_rate,
        batch_size,
        short_side,
        val_fraction,
        ..TrainConfig::new(metric_id(metric)?)
    };
    let ctx = ctx_or_default(context);
    let o = engine::training::train(&cfg, &data, &ctx, out).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("checkpoint", o.checkpoint)?;
    d.set_item("last_checkpoint", o.last_checkpoint)?;
    d.set_item("log", o.log)?;
    d.set_item("steps", o.steps)?;
    d.set_item("best_val_srcc", o.best_val_srcc)?;
    d.set_item("epoch_losses", o.epoch_losses)?;
    Ok(d)
}

/// Correlation reports for base metrics and trained checkpoints on a
/// manifest-described dataset.
#[pyfunction]
#[pyo3(signature = (manifest, metrics, checkpoints = Vec::new(), short_side = None, context = None))]
fn evaluate<'py>(
    py: Python<'py>,
    manifest: PathBuf,
    metrics: Vec<String>,
    checkpoints: Vec<PathBuf>,
    short_side: Option<usize>,
    context: Option<&PyMetrics>,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let data = load_dataset(manifest, DatasetKind::Csv).map_err(err)?;
    let mut specs = Vec::new();
    for m in &metrics {
        specs.push(MetricSpec::Base(metric_id(m)?));
    }
    for c in checkpoints {
        specs.push(MetricSpec::Enhanced(Box::new(engine::EnhancedMetric::load(c).map_err(err)?)));
    }
    let ctx = ctx_or_default(context);
    let reports = benchmark(&ctx, &specs, &[data], short_side).map_err(err)?;
    reports
        .into_iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("dataset", r.dataset)?;
            d.set_item("metric", r.metric)?;
            d.set_item("plcc", r.plcc)?;
            d.set_item("srcc", r.srcc)?;
            d.set_item("krcc", r.krcc)?;
            d.set_item("n", r.n)?;
            d.set_item("flags", r.flags)?;
            Ok(d)
        })
        .collect()
}

#[pymodule]
fn vismask(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyImage>()?;
    m.add_class::<PyMetrics>()?;
    m.add_class::<PyEnhanced>()?;
    m.add_function(wrap_pyfunction!(srcc, m)?)?;
    m.add_function(wrap_pyfunction!(krcc, m)?)?;
    m.add_function(wrap_pyfunction!(plcc_fitted, m)?)?;
    m.add_function(wrap_pyfunction!(make_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
