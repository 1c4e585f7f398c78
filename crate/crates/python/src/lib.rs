//! Python bindings: images, the fusion model, metrics, the linear-blend
//! baseline and the dataset/training harness.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyList;

use wbfusion::harness::{self, Baseline, Prediction, TrainConfig, TrainOptions};
use wbfusion::imaging::{ImageRgb, PresetStack};
use wbfusion::linear;
use wbfusion::metrics::{self, LabColor};
use wbfusion::model::{self, checkpoint, ModelParams};
use wbfusion::synth::{self, Dataset, DatasetConfig, SceneOptions, Split};
use wbfusion::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::InvalidArgument(_) | Error::Config(_) | Error::Format { .. } => PyValueError::new_err(e.to_string()),
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Parses a JSON string into Python objects.
fn json<'py>(py: Python<'py>, body: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (body,))
}

/// An sRGB image, values in [0, 1], stored row-major as `H x W x 3`.
#[pyclass(name = "Image", module = "wbfusion_py", frozen, from_py_object)]
#[derive(Clone)]
struct PyImage {
    inner: ImageRgb,
}

#[pymethods]
impl PyImage {
    #[new]
    fn new(width: usize, height: usize, data: Vec<f32>) -> PyResult<Self> {
        Ok(Self {
            inner: ImageRgb::new(width, height, data).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: ImageRgb::load_png(path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save_png(path).map_err(py_err)
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    /// Flat `[r, g, b, r, g, b, ...]` list.
    fn data(&self) -> Vec<f32> {
        self.inner.data().to_vec()
    }

    fn pixel(&self, x: usize, y: usize) -> PyResult<(f32, f32, f32)> {
        if x >= self.inner.width() || y >= self.inner.height() {
            return Err(PyValueError::new_err(format!("pixel ({x}, {y}) is outside the image")));
        }
        let [r, g, b] = self.inner.pixel(y * self.inner.width() + x);
        Ok((r, g, b))
    }

    fn __repr__(&self) -> String {
        format!("Image({}x{})", self.inner.width(), self.inner.height())
    }
}

fn stack_of(presets: Vec<PyImage>) -> PyResult<PresetStack> {
    PresetStack::new(presets.into_iter().map(|p| p.inner).collect()).map_err(py_err)
}

/// Fusion network: configuration plus 32-bit parameters.
#[pyclass(name = "Model", module = "wbfusion_py", frozen)]
struct PyModel {
    cfg: model::ModelConfig,
    params: ModelParams<f32>,
}

#[pymethods]
impl PyModel {
    /// Freshly initialized network.
    #[new]
    #[pyo3(signature = (presets = 5, seed = 0, channels = 15, heads = 3, ffn_expansion = 2.0))]
    fn new(presets: usize, seed: u64, channels: usize, heads: usize, ffn_expansion: f32) -> PyResult<Self> {
        let cfg = model::ModelConfig {
            preset_count: presets,
            feature_channels: channels,
            attention_heads: heads,
            ffn_expansion,
        };
        let params = ModelParams::init(&cfg, seed).map_err(py_err)?;
        Ok(Self { cfg, params })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (cfg, params) = checkpoint::load(path).map_err(py_err)?;
        Ok(Self { cfg, params })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save(path, &self.cfg, &self.params).map_err(py_err)
    }

    #[getter]
    fn param_count(&self) -> usize {
        model::param_count(&self.cfg)
    }

    #[getter]
    fn presets(&self) -> usize {
        self.cfg.preset_count
    }

    /// Fuses five preset renders (tungsten, fluorescent, daylight, cloudy,
    /// shade); the output is clamped to [0, 1].
    fn fuse(&self, py: Python<'_>, presets: Vec<PyImage>) -> PyResult<PyImage> {
        let stack = stack_of(presets)?;
        let out = py
            .detach(|| model::forward(&stack, &self.params, &self.cfg, model::Mode::Inference))
            .map_err(py_err)?;
        Ok(PyImage { inner: out })
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(presets={}, channels={}, heads={}, params={})",
            self.cfg.preset_count,
            self.cfg.feature_channels,
            self.cfg.attention_heads,
            model::param_count(&self.cfg)
        )
    }
}

/// CIEDE2000 between two CIELAB colors.
#[pyfunction]
fn delta_e_2000(lab1: (f64, f64, f64), lab2: (f64, f64, f64)) -> f64 {
    metrics::delta_e_2000(LabColor::new(lab1.0, lab1.1, lab1.2), LabColor::new(lab2.0, lab2.1, lab2.2))
}

/// sRGB in [0, 1] to CIELAB (D65).
#[pyfunction]
fn srgb_to_lab(rgb: (f32, f32, f32)) -> (f64, f64, f64) {
    let c = LabColor::from_srgb([rgb.0, rgb.1, rgb.2]);
    (c.l, c.a, c.b)
}

/// Mean CIEDE2000, MSE (0-255 scale) and mean angular error in degrees.
#[pyfunction]
fn image_metrics(py: Python<'_>, prediction: PyImage, ground_truth: PyImage) -> PyResult<Py<PyAny>> {
    let m = metrics::ImageMetrics::compute("image", &prediction.inner, &ground_truth.inner).map_err(py_err)?;
    let d = pyo3::types::PyDict::new(py);
    d.set_item("delta_e", m.delta_e)?;
    d.set_item("mse", m.mse)?;
    d.set_item("mae", m.mae)?;
    Ok(d.into_any().unbind())
}

/// Euclidean projection onto the probability simplex.
#[pyfunction]
fn project_to_simplex(v: Vec<f64>) -> PyResult<Vec<f64>> {
    if v.is_empty() || v.iter().any(|x| !x.is_finite()) {
        return Err(PyValueError::new_err("need a non-empty finite vector"));
    }
    Ok(linear::project_to_simplex(&v))
}

/// Best convex blend of preset colors for one target: `(weights, residual)`.
#[pyfunction]
fn fit_pixel_weights(presets: Vec<(f64, f64, f64)>, target: (f64, f64, f64)) -> PyResult<(Vec<f64>, f64)> {
    if presets.is_empty() {
        return Err(PyValueError::new_err("need at least one preset color"));
    }
    let p: Vec<[f64; 3]> = presets.into_iter().map(|(r, g, b)| [r, g, b]).collect();
    let fit = linear::fit_pixel_weights(&p, [target.0, target.1, target.2]);
    Ok((fit.weights, fit.residual))
}

/// Per-pixel oracle convex blend of five presets against a ground truth.
#[pyfunction]
fn oracle_blend(py: Python<'_>, presets: Vec<PyImage>, ground_truth: PyImage) -> PyResult<PyImage> {
    let stack = stack_of(presets)?;
    let (img, _) = py.detach(|| linear::oracle_blend(&stack, &ground_truth.inner)).map_err(py_err)?;
    Ok(PyImage { inner: img })
}

/// Writes a synthetic dataset and returns its manifest.
#[pyfunction]
#[pyo3(signature = (out, n_scenes, size = 64, seed = 0, illuminants = 2))]
fn generate_dataset<'py>(
    py: Python<'py>,
    out: PathBuf,
    n_scenes: usize,
    size: usize,
    seed: u64,
    illuminants: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = DatasetConfig {
        n_scenes,
        height: size,
        width: size,
        seed,
        scene: SceneOptions {
            illuminants,
            ..SceneOptions::default()
        },
        ..DatasetConfig::default()
    };
    let m = py.detach(|| synth::build_dataset(&out, &cfg)).map_err(py_err)?;
    json(py, &serde_json::to_string(&m).expect("manifest serializes"))
}

/// Trains from a dataset directory, writes the selected checkpoint and
/// returns the run manifest.
#[pyfunction]
#[pyo3(signature = (data, checkpoint, steps = 5000, presets = 5, seed = 0, batch_size = 1, val_interval = 100, lr_start = 1e-3, lr_end = 1e-5))]
#[allow(clippy::too_many_arguments)]
fn train<'py>(
    py: Python<'py>,
    data: PathBuf,
    checkpoint: PathBuf,
    steps: usize,
    presets: usize,
    seed: u64,
    batch_size: usize,
    val_interval: usize,
    lr_start: f64,
    lr_end: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = TrainConfig {
        dataset: data,
        checkpoint,
        options: TrainOptions {
            model: model::ModelConfig::with_presets(presets),
            total_steps: steps,
            batch_size,
            seed,
            lr_start,
            lr_end,
            val_interval,
            crop: None,
        },
    };
    let m = py.detach(|| harness::train_from_disk(&cfg)).map_err(py_err)?;
    json(py, &m.to_json())
}

fn split_of(s: &str) -> PyResult<Split> {
    s.parse().map_err(py_err)
}

/// Metrics report for a checkpoint or a named baseline (a preset name,
/// `awb`, `gt` or `oracle`) on one split.
#[pyfunction]
#[pyo3(signature = (data, split = "test", checkpoint = None, baseline = None, threads = 1))]
fn evaluate<'py>(
    py: Python<'py>,
    data: PathBuf,
    split: &str,
    checkpoint: Option<PathBuf>,
    baseline: Option<&str>,
    threads: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let split = split_of(split)?;
    let baseline: Option<Baseline> = baseline.map(str::parse).transpose().map_err(py_err)?;
    let report = py
        .detach(|| {
            let scenes = Dataset::open(&data)?.load_split(split)?;
            match (checkpoint, baseline) {
                (Some(path), None) => {
                    let (cfg, params) = checkpoint::load(path)?;
                    harness::evaluate(&Prediction::Model(&params, &cfg), &scenes, split.name(), threads)
                }
                (None, Some(b)) => harness::evaluate(&b.prediction(), &scenes, split.name(), threads),
                _ => Err(Error::Config("give exactly one of checkpoint and baseline".into())),
            }
        })
        .map_err(py_err)?;
    json(py, &report.to_json())
}

/// Pooled convex-hull statistics of one split (per-scene distances omitted).
#[pyfunction]
#[pyo3(signature = (data, split = "test", tol = linear::DEFAULT_HULL_TOL, threads = 1))]
fn hull<'py>(py: Python<'py>, data: PathBuf, split: &str, tol: f64, threads: usize) -> PyResult<Bound<'py, PyAny>> {
    let split = split_of(split)?;
    let summary = py
        .detach(|| {
            let scenes = Dataset::open(&data)?.load_split(split)?;
            harness::hull_scenes(&scenes, split.name(), tol, threads)
        })
        .map_err(py_err)?;
    json(py, &summary.to_json())
}

/// Preset names in stack order.
#[pyfunction]
fn preset_names(py: Python<'_>) -> PyResult<Bound<'_, PyList>> {
    PyList::new(py, wbfusion::imaging::Preset::ALL.iter().map(|p| p.name()))
}

#[pymodule]
fn wbfusion_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyImage>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(delta_e_2000, m)?)?;
    m.add_function(wrap_pyfunction!(srgb_to_lab, m)?)?;
    m.add_function(wrap_pyfunction!(image_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(project_to_simplex, m)?)?;
    m.add_function(wrap_pyfunction!(fit_pixel_weights, m)?)?;
    m.add_function(wrap_pyfunction!(oracle_blend, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(hull, m)?)?;
    m.add_function(wrap_pyfunction!(preset_names, m)?)?;
    Ok(())
}
