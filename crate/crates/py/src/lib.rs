//! Python bindings for `focaldepth`.
//!
//! Pixel data crosses the boundary as flat row-major lists (channel fastest);
//! `numpy.asarray(x.data).reshape(x.shape)` recovers an array.

use std::path::PathBuf;

use pyo3::exceptions::{PyFileNotFoundError, PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use focaldepth::aif::{composite_aif, dff_argmax_depth, focus_measure, AifMode};
use focaldepth::estimate::{estimate_depth as run_estimate, Init, LossConfig, LossKind};
use focaldepth::eval::{make_scene as build_scene, Mask, SceneSpec, Texture};
use focaldepth::io::{self, DepthFormat, ImageFormat};
use focaldepth::optics::{calibrate_coc_threshold, check_schedule_tiling, coc_diameter_px};
use focaldepth::{DepthRange, Error, FocusSchedule};

fn to_py(err: Error) -> PyErr {
    match err {
        Error::MissingFile(_) => PyFileNotFoundError::new_err(err.to_string()),
        Error::Io { .. } | Error::Malformed { .. } | Error::UnsupportedChannels { .. } => {
            PyIOError::new_err(err.to_string())
        }
        _ => PyValueError::new_err(err.to_string()),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for focaldepth::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(to_py)
    }
}

fn image_format(name: &str) -> PyResult<ImageFormat> {
    ImageFormat::parse(name).ok_or_else(|| PyValueError::new_err(format!("unknown image format {name:?}")))
}

#[pyclass(name = "Lens", module = "pyfocaldepth", from_py_object)]
#[derive(Clone, Copy)]
struct PyLens(focaldepth::LensConfig);

#[pymethods]
impl PyLens {
    #[new]
    #[pyo3(signature = (focal_length=0.025, f_number=2.0, pixel_pitch=1e-5, coc_to_sigma=0.5, sigma_floor=0.25, max_kernel_radius=24))]
    fn new(
        focal_length: f64,
        f_number: f64,
        pixel_pitch: f64,
        coc_to_sigma: f64,
        sigma_floor: f64,
        max_kernel_radius: usize,
    ) -> PyResult<Self> {
        let lens = focaldepth::LensConfig {
            focal_length,
            f_number,
            pixel_pitch,
            coc_to_sigma,
            sigma_floor,
            max_kernel_radius,
        };
        lens.validate(&DepthRange::default()).py()?;
        Ok(Self(lens))
    }

    #[getter]
    fn focal_length(&self) -> f64 {
        self.0.focal_length
    }

    #[getter]
    fn f_number(&self) -> f64 {
        self.0.f_number
    }

    #[getter]
    fn pixel_pitch(&self) -> f64 {
        self.0.pixel_pitch
    }

    /// Circle-of-confusion diameter in pixels.
    fn coc_px(&self, depth: f64, focus_dist: f64) -> PyResult<f64> {
        coc_diameter_px(depth, focus_dist, &self.0).py()
    }

    fn __repr__(&self) -> String {
        format!(
            "Lens(focal_length={}, f_number={}, pixel_pitch={})",
            self.0.focal_length, self.0.f_number, self.0.pixel_pitch
        )
    }
}

#[pyclass(name = "Image", module = "pyfocaldepth", from_py_object)]
#[derive(Clone)]
struct PyImage(focaldepth::Image);

#[pymethods]
impl PyImage {
    #[new]
    fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> PyResult<Self> {
        focaldepth::Image::new(height, width, channels, data).py().map(Self)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        io::load_image(&path).py().map(Self)
    }

    #[pyo3(signature = (path, format="pfm"))]
    fn save(&self, path: PathBuf, format: &str) -> PyResult<()> {
        io::save_image(&self.0, &path, image_format(format)?).py()
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        (self.0.height(), self.0.width(), self.0.channels())
    }

    #[getter]
    fn data(&self) -> Vec<f64> {
        self.0.data().to_vec()
    }

    fn __repr__(&self) -> String {
        let (h, w, c) = self.shape();
        format!("Image({h}x{w}x{c})")
    }
}

#[pyclass(name = "DepthMap", module = "pyfocaldepth", from_py_object)]
#[derive(Clone)]
struct PyDepthMap(focaldepth::DepthMap);

#[pymethods]
impl PyDepthMap {
    #[new]
    fn new(height: usize, width: usize, data: Vec<f64>) -> PyResult<Self> {
        focaldepth::DepthMap::new(height, width, data).py().map(Self)
    }

    /// Reads `.pfm` (meters) or `.png` (16-bit millimeters), clamping into the range.
    #[staticmethod]
    #[pyo3(signature = (path, depth_min=0.7, depth_max=10.0))]
    fn load(path: PathBuf, depth_min: f64, depth_max: f64) -> PyResult<Self> {
        let format = DepthFormat::from_path(&path)
            .ok_or_else(|| PyValueError::new_err(format!("cannot infer depth format of {}", path.display())))?;
        let range = DepthRange::new(depth_min, depth_max).py()?;
        io::load_depth(&path, format, &range).py().map(|l| Self(l.depth))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let format = DepthFormat::from_path(&path)
            .ok_or_else(|| PyValueError::new_err(format!("cannot infer depth format of {}", path.display())))?;
        io::save_depth(&self.0, &path, format).py()
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        (self.0.height(), self.0.width())
    }

    #[getter]
    fn data(&self) -> Vec<f64> {
        self.0.data().to_vec()
    }

    fn __repr__(&self) -> String {
        format!("DepthMap({}x{})", self.0.height(), self.0.width())
    }
}

#[pyclass(name = "FocalStack", module = "pyfocaldepth", from_py_object)]
#[derive(Clone)]
struct PyFocalStack(focaldepth::FocalStack);

#[pymethods]
impl PyFocalStack {
    #[new]
    fn new(slices: Vec<PyImage>, distances: Vec<f64>) -> PyResult<Self> {
        let schedule = FocusSchedule::new(distances).py()?;
        let slices = slices.into_iter().map(|s| s.0).collect();
        focaldepth::FocalStack::new(slices, schedule).py().map(Self)
    }

    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        io::load_stack(&dir).py().map(Self)
    }

    #[pyo3(signature = (dir, format="pfm"))]
    fn save(&self, dir: PathBuf, format: &str) -> PyResult<()> {
        io::save_stack(&self.0, &dir, image_format(format)?).py()
    }

    #[getter]
    fn distances(&self) -> Vec<f64> {
        self.0.schedule().distances().to_vec()
    }

    #[getter]
    fn slices(&self) -> Vec<PyImage> {
        self.0.slices().iter().cloned().map(PyImage).collect()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "FocalStack({} slices, {}x{}x{})",
            self.0.len(),
            self.0.height(),
            self.0.width(),
            self.0.channels()
        )
    }
}

fn lens_or_default(lens: Option<PyLens>) -> focaldepth::LensConfig {
    lens.map(|l| l.0).unwrap_or_default()
}

fn schedule_or_default(distances: Option<Vec<f64>>) -> PyResult<FocusSchedule> {
    match distances {
        Some(d) => FocusSchedule::new(d).py(),
        None => Ok(focaldepth::default_schedule()),
    }
}

#[pyfunction]
fn default_schedule() -> Vec<f64> {
    focaldepth::default_schedule().distances().to_vec()
}

#[pyfunction]
#[pyo3(signature = (aif, depth, focus_dist, lens=None))]
fn render_slice(aif: &PyImage, depth: &PyDepthMap, focus_dist: f64, lens: Option<PyLens>) -> PyResult<PyImage> {
    focaldepth::render_slice(&aif.0, &depth.0, focus_dist, &lens_or_default(lens))
        .py()
        .map(PyImage)
}

#[pyfunction]
#[pyo3(signature = (aif, depth, distances=None, lens=None))]
fn render_stack(
    aif: &PyImage,
    depth: &PyDepthMap,
    distances: Option<Vec<f64>>,
    lens: Option<PyLens>,
) -> PyResult<PyFocalStack> {
    let schedule = schedule_or_default(distances)?;
    focaldepth::render_stack(&aif.0, &depth.0, &schedule, &lens_or_default(lens))
        .py()
        .map(PyFocalStack)
}

/// Gradient of `sum(upstream * render_slice(...))` with respect to depth, as a flat list.
#[pyfunction]
#[pyo3(signature = (aif, depth, focus_dist, upstream, lens=None))]
fn render_slice_adjoint(
    aif: &PyImage,
    depth: &PyDepthMap,
    focus_dist: f64,
    upstream: &PyImage,
    lens: Option<PyLens>,
) -> PyResult<Vec<f64>> {
    focaldepth::render_slice_adjoint(&aif.0, &depth.0, focus_dist, &lens_or_default(lens), &upstream.0)
        .py()
        .map(|g| g.data().to_vec())
}

#[pyfunction]
#[pyo3(signature = (stack, window_sigma=2.0, tau=None))]
fn all_in_focus(stack: &PyFocalStack, window_sigma: f64, tau: Option<f64>) -> PyResult<PyImage> {
    let mode = match tau {
        Some(tau) => AifMode::Softmax { tau },
        None => AifMode::Argmax,
    };
    let fv = focus_measure(&stack.0, window_sigma).py()?;
    composite_aif(&stack.0, &fv, mode).py().map(PyImage)
}

#[pyfunction]
#[pyo3(signature = (stack, window_sigma=2.0))]
fn dff_depth(stack: &PyFocalStack, window_sigma: f64) -> PyResult<PyDepthMap> {
    let fv = focus_measure(&stack.0, window_sigma).py()?;
    dff_argmax_depth(&fv, stack.0.schedule()).py().map(PyDepthMap)
}

/// Returns `(depth, losses)`. `init` is `"dff"`, a depth in meters, or a `DepthMap`.
#[pyfunction]
#[pyo3(signature = (
    stack, aif, lens=None, depth_min=0.7, depth_max=10.0, loss="l1", smoothness=0.0,
    iterations=500, lr=0.02, tolerance=0.0, init=None
))]
#[allow(clippy::too_many_arguments)]
fn estimate_depth(
    py: Python<'_>,
    stack: &PyFocalStack,
    aif: &PyImage,
    lens: Option<PyLens>,
    depth_min: f64,
    depth_max: f64,
    loss: &str,
    smoothness: f64,
    iterations: usize,
    lr: f64,
    tolerance: f64,
    init: Option<&Bound<'_, PyAny>>,
) -> PyResult<(PyDepthMap, Vec<f64>)> {
    let kind = LossKind::parse(loss).ok_or_else(|| PyValueError::new_err(format!("unknown loss {loss:?}")))?;
    let init = match init {
        None => Init::Dff { window_sigma: 2.0 },
        Some(v) => {
            if let Ok(d) = v.extract::<f64>() {
                Init::Constant(d)
            } else if let Ok(map) = v.extract::<PyDepthMap>() {
                Init::Provided(map.0)
            } else if v.extract::<String>().is_ok_and(|s| s == "dff") {
                Init::Dff { window_sigma: 2.0 }
            } else {
                return Err(PyValueError::new_err("init must be 'dff', a float or a DepthMap"));
            }
        }
    };
    let cfg = LossConfig {
        kind,
        smoothness,
        iterations,
        learning_rate: lr,
        tolerance,
    };
    let lens = lens_or_default(lens);
    let range = DepthRange::new(depth_min, depth_max).py()?;
    let est = py
        .detach(|| run_estimate(&stack.0, &aif.0, &lens, &range, &cfg, &init))
        .py()?;
    let losses = est.losses();
    Ok((PyDepthMap(est.depth), losses))
}

fn mask_for(pred: &PyDepthMap, margin: usize) -> Mask {
    let (h, w) = (pred.0.height(), pred.0.width());
    if margin == 0 {
        Mask::all(h, w)
    } else {
        Mask::interior(h, w, margin)
    }
}

#[pyfunction]
#[pyo3(signature = (pred, gt, margin=0))]
fn rmse(pred: &PyDepthMap, gt: &PyDepthMap, margin: usize) -> PyResult<f64> {
    focaldepth::eval::rmse(&pred.0, &gt.0, &mask_for(pred, margin)).py()
}

#[pyfunction]
#[pyo3(signature = (pred, gt, k=1, margin=0))]
fn delta_accuracy(pred: &PyDepthMap, gt: &PyDepthMap, k: u32, margin: usize) -> PyResult<f64> {
    focaldepth::eval::delta_accuracy(&pred.0, &gt.0, &mask_for(pred, margin), k).py()
}

/// Synthetic `(aif, depth)` for a scene such as `"plane:1.2"` or `"staircase:0.8,1.2,2.4"`.
#[pyfunction]
#[pyo3(signature = (scene, height=64, width=64, seed=7, correlation_length=2.0, channels=1))]
fn make_scene(
    scene: &str,
    height: usize,
    width: usize,
    seed: u64,
    correlation_length: f64,
    channels: usize,
) -> PyResult<(PyImage, PyDepthMap)> {
    let kind = SceneSpec::parse_kind(scene, width).py()?;
    let mut spec = SceneSpec::new(
        kind,
        Texture::Noise {
            seed,
            correlation_length,
        },
        height,
        width,
    );
    spec.channels = channels;
    let (aif, depth) = build_scene(&spec, &DepthRange::default()).py()?;
    Ok((PyImage(aif), PyDepthMap(depth)))
}

/// Depth-of-field tiling of a schedule; the threshold defaults to the calibrated one.
#[pyfunction]
#[pyo3(signature = (distances=None, lens=None, coc_threshold=None, depth_min=0.7, depth_max=10.0))]
fn schedule_tiling<'py>(
    py: Python<'py>,
    distances: Option<Vec<f64>>,
    lens: Option<PyLens>,
    coc_threshold: Option<f64>,
    depth_min: f64,
    depth_max: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let schedule = schedule_or_default(distances)?;
    let lens = lens_or_default(lens);
    let threshold = match coc_threshold {
        Some(t) => t,
        None => calibrate_coc_threshold(&schedule, &lens).py()?,
    };
    let range = DepthRange::new(depth_min, depth_max).py()?;
    let report = check_schedule_tiling(&schedule, &lens, threshold, &range).py()?;
    let out = PyDict::new(py);
    out.set_item("coc_threshold", threshold)?;
    out.set_item("pair_residuals", report.pair_residuals.clone())?;
    out.set_item(
        "limits",
        report.limits.iter().map(|l| (l.near, l.far)).collect::<Vec<_>>(),
    )?;
    out.set_item("covers_near", report.covers_near)?;
    out.set_item("covers_far", report.covers_far)?;
    Ok(out)
}

#[pymodule]
fn pyfocaldepth(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyLens>()?;
    m.add_class::<PyImage>()?;
    m.add_class::<PyDepthMap>()?;
    m.add_class::<PyFocalStack>()?;
    m.add_function(wrap_pyfunction!(default_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(render_slice, m)?)?;
    m.add_function(wrap_pyfunction!(render_stack, m)?)?;
    m.add_function(wrap_pyfunction!(render_slice_adjoint, m)?)?;
    m.add_function(wrap_pyfunction!(all_in_focus, m)?)?;
    m.add_function(wrap_pyfunction!(dff_depth, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_depth, m)?)?;
    m.add_function(wrap_pyfunction!(rmse, m)?)?;
    m.add_function(wrap_pyfunction!(delta_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(make_scene, m)?)?;
    m.add_function(wrap_pyfunction!(schedule_tiling, m)?)?;
    Ok(())
}
