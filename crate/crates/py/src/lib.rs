use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use dslic_core as core;
use dslic_core::{Error, Gradient};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// RGB image, row-major, channels in [0, 1].
#[pyclass(name = "Image", module = "dslic", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyImage(core::Image);

#[pymethods]
impl PyImage {
    #[new]
    fn new(height: usize, width: usize, data: Vec<f64>) -> PyResult<Self> {
        core::Image::new(height, width, data).map(Self).map_err(to_py)
    }

    #[staticmethod]
    fn filled(height: usize, width: usize, color: [f64; 3]) -> PyResult<Self> {
        core::Image::filled(height, width, color).map(Self).map_err(to_py)
    }

    #[staticmethod]
    fn read(path: &str) -> PyResult<Self> {
        core::read_image(path).map(Self).map_err(to_py)
    }

    fn write(&self, path: &str) -> PyResult<()> {
        core::write_image(&self.0, path).map_err(to_py)
    }

    #[getter]
    fn height(&self) -> usize {
        self.0.height()
    }

    #[getter]
    fn width(&self) -> usize {
        self.0.width()
    }

    #[getter]
    fn data(&self) -> Vec<f64> {
        self.0.data().to_vec()
    }

    fn pixel(&self, x: usize, y: usize) -> PyResult<[f64; 3]> {
        if x >= self.0.width() || y >= self.0.height() {
            return Err(PyValueError::new_err(format!("pixel ({x}, {y}) is outside the image")));
        }
        Ok(self.0.pixel(x, y))
    }

    fn __repr__(&self) -> String {
        format!("Image(height={}, width={})", self.0.height(), self.0.width())
    }
}

#[pyclass(name = "SlicConfig", module = "dslic", get_all, set_all, skip_from_py_object)]
#[derive(Clone)]
struct PySlicConfig {
    k: usize,
    omega: f64,
    max_iters: usize,
    tol: f64,
    seed: u64,
    enforce_connectivity: bool,
}

#[pymethods]
impl PySlicConfig {
    #[new]
    #[pyo3(signature = (k, omega=0.1, max_iters=10, tol=1e-6, seed=0, enforce_connectivity=false))]
    fn new(k: usize, omega: f64, max_iters: usize, tol: f64, seed: u64, enforce_connectivity: bool) -> Self {
        Self { k, omega, max_iters, tol, seed, enforce_connectivity }
    }

    fn __repr__(&self) -> String {
        format!("SlicConfig(k={}, omega={})", self.k, self.omega)
    }
}

impl From<&PySlicConfig> for core::SlicConfig {
    fn from(c: &PySlicConfig) -> Self {
        core::SlicConfig {
            k: c.k,
            omega: c.omega,
            max_iters: c.max_iters,
            tol: c.tol,
            seed: c.seed,
            enforce_connectivity: c.enforce_connectivity,
        }
    }
}

#[pyclass(name = "ClusterState", module = "dslic", frozen)]
struct PyClusterState(core::ClusterState);

#[pymethods]
impl PyClusterState {
    #[getter]
    fn k(&self) -> usize {
        self.0.k()
    }

    #[getter]
    fn assignment(&self) -> Vec<usize> {
        self.0.assignment().to_vec()
    }

    #[getter]
    fn sizes(&self) -> Vec<usize> {
        self.0.sizes().to_vec()
    }

    /// `[x, y, r, g, b]` per cluster.
    #[getter]
    fn centroids(&self) -> Vec<[f64; 5]> {
        self.0.centroids().to_vec()
    }

    #[getter]
    fn objective(&self) -> f64 {
        self.0.objective()
    }

    fn assignment_csv(&self) -> String {
        self.0.assignment_csv()
    }

    fn centroids_csv(&self) -> String {
        self.0.centroids_csv()
    }
}

#[pyfunction]
fn run_slic(py: Python<'_>, image: &PyImage, cfg: &PySlicConfig) -> PyResult<PyClusterState> {
    let cfg = core::SlicConfig::from(cfg);
    py.detach(|| core::run_slic(&image.0, &cfg)).map(PyClusterState).map_err(to_py)
}

#[pyfunction]
fn reconstruct(image: &PyImage, state: &PyClusterState) -> PyResult<PyImage> {
    core::reconstruct(&image.0, &state.0).map(PyImage).map_err(to_py)
}

/// Backpropagates `upstream` (flat, image-shaped) through the clustering.
#[pyfunction]
fn apply_vjp(state: &PyClusterState, height: usize, width: usize, upstream: Vec<f64>) -> PyResult<Vec<f64>> {
    let factors = core::factors_from(&state.0).map_err(to_py)?;
    let g = Gradient::new(height, width, upstream).map_err(to_py)?;
    core::apply_vjp(&factors, &g).map(Gradient::into_data).map_err(to_py)
}

/// Returns `(probes, excluded, max_abs_err, max_rel_err, csv)`.
#[pyfunction]
#[pyo3(signature = (image, cfg, probes=64, eps=1e-6, target=None))]
fn grad_check(
    py: Python<'_>,
    image: &PyImage,
    cfg: &PySlicConfig,
    probes: usize,
    eps: f64,
    target: Option<&PyImage>,
) -> PyResult<(usize, usize, f64, f64, String)> {
    let functional = match target {
        Some(t) => core::Functional::PixelMse(t.0.clone()),
        None => core::Functional::Sum,
    };
    let cfg = core::SlicConfig::from(cfg);
    let r = py
        .detach(|| core::grad_check(&image.0, &cfg, probes, eps, &functional))
        .map_err(to_py)?;
    Ok((r.probes.len(), r.excluded, r.max_abs_err, r.max_rel_err, r.to_csv()))
}

/// Returns `(trained, clustered, trace)`; `lr` is the raw step size.
#[pyfunction]
fn toy_optimize(
    py: Python<'_>,
    start: &PyImage,
    target: &PyImage,
    cfg: &PySlicConfig,
    steps: usize,
    lr: f64,
) -> PyResult<(PyImage, PyImage, Vec<f64>)> {
    let cfg = core::SlicConfig::from(cfg);
    let run = py
        .detach(|| core::toy_optimize(&start.0, &target.0, &cfg, steps, lr))
        .map_err(to_py)?;
    Ok((PyImage(run.image), PyImage(run.clustered), run.trace))
}

/// Returns `(value, flat gradient)`.
#[pyfunction]
#[pyo3(signature = (image, eps=core::losses::TV_EPS))]
fn tv_loss(image: &PyImage, eps: f64) -> (f64, Vec<f64>) {
    let l = core::losses::tv_loss_with_eps(&image.0, eps);
    (l.value, l.grad.into_data())
}

#[pyfunction]
fn mse_loss(clustered: &PyImage, target: &PyImage) -> PyResult<(f64, Vec<f64>)> {
    let l = core::mse_loss(&clustered.0, &target.0).map_err(to_py)?;
    Ok((l.value, l.grad.into_data()))
}

#[pyclass(name = "SurrogateDetector", module = "dslic", frozen)]
struct PySurrogate(core::SurrogateDetector);

#[pymethods]
impl PySurrogate {
    #[new]
    #[pyo3(signature = (seed=0))]
    fn new(seed: u64) -> Self {
        Self(core::SurrogateDetector::new(seed))
    }

    /// Returns `(rows, cols, scores)`.
    fn score_map(&self, image: &PyImage) -> (usize, usize, Vec<f64>) {
        let g = self.0.score_map(&image.0);
        (g.rows, g.cols, g.scores)
    }
}

/// Training configuration, edited through the same keys as config files.
#[pyclass(name = "TrainConfig", module = "dslic", skip_from_py_object)]
#[derive(Clone)]
struct PyTrainConfig(core::TrainConfig);

#[pymethods]
impl PyTrainConfig {
    #[new]
    #[pyo3(signature = (text=""))]
    fn new(text: &str) -> PyResult<Self> {
        core::TrainConfig::from_flat_text(text).map(Self).map_err(to_py)
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        let mut next = self.0.clone();
        next.set(0, key, value).map_err(to_py)?;
        next.validate().map_err(to_py)?;
        self.0 = next;
        Ok(())
    }

    fn to_text(&self) -> String {
        self.0.to_flat_text()
    }
}

#[pyclass(name = "TrainReport", module = "dslic", frozen)]
struct PyTrainReport(core::TrainReport);

#[pymethods]
impl PyTrainReport {
    /// `(epoch, loss, l_obj, l_tv, lr)` per epoch.
    #[getter]
    fn epochs(&self) -> Vec<(usize, f64, f64, f64, f64)> {
        self.0.epochs.iter().map(|e| (e.epoch, e.loss, e.l_obj, e.l_tv, e.lr)).collect()
    }

    #[getter]
    fn raw_patch(&self) -> PyImage {
        PyImage(self.0.raw_patch.clone())
    }

    #[getter]
    fn clustered_patch(&self) -> PyImage {
        PyImage(self.0.clustered_patch.clone())
    }

    #[getter]
    fn initial_obj(&self) -> f64 {
        self.0.initial_obj
    }

    #[getter]
    fn final_obj(&self) -> f64 {
        self.0.final_obj
    }

    #[getter]
    fn wall_clock_s(&self) -> f64 {
        self.0.wall_clock_s
    }

    fn trace_csv(&self) -> String {
        self.0.trace_csv()
    }
}

/// Trains on the scenes in `scenes_dir`, or the built-in desk scenes.
#[pyfunction]
#[pyo3(signature = (cfg, scenes_dir=None))]
fn train_patch(py: Python<'_>, cfg: &PyTrainConfig, scenes_dir: Option<&str>) -> PyResult<PyTrainReport> {
    let scenes = match scenes_dir {
        Some(d) => core::load_scenes(d).map_err(to_py)?,
        None => core::fixtures::desk_scenes(),
    };
    let cfg = cfg.0.clone();
    py.detach(|| core::train_patch(&scenes, &cfg)).map(PyTrainReport).map_err(to_py)
}

#[pymodule]
fn dslic(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyImage>()?;
    m.add_class::<PySlicConfig>()?;
    m.add_class::<PyClusterState>()?;
    m.add_class::<PySurrogate>()?;
    m.add_class::<PyTrainConfig>()?;
    m.add_class::<PyTrainReport>()?;
    m.add_function(wrap_pyfunction!(run_slic, m)?)?;
    m.add_function(wrap_pyfunction!(reconstruct, m)?)?;
    m.add_function(wrap_pyfunction!(apply_vjp, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    m.add_function(wrap_pyfunction!(toy_optimize, m)?)?;
    m.add_function(wrap_pyfunction!(tv_loss, m)?)?;
    m.add_function(wrap_pyfunction!(mse_loss, m)?)?;
    m.add_function(wrap_pyfunction!(train_patch, m)?)?;
    Ok(())
}
