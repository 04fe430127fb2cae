//! Python bindings. Images cross the boundary as flat row-major `H*W*3`
//! lists of floats in [0, 1]; signals as flat channel-major lists.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use sl::classifier::Classifier as _;

fn err(e: sl::Error) -> PyErr {
    match e {
        sl::Error::Io(_) | sl::Error::File { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

#[pyclass(name = "CameraTimings", frozen, from_py_object)]
#[derive(Clone, Copy)]
struct PyCameraTimings(sl::CameraTimings);

#[pymethods]
impl PyCameraTimings {
    #[new]
    #[pyo3(signature = (readout_us=120.0, exposure_us=500.0, rows=64, cols=64, gamma=2.2))]
    fn new(readout_us: f64, exposure_us: f64, rows: usize, cols: usize, gamma: f64) -> PyResult<Self> {
        sl::CameraTimings::new(readout_us, exposure_us, rows, cols, gamma)
            .map(Self)
            .map_err(err)
    }

    #[getter]
    fn readout_us(&self) -> f64 {
        self.0.readout_us
    }

    #[getter]
    fn exposure_us(&self) -> f64 {
        self.0.exposure_us
    }

    #[getter]
    fn rows(&self) -> usize {
        self.0.rows
    }

    #[getter]
    fn cols(&self) -> usize {
        self.0.cols
    }

    #[getter]
    fn gamma(&self) -> f64 {
        self.0.gamma
    }

    /// Slots per signal period.
    fn signal_length(&self) -> usize {
        sl::camera::signal_length(&self.0)
    }

    fn window_slots(&self) -> usize {
        self.0.window_slots()
    }

    fn with_exposure(&self, exposure_us: f64) -> PyResult<Self> {
        self.0.with_exposure(exposure_us).map(Self).map_err(err)
    }

    fn __repr__(&self) -> String {
        let t = &self.0;
        format!(
            "CameraTimings(readout_us={}, exposure_us={}, rows={}, cols={}, gamma={})",
            t.readout_us, t.exposure_us, t.rows, t.cols, t.gamma
        )
    }
}

#[pyclass(name = "LightSignal", frozen, from_py_object)]
#[derive(Clone)]
struct PyLightSignal(sl::LightSignal);

#[pymethods]
impl PyLightSignal {
    #[new]
    fn new(timings: PyCameraTimings, values: Vec<f64>) -> PyResult<Self> {
        sl::LightSignal::new(timings.0, values).map(Self).map_err(err)
    }

    #[staticmethod]
    fn constant(timings: PyCameraTimings, level: f64) -> PyResult<Self> {
        sl::LightSignal::constant(timings.0, level).map(Self).map_err(err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        sl::LightSignal::load(path).map(Self).map_err(err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        sl::LightSignal::from_json(text).map(Self).map_err(err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.0.save(path).map_err(err)
    }

    fn to_json(&self) -> PyResult<String> {
        self.0.to_json().map_err(err)
    }

    #[getter]
    fn timings(&self) -> PyCameraTimings {
        PyCameraTimings(*self.0.timings())
    }

    #[getter]
    fn values(&self) -> Vec<f64> {
        self.0.values().to_vec()
    }

    fn channel(&self, ch: usize) -> PyResult<Vec<f64>> {
        if ch >= self.0.channels() {
            return Err(PyValueError::new_err(format!("channel {ch} out of range")));
        }
        Ok(self.0.channel(ch).to_vec())
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

#[pyclass(name = "Model", frozen)]
struct PyModel(sl::Model);

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        sl::Model::load(path).map(Self).map_err(err)
    }

    /// Untrained reference architecture over the ten shape classes.
    #[staticmethod]
    #[pyo3(signature = (height=64, width=64, seed=0))]
    fn reference(height: usize, width: usize, seed: u64) -> PyResult<Self> {
        sl::Model::reference(height, width, sl::classifier::shape_labels(), seed)
            .map(Self)
            .map_err(err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.0.save(path).map_err(err)
    }

    #[getter]
    fn labels(&self) -> Vec<String> {
        self.0.labels()
    }

    /// Class probabilities for one image.
    fn predict(&self, image: Vec<f64>, height: usize, width: usize) -> PyResult<Vec<f64>> {
        let img = sl::Image::from_interleaved(height, width, &image).map_err(err)?;
        Ok(self.0.forward(&img).map_err(err)?.probabilities)
    }
}

#[pyclass(name = "Scene", frozen)]
struct PyScene(sl::ScenePair);

#[pymethods]
impl PyScene {
    #[new]
    fn new(ambient: Vec<f64>, full: Vec<f64>, height: usize, width: usize) -> PyResult<Self> {
        let a = sl::Image::from_interleaved(height, width, &ambient).map_err(err)?;
        let f = sl::Image::from_interleaved(height, width, &full).map_err(err)?;
        sl::ScenePair::new(a, f).map(Self).map_err(err)
    }

    /// Matches a base image to the default ambient and fully-lit means.
    #[staticmethod]
    fn synthesize(base: Vec<f64>, height: usize, width: usize) -> PyResult<Self> {
        let b = sl::Image::from_interleaved(height, width, &base).map_err(err)?;
        sl::scene::synthesize_pair(&b, &sl::scene::SceneTargets::default())
            .map(Self)
            .map_err(err)
    }

    /// Noise-free exemplar of a shape class, as the base of a scene.
    #[staticmethod]
    #[pyo3(signature = (class_index, size=64, seed=0))]
    fn exemplar(class_index: usize, size: usize, seed: u64) -> PyResult<Self> {
        let class = *sl::classifier::ShapeClass::ALL
            .get(class_index)
            .ok_or_else(|| PyValueError::new_err(format!("no shape class {class_index}")))?;
        let base = sl::classifier::clean_exemplar(class, size, seed);
        sl::scene::synthesize_pair(&base, &sl::scene::SceneTargets::default())
            .map(Self)
            .map_err(err)
    }

    #[getter]
    fn ambient(&self) -> Vec<f64> {
        self.0.ambient.to_interleaved()
    }

    #[getter]
    fn full(&self) -> Vec<f64> {
        self.0.full.to_interleaved()
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        self.0.dims()
    }
}

/// Captured frame at row offset `delta`, flat row-major `H*W*3`.
#[pyfunction]
#[pyo3(signature = (scene, signal, timings, delta=0))]
fn render(scene: &PyScene, signal: &PyLightSignal, timings: PyCameraTimings, delta: usize) -> PyResult<Vec<f64>> {
    let img = sl::render::render(&scene.0, &signal.0, delta, &timings.0).map_err(err)?;
    Ok(img.to_interleaved())
}

#[pyclass(name = "AttackResult", frozen)]
struct PyAttackResult {
    #[pyo3(get)]
    signal: PyLightSignal,
    #[pyo3(get)]
    final_loss: f64,
    #[pyo3(get)]
    iterations_used: usize,
    #[pyo3(get)]
    converged: bool,
    #[pyo3(get)]
    loss_trace: Vec<f64>,
    #[pyo3(get)]
    confidence_trace: Vec<f64>,
}

/// Targeted attack. Unset arguments keep the library defaults.
#[pyfunction]
#[pyo3(signature = (scene, model, timings, target, seed=0, max_iterations=None, learning_rate=None, batch_size=None))]
#[allow(clippy::too_many_arguments)]
fn optimize(
    py: Python<'_>,
    scene: &PyScene,
    model: &PyModel,
    timings: PyCameraTimings,
    target: usize,
    seed: u64,
    max_iterations: Option<usize>,
    learning_rate: Option<f64>,
    batch_size: Option<usize>,
) -> PyResult<PyAttackResult> {
    let mut config = sl::AttackConfig {
        target_class: target,
        seed,
        ..Default::default()
    };
    if let Some(n) = max_iterations {
        config.max_iterations = n;
    }
    if let Some(lr) = learning_rate {
        config.adam.learning_rate = lr;
    }
    if let Some(b) = batch_size {
        config.batch_size = b;
    }
    let r = py
        .detach(|| sl::optimize_signal(&scene.0, &model.0, &timings.0, &config))
        .map_err(err)?;
    Ok(PyAttackResult {
        signal: PyLightSignal(r.signal),
        final_loss: r.final_loss,
        iterations_used: r.iterations_used,
        converged: r.converged,
        loss_trace: r.loss_trace,
        confidence_trace: r.confidence_trace,
    })
}

/// Success statistics over `n_transforms` draws at every offset.
#[pyfunction]
#[pyo3(signature = (signal, scene, model, timings, target, n_transforms=200, seed=0))]
#[allow(clippy::too_many_arguments)]
fn evaluate(
    py: Python<'_>,
    signal: &PyLightSignal,
    scene: &PyScene,
    model: &PyModel,
    timings: PyCameraTimings,
    target: usize,
    n_transforms: usize,
    seed: u64,
) -> PyResult<(f64, f64, usize)> {
    let r = py
        .detach(|| sl::evaluate(&signal.0, &scene.0, &model.0, &timings.0, target, n_transforms, seed))
        .map_err(err)?;
    Ok((r.success_rate, r.mean_target_confidence, r.total_images))
}

#[pyclass(name = "PwmSchedule", frozen)]
struct PyPwmSchedule(sl::PwmSchedule);

#[pymethods]
impl PyPwmSchedule {
    #[staticmethod]
    fn from_firmware(text: &str) -> PyResult<Self> {
        sl::pwm::parse_firmware(text).map(Self).map_err(err)
    }

    /// Realized duty per (channel, slot), channel-major.
    fn simulate(&self) -> PyResult<Vec<f64>> {
        self.0.simulate().map_err(err)
    }

    fn to_firmware(&self) -> String {
        sl::pwm::export_firmware(&self.0)
    }

    fn to_json(&self) -> PyResult<String> {
        self.0.to_json().map_err(err)
    }

    fn event_count(&self) -> usize {
        self.0.event_count()
    }

    fn period_us(&self) -> u64 {
        self.0.period_us()
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.0 == other.0
    }
}

#[pyfunction]
#[pyo3(signature = (signal, slot_us=120, grid_us=4))]
fn compile_pwm(signal: &PyLightSignal, slot_us: u32, grid_us: u32) -> PyResult<PyPwmSchedule> {
    sl::compile(&signal.0, slot_us, grid_us).map(PyPwmSchedule).map_err(err)
}

#[pymodule]
fn stripelight(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", sl::VERSION)?;
    m.add("LABELS", sl::classifier::shape_labels())?;
    m.add_class::<PyCameraTimings>()?;
    m.add_class::<PyLightSignal>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyScene>()?;
    m.add_class::<PyAttackResult>()?;
    m.add_class::<PyPwmSchedule>()?;
    m.add_function(wrap_pyfunction!(render, m)?)?;
    m.add_function(wrap_pyfunction!(optimize, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(compile_pwm, m)?)?;
    Ok(())
}
