//! Python bindings. Volumes cross the boundary as flat lists in x-fastest
//! order together with `(nx, ny, nz)`.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;

use lgreg::eval::{self, Method};
use lgreg::io::{self, VolumeFormat};
use lgreg::synth::{self, ModalityRemapSpec, SyntheticDeformSpec};
use lgreg::{similarity, Dims, Error, LossConfig};

fn py_err(e: Error) -> PyErr {
    let msg = e.to_string();
    match e.root() {
        Error::Io { .. } => PyIOError::new_err(msg),
        Error::Divergence { .. } => PyArithmeticError::new_err(msg),
        _ => PyValueError::new_err(msg),
    }
}

fn dims(d: (usize, usize, usize)) -> Dims {
    Dims::new(d.0, d.1, d.2)
}

fn triple(d: Dims) -> (usize, usize, usize) {
    (d.nx, d.ny, d.nz)
}

#[pyclass(frozen, from_py_object)]
#[derive(Clone)]
struct Volume {
    inner: lgreg::Volume3D,
}

#[pymethods]
impl Volume {
    #[new]
    #[pyo3(signature = (shape, data, spacing = (1.0, 1.0, 1.0)))]
    fn new(shape: (usize, usize, usize), data: Vec<f64>, spacing: (f64, f64, f64)) -> PyResult<Self> {
        let inner = lgreg::Volume3D::with_spacing(dims(shape), [spacing.0, spacing.1, spacing.2], data)
            .map_err(py_err)?;
        Ok(Volume { inner })
    }

    /// Reads raw-with-sidecar, or NIfTI-1 for `.nii` paths.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = io::load_volume(&path, VolumeFormat::from_path(&path)).map_err(py_err)?;
        Ok(Volume { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        io::save_volume(&self.inner, &path, VolumeFormat::from_path(&path)).map_err(py_err)
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        triple(self.inner.dims())
    }

    #[getter]
    fn spacing(&self) -> (f64, f64, f64) {
        let s = self.inner.spacing();
        (s[0], s[1], s[2])
    }

    fn data(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn get(&self, x: usize, y: usize, z: usize) -> PyResult<f64> {
        let d = self.inner.dims();
        if x >= d.nx || y >= d.ny || z >= d.nz {
            return Err(PyValueError::new_err(format!("({x}, {y}, {z}) outside {d}")));
        }
        Ok(self.inner.get(x, y, z))
    }

    fn min_max(&self) -> (f64, f64) {
        self.inner.min_max()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Volume(shape={:?})", self.shape())
    }
}

#[pyclass(frozen, from_py_object)]
#[derive(Clone)]
struct Field {
    inner: lgreg::DisplacementField,
}

#[pymethods]
impl Field {
    #[new]
    fn new(shape: (usize, usize, usize), ux: Vec<f64>, uy: Vec<f64>, uz: Vec<f64>) -> PyResult<Self> {
        let inner = lgreg::DisplacementField::new(dims(shape), [ux, uy, uz]).map_err(py_err)?;
        Ok(Field { inner })
    }

    #[staticmethod]
    fn zeros(shape: (usize, usize, usize)) -> Self {
        Field {
            inner: lgreg::DisplacementField::zeros(dims(shape)),
        }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = io::load_field(&path).map_err(py_err)?;
        Ok(Field { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        io::save_field(&self.inner, &path).map_err(py_err)
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        triple(self.inner.dims())
    }

    /// `(ux, uy, uz)` as flat lists.
    fn components(&self) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let [x, y, z] = self.inner.components().clone();
        (x, y, z)
    }

    fn max_abs(&self) -> f64 {
        self.inner.max_abs()
    }

    fn mean_norm(&self) -> f64 {
        self.inner.mean_norm()
    }

    fn __repr__(&self) -> String {
        format!("Field(shape={:?})", self.shape())
    }
}

#[pyclass(frozen, from_py_object)]
#[derive(Clone)]
struct Translator {
    inner: lgreg::TranslatorModel,
}

#[pymethods]
impl Translator {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner = lgreg::TranslatorModel::from_json(text).map_err(py_err)?;
        Ok(Translator { inner })
    }

    #[staticmethod]
    fn identity_lut(knots: usize) -> PyResult<Self> {
        let inner = lgreg::TranslatorModel::identity_lut(knots).map_err(py_err)?;
        Ok(Translator { inner })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(py_err)
    }

    #[getter]
    fn kind(&self) -> &'static str {
        match self.inner.kind() {
            lgreg::TranslatorKind::Lut => "lut",
            lgreg::TranslatorKind::Mlp => "mlp",
        }
    }

    fn translate(&self, vol: &Volume) -> PyResult<Volume> {
        let inner = lgreg::translator::translate(&self.inner, &vol.inner).map_err(py_err)?;
        Ok(Volume { inner })
    }
}

#[pyclass(from_py_object)]
#[derive(Clone)]
struct Config {
    inner: lgreg::RegistrationConfig,
}

#[pymethods]
impl Config {
    #[new]
    fn new() -> Self {
        Config {
            inner: lgreg::RegistrationConfig::default(),
        }
    }

    /// Reads TOML or JSON by extension.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = lgreg::RegistrationConfig::load(&path).map_err(py_err)?;
        Ok(Config { inner })
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        let inner = lgreg::RegistrationConfig::from_toml(text).map_err(py_err)?;
        Ok(Config { inner })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner = lgreg::RegistrationConfig::from_json(text).map_err(py_err)?;
        Ok(Config { inner })
    }

    #[getter]
    fn get_mode(&self) -> &'static str {
        match self.inner.mode {
            lgreg::RegistrationMode::LgOnly => "lg_only",
            lgreg::RegistrationMode::FullAlternating => "full_alternating",
        }
    }

    #[setter]
    fn set_mode(&mut self, mode: &str) -> PyResult<()> {
        self.inner.mode = mode.parse().map_err(py_err)?;
        Ok(())
    }

    #[getter]
    fn get_levels(&self) -> Vec<usize> {
        self.inner.levels.clone()
    }

    #[setter]
    fn set_levels(&mut self, levels: Vec<usize>) {
        self.inner.levels = levels;
    }

    #[getter]
    fn get_iterations(&self) -> usize {
        self.inner.iterations
    }

    #[setter]
    fn set_iterations(&mut self, n: usize) {
        self.inner.iterations = n;
    }

    #[getter]
    fn get_seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    #[getter]
    fn get_lg_window(&self) -> usize {
        self.inner.loss.lg_window
    }

    #[setter]
    fn set_lg_window(&mut self, w: usize) {
        self.inner.loss.lg_window = w;
    }

    #[getter]
    fn get_cc_window(&self) -> usize {
        self.inner.loss.cc_window
    }

    #[setter]
    fn set_cc_window(&mut self, w: usize) {
        self.inner.loss.cc_window = w;
    }

    #[getter]
    fn get_alpha(&self) -> f64 {
        self.inner.loss.alpha
    }

    #[setter]
    fn set_alpha(&mut self, a: f64) {
        self.inner.loss.alpha = a;
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.inner)
    }
}

#[pyclass(frozen)]
struct Registration {
    #[pyo3(get)]
    field: Field,
    #[pyo3(get)]
    translator: Option<Translator>,
    report: lgreg::RegistrationReport,
}

#[pymethods]
impl Registration {
    fn report_json(&self) -> PyResult<String> {
        self.report.to_json().map_err(py_err)
    }

    /// `(total, lg, lcc, smooth)` of the final field at full resolution.
    fn final_terms(&self) -> (f64, f64, f64, f64) {
        let t = &self.report.final_terms;
        (t.total, t.lg, t.lcc, t.smooth)
    }

    /// Objective totals, one per iteration across all levels.
    fn totals(&self) -> Vec<f64> {
        self.report.trace.iter().map(|e| e.total).collect()
    }

    fn write_trace_csv(&self, path: PathBuf) -> PyResult<()> {
        self.report.write_trace_csv(&path).map_err(py_err)
    }
}

#[pyfunction]
#[pyo3(signature = (reference, floating, config = None))]
fn register(py: Python<'_>, reference: &Volume, floating: &Volume, config: Option<&Config>) -> PyResult<Registration> {
    let cfg = config.map(|c| c.inner.clone()).unwrap_or_default();
    let (r, f) = (&reference.inner, &floating.inner);
    let reg = py.detach(|| lgreg::register(r, f, &cfg)).map_err(py_err)?;
    Ok(Registration {
        field: Field { inner: reg.field },
        translator: reg.translator.map(|inner| Translator { inner }),
        report: reg.report,
    })
}

#[pyfunction]
fn warp(vol: &Volume, field: &Field) -> PyResult<Volume> {
    let inner = lgreg::field::warp(&vol.inner, &field.inner).map_err(py_err)?;
    Ok(Volume { inner })
}

#[pyfunction]
#[pyo3(signature = (reference, floating, window = 7, epsilon = 1e-6))]
fn lg_similarity(reference: &Volume, floating: &Volume, window: usize, epsilon: f64) -> PyResult<f64> {
    let cfg = LossConfig {
        lg_window: window,
        epsilon,
        ..LossConfig::default()
    };
    Ok(similarity::lg_similarity(&reference.inner, &floating.inner, &cfg).map_err(py_err)?.value)
}

#[pyfunction]
#[pyo3(signature = (reference, floating, window = 7, epsilon = 1e-5))]
fn lcc_similarity(reference: &Volume, floating: &Volume, window: usize, epsilon: f64) -> PyResult<f64> {
    Ok(similarity::lcc_similarity(&reference.inner, &floating.inner, window, epsilon)
        .map_err(py_err)?
        .value)
}

#[pyfunction]
#[pyo3(signature = (reference, floating, bins = 32))]
fn mutual_information(reference: &Volume, floating: &Volume, bins: usize) -> PyResult<f64> {
    similarity::mi_metric(&reference.inner, &floating.inner, bins).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (reference, floating, epsilon = 1e-6))]
fn ngf(reference: &Volume, floating: &Volume, epsilon: f64) -> PyResult<f64> {
    similarity::ngf_metric(&reference.inner, &floating.inner, epsilon).map_err(py_err)
}

#[pyfunction]
fn rmse_percent(a: &Volume, b: &Volume) -> PyResult<f64> {
    eval::rmse_percent(&a.inner, &b.inner).map_err(py_err)
}

#[pyfunction]
fn endpoint_error(phi: &Field, gt: &Field) -> PyResult<f64> {
    eval::endpoint_error(&phi.inner, &gt.inner, None).map_err(py_err)
}

/// A seeded desk-scale pair as a dict of volumes, the ground-truth field
/// and flat label lists for both masks.
#[pyfunction]
#[pyo3(signature = (size = 32, seed = 0, noise = 0.02))]
fn make_pair(py: Python<'_>, size: usize, seed: u64, noise: f64) -> PyResult<Py<PyAny>> {
    let remap = ModalityRemapSpec {
        seed,
        noise_sigma: noise,
        ..ModalityRemapSpec::default()
    };
    let pair = synth::make_pair(Dims::cube(size), &SyntheticDeformSpec::desk(seed), &remap, seed).map_err(py_err)?;
    let out = pyo3::types::PyDict::new(py);
    out.set_item("reference", Volume { inner: pair.reference })?;
    out.set_item("floating", Volume { inner: pair.floating })?;
    out.set_item("floating_mono", Volume { inner: pair.floating_mono })?;
    out.set_item("gt", Field { inner: pair.gt })?;
    out.set_item("mask_reference", pair.mask_reference.data().to_vec())?;
    out.set_item("mask_floating", pair.mask_floating.data().to_vec())?;
    Ok(out.into_any().unbind())
}

/// Runs one experiment and returns the result as JSON text.
#[pyfunction]
#[pyo3(signature = (manifest, method = "full_alternating", config = None, out_dir = None))]
fn run_experiment(
    py: Python<'_>,
    manifest: PathBuf,
    method: &str,
    config: Option<&Config>,
    out_dir: Option<PathBuf>,
) -> PyResult<String> {
    let method: Method = method.parse().map_err(py_err)?;
    let cfg = config.map(|c| c.inner.clone()).unwrap_or_default();
    let result = py.detach(|| {
        let inputs = eval::ExperimentInputs::load(&eval::PairManifest::load(&manifest)?)?;
        eval::run_experiment(&inputs, &cfg, method, None, out_dir.as_deref())
    });
    result.and_then(|e| e.result.to_json()).map_err(py_err)
}

/// `(passed, [(name, max_relative_error), ...])`.
#[pyfunction]
#[pyo3(signature = (seed = 0))]
fn gradcheck(seed: u64) -> PyResult<(bool, Vec<(String, f64)>)> {
    let report = lgreg::gradcheck::run_gradcheck(seed).map_err(py_err)?;
    let checks = report.checks.iter().map(|c| (c.name.clone(), c.max_relative_error)).collect();
    Ok((report.passed(), checks))
}

#[pymodule]
fn pylgreg(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Volume>()?;
    m.add_class::<Field>()?;
    m.add_class::<Translator>()?;
    m.add_class::<Config>()?;
    m.add_class::<Registration>()?;
    m.add_function(wrap_pyfunction!(register, m)?)?;
    m.add_function(wrap_pyfunction!(warp, m)?)?;
    m.add_function(wrap_pyfunction!(lg_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(lcc_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(mutual_information, m)?)?;
    m.add_function(wrap_pyfunction!(ngf, m)?)?;
    m.add_function(wrap_pyfunction!(rmse_percent, m)?)?;
    m.add_function(wrap_pyfunction!(endpoint_error, m)?)?;
    m.add_function(wrap_pyfunction!(make_pair, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
