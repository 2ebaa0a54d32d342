//! Python bindings: images, deformation fields, registration, phantoms,
//! the hazard head and survival metrics.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use longalign::eval::{self, EvalRecord};
use longalign::grid::{self, DeformationField2D, Image2D};
use longalign::harness::experiment::{run_experiment as run_experiment_rs, ExperimentConfig};
use longalign::harness::phantom::{self, CohortConfig};
use longalign::metrics;
use longalign::pipelines::StrategyKind;
use longalign::registrar::{self, RegistrationConfig};
use longalign::risk::{self, HazardHead, RiskOutput, SurvivalLabel, T_MAX};

fn py_err(e: longalign::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Grayscale image, row-major.
#[pyclass(name = "Image", module = "longalign", from_py_object)]
#[derive(Clone)]
pub struct PyImage {
    inner: Image2D,
}

#[pymethods]
impl PyImage {
    #[new]
    fn new(height: usize, width: usize, data: Vec<f64>) -> PyResult<Self> {
        Ok(Self { inner: Image2D::new(height, width, data).map_err(py_err)? })
    }

    #[staticmethod]
    fn from_rows(rows: Vec<Vec<f64>>) -> PyResult<Self> {
        let h = rows.len();
        let w = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != w) {
            return Err(PyValueError::new_err("ragged rows"));
        }
        Self::new(h, w, rows.into_iter().flatten().collect())
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: longalign::io::load_image(path).map_err(py_err)? })
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        self.inner.shape()
    }

    fn data(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn to_rows(&self) -> Vec<Vec<f64>> {
        self.inner.data().chunks(self.inner.width()).map(<[f64]>::to_vec).collect()
    }

    fn normalized(&self) -> Self {
        Self { inner: self.inner.normalized() }
    }

    fn warp(&self, field: &PyField) -> PyResult<Self> {
        Ok(Self { inner: grid::warp_bilinear(&self.inner, &field.inner).map_err(py_err)? })
    }

    fn save_png16(&self, path: PathBuf) -> PyResult<()> {
        longalign::io::save_png16(path, &self.inner).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        let (h, w) = self.inner.shape();
        format!("Image({h}x{w})")
    }
}

/// Dense displacement field with `u` along x and `v` along y.
#[pyclass(name = "Field", module = "longalign", from_py_object)]
#[derive(Clone)]
pub struct PyField {
    inner: DeformationField2D,
}

#[pymethods]
impl PyField {
    #[new]
    fn new(height: usize, width: usize, u: Vec<f64>, v: Vec<f64>) -> PyResult<Self> {
        Ok(Self { inner: DeformationField2D::new(height, width, u, v).map_err(py_err)? })
    }

    #[staticmethod]
    fn zeros(height: usize, width: usize) -> Self {
        Self { inner: DeformationField2D::zeros(height, width) }
    }

    #[staticmethod]
    fn uniform(height: usize, width: usize, du: f64, dv: f64) -> Self {
        Self { inner: DeformationField2D::uniform(height, width, du, dv) }
    }

    #[staticmethod]
    fn from_df2d(data: Vec<u8>) -> PyResult<Self> {
        Ok(Self { inner: longalign::io::decode_df2d(&data).map_err(py_err)? })
    }

    fn to_df2d(&self) -> Vec<u8> {
        longalign::io::encode_df2d(&self.inner)
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        self.inner.shape()
    }

    fn u(&self) -> Vec<f64> {
        self.inner.u().to_vec()
    }

    fn v(&self) -> Vec<f64> {
        self.inner.v().to_vec()
    }

    fn jacobian_det(&self) -> Vec<f64> {
        metrics::jacobian_map(&self.inner).det
    }

    fn njd_percent(&self) -> f64 {
        metrics::njd_percent(&metrics::jacobian_map(&self.inner))
    }

    fn jacobian_std(&self) -> f64 {
        metrics::jacobian_std(&metrics::jacobian_map(&self.inner))
    }

    fn jd_penalty(&self) -> f64 {
        metrics::jd_penalty(&metrics::jacobian_map(&self.inner))
    }

    fn smoothness(&self) -> f64 {
        metrics::smoothness_energy(&self.inner)
    }

    fn max_magnitude(&self) -> f64 {
        self.inner.max_magnitude()
    }

    #[pyo3(signature = (other, mask=None))]
    fn endpoint_error(&self, other: &PyField, mask: Option<Vec<bool>>) -> PyResult<f64> {
        self.inner.mean_endpoint_error(&other.inner, mask.as_deref()).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        let (h, w) = self.inner.shape();
        format!("Field({h}x{w})")
    }
}

/// Registration settings; unknown keyword arguments are rejected.
#[pyclass(name = "RegistrationConfig", module = "longalign", from_py_object)]
#[derive(Clone)]
pub struct PyRegistrationConfig {
    inner: RegistrationConfig,
}

#[pymethods]
impl PyRegistrationConfig {
    #[new]
    #[pyo3(signature = (**kwargs))]
    fn new(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut value = serde_json::to_value(RegistrationConfig::default()).expect("config serializes");
        if let Some(kwargs) = kwargs {
            for (k, v) in kwargs.iter() {
                let key: String = k.extract()?;
                let obj = value.as_object_mut().expect("config is an object");
                if !obj.contains_key(&key) {
                    return Err(PyValueError::new_err(format!("unknown registration option {key}")));
                }
                let json = if let Ok(b) = v.extract::<bool>() {
                    serde_json::Value::from(b)
                } else if let Ok(i) = v.extract::<u64>() {
                    serde_json::Value::from(i)
                } else if let Ok(f) = v.extract::<f64>() {
                    serde_json::Value::from(f)
                } else {
                    serde_json::Value::from(v.extract::<String>()?)
                };
                obj.insert(key, json);
            }
        }
        let inner: RegistrationConfig =
            serde_json::from_value(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
        inner.validate().map_err(py_err)?;
        Ok(Self { inner })
    }

    /// Settings used for the synthetic cohort.
    #[staticmethod]
    fn phantom() -> Self {
        Self { inner: phantom::phantom_registration_config() }
    }

    #[getter]
    fn gamma(&self) -> f64 {
        self.inner.gamma
    }

    #[getter]
    fn lambda_jd(&self) -> f64 {
        self.inner.lambda_jd
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.inner).expect("config serializes")
    }
}

#[pyclass(name = "RegistrationResult", module = "longalign", skip_from_py_object)]
pub struct PyRegistrationResult {
    #[pyo3(get)]
    field: PyField,
    #[pyo3(get)]
    warped_affine: PyImage,
    #[pyo3(get)]
    warped_final: PyImage,
    #[pyo3(get)]
    affine: [f64; 6],
    #[pyo3(get)]
    ncc_before: f64,
    #[pyo3(get)]
    ncc_affine: f64,
    #[pyo3(get)]
    ncc_final: f64,
    #[pyo3(get)]
    njd_percent: f64,
    #[pyo3(get)]
    jacobian_std: f64,
    #[pyo3(get)]
    loss_trace: Vec<f64>,
}

/// Registers `moving` onto `fixed`.
#[pyfunction]
#[pyo3(signature = (fixed, moving, config=None))]
fn register(
    py: Python<'_>,
    fixed: &PyImage,
    moving: &PyImage,
    config: Option<&PyRegistrationConfig>,
) -> PyResult<PyRegistrationResult> {
    let cfg = config.map_or_else(RegistrationConfig::default, |c| c.inner.clone());
    let (f, m) = (fixed.inner.clone(), moving.inner.clone());
    let r = py.detach(move || registrar::register(&f, &m, &cfg)).map_err(py_err)?;
    Ok(PyRegistrationResult {
        field: PyField { inner: r.final_field },
        warped_affine: PyImage { inner: r.warped_affine },
        warped_final: PyImage { inner: r.warped_final },
        affine: r.affine.to_params(),
        ncc_before: r.quality.ncc_before,
        ncc_affine: r.quality.ncc_affine,
        ncc_final: r.quality.ncc_final,
        njd_percent: r.quality.njd_percent,
        jacobian_std: r.quality.jacobian_std,
        loss_trace: r.loss_trace,
    })
}

#[pyfunction]
fn ncc(a: &PyImage, b: &PyImage) -> PyResult<f64> {
    metrics::ncc(&a.inner, &b.inner).map_err(py_err)
}

/// Synthetic prior/current pair for exam `index` of a cohort.
#[pyfunction]
#[pyo3(signature = (index, seed=2024, height=128, width=160))]
fn phantom_pair(py: Python<'_>, index: usize, seed: u64, height: usize, width: usize) -> PyResult<Py<PyDict>> {
    let cfg = CohortConfig { seed, height, width, n_exams: index + 1, ..CohortConfig::default() };
    let spec = phantom::random_spec(&cfg, index).map_err(py_err)?;
    let (pair, field) = phantom::generate_phantom_pair(&spec).map_err(py_err)?;
    let mask = phantom::foreground_mask(&pair.current);
    let d = PyDict::new(py);
    d.set_item("patient_id", &pair.patient_id)?;
    d.set_item("exam_id", &pair.exam_id)?;
    d.set_item("prior", PyImage { inner: pair.prior })?;
    d.set_item("current", PyImage { inner: pair.current })?;
    d.set_item("true_field", PyField { inner: field })?;
    d.set_item("foreground", mask)?;
    d.set_item("gap_months", pair.gap_months)?;
    d.set_item("followup_years", pair.label.followup_years)?;
    d.set_item("years_to_cancer", pair.label.years_to_cancer)?;
    Ok(d.unbind())
}

/// Cumulative probabilities of the hazard head for one feature vector.
#[pyfunction]
fn cumulative_probability(
    base_weights: Vec<f64>,
    base_bias: f64,
    step_weights: Vec<Vec<f64>>,
    step_bias: Vec<f64>,
    features: Vec<f64>,
) -> PyResult<Vec<f64>> {
    let input = base_weights.len();
    if step_weights.len() != step_bias.len() || step_weights.iter().any(|r| r.len() != input) {
        return Err(PyValueError::new_err("step weights must be [t_max, input]"));
    }
    let head = HazardHead {
        input,
        t_max: step_bias.len(),
        base_weights,
        base_bias,
        step_weights: step_weights.into_iter().flatten().collect(),
        step_bias,
    };
    Ok(risk::cumulative_probability(&head, &features).map_err(py_err)?.prob)
}

#[pyfunction]
#[pyo3(signature = (gap_months, dim))]
fn time_positional_encoding(gap_months: f64, dim: usize) -> PyResult<Vec<f64>> {
    risk::time_positional_encoding(gap_months, dim).map_err(py_err)
}

/// Censoring mask δ(1..t_max).
#[pyfunction]
#[pyo3(signature = (followup_years, years_to_cancer=None, t_max=T_MAX))]
fn censor_mask(followup_years: u32, years_to_cancer: Option<u32>, t_max: usize) -> Vec<f64> {
    risk::censor_mask(followup_years, years_to_cancer, t_max)
}

fn records(probs: Vec<Vec<f64>>, followup: Vec<u32>, years_to_cancer: Vec<Option<u32>>) -> PyResult<Vec<EvalRecord>> {
    if probs.len() != followup.len() || probs.len() != years_to_cancer.len() {
        return Err(PyValueError::new_err("probs, followup and years_to_cancer differ in length"));
    }
    probs
        .into_iter()
        .zip(followup)
        .zip(years_to_cancer)
        .map(|((p, f), ttc)| {
            if p.len() != T_MAX {
                return Err(PyValueError::new_err(format!("each row needs {T_MAX} probabilities")));
            }
            let scores = p.iter().map(|&q| (q / (1.0 - q)).ln()).collect();
            Ok(EvalRecord {
                risk: RiskOutput { cum_score: scores, prob: p },
                label: SurvivalLabel::new(f, ttc, T_MAX),
                density: None,
                strategy: StrategyKind::NoAlign,
            })
        })
        .collect()
}

#[pyfunction]
fn c_index(probs: Vec<Vec<f64>>, followup: Vec<u32>, years_to_cancer: Vec<Option<u32>>) -> PyResult<f64> {
    eval::c_index(&records(probs, followup, years_to_cancer)?).map_err(py_err)
}

#[pyfunction]
fn auc(probs: Vec<Vec<f64>>, followup: Vec<u32>, years_to_cancer: Vec<Option<u32>>, horizon: usize) -> PyResult<f64> {
    eval::auc_at_horizon(&records(probs, followup, years_to_cancer)?, horizon).map_err(py_err)
}

/// Runs the full experiment; `config` is JSON merged over the defaults.
/// Returns the C-index point estimate per strategy.
#[pyfunction]
#[pyo3(signature = (out_dir, config=None))]
fn run_experiment(py: Python<'_>, out_dir: PathBuf, config: Option<&str>) -> PyResult<Vec<(String, Option<f64>)>> {
    let mut value = serde_json::to_value(ExperimentConfig::default()).expect("config serializes");
    if let Some(text) = config {
        let patch: serde_json::Value = serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        merge(&mut value, patch);
    }
    let cfg: ExperimentConfig = serde_json::from_value(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let bundle = py.detach(move || run_experiment_rs(&cfg, &out_dir)).map_err(py_err)?;
    Ok(bundle.strategies.iter().map(|s| (s.strategy.to_string(), s.c_index.map(|m| m.point))).collect())
}

fn merge(base: &mut serde_json::Value, patch: serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(serde_json::Value::Null), v);
            }
        }
        (b, p) => *b = p,
    }
}

#[pymodule]
#[pyo3(name = "longalign")]
fn longalign_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyImage>()?;
    m.add_class::<PyField>()?;
    m.add_class::<PyRegistrationConfig>()?;
    m.add_class::<PyRegistrationResult>()?;
    m.add_function(wrap_pyfunction!(register, m)?)?;
    m.add_function(wrap_pyfunction!(ncc, m)?)?;
    m.add_function(wrap_pyfunction!(phantom_pair, m)?)?;
    m.add_function(wrap_pyfunction!(cumulative_probability, m)?)?;
    m.add_function(wrap_pyfunction!(time_positional_encoding, m)?)?;
    m.add_function(wrap_pyfunction!(censor_mask, m)?)?;
    m.add_function(wrap_pyfunction!(c_index, m)?)?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add("T_MAX", T_MAX)?;
    Ok(())
}
