//! Python bindings. Matrices cross the boundary as lists of rows and
//! attribute vectors as lists of 0/1 ints; structured results come back as
//! plain dicts.

use std::collections::HashMap;
use std::path::PathBuf;

use initgan::aiw::{self, AiwConfig};
use initgan::eval;
use initgan::numerics::{Checkpoint, OpKind, Tensor};
use initgan::rng::{stream_rng, Stream};
use initgan::synthdata::{self, AttributeVector};
use initgan::training::{self, TrainConfig, TrainState};
use initgan::verify::{self, CheckOptions};
use initgan::Error;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBool;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Divergence { .. } | Error::NonFinite { .. } | Error::Io { .. } => PyRuntimeError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn to_py<'py>(py: Python<'py>, value: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn attrs(bits: Vec<u8>) -> PyResult<AttributeVector> {
    AttributeVector::new(bits).map_err(py_err)
}

type Rows = Vec<Vec<f64>>;

/// Bits as ints; `Vec<u8>` would surface as `bytes`.
fn bits_out(a: &AttributeVector) -> Vec<u32> {
    a.bits().iter().map(|&b| u32::from(b)).collect()
}

fn tensor<T: initgan::numerics::Scalar>(rows: &[Vec<T>]) -> PyResult<Tensor<T>> {
    Tensor::from_rows(rows).map_err(py_err)
}

fn f32_rows(rows: &[Vec<f64>]) -> Vec<Vec<f32>> {
    rows.iter().map(|r| r.iter().map(|&v| v as f32).collect()).collect()
}

/// Builds a config from defaults plus `key -> value` overrides.
fn config_from(overrides: Option<HashMap<String, Bound<'_, PyAny>>>) -> PyResult<TrainConfig> {
    let mut config = TrainConfig::default();
    for (k, v) in overrides.unwrap_or_default() {
        let text = if let Ok(b) = v.cast::<PyBool>() {
            b.is_true().to_string()
        } else {
            v.str()?.to_string()
        };
        config.set(&k, &text).map_err(py_err)?;
    }
    config.validate().map_err(py_err)?;
    Ok(config)
}

/// Synthetic multi-domain data model.
#[pyclass(name = "DomainSpec", module = "initgan_py", frozen)]
struct PyDomainSpec {
    inner: synthdata::DomainSpec,
}

#[pymethods]
impl PyDomainSpec {
    #[new]
    #[pyo3(signature = (n = 3, d = 8, sigma = 0.1, seed = 0))]
    fn new(n: usize, d: usize, sigma: f64, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: synthdata::make_domain_spec(n, d, sigma, seed).map_err(py_err)?,
        })
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn d(&self) -> usize {
        self.inner.d()
    }

    #[getter]
    fn sigma(&self) -> f64 {
        self.inner.sigma()
    }

    #[getter]
    fn domain_count(&self) -> usize {
        self.inner.domain_count()
    }

    fn domain_mean(&self, attributes: Vec<u8>) -> PyResult<Vec<f64>> {
        self.inner.domain_mean(&attrs(attributes)?).map_err(py_err)
    }

    /// Returns `(features, attributes)` for `count` samples of uniformly drawn domains.
    #[pyo3(signature = (count, seed = 0))]
    fn sample(&self, count: usize, seed: u64) -> PyResult<(Rows, Vec<Vec<u32>>)> {
        let batch =
            synthdata::sample_batch(&self.inner, count, &mut stream_rng(seed, Stream::Data, 0)).map_err(py_err)?;
        let a = batch.attributes.iter().map(bits_out).collect();
        Ok((batch.features.rows_f64(), a))
    }

    #[pyo3(signature = (attributes, count, seed = 0))]
    fn sample_domain(&self, attributes: Vec<u8>, count: usize, seed: u64) -> PyResult<Vec<Vec<f64>>> {
        let a = attrs(attributes)?;
        let mut rng = stream_rng(seed, Stream::EvalReal, 0);
        (0..count)
            .map(|_| synthdata::sample_domain(&self.inner, &a, &mut rng).map_err(py_err))
            .collect()
    }

    fn oracle_translate(&self, x: Vec<f64>, source: Vec<u8>, target: Vec<u8>) -> PyResult<Vec<f64>> {
        synthdata::oracle_translate(&self.inner, &x, &attrs(source)?, &attrs(target)?).map_err(py_err)
    }

    fn classify(&self, x: Vec<f64>) -> PyResult<Vec<u32>> {
        if x.len() != self.inner.d() {
            return Err(PyValueError::new_err(format!(
                "expected {} features, got {}",
                self.inner.d(),
                x.len()
            )));
        }
        Ok(bits_out(&synthdata::bayes_classify(&self.inner, &x)))
    }

    fn __repr__(&self) -> String {
        format!(
            "DomainSpec(n={}, d={}, sigma={})",
            self.inner.n(),
            self.inner.d(),
            self.inner.sigma()
        )
    }
}

/// A trained (or restored) generator, discriminator and embedding.
#[pyclass(name = "Model", module = "initgan_py")]
struct PyModel {
    state: TrainState,
    history: Vec<training::StepDiagnostics>,
}

#[pymethods]
impl PyModel {
    #[getter]
    fn step(&self) -> u64 {
        self.state.step
    }

    #[getter]
    fn spec(&self) -> PyDomainSpec {
        PyDomainSpec {
            inner: self.state.spec.clone(),
        }
    }

    /// Per-step diagnostics of the run that produced this model.
    fn history<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.history)
    }

    /// One-hop translation of each row of `x` to the matching row of `targets`.
    fn translate(&self, x: Vec<Vec<f64>>, targets: Vec<Vec<u8>>) -> PyResult<Vec<Vec<f64>>> {
        let a: Vec<AttributeVector> = targets.into_iter().map(attrs).collect::<PyResult<_>>()?;
        let out = self
            .state
            .generator
            .apply(&tensor(&f32_rows(&x))?, &synthdata::attribute_tensor(&a))
            .map_err(py_err)?;
        Ok(out.rows_f64())
    }

    /// Discriminator logits for `(x, attributes)` pairs.
    fn logits(&self, x: Vec<Vec<f64>>, attributes: Vec<Vec<u8>>) -> PyResult<Vec<f64>> {
        let a: Vec<AttributeVector> = attributes.into_iter().map(attrs).collect::<PyResult<_>>()?;
        let out = self
            .state
            .discriminator
            .logits(&tensor(&f32_rows(&x))?, &synthdata::attribute_tensor(&a))
            .map_err(py_err)?;
        Ok(out.into_iter().map(f64::from).collect())
    }

    #[pyo3(signature = (samples = 5000, seed = 0))]
    fn evaluate<'py>(&self, py: Python<'py>, samples: usize, seed: u64) -> PyResult<Bound<'py, PyAny>> {
        let report = py
            .detach(|| eval::evaluate(&self.state.spec, &self.state.generator, samples, seed))
            .map_err(py_err)?;
        to_py(py, &report)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.state.to_checkpoint().save(path).map_err(py_err)
    }
}

/// Trains from defaults plus overrides; `out_dir` receives metrics and checkpoints.
#[pyfunction]
#[pyo3(signature = (overrides = None, out_dir = None))]
fn train(
    py: Python<'_>,
    overrides: Option<HashMap<String, Bound<'_, PyAny>>>,
    out_dir: Option<PathBuf>,
) -> PyResult<PyModel> {
    let config = config_from(overrides)?;
    let outcome = py
        .detach(|| {
            if let Some(dir) = &out_dir {
                training::write_resolved_config(&config, dir)?;
            }
            training::train(config, out_dir.as_deref())
        })
        .map_err(py_err)?;
    Ok(PyModel {
        state: outcome.state,
        history: outcome.history,
    })
}

/// Restores a checkpoint saved under the configuration given by `overrides`.
#[pyfunction]
#[pyo3(signature = (path, overrides = None))]
fn load_model(path: PathBuf, overrides: Option<HashMap<String, Bound<'_, PyAny>>>) -> PyResult<PyModel> {
    let config = config_from(overrides)?;
    let ckpt = Checkpoint::load(path).map_err(py_err)?;
    Ok(PyModel {
        state: TrainState::from_checkpoint(config, &ckpt).map_err(py_err)?,
        history: Vec::new(),
    })
}

/// `exp(clamp(logit, -c, c))`.
#[pyfunction]
#[pyo3(signature = (logit, clamp = 4.0))]
fn aiw_raw_weight(logit: f64, clamp: f64) -> PyResult<f64> {
    aiw::raw_weight(logit, clamp).map_err(py_err)
}

/// Matched/mismatched embedding distance statistics for paired sphere points.
#[pyfunction]
fn distance_stats<'py>(
    py: Python<'py>,
    source: Vec<Vec<f64>>,
    generated: Vec<Vec<f64>>,
    radius: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let stats = aiw::distance_stats(&tensor(&source)?, &tensor(&generated)?, radius).map_err(py_err)?;
    to_py(py, &stats)
}

/// Per-sample importance weights from discriminator logits and embeddings.
#[pyfunction]
#[pyo3(signature = (logits, source, generated, radius, logit_clamp = 4.0, self_normalize = true))]
fn aiw_weights<'py>(
    py: Python<'py>,
    logits: Vec<f64>,
    source: Vec<Vec<f64>>,
    generated: Vec<Vec<f64>>,
    radius: f64,
    logit_clamp: f64,
    self_normalize: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let stats = aiw::distance_stats(&tensor(&source)?, &tensor(&generated)?, radius).map_err(py_err)?;
    let cfg = AiwConfig {
        logit_clamp,
        self_normalize,
    };
    to_py(py, &aiw::aiw_weights(&logits, stats, &cfg).map_err(py_err)?)
}

/// Closed-form Fréchet distance between Gaussians fitted to two point sets.
#[pyfunction]
fn frechet_distance(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<f64> {
    eval::frechet_gaussian(&a, &b).map_err(py_err)
}

/// Fraction of generated rows whose oracle-classified bits match the targets, per bit.
#[pyfunction]
fn transfer_accuracy(spec: &PyDomainSpec, generated: Vec<Vec<f64>>, targets: Vec<Vec<u8>>) -> PyResult<Vec<f64>> {
    let t: Vec<AttributeVector> = targets.into_iter().map(attrs).collect::<PyResult<_>>()?;
    eval::transfer_accuracy(&spec.inner, &generated, &t).map_err(py_err)
}

/// Runs the verification suite; `inject_fault` flips one op's backward rule.
#[pyfunction]
#[pyo3(signature = (seed = 0, inject_fault = None))]
fn run_checks<'py>(py: Python<'py>, seed: u64, inject_fault: Option<String>) -> PyResult<Bound<'py, PyAny>> {
    let fault = inject_fault
        .map(|n| OpKind::from_name(&n).ok_or_else(|| PyValueError::new_err(format!("unknown op {n:?}"))))
        .transpose()?;
    let report = py
        .detach(|| verify::run_checks(&CheckOptions { fault, seed }))
        .map_err(py_err)?;
    to_py(py, &report)
}

#[pymodule]
fn initgan_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDomainSpec>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(load_model, m)?)?;
    m.add_function(wrap_pyfunction!(aiw_raw_weight, m)?)?;
    m.add_function(wrap_pyfunction!(distance_stats, m)?)?;
    m.add_function(wrap_pyfunction!(aiw_weights, m)?)?;
    m.add_function(wrap_pyfunction!(frechet_distance, m)?)?;
    m.add_function(wrap_pyfunction!(transfer_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(run_checks, m)?)?;
    Ok(())
}
