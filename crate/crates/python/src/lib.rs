//! Python bindings: run configuration, pipeline stages, the oracle suite and the WKV kernels.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;

use radlads::autograd::Tape;
use radlads::error::Error;
use radlads::harness::archive::{AnyTensor, Archive};
use radlads::harness::config::RunConfig;
use radlads::harness::eval;
use radlads::harness::oracle::oracle_suite;
use radlads::harness::pipeline::{self, Stage};
use radlads::mixers::wkv;
use radlads::tensor::Tensor;
use radlads::train::StepKind;

create_exception!(pyradlads, RadladsError, PyException);
create_exception!(pyradlads, NumericalError, RadladsError);

fn err(e: Error) -> PyErr {
    match e {
        Error::NonFinite(_) => NumericalError::new_err(e.to_string()),
        Error::Config(_) | Error::Invalid(_) | Error::Shape { .. } => PyValueError::new_err(e.to_string()),
        _ => RadladsError::new_err(e.to_string()),
    }
}

fn to_py(py: Python<'_>, v: &serde_json::Value) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| RadladsError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

/// Stage from its command-line name.
pub fn parse_stage(name: &str) -> Result<Stage, Error> {
    Ok(match name {
        "init-teacher" => Stage::InitTeacher,
        "pretrain-teacher" => Stage::PretrainTeacher,
        "transfer" => Stage::Transfer,
        "eval" => Stage::Eval,
        "bench" => Stage::Bench,
        "step1" => Stage::Train(StepKind::Step1),
        "step2" => Stage::Train(StepKind::Step2),
        "step2a" => Stage::Train(StepKind::Step2a),
        "step3" => Stage::Train(StepKind::Step3),
        "step3a" => Stage::Train(StepKind::Step3a),
        _ => return Err(Error::invalid(format!("unknown stage {name:?}"))),
    })
}

/// Run configuration. Keys are the ones accepted in config files.
#[pyclass(name = "Config")]
struct PyConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (path=None))]
    fn new(path: Option<PathBuf>) -> PyResult<Self> {
        let inner = match path {
            Some(p) => RunConfig::from_file(&p).map_err(err)?,
            None => RunConfig::default(),
        };
        Ok(PyConfig { inner })
    }

    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        Ok(PyConfig { inner: RunConfig::parse_str(text).map_err(err)? })
    }

    /// (key, default, doc) for every key.
    #[staticmethod]
    fn describe() -> Vec<(String, String, String)> {
        RunConfig::describe()
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).map_err(err)
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(err)
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    #[getter]
    fn mixer(&self) -> String {
        self.inner.student_mixer.to_string()
    }

    fn __repr__(&self) -> String {
        format!("Config(seed={}, mixer={})", self.inner.seed, self.inner.student_mixer)
    }
}

/// Artifact directory plus configuration; `run` executes one stage.
#[pyclass(name = "Pipeline")]
struct PyPipeline {
    inner: pipeline::Pipeline,
}

#[pymethods]
impl PyPipeline {
    #[new]
    #[pyo3(signature = (config, out, de_novo=false, checkpoint=None))]
    fn new(config: &PyConfig, out: PathBuf, de_novo: bool, checkpoint: Option<String>) -> PyResult<Self> {
        config.inner.validate().map_err(err)?;
        let mut inner = pipeline::Pipeline::new(config.inner.clone(), out);
        inner.de_novo = de_novo;
        inner.checkpoint = checkpoint;
        Ok(PyPipeline { inner })
    }

    /// Runs a stage by its command-line name and returns its summary.
    fn run(&self, py: Python<'_>, stage: &str) -> PyResult<Py<PyAny>> {
        let stage = parse_stage(stage).map_err(err)?;
        let p = &self.inner;
        let out = py.detach(|| p.run(stage)).map_err(err)?;
        to_py(py, &out)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.inner.path(name)
    }
}

/// Kernel equivalence, attention-matrix oracle and decay/gate range checks.
#[pyfunction]
#[pyo3(signature = (seed=0, draws=10_000))]
fn oracle_check(py: Python<'_>, seed: u64, draws: usize) -> PyResult<Py<PyAny>> {
    let s = py.detach(|| oracle_suite(seed, draws)).map_err(err)?;
    let mut v = serde_json::to_value(&s).map_err(|e| RadladsError::new_err(e.to_string()))?;
    v["passed"] = s.passed().into();
    to_py(py, &v)
}

#[pyfunction]
fn relative_score(s: f64, t: f64, r: f64) -> PyResult<f64> {
    eval::relative_score(s, t, r).map_err(err)
}

/// name -> (dtype, shape, flat values) for every tensor in an archive.
#[pyfunction]
fn read_archive(path: PathBuf) -> PyResult<Vec<(String, String, Vec<usize>, Vec<f64>)>> {
    let a = Archive::read(&path).map_err(|e| err(e.into()))?;
    Ok(a.entries
        .iter()
        .map(|(name, t)| {
            let dtype = match t {
                AnyTensor::F32(_) => "f32",
                AnyTensor::F64(_) => "f64",
            };
            (name.clone(), dtype.to_string(), t.shape().to_vec(), t.to::<f64>().data().to_vec())
        })
        .collect())
}

fn seq(rows: Vec<Vec<f64>>) -> PyResult<Tensor<f64>> {
    let t = rows.len();
    let width = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != width) {
        return Err(PyValueError::new_err("ragged rows"));
    }
    Tensor::new(&[t, width], rows.into_iter().flatten().collect()).map_err(err)
}

fn rows(x: &Tensor<f64>) -> Vec<Vec<f64>> {
    let width = x.shape().last().copied().unwrap_or(0).max(1);
    x.data().chunks(width).map(<[f64]>::to_vec).collect()
}

/// RWKV6 recurrence over [T][D] rows, by scan or by the explicit sum.
#[pyfunction]
#[pyo3(signature = (r, k, v, w, heads, parallel=false))]
fn wkv6(r: Vec<Vec<f64>>, k: Vec<Vec<f64>>, v: Vec<Vec<f64>>, w: Vec<Vec<f64>>, heads: usize, parallel: bool) -> PyResult<Vec<Vec<f64>>> {
    let (r, k, v, w) = (seq(r)?, seq(k)?, seq(v)?, seq(w)?);
    if parallel {
        return Ok(rows(&wkv::wkv6_parallel(&w, &k, &v, &r, heads).map_err(err)?));
    }
    let shape = r.shape().to_vec();
    let mut tape = Tape::inference();
    let mut c = |x: Tensor<f64>| -> PyResult<_> { Ok(tape.constant(x.reshape(&[1, shape[0], shape[1]]).map_err(err)?)) };
    let (r, k, v, w) = (c(r)?, c(k)?, c(v)?, c(w)?);
    let y = wkv::wkv6_scan(&mut tape, r, k, v, Some(w), heads, None).map_err(err)?;
    Ok(rows(tape.value(y)))
}

/// RWKV7 recurrence over [T][D] rows, by scan or by the explicit sum.
#[pyfunction]
#[pyo3(signature = (r, w, k_tilde, kappa, a, v, heads, parallel=false))]
#[allow(clippy::too_many_arguments)]
fn wkv7(
    r: Vec<Vec<f64>>,
    w: Vec<Vec<f64>>,
    k_tilde: Vec<Vec<f64>>,
    kappa: Vec<Vec<f64>>,
    a: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    heads: usize,
    parallel: bool,
) -> PyResult<Vec<Vec<f64>>> {
    let (r, w, kt, kap, a, v) = (seq(r)?, seq(w)?, seq(k_tilde)?, seq(kappa)?, seq(a)?, seq(v)?);
    if parallel {
        return Ok(rows(&wkv::wkv7_parallel(&w, &kt, &kap, &a, &v, &r, heads).map_err(err)?));
    }
    let shape = r.shape().to_vec();
    let mut tape = Tape::inference();
    let mut c = |x: Tensor<f64>| -> PyResult<_> { Ok(tape.constant(x.reshape(&[1, shape[0], shape[1]]).map_err(err)?)) };
    let (r, w, kt, kap, a, v) = (c(r)?, c(w)?, c(kt)?, c(kap)?, c(a)?, c(v)?);
    let y = wkv::wkv7_scan(&mut tape, r, w, kt, kap, a, v, heads, None).map_err(err)?;
    Ok(rows(tape.value(y)))
}

#[pymodule]
fn pyradlads(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("RadladsError", m.py().get_type::<RadladsError>())?;
    m.add("NumericalError", m.py().get_type::<NumericalError>())?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyPipeline>()?;
    m.add_function(wrap_pyfunction!(oracle_check, m)?)?;
    m.add_function(wrap_pyfunction!(relative_score, m)?)?;
    m.add_function(wrap_pyfunction!(read_archive, m)?)?;
    m.add_function(wrap_pyfunction!(wkv6, m)?)?;
    m.add_function(wrap_pyfunction!(wkv7, m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_names_match_the_cli() {
        for (name, stage) in [
            ("init-teacher", Stage::InitTeacher),
            ("transfer", Stage::Transfer),
            ("step2a", Stage::Train(StepKind::Step2a)),
            ("bench", Stage::Bench),
        ] {
            assert_eq!(parse_stage(name).unwrap(), stage);
        }
        assert!(parse_stage("step4").is_err());
    }
}
