//! Python access to map loading, the text metrics, the dataset scores and
//! trained checkpoints.

use std::path::PathBuf;

use pyo3::exceptions::{PyFileNotFoundError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use presslm::clients::HashEmbedding;
use presslm::model::{DecodeMode, SitModel};
use presslm::pressure::{self, MapFormat, SensorGeometry};
use presslm::prompt::{TaskInstruction, TaskType};
use presslm::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::MissingInput(p) => PyFileNotFoundError::new_err(p.display().to_string()),
        Error::Config(m) => PyValueError::new_err(m),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn task(name: &str) -> PyResult<TaskType> {
    name.parse().map_err(|_| PyValueError::new_err(format!("unknown task type {name:?}")))
}

fn read_map(path: &PathBuf, geometry: &SensorGeometry) -> PyResult<pressure::PressureMap> {
    let file = std::fs::File::open(path).map_err(|_| to_py(Error::MissingInput(path.clone())))?;
    pressure::load_pressure_map(std::io::BufReader::new(file), MapFormat::from_path(path), geometry).map_err(to_py)
}

/// Normalized values of a `rows × cols` map file as a list of rows.
#[pyfunction]
#[pyo3(signature = (path, rows, cols, value_max = 1023.0))]
fn load_map(path: PathBuf, rows: usize, cols: usize, value_max: f64) -> PyResult<Vec<Vec<f64>>> {
    let g = SensorGeometry {
        rows,
        cols,
        value_max,
        ..SensorGeometry::default()
    };
    let map = read_map(&path, &g)?;
    Ok(map.values().chunks(cols).map(<[f64]>::to_vec).collect())
}

/// `(max, min, mean, variance)` of a flat list of normalized readings.
#[pyfunction]
fn map_stats(rows: usize, cols: usize, values: Vec<f64>) -> PyResult<(f64, f64, f64, f64)> {
    let map = pressure::PressureMap::new(rows, cols, values).map_err(to_py)?;
    let s = pressure::compute_stats(&map);
    Ok((s.max, s.min, s.mean, s.variance))
}

#[pyfunction]
fn patch_count(height: usize, width: usize, patch_size: usize) -> PyResult<usize> {
    if patch_size == 0 {
        return Err(PyValueError::new_err("patch size must be positive"));
    }
    Ok(presslm::sensor::patch_count(height, width, patch_size))
}

#[pyfunction]
#[pyo3(signature = (candidate, references, max_n = 4))]
fn bleu(candidate: &str, references: Vec<String>, max_n: usize) -> f64 {
    let refs: Vec<&str> = references.iter().map(String::as_str).collect();
    presslm::metrics::bleu(candidate, &refs, max_n)
}

#[pyfunction]
fn rouge_l(candidate: &str, reference: &str) -> f64 {
    presslm::metrics::rouge_l(candidate, reference)
}

#[pyfunction]
fn meteor(candidate: &str, reference: &str) -> f64 {
    presslm::metrics::meteor(candidate, reference)
}

/// Embedding F-score using the built-in hashed embeddings.
#[pyfunction]
fn semantic_f(candidate: &str, reference: &str) -> PyResult<f64> {
    presslm::metrics::semantic_f(candidate, reference, &HashEmbedding::default()).map_err(to_py)
}

#[pyfunction]
fn score_final(s_llm: f64, s_feat: f64, alpha: f64) -> PyResult<f64> {
    presslm::dataset::score_final(s_llm, s_feat, alpha).map_err(to_py)
}

/// Runs the command line with `args` (without the program name) and returns
/// `(exit_code, stdout, stderr)`.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> (i32, String, String) {
    py.detach(|| {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = presslm::cli::run_args(std::iter::once("presslm".to_string()).chain(args), &mut out, &mut err);
        (
            code,
            String::from_utf8_lossy(&out).into_owned(),
            String::from_utf8_lossy(&err).into_owned(),
        )
    })
}

/// A model directory written by `presslm train`.
#[pyclass(frozen)]
struct Model {
    inner: SitModel,
    max_len: usize,
}

#[pymethods]
impl Model {
    #[new]
    fn new(directory: PathBuf) -> PyResult<Self> {
        let (inner, manifest) = presslm::cli::load_trained(&directory).map_err(to_py)?;
        Ok(Self {
            inner,
            max_len: manifest.config.train.max_len,
        })
    }

    /// Answers `instruction` about the map stored at `path`. Greedy unless
    /// `top_k` is given.
    #[pyo3(signature = (path, instruction, task_type = "description", max_new_tokens = 160, top_k = None, seed = 0))]
    fn infer(
        &self,
        py: Python<'_>,
        path: PathBuf,
        instruction: &str,
        task_type: &str,
        max_new_tokens: usize,
        top_k: Option<usize>,
        seed: u64,
    ) -> PyResult<String> {
        let map = read_map(&path, &self.inner.config.geometry)?;
        let prompt = self
            .inner
            .prompt(&map, &TaskInstruction::new(task(task_type)?, instruction))
            .map_err(to_py)?;
        let mode = match top_k {
            Some(k) => DecodeMode::TopK { k, seed },
            None => DecodeMode::Greedy,
        };
        py.detach(|| self.inner.generate(&prompt, max_new_tokens, mode, self.max_len))
            .map_err(to_py)
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.store.iter().map(|(_, p)| p.value.len()).sum()
    }
}

#[pymodule]
fn presslm_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(load_map, m)?)?;
    m.add_function(wrap_pyfunction!(map_stats, m)?)?;
    m.add_function(wrap_pyfunction!(patch_count, m)?)?;
    m.add_function(wrap_pyfunction!(bleu, m)?)?;
    m.add_function(wrap_pyfunction!(rouge_l, m)?)?;
    m.add_function(wrap_pyfunction!(meteor, m)?)?;
    m.add_function(wrap_pyfunction!(semantic_f, m)?)?;
    m.add_function(wrap_pyfunction!(score_final, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add_class::<Model>()?;
    Ok(())
}
