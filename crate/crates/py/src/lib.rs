//! Python bindings: label parsing, prompts, scoring, metrics, baselines,
//! embedding stores and the experiment runner.

use std::collections::HashMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyException, PyKeyError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBool, PyDict, PyFloat, PyInt, PyList, PyString, PyTuple};
use serde_json::Value;

use narracap::annotations::synth_fixture;
use narracap::baselines::{predict_majority, predict_random, LabelFrequencyTable};
use narracap::embed::{open_store, EmbeddingStore};
use narracap::llm::{build_prompt as core_build_prompt, parse_labels as core_parse_labels, PromptVariant};
use narracap::metrics::{evaluate_with_se, mean_average_precision, MetricsReport, PredictionRecord};
use narracap::runner::{self, ConfigOverrides, RunError};
use narracap::scoring::{self, ProbabilityScale};
use narracap::taxonomy::{parse_label, EmotionLabel, LabelSet, LABEL_COUNT};

pyo3::create_exception!(narracap_py, NarracapError, PyException);

/// Label names → set. Unknown names are an error.
pub fn label_set<S: AsRef<str>>(names: &[S]) -> Result<LabelSet, String> {
    names
        .iter()
        .map(|n| parse_label(n.as_ref()).map_err(|e| e.to_string()))
        .collect()
}

/// Per-label counts keyed by name → frequency table. Missing labels count 0.
pub fn frequency_table(counts: &HashMap<String, u64>) -> Result<LabelFrequencyTable, String> {
    let mut table = [0u64; LABEL_COUNT];
    for (name, count) in counts {
        let label = parse_label(name).map_err(|e| e.to_string())?;
        table[label.index()] += count;
    }
    LabelFrequencyTable::from_counts(table).map_err(|e| e.to_string())
}

/// Keyword options → config layer, with the same names as the CLI flags
/// (underscores instead of dashes).
pub fn overrides_from_json(options: Value) -> Result<ConfigOverrides, String> {
    serde_json::from_value(options).map_err(|e| format!("bad option: {e}"))
}

fn names(set: LabelSet) -> Vec<&'static str> {
    set.names()
}

fn run_err(e: RunError) -> PyErr {
    match e {
        RunError::Config(m) => PyValueError::new_err(m),
        other => NarracapError::new_err(other.to_string()),
    }
}

fn to_json(obj: &Bound<'_, PyAny>) -> PyResult<Value> {
    if obj.is_none() {
        return Ok(Value::Null);
    }
    if obj.is_instance_of::<PyBool>() {
        return Ok(Value::Bool(obj.extract()?));
    }
    if obj.is_instance_of::<PyInt>() {
        return Ok(Value::from(obj.extract::<i64>()?));
    }
    if obj.is_instance_of::<PyFloat>() {
        return Ok(Value::from(obj.extract::<f64>()?));
    }
    if obj.is_instance_of::<PyString>() {
        return Ok(Value::String(obj.extract()?));
    }
    if obj.is_instance_of::<PyList>() || obj.is_instance_of::<PyTuple>() {
        let items = obj.try_iter()?.map(|item| to_json(&item?)).collect::<PyResult<_>>()?;
        return Ok(Value::Array(items));
    }
    // pathlib.Path and similar
    Ok(Value::String(obj.str()?.extract()?))
}

fn report_dict<'py>(py: Python<'py>, name: &str, r: &MetricsReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("name", name)?;
    d.set_item("precision", r.precision)?;
    d.set_item("recall", r.recall)?;
    d.set_item("f1", r.f1)?;
    d.set_item("hamming", r.hamming)?;
    d.set_item("subset_accuracy", r.subset_accuracy)?;
    d.set_item("mean_average_precision", r.mean_average_precision)?;
    d.set_item("n", r.n)?;
    match &r.standard_errors {
        Some(se) => {
            let s = PyDict::new(py);
            s.set_item("precision", se.precision)?;
            s.set_item("recall", se.recall)?;
            s.set_item("f1", se.f1)?;
            s.set_item("hamming", se.hamming)?;
            s.set_item("subset_accuracy", se.subset_accuracy)?;
            s.set_item("resamples", se.resamples)?;
            d.set_item("standard_errors", s)?;
        }
        None => d.set_item("standard_errors", py.None())?,
    }
    Ok(d)
}

fn reports_list<'py>(py: Python<'py>, rows: &[(String, MetricsReport)]) -> PyResult<Bound<'py, PyList>> {
    let items = rows
        .iter()
        .map(|(name, r)| report_dict(py, name, r))
        .collect::<PyResult<Vec<_>>>()?;
    PyList::new(py, items)
}

/// The 26 labels in canonical order.
#[pyfunction]
fn labels() -> Vec<&'static str> {
    EmotionLabel::ALL.iter().map(|l| l.canonical_name()).collect()
}

/// Labels mentioned in a free-text reply, canonical order.
#[pyfunction]
fn parse_labels(text: &str) -> Vec<&'static str> {
    names(core_parse_labels(text).labels)
}

#[pyfunction]
#[pyo3(signature = (caption, variant = "six_labels_with_definitions"))]
fn build_prompt(caption: Option<&str>, variant: &str) -> PyResult<String> {
    let variant: PromptVariant = variant.parse().map_err(PyValueError::new_err)?;
    core_build_prompt(caption, variant).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pyfunction]
fn softmax(logits: Vec<f64>) -> Vec<f64> {
    scoring::softmax(&logits)
}

/// Indices of the `k` largest values, descending; ties by index.
#[pyfunction]
fn top_k(values: Vec<f64>, k: usize) -> PyResult<Vec<usize>> {
    scoring::top_k_indices(&values, k).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Indices strictly above `mean + k * std`, ascending.
#[pyfunction]
#[pyo3(signature = (probs, k, percent = false))]
fn above_threshold(probs: Vec<f64>, k: f64, percent: bool) -> PyResult<Vec<usize>> {
    let scale = if percent {
        ProbabilityScale::Percent
    } else {
        ProbabilityScale::Fraction
    };
    scoring::indices_above_threshold(&probs, scale, k).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Metrics in percent. `scores` (26 per sample, canonical order) adds mAP;
/// `resamples > 0` adds bootstrap standard errors.
#[pyfunction]
#[pyo3(signature = (truth, predicted, scores = None, resamples = 0, seed = 1))]
fn evaluate<'py>(
    py: Python<'py>,
    truth: Vec<Vec<String>>,
    predicted: Vec<Vec<String>>,
    scores: Option<Vec<Vec<f64>>>,
    resamples: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    if truth.len() != predicted.len() {
        return Err(PyValueError::new_err(format!(
            "{} truth rows but {} predicted rows",
            truth.len(),
            predicted.len()
        )));
    }
    let mut records = Vec::with_capacity(truth.len());
    for (i, (t, p)) in truth.iter().zip(&predicted).enumerate() {
        let t = label_set(t).map_err(PyValueError::new_err)?;
        let p = label_set(p).map_err(PyValueError::new_err)?;
        let mut record = PredictionRecord::new(t, p);
        record.scores = scores.as_ref().map(|s| s.get(i).cloned().unwrap_or_default());
        records.push(record);
    }
    let err = |e: narracap::metrics::MetricsError| PyValueError::new_err(e.to_string());
    let mut report = if resamples > 0 {
        evaluate_with_se(&records, resamples, seed).map_err(err)?
    } else {
        narracap::metrics::evaluate(&records).map_err(err)?
    };
    if scores.is_some() {
        report.mean_average_precision = Some(mean_average_precision(&records).map_err(err)?);
    }
    report_dict(py, "evaluate", &report)
}

/// The six most frequent labels in `counts`.
#[pyfunction]
fn majority(counts: HashMap<String, u64>) -> PyResult<Vec<&'static str>> {
    let table = frequency_table(&counts).map_err(PyValueError::new_err)?;
    predict_majority(&table)
        .map(names)
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Six random labels for record `index`; weighted by `counts` when given.
#[pyfunction]
#[pyo3(signature = (seed, index, counts = None))]
fn random_six(seed: u64, index: u64, counts: Option<HashMap<String, u64>>) -> PyResult<Vec<&'static str>> {
    let table = counts
        .as_ref()
        .map(frequency_table)
        .transpose()
        .map_err(PyValueError::new_err)?;
    predict_random(seed, index, table.is_some(), table.as_ref())
        .map(names)
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Writes the synthetic fixture (annotations, store, expected outputs).
#[pyfunction]
#[pyo3(signature = (out, images = 12, persons = 1, seed = 1))]
fn synth(out: PathBuf, images: usize, persons: usize, seed: u64) -> PyResult<String> {
    if images == 0 || persons == 0 {
        return Err(PyValueError::new_err("images and persons must be positive"));
    }
    synth_fixture(seed, images, persons)
        .write_dir(&out)
        .map_err(|e| NarracapError::new_err(format!("{}: {e}", out.display())))?;
    Ok(out.display().to_string())
}

/// Runs a CLI subcommand (`caption`, `predict`, `baseline`, `evaluate`,
/// `strata`, `ablate`) with options named like the flags.
#[pyfunction]
#[pyo3(signature = (command, **options))]
fn run<'py>(
    py: Python<'py>,
    command: &str,
    options: Option<&Bound<'py, PyDict>>,
) -> PyResult<Bound<'py, PyAny>> {
    let mut map = serde_json::Map::new();
    if let Some(d) = options {
        for (k, v) in d.iter() {
            map.insert(k.extract::<String>()?, to_json(&v)?);
        }
    }
    let config = overrides_from_json(Value::Object(map))
        .map_err(PyValueError::new_err)?
        .resolve()
        .map_err(run_err)?;
    let result = py.detach(|| -> Result<RunResult, RunError> {
        Ok(match command {
            "caption" => RunResult::Count(runner::run_captions(&config)?.len()),
            "predict" => RunResult::Reports(runner::run_predict(&config)?.reports),
            "baseline" => RunResult::Reports(runner::run_baseline(&config)?.reports),
            "evaluate" => RunResult::Reports(runner::run_evaluate(&config, "report")?),
            "strata" => RunResult::Reports(runner::run_strata(&config)?),
            "ablate" => RunResult::Ablation(runner::run_ablation(&config)?),
            other => return Err(RunError::Config(format!("unknown command {other:?}"))),
        })
    });
    match result.map_err(run_err)? {
        RunResult::Count(n) => Ok(n.into_pyobject(py)?.into_any()),
        RunResult::Reports(rows) => Ok(reports_list(py, &rows)?.into_any()),
        RunResult::Ablation(rows) => {
            let items = rows
                .iter()
                .map(|r| {
                    let d = report_dict(py, &r.mask.to_string(), &r.report)?;
                    d.set_item("diff", r.diff)?;
                    d.set_item("se", r.se)?;
                    Ok(d)
                })
                .collect::<PyResult<Vec<_>>>()?;
            Ok(PyList::new(py, items)?.into_any())
        }
    }
}

enum RunResult {
    Count(usize),
    Reports(Vec<(String, MetricsReport)>),
    Ablation(Vec<runner::AblationRow>),
}

/// A NEMB embedding store.
#[pyclass(name = "EmbeddingStore", module = "narracap_py", frozen)]
struct PyEmbeddingStore {
    inner: EmbeddingStore,
}

#[pymethods]
impl PyEmbeddingStore {
    #[staticmethod]
    fn open(path: PathBuf) -> PyResult<Self> {
        open_store(&path)
            .map(|inner| PyEmbeddingStore { inner })
            .map_err(|e| NarracapError::new_err(format!("{}: {e}", path.display())))
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn logit_scale(&self) -> f64 {
        self.inner.logit_scale()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __contains__(&self, key: &str) -> bool {
        self.inner.contains(key)
    }

    fn keys(&self) -> Vec<String> {
        self.inner.keys().map(String::from).collect()
    }

    fn get(&self, key: &str) -> PyResult<Vec<f32>> {
        self.inner
            .get(key)
            .map(|e| e.as_slice().to_vec())
            .map_err(|e| PyKeyError::new_err(e.to_string()))
    }

    /// Softmax over `logit_scale * dot(image, text)` for each text key.
    fn score(&self, image_key: &str, text_keys: Vec<String>) -> PyResult<Vec<f64>> {
        let image = self.inner.get(image_key).map_err(|e| PyKeyError::new_err(e.to_string()))?;
        let texts = text_keys
            .iter()
            .map(|k| self.inner.get(k).cloned())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| PyKeyError::new_err(e.to_string()))?;
        scoring::score_probabilities(image, &texts, self.inner.logit_scale())
            .map(|d| d.probs)
            .map_err(|e| PyValueError::new_err(e.to_string()))
    }

    fn __repr__(&self) -> String {
        format!("EmbeddingStore(dim={}, entries={})", self.inner.dim(), self.inner.len())
    }
}

#[pymodule]
fn narracap_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("NarracapError", m.py().get_type::<NarracapError>())?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyEmbeddingStore>()?;
    m.add_function(wrap_pyfunction!(labels, m)?)?;
    m.add_function(wrap_pyfunction!(parse_labels, m)?)?;
    m.add_function(wrap_pyfunction!(build_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    m.add_function(wrap_pyfunction!(top_k, m)?)?;
    m.add_function(wrap_pyfunction!(above_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(majority, m)?)?;
    m.add_function(wrap_pyfunction!(random_six, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    Ok(())
}
