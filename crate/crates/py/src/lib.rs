use std::path::{Path, PathBuf};

use ggograde::evaluator::{self, ConfusionMatrix};
use ggograde::gridrunner::{self, Cell, GridSpec};
use ggograde::ingest::{self, Manifest};
use ggograde::model_zoo::{self, Arch, FineTuneExtent, InitMode, Part};
use ggograde::preprocess::{self, PreprocessConfig};
use ggograde::synthkit::{self, SynthSpec};
use ggograde::trainer::{self, OptimizerKind};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde::Serialize;

create_exception!(ggograde_py, GgogradeError, PyException);

fn err(e: impl std::fmt::Display) -> PyErr {
    GgogradeError::new_err(e.to_string())
}

fn parse<T: std::str::FromStr>(s: &str) -> PyResult<T>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(|e: T::Err| PyValueError::new_err(e.to_string()))
}

/// Serialises through JSON into plain Python objects.
fn to_py<'py>(py: Python<'py>, value: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn flatten(rows: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    if let Some(r) = rows.iter().find(|r| r.len() != ggograde::NUM_CLASSES) {
        return Err(PyValueError::new_err(format!("score rows need {} entries, got {}", ggograde::NUM_CLASSES, r.len())));
    }
    Ok(rows.into_iter().flatten().collect())
}

#[pyfunction]
fn select_center_index(n: usize, f: f64) -> PyResult<usize> {
    preprocess::select_center_index(n, f).map_err(err)
}

/// F1-macro of integer class predictions, as a percentage.
#[pyfunction]
fn f1_macro(truth: Vec<usize>, pred: Vec<usize>) -> PyResult<f64> {
    let cm = ConfusionMatrix::from_predictions(&truth, &pred).map_err(err)?;
    evaluator::f1_macro(&cm).map_err(err)
}

/// One-vs-rest macro AUROC of per-class probability rows, as a percentage.
#[pyfunction]
fn auroc_macro(scores: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<f64> {
    evaluator::auroc_macro(&flatten(scores)?, &labels).map_err(err)
}

#[pyfunction]
fn evaluate<'py>(py: Python<'py>, run_id: &str, probs: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<Bound<'py, PyAny>> {
    let report = evaluator::evaluate(run_id, &flatten(probs)?, &labels).map_err(err)?;
    to_py(py, &report)
}

/// Writes a synthetic dataset and returns its layout.
#[pyfunction]
#[pyo3(signature = (out, preset="tiny", seed=0, scans_per_class=None, val_per_class=None, test_per_class=None, side=None, noise=None))]
#[allow(clippy::too_many_arguments)]
fn synth<'py>(
    py: Python<'py>,
    out: PathBuf,
    preset: &str,
    seed: u64,
    scans_per_class: Option<usize>,
    val_per_class: Option<usize>,
    test_per_class: Option<usize>,
    side: Option<u32>,
    noise: Option<f64>,
) -> PyResult<Bound<'py, PyDict>> {
    let mut spec = match preset {
        "tiny" => SynthSpec::tiny(),
        "tiny_plus" => SynthSpec::tiny_plus(),
        other => return Err(PyValueError::new_err(format!("unknown preset {other:?}"))),
    };
    spec.seed = seed;
    spec.n_scans_per_class = scans_per_class.unwrap_or(spec.n_scans_per_class);
    spec.val_scans_per_class = val_per_class.unwrap_or(spec.val_scans_per_class);
    spec.test_scans_per_class = test_per_class.unwrap_or(spec.test_scans_per_class);
    spec.image_side = side.unwrap_or(spec.image_side);
    spec.noise_level = noise.unwrap_or(spec.noise_level);
    let summary = synthkit::generate_dataset(&spec, &out).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("root", summary.root)?;
    d.set_item("label_file", summary.label_file)?;
    d.set_item("test_label_file", summary.test_label_file)?;
    let scans: Vec<(String, String, String, f64)> = summary
        .scans
        .iter()
        .map(|s| (s.scan_id.clone(), s.split.as_str().to_string(), s.label.to_string(), s.q))
        .collect();
    d.set_item("scans", scans)?;
    Ok(d)
}

#[pyclass(unsendable)]
struct Dataset {
    inner: ingest::Dataset,
}

#[pymethods]
impl Dataset {
    #[new]
    #[pyo3(signature = (root, labels=None))]
    fn new(root: PathBuf, labels: Option<PathBuf>) -> PyResult<Self> {
        Ok(Dataset { inner: ingest::Dataset::load(&root, labels.as_deref()).map_err(err)? })
    }

    #[getter]
    fn root(&self) -> PathBuf {
        self.inner.root.clone()
    }

    #[getter]
    fn n_train(&self) -> usize {
        self.inner.train.len()
    }

    #[getter]
    fn n_unseen_val(&self) -> usize {
        self.inner.unseen_val.len()
    }

    #[getter]
    fn n_test(&self) -> usize {
        self.inner.test.len()
    }

    #[getter]
    fn manifest_hash(&self) -> String {
        self.inner.manifest_hash()
    }

    fn write_manifest(&self, path: PathBuf) -> PyResult<()> {
        self.inner.manifest.write_csv(&path).map_err(err)
    }

    /// Discrepancies between a stored manifest and the files on disk.
    fn verify_manifest(&self, path: PathBuf) -> PyResult<Vec<String>> {
        let manifest = Manifest::read_csv(&path).map_err(err)?;
        let found = ingest::verify_manifest(&manifest, &self.inner.root).map_err(err)?;
        Ok(found.iter().map(|d| d.to_string()).collect())
    }

    fn __repr__(&self) -> String {
        format!("Dataset(train={}, unseen_val={}, test={})", self.n_train(), self.n_unseen_val(), self.n_test())
    }
}

#[pyclass(from_py_object)]
#[derive(Clone)]
struct ModelSpec {
    inner: model_zoo::ModelSpec,
}

#[pymethods]
impl ModelSpec {
    #[new]
    #[pyo3(signature = (arch, init="scratch", input_size=None))]
    fn new(arch: &str, init: &str, input_size: Option<usize>) -> PyResult<Self> {
        let mut inner = model_zoo::ModelSpec::new(parse::<Arch>(arch)?, parse::<InitMode>(init)?);
        if let Some(v) = input_size {
            inner = inner.with_v(v);
        }
        inner.validate().map_err(err)?;
        Ok(ModelSpec { inner })
    }

    #[getter]
    fn arch(&self) -> String {
        self.inner.arch.to_string()
    }

    #[getter]
    fn input_size(&self) -> usize {
        self.inner.v
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("ModelSpec({}, v={})", self.inner.arch, self.inner.v)
    }
}

#[pyclass(from_py_object)]
#[derive(Clone)]
struct TrainConfig {
    inner: trainer::TrainConfig,
}

#[pymethods]
impl TrainConfig {
    #[new]
    #[pyo3(signature = (batch_size=16, optimizer="ADAM", lr=0.001, max_epochs=500, plateau_patience=10, extent="all_layers", seed=0, internal_val_fraction=0.2))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        batch_size: usize,
        optimizer: &str,
        lr: f64,
        max_epochs: usize,
        plateau_patience: usize,
        extent: &str,
        seed: u64,
        internal_val_fraction: f64,
    ) -> PyResult<Self> {
        let inner = trainer::TrainConfig {
            batch_size,
            optimizer: parse::<OptimizerKind>(optimizer)?,
            lr,
            max_epochs,
            plateau_patience,
            extent: parse::<FineTuneExtent>(extent)?,
            seed,
            internal_val_fraction,
            ..Default::default()
        };
        inner.validate().map_err(err)?;
        Ok(TrainConfig { inner })
    }

    #[getter]
    fn settings(&self) -> String {
        self.inner.settings()
    }

    #[getter]
    fn batch_size(&self) -> usize {
        self.inner.batch_size
    }

    #[getter]
    fn lr(&self) -> f64 {
        self.inner.lr
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("TrainConfig({})", self.inner.settings())
    }
}

#[pyclass(unsendable)]
struct Model {
    inner: model_zoo::Model,
}

#[pymethods]
impl Model {
    #[staticmethod]
    #[pyo3(signature = (spec, seed=0))]
    fn build(spec: &ModelSpec, seed: u64) -> PyResult<Self> {
        Ok(Model { inner: model_zoo::build_model(&spec.inner, seed).map_err(err)? })
    }

    /// Restores a model written by training.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, _) = trainer::reload_checkpoint(&path, None).map_err(err)?;
        Ok(Model { inner })
    }

    #[getter]
    fn spec(&self) -> ModelSpec {
        ModelSpec { inner: self.inner.spec.clone() }
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    #[getter]
    fn trainable_count(&self) -> usize {
        self.inner.trainable_count()
    }

    fn freeze(&mut self, extent: &str) -> PyResult<()> {
        self.inner.set_extent(parse::<FineTuneExtent>(extent)?);
        Ok(())
    }

    /// `part` is one of "all", "backbone", "head".
    #[pyo3(signature = (part="all"))]
    fn checksum(&self, part: &str) -> PyResult<String> {
        let part = match part {
            "all" => Part::All,
            "backbone" => Part::Backbone,
            "head" => Part::Head,
            other => return Err(PyValueError::new_err(format!("unknown part {other:?}"))),
        };
        Ok(self.inner.checksum(part))
    }

    /// Class probabilities for every scan of a split, keyed by scan id.
    #[pyo3(signature = (dataset, split="test"))]
    fn predict(&self, dataset: &Dataset, split: &str) -> PyResult<Vec<(String, Vec<f64>)>> {
        let ds = &dataset.inner;
        let volumes: Vec<&ingest::ScanVolume> = match split {
            "train" => ds.train.iter().map(|s| &s.volume).collect(),
            "unseen_val" | "val" => ds.unseen_val.iter().map(|s| &s.volume).collect(),
            "test" => ds.test.iter().collect(),
            other => return Err(PyValueError::new_err(format!("unknown split {other:?}"))),
        };
        let cfg = PreprocessConfig::default();
        let inputs = volumes
            .iter()
            .map(|v| preprocess::assemble_input(v, &cfg, &self.inner.spec))
            .collect::<Result<Vec<_>, _>>()
            .map_err(err)?;
        let refs: Vec<_> = inputs.iter().collect();
        let probs = trainer::predict_proba(&self.inner, &refs).map_err(err)?;
        Ok(inputs
            .iter()
            .zip(probs.chunks_exact(ggograde::NUM_CLASSES))
            .map(|(i, p)| (i.scan_id.clone(), p.to_vec()))
            .collect())
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path, Default::default()).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("Model({}, params={})", self.inner.spec.arch, self.inner.param_count())
    }
}

fn root_or_default(root: Option<PathBuf>) -> PathBuf {
    root.unwrap_or_else(gridrunner::results_root)
}

/// Trains and evaluates one configuration; returns the recorded outcome.
#[pyfunction]
#[pyo3(signature = (spec, config, dataset, results_root=None))]
fn run_cell<'py>(
    py: Python<'py>,
    spec: &ModelSpec,
    config: &TrainConfig,
    dataset: &Dataset,
    results_root: Option<PathBuf>,
) -> PyResult<Bound<'py, PyAny>> {
    let cell = Cell { model_spec: spec.inner.clone(), train_config: config.inner.clone(), preprocess: PreprocessConfig::default() };
    let outcome = gridrunner::run_cell(&cell, &dataset.inner, &root_or_default(results_root));
    to_py(py, &outcome)
}

fn load_cells(grid: &Path) -> PyResult<Vec<Cell>> {
    gridrunner::expand_grid(&GridSpec::load(grid).map_err(err)?).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (grid, dataset, results_root=None, resume=true, concurrency=1))]
fn run_grid<'py>(
    py: Python<'py>,
    grid: PathBuf,
    dataset: &Dataset,
    results_root: Option<PathBuf>,
    resume: bool,
    concurrency: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let cells = load_cells(&grid)?;
    let result = gridrunner::run_grid(&cells, &dataset.inner, &root_or_default(results_root), resume, concurrency).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("executed", result.executed)?;
    d.set_item("resumed", result.resumed)?;
    d.set_item("outcomes", to_py(py, &result.outcomes)?)?;
    Ok(d)
}

/// Retrains the grid's best cell on train + unseen validation and predicts
/// the test split.
#[pyfunction]
#[pyo3(signature = (grid, dataset, results_root=None))]
fn retrain_final<'py>(py: Python<'py>, grid: PathBuf, dataset: &Dataset, results_root: Option<PathBuf>) -> PyResult<Bound<'py, PyAny>> {
    let root = root_or_default(results_root);
    let cells = load_cells(&grid)?;
    let result = gridrunner::collect_results(&cells, &root, &dataset.inner.manifest_hash());
    let best = gridrunner::best_cell(&result).ok_or_else(|| err("no completed cells to choose from"))?;
    let fin = gridrunner::retrain_final(&best.cell, &dataset.inner, &root).map_err(err)?;
    to_py(py, &fin)
}

#[pymodule]
fn ggograde_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("GgogradeError", m.py().get_type::<GgogradeError>())?;
    m.add("ARCHITECTURES", Arch::ALL.iter().map(|a| a.to_string()).collect::<Vec<_>>())?;
    m.add("SEVERITIES", ggograde::Severity::ALL.iter().map(|s| s.to_string()).collect::<Vec<_>>())?;
    m.add_class::<Dataset>()?;
    m.add_class::<ModelSpec>()?;
    m.add_class::<TrainConfig>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(select_center_index, m)?)?;
    m.add_function(wrap_pyfunction!(f1_macro, m)?)?;
    m.add_function(wrap_pyfunction!(auroc_macro, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(run_cell, m)?)?;
    m.add_function(wrap_pyfunction!(run_grid, m)?)?;
    m.add_function(wrap_pyfunction!(retrain_final, m)?)?;
    Ok(())
}
