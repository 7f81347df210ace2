//! Python bindings: datasets, run configs, models, losses, metrics and the
//! end-to-end pipeline.

use std::path::PathBuf;

use ehrseq_core::batching::{dense_sliding_window, sliding_window, smart_batch, BatchSet, EncounterSequence};
use ehrseq_core::ingest::{parse_csv, EhrTable, FeatureSchema};
use ehrseq_core::loss::{self, ClassWeights, FocalConfig};
use ehrseq_core::metrics;
use ehrseq_core::pipeline::{self, RunConfig as CoreRunConfig};
use ehrseq_core::seqnet::{self, Checkpoint, ModelConfig, ModelParams};
use ehrseq_core::synth::{self, SynthConfig};
use ehrseq_core::tensor::{MaskMatrix, Matrix, Tensor3};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyIOError, PyValueError};
use pyo3::prelude::*;

create_exception!(ehrseq, EhrseqError, PyException, "Data, shape or metric error raised by ehrseq.");

fn to_py(e: ehrseq_core::Error) -> PyErr {
    use ehrseq_core::Error as E;
    match e {
        E::Io(_) => PyIOError::new_err(e.to_string()),
        E::Config(_) => PyValueError::new_err(e.to_string()),
        _ => EhrseqError::new_err(e.to_string()),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// A long-format EHR table, either synthetic or parsed from CSV.
#[pyclass(module = "ehrseq", from_py_object)]
#[derive(Clone)]
struct Dataset {
    table: EhrTable,
}

#[pymethods]
impl Dataset {
    /// Synthetic cohort; `config_json` may override any generator field.
    #[staticmethod]
    #[pyo3(signature = (n_patients, seed=0, config_json=None))]
    fn synthetic(n_patients: usize, seed: u64, config_json: Option<&str>) -> PyResult<Self> {
        let mut cfg: SynthConfig = match config_json {
            Some(s) => serde_json::from_str(s).map_err(json_err)?,
            None => SynthConfig::default(),
        };
        cfg.n_patients = n_patients;
        cfg.seed = seed;
        Ok(Self { table: synth::generate(&cfg).map_err(to_py)? })
    }

    #[staticmethod]
    fn from_csv(path: PathBuf, schema_json: &str) -> PyResult<Self> {
        let schema: FeatureSchema = serde_json::from_str(schema_json).map_err(json_err)?;
        let file = std::fs::File::open(&path).map_err(|e| PyIOError::new_err(format!("{}: {e}", path.display())))?;
        Ok(Self { table: parse_csv(std::io::BufReader::new(file), &schema).map_err(to_py)? })
    }

    fn to_csv(&self, path: PathBuf) -> PyResult<()> {
        let file = std::fs::File::create(&path).map_err(|e| PyIOError::new_err(format!("{}: {e}", path.display())))?;
        self.table.write_csv(std::io::BufWriter::new(file)).map_err(to_py)
    }

    fn schema_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.table.schema).map_err(json_err)
    }

    #[getter]
    fn n_encounters(&self) -> usize {
        self.table.encounters.len()
    }

    #[getter]
    fn n_records(&self) -> usize {
        self.table.n_records()
    }

    fn encounter_event_rate(&self) -> f64 {
        let pos = self.table.encounters.iter().filter(|e| e.label() == 1).count();
        pos as f64 / self.table.encounters.len().max(1) as f64
    }

    fn observation_event_rate(&self) -> f64 {
        let pos = self.table.records().filter(|r| r.target == 1).count();
        pos as f64 / self.table.n_records().max(1) as f64
    }

    fn __len__(&self) -> usize {
        self.table.n_records()
    }
}

/// Full pipeline configuration, exchanged as JSON.
#[pyclass(module = "ehrseq", from_py_object)]
#[derive(Clone)]
struct RunConfig {
    inner: CoreRunConfig,
}

#[pymethods]
impl RunConfig {
    #[staticmethod]
    fn preset(name: &str) -> PyResult<Self> {
        Ok(Self { inner: CoreRunConfig::preset(name).map_err(to_py)? })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner: CoreRunConfig = serde_json::from_str(text).map_err(json_err)?;
        inner.validate().map_err(to_py)?;
        Ok(Self { inner })
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.inner).map_err(json_err)
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
    fn epochs(&self) -> usize {
        self.inner.train.epochs
    }

    #[setter]
    fn set_epochs(&mut self, epochs: usize) {
        self.inner.train.epochs = epochs;
    }
}

/// A configured LSTM or transformer-encoder classifier.
#[pyclass(module = "ehrseq", from_py_object)]
#[derive(Clone)]
struct Model {
    params: ModelParams,
}

fn dense_batch(x: Vec<Vec<Vec<f64>>>, valid: Option<Vec<usize>>) -> PyResult<(Tensor3, MaskMatrix)> {
    let samples: Vec<Matrix> = x.iter().map(|s| Matrix::from_rows(s)).collect();
    let time = samples.first().map_or(0, Matrix::rows);
    if samples.iter().any(|m| m.rows() != time) {
        return Err(PyValueError::new_err("every sample needs the same number of steps (pad on the left)"));
    }
    let tensor = Tensor3::from_samples(&samples).map_err(to_py)?;
    let valid = valid.unwrap_or_else(|| vec![time; samples.len()]);
    if valid.len() != samples.len() || valid.iter().any(|&v| v > time) {
        return Err(PyValueError::new_err("valid needs one count per sample, each at most the step count"));
    }
    Ok((tensor, MaskMatrix::left_padded(time, &valid)))
}

#[pymethods]
impl Model {
    #[staticmethod]
    #[pyo3(signature = (input_width, blocks=2, hidden=32, dropout=0.2, seed=0))]
    fn lstm(input_width: usize, blocks: usize, hidden: usize, dropout: f64, seed: u64) -> PyResult<Self> {
        let cfg = ModelConfig::lstm(input_width, blocks, hidden, dropout);
        Ok(Self { params: ModelParams::init(&cfg, seed).map_err(to_py)? })
    }

    #[staticmethod]
    #[pyo3(signature = (input_width, blocks=2, heads=6, key_dim=128, ff_dim=64, dropout=0.2, seed=0))]
    fn transformer(
        input_width: usize,
        blocks: usize,
        heads: usize,
        key_dim: usize,
        ff_dim: usize,
        dropout: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let cfg = ModelConfig::transformer(input_width, blocks, heads, key_dim, ff_dim, dropout);
        Ok(Self { params: ModelParams::init(&cfg, seed).map_err(to_py)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { params: Checkpoint::load(&path).and_then(|c| c.to_model()).map_err(to_py)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        Checkpoint::from_model(&self.params).save(&path).map_err(to_py)
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.params.parameter_count()
    }

    #[getter]
    fn input_width(&self) -> usize {
        self.params.config.input_width
    }

    fn config_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.params.config).map_err(json_err)
    }

    /// Scores `x[sample][step][feature]`; `valid[b]` counts the trailing
    /// real steps of sample `b` (all steps when omitted).
    #[pyo3(signature = (x, valid=None))]
    fn predict(&self, x: Vec<Vec<Vec<f64>>>, valid: Option<Vec<usize>>) -> PyResult<Vec<f64>> {
        let (tensor, mask) = dense_batch(x, valid)?;
        seqnet::predict(&self.params, &tensor, &mask).map_err(to_py)
    }
}

#[pyfunction]
fn class_weights(labels: Vec<u8>) -> PyResult<(f64, f64)> {
    let w = loss::compute_class_weights(&labels).map_err(to_py)?;
    Ok((w.w0, w.w1))
}

#[pyfunction]
fn class_weights_from_fraction(q: f64) -> PyResult<(f64, f64)> {
    let w = ClassWeights::from_positive_fraction(q).map_err(to_py)?;
    Ok((w.w0, w.w1))
}

#[pyfunction]
#[pyo3(signature = (p, y, w0=1.0, w1=1.0))]
fn weighted_bce(p: Vec<f64>, y: Vec<u8>, w0: f64, w1: f64) -> PyResult<(f64, Vec<f64>)> {
    let w = ClassWeights::new(w0, w1).map_err(to_py)?;
    loss::weighted_bce(&p, &y, &w).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (p, y, gamma=2.0, w0=None, w1=None))]
fn focal_loss(p: Vec<f64>, y: Vec<u8>, gamma: f64, w0: Option<f64>, w1: Option<f64>) -> PyResult<(f64, Vec<f64>)> {
    let weights = match (w0, w1) {
        (Some(a), Some(b)) => Some(ClassWeights::new(a, b).map_err(to_py)?),
        (None, None) => None,
        _ => return Err(PyValueError::new_err("give both w0 and w1 or neither")),
    };
    loss::focal_loss(&p, &y, &FocalConfig { gamma, weights }).map_err(to_py)
}

#[pyfunction]
fn auroc(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    metrics::auroc(&scores, &labels).map_err(to_py)
}

#[pyfunction]
fn auprc(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    metrics::auprc(&scores, &labels).map_err(to_py)
}

/// Shapes and per-sample pad counts of the batches built from encounters
/// with the given lengths.
#[pyfunction]
#[pyo3(signature = (lengths, width, method, timestamp=21, batch_size=64))]
fn batch_shapes(
    lengths: Vec<usize>,
    width: usize,
    method: &str,
    timestamp: usize,
    batch_size: usize,
) -> PyResult<Vec<([usize; 3], Vec<usize>)>> {
    let encs = lengths
        .iter()
        .enumerate()
        .map(|(i, &n)| EncounterSequence::new(format!("e{i:04}"), Matrix::zeros(n, width), vec![0; n]))
        .collect::<Result<Vec<_>, _>>()
        .map_err(to_py)?;
    let set: BatchSet = match method {
        "sliding" => sliding_window(&encs, timestamp),
        "dense" => dense_sliding_window(&encs, timestamp),
        "smart" => smart_batch(&encs, batch_size, 0),
        other => return Err(PyValueError::new_err(format!("unknown batching method {other:?}"))),
    }
    .map_err(to_py)?;
    Ok(set.batches.iter().map(|b| (b.features.shape(), b.pad_counts())).collect())
}

/// Max relative error between analytic and finite-difference gradients on
/// a small random problem.
#[pyfunction]
#[pyo3(signature = (arch, seed=0, step=seqnet::DEFAULT_STEP))]
fn grad_check(arch: &str, seed: u64, step: f64) -> PyResult<f64> {
    let width = 3;
    let cfg = match arch {
        "lstm" => ModelConfig::lstm(width, 2, 8, 0.2),
        "transformer" => ModelConfig::transformer(width, 1, 2, 4, 6, 0.2),
        other => return Err(PyValueError::new_err(format!("unknown architecture {other:?}"))),
    };
    let model = ModelParams::init(&cfg, seed).map_err(to_py)?;
    let (x, mask, y) = seqnet::random_problem(seed, 4, 6, width);
    seqnet::grad_check(&model, &x, &mask, &y, &loss::LossKind::Bce { weights: None }, step).map_err(to_py)
}

/// Preprocess, train and evaluate. Returns the trained model, the metrics
/// JSON and the per-epoch history as JSON lines.
#[pyfunction]
fn run_pipeline(py: Python<'_>, dataset: &Dataset, config: &RunConfig) -> PyResult<(Model, String, String)> {
    let (table, cfg) = (dataset.table.clone(), config.inner.clone());
    let out = py.detach(move || pipeline::run(&table, &cfg)).map_err(to_py)?;
    Ok((Model { params: out.model }, out.report.to_json(), out.history.to_json_lines()))
}

#[pymodule]
fn ehrseq(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("EhrseqError", m.py().get_type::<EhrseqError>())?;
    m.add("PRESETS", pipeline::PRESETS.to_vec())?;
    m.add_class::<Dataset>()?;
    m.add_class::<RunConfig>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(class_weights, m)?)?;
    m.add_function(wrap_pyfunction!(class_weights_from_fraction, m)?)?;
    m.add_function(wrap_pyfunction!(weighted_bce, m)?)?;
    m.add_function(wrap_pyfunction!(focal_loss, m)?)?;
    m.add_function(wrap_pyfunction!(auroc, m)?)?;
    m.add_function(wrap_pyfunction!(auprc, m)?)?;
    m.add_function(wrap_pyfunction!(batch_shapes, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    Ok(())
}
