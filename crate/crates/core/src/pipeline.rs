//! End-to-end run configuration and the preprocess → batch → train →
//! evaluate pipeline shared by the command line and the tests.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::batching::{dense_sliding_window, rebatch, sliding_window, smart_batch, BatchSet, EncounterSequence};
use crate::error::{Error, Result};
use crate::ingest::{
    add_time_diff, apply_standardizer, fit_standardizer, one_hot, parse_csv, split_patientwise, windowize, Encounter, EhrTable,
    FeatureSchema, FeatureSpec, GranularTable, Record, Split, SplitAssignment, StandardizationParams, Value,
};
use crate::loss::{compute_class_weights, ClassWeights, LossKind};
use crate::metrics::{evaluate, Aggregation, MetricsReport};
use crate::optim::OptimizerKind;
use crate::seqnet::{Architecture, LstmBlockSpec, ModelConfig, ModelParams, Pooling};
use crate::train::{train, TrainConfig, TrainHistory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchMethod {
    Sliding,
    Dense,
    Smart,
}

impl std::str::FromStr for BatchMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sliding" => Ok(BatchMethod::Sliding),
            "dense" => Ok(BatchMethod::Dense),
            "smart" => Ok(BatchMethod::Smart),
            _ => Err(Error::Config(format!("unknown batching method {s:?} (expected sliding, dense or smart)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchingConfig {
    pub method: BatchMethod,
    /// Window length `W` for the sliding methods.
    #[serde(default = "default_timestamp")]
    pub timestamp: usize,
    /// Minibatch size; for smart batching, encounters per batch.
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
}

fn default_timestamp() -> usize {
    crate::batching::DEFAULT_TIMESTAMP
}

fn default_batch_size() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    /// `None` keeps the granular rows.
    pub window_hours: Option<f64>,
    #[serde(default)]
    pub time_diff: bool,
    #[serde(default = "default_split")]
    pub split: [f64; 3],
}

fn default_split() -> [f64; 3] {
    [0.6, 0.2, 0.2]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum WeightMode {
    /// Use whatever the loss config says.
    Unchanged,
    /// `n / (2·n_c)` from the training labels.
    Auto,
    Fixed { w0: f64, w1: f64 },
}

/// Model settings without the input width, which is only known after
/// preprocessing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub architecture: Architecture,
    #[serde(default)]
    pub pooling: Option<Pooling>,
    #[serde(default)]
    pub head_dropout: Option<f64>,
}

impl ModelSpec {
    pub fn to_config(&self, input_width: usize) -> ModelConfig {
        let mut cfg = match &self.architecture {
            Architecture::LstmStack { .. } => ModelConfig::lstm(input_width, 1, 1, 0.0),
            Architecture::TransformerEncoder { blocks, heads, key_dim, ff_dim, dropout } => {
                ModelConfig::transformer(input_width, *blocks, *heads, *key_dim, *ff_dim, *dropout)
            }
        };
        cfg.architecture = self.architecture.clone();
        if let Some(p) = self.pooling {
            cfg.pooling = p;
        }
        if let Some(d) = self.head_dropout {
            cfg.head_dropout = d;
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalConfig {
    #[serde(default)]
    pub aggregation: Aggregation,
    /// Batching used for scoring; defaults to the training method, so the
    /// held-out samples are built the same way as the training samples.
    #[serde(default)]
    pub method: Option<BatchMethod>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub preset: Option<String>,
    pub data: DataConfig,
    pub batching: BatchingConfig,
    pub model: ModelSpec,
    pub class_weights: WeightMode,
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

pub const PRESETS: [&str; 5] = ["exp1.1", "exp1.2", "exp1.3", "exp2.1", "exp2.2"];

fn lstm_stack() -> ModelSpec {
    let block = LstmBlockSpec { hidden: 32, layer_norm: true, dropout: 0.2 };
    ModelSpec { architecture: Architecture::LstmStack { blocks: vec![block; 2] }, pooling: None, head_dropout: None }
}

fn transformer() -> ModelSpec {
    ModelSpec {
        architecture: Architecture::TransformerEncoder { blocks: 2, heads: 6, key_dim: 128, ff_dim: 64, dropout: 0.2 },
        pooling: None,
        head_dropout: None,
    }
}

impl RunConfig {
    /// Named experiment setups. Windowed presets use `W = 21` (one week of
    /// 8-hour windows) and weights 62.71/0.50; granular smart-batching
    /// presets use weights 42.67/0.51.
    pub fn preset(name: &str) -> Result<Self> {
        let windowed = DataConfig { window_hours: Some(8.0), time_diff: false, split: default_split() };
        let granular = DataConfig { window_hours: None, time_diff: true, split: default_split() };
        let windowed_weights = WeightMode::Fixed { w0: 0.50, w1: 62.71 };
        let granular_weights = WeightMode::Fixed { w0: 0.51, w1: 42.67 };
        let batching = |method, batch_size| BatchingConfig { method, timestamp: 21, batch_size };
        let (data, batching, model, class_weights) = match name {
            "exp1.1" => (windowed, batching(BatchMethod::Sliding, 64), lstm_stack(), windowed_weights),
            "exp1.2" => (windowed, batching(BatchMethod::Dense, 64), lstm_stack(), windowed_weights),
            "exp1.3" => (granular, batching(BatchMethod::Smart, 32), lstm_stack(), granular_weights),
            "exp2.1" => (windowed, batching(BatchMethod::Dense, 64), transformer(), windowed_weights),
            "exp2.2" => (granular, batching(BatchMethod::Smart, 32), transformer(), granular_weights),
            _ => return Err(Error::Config(format!("unknown preset {name:?} (known: {})", PRESETS.join(", ")))),
        };
        Ok(Self {
            seed: 0,
            preset: Some(name.to_string()),
            data,
            batching,
            model,
            class_weights,
            train: TrainConfig {
                epochs: 40,
                loss: LossKind::Bce { weights: None },
                optimizer: OptimizerKind::adam(),
                ..TrainConfig::default()
            },
            eval: EvalConfig::default(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(w) = self.data.window_hours {
            if !(w > 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("window_hours must be positive, got {w}")));
            }
        }
        if self.batching.timestamp == 0 || self.batching.batch_size == 0 {
            return Err(Error::Config("timestamp and batch_size must be at least 1".into()));
        }
        if let WeightMode::Fixed { w0, w1 } = self.class_weights {
            ClassWeights::new(w0, w1)?;
        }
        self.model.to_config(1).validate()?;
        self.train.validate()
    }

    fn eval_method(&self) -> BatchMethod {
        self.eval.method.unwrap_or(self.batching.method)
    }
}

/// Everything needed to encode new data the way the training split was.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessInfo {
    pub source_schema: FeatureSchema,
    pub window_hours: Option<f64>,
    pub time_diff: bool,
    pub standardization: StandardizationParams,
    pub encoded_names: Vec<String>,
    pub splits: SplitAssignment,
}

impl PreprocessInfo {
    pub fn encoded_schema(&self) -> FeatureSchema {
        let mut s = FeatureSchema::new(self.encoded_names.iter().map(|n| FeatureSpec::continuous(n)).collect())
            .expect("encoded names are distinct");
        s.target = self.source_schema.target.clone();
        s
    }
}

/// Encoded (standardized, one-hot) tables, all continuous.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub info: PreprocessInfo,
    pub train: EhrTable,
    pub validation: EhrTable,
    pub test: EhrTable,
}

/// Sidecar written next to the split CSVs.
pub const PREPROCESS_INFO_FILE: &str = "preprocess.json";

pub fn split_path(dir: &Path, split: Split) -> PathBuf {
    dir.join(format!("{}.csv", split.name()))
}

/// Reads one encoded split written by [`Prepared::save`].
pub fn load_split(dir: &Path, split: Split) -> Result<(PreprocessInfo, EhrTable)> {
    let info: PreprocessInfo = serde_json::from_reader(BufReader::new(File::open(dir.join(PREPROCESS_INFO_FILE))?))?;
    let mut table = parse_csv(BufReader::new(File::open(split_path(dir, split))?), &info.encoded_schema())?;
    table.window_hours = info.window_hours;
    Ok((info, table))
}

impl Prepared {
    /// Writes `train.csv`, `validation.csv`, `test.csv` and the sidecar.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for split in Split::ALL {
            self.split(split).write_csv(BufWriter::new(File::create(split_path(dir, split))?))?;
        }
        let sidecar = serde_json::to_string_pretty(&self.info)? + "\n";
        std::fs::write(dir.join(PREPROCESS_INFO_FILE), sidecar)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (info, train) = load_split(dir, Split::Train)?;
        let (_, validation) = load_split(dir, Split::Validation)?;
        let (_, test) = load_split(dir, Split::Test)?;
        Ok(Self { info, train, validation, test })
    }

    pub fn split(&self, split: Split) -> &EhrTable {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }
}

fn encode_table(table: &EhrTable, schema: &FeatureSchema, encoded: &FeatureSchema) -> Result<EhrTable> {
    let seqs = one_hot(table, schema)?;
    let by_id: std::collections::HashMap<&str, &Encounter> =
        table.encounters.iter().map(|e| (e.encounter_id.as_str(), e)).collect();
    let encounters = seqs
        .into_iter()
        .map(|s| {
            let src = by_id[s.encounter_id.as_str()];
            let records = src
                .records
                .iter()
                .enumerate()
                .map(|(t, r)| Record {
                    time: r.time,
                    values: s.features.row(t).iter().map(|&v| Value::Num(v)).collect(),
                    target: r.target,
                })
                .collect();
            Encounter { patient_id: src.patient_id.clone(), encounter_id: src.encounter_id.clone(), records }
        })
        .collect();
    Ok(EhrTable { schema: encoded.clone(), window_hours: table.window_hours, encounters })
}

/// Windows (optionally), adds time differences (optionally), splits by
/// patient, fits standardization on the training split and encodes all
/// three splits.
pub fn preprocess(raw: &GranularTable, cfg: &DataConfig, seed: u64) -> Result<Prepared> {
    let mut table = match cfg.window_hours {
        Some(w) => windowize(raw, w)?,
        None => raw.clone(),
    };
    if cfg.time_diff {
        table = add_time_diff(&table);
    }
    let splits = split_patientwise(&table, cfg.split, seed)?;
    let train_raw = table.subset(&splits, Split::Train);
    let standardization = fit_standardizer(&train_raw)?;
    let source_schema = table.schema.with_categories_from(&train_raw);
    let scaled_schema = {
        let mut s = source_schema.clone();
        s.features.retain(|f| standardization.get(&f.name).is_none_or(|p| !p.dropped));
        s
    };
    let info = PreprocessInfo {
        encoded_names: scaled_schema.encoded_names(),
        source_schema,
        window_hours: cfg.window_hours,
        time_diff: cfg.time_diff,
        standardization,
        splits,
    };
    let encoded = info.encoded_schema();
    let encode = |split| -> Result<EhrTable> {
        let scaled = apply_standardizer(&table.subset(&info.splits, split), &info.standardization);
        encode_table(&scaled, &scaled_schema, &encoded)
    };
    Ok(Prepared { train: encode(Split::Train)?, validation: encode(Split::Validation)?, test: encode(Split::Test)?, info })
}

/// Model-ready sequences of an encoded table.
pub fn sequences(encoded: &EhrTable) -> Result<Vec<EncounterSequence>> {
    one_hot(encoded, &encoded.schema)
}

/// Training batches: sliding and dense samples are reshuffled into
/// `batch_size` minibatches; smart batching groups whole encounters.
pub fn training_batches(encs: &[EncounterSequence], cfg: &BatchingConfig, seed: u64) -> Result<BatchSet> {
    match cfg.method {
        BatchMethod::Sliding => rebatch(&sliding_window(encs, cfg.timestamp)?, cfg.batch_size, seed),
        BatchMethod::Dense => rebatch(&dense_sliding_window(encs, cfg.timestamp)?, cfg.batch_size, seed),
        BatchMethod::Smart => smart_batch(encs, cfg.batch_size, seed),
    }
}

/// Scoring batches, one batch per encounter for the sliding methods.
pub fn scoring_batches(encs: &[EncounterSequence], method: BatchMethod, cfg: &BatchingConfig) -> Result<BatchSet> {
    match method {
        BatchMethod::Sliding => sliding_window(encs, cfg.timestamp),
        BatchMethod::Dense => dense_sliding_window(encs, cfg.timestamp),
        BatchMethod::Smart => smart_batch(encs, cfg.batch_size, 0),
    }
}

/// Resolves the class-weight mode into the loss actually used.
pub fn resolve_loss(cfg: &RunConfig, train_set: &BatchSet) -> Result<LossKind> {
    let weights = match cfg.class_weights {
        WeightMode::Unchanged => return Ok(cfg.train.loss),
        WeightMode::Auto => compute_class_weights(&train_set.labels().collect::<Vec<_>>())?,
        WeightMode::Fixed { w0, w1 } => ClassWeights::new(w0, w1)?,
    };
    Ok(match cfg.train.loss {
        LossKind::Bce { .. } => LossKind::Bce { weights: Some(weights) },
        LossKind::Focal(mut f) => {
            f.weights = Some(weights);
            LossKind::Focal(f)
        }
    })
}

/// Trains a freshly initialised model on the encoded train split, using
/// the validation split for early stopping.
pub fn fit(prepared: &Prepared, cfg: &RunConfig) -> Result<(ModelParams, TrainHistory)> {
    cfg.validate()?;
    let train_encs = sequences(&prepared.train)?;
    let val_encs = sequences(&prepared.validation)?;
    let train_set = training_batches(&train_encs, &cfg.batching, cfg.seed)?;
    let val_set = scoring_batches(&val_encs, cfg.batching.method, &cfg.batching)?;
    fit_batches(&train_set, &val_set, prepared.info.encoded_names.len(), cfg)
}

pub fn fit_batches(
    train_set: &BatchSet,
    val_set: &BatchSet,
    width: usize,
    cfg: &RunConfig,
) -> Result<(ModelParams, TrainHistory)> {
    let model = ModelParams::init(&cfg.model.to_config(width), cfg.seed)?;
    let mut tc = cfg.train.clone();
    tc.loss = resolve_loss(cfg, train_set)?;
    train(model, train_set, val_set, &tc, cfg.seed)
}

pub fn evaluate_table(model: &ModelParams, encoded: &EhrTable, cfg: &RunConfig) -> Result<MetricsReport> {
    let set = scoring_batches(&sequences(encoded)?, cfg.eval_method(), &cfg.batching)?;
    evaluate(model, &set, cfg.eval.aggregation)
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub model: ModelParams,
    pub history: TrainHistory,
    pub report: MetricsReport,
}

/// Preprocess, train and evaluate on the held-out test split.
pub fn run(raw: &GranularTable, cfg: &RunConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let prepared = preprocess(raw, &cfg.data, cfg.seed)?;
    let (model, history) = fit(&prepared, cfg)?;
    let report = evaluate_table(&model, &prepared.test, cfg)?;
    Ok(RunOutput { model, history, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthConfig};

    #[test]
    fn presets_validate_and_round_trip() {
        for name in PRESETS {
            let cfg = RunConfig::preset(name).unwrap();
            cfg.validate().unwrap();
            let back: RunConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
            assert_eq!(back, cfg);
        }
        assert!(RunConfig::preset("exp9").is_err());
    }

    #[test]
    fn preprocess_partitions_and_encodes() {
        let raw = generate(&SynthConfig { n_patients: 60, ..Default::default() }).unwrap();
        let p = preprocess(&raw, &RunConfig::preset("exp1.1").unwrap().data, 3).unwrap();
        let total: usize = [Split::Train, Split::Validation, Split::Test].iter().map(|&s| p.split(s).encounters.len()).sum();
        assert_eq!(total, raw.encounters.len());
        let width = p.info.encoded_names.len();
        assert_eq!(width, 10, "{:?}", p.info.encoded_names);
        for s in [Split::Train, Split::Validation, Split::Test] {
            assert!(p.split(s).records().all(|r| r.values.len() == width));
        }
        let mut csv = Vec::new();
        p.test.write_csv(&mut csv).unwrap();
        let back = crate::ingest::parse_csv(csv.as_slice(), &p.info.encoded_schema()).unwrap();
        assert_eq!(back.encounters, p.test.encounters);
    }

    #[test]
    fn prepared_round_trips_through_disk() {
        let raw = generate(&SynthConfig { n_patients: 40, ..Default::default() }).unwrap();
        let p = preprocess(&raw, &RunConfig::preset("exp1.3").unwrap().data, 1).unwrap();
        let dir = std::env::temp_dir().join(format!("ehrseq-prepared-{}", std::process::id()));
        p.save(&dir).unwrap();
        let back = Prepared::load(&dir).unwrap();
        std::fs::remove_dir_all(&dir).unwrap();
        assert_eq!(back.info, p.info);
        for split in Split::ALL {
            assert_eq!(back.split(split).schema, p.split(split).schema, "{split:?}");
            assert_eq!(back.split(split).encounters, p.split(split).encounters, "{split:?}");
        }
        assert_eq!(back, p);
    }

    #[test]
    fn tiny_run_is_deterministic() {
        let raw = generate(&SynthConfig { n_patients: 150, event_rate: 0.3, ..Default::default() }).unwrap();
        let mut cfg = RunConfig::preset("exp1.1").unwrap();
        cfg.train.epochs = 2;
        cfg.model = ModelSpec {
            architecture: Architecture::LstmStack { blocks: vec![LstmBlockSpec { hidden: 4, layer_norm: true, dropout: 0.1 }] },
            pooling: None,
            head_dropout: None,
        };
        let a = run(&raw, &cfg).unwrap();
        let b = run(&raw, &cfg).unwrap();
        assert_eq!(a.report.to_json(), b.report.to_json());
        assert!(a.history.same_trajectory(&b.history));
    }
}
