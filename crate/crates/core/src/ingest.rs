//! Long-format EHR ingestion: CSV parsing, per-encounter grouping, fixed
//! time windows, standardization, one-hot encoding and patient-wise splits.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use chrono::NaiveDateTime;
use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::batching::EncounterSequence;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const PATIENT_COLUMN: &str = "patient_id";
pub const ENCOUNTER_COLUMN: &str = "encounter_id";
pub const TIME_COLUMN: &str = "time_hours";
pub const TIME_DIFF_FEATURE: &str = "time_diff";
pub const DEFAULT_WINDOW_HOURS: f64 = 8.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureKind {
    Continuous,
    /// An empty category list is filled from the training split by
    /// [`FeatureSchema::with_categories_from`].
    Categorical {
        #[serde(default)]
        categories: Vec<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: FeatureKind,
}

impl FeatureSpec {
    pub fn continuous(name: &str) -> Self {
        Self { name: name.to_string(), kind: FeatureKind::Continuous }
    }

    pub fn categorical(name: &str, categories: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            kind: FeatureKind::Categorical { categories: categories.iter().map(|s| s.to_string()).collect() },
        }
    }

    pub fn is_continuous(&self) -> bool {
        matches!(self.kind, FeatureKind::Continuous)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub features: Vec<FeatureSpec>,
    #[serde(default = "default_target")]
    pub target: String,
    #[serde(default)]
    pub time_diff: bool,
}

fn default_target() -> String {
    "target".to_string()
}

impl FeatureSchema {
    pub fn new(features: Vec<FeatureSpec>) -> Result<Self> {
        let schema = Self { features, target: default_target(), time_diff: false };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for f in &self.features {
            if [PATIENT_COLUMN, ENCOUNTER_COLUMN, TIME_COLUMN, self.target.as_str()].contains(&f.name.as_str()) {
                return Err(Error::Schema(format!("feature name {:?} collides with a reserved column", f.name)));
            }
            if !seen.insert(f.name.as_str()) {
                return Err(Error::Schema(format!("duplicate feature name {:?}", f.name)));
            }
        }
        Ok(())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f.name == name)
    }

    /// Width after one-hot encoding.
    pub fn encoded_width(&self) -> usize {
        self.features
            .iter()
            .map(|f| match &f.kind {
                FeatureKind::Continuous => 1,
                FeatureKind::Categorical { categories } => categories.len(),
            })
            .sum()
    }

    /// Names of the encoded columns, in encoding order.
    pub fn encoded_names(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.encoded_width());
        for f in &self.features {
            match &f.kind {
                FeatureKind::Continuous => out.push(f.name.clone()),
                FeatureKind::Categorical { categories } => {
                    out.extend(categories.iter().map(|c| format!("{}={}", f.name, c)))
                }
            }
        }
        out
    }

    /// Fills every empty category list with the sorted distinct values seen in `table`.
    pub fn with_categories_from(&self, table: &EhrTable) -> FeatureSchema {
        let mut out = self.clone();
        for f in out.features.iter_mut() {
            if let FeatureKind::Categorical { categories } = &mut f.kind {
                if !categories.is_empty() {
                    continue;
                }
                let Some(col) = table.schema.index_of(&f.name) else { continue };
                let seen: BTreeSet<&str> = table
                    .records()
                    .filter_map(|r| match &r.values[col] {
                        Value::Cat(s) => Some(s.as_str()),
                        _ => None,
                    })
                    .collect();
                *categories = seen.into_iter().map(str::to_string).collect();
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Value {
    Missing,
    Num(f64),
    Cat(String),
}

impl Value {
    pub fn as_num(&self) -> Option<f64> {
        match self {
            Value::Num(v) => Some(*v),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    /// Hours since encounter start (window start for windowed tables).
    pub time: f64,
    pub values: Vec<Value>,
    pub target: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encounter {
    pub patient_id: String,
    pub encounter_id: String,
    pub records: Vec<Record>,
}

impl Encounter {
    pub fn label(&self) -> u8 {
        self.records.iter().map(|r| r.target).max().unwrap_or(0)
    }
}

/// Long-format table grouped by encounter. Encounters are kept in
/// encounter-id order and records in time order within each encounter.
#[derive(Debug, Clone, PartialEq)]
pub struct EhrTable {
    pub schema: FeatureSchema,
    /// `Some(w)` once the table has been aggregated into `w`-hour windows.
    pub window_hours: Option<f64>,
    pub encounters: Vec<Encounter>,
}

pub type GranularTable = EhrTable;
pub type WindowedTable = EhrTable;

impl EhrTable {
    pub fn records(&self) -> impl Iterator<Item = &Record> {
        self.encounters.iter().flat_map(|e| e.records.iter())
    }

    pub fn n_records(&self) -> usize {
        self.encounters.iter().map(|e| e.records.len()).sum()
    }

    pub fn patients(&self) -> BTreeSet<&str> {
        self.encounters.iter().map(|e| e.patient_id.as_str()).collect()
    }

    /// Encounters whose patient is assigned to `split`.
    pub fn subset(&self, assignment: &SplitAssignment, split: Split) -> EhrTable {
        EhrTable {
            schema: self.schema.clone(),
            window_hours: self.window_hours,
            encounters: self
                .encounters
                .iter()
                .filter(|e| assignment.get(&e.patient_id) == Some(split))
                .cloned()
                .collect(),
        }
    }

    /// Writes the ingest CSV format.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec![PATIENT_COLUMN.to_string(), ENCOUNTER_COLUMN.to_string(), TIME_COLUMN.to_string()];
        header.extend(self.schema.features.iter().map(|f| f.name.clone()));
        header.push(self.schema.target.clone());
        w.write_record(&header)?;
        let mut row: Vec<String> = Vec::with_capacity(header.len());
        for enc in &self.encounters {
            for rec in &enc.records {
                row.clear();
                row.push(enc.patient_id.clone());
                row.push(enc.encounter_id.clone());
                row.push(rec.time.to_string());
                for v in &rec.values {
                    row.push(match v {
                        Value::Missing => String::new(),
                        Value::Num(x) => x.to_string(),
                        Value::Cat(s) => s.clone(),
                    });
                }
                row.push(rec.target.to_string());
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

enum RawTime {
    Hours(f64),
    Absolute(f64),
}

fn parse_time(s: &str) -> Option<RawTime> {
    if let Ok(v) = s.parse::<f64>() {
        return v.is_finite().then_some(RawTime::Hours(v));
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(RawTime::Absolute(dt.and_utc().timestamp() as f64 / 3600.0));
        }
    }
    None
}

/// Parses the long-format CSV. Rows are grouped by encounter and stably
/// sorted by time; absolute datetimes are converted to hours since the
/// encounter's first record.
pub fn parse_csv<R: Read>(source: R, schema: &FeatureSchema) -> Result<GranularTable> {
    schema.validate()?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(source);
    let headers = reader.headers()?.clone();
    let column = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("missing column {name:?}")))
    };
    let patient_col = column(PATIENT_COLUMN)?;
    let encounter_col = column(ENCOUNTER_COLUMN)?;
    let time_col = column(TIME_COLUMN)?;
    let target_col = column(&schema.target)?;
    let feature_cols = schema.features.iter().map(|f| column(&f.name)).collect::<Result<Vec<_>>>()?;

    struct Pending {
        patient_id: String,
        absolute: Option<bool>,
        records: Vec<Record>,
    }
    let mut groups: BTreeMap<String, Pending> = BTreeMap::new();

    for result in reader.records() {
        let rec = result?;
        let line = rec.position().map_or(0, |p| p.line());
        let row_err = |message: String| Error::Row { line, message };
        let field = |i: usize| rec.get(i).unwrap_or("");

        let time = parse_time(field(time_col))
            .ok_or_else(|| row_err(format!("unparseable time {:?}", field(time_col))))?;
        let target = match field(target_col) {
            "0" | "0.0" => 0,
            "1" | "1.0" => 1,
            other => return Err(row_err(format!("target must be 0 or 1, got {other:?}"))),
        };
        let mut values = Vec::with_capacity(schema.features.len());
        for (spec, &col) in schema.features.iter().zip(&feature_cols) {
            let raw = field(col);
            values.push(if raw.is_empty() {
                Value::Missing
            } else if spec.is_continuous() {
                match raw.parse::<f64>() {
                    Ok(v) if v.is_finite() => Value::Num(v),
                    _ => return Err(row_err(format!("column {:?}: unparseable number {raw:?}", spec.name))),
                }
            } else {
                Value::Cat(raw.to_string())
            });
        }

        let patient_id = field(patient_col).to_string();
        let encounter_id = field(encounter_col).to_string();
        if encounter_id.is_empty() || patient_id.is_empty() {
            return Err(row_err("empty patient or encounter id".into()));
        }
        let group = groups.entry(encounter_id.clone()).or_insert_with(|| Pending {
            patient_id: patient_id.clone(),
            absolute: None,
            records: Vec::new(),
        });
        if group.patient_id != patient_id {
            return Err(row_err(format!(
                "encounter {encounter_id:?} belongs to patient {:?}, found {patient_id:?}",
                group.patient_id
            )));
        }
        let (hours, absolute) = match time {
            RawTime::Hours(h) => (h, false),
            RawTime::Absolute(h) => (h, true),
        };
        if *group.absolute.get_or_insert(absolute) != absolute {
            return Err(row_err(format!("encounter {encounter_id:?} mixes relative hours and datetimes")));
        }
        if !absolute && hours < 0.0 {
            return Err(row_err(format!("negative time {hours}")));
        }
        group.records.push(Record { time: hours, values, target });
    }

    let encounters = groups
        .into_iter()
        .map(|(encounter_id, mut g)| {
            g.records.sort_by(|a, b| a.time.total_cmp(&b.time));
            if g.absolute == Some(true) {
                let t0 = g.records[0].time;
                g.records.iter_mut().for_each(|r| r.time -= t0);
            }
            Encounter { patient_id: g.patient_id, encounter_id, records: g.records }
        })
        .collect();
    Ok(EhrTable { schema: schema.clone(), window_hours: None, encounters })
}

/// Aggregates each encounter into consecutive `window_hours` windows.
///
/// Window `k` covers `[k·w, (k+1)·w)`. Continuous features are averaged over
/// present values, categoricals keep their last present value and the target
/// is the window maximum. Empty windows between occupied ones are emitted
/// with every feature missing and target 0.
pub fn windowize(table: &GranularTable, window_hours: f64) -> Result<WindowedTable> {
    if !(window_hours > 0.0 && window_hours.is_finite()) {
        return Err(Error::Config(format!("window_hours must be positive, got {window_hours}")));
    }
    let n_features = table.schema.features.len();
    let mut encounters = Vec::with_capacity(table.encounters.len());
    for enc in &table.encounters {
        let Some(last) = enc.records.last() else { continue };
        let n_windows = (last.time / window_hours).floor() as usize + 1;
        let mut sums = vec![vec![0.0; n_features]; n_windows];
        let mut counts = vec![vec![0usize; n_features]; n_windows];
        let mut cats: Vec<Vec<Option<&str>>> = vec![vec![None; n_features]; n_windows];
        let mut targets = vec![0u8; n_windows];
        for rec in &enc.records {
            let k = ((rec.time / window_hours).floor() as usize).min(n_windows - 1);
            targets[k] = targets[k].max(rec.target);
            for (j, v) in rec.values.iter().enumerate() {
                match v {
                    Value::Num(x) => {
                        sums[k][j] += x;
                        counts[k][j] += 1;
                    }
                    Value::Cat(s) => cats[k][j] = Some(s),
                    Value::Missing => {}
                }
            }
        }
        let records = (0..n_windows)
            .map(|k| {
                let values = (0..n_features)
                    .map(|j| {
                        if let Some(s) = cats[k][j] {
                            Value::Cat(s.to_string())
                        } else if counts[k][j] > 0 {
                            Value::Num(sums[k][j] / counts[k][j] as f64)
                        } else {
                            Value::Missing
                        }
                    })
                    .collect();
                Record { time: k as f64 * window_hours, values, target: targets[k] }
            })
            .collect();
        encounters.push(Encounter {
            patient_id: enc.patient_id.clone(),
            encounter_id: enc.encounter_id.clone(),
            records,
        });
    }
    Ok(EhrTable { schema: table.schema.clone(), window_hours: Some(window_hours), encounters })
}

/// Appends a continuous feature holding hours since the previous record of
/// the same encounter (0 for the first record).
pub fn add_time_diff(table: &GranularTable) -> GranularTable {
    let mut out = table.clone();
    if out.schema.index_of(TIME_DIFF_FEATURE).is_none() {
        out.schema.features.push(FeatureSpec::continuous(TIME_DIFF_FEATURE));
    }
    out.schema.time_diff = true;
    let col = out.schema.index_of(TIME_DIFF_FEATURE).expect("just inserted");
    for enc in &mut out.encounters {
        let mut prev = None;
        for rec in &mut enc.records {
            let dt = prev.map_or(0.0, |p| rec.time - p);
            prev = Some(rec.time);
            if rec.values.len() <= col {
                rec.values.push(Value::Num(dt));
            } else {
                rec.values[col] = Value::Num(dt);
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaling {
    pub name: String,
    pub mean: f64,
    pub std: f64,
    /// Constant or all-missing in the training split; removed at apply time.
    pub dropped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizationParams {
    pub features: Vec<FeatureScaling>,
}

impl StandardizationParams {
    pub fn get(&self, name: &str) -> Option<&FeatureScaling> {
        self.features.iter().find(|f| f.name == name)
    }

    pub fn invert(&self, name: &str, z: f64) -> Option<f64> {
        self.get(name).filter(|f| !f.dropped).map(|f| z * f.std + f.mean)
    }
}

/// Per-feature mean and population standard deviation over non-missing
/// training values.
pub fn fit_standardizer(train: &EhrTable) -> Result<StandardizationParams> {
    if train.n_records() == 0 {
        return Err(Error::Empty("cannot fit standardization on an empty table".into()));
    }
    let mut features = Vec::new();
    for (j, spec) in train.schema.features.iter().enumerate() {
        if !spec.is_continuous() {
            continue;
        }
        let (mut n, mut sum) = (0usize, 0.0);
        for r in train.records() {
            if let Some(x) = r.values[j].as_num() {
                n += 1;
                sum += x;
            }
        }
        let mean = if n > 0 { sum / n as f64 } else { 0.0 };
        let var = if n > 0 {
            train.records().filter_map(|r| r.values[j].as_num()).map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64
        } else {
            0.0
        };
        let std = var.sqrt();
        let dropped = !(std > 0.0);
        if dropped {
            warn!("feature {:?} is constant or missing in the training split; dropping it", spec.name);
        }
        features.push(FeatureScaling { name: spec.name.clone(), mean, std, dropped });
    }
    Ok(StandardizationParams { features })
}

/// Scales continuous features to `(x − mean)/std`, imputes missing values
/// with 0 and removes dropped features from the table and its schema.
pub fn apply_standardizer(table: &EhrTable, params: &StandardizationParams) -> EhrTable {
    let keep: Vec<bool> = table
        .schema
        .features
        .iter()
        .map(|f| !(f.is_continuous() && params.get(&f.name).is_none_or(|p| p.dropped)))
        .collect();
    let scaling: Vec<Option<&FeatureScaling>> = table
        .schema
        .features
        .iter()
        .map(|f| if f.is_continuous() { params.get(&f.name) } else { None })
        .collect();
    let mut out = EhrTable {
        schema: FeatureSchema {
            features: table.schema.features.iter().zip(&keep).filter(|(_, &k)| k).map(|(f, _)| f.clone()).collect(),
            ..table.schema.clone()
        },
        window_hours: table.window_hours,
        encounters: Vec::with_capacity(table.encounters.len()),
    };
    for enc in &table.encounters {
        let records = enc
            .records
            .iter()
            .map(|r| Record {
                time: r.time,
                target: r.target,
                values: r
                    .values
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| keep[*j])
                    .map(|(j, v)| match (scaling[j], v) {
                        (Some(s), Value::Num(x)) => Value::Num((x - s.mean) / s.std),
                        (Some(_), _) => Value::Num(0.0),
                        (None, v) => v.clone(),
                    })
                    .collect(),
            })
            .collect();
        out.encounters.push(Encounter { records, ..enc.clone_header() });
    }
    out
}

impl Encounter {
    fn clone_header(&self) -> Encounter {
        Encounter { patient_id: self.patient_id.clone(), encounter_id: self.encounter_id.clone(), records: Vec::new() }
    }
}

/// Encodes a table into model-ready sequences using `schema`'s feature order
/// and category lists. Continuous values pass through (missing → 0); each
/// categorical becomes an indicator block, all zeros for missing or unseen
/// categories.
pub fn one_hot(table: &EhrTable, schema: &FeatureSchema) -> Result<Vec<EncounterSequence>> {
    let width = schema.encoded_width();
    let cols = schema
        .features
        .iter()
        .map(|f| {
            table
                .schema
                .index_of(&f.name)
                .ok_or_else(|| Error::Schema(format!("table has no feature {:?}", f.name)))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(table.encounters.len());
    for enc in &table.encounters {
        if enc.records.is_empty() {
            continue;
        }
        let mut features = Matrix::zeros(enc.records.len(), width);
        for (t, rec) in enc.records.iter().enumerate() {
            let row = features.row_mut(t);
            let mut offset = 0;
            for (spec, &col) in schema.features.iter().zip(&cols) {
                match &spec.kind {
                    FeatureKind::Continuous => {
                        row[offset] = rec.values[col].as_num().unwrap_or(0.0);
                        offset += 1;
                    }
                    FeatureKind::Categorical { categories } => {
                        if let Value::Cat(s) = &rec.values[col] {
                            if let Some(k) = categories.iter().position(|c| c == s) {
                                row[offset + k] = 1.0;
                            }
                        }
                        offset += categories.len();
                    }
                }
            }
        }
        let targets: Vec<u8> = enc.records.iter().map(|r| r.target).collect();
        out.push(EncounterSequence::new(enc.encounter_id.clone(), features, targets)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown split {s:?} (expected train, validation or test)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub assignment: BTreeMap<String, Split>,
}

impl SplitAssignment {
    pub fn get(&self, patient_id: &str) -> Option<Split> {
        self.assignment.get(patient_id).copied()
    }

    pub fn count(&self, split: Split) -> usize {
        self.assignment.values().filter(|&&s| s == split).count()
    }
}

/// Assigns whole patients to train/validation/test. Patients are shuffled
/// with `seed`, then cut at the rounded fractional boundaries.
pub fn split_patientwise(table: &EhrTable, fractions: [f64; 3], seed: u64) -> Result<SplitAssignment> {
    if fractions.iter().any(|f| !(*f > 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions must be positive and sum to 1, got {fractions:?}")));
    }
    let mut patients: Vec<&str> = table.patients().into_iter().collect();
    if patients.len() < 3 {
        return Err(Error::Config(format!("need at least 3 patients to split, got {}", patients.len())));
    }
    patients.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = patients.len() as f64;
    let n_train = (fractions[0] * n).round() as usize;
    let n_val = ((fractions[1] * n).round() as usize).min(patients.len() - n_train);
    let assignment = patients
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let split = if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Validation
            } else {
                Split::Test
            };
            (p.to_string(), split)
        })
        .collect();
    Ok(SplitAssignment { assignment })
}
