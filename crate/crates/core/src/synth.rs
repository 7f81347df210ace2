//! Seeded synthetic inpatient data with a learnable deterioration signal.
//!
//! Each continuous feature follows a two-piece normal whose halves are
//! scaled so the median and quartiles hit the configured values exactly.
//! Positive encounters get one latent event time; observations in the 24
//! hours before it are labelled 1 and drift toward deterioration, more
//! strongly the closer they are to the event.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{Encounter, FeatureSchema, FeatureSpec, GranularTable, Record, Value};

/// Standard normal 75th percentile.
const Z75: f64 = 0.674_489_750_196_081_7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    /// Drawn once per patient.
    Patient,
    /// Drawn per observation around a per-encounter baseline.
    Observation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureDist {
    pub name: String,
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
    #[serde(default)]
    pub min: Option<f64>,
    pub scope: Scope,
    /// Direction of the pre-event drift: −1, 0 or +1.
    #[serde(default)]
    pub drift: f64,
}

impl FeatureDist {
    fn new(name: &str, median: f64, q25: f64, q75: f64, scope: Scope, drift: f64, min: Option<f64>) -> Self {
        Self { name: name.to_string(), median, q25, q75, min, scope, drift }
    }

    fn sigma_low(&self) -> f64 {
        (self.median - self.q25) / Z75
    }

    fn sigma_high(&self) -> f64 {
        (self.q75 - self.median) / Z75
    }

    /// Maps a standard-normal draw onto this feature's scale.
    fn from_z(&self, z: f64) -> f64 {
        let x = self.median + z * if z < 0.0 { self.sigma_low() } else { self.sigma_high() };
        self.min.map_or(x, |m| x.max(m))
    }
}

/// Medians and quartiles of the eight published features.
pub fn default_features() -> Vec<FeatureDist> {
    use Scope::*;
    vec![
        FeatureDist::new("age", 61.0, 47.0, 71.0, Patient, 0.0, Some(18.0)),
        FeatureDist::new("diastolic", 67.0, 59.0, 76.0, Observation, -1.0, Some(0.0)),
        FeatureDist::new("map", 87.0, 77.67, 97.0, Observation, -1.0, Some(0.0)),
        FeatureDist::new("pulse_pressure", 57.0, 47.0, 70.0, Observation, -1.0, Some(0.0)),
        FeatureDist::new("urine", 279.0, 150.0, 400.0, Observation, -1.0, Some(0.0)),
        FeatureDist::new("weight", 177.91, 146.61, 214.29, Patient, 0.0, Some(60.0)),
        FeatureDist::new("max_o2", 1.0, 0.0, 2.0, Observation, 1.0, Some(0.0)),
        FeatureDist::new("systolic", 125.0, 111.0, 141.0, Observation, -1.0, Some(0.0)),
    ]
}

pub const GENDER_FEATURE: &str = "gender";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub seed: u64,
    /// Encounters per patient are `1 + Poisson(extra_encounters_mean)`.
    pub extra_encounters_mean: f64,
    /// Observation count per encounter is log-normal with this median.
    pub length_median: f64,
    pub length_log_sd: f64,
    pub max_observations: usize,
    /// Mean of the exponential gap between observations, in hours.
    pub interval_mean_hours: f64,
    /// Fraction of encounters that end in an event.
    pub event_rate: f64,
    pub label_horizon_hours: f64,
    /// Drift inside the label horizon scales as `1 − lead / drift_hours`.
    pub drift_hours: f64,
    /// Drift size in units of each feature's IQR-implied standard deviation.
    pub signal_strength: f64,
    /// Share of an observation-level feature's variance that is a
    /// per-encounter baseline.
    pub encounter_correlation: f64,
    pub missing_rate: f64,
    pub features: Vec<FeatureDist>,
    pub genders: Vec<String>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_patients: 1000,
            seed: 0,
            extra_encounters_mean: 0.69,
            length_median: 20.0,
            length_log_sd: 0.9,
            max_observations: 400,
            interval_mean_hours: 4.0,
            event_rate: 0.047,
            label_horizon_hours: 24.0,
            drift_hours: 48.0,
            signal_strength: 1.0,
            encounter_correlation: 0.3,
            missing_rate: 0.05,
            features: default_features(),
            genders: vec!["F".into(), "M".into()],
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_patients == 0 {
            return bad("n_patients must be positive".into());
        }
        if !(self.event_rate > 0.0 && self.event_rate < 1.0) {
            return bad(format!("event_rate must be in (0, 1), got {}", self.event_rate));
        }
        if !(self.length_median >= 1.0) || !(self.length_log_sd >= 0.0) || self.max_observations == 0 {
            return bad("encounter lengths must be at least 1 observation".into());
        }
        if !(self.interval_mean_hours > 0.0) || !(self.extra_encounters_mean >= 0.0) {
            return bad("interval mean must be positive and extra encounter mean non-negative".into());
        }
        if !(self.label_horizon_hours > 0.0) || !(self.drift_hours > 0.0) || !(self.signal_strength >= 0.0) {
            return bad("label horizon and drift window must be positive, signal strength non-negative".into());
        }
        if !(0.0..1.0).contains(&self.encounter_correlation) || !(0.0..1.0).contains(&self.missing_rate) {
            return bad("encounter_correlation and missing_rate must be in [0, 1)".into());
        }
        if self.genders.is_empty() {
            return bad("at least one gender category is required".into());
        }
        for f in &self.features {
            if !(f.q25 <= f.median && f.median <= f.q75) {
                return bad(format!("feature {:?} needs q25 ≤ median ≤ q75", f.name));
            }
        }
        Ok(())
    }

    pub fn schema(&self) -> FeatureSchema {
        let mut features: Vec<FeatureSpec> = self.features.iter().map(|f| FeatureSpec::continuous(&f.name)).collect();
        let cats: Vec<&str> = self.genders.iter().map(String::as_str).collect();
        features.push(FeatureSpec::categorical(GENDER_FEATURE, &cats));
        FeatureSchema::new(features).expect("distinct default names")
    }
}

fn std_normal<R: Rng>(rng: &mut R) -> f64 {
    Normal::new(0.0, 1.0).expect("unit normal").sample(rng)
}

fn generate_patient(cfg: &SynthConfig, index: usize, rng: &mut ChaCha8Rng) -> Vec<Encounter> {
    let patient_id = format!("P{index:07}");
    let statics: Vec<Option<f64>> = cfg
        .features
        .iter()
        .map(|f| (f.scope == Scope::Patient).then(|| f.from_z(std_normal(rng))))
        .collect();
    let gender = cfg.genders[rng.random_range(0..cfg.genders.len())].clone();
    let extra = if cfg.extra_encounters_mean > 0.0 {
        Poisson::new(cfg.extra_encounters_mean).expect("positive mean").sample(rng) as usize
    } else {
        0
    };
    let lengths = LogNormal::new(cfg.length_median.ln(), cfg.length_log_sd).expect("valid log-normal");
    let gaps = Exp::new(1.0 / cfg.interval_mean_hours).expect("positive rate");
    let (rho, keep) = (cfg.encounter_correlation.sqrt(), (1.0 - cfg.encounter_correlation).sqrt());

    (0..=extra)
        .map(|k| {
            let n = (lengths.sample(rng).round() as usize).clamp(1, cfg.max_observations);
            let mut times = Vec::with_capacity(n);
            let mut t = 0.0;
            for i in 0..n {
                if i > 0 {
                    t += gaps.sample(rng);
                }
                times.push(t);
            }
            let total = *times.last().expect("n ≥ 1");
            let event = rng.random_bool(cfg.event_rate).then(|| {
                let e = rng.random_range(total / 2.0..=total);
                times.retain(|&s| s <= e);
                let last = *times.last().expect("first observation is at 0");
                if e - last > cfg.label_horizon_hours {
                    last + rng.random_range(0.0..cfg.label_horizon_hours)
                } else {
                    e
                }
            });
            let baselines: Vec<f64> = cfg.features.iter().map(|_| std_normal(rng)).collect();
            let records = times
                .iter()
                .map(|&time| {
                    let lead = event.map(|e| e - time);
                    let ramp = lead
                        .filter(|&l| l <= cfg.label_horizon_hours)
                        .map_or(0.0, |l| (1.0 - l / cfg.drift_hours).clamp(0.0, 1.0));
                    let mut values: Vec<Value> = cfg
                        .features
                        .iter()
                        .zip(&statics)
                        .zip(&baselines)
                        .map(|((f, fixed), base)| {
                            if let Some(v) = fixed {
                                return Value::Num(*v);
                            }
                            let z = rho * base + keep * std_normal(rng);
                            let missing = rng.random_bool(cfg.missing_rate);
                            let sigma = (f.q75 - f.q25) / (2.0 * Z75);
                            let x = f.from_z(z) + cfg.signal_strength * f.drift * sigma * ramp;
                            if missing {
                                Value::Missing
                            } else {
                                Value::Num(f.min.map_or(x, |m| x.max(m)))
                            }
                        })
                        .collect();
                    values.push(Value::Cat(gender.clone()));
                    let target = u8::from(lead.is_some_and(|l| l <= cfg.label_horizon_hours));
                    Record { time, values, target }
                })
                .collect();
            Encounter { patient_id: patient_id.clone(), encounter_id: format!("{patient_id}-E{k:02}"), records }
        })
        .collect()
}

/// Generates `cfg.n_patients` patients. Patient `i` draws from its own
/// ChaCha8 stream, so output is independent of generation order.
pub fn generate(cfg: &SynthConfig) -> Result<GranularTable> {
    cfg.validate()?;
    let mut encounters = Vec::new();
    for i in 0..cfg.n_patients {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(i as u64);
        encounters.extend(generate_patient(cfg, i, &mut rng));
    }
    Ok(GranularTable { schema: cfg.schema(), window_hours: None, encounters })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileReport {
    pub name: String,
    pub n: usize,
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
    pub target: [f64; 3],
    pub pass: bool,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Empirical median and quartiles of each spec'd feature over the table's
/// non-missing values. A feature passes when all three are within
/// `tolerance × (q75 − q25)` of the spec.
pub fn quantile_check(table: &GranularTable, specs: &[FeatureDist], tolerance: f64) -> Vec<QuantileReport> {
    specs
        .iter()
        .map(|spec| {
            let mut values: Vec<f64> = match table.schema.index_of(&spec.name) {
                Some(j) => table.records().filter_map(|r| r.values[j].as_num()).collect(),
                None => Vec::new(),
            };
            values.sort_by(f64::total_cmp);
            let target = [spec.q25, spec.median, spec.q75];
            if values.is_empty() {
                return QuantileReport {
                    name: spec.name.clone(),
                    n: 0,
                    median: f64::NAN,
                    q25: f64::NAN,
                    q75: f64::NAN,
                    target,
                    pass: false,
                };
            }
            let got = [quantile(&values, 0.25), quantile(&values, 0.5), quantile(&values, 0.75)];
            let width = (spec.q75 - spec.q25).abs().max(f64::EPSILON);
            let pass = got.iter().zip(&target).all(|(g, t)| (g - t).abs() <= tolerance * width);
            QuantileReport { name: spec.name.clone(), n: values.len(), median: got[1], q25: got[0], q75: got[2], target, pass }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig { n_patients: 400, seed, ..Default::default() }
    }

    #[test]
    fn deterministic() {
        assert_eq!(generate(&small(3)).unwrap(), generate(&small(3)).unwrap());
        assert_ne!(generate(&small(3)).unwrap(), generate(&small(4)).unwrap());
    }

    #[test]
    fn two_piece_hits_quartiles() {
        let f = &default_features()[2];
        assert!((f.from_z(-Z75) - f.q25).abs() < 1e-9);
        assert!((f.from_z(Z75) - f.q75).abs() < 1e-9);
        assert_eq!(f.from_z(0.0), f.median);
    }

    #[test]
    fn self_consistent_quantiles() {
        let cfg = SynthConfig { n_patients: 3000, ..Default::default() };
        let t = generate(&cfg).unwrap();
        for r in quantile_check(&t, &cfg.features, 0.1) {
            assert!(r.pass, "{r:?}");
        }
    }

    #[test]
    fn shifted_feature_fails_and_empty_specs() {
        let cfg = SynthConfig { n_patients: 3000, seed: 1, ..Default::default() };
        let mut t = generate(&cfg).unwrap();
        let j = t.schema.index_of("age").unwrap();
        for e in &mut t.encounters {
            for r in &mut e.records {
                if let Value::Num(x) = &mut r.values[j] {
                    *x += 100.0;
                }
            }
        }
        let reports = quantile_check(&t, &cfg.features, 0.1);
        assert!(!reports.iter().find(|r| r.name == "age").unwrap().pass);
        assert!(reports.iter().filter(|r| r.name != "age").all(|r| r.pass));
        assert!(quantile_check(&t, &[], 0.1).is_empty());
    }

    #[test]
    fn structure() {
        let t = generate(&SynthConfig { n_patients: 3000, ..Default::default() }).unwrap();
        let lengths: Vec<f64> = t.encounters.iter().map(|e| e.records.len() as f64).collect();
        let mean = lengths.iter().sum::<f64>() / lengths.len() as f64;
        let mut sorted = lengths.clone();
        sorted.sort_by(f64::total_cmp);
        assert!(quantile(&sorted, 0.5) < mean, "right skew");
        let enc_rate = t.encounters.iter().filter(|e| e.label() == 1).count() as f64 / t.encounters.len() as f64;
        let obs_rate = t.records().filter(|r| r.target == 1).count() as f64 / t.n_records() as f64;
        assert!(obs_rate < enc_rate, "{obs_rate} vs {enc_rate}");
        for e in &t.encounters {
            assert!(e.records.windows(2).all(|w| w[0].time <= w[1].time));
            assert_eq!(e.records[0].time, 0.0);
            // positives form a contiguous tail
            let first = e.records.iter().position(|r| r.target == 1);
            if let Some(i) = first {
                assert!(e.records[i..].iter().all(|r| r.target == 1));
            }
        }
    }

    #[test]
    fn invalid_configs() {
        assert!(generate(&SynthConfig { event_rate: 0.0, ..small(0) }).is_err());
        assert!(generate(&SynthConfig { n_patients: 0, ..small(0) }).is_err());
        let mut cfg = small(0);
        cfg.features[0].q25 = 80.0;
        assert!(generate(&cfg).is_err());
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = SynthConfig { n_patients: 7, ..Default::default() };
        let back: SynthConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(cfg, back);
        let partial: SynthConfig = serde_json::from_str(r#"{"n_patients": 5, "seed": 2}"#).unwrap();
        assert_eq!(partial.event_rate, 0.047);
    }
}
