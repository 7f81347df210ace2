//! Distributional properties of the generator that need more data than a
//! unit test: the no-signal null and single-feature learnability.

use ehrseq_core::ingest::{EhrTable, Value};
use ehrseq_core::metrics::auroc;
use ehrseq_core::synth::{default_features, generate, SynthConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

/// Two-sided Mann–Whitney p-value, normal approximation with tie correction.
fn mann_whitney_p(a: &[f64], b: &[f64]) -> f64 {
    let mut all: Vec<(f64, bool)> = a.iter().map(|&v| (v, true)).chain(b.iter().map(|&v| (v, false))).collect();
    all.sort_by(|x, y| x.0.total_cmp(&y.0));
    let n = all.len();
    let (mut rank_a, mut tie_term) = (0.0, 0.0);
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && all[j].0 == all[i].0 {
            j += 1;
        }
        let mid = (i + j + 1) as f64 / 2.0;
        rank_a += mid * all[i..j].iter().filter(|p| p.1).count() as f64;
        let t = (j - i) as f64;
        tie_term += t * t * t - t;
        i = j;
    }
    let (n1, n2) = (a.len() as f64, b.len() as f64);
    let u = rank_a - n1 * (n1 + 1.0) / 2.0;
    let nt = n1 + n2;
    let var = n1 * n2 / 12.0 * ((nt + 1.0) - tie_term / (nt * (nt - 1.0)));
    if var <= 0.0 {
        return 1.0;
    }
    let z = (u - n1 * n2 / 2.0) / var.sqrt();
    2.0 * (1.0 - Normal::new(0.0, 1.0).unwrap().cdf(z.abs()))
}

/// One observation per patient, so within-patient correlation does not
/// inflate the test: a random positive one when the patient has any,
/// otherwise a random observation.
fn one_per_patient(table: &EhrTable, seed: u64) -> Vec<(Vec<Value>, u8)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = Vec::new();
    let mut i = 0;
    while i < table.encounters.len() {
        let pid = &table.encounters[i].patient_id;
        let mut records = Vec::new();
        while i < table.encounters.len() && &table.encounters[i].patient_id == pid {
            records.extend(table.encounters[i].records.iter());
            i += 1;
        }
        let positives: Vec<_> = records.iter().filter(|r| r.target == 1).collect();
        let r = if positives.is_empty() {
            records[rng.random_range(0..records.len())]
        } else {
            positives[rng.random_range(0..positives.len())]
        };
        picked.push((r.values.clone(), r.target));
    }
    picked
}

fn numeric(v: &Value) -> Option<f64> {
    match v {
        Value::Num(x) => Some(*x),
        Value::Cat(c) => Some(f64::from(c == "M")),
        Value::Missing => None,
    }
}

#[test]
fn zero_signal_is_indistinguishable() {
    for seed in 0..10 {
        let cfg = SynthConfig { n_patients: 2000, seed, signal_strength: 0.0, ..Default::default() };
        let table = generate(&cfg).unwrap();
        let rows = one_per_patient(&table, seed);
        let width = table.schema.features.len();
        for j in 0..width {
            let (pos, neg): (Vec<_>, Vec<_>) = rows.iter().filter(|r| numeric(&r.0[j]).is_some()).partition(|r| r.1 == 1);
            let values = |set: &[&(Vec<Value>, u8)]| set.iter().map(|r| numeric(&r.0[j]).unwrap()).collect::<Vec<_>>();
            assert!(pos.len() > 30, "seed {seed}: only {} positive patients", pos.len());
            let p = mann_whitney_p(&values(&pos), &values(&neg));
            // Bonferroni over the features tested for this seed
            let adjusted = (p * width as f64).min(1.0);
            assert!(adjusted > 0.01, "seed {seed}, feature {}: p = {p}", table.schema.features[j].name);
        }
    }
}

#[test]
fn one_feature_threshold_beats_chance() {
    let table = generate(&SynthConfig { n_patients: 3000, seed: 21, ..Default::default() }).unwrap();
    let mut best = 0.0f64;
    for spec in default_features().iter().filter(|f| f.drift != 0.0) {
        let j = table.schema.index_of(&spec.name).unwrap();
        let (scores, labels): (Vec<f64>, Vec<u8>) =
            table.records().filter_map(|r| r.values[j].as_num().map(|v| (spec.drift * v, r.target))).unzip();
        best = best.max(auroc(&scores, &labels).unwrap());
    }
    assert!(best > 0.6, "best single-feature auroc {best}");
}

#[test]
fn mann_whitney_matches_known_values() {
    // identical samples: no evidence at all
    assert!((mann_whitney_p(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]) - 1.0).abs() < 1e-12);
    // complete separation of 20 vs 20: z = 5.41
    let a: Vec<f64> = (0..20).map(f64::from).collect();
    let b: Vec<f64> = (20..40).map(f64::from).collect();
    assert!(mann_whitney_p(&a, &b) < 1e-6);
}
