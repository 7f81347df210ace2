//! AUROC and average precision at the observation and encounter levels.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::batching::BatchSet;
use crate::error::{shape_err, Error, Result};
use crate::seqnet::{predict, ModelParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredObservation {
    pub encounter_id: String,
    pub step: usize,
    pub score: f64,
    pub label: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Max,
    Mean,
    /// Score of the latest step; the label is still the max label.
    Last,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelMetrics {
    pub auroc: f64,
    pub auprc: f64,
    pub event_rate: f64,
    pub n: usize,
    pub n_pos: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub observation: LevelMetrics,
    pub encounter: LevelMetrics,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain numbers") + "\n"
    }
}

fn check(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(shape_err(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::UndefinedMetric(format!("score {s} is not a number")));
    }
    if let Some(y) = labels.iter().find(|&&y| y > 1) {
        return Err(Error::UndefinedMetric(format!("label {y} is not 0 or 1")));
    }
    let pos = labels.iter().filter(|&&y| y == 1).count();
    Ok((pos, labels.len() - pos))
}

/// Index order by score, with runs of equal scores grouped.
fn tie_blocks(scores: &[f64], descending: bool) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    if descending {
        idx.reverse();
    }
    let mut blocks: Vec<Vec<usize>> = Vec::new();
    for i in idx {
        match blocks.last_mut() {
            Some(b) if scores[b[0]] == scores[i] => b.push(i),
            _ => blocks.push(vec![i]),
        }
    }
    blocks
}

/// Mann–Whitney probability that a positive outscores a negative, ties
/// counting ½. Pair counts are kept as exact doubled integers.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = check(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!("auroc needs both classes ({pos} positive, {neg} negative)")));
    }
    let mut neg_below: u128 = 0;
    let mut doubled: u128 = 0;
    for block in tie_blocks(scores, false) {
        let p = block.iter().filter(|&&i| labels[i] == 1).count() as u128;
        let q = block.len() as u128 - p;
        doubled += p * (2 * neg_below + q);
        neg_below += q;
    }
    Ok(doubled as f64 / (2 * pos as u128 * neg as u128) as f64)
}

/// Average precision: `Σ ΔRecall · Precision` over descending score
/// thresholds, each block of tied scores entering together.
pub fn auprc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, _) = check(scores, labels)?;
    if pos == 0 {
        return Err(Error::UndefinedMetric("auprc needs at least one positive".into()));
    }
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut ap = 0.0;
    for block in tie_blocks(scores, true) {
        let p = block.iter().filter(|&&i| labels[i] == 1).count();
        tp += p;
        fp += block.len() - p;
        if p > 0 {
            ap += (p as f64 / pos as f64) * (tp as f64 / (tp + fp) as f64);
        }
    }
    Ok(ap)
}

/// One `(encounter_id, score, label)` per encounter, ordered by id. The
/// label is the max observation label.
pub fn encounter_aggregate(obs: &[ScoredObservation], rule: Aggregation) -> Vec<(String, f64, u8)> {
    let mut groups: BTreeMap<&str, Vec<&ScoredObservation>> = BTreeMap::new();
    for o in obs {
        groups.entry(&o.encounter_id).or_default().push(o);
    }
    groups
        .into_iter()
        .map(|(id, g)| {
            let label = g.iter().map(|o| o.label).max().unwrap_or(0);
            let score = match rule {
                Aggregation::Max => g.iter().map(|o| o.score).fold(f64::NEG_INFINITY, f64::max),
                Aggregation::Mean => g.iter().map(|o| o.score).sum::<f64>() / g.len() as f64,
                Aggregation::Last => g.iter().max_by_key(|o| o.step).map_or(f64::NAN, |o| o.score),
            };
            (id.to_string(), score, label)
        })
        .collect()
}

pub fn level_metrics(scores: &[f64], labels: &[u8]) -> Result<LevelMetrics> {
    let (n_pos, _) = check(scores, labels)?;
    let n = labels.len();
    if n == 0 {
        return Err(Error::Empty("no scored samples".into()));
    }
    Ok(LevelMetrics {
        auroc: auroc(scores, labels)?,
        auprc: auprc(scores, labels)?,
        event_rate: n_pos as f64 / n as f64,
        n,
        n_pos,
    })
}

/// Observation- and encounter-level metrics for already scored samples.
pub fn report(obs: &[ScoredObservation], rule: Aggregation) -> Result<MetricsReport> {
    let scores: Vec<f64> = obs.iter().map(|o| o.score).collect();
    let labels: Vec<u8> = obs.iter().map(|o| o.label).collect();
    let observation = level_metrics(&scores, &labels)?;
    let enc = encounter_aggregate(obs, rule);
    let scores: Vec<f64> = enc.iter().map(|e| e.1).collect();
    let labels: Vec<u8> = enc.iter().map(|e| e.2).collect();
    Ok(MetricsReport { observation, encounter: level_metrics(&scores, &labels)? })
}

/// Scores every sample in evaluation mode, ordered by `(encounter_id, step)`.
pub fn score_batches(model: &ModelParams, set: &BatchSet) -> Result<Vec<ScoredObservation>> {
    let mut obs = Vec::with_capacity(set.n_samples());
    for b in &set.batches {
        let p = predict(model, &b.features, &b.mask)?;
        for ((score, &label), r) in p.into_iter().zip(&b.labels).zip(&b.sample_refs) {
            obs.push(ScoredObservation { encounter_id: r.encounter_id.clone(), step: r.step, score, label });
        }
    }
    obs.sort_by(|a, b| (&a.encounter_id, a.step).cmp(&(&b.encounter_id, b.step)));
    Ok(obs)
}

pub fn evaluate(model: &ModelParams, set: &BatchSet, rule: Aggregation) -> Result<MetricsReport> {
    report(&score_batches(model, set)?, rule)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const S: [f64; 4] = [0.1, 0.4, 0.35, 0.8];
    const Y: [u8; 4] = [0, 0, 1, 1];

    fn brute_auroc(s: &[f64], y: &[u8]) -> f64 {
        let (mut doubled, mut pairs) = (0u128, 0u128);
        for i in (0..s.len()).filter(|&i| y[i] == 1) {
            for j in (0..s.len()).filter(|&j| y[j] == 0) {
                pairs += 1;
                doubled += if s[i] > s[j] { 2 } else if s[i] == s[j] { 1 } else { 0 };
            }
        }
        doubled as f64 / (2 * pairs) as f64
    }

    fn brute_auprc(s: &[f64], y: &[u8]) -> f64 {
        let pos = y.iter().filter(|&&v| v == 1).count();
        let mut thresholds: Vec<f64> = s.to_vec();
        thresholds.sort_by(|a, b| b.total_cmp(a));
        thresholds.dedup();
        let mut prev_tp = 0;
        let mut ap = 0.0;
        for t in thresholds {
            let tp = (0..s.len()).filter(|&i| s[i] >= t && y[i] == 1).count();
            let k = (0..s.len()).filter(|&i| s[i] >= t).count();
            if tp > prev_tp {
                ap += ((tp - prev_tp) as f64 / pos as f64) * (tp as f64 / k as f64);
            }
            prev_tp = tp;
        }
        ap
    }

    #[test]
    fn hand_case() {
        assert_eq!(auroc(&S, &Y).unwrap(), 0.75);
        assert!((auprc(&S, &Y).unwrap() - 5.0 / 6.0).abs() < 1e-10);
    }

    #[test]
    fn trivial_cases() {
        assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(auprc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.3; 5], &[0, 1, 0, 0, 1]).unwrap(), 0.5);
        assert_eq!(auprc(&[0.3; 5], &[0, 1, 0, 0, 1]).unwrap(), 0.4);
        assert!(matches!(auroc(&[0.1, 0.2], &[1, 1]), Err(Error::UndefinedMetric(_))));
        assert!(matches!(auprc(&[0.1, 0.2], &[0, 0]), Err(Error::UndefinedMetric(_))));
        assert!(auroc(&[f64::NAN, 0.2], &[0, 1]).is_err());
    }

    #[test]
    fn aggregation() {
        let o = |e: &str, step, score, label| ScoredObservation { encounter_id: e.into(), step, score, label };
        let obs = vec![o("a", 0, 0.2, 0), o("a", 1, 0.9, 1), o("a", 2, 0.4, 0), o("b", 0, 0.3, 0)];
        let got = encounter_aggregate(&obs, Aggregation::Max);
        assert_eq!(got, vec![("a".into(), 0.9, 1), ("b".into(), 0.3, 0)]);
        assert_eq!(encounter_aggregate(&obs, Aggregation::Last)[0].1, 0.4);
        assert!((encounter_aggregate(&obs, Aggregation::Mean)[0].1 - 0.5).abs() < 1e-15);
        assert_eq!(encounter_aggregate(&obs[3..], Aggregation::Max), vec![("b".into(), 0.3, 0)]);
    }

    #[test]
    fn single_observation_encounters_match_observation_level() {
        let obs: Vec<ScoredObservation> = (0..50)
            .map(|i| ScoredObservation {
                encounter_id: format!("e{i:03}"),
                step: 0,
                score: ((i * 37) % 11) as f64 / 11.0,
                label: u8::from(i % 3 == 0),
            })
            .collect();
        let r = report(&obs, Aggregation::Max).unwrap();
        assert_eq!(r.observation, r.encounter);
    }

    fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
        (2usize..200).prop_flat_map(|n| {
            (prop::collection::vec((0u8..12).prop_map(|k| k as f64 / 11.0), n), prop::collection::vec(0u8..2, n))
        })
    }

    proptest! {
        #[test]
        fn matches_brute_force((s, mut y) in instance()) {
            y[0] = 0;
            y[1] = 1;
            prop_assert_eq!(auroc(&s, &y).unwrap(), brute_auroc(&s, &y));
            prop_assert_eq!(auprc(&s, &y).unwrap(), brute_auprc(&s, &y));
        }

        #[test]
        fn monotone_invariance_and_complement((s, mut y) in instance()) {
            y[0] = 0;
            y[1] = 1;
            let squashed: Vec<f64> = s.iter().map(|v| (3.0 * v - 1.0).tanh()).collect();
            let a = auroc(&s, &y).unwrap();
            prop_assert!((a - auroc(&squashed, &y).unwrap()).abs() <= 1e-12);
            let flipped: Vec<u8> = y.iter().map(|v| 1 - v).collect();
            prop_assert!((a + auroc(&s, &flipped).unwrap() - 1.0).abs() <= 1e-12);
            let ap = auprc(&s, &y).unwrap();
            prop_assert!((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&ap));
        }
    }
}
