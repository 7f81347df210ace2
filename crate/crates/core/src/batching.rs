//! Turns encoded encounters into `[batch, time, feature]` blocks with masks
//! and labels: sliding window, dense sliding window and smart batching.
//!
//! All strategies left-pad, so the last step of every sample is real data.

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{MaskMatrix, Matrix, Tensor3};

pub const DEFAULT_TIMESTAMP: usize = 21;

#[derive(Debug, Clone, PartialEq)]
pub struct EncounterSequence {
    pub encounter_id: String,
    /// `T × F` encoded features, one row per observation.
    pub features: Matrix,
    pub targets: Vec<u8>,
    pub encounter_label: u8,
}

impl EncounterSequence {
    pub fn new(encounter_id: String, features: Matrix, targets: Vec<u8>) -> Result<Self> {
        if features.rows() == 0 {
            return Err(Error::Empty(format!("encounter {encounter_id:?} has no observations")));
        }
        if features.rows() != targets.len() {
            return Err(shape_err(format!(
                "encounter {encounter_id:?}: {} feature rows but {} targets",
                features.rows(),
                targets.len()
            )));
        }
        let encounter_label = targets.iter().copied().max().unwrap_or(0);
        Ok(Self { encounter_id, features, targets, encounter_label })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn width(&self) -> usize {
        self.features.cols()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRef {
    pub encounter_id: String,
    /// Index of the sample's last (current) observation within its encounter.
    pub step: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub features: Tensor3,
    pub mask: MaskMatrix,
    pub labels: Vec<u8>,
    pub sample_refs: Vec<SampleRef>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Number of masked (padded) steps per sample.
    pub fn pad_counts(&self) -> Vec<usize> {
        (0..self.mask.batch()).map(|b| self.mask.time() - self.mask.valid_count(b)).collect()
    }

    fn from_windows(windows: Vec<(Matrix, usize, u8, SampleRef)>, time: usize, width: usize) -> Result<Batch> {
        let mut features = Tensor3::zeros(windows.len(), time, width);
        let mut valid = Vec::with_capacity(windows.len());
        let mut labels = Vec::with_capacity(windows.len());
        let mut sample_refs = Vec::with_capacity(windows.len());
        for (b, (rows, start, label, r)) in windows.into_iter().enumerate() {
            let n = rows.rows() - start;
            let pad = time - n;
            let dst = features.sample_mut(b);
            dst[pad * width..].copy_from_slice(&rows.values()[start * width..]);
            valid.push(n);
            labels.push(label);
            sample_refs.push(r);
        }
        Ok(Batch { features, mask: MaskMatrix::left_padded(time, &valid), labels, sample_refs })
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BatchSet {
    pub batches: Vec<Batch>,
}

impl BatchSet {
    pub fn n_samples(&self) -> usize {
        self.batches.iter().map(Batch::len).sum()
    }

    pub fn feature_width(&self) -> Option<usize> {
        self.batches.first().map(|b| b.features.feature())
    }

    pub fn labels(&self) -> impl Iterator<Item = u8> + '_ {
        self.batches.iter().flat_map(|b| b.labels.iter().copied())
    }
}

fn check_width(encs: &[EncounterSequence]) -> Result<usize> {
    let width = encs.first().map_or(0, EncounterSequence::width);
    if let Some(e) = encs.iter().find(|e| e.width() != width) {
        return Err(shape_err(format!(
            "encounter {:?} has {} features, expected {width}",
            e.encounter_id,
            e.width()
        )));
    }
    Ok(width)
}

fn check_timestamp(timestamp: usize) -> Result<()> {
    if timestamp < 1 {
        return Err(Error::Config("timestamp must be at least 1".into()));
    }
    Ok(())
}

fn slice_rows(m: &Matrix, start: usize, end: usize) -> Matrix {
    let c = m.cols();
    Matrix::from_vec(end - start, c, m.values()[start * c..end * c].to_vec()).expect("in-bounds slice")
}

/// One batch per encounter. Encounters shorter than `timestamp` give a
/// single left-padded sample labelled by their last target; longer ones give
/// `N − timestamp + 1` consecutive slices, each labelled by its last step.
pub fn sliding_window(encs: &[EncounterSequence], timestamp: usize) -> Result<BatchSet> {
    check_timestamp(timestamp)?;
    let width = check_width(encs)?;
    let mut batches = Vec::with_capacity(encs.len());
    for enc in encs {
        let n = enc.len();
        let windows = if n < timestamp {
            vec![(
                enc.features.clone(),
                0,
                enc.targets[n - 1],
                SampleRef { encounter_id: enc.encounter_id.clone(), step: n - 1 },
            )]
        } else {
            (0..=n - timestamp)
                .map(|i| {
                    let end = i + timestamp;
                    (
                        slice_rows(&enc.features, i, end),
                        0,
                        enc.targets[end - 1],
                        SampleRef { encounter_id: enc.encounter_id.clone(), step: end - 1 },
                    )
                })
                .collect()
        };
        batches.push(Batch::from_windows(windows, timestamp, width)?);
    }
    Ok(BatchSet { batches })
}

/// One batch per encounter holding one sample per observation: sample `i`
/// carries the (up to) `timestamp` most recent rows ending at observation `i`.
pub fn dense_sliding_window(encs: &[EncounterSequence], timestamp: usize) -> Result<BatchSet> {
    check_timestamp(timestamp)?;
    let width = check_width(encs)?;
    let mut batches = Vec::with_capacity(encs.len());
    for enc in encs {
        let windows = (0..enc.len())
            .map(|i| {
                let start = (i + 1).saturating_sub(timestamp);
                (
                    slice_rows(&enc.features, start, i + 1),
                    0,
                    enc.targets[i],
                    SampleRef { encounter_id: enc.encounter_id.clone(), step: i },
                )
            })
            .collect();
        batches.push(Batch::from_windows(windows, timestamp, width)?);
    }
    Ok(BatchSet { batches })
}

/// Sorts encounters by length, groups consecutive runs of `batch_size`, pads
/// each group to its own longest member and shuffles the order of the
/// groups with `seed`. Each encounter is one sample labelled by its
/// encounter label.
pub fn smart_batch(encs: &[EncounterSequence], batch_size: usize, seed: u64) -> Result<BatchSet> {
    if batch_size < 1 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let width = check_width(encs)?;
    let mut order: Vec<&EncounterSequence> = encs.iter().collect();
    order.sort_by_key(|e| e.len());
    let mut batches = order
        .chunks(batch_size)
        .map(|group| {
            let time = group.iter().map(|e| e.len()).max().unwrap_or(0);
            let windows = group
                .iter()
                .map(|e| {
                    (
                        e.features.clone(),
                        0,
                        e.encounter_label,
                        SampleRef { encounter_id: e.encounter_id.clone(), step: e.len() - 1 },
                    )
                })
                .collect();
            Batch::from_windows(windows, time, width)
        })
        .collect::<Result<Vec<_>>>()?;
    batches.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(BatchSet { batches })
}

/// Regroups the samples of a fixed-length batch set (sliding or dense
/// window output) into shuffled minibatches of `batch_size`.
pub fn rebatch(set: &BatchSet, batch_size: usize, seed: u64) -> Result<BatchSet> {
    if batch_size < 1 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let Some(first) = set.batches.first() else { return Ok(BatchSet::default()) };
    let (time, width) = (first.features.time(), first.features.feature());
    let mut index: Vec<(usize, usize)> = Vec::with_capacity(set.n_samples());
    for (bi, b) in set.batches.iter().enumerate() {
        if b.features.time() != time || b.features.feature() != width {
            return Err(shape_err(format!(
                "cannot rebatch mixed shapes {:?} and [_, {time}, {width}]",
                b.features.shape()
            )));
        }
        index.extend((0..b.len()).map(|s| (bi, s)));
    }
    index.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let batches = index
        .chunks(batch_size)
        .map(|chunk| {
            let mut features = Tensor3::zeros(chunk.len(), time, width);
            let mut flags = Vec::with_capacity(chunk.len() * time);
            let mut labels = Vec::with_capacity(chunk.len());
            let mut sample_refs = Vec::with_capacity(chunk.len());
            for (k, &(bi, s)) in chunk.iter().enumerate() {
                let src = &set.batches[bi];
                features.sample_mut(k).copy_from_slice(src.features.sample(s));
                flags.extend_from_slice(src.mask.row(s));
                labels.push(src.labels[s]);
                sample_refs.push(src.sample_refs[s].clone());
            }
            Batch { features, mask: MaskMatrix::from_flags(chunk.len(), time, flags).expect("sized"), labels, sample_refs }
        })
        .collect();
    Ok(BatchSet { batches })
}

/// JSON inspection dump of a batch set. Feature payloads are base64 of
/// little-endian f64 in `[batch][time][feature]` order; masks are base64 of
/// one byte per (sample, step), 1 = valid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchDump {
    pub method: String,
    pub n_batches: usize,
    pub n_samples: usize,
    pub batches: Vec<BatchDumpEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchDumpEntry {
    pub shape: [usize; 3],
    pub pad_counts: Vec<usize>,
    pub labels: Vec<u8>,
    pub sample_refs: Vec<SampleRef>,
    pub mask: String,
    pub features: String,
}

impl BatchDump {
    pub fn new(method: &str, set: &BatchSet) -> Self {
        let batches = set
            .batches
            .iter()
            .map(|b| BatchDumpEntry {
                shape: b.features.shape(),
                pad_counts: b.pad_counts(),
                labels: b.labels.clone(),
                sample_refs: b.sample_refs.clone(),
                mask: B64.encode(b.mask.flags().iter().map(|&f| f as u8).collect::<Vec<u8>>()),
                features: B64.encode(b.features.values().iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<u8>>()),
            })
            .collect();
        Self { method: method.to_string(), n_batches: set.batches.len(), n_samples: set.n_samples(), batches }
    }

    pub fn to_batch_set(&self) -> Result<BatchSet> {
        let bad = |m: &str| Error::Checkpoint(format!("batch dump: {m}"));
        let batches = self
            .batches
            .iter()
            .map(|e| {
                let [b, t, f] = e.shape;
                let mask_bytes = B64.decode(&e.mask).map_err(|err| bad(&err.to_string()))?;
                let feat_bytes = B64.decode(&e.features).map_err(|err| bad(&err.to_string()))?;
                if feat_bytes.len() % 8 != 0 {
                    return Err(bad("feature payload is not a whole number of f64"));
                }
                let values = feat_bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                Ok(Batch {
                    features: Tensor3::from_vec(b, t, f, values)?,
                    mask: MaskMatrix::from_flags(b, t, mask_bytes.into_iter().map(|x| x != 0).collect())?,
                    labels: e.labels.clone(),
                    sample_refs: e.sample_refs.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(BatchSet { batches })
    }
}
