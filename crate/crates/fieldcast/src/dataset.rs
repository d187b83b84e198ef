//! Dataset assembly: chronological splits, normalization statistics, and
//! manifest-driven loading.

use std::path::Path;

use crate::error::{Error, Result};
use crate::field::{ScalarField, Sequence};
use crate::io::{self, ManifestEntry, NormStats, Split};

/// Fractions of the dataset assigned to train/val/test.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.85,
            val: 0.05,
            test: 0.10,
        }
    }
}

impl SplitFractions {
    fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::config("split fractions must be finite and non-negative"));
        }
        let sum = self.train + self.val + self.test;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!(
                "split fractions must sum to 1, got {sum}"
            )));
        }
        Ok(())
    }
}

/// Sequence counts per split: train and val take the floor of their share,
/// test takes the remainder.
///
/// Degenerate rule: when `floor(n * train)` is zero the dataset is too small
/// to split and every sequence goes to train, so a singleton dataset yields
/// `(1, 0, 0)`.
pub fn split_dataset(n: usize, fractions: SplitFractions) -> Result<(usize, usize, usize)> {
    fractions.validate()?;
    let train = (n as f64 * fractions.train).floor() as usize;
    if n > 0 && train == 0 {
        return Ok((n, 0, 0));
    }
    let val = (n as f64 * fractions.val).floor() as usize;
    let test = n - train - val;
    Ok((train, val, test))
}

/// Assigns splits chronologically: entries are ordered by `start_timestamp`
/// (ties broken by path for determinism) and the earliest sequences become
/// the training split, then validation, then test.
pub fn assign_splits(
    entries: &mut [ManifestEntry],
    fractions: SplitFractions,
) -> Result<(usize, usize, usize)> {
    let counts = split_dataset(entries.len(), fractions)?;
    entries.sort_by(|a, b| {
        a.start_timestamp
            .cmp(&b.start_timestamp)
            .then_with(|| a.path.cmp(&b.path))
    });
    for (i, e) in entries.iter_mut().enumerate() {
        e.split = if i < counts.0 {
            Split::Train
        } else if i < counts.0 + counts.1 {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(counts)
}

/// Mean/std/min/max over every pixel of the given sequences. The caller
/// passes the training split only; statistics must never see validation or
/// test data.
pub fn compute_stats<'a>(sequences: impl IntoIterator<Item = &'a Sequence>) -> Result<NormStats> {
    let mut count = 0usize;
    let mut mean = 0.0f64;
    let mut m2 = 0.0f64;
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for seq in sequences {
        for frame in seq.frames() {
            for &v in frame.data() {
                count += 1;
                let delta = v - mean;
                mean += delta / count as f64;
                m2 += delta * (v - mean);
                min = min.min(v);
                max = max.max(v);
            }
        }
    }
    if count == 0 {
        return Err(Error::data("cannot compute stats of an empty split"));
    }
    let std = (m2 / count as f64).sqrt();
    Ok(NormStats {
        mean,
        std,
        min,
        max,
    })
}

/// `(x - mean) / std` applied per pixel. Errors when `std` is zero.
pub fn normalize(frame: &ScalarField, stats: &NormStats) -> Result<ScalarField> {
    if stats.std == 0.0 {
        return Err(Error::data("cannot normalize with zero std"));
    }
    let (h, w) = frame.shape();
    let data = frame
        .data()
        .iter()
        .map(|&v| (v - stats.mean) / stats.std)
        .collect();
    ScalarField::from_vec(h, w, data)
}

/// Inverse of [`normalize`].
pub fn denormalize(frame: &ScalarField, stats: &NormStats) -> Result<ScalarField> {
    let (h, w) = frame.shape();
    let data = frame
        .data()
        .iter()
        .map(|&v| v * stats.std + stats.mean)
        .collect();
    ScalarField::from_vec(h, w, data)
}

/// Applies [`normalize`] to every frame of a sequence.
pub fn normalize_sequence(seq: &Sequence, stats: &NormStats) -> Result<Sequence> {
    let frames = seq
        .frames()
        .iter()
        .map(|f| normalize(f, stats))
        .collect::<Result<Vec<_>>>()?;
    Sequence::new(frames, seq.step_hours())
}

/// A manifest entry together with its loaded frames.
#[derive(Clone, Debug)]
pub struct DatasetRecord {
    pub entry: ManifestEntry,
    pub sequence: Sequence,
}

/// All records of a manifest, loaded into memory.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub records: Vec<DatasetRecord>,
}

impl Dataset {
    /// Loads every record of `manifest_path`; relative FGRD paths resolve
    /// against the manifest's directory.
    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Dataset> {
        let manifest_path = manifest_path.as_ref();
        let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
        let entries = io::read_manifest(manifest_path)?;
        let mut records = Vec::with_capacity(entries.len());
        for entry in entries {
            let path = base.join(&entry.path);
            let sequence = io::load_field(&path)?;
            records.push(DatasetRecord { entry, sequence });
        }
        Ok(Dataset { records })
    }

    /// Records belonging to one split, in manifest order.
    pub fn split(&self, split: Split) -> Vec<&DatasetRecord> {
        self.records
            .iter()
            .filter(|r| r.entry.split == split)
            .collect()
    }

    /// Sequences of one split, in manifest order.
    pub fn split_sequences(&self, split: Split) -> Vec<&Sequence> {
        self.records
            .iter()
            .filter(|r| r.entry.split == split)
            .map(|r| &r.sequence)
            .collect()
    }

    /// Training-split statistics.
    pub fn train_stats(&self) -> Result<NormStats> {
        compute_stats(self.split_sequences(Split::Train).into_iter())
    }
}
