//! Paired-segment collections, subject-level splits and the binary format.
//!
//! Layout (little-endian): magic `M2AE`, version `u16 = 1`, segment length
//! `u32`, pair count `u32`, then per pair `subject_id u32`,
//! `segment_index u32`, ECG samples `f32 × L`, PPG samples `f32 × L`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;

use super::synth::{
    generate_subject, synthesize_pair, ProfileOverrides, SubjectProfile, DEFAULT_FS, DEFAULT_SEGMENT_LEN,
};
use super::{Modality, PairedSegment, SignalSegment};
use crate::binio::Cursor;
use crate::error::{Error, Result};
use crate::rng::{mix_seed, stream, tag};

pub const DATASET_MAGIC: [u8; 4] = *b"M2AE";
pub const DATASET_VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            _ => Err(Error::InvalidInput(format!("unknown split `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitFractions {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self { train: 0.8, valid: 0.1, test: 0.1 }
    }
}

pub type SplitAssignment = BTreeMap<u32, Split>;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub segment_len: usize,
    pub pairs: Vec<PairedSegment>,
    /// Subject → split, once [`split_by_subject`] has run.
    pub split: Option<SplitAssignment>,
}

impl Dataset {
    pub fn empty(segment_len: usize) -> Self {
        Self { segment_len, pairs: Vec::new(), split: None }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Distinct subject ids in ascending order.
    pub fn subjects(&self) -> Vec<u32> {
        self.pairs.iter().map(PairedSegment::subject_id).collect::<BTreeSet<_>>().into_iter().collect()
    }

    pub fn split_of(&self, subject_id: u32) -> Option<Split> {
        self.split.as_ref().and_then(|s| s.get(&subject_id).copied())
    }

    /// Indices into `pairs` belonging to `split`, in dataset order.
    pub fn indices_in(&self, split: Split) -> Vec<usize> {
        (0..self.pairs.len()).filter(|&i| self.split_of(self.pairs[i].subject_id()) == Some(split)).collect()
    }

    /// Indices into `pairs` of every segment of `subject_id`.
    pub fn subject_indices(&self, subject_id: u32) -> Vec<usize> {
        (0..self.pairs.len()).filter(|&i| self.pairs[i].subject_id() == subject_id).collect()
    }

    /// A copy holding only the pairs of one split, keeping the assignment.
    pub fn subset(&self, split: Split) -> Dataset {
        Dataset {
            segment_len: self.segment_len,
            pairs: self.indices_in(split).into_iter().map(|i| self.pairs[i].clone()).collect(),
            split: self.split.clone(),
        }
    }

    /// Synthesizes `pairs_per_subject` segments for each profile.
    pub fn from_profiles(
        profiles: &[(u32, SubjectProfile)],
        pairs_per_subject: u32,
        segment_len: usize,
        fs: f64,
    ) -> Result<Self> {
        let mut pairs = Vec::with_capacity(profiles.len() * pairs_per_subject as usize);
        for (subject_id, profile) in profiles {
            for segment_index in 0..pairs_per_subject {
                pairs.push(synthesize_pair(profile, *subject_id, segment_index, segment_len, fs)?);
            }
        }
        Ok(Self { segment_len, pairs, split: None })
    }
}

/// Synthetic dataset of `subjects × pairs_per_subject` default-length pairs.
/// Subject ids are `0..subjects`.
pub fn generate_dataset(subjects: u32, pairs_per_subject: u32, seed: u64) -> Result<Dataset> {
    let profiles: Vec<(u32, SubjectProfile)> = (0..subjects)
        .map(|id| (id, generate_subject(mix_seed(seed, &[u64::from(id)]), &ProfileOverrides::default())))
        .collect();
    Dataset::from_profiles(&profiles, pairs_per_subject, DEFAULT_SEGMENT_LEN, DEFAULT_FS)
}

/// Shuffles subjects with `seed` and assigns them to train/valid/test.
/// Counts are `round(f·n)` for train and valid; test takes the remainder.
pub fn split_by_subject(dataset: &Dataset, fractions: SplitFractions, seed: u64) -> Result<Dataset> {
    let f = [fractions.train, fractions.valid, fractions.test];
    if f.iter().any(|v| !(*v >= 0.0)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidFractions(f));
    }
    let mut subjects = dataset.subjects();
    let n = subjects.len();
    let n_train = (fractions.train * n as f64).round() as usize;
    let n_valid = (fractions.valid * n as f64).round() as usize;
    let n_test = n.checked_sub(n_train + n_valid).ok_or(Error::TooFewSubjects { subjects: n, split: "test" })?;
    for (count, frac, name) in [(n_train, f[0], "train"), (n_valid, f[1], "valid"), (n_test, f[2], "test")] {
        if count == 0 && frac > 0.0 {
            return Err(Error::TooFewSubjects { subjects: n, split: name });
        }
    }
    subjects.shuffle(&mut stream(seed, &[tag::SPLIT]));
    let assignment = subjects
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let split = if i < n_train {
                Split::Train
            } else if i < n_train + n_valid {
                Split::Valid
            } else {
                Split::Test
            };
            (s, split)
        })
        .collect();
    Ok(Dataset { split: Some(assignment), ..dataset.clone() })
}

pub fn write_dataset(mut w: impl Write, dataset: &Dataset) -> Result<()> {
    let len = dataset.segment_len;
    let len_u32 = u32::try_from(len).map_err(|_| Error::InvalidInput("segment length exceeds u32".into()))?;
    let count = u32::try_from(dataset.pairs.len()).map_err(|_| Error::InvalidInput("too many pairs".into()))?;
    let mut buf = Vec::with_capacity(14 + dataset.pairs.len() * (8 + 8 * len));
    buf.extend_from_slice(&DATASET_MAGIC);
    buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    buf.extend_from_slice(&len_u32.to_le_bytes());
    buf.extend_from_slice(&count.to_le_bytes());
    for pair in &dataset.pairs {
        if pair.ecg.len() != len || pair.ppg.len() != len {
            return Err(Error::InvalidInput(format!(
                "pair ({}, {}) does not have {len} samples per modality",
                pair.subject_id(),
                pair.segment_index()
            )));
        }
        buf.extend_from_slice(&pair.subject_id().to_le_bytes());
        buf.extend_from_slice(&pair.segment_index().to_le_bytes());
        for v in pair.ecg.samples.iter().chain(&pair.ppg.samples) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_dataset(mut r: impl Read) -> Result<Dataset> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut c = Cursor::new(&bytes);
    let magic = c.array::<4>("magic")?;
    if magic != DATASET_MAGIC {
        return Err(Error::BadMagic { expected: DATASET_MAGIC, found: magic });
    }
    let version = c.u16("version")?;
    if version != DATASET_VERSION {
        return Err(Error::VersionMismatch { found: version, expected: DATASET_VERSION });
    }
    let len = c.u32("segment length")? as usize;
    let count = c.u32("pair count")? as usize;
    let mut pairs = Vec::with_capacity(count.min(c.remaining() / (8 + 8 * len.max(1))));
    let read_samples = |c: &mut Cursor<'_>| -> Result<Vec<f32>> {
        let raw = c.take(4 * len, "samples")?;
        Ok(raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect())
    };
    for _ in 0..count {
        let subject_id = c.u32("subject id")?;
        let segment_index = c.u32("segment index")?;
        let ecg = read_samples(&mut c)?;
        let ppg = read_samples(&mut c)?;
        if ecg.iter().chain(&ppg).any(|v| !v.is_finite()) {
            return Err(Error::Malformed(format!("non-finite sample in pair ({subject_id}, {segment_index})")));
        }
        pairs.push(PairedSegment {
            ecg: SignalSegment { modality: Modality::Ecg, subject_id, segment_index, samples: ecg },
            ppg: SignalSegment { modality: Modality::Ppg, subject_id, segment_index, samples: ppg },
        });
    }
    if c.remaining() != 0 {
        return Err(Error::Malformed(format!("{} trailing bytes after {count} pairs", c.remaining())));
    }
    Ok(Dataset { segment_len: len, pairs, split: None })
}

pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_dataset(&mut buf, dataset)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    read_dataset(fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(subjects: u32) -> Dataset {
        let profiles: Vec<_> =
            (0..subjects).map(|id| (id, generate_subject(u64::from(id), &ProfileOverrides::default()))).collect();
        Dataset::from_profiles(&profiles, 2, 128, 12.8).unwrap()
    }

    #[test]
    fn ten_subjects_split_eight_one_one() {
        let d = split_by_subject(&tiny(10), SplitFractions::default(), 3).unwrap();
        let counts = |s| d.split.as_ref().unwrap().values().filter(|&&v| v == s).count();
        assert_eq!((counts(Split::Train), counts(Split::Valid), counts(Split::Test)), (8, 1, 1));
    }

    #[test]
    fn same_seed_same_assignment() {
        let d = tiny(10);
        let a = split_by_subject(&d, SplitFractions::default(), 11).unwrap();
        let b = split_by_subject(&d, SplitFractions::default(), 11).unwrap();
        assert_eq!(a.split, b.split);
    }

    #[test]
    fn one_subject_cannot_be_split() {
        assert!(matches!(split_by_subject(&tiny(1), SplitFractions::default(), 0), Err(Error::TooFewSubjects { .. })));
    }

    #[test]
    fn fractions_must_sum_to_one() {
        let bad = SplitFractions { train: 0.8, valid: 0.1, test: 0.2 };
        assert!(matches!(split_by_subject(&tiny(10), bad, 0), Err(Error::InvalidFractions(_))));
    }

    #[test]
    fn round_trip_is_bitwise() {
        let d = tiny(3);
        let mut buf = Vec::new();
        write_dataset(&mut buf, &d).unwrap();
        let back = read_dataset(buf.as_slice()).unwrap();
        assert_eq!(back.pairs.len(), d.pairs.len());
        for (a, b) in d.pairs.iter().zip(&back.pairs) {
            let bits = |s: &SignalSegment| s.samples.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.ecg), bits(&b.ecg));
            assert_eq!(bits(&a.ppg), bits(&b.ppg));
        }
    }

    #[test]
    fn corrupt_headers_are_rejected() {
        let mut buf = Vec::new();
        write_dataset(&mut buf, &tiny(1)).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_dataset(bad.as_slice()), Err(Error::BadMagic { .. })));
        let mut bad = buf.clone();
        bad[4] = 2;
        assert!(matches!(read_dataset(bad.as_slice()), Err(Error::VersionMismatch { found: 2, .. })));
        assert!(matches!(read_dataset(&buf[..buf.len() - 3]), Err(Error::TruncatedFile(_))));
    }

    #[test]
    fn empty_dataset_round_trips() {
        let mut buf = Vec::new();
        write_dataset(&mut buf, &Dataset::empty(2048)).unwrap();
        assert_eq!(buf.len(), 14);
        let back = read_dataset(buf.as_slice()).unwrap();
        assert!(back.is_empty());
        assert_eq!(back.segment_len, 2048);
    }
}
