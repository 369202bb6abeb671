//! Paired ECG/PPG segments: synthetic generation, preprocessing, subject
//! splits and the binary dataset format.

mod dataset;
mod preprocess;
mod synth;

pub use dataset::{
    generate_dataset, load_dataset, read_dataset, save_dataset, split_by_subject, write_dataset, Dataset, Split,
    SplitAssignment, SplitFractions, DATASET_MAGIC, DATASET_VERSION,
};
pub use preprocess::{detect_peaks, resample, zscore};
pub use synth::{
    generate_subject, synthesize_pair, Bump, EcgMorphology, ProfileOverrides, SubjectProfile, DEFAULT_FS,
    DEFAULT_SEGMENT_LEN, HEART_RATE_RANGE, PPG_DELAY_RANGE,
};

use std::fmt;
use std::str::FromStr;

use crate::error::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Ecg,
    Ppg,
}

impl Modality {
    pub const BOTH: [Modality; 2] = [Modality::Ecg, Modality::Ppg];

    /// Prefix of this modality's parameter names.
    pub fn prefix(self) -> &'static str {
        match self {
            Modality::Ecg => "ecg",
            Modality::Ppg => "ppg",
        }
    }

    pub fn other(self) -> Modality {
        match self {
            Modality::Ecg => Modality::Ppg,
            Modality::Ppg => Modality::Ecg,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.prefix())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s.to_ascii_lowercase().as_str() {
            "ecg" => Ok(Modality::Ecg),
            "ppg" => Ok(Modality::Ppg),
            _ => Err(Error::InvalidInput(format!("unknown modality `{s}`"))),
        }
    }
}

/// One z-scored waveform of one modality. Samples are stored at `f32`
/// precision so the on-disk format round-trips exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct SignalSegment {
    pub modality: Modality,
    pub subject_id: u32,
    pub segment_index: u32,
    pub samples: Vec<f32>,
}

impl SignalSegment {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples_f64(&self) -> Vec<f64> {
        self.samples.iter().map(|&v| f64::from(v)).collect()
    }

    /// Builds a segment from `f64` samples, rounding to `f32`.
    pub fn from_f64(modality: Modality, subject_id: u32, segment_index: u32, samples: &[f64]) -> Self {
        Self { modality, subject_id, segment_index, samples: samples.iter().map(|&v| v as f32).collect() }
    }
}

/// Simultaneously acquired ECG and PPG segments of one subject.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedSegment {
    pub ecg: SignalSegment,
    pub ppg: SignalSegment,
}

impl PairedSegment {
    pub fn subject_id(&self) -> u32 {
        self.ecg.subject_id
    }

    pub fn segment_index(&self) -> u32 {
        self.ecg.segment_index
    }

    pub fn get(&self, modality: Modality) -> &SignalSegment {
        match modality {
            Modality::Ecg => &self.ecg,
            Modality::Ppg => &self.ppg,
        }
    }
}
