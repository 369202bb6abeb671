//! Synthetic paired ECG/PPG generator.
//!
//! ECG is a periodic sum of three Gaussian bumps (P, QRS, T) per beat. PPG is
//! a half-sine pulse train at the same rate, delayed by the subject's pulse
//! transit time and lightly low-pass smoothed. Both carry white noise and are
//! z-scored. A subject profile drives both modalities, so heart rate and
//! delay are shared cross-modal structure.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::preprocess::zscore;
use super::{Modality, PairedSegment, SignalSegment};
use crate::error::{Error, Result};
use crate::rng::{stream, tag};

pub const DEFAULT_SEGMENT_LEN: usize = 2048;
/// 10 s × 204.8 Hz = 2048 samples.
pub const DEFAULT_FS: f64 = 204.8;
pub const SEGMENT_SECONDS: f64 = 10.0;
pub const HEART_RATE_RANGE: (f64, f64) = (50.0, 110.0);
pub const PPG_DELAY_RANGE: (f64, f64) = (0.15, 0.35);
const NOISE_STD_RANGE: (f64, f64) = (0.0, 0.03);

const P_AMPLITUDE: (f64, f64) = (0.10, 0.25);
const P_WIDTH: (f64, f64) = (0.020, 0.035);
const QRS_AMPLITUDE: (f64, f64) = (0.8, 1.2);
const QRS_WIDTH: (f64, f64) = (0.015, 0.030);
const T_AMPLITUDE: (f64, f64) = (0.20, 0.40);
const T_WIDTH: (f64, f64) = (0.040, 0.070);

/// P and T wave offsets from the R peak, in units of `sqrt(RR)` seconds.
const P_OFFSET: f64 = -0.16;
const T_OFFSET: f64 = 0.28;
/// Systolic pulse duration as a fraction of the beat period.
const PULSE_FRACTION: f64 = 0.45;
/// Standard deviation of the PPG smoothing kernel, in samples.
const PPG_SMOOTHING_SAMPLES: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bump {
    pub amplitude: f64,
    /// Gaussian standard deviation in seconds.
    pub width_s: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EcgMorphology {
    pub p: Bump,
    pub qrs: Bump,
    pub t: Bump,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SubjectProfile {
    /// Seed the profile was drawn from; also seeds per-segment phase and noise.
    pub seed: u64,
    pub heart_rate_bpm: f64,
    pub ecg_morphology: EcgMorphology,
    pub ppg_delay_s: f64,
    pub noise_std: f64,
}

/// Fields to pin when drawing a profile; `None` fields are drawn at random.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ProfileOverrides {
    pub heart_rate_bpm: Option<f64>,
    pub ecg_morphology: Option<EcgMorphology>,
    pub ppg_delay_s: Option<f64>,
    pub noise_std: Option<f64>,
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    rng.random_range(lo..=hi)
}

/// Draws a subject profile. Every field is always drawn, so pinning one field
/// leaves the others unchanged; pinned heart rate and delay are clamped to
/// their ranges.
pub fn generate_subject(seed: u64, overrides: &ProfileOverrides) -> SubjectProfile {
    let mut rng = stream(seed, &[tag::SUBJECT]);
    let heart_rate_bpm = uniform(&mut rng, HEART_RATE_RANGE);
    let mut bump = |amp, width| Bump { amplitude: uniform(&mut rng, amp), width_s: uniform(&mut rng, width) };
    let ecg_morphology = EcgMorphology {
        p: bump(P_AMPLITUDE, P_WIDTH),
        qrs: bump(QRS_AMPLITUDE, QRS_WIDTH),
        t: bump(T_AMPLITUDE, T_WIDTH),
    };
    let ppg_delay_s = uniform(&mut rng, PPG_DELAY_RANGE);
    let noise_std = uniform(&mut rng, NOISE_STD_RANGE);
    SubjectProfile {
        seed,
        heart_rate_bpm: overrides
            .heart_rate_bpm
            .map_or(heart_rate_bpm, |v| v.clamp(HEART_RATE_RANGE.0, HEART_RATE_RANGE.1)),
        ecg_morphology: overrides.ecg_morphology.unwrap_or(ecg_morphology),
        ppg_delay_s: overrides.ppg_delay_s.map_or(ppg_delay_s, |v| v.clamp(PPG_DELAY_RANGE.0, PPG_DELAY_RANGE.1)),
        noise_std: overrides.noise_std.map_or(noise_std, |v| v.max(0.0)),
    }
}

impl SubjectProfile {
    pub fn period_s(&self) -> f64 {
        60.0 / self.heart_rate_bpm
    }

    fn validate(&self) -> Result<()> {
        let m = &self.ecg_morphology;
        for (name, b) in [("P", m.p), ("QRS", m.qrs), ("T", m.t)] {
            if !(b.width_s > 0.0) {
                return Err(Error::DegenerateProfile(format!("{name} width {} is not positive", b.width_s)));
            }
        }
        if !(self.heart_rate_bpm > 0.0) {
            return Err(Error::DegenerateProfile(format!("heart rate {} is not positive", self.heart_rate_bpm)));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::DegenerateProfile(format!("noise std {} is negative", self.noise_std)));
        }
        Ok(())
    }

    /// R-peak times (seconds) of a segment, including beats just outside
    /// `[0, duration)` whose waves spill into it.
    pub fn beat_times(&self, segment_index: u32, duration_s: f64) -> Vec<f64> {
        let period = self.period_s();
        let mut rng = stream(self.seed, &[tag::SEGMENT, u64::from(segment_index), 0]);
        let phase = rng.random_range(0.0..period);
        let mut beats = Vec::new();
        let mut t = phase - 2.0 * period;
        while t < duration_s + 2.0 * period {
            beats.push(t);
            t += period;
        }
        beats
    }
}

fn gaussian(t: f64, center: f64, width: f64) -> f64 {
    let z = (t - center) / width;
    (-0.5 * z * z).exp()
}

fn smooth(samples: &[f64], sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|k| gaussian(k as f64, 0.0, sigma)).collect();
    let n = samples.len() as isize;
    (0..n)
        .map(|i| {
            let (mut acc, mut weight) = (0.0, 0.0);
            for (j, w) in kernel.iter().enumerate() {
                let src = i + j as isize - radius;
                if (0..n).contains(&src) {
                    acc += w * samples[src as usize];
                    weight += w;
                }
            }
            acc / weight
        })
        .collect()
}

/// Generates one paired segment of `len` samples at `fs` Hz. The segment
/// must span 10 s.
pub fn synthesize_pair(
    profile: &SubjectProfile,
    subject_id: u32,
    segment_index: u32,
    len: usize,
    fs: f64,
) -> Result<PairedSegment> {
    profile.validate()?;
    let duration = len as f64 / fs;
    if len < 2 || (duration - SEGMENT_SECONDS).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!("{len} samples at {fs} Hz do not span {SEGMENT_SECONDS} s")));
    }
    let beats = profile.beat_times(segment_index, duration);
    let period = profile.period_s();
    let m = &profile.ecg_morphology;
    let root_period = period.sqrt();
    let waves = [(m.p, P_OFFSET * root_period), (m.qrs, 0.0), (m.t, T_OFFSET * root_period)];
    let pulse_len = PULSE_FRACTION * period;

    let mut ecg = vec![0.0; len];
    let mut ppg = vec![0.0; len];
    for (i, (e, p)) in ecg.iter_mut().zip(ppg.iter_mut()).enumerate() {
        let t = i as f64 / fs;
        for &r in &beats {
            for (bump, offset) in &waves {
                *e += bump.amplitude * gaussian(t, r + offset, bump.width_s);
            }
            let u = t - r - profile.ppg_delay_s;
            if (0.0..=pulse_len).contains(&u) {
                *p += (std::f64::consts::PI * u / pulse_len).sin();
            }
        }
    }
    let mut ppg = smooth(&ppg, PPG_SMOOTHING_SAMPLES);

    if profile.noise_std > 0.0 {
        let normal = Normal::new(0.0, profile.noise_std).expect("validated noise std");
        let mut rng = stream(profile.seed, &[tag::SEGMENT, u64::from(segment_index), 1]);
        for v in ecg.iter_mut().chain(ppg.iter_mut()) {
            *v += normal.sample(&mut rng);
        }
    }

    let ecg = zscore(&ecg)?;
    let ppg = zscore(&ppg)?;
    Ok(PairedSegment {
        ecg: SignalSegment::from_f64(Modality::Ecg, subject_id, segment_index, &ecg),
        ppg: SignalSegment::from_f64(Modality::Ppg, subject_id, segment_index, &ppg),
    })
}
