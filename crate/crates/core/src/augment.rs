//! Noise-plus-time-warp augmentation and same-subject view selection for
//! contrastive positives.

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::{mix_seed, stream, tag};
use crate::signals::{zscore, Dataset, Modality, PairedSegment, SignalSegment};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Standard deviation of each cumulative warp step.
    pub warp_step_std: f64,
    /// White-noise standard deviation, in z-scored units.
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { warp_step_std: 0.2, noise_std: 0.05, seed: 0 }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.warp_step_std > 0.0 && self.warp_step_std.is_finite()) {
            return Err(Error::InvalidValue {
                key: "augment.warp_step_std".into(),
                reason: format!("{} is not positive", self.warp_step_std),
            });
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::InvalidValue {
                key: "augment.noise_std".into(),
                reason: format!("{} is negative", self.noise_std),
            });
        }
        Ok(())
    }

    fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }
}

/// Cumulative sum of `N(0, step_std)` steps, min-max normalized to `[0, 1]`.
pub fn warp_curve(len: usize, step_std: f64, rng: &mut impl Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, step_std).expect("validated step std");
    let mut acc = 0.0;
    let curve: Vec<f64> = (0..len)
        .map(|_| {
            acc += normal.sample(rng);
            acc
        })
        .collect();
    let lo = curve.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = curve.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.0; len];
    }
    curve.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

fn interpolate_clamped(samples: &[f64], t: f64) -> f64 {
    let last = samples.len() - 1;
    let t = t.clamp(0.0, last as f64);
    let i = (t.floor() as usize).min(last.saturating_sub(1));
    let frac = t - i as f64;
    if frac == 0.0 || i == last {
        samples[i]
    } else {
        samples[i] + frac * (samples[i + 1] - samples[i])
    }
}

/// Adds white noise, resamples at `i + curve[i]` with edge clamping, then
/// z-scores.
pub fn augment_signal(samples: &[f64], config: &AugmentConfig) -> Result<Vec<f64>> {
    config.validate()?;
    if samples.len() < 2 {
        return Err(Error::SignalTooShort { len: samples.len(), min: 2 });
    }
    let mut rng = stream(config.seed, &[tag::VIEWS]);
    let curve = warp_curve(samples.len(), config.warp_step_std, &mut rng);
    let noisy: Vec<f64> = if config.noise_std > 0.0 {
        let normal = Normal::new(0.0, config.noise_std).expect("validated noise std");
        samples.iter().map(|v| v + normal.sample(&mut rng)).collect()
    } else {
        samples.to_vec()
    };
    let warped: Vec<f64> = curve.iter().enumerate().map(|(i, c)| interpolate_clamped(&noisy, i as f64 + c)).collect();
    zscore(&warped)
}

/// Two distinct same-subject segment ids drawn uniformly at random, or
/// `(anchor, anchor)` when the subject has a single segment.
pub fn select_view_indices(subject_segments: &[u32], anchor_id: u32, seed: u64) -> Result<(u32, u32)> {
    if !subject_segments.contains(&anchor_id) {
        return Err(Error::InvalidInput(format!("anchor segment {anchor_id} is not among the subject's segments")));
    }
    if subject_segments.len() < 2 {
        return Ok((anchor_id, anchor_id));
    }
    let picked = index::sample(&mut stream(seed, &[tag::VIEWS]), subject_segments.len(), 2);
    Ok((subject_segments[picked.index(0)], subject_segments[picked.index(1)]))
}

/// Augmented views of one anchor pair.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedViews {
    pub ecg: SignalSegment,
    pub ppg: SignalSegment,
    /// Whether each view was produced by [`augment_signal`] rather than
    /// taken verbatim from the dataset.
    pub ecg_synthesized: bool,
    pub ppg_synthesized: bool,
}

impl AugmentedViews {
    pub fn get(&self, modality: Modality) -> &SignalSegment {
        match modality {
            Modality::Ecg => &self.ecg,
            Modality::Ppg => &self.ppg,
        }
    }
}

/// Builds the ECG and PPG positive views of `pair`.
///
/// Each modality draws its own pair of same-subject ids and uses the first id
/// that differs from the anchor. If neither modality found another segment,
/// both views are synthesized from the anchor. If both picked the same other
/// segment, a fair coin picks one modality whose view is synthesized from
/// that segment, so the two views are not a simultaneous pair. Otherwise the
/// selected segments are used unmodified.
pub fn make_views(pair: &PairedSegment, dataset: &Dataset, config: &AugmentConfig) -> Result<AugmentedViews> {
    config.validate()?;
    let subject = pair.subject_id();
    let anchor = pair.segment_index();
    let members = dataset.subject_indices(subject);
    let ids: Vec<u32> = members.iter().map(|&i| dataset.pairs[i].segment_index()).collect();
    let lookup = |id: u32| -> &PairedSegment {
        if id == anchor {
            return pair;
        }
        let pos = ids.iter().position(|&x| x == id).expect("id drawn from subject list");
        &dataset.pairs[members[pos]]
    };
    let view_id = |modality: Modality| -> Result<u32> {
        let (a, b) = select_view_indices(&ids, anchor, mix_seed(config.seed, &[modality as u64]))?;
        Ok(if a != anchor { a } else { b })
    };
    let (ecg_id, ppg_id) =
        if ids.contains(&anchor) { (view_id(Modality::Ecg)?, view_id(Modality::Ppg)?) } else { (anchor, anchor) };

    let synth = |modality: Modality, source: &PairedSegment| -> Result<SignalSegment> {
        let seg = source.get(modality);
        let cfg = config.with_seed(mix_seed(config.seed, &[2 + modality as u64]));
        let out = augment_signal(&seg.samples_f64(), &cfg)?;
        Ok(SignalSegment::from_f64(modality, subject, seg.segment_index, &out))
    };

    let (synth_ecg, synth_ppg) = if ecg_id == anchor && ppg_id == anchor {
        (true, true)
    } else if ecg_id == ppg_id {
        let coin = stream(config.seed, &[tag::VIEWS, 4]).random_bool(0.5);
        (coin, !coin)
    } else {
        (ecg_id == anchor, ppg_id == anchor)
    };
    let ecg_src = lookup(ecg_id);
    let ppg_src = lookup(ppg_id);
    Ok(AugmentedViews {
        ecg: if synth_ecg { synth(Modality::Ecg, ecg_src)? } else { ecg_src.ecg.clone() },
        ppg: if synth_ppg { synth(Modality::Ppg, ppg_src)? } else { ppg_src.ppg.clone() },
        ecg_synthesized: synth_ecg,
        ppg_synthesized: synth_ppg,
    })
}
