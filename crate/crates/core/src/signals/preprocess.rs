use crate::error::{Error, Result};

/// Zero mean, unit population standard deviation.
pub fn zscore(samples: &[f64]) -> Result<Vec<f64>> {
    if samples.len() < 2 {
        return Err(Error::SignalTooShort { len: samples.len(), min: 2 });
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std >= 1e-12) {
        return Err(Error::DegenerateSignal);
    }
    Ok(samples.iter().map(|v| (v - mean) / std).collect())
}

/// Linear interpolation onto `target_len` evenly spaced points spanning
/// `[0, len − 1]`. Both endpoints are reproduced exactly.
pub fn resample(samples: &[f64], target_len: usize) -> Result<Vec<f64>> {
    if samples.len() < 2 {
        return Err(Error::SignalTooShort { len: samples.len(), min: 2 });
    }
    if target_len < 2 {
        return Err(Error::InvalidInput(format!("target length {target_len} is below 2")));
    }
    if target_len == samples.len() {
        return Ok(samples.to_vec());
    }
    let last = samples.len() - 1;
    let step = last as f64 / (target_len - 1) as f64;
    let mut out = Vec::with_capacity(target_len);
    for j in 0..target_len {
        if j == target_len - 1 {
            out.push(samples[last]);
            continue;
        }
        let t = j as f64 * step;
        let i = (t.floor() as usize).min(last - 1);
        let frac = t - i as f64;
        out.push(samples[i] + frac * (samples[i + 1] - samples[i]));
    }
    Ok(out)
}

/// Local maxima at or above `min_height`, at least `min_distance` samples
/// apart; taller peaks win conflicts. Returned in ascending index order.
pub fn detect_peaks(samples: &[f64], min_distance: usize, min_height: f64) -> Vec<usize> {
    let n = samples.len();
    if n < 3 {
        return Vec::new();
    }
    let mut candidates: Vec<usize> = (1..n - 1)
        .filter(|&i| samples[i] >= min_height && samples[i] >= samples[i - 1] && samples[i] > samples[i + 1])
        .collect();
    candidates.sort_by(|&a, &b| samples[b].total_cmp(&samples[a]).then(a.cmp(&b)));
    let mut accepted: Vec<usize> = Vec::new();
    for c in candidates {
        if accepted.iter().all(|&a| a.abs_diff(c) >= min_distance) {
            accepted.push(c);
        }
    }
    accepted.sort_unstable();
    accepted
}
