//! Autocorrelation pitch estimation, used only when analysing waveforms without
//! ground-truth F0.

use super::AnalysisConfig;
use crate::error::{Error, Result};

pub const F0_MIN: f64 = 60.0;
pub const F0_MAX: f64 = 400.0;
/// Peak normalized autocorrelation below which a frame is unvoiced.
pub const VOICING_THRESHOLD: f64 = 0.3;
/// Pitch analysis window; longer than the spectral frame so the longest lag still has
/// enough overlap.
pub const PITCH_WINDOW_SECONDS: f64 = 0.04;

/// Per-frame F0 in Hz (0 = unvoiced), aligned with the centered STFT frames.
pub fn estimate_f0_autocorr(x: &[f64], cfg: &AnalysisConfig, f0_min: f64, f0_max: f64) -> Result<Vec<f64>> {
    cfg.validate()?;
    if !(f0_min > 0.0 && f0_max > f0_min) {
        return Err(Error::Config(format!("invalid F0 range {f0_min}..{f0_max}")));
    }
    let sr = cfg.sample_rate as f64;
    let min_lag = (sr / f0_max).floor().max(2.0) as usize;
    let max_lag = (sr / f0_min).ceil() as usize;
    let window = ((PITCH_WINDOW_SECONDS * sr) as usize).max(max_lag + min_lag + 2);
    let half = window / 2;
    let frames = cfg.num_frames(x.len());
    let mut seg = vec![0.0; window];
    let mut r = vec![0.0; max_lag + 2];
    let mut out = Vec::with_capacity(frames);
    for t in 0..frames {
        let center = (t * cfg.frame_shift) as isize;
        for (i, s) in seg.iter_mut().enumerate() {
            let idx = center - half as isize + i as isize;
            *s = if idx >= 0 && (idx as usize) < x.len() { x[idx as usize] } else { 0.0 };
        }
        let mean = seg.iter().sum::<f64>() / window as f64;
        seg.iter_mut().for_each(|s| *s -= mean);
        let mut prefix = vec![0.0; window + 1];
        for i in 0..window {
            prefix[i + 1] = prefix[i] + seg[i] * seg[i];
        }
        for lag in min_lag - 1..=(max_lag + 1).min(window - 1) {
            let n = window - lag;
            let num: f64 = (0..n).map(|i| seg[i] * seg[i + lag]).sum();
            let den = (prefix[n] * (prefix[window] - prefix[lag])).sqrt();
            r[lag] = if den > 1e-12 { num / den } else { 0.0 };
        }
        let hi = max_lag.min(window - 2);
        let best = (min_lag..=hi).map(|l| r[l]).fold(f64::NEG_INFINITY, f64::max);
        if !(best >= VOICING_THRESHOLD) {
            out.push(0.0);
            continue;
        }
        // earliest local peak close to the global one, to avoid picking a multiple of the period
        let lag = (min_lag..=hi)
            .find(|&l| r[l] >= 0.9 * best && r[l] >= r[l - 1] && r[l] >= r[l + 1])
            .unwrap_or(min_lag);
        let (a, b, c) = (r[lag - 1], r[lag], r[lag + 1]);
        let denom = a - 2.0 * b + c;
        let shift = if denom.abs() > 1e-12 { (0.5 * (a - c) / denom).clamp(-0.5, 0.5) } else { 0.0 };
        out.push(sr / (lag as f64 + shift));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn sine(freq: f64, n: usize) -> Vec<f64> {
        (0..n).map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / 16000.0).sin()).collect()
    }

    #[test]
    fn sine_pitch_within_two_hertz() {
        let cfg = AnalysisConfig::default();
        for freq in [100.0, 173.0, 250.0] {
            let f0 = estimate_f0_autocorr(&sine(freq, 8000), &cfg, F0_MIN, F0_MAX).unwrap();
            for &v in &f0[5..f0.len() - 5] {
                assert!((v - freq).abs() < 2.0, "{freq}: {v}");
            }
        }
    }

    #[test]
    fn noise_is_mostly_unvoiced() {
        let cfg = AnalysisConfig::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let x: Vec<f64> = (0..16000).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let f0 = estimate_f0_autocorr(&x, &cfg, F0_MIN, F0_MAX).unwrap();
        let unvoiced = f0.iter().filter(|&&v| v == 0.0).count();
        assert!(unvoiced as f64 > 0.8 * f0.len() as f64, "{unvoiced}/{}", f0.len());
    }

    #[test]
    fn silence_is_unvoiced() {
        let f0 = estimate_f0_autocorr(&[0.0; 4000], &AnalysisConfig::default(), F0_MIN, F0_MAX).unwrap();
        assert_eq!(f0.len(), 51);
        assert!(f0.iter().all(|&v| v == 0.0));
    }
}
