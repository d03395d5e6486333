//! Waveform reconstruction from acoustic frames: Griffin-Lim phase recovery and a simple
//! source-filter synthesizer driven by all five streams.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::codec::{cap_to_aperiodicity, AcousticFrames, AnalysisConfig, Spectrogram, StftPlan};
use crate::error::{Error, Result};
use crate::nn::SeededRng;
use crate::tensor::Tensor;

pub const DEFAULT_GL_ITERATIONS: usize = 60;
/// Momentum used by the spectrogram synthesis path.
pub const DEFAULT_GL_MOMENTUM: f64 = 0.99;
pub const PEAK_LIMIT: f64 = 0.99;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GriffinLimReport {
    pub iterations: usize,
    /// `sum (|STFT(x_i)| - target)^2` over the full (two-sided) spectrum after each round.
    pub distance_per_iteration: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Vocoder {
    SourceFilter,
    GriffinLim,
}

/// Squared magnitude distance over the two-sided spectrum of a real signal: interior bins of
/// the half spectrum count twice.
fn full_spectrum_distance(est: &Spectrogram, target: &Tensor) -> f64 {
    let bins = est.bins;
    let mut d = 0.0;
    for t in 0..est.frames {
        for (k, (z, &a)) in est.frame(t).iter().zip(target.row(t)).enumerate() {
            let w = if k == 0 || k == bins - 1 { 1.0 } else { 2.0 };
            let diff = z.norm() - a;
            d += w * diff * diff;
        }
    }
    d
}

/// Iterative phase reconstruction from a `T x bins` magnitude. Each round synthesizes the
/// least-squares signal for the current spectrum estimate and re-imposes the target
/// magnitude on its STFT, so the distance never increases. Returns `(T - 1) * hop` samples.
pub fn griffin_lim(
    magnitude: &Tensor,
    cfg: &AnalysisConfig,
    iterations: usize,
    seed: u64,
) -> Result<(Vec<f64>, GriffinLimReport)> {
    griffin_lim_accelerated(magnitude, cfg, iterations, 0.0, seed)
}

/// Griffin-Lim with momentum on the magnitude projection: the next estimate is
/// `P_n + momentum * (P_n - P_{n-1})`. Converges much faster than the plain iteration but
/// gives up the guaranteed monotone distance; `momentum = 0` is [`griffin_lim`].
pub fn griffin_lim_accelerated(
    magnitude: &Tensor,
    cfg: &AnalysisConfig,
    iterations: usize,
    momentum: f64,
    seed: u64,
) -> Result<(Vec<f64>, GriffinLimReport)> {
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::Config(format!("Griffin-Lim momentum must be in [0, 1), got {momentum}")));
    }
    if iterations < 1 {
        return Err(Error::Config("Griffin-Lim needs at least one iteration".into()));
    }
    let plan = StftPlan::new(cfg)?;
    magnitude.expect_cols(cfg.bins(), "Griffin-Lim magnitude")?;
    if magnitude.data().iter().any(|&m| !(m >= 0.0) || !m.is_finite()) {
        return Err(Error::Domain("magnitude must be finite and non-negative".into()));
    }
    let frames = magnitude.rows();
    if frames == 0 {
        return Ok((Vec::new(), GriffinLimReport { iterations, distance_per_iteration: vec![0.0; iterations] }));
    }
    let mut rng = SeededRng::seed_from_u64(seed);
    let mut spec = Spectrogram::zeros(frames, cfg.bins());
    for (z, &a) in spec.data.iter_mut().zip(magnitude.data()) {
        *z = Complex64::from_polar(a, rng.gen_range(0.0..2.0 * PI));
    }
    let mut distances = Vec::with_capacity(iterations);
    let mut signal = Vec::new();
    let mut prev_proj = spec.clone();
    for _ in 0..iterations {
        signal = plan.synthesize(&spec);
        let est = plan.reanalyze(&signal, frames);
        distances.push(full_spectrum_distance(&est, magnitude));
        let mut proj = est.clone();
        for (z, &a) in proj.data.iter_mut().zip(magnitude.data()) {
            let n = z.norm();
            *z = if n > 0.0 { *z * (a / n) } else { Complex64::new(a, 0.0) };
        }
        for ((z, p), q) in spec.data.iter_mut().zip(&proj.data).zip(&prev_proj.data) {
            *z = p + (p - q) * momentum;
        }
        prev_proj = proj;
    }
    Ok((signal, GriffinLimReport { iterations, distance_per_iteration: distances }))
}

/// Restores the linear magnitude from normalized spectrum and energy, then runs accelerated
/// Griffin-Lim.
pub fn reconstruct_spectrogram_path(frames: &AcousticFrames, cfg: &AnalysisConfig, iterations: usize, seed: u64) -> Result<Vec<f64>> {
    if frames.is_empty() {
        return Ok(Vec::new());
    }
    Ok(griffin_lim_accelerated(&frames.magnitude()?, cfg, iterations, DEFAULT_GL_MOMENTUM, seed)?.0)
}

/// `sum_{h=1}^{n} cos(h phi)` in closed form.
fn harmonic_sum(phi: f64, n: usize) -> f64 {
    let s = (phi / 2.0).sin();
    if s.abs() < 1e-9 {
        n as f64
    } else {
        ((n as f64 + 0.5) * phi).sin() / (2.0 * s) - 0.5
    }
}

/// Mixed excitation shaped by the restored spectral envelope.
///
/// Voiced frames combine a band-limited harmonic comb at `exp(lf0)` weighted by
/// `sqrt(1 - ap)` with random-phase noise weighted by `sqrt(ap)`; unvoiced frames use noise
/// only. The harmonic phase is carried from frame to frame so overlapping frames add
/// coherently. Returns `(T - 1) * hop` samples.
pub fn source_filter_synthesize(frames: &AcousticFrames, cfg: &AnalysisConfig, seed: u64) -> Result<Vec<f64>> {
    let plan = StftPlan::new(cfg)?;
    let t_count = frames.len();
    if t_count == 0 {
        return Ok(Vec::new());
    }
    frames.spec.expect_cols(cfg.bins(), "spectrogram stream")?;
    frames.cap.expect_cols(cfg.cap_bands(), "CAP stream")?;
    let envelope = frames.magnitude()?;
    let (len, n_fft, bins) = (cfg.frame_length, cfg.fft_size, cfg.bins());
    let sr = cfg.sample_rate as f64;
    let window = plan.window().to_vec();
    let fft = rustfft::FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let mut rng = SeededRng::seed_from_u64(seed);
    let mut out = Spectrogram::zeros(t_count, bins);
    let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
    let mut phase = 0.0f64;
    let mut prev_f0: Option<f64> = None;
    for t in 0..t_count {
        let ap = cap_to_aperiodicity(frames.cap.row(t), cfg)?;
        let f0 = frames.lf0[t].exp();
        let voiced = frames.uv[t] && f0.is_finite() && f0 > 0.0 && f0 < sr / 2.0;
        let mut harmonic = vec![Complex64::new(0.0, 0.0); bins];
        if voiced {
            if let Some(p) = prev_f0 {
                phase = (phase + PI * cfg.frame_shift as f64 * (p + f0) / sr).rem_euclid(2.0 * PI);
            }
            prev_f0 = Some(f0);
            let count = ((sr / 2.0) / f0).floor().max(1.0) as usize;
            for (i, b) in buf.iter_mut().enumerate() {
                *b = if i < len {
                    let phi = phase + 2.0 * PI * f0 * (i as f64 - (len / 2) as f64) / sr;
                    Complex64::new(window[i] * harmonic_sum(phi, count), 0.0)
                } else {
                    Complex64::new(0.0, 0.0)
                };
            }
            fft.process(&mut buf);
            // Unit mean power per bin, then the coherent-overlap gain is removed: consecutive
            // harmonic frames add in phase, random-phase noise frames do not, and the two
            // differ by fft_size / frame_shift in output power.
            let rms = (buf[..bins].iter().map(|z| z.norm_sqr()).sum::<f64>() / bins as f64).sqrt();
            let coherent = (cfg.frame_shift as f64 / n_fft as f64).sqrt();
            if rms > 0.0 {
                for (h, z) in harmonic.iter_mut().zip(&buf[..bins]) {
                    *h = z * coherent / rms;
                }
            }
        } else {
            prev_f0 = None;
        }
        let env = envelope.row(t);
        for (k, z) in out.frame_mut(t).iter_mut().enumerate() {
            let noise = Complex64::from_polar(1.0, rng.gen_range(0.0..2.0 * PI));
            let e = if voiced {
                harmonic[k] * (1.0 - ap[k]).sqrt() + noise * ap[k].sqrt()
            } else {
                noise
            };
            *z = e * env[k];
        }
    }
    Ok(plan.synthesize(&out))
}

pub fn synthesize(frames: &AcousticFrames, cfg: &AnalysisConfig, vocoder: Vocoder, seed: u64) -> Result<Vec<f64>> {
    match vocoder {
        Vocoder::SourceFilter => source_filter_synthesize(frames, cfg, seed),
        Vocoder::GriffinLim => reconstruct_spectrogram_path(frames, cfg, DEFAULT_GL_ITERATIONS, seed),
    }
}

/// Scales the signal down so its peak is at most `limit`; returns the applied gain.
pub fn peak_normalize(x: &mut [f64], limit: f64) -> f64 {
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > limit {
        let g = limit / peak;
        x.iter_mut().for_each(|v| *v *= g);
        g
    } else {
        1.0
    }
}

/// Normalized autocorrelation of `x` at `lag`.
pub fn autocorrelation(x: &[f64], lag: usize) -> f64 {
    if lag >= x.len() {
        return 0.0;
    }
    let n = x.len() - lag;
    let num: f64 = (0..n).map(|i| x[i] * x[i + lag]).sum();
    let a: f64 = x[..n].iter().map(|v| v * v).sum();
    let b: f64 = x[lag..].iter().map(|v| v * v).sum();
    let den = (a * b).sqrt();
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}
