//! Short-time Fourier transform with centered, reflection-padded frames and least-squares
//! overlap-add inversion.
//!
//! Frames are taken from the padded signal: frame `t` covers padded samples
//! `[t * hop, t * hop + frame_length)`, i.e. it is centered on original sample `t * hop`.
//! The windowed frame sits at the start of an `fft_size` buffer followed by zeros.

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::AnalysisConfig;
use crate::error::{Error, Result};

/// Half spectrum (`fft_size / 2 + 1` bins) for every frame, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<Complex64>,
}

impl Spectrogram {
    pub fn zeros(frames: usize, bins: usize) -> Self {
        Spectrogram { frames, bins, data: vec![Complex64::new(0.0, 0.0); frames * bins] }
    }

    pub fn frame(&self, t: usize) -> &[Complex64] {
        &self.data[t * self.bins..(t + 1) * self.bins]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [Complex64] {
        &mut self.data[t * self.bins..(t + 1) * self.bins]
    }

    pub fn magnitude(&self) -> Vec<f64> {
        self.data.iter().map(|c| c.norm()).collect()
    }
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Reusable FFT plans and window for one analysis configuration.
pub struct StftPlan {
    cfg: AnalysisConfig,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for StftPlan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StftPlan").field("cfg", &self.cfg).finish()
    }
}

impl StftPlan {
    pub fn new(cfg: &AnalysisConfig) -> Result<Self> {
        cfg.validate()?;
        let mut planner = FftPlanner::new();
        Ok(StftPlan {
            cfg: cfg.clone(),
            window: hann(cfg.frame_length),
            fft: planner.plan_fft_forward(cfg.fft_size),
            ifft: planner.plan_fft_inverse(cfg.fft_size),
        })
    }

    pub fn config(&self) -> &AnalysisConfig {
        &self.cfg
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    fn pad(&self) -> usize {
        self.cfg.frame_length / 2
    }

    /// Length of the padded domain spanned by `frames` frames.
    pub fn padded_len(&self, frames: usize) -> usize {
        if frames == 0 {
            0
        } else {
            (frames - 1) * self.cfg.frame_shift + self.cfg.frame_length
        }
    }

    /// Reflection-pads `x` by half a frame on each side (edge sample not repeated).
    pub fn reflect_pad(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() < self.cfg.frame_length {
            return Err(Error::Analysis(format!(
                "waveform of {} samples is shorter than one frame ({})",
                x.len(),
                self.cfg.frame_length
            )));
        }
        Ok(self.reflect_pad_short(x))
    }

    /// Sample of `x` that lands at padded position `p`.
    fn source_index(&self, p: usize, n: usize) -> usize {
        let o = p as isize - self.pad() as isize;
        let n = n as isize;
        let idx = if o < 0 {
            -o
        } else if o >= n {
            2 * (n - 1) - o
        } else {
            o
        };
        idx as usize
    }

    fn reflect_pad_short(&self, x: &[f64]) -> Vec<f64> {
        let p = self.pad();
        let n = x.len();
        let mut out = Vec::with_capacity(n + 2 * p);
        out.extend((1..=p).rev().map(|i| x[i]));
        out.extend_from_slice(x);
        out.extend((0..p).map(|i| x[n - 2 - i]));
        out
    }

    /// Whether a `frames`-frame signal is long enough to be reflection padded.
    pub fn can_reflect(&self, frames: usize) -> bool {
        frames > 0 && (frames - 1) * self.cfg.frame_shift > self.pad()
    }

    /// STFT of an already padded signal holding exactly `frames` frames.
    pub fn analyze_padded(&self, padded: &[f64], frames: usize) -> Spectrogram {
        let (hop, len, n) = (self.cfg.frame_shift, self.cfg.frame_length, self.cfg.fft_size);
        let bins = self.cfg.bins();
        let mut out = Spectrogram::zeros(frames, bins);
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        let mut scratch = vec![Complex64::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        for t in 0..frames {
            let start = t * hop;
            for (i, b) in buf.iter_mut().enumerate() {
                *b = if i < len {
                    Complex64::new(padded.get(start + i).copied().unwrap_or(0.0) * self.window[i], 0.0)
                } else {
                    Complex64::new(0.0, 0.0)
                };
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            out.frame_mut(t).copy_from_slice(&buf[..bins]);
        }
        out
    }

    /// Windowed overlap-add of each frame's inverse transform and the summed squared window,
    /// both in the padded domain.
    fn overlap_add(&self, spec: &Spectrogram) -> (Vec<f64>, Vec<f64>) {
        let (hop, len, n) = (self.cfg.frame_shift, self.cfg.frame_length, self.cfg.fft_size);
        let total = self.padded_len(spec.frames);
        let mut y = vec![0.0; total];
        let mut norm = vec![0.0; total];
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        let mut scratch = vec![Complex64::new(0.0, 0.0); self.ifft.get_inplace_scratch_len()];
        for t in 0..spec.frames {
            let half = spec.frame(t);
            buf[..half.len()].copy_from_slice(half);
            for k in half.len()..n {
                buf[k] = half[n - k].conj();
            }
            self.ifft.process_with_scratch(&mut buf, &mut scratch);
            let start = t * hop;
            for i in 0..len {
                let w = self.window[i];
                y[start + i] += w * buf[i].re / n as f64;
                norm[start + i] += w * w;
            }
        }
        (y, norm)
    }

    /// Least-squares signal in the padded domain whose STFT is closest to `spec`.
    pub fn synthesize_padded(&self, spec: &Spectrogram) -> Vec<f64> {
        let (mut y, norm) = self.overlap_add(spec);
        for (v, &d) in y.iter_mut().zip(&norm) {
            *v = if d > 1e-10 { *v / d } else { 0.0 };
        }
        y
    }

    /// Least-squares `(T - 1) * hop`-sample signal whose centered, reflection-padded STFT is
    /// closest to `spec`: padded-domain contributions are folded back onto the samples they
    /// mirror before dividing. Falls back to cropping the padded solution when the signal is
    /// too short to reflect.
    pub fn synthesize(&self, spec: &Spectrogram) -> Vec<f64> {
        if spec.frames == 0 {
            return Vec::new();
        }
        let n = (spec.frames - 1) * self.cfg.frame_shift;
        if !self.can_reflect(spec.frames) {
            let p = self.pad();
            return self.synthesize_padded(spec)[p..p + n].to_vec();
        }
        let (num, norm) = self.overlap_add(spec);
        let mut y = vec![0.0; n];
        let mut d = vec![0.0; n];
        for (p, (&a, &b)) in num.iter().zip(&norm).enumerate() {
            let o = self.source_index(p, n);
            y[o] += a;
            d[o] += b;
        }
        for (v, &w) in y.iter_mut().zip(&d) {
            *v = if w > 1e-10 { *v / w } else { 0.0 };
        }
        y
    }

    /// STFT of a signal produced by [`StftPlan::synthesize`] for `frames` frames (no minimum
    /// length, unlike [`StftPlan::stft`]).
    pub fn reanalyze(&self, y: &[f64], frames: usize) -> Spectrogram {
        if self.can_reflect(frames) {
            self.analyze_padded(&self.reflect_pad_short(y), frames)
        } else {
            let mut padded = vec![0.0; self.pad()];
            padded.extend_from_slice(y);
            self.analyze_padded(&padded, frames)
        }
    }

    /// Centered STFT; `1 + len / hop` frames.
    pub fn stft(&self, x: &[f64]) -> Result<Spectrogram> {
        let padded = self.reflect_pad(x)?;
        Ok(self.analyze_padded(&padded, self.cfg.num_frames(x.len())))
    }

    /// Inverse of [`StftPlan::stft`]; returns `(frames - 1) * hop` samples.
    pub fn istft(&self, spec: &Spectrogram) -> Vec<f64> {
        self.synthesize(spec)
    }
}

pub fn stft(x: &[f64], cfg: &AnalysisConfig) -> Result<Spectrogram> {
    StftPlan::new(cfg)?.stft(x)
}

pub fn istft(spec: &Spectrogram, cfg: &AnalysisConfig) -> Result<Vec<f64>> {
    Ok(StftPlan::new(cfg)?.istft(spec))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn noise(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn frame_count_and_bins() {
        let cfg = AnalysisConfig::default();
        let s = stft(&noise(8000, 1), &cfg).unwrap();
        assert_eq!(s.frames, 101);
        assert_eq!(s.bins, 257);
        assert_eq!(stft(&noise(8079, 1), &cfg).unwrap().frames, 101);
        assert!(matches!(stft(&noise(399, 1), &cfg), Err(Error::Analysis(_))));
    }

    #[test]
    fn zero_signal_has_zero_magnitude() {
        let s = stft(&[0.0; 1600], &AnalysisConfig::default()).unwrap();
        assert!(s.magnitude().iter().all(|&m| m == 0.0));
    }

    #[test]
    fn round_trip_reconstructs_signal() {
        let cfg = AnalysisConfig::default();
        let x = noise(8000, 2);
        let y = istft(&stft(&x, &cfg).unwrap(), &cfg).unwrap();
        assert_eq!(y.len(), 8000);
        let err = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn sine_peaks_at_expected_bin() {
        let cfg = AnalysisConfig::default();
        let x: Vec<f64> = (0..4000)
            .map(|n| (2.0 * std::f64::consts::PI * 1000.0 * n as f64 / 16000.0).sin())
            .collect();
        let s = stft(&x, &cfg).unwrap();
        let mag = s.magnitude();
        for t in 2..s.frames - 2 {
            let row = &mag[t * 257..(t + 1) * 257];
            let peak = (0..257).max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap()).unwrap();
            assert_eq!(peak, 32);
        }
    }

    #[test]
    fn short_inverse_has_expected_length() {
        let cfg = AnalysisConfig::default();
        let plan = StftPlan::new(&cfg).unwrap();
        for frames in [0, 1, 2, 3, 4, 10] {
            let spec = Spectrogram::zeros(frames, 257);
            assert_eq!(plan.istft(&spec).len(), frames.saturating_sub(1) * 80);
        }
    }

    #[test]
    fn inverse_is_least_squares_for_inconsistent_spectra() {
        // perturbing the solution must not bring its STFT closer to the target
        let cfg = AnalysisConfig::default();
        let plan = StftPlan::new(&cfg).unwrap();
        let mut spec = stft(&noise(1600, 3), &cfg).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        spec.data.iter_mut().for_each(|z| *z *= Complex64::from_polar(1.0, rng.gen_range(0.0..6.28)));
        let dist = |y: &[f64]| {
            let e = plan.reanalyze(y, spec.frames);
            e.data.iter().zip(&spec.data).enumerate().map(|(i, (a, b))| {
                let k = i % 257;
                let w = if k == 0 || k == 256 { 1.0 } else { 2.0 };
                w * (a - b).norm_sqr()
            }).sum::<f64>()
        };
        let y = plan.istft(&spec);
        let base = dist(&y);
        for i in [0, 5, 777, 1599] {
            for step in [1e-3, -1e-3] {
                let mut z = y.clone();
                z[i] += step;
                assert!(dist(&z) >= base);
            }
        }
    }

    #[test]
    fn reflection_padding_mirrors_without_edge() {
        let plan = StftPlan::new(&AnalysisConfig::default()).unwrap();
        let x: Vec<f64> = (0..400).map(|i| i as f64).collect();
        let p = plan.reflect_pad(&x).unwrap();
        assert_eq!(p.len(), 800);
        assert_eq!(&p[198..202], &[2.0, 1.0, 0.0, 1.0]);
        assert_eq!(&p[598..602], &[398.0, 399.0, 398.0, 397.0]);
    }
}
