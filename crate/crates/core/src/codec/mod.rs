//! Acoustic parameter codec: analysis of waveforms into five per-frame streams (normalized
//! log spectrogram, log energy, band aperiodicity, continuous log F0, voicing) and the
//! inverse transforms.

pub mod io;
pub mod pitch;
pub mod stft;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use io::{read_features, read_wav, write_features, write_wav};
pub use pitch::estimate_f0_autocorr;
pub use stft::{istft, stft, Spectrogram, StftPlan};

/// LF0 used for every frame of an utterance that has no voiced frame at all (ln 100 Hz).
pub const UNVOICED_LF0_FILL: f64 = 4.605_170_185_988_092;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    pub sample_rate: u32,
    pub frame_shift: usize,
    pub frame_length: usize,
    pub fft_size: usize,
    pub cap_anchor_freqs: Vec<f64>,
    pub log_floor: f64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            sample_rate: 16_000,
            frame_shift: 80,
            frame_length: 400,
            fft_size: 512,
            cap_anchor_freqs: vec![1000.0, 3000.0, 5000.0, 7000.0],
            log_floor: 1e-8,
        }
    }
}

impl AnalysisConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 || self.frame_shift == 0 || self.frame_length < 2 {
            return Err(Error::Config("sample rate, frame shift and frame length must be positive".into()));
        }
        if self.frame_length > self.fft_size {
            return Err(Error::Config(format!(
                "frame length {} exceeds FFT size {}",
                self.frame_length, self.fft_size
            )));
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        let a = &self.cap_anchor_freqs;
        if a.is_empty() || a[0] <= 0.0 || a.windows(2).any(|w| w[0] >= w[1]) || a[a.len() - 1] >= nyquist {
            return Err(Error::Config(format!(
                "CAP anchors must be positive, strictly increasing and below {nyquist} Hz, got {a:?}"
            )));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::Config("log floor must be positive".into()));
        }
        Ok(())
    }

    /// 16-point framing with 9 bins, for gradient checks where the output width dominates
    /// the cost.
    pub fn tiny() -> Self {
        AnalysisConfig {
            frame_shift: 8,
            frame_length: 16,
            fft_size: 16,
            ..AnalysisConfig::default()
        }
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn cap_bands(&self) -> usize {
        self.cap_anchor_freqs.len()
    }

    /// Centered framing: `1 + len / frame_shift`.
    pub fn num_frames(&self, samples: usize) -> usize {
        1 + samples / self.frame_shift
    }

    pub fn bin_freq(&self, k: usize) -> f64 {
        k as f64 * self.sample_rate as f64 / self.fft_size as f64
    }

    /// Fractional bin index of a frequency.
    pub fn freq_bin(&self, f: f64) -> f64 {
        f * self.fft_size as f64 / self.sample_rate as f64
    }

    pub fn frame_seconds(&self) -> f64 {
        self.frame_shift as f64 / self.sample_rate as f64
    }
}

/// One frame of acoustic parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AcousticFrame {
    pub spec: Vec<f64>,
    pub energy: f64,
    pub cap: Vec<f64>,
    pub lf0: f64,
    pub uv: bool,
}

/// A sequence of acoustic frames stored stream by stream.
#[derive(Debug, Clone, PartialEq)]
pub struct AcousticFrames {
    /// `T x bins`, energy-normalized log magnitude.
    pub spec: Tensor,
    pub energy: Vec<f64>,
    /// `T x bands`, in `[0, 1]`.
    pub cap: Tensor,
    pub lf0: Vec<f64>,
    pub uv: Vec<bool>,
}

impl AcousticFrames {
    pub fn empty(bins: usize, bands: usize) -> Self {
        AcousticFrames {
            spec: Tensor::zeros(&[0, bins]),
            energy: Vec::new(),
            cap: Tensor::zeros(&[0, bands]),
            lf0: Vec::new(),
            uv: Vec::new(),
        }
    }

    pub fn new(spec: Tensor, energy: Vec<f64>, cap: Tensor, lf0: Vec<f64>, uv: Vec<bool>) -> Result<Self> {
        let t = spec.rows();
        for (name, n) in [("energy", energy.len()), ("cap", cap.rows()), ("lf0", lf0.len()), ("uv", uv.len())] {
            if n != t {
                return Err(Error::dim(format!("{name} frame count"), &[t], &[n]));
            }
        }
        Ok(AcousticFrames { spec, energy, cap, lf0, uv })
    }

    pub fn from_frames(frames: &[AcousticFrame], bins: usize, bands: usize) -> Result<Self> {
        let mut out = AcousticFrames::empty(bins, bands);
        let mut spec = Vec::with_capacity(frames.len() * bins);
        let mut cap = Vec::with_capacity(frames.len() * bands);
        for (t, f) in frames.iter().enumerate() {
            if f.spec.len() != bins || f.cap.len() != bands {
                return Err(Error::dim(format!("frame {t}"), &[bins, bands], &[f.spec.len(), f.cap.len()]));
            }
            spec.extend_from_slice(&f.spec);
            cap.extend_from_slice(&f.cap);
            out.energy.push(f.energy);
            out.lf0.push(f.lf0);
            out.uv.push(f.uv);
        }
        out.spec = Tensor::from_vec(&[frames.len(), bins], spec)?;
        out.cap = Tensor::from_vec(&[frames.len(), bands], cap)?;
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.energy.len()
    }

    pub fn is_empty(&self) -> bool {
        self.energy.is_empty()
    }

    pub fn bins(&self) -> usize {
        self.spec.cols()
    }

    pub fn bands(&self) -> usize {
        self.cap.cols()
    }

    pub fn frame(&self, t: usize) -> AcousticFrame {
        AcousticFrame {
            spec: self.spec.row(t).to_vec(),
            energy: self.energy[t],
            cap: self.cap.row(t).to_vec(),
            lf0: self.lf0[t],
            uv: self.uv[t],
        }
    }

    pub fn frames(&self) -> Vec<AcousticFrame> {
        (0..self.len()).map(|t| self.frame(t)).collect()
    }

    /// Rounds every value to the nearest `f32`, the precision of feature files.
    pub fn quantize_f32(&mut self) {
        let q = |v: &mut f64| *v = *v as f32 as f64;
        self.spec.data_mut().iter_mut().for_each(q);
        self.cap.data_mut().iter_mut().for_each(q);
        self.energy.iter_mut().for_each(q);
        self.lf0.iter_mut().for_each(q);
    }

    /// Floored linear magnitude, `exp(spec + energy)`.
    pub fn magnitude(&self) -> Result<Tensor> {
        Ok(denormalize_spec(&self.spec, &self.energy)?.map(f64::exp))
    }
}

/// `ln(max(rms(frame), floor))` over the raw, unwindowed frame.
pub fn extract_energy(frame: &[f64], floor: f64) -> f64 {
    let ms = if frame.is_empty() {
        0.0
    } else {
        frame.iter().map(|v| v * v).sum::<f64>() / frame.len() as f64
    };
    ms.sqrt().max(floor).ln()
}

/// `ln(max(|S|, floor))` as a `T x bins` matrix.
pub fn log_magnitude(spec: &Spectrogram, floor: f64) -> Tensor {
    let data = spec.data.iter().map(|c| c.norm().max(floor).ln()).collect();
    Tensor::from_vec(&[spec.frames, spec.bins], data).expect("spectrogram layout")
}

pub fn normalize_spec(log_mag: &Tensor, energy: &[f64]) -> Result<Tensor> {
    shift_rows(log_mag, energy, -1.0)
}

pub fn denormalize_spec(spec: &Tensor, energy: &[f64]) -> Result<Tensor> {
    shift_rows(spec, energy, 1.0)
}

fn shift_rows(x: &Tensor, energy: &[f64], sign: f64) -> Result<Tensor> {
    if x.rows() != energy.len() {
        return Err(Error::dim("spectrogram vs energy frames", &[x.rows()], &[energy.len()]));
    }
    let mut out = x.clone();
    for (t, &e) in energy.iter().enumerate() {
        out.row_mut(t).iter_mut().for_each(|v| *v += sign * e);
    }
    Ok(out)
}

/// Per-bin aperiodicity by linear interpolation in frequency between anchors, held
/// constant outside the anchor range, clamped to `[0, 1]`.
pub fn cap_to_aperiodicity(cap: &[f64], cfg: &AnalysisConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let anchors = &cfg.cap_anchor_freqs;
    if cap.len() != anchors.len() {
        return Err(Error::dim("CAP bands", &[anchors.len()], &[cap.len()]));
    }
    Ok((0..cfg.bins())
        .map(|k| interpolate(anchors, cap, cfg.bin_freq(k)).clamp(0.0, 1.0))
        .collect())
}

/// Samples a per-bin curve at the anchor frequencies (linear interpolation over bins).
pub fn aperiodicity_to_cap(ap: &[f64], cfg: &AnalysisConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if ap.len() != cfg.bins() {
        return Err(Error::dim("aperiodicity bins", &[cfg.bins()], &[ap.len()]));
    }
    Ok(cfg
        .cap_anchor_freqs
        .iter()
        .map(|&f| {
            let pos = cfg.freq_bin(f);
            let lo = pos.floor() as usize;
            let frac = pos - lo as f64;
            let v = if frac == 0.0 || lo + 1 >= ap.len() {
                ap[lo.min(ap.len() - 1)]
            } else {
                ap[lo] + frac * (ap[lo + 1] - ap[lo])
            };
            v.clamp(0.0, 1.0)
        })
        .collect())
}

fn interpolate(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    if x <= xs[0] {
        return ys[0];
    }
    let last = xs.len() - 1;
    if x >= xs[last] {
        return ys[last];
    }
    let i = xs.partition_point(|&a| a <= x) - 1;
    let frac = (x - xs[i]) / (xs[i + 1] - xs[i]);
    ys[i] + frac * (ys[i + 1] - ys[i])
}

/// Splits an F0 contour (0 = unvoiced) into continuous log F0 and a voicing flag. Unvoiced
/// spans are filled by linear interpolation in time between the neighbouring voiced frames
/// and held constant at the edges.
pub fn f0_encode(f0: &[f64]) -> Result<(Vec<f64>, Vec<bool>)> {
    if let Some(t) = f0.iter().position(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::Domain(format!("F0 at frame {t} is {} (must be finite and >= 0)", f0[t])));
    }
    let uv: Vec<bool> = f0.iter().map(|&v| v > 0.0).collect();
    let voiced: Vec<usize> = (0..f0.len()).filter(|&t| uv[t]).collect();
    let mut lf0 = vec![UNVOICED_LF0_FILL; f0.len()];
    if voiced.is_empty() {
        return Ok((lf0, uv));
    }
    for &t in &voiced {
        lf0[t] = f0[t].ln();
    }
    let (first, last) = (voiced[0], voiced[voiced.len() - 1]);
    for t in 0..first {
        lf0[t] = lf0[first];
    }
    for t in last + 1..f0.len() {
        lf0[t] = lf0[last];
    }
    for w in voiced.windows(2) {
        let (a, b) = (w[0], w[1]);
        for t in a + 1..b {
            let frac = (t - a) as f64 / (b - a) as f64;
            lf0[t] = lf0[a] + frac * (lf0[b] - lf0[a]);
        }
    }
    Ok((lf0, uv))
}

/// `exp(lf0)` on voiced frames, 0 elsewhere.
pub fn f0_decode(lf0: &[f64], uv: &[bool]) -> Result<Vec<f64>> {
    if lf0.len() != uv.len() {
        return Err(Error::dim("lf0 vs uv frames", &[lf0.len()], &[uv.len()]));
    }
    Ok(lf0.iter().zip(uv).map(|(&l, &v)| if v { l.exp() } else { 0.0 }).collect())
}

/// Band aperiodicity from spectral flatness around each anchor (a band of one anchor
/// spacing centered on it).
pub fn estimate_cap(spec: &Spectrogram, cfg: &AnalysisConfig) -> Tensor {
    let anchors = &cfg.cap_anchor_freqs;
    let half_width = if anchors.len() > 1 {
        (cfg.freq_bin(anchors[1]) - cfg.freq_bin(anchors[0])) / 2.0
    } else {
        cfg.freq_bin(anchors[0]) / 2.0
    };
    let floor = cfg.log_floor * cfg.log_floor;
    let mut out = Tensor::zeros(&[spec.frames, anchors.len()]);
    for t in 0..spec.frames {
        let frame = spec.frame(t);
        for (j, &f) in anchors.iter().enumerate() {
            let c = cfg.freq_bin(f);
            let lo = (c - half_width).ceil().max(0.0) as usize;
            let hi = ((c + half_width).floor() as usize).min(spec.bins - 1);
            let powers: Vec<f64> = frame[lo..=hi].iter().map(|z| z.norm_sqr() + floor).collect();
            let n = powers.len() as f64;
            let geo = (powers.iter().map(|p| p.ln()).sum::<f64>() / n).exp();
            let arith = powers.iter().sum::<f64>() / n;
            out.set(t, j, (geo / arith).clamp(0.0, 1.0));
        }
    }
    out
}

/// Frame-synchronous raw energies of a waveform (frames from the reflection-padded signal).
pub fn frame_energies(x: &[f64], cfg: &AnalysisConfig) -> Result<Vec<f64>> {
    let plan = StftPlan::new(cfg)?;
    let padded = plan.reflect_pad(x)?;
    Ok((0..cfg.num_frames(x.len()))
        .map(|t| {
            let s = t * cfg.frame_shift;
            extract_energy(&padded[s..s + cfg.frame_length], cfg.log_floor)
        })
        .collect())
}

/// Full analysis. Ground-truth F0 and CAP, when given, are passed through unchanged;
/// otherwise they are estimated from the signal.
pub fn analyze(x: &[f64], cfg: &AnalysisConfig, f0: Option<&[f64]>, cap: Option<&Tensor>) -> Result<AcousticFrames> {
    let plan = StftPlan::new(cfg)?;
    let padded = plan.reflect_pad(x)?;
    let t = cfg.num_frames(x.len());
    let spec = plan.analyze_padded(&padded, t);
    let energy: Vec<f64> = (0..t)
        .map(|i| {
            let s = i * cfg.frame_shift;
            extract_energy(&padded[s..s + cfg.frame_length], cfg.log_floor)
        })
        .collect();
    let norm = normalize_spec(&log_magnitude(&spec, cfg.log_floor), &energy)?;
    let cap = match cap {
        Some(c) => {
            c.expect_shape(&[t, cfg.cap_bands()], "ground-truth CAP")?;
            c.map(|v| v.clamp(0.0, 1.0))
        }
        None => estimate_cap(&spec, cfg),
    };
    let f0 = match f0 {
        Some(f) => {
            if f.len() != t {
                return Err(Error::dim("ground-truth F0 frames", &[t], &[f.len()]));
            }
            f.to_vec()
        }
        None => estimate_f0_autocorr(x, cfg, pitch::F0_MIN, pitch::F0_MAX)?,
    };
    let (lf0, uv) = f0_encode(&f0)?;
    AcousticFrames::new(norm, energy, cap, lf0, uv)
}
