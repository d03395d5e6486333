//! WAV and binary feature-file I/O.

use std::path::Path;

use super::AcousticFrames;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: &[u8; 8] = b"EMPHFEAT";
pub const FEATURE_VERSION: u32 = 1;

const PCM_SCALE: f64 = 32767.0;

fn to_pcm(v: f64) -> i16 {
    (v.clamp(-1.0, 1.0) * PCM_SCALE).round() as i16
}

/// Rounds samples to the 16-bit grid used by [`write_wav`].
pub fn quantize_pcm16(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| to_pcm(v) as f64 / PCM_SCALE).collect()
}

/// Mono 16-bit PCM. Samples outside `[-1, 1]` are clipped.
pub fn write_wav(path: &Path, samples: &[f64], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wav_err = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for &s in samples {
        w.write_sample(to_pcm(s)).map_err(wav_err)?;
    }
    w.finalize().map_err(wav_err)
}

/// Reads a mono 16-bit PCM file; returns samples in `[-1, 1]` and the sample rate.
pub fn read_wav(path: &Path) -> Result<(Vec<f64>, u32)> {
    let wav_err = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    };
    let reader = hound::WavReader::open(path).map_err(wav_err)?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::format(
            path,
            format!(
                "expected mono 16-bit PCM, got {} channel(s), {} bits {:?}",
                spec.channels, spec.bits_per_sample, spec.sample_format
            ),
        ));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / PCM_SCALE))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(wav_err)?;
    Ok((samples, spec.sample_rate))
}

/// Serializes frames: magic, version, frame count, the five stream widths, then one
/// little-endian `f32` row per frame.
pub fn features_to_bytes(frames: &AcousticFrames) -> Vec<u8> {
    let dims = [frames.bins(), 1, frames.bands(), 1, 1];
    let row = dims.iter().sum::<usize>();
    let mut out = Vec::with_capacity(8 + 4 * (2 + dims.len()) + 4 * row * frames.len());
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(frames.len() as u32).to_le_bytes());
    for d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    let mut put = |v: f64| out.extend_from_slice(&(v as f32).to_le_bytes());
    for t in 0..frames.len() {
        frames.spec.row(t).iter().for_each(|&v| put(v));
        put(frames.energy[t]);
        frames.cap.row(t).iter().for_each(|&v| put(v));
        put(frames.lf0[t]);
        put(if frames.uv[t] { 1.0 } else { 0.0 });
    }
    out
}

pub fn features_from_bytes(bytes: &[u8], path: &Path) -> Result<AcousticFrames> {
    let bad = |detail: String| Error::format(path, detail);
    if bytes.len() < 8 || &bytes[..8] != FEATURE_MAGIC {
        return Err(bad("missing EMPHFEAT magic".into()));
    }
    let mut pos = 8;
    let mut u32_at = |what: &str| -> Result<u32> {
        let b = bytes.get(pos..pos + 4).ok_or_else(|| bad(format!("truncated header at {what}")))?;
        pos += 4;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    };
    let version = u32_at("version")?;
    if version != FEATURE_VERSION {
        return Err(bad(format!("unsupported feature version {version}")));
    }
    let t = u32_at("frame count")? as usize;
    let mut dims = [0usize; 5];
    for d in dims.iter_mut() {
        *d = u32_at("stream width")? as usize;
    }
    if dims[1] != 1 || dims[3] != 1 || dims[4] != 1 || dims[0] == 0 || dims[2] == 0 {
        return Err(bad(format!("unexpected stream widths {dims:?}")));
    }
    let row: usize = dims.iter().sum();
    let body = &bytes[pos..];
    if body.len() != 4 * row * t {
        return Err(bad(format!("expected {} data bytes, found {}", 4 * row * t, body.len())));
    }
    let vals: Vec<f64> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    let (bins, bands) = (dims[0], dims[2]);
    let mut spec = Vec::with_capacity(t * bins);
    let mut cap = Vec::with_capacity(t * bands);
    let (mut energy, mut lf0, mut uv) = (Vec::with_capacity(t), Vec::with_capacity(t), Vec::with_capacity(t));
    for (i, r) in vals.chunks_exact(row).enumerate() {
        spec.extend_from_slice(&r[..bins]);
        energy.push(r[bins]);
        cap.extend_from_slice(&r[bins + 1..bins + 1 + bands]);
        lf0.push(r[bins + 1 + bands]);
        uv.push(match r[row - 1] {
            v if v == 0.0 => false,
            v if v == 1.0 => true,
            v => return Err(bad(format!("frame {i}: voicing flag {v} is not 0 or 1"))),
        });
    }
    AcousticFrames::new(
        Tensor::from_vec(&[t, bins], spec)?,
        energy,
        Tensor::from_vec(&[t, bands], cap)?,
        lf0,
        uv,
    )
}

pub fn write_features(path: &Path, frames: &AcousticFrames) -> Result<()> {
    std::fs::write(path, features_to_bytes(frames)).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<AcousticFrames> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    features_from_bytes(&bytes, path)
}
