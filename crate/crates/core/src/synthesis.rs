//! The full cascade at inference time, and the real-time-ratio benchmark built on it.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::AcousticFrames;
use crate::error::{Error, Result};
use crate::frontend::{encode_sequence, DurationSeq, LabelUtterance, LinguisticSchema, PhonemeLabel};
use crate::models::{AcousticModel, DurationModel};
use crate::vocoder::{peak_normalize, synthesize, Vocoder};

pub const PEAK_LIMIT: f64 = 0.99;
pub const BENCH_VERSION: u32 = 1;

/// Wall-clock seconds spent in each stage of one synthesis call.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimes {
    /// Label encoding plus the duration model.
    pub duration: f64,
    pub upsample: f64,
    pub acoustic: f64,
    /// Waveform generation plus peak normalization.
    pub vocoder: f64,
}

impl StageTimes {
    pub fn sum(&self) -> f64 {
        self.duration + self.upsample + self.acoustic + self.vocoder
    }

    fn add(&mut self, o: &StageTimes) {
        self.duration += o.duration;
        self.upsample += o.upsample;
        self.acoustic += o.acoustic;
        self.vocoder += o.vocoder;
    }
}

#[derive(Debug, Clone)]
pub struct Synthesized {
    pub waveform: Vec<f64>,
    pub durations: DurationSeq,
    pub frames: AcousticFrames,
    pub times: StageTimes,
    /// Wall time from the first to the last timestamp; the stage times partition it.
    pub total_seconds: f64,
}

impl Synthesized {
    pub fn audio_seconds(&self, sample_rate: u32) -> f64 {
        self.waveform.len() as f64 / sample_rate as f64
    }
}

/// Both models must have been trained on the same linguistic schema.
pub fn check_cascade(dur: &DurationModel, ac: &AcousticModel) -> Result<()> {
    let (a, b) = (&dur.config.schema, &ac.config.schema);
    if a == b {
        return Ok(());
    }
    let feature = a
        .features()
        .iter()
        .zip(b.features())
        .find(|(x, y)| x != y)
        .map(|(x, _)| x.name.clone())
        .unwrap_or_else(|| "<feature count>".into());
    Err(Error::SchemaMismatch { feature, detail: "duration and acoustic checkpoints disagree".into() })
}

pub fn synthesize_labels(
    dur: &DurationModel,
    ac: &AcousticModel,
    labels: &[PhonemeLabel],
    vocoder: Vocoder,
    seed: u64,
) -> Result<Synthesized> {
    check_cascade(dur, ac)?;
    if labels.is_empty() {
        return Err(Error::EmptySequence("no phonemes to synthesize".into()));
    }
    let t0 = Instant::now();
    let g = encode_sequence(labels, &dur.config.schema)?;
    let durations = dur.predict_durations(&g)?;
    let t1 = Instant::now();
    let frame_input = ac.frame_input(&g, &durations)?;
    let t2 = Instant::now();
    let frames = ac.predict_acoustics(&frame_input)?;
    let t3 = Instant::now();
    let mut waveform = synthesize(&frames, &ac.config.analysis, vocoder, seed)?;
    peak_normalize(&mut waveform, PEAK_LIMIT);
    let t4 = Instant::now();
    if waveform.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("vocoder produced non-finite samples".into()));
    }
    let times = StageTimes {
        duration: (t1 - t0).as_secs_f64(),
        upsample: (t2 - t1).as_secs_f64(),
        acoustic: (t3 - t2).as_secs_f64(),
        vocoder: (t4 - t3).as_secs_f64(),
    };
    Ok(Synthesized { waveform, durations, frames, times, total_seconds: (t4 - t0).as_secs_f64() })
}

/// Resolves a label-file entry against the models' schema, then synthesizes it.
pub fn synthesize_utterance(
    dur: &DurationModel,
    ac: &AcousticModel,
    utt: &LabelUtterance,
    vocoder: Vocoder,
    seed: u64,
) -> Result<Synthesized> {
    let labels = utt.to_labels(&dur.config.schema)?;
    synthesize_labels(dur, ac, &labels, vocoder, seed)
}

/// Timing of one benchmark run over every utterance in the label set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRun {
    pub stages: StageTimes,
    pub total_seconds: f64,
    pub audio_seconds: f64,
}

/// Real-time-ratio report. The ratio is wall time over audio time, so below 1 is faster than
/// real time. It is hardware-specific and nothing is asserted about its value; published
/// systems of this kind have reported roughly 0.3 to 0.4 on server CPUs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub version: u32,
    pub utterances: usize,
    pub audio_seconds: f64,
    /// Stage times of the median run.
    pub stages: StageTimes,
    pub total_seconds: f64,
    pub real_time_ratio: f64,
    pub threads: usize,
    pub vocoder: Vocoder,
    /// SHA-256 over the model configurations, vocoder choice and labels.
    pub config_hash: String,
    pub repeats: usize,
    pub warmup_runs: usize,
    /// Every timed run, in execution order.
    pub runs: Vec<BenchRun>,
}

impl BenchReport {
    /// Relative gap between the stage sum and the total.
    pub fn accounting_error(&self) -> f64 {
        (self.stages.sum() - self.total_seconds).abs() / self.total_seconds.max(f64::MIN_POSITIVE)
    }
}

pub fn config_hash(dur: &DurationModel, ac: &AcousticModel, vocoder: Vocoder, labels: &[Vec<PhonemeLabel>]) -> String {
    let payload = serde_json::json!({
        "duration": dur.config,
        "acoustic": ac.config,
        "vocoder": vocoder,
        "labels": labels.iter().map(|u| u.iter().map(|l| l.values.clone()).collect::<Vec<_>>()).collect::<Vec<_>>(),
    });
    Sha256::digest(payload.to_string().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

fn bench_once(
    dur: &DurationModel,
    ac: &AcousticModel,
    labels: &[Vec<PhonemeLabel>],
    vocoder: Vocoder,
    seed: u64,
) -> Result<BenchRun> {
    let mut stages = StageTimes::default();
    let (mut total, mut audio) = (0.0, 0.0);
    for (i, l) in labels.iter().enumerate() {
        let s = synthesize_labels(dur, ac, l, vocoder, seed.wrapping_add(i as u64))?;
        stages.add(&s.times);
        total += s.total_seconds;
        audio += s.audio_seconds(ac.config.analysis.sample_rate);
    }
    Ok(BenchRun { stages, total_seconds: total, audio_seconds: audio })
}

/// One untimed warm-up pass, then `repeats` timed passes; reports the run with the median
/// total. Synthesis runs on the calling thread only.
pub fn bench(
    dur: &DurationModel,
    ac: &AcousticModel,
    utterances: &[LabelUtterance],
    vocoder: Vocoder,
    repeats: usize,
    seed: u64,
) -> Result<BenchReport> {
    if repeats == 0 {
        return Err(Error::Argument("bench needs at least one timed repeat".into()));
    }
    if utterances.is_empty() {
        return Err(Error::EmptySequence("label file holds no utterances".into()));
    }
    let schema: &LinguisticSchema = &dur.config.schema;
    let labels = utterances.iter().map(|u| u.to_labels(schema)).collect::<Result<Vec<_>>>()?;
    bench_once(dur, ac, &labels, vocoder, seed)?;
    let runs = (0..repeats).map(|_| bench_once(dur, ac, &labels, vocoder, seed)).collect::<Result<Vec<_>>>()?;
    let mut order: Vec<usize> = (0..runs.len()).collect();
    order.sort_by(|&a, &b| runs[a].total_seconds.total_cmp(&runs[b].total_seconds));
    let median = runs[order[(runs.len() - 1) / 2]].clone();
    if median.audio_seconds <= 0.0 {
        return Err(Error::Domain("benchmark produced no audio".into()));
    }
    Ok(BenchReport {
        version: BENCH_VERSION,
        utterances: labels.len(),
        audio_seconds: median.audio_seconds,
        stages: median.stages,
        total_seconds: median.total_seconds,
        real_time_ratio: median.total_seconds / median.audio_seconds,
        threads: 1,
        vocoder,
        config_hash: config_hash(dur, ac, vocoder, &labels),
        repeats,
        warmup_runs: 1,
        runs,
    })
}
