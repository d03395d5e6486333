//! Deterministic synthetic corpus of a toy tonal language with three sentence types.
//!
//! Durations, F0, energy, aperiodicity and spectra are closed-form functions of the labels
//! plus bounded jitter, so the learnable signal and the noise floor are both known.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::codec::io::{features_to_bytes, quantize_pcm16, read_features, read_wav, write_wav};
use crate::codec::{f0_encode, AcousticFrames, AnalysisConfig, StftPlan};
use crate::error::{Error, Result};
use crate::frontend::{
    duration_encode, read_label_file, write_label_file, DurationSeq, Emotion, LabelUtterance, LinguisticSchema,
    PhonemeLabel, BREAK_LEVEL, EMOTION_TYPE, PHONEME_ID, POS_TAG, PROSODIC_LEVEL, STRESS, SYNTACTIC_LEVEL, TONE,
};
use crate::nn::SeededRng;
use crate::tensor::Tensor;
use crate::vocoder::source_filter_synthesize;

pub const CORPUS_FORMAT: &str = "emphasis-corpus";
pub const CORPUS_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// Seed of the phoneme inventory used by [`ToyLanguageSpec::standard`].
const STANDARD_INVENTORY_SEED: u64 = 0x5eed_70e1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyPhoneme {
    pub base_duration_frames: u32,
    pub voiced: bool,
    /// Linear magnitude envelope over the analysis bins, scaled so that a unit-energy frame
    /// synthesizes at unit RMS.
    pub envelope: Vec<f64>,
    pub base_cap: Vec<f64>,
    /// Log RMS before stress and sentence-type offsets.
    pub base_energy: f64,
}

/// Sentence-type prosody.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmotionModifiers {
    /// Fractional F0 drop from start to end of a declarative sentence.
    pub declination: f64,
    /// Fractional F0 rise reached at the last frame of a question.
    pub question_rise: f64,
    /// Share of the utterance (from the end) over which the question rise ramps up.
    pub question_rise_span: f64,
    pub exclamation_f0_gain: f64,
    pub exclamation_energy_db: f64,
    /// Duration multipliers in [`Emotion::ALL`] order.
    pub duration: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyLanguageSpec {
    pub phonemes: Vec<ToyPhoneme>,
    pub base_f0: f64,
    /// Relative F0 excursion of the tone shapes.
    pub tone_depth: f64,
    /// Duration multiplier per break level.
    pub break_multipliers: Vec<f64>,
    pub emotion: EmotionModifiers,
    /// Standard deviation of the lognormal duration jitter.
    pub duration_jitter: f64,
    /// Standard deviation (Hz) of the per-phoneme F0 offset.
    pub f0_jitter_hz: f64,
    pub min_phonemes: usize,
    pub max_phonemes: usize,
}

impl ToyLanguageSpec {
    /// The inventory matching [`LinguisticSchema::default_toy`] and the default analysis.
    pub fn standard() -> Self {
        ToyLanguageSpec::generate(&LinguisticSchema::default_toy(), &AnalysisConfig::default(), STANDARD_INVENTORY_SEED)
            .expect("standard toy language is valid")
    }

    /// Random phoneme inventory: two thirds voiced with three formant peaks, the rest
    /// unvoiced with a rising noise spectrum.
    pub fn generate(schema: &LinguisticSchema, cfg: &AnalysisConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let card = |name: &str| {
            schema
                .index_of(name)
                .map(|i| schema.features()[i].cardinality)
                .ok_or_else(|| Error::SchemaMismatch { feature: name.into(), detail: "required by the toy language".into() })
        };
        let n = card(PHONEME_ID)?;
        let breaks = card(BREAK_LEVEL)?;
        for f in [TONE, STRESS, PROSODIC_LEVEL, SYNTACTIC_LEVEL, POS_TAG, EMOTION_TYPE] {
            card(f)?;
        }
        if card(EMOTION_TYPE)? != Emotion::ALL.len() {
            return Err(Error::Config("emotion_type must have exactly three values".into()));
        }
        let mut rng = SeededRng::seed_from_u64(seed);
        let voiced_count = (2 * n).div_ceil(3);
        let window_energy: f64 = StftPlan::new(cfg)?.window().iter().map(|w| w * w).sum();
        let nyquist = cfg.sample_rate as f64 / 2.0;
        let phonemes = (0..n)
            .map(|i| {
                let voiced = i < voiced_count;
                let shape: Vec<f64> = if voiced {
                    let f1 = rng.gen_range(300.0..900.0);
                    let f2 = rng.gen_range(1000.0..2400.0);
                    let f3 = rng.gen_range(2500.0..3500.0);
                    (0..cfg.bins())
                        .map(|k| {
                            let f = cfg.bin_freq(k);
                            let peak = |c: f64, bw: f64, g: f64| g * (-((f - c) / bw).powi(2)).exp();
                            let tilt = (-f / 3000.0).exp();
                            0.02 + tilt * (0.2 + peak(f1, 150.0, 1.0) + peak(f2, 250.0, 0.6) + peak(f3, 350.0, 0.3))
                        })
                        .collect()
                } else {
                    let corner = rng.gen_range(2000.0..5000.0);
                    (0..cfg.bins())
                        .map(|k| {
                            let f = cfg.bin_freq(k);
                            0.05 + 1.0 / (1.0 + (-(f - corner) / 600.0).exp()) * (1.0 - 0.3 * f / nyquist)
                        })
                        .collect()
                };
                let envelope = scale_envelope(&shape, cfg.fft_size, cfg.frame_shift, window_energy);
                let bands = cfg.cap_bands();
                let base_cap = if voiced {
                    let lo = rng.gen_range(0.02..0.1);
                    (0..bands)
                        .map(|j| (lo + 0.6 * j as f64 / bands.max(2).saturating_sub(1) as f64).min(0.95))
                        .collect()
                } else {
                    (0..bands).map(|_| rng.gen_range(0.9..1.0)).collect()
                };
                ToyPhoneme {
                    base_duration_frames: if voiced { rng.gen_range(9..=18) } else { rng.gen_range(5..=10) },
                    voiced,
                    envelope,
                    base_cap,
                    base_energy: if voiced { rng.gen_range(-2.8..-2.2) } else { rng.gen_range(-4.0..-3.4) },
                }
            })
            .collect();
        let spec = ToyLanguageSpec {
            phonemes,
            base_f0: 120.0,
            tone_depth: 0.1,
            break_multipliers: (0..breaks).map(|b| 1.0 + 0.15 * b as f64).collect(),
            emotion: EmotionModifiers {
                declination: 0.1,
                question_rise: 0.45,
                question_rise_span: 0.2,
                exclamation_f0_gain: 0.1,
                exclamation_energy_db: 3.0,
                duration: [1.0, 1.05, 0.9],
            },
            duration_jitter: 0.1,
            f0_jitter_hz: 10.0,
            min_phonemes: 8,
            max_phonemes: 20,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.phonemes.is_empty() {
            return bad("toy language needs at least one phoneme".into());
        }
        for (i, p) in self.phonemes.iter().enumerate() {
            if p.base_duration_frames < 1 {
                return bad(format!("phoneme {i} has zero base duration"));
            }
            if p.envelope.iter().any(|v| !(*v >= 0.0)) {
                return bad(format!("phoneme {i} has a negative envelope value"));
            }
        }
        let e = &self.emotion;
        if self.break_multipliers.iter().chain(&e.duration).any(|m| !(*m > 0.0)) {
            return bad("duration multipliers must be positive".into());
        }
        if !(e.question_rise > 0.0) || !(e.question_rise_span > 0.0 && e.question_rise_span <= 1.0) {
            return bad("question rise and its span must be positive".into());
        }
        if !(self.base_f0 > 0.0) || self.tone_depth < 0.0 || self.duration_jitter < 0.0 || self.f0_jitter_hz < 0.0 {
            return bad("F0 and jitter scales must be non-negative".into());
        }
        if self.min_phonemes < 2 || self.min_phonemes > self.max_phonemes {
            return bad(format!("bad phoneme range {}..={}", self.min_phonemes, self.max_phonemes));
        }
        Ok(())
    }

    /// Relative F0 of a tone at normalized phoneme time `tau`. Tone 0 is neutral.
    pub fn tone_shape(&self, tone: usize, tau: f64) -> f64 {
        let d = self.tone_depth;
        1.0 + d * match tone % 6 {
            0 => 0.0,
            1 => 1.0,
            2 => 2.0 * tau - 1.0,
            3 => -(PI * tau).sin(),
            4 => 1.0 - 2.0 * tau,
            _ => -0.5,
        }
    }

    /// Sentence-level F0 factor at normalized utterance time `u`.
    pub fn emotion_contour(&self, emotion: Emotion, u: f64) -> f64 {
        let e = &self.emotion;
        match emotion {
            Emotion::Declarative => 1.0 - e.declination * u,
            Emotion::Interrogative => {
                let start = 1.0 - e.question_rise_span;
                1.0 + e.question_rise * ((u - start) / e.question_rise_span).clamp(0.0, 1.0)
            }
            Emotion::Exclamatory => (1.0 + e.exclamation_f0_gain) * (1.0 - e.declination * u),
        }
    }

    /// Expected (jitter-free, unrounded) duration of a phoneme.
    pub fn mean_duration(&self, phoneme: usize, break_level: usize, emotion: Emotion) -> f64 {
        self.phonemes[phoneme].base_duration_frames as f64
            * self.break_multipliers[break_level]
            * self.emotion.duration[emotion.index()]
    }
}

/// Scales `shape` so that random-phase frames with unit excitation per bin overlap-add to
/// unit RMS: per-sample variance of one frame is `sum|Z|^2 / N^2`, and least-squares
/// overlap-add divides it by `sum(w^2) / hop`.
fn scale_envelope(shape: &[f64], fft_size: usize, hop: usize, window_energy: f64) -> Vec<f64> {
    let last = shape.len() - 1;
    let full: f64 = shape
        .iter()
        .enumerate()
        .map(|(k, v)| if k == 0 || k == last { v * v } else { 2.0 * v * v })
        .sum();
    let n = fft_size as f64;
    let c = (window_energy * n * n / (hop as f64 * full)).sqrt();
    shape.iter().map(|v| v * c).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub emotion: Emotion,
    pub labels: Vec<PhonemeLabel>,
    pub durations: DurationSeq,
    pub frames: AcousticFrames,
    pub waveform: Vec<f64>,
}

impl Utterance {
    /// `ln(frames)` per phoneme.
    pub fn log_durations(&self) -> Vec<f64> {
        self.durations.frames().iter().map(|&d| duration_encode(d).expect("durations are >= 1")).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub schema: LinguisticSchema,
    pub analysis: AnalysisConfig,
    pub utterances: Vec<Utterance>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn subset(&self, utterances: Vec<Utterance>) -> Corpus {
        Corpus { schema: self.schema.clone(), analysis: self.analysis.clone(), utterances }
    }
}

/// Sentence types for `n` utterances: 60/30/10 percent (rounded), shuffled by `rng`.
fn emotion_plan(n: usize, rng: &mut SeededRng) -> Vec<Emotion> {
    let inter = (0.3 * n as f64).round() as usize;
    let excl = ((0.1 * n as f64).round() as usize).min(n - inter);
    let mut plan = vec![Emotion::Declarative; n - inter - excl];
    plan.extend(std::iter::repeat(Emotion::Interrogative).take(inter));
    plan.extend(std::iter::repeat(Emotion::Exclamatory).take(excl));
    plan.shuffle(rng);
    plan
}

pub fn generate_corpus(spec: &ToyLanguageSpec, schema: &LinguisticSchema, cfg: &AnalysisConfig, n: usize, seed: u64) -> Result<Corpus> {
    if n < 1 {
        return Err(Error::Argument("corpus size must be at least 1".into()));
    }
    spec.validate()?;
    cfg.validate()?;
    if spec.phonemes[0].envelope.len() != cfg.bins() || spec.phonemes[0].base_cap.len() != cfg.cap_bands() {
        return Err(Error::Config("toy language was built for a different analysis configuration".into()));
    }
    let plan = emotion_plan(n, &mut SeededRng::seed_from_u64(seed));
    let utterances = plan
        .into_iter()
        .enumerate()
        .map(|(i, emotion)| {
            // one independent stream per utterance: results do not depend on generation order
            let mut rng = SeededRng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            generate_utterance(spec, schema, cfg, &format!("u{:04}", i + 1), emotion, &mut rng)
        })
        .collect::<Result<_>>()?;
    Ok(Corpus { schema: schema.clone(), analysis: cfg.clone(), utterances })
}

struct Feature {
    index: usize,
    cardinality: usize,
}

fn feature(schema: &LinguisticSchema, name: &str) -> Result<Feature> {
    let index = schema
        .index_of(name)
        .ok_or_else(|| Error::SchemaMismatch { feature: name.into(), detail: "required by the toy language".into() })?;
    Ok(Feature { index, cardinality: schema.features()[index].cardinality })
}

fn generate_labels(
    spec: &ToyLanguageSpec,
    schema: &LinguisticSchema,
    emotion: Emotion,
    rng: &mut SeededRng,
) -> Result<Vec<PhonemeLabel>> {
    let [ph, tone, stress, brk, pros, syn, pos, emo] =
        [PHONEME_ID, TONE, STRESS, BREAK_LEVEL, PROSODIC_LEVEL, SYNTACTIC_LEVEL, POS_TAG, EMOTION_TYPE]
            .map(|f| feature(schema, f));
    let (ph, tone, stress, brk, pros, syn, pos, emo) = (ph?, tone?, stress?, brk?, pros?, syn?, pos?, emo?);
    let len = rng.gen_range(spec.min_phonemes..=spec.max_phonemes);
    let top_break = brk.cardinality - 1;
    let mut labels = Vec::with_capacity(len);
    // words of 2..4 phonemes; a phrase break roughly mid-sentence
    let mut word_left = 0;
    let mut word_pos = 0;
    let phrase_at = len / 2;
    for i in 0..len {
        if word_left == 0 {
            word_left = rng.gen_range(2..=4);
            word_pos = rng.gen_range(0..pos.cardinality);
        }
        word_left -= 1;
        let p = rng.gen_range(0..ph.cardinality.min(spec.phonemes.len()));
        let voiced = spec.phonemes[p].voiced;
        let break_level = if i + 1 == len {
            top_break
        } else if i + 1 == phrase_at && top_break >= 2 {
            top_break - 1
        } else if word_left == 0 {
            1.min(top_break)
        } else {
            0
        };
        let mut v = vec![0; schema.features().len()];
        v[ph.index] = p;
        v[tone.index] = if voiced { rng.gen_range(1..tone.cardinality) } else { 0 };
        v[stress.index] = rng.gen_range(0..stress.cardinality);
        v[brk.index] = break_level;
        v[pros.index] = (break_level * pros.cardinality / brk.cardinality).min(pros.cardinality - 1);
        v[syn.index] = if i < phrase_at { 0 } else { 1.min(syn.cardinality - 1) };
        v[pos.index] = word_pos;
        v[emo.index] = emotion.index();
        labels.push(PhonemeLabel { values: v });
    }
    Ok(labels)
}

fn generate_utterance(
    spec: &ToyLanguageSpec,
    schema: &LinguisticSchema,
    cfg: &AnalysisConfig,
    id: &str,
    emotion: Emotion,
    rng: &mut SeededRng,
) -> Result<Utterance> {
    let labels = generate_labels(spec, schema, emotion, rng)?;
    let [ph, tone, stress, brk] = [PHONEME_ID, TONE, STRESS, BREAK_LEVEL].map(|f| feature(schema, f).map(|f| f.index));
    let (ph, tone, stress, brk) = (ph?, tone?, stress?, brk?);
    let dur_noise = Normal::new(0.0, spec.duration_jitter).map_err(|e| Error::Config(e.to_string()))?;
    let f0_noise = Normal::new(0.0, spec.f0_jitter_hz).map_err(|e| Error::Config(e.to_string()))?;

    let mut durations = Vec::with_capacity(labels.len());
    let mut offsets = Vec::with_capacity(labels.len());
    for l in &labels {
        let mean = spec.mean_duration(l.values[ph], l.values[brk], emotion);
        let d = (mean * dur_noise.sample(rng).exp()).round().max(1.0) as u32;
        durations.push(d);
        offsets.push(f0_noise.sample(rng));
    }
    let total: usize = durations.iter().map(|&d| d as usize).sum();
    let exclaim_energy = if emotion == Emotion::Exclamatory {
        spec.emotion.exclamation_energy_db / 20.0 * 10f64.ln()
    } else {
        0.0
    };

    let bins = cfg.bins();
    let bands = cfg.cap_bands();
    let mut spec_rows = Tensor::zeros(&[total, bins]);
    let mut cap = Tensor::zeros(&[total, bands]);
    let mut energy = Vec::with_capacity(total);
    let mut f0 = Vec::with_capacity(total);
    let mut t = 0;
    for ((l, &d), &offset) in labels.iter().zip(&durations).zip(&offsets) {
        let p = &spec.phonemes[l.values[ph]];
        let log_env: Vec<f64> = p.envelope.iter().map(|v| v.max(cfg.log_floor).ln()).collect();
        let e = p.base_energy + 0.1 * l.values[stress] as f64 + exclaim_energy;
        for i in 0..d as usize {
            spec_rows.row_mut(t).copy_from_slice(&log_env);
            cap.row_mut(t).copy_from_slice(&p.base_cap);
            energy.push(e);
            f0.push(if p.voiced {
                let tau = (i as f64 + 0.5) / d as f64;
                let u = (t as f64 + 0.5) / total as f64;
                let hz = spec.base_f0 * spec.tone_shape(l.values[tone], tau) * spec.emotion_contour(emotion, u)
                    * (1.0 + 0.03 * l.values[stress] as f64)
                    + offset;
                hz.max(40.0)
            } else {
                0.0
            });
            t += 1;
        }
    }
    let (lf0, uv) = f0_encode(&f0)?;
    let mut frames = AcousticFrames::new(spec_rows, energy, cap, lf0, uv)?;
    frames.quantize_f32();
    let waveform = quantize_pcm16(&source_filter_synthesize(&frames, cfg, rng.gen())?);
    Ok(Utterance {
        id: id.to_string(),
        emotion,
        labels,
        durations: DurationSeq::new(durations)?,
        frames,
        waveform,
    })
}

/// Deterministic train/validation partition: `max(1, round(n * fraction))` utterances go to
/// validation.
pub fn split_train_val(corpus: &Corpus, val_fraction: f64, seed: u64) -> Result<(Corpus, Corpus)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::Argument(format!("validation fraction must be in (0, 1), got {val_fraction}")));
    }
    let n = corpus.len();
    if n < 2 {
        return Err(Error::Argument(format!("need at least 2 utterances to split, got {n}")));
    }
    let n_val = ((n as f64 * val_fraction).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut SeededRng::seed_from_u64(seed));
    let mut is_val = vec![false; n];
    order[..n_val].iter().for_each(|&i| is_val[i] = true);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (u, v) in corpus.utterances.iter().zip(is_val) {
        if v { &mut val } else { &mut train }.push(u.clone());
    }
    Ok((corpus.subset(train), corpus.subset(val)))
}

/// Log-domain duration RMSE of the best label-only predictor: the mean log duration of each
/// (phoneme, break level, sentence type) cell estimated on `fit`, applied to `eval` (unseen
/// cells fall back to the global mean).
pub fn duration_oracle_rmse(fit: &Corpus, eval: &Corpus) -> Result<f64> {
    let ph = feature(&fit.schema, PHONEME_ID)?.index;
    let brk = feature(&fit.schema, BREAK_LEVEL)?.index;
    let key = |u: &Utterance, l: &PhonemeLabel| (l.values[ph], l.values[brk], u.emotion);
    let mut cells: BTreeMap<(usize, usize, Emotion), (f64, usize)> = BTreeMap::new();
    let (mut sum, mut count) = (0.0, 0usize);
    for u in &fit.utterances {
        for (l, y) in u.labels.iter().zip(u.log_durations()) {
            let c = cells.entry(key(u, l)).or_insert((0.0, 0));
            c.0 += y;
            c.1 += 1;
            sum += y;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Argument("oracle needs a non-empty fitting set".into()));
    }
    let global = sum / count as f64;
    let (mut pred, mut target) = (Vec::new(), Vec::new());
    for u in &eval.utterances {
        for (l, y) in u.labels.iter().zip(u.log_durations()) {
            pred.push(cells.get(&key(u, l)).map_or(global, |c| c.0 / c.1 as f64));
            target.push(y);
        }
    }
    if pred.is_empty() {
        return Err(Error::Argument("oracle needs a non-empty evaluation set".into()));
    }
    let mse = pred.iter().zip(&target).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / pred.len() as f64;
    Ok(mse.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestEntry {
    id: String,
    emotion: Emotion,
    phonemes: usize,
    frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    schema: LinguisticSchema,
    analysis: AnalysisConfig,
    utterances: Vec<ManifestEntry>,
}

/// Writes `manifest.json` plus `{id}.json` (labels with frame counts), `{id}.wav` and
/// `{id}.feat` per utterance.
pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = Manifest {
        format: CORPUS_FORMAT.into(),
        version: CORPUS_VERSION,
        schema: corpus.schema.clone(),
        analysis: corpus.analysis.clone(),
        utterances: corpus
            .utterances
            .iter()
            .map(|u| ManifestEntry { id: u.id.clone(), emotion: u.emotion, phonemes: u.labels.len(), frames: u.frames.len() })
            .collect(),
    };
    let path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    for u in &corpus.utterances {
        let labels = LabelUtterance::from_labels(&u.id, &u.labels, &corpus.schema, Some(&u.durations));
        write_label_file(&dir.join(format!("{}.json", u.id)), &[labels])?;
        write_wav(&dir.join(format!("{}.wav", u.id)), &u.waveform, corpus.analysis.sample_rate)?;
        let feat = dir.join(format!("{}.feat", u.id));
        std::fs::write(&feat, features_to_bytes(&u.frames)).map_err(|e| Error::io(&feat, e))?;
    }
    Ok(())
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    if manifest.format != CORPUS_FORMAT || manifest.version != CORPUS_VERSION {
        return Err(Error::format(
            &path,
            format!("unsupported corpus format `{}` version {}", manifest.format, manifest.version),
        ));
    }
    let utterances = manifest
        .utterances
        .iter()
        .map(|entry| {
            let label_path = dir.join(format!("{}.json", entry.id));
            let records = read_label_file(&label_path)?;
            let [rec] = records.as_slice() else {
                return Err(Error::format(&label_path, format!("expected one utterance, found {}", records.len())));
            };
            let labels = rec.to_labels(&manifest.schema)?;
            let durations = rec
                .durations()?
                .ok_or_else(|| Error::format(&label_path, "missing frame counts"))?;
            let feat_path = dir.join(format!("{}.feat", entry.id));
            let frames = read_features(&feat_path)?;
            if frames.len() != durations.total() || frames.len() != entry.frames || labels.len() != entry.phonemes {
                return Err(Error::format(
                    &feat_path,
                    format!("{} frames, durations sum to {}, manifest says {}", frames.len(), durations.total(), entry.frames),
                ));
            }
            let wav_path = dir.join(format!("{}.wav", entry.id));
            let (waveform, _) = read_wav(&wav_path)?;
            Ok(Utterance { id: entry.id.clone(), emotion: entry.emotion, labels, durations, frames, waveform })
        })
        .collect::<Result<_>>()?;
    Ok(Corpus { schema: manifest.schema, analysis: manifest.analysis, utterances })
}
