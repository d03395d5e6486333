//! Training loops, validation tracking, evaluation metrics and the grouping ablation.
//!
//! Updates are per utterance (batch size one) in a seeded shuffled order. Validation runs
//! in inference mode on a copy of the model rounded to f32, i.e. on exactly the state a
//! checkpoint would hold, so a reloaded best checkpoint reproduces its recorded loss.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::cbhg::{BankLayout, GroupedInput};
use crate::codec::AcousticFrames;
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::frontend::{duration_decode, encode_sequence, Emotion};
use crate::models::{
    acoustic_loss, duration_loss, quantize_f32, AcousticConfig, AcousticLoss, AcousticModel, DurationModel,
    LossWeights, Stream,
};
use crate::nn::{clip_grad_norm, AdamConfig, AdamState, Parameterized, SeededRng};

pub const HISTORY_VERSION: u32 = 1;
pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub weights: LossWeights,
    /// Stop after this many consecutive epochs without a validation improvement.
    pub patience: usize,
    pub clip_norm: f64,
    /// Where to write the best checkpoint, if anywhere.
    pub checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            lr: 1e-3,
            seed: 7,
            weights: LossWeights::default(),
            patience: 20,
            clip_norm: 5.0,
            checkpoint: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("gradient clip norm must be positive".into()));
        }
        self.weights.validate()
    }
}

/// Mean per-utterance losses of one pass. For the duration model only `total` is set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StreamLosses {
    pub total: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub spec: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub energy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub cap: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub lf0: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub uv: Option<f64>,
}

impl StreamLosses {
    fn scalar(total: f64) -> Self {
        StreamLosses { total, spec: None, energy: None, cap: None, lf0: None, uv: None }
    }

    fn mean_of(losses: &[AcousticLoss]) -> Self {
        let n = losses.len() as f64;
        let m = |f: fn(&AcousticLoss) -> f64| losses.iter().map(f).sum::<f64>() / n;
        StreamLosses {
            total: m(|l| l.total),
            spec: Some(m(|l| l.spec)),
            energy: Some(m(|l| l.energy)),
            cap: Some(m(|l| l.cap)),
            lf0: Some(m(|l| l.lf0)),
            uv: Some(m(|l| l.uv)),
        }
    }

    pub fn stream(&self, s: Stream) -> Option<f64> {
        match s {
            Stream::Spec => self.spec,
            Stream::Energy => self.energy,
            Stream::Cap => self.cap,
            Stream::Lf0 => self.lf0,
            Stream::Uv => self.uv,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: StreamLosses,
    pub val: StreamLosses,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossHistory {
    pub version: u32,
    pub stage: String,
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose state was kept.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

impl LossHistory {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("history serializes");
        s.push('\n');
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

#[derive(Debug, Clone)]
pub struct Trained<M> {
    /// Best-validation state, already rounded to checkpoint precision.
    pub model: M,
    pub history: LossHistory,
}

struct DurationItem {
    id: String,
    input: GroupedInput,
    target: Vec<f64>,
}

struct AcousticItem {
    id: String,
    emotion: Emotion,
    input: GroupedInput,
    target: AcousticFrames,
}

fn duration_items(data: &Corpus) -> Result<Vec<DurationItem>> {
    data.utterances
        .iter()
        .map(|u| {
            Ok(DurationItem { id: u.id.clone(), input: encode_sequence(&u.labels, &data.schema)?, target: u.log_durations() })
        })
        .collect()
}

fn acoustic_items(model: &AcousticModel, data: &Corpus) -> Result<Vec<AcousticItem>> {
    if data.analysis != model.config.analysis {
        return Err(Error::Config("corpus analysis settings differ from the acoustic model's".into()));
    }
    data.utterances
        .iter()
        .map(|u| {
            let g = encode_sequence(&u.labels, &data.schema)?;
            Ok(AcousticItem {
                id: u.id.clone(),
                emotion: u.emotion,
                input: model.frame_input(&g, &u.durations)?,
                target: u.frames.clone(),
            })
        })
        .collect()
}

fn check_sets(train: &Corpus, val: &Corpus, schema: &crate::frontend::LinguisticSchema) -> Result<()> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Argument("training and validation sets must both be non-empty".into()));
    }
    if &train.schema != schema || &val.schema != schema {
        return Err(Error::SchemaMismatch {
            feature: "*".into(),
            detail: "corpus schema differs from the model's".into(),
        });
    }
    Ok(())
}

fn diverged(epoch: usize, id: &str, loss: f64) -> Error {
    Error::Training(format!("non-finite loss {loss} at epoch {epoch}, utterance `{id}`"))
}

/// Shared epoch loop: `step` trains on one item and returns its loss record, `validate`
/// scores a quantized copy. Tracks the best copy and stops on patience.
fn run_epochs<M, I, L>(
    model: &mut M,
    items: &[I],
    cfg: &TrainConfig,
    stage: &str,
    id_of: impl Fn(&I) -> &str,
    mut step: impl FnMut(&mut M, &I) -> Result<L>,
    total_of: impl Fn(&L) -> f64,
    summarize: impl Fn(&[L]) -> StreamLosses,
    validate: impl Fn(&M) -> Result<StreamLosses>,
    save: impl Fn(&M, &Path) -> Result<()>,
) -> Result<Trained<M>>
where
    M: Parameterized + Clone,
{
    cfg.validate()?;
    let mut adam = AdamState::new(&*model, AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
    let mut rng = SeededRng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(M, f64, usize)> = None;
    let mut stopped_early = false;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut losses = Vec::with_capacity(items.len());
        for &i in &order {
            let item = &items[i];
            model.zero_grad();
            let l = step(model, item)?;
            let total = total_of(&l);
            if !total.is_finite() {
                return Err(diverged(epoch, id_of(item), total));
            }
            clip_grad_norm(model, cfg.clip_norm);
            adam.step(model)
                .map_err(|e| Error::Training(format!("epoch {epoch}, utterance `{}`: {e}", id_of(item))))?;
            losses.push(l);
        }
        let mut snapshot = model.clone();
        quantize_f32(&mut snapshot);
        let val = validate(&snapshot)?;
        if !val.total.is_finite() {
            return Err(diverged(epoch, "<validation>", val.total));
        }
        epochs.push(EpochRecord { epoch, train: summarize(&losses), val });
        if best.as_ref().is_none_or(|b| val.total < b.1) {
            best = Some((snapshot, val.total, epoch));
        }
        let best_epoch = best.as_ref().map_or(epoch, |b| b.2);
        if epoch - best_epoch > cfg.patience {
            stopped_early = epoch < cfg.epochs;
            break;
        }
    }
    let (best_model, best_val_loss, best_epoch) = best.expect("at least one epoch ran");
    if let Some(path) = &cfg.checkpoint {
        save(&best_model, path)?;
    }
    Ok(Trained {
        model: best_model,
        history: LossHistory { version: HISTORY_VERSION, stage: stage.into(), epochs, best_epoch, best_val_loss, stopped_early },
    })
}

pub fn duration_validation_loss(model: &DurationModel, data: &Corpus) -> Result<f64> {
    let items = duration_items(data)?;
    mean_duration_loss(model, &items)
}

fn mean_duration_loss(model: &DurationModel, items: &[DurationItem]) -> Result<f64> {
    let mut sum = 0.0;
    for it in items {
        sum += duration_loss(&model.predict_log(&it.input)?, &it.target)?;
    }
    Ok(sum / items.len() as f64)
}

/// Trains on log durations with RMSE; returns the best-validation model and its history.
pub fn train_duration(model: &mut DurationModel, train: &Corpus, val: &Corpus, cfg: &TrainConfig) -> Result<Trained<DurationModel>> {
    check_sets(train, val, &model.config.schema)?;
    let train_items = duration_items(train)?;
    let val_items = duration_items(val)?;
    run_epochs(
        model,
        &train_items,
        cfg,
        "duration",
        |it| &it.id,
        |m, it| m.train_step(&it.input, &it.target),
        |l| *l,
        |ls| StreamLosses::scalar(ls.iter().sum::<f64>() / ls.len() as f64),
        |m| mean_duration_loss(m, &val_items).map(StreamLosses::scalar),
        |m, p| m.save(p),
    )
}

fn mean_acoustic_loss(model: &AcousticModel, items: &[AcousticItem], w: &LossWeights) -> Result<StreamLosses> {
    let losses = items
        .iter()
        .map(|it| acoustic_loss(&model.predict_raw(&it.input)?, &it.target, w))
        .collect::<Result<Vec<_>>>()?;
    Ok(StreamLosses::mean_of(&losses))
}

pub fn acoustic_validation_loss(model: &AcousticModel, data: &Corpus, w: &LossWeights) -> Result<StreamLosses> {
    mean_acoustic_loss(model, &acoustic_items(model, data)?, w)
}

/// Teacher-forced acoustic training: inputs are upsampled with ground-truth durations.
pub fn train_acoustic(model: &mut AcousticModel, train: &Corpus, val: &Corpus, cfg: &TrainConfig) -> Result<Trained<AcousticModel>> {
    check_sets(train, val, &model.config.schema)?;
    let train_items = acoustic_items(model, train)?;
    let val_items = acoustic_items(model, val)?;
    let w = cfg.weights;
    run_epochs(
        model,
        &train_items,
        cfg,
        "acoustic",
        |it| &it.id,
        |m, it| m.train_step(&it.input, &it.target, &w),
        |l| l.total,
        StreamLosses::mean_of,
        |m| mean_acoustic_loss(m, &val_items, &w),
        |m, p| m.save(p),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DurationMetrics {
    /// RMSE of `ln(frames)` over all phonemes.
    pub log_rmse: f64,
    /// Mean absolute error of decoded frame counts.
    pub frame_mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcousticMetrics {
    /// RMSE pooled over every frame (and bin) of the evaluated set.
    pub spec_rmse: f64,
    pub energy_rmse: f64,
    pub cap_rmse: f64,
    pub lf0_rmse: f64,
    /// F0 RMSE in Hz over frames voiced in both prediction and target.
    pub voiced_f0_rmse_hz: f64,
    pub jointly_voiced_frames: usize,
    pub uv_accuracy: f64,
    pub frames: usize,
    /// LF0 RMSE per sentence type (types absent from the set are omitted).
    pub lf0_rmse_by_emotion: BTreeMap<Emotion, f64>,
}

/// Predicted-duration pass: every phoneme's predicted frames are averaged and compared with
/// the average of its ground-truth frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndToEndMetrics {
    pub phoneme_spec_rmse: f64,
    pub phoneme_energy_rmse: f64,
    pub phoneme_lf0_rmse: f64,
    pub phoneme_uv_accuracy: f64,
    pub predicted_frames: usize,
    pub reference_frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub version: u32,
    pub utterances: usize,
    pub duration: DurationMetrics,
    /// Ground-truth durations.
    pub acoustic: AcousticMetrics,
    pub end_to_end: EndToEndMetrics,
}

#[derive(Default)]
struct Pooled {
    sq: f64,
    n: usize,
}

impl Pooled {
    fn add(&mut self, a: f64, b: f64) {
        self.sq += (a - b) * (a - b);
        self.n += 1;
    }

    fn rmse(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            (self.sq / self.n as f64).sqrt()
        }
    }
}

/// Compares predicted frames with reference frames of equal length.
pub fn acoustic_metrics(pairs: &[(Emotion, &AcousticFrames, &AcousticFrames)]) -> Result<AcousticMetrics> {
    let (mut spec, mut energy, mut cap, mut lf0, mut f0) =
        (Pooled::default(), Pooled::default(), Pooled::default(), Pooled::default(), Pooled::default());
    let mut by_emotion: BTreeMap<Emotion, Pooled> = BTreeMap::new();
    let (mut uv_ok, mut frames) = (0usize, 0usize);
    for &(emotion, pred, target) in pairs {
        if pred.len() != target.len() {
            return Err(Error::dim("predicted vs reference frames", &[target.len()], &[pred.len()]));
        }
        pred.spec.expect_shape(target.spec.shape(), "predicted spectrogram")?;
        pred.cap.expect_shape(target.cap.shape(), "predicted CAP")?;
        pred.spec.data().iter().zip(target.spec.data()).for_each(|(a, b)| spec.add(*a, *b));
        pred.cap.data().iter().zip(target.cap.data()).for_each(|(a, b)| cap.add(*a, *b));
        let emo = by_emotion.entry(emotion).or_default();
        for t in 0..pred.len() {
            energy.add(pred.energy[t], target.energy[t]);
            lf0.add(pred.lf0[t], target.lf0[t]);
            emo.add(pred.lf0[t], target.lf0[t]);
            if pred.uv[t] == target.uv[t] {
                uv_ok += 1;
            }
            if pred.uv[t] && target.uv[t] {
                f0.add(pred.lf0[t].exp(), target.lf0[t].exp());
            }
        }
        frames += pred.len();
    }
    Ok(AcousticMetrics {
        spec_rmse: spec.rmse(),
        energy_rmse: energy.rmse(),
        cap_rmse: cap.rmse(),
        lf0_rmse: lf0.rmse(),
        voiced_f0_rmse_hz: f0.rmse(),
        jointly_voiced_frames: f0.n,
        uv_accuracy: if frames == 0 { 1.0 } else { uv_ok as f64 / frames as f64 },
        frames,
        lf0_rmse_by_emotion: by_emotion.into_iter().map(|(e, p)| (e, p.rmse())).collect(),
    })
}

/// Per-phoneme means of each stream given the phoneme's frame counts.
fn phoneme_means(f: &AcousticFrames, durations: &[u32]) -> Vec<(Vec<f64>, f64, f64, f64)> {
    let mut out = Vec::with_capacity(durations.len());
    let mut t = 0;
    for &d in durations {
        let d = d as usize;
        let n = d as f64;
        let mut spec = vec![0.0; f.bins()];
        let (mut e, mut l, mut v) = (0.0, 0.0, 0.0);
        for i in t..t + d {
            spec.iter_mut().zip(f.spec.row(i)).for_each(|(s, x)| *s += x / n);
            e += f.energy[i] / n;
            l += f.lf0[i] / n;
            v += f64::from(u8::from(f.uv[i])) / n;
        }
        out.push((spec, e, l, v));
        t += d;
    }
    out
}

/// Duration metrics, teacher-forced acoustic metrics, and an end-to-end pass driven by
/// predicted durations (compared phoneme by phoneme).
pub fn evaluate(duration: &DurationModel, acoustic: &AcousticModel, data: &Corpus) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Argument("cannot evaluate on an empty dataset".into()));
    }
    if duration.config.schema != data.schema || acoustic.config.schema != data.schema {
        return Err(Error::SchemaMismatch { feature: "*".into(), detail: "corpus schema differs from the models'".into() });
    }
    let mut log = Pooled::default();
    let (mut abs_err, mut phonemes) = (0.0, 0usize);
    let mut tf_preds = Vec::with_capacity(data.len());
    let (mut e2e_spec, mut e2e_energy, mut e2e_lf0) = (Pooled::default(), Pooled::default(), Pooled::default());
    let (mut e2e_uv_ok, mut pred_frames, mut ref_frames) = (0usize, 0usize, 0usize);
    for u in &data.utterances {
        let g = encode_sequence(&u.labels, &data.schema)?;
        let y = duration.predict_log(&g)?;
        for (p, t) in y.iter().zip(u.log_durations()) {
            log.add(*p, t);
        }
        let predicted = duration.predict_durations(&g)?;
        for (p, t) in predicted.frames().iter().zip(u.durations.frames()) {
            abs_err += (*p as f64 - *t as f64).abs();
        }
        phonemes += u.labels.len();

        tf_preds.push(acoustic.predict_acoustics(&acoustic.frame_input(&g, &u.durations)?)?);

        let e2e = acoustic.predict_acoustics(&acoustic.frame_input(&g, &predicted)?)?;
        let pm = phoneme_means(&e2e, predicted.frames());
        let rm = phoneme_means(&u.frames, u.durations.frames());
        for (p, r) in pm.iter().zip(&rm) {
            p.0.iter().zip(&r.0).for_each(|(a, b)| e2e_spec.add(*a, *b));
            e2e_energy.add(p.1, r.1);
            e2e_lf0.add(p.2, r.2);
            if (p.3 > 0.5) == (r.3 > 0.5) {
                e2e_uv_ok += 1;
            }
        }
        pred_frames += e2e.len();
        ref_frames += u.frames.len();
    }
    let pairs: Vec<_> = data.utterances.iter().zip(&tf_preds).map(|(u, p)| (u.emotion, p, &u.frames)).collect();
    Ok(EvalReport {
        version: REPORT_VERSION,
        utterances: data.len(),
        duration: DurationMetrics { log_rmse: log.rmse(), frame_mae: abs_err / phonemes as f64 },
        acoustic: acoustic_metrics(&pairs)?,
        end_to_end: EndToEndMetrics {
            phoneme_spec_rmse: e2e_spec.rmse(),
            phoneme_energy_rmse: e2e_energy.rmse(),
            phoneme_lf0_rmse: e2e_lf0.rmse(),
            phoneme_uv_accuracy: e2e_uv_ok as f64 / phonemes as f64,
            predicted_frames: pred_frames,
            reference_frames: ref_frames,
        },
    })
}

/// Teacher-forced acoustic metrics only (no duration model involved).
pub fn evaluate_acoustic(acoustic: &AcousticModel, data: &Corpus) -> Result<AcousticMetrics> {
    if data.is_empty() {
        return Err(Error::Argument("cannot evaluate on an empty dataset".into()));
    }
    let items = acoustic_items(acoustic, data)?;
    let preds = items.iter().map(|it| acoustic.predict_acoustics(&it.input)).collect::<Result<Vec<_>>>()?;
    let pairs: Vec<_> = items.iter().zip(&preds).map(|(it, p)| (it.emotion, p, &it.target)).collect();
    acoustic_metrics(&pairs)
}

/// Duration metrics only.
pub fn evaluate_duration(duration: &DurationModel, data: &Corpus) -> Result<DurationMetrics> {
    if data.is_empty() {
        return Err(Error::Argument("cannot evaluate on an empty dataset".into()));
    }
    let mut log = Pooled::default();
    let (mut abs_err, mut n) = (0.0, 0usize);
    for it in duration_items(data)? {
        for (p, t) in duration.predict_log(&it.input)?.iter().zip(&it.target) {
            log.add(*p, *t);
            abs_err += (duration_decode(*p) as f64 - t.exp().round()).abs();
            n += 1;
        }
    }
    Ok(DurationMetrics { log_rmse: log.rmse(), frame_mae: abs_err / n as f64 })
}

/// Single-bank channel count whose model size is closest to the grouped configuration.
pub fn matched_single_bank(cfg: &AcousticConfig) -> Result<(AcousticConfig, usize, usize)> {
    let count = |c: &AcousticConfig| -> Result<usize> { Ok(AcousticModel::new(c.clone())?.param_count()) };
    let grouped = AcousticConfig { trunk: crate::cbhg::CbhgConfig { bank_layout: BankLayout::Grouped, ..cfg.trunk.clone() }, ..cfg.clone() };
    let target = count(&grouped)?;
    let single_with = |c: usize| AcousticConfig {
        trunk: crate::cbhg::CbhgConfig { bank_layout: BankLayout::Single { channels_per_filter: c }, ..cfg.trunk.clone() },
        ..cfg.clone()
    };
    // parameter count is affine in the channel count: two probes locate the best integer
    let base = cfg.trunk.channels_per_filter.max(1);
    let (p1, p2) = (count(&single_with(base))? as f64, count(&single_with(base + 1))? as f64);
    let slope = p2 - p1;
    let guess = (base as f64 + (target as f64 - p1) / slope).round().max(1.0) as usize;
    let mut best = (usize::MAX, guess, 0);
    for c in guess.saturating_sub(1).max(1)..=guess + 1 {
        let n = count(&single_with(c))?;
        if n.abs_diff(target) < best.0 {
            best = (n.abs_diff(target), c, n);
        }
    }
    Ok((single_with(best.1), target, best.2))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub name: String,
    pub bank_layout: BankLayout,
    pub parameters: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub metrics: AcousticMetrics,
    /// LF0 RMSE on the interrogative utterances of the evaluated set, if any.
    pub interrogative_lf0_rmse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub version: u32,
    pub evaluated_on: String,
    pub grouped: VariantReport,
    pub single: VariantReport,
    /// `|params(single) - params(grouped)| / params(grouped)`.
    pub parameter_gap: f64,
}

/// Trains the grouped acoustic model and a size-matched single-bank model with identical
/// seeds and schedules, then evaluates both on `val` (teacher-forced).
pub fn ablate_grouping(train: &Corpus, val: &Corpus, grouped_cfg: &AcousticConfig, cfg: &TrainConfig) -> Result<AblationReport> {
    let (single_cfg, n_grouped, n_single) = matched_single_bank(grouped_cfg)?;
    let grouped_cfg =
        AcousticConfig { trunk: crate::cbhg::CbhgConfig { bank_layout: BankLayout::Grouped, ..grouped_cfg.trunk.clone() }, ..grouped_cfg.clone() };
    let run = |name: &str, c: &AcousticConfig| -> Result<VariantReport> {
        let mut model = AcousticModel::new(c.clone())?;
        let parameters = model.param_count();
        let tcfg = TrainConfig { checkpoint: None, ..cfg.clone() };
        let trained = train_acoustic(&mut model, train, val, &tcfg)?;
        let metrics = evaluate_acoustic(&trained.model, val)?;
        Ok(VariantReport {
            name: name.into(),
            bank_layout: c.trunk.bank_layout.clone(),
            parameters,
            best_epoch: trained.history.best_epoch,
            best_val_loss: trained.history.best_val_loss,
            interrogative_lf0_rmse: metrics.lf0_rmse_by_emotion.get(&Emotion::Interrogative).copied(),
            metrics,
        })
    };
    let grouped = run("grouped", &grouped_cfg)?;
    let single = run("single", &single_cfg)?;
    debug_assert_eq!((grouped.parameters, single.parameters), (n_grouped, n_single));
    Ok(AblationReport {
        version: REPORT_VERSION,
        evaluated_on: "validation".into(),
        parameter_gap: n_single.abs_diff(n_grouped) as f64 / n_grouped as f64,
        grouped,
        single,
    })
}
